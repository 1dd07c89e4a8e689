//! Label masks, soft class-probability masks, and the losses over them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// HxW integer class labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::ShapeMismatch {
                context: "LabelMask::new",
                expected: vec![h * w],
                got: vec![labels.len()],
            });
        }
        Ok(LabelMask { h, w, labels })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        LabelMask {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Nearest-neighbor resampling of a label mask at pixel centers. Output
/// labels are always drawn from the input.
pub fn resize_nearest_labels(m: &LabelMask, h2: usize, w2: usize) -> Result<LabelMask> {
    if h2 == 0 || w2 == 0 {
        return Err(Error::invalid(
            "resize_nearest_labels: target dims must be >= 1".to_string(),
        ));
    }
    let (h, w) = m.dims();
    let sy_scale = h as f64 / h2 as f64;
    let sx_scale = w as f64 / w2 as f64;
    let mut labels = Vec::with_capacity(h2 * w2);
    for oy in 0..h2 {
        let sy = (((oy as f64 + 0.5) * sy_scale).floor() as usize).min(h - 1);
        for ox in 0..w2 {
            let sx = (((ox as f64 + 0.5) * sx_scale).floor() as usize).min(w - 1);
            labels.push(m.get(sy, sx));
        }
    }
    LabelMask::new(h2, w2, labels)
}

/// HxWx(N+1) per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    probs: Tensor,
}

impl SoftMask {
    /// Validates per-pixel normalization (sum 1 within 1e-9, entries in [0,1]).
    pub fn from_probs(probs: Tensor) -> Result<Self> {
        if probs.shape().len() != 3 {
            return Err(Error::invalid("SoftMask: probs must be HxWxK".to_string()));
        }
        let k = probs.shape()[2];
        if k == 0 {
            return Err(Error::invalid("SoftMask: zero classes".to_string()));
        }
        for row in probs.data().chunks_exact(k) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "SoftMask: pixel distribution sums to {sum}"
                )));
            }
            if row.iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::invalid("SoftMask: probability outside [0,1]".to_string()));
            }
        }
        Ok(SoftMask { probs })
    }

    pub(crate) fn from_probs_unchecked(probs: Tensor) -> Self {
        SoftMask { probs }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.probs.shape()[0], self.probs.shape()[1])
    }

    pub fn n_classes(&self) -> usize {
        self.probs.shape()[2]
    }

    #[inline]
    pub fn prob(&self, y: usize, x: usize, c: usize) -> f64 {
        self.probs.data()[self.probs.idx3(y, x, c)]
    }
}

/// Mean over pixels of -log p(target class), with probabilities clamped to
/// [`LOG_CLAMP`] before the log.
pub fn cross_entropy(soft: &SoftMask, target: &LabelMask) -> Result<f64> {
    if soft.dims() != target.dims() {
        let (h, w) = soft.dims();
        let (th, tw) = target.dims();
        return Err(Error::ShapeMismatch {
            context: "cross_entropy",
            expected: vec![h, w],
            got: vec![th, tw],
        });
    }
    let k = soft.n_classes();
    let (h, w) = soft.dims();
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let t = target.get(y, x) as usize;
            if t >= k {
                return Err(Error::LabelOutOfRange { label: t, classes: k });
            }
            acc += -soft.prob(y, x, t).max(LOG_CLAMP).ln();
        }
    }
    Ok(acc / (h * w) as f64)
}
