//! Prototype extraction and cosine-similarity pixel classification.
//!
//! Prototypes are per-class mean feature vectors pooled under a label mask;
//! prediction scores each pixel by scaled cosine similarity against every
//! prototype row and softmaxes over classes. The analytic backward of the
//! cross-entropy / softmax / cosine chain is what the inner loop descends on.

use crate::error::{Error, Result};
use crate::mask::{cross_entropy, LabelMask, SoftMask, LOG_CLAMP};
use crate::tensor::{softmax_rows, Tensor};

/// Rows below this Euclidean norm make cosine ill-defined and are rejected.
pub const MIN_PROTO_NORM: f64 = 1e-9;

/// (N+1)xC matrix of class prototypes; row 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    protos: Tensor,
}

impl PrototypeSet {
    pub fn new(protos: Tensor) -> Result<Self> {
        if protos.shape().len() != 2 {
            return Err(Error::invalid("PrototypeSet: expected (N+1)xC matrix".to_string()));
        }
        let (rows, c) = (protos.shape()[0], protos.shape()[1]);
        if rows < 2 {
            return Err(Error::invalid(
                "PrototypeSet: needs background plus at least one class".to_string(),
            ));
        }
        protos.assert_finite("PrototypeSet")?;
        for r in 0..rows {
            let row = &protos.data()[r * c..(r + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= MIN_PROTO_NORM {
                return Err(Error::DegeneratePrototype { class: r });
            }
        }
        Ok(PrototypeSet { protos })
    }

    /// Number of classes including background (N+1).
    pub fn n_classes(&self) -> usize {
        self.protos.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.protos.shape()[1]
    }

    pub fn row(&self, c: usize) -> &[f64] {
        let ch = self.channels();
        &self.protos.data()[c * ch..(c + 1) * ch]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.protos
    }

    pub fn into_tensor(self) -> Tensor {
        self.protos
    }
}

/// Per-class pooled means plus the pixel counts behind them. A count of
/// zero marks an empty class; converting to a [`PrototypeSet`] then needs a
/// fallback row or fails.
#[derive(Debug, Clone)]
pub struct PooledPrototypes {
    pub means: Tensor,
    pub counts: Vec<usize>,
}

impl PooledPrototypes {
    pub fn empty_classes(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn into_prototypes(self) -> Result<PrototypeSet> {
        if let Some(&class) = self.empty_classes().first() {
            return Err(Error::EmptyClass { class });
        }
        PrototypeSet::new(self.means)
    }

    /// Empty classes take the corresponding row of `fallback`.
    pub fn into_prototypes_or(mut self, fallback: &PrototypeSet) -> Result<PrototypeSet> {
        let c = self.means.shape()[1];
        if fallback.n_classes() != self.counts.len() || fallback.channels() != c {
            return Err(Error::ShapeMismatch {
                context: "PooledPrototypes fallback",
                expected: vec![self.counts.len(), c],
                got: vec![fallback.n_classes(), fallback.channels()],
            });
        }
        for (cls, &n) in self.counts.iter().enumerate() {
            if n == 0 {
                self.means.data_mut()[cls * c..(cls + 1) * c].copy_from_slice(fallback.row(cls));
            }
        }
        PrototypeSet::new(self.means)
    }
}

/// Masked average pooling over K shots jointly: prototype c is the mean of
/// every feature vector labeled c across all provided maps.
pub fn masked_average_pool(
    feats: &[&Tensor],
    masks: &[&LabelMask],
    n_classes: usize,
) -> Result<PooledPrototypes> {
    if feats.is_empty() || feats.len() != masks.len() {
        return Err(Error::invalid(
            "masked_average_pool: need equal, nonzero numbers of feature maps and masks".to_string(),
        ));
    }
    if n_classes < 2 {
        return Err(Error::invalid(
            "masked_average_pool: need background plus at least one class".to_string(),
        ));
    }
    let c = feats[0].shape()[2];
    let mut sums = Tensor::zeros(vec![n_classes, c]);
    let mut counts = vec![0usize; n_classes];
    for (feat, mask) in feats.iter().zip(masks) {
        if feat.shape().len() != 3 || feat.shape()[2] != c {
            return Err(Error::ShapeMismatch {
                context: "masked_average_pool feature channels",
                expected: vec![c],
                got: feat.shape().to_vec(),
            });
        }
        let (h, w) = mask.dims();
        if feat.shape()[0] != h || feat.shape()[1] != w {
            return Err(Error::ShapeMismatch {
                context: "masked_average_pool mask vs features",
                expected: feat.shape()[..2].to_vec(),
                got: vec![h, w],
            });
        }
        for y in 0..h {
            for x in 0..w {
                let cls = mask.get(y, x) as usize;
                if cls >= n_classes {
                    return Err(Error::LabelOutOfRange {
                        label: cls,
                        classes: n_classes,
                    });
                }
                counts[cls] += 1;
                let fbase = feat.idx3(y, x, 0);
                let sbase = cls * c;
                for ch in 0..c {
                    sums.data_mut()[sbase + ch] += feat.data()[fbase + ch];
                }
            }
        }
    }
    for (cls, &n) in counts.iter().enumerate() {
        if n > 0 {
            for ch in 0..c {
                sums.data_mut()[cls * c + ch] /= n as f64;
            }
        }
    }
    Ok(PooledPrototypes {
        means: sums,
        counts,
    })
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// score[y, x, c] = alpha * cos(Q[y, x, :], P[c, :]). Query pixels with norm
/// below [`MIN_PROTO_NORM`] score 0 against every class.
pub fn cosine_score_map(q: &Tensor, p: &PrototypeSet, alpha: f64) -> Result<Tensor> {
    if q.shape().len() != 3 || q.shape()[2] != p.channels() {
        return Err(Error::ShapeMismatch {
            context: "cosine_score_map channels",
            expected: vec![p.channels()],
            got: q.shape().to_vec(),
        });
    }
    let (h, w, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let k = p.n_classes();
    let pnorms: Vec<f64> = (0..k).map(|cls| norm(p.row(cls))).collect();
    let mut out = Tensor::zeros(vec![h, w, k]);
    for y in 0..h {
        for x in 0..w {
            let qbase = q.idx3(y, x, 0);
            let qv = &q.data()[qbase..qbase + c];
            let qn = norm(qv);
            let obase = (y * w + x) * k;
            if qn <= MIN_PROTO_NORM {
                continue; // zero-norm pixel: cosine 0 to all classes
            }
            for cls in 0..k {
                let cosv = dot(qv, p.row(cls)) / (qn * pnorms[cls]);
                out.data_mut()[obase + cls] = alpha * cosv;
            }
        }
    }
    Ok(out)
}

/// Per-pixel class probabilities: softmax over cosine scores.
pub fn soft_predict(q: &Tensor, p: &PrototypeSet, alpha: f64) -> Result<SoftMask> {
    let scores = cosine_score_map(q, p, alpha)?;
    let probs = softmax_rows(&scores)?;
    Ok(SoftMask::from_probs_unchecked(probs))
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn hard_mask(soft: &SoftMask) -> LabelMask {
    let (h, w) = soft.dims();
    let k = soft.n_classes();
    let mut labels = Vec::with_capacity(h * w);
    for row in soft.probs().data().chunks_exact(k) {
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        labels.push(best as u8);
    }
    LabelMask::new(h, w, labels).expect("argmax label mask has h*w entries")
}

/// Gradients of `cross_entropy(soft_predict(q, p, alpha), target)`.
#[derive(Debug, Clone)]
pub struct PredictGrads {
    pub d_query: Tensor,
    pub d_protos: Tensor,
}

/// Exact analytic gradient of the CE-softmax-cosine chain with respect to
/// both the query features and the prototypes.
///
/// Pixels whose target-class probability sits below the log clamp contribute
/// zero gradient (the clamped loss is flat there), and zero-norm query
/// pixels contribute zero as well, matching [`cosine_score_map`].
pub fn soft_predict_backward(
    q: &Tensor,
    p: &PrototypeSet,
    alpha: f64,
    target: &LabelMask,
) -> Result<PredictGrads> {
    if q.shape().len() != 3 || q.shape()[2] != p.channels() {
        return Err(Error::ShapeMismatch {
            context: "soft_predict_backward channels",
            expected: vec![p.channels()],
            got: q.shape().to_vec(),
        });
    }
    let (h, w, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if target.dims() != (h, w) {
        return Err(Error::ShapeMismatch {
            context: "soft_predict_backward target",
            expected: vec![h, w],
            got: vec![target.dims().0, target.dims().1],
        });
    }
    let k = p.n_classes();
    let pnorms: Vec<f64> = (0..k).map(|cls| norm(p.row(cls))).collect();
    if let Some(cls) = pnorms.iter().position(|&n| n <= MIN_PROTO_NORM) {
        return Err(Error::DegeneratePrototype { class: cls });
    }
    let inv_px = 1.0 / (h * w) as f64;

    let mut d_query = Tensor::zeros(q.shape().to_vec());
    let mut d_protos = Tensor::zeros(vec![k, c]);
    let mut scores = vec![0.0f64; k];
    let mut soft = vec![0.0f64; k];
    for y in 0..h {
        for x in 0..w {
            let t = target.get(y, x) as usize;
            if t >= k {
                return Err(Error::LabelOutOfRange { label: t, classes: k });
            }
            let qbase = q.idx3(y, x, 0);
            let qv = &q.data()[qbase..qbase + c];
            let qn = norm(qv);
            if qn <= MIN_PROTO_NORM {
                continue;
            }
            for (cls, s) in scores.iter_mut().enumerate() {
                *s = alpha * dot(qv, p.row(cls)) / (qn * pnorms[cls]);
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (dst, &s) in soft.iter_mut().zip(&scores) {
                *dst = (s - max).exp();
                sum += *dst;
            }
            for v in soft.iter_mut() {
                *v /= sum;
            }
            if soft[t] < LOG_CLAMP {
                continue; // clamp active: the loss is flat here
            }
            for cls in 0..k {
                let cosv = scores[cls] / alpha;
                let g_score = (soft[cls] - if cls == t { 1.0 } else { 0.0 }) * inv_px;
                let g_cos = g_score * alpha;
                let pv = p.row(cls);
                let pn = pnorms[cls];
                // d cos / d q = p/(|q||p|) - cos * q/|q|^2
                // d cos / d p = q/(|q||p|) - cos * p/|p|^2
                let qscale = g_cos / (qn * pn);
                let q_self = g_cos * cosv / (qn * qn);
                let p_self = g_cos * cosv / (pn * pn);
                for ch in 0..c {
                    d_query.data_mut()[qbase + ch] += qscale * pv[ch] - q_self * qv[ch];
                    d_protos.data_mut()[cls * c + ch] += qscale * qv[ch] - p_self * pv[ch];
                }
            }
        }
    }
    Ok(PredictGrads { d_query, d_protos })
}

/// Convenience: the loss whose gradient [`soft_predict_backward`] computes.
pub fn predict_loss(q: &Tensor, p: &PrototypeSet, alpha: f64, target: &LabelMask) -> Result<f64> {
    cross_entropy(&soft_predict(q, p, alpha)?, target)
}
