//! Finite-difference verification support.
//!
//! The episode backward pass is first order: inner-loop prototypes and all
//! argmax masks are constants. Checking it against finite differences
//! therefore needs a forward pass with exactly those quantities frozen,
//! which is what [`freeze_episode`] + [`frozen_episode_loss`] provide. The
//! numeric side is plain central differences over individual parameters.

use crate::embed::EmbedParams;
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::initmod::{generate_weights, init_query_protos, temp_query_protos};
use crate::inner::{inner_optimize, InitMode, InnerConfig};
use crate::mask::{cross_entropy, resize_nearest_labels, LabelMask};
use crate::outer::Model;
use crate::proto::{masked_average_pool, soft_predict, PrototypeSet};
use crate::tensor::{conv2d, relu, Tensor};

/// max over entries of |a - n| / max(1, |a|, |n|).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Smallest pre-activation magnitude the embedding produces on `img`;
/// gradient checks stay away from ReLU kinks by requiring this to exceed
/// the finite-difference perturbation's reach.
pub fn min_preact_magnitude(params: &EmbedParams, img: &Tensor) -> Result<f64> {
    let spec = params.spec();
    let pad = spec.dilation * (spec.kernel - 1) / 2;
    if spec.dilation != 1 {
        return Err(Error::invalid(
            "min_preact_magnitude supports dilation 1 only".to_string(),
        ));
    }
    let mut x = img.clone();
    let mut min = f64::INFINITY;
    let last = params.layers().len() - 1;
    for (i, kernel) in params.layers().iter().enumerate() {
        let y = conv2d(&x, kernel, spec.layer_stride(i), pad)?;
        if i < last {
            min = y.data().iter().fold(min, |m, v| m.min(v.abs()));
            x = relu(&y);
        } else {
            x = y;
        }
    }
    Ok(min)
}

/// Quantities the first-order contract treats as constants, captured at the
/// base parameters.
#[derive(Debug, Clone)]
pub struct FrozenEpisode {
    pub mode: InitMode,
    pub alpha: f64,
    pub weights: [f64; 3],
    /// Temporary query mask labels (argmax passes no gradient).
    pub mprime: LabelMask,
    /// Inner-loop output prototypes (detached).
    pub p_q: Option<PrototypeSet>,
}

/// Runs the pipeline once at the base parameters and captures everything
/// the stop-gradient forward keeps fixed.
pub fn freeze_episode(
    model: &Model,
    episode: &Episode,
    inner_cfg: &InnerConfig,
    weights: [f64; 3],
) -> Result<FrozenEpisode> {
    let parts = pipeline_parts(model, episode)?;
    let (mprime_soft, mprime) =
        crate::initmod::temp_query_mask(&parts.q_feat, &parts.p_s, inner_cfg.alpha)?;
    let _ = mprime_soft;
    let p_q = match inner_cfg.init_mode {
        InitMode::Baseline => None,
        InitMode::SupportInit => {
            let p0 = parts.p_s.clone();
            let (_, target) = crate::initmod::build_target_mask(&parts.q_feat, &p0, inner_cfg.alpha)?;
            Some(inner_optimize(&parts.q_feat, p0, &target, inner_cfg)?.final_protos)
        }
        InitMode::InitModule => {
            let p_prime = temp_query_protos(&parts.q_feat, &mprime, &parts.p_s)?;
            let omega = generate_weights(&parts.p_s, &p_prime, &model.gen)?;
            let p0 = init_query_protos(&parts.p_s, &p_prime, &omega)?;
            let (_, target) = crate::initmod::build_target_mask(&parts.q_feat, &p0, inner_cfg.alpha)?;
            Some(inner_optimize(&parts.q_feat, p0, &target, inner_cfg)?.final_protos)
        }
    };
    Ok(FrozenEpisode {
        mode: inner_cfg.init_mode,
        alpha: inner_cfg.alpha,
        weights,
        mprime,
        p_q,
    })
}

struct PipelineParts {
    q_feat: Tensor,
    p_s: PrototypeSet,
    gt_feat: LabelMask,
}

fn pipeline_parts(model: &Model, episode: &Episode) -> Result<PipelineParts> {
    let (q_img, gt) = {
        let (img, gt) = &episode.query[0];
        (
            img,
            gt.as_ref()
                .ok_or_else(|| Error::invalid("gradcheck episode lacks a query mask".to_string()))?,
        )
    };
    let (q_feat, _) = model.embed.forward(q_img)?;
    let (fh, fw) = (q_feat.shape()[0], q_feat.shape()[1]);
    let gt_feat = resize_nearest_labels(gt, fh, fw)?;
    let n_classes = episode.n_way() + 1;
    let mut feats = Vec::new();
    let mut masks = Vec::new();
    for (img, mask) in &episode.support {
        let (f, _) = model.embed.forward(img)?;
        let (h, w) = (f.shape()[0], f.shape()[1]);
        masks.push(resize_nearest_labels(mask, h, w)?);
        feats.push(f);
    }
    let frefs: Vec<&Tensor> = feats.iter().collect();
    let mrefs: Vec<&LabelMask> = masks.iter().collect();
    let p_s = masked_average_pool(&frefs, &mrefs, n_classes)?.into_prototypes()?;
    Ok(PipelineParts {
        q_feat,
        p_s,
        gt_feat,
    })
}

/// The stop-gradient forward: everything is recomputed from the current
/// model except the frozen mask labels and inner-loop prototypes. Its exact
/// gradient is what the episode backward pass computes.
pub fn frozen_episode_loss(
    model: &Model,
    episode: &Episode,
    frozen: &FrozenEpisode,
) -> Result<f64> {
    let parts = pipeline_parts(model, episode)?;
    let [w1, w2, w3] = frozen.weights;
    let mprime_soft = soft_predict(&parts.q_feat, &parts.p_s, frozen.alpha)?;
    let l1 = cross_entropy(&mprime_soft, &parts.gt_feat)?;
    if frozen.mode == InitMode::Baseline {
        return Ok(w1 * l1);
    }
    let p0 = match frozen.mode {
        InitMode::SupportInit => parts.p_s.clone(),
        InitMode::InitModule => {
            let p_prime = temp_query_protos(&parts.q_feat, &frozen.mprime, &parts.p_s)?;
            let omega = generate_weights(&parts.p_s, &p_prime, &model.gen)?;
            init_query_protos(&parts.p_s, &p_prime, &omega)?
        }
        InitMode::Baseline => unreachable!(),
    };
    let t_soft = soft_predict(&parts.q_feat, &p0, frozen.alpha)?;
    let l2 = cross_entropy(&t_soft, &parts.gt_feat)?;
    let p_q = frozen.p_q.as_ref().expect("non-baseline frozen episode");
    let pred = soft_predict(&parts.q_feat, p_q, frozen.alpha)?;
    let l3 = cross_entropy(&pred, &parts.gt_feat)?;
    Ok(w1 * l1 + w2 * l2 + w3 * l3)
}
