//! The outer loop: combined segmentation loss, per-episode forward and
//! backward passes, and episodic SGD training of the embedding network and
//! weight generator.
//!
//! Gradient routing is first order. The three loss terms flow as follows:
//! the temporary-mask term through the query and support features, the
//! target-map term additionally through the init module (weight generator
//! and temporary prototypes), and the final-prediction term through the
//! query features only — the inner loop's output prototypes are treated as
//! constants, and hard argmax masks pass no gradient anywhere.

use rayon::prelude::*;

use crate::embed::{EmbedCache, EmbedGrads, EmbedParams, EmbedSpec};
use crate::episodes::{gen_episode, Episode, ShapeClass};
use crate::error::{Error, Result};
use crate::initmod::{
    build_target_mask, generate_weights, init_query_protos, temp_query_mask, temp_query_protos,
    weight_generator_backward, WeightGenerator, WeightTensor,
};
use crate::inner::{inner_optimize, InitMode, InnerConfig};
use crate::mask::{cross_entropy, resize_nearest_labels, LabelMask, SoftMask};
use crate::proto::{masked_average_pool, soft_predict, soft_predict_backward, PrototypeSet};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Trainable state: the embedding network plus the weight generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub embed: EmbedParams,
    pub gen: WeightGenerator,
}

impl Model {
    /// Fresh model: fan-in uniform embedding, zero generator.
    pub fn init(spec: EmbedSpec, seed: u64) -> Result<Self> {
        let embed = EmbedParams::init(spec, seed)?;
        let gen = WeightGenerator::zeros(embed.out_channels());
        Ok(Model { embed, gen })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrDecay {
    pub factor: f64,
    /// Parameter update count after which the factor applies.
    pub at_update: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Number of training episodes (one query task per episode).
    pub epochs: usize,
    /// Episodes per parameter update; gradients are averaged over the batch.
    pub batch: usize,
    pub lr_decay: Option<LrDecay>,
    pub loss_weights: [f64; 3],
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            lr: 7e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 2000,
            batch: 8,
            lr_decay: None,
            loss_weights: [1.0, 1.0, 1.0],
        }
    }
}

impl OuterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("outer lr must be > 0".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("outer momentum must be in [0, 1)".to_string()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("outer weight_decay must be >= 0".to_string()));
        }
        if self.batch == 0 {
            return Err(Error::invalid("outer batch must be >= 1".to_string()));
        }
        if let Some(d) = &self.lr_decay {
            if !(d.factor > 0.0) {
                return Err(Error::invalid("lr decay factor must be > 0".to_string()));
            }
        }
        Ok(())
    }
}

/// Momentum buffers matching the model's parameter tensors.
#[derive(Debug, Clone)]
pub struct OptState {
    pub embed: Vec<Tensor>,
    pub gen_w: Tensor,
    pub gen_b: Tensor,
}

impl OptState {
    pub fn zeros(model: &Model) -> Self {
        OptState {
            embed: model
                .embed
                .layers()
                .iter()
                .map(|k| Tensor::zeros(k.shape().to_vec()))
                .collect(),
            gen_w: Tensor::zeros(model.gen.w().shape().to_vec()),
            gen_b: Tensor::zeros(model.gen.b().shape().to_vec()),
        }
    }
}

/// One SGD step with momentum and weight decay:
/// g' = g + wd * p; v = momentum * v + g'; p = p - lr * v.
pub fn sgd_update(
    param: &mut Tensor,
    grad: &Tensor,
    vel: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != vel.shape() {
        return Err(Error::ShapeMismatch {
            context: "sgd_update",
            expected: param.shape().to_vec(),
            got: grad.shape().to_vec(),
        });
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(vel.data_mut())
    {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Weighted sum of the three cross-entropies of the combined segmentation
/// loss, each computed on a soft map against the ground truth.
pub fn seg_loss(
    mprime_soft: &SoftMask,
    t_soft: &SoftMask,
    pred_soft: &SoftMask,
    gt: &LabelMask,
    weights: [f64; 3],
) -> Result<(f64, [f64; 3])> {
    let l1 = cross_entropy(mprime_soft, gt)?;
    let l2 = cross_entropy(t_soft, gt)?;
    let l3 = cross_entropy(pred_soft, gt)?;
    let total = weights[0] * l1 + weights[1] * l2 + weights[2] * l3;
    Ok((total, [l1, l2, l3]))
}

/// Why an episode was not trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    /// Some class had no support pixels at feature resolution.
    EmptySupportClass,
    /// A pooled or initialized prototype row had near-zero norm.
    DegeneratePrototype,
}

/// Everything an episode forward pass produces: the loss and its parts,
/// the prediction, and the intermediates the backward pass needs.
#[derive(Debug)]
pub struct EpisodeForward {
    mode: InitMode,
    alpha: f64,
    weights: [f64; 3],
    q_cache: EmbedCache,
    s_caches: Vec<EmbedCache>,
    q_feat: Tensor,
    support_masks: Vec<LabelMask>,
    support_counts: Vec<usize>,
    gt_feat: LabelMask,
    p_s: PrototypeSet,
    mprime: LabelMask,
    p_prime: Option<PrototypeSet>,
    omega: Option<WeightTensor>,
    p0: Option<PrototypeSet>,
    p_q: Option<PrototypeSet>,
    pub inner_losses: Vec<f64>,
    pub pred_soft: SoftMask,
    pub loss_total: f64,
    pub components: [f64; 3],
}

pub enum EpisodeOutcome {
    Forward(Box<EpisodeForward>),
    Skipped(SkipReason),
}

/// Runs one training episode end to end: embed, pool support prototypes,
/// init module (per `inner_cfg.init_mode`), inner loop, prediction, loss.
///
/// In baseline mode the prediction is the support-prototype prediction
/// itself and the loss reduces to its single weighted cross-entropy.
pub fn episode_forward(
    episode: &Episode,
    model: &Model,
    inner_cfg: &InnerConfig,
    weights: [f64; 3],
) -> Result<EpisodeOutcome> {
    inner_cfg.validate()?;
    let (q_img, gt_img) = {
        let (img, gt) = &episode.query[0];
        let gt = gt
            .as_ref()
            .ok_or_else(|| Error::invalid("training episode lacks a query mask".to_string()))?;
        (img, gt)
    };
    let n_classes = episode.n_way() + 1;
    let alpha = inner_cfg.alpha;

    let (q_feat, q_cache) = model.embed.forward(q_img)?;
    let (fh, fw) = (q_feat.shape()[0], q_feat.shape()[1]);
    let gt_feat = resize_nearest_labels(gt_img, fh, fw)?;

    let mut s_feats = Vec::with_capacity(episode.support.len());
    let mut s_caches = Vec::with_capacity(episode.support.len());
    let mut support_masks = Vec::with_capacity(episode.support.len());
    for (img, mask) in &episode.support {
        let (f, cache) = model.embed.forward(img)?;
        let (h, w) = (f.shape()[0], f.shape()[1]);
        support_masks.push(resize_nearest_labels(mask, h, w)?);
        s_feats.push(f);
        s_caches.push(cache);
    }

    let feat_refs: Vec<&Tensor> = s_feats.iter().collect();
    let mask_refs: Vec<&LabelMask> = support_masks.iter().collect();
    let pooled = masked_average_pool(&feat_refs, &mask_refs, n_classes)?;
    if pooled.counts.iter().any(|&n| n == 0) {
        return Ok(EpisodeOutcome::Skipped(SkipReason::EmptySupportClass));
    }
    let support_counts = pooled.counts.clone();
    let p_s = match pooled.into_prototypes() {
        Ok(p) => p,
        Err(Error::DegeneratePrototype { .. }) => {
            return Ok(EpisodeOutcome::Skipped(SkipReason::DegeneratePrototype))
        }
        Err(e) => return Err(e),
    };

    let (mprime_soft, mprime) = temp_query_mask(&q_feat, &p_s, alpha)?;

    if inner_cfg.init_mode == InitMode::Baseline {
        let l1 = cross_entropy(&mprime_soft, &gt_feat)?;
        let loss_total = weights[0] * l1;
        if !loss_total.is_finite() {
            return Err(Error::NonFinite("episode loss"));
        }
        return Ok(EpisodeOutcome::Forward(Box::new(EpisodeForward {
            mode: InitMode::Baseline,
            alpha,
            weights,
            q_cache,
            s_caches,
            q_feat,
            support_masks,
            support_counts,
            gt_feat,
            p_s,
            mprime,
            p_prime: None,
            omega: None,
            p0: None,
            p_q: None,
            inner_losses: Vec::new(),
            pred_soft: mprime_soft.clone(),
            loss_total,
            components: [l1, 0.0, l1],
        })));
    }

    let (p_prime, omega, p0) = match inner_cfg.init_mode {
        InitMode::SupportInit => (None, None, p_s.clone()),
        InitMode::InitModule => {
            let p_prime = match temp_query_protos(&q_feat, &mprime, &p_s) {
                Ok(p) => p,
                Err(Error::DegeneratePrototype { .. }) => {
                    return Ok(EpisodeOutcome::Skipped(SkipReason::DegeneratePrototype))
                }
                Err(e) => return Err(e),
            };
            let omega = generate_weights(&p_s, &p_prime, &model.gen)?;
            let p0 = match init_query_protos(&p_s, &p_prime, &omega) {
                Ok(p) => p,
                Err(Error::DegeneratePrototype { .. }) => {
                    return Ok(EpisodeOutcome::Skipped(SkipReason::DegeneratePrototype))
                }
                Err(e) => return Err(e),
            };
            (Some(p_prime), Some(omega), p0)
        }
        InitMode::Baseline => unreachable!(),
    };

    let (t_soft, target) = build_target_mask(&q_feat, &p0, alpha)?;
    let trace = inner_optimize(&q_feat, p0.clone(), &target, inner_cfg)?;
    let p_q = trace.final_protos;
    let pred_soft = soft_predict(&q_feat, &p_q, alpha)?;
    let (loss_total, components) = seg_loss(&mprime_soft, &t_soft, &pred_soft, &gt_feat, weights)?;
    if !loss_total.is_finite() {
        return Err(Error::NonFinite("episode loss"));
    }

    Ok(EpisodeOutcome::Forward(Box::new(EpisodeForward {
        mode: inner_cfg.init_mode,
        alpha,
        weights,
        q_cache,
        s_caches,
        q_feat,
        support_masks,
        support_counts,
        gt_feat,
        p_s,
        mprime,
        p_prime: match inner_cfg.init_mode {
            InitMode::InitModule => p_prime,
            _ => None,
        },
        omega,
        p0: Some(p0),
        p_q: Some(p_q),
        inner_losses: trace.losses,
        pred_soft,
        loss_total,
        components,
    })))
}

/// Gradients of one episode's loss with respect to the model.
#[derive(Debug, Clone)]
pub struct EpisodeGrads {
    pub embed: EmbedGrads,
    pub gen_w: Tensor,
    pub gen_b: Tensor,
}

impl EpisodeGrads {
    pub fn zeros_like(model: &Model) -> Self {
        EpisodeGrads {
            embed: EmbedGrads::zeros_like(&model.embed),
            gen_w: Tensor::zeros(model.gen.w().shape().to_vec()),
            gen_b: Tensor::zeros(model.gen.b().shape().to_vec()),
        }
    }

    pub fn add_assign(&mut self, other: &EpisodeGrads) -> Result<()> {
        self.embed.add_assign(&other.embed)?;
        self.gen_w.add_assign(&other.gen_w)?;
        self.gen_b.add_assign(&other.gen_b)?;
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.embed.scale(factor);
        for v in self.gen_w.data_mut() {
            *v *= factor;
        }
        for v in self.gen_b.data_mut() {
            *v *= factor;
        }
    }
}

/// First-order backward pass over a stored episode forward.
pub fn episode_backward(fwd: &EpisodeForward, model: &Model) -> Result<EpisodeGrads> {
    let [w1, w2, w3] = fwd.weights;
    let k = fwd.p_s.n_classes();
    let c = fwd.p_s.channels();
    let mut d_query = Tensor::zeros(fwd.q_feat.shape().to_vec());
    let mut d_ps = Tensor::zeros(vec![k, c]);
    let mut d_gen_w = Tensor::zeros(model.gen.w().shape().to_vec());
    let mut d_gen_b = Tensor::zeros(model.gen.b().shape().to_vec());

    // term 1: temporary-mask prediction against ground truth
    if w1 != 0.0 {
        let g = soft_predict_backward(&fwd.q_feat, &fwd.p_s, fwd.alpha, &fwd.gt_feat)?;
        d_query.add_scaled_assign(&g.d_query, w1)?;
        d_ps.add_scaled_assign(&g.d_protos, w1)?;
    }

    // term 2: target soft map against ground truth, through the init path
    if fwd.mode != InitMode::Baseline && w2 != 0.0 {
        let p0 = fwd.p0.as_ref().expect("non-baseline episode stores p0");
        let g = soft_predict_backward(&fwd.q_feat, p0, fwd.alpha, &fwd.gt_feat)?;
        d_query.add_scaled_assign(&g.d_query, w2)?;
        let mut d_p0 = g.d_protos;
        for v in d_p0.data_mut() {
            *v *= w2;
        }
        match fwd.mode {
            InitMode::SupportInit => {
                // p0 is the support prototypes themselves
                d_ps.add_assign(&d_p0)?;
            }
            InitMode::InitModule => {
                let p_prime = fwd.p_prime.as_ref().expect("init_module stores p_prime");
                let omega = fwd.omega.as_ref().expect("init_module stores omega");
                // p0 = omega * p_s + (1 - omega) * p_prime, elementwise
                let mut d_omega = Tensor::zeros(vec![k, c]);
                let mut d_pprime = Tensor::zeros(vec![k, c]);
                for i in 0..k * c {
                    let g0 = d_p0.data()[i];
                    let om = omega.tensor().data()[i];
                    d_omega.data_mut()[i] =
                        g0 * (fwd.p_s.tensor().data()[i] - p_prime.tensor().data()[i]);
                    d_ps.data_mut()[i] += g0 * om;
                    d_pprime.data_mut()[i] += g0 * (1.0 - om);
                }
                let gg = weight_generator_backward(&fwd.p_s, p_prime, &model.gen, &d_omega)?;
                d_gen_w.add_assign(&gg.d_w)?;
                d_gen_b.add_assign(&gg.d_b)?;
                d_ps.add_assign(&gg.d_ps)?;
                d_pprime.add_assign(&gg.d_pprime)?;
                // temporary prototypes: mean of query pixels under the
                // (frozen) temporary mask; empty classes fell back to p_s
                let (h, w) = fwd.mprime.dims();
                let mut counts = vec![0usize; k];
                for &l in fwd.mprime.labels() {
                    counts[l as usize] += 1;
                }
                for cls in 0..k {
                    if counts[cls] == 0 {
                        for ch in 0..c {
                            d_ps.data_mut()[cls * c + ch] += d_pprime.data()[cls * c + ch];
                        }
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        let cls = fwd.mprime.get(y, x) as usize;
                        if counts[cls] == 0 {
                            continue;
                        }
                        let scale = 1.0 / counts[cls] as f64;
                        let qbase = fwd.q_feat.idx3(y, x, 0);
                        for ch in 0..c {
                            d_query.data_mut()[qbase + ch] +=
                                d_pprime.data()[cls * c + ch] * scale;
                        }
                    }
                }
            }
            InitMode::Baseline => unreachable!(),
        }
    }

    // term 3: final prediction; inner-loop prototypes are constants
    if fwd.mode != InitMode::Baseline && w3 != 0.0 {
        let p_q = fwd.p_q.as_ref().expect("non-baseline episode stores p_q");
        let g = soft_predict_backward(&fwd.q_feat, p_q, fwd.alpha, &fwd.gt_feat)?;
        d_query.add_scaled_assign(&g.d_query, w3)?;
    }

    // support prototypes back to support features (joint masked pooling)
    let mut embed_grads = model.embed.backward(&fwd.q_cache, &d_query)?;
    for (mask, cache) in fwd.support_masks.iter().zip(&fwd.s_caches) {
        let (h, w) = mask.dims();
        let mut d_feat = Tensor::zeros(vec![h, w, c]);
        for y in 0..h {
            for x in 0..w {
                let cls = mask.get(y, x) as usize;
                let scale = 1.0 / fwd.support_counts[cls] as f64;
                let base = d_feat.idx3(y, x, 0);
                for ch in 0..c {
                    d_feat.data_mut()[base + ch] = d_ps.data()[cls * c + ch] * scale;
                }
            }
        }
        let g = model.embed.backward(cache, &d_feat)?;
        embed_grads.add_assign(&g)?;
    }

    Ok(EpisodeGrads {
        embed: embed_grads,
        gen_w: d_gen_w,
        gen_b: d_gen_b,
    })
}

/// One row per trained episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_mprime: f64,
    pub loss_target: f64,
    pub loss_final: f64,
    pub episode_seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss_total,loss_mprime,loss_target,loss_final,episode_seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iter, r.loss_total, r.loss_mprime, r.loss_target, r.loss_final, r.episode_seed
            ));
        }
        out
    }

    /// Mean of the final-prediction loss over the last `n` rows.
    pub fn trailing_final_loss(&self, n: usize) -> f64 {
        let take = n.min(self.rows.len());
        if take == 0 {
            return f64::NAN;
        }
        let start = self.rows.len() - take;
        self.rows[start..].iter().map(|r| r.loss_final).sum::<f64>() / take as f64
    }
}

/// Shape of the episodes a training run samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub img_size: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Episodic training: sample one episode per iteration from the base pool,
/// accumulate gradients over `batch` episodes, average, and apply one SGD
/// update. Everything is a deterministic function of `seed`; `threads`
/// only parallelizes episode forward/backward inside a batch, with
/// accumulation in episode order.
pub fn train(
    base_pool: &[ShapeClass],
    ep_spec: EpisodeSpec,
    embed_spec: EmbedSpec,
    outer_cfg: &OuterConfig,
    inner_cfg: &InnerConfig,
    seed: u64,
    threads: usize,
) -> Result<TrainOutcome> {
    outer_cfg.validate()?;
    inner_cfg.validate()?;
    let mut model = Model::init(embed_spec, seed)?;
    let mut state = OptState::zeros(&model);
    let mut log = TrainLog::default();
    let seeder = Rng::new(seed).derive(0x5452_4149);
    let mut updates: u64 = 0;

    let run_episode = |model: &Model, iter: usize| -> Result<Option<(TrainLogRow, EpisodeGrads)>> {
        let ep_seed = seeder.seed_at(iter as u64);
        let episode = gen_episode(base_pool, ep_spec.n_way, ep_spec.k_shot, ep_spec.img_size, ep_seed)?;
        let fwd = match episode_forward(&episode, model, inner_cfg, outer_cfg.loss_weights) {
            Ok(EpisodeOutcome::Forward(f)) => f,
            Ok(EpisodeOutcome::Skipped(reason)) => {
                eprintln!("warning: skipping degenerate episode seed {ep_seed} ({reason:?})");
                return Ok(None);
            }
            Err(Error::NonFinite(_)) => return Err(Error::TrainDiverged { episode_seed: ep_seed }),
            Err(e) => return Err(e),
        };
        if !fwd.loss_total.is_finite() {
            return Err(Error::TrainDiverged { episode_seed: ep_seed });
        }
        let grads = episode_backward(&fwd, model)?;
        let row = TrainLogRow {
            iter,
            loss_total: fwd.loss_total,
            loss_mprime: fwd.components[0],
            loss_target: fwd.components[1],
            loss_final: fwd.components[2],
            episode_seed: ep_seed,
        };
        Ok(Some((row, grads)))
    };

    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut iter = 0;
    while iter < outer_cfg.epochs {
        let batch_end = (iter + outer_cfg.batch).min(outer_cfg.epochs);
        let indices: Vec<usize> = (iter..batch_end).collect();
        let results: Vec<Result<Option<(TrainLogRow, EpisodeGrads)>>> = match &pool {
            Some(p) => p.install(|| {
                indices
                    .par_iter()
                    .map(|&i| run_episode(&model, i))
                    .collect()
            }),
            None => indices.iter().map(|&i| run_episode(&model, i)).collect(),
        };

        let mut accum = EpisodeGrads::zeros_like(&model);
        let mut contributed = 0usize;
        for r in results {
            if let Some((row, grads)) = r? {
                log.rows.push(row);
                accum.add_assign(&grads)?;
                contributed += 1;
            }
        }
        if contributed > 0 {
            accum.scale(1.0 / contributed as f64);
            let lr = match &outer_cfg.lr_decay {
                Some(d) if updates >= d.at_update => outer_cfg.lr * d.factor,
                _ => outer_cfg.lr,
            };
            for (kernel, (grad, vel)) in model
                .embed
                .layers_mut()
                .iter_mut()
                .zip(accum.embed.kernels.iter().zip(state.embed.iter_mut()))
            {
                sgd_update(kernel, grad, vel, lr, outer_cfg.momentum, outer_cfg.weight_decay)?;
            }
            sgd_update(
                model.gen.w_mut(),
                &accum.gen_w,
                &mut state.gen_w,
                lr,
                outer_cfg.momentum,
                outer_cfg.weight_decay,
            )?;
            sgd_update(
                model.gen.b_mut(),
                &accum.gen_b,
                &mut state.gen_b,
                lr,
                outer_cfg.momentum,
                outer_cfg.weight_decay,
            )?;
            updates += 1;
        }
        iter = batch_end;
    }

    Ok(TrainOutcome { model, log })
}
