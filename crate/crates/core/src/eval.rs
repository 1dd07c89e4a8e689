//! Evaluation: per-class IoU with pooled counts, mean-IoU over foreground
//! classes, binary-IoU, and (multi-scale) episode prediction at image
//! resolution.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::initmod::{build_target_mask, generate_weights, init_query_protos, temp_query_mask, temp_query_protos};
use crate::inner::{inner_loss, inner_optimize, InitMode, InnerConfig};
use crate::mask::{resize_nearest_labels, LabelMask, SoftMask};
use crate::outer::Model;
use crate::proto::{hard_mask, masked_average_pool, soft_predict, PrototypeSet};
use crate::tensor::{resize_bilinear, Tensor};
use crate::episodes::Episode;

/// Intersection over union of one class between two masks; `None` when the
/// union is empty (the class appears in neither mask).
pub fn iou(pred: &LabelMask, gt: &LabelMask, cls: usize) -> Result<Option<f64>> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            context: "iou",
            expected: vec![gt.dims().0, gt.dims().1],
            got: vec![pred.dims().0, pred.dims().1],
        });
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let pa = a as usize == cls;
        let pb = b as usize == cls;
        if pa && pb {
            inter += 1;
        }
        if pa || pb {
            union += 1;
        }
    }
    if union == 0 {
        Ok(None)
    } else {
        Ok(Some(inter as f64 / union as f64))
    }
}

/// Pooled intersection/union counts, keyed by global class id for the
/// foreground classes plus combined foreground/background tallies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    per_class: BTreeMap<usize, (u64, u64)>,
    fg: (u64, u64),
    bg: (u64, u64),
    episodes: usize,
}

impl IouAccumulator {
    /// Adds one episode's prediction. `class_ids[c - 1]` is the global id
    /// of local label c.
    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask, class_ids: &[usize]) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch {
                context: "IouAccumulator::add",
                expected: vec![gt.dims().0, gt.dims().1],
                got: vec![pred.dims().0, pred.dims().1],
            });
        }
        for (local, &global) in class_ids.iter().enumerate() {
            let cls = local + 1;
            let (mut inter, mut union) = (0u64, 0u64);
            for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
                let pa = a as usize == cls;
                let pb = b as usize == cls;
                if pa && pb {
                    inter += 1;
                }
                if pa || pb {
                    union += 1;
                }
            }
            let e = self.per_class.entry(global).or_insert((0, 0));
            e.0 += inter;
            e.1 += union;
        }
        for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
            let (pa, pb) = (a != 0, b != 0);
            if pa && pb {
                self.fg.0 += 1;
            }
            if pa || pb {
                self.fg.1 += 1;
            }
            if !pa && !pb {
                self.bg.0 += 1;
            }
            if !pa || !pb {
                self.bg.1 += 1;
            }
        }
        self.episodes += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (&cls, &(inter, union)) in &other.per_class {
            let e = self.per_class.entry(cls).or_insert((0, 0));
            e.0 += inter;
            e.1 += union;
        }
        self.fg.0 += other.fg.0;
        self.fg.1 += other.fg.1;
        self.bg.0 += other.bg.0;
        self.bg.1 += other.bg.1;
        self.episodes += other.episodes;
    }

    /// Mean over foreground classes of pooled-count IoU, skipping classes
    /// whose pooled union is empty.
    pub fn mean_iou(&self) -> f64 {
        let ious: Vec<f64> = self
            .per_class
            .values()
            .filter(|(_, union)| *union > 0)
            .map(|&(inter, union)| inter as f64 / union as f64)
            .collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }

    /// Mean of foreground-as-one-class IoU and background IoU, on pooled
    /// counts.
    pub fn binary_iou(&self) -> f64 {
        let fg = if self.fg.1 > 0 {
            self.fg.0 as f64 / self.fg.1 as f64
        } else {
            0.0
        };
        let bg = if self.bg.1 > 0 {
            self.bg.0 as f64 / self.bg.1 as f64
        } else {
            0.0
        };
        (fg + bg) / 2.0
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            per_class: self
                .per_class
                .iter()
                .map(|(&cls, &(inter, union))| ClassCounts {
                    class: cls,
                    intersection: inter,
                    union,
                    iou: if union > 0 {
                        Some(inter as f64 / union as f64)
                    } else {
                        None
                    },
                })
                .collect(),
            mean_iou: self.mean_iou(),
            binary_iou: self.binary_iou(),
            n_episodes: self.episodes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCounts {
    pub class: usize,
    pub intersection: u64,
    pub union: u64,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<ClassCounts>,
    pub mean_iou: f64,
    pub binary_iou: f64,
    pub n_episodes: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,intersection,union,iou\n");
        for c in &self.per_class {
            match c.iou {
                Some(v) => out.push_str(&format!(
                    "{},{},{},{}\n",
                    c.class, c.intersection, c.union, v
                )),
                None => out.push_str(&format!("{},{},{},\n", c.class, c.intersection, c.union)),
            }
        }
        out.push_str(&format!(
            "# mean_iou={} binary_iou={} n_episodes={}\n",
            self.mean_iou, self.binary_iou, self.n_episodes
        ));
        out
    }
}

/// Prediction for one episode, at image resolution.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub soft: SoftMask,
    pub labels: LabelMask,
    /// Inner-loop loss trajectory at the first evaluated scale.
    pub inner_losses: Vec<f64>,
}

/// Rounds a scaled extent to the nearest multiple of `multiple`, at least
/// one multiple.
fn valid_extent(extent: usize, scale: f64, multiple: usize) -> usize {
    let target = extent as f64 * scale / multiple as f64;
    let steps = target.round().max(1.0) as usize;
    steps * multiple
}

fn support_prototypes(episode: &Episode, model: &Model) -> Result<PrototypeSet> {
    let n_classes = episode.n_way() + 1;
    let mut feats = Vec::with_capacity(episode.support.len());
    let mut masks = Vec::with_capacity(episode.support.len());
    for (img, mask) in &episode.support {
        let (f, _) = model.embed.forward(img)?;
        let (h, w) = (f.shape()[0], f.shape()[1]);
        masks.push(resize_nearest_labels(mask, h, w)?);
        feats.push(f);
    }
    let frefs: Vec<&Tensor> = feats.iter().collect();
    let mrefs: Vec<&LabelMask> = masks.iter().collect();
    masked_average_pool(&frefs, &mrefs, n_classes)?.into_prototypes()
}

/// Predicts one scale's soft map at that scale's feature resolution, plus
/// the inner-loop trace that produced it.
fn predict_at_scale(
    q_img: &Tensor,
    p_s: &PrototypeSet,
    model: &Model,
    inner_cfg: &InnerConfig,
) -> Result<(SoftMask, Vec<f64>)> {
    let (q_feat, _) = model.embed.forward(q_img)?;
    let alpha = inner_cfg.alpha;
    let (mprime_soft, mprime) = temp_query_mask(&q_feat, p_s, alpha)?;
    match inner_cfg.init_mode {
        InitMode::Baseline => {
            // support-prototype prediction; no inner loop
            let loss = inner_loss(&q_feat, p_s, &mprime, alpha)?;
            Ok((mprime_soft, vec![loss]))
        }
        InitMode::SupportInit => {
            let p0 = p_s.clone();
            let (_, target) = build_target_mask(&q_feat, &p0, alpha)?;
            let trace = inner_optimize(&q_feat, p0, &target, inner_cfg)?;
            let soft = soft_predict(&q_feat, &trace.final_protos, alpha)?;
            Ok((soft, trace.losses))
        }
        InitMode::InitModule => {
            let p_prime = temp_query_protos(&q_feat, &mprime, p_s)?;
            let omega = generate_weights(p_s, &p_prime, &model.gen)?;
            let p0 = init_query_protos(p_s, &p_prime, &omega)?;
            let (_, target) = build_target_mask(&q_feat, &p0, alpha)?;
            let trace = inner_optimize(&q_feat, p0, &target, inner_cfg)?;
            let soft = soft_predict(&q_feat, &trace.final_protos, alpha)?;
            Ok((soft, trace.losses))
        }
    }
}

/// Full inference on one episode: for every scale, resize the query image,
/// run the init + inner-loop pipeline, upsample the soft prediction to
/// image resolution; average over scales and take the argmax. Exact
/// duplicate scales are collapsed, so `[1, 1, 1]` equals `[1]`.
pub fn predict_episode(
    episode: &Episode,
    model: &Model,
    inner_cfg: &InnerConfig,
    scales: &[f64],
) -> Result<Prediction> {
    if scales.is_empty() {
        return Err(Error::invalid("predict_episode: scales must be nonempty".to_string()));
    }
    if episode.query.is_empty() {
        return Err(Error::invalid("predict_episode: episode has no query".to_string()));
    }
    let mut unique: Vec<f64> = Vec::new();
    for &s in scales {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid(format!("predict_episode: bad scale {s}")));
        }
        if !unique.contains(&s) {
            unique.push(s);
        }
    }

    let q_img = &episode.query[0].0;
    let (h, w) = (q_img.shape()[0], q_img.shape()[1]);
    let d = model.embed.downsample();
    let p_s = support_prototypes(episode, model)?;

    let mut sum: Option<Tensor> = None;
    let mut first_losses = Vec::new();
    for (i, &scale) in unique.iter().enumerate() {
        let sh = valid_extent(h, scale, d);
        let sw = valid_extent(w, scale, d);
        let scaled = resize_bilinear(q_img, sh, sw)?;
        let (soft, losses) = predict_at_scale(&scaled, &p_s, model, inner_cfg)?;
        if i == 0 {
            first_losses = losses;
        }
        let up = resize_bilinear(soft.probs(), h, w)?;
        match &mut sum {
            None => sum = Some(up),
            Some(acc) => acc.add_assign(&up)?,
        }
    }
    let mut avg = sum.expect("at least one scale");
    if unique.len() > 1 {
        let inv = 1.0 / unique.len() as f64;
        for v in avg.data_mut() {
            *v *= inv;
        }
    }
    let soft = SoftMask::from_probs_unchecked(avg);
    let labels = hard_mask(&soft);
    Ok(Prediction {
        soft,
        labels,
        inner_losses: first_losses,
    })
}

/// Evaluates a model over ground-truth episodes, pooling IoU counts. The
/// report is deterministic and independent of `threads`: per-episode work is
/// pure and results merge in episode order.
pub fn evaluate(
    model: &Model,
    episodes: &[Episode],
    inner_cfg: &InnerConfig,
    scales: &[f64],
    threads: usize,
) -> Result<EvalReport> {
    let eval_one = |ep: &Episode| -> Result<IouAccumulator> {
        let gt = ep.query[0]
            .1
            .as_ref()
            .ok_or_else(|| Error::invalid("evaluation episode lacks a query mask".to_string()))?;
        let pred = predict_episode(ep, model, inner_cfg, scales)?;
        let mut acc = IouAccumulator::default();
        acc.add(&pred.labels, gt, &ep.class_ids)?;
        Ok(acc)
    };

    let results: Vec<Result<IouAccumulator>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| episodes.par_iter().map(eval_one).collect())
    } else {
        episodes.iter().map(eval_one).collect()
    };

    let mut total = IouAccumulator::default();
    for r in results {
        total.merge(&r?);
    }
    Ok(total.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbedSpec;
    use crate::episodes::{gen_episode, make_class_pool};
    use crate::rng::Rng;

    fn mask(h: usize, w: usize, labels: Vec<u8>) -> LabelMask {
        LabelMask::new(h, w, labels).unwrap()
    }

    /// Counting oracle for one class.
    fn iou_oracle(pred: &LabelMask, gt: &LabelMask, cls: usize) -> Option<f64> {
        let inter = pred
            .labels()
            .iter()
            .zip(gt.labels())
            .filter(|(&a, &b)| a as usize == cls && b as usize == cls)
            .count();
        let union = pred
            .labels()
            .iter()
            .zip(gt.labels())
            .filter(|(&a, &b)| a as usize == cls || b as usize == cls)
            .count();
        if union == 0 {
            None
        } else {
            Some(inter as f64 / union as f64)
        }
    }

    #[test]
    fn iou_basics() {
        let gt = mask(2, 2, vec![1, 1, 0, 0]);
        assert_eq!(iou(&gt, &gt, 1).unwrap(), Some(1.0));

        let pred = mask(2, 2, vec![0, 0, 1, 1]);
        assert_eq!(iou(&pred, &gt, 1).unwrap(), Some(0.0));

        // covers 2 of 4 gt pixels, no false positives
        let gt = mask(2, 2, vec![1, 1, 1, 1]);
        let pred = mask(2, 2, vec![1, 1, 0, 0]);
        assert_eq!(iou(&pred, &gt, 1).unwrap(), Some(0.5));

        // class absent from both -> undefined
        assert_eq!(iou(&pred, &gt, 2).unwrap(), None);

        let bad = mask(1, 2, vec![0, 0]);
        assert!(iou(&bad, &gt, 1).is_err());
    }

    #[test]
    fn iou_is_symmetric_and_matches_oracle() {
        let mut rng = Rng::new(31);
        for _ in 0..100 {
            let h = 1 + rng.below(6);
            let w = 1 + rng.below(6);
            let a = mask(h, w, (0..h * w).map(|_| rng.below(3) as u8).collect());
            let b = mask(h, w, (0..h * w).map(|_| rng.below(3) as u8).collect());
            for cls in 0..3 {
                let ab = iou(&a, &b, cls).unwrap();
                let ba = iou(&b, &a, cls).unwrap();
                assert_eq!(ab, ba);
                assert_eq!(ab, iou_oracle(&a, &b, cls));
                if let Some(v) = ab {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn mean_iou_single_class_reduces_to_iou() {
        let gt = mask(2, 2, vec![1, 1, 0, 0]);
        let pred = mask(2, 2, vec![1, 0, 0, 0]);
        let mut acc = IouAccumulator::default();
        acc.add(&pred, &gt, &[7]).unwrap();
        let want = iou(&pred, &gt, 1).unwrap().unwrap();
        assert_eq!(acc.mean_iou(), want);
    }

    #[test]
    fn mean_iou_averages_class_ious() {
        // class 5: IoU 0.4 (2/5), class 9: IoU 0.6 (3/5)
        let mut acc = IouAccumulator::default();
        let gt = mask(1, 5, vec![1, 1, 1, 1, 1]);
        let pred = mask(1, 5, vec![1, 1, 0, 0, 2]);
        acc.add(&pred, &gt, &[5, 9]).unwrap();
        let gt2 = mask(1, 5, vec![2, 2, 2, 2, 2]);
        let pred2 = mask(1, 5, vec![2, 2, 2, 0, 1]);
        acc.add(&pred2, &gt2, &[5, 9]).unwrap();
        // class 5 counts: inter 2, union 5+1 wait: episode 2 pred has one
        // pixel of class 1 (global 5) and gt none -> union grows by 1
        let report = acc.report();
        let c5 = &report.per_class[0];
        assert_eq!((c5.class, c5.intersection, c5.union), (5, 2, 6));
        let c9 = &report.per_class[1];
        assert_eq!((c9.class, c9.intersection, c9.union), (9, 3, 6));
        assert!((acc.mean_iou() - 0.5 * (2.0 / 6.0 + 3.0 / 6.0)).abs() < 1e-15);
    }

    #[test]
    fn mean_iou_pools_counts_across_episodes() {
        // pooled counts differ from averaging per-episode IoUs
        let mut acc = IouAccumulator::default();
        // episode 1: inter 1, union 2 (iou 0.5)
        acc.add(&mask(1, 2, vec![1, 0]), &mask(1, 2, vec![1, 1]), &[4]).unwrap();
        // episode 2: inter 1, union 4 (iou 0.25)
        acc.add(
            &mask(2, 2, vec![1, 1, 1, 0]),
            &mask(2, 2, vec![1, 0, 0, 1]),
            &[4],
        )
        .unwrap();
        // pooled: 2/6; per-episode mean would be 0.375
        assert!((acc.mean_iou() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(acc.report().n_episodes, 2);
    }

    #[test]
    fn mean_iou_is_order_invariant() {
        let eps: Vec<(LabelMask, LabelMask)> = (0..6)
            .map(|i| {
                let mut rng = Rng::new(40 + i);
                let h = 2 + rng.below(3);
                let w = 2 + rng.below(3);
                (
                    mask(h, w, (0..h * w).map(|_| rng.below(3) as u8).collect()),
                    mask(h, w, (0..h * w).map(|_| rng.below(3) as u8).collect()),
                )
            })
            .collect();
        let mut fwd = IouAccumulator::default();
        for (p, g) in &eps {
            fwd.add(p, g, &[1, 2]).unwrap();
        }
        let mut rev = IouAccumulator::default();
        for (p, g) in eps.iter().rev() {
            rev.add(p, g, &[1, 2]).unwrap();
        }
        assert_eq!(fwd, rev);
    }

    #[test]
    fn binary_iou_cases() {
        let gt = mask(2, 2, vec![1, 1, 0, 0]);
        let mut acc = IouAccumulator::default();
        acc.add(&gt, &gt, &[1]).unwrap();
        assert_eq!(acc.binary_iou(), 1.0);

        // all-background prediction on half-foreground gt
        let mut acc = IouAccumulator::default();
        acc.add(&mask(2, 2, vec![0, 0, 0, 0]), &gt, &[1]).unwrap();
        assert!((acc.binary_iou() - 0.25).abs() < 1e-15);

        // inverted prediction
        let mut acc = IouAccumulator::default();
        acc.add(&mask(2, 2, vec![0, 0, 1, 1]), &gt, &[1]).unwrap();
        assert_eq!(acc.binary_iou(), 0.0);
    }

    fn bench_model_and_episodes() -> (Model, Vec<Episode>) {
        let pool = make_class_pool(4, 2, 50).unwrap();
        let model = Model::init(EmbedSpec::new(vec![4, 6]), 9).unwrap();
        let episodes: Vec<Episode> = (0..6)
            .map(|i| gen_episode(&pool.novel, 1, 1, 32, 100 + i).unwrap())
            .collect();
        (model, episodes)
    }

    #[test]
    fn single_scale_equals_scale_one_list() {
        let (model, episodes) = bench_model_and_episodes();
        let cfg = InnerConfig::default();
        for ep in &episodes {
            let a = predict_episode(ep, &model, &cfg, &[1.0]).unwrap();
            let b = predict_episode(ep, &model, &cfg, &[1.0, 1.0, 1.0]).unwrap();
            assert_eq!(a.soft.probs().data(), b.soft.probs().data());
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn multi_scale_handles_non_divisible_sizes() {
        let (model, episodes) = bench_model_and_episodes();
        let cfg = InnerConfig::default();
        // 32 * 0.7 = 22.4 -> 24 (nearest multiple of 4); 32 * 1.3 = 41.6 -> 40
        let pred = predict_episode(&episodes[0], &model, &cfg, &[0.7, 1.0, 1.3]).unwrap();
        assert_eq!(pred.labels.dims(), (32, 32));
        for row in pred.soft.probs().data().chunks_exact(2) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_thread_invariant() {
        let (model, episodes) = bench_model_and_episodes();
        let cfg = InnerConfig::default();
        let a = evaluate(&model, &episodes, &cfg, &[1.0], 1).unwrap();
        let b = evaluate(&model, &episodes, &cfg, &[1.0], 1).unwrap();
        let c = evaluate(&model, &episodes, &cfg, &[1.0], 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), c.to_csv());
    }

    #[test]
    fn evaluate_perfect_and_constant_predictors() {
        // drive the accumulator directly with oracle predictions
        let pool = make_class_pool(4, 2, 50).unwrap();
        let episodes: Vec<Episode> = (0..5)
            .map(|i| gen_episode(&pool.novel, 2, 1, 32, 200 + i).unwrap())
            .collect();
        let mut perfect = IouAccumulator::default();
        let mut constant = IouAccumulator::default();
        for ep in &episodes {
            let gt = ep.query[0].1.as_ref().unwrap();
            perfect.add(gt, gt, &ep.class_ids).unwrap();
            let zeros = LabelMask::zeros(32, 32);
            constant.add(&zeros, gt, &ep.class_ids).unwrap();
        }
        assert_eq!(perfect.mean_iou(), 1.0);
        assert_eq!(constant.mean_iou(), 0.0);
    }

    #[test]
    fn baseline_inner_losses_has_one_row_and_matches_support_prediction() {
        let (model, episodes) = bench_model_and_episodes();
        let cfg = InnerConfig {
            init_mode: InitMode::Baseline,
            steps: 7,
            ..InnerConfig::default()
        };
        let pred = predict_episode(&episodes[0], &model, &cfg, &[1.0]).unwrap();
        assert_eq!(pred.inner_losses.len(), 1);

        // support-prototype prediction, upsampled, regardless of steps
        let p_s = support_prototypes(&episodes[0], &model).unwrap();
        let (q_feat, _) = model.embed.forward(&episodes[0].query[0].0).unwrap();
        let soft = soft_predict(&q_feat, &p_s, cfg.alpha).unwrap();
        let up = resize_bilinear(soft.probs(), 32, 32).unwrap();
        assert_eq!(pred.soft.probs().data(), up.data());
    }
}
