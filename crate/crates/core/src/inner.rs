//! The inner optimization loop: plain gradient descent on query prototypes
//! against a target mask that stays frozen for the whole loop.

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::proto::{predict_loss, soft_predict_backward, PrototypeSet, MIN_PROTO_NORM};
use crate::tensor::Tensor;

/// How the inner loop is initialized and targeted.
///
/// - `Baseline`: no inner loop at all; predictions use the support
///   prototypes directly.
/// - `SupportInit`: prototypes start at the support prototypes, the target
///   is the temporary query mask.
/// - `InitModule`: prototypes start at the learned convex combination from
///   the init module, the target is built from them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Baseline,
    SupportInit,
    InitModule,
}

impl InitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitMode::Baseline => "baseline",
            InitMode::SupportInit => "support_init",
            InitMode::InitModule => "init_module",
        }
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(InitMode::Baseline),
            "support_init" => Ok(InitMode::SupportInit),
            "init_module" => Ok(InitMode::InitModule),
            other => Err(Error::invalid(format!(
                "unknown init mode `{other}` (expected baseline|support_init|init_module)"
            ))),
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InnerConfig {
    pub steps: usize,
    pub lr: f64,
    pub alpha: f64,
    pub init_mode: InitMode,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            steps: 10,
            lr: 0.1,
            alpha: 20.0,
            init_mode: InitMode::InitModule,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::invalid("inner lr must be >= 0".to_string()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid("inner alpha must be > 0".to_string()));
        }
        Ok(())
    }
}

/// Loss trajectory and result of one inner optimization.
#[derive(Debug, Clone)]
pub struct InnerTrace {
    /// Loss before each step plus after the last one: `steps + 1` entries.
    pub losses: Vec<f64>,
    pub final_protos: PrototypeSet,
}

/// The objective the inner loop descends on: cross-entropy of the cosine
/// softmax prediction against the (frozen) target mask.
pub fn inner_loss(q: &Tensor, p: &PrototypeSet, target: &LabelMask, alpha: f64) -> Result<f64> {
    predict_loss(q, p, alpha, target)
}

/// Runs `cfg.steps` gradient-descent updates `P <- P - lr * dL/dP` against
/// the frozen target, recording the loss before each step and after the
/// last. `steps == 0` or `lr == 0` leave the prototypes bitwise unchanged.
pub fn inner_optimize(
    q: &Tensor,
    p0: PrototypeSet,
    target: &LabelMask,
    cfg: &InnerConfig,
) -> Result<InnerTrace> {
    cfg.validate()?;
    let mut protos = p0;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let loss = inner_loss(q, &protos, target, cfg.alpha)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("inner loss"));
        }
        losses.push(loss);
        if cfg.lr == 0.0 {
            continue;
        }
        let grads = soft_predict_backward(q, &protos, cfg.alpha, target)?;
        let mut next = protos.into_tensor();
        next.add_scaled_assign(&grads.d_protos, -cfg.lr)?;
        let (k, c) = (next.shape()[0], next.shape()[1]);
        for cls in 0..k {
            let row = &next.data()[cls * c..(cls + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= MIN_PROTO_NORM {
                return Err(Error::PrototypeCollapse { class: cls, step });
            }
        }
        protos = PrototypeSet::new(next)?;
    }
    let loss = inner_loss(q, &protos, target, cfg.alpha)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("inner loss"));
    }
    losses.push(loss);
    Ok(InnerTrace {
        losses,
        final_protos: protos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::{hard_mask, soft_predict};
    use crate::rng::Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Random instance where the target is argmax-consistent with *some*
    /// prototype set, mirroring how targets arise in the pipeline. Prototype
    /// rows are rescaled to norms in [1, 2].
    pub(crate) fn seeded_instance(seed: u64) -> (Tensor, PrototypeSet, LabelMask) {
        let mut rng = Rng::new(seed).derive(0x494e_4e52);
        let q = rand_tensor(vec![8, 8, 8], &mut rng);
        let make_protos = |rng: &mut Rng| {
            let mut t = rand_tensor(vec![3, 8], rng);
            for cls in 0..3 {
                let row = &t.data()[cls * 8..(cls + 1) * 8];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = rng.range_f64(1.0, 2.0) / norm;
                for ch in 0..8 {
                    t.data_mut()[cls * 8 + ch] *= scale;
                }
            }
            PrototypeSet::new(t).unwrap()
        };
        let p_gen = make_protos(&mut rng);
        let target = hard_mask(&soft_predict(&q, &p_gen, 20.0).unwrap());
        let p0 = make_protos(&mut rng);
        (q, p0, target)
    }

    #[test]
    fn loss_saturates_to_zero_on_pure_regions() {
        // prototypes exactly matching class-pure pixel vectors, huge alpha
        let q = Tensor::new(
            vec![1, 2, 2],
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let p = PrototypeSet::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let target = LabelMask::new(1, 2, vec![0, 1]).unwrap();
        let loss = inner_loss(&q, &p, &target, 2000.0).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn identical_prototypes_give_ln2() {
        let mut rng = Rng::new(2);
        let q = rand_tensor(vec![3, 3, 4], &mut rng);
        let p = PrototypeSet::new(
            Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap(),
        )
        .unwrap();
        let labels: Vec<u8> = (0..9).map(|_| rng.below(2) as u8).collect();
        let target = LabelMask::new(3, 3, labels).unwrap();
        let loss = inner_loss(&q, &p, &target, 20.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_equals_manual_per_pixel_sum() {
        let (q, p, target) = seeded_instance(5);
        let soft = soft_predict(&q, &p, 20.0).unwrap();
        let (h, w) = target.dims();
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += -soft
                    .prob(y, x, target.get(y, x) as usize)
                    .max(1e-12)
                    .ln();
            }
        }
        let want = acc / (h * w) as f64;
        let got = inner_loss(&q, &p, &target, 20.0).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_is_a_noop() {
        let (q, p0, target) = seeded_instance(7);
        let cfg = InnerConfig {
            steps: 0,
            ..InnerConfig::default()
        };
        let trace = inner_optimize(&q, p0.clone(), &target, &cfg).unwrap();
        assert_eq!(trace.losses.len(), 1);
        assert_eq!(trace.final_protos.tensor().data(), p0.tensor().data());
        assert_eq!(trace.losses[0], inner_loss(&q, &p0, &target, cfg.alpha).unwrap());
    }

    #[test]
    fn zero_lr_is_a_noop() {
        let (q, p0, target) = seeded_instance(8);
        let cfg = InnerConfig {
            steps: 10,
            lr: 0.0,
            ..InnerConfig::default()
        };
        let trace = inner_optimize(&q, p0.clone(), &target, &cfg).unwrap();
        assert_eq!(trace.losses.len(), 11);
        assert_eq!(trace.final_protos.tensor().data(), p0.tensor().data());
    }

    #[test]
    fn default_config_descends_on_seeded_instance() {
        let (q, p0, target) = seeded_instance(9);
        let cfg = InnerConfig::default();
        let trace = inner_optimize(&q, p0, &target, &cfg).unwrap();
        assert_eq!(trace.losses.len(), 11);
        assert!(trace.losses[10] <= trace.losses[0]);
    }

    #[test]
    fn step_gradient_equals_backward_output() {
        // one inner step must land exactly where a manual update with
        // soft_predict_backward's dP lands
        let (q, p0, target) = seeded_instance(10);
        let cfg = InnerConfig {
            steps: 1,
            ..InnerConfig::default()
        };
        let trace = inner_optimize(&q, p0.clone(), &target, &cfg).unwrap();
        let g = soft_predict_backward(&q, &p0, cfg.alpha, &target).unwrap();
        let mut manual = p0.into_tensor();
        manual.add_scaled_assign(&g.d_protos, -cfg.lr).unwrap();
        assert_eq!(trace.final_protos.tensor().data(), manual.data());
    }

    #[test]
    fn deterministic_trace() {
        let (q, p0, target) = seeded_instance(11);
        let cfg = InnerConfig::default();
        let a = inner_optimize(&q, p0.clone(), &target, &cfg).unwrap();
        let b = inner_optimize(&q, p0, &target, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(
            a.final_protos.tensor().data(),
            b.final_protos.tensor().data()
        );
    }

    #[test]
    fn small_lr_never_increases_loss() {
        for seed in 0..20 {
            let (q, p0, target) = seeded_instance(seed);
            let cfg = InnerConfig {
                steps: 10,
                lr: 1e-3,
                ..InnerConfig::default()
            };
            let trace = inner_optimize(&q, p0, &target, &cfg).unwrap();
            for i in 1..trace.losses.len() {
                assert!(
                    trace.losses[i] <= trace.losses[i - 1] + 1e-15,
                    "seed {seed}: step {i} rose from {} to {}",
                    trace.losses[i - 1],
                    trace.losses[i]
                );
            }
        }
    }
}
