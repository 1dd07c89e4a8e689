//! The three-mode ablation ladder and the inner-step sweep.
//!
//! All modes share the run seed: identical embedding initialization,
//! identical training episode stream, identical evaluation episodes. The
//! only difference is the inner-loop mode, so mean-IoU deltas isolate what
//! prototype optimization and the init module contribute.

use biopt::episodes::{gen_episode, make_class_pool, ClassPool, Episode};
use biopt::eval::{evaluate, EvalReport};
use biopt::inner::{InitMode, InnerConfig};
use biopt::outer::{train, Model, TrainLog};
use biopt::rng::Rng;
use biopt::Result;

use crate::config::{EvalSplit, RunConfig};

pub const LADDER_MODES: [InitMode; 3] = [
    InitMode::Baseline,
    InitMode::SupportInit,
    InitMode::InitModule,
];

pub fn class_pool_for(cfg: &RunConfig) -> Result<ClassPool> {
    let pool_seed = Rng::new(cfg.seed).derive(0x434c_5350).seed_at(0);
    make_class_pool(cfg.n_base, cfg.n_novel, pool_seed)
}

/// The evaluation episode stream: a pure function of the run seed and the
/// requested split, shared across modes and step counts.
pub fn eval_episodes(cfg: &RunConfig, pool: &ClassPool) -> Result<Vec<Episode>> {
    let classes = match cfg.eval_split {
        EvalSplit::Novel => &pool.novel,
        EvalSplit::Base => &pool.base,
    };
    let seeder = Rng::new(cfg.seed).derive(0x4556_414c);
    (0..cfg.eval_episodes)
        .map(|i| {
            gen_episode(
                classes,
                cfg.n_way,
                cfg.k_shot,
                cfg.img_size,
                seeder.seed_at(i as u64),
            )
        })
        .collect()
}

pub struct ModeArtifacts {
    pub mode: InitMode,
    pub model: Model,
    pub log: TrainLog,
    pub report: EvalReport,
}

pub struct LadderArtifacts {
    pub per_mode: Vec<ModeArtifacts>,
}

impl LadderArtifacts {
    pub fn comparison_csv(&self) -> String {
        let mut out = String::from("mode,mean_iou,binary_iou,n_episodes\n");
        for m in &self.per_mode {
            out.push_str(&format!(
                "{},{},{},{}\n",
                m.mode, m.report.mean_iou, m.report.binary_iou, m.report.n_episodes
            ));
        }
        out
    }

    pub fn by_mode(&self, mode: InitMode) -> &ModeArtifacts {
        self.per_mode
            .iter()
            .find(|m| m.mode == mode)
            .expect("ladder holds all three modes")
    }
}

pub fn train_mode(cfg: &RunConfig, pool: &ClassPool, mode: InitMode, threads: usize) -> Result<(Model, TrainLog)> {
    let inner = InnerConfig {
        init_mode: mode,
        ..cfg.inner
    };
    let out = train(
        &pool.base,
        cfg.episode_spec(),
        cfg.embed.clone(),
        &cfg.outer,
        &inner,
        cfg.seed,
        threads,
    )?;
    Ok((out.model, out.log))
}

pub fn eval_mode(
    cfg: &RunConfig,
    model: &Model,
    episodes: &[Episode],
    mode: InitMode,
    steps: usize,
    threads: usize,
) -> Result<EvalReport> {
    let inner = InnerConfig {
        init_mode: mode,
        steps,
        ..cfg.inner
    };
    evaluate(model, episodes, &inner, &cfg.scales, threads)
}

/// Trains and evaluates baseline, support_init and init_module under the
/// shared seed and episode streams.
pub fn run_ladder(cfg: &RunConfig, threads: usize) -> Result<LadderArtifacts> {
    let pool = class_pool_for(cfg)?;
    let episodes = eval_episodes(cfg, &pool)?;
    let mut per_mode = Vec::with_capacity(LADDER_MODES.len());
    for mode in LADDER_MODES {
        let (model, log) = train_mode(cfg, &pool, mode, threads)?;
        let report = eval_mode(cfg, &model, &episodes, mode, cfg.inner.steps, threads)?;
        per_mode.push(ModeArtifacts {
            mode,
            model,
            log,
            report,
        });
    }
    Ok(LadderArtifacts { per_mode })
}

/// Evaluates a trained init_module model at each inner step count in
/// `lo..=hi` over the shared evaluation stream.
pub fn sweep_steps(
    cfg: &RunConfig,
    model: &Model,
    episodes: &[Episode],
    lo: usize,
    hi: usize,
    threads: usize,
) -> Result<Vec<(usize, EvalReport)>> {
    let mut rows = Vec::with_capacity(hi - lo + 1);
    for steps in lo..=hi {
        let report = eval_mode(cfg, model, episodes, InitMode::InitModule, steps, threads)?;
        rows.push((steps, report));
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[(usize, EvalReport)]) -> String {
    let mut out = String::from("steps,mean_iou,binary_iou\n");
    for (steps, report) in rows {
        out.push_str(&format!("{},{},{}\n", steps, report.mean_iou, report.binary_iou));
    }
    out
}
