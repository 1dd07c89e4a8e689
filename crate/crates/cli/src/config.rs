//! Plain `key = value` run configuration with `#` comments.
//!
//! Every field is validated before any work starts and unknown keys are
//! rejected with their line number. The snapshot written next to training
//! outputs is itself a valid input config.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use biopt::embed::EmbedSpec;
use biopt::inner::{InitMode, InnerConfig};
use biopt::outer::{EpisodeSpec, LrDecay, OuterConfig};

/// Configuration / usage problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Novel,
    Base,
}

impl EvalSplit {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalSplit::Novel => "novel",
            EvalSplit::Base => "base",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub img_size: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_base: usize,
    pub n_novel: usize,
    pub embed: EmbedSpec,
    pub inner: InnerConfig,
    pub outer: OuterConfig,
    pub eval_episodes: usize,
    pub scales: Vec<f64>,
    pub eval_split: EvalSplit,
}

impl RunConfig {
    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            img_size: self.img_size,
        }
    }
}

/// Command-line overrides applied on top of the parsed file before
/// validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scales: Option<Vec<f64>>,
    pub inner_steps: Option<usize>,
    pub init_mode: Option<InitMode>,
}

fn err_at(path: &Path, line: usize, msg: impl fmt::Display) -> ConfigError {
    ConfigError(format!("{}:{line}: {msg}", path.display()))
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, String> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        out.push(
            part.parse::<T>()
                .map_err(|_| format!("bad {what} entry `{part}`"))?,
        );
    }
    Ok(out)
}

pub fn parse_scales(raw: &str) -> Result<Vec<f64>, ConfigError> {
    let scales: Vec<f64> = parse_list(raw, "scale").map_err(ConfigError)?;
    if scales.is_empty() || scales.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(ConfigError(format!("scales must be positive floats, got `{raw}`")));
    }
    Ok(scales)
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "img_size",
    "n_way",
    "k_shot",
    "n_base",
    "n_novel",
    "embed.widths",
    "embed.kernel",
    "embed.dilation",
    "inner.steps",
    "inner.lr",
    "inner.alpha",
    "inner.init_mode",
    "outer.lr",
    "outer.momentum",
    "outer.weight_decay",
    "outer.epochs",
    "outer.batch",
    "outer.lr_decay_factor",
    "outer.lr_decay_at",
    "outer.loss_weights",
    "eval.episodes",
    "eval.scales",
    "eval.split",
];

/// Parses and validates a config file plus overrides.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;

    let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err_at(path, line_no, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(err_at(path, line_no, format!("unknown key `{key}`")));
        }
        if entries.insert(key.clone(), (line_no, value)).is_some() {
            return Err(err_at(path, line_no, format!("duplicate key `{key}`")));
        }
    }

    let get = |key: &str| entries.get(key).map(|(_, v)| v.as_str());
    let parse_field = |key: &str, default: Option<&str>| -> Result<Option<String>, ConfigError> {
        Ok(get(key).map(str::to_string).or(default.map(str::to_string)))
    };
    macro_rules! num {
        ($key:expr, $default:expr, $ty:ty) => {{
            let raw = parse_field($key, Some($default))?.expect("default provided");
            raw.parse::<$ty>().map_err(|_| {
                let line = entries.get($key).map(|(l, _)| *l).unwrap_or(0);
                err_at(path, line, format!("key `{}`: cannot parse `{raw}`", $key))
            })?
        }};
    }

    let seed = match overrides.seed {
        Some(s) => s,
        None => match get("seed") {
            Some(raw) => raw.parse::<u64>().map_err(|_| {
                let line = entries.get("seed").map(|(l, _)| *l).unwrap_or(0);
                err_at(path, line, format!("key `seed`: cannot parse `{raw}`"))
            })?,
            None => {
                return Err(ConfigError(format!(
                    "{}: missing required key `seed`",
                    path.display()
                )))
            }
        },
    };

    let out = overrides
        .out
        .clone()
        .or_else(|| get("out").map(PathBuf::from));

    let img_size: usize = num!("img_size", "64", usize);
    let n_way: usize = num!("n_way", "2", usize);
    let k_shot: usize = num!("k_shot", "1", usize);
    let n_base: usize = num!("n_base", "6", usize);
    let n_novel: usize = num!("n_novel", "2", usize);

    let widths: Vec<usize> = parse_list(
        &parse_field("embed.widths", Some("8,16"))?.expect("default"),
        "width",
    )
    .map_err(|m| ConfigError(format!("{}: embed.widths: {m}", path.display())))?;
    let embed = EmbedSpec {
        in_channels: 3,
        widths,
        kernel: num!("embed.kernel", "3", usize),
        dilation: num!("embed.dilation", "1", usize),
    };
    embed
        .validate()
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;

    let init_mode = match overrides.init_mode {
        Some(m) => m,
        None => parse_field("inner.init_mode", Some("init_module"))?
            .expect("default")
            .parse::<InitMode>()
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?,
    };
    let inner = InnerConfig {
        steps: overrides
            .inner_steps
            .unwrap_or_else(|| num!("inner.steps", "10", usize)),
        lr: num!("inner.lr", "0.1", f64),
        alpha: num!("inner.alpha", "20", f64),
        init_mode,
    };
    inner
        .validate()
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;

    let loss_weights: Vec<f64> = parse_list(
        &parse_field("outer.loss_weights", Some("1,1,1"))?.expect("default"),
        "loss weight",
    )
    .map_err(|m| ConfigError(format!("{}: outer.loss_weights: {m}", path.display())))?;
    if loss_weights.len() != 3 {
        return Err(ConfigError(format!(
            "{}: outer.loss_weights needs exactly 3 entries",
            path.display()
        )));
    }
    let lr_decay = match (get("outer.lr_decay_factor"), get("outer.lr_decay_at")) {
        (None, None) => None,
        (Some(f), Some(at)) => Some(LrDecay {
            factor: f
                .parse()
                .map_err(|_| ConfigError(format!("{}: bad outer.lr_decay_factor", path.display())))?,
            at_update: at
                .parse()
                .map_err(|_| ConfigError(format!("{}: bad outer.lr_decay_at", path.display())))?,
        }),
        _ => {
            return Err(ConfigError(format!(
                "{}: outer.lr_decay_factor and outer.lr_decay_at must be set together",
                path.display()
            )))
        }
    };
    let outer = OuterConfig {
        lr: num!("outer.lr", "7e-3", f64),
        momentum: num!("outer.momentum", "0.9", f64),
        weight_decay: num!("outer.weight_decay", "5e-4", f64),
        epochs: num!("outer.epochs", "2000", usize),
        batch: num!("outer.batch", "8", usize),
        lr_decay,
        loss_weights: [loss_weights[0], loss_weights[1], loss_weights[2]],
    };
    outer
        .validate()
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;

    let scales = match &overrides.scales {
        Some(s) => s.clone(),
        None => parse_scales(&parse_field("eval.scales", Some("1.0"))?.expect("default"))?,
    };
    let eval_split = match parse_field("eval.split", Some("novel"))?.expect("default").as_str() {
        "novel" => EvalSplit::Novel,
        "base" => EvalSplit::Base,
        other => {
            return Err(ConfigError(format!(
                "{}: eval.split must be novel or base, got `{other}`",
                path.display()
            )))
        }
    };

    let cfg = RunConfig {
        seed,
        out,
        img_size,
        n_way,
        k_shot,
        n_base,
        n_novel,
        embed,
        inner,
        outer,
        eval_episodes: num!("eval.episodes", "500", usize),
        scales,
        eval_split,
    };
    validate_run_config(&cfg).map_err(|m| ConfigError(format!("{}: {m}", path.display())))?;
    Ok(cfg)
}

fn validate_run_config(cfg: &RunConfig) -> Result<(), String> {
    let d = cfg.embed.downsample();
    if cfg.img_size % d != 0 {
        return Err(format!(
            "img_size {} not divisible by the embedding downsample factor {d}",
            cfg.img_size
        ));
    }
    if cfg.img_size < 8 {
        return Err("img_size must be >= 8".to_string());
    }
    if cfg.n_way == 0 || cfg.k_shot == 0 {
        return Err("n_way and k_shot must be >= 1".to_string());
    }
    if cfg.n_base < cfg.n_way {
        return Err(format!(
            "n_base ({}) must be >= n_way ({})",
            cfg.n_base, cfg.n_way
        ));
    }
    if cfg.eval_split == EvalSplit::Novel && cfg.n_novel < cfg.n_way {
        return Err(format!(
            "n_novel ({}) must be >= n_way ({}) to evaluate on the novel split",
            cfg.n_novel, cfg.n_way
        ));
    }
    if cfg.scales.is_empty() {
        return Err("eval.scales must be nonempty".to_string());
    }
    Ok(())
}

/// Full key = value dump; reparses to an equivalent config.
pub fn snapshot(cfg: &RunConfig) -> String {
    let widths: Vec<String> = cfg.embed.widths.iter().map(|w| w.to_string()).collect();
    let scales: Vec<String> = cfg.scales.iter().map(|s| s.to_string()).collect();
    let weights: Vec<String> = cfg.outer.loss_weights.iter().map(|w| w.to_string()).collect();
    let mut out = String::from("# resolved configuration\n");
    out.push_str(&format!("seed = {}\n", cfg.seed));
    if let Some(dir) = &cfg.out {
        out.push_str(&format!("out = {}\n", dir.display()));
    }
    out.push_str(&format!("img_size = {}\n", cfg.img_size));
    out.push_str(&format!("n_way = {}\n", cfg.n_way));
    out.push_str(&format!("k_shot = {}\n", cfg.k_shot));
    out.push_str(&format!("n_base = {}\n", cfg.n_base));
    out.push_str(&format!("n_novel = {}\n", cfg.n_novel));
    out.push_str(&format!("embed.widths = {}\n", widths.join(",")));
    out.push_str(&format!("embed.kernel = {}\n", cfg.embed.kernel));
    out.push_str(&format!("embed.dilation = {}\n", cfg.embed.dilation));
    out.push_str(&format!("inner.steps = {}\n", cfg.inner.steps));
    out.push_str(&format!("inner.lr = {}\n", cfg.inner.lr));
    out.push_str(&format!("inner.alpha = {}\n", cfg.inner.alpha));
    out.push_str(&format!("inner.init_mode = {}\n", cfg.inner.init_mode));
    out.push_str(&format!("outer.lr = {}\n", cfg.outer.lr));
    out.push_str(&format!("outer.momentum = {}\n", cfg.outer.momentum));
    out.push_str(&format!("outer.weight_decay = {}\n", cfg.outer.weight_decay));
    out.push_str(&format!("outer.epochs = {}\n", cfg.outer.epochs));
    out.push_str(&format!("outer.batch = {}\n", cfg.outer.batch));
    if let Some(d) = &cfg.outer.lr_decay {
        out.push_str(&format!("outer.lr_decay_factor = {}\n", d.factor));
        out.push_str(&format!("outer.lr_decay_at = {}\n", d.at_update));
    }
    out.push_str(&format!("outer.loss_weights = {}\n", weights.join(",")));
    out.push_str(&format!("eval.episodes = {}\n", cfg.eval_episodes));
    out.push_str(&format!("eval.scales = {}\n", scales.join(",")));
    out.push_str(&format!("eval.split = {}\n", cfg.eval_split.as_str()));
    out
}
