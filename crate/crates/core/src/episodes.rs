//! Deterministic synthetic shape-segmentation episodes.
//!
//! A class is a (shape kind, texture) combination: one saturated foreground
//! color with optional diagonal brightness stripes and per-pixel noise, over
//! a noisy gray background. One foreground object per image, at a random
//! scale of 0.2-0.6 of the image width and random position, resampled until
//! its mask covers a workable fraction of the image. Every pixel value is
//! quantized to the k/255 grid so episodes round-trip the on-disk PPM/PGM
//! format losslessly. All generation is a pure function of (pool, seed).

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::netpbm;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Bar,
    Cross,
    Ellipse,
    LShape,
}

pub const SHAPE_KINDS: [ShapeKind; 8] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::Bar,
    ShapeKind::Cross,
    ShapeKind::Ellipse,
    ShapeKind::LShape,
];

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15], // red
    [0.15, 0.80, 0.20], // green
    [0.20, 0.25, 0.90], // blue
    [0.85, 0.80, 0.15], // yellow
    [0.85, 0.20, 0.80], // magenta
    [0.15, 0.80, 0.85], // cyan
    [0.90, 0.55, 0.10], // orange
    [0.55, 0.15, 0.85], // purple
];

const BG_NOISE: f64 = 0.06;

/// Accepted foreground fraction of a rendered object.
const MIN_FG_FRAC: f64 = 0.025;
const MAX_FG_FRAC: f64 = 0.42;

/// A semantic class: unique shape kind / texture combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeClass {
    pub id: usize,
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub stripe_freq: f64,
    pub noise_amp: f64,
}

/// Disjoint base (training) and novel (evaluation) class pools.
#[derive(Debug, Clone)]
pub struct ClassPool {
    pub base: Vec<ShapeClass>,
    pub novel: Vec<ShapeClass>,
}

/// Draws `n_base + n_novel` distinct kind/texture combinations.
pub fn make_class_pool(n_base: usize, n_novel: usize, seed: u64) -> Result<ClassPool> {
    if n_base == 0 {
        return Err(Error::invalid(
            "class pool: need at least one base class to train on".to_string(),
        ));
    }
    let available = SHAPE_KINDS.len() * PALETTE.len();
    if n_base + n_novel > available {
        return Err(Error::invalid(format!(
            "class pool: {} classes requested but only {available} kind/texture combinations exist",
            n_base + n_novel
        )));
    }
    let mut combos: Vec<(usize, usize)> = (0..SHAPE_KINDS.len())
        .flat_map(|k| (0..PALETTE.len()).map(move |p| (k, p)))
        .collect();
    let mut rng = Rng::new(seed).derive(0x504f_4f4c);
    rng.shuffle(&mut combos);
    let build = |id: usize, (k, p): (usize, usize)| ShapeClass {
        id,
        kind: SHAPE_KINDS[k],
        color: PALETTE[p],
        stripe_freq: [0.0, 3.0, 6.0][p % 3],
        noise_amp: [0.04, 0.08][(k + p) % 2],
    };
    let base = combos[..n_base]
        .iter()
        .enumerate()
        .map(|(i, &c)| build(i, c))
        .collect();
    let novel = combos[n_base..n_base + n_novel]
        .iter()
        .enumerate()
        .map(|(i, &c)| build(n_base + i, c))
        .collect();
    Ok(ClassPool { base, novel })
}

/// One few-shot task: labeled support pairs plus query image(s).
#[derive(Debug, Clone)]
pub struct Episode {
    /// N*K pairs; the pair for way i, shot k carries labels {0, i+1}.
    pub support: Vec<(Tensor, LabelMask)>,
    pub query: Vec<(Tensor, Option<LabelMask>)>,
    /// Global ids of the episode's classes; local label c maps to
    /// `class_ids[c - 1]`.
    pub class_ids: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn img_dims(&self) -> (usize, usize) {
        let s = self.support[0].0.shape();
        (s[0], s[1])
    }
}

fn inside(kind: ShapeKind, u: f64, v: f64) -> bool {
    match kind {
        ShapeKind::Disk => u * u + v * v <= 0.25,
        ShapeKind::Square => u.abs() <= 0.5 && v.abs() <= 0.5,
        ShapeKind::Triangle => v.abs() <= 0.5 && u.abs() <= (v + 0.5) / 2.0,
        ShapeKind::Ring => {
            let r2 = u * u + v * v;
            (0.275 * 0.275..=0.25).contains(&r2)
        }
        ShapeKind::Bar => u.abs() <= 0.5 && v.abs() <= 0.2,
        ShapeKind::Cross => {
            (u.abs() <= 0.5 && v.abs() <= 0.17) || (v.abs() <= 0.5 && u.abs() <= 0.17)
        }
        ShapeKind::Ellipse => (u / 0.5).powi(2) + (v / 0.3).powi(2) <= 1.0,
        ShapeKind::LShape => {
            ((-0.5..=-0.1).contains(&u) && v.abs() <= 0.5)
                || ((0.1..=0.5).contains(&v) && u.abs() <= 0.5)
        }
    }
}

fn rasterize(kind: ShapeKind, cx: f64, cy: f64, ext: f64, size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        let v = (y as f64 + 0.5 - cy) / ext;
        for x in 0..size {
            let u = (x as f64 + 0.5 - cx) / ext;
            mask[y * size + x] = inside(kind, u, v);
        }
    }
    mask
}

#[inline]
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one image of `class` with its pixel-exact foreground mask
/// (true = foreground).
fn render(class: &ShapeClass, size: usize, rng: &mut Rng) -> Result<(Tensor, Vec<bool>)> {
    let bg_gray = rng.range_f64(0.35, 0.65);
    let mut mask = None;
    for _ in 0..1000 {
        let scale = rng.range_f64(0.2, 0.6);
        let ext = scale * size as f64;
        let half = ext / 2.0;
        let cx = rng.range_f64(half, size as f64 - half);
        let cy = rng.range_f64(half, size as f64 - half);
        let m = rasterize(class.kind, cx, cy, ext, size);
        let frac = m.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if (MIN_FG_FRAC..=MAX_FG_FRAC).contains(&frac) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::invalid(format!(
            "episode generator: could not place a {:?} within the accepted size range",
            class.kind
        ))
    })?;

    let mut img = Tensor::zeros(vec![size, size, 3]);
    for y in 0..size {
        for x in 0..size {
            let base = (y * size + x) * 3;
            if mask[y * size + x] {
                let stripe = if class.stripe_freq > 0.0 {
                    let phase = std::f64::consts::TAU * class.stripe_freq
                        * (x + y) as f64
                        / size as f64;
                    1.0 - 0.3 * (0.5 + 0.5 * phase.sin())
                } else {
                    1.0
                };
                for ch in 0..3 {
                    let noise = rng.range_f64(-class.noise_amp, class.noise_amp);
                    img.data_mut()[base + ch] = quantize(class.color[ch] * stripe + noise);
                }
            } else {
                for ch in 0..3 {
                    let noise = rng.range_f64(-BG_NOISE, BG_NOISE);
                    img.data_mut()[base + ch] = quantize(bg_gray + noise);
                }
            }
        }
    }
    Ok((img, mask))
}

fn bool_to_labels(mask: &[bool], label: u8, size: usize) -> LabelMask {
    let labels = mask.iter().map(|&b| if b { label } else { 0 }).collect();
    LabelMask::new(size, size, labels).expect("mask matches size*size")
}

/// Generates an N-way K-shot episode with one query image. Identical
/// `(pool, seed)` pairs produce bitwise-identical episodes.
pub fn gen_episode(
    pool: &[ShapeClass],
    n_way: usize,
    k_shot: usize,
    img_size: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || n_way > pool.len() {
        return Err(Error::invalid(format!(
            "gen_episode: n_way {n_way} out of range for a pool of {}",
            pool.len()
        )));
    }
    if k_shot == 0 {
        return Err(Error::invalid("gen_episode: k_shot must be >= 1".to_string()));
    }
    if img_size < 8 {
        return Err(Error::invalid("gen_episode: img_size must be >= 8".to_string()));
    }
    let mut rng = Rng::new(seed).derive(0x4550_4953);

    // sample N distinct classes: partial Fisher-Yates over pool indices
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    for i in 0..n_way {
        let j = i + rng.below(pool.len() - i);
        indices.swap(i, j);
    }
    let ways: Vec<&ShapeClass> = indices[..n_way].iter().map(|&i| &pool[i]).collect();

    let mut support = Vec::with_capacity(n_way * k_shot);
    for (way, class) in ways.iter().enumerate() {
        for _ in 0..k_shot {
            let (img, fg) = render(class, img_size, &mut rng)?;
            support.push((img, bool_to_labels(&fg, (way + 1) as u8, img_size)));
        }
    }
    let q_way = rng.below(n_way);
    let (img, fg) = render(ways[q_way], img_size, &mut rng)?;
    let query = vec![(img, Some(bool_to_labels(&fg, (q_way + 1) as u8, img_size)))];

    Ok(Episode {
        support,
        query,
        class_ids: ways.iter().map(|c| c.id).collect(),
    })
}

/// Writes an episode directory: `manifest.txt`, `support_<i>_img.ppm`,
/// `support_<i>_mask.pgm`, `query_<j>_img.ppm` and, when ground truth is
/// present, `query_<j>_mask.pgm`.
pub fn save_episode_dir(episode: &Episode, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = episode.n_way();
    let k = episode.support.len() / n;
    let ids: Vec<String> = episode.class_ids.iter().map(|i| i.to_string()).collect();
    let manifest = format!(
        "N = {n}\nK = {k}\nn_query = {}\nclass_ids = {}\n",
        episode.query.len(),
        ids.join(",")
    );
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    for (i, (img, mask)) in episode.support.iter().enumerate() {
        netpbm::write_ppm(&dir.join(format!("support_{i}_img.ppm")), img)?;
        netpbm::write_pgm(&dir.join(format!("support_{i}_mask.pgm")), mask)?;
    }
    for (j, (img, mask)) in episode.query.iter().enumerate() {
        netpbm::write_ppm(&dir.join(format!("query_{j}_img.ppm")), img)?;
        if let Some(mask) = mask {
            netpbm::write_pgm(&dir.join(format!("query_{j}_mask.pgm")), mask)?;
        }
    }
    Ok(())
}

fn manifest_value<'a>(
    fields: &'a [(String, String)],
    key: &str,
    path: &Path,
) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::format(path, format!("manifest missing key `{key}`")))
}

/// Loads an episode directory written by [`save_episode_dir`]. Query masks
/// are optional; everything else is validated (consistent image sizes, mask
/// labels within the manifest's N).
pub fn load_episode_dir(dir: &Path) -> Result<Episode> {
    let mpath = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut fields = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&mpath, format!("malformed line `{line}`")))?;
        fields.push((k.trim().to_string(), v.trim().to_string()));
    }
    let parse_num = |key: &str| -> Result<usize> {
        manifest_value(&fields, key, &mpath)?
            .parse()
            .map_err(|_| Error::format(&mpath, format!("key `{key}` is not a number")))
    };
    let n = parse_num("N")?;
    let k = parse_num("K")?;
    let n_query = parse_num("n_query")?;
    let class_ids: Vec<usize> = {
        let raw = manifest_value(&fields, "class_ids", &mpath)?;
        let mut ids = Vec::new();
        for part in raw.split(',') {
            ids.push(part.trim().parse().map_err(|_| {
                Error::format(&mpath, format!("bad class id `{}`", part.trim()))
            })?);
        }
        ids
    };
    if n == 0 || k == 0 || n_query == 0 || class_ids.len() != n {
        return Err(Error::format(
            &mpath,
            format!("inconsistent manifest: N={n} K={k} n_query={n_query} ids={class_ids:?}"),
        ));
    }

    let mut dims: Option<(usize, usize)> = None;
    let mut check_dims = |path: &Path, h: usize, w: usize| -> Result<()> {
        match dims {
            None => {
                dims = Some((h, w));
                Ok(())
            }
            Some(d) if d == (h, w) => Ok(()),
            Some(d) => Err(Error::format(
                path,
                format!("image size {h}x{w} differs from {}x{}", d.0, d.1),
            )),
        }
    };
    let check_labels = |path: &Path, mask: &LabelMask| -> Result<()> {
        let max = mask.max_label() as usize;
        if max > n {
            return Err(Error::format(
                path,
                format!("mask label {max} exceeds manifest N={n}"),
            ));
        }
        Ok(())
    };

    let mut support = Vec::with_capacity(n * k);
    for i in 0..n * k {
        let ipath = dir.join(format!("support_{i}_img.ppm"));
        let img = netpbm::read_ppm(&ipath)?;
        check_dims(&ipath, img.shape()[0], img.shape()[1])?;
        let mpath = dir.join(format!("support_{i}_mask.pgm"));
        let mask = netpbm::read_pgm(&mpath)?;
        check_labels(&mpath, &mask)?;
        if (img.shape()[0], img.shape()[1]) != mask.dims() {
            return Err(Error::format(&mpath, "mask size differs from its image"));
        }
        support.push((img, mask));
    }
    let mut query = Vec::with_capacity(n_query);
    for j in 0..n_query {
        let ipath = dir.join(format!("query_{j}_img.ppm"));
        let img = netpbm::read_ppm(&ipath)?;
        check_dims(&ipath, img.shape()[0], img.shape()[1])?;
        let mqpath = dir.join(format!("query_{j}_mask.pgm"));
        let mask = if mqpath.exists() {
            let m = netpbm::read_pgm(&mqpath)?;
            check_labels(&mqpath, &m)?;
            if (img.shape()[0], img.shape()[1]) != m.dims() {
                return Err(Error::format(&mqpath, "mask size differs from its image"));
            }
            Some(m)
        } else {
            None
        };
        query.push((img, mask));
    }
    Ok(Episode {
        support,
        query,
        class_ids,
    })
}
