//! Binary model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic           8 bytes  "BIOPTCK1"
//! in_channels     u32
//! kernel          u32
//! dilation        u32
//! n_layers        u32
//! widths          n_layers x u32
//! gen_channels    u32      (equals the last width)
//! kernel data     f64 x (kernel*kernel*cin*cout) per layer, in layer order
//! generator W     f64 x (2*gen_channels*gen_channels)
//! generator b     f64 x gen_channels
//! ```

use std::path::Path;

use crate::embed::{EmbedParams, EmbedSpec};
use crate::error::{Error, Result};
use crate::initmod::WeightGenerator;
use crate::outer::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BIOPTCK1";

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.data.len() {
            return Err(Error::format(self.path, "checkpoint truncated"));
        }
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let spec = model.embed.spec();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, spec.in_channels);
    push_u32(&mut buf, spec.kernel);
    push_u32(&mut buf, spec.dilation);
    push_u32(&mut buf, spec.widths.len());
    for &w in &spec.widths {
        push_u32(&mut buf, w);
    }
    push_u32(&mut buf, model.gen.channels());
    for kernel in model.embed.layers() {
        push_f64s(&mut buf, kernel.data());
    }
    push_f64s(&mut buf, model.gen.w().data());
    push_f64s(&mut buf, model.gen.b().data());
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 8 || &data[..8] != MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let mut r = Reader {
        data: &data,
        pos: 8,
        path,
    };
    let in_channels = r.u32()?;
    let kernel = r.u32()?;
    let dilation = r.u32()?;
    let n_layers = r.u32()?;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::format(path, format!("implausible layer count {n_layers}")));
    }
    let mut widths = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        widths.push(r.u32()?);
    }
    let gen_channels = r.u32()?;
    let spec = EmbedSpec {
        in_channels,
        widths,
        kernel,
        dilation,
    };
    spec.validate().map_err(|e| Error::format(path, e.to_string()))?;
    if gen_channels != spec.out_channels() {
        return Err(Error::format(
            path,
            format!(
                "generator channels {gen_channels} do not match embedding output {}",
                spec.out_channels()
            ),
        ));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let cin = spec.layer_in_channels(layer);
        let cout = spec.widths[layer];
        let n = kernel * kernel * cin * cout;
        layers.push(Tensor::new(vec![kernel, kernel, cin, cout], r.f64s(n)?)?);
    }
    let w = Tensor::new(vec![2 * gen_channels, gen_channels], r.f64s(2 * gen_channels * gen_channels)?)?;
    let b = Tensor::new(vec![gen_channels], r.f64s(gen_channels)?)?;
    if r.pos != data.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint payload"));
    }
    let embed = EmbedParams::from_layers(spec, layers).map_err(|e| Error::format(path, e.to_string()))?;
    let gen = WeightGenerator::new(w, b).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Model { embed, gen })
}
