//! Binary model file:
//!
//! ```text
//! "SSAF" | u32 version | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 rank | rank x u32 dims | f32 payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. The first tensor,
//! `__config__`, carries the [`ModelConfig`]; batch-norm buffers follow the
//! parameters as `<norm>.running_mean` and `<norm>.running_var`.

use std::collections::HashMap;
use std::path::Path;

use super::{ModelConfig, SsaaFormer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"SSAF";
pub const MODEL_VERSION: u32 = 1;
const CONFIG_TENSOR: &str = "__config__";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn encode_config(c: &ModelConfig) -> Vec<f32> {
    let mut v = vec![c.in_channels as f32, c.input_size as f32];
    v.extend(c.stage_depths.iter().map(|&d| d as f32));
    v.extend(c.stage_channels.iter().map(|&d| d as f32));
    v.extend(
        [c.ssaa_blocks, c.heads, c.ffn_expansion, c.dw_kernel, c.dpe_kernel]
            .iter()
            .map(|&d| d as f32),
    );
    v.extend((0..4).map(|i| ((c.seed >> (16 * i)) & 0xFFFF) as f32));
    v
}

fn decode_config(v: &[f32]) -> Result<ModelConfig> {
    if v.len() != 19 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0 || *x > 16_777_216.0) {
        return Err(format_err("malformed __config__ tensor"));
    }
    let u = |i: usize| v[i] as usize;
    let seed = (0..4).fold(0u64, |acc, i| acc | ((v[15 + i] as u64) << (16 * i)));
    if (15..19).any(|i| v[i] > 65_535.0) {
        return Err(format_err("malformed seed in __config__ tensor"));
    }
    Ok(ModelConfig {
        in_channels: u(0),
        input_size: u(1),
        stage_depths: [u(2), u(3), u(4), u(5)],
        stage_channels: [u(6), u(7), u(8), u(9)],
        ssaa_blocks: u(10),
        heads: u(11),
        ffn_expansion: u(12),
        dw_kernel: u(13),
        dpe_kernel: u(14),
        seed,
    })
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u32).to_le_bytes());
    }
    for v in data {
        out.extend(v.to_le_bytes());
    }
}

/// Serialize to bytes.
pub fn write_model(model: &SsaaFormer<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(MODEL_MAGIC);
    out.extend(MODEL_VERSION.to_le_bytes());
    let count = 1 + model.params().len() + 2 * model.running_stats().len();
    out.extend((count as u32).to_le_bytes());
    let cfg = encode_config(model.config());
    put_tensor(&mut out, CONFIG_TENSOR, &[cfg.len()], cfg.into_iter());
    for (name, p) in model.param_names().iter().zip(model.params()) {
        put_tensor(&mut out, name, p.shape(), p.data().iter().copied());
    }
    for (name, r) in model.running_names().iter().zip(model.running_stats()) {
        let c = r.mean.len();
        put_tensor(&mut out, &format!("{name}.running_mean"), &[c], r.mean.iter().copied());
        put_tensor(&mut out, &format!("{name}.running_var"), &[c], r.var.iter().copied());
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, ctx: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(format!("file truncated {}", ctx())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, ctx: &dyn Fn() -> String) -> Result<u32> {
        let b = self.take(4, ctx)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parse bytes produced by [`write_model`]. Nothing is returned unless the
/// whole file is valid.
pub fn read_model(bytes: &[u8]) -> Result<SsaaFormer<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let header = || "in header".to_string();
    if cur.take(4, &header)? != MODEL_MAGIC {
        return Err(format_err("bad magic bytes, not an SSAF model file"));
    }
    let version = cur.u32(&header)?;
    if version != MODEL_VERSION {
        return Err(format_err(format!("unsupported model version {version}")));
    }
    let count = cur.u32(&header)? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for i in 0..count {
        let at_entry = || format!("in header of tensor #{i}");
        let len = cur.u32(&at_entry)? as usize;
        let name = std::str::from_utf8(cur.take(len, &at_entry)?)
            .map_err(|_| format_err(format!("tensor #{i} name is not UTF-8")))?
            .to_string();
        let in_header = || format!("in header of tensor '{name}'");
        let rank = cur.u32(&in_header)? as usize;
        if rank == 0 || rank > 8 {
            return Err(format_err(format!("tensor '{name}' has invalid rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32(&in_header)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d).filter(|_| d > 0))
            .ok_or_else(|| format_err(format!("tensor '{name}' has invalid shape {shape:?}")))?;
        let in_payload = || format!("inside tensor '{name}'");
        let nbytes = n
            .checked_mul(4)
            .ok_or_else(|| format_err(format!("tensor '{name}' is too large")))?;
        let raw = cur.take(nbytes, &in_payload)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, shape, data));
    }
    let body_end = cur.pos;
    let stored = cur.u32(&|| "before checksum".to_string())?;
    if cur.pos != bytes.len() {
        return Err(format_err("trailing bytes after checksum"));
    }
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(format_err("checksum mismatch"));
    }

    let mut iter = tensors.into_iter();
    let (name, _, cfg) = iter
        .next()
        .ok_or_else(|| format_err("model file holds no tensors"))?;
    if name != CONFIG_TENSOR {
        return Err(format_err(format!("first tensor is '{name}', expected {CONFIG_TENSOR}")));
    }
    let config = decode_config(&cfg)?;
    let mut model = SsaaFormer::<f32>::new(config).map_err(|e| format_err(format!("stored config invalid: {e}")))?;
    let mut by_name: HashMap<String, (Vec<usize>, Vec<f32>)> =
        iter.map(|(n, s, d)| (n, (s, d))).collect();

    let names = model.param_names().to_vec();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let (shape, data) = by_name
            .remove(name)
            .ok_or_else(|| format_err(format!("missing tensor '{name}'")))?;
        if shape != p.shape() {
            return Err(format_err(format!(
                "tensor '{name}' has shape {shape:?}, layout expects {:?}",
                p.shape()
            )));
        }
        *p = Tensor::new(&shape, data)?.tracked();
    }
    let rnames = model.running_names().to_vec();
    for (name, r) in rnames.iter().zip(model.running_stats_mut()) {
        for (suffix, slot) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
            let key = format!("{name}.{suffix}");
            let (shape, data) = by_name
                .remove(&key)
                .ok_or_else(|| format_err(format!("missing tensor '{key}'")))?;
            if shape != [slot.len()] {
                return Err(format_err(format!(
                    "tensor '{key}' has shape {shape:?}, layout expects [{}]",
                    slot.len()
                )));
            }
            *slot = data;
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(format_err(format!("unexpected tensor '{extra}'")));
    }
    Ok(model)
}

pub fn save_model(model: &SsaaFormer<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SsaaFormer<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}
