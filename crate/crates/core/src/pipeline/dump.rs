use std::path::{Path, PathBuf};

use crate::error::{config_err, Error, Result};
use crate::model::{Mode, SsaaFormer};
use crate::tensor::{Graph, Tensor};

use super::image_io::{prepare_input, save_png};
use super::image_io::stack;

/// Maps whose value range is below this render as flat mid-gray.
pub const FLAT_RANGE: f32 = 1e-6;

/// Channel-mean of a `[1, C, H, W]` activation scaled to `[0, 1]`.
pub fn channel_mean_map(act: &Tensor<f32>) -> Tensor<f32> {
    let s = act.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let d = act.data();
    let mut m = vec![0.0f32; h * w];
    for ch in 0..c {
        for (i, v) in m.iter_mut().enumerate() {
            *v += d[ch * h * w + i];
        }
    }
    m.iter_mut().for_each(|v| *v /= c as f32);
    let lo = m.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = m.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo < FLAT_RANGE {
        m.iter_mut().for_each(|v| *v = 0.5);
    } else {
        m.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
    Tensor::new(&[1, h, w], m).expect("consistent shape")
}

/// Write one grayscale PNG per block for the first `n_blocks` blocks.
pub fn dump_feature_maps(
    model: &SsaaFormer<f32>,
    image: &Tensor<f32>,
    out_dir: impl AsRef<Path>,
    n_blocks: usize,
) -> Result<Vec<PathBuf>> {
    let total = model.config().total_blocks();
    if n_blocks > total {
        return Err(config_err!("requested {n_blocks} blocks but the model has {total}"));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let x = stack(&[&prepare_input(image, model.config().input_size)?])?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (out, _) = model.forward(&mut g, xv, Mode::Eval)?;
    let mut paths = Vec::with_capacity(n_blocks);
    for (k, &v) in out.block_outputs.iter().take(n_blocks).enumerate() {
        let path = out_dir.join(format!("block_{:02}.png", k + 1));
        save_png(&channel_mean_map(g.value(v)), &path)?;
        paths.push(path);
    }
    Ok(paths)
}
