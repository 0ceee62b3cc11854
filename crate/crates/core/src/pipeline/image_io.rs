use std::path::Path;

use crate::error::{domain_err, Error, Result};
use crate::tensor::Tensor;

/// Fixed per-channel normalization applied before the backbone.
pub const INPUT_MEAN: f32 = 0.5;
pub const INPUT_STD: f32 = 0.5;

/// Decode an image file into a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantize a `[3, H, W]` or `[1, H, W]` tensor in `[0, 1]` to 8 bits and back.
pub fn quantize(img: &Tensor<f32>) -> Tensor<f32> {
    let data = img.data().iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
    Tensor::new(img.shape(), data).expect("same shape")
}

/// Encode a `[3, H, W]` (RGB) or `[1, H, W]` (gray) tensor in `[0, 1]` as PNG bytes.
pub fn encode_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(domain_err!("expected a [1|3, H, W] image, got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let mut raw = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            raw.push(to_u8(d[ch * h * w + i]));
        }
    }
    let color = if c == 3 { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &raw,
        w as u32,
        h as u32,
        color,
    )
    .map_err(|e| domain_err!("png encoding failed: {e}"))?;
    Ok(out)
}

pub fn save_png(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(domain_err!("expected a [C, H, W] image, got {s:?}"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(domain_err!("cannot resize to {out_h}x{out_w}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let d = img.data();
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (src - i0 as f64) as f32)
    };
    let mut out = vec![0.0f32; c * out_h * out_w];
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, w, out_w);
            for ch in 0..c {
                let p = |y: usize, x: usize| d[ch * h * w + y * w + x];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[ch * out_h * out_w + oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Resize to `size × size` and apply the fixed input normalization.
pub fn prepare_input(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let mut t = resize_bilinear(img, size, size)?;
    t.data_mut().iter_mut().for_each(|v| *v = (*v - INPUT_MEAN) / INPUT_STD);
    Ok(t)
}

/// Stack equally shaped `[C, H, W]` tensors into `[N, C, H, W]`.
pub fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| domain_err!("cannot stack an empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(crate::error::dim_err!("stack shape mismatch {:?} vs {:?}", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}
