//! Procedural face-like images. Real samples are bilaterally symmetric;
//! fakes receive a one-sided perturbation. Blur controls quality.

use std::path::{Path, PathBuf};

use crate::error::{domain_err, Error, Result};
use crate::fidelity::{proxy_quality, write_manifest, FidelityRecord, Label};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

use super::image_io::{quantize, save_png};

pub const MANIFEST_NAME: &str = "manifest.csv";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_real: usize,
    pub n_fake: usize,
    pub image_size: usize,
    /// Gaussian blur sigmas in pixels at 32 px; one is drawn per sample.
    pub blur_levels: Vec<f64>,
    pub asymmetry_strength: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_real: 200,
            n_fake: 200,
            image_size: 32,
            blur_levels: vec![0.0, 0.0, 0.3, 0.3, 0.4, 0.45, 0.5, 0.55, 0.6, 0.7],
            asymmetry_strength: 1.0,
            noise_std: 0.015,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(domain_err!("image_size must be at least 16, got {}", self.image_size));
        }
        if self.blur_levels.is_empty() || self.blur_levels.iter().any(|b| !(*b >= 0.0)) {
            return Err(domain_err!("blur_levels must be a non-empty list of non-negative values"));
        }
        if !(self.asymmetry_strength >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(domain_err!("asymmetry_strength and noise_std must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (a, b) = ((u - self.cx) / self.rx, (v - self.cy) / self.ry);
        a * a + b * b <= 1.0
    }

    fn mirrored(&self) -> Self {
        Self { cx: 1.0 - self.cx, ..*self }
    }
}

#[derive(Debug, Clone)]
struct Face {
    background: [f64; 3],
    shapes: Vec<Ellipse>,
}

fn color(rng: &mut SplitMix64, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| (c + rng.uniform(-spread, spread)).clamp(0.0, 1.0))
}

fn random_face(rng: &mut SplitMix64) -> Face {
    let skin = color(rng, [0.78, 0.6, 0.5], 0.05);
    let dark = color(rng, [0.12, 0.1, 0.1], 0.04);
    let head = Ellipse {
        cx: 0.5,
        cy: rng.uniform(0.5, 0.54),
        rx: rng.uniform(0.3, 0.38),
        ry: rng.uniform(0.38, 0.46),
        color: skin,
    };
    let eye_y = rng.uniform(0.4, 0.46);
    let eye_dx = rng.uniform(0.12, 0.17);
    let eye_r = rng.uniform(0.05, 0.07);
    let eye = Ellipse { cx: 0.5 - eye_dx, cy: eye_y, rx: eye_r * 1.2, ry: eye_r, color: dark };
    let brow = Ellipse {
        cx: 0.5 - eye_dx,
        cy: eye_y - eye_r - rng.uniform(0.03, 0.05),
        rx: eye_r * 1.5,
        ry: 0.018,
        color: dark.map(|c| c * 0.8),
    };
    let nose = Ellipse {
        cx: 0.5,
        cy: rng.uniform(0.55, 0.6),
        rx: 0.025,
        ry: rng.uniform(0.05, 0.08),
        color: skin.map(|c| c * 0.75),
    };
    let mouth = Ellipse {
        cx: 0.5,
        cy: rng.uniform(0.7, 0.76),
        rx: rng.uniform(0.1, 0.15),
        ry: rng.uniform(0.025, 0.04),
        color: color(rng, [0.7, 0.2, 0.25], 0.1),
    };
    Face {
        background: color(rng, [0.35, 0.45, 0.55], 0.06),
        shapes: vec![head, eye, eye.mirrored(), brow, brow.mirrored(), nose, mouth],
    }
}

/// Supersampled rasterization; sample offsets are mirror symmetric within each pixel.
fn render(face: &Face, size: usize) -> Tensor<f32> {
    const SS: usize = 4;
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0f64; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let u = (x as f64 + (sx as f64 + 0.5) / SS as f64) / size as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / SS as f64) / size as f64;
                    let c = face
                        .shapes
                        .iter()
                        .rev()
                        .find(|e| e.contains(u, v))
                        .map_or(face.background, |e| e.color);
                    (0..3).for_each(|k| acc[k] += c[k]);
                }
            }
            for k in 0..3 {
                data[k * size * size + y * size + x] = (acc[k] / (SS * SS) as f64) as f32;
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("consistent shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Forgery {
    EyeShift,
    Warp,
    PatchSwap,
}

fn sample_at(d: &[f32], size: usize, c: usize, y: f64, x: f64) -> f32 {
    let x = x.clamp(0.0, (size - 1) as f64);
    let y = y.clamp(0.0, (size - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let p = |yy: usize, xx: usize| d[c * size * size + yy * size + xx];
    (p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx) * (1.0 - fy) + (p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx) * fy
}

/// Horizontal displacement confined to one half, fading to zero at the midline.
fn one_sided_warp(img: &Tensor<f32>, left: bool, amp: f64) -> Tensor<f32> {
    let size = img.shape()[1];
    let d = img.data();
    let mid = size as f64 / 2.0;
    let mut out = d.to_vec();
    for y in 0..size {
        let bump = (std::f64::consts::PI * (y as f64 + 0.5) / size as f64).sin();
        for x in 0..size {
            let xc = x as f64 + 0.5;
            let on_side = if left { xc < mid } else { xc > mid };
            if !on_side {
                continue;
            }
            let w = ((mid - xc).abs() / mid).min(1.0);
            let shift = amp * bump * (std::f64::consts::PI * w).sin() * if left { 1.0 } else { -1.0 };
            for c in 0..3 {
                out[c * size * size + y * size + x] = sample_at(d, size, c, y as f64, x as f64 + shift);
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

/// Copy a square patch from a vertically offset source onto one eye region.
fn patch_swap(img: &Tensor<f32>, cx: f64, cy: f64, half: usize, dy: isize) -> Tensor<f32> {
    let size = img.shape()[1];
    let d = img.data();
    let mut out = d.to_vec();
    let (px, py) = ((cx * size as f64) as isize, (cy * size as f64) as isize);
    let half = half as isize;
    for y in py - half..=py + half {
        for x in px - half..=px + half {
            let (sy, sx) = (y + dy, x);
            let inside = |v: isize| v >= 0 && v < size as isize;
            if !(inside(y) && inside(x) && inside(sy) && inside(sx)) {
                continue;
            }
            for c in 0..3 {
                out[c * size * size + y as usize * size + x as usize] = d[c * size * size + sy as usize * size + sx as usize];
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

fn forge(face: &Face, rng: &mut SplitMix64, size: usize, strength: f64) -> Tensor<f32> {
    let kind = [Forgery::EyeShift, Forgery::Warp, Forgery::PatchSwap][rng.below(3)];
    let left = rng.below(2) == 0;
    let scale = size as f64 / 32.0;
    match kind {
        Forgery::EyeShift => {
            let mut f = face.clone();
            let idx = if left { 1 } else { 2 };
            let eye = &mut f.shapes[idx];
            eye.cy += strength * rng.uniform(0.05, 0.09) * if rng.below(2) == 0 { 1.0 } else { -1.0 };
            eye.cx += strength * rng.uniform(-0.03, 0.03);
            eye.ry *= 1.0 + strength * rng.uniform(-0.4, 0.3);
            render(&f, size)
        }
        Forgery::Warp => {
            let amp = strength * scale * rng.uniform(2.0, 3.5);
            one_sided_warp(&render(face, size), left, amp)
        }
        Forgery::PatchSwap => {
            let eye = face.shapes[if left { 1 } else { 2 }];
            let half = ((eye.rx * size as f64).ceil() as usize).max(1);
            let dy = (strength * scale * rng.uniform(4.0, 6.0)).round() as isize;
            patch_swap(&render(face, size), eye.cx, eye.cy, half, dy)
        }
    }
}

fn add_noise(img: &mut Tensor<f32>, rng: &mut SplitMix64, std: f64) {
    if std > 0.0 {
        img.data_mut().iter_mut().for_each(|v| *v += (std * rng.normal()) as f32);
    }
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f64;
                    for (t, kv) in k.iter().enumerate() {
                        let o = t as isize - r;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + o).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += kv * src[ch * h * w + yy * w + xx] as f64;
                    }
                    out[ch * h * w + y * w + x] = acc as f32;
                }
            }
        }
        out
    };
    let tmp = pass(img.data(), true);
    Tensor::new(img.shape(), pass(&tmp, false)).expect("same shape")
}

/// One generated sample before quantization, exposed for inspection.
pub fn synth_sample(config: &SynthConfig, label: Label, index: usize) -> Tensor<f32> {
    let stream = match label {
        Label::Real => 2 * index as u64,
        Label::Fake => 2 * index as u64 + 1,
    };
    let mut rng = SplitMix64::new(config.seed).fork(stream);
    let face = random_face(&mut rng);
    let size = config.image_size;
    let mut img = match label {
        Label::Real => render(&face, size),
        Label::Fake => forge(&face, &mut rng, size, config.asymmetry_strength),
    };
    add_noise(&mut img, &mut rng, config.noise_std);
    let level = config.blur_levels[rng.below(config.blur_levels.len())];
    let img = gaussian_blur(&img, level * size as f64 / 32.0);
    let data = img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    quantize(&Tensor::new(img.shape(), data).expect("same shape"))
}

/// Write images and a `path,label,quality` manifest; returns the manifest path.
pub fn gen_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(config.n_real + config.n_fake);
    for (label, n) in [(Label::Real, config.n_real), (Label::Fake, config.n_fake)] {
        for i in 0..n {
            let img = synth_sample(config, label, i);
            let name = format!("{label}_{i:04}.png");
            save_png(&img, img_dir.join(&name))?;
            records.push(FidelityRecord::new(format!("{IMAGE_DIR}/{name}"), label, proxy_quality(&img)?));
        }
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &records, false)?;
    Ok(manifest)
}

/// Mean absolute difference between an image and its horizontal mirror.
pub fn mirror_asymmetry(img: &Tensor<f32>) -> f64 {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut s = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = ch * h * w + y * w;
                s += (d[base + x] - d[base + w - 1 - x]).abs() as f64;
            }
        }
    }
    s / d.len() as f64
}
