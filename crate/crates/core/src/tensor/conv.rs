//! Direct (loop) 2-D cross-correlation with zero padding and channel groups.

use super::Element;
use crate::error::{config_err, dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self::new(1, 0, 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: Option<&[usize]>,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(dim_err!(
                "conv2d expects a rank-4 input and kernel, got {input:?} and {kernel:?}"
            ));
        }
        if spec.stride == 0 {
            return Err(config_err!("conv2d stride must be at least 1"));
        }
        if spec.groups == 0 || input[1] % spec.groups != 0 || kernel[0] % spec.groups != 0 {
            return Err(config_err!(
                "conv2d groups={} must divide input channels {} and output channels {}",
                spec.groups,
                input[1],
                kernel[0]
            ));
        }
        let [n, c_in, h, w] = [input[0], input[1], input[2], input[3]];
        let [c_out, cpg, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        if cpg * spec.groups != c_in {
            return Err(dim_err!(
                "conv2d kernel expects {} input channels per group, input has {} channels in {} groups",
                cpg,
                c_in,
                spec.groups
            ));
        }
        let p = spec.padding;
        if h + 2 * p < kh || w + 2 * p < kw {
            return Err(dim_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * p,
                w + 2 * p
            ));
        }
        if let Some(b) = bias {
            if b != [c_out] {
                return Err(dim_err!("conv2d bias shape {b:?}, expected [{c_out}]"));
            }
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho: (h + 2 * p - kh) / spec.stride + 1,
            wo: (w + 2 * p - kw) / spec.stride + 1,
            spec,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.ho, self.wo]
    }

    /// Output indices `o` in `[lo, hi)` for which `o*stride + k - pad` lands in `[0, len)`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let p = self.spec.padding;
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if len + p > k {
            ((len - 1 + p - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(out_offset, in_offset)` for every output cell touched by tap `(ki, kj)`.
    #[inline]
    fn for_each_tap(&self, ki: usize, kj: usize, mut f: impl FnMut(usize, usize)) {
        let s = self.spec.stride;
        let p = self.spec.padding;
        let (oh_lo, oh_hi) = self.valid_range(ki, self.h, self.ho);
        let (ow_lo, ow_hi) = self.valid_range(kj, self.w, self.wo);
        for oh in oh_lo..oh_hi {
            let ih = oh * s + ki - p;
            for ow in ow_lo..ow_hi {
                let iw = ow * s + kj - p;
                f(oh * self.wo + ow, ih * self.w + iw);
            }
        }
    }
}

pub(crate) fn forward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let cpg = g.c_in / g.spec.groups;
    let opg = g.c_out / g.spec.groups;
    let (hw_in, hw_out, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut out = vec![T::zero(); g.n * g.c_out * hw_out];
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let group = oc / opg;
            let dst = &mut out[(n * g.c_out + oc) * hw_out..][..hw_out];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[oc]);
            }
            for icl in 0..cpg {
                let ic = group * cpg + icl;
                let src = &x[(n * g.c_in + ic) * hw_in..][..hw_in];
                let wk = &kernel[(oc * cpg + icl) * kk..][..kk];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = wk[ki * g.kw + kj];
                        g.for_each_tap(ki, kj, |o, i| dst[o] = dst[o] + wv * src[i]);
                    }
                }
            }
        }
    }
    out
}

/// Gradients with respect to input, kernel and bias.
pub(crate) fn backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = g.c_in / g.spec.groups;
    let opg = g.c_out / g.spec.groups;
    let (hw_in, hw_out, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); g.c_out];
    for n in 0..g.n {
        for oc in 0..g.c_out {
            let group = oc / opg;
            let go = &gout[(n * g.c_out + oc) * hw_out..][..hw_out];
            gb[oc] = gb[oc] + go.iter().copied().sum::<T>();
            for icl in 0..cpg {
                let ic = group * cpg + icl;
                let base = (n * g.c_in + ic) * hw_in;
                let src = &x[base..][..hw_in];
                let gsrc = &mut gx[base..][..hw_in];
                let wbase = (oc * cpg + icl) * kk;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let widx = wbase + ki * g.kw + kj;
                        let wv = kernel[widx];
                        let mut acc = T::zero();
                        g.for_each_tap(ki, kj, |o, i| {
                            gsrc[i] = gsrc[i] + wv * go[o];
                            acc = acc + src[i] * go[o];
                        });
                        gk[widx] = gk[widx] + acc;
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}
