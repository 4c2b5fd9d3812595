//! Raw 2-D convolution kernels over flat NCHW buffers.
//!
//! A transposed convolution is the adjoint of a forward convolution with the
//! same kernel, so all three maps here serve both ops: the tape swaps the
//! roles of input and output for `conv2d_transpose`.

use alloc::vec;

use crate::error::{Error, Result};

/// Geometry of a forward convolution: input `N×C×H×W`, kernel `F×C×kh×kw`,
/// output `N×F×OH×OW`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn conv2d(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let err = || Error::InvalidGeometry {
            op: "conv2d",
            input: input.to_vec(),
            kernel: kernel.to_vec(),
            stride,
            padding,
        };
        let [n, c, h, w] = dims4(input).ok_or_else(err)?;
        let [f, kc, kh, kw] = dims4(kernel).ok_or_else(err)?;
        if c != kc || stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(err());
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Geometry of the forward convolution whose adjoint maps an input of
    /// shape `N×F×H'×W'` through kernel `F×C×kh×kw` to `N×C×H×W` with
    /// `H = (H'−1)·stride − 2·padding + kh`.
    pub fn transpose(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let err = || Error::InvalidGeometry {
            op: "conv2d_transpose",
            input: input.to_vec(),
            kernel: kernel.to_vec(),
            stride,
            padding,
        };
        let [n, f, hi, wi] = dims4(input).ok_or_else(err)?;
        let [kf, c, kh, kw] = dims4(kernel).ok_or_else(err)?;
        if f != kf || stride == 0 {
            return Err(err());
        }
        let full_h = (hi - 1) * stride + kh;
        let full_w = (wi - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return Err(err());
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            in_h: full_h - 2 * padding,
            in_w: full_w - 2 * padding,
            out_channels: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: hi,
            out_w: wi,
        })
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Output indices `o` in `[lo, hi)` whose tap `o·stride + k − padding`
    /// lands inside `0..in_len`.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn valid(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let last = in_len as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = ((last / s) + 1).min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

fn dims4(shape: &[usize]) -> Option<[usize; 4]> {
    <[usize; 4]>::try_from(shape).ok()
}

/// `out[n,f,oy,ox] = Σ x[n,c,oy·s−p+ky, ox·s−p+kx] · k[f,c,ky,kx]`
pub fn forward(g: &ConvGeometry, x: &[f64], k: &[f64], out: &mut [f64]) {
    let (ck, px) = (g.patch_len(), g.out_h * g.out_w);
    let mut cols = vec![0.0; ck * px];
    for (xn, on) in x
        .chunks_exact(g.image_len())
        .zip(out.chunks_exact_mut(g.out_channels * px))
    {
        im2col(g, xn, &mut cols);
        for (krow, orow) in k.chunks_exact(ck).zip(on.chunks_exact_mut(px)) {
            for (&kv, crow) in krow.iter().zip(cols.chunks_exact(px)) {
                if kv != 0.0 {
                    orow.iter_mut().zip(crow).for_each(|(o, c)| *o += kv * c);
                }
            }
        }
    }
}

pub fn backward_input(g: &ConvGeometry, dy: &[f64], k: &[f64], dx: &mut [f64]) {
    let (ck, px) = (g.patch_len(), g.out_h * g.out_w);
    let mut cols = vec![0.0; ck * px];
    for (dyn_, dxn) in dy
        .chunks_exact(g.out_channels * px)
        .zip(dx.chunks_exact_mut(g.image_len()))
    {
        cols.iter_mut().for_each(|v| *v = 0.0);
        for (krow, dyrow) in k.chunks_exact(ck).zip(dyn_.chunks_exact(px)) {
            for (&kv, crow) in krow.iter().zip(cols.chunks_exact_mut(px)) {
                if kv != 0.0 {
                    crow.iter_mut().zip(dyrow).for_each(|(c, d)| *c += kv * d);
                }
            }
        }
        col2im(g, &cols, dxn);
    }
}

pub fn backward_kernel(g: &ConvGeometry, x: &[f64], dy: &[f64], dk: &mut [f64]) {
    let (ck, px) = (g.patch_len(), g.out_h * g.out_w);
    let mut cols = vec![0.0; ck * px];
    for (xn, dyn_) in x.chunks_exact(g.image_len()).zip(dy.chunks_exact(g.out_channels * px)) {
        im2col(g, xn, &mut cols);
        for (dkrow, dyrow) in dk.chunks_exact_mut(ck).zip(dyn_.chunks_exact(px)) {
            for (d, crow) in dkrow.iter_mut().zip(cols.chunks_exact(px)) {
                *d += dyrow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// Unfolds one image into a `(C·kh·kw) × (out_h·out_w)` patch matrix.
/// Padded taps are never written, so `cols` must start zeroed and can be
/// reused across images of the same geometry.
fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    visit_taps(g, |xi, ci, len| {
        let xs = x[xi..].iter().step_by(g.stride);
        cols[ci..ci + len].iter_mut().zip(xs).for_each(|(c, v)| *c = *v);
    });
}

/// Adjoint of [`im2col`]: accumulates the patch matrix back into an image.
fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    visit_taps(g, |xi, ci, len| {
        let dxs = dx[xi..].iter_mut().step_by(g.stride);
        dxs.zip(&cols[ci..ci + len]).for_each(|(d, c)| *d += c);
    });
}

/// Calls `f(input_start, cols_start, len)` for every run of `len` output
/// pixels along a row that one kernel tap touches; the matching input
/// pixels start at `input_start` and are `stride` apart.
#[inline(always)]
fn visit_taps(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding);
    for c in 0..g.in_channels {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = g.valid(ky, ih, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = g.valid(kx, iw, ow);
                if ox_hi == ox_lo {
                    continue;
                }
                let row = ((c * kh + ky) * kw + kx) * oh * ow;
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let ix = ox_lo * s + kx - p;
                    f(c * ih * iw + iy * iw + ix, row + oy * ow + ox_lo, ox_hi - ox_lo);
                }
            }
        }
    }
}
