//! Dilated 1-D convolution kernels.
//!
//! Layout: input `[c_in, T]`, weight `[c_out, c_in, K]`, output `[c_out, T]`,
//! zero padding `dilation * (K - 1) / 2` on both sides. Tap `k` reads frame
//! `t + (k - (K - 1) / 2) * dilation`.
//!
//! Each output row is produced by exactly one task and accumulated in a fixed
//! order, so sequential and parallel execution agree bit for bit.

use super::Real;
use crate::exec::Execution;

/// Valid output range `[lo, hi)` for a tap with signed frame offset `shift`.
#[inline]
fn tap_range(shift: isize, frames: usize) -> (usize, usize) {
    let t = frames as isize;
    let lo = (-shift).clamp(0, t) as usize;
    let hi = (t - shift).clamp(0, t) as usize;
    (lo, hi.max(lo))
}

#[inline]
fn tap_shift(k: usize, kernel: usize, dilation: usize) -> isize {
    (k as isize - (kernel as isize - 1) / 2) * dilation as isize
}

#[inline]
fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order.
#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [R::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = R::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub frames: usize,
    pub dilation: usize,
}

pub fn conv1d_forward<R: Real>(
    exec: Execution,
    dims: ConvDims,
    x: &[R],
    w: &[R],
    b: &[R],
) -> Vec<R> {
    let ConvDims { c_in, kernel, frames, dilation, c_out } = dims;
    let mut y = vec![R::zero(); c_out * frames];
    exec.for_each_row(&mut y, frames, |o, yrow| {
        yrow.fill(b[o]);
        for i in 0..c_in {
            let xrow = &x[i * frames..(i + 1) * frames];
            for k in 0..kernel {
                let wv = w[(o * c_in + i) * kernel + k];
                let shift = tap_shift(k, kernel, dilation);
                let (lo, hi) = tap_range(shift, frames);
                if lo < hi {
                    let src = (lo as isize + shift) as usize;
                    axpy(wv, &xrow[src..src + (hi - lo)], &mut yrow[lo..hi]);
                }
            }
        }
    });
    debug_assert_eq!(y.len(), c_out * frames);
    y
}

/// Gradients of the convolution with respect to input, weight and bias.
pub fn conv1d_backward<R: Real>(
    exec: Execution,
    dims: ConvDims,
    x: &[R],
    w: &[R],
    gy: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let ConvDims { c_in, c_out, kernel, frames, dilation } = dims;

    let gb: Vec<R> = (0..c_out)
        .map(|o| gy[o * frames..(o + 1) * frames].iter().copied().sum())
        .collect();

    let mut gw = vec![R::zero(); c_out * c_in * kernel];
    exec.for_each_row(&mut gw, c_in * kernel, |o, grow| {
        let gyrow = &gy[o * frames..(o + 1) * frames];
        for i in 0..c_in {
            let xrow = &x[i * frames..(i + 1) * frames];
            for k in 0..kernel {
                let shift = tap_shift(k, kernel, dilation);
                let (lo, hi) = tap_range(shift, frames);
                if lo < hi {
                    let src = (lo as isize + shift) as usize;
                    grow[i * kernel + k] = dot(&gyrow[lo..hi], &xrow[src..src + (hi - lo)]);
                }
            }
        }
    });

    let mut gx = vec![R::zero(); c_in * frames];
    exec.for_each_row(&mut gx, frames, |i, gxrow| {
        for o in 0..c_out {
            let gyrow = &gy[o * frames..(o + 1) * frames];
            for k in 0..kernel {
                let wv = w[(o * c_in + i) * kernel + k];
                let shift = tap_shift(k, kernel, dilation);
                let (lo, hi) = tap_range(shift, frames);
                if lo < hi {
                    let dst = (lo as isize + shift) as usize;
                    axpy(wv, &gyrow[lo..hi], &mut gxrow[dst..dst + (hi - lo)]);
                }
            }
        }
    });
    (gx, gw, gb)
}
