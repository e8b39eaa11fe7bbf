//! Raw dense kernels behind the differentiable ops.
//!
//! Every output element is produced by one fixed sequential loop, so the
//! parallel and sequential paths are bit-identical for any thread count.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays on the calling thread.
pub const PAR_THRESHOLD: usize = 1 << 15;

/// Execution strategy for a kernel call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon over independent output chunks (falls back to sequential
    /// without the `parallel` feature).
    Parallel,
}

impl Exec {
    /// Parallel for large enough workloads, sequential otherwise.
    pub fn auto(work: usize) -> Self {
        if cfg!(feature = "parallel") && work >= PAR_THRESHOLD {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

fn for_each_chunk<T, F>(exec: Exec, out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
        _ => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_chunk(exec, &mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// Transposes a row-major `rows × cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation `[b, in_c, in_h, in_w] * [out_c, in_c, kh, kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Forward-convolution geometry; `None` when the padded input is smaller
    /// than the kernel or the stride is zero.
    pub fn conv(input: [usize; 4], kernel: [usize; 4], stride: usize, pad: usize) -> Option<Self> {
        let [batch, in_c, in_h, in_w] = input;
        let [out_c, kc, kh, kw] = kernel;
        if stride == 0 || kc != in_c || in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeometry {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry of the convolution whose input gradient is the transposed
    /// convolution of `input` (`[b, ci, h, w]`) with `kernel` (`[ci, co, kh, kw]`).
    pub fn transposed(input: [usize; 4], kernel: [usize; 4], stride: usize, pad: usize) -> Option<Self> {
        let [batch, ci, h, w] = input;
        let [kci, co, kh, kw] = kernel;
        if stride == 0 || kci != ci {
            return None;
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return None;
        }
        Some(ConvGeometry {
            batch,
            in_c: co,
            in_h: full_h - 2 * pad,
            in_w: full_w - 2 * pad,
            out_c: ci,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        })
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_c * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_c * self.out_h * self.out_w
    }

    pub fn macs(&self) -> usize {
        self.output_len() * self.in_c * self.kh * self.kw
    }

    /// Input coordinate hit by output `oy` and kernel tap `ky`, if in bounds.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        if p >= 0 && (p as usize) < extent {
            Some(p as usize)
        } else {
            None
        }
    }
}

/// Cross-correlation forward pass.
pub fn conv2d_forward<T: Scalar>(exec: Exec, g: &ConvGeometry, x: &[T], k: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.output_len()];
    for_each_chunk(exec, &mut out, plane, |bo, dst| {
        let (b, o) = (bo / g.out_c, bo % g.out_c);
        for c in 0..g.in_c {
            let xbase = (b * g.in_c + c) * g.in_h * g.in_w;
            let kbase = (o * g.in_c + c) * g.kh * g.kw;
            for oy in 0..g.out_h {
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                    for ox in 0..g.out_w {
                        let mut acc = dst[oy * g.out_w + ox];
                        for kx in 0..g.kw {
                            if let Some(ix) = g.src(ox, kx, g.in_w) {
                                acc = acc + x[xbase + iy * g.in_w + ix] * k[kbase + ky * g.kw + kx];
                            }
                        }
                        dst[oy * g.out_w + ox] = acc;
                    }
                }
            }
        }
    });
    out
}

/// Gradient of the forward pass with respect to its input. This is also the
/// forward pass of the transposed convolution.
pub fn conv2d_backward_input<T: Scalar>(exec: Exec, g: &ConvGeometry, grad_out: &[T], k: &[T]) -> Vec<T> {
    let per_batch = g.in_c * g.in_h * g.in_w;
    let mut dx = vec![T::zero(); g.input_len()];
    for_each_chunk(exec, &mut dx, per_batch, |b, dst| {
        for o in 0..g.out_c {
            let gbase = (b * g.out_c + o) * g.out_h * g.out_w;
            for c in 0..g.in_c {
                let kbase = (o * g.in_c + c) * g.kh * g.kw;
                let xbase = c * g.in_h * g.in_w;
                for oy in 0..g.out_h {
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                        for ox in 0..g.out_w {
                            let gv = grad_out[gbase + oy * g.out_w + ox];
                            for kx in 0..g.kw {
                                if let Some(ix) = g.src(ox, kx, g.in_w) {
                                    let d = &mut dst[xbase + iy * g.in_w + ix];
                                    *d = *d + gv * k[kbase + ky * g.kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient of the forward pass with respect to the kernel.
pub fn conv2d_backward_kernel<T: Scalar>(exec: Exec, g: &ConvGeometry, grad_out: &[T], x: &[T]) -> Vec<T> {
    let per_out = g.in_c * g.kh * g.kw;
    let mut dk = vec![T::zero(); g.out_c * per_out];
    for_each_chunk(exec, &mut dk, per_out, |o, dst| {
        for b in 0..g.batch {
            let gbase = (b * g.out_c + o) * g.out_h * g.out_w;
            for c in 0..g.in_c {
                let xbase = (b * g.in_c + c) * g.in_h * g.in_w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = dst[(c * g.kh + ky) * g.kw + kx];
                        for oy in 0..g.out_h {
                            let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                            for ox in 0..g.out_w {
                                if let Some(ix) = g.src(ox, kx, g.in_w) {
                                    acc = acc + grad_out[gbase + oy * g.out_w + ox] * x[xbase + iy * g.in_w + ix];
                                }
                            }
                        }
                        dst[(c * g.kh + ky) * g.kw + kx] = acc;
                    }
                }
            }
        }
    });
    dk
}

/// [`par_map`] under an explicit strategy.
pub fn map_exec<I, O, F>(exec: Exec, items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Send + Sync,
{
    match exec {
        Exec::Parallel => par_map(items, f),
        Exec::Sequential => items.into_iter().map(f).collect(),
    }
}

/// Maps `f` over independent items, in parallel when the feature is on.
/// Output order matches input order.
pub fn par_map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}
