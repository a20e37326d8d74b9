use rayon::prelude::*;

use crate::error::{Result, RirError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Samples per work unit when convolutions fan out across threads. Gradient
/// partials are reduced in chunk order, so results do not depend on how many
/// threads actually run.
const SAMPLE_CHUNK: usize = 8;

pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(RirError::config("conv stride must be >= 1".to_string()));
    }
    if extent + 2 * pad < k {
        return Err(RirError::config(format!(
            "kernel extent {k} exceeds padded input extent {}",
            extent + 2 * pad
        )));
    }
    Ok((extent + 2 * pad - k) / stride + 1)
}

/// out[n,f,y,x] = sum_{c,i,j} input[n,c,y*stride+i-pad, x*stride+j-pad] * kernel[f,c,i,j]
/// with out-of-range input reading as zero.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let (f, kc, kh, kw) = kernel.dims4()?;
    if kc != c {
        return Err(RirError::shape(format!(
            "conv2d: input has {c} channels, kernel expects {kc}"
        )));
    }
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    let ckk = c * kh * kw;
    let ohow = oh * ow;

    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    let kptr = KernelPtr(kernel.data().as_ptr());
    out.data_mut()
        .par_chunks_mut(f * ohow)
        .zip(input.data().par_chunks(c * h * w))
        .for_each(|(out_n, in_n)| {
            let mut cols = vec![T::zero(); ckk * ohow];
            im2col(in_n, c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
            // out_n[f, ohow] = kernel[f, ckk] * cols[ckk, ohow]
            unsafe {
                T::gemm(
                    f,
                    ckk,
                    ohow,
                    T::one(),
                    kptr.get(),
                    ckk as isize,
                    1,
                    cols.as_ptr(),
                    ohow as isize,
                    1,
                    T::zero(),
                    out_n.as_mut_ptr(),
                    ohow as isize,
                    1,
                );
            }
        });
    Ok(out)
}

/// Exact adjoints of the convolution's linear map: returns
/// (grad_input, grad_kernel) for the given upstream gradient.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = input.dims4()?;
    let (f, kc, kh, kw) = kernel.dims4()?;
    if kc != c {
        return Err(RirError::shape(format!(
            "conv2d_backward: input has {c} channels, kernel expects {kc}"
        )));
    }
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    let (gn, gf, goh, gow) = grad_out.dims4()?;
    if (gn, gf, goh, gow) != (n, f, oh, ow) {
        return Err(RirError::shape(format!(
            "conv2d_backward: grad_out shape {:?} does not match output [{n}, {f}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let ckk = c * kh * kw;
    let ohow = oh * ow;
    let chw = c * h * w;

    let mut grad_input = Tensor::zeros(&[n, c, h, w]);
    let kptr = KernelPtr(kernel.data().as_ptr());

    // Each chunk accumulates a private grad_kernel partial; partials are
    // summed in chunk order afterwards so the reduction order is fixed.
    let partials: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(SAMPLE_CHUNK * chw)
        .zip(input.data().par_chunks(SAMPLE_CHUNK * chw))
        .zip(grad_out.data().par_chunks(SAMPLE_CHUNK * f * ohow))
        .map(|((gi_chunk, in_chunk), go_chunk)| {
            let samples = in_chunk.len() / chw;
            let mut partial = vec![T::zero(); f * ckk];
            let mut cols = vec![T::zero(); ckk * ohow];
            let mut gcols = vec![T::zero(); ckk * ohow];
            for s in 0..samples {
                let in_s = &in_chunk[s * chw..(s + 1) * chw];
                let go_s = &go_chunk[s * f * ohow..(s + 1) * f * ohow];
                let gi_s = &mut gi_chunk[s * chw..(s + 1) * chw];

                im2col(in_s, c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
                unsafe {
                    // partial[f, ckk] += go_s[f, ohow] * cols^T[ohow, ckk]
                    T::gemm(
                        f,
                        ohow,
                        ckk,
                        T::one(),
                        go_s.as_ptr(),
                        ohow as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        ohow as isize,
                        T::one(),
                        partial.as_mut_ptr(),
                        ckk as isize,
                        1,
                    );
                    // gcols[ckk, ohow] = kernel^T[ckk, f] * go_s[f, ohow]
                    T::gemm(
                        ckk,
                        f,
                        ohow,
                        T::one(),
                        kptr.get(),
                        1,
                        ckk as isize,
                        go_s.as_ptr(),
                        ohow as isize,
                        1,
                        T::zero(),
                        gcols.as_mut_ptr(),
                        ohow as isize,
                        1,
                    );
                }
                col2im_add(&gcols, c, h, w, kh, kw, stride, pad, oh, ow, gi_s);
            }
            partial
        })
        .collect();

    let mut grad_kernel = Tensor::zeros(&[f, c, kh, kw]);
    for partial in &partials {
        for (g, p) in grad_kernel.data_mut().iter_mut().zip(partial) {
            *g += *p;
        }
    }
    Ok((grad_input, grad_kernel))
}

// Raw kernel pointer shared across the rayon closures. The kernel tensor is
// borrowed immutably for the whole call, so reads through it are safe.
#[derive(Clone, Copy)]
struct KernelPtr<T>(*const T);
unsafe impl<T> Sync for KernelPtr<T> {}
unsafe impl<T> Send for KernelPtr<T> {}

impl<T> KernelPtr<T> {
    fn get(&self) -> *const T {
        self.0
    }
}

/// Valid output range [lo, hi) for one kernel tap: positions where
/// o*stride + k_off - pad lands inside [0, extent).
#[inline]
fn tap_range(extent: usize, out_extent: usize, stride: usize, pad: usize, k_off: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off + stride - 1) / stride
    } else {
        0
    };
    let max_src = extent + pad;
    let hi = if max_src > k_off {
        ((max_src - k_off - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(out_extent), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ohow = oh * ow;
    let mut row = 0usize;
    for ci in 0..c {
        let chan = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (ylo, yhi) = tap_range(h, oh, stride, pad, ki);
            for kj in 0..kw {
                let (xlo, xhi) = tap_range(w, ow, stride, pad, kj);
                let dst_all = &mut cols[row * ohow..(row + 1) * ohow];
                row += 1;
                dst_all[..ylo * ow].fill(T::zero());
                dst_all[yhi * ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let y = oy * stride + ki - pad;
                    let src_row = &chan[y * w..y * w + w];
                    let dst = &mut dst_all[oy * ow..(oy + 1) * ow];
                    dst[..xlo].fill(T::zero());
                    dst[xhi..].fill(T::zero());
                    if stride == 1 {
                        let src_lo = xlo + kj - pad;
                        dst[xlo..xhi].copy_from_slice(&src_row[src_lo..src_lo + (xhi - xlo)]);
                    } else {
                        for (ox, d) in dst[xlo..xhi].iter_mut().enumerate() {
                            *d = src_row[(xlo + ox) * stride + kj - pad];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    gcols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut [T],
) {
    let ohow = oh * ow;
    let mut row = 0usize;
    for ci in 0..c {
        let chan = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            let (ylo, yhi) = tap_range(h, oh, stride, pad, ki);
            for kj in 0..kw {
                let (xlo, xhi) = tap_range(w, ow, stride, pad, kj);
                let src_all = &gcols[row * ohow..(row + 1) * ohow];
                row += 1;
                for oy in ylo..yhi {
                    let y = oy * stride + ki - pad;
                    let dst_row = &mut chan[y * w..y * w + w];
                    let src = &src_all[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let dst_lo = xlo + kj - pad;
                        for (d, s) in dst_row[dst_lo..dst_lo + (xhi - xlo)]
                            .iter_mut()
                            .zip(&src[xlo..xhi])
                        {
                            *d += *s;
                        }
                    } else {
                        for (ox, s) in src[xlo..xhi].iter().enumerate() {
                            dst_row[(xlo + ox) * stride + kj - pad] += *s;
                        }
                    }
                }
            }
        }
    }
}
