//! Weight initializers and the kernel algebra that turns the four
//! cross/same-stream kernels of a generalized residual layer into one fused
//! kernel (block matrix plus partial identity) and back.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RirError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Channel counts of the two streams. The fused tensor carries the residual
/// channels first, then the transient ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSplit {
    pub residual: usize,
    pub transient: usize,
}

impl StreamSplit {
    pub fn equal(per_stream: usize) -> Self {
        StreamSplit {
            residual: per_stream,
            transient: per_stream,
        }
    }

    pub fn total(&self) -> usize {
        self.residual + self.transient
    }
}

/// Whether a kernel is a dense matrix or a conv kernel of odd extent k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Fc,
    Conv(usize),
}

impl KernelKind {
    fn check(&self) -> Result<()> {
        if let KernelKind::Conv(k) = self {
            if k % 2 == 0 {
                return Err(RirError::config(format!(
                    "conv partial identity needs odd kernel extent, got {k}"
                )));
            }
        }
        Ok(())
    }
}

/// Flat indices of the partial identity's nonzero taps within a fused
/// kernel. Kept sparse so the weight-decay correction is O(n_r) per layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityMask {
    taps: Vec<usize>,
}

impl IdentityMask {
    pub fn for_kernel(split: StreamSplit, kind: KernelKind) -> Result<IdentityMask> {
        kind.check()?;
        let n = split.total();
        let taps = match kind {
            KernelKind::Fc => (0..split.residual).map(|i| i * n + i).collect(),
            KernelKind::Conv(k) => (0..split.residual)
                .map(|i| ((i * n + i) * k + k / 2) * k + k / 2)
                .collect(),
        };
        Ok(IdentityMask { taps })
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn add_to<T: Scalar>(&self, w: &mut Tensor<T>) {
        for &i in &self.taps {
            w.data_mut()[i] += T::one();
        }
    }

    pub fn subtract_from<T: Scalar>(&self, w: &mut Tensor<T>) {
        for &i in &self.taps {
            w.data_mut()[i] -= T::one();
        }
    }
}

/// Matrix (or center-tap conv kernel) that copies the first n_r channels and
/// zeroes the rest.
pub fn partial_identity<T: Scalar>(split: StreamSplit, kind: KernelKind) -> Result<Tensor<T>> {
    let mask = IdentityMask::for_kernel(split, kind)?;
    let n = split.total();
    let mut w = match kind {
        KernelKind::Fc => Tensor::zeros(&[n, n]),
        KernelKind::Conv(k) => Tensor::zeros(&[n, n, k, k]),
    };
    mask.add_to(&mut w);
    Ok(w)
}

/// The four kernels of a generalized residual layer, named by the stream
/// they read from and write to.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamKernels<T> {
    pub r_to_r: Tensor<T>,
    pub t_to_r: Tensor<T>,
    pub r_to_t: Tensor<T>,
    pub t_to_t: Tensor<T>,
}

impl<T: Scalar> StreamKernels<T> {
    /// (output split, input split, kind), validated for block consistency.
    pub fn layout(&self) -> Result<(StreamSplit, StreamSplit, KernelKind)> {
        let dims = |t: &Tensor<T>| -> Result<(usize, usize, KernelKind)> {
            match *t.shape() {
                [o, i] => Ok((o, i, KernelKind::Fc)),
                [o, i, kh, kw] if kh == kw => Ok((o, i, KernelKind::Conv(kh))),
                _ => Err(RirError::shape(format!(
                    "stream kernel must be rank 2 or square rank 4, got {:?}",
                    t.shape()
                ))),
            }
        };
        let (nr_out, nr_in, kind) = dims(&self.r_to_r)?;
        let (tr_o, nt_in, tr_k) = dims(&self.t_to_r)?;
        let (nt_out, rt_i, rt_k) = dims(&self.r_to_t)?;
        let (tt_o, tt_i, tt_k) = dims(&self.t_to_t)?;
        if tr_o != nr_out || rt_i != nr_in || tt_o != nt_out || tt_i != nt_in {
            return Err(RirError::shape(format!(
                "incompatible stream kernel blocks: rr {:?}, tr {:?}, rt {:?}, tt {:?}",
                self.r_to_r.shape(),
                self.t_to_r.shape(),
                self.r_to_t.shape(),
                self.t_to_t.shape()
            )));
        }
        if tr_k != kind || rt_k != kind || tt_k != kind {
            return Err(RirError::shape("mixed kernel extents across stream blocks".to_string()));
        }
        Ok((
            StreamSplit { residual: nr_out, transient: nt_out },
            StreamSplit { residual: nr_in, transient: nt_in },
            kind,
        ))
    }

    pub fn zeros_like(&self) -> StreamKernels<T> {
        StreamKernels {
            r_to_r: Tensor::zeros(self.r_to_r.shape()),
            t_to_r: Tensor::zeros(self.t_to_r.shape()),
            r_to_t: Tensor::zeros(self.r_to_t.shape()),
            t_to_t: Tensor::zeros(self.t_to_t.shape()),
        }
    }
}

/// Concatenates the four stream kernels into the block layout
/// [[r->r, t->r], [r->t, t->t]] on the (output, input) channel axes.
/// No identity is added; see [`fuse_kernels`] for the shortcut-carrying form.
pub fn concat_kernels<T: Scalar>(kernels: &StreamKernels<T>) -> Result<Tensor<T>> {
    let (out, inp, kind) = kernels.layout()?;
    let (fo, fi) = (out.total(), inp.total());
    let mut w = match kind {
        KernelKind::Fc => Tensor::zeros(&[fo, fi]),
        KernelKind::Conv(k) => Tensor::zeros(&[fo, fi, k, k]),
    };
    let tap = match kind {
        KernelKind::Fc => 1usize,
        KernelKind::Conv(k) => k * k,
    };
    let mut place = |block: &Tensor<T>, row0: usize, col0: usize, rows: usize, cols: usize| {
        for r in 0..rows {
            for c in 0..cols {
                let src = (r * cols + c) * tap;
                let dst = ((row0 + r) * fi + (col0 + c)) * tap;
                w.data_mut()[dst..dst + tap].copy_from_slice(&block.data()[src..src + tap]);
            }
        }
    };
    place(&kernels.r_to_r, 0, 0, out.residual, inp.residual);
    place(&kernels.t_to_r, 0, inp.residual, out.residual, inp.transient);
    place(&kernels.r_to_t, out.residual, 0, out.transient, inp.residual);
    place(&kernels.t_to_t, out.residual, inp.residual, out.transient, inp.transient);
    Ok(w)
}

/// Block-concatenates the four kernels and adds the partial identity, so a
/// single layer holding the result computes the whole generalized residual
/// layer (identity shortcut included) on a concatenated (r, t) input.
pub fn fuse_kernels<T: Scalar>(kernels: &StreamKernels<T>) -> Result<Tensor<T>> {
    let (out, inp, kind) = kernels.layout()?;
    if out != inp {
        return Err(RirError::shape(format!(
            "fuse: identity needs matching splits, got out {out:?} vs in {inp:?}"
        )));
    }
    let mut w = concat_kernels(kernels)?;
    IdentityMask::for_kernel(inp, kind)?.add_to(&mut w);
    Ok(w)
}

/// Slices a block-concatenated kernel back into its four stream blocks.
pub fn slice_kernels<T: Scalar>(
    w: &Tensor<T>,
    out: StreamSplit,
    inp: StreamSplit,
) -> Result<StreamKernels<T>> {
    let (fo, fi, kind) = match *w.shape() {
        [o, i] => (o, i, KernelKind::Fc),
        [o, i, kh, kw] if kh == kw => (o, i, KernelKind::Conv(kh)),
        _ => {
            return Err(RirError::shape(format!(
                "fused kernel must be rank 2 or square rank 4, got {:?}",
                w.shape()
            )))
        }
    };
    if fo != out.total() || fi != inp.total() {
        return Err(RirError::shape(format!(
            "fused kernel {:?} does not match splits out {out:?} / in {inp:?}",
            w.shape()
        )));
    }
    let tap = match kind {
        KernelKind::Fc => 1usize,
        KernelKind::Conv(k) => k * k,
    };
    let take = |row0: usize, col0: usize, rows: usize, cols: usize| -> Tensor<T> {
        let shape: Vec<usize> = match kind {
            KernelKind::Fc => vec![rows, cols],
            KernelKind::Conv(k) => vec![rows, cols, k, k],
        };
        let mut block = Tensor::zeros(&shape);
        for r in 0..rows {
            for c in 0..cols {
                let dst = (r * cols + c) * tap;
                let src = ((row0 + r) * fi + (col0 + c)) * tap;
                block.data_mut()[dst..dst + tap].copy_from_slice(&w.data()[src..src + tap]);
            }
        }
        block
    };
    Ok(StreamKernels {
        r_to_r: take(0, 0, out.residual, inp.residual),
        t_to_r: take(0, inp.residual, out.residual, inp.transient),
        r_to_t: take(out.residual, 0, out.transient, inp.residual),
        t_to_t: take(out.residual, inp.residual, out.transient, inp.transient),
    })
}

/// Inverse of [`fuse_kernels`]: subtracts the partial identity, then slices.
pub fn split_kernels<T: Scalar>(w: &Tensor<T>, split: StreamSplit) -> Result<StreamKernels<T>> {
    let kind = match *w.shape() {
        [_, _] => KernelKind::Fc,
        [_, _, kh, kw] if kh == kw => KernelKind::Conv(kh),
        _ => return Err(RirError::shape(format!("bad fused kernel shape {:?}", w.shape()))),
    };
    let mut learned = w.clone();
    IdentityMask::for_kernel(split, kind)?.subtract_from(&mut learned);
    slice_kernels(&learned, split, split)
}

fn fan_in_out(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [out, inp] => Ok((inp, out)),
        [f, c, kh, kw] => Ok((c * kh * kw, f * kh * kw)),
        _ => Err(RirError::shape(format!(
            "initializer wants rank 2 or 4 shape, got {shape:?}"
        ))),
    }
}

/// Uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_init<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let (fan_in, fan_out) = fan_in_out(shape)?;
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-b..=b)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Zero-mean normal with std sqrt(2 / fan_in).
pub fn msr_init<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    let (fan_in, _) = fan_in_out(shape)?;
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Orthogonalizes a random Gaussian matrix (rank 4 flattened to
/// [F, C*kh*kw]); whichever dimension is smaller ends up orthonormal. Gain 1.
pub fn orthogonal_init<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
    fan_in_out(shape)?;
    let (rows, cols) = match *shape {
        [o, i] => (o, i),
        [f, c, kh, kw] => (f, c * kh * kw),
        _ => unreachable!(),
    };
    let mut a: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();

    // Modified Gram-Schmidt on the smaller dimension, one re-orthogonalization
    // pass for stability. Operates on rows; the wide case is handled by
    // orthogonalizing the transpose.
    let transpose = rows > cols;
    let (m, n) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut q = vec![0.0f64; m * n];
    for r in 0..m {
        for c in 0..n {
            q[r * n + c] = if transpose { a[c * cols + r] } else { a[r * cols + c] };
        }
    }
    for _pass in 0..2 {
        for i in 0..m {
            for j in 0..i {
                let mut dot = 0.0;
                for c in 0..n {
                    dot += q[i * n + c] * q[j * n + c];
                }
                for c in 0..n {
                    q[i * n + c] -= dot * q[j * n + c];
                }
            }
            let norm: f64 = q[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
            for c in 0..n {
                q[i * n + c] /= norm;
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            a[r * cols + c] = if transpose { q[c * n + r] } else { q[r * n + c] };
        }
    }
    Tensor::from_vec(shape, a.into_iter().map(T::from_f64).collect())
}

/// Initializer selection, as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Xavier,
    Msr,
    Orthogonal,
}

impl InitKind {
    pub fn sample<T: Scalar, R: Rng>(&self, shape: &[usize], rng: &mut R) -> Result<Tensor<T>> {
        match self {
            InitKind::Xavier => xavier_init(shape, rng),
            InitKind::Msr => msr_init(shape, rng),
            InitKind::Orthogonal => orthogonal_init(shape, rng),
        }
    }
}

impl std::str::FromStr for InitKind {
    type Err = RirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xavier" => Ok(InitKind::Xavier),
            "msr" => Ok(InitKind::Msr),
            "orthogonal" => Ok(InitKind::Orthogonal),
            other => Err(RirError::Lookup(format!("unknown initializer '{other}'"))),
        }
    }
}
