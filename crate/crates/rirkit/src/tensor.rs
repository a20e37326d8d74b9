use crate::error::{Result, RirError};
use crate::scalar::Scalar;

/// Dense row-major tensor of rank 1..=4. Activations use [N, C, H, W],
/// convolution kernels [F, C, kh, kw], matrices [rows, cols].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        debug_assert!(!shape.is_empty() && shape.len() <= 4);
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 4 {
            return Err(RirError::shape(format!(
                "rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(RirError::shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(RirError::shape(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Shape as (N, C, H, W); errors unless rank is exactly 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(RirError::shape(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(RirError::shape(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let (_, cc, hh, ww) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn at4_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let (cc, hh, ww) = (self.shape[1], self.shape[2], self.shape[3]);
        &mut self.data[((n * cc + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at2_mut(&mut self, r: usize, c: usize) -> &mut T {
        let cols = self.shape[1];
        &mut self.data[r * cols + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(RirError::shape(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(RirError::shape(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// axpy: self += alpha * other.
    pub fn add_scaled(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(RirError::shape(format!(
                "add_scaled: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * *b;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.to_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (&a, &b)| m.max((a.to_f64() - b.to_f64()).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum()
    }
}

/// Copy channels [c0, c0+len) of an activation tensor.
pub fn channel_slice<T: Scalar>(x: &Tensor<T>, c0: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if c0 + len > c {
        return Err(RirError::shape(format!(
            "channel_slice: [{c0}, {}) out of {c} channels",
            c0 + len
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, len, h, w]);
    for i in 0..n {
        let src = &x.data()[(i * c + c0) * plane..(i * c + c0 + len) * plane];
        out.data_mut()[i * len * plane..(i + 1) * len * plane].copy_from_slice(src);
    }
    Ok(out)
}

/// dst[:, c0..c0+src_channels] += src
pub fn add_to_channels<T: Scalar>(dst: &mut Tensor<T>, c0: usize, src: &Tensor<T>) -> Result<()> {
    let (n, c, h, w) = dst.dims4()?;
    let (sn, sc, sh, sw) = src.dims4()?;
    if sn != n || sh != h || sw != w || c0 + sc > c {
        return Err(RirError::shape(format!(
            "add_to_channels: src {:?} at offset {c0} into dst {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    let plane = h * w;
    for i in 0..n {
        let d = &mut dst.data_mut()[(i * c + c0) * plane..(i * c + c0 + sc) * plane];
        let s = &src.data()[i * sc * plane..(i + 1) * sc * plane];
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += *sv;
        }
    }
    Ok(())
}

/// Concatenate two activation tensors along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(RirError::shape(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    let plane = h * w;
    for i in 0..n {
        let dst = &mut out.data_mut()[i * (ca + cb) * plane..(i + 1) * (ca + cb) * plane];
        dst[..ca * plane].copy_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        dst[ca * plane..].copy_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Ok(out)
}

/// Split an activation tensor into its first `c_first` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if c_first == 0 || c_first >= c {
        return Err(RirError::shape(format!(
            "split_channels: cannot take {c_first} of {c} channels"
        )));
    }
    let c_rest = c - c_first;
    let mut a = Tensor::zeros(&[n, c_first, h, w]);
    let mut b = Tensor::zeros(&[n, c_rest, h, w]);
    let plane = h * w;
    for i in 0..n {
        let src = &x.data()[i * c * plane..(i + 1) * c * plane];
        a.data_mut()[i * c_first * plane..(i + 1) * c_first * plane]
            .copy_from_slice(&src[..c_first * plane]);
        b.data_mut()[i * c_rest * plane..(i + 1) * c_rest * plane]
            .copy_from_slice(&src[c_first * plane..]);
    }
    Ok((a, b))
}
