use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// [N, C, H, W] -> [N, C], averaging over the spatial axes.
pub fn global_mean_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::one() / T::from_f64(plane as f64);
    let mut out = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut sum = T::zero();
            for &v in &x.data()[base..base + plane] {
                sum += v;
            }
            *out.at2_mut(ni, ci) = sum * inv;
        }
    }
    Ok(out)
}

pub fn global_mean_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (n, c) = grad_out.dims2()?;
    let plane = h * w;
    let inv = T::one() / T::from_f64(plane as f64);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_out.at2(ni, ci) * inv;
            let base = (ni * c + ci) * plane;
            for v in &mut gx.data_mut()[base..base + plane] {
                *v = g;
            }
        }
    }
    Ok(gx)
}
