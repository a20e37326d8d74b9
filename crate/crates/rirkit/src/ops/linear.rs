use crate::error::{Result, RirError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// y[n,k] = sum_c x[n,c] * w[k,c] + b[k]
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = x.dims2()?;
    let (k, wc) = w.dims2()?;
    if wc != c || b.len() != k {
        return Err(RirError::shape(format!(
            "linear: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor::zeros(&[n, k]);
    unsafe {
        T::gemm(
            n,
            c,
            k,
            T::one(),
            x.data().as_ptr(),
            c as isize,
            1,
            w.data().as_ptr(),
            1,
            c as isize,
            T::zero(),
            y.data_mut().as_mut_ptr(),
            k as isize,
            1,
        );
    }
    for ni in 0..n {
        for ki in 0..k {
            *y.at2_mut(ni, ki) += b.data()[ki];
        }
    }
    Ok(y)
}

/// Returns (grad_x, grad_w, grad_b).
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c) = x.dims2()?;
    let (k, _) = w.dims2()?;
    let mut gx = Tensor::zeros(&[n, c]);
    let mut gw = Tensor::zeros(&[k, c]);
    let mut gb = Tensor::zeros(&[k]);
    unsafe {
        // gx[n,c] = gy[n,k] * w[k,c]
        T::gemm(
            n,
            k,
            c,
            T::one(),
            grad_y.data().as_ptr(),
            k as isize,
            1,
            w.data().as_ptr(),
            c as isize,
            1,
            T::zero(),
            gx.data_mut().as_mut_ptr(),
            c as isize,
            1,
        );
        // gw[k,c] = gy^T[k,n] * x[n,c]
        T::gemm(
            k,
            n,
            c,
            T::one(),
            grad_y.data().as_ptr(),
            1,
            k as isize,
            x.data().as_ptr(),
            c as isize,
            1,
            T::zero(),
            gw.data_mut().as_mut_ptr(),
            c as isize,
            1,
        );
    }
    for ni in 0..n {
        for ki in 0..k {
            gb.data_mut()[ki] += grad_y.at2(ni, ki);
        }
    }
    Ok((gx, gw, gb))
}
