use crate::error::{Result, RirError};
use crate::ops::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization state. Test-time statistics are an
/// exponential moving average of the training batch statistics:
/// running <- (1 - momentum) * running + momentum * batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache<T> {
    /// Normalized activations, kept for the gamma gradient.
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

pub const BN_DEFAULT_EPS: f64 = 1e-5;
pub const BN_DEFAULT_MOMENTUM: f64 = 0.1;

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self::with_params(channels, BN_DEFAULT_EPS, BN_DEFAULT_MOMENTUM)
    }

    pub fn with_params(channels: usize, eps: f64, momentum: f64) -> Self {
        assert!(eps > 0.0, "bn eps must be positive");
        assert!((0.0..1.0).contains(&momentum) && momentum > 0.0, "bn momentum must be in (0,1)");
        BatchNorm {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(RirError::shape(format!(
                "batchnorm: input has {c} channels, state has {}",
                self.channels()
            )));
        }
        let m = n * h * w;
        let plane = h * w;
        let eps = T::from_f64(self.eps);

        let (mean, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(RirError::config(
                        "batchnorm train mode needs at least 2 values per channel".to_string(),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut sum = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &x.data()[base..base + plane] {
                            sum += v;
                        }
                    }
                    let mu = sum / T::from_f64(m as f64);
                    let mut acc = T::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        for &v in &x.data()[base..base + plane] {
                            let d = v - mu;
                            acc += d * d;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = acc / T::from_f64(m as f64);
                }
                // EMA update with the just-computed batch statistics.
                let mom = T::from_f64(self.momentum);
                let keep = T::one() - mom;
                for ci in 0..c {
                    let rm = self.running_mean.data_mut();
                    rm[ci] = keep * rm[ci] + mom * mean[ci];
                    let rv = self.running_var.data_mut();
                    rv[ci] = keep * rv[ci] + mom * var[ci];
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(&[n, c, h, w]);
        let mut y = Tensor::zeros(&[n, c, h, w]);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (mu, istd) = (mean[ci], inv_std[ci]);
                let (g, b) = (self.gamma.data()[ci], self.beta.data()[ci]);
                let src = &x.data()[base..base + plane];
                let xh_dst = &mut xhat.data_mut()[base..base + plane];
                for (xh, &xv) in xh_dst.iter_mut().zip(src) {
                    *xh = (xv - mu) * istd;
                }
                let y_dst = &mut y.data_mut()[base..base + plane];
                for (yv, &xv) in y_dst.iter_mut().zip(&x.data()[base..base + plane]) {
                    *yv = g * (xv - mu) * istd + b;
                }
            }
        }
        Ok((y, BnCache { xhat, inv_std, mode }))
    }

    /// Returns (grad_x, grad_gamma, grad_beta).
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        grad_y: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (n, c, h, w) = grad_y.dims4()?;
        if c != self.channels() {
            return Err(RirError::shape("batchnorm backward channel mismatch".to_string()));
        }
        let m = n * h * w;
        let plane = h * w;
        let mut grad_gamma = Tensor::zeros(&[c]);
        let mut grad_beta = Tensor::zeros(&[c]);
        let mut grad_x = Tensor::zeros(&[n, c, h, w]);

        for ci in 0..c {
            let mut sum_gy = T::zero();
            let mut sum_gy_xhat = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                let gy_s = &grad_y.data()[base..base + plane];
                let xh_s = &cache.xhat.data()[base..base + plane];
                for (&gy, &xh) in gy_s.iter().zip(xh_s) {
                    sum_gy += gy;
                    sum_gy_xhat += gy * xh;
                }
            }
            grad_beta.data_mut()[ci] = sum_gy;
            grad_gamma.data_mut()[ci] = sum_gy_xhat;

            let g = self.gamma.data()[ci];
            let istd = cache.inv_std[ci];
            match cache.mode {
                Mode::Train => {
                    // dx = gamma*istd/m * (m*gy - sum(gy) - xhat*sum(gy*xhat))
                    let mf = T::from_f64(m as f64);
                    let k = g * istd / mf;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        let dst = &mut grad_x.data_mut()[base..base + plane];
                        let gy_s = &grad_y.data()[base..base + plane];
                        let xh_s = &cache.xhat.data()[base..base + plane];
                        for ((d, &gy), &xh) in dst.iter_mut().zip(gy_s).zip(xh_s) {
                            *d = k * (mf * gy - sum_gy - xh * sum_gy_xhat);
                        }
                    }
                }
                Mode::Eval => {
                    let k = g * istd;
                    for ni in 0..n {
                        let base = (ni * c + ci) * plane;
                        let dst = &mut grad_x.data_mut()[base..base + plane];
                        let gy_s = &grad_y.data()[base..base + plane];
                        for (d, &gy) in dst.iter_mut().zip(gy_s) {
                            *d = k * gy;
                        }
                    }
                }
            }
        }
        Ok((grad_x, grad_gamma, grad_beta))
    }
}
