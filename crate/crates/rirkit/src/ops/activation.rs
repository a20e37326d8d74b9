use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks the upstream gradient wherever the forward input was <= 0. Accepts
/// the forward *output*, whose positive entries coincide with the input's.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(out.shape(), grad_out.shape());
    let mut g = grad_out.clone();
    for (gv, &ov) in g.data_mut().iter_mut().zip(out.data()) {
        if ov <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn all_negative_goes_to_zero() {
        let x = Tensor::filled(&[2, 2], -3.5f64);
        assert!(relu(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_masks_nonpositive() {
        let x = Tensor::from_vec(&[4], vec![-1.0f64, 0.0, 0.5, 2.0]).unwrap();
        let out = relu(&x);
        let g = Tensor::filled(&[4], 1.0f64);
        let gx = relu_backward(&out, &g);
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        // Avoid the kink: keep |x| > 1e-3 so finite differences are valid.
        let data: Vec<f64> = (0..64)
            .map(|_| {
                let v: f64 = rng.random_range(1e-3..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::from_vec(&[64], data).unwrap();
        let out = relu(&x);
        let cot = Tensor::from_vec(&[64], (0..64).map(|i| 0.1 * i as f64).collect()).unwrap();
        let gx = relu_backward(&out, &cot);

        let h = 1e-5;
        for i in 0..64 {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fp = relu(&xp).dot(&cot);
            let fm = relu(&xm).dot(&cot);
            let fd = (fp - fm) / (2.0 * h);
            let got = gx.data()[i];
            let denom = fd.abs().max(1e-8);
            assert!((fd - got).abs() / denom <= 1e-6, "i={i} fd={fd} got={got}");
        }
    }
}
