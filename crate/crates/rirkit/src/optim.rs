//! Optimizers (SGD with momentum, Nesterov, Adam, RMSProp), L2 weight decay
//! with partial-identity centering, and the learning-rate schedule.
//!
//! Plain L2 decay pulls every weight toward zero, which would pull a fused
//! kernel's embedded identity taps away from 1 and break the equivalence
//! with the unfused form. Decay is therefore applied to (W - I) on masked
//! kernels: the identity is the decay fixed point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RirError};
use crate::init::IdentityMask;
use crate::model::{Gradients, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Sgdm,
    Nesterov,
    Adam,
    Rmsprop,
}

impl std::fmt::Display for OptKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            OptKind::Sgdm => "sgdm",
            OptKind::Nesterov => "nesterov",
            OptKind::Adam => "adam",
            OptKind::Rmsprop => "rmsprop",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for OptKind {
    type Err = RirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgdm" => Ok(OptKind::Sgdm),
            "nesterov" => Ok(OptKind::Nesterov),
            "adam" => Ok(OptKind::Adam),
            "rmsprop" => Ok(OptKind::Rmsprop),
            other => Err(RirError::Lookup(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub kind: OptKind,
    pub base_lr: f64,
    pub momentum: f64,
    pub l2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    /// BN affine parameters and biases are skipped by decay unless set.
    pub decay_bn_and_bias: bool,
    /// Center decay of masked (fused) kernels on the partial identity.
    /// Disabling this is a negative control: fused and unfused twins then
    /// drift apart under decay.
    pub identity_centering: bool,
}

impl OptConfig {
    pub fn new(kind: OptKind) -> Self {
        OptConfig {
            kind,
            base_lr: 0.1,
            momentum: 0.9,
            l2: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rms_decay: 0.9,
            rms_eps: 1e-8,
            decay_bn_and_bias: false,
            identity_centering: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(RirError::config("base_lr must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(RirError::config("momentum must be in [0, 1)".to_string()));
        }
        if self.l2 < 0.0 {
            return Err(RirError::config("l2 must be non-negative".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Slot<T> {
    Velocity(Tensor<T>),
    Moments { m1: Tensor<T>, m2: Tensor<T> },
    SquareAvg(Tensor<T>),
}

/// Per-parameter optimizer buffers plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptState<T> {
    step: u64,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new() -> Self {
        OptState { step: 0, slots: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// grad + l2 * (param - center), where center is the partial identity for
/// masked kernels and zero otherwise. Leaves grad untouched at l2 = 0.
pub fn decay_gradient<T: Scalar>(
    param: &Tensor<T>,
    grad: &Tensor<T>,
    l2: f64,
    mask: Option<&IdentityMask>,
) -> Result<Tensor<T>> {
    if param.shape() != grad.shape() {
        return Err(RirError::shape(format!(
            "decay_gradient: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    if let Some(m) = mask {
        if let Some(&bad) = m.taps().iter().find(|&&i| i >= param.len()) {
            return Err(RirError::shape(format!(
                "identity mask tap {bad} outside parameter of {} values",
                param.len()
            )));
        }
    }
    if l2 == 0.0 {
        return Ok(grad.clone());
    }
    let l2t = T::from_f64(l2);
    let mut out = grad.clone();
    out.add_scaled(l2t, param)?;
    if let Some(m) = mask {
        for &i in m.taps() {
            out.data_mut()[i] -= l2t;
        }
    }
    Ok(out)
}

/// Piecewise-constant schedule: the rate drops by 10x after two boundary
/// epochs. An 82-epoch run uses the reference boundaries 42 and 62; other
/// lengths place the drops at 60% and 76% of the total. Epochs are 1-indexed
/// and "after epoch b" means the change takes effect at epoch b + 1.
pub fn lr_at(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    let (b1, b2) = schedule_boundaries(total_epochs);
    if epoch <= b1 {
        base_lr
    } else if epoch <= b2 {
        0.1 * base_lr
    } else {
        0.01 * base_lr
    }
}

pub fn schedule_boundaries(total_epochs: usize) -> (usize, usize) {
    if total_epochs == 82 {
        (42, 62)
    } else {
        let b1 = (0.60 * total_epochs as f64).round() as usize;
        let b2 = (0.76 * total_epochs as f64).round() as usize;
        (b1, b2.max(b1))
    }
}

/// One optimizer step over every registered parameter. Gradients must cover
/// the registry exactly; non-finite gradients abort before any mutation.
pub fn step<T: Scalar>(
    model: &mut Model<T>,
    grads: &Gradients<T>,
    state: &mut OptState<T>,
    cfg: &OptConfig,
    lr: f64,
) -> Result<()> {
    cfg.validate()?;
    if !grads.all_finite() {
        return Err(RirError::Numeric(
            "non-finite gradient; training halted before the update".to_string(),
        ));
    }
    state.step += 1;
    let t = state.step;

    let mut missing: Option<String> = None;
    let mut failure: Option<RirError> = None;
    let slots = &mut state.slots;
    model.visit_params_mut(&mut |meta, param| {
        if missing.is_some() || failure.is_some() {
            return;
        }
        let Some(grad) = grads.get(&meta.name) else {
            missing = Some(meta.name.clone());
            return;
        };
        let decayed;
        let g = if cfg.l2 > 0.0 && (meta.decay || cfg.decay_bn_and_bias) {
            let mask = if cfg.identity_centering { meta.mask.as_ref() } else { None };
            match decay_gradient(param, grad, cfg.l2, mask) {
                Ok(d) => {
                    decayed = d;
                    &decayed
                }
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            }
        } else {
            grad
        };
        update_param(cfg, t, lr, &meta.name, param, g, slots);
    });
    if let Some(name) = missing {
        return Err(RirError::config(format!("no gradient for parameter '{name}'")));
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(())
}

fn update_param<T: Scalar>(
    cfg: &OptConfig,
    t: u64,
    lr: f64,
    name: &str,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    slots: &mut BTreeMap<String, Slot<T>>,
) {
    let lr = T::from_f64(lr);
    match cfg.kind {
        OptKind::Sgdm => {
            let m = T::from_f64(cfg.momentum);
            let slot = slots
                .entry(name.to_string())
                .or_insert_with(|| Slot::Velocity(Tensor::zeros(param.shape())));
            let Slot::Velocity(v) = slot else { unreachable!() };
            for ((vv, pv), gv) in v.data_mut().iter_mut().zip(param.data_mut()).zip(grad.data()) {
                *vv = m * *vv - lr * *gv;
                *pv += *vv;
            }
        }
        OptKind::Nesterov => {
            // v <- m v - lr g; p <- p + m v - lr g (lookahead applied at p).
            let m = T::from_f64(cfg.momentum);
            let slot = slots
                .entry(name.to_string())
                .or_insert_with(|| Slot::Velocity(Tensor::zeros(param.shape())));
            let Slot::Velocity(v) = slot else { unreachable!() };
            for ((vv, pv), gv) in v.data_mut().iter_mut().zip(param.data_mut()).zip(grad.data()) {
                *vv = m * *vv - lr * *gv;
                *pv += m * *vv - lr * *gv;
            }
        }
        OptKind::Adam => {
            let b1 = T::from_f64(cfg.adam_beta1);
            let b2 = T::from_f64(cfg.adam_beta2);
            let eps = T::from_f64(cfg.adam_eps);
            let c1 = T::one() - T::from_f64(cfg.adam_beta1.powi(t as i32));
            let c2 = T::one() - T::from_f64(cfg.adam_beta2.powi(t as i32));
            let slot = slots.entry(name.to_string()).or_insert_with(|| Slot::Moments {
                m1: Tensor::zeros(param.shape()),
                m2: Tensor::zeros(param.shape()),
            });
            let Slot::Moments { m1, m2 } = slot else { unreachable!() };
            for (((m1v, m2v), pv), gv) in m1
                .data_mut()
                .iter_mut()
                .zip(m2.data_mut())
                .zip(param.data_mut())
                .zip(grad.data())
            {
                *m1v = b1 * *m1v + (T::one() - b1) * *gv;
                *m2v = b2 * *m2v + (T::one() - b2) * *gv * *gv;
                let mhat = *m1v / c1;
                let vhat = *m2v / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        OptKind::Rmsprop => {
            let rho = T::from_f64(cfg.rms_decay);
            let eps = T::from_f64(cfg.rms_eps);
            let slot = slots
                .entry(name.to_string())
                .or_insert_with(|| Slot::SquareAvg(Tensor::zeros(param.shape())));
            let Slot::SquareAvg(s) = slot else { unreachable!() };
            for ((sv, pv), gv) in s.data_mut().iter_mut().zip(param.data_mut()).zip(grad.data()) {
                *sv = rho * *sv + (T::one() - rho) * *gv * *gv;
                *pv -= lr * *gv / (sv.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{fuse_kernels, InitKind, KernelKind, StreamSplit};
    use crate::model::{
        build_network_with_layout, HeadKind, Layout, ModelKind, NetSpec, StageSpec,
    };
    use crate::ops::Mode;
    use crate::streams::BlockLinear;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_the_decay_fixed_point() {
        let split = StreamSplit::equal(2);
        let param = crate::init::partial_identity::<f64>(split, KernelKind::Conv(3)).unwrap();
        let mask = IdentityMask::for_kernel(split, KernelKind::Conv(3)).unwrap();
        let grad = Tensor::zeros(param.shape());
        let out = decay_gradient(&param, &grad, 1e-4, Some(&mask)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_decay_without_mask() {
        let param = Tensor::from_vec(&[2, 2], vec![1.0f64, -2.0, 0.5, 0.0]).unwrap();
        let grad = Tensor::from_vec(&[2, 2], vec![0.1, 0.1, 0.1, 0.1]).unwrap();
        let out = decay_gradient(&param, &grad, 0.01, None).unwrap();
        assert!((out.data()[0] - 0.11).abs() < 1e-12);
        assert!((out.data()[1] - 0.08).abs() < 1e-12);
        // l2 = 0 leaves the gradient untouched.
        let same = decay_gradient(&param, &grad, 0.0, None).unwrap();
        assert_eq!(same, grad);
    }

    /// One-parameter model stub for scalar hand-iteration checks.
    fn scalar_model() -> Model<f64> {
        let spec = NetSpec {
            name: "one".to_string(),
            input_channels: 3,
            stem_filters: 2,
            stages: vec![StageSpec { blocks: 1, layers_per_block: 1, filters: 2, first_stride: 1 }],
            head: HeadKind::PoolFc,
            classes: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_network_with_layout(&spec, ModelKind::Cnn, InitKind::Msr, &mut rng, Layout::Fused)
            .unwrap()
    }

    fn uniform_grads(model: &Model<f64>, value: f64) -> Gradients<f64> {
        let mut g = Gradients::new();
        model.visit_params(&mut |m, t| g.insert(m.name, Tensor::filled(t.shape(), value)));
        g
    }

    #[test]
    fn sgdm_follows_hand_iteration() {
        // m = 0.9, lr = 0.1, g = 1: the parameter drops by 0.1, 0.19, 0.271.
        let mut model = scalar_model();
        let start = model.get_param("stem.weight").unwrap().data()[0];
        let grads = uniform_grads(&model, 1.0);
        let mut cfg = OptConfig::new(OptKind::Sgdm);
        cfg.l2 = 0.0;
        let mut state = OptState::new();
        let mut prev = start;
        for want in [0.1, 0.19, 0.271] {
            step(&mut model, &grads, &mut state, &cfg, 0.1).unwrap();
            let now = model.get_param("stem.weight").unwrap().data()[0];
            assert!((prev - now - want).abs() <= 1e-12, "drop {} want {want}", prev - now);
            prev = now;
        }
    }

    #[test]
    fn nesterov_follows_hand_iteration() {
        let mut model = scalar_model();
        let start = model.get_param("stem.weight").unwrap().data()[0];
        let grads = uniform_grads(&model, 1.0);
        let mut cfg = OptConfig::new(OptKind::Nesterov);
        cfg.l2 = 0.0;
        let mut state = OptState::new();
        // Hand iteration of v <- m v - lr g; p += m v - lr g.
        let (m, lr, g) = (0.9f64, 0.1f64, 1.0f64);
        let mut v = 0.0;
        let mut p_want = start;
        for _ in 0..4 {
            step(&mut model, &grads, &mut state, &cfg, lr).unwrap();
            v = m * v - lr * g;
            p_want += m * v - lr * g;
            let got = model.get_param("stem.weight").unwrap().data()[0];
            assert!((got - p_want).abs() <= 1e-12);
        }
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut model = scalar_model();
        let start = model.get_param("stem.weight").unwrap().data()[0];
        let grads = uniform_grads(&model, 1.0);
        let mut cfg = OptConfig::new(OptKind::Adam);
        cfg.l2 = 0.0;
        let mut state = OptState::new();
        step(&mut model, &grads, &mut state, &cfg, 0.001).unwrap();
        // With g = 1: mhat = 1, vhat = 1 regardless of betas, so
        // delta = -lr / (1 + eps).
        let want = 0.001 / (1.0 + cfg.adam_eps);
        let got = start - model.get_param("stem.weight").unwrap().data()[0];
        assert!((got - want).abs() <= 1e-15, "got {got} want {want}");
    }

    #[test]
    fn rmsprop_first_step_matches_closed_form() {
        let mut model = scalar_model();
        let start = model.get_param("stem.weight").unwrap().data()[0];
        let grads = uniform_grads(&model, 2.0);
        let mut cfg = OptConfig::new(OptKind::Rmsprop);
        cfg.l2 = 0.0;
        let mut state = OptState::new();
        step(&mut model, &grads, &mut state, &cfg, 0.01).unwrap();
        // s = (1 - rho) g^2; delta = lr g / (sqrt(s) + eps)
        let s = (1.0 - cfg.rms_decay) * 4.0;
        let want = 0.01 * 2.0 / (s.sqrt() + cfg.rms_eps);
        let got = start - model.get_param("stem.weight").unwrap().data()[0];
        assert!((got - want).abs() <= 1e-15);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        for kind in [OptKind::Sgdm, OptKind::Nesterov, OptKind::Adam, OptKind::Rmsprop] {
            let mut model = scalar_model();
            let before = model.get_param("stem.weight").unwrap();
            let grads = uniform_grads(&model, 0.0);
            let mut cfg = OptConfig::new(kind);
            cfg.l2 = 0.0;
            let mut state = OptState::new();
            step(&mut model, &grads, &mut state, &cfg, 0.1).unwrap();
            assert_eq!(model.get_param("stem.weight").unwrap(), before, "{kind}");
        }
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut model = scalar_model();
        let mut grads = uniform_grads(&model, 0.0);
        let mut bad = Gradients::new();
        for (name, g) in grads.iter() {
            let mut t = g.clone();
            if name == "stem.weight" {
                t.data_mut()[0] = f64::NAN;
            }
            bad.insert(name.clone(), t);
        }
        grads = bad;
        let cfg = OptConfig::new(OptKind::Sgdm);
        let mut state = OptState::new();
        assert!(matches!(
            step(&mut model, &grads, &mut state, &cfg, 0.1),
            Err(RirError::Numeric(_))
        ));
    }

    #[test]
    fn updates_are_per_parameter_independent() {
        // The same per-name math applied one parameter at a time reproduces
        // the registry-order step, so ordering cannot matter.
        let mut model = scalar_model();
        let mut solo = model.clone();
        let grads = uniform_grads(&model, 0.5);
        let mut cfg = OptConfig::new(OptKind::Adam);
        cfg.l2 = 1e-2;
        let mut state = OptState::new();
        step(&mut model, &grads, &mut state, &cfg, 0.05).unwrap();

        let metas = solo.param_metas();
        let mut names: Vec<String> = metas.iter().map(|m| m.name.clone()).collect();
        names.reverse();
        let mut slots = BTreeMap::new();
        for name in names {
            let meta = metas.iter().find(|m| m.name == name).unwrap().clone();
            solo.visit_params_mut(&mut |pm, param| {
                if pm.name == meta.name {
                    let g0 = grads.get(&pm.name).unwrap();
                    let g = if pm.decay {
                        decay_gradient(param, g0, cfg.l2, pm.mask.as_ref()).unwrap()
                    } else {
                        g0.clone()
                    };
                    update_param(&cfg, 1, 0.05, &pm.name, param, &g, &mut slots);
                }
            });
        }
        model.visit_params(&mut |m, t| {
            let other = solo.get_param(&m.name).unwrap();
            assert_eq!(*t, other, "{}", m.name);
        });
    }

    #[test]
    fn lr_schedule_reference_and_scaled() {
        let base = 0.1;
        // Full-length run: drops after epochs 42 and 62.
        assert_eq!(lr_at(1, 82, base), base);
        assert_eq!(lr_at(42, 82, base), base);
        assert_eq!(lr_at(43, 82, base), 0.1 * base);
        assert_eq!(lr_at(62, 82, base), 0.1 * base);
        assert_eq!(lr_at(63, 82, base), 0.01 * base);
        assert_eq!(lr_at(82, 82, base), 0.01 * base);
        // Scaled runs: drops at 60% and 76% of the total.
        assert_eq!(schedule_boundaries(50), (30, 38));
        assert_eq!(lr_at(30, 50, base), base);
        assert_eq!(lr_at(31, 50, base), 0.1 * base);
        assert_eq!(lr_at(38, 50, base), 0.1 * base);
        assert_eq!(lr_at(39, 50, base), 0.01 * base);
        assert_eq!(schedule_boundaries(5), (3, 4));
        assert_eq!(lr_at(3, 5, base), base);
        assert_eq!(lr_at(4, 5, base), 0.1 * base);
        assert_eq!(lr_at(5, 5, base), 0.01 * base);
    }

    fn twin_models(seed: u64) -> (Model<f32>, Model<f32>) {
        let spec = NetSpec {
            name: "twin".to_string(),
            input_channels: 3,
            stem_filters: 8,
            stages: vec![StageSpec { blocks: 1, layers_per_block: 2, filters: 8, first_stride: 1 }],
            head: HeadKind::PoolFc,
            classes: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fused =
            build_network_with_layout(&spec, ModelKind::Rir, InitKind::Msr, &mut rng, Layout::Fused)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unfused = build_network_with_layout(
            &spec,
            ModelKind::Rir,
            InitKind::Msr,
            &mut rng,
            Layout::Unfused,
        )
        .unwrap();
        (fused, unfused)
    }

    /// Max deviation between the fused kernels and the refused unfused ones.
    fn twin_kernel_deviation(fused: &Model<f32>, unfused: &Model<f32>) -> f64 {
        let mut dev = 0.0f64;
        for (fb, ub) in fused.blocks.iter().zip(&unfused.blocks) {
            for (fl, ul) in fb.layers.iter().zip(&ub.layers) {
                let (BlockLinear::Fused(fc), BlockLinear::DualStream(dsc)) = (&fl.linear, &ul.linear)
                else {
                    panic!("twin layout mismatch")
                };
                let refused = fuse_kernels(&dsc.kernels).unwrap();
                dev = dev.max(fc.weight.max_abs_diff(&refused));
            }
        }
        dev
    }

    fn run_twin_steps(cfg: &OptConfig, steps: usize, seed: u64) -> f64 {
        let (mut fused, mut unfused) = twin_models(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let batch = Tensor::from_vec(
            &[4, 3, 8, 8],
            (0..4 * 3 * 64).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<f32>>(),
        )
        .unwrap();
        let labels = [0usize, 1, 2, 3];
        let mut state_f = OptState::new();
        let mut state_u = OptState::new();
        let mut dev = 0.0f64;
        for _ in 0..steps {
            let (_, gf) = fused.loss_and_grads(&batch, &labels, Mode::Train).unwrap();
            let (_, gu) = unfused.loss_and_grads(&batch, &labels, Mode::Train).unwrap();
            step(&mut fused, &gf, &mut state_f, cfg, cfg.base_lr).unwrap();
            step(&mut unfused, &gu, &mut state_u, cfg, cfg.base_lr).unwrap();
            dev = dev.max(twin_kernel_deviation(&fused, &unfused));
        }
        dev
    }

    #[test]
    fn centered_decay_keeps_twin_trajectories_together() {
        let mut cfg = OptConfig::new(OptKind::Sgdm);
        cfg.base_lr = 0.1;
        cfg.l2 = 1e-4;
        let dev = run_twin_steps(&cfg, 100, 42);
        assert!(dev <= 1e-4, "twin trajectories drifted by {dev}");
    }

    #[test]
    fn uncentered_decay_makes_twins_diverge() {
        let mut cfg = OptConfig::new(OptKind::Sgdm);
        cfg.base_lr = 0.1;
        cfg.l2 = 1e-4;
        cfg.identity_centering = false;
        let dev = run_twin_steps(&cfg, 100, 42);
        assert!(dev > 1e-3, "expected visible divergence, got {dev}");
    }

    #[test]
    fn twins_stay_equivalent_for_every_optimizer_without_decay() {
        for kind in [OptKind::Sgdm, OptKind::Nesterov, OptKind::Adam, OptKind::Rmsprop] {
            let mut cfg = OptConfig::new(kind);
            cfg.base_lr = match kind {
                OptKind::Adam | OptKind::Rmsprop => 0.001,
                _ => 0.1,
            };
            cfg.l2 = 0.0;
            let dev = run_twin_steps(&cfg, 10, 7);
            assert!(dev <= 1e-4, "{kind}: dev {dev}");
        }
    }
}
