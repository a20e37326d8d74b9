//! Runtime verification of the algebraic claims: fused/unfused equivalence,
//! the constructive two-layer-block fixture, identity-centered decay, and
//! finite-difference gradient checks. Used by the `verify` subcommand and by
//! the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::init::{fuse_kernels, InitKind, StreamKernels, StreamSplit};
use crate::model::{
    build_network_with_layout, Gradients, HeadKind, Layout, Model, ModelKind, NetSpec, StageSpec,
};
use crate::ops::{
    conv2d, conv2d_backward, global_mean_pool, global_mean_pool_backward, relu, relu_backward,
    softmax_cross_entropy, BatchNorm, Mode,
};
use crate::optim::{step, OptConfig, OptKind, OptState};
use crate::scalar::Scalar;
use crate::streams::{
    plain_block_emulation, BlockLinear, DualStreamConv, FusedConv, FusedLayer, GeneralizedLayer,
    Shortcut, StreamPair,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub max_dev: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckReport {
    fn new(name: &str, max_dev: f64, tolerance: f64, detail: String) -> CheckReport {
        CheckReport { name: name.to_string(), passed: max_dev <= tolerance, max_dev, tolerance, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<38} max dev {:.3e} (tol {:.1e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_dev,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub equivalence_configs: usize,
    pub seed: u64,
    /// Perturbs one fused kernel before the equivalence check; the suite
    /// must then fail (negative control for the harness itself).
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { equivalence_configs: 200, seed: 7, inject_fault: false }
    }
}

fn randn<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect())
        .expect("shape")
}

fn random_kernels<T: Scalar>(
    split: StreamSplit,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> StreamKernels<T> {
    StreamKernels {
        r_to_r: randn(&[split.residual, split.residual, k, k], rng),
        t_to_r: randn(&[split.residual, split.transient, k, k], rng),
        r_to_t: randn(&[split.transient, split.residual, k, k], rng),
        t_to_t: randn(&[split.transient, split.transient, k, k], rng),
    }
}

/// Forward agreement between one fused layer and its unfused twin over
/// random configurations (identity shortcut). Returns the max deviation.
fn equivalence_forward<T: Scalar>(configs: usize, seed: u64, fault: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [1usize, 2, 4, 8];
    let kernel_extents = [1usize, 3];
    let spatial = [4usize, 8];
    let mut max_dev = 0.0f64;
    for i in 0..configs {
        let split = StreamSplit {
            residual: sizes[rng.random_range(0..sizes.len())],
            transient: sizes[rng.random_range(0..sizes.len())],
        };
        let k = kernel_extents[rng.random_range(0..kernel_extents.len())];
        let hw = spatial[rng.random_range(0..spatial.len())];
        let kernels = random_kernels::<T>(split, k, &mut rng);
        let mut fused = FusedLayer {
            conv: FusedConv::from_kernels(&kernels, 1, None)?,
            bn: Some(BatchNorm::new(split.total())),
        };
        if fault && i == 0 {
            fused.conv.weight.data_mut()[0] += T::from_f64(1e-2);
        }
        let mut unfused = GeneralizedLayer {
            conv: DualStreamConv { kernels, stride: 1, shortcut: Shortcut::Identity },
            bn: Some(BatchNorm::new(split.total())),
        };
        let pair = StreamPair::new(
            randn::<T>(&[2, split.residual, hw, hw], &mut rng),
            randn::<T>(&[2, split.transient, hw, hw], &mut rng),
        )?;
        let x = pair.concat()?;
        let got = fused.forward(&x, Mode::Train)?;
        let want = unfused.forward(&pair, Mode::Train)?.concat()?;
        max_dev = max_dev.max(got.max_abs_diff(&want));
    }
    Ok(max_dev)
}

/// Input-gradient agreement between the fused layer and its unfused twin,
/// as a global relative deviation.
fn equivalence_input_grads<T: Scalar>(configs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let sizes = [1usize, 2, 4, 8];
    let mut max_rel = 0.0f64;
    for _ in 0..configs {
        let split = StreamSplit {
            residual: sizes[rng.random_range(0..sizes.len())],
            transient: sizes[rng.random_range(0..sizes.len())],
        };
        let kernels = random_kernels::<T>(split, 3, &mut rng);
        let mut fused = FusedLayer {
            conv: FusedConv::from_kernels(&kernels, 1, None)?,
            bn: Some(BatchNorm::new(split.total())),
        };
        let mut unfused = GeneralizedLayer {
            conv: DualStreamConv { kernels, stride: 1, shortcut: Shortcut::Identity },
            bn: Some(BatchNorm::new(split.total())),
        };
        let pair = StreamPair::new(
            randn::<T>(&[2, split.residual, 6, 6], &mut rng),
            randn::<T>(&[2, split.transient, 6, 6], &mut rng),
        )?;
        let x = pair.concat()?;
        let (_, trace_f) = fused.forward_traced(&x, Mode::Train)?;
        let (_, trace_u) = unfused.forward_traced(&pair, Mode::Train)?;
        let cot = randn::<T>(&[2, split.total(), 6, 6], &mut rng);
        let cot_pair = StreamPair::from_concat(&cot, split)?;
        let (gin_f, _, _) = fused.backward(&x, &trace_f, &cot)?;
        let (gin_u, _, _) = unfused.backward(&pair, &trace_u, &cot_pair)?;
        let want = gin_u.concat()?;
        let rel = gin_f.max_abs_diff(&want) / want.max_abs().max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

pub fn equivalence_suite(opts: &VerifyOptions) -> Result<Vec<CheckReport>> {
    let n = opts.equivalence_configs;
    let f32_dev = equivalence_forward::<f32>(n, opts.seed, opts.inject_fault)?;
    let f64_dev = equivalence_forward::<f64>(n, opts.seed, opts.inject_fault)?;
    let grad_rel = equivalence_input_grads::<f32>(n.min(50), opts.seed)?;
    Ok(vec![
        CheckReport::new("fused/unfused forward (f32)", f32_dev, 1e-5, format!("{n} configs")),
        CheckReport::new("fused/unfused forward (f64)", f64_dev, 1e-12, format!("{n} configs")),
        CheckReport::new(
            "fused/unfused input gradients (f32)",
            grad_rel,
            1e-4,
            format!("{} configs", n.min(50)),
        ),
    ])
}

/// Two generalized layers with the prescribed zeroed connections against a
/// directly computed plain 2-layer residual block, on non-negative inputs.
pub fn emulation_check(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf16);
    let mut max_dev = 0.0f64;
    for _ in 0..trials {
        let (n_r, n_t) = (2usize, 3usize);
        let conv1 = randn::<f32>(&[n_t, n_r, 3, 3], &mut rng);
        let conv2 = randn::<f32>(&[n_r, n_t, 3, 3], &mut rng);
        let (mut l1, mut l2) = plain_block_emulation(&conv1, &conv2)?;
        let r = randn::<f32>(&[1, n_r, 6, 6], &mut rng).map(|v| v.abs());
        let t0 = Tensor::zeros(&[1, n_t, 6, 6]);
        let mid = l1.forward(&StreamPair::new(r.clone(), t0)?, Mode::Eval)?;
        let out = l2.forward(&mid, Mode::Eval)?;

        let h = relu(&conv2d(&r, &conv1, 1, 1)?);
        let mut pre = conv2d(&h, &conv2, 1, 1)?;
        pre.add_assign(&r)?;
        let want = relu(&pre);
        max_dev = max_dev.max(out.residual.max_abs_diff(&want));
        max_dev = max_dev.max(out.transient.max_abs());
    }
    Ok(CheckReport::new(
        "two-block emulation of plain residual block",
        max_dev,
        1e-6,
        format!("{trials} non-negative inputs"),
    ))
}

fn twin_models(seed: u64) -> Result<(Model<f32>, Model<f32>)> {
    let spec = NetSpec {
        name: "twin".to_string(),
        input_channels: 3,
        stem_filters: 8,
        stages: vec![StageSpec { blocks: 1, layers_per_block: 2, filters: 8, first_stride: 1 }],
        head: HeadKind::PoolFc,
        classes: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fused = build_network_with_layout(&spec, ModelKind::Rir, InitKind::Msr, &mut rng, Layout::Fused)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unfused =
        build_network_with_layout(&spec, ModelKind::Rir, InitKind::Msr, &mut rng, Layout::Unfused)?;
    Ok((fused, unfused))
}

fn twin_kernel_deviation(fused: &Model<f32>, unfused: &Model<f32>) -> f64 {
    let mut dev = 0.0f64;
    for (fb, ub) in fused.blocks.iter().zip(&unfused.blocks) {
        for (fl, ul) in fb.layers.iter().zip(&ub.layers) {
            if let (BlockLinear::Fused(fc), BlockLinear::DualStream(dsc)) = (&fl.linear, &ul.linear) {
                let refused = fuse_kernels(&dsc.kernels).expect("twin shapes");
                dev = dev.max(fc.weight.max_abs_diff(&refused));
            }
        }
    }
    dev
}

fn run_decay_twins(centering: bool, steps: usize, seed: u64) -> Result<f64> {
    let (mut fused, mut unfused) = twin_models(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let batch = randn::<f32>(&[4, 3, 8, 8], &mut rng);
    let labels = [0usize, 1, 2, 3];
    let mut cfg = OptConfig::new(OptKind::Sgdm);
    cfg.base_lr = 0.1;
    cfg.l2 = 1e-4;
    cfg.identity_centering = centering;
    let mut sf = OptState::new();
    let mut su = OptState::new();
    let mut dev = 0.0f64;
    for _ in 0..steps {
        let (_, gf) = fused.loss_and_grads(&batch, &labels, Mode::Train)?;
        let (_, gu) = unfused.loss_and_grads(&batch, &labels, Mode::Train)?;
        step(&mut fused, &gf, &mut sf, &cfg, cfg.base_lr)?;
        step(&mut unfused, &gu, &mut su, &cfg, cfg.base_lr)?;
        dev = dev.max(twin_kernel_deviation(&fused, &unfused));
    }
    Ok(dev)
}

/// Identity-centered decay keeps fused/unfused twin trajectories together;
/// disabling the centering must visibly split them (negative control).
pub fn decay_twin_checks(seed: u64, steps: usize) -> Result<Vec<CheckReport>> {
    let centered = run_decay_twins(true, steps, seed)?;
    let uncentered = run_decay_twins(false, steps, seed)?;
    let mut reports = vec![CheckReport::new(
        "identity-centered decay twin trajectories",
        centered,
        1e-4,
        format!("{steps} SGD+L2 steps"),
    )];
    let control = CheckReport {
        name: "uncentered decay diverges (negative control)".to_string(),
        passed: uncentered > 1e-3,
        max_dev: uncentered,
        tolerance: 1e-3,
        detail: "divergence must exceed tolerance".to_string(),
    };
    reports.push(control);
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checks
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;

/// Central-difference check of grad against the scalar function f at every
/// probed coordinate of `x`. Returns the max relative error.
fn fd_check(x: &Tensor<f64>, grad: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let mut max_rel = 0.0f64;
    let probes = x.len().min(24);
    for p in 0..probes {
        let idx = p * x.len() / probes;
        let mut xp = x.clone();
        xp.data_mut()[idx] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[idx] -= FD_STEP;
        let fd = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        let got = grad.data()[idx];
        let denom = fd.abs().max(got.abs()).max(1e-6);
        max_rel = max_rel.max((fd - got).abs() / denom);
    }
    max_rel
}

pub fn gradient_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9ad);
    let mut reports = Vec::new();

    // conv2d: >= 20 random shapes, gradients w.r.t. input and kernel.
    let mut conv_dev = 0.0f64;
    let mut shapes = 0;
    for _ in 0..20 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=3);
        let f = rng.random_range(1..=3);
        let hw = rng.random_range(3..=6);
        let k = [1usize, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2);
        let pad = k / 2;
        let x = randn::<f64>(&[n, c, hw, hw], &mut rng);
        let w = randn::<f64>(&[f, c, k, k], &mut rng);
        let out = conv2d(&x, &w, stride, pad)?;
        let cot = randn::<f64>(out.shape(), &mut rng);
        let (gx, gw) = conv2d_backward(&x, &w, stride, pad, &cot)?;
        conv_dev = conv_dev.max(fd_check(&x, &gx, |xx| {
            conv2d(xx, &w, stride, pad).unwrap().dot(&cot)
        }));
        conv_dev = conv_dev.max(fd_check(&w, &gw, |ww| {
            conv2d(&x, ww, stride, pad).unwrap().dot(&cot)
        }));
        shapes += 1;
    }
    reports.push(CheckReport::new(
        "conv2d backward vs finite differences",
        conv_dev,
        1e-6,
        format!("{shapes} shapes"),
    ));

    // batchnorm (train mode): gradients w.r.t. x, gamma, beta.
    let mut bn_dev = 0.0f64;
    for _ in 0..8 {
        let c = rng.random_range(1..=3);
        let n = rng.random_range(2..=3);
        let hw = rng.random_range(2..=4);
        let x = randn::<f64>(&[n, c, hw, hw], &mut rng);
        let gamma = randn::<f64>(&[c], &mut rng).map(|v| 1.0 + 0.3 * v);
        let beta = randn::<f64>(&[c], &mut rng);
        let make_bn = |g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut bn = BatchNorm::<f64>::new(c);
            bn.gamma = g.clone();
            bn.beta = b.clone();
            bn
        };
        let mut bn = make_bn(&gamma, &beta);
        let (out, cache) = bn.forward(&x, Mode::Train)?;
        let cot = randn::<f64>(out.shape(), &mut rng);
        let (gx, gg, gb) = bn.backward(&cache, &cot)?;
        bn_dev = bn_dev.max(fd_check(&x, &gx, |xx| {
            make_bn(&gamma, &beta).forward(xx, Mode::Train).unwrap().0.dot(&cot)
        }));
        bn_dev = bn_dev.max(fd_check(&gamma, &gg, |g| {
            make_bn(g, &beta).forward(&x, Mode::Train).unwrap().0.dot(&cot)
        }));
        bn_dev = bn_dev.max(fd_check(&beta, &gb, |b| {
            make_bn(&gamma, b).forward(&x, Mode::Train).unwrap().0.dot(&cot)
        }));
    }
    reports.push(CheckReport::new(
        "batchnorm backward vs finite differences",
        bn_dev,
        1e-6,
        "8 shapes, x/gamma/beta".to_string(),
    ));

    // relu, pooling, loss.
    let mut relu_dev = 0.0f64;
    for _ in 0..4 {
        let x = randn::<f64>(&[3, 17], &mut rng).map(|v| {
            // keep away from the kink
            if v.abs() < 1e-3 {
                v + 0.1
            } else {
                v
            }
        });
        let out = relu(&x);
        let cot = randn::<f64>(x.shape(), &mut rng);
        let gx = relu_backward(&out, &cot);
        relu_dev = relu_dev.max(fd_check(&x, &gx, |xx| relu(xx).dot(&cot)));
    }
    reports.push(CheckReport::new(
        "relu backward vs finite differences",
        relu_dev,
        1e-6,
        "4 tensors".to_string(),
    ));

    let mut pool_dev = 0.0f64;
    for _ in 0..4 {
        let x = randn::<f64>(&[2, 3, 4, 4], &mut rng);
        let out = global_mean_pool(&x)?;
        let cot = randn::<f64>(out.shape(), &mut rng);
        let gx = global_mean_pool_backward(&cot, 4, 4)?;
        pool_dev = pool_dev.max(fd_check(&x, &gx, |xx| {
            global_mean_pool(xx).unwrap().dot(&cot)
        }));
    }
    reports.push(CheckReport::new(
        "global mean pool backward vs finite differences",
        pool_dev,
        1e-6,
        "4 tensors".to_string(),
    ));

    let mut loss_dev = 0.0f64;
    for _ in 0..4 {
        let logits = randn::<f64>(&[3, 6], &mut rng);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..6)).collect();
        let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
        loss_dev = loss_dev.max(fd_check(&logits, &grad, |l| {
            softmax_cross_entropy(l, &labels).unwrap().0
        }));
    }
    reports.push(CheckReport::new(
        "softmax cross-entropy grad vs finite differences",
        loss_dev,
        1e-6,
        "4 batches".to_string(),
    ));

    // Whole-model spot check.
    let spec = NetSpec {
        name: "fd".to_string(),
        input_channels: 3,
        stem_filters: 4,
        stages: vec![
            StageSpec { blocks: 1, layers_per_block: 2, filters: 4, first_stride: 1 },
            StageSpec { blocks: 1, layers_per_block: 2, filters: 8, first_stride: 2 },
        ],
        head: HeadKind::PoolFc,
        classes: 4,
    };
    let mut build_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model: Model<f64> =
        build_network_with_layout(&spec, ModelKind::Rir, InitKind::Msr, &mut build_rng, Layout::Fused)?;
    let batch = randn::<f64>(&[2, 3, 8, 8], &mut rng);
    let labels = [1usize, 3];
    let (_, grads): (f64, Gradients<f64>) = model.loss_and_grads(&batch, &labels, Mode::Train)?;
    let mut model_dev = 0.0f64;
    let metas = model.param_metas();
    for (i, meta) in metas.iter().enumerate().filter(|(i, _)| i % 2 == 0).take(10) {
        let g = grads.get(&meta.name).expect("registered grad");
        let idx = (i * 11) % g.len();
        let probe = |delta: f64| -> f64 {
            let mut m = model.clone();
            m.visit_params_mut(&mut |pm, t| {
                if pm.name == meta.name {
                    t.data_mut()[idx] += delta;
                }
            });
            m.loss_only(&batch, &labels, Mode::Train).unwrap()
        };
        let fd = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
        let got = g.data()[idx];
        let denom = fd.abs().max(got.abs()).max(1e-6);
        model_dev = model_dev.max((fd - got).abs() / denom);
    }
    reports.push(CheckReport::new(
        "whole-model backward vs finite differences",
        model_dev,
        1e-5,
        "10 sampled parameters".to_string(),
    ));

    Ok(reports)
}

/// The full verification battery; the bool is the overall pass/fail.
pub fn run_all(opts: &VerifyOptions) -> Result<(Vec<CheckReport>, bool)> {
    let mut reports = equivalence_suite(opts)?;
    reports.push(emulation_check(opts.seed, 100)?);
    reports.extend(decay_twin_checks(opts.seed, 100)?);
    reports.extend(gradient_suite(opts.seed)?);
    let ok = reports.iter().all(|r| r.passed);
    Ok((reports, ok))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_every_check() {
        let (reports, ok) = run_all(&VerifyOptions {
            equivalence_configs: 40,
            seed: 3,
            inject_fault: false,
        })
        .unwrap();
        for r in &reports {
            assert!(r.passed, "{}", r.line());
        }
        assert!(ok);
    }

    #[test]
    fn fault_injection_trips_the_equivalence_check() {
        let opts = VerifyOptions { equivalence_configs: 10, seed: 3, inject_fault: true };
        let (reports, ok) = run_all(&opts).unwrap();
        assert!(!ok);
        let fwd = reports.iter().find(|r| r.name.contains("forward (f32)")).unwrap();
        assert!(!fwd.passed);
        assert!(fwd.max_dev > fwd.tolerance);
    }
}
