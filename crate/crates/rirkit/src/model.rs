//! Declarative assembly of the four architecture kinds, whole-network
//! forward/backward, the named parameter registry, and parameter accounting.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RirError};
use crate::init::{IdentityMask, InitKind, StreamKernels, StreamSplit};
use crate::ops::{
    conv2d, conv2d_backward, global_mean_pool, global_mean_pool_backward, linear, linear_backward,
    softmax_cross_entropy, BatchNorm, Mode,
};
use crate::scalar::Scalar;
use crate::streams::{
    sigma_backward, sigma_forward, BlockLayer, BlockLinear, BlockShortcut, BlockTrace,
    DualStreamConv, FusedConv, LinearGrads, ResidualBlock, Shortcut, SigmaCache, Stream,
};
use crate::tensor::Tensor;

/// The architecture family: plain layers or fused dual-stream layers,
/// with or without block-level shortcuts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cnn,
    ResNet,
    ResNetInit,
    Rir,
}

impl ModelKind {
    /// Block-level identity/projection shortcuts are present only in the
    /// residual kinds; the other two zero them out.
    pub fn has_block_shortcuts(&self) -> bool {
        matches!(self, ModelKind::ResNet | ModelKind::Rir)
    }

    /// Whether block layers are fused dual-stream layers.
    pub fn is_dual_stream(&self) -> bool {
        matches!(self, ModelKind::ResNetInit | ModelKind::Rir)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Cnn => "cnn",
            ModelKind::ResNet => "resnet",
            ModelKind::ResNetInit => "resnet-init",
            ModelKind::Rir => "rir",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for ModelKind {
    type Err = RirError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(ModelKind::Cnn),
            "resnet" => Ok(ModelKind::ResNet),
            "resnet-init" => Ok(ModelKind::ResNetInit),
            "rir" => Ok(ModelKind::Rir),
            other => Err(RirError::Lookup(format!("unknown model kind '{other}'"))),
        }
    }
}

/// How the dual-stream layers are laid out: one fused kernel per layer, or
/// the four explicit kernels (used to build equivalence twins from the same
/// seed). Irrelevant for the plain kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Fused,
    Unfused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global mean pool, then a fully connected classifier.
    PoolFc,
    /// 1x1 convolution down to the class count, then global mean pool.
    Conv1x1Pool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub filters: usize,
    pub first_stride: usize,
}

/// Declarative network description; `build_network` materializes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: String,
    pub input_channels: usize,
    pub stem_filters: usize,
    pub stages: Vec<StageSpec>,
    pub head: HeadKind,
    pub classes: usize,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(RirError::config("spec needs at least one stage".to_string()));
        }
        let mut prev = self.stem_filters;
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks < 1 || s.layers_per_block < 1 {
                return Err(RirError::config(format!(
                    "stage {i}: blocks and layers_per_block must be >= 1"
                )));
            }
            if s.filters < prev {
                return Err(RirError::config(format!(
                    "stage {i}: filters must be non-decreasing ({} -> {})",
                    prev, s.filters
                )));
            }
            if s.first_stride == 0 {
                return Err(RirError::config(format!("stage {i}: stride must be >= 1")));
            }
            prev = s.filters;
        }
        if self.stem_filters != self.stages[0].filters {
            return Err(RirError::config(
                "stem filters must match the first stage's filters".to_string(),
            ));
        }
        if self.classes < 2 {
            return Err(RirError::config("need at least two classes".to_string()));
        }
        Ok(())
    }

    /// Streams get equal filter counts, so fused kinds need even widths.
    fn split_for(&self, filters: usize) -> Result<StreamSplit> {
        if filters % 2 != 0 {
            return Err(RirError::config(format!(
                "dual-stream layers need an even filter count, got {filters}"
            )));
        }
        Ok(StreamSplit::equal(filters / 2))
    }
}

#[derive(Debug, Clone)]
pub struct StemLayer<T> {
    pub weight: Tensor<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone)]
pub enum Head<T> {
    PoolFc { weight: Tensor<T>, bias: Tensor<T> },
    Conv1x1Pool { weight: Tensor<T>, bias: Tensor<T> },
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub kind: ModelKind,
    pub layout: Layout,
    pub spec: NetSpec,
    pub stem: StemLayer<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head: Head<T>,
}

/// Registry metadata for one learnable tensor.
#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    /// Whether L2 decay applies (kernels yes; BN affine and biases no).
    pub decay: bool,
    /// Partial-identity taps for fused kernels with an embedded shortcut;
    /// weight decay is centered on the identity through this mask.
    pub mask: Option<IdentityMask>,
}

impl ParamMeta {
    fn plain(name: String) -> Self {
        ParamMeta { name, decay: true, mask: None }
    }

    fn no_decay(name: String) -> Self {
        ParamMeta { name, decay: false, mask: None }
    }
}

/// Named gradients, keyed like the parameter registry.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        let prev = self.map.insert(name.clone(), grad);
        debug_assert!(prev.is_none(), "duplicate gradient for {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.all_finite())
    }
}

pub struct ModelTrace<T> {
    batch: Tensor<T>,
    stem_sigma: SigmaCache<T>,
    blocks: Vec<BlockTrace<T>>,
    head: HeadTrace<T>,
}

enum HeadTrace<T> {
    PoolFc {
        pooled: Tensor<T>,
        hw: (usize, usize),
    },
    Conv1x1Pool {
        features: Tensor<T>,
        out_hw: (usize, usize),
    },
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

pub fn build_network<T: Scalar, R: Rng>(
    spec: &NetSpec,
    kind: ModelKind,
    init: InitKind,
    rng: &mut R,
) -> Result<Model<T>> {
    build_network_with_layout(spec, kind, init, rng, Layout::Fused)
}

/// Builds the network, drawing every weight in a fixed order so that fused
/// and unfused layouts of the dual-stream kinds are twins of the same seed.
pub fn build_network_with_layout<T: Scalar, R: Rng>(
    spec: &NetSpec,
    kind: ModelKind,
    init: InitKind,
    rng: &mut R,
    layout: Layout,
) -> Result<Model<T>> {
    spec.validate()?;
    let stem_weight = init.sample(&[spec.stem_filters, spec.input_channels, 3, 3], rng)?;
    let stem = StemLayer { weight: stem_weight, bn: BatchNorm::new(spec.stem_filters) };

    let mut blocks = Vec::new();
    let mut in_filters = spec.stem_filters;
    for stage in &spec.stages {
        for b in 0..stage.blocks {
            let block_in = in_filters;
            let block_stride = if b == 0 { stage.first_stride } else { 1 };
            let mut layers = Vec::with_capacity(stage.layers_per_block);
            for l in 0..stage.layers_per_block {
                let stride = if b == 0 && l == 0 { stage.first_stride } else { 1 };
                let (cin, cout) = (in_filters, stage.filters);
                let linear = if kind.is_dual_stream() {
                    let split_in = spec.split_for(cin)?;
                    let split_out = spec.split_for(cout)?;
                    let kernels = StreamKernels {
                        r_to_r: init.sample(&[split_out.residual, split_in.residual, 3, 3], rng)?,
                        t_to_r: init.sample(&[split_out.residual, split_in.transient, 3, 3], rng)?,
                        r_to_t: init.sample(&[split_out.transient, split_in.residual, 3, 3], rng)?,
                        t_to_t: init.sample(&[split_out.transient, split_in.transient, 3, 3], rng)?,
                    };
                    // Inner stream shortcuts: embedded identity where shapes
                    // allow, strided zero-pad otherwise.
                    match layout {
                        Layout::Fused => {
                            BlockLinear::Fused(FusedConv::from_kernels(&kernels, stride, None)?)
                        }
                        Layout::Unfused => {
                            let shortcut = if stride == 1 && split_in == split_out {
                                Shortcut::Identity
                            } else {
                                Shortcut::Pad
                            };
                            BlockLinear::DualStream(DualStreamConv { kernels, stride, shortcut })
                        }
                    }
                } else {
                    BlockLinear::Plain { weight: init.sample(&[cout, cin, 3, 3], rng)?, stride }
                };
                layers.push(BlockLayer { linear, bn: Some(BatchNorm::new(cout)) });
                in_filters = stage.filters;
            }
            let shortcut = if kind.has_block_shortcuts() {
                if block_in == stage.filters && block_stride == 1 {
                    Some(BlockShortcut::Identity)
                } else {
                    // Dimension-increasing block: 3x3 strided projection over
                    // the full tensor.
                    Some(BlockShortcut::Projection {
                        weight: init.sample(&[stage.filters, block_in, 3, 3], rng)?,
                        stride: block_stride,
                    })
                }
            } else {
                None
            };
            blocks.push(ResidualBlock { layers, shortcut });
        }
    }

    let final_filters = in_filters;
    let head = match spec.head {
        HeadKind::PoolFc => Head::PoolFc {
            weight: init.sample(&[spec.classes, final_filters], rng)?,
            bias: Tensor::zeros(&[spec.classes]),
        },
        HeadKind::Conv1x1Pool => Head::Conv1x1Pool {
            weight: init.sample(&[spec.classes, final_filters, 1, 1], rng)?,
            bias: Tensor::zeros(&[spec.classes]),
        },
    };

    Ok(Model { kind, layout, spec: spec.clone(), stem, blocks, head })
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

impl<T: Scalar> Model<T> {
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (logits, _) = self.forward_traced(batch, mode)?;
        Ok(logits)
    }

    /// Activations entering the head (after the last block).
    pub fn features(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = self.stem_forward(batch, mode)?.0;
        for block in &mut self.blocks {
            h = block.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn stem_forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, SigmaCache<T>)> {
        let pre = conv2d(batch, &self.stem.weight, 1, 1)?;
        sigma_forward(Some(&mut self.stem.bn), &pre, mode)
    }

    pub fn forward_traced(
        &mut self,
        batch: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, ModelTrace<T>)> {
        let (mut h, stem_sigma) = self.stem_forward(batch, mode)?;
        let mut block_traces = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (out, trace) = block.forward_traced(&h, mode)?;
            block_traces.push(trace);
            h = out;
        }
        let (logits, head) = match &self.head {
            Head::PoolFc { weight, bias } => {
                let (_, _, fh, fw) = h.dims4()?;
                let pooled = global_mean_pool(&h)?;
                let logits = linear(&pooled, weight, bias)?;
                (logits, HeadTrace::PoolFc { pooled, hw: (fh, fw) })
            }
            Head::Conv1x1Pool { weight, bias } => {
                let mut conv_out = conv2d(&h, weight, 1, 0)?;
                let (n, k, oh, ow) = conv_out.dims4()?;
                for ni in 0..n {
                    for ki in 0..k {
                        let base = (ni * k + ki) * oh * ow;
                        let b = bias.data()[ki];
                        for v in &mut conv_out.data_mut()[base..base + oh * ow] {
                            *v += b;
                        }
                    }
                }
                let logits = global_mean_pool(&conv_out)?;
                (logits, HeadTrace::Conv1x1Pool { features: h, out_hw: (oh, ow) })
            }
        };
        Ok((logits, ModelTrace { batch: batch.clone(), stem_sigma, blocks: block_traces, head }))
    }

    pub fn backward(&self, trace: &ModelTrace<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = Gradients::new();

        // Head.
        let mut g = match (&self.head, &trace.head) {
            (Head::PoolFc { weight, .. }, HeadTrace::PoolFc { pooled, hw }) => {
                let (g_pooled, gw, gb) = linear_backward(pooled, weight, grad_logits)?;
                grads.insert("head.weight".to_string(), gw);
                grads.insert("head.bias".to_string(), gb);
                global_mean_pool_backward(&g_pooled, hw.0, hw.1)?
            }
            (Head::Conv1x1Pool { weight, .. }, HeadTrace::Conv1x1Pool { features, out_hw }) => {
                let g_conv = global_mean_pool_backward(grad_logits, out_hw.0, out_hw.1)?;
                let (n, k, oh, ow) = g_conv.dims4()?;
                let mut gb = Tensor::zeros(&[k]);
                for ni in 0..n {
                    for ki in 0..k {
                        let base = (ni * k + ki) * oh * ow;
                        let mut sum = T::zero();
                        for &v in &g_conv.data()[base..base + oh * ow] {
                            sum += v;
                        }
                        gb.data_mut()[ki] += sum;
                    }
                }
                let (gx, gw) = conv2d_backward(features, weight, 1, 0, &g_conv)?;
                grads.insert("head.weight".to_string(), gw);
                grads.insert("head.bias".to_string(), gb);
                gx
            }
            _ => return Err(RirError::config("head trace does not match head kind".to_string())),
        };

        // Blocks, in reverse.
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let (gx, block_grads) = block.backward(&trace.blocks[bi], &g)?;
            for (li, lg) in block_grads.layers.into_iter().enumerate() {
                let prefix = format!("block{bi}.layer{li}");
                match lg {
                    LinearGrads::Plain(gw) => grads.insert(format!("{prefix}.weight"), gw),
                    LinearGrads::Fused(fg) => {
                        grads.insert(format!("{prefix}.weight"), fg.weight);
                        if let Some(gp) = fg.projection {
                            grads.insert(format!("{prefix}.proj"), gp);
                        }
                    }
                    LinearGrads::DualStream(dg) => {
                        grads.insert(format!("{prefix}.rr"), dg.kernels.r_to_r);
                        grads.insert(format!("{prefix}.tr"), dg.kernels.t_to_r);
                        grads.insert(format!("{prefix}.rt"), dg.kernels.r_to_t);
                        grads.insert(format!("{prefix}.tt"), dg.kernels.t_to_t);
                        if let Some(gp) = dg.projection {
                            grads.insert(format!("{prefix}.proj"), gp);
                        }
                    }
                }
            }
            for (li, bng) in block_grads.bns.into_iter().enumerate() {
                if let Some((gg, gb)) = bng {
                    grads.insert(format!("block{bi}.layer{li}.bn.gamma"), gg);
                    grads.insert(format!("block{bi}.layer{li}.bn.beta"), gb);
                }
            }
            if let Some(gsc) = block_grads.shortcut {
                grads.insert(format!("block{bi}.shortcut.weight"), gsc);
            }
            g = gx;
        }

        // Stem.
        let (g_pre, bn_grads) = sigma_backward(Some(&self.stem.bn), &trace.stem_sigma, &g)?;
        let (gg, gb) = bn_grads.expect("stem always has bn");
        grads.insert("stem.bn.gamma".to_string(), gg);
        grads.insert("stem.bn.beta".to_string(), gb);
        let (_, gw) = conv2d_backward(&trace.batch, &self.stem.weight, 1, 1, &g_pre)?;
        grads.insert("stem.weight".to_string(), gw);

        Ok(grads)
    }

    /// Train-style step computation: loss and gradients for one batch.
    pub fn loss_and_grads(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(T, Gradients<T>)> {
        let (logits, trace) = self.forward_traced(batch, mode)?;
        let (loss, grad_logits) = softmax_cross_entropy(&logits, labels)?;
        let grads = self.backward(&trace, &grad_logits)?;
        Ok((loss, grads))
    }

    pub fn loss_only(&mut self, batch: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<T> {
        let logits = self.forward(batch, mode)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    }

    // -----------------------------------------------------------------------
    // Parameter registry
    // -----------------------------------------------------------------------

    pub fn visit_params(&self, f: &mut impl FnMut(ParamMeta, &Tensor<T>)) {
        f(ParamMeta::plain("stem.weight".to_string()), &self.stem.weight);
        f(ParamMeta::no_decay("stem.bn.gamma".to_string()), &self.stem.bn.gamma);
        f(ParamMeta::no_decay("stem.bn.beta".to_string()), &self.stem.bn.beta);
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, layer) in block.layers.iter().enumerate() {
                let prefix = format!("block{bi}.layer{li}");
                match &layer.linear {
                    BlockLinear::Plain { weight, .. } => {
                        f(ParamMeta::plain(format!("{prefix}.weight")), weight);
                    }
                    BlockLinear::Fused(fc) => {
                        f(
                            ParamMeta {
                                name: format!("{prefix}.weight"),
                                decay: true,
                                mask: fc.identity_mask().cloned(),
                            },
                            &fc.weight,
                        );
                        if let crate::streams::FusedShortcut::Projection(p) = &fc.shortcut {
                            f(ParamMeta::plain(format!("{prefix}.proj")), p);
                        }
                    }
                    BlockLinear::DualStream(dsc) => {
                        f(ParamMeta::plain(format!("{prefix}.rr")), &dsc.kernels.r_to_r);
                        f(ParamMeta::plain(format!("{prefix}.tr")), &dsc.kernels.t_to_r);
                        f(ParamMeta::plain(format!("{prefix}.rt")), &dsc.kernels.r_to_t);
                        f(ParamMeta::plain(format!("{prefix}.tt")), &dsc.kernels.t_to_t);
                        if let Shortcut::Projection(p) = &dsc.shortcut {
                            f(ParamMeta::plain(format!("{prefix}.proj")), p);
                        }
                    }
                }
                if let Some(bn) = &layer.bn {
                    f(ParamMeta::no_decay(format!("{prefix}.bn.gamma")), &bn.gamma);
                    f(ParamMeta::no_decay(format!("{prefix}.bn.beta")), &bn.beta);
                }
            }
            if let Some(BlockShortcut::Projection { weight, .. }) = &block.shortcut {
                f(ParamMeta::plain(format!("block{bi}.shortcut.weight")), weight);
            }
        }
        match &self.head {
            Head::PoolFc { weight, bias } | Head::Conv1x1Pool { weight, bias } => {
                f(ParamMeta::plain("head.weight".to_string()), weight);
                f(ParamMeta::no_decay("head.bias".to_string()), bias);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(ParamMeta, &mut Tensor<T>)) {
        f(ParamMeta::plain("stem.weight".to_string()), &mut self.stem.weight);
        f(ParamMeta::no_decay("stem.bn.gamma".to_string()), &mut self.stem.bn.gamma);
        f(ParamMeta::no_decay("stem.bn.beta".to_string()), &mut self.stem.bn.beta);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (li, layer) in block.layers.iter_mut().enumerate() {
                let prefix = format!("block{bi}.layer{li}");
                match &mut layer.linear {
                    BlockLinear::Plain { weight, .. } => {
                        f(ParamMeta::plain(format!("{prefix}.weight")), weight);
                    }
                    BlockLinear::Fused(fc) => {
                        let mask = fc.identity_mask().cloned();
                        f(
                            ParamMeta { name: format!("{prefix}.weight"), decay: true, mask },
                            &mut fc.weight,
                        );
                        if let crate::streams::FusedShortcut::Projection(p) = &mut fc.shortcut {
                            f(ParamMeta::plain(format!("{prefix}.proj")), p);
                        }
                    }
                    BlockLinear::DualStream(dsc) => {
                        f(ParamMeta::plain(format!("{prefix}.rr")), &mut dsc.kernels.r_to_r);
                        f(ParamMeta::plain(format!("{prefix}.tr")), &mut dsc.kernels.t_to_r);
                        f(ParamMeta::plain(format!("{prefix}.rt")), &mut dsc.kernels.r_to_t);
                        f(ParamMeta::plain(format!("{prefix}.tt")), &mut dsc.kernels.t_to_t);
                        if let Shortcut::Projection(p) = &mut dsc.shortcut {
                            f(ParamMeta::plain(format!("{prefix}.proj")), p);
                        }
                    }
                }
                if let Some(bn) = &mut layer.bn {
                    f(ParamMeta::no_decay(format!("{prefix}.bn.gamma")), &mut bn.gamma);
                    f(ParamMeta::no_decay(format!("{prefix}.bn.beta")), &mut bn.beta);
                }
            }
            if let Some(BlockShortcut::Projection { weight, .. }) = &mut block.shortcut {
                f(ParamMeta::plain(format!("block{bi}.shortcut.weight")), weight);
            }
        }
        match &mut self.head {
            Head::PoolFc { weight, bias } | Head::Conv1x1Pool { weight, bias } => {
                f(ParamMeta::plain("head.weight".to_string()), weight);
                f(ParamMeta::no_decay("head.bias".to_string()), bias);
            }
        }
    }

    /// Non-learnable state (BN running statistics), named for checkpoints.
    pub fn visit_state(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        f("stem.bn.running_mean".to_string(), &self.stem.bn.running_mean);
        f("stem.bn.running_var".to_string(), &self.stem.bn.running_var);
        for (bi, block) in self.blocks.iter().enumerate() {
            for (li, layer) in block.layers.iter().enumerate() {
                if let Some(bn) = &layer.bn {
                    f(format!("block{bi}.layer{li}.bn.running_mean"), &bn.running_mean);
                    f(format!("block{bi}.layer{li}.bn.running_var"), &bn.running_var);
                }
            }
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f("stem.bn.running_mean".to_string(), &mut self.stem.bn.running_mean);
        f("stem.bn.running_var".to_string(), &mut self.stem.bn.running_var);
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (li, layer) in block.layers.iter_mut().enumerate() {
                if let Some(bn) = &mut layer.bn {
                    f(format!("block{bi}.layer{li}.bn.running_mean"), &mut bn.running_mean);
                    f(format!("block{bi}.layer{li}.bn.running_var"), &mut bn.running_var);
                }
            }
        }
    }

    pub fn param_metas(&self) -> Vec<ParamMeta> {
        let mut metas = Vec::new();
        self.visit_params(&mut |m, _| metas.push(m));
        metas
    }

    pub fn get_param(&self, name: &str) -> Option<Tensor<T>> {
        let mut found = None;
        self.visit_params(&mut |m, t| {
            if m.name == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Every learnable scalar, BN affine parameters and projections included.
    pub fn count_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }

    // -----------------------------------------------------------------------
    // Ablation
    // -----------------------------------------------------------------------

    /// Fused layers in network order, addressable by ablation index.
    pub fn num_fused_layers(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.layers)
            .filter(|l| matches!(l.linear, BlockLinear::Fused(_)))
            .count()
    }

    /// Returns a copy with one stream's learned connections zeroed at one
    /// fused layer; the original model is untouched.
    pub fn with_ablated_layer(&self, layer_index: usize, stream: Stream) -> Result<Model<T>> {
        if !self.kind.is_dual_stream() {
            return Err(RirError::UnsupportedModel(format!(
                "ablation needs fused dual-stream layers; model kind is {}",
                self.kind
            )));
        }
        let total = self.num_fused_layers();
        if layer_index >= total {
            return Err(RirError::Range(format!(
                "fused layer index {layer_index} out of range (have {total})"
            )));
        }
        let mut out = self.clone();
        let mut idx = 0;
        for block in &mut out.blocks {
            for layer in &mut block.layers {
                if let BlockLinear::Fused(fc) = &mut layer.linear {
                    if idx == layer_index {
                        *fc = fc.ablated(stream);
                        return Ok(out);
                    }
                    idx += 1;
                }
            }
        }
        unreachable!("index checked above")
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        // Checkpoint round-trips go through f32; this direct cast serves the
        // f64 verification paths.
        fn cast_bn<T: Scalar, U: Scalar>(bn: &BatchNorm<T>) -> BatchNorm<U> {
            BatchNorm {
                gamma: bn.gamma.cast(),
                beta: bn.beta.cast(),
                running_mean: bn.running_mean.cast(),
                running_var: bn.running_var.cast(),
                momentum: bn.momentum,
                eps: bn.eps,
            }
        }
        Model {
            kind: self.kind,
            layout: self.layout,
            spec: self.spec.clone(),
            stem: StemLayer { weight: self.stem.weight.cast(), bn: cast_bn(&self.stem.bn) },
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    layers: b
                        .layers
                        .iter()
                        .map(|l| BlockLayer {
                            linear: match &l.linear {
                                BlockLinear::Plain { weight, stride } => {
                                    BlockLinear::Plain { weight: weight.cast(), stride: *stride }
                                }
                                BlockLinear::Fused(fc) => BlockLinear::Fused(FusedConv {
                                    weight: fc.weight.cast(),
                                    split_in: fc.split_in,
                                    split_out: fc.split_out,
                                    stride: fc.stride,
                                    shortcut: match &fc.shortcut {
                                        crate::streams::FusedShortcut::Embedded(m) => {
                                            crate::streams::FusedShortcut::Embedded(m.clone())
                                        }
                                        crate::streams::FusedShortcut::Pad => {
                                            crate::streams::FusedShortcut::Pad
                                        }
                                        crate::streams::FusedShortcut::Projection(p) => {
                                            crate::streams::FusedShortcut::Projection(p.cast())
                                        }
                                    },
                                }),
                                BlockLinear::DualStream(dsc) => {
                                    BlockLinear::DualStream(DualStreamConv {
                                        kernels: StreamKernels {
                                            r_to_r: dsc.kernels.r_to_r.cast(),
                                            t_to_r: dsc.kernels.t_to_r.cast(),
                                            r_to_t: dsc.kernels.r_to_t.cast(),
                                            t_to_t: dsc.kernels.t_to_t.cast(),
                                        },
                                        stride: dsc.stride,
                                        shortcut: match &dsc.shortcut {
                                            Shortcut::Identity => Shortcut::Identity,
                                            Shortcut::Pad => Shortcut::Pad,
                                            Shortcut::Projection(p) => {
                                                Shortcut::Projection(p.cast())
                                            }
                                        },
                                    })
                                }
                            },
                            bn: l.bn.as_ref().map(|bn| cast_bn(bn)),
                        })
                        .collect(),
                    shortcut: b.shortcut.as_ref().map(|s| match s {
                        BlockShortcut::Identity => BlockShortcut::Identity,
                        BlockShortcut::Projection { weight, stride } => BlockShortcut::Projection {
                            weight: weight.cast(),
                            stride: *stride,
                        },
                    }),
                })
                .collect(),
            head: match &self.head {
                Head::PoolFc { weight, bias } => {
                    Head::PoolFc { weight: weight.cast(), bias: bias.cast() }
                }
                Head::Conv1x1Pool { weight, bias } => {
                    Head::Conv1x1Pool { weight: weight.cast(), bias: bias.cast() }
                }
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Named reference specs
// ---------------------------------------------------------------------------

/// Reference and desk-scale architectures by name:
/// - "baseline32": 15 two-layer blocks over 3 stages of 5, filters 16/32/64,
///   global pool + FC head.
/// - "wide18": blocks 2/3/3 over filters 96/192/384, 1x1-conv head.
/// - "tiny": 3 stages x 2 blocks, filters 16/32/64, FC head.
/// - "desk-b{B}-l{L}": 3 stages x B blocks of L layers, filters 16/32/64.
pub fn spec_by_name(name: &str, classes: usize) -> Result<NetSpec> {
    let stage = |blocks, layers, filters, stride| StageSpec {
        blocks,
        layers_per_block: layers,
        filters,
        first_stride: stride,
    };
    let spec = match name {
        "baseline32" => NetSpec {
            name: name.to_string(),
            input_channels: 3,
            stem_filters: 16,
            stages: vec![stage(5, 2, 16, 1), stage(5, 2, 32, 2), stage(5, 2, 64, 2)],
            head: HeadKind::PoolFc,
            classes,
        },
        "wide18" => NetSpec {
            name: name.to_string(),
            input_channels: 3,
            stem_filters: 96,
            stages: vec![stage(2, 2, 96, 1), stage(3, 2, 192, 2), stage(3, 2, 384, 2)],
            head: HeadKind::Conv1x1Pool,
            classes,
        },
        "tiny" => NetSpec {
            name: name.to_string(),
            input_channels: 3,
            stem_filters: 16,
            stages: vec![stage(2, 2, 16, 1), stage(2, 2, 32, 2), stage(2, 2, 64, 2)],
            head: HeadKind::PoolFc,
            classes,
        },
        other => {
            // desk-b{B}-l{L}
            let rest = other
                .strip_prefix("desk-b")
                .ok_or_else(|| RirError::Lookup(format!("unknown architecture '{other}'")))?;
            let (b_str, l_str) = rest
                .split_once("-l")
                .ok_or_else(|| RirError::Lookup(format!("unknown architecture '{other}'")))?;
            let b: usize = b_str
                .parse()
                .map_err(|_| RirError::Lookup(format!("bad block count in '{other}'")))?;
            let l: usize = l_str
                .parse()
                .map_err(|_| RirError::Lookup(format!("bad layer count in '{other}'")))?;
            if !(1..=5).contains(&b) || !(1..=10).contains(&l) {
                return Err(RirError::Lookup(format!(
                    "desk specs cover b in 1..=5 and l in 1..=10, got '{other}'"
                )));
            }
            NetSpec {
                name: other.to_string(),
                input_channels: 3,
                stem_filters: 16,
                stages: vec![stage(b, l, 16, 1), stage(b, l, 32, 2), stage(b, l, 64, 2)],
                head: HeadKind::PoolFc,
                classes,
            }
        }
    };
    Ok(spec)
}

pub fn standard_spec_names() -> Vec<&'static str> {
    vec!["baseline32", "wide18", "tiny", "desk-b{B}-l{L}"]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_batch(n: usize, hw: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(
            &[n, 3, hw, hw],
            (0..n * 3 * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_conv_bn_param_arithmetic() {
        // 3x3 conv 3->16 plus BN: 3*16*9 + 16 + 16 = 464
        let spec = NetSpec {
            name: "stub".to_string(),
            input_channels: 3,
            stem_filters: 16,
            stages: vec![StageSpec { blocks: 1, layers_per_block: 1, filters: 16, first_stride: 1 }],
            head: HeadKind::PoolFc,
            classes: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model: Model<f32> = build_network(&spec, ModelKind::Cnn, InitKind::Msr, &mut rng).unwrap();
        let mut stem_only = 0;
        model.visit_params(&mut |m, t| {
            if m.name.starts_with("stem") {
                stem_only += t.len();
            }
        });
        assert_eq!(stem_only, 3 * 16 * 9 + 16 + 16);
    }

    #[test]
    fn reference_parameter_counts() {
        let mut counts = std::collections::HashMap::new();
        for kind in [ModelKind::Cnn, ModelKind::ResNet, ModelKind::ResNetInit, ModelKind::Rir] {
            for arch in ["baseline32", "wide18"] {
                let spec = spec_by_name(arch, 10).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let model: Model<f32> = build_network(&spec, kind, InitKind::Msr, &mut rng).unwrap();
                counts.insert((arch, kind), model.count_params());
            }
        }
        let within = |got: usize, want: f64| {
            let dev = (got as f64 - want).abs() / want;
            assert!(dev <= 0.03, "count {got} vs {want} ({:.2}%)", dev * 100.0);
        };
        within(counts[&("baseline32", ModelKind::Cnn)], 0.46e6);
        within(counts[&("baseline32", ModelKind::ResNetInit)], 0.46e6);
        within(counts[&("baseline32", ModelKind::ResNet)], 0.49e6);
        within(counts[&("baseline32", ModelKind::Rir)], 0.49e6);
        within(counts[&("wide18", ModelKind::Cnn)], 9.5e6);
        within(counts[&("wide18", ModelKind::ResNetInit)], 9.5e6);
        within(counts[&("wide18", ModelKind::ResNet)], 10.3e6);
        within(counts[&("wide18", ModelKind::Rir)], 10.3e6);

        // Fusion is a re-layout, not a re-parameterization.
        assert_eq!(
            counts[&("baseline32", ModelKind::Cnn)],
            counts[&("baseline32", ModelKind::ResNetInit)]
        );
        assert_eq!(
            counts[&("baseline32", ModelKind::ResNet)],
            counts[&("baseline32", ModelKind::Rir)]
        );
    }

    #[test]
    fn shortcut_params_account_for_kind_difference() {
        let spec = spec_by_name("baseline32", 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cnn: Model<f32> = build_network(&spec, ModelKind::Cnn, InitKind::Msr, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let resnet: Model<f32> =
            build_network(&spec, ModelKind::ResNet, InitKind::Msr, &mut rng).unwrap();
        // Two dimension-increasing boundaries: 16->32 and 32->64, 3x3 each.
        let want = 16 * 32 * 9 + 32 * 64 * 9;
        assert_eq!(resnet.count_params() - cnn.count_params(), want);
    }

    #[test]
    fn unique_param_names_and_twin_counts() {
        let spec = spec_by_name("tiny", 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fused: Model<f32> = build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let unfused: Model<f32> =
            build_network_with_layout(&spec, ModelKind::Rir, InitKind::Msr, &mut rng, Layout::Unfused)
                .unwrap();

        let names = fused.param_metas().iter().map(|m| m.name.clone()).collect::<Vec<_>>();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(names.len(), unique.len());

        assert_eq!(fused.count_params(), unfused.count_params());

        // Masks appear on fused stride-1 kernels only.
        for m in fused.param_metas() {
            if m.mask.is_some() {
                assert!(m.name.ends_with(".weight") && m.name.starts_with("block"));
            }
        }
        assert!(unfused.param_metas().iter().all(|m| m.mask.is_none()));
    }

    #[test]
    fn zero_classifier_gives_uniform_logits() {
        let spec = spec_by_name("tiny", 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model: Model<f64> =
            build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
        if let Head::PoolFc { weight, .. } = &mut model.head {
            *weight = Tensor::zeros(weight.shape());
        }
        let batch = rand_batch(2, 32, &mut rng);
        let logits = model.forward(&batch, Mode::Eval).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let (loss, _) = softmax_cross_entropy(&logits, &[1, 7]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = spec_by_name("tiny", 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model: Model<f32> =
            build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
        let batch = rand_batch(3, 32, &mut rng).cast::<f32>();
        let a = model.forward(&batch, Mode::Eval).unwrap();
        let b = model.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_matches_manual_composition() {
        // Tiny 2-stage model recombined layer by layer outside the Model.
        let spec = NetSpec {
            name: "manual".to_string(),
            input_channels: 3,
            stem_filters: 4,
            stages: vec![
                StageSpec { blocks: 1, layers_per_block: 2, filters: 4, first_stride: 1 },
                StageSpec { blocks: 1, layers_per_block: 2, filters: 8, first_stride: 2 },
            ],
            head: HeadKind::PoolFc,
            classes: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model: Model<f64> =
            build_network(&spec, ModelKind::ResNet, InitKind::Msr, &mut rng).unwrap();
        let batch = rand_batch(2, 16, &mut rng);
        let logits = model.forward(&batch, Mode::Eval).unwrap();

        // Manual path.
        let mut h = {
            let pre = conv2d(&batch, &model.stem.weight, 1, 1).unwrap();
            let (out, _) =
                sigma_forward(Some(&mut model.stem.bn.clone()), &pre, Mode::Eval).unwrap();
            out
        };
        for block in &model.blocks {
            let mut b = block.clone();
            h = b.forward(&h, Mode::Eval).unwrap();
        }
        let pooled = global_mean_pool(&h).unwrap();
        let want = match &model.head {
            Head::PoolFc { weight, bias } => linear(&pooled, weight, bias).unwrap(),
            _ => unreachable!(),
        };
        assert!(logits.max_abs_diff(&want) <= 1e-5);
    }

    #[test]
    fn conv_head_runs_and_matches_shapes() {
        let spec = NetSpec {
            name: "convhead".to_string(),
            input_channels: 3,
            stem_filters: 8,
            stages: vec![StageSpec { blocks: 1, layers_per_block: 2, filters: 8, first_stride: 1 }],
            head: HeadKind::Conv1x1Pool,
            classes: 7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut model: Model<f64> =
            build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
        let batch = rand_batch(2, 8, &mut rng);
        let logits = model.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[2, 7]);
    }

    #[test]
    fn eval_mode_leaves_running_stats_bitwise() {
        let spec = spec_by_name("tiny", 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model: Model<f32> =
            build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
        let batch = rand_batch(2, 32, &mut rng).cast::<f32>();
        // Move stats off their init values first.
        model.forward(&batch, Mode::Train).unwrap();
        let mut before = Vec::new();
        model.visit_state(&mut |_, t| before.push(t.clone()));
        let (logits, trace) = model.forward_traced(&batch, Mode::Eval).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        model.backward(&trace, &grad).unwrap();
        let mut after = Vec::new();
        model.visit_state(&mut |_, t| after.push(t.clone()));
        assert_eq!(before, after);
    }

    #[test]
    fn fused_and_unfused_twins_agree_end_to_end() {
        let spec = spec_by_name("tiny", 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut fused: Model<f32> =
            build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut unfused: Model<f32> =
            build_network_with_layout(&spec, ModelKind::Rir, InitKind::Msr, &mut rng, Layout::Unfused)
                .unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let batch = rand_batch(2, 32, &mut rng2).cast::<f32>();
        let a = fused.forward(&batch, Mode::Train).unwrap();
        let b = unfused.forward(&batch, Mode::Train).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-4, "dev {}", a.max_abs_diff(&b));
    }

    #[test]
    fn stride_free_twins_agree() {
        // Single stage, identity shortcuts everywhere.
        let spec = NetSpec {
            name: "flat".to_string(),
            input_channels: 3,
            stem_filters: 8,
            stages: vec![StageSpec { blocks: 2, layers_per_block: 2, filters: 8, first_stride: 1 }],
            head: HeadKind::PoolFc,
            classes: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut fused: Model<f32> =
            build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut unfused: Model<f32> =
            build_network_with_layout(&spec, ModelKind::Rir, InitKind::Msr, &mut rng, Layout::Unfused)
                .unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let batch = rand_batch(2, 16, &mut rng2).cast::<f32>();
        let a = fused.forward(&batch, Mode::Train).unwrap();
        let b = unfused.forward(&batch, Mode::Train).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-4, "dev {}", a.max_abs_diff(&b));
    }

    #[test]
    fn residual_ablation_reduces_to_transient_only_cnn() {
        // Ablating the residual stream everywhere must leave the transient
        // channels computing exactly the CNN built from the t->t blocks.
        let spec = NetSpec {
            name: "flat".to_string(),
            input_channels: 3,
            stem_filters: 8,
            stages: vec![StageSpec { blocks: 2, layers_per_block: 2, filters: 8, first_stride: 1 }],
            head: HeadKind::PoolFc,
            classes: 10,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model: Model<f64> =
            build_network(&spec, ModelKind::ResNetInit, InitKind::Msr, &mut rng).unwrap();

        let mut ablated = model.clone();
        for i in 0..model.num_fused_layers() {
            ablated = ablated.with_ablated_layer(i, Stream::Residual).unwrap();
        }

        let mut rng2 = ChaCha8Rng::seed_from_u64(13);
        let batch = rand_batch(2, 16, &mut rng2);
        let feats = ablated.features(&batch, Mode::Eval).unwrap();
        let t_feats = crate::tensor::channel_slice(&feats, 4, 4).unwrap();

        // Transient-only CNN: stem restricted to its last 4 output channels,
        // then the t->t kernels.
        let slice_bn = |bn: &BatchNorm<f64>| {
            let mut out = BatchNorm::<f64>::new(4);
            out.gamma = Tensor::from_vec(&[4], bn.gamma.data()[4..].to_vec()).unwrap();
            out.beta = Tensor::from_vec(&[4], bn.beta.data()[4..].to_vec()).unwrap();
            out.running_mean = Tensor::from_vec(&[4], bn.running_mean.data()[4..].to_vec()).unwrap();
            out.running_var = Tensor::from_vec(&[4], bn.running_var.data()[4..].to_vec()).unwrap();
            out
        };
        let mut h = {
            let stem_t =
                Tensor::from_vec(&[4, 3, 3, 3], model.stem.weight.data()[4 * 27..].to_vec()).unwrap();
            let pre = conv2d(&batch, &stem_t, 1, 1).unwrap();
            let (out, _) = sigma_forward(Some(&mut slice_bn(&model.stem.bn)), &pre, Mode::Eval).unwrap();
            out
        };
        for block in &model.blocks {
            for layer in &block.layers {
                if let BlockLinear::Fused(fc) = &layer.linear {
                    let blocks = fc.learned_kernels().unwrap();
                    let pre = conv2d(&h, &blocks.t_to_t, 1, 1).unwrap();
                    let mut bn = slice_bn(layer.bn.as_ref().unwrap());
                    let (out, _) = sigma_forward(Some(&mut bn), &pre, Mode::Eval).unwrap();
                    h = out;
                }
            }
        }
        assert!(t_feats.max_abs_diff(&h) <= 1e-12, "dev {}", t_feats.max_abs_diff(&h));
    }

    #[test]
    fn ablation_guards() {
        let spec = spec_by_name("tiny", 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cnn: Model<f32> = build_network(&spec, ModelKind::Cnn, InitKind::Msr, &mut rng).unwrap();
        assert!(matches!(
            cnn.with_ablated_layer(0, Stream::Residual),
            Err(RirError::UnsupportedModel(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let rir: Model<f32> = build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
        assert_eq!(rir.num_fused_layers(), 12);
        assert!(matches!(rir.with_ablated_layer(12, Stream::Residual), Err(RirError::Range(_))));
    }

    #[test]
    fn spec_lookup() {
        assert!(spec_by_name("baseline32", 10).is_ok());
        assert_eq!(spec_by_name("baseline32", 100).unwrap().classes, 100);
        assert!(spec_by_name("desk-b2-l4", 10).is_ok());
        assert!(matches!(spec_by_name("nope", 10), Err(RirError::Lookup(_))));
        assert!(matches!(spec_by_name("desk-b9-l4", 10), Err(RirError::Lookup(_))));

        let spec = spec_by_name("tiny", 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut model: Model<f32> =
            build_network(&spec, ModelKind::Cnn, InitKind::Xavier, &mut rng).unwrap();
        let batch = rand_batch(2, 32, &mut rng).cast::<f32>();
        let logits = model.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
    }

    #[test]
    fn backward_matches_finite_differences_on_sampled_params() {
        // Whole-model check in f64 on a small dual-stream net.
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
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut model: Model<f64> =
            build_network(&spec, ModelKind::Rir, InitKind::Msr, &mut rng).unwrap();
        let batch = rand_batch(2, 8, &mut rng);
        let labels = [1usize, 3];

        let (_, grads) = model.loss_and_grads(&batch, &labels, Mode::Train).unwrap();

        let metas = model.param_metas();
        let h = 1e-5;
        let mut checked = 0;
        for (i, meta) in metas.iter().enumerate() {
            if checked >= 10 && i % 3 != 0 {
                continue;
            }
            let g = grads.get(&meta.name).unwrap();
            // Probe one entry per sampled tensor.
            let idx = (i * 7) % g.len();
            let mut probe = |delta: f64| -> f64 {
                let mut m = model.clone();
                m.visit_params_mut(&mut |pm, t| {
                    if pm.name == meta.name {
                        t.data_mut()[idx] += delta;
                    }
                });
                m.loss_only(&batch, &labels, Mode::Train).unwrap()
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let got = g.data()[idx];
            let denom = fd.abs().max(got.abs()).max(1e-8);
            assert!(
                (fd - got).abs() / denom <= 1e-5,
                "{} [{idx}]: fd {fd} vs grad {got}",
                meta.name
            );
            checked += 1;
        }
        assert!(checked >= 10);
    }

    #[test]
    fn batch_gradient_decomposes_per_sample_in_eval_mode() {
        // Mean loss over {a, b} has gradient (g_a + g_b) / 2; checked in eval
        // mode where no cross-sample coupling exists. A duplicated sample's
        // contribution therefore doubles.
        let spec = NetSpec {
            name: "lin".to_string(),
            input_channels: 3,
            stem_filters: 4,
            stages: vec![StageSpec { blocks: 1, layers_per_block: 2, filters: 4, first_stride: 1 }],
            head: HeadKind::PoolFc,
            classes: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model: Model<f64> =
            build_network(&spec, ModelKind::ResNet, InitKind::Msr, &mut rng).unwrap();
        let a = rand_batch(1, 8, &mut rng);
        let b = rand_batch(1, 8, &mut rng);
        let mut ab_data = a.data().to_vec();
        ab_data.extend_from_slice(b.data());
        let ab = Tensor::from_vec(&[2, 3, 8, 8], ab_data).unwrap();

        let (_, g_ab) = model.loss_and_grads(&ab, &[0, 2], Mode::Eval).unwrap();
        let (_, g_a) = model.loss_and_grads(&a, &[0], Mode::Eval).unwrap();
        let (_, g_b) = model.loss_and_grads(&b, &[2], Mode::Eval).unwrap();

        for (name, g) in g_ab.iter() {
            let mut want = g_a.get(name).unwrap().clone();
            want.add_assign(g_b.get(name).unwrap()).unwrap();
            want.scale(0.5);
            assert!(g.max_abs_diff(&want) <= 1e-10, "{name}");
        }

        let mut aa_data = a.data().to_vec();
        aa_data.extend_from_slice(a.data());
        let aa = Tensor::from_vec(&[2, 3, 8, 8], aa_data).unwrap();
        let (_, g_aa) = model.loss_and_grads(&aa, &[0, 0], Mode::Eval).unwrap();
        for (name, g) in g_aa.iter() {
            assert!(g.max_abs_diff(g_a.get(name).unwrap()) <= 1e-10, "{name}");
        }
    }

    #[test]
    fn zero_head_bias_gradient_has_uniform_softmax_pattern() {
        let spec = spec_by_name("tiny", 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut model: Model<f64> =
            build_network(&spec, ModelKind::Cnn, InitKind::Msr, &mut rng).unwrap();
        if let Head::PoolFc { weight, .. } = &mut model.head {
            *weight = Tensor::zeros(weight.shape());
        }
        let batch = rand_batch(4, 32, &mut rng);
        let labels = [0usize, 0, 1, 2];
        let (_, grads) = model.loss_and_grads(&batch, &labels, Mode::Eval).unwrap();
        let gb = grads.get("head.bias").unwrap();
        // grad_bias[k] = 1/K - (count of label k)/N
        for k in 0..10 {
            let count = labels.iter().filter(|&&l| l == k).count() as f64;
            let want = 0.1 - count / 4.0;
            assert!((gb.data()[k] - want).abs() <= 1e-12, "k={k}");
        }
    }
}
