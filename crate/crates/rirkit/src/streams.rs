//! The generalized residual layer in its unfused (four explicit kernels) and
//! fused (single kernel plus partial identity) forms, shortcut connections,
//! residual block composition, and stream ablation.
//!
//! A layer updates a residual stream r and a transient stream t:
//!
//!   r' = sigma(conv(r, W_rr) + conv(t, W_tr) + shortcut(r))
//!   t' = sigma(conv(r, W_rt) + conv(t, W_tt))
//!
//! where sigma is batch normalization followed by ReLU, applied to the
//! concatenated pre-activations. With an identity shortcut the same update is
//! one convolution of concat(r, t) with the fused kernel.

use crate::error::{Result, RirError};
use crate::init::{concat_kernels, fuse_kernels, IdentityMask, KernelKind, StreamKernels, StreamSplit};
use crate::ops::{conv2d, conv2d_backward, relu, relu_backward, BatchNorm, BnCache, Mode};
use crate::scalar::Scalar;
use crate::tensor::{add_to_channels, channel_slice, concat_channels, split_channels, Tensor};

/// Paired activations of the two streams; shapes agree except in channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPair<T> {
    pub residual: Tensor<T>,
    pub transient: Tensor<T>,
}

impl<T: Scalar> StreamPair<T> {
    pub fn new(residual: Tensor<T>, transient: Tensor<T>) -> Result<Self> {
        let (n, _, h, w) = residual.dims4()?;
        let (tn, _, th, tw) = transient.dims4()?;
        if (n, h, w) != (tn, th, tw) {
            return Err(RirError::shape(format!(
                "stream pair mismatch: r {:?} vs t {:?}",
                residual.shape(),
                transient.shape()
            )));
        }
        Ok(StreamPair { residual, transient })
    }

    pub fn split(&self) -> StreamSplit {
        StreamSplit {
            residual: self.residual.shape()[1],
            transient: self.transient.shape()[1],
        }
    }

    pub fn concat(&self) -> Result<Tensor<T>> {
        concat_channels(&self.residual, &self.transient)
    }

    pub fn from_concat(x: &Tensor<T>, split: StreamSplit) -> Result<Self> {
        let (r, t) = split_channels(x, split.residual)?;
        StreamPair::new(r, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Residual,
    Transient,
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stream::Residual => write!(f, "residual"),
            Stream::Transient => write!(f, "transient"),
        }
    }
}

// ---------------------------------------------------------------------------
// Shortcut connections
// ---------------------------------------------------------------------------

/// Shortcut on the residual stream: identity where shapes allow, a strided
/// subsample with zero channel padding, or a learned 3x3 projection.
#[derive(Debug, Clone, PartialEq)]
pub enum Shortcut<T> {
    Identity,
    Pad,
    Projection(Tensor<T>),
}

/// Output extent of a stride-s subsample, matching a 3x3/pad-1 convolution.
fn subsample_extent(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

impl<T: Scalar> Shortcut<T> {
    pub fn forward(&self, x: &Tensor<T>, out_channels: usize, stride: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        match self {
            Shortcut::Identity => {
                if c != out_channels || stride != 1 {
                    return Err(RirError::config(format!(
                        "identity shortcut needs matching channels and stride 1, got {c}->{out_channels} stride {stride}"
                    )));
                }
                Ok(x.clone())
            }
            Shortcut::Pad => {
                if out_channels < c {
                    return Err(RirError::config(format!(
                        "pad shortcut cannot drop channels ({c} -> {out_channels})"
                    )));
                }
                let (oh, ow) = (subsample_extent(h, stride), subsample_extent(w, stride));
                let mut out = Tensor::zeros(&[n, out_channels, oh, ow]);
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                *out.at4_mut(ni, ci, oy, ox) = x.at4(ni, ci, oy * stride, ox * stride);
                            }
                        }
                    }
                }
                Ok(out)
            }
            Shortcut::Projection(kernel) => conv2d(x, kernel, stride, 1),
        }
    }

    /// Gradient w.r.t. the shortcut input, plus the projection kernel
    /// gradient when one exists.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        stride: usize,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match self {
            Shortcut::Identity => Ok((grad_out.clone(), None)),
            Shortcut::Pad => {
                let (n, c, h, w) = x.dims4()?;
                let (_, _, oh, ow) = grad_out.dims4()?;
                let mut gx = Tensor::zeros(&[n, c, h, w]);
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                *gx.at4_mut(ni, ci, oy * stride, ox * stride) =
                                    grad_out.at4(ni, ci, oy, ox);
                            }
                        }
                    }
                }
                Ok((gx, None))
            }
            Shortcut::Projection(kernel) => {
                let (gx, gk) = conv2d_backward(x, kernel, stride, 1, grad_out)?;
                Ok((gx, Some(gk)))
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Shortcut::Projection(k) => k.len(),
            _ => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Unfused generalized layer (linear part)
// ---------------------------------------------------------------------------

/// The four-kernel form. `shortcut` acts on the residual stream only.
#[derive(Debug, Clone)]
pub struct DualStreamConv<T> {
    pub kernels: StreamKernels<T>,
    pub stride: usize,
    pub shortcut: Shortcut<T>,
}

#[derive(Debug, Clone)]
pub struct DualStreamGrads<T> {
    pub kernels: StreamKernels<T>,
    pub projection: Option<Tensor<T>>,
}

impl<T: Scalar> DualStreamConv<T> {
    fn pad(&self) -> Result<usize> {
        match self.kernels.layout()?.2 {
            KernelKind::Conv(k) => Ok(k / 2),
            KernelKind::Fc => Err(RirError::config("dual-stream conv needs conv kernels".to_string())),
        }
    }

    /// Pre-activation pair (no sigma applied).
    pub fn forward(&self, input: &StreamPair<T>) -> Result<StreamPair<T>> {
        let (out_split, _, _) = self.kernels.layout()?;
        let pad = self.pad()?;
        let mut pre_r = conv2d(&input.residual, &self.kernels.r_to_r, self.stride, pad)?;
        pre_r.add_assign(&conv2d(&input.transient, &self.kernels.t_to_r, self.stride, pad)?)?;
        pre_r.add_assign(&self.shortcut.forward(&input.residual, out_split.residual, self.stride)?)?;
        let mut pre_t = conv2d(&input.residual, &self.kernels.r_to_t, self.stride, pad)?;
        pre_t.add_assign(&conv2d(&input.transient, &self.kernels.t_to_t, self.stride, pad)?)?;
        StreamPair::new(pre_r, pre_t)
    }

    pub fn backward(
        &self,
        input: &StreamPair<T>,
        grad_pre: &StreamPair<T>,
    ) -> Result<(StreamPair<T>, DualStreamGrads<T>)> {
        let pad = self.pad()?;
        let (mut grad_r, g_rr) = conv2d_backward(
            &input.residual,
            &self.kernels.r_to_r,
            self.stride,
            pad,
            &grad_pre.residual,
        )?;
        let (mut grad_t, g_tr) = conv2d_backward(
            &input.transient,
            &self.kernels.t_to_r,
            self.stride,
            pad,
            &grad_pre.residual,
        )?;
        let (g_r2, g_rt) = conv2d_backward(
            &input.residual,
            &self.kernels.r_to_t,
            self.stride,
            pad,
            &grad_pre.transient,
        )?;
        let (g_t2, g_tt) = conv2d_backward(
            &input.transient,
            &self.kernels.t_to_t,
            self.stride,
            pad,
            &grad_pre.transient,
        )?;
        grad_r.add_assign(&g_r2)?;
        grad_t.add_assign(&g_t2)?;
        let (g_sc, g_proj) = self.shortcut.backward(&input.residual, self.stride, &grad_pre.residual)?;
        grad_r.add_assign(&g_sc)?;
        Ok((
            StreamPair::new(grad_r, grad_t)?,
            DualStreamGrads {
                kernels: StreamKernels { r_to_r: g_rr, t_to_r: g_tr, r_to_t: g_rt, t_to_t: g_tt },
                projection: g_proj,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Fused layer (linear part)
// ---------------------------------------------------------------------------

/// How the fused layer realizes the residual-stream shortcut. The identity
/// can live inside the kernel only for stride-1, shape-preserving layers;
/// otherwise an explicit path feeds the residual output channels.
#[derive(Debug, Clone, PartialEq)]
pub enum FusedShortcut<T> {
    Embedded(IdentityMask),
    Pad,
    Projection(Tensor<T>),
}

/// Single-kernel form of the generalized residual layer.
#[derive(Debug, Clone)]
pub struct FusedConv<T> {
    pub weight: Tensor<T>,
    pub split_in: StreamSplit,
    pub split_out: StreamSplit,
    pub stride: usize,
    pub shortcut: FusedShortcut<T>,
}

#[derive(Debug, Clone)]
pub struct FusedGrads<T> {
    pub weight: Tensor<T>,
    pub projection: Option<Tensor<T>>,
}

impl<T: Scalar> FusedConv<T> {
    /// Builds the fused layer from explicit stream kernels, embedding the
    /// identity when the layer preserves shape, otherwise wiring the given
    /// explicit shortcut.
    pub fn from_kernels(
        kernels: &StreamKernels<T>,
        stride: usize,
        explicit: Option<Shortcut<T>>,
    ) -> Result<FusedConv<T>> {
        let (out, inp, kind) = kernels.layout()?;
        let embeddable = stride == 1 && out == inp;
        let shortcut = match explicit {
            None | Some(Shortcut::Identity) if embeddable => {
                FusedShortcut::Embedded(IdentityMask::for_kernel(inp, kind)?)
            }
            Some(Shortcut::Identity) => {
                return Err(RirError::config(
                    "identity shortcut needs stride 1 and matching splits".to_string(),
                ))
            }
            None | Some(Shortcut::Pad) => FusedShortcut::Pad,
            Some(Shortcut::Projection(k)) => FusedShortcut::Projection(k),
        };
        let weight = match &shortcut {
            FusedShortcut::Embedded(_) => fuse_kernels(kernels)?,
            _ => concat_kernels(kernels)?,
        };
        Ok(FusedConv { weight, split_in: inp, split_out: out, stride, shortcut })
    }

    pub fn kernel_extent(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn identity_mask(&self) -> Option<&IdentityMask> {
        match &self.shortcut {
            FusedShortcut::Embedded(m) => Some(m),
            _ => None,
        }
    }

    /// The learned stream blocks, with the identity removed when embedded.
    pub fn learned_kernels(&self) -> Result<StreamKernels<T>> {
        let mut w = self.weight.clone();
        if let FusedShortcut::Embedded(mask) = &self.shortcut {
            mask.subtract_from(&mut w);
        }
        crate::init::slice_kernels(&w, self.split_out, self.split_in)
    }

    /// Pre-activation (no sigma applied).
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pad = self.kernel_extent() / 2;
        let mut pre = conv2d(x, &self.weight, self.stride, pad)?;
        match &self.shortcut {
            FusedShortcut::Embedded(_) => {}
            FusedShortcut::Pad => {
                let r = channel_slice(x, 0, self.split_in.residual)?;
                let sc = Shortcut::<T>::Pad.forward(&r, self.split_out.residual, self.stride)?;
                add_to_channels(&mut pre, 0, &sc)?;
            }
            FusedShortcut::Projection(k) => {
                let r = channel_slice(x, 0, self.split_in.residual)?;
                let sc = conv2d(&r, k, self.stride, 1)?;
                add_to_channels(&mut pre, 0, &sc)?;
            }
        }
        Ok(pre)
    }

    pub fn backward(&self, x: &Tensor<T>, grad_pre: &Tensor<T>) -> Result<(Tensor<T>, FusedGrads<T>)> {
        let pad = self.kernel_extent() / 2;
        let (mut gx, gw) = conv2d_backward(x, &self.weight, self.stride, pad, grad_pre)?;
        let mut g_proj = None;
        match &self.shortcut {
            FusedShortcut::Embedded(_) => {}
            sc => {
                let g_r_out = channel_slice(grad_pre, 0, self.split_out.residual)?;
                let r = channel_slice(x, 0, self.split_in.residual)?;
                let (g_r, gp) = match sc {
                    FusedShortcut::Pad => Shortcut::<T>::Pad.backward(&r, self.stride, &g_r_out)?,
                    FusedShortcut::Projection(k) => {
                        let (gr, gk) = conv2d_backward(&r, k, self.stride, 1, &g_r_out)?;
                        (gr, Some(gk))
                    }
                    FusedShortcut::Embedded(_) => unreachable!(),
                };
                add_to_channels(&mut gx, 0, &g_r)?;
                g_proj = gp;
            }
        }
        Ok((gx, FusedGrads { weight: gw, projection: g_proj }))
    }

    /// Zeroes all learned outgoing connections of one stream (the fused
    /// kernel columns reading that stream). The non-learned identity path is
    /// preserved. Returns a modified copy.
    pub fn ablated(&self, stream: Stream) -> FusedConv<T> {
        let mut out = self.clone();
        let (f, c, kh, kw) = out.weight.dims4().expect("fused kernel is rank 4");
        let (c0, c1) = match stream {
            Stream::Residual => (0, self.split_in.residual),
            Stream::Transient => (self.split_in.residual, c),
        };
        for fi in 0..f {
            for ci in c0..c1 {
                let base = (fi * c + ci) * kh * kw;
                out.weight.data_mut()[base..base + kh * kw].fill(T::zero());
            }
        }
        if let FusedShortcut::Embedded(mask) = &out.shortcut {
            if stream == Stream::Residual {
                mask.clone().add_to(&mut out.weight);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// sigma = batchnorm then relu
// ---------------------------------------------------------------------------

pub struct SigmaCache<T> {
    bn: Option<BnCache<T>>,
    out: Tensor<T>,
}

/// Applies batch normalization (when present) then ReLU.
pub fn sigma_forward<T: Scalar>(
    bn: Option<&mut BatchNorm<T>>,
    pre: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, SigmaCache<T>)> {
    match bn {
        Some(bn) => {
            let (normed, cache) = bn.forward(pre, mode)?;
            let out = relu(&normed);
            Ok((out.clone(), SigmaCache { bn: Some(cache), out }))
        }
        None => {
            let out = relu(pre);
            Ok((out.clone(), SigmaCache { bn: None, out }))
        }
    }
}

/// Returns (grad_pre, per-channel (grad_gamma, grad_beta) when BN is present).
pub fn sigma_backward<T: Scalar>(
    bn: Option<&BatchNorm<T>>,
    cache: &SigmaCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    let g = relu_backward(&cache.out, grad_out);
    match (bn, &cache.bn) {
        (Some(bn), Some(bn_cache)) => {
            let (gx, gg, gb) = bn.backward(bn_cache, &g)?;
            Ok((gx, Some((gg, gb))))
        }
        (None, None) => Ok((g, None)),
        _ => Err(RirError::config("sigma cache does not match bn presence".to_string())),
    }
}

// ---------------------------------------------------------------------------
// Full layers (linear part + sigma), used by the equivalence checks
// ---------------------------------------------------------------------------

/// Unfused generalized residual layer with its normalization.
#[derive(Debug, Clone)]
pub struct GeneralizedLayer<T> {
    pub conv: DualStreamConv<T>,
    pub bn: Option<BatchNorm<T>>,
}

impl<T: Scalar> GeneralizedLayer<T> {
    pub fn forward(&mut self, input: &StreamPair<T>, mode: Mode) -> Result<StreamPair<T>> {
        let (out, _) = self.forward_traced(input, mode)?;
        Ok(out)
    }

    pub fn forward_traced(
        &mut self,
        input: &StreamPair<T>,
        mode: Mode,
    ) -> Result<(StreamPair<T>, SigmaCache<T>)> {
        let pre = self.conv.forward(input)?;
        let split = pre.split();
        let (out, cache) = sigma_forward(self.bn.as_mut(), &pre.concat()?, mode)?;
        Ok((StreamPair::from_concat(&out, split)?, cache))
    }

    /// Gradient w.r.t. the input pair; parameter gradients are returned too.
    pub fn backward(
        &self,
        input: &StreamPair<T>,
        cache: &SigmaCache<T>,
        grad_out: &StreamPair<T>,
    ) -> Result<(StreamPair<T>, DualStreamGrads<T>, Option<(Tensor<T>, Tensor<T>)>)> {
        let (grad_pre, bn_grads) = sigma_backward(self.bn.as_ref(), cache, &grad_out.concat()?)?;
        let (out_split, _, _) = self.conv.kernels.layout()?;
        let grad_pre_pair = StreamPair::from_concat(&grad_pre, out_split)?;
        let (grad_in, grads) = self.conv.backward(input, &grad_pre_pair)?;
        Ok((grad_in, grads, bn_grads))
    }
}

/// Fused generalized residual layer with its normalization.
#[derive(Debug, Clone)]
pub struct FusedLayer<T> {
    pub conv: FusedConv<T>,
    pub bn: Option<BatchNorm<T>>,
}

impl<T: Scalar> FusedLayer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (out, _) = self.forward_traced(x, mode)?;
        Ok(out)
    }

    pub fn forward_traced(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, SigmaCache<T>)> {
        let pre = self.conv.forward(x)?;
        let (out, cache) = sigma_forward(self.bn.as_mut(), &pre, mode)?;
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &SigmaCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, FusedGrads<T>, Option<(Tensor<T>, Tensor<T>)>)> {
        let (grad_pre, bn_grads) = sigma_backward(self.bn.as_ref(), cache, grad_out)?;
        let (gx, grads) = self.conv.backward(x, &grad_pre)?;
        Ok((gx, grads, bn_grads))
    }
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

/// One conv step inside a residual block. Plain layers are ordinary
/// convolutions; fused and dual-stream layers carry the generalized residual
/// update in single-kernel or four-kernel form.
#[derive(Debug, Clone)]
pub enum BlockLinear<T> {
    Plain { weight: Tensor<T>, stride: usize },
    Fused(FusedConv<T>),
    DualStream(DualStreamConv<T>),
}

impl<T: Scalar> BlockLinear<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            BlockLinear::Plain { weight, stride } => {
                conv2d(x, weight, *stride, weight.shape()[2] / 2)
            }
            BlockLinear::Fused(fc) => fc.forward(x),
            BlockLinear::DualStream(dsc) => {
                let (_, in_split, _) = dsc.kernels.layout()?;
                let pair = StreamPair::from_concat(x, in_split)?;
                dsc.forward(&pair)?.concat()
            }
        }
    }

    fn backward(&self, x: &Tensor<T>, grad_pre: &Tensor<T>) -> Result<(Tensor<T>, LinearGrads<T>)> {
        match self {
            BlockLinear::Plain { weight, stride } => {
                let (gx, gw) = conv2d_backward(x, weight, *stride, weight.shape()[2] / 2, grad_pre)?;
                Ok((gx, LinearGrads::Plain(gw)))
            }
            BlockLinear::Fused(fc) => {
                let (gx, g) = fc.backward(x, grad_pre)?;
                Ok((gx, LinearGrads::Fused(g)))
            }
            BlockLinear::DualStream(dsc) => {
                let (out_split, in_split, _) = dsc.kernels.layout()?;
                let pair = StreamPair::from_concat(x, in_split)?;
                let gpair = StreamPair::from_concat(grad_pre, out_split)?;
                let (gin, g) = dsc.backward(&pair, &gpair)?;
                Ok((gin.concat()?, LinearGrads::DualStream(g)))
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BlockLinear::Plain { weight, .. } => weight.shape()[0],
            BlockLinear::Fused(fc) => fc.split_out.total(),
            BlockLinear::DualStream(dsc) => {
                dsc.kernels.layout().map(|(o, _, _)| o.total()).unwrap_or(0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum LinearGrads<T> {
    Plain(Tensor<T>),
    Fused(FusedGrads<T>),
    DualStream(DualStreamGrads<T>),
}

/// One layer of a block: a linear step plus its sigma.
#[derive(Debug, Clone)]
pub struct BlockLayer<T> {
    pub linear: BlockLinear<T>,
    pub bn: Option<BatchNorm<T>>,
}

/// Block-level shortcut spanning all layers of a block, over the full
/// (both-stream) tensor; present in architectures with residual blocks.
#[derive(Debug, Clone)]
pub enum BlockShortcut<T> {
    Identity,
    Projection { weight: Tensor<T>, stride: usize },
}

impl<T: Scalar> BlockShortcut<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            BlockShortcut::Identity => Ok(x.clone()),
            BlockShortcut::Projection { weight, stride } => conv2d(x, weight, *stride, 1),
        }
    }

    fn backward(&self, x: &Tensor<T>, grad: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match self {
            BlockShortcut::Identity => Ok((grad.clone(), None)),
            BlockShortcut::Projection { weight, stride } => {
                let (gx, gw) = conv2d_backward(x, weight, *stride, 1, grad)?;
                Ok((gx, Some(gw)))
            }
        }
    }
}

/// A residual block: a chain of layers with an optional block-level shortcut
/// added to the last layer's pre-activation. Two plain layers with an
/// identity shortcut is the classic 2-layer block; fused layers inside the
/// same wiring give the nested dual-stream form.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub layers: Vec<BlockLayer<T>>,
    pub shortcut: Option<BlockShortcut<T>>,
}

pub struct BlockTrace<T> {
    /// Input to each layer's linear step (first entry is the block input).
    inputs: Vec<Tensor<T>>,
    sigmas: Vec<SigmaCache<T>>,
}

pub struct BlockGrads<T> {
    pub layers: Vec<LinearGrads<T>>,
    pub bns: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    pub shortcut: Option<Tensor<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, _) = self.forward_traced(x, mode)?;
        Ok(y)
    }

    pub fn forward_traced(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BlockTrace<T>)> {
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut sigmas = Vec::with_capacity(n_layers);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            inputs.push(h.clone());
            let mut pre = layer.linear.forward(&h)?;
            if i + 1 == n_layers {
                if let Some(sc) = &self.shortcut {
                    pre.add_assign(&sc.forward(x)?)?;
                }
            }
            let (out, cache) = sigma_forward(layer.bn.as_mut(), &pre, mode)?;
            sigmas.push(cache);
            h = out;
        }
        Ok((h, BlockTrace { inputs, sigmas }))
    }

    /// Returns (grad_input, parameter grads in layer order).
    pub fn backward(&self, trace: &BlockTrace<T>, grad_y: &Tensor<T>) -> Result<(Tensor<T>, BlockGrads<T>)> {
        let n_layers = self.layers.len();
        let mut layer_grads: Vec<Option<LinearGrads<T>>> = (0..n_layers).map(|_| None).collect();
        let mut bn_grads: Vec<Option<(Tensor<T>, Tensor<T>)>> = (0..n_layers).map(|_| None).collect();
        let mut shortcut_grad = None;
        let mut grad_from_shortcut: Option<Tensor<T>> = None;

        let mut g = grad_y.clone();
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let (grad_pre, bng) = sigma_backward(layer.bn.as_ref(), &trace.sigmas[i], &g)?;
            bn_grads[i] = bng;
            if i + 1 == n_layers {
                if let Some(sc) = &self.shortcut {
                    let (g_sc, g_w) = sc.backward(&trace.inputs[0], &grad_pre)?;
                    grad_from_shortcut = Some(g_sc);
                    shortcut_grad = g_w;
                }
            }
            let (gx, lg) = layer.linear.backward(&trace.inputs[i], &grad_pre)?;
            layer_grads[i] = Some(lg);
            g = gx;
        }
        if let Some(g_sc) = grad_from_shortcut {
            g.add_assign(&g_sc)?;
        }
        Ok((
            g,
            BlockGrads {
                layers: layer_grads.into_iter().map(|o| o.expect("filled in reverse pass")).collect(),
                bns: bn_grads,
                shortcut: shortcut_grad,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Constructive fixture: a plain 2-layer residual block out of two
// generalized layers with most connections zeroed
// ---------------------------------------------------------------------------

/// Builds two generalized layers that, cascaded on an input with r >= 0 and
/// t = 0 (sigma = plain ReLU), reproduce sigma(conv2(sigma(conv1(r))) + r)
/// exactly on the residual output. conv1 maps the residual channel count to
/// the transient one; conv2 maps back. The equality is specific to the
/// non-negative (post-ReLU) domain: negative residual entries break the
/// pass-through of layer 1 and are out of scope.
pub fn plain_block_emulation<T: Scalar>(
    conv1: &Tensor<T>,
    conv2: &Tensor<T>,
) -> Result<(GeneralizedLayer<T>, GeneralizedLayer<T>)> {
    let (n_t, n_r, k1, _) = conv1.dims4()?;
    let (c2_out, c2_in, k2, _) = conv2.dims4()?;
    if c2_out != n_r || c2_in != n_t || k1 != k2 {
        return Err(RirError::config(format!(
            "emulation kernels must chain r->t->r, got {:?} then {:?}",
            conv1.shape(),
            conv2.shape()
        )));
    }
    let zeros = |o: usize, i: usize| Tensor::zeros(&[o, i, k1, k1]);
    let layer1 = GeneralizedLayer {
        conv: DualStreamConv {
            kernels: StreamKernels {
                r_to_r: zeros(n_r, n_r),
                t_to_r: zeros(n_r, n_t),
                r_to_t: conv1.clone(),
                t_to_t: zeros(n_t, n_t),
            },
            stride: 1,
            shortcut: Shortcut::Identity,
        },
        bn: None,
    };
    let layer2 = GeneralizedLayer {
        conv: DualStreamConv {
            kernels: StreamKernels {
                r_to_r: zeros(n_r, n_r),
                t_to_r: conv2.clone(),
                r_to_t: zeros(n_t, n_r),
                t_to_t: zeros(n_t, n_t),
            },
            stride: 1,
            shortcut: Shortcut::Identity,
        },
        bn: None,
    };
    Ok((layer1, layer2))
}
