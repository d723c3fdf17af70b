use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, BnCache};
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Extra bridges from each pooled encoder output to the matching decoder
    /// input before upsampling.
    DualFrame,
    /// Classic U-Net with concatenated skips only.
    Standard,
}

/// How a dual-frame bridge joins the decoder stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeCombine {
    /// Sum, with a 1x1 projection when channel counts differ.
    Add,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub variant: Variant,
    pub bridge_combine: BridgeCombine,
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 8,
            variant: Variant::DualFrame,
            bridge_combine: BridgeCombine::Add,
            input_size: 128,
        }
    }
}

impl UNetConfig {
    /// Base 64, doubling to 1024 channels at the bottleneck, 512x512 input.
    pub fn full_scale() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 64,
            variant: Variant::DualFrame,
            bridge_combine: BridgeCombine::Add,
            input_size: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::InvalidConfig(format!("bad depth {}", self.depth)));
        }
        let unit = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return Err(Error::InvalidConfig(format!(
                "input size {} is not divisible by 2^{} = {unit}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Feature channels at `level`; `level == depth` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn bridge_projects(&self) -> bool {
        self.variant == Variant::DualFrame && self.bridge_combine == BridgeCombine::Add
    }

    /// Channels entering the upsampler of decoder `level`.
    fn pre_upsample_channels(&self, level: usize) -> usize {
        let below = self.channels(level + 1);
        match (self.variant, self.bridge_combine) {
            (Variant::DualFrame, BridgeCombine::Concat) => below + self.channels(level),
            _ => below,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// 3x3 convolution, batch norm, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv<T> {
    pub first: ConvBn<T>,
    pub second: ConvBn<T>,
}

/// All network tensors. Also used as the gradient container, where the
/// running statistics stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T> {
    pub encoders: Vec<DoubleConv<T>>,
    pub bottleneck: DoubleConv<T>,
    /// Per level; `Some` only for additive dual-frame bridges.
    pub bridges: Vec<Option<Conv<T>>>,
    pub decoders: Vec<DoubleConv<T>>,
    pub head: Conv<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Learnable,
    RunningStat,
}

impl<T: Scalar> Conv<T> {
    fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv {
            in_ch,
            out_ch,
            kernel,
            weight: vec![T::zero(); out_ch * in_ch * kernel * kernel],
            bias: vec![T::zero(); out_ch],
        }
    }

    fn forward(&self, x: &Tensor4<T>) -> Tensor4<T> {
        layers::conv_forward(x, &self.weight, &self.bias, self.out_ch, self.kernel)
    }

    fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        out_ch * in_ch * kernel * kernel + out_ch
    }
}

impl<T: Scalar> BatchNorm<T> {
    fn new(ch: usize, zero: bool) -> Self {
        let one = if zero { T::zero() } else { T::one() };
        BatchNorm {
            gamma: vec![one; ch],
            beta: vec![T::zero(); ch],
            running_mean: vec![T::zero(); ch],
            running_var: vec![one; ch],
        }
    }
}

impl<T: Scalar> ConvBn<T> {
    fn new(in_ch: usize, out_ch: usize, zero: bool) -> Self {
        ConvBn {
            conv: Conv::zeros(in_ch, out_ch, 3),
            bn: BatchNorm::new(out_ch, zero),
        }
    }

    fn param_count(in_ch: usize, out_ch: usize) -> usize {
        Conv::<T>::param_count(in_ch, out_ch, 3) + 2 * out_ch
    }
}

impl<T: Scalar> DoubleConv<T> {
    fn new(in_ch: usize, out_ch: usize, zero: bool) -> Self {
        DoubleConv {
            first: ConvBn::new(in_ch, out_ch, zero),
            second: ConvBn::new(out_ch, out_ch, zero),
        }
    }

    fn param_count(in_ch: usize, out_ch: usize) -> usize {
        ConvBn::<T>::param_count(in_ch, out_ch) + ConvBn::<T>::param_count(out_ch, out_ch)
    }
}

pub type Entry<'a, T> = (String, TensorKind, &'a Vec<T>);
pub type EntryMut<'a, T> = (String, TensorKind, &'a mut Vec<T>);

impl<T> Conv<T> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<Entry<'a, T>>) {
        out.push((
            format!("{name}.weight"),
            TensorKind::Learnable,
            &self.weight,
        ));
        out.push((format!("{name}.bias"), TensorKind::Learnable, &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<EntryMut<'a, T>>) {
        out.push((
            format!("{name}.weight"),
            TensorKind::Learnable,
            &mut self.weight,
        ));
        out.push((
            format!("{name}.bias"),
            TensorKind::Learnable,
            &mut self.bias,
        ));
    }
}

impl<T> ConvBn<T> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<Entry<'a, T>>) {
        self.conv.visit(&format!("{name}.conv"), out);
        let bn = &self.bn;
        out.push((format!("{name}.bn.gamma"), TensorKind::Learnable, &bn.gamma));
        out.push((format!("{name}.bn.beta"), TensorKind::Learnable, &bn.beta));
        out.push((
            format!("{name}.bn.running_mean"),
            TensorKind::RunningStat,
            &bn.running_mean,
        ));
        out.push((
            format!("{name}.bn.running_var"),
            TensorKind::RunningStat,
            &bn.running_var,
        ));
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<EntryMut<'a, T>>) {
        self.conv.visit_mut(&format!("{name}.conv"), out);
        let bn = &mut self.bn;
        out.push((
            format!("{name}.bn.gamma"),
            TensorKind::Learnable,
            &mut bn.gamma,
        ));
        out.push((
            format!("{name}.bn.beta"),
            TensorKind::Learnable,
            &mut bn.beta,
        ));
        out.push((
            format!("{name}.bn.running_mean"),
            TensorKind::RunningStat,
            &mut bn.running_mean,
        ));
        out.push((
            format!("{name}.bn.running_var"),
            TensorKind::RunningStat,
            &mut bn.running_var,
        ));
    }
}

impl<T> DoubleConv<T> {
    fn visit<'a>(&'a self, name: &str, out: &mut Vec<Entry<'a, T>>) {
        self.first.visit(&format!("{name}.conv1"), out);
        self.second.visit(&format!("{name}.conv2"), out);
    }

    fn visit_mut<'a>(&'a mut self, name: &str, out: &mut Vec<EntryMut<'a, T>>) {
        self.first.visit_mut(&format!("{name}.conv1"), out);
        self.second.visit_mut(&format!("{name}.conv2"), out);
    }
}

impl<T: Scalar> UNetParams<T> {
    fn layout(cfg: &UNetConfig, zero: bool) -> Self {
        let d = cfg.depth;
        let encoders = (0..d)
            .map(|l| {
                let in_ch = if l == 0 { 1 } else { cfg.channels(l - 1) };
                DoubleConv::new(in_ch, cfg.channels(l), zero)
            })
            .collect();
        let bottleneck = DoubleConv::new(cfg.channels(d - 1), cfg.channels(d), zero);
        let bridges = (0..d)
            .map(|l| {
                (cfg.bridge_projects() && cfg.channels(l) != cfg.channels(l + 1))
                    .then(|| Conv::zeros(cfg.channels(l), cfg.channels(l + 1), 1))
            })
            .collect();
        let decoders = (0..d)
            .map(|l| {
                DoubleConv::new(
                    cfg.pre_upsample_channels(l) + cfg.channels(l),
                    cfg.channels(l),
                    zero,
                )
            })
            .collect();
        UNetParams {
            encoders,
            bottleneck,
            bridges,
            decoders,
            head: Conv::zeros(cfg.channels(0), 1, 1),
        }
    }

    /// All-zero tensors shaped like `cfg` (gradient accumulator).
    pub fn zeros_like(cfg: &UNetConfig) -> Self {
        Self::layout(cfg, true)
    }

    /// Every tensor in checkpoint order: encoders shallow to deep, the
    /// bottleneck, decoders deep to shallow (each preceded by its bridge
    /// projection), then the 1x1 head. Within a conv+BN unit: weight, bias,
    /// gamma, beta, running mean, running variance.
    pub fn tensors(&self) -> Vec<Entry<'_, T>> {
        let mut out = Vec::new();
        for (l, enc) in self.encoders.iter().enumerate() {
            enc.visit(&format!("enc{l}"), &mut out);
        }
        self.bottleneck.visit("bottleneck", &mut out);
        for (l, (bridge, dec)) in self.bridges.iter().zip(&self.decoders).enumerate().rev() {
            if let Some(b) = bridge {
                b.visit(&format!("bridge{l}"), &mut out);
            }
            dec.visit(&format!("dec{l}"), &mut out);
        }
        self.head.visit("head", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<EntryMut<'_, T>> {
        let mut out = Vec::new();
        for (l, enc) in self.encoders.iter_mut().enumerate() {
            enc.visit_mut(&format!("enc{l}"), &mut out);
        }
        self.bottleneck.visit_mut("bottleneck", &mut out);
        for (l, (bridge, dec)) in self
            .bridges
            .iter_mut()
            .zip(&mut self.decoders)
            .enumerate()
            .rev()
        {
            if let Some(b) = bridge {
                b.visit_mut(&format!("bridge{l}"), &mut out);
            }
            dec.visit_mut(&format!("dec{l}"), &mut out);
        }
        self.head.visit_mut("head", &mut out);
        out
    }

    pub fn learnable(&self) -> Vec<&Vec<T>> {
        self.tensors()
            .into_iter()
            .filter(|(_, k, _)| *k == TensorKind::Learnable)
            .map(|(_, _, t)| t)
            .collect()
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.tensors_mut()
            .into_iter()
            .filter(|(_, k, _)| *k == TensorKind::Learnable)
            .map(|(_, _, t)| t)
            .collect()
    }

    pub fn learnable_count(&self) -> usize {
        self.learnable().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetParams<U> {
        let conv = |c: &Conv<T>| Conv {
            in_ch: c.in_ch,
            out_ch: c.out_ch,
            kernel: c.kernel,
            weight: c.weight.iter().map(|v| U::of(v.f64())).collect(),
            bias: c.bias.iter().map(|v| U::of(v.f64())).collect(),
        };
        let v = |x: &Vec<T>| x.iter().map(|v| U::of(v.f64())).collect::<Vec<U>>();
        let cb = |c: &ConvBn<T>| ConvBn {
            conv: conv(&c.conv),
            bn: BatchNorm {
                gamma: v(&c.bn.gamma),
                beta: v(&c.bn.beta),
                running_mean: v(&c.bn.running_mean),
                running_var: v(&c.bn.running_var),
            },
        };
        let dc = |d: &DoubleConv<T>| DoubleConv {
            first: cb(&d.first),
            second: cb(&d.second),
        };
        UNetParams {
            encoders: self.encoders.iter().map(dc).collect(),
            bottleneck: dc(&self.bottleneck),
            bridges: self.bridges.iter().map(|b| b.as_ref().map(conv)).collect(),
            decoders: self.decoders.iter().map(dc).collect(),
            head: conv(&self.head),
        }
    }

    fn check_matches(&self, cfg: &UNetConfig) -> Result<()> {
        let reference = Self::layout(cfg, true);
        let ours: Vec<_> = self
            .tensors()
            .iter()
            .map(|(n, _, t)| (n.clone(), t.len()))
            .collect();
        let want: Vec<_> = reference
            .tensors()
            .iter()
            .map(|(n, _, t)| (n.clone(), t.len()))
            .collect();
        if ours != want {
            return Err(Error::ShapeMismatch(
                "parameters do not match the network configuration".into(),
            ));
        }
        Ok(())
    }
}

/// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases, BN scale 1,
/// shift 0, running statistics `(0, 1)`. Deterministic per seed.
///
/// The final 1x1 kernel starts at zero, so an untrained network predicts a
/// zero residual and leaves its input unchanged.
pub fn init_unet<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Result<UNetParams<T>> {
    cfg.validate()?;
    let mut params = UNetParams::<T>::layout(cfg, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |conv: &mut Conv<T>| {
        let fan_in = (conv.in_ch * conv.kernel * conv.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        for w in conv.weight.iter_mut() {
            *w = T::of(normal.sample(&mut rng));
        }
    };
    let UNetParams {
        encoders,
        bottleneck,
        bridges,
        decoders,
        head,
    } = &mut params;
    for enc in encoders.iter_mut() {
        fill(&mut enc.first.conv);
        fill(&mut enc.second.conv);
    }
    fill(&mut bottleneck.first.conv);
    fill(&mut bottleneck.second.conv);
    for (bridge, dec) in bridges.iter_mut().zip(decoders.iter_mut()).rev() {
        if let Some(b) = bridge {
            fill(b);
        }
        fill(&mut dec.first.conv);
        fill(&mut dec.second.conv);
    }
    head.weight.iter_mut().for_each(|w| *w = T::zero());
    Ok(params)
}

/// Learnable scalars: kernels, biases and BN scale/shift. Running
/// statistics are excluded.
pub fn count_params(cfg: &UNetConfig) -> usize {
    let d = cfg.depth;
    let mut total = 0;
    for l in 0..d {
        let in_ch = if l == 0 { 1 } else { cfg.channels(l - 1) };
        total += DoubleConv::<f32>::param_count(in_ch, cfg.channels(l));
    }
    total += DoubleConv::<f32>::param_count(cfg.channels(d - 1), cfg.channels(d));
    for l in 0..d {
        if cfg.bridge_projects() && cfg.channels(l) != cfg.channels(l + 1) {
            total += Conv::<f32>::param_count(cfg.channels(l), cfg.channels(l + 1), 1);
        }
        total += DoubleConv::<f32>::param_count(
            cfg.pre_upsample_channels(l) + cfg.channels(l),
            cfg.channels(l),
        );
    }
    total + Conv::<f32>::param_count(cfg.channels(0), 1, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics get updated.
    Train,
    /// Running statistics.
    Eval,
}

struct ConvBnCache<T> {
    input: Tensor4<T>,
    bn: BnCache<T>,
    out: Tensor4<T>,
}

struct DoubleCache<T> {
    first: ConvBnCache<T>,
    second: ConvBnCache<T>,
}

impl<T> DoubleCache<T> {
    fn output(&self) -> &Tensor4<T> {
        &self.second.out
    }
}

struct PoolCache<T> {
    argmax: Vec<u8>,
    input_shape: [usize; 4],
    output: Tensor4<T>,
}

/// Activations recorded by [`forward`] for the backward pass.
pub struct ForwardCache<T> {
    mode: Mode,
    input_shape: [usize; 4],
    encoders: Vec<DoubleCache<T>>,
    pools: Vec<PoolCache<T>>,
    bottleneck: DoubleCache<T>,
    /// Channels of the decoder stream before the bridge joins, per level.
    stream_channels: Vec<usize>,
    /// Channels produced by the upsampler, per level.
    upsampled_channels: Vec<usize>,
    decoders: Vec<DoubleCache<T>>,
    head_input: Tensor4<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch `(mean, variance)` of every BN layer in checkpoint order.
    pub fn batch_stats(&self) -> Vec<(&[f64], &[f64])> {
        let blocks = self
            .encoders
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoders.iter().rev());
        blocks
            .flat_map(|c| [&c.first.bn, &c.second.bn])
            .map(|bn| (&bn.batch_mean[..], &bn.batch_var[..]))
            .collect()
    }
}

fn convbn_forward<T: Scalar>(p: &ConvBn<T>, x: &Tensor4<T>, mode: Mode) -> ConvBnCache<T> {
    let z = p.conv.forward(x);
    let running = match mode {
        Mode::Train => None,
        Mode::Eval => Some((&p.bn.running_mean[..], &p.bn.running_var[..])),
    };
    let (y, bn) = layers::bn_forward(&z, &p.bn.gamma, &p.bn.beta, running);
    ConvBnCache {
        input: x.clone(),
        bn,
        out: layers::relu_forward(&y),
    }
}

fn double_forward<T: Scalar>(p: &DoubleConv<T>, x: &Tensor4<T>, mode: Mode) -> DoubleCache<T> {
    let first = convbn_forward(&p.first, x, mode);
    let second = convbn_forward(&p.second, &first.out, mode);
    DoubleCache { first, second }
}

/// Network forward pass. Returns the predicted residual (one channel, same
/// spatial size as the input) and the activations needed by [`backward`].
///
/// Running statistics are not touched here; see [`unet_forward`].
pub fn forward<T: Scalar>(
    params: &UNetParams<T>,
    cfg: &UNetConfig,
    x: &Tensor4<T>,
    mode: Mode,
) -> Result<(Tensor4<T>, ForwardCache<T>)> {
    cfg.validate()?;
    params.check_matches(cfg)?;
    let [n, c, h, w] = x.shape();
    if c != 1 || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::ShapeMismatch(format!(
            "network expects [N, 1, {0}, {0}], got {1:?}",
            cfg.input_size,
            x.shape()
        )));
    }
    let d = cfg.depth;
    let mut encoders = Vec::with_capacity(d);
    let mut pools = Vec::with_capacity(d);
    let mut cur = x.clone();
    for enc in &params.encoders {
        let cache = double_forward(enc, &cur, mode);
        let (pooled, argmax) = layers::maxpool_forward(cache.output());
        pools.push(PoolCache {
            argmax,
            input_shape: cache.output().shape(),
            output: pooled.clone(),
        });
        encoders.push(cache);
        cur = pooled;
    }
    let bottleneck = double_forward(&params.bottleneck, &cur, mode);
    let mut cur = bottleneck.output().clone();

    let mut decoders: Vec<Option<DoubleCache<T>>> = (0..d).map(|_| None).collect();
    let mut stream_channels = vec![0; d];
    let mut upsampled_channels = vec![0; d];
    for l in (0..d).rev() {
        stream_channels[l] = cur.channels();
        let pooled = &pools[l].output;
        let joined = match (cfg.variant, cfg.bridge_combine) {
            (Variant::Standard, _) => cur,
            (Variant::DualFrame, BridgeCombine::Add) => match &params.bridges[l] {
                Some(proj) => layers::add(&cur, &proj.forward(pooled)),
                None => layers::add(&cur, pooled),
            },
            (Variant::DualFrame, BridgeCombine::Concat) => layers::concat(&cur, pooled),
        };
        let up = layers::upsample_forward(&joined);
        upsampled_channels[l] = up.channels();
        let merged = layers::concat(&up, encoders[l].output());
        let cache = double_forward(&params.decoders[l], &merged, mode);
        cur = cache.output().clone();
        decoders[l] = Some(cache);
    }
    let out = params.head.forward(&cur);
    if !out.is_finite() {
        return Err(Error::Numeric(
            "non-finite activations in forward pass".into(),
        ));
    }
    let _ = n;
    Ok((
        out,
        ForwardCache {
            mode,
            input_shape: x.shape(),
            encoders,
            pools,
            bottleneck,
            stream_channels,
            upsampled_channels,
            decoders: decoders.into_iter().map(|c| c.expect("filled")).collect(),
            head_input: cur,
        },
    ))
}

/// Exponential moving average factor for BN running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Folds the batch statistics of a train-mode pass into the running ones.
pub fn update_running_stats<T: Scalar>(params: &mut UNetParams<T>, cache: &ForwardCache<T>) {
    if cache.mode != Mode::Train {
        return;
    }
    let stats = cache.batch_stats();
    let mut tensors = params
        .tensors_mut()
        .into_iter()
        .filter(|(_, k, _)| *k == TensorKind::RunningStat);
    for (mean, var) in stats {
        let (_, _, rm) = tensors.next().expect("running mean");
        for (r, &m) in rm.iter_mut().zip(mean) {
            *r = T::of(BN_MOMENTUM * r.f64() + (1.0 - BN_MOMENTUM) * m);
        }
        let (_, _, rv) = tensors.next().expect("running var");
        for (r, &v) in rv.iter_mut().zip(var) {
            *r = T::of(BN_MOMENTUM * r.f64() + (1.0 - BN_MOMENTUM) * v);
        }
    }
}

/// Forward pass that also updates BN running statistics in train mode.
pub fn unet_forward<T: Scalar>(
    params: &mut UNetParams<T>,
    cfg: &UNetConfig,
    x: &Tensor4<T>,
    mode: Mode,
) -> Result<(Tensor4<T>, ForwardCache<T>)> {
    let (out, cache) = forward(params, cfg, x, mode)?;
    update_running_stats(params, &cache);
    Ok((out, cache))
}

fn convbn_backward<T: Scalar>(
    p: &ConvBn<T>,
    g: &mut ConvBn<T>,
    cache: &ConvBnCache<T>,
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let g_relu = layers::relu_backward(&cache.out, grad_out);
    let bn = layers::bn_backward(&cache.bn, &p.bn.gamma, &g_relu);
    accumulate(&mut g.bn.gamma, &bn.gamma);
    accumulate(&mut g.bn.beta, &bn.beta);
    let conv = layers::conv_backward(&cache.input, &p.conv.weight, p.conv.out_ch, 3, &bn.input);
    accumulate(&mut g.conv.weight, &conv.weight);
    accumulate(&mut g.conv.bias, &conv.bias);
    conv.input
}

fn double_backward<T: Scalar>(
    p: &DoubleConv<T>,
    g: &mut DoubleConv<T>,
    cache: &DoubleCache<T>,
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let mid = convbn_backward(&p.second, &mut g.second, &cache.second, grad_out);
    convbn_backward(&p.first, &mut g.first, &cache.first, &mid)
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of every learnable tensor given `dL/d(output)`.
pub fn backward<T: Scalar>(
    params: &UNetParams<T>,
    cfg: &UNetConfig,
    cache: &ForwardCache<T>,
    grad_out: &Tensor4<T>,
) -> Result<UNetParams<T>> {
    if cache.mode != Mode::Train {
        return Err(Error::InvalidArgument(
            "backward needs a train-mode forward cache".into(),
        ));
    }
    params.check_matches(cfg)?;
    if cache.encoders.len() != cfg.depth {
        return Err(Error::ShapeMismatch(
            "cache depth differs from config".into(),
        ));
    }
    let [n, _, h, w] = cache.input_shape;
    grad_out.require_shape([n, 1, h, w], "output gradient")?;

    let d = cfg.depth;
    let mut grads = UNetParams::<T>::zeros_like(cfg);

    let head = layers::conv_backward(&cache.head_input, &params.head.weight, 1, 1, grad_out);
    accumulate(&mut grads.head.weight, &head.weight);
    accumulate(&mut grads.head.bias, &head.bias);

    let mut g_stream = head.input;
    let mut g_skip: Vec<Option<Tensor4<T>>> = (0..d).map(|_| None).collect();
    let mut g_pooled: Vec<Option<Tensor4<T>>> = (0..d).map(|_| None).collect();
    for l in 0..d {
        let g_merged = double_backward(
            &params.decoders[l],
            &mut grads.decoders[l],
            &cache.decoders[l],
            &g_stream,
        );
        let (g_up, g_enc) = layers::split(&g_merged, cache.upsampled_channels[l]);
        g_skip[l] = Some(g_enc);
        let g_joined = layers::upsample_backward(&g_up);
        let pooled = &cache.pools[l].output;
        g_stream = match (cfg.variant, cfg.bridge_combine) {
            (Variant::Standard, _) => g_joined,
            (Variant::DualFrame, BridgeCombine::Add) => {
                g_pooled[l] = Some(match &params.bridges[l] {
                    Some(proj) => {
                        let gb =
                            layers::conv_backward(pooled, &proj.weight, proj.out_ch, 1, &g_joined);
                        let slot = grads.bridges[l].as_mut().expect("bridge grads");
                        accumulate(&mut slot.weight, &gb.weight);
                        accumulate(&mut slot.bias, &gb.bias);
                        gb.input
                    }
                    None => g_joined.clone(),
                });
                g_joined
            }
            (Variant::DualFrame, BridgeCombine::Concat) => {
                let (g_s, g_p) = layers::split(&g_joined, cache.stream_channels[l]);
                g_pooled[l] = Some(g_p);
                g_s
            }
        };
    }

    let mut g_cur = double_backward(
        &params.bottleneck,
        &mut grads.bottleneck,
        &cache.bottleneck,
        &g_stream,
    );
    for l in (0..d).rev() {
        if let Some(extra) = &g_pooled[l] {
            layers::add_assign(&mut g_cur, extra);
        }
        let pool = &cache.pools[l];
        let mut g_enc = layers::maxpool_backward(&pool.argmax, pool.input_shape, &g_cur);
        if let Some(skip) = &g_skip[l] {
            layers::add_assign(&mut g_enc, skip);
        }
        g_cur = double_backward(
            &params.encoders[l],
            &mut grads.encoders[l],
            &cache.encoders[l],
            &g_enc,
        );
    }
    Ok(grads)
}
