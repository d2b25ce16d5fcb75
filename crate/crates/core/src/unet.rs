//! The three 3D U-Net variants assembled from the nn kernels, with
//! whole-network forward/backward passes and a deterministic parameter
//! registry (the checkpoint and optimizer ordering contract).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{self, ConvWeights, Mode, NormCache, NormState};
use crate::tensor::{Scalar, Tensor5};

/// Which convolutional-module design the network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantKind {
    /// conv -> batch norm -> ReLU.
    ConvBnRelu,
    /// conv -> ReLU -> group norm.
    ConvReluGn,
    /// Three conv -> group norm -> ReLU stages with an identity skip from the
    /// module input added before the final ReLU (1x1x1 projection when the
    /// channel counts differ).
    ResidualSymmetric,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] =
        [VariantKind::ConvBnRelu, VariantKind::ConvReluGn, VariantKind::ResidualSymmetric];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::ConvBnRelu => "conv_bn_relu",
            VariantKind::ConvReluGn => "conv_relu_gn",
            VariantKind::ResidualSymmetric => "residual_symmetric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv_bn_relu" => Ok(VariantKind::ConvBnRelu),
            "conv_relu_gn" => Ok(VariantKind::ConvReluGn),
            "residual_symmetric" => Ok(VariantKind::ResidualSymmetric),
            other => Err(Error::Config(format!(
                "unknown variant '{}', expected conv_bn_relu | conv_relu_gn | residual_symmetric",
                other
            ))),
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder depth including the deepest (non-pooled) level.
    pub levels: usize,
    /// Channels of the first encoder level; doubles per level.
    pub base_channels: usize,
    pub variant: VariantKind,
    pub gn_channels_per_group: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 2,
            levels: 4,
            base_channels: 32,
            variant: VariantKind::ConvBnRelu,
            gn_channels_per_group: 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.gn_channels_per_group == 0 {
            return Err(Error::Config("gn_channels_per_group must be >= 1".into()));
        }
        let deepest = self
            .base_channels
            .checked_shl(self.levels as u32 - 1)
            .ok_or_else(|| Error::Config("deepest channel count overflows".into()))?;
        if deepest > 1 << 20 {
            return Err(Error::Config(format!("deepest channel count {} is unreasonably large", deepest)));
        }
        for lvl in 0..self.levels {
            let c = self.base_channels << lvl;
            if self.variant != VariantKind::ConvBnRelu && c % self.gn_channels_per_group != 0 {
                return Err(Error::Config(format!(
                    "gn_channels_per_group {} does not divide level channel count {}",
                    self.gn_channels_per_group, c
                )));
            }
        }
        Ok(())
    }

    /// Channel count of encoder level `lvl`.
    fn channels(&self, lvl: usize) -> usize {
        self.base_channels << lvl
    }

    /// Input spatial extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// One learnable tensor or one non-learnable state buffer of the registry,
/// visited in a fixed order.
pub struct TensorEntry<'a, T> {
    pub name: String,
    /// Learnable entries carry their gradient accumulator; buffers (batch
    /// norm running statistics) do not.
    pub grad: Option<&'a mut [T]>,
    pub value: &'a mut [T],
    /// Whether weight decay applies (conv kernels only; biases and
    /// normalization parameters are excluded).
    pub decay: bool,
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct Conv3dLayer<T> {
    w: Tensor5<T>,
    b: Vec<T>,
    gw: Tensor5<T>,
    gb: Vec<T>,
    padding: [usize; 3],
    cache: Option<Tensor5<T>>,
}

impl<T: Scalar> Conv3dLayer<T> {
    fn init(c_in: usize, c_out: usize, k: usize, padding: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        // He-normal: std = sqrt(2 / fan_in), zero bias.
        let fan_in = (c_in * k * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data: Vec<T> =
            (0..c_out * c_in * k * k * k).map(|_| T::from_f64_c(normal.sample(rng))).collect();
        Self {
            w: Tensor5::from_vec([c_out, c_in, k, k, k], data).unwrap(),
            b: vec![T::zero(); c_out],
            gw: Tensor5::zeros([c_out, c_in, k, k, k]),
            gb: vec![T::zero(); c_out],
            padding,
            cache: None,
        }
    }

    fn weights(&self) -> ConvWeights<T> {
        ConvWeights { weight: self.w.clone(), bias: self.b.clone() }
    }

    fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        let out = nn::conv3d(x, &self.weights(), self.padding, [1, 1, 1])?;
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor5<T>) -> Result<Tensor5<T>> {
        let x = self.cache.take().ok_or_else(|| {
            Error::Data("backward without a matching train-mode forward (conv)".into())
        })?;
        let (gi, gw) = nn::conv3d_grad(&x, &self.weights(), self.padding, [1, 1, 1], upstream)?;
        for (a, b) in self.gw.data_mut().iter_mut().zip(gw.weight.data()) {
            *a = *a + *b;
        }
        for (a, b) in self.gb.iter_mut().zip(&gw.bias) {
            *a = *a + *b;
        }
        Ok(gi)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(TensorEntry<'_, T>)) {
        f(TensorEntry {
            name: format!("{prefix}.weight"),
            grad: Some(self.gw.data_mut()),
            value: self.w.data_mut(),
            decay: true,
        });
        f(TensorEntry {
            name: format!("{prefix}.bias"),
            grad: Some(&mut self.gb),
            value: &mut self.b,
            decay: false,
        });
    }
}

#[derive(Clone, Debug)]
struct TransposedConv3dLayer<T> {
    w: Tensor5<T>,
    b: Vec<T>,
    gw: Tensor5<T>,
    gb: Vec<T>,
    cache: Option<Tensor5<T>>,
}

impl<T: Scalar> TransposedConv3dLayer<T> {
    fn init(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * 8) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let data: Vec<T> = (0..c_out * c_in * 8).map(|_| T::from_f64_c(normal.sample(rng))).collect();
        Self {
            w: Tensor5::from_vec([c_out, c_in, 2, 2, 2], data).unwrap(),
            b: vec![T::zero(); c_out],
            gw: Tensor5::zeros([c_out, c_in, 2, 2, 2]),
            gb: vec![T::zero(); c_out],
            cache: None,
        }
    }

    fn weights(&self) -> ConvWeights<T> {
        ConvWeights { weight: self.w.clone(), bias: self.b.clone() }
    }

    fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        let out = nn::transposed_conv3d(x, &self.weights())?;
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor5<T>) -> Result<Tensor5<T>> {
        let x = self.cache.take().ok_or_else(|| {
            Error::Data("backward without a matching train-mode forward (transposed conv)".into())
        })?;
        let (gi, gw) = nn::transposed_conv3d_grad(&x, &self.weights(), upstream)?;
        for (a, b) in self.gw.data_mut().iter_mut().zip(gw.weight.data()) {
            *a = *a + *b;
        }
        for (a, b) in self.gb.iter_mut().zip(&gw.bias) {
            *a = *a + *b;
        }
        Ok(gi)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(TensorEntry<'_, T>)) {
        f(TensorEntry {
            name: format!("{prefix}.weight"),
            grad: Some(self.gw.data_mut()),
            value: self.w.data_mut(),
            decay: true,
        });
        f(TensorEntry {
            name: format!("{prefix}.bias"),
            grad: Some(&mut self.gb),
            value: &mut self.b,
            decay: false,
        });
    }
}

#[derive(Clone, Debug)]
struct BatchNormLayer<T> {
    state: NormState<T>,
    ggamma: Vec<T>,
    gbeta: Vec<T>,
    cache: Option<NormCache<T>>,
}

impl<T: Scalar> BatchNormLayer<T> {
    fn init(c: usize) -> Self {
        Self {
            state: NormState::new(c, BN_MOMENTUM, BN_EPS, 1),
            ggamma: vec![T::zero(); c],
            gbeta: vec![T::zero(); c],
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        let (out, cache) = nn::batchnorm3d(x, &mut self.state, mode)?;
        if mode == Mode::Train {
            self.cache = cache;
        }
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor5<T>) -> Result<Tensor5<T>> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::Data("backward without a matching train-mode forward (batch norm)".into())
        })?;
        let (gi, ggamma, gbeta) = nn::batchnorm3d_grad(&cache, upstream)?;
        for (a, b) in self.ggamma.iter_mut().zip(&ggamma) {
            *a = *a + *b;
        }
        for (a, b) in self.gbeta.iter_mut().zip(&gbeta) {
            *a = *a + *b;
        }
        Ok(gi)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(TensorEntry<'_, T>)) {
        f(TensorEntry {
            name: format!("{prefix}.gamma"),
            grad: Some(&mut self.ggamma),
            value: &mut self.state.gamma,
            decay: false,
        });
        f(TensorEntry {
            name: format!("{prefix}.beta"),
            grad: Some(&mut self.gbeta),
            value: &mut self.state.beta,
            decay: false,
        });
        f(TensorEntry {
            name: format!("{prefix}.running_mean"),
            grad: None,
            value: &mut self.state.running_mean,
            decay: false,
        });
        f(TensorEntry {
            name: format!("{prefix}.running_var"),
            grad: None,
            value: &mut self.state.running_var,
            decay: false,
        });
    }
}

#[derive(Clone, Debug)]
struct GroupNormLayer<T> {
    state: NormState<T>,
    ggamma: Vec<T>,
    gbeta: Vec<T>,
    cache: Option<NormCache<T>>,
}

impl<T: Scalar> GroupNormLayer<T> {
    fn init(c: usize, channels_per_group: usize) -> Self {
        Self {
            state: NormState::new(c, BN_MOMENTUM, GN_EPS, channels_per_group),
            ggamma: vec![T::zero(); c],
            gbeta: vec![T::zero(); c],
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        let (out, cache) = nn::groupnorm3d(x, &self.state)?;
        if mode == Mode::Train {
            self.cache = Some(cache);
        }
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor5<T>) -> Result<Tensor5<T>> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::Data("backward without a matching train-mode forward (group norm)".into())
        })?;
        let (gi, ggamma, gbeta) = nn::groupnorm3d_grad(&cache, upstream)?;
        for (a, b) in self.ggamma.iter_mut().zip(&ggamma) {
            *a = *a + *b;
        }
        for (a, b) in self.gbeta.iter_mut().zip(&gbeta) {
            *a = *a + *b;
        }
        Ok(gi)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(TensorEntry<'_, T>)) {
        f(TensorEntry {
            name: format!("{prefix}.gamma"),
            grad: Some(&mut self.ggamma),
            value: &mut self.state.gamma,
            decay: false,
        });
        f(TensorEntry {
            name: format!("{prefix}.beta"),
            grad: Some(&mut self.gbeta),
            value: &mut self.state.beta,
            decay: false,
        });
    }
}

#[derive(Clone, Debug)]
struct ReluLayer<T> {
    cache: Option<Tensor5<T>>,
}

impl<T: Scalar> ReluLayer<T> {
    fn new() -> Self {
        Self { cache: None }
    }

    fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Tensor5<T> {
        let out = nn::relu(x);
        if mode == Mode::Train {
            self.cache = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, upstream: &Tensor5<T>) -> Result<Tensor5<T>> {
        let x = self.cache.take().ok_or_else(|| {
            Error::Data("backward without a matching train-mode forward (relu)".into())
        })?;
        Ok(nn::relu_grad(&x, upstream))
    }
}

#[derive(Clone, Debug)]
struct MaxPoolLayer<T> {
    cache: Option<([usize; 5], Vec<u32>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPoolLayer<T> {
    fn new() -> Self {
        Self { cache: None, _marker: std::marker::PhantomData }
    }

    fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        let (out, arg) = nn::maxpool3d(x)?;
        if mode == Mode::Train {
            self.cache = Some((x.shape(), arg));
        }
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor5<T>) -> Result<Tensor5<T>> {
        let (shape, arg) = self.cache.take().ok_or_else(|| {
            Error::Data("backward without a matching train-mode forward (max pool)".into())
        })?;
        nn::maxpool3d_grad(shape, &arg, upstream)
    }
}

fn add_tensors<T: Scalar>(a: &Tensor5<T>, b: &Tensor5<T>) -> Tensor5<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + v;
    }
    out
}

// ---------------------------------------------------------------------------
// Convolutional modules (one per variant)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum ConvModule<T> {
    BnRelu {
        conv: Conv3dLayer<T>,
        bn: BatchNormLayer<T>,
        relu: ReluLayer<T>,
    },
    ReluGn {
        conv: Conv3dLayer<T>,
        relu: ReluLayer<T>,
        gn: GroupNormLayer<T>,
    },
    Residual {
        convs: Vec<Conv3dLayer<T>>,
        gns: Vec<GroupNormLayer<T>>,
        relus: Vec<ReluLayer<T>>, // three: after stages 1, 2 and after the add
        proj: Option<Conv3dLayer<T>>,
    },
}

impl<T: Scalar> ConvModule<T> {
    fn init(cfg: &UNetConfig, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        match cfg.variant {
            VariantKind::ConvBnRelu => ConvModule::BnRelu {
                conv: Conv3dLayer::init(c_in, c_out, 3, [1; 3], rng),
                bn: BatchNormLayer::init(c_out),
                relu: ReluLayer::new(),
            },
            VariantKind::ConvReluGn => ConvModule::ReluGn {
                conv: Conv3dLayer::init(c_in, c_out, 3, [1; 3], rng),
                relu: ReluLayer::new(),
                gn: GroupNormLayer::init(c_out, cfg.gn_channels_per_group),
            },
            VariantKind::ResidualSymmetric => {
                let convs = vec![
                    Conv3dLayer::init(c_in, c_out, 3, [1; 3], rng),
                    Conv3dLayer::init(c_out, c_out, 3, [1; 3], rng),
                    Conv3dLayer::init(c_out, c_out, 3, [1; 3], rng),
                ];
                let gns = (0..3).map(|_| GroupNormLayer::init(c_out, cfg.gn_channels_per_group)).collect();
                let relus = (0..3).map(|_| ReluLayer::new()).collect();
                let proj =
                    (c_in != c_out).then(|| Conv3dLayer::init(c_in, c_out, 1, [0; 3], rng));
                ConvModule::Residual { convs, gns, relus, proj }
            }
        }
    }

    fn forward(&mut self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        match self {
            ConvModule::BnRelu { conv, bn, relu } => {
                let h = conv.forward(x, mode)?;
                let h = bn.forward(&h, mode)?;
                Ok(relu.forward(&h, mode))
            }
            ConvModule::ReluGn { conv, relu, gn } => {
                let h = conv.forward(x, mode)?;
                let h = relu.forward(&h, mode);
                gn.forward(&h, mode)
            }
            ConvModule::Residual { convs, gns, relus, proj } => {
                let skip = match proj {
                    Some(p) => p.forward(x, mode)?,
                    None => x.clone(),
                };
                let mut h = x.clone();
                for stage in 0..3 {
                    h = convs[stage].forward(&h, mode)?;
                    h = gns[stage].forward(&h, mode)?;
                    if stage < 2 {
                        h = relus[stage].forward(&h, mode);
                    }
                }
                let pre = add_tensors(&h, &skip);
                Ok(relus[2].forward(&pre, mode))
            }
        }
    }

    fn backward(&mut self, upstream: &Tensor5<T>) -> Result<Tensor5<T>> {
        match self {
            ConvModule::BnRelu { conv, bn, relu } => {
                let g = relu.backward(upstream)?;
                let g = bn.backward(&g)?;
                conv.backward(&g)
            }
            ConvModule::ReluGn { conv, relu, gn } => {
                let g = gn.backward(upstream)?;
                let g = relu.backward(&g)?;
                conv.backward(&g)
            }
            ConvModule::Residual { convs, gns, relus, proj } => {
                let g_pre = relus[2].backward(upstream)?;
                // The add fans the gradient into both the stage path and the skip.
                let mut g = g_pre.clone();
                for stage in (0..3).rev() {
                    if stage < 2 {
                        g = relus[stage].backward(&g)?;
                    }
                    g = gns[stage].backward(&g)?;
                    g = convs[stage].backward(&g)?;
                }
                let g_skip = match proj {
                    Some(p) => p.backward(&g_pre)?,
                    None => g_pre,
                };
                Ok(add_tensors(&g, &g_skip))
            }
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(TensorEntry<'_, T>)) {
        match self {
            ConvModule::BnRelu { conv, bn, .. } => {
                conv.visit(&format!("{prefix}.conv"), f);
                bn.visit(&format!("{prefix}.bn"), f);
            }
            ConvModule::ReluGn { conv, gn, .. } => {
                conv.visit(&format!("{prefix}.conv"), f);
                gn.visit(&format!("{prefix}.gn"), f);
            }
            ConvModule::Residual { convs, gns, proj, .. } => {
                for (i, c) in convs.iter_mut().enumerate() {
                    c.visit(&format!("{prefix}.conv{i}"), f);
                }
                for (i, g) in gns.iter_mut().enumerate() {
                    g.visit(&format!("{prefix}.gn{i}"), f);
                }
                if let Some(p) = proj {
                    p.visit(&format!("{prefix}.proj"), f);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct EncoderLevel<T> {
    m1: ConvModule<T>,
    m2: ConvModule<T>,
    pool: Option<MaxPoolLayer<T>>,
}

#[derive(Clone, Debug)]
struct DecoderLevel<T> {
    up: TransposedConv3dLayer<T>,
    /// Channel count of the upsampled tensor (first block of the concat).
    up_channels: usize,
    m1: ConvModule<T>,
    m2: ConvModule<T>,
}

/// One of the three 3D U-Net variants. Single-writer during training
/// (forward/backward mutate cached activations and gradients); clones are
/// independent.
#[derive(Clone, Debug)]
pub struct UNetModel<T> {
    config: UNetConfig,
    seed: u64,
    enc: Vec<EncoderLevel<T>>,
    dec: Vec<DecoderLevel<T>>,
    final_conv: Conv3dLayer<T>,
    backward_pending: bool,
}

/// Builds the network deterministically from the config and seed: per
/// encoder level a conv-module pair (channels doubling from
/// `base_channels`) followed by a 2x2x2 max pool except at the deepest
/// level; per decoder level transposed-conv upsampling (halving channels),
/// concatenation with the matching encoder output, and another module pair;
/// a final 1x1x1 convolution maps to `out_channels`.
pub fn build_model<T: Scalar>(config: &UNetConfig, seed: u64) -> Result<UNetModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = config.levels;

    let mut enc = Vec::with_capacity(l);
    for lvl in 0..l {
        let c_in = if lvl == 0 { config.in_channels } else { config.channels(lvl - 1) };
        let c = config.channels(lvl);
        enc.push(EncoderLevel {
            m1: ConvModule::init(config, c_in, c, &mut rng),
            m2: ConvModule::init(config, c, c, &mut rng),
            pool: (lvl + 1 < l).then(MaxPoolLayer::new),
        });
    }

    let mut dec = Vec::with_capacity(l - 1);
    for j in 0..l - 1 {
        let lvl = l - 2 - j; // encoder level this decoder stage restores
        let c_deep = config.channels(lvl + 1);
        let c = config.channels(lvl);
        dec.push(DecoderLevel {
            up: TransposedConv3dLayer::init(c_deep, c, &mut rng),
            up_channels: c,
            m1: ConvModule::init(config, 2 * c, c, &mut rng),
            m2: ConvModule::init(config, c, c, &mut rng),
        });
    }

    let final_conv = Conv3dLayer::init(config.base_channels, config.out_channels, 1, [0; 3], &mut rng);

    Ok(UNetModel { config: config.clone(), seed, enc, dec, final_conv, backward_pending: false })
}

impl<T: Scalar> UNetModel<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Whole-network forward pass. Input spatial extents must be divisible by
    /// `2^(levels-1)`; train mode retains activations for [`Self::backward`].
    pub fn forward(&mut self, input: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        if input.c() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "forward: input has {} channels, model expects {}",
                input.c(),
                self.config.in_channels
            )));
        }
        let div = self.config.spatial_divisor();
        let [d, h, w] = input.spatial();
        if d % div != 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "forward: spatial extents ({}, {}, {}) must be divisible by {}",
                d, h, w, div
            )));
        }

        let levels = self.config.levels;
        let mut skips: Vec<Tensor5<T>> = Vec::with_capacity(levels - 1);
        let mut x = input.clone();
        for lvl in 0..levels {
            x = self.enc[lvl].m1.forward(&x, mode)?;
            x = self.enc[lvl].m2.forward(&x, mode)?;
            if let Some(pool) = self.enc[lvl].pool.as_mut() {
                skips.push(x.clone());
                x = pool.forward(&x, mode)?;
            }
        }
        for j in 0..levels - 1 {
            let lvl = levels - 2 - j;
            x = self.dec[j].up.forward(&x, mode)?;
            x = nn::concat_channels(&x, &skips[lvl])?;
            x = self.dec[j].m1.forward(&x, mode)?;
            x = self.dec[j].m2.forward(&x, mode)?;
        }
        let logits = self.final_conv.forward(&x, mode)?;
        if mode == Mode::Train {
            self.backward_pending = true;
        }
        Ok(logits)
    }

    /// Accumulates exact parameter gradients of the scalar whose logit
    /// gradient is supplied. Requires a preceding train-mode forward.
    pub fn backward(&mut self, grad_logits: &Tensor5<T>) -> Result<()> {
        if !self.backward_pending {
            return Err(Error::Data(
                "backward called without a matching train-mode forward".into(),
            ));
        }
        self.backward_pending = false;
        let levels = self.config.levels;
        let mut g = self.final_conv.backward(grad_logits)?;
        let mut skip_grads: Vec<Option<Tensor5<T>>> = (0..levels - 1).map(|_| None).collect();
        for j in (0..levels - 1).rev() {
            let lvl = levels - 2 - j;
            g = self.dec[j].m2.backward(&g)?;
            g = self.dec[j].m1.backward(&g)?;
            let (g_up, g_skip) = nn::concat_channels_grad(&g, self.dec[j].up_channels)?;
            skip_grads[lvl] = Some(g_skip);
            g = self.dec[j].up.backward(&g_up)?;
        }
        for lvl in (0..levels).rev() {
            if let Some(pool) = self.enc[lvl].pool.as_mut() {
                g = pool.backward(&g)?;
                let g_skip = skip_grads[lvl].take().expect("skip gradient recorded");
                g = add_tensors(&g, &g_skip);
            }
            g = self.enc[lvl].m2.backward(&g)?;
            g = self.enc[lvl].m1.backward(&g)?;
        }
        Ok(())
    }

    /// Visits every registry tensor (params then state buffers per layer) in
    /// the fixed construction order.
    pub fn for_each_tensor(&mut self, f: &mut dyn FnMut(TensorEntry<'_, T>)) {
        for (lvl, e) in self.enc.iter_mut().enumerate() {
            e.m1.visit(&format!("enc{lvl}.m1"), f);
            e.m2.visit(&format!("enc{lvl}.m2"), f);
        }
        for (j, d) in self.dec.iter_mut().enumerate() {
            d.up.visit(&format!("dec{j}.up"), f);
            d.m1.visit(&format!("dec{j}.m1"), f);
            d.m2.visit(&format!("dec{j}.m2"), f);
        }
        self.final_conv.visit("final", f);
    }

    /// Exact learnable-scalar count.
    pub fn count_params(&mut self) -> usize {
        let mut total = 0;
        self.for_each_tensor(&mut |e| {
            if e.grad.is_some() {
                total += e.value.len();
            }
        });
        total
    }

    /// Sets every gradient accumulator to zero.
    pub fn zero_grads(&mut self) {
        self.for_each_tensor(&mut |e| {
            if let Some(g) = e.grad {
                g.fill(T::zero());
            }
        });
    }

    /// Drops retained activations without running backward.
    pub fn clear_caches(&mut self) {
        self.backward_pending = false;
        fn clear_module<T: Scalar>(m: &mut ConvModule<T>) {
            match m {
                ConvModule::BnRelu { conv, bn, relu } => {
                    conv.cache = None;
                    bn.cache = None;
                    relu.cache = None;
                }
                ConvModule::ReluGn { conv, relu, gn } => {
                    conv.cache = None;
                    relu.cache = None;
                    gn.cache = None;
                }
                ConvModule::Residual { convs, gns, relus, proj } => {
                    convs.iter_mut().for_each(|c| c.cache = None);
                    gns.iter_mut().for_each(|g| g.cache = None);
                    relus.iter_mut().for_each(|r| r.cache = None);
                    if let Some(p) = proj {
                        p.cache = None;
                    }
                }
            }
        }
        for e in &mut self.enc {
            clear_module(&mut e.m1);
            clear_module(&mut e.m2);
            if let Some(p) = &mut e.pool {
                p.cache = None;
            }
        }
        for d in &mut self.dec {
            d.up.cache = None;
            clear_module(&mut d.m1);
            clear_module(&mut d.m2);
        }
        self.final_conv.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::{RngExt, SeedableRng};

    fn tiny_cfg(variant: VariantKind) -> UNetConfig {
        UNetConfig { levels: 2, base_channels: 4, variant, ..Default::default() }
    }

    fn collect_params(model: &mut UNetModel<f32>) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        model.for_each_tensor(&mut |e| {
            if e.grad.is_some() {
                out.push((e.name.clone(), e.value.to_vec()));
            }
        });
        out
    }

    /// Closed-form learnable-scalar count for the ConvBnRelu variant,
    /// written out by hand from the construction rule.
    fn hand_count_bn(cfg: &UNetConfig) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k * k + co;
        let bn = |c: usize| 2 * c;
        let ch = |lvl: usize| cfg.base_channels << lvl;
        let mut total = 0;
        for lvl in 0..cfg.levels {
            let cin = if lvl == 0 { cfg.in_channels } else { ch(lvl - 1) };
            total += conv(cin, ch(lvl), 3) + bn(ch(lvl));
            total += conv(ch(lvl), ch(lvl), 3) + bn(ch(lvl));
        }
        for j in 0..cfg.levels - 1 {
            let lvl = cfg.levels - 2 - j;
            total += conv(ch(lvl + 1), ch(lvl), 2); // transposed conv
            total += conv(2 * ch(lvl), ch(lvl), 3) + bn(ch(lvl));
            total += conv(ch(lvl), ch(lvl), 3) + bn(ch(lvl));
        }
        total + conv(cfg.base_channels, cfg.out_channels, 1)
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let cfg = tiny_cfg(VariantKind::ConvBnRelu);
        let mut model = build_model::<f32>(&cfg, 1).unwrap();
        assert_eq!(model.count_params(), hand_count_bn(&cfg));
        assert_eq!(model.count_params(), 4794); // levels=2, base=4, in=1, out=2
    }

    #[test]
    fn registry_entry_count_enumerated_by_hand() {
        // 6 conv modules (4 param tensors each: conv w/b + norm gamma/beta),
        // 1 transposed conv (2), 1 final conv (2) = 28 param tensors; the 6
        // batch norms add 12 running-stat buffers.
        let mut model = build_model::<f32>(&tiny_cfg(VariantKind::ConvBnRelu), 1).unwrap();
        let mut params = 0;
        let mut buffers = 0;
        model.for_each_tensor(&mut |e| {
            if e.grad.is_some() {
                params += 1;
            } else {
                buffers += 1;
            }
        });
        assert_eq!(params, 28);
        assert_eq!(buffers, 12);
    }

    #[test]
    fn single_1x1x1_conv_1_to_2_has_four_params() {
        let w = ConvWeights::<f32>::zeros(2, 1, 1);
        assert_eq!(w.weight.len() + w.bias.len(), 4);
    }

    #[test]
    fn same_seed_builds_bit_identical_models() {
        let cfg = tiny_cfg(VariantKind::ResidualSymmetric);
        let mut a = build_model::<f32>(&cfg, 42).unwrap();
        let mut b = build_model::<f32>(&cfg, 42).unwrap();
        assert_eq!(collect_params(&mut a), collect_params(&mut b));
        let mut c = build_model::<f32>(&cfg, 43).unwrap();
        assert_ne!(collect_params(&mut a), collect_params(&mut c));
    }

    #[test]
    fn count_invariant_under_reseeding() {
        let cfg = tiny_cfg(VariantKind::ConvReluGn);
        let mut a = build_model::<f32>(&cfg, 1).unwrap();
        let mut b = build_model::<f32>(&cfg, 999).unwrap();
        assert_eq!(a.count_params(), b.count_params());
    }

    #[test]
    fn residual_variant_has_strictly_more_params() {
        let mut bn = build_model::<f32>(&tiny_cfg(VariantKind::ConvBnRelu), 1).unwrap();
        let mut res = build_model::<f32>(&tiny_cfg(VariantKind::ResidualSymmetric), 1).unwrap();
        assert!(res.count_params() > bn.count_params());
    }

    #[test]
    fn forward_preserves_spatial_shape() {
        let cfg = tiny_cfg(VariantKind::ConvBnRelu);
        let mut model = build_model::<f32>(&cfg, 3).unwrap();
        let input = Tensor5::filled([1, 1, 32, 32, 32], 0.5f32);
        let logits = model.forward(&input, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), [1, 2, 32, 32, 32]);
    }

    #[test]
    fn forward_rejects_indivisible_extents_naming_divisor() {
        let cfg = UNetConfig { levels: 3, base_channels: 2, ..Default::default() };
        let mut model = build_model::<f32>(&cfg, 3).unwrap();
        let input = Tensor5::zeros([1, 1, 30, 30, 30]);
        let err = model.forward(&input, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains('4'), "must name the divisor: {err}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        for variant in VariantKind::ALL {
            let cfg = UNetConfig { levels: 2, base_channels: 2, variant, ..Default::default() };
            let mut model = build_model::<f32>(&cfg, 5).unwrap();
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(6);
            let data: Vec<f32> = (0..4096).map(|_| r.random_range(-1.0..1.0)).collect();
            let input = Tensor5::from_vec([1, 1, 16, 16, 16], data).unwrap();
            let a = model.forward(&input, Mode::Eval).unwrap();
            let b = model.forward(&input, Mode::Eval).unwrap();
            assert_eq!(a, b, "variant {variant:?}");
        }
    }

    #[test]
    fn zero_grad_logits_gives_zero_param_grads() {
        let cfg = tiny_cfg(VariantKind::ConvReluGn);
        let mut model = build_model::<f32>(&cfg, 8).unwrap();
        let input = Tensor5::filled([1, 1, 8, 8, 8], 0.3f32);
        let logits = model.forward(&input, Mode::Train).unwrap();
        model.backward(&Tensor5::zeros(logits.shape())).unwrap();
        model.for_each_tensor(&mut |e| {
            if let Some(g) = e.grad {
                assert!(g.iter().all(|&v| v == 0.0), "{} has nonzero grad", e.name);
            }
        });
    }

    #[test]
    fn backward_without_forward_rejected() {
        let cfg = tiny_cfg(VariantKind::ConvBnRelu);
        let mut model = build_model::<f32>(&cfg, 8).unwrap();
        let g = Tensor5::zeros([1, 2, 8, 8, 8]);
        assert!(model.backward(&g).is_err());
        let input = Tensor5::filled([1, 1, 8, 8, 8], 0.1f32);
        model.forward(&input, Mode::Train).unwrap();
        model.backward(&g).unwrap();
        assert!(model.backward(&g).is_err(), "second backward must fail");
    }

    #[test]
    fn skip_connection_extents_match_by_construction() {
        // The concat inside forward() would reject mismatched extents, so a
        // successful forward across odd-but-divisible sizes is the check.
        let cfg = UNetConfig { levels: 3, base_channels: 2, ..Default::default() };
        let mut model = build_model::<f32>(&cfg, 3).unwrap();
        let input = Tensor5::filled([1, 1, 12, 20, 28], 0.1f32);
        let logits = model.forward(&input, Mode::Eval).unwrap();
        assert_eq!(logits.spatial(), [12, 20, 28]);
    }

    #[test]
    fn loss_decreases_over_fifty_steps() {
        use crate::nn::softmax_cross_entropy;
        use crate::optim::Adam;
        for variant in VariantKind::ALL {
            let cfg = UNetConfig { levels: 2, base_channels: 2, variant, ..Default::default() };
            let mut model = build_model::<f32>(&cfg, 21).unwrap();
            let mut opt = Adam::new(&mut model);
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(22);
            let data: Vec<f32> = (0..4096).map(|_| r.random_range(-1.0..1.0)).collect();
            let input = Tensor5::from_vec([1, 1, 16, 16, 16], data).unwrap();
            // A centred 8^3 cube of defect labels.
            let targets: Vec<u8> = (0..4096)
                .map(|i| {
                    let (d, rem) = (i / 256, i % 256);
                    let (h, w) = (rem / 16, rem % 16);
                    u8::from((4..12).contains(&d) && (4..12).contains(&h) && (4..12).contains(&w))
                })
                .collect();
            let mut first = 0.0f32;
            let mut last = 0.0f32;
            for step in 0..50 {
                let logits = model.forward(&input, Mode::Train).unwrap();
                let (loss, grad) = softmax_cross_entropy(&logits, &targets).unwrap();
                model.backward(&grad).unwrap();
                opt.step(&mut model, 1e-3, 0.0).unwrap();
                if step == 0 {
                    first = loss;
                }
                last = loss;
            }
            assert!(
                last < first * 0.8,
                "{variant:?}: loss did not decrease ({first} -> {last})"
            );
        }
    }
}
