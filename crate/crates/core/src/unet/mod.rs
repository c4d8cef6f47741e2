//! Encoder-decoder fully-convolutional network with skip connections.
//!
//! Each encoder level runs `convs_per_level` blocks of 3x3 conv, batch norm
//! and ReLU, then halves the resolution with 2x2 max pooling. The bottleneck
//! doubles the channels once more; every decoder level up-samples with a 2x2
//! stride-2 transposed convolution, concatenates the matching encoder output
//! and runs the same block stack. A 1x1 convolution produces the logits.

mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{
    batchnorm2d, batchnorm2d_backward, concat_channels, conv2d, conv2d_backward, infer_affine,
    maxpool2x2, maxpool2x2_backward, relu_backward, sigmoid_scalar, split_channels,
    transposed_conv2d, transposed_conv2d_backward, BatchNorm, BnCache, Mode, NnError,
    PoolIndices, Scalar, Tensor,
};
use crate::raster::{DensityMap, RgbImage};

pub use weights::{load_weights, save_weights, WeightsError, FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum UnetError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input {width}x{height} is below the minimum {min}x{min} for a {levels}-level model")]
    InputTooSmall { width: usize, height: usize, min: usize, levels: usize },
    #[error("model expects {expected} input channels, got {got}")]
    Channels { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, UnetError>;

/// What a model's output maps mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Two maps: all nuclei, then tumor nuclei.
    DetCls,
    /// One map: tumor area.
    Seg,
}

impl ModelKind {
    pub fn out_maps(self) -> usize {
        match self {
            ModelKind::DetCls => 2,
            ModelKind::Seg => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_maps: usize,
    pub convs_per_level: usize,
}

impl ModelConfig {
    /// Small model that trains on a CPU in minutes.
    pub fn desk(kind: ModelKind) -> Self {
        Self { levels: 3, base_channels: 16, in_channels: 3, out_maps: kind.out_maps(), convs_per_level: 2 }
    }

    /// Full-size model whose bottleneck sees a 188x188 input window: three
    /// pooled levels plus the bottleneck, six 3x3 convolutions per stage.
    pub fn calibrated(kind: ModelKind) -> Self {
        Self { levels: 3, base_channels: 64, in_channels: 3, out_maps: kind.out_maps(), convs_per_level: 6 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(UnetError::Config(msg));
        if self.levels == 0 || self.levels > 16 {
            return bad(format!("levels must be in 1..=16, got {}", self.levels));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_maps == 0 {
            return bad(format!("channel counts must be positive: {self:?}"));
        }
        if self.convs_per_level == 0 {
            return bad("convs_per_level must be at least 1".into());
        }
        if self.base_channels.checked_shl(self.levels as u32).is_none_or(|c| c > 1 << 16) {
            return bad(format!("bottleneck width overflows for {self:?}"));
        }
        Ok(())
    }

    /// Channels of encoder level `level` (the bottleneck is `levels`).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Smallest accepted input side: the bottleneck must keep at least one
    /// pixel without pooling a padded row.
    pub fn min_input(&self) -> usize {
        1 << self.levels
    }

    /// Input side lengths that keep every pooling window inside real pixels.
    pub fn alignment(&self) -> usize {
        1 << self.levels
    }

    /// Upper bound on how far, in input pixels, any output pixel's value
    /// depends on inputs to either side. Tiles whose kept pixels are at least
    /// this far from a cut edge reproduce the whole-image output.
    pub fn reach(&self) -> usize {
        let c = self.convs_per_level;
        let mut reach = 0;
        for level in 0..self.levels {
            let jump = 1 << level;
            // encoder convs + pool, decoder convs + up-sampling
            reach += 2 * c * jump + 2 * jump;
        }
        reach + c * (1 << self.levels)
    }
}

/// Receptive field of a chain of `(kernel, stride)` layers:
/// `r += (k - 1) * jump; jump *= stride`.
pub fn receptive_field_of(layers: &[(usize, usize)]) -> usize {
    let (mut r, mut jump) = (1, 1);
    for &(k, s) in layers {
        r += (k - 1) * jump;
        jump *= s;
    }
    r
}

fn encoder_layers(config: &ModelConfig) -> Vec<(usize, usize)> {
    let mut layers = Vec::new();
    for _ in 0..config.levels {
        layers.extend(std::iter::repeat_n((3, 1), config.convs_per_level));
        layers.push((2, 2));
    }
    layers.extend(std::iter::repeat_n((3, 1), config.convs_per_level));
    layers
}

/// Input window seen by one bottleneck activation.
pub fn receptive_field(config: &ModelConfig) -> usize {
    receptive_field_of(&encoder_layers(config))
}

/// Input window seen by one output pixel (the decoder convolutions widen
/// the bottleneck's window further).
pub fn output_receptive_field(config: &ModelConfig) -> usize {
    let mut r = receptive_field(config);
    for level in (0..config.levels).rev() {
        r += config.convs_per_level * 2 * (1 << level);
    }
    r
}

/// 3x3 conv + batch norm + ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BatchNorm<T>,
}

/// 2x2 stride-2 transposed convolution.
#[derive(Debug, Clone)]
pub struct UpConv<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Unet<T = f32> {
    config: ModelConfig,
    pub encoder: Vec<Vec<ConvBlock<T>>>,
    pub bottleneck: Vec<ConvBlock<T>>,
    /// Indexed by the level the up-sampling produces.
    pub up: Vec<UpConv<T>>,
    /// Indexed by level, finest first.
    pub decoder: Vec<Vec<ConvBlock<T>>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(dist.sample(rng))).collect())
        .expect("init length")
}

fn conv_block<T: Scalar>(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> ConvBlock<T> {
    ConvBlock {
        weight: he_normal(rng, &[cout, cin, 3, 3], cin * 9),
        bias: Tensor::zeros(&[cout]),
        bn: BatchNorm::new(cout),
    }
}

fn stack<T: Scalar>(rng: &mut ChaCha8Rng, cin: usize, cout: usize, n: usize) -> Vec<ConvBlock<T>> {
    (0..n).map(|i| conv_block(rng, if i == 0 { cin } else { cout }, cout)).collect()
}

/// Cached activations of one block for the backward pass.
#[derive(Debug)]
struct BlockCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Tensor<T>,
}

/// Everything a training-mode forward pass keeps for [`Unet::backward`].
#[derive(Debug)]
pub struct TrainCache<T = f32> {
    encoder: Vec<Vec<BlockCache<T>>>,
    pools: Vec<PoolIndices>,
    bottleneck: Vec<BlockCache<T>>,
    up_inputs: Vec<Tensor<T>>,
    decoder: Vec<Vec<BlockCache<T>>>,
    head_input: Tensor<T>,
}

fn crop_spatial<T: Scalar>(t: Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, th, tw) = t.dims4()?;
    if (th, tw) == (h, w) {
        return Ok(t);
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        let plane = &t.data()[p * th * tw..(p + 1) * th * tw];
        for row in 0..h {
            data.extend_from_slice(&plane[row * tw..row * tw + w]);
        }
    }
    let shape = if t.shape().len() == 3 { vec![c, h, w] } else { vec![n, c, h, w] };
    Ok(Tensor::from_vec(&shape, data)?)
}

/// Zero-pads the bottom/right of `t` to `h x w` (adjoint of [`crop_spatial`]).
fn pad_spatial<T: Scalar>(t: Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, th, tw) = t.dims4()?;
    if (th, tw) == (h, w) {
        return Ok(t);
    }
    let mut data = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &t.data()[p * th * tw..(p + 1) * th * tw];
        let dst = &mut data[p * h * w..(p + 1) * h * w];
        for row in 0..th {
            dst[row * w..row * w + tw].copy_from_slice(&src[row * tw..(row + 1) * tw]);
        }
    }
    let shape = if t.shape().len() == 3 { vec![c, h, w] } else { vec![n, c, h, w] };
    Ok(Tensor::from_vec(&shape, data)?)
}

fn add_assign<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn blocks_infer<T: Scalar>(blocks: &[ConvBlock<T>], mut x: Tensor<T>) -> Result<Tensor<T>> {
    for b in blocks {
        let mut y = conv2d(&x, &b.weight, b.bias.data())?;
        let affine = infer_affine(&b.bn);
        let (n, c, h, w) = y.dims4()?;
        let hw = h * w;
        for (p, plane) in y.data_mut().chunks_exact_mut(hw).enumerate() {
            let (s, t) = affine[p % c];
            for v in plane {
                *v = (*v * s + t).max(T::zero());
            }
        }
        debug_assert_eq!(y.len(), n * c * hw);
        x = y;
    }
    Ok(x)
}

fn blocks_train<T: Scalar>(
    blocks: &mut [ConvBlock<T>],
    mut x: Tensor<T>,
) -> Result<(Tensor<T>, Vec<BlockCache<T>>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let z = conv2d(&x, &b.weight, b.bias.data())?;
        let (y, bn) = batchnorm2d(&z, &mut b.bn, Mode::Train)?;
        let y = y.map(|v| v.max(T::zero()));
        caches.push(BlockCache { input: x, bn: bn.expect("train mode cache"), output: y.clone() });
        x = y;
    }
    Ok((x, caches))
}

fn blocks_backward<T: Scalar>(
    blocks: &[ConvBlock<T>],
    grads: &mut [ConvBlock<T>],
    caches: &[BlockCache<T>],
    mut dy: Tensor<T>,
) -> Result<Tensor<T>> {
    for ((b, g), c) in blocks.iter().zip(grads.iter_mut()).zip(caches).rev() {
        // ReLU passes gradient exactly where its output is positive
        let dz = relu_backward(&c.output, &dy)?;
        let (dbn, dgamma, dbeta) = batchnorm2d_backward(&dz, &b.bn, &c.bn)?;
        let lg = conv2d_backward(&c.input, &b.weight, &dbn)?;
        g.weight = lg.weight;
        g.bias = lg.bias;
        g.bn.gamma = dgamma;
        g.bn.beta = dbeta;
        dy = lg.input;
    }
    Ok(dy)
}

impl<T: Scalar> Unet<T> {
    /// Fresh model with He-normal weights drawn from a seeded generator, zero
    /// biases, and identity batch norm.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.convs_per_level;
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for level in 0..config.levels {
            let cout = config.channels_at(level);
            encoder.push(stack(&mut rng, cin, cout, c));
            cin = cout;
        }
        let bottleneck = stack(&mut rng, cin, config.channels_at(config.levels), c);
        let mut up = Vec::new();
        let mut decoder = Vec::new();
        for level in 0..config.levels {
            let (coarse, fine) = (config.channels_at(level + 1), config.channels_at(level));
            up.push(UpConv {
                weight: he_normal(&mut rng, &[coarse, fine, 2, 2], coarse),
                bias: Tensor::zeros(&[fine]),
            });
            decoder.push(stack(&mut rng, 2 * fine, fine, c));
        }
        let base = config.base_channels;
        Ok(Self {
            config,
            encoder,
            bottleneck,
            up,
            decoder,
            head_weight: he_normal(&mut rng, &[config.out_maps, base, 1, 1], base),
            head_bias: Tensor::zeros(&[config.out_maps]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable tensors with stable ids, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        fn push<'a, T>(prefix: String, b: &'a ConvBlock<T>, out: &mut Vec<(String, &'a Tensor<T>)>) {
            out.push((format!("{prefix}.weight"), &b.weight));
            out.push((format!("{prefix}.bias"), &b.bias));
            out.push((format!("{prefix}.bn.gamma"), &b.bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &b.bn.beta));
        }
        let mut out = Vec::new();
        for (l, blocks) in self.encoder.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                push(format!("enc{l}.conv{i}"), b, &mut out);
            }
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            push(format!("bottleneck.conv{i}"), b, &mut out);
        }
        for l in (0..self.config.levels).rev() {
            out.push((format!("dec{l}.up.weight"), &self.up[l].weight));
            out.push((format!("dec{l}.up.bias"), &self.up[l].bias));
            for (i, b) in self.decoder[l].iter().enumerate() {
                push(format!("dec{l}.conv{i}"), b, &mut out);
            }
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable counterpart of [`Unet::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        fn push<'a, T>(prefix: String, b: &'a mut ConvBlock<T>, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
            out.push((format!("{prefix}.weight"), &mut b.weight));
            out.push((format!("{prefix}.bias"), &mut b.bias));
            out.push((format!("{prefix}.bn.gamma"), &mut b.bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &mut b.bn.beta));
        }
        let mut out = Vec::new();
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                push(format!("enc{l}.conv{i}"), b, &mut out);
            }
        }
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            push(format!("bottleneck.conv{i}"), b, &mut out);
        }
        let levels = self.config.levels;
        let mut ups: Vec<_> = self.up.iter_mut().map(Some).collect();
        let mut decs: Vec<_> = self.decoder.iter_mut().map(Some).collect();
        for l in (0..levels).rev() {
            let up = ups[l].take().expect("each level once");
            out.push((format!("dec{l}.up.weight"), &mut up.weight));
            out.push((format!("dec{l}.up.bias"), &mut up.bias));
            for (i, b) in decs[l].take().expect("each level once").iter_mut().enumerate() {
                push(format!("dec{l}.conv{i}"), b, &mut out);
            }
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    /// Batch-norm running statistics `(id prefix, bn)` in parameter order.
    pub fn batch_norms_mut(&mut self) -> Vec<(String, &mut BatchNorm<T>)> {
        let mut out = Vec::new();
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                out.push((format!("enc{l}.conv{i}.bn"), &mut b.bn));
            }
        }
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            out.push((format!("bottleneck.conv{i}.bn"), &mut b.bn));
        }
        let mut decs: Vec<_> = self.decoder.iter_mut().map(Some).collect();
        for l in (0..self.config.levels).rev() {
            for (i, b) in decs[l].take().expect("each level once").iter_mut().enumerate() {
                out.push((format!("dec{l}.conv{i}.bn"), &mut b.bn));
            }
        }
        out
    }

    /// Total count of weights, biases, and batch-norm scales/shifts.
    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy of the model with every trainable tensor zeroed; used as a
    /// gradient container with the same layout.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_params_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn cast<U: Scalar>(&self) -> Unet<U> {
        let block = |b: &ConvBlock<T>| ConvBlock {
            weight: b.weight.cast(),
            bias: b.bias.cast(),
            bn: BatchNorm {
                gamma: b.bn.gamma.cast(),
                beta: b.bn.beta.cast(),
                running_mean: b.bn.running_mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                running_var: b.bn.running_var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            },
        };
        Unet {
            config: self.config,
            encoder: self.encoder.iter().map(|s| s.iter().map(block).collect()).collect(),
            bottleneck: self.bottleneck.iter().map(block).collect(),
            up: self.up.iter().map(|u| UpConv { weight: u.weight.cast(), bias: u.bias.cast() }).collect(),
            decoder: self.decoder.iter().map(|s| s.iter().map(block).collect()).collect(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(UnetError::Channels { expected: self.config.in_channels, got: c });
        }
        let min = self.config.min_input();
        if h < min || w < min {
            return Err(UnetError::InputTooSmall { width: w, height: h, min, levels: self.config.levels });
        }
        Ok(())
    }

    /// Inference-mode logits for a `(C,H,W)` or `(N,C,H,W)` input.
    pub fn forward_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut x = x.clone();
        for blocks in &self.encoder {
            let y = blocks_infer(blocks, x)?;
            x = maxpool2x2(&y)?.0;
            skips.push(y);
        }
        x = blocks_infer(&self.bottleneck, x)?;
        for level in (0..self.config.levels).rev() {
            let skip = &skips[level];
            let (_, _, h, w) = skip.dims4()?;
            let u = transposed_conv2d(&x, &self.up[level].weight, self.up[level].bias.data())?;
            let cat = concat_channels(skip, &crop_spatial(u, h, w)?)?;
            x = blocks_infer(&self.decoder[level], cat)?;
        }
        Ok(conv2d(&x, &self.head_weight, self.head_bias.data())?)
    }

    /// Training-mode forward: batch statistics, running-stat updates, and a
    /// cache for [`Unet::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, TrainCache<T>)> {
        self.check_input(x)?;
        let levels = self.config.levels;
        let mut enc_caches = Vec::with_capacity(levels);
        let mut pools = Vec::with_capacity(levels);
        let mut x = x.clone();
        for blocks in &mut self.encoder {
            let (y, caches) = blocks_train(blocks, x)?;
            let (p, idx) = maxpool2x2(&y)?;
            enc_caches.push(caches);
            pools.push(idx);
            x = p;
        }
        let (mut x, bottleneck) = blocks_train(&mut self.bottleneck, x)?;
        let mut up_inputs: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        let mut dec_caches: Vec<Vec<BlockCache<T>>> = (0..levels).map(|_| Vec::new()).collect();
        for level in (0..levels).rev() {
            let skip = &enc_caches[level].last().expect("non-empty stack").output;
            let (_, _, h, w) = skip.dims4()?;
            let u = transposed_conv2d(&x, &self.up[level].weight, self.up[level].bias.data())?;
            let cat = concat_channels(skip, &crop_spatial(u, h, w)?)?;
            up_inputs[level] = Some(x);
            let (y, caches) = blocks_train(&mut self.decoder[level], cat)?;
            dec_caches[level] = caches;
            x = y;
        }
        let logits = conv2d(&x, &self.head_weight, self.head_bias.data())?;
        let cache = TrainCache {
            encoder: enc_caches,
            pools,
            bottleneck,
            up_inputs: up_inputs.into_iter().map(|u| u.expect("every level visited")).collect(),
            decoder: dec_caches,
            head_input: x,
        };
        Ok((logits, cache))
    }

    /// Parameter gradients for `d loss / d logits`, as a model-shaped
    /// container (see [`Unet::zeros_like`]).
    pub fn backward(&self, cache: &TrainCache<T>, d_logits: &Tensor<T>) -> Result<Unet<T>> {
        let levels = self.config.levels;
        let mut g = self.zeros_like();
        let head = conv2d_backward(&cache.head_input, &self.head_weight, d_logits)?;
        g.head_weight = head.weight;
        g.head_bias = head.bias;
        let mut dx = head.input;
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..levels).map(|_| None).collect();
        for level in 0..levels {
            let d_cat = blocks_backward(&self.decoder[level], &mut g.decoder[level], &cache.decoder[level], dx)?;
            let (d_skip, d_up) = split_channels(&d_cat, self.config.channels_at(level))?;
            skip_grads[level] = Some(d_skip);
            let coarse = &cache.up_inputs[level];
            let (_, _, ch, cw) = coarse.dims4()?;
            let d_up = pad_spatial(d_up, 2 * ch, 2 * cw)?;
            let up = transposed_conv2d_backward(coarse, &self.up[level].weight, &d_up)?;
            g.up[level].weight = up.weight;
            g.up[level].bias = up.bias;
            dx = up.input;
        }
        dx = blocks_backward(&self.bottleneck, &mut g.bottleneck, &cache.bottleneck, dx)?;
        for level in (0..levels).rev() {
            let mut d = maxpool2x2_backward(&dx, &cache.pools[level])?;
            add_assign(&mut d, skip_grads[level].as_ref().expect("filled above"));
            dx = blocks_backward(&self.encoder[level], &mut g.encoder[level], &cache.encoder[level], d)?;
        }
        Ok(g)
    }
}

impl Unet<f32> {
    /// Sigmoid output maps for an RGB image, same size as the image. The
    /// order follows [`ModelKind`]: detection then classification, or the
    /// single segmentation map.
    pub fn forward_maps(&self, image: &RgbImage) -> Result<Vec<DensityMap>> {
        let logits = self.forward_logits(&image.to_tensor())?;
        let (_, k, h, w) = logits.dims4()?;
        Ok((0..k)
            .map(|m| DensityMap {
                width: w,
                height: h,
                data: logits.plane(0, m).iter().map(|&v| sigmoid_scalar(v)).collect(),
            })
            .collect())
    }
}
