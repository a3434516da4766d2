//! Encoder-decoder networks assembled from a declarative [`ModelConfig`]:
//! the partial-convolution inpainting U-Net and the segmentation U-Net.
//!
//! Inpainting network, depth `D`, channels `c_d = base * 2^(d-1)`:
//!
//! * `e_0` is the input image with hole pixels set to 0, paired with the mask.
//! * Encoder stage `d = 1..=D`: PConv (stride 2, or 1 with
//!   `same_resolution`), batch norm (not on stage 1), ReLU.
//! * Decoder stage `d = D..=1`: nearest upsample of features and mask,
//!   channel concat with `e_{d-1}` (masks merged by elementwise max), PConv
//!   3x3, batch norm and LeakyReLU. The last stage outputs one channel with
//!   neither batch norm nor activation.
//!
//! Segmentation network: encoder stages of conv 3x3, batch norm (not on the
//! first), ReLU and 2x2 max pooling; a bottleneck conv; decoder stages of
//! upsample, concat with the pre-pool encoder map, conv, batch norm, ReLU;
//! a 1x1 head and a sigmoid.
//!
//! Parameters live in `f32`. A forward pass is recorded on a [`Tape`] of any
//! scalar type, with parameters entering as leaves, so the same code serves
//! inference, training and gradient checks.

use std::fmt;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pconv::{check_mask, masked_input};
use crate::tensor::{
    upsample_nearest, Activation, Axis, BatchNormState, BatchStats, BnForward, Scalar, Tape,
    Tensor, TensorError, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PconvUnet,
    SegUnet,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::PconvUnet => "pconv_unet",
            Variant::SegUnet => "seg_unet",
        })
    }
}

/// Declarative network description. Unset optional lists take their
/// defaults: 3x3 kernels everywhere, and batch norm on every layer except
/// the first encoder layer and the last decoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    /// Encoder kernel size per stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_sizes: Option<Vec<usize>>,
    /// Inpainting variant only: keep every stage at input resolution.
    #[serde(default)]
    pub same_resolution: bool,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// One flag per convolution layer in forward order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_enabled: Option<Vec<bool>>,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_depth() -> usize {
    3
}
fn default_base() -> usize {
    16
}
fn default_slope() -> f64 {
    0.2
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            depth: default_depth(),
            base_channels: default_base(),
            kernel_sizes: None,
            same_resolution: false,
            leaky_slope: default_slope(),
            bn_enabled: None,
            init_seed: 0,
        }
    }

    pub fn pconv_unet() -> Self {
        Self::new(Variant::PconvUnet)
    }

    pub fn seg_unet() -> Self {
        Self::new(Variant::SegUnet)
    }

    /// Convolution layers in forward order.
    pub fn layer_count(&self) -> usize {
        match self.variant {
            Variant::PconvUnet => 2 * self.depth,
            Variant::SegUnet => 2 * self.depth + 2,
        }
    }

    pub fn kernels(&self) -> Vec<usize> {
        self.kernel_sizes
            .clone()
            .unwrap_or_else(|| vec![3; self.depth])
    }

    pub fn bn_flags(&self) -> Vec<bool> {
        self.bn_enabled.clone().unwrap_or_else(|| {
            let n = self.layer_count();
            (0..n).map(|i| i != 0 && i + 1 != n).collect()
        })
    }

    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.depth == 0 {
            v.push("depth must be at least 1".to_string());
        }
        if self.depth > 12 {
            v.push(format!("depth {} is larger than 12", self.depth));
        }
        if self.base_channels == 0 {
            v.push("base_channels must be at least 1".to_string());
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            v.push(format!("leaky_slope {} must lie in [0, 1)", self.leaky_slope));
        }
        if let Some(k) = &self.kernel_sizes {
            if k.len() != self.depth {
                v.push(format!(
                    "kernel_sizes has {} entries for depth {}",
                    k.len(),
                    self.depth
                ));
            }
            if let Some(bad) = k.iter().find(|&&k| k % 2 == 0) {
                v.push(format!("kernel size {bad} is not odd"));
            }
            if self.variant == Variant::SegUnet {
                v.push("kernel_sizes applies to the pconv_unet variant only".to_string());
            }
        }
        if self.same_resolution && self.variant == Variant::SegUnet {
            v.push("same_resolution applies to the pconv_unet variant only".to_string());
        }
        if let Some(bn) = &self.bn_enabled {
            let n = self.layer_count();
            if bn.len() != n {
                v.push(format!("bn_enabled has {} entries for {n} layers", bn.len()));
            } else {
                if bn[0] {
                    v.push("batch norm must be disabled on the first encoder layer".to_string());
                }
                if bn[n - 1] {
                    v.push("batch norm must be disabled on the last decoder layer".to_string());
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(v))
        }
    }

    /// Spatial extents must be multiples of this.
    pub fn extent_multiple(&self) -> usize {
        if self.variant == Variant::PconvUnet && self.same_resolution {
            1
        } else {
            1 << self.depth
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let c: ModelConfig =
            toml::from_str(text).map_err(|e| ModelError::Config(vec![e.message().to_string()]))?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(
        "{axis} extent {found} is not a multiple of {multiple}; pad the image to {padded}"
    )]
    Extent {
        axis: Axis,
        found: usize,
        multiple: usize,
        padded: usize,
    },
    #[error("model is a {found}, expected a {expected}")]
    Variant { expected: Variant, found: Variant },
    #[error("checkpoint config does not match the model: {0}")]
    ConfigMismatch(String),
    #[error("state tensor {name}: {reason}")]
    State { name: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Geometry of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bn: bool,
    pub act: Option<Activation>,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        let conv = self.cout * self.cin * self.kernel * self.kernel + self.cout;
        conv + if self.bn { 2 * self.cout } else { 0 }
    }
}

/// Layer list implied by a config, in forward order.
pub fn layer_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let flags = cfg.bn_flags();
    let ch = |d: usize| cfg.base_channels << d;
    let mut out = Vec::with_capacity(cfg.layer_count());
    let mut push = |name: String, cin, cout, kernel, stride, act| {
        let i = out.len();
        out.push(LayerSpec {
            name,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            bn: flags.get(i).copied().unwrap_or(false),
            act,
        });
    };
    let d = cfg.depth;
    match cfg.variant {
        Variant::PconvUnet => {
            let stride = if cfg.same_resolution { 1 } else { 2 };
            let kernels = cfg.kernels();
            let leaky = Some(Activation::LeakyRelu(cfg.leaky_slope));
            for s in 0..d {
                let cin = if s == 0 { 1 } else { ch(s - 1) };
                push(format!("enc{}", s + 1), cin, ch(s), kernels[s], stride, Some(Activation::Relu));
            }
            for s in (0..d).rev() {
                let skip = if s == 0 { 1 } else { ch(s - 1) };
                let (cout, act) = if s == 0 { (1, None) } else { (ch(s - 1), leaky) };
                push(format!("dec{}", s + 1), ch(s) + skip, cout, 3, 1, act);
            }
        }
        Variant::SegUnet => {
            let relu = Some(Activation::Relu);
            for s in 0..d {
                let cin = if s == 0 { 1 } else { ch(s - 1) };
                push(format!("enc{}", s + 1), cin, ch(s), 3, 1, relu);
            }
            push("bottleneck".to_string(), ch(d - 1), ch(d), 3, 1, relu);
            for s in (0..d).rev() {
                push(format!("dec{}", s + 1), ch(s + 1) + ch(s), ch(s), 3, 1, relu);
            }
            push("head".to_string(), ch(0), 1, 1, 1, None);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
struct BnParams {
    gamma: Tensor<f32>,
    beta: Tensor<f32>,
    state: BatchNormState<f32>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    spec: LayerSpec,
    weight: Tensor<f32>,
    bias: Tensor<f32>,
    bn: Option<BnParams>,
}

/// How batch norm layers normalize during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPolicy {
    /// Batch statistics everywhere (training).
    Batch,
    /// Running statistics everywhere (inference).
    Running,
    /// Running statistics in the encoder, batch statistics in the decoder.
    FrozenEncoder,
}

/// Handles produced by one recorded forward pass.
pub struct Forward<T: Scalar> {
    /// Network output: raw intensities (inpainting) or probabilities
    /// (segmentation).
    pub output: Var,
    /// Final validity mask (all ones for segmentation).
    pub mask: Tensor<T>,
    /// One leaf per parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm layer that used them, in layer order.
    pub bn_stats: Vec<Option<BatchStats>>,
    /// Output of every layer after its activation, with its mask if any.
    pub trace: Vec<(String, Var, Option<Tensor<T>>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
}

fn kaiming(rng: &mut Xoshiro256PlusPlus, spec: &LayerSpec) -> Tensor<f32> {
    let fan_in = spec.cin * spec.kernel * spec.kernel;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let dims = [spec.cout, spec.cin, spec.kernel, spec.kernel];
    let data = (0..dims.iter().product::<usize>())
        .map(|_| normal.sample(rng) as f32)
        .collect();
    Tensor::from_vec(dims, data).expect("finite init")
}

impl Model {
    /// Kaiming fan-in normal weights drawn in layer order from
    /// `config.init_seed`; zero biases; unit gamma, zero beta.
    pub fn build(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.init_seed);
        let layers = layer_specs(config)
            .into_iter()
            .map(|spec| {
                let weight = kaiming(&mut rng, &spec);
                let bias = Tensor::zeros([1, spec.cout, 1, 1]);
                let bn = spec.bn.then(|| BnParams {
                    gamma: Tensor::ones([1, spec.cout, 1, 1]),
                    beta: Tensor::zeros([1, spec.cout, 1, 1]),
                    state: BatchNormState::new(spec.cout),
                });
                Layer {
                    spec,
                    weight,
                    bias,
                    bn,
                }
            })
            .collect();
        Ok(Model {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layer_specs(&self) -> Vec<&LayerSpec> {
        self.layers.iter().map(|l| &l.spec).collect()
    }

    /// Trainable tensors in a fixed order: per layer weight, bias, then
    /// gamma and beta when the layer has batch norm.
    pub fn params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push((format!("{}.weight", l.spec.name), &l.weight));
            out.push((format!("{}.bias", l.spec.name), &l.bias));
            if let Some(bn) = &l.bn {
                out.push((format!("{}.bn.gamma", l.spec.name), &bn.gamma));
                out.push((format!("{}.bn.beta", l.spec.name), &bn.beta));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Running batch-norm statistics, in layer order.
    pub fn buffers(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(bn) = &l.bn {
                out.push((format!("{}.bn.running_mean", l.spec.name), &bn.state.running_mean));
                out.push((format!("{}.bn.running_var", l.spec.name), &bn.state.running_var));
            }
        }
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Some(bn) = &mut l.bn {
                out.push(&mut bn.state.running_mean);
                out.push(&mut bn.state.running_var);
            }
        }
        out
    }

    /// Parameters followed by buffers.
    pub fn state_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut v = self.params();
        v.extend(self.buffers());
        v
    }

    /// Replaces parameters and buffers from `(name, tensor)` pairs given in
    /// [`Model::state_tensors`] order.
    pub fn load_state(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<(), ModelError> {
        let expected: Vec<(String, [usize; 4])> = self
            .state_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.dims()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(ModelError::State {
                name: "*".into(),
                reason: format!("{} tensors for a model with {}", tensors.len(), expected.len()),
            });
        }
        for ((name, t), (en, ed)) in tensors.iter().zip(&expected) {
            if name != en {
                return Err(ModelError::State {
                    name: name.clone(),
                    reason: format!("expected {en}"),
                });
            }
            if t.dims() != *ed {
                return Err(ModelError::State {
                    name: name.clone(),
                    reason: format!("extents {:?}, expected {:?}", t.dims(), ed),
                });
            }
        }
        let n_params = self.params().len();
        let (p, b) = tensors.split_at(n_params);
        for (dst, (_, src)) in self.params_mut().into_iter().zip(p) {
            *dst = src.clone();
        }
        for (dst, (_, src)) in self.buffers_mut().into_iter().zip(b) {
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running averages.
    pub fn apply_batch_stats(&mut self, stats: &[Option<BatchStats>]) {
        let bns = self.layers.iter_mut().filter_map(|l| l.bn.as_mut());
        for (bn, s) in bns.zip(stats) {
            if let Some(s) = s {
                bn.state.update(&s.mean, &s.var);
            }
        }
    }

    fn check_extents(&self, h: usize, w: usize) -> Result<(), ModelError> {
        let m = self.config.extent_multiple();
        for (axis, v) in [(Axis::Height, h), (Axis::Width, w)] {
            if v == 0 || v % m != 0 {
                return Err(ModelError::Extent {
                    axis,
                    found: v,
                    multiple: m,
                    padded: v.div_ceil(m).max(1) * m,
                });
            }
        }
        Ok(())
    }

    fn expect_variant(&self, v: Variant) -> Result<(), ModelError> {
        if self.config.variant == v {
            Ok(())
        } else {
            Err(ModelError::Variant {
                expected: v,
                found: self.config.variant,
            })
        }
    }

    fn leaf_params<T: Scalar>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.cast()))
            .collect()
    }

    /// Applies batch norm (if any) and the activation of layer `li` to `y`.
    /// `p` is the index of the layer's first parameter leaf.
    #[allow(clippy::too_many_arguments)]
    fn finish_layer<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        li: usize,
        y: Var,
        leaves: &[Var],
        p: usize,
        use_batch: bool,
        bn_stats: &mut Vec<Option<BatchStats>>,
    ) -> Result<Var, ModelError> {
        let layer = &self.layers[li];
        let mut y = y;
        if let Some(bn) = &layer.bn {
            let (gamma, beta) = (leaves[p + 2], leaves[p + 3]);
            let eps = bn.state.eps;
            let (out, stats) = if use_batch {
                tape.batch_norm(y, gamma, beta, BnForward::Batch { eps })?
            } else {
                let mean = bn.state.running_mean.cast();
                let var = bn.state.running_var.cast();
                tape.batch_norm(
                    y,
                    gamma,
                    beta,
                    BnForward::Running {
                        mean: &mean,
                        var: &var,
                        eps,
                    },
                )?
            };
            bn_stats.push(stats);
            y = out;
        }
        if let Some(act) = layer.spec.act {
            y = tape.activation(y, act)?;
        }
        Ok(y)
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut p = 0;
        for l in &self.layers {
            offs.push(p);
            p += if l.bn.is_some() { 4 } else { 2 };
        }
        offs
    }

    /// Records the inpainting network on `tape`. `image` and `mask` are
    /// `(N, 1, H, W)`; hole pixels of `image` never influence any output.
    pub fn inpaint_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        image: &Tensor<T>,
        mask: &Tensor<T>,
        policy: BnPolicy,
    ) -> Result<Forward<T>, ModelError> {
        self.expect_variant(Variant::PconvUnet)?;
        crate::tensor::check_axis(Axis::Channel, 1, image.channels())?;
        check_mask(image, mask)?;
        self.check_extents(image.height(), image.width())?;
        let leaves = self.leaf_params(tape);
        let offs = self.param_offsets();
        let depth = self.config.depth;
        let up = !self.config.same_resolution;
        let mut bn_stats = Vec::new();
        let mut trace = Vec::new();

        let e0 = tape.leaf(masked_input(image, mask));
        let mut skips: Vec<(Var, Tensor<T>)> = vec![(e0, mask.clone())];
        for li in 0..depth {
            let (x, m) = skips.last().expect("non-empty").clone();
            let s = &self.layers[li].spec;
            let p = offs[li];
            let (y, m2) = tape.pconv(x, &m, leaves[p], leaves[p + 1], s.stride, s.pad)?;
            let use_batch = policy == BnPolicy::Batch;
            let y = self.finish_layer(tape, li, y, &leaves, p, use_batch, &mut bn_stats)?;
            trace.push((s.name.clone(), y, Some(m2.clone())));
            skips.push((y, m2));
        }
        let (mut h, mut hm) = skips.pop().expect("deepest stage");
        for (k, li) in (depth..2 * depth).enumerate() {
            let (skip, skip_mask) = &skips[depth - 1 - k];
            if up {
                h = tape.upsample(h, 2)?;
                hm = upsample_nearest(&hm, 2)?;
            }
            let x = tape.concat(h, *skip)?;
            let m = Tensor::from_raw(
                hm.dims(),
                hm.data()
                    .iter()
                    .zip(skip_mask.data())
                    .map(|(a, b)| if *a > *b { *a } else { *b })
                    .collect(),
            );
            let s = &self.layers[li].spec;
            let p = offs[li];
            let (y, m2) = tape.pconv(x, &m, leaves[p], leaves[p + 1], s.stride, s.pad)?;
            let use_batch = policy != BnPolicy::Running;
            h = self.finish_layer(tape, li, y, &leaves, p, use_batch, &mut bn_stats)?;
            hm = m2;
            trace.push((s.name.clone(), h, Some(hm.clone())));
        }
        Ok(Forward {
            output: h,
            mask: hm,
            params: leaves,
            bn_stats,
            trace,
        })
    }

    /// Records the segmentation network on `tape`; the output holds
    /// probabilities.
    pub fn segment_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        image: &Tensor<T>,
        policy: BnPolicy,
    ) -> Result<Forward<T>, ModelError> {
        self.expect_variant(Variant::SegUnet)?;
        crate::tensor::check_axis(Axis::Channel, 1, image.channels())?;
        self.check_extents(image.height(), image.width())?;
        let leaves = self.leaf_params(tape);
        let offs = self.param_offsets();
        let depth = self.config.depth;
        let mut bn_stats = Vec::new();
        let mut trace = Vec::new();

        let conv = |tape: &mut Tape<T>,
                        li: usize,
                        x: Var,
                        use_batch: bool,
                        bn_stats: &mut Vec<Option<BatchStats>>|
         -> Result<Var, ModelError> {
            let s = &self.layers[li].spec;
            let p = offs[li];
            let y = tape.conv2d(x, leaves[p], leaves[p + 1], s.stride, s.pad)?;
            self.finish_layer(tape, li, y, &leaves, p, use_batch, bn_stats)
        };

        let mut x = tape.leaf(image.clone());
        let mut skips = Vec::with_capacity(depth);
        for li in 0..depth {
            let y = conv(tape, li, x, policy == BnPolicy::Batch, &mut bn_stats)?;
            trace.push((self.layers[li].spec.name.clone(), y, None));
            skips.push(y);
            x = tape.max_pool2(y)?;
        }
        let use_dec = policy != BnPolicy::Running;
        let mut h = conv(tape, depth, x, use_dec, &mut bn_stats)?;
        trace.push(("bottleneck".to_string(), h, None));
        for k in 0..depth {
            let li = depth + 1 + k;
            let up = tape.upsample(h, 2)?;
            let cat = tape.concat(up, skips[depth - 1 - k])?;
            h = conv(tape, li, cat, use_dec, &mut bn_stats)?;
            trace.push((self.layers[li].spec.name.clone(), h, None));
        }
        let logits = conv(tape, 2 * depth + 1, h, use_dec, &mut bn_stats)?;
        let prob = tape.sigmoid(logits);
        trace.push(("head".to_string(), prob, None));
        let [n, _, hh, ww] = image.dims();
        Ok(Forward {
            output: prob,
            mask: Tensor::ones([n, 1, hh, ww]),
            params: leaves,
            bn_stats,
            trace,
        })
    }
}

/// Inference-mode inpainting: returns the raw network output and the final
/// mask.
pub fn inpaint_forward(
    model: &Model,
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
) -> Result<(Tensor<f32>, Tensor<f32>), ModelError> {
    let mut tape = Tape::new();
    let f = model.inpaint_on_tape(&mut tape, image, mask, BnPolicy::Running)?;
    Ok((tape.value(f.output).clone(), f.mask))
}

/// Inference-mode segmentation: foreground probability per pixel.
pub fn seg_forward(model: &Model, image: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
    let mut tape = Tape::new();
    let f = model.segment_on_tape(&mut tape, image, BnPolicy::Running)?;
    Ok(tape.value(f.output).clone())
}

/// Every layer output of an inference-mode inpainting pass.
pub fn inpaint_trace(
    model: &Model,
    image: &Tensor<f32>,
    mask: &Tensor<f32>,
) -> Result<Vec<(String, Tensor<f32>, Tensor<f32>)>, ModelError> {
    let mut tape = Tape::new();
    let f = model.inpaint_on_tape(&mut tape, image, mask, BnPolicy::Running)?;
    Ok(f.trace
        .into_iter()
        .map(|(name, v, m)| (name, tape.value(v).clone(), m.expect("pconv layers carry masks")))
        .collect())
}
