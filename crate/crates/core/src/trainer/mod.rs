//! Adam optimization with the two-phase learning-rate schedule, training
//! loops for both network variants, and checkpointing.
//!
//! A [`Trainer`] owns the model, the optimizer state and the batch-sampling
//! RNG. Training is a pure function of data, configs and seed: every
//! recorded loss repeats bit for bit, and resuming from a checkpoint
//! continues exactly where the uninterrupted run would be.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};

use std::fmt;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageproc::{BinaryMask, GrayImage, LabelMap};
use crate::losses::{inpainting_loss, FeatureExtractor, LossBreakdown, LossWeights, BCE_EPS};
use crate::model::{BnPolicy, Model, ModelConfig, ModelError, Variant};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("dataset: {0}")]
    Data(String),
    #[error("non-finite {what} at iteration {iter}")]
    NonFinite { iter: u64, what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl TrainError {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. })
    }
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr_initial: f64,
    #[serde(default = "default_lr_finetune")]
    pub lr_finetune: f64,
    /// First iteration trained at `lr_finetune`; half of `max_iters` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_start_iter: Option<u64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_iters")]
    pub max_iters: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Iterations between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_interval: u64,
    /// Use running statistics in encoder batch norms once fine-tuning starts.
    #[serde(default)]
    pub freeze_encoder_bn_on_finetune: bool,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

fn default_lr() -> f64 {
    2e-4
}
fn default_lr_finetune() -> f64 {
    5e-5
}
fn default_batch() -> usize {
    6
}
fn default_iters() -> u64 {
    1000
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: default_lr(),
            lr_finetune: default_lr_finetune(),
            finetune_start_iter: None,
            batch_size: default_batch(),
            max_iters: default_iters(),
            seed: 0,
            dataset: None,
            checkpoint_interval: 0,
            freeze_encoder_bn_on_finetune: false,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn finetune_start(&self) -> u64 {
        self.finetune_start_iter.unwrap_or(self.max_iters / 2)
    }

    /// Learning rate of the step taken from iteration `iter` (0-based).
    pub fn lr_at(&self, iter: u64) -> f64 {
        if iter < self.finetune_start() {
            self.lr_initial
        } else {
            self.lr_finetune
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, lr) in [("lr_initial", self.lr_initial), ("lr_finetune", self.lr_finetune)] {
            if !(lr > 0.0 && lr.is_finite()) {
                v.push(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".to_string());
        }
        if self.finetune_start() > self.max_iters {
            v.push(format!(
                "finetune_start_iter {} exceeds max_iters {}",
                self.finetune_start(),
                self.max_iters
            ));
        }
        if let Err(e) = self.loss_weights.validate() {
            v.push(e.to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(v))
        }
    }
}

/// Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let m: Vec<Tensor<f32>> = params.into_iter().map(|p| Tensor::zeros(p.dims())).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
        }
    }

    /// Moments named `m.<param>` then `v.<param>`.
    pub fn named(&self, names: &[String]) -> Vec<(String, Tensor<f32>)> {
        let m = names.iter().zip(&self.m).map(|(n, t)| (format!("m.{n}"), t.clone()));
        let v = names.iter().zip(&self.v).map(|(n, t)| (format!("v.{n}"), t.clone()));
        m.chain(v).collect()
    }

    /// Inverse of [`AdamState::named`].
    pub fn from_named(
        named: &[(String, Tensor<f32>)],
        names: &[String],
        params: &[&Tensor<f32>],
        t: u64,
    ) -> Result<Self, CheckpointError> {
        let k = names.len();
        if named.len() != 2 * k {
            return Err(CheckpointError::Malformed(format!(
                "{} optimizer tensors for {k} parameters",
                named.len()
            )));
        }
        for (i, (name, tensor)) in named.iter().enumerate() {
            let (prefix, p) = if i < k { ("m", i) } else { ("v", i - k) };
            if *name != format!("{prefix}.{}", names[p]) || tensor.dims() != params[p].dims() {
                return Err(CheckpointError::Malformed(format!(
                    "optimizer tensor {name} does not match parameter {}",
                    names[p]
                )));
            }
        }
        Ok(AdamState {
            m: named[..k].iter().map(|(_, t)| t.clone()).collect(),
            v: named[k..].iter().map(|(_, t)| t.clone()).collect(),
            t,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
        })
    }
}

/// One bias-corrected Adam update applied in place. Gradients are screened
/// first: a non-finite gradient aborts before any parameter changes and
/// names the parameter.
pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Tensor<f32>],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    for (i, g) in grads.iter().enumerate() {
        if g.dims() != params[i].dims() {
            return Err(TrainError::Tensor(TensorError::Contract(format!(
                "gradient of {} has extents {:?}, parameter {:?}",
                names[i],
                g.dims(),
                params[i].dims()
            ))));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                iter: state.t,
                what: format!("gradient of {} at index {j}", names[i]),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for k in 0..pd.len() {
            let gk = g[k] as f64;
            m[k] = (b1 * m[k] as f64 + (1.0 - b1) * gk) as f32;
            v[k] = (b2 * v[k] as f64 + (1.0 - b2) * gk * gk) as f32;
            let mh = m[k] as f64 / c1;
            let vh = v[k] as f64 / c2;
            pd[k] = (pd[k] as f64 - lr * mh / (vh.sqrt() + state.eps)) as f32;
        }
        if let Some(j) = pd.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                iter: state.t,
                what: format!("parameter {} at index {j} after update", names[i]),
            });
        }
    }
    Ok(())
}

/// Training pairs held as `(1, 1, H, W)` tensors of one common extent.
#[derive(Clone, Debug)]
pub enum Dataset {
    /// Intact images and hole masks; each batch item pairs a random image
    /// with an independently drawn mask.
    Inpaint {
        images: Vec<Tensor<f32>>,
        masks: Vec<Tensor<f32>>,
    },
    /// Images and 0/1 foreground targets.
    Segment {
        images: Vec<Tensor<f32>>,
        targets: Vec<Tensor<f32>>,
    },
}

fn common_extent<'a>(ts: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<[usize; 4], TrainError> {
    let mut it = ts.into_iter();
    let first = it
        .next()
        .ok_or_else(|| TrainError::Data("dataset is empty".into()))?
        .dims();
    for t in it {
        if t.dims() != first {
            return Err(TrainError::Data(format!(
                "mixed extents {:?} and {:?}",
                first,
                t.dims()
            )));
        }
    }
    Ok(first)
}

impl Dataset {
    pub fn inpaint(pairs: &[(GrayImage, BinaryMask)]) -> Result<Self, TrainError> {
        let d = Dataset::Inpaint {
            images: pairs.iter().map(|(i, _)| i.to_tensor()).collect(),
            masks: pairs.iter().map(|(_, m)| m.to_tensor()).collect(),
        };
        d.check()?;
        Ok(d)
    }

    /// Images with a separate mask pool.
    pub fn inpaint_pool(images: &[GrayImage], masks: &[BinaryMask]) -> Result<Self, TrainError> {
        let d = Dataset::Inpaint {
            images: images.iter().map(|i| i.to_tensor()).collect(),
            masks: masks.iter().map(|m| m.to_tensor()).collect(),
        };
        d.check()?;
        Ok(d)
    }

    /// Label `foreground` is the positive class.
    pub fn segment(pairs: &[(GrayImage, LabelMap)], foreground: u8) -> Result<Self, TrainError> {
        let d = Dataset::Segment {
            images: pairs.iter().map(|(i, _)| i.to_tensor()).collect(),
            targets: pairs.iter().map(|(_, l)| l.to_tensor(foreground)).collect(),
        };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<(), TrainError> {
        let (a, b) = match self {
            Dataset::Inpaint { images, masks } => (images, masks),
            Dataset::Segment { images, targets } => (images, targets),
        };
        let ea = common_extent(a)?;
        let eb = common_extent(b)?;
        if ea != eb {
            return Err(TrainError::Data(format!(
                "image extents {ea:?} differ from mask/label extents {eb:?}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Inpaint { images, .. } | Dataset::Segment { images, .. } => images.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn variant(&self) -> Variant {
        match self {
            Dataset::Inpaint { .. } => Variant::PconvUnet,
            Dataset::Segment { .. } => Variant::SegUnet,
        }
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepLoss {
    Inpaint(LossBreakdown),
    Segment { bce: f64 },
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        match self {
            StepLoss::Inpaint(b) => b.total,
            StepLoss::Segment { bce } => *bce,
        }
    }
}

/// Record of one completed iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed iteration.
    pub iter: u64,
    pub lr: f64,
    pub loss: StepLoss,
}

impl StepRecord {
    /// Column names of the loss log for a variant.
    pub fn header(variant: Variant) -> &'static str {
        match variant {
            Variant::PconvUnet => {
                "iter\tlr\ttotal\tmasked\tvalid\tperceptual\tstyle_out\tstyle_comp\ttv"
            }
            Variant::SegUnet => "iter\tlr\tbce",
        }
    }
}

impl fmt::Display for StepRecord {
    /// Tab-separated; losses use shortest round-trip formatting.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:e}", self.iter, self.lr)?;
        match &self.loss {
            StepLoss::Inpaint(b) => write!(
                f,
                "\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                b.total, b.masked, b.valid, b.perceptual, b.style_out, b.style_comp, b.tv
            ),
            StepLoss::Segment { bce } => write!(f, "\t{bce}"),
        }
    }
}

/// Owns everything that changes during training.
pub struct Trainer {
    model: Model,
    adam: AdamState,
    config: TrainConfig,
    rng: Xoshiro256PlusPlus,
    data: Dataset,
    extractor: FeatureExtractor,
}

fn rng_words(rng: &Xoshiro256PlusPlus) -> [u64; 4] {
    #[derive(Deserialize)]
    struct Words {
        s: [u64; 4],
    }
    let v = serde_json::to_value(rng).expect("rng state serializes");
    serde_json::from_value::<Words>(v).expect("xoshiro state is four words").s
}

fn rng_from_words(s: [u64; 4]) -> Xoshiro256PlusPlus {
    serde_json::from_value(serde_json::json!({ "s": s })).expect("xoshiro state is four words")
}

impl Trainer {
    /// Fresh model from `model_config`, sampling RNG from `config.seed`.
    pub fn new(model_config: &ModelConfig, config: TrainConfig, data: Dataset) -> Result<Self, TrainError> {
        let model = Model::build(model_config)?;
        let adam = AdamState::new(model.params().into_iter().map(|(_, t)| t));
        let rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
        Self::assemble(model, adam, config, rng, data)
    }

    /// Continues from `ckpt`; `config` should be the one the run started with.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig, data: Dataset) -> Result<Self, TrainError> {
        let model = ckpt.model()?;
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let params: Vec<&Tensor<f32>> = model.params().into_iter().map(|(_, t)| t).collect();
        let adam = AdamState::from_named(&ckpt.adam, &names, &params, ckpt.step)?;
        Self::assemble(model, adam, config, rng_from_words(ckpt.rng), data)
    }

    fn assemble(
        model: Model,
        adam: AdamState,
        config: TrainConfig,
        rng: Xoshiro256PlusPlus,
        data: Dataset,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        data.check()?;
        let want = data.variant();
        if model.config().variant != want {
            return Err(ModelError::Variant {
                expected: want,
                found: model.config().variant,
            }
            .into());
        }
        Ok(Trainer {
            model,
            adam,
            config,
            rng,
            data,
            extractor: FeatureExtractor::default(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.adam.t
    }

    pub fn is_done(&self) -> bool {
        self.adam.t >= self.config.max_iters
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let names: Vec<String> = self.model.params().into_iter().map(|(n, _)| n).collect();
        Checkpoint::from_model(
            &self.model,
            self.adam.named(&names),
            self.adam.t,
            rng_words(&self.rng),
        )
    }

    fn sample(&mut self, pool: usize) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| self.rng.random_range(0..pool))
            .collect()
    }

    /// Runs one iteration: sample a batch, forward, backward, update.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let iter = self.adam.t;
        let lr = self.config.lr_at(iter);
        let finetune = iter >= self.config.finetune_start();
        let policy = if finetune && self.config.freeze_encoder_bn_on_finetune {
            BnPolicy::FrozenEncoder
        } else {
            BnPolicy::Batch
        };
        let mut tape = Tape::<f32>::new();
        let (loss_var, loss, forward) = match &self.data {
            Dataset::Inpaint { images, masks } => {
                let (ni, nm) = (images.len(), masks.len());
                let img_idx = self.sample(ni);
                let mask_idx = self.sample(nm);
                let Dataset::Inpaint { images, masks } = &self.data else {
                    unreachable!()
                };
                let gt = Tensor::stack(&img_idx.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
                let mask = Tensor::stack(&mask_idx.iter().map(|&i| &masks[i]).collect::<Vec<_>>())?;
                let f = self.model.inpaint_on_tape(&mut tape, &gt, &mask, policy)?;
                let g = inpainting_loss(
                    &mut tape,
                    f.output,
                    &gt,
                    &mask,
                    &self.extractor,
                    &self.config.loss_weights,
                )?;
                (g.total, StepLoss::Inpaint(g.breakdown(&tape)), f)
            }
            Dataset::Segment { images, .. } => {
                let idx = self.sample(images.len());
                let Dataset::Segment { images, targets } = &self.data else {
                    unreachable!()
                };
                let x = Tensor::stack(&idx.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
                let y = Tensor::stack(&idx.iter().map(|&i| &targets[i]).collect::<Vec<_>>())?;
                let f = self.model.segment_on_tape(&mut tape, &x, policy)?;
                let l = tape.bce(f.output, &y, BCE_EPS)?;
                let bce = tape.value(l).data()[0] as f64;
                (l, StepLoss::Segment { bce }, f)
            }
        };
        if !loss.total().is_finite() {
            return Err(TrainError::NonFinite {
                iter: iter + 1,
                what: "loss".into(),
            });
        }
        let mut grads = tape.backward(loss_var)?;
        let g: Vec<Tensor<f32>> = forward.params.iter().map(|&v| grads.take(v)).collect();
        let names: Vec<String> = self.model.params().into_iter().map(|(n, _)| n).collect();
        let mut params = self.model.params_mut();
        adam_step(&mut params, &g, &names, &mut self.adam, lr)?;
        self.model.apply_batch_stats(&forward.bn_stats);
        Ok(StepRecord {
            iter: iter + 1,
            lr,
            loss,
        })
    }

    /// Steps until `max_iters`, calling `on_step` after each iteration.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<(), TrainError>,
    ) -> Result<Vec<StepRecord>, TrainError> {
        let mut log = Vec::new();
        while !self.is_done() {
            let r = self.step()?;
            on_step(self, &r)?;
            log.push(r);
        }
        Ok(log)
    }
}

/// Trains the inpainting network from scratch and returns the final
/// checkpoint with the per-iteration loss record.
pub fn train_inpaint(
    model_config: &ModelConfig,
    config: TrainConfig,
    data: Dataset,
) -> Result<(Checkpoint, Vec<StepRecord>), TrainError> {
    if model_config.variant != Variant::PconvUnet || !matches!(data, Dataset::Inpaint { .. }) {
        return Err(TrainError::Data("train_inpaint needs a pconv_unet and image/mask data".into()));
    }
    let mut t = Trainer::new(model_config, config, data)?;
    let log = t.run(|_, _| Ok(()))?;
    Ok((t.checkpoint(), log))
}

/// Trains the segmentation network with binary cross-entropy.
pub fn train_segment(
    model_config: &ModelConfig,
    config: TrainConfig,
    data: Dataset,
) -> Result<(Checkpoint, Vec<StepRecord>), TrainError> {
    if model_config.variant != Variant::SegUnet || !matches!(data, Dataset::Segment { .. }) {
        return Err(TrainError::Data("train_segment needs a seg_unet and image/label data".into()));
    }
    let mut t = Trainer::new(model_config, config, data)?;
    let log = t.run(|_, _| Ok(()))?;
    Ok((t.checkpoint(), log))
}
