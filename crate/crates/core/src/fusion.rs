//! The concatenated two-branch classifier.
//!
//! Both branches see the same normalized input. Their pooled features are
//! concatenated (`branch_a` first), passed through dropout and a single
//! dense layer, and turned into class probabilities by softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Tape, Var};
use crate::config::limits::{MAX_CLASSES, MAX_IMAGE_SIZE};
use crate::convnext::{ConvNeXt, ConvNeXtConfig};
use crate::data::class_name;
use crate::efficientnet::{EfficientNet, EfficientNetConfig};
use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::{apply_bn_updates, Ctx, Dense, PendingStats};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const BRANCH_A_PREFIX: &str = "branch_a";
pub const BRANCH_B_PREFIX: &str = "branch_b";
pub const HEAD_PREFIX: &str = "head";

/// Which feature extractors feed the head. Single-branch variants exist for
/// side-by-side comparison with the fused model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    #[default]
    Both,
    ConvnextOnly,
    EfficientnetOnly,
}

impl Branches {
    pub fn label(self) -> &'static str {
        match self {
            Branches::Both => "Concatenated",
            Branches::ConvnextOnly => "ConvNeXt",
            Branches::EfficientnetOnly => "EfficientNet",
        }
    }

    fn uses_a(self) -> bool {
        self != Branches::EfficientnetOnly
    }

    fn uses_b(self) -> bool {
        self != Branches::ConvnextOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub convnext: ConvNeXtConfig,
    pub efficientnet: EfficientNetConfig,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Side length of the square input image.
    pub image_size: usize,
    pub branches: Branches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            convnext: ConvNeXtConfig::default(),
            efficientnet: EfficientNetConfig::default(),
            num_classes: 3,
            dropout_rate: 0.2,
            seed: 42,
            image_size: 128,
            branches: Branches::Both,
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter model on 16×16 inputs with the same layer
    /// types as the default. Meant for quick experiments and tests.
    pub fn tiny() -> Self {
        use crate::efficientnet::MBConvSpec;
        ModelConfig {
            convnext: ConvNeXtConfig {
                stage_depths: vec![1, 1],
                stage_widths: vec![8, 16],
                stem_patch: 2,
                expansion_ratio: 2,
                layer_scale_init: 0.5,
            },
            efficientnet: EfficientNetConfig {
                base_blocks: vec![
                    MBConvSpec::new(1, 3, 1, 8, 8, 1),
                    MBConvSpec::new(4, 3, 2, 8, 16, 1),
                ],
                stem_width: 8,
                head_width: 16,
                depth_coeff: 1.0,
                width_coeff: 1.0,
            },
            image_size: 16,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(config_err!("num_classes must be in 2..={MAX_CLASSES}, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(config_err!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(1..=MAX_IMAGE_SIZE).contains(&self.image_size) {
            return Err(config_err!("image_size must be in 1..={MAX_IMAGE_SIZE}, got {}", self.image_size));
        }
        if self.branches.uses_a() {
            self.convnext.validate()?;
            self.convnext.check_input_size(self.image_size)?;
        }
        if self.branches.uses_b() {
            self.efficientnet.validate()?;
            self.efficientnet.check_input_size(self.image_size)?;
        }
        Ok(())
    }

    /// Width of the vector entering the head.
    pub fn feature_dim(&self) -> Result<usize> {
        let a = if self.branches.uses_a() { self.convnext.output_dim() } else { 0 };
        let b = if self.branches.uses_b() { self.efficientnet.output_dim()? } else { 0 };
        Ok(a + b)
    }

    /// Closed-form trainable parameter count of the whole model.
    pub fn param_count(&self) -> Result<usize> {
        let a = if self.branches.uses_a() { self.convnext.param_count() } else { 0 };
        let b = if self.branches.uses_b() {
            crate::efficientnet::compound_scale(&self.efficientnet)?.param_count()
        } else {
            0
        };
        let d = self.feature_dim()?;
        Ok(a + b + d * self.num_classes + self.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Eval,
}

/// Identifies one training step for the dropout RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepKey {
    pub epoch: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_index: usize,
    pub class_name: String,
    pub confidence: f64,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub loss: f64,
    pub probs: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FusionModel<T: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    convnext: Option<ConvNeXt>,
    efficientnet: Option<EfficientNet>,
    head: Dense,
    mode: Mode,
    step_key: StepKey,
}

/// Constructs a model with deterministically initialized parameters:
/// He-uniform conv/dense weights, zero biases, unit/zero norm affines and
/// layer scales at `layer_scale_init`.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<FusionModel<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let convnext = if config.branches.uses_a() {
        Some(ConvNeXt::new(&mut b.scope(BRANCH_A_PREFIX), &config.convnext)?)
    } else {
        None
    };
    let efficientnet = if config.branches.uses_b() {
        Some(EfficientNet::new(&mut b.scope(BRANCH_B_PREFIX), &config.efficientnet)?)
    } else {
        None
    };
    let head = Dense::new(&mut b.scope(HEAD_PREFIX), "dense", config.feature_dim()?, config.num_classes)?;
    Ok(FusionModel {
        config: config.clone(),
        store,
        convnext,
        efficientnet,
        head,
        mode: Mode::Eval,
        step_key: StepKey::default(),
    })
}

fn dropout_rng(seed: u64, key: StepKey) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&key.epoch.to_le_bytes());
    bytes[16..24].copy_from_slice(&key.step.to_le_bytes());
    bytes[24..].copy_from_slice(b"dropout\0");
    ChaCha8Rng::from_seed(bytes)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> FusionModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Key for the dropout mask used by the next training-mode pass.
    pub fn set_step_key(&mut self, key: StepKey) {
        self.step_key = key;
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim().expect("validated at build time")
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        match *shape {
            [n, 3, h, w] if n > 0 && h == s && w == s => Ok(()),
            _ => Err(shape_err!(
                "expected input N×3×{s}×{s} with N >= 1, got {shape:?}"
            )),
        }
    }

    /// Records the pooled, concatenated feature vector.
    fn record_features(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let a = match &self.convnext {
            Some(net) => Some(net.forward(ctx, images)?),
            None => None,
        };
        let b = match &self.efficientnet {
            Some(net) => Some(net.forward(ctx, images)?),
            None => None,
        };
        match (a, b) {
            (Some(a), Some(b)) => ctx.tape.concat(a, b),
            (Some(f), None) | (None, Some(f)) => Ok(f),
            (None, None) => Err(config_err!("model has no feature branch")),
        }
    }

    /// Records a full forward pass, returning the logits node and any
    /// batch-norm statistics to fold in afterwards.
    fn record(&self, tape: &mut Tape<T>, images: &Tensor<T>, training: bool) -> Result<(Var, Vec<PendingStats<T>>)> {
        self.check_input(images.shape())?;
        let input = tape.constant(images.clone());
        let mut ctx = Ctx::new(tape, &self.store, training);
        let mut h = self.record_features(&mut ctx, input)?;
        if training && self.config.dropout_rate > 0.0 {
            let mut rng = dropout_rng(self.config.seed, self.step_key);
            h = ctx.tape.dropout(h, self.config.dropout_rate, &mut rng)?;
        }
        let logits = self.head.forward(&mut ctx, h)?;
        let updates = std::mem::take(&mut ctx.bn_updates);
        Ok((logits, updates))
    }

    /// Forward pass in the current mode. Training mode applies dropout and
    /// updates batch-norm running statistics.
    pub fn forward(&mut self, images: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let training = self.mode == Mode::Training;
        let mut tape = Tape::new();
        let (logits, updates) = self.record(&mut tape, images, training)?;
        if training {
            apply_bn_updates(&mut self.store, updates);
        }
        let logits = tape.value(logits).clone();
        Ok(self.with_probs(logits))
    }

    /// Eval-mode forward that never mutates the model.
    pub fn infer(&self, images: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let (logits, _) = self.record(&mut tape, images, false)?;
        let logits = tape.value(logits).clone();
        Ok(self.with_probs(logits))
    }

    fn with_probs(&self, logits: Tensor<T>) -> ForwardOutput<T> {
        let k = self.config.num_classes;
        let (probs, _) = softmax_rows(logits.data(), k);
        let probs = Tensor::new(logits.shape().to_vec(), probs).expect("same shape as logits");
        ForwardOutput { logits, probs }
    }

    /// Eval-mode fused feature vectors (the head input), N×D.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let mut tape = Tape::new();
        let input = tape.constant(images.clone());
        let mut ctx = Ctx::new(&mut tape, &self.store, false);
        let f = self.record_features(&mut ctx, input)?;
        Ok(tape.value(f).clone())
    }

    /// Classifies one 3×S×S image. Requires eval mode.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction> {
        if self.mode != Mode::Eval {
            return Err(Error::Usage("predict requires the model in eval mode".into()));
        }
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(shape_err!("expected image 3×{s}×{s}, got {:?}", image.shape()));
        }
        let batch = image.clone().reshape([1, 3, s, s])?;
        let out = self.infer(&batch)?;
        Ok(prediction_from_probs(&out.probs.to_f64_vec(), self.config.num_classes))
    }

    /// Loss of a labeled batch without touching model state. Uses the
    /// current mode and step key.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let (logits, _) = self.record(&mut tape, images, self.mode == Mode::Training)?;
        let (loss, _) = tape.softmax_cross_entropy(logits, labels)?;
        Ok(tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN))
    }

    /// Forward + cross-entropy + backward. Gradients are added to the
    /// parameter store; in training mode running statistics are updated.
    pub fn loss_and_backward(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<StepOutput<T>> {
        let training = self.mode == Mode::Training;
        let mut tape = Tape::new();
        let (logits, updates) = self.record(&mut tape, images, training)?;
        let (loss, probs) = tape.softmax_cross_entropy(logits, labels)?;
        let loss_value = tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        tape.backward(loss)?;
        self.store.collect_grads(&tape);
        if training {
            apply_bn_updates(&mut self.store, updates);
        }
        Ok(StepOutput { loss: loss_value, probs })
    }
}

/// Argmax class with confidence; ties resolve to the lowest class index.
pub fn prediction_from_probs(probs: &[f64], num_classes: usize) -> Prediction {
    let class_index = argmax(probs);
    Prediction {
        class_index,
        class_name: class_name(class_index, num_classes),
        confidence: probs[class_index],
        probs: probs.to_vec(),
    }
}
