//! Training loop, evaluation and side-by-side model comparison.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::softmax_rows;
use crate::checkpoint::save_checkpoint;
use crate::data::{class_name, ImageSet, Split};
use crate::error::{config_err, data_err, Error, Result};
use crate::fusion::{argmax, build_model, Branches, FusionModel, Mode, ModelConfig, StepKey};
use crate::metrics::{classification_report, confusion_matrix, roc_per_class, ClassMetrics, ConfusionMatrix, RocCurve};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Scalar, Tensor};

/// Batch size used for evaluation passes; does not affect results.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the per-epoch batch shuffle.
    pub seed: u64,
    /// Final checkpoint location. The best-validation checkpoint goes next
    /// to it (see [`best_checkpoint_path`]). `None` keeps everything in memory.
    pub checkpoint_path: Option<PathBuf>,
    pub early_abort_on_nan: bool,
    /// Randomly mirror training images left-right (probability 0.5 each).
    pub hflip: bool,
    /// Fill `wall_seconds` in the history. Off by default so that histories
    /// of identical runs are byte-identical.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 5,
            lr: 1e-3,
            seed: 42,
            checkpoint_path: None,
            early_abort_on_nan: true,
            hflip: false,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be a positive number, got {}", self.lr));
        }
        Ok(())
    }
}

/// `model.falc` -> `model.best.falc`.
pub fn best_checkpoint_path(final_path: &Path) -> PathBuf {
    let stem = final_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match final_path.extension() {
        Some(ext) => format!("{stem}.best.{}", ext.to_string_lossy()),
        None => format!("{stem}.best"),
    };
    final_path.with_file_name(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,wall_seconds";

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.wall_seconds
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| data_err!("history CSV: {e}"))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.join(",") != HISTORY_HEADER {
            return Err(data_err!("history CSV header must be '{HISTORY_HEADER}'"));
        }
        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| data_err!("history CSV: {e}"))?;
            let num = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| data_err!("history CSV row {}: bad field {i}", line + 2))
            };
            records.push(EpochRecord {
                epoch: num(0)? as usize,
                train_loss: num(1)?,
                train_acc: num(2)?,
                val_loss: num(3)?,
                val_acc: num(4)?,
                wall_seconds: num(5)?,
            });
        }
        Ok(TrainingHistory { records })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub history: TrainingHistory,
    /// 1-based epoch whose weights `best` holds.
    pub best_epoch: usize,
    /// Model with the best validation accuracy (lower loss breaks ties), in
    /// eval mode.
    pub best: FusionModel<T>,
}

fn images_as<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    t.cast()
}

/// Mirrors each image of an N×C×H×W batch with probability 1/2, drawing
/// from a generator keyed on (seed, epoch, step).
fn hflip_random(images: &mut Tensor<f32>, seed: u64, key: StepKey) {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&key.epoch.to_le_bytes());
    bytes[16..24].copy_from_slice(&key.step.to_le_bytes());
    bytes[24..].copy_from_slice(b"hflip\0\0\0");
    let mut rng = ChaCha8Rng::from_seed(bytes);
    let (n, c, h, w) = images.dims4().expect("batches are rank 4");
    let data = images.data_mut();
    for i in 0..n {
        if rng.random::<bool>() {
            for row in data[i * c * h * w..(i + 1) * c * h * w].chunks_mut(w) {
                row.reverse();
            }
        }
    }
}

/// Mean cross-entropy and accuracy of `model` (eval mode) over a split.
fn eval_loss_acc<T: Scalar>(model: &FusionModel<T>, data: &ImageSet, split: Split) -> Result<(f64, f64)> {
    let k = model.config().num_classes;
    let (mut loss, mut correct, mut n) = (0.0, 0usize, 0usize);
    for batch in data.batches(split, EVAL_BATCH, 0, 0) {
        let batch = batch?;
        let out = model.infer(&images_as::<T>(&batch.images))?;
        let logits = out.logits.to_f64_vec();
        let (probs, logp) = softmax_rows(&logits, k);
        for (i, &y) in batch.labels.iter().enumerate() {
            loss -= logp[i * k + y];
            correct += usize::from(argmax(&probs[i * k..(i + 1) * k]) == y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(data_err!("{split} split is empty"));
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Trains `model` in place following the fixed protocol: per epoch, shuffled
/// mini-batches with Adam on the train split, then an eval-mode pass over the
/// validation split. Deterministic for a fixed model seed and `config.seed`.
pub fn train<T: Scalar>(model: &mut FusionModel<T>, data: &ImageSet, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_with_progress(model, data, config, |_| {})
}

/// [`train`] that calls `on_epoch` with every finished epoch's record.
pub fn train_with_progress<T: Scalar>(
    model: &mut FusionModel<T>,
    data: &ImageSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    for split in [Split::Train, Split::Val] {
        if data.manifest.count(split) == 0 {
            return Err(data_err!("{split} split is empty; run the stratified split first"));
        }
    }
    if data.manifest.num_classes() != model.config().num_classes {
        return Err(config_err!(
            "model has {} classes but the dataset has {}",
            model.config().num_classes,
            data.manifest.num_classes()
        ));
    }
    if data.image_size() != model.config().image_size {
        return Err(config_err!(
            "model expects {}px images but the dataset was preprocessed at {}px",
            model.config().image_size,
            data.image_size()
        ));
    }
    let hyper = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(model.params(), hyper)?;
    let k = model.config().num_classes;
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, f64, usize, FusionModel<T>)> = None;
    let start = Instant::now();

    for epoch in 0..config.epochs {
        model.set_mode(Mode::Training);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, batch) in data.batches(Split::Train, config.batch_size, config.seed, epoch as u64).enumerate() {
            let mut batch = batch?;
            let key = StepKey {
                epoch: epoch as u64,
                step: step as u64,
            };
            if config.hflip {
                hflip_random(&mut batch.images, config.seed, key);
            }
            model.set_step_key(key);
            model.params_mut().zero_grad();
            let diverged = |detail: &str| {
                Error::Numeric(format!("training diverged at epoch {} step {step}: {detail}", epoch + 1))
            };
            let out = match model.loss_and_backward(&images_as::<T>(&batch.images), &batch.labels) {
                Ok(out) if out.loss.is_finite() => out,
                Ok(_) if config.early_abort_on_nan => return Err(diverged("loss is not finite")),
                Err(Error::Numeric(msg)) if config.early_abort_on_nan => return Err(diverged(&msg)),
                Ok(_) | Err(Error::Numeric(_)) => continue,
                Err(e) => return Err(e),
            };
            adam_step(model.params_mut(), &mut adam)?;
            let nb = batch.labels.len();
            loss_sum += out.loss * nb as f64;
            let probs = out.probs.data();
            for (i, &y) in batch.labels.iter().enumerate() {
                correct += usize::from(argmax(&probs[i * k..(i + 1) * k]) == y);
            }
            seen += nb;
        }
        model.params_mut().zero_grad();
        model.set_mode(Mode::Eval);
        let (val_loss, val_acc) = eval_loss_acc(model, data, Split::Val)?;
        let (train_loss, train_acc) = if seen == 0 {
            (f64::NAN, 0.0)
        } else {
            (loss_sum / seen as f64, correct as f64 / seen as f64)
        };
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            wall_seconds: if config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        on_epoch(&history.records[history.records.len() - 1]);
        let improved = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if improved {
            if let Some(path) = &config.checkpoint_path {
                save_checkpoint(model, best_checkpoint_path(path))?;
            }
            best = Some((val_acc, val_loss, epoch + 1, model.clone()));
        }
    }
    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(model, path)?;
    }
    let (_, _, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub class_name: String,
    #[serde(flatten)]
    pub curve: RocCurve,
}

/// Everything needed for the metric table, confusion heatmap and ROC plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub class_names: Vec<String>,
    pub n_test: usize,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: ClassMetrics,
    /// One-vs-rest curve per class.
    pub roc: Vec<ClassRoc>,
    pub macro_auc: f64,
    /// Overall accuracy (trace / total).
    pub accuracy: f64,
    /// Manifest index, true label, predicted label and probability row of
    /// every evaluated sample, in manifest order.
    pub samples: Vec<SampleResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

impl EvaluationReport {
    /// Assembles the report from per-sample probability rows.
    pub fn from_predictions(class_names: Vec<String>, samples: Vec<SampleResult>) -> Result<Self> {
        let k = class_names.len();
        if samples.is_empty() {
            return Err(data_err!("no samples to evaluate"));
        }
        let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let pred: Vec<usize> = samples.iter().map(|s| s.predicted).collect();
        let confusion = confusion_matrix(&truth, &pred, k)?;
        let report = classification_report(&confusion)?;
        let probs: Vec<Vec<f64>> = samples.iter().map(|s| s.probs.clone()).collect();
        let curves = roc_per_class(&probs, &truth, k)?;
        let macro_auc = curves.iter().map(|c| c.auc).sum::<f64>() / k as f64;
        let trace: u64 = (0..k).map(|c| confusion.0[c][c]).sum();
        Ok(EvaluationReport {
            n_test: samples.len(),
            accuracy: trace as f64 / samples.len() as f64,
            roc: curves
                .into_iter()
                .zip(&class_names)
                .map(|(curve, name)| ClassRoc {
                    class_name: name.clone(),
                    curve,
                })
                .collect(),
            class_names,
            confusion,
            per_class: report.per_class,
            macro_avg: report.macro_avg,
            macro_auc,
            samples,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| data_err!("evaluation report JSON: {e}"))
    }
}

/// Runs eval-mode prediction over `split` in manifest order and assembles
/// the full metric suite from the retained probability rows.
pub fn evaluate<T: Scalar>(model: &FusionModel<T>, data: &ImageSet, split: Split) -> Result<EvaluationReport> {
    if model.mode() != Mode::Eval {
        return Err(Error::Usage("evaluate requires the model in eval mode".into()));
    }
    let k = model.config().num_classes;
    let mut samples = Vec::new();
    for batch in data.batches(split, EVAL_BATCH, 0, 0) {
        let batch = batch?;
        let out = model.infer(&images_as::<T>(&batch.images))?;
        let probs = out.probs.to_f64_vec();
        for (i, (&index, &label)) in batch.indices.iter().zip(&batch.labels).enumerate() {
            let row = probs[i * k..(i + 1) * k].to_vec();
            samples.push(SampleResult {
                index,
                label,
                predicted: argmax(&row),
                probs: row,
            });
        }
    }
    if samples.is_empty() {
        return Err(data_err!("{split} split is empty"));
    }
    let names = (0..k).map(|c| class_name(c, k)).collect();
    EvaluationReport::from_predictions(names, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    /// A class name or `Average`.
    pub class: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub branches: Branches,
    pub history: TrainingHistory,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub results: Vec<ModelResult>,
}

pub const COMPARISON_HEADER: [&str; 6] = ["model", "class", "accuracy", "precision", "recall", "f1"];

impl Comparison {
    /// Per-class rows followed by an `Average` row, for every model.
    pub fn rows(&self) -> Vec<ComparisonRow> {
        let mut rows = Vec::new();
        for r in &self.results {
            let label = r.branches.label();
            let named = r.report.class_names.iter().cloned().zip(r.report.per_class.iter().copied());
            for (class, m) in named.chain([("Average".to_string(), r.report.macro_avg)]) {
                rows.push(ComparisonRow {
                    model: label.to_string(),
                    class,
                    accuracy: m.accuracy,
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                });
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = COMPARISON_HEADER.join(",");
        out.push('\n');
        for r in self.rows() {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4}\n",
                r.model, r.class, r.accuracy, r.precision, r.recall, r.f1
            ));
        }
        out
    }

    /// Fixed-width text rendering of [`Comparison::to_csv`].
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<14} {:<14} {:>9} {:>9} {:>9} {:>9}\n",
            "Model", "Class", "Accuracy", "Precision", "Recall", "F1"
        );
        for r in self.rows() {
            out.push_str(&format!(
                "{:<14} {:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                r.model, r.class, r.accuracy, r.precision, r.recall, r.f1
            ));
        }
        out
    }

    pub fn accuracy_of(&self, branches: Branches) -> Option<f64> {
        self.results.iter().find(|r| r.branches == branches).map(|r| r.report.accuracy)
    }
}

/// Trains one model per branch setting on identical data and seeds and
/// evaluates each best-validation model on the test split.
pub fn train_and_evaluate(
    model_config: &ModelConfig,
    data: &ImageSet,
    config: &TrainConfig,
) -> Result<ModelResult> {
    train_and_evaluate_with_progress(model_config, data, config, |_| {})
}

pub fn train_and_evaluate_with_progress(
    model_config: &ModelConfig,
    data: &ImageSet,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<ModelResult> {
    let mut model = build_model::<f32>(model_config)?;
    let outcome = train_with_progress(&mut model, data, config, on_epoch)?;
    let report = evaluate(&outcome.best, data, Split::Test)?;
    Ok(ModelResult {
        branches: model_config.branches,
        history: outcome.history,
        report,
    })
}

/// ConvNeXt-only, EfficientNet-only and concatenated models, each trained
/// with the same data, seeds and protocol.
pub fn compare_models(model_config: &ModelConfig, data: &ImageSet, config: &TrainConfig) -> Result<Comparison> {
    compare_models_with_progress(model_config, data, config, |_, _| {})
}

/// [`compare_models`] reporting each epoch together with the model it belongs to.
pub fn compare_models_with_progress(
    model_config: &ModelConfig,
    data: &ImageSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(Branches, &EpochRecord),
) -> Result<Comparison> {
    let mut results = Vec::new();
    for branches in [Branches::ConvnextOnly, Branches::EfficientnetOnly, Branches::Both] {
        let mc = ModelConfig {
            branches,
            ..model_config.clone()
        };
        let cfg = TrainConfig {
            checkpoint_path: None,
            ..config.clone()
        };
        results.push(train_and_evaluate_with_progress(&mc, data, &cfg, |r| on_epoch(branches, r))?);
    }
    Ok(Comparison { results })
}
