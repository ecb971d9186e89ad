//! Acceptance suite. Runs all nine criteria in order and prints one
//! `PASS`/`FAIL` line per criterion; exits non-zero if any fails.
//!
//! Criteria 5 and 6 train the default model on 600 synthetic images with the
//! full 50-epoch protocol (one run for 5, up to eight more for 6), so a full
//! pass takes well over an hour on a single core.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use falconfuse_core::checkpoint::{load_checkpoint, save_checkpoint};
use falconfuse_core::data::{
    load_dataset, preprocess, split_counts, stratified_split, synth_generate, DatasetManifest, ImageSet, Record, Split,
    SplitConfig, SynthConfig, CLASS_NAMES, IMAGE_SIZE,
};
use falconfuse_core::fusion::{Branches, Mode};
use falconfuse_core::train::{evaluate, train, train_and_evaluate_with_progress, EpochRecord, EvaluationReport, TrainConfig};
use falconfuse_core::{build_model, parallel, FusionModel, ModelConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn progress(label: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r| {
        if r.epoch % 10 == 0 || r.epoch == 1 {
            eprintln!(
                "    [{label}] epoch {:>2}: train acc {:.4} loss {:.4}, val acc {:.4} loss {:.4}",
                r.epoch, r.train_acc, r.train_loss, r.val_acc, r.val_loss
            );
        }
    }
}

/// A manifest with `counts[c]` placeholder records for class `c`.
fn fake_manifest(counts: &[usize]) -> DatasetManifest {
    let records = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| {
            (0..n).map(move |i| Record {
                path: PathBuf::from(format!("{}/{i:04}.png", CLASS_NAMES[c])),
                class_id: c,
                split: None,
            })
        })
        .collect();
    DatasetManifest {
        root: PathBuf::from("."),
        records,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed: 0,
    }
}

fn criterion_1() -> Outcome {
    common::grad::all_ops();
    common::grad::full_model_training_mode();
    common::grad::full_model_eval_mode();
    Ok("every op within 1e-5, ConvNeXt block, MBConv block and head within 1e-4 end to end, in both modes".into())
}

fn criterion_2() -> Outcome {
    common::oracle::conv_equivalence();
    common::oracle::report_equivalence(100);
    common::oracle::auc_equivalence(30);
    common::oracle::confusion_equivalence(100);
    Ok("conv2d (1e-5), 100 classification reports (exact), 30 AUC sets (1e-9), 100 confusion matrices (exact)".into())
}

fn criterion_3() -> Outcome {
    let t = TrainConfig::default();
    ensure(t.epochs == 50 && t.batch_size == 5, format!("train defaults {} epochs, batch {}", t.epochs, t.batch_size))?;
    let m = ModelConfig::default();
    ensure(m.image_size == 128 && IMAGE_SIZE == 128, format!("image size {}", m.image_size))?;
    ensure(SynthConfig::new(10, 0).image_size == 128, "synthetic images are not 128 px")?;
    ensure(CLASS_NAMES == ["Normal", "Liver", "Aspergillosis"], format!("classes {CLASS_NAMES:?}"))?;
    ensure(m.num_classes == 3, "model does not have 3 classes")?;

    let cfg = SplitConfig::default();
    for counts in [[200, 200, 200], [210, 200, 200], [17, 33, 101]] {
        let split = stratified_split(&fake_manifest(&counts), &cfg, 42).map_err(err)?;
        let test = split.class_counts(Some(Split::Test));
        let fit: Vec<usize> = [Split::Train, Split::Val]
            .iter()
            .map(|&s| split.class_counts(Some(s)))
            .fold(vec![0; 3], |acc, v| acc.iter().zip(v).map(|(a, b)| a + b).collect());
        for c in 0..3 {
            let n = counts[c] as f64;
            ensure(
                (test[c] as f64 - 0.2 * n).abs() <= 1.0 && (fit[c] as f64 - 0.8 * n).abs() <= 1.0,
                format!("class {c} of {counts:?}: {} test, {} train+val", test[c], fit[c]),
            )?;
        }
        ensure(split.records.iter().all(|r| r.split.is_some()), "unassigned records after split")?;
    }
    let test_610: usize = [210, 200, 200].iter().map(|&n| split_counts(n, &cfg).unwrap().2).sum();
    let test_600: usize = (0..3).map(|_| split_counts(200, &cfg).unwrap().2).sum();
    ensure(test_610 == 122 && test_600 == 120, format!("test sizes {test_610} / {test_600}"))?;
    Ok("50 epochs, batch 5, 128x128, [Normal, Liver, Aspergillosis], 80/20 per class (610 -> 122 test, 600 -> 120)".into())
}

fn criterion_4(tmp: &Path) -> Outcome {
    let root = tmp.join("memorize");
    synth_generate(&root, &SynthConfig::new(10, 7)).map_err(err)?;
    let full = load_dataset(&root).map_err(err)?;
    // Four images per class; the same twelve double as the validation split
    // so the per-epoch eval pass measures eval-mode training accuracy.
    let chosen: Vec<Record> = (0..3)
        .flat_map(|c| full.records.iter().filter(move |r| r.class_id == c).take(4).cloned())
        .collect();
    let mut records = Vec::new();
    for split in [Split::Train, Split::Val] {
        records.extend(chosen.iter().map(|r| Record { split: Some(split), ..r.clone() }));
    }
    let images = records.iter().map(|r| preprocess(&r.path, IMAGE_SIZE)).collect::<Result<Vec<_>, _>>().map_err(err)?;
    let data = ImageSet::from_tensors(DatasetManifest { records, ..full }, images).map_err(err)?;
    let mut model = build_model::<f32>(&ModelConfig::default()).map_err(err)?;
    let outcome = train(&mut model, &data, &TrainConfig::default()).map_err(err)?;
    let first = outcome.history.records.iter().find(|r| r.val_acc == 1.0).map(|r| r.epoch);
    let best = outcome.history.records.iter().map(|r| r.val_acc).fold(0.0, f64::max);
    match first {
        Some(epoch) => Ok(format!("12/12 training images correct (eval mode) first at epoch {epoch}")),
        None => Err(format!("best training accuracy {best:.4} after 50 epochs")),
    }
}

/// The synthetic gate dataset and the default model trained on it.
struct Gate {
    data: ImageSet,
    trained: Option<(FusionModel<f32>, EvaluationReport)>,
}

fn load_gate_data(tmp: &Path) -> Result<ImageSet, String> {
    let root = tmp.join("gate");
    synth_generate(&root, &SynthConfig::new(200, 42)).map_err(err)?;
    let manifest = stratified_split(&load_dataset(&root).map_err(err)?, &SplitConfig::default(), 42).map_err(err)?;
    ImageSet::load(manifest, IMAGE_SIZE).map_err(err)
}

fn criterion_5(gate: &mut Gate) -> Outcome {
    let mut model = build_model::<f32>(&ModelConfig::default()).map_err(err)?;
    let outcome = falconfuse_core::train::train_with_progress(&mut model, &gate.data, &TrainConfig::default(), progress("gate"))
        .map_err(err)?;
    let report = evaluate(&outcome.best, &gate.data, Split::Test).map_err(err)?;
    let (acc, f1) = (report.accuracy, report.macro_avg.f1);
    let detail = format!(
        "test accuracy {acc:.4}, macro F1 {f1:.4} on {} images (best epoch {})",
        report.n_test, outcome.best_epoch
    );
    gate.trained = Some((outcome.best, report));
    ensure(acc >= 0.90 && f1 >= 0.88, detail.clone())?;
    Ok(detail)
}

fn criterion_6(gate: &Gate) -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in [42u64, 43, 44] {
        let model = ModelConfig { seed, ..ModelConfig::default() };
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let acc = |branches: Branches| -> Result<f64, String> {
            if branches == Branches::Both && seed == 42 {
                if let Some((_, report)) = &gate.trained {
                    return Ok(report.accuracy);
                }
            }
            let label = format!("{} seed {seed}", branches.label());
            let mc = ModelConfig { branches, ..model.clone() };
            let r = train_and_evaluate_with_progress(&mc, &gate.data, &cfg, progress(&label)).map_err(err)?;
            eprintln!("    [{label}] test accuracy {:.4}", r.report.accuracy);
            Ok(r.report.accuracy)
        };
        let a = acc(Branches::ConvnextOnly)?;
        let b = acc(Branches::EfficientnetOnly)?;
        let both = acc(Branches::Both)?;
        let strict = both > a.max(b);
        lines.push(format!(
            "seed {seed}: ConvNeXt {a:.4}, EfficientNet {b:.4}, Concatenated {both:.4}{}",
            if strict { "" } else { " (not strictly best)" }
        ));
        if both < a.max(b) - 0.02 {
            failures.push(seed);
        }
    }
    let detail = lines.join("; ");
    ensure(failures.is_empty(), format!("below max - 0.02 for seeds {failures:?}: {detail}"))?;
    Ok(detail)
}

fn criterion_7(tmp: &Path) -> Outcome {
    parallel::set_threads(1).map_err(err)?;
    let root = tmp.join("determinism");
    synth_generate(&root, &SynthConfig::new(10, 3)).map_err(err)?;
    let manifest = stratified_split(&load_dataset(&root).map_err(err)?, &SplitConfig::default(), 42).map_err(err)?;
    let data = ImageSet::load(manifest, IMAGE_SIZE).map_err(err)?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let ckpt = tmp.join(format!("determinism-run{run}/model.falc"));
        let cfg = TrainConfig { epochs: 3, checkpoint_path: Some(ckpt.clone()), ..TrainConfig::default() };
        let mut model = build_model::<f32>(&ModelConfig::default()).map_err(err)?;
        let outcome = train(&mut model, &data, &cfg).map_err(err)?;
        let best = falconfuse_core::train::best_checkpoint_path(&ckpt);
        outputs.push((
            std::fs::read(&ckpt).map_err(err)?,
            std::fs::read(&best).map_err(err)?,
            outcome.history.to_csv(),
        ));
    }
    ensure(outputs[0].0 == outputs[1].0, "final checkpoints differ")?;
    ensure(outputs[0].1 == outputs[1].1, "best checkpoints differ")?;
    ensure(outputs[0].2 == outputs[1].2, "history CSVs differ")?;
    Ok(format!(
        "two 3-epoch runs: checkpoints ({} bytes) and history CSVs byte-identical",
        outputs[0].0.len()
    ))
}

/// Fifty test images spread evenly over the test split, so every class is
/// present.
fn fifty_test_samples(data: &ImageSet) -> Result<ImageSet, String> {
    let test = data.manifest.indices(Split::Test);
    ensure(test.len() >= 50, format!("only {} test images", test.len()))?;
    let keep: Vec<usize> = (0..50).map(|i| test[i * test.len() / 50]).collect();
    let mut manifest = data.manifest.clone();
    for (i, r) in manifest.records.iter_mut().enumerate() {
        if r.split == Some(Split::Test) && !keep.contains(&i) {
            r.split = None;
        }
    }
    let images = (0..manifest.records.len()).map(|i| data.image(i).clone()).collect();
    ImageSet::from_tensors(manifest, images).map_err(err)
}

fn trained_or_fresh(gate: &Gate) -> Result<(FusionModel<f32>, &'static str), String> {
    match &gate.trained {
        Some((model, _)) => Ok((model.clone(), "gate model")),
        None => Ok((build_model::<f32>(&ModelConfig::default()).map_err(err)?, "untrained model (gate run failed)")),
    }
}

fn criterion_8(gate: &Gate, tmp: &Path) -> Outcome {
    let (model, which) = trained_or_fresh(gate)?;
    let path = tmp.join("roundtrip.falc");
    save_checkpoint(&model, &path).map_err(err)?;
    let loaded = load_checkpoint::<f32>(&path).map_err(err)?;
    ensure(loaded.config() == model.config(), "config changed")?;
    ensure(loaded.mode() == Mode::Eval, "loaded model is not in eval mode")?;
    let mut count = 0;
    for ((_, a), (_, b)) in model.params().iter().zip(loaded.params().iter()) {
        ensure(a.name == b.name && a.value.shape() == b.value.shape(), format!("{} differs in name or shape", a.name))?;
        let bits = |t: &falconfuse_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a.value) == bits(&b.value), format!("{} differs bitwise", a.name))?;
        count += a.value.numel();
    }
    ensure(model.params().len() == loaded.params().len(), "parameter count changed")?;
    let subset = fifty_test_samples(&gate.data)?;
    let before = evaluate(&model, &subset, Split::Test).map_err(err)?;
    let after = evaluate(&loaded, &subset, Split::Test).map_err(err)?;
    ensure(before.n_test == 50, format!("evaluated {} samples", before.n_test))?;
    ensure(before == after, "evaluation reports differ")?;
    Ok(format!("{which}: {count} values bitwise equal, identical report on 50 samples"))
}

fn criterion_9(gate: &Gate) -> Outcome {
    let (model, which) = trained_or_fresh(gate)?;
    let report = match &gate.trained {
        Some((_, r)) => r.clone(),
        None => evaluate(&model, &gate.data, Split::Test).map_err(err)?,
    };
    let truth = gate.data.manifest.class_counts(Some(Split::Test));
    for (c, &n) in truth.iter().enumerate() {
        ensure(report.confusion.row_sum(c) == n as u64, format!("row {c} sums to {}, {n} true", report.confusion.row_sum(c)))?;
    }
    let k = report.per_class.len() as f64;
    for m in 0..4 {
        let mean = report.per_class.iter().map(|c| c.values()[m]).sum::<f64>() / k;
        ensure((report.macro_avg.values()[m] - mean).abs() <= 1e-9, format!("macro metric {m} is not the class mean"))?;
    }
    for roc in &report.roc {
        let pts = &roc.curve.points;
        ensure(pts.first() == Some(&(0.0, 0.0)) && pts.last() == Some(&(1.0, 1.0)), format!("{} ROC endpoints", roc.class_name))?;
        ensure(
            pts.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1),
            format!("{} ROC is not monotone", roc.class_name),
        )?;
    }
    let mut batches = 0;
    for batch in gate.data.batches(Split::Test, 5, 0, 0) {
        let out = model.infer(&batch.map_err(err)?.images).map_err(err)?;
        for row in out.probs.data().chunks(3) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            ensure((s - 1.0).abs() <= 1e-6, format!("probability row sums to {s}"))?;
        }
        batches += 1;
    }
    for s in &report.samples {
        ensure((s.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6, format!("sample {} probabilities", s.index))?;
    }
    Ok(format!(
        "{which}: row sums, macro means, {} monotone ROC curves, {batches} batches of normalized probabilities",
        report.roc.len()
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let tmp = tmp.path();
    let mut results: Vec<(u8, &str, Outcome, f64)> = Vec::new();
    let mut gate = Gate {
        data: match load_gate_data(tmp) {
            Ok(d) => d,
            Err(e) => {
                println!("acceptance: cannot build the synthetic gate dataset: {e}");
                std::process::exit(1);
            }
        },
        trained: None,
    };

    let mut run = |n: u8, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        eprintln!("criterion {n} ({name}) running");
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        let secs = start.elapsed().as_secs_f64();
        match &outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS {detail} [{secs:.1} s]"),
            Err(detail) => println!("criterion {n} ({name}): FAIL {detail} [{secs:.1} s]"),
        }
        results.push((n, name, outcome, secs));
    };

    run(1, "gradient correctness", &mut criterion_1);
    run(2, "oracle equivalence", &mut criterion_2);
    run(3, "protocol fidelity", &mut criterion_3);
    run(4, "memorization gate", &mut || criterion_4(tmp));
    run(5, "synthetic end-to-end gate", &mut || criterion_5(&mut gate));
    run(6, "fusion trend", &mut || criterion_6(&gate));
    run(7, "determinism", &mut || criterion_7(tmp));
    run(8, "checkpoint round-trip", &mut || criterion_8(&gate, tmp));
    run(9, "report integrity", &mut || criterion_9(&gate));

    println!();
    for (n, name, outcome, _) in &results {
        println!("{} criterion {n}: {name}", if outcome.is_ok() { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
