use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use falconfuse_core::checkpoint::load_checkpoint;
use falconfuse_core::config::RESOLVED_CONFIG_FILE;
use falconfuse_core::data::{
    load_dataset_with_report, preprocess, stratified_split, synth_generate, write_manifest_csv, DatasetManifest, ImageSet,
    Split, SynthConfig,
};
use falconfuse_core::fsutil::{create_dir_all, write_atomic};
use falconfuse_core::fusion::Branches;
use falconfuse_core::report::{write_evaluation_outputs, HISTORY_CSV};
use falconfuse_core::train::{
    best_checkpoint_path, compare_models_with_progress, evaluate, train_with_progress, EpochRecord, TrainingHistory,
};
use falconfuse_core::{build_model, Error, Result, RunConfig};

const CHECKPOINT_FILE: &str = "model.falc";

/// Concatenated ConvNeXt + EfficientNet classifier for falcon endoscopy images.
///
/// Exit codes: 0 success, 1 configuration or file-format error, 2 data or
/// I/O error, 3 numeric divergence during training.
#[derive(Parser, Debug)]
#[command(name = "falconfuse", version, about)]
struct Cli {
    /// Worker threads for tensor kernels. Results are bitwise identical for
    /// every thread count.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic three-class texture dataset.
    Synth {
        /// Output directory; one subdirectory per class is created.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        /// Generator seed [default: 42].
        #[arg(long, env = "FALCONFUSE_SEED")]
        seed: Option<u64>,
        /// Side length of the generated images.
        #[arg(long, default_value_t = 128)]
        image_size: usize,
    },
    /// Split, train and write checkpoints, history and the resolved config.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on the test split and write the report and plots.
    Eval {
        /// Dataset root with Normal/, Liver/ and Aspergillosis/.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the report, CSVs and plots.
        #[arg(long)]
        out: PathBuf,
        /// Run config used to rebuild the split [default: resolved_config.json
        /// next to the checkpoint].
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Classify one image.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train ConvNeXt-only, EfficientNet-only and concatenated models on the
    /// same split and tabulate their test metrics.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Flags shared by `train` and `compare`. Flags override the config file,
/// which overrides the built-in defaults.
#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset root with Normal/, Liver/ and Aspergillosis/ [default: the
    /// config's `data` field].
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON run config; unknown keys are rejected [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, histories and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the split, weight initialization and shuffling [default: 42].
    #[arg(long, env = "FALCONFUSE_SEED")]
    seed: Option<u64>,
    /// Number of epochs [default: 50].
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 5].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(data) = &self.data {
            cfg.data = Some(data.clone());
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(epochs) = self.epochs {
            cfg.train.epochs = epochs;
        }
        if let Some(batch_size) = self.batch_size {
            cfg.train.batch_size = batch_size;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        cfg.validate()?;
        let data = cfg
            .data
            .clone()
            .ok_or_else(|| Error::Config("no dataset given: pass --data or set `data` in the config".into()))?;
        Ok((cfg, data))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    falconfuse_core::parallel::set_threads(cli.threads)?;
    match cli.command {
        Command::Synth {
            out,
            n_per_class,
            seed,
            image_size,
        } => cmd_synth(&out, n_per_class, seed.unwrap_or(42), image_size),
        Command::Train { run } => cmd_train(&run),
        Command::Eval {
            data,
            checkpoint,
            out,
            config,
        } => cmd_eval(&data, &checkpoint, &out, config.as_deref()),
        Command::Predict { image, checkpoint } => cmd_predict(&image, &checkpoint),
        Command::Compare { run } => cmd_compare(&run),
    }
}

fn cmd_synth(out: &Path, n_per_class: usize, seed: u64, image_size: usize) -> Result<()> {
    let cfg = SynthConfig {
        image_size,
        ..SynthConfig::new(n_per_class, seed)
    };
    let summary = synth_generate(out, &cfg)?;
    for (name, count) in &summary.per_class {
        println!("{name}: {count}");
    }
    println!("wrote {} images to {}", summary.files.len(), summary.root.display());
    Ok(())
}

/// Loads the dataset, applies the configured split and preprocesses it.
fn load_split(data: &Path, cfg: &RunConfig) -> Result<ImageSet> {
    let (manifest, skipped) = load_dataset_with_report(data)?;
    if !skipped.is_empty() {
        eprintln!("warning: skipped {} unreadable files", skipped.len());
        for s in &skipped {
            eprintln!("  {}: {}", s.path.display(), s.reason);
        }
    }
    let manifest = stratified_split(&manifest, &cfg.split, cfg.split_seed)?;
    describe_split(&manifest);
    ImageSet::load(manifest, cfg.model.image_size)
}

fn describe_split(manifest: &DatasetManifest) {
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|&s| format!("{s} {}", manifest.count(s)))
        .collect();
    eprintln!("split: {}", counts.join(", "));
}

fn print_epoch(prefix: &str, r: &EpochRecord, total: usize) {
    eprintln!(
        "{prefix}epoch {}/{total}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
        r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
    );
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let (mut cfg, data_dir) = args.resolve()?;
    create_dir_all(&args.out)?;
    let checkpoint = args.out.join(CHECKPOINT_FILE);
    cfg.train.checkpoint_path = Some(checkpoint.clone());
    cfg.write_resolved(&args.out)?;

    let data = load_split(&data_dir, &cfg)?;
    write_atomic(args.out.join("split.csv"), write_manifest_csv(&data.manifest)?.as_bytes())?;
    let mut model = build_model::<f32>(&cfg.model)?;
    eprintln!("model: {} parameters", model.num_parameters());
    let epochs = cfg.train.epochs;
    let outcome = train_with_progress(&mut model, &data, &cfg.train, |r| print_epoch("", r, epochs))?;
    write_atomic(args.out.join(HISTORY_CSV), outcome.history.to_csv().as_bytes())?;

    let last = outcome.history.records.last().expect("at least one epoch");
    println!("final train accuracy: {:.4}", last.train_acc);
    println!("final val accuracy: {:.4}", last.val_acc);
    println!(
        "best epoch {} checkpoint: {}",
        outcome.best_epoch,
        best_checkpoint_path(&checkpoint).display()
    );
    println!("final checkpoint: {}", checkpoint.display());
    Ok(())
}

fn cmd_eval(data_dir: &Path, checkpoint: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    let sibling = |name: &str| checkpoint.parent().unwrap_or(Path::new(".")).join(name);
    let config_path = config.map_or_else(|| sibling(RESOLVED_CONFIG_FILE), Path::to_path_buf);
    let mut cfg = RunConfig::load(&config_path)?;
    // The checkpoint is authoritative for the architecture.
    cfg.model = model.config().clone();
    cfg.data = Some(data_dir.to_path_buf());
    create_dir_all(out)?;
    cfg.write_resolved(out)?;

    let data = load_split(data_dir, &cfg)?;
    let report = evaluate(&model, &data, Split::Test)?;
    let history_path = sibling(HISTORY_CSV);
    let history = if history_path.is_file() {
        let text = std::fs::read_to_string(&history_path).map_err(|e| Error::Io {
            path: history_path.clone(),
            source: e,
        })?;
        Some(TrainingHistory::from_csv(&text)?)
    } else {
        None
    };
    write_evaluation_outputs(out, &report, history.as_ref())?;

    println!("{:<14} {:>9} {:>9} {:>9} {:>9}", "class", "accuracy", "precision", "recall", "f1");
    for (name, m) in report.class_names.iter().zip(&report.per_class) {
        println!(
            "{name:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            m.accuracy, m.precision, m.recall, m.f1
        );
    }
    let m = report.macro_avg;
    println!(
        "macro accuracy={} precision={} recall={} f1={} auc={}",
        m.accuracy, m.precision, m.recall, m.f1, report.macro_auc
    );
    println!("test samples: {}, overall accuracy: {}", report.n_test, report.accuracy);
    Ok(())
}

fn cmd_predict(image: &Path, checkpoint: &Path) -> Result<()> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    let tensor = preprocess(image, model.config().image_size)?;
    let p = model.predict(&tensor)?;
    println!("class: {}", p.class_name);
    println!("confidence: {:.6}", p.confidence);
    let names = falconfuse_core::data::CLASS_NAMES;
    for (c, prob) in p.probs.iter().enumerate() {
        let name = names.get(c).copied().unwrap_or("?");
        println!("p({name}) = {prob:.9}");
    }
    Ok(())
}

fn cmd_compare(args: &RunArgs) -> Result<()> {
    let (mut cfg, data_dir) = args.resolve()?;
    cfg.train.checkpoint_path = None;
    create_dir_all(&args.out)?;
    cfg.write_resolved(&args.out)?;

    let data = load_split(&data_dir, &cfg)?;
    let epochs = cfg.train.epochs;
    let comparison = compare_models_with_progress(&cfg.model, &data, &cfg.train, |b: Branches, r| {
        print_epoch(&format!("[{}] ", b.label()), r, epochs)
    })?;
    for r in &comparison.results {
        let name = format!("history_{}.csv", r.branches.label().to_lowercase());
        write_atomic(args.out.join(name), r.history.to_csv().as_bytes())?;
    }
    write_atomic(args.out.join("comparison.csv"), comparison.to_csv().as_bytes())?;
    print!("{}", comparison.to_table());
    Ok(())
}
