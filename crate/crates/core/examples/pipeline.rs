//! Generates the synthetic dataset, trains for a few epochs and evaluates.
//!
//! `cargo run --example pipeline -- <out-dir> [epochs] [n_per_class]`

use std::time::Instant;

use falconfuse_core::data::{load_dataset, stratified_split, synth_generate, ImageSet, Split, SplitConfig, SynthConfig};
use falconfuse_core::train::{evaluate, train, TrainConfig};
use falconfuse_core::{build_model, ModelConfig};

fn main() -> falconfuse_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = std::path::PathBuf::from(args.get(1).map_or("/tmp/falconfuse-pipeline", String::as_str));
    let epochs = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(2);
    let n = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(200);
    let t = Instant::now();
    synth_generate(&out, &SynthConfig::new(n, 42))?;
    let manifest = stratified_split(&load_dataset(&out)?, &SplitConfig::default(), 42)?;
    let data = ImageSet::load(manifest, 128)?;
    println!("data ready in {:?}", t.elapsed());
    let mut model = build_model::<f32>(&ModelConfig::default())?;
    let cfg = TrainConfig {
        epochs,
        record_wall_time: true,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &data, &cfg)?;
    print!("{}", outcome.history.to_csv());
    let report = evaluate(&outcome.best, &data, Split::Test)?;
    println!("best epoch {} test acc {:.4} macro f1 {:.4}", outcome.best_epoch, report.accuracy, report.macro_avg.f1);
    Ok(())
}
