use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Split};
use crate::error::{config_err, data_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Fraction of each class kept for training + validation; the rest is test.
    pub train_frac: f64,
    /// Fraction of the training portion carved out for validation.
    pub val_frac_of_train: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_frac: 0.8,
            val_frac_of_train: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(config_err!("split.train_frac must be in (0, 1), got {}", self.train_frac));
        }
        if !(0.0..1.0).contains(&self.val_frac_of_train) {
            return Err(config_err!(
                "split.val_frac_of_train must be in [0, 1), got {}",
                self.val_frac_of_train
            ));
        }
        Ok(())
    }
}

/// Guards `floor` against products such as 10 * (1 - 0.8) = 1.9999999999999996.
fn floor_frac(n: usize, frac: f64) -> usize {
    (n as f64 * frac + 1e-9).floor() as usize
}

/// `(train, val, test)` sizes for a class of `n` records.
///
/// Test takes `floor(n * (1 - train_frac))` and validation takes
/// `floor(rest * val_frac_of_train)`; each is raised to 1 when its fraction
/// is nonzero so every split is populated. Training keeps the remainder.
pub fn split_counts(n: usize, cfg: &SplitConfig) -> Result<(usize, usize, usize)> {
    let test = floor_frac(n, 1.0 - cfg.train_frac).max(1);
    let rest = n.saturating_sub(test);
    let val = if cfg.val_frac_of_train > 0.0 {
        floor_frac(rest, cfg.val_frac_of_train).max(1)
    } else {
        0
    };
    let min = if cfg.val_frac_of_train > 0.0 { 3 } else { 2 };
    if n < min || rest <= val {
        return Err(data_err!("a class with {n} records is too small to split (need at least {min})"));
    }
    Ok((rest - val, val, test))
}

/// Per-class shuffled split into train/val/test. Deterministic for a seed.
pub fn stratified_split(manifest: &DatasetManifest, cfg: &SplitConfig, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut out = manifest.clone();
    out.seed = seed;
    for class_id in 0..manifest.num_classes() {
        let mut members: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.class_id == class_id)
            .map(|(i, _)| i)
            .collect();
        let (train, val, test) = split_counts(members.len(), cfg).map_err(|e| {
            data_err!("class '{}': {e}", manifest.class_names[class_id])
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        members.shuffle(&mut rng);
        debug_assert_eq!(train + val + test, members.len());
        for (k, &i) in members.iter().enumerate() {
            out.records[i].split = Some(if k < test {
                Split::Test
            } else if k < test + val {
                Split::Val
            } else {
                Split::Train
            });
        }
    }
    Ok(out)
}
