//! Procedural three-class texture dataset.
//!
//! * `Normal`: smooth radial intensity gradients (low frequency).
//! * `Liver`: oriented sinusoidal stripes (mid frequency).
//! * `Aspergillosis`: fields of small speckled blobs (high frequency).
//!
//! Every image gets a random affine jitter of its texture coordinates, a
//! random brightness offset and tint, and additive Gaussian pixel noise.

use std::f64::consts::PI;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CLASS_NAMES;
use crate::error::{config_err, data_err, Result};
use crate::fsutil::{create_dir_all, write_atomic};

pub const GEN_PARAMS_FILE: &str = "gen_params.json";
pub const MIN_PER_CLASS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise, in [0, 1] intensity units.
    pub noise_amplitude: f64,
    /// Half-width of the per-image brightness offset.
    pub brightness_jitter: f64,
    /// Rotation range in radians.
    pub rotation: (f64, f64),
    pub scale: (f64, f64),
    /// Translation range as a fraction of the half-width.
    pub translate: (f64, f64),
}

impl SynthConfig {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        SynthConfig {
            n_per_class,
            image_size: super::IMAGE_SIZE,
            seed,
            noise_amplitude: 0.08,
            brightness_jitter: 0.08,
            rotation: (-0.5, 0.5),
            scale: (0.85, 1.15),
            translate: (-0.15, 0.15),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub per_class: Vec<(String, usize)>,
    pub files: Vec<PathBuf>,
}

struct Jitter {
    cos: f64,
    sin: f64,
    scale: f64,
    tx: f64,
    ty: f64,
}

impl Jitter {
    fn sample(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let theta = rng.random_range(cfg.rotation.0..=cfg.rotation.1);
        Jitter {
            cos: theta.cos(),
            sin: theta.sin(),
            scale: rng.random_range(cfg.scale.0..=cfg.scale.1),
            tx: rng.random_range(cfg.translate.0..=cfg.translate.1),
            ty: rng.random_range(cfg.translate.0..=cfg.translate.1),
        }
    }

    /// Maps pixel-center coordinates in [-1, 1]² into texture space.
    fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let (u, v) = (u - self.tx, v - self.ty);
        ((self.cos * u + self.sin * v) / self.scale, (-self.sin * u + self.cos * v) / self.scale)
    }
}

/// Intensity field in [0, 1]-ish units for one class, before tint and noise.
fn texture(class_id: usize, size: usize, rng: &mut ChaCha8Rng, jitter: &Jitter) -> Vec<f64> {
    let coord = |i: usize| (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
    let mut field = vec![0.0; size * size];
    match class_id {
        0 => {
            let sigma = rng.random_range(0.35..0.7);
            let base = rng.random_range(0.15..0.3);
            let amp = rng.random_range(0.45..0.65);
            let (cx, cy) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = jitter.apply(coord(x), coord(y));
                    let r2 = (u - cx).powi(2) + (v - cy).powi(2);
                    field[y * size + x] = base + amp * (-r2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        1 => {
            // Period 10..20 px at 128 px, expressed in texture units.
            let period_px = rng.random_range(10.0..20.0);
            let freq = size as f64 / (2.0 * period_px);
            let phi = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.18..0.28);
            let (dx, dy) = (phi.cos(), phi.sin());
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = jitter.apply(coord(x), coord(y));
                    let t = 2.0 * PI * freq * (u * dx + v * dy) + phase;
                    field[y * size + x] = 0.45 + amp * t.sin();
                }
            }
        }
        _ => {
            let count = rng.random_range(25..45);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
                .map(|_| {
                    let r_px: f64 = rng.random_range(2.0..4.5);
                    (
                        rng.random_range(-1.1..1.1),
                        rng.random_range(-1.1..1.1),
                        r_px * 2.0 / size as f64,
                        rng.random_range(0.3..0.55),
                    )
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = jitter.apply(coord(x), coord(y));
                    let mut val = 0.28;
                    for &(bx, by, r, a) in &blobs {
                        let d2 = (u - bx).powi(2) + (v - by).powi(2);
                        if d2 < 9.0 * r * r {
                            val += a * (-d2 / (2.0 * r * r)).exp();
                        }
                    }
                    field[y * size + x] = val;
                }
            }
            // Speckle: sparse single-pixel flecks.
            for v in field.iter_mut() {
                if rng.random::<f64>() < 0.04 {
                    *v += rng.random_range(0.15..0.35);
                }
            }
        }
    }
    field
}

/// Renders one RGB8 image for `class_id`.
pub(crate) fn render(cfg: &SynthConfig, class_id: usize, index: usize) -> Vec<u8> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&cfg.seed.to_le_bytes());
    key[8..16].copy_from_slice(&(class_id as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(index as u64).to_le_bytes());
    key[24..].copy_from_slice(b"synthimg");
    let mut rng = ChaCha8Rng::from_seed(key);

    let size = cfg.image_size;
    let jitter = Jitter::sample(cfg, &mut rng);
    let field = texture(class_id, size, &mut rng, &jitter);
    let offset = rng.random_range(-cfg.brightness_jitter..=cfg.brightness_jitter);
    let tint = [1.0, rng.random_range(0.65..0.9), rng.random_range(0.55..0.8)];
    let noise = Normal::new(0.0, cfg.noise_amplitude.max(0.0)).expect("finite noise amplitude");
    let mut out = Vec::with_capacity(size * size * 3);
    for &v in &field {
        for &t in &tint {
            let px = (v + offset) * t + noise.sample(&mut rng);
            out.push((px.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn encode_png(rgb: Vec<u8>, size: usize) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(size as u32, size as u32, rgb)
        .ok_or_else(|| config_err!("rendered buffer does not match image size"))?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| config_err!("png encoding failed: {e}"))?;
    Ok(buf.into_inner())
}

/// Writes `<out>/<ClassName>/<class>_<nnnn>.png` for every class plus a
/// `gen_params.json` sidecar describing the generator settings.
pub fn synth_generate(out_dir: impl AsRef<Path>, cfg: &SynthConfig) -> Result<SynthSummary> {
    if cfg.n_per_class < MIN_PER_CLASS {
        return Err(data_err!(
            "n_per_class must be at least {MIN_PER_CLASS}, got {}",
            cfg.n_per_class
        ));
    }
    if cfg.image_size == 0 {
        return Err(config_err!("image_size must be positive"));
    }
    let root = out_dir.as_ref();
    let mut files = Vec::new();
    let mut per_class = Vec::new();
    for (class_id, name) in CLASS_NAMES.iter().enumerate() {
        let dir = root.join(name);
        create_dir_all(&dir)?;
        for i in 0..cfg.n_per_class {
            let png = encode_png(render(cfg, class_id, i), cfg.image_size)?;
            let path = dir.join(format!("{}_{i:04}.png", name.to_lowercase()));
            write_atomic(&path, &png)?;
            files.push(path);
        }
        per_class.push((name.to_string(), cfg.n_per_class));
    }
    let params = serde_json::to_vec_pretty(cfg).expect("config serializes");
    write_atomic(root.join(GEN_PARAMS_FILE), &params)?;
    Ok(SynthSummary {
        root: root.to_path_buf(),
        per_class,
        files,
    })
}
