//! Binary model checkpoints.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "FALC"  u16 version = 1
//! u32 config length, UTF-8 JSON ModelConfig
//! u32 record count
//! per record: u16 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//!             u8 rank, u32 dims[rank], raw scalars
//! ```
//!
//! Records cover trainable parameters and batch-norm running statistics in
//! model construction order.

use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::fsutil::write_atomic;
use crate::fusion::{build_model, FusionModel, ModelConfig};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FALC";
pub const VERSION: u16 = 1;

/// One named tensor as stored on disk, values widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub records: Vec<Record>,
}

pub fn encode_checkpoint<T: Scalar>(model: &FusionModel<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config()).map_err(|e| format_err!("config encoding: {e}"))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(config.len(), "config")?.to_le_bytes());
    out.extend_from_slice(&config);
    let params = model.params();
    out.extend_from_slice(&u32_len(params.len(), "record count")?.to_le_bytes());
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| format_err!("parameter name too long: {}", p.name))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.code());
        let rank = u8::try_from(p.value.rank()).map_err(|_| format_err!("rank too large: {}", p.name))?;
        out.push(rank);
        for &d in p.value.shape() {
            out.extend_from_slice(&u32_len(d, &p.name)?.to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| format_err!("{what} exceeds u32 range"))
}

/// Writes the checkpoint atomically: a reader never sees a partial file.
pub fn save_checkpoint<T: Scalar>(model: &FusionModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err!("truncated checkpoint while reading {what}"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses checkpoint bytes without building a model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(format_err!("not a checkpoint: bad magic"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(format_err!("unsupported checkpoint version {version}, expected {VERSION}"));
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config")?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| format_err!("invalid config in checkpoint: {e}"))?;
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(r.remaining() / 8));
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| format_err!("record {i} name is not UTF-8"))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| format_err!("parameter '{name}' has unknown dtype code {code}"))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format_err!("parameter '{name}' shape overflows"))?;
        let width = dtype.size_bytes();
        let nbytes = numel
            .checked_mul(width)
            .ok_or_else(|| format_err!("parameter '{name}' shape overflows"))?;
        let raw = r.take(nbytes, &format!("data of '{name}'"))?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(width).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(width).map(f64::read_le).collect(),
        };
        records.push(Record {
            name,
            dtype,
            shape,
            data,
        });
    }
    if r.remaining() != 0 {
        return Err(format_err!("{} trailing bytes after the last record", r.remaining()));
    }
    Ok(Checkpoint { config, records })
}

impl Checkpoint {
    /// Builds a model for `config` and fills it from the records. The record
    /// table must match the parameters `config` implies, name for name and
    /// shape for shape; the first disagreement is reported.
    pub fn into_model<T: Scalar>(&self, config: &ModelConfig) -> Result<FusionModel<T>> {
        let mut model = build_model::<T>(config)?;
        let store = model.params_mut();
        if self.records.len() != store.len() {
            let first_missing = store
                .iter()
                .map(|(_, p)| p.name.clone())
                .find(|n| !self.records.iter().any(|r| &r.name == n));
            return Err(match first_missing {
                Some(name) => format_err!(
                    "checkpoint has {} records but the config needs {}; missing '{name}'",
                    self.records.len(),
                    store.len()
                ),
                None => format_err!(
                    "checkpoint has {} records but the config needs {}",
                    self.records.len(),
                    store.len()
                ),
            });
        }
        for (rec, (_, p)) in self.records.iter().zip(store.iter_mut()) {
            if rec.name != p.name {
                return Err(format_err!(
                    "parameter order mismatch: checkpoint has '{}' where the config expects '{}'",
                    rec.name,
                    p.name
                ));
            }
            if rec.shape != p.value.shape() {
                return Err(format_err!(
                    "shape mismatch for parameter '{}': checkpoint {:?}, config {:?}",
                    rec.name,
                    rec.shape,
                    p.value.shape()
                ));
            }
            if rec.data.iter().any(|v| !v.is_finite()) {
                return Err(format_err!("parameter '{}' holds non-finite values", rec.name));
            }
            let data = rec.data.iter().map(|&v| T::from_f64_lossy(v)).collect();
            p.value = Tensor::new(rec.shape.clone(), data)?;
        }
        Ok(model)
    }
}

pub fn load_checkpoint_bytes<T: Scalar>(bytes: &[u8]) -> Result<FusionModel<T>> {
    let ckpt = decode_checkpoint(bytes)?;
    ckpt.into_model(&ckpt.config).map_err(|e| match e {
        // An embedded config that fails validation is a property of the file.
        Error::Config(msg) => format_err!("checkpoint config is invalid: {msg}"),
        other => other,
    })
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<FusionModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig::tiny()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = build_model::<f32>(&small_config()).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let back: FusionModel<f32> = load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        for ((_, a), (_, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let model = build_model::<f32>(&small_config()).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(
                matches!(load_checkpoint_bytes::<f32>(&bytes[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let model = build_model::<f32>(&small_config()).unwrap();
        let mut bytes = encode_checkpoint(&model).unwrap();
        bytes[5] = 9;
        let err = load_checkpoint_bytes::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        bytes[0] = b'X';
        let err = load_checkpoint_bytes::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn different_config_names_first_offending_parameter() {
        let model = build_model::<f32>(&small_config()).unwrap();
        let ckpt = decode_checkpoint(&encode_checkpoint(&model).unwrap()).unwrap();
        let mut other = small_config();
        other.convnext.stage_widths = vec![12, 16];
        let err = ckpt.into_model::<f32>(&other).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("'branch_a.stem.weight'"), "{err}");
    }
}
