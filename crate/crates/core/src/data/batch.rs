use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{preprocess, DatasetManifest, Split};
use crate::error::{data_err, Result};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// B×3×S×S normalized images.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Manifest record index of every row.
    pub indices: Vec<usize>,
}

fn shuffle_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(b"batches\0");
    ChaCha8Rng::from_seed(key)
}

/// Record indices of `split`, grouped into batches. The training split is
/// reshuffled per (seed, epoch); validation and test keep manifest order.
/// The final batch may be short.
pub fn batch_order(manifest: &DatasetManifest, split: Split, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx = manifest.indices(split);
    if split == Split::Train {
        idx.shuffle(&mut shuffle_rng(seed, epoch));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// A manifest with every image decoded and preprocessed once, up front.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub manifest: DatasetManifest,
    images: Vec<Tensor<f32>>,
    image_size: usize,
}

impl ImageSet {
    pub fn load(manifest: DatasetManifest, image_size: usize) -> Result<Self> {
        let images = parallel::map_range(manifest.records.len(), |i| {
            preprocess(&manifest.records[i].path, image_size)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(ImageSet {
            manifest,
            images,
            image_size,
        })
    }

    /// Builds from already preprocessed tensors (one per manifest record).
    pub fn from_tensors(manifest: DatasetManifest, images: Vec<Tensor<f32>>) -> Result<Self> {
        if images.len() != manifest.records.len() {
            return Err(data_err!(
                "{} images for {} manifest records",
                images.len(),
                manifest.records.len()
            ));
        }
        let image_size = images.first().map_or(0, |t| t.shape().last().copied().unwrap_or(0));
        Ok(ImageSet {
            manifest,
            images,
            image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn image(&self, index: usize) -> &Tensor<f32> {
        &self.images[index]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(data_err!("cannot build an empty batch"));
        }
        let parts: Vec<Tensor<f32>> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Ok(Batch {
            images: Tensor::stack(&parts)?,
            labels: indices.iter().map(|&i| self.manifest.records[i].class_id).collect(),
            indices: indices.to_vec(),
        })
    }

    pub fn batches(&self, split: Split, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        batch_order(&self.manifest, split, batch_size, seed, epoch)
            .into_iter()
            .map(move |b| self.batch(&b))
    }
}
