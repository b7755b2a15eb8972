//! In-memory split loading for training and evaluation.
//!
//! Desk-scale datasets fit comfortably in RAM as f64 tensors, so splits are
//! decoded eagerly once and batches are sliced from the cache. Stylized
//! records carry absolute paths and resolve against any root.

use crate::corpus::{DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::exec;
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub records: Vec<ImageRecord>,
    pub classes: Vec<String>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stack the given indices into an (N,3,H,W) batch.
    pub fn batch(&self, idxs: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<Tensor> = idxs.iter().map(|&i| self.images[i].clone()).collect();
        let labels = idxs.iter().map(|&i| self.labels[i]).collect();
        Ok((imageio::stack_batch(&imgs)?, labels))
    }

    /// Consecutive index chunks of at most `batch` elements.
    pub fn batch_indices(&self, batch: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch.max(1))
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Decode every record of `split` into memory. Image decode fans out over the
/// worker pool; order is preserved.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    image_size: Option<u32>,
) -> Result<LoadedSplit> {
    let records: Vec<ImageRecord> = manifest.records_in(split).cloned().collect();
    let paths: Vec<_> = records.iter().map(|r| manifest.resolve(r)).collect();
    let images: Vec<Result<Tensor>> =
        exec::map_indexed(&paths, |_, p| imageio::load_image_resized(p, image_size));
    let images: Vec<Tensor> = images.into_iter().collect::<Result<Vec<_>>>()?;
    let labels = records
        .iter()
        .map(|r| {
            manifest
                .class_index(&r.class_label)
                .ok_or_else(|| Error::Validation(format!("unknown label '{}'", r.class_label)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSplit { images, labels, records, classes: manifest.classes.clone() })
}
