//! Synthetic texture datasets for CPU-scale runs and tests.
//!
//! Each class pairs a distinct base color with a stripe pattern of
//! class-specific frequency; per-image phase, orientation, and noise come
//! from the seed. Classes are deliberately well separated so small fixtures
//! train quickly, while stylization still has texture to move around.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Total records per class; class names are tex0, tex1, ...
    pub class_sizes: Vec<usize>,
    pub image_size: u32,
    pub seed: u64,
    /// (train, val, test), applied stratified per class.
    pub fractions: (f64, f64, f64),
}

impl SynthSpec {
    pub fn small(seed: u64) -> Self {
        SynthSpec {
            class_sizes: vec![12, 8, 6, 4],
            image_size: 64,
            seed,
            fractions: (0.7, 0.15, 0.15),
        }
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.25, 0.85],
    [0.85, 0.80, 0.15],
    [0.75, 0.15, 0.75],
    [0.15, 0.80, 0.80],
    [0.90, 0.55, 0.15],
    [0.45, 0.45, 0.45],
];

/// One texture image: base color + oriented stripes + seeded noise.
pub fn texture_image(class_idx: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let base = PALETTE[class_idx % PALETTE.len()];
    let freq = 2.0 + 2.0 * (class_idx as f64);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let angle: f64 = rng.gen_range(-0.4..0.4) + if class_idx % 2 == 0 { 0.0 } else { 1.2 };
    let (sin_a, cos_a) = angle.sin_cos();
    let noise_amp = 0.08;
    let tint: f64 = rng.gen_range(-0.08..0.08);
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 / size as f64;
            let v = y as f64 / size as f64;
            let t = u * cos_a + v * sin_a;
            let stripe = 0.5 + 0.35 * (std::f64::consts::TAU * freq * t + phase).sin();
            let n: f64 = rng.gen_range(-noise_amp..noise_amp);
            for c in 0..3 {
                let val = (base[c] + tint) * stripe + n;
                data[c * size * size + y * size + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data)
}

/// Write the dataset under `root` in the generic layout (`manifest.csv` plus
/// class directories) and return its manifest. Deterministic in the seed.
pub fn generate(root: &Path, spec: &SynthSpec) -> Result<DatasetManifest> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::new();
    for (class_idx, &n) in spec.class_sizes.iter().enumerate() {
        let class = format!("tex{class_idx}");
        for i in 0..n {
            // one generator per image keeps records order-independent
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ (class_idx as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (i as u64) << 20,
            );
            let img = texture_image(class_idx, spec.image_size as usize, &mut rng);
            let rel = format!("{class}/{i:05}.png");
            imageio::save_image(&root.join(&rel), &img)?;
            records.push(corpus::ImageRecord {
                relative_path: rel,
                class_label: class.clone(),
                split: corpus::Split::Train,
                origin: corpus::Origin::Original,
            });
        }
    }
    let classes: Vec<String> =
        (0..spec.class_sizes.len()).map(|i| format!("tex{i}")).collect();
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        records,
        task: corpus::Task::Generic,
    };
    let manifest = corpus::stratified_split(&manifest, spec.fractions, spec.seed)?;
    write_manifest_csv(&manifest)?;
    Ok(manifest)
}

/// Emit `manifest.csv` in the generic layout for a manifest rooted at its own
/// directory.
pub fn write_manifest_csv(manifest: &DatasetManifest) -> Result<()> {
    let path = manifest.root.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(["relative_path", "label", "split"])
        .map_err(|e| Error::Validation(e.to_string()))?;
    for r in &manifest.records {
        w.write_record([r.relative_path.as_str(), r.class_label.as_str(), r.split.as_str()])
            .map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
