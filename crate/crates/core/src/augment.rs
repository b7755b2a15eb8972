//! Augmentation planning and class-preserving stylized-sample
//! materialization.
//!
//! A plan turns the train-split histogram and the (p1, p2) proportions into
//! per-class stylization counts: p1 applies to representative classes, p2 to
//! rare ones, both relative to the class's own train count with half-up
//! rounding. Materialization draws content/style pairs inside each class, so
//! every stylized sample keeps its class label by construction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    sample_pairs, ClassHistogram, ClassPartition, DatasetManifest, ImageRecord, Origin, Split,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::imageio;
use crate::stylegen::{StyleEngine, StylizeRequest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub p1: f64,
    pub p2: f64,
    pub partition: ClassPartition,
    pub per_class_counts: BTreeMap<String, usize>,
    pub seed: u64,
}

impl AugmentationPlan {
    pub fn total(&self) -> usize {
        self.per_class_counts.values().sum()
    }

    /// Stable content hash used for caching materialized sets.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("plan serializes"));
        crate::nn::hex_string(&h.finalize()[..12])
    }
}

/// Per-class counts: round(p * count) with p1 on representative classes and
/// p2 on rare ones. Proportions above 1 are rejected unless explicitly
/// allowed.
pub fn plan_counts(
    hist: &ClassHistogram,
    partition: &ClassPartition,
    p1: f64,
    p2: f64,
    seed: u64,
    allow_above_one: bool,
) -> Result<AugmentationPlan> {
    for (name, p) in [("p1", p1), ("p2", p2)] {
        if p < 0.0 {
            return Err(Error::Config(format!("{name} must be non-negative, got {p}")));
        }
        if p > 1.0 && !allow_above_one {
            return Err(Error::Config(format!(
                "{name} = {p} exceeds 1.0; set the above-one override to allow it"
            )));
        }
    }
    let mut per_class_counts = BTreeMap::new();
    for (class, &count) in &hist.counts {
        let p = if partition.representative.contains(class) { p1 } else { p2 };
        // half-up rounding for non-negative proportions
        per_class_counts.insert(class.clone(), (p * count as f64).round() as usize);
    }
    Ok(AugmentationPlan { p1, p2, partition: partition.clone(), per_class_counts, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Path relative to the augmentation output directory.
    pub stylized_path: String,
    pub content_path: String,
    pub style_path: String,
    pub blend: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentedManifest {
    /// Stylized records; paths are absolute so they resolve under any root.
    pub records: Vec<ImageRecord>,
    pub provenance: Vec<Provenance>,
    pub out_dir: PathBuf,
}

impl AugmentedManifest {
    pub fn empty(out_dir: &Path) -> Self {
        AugmentedManifest { records: Vec::new(), provenance: Vec::new(), out_dir: out_dir.to_path_buf() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_for(&self, class: &str) -> usize {
        self.records.iter().filter(|r| r.class_label == class).count()
    }
}

/// Stylize `per_class_counts[class]` content/style pairs per class and write
/// them under `out_dir/<class>/`. File naming is deterministic:
/// `<index>_<contentstem>_<stylestem>.png`.
pub fn materialize(
    plan: &AugmentationPlan,
    manifest: &DatasetManifest,
    engine: &StyleEngine,
    blend: f64,
    out_dir: &Path,
    image_size: Option<u32>,
) -> Result<AugmentedManifest> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::Input(format!("blend must be in [0,1], got {blend}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    struct Job {
        class: String,
        rel_path: String,
        content: ImageRecord,
        style: ImageRecord,
        retry_seed: u64,
    }

    let mut master = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut jobs: Vec<Job> = Vec::new();
    for class in &manifest.classes {
        let class_seed: u64 = master.gen();
        let n = plan.per_class_counts.get(class).copied().unwrap_or(0);
        if n == 0 {
            continue;
        }
        let pairs = sample_pairs(manifest, class, n, class_seed)?;
        std::fs::create_dir_all(out_dir.join(class))
            .map_err(|e| Error::io(out_dir.join(class), e))?;
        for (i, (content, style)) in pairs.into_iter().enumerate() {
            let stem = |r: &ImageRecord| {
                Path::new(&r.relative_path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "img".into())
            };
            let rel_path = format!("{class}/{i:05}_{}_{}.png", stem(content), stem(style));
            jobs.push(Job {
                class: class.clone(),
                rel_path,
                content: content.clone(),
                style: style.clone(),
                retry_seed: class_seed ^ (i as u64),
            });
        }
    }

    let results: Vec<Result<Provenance>> = exec::map_indexed(&jobs, |_, job| {
        let run_pair = |content: &ImageRecord, style: &ImageRecord| -> Result<()> {
            let req = StylizeRequest {
                content_image: imageio::load_image_resized(&manifest.resolve(content), image_size)?,
                style_image: imageio::load_image_resized(&manifest.resolve(style), image_size)?,
                blend,
            };
            let img = engine.stylize(&req)?;
            imageio::save_image(&out_dir.join(&job.rel_path), &img)
        };
        if let Err(first) = run_pair(&job.content, &job.style) {
            // one resample, then give up
            log::warn!("stylization failed for {} ({first}); resampling once", job.rel_path);
            let mut rng = ChaCha8Rng::seed_from_u64(job.retry_seed);
            let pool: Vec<&ImageRecord> = manifest
                .records_in(Split::Train)
                .filter(|r| r.class_label == job.class)
                .collect();
            let c = pool[rng.gen_range(0..pool.len())].clone();
            let s = pool[rng.gen_range(0..pool.len())].clone();
            run_pair(&c, &s)?;
            return Ok(Provenance {
                stylized_path: job.rel_path.clone(),
                content_path: c.relative_path,
                style_path: s.relative_path,
                blend,
                seed: plan.seed,
            });
        }
        Ok(Provenance {
            stylized_path: job.rel_path.clone(),
            content_path: job.content.relative_path.clone(),
            style_path: job.style.relative_path.clone(),
            blend,
            seed: plan.seed,
        })
    });

    let mut provenance = Vec::with_capacity(jobs.len());
    let mut records = Vec::with_capacity(jobs.len());
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok(p) => {
                records.push(ImageRecord {
                    relative_path: out_dir.join(&p.stylized_path).to_string_lossy().into_owned(),
                    class_label: job.class.clone(),
                    split: Split::Train,
                    origin: Origin::Stylized,
                });
                provenance.push(p);
            }
            Err(e) => {
                // leave a partial provenance file behind for cleanup
                let partial = AugmentedManifest {
                    records,
                    provenance,
                    out_dir: out_dir.to_path_buf(),
                };
                let _ = write_provenance_csv(&partial, &out_dir.join("partial_provenance.csv"));
                return Err(e);
            }
        }
    }

    let augmented =
        AugmentedManifest { records, provenance, out_dir: out_dir.to_path_buf() };
    write_provenance_csv(&augmented, &out_dir.join("provenance.csv"))?;
    Ok(augmented)
}

/// First `plan.per_class_counts[class]` stylized records of each class from a
/// larger materialization. Pair sampling is prefix-stable, so this equals a
/// direct materialization at the smaller counts.
pub fn subsample_prefix(max_set: &AugmentedManifest, plan: &AugmentationPlan) -> AugmentedManifest {
    let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
    let mut records = Vec::new();
    let mut provenance = Vec::new();
    for (r, p) in max_set.records.iter().zip(&max_set.provenance) {
        let want = plan.per_class_counts.get(&r.class_label).copied().unwrap_or(0);
        let got = taken.entry(r.class_label.as_str()).or_insert(0);
        if *got < want {
            *got += 1;
            records.push(r.clone());
            provenance.push(p.clone());
        }
    }
    AugmentedManifest { records, provenance, out_dir: max_set.out_dir.clone() }
}

pub fn write_provenance_csv(augmented: &AugmentedManifest, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(["stylized_path", "content_path", "style_path", "blend", "seed"])
        .map_err(|e| Error::Validation(e.to_string()))?;
    for p in &augmented.provenance {
        w.write_record([
            p.stylized_path.as_str(),
            p.content_path.as_str(),
            p.style_path.as_str(),
            &p.blend.to_string(),
            &p.seed.to_string(),
        ])
        .map_err(|e| Error::Validation(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Rebuild an [`AugmentedManifest`] from a previously written provenance
/// file, verifying the stylized files still exist.
pub fn read_provenance_csv(out_dir: &Path) -> Result<AugmentedManifest> {
    let path = out_dir.join("provenance.csv");
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    let mut provenance = Vec::new();
    for row in reader.deserialize::<Provenance>() {
        let p = row.map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let class = p
            .stylized_path
            .split('/')
            .next()
            .ok_or_else(|| Error::Validation(format!("bad stylized path '{}'", p.stylized_path)))?
            .to_string();
        let abs = out_dir.join(&p.stylized_path);
        if !abs.is_file() {
            return Err(Error::Validation(format!("stylized file missing: {}", abs.display())));
        }
        records.push(ImageRecord {
            relative_path: abs.to_string_lossy().into_owned(),
            class_label: class,
            split: Split::Train,
            origin: Origin::Stylized,
        });
        provenance.push(p);
    }
    Ok(AugmentedManifest { records, provenance, out_dir: out_dir.to_path_buf() })
}

/// Merge stylized records into the train split. Validation and test splits
/// keep only original records.
pub fn merge(original: &DatasetManifest, augmented: &AugmentedManifest) -> Result<DatasetManifest> {
    for r in &augmented.records {
        if !original.classes.iter().any(|c| c == &r.class_label) {
            return Err(Error::Validation(format!(
                "stylized record '{}' has class '{}' outside the original class set",
                r.relative_path, r.class_label
            )));
        }
    }
    let mut merged = original.clone();
    merged
        .records
        .retain(|r| r.split == Split::Train || r.origin == Origin::Original);
    merged.records.extend(augmented.records.iter().cloned());
    Ok(merged)
}
