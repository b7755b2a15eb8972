//! Dataset ingestion and class-conditional sampling.
//!
//! Two on-disk layouts are supported:
//!
//! - Kaokore-style: `<root>/labels.csv` with header `image,gender,status`
//!   (small-integer codes) and images under `<root>/images_256/`. An optional
//!   `set` column carries the published train/dev/test assignment; without it
//!   all records land in the train split and callers re-split.
//! - Generic: `<root>/manifest.csv` with header `relative_path,label,split`.
//!
//! All operations are pure over immutable manifests; seeded generators are
//! created per call and never shared.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" | "dev" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Stylized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Status,
    Gender,
    Combined8,
    Generic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestFormat {
    Kaokore,
    GenericCsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub relative_path: String,
    pub class_label: String,
    pub split: Split,
    pub origin: Origin,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub task: Task,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.relative_path)
    }

    /// Checks the manifest's structural invariants: known labels and, when
    /// `check_files` is set, that every referenced image exists on disk.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        let classes: BTreeSet<&str> = self.classes.iter().map(String::as_str).collect();
        for (i, r) in self.records.iter().enumerate() {
            if !classes.contains(r.class_label.as_str()) {
                return Err(Error::Validation(format!(
                    "record {i} ('{}'): unknown label '{}'",
                    r.relative_path, r.class_label
                )));
            }
            if check_files {
                let path = self.resolve(r);
                if !path.is_file() {
                    return Err(Error::Validation(format!(
                        "record {i}: image file missing: {}",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Integer-code to class-name mappings for the Kaokore layout. The defaults
/// are overridable from the run config for datasets with a different
/// published ordering.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KaokoreNames {
    pub gender: Vec<String>,
    pub status: Vec<String>,
}

impl Default for KaokoreNames {
    fn default() -> Self {
        KaokoreNames {
            gender: vec!["male".into(), "female".into()],
            status: vec!["commoner".into(), "incarnation".into(), "noble".into(), "warrior".into()],
        }
    }
}

pub fn load_manifest(root: &Path, format: ManifestFormat, task: Task) -> Result<DatasetManifest> {
    load_manifest_with(root, format, task, &KaokoreNames::default())
}

pub fn load_manifest_with(
    root: &Path,
    format: ManifestFormat,
    task: Task,
    names: &KaokoreNames,
) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Ingestion { what: "dataset root".into(), path: root.to_path_buf() });
    }
    match format {
        ManifestFormat::Kaokore => load_kaokore(root, task, names),
        ManifestFormat::GenericCsv => load_generic(root),
    }
}

fn load_kaokore(root: &Path, task: Task, names: &KaokoreNames) -> Result<DatasetManifest> {
    let labels_path = root.join("labels.csv");
    if !labels_path.is_file() {
        return Err(Error::Ingestion { what: "labels file".into(), path: labels_path });
    }
    let images_dir = root.join("images_256");
    if !images_dir.is_dir() {
        return Err(Error::Ingestion { what: "images directory".into(), path: images_dir });
    }

    let classes: Vec<String> = match task {
        Task::Status => names.status.clone(),
        Task::Gender => names.gender.clone(),
        Task::Combined8 => {
            let mut v = Vec::with_capacity(names.status.len() * names.gender.len());
            for s in &names.status {
                for g in &names.gender {
                    v.push(format!("{s}_{g}"));
                }
            }
            v
        }
        Task::Generic => {
            return Err(Error::Config("kaokore format requires a status/gender/combined8 task".into()))
        }
    };

    let mut reader = csv::Reader::from_path(&labels_path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", labels_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Validation(format!("bad header in {}: {e}", labels_path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (img_col, gender_col, status_col) = match (col("image"), col("gender"), col("status")) {
        (Some(i), Some(g), Some(s)) => (i, g, s),
        _ => {
            return Err(Error::Validation(format!(
                "{}: expected columns image,gender,status, got {:?}",
                labels_path.display(),
                headers.iter().collect::<Vec<_>>()
            )))
        }
    };
    let set_col = col("set");

    let mut records = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| {
            Error::Validation(format!("{} row {}: {e}", labels_path.display(), row_idx + 2))
        })?;
        let image = row.get(img_col).unwrap_or("").to_string();
        let decode = |col: usize, table: &[String], what: &str| -> Result<String> {
            let raw = row.get(col).unwrap_or("");
            let code: usize = raw.parse().map_err(|_| {
                Error::Validation(format!(
                    "{} row {}: unknown {what} value '{raw}'",
                    labels_path.display(),
                    row_idx + 2
                ))
            })?;
            table.get(code).cloned().ok_or_else(|| {
                Error::Validation(format!(
                    "{} row {}: unknown {what} value '{raw}'",
                    labels_path.display(),
                    row_idx + 2
                ))
            })
        };
        let class_label = match task {
            Task::Status => decode(status_col, &names.status, "status")?,
            Task::Gender => decode(gender_col, &names.gender, "gender")?,
            Task::Combined8 => {
                let s = decode(status_col, &names.status, "status")?;
                let g = decode(gender_col, &names.gender, "gender")?;
                format!("{s}_{g}")
            }
            Task::Generic => unreachable!(),
        };
        let split = match set_col.and_then(|c| row.get(c)) {
            Some(raw) => Split::parse(raw).ok_or_else(|| {
                Error::Validation(format!(
                    "{} row {}: unknown set value '{raw}'",
                    labels_path.display(),
                    row_idx + 2
                ))
            })?,
            None => Split::Train,
        };
        let relative_path = format!("images_256/{image}");
        if !root.join(&relative_path).is_file() {
            return Err(Error::Validation(format!(
                "{} row {}: image file missing: {}",
                labels_path.display(),
                row_idx + 2,
                root.join(&relative_path).display()
            )));
        }
        records.push(ImageRecord { relative_path, class_label, split, origin: Origin::Original });
    }

    let manifest = DatasetManifest { root: root.to_path_buf(), classes, records, task };
    manifest.validate(false)?;
    Ok(manifest)
}

fn load_generic(root: &Path) -> Result<DatasetManifest> {
    let manifest_path = root.join("manifest.csv");
    if !manifest_path.is_file() {
        return Err(Error::Ingestion { what: "manifest file".into(), path: manifest_path });
    }
    let mut reader = csv::Reader::from_path(&manifest_path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", manifest_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Validation(format!("bad header in {}: {e}", manifest_path.display())))?
        .clone();
    let expected = ["relative_path", "label", "split"];
    if headers.iter().take(3).ne(expected) {
        return Err(Error::Validation(format!(
            "{}: expected header relative_path,label,split, got {:?}",
            manifest_path.display(),
            headers.iter().collect::<Vec<_>>()
        )));
    }
    let mut records = Vec::new();
    let mut classes_seen: Vec<String> = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let row = row.map_err(|e| {
            Error::Validation(format!("{} row {}: {e}", manifest_path.display(), row_idx + 2))
        })?;
        let relative_path = row.get(0).unwrap_or("").to_string();
        let class_label = row.get(1).unwrap_or("").to_string();
        let split_raw = row.get(2).unwrap_or("");
        let split = Split::parse(split_raw).ok_or_else(|| {
            Error::Validation(format!(
                "{} row {}: unknown split value '{split_raw}'",
                manifest_path.display(),
                row_idx + 2
            ))
        })?;
        if !root.join(&relative_path).is_file() {
            return Err(Error::Validation(format!(
                "{} row {}: image file missing: {}",
                manifest_path.display(),
                row_idx + 2,
                root.join(&relative_path).display()
            )));
        }
        if !classes_seen.contains(&class_label) {
            classes_seen.push(class_label.clone());
        }
        records.push(ImageRecord { relative_path, class_label, split, origin: Origin::Original });
    }
    classes_seen.sort();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes: classes_seen,
        records,
        task: Task::Generic,
    })
}

// ---- class statistics ----

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: BTreeMap<String, usize>,
}

/// Train-split record counts per class; classes absent from train get zero.
pub fn class_histogram(manifest: &DatasetManifest) -> ClassHistogram {
    let mut counts: BTreeMap<String, usize> =
        manifest.classes.iter().map(|c| (c.clone(), 0)).collect();
    for r in manifest.records_in(Split::Train) {
        if let Some(c) = counts.get_mut(&r.class_label) {
            *c += 1;
        }
    }
    ClassHistogram { counts }
}

impl ClassHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, class: &str) -> usize {
        self.counts.get(class).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub representative: BTreeSet<String>,
    pub rare: BTreeSet<String>,
}

/// Splits classes into the higher-count half (representative) and the rest
/// (rare). Ties break by position in `class_order`, so the partition is
/// deterministic for any histogram.
pub fn partition_classes(hist: &ClassHistogram, class_order: &[String]) -> Result<ClassPartition> {
    if class_order.len() < 2 {
        return Err(Error::Config(format!(
            "partitioning needs at least 2 classes, got {}",
            class_order.len()
        )));
    }
    let mut ranked: Vec<(usize, &String)> = class_order.iter().enumerate().map(|(i, c)| (i, c)).collect();
    ranked.sort_by(|a, b| {
        let ca = hist.get(a.1);
        let cb = hist.get(b.1);
        cb.cmp(&ca).then(a.0.cmp(&b.0))
    });
    let n_rep = class_order.len().div_ceil(2);
    let representative: BTreeSet<String> =
        ranked[..n_rep].iter().map(|(_, c)| (*c).clone()).collect();
    let rare: BTreeSet<String> = ranked[n_rep..].iter().map(|(_, c)| (*c).clone()).collect();
    Ok(ClassPartition { representative, rare })
}

// ---- splitting ----

/// Per-class target sizes by largest-remainder rounding: totals are exact and
/// each split differs from `fraction * n` by at most one.
pub fn largest_remainder_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    // largest fractional remainder first; ties go to the earlier split
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..n - assigned {
        sizes[order[i % order.len()]] += 1;
    }
    sizes
}

/// Reassign splits class-by-class with a seeded shuffle. Deterministic for a
/// fixed seed; per-class split sizes follow largest-remainder rounding.
pub fn stratified_split(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!("split fractions must be non-negative: {fr:?}")));
    }
    let sum: f64 = fr.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {sum}")));
    }
    let mut out = manifest.clone();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let n_nonzero = fr.iter().filter(|&&f| f > 0.0).count();
    for class in &manifest.classes {
        let class_seed: u64 = master.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(class_seed);
        let mut idxs: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.class_label == class)
            .map(|(i, _)| i)
            .collect();
        if idxs.len() < n_nonzero {
            log::warn!(
                "class '{class}' has {} records for {n_nonzero} non-empty splits; some splits will be empty",
                idxs.len()
            );
        }
        idxs.shuffle(&mut rng);
        let sizes = largest_remainder_sizes(idxs.len(), &fr);
        let mut cursor = 0usize;
        for (split, &size) in [Split::Train, Split::Val, Split::Test].iter().zip(&sizes) {
            for &i in &idxs[cursor..cursor + size] {
                out.records[i].split = *split;
            }
            cursor += size;
        }
    }
    Ok(out)
}

// ---- pair sampling ----

/// Uniform with-replacement (content, style) pairs from one class's train
/// records. Draws are sequential, so for fixed seed the first `k` pairs of an
/// `n`-pair sample equal a `k`-pair sample.
pub fn sample_pairs<'a>(
    manifest: &'a DatasetManifest,
    class_label: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<(&'a ImageRecord, &'a ImageRecord)>> {
    let pool: Vec<&ImageRecord> = manifest
        .records_in(Split::Train)
        .filter(|r| r.class_label == class_label)
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptyClass { class: class_label.to_string() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let c = pool[rng.gen_range(0..pool.len())];
        let s = pool[rng.gen_range(0..pool.len())];
        pairs.push((c, s));
    }
    Ok(pairs)
}
