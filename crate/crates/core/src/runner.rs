//! Command dispatch and run-directory artifacts.
//!
//! Every run resolves its config, writes `config.lock.json` (resolved config
//! plus hash), and stamps that hash into each artifact it emits so a run
//! directory is self-describing. Timing lives only in `run.log` and
//! `trials.jsonl` wall-clock fields; `metrics.json` and sweep cells are
//! byte-reproducible for a fixed seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attnclf::{Classifier, ClassifierConfig};
use crate::augment::{self, AugmentedManifest};
use crate::config::RunConfig;
use crate::corpus::{
    class_histogram, load_manifest_with, partition_classes, DatasetManifest, KaokoreNames, Split,
};
use crate::error::{Error, Result};
use crate::loader::{load_split, LoadedSplit};
use crate::metrics::{self, MetricsReport};
use crate::optim::{
    self, grid_search, refine_search, space_from_grid_values, stage1_train, stage2_finetune,
    FinetuneSchedule, ParamValue, SearchStage, TpeParams, TrainOptions, TrialConfig, TrialRecord,
};
use crate::stylegen::{DecoderTrainOptions, EncoderConfig, StyleEngine};
use crate::sweep;
use crate::viz;

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    /// Decoder pretraining.
    TrainStyle,
    /// Materialize the configured augmentation plan.
    Augment,
    /// Grid search then TPE refinement.
    Search,
    /// Stage-one training, optionally followed by stage-two fine-tuning.
    Train { finetune: bool },
    /// Metrics for a saved classifier on a split.
    Evaluate { checkpoint: Option<PathBuf>, split: Split },
    /// The (p1, p2) proportion sweep.
    Sweep { grid: Option<Vec<(f64, f64)>> },
    /// Attention heatmaps and confidence ranking for test samples.
    Visualize { count: usize },
    /// Everything end to end: style, augment, search, train, evaluate,
    /// visualize.
    Pipeline,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub split: String,
    pub report: MetricsReport,
}

#[derive(Serialize)]
struct TrialLine<'a> {
    config: &'a TrialConfig,
    objective: f64,
    stage: SearchStage,
    seed: u64,
    status: crate::optim::TrialStatus,
    wall_seconds: f64,
    config_hash: &'a str,
}

pub struct Runner {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub config_hash: String,
    log: std::fs::File,
}

// fixed stream offsets so each component draws independent seeds from the
// run seed
const SEED_STYLE: u64 = 0x7374_796c;
const SEED_MODEL: u64 = 0x6d6f_6465;
const SEED_TRAIN: u64 = 0x7472_6169;
const SEED_SEARCH: u64 = 0x7365_6172;

impl Runner {
    pub fn new(config_path: &Path, overrides: &Overrides) -> Result<Runner> {
        let mut cfg = RunConfig::from_path(config_path)?;
        if let Some(seed) = overrides.seed {
            cfg.dataset.seed = seed;
        }
        if let Some(run_dir) = &overrides.run_dir {
            cfg.output.run_dir = run_dir.clone();
        }
        crate::exec::configure_workers(overrides.workers.unwrap_or(8));
        Self::from_config(cfg)
    }

    pub fn from_config(cfg: RunConfig) -> Result<Runner> {
        cfg.validate()?;
        let run_dir = cfg.output.run_dir.clone();
        std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let config_hash = cfg.hash();
        let lock = serde_json::json!({
            "config_hash": config_hash,
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
        });
        let lock_path = run_dir.join("config.lock.json");
        std::fs::write(&lock_path, serde_json::to_string_pretty(&lock).expect("lock"))
            .map_err(|e| Error::io(&lock_path, e))?;
        let log_path = run_dir.join("run.log");
        let log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok(Runner { cfg, run_dir, config_hash, log })
    }

    fn log(&mut self, msg: &str) {
        let _ = writeln!(self.log, "{msg}");
        log::info!("{msg}");
    }

    pub fn dispatch(&mut self, command: &Command) -> Result<()> {
        match command {
            Command::TrainStyle => self.cmd_train_style().map(|_| ()),
            Command::Augment => self.cmd_augment().map(|_| ()),
            Command::Search => self.cmd_search().map(|_| ()),
            Command::Train { finetune } => self.cmd_train(*finetune).map(|_| ()),
            Command::Evaluate { checkpoint, split } => {
                self.cmd_evaluate(checkpoint.as_deref(), *split).map(|_| ())
            }
            Command::Sweep { grid } => self.cmd_sweep(grid.clone()).map(|_| ()),
            Command::Visualize { count } => self.cmd_visualize(*count),
            Command::Pipeline => self.cmd_pipeline(),
        }
    }

    // ---- shared pieces ----

    pub fn load_dataset(&self) -> Result<DatasetManifest> {
        let names = self.cfg.dataset.kaokore_names.clone().unwrap_or_else(KaokoreNames::default);
        let manifest = load_manifest_with(
            &self.cfg.dataset.root,
            self.cfg.dataset.format,
            self.cfg.dataset.task,
            &names,
        )?;
        let has_eval_split = manifest.records.iter().any(|r| r.split != Split::Train);
        if self.cfg.dataset.resplit || !has_eval_split {
            crate::corpus::stratified_split(
                &manifest,
                self.cfg.dataset.split_fractions,
                self.cfg.dataset.seed,
            )
        } else {
            Ok(manifest)
        }
    }

    fn encoder_config(&self) -> EncoderConfig {
        match self.cfg.style.encoder.as_str() {
            "vgg19" => EncoderConfig::vgg19(),
            _ => EncoderConfig::desk(),
        }
    }

    fn decoder_ckpt_path(&self) -> PathBuf {
        self.run_dir.join("decoder.ckpt")
    }

    /// Build the style engine: fresh, from the configured weights file, or
    /// from this run's decoder checkpoint when present.
    pub fn style_engine(&self, prefer_checkpoint: bool) -> Result<StyleEngine> {
        let mut engine =
            StyleEngine::new(self.encoder_config(), self.cfg.dataset.seed ^ SEED_STYLE);
        let source = if prefer_checkpoint && self.decoder_ckpt_path().is_file() {
            Some(self.decoder_ckpt_path())
        } else {
            self.cfg.style.weights.clone()
        };
        if let Some(path) = source {
            let loaded = crate::nn::load_checkpoint(&path)?;
            crate::nn::load_values_into(&mut engine.params, &loaded.store)?;
            if let Some(it) = loaded.meta.get("iteration").and_then(|v| v.as_u64()) {
                engine.iteration = it as usize;
            }
        }
        Ok(engine)
    }

    fn classifier_config(&self, num_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            backbone: self.cfg.model.backbone.clone(),
            num_classes,
            proj_width: self.cfg.model.proj_width,
            head_hidden: self.cfg.model.head_hidden,
            dropout: self.cfg.model.dropout,
            tinycnn_widths: self.cfg.model.tinycnn_widths,
        }
    }

    pub fn build_classifier(&self, classes: &[String]) -> Result<Classifier> {
        let cfg = self.classifier_config(classes.len());
        if cfg.backbone.pretrained && self.cfg.model.weights.is_none() {
            return Err(Error::Config(
                "model.backbone.pretrained requires model.weights pointing to a checkpoint"
                    .into(),
            ));
        }
        let mut clf = Classifier::new(cfg, self.cfg.dataset.seed ^ SEED_MODEL)?;
        if let Some(path) = &self.cfg.model.weights {
            let loaded = crate::nn::load_checkpoint(path)?;
            crate::nn::load_values_into(&mut clf.params, &loaded.store)?;
        }
        Ok(clf)
    }

    fn train_options(&self, lr: f64, l2: Option<f64>) -> TrainOptions {
        let mut loss = self.cfg.loss;
        if let Some(l2) = l2 {
            loss.l2 = l2;
        }
        TrainOptions {
            batch: self.cfg.train.batch,
            lr,
            loss,
            seed: self.cfg.dataset.seed ^ SEED_TRAIN,
            eval_batch: self.cfg.train.batch,
        }
    }

    /// Materialize (or reuse) the configured augmentation set and merge it
    /// into the train split.
    pub fn augmented_manifest(
        &mut self,
        manifest: &DatasetManifest,
        engine: &StyleEngine,
    ) -> Result<(DatasetManifest, AugmentedManifest)> {
        let hist = class_histogram(manifest);
        let partition = partition_classes(&hist, &manifest.classes)?;
        let plan = augment::plan_counts(
            &hist,
            &partition,
            self.cfg.augment.p1,
            self.cfg.augment.p2,
            self.cfg.dataset.seed,
            self.cfg.augment.allow_above_one,
        )?;
        let out_dir = self.cfg.augment.out_dir.clone();
        let augmented = if out_dir.join("provenance.csv").is_file() {
            let existing = augment::read_provenance_csv(&out_dir)?;
            if existing.len() == plan.total() {
                self.log(&format!("reusing {} stylized samples at {}", existing.len(), out_dir.display()));
                existing
            } else {
                augment::materialize(
                    &plan,
                    manifest,
                    engine,
                    self.cfg.style.blend,
                    &out_dir,
                    self.cfg.dataset.image_size,
                )?
            }
        } else {
            augment::materialize(
                &plan,
                manifest,
                engine,
                self.cfg.style.blend,
                &out_dir,
                self.cfg.dataset.image_size,
            )?
        };
        let merged = augment::merge(manifest, &augmented)?;
        Ok((merged, augmented))
    }

    fn write_metrics(&self, name: &str, split: Split, report: &MetricsReport) -> Result<PathBuf> {
        let artifact = MetricsArtifact {
            config_hash: self.config_hash.clone(),
            seed: self.cfg.dataset.seed,
            split: split.as_str().to_string(),
            report: report.clone(),
        };
        let path = self.run_dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&artifact).expect("metrics"))
            .map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn ckpt_meta(&self, extra: &[(&str, serde_json::Value)]) -> BTreeMap<String, serde_json::Value> {
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".into(), serde_json::json!(self.config_hash));
        meta.insert("seed".into(), serde_json::json!(self.cfg.dataset.seed));
        for (k, v) in extra {
            meta.insert((*k).to_string(), v.clone());
        }
        meta
    }

    // ---- commands ----

    pub fn cmd_train_style(&mut self) -> Result<StyleEngine> {
        let manifest = self.load_dataset()?;
        let mut engine = self.style_engine(false)?;
        let classes: Vec<Option<String>> = if self.cfg.style.per_class {
            manifest.classes.iter().cloned().map(Some).collect()
        } else {
            vec![None]
        };
        let per_class_iters = self.cfg.style.iterations;
        let curve_path = self.run_dir.join("style_loss_curve.csv");
        let mut w = csv::Writer::from_path(&curve_path)
            .map_err(|e| Error::Validation(format!("cannot write {}: {e}", curve_path.display())))?;
        w.write_record(["class", "iteration", "content", "style", "total"])
            .map_err(|e| Error::Validation(e.to_string()))?;
        for class in classes {
            let opts = DecoderTrainOptions {
                iterations: per_class_iters,
                batch: self.cfg.style.batch,
                lr: self.cfg.style.lr,
                style_weight: self.cfg.style.style_weight,
                seed: self.cfg.dataset.seed ^ SEED_STYLE,
                image_size: self.cfg.dataset.image_size,
                class_filter: class.clone(),
            };
            let t0 = Instant::now();
            let log = engine.train_decoder(&manifest, &opts)?;
            self.log(&format!(
                "decoder trained ({} iterations, class {:?}) in {:.1}s",
                per_class_iters,
                class,
                t0.elapsed().as_secs_f64()
            ));
            let tag = class.unwrap_or_else(|| "pooled".into());
            for e in &log.entries {
                w.write_record([
                    tag.as_str(),
                    &e.iteration.to_string(),
                    &format!("{:.6}", e.content),
                    &format!("{:.6}", e.style),
                    &format!("{:.6}", e.total),
                ])
                .map_err(|e| Error::Validation(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| Error::io(&curve_path, e))?;
        let meta = self.ckpt_meta(&[("iteration", serde_json::json!(engine.iteration))]);
        let ckpt = self.decoder_ckpt_path();
        crate::nn::save_checkpoint(&ckpt, &engine.params, &meta)?;
        self.log(&format!("decoder checkpoint at {}", ckpt.display()));
        Ok(engine)
    }

    pub fn cmd_augment(&mut self) -> Result<AugmentedManifest> {
        let manifest = self.load_dataset()?;
        let engine = self.style_engine(true)?;
        let (_, augmented) = self.augmented_manifest(&manifest, &engine)?;
        self.log(&format!(
            "materialized {} stylized samples under {}",
            augmented.len(),
            augmented.out_dir.display()
        ));
        Ok(augmented)
    }

    /// Search objective: fresh classifier with trial hyperparameters,
    /// stage-one training over the merged set, unaugmented-validation
    /// accuracy.
    fn search_objective(
        &self,
        trial: &TrialConfig,
        train: &LoadedSplit,
        val: &LoadedSplit,
        classes: &[String],
    ) -> Result<f64> {
        let lr = trial.get("lr").and_then(ParamValue::as_f64).unwrap_or(self.cfg.train.lr);
        let dropout =
            trial.get("dropout").and_then(ParamValue::as_f64).unwrap_or(self.cfg.model.dropout);
        let l2 = trial.get("weight_decay").and_then(ParamValue::as_f64);
        let mut clf_cfg = self.classifier_config(classes.len());
        clf_cfg.dropout = dropout;
        let mut clf = Classifier::new(clf_cfg, self.cfg.dataset.seed ^ SEED_MODEL)?;
        let opts = self.train_options(lr, l2);
        let result = stage1_train(&mut clf, train, val, self.cfg.search.epochs, &opts)?;
        Ok(result.best_val_accuracy)
    }

    pub fn cmd_search(&mut self) -> Result<TrialRecord> {
        let manifest = self.load_dataset()?;
        let engine = self.style_engine(true)?;
        let (merged, _) = self.augmented_manifest(&manifest, &engine)?;
        let train = load_split(&merged, Split::Train, self.cfg.dataset.image_size)?;
        let val = load_split(&merged, Split::Val, self.cfg.dataset.image_size)?;

        if self.cfg.search.grid.is_empty() {
            return Err(Error::Config("search.grid has no dimensions".into()));
        }
        let space = space_from_grid_values(&self.cfg.search.grid);
        let seed = self.cfg.dataset.seed ^ SEED_SEARCH;

        let trials_path = self.run_dir.join("trials.jsonl");
        let mut trials_file = std::fs::File::create(&trials_path)
            .map_err(|e| Error::io(&trials_path, e))?;
        let hash = self.config_hash.clone();
        let record_line = |file: &mut std::fs::File, t: &TrialRecord, wall: f64| {
            let line = TrialLine {
                config: &t.config,
                objective: t.objective,
                stage: t.stage,
                seed: t.seed,
                status: t.status,
                wall_seconds: wall,
                config_hash: &hash,
            };
            let _ = writeln!(file, "{}", serde_json::to_string(&line).expect("trial line"));
        };

        let durations = std::cell::RefCell::new(Vec::<f64>::new());
        let timed_objective = |cfg: &TrialConfig| {
            let t = Instant::now();
            let r = self.search_objective(cfg, &train, &val, &merged.classes);
            durations.borrow_mut().push(t.elapsed().as_secs_f64());
            r
        };
        let (incumbent, grid_history) = grid_search(&space, timed_objective, seed)?;
        for (t, wall) in grid_history.iter().zip(durations.borrow().iter()) {
            record_line(&mut trials_file, t, *wall);
        }
        self.log(&format!(
            "grid stage: {} trials, incumbent objective {:.4}",
            grid_history.len(),
            incumbent.objective
        ));

        let params = TpeParams {
            quantile: self.cfg.search.quantile,
            n_candidates: self.cfg.search.n_candidates,
            n_startup: self.cfg.search.n_startup,
        };
        durations.borrow_mut().clear();
        let (best, tpe_history) = refine_search(
            &incumbent,
            &space,
            |cfg| {
                let t = Instant::now();
                let r = self.search_objective(cfg, &train, &val, &merged.classes);
                durations.borrow_mut().push(t.elapsed().as_secs_f64());
                r
            },
            self.cfg.search.tpe_trials,
            &params,
            seed,
        )?;
        for (t, wall) in tpe_history.iter().zip(durations.borrow().iter()) {
            record_line(&mut trials_file, t, *wall);
        }
        self.log(&format!(
            "refinement stage: {} trials, best objective {:.4}",
            tpe_history.len(),
            best.objective
        ));

        let best_path = self.run_dir.join("best_config.json");
        std::fs::write(
            &best_path,
            serde_json::to_string_pretty(&serde_json::json!({
                "config": best.config,
                "objective": best.objective,
                "config_hash": self.config_hash,
            }))
            .expect("best config"),
        )
        .map_err(|e| Error::io(&best_path, e))?;
        Ok(best)
    }

    pub fn cmd_train(&mut self, finetune: bool) -> Result<MetricsArtifact> {
        self.cmd_train_inner(finetune, None)
    }

    fn cmd_train_inner(
        &mut self,
        finetune: bool,
        best_trial: Option<&TrialConfig>,
    ) -> Result<MetricsArtifact> {
        let manifest = self.load_dataset()?;
        let engine = self.style_engine(true)?;
        let (merged, _) = self.augmented_manifest(&manifest, &engine)?;
        let train = load_split(&merged, Split::Train, self.cfg.dataset.image_size)?;
        let val = load_split(&merged, Split::Val, self.cfg.dataset.image_size)?;
        let test = load_split(&merged, Split::Test, self.cfg.dataset.image_size)?;

        let (lr, dropout, l2) = match best_trial {
            Some(t) => (
                t.get("lr").and_then(ParamValue::as_f64).unwrap_or(self.cfg.train.lr),
                t.get("dropout").and_then(ParamValue::as_f64).unwrap_or(self.cfg.model.dropout),
                t.get("weight_decay").and_then(ParamValue::as_f64),
            ),
            None => (self.cfg.train.lr, self.cfg.model.dropout, None),
        };
        let mut clf_cfg = self.classifier_config(merged.classes.len());
        clf_cfg.dropout = dropout;
        let mut clf = Classifier::new(clf_cfg, self.cfg.dataset.seed ^ SEED_MODEL)?;
        if let Some(path) = &self.cfg.model.weights {
            let loaded = crate::nn::load_checkpoint(path)?;
            crate::nn::load_values_into(&mut clf.params, &loaded.store)?;
        }
        let opts = self.train_options(lr, l2);

        let sched = FinetuneSchedule::new(
            self.cfg.train.epochs,
            if finetune { self.cfg.train.stage2_epochs } else { 0 },
            lr,
            self.cfg.train.step_size,
            self.cfg.train.decay_factor,
        )?;
        let sched_path = self.run_dir.join("schedule.json");
        std::fs::write(&sched_path, serde_json::to_string_pretty(&sched).expect("schedule"))
            .map_err(|e| Error::io(&sched_path, e))?;

        let t0 = Instant::now();
        let s1 = stage1_train(&mut clf, &train, &val, sched.stage1_epochs, &opts)?;
        self.log(&format!(
            "stage 1: best val accuracy {:.4} at epoch {} ({:.1}s)",
            s1.best_val_accuracy,
            s1.best_epoch,
            t0.elapsed().as_secs_f64()
        ));
        self.write_epoch_log("stage1_epochs.csv", &s1.epochs)?;
        let meta = self.ckpt_meta(&[
            ("classes", serde_json::json!(merged.classes)),
            ("classifier_config", serde_json::to_value(&clf.cfg).expect("cfg")),
            ("stage", serde_json::json!("stage1")),
        ]);
        crate::nn::save_checkpoint(&self.run_dir.join("classifier_stage1.ckpt"), &clf.params, &meta)?;

        if finetune && sched.stage2_epochs > 0 {
            let t1 = Instant::now();
            let s2 = stage2_finetune(&mut clf, &train, &val, &sched, &opts)?;
            self.log(&format!(
                "stage 2: best val accuracy {:.4} ({:.1}s)",
                s2.best_val_accuracy,
                t1.elapsed().as_secs_f64()
            ));
            self.write_epoch_log("stage2_epochs.csv", &s2.epochs)?;
        }
        let meta = self.ckpt_meta(&[
            ("classes", serde_json::json!(merged.classes)),
            ("classifier_config", serde_json::to_value(&clf.cfg).expect("cfg")),
            ("stage", serde_json::json!(if finetune { "stage2" } else { "stage1" })),
        ]);
        crate::nn::save_checkpoint(&self.run_dir.join("classifier_final.ckpt"), &clf.params, &meta)?;

        let report = metrics::evaluate(&clf, &test, self.cfg.train.batch)?;
        self.write_metrics("metrics.json", Split::Test, &report)?;
        self.log(&format!("test accuracy {:.4}", report.accuracy));
        Ok(MetricsArtifact {
            config_hash: self.config_hash.clone(),
            seed: self.cfg.dataset.seed,
            split: "test".into(),
            report,
        })
    }

    fn write_epoch_log(&self, name: &str, epochs: &[optim::EpochLog]) -> Result<()> {
        let path = self.run_dir.join(name);
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::Validation(format!("cannot write {}: {e}", path.display())))?;
        w.write_record(["epoch", "train_loss", "val_accuracy"])
            .map_err(|e| Error::Validation(e.to_string()))?;
        for e in epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.train_loss),
                format!("{:.6}", e.val_accuracy),
            ])
            .map_err(|e| Error::Validation(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Rebuild a classifier from a checkpoint's embedded configuration.
    pub fn load_classifier(&self, path: &Path) -> Result<(Classifier, Vec<String>)> {
        let loaded = crate::nn::load_checkpoint(path)?;
        let cfg: ClassifierConfig = serde_json::from_value(
            loaded
                .meta
                .get("classifier_config")
                .cloned()
                .ok_or_else(|| Error::Validation("checkpoint lacks classifier_config".into()))?,
        )
        .map_err(|e| Error::Validation(format!("bad classifier_config in checkpoint: {e}")))?;
        let classes: Vec<String> = serde_json::from_value(
            loaded
                .meta
                .get("classes")
                .cloned()
                .ok_or_else(|| Error::Validation("checkpoint lacks classes".into()))?,
        )
        .map_err(|e| Error::Validation(format!("bad classes in checkpoint: {e}")))?;
        let mut clf = Classifier::new(cfg, self.cfg.dataset.seed ^ SEED_MODEL)?;
        crate::nn::load_values_into(&mut clf.params, &loaded.store)?;
        Ok((clf, classes))
    }

    pub fn cmd_evaluate(&mut self, checkpoint: Option<&Path>, split: Split) -> Result<MetricsArtifact> {
        let default = self.run_dir.join("classifier_final.ckpt");
        let path = checkpoint
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.model.weights.clone())
            .unwrap_or(default);
        if !path.is_file() {
            return Err(Error::Ingestion { what: "classifier checkpoint".into(), path });
        }
        let (clf, _) = self.load_classifier(&path)?;
        let manifest = self.load_dataset()?;
        let loaded = load_split(&manifest, split, self.cfg.dataset.image_size)?;
        let report = metrics::evaluate(&clf, &loaded, self.cfg.train.batch)?;
        self.write_metrics("metrics.json", split, &report)?;
        self.log(&format!("{} accuracy {:.4}", split.as_str(), report.accuracy));
        Ok(MetricsArtifact {
            config_hash: self.config_hash.clone(),
            seed: self.cfg.dataset.seed,
            split: split.as_str().into(),
            report,
        })
    }

    pub fn cmd_sweep(&mut self, grid: Option<Vec<(f64, f64)>>) -> Result<sweep::SweepOutcome> {
        let manifest = self.load_dataset()?;
        let engine = self.style_engine(true)?;
        let grid = grid.unwrap_or_else(sweep::default_grid);
        let outcome = sweep::sweep_p1_p2(&self.cfg, &manifest, &engine, &grid, &self.run_dir.clone())?;
        self.log(&format!("sweep table at {}", outcome.csv_path.display()));
        Ok(outcome)
    }

    pub fn cmd_visualize(&mut self, count: usize) -> Result<()> {
        let ckpt = self.run_dir.join("classifier_final.ckpt");
        let path = if ckpt.is_file() {
            ckpt
        } else {
            self.cfg.model.weights.clone().ok_or_else(|| Error::Ingestion {
                what: "classifier checkpoint".into(),
                path: ckpt,
            })?
        };
        let (clf, _) = self.load_classifier(&path)?;
        let manifest = self.load_dataset()?;
        let test = load_split(&manifest, Split::Test, self.cfg.dataset.image_size)?;
        let n = count.min(test.len());
        let images: Vec<_> = test.images[..n].to_vec();
        let ids: Vec<String> = test.records[..n]
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let stem = Path::new(&r.relative_path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| i.to_string());
                format!("{i:03}_{stem}")
            })
            .collect();
        let files = viz::export_heatmaps(&clf, &images, &ids, &self.run_dir.join("heatmaps"))?;
        self.log(&format!("{} heatmap files", files.len()));

        let (least, most) = viz::confidence_ranking(&clf, &test, &self.cfg.loss, n, self.cfg.train.batch)?;
        let payload = serde_json::json!({
            "config_hash": self.config_hash,
            "seed": self.cfg.dataset.seed,
            "least_confident": least,
            "most_confident": most,
        });
        let path = self.run_dir.join("confidence_topk.json");
        std::fs::write(&path, serde_json::to_string_pretty(&payload).expect("topk"))
            .map_err(|e| Error::io(&path, e))?;
        self.log(&format!("confidence ranking at {}", path.display()));
        Ok(())
    }

    pub fn cmd_pipeline(&mut self) -> Result<()> {
        let t0 = Instant::now();
        self.cmd_train_style()?;
        self.cmd_augment()?;
        let best = if self.cfg.search.grid.is_empty() && self.cfg.search.tpe_trials == 0 {
            None
        } else {
            Some(self.cmd_search()?)
        };
        self.cmd_train_inner(true, best.as_ref().map(|b| &b.config))?;
        self.cmd_visualize(8)?;
        self.log(&format!("pipeline complete in {:.1}s", t0.elapsed().as_secs_f64()));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tests::desk_config;

    #[test]
    fn lockfile_written_with_matching_hash() {
        let data_dir = tempfile::tempdir().unwrap();
        crate::synth::generate(data_dir.path(), &crate::synth::SynthSpec::small(1)).unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(data_dir.path(), run_dir.path());
        let runner = Runner::from_config(cfg.clone()).unwrap();
        let lock: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(run_dir.path().join("config.lock.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(lock["config_hash"], serde_json::json!(cfg.hash()));
        assert_eq!(runner.config_hash, cfg.hash());
    }

    #[test]
    fn dataset_loading_resplits_when_needed() {
        let data_dir = tempfile::tempdir().unwrap();
        crate::synth::generate(data_dir.path(), &crate::synth::SynthSpec::small(2)).unwrap();
        let run_dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(data_dir.path(), run_dir.path());
        let runner = Runner::from_config(cfg).unwrap();
        let manifest = runner.load_dataset().unwrap();
        // synth already ships splits, so they are preserved
        assert!(manifest.records_in(Split::Val).count() > 0);
        assert!(manifest.records_in(Split::Test).count() > 0);
    }
}
