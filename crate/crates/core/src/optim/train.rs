//! Stage-one head training and stage-two gradual-unfreezing fine-tuning.
//!
//! Stage one trains projections, attention, and head over the merged
//! (original + stylized) train split with the backbone frozen, selecting the
//! epoch with the best accuracy on the unaugmented validation split. Stage
//! two restarts from those weights, unfreezes the backbone deep-group first
//! and the shallow group one epoch later, and trains at a tenth of the
//! stage-one learning rate under stepped decay.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attnclf::{Classifier, ForwardMode, LossConfig};
use crate::error::{Error, Result};
use crate::loader::LoadedSplit;
use crate::metrics;
use crate::nn::Adam;

use super::schedule::{step_lr, FinetuneSchedule};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Batch size for validation passes.
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch: 64,
            lr: 1e-4,
            loss: LossConfig::default(),
            seed: 0,
            eval_batch: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageResult {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs: Vec<EpochLog>,
}

fn run_epoch(
    clf: &mut Classifier,
    adam: &mut Adam,
    train: &LoadedSplit,
    opts: &TrainOptions,
    epoch: usize,
    shuffle_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(shuffle_rng);
    let mut losses = Vec::new();
    for (batch_idx, chunk) in order.chunks(opts.batch.max(1)).enumerate() {
        let (images, labels) = train.batch(chunk)?;
        let mut g = crate::graph::Graph::new();
        let bind = clf.params.bind(&mut g, true);
        let ids = bind.ids().to_vec();
        let x = g.constant(images);
        let fwd = clf.forward_graph(&mut g, &bind, x, &mut ForwardMode::Train { dropout_rng });
        let (_, total) = clf.training_loss_graph(&mut g, &bind, fwd.logits, &labels, &opts.loss)?;
        let loss = g.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration: batch_idx,
                reason: format!("non-finite loss in epoch {epoch}, batch {batch_idx}"),
            });
        }
        losses.push(loss);
        let mut grads = g.backward(total);
        adam.step(&mut clf.params, &ids, &mut grads);
    }
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn best_of(epochs: &[EpochLog]) -> (usize, f64) {
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    for e in epochs {
        if e.val_accuracy > best_acc {
            best_acc = e.val_accuracy;
            best_epoch = e.epoch;
        }
    }
    (best_epoch, best_acc)
}

/// Train head/attention/projections with a frozen backbone; the classifier is
/// left holding the best-validation-epoch weights.
pub fn stage1_train(
    clf: &mut Classifier,
    train: &LoadedSplit,
    val: &LoadedSplit,
    epochs: usize,
    opts: &TrainOptions,
) -> Result<StageResult> {
    clf.params.set_trainable_by_prefix("backbone.", false);
    let mut adam = Adam::new(&clf.params, opts.lr);
    let mut master = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut log = Vec::new();
    let mut best_values: Option<Vec<crate::tensor::Tensor>> = None;
    let mut best_acc = f64::NEG_INFINITY;
    for epoch in 0..epochs {
        let shuffle_seed: u64 = master.gen();
        let dropout_seed: u64 = master.gen();
        let mut srng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let train_loss = run_epoch(clf, &mut adam, train, opts, epoch, &mut srng, &mut drng)?;
        let val_accuracy = metrics::accuracy(clf, val, opts.eval_batch)?;
        log.push(EpochLog { epoch, train_loss, val_accuracy });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_values = Some(clf.params.snapshot_values());
        }
    }
    if let Some(v) = best_values {
        clf.params.restore_values(&v);
    }
    let (best_epoch, best_val_accuracy) = best_of(&log);
    Ok(StageResult { best_epoch, best_val_accuracy, epochs: log })
}

/// Unfreeze and fine-tune from the stage-one weights at stage2_lr with
/// stepped decay. The deep backbone group unfreezes at epoch 0, the shallow
/// group from epoch 1. Returns the best-validation result over the entry
/// state and every stage-two epoch.
pub fn stage2_finetune(
    clf: &mut Classifier,
    train: &LoadedSplit,
    val: &LoadedSplit,
    sched: &FinetuneSchedule,
    opts: &TrainOptions,
) -> Result<StageResult> {
    if sched.stage2_epochs == 0 {
        return Ok(StageResult { best_epoch: 0, best_val_accuracy: f64::NAN, epochs: Vec::new() });
    }
    let entry_accuracy = metrics::accuracy(clf, val, opts.eval_batch)?;
    let (deep, shallow) = clf.unfreeze_prefixes();

    let mut stage_opts = opts.clone();
    stage_opts.lr = sched.stage2_lr;
    let mut adam = Adam::new(&clf.params, sched.stage2_lr);
    let mut master = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5f2e_c01d));
    let mut log = Vec::new();
    let mut best_values = clf.params.snapshot_values();
    let mut best_acc = entry_accuracy;
    for epoch in 0..sched.stage2_epochs {
        for p in &deep {
            clf.params.set_trainable_by_prefix(p, true);
        }
        if epoch >= 1 {
            for p in &shallow {
                clf.params.set_trainable_by_prefix(p, true);
            }
        }
        adam.lr = step_lr(epoch, sched.stage2_lr, sched);
        let shuffle_seed: u64 = master.gen();
        let dropout_seed: u64 = master.gen();
        let mut srng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let train_loss =
            run_epoch(clf, &mut adam, train, &stage_opts, epoch, &mut srng, &mut drng)?;
        let val_accuracy = metrics::accuracy(clf, val, opts.eval_batch)?;
        log.push(EpochLog { epoch, train_loss, val_accuracy });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_values = clf.params.snapshot_values();
        }
    }
    clf.params.restore_values(&best_values);
    let (mut best_epoch, mut best_val_accuracy) = best_of(&log);
    if entry_accuracy >= best_val_accuracy {
        best_epoch = 0;
        best_val_accuracy = entry_accuracy;
    }
    Ok(StageResult { best_epoch, best_val_accuracy, epochs: log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attnclf::ClassifierConfig;
    use crate::corpus::Split;
    use crate::loader::load_split;
    use crate::synth::{generate, SynthSpec};

    fn fixture() -> (tempfile::TempDir, LoadedSplit, LoadedSplit) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            class_sizes: vec![24, 16, 12, 8],
            image_size: 32,
            seed: 77,
            fractions: (0.7, 0.15, 0.15),
        };
        let manifest = generate(dir.path(), &spec).unwrap();
        let train = load_split(&manifest, Split::Train, None).unwrap();
        let val = load_split(&manifest, Split::Val, None).unwrap();
        (dir, train, val)
    }

    fn desk_options(seed: u64) -> TrainOptions {
        TrainOptions {
            batch: 16,
            lr: 3e-3,
            loss: LossConfig { gamma: 2.0, alpha: 1.0, l1: 0.0, l2: 1e-5, ..Default::default() },
            seed,
            eval_batch: 32,
        }
    }

    #[test]
    fn stage1_learns_above_chance_and_freezes_backbone() {
        let (_dir, train, val) = fixture();
        let mut clf = Classifier::new(ClassifierConfig::desk(4), 5).unwrap();
        let backbone_before: Vec<_> = clf
            .params
            .iter()
            .filter(|(n, _, _)| n.starts_with("backbone."))
            .map(|(n, t, _)| (n.to_string(), t.clone()))
            .collect();
        let result = stage1_train(&mut clf, &train, &val, 5, &desk_options(1)).unwrap();
        assert_eq!(result.epochs.len(), 5);
        // strictly above the uniform-guess rate 1/4
        assert!(
            result.best_val_accuracy > 0.25,
            "val accuracy {} not above chance",
            result.best_val_accuracy
        );
        // recorded best equals the max of the log
        let max_acc =
            result.epochs.iter().map(|e| e.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(result.best_val_accuracy, max_acc);
        // backbone bit-identical
        for (name, before) in &backbone_before {
            assert_eq!(clf.params.get(name).unwrap(), before, "{name} moved");
        }
    }

    #[test]
    fn stage1_single_epoch_returns_those_weights() {
        let (_dir, train, val) = fixture();
        let mut clf = Classifier::new(ClassifierConfig::desk(4), 6).unwrap();
        let result = stage1_train(&mut clf, &train, &val, 1, &desk_options(2)).unwrap();
        assert_eq!(result.best_epoch, 0);
        assert_eq!(result.epochs.len(), 1);
    }

    #[test]
    fn stage1_is_deterministic() {
        let (_dir, train, val) = fixture();
        let mut a = Classifier::new(ClassifierConfig::desk(4), 7).unwrap();
        let mut b = Classifier::new(ClassifierConfig::desk(4), 7).unwrap();
        let ra = stage1_train(&mut a, &train, &val, 2, &desk_options(3)).unwrap();
        let rb = stage1_train(&mut b, &train, &val, 2, &desk_options(3)).unwrap();
        assert_eq!(a.params.fingerprint(), b.params.fingerprint());
        for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.val_accuracy, y.val_accuracy);
        }
    }

    #[test]
    fn stage2_zero_epochs_is_identity() {
        let (_dir, train, val) = fixture();
        let mut clf = Classifier::new(ClassifierConfig::desk(4), 8).unwrap();
        stage1_train(&mut clf, &train, &val, 1, &desk_options(4)).unwrap();
        let before = clf.params.fingerprint();
        let sched = FinetuneSchedule::new(1, 0, 3e-3, 10, 0.1).unwrap();
        let r = stage2_finetune(&mut clf, &train, &val, &sched, &desk_options(4)).unwrap();
        assert!(r.epochs.is_empty());
        assert_eq!(clf.params.fingerprint(), before);
    }

    #[test]
    fn stage2_guards_regression_after_stage1() {
        let (_dir, train, val) = fixture();
        let mut clf = Classifier::new(ClassifierConfig::desk(4), 9).unwrap();
        let opts = desk_options(5);
        let s1 = stage1_train(&mut clf, &train, &val, 3, &opts).unwrap();
        let sched = FinetuneSchedule::new(3, 3, opts.lr, 10, 0.1).unwrap();
        assert_eq!(sched.stage2_lr, opts.lr / 10.0);
        let s2 = stage2_finetune(&mut clf, &train, &val, &sched, &opts).unwrap();
        assert_eq!(s2.epochs.len(), 3);
        // both backbone groups end up trainable after the first two epochs
        let trainable = clf.params.trainable_names();
        assert!(trainable.iter().any(|n| n.starts_with("backbone.stage4")));
        assert!(trainable.iter().any(|n| n.starts_with("backbone.stage1")));
        // stage-2 best validation within 2 points of stage-1 best
        assert!(
            s2.best_val_accuracy >= s1.best_val_accuracy - 0.02,
            "stage2 {} vs stage1 {}",
            s2.best_val_accuracy,
            s1.best_val_accuracy
        );
    }

    #[test]
    fn stage2_from_scratch_moves_the_backbone() {
        // without stage-1 training the entry accuracy is near chance, so a
        // stage-2 epoch wins the selection and the unfrozen weights persist
        let (_dir, train, val) = fixture();
        let mut clf = Classifier::new(ClassifierConfig::desk(4), 10).unwrap();
        let backbone_before = clf.params.get("backbone.stage4.conv.w").unwrap().clone();
        let sched = FinetuneSchedule::new(0, 3, 3e-2, 10, 0.1).unwrap();
        let s2 = stage2_finetune(&mut clf, &train, &val, &sched, &desk_options(6)).unwrap();
        let won = s2.epochs.iter().any(|e| e.val_accuracy >= s2.best_val_accuracy)
            && s2.best_val_accuracy
                > s2.epochs.first().map(|_| 0.0).unwrap_or(0.0);
        assert!(won, "expected some stage-2 epoch to win selection: {s2:?}");
        assert_ne!(clf.params.get("backbone.stage4.conv.w").unwrap(), &backbone_before);
    }
}
