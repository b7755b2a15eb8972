//! Attention-heatmap export and confidence-ranked sample listing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attnclf::{per_sample_focal, Classifier, ForwardMode, LossConfig, Prediction};
use crate::corpus::ImageRecord;
use crate::error::{Error, Result};
use crate::imageio::{self, bilinear_upscale};
use crate::loader::LoadedSplit;
use crate::tensor::Tensor;

/// Dark-blue-to-red gradient over [0,1].
pub fn heat_color(t: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.5],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f;
    }
    out
}

/// Normalize a map to [0,1]; constant maps sit at mid-scale.
fn normalize_map(map: &[f64]) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in map {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-15 {
        return vec![0.5; map.len()];
    }
    map.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

fn overlay(input: &Tensor, map_up: &[f64]) -> Tensor {
    let (h, w) = (input.dim(1), input.dim(2));
    let mut data = vec![0.0; 3 * h * w];
    let id = input.data();
    for p in 0..h * w {
        let color = heat_color(map_up[p]);
        for c in 0..3 {
            data[c * h * w + p] = 0.5 * id[c * h * w + p] + 0.5 * color[c];
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn montage_row(tiles: &[Tensor]) -> Tensor {
    let (h, w) = (tiles[0].dim(1), tiles[0].dim(2));
    let total_w = w * tiles.len();
    let mut data = vec![0.0; 3 * h * total_w];
    for (i, tile) in tiles.iter().enumerate() {
        let td = tile.data();
        for c in 0..3 {
            for y in 0..h {
                let dst = c * h * total_w + y * total_w + i * w;
                let src = c * h * w + y * w;
                data[dst..dst + w].copy_from_slice(&td[src..src + w]);
            }
        }
    }
    Tensor::from_vec(&[3, h, total_w], data)
}

/// For each sample: one overlay PNG per tap (`<id>_tap<i>.png`, attention
/// upsampled to input size, normalized, blue-to-red colormap at 0.5 opacity)
/// plus a row montage `<id>_montage.png` of the input followed by every tap.
/// Returns the written paths. Deterministic for fixed model and batch.
pub fn export_heatmaps(
    clf: &Classifier,
    images: &[Tensor],
    sample_ids: &[String],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if images.len() != sample_ids.len() {
        return Err(Error::Input(format!(
            "{} images vs {} sample ids",
            images.len(),
            sample_ids.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let batch = imageio::stack_batch(images)?;
    let (_, attn) = clf.forward(&batch, &mut ForwardMode::Eval)?;
    let mut written = Vec::new();
    for (s, (img, id)) in images.iter().zip(sample_ids).enumerate() {
        let (h, w) = (img.dim(1), img.dim(2));
        let mut tiles = vec![img.clone()];
        for (t, out) in attn.iter().enumerate() {
            let (mh, mw) = (out.map.dim(1), out.map.dim(2));
            let plane = &out.map.data()[s * mh * mw..(s + 1) * mh * mw];
            let up = bilinear_upscale(&normalize_map(plane), mh, mw, h, w);
            let tile = overlay(img, &up);
            let path = out_dir.join(format!("{id}_tap{t}.png"));
            imageio::save_image(&path, &tile)?;
            written.push(path);
            tiles.push(tile);
        }
        let path = out_dir.join(format!("{id}_montage.png"));
        imageio::save_image(&path, &montage_row(&tiles))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankedSample {
    pub record: ImageRecord,
    pub loss: f64,
    pub predicted: String,
    pub true_class: String,
}

/// Per-sample focal losses sorted into (least confident, most confident):
/// the k highest-loss and k lowest-loss samples. k larger than the split is
/// clipped with a warning.
pub fn confidence_ranking(
    clf: &Classifier,
    split: &LoadedSplit,
    loss_cfg: &LossConfig,
    k: usize,
    batch: usize,
) -> Result<(Vec<RankedSample>, Vec<RankedSample>)> {
    if split.is_empty() {
        return Err(Error::Evaluation("cannot rank an empty split".into()));
    }
    let k = if k > split.len() {
        log::warn!("k={k} exceeds split size {}; clipping", split.len());
        split.len()
    } else {
        k
    };
    let mut ranked: Vec<RankedSample> = Vec::with_capacity(split.len());
    let mut cursor = 0usize;
    for idxs in split.batch_indices(batch) {
        let (images, labels) = split.batch(&idxs)?;
        let (pred, _) = clf.forward(&images, &mut ForwardMode::Eval)?;
        let pred = Prediction { labels: labels.clone(), ..pred };
        let losses = per_sample_focal(&pred, loss_cfg)?;
        let guesses = pred.argmax();
        for ((loss, guess), &label) in losses.iter().zip(guesses).zip(&labels) {
            let record = split.records[cursor].clone();
            ranked.push(RankedSample {
                record,
                loss: *loss,
                predicted: split.classes[guess].clone(),
                true_class: split.classes[label].clone(),
            });
            cursor += 1;
        }
    }
    // stable sorts keep record order on ties
    let mut by_loss: Vec<usize> = (0..ranked.len()).collect();
    by_loss.sort_by(|&a, &b| ranked[b].loss.partial_cmp(&ranked[a].loss).unwrap());
    let least: Vec<RankedSample> = by_loss[..k].iter().map(|&i| ranked[i].clone()).collect();
    let mut asc: Vec<usize> = (0..ranked.len()).collect();
    asc.sort_by(|&a, &b| ranked[a].loss.partial_cmp(&ranked[b].loss).unwrap());
    let most: Vec<RankedSample> = asc[..k].iter().map(|&i| ranked[i].clone()).collect();
    Ok((least, most))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attnclf::ClassifierConfig;
    use crate::corpus::{Origin, Split};

    fn split_from_images(images: Vec<Tensor>, labels: Vec<usize>, classes: Vec<String>) -> LoadedSplit {
        let records = (0..images.len())
            .map(|i| ImageRecord {
                relative_path: format!("img{i}.png"),
                class_label: classes[labels[i]].clone(),
                split: Split::Val,
                origin: Origin::Original,
            })
            .collect();
        LoadedSplit { images, labels, records, classes }
    }

    #[test]
    fn heat_color_endpoints() {
        assert_eq!(heat_color(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(heat_color(1.0), [1.0, 0.0, 0.0]);
        let mid = heat_color(0.5);
        assert!(mid[1] > 0.9); // cyan region
    }

    #[test]
    fn export_counts_and_determinism() {
        let clf = Classifier::new(ClassifierConfig::desk(3), 0).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let images: Vec<Tensor> =
            (0..2).map(|_| Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)).collect();
        let ids = vec!["a".to_string(), "b".to_string()];
        let d1 = tempfile::tempdir().unwrap();
        let files = export_heatmaps(&clf, &images, &ids, d1.path()).unwrap();
        // 3 taps + 1 montage per sample
        assert_eq!(files.len(), 2 * (3 + 1));
        let d2 = tempfile::tempdir().unwrap();
        let files2 = export_heatmaps(&clf, &images, &ids, d2.path()).unwrap();
        for (f1, f2) in files.iter().zip(&files2) {
            let b1 = std::fs::read(f1).unwrap();
            let b2 = std::fs::read(f2).unwrap();
            assert_eq!(b1, b2, "re-export must be byte-identical");
        }
    }

    #[test]
    fn uniform_map_renders_flat_mid_overlay() {
        let up = normalize_map(&[0.25; 16]);
        assert!(up.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ranking_orders_and_clips() {
        let clf = Classifier::new(ClassifierConfig::desk(2), 1).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        let images: Vec<Tensor> =
            (0..6).map(|_| Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut rng)).collect();
        let labels = vec![0, 1, 0, 1, 0, 1];
        let split = split_from_images(images, labels, vec!["a".into(), "b".into()]);
        let cfg = LossConfig { gamma: 2.0, alpha: 1.0, ..Default::default() };
        let (least, most) = confidence_ranking(&clf, &split, &cfg, 6, 4).unwrap();
        // full k: the two lists are reversals of each other
        for (l, m) in least.iter().zip(most.iter().rev()) {
            assert_eq!(l.record.relative_path, m.record.relative_path);
        }
        assert!(least[0].loss >= least[5].loss);
        // k=1 picks the extremes
        let (l1, m1) = confidence_ranking(&clf, &split, &cfg, 1, 4).unwrap();
        assert_eq!(l1[0].record.relative_path, least[0].record.relative_path);
        assert_eq!(m1[0].record.relative_path, most[0].record.relative_path);
        // oversized k clips
        let (lc, _) = confidence_ranking(&clf, &split, &cfg, 99, 4).unwrap();
        assert_eq!(lc.len(), 6);
    }

    #[test]
    fn mislabeled_duplicate_lands_in_least_confident() {
        // train a tiny model so predictions are informative, then flip one
        // label of a duplicated image: the flipped copy must rank least
        // confident
        use crate::optim::{stage1_train, TrainOptions};
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::synth::SynthSpec {
            class_sizes: vec![20, 20],
            image_size: 32,
            seed: 3,
            fractions: (0.8, 0.2, 0.0),
        };
        let manifest = crate::synth::generate(dir.path(), &spec).unwrap();
        let train = crate::loader::load_split(&manifest, Split::Train, None).unwrap();
        let val = crate::loader::load_split(&manifest, Split::Val, None).unwrap();
        let mut clf = Classifier::new(ClassifierConfig::desk(2), 2).unwrap();
        let opts = TrainOptions { batch: 16, lr: 3e-3, seed: 1, ..Default::default() };
        stage1_train(&mut clf, &train, &val, 4, &opts).unwrap();

        let img = val.images[0].clone();
        let true_label = val.labels[0];
        let wrong = 1 - true_label;
        let probe = split_from_images(
            vec![img.clone(), img],
            vec![true_label, wrong],
            val.classes.clone(),
        );
        let cfg = LossConfig { gamma: 2.0, alpha: 1.0, ..Default::default() };
        let (least, _) = confidence_ranking(&clf, &probe, &cfg, 1, 2).unwrap();
        assert_eq!(least[0].true_class, probe.classes[wrong]);
    }
}
