//! Spatial-attention classifier over pretrained or desk-scale backbones.
//!
//! Local feature maps from configurable backbone taps are projected to a
//! shared width, attended with a learned compatibility vector against the
//! projected global descriptor, and the per-tap attended descriptors feed a
//! dense head. Training uses focal loss plus L1/L2 terms over the
//! non-backbone parameters.

mod backbone;
mod loss;
mod model;

pub use backbone::{default_taps, tap_shape_oracle, valid_taps, Architecture, TapShape};
pub use loss::{focal_loss, focal_loss_graph, per_sample_focal, LossConfig, Reduction};
pub use model::{Classifier, ClassifierConfig, ForwardMode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::softmax_rows_value;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub architecture: Architecture,
    /// Tap layers, shallow to deep. Empty means the architecture default.
    #[serde(default)]
    pub tap_ids: Vec<String>,
    pub frozen: bool,
    pub pretrained: bool,
}

impl BackboneSpec {
    pub fn desk() -> Self {
        BackboneSpec {
            architecture: Architecture::Tinycnn,
            tap_ids: Vec::new(),
            frozen: true,
            pretrained: false,
        }
    }

    pub fn resolved_taps(&self) -> Vec<String> {
        if self.tap_ids.is_empty() {
            default_taps(self.architecture)
        } else {
            self.tap_ids.clone()
        }
    }
}

/// Backbone activations: one local map per tap plus the pooled global vector.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    /// (N, C_i, H_i, W_i) per tap.
    pub locals: Vec<Tensor>,
    pub tap_ids: Vec<String>,
    /// (N, C_deep) global average pooling of the deepest stage.
    pub global_vec: Tensor,
}

/// Attention result for one tap over a batch.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub tap_id: String,
    /// (N, d) attended descriptor.
    pub descriptor: Tensor,
    /// (N, H, W) softmax-normalized spatial weights.
    pub map: Tensor,
}

/// Classifier outputs for a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// (N, C) raw scores.
    pub logits: Tensor,
    /// (N, C) softmax rows.
    pub probs: Tensor,
    /// True class indices, used by the losses.
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn from_logits(logits: Tensor, labels: Vec<usize>) -> Self {
        let probs = softmax_rows_value(&logits);
        Prediction { logits, probs, labels }
    }

    pub fn num_classes(&self) -> usize {
        self.logits.dim(1)
    }

    pub fn argmax(&self) -> Vec<usize> {
        let (n, c) = (self.logits.dim(0), self.logits.dim(1));
        let d = self.logits.data();
        (0..n)
            .map(|r| {
                let row = &d[r * c..(r + 1) * c];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }
}

/// Attention over one projected local map (d, H, W) given the projected
/// global vector and compatibility vector `u`, both of width d.
///
/// Scores are `dot(u, l_xy + g)` per position, the map is their softmax over
/// positions, and the descriptor is the map-weighted sum of local vectors.
pub fn spatial_attention(
    local: &Tensor,
    global_vec: &[f64],
    u: &[f64],
) -> Result<(Vec<f64>, Tensor)> {
    let shape = local.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("local must be (d,H,W), got {shape:?}")));
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if global_vec.len() != d || u.len() != d {
        return Err(Error::Shape(format!(
            "width mismatch: local d={d}, global {}, u {}",
            global_vec.len(),
            u.len()
        )));
    }
    let plane = h * w;
    let ld = local.data();
    let mut scores = vec![0.0; plane];
    for c in 0..d {
        let uv = u[c];
        let gv = global_vec[c];
        for (s, &lv) in scores.iter_mut().zip(&ld[c * plane..(c + 1) * plane]) {
            *s += uv * (lv + gv);
        }
    }
    let map = softmax_rows_value(&Tensor::from_vec(&[1, plane], scores));
    let md = map.data();
    let mut descriptor = vec![0.0; d];
    for (c, out) in descriptor.iter_mut().enumerate() {
        *out = ld[c * plane..(c + 1) * plane]
            .iter()
            .zip(md)
            .map(|(&l, &m)| l * m)
            .sum();
    }
    Ok((descriptor, Tensor::from_vec(&[h, w], md.to_vec())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn attention_uniform_when_scores_equal() {
        // u orthogonal to all variation: constant local + global makes every
        // score identical, so the map is uniform and the descriptor the mean
        let local = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let (desc, map) = spatial_attention(&local, &[0.0], &[1.0]).unwrap();
        // scores all equal global contribution? local varies, so use u=0
        // instead: dot(0, ..) = 0 everywhere
        let (desc0, map0) = spatial_attention(&local, &[5.0], &[0.0]).unwrap();
        assert!(map0.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert_abs_diff_eq!(desc0[0], 2.5, epsilon = 1e-12);
        // sanity: non-degenerate case still normalizes
        assert_abs_diff_eq!(map.data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(desc.len(), 1);
    }

    #[test]
    fn attention_single_position() {
        let local = Tensor::from_vec(&[2, 1, 1], vec![3.0, -1.0]);
        let (desc, map) = spatial_attention(&local, &[0.5, 0.5], &[1.0, 1.0]).unwrap();
        assert_eq!(map.shape(), &[1, 1]);
        assert_abs_diff_eq!(map.data()[0], 1.0);
        assert_eq!(desc, vec![3.0, -1.0]);
    }

    #[test]
    fn attention_hand_softmax() {
        // scores [0, ln 3] -> map [0.25, 0.75]; descriptor = 0.25 l1 + 0.75 l2
        // single channel: score_xy = u * (l_xy + g) with u=1, g=0
        let l1 = 0.0;
        let l2 = 3f64.ln();
        let local = Tensor::from_vec(&[1, 1, 2], vec![l1, l2]);
        let (desc, map) = spatial_attention(&local, &[0.0], &[1.0]).unwrap();
        assert_abs_diff_eq!(map.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(map.data()[1], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(desc[0], 0.25 * l1 + 0.75 * l2, epsilon = 1e-12);
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let local = Tensor::zeros(&[2, 2, 2]);
        assert!(matches!(
            spatial_attention(&local, &[0.0], &[0.0, 0.0]),
            Err(Error::Shape(_))
        ));
    }
}
