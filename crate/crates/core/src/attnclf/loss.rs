//! Focal loss and the regularized training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

use super::Prediction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Focusing exponent; 0 recovers plain cross-entropy.
    pub gamma: f64,
    /// Scalar weight on the focal term.
    pub alpha: f64,
    pub l1: f64,
    pub l2: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { gamma: 2.0, alpha: 0.25, l1: 0.0, l2: 0.0, reduction: Reduction::Mean }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.l1 < 0.0 || self.l2 < 0.0 {
            return Err(Error::Config("l1/l2 must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Per-sample focal losses: -alpha * (1 - p_true)^gamma * ln(p_true).
pub fn per_sample_focal(pred: &Prediction, cfg: &LossConfig) -> Result<Vec<f64>> {
    let (n, c) = (pred.logits.dim(0), pred.logits.dim(1));
    if pred.labels.len() != n {
        return Err(Error::Input(format!(
            "{} labels for a batch of {n}",
            pred.labels.len()
        )));
    }
    check_labels(&pred.labels, c)?;
    let probs = pred.probs.data();
    let mut out = Vec::with_capacity(n);
    for (r, &y) in pred.labels.iter().enumerate() {
        let pt = probs[r * c + y];
        out.push(-cfg.alpha * (1.0 - pt).powf(cfg.gamma) * pt.ln());
    }
    Ok(out)
}

/// Reduced focal loss over a batch.
pub fn focal_loss(pred: &Prediction, cfg: &LossConfig) -> Result<f64> {
    let per = per_sample_focal(pred, cfg)?;
    Ok(match cfg.reduction {
        Reduction::Mean => per.iter().sum::<f64>() / per.len().max(1) as f64,
        Reduction::Sum => per.iter().sum(),
    })
}

/// Graph-side focal loss from logits. Returns (per-sample node, reduced node).
/// Built from primitives, so the gradient is the exact derivative of the
/// formula including the modulation factor.
pub fn focal_loss_graph(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(NodeId, NodeId)> {
    let c = g.value(logits).dim(1);
    check_labels(labels, c)?;
    let logp = g.log_softmax_rows(logits);
    let ln_pt = g.gather_col(logp, labels.to_vec());
    let pt = g.exp(ln_pt);
    let neg_pt = g.mul_scalar(pt, -1.0);
    let one_minus = g.add_scalar(neg_pt, 1.0);
    let modulator = g.pow_scalar(one_minus, cfg.gamma);
    let weighted = g.mul(modulator, ln_pt);
    let per_sample = g.mul_scalar(weighted, -cfg.alpha);
    let reduced = match cfg.reduction {
        Reduction::Mean => g.mean_all(per_sample),
        Reduction::Sum => g.sum_all(per_sample),
    };
    Ok((per_sample, reduced))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pred(logits: Tensor, labels: Vec<usize>) -> Prediction {
        Prediction::from_logits(logits, labels)
    }

    fn cross_entropy(p: &Prediction) -> f64 {
        let (n, c) = (p.logits.dim(0), p.logits.dim(1));
        let mut total = 0.0;
        for (r, &y) in p.labels.iter().enumerate() {
            total -= p.probs.data()[r * c + y].ln();
        }
        total / n as f64
    }

    #[test]
    fn gamma_zero_alpha_one_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let logits = Tensor::rand_uniform(&[4, 3], -3.0, 3.0, &mut rng);
            let labels = vec![0, 2, 1, 1];
            let p = pred(logits, labels);
            let cfg = LossConfig { gamma: 0.0, alpha: 1.0, ..Default::default() };
            let fl = focal_loss(&p, &cfg).unwrap();
            assert_abs_diff_eq!(fl, cross_entropy(&p), epsilon = 1e-6);
        }
    }

    #[test]
    fn loss_vanishes_for_confident_correct() {
        let logits = Tensor::from_vec(&[1, 2], vec![30.0, 0.0]);
        let p = pred(logits, vec![0]);
        let cfg = LossConfig { gamma: 2.0, alpha: 1.0, ..Default::default() };
        assert!(focal_loss(&p, &cfg).unwrap() < 1e-10);
    }

    #[test]
    fn scalar_hand_oracle() {
        // logits [2,0], true class 0: pt = e^2/(e^2+1), loss = -(1-pt)^2 ln pt
        let logits = Tensor::from_vec(&[1, 2], vec![2.0, 0.0]);
        let p = pred(logits, vec![0]);
        let cfg = LossConfig { gamma: 2.0, alpha: 1.0, ..Default::default() };
        let fl = focal_loss(&p, &cfg).unwrap();
        assert_abs_diff_eq!(fl, 0.0018033, epsilon = 1e-6);
    }

    #[test]
    fn monotone_decreasing_in_gamma() {
        let logits = Tensor::from_vec(&[1, 2], vec![1.2, 0.0]);
        let p = pred(logits, vec![0]);
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let gamma = i as f64 * 0.5;
            let cfg = LossConfig { gamma, alpha: 1.0, ..Default::default() };
            let fl = focal_loss(&p, &cfg).unwrap();
            assert!(fl < prev, "loss must strictly decrease in gamma");
            prev = fl;
        }
    }

    #[test]
    fn shift_invariance() {
        let logits = Tensor::from_vec(&[2, 3], vec![1.0, -0.5, 0.2, 2.0, 0.0, -1.0]);
        let shifted = logits.map(|v| v + 100.0);
        let cfg = LossConfig { gamma: 2.0, alpha: 0.25, ..Default::default() };
        let a = focal_loss(&pred(logits, vec![1, 0]), &cfg).unwrap();
        let b = focal_loss(&pred(shifted, vec![1, 0]), &cfg).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-6);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        let p = pred(logits, vec![5]);
        assert!(matches!(
            focal_loss(&p, &LossConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn graph_focal_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::rand_uniform(&[5, 4], -2.0, 2.0, &mut rng);
        let labels = vec![3, 0, 1, 2, 2];
        let cfg = LossConfig { gamma: 2.0, alpha: 0.25, ..Default::default() };
        let plain = focal_loss(&pred(logits.clone(), labels.clone()), &cfg).unwrap();
        let mut g = Graph::new();
        let l = g.constant(logits);
        let (_, reduced) = focal_loss_graph(&mut g, l, &labels, &cfg).unwrap();
        assert_abs_diff_eq!(g.value(reduced).item(), plain, epsilon = 1e-12);
    }

    #[test]
    fn graph_focal_gradient_matches_finite_differences() {
        use crate::gradcheck::check_gradient;
        let labels = vec![1, 0];
        let cfg = LossConfig { gamma: 2.0, alpha: 0.25, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let rel = check_gradient(
            x0.data(),
            |xv| {
                let mut g = Graph::new();
                let l = g.leaf(Tensor::from_vec(&[2, 3], xv.to_vec()), true);
                let (_, r) = focal_loss_graph(&mut g, l, &labels, &cfg).unwrap();
                g.value(r).item()
            },
            |xv| {
                let mut g = Graph::new();
                let l = g.leaf(Tensor::from_vec(&[2, 3], xv.to_vec()), true);
                let (_, r) = focal_loss_graph(&mut g, l, &labels, &cfg).unwrap();
                let grads = g.backward(r);
                grads.get(l).unwrap().data().to_vec()
            },
            1e-4,
        );
        assert!(rel < 1e-7, "focal gradient relative error {rel}");
    }
}
