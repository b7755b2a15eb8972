//! Classifier assembly: backbone taps, per-tap projections, attention, head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BcastKind, Graph, NodeId};
use crate::nn::{init_linear, Binding, Conv2dLayer, LinearLayer, ParamStore};
use crate::tensor::Tensor;

use super::backbone::{build_backbone, unfreeze_groups, Backbone};
use super::loss::{focal_loss_graph, LossConfig};
use super::{AttentionOutput, BackboneSpec, FeatureTaps, Prediction};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    /// Shared projection width d for locals and the global descriptor.
    pub proj_width: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    /// Stage widths when the backbone is tinycnn.
    pub tinycnn_widths: [usize; 4],
}

impl ClassifierConfig {
    pub fn paper_defaults(backbone: BackboneSpec, num_classes: usize) -> Self {
        ClassifierConfig {
            backbone,
            num_classes,
            proj_width: 512,
            head_hidden: 1024,
            dropout: 0.25,
            tinycnn_widths: [8, 16, 32, 64],
        }
    }

    /// Small configuration for CPU-scale fixtures.
    pub fn desk(num_classes: usize) -> Self {
        ClassifierConfig {
            backbone: BackboneSpec::desk(),
            num_classes,
            proj_width: 16,
            head_hidden: 32,
            dropout: 0.1,
            tinycnn_widths: [4, 8, 16, 32],
        }
    }
}

/// Eval disables dropout; train draws masks from the provided generator.
pub enum ForwardMode<'r> {
    Eval,
    Train { dropout_rng: &'r mut ChaCha8Rng },
}

pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub params: ParamStore,
    backbone: Backbone,
    proj_locals: Vec<Conv2dLayer>,
    proj_global: LinearLayer,
    head1: LinearLayer,
    head2: LinearLayer,
    tap_ids: Vec<String>,
}

pub struct GraphForward {
    pub logits: NodeId,
    /// (descriptor, map, (h, w)) per tap.
    pub attention: Vec<(NodeId, NodeId, (usize, usize))>,
}

impl Classifier {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tap_ids = cfg.backbone.resolved_taps();
        let backbone = build_backbone(
            cfg.backbone.architecture,
            &tap_ids,
            cfg.tinycnn_widths,
            &mut params,
            &mut rng,
            !cfg.backbone.frozen,
        )?;

        let d = cfg.proj_width;
        let mut proj_locals = Vec::new();
        for (i, (_, ch)) in backbone.tap_channels.iter().enumerate() {
            let layer = Conv2dLayer::new(&format!("proj.tap{i}"), *ch, d, 1).pad(0);
            layer.register(&mut params, &mut rng, true);
            proj_locals.push(layer);
        }
        let proj_global = LinearLayer::new("proj.global", backbone.global_channels, d);
        proj_global.register(&mut params, &mut rng, true);
        for i in 0..backbone.tap_channels.len() {
            let u = init_linear(&[d, 1], &mut rng).reshape(&[d]);
            params.add(&format!("attn.tap{i}.u"), u, true);
        }
        let head1 = LinearLayer::new("head.fc1", backbone.tap_channels.len() * d, cfg.head_hidden);
        head1.register(&mut params, &mut rng, true);
        let head2 = LinearLayer::new("head.fc2", cfg.head_hidden, cfg.num_classes);
        head2.register(&mut params, &mut rng, true);

        Ok(Classifier { cfg, params, backbone, proj_locals, proj_global, head1, head2, tap_ids })
    }

    pub fn tap_ids(&self) -> &[String] {
        &self.tap_ids
    }

    /// (deep, shallow) backbone parameter prefixes for gradual unfreezing.
    pub fn unfreeze_prefixes(&self) -> (Vec<&'static str>, Vec<&'static str>) {
        unfreeze_groups(self.cfg.backbone.architecture)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (_, c, h, w) = batch.expect_nchw("classifier input")?;
        if c != 3 {
            return Err(Error::Input(format!("expected 3-channel input, got {c}")));
        }
        let min = self.cfg.backbone.architecture.min_input();
        if h < min || w < min {
            return Err(Error::Input(format!(
                "{:?} needs inputs of at least {min}x{min}, got {h}x{w}",
                self.cfg.backbone.architecture
            )));
        }
        Ok(())
    }

    /// Graph-side forward pass shared by training and evaluation. Inputs in
    /// [0,1] are centered to [-1,1] before the backbone.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: NodeId,
        mode: &mut ForwardMode,
    ) -> GraphForward {
        let scaled = g.mul_scalar(x, 2.0);
        let x = g.add_scalar(scaled, -1.0);
        let (taps, final_stage) = self.backbone.apply(g, bind, x);
        let global_raw = g.spatial_mean(final_stage);
        let global_proj = self.proj_global.apply(g, bind, global_raw);

        let mut descriptors = Vec::new();
        let mut attention = Vec::new();
        for (i, (_, tap_node)) in taps.iter().enumerate() {
            let local = self.proj_locals[i].apply(g, bind, *tap_node);
            let (_, _, h, w) = g.value(local).expect_nchw("projected local").expect("nchw");
            let combined = g.bcast(local, global_proj, BcastKind::Add);
            let u = bind.node(&format!("attn.tap{i}.u"));
            let scores = g.chan_vec_dot(combined, u);
            let map = g.softmax_rows(scores);
            let desc = g.attn_pool(local, map);
            descriptors.push(desc);
            attention.push((desc, map, (h, w)));
        }
        let concat = g.concat_cols(&descriptors);
        let hidden = self.head1.apply(g, bind, concat);
        let hidden = g.relu(hidden);
        let hidden = match mode {
            ForwardMode::Eval => hidden,
            ForwardMode::Train { dropout_rng } => g.dropout(hidden, self.cfg.dropout, dropout_rng),
        };
        let logits = self.head2.apply(g, bind, hidden);
        GraphForward { logits, attention }
    }

    /// Local maps at the taps plus the pooled global vector, eval mode.
    pub fn extract_features(&self, batch: &Tensor) -> Result<FeatureTaps> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let (taps, final_stage) = self.backbone.apply(&mut g, &bind, x);
        let global_vec = g.spatial_mean(final_stage);
        Ok(FeatureTaps {
            locals: taps.iter().map(|(_, n)| g.value(*n).clone()).collect(),
            tap_ids: taps.iter().map(|(id, _)| id.clone()).collect(),
            global_vec: g.value(global_vec).clone(),
        })
    }

    /// Full forward returning logits and attention outputs. Eval mode is
    /// deterministic; labels on the returned prediction are left empty.
    pub fn forward(&self, batch: &Tensor, mode: &mut ForwardMode) -> Result<(Prediction, Vec<AttentionOutput>)> {
        self.check_batch(batch)?;
        let training = matches!(mode, ForwardMode::Train { .. });
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, training);
        let x = g.constant(batch.clone());
        let fwd = self.forward_graph(&mut g, &bind, x, mode);
        let logits = g.value(fwd.logits).clone();
        let n = logits.dim(0);
        let attention = fwd
            .attention
            .iter()
            .zip(&self.tap_ids)
            .map(|((desc, map, (h, w)), tap_id)| AttentionOutput {
                tap_id: tap_id.clone(),
                descriptor: g.value(*desc).clone(),
                map: g.value(*map).clone().reshape(&[n, *h, *w]),
            })
            .collect();
        Ok((Prediction::from_logits(logits, Vec::new()), attention))
    }

    /// Focal loss plus L1/L2 penalties over projection, attention, and head
    /// parameters (the backbone is never regularized).
    pub fn training_loss_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        logits: NodeId,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<(NodeId, NodeId)> {
        let (per_sample, focal) = focal_loss_graph(g, logits, labels, cfg)?;
        let reg_nodes: Vec<NodeId> = self
            .params
            .names()
            .iter()
            .filter(|n| !n.starts_with("backbone."))
            .map(|n| bind.node(n))
            .collect();
        let total = add_regularization(g, focal, &reg_nodes, cfg.l1, cfg.l2);
        Ok((per_sample, total))
    }
}

/// loss + l1 * sum|w| + l2 * sum w^2 over the given parameter nodes.
pub fn add_regularization(
    g: &mut Graph,
    loss: NodeId,
    params: &[NodeId],
    l1: f64,
    l2: f64,
) -> NodeId {
    let mut total = loss;
    if l1 > 0.0 {
        for &p in params {
            let a = g.abs(p);
            let s = g.sum_all(a);
            let w = g.mul_scalar(s, l1);
            total = g.add(total, w);
        }
    }
    if l2 > 0.0 {
        for &p in params {
            let sq = g.mul(p, p);
            let s = g.sum_all(sq);
            let w = g.mul_scalar(s, l2);
            total = g.add(total, w);
        }
    }
    total
}
