//! AdaIN style-transfer engine.
//!
//! A fixed encoder exposes activations at four taps (`relu1_1` .. `relu4_1`
//! naming). AdaIN renormalizes the content feature at the deepest tap to the
//! per-channel mean/std of the style feature, and a trainable decoder maps
//! the modulated feature back to image space. The decoder trains against a
//! content loss (MSE to the AdaIN target) plus a style loss matching
//! per-channel statistics at every tap.
//!
//! Two encoder presets exist: the full-width VGG-19 prefix used at paper
//! scale (weights loadable from a checkpoint), and a reduced-width desk
//! preset with random frozen weights for CPU-only runs. All contracts here
//! are weight-agnostic.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::graph::{BcastKind, Graph, NodeId};
use crate::imageio;
use crate::nn::{Adam, Binding, Conv2dLayer, ParamStore};
use crate::tensor::Tensor;

/// Variance floor inside the std computation; keeps AdaIN's division finite
/// on constant channels.
pub const STAT_EPSILON: f64 = 1e-5;

/// Activation map at one encoder tap.
#[derive(Clone, Debug)]
pub struct FeatureTensor {
    /// (C, H, W)
    pub data: Tensor,
    pub layer_id: String,
}

impl FeatureTensor {
    pub fn new(data: Tensor, layer_id: &str) -> Self {
        assert_eq!(data.ndim(), 3, "feature tensor must be (C,H,W)");
        FeatureTensor { data, layer_id: layer_id.to_string() }
    }

    pub fn channels(&self) -> usize {
        self.data.dim(0)
    }
}

/// Per-channel mean and standard deviation over spatial positions.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Activations at the configured taps, shallow to deep. The content feature
/// is the deepest tap.
#[derive(Clone, Debug)]
pub struct EncoderTaps {
    pub activations: Vec<FeatureTensor>,
}

impl EncoderTaps {
    pub fn content(&self) -> &FeatureTensor {
        self.activations.last().expect("encoder must expose at least one tap")
    }
}

#[derive(Clone, Debug)]
pub struct StylizeRequest {
    /// (3, H, W) content image.
    pub content_image: Tensor,
    /// (3, H, W) style image.
    pub style_image: Tensor,
    /// Blend in [0,1]: 0 reconstructs content features, 1 is full stylization.
    pub blend: f64,
}

/// Population (biased) mean/std per channel, with the epsilon floor folded
/// into the variance before the square root.
pub fn channel_stats(feat: &FeatureTensor) -> StyleStats {
    let (c, h, w) = (feat.data.dim(0), feat.data.dim(1), feat.data.dim(2));
    let plane = h * w;
    let d = feat.data.data();
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let xs = &d[ch * plane..(ch + 1) * plane];
        let mu = xs.iter().sum::<f64>() / plane as f64;
        let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / plane as f64;
        mean.push(mu);
        std.push((var + STAT_EPSILON).sqrt());
    }
    StyleStats { mean, std }
}

/// Renormalize `content` per channel to the mean/std of `style`. Spatial
/// sizes may differ; the output keeps the content's shape.
pub fn adain(content: &FeatureTensor, style: &FeatureTensor) -> Result<FeatureTensor> {
    if content.channels() != style.channels() {
        return Err(Error::Shape(format!(
            "adain channel mismatch: content {} vs style {}",
            content.channels(),
            style.channels()
        )));
    }
    let cs = channel_stats(content);
    let ss = channel_stats(style);
    let (c, h, w) = (content.data.dim(0), content.data.dim(1), content.data.dim(2));
    let plane = h * w;
    let src = content.data.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let (mu_c, sd_c) = (cs.mean[ch], cs.std[ch]);
        let (mu_s, sd_s) = (ss.mean[ch], ss.std[ch]);
        let scale = sd_s / sd_c;
        for (o, &v) in out[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .zip(&src[ch * plane..(ch + 1) * plane])
        {
            *o = scale * (v - mu_c) + mu_s;
        }
    }
    Ok(FeatureTensor::new(Tensor::from_vec(&[c, h, w], out), &content.layer_id))
}

/// Content and style losses between the re-encoded decoder output, the AdaIN
/// target, and the style taps. Content: MSE against the target feature.
/// Style: per tap, squared L2 gap of channel means plus channel stds.
pub fn transfer_losses(
    decoded_taps: &EncoderTaps,
    target: &FeatureTensor,
    style_taps: &EncoderTaps,
) -> Result<(f64, f64)> {
    if decoded_taps.activations.len() != style_taps.activations.len() {
        return Err(Error::Shape(format!(
            "tap count mismatch: {} vs {}",
            decoded_taps.activations.len(),
            style_taps.activations.len()
        )));
    }
    let dc = decoded_taps.content();
    if dc.data.shape() != target.data.shape() {
        return Err(Error::Shape(format!(
            "content tap shape {:?} vs target {:?}",
            dc.data.shape(),
            target.data.shape()
        )));
    }
    let n = dc.data.numel() as f64;
    let content_loss = dc
        .data
        .data()
        .iter()
        .zip(target.data.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;

    let mut style_loss = 0.0;
    for (d, s) in decoded_taps.activations.iter().zip(&style_taps.activations) {
        if d.channels() != s.channels() {
            return Err(Error::Shape(format!(
                "style tap '{}' channel mismatch: {} vs {}",
                d.layer_id,
                d.channels(),
                s.channels()
            )));
        }
        let ds = channel_stats(d);
        let ss = channel_stats(s);
        for ch in 0..d.channels() {
            style_loss += (ds.mean[ch] - ss.mean[ch]).powi(2);
            style_loss += (ds.std[ch] - ss.std[ch]).powi(2);
        }
    }
    Ok((content_loss, style_loss))
}

// ---- engine ----

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channel widths at the four taps, shallow to deep.
    pub widths: [usize; 4],
    /// Convs per block; the tap sits after the first conv of each block.
    pub block_convs: [usize; 4],
}

impl EncoderConfig {
    /// Full-width VGG-19 prefix through the fourth block's first conv.
    pub fn vgg19() -> Self {
        EncoderConfig { widths: [64, 128, 256, 512], block_convs: [2, 2, 4, 1] }
    }

    /// Reduced-width encoder for CPU-scale runs.
    pub fn desk() -> Self {
        EncoderConfig { widths: [4, 8, 16, 32], block_convs: [1, 1, 1, 1] }
    }

    pub fn tap_names(&self) -> [&'static str; 4] {
        ["relu1_1", "relu2_1", "relu3_1", "relu4_1"]
    }

    /// Expected tap shapes for an input of the given spatial size.
    pub fn tap_shapes(&self, h: usize, w: usize) -> [(usize, usize, usize); 4] {
        let mut out = [(0, 0, 0); 4];
        for (i, &c) in self.widths.iter().enumerate() {
            out[i] = (c, h >> i, w >> i);
        }
        out
    }

    /// Total encoder downsampling between input and the content tap.
    pub fn downsampling(&self) -> usize {
        8
    }
}

enum EncStep {
    Conv(Conv2dLayer, Option<usize>),
    Pool,
}

enum DecStep {
    Conv(Conv2dLayer, bool),
    Upsample,
}

/// Fixed encoder plus trainable decoder with their parameters.
pub struct StyleEngine {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub iteration: usize,
    pub seed: u64,
    enc_steps: Vec<EncStep>,
    dec_steps: Vec<DecStep>,
}

impl StyleEngine {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut enc_steps = Vec::new();
        let mut in_ch = 3;
        for (block, (&width, &n_convs)) in
            config.widths.iter().zip(&config.block_convs).enumerate()
        {
            for conv_idx in 0..n_convs {
                let layer = Conv2dLayer::new(
                    &format!("encoder.b{}c{}", block + 1, conv_idx + 1),
                    in_ch,
                    width,
                    3,
                )
                .reflect();
                layer.register(&mut params, &mut rng, false);
                let tap = if conv_idx == 0 { Some(block) } else { None };
                enc_steps.push(EncStep::Conv(layer, tap));
                in_ch = width;
            }
            if block < 3 {
                enc_steps.push(EncStep::Pool);
            }
        }

        // decoder mirrors the encoder: upsample where the encoder pooled,
        // nearest-neighbor scaling and reflection-padded convs
        let mut dec_steps = Vec::new();
        let mut idx = 0;
        let mut ch = config.widths[3];
        for block in (0..3).rev() {
            let target = config.widths[block];
            let layer =
                Conv2dLayer::new(&format!("decoder.c{idx}"), ch, target, 3).reflect();
            layer.register(&mut params, &mut rng, true);
            dec_steps.push(DecStep::Conv(layer, true));
            idx += 1;
            dec_steps.push(DecStep::Upsample);
            for _ in 1..config.block_convs[block] {
                let layer =
                    Conv2dLayer::new(&format!("decoder.c{idx}"), target, target, 3).reflect();
                layer.register(&mut params, &mut rng, true);
                dec_steps.push(DecStep::Conv(layer, true));
                idx += 1;
            }
            ch = target;
        }
        let final_layer = Conv2dLayer::new(&format!("decoder.c{idx}"), ch, 3, 3).reflect();
        final_layer.register(&mut params, &mut rng, true);
        dec_steps.push(DecStep::Conv(final_layer, false));

        StyleEngine { config, params, iteration: 0, seed, enc_steps, dec_steps }
    }

    pub fn content_channels(&self) -> usize {
        self.config.widths[3]
    }

    /// Graph-side encoder. Returns tap nodes shallow to deep.
    pub fn encode_graph(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Vec<NodeId> {
        let mut taps = vec![NodeId(0); 4];
        let mut cur = x;
        for step in &self.enc_steps {
            match step {
                EncStep::Conv(layer, tap) => {
                    let conv = layer.apply(g, bind, cur);
                    cur = g.relu(conv);
                    if let Some(i) = tap {
                        taps[*i] = cur;
                    }
                }
                EncStep::Pool => {
                    cur = g.max_pool(cur, 2, 2, 0);
                }
            }
        }
        taps
    }

    /// Graph-side decoder from the content-tap feature back to image space.
    pub fn decode_graph(&self, g: &mut Graph, bind: &Binding, t: NodeId) -> NodeId {
        let mut cur = t;
        for step in &self.dec_steps {
            match step {
                DecStep::Conv(layer, relu) => {
                    cur = layer.apply(g, bind, cur);
                    if *relu {
                        cur = g.relu(cur);
                    }
                }
                DecStep::Upsample => {
                    cur = g.upsample2(cur);
                }
            }
        }
        cur
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Input(format!(
                "encoder expects a (3,H,W) image, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h < 32 || w < 32 {
            return Err(Error::Input(format!("encoder needs spatial size >= 32, got {h}x{w}")));
        }
        Ok((h, w))
    }

    /// Activations at the four taps for one image. Deterministic.
    pub fn encode(&self, image: &Tensor) -> Result<EncoderTaps> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false);
        let batch = {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            Tensor::from_vec(&shape, image.data().to_vec())
        };
        let x = g.constant(batch);
        let taps = self.encode_graph(&mut g, &bind, x);
        let names = self.config.tap_names();
        let activations = taps
            .iter()
            .zip(names)
            .map(|(&id, name)| {
                let v = g.value(id);
                let (_, c, h, w) = v.expect_nchw("tap")?;
                Ok(FeatureTensor::new(
                    Tensor::from_vec(&[c, h, w], v.data().to_vec()),
                    name,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderTaps { activations })
    }

    /// Decode a content-tap feature to an image tensor (3, 8H, 8W).
    pub fn decode(&self, t: &FeatureTensor) -> Result<Tensor> {
        if t.channels() != self.content_channels() {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {}",
                self.content_channels(),
                t.channels()
            )));
        }
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false);
        let batch = {
            let mut shape = vec![1];
            shape.extend_from_slice(t.data.shape());
            Tensor::from_vec(&shape, t.data.data().to_vec())
        };
        let x = g.constant(batch);
        let out = self.decode_graph(&mut g, &bind, x);
        let v = g.value(out);
        let (_, c, h, w) = v.expect_nchw("decoded image")?;
        Ok(Tensor::from_vec(&[c, h, w], v.data().to_vec()))
    }

    /// Full stylization: encode both images, AdaIN at the content tap, blend,
    /// decode.
    pub fn stylize(&self, req: &StylizeRequest) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&req.blend) {
            return Err(Error::Input(format!("blend must be in [0,1], got {}", req.blend)));
        }
        let content = self.encode(&req.content_image)?;
        let style = self.encode(&req.style_image)?;
        let c = content.content();
        let t = adain(c, style.content())?;
        let blended = Tensor::from_vec(
            c.data.shape(),
            c.data
                .data()
                .iter()
                .zip(t.data.data())
                .map(|(&cv, &tv)| req.blend * tv + (1.0 - req.blend) * cv)
                .collect(),
        );
        self.decode(&FeatureTensor::new(blended, &c.layer_id))
    }
}

// ---- graph-side AdaIN and losses (training path) ----

/// AdaIN over batched (N,C,H,W) features, built from differentiable
/// primitives.
pub fn adain_graph(g: &mut Graph, content: NodeId, style: NodeId) -> NodeId {
    let (mu_c, std_c) = spatial_stats_graph(g, content);
    let (mu_s, std_s) = spatial_stats_graph(g, style);
    let centered = g.bcast(content, mu_c, BcastKind::Sub);
    let normed = g.bcast(centered, std_c, BcastKind::Div);
    let scaled = g.bcast(normed, std_s, BcastKind::Mul);
    g.bcast(scaled, mu_s, BcastKind::Add)
}

/// Per-(sample, channel) mean and std nodes for an (N,C,H,W) feature.
pub fn spatial_stats_graph(g: &mut Graph, x: NodeId) -> (NodeId, NodeId) {
    let mu = g.spatial_mean(x);
    let centered = g.bcast(x, mu, BcastKind::Sub);
    let sq = g.mul(centered, centered);
    let var = g.spatial_mean(sq);
    let var_eps = g.add_scalar(var, STAT_EPSILON);
    let std = g.sqrt(var_eps);
    (mu, std)
}

/// Batched content loss: MSE between the re-encoded content tap and the AdaIN
/// target.
pub fn content_loss_graph(g: &mut Graph, decoded_content_tap: NodeId, target: NodeId) -> NodeId {
    let diff = g.sub(decoded_content_tap, target);
    let sq = g.mul(diff, diff);
    g.mean_all(sq)
}

/// Batched style loss: per-tap squared gaps of channel means and stds,
/// summed over channels and taps, averaged over the batch.
pub fn style_loss_graph(g: &mut Graph, decoded_taps: &[NodeId], style_taps: &[NodeId]) -> NodeId {
    assert_eq!(decoded_taps.len(), style_taps.len());
    let batch = g.value(decoded_taps[0]).dim(0) as f64;
    let mut total: Option<NodeId> = None;
    for (&d, &s) in decoded_taps.iter().zip(style_taps) {
        let (mu_d, std_d) = spatial_stats_graph(g, d);
        let (mu_s, std_s) = spatial_stats_graph(g, s);
        let dmu = g.sub(mu_d, mu_s);
        let dmu2 = g.mul(dmu, dmu);
        let smu = g.sum_all(dmu2);
        let dsd = g.sub(std_d, std_s);
        let dsd2 = g.mul(dsd, dsd);
        let ssd = g.sum_all(dsd2);
        let tap_sum = g.add(smu, ssd);
        total = Some(match total {
            Some(t) => g.add(t, tap_sum),
            None => tap_sum,
        });
    }
    let t = total.expect("at least one tap");
    g.mul_scalar(t, 1.0 / batch)
}

// ---- decoder training ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderTrainOptions {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub style_weight: f64,
    pub seed: u64,
    /// Resize images on load; desk fixtures are already sized.
    pub image_size: Option<u32>,
    /// Restrict content/style sampling to one class instead of the pooled
    /// training set.
    pub class_filter: Option<String>,
}

impl Default for DecoderTrainOptions {
    fn default() -> Self {
        DecoderTrainOptions {
            iterations: 20_000,
            batch: 8,
            lr: 1e-4,
            style_weight: 10.0,
            seed: 0,
            image_size: None,
            class_filter: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossSample {
    pub iteration: usize,
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DecoderTrainLog {
    pub entries: Vec<LossSample>,
}

impl DecoderTrainLog {
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> f64 {
        let slice: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| range.contains(&e.iteration))
            .map(|e| e.total)
            .collect();
        if slice.is_empty() {
            return f64::NAN;
        }
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

impl StyleEngine {
    /// Train the decoder on uniformly sampled content/style batches drawn
    /// from the manifest's train split. The encoder never moves.
    pub fn train_decoder(
        &mut self,
        manifest: &DatasetManifest,
        opts: &DecoderTrainOptions,
    ) -> Result<DecoderTrainLog> {
        let pool: Vec<_> = manifest
            .records_in(Split::Train)
            .filter(|r| match &opts.class_filter {
                Some(c) => &r.class_label == c,
                None => true,
            })
            .collect();
        if pool.is_empty() && opts.iterations > 0 {
            return Err(Error::Validation(
                "decoder training needs a non-empty train split".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut cache: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut log = DecoderTrainLog::default();
        let mut adam = Adam::new(&self.params, opts.lr);

        for it in 0..opts.iterations {
            let mut content_imgs = Vec::with_capacity(opts.batch);
            let mut style_imgs = Vec::with_capacity(opts.batch);
            for _ in 0..opts.batch {
                let c = pool[rng.gen_range(0..pool.len())];
                let s = pool[rng.gen_range(0..pool.len())];
                for (rec, out) in [(c, &mut content_imgs), (s, &mut style_imgs)] {
                    let key = rec.relative_path.clone();
                    if !cache.contains_key(&key) {
                        let img =
                            imageio::load_image_resized(&manifest.resolve(rec), opts.image_size)?;
                        cache.insert(key.clone(), img);
                    }
                    out.push(cache[&key].clone());
                }
            }
            let content_batch = imageio::stack_batch(&content_imgs)?;
            let style_batch = imageio::stack_batch(&style_imgs)?;

            let mut g = Graph::new();
            let bind = self.params.bind(&mut g, true);
            let ids = bind.ids().to_vec();
            let c_in = g.constant(content_batch);
            let s_in = g.constant(style_batch);
            let c_taps = self.encode_graph(&mut g, &bind, c_in);
            let s_taps = self.encode_graph(&mut g, &bind, s_in);
            let target = adain_graph(&mut g, c_taps[3], s_taps[3]);
            let decoded = self.decode_graph(&mut g, &bind, target);
            let d_taps = self.encode_graph(&mut g, &bind, decoded);
            let content_loss = content_loss_graph(&mut g, d_taps[3], target);
            let style_loss = style_loss_graph(&mut g, &d_taps, &s_taps);
            let weighted = g.mul_scalar(style_loss, opts.style_weight);
            let total = g.add(content_loss, weighted);

            let (cv, sv, tv) =
                (g.value(content_loss).item(), g.value(style_loss).item(), g.value(total).item());
            if !tv.is_finite() {
                return Err(Error::Training {
                    iteration: it,
                    reason: format!("non-finite loss (content {cv}, style {sv})"),
                });
            }
            log.entries.push(LossSample { iteration: it, content: cv, style: sv, total: tv });

            let mut grads = g.backward(total);
            adam.step(&mut self.params, &ids, &mut grads);
            self.iteration += 1;
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn feat(shape: &[usize], data: Vec<f64>) -> FeatureTensor {
        FeatureTensor::new(Tensor::from_vec(shape, data), "t")
    }

    #[test]
    fn stats_constant_channel() {
        let f = feat(&[1, 2, 2], vec![5.0; 4]);
        let s = channel_stats(&f);
        assert_abs_diff_eq!(s.mean[0], 5.0);
        assert_abs_diff_eq!(s.std[0], STAT_EPSILON.sqrt());
    }

    #[test]
    fn stats_hand_example() {
        let f = feat(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = channel_stats(&f);
        assert_abs_diff_eq!(s.mean[0], 2.5);
        assert_abs_diff_eq!(s.std[0], (1.25_f64 + STAT_EPSILON).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.std[0], 1.1180, epsilon = 1e-4);
    }

    #[test]
    fn stats_independent_channels() {
        let f = feat(&[2, 1, 2], vec![1.0, 3.0, 10.0, 30.0]);
        let s = channel_stats(&f);
        assert_abs_diff_eq!(s.mean[0], 2.0);
        assert_abs_diff_eq!(s.mean[1], 20.0);
        assert!(s.std[1] > s.std[0]);
    }

    #[test]
    fn adain_identity_when_style_is_content() {
        let f = feat(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let out = adain(&f, &f).unwrap();
        assert!(out.data.max_abs_diff(&f.data) < 1e-5);
    }

    #[test]
    fn adain_hand_oracle() {
        // content [[1,2],[3,4]] renormalized to mean 0, std 2
        let c = feat(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        // style channel engineered so channel_stats gives mean 0, std ~2:
        // values {-2, 2} have population variance 4
        let s = feat(&[1, 1, 2], vec![-2.0, 2.0]);
        let out = adain(&c, &s).unwrap();
        let expected = [-2.683, -0.894, 0.894, 2.683];
        for (o, e) in out.data.data().iter().zip(expected) {
            assert_abs_diff_eq!(*o, e, epsilon = 1e-3);
        }
    }

    #[test]
    fn adain_constant_style_collapses_to_style_mean() {
        let c = feat(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = feat(&[1, 2, 2], vec![7.0; 4]);
        let out = adain(&c, &s).unwrap();
        for v in out.data.data() {
            assert_abs_diff_eq!(*v, 7.0, epsilon = 1e-2);
        }
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let c = feat(&[2, 2, 2], vec![0.0; 8]);
        let s = feat(&[3, 2, 2], vec![0.0; 12]);
        assert!(matches!(adain(&c, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn transfer_losses_zero_at_zero_residual() {
        let t = feat(&[2, 2, 2], vec![0.5, 1.0, -1.0, 2.0, 0.0, 3.0, 1.5, -0.5]);
        let taps = EncoderTaps { activations: vec![t.clone()] };
        let (c, s) = transfer_losses(&taps, &t, &taps).unwrap();
        assert_abs_diff_eq!(c, 0.0);
        assert_abs_diff_eq!(s, 0.0);
    }

    #[test]
    fn transfer_losses_hand_example() {
        // one layer, two channels, mean gap 1 and std gap 0.5 per channel:
        // style loss = 2*1 + 2*0.25 = 2.5
        let base = feat(&[2, 1, 2], vec![-1.0, 1.0, -1.0, 1.0]); // mean 0, std ~1
        let shifted = feat(&[2, 1, 2], vec![-0.5, 2.5, -0.5, 2.5]); // mean 1, std ~1.5
        let d = EncoderTaps { activations: vec![shifted.clone()] };
        let s = EncoderTaps { activations: vec![base] };
        let (_, style_loss) = transfer_losses(&d, &shifted, &s).unwrap();
        assert_abs_diff_eq!(style_loss, 2.5, epsilon = 1e-4);
    }

    #[test]
    fn engine_shapes_desk() {
        let engine = StyleEngine::new(EncoderConfig::desk(), 0);
        let img = Tensor::full(&[3, 64, 64], 0.5);
        let taps = engine.encode(&img).unwrap();
        let shapes: Vec<Vec<usize>> =
            taps.activations.iter().map(|t| t.data.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 64, 64], vec![8, 32, 32], vec![16, 16, 16], vec![32, 8, 8]]);
        let decoded = engine.decode(taps.content()).unwrap();
        assert_eq!(decoded.shape(), &[3, 64, 64]);
        assert!(decoded.is_finite());
    }

    #[test]
    fn engine_is_deterministic() {
        let engine = StyleEngine::new(EncoderConfig::desk(), 3);
        let img = Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let a = engine.encode(&img).unwrap();
        let b = engine.encode(&img).unwrap();
        for (x, y) in a.activations.iter().zip(&b.activations) {
            assert_eq!(x.data, y.data);
        }
        let d1 = engine.decode(a.content()).unwrap();
        let d2 = engine.decode(b.content()).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn engine_rejects_bad_inputs() {
        let engine = StyleEngine::new(EncoderConfig::desk(), 0);
        assert!(matches!(engine.encode(&Tensor::zeros(&[1, 64, 64])), Err(Error::Input(_))));
        assert!(matches!(engine.encode(&Tensor::zeros(&[3, 16, 16])), Err(Error::Input(_))));
        let bad_feat = FeatureTensor::new(Tensor::zeros(&[7, 8, 8]), "relu4_1");
        assert!(matches!(engine.decode(&bad_feat), Err(Error::Shape(_))));
        let req = StylizeRequest {
            content_image: Tensor::zeros(&[3, 32, 32]),
            style_image: Tensor::zeros(&[3, 32, 32]),
            blend: 1.5,
        };
        assert!(matches!(engine.stylize(&req), Err(Error::Input(_))));
    }

    #[test]
    fn zero_image_keeps_activations_finite() {
        let engine = StyleEngine::new(EncoderConfig::desk(), 0);
        let taps = engine.encode(&Tensor::zeros(&[3, 32, 32])).unwrap();
        for t in &taps.activations {
            assert!(t.data.is_finite());
        }
    }
}
