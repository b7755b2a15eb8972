//! Backbone architectures, tap catalogs, and the shape oracle.
//!
//! Every backbone is expressed as a flat list of items applied in order;
//! residual blocks carry their own skip projection. Batch normalization is
//! intentionally absent everywhere: the VGG variants never had it, and the
//! ResNet variants here keep the published block topology (strides, widths,
//! expansion) with plain biased convolutions so frozen-backbone training has
//! no hidden running statistics. Paper-scale runs load pretrained weights
//! from a checkpoint; shape contracts only depend on topology.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Binding, Conv2dLayer, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Vgg16,
    Vgg19,
    Resnet34,
    Resnet50,
    Resnet101,
    Resnet152,
    Tinycnn,
}

impl Architecture {
    pub fn min_input(&self) -> usize {
        match self {
            Architecture::Tinycnn => 16,
            _ => 32,
        }
    }
}

pub(crate) enum BbItem {
    Conv { layer: Conv2dLayer, relu: bool },
    Pool { k: usize, s: usize, p: usize },
    Basic { conv1: Conv2dLayer, conv2: Conv2dLayer, down: Option<Conv2dLayer> },
    Bottleneck {
        conv1: Conv2dLayer,
        conv2: Conv2dLayer,
        conv3: Conv2dLayer,
        down: Option<Conv2dLayer>,
    },
    Tap(String),
}

pub(crate) struct Backbone {
    pub items: Vec<BbItem>,
    /// tap id -> channel count, in shallow-to-deep order.
    pub tap_channels: Vec<(String, usize)>,
    pub global_channels: usize,
}

impl Backbone {
    /// Run the backbone, returning (tap id -> node) plus the final stage node.
    pub fn apply(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> (Vec<(String, NodeId)>, NodeId) {
        let mut taps = Vec::new();
        let mut cur = x;
        for item in &self.items {
            match item {
                BbItem::Conv { layer, relu } => {
                    cur = layer.apply(g, bind, cur);
                    if *relu {
                        cur = g.relu(cur);
                    }
                }
                BbItem::Pool { k, s, p } => {
                    cur = g.max_pool(cur, *k, *s, *p);
                }
                BbItem::Basic { conv1, conv2, down } => {
                    let skip = match down {
                        Some(d) => d.apply(g, bind, cur),
                        None => cur,
                    };
                    let a = conv1.apply(g, bind, cur);
                    let a = g.relu(a);
                    let b = conv2.apply(g, bind, a);
                    let sum = g.add(b, skip);
                    cur = g.relu(sum);
                }
                BbItem::Bottleneck { conv1, conv2, conv3, down } => {
                    let skip = match down {
                        Some(d) => d.apply(g, bind, cur),
                        None => cur,
                    };
                    let a = conv1.apply(g, bind, cur);
                    let a = g.relu(a);
                    let b = conv2.apply(g, bind, a);
                    let b = g.relu(b);
                    let c = conv3.apply(g, bind, b);
                    let sum = g.add(c, skip);
                    cur = g.relu(sum);
                }
                BbItem::Tap(id) => taps.push((id.clone(), cur)),
            }
        }
        (taps, cur)
    }
}

pub fn valid_taps(arch: Architecture) -> Vec<String> {
    match arch {
        Architecture::Vgg16 | Architecture::Vgg19 => {
            (1..=5).map(|i| format!("block{i}")).collect()
        }
        Architecture::Tinycnn => (1..=4).map(|i| format!("stage{i}")).collect(),
        _ => {
            let mut v = vec!["stem".to_string()];
            v.extend((1..=4).map(|i| format!("stage{i}")));
            v
        }
    }
}

pub fn default_taps(arch: Architecture) -> Vec<String> {
    match arch {
        // three mid blocks for the VGG variants
        Architecture::Vgg16 | Architecture::Vgg19 => {
            vec!["block2".into(), "block3".into(), "block4".into()]
        }
        Architecture::Tinycnn => vec!["stage1".into(), "stage2".into(), "stage3".into()],
        // stem output plus the first three stages
        _ => vec!["stem".into(), "stage1".into(), "stage2".into(), "stage3".into()],
    }
}

fn vgg_plan(arch: Architecture) -> (Vec<usize>, [usize; 5]) {
    let widths = vec![64, 128, 256, 512, 512];
    let convs = match arch {
        Architecture::Vgg16 => [2, 2, 3, 3, 3],
        Architecture::Vgg19 => [2, 2, 4, 4, 4],
        _ => unreachable!(),
    };
    (widths, convs)
}

fn resnet_plan(arch: Architecture) -> (Vec<usize>, bool) {
    match arch {
        Architecture::Resnet34 => (vec![3, 4, 6, 3], false),
        Architecture::Resnet50 => (vec![3, 4, 6, 3], true),
        Architecture::Resnet101 => (vec![3, 4, 23, 3], true),
        Architecture::Resnet152 => (vec![3, 8, 36, 3], true),
        _ => unreachable!(),
    }
}

pub(crate) fn build_backbone<R: Rng>(
    arch: Architecture,
    tap_ids: &[String],
    tinycnn_widths: [usize; 4],
    store: &mut ParamStore,
    rng: &mut R,
    trainable: bool,
) -> Result<Backbone> {
    let valid = valid_taps(arch);
    for t in tap_ids {
        if !valid.contains(t) {
            return Err(Error::Config(format!(
                "invalid tap '{t}' for {arch:?}; valid taps: {}",
                valid.join(", ")
            )));
        }
    }
    // taps must be referenced shallow -> deep
    let mut positions: Vec<usize> = Vec::new();
    for t in tap_ids {
        positions.push(valid.iter().position(|v| v == t).unwrap());
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "taps must be ordered shallow to deep: {tap_ids:?}"
        )));
    }

    let mut items = Vec::new();
    let mut tap_channels = Vec::new();
    let mut tap = |items: &mut Vec<BbItem>, id: &str, ch: usize| {
        if tap_ids.iter().any(|t| t == id) {
            items.push(BbItem::Tap(id.to_string()));
            tap_channels.push((id.to_string(), ch));
        }
    };

    let global_channels;
    match arch {
        Architecture::Tinycnn => {
            let mut in_ch = 3;
            for (i, &w) in tinycnn_widths.iter().enumerate() {
                let layer =
                    Conv2dLayer::new(&format!("backbone.stage{}.conv", i + 1), in_ch, w, 3);
                layer.register(store, rng, trainable);
                items.push(BbItem::Conv { layer, relu: true });
                tap(&mut items, &format!("stage{}", i + 1), w);
                if i < 3 {
                    items.push(BbItem::Pool { k: 2, s: 2, p: 0 });
                }
                in_ch = w;
            }
            global_channels = tinycnn_widths[3];
        }
        Architecture::Vgg16 | Architecture::Vgg19 => {
            let (widths, convs) = vgg_plan(arch);
            let mut in_ch = 3;
            for (b, (&w, &n)) in widths.iter().zip(&convs).enumerate() {
                for c in 0..n {
                    let layer = Conv2dLayer::new(
                        &format!("backbone.block{}.c{}", b + 1, c + 1),
                        in_ch,
                        w,
                        3,
                    );
                    layer.register(store, rng, trainable);
                    items.push(BbItem::Conv { layer, relu: true });
                    in_ch = w;
                }
                tap(&mut items, &format!("block{}", b + 1), w);
                items.push(BbItem::Pool { k: 2, s: 2, p: 0 });
            }
            global_channels = widths[4];
        }
        _ => {
            let (blocks, bottleneck) = resnet_plan(arch);
            let stem = Conv2dLayer::new("backbone.stem.conv", 3, 64, 7).stride(2).pad(3);
            stem.register(store, rng, trainable);
            items.push(BbItem::Conv { layer: stem, relu: true });
            items.push(BbItem::Pool { k: 3, s: 2, p: 1 });
            tap(&mut items, "stem", 64);

            let expansion = if bottleneck { 4 } else { 1 };
            let mut in_ch = 64;
            for (stage, &n_blocks) in blocks.iter().enumerate() {
                let base = 64 << stage;
                let out_ch = base * expansion;
                for blk in 0..n_blocks {
                    let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
                    let prefix = format!("backbone.stage{}.b{}", stage + 1, blk);
                    let down = if stride != 1 || in_ch != out_ch {
                        let d = Conv2dLayer::new(&format!("{prefix}.down"), in_ch, out_ch, 1)
                            .stride(stride)
                            .pad(0);
                        d.register(store, rng, trainable);
                        Some(d)
                    } else {
                        None
                    };
                    if bottleneck {
                        let c1 = Conv2dLayer::new(&format!("{prefix}.c1"), in_ch, base, 1).pad(0);
                        let c2 = Conv2dLayer::new(&format!("{prefix}.c2"), base, base, 3)
                            .stride(stride);
                        let c3 = Conv2dLayer::new(&format!("{prefix}.c3"), base, out_ch, 1).pad(0);
                        c1.register(store, rng, trainable);
                        c2.register(store, rng, trainable);
                        c3.register(store, rng, trainable);
                        items.push(BbItem::Bottleneck { conv1: c1, conv2: c2, conv3: c3, down });
                    } else {
                        let c1 = Conv2dLayer::new(&format!("{prefix}.c1"), in_ch, out_ch, 3)
                            .stride(stride);
                        let c2 = Conv2dLayer::new(&format!("{prefix}.c2"), out_ch, out_ch, 3);
                        c1.register(store, rng, trainable);
                        c2.register(store, rng, trainable);
                        items.push(BbItem::Basic { conv1: c1, conv2: c2, down });
                    }
                    in_ch = out_ch;
                }
                tap(&mut items, &format!("stage{}", stage + 1), in_ch);
            }
            global_channels = in_ch;
        }
    }

    // order the recorded tap channels to match the requested tap order
    let tap_channels_ordered: Vec<(String, usize)> = tap_ids
        .iter()
        .map(|t| tap_channels.iter().find(|(id, _)| id == t).cloned().unwrap())
        .collect();

    Ok(Backbone { items, tap_channels: tap_channels_ordered, global_channels })
}

/// Deep and shallow parameter-name prefixes for two-group gradual unfreezing.
pub(crate) fn unfreeze_groups(arch: Architecture) -> (Vec<&'static str>, Vec<&'static str>) {
    match arch {
        Architecture::Vgg16 | Architecture::Vgg19 => (
            vec!["backbone.block4", "backbone.block5"],
            vec!["backbone.block1", "backbone.block2", "backbone.block3"],
        ),
        Architecture::Tinycnn => (
            vec!["backbone.stage3", "backbone.stage4"],
            vec!["backbone.stage1", "backbone.stage2"],
        ),
        _ => (
            vec!["backbone.stage3", "backbone.stage4"],
            vec!["backbone.stem", "backbone.stage1", "backbone.stage2"],
        ),
    }
}

// ---- shape oracle ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Closed-form tap/global shapes from layer arithmetic alone. This is the
/// independent reference the forward implementations are checked against.
pub fn tap_shape_oracle(
    arch: Architecture,
    tinycnn_widths: [usize; 4],
    input: (usize, usize),
) -> (Vec<(String, TapShape)>, usize) {
    let (mut h, mut w) = input;
    let mut shapes = Vec::new();
    let global;
    match arch {
        Architecture::Tinycnn => {
            for (i, &c) in tinycnn_widths.iter().enumerate() {
                shapes.push((format!("stage{}", i + 1), TapShape { channels: c, height: h, width: w }));
                if i < 3 {
                    h = conv_out(h, 2, 2, 0);
                    w = conv_out(w, 2, 2, 0);
                }
            }
            global = tinycnn_widths[3];
        }
        Architecture::Vgg16 | Architecture::Vgg19 => {
            let (widths, _) = vgg_plan(arch);
            for (b, &c) in widths.iter().enumerate() {
                shapes.push((format!("block{}", b + 1), TapShape { channels: c, height: h, width: w }));
                h = conv_out(h, 2, 2, 0);
                w = conv_out(w, 2, 2, 0);
            }
            global = widths[4];
        }
        _ => {
            let (_, bottleneck) = resnet_plan(arch);
            let expansion = if bottleneck { 4 } else { 1 };
            h = conv_out(h, 7, 2, 3);
            w = conv_out(w, 7, 2, 3);
            h = conv_out(h, 3, 2, 1);
            w = conv_out(w, 3, 2, 1);
            shapes.push(("stem".into(), TapShape { channels: 64, height: h, width: w }));
            for stage in 0..4 {
                if stage > 0 {
                    h = conv_out(h, 3, 2, 1);
                    w = conv_out(w, 3, 2, 1);
                }
                let c = (64 << stage) * expansion;
                shapes.push((
                    format!("stage{}", stage + 1),
                    TapShape { channels: c, height: h, width: w },
                ));
            }
            global = 512 * expansion;
        }
    }
    (shapes, global)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_resnet50_published_shapes() {
        let (shapes, global) = tap_shape_oracle(Architecture::Resnet50, [0; 4], (224, 224));
        let get = |id: &str| shapes.iter().find(|(t, _)| t == id).unwrap().1;
        assert_eq!(get("stem"), TapShape { channels: 64, height: 56, width: 56 });
        assert_eq!(get("stage1"), TapShape { channels: 256, height: 56, width: 56 });
        assert_eq!(get("stage2"), TapShape { channels: 512, height: 28, width: 28 });
        assert_eq!(get("stage3"), TapShape { channels: 1024, height: 14, width: 14 });
        assert_eq!(global, 2048);
    }

    #[test]
    fn oracle_vgg16_published_shapes() {
        let (shapes, global) = tap_shape_oracle(Architecture::Vgg16, [0; 4], (224, 224));
        let get = |id: &str| shapes.iter().find(|(t, _)| t == id).unwrap().1;
        assert_eq!(get("block2"), TapShape { channels: 128, height: 112, width: 112 });
        assert_eq!(get("block3"), TapShape { channels: 256, height: 56, width: 56 });
        assert_eq!(get("block4"), TapShape { channels: 512, height: 28, width: 28 });
        assert_eq!(global, 512);
    }

    #[test]
    fn oracle_resnet34_channels() {
        let (shapes, global) = tap_shape_oracle(Architecture::Resnet34, [0; 4], (224, 224));
        assert_eq!(shapes.last().unwrap().1.channels, 512);
        assert_eq!(global, 512);
    }

    #[test]
    fn deep_variants_share_bottleneck_shapes() {
        let a = tap_shape_oracle(Architecture::Resnet101, [0; 4], (224, 224));
        let b = tap_shape_oracle(Architecture::Resnet152, [0; 4], (224, 224));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, 2048);
        assert_eq!(b.1, 2048);
    }
}
