//! Full-width architecture forwards checked against the closed-form shape
//! oracle. These run real convolutions at published input sizes, so they are
//! the slowest tests in the crate.

use styleaug_core::attnclf::{
    tap_shape_oracle, Architecture, BackboneSpec, Classifier, ClassifierConfig,
};
use styleaug_core::stylegen::{EncoderConfig, FeatureTensor, StyleEngine};
use styleaug_core::tensor::Tensor;

fn spec(arch: Architecture) -> BackboneSpec {
    BackboneSpec { architecture: arch, tap_ids: Vec::new(), frozen: true, pretrained: false }
}

fn check_against_oracle(arch: Architecture, input: usize) {
    let cfg = ClassifierConfig {
        backbone: spec(arch),
        num_classes: 4,
        proj_width: 8,
        head_hidden: 16,
        dropout: 0.0,
        tinycnn_widths: [4, 8, 16, 32],
    };
    let clf = Classifier::new(cfg, 0).unwrap();
    let batch = Tensor::full(&[1, 3, input, input], 0.5);
    let feats = clf.extract_features(&batch).unwrap();
    let (oracle, global) = tap_shape_oracle(arch, [4, 8, 16, 32], (input, input));
    for (local, tap_id) in feats.locals.iter().zip(&feats.tap_ids) {
        let expected = &oracle.iter().find(|(id, _)| id == tap_id).unwrap().1;
        assert_eq!(local.dim(1), expected.channels, "{arch:?} {tap_id} channels");
        assert_eq!(local.dim(2), expected.height, "{arch:?} {tap_id} height");
        assert_eq!(local.dim(3), expected.width, "{arch:?} {tap_id} width");
    }
    assert_eq!(feats.global_vec.dim(1), global, "{arch:?} global width");
}

#[test]
fn resnet50_taps_at_224() {
    // published arithmetic: stem 64x56x56, stages 256/512/1024 at 56/28/14,
    // global 2048
    check_against_oracle(Architecture::Resnet50, 224);
}

#[test]
fn vgg16_taps_at_224() {
    // blocks 2-4: 128x112x112, 256x56x56, 512x28x28; global 512
    check_against_oracle(Architecture::Vgg16, 224);
}

#[test]
fn resnet34_taps_at_112() {
    check_against_oracle(Architecture::Resnet34, 112);
}

#[test]
fn vgg19_taps_at_112() {
    check_against_oracle(Architecture::Vgg19, 112);
}

#[test]
fn full_width_encoder_taps_at_256() {
    // the style-transfer encoder at publication width: 64x256x256,
    // 128x128x128, 256x64x64, 512x32x32
    let engine = StyleEngine::new(EncoderConfig::vgg19(), 0);
    let img = Tensor::full(&[3, 256, 256], 0.5);
    let taps = engine.encode(&img).unwrap();
    let shapes: Vec<Vec<usize>> =
        taps.activations.iter().map(|t| t.data.shape().to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![64, 256, 256],
            vec![128, 128, 128],
            vec![256, 64, 64],
            vec![512, 32, 32],
        ]
    );
    for t in &taps.activations {
        assert!(t.data.is_finite());
    }
}

#[test]
fn full_width_decoder_upsamples_by_eight() {
    let engine = StyleEngine::new(EncoderConfig::vgg19(), 0);
    let feat = FeatureTensor::new(Tensor::full(&[512, 32, 32], 0.1), "relu4_1");
    let img = engine.decode(&feat).unwrap();
    assert_eq!(img.shape(), &[3, 256, 256]);
    assert!(img.is_finite());
}
