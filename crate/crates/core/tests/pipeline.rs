use ndc_core::backbone::{Backbone, BackboneSpec};
use ndc_core::classifier::{
    classify_detections, classify_points, linear_probe, predict, train_classifier, ClassifierTrainConfig, LinearHead,
    ProbeConfig, Supervision, TrainMode,
};
use ndc_core::detector::{decode, DetectorArch, DetectorModel};
use ndc_core::encoder::{pretrain_encoder, Encoder, EncoderKind, PretrainConfig};
use ndc_core::joint::{joint_forward, JointModel};
use ndc_core::nn::{conv2d, Tensor};
use ndc_core::synth::{generate, Dataset, SceneSpec};
use ndc_core::training::Schedule;

fn small(n: usize, seed: u64) -> Dataset {
    let spec = SceneSpec { height: 32, width: 32, mean_count: 3.0, ..SceneSpec::default() };
    generate(&spec, n, seed, "small").unwrap()
}

fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// Convolutions of a backbone applied one by one.
fn manual_backbone(b: &Backbone, image: &Tensor) -> Tensor {
    let mut x = Backbone::normalize(image);
    let names: Vec<String> = b.params.iter().map(|(n, _)| n.to_string()).collect();
    for (k, layer) in b.spec.layers.iter().enumerate() {
        let w = b.params.value(b.params.find(&names[2 * k]).unwrap());
        let bias = b.params.value(b.params.find(&names[2 * k + 1]).unwrap());
        x = relu(&conv2d(&x, w, bias, layer.stride, 1).unwrap());
    }
    x
}

#[test]
fn encoder_equals_manual_composition() {
    let enc = Encoder::random(6, 4, 8, true).unwrap();
    assert_eq!(enc.backbone.spec.layers.len(), 3);
    let img = small(1, 3).samples[0].image.clone();
    let fm = enc.encode(&img).unwrap();
    let manual = manual_backbone(&enc.backbone, &img);
    assert_eq!(fm.values.shape(), manual.shape());
    for (a, b) in fm.values.data().iter().zip(manual.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn joint_equals_manual_composition() {
    let m = JointModel::new(BackboneSpec::detector(1, 4).unwrap(), 3, 9).unwrap();
    let img = small(1, 4).samples[0].image.clone();
    let (_, _, class_logits) = joint_forward(&m, &img).unwrap();
    let f = manual_backbone(&m.backbone, &img);
    let w = m.class_params.value(m.class_params.find("head.class.weight").unwrap());
    let b = m.class_params.value(m.class_params.find("head.class.bias").unwrap());
    let manual = conv2d(&f, w, b, 1, 0).unwrap();
    for (a, b) in class_logits.data().iter().zip(manual.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn predict_is_decode_then_classify() {
    let det = DetectorModel::new(DetectorArch::default(), 1).unwrap();
    let enc = Encoder::random(8, 4, 2, true).unwrap();
    let head = LinearHead::new(8, 3, 3).unwrap();
    let img = small(1, 5).samples[0].image.clone();
    // A low threshold so that the untrained detector fires somewhere.
    let tau = 0.01;
    let grid = det.grid_for(&img).unwrap();
    let (scores, offsets) = det.forward(&img).unwrap();
    let dets = decode(&scores, &offsets, &grid, tau).unwrap();
    assert!(!dets.is_empty());
    let set = predict(&img, &det, &enc, &head, tau).unwrap();
    assert_eq!(set, classify_detections(&enc, &head, &img, &dets).unwrap());
    assert_eq!(set.len(), dets.len());
    for (e, d) in set.entries.iter().zip(&dets) {
        assert_eq!(e.x.to_bits(), d.point.x.to_bits());
        assert_eq!(e.y.to_bits(), d.point.y.to_bits());
        assert_eq!(e.det_score, d.score);
    }
    let plain = classify_points(&enc, &head, &img, &set.points()).unwrap();
    for (a, b) in plain.entries.iter().zip(&set.entries) {
        assert_eq!((a.class, a.cls_prob), (b.class, b.cls_prob));
    }
}

#[test]
fn no_detections_give_empty_predictions() {
    let det = DetectorModel::new(DetectorArch::default(), 1).unwrap();
    let enc = Encoder::random(8, 4, 2, true).unwrap();
    let head = LinearHead::new(8, 3, 3).unwrap();
    let img = small(1, 5).samples[0].image.clone();
    // Initial scores sit near 0.03, far below the default threshold.
    assert!(predict(&img, &det, &enc, &head, 0.5).unwrap().is_empty());
}

fn quick_pretrain(seed: u64) -> PretrainConfig {
    PretrainConfig {
        schedule: Schedule { epochs: 2, batch_size: 8, lr: 0.05, momentum: 0.9 },
        feature_dim: 8,
        crop: 16,
        seed,
        ..PretrainConfig::default()
    }
}

#[test]
fn pretraining_is_deterministic_and_frozen() {
    let data = small(6, 21);
    let a = pretrain_encoder(&data, &quick_pretrain(4)).unwrap();
    let b = pretrain_encoder(&data, &quick_pretrain(4)).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert!(a.frozen);
    assert_eq!(a.kind, EncoderKind::PretextPretrained);
    let c = pretrain_encoder(&data, &quick_pretrain(5)).unwrap();
    assert_ne!(a.checksum(), c.checksum());

    let cfg = ClassifierTrainConfig {
        schedule: Schedule { epochs: 3, batch_size: 8, lr: 0.05, momentum: 0.9 },
        ..ClassifierTrainConfig::default()
    };
    let before = a.checksum();
    let out = train_classifier(&a, &data, &small(2, 22), &cfg, None).unwrap();
    assert_eq!(out.encoder.checksum(), before);
}

#[test]
fn detection_supervision_trains_on_matched_points() {
    let data = small(4, 31);
    let enc = Encoder::random(8, 4, 2, true).unwrap();
    let det = DetectorModel::new(DetectorArch::default(), 1).unwrap();
    let cfg = ClassifierTrainConfig {
        schedule: Schedule { epochs: 1, batch_size: 8, lr: 0.05, momentum: 0.9 },
        supervision: Supervision::Detections,
        tau: 0.01,
        mode: TrainMode::Linear,
        ..ClassifierTrainConfig::default()
    };
    let out = train_classifier(&enc, &data, &data, &cfg, Some(&det)).unwrap();
    assert_eq!(out.history.len(), 1);
}

#[test]
fn probe_runs_on_random_encoder() {
    let enc = Encoder::random(8, 4, 2, true).unwrap();
    let cfg = ProbeConfig {
        schedule: Schedule { epochs: 2, batch_size: 16, lr: 0.05, momentum: 0.9 },
        seed: 1,
    };
    let f = linear_probe(&enc, &small(6, 1), &small(3, 2), &cfg).unwrap();
    assert!((0.0..=1.0).contains(&f));
}
