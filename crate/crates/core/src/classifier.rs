//! Linear classification head over sampled encoder features, its training
//! modes, linear probing and the two-step prediction pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{Detection, DetectorModel};
use crate::encoder::{bilinear_backward, bilinear_sample, Encoder, FeatureMap};
use crate::error::{Error, Result};
use crate::eval::{match_one_to_one, Counts, MatchReport};
use crate::geometry::{Point, PointAnnotation};
use crate::nn::{init, sgd_step, softmax_cross_entropy, CosineSchedule, Layer, Linear, ParamSet, Tensor};
use crate::synth::{derive_seed, Dataset};
use crate::training::Schedule;

/// A single fully connected layer mapping `C'` features to `C` class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub layer: Layer,
    pub params: ParamSet,
    pub in_features: usize,
    pub classes: usize,
}

impl LinearHead {
    pub fn new(in_features: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = init::normal(&[classes, in_features], 0.01, &mut rng);
        Self::from_weights(weight, Tensor::zeros(&[classes]))
    }

    /// Head with given `[C, C']` weight and `[C]` bias.
    pub fn from_weights(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (classes, in_features) = weight.dims2()?;
        bias.expect_shape(&[classes])?;
        if classes == 0 || in_features == 0 {
            return Err(Error::InvalidShape("head needs at least one class and feature".into()));
        }
        let mut params = ParamSet::new();
        let lin = Linear {
            in_features,
            out_features: classes,
            weight: params.add("head.weight", weight)?,
            bias: params.add("head.bias", bias)?,
        };
        Ok(Self {
            layer: Layer::Linear(lin),
            params,
            in_features,
            classes,
        })
    }

    /// Logits `[N, C]` for features `[N, C']`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.layer.infer(&self.params, features)
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Index and value of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

/// One classified nucleus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub x: f64,
    pub y: f64,
    /// Class id in `1..=C`.
    pub class: usize,
    pub det_score: f64,
    pub cls_prob: f64,
}

impl Prediction {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

pub const PREDICTION_HEADER: &str = "x,y,class,det_score,cls_prob";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub entries: Vec<Prediction>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn points(&self) -> Vec<Point> {
        self.entries.iter().map(Prediction::point).collect()
    }

    pub fn annotations(&self) -> Vec<PointAnnotation> {
        self.entries
            .iter()
            .map(|e| PointAnnotation {
                point: e.point(),
                class_id: e.class,
            })
            .collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from(PREDICTION_HEADER);
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{},{}\n", e.x, e.y, e.class, e.det_score, e.cls_prob));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, classes: usize) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line as u64,
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| parse_err(0, e.to_string()))?;
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>().join(",") != PREDICTION_HEADER {
            return Err(parse_err(1, format!("expected header `{PREDICTION_HEADER}`")));
        }
        let mut entries = Vec::new();
        for (k, rec) in reader.deserialize::<Prediction>().enumerate() {
            let line = k + 2;
            let e = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if e.class == 0 || e.class > classes {
                return Err(parse_err(line, format!("class {} outside 1..={classes}", e.class)));
            }
            if !(e.x.is_finite() && e.y.is_finite()) {
                return Err(parse_err(line, "non-finite coordinate".into()));
            }
            entries.push(e);
        }
        Ok(Self { entries })
    }
}

/// Features `[N, C']` sampled at `points`.
pub fn sample_features(fm: &FeatureMap, points: &[Point]) -> Result<Tensor> {
    let c = fm.channels();
    let mut data = Vec::with_capacity(points.len() * c);
    for &p in points {
        data.extend(bilinear_sample(fm, p));
    }
    Tensor::new(vec![points.len(), c], data)
}

fn classify_feature_matrix(
    head: &LinearHead,
    features: &Tensor,
    points: &[Point],
    det_scores: &[f64],
) -> Result<PredictionSet> {
    if points.is_empty() {
        return Ok(PredictionSet::default());
    }
    let logits = head.logits(features)?;
    let entries = points
        .iter()
        .zip(det_scores)
        .enumerate()
        .map(|(k, (p, &det_score))| {
            let row = &logits.data()[k * head.classes..(k + 1) * head.classes];
            let (c, _) = argmax(row);
            Prediction {
                x: p.x,
                y: p.y,
                class: c + 1,
                det_score,
                cls_prob: softmax(row)[c],
            }
        })
        .collect();
    Ok(PredictionSet { entries })
}

fn check_head(encoder: &Encoder, head: &LinearHead) -> Result<()> {
    if encoder.feature_dim() != head.in_features {
        return Err(Error::InvalidShape(format!(
            "head expects {} features, encoder produces {}",
            head.in_features,
            encoder.feature_dim()
        )));
    }
    Ok(())
}

/// Classifies each point from the feature sampled at its location.
///
/// Output order and coordinates equal the input; `det_score` is set to 1.
pub fn classify_points(encoder: &Encoder, head: &LinearHead, image: &Tensor, points: &[Point]) -> Result<PredictionSet> {
    classify_scored(encoder, head, image, points, &vec![1.0; points.len()])
}

fn classify_scored(
    encoder: &Encoder,
    head: &LinearHead,
    image: &Tensor,
    points: &[Point],
    det_scores: &[f64],
) -> Result<PredictionSet> {
    check_head(encoder, head)?;
    if points.is_empty() {
        return Ok(PredictionSet::default());
    }
    let fm = encoder.encode(image)?;
    classify_feature_matrix(head, &sample_features(&fm, points)?, points, det_scores)
}

/// Detect with `detector`, then classify every detection.
pub fn predict(
    image: &Tensor,
    detector: &DetectorModel,
    encoder: &Encoder,
    head: &LinearHead,
    tau: f64,
) -> Result<PredictionSet> {
    let dets = detector.detect(image, tau)?;
    classify_detections(encoder, head, image, &dets)
}

pub fn classify_detections(encoder: &Encoder, head: &LinearHead, image: &Tensor, dets: &[Detection]) -> Result<PredictionSet> {
    let points: Vec<Point> = dets.iter().map(|d| d.point).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    classify_scored(encoder, head, image, &points, &scores)
}

/// Per-class counts of predicted labels against true labels at shared
/// coordinates; `detection` counts every point as a true positive.
pub fn label_report(predicted: &[usize], truth: &[usize], classes: usize) -> Result<MatchReport> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len(),
            right: truth.len(),
        });
    }
    let mut report = MatchReport::empty(classes, 0.0);
    for (&p, &t) in predicted.iter().zip(truth) {
        for &c in &[p, t] {
            if c == 0 || c > classes {
                return Err(Error::LabelOutOfRange { label: c, classes });
            }
        }
        if p == t {
            report.per_class[p - 1].tp += 1;
        } else {
            report.per_class[p - 1].fp += 1;
            report.per_class[t - 1].fn_ += 1;
        }
    }
    report.detection = Counts {
        tp: truth.len(),
        fp: 0,
        fn_: 0,
    };
    Ok(report)
}

/// Which coordinates supervise classifier training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Supervision {
    /// Ground-truth centers with their labels.
    #[default]
    GroundTruth,
    /// Detector outputs matched to ground truth within the radius; unmatched
    /// detections are dropped.
    Detections,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Only the head is optimized.
    #[default]
    Linear,
    /// Head and encoder are optimized together.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub schedule: Schedule,
    pub mode: TrainMode,
    pub supervision: Supervision,
    /// Detection threshold used with [`Supervision::Detections`].
    pub tau: f64,
    pub radius: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                epochs: 100,
                batch_size: 256,
                lr: 0.01,
                momentum: 0.9,
            },
            mode: TrainMode::Linear,
            supervision: Supervision::GroundTruth,
            tau: crate::detector::DEFAULT_TAU,
            radius: crate::eval::DEFAULT_RADIUS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Average F1 of labels at validation ground-truth coordinates.
    pub val_average_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub head: LinearHead,
    /// The encoder after training; unchanged in linear mode.
    pub encoder: Encoder,
    pub history: Vec<ClassifierEpoch>,
}

/// A supervision point: image index, location and 0-based label.
#[derive(Debug, Clone, Copy)]
struct Item {
    image: usize,
    point: Point,
    label: usize,
}

fn supervision_items(
    dataset: &Dataset,
    cfg: &ClassifierTrainConfig,
    detector: Option<&DetectorModel>,
) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    for (image, s) in dataset.samples.iter().enumerate() {
        match cfg.supervision {
            Supervision::GroundTruth => {
                items.extend(s.annotations.iter().map(|a| Item {
                    image,
                    point: a.point,
                    label: a.class_id - 1,
                }));
            }
            Supervision::Detections => {
                let det = detector.ok_or_else(|| {
                    Error::InvalidConfig("detection supervision requires a detector".into())
                })?;
                let dets: Vec<Point> = det.detect(&s.image, cfg.tau)?.iter().map(|d| d.point).collect();
                for m in match_one_to_one(&dets, &s.points(), cfg.radius) {
                    items.push(Item {
                        image,
                        point: dets[m.pred],
                        label: s.annotations[m.gt].class_id - 1,
                    });
                }
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset(format!("no supervision points in `{}`", dataset.name)));
    }
    Ok(items)
}

/// Features `[N, C']` and 0-based labels at every ground-truth point.
pub fn gt_features(encoder: &Encoder, dataset: &Dataset) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in &dataset.samples {
        if s.annotations.is_empty() {
            continue;
        }
        let fm = encoder.encode(&s.image)?;
        for a in &s.annotations {
            data.extend(bilinear_sample(&fm, a.point));
            labels.push(a.class_id - 1);
        }
    }
    Ok((Tensor::new(vec![labels.len(), encoder.feature_dim()], data)?, labels))
}

fn rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, c) = t.dims2()?;
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![idx.len(), c], data)
}

fn predicted_labels(head: &LinearHead, features: &Tensor) -> Result<Vec<usize>> {
    let (n, _) = features.dims2()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let logits = head.logits(features)?;
    Ok(logits
        .data()
        .chunks(head.classes)
        .map(|row| argmax(row).0 + 1)
        .collect())
}

/// Average label F1 of `head` on fixed features.
fn feature_f1(head: &LinearHead, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let truth: Vec<usize> = labels.iter().map(|l| l + 1).collect();
    Ok(label_report(&predicted_labels(head, features)?, &truth, head.classes)?.average_f1())
}

/// Fits `head` on fixed features; returns per-epoch mean training loss and the
/// optional per-epoch evaluation.
fn fit_on_features(
    head: &mut LinearHead,
    features: &Tensor,
    labels: &[usize],
    schedule: &Schedule,
    seed: u64,
    mut on_epoch: impl FnMut(&LinearHead) -> Result<f64>,
) -> Result<Vec<ClassifierEpoch>> {
    let n = labels.len();
    let lr = CosineSchedule::new(schedule.lr, schedule.epochs * n.div_ceil(schedule.batch_size));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            head.params.zero_grad();
            let x = rows(features, batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = head.layer.forward(&head.params, &x)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            head.layer.backward(&mut head.params, Some(&cache), &grad)?;
            sum += loss * batch.len() as f64;
            sgd_step(&mut head.params, lr.lr_at(step), schedule.momentum);
            step += 1;
        }
        let val = on_epoch(head)?;
        history.push(ClassifierEpoch {
            epoch,
            train_loss: sum / n as f64,
            val_average_f1: val,
        });
    }
    Ok(history)
}

/// Trains a classification head on `train`, reporting average label F1 at
/// the ground-truth points of `val` after every epoch.
///
/// `detector` is only consulted with [`Supervision::Detections`].
pub fn train_classifier(
    encoder: &Encoder,
    train: &Dataset,
    val: &Dataset,
    cfg: &ClassifierTrainConfig,
    detector: Option<&DetectorModel>,
) -> Result<TrainedClassifier> {
    cfg.schedule.validate()?;
    let classes = train.classes();
    let items = supervision_items(train, cfg, detector)?;
    let mut head = LinearHead::new(encoder.feature_dim(), classes, derive_seed(cfg.seed, 0))?;
    match cfg.mode {
        TrainMode::Linear => {
            let before = encoder.checksum();
            let (features, labels) = item_features(encoder, train, &items)?;
            let (val_x, val_y) = gt_features(encoder, val)?;
            let history = fit_on_features(&mut head, &features, &labels, &cfg.schedule, cfg.seed, |h| {
                feature_f1(h, &val_x, &val_y)
            })?;
            if encoder.checksum() != before {
                return Err(Error::FrozenViolation);
            }
            Ok(TrainedClassifier {
                head,
                encoder: encoder.clone(),
                history,
            })
        }
        TrainMode::Full => train_full(encoder.unfrozen(), head, train, val, &items, cfg),
    }
}

fn item_features(encoder: &Encoder, dataset: &Dataset, items: &[Item]) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(items.len() * encoder.feature_dim());
    let mut cached: Option<(usize, FeatureMap)> = None;
    for it in items {
        if cached.as_ref().map(|c| c.0) != Some(it.image) {
            cached = Some((it.image, encoder.encode(&dataset.samples[it.image].image)?));
        }
        let fm = &cached.as_ref().expect("feature map cached above").1;
        data.extend(bilinear_sample(fm, it.point));
    }
    Ok((
        Tensor::new(vec![items.len(), encoder.feature_dim()], data)?,
        items.iter().map(|i| i.label).collect(),
    ))
}

fn train_full(
    mut encoder: Encoder,
    mut head: LinearHead,
    train: &Dataset,
    val: &Dataset,
    items: &[Item],
    cfg: &ClassifierTrainConfig,
) -> Result<TrainedClassifier> {
    let schedule = &cfg.schedule;
    let lr = CosineSchedule::new(schedule.lr, schedule.epochs * items.len().div_ceil(schedule.batch_size));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            encoder.backbone.params.zero_grad();
            head.params.zero_grad();
            let mut by_image: BTreeMap<usize, Vec<Item>> = BTreeMap::new();
            for &k in batch {
                by_image.entry(items[k].image).or_default().push(items[k]);
            }
            let share = 1.0 / batch.len() as f64;
            for (image, group) in by_image {
                let (fm, trace) = encoder.encode_train(&train.samples[image].image)?;
                let points: Vec<Point> = group.iter().map(|i| i.point).collect();
                let labels: Vec<usize> = group.iter().map(|i| i.label).collect();
                let x = sample_features(&fm, &points)?;
                let (logits, cache) = head.layer.forward(&head.params, &x)?;
                let (loss, mut grad) = softmax_cross_entropy(&logits, &labels)?;
                let weight = group.len() as f64 * share;
                sum += loss * group.len() as f64;
                grad = grad.map(|g| g * weight);
                let gx = head.layer.backward(&mut head.params, Some(&cache), &grad)?;
                let c = fm.channels();
                let mut gmap = Tensor::zeros(fm.values.shape());
                for (k, &p) in points.iter().enumerate() {
                    bilinear_backward(&mut gmap, fm.stride, p, &gx.data()[k * c..(k + 1) * c]);
                }
                encoder.backbone.backward(&trace, &gmap)?;
            }
            let rate = lr.lr_at(step);
            step += 1;
            sgd_step(&mut encoder.backbone.params, rate, schedule.momentum);
            sgd_step(&mut head.params, rate, schedule.momentum);
        }
        let (val_x, val_y) = gt_features(&encoder, val)?;
        history.push(ClassifierEpoch {
            epoch,
            train_loss: sum / items.len() as f64,
            val_average_f1: feature_f1(&head, &val_x, &val_y)?,
        });
    }
    Ok(TrainedClassifier { head, encoder, history })
}

/// Settings of a linear probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            schedule: ClassifierTrainConfig::default().schedule,
            seed: 0,
        }
    }
}

/// Fits a fresh head on fixed features and returns average label F1 on the
/// validation features.
pub fn probe_features(
    train: (&Tensor, &[usize]),
    val: (&Tensor, &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<f64> {
    cfg.schedule.validate()?;
    let (_, dim) = train.0.dims2()?;
    if train.1.is_empty() {
        return Err(Error::EmptyDataset("probe training split has no points".into()));
    }
    let mut head = LinearHead::new(dim, classes, derive_seed(cfg.seed, 0))?;
    fit_on_features(&mut head, train.0, train.1, &cfg.schedule, cfg.seed, |_| Ok(f64::NAN))?;
    feature_f1(&head, val.0, val.1)
}

/// Linear probe of a frozen encoder: fit on ground-truth points of `train`,
/// report average label F1 on ground-truth points of `val`.
pub fn linear_probe(encoder: &Encoder, train: &Dataset, val: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let (tx, ty) = gt_features(encoder, train)?;
    let (vx, vy) = gt_features(encoder, val)?;
    probe_features((&tx, &ty), (&vx, &vy), train.classes(), cfg)
}

/// Per-class and detection report of the full pipeline over datasets.
pub fn evaluate_pipeline(
    detector: &DetectorModel,
    encoder: &Encoder,
    head: &LinearHead,
    datasets: &[&Dataset],
    tau: f64,
    radius: f64,
) -> Result<MatchReport> {
    let mut report = MatchReport::empty(head.classes, radius);
    for ds in datasets {
        for s in &ds.samples {
            let preds = predict(&s.image, detector, encoder, head, tau)?;
            report.merge(&crate::eval::f1_report(&preds.annotations(), &s.annotations, radius, head.classes)?);
        }
    }
    Ok(report)
}
