//! Shared-backbone baseline that trains detection and classification heads
//! jointly on one feature map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{make_conv, Backbone, BackboneSpec};
use crate::classifier::{linear_probe, Prediction, PredictionSet, ProbeConfig};
use crate::detector::{
    assign_targets, build_grid, check_datasets, decode_cells, detection_loss, Assignment, DetHeads,
    DetectorModel, DetectorOutput, GridSpec, Plan,
};
use crate::encoder::{Encoder, EncoderKind};
use crate::error::{Error, Result};
use crate::eval::{f1_report, MatchReport};
use crate::geometry::{Point, PointAnnotation};
use crate::nn::{sgd_step, softmax_cross_entropy, ConvGeometry, Layer, LayerCache, ParamSet, Tensor};
use crate::synth::{derive_seed, Dataset, Sample};
use crate::training::Schedule;

/// Backbone with score, offset and per-anchor class heads.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub backbone: Backbone,
    pub heads: DetHeads,
    pub class_head: Layer,
    pub class_params: ParamSet,
    pub classes: usize,
}

/// Raw joint outputs; also used to carry gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOutput {
    pub det: DetectorOutput,
    /// Class logits `[C, H', W']`.
    pub class_logits: Tensor,
}

struct JointCache {
    trace: crate::nn::Trace,
    heads: crate::detector::HeadCache,
    class: LayerCache,
}

impl JointModel {
    /// Random initialization, consuming the RNG as backbone, detection heads,
    /// class head. The first two match [`DetectorModel::with_backbone_spec`]
    /// for the same seed.
    pub fn new(spec: BackboneSpec, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(spec, "backbone", &mut rng)?;
        Self::with_backbone(backbone, classes, &mut rng)
    }

    /// Joint model whose backbone starts from `encoder`'s weights.
    pub fn from_encoder(encoder: &Encoder, classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = encoder.backbone.clone();
        backbone.params.zero_grad();
        backbone.params.reset_momentum();
        Self::with_backbone(backbone, classes, &mut rng)
    }

    fn with_backbone(backbone: Backbone, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidConfig("joint model needs at least one class".into()));
        }
        let heads = DetHeads::new(backbone.out_channels(), rng)?;
        let mut class_params = ParamSet::new();
        let geometry = ConvGeometry {
            in_channels: backbone.out_channels(),
            out_channels: classes,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let conv = make_conv(&mut class_params, "head.class", geometry, Some(0.01), 0.0, rng)?;
        Ok(Self {
            backbone,
            heads,
            class_head: Layer::Conv2d(conv),
            class_params,
            classes,
        })
    }

    pub fn grid_for(&self, image: &Tensor) -> Result<GridSpec> {
        let (_, h, w) = image.dims3()?;
        build_grid(h, w, self.backbone.stride())
    }

    pub fn forward_raw(&self, image: &Tensor) -> Result<JointOutput> {
        let f = self.backbone.infer(image)?;
        let out = JointOutput {
            det: self.heads.infer(&f)?,
            class_logits: self.class_head.infer(&self.class_params, &f)?,
        };
        out.det.check_finite()?;
        Ok(out)
    }

    fn forward_train(&self, image: &Tensor) -> Result<(JointOutput, JointCache)> {
        let (f, trace) = self.backbone.forward(image)?;
        let (det, heads) = self.heads.forward(&f)?;
        let (class_logits, class) = self.class_head.forward(&self.class_params, &f)?;
        Ok((JointOutput { det, class_logits }, JointCache { trace, heads, class }))
    }

    fn backward(&mut self, cache: &JointCache, grad: &JointOutput, with_class: bool) -> Result<()> {
        let mut gf = self.heads.backward(&cache.heads, &grad.det)?;
        if with_class {
            let gc = self
                .class_head
                .backward(&mut self.class_params, Some(&cache.class), &grad.class_logits)?;
            gf.add_scaled(&gc, 1.0)?;
        }
        self.backbone.backward(&cache.trace, &gf)
    }

    /// Detections with the argmax class of their anchor cell.
    pub fn predict(&self, image: &Tensor, tau: f64) -> Result<Vec<PointAnnotation>> {
        Ok(self.predict_scored(image, tau)?.annotations())
    }

    /// Like [`JointModel::predict`], keeping the detection score and the
    /// softmax probability of the chosen class.
    pub fn predict_scored(&self, image: &Tensor, tau: f64) -> Result<PredictionSet> {
        let grid = self.grid_for(image)?;
        let out = self.forward_raw(image)?;
        let plane = grid.cells();
        let logits = out.class_logits.data();
        let entries = decode_cells(&out.det.scores(), &out.det.offsets, &grid, tau)?
            .into_iter()
            .map(|(k, d)| {
                let cell: Vec<f64> = (0..self.classes).map(|c| logits[c * plane + k]).collect();
                let mut best = 0;
                for c in 1..self.classes {
                    if cell[c] > cell[best] {
                        best = c;
                    }
                }
                let z: f64 = cell.iter().map(|v| (v - cell[best]).exp()).sum();
                Prediction {
                    x: d.point.x,
                    y: d.point.y,
                    class: best + 1,
                    det_score: d.score,
                    cls_prob: 1.0 / z,
                }
            })
            .collect();
        Ok(PredictionSet { entries })
    }

    /// The backbone as a frozen encoder, for probing.
    pub fn encoder_view(&self) -> Encoder {
        Encoder {
            kind: EncoderKind::Trainable,
            frozen: true,
            backbone: self.backbone.clone(),
        }
    }

    /// Detection part of the model.
    pub fn detector_view(&self, arch: crate::detector::DetectorArch) -> DetectorModel {
        DetectorModel {
            arch,
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.backbone.params.count() + self.heads.params.count() + self.class_params.count()
    }
}

/// Score map in `(0, 1)`, offset map and class logit map.
pub fn joint_forward(model: &JointModel, image: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let out = model.forward_raw(image)?;
    Ok((out.det.scores(), out.det.offsets, out.class_logits))
}

/// Detection loss plus `lambda_cls` times the mean cross-entropy of matched
/// anchors' class logits against their ground-truth classes.
pub fn joint_loss(
    output: &JointOutput,
    grid: &GridSpec,
    assignment: &Assignment,
    gts: &[PointAnnotation],
    lambda_reg: f64,
    lambda_cls: f64,
) -> Result<(f64, JointOutput)> {
    let points: Vec<Point> = gts.iter().map(|a| a.point).collect();
    let (det_loss, det_grad) = detection_loss(&output.det, grid, assignment, &points, lambda_reg)?;
    let (classes, h, w) = output.class_logits.dims3()?;
    if h != grid.rows || w != grid.cols {
        return Err(Error::InvalidShape(format!(
            "class logits {:?} do not match grid {}x{}",
            output.class_logits.shape(),
            grid.rows,
            grid.cols
        )));
    }
    let mut grad_cls = Tensor::zeros(output.class_logits.shape());
    let mut loss = det_loss;
    if !assignment.pairs.is_empty() && lambda_cls != 0.0 {
        let plane = grid.cells();
        let n = assignment.pairs.len();
        let data = output.class_logits.data();
        let mut rows = Vec::with_capacity(n * classes);
        let mut labels = Vec::with_capacity(n);
        for &(m, k) in &assignment.pairs {
            rows.extend((0..classes).map(|c| data[c * plane + k]));
            let label = gts[m].class_id;
            if label == 0 || label > classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            labels.push(label - 1);
        }
        let (ce, g) = softmax_cross_entropy(&Tensor::new(vec![n, classes], rows)?, &labels)?;
        loss += lambda_cls * ce;
        for (r, &(_, k)) in assignment.pairs.iter().enumerate() {
            for c in 0..classes {
                grad_cls.data_mut()[c * plane + k] += lambda_cls * g.data()[r * classes + c];
            }
        }
    }
    Ok((
        loss,
        JointOutput {
            det: det_grad,
            class_logits: grad_cls,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointTrainConfig {
    pub schedule: Schedule,
    pub mu: f64,
    pub lambda_reg: f64,
    pub lambda_cls: f64,
    pub tau: f64,
    pub radius: f64,
    pub seed: u64,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        let d = crate::detector::DetectorTrainConfig::default();
        Self {
            schedule: d.schedule,
            mu: d.mu,
            lambda_reg: d.lambda_reg,
            lambda_cls: 1.0,
            tau: d.tau,
            radius: d.radius,
            seed: 0,
        }
    }
}

impl JointTrainConfig {
    pub fn detector_config(&self) -> crate::detector::DetectorTrainConfig {
        crate::detector::DetectorTrainConfig {
            schedule: self.schedule,
            mu: self.mu,
            lambda_reg: self.lambda_reg,
            tau: self.tau,
            radius: self.radius,
            seed: self.seed,
        }
    }
}

/// Linear probing of the current backbone between epochs.
#[derive(Debug, Clone, Copy)]
pub struct ProbeHook<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub config: ProbeConfig,
}

/// Metrics after one joint training epoch; epoch 0 is the initial model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_detection_f1: f64,
    pub val_average_f1: f64,
    pub probe_f1: Option<f64>,
}

fn sample_step(model: &mut JointModel, sample: &Sample, cfg: &JointTrainConfig) -> Result<f64> {
    let (out, cache) = model.forward_train(&sample.image)?;
    out.det.check_finite()?;
    let grid = model.grid_for(&sample.image)?;
    let (points, scores) = out.det.proposals(&grid);
    let assignment = assign_targets(&points, &scores, &sample.points(), cfg.mu);
    let (loss, grad) = joint_loss(&out, &grid, &assignment, &sample.annotations, cfg.lambda_reg, cfg.lambda_cls)?;
    model.backward(&cache, &grad, cfg.lambda_cls != 0.0)?;
    Ok(loss)
}

fn sample_loss(model: &JointModel, sample: &Sample, cfg: &JointTrainConfig) -> Result<f64> {
    let out = model.forward_raw(&sample.image)?;
    out.det.check_finite()?;
    let grid = model.grid_for(&sample.image)?;
    let (points, scores) = out.det.proposals(&grid);
    let assignment = assign_targets(&points, &scores, &sample.points(), cfg.mu);
    Ok(joint_loss(&out, &grid, &assignment, &sample.annotations, cfg.lambda_reg, cfg.lambda_cls)?.0)
}

/// Per-class and detection report of a joint model over datasets.
pub fn evaluate_joint(model: &JointModel, datasets: &[&Dataset], tau: f64, radius: f64) -> Result<MatchReport> {
    let mut report = MatchReport::empty(model.classes, radius);
    for ds in datasets {
        for s in &ds.samples {
            let preds = model.predict(&s.image, tau)?;
            report.merge(&f1_report(&preds, &s.annotations, radius, model.classes)?);
        }
    }
    Ok(report)
}

fn epoch_row(
    model: &JointModel,
    epoch: usize,
    train_loss: f64,
    val: &[&Dataset],
    cfg: &JointTrainConfig,
    probe: Option<&ProbeHook<'_>>,
) -> Result<JointEpoch> {
    let report = evaluate_joint(model, val, cfg.tau, cfg.radius)?;
    let probe_f1 = match probe {
        Some(h) => Some(linear_probe(&model.encoder_view(), h.train, h.val, &h.config)?),
        None => None,
    };
    Ok(JointEpoch {
        epoch,
        train_loss,
        val_detection_f1: report.detection_f1(),
        val_average_f1: report.average_f1(),
        probe_f1,
    })
}

/// Trains all heads and the backbone on the joint loss.
///
/// The history starts with an epoch-0 row for the untrained model. With
/// `lambda_cls == 0` the class head is left out of the update, and the
/// detection path is then identical to detector training with the same seed.
pub fn train_joint(
    mut model: JointModel,
    train: &[&Dataset],
    val: &[&Dataset],
    cfg: &JointTrainConfig,
    probe: Option<ProbeHook<'_>>,
) -> Result<(JointModel, Vec<JointEpoch>)> {
    check_datasets(train)?;
    cfg.schedule.validate()?;
    let mut plan = Plan::new(train.iter().map(|d| d.len()).collect(), &cfg.schedule, cfg.seed);
    let mut history = Vec::with_capacity(cfg.schedule.epochs + 1);
    let mut initial = 0.0;
    let mut count = 0usize;
    for ds in train {
        for s in &ds.samples {
            initial += sample_loss(&model, s, cfg)?;
            count += 1;
        }
    }
    history.push(epoch_row(&model, 0, initial / count as f64, val, cfg, probe.as_ref())?);
    let with_class = cfg.lambda_cls != 0.0;
    for epoch in 1..=cfg.schedule.epochs {
        let mut sum = 0.0;
        let mut seen = 0usize;
        for batch in plan.epoch() {
            model.backbone.params.zero_grad();
            model.heads.params.zero_grad();
            model.class_params.zero_grad();
            for r in &batch {
                sum += sample_step(&mut model, &train[r.dataset].samples[r.index], cfg)?;
            }
            let inv = 1.0 / batch.len() as f64;
            model.backbone.params.scale_grad(inv);
            model.heads.params.scale_grad(inv);
            let lr = plan.next_lr();
            sgd_step(&mut model.backbone.params, lr, cfg.schedule.momentum);
            sgd_step(&mut model.heads.params, lr, cfg.schedule.momentum);
            if with_class {
                model.class_params.scale_grad(inv);
                sgd_step(&mut model.class_params, lr, cfg.schedule.momentum);
            }
            seen += batch.len();
        }
        history.push(epoch_row(&model, epoch, sum / seen as f64, val, cfg, probe.as_ref())?);
    }
    Ok((model, history))
}

/// Seed of the joint model's initialization for a training seed.
pub fn model_seed(seed: u64) -> u64 {
    derive_seed(seed, 0)
}
