//! Single-stage grid point detector.
//!
//! Every cell of a stride-`σ` grid predicts a nucleus confidence and an offset
//! (in units of `σ`) from its anchor at the cell center.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::backbone::{make_conv, Backbone, BackboneSpec};
use crate::error::{Error, Result};
use crate::eval::{detection_counts, Counts};
use crate::geometry::Point;
use crate::nn::{
    l2_point_loss, sgd_step, sigmoid, sigmoid_binary_cross_entropy, ConvGeometry, CosineSchedule,
    Layer, LayerCache, ParamSet, Tensor, BCE_CLAMP,
};
use crate::synth::{derive_seed, Dataset, Sample};
use crate::training::{batches_per_epoch, epoch_batches, SampleRef, Schedule};

/// Default confidence threshold for decoding.
pub const DEFAULT_TAU: f64 = 0.5;
/// Default weight of the confidence term in the matching cost.
pub const DEFAULT_MU: f64 = 0.5;

/// Reference grid of anchors at cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
}

pub fn build_grid(height: usize, width: usize, stride: usize) -> Result<GridSpec> {
    if stride == 0 || height == 0 || width == 0 || !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
        return Err(Error::InvalidShape(format!(
            "stride {stride} must divide image size {height}x{width}"
        )));
    }
    Ok(GridSpec {
        stride,
        rows: height / stride,
        cols: width / stride,
    })
}

impl GridSpec {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Anchor `((j + 0.5) σ, (i + 0.5) σ)` of cell `(i, j)`.
    pub fn anchor(&self, i: usize, j: usize) -> Point {
        let s = self.stride as f64;
        Point::new((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }

    /// All anchors in row-major order.
    pub fn anchors(&self) -> Vec<Point> {
        (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |j| (i, j)))
            .map(|(i, j)| self.anchor(i, j))
            .collect()
    }

    pub(crate) fn check_maps(&self, scores: &Tensor, offsets: &Tensor) -> Result<()> {
        scores.expect_shape(&[self.rows, self.cols])?;
        offsets.expect_shape(&[2, self.rows, self.cols])
    }
}

/// A decoded nucleus location with its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub point: Point,
    pub score: f64,
}

/// Keeps every cell with score above `tau`, moved by `σ · δ` from its anchor.
///
/// Detections come out in row-major cell order.
pub fn decode(scores: &Tensor, offsets: &Tensor, grid: &GridSpec, tau: f64) -> Result<Vec<Detection>> {
    Ok(decode_cells(scores, offsets, grid, tau)?
        .into_iter()
        .map(|(_, d)| d)
        .collect())
}

/// [`decode`] that also reports the row-major cell index of each detection.
pub fn decode_cells(
    scores: &Tensor,
    offsets: &Tensor,
    grid: &GridSpec,
    tau: f64,
) -> Result<Vec<(usize, Detection)>> {
    grid.check_maps(scores, offsets)?;
    let plane = grid.cells();
    let s = grid.stride as f64;
    let mut out = Vec::new();
    for (k, &score) in scores.data().iter().enumerate() {
        if score > tau {
            let a = grid.anchor(k / grid.cols, k % grid.cols);
            let (dx, dy) = (offsets.data()[k], offsets.data()[plane + k]);
            out.push((
                k,
                Detection {
                    point: Point::new(a.x + s * dx, a.y + s * dy),
                    score,
                },
            ));
        }
    }
    Ok(out)
}

/// Greedy duplicate removal: by descending score, drop any detection within
/// `radius` of one already kept. Output keeps the input order.
pub fn suppress_duplicates(detections: &[Detection], radius: f64) -> Vec<Detection> {
    if radius <= 0.0 {
        return detections.to_vec();
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut keep = vec![false; detections.len()];
    let mut kept: Vec<Point> = Vec::new();
    for k in order {
        let p = detections[k].point;
        if kept.iter().all(|q| q.distance(p) > radius) {
            keep[k] = true;
            kept.push(p);
        }
    }
    detections
        .iter()
        .zip(keep)
        .filter_map(|(d, k)| k.then_some(*d))
        .collect()
}

/// Raw head outputs: score logits `[H', W']` and normalized offsets `[2, H', W']`.
///
/// Also used to carry gradients with respect to those outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    pub logits: Tensor,
    pub offsets: Tensor,
}

impl DetectorOutput {
    pub(crate) fn check_finite(&self) -> Result<()> {
        if self.logits.all_finite() && self.offsets.all_finite() {
            Ok(())
        } else {
            Err(Error::Diverged("non-finite detector outputs".into()))
        }
    }

    /// Sigmoid confidences, clamped strictly inside `(0, 1)`.
    pub fn scores(&self) -> Tensor {
        self.logits.map(|z| sigmoid(z).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP))
    }

    /// Every cell's predicted point (pixels) and score, row-major.
    pub fn proposals(&self, grid: &GridSpec) -> (Vec<Point>, Vec<f64>) {
        let plane = grid.cells();
        let s = grid.stride as f64;
        let points = grid
            .anchors()
            .into_iter()
            .enumerate()
            .map(|(k, a)| Point::new(a.x + s * self.offsets.data()[k], a.y + s * self.offsets.data()[plane + k]))
            .collect();
        (points, self.scores().into_data())
    }
}

/// One-to-one pairing of ground-truth points with grid proposals.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(gt index, proposal index)`, sorted by gt index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Proposal `k` is a positive iff some ground-truth point is paired with it.
    pub fn positive_mask(&self, proposals: usize) -> Vec<bool> {
        let mut mask = vec![false; proposals];
        for &(_, k) in &self.pairs {
            mask[k] = true;
        }
        mask
    }
}

/// Minimum-cost assignment under `cost(k, m) = |p_k - g_m| - mu * s_k`.
pub fn assign_targets(points: &[Point], scores: &[f64], gts: &[Point], mu: f64) -> Assignment {
    assert_eq!(points.len(), scores.len(), "one score per proposal");
    if gts.is_empty() || points.is_empty() {
        return Assignment::default();
    }
    let mut cost = Vec::with_capacity(gts.len() * points.len());
    for g in gts {
        for (p, s) in points.iter().zip(scores) {
            cost.push(p.distance(*g) - mu * s);
        }
    }
    let pairs = min_cost_assignment(&cost, gts.len(), points.len())
        .into_iter()
        .enumerate()
        .filter_map(|(m, k)| k.map(|k| (m, k)))
        .collect();
    Assignment { pairs }
}

/// Total matching cost of an assignment, for comparison with oracles.
pub fn assignment_cost(points: &[Point], scores: &[f64], gts: &[Point], mu: f64, a: &Assignment) -> f64 {
    a.pairs
        .iter()
        .map(|&(m, k)| points[k].distance(gts[m]) - mu * scores[k])
        .sum()
}

/// BCE over all cells plus `lambda_reg` times the mean squared offset error of
/// matched cells in stride units.
///
/// Returns the loss and its gradient with respect to logits and offsets.
pub fn detection_loss(
    output: &DetectorOutput,
    grid: &GridSpec,
    assignment: &Assignment,
    gts: &[Point],
    lambda_reg: f64,
) -> Result<(f64, DetectorOutput)> {
    grid.check_maps(&output.logits, &output.offsets)?;
    let plane = grid.cells();
    let mask = assignment.positive_mask(plane);
    let targets = Tensor::from_fn(&[grid.rows, grid.cols], |k| if mask[k] { 1.0 } else { 0.0 });
    let (bce, grad_logits) = sigmoid_binary_cross_entropy(&output.logits, &targets)?;

    let s = grid.stride as f64;
    let mut pred = Vec::with_capacity(assignment.pairs.len());
    let mut target = Vec::with_capacity(assignment.pairs.len());
    for &(m, k) in &assignment.pairs {
        let a = grid.anchor(k / grid.cols, k % grid.cols);
        pred.push(Point::new(
            a.x / s + output.offsets.data()[k],
            a.y / s + output.offsets.data()[plane + k],
        ));
        target.push(Point::new(gts[m].x / s, gts[m].y / s));
    }
    let (l2, point_grads) = l2_point_loss(&pred, &target)?;
    let mut grad_offsets = Tensor::zeros(output.offsets.shape());
    for (&(_, k), g) in assignment.pairs.iter().zip(&point_grads) {
        grad_offsets.data_mut()[k] += lambda_reg * g.x;
        grad_offsets.data_mut()[plane + k] += lambda_reg * g.y;
    }
    Ok((
        bce + lambda_reg * l2,
        DetectorOutput {
            logits: grad_logits,
            offsets: grad_offsets,
        },
    ))
}

/// Score and offset 1x1 heads over a shared feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct DetHeads {
    pub score: Layer,
    pub offset: Layer,
    pub params: ParamSet,
}

/// Forward caches of [`DetHeads`].
#[derive(Debug, Clone)]
pub struct HeadCache {
    score: LayerCache,
    offset: LayerCache,
}

/// Initial score bias, `logit(0.03)`, roughly the fraction of positive cells.
const SCORE_PRIOR_BIAS: f64 = -3.476;

impl DetHeads {
    pub fn new<R: rand::Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let g = |out| ConvGeometry {
            in_channels,
            out_channels: out,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let score = make_conv(&mut params, "head.score", g(1), Some(0.01), SCORE_PRIOR_BIAS, rng)?;
        let offset = make_conv(&mut params, "head.offset", g(2), Some(0.01), 0.0, rng)?;
        Ok(Self {
            score: Layer::Conv2d(score),
            offset: Layer::Conv2d(offset),
            params,
        })
    }

    pub fn forward(&self, features: &Tensor) -> Result<(DetectorOutput, HeadCache)> {
        let (_, h, w) = features.dims3()?;
        let (logits, score) = self.score.forward(&self.params, features)?;
        let (offsets, offset) = self.offset.forward(&self.params, features)?;
        Ok((
            DetectorOutput {
                logits: logits.reshape(&[h, w])?,
                offsets,
            },
            HeadCache { score, offset },
        ))
    }

    pub fn infer(&self, features: &Tensor) -> Result<DetectorOutput> {
        let (_, h, w) = features.dims3()?;
        Ok(DetectorOutput {
            logits: self.score.infer(&self.params, features)?.reshape(&[h, w])?,
            offsets: self.offset.infer(&self.params, features)?,
        })
    }

    /// Accumulates head gradients and returns the gradient at the features.
    pub fn backward(&mut self, cache: &HeadCache, grad: &DetectorOutput) -> Result<Tensor> {
        let (h, w) = grad.logits.dims2()?;
        let mut g = self
            .score
            .backward(&mut self.params, Some(&cache.score), &grad.logits.reshape(&[1, h, w])?)?;
        let g2 = self.offset.backward(&mut self.params, Some(&cache.offset), &grad.offsets)?;
        g.add_scaled(&g2, 1.0)?;
        Ok(g)
    }
}

/// Architecture choice of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorArch {
    pub width: usize,
    pub stride: usize,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self { width: 1, stride: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub arch: DetectorArch,
    pub backbone: Backbone,
    pub heads: DetHeads,
}

impl DetectorModel {
    pub fn new(arch: DetectorArch, seed: u64) -> Result<Self> {
        let spec = BackboneSpec::detector(arch.width, arch.stride)?;
        Self::with_backbone_spec(arch, spec, seed)
    }

    /// Builds a detector on an arbitrary backbone; initialization consumes the
    /// RNG as backbone first, then heads.
    pub fn with_backbone_spec(arch: DetectorArch, spec: BackboneSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(spec, "backbone", &mut rng)?;
        let heads = DetHeads::new(backbone.out_channels(), &mut rng)?;
        Ok(Self { arch, backbone, heads })
    }

    pub fn grid_for(&self, image: &Tensor) -> Result<GridSpec> {
        let (_, h, w) = image.dims3()?;
        build_grid(h, w, self.backbone.stride())
    }

    pub fn forward_raw(&self, image: &Tensor) -> Result<DetectorOutput> {
        let features = self.backbone.infer(image)?;
        let out = self.heads.infer(&features)?;
        out.check_finite()?;
        Ok(out)
    }

    /// Score map `[H', W']` in `(0, 1)` and offset map `[2, H', W']`.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.forward_raw(image)?;
        Ok((out.scores(), out.offsets))
    }

    pub fn detect(&self, image: &Tensor, tau: f64) -> Result<Vec<Detection>> {
        let grid = self.grid_for(image)?;
        let (scores, offsets) = self.forward(image)?;
        decode(&scores, &offsets, &grid, tau)
    }

    pub fn param_count(&self) -> usize {
        self.backbone.params.count() + self.heads.params.count()
    }
}

/// Hyperparameters of detector training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub schedule: Schedule,
    pub mu: f64,
    pub lambda_reg: f64,
    pub tau: f64,
    /// Matching radius for validation F1.
    pub radius: f64,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                epochs: 100,
                batch_size: 32,
                lr: 0.001,
                momentum: 0.9,
            },
            mu: DEFAULT_MU,
            lambda_reg: 1.0,
            tau: DEFAULT_TAU,
            radius: crate::eval::DEFAULT_RADIUS,
            seed: 0,
        }
    }
}

/// Metrics of one detector training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_detection_f1: f64,
}

/// Forward, assign, loss and backward for one image; gradients accumulate.
pub(crate) fn detection_sample_step(
    backbone: &mut Backbone,
    heads: &mut DetHeads,
    sample: &Sample,
    cfg: &DetectorTrainConfig,
) -> Result<f64> {
    let (features, trace) = backbone.forward(&sample.image)?;
    let (out, cache) = heads.forward(&features)?;
    out.check_finite()?;
    let (_, h, w) = sample.image.dims3()?;
    let grid = build_grid(h, w, backbone.stride())?;
    let gts = sample.points();
    let (points, scores) = out.proposals(&grid);
    let assignment = assign_targets(&points, &scores, &gts, cfg.mu);
    let (loss, grad) = detection_loss(&out, &grid, &assignment, &gts, cfg.lambda_reg)?;
    let gf = heads.backward(&cache, &grad)?;
    backbone.backward(&trace, &gf)?;
    Ok(loss)
}

/// Loss of one image without touching gradients.
pub(crate) fn detection_sample_loss(
    backbone: &Backbone,
    heads: &DetHeads,
    sample: &Sample,
    cfg: &DetectorTrainConfig,
) -> Result<(f64, Vec<Detection>)> {
    let out = heads.infer(&backbone.infer(&sample.image)?)?;
    out.check_finite()?;
    let (_, h, w) = sample.image.dims3()?;
    let grid = build_grid(h, w, backbone.stride())?;
    let gts = sample.points();
    let (points, scores) = out.proposals(&grid);
    let assignment = assign_targets(&points, &scores, &gts, cfg.mu);
    let (loss, _) = detection_loss(&out, &grid, &assignment, &gts, cfg.lambda_reg)?;
    let dets = decode(&out.scores(), &out.offsets, &grid, cfg.tau)?;
    Ok((loss, dets))
}

pub(crate) fn check_datasets(train: &[&Dataset]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training datasets".into()));
    }
    if let Some(d) = train.iter().find(|d| d.is_empty()) {
        return Err(Error::EmptyDataset(format!("dataset `{}` has no images", d.name)));
    }
    Ok(())
}

/// Mean loss and class-agnostic counts over validation datasets.
pub(crate) fn validate(
    backbone: &Backbone,
    heads: &DetHeads,
    val: &[&Dataset],
    cfg: &DetectorTrainConfig,
) -> Result<(f64, Counts)> {
    let mut loss = 0.0;
    let mut n = 0usize;
    let mut counts = Counts::default();
    for ds in val {
        for s in &ds.samples {
            let (l, dets) = detection_sample_loss(backbone, heads, s, cfg)?;
            loss += l;
            n += 1;
            let c = detection_counts(&dets.iter().map(|d| d.point).collect::<Vec<_>>(), &s.points(), cfg.radius);
            counts.tp += c.tp;
            counts.fp += c.fp;
            counts.fn_ += c.fn_;
        }
    }
    Ok((if n == 0 { 0.0 } else { loss / n as f64 }, counts))
}

/// Deterministic batch order and learning-rate schedule of a training run.
pub(crate) struct Plan {
    sizes: Vec<usize>,
    batch_size: usize,
    lr: CosineSchedule,
    rng: ChaCha8Rng,
    step: usize,
}

impl Plan {
    pub(crate) fn new(sizes: Vec<usize>, schedule: &Schedule, seed: u64) -> Self {
        let total = schedule.epochs * batches_per_epoch(&sizes, schedule.batch_size);
        Self {
            sizes,
            batch_size: schedule.batch_size,
            lr: CosineSchedule::new(schedule.lr, total),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)),
            step: 0,
        }
    }

    pub(crate) fn epoch(&mut self) -> Vec<Vec<SampleRef>> {
        epoch_batches(&self.sizes, self.batch_size, &mut self.rng)
    }

    /// Learning rate of the next optimizer step.
    pub(crate) fn next_lr(&mut self) -> f64 {
        let lr = self.lr.lr_at(self.step);
        self.step += 1;
        lr
    }
}

/// Trains a detector; with several datasets each batch is drawn from one
/// dataset in round-robin order.
pub fn train_detector(
    train: &[&Dataset],
    val: &[&Dataset],
    arch: DetectorArch,
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorModel, Vec<DetectorEpoch>)> {
    let model = DetectorModel::new(arch, derive_seed(cfg.seed, 0))?;
    train_detector_from(model, train, val, cfg)
}

/// Same as [`train_detector`] starting from an existing model.
pub fn train_detector_from(
    mut model: DetectorModel,
    train: &[&Dataset],
    val: &[&Dataset],
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorModel, Vec<DetectorEpoch>)> {
    check_datasets(train)?;
    cfg.schedule.validate()?;
    let mut plan = Plan::new(train.iter().map(|d| d.len()).collect(), &cfg.schedule, cfg.seed);
    let mut history = Vec::with_capacity(cfg.schedule.epochs);
    for epoch in 1..=cfg.schedule.epochs {
        let mut sum = 0.0;
        let mut seen = 0usize;
        for batch in plan.epoch() {
            model.backbone.params.zero_grad();
            model.heads.params.zero_grad();
            for r in &batch {
                let s = &train[r.dataset].samples[r.index];
                sum += detection_sample_step(&mut model.backbone, &mut model.heads, s, cfg)?;
            }
            let inv = 1.0 / batch.len() as f64;
            model.backbone.params.scale_grad(inv);
            model.heads.params.scale_grad(inv);
            let lr = plan.next_lr();
            sgd_step(&mut model.backbone.params, lr, cfg.schedule.momentum);
            sgd_step(&mut model.heads.params, lr, cfg.schedule.momentum);
            seen += batch.len();
        }
        let (val_loss, counts) = validate(&model.backbone, &model.heads, val, cfg)?;
        history.push(DetectorEpoch {
            epoch,
            train_loss: sum / seen as f64,
            val_loss,
            val_detection_f1: counts.f1(),
        });
    }
    Ok((model, history))
}

/// Class-agnostic counts of a detector over datasets.
pub fn evaluate_detector(model: &DetectorModel, datasets: &[&Dataset], tau: f64, radius: f64) -> Result<Counts> {
    let mut counts = Counts::default();
    for ds in datasets {
        for s in &ds.samples {
            let dets = model.detect(&s.image, tau)?;
            let c = detection_counts(&dets.iter().map(|d| d.point).collect::<Vec<_>>(), &s.points(), radius);
            counts.tp += c.tp;
            counts.fp += c.fp;
            counts.fn_ += c.fn_;
        }
    }
    Ok(counts)
}
