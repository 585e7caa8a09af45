//! Feature encoder and the bilinear coordinate sampler.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::{
    init, sgd_step, softmax_cross_entropy, CosineSchedule, Layer, Linear, ParamSet, Tensor, Trace,
};
use crate::synth::{derive_seed, Dataset};
use crate::training::Schedule;

/// Encoder output with the pixel stride of its cells.
///
/// Cell `(i, j)` sits at image location `((j + 0.5) σ, (i + 0.5) σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, stride: usize) -> Result<Self> {
        values.dims3()?;
        if stride == 0 {
            return Err(Error::InvalidShape("feature stride must be positive".into()));
        }
        Ok(Self { values, stride })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

/// The four cells and weights blended by a bilinear query.
///
/// Query `(x, y)` maps to grid coordinates `u = x/σ - 0.5`, `v = y/σ - 0.5`,
/// clamped to the cell-center range.
pub fn bilinear_taps(rows: usize, cols: usize, stride: usize, p: Point) -> [(usize, usize, f64); 4] {
    let s = stride as f64;
    let axis = |coord: f64, n: usize| -> (usize, usize, f64) {
        let t = (coord / s - 0.5).clamp(0.0, (n - 1) as f64);
        if n == 1 {
            return (0, 0, 0.0);
        }
        let lo = (t.floor() as usize).min(n - 2);
        (lo, lo + 1, t - lo as f64)
    };
    let (j0, j1, a) = axis(p.x, cols);
    let (i0, i1, b) = axis(p.y, rows);
    [
        (i0, j0, (1.0 - a) * (1.0 - b)),
        (i0, j1, a * (1.0 - b)),
        (i1, j0, (1.0 - a) * b),
        (i1, j1, a * b),
    ]
}

/// Bilinear feature query at pixel location `p`, border-clamped.
pub fn bilinear_sample(fm: &FeatureMap, p: Point) -> Vec<f64> {
    let shape = fm.values.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let taps = bilinear_taps(h, w, fm.stride, p);
    let data = fm.values.data();
    (0..c)
        .map(|ch| {
            taps.iter()
                .map(|&(i, j, wt)| wt * data[(ch * h + i) * w + j])
                .sum()
        })
        .collect()
}

/// Scatters `grad` of a sampled vector back onto a `[C, H', W']` gradient map.
pub fn bilinear_backward(grad_map: &mut Tensor, stride: usize, p: Point, grad: &[f64]) {
    let shape = grad_map.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let taps = bilinear_taps(h, w, stride, p);
    let data = grad_map.data_mut();
    for (ch, &g) in grad.iter().enumerate() {
        for &(i, j, wt) in &taps {
            data[(ch * h + i) * w + j] += wt * g;
        }
    }
}

/// How an encoder's weights were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    RandomFrozen,
    PretextPretrained,
    Trainable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub frozen: bool,
    pub backbone: Backbone,
}

/// Default channel count of encoder features.
pub const DEFAULT_FEATURE_DIM: usize = 32;

impl Encoder {
    /// Randomly initialized encoder; `frozen` selects the random-frozen kind.
    pub fn random(feature_dim: usize, stride: usize, seed: u64, frozen: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(BackboneSpec::encoder(feature_dim, stride)?, "backbone", &mut rng)?;
        Ok(Self {
            kind: if frozen {
                EncoderKind::RandomFrozen
            } else {
                EncoderKind::Trainable
            },
            frozen,
            backbone,
        })
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeatureMap> {
        FeatureMap::new(self.backbone.infer(image)?, self.stride())
    }

    pub fn encode_train(&self, image: &Tensor) -> Result<(FeatureMap, Trace)> {
        let (values, trace) = self.backbone.forward(image)?;
        Ok((FeatureMap::new(values, self.stride())?, trace))
    }

    pub fn checksum(&self) -> String {
        self.backbone.params.checksum()
    }

    /// A trainable copy with fresh momentum buffers.
    pub fn unfrozen(&self) -> Encoder {
        let mut e = self.clone();
        e.kind = EncoderKind::Trainable;
        e.frozen = false;
        e.backbone.params.reset_momentum();
        e.backbone.params.zero_grad();
        e
    }

    pub fn frozen_copy(&self, kind: EncoderKind) -> Encoder {
        let mut e = self.clone();
        e.kind = kind;
        e.frozen = true;
        e
    }
}

/// Settings of the pretext crop-classification pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub schedule: Schedule,
    /// Side of the square crop around each annotated center, in pixels.
    pub crop: usize,
    pub feature_dim: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                epochs: 20,
                batch_size: 32,
                lr: 0.05,
                momentum: 0.9,
            },
            crop: 24,
            feature_dim: DEFAULT_FEATURE_DIM,
            stride: 4,
            seed: 0,
        }
    }
}

/// Crop of `size x size` pixels whose top-left corner is `(ox, oy)`,
/// replicating edge pixels outside the image.
pub fn crop_image(image: &Tensor, ox: isize, oy: isize, size: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let mut out = vec![0.0; c * size * size];
    for ch in 0..c {
        for i in 0..size {
            let si = (oy + i as isize).clamp(0, h as isize - 1) as usize;
            for j in 0..size {
                let sj = (ox + j as isize).clamp(0, w as isize - 1) as usize;
                out[(ch * size + i) * size + j] = image.at3(ch, si, sj);
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}

/// Crop centered on `p` and the location of `p` inside the crop.
pub(crate) fn centered_crop(image: &Tensor, p: Point, size: usize) -> Result<(Tensor, Point)> {
    let half = (size / 2) as isize;
    let ox = p.x.floor() as isize - half;
    let oy = p.y.floor() as isize - half;
    let crop = crop_image(image, ox, oy, size)?;
    Ok((crop, Point::new(p.x - ox as f64, p.y - oy as f64)))
}

/// Pretext pretraining: classify the class of annotation-centered crops with a
/// temporary linear head, then discard the head and freeze the encoder.
pub fn pretrain_encoder(dataset: &Dataset, cfg: &PretrainConfig) -> Result<Encoder> {
    cfg.schedule.validate()?;
    if dataset.nucleus_count() == 0 {
        return Err(Error::EmptyDataset(format!("dataset `{}` has no annotations", dataset.name)));
    }
    if cfg.crop == 0 || !cfg.crop.is_multiple_of(cfg.stride) {
        return Err(Error::InvalidConfig(format!(
            "crop {} must be a positive multiple of stride {}",
            cfg.crop, cfg.stride
        )));
    }
    let mut encoder = Encoder::random(cfg.feature_dim, cfg.stride, derive_seed(cfg.seed, 0), false)?;
    let classes = dataset.classes();
    let mut head_params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let head = Linear {
        in_features: cfg.feature_dim,
        out_features: classes,
        weight: head_params.add(
            "pretext.weight",
            init::normal(&[classes, cfg.feature_dim], (1.0 / cfg.feature_dim as f64).sqrt(), &mut rng),
        )?,
        bias: head_params.add("pretext.bias", Tensor::zeros(&[classes]))?,
    };
    let head = Layer::Linear(head);

    let mut items: Vec<(usize, usize)> = dataset
        .samples
        .iter()
        .enumerate()
        .flat_map(|(s, sample)| (0..sample.annotations.len()).map(move |a| (s, a)))
        .collect();
    let batches_per_epoch = items.len().div_ceil(cfg.schedule.batch_size);
    let lr = CosineSchedule::new(cfg.schedule.lr, cfg.schedule.epochs * batches_per_epoch);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut step = 0;
    for _ in 0..cfg.schedule.epochs {
        items.shuffle(&mut order_rng);
        for batch in items.chunks(cfg.schedule.batch_size) {
            encoder.backbone.params.zero_grad();
            head_params.zero_grad();
            for &(s, a) in batch {
                let sample = &dataset.samples[s];
                let ann = sample.annotations[a];
                let (crop, local) = centered_crop(&sample.image, ann.point, cfg.crop)?;
                let (fm, trace) = encoder.encode_train(&crop)?;
                let f = Tensor::new(vec![1, cfg.feature_dim], bilinear_sample(&fm, local))?;
                let (logits, cache) = head.forward(&head_params, &f)?;
                let (_, grad) = softmax_cross_entropy(&logits, &[ann.class_id - 1])?;
                let gf = head.backward(&mut head_params, Some(&cache), &grad)?;
                let mut gmap = Tensor::zeros(fm.values.shape());
                bilinear_backward(&mut gmap, fm.stride, local, gf.data());
                encoder.backbone.backward(&trace, &gmap)?;
            }
            let inv = 1.0 / batch.len() as f64;
            encoder.backbone.params.scale_grad(inv);
            head_params.scale_grad(inv);
            let rate = lr.lr_at(step);
            step += 1;
            sgd_step(&mut encoder.backbone.params, rate, cfg.schedule.momentum);
            sgd_step(&mut head_params, rate, cfg.schedule.momentum);
        }
    }
    encoder.backbone.params.zero_grad();
    encoder.backbone.params.reset_momentum();
    Ok(encoder.frozen_copy(EncoderKind::PretextPretrained))
}
