//! Distance-based one-to-one matching and F1 metrics.

use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointAnnotation};

/// Default matching radius in pixels for the 64x64 synthetic data.
pub const DEFAULT_RADIUS: f64 = 6.0;

/// One matched pair of indices into the prediction and ground-truth lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
}

/// One-to-one matching of predictions to ground truth within `radius`.
///
/// Among matchings of maximum cardinality using only pairs at distance
/// `<= radius`, returns one with minimum total distance. Pairs are sorted by
/// ground-truth index.
pub fn match_one_to_one(preds: &[Point], gts: &[Point], radius: f64) -> Vec<MatchedPair> {
    if preds.is_empty() || gts.is_empty() {
        return Vec::new();
    }
    let rows = gts.len();
    let cols = preds.len();
    let bounded = radius.is_finite();
    // Any infeasible edge costs more than every feasible matching combined, so
    // minimizing total cost first maximizes the number of feasible edges.
    let penalty = if bounded {
        2.0 * radius * (rows.min(cols) as f64 + 1.0) + 1.0
    } else {
        0.0
    };
    let mut cost = Vec::with_capacity(rows * cols);
    for g in gts {
        for p in preds {
            let d = g.distance(*p);
            cost.push(if d <= radius { d } else { penalty });
        }
    }
    let mut pairs: Vec<MatchedPair> = min_cost_assignment(&cost, rows, cols)
        .into_iter()
        .enumerate()
        .filter_map(|(gt, pred)| {
            let pred = pred?;
            (gts[gt].distance(preds[pred]) <= radius).then_some(MatchedPair { pred, gt })
        })
        .collect();
    pairs.sort_by_key(|p| (p.gt, p.pred));
    pairs
}

/// True/false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// `2TP / (2TP + FP + FN)`; zero when all counts are zero.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        let d = self.tp + self.fp;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let d = self.tp + self.fn_;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    fn from_matching(n_pred: usize, n_gt: usize, matched: usize) -> Self {
        Counts {
            tp: matched,
            fp: n_pred - matched,
            fn_: n_gt - matched,
        }
    }
}

/// Per-class and class-agnostic match counts.
///
/// Dataset-level reports are built by summing counts with [`MatchReport::merge`]
/// before computing any F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub radius: f64,
    /// Index `c - 1` holds the counts of class `c`.
    pub per_class: Vec<Counts>,
    pub detection: Counts,
}

impl MatchReport {
    pub fn empty(classes: usize, radius: f64) -> Self {
        Self {
            radius,
            per_class: vec![Counts::default(); classes],
            detection: Counts::default(),
        }
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn per_class_f1(&self) -> Vec<f64> {
        self.per_class.iter().map(Counts::f1).collect()
    }

    /// Unweighted mean of the per-class F1 scores.
    pub fn average_f1(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.iter().map(Counts::f1).sum::<f64>() / self.per_class.len() as f64
    }

    /// Class-agnostic detection F1.
    pub fn detection_f1(&self) -> f64 {
        self.detection.f1()
    }

    pub fn merge(&mut self, other: &MatchReport) {
        assert_eq!(self.classes(), other.classes(), "class count differs");
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(b);
        }
        self.detection.add(&other.detection);
    }
}

fn check_classes(items: &[PointAnnotation], classes: usize) -> Result<()> {
    match items.iter().find(|a| a.class_id == 0 || a.class_id > classes) {
        Some(a) => Err(Error::LabelOutOfRange {
            label: a.class_id,
            classes,
        }),
        None => Ok(()),
    }
}

/// Matching report of one image.
///
/// Class `c` counts come from matching only class-`c` predictions against
/// class-`c` ground truth; detection counts come from matching all points
/// with labels ignored.
pub fn f1_report(
    preds: &[PointAnnotation],
    gts: &[PointAnnotation],
    radius: f64,
    classes: usize,
) -> Result<MatchReport> {
    check_classes(preds, classes)?;
    check_classes(gts, classes)?;
    let mut report = MatchReport::empty(classes, radius);
    for c in 1..=classes {
        let p: Vec<Point> = preds.iter().filter(|a| a.class_id == c).map(|a| a.point).collect();
        let g: Vec<Point> = gts.iter().filter(|a| a.class_id == c).map(|a| a.point).collect();
        let matched = match_one_to_one(&p, &g, radius).len();
        report.per_class[c - 1] = Counts::from_matching(p.len(), g.len(), matched);
    }
    report.detection = detection_counts(
        &preds.iter().map(|a| a.point).collect::<Vec<_>>(),
        &gts.iter().map(|a| a.point).collect::<Vec<_>>(),
        radius,
    );
    Ok(report)
}

/// Class-agnostic counts for one image.
pub fn detection_counts(preds: &[Point], gts: &[Point], radius: f64) -> Counts {
    let matched = match_one_to_one(preds, gts, radius).len();
    Counts::from_matching(preds.len(), gts.len(), matched)
}

/// One value of a per-epoch training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub value: f64,
}

/// First epoch at which the curve reaches `fraction` of its final value.
pub fn convergence_epochs(curve: &[CurvePoint], fraction: f64) -> Result<usize> {
    let last = curve
        .last()
        .ok_or_else(|| Error::Usage("convergence of an empty curve".into()))?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Usage(format!("fraction {fraction} outside (0, 1]")));
    }
    let target = fraction * last.value;
    Ok(curve
        .iter()
        .find(|p| p.value >= target)
        .map_or(last.epoch, |p| p.epoch))
}
