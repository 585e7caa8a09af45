//! Exhaustive and closed-form oracles for decoding, assignment, matching,
//! sampling and the F1 protocol.

use ndc_core::detector::{self, assign_targets, assignment_cost, build_grid};
use ndc_core::encoder::{bilinear_sample, FeatureMap};
use ndc_core::eval::{f1_report, match_one_to_one, Counts, MatchReport};
use ndc_core::nn::Tensor;
use ndc_core::{Point, PointAnnotation};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn decode() -> Outcome {
    let mut r = rng(2);
    let mut mismatches = 0;
    let mut kept = 0;
    for case in 0..200 {
        let stride = 4;
        let (rows, cols) = (r.random_range(1..=8), r.random_range(1..=8));
        let grid = build_grid(rows * stride, cols * stride, stride).unwrap();
        let tau = r.random_range(0.05..0.95);
        let mut s: Vec<f64> = (0..rows * cols).map(|_| r.random_range(0.0..1.0)).collect();
        if case == 0 {
            s.iter_mut().for_each(|v| *v = tau * 0.5);
        }
        // Scores exactly at the threshold are not detections.
        if case % 3 == 1 {
            s[0] = tau;
        }
        let off: Vec<f64> = (0..2 * rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = detector::decode(
            &Tensor::new(vec![rows, cols], s.clone()).unwrap(),
            &Tensor::new(vec![2, rows, cols], off.clone()).unwrap(),
            &grid,
            tau,
        )
        .unwrap();
        let sigma = stride as f64;
        let mut want = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                let k = i * cols + j;
                if s[k] > tau {
                    let x = (j as f64 + 0.5) * sigma + sigma * off[k];
                    let y = (i as f64 + 0.5) * sigma + sigma * off[rows * cols + k];
                    want.push((x, y, s[k]));
                }
            }
        }
        let same = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|(d, w)| d.point.x == w.0 && d.point.y == w.1 && d.score == w.2);
        if case == 0 && !got.is_empty() {
            mismatches += 1;
        }
        kept += got.len();
        if !same {
            mismatches += 1;
        }
    }
    Outcome::new(
        mismatches == 0,
        format!("200 maps, {kept} detections, {mismatches} differ from the exhaustive scan"),
    )
}

fn random_points(r: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point> {
    (0..n)
        .map(|_| Point::new(r.random_range(0.0..extent), r.random_range(0.0..extent)))
        .collect()
}

/// Every injective map from `0..a` into `0..b` (a <= b).
fn injections(a: usize, b: usize, f: &mut dyn FnMut(&[usize])) {
    fn go(pos: usize, a: usize, b: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if pos == a {
            f(cur);
            return;
        }
        for k in 0..b {
            if !used[k] {
                used[k] = true;
                cur.push(k);
                go(pos + 1, a, b, used, cur, f);
                cur.pop();
                used[k] = false;
            }
        }
    }
    go(0, a, b, &mut vec![false; b], &mut Vec::new(), f);
}

/// Minimum total cost over full-cardinality assignments.
fn brute_assignment(cost: impl Fn(usize, usize) -> f64, m: usize, n: usize) -> f64 {
    let mut best = f64::INFINITY;
    if m <= n {
        injections(m, n, &mut |map| best = best.min(map.iter().enumerate().map(|(g, &k)| cost(g, k)).sum()));
    } else {
        injections(n, m, &mut |map| best = best.min(map.iter().enumerate().map(|(k, &g)| cost(g, k)).sum()));
    }
    best
}

/// Maximum cardinality, then minimum distance, over matchings using pairs
/// within `radius`.
fn brute_matching(preds: &[Point], gts: &[Point], radius: f64) -> (usize, f64) {
    fn go(g: usize, preds: &[Point], gts: &[Point], radius: f64, used: &mut [bool], acc: (usize, f64), best: &mut (usize, f64)) {
        if g == gts.len() {
            if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                *best = acc;
            }
            return;
        }
        go(g + 1, preds, gts, radius, used, acc, best);
        for k in 0..preds.len() {
            let d = gts[g].distance(preds[k]);
            if !used[k] && d <= radius {
                used[k] = true;
                go(g + 1, preds, gts, radius, used, (acc.0 + 1, acc.1 + d), best);
                used[k] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(0, preds, gts, radius, &mut vec![false; preds.len()], (0, 0.0), &mut best);
    best
}

fn injective(pairs: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut a = std::collections::HashSet::new();
    let mut b = std::collections::HashSet::new();
    pairs.into_iter().all(|(x, y)| a.insert(x) && b.insert(y))
}

pub fn assignment_and_matching() -> Outcome {
    let mut r = rng(3);
    let (mut bad_assign, mut bad_match) = (0, 0);
    for _ in 0..500 {
        let (m, n) = (r.random_range(0..=6), r.random_range(0..=6));
        let gts = random_points(&mut r, m, 32.0);
        let props = random_points(&mut r, n, 32.0);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let mu = r.random_range(0.0..2.0);

        let a = assign_targets(&props, &scores, &gts, mu);
        let got = assignment_cost(&props, &scores, &gts, mu, &a);
        let want = if m.min(n) == 0 {
            0.0
        } else {
            brute_assignment(|g, k| props[k].distance(gts[g]) - mu * scores[k], m, n)
        };
        if a.pairs.len() != m.min(n) || !injective(a.pairs.iter().copied()) || (got - want).abs() > 1e-9 {
            bad_assign += 1;
        }

        let radius = 6.0;
        let pairs = match_one_to_one(&props, &gts, radius);
        let dist: f64 = pairs.iter().map(|p| props[p.pred].distance(gts[p.gt])).sum();
        let (card, best) = brute_matching(&props, &gts, radius);
        let valid = injective(pairs.iter().map(|p| (p.gt, p.pred)))
            && pairs.iter().all(|p| props[p.pred].distance(gts[p.gt]) <= radius);
        if !valid || pairs.len() != card || (dist - best).abs() > 1e-9 {
            bad_match += 1;
        }
    }
    Outcome::new(
        bad_assign == 0 && bad_match == 0,
        format!("500 instances: {bad_assign} assignment and {bad_match} matching mismatches against brute force"),
    )
}

/// Tent-kernel closed form of the border-clamped bilinear sampler.
fn closed_form(values: &[f64], c: usize, h: usize, w: usize, stride: usize, p: Point) -> Vec<f64> {
    let s = stride as f64;
    let u = (p.x / s - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (p.y / s - 0.5).clamp(0.0, (h - 1) as f64);
    (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    let k = (1.0 - (u - j as f64).abs()).max(0.0) * (1.0 - (v - i as f64).abs()).max(0.0);
                    acc += k * values[(ch * h + i) * w + j];
                }
            }
            acc
        })
        .collect()
}

pub fn bilinear() -> Outcome {
    let mut r = rng(4);
    let stride = 4;
    let (mut center_bad, mut worst_closed, mut worst_linear): (usize, f64, f64) = (0, 0.0, 0.0);
    let mut queries = 0;
    while queries < 500 {
        let (c, h, w) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=6));
        let f: Vec<f64> = (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let map = |v: &[f64]| FeatureMap::new(Tensor::new(vec![c, h, w], v.to_vec()).unwrap(), stride).unwrap();
        let (fm, gm) = (map(&f), map(&g));
        for i in 0..h {
            for j in 0..w {
                let p = Point::new((j as f64 + 0.5) * 4.0, (i as f64 + 0.5) * 4.0);
                let got = bilinear_sample(&fm, p);
                if (0..c).any(|ch| got[ch] != f[(ch * h + i) * w + j]) {
                    center_bad += 1;
                }
            }
        }
        let (a, b) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let mix: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let mm = map(&mix);
        for _ in 0..10 {
            // Queries reach beyond the map so clamping is exercised.
            let p = Point::new(
                r.random_range(-6.0..(4 * w) as f64 + 6.0),
                r.random_range(-6.0..(4 * h) as f64 + 6.0),
            );
            let got = bilinear_sample(&fm, p);
            for (x, y) in got.iter().zip(closed_form(&f, c, h, w, stride, p)) {
                worst_closed = worst_closed.max((x - y).abs());
            }
            let (sf, sg, sm) = (got, bilinear_sample(&gm, p), bilinear_sample(&mm, p));
            for ch in 0..c {
                worst_linear = worst_linear.max((sm[ch] - (a * sf[ch] + b * sg[ch])).abs());
            }
            queries += 1;
        }
    }
    Outcome::new(
        center_bad == 0 && worst_closed <= 1e-12 && worst_linear <= 1e-12,
        format!(
            "{center_bad} inexact cell centers, {queries} queries: closed form err {worst_closed:.1e}, linearity err {worst_linear:.1e}"
        ),
    )
}

fn ann(x: f64, y: f64, class_id: usize) -> PointAnnotation {
    PointAnnotation {
        point: Point::new(x, y),
        class_id,
    }
}

fn report(preds: &[PointAnnotation], gts: &[PointAnnotation], classes: usize) -> MatchReport {
    f1_report(preds, gts, 6.0, classes).unwrap()
}

pub fn metrics() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;

    let gts = [ann(10.0, 10.0, 1), ann(30.0, 10.0, 1)];
    let preds = [ann(11.0, 10.0, 1), ann(30.0, 13.0, 1), ann(50.0, 50.0, 1)];
    let d = report(&preds, &gts, 1).detection;
    expect("2tp-1fp", d == Counts { tp: 2, fp: 1, fn_: 0 } && close(d.f1(), 0.8));
    expect("precision-recall", close(d.precision(), 2.0 / 3.0) && close(d.recall(), 1.0));

    expect("identical", close(report(&gts, &gts, 1).detection_f1(), 1.0));
    let empty = report(&[], &gts, 1);
    expect("empty-predictions", empty.detection_f1() == 0.0 && empty.detection.fn_ == 2);

    let eps = 1e-9;
    let inside = report(&[ann(10.0 + 6.0 - eps, 10.0, 1)], &gts[..1], 1).detection;
    let edge = report(&[ann(16.0, 10.0, 1)], &gts[..1], 1).detection;
    let outside = report(&[ann(10.0 + 6.0 + eps, 10.0, 1)], &gts[..1], 1).detection;
    expect("radius-inside", inside.tp == 1);
    expect("radius-edge", edge.tp == 1);
    expect("radius-outside", outside.tp == 0 && outside.fp == 1 && outside.fn_ == 1);

    // Nearest-first greedy would match only one pair here.
    let cross_g = [ann(0.0, 0.0, 1), ann(10.0, 0.0, 1)];
    let cross_p = [ann(5.0, 0.0, 1), ann(-5.5, 0.0, 1)];
    expect("crossing", report(&cross_p, &cross_g, 1).detection.tp == 2);

    // Right place, wrong class.
    let r = report(&[ann(1.0, 0.0, 2)], &[ann(0.0, 0.0, 1)], 2);
    expect(
        "wrong-class",
        r.detection_f1() == 1.0 && r.average_f1() == 0.0 && r.per_class[0].fn_ == 1 && r.per_class[1].fp == 1,
    );

    // Counts are pooled across images before the ratio is taken.
    let mut pooled = report(&[ann(0.0, 0.0, 1), ann(20.0, 0.0, 1), ann(40.0, 0.0, 1)], &[ann(0.0, 0.0, 1), ann(20.0, 0.0, 1), ann(40.0, 0.0, 1)], 1);
    pooled.merge(&report(&[], &[ann(0.0, 0.0, 1)], 1));
    expect("pooled-counts", close(pooled.detection_f1(), 6.0 / 7.0));

    let mut r = rng(5);
    let mut asymmetric = 0;
    for _ in 0..100 {
        let classes = r.random_range(1..=3);
        let pts = |r: &mut ChaCha8Rng, n: usize| -> Vec<PointAnnotation> {
            (0..n)
                .map(|_| {
                    let (x, y) = (r.random_range(0.0..40.0), r.random_range(0.0..40.0));
                    ann(x, y, r.random_range(1..=classes))
                })
                .collect()
        };
        let (np, ng) = (r.random_range(0..=8), r.random_range(0..=8));
        let (mut p, mut g) = (pts(&mut r, np), pts(&mut r, ng));
        let before = report(&p, &g, classes);
        p.shuffle(&mut r);
        g.shuffle(&mut r);
        let after = report(&p, &g, classes);
        let swapped = report(&g, &p, classes);
        let mirrored = swapped.detection.tp == before.detection.tp
            && swapped.detection.fp == before.detection.fn_
            && close(swapped.detection_f1(), before.detection_f1());
        if before.per_class != after.per_class || before.detection != after.detection || !mirrored {
            asymmetric += 1;
        }
    }
    expect("permutation-symmetry", asymmetric == 0);

    let pass = failures.is_empty();
    let detail = if pass {
        "golden cases match, order-invariant over 100 random instances".to_string()
    } else {
        format!("failed: {}", failures.join(", "))
    };
    Outcome::new(pass, detail)
}
