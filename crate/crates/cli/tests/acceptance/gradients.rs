//! Central finite-difference checks of every analytic backward pass.

use ndc_core::backbone::BackboneSpec;
use ndc_core::detector::{assign_targets, build_grid, detection_loss, Assignment, DetectorOutput, GridSpec};
use ndc_core::encoder::{bilinear_backward, bilinear_sample, FeatureMap};
use ndc_core::joint::{joint_loss, JointModel, JointOutput};
use ndc_core::nn::{
    conv2d, l2_point_loss, sigmoid, sigmoid_binary_cross_entropy, softmax_cross_entropy, Conv2d, ConvGeometry, Layer,
    Linear, ParamSet, Tensor,
};
use ndc_core::{Point, PointAnnotation};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const EPS: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Denominator floor, so that gradients that vanish analytically are judged
/// by their absolute error.
const FLOOR: f64 = 1e-6;
const SEEDS: u64 = 10;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Central differences of `f` at `x` for the listed coordinates.
fn numeric(x: &[f64], coords: &[usize], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + EPS;
            let up = f(&probe);
            probe[i] = orig - EPS;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

/// Largest relative error over all coordinates of `x`.
fn check_all(x: &[f64], analytic: &[f64], f: &dyn Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let coords: Vec<usize> = (0..x.len()).collect();
    numeric(x, &coords, f)
        .iter()
        .zip(analytic)
        .map(|(n, a)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ConvGeometry {
        in_channels: rng.random_range(1..=3),
        out_channels: rng.random_range(1..=3),
        kernel: if rng.random_bool(0.5) { 3 } else { 1 },
        stride: rng.random_range(1..=2),
        pad: rng.random_range(0..=1),
    };
    let (h, w) = (rng.random_range(5..=8), rng.random_range(5..=8));
    let ws = [g.out_channels, g.in_channels, g.kernel, g.kernel];
    let wn = ws.iter().product();
    let x = uniform(&mut rng, g.in_channels * h * w, -1.0, 1.0);
    let wv = uniform(&mut rng, wn, -1.0, 1.0);
    let bv = uniform(&mut rng, g.out_channels, -1.0, 1.0);
    let (oh, ow) = g.output_size(h, w).unwrap();
    let r = uniform(&mut rng, g.out_channels * oh * ow, -1.0, 1.0);
    let input_shape = [g.in_channels, h, w];
    let loss = |x: &[f64], wv: &[f64], bv: &[f64]| -> f64 {
        let out = conv2d(&tensor(&input_shape, x.to_vec()), &tensor(&ws, wv.to_vec()), &tensor(&[g.out_channels], bv.to_vec()), g.stride, g.pad).unwrap();
        out.data().iter().zip(&r).map(|(o, r)| o * r).sum()
    };
    let mut params = ParamSet::new();
    let weight = params.add("w", tensor(&ws, wv.clone())).unwrap();
    let bias = params.add("b", tensor(&[g.out_channels], bv.clone())).unwrap();
    let layer = Layer::Conv2d(Conv2d { geometry: g, weight, bias });
    let (_, cache) = layer.forward(&params, &tensor(&input_shape, x.clone())).unwrap();
    let gx = layer.backward(&mut params, Some(&cache), &tensor(&[g.out_channels, oh, ow], r.clone())).unwrap();
    let gw = params.get(weight).grad.data().to_vec();
    let gb = params.get(bias).grad.data().to_vec();
    check_all(&x, gx.data(), &|x| loss(x, &wv, &bv))
        .max(check_all(&wv, &gw, &|w| loss(&x, w, &bv)))
        .max(check_all(&bv, &gb, &|b| loss(&x, &wv, b)))
}

fn linear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, fi, fo) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=4));
    let x = uniform(&mut rng, n * fi, -1.0, 1.0);
    let wv = uniform(&mut rng, fo * fi, -1.0, 1.0);
    let bv = uniform(&mut rng, fo, -1.0, 1.0);
    let r = uniform(&mut rng, n * fo, -1.0, 1.0);
    let build = |wv: &[f64], bv: &[f64]| {
        let mut params = ParamSet::new();
        let weight = params.add("w", tensor(&[fo, fi], wv.to_vec())).unwrap();
        let bias = params.add("b", tensor(&[fo], bv.to_vec())).unwrap();
        let layer = Layer::Linear(Linear { in_features: fi, out_features: fo, weight, bias });
        (params, layer)
    };
    let loss = |x: &[f64], wv: &[f64], bv: &[f64]| -> f64 {
        let (params, layer) = build(wv, bv);
        let out = layer.infer(&params, &tensor(&[n, fi], x.to_vec())).unwrap();
        out.data().iter().zip(&r).map(|(o, r)| o * r).sum()
    };
    let (mut params, layer) = build(&wv, &bv);
    let (_, cache) = layer.forward(&params, &tensor(&[n, fi], x.clone())).unwrap();
    let gx = layer.backward(&mut params, Some(&cache), &tensor(&[n, fo], r.clone())).unwrap();
    let ids: Vec<_> = ["w", "b"].iter().map(|k| params.find(k).unwrap()).collect();
    let gw = params.get(ids[0]).grad.data().to_vec();
    let gb = params.get(ids[1]).grad.data().to_vec();
    check_all(&x, gx.data(), &|x| loss(x, &wv, &bv))
        .max(check_all(&wv, &gw, &|w| loss(&x, w, &bv)))
        .max(check_all(&bv, &gb, &|b| loss(&x, &wv, b)))
}

fn relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=20);
    // Magnitudes stay far from the kink at zero.
    let x: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let r = uniform(&mut rng, n, -1.0, 1.0);
    let mut params = ParamSet::new();
    let (_, cache) = Layer::Relu.forward(&params, &tensor(&[n], x.clone())).unwrap();
    let g = Layer::Relu.backward(&mut params, Some(&cache), &tensor(&[n], r.clone())).unwrap();
    check_all(&x, g.data(), &|x| x.iter().zip(&r).map(|(v, r)| v.max(0.0) * r).sum())
}

fn sigmoid_bce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let z = uniform(&mut rng, h * w, -3.0, 3.0);
    let t = tensor(&[h, w], (0..h * w).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect());
    let (_, g) = sigmoid_binary_cross_entropy(&tensor(&[h, w], z.clone()), &t).unwrap();
    check_all(&z, g.data(), &|z| sigmoid_binary_cross_entropy(&tensor(&[h, w], z.to_vec()), &t).unwrap().0)
}

fn softmax_ce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..=5), rng.random_range(2..=5));
    let z = uniform(&mut rng, n * c, -3.0, 3.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let (_, g) = softmax_cross_entropy(&tensor(&[n, c], z.clone()), &labels).unwrap();
    check_all(&z, g.data(), &|z| softmax_cross_entropy(&tensor(&[n, c], z.to_vec()), &labels).unwrap().0)
}

fn points(v: &[f64]) -> Vec<Point> {
    v.chunks(2).map(|c| Point::new(c[0], c[1])).collect()
}

fn l2(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let p = uniform(&mut rng, 2 * n, -5.0, 5.0);
    let t = points(&uniform(&mut rng, 2 * n, -5.0, 5.0));
    let (_, g) = l2_point_loss(&points(&p), &t).unwrap();
    let g: Vec<f64> = g.iter().flat_map(|q| [q.x, q.y]).collect();
    check_all(&p, &g, &|p| l2_point_loss(&points(p), &t).unwrap().0)
}

/// Random detector maps and ground truth on a small grid with a fixed
/// assignment computed at the unperturbed point.
struct DetCase {
    grid: GridSpec,
    logits: Vec<f64>,
    offsets: Vec<f64>,
    gts: Vec<PointAnnotation>,
    assignment: Assignment,
    lambda_reg: f64,
}

fn det_case(rng: &mut ChaCha8Rng, classes: usize) -> DetCase {
    let grid = build_grid(4 * rng.random_range(2..=4), 4 * rng.random_range(2..=4), 4).unwrap();
    let cells = grid.cells();
    let logits = uniform(rng, cells, -3.0, 3.0);
    let offsets = uniform(rng, 2 * cells, -0.5, 0.5);
    let n = rng.random_range(0..=4);
    let gts: Vec<PointAnnotation> = (0..n)
        .map(|_| PointAnnotation {
            point: Point::new(
                rng.random_range(0.0..(4 * grid.cols) as f64),
                rng.random_range(0.0..(4 * grid.rows) as f64),
            ),
            class_id: rng.random_range(1..=classes),
        })
        .collect();
    let anchors = grid.anchors();
    let props: Vec<Point> = anchors
        .iter()
        .enumerate()
        .map(|(k, a)| Point::new(a.x + 4.0 * offsets[k], a.y + 4.0 * offsets[cells + k]))
        .collect();
    let scores: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let pts: Vec<Point> = gts.iter().map(|a| a.point).collect();
    let assignment = assign_targets(&props, &scores, &pts, 0.5);
    DetCase {
        grid,
        logits,
        offsets,
        gts,
        assignment,
        lambda_reg: rng.random_range(0.1..2.0),
    }
}

impl DetCase {
    fn output(&self, x: &[f64]) -> DetectorOutput {
        let cells = self.grid.cells();
        DetectorOutput {
            logits: tensor(&[self.grid.rows, self.grid.cols], x[..cells].to_vec()),
            offsets: tensor(&[2, self.grid.rows, self.grid.cols], x[cells..3 * cells].to_vec()),
        }
    }

    fn x(&self) -> Vec<f64> {
        self.logits.iter().chain(&self.offsets).copied().collect()
    }

    fn points(&self) -> Vec<Point> {
        self.gts.iter().map(|a| a.point).collect()
    }
}

fn detection(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = det_case(&mut rng, 1);
    let x = c.x();
    let f = |x: &[f64]| detection_loss(&c.output(x), &c.grid, &c.assignment, &c.points(), c.lambda_reg).unwrap().0;
    let (_, g) = detection_loss(&c.output(&x), &c.grid, &c.assignment, &c.points(), c.lambda_reg).unwrap();
    let ga: Vec<f64> = g.logits.data().iter().chain(g.offsets.data()).copied().collect();
    check_all(&x, &ga, &f)
}

fn joint(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(2..=4);
    let c = det_case(&mut rng, classes);
    let cells = c.grid.cells();
    let lambda_cls = rng.random_range(0.1..2.0);
    let mut x = c.x();
    x.extend(uniform(&mut rng, classes * cells, -3.0, 3.0));
    let out = |x: &[f64]| JointOutput {
        det: c.output(x),
        class_logits: tensor(&[classes, c.grid.rows, c.grid.cols], x[3 * cells..].to_vec()),
    };
    let f = |x: &[f64]| joint_loss(&out(x), &c.grid, &c.assignment, &c.gts, c.lambda_reg, lambda_cls).unwrap().0;
    let (_, g) = joint_loss(&out(&x), &c.grid, &c.assignment, &c.gts, c.lambda_reg, lambda_cls).unwrap();
    let ga: Vec<f64> = g
        .det
        .logits
        .data()
        .iter()
        .chain(g.det.offsets.data())
        .chain(g.class_logits.data())
        .copied()
        .collect();
    check_all(&x, &ga, &f)
}

fn bilinear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ch, rows, cols, stride) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5), 4);
    let v = uniform(&mut rng, ch * rows * cols, -1.0, 1.0);
    let queries: Vec<(Point, Vec<f64>)> = (0..rng.random_range(1..=5))
        .map(|_| {
            let p = Point::new(
                rng.random_range(-4.0..(4 * cols + 4) as f64),
                rng.random_range(-4.0..(4 * rows + 4) as f64),
            );
            (p, uniform(&mut rng, ch, -1.0, 1.0))
        })
        .collect();
    let f = |v: &[f64]| -> f64 {
        let fm = FeatureMap::new(tensor(&[ch, rows, cols], v.to_vec()), stride).unwrap();
        queries
            .iter()
            .map(|(p, r)| bilinear_sample(&fm, *p).iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let mut grad = Tensor::zeros(&[ch, rows, cols]);
    for (p, r) in &queries {
        bilinear_backward(&mut grad, stride, *p, r);
    }
    check_all(&v, grad.data(), &f)
}

fn pick(m: &mut JointModel, set: usize) -> &mut ParamSet {
    match set {
        0 => &mut m.backbone.params,
        1 => &mut m.heads.params,
        _ => &mut m.class_params,
    }
}

/// Backbone, detection heads and class head together, on sampled
/// parameter coordinates.
fn joint_network(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 3;
    let model = JointModel::new(BackboneSpec::encoder(4, 4).unwrap(), classes, rng.next_u64()).unwrap();
    let image = tensor(&[3, 16, 16], uniform(&mut rng, 3 * 256, 0.0, 1.0));
    let grid = model.grid_for(&image).unwrap();
    let gts: Vec<PointAnnotation> = (0..3)
        .map(|_| PointAnnotation {
            point: Point::new(rng.random_range(0.0..16.0), rng.random_range(0.0..16.0)),
            class_id: rng.random_range(1..=classes),
        })
        .collect();
    let pts: Vec<Point> = gts.iter().map(|a| a.point).collect();
    let out = model.forward_raw(&image).unwrap();
    let (props, scores) = out.det.proposals(&grid);
    let assignment = assign_targets(&props, &scores, &pts, 0.5);
    let (lr, lc) = (1.0, 1.0);
    let loss_of = |m: &JointModel| joint_loss(&m.forward_raw(&image).unwrap(), &grid, &assignment, &gts, lr, lc).unwrap().0;

    // Analytic gradients through the public layer pieces.
    let mut m = model.clone();
    let (f, trace) = m.backbone.forward(&image).unwrap();
    let (det, head_cache) = m.heads.forward(&f).unwrap();
    let (class_logits, class_cache) = m.class_head.forward(&m.class_params, &f).unwrap();
    let (_, g) = joint_loss(&JointOutput { det, class_logits }, &grid, &assignment, &gts, lr, lc).unwrap();
    let mut gf = m.heads.backward(&head_cache, &g.det).unwrap();
    let gc = m.class_head.backward(&mut m.class_params, Some(&class_cache), &g.class_logits).unwrap();
    gf.add_scaled(&gc, 1.0).unwrap();
    m.backbone.backward(&trace, &gf).unwrap();

    let mut worst: f64 = 0.0;
    for set in 0..3 {
        let grads: Vec<Vec<f64>> = pick(&mut m, set).iter().map(|(_, p)| p.grad.data().to_vec()).collect();
        for (pi, grad) in grads.iter().enumerate() {
            for _ in 0..6 {
                let i = rng.random_range(0..grad.len());
                let eval = |delta: f64| {
                    let mut probe = model.clone();
                    let (_, p) = pick(&mut probe, set).iter_mut().nth(pi).unwrap();
                    p.value.data_mut()[i] += delta;
                    loss_of(&probe)
                };
                let n = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
                worst = worst.max(rel_err(grad[i], n));
            }
        }
    }
    worst
}

pub fn run() -> Outcome {
    let ops: [(&str, fn(u64) -> f64); 10] = [
        ("conv", conv),
        ("linear", linear),
        ("relu", relu),
        ("sigmoid-bce", sigmoid_bce),
        ("softmax-ce", softmax_ce),
        ("l2-point", l2),
        ("detection-loss", detection),
        ("joint-loss", joint),
        ("bilinear", bilinear),
        ("joint-network", joint_network),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, op) in ops {
        let worst = (0..SEEDS).map(|s| op(1000 + s)).fold(0.0, f64::max);
        pass &= worst < TOLERANCE;
        parts.push(format!("{name} {worst:.1e}"));
    }
    Outcome::new(pass, format!("max rel err over {SEEDS} seeds: {}", parts.join(", ")))
}
