use super::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Point;

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(s: f64) -> f64 {
    s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

fn check_binary(t: f64) -> Result<()> {
    if t == 0.0 || t == 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTarget(t))
    }
}

/// Mean negative log-likelihood of softmax over rows of `[N, C]` logits.
///
/// Returns the loss and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, classes) = match *logits.shape() {
        [c] => (1, c),
        [n, c] => (n, c),
        _ => {
            return Err(Error::InvalidShape(format!(
                "logits must be [N, C], got {:?}",
                logits.shape()
            )))
        }
    };
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut grad = vec![0.0; n * classes];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_denom = denom.ln() + max;
        loss += log_denom - row[label];
        for (c, &z) in row.iter().enumerate() {
            let p = (z - log_denom).exp();
            grad[r * classes + c] = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean binary cross-entropy of probabilities against `{0, 1}` targets.
///
/// The gradient is taken with respect to the clamped probabilities, so it is
/// zero wherever a score lies outside the clamp interval.
pub fn binary_cross_entropy(scores: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    scores.expect_shape(targets.shape())?;
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &t) in scores.data().iter().zip(targets.data()) {
        check_binary(t)?;
        let sc = clamp_prob(s);
        loss -= t * sc.ln() + (1.0 - t) * (1.0 - sc).ln();
        let inside = (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&s);
        grad.push(if inside {
            (-t / sc + (1.0 - t) / (1.0 - sc)) / n
        } else {
            0.0
        });
    }
    Ok((loss / n, Tensor::new(scores.shape().to_vec(), grad)?))
}

/// Binary cross-entropy applied to `sigmoid(logits)`.
///
/// The loss uses clamped probabilities; the returned gradient with respect to
/// the logits is `(sigmoid(z) - t) / N`, which never vanishes for saturated
/// wrong predictions.
pub fn sigmoid_binary_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    logits.expect_shape(targets.shape())?;
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        check_binary(t)?;
        let s = sigmoid(z);
        let sc = clamp_prob(s);
        loss -= t * sc.ln() + (1.0 - t) * (1.0 - sc).ln();
        grad.push((s - t) / n);
    }
    Ok((loss / n, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean squared Euclidean distance between paired points.
///
/// Returns the loss and the gradient with respect to each predicted point.
pub fn l2_point_loss(pred: &[Point], target: &[Point]) -> Result<(f64, Vec<Point>)> {
    if pred.len() != target.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let loss = pred
        .iter()
        .zip(target)
        .map(|(p, t)| p.distance_sq(*t))
        .sum::<f64>()
        / n;
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| Point::new(2.0 * (p.x - t.x) / n, 2.0 * (p.y - t.y) / n))
        .collect();
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_ce() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((grad.data()[0] + 0.5).abs() < 1e-15);
        assert!((grad.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ce_rejects_out_of_range_labels() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let s = Tensor::scalar(0.5);
        let t = Tensor::scalar(1.0);
        let (loss, _) = binary_cross_entropy(&s, &t).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_perfect_prediction_hits_clamp_floor() {
        let s = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let t = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let (loss, grad) = binary_cross_entropy(&s, &t).unwrap();
        let floor = -(1.0 - BCE_CLAMP).ln();
        assert!(loss <= floor + 1e-18);
        let bound = 1.0 / (1.0 - BCE_CLAMP);
        assert!(grad.data().iter().all(|g| g.abs() <= bound));
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let s = Tensor::scalar(0.3);
        assert!(matches!(
            binary_cross_entropy(&s, &Tensor::scalar(0.5)),
            Err(Error::InvalidTarget(_))
        ));
        assert!(sigmoid_binary_cross_entropy(&s, &Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn l2_identical_and_unit_cases() {
        let pts = [Point::new(1.0, 2.0), Point::new(-3.0, 0.5)];
        let (loss, grads) = l2_point_loss(&pts, &pts).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.x == 0.0 && g.y == 0.0));

        let (loss, grads) = l2_point_loss(&[Point::new(1.0, 0.0)], &[Point::new(0.0, 0.0)]).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grads[0], Point::new(2.0, 0.0));
        assert!(l2_point_loss(&pts, &pts[..1]).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
