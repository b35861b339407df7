//! Auxiliary-task losses with analytic gradients, evaluated in `f64`.
//!
//! Every batch loss is a mean over the batch and returns the gradient of that
//! mean with respect to the prediction.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;

/// Norm floor inside the cosine loss.
pub const COS_EPS: f64 = 1e-8;

fn norm3(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - cos(g, g')` and its gradient with respect to `g'`.
/// Norms below [`COS_EPS`] are floored, which keeps the gradient finite.
pub fn cosine_loss(g: &[f64], gp: &[f64]) -> (f64, Vec<f64>) {
    let ng = norm3(g).max(COS_EPS);
    let np_raw = norm3(gp);
    if np_raw < COS_EPS {
        log::warn!("gaze prediction norm {np_raw:e} below {COS_EPS:e}; guarded");
    }
    let np = np_raw.max(COS_EPS);
    let cos: f64 = g.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>() / (ng * np);
    let grad = if np_raw < COS_EPS {
        // Below the floor the loss is linear in g'.
        g.iter().map(|a| -a / (ng * np)).collect()
    } else {
        g.iter().zip(gp).map(|(a, b)| -(a / ng - cos * b / np) / np).collect()
    };
    (1.0 - cos, grad)
}

/// Batch mean of [`cosine_loss`]; rows are samples.
pub fn pseudo_gaze_loss(g: &Array2<f64>, gp: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    check_pair(g, gp, "pseudo-gaze")?;
    let b = g.nrows() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(gp.raw_dim());
    for i in 0..g.nrows() {
        let (l, gr) = cosine_loss(g.row(i).as_slice().expect("contiguous"), gp.row(i).as_slice().expect("contiguous"));
        total += l;
        for (d, v) in gr.into_iter().enumerate() {
            grad[[i, d]] = v / b;
        }
    }
    Ok((total / b, grad))
}

/// Mean squared error over the 6 pose components, rotations differenced on the circle.
pub fn head_pose_loss(h: &Array2<f64>, hp: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    check_pair(h, hp, "head-pose")?;
    if h.ncols() != 6 {
        return Err(Error::Shape(format!("head pose needs 6 components, got {}", h.ncols())));
    }
    let scale = 1.0 / (h.nrows() * 6) as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(hp.raw_dim());
    for i in 0..h.nrows() {
        for d in 0..6 {
            let diff = hp[[i, d]] - h[[i, d]];
            let diff = if d < 3 { wrap_angle(diff) } else { diff };
            total += diff * diff;
            grad[[i, d]] = 2.0 * diff * scale;
        }
    }
    Ok((total * scale, grad))
}

/// Softmax cross-entropy; `labels[i]` is the class index of row `i`.
pub fn cross_entropy(labels: &[usize], logits: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if labels.len() != logits.nrows() || labels.is_empty() {
        return Err(Error::Shape(format!("{} labels for {} logit rows", labels.len(), logits.nrows())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cross-entropy logits".into()));
    }
    let b = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.ncols() {
            return Err(Error::Shape(format!("label {y} out of range for {} classes", logits.ncols())));
        }
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
        for c in 0..logits.ncols() {
            let p = (row[c] - lse).exp();
            grad[[i, c]] = (p - if c == y { 1.0 } else { 0.0 }) / b;
        }
    }
    Ok((total / b, grad))
}

/// Eye-side loss: two-class cross-entropy.
pub fn eye_orientation_loss(labels: &[usize], logits: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if logits.ncols() != 2 {
        return Err(Error::Shape(format!("eye side needs 2 logits, got {}", logits.ncols())));
    }
    cross_entropy(labels, logits)
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(Error::Shape(format!("{what}: labels {:?} vs predictions {:?}", a.dim(), b.dim())));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} loss input")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng as _;
    use std::f64::consts::PI;

    #[test]
    fn cosine_anchors() {
        let g = [0.3, -0.2, -0.9];
        assert!(cosine_loss(&g, &[0.6, -0.4, -1.8]).0.abs() < 1e-15);
        assert!((cosine_loss(&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]).0 - 1.0).abs() < 1e-15);
        assert!((cosine_loss(&g, &[-0.3, 0.2, 0.9]).0 - 2.0).abs() < 1e-15);
        let (l, gr) = cosine_loss(&g, &[0.0, 0.0, 0.0]);
        assert!((l - 1.0).abs() < 1e-15 && gr.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn head_pose_examples() {
        let h = Array2::zeros((1, 6));
        let mut hp = Array2::zeros((1, 6));
        assert_eq!(head_pose_loss(&h, &hp).unwrap().0, 0.0);
        hp[[0, 4]] = 0.1;
        assert!((head_pose_loss(&h, &hp).unwrap().0 - 0.01 / 6.0).abs() < 1e-15);
        let mut a = Array2::zeros((1, 6));
        let mut b = Array2::zeros((1, 6));
        a[[0, 1]] = PI - 0.05;
        b[[0, 1]] = -PI + 0.05;
        assert!((head_pose_loss(&a, &b).unwrap().0 - 0.01 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(eye_orientation_loss(&[0], &array![[20.0, -20.0]]).unwrap().0 < 1e-15);
        assert!((eye_orientation_loss(&[0], &array![[0.0, 0.0]]).unwrap().0 - 2f64.ln()).abs() < 1e-12);
        let v = eye_orientation_loss(&[0], &array![[-20.0, 20.0]]).unwrap().0;
        assert!((v - (40.0 + (-40f64).exp().ln_1p())).abs() < 1e-12);
        assert!(eye_orientation_loss(&[2], &array![[0.0, 0.0]]).is_err());
    }

    type LossFn = fn(&Array2<f64>, &Array2<f64>) -> (f64, Array2<f64>);

    fn check_grad(loss: LossFn, target: &Array2<f64>, pred: &Array2<f64>) -> f64 {
        let (_, grad) = loss(target, pred);
        let mut worst = 0.0f64;
        let h = 1e-6;
        let mut p = pred.clone();
        for idx in 0..p.len() {
            let orig = p.as_slice().unwrap()[idx];
            p.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(target, &p).0;
            p.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(target, &p).0;
            p.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.as_slice().unwrap()[idx];
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut worst = 0.0f64;
        for seed in 0..100u64 {
            let mut rng = rng_for(seed, 0, 0);
            let g = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
            let gp = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
            worst = worst.max(check_grad(|a, b| pseudo_gaze_loss(a, b).unwrap(), &g, &gp));
            let h = Array2::from_shape_fn((4, 6), |(_, d)| if d < 3 { rng.gen_range(-3.0..3.0) } else { rng.gen_range(-1.0..1.0) });
            // Keep rotation differences away from the wrap discontinuity.
            let hp = Array2::from_shape_fn((4, 6), |(i, d)| h[[i, d]] + rng.gen_range(-2.5..2.5));
            worst = worst.max(check_grad(|a, b| head_pose_loss(a, b).unwrap(), &h, &hp));
            let logits = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-5.0..5.0));
            let ce = |_: &Array2<f64>, l: &Array2<f64>| -> (f64, Array2<f64>) { cross_entropy(&[0, 1, 1, 0], l).unwrap() };
            worst = worst.max(check_grad(ce, &logits, &logits));
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    proptest! {
        #[test]
        fn cosine_loss_in_range(a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0)) {
            prop_assume!(norm3(&a) > 1e-3 && norm3(&b) > 1e-3);
            let (l, _) = cosine_loss(&a, &b);
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        }

        #[test]
        fn cross_entropy_nonnegative(l0 in -30.0f64..30.0, l1 in -30.0f64..30.0, y in 0usize..2) {
            let (v, _) = cross_entropy(&[y], &array![[l0, l1]]).unwrap();
            prop_assert!(v >= 0.0);
        }
    }
}
