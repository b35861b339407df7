//! Noisy-label learning: per-sample learnable label distributions.
//!
//! Each training sample owns a row of logits `U` in a [`LabelBank`]. The
//! corrected label is `y_d = sigmoid(U)` in the squashed `(0, 1)` space of a
//! [`TargetBounds`]. Rows start at `U0 = K (2 y_hat - 1)` and are trained
//! jointly with the network under
//! `L_reg = KL(y_p || y_d)` and `L_c = MSE(y_d, y_hat)`.

use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp for every probability fed to a logarithm.
pub const EPS: f64 = 1e-7;
pub const DEFAULT_K: f64 = 10.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Per-dimension affine range mapped onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl TargetBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Config("bounds need matching non-empty lo/hi".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(h > l) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Config("bounds need finite hi > lo in every dimension".into()));
        }
        Ok(TargetBounds { lo, hi })
    }

    /// Unit gaze vector components, each in `(-1, 1)`.
    pub fn gaze() -> Self {
        TargetBounds {
            lo: vec![-1.0; 3],
            hi: vec![1.0; 3],
        }
    }

    /// Rotations in `(-pi, pi)`; translations spanning the observed range.
    /// Degenerate translation ranges are widened by 0.5 on each side.
    pub fn head_pose(poses: &[[f64; 6]]) -> Self {
        let mut lo = vec![-PI; 6];
        let mut hi = vec![PI; 6];
        for d in 3..6 {
            let (mut l, mut h) = poses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[d]), h.max(p[d])));
            if !l.is_finite() || !h.is_finite() {
                l = 0.0;
                h = 0.0;
            }
            if h - l < 1e-6 {
                l -= 0.5;
                h += 0.5;
            }
            lo[d] = l;
            hi[d] = h;
        }
        TargetBounds { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn span(&self, d: usize) -> f64 {
        self.hi[d] - self.lo[d]
    }

    /// Affine map to `[0, 1]`; out-of-range values are clamped with a warning.
    pub fn squash(&self, t: &[f64]) -> Vec<f64> {
        t.iter()
            .enumerate()
            .map(|(d, &v)| {
                let u = (v - self.lo[d]) / self.span(d);
                if !(0.0..=1.0).contains(&u) {
                    log::warn!("target {v} outside bounds ({}, {}); clamped", self.lo[d], self.hi[d]);
                }
                u.clamp(0.0, 1.0)
            })
            .collect()
    }

    pub fn unsquash(&self, t01: &[f64]) -> Vec<f64> {
        t01.iter().enumerate().map(|(d, &u)| self.lo[d] + u * self.span(d)).collect()
    }
}

/// `sum_d p ln(p/q) + (1-p) ln((1-p)/(1-q))` with both arguments clamped to `[EPS, 1-EPS]`.
pub fn bernoulli_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("KL arguments of length {} and {}", p.len(), q.len())));
    }
    if p.iter().chain(q).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bernoulli_kl input".into()));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&p, &q)| {
            let (p, q) = (clamp_prob(p), clamp_prob(q));
            p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln()
        })
        .sum())
}

/// Learnable label-distribution logits, one row per training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBank {
    pub name: String,
    pub ids: Vec<String>,
    index: HashMap<String, usize>,
    pub k: f64,
    pub bounds: TargetBounds,
    /// Logits `U`, `n x dim`.
    pub u: Array2<f64>,
    /// Squashed noisy labels the bank was initialized from.
    pub y_hat: Array2<f64>,
}

/// Bank metadata persisted in checkpoints next to the `u` and `y_hat` arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub name: String,
    pub ids: Vec<String>,
    pub k: f64,
    pub bounds: TargetBounds,
}

/// Builds a bank with `U0 = K (2 y_hat - 1)`.
pub fn init_label_bank(name: &str, ids: Vec<String>, y_hat: Array2<f64>, k: f64, bounds: TargetBounds) -> Result<LabelBank> {
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::Config(format!("K must be positive, got {k}")));
    }
    if y_hat.nrows() != ids.len() || y_hat.ncols() != bounds.dim() {
        return Err(Error::Shape(format!(
            "bank `{name}`: {} ids, labels {:?}, bounds dim {}",
            ids.len(),
            y_hat.dim(),
            bounds.dim()
        )));
    }
    if y_hat.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config(format!("bank `{name}`: squashed labels must lie in [0, 1]")));
    }
    let u = y_hat.mapv(|y| k * (2.0 * y - 1.0));
    LabelBank::from_parts(
        BankMeta {
            name: name.into(),
            ids,
            k,
            bounds,
        },
        u,
        y_hat,
    )
}

impl LabelBank {
    pub fn from_parts(meta: BankMeta, u: Array2<f64>, y_hat: Array2<f64>) -> Result<Self> {
        if u.dim() != y_hat.dim() || u.nrows() != meta.ids.len() || u.ncols() != meta.bounds.dim() {
            return Err(Error::Shape(format!("bank `{}` arrays do not match its metadata", meta.name)));
        }
        let mut index = HashMap::with_capacity(meta.ids.len());
        for (i, id) in meta.ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Config(format!("bank `{}` has duplicate id {id}", meta.name)));
            }
        }
        Ok(LabelBank {
            name: meta.name,
            ids: meta.ids,
            index,
            k: meta.k,
            bounds: meta.bounds,
            u,
            y_hat,
        })
    }

    /// Squashes raw labels and initializes the bank from them.
    pub fn from_raw(name: &str, ids: Vec<String>, raw: &[Vec<f64>], k: f64, bounds: TargetBounds) -> Result<Self> {
        let dim = bounds.dim();
        let mut y = Array2::zeros((raw.len(), dim));
        for (i, r) in raw.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Shape(format!("bank `{name}` label {i} has {} components, expected {dim}", r.len())));
            }
            for (d, v) in bounds.squash(r).into_iter().enumerate() {
                y[[i, d]] = v;
            }
        }
        init_label_bank(name, ids, y, k, bounds)
    }

    pub fn meta(&self) -> BankMeta {
        BankMeta {
            name: self.name.clone(),
            ids: self.ids.clone(),
            k: self.k,
            bounds: self.bounds.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn row_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::MissingBankRow(id.to_string()))
    }

    pub fn rows_of(&self, ids: &[&str]) -> Result<Vec<usize>> {
        ids.iter().map(|id| self.row_of(id)).collect()
    }

    /// `y_d = sigmoid(U)` for one row.
    pub fn y_d(&self, row: usize) -> Vec<f64> {
        self.u.row(row).iter().map(|&u| sigmoid(u)).collect()
    }

    /// Corrected labels mapped back to the raw target space.
    pub fn corrected(&self, row: usize) -> Vec<f64> {
        self.bounds.unsquash(&self.y_d(row))
    }

    pub fn noisy(&self, row: usize) -> Vec<f64> {
        self.bounds.unsquash(&self.y_hat.row(row).to_vec())
    }

    /// Plain gradient step on the given rows: `U[rows] -= lr * grad`.
    pub fn apply_step(&mut self, rows: &[usize], grad: &Array2<f64>, lr: f64) {
        for (b, &r) in rows.iter().enumerate() {
            for d in 0..self.dim() {
                self.u[[r, d]] -= lr * grad[[b, d]];
            }
        }
    }
}

/// NLL terms for one batch and their gradients.
#[derive(Debug, Clone)]
pub struct NllTerms {
    /// Batch mean of the per-sample KL (summed over dimensions).
    pub l_reg: f64,
    /// Mean squared error over batch and dimensions.
    pub l_c: f64,
    /// `d(l_reg + l_c) / d(raw prediction)`, `B x dim`.
    pub grad_pred: Array2<f64>,
    /// `d(l_reg + l_c) / dU` for the batch rows, `B x dim`.
    pub grad_u: Array2<f64>,
}

/// Evaluates `L_reg = KL(squash(y_p_raw) || y_d)` and `L_c = MSE(y_d, y_hat)`
/// for the bank rows `rows`, aligned with the rows of `y_p_raw`.
pub fn nll_loss(y_p_raw: &Array2<f64>, bank: &LabelBank, rows: &[usize]) -> Result<NllTerms> {
    let (b, dim) = y_p_raw.dim();
    if dim != bank.dim() || rows.len() != b {
        return Err(Error::Shape(format!(
            "prediction {:?} against bank `{}` of dim {} with {} rows",
            y_p_raw.dim(),
            bank.name,
            bank.dim(),
            rows.len()
        )));
    }
    if b == 0 {
        return Err(Error::Empty("nll batch"));
    }
    let mut l_reg = 0.0;
    let mut l_c = 0.0;
    let mut grad_pred = Array2::zeros((b, dim));
    let mut grad_u = Array2::zeros((b, dim));
    let inv_b = 1.0 / b as f64;
    let inv_bd = 1.0 / (b * dim) as f64;
    for (i, &r) in rows.iter().enumerate() {
        for d in 0..dim {
            let span = bank.bounds.span(d);
            let p_raw = (y_p_raw[[i, d]] - bank.bounds.lo[d]) / span;
            let p = clamp_prob(p_raw);
            let q_raw = sigmoid(bank.u[[r, d]]);
            let q = clamp_prob(q_raw);
            let y = bank.y_hat[[r, d]];
            l_reg += inv_b * (p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln());
            l_c += inv_bd * (q_raw - y) * (q_raw - y);
            // Clamped arguments have zero derivative.
            if p_raw > EPS && p_raw < 1.0 - EPS {
                let logit = |x: f64| (x / (1.0 - x)).ln();
                grad_pred[[i, d]] = inv_b * (logit(p) - logit(q)) / span;
            }
            let s = q_raw * (1.0 - q_raw);
            let reg_u = if q_raw > EPS && q_raw < 1.0 - EPS { inv_b * (q - p) } else { 0.0 };
            grad_u[[i, d]] = reg_u + inv_bd * 2.0 * (q_raw - y) * s;
        }
    }
    if !l_reg.is_finite() || !l_c.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: format!("nll[{}]", bank.name),
            ids: rows.iter().map(|&r| bank.ids[r].as_str()).collect::<Vec<_>>().join(","),
        });
    }
    Ok(NllTerms { l_reg, l_c, grad_pred, grad_u })
}

/// Mean squared error of raw-space labels against clean references, per component.
pub fn label_mse(labels: &[Vec<f64>], clean: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in labels.iter().zip(clean) {
        for (x, y) in a.iter().zip(b) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
