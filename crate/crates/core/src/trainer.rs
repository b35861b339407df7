//! Joint multi-task training of the backbone, auxiliary heads, and label banks.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Provenance};
use crate::corpus::EyeSample;
use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::losses;
use crate::model::{AuxGrads, AuxOutputs, GazeModel, ModelConfig};
use crate::nll::{self, LabelBank, TargetBounds};
use crate::optim::Sgd;
use crate::patch::Patch;
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    PseudoGaze,
    HeadPose,
    EyeSide,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::PseudoGaze, Task::HeadPose, Task::EyeSide];

    pub fn short(self) -> &'static str {
        match self {
            Task::PseudoGaze => "gaze",
            Task::HeadPose => "pose",
            Task::EyeSide => "side",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "pseudo-gaze" | "gaze" => Some(Task::PseudoGaze),
            "head-pose" | "pose" => Some(Task::HeadPose),
            "eye-side" | "side" => Some(Task::EyeSide),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub w_gaze: f64,
    pub w_pose: f64,
    pub w_side: f64,
    pub w_nll: f64,
    pub tasks: Vec<Task>,
    pub nll_enabled: bool,
    /// Bank initialization scale `K`, shared by the gaze and pose banks.
    pub nll_k: f64,
    /// Step size for bank logits, applied to the per-sample gradient of the
    /// weighted NLL terms; `label_lr * w_nll` is the effective rate.
    pub label_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 30,
            w_gaze: 1.0,
            w_pose: 1.0,
            w_side: 1.0,
            w_nll: 0.1,
            tasks: Task::ALL.to_vec(),
            nll_enabled: true,
            nll_k: nll::DEFAULT_K,
            label_lr: 50.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 500 epochs and unit NLL weight.
    pub fn reference_profile() -> Self {
        TrainConfig {
            epochs: 500,
            w_nll: 1.0,
            label_lr: 5.0,
            ..Default::default()
        }
    }

    pub fn has(&self, t: Task) -> bool {
        self.tasks.contains(&t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task must be enabled".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.label_lr < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1); weight_decay and label_lr non-negative".into()));
        }
        if [self.w_gaze, self.w_pose, self.w_side, self.w_nll]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.nll_enabled && !(self.nll_k > 0.0) {
            return Err(Error::Config(format!("nll_k must be positive, got {}", self.nll_k)));
        }
        Ok(())
    }

    /// Short label like `gaze+pose+side+nll`.
    pub fn label(&self) -> String {
        let mut t: Vec<Task> = self.tasks.clone();
        t.sort();
        t.dedup();
        let mut s: Vec<&str> = t.iter().map(|t| t.short()).collect();
        if self.nll_enabled {
            s.push("nll");
        }
        s.join("+")
    }
}

/// In-memory training set with pseudo-labels.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub ids: Vec<String>,
    pub images: Vec<Patch>,
    pub gaze: Vec<[f64; 3]>,
    pub pose: Vec<[f64; 6]>,
    pub side: Vec<usize>,
}

impl TrainSet {
    pub fn from_samples(samples: &[EyeSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut set = TrainSet {
            ids: Vec::new(),
            images: Vec::new(),
            gaze: Vec::new(),
            pose: Vec::new(),
            side: Vec::new(),
        };
        for s in samples {
            let g = s.pseudo_gaze.ok_or_else(|| Error::MissingField {
                id: s.id.clone(),
                field: "pseudo_gaze",
            })?;
            let h = s.pseudo_head.ok_or_else(|| Error::MissingField {
                id: s.id.clone(),
                field: "pseudo_head",
            })?;
            set.ids.push(s.id.clone());
            set.images.push(s.load_image()?);
            set.gaze.push(g.as_array());
            set.pose.push(h.to_array());
            set.side.push(s.side.class_index());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The gaze and head-pose label banks.
#[derive(Debug, Clone, PartialEq)]
pub struct Banks {
    pub gaze: LabelBank,
    pub pose: LabelBank,
}

impl Banks {
    pub fn init(data: &TrainSet, k: f64) -> Result<Self> {
        let gaze_raw: Vec<Vec<f64>> = data.gaze.iter().map(|g| g.to_vec()).collect();
        let pose_raw: Vec<Vec<f64>> = data.pose.iter().map(|p| p.to_vec()).collect();
        Ok(Banks {
            gaze: LabelBank::from_raw("gaze", data.ids.clone(), &gaze_raw, k, TargetBounds::gaze())?,
            pose: LabelBank::from_raw("pose", data.ids.clone(), &pose_raw, k, TargetBounds::head_pose(&data.pose))?,
        })
    }
}

/// Network outputs in `f64`, as seen by the losses.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub gaze: Array2<f64>,
    pub pose: Array2<f64>,
    pub side: Array2<f64>,
}

impl Predictions {
    pub fn from_outputs(out: &AuxOutputs) -> Self {
        Predictions {
            gaze: out.gaze.mapv(f64::from),
            pose: out.pose.mapv(f64::from),
            side: out.side.mapv(f64::from),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchLabels {
    pub ids: Vec<String>,
    pub gaze: Array2<f64>,
    pub pose: Array2<f64>,
    pub side: Vec<usize>,
}

impl BatchLabels {
    pub fn gather(data: &TrainSet, idx: &[usize]) -> Self {
        BatchLabels {
            ids: idx.iter().map(|&i| data.ids[i].clone()).collect(),
            gaze: Array2::from_shape_fn((idx.len(), 3), |(b, d)| data.gaze[idx[b]][d]),
            pose: Array2::from_shape_fn((idx.len(), 6), |(b, d)| data.pose[idx[b]][d]),
            side: idx.iter().map(|&i| data.side[i]).collect(),
        }
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pseudo_gaze: f64,
    pub head_pose: f64,
    pub eye_side: f64,
    pub nll_gaze_reg: f64,
    pub nll_gaze_c: f64,
    pub nll_pose_reg: f64,
    pub nll_pose_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.pseudo_gaze += s * o.pseudo_gaze;
        self.head_pose += s * o.head_pose;
        self.eye_side += s * o.eye_side;
        self.nll_gaze_reg += s * o.nll_gaze_reg;
        self.nll_gaze_c += s * o.nll_gaze_c;
        self.nll_pose_reg += s * o.nll_pose_reg;
        self.nll_pose_c += s * o.nll_pose_c;
        self.total += s * o.total;
    }
}

/// Gradients of the weighted total.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub gaze: Array2<f64>,
    pub pose: Array2<f64>,
    pub side: Array2<f64>,
    /// Bank rows in batch order with `d total / dU` for each.
    pub bank_gaze: Option<(Vec<usize>, Array2<f64>)>,
    pub bank_pose: Option<(Vec<usize>, Array2<f64>)>,
}

impl LossGrads {
    pub fn to_aux(&self) -> AuxGrads {
        AuxGrads {
            gaze: self.gaze.mapv(|v| v as f32),
            pose: self.pose.mapv(|v| v as f32),
            side: self.side.mapv(|v| v as f32),
        }
    }
}

fn nonfinite(term: &str, ids: &[String]) -> Error {
    Error::NonFiniteLoss {
        term: term.to_string(),
        ids: ids.join(","),
    }
}

fn unit_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut r in out.rows_mut() {
        let n = r.dot(&r).sqrt().max(losses::COS_EPS);
        r /= n;
        norms.push(n);
    }
    (out, norms)
}

/// Pulls a gradient on `x / |x|` back to `x`: `(I - u u^T) g / |x|`.
fn unit_rows_backward(unit: &Array2<f64>, norms: &[f64], g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for (i, mut r) in out.rows_mut().into_iter().enumerate() {
        let u = unit.row(i);
        let along = u.dot(&r);
        r.scaled_add(-along, &u);
        r /= norms[i];
    }
    out
}

/// Weighted sum of the enabled terms, with per-term breakdown and gradients.
/// NLL terms are attached to the gaze and pose tasks and follow their enablement.
pub fn total_loss(pred: &Predictions, labels: &BatchLabels, banks: Option<&Banks>, cfg: &TrainConfig) -> Result<(LossBreakdown, LossGrads)> {
    let b = labels.ids.len();
    let mut lb = LossBreakdown::default();
    let mut grads = LossGrads {
        gaze: Array2::zeros((b, 3)),
        pose: Array2::zeros((b, 6)),
        side: Array2::zeros((b, 2)),
        bank_gaze: None,
        bank_pose: None,
    };
    let banks = if cfg.nll_enabled {
        Some(banks.ok_or_else(|| Error::Config("NLL enabled but label banks are not initialized".into()))?)
    } else {
        None
    };
    let map_err = |term: &str, e: Error| match e {
        Error::NonFinite(_) => nonfinite(term, &labels.ids),
        other => other,
    };
    let ids: Vec<&str> = labels.ids.iter().map(String::as_str).collect();

    if cfg.has(Task::PseudoGaze) {
        let (l, g) = losses::pseudo_gaze_loss(&labels.gaze, &pred.gaze).map_err(|e| map_err("pseudo_gaze", e))?;
        lb.pseudo_gaze = l;
        lb.total += cfg.w_gaze * l;
        grads.gaze.scaled_add(cfg.w_gaze, &g);
        if let Some(bk) = banks {
            let rows = bk.gaze.rows_of(&ids)?;
            // The cosine loss leaves the output norm free; the bank holds unit vectors.
            let (unit, norms) = unit_rows(&pred.gaze);
            let t = nll::nll_loss(&unit, &bk.gaze, &rows)?;
            lb.nll_gaze_reg = t.l_reg;
            lb.nll_gaze_c = t.l_c;
            lb.total += cfg.w_nll * (t.l_reg + t.l_c);
            grads.gaze.scaled_add(cfg.w_nll, &unit_rows_backward(&unit, &norms, &t.grad_pred));
            grads.bank_gaze = Some((rows, t.grad_u * cfg.w_nll));
        }
    }
    if cfg.has(Task::HeadPose) {
        let (l, g) = losses::head_pose_loss(&labels.pose, &pred.pose).map_err(|e| map_err("head_pose", e))?;
        lb.head_pose = l;
        lb.total += cfg.w_pose * l;
        grads.pose.scaled_add(cfg.w_pose, &g);
        if let Some(bk) = banks {
            let rows = bk.pose.rows_of(&ids)?;
            // Rotations are compared on the circle everywhere else; keep the
            // prediction in the bank's (-pi, pi] range too.
            let mut p = pred.pose.clone();
            for mut r in p.rows_mut() {
                for d in 0..3 {
                    r[d] = wrap_angle(r[d]);
                }
            }
            let t = nll::nll_loss(&p, &bk.pose, &rows)?;
            lb.nll_pose_reg = t.l_reg;
            lb.nll_pose_c = t.l_c;
            lb.total += cfg.w_nll * (t.l_reg + t.l_c);
            grads.pose.scaled_add(cfg.w_nll, &t.grad_pred);
            grads.bank_pose = Some((rows, t.grad_u * cfg.w_nll));
        }
    }
    if cfg.has(Task::EyeSide) {
        let (l, g) = losses::eye_orientation_loss(&labels.side, &pred.side).map_err(|e| map_err("eye_side", e))?;
        lb.eye_side = l;
        lb.total += cfg.w_side * l;
        grads.side.scaled_add(cfg.w_side, &g);
    }
    if !lb.total.is_finite() {
        return Err(nonfinite("total", &labels.ids));
    }
    Ok((lb, grads))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Mean angle between the gaze head output and the pseudo-labels.
    pub pseudo_gaze_error_deg: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GazeModel,
    pub best: GazeModel,
    pub best_epoch: usize,
    pub banks: Option<Banks>,
    pub metrics: Vec<EpochMetrics>,
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 90.0;
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainSet,
    model: GazeModel,
    opt: Sgd,
    banks: Option<Banks>,
}

impl Trainer<'_> {
    fn step(&mut self, idx: &[usize]) -> Result<(LossBreakdown, f64)> {
        let patches: Vec<&Patch> = idx.iter().map(|&i| &self.data.images[i]).collect();
        let x = self.model.input(&patches)?;
        self.model.zero_grad();
        let out = self.model.forward_train(&x)?;
        let bad: Vec<String> = (0..idx.len())
            .filter(|&b| {
                [out.z.row(b), out.gaze.row(b), out.pose.row(b), out.side.row(b)]
                    .iter()
                    .any(|r| r.iter().any(|v| !v.is_finite()))
            })
            .map(|b| self.data.ids[idx[b]].clone())
            .collect();
        if !bad.is_empty() {
            return Err(nonfinite("forward", &bad));
        }
        let pred = Predictions::from_outputs(&out);
        let labels = BatchLabels::gather(self.data, idx);
        let (lb, grads) = total_loss(&pred, &labels, self.banks.as_ref(), self.cfg)?;
        self.model.backward(&grads.to_aux());
        self.opt.step(&mut self.model, &|_| true);
        if let Some(banks) = &mut self.banks {
            let scale = self.cfg.label_lr * idx.len() as f64;
            if let Some((rows, g)) = &grads.bank_gaze {
                banks.gaze.apply_step(rows, g, scale);
            }
            if let Some((rows, g)) = &grads.bank_pose {
                banks.pose.apply_step(rows, g, scale);
            }
        }
        let err: f64 = (0..idx.len())
            .map(|b| angle_deg(pred.gaze.row(b).as_slice().expect("contiguous"), &self.data.gaze[idx[b]]))
            .sum();
        Ok((lb, err))
    }

    fn epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng::rng_for(self.cfg.seed, stream::TRAIN_SHUFFLE, epoch as u64));
        let mut sum = LossBreakdown::default();
        let mut err = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (lb, e) = self.step(chunk)?;
            sum.add_scaled(&lb, chunk.len() as f64);
            err += e;
        }
        let n = self.data.len() as f64;
        let mut loss = LossBreakdown::default();
        loss.add_scaled(&sum, 1.0 / n);
        Ok(EpochMetrics {
            epoch,
            loss,
            pseudo_gaze_error_deg: err / n,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}

/// Trains a fresh model. The model is initialized from `cfg.seed`; with
/// `out_dir`, writes `metrics.jsonl`, `final.ckpt`, and `best.ckpt` there.
pub fn train_mtgls(model_cfg: &ModelConfig, data: &TrainSet, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let model = GazeModel::new(ModelConfig {
        seed: cfg.seed,
        ..model_cfg.clone()
    })?;
    let banks = if cfg.nll_enabled { Some(Banks::init(data, cfg.nll_k)?) } else { None };
    let mut tr = Trainer {
        cfg,
        data,
        model,
        opt: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay),
        banks,
    };

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best = (tr.model.clone(), tr.banks.clone(), 0usize, f64::INFINITY);
    for epoch in 1..=cfg.epochs {
        let m = tr.epoch(epoch)?;
        log::info!(
            "epoch {epoch}: total {:.5} gaze {:.5} pose {:.5} side {:.5} nll {:.5} err {:.2} deg",
            m.loss.total,
            m.loss.pseudo_gaze,
            m.loss.head_pose,
            m.loss.eye_side,
            m.loss.nll_gaze_reg + m.loss.nll_gaze_c + m.loss.nll_pose_reg + m.loss.nll_pose_c,
            m.pseudo_gaze_error_deg
        );
        if let Some(f) = &mut log {
            writeln!(f, "{}", serde_json::to_string(&m)?)?;
        }
        if m.loss.total < best.3 {
            best = (tr.model.clone(), tr.banks.clone(), epoch, m.loss.total);
        }
        metrics.push(m);
    }
    if let Some(dir) = out_dir {
        let bank_refs = |b: &Option<Banks>| -> Vec<LabelBank> { b.iter().flat_map(|b| [b.gaze.clone(), b.pose.clone()]).collect() };
        let final_banks = bank_refs(&tr.banks);
        let prov = |epoch: usize, what: &str| Provenance {
            seed: cfg.seed,
            epoch,
            note: format!("{what} of {} training, {}", cfg.label(), env!("CARGO_PKG_NAME")),
        };
        save_checkpoint(
            &dir.join("final.ckpt"),
            &tr.model,
            &final_banks.iter().collect::<Vec<_>>(),
            &prov(cfg.epochs, "final"),
        )?;
        let best_banks = bank_refs(&best.1);
        save_checkpoint(&dir.join("best.ckpt"), &best.0, &best_banks.iter().collect::<Vec<_>>(), &prov(best.2, "best"))?;
    }
    Ok(TrainOutcome {
        model: tr.model,
        best: best.0,
        best_epoch: best.2,
        banks: tr.banks,
        metrics,
    })
}

/// Strips wall-clock time so runs can be compared.
pub fn comparable(metrics: &[EpochMetrics]) -> Vec<EpochMetrics> {
    metrics.iter().map(|m| EpochMetrics { wall_time_s: 0.0, ..m.clone() }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, CorpusConfig};
    use crate::pseudolabel::{label_sample, Labeler};
    use rand::Rng as _;

    fn tiny_set(n_subjects: usize, per: usize, seed: u64) -> TrainSet {
        let cfg = CorpusConfig {
            n_subjects,
            samples_per_subject: per,
            seed,
            ..Default::default()
        };
        let mut samples = synthesize_corpus(&cfg).unwrap();
        for s in &mut samples {
            let l = label_sample(&Labeler::Oracle, s).unwrap();
            s.set_pseudo(l);
        }
        TrainSet::from_samples(&samples).unwrap()
    }

    fn random_batch(seed: u64, b: usize) -> (Predictions, BatchLabels, Banks) {
        let mut rng = rng::rng_for(seed, 0, 0);
        let ids: Vec<String> = (0..b).map(|i| format!("x{i}")).collect();
        let gaze_l: Vec<[f64; 3]> = (0..b)
            .map(|_| {
                let v = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), -1.0];
                let n = (v[0] * v[0] + v[1] * v[1] + 1.0f64).sqrt();
                [v[0] / n, v[1] / n, v[2] / n]
            })
            .collect();
        let pose_l: Vec<[f64; 6]> = (0..b)
            .map(|_| std::array::from_fn(|d| if d == 5 { rng.gen_range(0.9..1.1) } else { rng.gen_range(-0.3..0.3) }))
            .collect();
        let set = TrainSet {
            ids: ids.clone(),
            images: vec![],
            gaze: gaze_l.clone(),
            pose: pose_l.clone(),
            side: (0..b).map(|i| i % 2).collect(),
        };
        let mut banks = Banks::init(&set, 2.0).unwrap();
        banks.gaze.u.mapv_inplace(|u| u + rng.gen_range(-0.3..0.3));
        banks.pose.u.mapv_inplace(|u| u + rng.gen_range(-0.3..0.3));
        let pred = Predictions {
            gaze: Array2::from_shape_fn((b, 3), |_| rng.gen_range(-0.9..0.9)),
            pose: Array2::from_shape_fn((b, 6), |(_, d)| if d == 5 { rng.gen_range(0.92..1.08) } else { rng.gen_range(-0.25..0.25) }),
            side: Array2::from_shape_fn((b, 2), |_| rng.gen_range(-2.0..2.0)),
        };
        let labels = BatchLabels::gather(&set, &(0..b).collect::<Vec<_>>());
        (pred, labels, banks)
    }

    #[test]
    fn total_is_sum_of_independent_terms() {
        let (pred, labels, banks) = random_batch(1, 6);
        let cfg = TrainConfig::default();
        let (lb, _) = total_loss(&pred, &labels, Some(&banks), &cfg).unwrap();
        let g = losses::pseudo_gaze_loss(&labels.gaze, &pred.gaze).unwrap().0;
        let h = losses::head_pose_loss(&labels.pose, &pred.pose).unwrap().0;
        let s = losses::eye_orientation_loss(&labels.side, &pred.side).unwrap().0;
        let rows: Vec<usize> = (0..6).collect();
        let unit = Array2::from_shape_fn((6, 3), |(i, d)| pred.gaze[[i, d]] / pred.gaze.row(i).iter().map(|v| v * v).sum::<f64>().sqrt());
        let ng = nll::nll_loss(&unit, &banks.gaze, &rows).unwrap();
        let np = nll::nll_loss(&pred.pose, &banks.pose, &rows).unwrap();
        let expect = g + h + s + cfg.w_nll * (ng.l_reg + ng.l_c + np.l_reg + np.l_c);
        assert!((lb.total - expect).abs() < 1e-12);
        assert_eq!(lb.pseudo_gaze, g);
    }

    fn slot(p: &mut Predictions, which: usize, i: usize, d: usize) -> &mut f64 {
        match which {
            0 => &mut p.gaze[[i, d]],
            1 => &mut p.pose[[i, d]],
            _ => &mut p.side[[i, d]],
        }
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let (mut pred, labels, banks) = random_batch(10 + seed, 4);
            let cfg = TrainConfig {
                w_gaze: 0.7,
                w_pose: 1.3,
                w_side: 0.5,
                w_nll: 0.9,
                ..Default::default()
            };
            let (_, grads) = total_loss(&pred, &labels, Some(&banks), &cfg).unwrap();
            let h = 1e-6;
            let f = |p: &Predictions| total_loss(p, &labels, Some(&banks), &cfg).unwrap().0.total;
            for (which, d) in [(0usize, 1usize), (1, 4), (2, 0), (0, 2), (1, 1)] {
                let i = (seed % 4) as usize;
                let orig = *slot(&mut pred, which, i, d);
                *slot(&mut pred, which, i, d) = orig + h;
                let lp = f(&pred);
                *slot(&mut pred, which, i, d) = orig - h;
                let lm = f(&pred);
                *slot(&mut pred, which, i, d) = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = match which {
                    0 => grads.gaze[[i, d]],
                    1 => grads.pose[[i, d]],
                    _ => grads.side[[i, d]],
                };
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
            // Bank logits.
            let (rows, gu) = grads.bank_gaze.clone().unwrap();
            let mut bk = banks.clone();
            let r = rows[1];
            let u0 = bk.gaze.u[[r, 2]];
            bk.gaze.u[[r, 2]] = u0 + h;
            let lp = total_loss(&pred, &labels, Some(&bk), &cfg).unwrap().0.total;
            bk.gaze.u[[r, 2]] = u0 - h;
            let lm = total_loss(&pred, &labels, Some(&bk), &cfg).unwrap().0.total;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - gu[[1, 2]]).abs() / fd.abs().max(1e-6));
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn side_only_perfect_predictions_give_zero_total() {
        let (mut pred, labels, _) = random_batch(2, 4);
        for (i, &y) in labels.side.iter().enumerate() {
            pred.side[[i, y]] = 40.0;
            pred.side[[i, 1 - y]] = -40.0;
        }
        let cfg = TrainConfig {
            tasks: vec![Task::EyeSide],
            nll_enabled: false,
            ..Default::default()
        };
        let (lb, _) = total_loss(&pred, &labels, None, &cfg).unwrap();
        assert!(lb.total < 1e-12);
    }

    #[test]
    fn zero_gaze_weight_leaves_only_nll_gradient() {
        let (pred, labels, banks) = random_batch(3, 4);
        let cfg = TrainConfig {
            w_gaze: 0.0,
            nll_enabled: false,
            ..Default::default()
        };
        let (_, g) = total_loss(&pred, &labels, None, &cfg).unwrap();
        assert!(g.gaze.iter().all(|&v| v == 0.0));
        let cfg = TrainConfig {
            w_gaze: 0.0,
            ..Default::default()
        };
        let (_, g) = total_loss(&pred, &labels, Some(&banks), &cfg).unwrap();
        assert!(g.gaze.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn nll_without_banks_is_an_error() {
        let (pred, labels, _) = random_batch(4, 2);
        assert!(matches!(total_loss(&pred, &labels, None, &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn disabled_task_head_gets_no_gradient() {
        let data = tiny_set(1, 8, 3);
        let mut model = GazeModel::new(ModelConfig::default()).unwrap();
        let cfg = TrainConfig {
            tasks: vec![Task::PseudoGaze, Task::EyeSide],
            ..Default::default()
        };
        let banks = Banks::init(&data, 10.0).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let x = model.input(&data.images.iter().collect::<Vec<_>>()).unwrap();
        model.zero_grad();
        let out = model.forward_train(&x).unwrap();
        let (_, grads) = total_loss(&Predictions::from_outputs(&out), &BatchLabels::gather(&data, &idx), Some(&banks), &cfg).unwrap();
        model.backward(&grads.to_aux());
        model.visit_params(&mut |n, p| {
            let norm: f32 = p.grad.iter().map(|g| g.abs()).sum();
            if n.starts_with("head.pose") {
                assert_eq!(norm, 0.0, "{n}");
            } else if n.ends_with("weight") {
                assert!(norm > 0.0, "{n} received no gradient");
            }
        });
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = tiny_set(1, 4, 1);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 9,
            ..Default::default()
        };
        let out = train_mtgls(&ModelConfig::default(), &data, &cfg, None).unwrap();
        let init = GazeModel::new(ModelConfig { seed: 9, ..Default::default() }).unwrap();
        assert_eq!(out.model.digest(""), init.digest(""));
        assert_eq!(out.best.digest(""), init.digest(""));
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn nan_image_aborts_naming_the_sample() {
        let mut data = tiny_set(1, 6, 2);
        data.images[3].data_mut()[100] = f32::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        match train_mtgls(&ModelConfig::default(), &data, &cfg, None) {
            Err(Error::NonFiniteLoss { ids, .. }) => assert_eq!(ids, data.ids[3]),
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }

    #[test]
    fn bank_moves_after_an_epoch_and_runs_repeat() {
        let data = tiny_set(2, 8, 4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let a = train_mtgls(&ModelConfig::default(), &data, &cfg, None).unwrap();
        let b = train_mtgls(&ModelConfig::default(), &data, &cfg, None).unwrap();
        assert_eq!(comparable(&a.metrics), comparable(&b.metrics));
        assert_eq!(a.model.digest(""), b.model.digest(""));
        let init = Banks::init(&data, cfg.nll_k).unwrap();
        let banks = a.banks.unwrap();
        assert!(banks.gaze.u != init.gaze.u);
        assert!(banks.pose.u != init.pose.u);
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_set(1, 8, 5);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out = train_mtgls(&ModelConfig::default(), &data, &cfg, Some(dir.path())).unwrap();
        let log = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        let first: EpochMetrics = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first.epoch, 1);
        let ck = crate::checkpoint::load_checkpoint(&dir.path().join("final.ckpt"), Some(&ModelConfig::default())).unwrap();
        assert_eq!(ck.model.digest(""), out.model.digest(""));
        assert_eq!(ck.banks.len(), 2);
        assert!(dir.path().join("best.ckpt").exists());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            tasks: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(TrainConfig::default().label(), "gaze+pose+side+nll");
    }
}
