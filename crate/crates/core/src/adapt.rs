//! Downstream adaptation and evaluation: linear probing, fine-tuning,
//! weighted k-NN, and per-person calibration.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::EyeSample;
use crate::error::{Error, Result};
use crate::geometry::{angular_error_deg_raw, flip_labels, GazeVector, Side};
use crate::losses;
use crate::model::{GazeModel, HeadKind};
use crate::nn::Mlp;
use crate::optim::Sgd;
use crate::patch::Patch;
use crate::rng::{self, hash_str, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMode {
    Lp,
    Ft,
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Early stopping: epochs without validation improvement before stopping.
    pub patience: usize,
    /// Fraction of the training samples held out for early stopping.
    pub val_fraction: f64,
    pub augment: bool,
    pub flip_prob: f64,
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    pub k: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: AdaptMode::Lp,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            patience: 5,
            val_fraction: 0.1,
            augment: true,
            flip_prob: 0.5,
            crop_scale: (0.8, 1.0),
            k: 10,
            tau: 0.07,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("adapt lr/weight_decay must be non-negative and momentum in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.k == 0 {
            return Err(Error::Config("batch_size and k must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("val_fraction must be in [0, 1) and flip_prob in [0, 1]".into()));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// Downstream targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Gaze(Vec<[f64; 3]>),
    Zone(Vec<usize>),
}

impl Targets {
    fn kind(&self) -> HeadKind {
        match self {
            Targets::Gaze(_) => HeadKind::Gaze3d,
            Targets::Zone(_) => HeadKind::Zone,
        }
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Gaze(g) => Targets::Gaze(idx.iter().map(|&i| g[i]).collect()),
            Targets::Zone(z) => Targets::Zone(idx.iter().map(|&i| z[i]).collect()),
        }
    }
}

/// Images with ground-truth targets for one downstream head.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub subjects: Vec<String>,
    pub sides: Vec<Side>,
    pub images: Vec<Patch>,
    pub targets: Targets,
}

impl LabeledSet {
    /// Errors name the first sample lacking the head's ground-truth field.
    pub fn from_samples(samples: &[EyeSample], head: HeadKind) -> Result<Self> {
        let mut gaze = Vec::new();
        let mut zone = Vec::new();
        for s in samples {
            match head {
                HeadKind::Gaze3d => gaze.push(
                    s.gt_gaze
                        .ok_or_else(|| Error::MissingField {
                            id: s.id.clone(),
                            field: "gt_gaze",
                        })?
                        .as_array(),
                ),
                HeadKind::Zone => zone.push(s.gt_zone.ok_or_else(|| Error::MissingField {
                    id: s.id.clone(),
                    field: "gt_zone",
                })?),
            }
        }
        Ok(LabeledSet {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            subjects: samples.iter().map(|s| s.subject.clone()).collect(),
            sides: samples.iter().map(|s| s.side).collect(),
            images: samples.iter().map(|s| s.load_image()).collect::<Result<_>>()?,
            targets: match head {
                HeadKind::Gaze3d => Targets::Gaze(gaze),
                HeadKind::Zone => Targets::Zone(zone),
            },
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn head(&self) -> HeadKind {
        self.targets.kind()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
            sides: idx.iter().map(|&i| self.sides[i]).collect(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            targets: self.targets.subset(idx),
        }
    }
}

/// Penultimate-layer features keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub z: Array2<f32>,
}

const EMBED_BATCH: usize = 64;

fn embed_all(model: &GazeModel, images: &[Patch]) -> Result<Array2<f32>> {
    let mut z = Array2::zeros((images.len(), model.embedding_dim()));
    for (c, chunk) in images.chunks(EMBED_BATCH).enumerate() {
        let x = model.input(&chunk.iter().collect::<Vec<_>>())?;
        z.slice_mut(s![c * EMBED_BATCH..c * EMBED_BATCH + chunk.len(), ..]).assign(&model.embed(&x)?);
    }
    Ok(z)
}

pub fn extract_features(model: &GazeModel, set: &LabeledSet) -> Result<FeatureTable> {
    Ok(FeatureTable {
        ids: set.ids.clone(),
        z: embed_all(model, &set.images)?,
    })
}

/// Random resized crop, then a mirror with probability `flip_prob` (gaze
/// labels transformed by `flip_labels`). Returns the new image and gaze.
pub fn augment(img: &Patch, gaze: Option<[f64; 3]>, cfg: &AdaptConfig, allow_flip: bool, rng: &mut Rng) -> Result<(Patch, Option<[f64; 3]>)> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (lo, hi) = cfg.crop_scale;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let (cw, ch) = (w * scale.sqrt(), h * scale.sqrt());
    let x0 = if w > cw { rng.gen_range(0.0..=w - cw) } else { 0.0 };
    let y0 = if h > ch { rng.gen_range(0.0..=h - ch) } else { 0.0 };
    let mut out = img.resized_crop(x0, y0, cw, ch);
    let mut g = gaze;
    if allow_flip && rng.gen_bool(cfg.flip_prob) {
        out = out.mirrored();
        if let Some(v) = gaze {
            let gv = GazeVector::new(v)?;
            let (flipped, _, _) = flip_labels(Some(gv), None, Side::L);
            let flipped = flipped.expect("gaze present");
            let (back, _, _) = flip_labels(Some(flipped), None, Side::R);
            if back.expect("gaze present") != gv {
                return Err(Error::Geometry("flip_labels is not an involution on this label".into()));
            }
            g = Some(flipped.as_array());
        }
    }
    Ok((out, g))
}

/// Per-head loss on a batch of probe outputs; returns loss and output gradient.
fn probe_loss(out: &Array2<f32>, targets: &Targets, idx: &[usize], flipped: Option<&[[f64; 3]]>) -> Result<(f64, Array2<f32>)> {
    let o = out.mapv(f64::from);
    let (l, g) = match targets {
        Targets::Gaze(gz) => {
            let t = Array2::from_shape_fn((idx.len(), 3), |(b, d)| flipped.map(|f| f[b][d]).unwrap_or(gz[idx[b]][d]));
            losses::pseudo_gaze_loss(&t, &o)?
        }
        Targets::Zone(z) => {
            let labels: Vec<usize> = idx.iter().map(|&i| z[i]).collect();
            losses::cross_entropy(&labels, &o)?
        }
    };
    if !l.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "probe".into(),
            ids: String::new(),
        });
    }
    Ok((l, g.mapv(|v| v as f32)))
}

/// Summary metrics of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub task: HeadKind,
    pub n: usize,
    /// Gaze: mean angular error in degrees. Zone: top-1 error rate.
    pub mean: f64,
    pub std: f64,
    pub accuracy: Option<f64>,
    pub per_subject: Vec<SubjectMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Per-sample error: angle in degrees for gaze, 0/1 miss for zone.
fn sample_errors(outputs: &Array2<f32>, targets: &Targets) -> Result<Vec<f64>> {
    match targets {
        Targets::Gaze(g) => (0..outputs.nrows())
            .map(|i| {
                let p = [outputs[[i, 0]] as f64, outputs[[i, 1]] as f64, outputs[[i, 2]] as f64];
                angular_error_deg_raw(&p, &g[i]).or(Ok(90.0))
            })
            .collect(),
        Targets::Zone(z) => Ok((0..outputs.nrows())
            .map(|i| {
                let row = outputs.row(i);
                let best = argmax_first(row.iter().map(|&v| v as f64));
                if best == z[i] {
                    0.0
                } else {
                    1.0
                }
            })
            .collect()),
    }
}

fn argmax_first(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn summarize(task: HeadKind, errors: &[f64], subjects: &[String]) -> Result<EvalMetrics> {
    if errors.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let (mean, std) = mean_std(errors);
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (e, s) in errors.iter().zip(subjects) {
        by.entry(s.as_str()).or_default().push(*e);
    }
    let per_subject = by
        .into_iter()
        .map(|(s, v)| {
            let (m, sd) = mean_std(&v);
            SubjectMetrics {
                subject: s.to_string(),
                n: v.len(),
                mean: m,
                std: sd,
            }
        })
        .collect();
    Ok(EvalMetrics {
        task,
        n: errors.len(),
        mean,
        std,
        accuracy: (task == HeadKind::Zone).then_some(1.0 - mean),
        per_subject,
    })
}

/// Metrics of precomputed head outputs against targets.
pub fn evaluate_outputs(outputs: &Array2<f32>, set: &LabeledSet) -> Result<EvalMetrics> {
    summarize(set.head(), &sample_errors(outputs, &set.targets)?, &set.subjects)
}

/// Runs the attached downstream head over `set` and scores it.
pub fn evaluate(model: &GazeModel, set: &LabeledSet) -> Result<EvalMetrics> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let head = model.probe(set.head())?;
    let z = embed_all(model, &set.images)?;
    evaluate_outputs(&head.forward(&z), set)
}

/// Outcome of an adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: GazeModel,
    /// Mean training loss per completed epoch.
    pub train_loss: Vec<f64>,
    /// Validation metric per completed epoch, when a validation split exists.
    pub val_metric: Vec<f64>,
    pub best_epoch: usize,
}

fn split_val(n: usize, cfg: &AdaptConfig) -> (Vec<usize>, Vec<usize>) {
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    if n_val == 0 || n < 20 {
        return ((0..n).collect(), Vec::new());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::rng_for(cfg.seed, stream::AUGMENT, u64::MAX));
    let (val, train) = idx.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn metric_of(head: &Mlp, z: &Array2<f32>, targets: &Targets) -> Result<f64> {
    let e = sample_errors(&head.forward(z), targets)?;
    Ok(mean_std(&e).0)
}

/// Trains a probe head on fixed feature rows. No augmentation; used by
/// calibration and by linear probing when augmentation is off.
pub fn fit_probe_on_features(
    head: &mut Mlp,
    z: &Array2<f32>,
    targets: &Targets,
    val: Option<(&Array2<f32>, &Targets)>,
    cfg: &AdaptConfig,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut model_like = ProbeOnly { head: head.clone() };
    let res = model_like.fit(z, targets, val, cfg)?;
    *head = model_like.head;
    Ok(res)
}

struct ProbeOnly {
    head: Mlp,
}

impl ProbeOnly {
    fn fit(&mut self, z: &Array2<f32>, targets: &Targets, val: Option<(&Array2<f32>, &Targets)>, cfg: &AdaptConfig) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let n = z.nrows();
        let mut opt = MlpSgd::new(cfg);
        let mut losses_hist = Vec::new();
        let mut val_hist = Vec::new();
        let mut best = (self.head.clone(), f64::INFINITY, 0usize);
        if let Some((vz, vt)) = val {
            best.1 = metric_of(&self.head, vz, vt)?;
        }
        let mut since = 0;
        for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng::rng_for(cfg.seed, stream::TRAIN_SHUFFLE, epoch as u64));
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let zb = z.select(Axis(0), chunk);
                let out = self.head.forward_train(&zb);
                let (l, g) = probe_loss(&out, targets, chunk, None)?;
                zero_mlp(&mut self.head);
                self.head.backward(&g);
                opt.step(&mut self.head);
                total += l * chunk.len() as f64;
            }
            losses_hist.push(total / n as f64);
            if let Some((vz, vt)) = val {
                let m = metric_of(&self.head, vz, vt)?;
                val_hist.push(m);
                if m < best.1 {
                    best = (self.head.clone(), m, epoch);
                    since = 0;
                } else {
                    since += 1;
                    if since >= cfg.patience {
                        break;
                    }
                }
            }
        }
        let best_epoch = if val.is_some() {
            self.head = best.0;
            best.2
        } else {
            losses_hist.len()
        };
        Ok((losses_hist, val_hist, best_epoch))
    }
}

fn zero_mlp(m: &mut Mlp) {
    m.visit_mut("", &mut |_, p| p.zero_grad());
}

/// SGD for a standalone head, same update rule as [`Sgd`].
struct MlpSgd {
    lr: f32,
    mu: f32,
    wd: f32,
    v: BTreeMap<String, Array2<f32>>,
}

impl MlpSgd {
    fn new(cfg: &AdaptConfig) -> Self {
        MlpSgd {
            lr: cfg.lr as f32,
            mu: cfg.momentum as f32,
            wd: cfg.weight_decay as f32,
            v: BTreeMap::new(),
        }
    }

    fn step(&mut self, m: &mut Mlp) {
        let (lr, mu, wd) = (self.lr, self.mu, self.wd);
        let vs = &mut self.v;
        m.visit_mut("", &mut |name, p| {
            let v = vs.entry(name.to_string()).or_insert_with(|| Array2::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value).and(v).and(&p.grad).for_each(|w, v, &g| {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            });
        });
    }
}

/// Augmented images and, for gaze targets, their transformed labels.
type AugmentedBatch = (Vec<Patch>, Option<Vec<[f64; 3]>>);

fn augmented_batch(set: &LabeledSet, idx: &[usize], cfg: &AdaptConfig, epoch: usize) -> Result<AugmentedBatch> {
    let allow_flip = set.head() == HeadKind::Gaze3d;
    let mut imgs = Vec::with_capacity(idx.len());
    let mut gz = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut rng = rng::rng_for(cfg.seed, stream::AUGMENT, ((epoch as u64) << 32) ^ hash_str(&set.ids[i]));
        let g = match &set.targets {
            Targets::Gaze(g) => Some(g[i]),
            Targets::Zone(_) => None,
        };
        let (p, g2) = augment(&set.images[i], g, cfg, allow_flip, &mut rng)?;
        imgs.push(p);
        if let Some(g2) = g2 {
            gz.push(g2);
        }
    }
    Ok((imgs, (set.head() == HeadKind::Gaze3d).then_some(gz)))
}

/// Linear probe without augmentation on features already extracted from
/// `model` for `set`, row for row.
pub fn linear_probe_on_features(model: &GazeModel, features: &FeatureTable, set: &LabeledSet, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Empty("probe training set"));
    }
    if features.ids != set.ids {
        return Err(Error::Shape(format!(
            "{} feature rows do not match the {} probe samples",
            features.ids.len(),
            set.len()
        )));
    }
    let kind = set.head();
    let mut model = model.clone();
    model.attach_head(kind, cfg.seed);
    let (tr, va) = split_val(set.len(), cfg);
    let val = (!va.is_empty()).then(|| (features.z.select(Axis(0), &va), set.targets.subset(&va)));
    let mut head = model.probe(kind)?.clone();
    let (train_loss, val_metric, best_epoch) = fit_probe_on_features(
        &mut head,
        &features.z.select(Axis(0), &tr),
        &set.targets.subset(&tr),
        val.as_ref().map(|(z, t)| (z, t)),
        cfg,
    )?;
    *model.probe_mut(kind)? = head;
    Ok(AdaptOutcome {
        model,
        train_loss,
        val_metric,
        best_epoch,
    })
}

/// Trains only the probe head on frozen backbone features. The head is
/// (re)initialized from `cfg.seed`. The zone head is never flipped: a mirror
/// changes the zone only for yaw-symmetric grids.
pub fn linear_probe(model: &GazeModel, set: &LabeledSet, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Empty("probe training set"));
    }
    if !cfg.augment {
        return linear_probe_on_features(model, &extract_features(model, set)?, set, cfg);
    }
    let kind = set.head();
    let mut model = model.clone();
    model.attach_head(kind, cfg.seed);
    let (tr, va) = split_val(set.len(), cfg);
    let train = set.subset(&tr);
    let val = (!va.is_empty()).then(|| set.subset(&va));
    let val_z = val.as_ref().map(|v| embed_all(&model, &v.images)).transpose()?;

    let mut opt = MlpSgd::new(cfg);
    let mut train_loss = Vec::new();
    let mut val_metric = Vec::new();
    let mut best = (model.probe(kind)?.clone(), f64::INFINITY, 0usize);
    if let (Some(v), Some(vz)) = (&val, &val_z) {
        best.1 = metric_of(model.probe(kind)?, vz, &v.targets)?;
    }
    let mut since = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::rng_for(cfg.seed, stream::TRAIN_SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (imgs, gz) = augmented_batch(&train, chunk, cfg, epoch)?;
            let z = model.embed(&model.input(&imgs.iter().collect::<Vec<_>>())?)?;
            let head = model.probe_mut(kind)?;
            let out = head.forward_train(&z);
            let (l, g) = probe_loss(&out, &train.targets, chunk, gz.as_deref())?;
            zero_mlp(head);
            head.backward(&g);
            opt.step(head);
            total += l * chunk.len() as f64;
        }
        train_loss.push(total / train.len() as f64);
        if let (Some(v), Some(vz)) = (&val, &val_z) {
            let m = metric_of(model.probe(kind)?, vz, &v.targets)?;
            val_metric.push(m);
            if m < best.1 {
                best = (model.probe(kind)?.clone(), m, epoch);
                since = 0;
            } else {
                since += 1;
                if since >= cfg.patience {
                    break;
                }
            }
        }
    }
    let best_epoch = if val.is_some() {
        *model.probe_mut(kind)? = best.0;
        best.2
    } else {
        train_loss.len()
    };
    Ok(AdaptOutcome {
        model,
        train_loss,
        val_metric,
        best_epoch,
    })
}

/// Trains the probe head and the backbone together.
pub fn fine_tune(model: &GazeModel, set: &LabeledSet, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Empty("fine-tuning set"));
    }
    let kind = set.head();
    let mut model = model.clone();
    model.attach_head(kind, cfg.seed);
    let (tr, va) = split_val(set.len(), cfg);
    let train = set.subset(&tr);
    let val = (!va.is_empty()).then(|| set.subset(&va));
    let prefix = format!("probe.{}.", kind.name());
    let trainable = |n: &str| n.starts_with("backbone.") || n.starts_with(prefix.as_str());
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut train_loss = Vec::new();
    let mut val_metric = Vec::new();
    let mut best = (model.clone(), f64::INFINITY, 0usize);
    if let Some(v) = &val {
        best.1 = evaluate(&model, v)?.mean;
    }
    let mut since = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::rng_for(cfg.seed, stream::TRAIN_SHUFFLE, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (imgs, gz) = if cfg.augment {
                augmented_batch(&train, chunk, cfg, epoch)?
            } else {
                (chunk.iter().map(|&i| train.images[i].clone()).collect(), None)
            };
            let x = model.input(&imgs.iter().collect::<Vec<_>>())?;
            model.zero_grad();
            let z = model.embed_train(&x)?;
            let head = model.probe_mut(kind)?;
            let out = head.forward_train(&z);
            let (l, g) = probe_loss(&out, &train.targets, chunk, gz.as_deref())?;
            let dz = head.backward(&g);
            model.backward_embedding(&dz);
            opt.step(&mut model, &trainable);
            total += l * chunk.len() as f64;
        }
        train_loss.push(total / train.len() as f64);
        if let Some(v) = &val {
            let m = evaluate(&model, v)?.mean;
            val_metric.push(m);
            if m < best.1 {
                best = (model.clone(), m, epoch);
                since = 0;
            } else {
                since += 1;
                if since >= cfg.patience {
                    break;
                }
            }
        }
    }
    let best_epoch = if val.is_some() {
        model = best.0;
        best.2
    } else {
        train_loss.len()
    };
    Ok(AdaptOutcome {
        model,
        train_loss,
        val_metric,
        best_epoch,
    })
}

/// Weighted k-NN vote. Neighbors are the top `k` training rows by cosine
/// similarity (ties: lower row index first); each adds `exp(cos / tau)` to
/// its class. Class ties go to the lowest class index.
pub fn knn_classify(train: &Array2<f32>, labels: &[usize], query: &Array2<f32>, k: usize, tau: f64) -> Result<Vec<usize>> {
    if train.nrows() == 0 {
        return Err(Error::Empty("k-NN training set"));
    }
    if labels.len() != train.nrows() || train.ncols() != query.ncols() {
        return Err(Error::Shape(format!(
            "k-NN: {} labels, train {:?}, query {:?}",
            labels.len(),
            train.dim(),
            query.dim()
        )));
    }
    if k == 0 || k > train.nrows() {
        return Err(Error::Config(format!("k = {k} with {} training rows", train.nrows())));
    }
    let normed = |a: &Array2<f32>| -> Array2<f64> {
        let mut out = a.mapv(f64::from);
        for mut r in out.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n > 0.0 {
                r /= n;
            }
        }
        out
    };
    let t = normed(train);
    let q = normed(query);
    let sims = q.dot(&t.t());
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(q.nrows());
    for row in sims.rows() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        let cmp = |a: &usize, b: &usize| row[*b].partial_cmp(&row[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        let mut score = vec![0.0f64; n_classes];
        for &j in &order {
            score[labels[j]] += (row[j] / tau).exp();
        }
        out.push(argmax_first(score.into_iter()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationKind {
    PersonSpecific,
    PersonIndependent,
    FewShot,
}

impl CalibrationKind {
    pub fn name(self) -> &'static str {
        match self {
            CalibrationKind::PersonSpecific => "person-specific",
            CalibrationKind::PersonIndependent => "person-independent",
            CalibrationKind::FewShot => "few-shot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationProtocol {
    pub kinds: Vec<CalibrationKind>,
    pub k_samples: Vec<usize>,
    pub repeats: usize,
    /// Few-shot test set: the last this-many samples of each subject.
    pub test_per_subject: usize,
    /// Start each calibration from a head probed on the other subjects.
    /// Without it, each cell probes a fresh head on the k samples alone.
    pub from_base: bool,
    /// With `from_base`, adapt only the head's output layer on the k
    /// samples and keep its hidden layers from the base probe.
    pub output_layer_only: bool,
    /// Subjects to calibrate for; empty means all.
    pub subjects: Vec<String>,
}

impl Default for CalibrationProtocol {
    fn default() -> Self {
        CalibrationProtocol {
            kinds: vec![CalibrationKind::PersonSpecific, CalibrationKind::PersonIndependent],
            k_samples: vec![1, 4, 16, 64, 128, 256],
            repeats: 10,
            test_per_subject: 500,
            from_base: true,
            output_layer_only: true,
            subjects: Vec::new(),
        }
    }
}

/// One row of the error-versus-k table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub kind: CalibrationKind,
    pub k: usize,
    /// Mean over repeats of the subject-averaged test error.
    pub mean: f64,
    /// Standard deviation over repeats.
    pub std: f64,
    pub repeats: usize,
}

struct SubjectSplit {
    /// Samples eligible for calibration draws.
    pool: Vec<usize>,
    /// Fixed test set (few-shot only).
    fixed_test: Vec<usize>,
    all: Vec<usize>,
}

fn subject_splits(set: &LabeledSet, kind: CalibrationKind, proto: &CalibrationProtocol) -> BTreeMap<String, SubjectSplit> {
    let mut by: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in set.subjects.iter().enumerate() {
        by.entry(s.clone()).or_default().push(i);
    }
    by.into_iter()
        .map(|(s, all)| {
            let split = if kind == CalibrationKind::FewShot {
                let cut = all.len().saturating_sub(proto.test_per_subject);
                SubjectSplit {
                    pool: all[..cut].to_vec(),
                    fixed_test: all[cut..].to_vec(),
                    all,
                }
            } else {
                SubjectSplit {
                    pool: all.clone(),
                    fixed_test: Vec::new(),
                    all,
                }
            };
            (s, split)
        })
        .collect()
}

/// Error-versus-k table for each protocol kind. Calibration adapts the gaze
/// probe head only, on cached features; the backbone is never updated.
pub fn calibrate(model: &GazeModel, set: &LabeledSet, proto: &CalibrationProtocol, cfg: &AdaptConfig) -> Result<Vec<CalibrationRow>> {
    cfg.validate()?;
    if set.head() != HeadKind::Gaze3d {
        return Err(Error::Config("calibration needs gaze targets".into()));
    }
    if proto.k_samples.contains(&0) || proto.repeats == 0 {
        return Err(Error::Config("k_samples and repeats must be positive".into()));
    }
    let k_max = proto.k_samples.iter().copied().max().unwrap_or(0);
    let z = embed_all(model, &set.images)?;
    let targets = &set.targets;
    let all_subjects: BTreeSet<String> = set.subjects.iter().cloned().collect();
    let targets_subj: Vec<String> = if proto.subjects.is_empty() {
        all_subjects.iter().cloned().collect()
    } else {
        proto.subjects.clone()
    };
    if targets_subj.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let mut base_model = model.clone();
    base_model.attach_head(HeadKind::Gaze3d, cfg.seed);
    let fresh = base_model.probe(HeadKind::Gaze3d)?.clone();
    let cell_cfg = AdaptConfig {
        val_fraction: 0.0,
        ..cfg.clone()
    };

    let mut rows = Vec::new();
    for &kind in &proto.kinds {
        let splits = subject_splits(set, kind, proto);
        for s in &targets_subj {
            let sp = splits.get(s).ok_or_else(|| Error::Insufficient(format!("subject {s} has no samples")))?;
            let need_test = if kind == CalibrationKind::FewShot { proto.test_per_subject } else { 1 };
            if kind != CalibrationKind::PersonIndependent && sp.pool.len() < k_max + if kind == CalibrationKind::FewShot { 0 } else { 1 } {
                return Err(Error::Insufficient(format!(
                    "subject {s}: {} calibration candidates for k = {k_max}",
                    sp.pool.len()
                )));
            }
            if kind == CalibrationKind::FewShot && sp.fixed_test.len() < need_test {
                return Err(Error::Insufficient(format!(
                    "subject {s}: {} test samples, protocol needs {need_test}",
                    sp.fixed_test.len()
                )));
            }
        }
        let pooled: Vec<usize> = splits.values().flat_map(|sp| sp.pool.iter().copied()).collect();
        if pooled.len() < k_max {
            return Err(Error::Insufficient(format!("{} pooled calibration candidates for k = {k_max}", pooled.len())));
        }

        // Base head per target subject, probed on every other subject's pool.
        let mut bases: BTreeMap<&str, Mlp> = BTreeMap::new();
        for s in &targets_subj {
            let head = if proto.from_base {
                let others: Vec<usize> = splits.iter().filter(|(o, _)| *o != s).flat_map(|(_, sp)| sp.pool.iter().copied()).collect();
                if others.is_empty() {
                    return Err(Error::Insufficient("base probe needs at least two subjects".into()));
                }
                let (tr, va) = split_val(others.len(), cfg);
                let tr_idx: Vec<usize> = tr.iter().map(|&i| others[i]).collect();
                let va_idx: Vec<usize> = va.iter().map(|&i| others[i]).collect();
                let mut head = fresh.clone();
                let vz = z.select(Axis(0), &va_idx);
                let vt = targets.subset(&va_idx);
                let val = (!va_idx.is_empty()).then_some((&vz, &vt));
                fit_probe_on_features(&mut head, &z.select(Axis(0), &tr_idx), &targets.subset(&tr_idx), val, cfg)?;
                head
            } else {
                fresh.clone()
            };
            bases.insert(s.as_str(), head);
        }

        // Inputs to each base head's output layer.
        let hidden: Option<BTreeMap<&str, Array2<f32>>> =
            (proto.from_base && proto.output_layer_only).then(|| bases.iter().map(|(s, b)| (*s, b.penultimate(&z))).collect());

        for &k in &proto.k_samples {
            let mut per_repeat = Vec::with_capacity(proto.repeats);
            for r in 0..proto.repeats {
                let mut subj_err = Vec::with_capacity(targets_subj.len());
                for s in &targets_subj {
                    let sp = &splits[s];
                    let cell = hash_str(&format!("{}|{k}|{r}|{s}", kind.name()));
                    let mut rng = rng::rng_for(cfg.seed, stream::CALIBRATION, cell);
                    let source = if kind == CalibrationKind::PersonIndependent { &pooled } else { &sp.pool };
                    let drawn: Vec<usize> = index::sample(&mut rng, source.len(), k).into_iter().map(|i| source[i]).collect();
                    let test: Vec<usize> = if kind == CalibrationKind::FewShot {
                        sp.fixed_test.clone()
                    } else {
                        let d: BTreeSet<usize> = drawn.iter().copied().collect();
                        sp.all.iter().copied().filter(|i| !d.contains(i)).collect()
                    };
                    if test.is_empty() {
                        return Err(Error::Insufficient(format!("subject {s}: no test samples left at k = {k}")));
                    }
                    let ccfg = AdaptConfig {
                        seed: rng::derive_seed(cfg.seed, stream::CALIBRATION, cell),
                        ..cell_cfg.clone()
                    };
                    let (mut head, feats) = match &hidden {
                        Some(h) => (bases[s.as_str()].output_layer(), &h[s.as_str()]),
                        None => (bases[s.as_str()].clone(), &z),
                    };
                    fit_probe_on_features(&mut head, &feats.select(Axis(0), &drawn), &targets.subset(&drawn), None, &ccfg)?;
                    subj_err.push(metric_of(&head, &feats.select(Axis(0), &test), &targets.subset(&test))?);
                }
                per_repeat.push(mean_std(&subj_err).0);
            }
            let (mean, std) = mean_std(&per_repeat);
            rows.push(CalibrationRow {
                kind,
                k,
                mean,
                std,
                repeats: proto.repeats,
            });
        }
    }
    Ok(rows)
}
