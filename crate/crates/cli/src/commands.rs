use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use gazerep::adapt::{self, AdaptOutcome, EvalMetrics, LabeledSet, Targets};
use gazerep::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use gazerep::corpus::{derive_zone_labels, generate_corpus, EyeSample};
use gazerep::manifest::{load_manifest, write_manifest, ManifestFilter, SplitPart};
use gazerep::model::{HeadKind, ModelConfig};
use gazerep::pseudolabel::{inject_noise, label_sample, Labeler};
use gazerep::trainer::{train_mtgls, Task, TrainSet};
use gazerep::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{rundir, AdaptArgs, Common, HeadArg};

type Result<T> = std::result::Result<T, Error>;

/// Resolves the run config: file, then `extra` (flag-derived) overrides, then
/// `--set` overrides. Also returns the top-level sections that were given.
fn resolve(common: &Common, extra: Vec<String>) -> Result<(RunConfig, BTreeSet<String>)> {
    if common.threads > 1 {
        log::warn!("--threads {} requested; computation runs single-threaded", common.threads);
    }
    let mut overrides = extra;
    overrides.extend(common.overrides.iter().cloned());
    let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    let mut given: BTreeSet<String> = overrides.iter().filter_map(|o| o.split('.').next().map(str::to_string)).collect();
    if let Some(p) = &common.config {
        let table: toml::Table = std::fs::read_to_string(p)?.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        given.extend(table.keys().cloned());
    }
    Ok((cfg, given))
}

fn seed_override(common: &Common, key: &str) -> Vec<String> {
    common.seed.map(|s| vec![format!("{key}={s}")]).unwrap_or_default()
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, v)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Writes `summary.json` and returns its one-line form for stdout.
fn finish(dir: &Path, summary: serde_json::Value) -> Result<String> {
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary.to_string())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn gen_data(common: &Common, subjects: Option<usize>, per_subject: Option<usize>) -> Result<String> {
    let mut extra = seed_override(common, "corpus.seed");
    extra.extend(subjects.map(|n| format!("corpus.n_subjects={n}")));
    extra.extend(per_subject.map(|n| format!("corpus.samples_per_subject={n}")));
    let (cfg, _) = resolve(common, extra)?;
    let dir = rundir::create(&rundir::out_root(common.out.as_deref()), "gen-data", &cfg)?;
    let (manifest, mut samples) = generate_corpus(&cfg.corpus, &dir)?;
    derive_zone_labels(&mut samples, &cfg.corpus.zone_grid(cfg.model.zones)?)?;
    write_manifest(&manifest, &samples)?;
    finish(
        &dir,
        json!({ "command": "gen-data", "run_dir": path_str(&dir), "manifest": path_str(&manifest), "samples": samples.len() }),
    )
}

pub struct NoiseFlags {
    pub gaze_sigma_deg: Option<f64>,
    pub pose_sigma_rad: Option<f64>,
    pub corrupt_fraction: Option<f64>,
    pub corrupt_deg: Option<f64>,
}

pub fn pseudo_label(common: &Common, manifest: &Path, labeler: Option<String>, noise: NoiseFlags) -> Result<String> {
    let mut extra = seed_override(common, "pseudo_label.seed");
    extra.extend(labeler.map(|l| format!("pseudo_label.labeler=\"{l}\"")));
    extra.extend(noise.gaze_sigma_deg.map(|v| format!("pseudo_label.noise.gaze_sigma_deg={v:?}")));
    extra.extend(noise.pose_sigma_rad.map(|v| format!("pseudo_label.noise.pose_sigma_rad={v:?}")));
    extra.extend(noise.corrupt_fraction.map(|v| format!("pseudo_label.noise.corrupt_fraction={v:?}")));
    extra.extend(noise.corrupt_deg.map(|v| format!("pseudo_label.noise.large_corrupt_deg={v:?}")));
    let (cfg, _) = resolve(common, extra)?;
    let pl = &cfg.pseudo_label;
    let labeler = Labeler::parse(&pl.labeler, pl.radius_px).ok_or_else(|| Error::Config(format!("unknown labeler `{}`", pl.labeler)))?;
    let samples = load_manifest(manifest, &ManifestFilter::default())?;
    let dir = rundir::create(&rundir::out_root(common.out.as_deref()), "pseudo-label", &cfg)?;

    let mut kept: Vec<EyeSample> = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut dropped = Vec::new();
    for s in samples {
        match label_sample(&labeler, &s) {
            Ok(l) => {
                labels.push(l);
                kept.push(s);
            }
            // Blinks and similar render failures have no line of sight.
            Err(e @ (Error::OffSphere { .. } | Error::Geometry(_))) => {
                log::warn!("dropping {}: {e}", s.id);
                dropped.push(s.id);
            }
            Err(e) => return Err(e),
        }
    }
    if !pl.noise.is_identity() {
        labels = inject_noise(&labels, &pl.noise, pl.seed)?;
    }
    for (s, l) in kept.iter_mut().zip(labels) {
        s.set_pseudo(l);
        if let gazerep::corpus::ImageSource::File(p) = &s.image {
            // the new manifest lives elsewhere, so point at the images directly
            s.image_path = path_str(&std::fs::canonicalize(p)?);
        }
    }
    let out = dir.join("manifest.jsonl");
    write_manifest(&out, &kept)?;
    finish(
        &dir,
        json!({ "command": "pseudo-label", "run_dir": path_str(&dir), "manifest": path_str(&out), "labeled": kept.len(), "dropped": dropped }),
    )
}

pub fn train(common: &Common, manifest: &Path, epochs: Option<usize>, tasks: Option<String>, no_nll: bool) -> Result<String> {
    let mut extra = seed_override(common, "train.seed");
    extra.extend(epochs.map(|e| format!("train.epochs={e}")));
    if let Some(t) = tasks {
        let parsed: Vec<String> = t
            .split(',')
            .map(|x| Task::parse(x.trim()).map(|t| format!("{:?}", serde_json::to_value(t).expect("task serializes").as_str().expect("string tag"))))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Config(format!("unknown task in `{t}`")))?;
        extra.push(format!("train.tasks=[{}]", parsed.join(",")));
    }
    if no_nll {
        extra.push("train.nll_enabled=false".into());
    }
    let (cfg, _) = resolve(common, extra)?;
    let samples = load_manifest(manifest, &ManifestFilter::default())?;
    let data = TrainSet::from_samples(&samples)?;
    let dir = rundir::create(&rundir::out_root(common.out.as_deref()), "train", &cfg)?;
    let out = train_mtgls(&cfg.model, &data, &cfg.train, Some(&dir))?;
    if let Some(b) = &out.banks {
        let mut f = BufWriter::new(File::create(dir.join("banks.jsonl"))?);
        for bank in [&b.gaze, &b.pose] {
            for (r, id) in bank.ids.iter().enumerate() {
                let row = json!({ "bank": bank.name, "id": id, "noisy": bank.noisy(r), "corrected": bank.corrected(r) });
                writeln!(f, "{row}")?;
            }
        }
        f.flush()?;
    }
    let last = out.metrics.last();
    finish(
        &dir,
        json!({
            "command": "train",
            "run_dir": path_str(&dir),
            "label": cfg.train.label(),
            "samples": data.len(),
            "epochs": cfg.train.epochs,
            "best_epoch": out.best_epoch,
            "final_loss": last.map(|m| m.loss.total),
            "final_pseudo_gaze_error_deg": last.map(|m| m.pseudo_gaze_error_deg),
            "checkpoint": path_str(&dir.join("final.ckpt")),
        }),
    )
}

fn head_kind(h: HeadArg) -> HeadKind {
    match h {
        HeadArg::Gaze3d => HeadKind::Gaze3d,
        HeadArg::Zone => HeadKind::Zone,
    }
}

/// Loads a checkpoint; an explicitly configured `[model]` must match it.
fn open_checkpoint(path: &Path, cfg: &RunConfig, given: &BTreeSet<String>) -> Result<Checkpoint> {
    let expect: Option<&ModelConfig> = given.contains("model").then_some(&cfg.model);
    load_checkpoint(path, expect)
}

/// Pretraining description from the config next to a checkpoint, if any.
fn pretrain_info(ckpt: &Path) -> serde_json::Value {
    let cfg = ckpt
        .parent()
        .map(|d| d.join("config.toml"))
        .filter(|p| p.exists())
        .and_then(|p| RunConfig::load(Some(&p), &[]).ok());
    match cfg {
        Some(c) => json!({ "label": c.train.label(), "tasks": c.train.tasks, "nll": c.train.nll_enabled, "seed": c.train.seed, "epochs": c.train.epochs }),
        None => serde_json::Value::Null,
    }
}

/// Train (train + val parts) and test partitions of a manifest.
fn split_samples(manifest: &Path, cfg: &RunConfig) -> Result<(Vec<EyeSample>, Vec<EyeSample>)> {
    let all = load_manifest(manifest, &ManifestFilter::default())?;
    let (test, train): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| cfg.split.assign(&s.id) == SplitPart::Test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Insufficient(format!(
            "split leaves {} training and {} test samples",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Probe,
    Finetune,
}

#[derive(Serialize)]
struct AdaptReport<'a> {
    mode: &'a str,
    head: &'a str,
    checkpoint: String,
    pretrain: serde_json::Value,
    train_samples: usize,
    best_epoch: usize,
    train_loss: &'a [f64],
    val_metric: &'a [f64],
    test: &'a EvalMetrics,
}

pub fn adapt(args: &AdaptArgs, mode: Mode) -> Result<String> {
    let mut extra = seed_override(&args.common, "adapt.seed");
    extra.extend(args.epochs.map(|e| format!("adapt.epochs={e}")));
    extra.push(format!(
        "adapt.mode=\"{}\"",
        match mode {
            Mode::Probe => "lp",
            Mode::Finetune => "ft",
        }
    ));
    let (cfg, given) = resolve(&args.common, extra)?;
    let kind = head_kind(args.head);
    let ck = open_checkpoint(&args.checkpoint, &cfg, &given)?;
    let (train_s, test_s) = split_samples(&args.manifest, &cfg)?;
    let train_set = LabeledSet::from_samples(&train_s, kind)?;
    let test_set = LabeledSet::from_samples(&test_s, kind)?;
    let name = match mode {
        Mode::Probe => "probe",
        Mode::Finetune => "finetune",
    };
    let dir = rundir::create(&rundir::out_root(args.common.out.as_deref()), name, &cfg)?;
    let out: AdaptOutcome = match mode {
        Mode::Probe => adapt::linear_probe(&ck.model, &train_set, &cfg.adapt)?,
        Mode::Finetune => adapt::fine_tune(&ck.model, &train_set, &cfg.adapt)?,
    };
    let test = adapt::evaluate(&out.model, &test_set)?;
    let report = AdaptReport {
        mode: name,
        head: kind.name(),
        checkpoint: path_str(&args.checkpoint),
        pretrain: pretrain_info(&args.checkpoint),
        train_samples: train_set.len(),
        best_epoch: out.best_epoch,
        train_loss: &out.train_loss,
        val_metric: &out.val_metric,
        test: &test,
    };
    write_json(&dir.join("metrics.json"), &report)?;
    let prov = Provenance {
        seed: cfg.adapt.seed,
        epoch: out.best_epoch,
        note: format!("{name} ({}) from {}", kind.name(), path_str(&args.checkpoint)),
    };
    save_checkpoint(&dir.join("adapted.ckpt"), &out.model, &[], &prov)?;
    finish(
        &dir,
        json!({ "command": name, "run_dir": path_str(&dir), "head": kind.name(), "test_mean": test.mean, "test_std": test.std, "test_accuracy": test.accuracy, "n_test": test.n }),
    )
}

pub fn knn(common: &Common, checkpoint: &Path, manifest: &Path, k: Option<usize>) -> Result<String> {
    let mut extra = seed_override(common, "adapt.seed");
    extra.extend(k.map(|k| format!("adapt.k={k}")));
    extra.push("adapt.mode=\"knn\"".into());
    let (cfg, given) = resolve(common, extra)?;
    let ck = open_checkpoint(checkpoint, &cfg, &given)?;
    let (train_s, test_s) = split_samples(manifest, &cfg)?;
    let train_set = LabeledSet::from_samples(&train_s, HeadKind::Zone)?;
    let test_set = LabeledSet::from_samples(&test_s, HeadKind::Zone)?;
    let dir = rundir::create(&rundir::out_root(common.out.as_deref()), "knn", &cfg)?;
    let (Targets::Zone(train_y), Targets::Zone(test_y)) = (&train_set.targets, &test_set.targets) else {
        unreachable!("zone sets carry zone targets")
    };
    let zf = adapt::extract_features(&ck.model, &train_set)?;
    let qf = adapt::extract_features(&ck.model, &test_set)?;
    let k = cfg.adapt.k.min(train_set.len());
    let pred = adapt::knn_classify(&zf.z, train_y, &qf.z, k, cfg.adapt.tau)?;
    let correct = pred.iter().zip(test_y).filter(|(a, b)| a == b).count();
    let accuracy = correct as f64 / test_y.len() as f64;
    let metrics = json!({
        "mode": "knn",
        "checkpoint": path_str(checkpoint),
        "pretrain": pretrain_info(checkpoint),
        "k": k,
        "tau": cfg.adapt.tau,
        "n_test": test_y.len(),
        "accuracy": accuracy,
        "predictions": test_set.ids.iter().zip(&pred).map(|(id, p)| json!({ "id": id, "zone": p })).collect::<Vec<_>>(),
    });
    write_json(&dir.join("metrics.json"), &metrics)?;
    finish(
        &dir,
        json!({ "command": "knn", "run_dir": path_str(&dir), "k": k, "accuracy": accuracy, "n_test": test_y.len() }),
    )
}

pub fn calibrate(common: &Common, checkpoint: &Path, manifest: &Path) -> Result<String> {
    let (cfg, given) = resolve(common, seed_override(common, "adapt.seed"))?;
    let ck = open_checkpoint(checkpoint, &cfg, &given)?;
    let samples = load_manifest(manifest, &ManifestFilter::default())?;
    let set = LabeledSet::from_samples(&samples, HeadKind::Gaze3d)?;
    let dir = rundir::create(&rundir::out_root(common.out.as_deref()), "calibrate", &cfg)?;
    let rows = adapt::calibrate(&ck.model, &set, &cfg.calibration, &cfg.adapt)?;
    let mut w = csv::Writer::from_path(dir.join("calibration.csv")).map_err(csv_err)?;
    w.write_record(["kind", "k", "mean_error_deg", "std_error_deg", "repeats"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.kind.name().to_string(),
            r.k.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.repeats.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let mut f = BufWriter::new(File::create(dir.join("calibration.jsonl"))?);
    for r in &rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    finish(
        &dir,
        json!({ "command": "calibrate", "run_dir": path_str(&dir), "rows": rows.len(), "pretrain": pretrain_info(checkpoint) }),
    )
}

pub fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}
