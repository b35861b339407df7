//! `report`: ablation table, calibration curves, and loss curves from run
//! directories. The output depends only on the input directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use gazerep::trainer::{EpochMetrics, Task};
use gazerep::Error;
use plotters::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::commands::csv_err;
use crate::config::RunConfig;
use crate::rundir;

type Result<T> = std::result::Result<T, Error>;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a sans-serif font for plot text; plots omit text without one.
fn fonts_available() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let from_env = std::env::var("GAZEREP_FONT").ok();
        for p in from_env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied()) {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no TrueType font found; plots are drawn without text (set GAZEREP_FONT)");
        false
    })
}

#[derive(Debug, Clone, PartialEq)]
struct AblationCell {
    gaze: bool,
    pose: bool,
    side: bool,
    nll: bool,
    mode: String,
    head: String,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct CalibrationRecord {
    kind: String,
    k: usize,
    mean_error_deg: f64,
    std_error_deg: f64,
    repeats: usize,
}

#[derive(Default)]
struct Collected {
    ablation: Vec<AblationCell>,
    calibration: Vec<(String, CalibrationRecord)>,
    curves: Vec<(String, String, Vec<EpochMetrics>)>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Expands each input to itself if it is a run directory, otherwise to its
/// run-directory children in name order.
fn expand(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if !p.is_dir() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("run directory {} not found", p.display()),
            )));
        }
        if p.join("summary.json").exists() {
            out.push(p.clone());
            continue;
        }
        let mut kids: Vec<PathBuf> = std::fs::read_dir(p)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join("summary.json").exists())
            .collect();
        kids.sort();
        if kids.is_empty() {
            return Err(Error::Insufficient(format!("{} holds no run directories", p.display())));
        }
        out.extend(kids);
    }
    Ok(out)
}

fn collect(dirs: &[PathBuf]) -> Result<Collected> {
    let mut c = Collected::default();
    for dir in dirs {
        let summary = read_json(&dir.join("summary.json"))?;
        match summary["command"].as_str().unwrap_or("") {
            "train" => {
                let cfg = RunConfig::load(Some(&dir.join("config.toml")), &[])?;
                let text = std::fs::read_to_string(dir.join("metrics.jsonl"))?;
                let metrics = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<std::result::Result<Vec<EpochMetrics>, _>>()?;
                c.curves.push((run_name(dir), cfg.train.label(), metrics));
            }
            cmd @ ("probe" | "finetune" | "knn") => {
                let m = read_json(&dir.join("metrics.json"))?;
                let pre = &m["pretrain"];
                if pre.is_null() {
                    log::warn!("{}: checkpoint has no training config beside it; skipped in the ablation table", dir.display());
                    continue;
                }
                let tasks: Vec<Task> = serde_json::from_value(pre["tasks"].clone())?;
                let (head, value) = if cmd == "knn" {
                    ("zone".to_string(), m["accuracy"].as_f64())
                } else {
                    let head = m["head"].as_str().unwrap_or("").to_string();
                    let v = if head == "zone" {
                        m["test"]["accuracy"].as_f64()
                    } else {
                        m["test"]["mean"].as_f64()
                    };
                    (head, v)
                };
                let value = value.ok_or_else(|| Error::Config(format!("{}: metrics.json lacks a test metric", dir.display())))?;
                let cell = AblationCell {
                    gaze: tasks.contains(&Task::PseudoGaze),
                    pose: tasks.contains(&Task::HeadPose),
                    side: tasks.contains(&Task::EyeSide),
                    nll: pre["nll"].as_bool().unwrap_or(false),
                    mode: cmd.to_string(),
                    head,
                    values: vec![value],
                };
                match c
                    .ablation
                    .iter_mut()
                    .find(|a| (a.gaze, a.pose, a.side, a.nll, &a.mode, &a.head) == (cell.gaze, cell.pose, cell.side, cell.nll, &cell.mode, &cell.head))
                {
                    Some(a) => a.values.push(value),
                    None => c.ablation.push(cell),
                }
            }
            "calibrate" => {
                let mut r = csv::Reader::from_path(dir.join("calibration.csv")).map_err(csv_err)?;
                for rec in r.deserialize() {
                    c.calibration.push((run_name(dir), rec.map_err(csv_err)?));
                }
            }
            other => log::info!("{}: nothing to report for `{other}`", dir.display()),
        }
    }
    Ok(c)
}

/// Row order of the ablation table: single tasks, pairs, all three, then with NLL.
fn ablation_rank(a: &AblationCell) -> (usize, [bool; 3]) {
    let n = [a.gaze, a.pose, a.side].iter().filter(|b| **b).count();
    (if a.nll { 4 } else { n }, [!a.gaze, !a.pose, !a.side])
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn write_ablation(out: &Path, cells: &mut [AblationCell]) -> Result<()> {
    cells.sort_by(|a, b| (a.mode.as_str(), a.head.as_str(), ablation_rank(a)).cmp(&(b.mode.as_str(), b.head.as_str(), ablation_rank(b))));
    let mut w = csv::Writer::from_path(out.join("ablation.csv")).map_err(csv_err)?;
    w.write_record(["pseudo_gaze", "head_pose", "eye_side", "nll", "mode", "head", "runs", "mean", "std"])
        .map_err(csv_err)?;
    for a in cells.iter() {
        let (m, s) = mean_std(&a.values);
        w.write_record([
            mark(a.gaze),
            mark(a.pose),
            mark(a.side),
            mark(a.nll),
            &a.mode,
            &a.head,
            &a.values.len().to_string(),
            &m.to_string(),
            &s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_calibration(out: &Path, rows: &[(String, CalibrationRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("calibration.csv")).map_err(csv_err)?;
    w.write_record(["run", "kind", "k", "mean_error_deg", "std_error_deg", "repeats"])
        .map_err(csv_err)?;
    for (run, r) in rows {
        w.write_record([
            run.clone(),
            r.kind.clone(),
            r.k.to_string(),
            r.mean_error_deg.to_string(),
            r.std_error_deg.to_string(),
            r.repeats.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_curves(out: &Path, curves: &[(String, String, Vec<EpochMetrics>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("loss_curves.csv")).map_err(csv_err)?;
    w.write_record([
        "run",
        "label",
        "epoch",
        "total",
        "pseudo_gaze",
        "head_pose",
        "eye_side",
        "nll_gaze_reg",
        "nll_gaze_c",
        "nll_pose_reg",
        "nll_pose_c",
        "pseudo_gaze_error_deg",
    ])
    .map_err(csv_err)?;
    for (run, label, ms) in curves {
        for m in ms {
            let l = &m.loss;
            let vals = [
                l.total,
                l.pseudo_gaze,
                l.head_pose,
                l.eye_side,
                l.nll_gaze_reg,
                l.nll_gaze_c,
                l.nll_pose_reg,
                l.nll_pose_c,
                m.pseudo_gaze_error_deg,
            ];
            let mut rec = vec![run.clone(), label.clone(), m.epoch.to_string()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("plot: {e}")))
}

/// Line chart with markers. `log_x` plots log2 of x.
fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> Result<()> {
    let tx = |x: f64| if log_x { x.max(1e-9).log2() } else { x };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, y)| (tx(x), y)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.is_empty() {
        return Ok(());
    }
    let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    y0 -= pad;
    y1 += pad;
    let text = fonts_available();
    let root = BitMapBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder.caption(title, ("sans-serif", 24)).x_label_area_size(45).y_label_area_size(60);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(plot_err)?;
    if text {
        let fmt = |x: &f64| if log_x { format!("{}", x.exp2().round()) } else { format!("{x}") };
        chart
            .configure_mesh()
            .x_desc(x_label)
            .y_desc(y_label)
            .x_label_formatter(&fmt)
            .draw()
            .map_err(plot_err)?;
    } else {
        chart
            .configure_mesh()
            .disable_x_mesh()
            .disable_y_mesh()
            .x_labels(0)
            .y_labels(0)
            .draw()
            .map_err(plot_err)?;
    }
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let data: Vec<(f64, f64)> = s.points.iter().map(|&(x, y)| (tx(x), y)).collect();
        let line = chart.draw_series(LineSeries::new(data.clone(), color.stroke_width(2))).map_err(plot_err)?;
        if text {
            line.label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart
            .draw_series(data.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

pub fn run(out: Option<PathBuf>, inputs: &[PathBuf]) -> Result<String> {
    let dirs = expand(inputs)?;
    let mut c = collect(&dirs)?;
    let out = match out {
        Some(p) => {
            std::fs::create_dir_all(&p)?;
            p
        }
        None => rundir::create(&rundir::out_root(None), "report", &RunConfig::default())?,
    };
    write_ablation(&out, &mut c.ablation)?;
    write_calibration(&out, &c.calibration)?;
    write_curves(&out, &c.curves)?;

    let mut by_kind: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for (run, r) in &c.calibration {
        by_kind.entry((run.clone(), r.kind.clone())).or_default().push((r.k as f64, r.mean_error_deg));
    }
    let multi_run = by_kind.keys().map(|k| &k.0).collect::<std::collections::BTreeSet<_>>().len() > 1;
    let cal: Vec<Series> = by_kind
        .into_iter()
        .map(|((run, kind), points)| Series {
            name: if multi_run { format!("{kind} ({run})") } else { kind },
            points,
        })
        .collect();
    let mut plots = Vec::new();
    if !cal.is_empty() {
        line_plot(
            &out.join("calibration.png"),
            "Error vs calibration samples",
            "k",
            "mean angular error (deg)",
            &cal,
            true,
        )?;
        plots.push("calibration.png");
    }
    let curves: Vec<Series> = c
        .curves
        .iter()
        .map(|(run, label, ms)| Series {
            name: format!("{label} ({run})"),
            points: ms.iter().map(|m| (m.epoch as f64, m.loss.total)).collect(),
        })
        .collect();
    if !curves.is_empty() {
        line_plot(&out.join("loss_curves.png"), "Training loss", "epoch", "total loss", &curves, false)?;
        plots.push("loss_curves.png");
    }
    let summary = json!({
        "command": "report",
        "out": out.display().to_string(),
        "runs": dirs.len(),
        "ablation_rows": c.ablation.len(),
        "calibration_rows": c.calibration.len(),
        "curves": c.curves.len(),
        "plots": plots,
    });
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary.to_string())
}
