//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `GAZEREP_ACCEPTANCE_ONLY=4,5` restricts the run to the listed criteria;
//! `GAZEREP_ACCEPTANCE_STRICT=1` makes any FAIL a nonzero exit.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use gazerep::adapt::{self, AdaptConfig, CalibrationKind, CalibrationProtocol, FeatureTable, LabeledSet};
use gazerep::corpus::{subject_id, synthesize_corpus, CorpusConfig, EyeSample};
use gazerep::geometry::{angular_error_deg, EyeLandmarks};
use gazerep::losses;
use gazerep::model::{GazeModel, HeadKind, ModelConfig};
use gazerep::nll::{self, bernoulli_kl, label_mse};
use gazerep::pseudolabel::{inject_noise, label_sample, los_pseudo_gaze, Labeler, NoiseConfig, PseudoLabelSet};
use gazerep::rng::rng_for;
use gazerep::trainer::{comparable, total_loss, train_mtgls, Banks, BatchLabels, Predictions, Task, TrainConfig, TrainSet};
use ndarray::{Array2, Axis};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
    /// Compute time attributed to the criterion when it reuses shared work.
    charged: Option<Duration>,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
        charged: None,
    }
}

type Check = fn(&mut Shared) -> Verdict;

/// Training results reused across criteria.
#[derive(Default)]
struct Shared {
    ablation: Option<Ablation>,
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("GAZEREP_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let strict = std::env::var("GAZEREP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let checks: [(usize, &str, Duration, Check); 9] = [
        (1, "geometry oracle", Duration::from_secs(60), geometry_oracle),
        (2, "loss analytics", Duration::from_secs(10), loss_analytics),
        (3, "gradient checks", Duration::from_secs(120), gradient_checks),
        (4, "nll denoising", Duration::from_secs(15 * 60), nll_denoising),
        (5, "ablation ordering", Duration::from_secs(45 * 60), ablation_ordering),
        (6, "calibration curves", Duration::from_secs(20 * 60), calibration_curves),
        (7, "knn oracle", Duration::from_secs(60), knn_oracle),
        (8, "determinism and freezing", Duration::from_secs(5 * 60), determinism),
        (9, "end-to-end smoke", Duration::from_secs(3 * 60), smoke),
    ];
    let mut shared = Shared::default();
    let (mut ran, mut failed, mut crashed) = (0, 0, 0);
    for (id, name, budget, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let v = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut shared))) {
            Ok(v) => v,
            Err(_) => {
                crashed += 1;
                verdict(false, "check panicked")
            }
        };
        let took = v.charged.unwrap_or_else(|| t.elapsed());
        let in_time = took <= budget;
        let pass = v.pass && in_time;
        if !pass {
            failed += 1;
        }
        let time_note = if in_time {
            String::new()
        } else {
            format!(" [over the {:.0}s budget]", budget.as_secs_f64())
        };
        println!(
            "criterion {id} {} {name}: {} ({:.1}s){time_note}",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    }
    println!("{} of {ran} criteria passed", ran - failed);
    // A FAIL verdict is a measured outcome; only a broken check fails the
    // target unless strict mode is requested.
    if crashed > 0 || (strict && failed > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// ---------------------------------------------------------------- 1

fn geometry_oracle(_: &mut Shared) -> Verdict {
    let lm = EyeLandmarks {
        corners: [[20.0, 24.0], [44.0, 24.0]],
        contour: vec![[24.0, 19.0], [32.0, 17.0], [40.0, 19.0], [40.0, 29.0], [32.0, 30.0], [24.0, 29.0]],
        pupil: [26.0, 24.0],
    };
    let yaw = los_pseudo_gaze(&lm, 12.0).unwrap().to_pitchyaw().yaw.to_degrees().abs();
    let cfg = CorpusConfig {
        n_subjects: 20,
        samples_per_subject: 500,
        ..Default::default()
    };
    let samples = synthesize_corpus(&cfg).unwrap();
    let labeler = Labeler::Geometric { radius_px: cfg.radius_px };
    let within = samples
        .iter()
        .filter(|s| match label_sample(&labeler, s) {
            Ok(l) => angular_error_deg(&l.pseudo_gaze, &s.gt_gaze.unwrap()).unwrap() <= 0.5,
            Err(_) => false,
        })
        .count();
    let frac = within as f64 / samples.len() as f64;
    verdict(
        (yaw - 30.0).abs() <= 1e-4 && frac >= 0.99,
        format!("yaw {yaw:.6} deg, {within}/{} relabeled within 0.5 deg ({:.2}%)", samples.len(), 100.0 * frac),
    )
}

// ---------------------------------------------------------------- 2

fn loss_analytics(_: &mut Shared) -> Verdict {
    let g = [0.2, -0.3, -0.93];
    let same = losses::cosine_loss(&g, &[0.4, -0.6, -1.86]).0;
    let ortho = losses::cosine_loss(&[1.0, 0.0, 0.0], &[0.0, 0.0, -3.0]).0;
    let opposite = losses::cosine_loss(&g, &[-0.2, 0.3, 0.93]).0;
    let anchors = same.abs() < 1e-12 && (ortho - 1.0).abs() < 1e-12 && (opposite - 2.0).abs() < 1e-12;
    let mut r = rng_for(2, 0, 0);
    let in_range = (0..1000).all(|_| {
        let a: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let l = losses::cosine_loss(&a, &b).0;
        (-1e-12..=2.0 + 1e-12).contains(&l)
    });
    let kl = bernoulli_kl(&[0.9], &[0.5]).unwrap();
    let ce = losses::eye_orientation_loss(&[1], &Array2::zeros((1, 2))).unwrap().0;
    let mut h = Array2::zeros((1, 6));
    let mut hp = Array2::zeros((1, 6));
    h[[0, 1]] = std::f64::consts::PI - 0.05;
    hp[[0, 1]] = -std::f64::consts::PI + 0.05;
    let wrap = losses::head_pose_loss(&h, &hp).unwrap().0;
    let wrap_ok = (wrap - 0.1f64.powi(2) / 6.0).abs() < 1e-12;
    let pass = anchors && in_range && (kl - 0.368064).abs() <= 1e-5 && (ce - 2f64.ln()).abs() <= 1e-9 && wrap_ok;
    verdict(
        pass,
        format!("anchors {anchors}, range {in_range}, KL {kl:.6}, CE {ce:.12}, wrap MSE {wrap:.3e}"),
    )
}

// ---------------------------------------------------------------- 3

fn random_batch(seed: u64, b: usize) -> (Predictions, BatchLabels, Banks) {
    let mut r = rng_for(seed, 7, 0);
    let ids: Vec<String> = (0..b).map(|i| format!("p{i}")).collect();
    let gaze: Vec<[f64; 3]> = (0..b)
        .map(|_| {
            let (x, y) = (r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5));
            let n = (x * x + y * y + 1.0f64).sqrt();
            [x / n, y / n, -1.0 / n]
        })
        .collect();
    let pose: Vec<[f64; 6]> = (0..b)
        .map(|_| std::array::from_fn(|d| if d == 5 { r.gen_range(0.9..1.1) } else { r.gen_range(-0.3..0.3) }))
        .collect();
    let set = TrainSet {
        ids,
        images: vec![],
        gaze,
        pose,
        side: (0..b).map(|i| i % 2).collect(),
    };
    let mut banks = Banks::init(&set, 2.0).unwrap();
    banks.gaze.u.mapv_inplace(|u| u + r.gen_range(-0.3..0.3));
    banks.pose.u.mapv_inplace(|u| u + r.gen_range(-0.3..0.3));
    let pred = Predictions {
        gaze: Array2::from_shape_fn((b, 3), |(_, d)| if d == 2 { r.gen_range(-0.9..-0.5) } else { r.gen_range(-0.4..0.4) }),
        pose: Array2::from_shape_fn((b, 6), |(_, d)| if d == 5 { r.gen_range(0.92..1.08) } else { r.gen_range(-0.25..0.25) }),
        side: Array2::from_shape_fn((b, 2), |_| r.gen_range(-2.0..2.0)),
    };
    let labels = BatchLabels::gather(&set, &(0..b).collect::<Vec<_>>());
    (pred, labels, banks)
}

fn rel_err(an: f64, fd: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6)
}

/// Central difference of `f` at `x[[i, d]]`.
fn central(x: &Array2<f64>, i: usize, d: usize, h: f64, f: &dyn Fn(&Array2<f64>) -> f64) -> f64 {
    let mut p = x.clone();
    p[[i, d]] += h;
    let mut m = x.clone();
    m[[i, d]] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

fn gradient_checks(_: &mut Shared) -> Verdict {
    let h = 1e-6;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |k: &'static str, e: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(e);
    };
    for probe in 0..100u64 {
        let b = 4;
        let (pred, labels, banks) = random_batch(probe, b);
        let mut r = rng_for(probe, 8, 0);
        let i = r.gen_range(0..b);
        let rows: Vec<usize> = (0..b).collect();

        let (_, g) = losses::pseudo_gaze_loss(&labels.gaze, &pred.gaze).unwrap();
        let d = r.gen_range(0..3);
        note(
            "cosine",
            rel_err(
                g[[i, d]],
                central(&pred.gaze, i, d, h, &|x| losses::pseudo_gaze_loss(&labels.gaze, x).unwrap().0),
            ),
        );

        let (_, g) = losses::head_pose_loss(&labels.pose, &pred.pose).unwrap();
        let d = r.gen_range(0..6);
        note(
            "head pose",
            rel_err(g[[i, d]], central(&pred.pose, i, d, h, &|x| losses::head_pose_loss(&labels.pose, x).unwrap().0)),
        );

        let (_, g) = losses::eye_orientation_loss(&labels.side, &pred.side).unwrap();
        let d = r.gen_range(0..2);
        note(
            "eye side",
            rel_err(
                g[[i, d]],
                central(&pred.side, i, d, h, &|x| losses::eye_orientation_loss(&labels.side, x).unwrap().0),
            ),
        );

        for (name, bank, y) in [("nll gaze", &banks.gaze, &pred.gaze), ("nll pose", &banks.pose, &pred.pose)] {
            let t = nll::nll_loss(y, bank, &rows).unwrap();
            let d = r.gen_range(0..bank.dim());
            let f = |x: &Array2<f64>| {
                let t = nll::nll_loss(x, bank, &rows).unwrap();
                t.l_reg + t.l_c
            };
            note(name, rel_err(t.grad_pred[[i, d]], central(y, i, d, h, &f)));
            let fu = |u: &Array2<f64>| {
                let mut bk = bank.clone();
                bk.u = u.clone();
                let t = nll::nll_loss(y, &bk, &rows).unwrap();
                t.l_reg + t.l_c
            };
            let fd = central(&bank.u, rows[i], d, h, &fu);
            note("bank logits", rel_err(t.grad_u[[i, d]], fd));
        }

        let cfg = TrainConfig {
            w_gaze: r.gen_range(0.5..1.5),
            w_pose: r.gen_range(0.5..1.5),
            w_side: r.gen_range(0.5..1.5),
            w_nll: r.gen_range(0.1..1.0),
            ..Default::default()
        };
        let (_, grads) = total_loss(&pred, &labels, Some(&banks), &cfg).unwrap();
        let d = r.gen_range(0..3);
        let fg = |x: &Array2<f64>| {
            total_loss(
                &Predictions {
                    gaze: x.clone(),
                    ..pred.clone()
                },
                &labels,
                Some(&banks),
                &cfg,
            )
            .unwrap()
            .0
            .total
        };
        note("total", rel_err(grads.gaze[[i, d]], central(&pred.gaze, i, d, h, &fg)));
        let d = r.gen_range(0..6);
        let fp = |x: &Array2<f64>| {
            total_loss(
                &Predictions {
                    pose: x.clone(),
                    ..pred.clone()
                },
                &labels,
                Some(&banks),
                &cfg,
            )
            .unwrap()
            .0
            .total
        };
        note("total", rel_err(grads.pose[[i, d]], central(&pred.pose, i, d, h, &fp)));
        let (brows, gu) = grads.bank_gaze.clone().unwrap();
        let d = r.gen_range(0..3);
        let fu = |u: &Array2<f64>| {
            let mut bk = banks.clone();
            bk.gaze.u = u.clone();
            total_loss(&pred, &labels, Some(&bk), &cfg).unwrap().0.total
        };
        note("bank logits", rel_err(gu[[i, d]], central(&banks.gaze.u, brows[i], d, h, &fu)));
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(max <= 1e-4, format!("worst relative error per term: {detail}"))
}

// ---------------------------------------------------------------- 4, 5

const SEEDS: [u64; 3] = [0, 1, 2];

/// One pretraining cell of the ablation grid.
struct Cell {
    lp: f64,
    /// Corrected-to-noisy gaze label MSE against the clean labels, NLL cells only.
    denoise: Option<f64>,
    cost: Duration,
}

struct Ablation {
    samples: Vec<EyeSample>,
    clean_gaze: Vec<Vec<f64>>,
    cells: BTreeMap<(&'static str, u64), Cell>,
}

fn noisy_corpus() -> (Vec<EyeSample>, Vec<PseudoLabelSet>) {
    let cfg = CorpusConfig {
        n_subjects: 10,
        samples_per_subject: 200,
        ..Default::default()
    };
    let mut samples = synthesize_corpus(&cfg).unwrap();
    let clean: Vec<PseudoLabelSet> = samples.iter().map(|s| label_sample(&Labeler::Oracle, s).unwrap()).collect();
    let noisy = inject_noise(
        &clean,
        &NoiseConfig {
            corrupt_fraction: 0.3,
            large_corrupt_deg: 20.0,
            ..Default::default()
        },
        7,
    )
    .unwrap();
    for (s, l) in samples.iter_mut().zip(noisy) {
        s.set_pseudo(l);
    }
    (samples, clean)
}

fn probe_config(seed: u64) -> AdaptConfig {
    AdaptConfig {
        lr: 0.02,
        epochs: 100,
        patience: 100,
        augment: false,
        seed,
        ..Default::default()
    }
}

/// Linear-probe gaze error, averaged over five folds that each hold out two subjects.
fn lp_error(model: &GazeModel, set: &LabeledSet, seed: u64) -> f64 {
    let features = adapt::extract_features(model, set).unwrap();
    let mut errs = Vec::new();
    for f in 0..5 {
        let held = [subject_id(2 * f), subject_id(2 * f + 1)];
        let (te, tr): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| held.contains(&set.subjects[i]));
        let part = FeatureTable {
            ids: tr.iter().map(|&i| features.ids[i].clone()).collect(),
            z: features.z.select(Axis(0), &tr),
        };
        let lp = adapt::linear_probe_on_features(model, &part, &set.subset(&tr), &probe_config(seed)).unwrap();
        errs.push(adapt::evaluate(&lp.model, &set.subset(&te)).unwrap().mean);
    }
    errs.iter().sum::<f64>() / errs.len() as f64
}

fn tasks_of(name: &str) -> (Vec<Task>, bool) {
    match name {
        "all+nll" => (vec![Task::PseudoGaze, Task::HeadPose, Task::EyeSide], true),
        "all" => (vec![Task::PseudoGaze, Task::HeadPose, Task::EyeSide], false),
        "gaze" => (vec![Task::PseudoGaze], false),
        "pose" => (vec![Task::HeadPose], false),
        "side" => (vec![Task::EyeSide], false),
        other => unreachable!("no cell {other}"),
    }
}

/// Trains (once) and probes the named cells for every seed.
fn cells<'a>(shared: &'a mut Shared, names: &[&'static str]) -> &'a Ablation {
    let ab = shared.ablation.get_or_insert_with(|| {
        let (samples, clean) = noisy_corpus();
        let clean_gaze = clean.iter().map(|c| c.pseudo_gaze.as_array().to_vec()).collect();
        Ablation {
            samples,
            clean_gaze,
            cells: BTreeMap::new(),
        }
    });
    for &name in names {
        for seed in SEEDS {
            if ab.cells.contains_key(&(name, seed)) {
                continue;
            }
            let t = Instant::now();
            let (tasks, nll) = tasks_of(name);
            let data = TrainSet::from_samples(&ab.samples).unwrap();
            let set = LabeledSet::from_samples(&ab.samples, HeadKind::Gaze3d).unwrap();
            let cfg = TrainConfig {
                epochs: 30,
                seed,
                tasks,
                nll_enabled: nll,
                ..Default::default()
            };
            let run = train_mtgls(&ModelConfig::default(), &data, &cfg, None).unwrap();
            let denoise = run.banks.as_ref().map(|b| {
                let n = b.gaze.len();
                let corrected: Vec<Vec<f64>> = (0..n).map(|r| b.gaze.corrected(r)).collect();
                let noisy: Vec<Vec<f64>> = (0..n).map(|r| b.gaze.noisy(r)).collect();
                label_mse(&corrected, &ab.clean_gaze) / label_mse(&noisy, &ab.clean_gaze)
            });
            let lp = lp_error(&run.model, &set, seed);
            ab.cells.insert(
                (name, seed),
                Cell {
                    lp,
                    denoise,
                    cost: t.elapsed(),
                },
            );
        }
    }
    ab
}

impl Ablation {
    fn lp(&self, name: &'static str) -> Vec<f64> {
        SEEDS.iter().map(|&s| self.cells[&(name, s)].lp).collect()
    }

    fn cost(&self, names: &[&'static str]) -> Duration {
        self.cells.iter().filter(|((n, _), _)| names.contains(n)).map(|(_, c)| c.cost).sum()
    }
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

fn nll_denoising(shared: &mut Shared) -> Verdict {
    const GRID: [&str; 2] = ["all+nll", "all"];
    let a = cells(shared, &GRID);
    let (with, without) = (a.lp("all+nll"), a.lp("all"));
    let ratios: Vec<f64> = SEEDS.iter().map(|&s| a.cells[&("all+nll", s)].denoise.unwrap()).collect();
    let wins = with.iter().zip(&without).filter(|(w, o)| w < o).count();
    let denoised = ratios.iter().all(|r| *r <= 0.8);
    Verdict {
        pass: denoised && wins >= 2,
        detail: format!(
            "label MSE ratio {} (need <= 0.8); LP with NLL {} vs without {} ({wins}/3 seeds better)",
            fmt(&ratios),
            fmt(&with),
            fmt(&without)
        ),
        charged: Some(a.cost(&GRID)),
    }
}

fn ablation_ordering(shared: &mut Shared) -> Verdict {
    const GRID: [&str; 5] = ["all+nll", "all", "gaze", "pose", "side"];
    let a = cells(shared, &GRID);
    let lp: BTreeMap<&str, Vec<f64>> = GRID.iter().map(|&n| (n, a.lp(n))).collect();
    let holds: Vec<bool> = (0..SEEDS.len())
        .map(|s| {
            let single = lp["gaze"][s].min(lp["pose"][s]).min(lp["side"][s]);
            lp["all+nll"][s] < lp["all"][s] && lp["all"][s] < single
        })
        .collect();
    let n = holds.iter().filter(|h| **h).count();
    let table = GRID.iter().map(|k| format!("{k} {}", fmt(&lp[k]))).collect::<Vec<_>>().join("; ");
    Verdict {
        pass: n * 2 > SEEDS.len(),
        detail: format!("ordering holds in {n}/3 seeds; LP error {table}"),
        charged: Some(a.cost(&GRID)),
    }
}

// ---------------------------------------------------------------- 6

fn calibration_curves(_: &mut Shared) -> Verdict {
    let cfg = CorpusConfig {
        n_subjects: 8,
        samples_per_subject: 400,
        subject_bias_deg: 3.0,
        ..Default::default()
    };
    let mut samples = synthesize_corpus(&cfg).unwrap();
    let geometric = Labeler::Geometric { radius_px: cfg.radius_px };
    for s in samples.iter_mut() {
        let l = label_sample(&geometric, s).unwrap();
        s.set_pseudo(l);
    }
    let data = TrainSet::from_samples(&samples).unwrap();
    let model = train_mtgls(
        &ModelConfig::default(),
        &data,
        &TrainConfig {
            epochs: 20,
            seed: 0,
            ..Default::default()
        },
        None,
    )
    .unwrap()
    .model;
    let set = LabeledSet::from_samples(&samples, HeadKind::Gaze3d).unwrap();
    let ks = vec![1, 4, 16, 64, 256];
    let proto = CalibrationProtocol {
        kinds: vec![CalibrationKind::PersonSpecific, CalibrationKind::PersonIndependent],
        k_samples: ks.clone(),
        repeats: 10,
        ..Default::default()
    };
    let rows = adapt::calibrate(
        &model,
        &set,
        &proto,
        &AdaptConfig {
            lr: 0.02,
            epochs: 50,
            augment: false,
            ..Default::default()
        },
    )
    .unwrap();
    let err = |kind: CalibrationKind, k: usize| rows.iter().find(|r| r.kind == kind && r.k == k).unwrap().mean;
    let (ps, pi) = (CalibrationKind::PersonSpecific, CalibrationKind::PersonIndependent);
    let every_k = ks.iter().all(|&k| err(ps, k) < err(pi, k));
    let improves = err(ps, 256) < err(ps, 1) && err(pi, 256) < err(pi, 1);
    let table = ks
        .iter()
        .map(|&k| format!("k={k} PS {:.2} PI {:.2}", err(ps, k), err(pi, k)))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(every_k && improves, table)
}

// ---------------------------------------------------------------- 7

/// Exhaustive rule: rank every training point, keep the first k, sum `exp(cos / tau)` per class.
fn brute_force_knn(train: &Array2<f32>, labels: &[usize], q: &[f32], k: usize, tau: f64) -> usize {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| if n > 0.0 { x / n } else { x }).collect::<Vec<f64>>()
    };
    let qv = unit(q.iter().map(|&x| x as f64).collect());
    let mut sims: Vec<(f64, usize)> = train
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let t = unit(r.iter().map(|&x| x as f64).collect());
            (t.iter().zip(&qv).map(|(a, b)| a * b).sum(), i)
        })
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let classes = labels.iter().max().unwrap() + 1;
    let mut score = vec![0.0; classes];
    for &(s, i) in sims.iter().take(k) {
        score[labels[i]] += (s / tau).exp();
    }
    let mut best = 0;
    for c in 1..classes {
        if score[c] > score[best] {
            best = c;
        }
    }
    best
}

fn knn_oracle(_: &mut Shared) -> Verdict {
    let mut mismatches = 0;
    let mut total = 0;
    for inst in 0..20u64 {
        let mut r = rng_for(inst, 9, 0);
        let n = r.gen_range(20..=1000);
        let dim = r.gen_range(2..=16);
        let classes = r.gen_range(2..=9);
        // Coarse values make exact similarity ties likely.
        let train = Array2::from_shape_fn((n, dim), |_| r.gen_range(-3i32..=3) as f32);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let query = Array2::from_shape_fn((25, dim), |_| r.gen_range(-3i32..=3) as f32);
        let got = adapt::knn_classify(&train, &labels, &query, 10, 0.07).unwrap();
        for (qi, g) in got.iter().enumerate() {
            total += 1;
            if *g != brute_force_knn(&train, &labels, query.row(qi).as_slice().unwrap(), 10, 0.07) {
                mismatches += 1;
            }
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches over {total} queries in 20 instances"))
}

// ---------------------------------------------------------------- 8

fn determinism(_: &mut Shared) -> Verdict {
    let cfg = CorpusConfig {
        n_subjects: 3,
        samples_per_subject: 60,
        ..Default::default()
    };
    let mut samples = synthesize_corpus(&cfg).unwrap();
    let clean: Vec<PseudoLabelSet> = samples.iter().map(|x| label_sample(&Labeler::Oracle, x).unwrap()).collect();
    for (x, l) in samples.iter_mut().zip(
        inject_noise(
            &clean,
            &NoiseConfig {
                corrupt_fraction: 0.3,
                ..Default::default()
            },
            3,
        )
        .unwrap(),
    ) {
        x.set_pseudo(l);
    }
    let data = TrainSet::from_samples(&samples).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        seed: 5,
        ..Default::default()
    };
    let a = train_mtgls(&ModelConfig::default(), &data, &tc, None).unwrap();
    let b = train_mtgls(&ModelConfig::default(), &data, &tc, None).unwrap();
    let (ma, mb) = (comparable(&a.metrics), comparable(&b.metrics));
    let max_diff = ma
        .iter()
        .zip(&mb)
        .flat_map(|(x, y)| {
            let (x, y) = (serde_json::to_value(x).unwrap(), serde_json::to_value(y).unwrap());
            x.as_object()
                .unwrap()
                .iter()
                .map(|(k, v)| (v.as_f64().unwrap_or(0.0) - y[k].as_f64().unwrap_or(0.0)).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    let same_len = ma.len() == mb.len() && ma.len() == 3;
    let set = LabeledSet::from_samples(&samples, HeadKind::Gaze3d).unwrap();
    let before = a.model.backbone_digest();
    let lp = adapt::linear_probe(
        &a.model,
        &set,
        &AdaptConfig {
            epochs: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let frozen = lp.model.backbone_digest() == before;
    verdict(
        same_len && max_diff <= 1e-9 && frozen,
        format!(
            "max metric difference {max_diff:e} over {} epochs; backbone digest unchanged by LP: {frozen}",
            ma.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn gazerep(args: &[&str], out: &Path) -> Result<serde_json::Value, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_gazerep"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("`{}` exited with {}: {}", args[0], o.status, String::from_utf8_lossy(&o.stderr).trim()));
    }
    serde_json::from_slice(&o.stdout).map_err(|e| format!("`{}` printed no summary: {e}", args[0]))
}

fn smoke(_: &mut Shared) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    let run = || -> Result<String, String> {
        let s = |v: &serde_json::Value, k: &str| v[k].as_str().unwrap_or_default().to_string();
        let gen = gazerep(&["gen-data", "--subjects", "2", "--per-subject", "100", "--seed", "1"], out)?;
        let pl = gazerep(&["pseudo-label", "--manifest", &s(&gen, "manifest"), "--corrupt-fraction", "0.2"], out)?;
        let manifest = s(&pl, "manifest");
        let tr = gazerep(&["train", "--manifest", &manifest, "--epochs", "2"], out)?;
        let ck = s(&tr, "checkpoint");
        gazerep(&["probe", "--checkpoint", &ck, "--manifest", &manifest, "--epochs", "5"], out)?;
        gazerep(&["probe", "--checkpoint", &ck, "--manifest", &manifest, "--head", "zone", "--epochs", "5"], out)?;
        gazerep(&["finetune", "--checkpoint", &ck, "--manifest", &manifest, "--epochs", "1"], out)?;
        gazerep(&["knn", "--checkpoint", &ck, "--manifest", &manifest], out)?;
        gazerep(
            &[
                "calibrate",
                "--checkpoint",
                &ck,
                "--manifest",
                &manifest,
                "--set",
                "calibration.k_samples=[1,4]",
                "--set",
                "calibration.repeats=2",
                "--set",
                "adapt.epochs=5",
            ],
            out,
        )?;
        let report = tmp.path().join("report");
        let o = Command::new(env!("CARGO_BIN_EXE_gazerep"))
            .arg("report")
            .arg("--out")
            .arg(&report)
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("report exited with {}: {}", o.status, String::from_utf8_lossy(&o.stderr).trim()));
        }
        let missing: Vec<&str> = ["ablation.csv", "calibration.csv", "loss_curves.csv", "calibration.png", "loss_curves.png"]
            .into_iter()
            .filter(|f| !report.join(f).exists())
            .collect();
        if missing.is_empty() {
            Ok(format!("{} labeled samples, all commands exited 0", pl["labeled"]))
        } else {
            Err(format!("report lacks {missing:?}"))
        }
    };
    match run() {
        Ok(d) => verdict(true, d),
        Err(e) => verdict(false, e),
    }
}
