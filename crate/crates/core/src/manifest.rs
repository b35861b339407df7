//! Line-delimited JSON manifest.
//!
//! One record per line with fields `id, subject, side, image_path,
//! landmarks, pupil` and the optional `gt_gaze, gt_head, gt_zone,
//! pseudo_gaze, pseudo_head, pseudo_source, noise_record`. Floats are
//! written in scientific notation with 17 significant digits so a
//! write/load/write cycle is byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::ser::Error as _;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::corpus::{EyeSample, ImageSource};
use crate::error::{Error, Result};
use crate::geometry::{EyeLandmarks, GazeVector, HeadPose6D, Side};
use crate::pseudolabel::{LabelSource, NoiseRecord};
use crate::rng;

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn raw_floats<S: Serializer>(vals: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
        return Err(S::Error::custom(format!("non-finite value {bad}")));
    }
    let body: Vec<String> = vals.iter().map(|&v| format_float(v)).collect();
    RawValue::from_string(format!("[{}]", body.join(","))).map_err(S::Error::custom)?.serialize(s)
}

fn ser_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    raw_floats(v, s)
}

fn ser_opt_vec<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => raw_floats(v, s),
        None => s.serialize_none(),
    }
}

fn ser_float<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if !v.is_finite() {
        return Err(S::Error::custom(format!("non-finite value {v}")));
    }
    RawValue::from_string(format_float(*v)).map_err(S::Error::custom)?.serialize(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseField {
    seed: u64,
    #[serde(serialize_with = "ser_float")]
    gaze_sigma_deg: f64,
    #[serde(serialize_with = "ser_float")]
    pose_sigma_rad: f64,
    #[serde(serialize_with = "ser_float")]
    corrupt_deg: f64,
}

/// Serialized form of one manifest row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub subject: String,
    pub side: String,
    pub image_path: String,
    #[serde(serialize_with = "ser_vec")]
    pub landmarks: Vec<f64>,
    #[serde(serialize_with = "ser_vec")]
    pub pupil: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_vec")]
    pub gt_gaze: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_vec")]
    pub gt_head: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_zone: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_vec")]
    pub pseudo_gaze: Option<Vec<f64>>,
    #[serde(default, alias = "head_pose", skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_vec")]
    pub pseudo_head: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_source: Option<LabelSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_record: Option<NoiseField>,
}

fn fixed<const N: usize>(v: &[f64], field: &str) -> std::result::Result<[f64; N], String> {
    if v.len() != N {
        return Err(format!("field `{field}` needs {N} values, got {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(format!("field `{field}` has a non-finite value"));
    }
    let mut out = [0.0; N];
    out.copy_from_slice(v);
    Ok(out)
}

impl ManifestRecord {
    pub fn from_sample(s: &EyeSample) -> Result<Self> {
        let lm = s.landmarks.as_ref().ok_or_else(|| Error::MissingField {
            id: s.id.clone(),
            field: "landmarks",
        })?;
        Ok(ManifestRecord {
            id: s.id.clone(),
            subject: s.subject.clone(),
            side: s.side.to_string(),
            image_path: s.image_path.clone(),
            landmarks: lm.flatten(),
            pupil: lm.pupil.to_vec(),
            gt_gaze: s.gt_gaze.map(|g| g.as_array().to_vec()),
            gt_head: s.gt_head.map(|h| h.to_array().to_vec()),
            gt_zone: s.gt_zone,
            pseudo_gaze: s.pseudo_gaze.map(|g| g.as_array().to_vec()),
            pseudo_head: s.pseudo_head.map(|h| h.to_array().to_vec()),
            pseudo_source: s.pseudo_source,
            noise_record: s.noise_record.as_ref().map(|n| NoiseField {
                seed: n.seed,
                gaze_sigma_deg: n.gaze_sigma_deg,
                pose_sigma_rad: n.pose_sigma_rad,
                corrupt_deg: n.corrupt_deg,
            }),
        })
    }

    fn into_sample(self, root: &Path) -> std::result::Result<EyeSample, String> {
        let side = Side::parse(&self.side).ok_or_else(|| format!("side must be \"L\" or \"R\", got {:?}", self.side))?;
        let pupil = fixed::<2>(&self.pupil, "pupil")?;
        let landmarks = EyeLandmarks::from_flat(&self.landmarks, pupil).map_err(|e| e.to_string())?;
        let gaze = |v: Option<Vec<f64>>, f: &str| -> std::result::Result<Option<GazeVector>, String> {
            v.map(|v| fixed::<3>(&v, f).and_then(|a| GazeVector::new(a).map_err(|e| e.to_string())))
                .transpose()
        };
        let head = |v: Option<Vec<f64>>, f: &str| -> std::result::Result<Option<HeadPose6D>, String> {
            v.map(|v| fixed::<6>(&v, f).map(HeadPose6D::from_array)).transpose()
        };
        Ok(EyeSample {
            image: ImageSource::File(root.join(&self.image_path)),
            gt_gaze: gaze(self.gt_gaze, "gt_gaze")?,
            gt_head: head(self.gt_head, "gt_head")?,
            pseudo_gaze: gaze(self.pseudo_gaze, "pseudo_gaze")?,
            pseudo_head: head(self.pseudo_head, "pseudo_head")?,
            id: self.id,
            subject: self.subject,
            side,
            image_path: self.image_path,
            landmarks: Some(landmarks),
            gt_zone: self.gt_zone,
            pseudo_source: self.pseudo_source,
            noise_record: self.noise_record.map(|n| NoiseRecord {
                seed: n.seed,
                gaze_sigma_deg: n.gaze_sigma_deg,
                pose_sigma_rad: n.pose_sigma_rad,
                corrupt_deg: n.corrupt_deg,
            }),
        })
    }
}

pub fn write_manifest(path: &Path, samples: &[EyeSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        let rec = ManifestRecord::from_sample(s)?;
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Named partition of a train/val/test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

/// Split fractions; the assignment of a sample depends only on its id and
/// `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, val: 0.1, seed: 0 }
    }
}

impl SplitSpec {
    pub fn assign(&self, id: &str) -> SplitPart {
        let h = rng::derive_seed(self.seed, rng::stream::SPLIT, rng::hash_str(id));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.train {
            SplitPart::Train
        } else if u < self.train + self.val {
            SplitPart::Val
        } else {
            SplitPart::Test
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ManifestFilter {
    pub subjects: Option<Vec<String>>,
    pub sides: Option<Vec<Side>>,
    pub split: Option<(SplitSpec, SplitPart)>,
}

impl ManifestFilter {
    pub fn accepts(&self, s: &EyeSample) -> bool {
        self.subjects.as_ref().is_none_or(|v| v.iter().any(|x| x == &s.subject))
            && self.sides.as_ref().is_none_or(|v| v.contains(&s.side))
            && self.split.is_none_or(|(spec, part)| spec.assign(&s.id) == part)
    }
}

/// Reads a manifest, keeping rows that pass `filter` in file order. Image
/// paths are resolved against the manifest directory and checked for
/// existence; pixels are loaded on demand.
pub fn load_manifest(path: &Path, filter: &ManifestFilter) -> Result<Vec<EyeSample>> {
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let id = rec.id.clone();
        let sample = rec.into_sample(root).map_err(|msg| Error::Parse {
            line: lineno,
            msg: format!("{id}: {msg}"),
        })?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate id {}", sample.id),
            });
        }
        if !filter.accepts(&sample) {
            continue;
        }
        if let ImageSource::File(p) = &sample.image {
            if !p.exists() {
                return Err(Error::ImageLoad {
                    path: p.clone(),
                    msg: "file not found".into(),
                });
            }
        }
        out.push(sample);
    }
    Ok(out)
}
