//! Auxiliary supervision: landmark line-of-sight pseudo-gaze, head pose and
//! eye side, plus controlled corruption for noisy-label experiments.
//!
//! The eyeball is a sphere of radius `r` pixels centered on the eye-corner
//! midpoint at reference depth `z0`. The pupil is lifted onto the
//! camera-facing hemisphere and the pseudo-gaze is the unit vector from the
//! center to that surface point.

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::EyeSample;
use crate::error::{Error, Result};
use crate::geometry::{EyeLandmarks, GazeVector, HeadPose6D, Side};
use crate::rng::{self, stream};

pub const DEFAULT_RADIUS_PX: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Oracle,
    Geometric,
    External,
}

/// Record of the corruption applied to one sample's labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub seed: u64,
    pub gaze_sigma_deg: f64,
    pub pose_sigma_rad: f64,
    /// Large rotation applied on top of the small perturbation, 0 if none.
    pub corrupt_deg: f64,
}

/// Auxiliary targets attached to one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub pseudo_gaze: GazeVector,
    pub head_pose: HeadPose6D,
    pub side: Side,
    pub source: LabelSource,
    pub noise_record: Option<NoiseRecord>,
}

/// 3-D eyeball center: corner midpoint at depth `z0`.
pub fn eyeball_center(lm: &EyeLandmarks, radius_px: f64, z0: f64) -> Result<[f64; 3]> {
    if !(radius_px > 0.0) {
        return Err(Error::Geometry(format!("eyeball radius must be positive, got {radius_px}")));
    }
    if lm.corner_distance() < 1e-9 {
        return Err(Error::Geometry("coincident eye corners".into()));
    }
    let [x, y] = lm.corner_midpoint();
    Ok([x, y, z0])
}

/// Line-of-sight gaze from the eyeball center to the lifted pupil.
pub fn los_pseudo_gaze(lm: &EyeLandmarks, radius_px: f64) -> Result<GazeVector> {
    let c = eyeball_center(lm, radius_px, 0.0)?;
    let dx = lm.pupil[0] - c[0];
    let dy = lm.pupil[1] - c[1];
    let d2 = dx * dx + dy * dy;
    let r2 = radius_px * radius_px;
    if !(d2 < r2) {
        return Err(Error::OffSphere {
            offset: d2.sqrt(),
            radius: radius_px,
        });
    }
    // near hemisphere: the surface point is closer to the camera (negative z)
    let dz = -(r2 - d2).sqrt();
    GazeVector::new([dx, dy, dz])
}

/// Where a gaze direction puts the pupil in the image, inverse of
/// [`los_pseudo_gaze`].
pub fn project_pupil(center: [f64; 2], gaze: &GazeVector, radius_px: f64) -> [f64; 2] {
    [center[0] + radius_px * gaze.x(), center[1] + radius_px * gaze.y()]
}

/// Source of auxiliary labels. `External` is the slot for real teacher
/// models whose outputs are precomputed into the manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Labeler {
    Oracle,
    Geometric { radius_px: f64 },
    External,
}

impl Labeler {
    pub fn parse(name: &str, radius_px: f64) -> Option<Labeler> {
        match name {
            "oracle" => Some(Labeler::Oracle),
            "geometric" => Some(Labeler::Geometric { radius_px }),
            "external" => Some(Labeler::External),
            _ => None,
        }
    }
}

pub fn label_sample(labeler: &Labeler, sample: &EyeSample) -> Result<PseudoLabelSet> {
    let missing = |field| Error::MissingField { id: sample.id.clone(), field };
    match *labeler {
        Labeler::Oracle => Ok(PseudoLabelSet {
            pseudo_gaze: sample.gt_gaze.ok_or_else(|| missing("gt_gaze"))?,
            head_pose: sample.gt_head.ok_or_else(|| missing("gt_head"))?,
            side: sample.side,
            source: LabelSource::Oracle,
            noise_record: None,
        }),
        Labeler::Geometric { radius_px } => {
            let lm = sample.landmarks.as_ref().ok_or_else(|| missing("landmarks"))?;
            if !lm.pupil_inside_hull() {
                log::warn!("sample {}: pupil outside eyelid hull", sample.id);
            }
            Ok(PseudoLabelSet {
                pseudo_gaze: los_pseudo_gaze(lm, radius_px)?,
                // head pose comes from the pose teacher; the synthetic stand-in is the render pose
                head_pose: sample.gt_head.or(sample.pseudo_head).ok_or_else(|| missing("gt_head"))?,
                side: sample.side,
                source: LabelSource::Geometric,
                noise_record: None,
            })
        }
        Labeler::External => Ok(PseudoLabelSet {
            pseudo_gaze: sample.pseudo_gaze.ok_or_else(|| missing("pseudo_gaze"))?,
            head_pose: sample.pseudo_head.ok_or_else(|| missing("pseudo_head"))?,
            side: sample.side,
            source: LabelSource::External,
            noise_record: sample.noise_record.clone(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub gaze_sigma_deg: f64,
    pub pose_sigma_rad: f64,
    pub corrupt_fraction: f64,
    pub large_corrupt_deg: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            gaze_sigma_deg: 0.0,
            pose_sigma_rad: 0.0,
            corrupt_fraction: 0.0,
            large_corrupt_deg: 20.0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaze_sigma_deg >= 0.0 && self.pose_sigma_rad >= 0.0 && self.large_corrupt_deg >= 0.0) {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return Err(Error::Config("corrupt_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.gaze_sigma_deg == 0.0 && self.pose_sigma_rad == 0.0 && self.corrupt_fraction == 0.0
    }
}

/// Two unit vectors completing `g` to an orthonormal basis.
fn tangent_basis(g: &GazeVector) -> ([f64; 3], [f64; 3]) {
    let v = g.as_array();
    let helper = if v[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize(cross(&v, &helper));
    let e2 = cross(&v, &e1);
    (e1, e2)
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Tilts `g` by `angle` radians toward the tangent direction `t`.
fn tilt(g: &GazeVector, t: [f64; 3], angle: f64) -> GazeVector {
    let axis = cross(&g.as_array(), &t);
    g.rotate_about(axis, angle)
}

/// Corrupts labels: each gaze gets an isotropic tangent-plane perturbation
/// with per-axis std `gaze_sigma_deg`, an exact `round(fraction * n)`
/// subset is additionally tilted by `large_corrupt_deg` in a random
/// direction, and every head-pose component gets Gaussian noise.
pub fn inject_noise(labels: &[PseudoLabelSet], cfg: &NoiseConfig, seed: u64) -> Result<Vec<PseudoLabelSet>> {
    cfg.validate()?;
    let n = labels.len();
    let n_corrupt = (cfg.corrupt_fraction * n as f64).round() as usize;
    let mut subset_rng = rng::rng_for(seed, stream::NOISE_SUBSET, 0);
    let mut corrupt = vec![false; n];
    for i in sample_indices(&mut subset_rng, n, n_corrupt.min(n)).iter() {
        corrupt[i] = true;
    }
    let sigma = cfg.gaze_sigma_deg.to_radians();
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut r = rng::rng_for(seed, stream::NOISE_SAMPLE, i as u64);
            let mut g = l.pseudo_gaze;
            let (e1, e2) = tangent_basis(&g);
            let a: f64 = StandardNormal.sample(&mut r);
            let b: f64 = StandardNormal.sample(&mut r);
            if sigma > 0.0 {
                let (u, v) = (a * sigma, b * sigma);
                let mag = u.hypot(v);
                if mag > 0.0 {
                    let t = [0, 1, 2].map(|k| (u * e1[k] + v * e2[k]) / mag);
                    g = tilt(&g, t, mag);
                }
            }
            let phi: f64 = r.gen_range(0.0..std::f64::consts::TAU);
            if corrupt[i] {
                let (e1, e2) = tangent_basis(&g);
                let t = [0, 1, 2].map(|k| phi.cos() * e1[k] + phi.sin() * e2[k]);
                g = tilt(&g, t, cfg.large_corrupt_deg.to_radians());
            }
            let mut h = l.head_pose.to_array();
            for v in h.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *v += z * cfg.pose_sigma_rad;
            }
            Ok(PseudoLabelSet {
                pseudo_gaze: GazeVector::new(g.as_array())?,
                head_pose: HeadPose6D::from_array(h),
                side: l.side,
                source: l.source,
                noise_record: Some(NoiseRecord {
                    seed,
                    gaze_sigma_deg: cfg.gaze_sigma_deg,
                    pose_sigma_rad: cfg.pose_sigma_rad,
                    corrupt_deg: if corrupt[i] { cfg.large_corrupt_deg } else { 0.0 },
                }),
            })
        })
        .collect()
}
