//! Synthetic eye-patch corpus: sample records, generation, and gaze zones.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EyeLandmarks, GazeVector, HeadPose6D, PitchYaw, Side};
use crate::manifest;
use crate::patch::Patch;
use crate::pseudolabel::{LabelSource, NoiseRecord, PseudoLabelSet};
use crate::render::{render_eye_patch, Appearance, RenderConfig};
use crate::rng::{self, stream};

/// Where a sample's pixels live.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Memory(Patch),
    File(PathBuf),
}

/// One eye-patch record.
#[derive(Debug, Clone, PartialEq)]
pub struct EyeSample {
    pub id: String,
    pub subject: String,
    pub side: Side,
    /// Path as written in the manifest, relative to the manifest directory.
    pub image_path: String,
    pub image: ImageSource,
    pub landmarks: Option<EyeLandmarks>,
    pub gt_gaze: Option<GazeVector>,
    pub gt_head: Option<HeadPose6D>,
    pub gt_zone: Option<usize>,
    pub pseudo_gaze: Option<GazeVector>,
    pub pseudo_head: Option<HeadPose6D>,
    pub pseudo_source: Option<LabelSource>,
    pub noise_record: Option<NoiseRecord>,
}

impl EyeSample {
    pub fn load_image(&self) -> Result<Patch> {
        match &self.image {
            ImageSource::Memory(p) => Ok(p.clone()),
            ImageSource::File(path) => Patch::load(path),
        }
    }

    /// Complete pseudo-label set, if both gaze and head pose are present.
    pub fn pseudo(&self) -> Option<PseudoLabelSet> {
        Some(PseudoLabelSet {
            pseudo_gaze: self.pseudo_gaze?,
            head_pose: self.pseudo_head?,
            side: self.side,
            source: self.pseudo_source.unwrap_or(LabelSource::External),
            noise_record: self.noise_record.clone(),
        })
    }

    pub fn set_pseudo(&mut self, labels: PseudoLabelSet) {
        self.pseudo_gaze = Some(labels.pseudo_gaze);
        self.pseudo_head = Some(labels.head_pose);
        self.pseudo_source = Some(labels.source);
        self.noise_record = labels.noise_record;
    }
}

/// Synthetic corpus parameters. Angles in degrees unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub width: usize,
    pub height: usize,
    pub pitch_range_deg: (f64, f64),
    pub yaw_range_deg: (f64, f64),
    /// Head rotation bounds (pitch, yaw, roll), radians, symmetric.
    pub head_rotation_max_rad: [f64; 3],
    pub translation_max: [f64; 2],
    pub depth_range: (f64, f64),
    /// Fraction of the gaze angles the head follows.
    pub head_gaze_coupling: f64,
    pub radius_px: f64,
    pub iris_darkness: (f64, f64),
    pub sclera_brightness: (f64, f64),
    pub skin_brightness: (f64, f64),
    pub illumination_gradient: f64,
    pub aperture: (f64, f64),
    pub pixel_noise_std: f64,
    /// Per-subject constant offset between rendered and true gaze.
    pub subject_bias_deg: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_subjects: 10,
            samples_per_subject: 200,
            width: 64,
            height: 48,
            pitch_range_deg: (-15.0, 15.0),
            yaw_range_deg: (-20.0, 20.0),
            head_rotation_max_rad: [0.2, 0.3, 0.2],
            translation_max: [0.1, 0.1],
            depth_range: (0.9, 1.1),
            head_gaze_coupling: 0.5,
            radius_px: 12.0,
            iris_darkness: (0.12, 0.35),
            sclera_brightness: (0.75, 0.95),
            skin_brightness: (0.45, 0.7),
            illumination_gradient: 0.15,
            aperture: (0.85, 1.15),
            pixel_noise_std: 0.01,
            subject_bias_deg: 0.0,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_subjects == 0 || self.samples_per_subject == 0 {
            return bad("corpus must have at least one subject and one sample per subject");
        }
        if self.width < 8 || self.height < 8 {
            return bad("patch must be at least 8x8");
        }
        for (name, (lo, hi)) in [
            ("pitch_range_deg", self.pitch_range_deg),
            ("yaw_range_deg", self.yaw_range_deg),
            ("depth_range", self.depth_range),
            ("iris_darkness", self.iris_darkness),
            ("sclera_brightness", self.sclera_brightness),
            ("skin_brightness", self.skin_brightness),
            ("aperture", self.aperture),
        ] {
            if !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-empty range")));
            }
        }
        if self.pitch_range_deg.1 <= self.pitch_range_deg.0 || self.yaw_range_deg.1 <= self.yaw_range_deg.0 {
            return bad("gaze ranges must have positive width");
        }
        if !(self.radius_px > 0.0) || self.subject_bias_deg < 0.0 || self.pixel_noise_std < 0.0 {
            return bad("radius must be positive; bias and noise non-negative");
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            width: self.width,
            height: self.height,
            radius_px: self.radius_px,
            half_width_px: self.radius_px,
        }
    }

    pub fn gaze_center(&self) -> PitchYaw {
        PitchYaw::from_degrees(
            (self.pitch_range_deg.0 + self.pitch_range_deg.1) / 2.0,
            (self.yaw_range_deg.0 + self.yaw_range_deg.1) / 2.0,
        )
    }

    pub fn zone_grid(&self, zones: usize) -> Result<ZoneGrid> {
        ZoneGrid::new(zones, self.pitch_range_deg, self.yaw_range_deg)
    }
}

fn uniform(r: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        r.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Per-subject constants.
#[derive(Debug, Clone, Copy)]
struct SubjectProfile {
    appearance: Appearance,
    bias_pitch_deg: f64,
    bias_yaw_deg: f64,
}

fn subject_profile(cfg: &CorpusConfig, s: usize) -> SubjectProfile {
    let mut r = rng::rng_for(cfg.seed, stream::CORPUS_SUBJECT, s as u64);
    let appearance = Appearance {
        skin: uniform(&mut r, cfg.skin_brightness),
        sclera: uniform(&mut r, cfg.sclera_brightness),
        iris: uniform(&mut r, cfg.iris_darkness),
        illumination_gradient: uniform(&mut r, (-cfg.illumination_gradient, cfg.illumination_gradient)),
        aperture: uniform(&mut r, cfg.aperture),
        noise_std: cfg.pixel_noise_std,
        noise_seed: 0,
    };
    let phi: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    SubjectProfile {
        appearance,
        bias_pitch_deg: cfg.subject_bias_deg * phi.sin(),
        bias_yaw_deg: cfg.subject_bias_deg * phi.cos(),
    }
}

pub fn subject_id(s: usize) -> String {
    format!("s{s:02}")
}

/// Renders sample `k` of subject `s`. The rendered pupil follows the
/// unbiased (optical) direction; `gt_gaze` adds the subject's bias.
pub fn synthesize_sample(cfg: &CorpusConfig, s: usize, k: usize) -> Result<EyeSample> {
    let profile = subject_profile(cfg, s);
    let index = (s * cfg.samples_per_subject + k) as u64;
    let mut r = rng::rng_for(cfg.seed, stream::CORPUS_SAMPLE, index);
    let render_cfg = cfg.render_config();
    let [mp, my, mr] = cfg.head_rotation_max_rad;
    // resample until renderable; the stream is per-sample so this stays deterministic
    for _ in 0..1000 {
        let pitch = uniform(&mut r, cfg.pitch_range_deg);
        let yaw = uniform(&mut r, cfg.yaw_range_deg);
        let side = if r.gen_bool(0.5) { Side::L } else { Side::R };
        let c = cfg.head_gaze_coupling;
        let head = HeadPose6D::new(
            [
                (c * pitch.to_radians() + uniform(&mut r, (-mp, mp)) * (1.0 - c)).clamp(-mp, mp),
                (c * yaw.to_radians() + uniform(&mut r, (-my, my)) * (1.0 - c)).clamp(-my, my),
                uniform(&mut r, (-mr, mr)),
            ],
            [
                uniform(&mut r, (-cfg.translation_max[0], cfg.translation_max[0])),
                uniform(&mut r, (-cfg.translation_max[1], cfg.translation_max[1])),
                uniform(&mut r, cfg.depth_range),
            ],
        );
        let mut app = profile.appearance;
        app.aperture *= uniform(&mut r, (0.92, 1.08));
        app.illumination_gradient += uniform(&mut r, (-0.03, 0.03));
        app.noise_seed = rng::derive_seed(cfg.seed, stream::CORPUS_SAMPLE, index);
        let optical = PitchYaw::from_degrees(pitch, yaw).to_vector();
        let (image, landmarks) = match render_eye_patch(&optical, &head, side, &app, &render_cfg) {
            Ok(v) => v,
            Err(Error::Render(_)) => continue,
            Err(e) => return Err(e),
        };
        let truth = PitchYaw::from_degrees(pitch + profile.bias_pitch_deg, yaw + profile.bias_yaw_deg).to_vector();
        let id = format!("{}_{k:05}", subject_id(s));
        return Ok(EyeSample {
            image_path: format!("images/{id}.png"),
            id,
            subject: subject_id(s),
            side,
            image: ImageSource::Memory(image),
            landmarks: Some(landmarks),
            gt_gaze: Some(truth),
            gt_head: Some(head),
            gt_zone: None,
            pseudo_gaze: None,
            pseudo_head: None,
            pseudo_source: None,
            noise_record: None,
        });
    }
    Err(Error::Render(format!("no renderable gaze found for subject {s} sample {k}")))
}

/// Renders the whole corpus in memory, subject-major order.
pub fn synthesize_corpus(cfg: &CorpusConfig) -> Result<Vec<EyeSample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_subjects * cfg.samples_per_subject);
    for s in 0..cfg.n_subjects {
        for k in 0..cfg.samples_per_subject {
            out.push(synthesize_sample(cfg, s, k)?);
        }
    }
    Ok(out)
}

/// Renders the corpus to `out_dir`: PNG images under `images/` plus
/// `manifest.jsonl`. Returns the manifest path and the samples, whose
/// images now point at the written files.
pub fn generate_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<(PathBuf, Vec<EyeSample>)> {
    let mut samples = synthesize_corpus(cfg)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    for s in samples.iter_mut() {
        let path = out_dir.join(&s.image_path);
        if let ImageSource::Memory(p) = &s.image {
            p.save_png(&path)?;
        }
        s.image = ImageSource::File(path);
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    manifest::write_manifest(&manifest_path, &samples)?;
    Ok((manifest_path, samples))
}

/// Square grid of gaze zones over a pitch/yaw range (degrees), row-major
/// with rows along pitch and columns along yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneGrid {
    pub per_side: usize,
    pub pitch_range_deg: (f64, f64),
    pub yaw_range_deg: (f64, f64),
}

impl ZoneGrid {
    pub fn new(zones: usize, pitch_range_deg: (f64, f64), yaw_range_deg: (f64, f64)) -> Result<Self> {
        let per_side = (zones as f64).sqrt().round() as usize;
        if zones == 0 || per_side * per_side != zones {
            return Err(Error::Config(format!("zone count {zones} is not a perfect square")));
        }
        Ok(ZoneGrid {
            per_side,
            pitch_range_deg,
            yaw_range_deg,
        })
    }

    pub fn zones(&self) -> usize {
        self.per_side * self.per_side
    }

    fn bin(&self, v: f64, (lo, hi): (f64, f64)) -> usize {
        let t = (v - lo) / (hi - lo);
        ((t * self.per_side as f64).floor().max(0.0) as usize).min(self.per_side - 1)
    }

    pub fn zone_of(&self, g: &GazeVector) -> usize {
        let py = g.to_pitchyaw();
        let row = self.bin(py.pitch.to_degrees(), self.pitch_range_deg);
        let col = self.bin(py.yaw.to_degrees(), self.yaw_range_deg);
        row * self.per_side + col
    }
}

pub fn derive_zone_labels(samples: &mut [EyeSample], grid: &ZoneGrid) -> Result<()> {
    for s in samples.iter_mut() {
        let g = s.gt_gaze.ok_or_else(|| Error::MissingField {
            id: s.id.clone(),
            field: "gt_gaze",
        })?;
        s.gt_zone = Some(grid.zone_of(&g));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angular_error_deg;
    use crate::pseudolabel::los_pseudo_gaze;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            n_subjects: 3,
            samples_per_subject: 20,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = synthesize_corpus(&small_cfg()).unwrap();
        let b = synthesize_corpus(&small_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
    }

    #[test]
    fn clean_render_relabels_to_truth() {
        let cfg = small_cfg();
        for s in synthesize_corpus(&cfg).unwrap() {
            let g = los_pseudo_gaze(s.landmarks.as_ref().unwrap(), cfg.radius_px).unwrap();
            assert!(angular_error_deg(&g, &s.gt_gaze.unwrap()).unwrap() < 1e-6);
        }
    }

    #[test]
    fn subject_bias_shifts_subject_means() {
        let cfg = CorpusConfig {
            n_subjects: 4,
            samples_per_subject: 400,
            subject_bias_deg: 3.0,
            ..Default::default()
        };
        let samples = synthesize_corpus(&cfg).unwrap();
        let center = cfg.gaze_center();
        for s in 0..cfg.n_subjects {
            let sid = subject_id(s);
            let rows: Vec<_> = samples.iter().filter(|x| x.subject == sid).collect();
            let n = rows.len() as f64;
            let mp = rows.iter().map(|x| x.gt_gaze.unwrap().to_pitchyaw().pitch.to_degrees()).sum::<f64>() / n;
            let my = rows.iter().map(|x| x.gt_gaze.unwrap().to_pitchyaw().yaw.to_degrees()).sum::<f64>() / n;
            let dev = (mp - center.pitch.to_degrees()).hypot(my - center.yaw.to_degrees());
            // sampling error of the mean of a uniform +-20 deg range over 400 draws is ~0.6 deg
            assert!((dev - 3.0).abs() < 1.5, "subject {sid}: deviation {dev}");
            // the image does not carry the bias
            let los = los_pseudo_gaze(rows[0].landmarks.as_ref().unwrap(), cfg.radius_px).unwrap();
            let e = angular_error_deg(&los, &rows[0].gt_gaze.unwrap()).unwrap();
            assert!((e - 3.0).abs() < 0.3, "{e}");
        }
    }

    #[test]
    fn zone_anchor_values() {
        let grid = ZoneGrid::new(9, (-15.0, 15.0), (-20.0, 20.0)).unwrap();
        assert_eq!(grid.zone_of(&GazeVector::FRONTAL), 4);
        assert_eq!(grid.zone_of(&PitchYaw::from_degrees(-15.0, -20.0).to_vector()), 0);
        assert_eq!(grid.zone_of(&PitchYaw::from_degrees(15.0, 20.0).to_vector()), 8);
        assert!(ZoneGrid::new(8, (-1.0, 1.0), (-1.0, 1.0)).is_err());
    }

    #[test]
    fn zone_occupancy_is_uniform() {
        let cfg = CorpusConfig {
            n_subjects: 4,
            samples_per_subject: 450,
            pixel_noise_std: 0.0,
            ..Default::default()
        };
        let mut samples = synthesize_corpus(&cfg).unwrap();
        derive_zone_labels(&mut samples, &cfg.zone_grid(9).unwrap()).unwrap();
        let n = samples.len() as f64;
        let p = 1.0 / 9.0;
        let sd = (n * p * (1.0 - p)).sqrt();
        for z in 0..9 {
            let c = samples.iter().filter(|s| s.gt_zone == Some(z)).count() as f64;
            assert!((c - n * p).abs() < 3.0 * sd, "zone {z}: {c} vs {}", n * p);
        }
    }

    #[test]
    fn zones_need_gaze() {
        let mut samples = synthesize_corpus(&small_cfg()).unwrap();
        samples[3].gt_gaze = None;
        let r = derive_zone_labels(&mut samples, &small_cfg().zone_grid(9).unwrap());
        assert!(matches!(r, Err(Error::MissingField { field: "gt_gaze", .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = CorpusConfig {
            yaw_range_deg: (5.0, -5.0),
            ..Default::default()
        };
        assert!(synthesize_corpus(&cfg).is_err());
    }
}
