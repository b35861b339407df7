//! Parametric eye-patch renderer with exact ground truth.
//!
//! The pupil is drawn at the sphere projection of the gaze vector about the
//! corner midpoint, the exact inverse of the line-of-sight labeler. Head
//! pose rolls and shears the eyelid geometry; translation shifts it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EyeLandmarks, GazeVector, HeadPose6D, Side};
use crate::patch::Patch;
use crate::pseudolabel::project_pupil;
use crate::rng;

/// Per-render appearance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub skin: f64,
    pub sclera: f64,
    pub iris: f64,
    /// Brightness slope from the nasal to the temporal corner.
    pub illumination_gradient: f64,
    /// Eyelid opening multiplier.
    pub aperture: f64,
    /// Std of additive pixel noise; 0 disables it.
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance {
            skin: 0.6,
            sclera: 0.85,
            iris: 0.25,
            illumination_gradient: 0.0,
            aperture: 1.0,
            noise_std: 0.0,
            noise_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub radius_px: f64,
    /// Half the corner-to-corner distance at unit depth and zero yaw.
    pub half_width_px: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 64,
            height: 48,
            radius_px: 12.0,
            half_width_px: 12.0,
        }
    }
}

const UPPER_LID_PX: f64 = 7.0;
const LOWER_LID_PX: f64 = 5.5;
const IRIS_RATIO: f64 = 0.45;
const PUPIL_RATIO: f64 = 0.18;
const TRANSLATION_SCALE: f64 = 16.0;

/// Eyelid geometry in the local eye frame: `u` along the corner axis
/// (image-right before roll), `v` down.
struct EyeFrame {
    center: [f64; 2],
    roll_cos: f64,
    roll_sin: f64,
    shear: f64,
    half_width: f64,
    upper: f64,
    lower: f64,
    // +1 when the nasal corner is at negative u
    nasal_sign: f64,
}

impl EyeFrame {
    fn new(gaze: &GazeVector, head: &HeadPose6D, side: Side, app: &Appearance, cfg: &RenderConfig) -> Self {
        let [hp, hy, hr] = head.rotation;
        let [tx, ty, tz] = head.translation;
        let gaze_pitch = gaze.to_pitchyaw().pitch;
        let center = [
            cfg.width as f64 / 2.0 + tx * TRANSLATION_SCALE,
            cfg.height as f64 / 2.0 + ty * TRANSLATION_SCALE * 0.75,
        ];
        EyeFrame {
            center,
            roll_cos: hr.cos(),
            roll_sin: hr.sin(),
            shear: 0.5 * hy.sin(),
            half_width: cfg.half_width_px * (0.85 + 0.15 * hy.cos()) / tz.max(0.25),
            upper: UPPER_LID_PX * app.aperture * (1.0 + 0.25 * gaze_pitch.sin()) * (1.0 + 0.2 * hp.sin()),
            lower: LOWER_LID_PX * app.aperture,
            nasal_sign: match side {
                Side::L => 1.0,
                Side::R => -1.0,
            },
        }
    }

    fn to_image(&self, u: f64, v: f64) -> [f64; 2] {
        let x = u + self.shear * v;
        [
            self.center[0] + self.roll_cos * x - self.roll_sin * v,
            self.center[1] + self.roll_sin * x + self.roll_cos * v,
        ]
    }

    fn to_local(&self, p: [f64; 2]) -> (f64, f64) {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let x = self.roll_cos * dx + self.roll_sin * dy;
        let v = -self.roll_sin * dx + self.roll_cos * dy;
        (x - self.shear * v, v)
    }

    /// Signed position along the nasal-to-temporal axis, in `[-1, 1]` on the eye.
    fn temporal(&self, u: f64) -> f64 {
        self.nasal_sign * u / self.half_width
    }

    fn upper_lid(&self, u: f64) -> f64 {
        let t = u / self.half_width;
        -self.upper * (1.0 - t * t) * (1.0 + 0.15 * self.temporal(u))
    }

    fn lower_lid(&self, u: f64) -> f64 {
        let t = u / self.half_width;
        self.lower * (1.0 - t * t) * (1.0 - 0.1 * self.temporal(u))
    }

    fn inside_opening(&self, u: f64, v: f64) -> bool {
        u.abs() < self.half_width && v > self.upper_lid(u) && v < self.lower_lid(u)
    }

    fn landmarks(&self, pupil: [f64; 2]) -> EyeLandmarks {
        let a = self.half_width;
        let s = self.nasal_sign;
        let mut contour = Vec::with_capacity(6);
        for k in [-0.5, 0.0, 0.5] {
            let u = s * k * a;
            contour.push(self.to_image(u, self.upper_lid(u)));
        }
        for k in [0.5, 0.0, -0.5] {
            let u = s * k * a;
            contour.push(self.to_image(u, self.lower_lid(u)));
        }
        EyeLandmarks {
            corners: [self.to_image(-s * a, 0.0), self.to_image(s * a, 0.0)],
            contour,
            pupil,
        }
    }
}

/// Renders one eye patch and its landmarks.
pub fn render_eye_patch(gaze: &GazeVector, head: &HeadPose6D, side: Side, app: &Appearance, cfg: &RenderConfig) -> Result<(Patch, EyeLandmarks)> {
    if !head.is_finite() {
        return Err(Error::NonFinite("head pose".into()));
    }
    if gaze.z() >= 0.0 {
        return Err(Error::Render("gaze points away from the camera".into()));
    }
    let frame = EyeFrame::new(gaze, head, side, app, cfg);
    let pupil = project_pupil(frame.center, gaze, cfg.radius_px);
    let (pu, pv) = frame.to_local(pupil);
    if !frame.inside_opening(pu, pv) {
        return Err(Error::Render(format!("pupil at local ({pu:.2}, {pv:.2}) leaves the eye opening")));
    }

    let iris_r = IRIS_RATIO * cfg.radius_px;
    let pupil_r = PUPIL_RATIO * cfg.radius_px;
    // iris disc foreshortened along the offset direction
    let off = [pupil[0] - frame.center[0], pupil[1] - frame.center[1]];
    let off_n = off[0].hypot(off[1]);
    let radial = if off_n > 1e-12 { [off[0] / off_n, off[1] / off_n] } else { [1.0, 0.0] };
    let squash = (-gaze.z()).max(0.2);
    let duct_u = -frame.nasal_sign * (frame.half_width - 1.5);
    let duct = frame.to_image(duct_u, 0.0);

    let shade = |x: f64, y: f64| -> f64 {
        let (u, v) = frame.to_local([x, y]);
        let light = 1.0 + app.illumination_gradient * frame.temporal(u).clamp(-1.5, 1.5);
        let dd = (x - duct[0]).hypot(y - duct[1]);
        if dd < 1.5 {
            return 0.42 * light;
        }
        if frame.inside_opening(u, v) {
            let dx = x - pupil[0];
            let dy = y - pupil[1];
            let along = (dx * radial[0] + dy * radial[1]) / squash;
            let across = -dx * radial[1] + dy * radial[0];
            let rr = along.hypot(across);
            let base = if rr < pupil_r {
                0.04
            } else if rr < iris_r {
                app.iris
            } else {
                app.sclera
            };
            // soft shadow under the upper lid
            let depth = (v - frame.upper_lid(u)).clamp(0.0, 2.0) / 2.0;
            base * (0.8 + 0.2 * depth) * light
        } else {
            let lid_gap = (v - frame.upper_lid(u)).abs().min((v - frame.lower_lid(u)).abs());
            let edge = if u.abs() <= frame.half_width + 1.0 && lid_gap < 0.8 { 0.55 } else { 1.0 };
            app.skin * edge * light
        }
    };

    let mut noise = if app.noise_std > 0.0 {
        Some(rng::rng_for(app.noise_seed, rng::stream::CORPUS_SAMPLE, u64::MAX))
    } else {
        None
    };
    let offsets = [0.25, 0.75];
    let img = Patch::from_fn(cfg.width, cfg.height, |i, j| {
        let mut acc = 0.0;
        for oy in offsets {
            for ox in offsets {
                acc += shade(i as f64 + ox, j as f64 + oy);
            }
        }
        let mut v = acc / 4.0;
        if let Some(r) = noise.as_mut() {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, r);
            v += z * app.noise_std;
        }
        v.clamp(0.0, 1.0) as f32
    });
    Ok((img, frame.landmarks(pupil)))
}
