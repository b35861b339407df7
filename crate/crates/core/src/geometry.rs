//! Gaze and head-pose vector math.
//!
//! Camera frame: x right, y down, z away from the camera. A gaze vector
//! points from the eye toward the target, so a frontal gaze is `(0, 0, -1)`.
//! Image-plane points use continuous pixel coordinates where pixel `(i, j)`
//! covers `[i, i+1) x [j, j+1)`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::Patch;

/// Unit 3-vector gaze direction in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeVector([f64; 3]);

impl GazeVector {
    pub const FRONTAL: GazeVector = GazeVector([0.0, 0.0, -1.0]);

    /// Normalizes `v` to unit length.
    pub fn new(v: [f64; 3]) -> Result<Self> {
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("gaze vector {v:?}")));
        }
        let n = norm3(&v);
        if n < 1e-12 {
            return Err(Error::Geometry("zero-length gaze vector".into()));
        }
        // already unit up to rounding: keep the bits so serialization round-trips
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(GazeVector(v));
        }
        Ok(GazeVector([v[0] / n, v[1] / n, v[2] / n]))
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn z(&self) -> f64 {
        self.0[2]
    }

    pub fn dot(&self, other: &GazeVector) -> f64 {
        dot3(&self.0, &other.0)
    }

    pub fn to_pitchyaw(&self) -> PitchYaw {
        vector_to_pitchyaw(*self)
    }

    /// Rotates the image-plane components by `angle` (same sense as
    /// [`rotate_point`]); z is unchanged.
    pub fn rotate_in_plane(&self, angle: f64) -> GazeVector {
        let (s, c) = angle.sin_cos();
        let [x, y, z] = self.0;
        // rotation preserves the norm; renormalize to absorb rounding
        GazeVector::new([c * x - s * y, s * x + c * y, z]).expect("rotation of a unit vector")
    }

    /// Rotates by `angle` radians about an arbitrary unit axis (Rodrigues).
    pub fn rotate_about(&self, axis: [f64; 3], angle: f64) -> GazeVector {
        let n = norm3(&axis);
        let k = [axis[0] / n, axis[1] / n, axis[2] / n];
        let v = self.0;
        let (s, c) = angle.sin_cos();
        let kxv = cross3(&k, &v);
        let kdv = dot3(&k, &v);
        let r = [
            v[0] * c + kxv[0] * s + k[0] * kdv * (1.0 - c),
            v[1] * c + kxv[1] * s + k[1] * kdv * (1.0 - c),
            v[2] * c + kxv[2] * s + k[2] * kdv * (1.0 - c),
        ];
        GazeVector::new(r).expect("rotation of a unit vector")
    }
}

/// Angular gaze parameterization in radians.
///
/// Positive pitch looks up, positive yaw looks toward the camera's left
/// (negative x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchYaw {
    pub pitch: f64,
    pub yaw: f64,
}

impl PitchYaw {
    pub fn new(pitch: f64, yaw: f64) -> Self {
        PitchYaw { pitch, yaw }
    }

    pub fn from_degrees(pitch: f64, yaw: f64) -> Self {
        PitchYaw {
            pitch: pitch.to_radians(),
            yaw: yaw.to_radians(),
        }
    }

    pub fn to_vector(self) -> GazeVector {
        pitchyaw_to_vector(self)
    }
}

/// 6-DoF head pose: Euler rotation (pitch, yaw, roll) in radians and a
/// translation in normalized face-box units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPose6D {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl HeadPose6D {
    pub const IDENTITY: HeadPose6D = HeadPose6D {
        rotation: [0.0; 3],
        translation: [0.0, 0.0, 1.0],
    };

    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        HeadPose6D {
            rotation: rotation.map(wrap_angle),
            translation,
        }
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        HeadPose6D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.rotation;
        let [d, e, f] = self.translation;
        [a, b, c, d, e, f]
    }

    pub fn pitch(&self) -> f64 {
        self.rotation[0]
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[1]
    }

    pub fn roll(&self) -> f64 {
        self.rotation[2]
    }

    /// Rotation matrix `Rz(roll) * Ry(yaw) * Rx(pitch)`, row-major.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let (sp, cp) = self.rotation[0].sin_cos();
        let (sy, cy) = self.rotation[1].sin_cos();
        let (sr, cr) = self.rotation[2].sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&matmul3(&rz, &ry), &rx)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }
}

/// Which eye a patch depicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    L,
    R,
}

impl Side {
    pub fn flipped(self) -> Side {
        match self {
            Side::L => Side::R,
            Side::R => Side::L,
        }
    }

    /// Class index used by the eye-orientation head (L = 0, R = 1).
    pub fn class_index(self) -> usize {
        match self {
            Side::L => 0,
            Side::R => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "L" | "l" => Some(Side::L),
            "R" | "r" => Some(Side::R),
            _ => None,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::L => f.write_str("L"),
            Side::R => f.write_str("R"),
        }
    }
}

/// `v = (-cos(p) sin(y), -sin(p), -cos(p) cos(y))`.
pub fn pitchyaw_to_vector(py: PitchYaw) -> GazeVector {
    let (sp, cp) = py.pitch.sin_cos();
    let (sy, cy) = py.yaw.sin_cos();
    GazeVector([-cp * sy, -sp, -cp * cy])
}

pub fn vector_to_pitchyaw(v: GazeVector) -> PitchYaw {
    let [x, y, z] = v.0;
    PitchYaw {
        pitch: (-y).clamp(-1.0, 1.0).asin(),
        yaw: (-x).atan2(-z),
    }
}

/// Angle between two gaze directions in degrees, in `[0, 180]`.
pub fn angular_error_deg(a: &GazeVector, b: &GazeVector) -> Result<f64> {
    angular_error_deg_raw(&a.0, &b.0)
}

/// Same as [`angular_error_deg`] for raw (not necessarily unit) 3-vectors.
pub fn angular_error_deg_raw(a: &[f64; 3], b: &[f64; 3]) -> Result<f64> {
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("angular error of {a:?} and {b:?}")));
    }
    let na = norm3(a);
    let nb = norm3(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Geometry("zero-length vector in angular error".into()));
    }
    let c = (dot3(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(c.acos().to_degrees())
}

/// Label transform matching a horizontal mirror of the image.
pub fn flip_labels(gaze: Option<GazeVector>, head: Option<HeadPose6D>, side: Side) -> (Option<GazeVector>, Option<HeadPose6D>, Side) {
    let gaze = gaze.map(|g| {
        let [x, y, z] = g.0;
        GazeVector([-x, y, z])
    });
    let head = head.map(|h| HeadPose6D {
        rotation: [h.rotation[0], negate_angle(h.rotation[1]), negate_angle(h.rotation[2])],
        translation: [-h.translation[0], h.translation[1], h.translation[2]],
    });
    (gaze, head, side.flipped())
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

// -pi stays representable as pi under negation inside (-pi, pi]
fn negate_angle(a: f64) -> f64 {
    if a == PI {
        PI
    } else {
        -a
    }
}

/// Rotates `p` about `center` by `angle` radians using the image-plane
/// matrix `[[cos, -sin], [sin, cos]]`.
pub fn rotate_point(p: [f64; 2], center: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
}

/// Eye-region landmarks in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeLandmarks {
    /// `[inner, outer]` eye corners.
    pub corners: [[f64; 2]; 2],
    /// Points along the eyelid margins (at least four).
    pub contour: Vec<[f64; 2]>,
    pub pupil: [f64; 2],
}

impl EyeLandmarks {
    pub fn corner_midpoint(&self) -> [f64; 2] {
        let [a, b] = self.corners;
        [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
    }

    pub fn corner_distance(&self) -> f64 {
        let [a, b] = self.corners;
        (b[0] - a[0]).hypot(b[1] - a[1])
    }

    /// Applies `p -> dst + scale * R(angle) (p - src)` to every point.
    pub fn transformed(&self, src: [f64; 2], dst: [f64; 2], angle: f64, scale: f64) -> EyeLandmarks {
        let map = |p: [f64; 2]| {
            let r = rotate_point(p, src, angle);
            [dst[0] + scale * (r[0] - src[0]), dst[1] + scale * (r[1] - src[1])]
        };
        EyeLandmarks {
            corners: [map(self.corners[0]), map(self.corners[1])],
            contour: self.contour.iter().copied().map(map).collect(),
            pupil: map(self.pupil),
        }
    }

    /// Flattened `[inner.x, inner.y, outer.x, outer.y, contour...]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 + 2 * self.contour.len());
        for p in self.corners.iter().chain(self.contour.iter()) {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_flat(flat: &[f64], pupil: [f64; 2]) -> Result<Self> {
        if flat.len() < 12 || !flat.len().is_multiple_of(2) {
            return Err(Error::Geometry(format!(
                "landmark list needs an even count >= 12 (2 corners + 4 contour points), got {}",
                flat.len()
            )));
        }
        let pts: Vec<[f64; 2]> = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Ok(EyeLandmarks {
            corners: [pts[0], pts[1]],
            contour: pts[2..].to_vec(),
            pupil,
        })
    }

    /// Checks the pupil against the convex hull of contour and corners.
    /// A miss is reported, not rejected: it happens on blinks.
    pub fn pupil_inside_hull(&self) -> bool {
        let mut pts: Vec<[f64; 2]> = self.contour.clone();
        pts.extend_from_slice(&self.corners);
        let hull = convex_hull(&pts);
        if hull.len() < 3 {
            return false;
        }
        let p = self.pupil;
        (0..hull.len()).all(|i| {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= -1e-9
        })
    }
}

// Andrew's monotone chain, counter-clockwise in a y-up sense.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Target geometry of a normalized eye patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConfig {
    /// Corner-to-corner distance after normalization, in pixels.
    pub corner_distance_px: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig {
            corner_distance_px: 24.0,
            width: 64,
            height: 48,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormalizedSample {
    pub image: Patch,
    pub landmarks: EyeLandmarks,
    /// In-plane rotation applied to the image, in radians.
    pub rotation: f64,
    pub scale: f64,
}

impl NormalizedSample {
    /// Maps a gaze label from the normalized frame back to the source frame.
    pub fn counter_rotate(&self, gaze: GazeVector) -> GazeVector {
        gaze.rotate_in_plane(-self.rotation)
    }
}

/// Removes in-plane roll and rescales an eye patch so the corner axis is
/// horizontal with a fixed length, centered in the output patch.
///
/// Only roll and scale are corrected; the head pose is accepted so a full
/// perspective normalization can slot in behind the same signature.
pub fn normalize_sample(image: &Patch, landmarks: &EyeLandmarks, head: &HeadPose6D, cfg: &NormalizationConfig) -> Result<NormalizedSample> {
    if !head.is_finite() {
        return Err(Error::NonFinite("head pose".into()));
    }
    let [a, b] = landmarks.corners;
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let dist = dx.hypot(dy);
    if !dist.is_finite() || dist < 1e-9 {
        return Err(Error::Geometry("coincident eye corners".into()));
    }
    let rotation = if dx.abs() < 1e-12 { -dy.signum() * PI / 2.0 } else { -(dy / dx).atan() };
    let scale = cfg.corner_distance_px / dist;
    let src = landmarks.corner_midpoint();
    let dst = [cfg.width as f64 / 2.0, cfg.height as f64 / 2.0];

    let (s, c) = (-rotation).sin_cos();
    let out = Patch::from_fn(cfg.width, cfg.height, |i, j| {
        let qx = (i as f64 + 0.5 - dst[0]) / scale;
        let qy = (j as f64 + 0.5 - dst[1]) / scale;
        let px = src[0] + c * qx - s * qy;
        let py = src[1] + s * qx + c * qy;
        image.sample_bilinear(px, py)
    });
    Ok(NormalizedSample {
        image: out,
        landmarks: landmarks.transformed(src, dst, rotation, scale),
        rotation,
        scale,
    })
}

pub(crate) fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn pitchyaw_anchor_values() {
        assert!(close(PitchYaw::new(0.0, 0.0).to_vector().as_array(), [0.0, 0.0, -1.0], 1e-15));
        assert!(close(PitchYaw::new(0.0, PI / 2.0).to_vector().as_array(), [-1.0, 0.0, 0.0], 1e-15));
        // sin(10 deg) = 0.173648, cos(10 deg) = 0.984808
        let v = PitchYaw::from_degrees(10.0, 0.0).to_vector().as_array();
        assert!(close(v, [0.0, -0.17365, -0.98481], 1e-5));
    }

    #[test]
    fn angular_error_anchor_values() {
        let f = GazeVector::FRONTAL;
        assert_eq!(angular_error_deg(&f, &f).unwrap(), 0.0);
        let x = GazeVector::new([1.0, 0.0, 0.0]).unwrap();
        let y = GazeVector::new([0.0, 1.0, 0.0]).unwrap();
        assert!((angular_error_deg(&x, &y).unwrap() - 90.0).abs() < 1e-12);
        // b = a rotated 10 deg about x
        let a = GazeVector::new([0.0, 0.0, 1.0]).unwrap();
        let b = a.rotate_about([1.0, 0.0, 0.0], -10f64.to_radians());
        assert!(close(b.as_array(), [0.0, 0.17365, 0.98481], 1e-5));
        assert!((angular_error_deg(&a, &b).unwrap() - 10.0).abs() < 1e-4);
    }

    #[test]
    fn angular_error_rejects_non_finite() {
        assert!(angular_error_deg_raw(&[f64::NAN, 0.0, 1.0], &[0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn parallel_vectors_do_not_produce_nan() {
        let a = GazeVector::new([0.3, -0.2, -0.9]).unwrap();
        let e = angular_error_deg(&a, &a).unwrap();
        assert!(e.is_finite() && e < 1e-5);
    }

    #[test]
    fn flip_anchor_values() {
        let g = GazeVector([0.3, -0.2, -0.933]);
        let h = HeadPose6D::new([0.1, 0.4, -0.2], [0.05, 0.0, 1.0]);
        let (g2, h2, s2) = flip_labels(Some(g), Some(h), Side::L);
        assert_eq!(g2.unwrap().as_array(), [-0.3, -0.2, -0.933]);
        assert_eq!(h2.unwrap().to_array(), [0.1, -0.4, 0.2, -0.05, 0.0, 1.0]);
        assert_eq!(s2, Side::R);
        assert_eq!(flip_labels(None, None, Side::R).2, Side::L);
    }

    #[test]
    fn head_rotation_is_orthonormal() {
        let h = HeadPose6D::new([0.3, -1.1, 2.5], [0.0, 0.0, 1.0]);
        let r = h.rotation_matrix();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    fn canonical_landmarks() -> EyeLandmarks {
        EyeLandmarks {
            corners: [[20.0, 24.0], [44.0, 24.0]],
            contour: vec![[26.0, 19.0], [32.0, 17.0], [38.0, 19.0], [38.0, 28.0], [32.0, 29.0], [26.0, 28.0]],
            pupil: [29.0, 22.5],
        }
    }

    fn ramp_patch() -> Patch {
        Patch::from_fn(64, 48, |i, j| ((i * 7 + j * 3) % 50) as f32 / 50.0)
    }

    #[test]
    fn canonical_patch_normalizes_to_identity() {
        let lm = canonical_landmarks();
        let img = ramp_patch();
        let n = normalize_sample(&img, &lm, &HeadPose6D::IDENTITY, &NormalizationConfig::default()).unwrap();
        assert_eq!(n.rotation, 0.0);
        assert_eq!(n.scale, 1.0);
        assert_eq!(n.landmarks, lm);
        assert!(img.max_abs_diff(&n.image) < 1e-6);
    }

    #[test]
    fn rolled_patch_round_trip() {
        let lm = canonical_landmarks();
        let radius = 12.0;
        let g0 = crate::pseudolabel::los_pseudo_gaze(&lm, radius).unwrap();
        let roll = 15f64.to_radians();
        let rolled = lm.transformed([32.0, 24.0], [32.0, 24.0], roll, 1.0);
        let img = ramp_patch();
        let n = normalize_sample(&img, &rolled, &HeadPose6D::IDENTITY, &NormalizationConfig::default()).unwrap();
        assert!((n.rotation + roll).abs() < 1e-12);
        let g_rolled = crate::pseudolabel::los_pseudo_gaze(&rolled, radius).unwrap();
        let g_norm = crate::pseudolabel::los_pseudo_gaze(&n.landmarks, radius).unwrap();
        let back = n.counter_rotate(g_norm);
        let err = angular_error_deg(&back, &g_rolled).unwrap().to_radians();
        assert!(err < 1e-6, "{err}");
        // normalized frame recovers the canonical gaze
        assert!(angular_error_deg(&g_norm, &g0).unwrap().to_radians() < 1e-6);
    }

    #[test]
    fn coincident_corners_fail_normalization() {
        let mut lm = canonical_landmarks();
        lm.corners = [[30.0, 24.0], [30.0, 24.0]];
        let r = normalize_sample(&ramp_patch(), &lm, &HeadPose6D::IDENTITY, &NormalizationConfig::default());
        assert!(matches!(r, Err(Error::Geometry(_))));
    }

    #[test]
    fn hull_check() {
        let mut lm = canonical_landmarks();
        assert!(lm.pupil_inside_hull());
        lm.pupil = [5.0, 5.0];
        assert!(!lm.pupil_inside_hull());
    }

    fn unit_vec() -> impl Strategy<Value = GazeVector> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(x, y, z)| x * x + y * y + z * z > 1e-3)
            .prop_map(|(x, y, z)| GazeVector::new([x, y, z]).unwrap())
    }

    proptest! {
        #[test]
        fn pitchyaw_round_trip(p in -89.0f64..89.0, y in -179.9f64..179.9) {
            let py = PitchYaw::from_degrees(p, y);
            let v = py.to_vector();
            prop_assert!((norm3(&v.as_array()) - 1.0).abs() < 1e-9);
            let back = v.to_pitchyaw();
            prop_assert!((back.pitch - py.pitch).abs() < 1e-9);
            prop_assert!((back.yaw - py.yaw).abs() < 1e-9);
        }

        #[test]
        fn angular_error_metric_properties(a in unit_vec(), b in unit_vec(), c in unit_vec()) {
            let ab = angular_error_deg(&a, &b).unwrap();
            let ba = angular_error_deg(&b, &a).unwrap();
            let bc = angular_error_deg(&b, &c).unwrap();
            let ac = angular_error_deg(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=180.0).contains(&ab));
            prop_assert!(ac <= ab + bc + 1e-6);
            prop_assert!(angular_error_deg(&a, &a).unwrap() < 1e-5);
        }

        #[test]
        fn flip_is_involution(
            a in unit_vec(),
            rot in prop::array::uniform3(-3.1f64..3.1),
            tr in prop::array::uniform3(-2.0f64..2.0),
            left in any::<bool>(),
        ) {
            let side = if left { Side::L } else { Side::R };
            let h = HeadPose6D::new(rot, tr);
            let (g1, h1, s1) = flip_labels(Some(a), Some(h), side);
            let (g2, h2, s2) = flip_labels(g1, h1, s1);
            prop_assert_eq!(g2.unwrap(), a);
            prop_assert_eq!(h2.unwrap(), h);
            prop_assert_eq!(s2, side);
        }

        #[test]
        fn normalization_preserves_gaze_after_counter_rotation(
            roll in -0.6f64..0.6,
            scale in 0.8f64..1.25,
            off in prop::array::uniform2(-4.0f64..4.0),
        ) {
            let mut lm = canonical_landmarks();
            lm.pupil = [32.0 + off[0], 24.0 + off[1]];
            let src = lm.transformed([32.0, 24.0], [30.0, 25.0], roll, scale);
            let radius_src = 12.0 * scale;
            let n = normalize_sample(&ramp_patch(), &src, &HeadPose6D::IDENTITY, &NormalizationConfig::default()).unwrap();
            let g_src = crate::pseudolabel::los_pseudo_gaze(&src, radius_src).unwrap();
            let g_norm = crate::pseudolabel::los_pseudo_gaze(&n.landmarks, radius_src * n.scale).unwrap();
            let err = angular_error_deg(&n.counter_rotate(g_norm), &g_src).unwrap();
            prop_assert!(err < 1e-4, "{}", err);
        }
    }
}
