//! Rigid-body math, the pinhole camera with radial-tangential distortion, and
//! geodetic to local east-north-up conversion.
//!
//! World frames are ENU (x east, y north, z up). A [`Pose`] maps body
//! coordinates into the world: `p_world = rotation * p_body + translation`.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("pixel ({u}, {v}) is outside the image")]
    OutsideImage { u: f64, v: f64 },
    #[error("undistortion did not converge (residual {residual:e})")]
    NumericFailure { residual: f64 },
}

/// Timestamped rigid transform, world <- body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub t_us: i64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(t_us: i64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            t_us,
            rotation,
            translation,
        }
    }

    pub fn identity(t_us: i64) -> Self {
        Self::new(t_us, UnitQuaternion::identity(), Vector3::zeros())
    }

    /// `self * other`; the timestamp of `other` is kept.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            t_us: other.t_us,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            t_us: self.t_us,
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    pub fn with_time(mut self, t_us: i64) -> Self {
        self.t_us = t_us;
        self
    }

    /// Yaw, pitch, roll in degrees for a z-y'-x'' sequence. Report export only.
    pub fn yaw_pitch_roll_deg(&self) -> (f64, f64, f64) {
        let (roll, pitch, yaw) = self.rotation.euler_angles();
        (yaw.to_degrees(), pitch.to_degrees(), roll.to_degrees())
    }
}

/// Pinhole intrinsics with (k1, k2) radial and (p1, p2) tangential distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

const UNDISTORT_MAX_ITERS: usize = 20;
const UNDISTORT_STEP_TOL: f64 = 1e-10;

impl CameraIntrinsics {
    /// Square-pixel camera centred on the image with no distortion.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Result<Self, GeometryError> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(GeometryError::InvalidArgument(format!(
                "horizontal field of view must lie in (0, 180) degrees, got {hfov_deg}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidArgument(
                "image dimensions must be positive".into(),
            ));
        }
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Ok(Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            width,
            height,
        })
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [
            self.fx, self.fy, self.cx, self.cy, self.k1, self.k2, self.p1, self.p2,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidArgument(
                "intrinsics contain non-finite values".into(),
            ));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidArgument(
                "focal lengths must be positive".into(),
            ));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64)
            || !(self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(GeometryError::InvalidArgument(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0 || self.p1 != 0.0 || self.p2 != 0.0
    }

    /// Copy with every pixel-unit quantity multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width as f64 * s).round() as u32,
            height: (self.height as f64 * s).round() as u32,
            ..*self
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Applies the radial-tangential polynomial to normalized coordinates.
    pub fn distort(&self, n: &Vector2<f64>) -> Vector2<f64> {
        let (x, y) = (n.x, n.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        Vector2::new(
            x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }

    /// Inverts [`Self::distort`] by fixed-point iteration.
    pub fn undistort(&self, d: &Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !self.has_distortion() {
            return Ok(*d);
        }
        let mut n = *d;
        for _ in 0..UNDISTORT_MAX_ITERS {
            let (x, y) = (n.x, n.y);
            let r2 = x * x + y * y;
            let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
            let dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
            let dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
            let next = Vector2::new((d.x - dx) / radial, (d.y - dy) / radial);
            let step = (next - n).norm();
            n = next;
            if !step.is_finite() {
                break;
            }
            if step < UNDISTORT_STEP_TOL {
                return Ok(n);
            }
        }
        let residual = (self.distort(&n) - d).norm();
        if residual.is_finite() && residual < 1e-9 {
            Ok(n)
        } else {
            Err(GeometryError::NumericFailure { residual })
        }
    }

    pub fn normalized_to_pixel(&self, n: &Vector2<f64>) -> Vector2<f64> {
        let d = self.distort(n);
        Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy)
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p_cam.z <= 0.0 {
            return Err(GeometryError::BehindCamera { z: p_cam.z });
        }
        let n = Vector2::new(p_cam.x / p_cam.z, p_cam.y / p_cam.z);
        Ok(self.normalized_to_pixel(&n))
    }

    pub fn contains(&self, pix: &Vector2<f64>, margin: f64) -> bool {
        pix.x >= -margin
            && pix.y >= -margin
            && pix.x <= self.width as f64 + margin
            && pix.y <= self.height as f64 + margin
    }

    /// Unit ray through `pix` (tolerates pixels up to one pixel outside the image).
    pub fn unproject(&self, pix: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError> {
        if !self.contains(pix, 1.0) {
            return Err(GeometryError::OutsideImage { u: pix.x, v: pix.y });
        }
        let d = Vector2::new((pix.x - self.cx) / self.fx, (pix.y - self.cy) / self.fy);
        let n = self.undistort(&d)?;
        Ok(Vector3::new(n.x, n.y, 1.0).normalize())
    }
}

/// Free function form of [`CameraIntrinsics::from_fov`].
pub fn intrinsics_from_fov(
    width: u32,
    height: u32,
    hfov_deg: f64,
) -> Result<CameraIntrinsics, GeometryError> {
    CameraIntrinsics::from_fov(width, height, hfov_deg)
}

pub fn project(k: &CameraIntrinsics, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    k.project(p_cam)
}

pub fn unproject(k: &CameraIntrinsics, pix: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError> {
    k.unproject(pix)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodeticCoord {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

impl GeodeticCoord {
    pub fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Result<Self, GeometryError> {
        if !(lat_deg.abs() <= 90.0 && lon_deg.abs() <= 180.0 && alt_m.is_finite()) {
            return Err(GeometryError::InvalidArgument(format!(
                "geodetic coordinate out of range: lat {lat_deg}, lon {lon_deg}"
            )));
        }
        Ok(Self {
            lat_deg,
            lon_deg,
            alt_m,
        })
    }
}

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// ENU tangent plane anchored at a geodetic origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalFrame {
    pub origin: GeodeticCoord,
}

impl LocalFrame {
    pub fn new(origin: GeodeticCoord) -> Self {
        Self { origin }
    }

    /// Meridian (M) and prime-vertical (N) radii of curvature at the origin.
    fn radii(&self) -> (f64, f64) {
        let e2 = WGS84_F * (2.0 - WGS84_F);
        let s = self.origin.lat_deg.to_radians().sin();
        let w2 = 1.0 - e2 * s * s;
        let m = WGS84_A * (1.0 - e2) / (w2 * w2.sqrt());
        let n = WGS84_A / w2.sqrt();
        (m, n)
    }

    pub fn geodetic_to_enu(&self, c: &GeodeticCoord) -> Vector3<f64> {
        let (m, n) = self.radii();
        let h0 = self.origin.alt_m;
        let cos_lat = self.origin.lat_deg.to_radians().cos();
        let mut dlon = c.lon_deg - self.origin.lon_deg;
        if dlon > 180.0 {
            dlon -= 360.0;
        } else if dlon < -180.0 {
            dlon += 360.0;
        }
        Vector3::new(
            dlon.to_radians() * (n + h0) * cos_lat,
            (c.lat_deg - self.origin.lat_deg).to_radians() * (m + h0),
            c.alt_m - h0,
        )
    }

    pub fn enu_to_geodetic(&self, p: &Vector3<f64>) -> GeodeticCoord {
        let (m, n) = self.radii();
        let h0 = self.origin.alt_m;
        let cos_lat = self.origin.lat_deg.to_radians().cos();
        GeodeticCoord {
            lat_deg: self.origin.lat_deg + (p.y / (m + h0)).to_degrees(),
            lon_deg: self.origin.lon_deg + (p.x / ((n + h0) * cos_lat)).to_degrees(),
            alt_m: h0 + p.z,
        }
    }
}

pub fn geodetic_to_enu(c: &GeodeticCoord, f: &LocalFrame) -> Vector3<f64> {
    f.geodetic_to_enu(c)
}

pub fn enu_to_geodetic(p: &Vector3<f64>, f: &LocalFrame) -> GeodeticCoord {
    f.enu_to_geodetic(p)
}

/// Geodesic angle of `ra⁻¹ · rb`, in degrees within [0, 180].
pub fn rotation_angle_deg(ra: &UnitQuaternion<f64>, rb: &UnitQuaternion<f64>) -> f64 {
    let rel = ra.inverse() * rb;
    let q = rel.quaternion();
    let v = q.imag().norm();
    (2.0 * v.atan2(q.w.abs())).to_degrees()
}

/// Orthonormal rotation closest to `m` in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
