//! Ray-cast grayscale rendering, feature-level landmark observations and the
//! fixed-rate frame stream with a processing-rate cap.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flight::StateSample;
use crate::geometry::{CameraIntrinsics, GeometryError, Pose};
use crate::terrain::{ExposureModel, Heightfield, Terrain};

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("camera at z={camera_z:.3} m is not above the terrain ({ground_z:.3} m)")]
    InvalidViewpoint { camera_z: f64, ground_z: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid stream configuration: {0}")]
    InvalidConfig(String),
    #[error("sink failed on frame {frame_id}: {message}")]
    Sink { frame_id: u64, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub t_us: i64,
    pub width: u32,
    pub height: u32,
    /// Row-major.
    pub pixels: Vec<u8>,
    pub frame_id: u64,
}

impl ImageFrame {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width as usize + x]
    }
}

/// Reusable renderer with per-pixel camera-frame rays cached for one set of
/// intrinsics. Pixel `(i, j)` is centred at image coordinates `(i, j)`.
#[derive(Debug, Clone)]
pub struct Renderer {
    intrinsics: CameraIntrinsics,
    rays: Vec<Vector3<f64>>,
}

impl Renderer {
    pub fn new(k: &CameraIntrinsics) -> Result<Self, CameraError> {
        k.validate()?;
        let (w, h) = (k.width as usize, k.height as usize);
        let mut rays = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let pix = Vector2::new(x as f64, y as f64);
                let n = if k.has_distortion() {
                    k.undistort(&Vector2::new((pix.x - k.cx) / k.fx, (pix.y - k.cy) / k.fy))?
                } else {
                    Vector2::new((pix.x - k.cx) / k.fx, (pix.y - k.cy) / k.fy)
                };
                rays.push(Vector3::new(n.x, n.y, 1.0));
            }
        }
        Ok(Self {
            intrinsics: *k,
            rays,
        })
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn render(
        &self,
        cam_pose: &Pose,
        terrain: &Terrain,
        exposure: &ExposureModel,
    ) -> Result<ImageFrame, CameraError> {
        let c = cam_pose.translation;
        let hf = &terrain.heightfield;
        let ground_z = hf.height_at(c.x, c.y);
        if !(c.z > ground_z) {
            return Err(CameraError::InvalidViewpoint {
                camera_z: c.z,
                ground_z,
            });
        }
        let r = cam_pose.rotation.to_rotation_matrix();
        let r = r.matrix();
        let mut pixels = Vec::with_capacity(self.rays.len());
        match hf.flat_elevation() {
            Some(z0) => {
                let dz = z0 - c.z;
                for ray in &self.rays {
                    let d = r * ray;
                    if d.z >= 0.0 {
                        pixels.push(0);
                        continue;
                    }
                    let t = dz / d.z;
                    let i = terrain.texture.intensity_at(c.x + t * d.x, c.y + t * d.y);
                    pixels.push(exposure.apply(i));
                }
            }
            None => {
                for ray in &self.rays {
                    let d = r * ray;
                    match intersect_heightfield(hf, &c, &d) {
                        Some(p) => pixels.push(exposure.apply(terrain.texture.intensity_at(p.x, p.y))),
                        None => pixels.push(0),
                    }
                }
            }
        }
        Ok(ImageFrame {
            t_us: cam_pose.t_us,
            width: self.intrinsics.width,
            height: self.intrinsics.height,
            pixels,
            frame_id: 0,
        })
    }
}

/// Nearest intersection of the ray `origin + t·dir` (t > 0) with the
/// heightfield: fixed-step march followed by bisection.
pub fn intersect_heightfield(
    hf: &Heightfield,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    if let Some(z0) = hf.flat_elevation() {
        if dir.z >= 0.0 {
            return None;
        }
        let t = (z0 - origin.z) / dir.z;
        return (t > 0.0).then(|| origin + dir * t);
    }
    let (zmin, zmax) = (hf.min_elevation(), hf.max_elevation());
    if dir.z >= 0.0 && origin.z > zmax {
        return None;
    }
    let horiz = (dir.x * dir.x + dir.y * dir.y).sqrt();
    let step_len = 0.5 * hf.spacing();
    let dt = if horiz > 1e-12 {
        step_len / horiz
    } else {
        step_len / dir.norm()
    };
    // Skip the empty slab above the highest point.
    let mut t0 = if origin.z > zmax && dir.z < 0.0 {
        (zmax - origin.z) / dir.z
    } else {
        0.0
    };
    let t_end = if dir.z < 0.0 {
        (zmin - origin.z) / dir.z
    } else {
        return None;
    };
    let above = |t: f64| {
        let p = origin + dir * t;
        p.z - hf.height_at(p.x, p.y)
    };
    if above(t0) <= 0.0 {
        return Some(origin + dir * t0);
    }
    while t0 < t_end {
        let t1 = (t0 + dt).min(t_end);
        let f1 = above(t1);
        if f1 <= 0.0 {
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if above(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(origin + dir * hi);
        }
        t0 = t1;
    }
    None
}

/// One-shot render; prefer [`Renderer`] when rendering many frames.
pub fn render_frame(
    k: &CameraIntrinsics,
    cam_pose: &Pose,
    terrain: &Terrain,
    exposure: &ExposureModel,
) -> Result<ImageFrame, CameraError> {
    Renderer::new(k)?.render(cam_pose, terrain, exposure)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkObservation {
    pub landmark_id: usize,
    pub pixel: Vector2<f64>,
    pub noise_sigma: f64,
}

/// Projects world landmarks through the camera, perturbing each visible
/// projection with seeded isotropic Gaussian noise.
pub fn observe_landmarks(
    k: &CameraIntrinsics,
    cam_pose: &Pose,
    landmarks: &[Vector3<f64>],
    sigma: f64,
    rng_seed: u64,
) -> Vec<LandmarkObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut out = Vec::new();
    for (id, lm) in landmarks.iter().enumerate() {
        let pc = cam_pose.inverse_transform_point(lm);
        let Ok(pix) = k.project(&pc) else { continue };
        let noisy = if sigma > 0.0 {
            pix + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            pix
        };
        if in_bounds(k, &noisy) {
            out.push(LandmarkObservation {
                landmark_id: id,
                pixel: noisy,
                noise_sigma: sigma,
            });
        }
    }
    out
}

fn in_bounds(k: &CameraIntrinsics, p: &Vector2<f64>) -> bool {
    p.x >= -0.5 && p.y >= -0.5 && p.x < k.width as f64 - 0.5 && p.y < k.height as f64 - 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DropPolicy {
    #[default]
    DropOldest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub fps: f64,
    #[serde(default)]
    pub processing_fps_cap: Option<f64>,
    #[serde(default)]
    pub drop_policy: DropPolicy,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            fps: 31.0,
            processing_fps_cap: None,
            drop_policy: DropPolicy::DropOldest,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(CameraError::InvalidConfig("fps must be positive".into()));
        }
        if let Some(cap) = self.processing_fps_cap {
            if !(cap > 0.0 && cap <= self.fps) {
                return Err(CameraError::InvalidConfig(format!(
                    "processing cap {cap} must lie in (0, fps={}]",
                    self.fps
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamStats {
    pub emitted: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// True when the sink asked to stop before the trajectory ended.
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkControl {
    Continue,
    Stop,
}

/// Emits one frame per `1/fps` of trajectory time. With a processing cap the
/// consumer is modeled as busy for `1/cap` after each delivered frame; frames
/// arriving meanwhile wait in a single slot where a newer frame replaces the
/// older one. `produce` runs only for frames that reach the sink.
pub fn stream_frames<T, P, S>(
    trajectory: &[StateSample],
    cfg: &StreamConfig,
    mut produce: P,
    mut sink: S,
) -> Result<StreamStats, CameraError>
where
    P: FnMut(u64, &StateSample) -> Result<T, CameraError>,
    S: FnMut(T) -> Result<SinkControl, String>,
{
    cfg.validate()?;
    let mut stats = StreamStats::default();
    let Some(first) = trajectory.first() else {
        return Ok(stats);
    };
    let t0 = first.t_us;
    let t_last = trajectory.last().unwrap().t_us;
    let period_us = 1.0e6 / cfg.fps;
    let busy_us = cfg.processing_fps_cap.map(|c| 1.0e6 / c);

    let mut deliver = |frame_id: u64,
                       sample: &StateSample,
                       stats: &mut StreamStats|
     -> Result<bool, CameraError> {
        let item = produce(frame_id, sample)?;
        stats.delivered += 1;
        match sink(item) {
            Ok(SinkControl::Continue) => Ok(true),
            Ok(SinkControl::Stop) => {
                stats.stopped_early = true;
                Ok(false)
            }
            Err(message) => Err(CameraError::Sink { frame_id, message }),
        }
    };

    let mut cursor = 0usize;
    let mut free_at = f64::NEG_INFINITY;
    let mut slot: Option<(u64, usize, f64)> = None;
    for frame_id in 0u64.. {
        let t_rel = (frame_id as f64 * period_us).round();
        let t = t0 as f64 + t_rel;
        if t > t_last as f64 + 0.5 {
            break;
        }
        // Sample at or just after the frame time.
        while cursor + 1 < trajectory.len() && (trajectory[cursor].t_us as f64) < t - 0.5 {
            cursor += 1;
        }
        stats.emitted += 1;
        let Some(busy) = busy_us else {
            if !deliver(frame_id, &trajectory[cursor], &mut stats)? {
                return Ok(stats);
            }
            continue;
        };
        if let Some((id, idx, _)) = slot {
            if free_at <= t {
                slot = None;
                let start = free_at;
                if !deliver(id, &trajectory[idx], &mut stats)? {
                    return Ok(stats);
                }
                free_at = start + busy;
            }
        }
        if free_at <= t && slot.is_none() {
            if !deliver(frame_id, &trajectory[cursor], &mut stats)? {
                return Ok(stats);
            }
            free_at = t + busy;
        } else {
            if slot.is_some() {
                stats.dropped += 1;
            }
            slot = Some((frame_id, cursor, t));
        }
    }
    if let Some((id, idx, _)) = slot {
        deliver(id, &trajectory[idx], &mut stats)?;
    }
    Ok(stats)
}
