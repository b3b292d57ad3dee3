//! Sequential VO session: two-view initialization, motion-model tracking,
//! keyframe insertion with candidate triangulation, and window refinement.

use std::collections::HashMap;

use log::{debug, warn};
use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};

use super::features::{detect_corners_masked, gradient_magnitude, select_candidate_pixels};
use super::solver::{optimize_pose, to_pose, triangulate, Pinhole, SolverError, WindowObservation, WindowProblem};
use super::tracking::{track_one, Pyramid, DEFAULT_MAX_RESIDUAL};
use super::twoview::{initialize_two_view, InitError, MIN_INIT_MATCHES};
use super::{
    keyframe_decision, FrameStats, MapPoint, SessionConfig, Selector, TrackState, TrackStatus, VoError,
};
use crate::camera::ImageFrame;
use crate::eval::{SampleStatus, TrajSample, Trajectory};
use crate::flight::nadir_mount;
use crate::geometry::{CameraIntrinsics, Pose};

const HUBER_DELTA_PX: f64 = 2.0;
const INLIER_PX: f64 = 5.0;
const MIN_INLIERS: usize = 15;
const MAX_MEAN_ERROR_PX: f64 = 3.0;
const POSE_ITERATIONS: usize = 10;
const WINDOW_ITERATIONS: usize = 10;
/// Reprojection error allowed for a newly triangulated point in both views.
const MAX_TRIANGULATION_ERROR_PX: f64 = 2.0;
/// A failed initialization attempt restarts from the current frame once
/// the flow exceeds this multiple of the trigger threshold.
const INIT_RESET_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionOutcome {
    /// Tracking at the last processed frame.
    Tracking,
    InitializationFailed,
    Lost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionStats {
    pub frames: usize,
    pub keyframes: usize,
    pub map_points: usize,
    pub init_frame: Option<usize>,
    pub lost_frame: Option<usize>,
    pub outcome: SessionOutcome,
}

#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub trajectory: Trajectory,
    pub stats: SessionStats,
}

#[derive(Debug, Clone, Copy)]
enum FeatureKind {
    Map(usize),
    /// Not yet triangulated; first seen in `host` at ideal pixel `origin`.
    Candidate { host: usize, origin: Vector2<f64> },
}

#[derive(Debug, Clone, Copy)]
struct Feature {
    kind: FeatureKind,
    /// Image (distorted) position in the latest frame.
    pixel: Vector2<f64>,
    /// Ideal pinhole position in the latest frame.
    ideal: Vector2<f64>,
}

#[derive(Debug, Clone)]
struct Keyframe {
    t_cw: Isometry3<f64>,
    /// Map point id and ideal pixel of each observation.
    obs: Vec<(usize, Vector2<f64>)>,
}

#[derive(Debug, Clone)]
struct InitTrack {
    ref_t_us: i64,
    ref_index: usize,
    ref_pixels: Vec<Vector2<f64>>,
    cur: Vec<Option<Vector2<f64>>>,
    step: Vec<Vector2<f64>>,
}

enum Phase {
    Initializing(Option<InitTrack>),
    Tracking,
    Lost,
}

/// Processes frames strictly in arrival order and emits one trajectory
/// sample per frame: `I` before initialization, `T` while tracking, `L`
/// (holding the last pose) after loss.
pub struct VoSession {
    cfg: SessionConfig,
    intrinsics: CameraIntrinsics,
    cam: Pinhole,
    mount_inv: UnitQuaternion<f64>,
    phase: Phase,
    state: TrackState,
    trajectory: Trajectory,
    prev: Option<Pyramid>,
    keyframes: Vec<Keyframe>,
    points: Vec<MapPoint>,
    features: Vec<Feature>,
    frames: usize,
    init_frame: Option<usize>,
    lost_frame: Option<usize>,
    last_stats: Option<FrameStats>,
}

impl VoSession {
    pub fn new(intrinsics: &CameraIntrinsics, cfg: &SessionConfig, label: &str) -> Result<Self, VoError> {
        intrinsics.validate()?;
        cfg.validate()?;
        Ok(Self {
            cfg: *cfg,
            intrinsics: *intrinsics,
            cam: Pinhole {
                fx: intrinsics.fx,
                fy: intrinsics.fy,
                cx: intrinsics.cx,
                cy: intrinsics.cy,
            },
            mount_inv: nadir_mount().inverse(),
            phase: Phase::Initializing(None),
            state: TrackState {
                status: TrackStatus::Initializing,
                t_cw: Isometry3::identity(),
                velocity: Isometry3::identity(),
                reference_keyframe: None,
                average_scene_depth: 1.0,
            },
            trajectory: Trajectory::new(label),
            prev: None,
            keyframes: Vec::new(),
            points: Vec::new(),
            features: Vec::new(),
            frames: 0,
            init_frame: None,
            lost_frame: None,
            last_stats: None,
        })
    }

    pub fn state(&self) -> &TrackState {
        &self.state
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn map_points(&self) -> &[MapPoint] {
        &self.points
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    /// Keyframe statistics of the latest tracked frame.
    pub fn last_frame_stats(&self) -> Option<FrameStats> {
        self.last_stats
    }

    /// Processes one frame and returns the sample emitted for it.
    pub fn process(&mut self, frame: &ImageFrame) -> Result<TrajSample, VoError> {
        let expected = (self.intrinsics.width, self.intrinsics.height);
        if (frame.width, frame.height) != expected {
            return Err(VoError::FrameSize {
                expected,
                found: (frame.width, frame.height),
            });
        }
        if let Some(last) = self.trajectory.samples().last() {
            if frame.t_us <= last.t_us() {
                return Err(VoError::NonMonotonic { t_us: frame.t_us });
            }
        }
        let index = self.frames;
        self.frames += 1;
        let status = match self.phase {
            Phase::Lost => TrackStatus::Lost,
            Phase::Initializing(_) => {
                let pyr = Pyramid::new(frame);
                let s = self.initialize_step(frame, &pyr, index);
                self.prev = Some(pyr);
                s
            }
            Phase::Tracking => {
                let pyr = Pyramid::new(frame);
                let s = self.track_frame(frame, &pyr);
                self.prev = Some(pyr);
                s
            }
        };
        if status == TrackStatus::Lost && self.lost_frame.is_none() {
            self.lost_frame = Some(index);
            self.phase = Phase::Lost;
            self.prev = None;
            self.features.clear();
        }
        self.state.status = status;
        let sample = match status {
            TrackStatus::Initializing => TrajSample {
                pose: Pose::identity(frame.t_us),
                status: SampleStatus::Initializing,
            },
            TrackStatus::Tracking => TrajSample {
                pose: self.body_pose(frame.t_us),
                status: SampleStatus::Tracking,
            },
            TrackStatus::Lost => TrajSample {
                pose: self.body_pose(frame.t_us),
                status: SampleStatus::Lost,
            },
        };
        self.trajectory.push(sample)?;
        Ok(sample)
    }

    pub fn finish(self) -> SessionOutput {
        let outcome = match self.phase {
            Phase::Initializing(_) => SessionOutcome::InitializationFailed,
            Phase::Tracking => SessionOutcome::Tracking,
            Phase::Lost => SessionOutcome::Lost,
        };
        SessionOutput {
            stats: SessionStats {
                frames: self.frames,
                keyframes: self.keyframes.len(),
                map_points: self.points.len(),
                init_frame: self.init_frame,
                lost_frame: self.lost_frame,
                outcome,
            },
            trajectory: self.trajectory,
        }
    }

    fn body_pose(&self, t_us: i64) -> Pose {
        let cam = to_pose(t_us, &self.state.t_cw);
        Pose::new(t_us, cam.rotation * self.mount_inv, cam.translation)
    }

    fn ideal(&self, pixel: &Vector2<f64>) -> Option<Vector2<f64>> {
        if !self.intrinsics.has_distortion() {
            return Some(*pixel);
        }
        let k = &self.intrinsics;
        let d = Vector2::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy);
        k.undistort(&d).ok().map(|n| Vector2::new(k.fx * n.x + k.cx, k.fy * n.y + k.cy))
    }

    fn image_of(&self, pc: &Vector3<f64>) -> Option<Vector2<f64>> {
        if pc.z <= 1e-9 {
            return None;
        }
        let n = Vector2::new(pc.x / pc.z, pc.y / pc.z);
        Some(self.intrinsics.normalized_to_pixel(&n))
    }

    /// Detects up to `limit` new feature pixels in cells not occupied by
    /// `taken`, strongest first.
    fn detect(&self, frame: &ImageFrame, pyr: &Pyramid, taken: &[Vector2<f64>], limit: usize) -> Vec<Vector2<f64>> {
        if limit == 0 {
            return Vec::new();
        }
        let det = &self.cfg.detector;
        let cell = det.cell_size;
        let cols = (frame.width as usize).div_ceil(cell);
        let rows = (frame.height as usize).div_ceil(cell);
        let mut occ = vec![false; cols * rows];
        for p in taken {
            let (cx, cy) = ((p.x.max(0.0) as usize / cell).min(cols - 1), (p.y.max(0.0) as usize / cell).min(rows - 1));
            occ[cy * cols + cx] = true;
        }
        let mut scored: Vec<(f64, Vector2<f64>)> = match det.selector {
            Selector::Corners => detect_corners_masked(frame, cell, det.fast_threshold, |cx, cy| occ[cy * cols + cx])
                .into_iter()
                .map(|c| (c.score, Vector2::new(c.pixel.x as f64, c.pixel.y as f64)))
                .collect(),
            Selector::Gradient => {
                let g = gradient_magnitude(frame);
                let w = frame.width as usize;
                select_candidate_pixels(frame, det.block_size_d, det.min_grad_add)
                    .into_iter()
                    .filter(|p| !occ[(p.y / cell) * cols + p.x / cell])
                    .map(|p| (g[p.y * w + p.x], Vector2::new(p.x as f64, p.y as f64)))
                    .collect()
            }
        };
        scored.retain(|(_, p)| pyr.supports(p));
        // Stable sort keeps row-major order among equal scores.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        scored.truncate(limit);
        scored.into_iter().map(|(_, p)| p).collect()
    }

    fn start_init(&mut self, frame: &ImageFrame, pyr: &Pyramid, index: usize) {
        let pixels = self.detect(frame, pyr, &[], self.cfg.detector.max_features);
        debug!("init reference at frame {index} with {} features", pixels.len());
        let n = pixels.len();
        self.phase = Phase::Initializing(Some(InitTrack {
            ref_t_us: frame.t_us,
            ref_index: index,
            cur: pixels.iter().map(|p| Some(*p)).collect(),
            ref_pixels: pixels,
            step: vec![Vector2::zeros(); n],
        }));
    }

    fn initialize_step(&mut self, frame: &ImageFrame, pyr: &Pyramid, index: usize) -> TrackStatus {
        let Phase::Initializing(Some(mut init)) = std::mem::replace(&mut self.phase, Phase::Initializing(None))
        else {
            self.start_init(frame, pyr, index);
            return TrackStatus::Initializing;
        };
        let prev = self.prev.as_ref().expect("previous frame during initialization");
        let radius = self.cfg.search_radius;
        for (cur, step) in init.cur.iter_mut().zip(init.step.iter_mut()) {
            let Some(p) = *cur else { continue };
            let pred = p + *step;
            match track_one(prev, pyr, &p, &pred, radius, DEFAULT_MAX_RESIDUAL) {
                Some(m) => {
                    *step = m.displacement;
                    *cur = Some(m.point);
                }
                None => *cur = None,
            }
        }
        let alive: Vec<usize> = (0..init.cur.len()).filter(|&i| init.cur[i].is_some()).collect();
        if alive.len() < MIN_INIT_MATCHES {
            self.start_init(frame, pyr, index);
            return TrackStatus::Initializing;
        }
        let mut flows: Vec<f64> = alive.iter().map(|&i| (init.cur[i].unwrap() - init.ref_pixels[i]).norm()).collect();
        flows.sort_by(f64::total_cmp);
        let median_flow = flows[flows.len() / 2];
        if median_flow < self.cfg.init_min_flow_px {
            self.phase = Phase::Initializing(Some(init));
            return TrackStatus::Initializing;
        }
        let mut idx = Vec::new();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for &i in &alive {
            if let (Some(pa), Some(pb)) = (self.ideal(&init.ref_pixels[i]), self.ideal(&init.cur[i].unwrap())) {
                idx.push(i);
                a.push(pa);
                b.push(pb);
            }
        }
        let seed = self.cfg.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        match initialize_two_view(&a, &b, &self.cam, seed) {
            Ok(res) => {
                self.build_initial_map(&init, &idx, &a, &b, &res, index);
                self.init_frame = Some(index);
                debug!(
                    "initialized at frame {index} from frame {} with {} points",
                    init.ref_index,
                    self.points.len()
                );
                let taken: Vec<Vector2<f64>> = self.features.iter().map(|f| f.pixel).collect();
                let room = self.cfg.detector.max_features.saturating_sub(taken.len());
                let kf = self.keyframes.len() - 1;
                for p in self.detect(frame, pyr, &taken, room) {
                    if let Some(ideal) = self.ideal(&p) {
                        self.features.push(Feature {
                            kind: FeatureKind::Candidate { host: kf, origin: ideal },
                            pixel: p,
                            ideal,
                        });
                    }
                }
                let _ = init.ref_t_us;
                self.phase = Phase::Tracking;
                TrackStatus::Tracking
            }
            Err(InitError::InsufficientMatches { .. }) => {
                self.start_init(frame, pyr, index);
                TrackStatus::Initializing
            }
            Err(InitError::DegenerateMotion(why)) => {
                debug!("initialization attempt at frame {index} rejected: {why}");
                if median_flow > INIT_RESET_FACTOR * self.cfg.init_min_flow_px {
                    self.start_init(frame, pyr, index);
                } else {
                    self.phase = Phase::Initializing(Some(init));
                }
                TrackStatus::Initializing
            }
        }
    }

    /// Places the pipeline frame on the recovered ground plane: origin below
    /// the first camera, z up, x along the first camera's flight direction.
    fn build_initial_map(
        &mut self,
        init: &InitTrack,
        idx: &[usize],
        a: &[Vector2<f64>],
        b: &[Vector2<f64>],
        res: &super::twoview::TwoViewResult,
        index: usize,
    ) {
        let n = res.normal.normalize();
        let z_w = -n;
        let fwd = Vector3::new(0.0, -1.0, 0.0);
        let mut x_w = fwd - z_w * fwd.dot(&z_w);
        if x_w.norm() < 1e-6 {
            x_w = Vector3::new(1.0, 0.0, 0.0) - z_w * z_w.x;
        }
        let x_w = x_w.normalize();
        let y_w = z_w.cross(&x_w);
        let r_cw = Matrix3::from_columns(&[x_w, y_w, z_w]);
        let origin = n * res.plane_distance;
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r_cw));
        let t_c0w = Isometry3::from_parts(Translation3::from(origin), rot);
        let rel = Isometry3::from_parts(
            Translation3::from(res.translation),
            UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(res.rotation)),
        );
        let t_c1w = rel * t_c0w;
        let w_from_c0 = t_c0w.inverse();

        let mut kf0 = Keyframe {
            t_cw: t_c0w,
            obs: Vec::new(),
        };
        let mut kf1 = Keyframe {
            t_cw: t_c1w,
            obs: Vec::new(),
        };
        self.features.clear();
        for (k, p) in res.points.iter().enumerate() {
            let Some(p) = p else { continue };
            let id = self.points.len();
            let ray0 = Vector3::new((a[k].x - self.cam.cx) / self.cam.fx, (a[k].y - self.cam.cy) / self.cam.fy, 1.0);
            let ray1 = res.rotation * ray0;
            let pc1 = res.rotation * p + res.translation;
            let parallax = ray1.angle(&pc1).to_degrees();
            self.points.push(MapPoint {
                id,
                position: (w_from_c0 * Point3::from(*p)).coords,
                host_keyframe: 0,
                observations: 2,
                parallax_deg: parallax,
            });
            kf0.obs.push((id, a[k]));
            kf1.obs.push((id, b[k]));
            self.features.push(Feature {
                kind: FeatureKind::Map(id),
                pixel: init.cur[idx[k]].unwrap(),
                ideal: b[k],
            });
        }
        self.keyframes.push(kf0);
        self.keyframes.push(kf1);
        self.refine_window();
        let t1 = self.keyframes[1].t_cw;
        let t0 = self.keyframes[0].t_cw;
        let steps = (index - init.ref_index).max(1) as f64;
        let delta = t1 * t0.inverse();
        self.state.velocity = Isometry3::from_parts(
            Translation3::from(delta.translation.vector / steps),
            delta.rotation.powf(1.0 / steps),
        );
        self.state.t_cw = t1;
        self.state.reference_keyframe = Some(1);
        self.update_scene_depth();
    }

    fn update_scene_depth(&mut self) {
        let t = self.state.t_cw;
        let mut depths: Vec<f64> = self
            .features
            .iter()
            .filter_map(|f| match f.kind {
                FeatureKind::Map(id) => Some((t * Point3::from(self.points[id].position)).z),
                _ => None,
            })
            .filter(|z| *z > 0.0)
            .collect();
        if !depths.is_empty() {
            depths.sort_by(f64::total_cmp);
            self.state.average_scene_depth = depths[depths.len() / 2];
        }
    }

    /// Constant-velocity prediction, patch tracking to predicted positions,
    /// robust pose fit and keyframe handling.
    fn track_frame(&mut self, frame: &ImageFrame, pyr: &Pyramid) -> TrackStatus {
        let prev = self.prev.take().expect("previous frame while tracking");
        let pred = self.state.velocity * self.state.t_cw;
        let depth = self.state.average_scene_depth;
        let radius = self.cfg.search_radius;
        let mut kept = Vec::with_capacity(self.features.len());
        for f in &self.features {
            let pc = match f.kind {
                FeatureKind::Map(id) => pred * Point3::from(self.points[id].position),
                FeatureKind::Candidate { host, origin } => {
                    let hc = Vector3::new((origin.x - self.cam.cx) / self.cam.fx, (origin.y - self.cam.cy) / self.cam.fy, 1.0);
                    let pw = self.keyframes[host].t_cw.inverse() * Point3::from(hc * depth);
                    pred * pw
                }
            };
            let Some(guess) = self.image_of(&pc.coords) else { continue };
            let Some(m) = track_one(&prev, pyr, &f.pixel, &guess, radius, DEFAULT_MAX_RESIDUAL) else {
                continue;
            };
            let Some(ideal) = self.ideal(&m.point) else { continue };
            kept.push(Feature {
                kind: f.kind,
                pixel: m.point,
                ideal,
            });
        }
        self.features = kept;

        let map_idx: Vec<usize> = (0..self.features.len())
            .filter(|&i| matches!(self.features[i].kind, FeatureKind::Map(_)))
            .collect();
        if map_idx.len() < MIN_INLIERS {
            debug!("lost: {} map matches", map_idx.len());
            return TrackStatus::Lost;
        }
        let pts: Vec<Vector3<f64>> = map_idx
            .iter()
            .map(|&i| match self.features[i].kind {
                FeatureKind::Map(id) => self.points[id].position,
                _ => unreachable!(),
            })
            .collect();
        let obs: Vec<Vector2<f64>> = map_idx.iter().map(|&i| self.features[i].ideal).collect();
        let fit = optimize_pose(&self.cam, &pred, &pts, &obs, HUBER_DELTA_PX, POSE_ITERATIONS);
        let inl: Vec<usize> = (0..map_idx.len()).filter(|&k| fit.errors[k] < INLIER_PX).collect();
        if inl.len() < MIN_INLIERS {
            debug!("lost: {} inliers", inl.len());
            return TrackStatus::Lost;
        }
        let p2: Vec<Vector3<f64>> = inl.iter().map(|&k| pts[k]).collect();
        let o2: Vec<Vector2<f64>> = inl.iter().map(|&k| obs[k]).collect();
        let fit2 = optimize_pose(&self.cam, &fit.t_cw, &p2, &o2, HUBER_DELTA_PX, POSE_ITERATIONS);
        let good: Vec<usize> = (0..inl.len()).filter(|&k| fit2.errors[k] < INLIER_PX).collect();
        let mean_err = good.iter().map(|&k| fit2.errors[k]).sum::<f64>() / good.len().max(1) as f64;
        if good.len() < MIN_INLIERS || mean_err > MAX_MEAN_ERROR_PX {
            debug!("lost: {} inliers, mean error {mean_err:.2} px", good.len());
            return TrackStatus::Lost;
        }
        let mut drop = vec![false; self.features.len()];
        for &i in &map_idx {
            drop[i] = true;
        }
        for &g in &good {
            drop[map_idx[inl[g]]] = false;
        }
        let mut i = 0;
        self.features.retain(|_| {
            let keep = !drop[i];
            i += 1;
            keep
        });

        let t_new = fit2.t_cw;
        let mut velocity = t_new * self.state.t_cw.inverse();
        velocity.rotation.renormalize();
        self.state.velocity = velocity;
        self.state.t_cw = t_new;
        self.update_scene_depth();

        let stats = self.frame_stats();
        self.last_stats = Some(stats);
        if keyframe_decision(&self.cfg.policy, &self.state, &stats) {
            self.insert_keyframe(frame, pyr);
        }
        TrackStatus::Tracking
    }

    fn frame_stats(&self) -> FrameStats {
        let centre = self.state.t_cw.inverse().translation.vector;
        let first = self.keyframes.len().saturating_sub(self.cfg.window_size);
        let nearest = self.keyframes[first..]
            .iter()
            .map(|k| (k.t_cw.inverse().translation.vector - centre).norm())
            .fold(f64::INFINITY, f64::min);
        let rk = &self.keyframes[self.state.reference_keyframe.unwrap_or(self.keyframes.len() - 1)];
        let ref_obs: HashMap<usize, Vector2<f64>> = rk.obs.iter().copied().collect();
        let mut flows = Vec::new();
        for f in &self.features {
            if let FeatureKind::Map(id) = f.kind {
                if let Some(p) = ref_obs.get(&id) {
                    flows.push((f.ideal - p).norm());
                }
            }
        }
        let tracked_fraction = if ref_obs.is_empty() {
            0.0
        } else {
            flows.len() as f64 / ref_obs.len() as f64
        };
        let median_flow = if flows.is_empty() {
            0.0
        } else {
            flows.sort_by(f64::total_cmp);
            flows[flows.len() / 2]
        };
        FrameStats {
            nearest_keyframe_distance: nearest,
            tracked_fraction,
            median_flow,
        }
    }

    fn insert_keyframe(&mut self, frame: &ImageFrame, pyr: &Pyramid) {
        let k = self.keyframes.len();
        let t_cw = self.state.t_cw;
        let cur_pose = to_pose(0, &t_cw);
        let mut obs = Vec::new();
        let mut host_obs: Vec<(usize, usize, Vector2<f64>)> = Vec::new();
        let mut retained = Vec::with_capacity(self.features.len());
        let mut created = 0usize;
        for f in std::mem::take(&mut self.features) {
            match f.kind {
                FeatureKind::Map(id) => {
                    obs.push((id, f.ideal));
                    self.points[id].observations += 1;
                    retained.push(f);
                }
                FeatureKind::Candidate { host, origin } => {
                    let host_t = self.keyframes[host].t_cw;
                    let ray_h = self.cam.ray(&origin);
                    let ray_c = self.cam.ray(&f.ideal);
                    match triangulate(&to_pose(0, &host_t), &cur_pose, &ray_h, &ray_c) {
                        Err(SolverError::LowParallax { .. }) => retained.push(f),
                        Err(_) => {}
                        Ok((p, parallax)) => {
                            let ph = host_t * Point3::from(p);
                            let pc = t_cw * Point3::from(p);
                            if ph.z <= 0.0 || pc.z <= 0.0 {
                                continue;
                            }
                            let eh = (self.cam.project(&ph.coords) - origin).norm();
                            let ec = (self.cam.project(&pc.coords) - f.ideal).norm();
                            if eh > MAX_TRIANGULATION_ERROR_PX || ec > MAX_TRIANGULATION_ERROR_PX {
                                continue;
                            }
                            let id = self.points.len();
                            self.points.push(MapPoint {
                                id,
                                position: p,
                                host_keyframe: host,
                                observations: 2,
                                parallax_deg: parallax,
                            });
                            host_obs.push((host, id, origin));
                            obs.push((id, f.ideal));
                            created += 1;
                            retained.push(Feature {
                                kind: FeatureKind::Map(id),
                                ..f
                            });
                        }
                    }
                }
            }
        }
        for (host, id, px) in host_obs {
            self.keyframes[host].obs.push((id, px));
        }
        self.features = retained;
        self.keyframes.push(Keyframe { t_cw, obs });

        let taken: Vec<Vector2<f64>> = self.features.iter().map(|f| f.pixel).collect();
        let room = self.cfg.detector.max_features.saturating_sub(taken.len());
        for p in self.detect(frame, pyr, &taken, room) {
            if let Some(ideal) = self.ideal(&p) {
                self.features.push(Feature {
                    kind: FeatureKind::Candidate { host: k, origin: ideal },
                    pixel: p,
                    ideal,
                });
            }
        }
        self.refine_window();
        self.state.t_cw = self.keyframes[k].t_cw;
        self.state.reference_keyframe = Some(k);
        self.update_scene_depth();
        debug!(
            "keyframe {k} at t={} us: {created} new points, {} features",
            frame.t_us,
            self.features.len()
        );
    }

    /// Joint refinement of the latest keyframes and the points they observe.
    fn refine_window(&mut self) {
        let n = self.keyframes.len();
        let first = n.saturating_sub(self.cfg.window_size);
        if n - first < 2 {
            return;
        }
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut ids = Vec::new();
        let mut observations = Vec::new();
        for (pi, kf) in self.keyframes[first..].iter().enumerate() {
            for &(id, px) in &kf.obs {
                let li = *local.entry(id).or_insert_with(|| {
                    ids.push(id);
                    ids.len() - 1
                });
                observations.push(WindowObservation {
                    pose: pi,
                    point: li,
                    pixel: px,
                });
            }
        }
        let mut problem = WindowProblem {
            cam: self.cam,
            poses: self.keyframes[first..].iter().map(|k| k.t_cw).collect(),
            points: ids.iter().map(|&id| self.points[id].position).collect(),
            observations,
            huber_delta: HUBER_DELTA_PX,
        };
        match problem.refine(WINDOW_ITERATIONS) {
            Ok(report) => {
                debug!(
                    "window refine: cost {:.4} -> {:.4} in {} iterations",
                    report.initial_cost, report.final_cost, report.iterations
                );
                for (kf, t) in self.keyframes[first..].iter_mut().zip(&problem.poses) {
                    kf.t_cw = *t;
                }
                for (li, &id) in ids.iter().enumerate() {
                    self.points[id].position = problem.points[li];
                }
            }
            Err(e) => warn!("window refinement skipped: {e}"),
        }
    }
}

/// Runs a session over `frames` in order.
pub fn run_session<'a>(
    frames: impl IntoIterator<Item = &'a ImageFrame>,
    intrinsics: &CameraIntrinsics,
    cfg: &SessionConfig,
    label: &str,
) -> Result<SessionOutput, VoError> {
    let mut s = VoSession::new(intrinsics, cfg, label)?;
    for f in frames {
        s.process(f)?;
    }
    Ok(s.finish())
}
