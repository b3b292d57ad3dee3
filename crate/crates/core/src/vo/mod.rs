//! Reference monocular visual odometry with pluggable candidate selection
//! and keyframe policies.

pub mod features;
pub mod session;
pub mod solver;
pub mod tracking;
pub mod twoview;

use nalgebra::{Isometry3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalError;
use crate::geometry::Pose;

pub use session::{run_session, SessionOutcome, SessionOutput, SessionStats, VoSession};

#[derive(Debug, Error)]
pub enum VoError {
    #[error("invalid VO configuration: {0}")]
    InvalidConfig(String),
    #[error("frame is {found:?} but the intrinsics expect {expected:?}")]
    FrameSize { expected: (u32, u32), found: (u32, u32) },
    #[error("frame timestamp {t_us} is not after the previous frame")]
    NonMonotonic { t_us: i64 },
    #[error(transparent)]
    Trajectory(#[from] EvalError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// How new features are chosen in a keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Best FAST corner per cell by Shi-Tomasi score.
    #[default]
    Corners,
    /// Region-adaptive gradient selection.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub block_size_d: usize,
    pub min_grad_add: f64,
    pub fast_threshold: f64,
    pub cell_size: usize,
    pub max_features: usize,
    #[serde(default)]
    pub selector: Selector,
}

impl DetectorParams {
    /// Defaults scaled to an image `width`: 32 px blocks and 64 px cells at
    /// 1280 px.
    pub fn for_width(width: u32) -> Self {
        let s = width as f64 / 1280.0;
        Self {
            block_size_d: ((32.0 * s).round() as usize).max(2),
            min_grad_add: 7.0,
            fast_threshold: 7.0,
            cell_size: ((64.0 * s).round() as usize).max(8),
            max_features: 180,
            selector: Selector::Corners,
        }
    }

    pub fn validate(&self) -> Result<(), VoError> {
        if self.block_size_d < 2 {
            return Err(VoError::InvalidConfig("block_size_d must be at least 2".into()));
        }
        if !(self.min_grad_add >= 0.0) || !(self.fast_threshold >= 0.0) {
            return Err(VoError::InvalidConfig("thresholds must be non-negative".into()));
        }
        if self.cell_size == 0 || self.max_features == 0 {
            return Err(VoError::InvalidConfig("cell_size and max_features must be positive".into()));
        }
        Ok(())
    }
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self::for_width(320)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KeyframePolicy {
    /// New keyframe once the nearest keyframe is farther than this fraction
    /// of the average scene depth.
    DistanceBased { min_dist_fraction: f64 },
    /// New keyframe once too few reference-keyframe points are still tracked
    /// or they have moved too far in the image.
    ViewChange {
        min_tracked_fraction: f64,
        min_median_flow: f64,
    },
}

impl KeyframePolicy {
    pub fn distance_default() -> Self {
        KeyframePolicy::DistanceBased { min_dist_fraction: 0.12 }
    }

    /// View-change defaults with the flow threshold scaled from 40 px at
    /// 320 px width.
    pub fn view_change_for_width(width: u32) -> Self {
        KeyframePolicy::ViewChange {
            min_tracked_fraction: 0.5,
            min_median_flow: 40.0 * width as f64 / 320.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KeyframePolicy::DistanceBased { .. } => "distance",
            KeyframePolicy::ViewChange { .. } => "view_change",
        }
    }

    pub fn validate(&self) -> Result<(), VoError> {
        match *self {
            KeyframePolicy::DistanceBased { min_dist_fraction } => {
                if !(min_dist_fraction > 0.0) || !min_dist_fraction.is_finite() {
                    return Err(VoError::InvalidConfig("min_dist_fraction must be positive".into()));
                }
            }
            KeyframePolicy::ViewChange {
                min_tracked_fraction,
                min_median_flow,
            } => {
                if !(min_tracked_fraction > 0.0 && min_tracked_fraction <= 1.0) {
                    return Err(VoError::InvalidConfig("min_tracked_fraction must lie in (0, 1]".into()));
                }
                if !(min_median_flow >= 0.0) {
                    return Err(VoError::InvalidConfig("min_median_flow must be non-negative".into()));
                }
            }
        }
        Ok(())
    }
}

/// Triangulated landmark in the pipeline frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub id: usize,
    pub position: Vector3<f64>,
    pub host_keyframe: usize,
    pub observations: usize,
    pub parallax_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Initializing,
    Tracking,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub status: TrackStatus,
    /// World-to-camera pose of the latest frame.
    pub t_cw: Isometry3<f64>,
    /// Constant-velocity increment, `T_k · T_{k-1}⁻¹`.
    pub velocity: Isometry3<f64>,
    pub reference_keyframe: Option<usize>,
    /// Median camera-frame depth of the tracked map points.
    pub average_scene_depth: f64,
}

impl TrackState {
    pub fn camera_pose(&self, t_us: i64) -> Pose {
        solver::to_pose(t_us, &self.t_cw)
    }
}

/// Per-frame measurements the keyframe policies look at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStats {
    /// Camera-centre distance to the closest keyframe in the window.
    pub nearest_keyframe_distance: f64,
    /// Share of the reference keyframe's points still tracked.
    pub tracked_fraction: f64,
    /// Median pixel displacement of those points since the reference keyframe.
    pub median_flow: f64,
}

pub fn keyframe_decision(policy: &KeyframePolicy, state: &TrackState, stats: &FrameStats) -> bool {
    match *policy {
        KeyframePolicy::DistanceBased { min_dist_fraction } => {
            stats.nearest_keyframe_distance > min_dist_fraction * state.average_scene_depth
        }
        KeyframePolicy::ViewChange {
            min_tracked_fraction,
            min_median_flow,
        } => stats.tracked_fraction < min_tracked_fraction || stats.median_flow > min_median_flow,
    }
}

fn default_window() -> usize {
    7
}
fn default_seed() -> u64 {
    42
}
fn default_init_flow() -> f64 {
    8.0
}
fn default_radius() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default)]
    pub detector: DetectorParams,
    pub policy: KeyframePolicy,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Median feature flow since the reference frame that triggers a
    /// two-view initialization attempt.
    #[serde(default = "default_init_flow")]
    pub init_min_flow_px: f64,
    /// Patch search radius around each predicted position.
    #[serde(default = "default_radius")]
    pub search_radius: usize,
}

impl SessionConfig {
    pub fn new(detector: DetectorParams, policy: KeyframePolicy) -> Self {
        Self {
            detector,
            policy,
            window_size: default_window(),
            seed: default_seed(),
            init_min_flow_px: default_init_flow(),
            search_radius: default_radius(),
        }
    }

    pub fn validate(&self) -> Result<(), VoError> {
        self.detector.validate()?;
        self.policy.validate()?;
        if self.window_size < 2 {
            return Err(VoError::InvalidConfig("window_size must be at least 2".into()));
        }
        if !(self.init_min_flow_px >= twoview::MIN_INIT_FLOW_PX) {
            return Err(VoError::InvalidConfig(format!(
                "init_min_flow_px must be at least {}",
                twoview::MIN_INIT_FLOW_PX
            )));
        }
        if self.search_radius < 2 {
            return Err(VoError::InvalidConfig("search_radius must be at least 2".into()));
        }
        Ok(())
    }
}
