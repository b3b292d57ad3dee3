//! Trajectory files, time synchronization, scale anchoring, similarity
//! alignment, RMSE scoring and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flight::StateSample;
use crate::geometry::{rotation_angle_deg, Pose};
use crate::terrain::Heightfield;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectories do not overlap in time")]
    NoOverlap,
    #[error("estimate altitude magnitude {0:e} is too small to anchor the scale")]
    DegenerateAnchor(f64),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("estimate never reached tracking")]
    NotInitialized,
    #[error("timestamp {t_us} at sample {index} is not after the previous one")]
    NonMonotonic { index: usize, t_us: i64 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleStatus {
    Initializing,
    Tracking,
    Lost,
}

impl SampleStatus {
    pub fn code(self) -> char {
        match self {
            SampleStatus::Initializing => 'I',
            SampleStatus::Tracking => 'T',
            SampleStatus::Lost => 'L',
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "I" => Some(SampleStatus::Initializing),
            "T" => Some(SampleStatus::Tracking),
            "L" => Some(SampleStatus::Lost),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajSample {
    pub pose: Pose,
    pub status: SampleStatus,
}

impl TrajSample {
    pub fn t_us(&self) -> i64 {
        self.pose.t_us
    }
}

/// Timestamped body poses in a labelled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub label: String,
    samples: Vec<TrajSample>,
}

impl Trajectory {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            samples: Vec::new(),
        }
    }

    pub fn from_samples(label: impl Into<String>, samples: Vec<TrajSample>) -> Result<Self, EvalError> {
        let mut t = Self::new(label);
        for s in samples {
            t.push(s)?;
        }
        Ok(t)
    }

    /// Truth trajectory with every sample marked tracking.
    pub fn from_states(label: impl Into<String>, states: &[StateSample]) -> Result<Self, EvalError> {
        Self::from_samples(
            label,
            states
                .iter()
                .map(|s| TrajSample {
                    pose: s.pose,
                    status: SampleStatus::Tracking,
                })
                .collect(),
        )
    }

    pub fn push(&mut self, sample: TrajSample) -> Result<(), EvalError> {
        if let Some(last) = self.samples.last() {
            if sample.t_us() <= last.t_us() {
                return Err(EvalError::NonMonotonic {
                    index: self.samples.len(),
                    t_us: sample.t_us(),
                });
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[TrajSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_tracking(&self) -> Option<&TrajSample> {
        self.samples.iter().find(|s| s.status == SampleStatus::Tracking)
    }

    pub fn tracked_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let n = self.samples.iter().filter(|s| s.status == SampleStatus::Tracking).count();
        n as f64 / self.samples.len() as f64
    }

    /// Serializes to the text format; floats use shortest round-trip form so
    /// `parse(to_text())` is bit-exact.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(64 + self.samples.len() * 96);
        let _ = writeln!(out, "TRAJ v1 {}", self.label);
        for s in &self.samples {
            let p = &s.pose;
            let q = p.rotation.quaternion();
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                p.t_us,
                p.translation.x,
                p.translation.y,
                p.translation.z,
                q.w,
                q.i,
                q.j,
                q.k,
                s.status.code()
            );
        }
        out
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, EvalError> {
        let err = |line: usize, message: String| EvalError::Parse {
            path: path.to_string(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let label = match header.strip_prefix("TRAJ v1") {
            Some("") => "",
            Some(rest) if rest.starts_with(' ') => &rest[1..],
            _ => return Err(err(1, format!("bad header {header:?}"))),
        };
        let mut traj = Trajectory::new(label);
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 9 {
                return Err(err(ln, format!("expected 9 fields, found {}", f.len())));
            }
            let t_us: i64 = f[0].parse().map_err(|e| err(ln, format!("t_us: {e}")))?;
            let mut v = [0.0f64; 7];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = f[k + 1].parse().map_err(|e| err(ln, format!("field {}: {e}", k + 2)))?;
                if !slot.is_finite() {
                    return Err(err(ln, format!("field {} is not finite", k + 2)));
                }
            }
            let status = SampleStatus::from_code(f[8]).ok_or_else(|| err(ln, format!("bad status {:?}", f[8])))?;
            let q = Quaternion::new(v[3], v[4], v[5], v[6]);
            let n = q.norm();
            if n < 1e-6 {
                return Err(err(ln, "zero quaternion".into()));
            }
            let rotation = if (n - 1.0).abs() <= 1e-12 {
                UnitQuaternion::new_unchecked(q)
            } else {
                UnitQuaternion::new_normalize(q)
            };
            let pose = Pose::new(t_us, rotation, Vector3::new(v[0], v[1], v[2]));
            traj.push(TrajSample { pose, status }).map_err(|e| err(ln, e.to_string()))?;
        }
        Ok(traj)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }
}

/// Estimate sample paired with truth interpolated at its timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePair {
    pub t_us: i64,
    pub truth: Pose,
    pub est: Pose,
    pub status: SampleStatus,
}

/// Shortest-arc spherical interpolation.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, alpha: f64) -> UnitQuaternion<f64> {
    let b = if a.coords.dot(&b.coords) < 0.0 {
        UnitQuaternion::new_unchecked(-b.into_inner())
    } else {
        *b
    };
    a.try_slerp(&b, alpha, 1e-15).unwrap_or(*a)
}

/// Truth pose at `t_us`, or `None` outside the truth time range.
pub fn interpolate(truth: &Trajectory, t_us: i64) -> Option<Pose> {
    let s = truth.samples();
    let (first, last) = (s.first()?, s.last()?);
    if t_us < first.t_us() || t_us > last.t_us() {
        return None;
    }
    let i = s.partition_point(|x| x.t_us() <= t_us);
    let a = &s[i - 1].pose;
    if a.t_us == t_us {
        return Some(*a);
    }
    let b = &s[i].pose;
    let alpha = (t_us - a.t_us) as f64 / (b.t_us - a.t_us) as f64;
    Some(Pose::new(
        t_us,
        slerp(&a.rotation, &b.rotation, alpha),
        a.translation + (b.translation - a.translation) * alpha,
    ))
}

/// Pairs each estimate sample inside the truth time range with the truth
/// interpolated at its timestamp.
pub fn time_sync(truth: &Trajectory, est: &Trajectory) -> Result<Vec<PosePair>, EvalError> {
    let pairs: Vec<PosePair> = est
        .samples()
        .iter()
        .filter_map(|e| {
            interpolate(truth, e.t_us()).map(|t| PosePair {
                t_us: e.t_us(),
                truth: t,
                est: e.pose,
                status: e.status,
            })
        })
        .collect();
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMethod {
    #[default]
    AltitudeAnchor,
    Sim3Lsq,
}

/// Similarity mapping estimate coordinates onto truth:
/// `p_truth = scale · rotation · p_est + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentResult {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub method: AlignmentMethod,
    /// RMS position residual over the pairs used to fit, when least-squares.
    pub residual: Option<f64>,
}

impl AlignmentResult {
    pub fn identity(method: AlignmentMethod) -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            method,
            residual: None,
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply(&self, pose: &Pose) -> Pose {
        Pose::new(pose.t_us, self.rotation * pose.rotation, self.apply_point(&pose.translation))
    }

    pub fn apply_pairs(&self, pairs: &[PosePair]) -> Vec<PosePair> {
        pairs
            .iter()
            .map(|p| PosePair {
                est: self.apply(&p.est),
                ..*p
            })
            .collect()
    }

    /// RMS position error of the aligned estimate over `pairs`.
    pub fn position_residual(&self, pairs: &[PosePair]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let ss: f64 = pairs
            .iter()
            .map(|p| (self.apply_point(&p.est.translation) - p.truth.translation).norm_squared())
            .sum();
        (ss / pairs.len() as f64).sqrt()
    }
}

/// Anchors the estimate at its first tracking sample: the scale is the truth
/// altitude above `ground` divided by the estimate's |z|, and the full
/// anchor pose of the estimate is mapped onto the truth pose.
pub fn anchor_alignment(
    truth: &Trajectory,
    est: &Trajectory,
    ground: &Heightfield,
) -> Result<AlignmentResult, EvalError> {
    let anchor = est.first_tracking().ok_or(EvalError::NotInitialized)?;
    let t = interpolate(truth, anchor.t_us()).ok_or(EvalError::NoOverlap)?;
    anchor_at(&t, &anchor.pose, ground)
}

/// Anchor alignment from one truth/estimate pose pair.
pub fn anchor_at(truth: &Pose, est: &Pose, ground: &Heightfield) -> Result<AlignmentResult, EvalError> {
    let z = est.translation.z.abs();
    if !(z >= 1e-9) {
        return Err(EvalError::DegenerateAnchor(z));
    }
    let h = truth.translation.z - ground.height_at(truth.translation.x, truth.translation.y);
    let scale = h / z;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(EvalError::DegenerateConfiguration(format!(
            "truth altitude above ground {h} gives non-positive scale"
        )));
    }
    let rotation = truth.rotation * est.rotation.inverse();
    let translation = truth.translation - rotation * est.translation * scale;
    Ok(AlignmentResult {
        scale,
        rotation,
        translation,
        method: AlignmentMethod::AltitudeAnchor,
        residual: None,
    })
}

/// Closed-form least-squares similarity (Umeyama) over paired positions.
pub fn sim3_alignment(pairs: &[PosePair]) -> Result<AlignmentResult, EvalError> {
    let n = pairs.len();
    if n < 3 {
        return Err(EvalError::DegenerateConfiguration(format!("{n} pairs, need at least 3")));
    }
    let inv = 1.0 / n as f64;
    let mx = pairs.iter().map(|p| p.est.translation).sum::<Vector3<f64>>() * inv;
    let my = pairs.iter().map(|p| p.truth.translation).sum::<Vector3<f64>>() * inv;
    let mut cov = Matrix3::zeros();
    let mut sx = Matrix3::zeros();
    let mut var_x = 0.0;
    for p in pairs {
        let dx = p.est.translation - mx;
        let dy = p.truth.translation - my;
        cov += dy * dx.transpose();
        sx += dx * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov *= inv;
    var_x *= inv;
    let ev = sx.symmetric_eigenvalues();
    let mut e = [ev[0], ev[1], ev[2]];
    e.sort_by(|a, b| b.total_cmp(a));
    if !(e[0] > 0.0) || e[1] <= 1e-12 * e[0] {
        return Err(EvalError::DegenerateConfiguration("collinear or coincident positions".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = (svd.singular_values[0] * s[(0, 0)]
        + svd.singular_values[1] * s[(1, 1)]
        + svd.singular_values[2] * s[(2, 2)])
        / var_x;
    if !(scale > 0.0) {
        return Err(EvalError::DegenerateConfiguration("non-positive scale".into()));
    }
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let translation = my - rotation * mx * scale;
    let mut out = AlignmentResult {
        scale,
        rotation,
        translation,
        method: AlignmentMethod::Sim3Lsq,
        residual: None,
    };
    out.residual = Some(out.position_residual(pairs));
    Ok(out)
}

/// Aviation attitude of a world (ENU) <- body (FRD) rotation: yaw clockwise
/// from north, pitch nose-up, roll right-wing-down, all in degrees.
pub fn attitude_deg(rotation: &UnitQuaternion<f64>) -> (f64, f64, f64) {
    let ned_from_enu = Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0);
    let r = ned_from_enu * rotation.to_rotation_matrix().into_inner();
    let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(r).euler_angles();
    (roll.to_degrees(), pitch.to_degrees(), yaw.to_degrees())
}

/// One row of the per-axis series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub t_us: i64,
    /// x, y, z, roll, pitch, yaw of the aligned estimate.
    pub est: [f64; 6],
    pub truth: [f64; 6],
}

fn axes(p: &Pose) -> [f64; 6] {
    let (roll, pitch, yaw) = attitude_deg(&p.rotation);
    [p.translation.x, p.translation.y, p.translation.z, roll, pitch, yaw]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    /// Absent for failed runs.
    pub pos_rmse_m: Option<f64>,
    pub rot_rmse_deg: Option<f64>,
    pub tracked_fraction: f64,
    pub failed: bool,
    pub series: Vec<SeriesPoint>,
}

/// Scores already-aligned pairs. Only tracking samples contribute. The run
/// is failed when it never tracked or does not end tracking.
pub fn rmse(pairs: &[PosePair]) -> ErrorReport {
    let tracked: Vec<&PosePair> = pairs.iter().filter(|p| p.status == SampleStatus::Tracking).collect();
    let failed = tracked.is_empty() || pairs.last().map(|p| p.status) != Some(SampleStatus::Tracking);
    let tracked_fraction = if pairs.is_empty() {
        0.0
    } else {
        tracked.len() as f64 / pairs.len() as f64
    };
    let series = tracked
        .iter()
        .map(|p| SeriesPoint {
            t_us: p.t_us,
            est: axes(&p.est),
            truth: axes(&p.truth),
        })
        .collect();
    let (pos, rot) = if failed {
        (None, None)
    } else {
        let n = tracked.len() as f64;
        let mut sp = 0.0;
        let mut sr = 0.0;
        for p in &tracked {
            sp += (p.est.translation - p.truth.translation).norm_squared();
            let a = rotation_angle_deg(&p.truth.rotation, &p.est.rotation);
            sr += a * a;
        }
        (Some((sp / n).sqrt()), Some((sr / n).sqrt()))
    };
    ErrorReport {
        pos_rmse_m: pos,
        rot_rmse_deg: rot,
        tracked_fraction,
        failed,
        series,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub alignment: Option<AlignmentResult>,
    pub report: ErrorReport,
}

/// Synchronizes, aligns with `method`, and scores. An estimate that never
/// tracked yields a failed report without alignment.
pub fn evaluate(
    truth: &Trajectory,
    est: &Trajectory,
    ground: &Heightfield,
    method: AlignmentMethod,
) -> Result<Evaluation, EvalError> {
    let pairs = time_sync(truth, est)?;
    let anchor = pairs.iter().find(|p| p.status == SampleStatus::Tracking);
    let Some(anchor) = anchor else {
        return Ok(Evaluation {
            alignment: None,
            report: rmse(&pairs),
        });
    };
    let alignment = match method {
        AlignmentMethod::AltitudeAnchor => anchor_at(&anchor.truth, &anchor.est, ground)?,
        AlignmentMethod::Sim3Lsq => {
            let tracked: Vec<PosePair> =
                pairs.iter().copied().filter(|p| p.status == SampleStatus::Tracking).collect();
            sim3_alignment(&tracked)?
        }
    };
    Ok(Evaluation {
        alignment: Some(alignment),
        report: rmse(&alignment.apply_pairs(&pairs)),
    })
}

/// One scored run with its sweep coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub label: String,
    pub airspeed: f64,
    pub roll_rate: f64,
    pub altitude: f64,
    pub policy: String,
    pub report: ErrorReport,
}

pub const AXES: [&str; 6] = ["x", "y", "z", "roll", "pitch", "yaw"];
const AXIS_UNITS: [&str; 6] = ["m", "m", "m", "deg", "deg", "deg"];

pub const SERIES_HEADER: &str = "t_s,x,y,z,roll_deg,pitch_deg,yaw_deg,truth_x,truth_y,truth_z,truth_roll_deg,truth_pitch_deg,truth_yaw_deg";

pub fn series_csv(report: &ErrorReport) -> String {
    let mut out = String::from(SERIES_HEADER);
    out.push('\n');
    for s in &report.series {
        let _ = write!(out, "{:.6}", s.t_us as f64 * 1e-6);
        for v in s.est.iter().chain(s.truth.iter()) {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

fn fmt_key(v: f64) -> String {
    format!("{v}")
}

/// Sweep matrix: one row per (airspeed, roll rate, altitude), then per
/// policy a position and a rotation RMSE column. Failed runs render as `X`;
/// the lowest value in each metric group of a row carries a trailing `*`
/// when more than one policy is present.
pub fn sweep_matrix_csv(runs: &[RunReport]) -> String {
    let mut policies: Vec<&str> = Vec::new();
    for r in runs {
        if !policies.contains(&r.policy.as_str()) {
            policies.push(&r.policy);
        }
    }
    let mut out = String::from("airspeed_mps,roll_rate_dps,altitude_m");
    for p in &policies {
        let _ = write!(out, ",{p}_pos_m");
    }
    for p in &policies {
        let _ = write!(out, ",{p}_rot_deg");
    }
    out.push('\n');

    // Keys as bit patterns keep rows in numeric order for non-negative values.
    let mut rows: BTreeMap<(u64, u64, u64), BTreeMap<usize, &ErrorReport>> = BTreeMap::new();
    for r in runs {
        let key = (r.airspeed.to_bits(), r.roll_rate.to_bits(), r.altitude.to_bits());
        let pi = policies.iter().position(|p| *p == r.policy).unwrap();
        rows.entry(key).or_default().entry(pi).or_insert(&r.report);
    }
    let flag = policies.len() > 1;
    for ((a, rr, alt), cells) in &rows {
        let _ = write!(
            out,
            "{},{},{}",
            fmt_key(f64::from_bits(*a)),
            fmt_key(f64::from_bits(*rr)),
            fmt_key(f64::from_bits(*alt))
        );
        for metric in [0usize, 1] {
            let vals: Vec<Option<Option<f64>>> = (0..policies.len())
                .map(|pi| {
                    cells.get(&pi).map(|r| {
                        if r.failed {
                            None
                        } else if metric == 0 {
                            r.pos_rmse_m
                        } else {
                            r.rot_rmse_deg
                        }
                    })
                })
                .collect();
            let min = vals.iter().flatten().flatten().copied().fold(f64::INFINITY, f64::min);
            for v in &vals {
                out.push(',');
                match v {
                    None => {}
                    Some(None) => out.push('X'),
                    Some(Some(x)) => {
                        let _ = write!(out, "{x:.3}");
                        if flag && *x == min {
                            out.push('*');
                        }
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Per-run CSV with one row per run, in input order.
pub fn runs_csv(runs: &[RunReport]) -> String {
    let mut out = String::from("label,airspeed_mps,roll_rate_dps,altitude_m,policy,failed,tracked_fraction,pos_rmse_m,rot_rmse_deg\n");
    let cell = |v: Option<f64>| v.map_or("X".to_string(), |x| format!("{x:.6}"));
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{},{}",
            r.label,
            fmt_key(r.airspeed),
            fmt_key(r.roll_rate),
            fmt_key(r.altitude),
            r.policy,
            r.report.failed,
            r.report.tracked_fraction,
            cell(r.report.pos_rmse_m),
            cell(r.report.rot_rmse_deg)
        );
    }
    out
}

/// File-name-safe form of a label.
pub fn file_stem(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "run".into()
    } else {
        s
    }
}

struct Line<'a> {
    name: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

fn svg_plot(title: &str, xlabel: &str, ylabel: &str, lines: &[Line], equal_aspect: bool) -> String {
    let (w, h) = (640.0, 400.0);
    let (l, r, t, b) = (70.0, 20.0, 30.0, 50.0);
    let (pw, ph) = (w - l - r, h - t - b);
    let mut x0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for p in lines.iter().flat_map(|l| l.points.iter()) {
        x0 = x0.min(p.0);
        x1 = x1.max(p.0);
        y0 = y0.min(p.1);
        y1 = y1.max(p.1);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (mut sx, mut sy) = (pw / (x1 - x0), ph / (y1 - y0));
    if equal_aspect {
        let s = sx.min(sy);
        (sx, sy) = (s, s);
    }
    let px = |x: f64| l + (x - x0) * sx;
    let py = |y: f64| t + ph - (y - y0) * sy;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#, w / 2.0, xml(title));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, l + pw / 2.0, h - 12.0, xml(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        t + ph / 2.0,
        t + ph / 2.0,
        xml(ylabel)
    );
    let _ = writeln!(out, r#"<text x="{l}" y="{}" text-anchor="start">{x0:.1}</text>"#, t + ph + 16.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{x1:.1}</text>"#, l + pw, t + ph + 16.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y0:.1}</text>"#, l - 4.0, t + ph);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y1:.1}</text>"#, l - 4.0, t + 10.0);
    for (i, line) in lines.iter().enumerate() {
        if !line.points.is_empty() {
            let mut d = String::new();
            for (k, p) in line.points.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2}", if k == 0 { "M" } else { " L" }, px(p.0), py(p.1));
            }
            let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.5"/>"#, line.color);
        }
        let ly = t + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{}" text-anchor="end">{}</text>"#,
            l + pw - 6.0,
            line.color,
            xml(line.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes per-run series CSVs, six axis plots and a top-down path plot per
/// run, plus `matrix.csv` and `runs.csv`. Returns the written paths.
pub fn emit_report(runs: &[RunReport], out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), EvalError> {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };
    for run in runs {
        let stem = file_stem(&run.label);
        let s = &run.report.series;
        put(format!("{stem}.csv"), series_csv(&run.report))?;
        for (i, axis) in AXES.iter().enumerate() {
            let est = s.iter().map(|p| (p.t_us as f64 * 1e-6, p.est[i])).collect();
            let tru = s.iter().map(|p| (p.t_us as f64 * 1e-6, p.truth[i])).collect();
            let svg = svg_plot(
                &format!("{} {axis}", run.label),
                "t [s]",
                &format!("{axis} [{}]", AXIS_UNITS[i]),
                &[
                    Line {
                        name: "truth",
                        color: "black",
                        points: tru,
                    },
                    Line {
                        name: &run.policy,
                        color: "crimson",
                        points: est,
                    },
                ],
                false,
            );
            put(format!("{stem}_{axis}.svg"), svg)?;
        }
        let est = s.iter().map(|p| (p.est[0], p.est[1])).collect();
        let tru = s.iter().map(|p| (p.truth[0], p.truth[1])).collect();
        let svg = svg_plot(
            &format!("{} path", run.label),
            "east [m]",
            "north [m]",
            &[
                Line {
                    name: "truth",
                    color: "black",
                    points: tru,
                },
                Line {
                    name: &run.policy,
                    color: "crimson",
                    points: est,
                },
            ],
            true,
        );
        put(format!("{stem}_xy.svg"), svg)?;
    }
    put("matrix.csv".into(), sweep_matrix_csv(runs))?;
    put("runs.csv".into(), runs_csv(runs))?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn line_traj(n: usize, status: SampleStatus) -> Trajectory {
        let samples = (0..n)
            .map(|k| TrajSample {
                pose: Pose::new(
                    k as i64 * 100_000,
                    UnitQuaternion::from_euler_angles(0.1 * k as f64, 0.05, 0.3 * k as f64),
                    Vector3::new(k as f64 * 3.0, (k as f64).sin() * 5.0, 300.0 + k as f64),
                ),
                status,
            })
            .collect();
        Trajectory::from_samples("t", samples).unwrap()
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut t = line_traj(20, SampleStatus::Tracking);
        t.label = "est run 1".into();
        let back = Trajectory::parse(&t.to_text(), "mem").unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_text(), t.to_text());
    }

    #[test]
    fn parse_rejects_bad_lines() {
        assert!(Trajectory::parse("TRAJ v2 x\n", "m").is_err());
        assert!(Trajectory::parse("TRAJ v1 x\n0 1 2 3 1 0 0 0 Q\n", "m").is_err());
        assert!(Trajectory::parse("TRAJ v1 x\n5 1 2 3 1 0 0 0 T\n5 1 2 3 1 0 0 0 T\n", "m").is_err());
        match Trajectory::parse("TRAJ v1 x\n0 1 2 3 1 0 0\n", "f.traj") {
            Err(EvalError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sync_equal_timestamps_exact() {
        let t = line_traj(10, SampleStatus::Tracking);
        let pairs = time_sync(&t, &t).unwrap();
        assert_eq!(pairs.len(), 10);
        for (p, s) in pairs.iter().zip(t.samples()) {
            assert_eq!(p.truth, s.pose);
        }
    }

    #[test]
    fn sync_midpoint_interpolation() {
        let q90 = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let truth = Trajectory::from_samples(
            "truth",
            vec![
                TrajSample {
                    pose: Pose::new(0, UnitQuaternion::identity(), Vector3::zeros()),
                    status: SampleStatus::Tracking,
                },
                TrajSample {
                    pose: Pose::new(1000, q90, Vector3::new(1.0, 0.0, 0.0)),
                    status: SampleStatus::Tracking,
                },
            ],
        )
        .unwrap();
        let p = interpolate(&truth, 500).unwrap();
        assert!((p.translation - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
        let yaw = p.rotation.euler_angles().2;
        assert!((yaw - FRAC_PI_2 / 2.0).abs() < 1e-9);
        assert!(interpolate(&truth, 1001).is_none());
    }

    #[test]
    fn sync_without_overlap_errors() {
        let a = line_traj(3, SampleStatus::Tracking);
        let mut b = Trajectory::new("b");
        b.push(TrajSample {
            pose: Pose::identity(10_000_000),
            status: SampleStatus::Tracking,
        })
        .unwrap();
        assert!(matches!(time_sync(&a, &b), Err(EvalError::NoOverlap)));
    }

    fn transformed(t: &Trajectory, s: f64, r: UnitQuaternion<f64>, tr: Vector3<f64>) -> Trajectory {
        let samples = t
            .samples()
            .iter()
            .map(|x| TrajSample {
                pose: Pose::new(x.t_us(), r * x.pose.rotation, r * x.pose.translation * s + tr),
                status: x.status,
            })
            .collect();
        Trajectory::from_samples("est", samples).unwrap()
    }

    #[test]
    fn anchor_recovers_half_scale() {
        let truth = line_traj(30, SampleStatus::Tracking);
        let est = transformed(&truth, 0.5, UnitQuaternion::identity(), Vector3::zeros());
        let ground = Heightfield::flat(0.0);
        let e = evaluate(&truth, &est, &ground, AlignmentMethod::AltitudeAnchor).unwrap();
        let a = e.alignment.unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12);
        assert!(e.report.pos_rmse_m.unwrap() < 1e-9);
        assert!(e.report.rot_rmse_deg.unwrap() < 1e-6);
    }

    #[test]
    fn anchor_identity_and_yaw_scale() {
        let truth = line_traj(30, SampleStatus::Tracking);
        let ground = Heightfield::flat(0.0);
        let a = anchor_alignment(&truth, &truth, &ground).unwrap();
        assert!((a.scale - 1.0).abs() < 1e-12);
        assert!(a.translation.norm() < 1e-9);
        assert!(rotation_angle_deg(&a.rotation, &UnitQuaternion::identity()) < 1e-9);

        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let est = transformed(&truth, 3.0, rz, Vector3::zeros());
        let a = anchor_alignment(&truth, &est, &ground).unwrap();
        assert!((a.scale - 1.0 / 3.0).abs() < 1e-12);
        assert!(a.position_residual(&time_sync(&truth, &est).unwrap()) < 1e-9);
    }

    #[test]
    fn anchor_degenerate_altitude() {
        let truth = line_traj(5, SampleStatus::Tracking);
        let est = transformed(&truth, 0.0, UnitQuaternion::identity(), Vector3::zeros());
        let r = anchor_alignment(&truth, &est, &Heightfield::flat(0.0));
        assert!(matches!(r, Err(EvalError::DegenerateAnchor(_))));
    }

    #[test]
    fn sim3_recovers_similarity() {
        let truth = line_traj(40, SampleStatus::Tracking);
        let r = UnitQuaternion::from_euler_angles(0.3, -0.7, 2.0);
        let est = transformed(&truth, 0.37, r, Vector3::new(4.0, -2.0, 9.0));
        let pairs = time_sync(&truth, &est).unwrap();
        let a = sim3_alignment(&pairs).unwrap();
        assert!((a.scale - 1.0 / 0.37).abs() < 1e-9);
        assert!(a.residual.unwrap() < 1e-9);
        let id = sim3_alignment(&time_sync(&truth, &truth).unwrap()).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12 && id.translation.norm() < 1e-9);
        assert!(matches!(sim3_alignment(&pairs[..2]), Err(EvalError::DegenerateConfiguration(_))));
    }

    #[test]
    fn rmse_offset_and_failure() {
        let truth = line_traj(10, SampleStatus::Tracking);
        let est = transformed(&truth, 1.0, UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 3.0));
        let r = rmse(&time_sync(&truth, &est).unwrap());
        assert!((r.pos_rmse_m.unwrap() - 3.0).abs() < 1e-12);
        assert!(r.rot_rmse_deg.unwrap() < 1e-12);
        assert!(!r.failed);

        let mut samples = est.samples().to_vec();
        samples[9].status = SampleStatus::Lost;
        let lost = Trajectory::from_samples("l", samples).unwrap();
        let r = rmse(&time_sync(&truth, &lost).unwrap());
        assert!(r.failed && r.pos_rmse_m.is_none() && r.rot_rmse_deg.is_none());
        assert!((r.tracked_fraction - 0.9).abs() < 1e-12);
    }

    fn run(policy: &str, alt: f64, pos: Option<f64>) -> RunReport {
        RunReport {
            label: format!("{policy}_{alt}"),
            airspeed: 10.0,
            roll_rate: 25.0,
            altitude: alt,
            policy: policy.into(),
            report: ErrorReport {
                pos_rmse_m: pos,
                rot_rmse_deg: pos.map(|p| p / 10.0),
                tracked_fraction: 1.0,
                failed: pos.is_none(),
                series: Vec::new(),
            },
        }
    }

    #[test]
    fn matrix_marks_failures_and_minima() {
        let m = sweep_matrix_csv(&[
            run("distance", 300.0, None),
            run("view", 300.0, Some(2.0)),
            run("distance", 150.0, Some(1.5)),
            run("view", 150.0, Some(2.5)),
        ]);
        let lines: Vec<&str> = m.lines().collect();
        assert_eq!(
            lines[0],
            "airspeed_mps,roll_rate_dps,altitude_m,distance_pos_m,view_pos_m,distance_rot_deg,view_rot_deg"
        );
        assert_eq!(lines[1], "10,25,150,1.500*,2.500,0.150*,0.250");
        assert_eq!(lines[2], "10,25,300,X,2.000*,X,0.200*");
    }

    #[test]
    fn empty_matrix_is_header_only() {
        assert_eq!(sweep_matrix_csv(&[]), "airspeed_mps,roll_rate_dps,altitude_m\n");
    }

    #[test]
    fn emit_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let truth = line_traj(10, SampleStatus::Tracking);
        let mut r = run("view", 300.0, Some(1.0));
        r.report = rmse(&time_sync(&truth, &truth).unwrap());
        let files = emit_report(&[r], dir.path()).unwrap();
        assert_eq!(files.len(), 1 + 6 + 1 + 2);
        let csv = fs::read_to_string(dir.path().join("view_300.csv")).unwrap();
        assert_eq!(csv.lines().count(), 11);
        assert!(fs::read_to_string(dir.path().join("view_300_xy.svg")).unwrap().starts_with("<svg"));
    }

    #[test]
    fn level_flight_attitude() {
        let q = crate::flight::body_attitude(FRAC_PI_2, 0.0, 0.2);
        let (roll, pitch, _yaw) = attitude_deg(&q);
        assert!((roll - 0.2f64.to_degrees()).abs() < 1e-9, "{roll}");
        assert!(pitch.abs() < 1e-9);
    }
}
