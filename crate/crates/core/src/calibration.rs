//! Checkerboard calibration: normalized DLT homographies, closed-form
//! intrinsics from the absolute-conic constraints, then Levenberg-Marquardt
//! over intrinsics, distortion and per-view board poses.
//!
//! Board poses map board coordinates (z = 0 plane, metres) into the camera
//! frame: `p_cam = rotation * p_board + translation`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, SMatrix, UnitQuaternion, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nearest_rotation, skew, CameraIntrinsics, Pose};

pub const MIN_VIEWS: usize = 3;
pub const CSV_HEADER: &str = "view_id,board_x_m,board_y_m,px,py";
/// Closed-form condition estimate above which the board orientations are
/// reported as ill-conditioned.
pub const ILL_CONDITIONED: f64 = 1e8;
const MAX_ITERATIONS: usize = 100;
const INITIAL_DAMPING: f64 = 1e-3;
/// Intrinsic parameters in refinement order.
pub const N_INTRINSICS: usize = 8;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid checkerboard: {0}")]
    InvalidSpec(String),
    #[error("board lies behind the camera in pose {index}")]
    InvalidPose { index: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("calibration needs at least {MIN_VIEWS} views, got {found}")]
    InsufficientViews { found: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckerboardSpec {
    pub inner_cols: usize,
    pub inner_rows: usize,
    pub square_size: f64,
}

impl CheckerboardSpec {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.inner_cols < 3 || self.inner_rows < 3 {
            return Err(CalibrationError::InvalidSpec("at least 3×3 inner corners required".into()));
        }
        if !(self.square_size > 0.0) || !self.square_size.is_finite() {
            return Err(CalibrationError::InvalidSpec("square size must be positive".into()));
        }
        Ok(())
    }

    /// Inner-corner board coordinates, row-major from the origin corner.
    pub fn corners(&self) -> Vec<Vector2<f64>> {
        let mut out = Vec::with_capacity(self.inner_cols * self.inner_rows);
        for r in 0..self.inner_rows {
            for c in 0..self.inner_cols {
                out.push(Vector2::new(c as f64 * self.square_size, r as f64 * self.square_size));
            }
        }
        out
    }

    pub fn centre(&self) -> Vector2<f64> {
        Vector2::new(
            (self.inner_cols - 1) as f64 * self.square_size / 2.0,
            (self.inner_rows - 1) as f64 * self.square_size / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub board: Vector2<f64>,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationView {
    pub view_id: u32,
    pub correspondences: Vec<Correspondence>,
}

/// Board poses looking at the board centre from `distance`, tilted
/// alternately about the camera x and y axes by up to `max_tilt_deg`.
pub fn orbit_poses(spec: &CheckerboardSpec, n: usize, distance: f64, max_tilt_deg: f64) -> Vec<Pose> {
    let c = spec.centre();
    (0..n)
        .map(|i| {
            let phase = i as f64 / n.max(1) as f64 * std::f64::consts::TAU;
            let tilt = max_tilt_deg.to_radians();
            let ax = tilt * phase.cos();
            let ay = tilt * phase.sin();
            let az = 0.3 * (i as f64 - n as f64 / 2.0) / n.max(1) as f64;
            let rot = UnitQuaternion::from_euler_angles(ax, ay, az);
            let t = Vector3::new(0.0, 0.0, distance) - rot * Vector3::new(c.x, c.y, 0.0);
            Pose::new(0, rot, t)
        })
        .collect()
}

/// Forward-projects the board corners through `k` for each pose and adds
/// seeded Gaussian pixel noise.
pub fn synthesize_views(
    k: &CameraIntrinsics,
    spec: &CheckerboardSpec,
    poses: &[Pose],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<CalibrationView>, CalibrationError> {
    spec.validate()?;
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(CalibrationError::InvalidSpec("noise sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let corners = spec.corners();
    let mut views = Vec::with_capacity(poses.len());
    for (index, pose) in poses.iter().enumerate() {
        let mut correspondences = Vec::with_capacity(corners.len());
        for b in &corners {
            let pc = pose.transform_point(&Vector3::new(b.x, b.y, 0.0));
            if pc.z <= 0.0 {
                return Err(CalibrationError::InvalidPose { index });
            }
            let mut pixel = k.project(&pc)?;
            if noise_sigma > 0.0 {
                pixel += Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
            }
            correspondences.push(Correspondence { board: *b, pixel });
        }
        views.push(CalibrationView {
            view_id: index as u32,
            correspondences,
        });
    }
    Ok(views)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyEstimate {
    /// Board-to-pixel homography scaled so `h[(2, 2)] = 1` when possible.
    pub h: Matrix3<f64>,
    /// Smallest singular value of the normalized design matrix.
    pub algebraic_residual: f64,
}

fn normalizer(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vector2<f64>>() / n;
    let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Normalized DLT from board coordinates to pixels.
pub fn estimate_homography(view: &CalibrationView) -> Result<HomographyEstimate, CalibrationError> {
    let n = view.correspondences.len();
    if n < 4 {
        return Err(CalibrationError::Degenerate(format!(
            "view {} has {n} correspondences, need 4",
            view.view_id
        )));
    }
    let src: Vec<Vector2<f64>> = view.correspondences.iter().map(|c| c.board).collect();
    let dst: Vec<Vector2<f64>> = view.correspondences.iter().map(|c| c.pixel).collect();
    let ts = normalizer(&src);
    let td = normalizer(&dst);
    // Padded to at least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let s = apply_h(&ts, s);
        let d = apply_h(&td, d);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    if sv[second] <= 1e-9 * sv[order[order.len() - 1]] {
        return Err(CalibrationError::Degenerate(format!(
            "view {} correspondences do not constrain a homography",
            view.view_id
        )));
    }
    let h = vt.row(smallest);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().expect("normalizer is invertible");
    let mut hm = td_inv * hn * ts;
    let scale = if hm[(2, 2)].abs() > 1e-12 { hm[(2, 2)] } else { hm.norm() };
    hm /= scale;
    Ok(HomographyEstimate {
        h: hm,
        algebraic_residual: sv[smallest],
    })
}

fn conic_row(h: &Matrix3<f64>, i: usize, j: usize) -> [f64; 6] {
    let hi = h.column(i);
    let hj = h.column(j);
    [
        hi[0] * hj[0],
        hi[0] * hj[1] + hi[1] * hj[0],
        hi[1] * hj[1],
        hi[2] * hj[0] + hi[0] * hj[2],
        hi[2] * hj[1] + hi[1] * hj[2],
        hi[2] * hj[2],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedForm {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Ratio of the largest to the second-smallest singular value of the
    /// conic constraint matrix.
    pub condition: f64,
}

/// Intrinsics from the homography constraints on the image of the absolute
/// conic, with zero skew imposed.
pub fn closed_form_intrinsics(hs: &[Matrix3<f64>]) -> Result<ClosedForm, CalibrationError> {
    if hs.len() < MIN_VIEWS {
        return Err(CalibrationError::InsufficientViews { found: hs.len() });
    }
    let rows = 2 * hs.len() + 1;
    let mut v = DMatrix::<f64>::zeros(rows, 6);
    for (k, h) in hs.iter().enumerate() {
        // Column scaling keeps the constraint rows comparable.
        let h = h / h.column(0).norm().max(h.column(1).norm());
        let v12 = conic_row(&h, 0, 1);
        let v11 = conic_row(&h, 0, 0);
        let v22 = conic_row(&h, 1, 1);
        for j in 0..6 {
            v[(2 * k, j)] = v12[j];
            v[(2 * k + 1, j)] = v11[j] - v22[j];
        }
    }
    v[(rows - 1, 1)] = 1.0;
    let svd = v.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let condition = sv[order[5]] / sv[order[1]].max(f64::MIN_POSITIVE);
    let sign = if vt[(order[0], 0)] < 0.0 { -1.0 } else { 1.0 };
    let b: Vec<f64> = vt.row(order[0]).iter().map(|x| x * sign).collect();
    let (b11, b12, b22, b13, b23, b33) = (b[0], b[1], b[2], b[3], b[4], b[5]);
    let den = b11 * b22 - b12 * b12;
    let cy = (b12 * b13 - b11 * b23) / den;
    let lambda = b33 - (b13 * b13 + cy * (b12 * b13 - b11 * b23)) / b11;
    let fx2 = lambda / b11;
    let fy2 = lambda * b11 / den;
    if !(fx2 > 0.0 && fy2 > 0.0) || !den.is_finite() || den <= 0.0 {
        return Err(CalibrationError::Degenerate(format!(
            "board orientations do not determine the intrinsics (condition {condition:.3e})"
        )));
    }
    let fx = fx2.sqrt();
    let fy = fy2.sqrt();
    let gamma = -b12 * fx * fx * fy / lambda;
    let cx = gamma * cy / fy - b13 * fx * fx / lambda;
    Ok(ClosedForm { fx, fy, cx, cy, condition })
}

/// Board pose for homography `h` under pinhole `k`.
pub fn pose_from_homography(k: &Matrix3<f64>, h: &Matrix3<f64>) -> Result<Pose, CalibrationError> {
    let ki = k.try_inverse().ok_or_else(|| CalibrationError::Degenerate("singular camera matrix".into()))?;
    let a = ki * h;
    let mut lambda = 1.0 / a.column(0).norm();
    if (a.column(2) * lambda).z < 0.0 {
        lambda = -lambda;
    }
    let r1 = a.column(0) * lambda;
    let r2 = a.column(1) * lambda;
    let r3 = r1.cross(&r2);
    let r = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r3]));
    let t = a.column(2) * lambda;
    let rot = UnitQuaternion::from_matrix(&r);
    Ok(Pose::new(0, rot, t))
}

/// Pixel of board point `b` under intrinsics `p = [fx, fy, cx, cy, k1, k2,
/// p1, p2]` and pose `(rot, t)`, with the Jacobians with respect to the
/// intrinsics and to the pose increment `rot ← exp(δω)·rot, t ← t + δt`.
pub fn project_with_jacobians(
    p: &[f64; N_INTRINSICS],
    rot: &UnitQuaternion<f64>,
    t: &Vector3<f64>,
    b: &Vector2<f64>,
) -> Option<(Vector2<f64>, SMatrix<f64, 2, N_INTRINSICS>, SMatrix<f64, 2, 6>)> {
    let [fx, fy, _cx, _cy, k1, k2, p1, p2] = *p;
    let rb = rot * Vector3::new(b.x, b.y, 0.0);
    let pc = rb + t;
    if pc.z <= 1e-12 {
        return None;
    }
    let (x, y) = (pc.x / pc.z, pc.y / pc.z);
    let r2 = x * x + y * y;
    let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
    let dx = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
    let dy = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
    let uv = Vector2::new(fx * dx + p[2], fy * dy + p[3]);

    let mut ji = SMatrix::<f64, 2, N_INTRINSICS>::zeros();
    ji[(0, 0)] = dx;
    ji[(1, 1)] = dy;
    ji[(0, 2)] = 1.0;
    ji[(1, 3)] = 1.0;
    let ddist = [
        (x * r2, y * r2),
        (x * r2 * r2, y * r2 * r2),
        (2.0 * x * y, r2 + 2.0 * y * y),
        (r2 + 2.0 * x * x, 2.0 * x * y),
    ];
    for (c, (ddx, ddy)) in ddist.iter().enumerate() {
        ji[(0, 4 + c)] = fx * ddx;
        ji[(1, 4 + c)] = fy * ddy;
    }

    let drad = k1 + 2.0 * k2 * r2;
    let dd_dn = Matrix2::new(
        radial + x * drad * 2.0 * x + 2.0 * p1 * y + 6.0 * p2 * x,
        x * drad * 2.0 * y + 2.0 * p1 * x + 2.0 * p2 * y,
        y * drad * 2.0 * x + 2.0 * p1 * x + 2.0 * p2 * y,
        radial + y * drad * 2.0 * y + 6.0 * p1 * y + 2.0 * p2 * x,
    );
    let iz = 1.0 / pc.z;
    let dn_dp = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
    let f = Matrix2::new(fx, 0.0, 0.0, fy);
    let du_dp = f * dd_dn * dn_dp;
    let mut jp = SMatrix::<f64, 2, 6>::zeros();
    jp.fixed_view_mut::<2, 3>(0, 0).copy_from(&(du_dp * -skew(&rb)));
    jp.fixed_view_mut::<2, 3>(0, 3).copy_from(&du_dp);
    Some((uv, ji, jp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub intrinsics: CameraIntrinsics,
    /// Camera-from-board pose per view, in input order.
    pub poses: Vec<Pose>,
    pub rms_px: f64,
    pub iterations: usize,
    /// Closed-form condition estimate; large values flag near-parallel boards.
    pub condition: f64,
    /// Cost after each accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Joint reprojection problem over intrinsics and board poses.
#[derive(Debug, Clone)]
pub struct RefinementProblem<'a> {
    pub views: &'a [CalibrationView],
    pub intrinsics: [f64; N_INTRINSICS],
    pub poses: Vec<(UnitQuaternion<f64>, Vector3<f64>)>,
}

impl RefinementProblem<'_> {
    pub fn n_params(&self) -> usize {
        N_INTRINSICS + 6 * self.poses.len()
    }

    pub fn n_residuals(&self) -> usize {
        2 * self.views.iter().map(|v| v.correspondences.len()).sum::<usize>()
    }

    /// Half the sum of squared reprojection errors; infinite when a board
    /// corner falls behind the camera.
    pub fn cost(&self) -> f64 {
        self.residuals().map(|r| 0.5 * r.norm_squared()).unwrap_or(f64::INFINITY)
    }

    pub fn residuals(&self) -> Option<DVector<f64>> {
        let mut r = DVector::zeros(self.n_residuals());
        let mut row = 0;
        for (v, (rot, t)) in self.views.iter().zip(&self.poses) {
            for c in &v.correspondences {
                let (uv, _, _) = project_with_jacobians(&self.intrinsics, rot, t, &c.board)?;
                let e = uv - c.pixel;
                r[row] = e.x;
                r[row + 1] = e.y;
                row += 2;
            }
        }
        Some(r)
    }

    /// Dense residual Jacobian with respect to `[intrinsics, (δω, δt) per view]`.
    pub fn jacobian(&self) -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(self.n_residuals(), self.n_params());
        let mut row = 0;
        for (vi, (v, (rot, t))) in self.views.iter().zip(&self.poses).enumerate() {
            let col = N_INTRINSICS + 6 * vi;
            for c in &v.correspondences {
                let (_, ji, jp) = project_with_jacobians(&self.intrinsics, rot, t, &c.board)?;
                j.view_mut((row, 0), (2, N_INTRINSICS)).copy_from(&ji);
                j.view_mut((row, col), (2, 6)).copy_from(&jp);
                row += 2;
            }
        }
        Some(j)
    }

    /// Applies an increment in the Jacobian's parameterization.
    pub fn step(&self, delta: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for k in 0..N_INTRINSICS {
            out.intrinsics[k] += delta[k];
        }
        for (vi, (rot, t)) in out.poses.iter_mut().enumerate() {
            let c = N_INTRINSICS + 6 * vi;
            let dw = Vector3::new(delta[c], delta[c + 1], delta[c + 2]);
            let dt = Vector3::new(delta[c + 3], delta[c + 4], delta[c + 5]);
            let dr = UnitQuaternion::from_scaled_axis(dw);
            *rot = UnitQuaternion::new_normalize((dr * *rot).into_inner());
            *t += dt;
        }
        out
    }

    /// Levenberg-Marquardt; returns the cost after each accepted iteration.
    pub fn refine(&mut self, max_iterations: usize) -> Vec<f64> {
        let mut cost = self.cost();
        let mut history = vec![cost];
        let mut lambda = INITIAL_DAMPING;
        for _ in 0..max_iterations {
            let (Some(j), Some(r)) = (self.jacobian(), self.residuals()) else {
                break;
            };
            let h = j.transpose() * &j;
            let g = j.transpose() * r;
            let mut accepted = false;
            while lambda < 1e12 {
                let mut hd = h.clone();
                for k in 0..hd.nrows() {
                    hd[(k, k)] += lambda * h[(k, k)].max(1e-12);
                }
                let Some(chol) = hd.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = chol.solve(&(-&g));
                let cand = self.step(&delta);
                let c = cand.cost();
                if c < cost {
                    let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                    *self = cand;
                    cost = c;
                    history.push(c);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = rel > 1e-15;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        history
    }
}

/// Calibrates a `width`×`height` camera from board views.
pub fn calibrate(views: &[CalibrationView], width: u32, height: u32) -> Result<CalibrationResult, CalibrationError> {
    if views.len() < MIN_VIEWS {
        return Err(CalibrationError::InsufficientViews { found: views.len() });
    }
    let hs = views
        .iter()
        .map(|v| estimate_homography(v).map(|e| e.h))
        .collect::<Result<Vec<_>, _>>()?;
    let cf = closed_form_intrinsics(&hs)?;
    if cf.condition > ILL_CONDITIONED {
        warn!(
            "board orientations are nearly parallel (condition estimate {:.3e})",
            cf.condition
        );
    }
    let k0 = Matrix3::new(cf.fx, 0.0, cf.cx, 0.0, cf.fy, cf.cy, 0.0, 0.0, 1.0);
    let poses = hs
        .iter()
        .map(|h| pose_from_homography(&k0, h).map(|p| (p.rotation, p.translation)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut problem = RefinementProblem {
        views,
        intrinsics: [cf.fx, cf.fy, cf.cx, cf.cy, 0.0, 0.0, 0.0, 0.0],
        poses,
    };
    let cost_history = problem.refine(MAX_ITERATIONS);
    let cost = *cost_history.last().expect("initial cost");
    if !cost.is_finite() {
        return Err(CalibrationError::Degenerate("board falls behind the camera at the initial estimate".into()));
    }
    let [fx, fy, cx, cy, k1, k2, p1, p2] = problem.intrinsics;
    let intrinsics = CameraIntrinsics {
        fx,
        fy,
        cx,
        cy,
        k1,
        k2,
        p1,
        p2,
        width,
        height,
    };
    intrinsics.validate()?;
    let rms_px = (2.0 * cost / (problem.n_residuals() / 2) as f64).sqrt();
    Ok(CalibrationResult {
        intrinsics,
        poses: problem.poses.iter().map(|(r, t)| Pose::new(0, *r, *t)).collect(),
        rms_px,
        iterations: cost_history.len() - 1,
        condition: cf.condition,
        cost_history,
    })
}

pub fn correspondences_to_csv(views: &[CalibrationView]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for v in views {
        for c in &v.correspondences {
            let _ = writeln!(s, "{},{},{},{},{}", v.view_id, c.board.x, c.board.y, c.pixel.x, c.pixel.y);
        }
    }
    s
}

/// Parses correspondence CSV, grouping rows by view id in order of first
/// appearance.
pub fn parse_correspondences(text: &str, path: &str) -> Result<Vec<CalibrationView>, CalibrationError> {
    let err = |line: usize, message: String| CalibrationError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut views: Vec<CalibrationView> = Vec::new();
    let mut index: HashMap<u32, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with("view_id") {
            if line != CSV_HEADER {
                return Err(err(i + 1, format!("expected header `{CSV_HEADER}`")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(i + 1, format!("expected 5 fields, found {}", fields.len())));
        }
        let id: u32 = fields[0].parse().map_err(|e| err(i + 1, format!("view_id: {e}")))?;
        let mut vals = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            vals[k] = f.parse().map_err(|e| err(i + 1, format!("field {}: {e}", k + 2)))?;
            if !vals[k].is_finite() {
                return Err(err(i + 1, format!("field {} is not finite", k + 2)));
            }
        }
        let slot = *index.entry(id).or_insert_with(|| {
            views.push(CalibrationView {
                view_id: id,
                correspondences: Vec::new(),
            });
            views.len() - 1
        });
        views[slot].correspondences.push(Correspondence {
            board: Vector2::new(vals[0], vals[1]),
            pixel: Vector2::new(vals[2], vals[3]),
        });
    }
    Ok(views)
}

pub fn load_correspondences(path: &Path) -> Result<Vec<CalibrationView>, CalibrationError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io { path: p.clone(), source })?;
    parse_correspondences(&text, &p)
}

pub fn save_correspondences(path: &Path, views: &[CalibrationView]) -> Result<(), CalibrationError> {
    std::fs::write(path, correspondences_to_csv(views)).map_err(|source| CalibrationError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics, CalibrationError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io { path: p.clone(), source })?;
    let k: CameraIntrinsics =
        serde_json::from_str(&text).map_err(|source| CalibrationError::Json { path: p, source })?;
    k.validate()?;
    Ok(k)
}

pub fn save_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<(), CalibrationError> {
    let text = serde_json::to_string_pretty(k).expect("intrinsics serialize");
    std::fs::write(path, text + "\n").map_err(|source| CalibrationError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn board() -> CheckerboardSpec {
        CheckerboardSpec {
            inner_cols: 9,
            inner_rows: 6,
            square_size: 0.1,
        }
    }

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::from_fov(1280, 960, 84.872).unwrap()
    }

    #[test]
    fn frontal_board_spacing() {
        let mut k = camera();
        k.fx = 700.0;
        k.fy = 700.0;
        let pose = Pose::new(0, UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 1.0));
        let v = synthesize_views(&k, &board(), &[pose], 0.0, 1).unwrap();
        let d = (v[0].correspondences[1].pixel - v[0].correspondences[0].pixel).norm();
        assert!((d - 70.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn synthesis_is_exact_and_seeded() {
        let k = camera();
        let poses = orbit_poses(&board(), 4, 1.5, 30.0);
        let v = synthesize_views(&k, &board(), &poses, 0.0, 1).unwrap();
        for (view, pose) in v.iter().zip(&poses) {
            for c in &view.correspondences {
                let p = k.project(&pose.transform_point(&Vector3::new(c.board.x, c.board.y, 0.0))).unwrap();
                assert_eq!(p, c.pixel);
            }
        }
        let a = synthesize_views(&k, &board(), &poses, 0.5, 9).unwrap();
        let b = synthesize_views(&k, &board(), &poses, 0.5, 9).unwrap();
        assert_eq!(a, b);
        let behind = Pose::new(0, UnitQuaternion::identity(), Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(
            synthesize_views(&k, &board(), &[behind], 0.0, 1),
            Err(CalibrationError::InvalidPose { index: 0 })
        ));
    }

    #[test]
    fn identity_homography() {
        let pts: Vec<Correspondence> = board()
            .corners()
            .into_iter()
            .map(|b| Correspondence { board: b, pixel: b })
            .collect();
        let e = estimate_homography(&CalibrationView {
            view_id: 0,
            correspondences: pts,
        })
        .unwrap();
        assert!((e.h - Matrix3::identity()).norm() < 1e-12);
        assert!(e.algebraic_residual < 1e-12);
    }

    #[test]
    fn known_homography_recovered() {
        let h = Matrix3::new(300.0, 12.0, 400.0, -8.0, 290.0, 300.0, 0.05, -0.02, 1.0);
        let pts: Vec<Correspondence> = board()
            .corners()
            .into_iter()
            .map(|b| Correspondence {
                board: b,
                pixel: apply_h(&h, &b),
            })
            .collect();
        let e = estimate_homography(&CalibrationView {
            view_id: 0,
            correspondences: pts,
        })
        .unwrap();
        assert!((e.h - h).norm() / h.norm() < 1e-9);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<Correspondence> = (0..4)
            .map(|i| {
                let b = Vector2::new(i as f64, 2.0 * i as f64);
                Correspondence { board: b, pixel: b * 3.0 }
            })
            .collect();
        assert!(matches!(
            estimate_homography(&CalibrationView {
                view_id: 0,
                correspondences: pts
            }),
            Err(CalibrationError::Degenerate(_))
        ));
    }

    #[test]
    fn noiseless_calibration() {
        let mut k = camera();
        k.k1 = -0.05;
        k.p2 = 1e-4;
        let poses = orbit_poses(&board(), 10, 1.2, 30.0);
        let views = synthesize_views(&k, &board(), &poses, 0.0, 3).unwrap();
        let res = calibrate(&views, 1280, 960).unwrap();
        let e = res.intrinsics;
        for (a, b) in [(e.fx, k.fx), (e.fy, k.fy), (e.cx, k.cx), (e.cy, k.cy)] {
            assert!(((a - b) / b).abs() < 1e-3, "{a} vs {b}");
        }
        assert!((e.k1 - k.k1).abs() < 1e-6);
        assert!(res.rms_px < 1e-6);
        assert!(res.cost_history.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn noisy_calibration() {
        let k = camera();
        let poses = orbit_poses(&board(), 10, 1.2, 30.0);
        let views = synthesize_views(&k, &board(), &poses, 0.2, 11).unwrap();
        let res = calibrate(&views, 1280, 960).unwrap();
        assert!(((res.intrinsics.fx - k.fx) / k.fx).abs() < 0.01);
        assert!(res.rms_px > 0.1 && res.rms_px < 0.3, "{}", res.rms_px);
    }

    #[test]
    fn two_views_rejected() {
        let poses = orbit_poses(&board(), 2, 1.2, 30.0);
        let views = synthesize_views(&camera(), &board(), &poses, 0.0, 3).unwrap();
        assert!(matches!(
            calibrate(&views, 1280, 960),
            Err(CalibrationError::InsufficientViews { found: 2 })
        ));
    }

    #[test]
    fn parallel_boards_flagged() {
        let t = Vector3::new(-0.4, -0.25, 1.2);
        let poses: Vec<Pose> = (0..4)
            .map(|i| Pose::new(0, UnitQuaternion::identity(), t + Vector3::new(0.02 * i as f64, 0.0, 0.0)))
            .collect();
        let views = synthesize_views(&camera(), &board(), &poses, 0.0, 3).unwrap();
        match calibrate(&views, 1280, 960) {
            Err(CalibrationError::Degenerate(_)) => {}
            Ok(r) => assert!(r.condition > ILL_CONDITIONED),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut k = camera();
        k.k1 = -0.1;
        k.k2 = 0.02;
        k.p1 = 1e-3;
        k.p2 = -2e-3;
        let poses = orbit_poses(&board(), 3, 1.2, 30.0);
        let views = synthesize_views(&k, &board(), &poses, 0.3, 5).unwrap();
        let problem = RefinementProblem {
            views: &views,
            intrinsics: [k.fx, k.fy, k.cx, k.cy, k.k1, k.k2, k.p1, k.p2],
            poses: poses.iter().map(|p| (p.rotation, p.translation)).collect(),
        };
        let j = problem.jacobian().unwrap();
        for c in 0..problem.n_params() {
            let h = if c < 4 { 1e-3 } else { 1e-6 };
            let mut d = DVector::zeros(problem.n_params());
            d[c] = h;
            let rp = problem.step(&d).residuals().unwrap();
            d[c] = -h;
            let rm = problem.step(&d).residuals().unwrap();
            let fd = (rp - rm) / (2.0 * h);
            let an = j.column(c);
            let rel = (&fd - an).norm() / an.norm().max(1e-12);
            assert!(rel < 1e-5, "column {c}: {rel}");
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let poses = orbit_poses(&board(), 3, 1.2, 20.0);
        let views = synthesize_views(&camera(), &board(), &poses, 0.2, 5).unwrap();
        let text = correspondences_to_csv(&views);
        assert_eq!(parse_correspondences(&text, "mem").unwrap(), views);
        let bad = format!("{CSV_HEADER}\n0,1,2,3\n");
        assert!(matches!(
            parse_correspondences(&bad, "f.csv"),
            Err(CalibrationError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn intrinsics_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.json");
        let mut k = camera();
        k.k1 = 0.01;
        save_intrinsics(&p, &k).unwrap();
        assert_eq!(load_intrinsics(&p).unwrap(), k);
    }
}
