//! Reprojection models and the Gauss-Newton solvers: pose-only tracking,
//! two-ray triangulation and sliding-window refinement.
//!
//! Camera poses here are world-to-camera isometries `T_cw`. Measurements are
//! ideal (undistorted) pixel coordinates `f·x/z + c`.

use nalgebra::{
    DMatrix, DVector, Isometry3, Matrix2x3, Matrix3, Matrix6, SMatrix, Translation3, UnitQuaternion, Vector2,
    Vector3, Vector6,
};
use thiserror::Error;

use crate::geometry::{skew, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("parallax {parallax_deg:.3} deg below the {gate_deg} deg gate")]
    LowParallax { parallax_deg: f64, gate_deg: f64 },
    #[error("triangulated point lies behind a camera")]
    BehindCamera,
    #[error("window refinement needs at least two keyframes, got {0}")]
    WindowTooSmall(usize),
    #[error("normal equations are singular")]
    Singular,
}

/// Focal lengths and principal point of the ideal pinhole.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pinhole {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Pinhole {
    #[inline]
    pub fn project(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// Unnormalized camera ray (z = 1) through an ideal pixel.
    #[inline]
    pub fn ray(&self, u: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((u.x - self.cx) / self.fx, (u.y - self.cy) / self.fy, 1.0)
    }

    /// ∂π/∂p_c.
    #[inline]
    pub fn jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz2,
        )
    }
}

/// Left update `exp(ξ)·T` with `ξ = (v, ω)`, using the SO(3)×R³ split.
pub fn apply_update(t: &Isometry3<f64>, xi: &Vector6<f64>) -> Isometry3<f64> {
    let v = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    let dr = UnitQuaternion::from_scaled_axis(w);
    Isometry3::from_parts(
        Translation3::from(dr * t.translation.vector + v),
        UnitQuaternion::new_normalize((dr * t.rotation).into_inner()),
    )
}

/// ∂(T·X)/∂ξ for the left update: `[I, −[p_c]×]`.
#[inline]
pub fn point_jacobian_pose(pc: &Vector3<f64>) -> SMatrix<f64, 3, 6> {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(pc)));
    j
}

/// Reprojection residual `π(T·X) − u` with its Jacobians with respect to the
/// pose update and the world point.
pub fn residual_and_jacobians(
    cam: &Pinhole,
    t_cw: &Isometry3<f64>,
    x: &Vector3<f64>,
    u: &Vector2<f64>,
) -> Option<(Vector2<f64>, SMatrix<f64, 2, 6>, Matrix2x3<f64>)> {
    let pc = t_cw * nalgebra::Point3::from(*x);
    let pc = pc.coords;
    if pc.z <= 1e-9 {
        return None;
    }
    let jp = cam.jacobian(&pc);
    let r = cam.project(&pc) - u;
    let jpose = jp * point_jacobian_pose(&pc);
    let jx = jp * t_cw.rotation.to_rotation_matrix().matrix();
    Some((r, jpose, jx))
}

#[inline]
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

#[inline]
pub fn huber_cost(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

#[derive(Debug, Clone)]
pub struct PoseFit {
    pub t_cw: Isometry3<f64>,
    /// Per-observation reprojection error in pixels at the solution.
    pub errors: Vec<f64>,
    pub iterations: usize,
}

/// Pose-only damped Gauss-Newton on Huber-weighted reprojection error.
pub fn optimize_pose(
    cam: &Pinhole,
    init: &Isometry3<f64>,
    points: &[Vector3<f64>],
    obs: &[Vector2<f64>],
    huber_delta: f64,
    max_iterations: usize,
) -> PoseFit {
    assert_eq!(points.len(), obs.len());
    let cost_of = |t: &Isometry3<f64>| -> f64 {
        points
            .iter()
            .zip(obs)
            .map(|(x, u)| {
                let pc = (t * nalgebra::Point3::from(*x)).coords;
                if pc.z <= 1e-9 {
                    huber_cost(1e3, huber_delta)
                } else {
                    huber_cost((cam.project(&pc) - u).norm(), huber_delta)
                }
            })
            .sum()
    };
    let mut t = *init;
    let mut cost = cost_of(&t);
    let mut lambda = 1e-4;
    let mut iterations = 0;
    for _ in 0..max_iterations {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (x, u) in points.iter().zip(obs) {
            let Some((r, j, _)) = residual_and_jacobians(cam, &t, x, u) else {
                continue;
            };
            let w = huber_weight(r.norm(), huber_delta);
            h += j.transpose() * j * w;
            g += j.transpose() * r * w;
        }
        let mut improved = false;
        for _ in 0..6 {
            let mut hd = h;
            for k in 0..6 {
                hd[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let Some(step) = hd.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = apply_update(&t, &step);
            let c = cost_of(&cand);
            if c < cost {
                t = cand;
                let small = step.norm() < 1e-10;
                cost = c;
                lambda = (lambda * 0.3).max(1e-7);
                improved = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let errors = points
        .iter()
        .zip(obs)
        .map(|(x, u)| {
            let pc = (t * nalgebra::Point3::from(*x)).coords;
            if pc.z <= 1e-9 {
                f64::INFINITY
            } else {
                (cam.project(&pc) - u).norm()
            }
        })
        .collect();
    PoseFit {
        t_cw: t,
        errors,
        iterations,
    }
}

pub const PARALLAX_GATE_DEG: f64 = 1.0;

/// Midpoint of the common perpendicular between two viewing rays, given
/// world-from-camera poses and camera-frame ray directions. Returns the
/// point and the angle between the rays in degrees.
pub fn triangulate(
    pose_a: &Pose,
    pose_b: &Pose,
    ray_a: &Vector3<f64>,
    ray_b: &Vector3<f64>,
) -> Result<(Vector3<f64>, f64), SolverError> {
    triangulate_gated(pose_a, pose_b, ray_a, ray_b, PARALLAX_GATE_DEG)
}

pub fn triangulate_gated(
    pose_a: &Pose,
    pose_b: &Pose,
    ray_a: &Vector3<f64>,
    ray_b: &Vector3<f64>,
    gate_deg: f64,
) -> Result<(Vector3<f64>, f64), SolverError> {
    let da = (pose_a.rotation * ray_a).normalize();
    let db = (pose_b.rotation * ray_b).normalize();
    let parallax_deg = da.dot(&db).clamp(-1.0, 1.0).acos().to_degrees();
    if !(parallax_deg >= gate_deg) {
        return Err(SolverError::LowParallax {
            parallax_deg,
            gate_deg,
        });
    }
    let (ca, cb) = (pose_a.translation, pose_b.translation);
    // Minimize |ca + s·da − cb − t·db|.
    let w0 = ca - cb;
    let b = da.dot(&db);
    let d = da.dot(&w0);
    let e = db.dot(&w0);
    let denom = 1.0 - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    if s <= 0.0 || t <= 0.0 {
        return Err(SolverError::BehindCamera);
    }
    let p = 0.5 * ((ca + da * s) + (cb + db * t));
    Ok((p, parallax_deg))
}

/// One reprojection measurement inside a refinement window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowObservation {
    pub pose: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowProblem {
    pub cam: Pinhole,
    /// `poses[0]` is held fixed as the gauge.
    pub poses: Vec<Isometry3<f64>>,
    pub points: Vec<Vector3<f64>>,
    pub observations: Vec<WindowObservation>,
    pub huber_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Robust cost after each accepted iteration, starting with the initial.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

impl WindowProblem {
    pub fn cost(&self) -> f64 {
        self.cost_with(&self.poses, &self.points)
    }

    fn cost_with(&self, poses: &[Isometry3<f64>], points: &[Vector3<f64>]) -> f64 {
        self.observations
            .iter()
            .map(|o| {
                let pc = (poses[o.pose] * nalgebra::Point3::from(points[o.point])).coords;
                if pc.z <= 1e-9 {
                    huber_cost(1e3, self.huber_delta)
                } else {
                    huber_cost((self.cam.project(&pc) - o.pixel).norm(), self.huber_delta)
                }
            })
            .sum()
    }

    /// Levenberg-Marquardt with a Schur complement on the point blocks.
    /// Points seen from fewer than two window poses stay fixed. Only steps
    /// that strictly decrease the robust cost are accepted.
    pub fn refine(&mut self, max_iterations: usize) -> Result<WindowReport, SolverError> {
        let np = self.poses.len();
        if np < 2 {
            return Err(SolverError::WindowTooSmall(np));
        }
        let nl = self.points.len();
        let free_poses = np - 1;
        let dim = 6 * free_poses;
        let mut obs_count = vec![0usize; nl];
        let mut seen = vec![Vec::<usize>::new(); nl];
        for o in &self.observations {
            if !seen[o.point].contains(&o.pose) {
                seen[o.point].push(o.pose);
            }
        }
        for (j, s) in seen.iter().enumerate() {
            obs_count[j] = s.len();
        }
        let free_point: Vec<bool> = obs_count.iter().map(|&c| c >= 2).collect();

        let mut cost = self.cost();
        let initial_cost = cost;
        let mut history = vec![cost];
        let mut lambda = 1e-4;
        let mut iterations = 0;
        for _ in 0..max_iterations {
            iterations += 1;
            // Assemble blocks.
            let mut hpp = DMatrix::<f64>::zeros(dim, dim);
            let mut bp = DVector::<f64>::zeros(dim);
            let mut hll = vec![Matrix3::<f64>::zeros(); nl];
            let mut bl = vec![Vector3::<f64>::zeros(); nl];
            // Pose-point coupling per observation.
            let mut hpl: Vec<(usize, usize, SMatrix<f64, 6, 3>)> = Vec::new();
            for o in &self.observations {
                let Some((r, jp, jx)) =
                    residual_and_jacobians(&self.cam, &self.poses[o.pose], &self.points[o.point], &o.pixel)
                else {
                    continue;
                };
                let w = huber_weight(r.norm(), self.huber_delta);
                let fp = o.pose > 0;
                let fl = free_point[o.point];
                if fp {
                    let k = 6 * (o.pose - 1);
                    let block = jp.transpose() * jp * w;
                    let mut view = hpp.view_mut((k, k), (6, 6));
                    view += block;
                    let g = jp.transpose() * r * w;
                    let mut bv = bp.rows_mut(k, 6);
                    bv -= g;
                }
                if fl {
                    hll[o.point] += jx.transpose() * jx * w;
                    bl[o.point] -= jx.transpose() * r * w;
                }
                if fp && fl {
                    hpl.push((o.pose - 1, o.point, jp.transpose() * jx * w));
                }
            }

            let mut accepted = false;
            let mut factorized = false;
            for _ in 0..8 {
                // Damped copies.
                let mut a = hpp.clone();
                for k in 0..dim {
                    a[(k, k)] += lambda * hpp[(k, k)].max(1e-9);
                }
                let mut inv_ll = vec![Matrix3::<f64>::zeros(); nl];
                let mut ok = true;
                for j in 0..nl {
                    if !free_point[j] {
                        continue;
                    }
                    let mut d = hll[j];
                    for k in 0..3 {
                        d[(k, k)] += lambda * hll[j][(k, k)].max(1e-9);
                    }
                    match d.try_inverse() {
                        Some(inv) => inv_ll[j] = inv,
                        None => {
                            ok = false;
                            break;
                        }
                    }
                }
                if !ok {
                    lambda *= 10.0;
                    continue;
                }
                // Schur complement S = A − Σ W V⁻¹ Wᵀ, rhs = bp − Σ W V⁻¹ bl.
                let mut s = a;
                let mut rhs = bp.clone();
                // Group coupling blocks by point.
                let mut by_point: Vec<Vec<(usize, SMatrix<f64, 6, 3>)>> = vec![Vec::new(); nl];
                for (p, l, w) in &hpl {
                    if let Some(entry) = by_point[*l].iter_mut().find(|(pp, _)| pp == p) {
                        entry.1 += w;
                    } else {
                        by_point[*l].push((*p, *w));
                    }
                }
                for j in 0..nl {
                    if !free_point[j] {
                        continue;
                    }
                    let vinv = inv_ll[j];
                    for (p1, w1) in &by_point[j] {
                        let wv = w1 * vinv;
                        let mut rv = rhs.rows_mut(6 * p1, 6);
                        rv -= wv * bl[j];
                        for (p2, w2) in &by_point[j] {
                            let block = wv * w2.transpose();
                            let mut view = s.view_mut((6 * p1, 6 * p2), (6, 6));
                            view -= block;
                        }
                    }
                }
                let Some(chol) = s.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                factorized = true;
                let dp = chol.solve(&rhs);
                // Back-substitute points.
                let mut new_points = self.points.clone();
                for j in 0..nl {
                    if !free_point[j] {
                        continue;
                    }
                    let mut r = bl[j];
                    for (p, w) in &by_point[j] {
                        let block = dp.rows(6 * p, 6);
                        r -= w.transpose() * block;
                    }
                    new_points[j] += inv_ll[j] * r;
                }
                let mut new_poses = self.poses.clone();
                for k in 0..free_poses {
                    let xi = Vector6::from_iterator(dp.rows(6 * k, 6).iter().copied());
                    new_poses[k + 1] = apply_update(&self.poses[k + 1], &xi);
                }
                let c = self.cost_with(&new_poses, &new_points);
                if c < cost {
                    let rel = (cost - c) / cost.max(1e-300);
                    self.poses = new_poses;
                    self.points = new_points;
                    cost = c;
                    history.push(c);
                    lambda = (lambda * 0.3).max(1e-9);
                    accepted = rel > 1e-12;
                    break;
                }
                lambda *= 10.0;
            }
            if !factorized && iterations == 1 {
                return Err(SolverError::Singular);
            }
            if !accepted {
                break;
            }
        }
        Ok(WindowReport {
            initial_cost,
            final_cost: cost,
            cost_history: history,
            iterations,
        })
    }
}

/// Converts a world-to-camera isometry to a world-from-camera [`Pose`].
pub fn to_pose(t_us: i64, t_cw: &Isometry3<f64>) -> Pose {
    let inv = t_cw.inverse();
    Pose::new(t_us, inv.rotation, inv.translation.vector)
}

/// Inverse of [`to_pose`].
pub fn from_pose(p: &Pose) -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::from(p.translation), p.rotation).inverse()
}
