//! Homography-based two-view initialization for near-planar scenes.

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::solver::{triangulate_gated, Pinhole};
use crate::geometry::{nearest_rotation, Pose};

pub const MIN_INIT_MATCHES: usize = 30;
pub const MIN_INIT_FLOW_PX: f64 = 2.0;
pub const RANSAC_THRESHOLD_PX: f64 = 1.5;
pub const RANSAC_ITERATIONS: usize = 500;
/// Median ray angle the reconstructed points must reach.
pub const MIN_INIT_PARALLAX_DEG: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitError {
    #[error("cannot initialize: {found} matches, need {needed}")]
    InsufficientMatches { found: usize, needed: usize },
    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewResult {
    /// Maps camera-0 coordinates into camera 1: `x1 = R·x0 + t`.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Plane normal in camera 0 pointing away from the camera, with the
    /// plane at `n·x = plane_distance`.
    pub normal: Vector3<f64>,
    pub plane_distance: f64,
    /// Camera-0 coordinates of each accepted match, scaled so the mean depth
    /// is 1.
    pub points: Vec<Option<Vector3<f64>>>,
    pub homography: Matrix3<f64>,
}

impl TwoViewResult {
    /// World-from-camera pose of camera 1 in the camera-0 frame.
    pub fn camera1_pose(&self) -> Pose {
        let r = nalgebra::Rotation3::from_matrix_unchecked(self.rotation.transpose());
        let q = UnitQuaternion::from_rotation_matrix(&r);
        Pose::new(0, q, -(self.rotation.transpose() * self.translation))
    }
}

fn normalize_points(pts: &[Vector2<f64>]) -> (Vec<Vector2<f64>>, Matrix3<f64>) {
    let n = pts.len() as f64;
    let mean = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 1e-12 {
        std::f64::consts::SQRT_2 / spread
    } else {
        1.0
    };
    let t = Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0);
    (pts.iter().map(|p| (p - mean) * s).collect(), t)
}

/// Normalized DLT homography mapping `a` onto `b` (at least four pairs).
pub fn homography_dlt(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    if a.len() < 4 || a.len() != b.len() {
        return None;
    }
    let (na, ta) = normalize_points(a);
    let (nb, tb) = normalize_points(b);
    let rows = 2 * a.len().max(5);
    let mut m = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in na.iter().zip(&nb).enumerate() {
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r = 2 * i;
        m.row_mut(r).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        m.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    // Null vector of M from the eigenvectors of MᵀM (rows padded with zeros
    // keep the decomposition square for the minimal case).
    let mtm = m.transpose() * &m;
    let eig = mtm.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = eig.eigenvectors.column(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let tb_inv = tb.try_inverse()?;
    let hm = tb_inv * hn * ta;
    let scale = hm[(2, 2)];
    if !scale.is_finite() || hm.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(if scale.abs() > 1e-12 { hm / scale } else { hm / hm.norm() })
}

#[inline]
fn transfer(h: &Matrix3<f64>, p: &Vector2<f64>) -> Option<Vector2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    (q.z.abs() > 1e-12).then(|| Vector2::new(q.x / q.z, q.y / q.z))
}

/// Seeded RANSAC over minimal four-point samples; the consensus set is refit
/// by DLT. Inputs and threshold are in ideal pixels.
pub fn ransac_homography(
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
    threshold: f64,
    iterations: usize,
    seed: u64,
) -> Option<(Matrix3<f64>, Vec<bool>)> {
    let n = a.len();
    if n < 4 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inliers_of = |h: &Matrix3<f64>| -> Vec<bool> {
        a.iter()
            .zip(b)
            .map(|(p, q)| transfer(h, p).is_some_and(|t| (t - q).norm() <= threshold))
            .collect()
    };
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    for _ in 0..iterations {
        let idx = sample(&mut rng, n, 4);
        let sa: Vec<_> = idx.iter().map(|i| a[i]).collect();
        let sb: Vec<_> = idx.iter().map(|i| b[i]).collect();
        let Some(h) = homography_dlt(&sa, &sb) else { continue };
        let count = inliers_of(&h).iter().filter(|&&x| x).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
        }
    }
    let (_, h) = best?;
    let mut mask = inliers_of(&h);
    // Two refits on the growing consensus set.
    let mut h = h;
    for _ in 0..2 {
        let (ia, ib): (Vec<_>, Vec<_>) = a
            .iter()
            .zip(b)
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((p, q), _)| (*p, *q))
            .unzip();
        if let Some(refit) = homography_dlt(&ia, &ib) {
            let refit_mask = inliers_of(&refit);
            if refit_mask.iter().filter(|&&x| x).count() >= mask.iter().filter(|&&x| x).count() {
                h = refit;
                mask = refit_mask;
            }
        }
    }
    Some((h, mask))
}

/// Motion hypothesis from a homography decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub rotation: Matrix3<f64>,
    /// Unit direction of `t`.
    pub translation: Vector3<f64>,
    pub normal: Vector3<f64>,
}

/// SVD-based decomposition of a calibrated homography `x1 ~ H·x0` into up
/// to eight `{R, t, n}` solutions. Returns `None` when two singular values
/// coincide (pure rotation or no motion).
pub fn decompose_homography(h: &Matrix3<f64>) -> Option<Vec<Decomposition>> {
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    // Sort singular values descending.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let u = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let vt = Matrix3::from_rows(&[vt.row(order[0]), vt.row(order[1]), vt.row(order[2])]);
    let (d1, d2, d3) = (
        svd.singular_values[order[0]],
        svd.singular_values[order[1]],
        svd.singular_values[order[2]],
    );
    if d3 <= 0.0 || d1 / d2 < 1.00001 || d2 / d3 < 1.00001 {
        return None;
    }
    let v = vt.transpose();
    let s = u.determinant() * vt.determinant();
    let aux1 = ((d1 * d1 - d2 * d2) / (d1 * d1 - d3 * d3)).sqrt();
    let aux3 = ((d2 * d2 - d3 * d3) / (d1 * d1 - d3 * d3)).sqrt();
    let x1 = [aux1, aux1, -aux1, -aux1];
    let x3 = [aux3, -aux3, aux3, -aux3];
    let mut out = Vec::with_capacity(8);

    let aux_st = ((d1 * d1 - d2 * d2) * (d2 * d2 - d3 * d3)).sqrt() / ((d1 + d3) * d2);
    let ct = (d2 * d2 + d1 * d3) / ((d1 + d3) * d2);
    let st = [aux_st, -aux_st, -aux_st, aux_st];
    for i in 0..4 {
        let rp = Matrix3::new(ct, 0.0, -st[i], 0.0, 1.0, 0.0, st[i], 0.0, ct);
        let r = nearest_rotation(&(u * rp * vt * s));
        let tp = Vector3::new(x1[i], 0.0, -x3[i]) * (d1 - d3);
        let t = (u * tp).normalize();
        let mut n = v * Vector3::new(x1[i], 0.0, x3[i]);
        if n.z < 0.0 {
            n = -n;
        }
        out.push(Decomposition {
            rotation: r,
            translation: t,
            normal: n.normalize(),
        });
    }
    let aux_sp = ((d1 * d1 - d2 * d2) * (d2 * d2 - d3 * d3)).sqrt() / ((d1 - d3) * d2);
    let cp = (d1 * d3 - d2 * d2) / ((d1 - d3) * d2);
    let sp = [aux_sp, -aux_sp, -aux_sp, aux_sp];
    for i in 0..4 {
        let rp = Matrix3::new(cp, 0.0, sp[i], 0.0, -1.0, 0.0, sp[i], 0.0, -cp);
        let r = nearest_rotation(&(u * rp * vt * s));
        let tp = Vector3::new(x1[i], 0.0, x3[i]) * (d1 + d3);
        let t = (u * tp).normalize();
        let mut n = v * Vector3::new(x1[i], 0.0, x3[i]);
        if n.z < 0.0 {
            n = -n;
        }
        out.push(Decomposition {
            rotation: r,
            translation: t,
            normal: n.normalize(),
        });
    }
    Some(out)
}

struct Scored {
    dec: Decomposition,
    good: usize,
    points: Vec<Option<Vector3<f64>>>,
    parallax: Vec<f64>,
}

fn score(dec: &Decomposition, cam: &Pinhole, a: &[Vector2<f64>], b: &[Vector2<f64>], mask: &[bool]) -> Scored {
    let pose0 = Pose::identity(0);
    let rt = dec.rotation.transpose();
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rt));
    let pose1 = Pose::new(0, q, -(rt * dec.translation));
    let mut good = 0;
    let mut points = vec![None; a.len()];
    let mut parallax = Vec::new();
    let max_err = 2.0 * RANSAC_THRESHOLD_PX;
    for i in 0..a.len() {
        if !mask[i] {
            continue;
        }
        let Ok((x, par)) = triangulate_gated(&pose0, &pose1, &cam.ray(&a[i]), &cam.ray(&b[i]), 0.0) else {
            continue;
        };
        let x1 = dec.rotation * x + dec.translation;
        if x.z <= 0.0 || x1.z <= 0.0 {
            continue;
        }
        let e0 = (cam.project(&x) - a[i]).norm();
        let e1 = (cam.project(&x1) - b[i]).norm();
        if e0 > max_err || e1 > max_err {
            continue;
        }
        good += 1;
        points[i] = Some(x);
        parallax.push(par);
    }
    Scored {
        dec: *dec,
        good,
        points,
        parallax,
    }
}

/// Two-view initialization from matched ideal pixels `a` (frame 0) and `b`
/// (frame 1). Among the decompositions that reconstruct nearly as many
/// points in front of both cameras as the best one, the most fronto-parallel
/// plane normal wins (the camera looks down at the ground).
pub fn initialize_two_view(
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
    cam: &Pinhole,
    seed: u64,
) -> Result<TwoViewResult, InitError> {
    assert_eq!(a.len(), b.len());
    if a.len() < MIN_INIT_MATCHES {
        return Err(InitError::InsufficientMatches {
            found: a.len(),
            needed: MIN_INIT_MATCHES,
        });
    }
    let mut flows: Vec<f64> = a.iter().zip(b).map(|(p, q)| (q - p).norm()).collect();
    flows.sort_by(f64::total_cmp);
    let median_flow = flows[flows.len() / 2];
    if median_flow < MIN_INIT_FLOW_PX {
        return Err(InitError::DegenerateMotion(format!(
            "median flow {median_flow:.2} px below {MIN_INIT_FLOW_PX} px"
        )));
    }
    let (h_pix, mask) = ransac_homography(a, b, RANSAC_THRESHOLD_PX, RANSAC_ITERATIONS, seed)
        .ok_or_else(|| InitError::DegenerateMotion("no homography hypothesis".into()))?;
    let inliers = mask.iter().filter(|&&m| m).count();
    if inliers < MIN_INIT_MATCHES {
        return Err(InitError::InsufficientMatches {
            found: inliers,
            needed: MIN_INIT_MATCHES,
        });
    }
    let k = Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
    let k_inv = k.try_inverse().expect("valid intrinsics");
    let h_cal = k_inv * h_pix * k;
    let decs = decompose_homography(&h_cal)
        .ok_or_else(|| InitError::DegenerateMotion("homography has no translational component".into()))?;
    let scored: Vec<Scored> = decs.iter().map(|d| score(d, cam, a, b, &mask)).collect();
    let max_good = scored.iter().map(|s| s.good).max().unwrap_or(0);
    if max_good < MIN_INIT_MATCHES {
        return Err(InitError::DegenerateMotion(format!(
            "best decomposition reconstructs only {max_good} points"
        )));
    }
    let chosen = scored
        .into_iter()
        .filter(|s| s.good as f64 >= 0.9 * max_good as f64)
        .max_by(|x, y| x.dec.normal.z.total_cmp(&y.dec.normal.z))
        .expect("at least one candidate");
    let mut par = chosen.parallax.clone();
    par.sort_by(f64::total_cmp);
    let median_par = par[par.len() / 2];
    if median_par < MIN_INIT_PARALLAX_DEG {
        return Err(InitError::DegenerateMotion(format!(
            "median parallax {median_par:.3} deg below {MIN_INIT_PARALLAX_DEG} deg"
        )));
    }
    let depths: Vec<f64> = chosen.points.iter().flatten().map(|p| p.z).collect();
    let mean_depth = depths.iter().sum::<f64>() / depths.len() as f64;
    let s = 1.0 / mean_depth;
    let points: Vec<Option<Vector3<f64>>> = chosen.points.iter().map(|p| p.map(|x| x * s)).collect();
    let n = chosen.dec.normal;
    let dists: Vec<f64> = points.iter().flatten().map(|p| n.dot(p)).collect();
    let plane_distance = dists.iter().sum::<f64>() / dists.len() as f64;
    Ok(TwoViewResult {
        rotation: chosen.dec.rotation,
        translation: chosen.dec.translation * s,
        normal: n,
        plane_distance,
        points,
        homography: h_pix,
    })
}
