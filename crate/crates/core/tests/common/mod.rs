//! Naive reference implementations used to generate fixtures and to
//! cross-check the optimized code. Written for clarity, not speed.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// Row-major 8-bit image.
#[derive(Debug, Clone)]
pub struct Img {
    pub w: usize,
    pub h: usize,
    pub px: Vec<u8>,
}

impl Img {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.px[y * self.w + x] as f64
    }

    pub fn frame(&self) -> skybench::camera::ImageFrame {
        skybench::camera::ImageFrame {
            t_us: 0,
            width: self.w as u32,
            height: self.h as u32,
            pixels: self.px.clone(),
            frame_id: 0,
        }
    }
}

/// Central-difference gradient magnitude; zero on the one-pixel border.
pub fn oracle_gradient(img: &Img, x: usize, y: usize) -> f64 {
    if x == 0 || y == 0 || x + 1 >= img.w || y + 1 >= img.h {
        return 0.0;
    }
    let gx = (img.at(x + 1, y) - img.at(x - 1, y)) / 2.0;
    let gy = (img.at(x, y + 1) - img.at(x, y - 1)) / 2.0;
    (gx * gx + gy * gy).sqrt()
}

/// Pixels within this distance of the border are never candidates.
pub const MARGIN: usize = 4;

fn eligible(img: &Img, x: usize, y: usize) -> bool {
    x >= MARGIN && y >= MARGIN && x + MARGIN < img.w && y + MARGIN < img.h
}

/// Block rule, stated literally: for each `d×d` block in row-major order,
/// take the full sorted list of its gradients, the upper median
/// `sorted[n/2]`, and the eligible pixel with the largest gradient (first in
/// row-major order on ties); keep it if it beats median + add. Blocks of
/// `2d` and then `4d` with none of their `d`-blocks chosen are retried with
/// `floor(add/2)` and `floor(add/4)`.
pub fn oracle_candidate_pixels(img: &Img, d: usize, add: f64) -> BTreeSet<(usize, usize)> {
    let mut chosen = BTreeSet::new();
    let mut chosen_blocks: BTreeSet<(usize, usize)> = BTreeSet::new();
    let fine_cols = img.w.div_ceil(d);
    let fine_rows = img.h.div_ceil(d);
    for (level, a) in [(1usize, add), (2, (add / 2.0).floor()), (4, (add / 4.0).floor())] {
        let size = d * level;
        let mut by = 0;
        while by * size < img.h {
            let mut bx = 0;
            while bx * size < img.w {
                let covered: Vec<(usize, usize)> = (by * level..(by * level + level).min(fine_rows))
                    .flat_map(|fy| (bx * level..(bx * level + level).min(fine_cols)).map(move |fx| (fx, fy)))
                    .collect();
                if covered.iter().any(|c| chosen_blocks.contains(c)) {
                    bx += 1;
                    continue;
                }
                let mut all = Vec::new();
                let mut best: Option<(f64, usize, usize)> = None;
                for y in by * size..((by + 1) * size).min(img.h) {
                    for x in bx * size..((bx + 1) * size).min(img.w) {
                        let g = oracle_gradient(img, x, y);
                        all.push(g);
                        if eligible(img, x, y) {
                            match best {
                                Some((bg, _, _)) if g <= bg => {}
                                _ => best = Some((g, x, y)),
                            }
                        }
                    }
                }
                all.sort_by(|p, q| p.partial_cmp(q).unwrap());
                let median = all[all.len() / 2];
                if let Some((g, x, y)) = best {
                    if g > median + a {
                        chosen.insert((x, y));
                        for c in covered {
                            chosen_blocks.insert(c);
                        }
                    }
                }
                bx += 1;
            }
            by += 1;
        }
    }
    chosen
}

/// Circle offsets of radius 3, clockwise from the top.
pub const CIRCLE: [(i64, i64); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Tries every start position and both polarities for an arc of nine.
pub fn oracle_fast(img: &Img, x: usize, y: usize, t: f64) -> bool {
    let c = img.at(x, y);
    let ring: Vec<f64> = CIRCLE
        .iter()
        .map(|(dx, dy)| img.at((x as i64 + dx) as usize, (y as i64 + dy) as usize))
        .collect();
    for start in 0..16 {
        let arc: Vec<f64> = (0..9).map(|k| ring[(start + k) % 16]).collect();
        if arc.iter().all(|v| *v > c + t) || arc.iter().all(|v| *v < c - t) {
            return true;
        }
    }
    false
}

/// Smaller eigenvalue of the 5×5 structure tensor via the quadratic formula.
pub fn oracle_shi_tomasi(img: &Img, x: usize, y: usize) -> f64 {
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for yy in y - 2..=y + 2 {
        for xx in x - 2..=x + 2 {
            let gx = (img.at(xx + 1, yy) - img.at(xx - 1, yy)) / 2.0;
            let gy = (img.at(xx, yy + 1) - img.at(xx, yy - 1)) / 2.0;
            sxx += gx * gx;
            sxy += gx * gy;
            syy += gy * gy;
        }
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0);
    tr / 2.0 - disc.sqrt()
}

/// Per cell: every eligible pixel, keep FAST corners, pick the best score.
pub fn oracle_corner_winners(img: &Img, cell: usize, t: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for cy in 0..img.h.div_ceil(cell) {
        for cx in 0..img.w.div_ceil(cell) {
            let mut best: Option<(f64, usize, usize)> = None;
            for y in cy * cell..((cy + 1) * cell).min(img.h) {
                for x in cx * cell..((cx + 1) * cell).min(img.w) {
                    if !eligible(img, x, y) || !oracle_fast(img, x, y, t) {
                        continue;
                    }
                    let s = oracle_shi_tomasi(img, x, y);
                    match best {
                        Some((bs, _, _)) if s <= bs => {}
                        _ => best = Some((s, x, y)),
                    }
                }
            }
            if let Some((_, x, y)) = best {
                out.push((x, y));
            }
        }
    }
    out
}

/// 3-vector in plain arrays to stay independent of the library's types.
pub type V3 = [f64; 3];

pub fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

/// Unit quaternion `[w, x, y, z]`.
pub type Q = [f64; 4];

pub fn qmul(a: Q, b: Q) -> Q {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn qconj(a: Q) -> Q {
    [a[0], -a[1], -a[2], -a[3]]
}

/// Geodesic angle via the log map: `2·atan2(|v|, |w|)` of `a⁻¹·b`.
pub fn oracle_rotation_angle_deg(a: Q, b: Q) -> f64 {
    let r = qmul(qconj(a), b);
    let v = (r[1] * r[1] + r[2] * r[2] + r[3] * r[3]).sqrt();
    (2.0 * v.atan2(r[0].abs())).to_degrees()
}

/// Rotates `p` by `q` with `q·p·q*`.
pub fn qrot(q: Q, p: V3) -> V3 {
    let r = qmul(qmul(q, [0.0, p[0], p[1], p[2]]), qconj(q));
    [r[1], r[2], r[3]]
}

/// Two passes: the error list first, then the mean of squares.
pub fn oracle_rmse(truth: &[(V3, Q)], est: &[(V3, Q)]) -> (f64, f64) {
    let n = truth.len();
    let mut pos_err = Vec::with_capacity(n);
    let mut rot_err = Vec::with_capacity(n);
    for i in 0..n {
        pos_err.push(norm(sub(est[i].0, truth[i].0)));
        rot_err.push(oracle_rotation_angle_deg(truth[i].1, est[i].1));
    }
    let mut sp = 0.0;
    let mut sr = 0.0;
    for i in 0..n {
        sp += pos_err[i] * pos_err[i];
        sr += rot_err[i] * rot_err[i];
    }
    ((sp / n as f64).sqrt(), (sr / n as f64).sqrt())
}

/// Midpoint of the common perpendicular of `ca + s·da` and `cb + t·db`,
/// from the 2×2 normal equations solved by Cramer's rule. `None` for
/// parallel rays.
pub fn oracle_triangulate(ca: V3, da: V3, cb: V3, db: V3) -> Option<V3> {
    let w0 = sub(ca, cb);
    let a = dot(da, da);
    let b = dot(da, db);
    let c = dot(db, db);
    let d = dot(da, w0);
    let e = dot(db, w0);
    let den = a * c - b * b;
    if den.abs() < 1e-12 * a * c {
        return None;
    }
    let s = (b * e - c * d) / den;
    let t = (a * e - b * d) / den;
    let pa = add(ca, scale(da, s));
    let pb = add(cb, scale(db, t));
    Some(scale(add(pa, pb), 0.5))
}

/// Radial-tangential model applied term by term.
#[allow(clippy::too_many_arguments)]
pub fn oracle_distort(x: f64, y: f64, k1: f64, k2: f64, p1: f64, p2: f64) -> (f64, f64) {
    let r2 = x * x + y * y;
    let r4 = r2 * r2;
    let radial = 1.0 + k1 * r2 + k2 * r4;
    let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
    let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
    (xd, yd)
}

/// Fixed-point undistortion, run for a fixed large iteration count.
pub fn oracle_undistort(xd: f64, yd: f64, k1: f64, k2: f64, p1: f64, p2: f64) -> (f64, f64) {
    let (mut x, mut y) = (xd, yd);
    for _ in 0..500 {
        let r2 = x * x + y * y;
        let radial = 1.0 + k1 * r2 + k2 * r2 * r2;
        let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        x = (xd - dx) / radial;
        y = (yd - dy) / radial;
    }
    (x, y)
}

pub const WGS84_A: f64 = 6_378_137.0;
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// Meridian arc between two latitudes by composite Simpson integration of
/// the meridional radius of curvature.
pub fn oracle_meridian_arc(lat0_deg: f64, lat1_deg: f64) -> f64 {
    let e2 = WGS84_F * (2.0 - WGS84_F);
    let m = |phi: f64| WGS84_A * (1.0 - e2) / (1.0 - e2 * phi.sin().powi(2)).powf(1.5);
    let (a, b) = (lat0_deg.to_radians(), lat1_deg.to_radians());
    let n = 1000;
    let h = (b - a) / n as f64;
    let mut s = m(a) + m(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * m(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Height on a cell-vertex grid by locating the cell and weighting its four
/// corners with products of distances.
pub fn oracle_bilinear(cols: usize, rows: usize, spacing: f64, z: &[f64], x: f64, y: f64) -> f64 {
    let gx = (x / spacing).clamp(0.0, (cols - 1) as f64);
    let gy = (y / spacing).clamp(0.0, (rows - 1) as f64);
    let mut total = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let wx = (1.0 - (gx - c as f64).abs()).max(0.0);
            let wy = (1.0 - (gy - r as f64).abs()).max(0.0);
            total += wx * wy * z[r * cols + c];
        }
    }
    total
}

/// Round-half-up by explicit comparison of the fractional part.
pub fn oracle_exposure(gain: f64, offset: f64, i: f64) -> u8 {
    let v = gain * i * 255.0 + offset;
    let fl = v.floor();
    let r = if v - fl >= 0.5 { fl + 1.0 } else { fl };
    if r < 0.0 {
        0
    } else if r > 255.0 {
        255
    } else {
        r as u8
    }
}

/// Long-run drops for a consumer capped below the source rate: every frame
/// beyond the cap's share is lost.
pub fn oracle_expected_drops(frames: u64, fps: f64, cap: f64) -> f64 {
    frames as f64 * (1.0 - cap / fps)
}
