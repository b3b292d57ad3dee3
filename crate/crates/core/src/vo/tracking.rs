//! 8×8 SSD patch tracking with a two-level pyramid, parabolic sub-pixel
//! interpolation and a short Gauss-Newton polish.

use nalgebra::Vector2;

use crate::camera::ImageFrame;

pub const PATCH: usize = 8;
const HALF: f64 = 4.0;

/// Matches whose RMS intensity difference exceeds this are dropped.
pub const DEFAULT_MAX_RESIDUAL: f64 = 14.0;

#[derive(Debug, Clone)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    fn from_frame(img: &ImageFrame) -> Self {
        Self {
            width: img.width as usize,
            height: img.height as usize,
            data: img.pixels.iter().map(|&p| p as f32).collect(),
        }
    }

    /// 2×2 box average; pixel `i` covers level-0 pixels `2i` and `2i + 1`.
    fn half(&self) -> Self {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let r0 = &self.data[2 * y * self.width..];
            let r1 = &self.data[(2 * y + 1) * self.width..];
            for x in 0..w {
                data.push(0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]));
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// Bilinear sample; caller guarantees `0 <= x < width - 1` and the same
    /// for `y`.
    #[inline]
    fn bilinear(&self, x: f64, y: f64) -> f32 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let (ix, iy) = (x0 as usize, y0 as usize);
        let i = iy * self.width + ix;
        let a = self.data[i];
        let b = self.data[i + 1];
        let c = self.data[i + self.width];
        let d = self.data[i + self.width + 1];
        let top = a + (b - a) * fx;
        let bot = c + (d - c) * fx;
        top + (bot - top) * fy
    }

    /// True when an 8×8 patch centred at `p` can be sampled bilinearly.
    fn supports(&self, p: &Vector2<f64>) -> bool {
        p.x - HALF >= 0.0
            && p.y - HALF >= 0.0
            && p.x + HALF < self.width as f64 - 1.0
            && p.y + HALF < self.height as f64 - 1.0
    }

    fn template(&self, p: &Vector2<f64>) -> [f32; PATCH * PATCH] {
        let mut t = [0.0; PATCH * PATCH];
        for j in 0..PATCH {
            for i in 0..PATCH {
                t[j * PATCH + i] = self.bilinear(p.x + i as f64 - HALF, p.y + j as f64 - HALF);
            }
        }
        t
    }

    /// SSD between the template and the integer-aligned patch whose top-left
    /// pixel is `(x0, y0)`.
    #[inline]
    fn ssd(&self, t: &[f32; PATCH * PATCH], x0: usize, y0: usize) -> f32 {
        let mut acc = 0.0;
        for j in 0..PATCH {
            let row = &self.data[(y0 + j) * self.width + x0..(y0 + j) * self.width + x0 + PATCH];
            for i in 0..PATCH {
                let d = row[i] - t[j * PATCH + i];
                acc += d * d;
            }
        }
        acc
    }
}

/// Frame prepared for tracking.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: [Plane; 2],
}

impl Pyramid {
    pub fn new(img: &ImageFrame) -> Self {
        let l0 = Plane::from_frame(img);
        let l1 = l0.half();
        Self { levels: [l0, l1] }
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }

    /// True when `p` has full patch support at full resolution.
    pub fn supports(&self, p: &Vector2<f64>) -> bool {
        self.levels[0].supports(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatch {
    pub point: Vector2<f64>,
    pub displacement: Vector2<f64>,
    /// RMS intensity difference at the best integer offset.
    pub residual: f64,
}

#[inline]
fn to_level1(p: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new((p.x - 0.5) * 0.5, (p.y - 0.5) * 0.5)
}

#[inline]
fn from_level1(p: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(p.x * 2.0 + 0.5, p.y * 2.0 + 0.5)
}

/// Integer search of `radius` around `center`, then parabolic refinement.
/// Returns the refined centre, the integer centre and the RMS residual, or `None` when the
/// minimum sits on the search boundary or the window leaves the image.
fn search(
    plane: &Plane,
    t: &[f32; PATCH * PATCH],
    center: &Vector2<f64>,
    radius: i64,
) -> Option<(Vector2<f64>, Vector2<f64>, f64)> {
    // Patch top-left for a centre c is c - HALF; snap the predicted centre.
    let cx = center.x.round() as i64;
    let cy = center.y.round() as i64;
    let side = (2 * radius + 1) as usize;
    let mut costs = vec![f32::INFINITY; side * side];
    let mut best = (f32::INFINITY, 0i64, 0i64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let x0 = cx + dx - HALF as i64;
            let y0 = cy + dy - HALF as i64;
            if x0 < 0
                || y0 < 0
                || x0 as usize + PATCH > plane.width
                || y0 as usize + PATCH > plane.height
            {
                continue;
            }
            let c = plane.ssd(t, x0 as usize, y0 as usize);
            costs[((dy + radius) as usize) * side + (dx + radius) as usize] = c;
            if c < best.0 {
                best = (c, dx, dy);
            }
        }
    }
    let (c0, bx, by) = best;
    if !c0.is_finite() || bx.abs() == radius || by.abs() == radius {
        return None;
    }
    let at = |dx: i64, dy: i64| costs[((dy + radius) as usize) * side + (dx + radius) as usize] as f64;
    let refine = |m: f64, z: f64, p: f64| {
        let denom = m - 2.0 * z + p;
        if denom > 1e-9 {
            (0.5 * (m - p) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        }
    };
    let sx = refine(at(bx - 1, by), at(bx, by), at(bx + 1, by));
    let sy = refine(at(bx, by - 1), at(bx, by), at(bx, by + 1));
    let whole = Vector2::new((cx + bx) as f64, (cy + by) as f64);
    let rms = (c0 as f64 / (PATCH * PATCH) as f64).sqrt();
    Some((whole + Vector2::new(sx, sy), whole, rms))
}

const LK_ITERATIONS: usize = 6;

/// Inverse-compositional Gauss-Newton on the patch translation, started from
/// the parabolic estimate. Returns `None` when the update wanders more than
/// one pixel or the patch leaves the image.
fn refine_lk(
    prev: &Plane,
    cur: &Plane,
    point: &Vector2<f64>,
    start: Vector2<f64>,
) -> Option<(Vector2<f64>, f64)> {
    let lo = Vector2::new(point.x - HALF - 1.0, point.y - HALF - 1.0);
    if lo.x < 0.0 || lo.y < 0.0 || point.x + HALF + 1.0 >= prev.width as f64 - 1.0 || point.y + HALF + 1.0 >= prev.height as f64 - 1.0 {
        return None;
    }
    const B: usize = PATCH + 2;
    let mut big = [0.0f32; B * B];
    for j in 0..B {
        for i in 0..B {
            big[j * B + i] = prev.bilinear(lo.x + i as f64, lo.y + j as f64);
        }
    }
    let mut t = [0.0f64; PATCH * PATCH];
    let mut gx = [0.0f64; PATCH * PATCH];
    let mut gy = [0.0f64; PATCH * PATCH];
    let (mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0);
    for j in 0..PATCH {
        for i in 0..PATCH {
            let c = (j + 1) * B + i + 1;
            let k = j * PATCH + i;
            t[k] = big[c] as f64;
            gx[k] = 0.5 * (big[c + 1] - big[c - 1]) as f64;
            gy[k] = 0.5 * (big[c + B] - big[c - B]) as f64;
            h00 += gx[k] * gx[k];
            h01 += gx[k] * gy[k];
            h11 += gy[k] * gy[k];
        }
    }
    let det = h00 * h11 - h01 * h01;
    if !(det > 1e-6 * (h00 + h11).powi(2)) || det <= 0.0 {
        return None;
    }
    let mut pos = start;
    let mut rms = 0.0;
    for it in 0..=LK_ITERATIONS {
        if !cur.supports(&pos) {
            return None;
        }
        let (mut bx, mut by, mut ss) = (0.0, 0.0, 0.0);
        for j in 0..PATCH {
            for i in 0..PATCH {
                let k = j * PATCH + i;
                let e = cur.bilinear(pos.x + i as f64 - HALF, pos.y + j as f64 - HALF) as f64 - t[k];
                bx += gx[k] * e;
                by += gy[k] * e;
                ss += e * e;
            }
        }
        rms = (ss / (PATCH * PATCH) as f64).sqrt();
        if it == LK_ITERATIONS {
            break;
        }
        let dx = (h11 * bx - h01 * by) / det;
        let dy = (h00 * by - h01 * bx) / det;
        pos -= Vector2::new(dx, dy);
        if (pos - start).norm() > 1.0 {
            return None;
        }
        if dx * dx + dy * dy < 1e-10 {
            let mut ss = 0.0;
            if !cur.supports(&pos) {
                return None;
            }
            for j in 0..PATCH {
                for i in 0..PATCH {
                    let e = cur.bilinear(pos.x + i as f64 - HALF, pos.y + j as f64 - HALF) as f64 - t[j * PATCH + i];
                    ss += e * e;
                }
            }
            rms = (ss / (PATCH * PATCH) as f64).sqrt();
            break;
        }
    }
    Some((pos, rms))
}

/// Tracks `point` (in `prev`) into `cur`, searching `radius` pixels around
/// `prediction`. The coarse level handles large offsets; the fine level
/// searches two pixels around the upsampled coarse result.
pub fn track_one(
    prev: &Pyramid,
    cur: &Pyramid,
    point: &Vector2<f64>,
    prediction: &Vector2<f64>,
    radius: usize,
    max_residual: f64,
) -> Option<PatchMatch> {
    if !prev.levels[0].supports(point) {
        return None;
    }
    let mut guess = *prediction;
    if radius > 2 {
        let p1 = to_level1(point);
        if prev.levels[1].supports(&p1) {
            let t1 = prev.levels[1].template(&p1);
            let r1 = (radius as i64 + 1) / 2 + 1;
            let (c1, _, _) = search(&cur.levels[1], &t1, &to_level1(prediction), r1)?;
            guess = from_level1(&c1);
        }
    }
    let t0 = prev.levels[0].template(point);
    let (pos, whole, rms) = search(&cur.levels[0], &t0, &guess, 2)?;
    let (pos, rms) = if rms == 0.0 {
        (whole, rms)
    } else {
        refine_lk(&prev.levels[0], &cur.levels[0], point, pos)?
    };
    if rms > max_residual || (pos - prediction).norm() > radius as f64 + 1.5 {
        return None;
    }
    if !cur.levels[0].supports(&pos) {
        return None;
    }
    Some(PatchMatch {
        point: pos,
        displacement: pos - point,
        residual: rms,
    })
}

/// Tracks each point from `prev` into `cur` assuming zero motion as the
/// prediction. Points without patch support or with a poor match are
/// omitted from the result.
pub fn track_patches(
    prev: &ImageFrame,
    cur: &ImageFrame,
    points: &[Vector2<f64>],
    search_radius: usize,
) -> Vec<PatchMatch> {
    let (pp, cp) = (Pyramid::new(prev), Pyramid::new(cur));
    points
        .iter()
        .filter_map(|p| track_one(&pp, &cp, p, p, search_radius, DEFAULT_MAX_RESIDUAL))
        .collect()
}
