//! Gradient-based candidate selection and FAST / Shi-Tomasi corner detection.

use nalgebra::Vector2;

use crate::camera::ImageFrame;

/// Pixels closer than this to the border are never selected or detected, so
/// every selected pixel has full 8×8 patch support.
pub const EDGE_MARGIN: usize = 4;

/// Central-difference gradient magnitude. Border pixels are zero.
pub fn gradient_magnitude(img: &ImageFrame) -> Vec<f64> {
    let (w, h) = (img.width as usize, img.height as usize);
    let mut g = vec![0.0; w * h];
    if w < 3 || h < 3 {
        return g;
    }
    let p = &img.pixels;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (p[y * w + x + 1] as f64 - p[y * w + x - 1] as f64) * 0.5;
            let gy = (p[(y + 1) * w + x] as f64 - p[(y - 1) * w + x] as f64) * 0.5;
            g[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    g
}

/// Upper median (`sorted[n / 2]`).
fn median(values: &mut [f64]) -> f64 {
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Region-adaptive gradient selection. Each `d×d` block keeps its strongest
/// pixel when it exceeds the block median plus `grad_add`. Blocks of size
/// `2d` whose `d` sub-blocks all came up empty are retried with
/// `floor(grad_add / 2)`, then `4d` blocks with `floor(grad_add / 4)`.
/// Partial blocks at the right and bottom edges are included. Ties go to the
/// first pixel in row-major order.
pub fn select_candidate_pixels(img: &ImageFrame, d: usize, grad_add: f64) -> Vec<Vector2<usize>> {
    assert!(d >= 2, "block size must be at least 2");
    let (w, h) = (img.width as usize, img.height as usize);
    let grad = gradient_magnitude(img);
    let mut out = Vec::new();
    // Selection flag per finest block.
    let nbx = w.div_ceil(d);
    let nby = h.div_ceil(d);
    let mut filled = vec![false; nbx * nby];
    let mut scratch = Vec::new();

    for (level, add) in [(1usize, grad_add), (2, (grad_add / 2.0).floor()), (4, (grad_add / 4.0).floor())] {
        let size = d * level;
        for by in 0..h.div_ceil(size) {
            for bx in 0..w.div_ceil(size) {
                // Finest blocks covered by this block.
                let (fx0, fy0) = (bx * level, by * level);
                let (fx1, fy1) = ((fx0 + level).min(nbx), (fy0 + level).min(nby));
                let any = (fy0..fy1).any(|fy| (fx0..fx1).any(|fx| filled[fy * nbx + fx]));
                if any {
                    continue;
                }
                let (x0, y0) = (bx * size, by * size);
                let (x1, y1) = ((x0 + size).min(w), (y0 + size).min(h));
                scratch.clear();
                let mut best: Option<(f64, usize, usize)> = None;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let g = grad[y * w + x];
                        scratch.push(g);
                        if interior(x, y, w, h) && best.is_none_or(|(bg, _, _)| g > bg) {
                            best = Some((g, x, y));
                        }
                    }
                }
                let threshold = median(&mut scratch) + add;
                if let Some((g, x, y)) = best {
                    if g > threshold {
                        out.push(Vector2::new(x, y));
                        let (fx, fy) = (x / d, y / d);
                        filled[fy * nbx + fx] = true;
                        // Mark the whole block so coarser levels skip it.
                        for fy in fy0..fy1 {
                            for fx in fx0..fx1 {
                                filled[fy * nbx + fx] = true;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn interior(x: usize, y: usize, w: usize, h: usize) -> bool {
    x >= EDGE_MARGIN && y >= EDGE_MARGIN && x + EDGE_MARGIN < w && y + EDGE_MARGIN < h
}

/// Bresenham circle of radius 3 used by the segment test.
pub const FAST_CIRCLE: [(i32, i32); 16] = [
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

/// Segment test: at least 9 contiguous circle pixels all brighter than
/// `center + threshold` or all darker than `center - threshold`.
pub fn is_fast_corner(img: &ImageFrame, x: usize, y: usize, threshold: f64) -> bool {
    let w = img.width as usize;
    let c = img.pixels[y * w + x] as f64;
    let mut states = [0i8; 16];
    for (k, (dx, dy)) in FAST_CIRCLE.iter().enumerate() {
        let v = img.pixels[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize] as f64;
        states[k] = if v > c + threshold {
            1
        } else if v < c - threshold {
            -1
        } else {
            0
        };
    }
    for sign in [1i8, -1] {
        let mut run = 0;
        for k in 0..32 {
            if states[k % 16] == sign {
                run += 1;
                if run >= 9 {
                    return true;
                }
            } else {
                run = 0;
            }
        }
    }
    false
}

/// Minimum eigenvalue of the structure tensor over a 5×5 window of
/// central-difference gradients.
pub fn shi_tomasi_score(img: &ImageFrame, x: usize, y: usize) -> f64 {
    let w = img.width as usize;
    let p = &img.pixels;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for yy in y - 2..=y + 2 {
        for xx in x - 2..=x + 2 {
            let gx = (p[yy * w + xx + 1] as f64 - p[yy * w + xx - 1] as f64) * 0.5;
            let gy = (p[(yy + 1) * w + xx] as f64 - p[(yy - 1) * w + xx] as f64) * 0.5;
            a += gx * gx;
            b += gx * gy;
            c += gy * gy;
        }
    }
    let half = 0.5 * (a + c);
    half - (0.25 * (a - c) * (a - c) + b * b).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub pixel: Vector2<usize>,
    pub score: f64,
}

/// Per aligned `cell_size` cell, the FAST corner with the highest Shi-Tomasi
/// score (first in row-major order on ties).
pub fn detect_corners(img: &ImageFrame, cell_size: usize, fast_threshold: f64) -> Vec<Corner> {
    detect_corners_masked(img, cell_size, fast_threshold, |_, _| false)
}

/// As [`detect_corners`], skipping cells for which `occupied(cx, cy)` holds.
pub fn detect_corners_masked(
    img: &ImageFrame,
    cell_size: usize,
    fast_threshold: f64,
    occupied: impl Fn(usize, usize) -> bool,
) -> Vec<Corner> {
    assert!(cell_size > 0, "cell size must be positive");
    let (w, h) = (img.width as usize, img.height as usize);
    let mut out = Vec::new();
    if w <= 2 * EDGE_MARGIN || h <= 2 * EDGE_MARGIN {
        return out;
    }
    for cy in 0..h.div_ceil(cell_size) {
        for cx in 0..w.div_ceil(cell_size) {
            if occupied(cx, cy) {
                continue;
            }
            let x0 = (cx * cell_size).max(EDGE_MARGIN);
            let y0 = (cy * cell_size).max(EDGE_MARGIN);
            let x1 = ((cx + 1) * cell_size).min(w - EDGE_MARGIN);
            let y1 = ((cy + 1) * cell_size).min(h - EDGE_MARGIN);
            let mut best: Option<Corner> = None;
            for y in y0..y1 {
                for x in x0..x1 {
                    if !is_fast_corner(img, x, y, fast_threshold) {
                        continue;
                    }
                    let score = shi_tomasi_score(img, x, y);
                    if best.is_none_or(|b| score > b.score) {
                        best = Some(Corner {
                            pixel: Vector2::new(x, y),
                            score,
                        });
                    }
                }
            }
            out.extend(best);
        }
    }
    out
}
