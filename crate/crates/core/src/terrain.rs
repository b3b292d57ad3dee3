//! Ground model: heightfield elevation, texture radiance, and the sensor
//! exposure curve.
//!
//! Procedural texture is smoothed value noise. Each octave `k` has wavelength
//! `base_wavelength / 2^k` and amplitude `2^-k`; lattice values come from
//! [`lattice_value`], a splitmix64-style integer hash of
//! `(seed, octave, ix, iy)`, and are blended with smoothstep weights
//! `w(t) = t²(3 − 2t)`. The octave sum is divided by the amplitude sum, which
//! keeps it in [0, 1], and finally compressed toward 0.5:
//! `0.5 + contrast · (v − 0.5)`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TerrainError {
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid terrain: {0}")]
    Invalid(String),
}

/// Regular elevation grid. Node `(col, row)` sits at
/// `origin + (col, row) * spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    spacing: f64,
    origin: Vector2<f64>,
    cols: usize,
    rows: usize,
    elevations: Vec<f64>,
    flat: Option<f64>,
}

impl Heightfield {
    pub fn new(
        cols: usize,
        rows: usize,
        spacing: f64,
        origin: Vector2<f64>,
        elevations: Vec<f64>,
    ) -> Result<Self, TerrainError> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(TerrainError::Invalid(format!(
                "grid spacing must be positive, got {spacing}"
            )));
        }
        if cols == 0 || rows == 0 || elevations.len() != cols * rows {
            return Err(TerrainError::Invalid(format!(
                "expected {cols}x{rows} elevations, got {}",
                elevations.len()
            )));
        }
        if elevations.iter().any(|e| !e.is_finite()) {
            return Err(TerrainError::Invalid("non-finite elevation".into()));
        }
        let first = elevations[0];
        let flat = elevations.iter().all(|&e| e == first).then_some(first);
        Ok(Self {
            spacing,
            origin,
            cols,
            rows,
            elevations,
            flat,
        })
    }

    /// Single-node grid: constant elevation everywhere.
    pub fn flat(elevation: f64) -> Self {
        Self::new(1, 1, 1.0, Vector2::zeros(), vec![elevation]).expect("valid flat grid")
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    pub fn origin(&self) -> Vector2<f64> {
        self.origin
    }

    /// `Some(z)` when every node has the same elevation.
    pub fn flat_elevation(&self) -> Option<f64> {
        self.flat
    }

    pub fn max_elevation(&self) -> f64 {
        self.elevations
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_elevation(&self) -> f64 {
        self.elevations.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn node(&self, col: usize, row: usize) -> f64 {
        self.elevations[row * self.cols + col]
    }

    /// Bilinear sample; positions outside the grid clamp to the boundary.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        if let Some(z) = self.flat {
            return z;
        }
        let gx = ((x - self.origin.x) / self.spacing).clamp(0.0, (self.cols - 1) as f64);
        let gy = ((y - self.origin.y) / self.spacing).clamp(0.0, (self.rows - 1) as f64);
        let c0 = (gx.floor() as usize).min(self.cols.saturating_sub(2));
        let r0 = (gy.floor() as usize).min(self.rows.saturating_sub(2));
        let c1 = (c0 + 1).min(self.cols - 1);
        let r1 = (r0 + 1).min(self.rows - 1);
        let tx = gx - c0 as f64;
        let ty = gy - r0 as f64;
        let top = self.node(c0, r0) * (1.0 - tx) + self.node(c1, r0) * tx;
        let bottom = self.node(c0, r1) * (1.0 - tx) + self.node(c1, r1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

pub fn height_at(h: &Heightfield, x: f64, y: f64) -> f64 {
    h.height_at(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProceduralTexture {
    pub seed: u64,
    pub octaves: u32,
    pub base_wavelength: f64,
    pub contrast: f64,
}

impl ProceduralTexture {
    pub fn validate(&self) -> Result<(), TerrainError> {
        if self.octaves == 0 || self.octaves > 24 {
            return Err(TerrainError::Invalid(format!(
                "octave count must be in 1..=24, got {}",
                self.octaves
            )));
        }
        if !(self.base_wavelength > 0.0 && self.base_wavelength.is_finite()) {
            return Err(TerrainError::Invalid("base wavelength must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(TerrainError::Invalid("contrast must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn amplitude_sum(&self) -> f64 {
        (0..self.octaves).map(|k| 0.5f64.powi(k as i32)).sum()
    }

    /// Upper bound on |∂I/∂x| and |∂I/∂y| in intensity per meter.
    pub fn lipschitz_bound(&self) -> f64 {
        let slope: f64 = (0..self.octaves)
            .map(|k| {
                let amp = 0.5f64.powi(k as i32);
                let wavelength = self.base_wavelength / 2f64.powi(k as i32);
                amp * 1.5 / wavelength
            })
            .sum();
        self.contrast * slope / self.amplitude_sum()
    }

    pub fn intensity_at(&self, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        let mut amp = 1.0;
        let mut freq = 1.0 / self.base_wavelength;
        for k in 0..self.octaves {
            acc += amp * value_noise(self.seed, k, x * freq, y * freq);
            amp *= 0.5;
            freq *= 2.0;
        }
        let v = acc / self.amplitude_sum();
        0.5 + self.contrast * (v - 0.5)
    }
}

/// Hash of an integer lattice node to [0, 1).
pub fn lattice_value(seed: u64, octave: u32, ix: i64, iy: i64) -> f64 {
    let mut h = seed ^ (octave as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h = (h ^ (ix as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)).rotate_left(27);
    h = (h ^ (iy as u64).wrapping_mul(0x94D0_49BB_1331_11EB)).rotate_left(31);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, octave: u32, u: f64, v: f64) -> f64 {
    let fu = u.floor();
    let fv = v.floor();
    let (ix, iy) = (fu as i64, fv as i64);
    let tx = smoothstep(u - fu);
    let ty = smoothstep(v - fv);
    let a = lattice_value(seed, octave, ix, iy);
    let b = lattice_value(seed, octave, ix + 1, iy);
    let c = lattice_value(seed, octave, ix, iy + 1);
    let d = lattice_value(seed, octave, ix + 1, iy + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

/// Grayscale raster draped on the ground plane, texel `(i, j)` centred at
/// `origin + ((i + 0.5), (j + 0.5)) * meters_per_texel`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterTexture {
    pub width: usize,
    pub height: usize,
    pub texels: Vec<u8>,
    pub meters_per_texel: f64,
    pub origin: Vector2<f64>,
}

impl RasterTexture {
    pub fn new(
        width: usize,
        height: usize,
        texels: Vec<u8>,
        meters_per_texel: f64,
    ) -> Result<Self, TerrainError> {
        if width == 0 || height == 0 || texels.len() != width * height {
            return Err(TerrainError::Invalid(format!(
                "raster {width}x{height} needs {} texels, got {}",
                width * height,
                texels.len()
            )));
        }
        if !(meters_per_texel > 0.0 && meters_per_texel.is_finite()) {
            return Err(TerrainError::Invalid("meters_per_texel must be positive".into()));
        }
        Ok(Self {
            width,
            height,
            texels,
            meters_per_texel,
            origin: Vector2::zeros(),
        })
    }

    /// Bakes a procedural texture into a raster centred on the origin.
    pub fn bake(
        tex: &ProceduralTexture,
        width: usize,
        height: usize,
        meters_per_texel: f64,
    ) -> Result<Self, TerrainError> {
        let mut texels = Vec::with_capacity(width * height);
        let ox = -(width as f64) * meters_per_texel / 2.0;
        let oy = -(height as f64) * meters_per_texel / 2.0;
        for j in 0..height {
            for i in 0..width {
                let x = ox + (i as f64 + 0.5) * meters_per_texel;
                let y = oy + (j as f64 + 0.5) * meters_per_texel;
                let v = tex.intensity_at(x, y);
                texels.push((v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
        let mut r = Self::new(width, height, texels, meters_per_texel)?;
        r.origin = Vector2::new(ox, oy);
        Ok(r)
    }

    fn texel(&self, i: usize, j: usize) -> f64 {
        self.texels[j * self.width + i] as f64
    }

    pub fn intensity_at(&self, x: f64, y: f64) -> f64 {
        let gx = ((x - self.origin.x) / self.meters_per_texel - 0.5)
            .clamp(0.0, (self.width - 1) as f64);
        let gy = ((y - self.origin.y) / self.meters_per_texel - 0.5)
            .clamp(0.0, (self.height - 1) as f64);
        let i0 = gx.floor() as usize;
        let j0 = gy.floor() as usize;
        let i1 = (i0 + 1).min(self.width - 1);
        let j1 = (j0 + 1).min(self.height - 1);
        let tx = gx - i0 as f64;
        let ty = gy - j0 as f64;
        let top = self.texel(i0, j0) * (1.0 - tx) + self.texel(i1, j0) * tx;
        let bottom = self.texel(i0, j1) * (1.0 - tx) + self.texel(i1, j1) * tx;
        (top * (1.0 - ty) + bottom * ty) / 255.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextureField {
    Procedural(ProceduralTexture),
    Raster(RasterTexture),
}

impl TextureField {
    /// Ground radiance in [0, 1].
    pub fn intensity_at(&self, x: f64, y: f64) -> f64 {
        match self {
            TextureField::Procedural(p) => p.intensity_at(x, y),
            TextureField::Raster(r) => r.intensity_at(x, y),
        }
    }
}

pub fn intensity_at(t: &TextureField, x: f64, y: f64) -> f64 {
    t.intensity_at(x, y)
}

/// Linear sensor response with an 8-bit full-well clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureModel {
    pub gain: f64,
    #[serde(default)]
    pub offset: f64,
}

impl Default for ExposureModel {
    fn default() -> Self {
        Self {
            gain: 1.0,
            offset: 0.0,
        }
    }
}

impl ExposureModel {
    /// `clamp(round(gain · i · 255 + offset), 0, 255)`, rounding halves up.
    #[inline]
    pub fn apply(&self, intensity: f64) -> u8 {
        let v = (self.gain * intensity * 255.0 + self.offset + 0.5).floor();
        v.clamp(0.0, 255.0) as u8
    }
}

pub fn apply_exposure(e: &ExposureModel, intensity: f64) -> u8 {
    e.apply(intensity)
}

/// Heightfield plus texture: everything the renderer needs from the ground.
#[derive(Debug, Clone)]
pub struct Terrain {
    pub heightfield: Heightfield,
    pub texture: TextureField,
}

impl Terrain {
    pub fn new(heightfield: Heightfield, texture: TextureField) -> Self {
        Self {
            heightfield,
            texture,
        }
    }
}

/// 8-bit grayscale image as read from or written to a binary PGM.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> TerrainError {
        TerrainError::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.data.len() {
            let c = self.data[self.pos];
            if c == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str, TerrainError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        std::str::from_utf8(&self.data[start..self.pos]).map_err(|_| {
            TerrainError::Parse {
                path: self.path.to_path_buf(),
                offset: start,
                message: "header token is not valid UTF-8".into(),
            }
        })
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, TerrainError> {
        let start = {
            self.skip_space_and_comments();
            self.pos
        };
        let tok = self.token()?;
        tok.parse().map_err(|_| TerrainError::Parse {
            path: self.path.to_path_buf(),
            offset: start,
            message: format!("invalid {what} {tok:?}"),
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, TerrainError> {
    fs::read(path).map_err(|source| TerrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a binary (P5) PGM with maxval 255.
pub fn parse_pgm(data: &[u8], path: &Path) -> Result<GrayImage, TerrainError> {
    let mut cur = Cursor { data, pos: 0, path };
    if cur.token()? != "P5" {
        cur.pos = 0;
        return Err(cur.err("missing P5 magic"));
    }
    let width: usize = cur.number("width")?;
    let height: usize = cur.number("height")?;
    let maxval: u32 = cur.number("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("only maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(cur.err("image dimensions must be positive"));
    }
    if cur.pos >= data.len() || !data[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected a single whitespace byte before the raster"));
    }
    cur.pos += 1;
    let need = width * height;
    let have = data.len() - cur.pos;
    if have < need {
        cur.pos = data.len();
        return Err(cur.err(format!("raster truncated: need {need} bytes, found {have}")));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: data[cur.pos..cur.pos + need].to_vec(),
    })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), TerrainError> {
    fs::write(path, encode_pgm(width, height, pixels)).map_err(|source| TerrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Sidecar header path for a raster texture: `<path>.meta`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn parse_sidecar(text: &str, path: &Path) -> Result<f64, TerrainError> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if let Some(value) = trimmed.strip_prefix("meters_per_texel=") {
            return value.trim().parse().map_err(|_| TerrainError::Parse {
                path: path.to_path_buf(),
                offset: offset + line.find('=').unwrap_or(0) + 1,
                message: format!("invalid meters_per_texel {value:?}"),
            });
        }
        offset += line.len();
    }
    Err(TerrainError::Parse {
        path: path.to_path_buf(),
        offset: text.len(),
        message: "missing meters_per_texel entry".into(),
    })
}

/// Loads a P5 texture and its `meters_per_texel=` sidecar.
pub fn load_texture(path: &Path) -> Result<TextureField, TerrainError> {
    let data = read_file(path)?;
    let img = parse_pgm(&data, path)?;
    let side = sidecar_path(path);
    let text = String::from_utf8_lossy(&read_file(&side)?).into_owned();
    let mpt = parse_sidecar(&text, &side)?;
    let raster = RasterTexture::new(img.width, img.height, img.pixels, mpt)?;
    Ok(TextureField::Raster(raster))
}

pub fn save_texture(path: &Path, raster: &RasterTexture) -> Result<(), TerrainError> {
    write_pgm(path, raster.width, raster.height, &raster.texels)?;
    let side = sidecar_path(path);
    fs::write(&side, format!("meters_per_texel={}\n", raster.meters_per_texel)).map_err(
        |source| TerrainError::Io {
            path: side.clone(),
            source,
        },
    )
}

/// Parses the `HGT <cols> <rows> <spacing_m>` text heightfield format.
pub fn parse_heightfield(data: &[u8], path: &Path) -> Result<Heightfield, TerrainError> {
    let mut cur = Cursor { data, pos: 0, path };
    if cur.token()? != "HGT" {
        cur.pos = 0;
        return Err(cur.err("missing HGT magic"));
    }
    let cols: usize = cur.number("column count")?;
    let rows: usize = cur.number("row count")?;
    let spacing: f64 = cur.number("spacing")?;
    if cols == 0 || rows == 0 {
        return Err(cur.err("grid must be non-empty"));
    }
    if !(spacing > 0.0) {
        return Err(cur.err("spacing must be positive"));
    }
    let mut elevations = Vec::with_capacity(cols * rows);
    for _ in 0..cols * rows {
        let z: f64 = cur.number("elevation")?;
        elevations.push(z);
    }
    cur.skip_space_and_comments();
    if cur.pos != data.len() {
        return Err(cur.err("trailing data after elevations"));
    }
    Heightfield::new(cols, rows, spacing, Vector2::zeros(), elevations)
}

pub fn load_heightfield(path: &Path) -> Result<Heightfield, TerrainError> {
    let data = read_file(path)?;
    parse_heightfield(&data, path)
}

pub fn encode_heightfield(h: &Heightfield) -> String {
    let mut out = format!("HGT {} {} {}\n", h.cols, h.rows, h.spacing);
    for row in 0..h.rows {
        let line: Vec<String> = (0..h.cols).map(|c| h.node(c, row).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tex(contrast: f64) -> ProceduralTexture {
        ProceduralTexture {
            seed: 7,
            octaves: 5,
            base_wavelength: 32.0,
            contrast,
        }
    }

    #[test]
    fn bilinear_heights() {
        let flat = Heightfield::new(3, 3, 10.0, Vector2::zeros(), vec![0.0; 9]).unwrap();
        assert_eq!(flat.height_at(12.3, -4.0), 0.0);

        let h = Heightfield::new(2, 2, 1.0, Vector2::zeros(), vec![0.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((h.height_at(0.5, 0.5) - 1.0).abs() < 1e-12);
        assert_eq!(h.height_at(5.0, 5.0), 4.0);
        assert_eq!(h.height_at(-5.0, -5.0), 0.0);
        assert_eq!(h.height_at(5.0, -5.0), 0.0);
    }

    #[test]
    fn heightfield_rejects_bad_spacing() {
        assert!(Heightfield::new(1, 1, 0.0, Vector2::zeros(), vec![0.0]).is_err());
        assert!(Heightfield::new(2, 2, 1.0, Vector2::zeros(), vec![0.0]).is_err());
    }

    #[test]
    fn procedural_texture_basics() {
        let t = tex(0.0);
        assert_eq!(t.intensity_at(3.0, 4.0), 0.5);
        let t = tex(0.6);
        assert_eq!(t.intensity_at(12.25, -7.5), t.intensity_at(12.25, -7.5));
        let v = t.intensity_at(100.0, 200.0);
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn raster_texel_centre() {
        let r = RasterTexture::new(2, 2, vec![0, 51, 102, 255], 2.0).unwrap();
        assert_eq!(r.intensity_at(1.0, 1.0), 0.0);
        assert_eq!(r.intensity_at(3.0, 1.0), 51.0 / 255.0);
        assert_eq!(r.intensity_at(1.0, 3.0), 102.0 / 255.0);
        assert_eq!(r.intensity_at(3.0, 3.0), 1.0);
        // Outside clamps to the nearest texel.
        assert_eq!(r.intensity_at(-10.0, -10.0), 0.0);
    }

    #[test]
    fn exposure_examples() {
        let e = ExposureModel {
            gain: 4.0,
            offset: 0.0,
        };
        assert_eq!(e.apply(0.5), 255);
        let e = ExposureModel::default();
        assert_eq!(e.apply(0.5), 128);
        let e = ExposureModel {
            gain: 1.0,
            offset: 3.6,
        };
        assert_eq!(e.apply(0.0), 4);
        let e = ExposureModel {
            gain: 1.0,
            offset: -3.0,
        };
        assert_eq!(e.apply(0.0), 0);
    }

    #[test]
    fn exposure_is_monotone_over_quantized_inputs() {
        for &(gain, offset) in &[(1.0, 0.0), (4.0, 0.0), (0.5, 20.0), (2.5, -40.0)] {
            let e = ExposureModel { gain, offset };
            let mut last = 0u8;
            for q in 0..=255u32 {
                let out = e.apply(q as f64 / 255.0);
                assert!(out >= last);
                last = out;
            }
        }
    }

    #[test]
    fn pgm_parse_and_errors() {
        let p = Path::new("mem.pgm");
        let img = parse_pgm(b"P5\n2 2\n255\n\x00\x10\x20\x30", p).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixels, vec![0, 16, 32, 48]);

        let with_comment = parse_pgm(b"P5 # comment\n2 1 255\n\x01\x02", p).unwrap();
        assert_eq!(with_comment.pixels, vec![1, 2]);

        match parse_pgm(b"P5\n2 2\n255\n\x00\x10", p) {
            Err(TerrainError::Parse { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_pgm(b"P6\n2 2\n255\n", p),
            Err(TerrainError::Parse { offset: 0, .. })
        ));
        assert!(parse_pgm(b"P5\n2 2\n65535\n", p).is_err());
    }

    #[test]
    fn heightfield_text_format() {
        let p = Path::new("mem.hgt");
        let h = parse_heightfield(b"HGT 2 2 30.0\n0 1\n2 3\n", p).unwrap();
        assert_eq!(h.spacing(), 30.0);
        assert_eq!(h.dims(), (2, 2));
        assert_eq!(h.height_at(30.0, 30.0), 3.0);
        let again = parse_heightfield(encode_heightfield(&h).as_bytes(), p).unwrap();
        assert_eq!(again, h);
        match parse_heightfield(b"HGT 2 2 30.0\n0 1\n2", p) {
            Err(TerrainError::Parse { offset, .. }) => assert_eq!(offset, 18),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn sidecar_parsing() {
        let p = Path::new("t.pgm.meta");
        assert_eq!(parse_sidecar("meters_per_texel=30.0\n", p).unwrap(), 30.0);
        assert!(parse_sidecar("spacing=1\n", p).is_err());
        assert!(parse_sidecar("meters_per_texel=abc\n", p).is_err());
    }
}
