//! Dense per-pixel containers: RGB images, depth maps and boolean masks,
//! plus their PNG / PFM encodings.
//!
//! Pixel `(x, y)` has its center at continuous coordinate `(x, y)`; rows run
//! top to bottom. Images are stored pixel-interleaved (`[y][x][c]`).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An RGB image with `f64` channels, nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn check_shape(&self, width: usize, height: usize) -> Result<()> {
        if self.dims() != (width, height) {
            return Err(Error::shape(
                format!("{width}x{height}"),
                format!("{}x{}", self.width, self.height),
            ));
        }
        Ok(())
    }

    /// Bilinear sample at continuous coordinates; caller guarantees
    /// `0 <= x <= width-1` and `0 <= y <= height-1`.
    pub fn bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let (x0, y0, fx, fy) = bilinear_cell(x, y, self.width, self.height);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] + (p10[c] - p00[c]) * fx;
            let bottom = p01[c] + (p11[c] - p01[c]) * fx;
            out[c] = top + (bottom - top) * fy;
        }
        out
    }

    /// Per-channel product with a mask (false pixels become zero).
    pub fn masked(&self, mask: &WarpMask) -> Image {
        let mut out = self.clone();
        for (px, &keep) in out.data.chunks_exact_mut(3).zip(mask.bits()) {
            if !keep {
                px.fill(0.0);
            }
        }
        out
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in buf.as_mut().iter_mut().zip(&self.data) {
            *dst = (src.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Image::from_vec(w as usize, h as usize, data)
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        write_pfm(path, self.width, self.height, 3, &self.data)
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let (w, h, ch, data) = read_pfm(path)?;
        if ch != 3 {
            return Err(Error::Pfm("expected a color (PF) map".into()));
        }
        Image::from_vec(w, h, data)
    }
}

/// Integer cell and fractional offsets for bilinear lookups. Coordinates
/// within 1e-9 of an integer snap to it so exact pixel hits stay exact.
pub(crate) fn bilinear_cell(x: f64, y: f64, width: usize, height: usize) -> (usize, usize, f64, f64) {
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let x = snap(x).clamp(0.0, (width - 1) as f64);
    let y = snap(y).clamp(0.0, (height - 1) as f64);
    let x0 = (x.floor() as usize).min(width.saturating_sub(1));
    let y0 = (y.floor() as usize).min(height.saturating_sub(1));
    (x0, y0, x - x0 as f64, y - y0 as f64)
}

/// Per-pixel camera-space depth in meters. Entries `<= 0` mean "no surface".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub const INVALID: f64 = 0.0;

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Self::INVALID; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(width * height, data.len()));
        }
        let data = data
            .into_iter()
            .map(|d| if d.is_finite() && d > 0.0 { d } else { Self::INVALID })
            .collect();
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let d = f(x, y);
                data.push(if d.is_finite() && d > 0.0 { d } else { Self::INVALID });
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        self.data[y * self.width + x] = if depth.is_finite() && depth > 0.0 {
            depth
        } else {
            Self::INVALID
        };
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }

    /// Bilinear depth at continuous coordinates. `None` when any neighbor
    /// carrying non-zero weight has no surface.
    pub fn bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let (x0, y0, fx, fy) = bilinear_cell(x, y, self.width, self.height);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        let mut acc = 0.0;
        for (x, y, w) in taps {
            if w == 0.0 {
                continue;
            }
            let d = self.get(x, y);
            if d <= 0.0 {
                return None;
            }
            acc += w * d;
        }
        Some(acc)
    }

    /// Depth normalized to `[0, 1]` for conditioning: `near` maps to 1,
    /// `far` to 0 (clamped), invalid pixels to 0.
    pub fn normalized(&self, near: f64, far: f64) -> Vec<f64> {
        self.data
            .iter()
            .map(|&d| {
                if d <= 0.0 {
                    0.0
                } else {
                    ((far - d) / (far - near)).clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        write_pfm(path, self.width, self.height, 1, &self.data)
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let (w, h, ch, data) = read_pfm(path)?;
        if ch != 1 {
            return Err(Error::Pfm("expected a grayscale (Pf) map".into()));
        }
        DepthMap::from_vec(w, h, data)
    }
}

/// Per-pixel visibility booleans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl WarpMask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(width * height, bits.len()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn and(&self, other: &WarpMask) -> WarpMask {
        WarpMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn not(&self) -> WarpMask {
        WarpMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    write!(out, "{tag}\n{width} {height}\n-1.0\n").expect("write to Vec");
    // PFM stores scanlines bottom to top.
    for y in (0..height).rev() {
        let row = &data[y * width * channels..(y + 1) * width * channels];
        for v in row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes)
}

pub(crate) fn parse_pfm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    // Three whitespace-terminated header tokens after the magic.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Pfm("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Pfm(format!("bad magic `{other}`"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Pfm(format!("bad dimension `{s}`")))
    };
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::Pfm(format!("bad scale `{}`", tokens[3])))?;
    let little = scale < 0.0;
    let n = width * height * channels;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() < n * 4 {
        return Err(Error::Pfm(format!(
            "expected {} raster bytes, found {}",
            n * 4,
            body.len()
        )));
    }
    let mut data = vec![0.0; n];
    for (i, chunk) in body[..n * 4].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let row = i / (width * channels);
        let col = i % (width * channels);
        data[(height - 1 - row) * width * channels + col] = f64::from(v);
    }
    Ok((width, height, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trips_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 3, |x, y| [x as f64 * 0.25, y as f64 * 0.5, 0.125]);
        let path = dir.path().join("a.pfm");
        img.save_pfm(&path).unwrap();
        assert_eq!(Image::load_pfm(&path).unwrap(), img);

        let depth = DepthMap::from_fn(4, 2, |x, y| if x == 0 { 0.0 } else { 1.5 + y as f64 });
        let path = dir.path().join("d.pfm");
        depth.save_pfm(&path).unwrap();
        assert_eq!(DepthMap::load_pfm(&path).unwrap(), depth);
    }

    #[test]
    fn pfm_header_is_little_endian_with_negative_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        DepthMap::from_fn(2, 2, |_, _| 1.0).save_pfm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        assert_eq!(bytes.len(), 12 + 16);
    }

    #[test]
    fn truncated_pfm_is_rejected() {
        assert!(parse_pfm(b"PF\n4 4\n-1.0\n\0\0").is_err());
        assert!(parse_pfm(b"P6\n4 4\n-1.0\n").is_err());
    }

    #[test]
    fn bilinear_is_exact_on_linear_images() {
        let img = Image::from_fn(6, 6, |x, y| [x as f64 * 0.1, y as f64 * 0.1, 0.3]);
        let p = img.bilinear(2.25, 3.5);
        assert!((p[0] - 0.225).abs() < 1e-12);
        assert!((p[1] - 0.35).abs() < 1e-12);
        assert_eq!(img.bilinear(5.0, 5.0), img.pixel(5, 5));
    }

    #[test]
    fn bilinear_depth_rejects_invalid_neighbors() {
        let d = DepthMap::from_fn(4, 4, |x, _| if x >= 2 { 0.0 } else { 2.0 });
        assert_eq!(d.bilinear(0.5, 1.0), Some(2.0));
        assert_eq!(d.bilinear(1.5, 1.0), None);
        assert_eq!(d.bilinear(1.0, 1.0), Some(2.0));
    }

    #[test]
    fn png_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(3, 2, |x, _| [x as f64 / 2.0, 1.0, 0.0]);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.dims(), (3, 2));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
