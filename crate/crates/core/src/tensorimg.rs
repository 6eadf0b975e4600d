//! Square image tensors, perturbation metrics and binary PPM/PGM I/O.
//!
//! Pixels are `f64` in planar (channel-major) layout: element `(c, row, col)`
//! lives at `c * side * side + row * side + col`. Intensities are on the
//! `[0, 1]` scale; 8-bit values only exist at the file boundary.
//!
//! The same type also carries unclipped pixel-domain quantities such as
//! perturbations, noise samples and gradients. Only [`ImageTensor::clip`]
//! guarantees the `[0, 1]` range.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Spatial layout shared by images and their DCT coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub side: usize,
}

impl Shape {
    pub fn new(channels: usize, side: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if side == 0 {
            return Err(Error::Shape("side must be positive".into()));
        }
        Ok(Self { channels, side })
    }

    /// Number of elements in one channel plane.
    pub fn plane_len(&self) -> usize {
        self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.channels * self.plane_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.side, self.side)
    }
}

/// A `channels x side x side` array of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Wraps `data` after checking its length and that every element is finite.
    pub fn new(channels: usize, side: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(channels, side)?;
        Self::from_shape(shape, data)
    }

    pub fn from_shape(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "expected {} elements for {shape}, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for data produced by arithmetic on valid tensors.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::from_raw(shape, vec![0.0; shape.len()])
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self::from_raw(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn side(&self) -> usize {
        self.shape.side
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        let d = self.shape.side;
        self.data[c * d * d + row * d + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, value: f64) {
        let d = self.shape.side;
        self.data[c * d * d + row * d + col] = value;
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Element-wise `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &Self, factor: f64) -> Result<Self> {
        self.zip_with(other, |a, b| a + factor * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self::from_raw(
            self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Projects onto the valid pixel range `[0, 1]`.
    pub fn clip(&self) -> Result<Self> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(self.clip_unchecked())
    }

    pub(crate) fn clip_unchecked(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Perceptibility of the difference between two images.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct PerturbationMetrics {
    pub mse: f64,
    pub l2: f64,
    pub linf: f64,
    pub rmse: f64,
}

/// MSE, L2, L-infinity and RMSE of `a - b` over all `channels * side^2` elements.
pub fn metrics(a: &ImageTensor, b: &ImageTensor) -> Result<PerturbationMetrics> {
    a.check_same_shape(b)?;
    let mut sq = 0.0;
    let mut linf: f64 = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        let diff = x - y;
        sq += diff * diff;
        linf = linf.max(diff.abs());
    }
    let mse = sq / a.data.len() as f64;
    Ok(PerturbationMetrics {
        mse,
        l2: sq.sqrt(),
        linf,
        rmse: mse.sqrt(),
    })
}

/// Reads a binary PGM (P5) or PPM (P6) file with maxval 255.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path.as_ref())?).read_to_end(&mut bytes)?;
    decode_pnm(&bytes)
}

/// Writes a PGM for one channel or a PPM for three, quantizing by `round(v * 255)`.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(&encode_pnm(img))?;
    out.flush()?;
    Ok(())
}

pub fn encode_pnm(img: &ImageTensor) -> Vec<u8> {
    let Shape { channels, side } = img.shape();
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{side} {side}\n255\n").into_bytes();
    let plane = side * side;
    out.reserve(channels * plane);
    for p in 0..plane {
        for c in 0..channels {
            let v = img.data[c * plane + p];
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Format(format!("unsupported magic {other:?}"))),
    };
    let width = parse_header_number(bytes, &mut pos, "width")?;
    let height = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}, only 255")));
    }
    if width != height {
        return Err(Error::Format(format!("image must be square, got {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let side = width;
    let plane = side * side;
    let raster = bytes
        .get(pos..pos + channels * plane)
        .ok_or_else(|| Error::Format("truncated raster".into()))?;
    let mut data = vec![0.0; channels * plane];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = f64::from(raster[p * channels + c]) / 255.0;
        }
    }
    ImageTensor::new(channels, side, data)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| Error::Format(format!("bad {what} {tok:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(side: usize, data: Vec<f64>) -> ImageTensor {
        ImageTensor::new(1, side, data).unwrap()
    }

    #[test]
    fn identical_images_have_zero_metrics() {
        let a = gray(2, vec![0.1, 0.2, 0.3, 0.4]);
        let m = metrics(&a, &a).unwrap();
        assert_eq!(m, PerturbationMetrics::default());
    }

    #[test]
    fn constant_difference_metrics() {
        let a = gray(2, vec![0.0; 4]);
        let b = gray(2, vec![0.5; 4]);
        let m = metrics(&a, &b).unwrap();
        assert!((m.mse - 0.25).abs() < 1e-15);
        assert!((m.l2 - 1.0).abs() < 1e-15);
        assert!((m.linf - 0.5).abs() < 1e-15);
        assert!((m.rmse - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rmse_of_rgb_sphere_perturbation() {
        let d = 8;
        let shape = Shape::new(3, d).unwrap();
        let rho = 2.5;
        // uniform perturbation with L2 norm rho
        let per = rho / (shape.len() as f64).sqrt();
        let x = ImageTensor::filled(shape, 0.5);
        let y = ImageTensor::filled(shape, 0.5 + per);
        let m = metrics(&x, &y).unwrap();
        let expected = rho / (3f64.sqrt() * d as f64);
        assert!((m.rmse - expected).abs() < 1e-12);
    }

    #[test]
    fn metrics_reject_shape_mismatch() {
        let a = gray(2, vec![0.0; 4]);
        let b = gray(3, vec![0.0; 9]);
        assert!(matches!(metrics(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn clip_clamps_both_ends() {
        let a = gray(2, vec![1.2, -0.1, 0.5, 1.0]);
        let c = a.clip().unwrap();
        assert_eq!(c.as_slice(), &[1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(matches!(
            ImageTensor::new(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite(0))
        ));
        let mut a = gray(1, vec![0.0]);
        a.as_mut_slice()[0] = f64::INFINITY;
        assert!(a.clip().is_err());
    }

    #[test]
    fn byte_endpoints_map_to_unit_range() {
        let bytes = b"P5\n1 1\n255\n\xff";
        assert_eq!(decode_pnm(bytes).unwrap().as_slice(), &[1.0]);
        let bytes = b"P5\n1 1\n255\n\x00";
        assert_eq!(decode_pnm(bytes).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 2\n# another\n255\n\x00\x40\x80\xff";
        let img = decode_pnm(bytes).unwrap();
        assert_eq!(img.side(), 2);
        assert!((img.as_slice()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ppm_is_interleaved_on_disk_and_planar_in_memory() {
        let bytes = b"P6\n1 1\n255\n\x00\x80\xff";
        let img = decode_pnm(bytes).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.channel(0), &[0.0]);
        assert_eq!(img.channel(2), &[1.0]);
        assert_eq!(encode_pnm(&img), bytes.to_vec());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(decode_pnm(b"P5\n2 3\n255\n").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn quantization_half_step_bound_over_all_bytes() {
        // every byte level b/255 survives a save/load cycle exactly, and the
        // worst case for an arbitrary value is the midpoint between levels
        let mut worst: f64 = 0.0;
        for b in 0..=255u32 {
            for frac in [0.0, 0.25, 0.4999, 0.5001, 0.75] {
                let v = ((f64::from(b) + frac) / 255.0).min(1.0);
                let q = (v * 255.0).round() / 255.0;
                worst = worst.max((q - v).abs());
            }
        }
        assert!(worst <= 1.0 / 510.0 + 1e-15);
    }

    #[test]
    fn save_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(3, 4, (0..48).map(|i| i as f64 / 47.0).collect()).unwrap();
        let path = dir.path().join("x.ppm");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        let m = metrics(&img, &back).unwrap();
        assert!(m.linf <= 1.0 / 510.0 + 1e-12);
    }
}
