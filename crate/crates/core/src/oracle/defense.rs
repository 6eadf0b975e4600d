//! Input-transformation defenses applied in front of a model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{plan, FreqCoeffs};
use crate::tensorimg::{ImageTensor, Shape};

/// Standard JPEG luminance quantization table (quality 50), row-major.
pub const LUMINANCE_QUANT_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseTransform {
    #[default]
    Identity,
    /// Quantize each element to `2^bits` evenly spaced levels.
    BitDepth { bits: u32 },
    /// Block DCT quantization with the luminance table at the given quality,
    /// applied to every channel. No chroma subsampling or entropy coding.
    Jpeg { quality: u32 },
}

impl DefenseTransform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseTransform::BitDepth { bits } if !(1..=16).contains(&bits) => {
                Err(Error::InvalidArgument(format!("bit depth {bits} not in 1..=16")))
            }
            DefenseTransform::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(Error::InvalidArgument(format!("jpeg quality {quality} not in 1..=100")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, img: &ImageTensor) -> Result<ImageTensor> {
        match *self {
            DefenseTransform::Identity => Ok(img.clone()),
            DefenseTransform::BitDepth { bits } => Ok(reduce_bit_depth(img, bits)),
            DefenseTransform::Jpeg { quality } => jpeg_roundtrip(img, quality),
        }
    }
}

pub fn reduce_bit_depth(img: &ImageTensor, bits: u32) -> ImageTensor {
    let levels = f64::from((1u32 << bits) - 1);
    img.map(|v| (v * levels).round() / levels)
}

/// IJG quality scaling of the luminance table, entries clamped to `[1, 255]`.
pub fn scaled_quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &base) in out.iter_mut().zip(LUMINANCE_QUANT_TABLE.iter()) {
        let entry = (u32::from(base) * scale + 50) / 100;
        *o = f64::from(entry.clamp(1, 255));
    }
    out
}

/// Lossy part of a baseline JPEG round trip on the 0..255 scale: level shift,
/// 8x8 orthonormal DCT, quantize, dequantize, inverse DCT, clip.
pub fn jpeg_roundtrip(img: &ImageTensor, quality: u32) -> Result<ImageTensor> {
    let shape = img.shape();
    let d = shape.side;
    if !d.is_multiple_of(BLOCK) {
        return Err(Error::Shape(format!("jpeg defense needs side divisible by 8, got {d}")));
    }
    let table = scaled_quant_table(quality);
    let block_shape = Shape { channels: 1, side: BLOCK };
    let p = plan(BLOCK);
    let mut out = img.clone();
    let mut block = vec![0.0; BLOCK * BLOCK];
    for c in 0..shape.channels {
        for by in (0..d).step_by(BLOCK) {
            for bx in (0..d).step_by(BLOCK) {
                for r in 0..BLOCK {
                    for col in 0..BLOCK {
                        block[r * BLOCK + col] = img.get(c, by + r, bx + col) * 255.0 - 128.0;
                    }
                }
                let tile = ImageTensor::from_raw(block_shape, block.clone());
                let coeffs = p.dct2(&tile);
                let quantized: Vec<f64> = coeffs
                    .as_slice()
                    .iter()
                    .zip(table.iter())
                    .map(|(v, q)| (v / q).round() * q)
                    .collect();
                let restored = p.idct2(&FreqCoeffs::new(block_shape, quantized)?);
                for r in 0..BLOCK {
                    for col in 0..BLOCK {
                        let v = (restored.get(0, r, col) + 128.0) / 255.0;
                        out.set(c, by + r, bx + col, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(out)
}
