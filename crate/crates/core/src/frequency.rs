//! Orthonormal 2-D DCT, low-frequency masks and low-frequency noise.
//!
//! Per channel the forward transform is
//!
//! ```text
//! V[j1][j2] = N(j1) N(j2) sum_{i1,i2} X[i1][i2] cos(pi/d (i1 + 1/2) j1) cos(pi/d (i2 + 1/2) j2)
//! ```
//!
//! with `N(0) = sqrt(1/d)` and `N(j) = sqrt(2/d)` otherwise, which makes the
//! transform an isometry. The production path is row-column separable,
//! `V = C X C^T` with a cached basis matrix `C`; [`naive`] evaluates the
//! double sum directly and is kept as the reference.
//!
//! The low-frequency subspace for a ratio `r` is the top-left `k x k` block of
//! coefficients in every channel, with `k = max(1, round(r * d))`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::tensorimg::{ImageTensor, Shape};

/// DCT coefficients, laid out like the [`ImageTensor`] they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqCoeffs {
    shape: Shape,
    data: Vec<f64>,
}

impl FreqCoeffs {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "expected {} coefficients for {shape}, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, j1: usize, j2: usize) -> f64 {
        let d = self.shape.side;
        self.data[c * d * d + j1 * d + j2]
    }

    pub fn set(&mut self, c: usize, j1: usize, j2: usize, value: f64) {
        let d = self.shape.side;
        self.data[c * d * d + j1 * d + j2] = value;
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copy with every coefficient outside the top-left `k x k` block zeroed.
    pub fn masked(&self, k: usize) -> Self {
        let d = self.shape.side;
        let mut out = self.clone();
        for c in 0..self.shape.channels {
            for j1 in 0..d {
                for j2 in 0..d {
                    if j1 >= k || j2 >= k {
                        out.data[c * d * d + j1 * d + j2] = 0.0;
                    }
                }
            }
        }
        out
    }

    /// Largest absolute coefficient outside the top-left `k x k` block.
    pub fn max_outside_block(&self, k: usize) -> f64 {
        let d = self.shape.side;
        let mut worst: f64 = 0.0;
        for c in 0..self.shape.channels {
            for j1 in 0..d {
                for j2 in 0..d {
                    if j1 >= k || j2 >= k {
                        worst = worst.max(self.data[c * d * d + j1 * d + j2].abs());
                    }
                }
            }
        }
        worst
    }

    /// The `k x k` block of every channel, channel-major then row-major.
    pub fn low_block(&self, k: usize) -> Vec<f64> {
        let d = self.shape.side;
        let mut out = Vec::with_capacity(self.shape.channels * k * k);
        for c in 0..self.shape.channels {
            for j1 in 0..k {
                out.extend_from_slice(&self.data[c * d * d + j1 * d..c * d * d + j1 * d + k]);
            }
        }
        out
    }

    /// Inverse of [`FreqCoeffs::low_block`]: zero coefficients with `block` in the corner.
    pub fn from_low_block(shape: Shape, k: usize, block: &[f64]) -> Result<Self> {
        check_block(shape, k, block)?;
        let d = shape.side;
        let mut out = Self::zeros(shape);
        for c in 0..shape.channels {
            for j1 in 0..k {
                let src = &block[c * k * k + j1 * k..c * k * k + (j1 + 1) * k];
                out.data[c * d * d + j1 * d..c * d * d + j1 * d + k].copy_from_slice(src);
            }
        }
        Ok(out)
    }
}

fn check_block(shape: Shape, k: usize, block: &[f64]) -> Result<()> {
    if k == 0 || k > shape.side {
        return Err(Error::InvalidArgument(format!("cutoff {k} outside 1..={}", shape.side)));
    }
    if block.len() != shape.channels * k * k {
        return Err(Error::Shape(format!(
            "low-frequency block needs {} values, got {}",
            shape.channels * k * k,
            block.len()
        )));
    }
    Ok(())
}

/// Fraction `r` of the per-axis spectrum kept by a low-frequency mask.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct FreqRatio(f64);

impl FreqRatio {
    pub const FULL: FreqRatio = FreqRatio(1.0);

    pub fn new(r: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidArgument(format!("frequency ratio {r} not in (0, 1]")));
        }
        Ok(Self(r))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Block size `k = max(1, round(r * d))` for an image of side `d`.
    pub fn cutoff(self, side: usize) -> usize {
        ((self.0 * side as f64).round() as usize).clamp(1, side)
    }
}

impl TryFrom<f64> for FreqRatio {
    type Error = Error;
    fn try_from(r: f64) -> Result<Self> {
        Self::new(r)
    }
}

impl From<FreqRatio> for f64 {
    fn from(r: FreqRatio) -> f64 {
        r.0
    }
}

/// Cached orthonormal basis: `basis[j * d + i] = N(j) cos(pi/d (i + 1/2) j)`.
#[derive(Debug)]
pub struct DctPlan {
    side: usize,
    basis: Vec<f64>,
}

impl DctPlan {
    pub fn new(side: usize) -> Self {
        let d = side as f64;
        let mut basis = vec![0.0; side * side];
        for j in 0..side {
            let norm = if j == 0 { (1.0 / d).sqrt() } else { (2.0 / d).sqrt() };
            for i in 0..side {
                basis[j * side + i] = norm * (PI / d * (i as f64 + 0.5) * j as f64).cos();
            }
        }
        Self { side, basis }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// `out = C * plane * C^T` for one channel.
    fn forward_plane(&self, plane: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.side;
        let c = &self.basis;
        // scratch[j1][i2] = sum_i1 C[j1][i1] X[i1][i2]
        scratch.fill(0.0);
        for j1 in 0..d {
            let row = &mut scratch[j1 * d..(j1 + 1) * d];
            for i1 in 0..d {
                let w = c[j1 * d + i1];
                let src = &plane[i1 * d..(i1 + 1) * d];
                for (r, s) in row.iter_mut().zip(src) {
                    *r += w * s;
                }
            }
        }
        // out[j1][j2] = sum_i2 scratch[j1][i2] C[j2][i2]
        for j1 in 0..d {
            let row = &scratch[j1 * d..(j1 + 1) * d];
            for j2 in 0..d {
                let basis_row = &c[j2 * d..(j2 + 1) * d];
                out[j1 * d + j2] = row.iter().zip(basis_row).map(|(a, b)| a * b).sum();
            }
        }
    }

    /// `out = C^T * block * C` where only the leading `k x k` block of the
    /// coefficients is non-zero; `block` is `k x k` row-major.
    fn inverse_block(&self, block: &[f64], k: usize, out: &mut [f64], scratch: &mut [f64]) {
        let d = self.side;
        let c = &self.basis;
        // scratch[j1][i2] = sum_{j2<k} V[j1][j2] C[j2][i2]
        let scratch = &mut scratch[..k * d];
        scratch.fill(0.0);
        for j1 in 0..k {
            let row = &mut scratch[j1 * d..(j1 + 1) * d];
            for j2 in 0..k {
                let v = block[j1 * k + j2];
                if v == 0.0 {
                    continue;
                }
                for (r, b) in row.iter_mut().zip(&c[j2 * d..(j2 + 1) * d]) {
                    *r += v * b;
                }
            }
        }
        // out[i1][i2] = sum_{j1<k} C[j1][i1] scratch[j1][i2]
        out.fill(0.0);
        for j1 in 0..k {
            let src = &scratch[j1 * d..(j1 + 1) * d];
            for i1 in 0..d {
                let w = c[j1 * d + i1];
                let dst = &mut out[i1 * d..(i1 + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }

    pub fn dct2(&self, x: &ImageTensor) -> FreqCoeffs {
        let shape = x.shape();
        assert_eq!(shape.side, self.side, "plan side does not match image");
        let n = shape.plane_len();
        let mut data = vec![0.0; shape.len()];
        let mut scratch = vec![0.0; n];
        for c in 0..shape.channels {
            self.forward_plane(x.channel(c), &mut data[c * n..(c + 1) * n], &mut scratch);
        }
        FreqCoeffs { shape, data }
    }

    pub fn idct2(&self, v: &FreqCoeffs) -> ImageTensor {
        let block = v.low_block(self.side);
        self.idct2_low(v.shape(), self.side, &block)
    }

    /// Inverse transform of coefficients that are zero outside the `k x k` block.
    pub fn idct2_low(&self, shape: Shape, k: usize, block: &[f64]) -> ImageTensor {
        assert_eq!(shape.side, self.side, "plan side does not match shape");
        let n = shape.plane_len();
        let mut data = vec![0.0; shape.len()];
        let mut scratch = vec![0.0; n];
        for c in 0..shape.channels {
            self.inverse_block(
                &block[c * k * k..(c + 1) * k * k],
                k,
                &mut data[c * n..(c + 1) * n],
                &mut scratch,
            );
        }
        ImageTensor::from_raw(shape, data)
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<DctPlan>>> = RefCell::new(HashMap::new());
}

/// Shared per-thread plan for side `d`.
pub fn plan(side: usize) -> Rc<DctPlan> {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry(side)
            .or_insert_with(|| Rc::new(DctPlan::new(side)))
            .clone()
    })
}

/// Channel-wise orthonormal 2-D DCT.
pub fn dct2(x: &ImageTensor) -> FreqCoeffs {
    plan(x.side()).dct2(x)
}

/// Channel-wise inverse DCT. The result is not range-clipped.
pub fn idct2(v: &FreqCoeffs) -> ImageTensor {
    plan(v.shape().side).idct2(v)
}

/// Pixel-space image of a `k x k` low-frequency coefficient block.
pub fn idct2_low(shape: Shape, k: usize, block: &[f64]) -> Result<ImageTensor> {
    check_block(shape, k, block)?;
    Ok(plan(shape.side).idct2_low(shape, k, block))
}

/// Distribution of the in-block coefficients for [`sample_low_freq`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseDist {
    Gaussian { sigma: f64 },
    Uniform { low: f64, high: f64 },
}

/// Draws a sample from `idct_r(dist)`: i.i.d. coefficients on the `k x k`
/// block of each channel, zeros elsewhere, mapped back to pixel space.
pub fn sample_low_freq<R: Rng + ?Sized>(
    rng: &mut R,
    shape: Shape,
    ratio: FreqRatio,
    dist: NoiseDist,
) -> ImageTensor {
    let k = ratio.cutoff(shape.side);
    let count = shape.channels * k * k;
    let block: Vec<f64> = match dist {
        NoiseDist::Gaussian { sigma } => (0..count)
            .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect(),
        NoiseDist::Uniform { low, high } => {
            let u = Uniform::new(low, high).expect("uniform bounds must satisfy low < high");
            (0..count).map(|_| u.sample(rng)).collect()
        }
    };
    plan(shape.side).idct2_low(shape, k, &block)
}

/// Uniform sample from the sphere of radius `radius` inside the
/// low-frequency subspace, returned in pixel space.
pub fn sample_sphere_low_freq<R: Rng + ?Sized>(
    rng: &mut R,
    shape: Shape,
    ratio: FreqRatio,
    radius: f64,
) -> Result<ImageTensor> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("sphere radius must be positive, got {radius}")));
    }
    let k = ratio.cutoff(shape.side);
    let count = shape.channels * k * k;
    let mut block: Vec<f64> = (0..count).map(|_| StandardNormal.sample(rng)).collect();
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut block {
        *v *= radius / norm;
    }
    Ok(plan(shape.side).idct2_low(shape, k, &block))
}

/// Pixel-space gradient restricted to the low-frequency subspace:
/// `idct2(mask_k(dct2(g)))`.
pub fn project_gradient(g: &ImageTensor, ratio: FreqRatio) -> ImageTensor {
    let shape = g.shape();
    let k = ratio.cutoff(shape.side);
    let p = plan(shape.side);
    let block = p.dct2(g).low_block(k);
    p.idct2_low(shape, k, &block)
}

/// Direct evaluation of the transform double sums, `O(d^4)` per channel.
pub mod naive {
    use super::*;

    fn norm(j: usize, d: f64) -> f64 {
        if j == 0 {
            (1.0 / d).sqrt()
        } else {
            (2.0 / d).sqrt()
        }
    }

    fn phi(i: usize, j: usize, d: f64) -> f64 {
        (PI / d * (i as f64 + 0.5) * j as f64).cos()
    }

    pub fn dct2(x: &ImageTensor) -> FreqCoeffs {
        let shape = x.shape();
        let n = shape.side;
        let d = n as f64;
        let mut out = FreqCoeffs::zeros(shape);
        for c in 0..shape.channels {
            for j1 in 0..n {
                for j2 in 0..n {
                    let mut acc = 0.0;
                    for i1 in 0..n {
                        for i2 in 0..n {
                            acc += x.get(c, i1, i2) * phi(i1, j1, d) * phi(i2, j2, d);
                        }
                    }
                    out.set(c, j1, j2, norm(j1, d) * norm(j2, d) * acc);
                }
            }
        }
        out
    }

    pub fn idct2(v: &FreqCoeffs) -> ImageTensor {
        let shape = v.shape();
        let n = shape.side;
        let d = n as f64;
        let mut out = ImageTensor::zeros(shape);
        for c in 0..shape.channels {
            for i1 in 0..n {
                for i2 in 0..n {
                    let mut acc = 0.0;
                    for j1 in 0..n {
                        for j2 in 0..n {
                            acc += norm(j1, d)
                                * norm(j2, d)
                                * v.get(c, j1, j2)
                                * phi(i1, j1, d)
                                * phi(i2, j2, d);
                        }
                    }
                    out.set(c, i1, i2, acc);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, shape: Shape) -> ImageTensor {
        ImageTensor::from_raw(shape, (0..shape.len()).map(|_| rng.random::<f64>()).collect())
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn one_point_transform_is_identity() {
        let x = ImageTensor::new(1, 1, vec![0.37]).unwrap();
        assert!((dct2(&x).as_slice()[0] - 0.37).abs() < 1e-15);
    }

    #[test]
    fn constant_image_has_only_dc() {
        for d in [2, 5, 8] {
            let shape = Shape::new(3, d).unwrap();
            let v = dct2(&ImageTensor::filled(shape, 0.3));
            for c in 0..3 {
                assert!((v.get(c, 0, 0) - 0.3 * d as f64).abs() < 1e-12);
            }
            assert!(v.max_outside_block(1) < 1e-12);
        }
    }

    #[test]
    fn unit_dc_coefficient_gives_constant_image() {
        let d = 6;
        let shape = Shape::new(1, d).unwrap();
        let mut v = FreqCoeffs::zeros(shape);
        v.set(0, 0, 0, d as f64);
        let x = idct2(&v);
        assert!(x.as_slice().iter().all(|p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn two_by_two_impulse_matches_double_sum() {
        // X = [[1,0],[0,0]] picks out N(j1) N(j2) cos(pi/4 j1) cos(pi/4 j2);
        // with N(0) = sqrt(1/2), N(1) = 1 every entry is 1/2
        let x = ImageTensor::new(1, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = dct2(&x);
        assert!(max_abs_diff(v.as_slice(), &[0.5; 4]) < 1e-12);
        assert!(max_abs_diff(v.as_slice(), naive::dct2(&x).as_slice()) < 1e-12);
    }

    #[test]
    fn cosine_stripe_matches_reference() {
        let shape = Shape::new(1, 4).unwrap();
        let mut v = FreqCoeffs::zeros(shape);
        v.set(0, 1, 0, 1.0);
        let x = idct2(&v);
        assert!(max_abs_diff(x.as_slice(), naive::idct2(&v).as_slice()) < 1e-12);
        for i1 in 0..4 {
            // N(1) N(0) cos(pi/4 (i1 + 1/2)), constant along each row
            let expected = (2.0f64 / 4.0).sqrt() * (1.0f64 / 4.0).sqrt() * (PI / 4.0 * (i1 as f64 + 0.5)).cos();
            for i2 in 0..4 {
                assert!((x.get(0, i1, i2) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn separable_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [1, 2, 3, 4, 7, 8] {
            let shape = Shape::new(3, d).unwrap();
            let x = random_image(&mut rng, shape);
            let fast = dct2(&x);
            let slow = naive::dct2(&x);
            assert!(max_abs_diff(fast.as_slice(), slow.as_slice()) < 1e-9);
            assert!(max_abs_diff(idct2(&fast).as_slice(), naive::idct2(&slow).as_slice()) < 1e-9);
        }
    }

    #[test]
    fn cutoff_rounding() {
        let r = |v| FreqRatio::new(v).unwrap();
        assert_eq!(r(1.0).cutoff(28), 28);
        assert_eq!(r(1.0 / 7.0).cutoff(28), 4);
        assert_eq!(r(1.0 / 32.0).cutoff(28), 1);
        assert_eq!(r(0.5).cutoff(4), 2);
        assert_eq!(r(0.25).cutoff(32), 8);
        assert!(FreqRatio::new(0.0).is_err());
        assert!(FreqRatio::new(1.5).is_err());
    }

    #[test]
    fn low_frequency_sample_is_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = Shape::new(1, 4).unwrap();
        let ratio = FreqRatio::new(0.5).unwrap();
        let eta = sample_low_freq(&mut rng, shape, ratio, NoiseDist::Uniform { low: -1.0, high: 1.0 });
        let v = dct2(&eta);
        for j1 in 0..4 {
            for j2 in 0..4 {
                if j1 >= 2 || j2 >= 2 {
                    assert!(v.get(0, j1, j2).abs() <= 1e-12);
                }
            }
        }
        assert!(v.get(0, 0, 0).abs() > 0.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let shape = Shape::new(3, 8).unwrap();
        let ratio = FreqRatio::new(0.25).unwrap();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            sample_low_freq(&mut rng, shape, ratio, NoiseDist::Gaussian { sigma: 1.0 })
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn sphere_sample_has_exact_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = Shape::new(3, 16).unwrap();
        for r in [1.0, 0.5, 0.125] {
            let eta = sample_sphere_low_freq(&mut rng, shape, FreqRatio::new(r).unwrap(), 3.5).unwrap();
            assert!((eta.l2_norm() - 3.5).abs() <= 1e-6 * 3.5);
        }
        assert!(sample_sphere_low_freq(&mut rng, shape, FreqRatio::FULL, 0.0).is_err());
    }

    #[test]
    fn imagenet_scale_rmse() {
        // rho = 20 on a 3x224x224 image
        let rmse = 20.0 / (3f64.sqrt() * 224.0);
        assert!((rmse - 0.0515).abs() < 5e-5);
    }

    #[test]
    fn full_ratio_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_image(&mut rng, Shape::new(3, 8).unwrap());
        let p = project_gradient(&g, FreqRatio::FULL);
        assert!(max_abs_diff(p.as_slice(), g.as_slice()) < 1e-12);
    }

    #[test]
    fn projection_fixes_low_frequency_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = Shape::new(3, 8).unwrap();
        let ratio = FreqRatio::new(0.25).unwrap();
        let g = sample_low_freq(&mut rng, shape, ratio, NoiseDist::Gaussian { sigma: 1.0 });
        let p = project_gradient(&g, ratio);
        assert!(max_abs_diff(p.as_slice(), g.as_slice()) < 1e-12);
    }

    #[test]
    fn one_hot_projection_matches_reference_mask() {
        let shape = Shape::new(1, 4).unwrap();
        let ratio = FreqRatio::new(0.5).unwrap();
        let mut g = ImageTensor::zeros(shape);
        g.set(0, 1, 2, 1.0);
        let reference = naive::idct2(&naive::dct2(&g).masked(2));
        let p = project_gradient(&g, ratio);
        assert!(max_abs_diff(p.as_slice(), reference.as_slice()) < 1e-12);
    }

    #[test]
    fn block_roundtrip() {
        let shape = Shape::new(3, 5).unwrap();
        let block: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let v = FreqCoeffs::from_low_block(shape, 3, &block).unwrap();
        assert_eq!(v.low_block(3), block);
        assert!(FreqCoeffs::from_low_block(shape, 3, &block[..5]).is_err());
    }
}
