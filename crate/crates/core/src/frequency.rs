//! Gaussian high-pass filtering.
//!
//! The high-frequency map of an image is `x - blur(x)`, where the blur is a
//! normalized `(2r+1) x (2r+1)` Gaussian applied per channel. The blur is
//! separable, so it runs as two 1-D passes; the adjoint of both passes is
//! provided so the operator can sit inside a training graph.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fundus::{FundusImage, RangeTag};
use crate::nn::{cast, Real};

/// Gaussian kernel size and width, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernelSpec {
    pub radius: usize,
    pub sigma: f64,
}

impl Default for GaussianKernelSpec {
    /// 21x21 kernel with sigma 5 for 256x256 inputs.
    fn default() -> Self {
        GaussianKernelSpec {
            radius: 10,
            sigma: 5.0,
        }
    }
}

impl GaussianKernelSpec {
    pub fn new(radius: usize, sigma: f64) -> Result<Self> {
        let spec = GaussianKernelSpec { radius, sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::Config(format!(
                "kernel radius must be >= 1, got {}",
                self.radius
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "kernel sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Kernel side length `2r + 1`.
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Rescale radius and sigma proportionally from `from_side` to `to_side` pixels.
    pub fn scaled(&self, from_side: usize, to_side: usize) -> Self {
        let f = to_side as f64 / from_side as f64;
        GaussianKernelSpec {
            radius: ((self.radius as f64 * f).round() as usize).max(1),
            sigma: self.sigma * f,
        }
    }

    /// Normalized 1-D weights; the 2-D kernel is their outer product.
    pub fn weights_1d(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let r = self.radius as i64;
        let denom = 2.0 * self.sigma * self.sigma;
        let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / denom).exp()).collect();
        let total: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|w| w / total).collect())
    }
}

/// Dense 2-D Gaussian weight grid, normalized to sum to one.
pub fn gaussian_kernel(spec: &GaussianKernelSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let r = spec.radius as i64;
    let side = spec.side();
    let denom = 2.0 * spec.sigma * spec.sigma;
    let raw = Array2::from_shape_fn((side, side), |(a, b)| {
        let (i, j) = (a as i64 - r, b as i64 - r);
        (-((i * i + j * j) as f64) / denom).exp()
    });
    let total = raw.sum();
    Ok(raw / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Mirror without repeating the edge sample (`-1 -> 1`).
    #[default]
    Reflect,
    Zero,
}

impl Padding {
    #[inline]
    fn index(self, j: isize, n: usize) -> Option<usize> {
        let n = n as isize;
        match self {
            Padding::Reflect => {
                let k = if j < 0 {
                    -j
                } else if j >= n {
                    2 * (n - 1) - j
                } else {
                    j
                };
                Some(k as usize)
            }
            Padding::Zero => (0..n).contains(&j).then_some(j as usize),
        }
    }
}

/// Separable Gaussian blur and the high-pass residual built on it.
#[derive(Debug, Clone)]
pub struct GaussianFilter<T> {
    pub spec: GaussianKernelSpec,
    pub padding: Padding,
    weights: Vec<T>,
}

impl<T: Real> GaussianFilter<T> {
    pub fn new(spec: GaussianKernelSpec, padding: Padding) -> Result<Self> {
        let weights = spec.weights_1d()?.into_iter().map(cast).collect();
        Ok(GaussianFilter {
            spec,
            padding,
            weights,
        })
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        let side = self.spec.side();
        if h < side || w < side {
            return Err(Error::Size(format!(
                "image {h}x{w} is smaller than the {side}x{side} kernel"
            )));
        }
        Ok(())
    }

    fn rows(&self, src: &[T], dst: &mut [T], w: usize, adjoint: bool) {
        let r = self.spec.radius as isize;
        for (s, d) in src.chunks(w).zip(dst.chunks_mut(w)) {
            for i in 0..w {
                for (k, &wk) in self.weights.iter().enumerate() {
                    if let Some(j) = self.padding.index(i as isize + k as isize - r, w) {
                        if adjoint {
                            d[j] += wk * s[i];
                        } else {
                            d[i] += wk * s[j];
                        }
                    }
                }
            }
        }
    }

    fn cols(&self, src: &[T], dst: &mut [T], h: usize, w: usize, adjoint: bool) {
        let r = self.spec.radius as isize;
        for i in 0..h {
            for (k, &wk) in self.weights.iter().enumerate() {
                if let Some(j) = self.padding.index(i as isize + k as isize - r, h) {
                    let (from, to) = if adjoint { (i, j) } else { (j, i) };
                    let s = &src[from * w..(from + 1) * w];
                    let d = &mut dst[to * w..(to + 1) * w];
                    d.iter_mut().zip(s).for_each(|(d, &s)| *d += wk * s);
                }
            }
        }
    }

    fn separable(&self, x: &Array4<T>, adjoint: bool) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        self.check(h, w)?;
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut tmp = vec![T::zero(); h * w];
        let mut out = Array4::<T>::zeros((n, c, h, w));
        let dst = out.as_slice_mut().expect("standard layout");
        for (s, d) in src.chunks(h * w).zip(dst.chunks_mut(h * w)) {
            tmp.iter_mut().for_each(|v| *v = T::zero());
            self.rows(s, &mut tmp, w, adjoint);
            self.cols(&tmp, d, h, w, adjoint);
        }
        Ok(out)
    }

    /// Per-channel Gaussian blur of an `(N, C, H, W)` tensor.
    pub fn blur(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.separable(x, false)
    }

    /// Transpose of [`GaussianFilter::blur`] (differs from it only near borders).
    pub fn blur_adjoint(&self, g: &Array4<T>) -> Result<Array4<T>> {
        self.separable(g, true)
    }

    /// `x - blur(x)`.
    pub fn highpass(&self, x: &Array4<T>) -> Result<Array4<T>> {
        Ok(x - &self.blur(x)?)
    }

    /// Vector-Jacobian product of [`GaussianFilter::highpass`].
    pub fn highpass_adjoint(&self, g: &Array4<T>) -> Result<Array4<T>> {
        Ok(g - &self.blur_adjoint(g)?)
    }

    pub fn blur_image(&self, x: ArrayView3<T>) -> Result<Array3<T>> {
        let out = self.blur(&x.to_owned().insert_axis(Axis(0)))?;
        Ok(out.index_axis_move(Axis(0), 0))
    }
}

/// High-frequency map of an image, in the value space of its source.
#[derive(Debug, Clone, PartialEq)]
pub struct HighFreqMap {
    pub values: Array3<f32>,
    pub source_range: RangeTag,
}

/// High-pass residual of a raw `(C, H, W)` raster.
pub fn highpass(
    x: ArrayView3<f32>,
    source_range: RangeTag,
    spec: &GaussianKernelSpec,
    padding: Padding,
) -> Result<HighFreqMap> {
    let filter = GaussianFilter::<f32>::new(*spec, padding)?;
    let batch = x.to_owned().insert_axis(Axis(0));
    let values = filter.highpass(&batch)?.index_axis_move(Axis(0), 0);
    Ok(HighFreqMap {
        values,
        source_range,
    })
}

/// High-pass residual of a fundus image in its own range.
pub fn highpass_image(
    img: &FundusImage,
    spec: &GaussianKernelSpec,
    padding: Padding,
) -> Result<HighFreqMap> {
    highpass(img.pixels.view(), img.range, spec, padding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense convolution with explicit reflect indexing, independent of the
    /// separable implementation.
    fn dense_blur(x: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
        let (h, w) = x.dim();
        let r = (kernel.nrows() / 2) as isize;
        let refl = |j: isize, n: isize| -> usize {
            (if j < 0 {
                -j
            } else if j >= n {
                2 * (n - 1) - j
            } else {
                j
            }) as usize
        };
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut acc = 0.0;
            for a in -r..=r {
                for b in -r..=r {
                    let yi = refl(i as isize + a, h as isize);
                    let xj = refl(j as isize + b, w as isize);
                    acc += kernel[[(a + r) as usize, (b + r) as usize]] * x[[yi, xj]];
                }
            }
            acc
        })
    }

    fn random_planes(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, c, h, w), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn kernel_sums_to_one() {
        for (r, s) in [(1, 0.3), (3, 1.0), (10, 5.0), (7, 40.0)] {
            let k = gaussian_kernel(&GaussianKernelSpec::new(r, s).unwrap()).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_kernel_limit() {
        let k = gaussian_kernel(&GaussianKernelSpec::new(1, 1e6).unwrap()).unwrap();
        for &v in k.iter() {
            assert!((v - 1.0 / 9.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_sigma_center_weight() {
        // scalar oracle: 1 / (1 + 4 e^{-1/2} + 4 e^{-1})
        let oracle = 1.0 / (1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp());
        let k = gaussian_kernel(&GaussianKernelSpec::new(1, 1.0).unwrap()).unwrap();
        assert!((k[[1, 1]] - oracle).abs() < 1e-12);
        assert!((k[[1, 1]] - 0.2042).abs() < 1e-4);
    }

    #[test]
    fn kernel_symmetries() {
        let k = gaussian_kernel(&GaussianKernelSpec::new(4, 1.7).unwrap()).unwrap();
        let n = k.nrows();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(k[[i, j]], k[[j, i]]);
                assert!((k[[i, j]] - k[[n - 1 - i, j]]).abs() < 1e-18);
                assert!((k[[i, j]] - k[[i, n - 1 - j]]).abs() < 1e-18);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(GaussianKernelSpec::new(0, 1.0), Err(Error::Config(_))));
        assert!(matches!(GaussianKernelSpec::new(2, 0.0), Err(Error::Config(_))));
        assert!(matches!(GaussianKernelSpec::new(2, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn constant_image_has_zero_response() {
        let f = GaussianFilter::<f64>::new(GaussianKernelSpec::default(), Padding::Reflect).unwrap();
        let x = Array4::from_elem((1, 3, 32, 40), 0.37);
        let hf = f.highpass(&x).unwrap();
        assert!(hf.iter().all(|v| v.abs() < 1e-15));
        let f32f = GaussianFilter::<f32>::new(GaussianKernelSpec::default(), Padding::Reflect).unwrap();
        let hf = f32f.highpass(&Array4::from_elem((1, 3, 32, 32), -0.8f32)).unwrap();
        assert!(hf.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn centered_impulse() {
        let spec = GaussianKernelSpec::new(1, 1.0).unwrap();
        let f = GaussianFilter::<f64>::new(spec, Padding::Reflect).unwrap();
        let mut x = Array4::zeros((1, 1, 33, 33));
        x[[0, 0, 16, 16]] = 1.0;
        let hf = f.highpass(&x).unwrap();
        // oracle: dense convolution with the 2-D kernel grid
        let dense = dense_blur(
            &x.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned(),
            &gaussian_kernel(&spec).unwrap(),
        );
        assert!((hf[[0, 0, 16, 16]] - (1.0 - dense[[16, 16]])).abs() < 1e-12);
        assert!((hf[[0, 0, 16, 16]] - 0.7958).abs() < 1e-4);
    }

    #[test]
    fn separable_matches_dense_with_reflect_borders() {
        let spec = GaussianKernelSpec::new(3, 1.3).unwrap();
        let f = GaussianFilter::<f64>::new(spec, Padding::Reflect).unwrap();
        let x = random_planes(1, 1, 9, 12, 3);
        let fast = f.blur(&x).unwrap();
        let dense = dense_blur(
            &x.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned(),
            &gaussian_kernel(&spec).unwrap(),
        );
        for ((i, j), v) in dense.indexed_iter() {
            assert!((fast[[0, 0, i, j]] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn too_small_image_is_a_size_error() {
        let f = GaussianFilter::<f32>::new(GaussianKernelSpec::default(), Padding::Reflect).unwrap();
        let x = Array4::zeros((1, 3, 20, 64));
        assert!(matches!(f.highpass(&x), Err(Error::Size(_))));
    }

    #[test]
    fn sum_identity_holds() {
        let f = GaussianFilter::<f64>::new(GaussianKernelSpec::new(2, 1.1).unwrap(), Padding::Reflect)
            .unwrap();
        let x = random_planes(1, 3, 16, 16, 5);
        let hf = f.highpass(&x).unwrap();
        let blurred = f.blur(&x).unwrap();
        assert!((hf.sum() - (x.sum() - blurred.sum())).abs() < 1e-10);
    }

    #[test]
    fn recomputation_is_bit_identical() {
        let f = GaussianFilter::<f32>::new(GaussianKernelSpec::new(4, 2.0).unwrap(), Padding::Reflect)
            .unwrap();
        let x = random_planes(2, 3, 16, 16, 6).mapv(|v| v as f32);
        assert_eq!(f.highpass(&x).unwrap(), f.highpass(&x).unwrap());
    }

    #[test]
    fn adjoint_identity() {
        for padding in [Padding::Reflect, Padding::Zero] {
            let f = GaussianFilter::<f64>::new(GaussianKernelSpec::new(3, 1.5).unwrap(), padding)
                .unwrap();
            let x = random_planes(2, 2, 11, 13, 7);
            let g = random_planes(2, 2, 11, 13, 8);
            let lhs = (&f.highpass(&x).unwrap() * &g).sum();
            let rhs = (&f.highpass_adjoint(&g).unwrap() * &x).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    /// Central differences of s(F(x)) = sum(tanh(F(x)) * probe) on an 8x8 plane.
    #[test]
    fn gradient_matches_finite_differences() {
        let f = GaussianFilter::<f64>::new(GaussianKernelSpec::new(1, 1.0).unwrap(), Padding::Reflect)
            .unwrap();
        let x = random_planes(1, 1, 8, 8, 9);
        let probe = random_planes(1, 1, 8, 8, 10);
        let functional = |x: &Array4<f64>| (f.highpass(x).unwrap().mapv(f64::tanh) * &probe).sum();
        let hf = f.highpass(&x).unwrap();
        let upstream = &probe * &hf.mapv(|v| 1.0 - v.tanh().powi(2));
        let analytic = f.highpass_adjoint(&upstream).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            for j in 0..8 {
                let mut xp = x.clone();
                xp[[0, 0, i, j]] += h;
                let up = functional(&xp);
                xp[[0, 0, i, j]] -= 2.0 * h;
                let down = functional(&xp);
                let fd = (up - down) / (2.0 * h);
                let a = analytic[[0, 0, i, j]];
                assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()) + 1e-9, "{fd} vs {a}");
            }
        }
    }

    #[test]
    fn scaling_is_proportional() {
        let s = GaussianKernelSpec::default().scaled(256, 512);
        assert_eq!(s.radius, 20);
        assert_eq!(s.sigma, 10.0);
        let s = GaussianKernelSpec::default().scaled(256, 128);
        assert_eq!((s.radius, s.sigma), (5, 2.5));
    }

    proptest! {
        #[test]
        fn highpass_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let f = GaussianFilter::<f64>::new(GaussianKernelSpec::new(2, 1.2).unwrap(), Padding::Reflect).unwrap();
            let x = random_planes(1, 3, 12, 12, seed);
            let y = random_planes(1, 3, 12, 12, seed + 1);
            let lhs = f.highpass(&(&x * a + &y * b)).unwrap();
            let rhs = f.highpass(&x).unwrap() * a + f.highpass(&y).unwrap() * b;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-6);
            }
        }
    }
}
