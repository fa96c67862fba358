use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;

use super::{join, Param, Parameters, Real};
use crate::error::{Error, Result};

/// Square kernel geometry shared by convolutions and their transposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Down-sampling geometry used throughout the network: 4x4, stride 2, pad 1.
    pub const DOWN: ConvGeometry = ConvGeometry {
        kernel: 4,
        stride: 2,
        padding: 1,
    };

    pub fn out_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel {
            None
        } else {
            Some((padded - self.kernel) / self.stride + 1)
        }
    }

    pub fn transposed_out_len(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.padding
    }

    /// Range of output positions whose tap `k` lands inside `[0, n)`.
    #[inline]
    fn valid_range(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // i = o*s + off must satisfy 0 <= i < n
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let last = n as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(out as isize) };
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

/// Unfold a `(c, h, w)` image into `(c*k*k, ho*wo)` patch columns.
pub fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let k = g.kernel;
    let plane = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * plane];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, w, wo);
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let src_row = &src[iy * w..(iy + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for ox in ox_lo..ox_hi {
                        dst_row[ox] = src_row[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `(c, h, w)` image.
pub fn col2im<T: Real>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    g: ConvGeometry,
    (ho, wo): (usize, usize),
    out: &mut [T],
) {
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, h, ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, w, wo);
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let dst_row = &mut dst[iy * w..(iy + 1) * w];
                    let src_row = &src[oy * wo..(oy + 1) * wo];
                    for ox in ox_lo..ox_hi {
                        dst_row[ox * g.stride + kx - g.padding] += src_row[ox];
                    }
                }
            }
        }
    }
}

/// Strided 2-D convolution with bias. Weight layout `(out, in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        Conv2d {
            weight: Param::normal(&[out_channels, in_channels, k, k], 0.0, init_std, rng),
            bias: Param::zeros(&[out_channels]),
            geometry,
            in_channels,
            out_channels,
        }
    }

    fn k2(&self) -> usize {
        self.in_channels * self.geometry.kernel * self.geometry.kernel
    }

    pub fn output_side(&self, side: usize) -> Option<usize> {
        self.geometry.out_len(side)
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = match (self.geometry.out_len(h), self.geometry.out_len(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Shape(format!(
                    "input {h}x{w} smaller than kernel {}",
                    self.geometry.kernel
                )))
            }
        };
        let k2 = self.k2();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k2))
            .expect("contiguous weight");
        let x = x.as_standard_layout();
        let mut out = Array4::zeros((n, self.out_channels, ho, wo));
        for b in 0..n {
            let xb = x.index_axis(Axis(0), b);
            let cols = im2col(xb.as_slice().expect("standard"), (c, h, w), self.geometry, (ho, wo));
            let cols = ArrayView2::from_shape((k2, ho * wo), &cols).expect("cols");
            let mut ob = out
                .index_axis_mut(Axis(0), b)
                .into_shape_with_order((self.out_channels, ho * wo))
                .expect("contiguous output");
            general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut ob);
            for (mut row, &bias) in ob.outer_iter_mut().zip(self.bias.value.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
        }
        Ok(out)
    }

    /// Accumulate parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Array4<T>, dy: &Array4<T>, need_dx: bool) -> Option<Array4<T>> {
        let (n, c, h, w) = x.dim();
        let (_, o, ho, wo) = dy.dim();
        let k2 = self.k2();
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((o, k2))
            .expect("contiguous weight")
            .to_owned();
        let mut dx = need_dx.then(|| Array4::<T>::zeros((n, c, h, w)));
        for b in 0..n {
            let xb = x.index_axis(Axis(0), b);
            let cols = im2col(xb.as_slice().expect("standard"), (c, h, w), self.geometry, (ho, wo));
            let cols = ArrayView2::from_shape((k2, ho * wo), &cols).expect("cols");
            let dyb = dy
                .index_axis(Axis(0), b)
                .into_shape_with_order((o, ho * wo))
                .expect("contiguous grad");
            {
                let mut dw2 = self
                    .weight
                    .grad
                    .view_mut()
                    .into_shape_with_order((o, k2))
                    .expect("contiguous weight grad");
                general_mat_mul(T::one(), &dyb, &cols.t(), T::one(), &mut dw2);
            }
            for (g, row) in self.bias.grad.iter_mut().zip(dyb.outer_iter()) {
                *g += row.sum();
            }
            if let Some(dx) = dx.as_mut() {
                let mut dcols = Array2::<T>::zeros((k2, ho * wo));
                general_mat_mul(T::one(), &w2.t(), &dyb, T::zero(), &mut dcols);
                let mut dxb = dx.index_axis_mut(Axis(0), b);
                col2im(
                    dcols.as_slice().expect("standard"),
                    (c, h, w),
                    self.geometry,
                    (ho, wo),
                    dxb.as_slice_mut().expect("standard"),
                );
            }
        }
        dx
    }
}

impl<T: Real> Parameters<T> for Conv2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution with bias. Weight layout `(in, out, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geometry: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        ConvTranspose2d {
            weight: Param::normal(&[in_channels, out_channels, k, k], 0.0, init_std, rng),
            bias: Param::zeros(&[out_channels]),
            geometry,
            in_channels,
            out_channels,
        }
    }

    fn ok2(&self) -> usize {
        self.out_channels * self.geometry.kernel * self.geometry.kernel
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "transposed convolution expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let ho = self.geometry.transposed_out_len(h);
        let wo = self.geometry.transposed_out_len(w);
        let ok2 = self.ok2();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c, ok2))
            .expect("contiguous weight");
        let x = x.as_standard_layout();
        let mut out = Array4::zeros((n, self.out_channels, ho, wo));
        let mut cols = Array2::<T>::zeros((ok2, h * w));
        for b in 0..n {
            let xb = x
                .index_axis(Axis(0), b)
                .into_shape_with_order((c, h * w))
                .expect("contiguous input");
            general_mat_mul(T::one(), &w2.t(), &xb, T::zero(), &mut cols);
            let mut ob = out.index_axis_mut(Axis(0), b);
            let os = ob.as_slice_mut().expect("standard");
            col2im(
                cols.as_slice().expect("standard"),
                (self.out_channels, ho, wo),
                self.geometry,
                (h, w),
                os,
            );
            for (plane, &bias) in os.chunks_mut(ho * wo).zip(self.bias.value.iter()) {
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &Array4<T>, dy: &Array4<T>, need_dx: bool) -> Option<Array4<T>> {
        let (n, c, h, w) = x.dim();
        let (_, o, ho, wo) = dy.dim();
        let ok2 = self.ok2();
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((c, ok2))
            .expect("contiguous weight")
            .to_owned();
        let mut dx = need_dx.then(|| Array4::<T>::zeros((n, c, h, w)));
        for b in 0..n {
            let dyb = dy.index_axis(Axis(0), b);
            let dcols = im2col(dyb.as_slice().expect("standard"), (o, ho, wo), self.geometry, (h, w));
            let dcols = ArrayView2::from_shape((ok2, h * w), &dcols).expect("cols");
            let xb = x
                .index_axis(Axis(0), b)
                .into_shape_with_order((c, h * w))
                .expect("contiguous input");
            {
                let mut dw2 = self
                    .weight
                    .grad
                    .view_mut()
                    .into_shape_with_order((c, ok2))
                    .expect("contiguous weight grad");
                general_mat_mul(T::one(), &xb, &dcols.t(), T::one(), &mut dw2);
            }
            for (g, plane) in self
                .bias
                .grad
                .iter_mut()
                .zip(dyb.as_slice().expect("standard").chunks(ho * wo))
            {
                *g += plane.iter().copied().sum();
            }
            if let Some(dx) = dx.as_mut() {
                let mut dxb = dx
                    .index_axis_mut(Axis(0), b)
                    .into_shape_with_order((c, h * w))
                    .expect("contiguous dx");
                general_mat_mul(T::one(), &w2, &dcols, T::zero(), &mut dxb);
            }
        }
        dx
    }
}

impl<T: Real> Parameters<T> for ConvTranspose2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
