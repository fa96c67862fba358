//! A small NCHW layer toolkit with hand-written backward passes.
//!
//! Layers cache whatever they need from the forward pass except their
//! input, which the caller hands back to `backward`. Everything is
//! single-threaded and therefore bit-reproducible.

mod adam;
mod conv;
mod norm;

pub use adam::{Adam, AdamConfig};
pub use conv::{col2im, im2col, Conv2d, ConvGeometry, ConvTranspose2d};
pub use norm::BatchNorm2d;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array4, ArrayD, IxDyn, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floating point element type for tensors (implemented for `f32` and `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Name used in serialized weight containers.
    const DTYPE: &'static str;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
}

#[inline]
pub fn cast<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("finite cast")
}

/// Whether a forward pass is recorded for a later backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers, caches kept for backward.
    Train,
    /// Running statistics, nothing cached.
    Eval,
}

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Param {
            value: ArrayD::from_elem(IxDyn(shape), v),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn normal<R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(mean, std).expect("valid normal");
        let len: usize = shape.iter().product();
        let data: Vec<T> = (0..len).map(|_| cast(dist.sample(rng))).collect();
        Param {
            value: ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.grad
            .iter()
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum()
    }
}

/// Visitor over named parameters; implemented by every layer container.
pub trait Parameters<T: Real> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
    /// Non-trainable state that still belongs in a checkpoint.
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {}
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &ArrayD<T>)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn leaky_relu<T: Real>(x: &Array4<T>, slope: T) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient of leaky ReLU given the pre-activation.
pub fn leaky_relu_backward<T: Real>(pre: &Array4<T>, dy: &mut Array4<T>, slope: T) {
    Zip::from(dy).and(pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d *= slope;
        }
    });
}

pub fn relu<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(pre: &Array4<T>, dy: &mut Array4<T>) {
    Zip::from(dy).and(pre).for_each(|d, &p| {
        if p <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Gradient of tanh given its output.
pub fn tanh_backward<T: Real>(out: &Array4<T>, dy: &mut Array4<T>) {
    Zip::from(dy)
        .and(out)
        .for_each(|d, &y| *d *= T::one() - y * y);
}
