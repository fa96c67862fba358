use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;

use super::{cast, join, Mode, Param, Parameters, Real};

#[derive(Debug, Clone)]
struct NormCache<T> {
    normalized: Array4<T>,
    inv_std: Array1<T>,
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<NormCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        BatchNorm2d {
            gamma: Param::normal(&[channels], 1.0, 0.02, rng),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let count = n * h * w;
        let eps: T = cast(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<T>::zeros(c);
                let mut var = Array1::<T>::zeros(c);
                for ch in 0..c {
                    let lane = x.index_axis(Axis(1), ch);
                    let m = lane.sum() / cast(count as f64);
                    let v = lane.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / cast(count as f64);
                    mean[ch] = m;
                    var[ch] = v;
                }
                let mom: T = cast(self.momentum);
                let unbias: T = if count > 1 {
                    cast(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                for ch in 0..c {
                    self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean[ch];
                    self.running_var[ch] =
                        (T::one() - mom) * self.running_var[ch] + mom * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                Array1::from_iter(self.running_mean.iter().copied()),
                Array1::from_iter(self.running_var.iter().copied()),
            ),
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let mut normalized = x.to_owned();
        for (ch, mut lane) in normalized.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (mean[ch], inv_std[ch]);
            lane.mapv_inplace(|v| (v - m) * s);
        }
        let mut y = normalized.clone();
        for (ch, mut lane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            lane.mapv_inplace(|v| v * g + b);
        }
        self.cache = match mode {
            Mode::Train => Some(NormCache {
                normalized,
                inv_std,
            }),
            Mode::Eval => None,
        };
        y
    }

    /// Backward through batch statistics of the last training forward.
    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let cache = self
            .cache
            .as_ref()
            .expect("batch norm backward without a training forward");
        let (n, _, h, w) = dy.dim();
        let m: T = cast((n * h * w) as f64);
        let mut dx = dy.to_owned();
        for (ch, mut lane) in dx.axis_iter_mut(Axis(1)).enumerate() {
            let xhat = cache.normalized.index_axis(Axis(1), ch);
            let sum_dy = lane.sum();
            let sum_dy_xhat = lane.iter().zip(xhat.iter()).map(|(&d, &xh)| d * xh).sum::<T>();
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let scale = self.gamma.value[ch] * cache.inv_std[ch] / m;
            ndarray::Zip::from(&mut lane).and(&xhat).for_each(|d, &xh| {
                *d = scale * (m * *d - sum_dy - xh * sum_dy_xhat);
            });
        }
        dx
    }
}

impl<T: Real> Parameters<T> for BatchNorm2d<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
