//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use gfe_core::config::{RunConfig, ViewMode};
use gfe_core::eval::psnr_raw;
use gfe_core::frequency::GaussianFilter;
use gfe_core::fundus::FundusImage;
use gfe_core::network::NetworkConfig;
use gfe_core::nn::{cast, Mode, Parameters, Real};
use gfe_core::phantom;
use gfe_core::train::{Batch, LossWeights, Trainer, TrainingSet};
use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn with_network(mut cfg: RunConfig, net: NetworkConfig) -> RunConfig {
    cfg.layers = net.layers;
    cfg.enc_channels = net.enc_channels;
    cfg.dec_channels = net.dec_channels;
    cfg
}

/// Three-level network on 8x8 crops: small enough for exhaustive gradient checks.
pub fn probe_config() -> RunConfig {
    let cfg = RunConfig {
        batch_size: 2,
        crop_size: 8,
        scale_choices: vec![8],
        kernel_radius: 2,
        kernel_sigma: 1.0,
        ..RunConfig::default()
    };
    with_network(cfg, NetworkConfig::narrow(3, 4, 8))
}

/// Four-level network on 32x32 crops for quick end-to-end runs.
pub fn small_config() -> RunConfig {
    let cfg = RunConfig {
        batch_size: 4,
        crop_size: 32,
        scale_choices: vec![32, 40],
        kernel_radius: 3,
        kernel_sigma: 1.5,
        epochs_flat: 2,
        epochs_decay: 2,
        views_per_image: 2,
        checkpoint_every: 2,
        ..RunConfig::default()
    };
    with_network(cfg, NetworkConfig::narrow(4, 4, 16))
}

/// The overfitting surrogate: 4 images, 4 fixed views, 128 px, 500 steps at batch 8.
pub fn overfit_config(seed: u64) -> RunConfig {
    let cfg = RunConfig {
        seed,
        batch_size: 8,
        epochs_flat: 200,
        epochs_decay: 50,
        views_per_image: 4,
        view_mode: ViewMode::Fixed,
        scale_choices: vec![128],
        crop_size: 128,
        kernel_radius: 5,
        kernel_sigma: 2.5,
        checkpoint_every: 1000,
        ..RunConfig::default()
    };
    with_network(cfg, NetworkConfig::narrow(7, 16, 64))
}

pub fn phantom_corpus(count: u64, side: usize) -> Vec<(String, FundusImage)> {
    (0..count)
        .map(|i| (format!("phantom_{i:03}.png"), phantom::fundus(side, 100 + i)))
        .collect()
}

/// A batch of random clear/degraded pairs with high-pass targets, built in `T`.
pub fn random_batch<T: Real>(cfg: &RunConfig, n: usize, seed: u64) -> Batch<T> {
    let side = cfg.crop_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clear: Array4<T> = Array4::from_shape_fn((n, 3, side, side), |_| cast(rng.random_range(-0.9..0.9)));
    let degraded: Array4<T> = clear.mapv(|v| v * cast(0.6) + cast(rng.random_range(-0.2..0.2)));
    let filter = GaussianFilter::<T>::new(cfg.kernel(), cfg.padding).unwrap();
    Batch {
        input: filter.highpass(&degraded).unwrap(),
        hfm_target: filter.highpass(&clear).unwrap(),
        clear,
        mask: None,
    }
}

/// Gradient norm per named parameter for one backward pass under `weights`.
pub fn gradient_norms<T: Real>(
    cfg: &RunConfig,
    weights: LossWeights,
    batch: &Batch<T>,
) -> BTreeMap<String, f64> {
    let mut trainer = Trainer::<T>::new(cfg).unwrap();
    trainer.weights = weights;
    trainer.net.zero_grad();
    trainer.loss_and_gradients(batch).unwrap();
    let mut out = BTreeMap::new();
    trainer.net.visit_params("", &mut |name, p| {
        out.insert(name.to_string(), p.grad_sq_norm().sqrt());
    });
    out
}

/// Raw gradient values per named parameter.
pub fn gradients<T: Real>(cfg: &RunConfig, weights: LossWeights, batch: &Batch<T>) -> BTreeMap<String, Vec<T>> {
    let mut trainer = Trainer::<T>::new(cfg).unwrap();
    trainer.weights = weights;
    trainer.net.zero_grad();
    trainer.loss_and_gradients(batch).unwrap();
    let mut out = BTreeMap::new();
    trainer.net.visit_params("", &mut |name, p| {
        out.insert(name.to_string(), p.grad.iter().copied().collect());
    });
    out
}

pub fn block_norm(norms: &BTreeMap<String, f64>, prefix: &str) -> f64 {
    norms
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, v)| v * v)
        .sum::<f64>()
        .sqrt()
}

pub fn weights(r: f64, e: f64, cyc: f64) -> LossWeights {
    LossWeights { r, e, cyc }
}

/// Central-difference check of `l_total` against backprop on `count` scalar parameters.
///
/// Returns `(name, index, analytic, numeric)` for every probed entry.
pub fn finite_difference_probe(
    cfg: &RunConfig,
    batch: &Batch<f64>,
    count: usize,
    seed: u64,
) -> Vec<(String, usize, f64, f64)> {
    let mut trainer = Trainer::<f64>::new(cfg).unwrap();
    trainer.net.zero_grad();
    trainer.loss_and_gradients(batch).unwrap();
    let mut entries = Vec::new();
    trainer.net.visit_params("", &mut |name, p| {
        if name.ends_with("weight") {
            entries.push((name.to_string(), p.len(), p.grad.clone()));
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(String, usize, f64)> = (0..count)
        .map(|i| {
            // spread probes over all three blocks
            let block = ["encoder", "repr", "enhance"][i % 3];
            let cands: Vec<_> = entries.iter().filter(|e| e.0.starts_with(block)).collect();
            let (name, len, grad) = cands[rng.random_range(0..cands.len())];
            let idx = rng.random_range(0..*len);
            (name.clone(), idx, grad.iter().nth(idx).copied().unwrap())
        })
        .collect();
    let h = 1e-6;
    let loss_at = |name: &str, idx: usize, delta: f64| -> f64 {
        let mut t = trainer.clone();
        t.net.visit_params_mut("", &mut |n, p| {
            if n == name {
                *p.value.iter_mut().nth(idx).unwrap() += delta;
            }
        });
        t.net.zero_grad();
        t.loss_and_gradients(batch).unwrap().l_total
    };
    picks
        .into_iter()
        .map(|(name, idx, analytic)| {
            let numeric = (loss_at(&name, idx, h) - loss_at(&name, idx, -h)) / (2.0 * h);
            (name, idx, analytic, numeric)
        })
        .collect()
}

/// Mean enhanced-vs-clear PSNR, degraded-vs-clear PSNR and HFM L1 over every training view.
pub fn view_metrics(trainer: &mut Trainer<f32>, set: &TrainingSet) -> (f64, f64, f64) {
    let unit = |a: ndarray::ArrayView3<f32>| a.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0));
    let (mut enh, mut deg, mut hfm) = (0.0, 0.0, 0.0);
    for k in 0..set.len() {
        let s = set.sample(0, k).unwrap();
        let pass = trainer.net.forward(&s.input.clone().insert_axis(Axis(0)), Mode::Eval).unwrap();
        let clear = unit(s.clear.view());
        enh += psnr_raw(unit(pass.enhanced().index_axis(Axis(0), 0)).view(), clear.view(), None).unwrap();
        deg += psnr_raw(unit(s.degraded.view()).view(), clear.view(), None).unwrap();
        hfm += (&pass.hfm().index_axis(Axis(0), 0) - &s.hfm_target).mapv(f32::abs).mean().unwrap() as f64;
    }
    let n = set.len() as f64;
    (enh / n, deg / n, hfm / n)
}
