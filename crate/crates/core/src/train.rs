//! Losses, the optimization step and the training loop.
//!
//! All three losses are plain L1 means over the whole batch tensor:
//!
//! * representation: `|F(x) - hfm_pred|`
//! * enhancement: `|x - enhanced|`
//! * cycle: `|F(enhanced) - hfm_pred|`, differentiated into both heads
//!
//! and the total is their weighted sum.

use std::path::{Path, PathBuf};

use ndarray::{stack, Array2, Array3, Array4, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{NetworkInput, RunConfig, ViewMode};
use crate::degrade::{apply_degradation, sample_spec, DonorPool};
use crate::error::{Error, Result};
use crate::frequency::GaussianFilter;
use crate::fundus::{plan_scale_crop, FundusImage, RangeTag};
use crate::network::GfeNet;
use crate::nn::{cast, Adam, AdamConfig, Mode, Parameters, Real};
use crate::seed;

/// Either the Gaussian high-pass or, for the no-filter ablation, the identity.
#[derive(Debug, Clone)]
pub enum FrequencyOperator<T> {
    HighPass(GaussianFilter<T>),
    Identity,
}

impl<T: Real> FrequencyOperator<T> {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        if cfg.use_highpass {
            Ok(FrequencyOperator::HighPass(GaussianFilter::new(cfg.kernel(), cfg.padding)?))
        } else {
            Ok(FrequencyOperator::Identity)
        }
    }

    pub fn apply(&self, x: &Array4<T>) -> Result<Array4<T>> {
        match self {
            FrequencyOperator::HighPass(f) => f.highpass(x),
            FrequencyOperator::Identity => Ok(x.clone()),
        }
    }

    pub fn adjoint(&self, g: &Array4<T>) -> Result<Array4<T>> {
        match self {
            FrequencyOperator::HighPass(f) => f.highpass_adjoint(g),
            FrequencyOperator::Identity => Ok(g.clone()),
        }
    }
}

fn same_shape<T>(a: &Array4<T>, b: &Array4<T>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean absolute difference and its gradient with respect to `pred`.
///
/// With a mask the mean runs over masked-in elements only.
pub fn l1<T: Real>(pred: &Array4<T>, target: &Array4<T>, mask: Option<&Array4<T>>) -> Result<(f64, Array4<T>)> {
    same_shape(pred, target, "L1 loss")?;
    if let Some(m) = mask {
        same_shape(pred, m, "L1 mask")?;
    }
    let count = match mask {
        Some(m) => m.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>(),
        None => pred.len() as f64,
    };
    if count == 0.0 {
        return Ok((0.0, Array4::zeros(pred.raw_dim())));
    }
    let scale: T = cast(1.0 / count);
    let mut total = 0.0f64;
    let mut grad = Array4::zeros(pred.raw_dim());
    Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &t| {
        let d = p - t;
        total += d.abs().to_f64().unwrap_or(f64::NAN);
        *g = if d > T::zero() {
            scale
        } else if d < T::zero() {
            -scale
        } else {
            T::zero()
        };
    });
    if let Some(m) = mask {
        total = 0.0;
        Zip::from(&mut grad).and(pred).and(target).and(m).for_each(|g, &p, &t, &w| {
            total += ((p - t).abs() * w).to_f64().unwrap_or(f64::NAN);
            *g *= w;
        });
    }
    Ok((total / count, grad))
}

/// Representation loss against the target high-frequency map.
pub fn loss_r<T: Real>(hfm_pred: &Array4<T>, hfm_target: &Array4<T>, mask: Option<&Array4<T>>) -> Result<(f64, Array4<T>)> {
    l1(hfm_pred, hfm_target, mask)
}

/// Enhancement loss against the clear image.
pub fn loss_e<T: Real>(enhanced: &Array4<T>, clear: &Array4<T>, mask: Option<&Array4<T>>) -> Result<(f64, Array4<T>)> {
    l1(enhanced, clear, mask)
}

/// Cycle loss; returns the value and gradients for `(enhanced, hfm_pred)`.
pub fn loss_cyc<T: Real>(
    enhanced: &Array4<T>,
    hfm_pred: &Array4<T>,
    op: &FrequencyOperator<T>,
    mask: Option<&Array4<T>>,
) -> Result<(f64, Array4<T>, Array4<T>)> {
    same_shape(enhanced, hfm_pred, "cycle loss")?;
    let filtered = op.apply(enhanced)?;
    let (value, grad) = l1(&filtered, hfm_pred, mask)?;
    let grad_enh = op.adjoint(&grad)?;
    Ok((value, grad_enh, -grad))
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub r: f64,
    pub e: f64,
    pub cyc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            r: 1.0,
            e: 1.0,
            cyc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &RunConfig) -> Self {
        LossWeights {
            r: cfg.w_r,
            e: cfg.w_e,
            cyc: cfg.w_cyc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_r: f64,
    pub l_e: f64,
    pub l_cyc: f64,
    pub l_total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.l_r, self.l_e, self.l_cyc, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn loss_total(l_r: f64, l_e: f64, l_cyc: f64, w: &LossWeights) -> LossBundle {
    LossBundle {
        l_r,
        l_e,
        l_cyc,
        l_total: w.r * l_r + w.e * l_e + w.cyc * l_cyc,
    }
}

/// Constant learning rate, then a linear per-epoch decay reaching zero on the last epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr_init: f64,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
}

impl Schedule {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Schedule {
            lr_init: cfg.lr_init,
            epochs_flat: cfg.epochs_flat,
            epochs_decay: cfg.epochs_decay,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs() {
            return Err(Error::Schedule(format!(
                "epoch {epoch} outside [0, {})",
                self.total_epochs()
            )));
        }
        if epoch < self.epochs_flat {
            return Ok(self.lr_init);
        }
        let into = (epoch - self.epochs_flat + 1) as f64;
        Ok(self.lr_init * (1.0 - into / self.epochs_decay as f64))
    }
}

/// One optimization batch in signed range, NCHW.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// What the encoder sees.
    pub input: Array4<T>,
    pub hfm_target: Array4<T>,
    pub clear: Array4<T>,
    /// Per-element 0/1 weights when losses are restricted to the field of view.
    pub mask: Option<Array4<T>>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.input.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Model, optimizer and loss settings; owns every piece of mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub net: GfeNet<T>,
    pub adam: Adam<T>,
    pub op: FrequencyOperator<T>,
    pub weights: LossWeights,
    pub clip_grad_norm: Option<f64>,
    pub step: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            net: GfeNet::new(cfg.network(), seed::derive(cfg.seed, &[0x6e6574]))?,
            adam: Adam::new(AdamConfig {
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
            }),
            op: FrequencyOperator::from_config(cfg)?,
            weights: LossWeights::from_config(cfg),
            clip_grad_norm: cfg.clip_grad_norm,
            step: 0,
        })
    }

    /// Forward and backward of the weighted objective; gradients accumulate in the network.
    pub fn loss_and_gradients(&mut self, batch: &Batch<T>) -> Result<LossBundle> {
        let pass = self.net.forward(&batch.input, Mode::Train)?;
        let mask = batch.mask.as_ref();
        let (l_r, g_r) = loss_r(pass.hfm(), &batch.hfm_target, mask)?;
        let (l_e, g_e) = loss_e(pass.enhanced(), &batch.clear, mask)?;
        let (l_cyc, gc_enh, gc_hfm) = loss_cyc(pass.enhanced(), pass.hfm(), &self.op, mask)?;
        let bundle = loss_total(l_r, l_e, l_cyc, &self.weights);
        let w = |v: f64| -> T { cast(v) };
        let grad_hfm = g_r * w(self.weights.r) + gc_hfm * w(self.weights.cyc);
        let grad_enh = g_e * w(self.weights.e) + gc_enh * w(self.weights.cyc);
        self.net.backward(&pass, &grad_hfm, &grad_enh)?;
        Ok(bundle)
    }

    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.net.visit_params("", &mut |_, p| sq += p.grad_sq_norm());
        sq.sqrt()
    }

    fn diagnostics(&self, bundle: &LossBundle) -> String {
        let mut worst: Vec<(String, f64)> = Vec::new();
        self.net.visit_params("", &mut |name, p| {
            worst.push((name.to_string(), p.grad_sq_norm().sqrt()));
        });
        worst.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Less));
        let top: Vec<String> = worst
            .iter()
            .take(5)
            .map(|(n, g)| format!("{n}={g:.3e}"))
            .collect();
        format!(
            "step {}: l_r={} l_e={} l_cyc={} l_total={}; grad norm {:.3e}; largest: {}",
            self.step + 1,
            bundle.l_r,
            bundle.l_e,
            bundle.l_cyc,
            bundle.l_total,
            self.grad_norm(),
            top.join(", ")
        )
    }

    /// One forward, one backward of the total loss, one optimizer update.
    pub fn train_step(&mut self, batch: &Batch<T>, lr: f64) -> Result<LossBundle> {
        self.net.zero_grad();
        let bundle = self.loss_and_gradients(batch)?;
        let norm = self.grad_norm();
        if !bundle.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite(self.diagnostics(&bundle)));
        }
        if let Some(limit) = self.clip_grad_norm {
            if norm > limit {
                let s: T = cast(limit / norm);
                self.net.visit_params_mut("", &mut |_, p| p.grad.mapv_inplace(|g| g * s));
            }
        }
        self.adam.begin_step();
        let adam = &mut self.adam;
        self.net.visit_params_mut("", &mut |name, p| adam.update(name, p, lr));
        self.step += 1;
        Ok(bundle)
    }
}

/// One training example in signed range, CHW.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Array3<f32>,
    pub hfm_target: Array3<f32>,
    pub clear: Array3<f32>,
    pub degraded: Array3<f32>,
    pub mask: Array2<bool>,
}

const CROP_STREAM: u64 = 1;
const VIEW_STREAM: u64 = 2;
const ORDER_STREAM: u64 = 3;

/// Clear images plus everything needed to turn them into training samples.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    images: Vec<(String, FundusImage)>,
    donors: DonorPool,
    cfg: RunConfig,
    op: FrequencyOperator<f32>,
    fixed: Option<Vec<Sample>>,
}

impl TrainingSet {
    pub fn new(images: Vec<(String, FundusImage)>, cfg: &RunConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let images: Vec<_> = images
            .into_iter()
            .map(|(id, img)| (id, img.to_range(RangeTag::Unit)))
            .collect();
        let mut donors = DonorPool::new();
        for (id, img) in &images {
            donors.insert(id.clone(), img);
        }
        let mut set = TrainingSet {
            images,
            donors,
            cfg: cfg.clone(),
            op: FrequencyOperator::from_config(cfg)?,
            fixed: None,
        };
        if cfg.view_mode == ViewMode::Fixed {
            let samples = (0..set.len())
                .map(|k| set.build(0, k))
                .collect::<Result<Vec<_>>>()?;
            set.fixed = Some(samples);
        }
        Ok(set)
    }

    /// Samples per epoch: images times views.
    pub fn len(&self) -> usize {
        self.images.len() * self.cfg.views_per_image
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.len().div_ceil(self.cfg.batch_size)
    }

    fn build(&self, epoch: usize, k: usize) -> Result<Sample> {
        let v = self.cfg.views_per_image;
        let (i, view) = (k / v, k % v);
        let round = match self.cfg.view_mode {
            ViewMode::Fixed => 0,
            ViewMode::OnTheFly => epoch as u64,
        };
        let base = self.cfg.seed;
        let (_, img) = &self.images[i];
        let plan = plan_scale_crop(
            img.height(),
            img.width(),
            &self.cfg.augmentation(),
            seed::derive(base, &[CROP_STREAM, i as u64, round]),
        )?;
        let clear = plan.apply(img);
        let ids = self.donors.ids();
        let mut spec = sample_spec(
            seed::derive(base, &[VIEW_STREAM, i as u64, view as u64, round]),
            &self.cfg.degradation_policy,
            &ids,
        )?;
        spec.view_index = view + 1;
        let degraded = apply_degradation(&clear, &spec, &self.donors)?;
        let clear = clear.to_range(RangeTag::Signed);
        let degraded = degraded.to_range(RangeTag::Signed);
        let both = stack(Axis(0), &[clear.pixels.view(), degraded.pixels.view()]).expect("same shapes");
        let filtered = self.op.apply(&both)?;
        let hfm_target = filtered.index_axis(Axis(0), 0).to_owned();
        let input = match self.cfg.network_input {
            NetworkInput::HighFrequency => filtered.index_axis(Axis(0), 1).to_owned(),
            NetworkInput::Image => degraded.pixels.clone(),
        };
        Ok(Sample {
            input,
            hfm_target,
            clear: clear.pixels,
            degraded: degraded.pixels,
            mask: clear.fov_mask,
        })
    }

    pub fn sample(&self, epoch: usize, k: usize) -> Result<Sample> {
        match &self.fixed {
            Some(samples) => Ok(samples[k].clone()),
            None => self.build(epoch, k),
        }
    }

    /// Sample indices for `epoch`, shuffled with an epoch-specific stream.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.cfg.seed, &[ORDER_STREAM, epoch as u64]));
        idx.shuffle(&mut rng);
        idx
    }

    pub fn batches(&self, epoch: usize) -> Result<Vec<Batch<f32>>> {
        self.order(epoch)
            .chunks(self.cfg.batch_size)
            .map(|chunk| {
                let samples = chunk
                    .iter()
                    .map(|&k| self.sample(epoch, k))
                    .collect::<Result<Vec<_>>>()?;
                Ok(collate(&samples, self.cfg.masked_loss))
            })
            .collect()
    }
}

/// Stack samples into a batch.
pub fn collate(samples: &[Sample], masked: bool) -> Batch<f32> {
    let pick = |f: fn(&Sample) -> &Array3<f32>| {
        let views: Vec<_> = samples.iter().map(|s| f(s).view()).collect();
        stack(Axis(0), &views).expect("uniform sample shapes")
    };
    let mask = masked.then(|| {
        let clear = pick(|s| &s.clear);
        let mut m = Array4::<f32>::zeros(clear.raw_dim());
        for (b, s) in samples.iter().enumerate() {
            for mut ch in m.index_axis_mut(Axis(0), b).outer_iter_mut() {
                Zip::from(&mut ch).and(&s.mask).for_each(|v, &inside| *v = if inside { 1.0 } else { 0.0 });
            }
        }
        m
    });
    Batch {
        input: pick(|s| &s.input),
        hfm_target: pick(|s| &s.hfm_target),
        clear: pick(|s| &s.clear),
        mask,
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: u64,
    pub l_r: f64,
    pub l_e: f64,
    pub l_cyc: f64,
    pub l_total: f64,
    pub lr: f64,
}

pub const LOSS_CSV: &str = "loss.csv";

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    reader
        .deserialize()
        .map(|r| {
            r.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })
        })
        .collect()
}

fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            detail: format!("{other:?}"),
        },
    }
}

/// Paths and the last losses of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub rows: Vec<LossRow>,
    pub trainer: Trainer<f32>,
}

/// Train on `images`, writing checkpoints and the loss curve into `out_dir`.
///
/// With `resume`, state is restored from that checkpoint and training picks up
/// at the epoch after it; loss rows from later epochs are discarded.
pub fn run_training(
    images: Vec<(String, FundusImage)>,
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let set = TrainingSet::new(images, cfg)?;
    let schedule = Schedule::from_config(cfg);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = out_dir.join("checkpoints");
    let csv_path = out_dir.join(LOSS_CSV);

    let (mut trainer, start_epoch, mut rows) = match resume {
        Some(path) => {
            let (trainer, meta) = checkpoint::load_trainer(path, cfg, false)?;
            let rows = if csv_path.exists() {
                read_loss_csv(&csv_path)?
                    .into_iter()
                    .filter(|r| r.epoch < meta.epoch)
                    .collect()
            } else {
                Vec::new()
            };
            (trainer, meta.epoch, rows)
        }
        None => (Trainer::<f32>::new(cfg)?, 0, Vec::new()),
    };
    write_loss_csv(&csv_path, &rows)?;

    let total = schedule.total_epochs();
    let mut latest = None;
    for epoch in start_epoch..total {
        let lr = schedule.lr(epoch)?;
        for batch in set.batches(epoch)? {
            let bundle = trainer.train_step(&batch, lr)?;
            rows.push(LossRow {
                epoch,
                step: trainer.step,
                l_r: bundle.l_r,
                l_e: bundle.l_e,
                l_cyc: bundle.l_cyc,
                l_total: bundle.l_total,
                lr,
            });
        }
        let done = epoch + 1;
        let last = rows.last().expect("at least one step per epoch");
        log::info!(
            "epoch {done}/{total} step {} l_total {:.5} (r {:.5} e {:.5} cyc {:.5}) lr {:.3e}",
            last.step,
            last.l_total,
            last.l_r,
            last.l_e,
            last.l_cyc,
            lr
        );
        let meta = CheckpointMeta::new(cfg, done, trainer.step);
        let latest_path = ckpt_dir.join("latest");
        checkpoint::save_trainer(&trainer, &meta, &latest_path)?;
        latest = Some(latest_path);
        if let Err(e) = write_loss_csv(&csv_path, &rows) {
            log::error!("could not write the loss curve; latest checkpoint is in {}", ckpt_dir.display());
            return Err(e);
        }
        if done % cfg.checkpoint_every == 0 && done < total {
            checkpoint::save_trainer(&trainer, &meta, &ckpt_dir.join(format!("epoch_{done:04}")))?;
        }
    }
    let final_path = ckpt_dir.join("final");
    let meta = CheckpointMeta::new(cfg, total, trainer.step);
    checkpoint::save_trainer(&trainer, &meta, &final_path)?;
    if latest.is_none() {
        checkpoint::save_trainer(&trainer, &meta, &ckpt_dir.join("latest"))?;
    }
    Ok(TrainOutcome {
        final_checkpoint: final_path,
        loss_csv: csv_path,
        rows,
        trainer,
    })
}
