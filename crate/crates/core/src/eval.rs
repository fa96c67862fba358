//! Full-reference quality metrics and forward-cost accounting.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fundus::{estimate_fov_mask, list_images, read_rgb, FundusImage, RangeTag};
use crate::network::{LayerKind, LayerShape, NetworkConfig};

/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    for v in a.iter().chain(b.iter()) {
        if !(-1e-6..=1.0 + 1e-6).contains(v) {
            return Err(Error::Range(format!(
                "metrics expect unit-range values, found {v}"
            )));
        }
    }
    Ok(())
}

fn check_images(a: &FundusImage, b: &FundusImage) -> Result<()> {
    if a.range != RangeTag::Unit || b.range != RangeTag::Unit {
        return Err(Error::Range("metrics are computed on unit-range images".into()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for data range 1; identical inputs give `+inf`.
pub fn psnr_raw(a: ArrayView3<f32>, b: ArrayView3<f32>, mask: Option<ArrayView2<bool>>) -> Result<f64> {
    check_pair(a, b)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    Zip::indexed(a).and(b).for_each(|(_, i, j), &x, &y| {
        if mask.is_none_or(|m| m[[i, j]]) {
            let d = x as f64 - y as f64;
            sum += d * d;
            n += 1;
        }
    });
    if n == 0 {
        return Err(Error::Degenerate("no pixels to compare".into()));
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

pub fn psnr(a: &FundusImage, b: &FundusImage) -> Result<f64> {
    check_images(a, b)?;
    psnr_raw(a.pixels.view(), b.pixels.view(), None)
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// 'Valid' separable filtering with the SSIM window.
fn filter_valid(x: &Array2<f64>, w: &[f64]) -> Array2<f64> {
    let (h, wd) = x.dim();
    let k = w.len();
    let (oh, ow) = (h + 1 - k, wd + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..k).map(|t| w[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..k).map(|t| w[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Per-position SSIM of one channel over all valid window placements.
pub fn ssim_map(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Array2<f64> {
    let w = ssim_window();
    let a = a.mapv(|v| v as f64);
    let b = b.mapv(|v| v as f64);
    let mu_a = filter_valid(&a, &w);
    let mu_b = filter_valid(&b, &w);
    let aa = filter_valid(&(&a * &a), &w);
    let bb = filter_valid(&(&b * &b), &w);
    let ab = filter_valid(&(&a * &b), &w);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut out = Array2::zeros(mu_a.raw_dim());
    Zip::from(&mut out)
        .and(&mu_a)
        .and(&mu_b)
        .and(&aa)
        .and(&bb)
        .and(&ab)
        .for_each(|o, &ma, &mb, &saa, &sbb, &sab| {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            *o = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        });
    out
}

/// Mean SSIM over positions, then over channels. With a mask, only windows
/// centred inside it count.
pub fn ssim_raw(a: ArrayView3<f32>, b: ArrayView3<f32>, mask: Option<ArrayView2<bool>>) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let r = SSIM_WINDOW / 2;
    let mut per_channel = Vec::with_capacity(c);
    for ch in 0..c {
        let map = ssim_map(a.index_axis(Axis(0), ch), b.index_axis(Axis(0), ch));
        let (mut sum, mut n) = (0.0, 0usize);
        for ((i, j), &v) in map.indexed_iter() {
            if mask.is_none_or(|m| m[[i + r, j + r]]) {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Degenerate("no SSIM windows inside the mask".into()));
        }
        per_channel.push(sum / n as f64);
    }
    Ok(per_channel.iter().sum::<f64>() / c as f64)
}

pub fn ssim(a: &FundusImage, b: &FundusImage) -> Result<f64> {
    check_images(a, b)?;
    ssim_raw(a.pixels.view(), b.pixels.view(), None)
}

fn db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Render a dB value, `+inf` as `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub path: String,
    pub ssim: f64,
    #[serde(serialize_with = "db")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean_ssim: f64,
    #[serde(serialize_with = "db")]
    pub mean_psnr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn from_entries(per_image: Vec<ImageMetrics>, warnings: Vec<String>) -> Self {
        let count = per_image.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if count == 0 {
                f64::NAN
            } else {
                per_image.iter().map(f).sum::<f64>() / count as f64
            }
        };
        let aggregate = Aggregate {
            mean_ssim: mean(|m| m.ssim),
            mean_psnr: mean(|m| m.psnr),
            count,
        };
        MetricsReport {
            per_image,
            aggregate,
            warnings,
        }
    }

    /// CSV with columns `path,ssim,psnr`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::fundus::ensure_parent(path)?;
        let fail = |e: csv::Error| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(fail)?;
        w.write_record(["path", "ssim", "psnr"]).map_err(fail)?;
        for m in &self.per_image {
            w.write_record([m.path.clone(), m.ssim.to_string(), format_db(m.psnr)])
                .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Compare every image in `enhanced_dir` with the same relative path under `reference_dir`.
///
/// Files present on only one side, or pairs of different size, become warnings.
pub fn evaluate_pairs(enhanced_dir: &Path, reference_dir: &Path, masked: bool) -> Result<MetricsReport> {
    let enhanced = list_images(enhanced_dir, None)?;
    let reference = list_images(reference_dir, None)?;
    let mut warnings = Vec::new();
    let mut entries = Vec::new();
    for rel in &enhanced {
        if !reference.contains(rel) {
            warnings.push(format!("{}: no reference image", rel.display()));
            continue;
        }
        let e = read_rgb(&enhanced_dir.join(rel))?;
        let r = read_rgb(&reference_dir.join(rel))?;
        if e.dim() != r.dim() {
            warnings.push(format!(
                "{}: size {:?} differs from reference {:?}",
                rel.display(),
                e.dim(),
                r.dim()
            ));
            continue;
        }
        let mask = if masked {
            Some(estimate_fov_mask(r.view())?)
        } else {
            None
        };
        let mask = mask.as_ref().map(|m| m.view());
        entries.push(ImageMetrics {
            path: rel.display().to_string(),
            ssim: ssim_raw(e.view(), r.view(), mask)?,
            psnr: psnr_raw(e.view(), r.view(), mask)?,
        });
    }
    for rel in &reference {
        if !enhanced.contains(rel) {
            warnings.push(format!("{}: no enhanced image", rel.display()));
        }
    }
    Ok(MetricsReport::from_entries(entries, warnings))
}

/// Where transposed-convolution work is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum MacConvention {
    /// `k^2 * C_in * C_out` per output position, as layer-hook profilers report.
    #[default]
    OutputPositions,
    /// `k^2 * C_in * C_out` per input position: the multiplies actually performed.
    InputPositions,
}

/// Multiply-accumulates of one convolution layer.
pub fn layer_macs(shape: &LayerShape, convention: MacConvention) -> u64 {
    let per_position = (shape.kernel * shape.kernel * shape.in_channels * shape.out_channels) as u64;
    let positions = match (shape.kind, convention) {
        (LayerKind::Up, MacConvention::InputPositions) => shape.in_side * shape.in_side,
        _ => shape.out_side * shape.out_side,
    } as u64;
    per_position * positions
}

/// Total multiply-accumulates of one forward pass on a `side` x `side` input.
pub fn count_macs(cfg: &NetworkConfig, side: usize, convention: MacConvention) -> u64 {
    cfg.layer_plan(side)
        .iter()
        .map(|s| layer_macs(s, convention))
        .sum()
}

pub fn gmac(macs: u64) -> f64 {
    macs as f64 / 1e9
}

/// Relative path of each enhanced output for `input` under `input_dir`, as PNG.
pub fn output_name(rel: &Path) -> PathBuf {
    rel.with_extension("png")
}
