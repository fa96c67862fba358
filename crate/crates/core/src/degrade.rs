//! Synthetic degradation of clear fundus images.
//!
//! A [`DegradationSpec`] is a seeded, ordered list of parameterized operators.
//! Applying it is a pure function of `(image, spec, donor pool)`, so a spec
//! serialized into a manifest record reproduces its view bit for bit.
//!
//! Operator definitions (`d` is the distance to the relevant center, `R` the
//! disc radius estimated from the field-of-view mask):
//!
//! * illumination jitter: `clip(gain * x^gamma + bias)`
//! * light spot: `x + strength * exp(-d^2 / 2 (radius R)^2)`
//! * vignette: `x * (1 - strength (d / R)^exponent)`
//! * defocus: Gaussian blur, sigma given at 256 px and scaled with the frame
//! * cataract veil: `t * blur(x) + (1 - t) * veil_luminance`
//! * style mix: low-frequency amplitude spectrum blended with a donor's

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{GaussianFilter, GaussianKernelSpec, Padding};
use crate::fundus::{resize_bilinear, Disc, FundusImage, RangeTag};

/// Frame side at which blur widths are specified.
pub const REFERENCE_SIDE: f64 = 256.0;

/// One parameterized degradation operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DegradationOp {
    IlluminationJitter {
        gain: f64,
        bias: f64,
        gamma: f64,
    },
    LightSpot {
        /// Offset of the spot from the disc center, in disc radii.
        center: [f64; 2],
        /// Spot width as a fraction of the disc radius.
        radius: f64,
        strength: f64,
    },
    Vignette {
        strength: f64,
        exponent: f64,
    },
    DefocusBlur {
        sigma: f64,
    },
    CataractVeil {
        transmission: f64,
        veil_luminance: f64,
        veil_sigma: f64,
    },
    StyleMix {
        donor: String,
        weight: f64,
        cutoff: f64,
    },
}

/// Operator family, used for inclusion statistics and op-list comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    StyleMix,
    IlluminationJitter,
    LightSpot,
    Vignette,
    DefocusBlur,
    CataractVeil,
}

impl DegradationOp {
    pub fn kind(&self) -> OpKind {
        match self {
            DegradationOp::IlluminationJitter { .. } => OpKind::IlluminationJitter,
            DegradationOp::LightSpot { .. } => OpKind::LightSpot,
            DegradationOp::Vignette { .. } => OpKind::Vignette,
            DegradationOp::DefocusBlur { .. } => OpKind::DefocusBlur,
            DegradationOp::CataractVeil { .. } => OpKind::CataractVeil,
            DegradationOp::StyleMix { .. } => OpKind::StyleMix,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} in {self:?}")));
        match *self {
            DegradationOp::IlluminationJitter { gamma, .. } if !(gamma > 0.0) => bad("gamma must be > 0"),
            DegradationOp::LightSpot { radius, .. } if !(radius > 0.0) => bad("spot radius must be > 0"),
            DegradationOp::Vignette { exponent, .. } if !(exponent > 0.0) => bad("exponent must be > 0"),
            DegradationOp::DefocusBlur { sigma } if !(sigma >= 0.0) => bad("blur sigma must be >= 0"),
            DegradationOp::CataractVeil {
                transmission,
                veil_luminance,
                veil_sigma,
            } => {
                if !(transmission > 0.0 && transmission <= 1.0) {
                    bad("transmission must lie in (0, 1]")
                } else if !(0.0..=1.0).contains(&veil_luminance) {
                    bad("veil luminance must lie in [0, 1]")
                } else if !(veil_sigma >= 0.0) {
                    bad("veil sigma must be >= 0")
                } else {
                    Ok(())
                }
            }
            DegradationOp::StyleMix { weight, cutoff, .. } => {
                if !(0.0..=1.0).contains(&weight) {
                    bad("mixing weight must lie in [0, 1]")
                } else if !(cutoff > 0.0 && cutoff <= 1.0) {
                    bad("cutoff must lie in (0, 1]")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Seeded recipe for one degraded view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub view_index: usize,
    pub seed: u64,
    pub ops: Vec<DegradationOp>,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        self.ops.iter().try_for_each(DegradationOp::validate)
    }

    pub fn kinds(&self) -> Vec<OpKind> {
        self.ops.iter().map(DegradationOp::kind).collect()
    }
}

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.1 > self.0 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }

    fn check(&self, name: &str, lo: f64, hi: f64) -> Result<()> {
        if !(self.0 <= self.1) || self.0 < lo || self.1 > hi {
            return Err(Error::Config(format!(
                "{name} range [{}, {}] must be ordered and inside [{lo}, {hi}]",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name}.p = {p} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IlluminationPolicy {
    pub p: f64,
    pub gain: Span,
    pub bias: Span,
    pub gamma: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightSpotPolicy {
    pub p: f64,
    pub max_spots: usize,
    pub strength: Span,
    pub radius: Span,
    /// Largest spot-center offset from the disc center, in disc radii.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VignettePolicy {
    pub p: f64,
    pub strength: Span,
    pub exponents: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefocusPolicy {
    pub p: f64,
    pub sigma: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CataractPolicy {
    pub p: f64,
    pub transmission: Span,
    pub veil_luminance: Span,
    pub veil_sigma: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleMixPolicy {
    pub p: f64,
    pub weight: Span,
    pub cutoff: Span,
}

/// Per-operator inclusion probabilities and parameter ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    pub illumination: IlluminationPolicy,
    pub light_spot: LightSpotPolicy,
    pub vignette: VignettePolicy,
    pub defocus: DefocusPolicy,
    pub cataract: CataractPolicy,
    pub style_mix: StyleMixPolicy,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            illumination: IlluminationPolicy {
                p: 0.5,
                gain: Span(0.5, 1.5),
                bias: Span(-0.2, 0.2),
                gamma: Span(0.6, 1.7),
            },
            light_spot: LightSpotPolicy {
                p: 0.3,
                max_spots: 2,
                strength: Span(0.1, 0.5),
                radius: Span(0.1, 0.3),
                offset: 0.7,
            },
            vignette: VignettePolicy {
                p: 0.5,
                strength: Span(0.2, 0.8),
                exponents: vec![2.0, 3.0, 4.0],
            },
            defocus: DefocusPolicy {
                p: 0.4,
                sigma: Span(1.0, 4.0),
            },
            cataract: CataractPolicy {
                p: 0.5,
                transmission: Span(0.5, 0.95),
                veil_luminance: Span(0.6, 0.95),
                veil_sigma: Span(2.0, 6.0),
            },
            style_mix: StyleMixPolicy {
                p: 0.3,
                weight: Span(0.0, 1.0),
                cutoff: Span(0.03, 0.1),
            },
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<()> {
        let inf = f64::INFINITY;
        check_probability("illumination", self.illumination.p)?;
        self.illumination.gain.check("illumination.gain", 0.0, inf)?;
        self.illumination.bias.check("illumination.bias", -1.0, 1.0)?;
        self.illumination.gamma.check("illumination.gamma", 1e-6, inf)?;
        check_probability("light_spot", self.light_spot.p)?;
        if self.light_spot.max_spots == 0 {
            return Err(Error::Config("light_spot.max_spots must be >= 1".into()));
        }
        self.light_spot.strength.check("light_spot.strength", 0.0, 1.0)?;
        self.light_spot.radius.check("light_spot.radius", 1e-6, inf)?;
        if !(self.light_spot.offset >= 0.0) {
            return Err(Error::Config("light_spot.offset must be >= 0".into()));
        }
        check_probability("vignette", self.vignette.p)?;
        self.vignette.strength.check("vignette.strength", 0.0, 1.0)?;
        if self.vignette.exponents.is_empty() || self.vignette.exponents.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("vignette.exponents must be a non-empty list of positive values".into()));
        }
        check_probability("defocus", self.defocus.p)?;
        self.defocus.sigma.check("defocus.sigma", 0.0, inf)?;
        check_probability("cataract", self.cataract.p)?;
        self.cataract.transmission.check("cataract.transmission", 1e-6, 1.0)?;
        self.cataract.veil_luminance.check("cataract.veil_luminance", 0.0, 1.0)?;
        self.cataract.veil_sigma.check("cataract.veil_sigma", 0.0, inf)?;
        check_probability("style_mix", self.style_mix.p)?;
        self.style_mix.weight.check("style_mix.weight", 0.0, 1.0)?;
        self.style_mix.cutoff.check("style_mix.cutoff", 1e-6, 1.0)?;
        Ok(())
    }

    /// Inclusion probability of each family given the available donors.
    pub fn inclusion_probabilities(&self, have_donors: bool) -> [(OpKind, f64); 6] {
        [
            (OpKind::StyleMix, if have_donors { self.style_mix.p } else { 0.0 }),
            (OpKind::IlluminationJitter, self.illumination.p),
            (OpKind::LightSpot, self.light_spot.p),
            (OpKind::Vignette, self.vignette.p),
            (OpKind::DefocusBlur, self.defocus.p),
            (OpKind::CataractVeil, self.cataract.p),
        ]
    }

    /// A policy that always draws exactly one family.
    pub fn only(kind: OpKind) -> Self {
        let mut policy = SamplingPolicy::default();
        policy.illumination.p = 0.0;
        policy.light_spot.p = 0.0;
        policy.vignette.p = 0.0;
        policy.defocus.p = 0.0;
        policy.cataract.p = 0.0;
        policy.style_mix.p = 0.0;
        match kind {
            OpKind::IlluminationJitter => policy.illumination.p = 1.0,
            OpKind::LightSpot => policy.light_spot.p = 1.0,
            OpKind::Vignette => policy.vignette.p = 1.0,
            OpKind::DefocusBlur => policy.defocus.p = 1.0,
            OpKind::CataractVeil => policy.cataract.p = 1.0,
            OpKind::StyleMix => policy.style_mix.p = 1.0,
        }
        policy
    }
}

/// Draw a degradation recipe. `donors` lists the style donors that may be referenced.
pub fn sample_spec(seed: u64, policy: &SamplingPolicy, donors: &[String]) -> Result<DegradationSpec> {
    policy.validate()?;
    let probs = policy.inclusion_probabilities(!donors.is_empty());
    if probs.iter().all(|&(_, p)| p == 0.0) {
        return Err(Error::Config(
            "every degradation inclusion probability is zero".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut ops = Vec::new();
        let mut style = None;
        for &(kind, p) in &probs {
            if !(rng.random::<f64>() < p) {
                continue;
            }
            match kind {
                OpKind::StyleMix => {
                    let s = &policy.style_mix;
                    style = Some(DegradationOp::StyleMix {
                        donor: donors[rng.random_range(0..donors.len())].clone(),
                        weight: s.weight.sample(&mut rng),
                        cutoff: s.cutoff.sample(&mut rng),
                    });
                }
                OpKind::IlluminationJitter => {
                    let s = &policy.illumination;
                    ops.push(DegradationOp::IlluminationJitter {
                        gain: s.gain.sample(&mut rng),
                        bias: s.bias.sample(&mut rng),
                        gamma: s.gamma.sample(&mut rng),
                    });
                }
                OpKind::LightSpot => {
                    let s = &policy.light_spot;
                    let count = rng.random_range(1..=s.max_spots);
                    for _ in 0..count {
                        let o = s.offset;
                        let center = [
                            Span(-o, o).sample(&mut rng),
                            Span(-o, o).sample(&mut rng),
                        ];
                        ops.push(DegradationOp::LightSpot {
                            center,
                            radius: s.radius.sample(&mut rng),
                            strength: s.strength.sample(&mut rng),
                        });
                    }
                }
                OpKind::Vignette => {
                    let s = &policy.vignette;
                    ops.push(DegradationOp::Vignette {
                        strength: s.strength.sample(&mut rng),
                        exponent: s.exponents[rng.random_range(0..s.exponents.len())],
                    });
                }
                OpKind::DefocusBlur => ops.push(DegradationOp::DefocusBlur {
                    sigma: policy.defocus.sigma.sample(&mut rng),
                }),
                OpKind::CataractVeil => {
                    let s = &policy.cataract;
                    ops.push(DegradationOp::CataractVeil {
                        transmission: s.transmission.sample(&mut rng),
                        veil_luminance: s.veil_luminance.sample(&mut rng),
                        veil_sigma: s.veil_sigma.sample(&mut rng),
                    });
                }
            }
        }
        if ops.is_empty() && style.is_none() {
            continue;
        }
        ops.shuffle(&mut rng);
        if let Some(style) = style {
            ops.insert(0, style);
        }
        return Ok(DegradationSpec {
            view_index: 0,
            seed,
            ops,
        });
    }
}

/// Unit-range style donors keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct DonorPool {
    images: BTreeMap<String, Array3<f32>>,
}

impl DonorPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, img: &FundusImage) {
        self.images
            .insert(id.into(), img.to_range(RangeTag::Unit).pixels);
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Result<&Array3<f32>> {
        self.images
            .get(id)
            .ok_or_else(|| Error::MissingDonor(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Apply a recipe to a unit-range image. Style mixing runs first, the rest in order.
pub fn apply_degradation(x: &FundusImage, spec: &DegradationSpec, donors: &DonorPool) -> Result<FundusImage> {
    if x.range != RangeTag::Unit {
        return Err(Error::Range("degradations operate on unit-range images".into()));
    }
    spec.validate()?;
    let disc = x.disc();
    let mut out = x.clone();
    let ordered = spec
        .ops
        .iter()
        .filter(|op| op.kind() == OpKind::StyleMix)
        .chain(spec.ops.iter().filter(|op| op.kind() != OpKind::StyleMix));
    for op in ordered {
        apply_op(&mut out, op, &disc, donors)?;
        out.clip();
        out.apply_mask();
    }
    Ok(out)
}

fn for_each_inside(img: &mut FundusImage, mut f: impl FnMut(usize, usize, usize, f32) -> f32) {
    let (c, h, w) = img.pixels.dim();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if img.fov_mask[[y, x]] {
                    let v = img.pixels[[ch, y, x]];
                    img.pixels[[ch, y, x]] = f(ch, y, x, v);
                }
            }
        }
    }
}

fn apply_op(img: &mut FundusImage, op: &DegradationOp, disc: &Disc, donors: &DonorPool) -> Result<()> {
    let frame = img.height().min(img.width()) as f64;
    match *op {
        DegradationOp::IlluminationJitter { gain, bias, gamma } => {
            let (g, b, e) = (gain as f32, bias as f32, gamma as f32);
            for_each_inside(img, |_, _, _, v| g * v.powf(e) + b);
        }
        DegradationOp::LightSpot {
            center,
            radius,
            strength,
        } => {
            let sy = disc.cy + center[1] * disc.radius;
            let sx = disc.cx + center[0] * disc.radius;
            let width = radius * disc.radius;
            let denom = 2.0 * width * width;
            for_each_inside(img, |_, y, x, v| {
                let d2 = (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2);
                v + (strength * (-d2 / denom).exp()) as f32
            });
        }
        DegradationOp::Vignette { strength, exponent } => {
            for_each_inside(img, |_, y, x, v| {
                let d = ((y as f64 - disc.cy).powi(2) + (x as f64 - disc.cx).powi(2)).sqrt();
                let factor = (1.0 - strength * (d / disc.radius).powf(exponent)).max(0.0);
                v * factor as f32
            });
        }
        DegradationOp::DefocusBlur { sigma } => {
            let sigma = sigma * frame / REFERENCE_SIDE;
            if let Some(blurred) = masked_blur(img, sigma)? {
                img.pixels = blurred;
            }
        }
        DegradationOp::CataractVeil {
            transmission,
            veil_luminance,
            veil_sigma,
        } => {
            let blurred = masked_blur(img, veil_sigma)?.unwrap_or_else(|| img.pixels.clone());
            let t = transmission as f32;
            let veil = ((1.0 - transmission) * veil_luminance) as f32;
            for_each_inside(img, |c, y, x, _| t * blurred[[c, y, x]] + veil);
        }
        DegradationOp::StyleMix {
            ref donor,
            weight,
            cutoff,
        } => {
            let donor = donors.get(donor)?;
            img.pixels = style_mix(&img.pixels, donor, weight, cutoff);
        }
    }
    Ok(())
}

/// Normalized (mask-weighted) Gaussian blur; `None` when sigma is zero.
fn masked_blur(img: &FundusImage, sigma: f64) -> Result<Option<Array3<f32>>> {
    if sigma <= 0.0 {
        return Ok(None);
    }
    let (c, h, w) = img.pixels.dim();
    let max_radius = (h.min(w).saturating_sub(1) / 2).max(1);
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, max_radius);
    let filter = GaussianFilter::<f32>::new(GaussianKernelSpec { radius, sigma }, Padding::Reflect)?;
    let mask = img.fov_mask.mapv(|m| if m { 1.0f32 } else { 0.0 });
    let mut stack = Array3::<f32>::zeros((c + 1, h, w));
    for ch in 0..c {
        let plane = &img.pixels.index_axis(Axis(0), ch) * &mask;
        stack.index_axis_mut(Axis(0), ch).assign(&plane);
    }
    stack.index_axis_mut(Axis(0), c).assign(&mask);
    let blurred = filter.blur_image(stack.view())?;
    let weight = blurred.index_axis(Axis(0), c).to_owned();
    let mut out = img.pixels.clone();
    for ch in 0..c {
        let src = blurred.index_axis(Axis(0), ch);
        let mut dst = out.index_axis_mut(Axis(0), ch);
        ndarray::Zip::from(&mut dst)
            .and(&src)
            .and(&weight)
            .and(&img.fov_mask)
            .for_each(|d, &s, &wt, &inside| {
                if inside && wt > 1e-6 {
                    *d = s / wt;
                }
            });
    }
    Ok(Some(out))
}

fn fft2(plane: &mut Array2<Complex<f64>>, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (h, w) = plane.dim();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for mut row in plane.rows_mut() {
        let mut buf: Vec<_> = row.to_vec();
        row_fft.process(&mut buf);
        row.assign(&ndarray::ArrayView1::from(&buf));
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    for mut col in plane.columns_mut() {
        let mut buf: Vec<_> = col.to_vec();
        col_fft.process(&mut buf);
        col.assign(&ndarray::ArrayView1::from(&buf));
    }
}

fn signed_freq(k: usize, n: usize) -> usize {
    k.min(n - k)
}

/// Blend the low-frequency amplitude spectrum with a donor's, keeping own phase.
pub fn style_mix(pixels: &Array3<f32>, donor: &Array3<f32>, weight: f64, cutoff: f64) -> Array3<f32> {
    let (c, h, w) = pixels.dim();
    let donor = if donor.dim() == (c, h, w) {
        donor.clone()
    } else {
        resize_bilinear(donor.view(), h, w)
    };
    let half = ((cutoff * h.min(w) as f64) / 2.0).floor() as usize;
    let mut planner = FftPlanner::new();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let mut own = pixels
            .index_axis(Axis(0), ch)
            .mapv(|v| Complex::new(v as f64, 0.0));
        let mut other = donor
            .index_axis(Axis(0), ch)
            .mapv(|v| Complex::new(v as f64, 0.0));
        fft2(&mut own, &mut planner, false);
        fft2(&mut other, &mut planner, false);
        for ((y, x), z) in own.indexed_iter_mut() {
            if signed_freq(y, h) <= half && signed_freq(x, w) <= half {
                let amp = (1.0 - weight) * z.norm() + weight * other[[y, x]].norm();
                *z = Complex::from_polar(amp, z.arg());
            }
        }
        fft2(&mut own, &mut planner, true);
        let norm = (h * w) as f64;
        out.index_axis_mut(Axis(0), ch)
            .assign(&own.mapv(|z| (z.re / norm) as f32));
    }
    out
}

/// A degraded view together with its recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub spec: DegradationSpec,
    pub image: FundusImage,
}

/// A clear image and its degraded views, all sharing one field-of-view mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub source: FundusImage,
    pub views: Vec<View>,
}

impl ViewSet {
    pub fn check_invariants(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Consistency("view set is empty".into()));
        }
        for view in &self.views {
            if view.image.fov_mask != self.source.fov_mask {
                return Err(Error::Consistency(format!(
                    "view {} moved the field-of-view mask",
                    view.spec.view_index
                )));
            }
            view.image.check_invariants()?;
        }
        Ok(())
    }
}

/// Synthesize `count` views; view `v` (1-based) is drawn with seed `base_seed + v`.
pub fn synthesize_view_set(
    x: &FundusImage,
    count: usize,
    base_seed: u64,
    policy: &SamplingPolicy,
    donors: &DonorPool,
) -> Result<ViewSet> {
    if count == 0 {
        return Err(Error::Config("view count must be >= 1".into()));
    }
    let ids = donors.ids();
    let views = (1..=count)
        .map(|v| {
            let mut spec = sample_spec(base_seed.wrapping_add(v as u64), policy, &ids)?;
            spec.view_index = v;
            let image = apply_degradation(x, &spec, donors)?;
            Ok(View { spec, image })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewSet {
        source: x.clone(),
        views,
    })
}

/// One JSON-lines manifest entry describing how a view was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source: String,
    pub view: usize,
    pub seed: u64,
    pub ops: Vec<DegradationOp>,
}

impl ManifestRecord {
    pub fn new(source: impl Into<String>, spec: &DegradationSpec) -> Self {
        ManifestRecord {
            source: source.into(),
            view: spec.view_index,
            seed: spec.seed,
            ops: spec.ops.clone(),
        }
    }

    pub fn spec(&self) -> DegradationSpec {
        DegradationSpec {
            view_index: self.view,
            seed: self.seed,
            ops: self.ops.clone(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("manifest records serialize")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Manifest(format!("{e}: {line}")))
    }
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    crate::fundus::ensure_parent(path)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(file, "{}", r.to_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| ManifestRecord::from_line(&l?))
        .collect()
}
