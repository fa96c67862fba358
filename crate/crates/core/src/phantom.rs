//! Procedural fundus-like images for tests, demos and the acceptance run.
//!
//! A phantom is a bright circular field of view on black, with a reddish
//! background that darkens toward the rim, a pale optic disc, a darker macula,
//! a tree of tapered vessels leaving the disc, and faint choroidal texture.

use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fundus::{FundusImage, RangeTag};

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    width: f64,
}

fn distance_to_segment(p: (f64, f64), s: &Segment) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (s.a.0 + t * dx, s.a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn grow_vessel<R: Rng>(
    rng: &mut R,
    out: &mut Vec<Segment>,
    start: (f64, f64),
    mut angle: f64,
    mut width: f64,
    step: f64,
    steps: usize,
    depth: usize,
) {
    let mut p = start;
    for i in 0..steps {
        angle += rng.random_range(-0.25..0.25);
        let q = (p.0 + step * angle.cos(), p.1 + step * angle.sin());
        out.push(Segment { a: p, b: q, width });
        p = q;
        width *= 0.97;
        if depth > 0 && i > 2 && rng.random::<f64>() < 0.12 {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let turn = side * rng.random_range(0.4..0.9);
            grow_vessel(
                rng,
                out,
                p,
                angle + turn,
                width * 0.7,
                step,
                steps - i,
                depth - 1,
            );
        }
    }
}

/// A `side` x `side` phantom in unit range with its field-of-view mask.
pub fn fundus(side: usize, seed: u64) -> FundusImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6675_6e64_7573);
    let s = side as f64;
    let center = (
        s / 2.0 + rng.random_range(-0.02..0.02) * s,
        s / 2.0 + rng.random_range(-0.02..0.02) * s,
    );
    let radius = s * rng.random_range(0.42..0.47);
    let left_eye = rng.random::<bool>();
    let od_dir = if left_eye { -1.0 } else { 1.0 };
    let optic = (center.0 + od_dir * 0.45 * radius, center.1 + rng.random_range(-0.05..0.05) * radius);
    let optic_r = radius * rng.random_range(0.11..0.15);
    let macula = (center.0 - od_dir * 0.1 * radius, center.1);
    let macula_r = radius * 0.22;

    let base = [
        rng.random_range(0.65..0.85),
        rng.random_range(0.28..0.40),
        rng.random_range(0.10..0.18),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(4.0..14.0) / s,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.01..0.03),
            )
        })
        .collect();

    let mut segments = Vec::new();
    let trunks = rng.random_range(5..8);
    for k in 0..trunks {
        let angle = 2.0 * PI * (k as f64 + rng.random_range(-0.3..0.3)) / trunks as f64;
        let width = s * rng.random_range(0.008..0.014);
        grow_vessel(
            &mut rng,
            &mut segments,
            optic,
            angle,
            width,
            s * 0.025,
            40,
            2,
        );
    }

    let mut pixels = Array3::<f32>::zeros((3, side, side));
    let mut mask = Array2::from_elem((side, side), false);
    for y in 0..side {
        for x in 0..side {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ((p.0 - center.0).powi(2) + (p.1 - center.1).powi(2)).sqrt();
            if d > radius {
                continue;
            }
            mask[[y, x]] = true;
            let rim = 1.0 - 0.45 * (d / radius).powi(3);
            let texture: f64 = waves
                .iter()
                .map(|&(theta, freq, phase, amp)| {
                    amp * (freq * 2.0 * PI * (p.0 * theta.cos() + p.1 * theta.sin()) + phase).sin()
                })
                .sum();
            let dm = ((p.0 - macula.0).powi(2) + (p.1 - macula.1).powi(2)).sqrt();
            let mac = 1.0 - 0.35 * (-(dm * dm) / (2.0 * macula_r * macula_r)).exp();
            let mut rgb = [0.0f64; 3];
            for c in 0..3 {
                rgb[c] = base[c] * rim * mac * (1.0 + texture);
            }
            let vessel = segments
                .iter()
                .map(|seg| {
                    let dist = distance_to_segment(p, seg);
                    (-(dist * dist) / (2.0 * seg.width * seg.width)).exp()
                })
                .fold(0.0f64, f64::max);
            let shade = [0.45, 0.7, 0.6];
            for c in 0..3 {
                rgb[c] *= 1.0 - shade[c] * vessel;
            }
            let dod = ((p.0 - optic.0).powi(2) + (p.1 - optic.1).powi(2)).sqrt();
            let disc = 1.0 / (1.0 + ((dod - optic_r) / (0.15 * optic_r)).exp());
            let pale = [0.97, 0.85, 0.55];
            for c in 0..3 {
                rgb[c] = rgb[c] * (1.0 - 0.8 * disc) + pale[c] * 0.8 * disc;
                pixels[[c, y, x]] = rgb[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    // the rim sits above the field-of-view threshold by construction
    FundusImage::new(pixels, RangeTag::Unit, mask).expect("phantom is well formed")
}
