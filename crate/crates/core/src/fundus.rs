//! Fundus image ingestion, field-of-view masking and scale/crop augmentation.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-mean luminance above which a pixel may belong to the retinal disc.
pub const FOV_THRESHOLD: f32 = 10.0 / 255.0;
/// Side of the square structuring element used to close the disc mask.
pub const FOV_CLOSING: usize = 5;

/// Declared value range of a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl RangeTag {
    pub fn min(self) -> f32 {
        match self {
            RangeTag::Unit => 0.0,
            RangeTag::Signed => -1.0,
        }
    }

    pub fn max(self) -> f32 {
        1.0
    }

    /// Map a unit-range value into this range.
    #[inline]
    pub fn from_unit(self, v: f32) -> f32 {
        match self {
            RangeTag::Unit => v,
            RangeTag::Signed => 2.0 * v - 1.0,
        }
    }

    /// Map a value in this range back to unit range.
    #[inline]
    pub fn to_unit(self, v: f32) -> f32 {
        match self {
            RangeTag::Unit => v,
            RangeTag::Signed => (v + 1.0) * 0.5,
        }
    }
}

/// Center and radius of the circular retinal disc, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disc {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

/// An RGB fundus raster with its field-of-view mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusImage {
    /// `(3, H, W)`
    pub pixels: Array3<f32>,
    pub range: RangeTag,
    /// `(H, W)`, true inside the retinal disc.
    pub fov_mask: Array2<bool>,
}

impl FundusImage {
    /// Build an image, clipping to `range` and forcing the background to the range minimum.
    pub fn new(pixels: Array3<f32>, range: RangeTag, fov_mask: Array2<bool>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if fov_mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "mask is {:?} but pixels are {h}x{w}",
                fov_mask.dim()
            )));
        }
        let mut img = FundusImage {
            pixels,
            range,
            fov_mask,
        };
        img.clip();
        img.apply_mask();
        Ok(img)
    }

    /// Image with a full-true mask.
    pub fn unmasked(pixels: Array3<f32>, range: RangeTag) -> Result<Self> {
        let (_, h, w) = pixels.dim();
        Self::new(pixels, range, Array2::from_elem((h, w), true))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn clip(&mut self) {
        let (lo, hi) = (self.range.min(), self.range.max());
        self.pixels.mapv_inplace(|v| v.clamp(lo, hi));
    }

    pub fn apply_mask(&mut self) {
        let bg = self.range.min();
        for mut plane in self.pixels.outer_iter_mut() {
            ndarray::Zip::from(&mut plane)
                .and(&self.fov_mask)
                .for_each(|v, &inside| {
                    if !inside {
                        *v = bg;
                    }
                });
        }
    }

    pub fn to_range(&self, target: RangeTag) -> FundusImage {
        if target == self.range {
            return self.clone();
        }
        let from = self.range;
        let pixels = self
            .pixels
            .mapv(|v| target.from_unit(from.to_unit(v)).clamp(target.min(), target.max()));
        let mut out = FundusImage {
            pixels,
            range: target,
            fov_mask: self.fov_mask.clone(),
        };
        out.apply_mask();
        out
    }

    /// Check every invariant of the type.
    pub fn check_invariants(&self) -> Result<()> {
        let (c, h, w) = self.pixels.dim();
        if c != 3 || self.fov_mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "pixels {:?} inconsistent with mask {:?}",
                self.pixels.dim(),
                self.fov_mask.dim()
            )));
        }
        let (lo, hi) = (self.range.min(), self.range.max());
        if let Some(v) = self.pixels.iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Range(format!("value {v} outside [{lo}, {hi}]")));
        }
        for plane in self.pixels.outer_iter() {
            let leak = plane
                .iter()
                .zip(self.fov_mask.iter())
                .any(|(&v, &inside)| !inside && v != lo);
            if leak {
                return Err(Error::Range("background pixel differs from range minimum".into()));
            }
        }
        Ok(())
    }

    pub fn disc(&self) -> Disc {
        disc_from_mask(self.fov_mask.view())
    }
}

/// Disc geometry from the mask's bounding box; falls back to the frame when empty.
pub fn disc_from_mask(mask: ArrayView2<bool>) -> Disc {
    let (h, w) = mask.dim();
    let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            top = top.min(y);
            bottom = bottom.max(y);
            left = left.min(x);
            right = right.max(x);
        }
    }
    if top == usize::MAX {
        return Disc {
            cy: (h as f64 - 1.0) / 2.0,
            cx: (w as f64 - 1.0) / 2.0,
            radius: h.min(w) as f64 / 2.0,
        };
    }
    let bh = (bottom - top + 1) as f64;
    let bw = (right - left + 1) as f64;
    Disc {
        cy: (top + bottom) as f64 / 2.0,
        cx: (left + right) as f64 / 2.0,
        radius: bh.max(bw) / 2.0,
    }
}

fn image_error(path: &Path, err: image::ImageError) -> Error {
    match err {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Format {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

/// Decode an 8- or 16-bit RGB file into a raw unit-range `(3, H, W)` raster.
pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let to_array = |data: Vec<f32>| {
        Array3::from_shape_vec((h, w, 3), data)
            .expect("decoded buffer size")
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .to_owned()
    };
    match img {
        DynamicImage::ImageRgb8(buf) => Ok(to_array(
            buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        )),
        DynamicImage::ImageRgb16(buf) => Ok(to_array(
            buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        )),
        other => {
            let channels = other.color().channel_count();
            let detail = if channels == 3 {
                format!("unsupported sample type {:?}; expected 8- or 16-bit RGB", other.color())
            } else {
                format!("expected 3 channels (RGB), found {channels}")
            };
            Err(Error::Format {
                path: path.to_path_buf(),
                detail,
            })
        }
    }
}

/// Load an RGB fundus photograph, estimate its disc mask and rescale to `target_range`.
pub fn load_image(path: &Path, target_range: RangeTag) -> Result<FundusImage> {
    let raw = read_rgb(path)?;
    let mask = estimate_fov_mask(raw.view())?;
    let unit = FundusImage::new(raw, RangeTag::Unit, mask)?;
    Ok(unit.to_range(target_range))
}

/// Write an image as 8-bit PNG (affine map from its range to `[0, 255]`).
pub fn save_png(img: &FundusImage, path: &Path) -> Result<()> {
    save_rgb_png(img.pixels.view(), img.range, path)
}

pub fn save_rgb_png(pixels: ArrayView3<f32>, range: RangeTag, path: &Path) -> Result<()> {
    let (_, h, w) = pixels.dim();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = range.to_unit(pixels[[c, y as usize, x as usize]]).clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    ensure_parent(path)?;
    buf.save(path).map_err(|e| image_error(path, e))
}

/// Single-channel PNG, 255 inside the disc.
pub fn save_mask_png(mask: ArrayView2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    ensure_parent(path)?;
    buf.save(path).map_err(|e| image_error(path, e))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Largest 8-connected bright component, closed with a 5x5 square.
pub fn estimate_fov_mask(img: ArrayView3<f32>) -> Result<Array2<bool>> {
    let (c, h, w) = img.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Degenerate("empty image".into()));
    }
    let mean = img.mean_axis(Axis(0)).expect("non-empty channel axis");
    let bright = mean.mapv(|v| v > FOV_THRESHOLD);
    if !bright.iter().any(|&b| b) {
        return Err(Error::Degenerate("no fundus disc found".into()));
    }
    let component = largest_component(&bright);
    Ok(close(&component, FOV_CLOSING))
}

fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut label = vec![0u32; h * w];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[[start / w, start % w]] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if label[q] == 0 && mask[[ny as usize, nx as usize]] {
                        label[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| label[y * w + x] == best.0)
}

/// Separable square morphology; out-of-frame samples are ignored.
fn morph(mask: &Array2<bool>, size: usize, dilate: bool) -> Array2<bool> {
    let (h, w) = mask.dim();
    let r = (size / 2) as isize;
    let pass = |src: &Array2<bool>, along_rows: bool| {
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = !dilate;
            for d in -r..=r {
                let (yy, xx) = if along_rows {
                    (y as isize, x as isize + d)
                } else {
                    (y as isize + d, x as isize)
                };
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let v = src[[yy as usize, xx as usize]];
                if dilate {
                    acc |= v;
                } else {
                    acc &= v;
                }
            }
            acc
        })
    };
    let tmp = pass(mask, true);
    pass(&tmp, false)
}

fn close(mask: &Array2<bool>, size: usize) -> Array2<bool> {
    morph(&morph(mask, size, true), size, false)
}

/// Bilinear resize with half-pixel centers (corner alignment off).
pub fn resize_bilinear(x: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.to_owned();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let src = x.index_axis(Axis(0), ch);
        let mut dst = out.index_axis_mut(Axis(0), ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                dst[[oy, ox]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

pub fn resize_nearest(mask: ArrayView2<bool>, out_h: usize, out_w: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
        mask[[sy, sx]]
    })
}

/// Resize an image (pixels bilinear, mask nearest) and re-apply the mask.
pub fn resize_image(img: &FundusImage, out_h: usize, out_w: usize) -> FundusImage {
    let pixels = resize_bilinear(img.pixels.view(), out_h, out_w);
    let fov_mask = resize_nearest(img.fov_mask.view(), out_h, out_w);
    let mut out = FundusImage {
        pixels,
        range: img.range,
        fov_mask,
    };
    out.clip();
    out.apply_mask();
    out
}

/// Random-scale / random-crop augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Candidate lengths for the shorter image side, in pixels.
    pub scale_choices: Vec<usize>,
    pub crop_size: usize,
    /// Probability of a horizontal flip.
    pub horizontal_flip: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            scale_choices: vec![286, 306, 326, 346],
            crop_size: 256,
            horizontal_flip: 0.0,
        }
    }
}

impl AugmentationConfig {
    /// Validate against a network with `layers` stride-2 stages.
    pub fn validate(&self, layers: usize) -> Result<()> {
        let min_scale = *self
            .scale_choices
            .iter()
            .min()
            .ok_or_else(|| Error::Config("scale_choices must not be empty".into()))?;
        if self.crop_size == 0 || self.crop_size > min_scale {
            return Err(Error::Config(format!(
                "crop_size {} must be positive and <= the smallest scale choice {min_scale}",
                self.crop_size
            )));
        }
        let div = 1usize << layers;
        if !self.crop_size.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "crop_size {} not divisible by {div} (2^{layers} for {layers} layers)",
                self.crop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip) {
            return Err(Error::Config(format!(
                "horizontal_flip probability {} outside [0, 1]",
                self.horizontal_flip
            )));
        }
        Ok(())
    }
}

/// A drawn scale/crop/flip, reusable on several aligned images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleCropPlan {
    pub scale: usize,
    pub resized: (usize, usize),
    pub top: usize,
    pub left: usize,
    pub crop: usize,
    pub flip: bool,
}

/// Size after resizing the shorter side of `(h, w)` to `scale`, keeping aspect.
pub fn shorter_side_size(h: usize, w: usize, scale: usize) -> (usize, usize) {
    if h <= w {
        let nw = ((w as f64 * scale as f64 / h as f64).round() as usize).max(scale);
        (scale, nw)
    } else {
        let nh = ((h as f64 * scale as f64 / w as f64).round() as usize).max(scale);
        (nh, scale)
    }
}

pub fn plan_scale_crop(
    height: usize,
    width: usize,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<ScaleCropPlan> {
    if cfg.scale_choices.is_empty() {
        return Err(Error::Config("scale_choices must not be empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = cfg.scale_choices[rng.random_range(0..cfg.scale_choices.len())];
    if cfg.crop_size > scale {
        return Err(Error::Config(format!(
            "crop_size {} exceeds drawn scale {scale}",
            cfg.crop_size
        )));
    }
    let (rh, rw) = shorter_side_size(height, width, scale);
    let top = rng.random_range(0..=rh - cfg.crop_size);
    let left = rng.random_range(0..=rw - cfg.crop_size);
    let flip = cfg.horizontal_flip > 0.0 && rng.random::<f64>() < cfg.horizontal_flip;
    Ok(ScaleCropPlan {
        scale,
        resized: (rh, rw),
        top,
        left,
        crop: cfg.crop_size,
        flip,
    })
}

impl ScaleCropPlan {
    pub fn apply(&self, img: &FundusImage) -> FundusImage {
        let resized = resize_image(img, self.resized.0, self.resized.1);
        let (t, l, c) = (self.top, self.left, self.crop);
        let mut pixels = resized.pixels.slice(s![.., t..t + c, l..l + c]).to_owned();
        let mut fov_mask = resized.fov_mask.slice(s![t..t + c, l..l + c]).to_owned();
        if self.flip {
            pixels.invert_axis(Axis(2));
            fov_mask.invert_axis(Axis(1));
            pixels = pixels.as_standard_layout().to_owned();
            fov_mask = fov_mask.as_standard_layout().to_owned();
        }
        FundusImage {
            pixels,
            range: img.range,
            fov_mask,
        }
    }
}

/// Resize the shorter side to a random scale choice and cut a random square crop.
pub fn random_scale_crop(img: &FundusImage, cfg: &AugmentationConfig, seed: u64) -> Result<FundusImage> {
    let plan = plan_scale_crop(img.height(), img.width(), cfg, seed)?;
    Ok(plan.apply(img))
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Image files under `dir` (relative paths, sorted), or the entries of a manifest.
pub fn list_images(dir: &Path, manifest: Option<&Path>) -> Result<Vec<PathBuf>> {
    if let Some(manifest) = manifest {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(PathBuf::from)
            .collect());
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && is_image_file(entry.path()) && !is_mask_sidecar(entry.path()) {
            let rel = entry.path().strip_prefix(dir).expect("walk stays under root");
            out.push(rel.to_path_buf());
        }
    }
    Ok(out)
}

/// Whether `path` names a mask written next to its image.
pub fn is_mask_sidecar(path: &Path) -> bool {
    path.file_stem()
        .and_then(|s| s.to_str())
        .is_some_and(|s| s.ends_with("_mask"))
}

/// Load an image, taking its mask from a sidecar when one exists.
pub fn load_with_sidecar(path: &Path, target_range: RangeTag) -> Result<FundusImage> {
    let sidecar = mask_sidecar(path);
    if !sidecar.exists() {
        return load_image(path, target_range);
    }
    let raw = read_rgb(path)?;
    let mask_px = image::open(&sidecar).map_err(|e| image_error(&sidecar, e))?.to_luma8();
    let (w, h) = mask_px.dimensions();
    if (h as usize, w as usize) != (raw.dim().1, raw.dim().2) {
        return Err(Error::Format {
            path: sidecar,
            detail: format!("mask is {w}x{h}, image is {}x{}", raw.dim().2, raw.dim().1),
        });
    }
    let mask = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| mask_px.get_pixel(x as u32, y as u32)[0] > 127);
    Ok(FundusImage::new(raw, RangeTag::Unit, mask)?.to_range(target_range))
}

/// Sidecar mask path for an image: `name.png` -> `name_mask.png`.
pub fn mask_sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    path.with_file_name(format!("{stem}_mask.png"))
}

/// Mirror a corpus into `output_dir`: masked PNG per image plus a mask sidecar.
pub fn prepare_dataset(input_dir: &Path, output_dir: &Path, manifest: Option<&Path>) -> Result<usize> {
    let files = list_images(input_dir, manifest)?;
    for rel in &files {
        let img = load_image(&input_dir.join(rel), RangeTag::Unit)?;
        let out = output_dir.join(rel).with_extension("png");
        save_png(&img, &out)?;
        save_mask_png(img.fov_mask.view(), &mask_sidecar(&out))?;
    }
    Ok(files.len())
}
