//! Running a trained network on whole images.

use ndarray::{Array3, Axis};

use crate::config::{NetworkInput, RunConfig};
use crate::error::Result;
use crate::frequency::{GaussianFilter, GaussianKernelSpec};
use crate::fundus::{resize_image, FundusImage, RangeTag};
use crate::network::GfeNet;
use crate::nn::Mode;

/// Nearest positive multiple of `divisor` to `n`.
pub fn nearest_multiple(n: usize, divisor: usize) -> usize {
    let down = n / divisor * divisor;
    let up = down + divisor;
    if down == 0 || n - down >= up - n {
        up
    } else {
        down
    }
}

/// Kernel to use at `side` pixels for a model trained on `cfg.crop_size` crops.
pub fn kernel_for_side(cfg: &RunConfig, side: usize) -> GaussianKernelSpec {
    if side == cfg.crop_size {
        cfg.kernel()
    } else {
        cfg.kernel().scaled(cfg.crop_size, side)
    }
}

#[derive(Debug, Clone)]
pub struct Enhanced {
    /// Enhanced image, unit range, at the processed size.
    pub image: FundusImage,
    /// Reconstructed high-frequency map, signed range.
    pub hfm: Array3<f32>,
    /// High-frequency map the network was fed (or the image itself).
    pub input: Array3<f32>,
}

/// Resize `img` to `(height, width)` and run both heads with running statistics.
pub fn enhance(net: &mut GfeNet<f32>, cfg: &RunConfig, img: &FundusImage, height: usize, width: usize) -> Result<Enhanced> {
    net.config.check_side(height)?;
    net.config.check_side(width)?;
    let resized = if (img.height(), img.width()) == (height, width) {
        img.clone()
    } else {
        resize_image(img, height, width)
    };
    let signed = resized.to_range(RangeTag::Signed);
    let input = if cfg.use_highpass && cfg.network_input == NetworkInput::HighFrequency {
        let filter = GaussianFilter::<f32>::new(kernel_for_side(cfg, height.min(width)), cfg.padding)?;
        filter.blur_image(signed.pixels.view()).map(|b| &signed.pixels - &b)?
    } else {
        signed.pixels.clone()
    };
    let pass = net.forward(&input.clone().insert_axis(Axis(0)), Mode::Eval)?;
    let enhanced = pass.enhanced().index_axis(Axis(0), 0).to_owned();
    let hfm = pass.hfm().index_axis(Axis(0), 0).to_owned();
    let image = FundusImage {
        pixels: enhanced.mapv(|v| RangeTag::Signed.to_unit(v).clamp(0.0, 1.0)),
        range: RangeTag::Unit,
        fov_mask: resized.fov_mask,
    };
    Ok(Enhanced { image, hfm, input })
}
