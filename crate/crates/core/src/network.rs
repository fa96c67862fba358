//! The coupled enhancement network.
//!
//! A shared encoder `E` halves the input `L` times. The representation decoder
//! `D_R` climbs back with U-Net skips: layer `l` sees `[D_R^{l-1} out, f^{L-l+1}]`.
//! The enhancement decoder `D_E` gets no encoder skips; layer `l` sees
//! `[D_E^{l-1} out, D_R^{l-1} out]`. Both decoders start from the bottleneck `f^L`.
//!
//! Layer layouts:
//!
//! * encoder: conv 4x4/2 -> leaky ReLU(0.2) -> batch norm (none on the first
//!   layer and on the bottleneck)
//! * decoder hidden: transposed conv 4x4/2 -> ReLU -> batch norm
//! * decoder output: ReLU -> transposed conv 4x4/2 to 3 channels -> tanh

use ndarray::{concatenate, s, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    cast, leaky_relu, leaky_relu_backward, relu, relu_backward, tanh_backward, BatchNorm2d,
    Conv2d, ConvGeometry, ConvTranspose2d, Mode, Param, Parameters, Real,
};

/// Channels of the image entering and leaving the network.
pub const IMAGE_CHANNELS: usize = 3;

/// Layer counts and widths. `dec_channels[l-1]` is the output width of
/// decoder layer `l`; the last entry is the 3-channel output raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub init_std: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            layers: 8,
            enc_channels: vec![64, 128, 256, 512, 512, 512, 512, 512],
            dec_channels: vec![512, 512, 512, 512, 256, 128, 64, 3],
            leaky_slope: 0.2,
            init_std: 0.02,
        }
    }
}

/// Which kind of convolution a [`LayerShape`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Down,
    Up,
}

/// Static description of one convolution in a forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    /// `"encoder"`, `"repr"` or `"enhance"`.
    pub block: &'static str,
    /// 1-based layer index within its block.
    pub index: usize,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub in_side: usize,
    pub out_side: usize,
}

impl NetworkConfig {
    /// A narrow configuration with `layers` levels, for tests and desk-scale runs.
    pub fn narrow(layers: usize, base: usize, cap: usize) -> Self {
        let enc: Vec<usize> = (0..layers).map(|l| (base << l).min(cap)).collect();
        let mut dec: Vec<usize> = (0..layers - 1).map(|l| enc[layers - 2 - l]).collect();
        dec.push(IMAGE_CHANNELS);
        NetworkConfig {
            layers,
            enc_channels: enc,
            dec_channels: dec,
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > 16 {
            return Err(Error::Config(format!("layers = {} must lie in 1..=16", self.layers)));
        }
        if self.enc_channels.len() != self.layers || self.dec_channels.len() != self.layers {
            return Err(Error::Config(format!(
                "enc_channels ({}) and dec_channels ({}) must both have {} entries",
                self.enc_channels.len(),
                self.dec_channels.len(),
                self.layers
            )));
        }
        if self.enc_channels.iter().chain(&self.dec_channels).any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.dec_channels[self.layers - 1] != IMAGE_CHANNELS {
            return Err(Error::Config(format!(
                "the last dec_channels entry is the output raster and must be {IMAGE_CHANNELS}"
            )));
        }
        if !(self.init_std > 0.0) || !(self.leaky_slope >= 0.0) {
            return Err(Error::Config("init_std must be > 0 and leaky_slope >= 0".into()));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.layers
    }

    pub fn check_side(&self, side: usize) -> Result<()> {
        let d = self.divisor();
        if side == 0 || !side.is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "input side {side} not divisible by {d} (2^{} for {} layers)",
                self.layers, self.layers
            )));
        }
        Ok(())
    }

    /// Input width of decoder layer `l` (1-based) in the representation branch.
    pub fn repr_in_channels(&self, l: usize) -> usize {
        let big_l = self.layers;
        if l == 1 {
            self.enc_channels[big_l - 1]
        } else {
            self.dec_channels[l - 2] + self.enc_channels[big_l - l]
        }
    }

    /// Input width of decoder layer `l` (1-based) in the enhancement branch.
    pub fn enhance_in_channels(&self, l: usize) -> usize {
        if l == 1 {
            self.enc_channels[self.layers - 1]
        } else {
            2 * self.dec_channels[l - 2]
        }
    }

    pub fn encoder_in_channels(&self, l: usize) -> usize {
        if l == 1 {
            IMAGE_CHANNELS
        } else {
            self.enc_channels[l - 2]
        }
    }

    /// Every convolution of one forward pass on a `side` x `side` input.
    pub fn layer_plan(&self, side: usize) -> Vec<LayerShape> {
        let big_l = self.layers;
        let k = ConvGeometry::DOWN.kernel;
        let mut plan = Vec::with_capacity(3 * big_l);
        for l in 1..=big_l {
            plan.push(LayerShape {
                block: "encoder",
                index: l,
                kind: LayerKind::Down,
                in_channels: self.encoder_in_channels(l),
                out_channels: self.enc_channels[l - 1],
                kernel: k,
                in_side: side >> (l - 1),
                out_side: side >> l,
            });
        }
        for (block, widths) in [("repr", Self::repr_in_channels as fn(&Self, usize) -> usize), ("enhance", Self::enhance_in_channels)] {
            for l in 1..=big_l {
                plan.push(LayerShape {
                    block,
                    index: l,
                    kind: LayerKind::Up,
                    in_channels: widths(self, l),
                    out_channels: self.dec_channels[l - 1],
                    kernel: k,
                    in_side: side >> (big_l - l + 1),
                    out_side: side >> (big_l - l),
                });
            }
        }
        plan
    }
}

#[derive(Debug, Clone)]
struct DownLayer<T> {
    conv: Conv2d<T>,
    norm: Option<BatchNorm2d<T>>,
}

#[derive(Debug, Clone)]
struct UpLayer<T> {
    conv: ConvTranspose2d<T>,
    norm: Option<BatchNorm2d<T>>,
    output: bool,
}

/// Tensors kept from one layer's forward for its backward.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    pub input: Array4<T>,
    pre: Array4<T>,
    pub output: Array4<T>,
}

fn shape_context(block: &str, l: usize, e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("{block} layer {l}: {msg}")),
        other => other,
    }
}

impl<T: Real> DownLayer<T> {
    fn forward(&mut self, x: Array4<T>, slope: T, mode: Mode, l: usize) -> Result<LayerCache<T>> {
        let pre = self.conv.forward(&x).map_err(|e| shape_context("encoder", l, e))?;
        let act = leaky_relu(&pre, slope);
        let output = match &mut self.norm {
            Some(bn) => bn.forward(&act, mode),
            None => act,
        };
        Ok(LayerCache { input: x, pre, output })
    }

    fn backward(&mut self, cache: &LayerCache<T>, dy: Array4<T>, slope: T, need_dx: bool) -> Option<Array4<T>> {
        let mut d = match &mut self.norm {
            Some(bn) => bn.backward(&dy),
            None => dy,
        };
        leaky_relu_backward(&cache.pre, &mut d, slope);
        self.conv.backward(&cache.input, &d, need_dx)
    }
}

impl<T: Real> UpLayer<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode, block: &str, l: usize) -> Result<LayerCache<T>> {
        if self.output {
            let pre = relu(&x);
            let output = self
                .conv
                .forward(&pre)
                .map_err(|e| shape_context(block, l, e))?
                .mapv(T::tanh);
            Ok(LayerCache { input: x, pre, output })
        } else {
            let pre = self.conv.forward(&x).map_err(|e| shape_context(block, l, e))?;
            let act = relu(&pre);
            let output = match &mut self.norm {
                Some(bn) => bn.forward(&act, mode),
                None => act,
            };
            Ok(LayerCache { input: x, pre, output })
        }
    }

    fn backward(&mut self, cache: &LayerCache<T>, dy: Array4<T>) -> Array4<T> {
        if self.output {
            let mut d = dy;
            tanh_backward(&cache.output, &mut d);
            let mut dx = self.conv.backward(&cache.pre, &d, true).expect("dx requested");
            relu_backward(&cache.input, &mut dx);
            dx
        } else {
            let mut d = match &mut self.norm {
                Some(bn) => bn.backward(&dy),
                None => dy,
            };
            relu_backward(&cache.pre, &mut d);
            self.conv.backward(&cache.input, &d, true).expect("dx requested")
        }
    }
}

/// Encoder features `f^1..f^L` of one pass.
#[derive(Debug, Clone)]
pub struct EncoderPass<T> {
    pub id: u64,
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> EncoderPass<T> {
    /// `f^l` for `l` in `1..=L`.
    pub fn feature(&self, l: usize) -> &Array4<T> {
        &self.layers[l - 1].output
    }

    pub fn bottleneck(&self) -> &Array4<T> {
        &self.layers.last().expect("at least one layer").output
    }

    pub fn sides(&self) -> Vec<usize> {
        self.layers.iter().map(|c| c.output.dim().2).collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(|c| c.output.dim().1).collect()
    }
}

/// Decoder-branch features of one pass; `input(l)` is `f^l_R` or `f^l_E`.
#[derive(Debug, Clone)]
pub struct DecoderPass<T> {
    pub id: u64,
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> DecoderPass<T> {
    pub fn input(&self, l: usize) -> &Array4<T> {
        &self.layers[l - 1].input
    }

    /// Output of layer `l`, i.e. `D^l(f^l)`.
    pub fn layer_output(&self, l: usize) -> &Array4<T> {
        &self.layers[l - 1].output
    }

    /// The full-resolution 3-channel raster.
    pub fn raster(&self) -> &Array4<T> {
        &self.layers.last().expect("at least one layer").output
    }

    pub fn input_channels(&self) -> Vec<usize> {
        self.layers.iter().map(|c| c.input.dim().1).collect()
    }
}

/// Everything one forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub encoder: EncoderPass<T>,
    pub repr: DecoderPass<T>,
    pub enhance: DecoderPass<T>,
}

impl<T: Real> ForwardPass<T> {
    /// Reconstructed high-frequency map.
    pub fn hfm(&self) -> &Array4<T> {
        self.repr.raster()
    }

    pub fn enhanced(&self) -> &Array4<T> {
        self.enhance.raster()
    }
}

/// Shared encoder plus representation and enhancement decoders.
#[derive(Debug, Clone)]
pub struct GfeNet<T> {
    pub config: NetworkConfig,
    encoder: Vec<DownLayer<T>>,
    repr: Vec<UpLayer<T>>,
    enhance: Vec<UpLayer<T>>,
    passes: u64,
}

impl<T: Real> GfeNet<T> {
    /// Build with seeded Gaussian initialization.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let big_l = config.layers;
        let std = config.init_std;
        let encoder = (1..=big_l)
            .map(|l| {
                let out = config.enc_channels[l - 1];
                let conv = Conv2d::new(config.encoder_in_channels(l), out, ConvGeometry::DOWN, std, &mut rng);
                let norm = (l != 1 && l != big_l).then(|| BatchNorm2d::new(out, &mut rng));
                DownLayer { conv, norm }
            })
            .collect();
        let mut decoder = |widths: fn(&NetworkConfig, usize) -> usize| -> Vec<UpLayer<T>> {
            (1..=big_l)
                .map(|l| {
                    let out = config.dec_channels[l - 1];
                    let conv = ConvTranspose2d::new(widths(&config, l), out, ConvGeometry::DOWN, std, &mut rng);
                    let output = l == big_l;
                    let norm = (!output).then(|| BatchNorm2d::new(out, &mut rng));
                    UpLayer { conv, norm, output }
                })
                .collect()
        };
        let repr = decoder(NetworkConfig::repr_in_channels);
        let enhance = decoder(NetworkConfig::enhance_in_channels);
        Ok(GfeNet {
            config,
            encoder,
            repr,
            enhance,
            passes: 0,
        })
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != IMAGE_CHANNELS {
            return Err(Error::Shape(format!(
                "network input has {c} channels, expected {IMAGE_CHANNELS}"
            )));
        }
        self.config.check_side(h)?;
        self.config.check_side(w)
    }

    pub fn encode(&mut self, x: &Array4<T>, mode: Mode) -> Result<EncoderPass<T>> {
        self.check_input(x)?;
        self.passes += 1;
        let slope: T = cast(self.config.leaky_slope);
        let mut layers: Vec<LayerCache<T>> = Vec::with_capacity(self.config.layers);
        let mut h = x.to_owned();
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            let cache = layer.forward(h, slope, mode, i + 1)?;
            h = cache.output.clone();
            layers.push(cache);
        }
        Ok(EncoderPass {
            id: self.passes,
            layers,
        })
    }

    pub fn decode_repr(&mut self, enc: &EncoderPass<T>, mode: Mode) -> Result<DecoderPass<T>> {
        let big_l = self.config.layers;
        let mut layers: Vec<LayerCache<T>> = Vec::with_capacity(big_l);
        let mut input = enc.bottleneck().clone();
        for (i, layer) in self.repr.iter_mut().enumerate() {
            let l = i + 1;
            if l > 1 {
                let skip = enc.feature(big_l - l + 1);
                let prev = &layers[l - 2].output;
                input = concatenate(Axis(1), &[prev.view(), skip.view()])
                    .map_err(|e| Error::Shape(format!("repr layer {l}: {e}")))?;
            }
            let cache = layer.forward(input.clone(), mode, "repr", l)?;
            layers.push(cache);
        }
        Ok(DecoderPass { id: enc.id, layers })
    }

    pub fn decode_enhance(
        &mut self,
        enc: &EncoderPass<T>,
        repr: &DecoderPass<T>,
        mode: Mode,
    ) -> Result<DecoderPass<T>> {
        if repr.id != enc.id {
            return Err(Error::Consistency(format!(
                "representation features come from pass {}, encoder features from pass {}",
                repr.id, enc.id
            )));
        }
        let mut layers: Vec<LayerCache<T>> = Vec::with_capacity(self.config.layers);
        let mut input = enc.bottleneck().clone();
        for (i, layer) in self.enhance.iter_mut().enumerate() {
            let l = i + 1;
            if l > 1 {
                let prev = &layers[l - 2].output;
                let beside = repr.layer_output(l - 1);
                input = concatenate(Axis(1), &[prev.view(), beside.view()])
                    .map_err(|e| Error::Shape(format!("enhance layer {l}: {e}")))?;
            }
            let cache = layer.forward(input.clone(), mode, "enhance", l)?;
            layers.push(cache);
        }
        Ok(DecoderPass { id: enc.id, layers })
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let encoder = self.encode(x, mode)?;
        let repr = self.decode_repr(&encoder, mode)?;
        let enhance = self.decode_enhance(&encoder, &repr, mode)?;
        Ok(ForwardPass {
            encoder,
            repr,
            enhance,
        })
    }

    /// Accumulate parameter gradients for upstream gradients on both heads.
    ///
    /// The pass must be the most recent training-mode forward: normalization
    /// layers keep their batch statistics from it.
    pub fn backward(&mut self, pass: &ForwardPass<T>, grad_hfm: &Array4<T>, grad_enh: &Array4<T>) -> Result<()> {
        if pass.encoder.id != self.passes {
            return Err(Error::Consistency(format!(
                "backward through pass {} but the latest forward is {}",
                pass.encoder.id, self.passes
            )));
        }
        let big_l = self.config.layers;
        let slope: T = cast(self.config.leaky_slope);

        // D_E: split each layer-input gradient into its own and D_R's share.
        let mut into_repr: Vec<Option<Array4<T>>> = vec![None; big_l + 1];
        let mut bottleneck = None;
        let mut dy = grad_enh.to_owned();
        for l in (1..=big_l).rev() {
            let dx = self.enhance[l - 1].backward(&pass.enhance.layers[l - 1], dy);
            if l == 1 {
                bottleneck = Some(dx);
                break;
            }
            let c = self.config.dec_channels[l - 2];
            into_repr[l - 1] = Some(dx.slice(s![.., c.., .., ..]).to_owned());
            dy = dx.slice(s![.., ..c, .., ..]).to_owned();
        }

        // D_R: own chain plus the D_E contributions, skips routed to the encoder.
        let mut into_enc: Vec<Option<Array4<T>>> = vec![None; big_l + 1];
        let mut dy = grad_hfm.to_owned();
        for l in (1..=big_l).rev() {
            if let Some(extra) = into_repr[l].take() {
                dy += &extra;
            }
            let dx = self.repr[l - 1].backward(&pass.repr.layers[l - 1], dy);
            if l == 1 {
                let b = bottleneck.get_or_insert_with(|| Array4::zeros(dx.raw_dim()));
                *b += &dx;
                break;
            }
            let c = self.config.dec_channels[l - 2];
            into_enc[big_l - l + 1] = Some(dx.slice(s![.., c.., .., ..]).to_owned());
            dy = dx.slice(s![.., ..c, .., ..]).to_owned();
        }

        let mut dy = bottleneck.expect("bottleneck gradient");
        for k in (1..=big_l).rev() {
            if let Some(skip) = into_enc[k].take() {
                dy += &skip;
            }
            match self.encoder[k - 1].backward(&pass.encoder.layers[k - 1], dy, slope, k > 1) {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    pub fn encoder_params(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, layer) in self.encoder.iter().enumerate() {
            visit_down(layer, &format!("encoder.{}", i + 1), f);
        }
    }
}

fn visit_down<T: Real>(layer: &DownLayer<T>, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
    layer.conv.visit_params(&format!("{prefix}.conv"), f);
    if let Some(bn) = &layer.norm {
        bn.visit_params(&format!("{prefix}.norm"), f);
    }
}

fn visit_up<T: Real>(layer: &UpLayer<T>, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
    layer.conv.visit_params(&format!("{prefix}.conv"), f);
    if let Some(bn) = &layer.norm {
        bn.visit_params(&format!("{prefix}.norm"), f);
    }
}

impl<T: Real> Parameters<T> for GfeNet<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        let p = |s: &str| crate::nn::join(prefix, s);
        for (i, layer) in self.encoder.iter().enumerate() {
            visit_down(layer, &p(&format!("encoder.{}", i + 1)), f);
        }
        for (i, layer) in self.repr.iter().enumerate() {
            visit_up(layer, &p(&format!("repr.{}", i + 1)), f);
        }
        for (i, layer) in self.enhance.iter().enumerate() {
            visit_up(layer, &p(&format!("enhance.{}", i + 1)), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let p = |s: &str| crate::nn::join(prefix, s);
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            let name = p(&format!("encoder.{}", i + 1));
            layer.conv.visit_params_mut(&format!("{name}.conv"), f);
            if let Some(bn) = &mut layer.norm {
                bn.visit_params_mut(&format!("{name}.norm"), f);
            }
        }
        for (block, layers) in [("repr", &mut self.repr), ("enhance", &mut self.enhance)] {
            for (i, layer) in layers.iter_mut().enumerate() {
                let name = p(&format!("{block}.{}", i + 1));
                layer.conv.visit_params_mut(&format!("{name}.conv"), f);
                if let Some(bn) = &mut layer.norm {
                    bn.visit_params_mut(&format!("{name}.norm"), f);
                }
            }
        }
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        let p = |s: &str| crate::nn::join(prefix, s);
        for (i, layer) in self.encoder.iter().enumerate() {
            if let Some(bn) = &layer.norm {
                bn.visit_buffers(&p(&format!("encoder.{}.norm", i + 1)), f);
            }
        }
        for (block, layers) in [("repr", &self.repr), ("enhance", &self.enhance)] {
            for (i, layer) in layers.iter().enumerate() {
                if let Some(bn) = &layer.norm {
                    bn.visit_buffers(&p(&format!("{block}.{}.norm", i + 1)), f);
                }
            }
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        let p = |s: &str| crate::nn::join(prefix, s);
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            if let Some(bn) = &mut layer.norm {
                bn.visit_buffers_mut(&p(&format!("encoder.{}.norm", i + 1)), f);
            }
        }
        for (block, layers) in [("repr", &mut self.repr), ("enhance", &mut self.enhance)] {
            for (i, layer) in layers.iter_mut().enumerate() {
                if let Some(bn) = &mut layer.norm {
                    bn.visit_buffers_mut(&p(&format!("{block}.{}.norm", i + 1)), f);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input<T: Real>(n: usize, side: usize, seed: u64) -> Array4<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 3, side, side), |_| cast(rng.random_range(-1.0..1.0)))
    }

    fn toy() -> NetworkConfig {
        NetworkConfig::narrow(4, 4, 16)
    }

    #[test]
    fn default_widths_and_narrow_builder() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.repr_in_channels(2), 512 + 512);
        assert_eq!(cfg.repr_in_channels(8), 64 + 64);
        assert_eq!(cfg.enhance_in_channels(8), 128);
        let t = toy();
        assert_eq!(t.enc_channels, vec![4, 8, 16, 16]);
        assert_eq!(t.dec_channels, vec![16, 8, 4, 3]);
        t.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = toy();
        cfg.dec_channels[3] = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = toy();
        cfg.enc_channels.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shape_contract_for_small_network() {
        let mut net = GfeNet::<f32>::new(toy(), 0).unwrap();
        let x = random_input::<f32>(2, 32, 1);
        let pass = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(pass.encoder.sides(), vec![16, 8, 4, 2]);
        assert_eq!(pass.encoder.channels(), vec![4, 8, 16, 16]);
        assert_eq!(pass.repr.input_channels(), vec![16, 16 + 16, 8 + 8, 4 + 4]);
        assert_eq!(pass.enhance.input_channels(), vec![16, 32, 16, 8]);
        assert_eq!(pass.hfm().dim(), (2, 3, 32, 32));
        assert_eq!(pass.enhanced().dim(), (2, 3, 32, 32));
        assert_eq!(pass.repr.input(1), pass.encoder.bottleneck());
        assert_eq!(pass.enhance.input(1), pass.encoder.bottleneck());
        for v in pass.hfm().iter().chain(pass.enhanced().iter()) {
            assert!((-1.0..=1.0).contains(v));
        }
    }

    #[test]
    fn layer_plan_matches_runtime_shapes() {
        let cfg = toy();
        let plan = cfg.layer_plan(32);
        let mut net = GfeNet::<f32>::new(cfg, 0).unwrap();
        let pass = net.forward(&random_input::<f32>(1, 32, 2), Mode::Train).unwrap();
        for shape in plan {
            let (input, output) = match shape.block {
                "encoder" => (
                    if shape.index == 1 { None } else { Some(pass.encoder.feature(shape.index - 1)) },
                    pass.encoder.feature(shape.index),
                ),
                "repr" => (Some(pass.repr.input(shape.index)), pass.repr.layer_output(shape.index)),
                _ => (Some(pass.enhance.input(shape.index)), pass.enhance.layer_output(shape.index)),
            };
            if let Some(input) = input {
                assert_eq!(input.dim().1, shape.in_channels, "{shape:?}");
                assert_eq!(input.dim().2, shape.in_side, "{shape:?}");
            }
            assert_eq!(output.dim().1, shape.out_channels, "{shape:?}");
            assert_eq!(output.dim().2, shape.out_side, "{shape:?}");
        }
    }

    #[test]
    fn indivisible_side_names_divisor() {
        let mut net = GfeNet::<f32>::new(toy(), 0).unwrap();
        let err = net.forward(&random_input::<f32>(1, 30, 0), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("not divisible by 16")), "{err}");
    }

    #[test]
    fn larger_inputs_pass_through() {
        let mut net = GfeNet::<f32>::new(toy(), 0).unwrap();
        for side in [48, 64] {
            let pass = net.forward(&random_input::<f32>(1, side, 0), Mode::Eval).unwrap();
            assert_eq!(pass.enhanced().dim(), (1, 3, side, side));
        }
    }

    #[test]
    fn stale_features_are_refused() {
        let mut net = GfeNet::<f32>::new(toy(), 0).unwrap();
        let a = net.encode(&random_input::<f32>(1, 32, 0), Mode::Eval).unwrap();
        let b = net.encode(&random_input::<f32>(1, 32, 1), Mode::Eval).unwrap();
        let repr_b = net.decode_repr(&b, Mode::Eval).unwrap();
        assert!(matches!(
            net.decode_enhance(&a, &repr_b, Mode::Eval),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn initialization_is_seeded() {
        let a = GfeNet::<f32>::new(toy(), 5).unwrap();
        let b = GfeNet::<f32>::new(toy(), 5).unwrap();
        let c = GfeNet::<f32>::new(toy(), 6).unwrap();
        let collect = |n: &GfeNet<f32>| {
            let mut v = Vec::new();
            n.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            v
        };
        assert_eq!(collect(&a), collect(&b));
        assert_ne!(collect(&a), collect(&c));
    }

    /// Directional derivative of `<probe_h, hfm> + <probe_e, enh>` against a
    /// central difference along a random parameter direction.
    #[test]
    fn backward_matches_directional_difference() {
        let cfg = NetworkConfig::narrow(3, 2, 4);
        let mut net = GfeNet::<f64>::new(cfg, 3).unwrap();
        let x = random_input::<f64>(2, 8, 4);
        let probe_h = random_input::<f64>(2, 8, 5);
        let probe_e = random_input::<f64>(2, 8, 6);
        let objective = |net: &mut GfeNet<f64>| {
            let pass = net.forward(&x, Mode::Train).unwrap();
            (&probe_h * pass.hfm()).sum() + (&probe_e * pass.enhanced()).sum()
        };
        net.zero_grad();
        let pass = net.forward(&x, Mode::Train).unwrap();
        net.backward(&pass, &probe_h, &probe_e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut direction = Vec::new();
        let mut analytic = 0.0;
        net.visit_params("", &mut |_, p| {
            for g in p.grad.iter() {
                let d: f64 = rng.random_range(-1.0..1.0);
                analytic += d * g;
                direction.push(d);
            }
        });
        let h = 1e-6;
        let shift = |net: &mut GfeNet<f64>, scale: f64| {
            let mut i = 0;
            net.visit_params_mut("", &mut |_, p| {
                for v in p.value.iter_mut() {
                    *v += scale * direction[i];
                    i += 1;
                }
            });
        };
        shift(&mut net, h);
        let up = objective(&mut net);
        shift(&mut net, -2.0 * h);
        let down = objective(&mut net);
        let numeric = (up - down) / (2.0 * h);
        assert!(
            (numeric - analytic).abs() <= 1e-5 * analytic.abs().max(1.0),
            "{numeric} vs {analytic}"
        );
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let mut net = GfeNet::<f32>::new(toy(), 1).unwrap();
        let x = random_input::<f32>(2, 32, 2);
        let pass = net.forward(&x, Mode::Train).unwrap();
        let gh = random_input::<f32>(2, 32, 3);
        let ge = random_input::<f32>(2, 32, 4);
        net.backward(&pass, &gh, &ge).unwrap();
        net.visit_params("", &mut |name, p| {
            assert!(p.grad_sq_norm() > 0.0, "{name} has zero gradient");
        });
    }

    #[test]
    fn backward_requires_latest_pass() {
        let mut net = GfeNet::<f32>::new(toy(), 1).unwrap();
        let first = net.forward(&random_input::<f32>(1, 32, 0), Mode::Train).unwrap();
        let _second = net.forward(&random_input::<f32>(1, 32, 1), Mode::Train).unwrap();
        let g = Array4::zeros((1, 3, 32, 32));
        assert!(matches!(net.backward(&first, &g, &g), Err(Error::Consistency(_))));
    }
}
