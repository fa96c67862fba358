//! Run configuration: one flat JSON document covering training, augmentation,
//! filtering, network shape and the degradation policy.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::degrade::SamplingPolicy;
use crate::error::{Error, Result};
use crate::frequency::{GaussianKernelSpec, Padding};
use crate::fundus::AugmentationConfig;
use crate::network::NetworkConfig;

/// What the encoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkInput {
    /// The high-frequency map of the degraded image.
    #[default]
    HighFrequency,
    /// The degraded image itself.
    Image,
}

/// How degraded views are produced during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    /// Fresh crops and degradations every epoch.
    #[default]
    OnTheFly,
    /// One crop and `views_per_image` degradations per image, reused every epoch.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    pub views_per_image: usize,
    pub view_mode: ViewMode,
    pub w_r: f64,
    pub w_e: f64,
    pub w_cyc: f64,
    /// Replace the high-pass operator by the identity (dual reconstruction).
    pub use_highpass: bool,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_grad_norm: Option<f64>,
    /// Restrict losses to the field of view.
    pub masked_loss: bool,
    pub checkpoint_every: usize,

    pub scale_choices: Vec<usize>,
    pub crop_size: usize,
    pub horizontal_flip: f64,

    pub kernel_radius: usize,
    pub kernel_sigma: f64,
    pub padding: Padding,

    pub layers: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub init_std: f64,
    pub network_input: NetworkInput,

    pub degradation_policy: SamplingPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aug = AugmentationConfig::default();
        let kernel = GaussianKernelSpec::default();
        let net = NetworkConfig::default();
        RunConfig {
            batch_size: 8,
            lr_init: 0.001,
            epochs_flat: 150,
            epochs_decay: 50,
            views_per_image: 1,
            view_mode: ViewMode::OnTheFly,
            w_r: 1.0,
            w_e: 1.0,
            w_cyc: 1.0,
            use_highpass: true,
            seed: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_grad_norm: None,
            masked_loss: false,
            checkpoint_every: 10,
            scale_choices: aug.scale_choices,
            crop_size: aug.crop_size,
            horizontal_flip: aug.horizontal_flip,
            kernel_radius: kernel.radius,
            kernel_sigma: kernel.sigma,
            padding: Padding::Reflect,
            layers: net.layers,
            enc_channels: net.enc_channels,
            dec_channels: net.dec_channels,
            leaky_slope: net.leaky_slope,
            init_std: net.init_std,
            network_input: NetworkInput::HighFrequency,
            degradation_policy: SamplingPolicy::default(),
        }
    }
}

/// Reject keys absent from `template`, suggesting the closest valid one.
fn check_keys(doc: &Map<String, Value>, template: &Map<String, Value>, path: &str) -> Result<()> {
    for (key, value) in doc {
        let full = if path.is_empty() {
            key.clone()
        } else {
            format!("{path}.{key}")
        };
        match template.get(key) {
            None => {
                let nearest = template
                    .keys()
                    .max_by(|a, b| {
                        strsim::jaro_winkler(key, a)
                            .partial_cmp(&strsim::jaro_winkler(key, b))
                            .expect("finite similarity")
                    })
                    .cloned()
                    .unwrap_or_default();
                return Err(Error::Config(format!(
                    "unknown key `{full}`; did you mean `{nearest}`?"
                )));
            }
            Some(Value::Object(inner)) => {
                if let Value::Object(given) = value {
                    check_keys(given, inner, &full)?;
                }
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn as_object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    }
}

/// Recursively overlay `patch` on `base`; nested objects merge key by key.
fn merge(base: &mut Map<String, Value>, patch: Map<String, Value>) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(p)) => merge(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parse a document; absent keys take their defaults, nested policy keys included.
    pub fn from_value(doc: Value) -> Result<Self> {
        let doc = match doc {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => {
                return Err(Error::Config(format!(
                    "config must be a JSON object, found {other}"
                )))
            }
        };
        let template = as_object(serde_json::to_value(RunConfig::default()).expect("serializable"));
        check_keys(&doc, &template, "")?;
        let mut merged = template;
        merge(&mut merged, doc);
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = if text.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?
        };
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Apply `key=value` overrides (values parsed as JSON, falling back to strings).
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = as_object(self.to_value());
        let template = doc.clone();
        let mut patch = Map::new();
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut parts: Vec<&str> = key.split('.').collect();
            let leaf = parts.pop().expect("non-empty key");
            let mut node = &mut patch;
            for part in parts {
                node = match node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                {
                    Value::Object(m) => m,
                    _ => return Err(Error::Config(format!("override `{key}` crosses a scalar"))),
                };
            }
            node.insert(leaf.to_string(), value);
        }
        check_keys(&patch, &template, "")?;
        merge(&mut doc, patch);
        Self::from_value(Value::Object(doc))
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("serializable")
    }

    /// Key-sorted JSON; stable under any reordering of the source document.
    pub fn canonical_json(&self) -> String {
        // serde_json maps are ordered by key
        serde_json::to_string(&self.to_value()).expect("serializable")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("serializable")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            layers: self.layers,
            enc_channels: self.enc_channels.clone(),
            dec_channels: self.dec_channels.clone(),
            leaky_slope: self.leaky_slope,
            init_std: self.init_std,
        }
    }

    pub fn kernel(&self) -> GaussianKernelSpec {
        GaussianKernelSpec {
            radius: self.kernel_radius,
            sigma: self.kernel_sigma,
        }
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            scale_choices: self.scale_choices.clone(),
            crop_size: self.crop_size,
            horizontal_flip: self.horizontal_flip,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("views_per_image", self.views_per_image),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.total_epochs() == 0 {
            return Err(Error::Config("epochs_flat + epochs_decay must be >= 1".into()));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        for (name, w) in [("w_r", self.w_r), ("w_e", self.w_e), ("w_cyc", self.w_cyc)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {w}")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_grad_norm must be positive".into()));
            }
        }
        let net = self.network();
        net.validate()?;
        self.augmentation().validate(net.layers)?;
        let kernel = self.kernel();
        kernel.validate()?;
        if kernel.side() > self.crop_size {
            return Err(Error::Config(format!(
                "kernel side {} exceeds crop_size {}",
                kernel.side(),
                self.crop_size
            )));
        }
        self.degradation_policy.validate()
    }
}
