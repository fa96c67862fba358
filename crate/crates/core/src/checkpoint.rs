//! Checkpoints: a safetensors weight file plus a JSON sidecar.
//!
//! `<base>.safetensors` holds network parameters (`model.*`), normalization
//! statistics (`buffer.*`) and optimizer moments (`adam.m.*`, `adam.v.*`).
//! `<base>.json` records the config hash, shapes, progress counters, seeds,
//! kernel and the full resolved config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::frequency::GaussianKernelSpec;
use crate::network::GfeNet;
use crate::nn::{cast, Parameters, Real};
use crate::train::Trainer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub layers: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub kernel: GaussianKernelSpec,
    pub dtype: String,
    pub version: String,
    pub config: RunConfig,
}

impl CheckpointMeta {
    pub fn new(cfg: &RunConfig, epoch: usize, global_step: u64) -> Self {
        CheckpointMeta {
            config_hash: cfg.config_hash(),
            layers: cfg.layers,
            enc_channels: cfg.enc_channels.clone(),
            dec_channels: cfg.dec_channels.clone(),
            epoch,
            global_step,
            seed: cfg.seed,
            kernel: cfg.kernel(),
            dtype: "f32".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
        }
    }
}

/// `dir/name`, `dir/name.json` and `dir/name.safetensors` all name the same checkpoint.
pub fn base_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("safetensors") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn weights_path(base: &Path) -> PathBuf {
    with_suffix(&base_path(base), "safetensors")
}

pub fn sidecar_path(base: &Path) -> PathBuf {
    with_suffix(&base_path(base), "json")
}

fn dtype_of<T: Real>() -> Dtype {
    match T::DTYPE {
        "f64" => Dtype::F64,
        _ => Dtype::F32,
    }
}

fn to_bytes<T: Real>(a: &ArrayD<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 8);
    for v in a.iter() {
        let x = v.to_f64().unwrap_or(f64::NAN);
        match dtype_of::<T>() {
            Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
            _ => out.extend_from_slice(&(x as f32).to_le_bytes()),
        }
    }
    out
}

fn from_view<T: Real>(name: &str, view: &TensorView<'_>, shape: &[usize]) -> Result<ArrayD<T>> {
    if view.dtype() != dtype_of::<T>() {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has dtype {:?}, expected {}",
            view.dtype(),
            T::DTYPE
        )));
    }
    if view.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {shape:?}",
            view.shape()
        )));
    }
    let data: Vec<T> = match view.dtype() {
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|c| cast(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
        _ => view
            .data()
            .chunks_exact(4)
            .map(|c| cast(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
    };
    Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape checked"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::fundus::ensure_parent(path)?;
    let tmp = with_suffix(path, "tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn collect_tensors<T: Real>(trainer: &Trainer<T>) -> BTreeMap<String, (Vec<usize>, Vec<u8>)> {
    let mut tensors = BTreeMap::new();
    trainer.net.visit_params("", &mut |name, p| {
        tensors.insert(format!("model.{name}"), (p.value.shape().to_vec(), to_bytes(&p.value)));
    });
    trainer.net.visit_buffers("", &mut |name, b| {
        tensors.insert(format!("buffer.{name}"), (b.shape().to_vec(), to_bytes(b)));
    });
    for (name, m) in &trainer.adam.first {
        tensors.insert(format!("adam.m.{name}"), (m.shape().to_vec(), to_bytes(m)));
    }
    for (name, v) in &trainer.adam.second {
        tensors.insert(format!("adam.v.{name}"), (v.shape().to_vec(), to_bytes(v)));
    }
    tensors
}

/// Write weights, statistics and optimizer state for `trainer`.
pub fn save_trainer<T: Real>(trainer: &Trainer<T>, meta: &CheckpointMeta, base: &Path) -> Result<()> {
    let tensors = collect_tensors(trainer);
    let views = tensors
        .iter()
        .map(|(name, (shape, bytes))| {
            TensorView::new(dtype_of::<T>(), shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = std::collections::HashMap::new();
    info.insert("adam_step".to_string(), trainer.adam.step.to_string());
    let bytes = safetensors::serialize(views, &Some(info))
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    let mut meta = meta.clone();
    meta.dtype = T::DTYPE.into();
    write_atomic(&weights_path(base), &bytes)?;
    let json = serde_json::to_string_pretty(&meta).expect("serializable");
    write_atomic(&sidecar_path(base), json.as_bytes())
}

pub fn read_meta(base: &Path) -> Result<CheckpointMeta> {
    let path = sidecar_path(base);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn check_hash(meta: &CheckpointMeta, cfg: &RunConfig, force: bool) -> Result<()> {
    let runtime = cfg.config_hash();
    if meta.config_hash != runtime {
        if force {
            log::warn!(
                "checkpoint config hash {} differs from runtime {}; continuing because of --force",
                meta.config_hash,
                runtime
            );
        } else {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs runtime {}",
                meta.config_hash, runtime
            )));
        }
    }
    Ok(())
}

fn fill_network<T: Real>(net: &mut GfeNet<T>, st: &SafeTensors<'_>) -> Result<()> {
    let mut failure = None;
    net.visit_params_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let key = format!("model.{name}");
        match st
            .tensor(&key)
            .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
            .and_then(|v| from_view(&key, &v, p.value.shape()))
        {
            Ok(a) => p.value = a,
            Err(e) => failure = Some(e),
        }
    });
    net.visit_buffers_mut("", &mut |name, b| {
        if failure.is_some() {
            return;
        }
        let key = format!("buffer.{name}");
        match st
            .tensor(&key)
            .map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
            .and_then(|v| from_view(&key, &v, b.shape()))
        {
            Ok(a) => *b = a,
            Err(e) => failure = Some(e),
        }
    });
    failure.map_or(Ok(()), Err)
}

fn read_weights(base: &Path) -> Result<Vec<u8>> {
    let path = weights_path(base);
    std::fs::read(&path).map_err(|e| Error::io(&path, e))
}

fn parse<'a>(bytes: &'a [u8], base: &Path) -> Result<SafeTensors<'a>> {
    SafeTensors::deserialize(bytes).map_err(|e| {
        Error::Checkpoint(format!("{} is not a valid weight file: {e}", weights_path(base).display()))
    })
}

/// Restore full training state. The runtime config must hash like the saved one unless `force`.
pub fn load_trainer(base: &Path, cfg: &RunConfig, force: bool) -> Result<(Trainer<f32>, CheckpointMeta)> {
    let meta = read_meta(base)?;
    check_hash(&meta, cfg, force)?;
    let bytes = read_weights(base)?;
    let st = parse(&bytes, base)?;
    let mut trainer = Trainer::<f32>::new(cfg)?;
    fill_network(&mut trainer.net, &st)?;
    let mut shapes = BTreeMap::new();
    trainer.net.visit_params("", &mut |name, p| {
        shapes.insert(name.to_string(), p.value.shape().to_vec());
    });
    for (name, shape) in &shapes {
        for (prefix, store) in [("adam.m", &mut trainer.adam.first), ("adam.v", &mut trainer.adam.second)] {
            let key = format!("{prefix}.{name}");
            if let Ok(view) = st.tensor(&key) {
                store.insert(name.clone(), from_view(&key, &view, shape)?);
            }
        }
    }
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    trainer.adam.step = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("adam_step"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(meta.global_step);
    trainer.step = meta.global_step;
    Ok((trainer, meta))
}

/// Load the network for inference. Without `cfg`, the config stored in the sidecar is used.
pub fn load_network(base: &Path, cfg: Option<&RunConfig>, force: bool) -> Result<(GfeNet<f32>, CheckpointMeta)> {
    let meta = read_meta(base)?;
    let cfg = match cfg {
        Some(c) => {
            check_hash(&meta, c, force)?;
            c.clone()
        }
        None => meta.config.clone(),
    };
    if cfg.network() != meta.config.network() {
        return Err(Error::Checkpoint(
            "network shape in the runtime config differs from the checkpoint".into(),
        ));
    }
    let bytes = read_weights(base)?;
    let st = parse(&bytes, base)?;
    let mut net = GfeNet::<f32>::new(cfg.network(), 0)?;
    fill_network(&mut net, &st)?;
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::nn::Mode;
    use ndarray::Array4;

    fn cfg() -> RunConfig {
        let net = NetworkConfig::narrow(3, 2, 4);
        RunConfig {
            scale_choices: vec![32],
            crop_size: 32,
            kernel_radius: 3,
            kernel_sigma: 1.5,
            layers: net.layers,
            enc_channels: net.enc_channels,
            dec_channels: net.dec_channels,
            ..RunConfig::default()
        }
    }

    fn trained(cfg: &RunConfig) -> Trainer<f32> {
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        let x = Array4::from_shape_fn((2, 3, 16, 16), |(b, c, i, j)| ((b + c + i * j) % 5) as f32 * 0.2 - 0.4);
        let batch = crate::train::Batch {
            input: x.clone(),
            hfm_target: x.clone() * 0.5,
            clear: x,
            mask: None,
        };
        t.train_step(&batch, 0.01).unwrap();
        t
    }

    #[test]
    fn round_trip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let t = trained(&cfg);
        let base = dir.path().join("ckpt/latest");
        save_trainer(&t, &CheckpointMeta::new(&cfg, 3, t.step), &base).unwrap();
        let (back, meta) = load_trainer(&base, &cfg, false).unwrap();
        assert_eq!(meta.epoch, 3);
        assert_eq!(meta.global_step, 1);
        assert_eq!(back.adam.step, 1);
        let dump = |t: &Trainer<f32>| {
            let mut v = Vec::new();
            t.net.visit_params("", &mut |_, p| v.extend(p.value.iter().copied()));
            t.net.visit_buffers("", &mut |_, b| v.extend(b.iter().copied()));
            for m in t.adam.first.values().chain(t.adam.second.values()) {
                v.extend(m.iter().copied());
            }
            v
        };
        assert_eq!(dump(&back), dump(&t));
        // the extension may be given or omitted
        let (mut net, _) = load_network(&weights_path(&base), None, false).unwrap();
        let mut orig = t.net.clone();
        let x = Array4::from_elem((1, 3, 16, 16), 0.1f32);
        assert_eq!(
            net.forward(&x, Mode::Eval).unwrap().enhanced(),
            orig.forward(&x, Mode::Eval).unwrap().enhanced()
        );
    }

    #[test]
    fn hash_mismatch_is_refused_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let t = trained(&cfg);
        let base = dir.path().join("c");
        save_trainer(&t, &CheckpointMeta::new(&cfg, 1, 1), &base).unwrap();
        let other = RunConfig { lr_init: 0.5, ..cfg.clone() };
        assert!(matches!(load_network(&base, Some(&other), false), Err(Error::Checkpoint(_))));
        assert!(load_network(&base, Some(&other), true).is_ok());
        assert!(matches!(load_trainer(&base, &other, false), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupted_weights_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = cfg();
        let t = trained(&cfg);
        let base = dir.path().join("c");
        save_trainer(&t, &CheckpointMeta::new(&cfg, 1, 1), &base).unwrap();
        let path = weights_path(&base);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&path, bytes).unwrap();
        let err = load_network(&base, None, false).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
        std::fs::write(sidecar_path(&base), "{ not json").unwrap();
        assert!(matches!(read_meta(&base), Err(Error::Checkpoint(_))));
    }
}
