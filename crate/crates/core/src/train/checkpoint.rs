//! Checkpoints: parameters, optimizer moments and training metadata in one
//! safetensors file.
//!
//! Parameters are stored under their own names, optimizer moments under
//! `optim.m.<name>` / `optim.v.<name>`, everything as little-endian f32.
//! The header carries a single metadata key, `truvil`, holding
//! [`CheckpointMeta`] as JSON.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TruVil};
use crate::params::ParamStore;
use crate::train::config::TrainConfig;
use crate::train::optim::{AdamW, Moments};

pub const META_KEY: &str = "truvil";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub steps: u64,
    pub val_iou: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed epochs.
    pub epoch: usize,
    /// Phase of the last completed epoch (0 before any training).
    pub phase: u8,
    pub fingerprint: String,
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// Optimizer steps taken.
    pub step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub optim: BTreeMap<String, Moments>,
}

fn f32_bytes(t: &Tensor) -> Result<(Vec<usize>, Vec<u8>)> {
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok((t.dims().to_vec(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
}

fn tensor_from_view(name: &str, view: &TensorView<'_>, dev: &Device) -> Result<Tensor> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("{name}: expected F32, found {:?}", view.dtype())));
    }
    let data: Vec<f32> = view
        .data()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(data, view.shape(), dev)?)
}

impl Checkpoint {
    /// Snapshot of `store` (and optimizer state, when given).
    pub fn capture(store: &ParamStore, optim: Option<&AdamW>, meta: CheckpointMeta) -> Result<Self> {
        let params = store
            .vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_detached_tensor().copy().expect("copy")))
            .collect();
        let optim = optim.map(|o| o.state().clone()).unwrap_or_default();
        Ok(Self { meta, params, optim })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (k, t) in &self.params {
            let (s, b) = f32_bytes(t)?;
            owned.push((k.clone(), s, b));
        }
        for (k, m) in &self.optim {
            let (s, b) = f32_bytes(&m.m)?;
            owned.push((format!("{M_PREFIX}{k}"), s, b));
            let (s, b) = f32_bytes(&m.v)?;
            owned.push((format!("{V_PREFIX}{k}"), s, b));
        }
        let views = owned
            .iter()
            .map(|(k, s, b)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = serde_json::to_string(&self.meta).expect("metadata serializes");
        let info = HashMap::from([(META_KEY.to_string(), meta)]);
        safetensors::tensor::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], dev: &Device) -> Result<Self> {
        let bad = |e: safetensors::SafeTensorError| Error::Checkpoint(e.to_string());
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(bad)?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("missing `{META_KEY}` metadata")))?;
        let meta: CheckpointMeta =
            serde_json::from_str(meta_json).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        if meta.model.fingerprint() != meta.fingerprint {
            return Err(Error::Checkpoint(format!(
                "stored fingerprint {} does not match its model config ({})",
                meta.fingerprint,
                meta.model.fingerprint()
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(bad)?;
        let mut params = BTreeMap::new();
        let mut ms = BTreeMap::new();
        let mut vs = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = tensor_from_view(&name, &view, dev)?;
            if let Some(k) = name.strip_prefix(M_PREFIX) {
                ms.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                vs.insert(k.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        let mut optim = BTreeMap::new();
        for (k, m) in ms {
            let v = vs
                .remove(&k)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer moment v missing for {k}")))?;
            optim.insert(k, Moments { m, v });
        }
        if let Some(k) = vs.keys().next() {
            return Err(Error::Checkpoint(format!("optimizer moment m missing for {k}")));
        }
        Ok(Self { meta, params, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, dev: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, dev).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copy the stored parameters into `store`; the name sets must agree.
    pub fn restore_params(&self, store: &ParamStore) -> Result<()> {
        let have: Vec<String> = store.vars().into_iter().map(|(k, _)| k).collect();
        let want: Vec<&String> = self.params.keys().collect();
        if have.len() != want.len() || have.iter().zip(&want).any(|(a, b)| a != *b) {
            let missing = have.iter().find(|k| !self.params.contains_key(*k));
            let extra = want.iter().find(|k| !have.contains(k));
            return Err(Error::Checkpoint(format!(
                "parameter set mismatch (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        for (k, t) in &self.params {
            store.assign(k, t)?;
        }
        Ok(())
    }

    /// Moments converted to `dtype` on `dev`, for [`AdamW::restore`].
    pub fn optimizer_state(&self, dtype: DType, dev: &Device) -> Result<BTreeMap<String, Moments>> {
        self.optim
            .iter()
            .map(|(k, m)| {
                Ok((
                    k.clone(),
                    Moments {
                        m: m.m.to_dtype(dtype)?.to_device(dev)?,
                        v: m.v.to_dtype(dtype)?.to_device(dev)?,
                    },
                ))
            })
            .collect()
    }

    /// Build the stored architecture and load its weights. When `expected`
    /// is given its fingerprint must match the checkpoint's.
    pub fn build_model(&self, expected: Option<&ModelConfig>, dev: &Device) -> Result<(TruVil, ParamStore)> {
        if let Some(cfg) = expected {
            if cfg.fingerprint() != self.meta.fingerprint {
                return Err(Error::Checkpoint(format!(
                    "fingerprint mismatch: checkpoint {} vs configured model {}",
                    self.meta.fingerprint,
                    cfg.fingerprint()
                )));
            }
        }
        let store = ParamStore::new(self.meta.config.seed, DType::F32, dev);
        let model = TruVil::new(&self.meta.model, &store.inference_view())?;
        self.restore_params(&store)?;
        Ok((model, store))
    }
}
