//! Named, seeded parameter storage.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a hierarchical
//! dotted name (`rgb.stage1.block0.ffn.fc1.weight`). Initial values are drawn
//! from a ChaCha stream keyed by the store seed and the parameter name, so a
//! model's initialization does not depend on construction order and two
//! stores built with the same seed are bit-identical.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Identity matrix on the two leading dimensions, zero elsewhere.
    Identity,
    /// `U(-b, b)` with `b = 1/sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
    Normal { std: f64 },
}

#[derive(Debug)]
struct Inner {
    vars: Mutex<BTreeMap<String, Var>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

/// Shared handle to the parameter set of one model instance.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
    track_grad: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Inner {
                vars: Mutex::new(BTreeMap::new()),
                seed,
                dtype,
                device: device.clone(),
            }),
            track_grad: true,
        }
    }

    /// A view of the same storage whose tensors are handed out detached, so
    /// forward passes built from it record no autograd graph.
    pub fn inference_view(&self) -> Self {
        Self {
            inner: self.inner.clone(),
            track_grad: false,
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    /// All variables in lexicographic name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let vars = self.inner.vars.lock().expect("param store poisoned");
        vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner
            .vars
            .lock()
            .expect("param store poisoned")
            .get(name)
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.vars.lock().expect("param store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_scalars(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place. Shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(
                "ParamStore::assign",
                format!("{name} {:?}", var.dims()),
                format!("{:?}", value.dims()),
            ));
        }
        var.set(&value.to_dtype(self.inner.dtype)?.to_device(&self.inner.device)?)?;
        Ok(())
    }

    /// Set every parameter to zero.
    pub fn zero_all(&self) -> Result<()> {
        for (_, var) in self.vars() {
            var.set(&var.zeros_like()?)?;
        }
        Ok(())
    }

    fn fetch(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.inner.vars.lock().expect("param store poisoned");
        let var = match vars.get(&name) {
            Some(v) => {
                if v.dims() != shape {
                    return Err(Error::shape(
                        "ParamStore::fetch",
                        format!("{name} {:?}", v.dims()),
                        format!("{shape:?}"),
                    ));
                }
                v.clone()
            }
            None => {
                let t = self.initial_value(&name, shape, init)?;
                let v = Var::from_tensor(&t)?;
                vars.insert(name, v.clone());
                v
            }
        };
        Ok(if self.track_grad {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }

    fn initial_value(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.inner.seed ^ fnv1a(name.as_bytes()));
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Identity => {
                let rows = shape.first().copied().unwrap_or(1);
                let cols = shape.get(1).copied().unwrap_or(1);
                let inner: usize = shape.iter().skip(2).product();
                let mut d = vec![0.0; n];
                for i in 0..rows.min(cols) {
                    for k in 0..inner {
                        d[(i * cols + i) * inner + k] = 1.0;
                    }
                }
                d
            }
            Init::FanInUniform { fan_in } => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-b, b).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.inner.device)?.to_dtype(self.inner.dtype)?)
    }
}

/// Prefix cursor into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.fetch(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let a = ParamStore::new(7, DType::F32, &Device::Cpu);
        let b = ParamStore::new(7, DType::F32, &Device::Cpu);
        let ta = a.root().pp("x").get("w", &[4, 3], Init::Normal { std: 1.0 }).unwrap();
        // construction order must not matter
        b.root().pp("y").get("w", &[2], Init::Normal { std: 1.0 }).unwrap();
        let tb = b.root().pp("x").get("w", &[4, 3], Init::Normal { std: 1.0 }).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = tb.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn identity_init_on_1x1_kernel() {
        let s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let t = s.root().get("w", &[3, 3, 1, 1], Init::Identity).unwrap();
        let v: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }

    #[test]
    fn refetch_shape_mismatch_is_rejected() {
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        s.root().get("w", &[2, 2], Init::Zeros).unwrap();
        assert!(s.root().get("w", &[3], Init::Zeros).is_err());
    }

    #[test]
    fn inference_view_is_detached_but_shared() {
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        let t = s.inference_view().root().get("w", &[2], Init::Zeros).unwrap();
        assert!(!t.is_variable());
        s.assign("w", &Tensor::new(&[1f32, 2.], &Device::Cpu).unwrap()).unwrap();
        // detached tensors share storage with the var
        let v: Vec<f32> = t.to_vec1().unwrap();
        assert_eq!(v, vec![1., 2.]);
    }
}
