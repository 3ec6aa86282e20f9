//! Named learnable tensors and the checkpoint archive.
//!
//! A checkpoint is a single safetensors file. Its metadata carries the model
//! config as JSON, the config hash (verified on load), the model kind and any
//! extra key/values the writer adds (training position, optimizer step).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

/// Parameters keyed by dotted path; iteration order is the key order.
#[derive(Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    frozen: bool,
}

impl ParamStore {
    /// Empty store that initializes parameters on first request.
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng: rng_for(seed, &[0x9a7a]),
            frozen: false,
        }
    }

    /// Store whose parameters all come from `tensors`; requesting a missing
    /// name is an error.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let dtype = tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            if t.dtype() != dtype {
                return Err(Error::Checkpoint(format!("parameter {name} has mixed dtype")));
            }
            vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            dtype,
            device: Device::Cpu,
            vars,
            rng: rng_for(0, &[]),
            frozen: true,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        if self.frozen {
            return Err(Error::Checkpoint(format!("parameter {name} missing")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| self.rng.random_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy with every parameter converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let tensors = self
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(dtype)?.copy()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        ParamStore::from_tensors(tensors)
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    PomNet,
    ProtoNet,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::PomNet => "pomnet",
            ModelKind::ProtoNet => "protonet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pomnet" => Ok(ModelKind::PomNet),
            "protonet" => Ok(ModelKind::ProtoNet),
            other => Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Splits tensors by prefix: names starting with `prefix.` are returned
    /// with the prefix removed.
    pub fn take_prefixed(&mut self, prefix: &str) -> BTreeMap<String, Tensor> {
        let dotted = format!("{prefix}.");
        let keys: Vec<_> = self.tensors.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let t = self.tensors.remove(&k).expect("key present");
                (k[dotted.len()..].to_string(), t)
            })
            .collect()
    }
}

fn to_st_dtype(dtype: DType) -> Result<StDtype> {
    Ok(match dtype {
        DType::F32 => StDtype::F32,
        DType::F64 => StDtype::F64,
        DType::U32 => StDtype::U32,
        DType::I64 => StDtype::I64,
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U32 => flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::I64 => flat.to_vec1::<i64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_from_view(view: &TensorView<'_>) -> Result<Tensor> {
    let shape = view.shape().to_vec();
    let data = view.data();
    let dev = Device::Cpu;
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        StDtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        StDtype::U32 => {
            let v: Vec<u32> = data.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        StDtype::I64 => {
            let v: Vec<i64> = data.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut metadata: HashMap<String, String> = checkpoint.metadata.clone().into_iter().collect();
    metadata.insert("kind".into(), checkpoint.kind.as_str().into());
    metadata.insert("config".into(), serde_json::to_string(&checkpoint.config)?);
    metadata.insert("config_hash".into(), checkpoint.config.hash());

    let buffers = checkpoint
        .tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.dtype(), t.dims().to_vec(), tensor_bytes(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let views = buffers
        .iter()
        .map(|(k, dt, shape, bytes)| {
            let view = TensorView::new(to_st_dtype(*dt)?, shape.clone(), bytes)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            Ok((k.clone(), view))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(metadata)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut metadata: BTreeMap<String, String> = meta.metadata().clone().unwrap_or_default().into_iter().collect();
    let get = |m: &mut BTreeMap<String, String>, k: &str| {
        m.remove(k)
            .ok_or_else(|| Error::Checkpoint(format!("{}: metadata key {k:?} missing", path.display())))
    };
    let kind = ModelKind::parse(&get(&mut metadata, "kind")?)?;
    let config: ModelConfig = serde_json::from_str(&get(&mut metadata, "config")?)?;
    let stored_hash = get(&mut metadata, "config_hash")?;
    if stored_hash != config.hash() {
        return Err(Error::Checkpoint(format!(
            "{}: config hash mismatch (stored {stored_hash}, computed {})",
            path.display(),
            config.hash()
        )));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        tensors.insert(name, tensor_from_view(&view)?);
    }
    Ok(Checkpoint {
        kind,
        config,
        tensors,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shapes_checked() {
        let mut a = ParamStore::new(DType::F32, 3);
        let mut b = ParamStore::new(DType::F32, 3);
        let ta = a.param("w", &[2, 3], Init::Normal(1.0)).unwrap();
        let tb = b.param("w", &[2, 3], Init::Normal(1.0)).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
        assert!(a.param("w", &[3, 2], Init::Zeros).is_err());
        let frozen = ParamStore::from_tensors(a.tensors()).unwrap();
        let mut frozen = frozen;
        assert!(frozen.param("missing", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new(DType::F32, 1);
        store.param("a.weight", &[4, 5], Init::Normal(0.3)).unwrap();
        store.param("b", &[7], Init::Uniform(2.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let mut metadata = BTreeMap::new();
        metadata.insert("epoch".to_string(), "3".to_string());
        let ck = Checkpoint {
            kind: ModelKind::PomNet,
            config: ModelConfig::tiny(),
            tensors: store.tensors(),
            metadata,
        };
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.kind, ModelKind::PomNet);
        assert_eq!(back.config, ModelConfig::tiny());
        assert_eq!(back.metadata.get("epoch").map(String::as_str), Some("3"));
        for (k, t) in &ck.tensors {
            let a: Vec<u32> = t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.tensors[k].flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
            assert_eq!(t.dims(), back.tensors[k].dims());
        }
    }

    #[test]
    fn tampered_config_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let ck = Checkpoint {
            kind: ModelKind::ProtoNet,
            config: ModelConfig::tiny(),
            tensors: BTreeMap::from([("x".to_string(), Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap())]),
            metadata: BTreeMap::new(),
        };
        save_checkpoint(&path, &ck).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let needle = b"\\\"slot_count\\\":8";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).expect("config in header");
        bytes[pos + needle.len() - 1] = b'9';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(m)) if m.contains("hash")));
    }
}
