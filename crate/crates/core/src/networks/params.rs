use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use fpdeblur_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{patchgan, unet, verifier, NetConfig, NetKind};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FPDCKPT1";

/// Standard deviation of the Gaussian weight initialization.
const INIT_STD: f64 = 0.02;

/// Named parameter tensors of one network.
///
/// Values are kept at single precision: every stored value is exactly
/// representable as `f32`, so checkpoints round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub kind: NetKind,
    pub config: NetConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Ordered `(name, shape)` list of a network's parameters.
pub fn shape_table(kind: NetKind, cfg: &NetConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    match kind {
        NetKind::Generator => Ok(unet::shapes(cfg, true)),
        NetKind::RidgeExtractor => Ok(unet::shapes(cfg, false)),
        NetKind::Discriminator { scale } => patchgan::shapes(cfg, scale),
        NetKind::Verifier => Ok(verifier::shapes(cfg)),
    }
}

/// Weights ~ N(0, 0.02²), biases zero, drawn in shape-table order from a
/// ChaCha8 stream seeded with `seed`.
pub fn init_params(kind: NetKind, cfg: &NetConfig, seed: u64) -> Result<ModelParameters> {
    let table = shape_table(kind, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = table
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                (0..n)
                    .map(|_| normal.sample(&mut rng) as f32 as f64)
                    .collect()
            };
            (name, Tensor::new(shape, data).expect("shape table is consistent"))
        })
        .collect();
    Ok(ModelParameters {
        kind,
        config: cfg.clone(),
        tensors,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: NetKind,
    config: NetConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in values.
    offset: usize,
    len: usize,
}

impl ModelParameters {
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("{:?} has no parameter `{name}`", self.kind)))
    }

    /// Checks names, shapes and finiteness against the config's shape table.
    pub fn validate(&self) -> Result<()> {
        let table = shape_table(self.kind, &self.config)?;
        if table.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "{:?}: expected {} tensors, found {}",
                self.kind,
                table.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in table {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name}: shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!("{name} holds non-finite values")));
            }
        }
        Ok(())
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams {
            kind: self.kind,
            config: self.config.clone(),
            vars,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len(),
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind,
            config: self.config.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err("not a checkpoint file".into());
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or("truncated header")?;
        let header: Header =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| format!("bad header: {e}"))?;
        let data = &bytes[body..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let (start, end) = (e.offset * 4, (e.offset + e.len) * 4);
            if end > data.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(format!("tensor `{}` is out of bounds", e.name));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(e.shape, values).map_err(|err| err.to_string())?;
            tensors.insert(e.name, t);
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let params = Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))?;
        params.validate()?;
        Ok(params)
    }

    /// Loads a checkpoint and checks it holds a network of `kind`.
    pub fn load_kind(path: &Path, kind: NetKind) -> Result<Self> {
        let p = Self::load(path)?;
        if p.kind != kind {
            return Err(Error::Config(format!(
                "{}: holds {:?}, expected {kind:?}",
                path.display(),
                p.kind
            )));
        }
        Ok(p)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    /// Rounds every value to single precision.
    pub fn quantize(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters recorded on a tape, looked up by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub kind: NetKind,
    pub config: NetConfig,
    pub vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("{:?} has no parameter `{name}`", self.kind)))
    }

    pub(crate) fn expect_kind(&self, want: impl Fn(NetKind) -> bool, what: &str) -> Result<()> {
        if want(self.kind) {
            Ok(())
        } else {
            Err(Error::Config(format!("expected {what} parameters, got {:?}", self.kind)))
        }
    }
}
