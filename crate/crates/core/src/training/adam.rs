use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fpdeblur_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::networks::ModelParameters;
use crate::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;
const OPT_MAGIC: &[u8; 8] = b"FPDOPT01";

/// Adam with bias correction. Moments are kept in double precision and
/// parameters are rounded back to single precision after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    t: u64,
    entries: Vec<(String, usize)>,
}

impl Adam {
    pub fn new(params: &ModelParameters, learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        let moments = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), (vec![0.0; t.len()], vec![0.0; t.len()])))
            .collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            t: 0,
            moments,
        }
    }

    /// One update. Parameters without a gradient see a zero gradient.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, lr) = (self.beta1, self.beta2, self.learning_rate);
        for (name, p) in params.tensors.iter_mut() {
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer has no state for `{name}`")))?;
            let g = grads.get(name).map(|g| g.data());
            if let Some(g) = g {
                if g.len() != m.len() {
                    return Err(Error::Config(format!("gradient of `{name}` has the wrong size")));
                }
            }
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
        params.quantize();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&OptHeader {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            t: self.t,
            entries: self.moments.iter().map(|(k, (m, _))| (k.clone(), m.len())).collect(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(OPT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (m, v) in self.moments.values() {
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..8] != OPT_MAGIC {
            return Err("not an optimizer state file".into());
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or("truncated header")?;
        let h: OptHeader =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| format!("bad header: {e}"))?;
        let mut values = bytes[body..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut moments = BTreeMap::new();
        for (name, len) in h.entries {
            let m: Vec<f64> = values.by_ref().take(len).collect();
            let v: Vec<f64> = values.by_ref().take(len).collect();
            if m.len() != len || v.len() != len {
                return Err(format!("moments of `{name}` are truncated"));
            }
            moments.insert(name, (m, v));
        }
        if values.next().is_some() {
            return Err("trailing data".into());
        }
        Ok(Self {
            learning_rate: h.learning_rate,
            beta1: h.beta1,
            beta2: h.beta2,
            t: h.t,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetKind;

    fn one_param(v: f64) -> ModelParameters {
        let mut tensors = BTreeMap::new();
        tensors.insert("w".to_string(), Tensor::full(&[2], v));
        ModelParameters {
            kind: NetKind::Generator,
            config: Default::default(),
            tensors,
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one_param(1.0);
        let mut opt = Adam::new(&p, 0.01, 0.5, 0.999);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
        opt.step(&mut p, &g).unwrap();
        let d = p.tensors["w"].data();
        assert!((d[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((d[1] - (1.0 + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn bytes_round_trip() {
        let mut p = one_param(0.5);
        let mut opt = Adam::new(&p, 2e-4, 0.5, 0.999);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(vec![2], vec![0.1, 0.2]).unwrap());
        opt.step(&mut p, &g).unwrap();
        assert_eq!(Adam::from_bytes(&opt.to_bytes()).unwrap(), opt);
        assert!(Adam::from_bytes(b"garbage").is_err());
    }
}
