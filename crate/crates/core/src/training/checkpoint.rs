//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FCSIN-CKPT-1"
//! u32 config length, config text (UTF-8, canonical key = value form)
//! u64 seed, u64 epoch, u64 batch, u64 step, u64 faults
//! u32 tensor count, then per tensor, sorted by name:
//!   u32 name length, name, u8 dtype (1 = f64), u32 rank, u64 dims..., f64 data...
//! ```
//!
//! Tensor names are `param/<name>`, `adamax.m/<name>` and `adamax.u/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::u_transformer::ModelParams;

use super::adamax::OptimState;
use super::config::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"FCSIN-CKPT-1";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub seed: u64,
    /// Epoch in progress.
    pub epoch: u64,
    /// Next batch index within `epoch`.
    pub batch: u64,
    pub params: ModelParams,
    pub optim: OptimState,
}

impl Checkpoint {
    /// Serialise to the binary layout described in the module docs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for v in [self.seed, self.epoch, self.batch, self.optim.step, self.optim.faults] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut tensors: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (prefix, map) in [
            ("param/", &self.params.tensors),
            ("adamax.m/", &self.optim.m),
            ("adamax.u/", &self.optim.u),
        ] {
            for (k, t) in map {
                tensors.insert(format!("{prefix}{k}"), t);
            }
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic; not an FCSIN-CKPT-1 file".into()));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = TrainConfig::parse_text(text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let (seed, epoch, batch, step, faults) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let count = r.u32()? as usize;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut u = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            if r.take(1)?[0] != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("tensor {name}: unsupported dtype")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l <= bytes.len() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: implausible shape {shape:?}")))?;
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data);
            let slot = if let Some(k) = name.strip_prefix("param/") {
                params.insert(k.to_string(), t)
            } else if let Some(k) = name.strip_prefix("adamax.m/") {
                m.insert(k.to_string(), t)
            } else if let Some(k) = name.strip_prefix("adamax.u/") {
                u.insert(k.to_string(), t)
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            };
            if slot.is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ck = Self {
            config,
            seed,
            epoch,
            batch,
            params: ModelParams { tensors: params },
            optim: OptimState { m, u, step, faults },
        };
        ck.check_consistency()?;
        Ok(ck)
    }

    /// Parameters must match the configuration; moments must mirror parameters.
    fn check_consistency(&self) -> Result<()> {
        let specs = crate::u_transformer::param_specs(&self.config.net_config());
        let expected: BTreeMap<&str, &Vec<usize>> = specs.iter().map(|s| (s.name.as_str(), &s.shape)).collect();
        let actual: BTreeMap<&str, &Vec<usize>> = self.params.tensors.iter().map(|(k, t)| (k.as_str(), &t.shape)).collect();
        if expected != actual {
            return Err(Error::Checkpoint("parameter set does not match the embedded configuration".into()));
        }
        for moments in [&self.optim.m, &self.optim.u] {
            let shapes: BTreeMap<&str, &Vec<usize>> = moments.iter().map(|(k, t)| (k.as_str(), &t.shape)).collect();
            if shapes != actual {
                return Err(Error::Checkpoint("optimizer moments do not mirror the parameters".into()));
            }
        }
        Ok(())
    }

    /// Write atomically: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::u_transformer::ModelParams;

    fn sample() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.net = crate::u_transformer::NetConfig::tiny();
        let params = ModelParams::init(&config.net_config(), 5).unwrap();
        let mut optim = OptimState::new(&params.tensors);
        optim.step = 3;
        optim.faults = 1;
        optim.u.values_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.25));
        Checkpoint {
            config,
            seed: 5,
            epoch: 2,
            batch: 1,
            params,
            optim,
        }
    }

    #[test]
    fn bytes_round_trip_identically() {
        let c = sample();
        let b = c.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        assert!(Checkpoint::from_bytes(&[]).is_err());
    }

    #[test]
    fn file_save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/model.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert!(Checkpoint::load(dir.path().join("missing.ckpt")).is_err());
    }
}
