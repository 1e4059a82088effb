//! Binary policy checkpoints.
//!
//! Layout (little-endian): magic `GRPOCKPT`, `u32` version, `u64` state_dim,
//! hidden_dim, num_actions, env_seed, init_seed, step, a `u32`-length-prefixed
//! UTF-8 config hash, `u64` parameter count, then the parameters as `f64` in
//! `w1, b1, w2, b2` order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::PolicyParams;

const MAGIC: &[u8; 8] = b"GRPOCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lineage {
    pub env_seed: u64,
    pub init_seed: u64,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyParams,
    pub lineage: Lineage,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.policy;
        let hash = self.lineage.config_hash.as_bytes();
        let mut out = Vec::with_capacity(80 + hash.len() + 8 * p.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            p.state_dim() as u64,
            p.hidden_dim() as u64,
            p.num_actions() as u64,
            self.lineage.env_seed,
            self.lineage.init_seed,
            self.lineage.step,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        out.extend_from_slice(hash);
        out.extend_from_slice(&(p.num_params() as u64).to_le_bytes());
        for v in p.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a policy checkpoint (bad magic)".into(),
            ));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let state_dim = r.usize()?;
        let hidden_dim = r.usize()?;
        let num_actions = r.usize()?;
        let env_seed = r.u64()?;
        let init_seed = r.u64()?;
        let step = r.u64()?;
        let hash_len = u32::from_le_bytes(r.array()?) as usize;
        let config_hash = String::from_utf8(r.take(hash_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config hash is not UTF-8".into()))?;
        let count = r.usize()?;
        let expected = hidden_dim * state_dim + hidden_dim + num_actions * hidden_dim + num_actions;
        if count != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count {count} does not match dims ({expected})"
            )));
        }
        let values = (0..count)
            .map(|_| r.array().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Checkpoint {
            policy: PolicyParams::from_flat(state_dim, num_actions, hidden_dim, &values)?,
            lineage: Lineage {
                env_seed,
                init_seed,
                step,
                config_hash,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))
    }
}
