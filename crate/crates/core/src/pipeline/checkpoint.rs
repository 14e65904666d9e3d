//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TFCK" | version u32 | phase str | seed u64 | config hash [u8; 32]
//! | array count u32 | { name str | ndim u32 | dims u64* | data f64* }*
//! ```
//!
//! where `str` is a `u32` byte length followed by UTF-8. Arrays keep their
//! insertion order, so equal contents always give equal bytes.

use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::search_space::{
    derive_architecture, ArchitectureWeights, DiscreteArchitecture, EdgeLogits, NetworkParams,
};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `search`, `meta` or `joint`.
    pub phase: String,
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub arrays: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(phase: &str, seed: u64, config_hash: [u8; 32]) -> Self {
        Self {
            phase: phase.to_string(),
            seed,
            config_hash,
            arrays: IndexMap::new(),
        }
    }

    /// Stores the logits of every edge as `alpha.e<i>`.
    pub fn set_alpha(&mut self, alpha: &ArchitectureWeights) {
        for (i, e) in alpha.edges().iter().enumerate() {
            self.arrays
                .insert(format!("alpha.e{i}"), Tensor::from_vec(e.logits.clone()));
        }
    }

    /// Logits restored onto the candidate structure of `template`.
    pub fn alpha(&self, template: &ArchitectureWeights) -> Result<Option<ArchitectureWeights>> {
        if !self.arrays.contains_key("alpha.e0") {
            return Ok(None);
        }
        let mut edges = Vec::with_capacity(template.edge_count());
        for (i, e) in template.edges().iter().enumerate() {
            let t = self.array(&format!("alpha.e{i}"))?;
            if t.numel() != e.candidates.len() {
                return Err(Error::Checkpoint(format!(
                    "alpha.e{i} has {} logits, edge has {} candidates",
                    t.numel(),
                    e.candidates.len()
                )));
            }
            edges.push(EdgeLogits {
                candidates: e.candidates.clone(),
                logits: t.data().to_vec(),
            });
        }
        if self
            .arrays
            .contains_key(&format!("alpha.e{}", template.edge_count()))
        {
            return Err(Error::Checkpoint(
                "checkpoint has more architecture edges than the network".into(),
            ));
        }
        ArchitectureWeights::from_edges(edges).map(Some)
    }

    pub fn set_derived(&mut self, arch: &DiscreteArchitecture) {
        self.arrays.insert(
            "derived".into(),
            Tensor::from_vec(arch.choices().iter().map(|&c| c as f64).collect()),
        );
    }

    /// Stored per-edge choices, with operator ids taken from `template`.
    pub fn derived(&self, template: &ArchitectureWeights) -> Result<Option<DiscreteArchitecture>> {
        let Some(t) = self.arrays.get("derived") else {
            return Ok(None);
        };
        if t.numel() != template.edge_count() {
            return Err(Error::Checkpoint(format!(
                "{} derived choices for {} edges",
                t.numel(),
                template.edge_count()
            )));
        }
        let mut edges = Vec::with_capacity(t.numel());
        for (e, &c) in template.edges().iter().zip(t.data()) {
            let c = c as usize;
            if c >= e.candidates.len() {
                return Err(Error::Checkpoint(format!(
                    "derived choice {c} out of range for {:?}",
                    e.candidates
                )));
            }
            let logits = (0..e.candidates.len())
                .map(|i| if i == c { 1.0 } else { 0.0 })
                .collect();
            edges.push(EdgeLogits {
                candidates: e.candidates.clone(),
                logits,
            });
        }
        Ok(Some(derive_architecture(&ArchitectureWeights::from_edges(
            edges,
        )?)))
    }

    /// Stores every parameter as `<prefix>/<name>`.
    pub fn set_params(&mut self, prefix: &str, params: &NetworkParams) {
        for (name, t) in params.iter() {
            self.arrays.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Parameters under `prefix` restored onto `template`'s layout.
    pub fn params(&self, prefix: &str, template: &NetworkParams) -> Result<Option<NetworkParams>> {
        let first = template.iter().next().map(|(n, _)| format!("{prefix}/{n}"));
        if first.is_some_and(|k| !self.arrays.contains_key(&k)) {
            return Ok(None);
        }
        let mut out = NetworkParams::new();
        for (name, t) in template.iter() {
            let stored = self.array(&format!("{prefix}/{name}"))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{prefix}/{name}: stored shape {:?}, network expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            out.insert(name, stored.clone())?;
        }
        Ok(Some(out))
    }

    fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    /// Rejects a checkpoint written under another configuration unless
    /// `allow_mismatch`, in which case it only warns.
    pub fn check_config(&self, hash: &[u8; 32], allow_mismatch: bool) -> Result<()> {
        if &self.config_hash == hash {
            return Ok(());
        }
        let msg = format!(
            "{} checkpoint was written with config {}, current config is {}",
            self.phase,
            hex::encode(self.config_hash),
            hex::encode(hash)
        );
        if allow_mismatch {
            log::warn!("{msg}; loading anyway");
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "{msg} (pass the override flag to load anyway)"
            )))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.phase);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let phase = r.str()?;
        let seed = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n = r.u32()? as usize;
        let mut arrays = IndexMap::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            arrays.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            phase,
            seed,
            config_hash,
            arrays,
        })
    }

    /// Writes the file and returns its SHA-256.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFiles(vec![path.to_path_buf()]));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
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
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 name".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("meta", 42, [7; 32]);
        let alpha =
            ArchitectureWeights::uniform(vec![vec!["a".into(), "b".into()], vec!["c".into()]]);
        c.set_alpha(&alpha);
        let mut p = NetworkParams::new();
        p.insert(
            "w",
            Tensor::new(
                vec![2, 3],
                vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, 1e300],
            )
            .unwrap(),
        )
        .unwrap();
        c.set_params("fusion", &p);
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.sha256(), c.sha256());
    }

    #[test]
    fn header_is_little_endian() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"TFCK");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[4, 0, 0, 0]);
        assert_eq!(&b[12..16], b"meta");
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"nope").is_err());
    }

    #[test]
    fn config_mismatch_needs_override() {
        let c = sample();
        assert!(c.check_config(&[7; 32], false).is_ok());
        assert!(matches!(
            c.check_config(&[8; 32], false),
            Err(Error::Checkpoint(_))
        ));
        assert!(c.check_config(&[8; 32], true).is_ok());
    }

    #[test]
    fn params_restore_onto_template() {
        let c = sample();
        let mut template = NetworkParams::new();
        template.insert("w", Tensor::zeros(vec![2, 3])).unwrap();
        let p = c.params("fusion", &template).unwrap().unwrap();
        assert_eq!(p.get("w").unwrap().data()[1], -2.5);
        assert!(c.params("task", &template).unwrap().is_none());
        let mut wrong = NetworkParams::new();
        wrong.insert("w", Tensor::zeros(vec![3, 2])).unwrap();
        assert!(c.params("fusion", &wrong).is_err());
    }
}
