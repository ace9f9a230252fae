//! Checkpoint files.
//!
//! Layout, little-endian: magic `AAPTCKPT1`, u8 stage tag, u32 length and
//! UTF-8 bytes of the config snapshot, u32 tensor count, then per tensor a
//! u32 name length, name, u32 rank, u32 dims, u64 byte offset into the
//! payload; finally u64 payload length and the f32 payload.

use std::path::Path;

use crate::config::{RunConfig, Stage};
use crate::error::{AaptError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"AAPTCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Resolved config of the run that wrote the file.
    pub config: String,
    /// Tensors named `group/param`.
    pub tensors: ParamSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: &RunConfig) -> Self {
        Checkpoint { stage, config: config.resolved(), tensors: ParamSet::new() }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.config)
    }

    pub fn insert_group(&mut self, group: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.push(format!("{group}/{name}"), t.clone());
        }
    }

    pub fn has_group(&self, group: &str) -> bool {
        let p = format!("{group}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&p))
    }

    /// Tensors of `group` with the prefix stripped.
    pub fn group(&self, group: &str) -> Result<ParamSet> {
        let p = format!("{group}/");
        let mut out = ParamSet::new();
        for (n, t) in self.tensors.iter() {
            if let Some(rest) = n.strip_prefix(&p) {
                out.push(rest, t.clone());
            }
        }
        if out.is_empty() {
            return Err(AaptError::Format(format!("checkpoint has no {group:?} tensors")));
        }
        Ok(out)
    }

    /// Fails with a provenance error unless the file came from `stage`.
    pub fn require(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(AaptError::Provenance { expected: stage.name().into(), found: self.stage.name().into() });
        }
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(n, t)| {
                let e = ManifestEntry { name: n.to_string(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.push(self.stage.tag());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        let manifest = self.manifest();
        b.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        for e in &manifest {
            b.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            b.extend_from_slice(e.name.as_bytes());
            b.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                b.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            b.extend_from_slice(&e.offset.to_le_bytes());
        }
        let payload: usize = self.tensors.tensors().iter().map(|t| 4 * t.numel()).sum();
        b.extend_from_slice(&(payload as u64).to_le_bytes());
        for t in self.tensors.tensors() {
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(AaptError::Format("not a checkpoint (bad magic)".into()));
        }
        let tag = r.take(1)?[0];
        let stage = Stage::from_tag(tag).ok_or_else(|| AaptError::Format(format!("unknown stage tag {tag}")))?;
        let n = r.u32()? as usize;
        let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| AaptError::Format("config is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| AaptError::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            manifest.push(ManifestEntry { name, shape, offset });
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        if r.pos != bytes.len() {
            return Err(AaptError::Format("trailing bytes after payload".into()));
        }
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.len());
        let mut tensors = ParamSet::new();
        for e in &manifest {
            let numel: usize = e.shape.iter().product();
            let end = e.offset + 4 * numel as u64;
            if end > payload_len as u64 {
                return Err(AaptError::Format(format!("tensor {} runs past the payload", e.name)));
            }
            spans.push((e.offset, end, &e.name));
            let raw = &payload[e.offset as usize..end as usize];
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        spans.sort();
        if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
            return Err(AaptError::Format(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
        Ok(Checkpoint { stage, config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(AaptError::Format("truncated checkpoint".into()));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamSet::new();
        ps.push("a.w", Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, -1e-30, 7.0]).unwrap());
        ps.push("b", Tensor::scalar(0.25));
        let mut c = Checkpoint::new(Stage::Stage1, &RunConfig::tiny());
        c.insert_group("gen", &ps);
        c
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.stage, Stage::Stage1);
        assert_eq!(back.run_config().unwrap(), RunConfig::tiny());
        for (a, b) in c.tensors.tensors().iter().zip(back.tensors.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.group("gen").unwrap().index_of("a.w"), Some(0));
        assert!(back.group("disc").is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(AaptError::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut tag = bytes.clone();
        tag[9] = 9;
        assert!(Checkpoint::from_bytes(&tag).is_err());
    }

    #[test]
    fn provenance_gate() {
        let c = sample();
        assert!(c.require(Stage::Stage1).is_ok());
        assert!(matches!(c.require(Stage::Stage2), Err(AaptError::Provenance { .. })));
        let m = c.manifest();
        assert_eq!(m[1].offset, 24);
    }
}
