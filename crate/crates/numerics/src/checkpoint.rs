//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FDCK" | u32 version (=1) | u64 header length | JSON header | f64 payload
//! ```
//!
//! The JSON header carries the model kind, its architecture config, the
//! ordered parameter manifest (name + shape), the RNG seed and the
//! normalization statistics. The payload is every parameter's values
//! concatenated in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FDCK";
pub const VERSION: u32 = 1;

/// Everything in a checkpoint except the parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub normalization: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: serde_json::Value,
    params: Vec<ManifestEntry>,
    seed: u64,
    normalization: serde_json::Value,
}

/// Serialize to the in-memory checkpoint representation.
pub fn checkpoint_bytes(store: &ParamStore, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        kind: meta.kind.clone(),
        config: meta.config.clone(),
        params: store
            .iter()
            .map(|(name, p)| ManifestEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        seed: meta.seed,
        normalization: meta.normalization.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NumericsError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * store.num_scalars());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_save(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let bytes = checkpoint_bytes(store, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ParamStore, CheckpointMeta)> {
    if bytes.len() < 4 {
        return Err(NumericsError::Truncated("missing magic bytes".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(NumericsError::BadMagic(magic));
    }
    if bytes.len() < 16 {
        return Err(NumericsError::Truncated("missing version or header length".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(NumericsError::UnsupportedVersion {
            expected: VERSION,
            found: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16usize
        .checked_add(usize::try_from(header_len).unwrap_or(usize::MAX))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| NumericsError::Truncated(format!("header of {header_len} bytes exceeds file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| NumericsError::Header(e.to_string()))?;

    let payload = &bytes[header_end..];
    if payload.len() % 8 != 0 {
        return Err(NumericsError::Truncated(format!(
            "payload length {} is not a multiple of 8",
            payload.len()
        )));
    }
    let expected: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let found = payload.len() / 8;
    if found < expected {
        return Err(NumericsError::Truncated(format!(
            "manifest needs {expected} values, payload has {found}"
        )));
    }
    if found > expected {
        return Err(NumericsError::Header(format!(
            "manifest needs {expected} values, payload has {found}"
        )));
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut store = ParamStore::new();
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store.insert(entry.name, Tensor::new(entry.shape, data)?)?;
    }
    let meta = CheckpointMeta {
        kind: header.kind,
        config: header.config,
        seed: header.seed,
        normalization: header.normalization,
    };
    Ok((store, meta))
}

pub fn checkpoint_load(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{Activation, Init, Mlp};
    use crate::rng::Rng;
    use serde_json::json;

    fn sample() -> (ParamStore, CheckpointMeta) {
        let mut s = ParamStore::new();
        let mlp = Mlp::new("net", 3, &[7], 2, Activation::Linear);
        mlp.init(&mut s, Init::HeXavierUniform, &mut Rng::new(9)).unwrap();
        let meta = CheckpointMeta {
            kind: "forward".into(),
            config: json!({"hidden": [7], "init": "he_xavier_uniform"}),
            seed: 9,
            normalization: json!({"mean": [0.1, 0.2, 0.3], "std": [1.0, 2.0, 1e-8]}),
        };
        (s, meta)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (s, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint_save(&path, &s, &meta).unwrap();
        let (s2, meta2) = checkpoint_load(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(s.names().collect::<Vec<_>>(), s2.names().collect::<Vec<_>>());
        for ((_, a), (_, b)) in s.iter().zip(s2.iter()) {
            assert_eq!(a.value.shape(), b.value.shape());
            let ba: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
        // Re-serializing gives identical bytes.
        assert_eq!(checkpoint_bytes(&s, &meta).unwrap(), checkpoint_bytes(&s2, &meta2).unwrap());
    }

    #[test]
    fn wrong_magic() {
        let (s, meta) = sample();
        let mut bytes = checkpoint_bytes(&s, &meta).unwrap();
        bytes[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(NumericsError::BadMagic(_))));
    }

    #[test]
    fn wrong_version() {
        let (s, meta) = sample();
        let mut bytes = checkpoint_bytes(&s, &meta).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(NumericsError::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncated_payload() {
        let (s, meta) = sample();
        let bytes = checkpoint_bytes(&s, &meta).unwrap();
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 8]),
            Err(NumericsError::Truncated(_))
        ));
        assert!(checkpoint_from_bytes(&bytes[..10]).is_err());
        assert!(checkpoint_from_bytes(&bytes[..30]).is_err());
    }

    #[test]
    fn manifest_disagrees_with_payload() {
        let (s, meta) = sample();
        let mut bytes = checkpoint_bytes(&s, &meta).unwrap();
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(NumericsError::Header(_))));
    }
}
