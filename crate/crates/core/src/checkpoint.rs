//! Self-describing checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "FMRLCKPT"
//! 8       4     format version (currently 1)
//! 12      8     header length H in bytes
//! 20      H     JSON header (UTF-8)
//! 20+H    ...   tensor payload: f64 LE values, concatenated in header order
//! ```
//!
//! The JSON header holds arbitrary `meta` plus one entry per network:
//! its name, full [`NetworkSpec`], and the name/shape of every tensor.
//! Payload order is exactly the header order, so the file round-trips
//! losslessly and can be parsed without famarl-core.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{NetworkSpec, ParamSet};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FMRLCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkHeader {
    name: String,
    spec: NetworkSpec,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    networks: Vec<NetworkHeader>,
}

/// A named set of (spec, params) pairs plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub meta: serde_json::Value,
    pub networks: Vec<(String, NetworkSpec, ParamSet)>,
}

impl CheckpointBundle {
    pub fn network(&self, name: &str) -> Result<(&NetworkSpec, &ParamSet)> {
        self.networks
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, p)| (s, p))
            .ok_or_else(|| Error::config(format!("checkpoint has no network '{name}'")))
    }
}

pub fn save(path: &Path, bundle: &CheckpointBundle) -> Result<()> {
    let header = Header {
        meta: bundle.meta.clone(),
        networks: bundle
            .networks
            .iter()
            .map(|(name, spec, params)| NetworkHeader {
                name: name.clone(),
                spec: spec.clone(),
                tensors: params
                    .tensors
                    .iter()
                    .map(|(n, t)| TensorHeader {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, _, params) in &bundle.networks {
        for (_, t) in &params.tensors {
            for v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointBundle> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::config(format!(
            "not a checkpoint file: {}",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::config(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut networks = Vec::with_capacity(header.networks.len());
    for nh in header.networks {
        let mut tensors = Vec::with_capacity(nh.tensors.len());
        for th in nh.tensors {
            let n: usize = th.shape.iter().product();
            let mut data = vec![0.0f64; n];
            for v in &mut data {
                f.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
            tensors.push((th.name, Tensor::new(th.shape, data)?));
        }
        networks.push((nh.name, nh.spec, ParamSet { tensors }));
    }
    Ok(CheckpointBundle {
        meta: header.meta,
        networks,
    })
}

/// SHA-256 of a file, hex-encoded. Used to compare checkpoints across runs.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let out = hasher.finalize();
    Ok(out.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Block;

    fn sample_bundle(seed: u64) -> CheckpointBundle {
        let spec = NetworkSpec::new(
            vec![3],
            vec![
                Block::Dense { input: 3, output: 5 },
                Block::Tanh,
                Block::Dense { input: 5, output: 2 },
            ],
            seed,
        )
        .unwrap();
        let params = spec.init_params();
        CheckpointBundle {
            meta: serde_json::json!({"kind": "test", "seed": seed}),
            networks: vec![("actor".into(), spec, params)],
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let bundle = sample_bundle(11);
        save(&path, &bundle).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(bundle, loaded);
    }

    #[test]
    fn digest_is_stable_across_identical_saves() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save(&a, &sample_bundle(5)).unwrap();
        save(&b, &sample_bundle(5)).unwrap();
        assert_eq!(file_digest(&a).unwrap(), file_digest(&b).unwrap());
        let c = dir.path().join("c.ckpt");
        save(&c, &sample_bundle(6)).unwrap();
        assert_ne!(file_digest(&a).unwrap(), file_digest(&c).unwrap());
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
