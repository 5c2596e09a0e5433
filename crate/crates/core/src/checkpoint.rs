//! Checkpoint persistence: a small binary container with a JSON manifest
//! (format version, architecture, normalization stats, tensor directory)
//! followed by all tensors as little-endian f32, concatenated in manifest
//! order. Round trips are bit-exact for f32 networks.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{Network, NetworkArch};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"DCNNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub arch: NetworkArch,
    pub norm: Option<NormStats>,
    pub tensors: Vec<TensorEntry>,
}

fn collect_tensors<T: Scalar>(net: &Network<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    net.visit_params(|p, _, name| out.push((name, p.clone())));
    net.visit_buffers(|b, name| out.push((name, b.clone())));
    out
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, norm: Option<NormStats>, path: &Path) -> Result<()> {
    let tensors = collect_tensors(net);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            payload.extend_from_slice(&(Scalar::to_f64(v) as f32).to_le_bytes());
        }
    }
    let manifest = Manifest { version: FORMAT_VERSION, arch: net.arch(), norm, tensors: entries };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::CheckpointFormat { reason: "missing or wrong magic header".into() });
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(Error::CheckpointFormat { reason: "manifest extends past end of file".into() });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: manifest.version, expected: FORMAT_VERSION });
    }
    Ok((manifest, bytes[16 + mlen..].to_vec()))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, Option<NormStats>)> {
    let (manifest, payload) = read_manifest(path)?;
    let mut net = Network::<T>::init(&manifest.arch, 0)?;

    // expected tensor directory, in the same traversal order as save
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    net.visit_params(|p, _, name| expected.push((name, p.shape().to_vec())));
    net.visit_buffers(|b, name| expected.push((name, b.shape().to_vec())));
    if expected.len() != manifest.tensors.len() {
        return Err(Error::CheckpointFormat {
            reason: format!(
                "tensor directory has {} entries, architecture requires {}",
                manifest.tensors.len(),
                expected.len()
            ),
        });
    }
    let mut loaded: Vec<Tensor<T>> = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&manifest.tensors) {
        if entry.name != *name {
            return Err(Error::CheckpointFormat {
                reason: format!("tensor `{}` found where `{}` was expected", entry.name, name),
            });
        }
        if entry.shape != *shape {
            return Err(Error::CheckpointShape {
                name: name.clone(),
                manifest: entry.shape.clone(),
                expected: shape.clone(),
            });
        }
        let count: usize = shape.iter().product();
        let need = entry.offset + 4 * count as u64;
        if need > payload.len() as u64 {
            return Err(Error::CheckpointPayload { need, found: payload.len() as u64 });
        }
        let base = entry.offset as usize;
        let data: Vec<T> = (0..count)
            .map(|k| {
                let b = base + 4 * k;
                T::from_f64(f32::from_le_bytes(payload[b..b + 4].try_into().unwrap()) as f64)
            })
            .collect();
        loaded.push(Tensor::new(shape.clone(), data)?);
    }
    let mut it = loaded.into_iter();
    net.visit_params_mut(|p, _| *p = it.next().unwrap());
    net.visit_buffers_mut(|b| *b = it.next().unwrap());
    Ok((net, manifest.norm))
}
