//! Safetensors checkpoints holding generator and discriminator parameters,
//! their configurations and a content digest.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{DiscConfig, Discriminator};
use crate::error::{Error, Result};
use crate::model::{Generator, GeneratorConfig};
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "fetnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const GEN_PREFIX: &str = "generator.";
const DISC_PREFIX: &str = "discriminator.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub generator: GeneratorConfig,
    pub discriminator: Option<DiscConfig>,
    pub seed: u64,
    pub step: usize,
    /// Training configuration as JSON, when saved by the trainer.
    pub train_config: Option<serde_json::Value>,
    pub digest: String,
}

/// SHA-256 over every tensor in name order: name, dtype, shape and
/// little-endian bytes.
pub fn tensor_digest(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(format!("{:?}", t.dtype()).as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        match t.dtype() {
            DType::F32 => {
                for v in t.flatten_all()?.to_vec1::<f32>()? {
                    h.update(v.to_le_bytes());
                }
            }
            DType::F64 => {
                for v in t.flatten_all()?.to_vec1::<f64>()? {
                    h.update(v.to_le_bytes());
                }
            }
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?} for {name}"))),
        }
    }
    Ok(hex::encode(h.finalize()))
}

fn collect(store: &ParamStore, prefix: &str, out: &mut BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in store.snapshot()? {
        out.insert(format!("{prefix}{name}"), t.to_dtype(DType::F32)?);
    }
    Ok(())
}

/// Write both networks to `path`; returns the digest.
pub fn save_checkpoint(
    path: &Path,
    generator: &Generator,
    discriminator: Option<&Discriminator>,
    seed: u64,
    step: usize,
    train_config: Option<serde_json::Value>,
) -> Result<String> {
    let mut tensors = BTreeMap::new();
    collect(generator.params(), GEN_PREFIX, &mut tensors)?;
    if let Some(d) = discriminator {
        collect(d.params(), DISC_PREFIX, &mut tensors)?;
    }
    let digest = tensor_digest(&tensors)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        generator: generator.config().clone(),
        discriminator: discriminator.map(|d| d.config().clone()),
        seed,
        step,
        train_config,
        digest: digest.clone(),
    };
    let mut info = HashMap::new();
    info.insert("fetnet".to_string(), serde_json::to_string(&meta)?);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    safetensors::serialize_to_file(tensors.iter().map(|(k, v)| (k.as_str(), v)), Some(info), path)
        .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))?;
    Ok(digest)
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get("fetnet"))
        .ok_or_else(|| Error::Checkpoint("missing checkpoint metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(json)?;
    if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            meta.format, meta.version
        )));
    }
    Ok(meta)
}

fn split(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

/// Read a checkpoint, verify its digest and rebuild both networks.
pub fn load_checkpoint(path: &Path, dtype: DType, device: &Device) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta = read_meta(&bytes)?;
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    let digest = tensor_digest(&tensors)?;
    if digest != meta.digest {
        return Err(Error::Checkpoint(format!(
            "digest mismatch in {}: stored {}, computed {digest}",
            path.display(),
            meta.digest
        )));
    }
    let generator = Generator::new(meta.generator.clone(), 0, dtype, device)?;
    generator.params().assign(&split(&tensors, GEN_PREFIX))?;
    let discriminator = match &meta.discriminator {
        Some(cfg) => {
            let d = Discriminator::new(cfg.clone(), 0, dtype, device)?;
            d.params().assign(&split(&tensors, DISC_PREFIX))?;
            Some(d)
        }
        None => None,
    };
    Ok(LoadedCheckpoint {
        meta,
        generator,
        discriminator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        let g = Generator::new(GeneratorConfig::toy(), 3, DType::F32, &Device::Cpu).unwrap();
        let d = Discriminator::new(DiscConfig::toy(), 4, DType::F32, &Device::Cpu).unwrap();
        let digest = save_checkpoint(&path, &g, Some(&d), 3, 17, None).unwrap();
        let loaded = load_checkpoint(&path, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(loaded.meta.step, 17);
        assert_eq!(loaded.meta.digest, digest);
        let x = random_tensor(&[1, 3, 32, 32], 0.0, 1.0, 5)
            .unwrap()
            .to_dtype(DType::F32)
            .unwrap();
        let a = g
            .forward(&x)
            .unwrap()
            .image
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = loaded
            .generator
            .forward(&x)
            .unwrap()
            .image
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        let m = Tensor::ones((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let sa = d
            .discriminate(&x, &m)
            .unwrap()
            .global_scores
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let sb = loaded
            .discriminator
            .unwrap()
            .discriminate(&x, &m)
            .unwrap()
            .global_scores
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn corrupted_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.safetensors");
        let g = Generator::new(GeneratorConfig::toy(), 3, DType::F32, &Device::Cpu).unwrap();
        save_checkpoint(&path, &g, None, 3, 0, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, DType::F32, &Device::Cpu).err().unwrap();
        assert!(err.to_string().contains("digest"), "{err}");
    }
}
