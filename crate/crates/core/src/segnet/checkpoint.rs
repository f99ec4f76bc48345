//! `ONDA1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ONDA1" | version u32 | header_len u32 | header JSON
//!        | f64 payload per manifest tensor, in manifest order
//!        | [bank section: eta f64*, sigma2 f64*, class_seen u8*, class_counts u64*]
//!        | crc32 u32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ConvBlock, ModelCheckpoint, Role};
use crate::autodiff::BnState;
#[cfg(test)]
use crate::error::OndaError;
use crate::error::{CheckpointError, Result};
use crate::proto::{DistanceNorm, PrototypeBank, VarianceMode};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ONDA1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankMeta {
    classes: usize,
    dim: usize,
    lambda: f64,
    norm: DistanceNorm,
    variance_mode: VarianceMode,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    role: Role,
    bn_momentum: f64,
    bn_eps: f64,
    tensors: Vec<TensorEntry>,
    bank: Option<BankMeta>,
}

fn manifest(model: &ModelCheckpoint) -> Vec<(String, &[usize], Vec<f64>)> {
    let mut out: Vec<(String, &[usize], Vec<f64>)> = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        out.push((
            format!("block{i}.kernel"),
            b.kernel.shape(),
            b.kernel.data().to_vec(),
        ));
        out.push((
            format!("block{i}.bias"),
            b.bias.shape(),
            b.bias.data().to_vec(),
        ));
        out.push((
            format!("block{i}.gamma"),
            b.gamma.shape(),
            b.gamma.data().to_vec(),
        ));
        out.push((
            format!("block{i}.beta"),
            b.beta.shape(),
            b.beta.data().to_vec(),
        ));
        out.push((
            format!("block{i}.running_mean"),
            b.bias.shape(),
            b.bn.running_mean.clone(),
        ));
        out.push((
            format!("block{i}.running_var"),
            b.bias.shape(),
            b.bn.running_var.clone(),
        ));
    }
    out.push((
        "classifier.kernel".into(),
        model.classifier_kernel.shape(),
        model.classifier_kernel.data().to_vec(),
    ));
    out.push((
        "classifier.bias".into(),
        model.classifier_bias.shape(),
        model.classifier_bias.data().to_vec(),
    ));
    out
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ModelCheckpoint,
    bank: Option<&PrototypeBank>,
) -> Result<()> {
    fs::write(path, encode(model, bank)?)?;
    Ok(())
}

pub(crate) fn encode(model: &ModelCheckpoint, bank: Option<&PrototypeBank>) -> Result<Vec<u8>> {
    let entries = manifest(model);
    let bn0 = &model.blocks[0].bn;
    let header = Header {
        arch: model.arch.clone(),
        role: model.role,
        bn_momentum: bn0.momentum,
        bn_eps: bn0.eps,
        tensors: entries
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.to_vec(),
            })
            .collect(),
        bank: bank.map(|b| BankMeta {
            classes: b.num_classes(),
            dim: b.dim(),
            lambda: b.lambda,
            norm: b.norm,
            variance_mode: b.variance_mode,
        }),
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for (_, _, data) in &entries {
        data.iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    }
    if let Some(b) = bank {
        b.eta
            .iter()
            .chain(&b.sigma2)
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        buf.extend(b.class_seen.iter().map(|&s| s as u8));
        b.class_counts
            .iter()
            .for_each(|c| buf.extend_from_slice(&c.to_le_bytes()));
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Loads a checkpoint and its optional prototype bank.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelCheckpoint, Option<PrototypeBank>)> {
    decode(&fs::read(path)?)
}

/// Like [`load_checkpoint`], but rejects files built for a different architecture.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    arch: &ArchConfig,
) -> Result<(ModelCheckpoint, Option<PrototypeBank>)> {
    let (m, b) = load_checkpoint(path)?;
    if &m.arch != arch {
        return Err(CheckpointError::Incompatible(format!(
            "file has {:?}, expected {:?}",
            m.arch, arch
        ))
        .into());
    }
    Ok((m, b))
}

pub(crate) fn decode(bytes: &[u8]) -> Result<(ModelCheckpoint, Option<PrototypeBank>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return Err(CheckpointError::Truncated.into());
    }
    if &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut r = Reader { buf: bytes, pos: 5 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version).into());
    }
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated.into());
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let arch = header.arch.clone();
    arch.validate()
        .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;

    // Shapes in the header must agree with what the declared arch implies.
    let template = super::init_model(&arch, 0)?;
    let expected = manifest(&template);
    if expected.len() != header.tensors.len() {
        return Err(CheckpointError::Incompatible(format!(
            "{} tensors declared, arch implies {}",
            header.tensors.len(),
            expected.len()
        ))
        .into());
    }
    for ((name, shape, _), entry) in expected.iter().zip(&header.tensors) {
        if name != &entry.name || *shape != entry.shape.as_slice() {
            return Err(CheckpointError::Incompatible(format!(
                "tensor {} has shape {:?}, arch implies {name} {shape:?}",
                entry.name, entry.shape
            ))
            .into());
        }
    }
    let mut values = Vec::with_capacity(expected.len());
    for entry in &header.tensors {
        values.push(r.f64s(entry.shape.iter().product())?);
    }
    let bank = match &header.bank {
        None => None,
        Some(meta) => {
            let eta = r.f64s(meta.classes * meta.dim)?;
            let sigma2 = r.f64s(meta.dim)?;
            let class_seen = r.take(meta.classes)?.iter().map(|&b| b != 0).collect();
            let class_counts = (0..meta.classes)
                .map(|_| r.u64())
                .collect::<Result<Vec<_>, _>>()?;
            Some(PrototypeBank {
                eta,
                sigma2,
                class_seen,
                class_counts,
                lambda: meta.lambda,
                norm: meta.norm,
                variance_mode: meta.variance_mode,
            })
        }
    };
    if r.pos != body_end {
        return Err(if r.pos > body_end {
            CheckpointError::Truncated
        } else {
            CheckpointError::Header(format!("{} trailing bytes", body_end - r.pos))
        }
        .into());
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if computed != stored {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }

    let mut it = values.into_iter();
    let mut next = |shape: &[usize]| -> Result<Tensor> {
        Tensor::new(shape.to_vec(), it.next().expect("manifest length checked"))
    };
    let mut blocks = Vec::with_capacity(template.blocks.len());
    for tb in &template.blocks {
        let kernel = next(tb.kernel.shape())?.with_grad();
        let bias = next(tb.bias.shape())?.with_grad();
        let gamma = next(tb.gamma.shape())?.with_grad();
        let beta = next(tb.beta.shape())?.with_grad();
        let running_mean = next(tb.bias.shape())?.into_data();
        let running_var = next(tb.bias.shape())?.into_data();
        blocks.push(ConvBlock {
            kernel,
            bias,
            gamma,
            beta,
            bn: BnState {
                running_mean,
                running_var,
                momentum: header.bn_momentum,
                eps: header.bn_eps,
            },
        });
    }
    let classifier_kernel = next(template.classifier_kernel.shape())?.with_grad();
    let classifier_bias = next(template.classifier_bias.shape())?.with_grad();
    let model = ModelCheckpoint {
        arch,
        role: header.role,
        blocks,
        classifier_kernel,
        classifier_bias,
    };
    Ok((model, bank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::init_model;

    fn arch() -> ArchConfig {
        ArchConfig {
            height: 4,
            width: 4,
            hidden: 3,
            feature_dim: 2,
            num_classes: 2,
            ..ArchConfig::default()
        }
    }

    fn bank() -> PrototypeBank {
        PrototypeBank {
            eta: vec![0.25, -1.5, 3.0, 1e-300],
            sigma2: vec![0.5, 2.0],
            class_seen: vec![true, false],
            class_counts: vec![10, 0],
            lambda: 0.99,
            norm: DistanceNorm::L2,
            variance_mode: VarianceMode::Frozen,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = init_model(&arch(), 3).unwrap().with_role(Role::Static);
        m.blocks[1].bn.running_mean[0] = std::f64::consts::PI;
        let bytes = encode(&m, Some(&bank())).unwrap();
        let (back, b) = decode(&bytes).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(back.role, Role::Static);
        assert_eq!(b.unwrap(), bank());
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.onda");
        let m = init_model(&arch(), 4).unwrap();
        save_checkpoint(&path, &m, None).unwrap();
        let (back, b) = load_checkpoint_expecting(&path, &arch()).unwrap();
        assert!(back.bit_eq(&m) && b.is_none());
    }

    #[test]
    fn corrupt_magic() {
        let mut bytes = encode(&init_model(&arch(), 1).unwrap(), None).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes),
            Err(OndaError::Checkpoint(CheckpointError::BadMagic))
        ));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&init_model(&arch(), 1).unwrap(), None).unwrap();
        bytes[5] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(OndaError::Checkpoint(CheckpointError::Version(9)))
        ));
    }

    #[test]
    fn truncated_file() {
        let bytes = encode(&init_model(&arch(), 1).unwrap(), None).unwrap();
        let cut = &bytes[..bytes.len() - 40];
        assert!(matches!(
            decode(cut),
            Err(OndaError::Checkpoint(CheckpointError::Truncated))
        ));
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let mut bytes = encode(&init_model(&arch(), 1).unwrap(), None).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        assert!(matches!(
            decode(&bytes),
            Err(OndaError::Checkpoint(CheckpointError::Checksum { .. }))
        ));
    }

    #[test]
    fn wrong_arch_header_is_incompatible() {
        let m = init_model(&arch(), 1).unwrap();
        let bytes = encode(&m, None).unwrap();
        // Rewrite the header so the declared class count disagrees with the tensors.
        let hlen = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[13..13 + hlen].to_vec()).unwrap();
        let patched = text.replacen("\"num_classes\":2", "\"num_classes\":3", 1);
        let mut out = bytes[..9].to_vec();
        out.extend_from_slice(&(patched.len() as u32).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[13 + hlen..bytes.len() - 4]);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode(&out),
            Err(OndaError::Checkpoint(CheckpointError::Incompatible(_)))
        ));
    }

    #[test]
    fn expecting_other_arch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.onda");
        save_checkpoint(&path, &init_model(&arch(), 1).unwrap(), None).unwrap();
        let other = ArchConfig::default();
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(OndaError::Checkpoint(CheckpointError::Incompatible(_)))
        ));
    }
}
