//! Binary containers for checkpoints and datasets.
//!
//! Layout: 4-byte magic, `u32` LE format version, `u64` LE header length,
//! a UTF-8 JSON header, little-endian array payload, and a SHA-256 digest
//! of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AdamW, AdamWConfig, EncoderConfig, ModelParams, ParamSet};
use crate::numerics::{RngState, Tensor};

use super::write_atomic;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CSCK";
pub const DATASET_MAGIC: [u8; 4] = *b"CSDS";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn encode_container(magic: [u8; 4], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Returns `(header, payload)` after checking magic, digest and version.
fn decode_container<'a>(magic: [u8; 4], bytes: &'a [u8], what: &str) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 16 + DIGEST_LEN || bytes[..4] != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(what.to_string()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    if header_len > body.len() - 16 {
        return Err(Error::Format(format!("{what} header overruns the file")));
    }
    Ok(body[16..].split_at(header_len))
}

fn push_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("payload shorter than its header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn u32s(&mut self, count: usize) -> Result<Vec<u32>> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format("trailing bytes after the payload".into()));
        }
        Ok(())
    }
}

/// Which loop produced a checkpoint; `progress` counts pretraining
/// iterations or fine-tuning epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub progress: u64,
    pub params: ModelParams,
    pub optimizer: Option<AdamW>,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    stage: Stage,
    progress: u64,
    encoder: EncoderConfig,
    rng: RngState,
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArrayEntry>,
}

fn param_groups(params: &ModelParams) -> Vec<(&'static str, &ParamSet)> {
    let mut groups = vec![
        ("theta", &params.theta),
        ("omega", &params.omega),
        ("nu", &params.nu),
        ("theta_ema", &params.theta_ema),
        ("nu_ema", &params.nu_ema),
    ];
    if let Some(c) = &params.theta_consistency_ema {
        groups.push(("theta_consistency_ema", c));
    }
    groups
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut payload = Vec::new();
        for (group, set) in param_groups(&self.params) {
            for (name, t) in set.iter() {
                arrays.push(ArrayEntry {
                    group: group.into(),
                    name: name.into(),
                    shape: t.shape().to_vec(),
                });
                push_f64s(&mut payload, t.data());
            }
        }
        if let Some(opt) = &self.optimizer {
            for (group, moments) in [("adam_m", &opt.m), ("adam_v", &opt.v)] {
                for (i, t) in moments.iter().enumerate() {
                    arrays.push(ArrayEntry {
                        group: group.into(),
                        name: i.to_string(),
                        shape: t.shape().to_vec(),
                    });
                    push_f64s(&mut payload, t.data());
                }
            }
        }
        let header = CheckpointHeader {
            stage: self.stage,
            progress: self.progress,
            encoder: self.params.config.clone(),
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config.clone(),
                step: o.step,
            }),
            arrays,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        Ok(encode_container(CHECKPOINT_MAGIC, &header, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = decode_container(CHECKPOINT_MAGIC, bytes, "checkpoint")?;
        let header: CheckpointHeader =
            serde_json::from_slice(header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut reader = PayloadReader { bytes: payload, pos: 0 };
        let mut groups: Vec<(String, ParamSet)> = Vec::new();
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        for entry in &header.arrays {
            let len = entry.shape.iter().product();
            let t = Tensor::new(entry.shape.clone(), reader.f64s(len)?)?;
            match entry.group.as_str() {
                "adam_m" => adam_m.push(t),
                "adam_v" => adam_v.push(t),
                g => {
                    if groups.last().map(|(name, _)| name.as_str()) != Some(g) {
                        groups.push((g.to_string(), ParamSet::new()));
                    }
                    groups.last_mut().expect("just pushed").1.push(entry.name.clone(), t);
                }
            }
        }
        reader.finish()?;
        let mut take = |name: &str| -> Option<ParamSet> {
            let i = groups.iter().position(|(g, _)| g == name)?;
            Some(groups.remove(i).1)
        };
        let missing = |name: &str| Error::Format(format!("checkpoint lacks parameter group {name}"));
        let params = ModelParams {
            config: header.encoder,
            theta: take("theta").ok_or_else(|| missing("theta"))?,
            omega: take("omega").ok_or_else(|| missing("omega"))?,
            nu: take("nu").ok_or_else(|| missing("nu"))?,
            theta_ema: take("theta_ema").ok_or_else(|| missing("theta_ema"))?,
            nu_ema: take("nu_ema").ok_or_else(|| missing("nu_ema"))?,
            theta_consistency_ema: take("theta_consistency_ema"),
        };
        if let Some((g, _)) = groups.first() {
            return Err(Error::Format(format!("unknown parameter group {g}")));
        }
        params.validate()?;
        let optimizer = match header.optimizer {
            Some(o) => {
                if adam_m.len() != adam_v.len() {
                    return Err(Error::Format("optimizer moments differ in length".into()));
                }
                Some(AdamW {
                    config: o.config,
                    step: o.step,
                    m: adam_m,
                    v: adam_v,
                })
            }
            None if adam_m.is_empty() && adam_v.is_empty() => None,
            None => return Err(Error::Format("optimizer moments without optimizer header".into())),
        };
        Ok(Self {
            stage: header.stage,
            progress: header.progress,
            params,
            optimizer,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    shape: [usize; 3],
    num_classes: usize,
    count: usize,
}

/// `f64` pixels followed by `u32` labels.
pub fn dataset_to_bytes(data: &Dataset) -> Result<Vec<u8>> {
    let header = DatasetHeader {
        shape: data.shape(),
        num_classes: data.num_classes(),
        count: data.len(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut payload = Vec::with_capacity(data.pixels().len() * 8 + data.len() * 4);
    push_f64s(&mut payload, data.pixels());
    for &l in data.labels() {
        payload.extend_from_slice(&(l as u32).to_le_bytes());
    }
    Ok(encode_container(DATASET_MAGIC, &header, &payload))
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let (header, payload) = decode_container(DATASET_MAGIC, bytes, "dataset")?;
    let h: DatasetHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    let mut reader = PayloadReader { bytes: payload, pos: 0 };
    let per: usize = h.shape.iter().product();
    let pixels = reader.f64s(per.checked_mul(h.count).ok_or_else(|| Error::Format("dataset too large".into()))?)?;
    let labels = reader.u32s(h.count)?.into_iter().map(|l| l as usize).collect();
    reader.finish()?;
    Dataset::new(h.shape, pixels, labels, h.num_classes)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, &dataset_to_bytes(data)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::model::{EncoderKind};
    use crate::numerics::SeededRng;

    fn checkpoint(with_optimizer: bool, mirror: bool) -> Checkpoint {
        let cfg = EncoderConfig {
            kind: EncoderKind::Vit,
            input_shape: [1, 4, 4],
            patch_size: 2,
            depth: 1,
            width: 8,
            heads: 2,
            mlp_hidden: 8,
            time_features: 4,
            projector_hidden: 8,
            projector_out: 4,
            num_classes: 3,
        };
        let mut rng = SeededRng::new(3);
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        if mirror {
            params.theta_consistency_ema = Some(params.theta.clone());
        }
        let optimizer = with_optimizer.then(|| {
            let mut opt = AdamW::new(AdamWConfig::default(), &[&params.theta, &params.nu]).unwrap();
            opt.step = 7;
            opt.m[0].data_mut()[0] = 0.125;
            opt.v[1].data_mut()[0] = 1.0 / 3.0;
            opt
        });
        rng.next_u64();
        Checkpoint {
            stage: Stage::Pretrain,
            progress: 7,
            params,
            optimizer,
            rng: rng.state(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for (opt, mirror) in [(true, false), (false, false), (true, true)] {
            let ck = checkpoint(opt, mirror);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = checkpoint(true, false).to_bytes().unwrap();
        for pos in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(Checkpoint::from_bytes(&bad).is_err(), "flip at {pos}");
        }
        let mut bad = bytes.clone();
        bad[bytes.len() / 2] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn version_mismatch_is_a_hard_error() {
        let mut bytes = checkpoint(false, false).to_bytes().unwrap();
        bytes[4] = 2;
        let body = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..body]);
        bytes[body..].copy_from_slice(&digest);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn dataset_round_trip_and_magic() {
        let d = synthetic_blobs(3, 5, [1, 2, 3], 1.5, 4).unwrap();
        let bytes = dataset_to_bytes(&d).unwrap();
        assert_eq!(dataset_from_bytes(&bytes).unwrap(), d);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &d).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), d);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = checkpoint(true, true);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
