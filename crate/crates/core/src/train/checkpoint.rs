//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VAEC"  u16 version
//! u32 header length, JSON header (config, epoch, history, RNG, optimizer)
//! u32 tensor count, then per tensor:
//!     u16 name length, name, u8 dtype tag, u8 ndim, u32 dims..., payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Tensor names are prefixed `param/`, `buffer/`, `adam.m/` or `adam.v/`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VaeModel};
use crate::tensor::{DType, ParameterStore, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"VAEC";
pub const VERSION: u16 = 1;

/// Epoch-mean loss parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_reconst: f64,
    pub train_kl: f64,
    pub val_loss: Option<f64>,
    pub val_reconst: Option<f64>,
    pub val_kl: Option<f64>,
}

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: DType,
    model_config: ModelConfig,
    epoch: usize,
    history: Vec<EpochLosses>,
    rng: RngState,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: VaeModel<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLosses>,
    pub rng: RngState,
    pub optimizer: Option<Adam<T>>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(t.shape().len() as u8);
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        v.write_le(out);
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
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| corrupt("unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| corrupt(format!("{name}: bad dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(corrupt(format!(
                "{name}: stored as {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let ndim = self.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = self.take(n * dtype.size())?;
        let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: VaeModel<T>, epoch: usize, history: Vec<EpochLosses>, rng: RngState) -> Self {
        Self {
            model,
            epoch,
            history,
            rng,
            optimizer: None,
        }
    }

    pub fn with_optimizer(mut self, optimizer: Adam<T>) -> Self {
        self.optimizer = Some(optimizer);
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::DTYPE,
            model_config: self.model.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            rng: self.rng,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);

        let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
        tensors.extend(self.model.params.iter().map(|(k, t)| (format!("param/{k}"), t)));
        tensors.extend(self.model.buffers.iter().map(|(k, t)| (format!("buffer/{k}"), t)));
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.iter().map(|(k, t)| (format!("adam.m/{k}"), t)));
            tensors.extend(opt.v.iter().map(|(k, t)| (format!("adam.v/{k}"), t)));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_tensor(&mut out, &name, t);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parse and validate: magic, version, checksum, header, and that the
    /// tensor table matches the configured architecture exactly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic, not a checkpoint file"));
        }
        if bytes.len() < 10 {
            return Err(corrupt("file too short"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}, expected {VERSION}")));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(corrupt(format!(
                "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        let mut r = Reader { bytes: body, pos: 6 };
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| corrupt(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(corrupt(format!(
                "checkpoint holds {:?} tensors, expected {:?}",
                header.dtype,
                T::DTYPE
            )));
        }
        header
            .model_config
            .validate()
            .map_err(|e| corrupt(format!("config: {e}")))?;
        let count = r.u32()? as usize;
        let mut table = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor::<T>()?;
            if table.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after tensor table"));
        }

        // expected names and shapes come from the architecture itself
        let template = VaeModel::<T>::new(header.model_config.clone(), 0)?;
        let mut take = |name: String, like: &Tensor<T>| -> Result<Tensor<T>> {
            let t = table
                .remove(&name)
                .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(corrupt(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };
        let mut params = ParameterStore::new();
        for (k, like) in template.params.iter() {
            params.insert(k.clone(), take(format!("param/{k}"), like)?)?;
        }
        let mut buffers = BTreeMap::new();
        for (k, like) in &template.buffers {
            buffers.insert(k.clone(), take(format!("buffer/{k}"), like)?);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(h) => {
                let mut m = BTreeMap::new();
                let mut v = BTreeMap::new();
                for (k, like) in template.params.iter() {
                    m.insert(k.clone(), take(format!("adam.m/{k}"), like)?);
                    v.insert(k.clone(), take(format!("adam.v/{k}"), like)?);
                }
                Some(Adam {
                    config: h.config,
                    step: h.step,
                    m,
                    v,
                })
            }
        };
        if let Some(name) = table.keys().next() {
            return Err(corrupt(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            model: VaeModel {
                config: header.model_config,
                params,
                buffers,
            },
            epoch: header.epoch,
            history: header.history,
            rng: header.rng,
            optimizer,
        })
    }

    /// Atomic write: temporary file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let result = (|| -> Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)?;
            Ok(())
        })();
        if result.is_err() {
            let _ = std::fs::remove_file(&tmp);
        }
        result
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// First 16 hex digits of the SHA-256 of a file's contents.
/// Element type recorded in a checkpoint header, without reading the
/// tensors.
pub fn checkpoint_dtype(bytes: &[u8]) -> Result<DType> {
    #[derive(Deserialize)]
    struct DTypeOnly {
        dtype: DType,
    }
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic, not a checkpoint file"));
    }
    let mut r = Reader { bytes, pos: 6 };
    let hlen = r.u32()? as usize;
    let h: DTypeOnly =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| corrupt(format!("header: {e}")))?;
    Ok(h.dtype)
}

pub fn checkpoint_id(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Checkpoint id of a file on disk.
pub fn file_checkpoint_id(path: &Path) -> Result<String> {
    Ok(checkpoint_id(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let model = VaeModel::new(ModelConfig::new(16, 1, 2, 3, 0.5), 9).unwrap();
        let opt = Adam::new(AdamConfig::default(), &model.params);
        let rng = RngState {
            seed: 1,
            stream: 2,
            word_pos: 1 << 70,
        };
        let hist = vec![EpochLosses {
            epoch: 1,
            train_loss: 0.1 + 0.2,
            train_reconst: 1.0 / 3.0,
            train_kl: 2e-310,
            val_loss: None,
            val_reconst: Some(f64::MAX),
            val_kl: Some(-0.0),
        }];
        Checkpoint::new(model, 1, hist, rng).with_optimizer(opt)
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        bad = bytes.clone();
        bad[4] = 7;
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }
}
