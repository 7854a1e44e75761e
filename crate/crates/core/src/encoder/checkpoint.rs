//! Binary checkpoint: header, config with its SHA-256, named parameter table,
//! optional optimizer state and JSON metadata. All integers little-endian,
//! all tensor payloads f64.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{EncoderConfig, Encoder, HeadKind, Mode};
use crate::autodiff::ParamKind;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::rng::seeded;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JETBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model snapshot, optionally with the optimizer that was training it.
#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub encoder: Encoder<S>,
    pub optimizer: Option<Optimizer<S>>,
    pub metadata: serde_json::Value,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Matrix => 0,
        ParamKind::Vector => 1,
        ParamKind::Embedding => 2,
        ParamKind::Head => 3,
    }
}

fn kind_from(c: u8) -> Result<ParamKind> {
    Ok(match c {
        0 => ParamKind::Matrix,
        1 => ParamKind::Vector,
        2 => ParamKind::Embedding,
        3 => ParamKind::Head,
        _ => return Err(Error::Checkpoint(format!("unknown parameter kind {c}"))),
    })
}

fn config_hash(json: &str) -> [u8; 32] {
    Sha256::digest(json.as_bytes()).into()
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let json = serde_json::to_string(self.encoder.config())?;
        w.str(&json);
        w.bytes(&config_hash(&json));
        w.u8(match self.encoder.mode() {
            Mode::Pretrain => 0,
            Mode::Finetune => 1,
        });
        w.u32(self.encoder.heads().len() as u32);
        for h in self.encoder.heads() {
            w.u8(h.code());
        }
        let store = self.encoder.params();
        w.u32(store.len() as u32);
        for (_, e) in store.iter() {
            w.str(&e.name);
            w.u8(kind_code(e.kind));
            w.tensor(&e.value);
        }
        match &self.optimizer {
            Some(opt) => {
                w.u8(1);
                opt.encode(&mut w);
            }
            None => w.u8(0),
        }
        w.str(&serde_json::to_string(&self.metadata)?);
        Ok(w.buf)
    }

    /// Parses a checkpoint and verifies its parameter table against the one
    /// the stored config and heads imply, entry by entry.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let json = r.str()?;
        if r.bytes(32)? != config_hash(&json) {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let config: EncoderConfig = serde_json::from_str(&json)?;
        let mode = match r.u8()? {
            0 => Mode::Pretrain,
            1 => Mode::Finetune,
            m => return Err(Error::Checkpoint(format!("unknown mode {m}"))),
        };
        let n_heads = r.u32()? as usize;
        let mut heads = Vec::with_capacity(n_heads.min(HeadKind::ALL.len()));
        for _ in 0..n_heads {
            let c = r.u8()?;
            heads.push(HeadKind::from_code(c).ok_or_else(|| Error::Checkpoint(format!("unknown head {c}")))?);
        }

        // the template is only used for its table; its values are overwritten
        let mut encoder = Encoder::<S>::new(config, mode, &mut seeded(0))?;
        for &h in &heads {
            encoder.attach_head(h, &mut seeded(0))?;
        }
        let n_params = r.u32()? as usize;
        if n_params != encoder.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {n_params} tensors, config implies {}",
                encoder.params().len()
            )));
        }
        let ids: Vec<_> = encoder.params().ids().collect();
        for id in ids {
            let name = r.str()?;
            let kind = kind_from(r.u8()?)?;
            let value = r.tensor::<S>()?;
            let slot = encoder.params_mut().get_mut(id);
            if slot.name != name || slot.kind != kind || slot.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {kind:?} {:?} does not match expected {} {:?} {:?}",
                    value.shape(),
                    slot.name,
                    slot.kind,
                    slot.value.shape()
                )));
            }
            slot.value = value;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let opt = Optimizer::decode(&mut r)?;
                opt.check_against(encoder.params())?;
                Some(opt)
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        let metadata = serde_json::from_str(&r.str()?)?;
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            encoder,
            optimizer,
            metadata,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
