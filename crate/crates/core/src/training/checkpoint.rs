//! Single-file checkpoint container.
//!
//! Layout (little-endian): magic `CDPK`, `u32` version, `u32` record
//! count, then per record `u32` name length, UTF-8 name, `u8` dtype,
//! `u32` rank, `u64` dims, payload; finally `u64` trailer length and a
//! JSON trailer holding configuration and metadata.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::AdamWState;
use super::{History, TrainConfig};
use crate::data::{TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::prompt::{PromptConfig, PromptModule, Strategy};
use crate::tensor::{DType, ParamStore, Tensor};
use crate::transformer::{LmParams, ModelConfig};

pub const MAGIC: &[u8; 4] = b"CDPK";
pub const VERSION: u32 = 1;

const MAX_RANK: usize = 8;

/// Named tensors plus an opaque JSON trailer.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub records: Vec<(String, Tensor<f32>)>,
    pub trailer: Vec<u8>,
}

pub fn encode_container(records: &[(String, &Tensor<f32>)], trailer: &[u8]) -> Vec<u8> {
    let payload: usize = records.iter().map(|(n, t)| n.len() + 17 + 8 * t.shape().len() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(12 + payload + 8 + trailer.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DType::F32 as u8);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    out.extend_from_slice(trailer);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a container, validating every length against the input size
/// before allocating.
pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("record count")? as usize;
    // each record needs at least 9 bytes of header
    if count > r.remaining() / 9 {
        return Err(Error::Checkpoint(format!("record count {count} exceeds file size")));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DType::F32 as u8 {
            return Err(Error::Checkpoint(format!("record `{name}`: unsupported dtype {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("record `{name}`: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dimension")?)
                .map_err(|_| Error::Checkpoint(format!("record `{name}`: dimension overflow")))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: size overflow")))?;
            shape.push(d);
        }
        let n_bytes = numel
            .checked_mul(4)
            .ok_or_else(|| Error::Checkpoint(format!("record `{name}`: size overflow")))?;
        let raw = r.take(n_bytes, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    let len = usize::try_from(r.u64("trailer length")?)
        .map_err(|_| Error::Checkpoint("trailer length overflow".into()))?;
    let trailer = r.take(len, "trailer")?.to_vec();
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes after trailer", r.remaining())));
    }
    Ok(Container { records, trailer })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub strategy: Strategy,
    pub task: TaskKind,
    pub model: ModelConfig,
    pub vocab: Vocab,
    #[serde(default)]
    pub prompt: Option<PromptConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub history: Option<History>,
    /// Fingerprint of the base weights a prompt was trained against.
    #[serde(default)]
    pub base_fingerprint: Option<String>,
    pub seed: u64,
    #[serde(default)]
    pub adam_step: u64,
}

/// Decoded checkpoint: either a base model or a prompt module (with its
/// own copy of the base for fine-tuning).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub base: Option<LmParams<f32>>,
    pub prompt: Option<PromptModule<f32>>,
    pub optimizer: Option<AdamWState>,
}

/// SHA-256 over tensor names and little-endian values.
pub fn fingerprint(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for e in store.entries() {
        h.update((e.name.len() as u32).to_le_bytes());
        h.update(e.name.as_bytes());
        for &d in e.tensor.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in e.tensor.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Byte serialization of a parameter store (used for bit-identity checks).
pub fn store_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let recs: Vec<(String, &Tensor<f32>)> = store.entries().iter().map(|e| (e.name.clone(), &e.tensor)).collect();
    encode_container(&recs, b"")
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut recs: Vec<(String, &Tensor<f32>)> = Vec::new();
        let mut meta = self.meta.clone();
        if let Some(b) = &self.base {
            recs.extend(b.store().entries().iter().map(|e| (format!("base.{}", e.name), &e.tensor)));
        }
        if let Some(p) = &self.prompt {
            recs.extend(p.store().entries().iter().map(|e| (format!("prompt.{}", e.name), &e.tensor)));
        }
        let mut moments = Vec::new();
        if let Some(opt) = &self.optimizer {
            let names: Vec<&str> = match (&self.meta.kind, &self.prompt, &self.base) {
                (CheckpointKind::Prompt, Some(p), _) if !self.meta.strategy.trains_base() => {
                    p.store().entries().iter().map(|e| e.name.as_str()).collect()
                }
                (_, _, Some(b)) => b.store().entries().iter().map(|e| e.name.as_str()).collect(),
                _ => Vec::new(),
            };
            if names.len() != opt.m.len() {
                return Err(Error::Checkpoint("optimizer state does not match trainable parameters".into()));
            }
            for (i, n) in names.iter().enumerate() {
                let len = opt.m[i].len();
                moments.push((format!("adam.m.{n}"), Tensor::new(vec![len], opt.m[i].clone())?));
                moments.push((format!("adam.v.{n}"), Tensor::new(vec![len], opt.v[i].clone())?));
            }
            meta.adam_step = opt.step;
        }
        recs.extend(moments.iter().map(|(n, t)| (n.clone(), t)));
        let trailer = serde_json::to_vec(&meta)?;
        Ok(encode_container(&recs, &trailer))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = decode_container(bytes)?;
        let meta: CheckpointMeta = serde_json::from_slice(&c.trailer)
            .map_err(|e| Error::Checkpoint(format!("bad metadata trailer: {e}")))?;
        meta.vocab.validate()?;
        if meta.vocab.len() != meta.model.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary of {} tokens for a model with {} embeddings",
                meta.vocab.len(),
                meta.model.vocab_size
            )));
        }
        let mut base = ParamStore::new();
        let mut prompt = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in c.records {
            if let Some(n) = name.strip_prefix("base.") {
                base.add(n, t, false);
            } else if let Some(n) = name.strip_prefix("prompt.") {
                prompt.add(n, t, false);
            } else if let Some(n) = name.strip_prefix("adam.m.") {
                m.push((n.to_string(), t.into_data()));
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                v.push((n.to_string(), t.into_data()));
            } else {
                return Err(Error::Checkpoint(format!("unexpected record `{name}`")));
            }
        }
        let base = if base.is_empty() {
            None
        } else {
            let fresh = LmParams::<f32>::init(&meta.model, 0)?;
            Some(LmParams::from_store(meta.model.clone(), restore_flags(base, fresh.store())?)?)
        };
        let prompt = match (&meta.kind, &meta.prompt) {
            (CheckpointKind::Prompt, Some(cfg)) => {
                let fresh = PromptModule::<f32>::init(cfg.clone(), &meta.model, 0)?;
                Some(PromptModule::from_store(cfg.clone(), &meta.model, restore_flags(prompt, fresh.store())?)?)
            }
            (CheckpointKind::Prompt, None) => {
                return Err(Error::Checkpoint("prompt checkpoint without prompt config".into()))
            }
            (CheckpointKind::Base, _) => None,
        };
        if meta.kind == CheckpointKind::Base && base.is_none() {
            return Err(Error::Checkpoint("base checkpoint holds no weights".into()));
        }
        let optimizer = if m.is_empty() && v.is_empty() {
            None
        } else {
            if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.0 != b.0 || a.1.len() != b.1.len()) {
                return Err(Error::Checkpoint("inconsistent optimizer moments".into()));
            }
            Some(AdamWState {
                step: meta.adam_step,
                m: m.into_iter().map(|x| x.1).collect(),
                v: v.into_iter().map(|x| x.1).collect(),
            })
        };
        Ok(Checkpoint {
            meta,
            base,
            prompt,
            optimizer,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

/// Copies the decay flags of a freshly initialized layout onto loaded
/// tensors (flags are not stored).
fn restore_flags(loaded: ParamStore<f32>, fresh: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    let mut out = ParamStore::new();
    for e in loaded.entries() {
        let decay = fresh
            .entries()
            .iter()
            .find(|f| f.name == e.name)
            .map(|f| f.decay)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
        out.add(e.name.clone(), e.tensor.clone(), decay);
    }
    Ok(out)
}
