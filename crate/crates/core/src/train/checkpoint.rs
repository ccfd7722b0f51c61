//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "CAELSTM\0"
//! version  u32
//! meta     u64 length + UTF-8 JSON (config, vocabulary, lexicon, progress)
//! count    u32
//! tensor   u32 name length, name, u8 flags (bit 0 = trainable),
//!          u32 rank, rank × u64 dims, product(dims) × f64
//! ```
//!
//! Adam moments are stored as extra tensors named `adam.m:<param>` and
//! `adam.v:<param>`.

use super::adam::Adam;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::generator::Vocabulary;
use crate::metrics::{LexiconEntry, ObjectLexicon};
use crate::rng::RngState;
use crate::tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CAELSTM\0";
pub const FORMAT_VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m:";
const V_PREFIX: &str = "adam.v:";

/// Where training stands; restored verbatim on resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: u8,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
    pub best_score: Option<f64>,
    pub stale_epochs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    vocab: Vocabulary,
    lexicon: Vec<(String, u64)>,
    progress: Progress,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub lexicon: ObjectLexicon,
    pub store: ParamStore,
    pub optimizer: Option<Adam>,
    pub progress: Progress,
}

fn put_u32(w: &mut impl Write, x: u32) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_tensor(w: &mut impl Write, name: &str, t: &Tensor, trainable: bool) -> std::io::Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[u8::from(trainable)])?;
    put_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Data("checkpoint is truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor, bool)> {
        let len = self.u32()? as usize;
        let name =
            String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        let trainable = self.take(1)?[0] & 1 == 1;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len()))
            .ok_or_else(|| Error::Data(format!("tensor {name} has an impossible shape {shape:?}")))?;
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((
            name.clone(),
            Tensor::new(&shape, data).map_err(|e| Error::Data(format!("tensor {name}: {e}")))?,
            trainable,
        ))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            lexicon: self
                .lexicon
                .entries()
                .iter()
                .map(|e| (e.token.clone(), e.freq))
                .collect(),
            progress: self.progress.clone(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerMeta {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                t: a.t,
            }),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        put_u32(&mut out, FORMAT_VERSION)?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        let mut tensors: Vec<(String, Tensor, bool)> = self
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.detached(), p.trainable))
            .collect();
        if let Some(adam) = &self.optimizer {
            for (id, p) in self.store.iter() {
                if let Some((m, v)) = &adam.moments[id.index()] {
                    let shape = p.tensor.shape();
                    tensors.push((format!("{M_PREFIX}{}", p.name), Tensor::new(shape, m.clone())?, false));
                    tensors.push((format!("{V_PREFIX}{}", p.name), Tensor::new(shape, v.clone())?, false));
                }
            }
        }
        put_u32(&mut out, tensors.len() as u32)?;
        for (name, t, trainable) in &tensors {
            put_tensor(&mut out, name, t, *trainable)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(Error::Data("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = usize::try_from(r.u64()?).map_err(|_| Error::Data("metadata too large".into()))?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        meta.config.validate()?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        let mut moments = Vec::new();
        for _ in 0..count {
            let (name, t, trainable) = r.tensor()?;
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                moments.push((p.to_string(), true, t));
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                moments.push((p.to_string(), false, t));
            } else {
                store.add(&name, t, trainable)?;
            }
        }
        if !r.buf.is_empty() {
            return Err(Error::Data("trailing bytes after checkpoint tensors".into()));
        }
        let optimizer = match meta.optimizer {
            None => None,
            Some(o) => {
                let mut adam = Adam::new(o.lr, o.beta1, o.beta2, o.eps, store.len());
                adam.t = o.t;
                let mut half: Vec<[Option<Vec<f64>>; 2]> = vec![[None, None]; store.len()];
                for (name, is_m, t) in moments {
                    let id = store
                        .by_name(&name)
                        .ok_or_else(|| Error::Data(format!("optimizer state for unknown parameter {name}")))?;
                    if t.shape() != store.get(id).tensor.shape() {
                        return Err(Error::Data(format!("optimizer state for {name} has the wrong shape")));
                    }
                    half[id.index()][usize::from(!is_m)] = Some(t.into_data());
                }
                for (i, slot) in half.into_iter().enumerate() {
                    adam.moments[i] = match slot {
                        [Some(m), Some(v)] => Some((m, v)),
                        [None, None] => None,
                        _ => return Err(Error::Data("optimizer moments are incomplete".into())),
                    };
                }
                Some(adam)
            }
        };
        let lexicon = ObjectLexicon::from_entries(
            meta.lexicon
                .into_iter()
                .map(|(token, freq)| LexiconEntry { token, freq })
                .collect(),
            usize::MAX,
        )?;
        Ok(Self {
            config: meta.config,
            vocab: meta.vocab,
            lexicon,
            store,
            optimizer,
            progress: meta.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}
