//! Checkpoint container: magic bytes, format version, a JSON header
//! describing configuration, vocabulary and named arrays, then the arrays as
//! little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{CarsModel, ModelConfig};
use crate::ranker::RunningStats;
use crate::train::{Adam, TrainConfig};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"CARSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub vocab: Vocabulary,
    pub vocab_hash: String,
    pub optimizer: Option<OptimizerHeader>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CarsModel,
    pub vocab: Vocabulary,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<Adam>,
}

fn bn_names(k: usize) -> [String; 2] {
    [format!("bn{k}.mean"), format!("bn{k}.var")]
}

/// Serializes to bytes.
pub fn encode(model: &CarsModel, vocab: &Vocabulary, train: Option<&TrainConfig>, optimizer: Option<&Adam>) -> Result<Vec<u8>> {
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let mut arrays: Vec<(String, &[f64], usize, usize)> = Vec::new();
    for (_, p) in model.params.iter() {
        arrays.push((p.name.clone(), p.value.data(), p.value.rows(), p.value.cols()));
    }
    for (k, s) in model.bn_stats.iter().enumerate() {
        let [m, v] = bn_names(k);
        arrays.push((m, &s.mean, s.mean.len(), 1));
        arrays.push((v, &s.var, s.var.len(), 1));
    }
    if let Some(opt) = optimizer {
        for (((_, p), m), v) in model.params.iter().zip(&opt.first).zip(&opt.second) {
            arrays.push((format!("adam.m.{}", p.name), m.data(), m.rows(), m.cols()));
            arrays.push((format!("adam.v.{}", p.name), v.data(), v.rows(), v.cols()));
        }
    }
    let header = Header {
        model: model.config.clone(),
        train: train.cloned(),
        vocab: vocab.clone(),
        vocab_hash: vocab.hash(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: o.step,
        }),
        arrays: arrays
            .iter()
            .map(|(name, _, rows, cols)| ArrayEntry {
                name: name.clone(),
                rows: *rows,
                cols: *cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * arrays.iter().map(|a| a.1.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, data, _, _) in &arrays {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Checkpoint> {
    let magic = take(&mut bytes, 8, "format id")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad format id)".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {VERSION})"
        )));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.vocab.hash() != header.vocab_hash {
        return Err(Error::Checkpoint("vocabulary hash does not match its tokens".into()));
    }
    if header.vocab.len() != header.model.vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but the model expects {}",
            header.vocab.len(),
            header.model.vocab_size
        )));
    }
    let mut named: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for entry in &header.arrays {
        let raw = take(&mut bytes, entry.rows * entry.cols * 8, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.insert(entry.name.clone(), Tensor::new(entry.rows, entry.cols, data));
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", bytes.len())));
    }
    let mut model = CarsModel::random(header.model.clone(), 0)?;
    let mut take_array = |name: &str, rows: usize, cols: usize| -> Result<Tensor> {
        let t = named
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        if t.rows() != rows || t.cols() != cols {
            return Err(Error::Checkpoint(format!(
                "array `{name}` is {}x{}, expected {rows}x{cols}",
                t.rows(),
                t.cols()
            )));
        }
        Ok(t)
    };
    for p in model.params.iter_mut() {
        let (r, c) = (p.value.rows(), p.value.cols());
        p.value = take_array(&p.name, r, c)?;
    }
    let mut stats = Vec::with_capacity(model.bn_stats.len());
    for (k, s) in model.bn_stats.iter().enumerate() {
        let [m, v] = bn_names(k);
        stats.push(RunningStats {
            mean: take_array(&m, s.mean.len(), 1)?.into_data(),
            var: take_array(&v, s.var.len(), 1)?.into_data(),
        });
    }
    model.bn_stats = stats;
    let optimizer = match &header.optimizer {
        None => None,
        Some(o) => {
            let mut adam = Adam::new(&model.params, o.lr);
            adam.beta1 = o.beta1;
            adam.beta2 = o.beta2;
            adam.eps = o.eps;
            adam.step = o.step;
            for (((_, p), m), v) in model.params.iter().zip(&mut adam.first).zip(&mut adam.second) {
                let (r, c) = (p.value.rows(), p.value.cols());
                *m = take_array(&format!("adam.m.{}", p.name), r, c)?;
                *v = take_array(&format!("adam.v.{}", p.name), r, c)?;
            }
            Some(adam)
        }
    };
    if let Some(extra) = named.keys().min() {
        return Err(Error::Checkpoint(format!("unknown array `{extra}`")));
    }
    Ok(Checkpoint {
        model,
        vocab: header.vocab,
        train: header.train,
        optimizer,
    })
}

pub fn save(path: &Path, model: &CarsModel, vocab: &Vocabulary, train: Option<&TrainConfig>, optimizer: Option<&Adam>) -> Result<()> {
    let bytes = encode(model, vocab, train, optimizer)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads and checks that the checkpoint was trained with `vocab`.
pub fn load_for_vocab(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if ckpt.vocab.len() != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary has {} entries, dataset vocabulary has {}",
            ckpt.vocab.len(),
            vocab.len()
        )));
    }
    if ckpt.vocab.hash() != vocab.hash() {
        return Err(Error::Checkpoint("checkpoint and dataset vocabularies differ".into()));
    }
    Ok(ckpt)
}
