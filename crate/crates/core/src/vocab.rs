//! Vocabulary construction, tokenization and word-embedding tables.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOQ: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</q>"];

/// Token/id bijection with four reserved entries at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(RESERVED.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }
}

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

impl Vocabulary {
    /// Keeps the `max_size - 4` most frequent tokens; equal counts are
    /// ordered lexicographically. Reserved tokens are always present.
    pub fn build<I, S, T>(streams: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} cannot hold the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for stream in streams {
            for tok in stream {
                let tok = tok.as_ref();
                if RESERVED.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_string()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - RESERVED.len())
                .map(|(t, _)| t),
        );
        Ok(Self::from(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_tokens<T: AsRef<str>>(&self, tokens: &[T]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// SHA-256 over the ordered token list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Encodes `text` with `vocab`; shorthand for [`Vocabulary::encode`].
pub fn encode_text(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(text)
}

/// `|V| x l_w` word-embedding matrix.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub trainable: bool,
    /// Rows initialized from a pretrained file.
    pub pretrained_rows: usize,
}

impl EmbeddingTable {
    /// All rows uniform(-0.1, 0.1) except the zero PAD row.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = Tensor::zeros(vocab_size, dim);
        for r in 0..vocab_size {
            for c in 0..dim {
                let v = rng.gen_range(-0.1..0.1);
                if r != PAD {
                    matrix.set(r, c, v);
                }
            }
        }
        Self {
            matrix,
            trainable: true,
            pretrained_rows: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    /// Mean of the rows for `ids`; UNK's row stands in when `ids` is empty.
    pub fn mean_vector(&self, ids: &[usize]) -> Vec<f64> {
        let ids: &[usize] = if ids.is_empty() { &[UNK] } else { ids };
        let mut out = vec![0.0; self.dim()];
        for &id in ids {
            for (o, v) in out.iter_mut().zip(self.row(id)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= ids.len() as f64);
        out
    }
}

/// Reads `token v1 .. v_dim` lines. Vocabulary rows found in the file are
/// copied; the rest keep their seeded uniform(-0.1, 0.1) draw.
pub fn load_pretrained(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_pretrained(std::io::BufReader::new(file), &path.display().to_string(), vocab, dim, seed)
}

pub fn read_pretrained<R: BufRead>(
    reader: R,
    source_name: &str,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::random(vocab.len(), dim, seed);
    let mut filled = vec![false; vocab.len()];
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(str::parse::<f64>)
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Parse {
                source_name: source_name.to_string(),
                line: line_no,
                msg: format!("bad number: {e}"),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: line_no,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(id) = vocab.get(token) {
            if id == PAD {
                continue;
            }
            for (c, v) in values.into_iter().enumerate() {
                table.matrix.set(id, c, v);
            }
            if !filled[id] {
                filled[id] = true;
                table.pretrained_rows += 1;
            }
        }
    }
    Ok(table)
}
