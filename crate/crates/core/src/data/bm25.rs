//! Inverted index over document titles with BM25 scoring.

use std::collections::{BTreeMap, HashMap};

use crate::vocab::tokenize;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: K1, b: B }
    }
}

/// Immutable index. Documents are numbered in ascending doc-id order, so
/// every posting list is sorted by doc id.
#[derive(Clone, Debug)]
pub struct CorpusIndex {
    doc_ids: Vec<String>,
    titles: Vec<String>,
    lengths: Vec<usize>,
    avg_len: f64,
    postings: HashMap<String, Vec<(usize, usize)>>,
    lookup: HashMap<String, usize>,
    params: Bm25Params,
}

pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let (n, df) = (doc_count as f64, doc_freq as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

fn term_part(tf: f64, len: f64, avg_len: f64, p: Bm25Params) -> f64 {
    tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * len / avg_len))
}

impl CorpusIndex {
    /// Builds from `(doc_id, title)` pairs; a repeated id keeps its first title.
    pub fn build<I, S, T>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut sorted: BTreeMap<String, String> = BTreeMap::new();
        for (id, title) in docs {
            sorted.entry(id.into()).or_insert_with(|| title.into());
        }
        let mut doc_ids = Vec::with_capacity(sorted.len());
        let mut titles = Vec::with_capacity(sorted.len());
        let mut lengths = Vec::with_capacity(sorted.len());
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (idx, (id, title)) in sorted.into_iter().enumerate() {
            let terms = tokenize(&title);
            lengths.push(terms.len());
            let mut tf: BTreeMap<String, usize> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push((idx, n));
            }
            doc_ids.push(id);
            titles.push(title);
        }
        let total: usize = lengths.iter().sum();
        let avg_len = if lengths.is_empty() {
            0.0
        } else {
            total as f64 / lengths.len() as f64
        };
        let lookup = doc_ids.iter().enumerate().map(|(i, d)| (d.clone(), i)).collect();
        Self {
            doc_ids,
            titles,
            lengths,
            avg_len,
            postings,
            lookup,
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_id(&self, idx: usize) -> &str {
        &self.doc_ids[idx]
    }

    pub fn title(&self, idx: usize) -> &str {
        &self.titles[idx]
    }

    pub fn index_of(&self, doc_id: &str) -> Option<usize> {
        self.lookup.get(doc_id).copied()
    }

    pub fn postings(&self, term: &str) -> &[(usize, usize)] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    /// BM25 of one document; `None` when the id is not indexed.
    pub fn score(&self, query_terms: &[String], doc_id: &str) -> Option<f64> {
        let idx = self.index_of(doc_id)?;
        let len = self.lengths[idx] as f64;
        Some(
            query_terms
                .iter()
                .map(|t| {
                    let list = self.postings(t);
                    match list.binary_search_by_key(&idx, |p| p.0) {
                        Ok(k) => idf(self.len(), list.len()) * term_part(list[k].1 as f64, len, self.avg_len, self.params),
                        Err(_) => 0.0,
                    }
                })
                .sum(),
        )
    }

    /// Documents matching at least one query term, best first, at most
    /// `limit`. Equal scores are ordered by doc id.
    pub fn rank(&self, query_terms: &[String], limit: usize) -> Vec<(usize, f64)> {
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for t in query_terms {
            let list = self.postings(t);
            if list.is_empty() {
                continue;
            }
            let w = idf(self.len(), list.len());
            for &(idx, tf) in list {
                *acc.entry(idx).or_insert(0.0) += w * term_part(tf as f64, self.lengths[idx] as f64, self.avg_len, self.params);
            }
        }
        let mut ranked: Vec<(usize, f64)> = acc.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(limit);
        ranked
    }
}

/// Scores by scanning raw token lists, without any index.
pub fn naive_score(query_terms: &[String], doc: usize, corpus: &[Vec<String>], params: Bm25Params) -> f64 {
    let n = corpus.len();
    let avg = corpus.iter().map(Vec::len).sum::<usize>() as f64 / n as f64;
    let len = corpus[doc].len() as f64;
    query_terms
        .iter()
        .map(|t| {
            let tf = corpus[doc].iter().filter(|w| *w == t).count();
            if tf == 0 {
                return 0.0;
            }
            let df = corpus.iter().filter(|d| d.contains(t)).count();
            let idf = ((n as f64 - df as f64 + 0.5) / (df as f64 + 0.5) + 1.0).ln();
            idf * tf as f64 * (params.k1 + 1.0) / (tf as f64 + params.k1 * (1.0 - params.b + params.b * len / avg))
        })
        .sum()
}
