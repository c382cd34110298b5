//! Splits a user's query stream into search tasks by the cosine similarity of
//! consecutive queries.

use std::collections::HashMap;

use crate::vocab::{tokenize, EmbeddingTable, Vocabulary};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How a query string becomes a vector for the similarity test.
#[derive(Clone, Copy, Debug)]
pub enum QueryVectors<'a> {
    /// Mean of the terms' embedding rows.
    Embeddings(&'a EmbeddingTable, &'a Vocabulary),
    /// Term counts, the mean of one-hot word vectors up to scale.
    BagOfWords,
}

fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb).sqrt()
    }
}

fn term_counts(text: &str) -> HashMap<String, f64> {
    let mut m = HashMap::new();
    for t in tokenize(text) {
        *m.entry(t).or_insert(0.0) += 1.0;
    }
    m
}

impl QueryVectors<'_> {
    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        match self {
            Self::Embeddings(table, vocab) => {
                dense_cosine(&table.mean_vector(&vocab.encode(a)), &table.mean_vector(&vocab.encode(b)))
            }
            Self::BagOfWords => {
                let (ca, cb) = (term_counts(a), term_counts(b));
                let dot: f64 = ca.iter().map(|(t, x)| x * cb.get(t).unwrap_or(&0.0)).sum();
                let na = ca.values().map(|x| x * x).sum::<f64>();
                let nb = cb.values().map(|x| x * x).sum::<f64>();
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na * nb).sqrt()
                }
            }
        }
    }
}

/// Index ranges of maximal runs whose consecutive cosine is at least
/// `threshold`. The runs partition `0..texts.len()`.
pub fn segment_boundaries<S: AsRef<str>>(texts: &[S], vectors: QueryVectors<'_>, threshold: f64) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..texts.len() {
        if vectors.cosine(texts[i - 1].as_ref(), texts[i].as_ref()) < threshold {
            out.push(start..i);
            start = i;
        }
    }
    if !texts.is_empty() {
        out.push(start..texts.len());
    }
    out
}

/// Segments and keeps only tasks with at least two queries.
pub fn segment_tasks<S: AsRef<str>>(texts: &[S], vectors: QueryVectors<'_>, threshold: f64) -> Vec<std::ops::Range<usize>> {
    segment_boundaries(texts, vectors, threshold)
        .into_iter()
        .filter(|r| r.len() >= 2)
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn identical_queries_stay_together() {
        let v = QueryVectors::BagOfWords;
        assert!((v.cosine("a b", "a b") - 1.0).abs() < 1e-12);
        assert_eq!(segment_tasks(&["a b", "a b"], v, 0.5), vec![0..2]);
    }

    #[test]
    fn orthogonal_embeddings_split() {
        let vocab = Vocabulary::from(
            ["<pad>", "<unk>", "<s>", "</q>", "x", "y"]
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>(),
        );
        let mut m = Tensor::zeros(6, 2);
        m.set(4, 0, 1.0);
        m.set(5, 1, 1.0);
        m.set(1, 0, 0.3);
        let table = EmbeddingTable {
            matrix: m,
            trainable: false,
            pretrained_rows: 6,
        };
        let v = QueryVectors::Embeddings(&table, &vocab);
        assert_eq!(v.cosine("x", "y"), 0.0);
        assert_eq!(segment_boundaries(&["x", "y"], v, 0.5), vec![0..1, 1..2]);
        // All-UNK queries use the UNK row.
        assert!((v.cosine("zz", "x") - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_built_log_boundaries() {
        let qs = [
            "cheap flights paris",
            "cheap flights paris june",
            "python list sort",
            "python sort dict",
            "weather",
        ];
        // cos(q0,q1)=3/sqrt(12)=0.866, cos(q1,q2)=0, cos(q2,q3)=2/3, cos(q3,q4)=0
        let v = QueryVectors::BagOfWords;
        assert_eq!(segment_boundaries(&qs, v, 0.5), vec![0..2, 2..4, 4..5]);
        assert_eq!(segment_tasks(&qs, v, 0.5), vec![0..2, 2..4]);
    }

    #[test]
    fn threshold_is_inclusive() {
        // cos = 1/2 exactly.
        assert_eq!(segment_boundaries(&["a b", "a c"], QueryVectors::BagOfWords, 0.5), vec![0..2]);
    }

    proptest! {
        #[test]
        fn segments_partition_the_stream(qs in prop::collection::vec(prop::collection::vec("[a-e]", 1..4), 0..20)) {
            let texts: Vec<String> = qs.iter().map(|w| w.join(" ")).collect();
            let segs = segment_boundaries(&texts, QueryVectors::BagOfWords, 0.5);
            let mut next = 0;
            for r in &segs {
                prop_assert_eq!(r.start, next);
                prop_assert!(r.end > r.start);
                next = r.end;
            }
            prop_assert_eq!(next, texts.len());
        }
    }
}
