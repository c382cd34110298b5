//! Ranking and generation metrics. Ranking inputs are relevance labels
//! listed in ranked order.

use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("{0}: list has no relevant item")]
    NoRelevant(&'static str),
    #[error("{0}: cutoff must be at least 1")]
    BadCutoff(&'static str),
    #[error("bleu order {0} outside 1..=4")]
    BadOrder(usize),
}

/// Mean of precision@r over the ranks r of relevant items.
pub fn average_precision(labels: &[bool]) -> Result<f64, MetricError> {
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (i, &rel) in labels.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(MetricError::NoRelevant("average_precision"));
    }
    Ok(acc / hits as f64)
}

pub fn mean_average_precision(lists: &[Vec<bool>]) -> Result<f64, MetricError> {
    let mut acc = 0.0;
    for l in lists {
        acc += average_precision(l)?;
    }
    Ok(mean_of(acc, lists.len()))
}

/// `1 / rank` of the first relevant item; 0 when none is relevant.
pub fn reciprocal_rank(labels: &[bool]) -> f64 {
    labels
        .iter()
        .position(|&r| r)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

pub fn mean_reciprocal_rank(lists: &[Vec<bool>]) -> f64 {
    mean_of(lists.iter().map(|l| reciprocal_rank(l)).sum(), lists.len())
}

/// Binary-gain NDCG@k normalized by the ideal ordering of all labels.
pub fn ndcg_at_k(labels: &[bool], k: usize) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::BadCutoff("ndcg_at_k"));
    }
    let relevant = labels.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return Err(MetricError::NoRelevant("ndcg_at_k"));
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = labels
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..relevant.min(k)).map(discount).sum();
    Ok(dcg / ideal)
}

fn counts<'a, T: AsRef<str>>(tokens: &'a [T], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|t| t.as_ref()).collect()).or_default() += 1;
        }
    }
    m
}

/// Multiset term F1; 0 when either side is empty.
pub fn f1_terms<T: AsRef<str>>(predicted: &[T], reference: &[T]) -> f64 {
    if predicted.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let p = counts(predicted, 1);
    let r = counts(reference, 1);
    let overlap: usize = p.iter().map(|(k, &c)| c.min(*r.get(k).unwrap_or(&0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / predicted.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Corpus-level modified precision of order `n` times the corpus brevity
/// penalty, on a 0..100 scale.
pub fn corpus_bleu<T: AsRef<str>>(pairs: &[(Vec<T>, Vec<T>)], n: usize) -> Result<f64, MetricError> {
    if !(1..=4).contains(&n) {
        return Err(MetricError::BadOrder(n));
    }
    let (mut matched, mut total, mut pred_len, mut ref_len) = (0usize, 0usize, 0usize, 0usize);
    for (pred, reference) in pairs {
        pred_len += pred.len();
        ref_len += reference.len();
        let p = counts(pred, n);
        let r = counts(reference, n);
        total += p.values().sum::<usize>();
        matched += p.iter().map(|(k, &c)| c.min(*r.get(k).unwrap_or(&0))).sum::<usize>();
    }
    if total == 0 || pred_len == 0 {
        return Ok(0.0);
    }
    let bp = if pred_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    };
    Ok(100.0 * bp * matched as f64 / total as f64)
}

pub fn bleu_n<T: AsRef<str> + Clone>(predicted: &[T], reference: &[T], n: usize) -> Result<f64, MetricError> {
    corpus_bleu(&[(predicted.to_vec(), reference.to_vec())], n)
}

fn mean_of(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
