//! Brute-force reference implementations, written from the metric
//! definitions without sharing code with the library.

/// AP as the mean over relevant positions of (relevant at or above) / position.
pub fn average_precision(labels: &[bool]) -> Option<f64> {
    let positions: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if positions.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &p in &positions {
        let above = positions.iter().filter(|&&q| q <= p).count();
        sum += above as f64 / (p + 1) as f64;
    }
    Some(sum / positions.len() as f64)
}

pub fn reciprocal_rank(labels: &[bool]) -> f64 {
    for (i, &l) in labels.iter().enumerate() {
        if l {
            return 1.0 / (i as f64 + 1.0);
        }
    }
    0.0
}

fn dcg(labels: &[bool], k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..k.min(labels.len()) {
        if labels[i] {
            s += 1.0 / (i as f64 + 2.0).ln() * 2f64.ln();
        }
    }
    s
}

pub fn ndcg(labels: &[bool], k: usize) -> Option<f64> {
    let mut ideal = labels.to_vec();
    ideal.sort_by(|a, b| b.cmp(a));
    let best = dcg(&ideal, k);
    if best == 0.0 {
        None
    } else {
        Some(dcg(labels, k) / best)
    }
}

/// Size of the multiset intersection by repeated removal.
fn overlap<T: PartialEq + Clone>(a: &[T], b: &[T]) -> usize {
    let mut pool = b.to_vec();
    let mut n = 0;
    for x in a {
        if let Some(p) = pool.iter().position(|y| y == x) {
            pool.swap_remove(p);
            n += 1;
        }
    }
    n
}

pub fn f1(pred: &[String], reference: &[String]) -> f64 {
    let o = overlap(pred, reference) as f64;
    if o == 0.0 {
        return 0.0;
    }
    let p = o / pred.len() as f64;
    let r = o / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn ngrams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

/// Corpus BLEU of a single order: clipped n-gram precision pooled over
/// pairs times the corpus brevity penalty, scaled to 0..100.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)], n: usize) -> f64 {
    let (mut clipped, mut total, mut c, mut r) = (0, 0, 0, 0);
    for (pred, reference) in pairs {
        let pg = ngrams(pred, n);
        clipped += overlap(&pg, &ngrams(reference, n));
        total += pg.len();
        c += pred.len();
        r += reference.len();
    }
    if total == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { f64::exp(1.0 - r as f64 / c as f64) };
    100.0 * bp * clipped as f64 / total as f64
}

/// Okapi BM25 with the `+1` idf, straight from term counts.
pub fn bm25(query: &[String], doc: &[String], corpus: &[Vec<String>], k1: f64, b: f64) -> f64 {
    let n = corpus.len() as f64;
    let avgdl = corpus.iter().map(|d| d.len() as f64).sum::<f64>() / n;
    let mut score = 0.0;
    for term in query {
        let f = doc.iter().filter(|w| *w == term).count() as f64;
        if f == 0.0 {
            continue;
        }
        let nq = corpus.iter().filter(|d| d.iter().any(|w| w == term)).count() as f64;
        let idf = (1.0 + (n - nq + 0.5) / (nq + 0.5)).ln();
        score += idf * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * doc.len() as f64 / avgdl));
    }
    score
}
