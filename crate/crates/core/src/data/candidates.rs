//! Weakly labeled candidate sets: recorded clicks found in the BM25 pool plus
//! negatives sampled around the ranks where those clicks landed.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;

use super::bm25::CorpusIndex;
use super::Candidate;
use crate::vocab::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CandidateConfig {
    pub pool: usize,
    pub window: usize,
    pub n_candidates: usize,
}

impl CandidateConfig {
    pub const TRAIN_CANDIDATES: usize = 5;
    pub const TEST_CANDIDATES: usize = 50;

    pub fn with_candidates(n_candidates: usize) -> Self {
        Self {
            pool: 1000,
            window: 50,
            n_candidates,
        }
    }
}

/// Candidate list in BM25 rank order, or `None` when no recorded click is in
/// the pool. `clicks` maps doc id to click time.
pub fn generate_candidates<R: Rng>(
    query: &str,
    clicks: &HashMap<String, u64>,
    index: &CorpusIndex,
    cfg: CandidateConfig,
    rng: &mut R,
) -> Option<Vec<Candidate>> {
    let ranked = index.rank(&tokenize(query), cfg.pool);
    let clicked_ranks: Vec<usize> = ranked
        .iter()
        .enumerate()
        .filter(|(_, (idx, _))| clicks.contains_key(index.doc_id(*idx)))
        .map(|(r, _)| r)
        .collect();
    if clicked_ranks.is_empty() {
        return None;
    }
    let half = cfg.window / 2;
    let is_clicked = |r: usize| clicked_ranks.binary_search(&r).is_ok();
    let mut in_window: BTreeSet<usize> = BTreeSet::new();
    for &p in &clicked_ranks {
        let lo = p.saturating_sub(half);
        let hi = (p + half).min(ranked.len() - 1);
        in_window.extend((lo..=hi).filter(|&r| !is_clicked(r)));
    }
    let needed = cfg.n_candidates.saturating_sub(clicked_ranks.len());
    let window_ranks: Vec<usize> = in_window.iter().copied().collect();
    let mut chosen: BTreeSet<usize> = window_ranks
        .choose_multiple(rng, needed.min(window_ranks.len()))
        .copied()
        .collect();
    if chosen.len() < needed {
        let distance = |r: usize| clicked_ranks.iter().map(|&p| p.abs_diff(r)).min().unwrap_or(usize::MAX);
        let mut rest: Vec<usize> = (0..ranked.len())
            .filter(|&r| !is_clicked(r) && !chosen.contains(&r))
            .collect();
        rest.sort_by_key(|&r| (distance(r), r));
        chosen.extend(rest.into_iter().take(needed - chosen.len()));
    }
    let mut ranks: Vec<usize> = clicked_ranks.iter().copied().chain(chosen).collect();
    ranks.sort_unstable();
    Some(
        ranks
            .into_iter()
            .map(|r| {
                let idx = ranked[r].0;
                let doc_id = index.doc_id(idx).to_string();
                Candidate {
                    click_time: clicks.get(&doc_id).copied().unwrap_or(0),
                    title: index.title(idx).to_string(),
                    doc_id,
                }
            })
            .collect(),
    )
}
