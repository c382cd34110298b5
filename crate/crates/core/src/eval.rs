//! Test-set evaluation of ranking and suggestion with teacher-forced session
//! context, plus the report and CSV formats.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::SearchTask;
use crate::error::Result;
use crate::metrics::{average_precision, corpus_bleu, f1_terms, ndcg_at_k, reciprocal_rank};
use crate::model::{encode_nonempty, encode_task, CarsModel, EncodedTask};
use crate::ranker::rank_order;
use crate::session::{Head, SessionState};
use crate::vocab::{tokenize, Vocabulary};

/// Maximum number of background candidates per anchor query.
pub const MAX_SUGGESTION_CANDIDATES: usize = 20;

/// Task-length bucket: short (2 queries), medium (3-4), long (5+).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
}

impl LengthBucket {
    pub fn of(task_len: usize) -> Self {
        match task_len {
            0..=2 => Self::Short,
            3..=4 => Self::Medium,
            _ => Self::Long,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Short => "short",
            Self::Medium => "medium",
            Self::Long => "long",
        }
    }
}

/// Metrics of one ranked query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub task: usize,
    pub position: usize,
    pub bucket: LengthBucket,
    pub ap: f64,
    pub rr: f64,
    pub ndcg: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub queries: usize,
    pub map: f64,
    pub mrr: f64,
    pub ndcg_at_1: f64,
    pub ndcg_at_3: f64,
    pub ndcg_at_10: f64,
}

impl RankingSummary {
    fn of<'a>(items: impl Iterator<Item = &'a QueryRanking>) -> Self {
        let mut s = Self::default();
        for q in items {
            s.queries += 1;
            s.map += q.ap;
            s.mrr += q.rr;
            s.ndcg_at_1 += q.ndcg[0];
            s.ndcg_at_3 += q.ndcg[1];
            s.ndcg_at_10 += q.ndcg[2];
        }
        if s.queries > 0 {
            let n = s.queries as f64;
            s.map /= n;
            s.mrr /= n;
            s.ndcg_at_1 /= n;
            s.ndcg_at_3 /= n;
            s.ndcg_at_10 /= n;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub overall: RankingSummary,
    pub by_length: BTreeMap<LengthBucket, RankingSummary>,
    /// Queries without any relevant candidate, left out of every mean.
    pub skipped_queries: usize,
    pub per_query: Vec<QueryRanking>,
}

impl RankingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,queries,map,mrr,ndcg@1,ndcg@3,ndcg@10\n");
        for (b, s) in &self.by_length {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                b.name(),
                s.queries,
                s.map,
                s.mrr,
                s.ndcg_at_1,
                s.ndcg_at_3,
                s.ndcg_at_10
            ));
        }
        out
    }
}

/// Builds the ranking report from per-query scores aligned with each task's
/// candidates.
pub fn ranking_report_from_scores(tasks: &[EncodedTask], scores: &[Vec<Vec<f64>>]) -> Result<RankingReport> {
    let mut per_query = Vec::new();
    let mut skipped = 0;
    for (t, (task, task_scores)) in tasks.iter().zip(scores).enumerate() {
        let bucket = LengthBucket::of(task.queries.len());
        for (i, (q, s)) in task.queries.iter().zip(task_scores).enumerate() {
            if !q.docs.iter().any(|d| d.clicked) {
                skipped += 1;
                continue;
            }
            let ids: Vec<&str> = q.docs.iter().map(|d| d.doc_id.as_str()).collect();
            let order = rank_order(s, &ids)?;
            let labels: Vec<bool> = order.iter().map(|&k| q.docs[k].clicked).collect();
            per_query.push(QueryRanking {
                task: t,
                position: i,
                bucket,
                ap: average_precision(&labels)?,
                rr: reciprocal_rank(&labels),
                ndcg: [
                    ndcg_at_k(&labels, 1)?,
                    ndcg_at_k(&labels, 3)?,
                    ndcg_at_k(&labels, 10)?,
                ],
            });
        }
    }
    let mut by_length = BTreeMap::new();
    for b in [LengthBucket::Short, LengthBucket::Medium, LengthBucket::Long] {
        let s = RankingSummary::of(per_query.iter().filter(|q| q.bucket == b));
        if s.queries > 0 {
            by_length.insert(b, s);
        }
    }
    Ok(RankingReport {
        overall: RankingSummary::of(per_query.iter()),
        by_length,
        skipped_queries: skipped,
        per_query,
    })
}

/// Click probabilities for every candidate of every query, with the session
/// rebuilt from the recorded history.
pub fn score_task(model: &CarsModel, task: &EncodedTask) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new(&model.params);
    let mut state = SessionState::new();
    let mut out = Vec::with_capacity(task.queries.len());
    for q in &task.queries {
        let qe = model.encode_query(&mut tape, &q.tokens, 0.0)?;
        let docs = q
            .docs
            .iter()
            .map(|d| model.encode_doc(&mut tape, &d.tokens, 0.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let (scores, _) = model.doc_probabilities(&mut tape, &state, &qe, &docs, model.eval_norm())?;
        out.push(scores);
        let clicked: Vec<_> = q.clicks.iter().map(|&c| docs[c]).collect();
        model.observe(&mut tape, &mut state, &qe, &clicked)?;
    }
    Ok(out)
}

pub fn evaluate_ranking(model: &CarsModel, tasks: &[EncodedTask]) -> Result<RankingReport> {
    let scores = tasks
        .par_iter()
        .map(|t| score_task(model, t))
        .collect::<Result<Vec<_>>>()?;
    ranking_report_from_scores(tasks, &scores)
}

/// Next-query counts following each query text in a background set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Background {
    following: HashMap<String, HashMap<String, usize>>,
}

impl Background {
    pub fn build(tasks: &[SearchTask]) -> Self {
        let mut following: HashMap<String, HashMap<String, usize>> = HashMap::new();
        for t in tasks {
            for w in t.queries.windows(2) {
                *following
                    .entry(w[0].text.clone())
                    .or_default()
                    .entry(w[1].text.clone())
                    .or_default() += 1;
            }
        }
        Self { following }
    }

    /// Up to `limit` most frequent followers of `anchor`; ties lexicographic.
    pub fn candidates(&self, anchor: &str, limit: usize) -> Vec<String> {
        let Some(m) = self.following.get(anchor) else {
            return Vec::new();
        };
        let mut v: Vec<(&String, &usize)> = m.iter().collect();
        v.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        v.into_iter().take(limit).map(|(q, _)| q.clone()).collect()
    }
}

/// Suggestion outcome for one task's anchor query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSuggestion {
    pub task: usize,
    pub bucket: LengthBucket,
    /// `None` when the background set has no candidate for the anchor.
    pub rr: Option<f64>,
    pub generated: Vec<String>,
    pub reference: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuggestionSummary {
    pub tasks: usize,
    pub ranked: usize,
    pub no_candidates: usize,
    pub candidate_mrr: f64,
    pub f1: f64,
    pub bleu: [f64; 4],
}

impl SuggestionSummary {
    fn of<'a>(items: impl Iterator<Item = &'a AnchorSuggestion>) -> Result<Self> {
        let mut s = Self::default();
        let mut pairs = Vec::new();
        let mut rr_sum = 0.0;
        let mut f1_sum = 0.0;
        for a in items {
            s.tasks += 1;
            match a.rr {
                Some(rr) => {
                    s.ranked += 1;
                    rr_sum += rr;
                }
                None => s.no_candidates += 1,
            }
            f1_sum += f1_terms(&a.generated, &a.reference);
            pairs.push((a.generated.clone(), a.reference.clone()));
        }
        if s.ranked > 0 {
            s.candidate_mrr = rr_sum / s.ranked as f64;
        }
        if s.tasks > 0 {
            s.f1 = f1_sum / s.tasks as f64;
        }
        for n in 1..=4 {
            s.bleu[n - 1] = corpus_bleu(&pairs, n)?;
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestionReport {
    pub overall: SuggestionSummary,
    pub by_length: BTreeMap<LengthBucket, SuggestionSummary>,
    pub per_task: Vec<AnchorSuggestion>,
}

impl SuggestionReport {
    pub fn from_items(per_task: Vec<AnchorSuggestion>) -> Result<Self> {
        let mut by_length = BTreeMap::new();
        for b in [LengthBucket::Short, LengthBucket::Medium, LengthBucket::Long] {
            if per_task.iter().any(|a| a.bucket == b) {
                by_length.insert(b, SuggestionSummary::of(per_task.iter().filter(|a| a.bucket == b))?);
            }
        }
        Ok(Self {
            overall: SuggestionSummary::of(per_task.iter())?,
            by_length,
            per_task,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,tasks,candidate_mrr,f1,bleu1,bleu2,bleu3,bleu4\n");
        for (b, s) in &self.by_length {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4}\n",
                b.name(),
                s.tasks,
                s.candidate_mrr,
                s.f1,
                s.bleu[0],
                s.bleu[1],
                s.bleu[2],
                s.bleu[3]
            ));
        }
        out
    }
}

/// Reciprocal rank of `target` among `candidates` ordered by descending
/// score, ties by candidate text; 0 when the target is absent.
pub fn candidate_reciprocal_rank(candidates: &[String], scores: &[f64], target: &str) -> Result<f64> {
    let order = rank_order(scores, candidates)?;
    Ok(order
        .iter()
        .position(|&k| candidates[k] == target)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64))
}

fn suggest_for_task(
    model: &CarsModel,
    vocab: &Vocabulary,
    background: &Background,
    index: usize,
    task: &SearchTask,
) -> Result<Option<AnchorSuggestion>> {
    let n = task.queries.len();
    if n < 2 {
        return Ok(None);
    }
    let encoded = encode_task(task, vocab);
    let anchor = n - 2;
    let mut tape = Tape::new(&model.params);
    let mut state = SessionState::new();
    for q in &encoded.queries[..anchor] {
        let qe = model.encode_query(&mut tape, &q.tokens, 0.0)?;
        let clicked = q
            .clicks
            .iter()
            .map(|&c| model.encode_doc(&mut tape, &q.docs[c].tokens, 0.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        model.observe(&mut tape, &mut state, &qe, &clicked)?;
    }
    let qe = model.encode_query(&mut tape, &encoded.queries[anchor].tokens, 0.0)?;
    let ctx = model.context(&mut tape, &state, &qe, Head::Suggest)?;
    let target = &task.queries[n - 1].text;
    let cands = background.candidates(&task.queries[anchor].text, MAX_SUGGESTION_CANDIDATES);
    let rr = if cands.is_empty() {
        None
    } else {
        let scores = cands
            .iter()
            .map(|c| model.candidate_score(&mut tape, &ctx, &qe, &encode_nonempty(c, vocab)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Some(candidate_reciprocal_rank(&cands, &scores, target)?)
    };
    let decoded = model
        .decoder
        .greedy_decode(&mut tape, ctx.joint, qe.states, model.config.max_decode_len)?;
    Ok(Some(AnchorSuggestion {
        task: index,
        bucket: LengthBucket::of(n),
        rr,
        generated: vocab.decode(&decoded.tokens),
        reference: tokenize(target),
    }))
}

/// Discrimination over background candidates and greedy generation at the
/// second-to-last query of every task.
pub fn evaluate_suggestion(
    model: &CarsModel,
    vocab: &Vocabulary,
    tasks: &[SearchTask],
    background: &Background,
) -> Result<SuggestionReport> {
    let items = tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| suggest_for_task(model, vocab, background, i, t))
        .collect::<Result<Vec<_>>>()?;
    SuggestionReport::from_items(items.into_iter().flatten().collect())
}
