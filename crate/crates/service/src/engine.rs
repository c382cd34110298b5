//! Model-side operations of a live session. A session is its event
//! transcript; every request rebuilds the recurrent state by replaying it on
//! a fresh evaluation tape.

use cars_core::autodiff::{Tape, Var};
use cars_core::data::bm25::{Bm25Params, CorpusIndex};
use cars_core::data::log::clean_text;
use cars_core::data::Document;
use cars_core::encoder::EncodedSequence;
use cars_core::model::{encode_nonempty, CarsModel};
use cars_core::ranker::rank_order;
use cars_core::session::{ContextAttentive, SessionState};
use cars_core::vocab::{tokenize, Vocabulary};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("query is empty after cleaning")]
    EmptyQuery,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("document {0:?} was not shown in this session")]
    UnknownDoc(String),
    #[error("model: {0}")]
    Model(#[from] cars_core::Error),
}

impl From<cars_core::autodiff::TensorError> for EngineError {
    fn from(e: cars_core::autodiff::TensorError) -> Self {
        Self::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub title: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub tokens: Vec<String>,
    /// Mean log-probability per decoding step.
    pub score: f64,
    /// Log-probability of each emitted token, the end marker last.
    pub log_probs: Vec<f64>,
}

impl Suggestion {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Context-attention weights over past queries and clicks, per head.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub query_chain_rank: Vec<f64>,
    pub query_chain_suggest: Vec<f64>,
    pub click_chain_rank: Vec<f64>,
    pub click_chain_suggest: Vec<f64>,
}

/// One transcript entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Query {
        text: String,
        k: usize,
        shown: Vec<String>,
        suggestion: Suggestion,
        /// The text equals the suggestion shown just before it.
        accepted_suggestion: bool,
    },
    Click {
        doc_id: String,
        suggestion: Suggestion,
    },
}

impl Event {
    fn suggestion(&self) -> &Suggestion {
        match self {
            Self::Query { suggestion, .. } | Self::Click { suggestion, .. } => suggestion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub results: Vec<RankedDoc>,
    pub suggestion: Suggestion,
    pub attention: Attention,
}

/// Lengths of the two chains and the hash of their recurrent states.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSummary {
    pub query_chain_len: usize,
    pub click_chain_len: usize,
    pub state_hash: String,
}

/// Loaded model, vocabulary and document index. Read-only once built.
pub struct Engine {
    model: CarsModel,
    vocab: Vocabulary,
    index: CorpusIndex,
    pool: usize,
}

struct Replayed {
    state: SessionState,
    last_query: Option<EncodedSequence>,
}

impl Engine {
    pub fn new(model: CarsModel, vocab: Vocabulary, documents: &[Document], pool: usize) -> Self {
        let index = CorpusIndex::build(
            documents.iter().map(|d| (d.doc_id.clone(), d.title.clone())),
            Bm25Params::default(),
        );
        Self {
            model,
            vocab,
            index,
            pool,
        }
    }

    pub fn parameter_hash(&self) -> String {
        self.model.parameter_hash()
    }

    pub fn document_count(&self) -> usize {
        self.index.len()
    }

    fn encode_title(&self, tape: &mut Tape<'_>, doc_id: &str) -> Result<EncodedSequence> {
        let idx = self
            .index
            .index_of(doc_id)
            .ok_or_else(|| EngineError::UnknownDoc(doc_id.to_string()))?;
        let tokens = encode_nonempty(self.index.title(idx), &self.vocab);
        Ok(self.model.encode_doc(tape, &tokens, 0.0)?)
    }

    fn replay(&self, tape: &mut Tape<'_>, events: &[Event]) -> Result<Replayed> {
        let mut out = Replayed {
            state: SessionState::new(),
            last_query: None,
        };
        for e in events {
            match e {
                Event::Query { text, .. } => {
                    let q = self.model.encode_query(tape, &encode_nonempty(text, &self.vocab), 0.0)?;
                    self.model.session.query_update(tape, &mut out.state, q.pi)?;
                    out.last_query = Some(q);
                }
                Event::Click { doc_id, .. } => {
                    let d = self.encode_title(tape, doc_id)?;
                    self.model.session.click_update(tape, &mut out.state, d.pi)?;
                }
            }
        }
        Ok(out)
    }

    fn summarize(tape: &Tape<'_>, state: &SessionState) -> StateSummary {
        let mut h = Sha256::new();
        for (tag, chain) in [(b'q', &state.query_states), (b'c', &state.click_states)] {
            h.update([tag]);
            h.update((chain.len() as u64).to_le_bytes());
            for s in chain {
                for v in tape.value(s.h).data().iter().chain(tape.value(s.c).data()) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        StateSummary {
            query_chain_len: state.query_states.len(),
            click_chain_len: state.click_states.len(),
            state_hash: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    /// Chain lengths and state hash after replaying `events`.
    pub fn state_summary(&self, events: &[Event]) -> Result<StateSummary> {
        let mut tape = Tape::new(&self.model.params);
        let r = self.replay(&mut tape, events)?;
        Ok(Self::summarize(&tape, &r.state))
    }

    fn suggestion(
        &self,
        tape: &mut Tape<'_>,
        state: &SessionState,
        query: &EncodedSequence,
    ) -> Result<(Suggestion, ContextAttentive)> {
        let (decoded, ctx) = self.model.suggest(tape, state, query)?;
        let score = decoded.score();
        Ok((
            Suggestion {
                tokens: self.vocab.decode(&decoded.tokens),
                score,
                log_probs: decoded.step_log_probs,
            },
            ctx,
        ))
    }

    /// Ranks the BM25 pool of `text` under the context of `events`, decodes
    /// a suggestion, and returns the event to append.
    pub fn submit_query(&self, events: &[Event], text: &str, k: usize) -> Result<(QueryOutcome, Event)> {
        let text = clean_text(text);
        if text.is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        if k == 0 {
            return Err(EngineError::ZeroK);
        }
        let mut tape = Tape::new(&self.model.params);
        let r = self.replay(&mut tape, events)?;
        let query = self.model.encode_query(&mut tape, &encode_nonempty(&text, &self.vocab), 0.0)?;

        let pool = self.index.rank(&tokenize(&text), self.pool);
        let mut docs = Vec::with_capacity(pool.len());
        for &(idx, _) in &pool {
            let tokens = encode_nonempty(self.index.title(idx), &self.vocab);
            docs.push(self.model.encode_doc(&mut tape, &tokens, 0.0)?);
        }
        let (probs, rank_ctx) =
            self.model
                .doc_probabilities(&mut tape, &r.state, &query, &docs, self.model.eval_norm())?;
        let results: Vec<RankedDoc> = if pool.is_empty() {
            Vec::new()
        } else {
            let ids: Vec<&str> = pool.iter().map(|&(i, _)| self.index.doc_id(i)).collect();
            rank_order(&probs, &ids)?
                .into_iter()
                .take(k)
                .map(|j| RankedDoc {
                    doc_id: ids[j].to_string(),
                    title: self.index.title(pool[j].0).to_string(),
                    score: probs[j],
                })
                .collect()
        };
        let (suggestion, suggest_ctx) = self.suggestion(&mut tape, &r.state, &query)?;
        let attention = Attention {
            query_chain_rank: weights(&tape, rank_ctx.query_weights),
            query_chain_suggest: weights(&tape, suggest_ctx.query_weights),
            click_chain_rank: weights(&tape, rank_ctx.click_weights),
            click_chain_suggest: weights(&tape, suggest_ctx.click_weights),
        };
        let accepted = events
            .last()
            .is_some_and(|e| e.suggestion().text() == text);
        let event = Event::Query {
            text,
            k,
            shown: results.iter().map(|d| d.doc_id.clone()).collect(),
            suggestion: suggestion.clone(),
            accepted_suggestion: accepted,
        };
        Ok((
            QueryOutcome {
                results,
                suggestion,
                attention,
            },
            event,
        ))
    }

    /// Records a click on a document shown earlier in the session and
    /// re-decodes the suggestion for the latest query from the updated state.
    pub fn register_click(&self, events: &[Event], doc_id: &str) -> Result<(Suggestion, Event)> {
        let shown = events.iter().any(|e| match e {
            Event::Query { shown, .. } => shown.iter().any(|d| d == doc_id),
            Event::Click { .. } => false,
        });
        if !shown {
            return Err(EngineError::UnknownDoc(doc_id.to_string()));
        }
        let mut tape = Tape::new(&self.model.params);
        let mut r = self.replay(&mut tape, events)?;
        let d = self.encode_title(&mut tape, doc_id)?;
        self.model.session.click_update(&mut tape, &mut r.state, d.pi)?;
        let query = r.last_query.expect("a shown document implies a query");
        let (suggestion, _) = self.suggestion(&mut tape, &r.state, &query)?;
        let event = Event::Click {
            doc_id: doc_id.to_string(),
            suggestion: suggestion.clone(),
        };
        Ok((suggestion, event))
    }
}

fn weights(tape: &Tape<'_>, v: Option<Var>) -> Vec<f64> {
    v.map_or_else(Vec::new, |v| tape.value(v).data().to_vec())
}
