//! Search logs, task segmentation, BM25 candidate generation, dataset splits
//! and the synthetic corpus generator.

pub mod bm25;
pub mod candidates;
pub mod log;
pub mod prepare;
pub mod segment;
pub mod split;
pub mod synth;

use serde::{Deserialize, Serialize};

/// A corpus document: identifier and cleaned title.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
}

/// A document shown for a query, with its click time (0 when not clicked).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub doc_id: String,
    pub title: String,
    pub click_time: u64,
}

impl Candidate {
    pub fn clicked(&self) -> bool {
        self.click_time > 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub text: String,
    pub time: u64,
    pub candidates: Vec<Candidate>,
}

impl TaskQuery {
    /// Indices of clicked candidates ordered by click time.
    pub fn clicks_in_order(&self) -> Vec<usize> {
        let clicks: Vec<(u64, usize)> = self
            .candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.clicked())
            .map(|(i, c)| (c.click_time, i))
            .collect();
        crate::session::order_by_click_time(&clicks)
    }
}

/// Consecutive queries of one user serving a single information need.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchTask {
    pub id: String,
    pub user: String,
    pub queries: Vec<TaskQuery>,
}

impl SearchTask {
    pub fn start_time(&self) -> u64 {
        self.queries.first().map_or(0, |q| q.time)
    }
}
