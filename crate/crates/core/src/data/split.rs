//! Chronological train/validation/test split by task start time.

use serde::{Deserialize, Serialize};

use super::SearchTask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.75,
            val: 0.125,
            test: 0.125,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<SearchTask>,
    pub val: Vec<SearchTask>,
    pub test: Vec<SearchTask>,
}

/// Sorts by start time (then id) and cuts at the rounded cumulative ratios.
pub fn split_dataset(mut tasks: Vec<SearchTask>, ratios: SplitRatios) -> Result<DatasetSplits> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || r.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("bad split ratios {r:?}")));
    }
    let total: f64 = r.iter().sum();
    tasks.sort_by(|a, b| a.start_time().cmp(&b.start_time()).then_with(|| a.id.cmp(&b.id)));
    let n = tasks.len();
    let cut1 = ((r[0] / total) * n as f64).round() as usize;
    let cut2 = (((r[0] + r[1]) / total) * n as f64).round() as usize;
    let test = tasks.split_off(cut2.min(n));
    let val = tasks.split_off(cut1.min(tasks.len()));
    let splits = DatasetSplits {
        train: tasks,
        val,
        test,
    };
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if part.is_empty() {
            return Err(Error::Data(format!("{name} split is empty ({n} tasks in total)")));
        }
    }
    Ok(splits)
}
