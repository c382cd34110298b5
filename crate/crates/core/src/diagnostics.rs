//! Finite-difference check of the whole joint objective on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, GradCheckReport, TensorError};
use crate::model::{CarsModel, EncodedDoc, EncodedQuery, EncodedTask, LossConfig, ModelConfig};
use crate::ranker::NormMode;
use crate::vocab::RESERVED;

/// Shape of the tiny problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TinySpec {
    pub vocab_size: usize,
    pub dim: usize,
    pub tasks: usize,
    pub max_task_len: usize,
    pub docs_per_query: usize,
}

impl Default for TinySpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            dim: 8,
            tasks: 2,
            max_task_len: 3,
            docs_per_query: 3,
        }
    }
}

/// Random model and tasks for `spec`. Every task has 2 to `max_task_len`
/// queries and each query at least one click.
pub fn tiny_problem(spec: TinySpec, seed: u64) -> Result<(CarsModel, Vec<EncodedTask>), TensorError> {
    let config = ModelConfig {
        vocab_size: spec.vocab_size,
        word_dim: spec.dim,
        hidden: spec.dim,
        max_decode_len: 4,
        ..ModelConfig::default()
    };
    let model = CarsModel::random(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let first_word = RESERVED.len();
    let words = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let n = rng.gen_range(1..=3);
        (0..n).map(|_| rng.gen_range(first_word..spec.vocab_size)).collect()
    };
    let tasks = (0..spec.tasks)
        .map(|t| EncodedTask {
            queries: (0..rng.gen_range(2..=spec.max_task_len.max(2)))
                .map(|q| {
                    let clicked = rng.gen_range(0..spec.docs_per_query);
                    EncodedQuery {
                        tokens: words(&mut rng),
                        docs: (0..spec.docs_per_query)
                            .map(|d| EncodedDoc {
                                doc_id: format!("t{t}q{q}d{d}"),
                                tokens: words(&mut rng),
                                clicked: d == clicked,
                            })
                            .collect(),
                        clicks: vec![clicked],
                    }
                })
                .collect(),
        })
        .collect();
    Ok((model, tasks))
}

/// Central-difference check of the regularized joint loss over every
/// parameter of a tiny model, with batch-statistics normalization.
pub fn joint_gradcheck(spec: TinySpec, seed: u64, eps: f64) -> Result<GradCheckReport, TensorError> {
    let (model, tasks) = tiny_problem(spec, seed)?;
    let refs: Vec<&EncodedTask> = tasks.iter().collect();
    let cfg = LossConfig::default();
    let mut store = model.params.clone();
    finite_difference_check(&mut store, eps, true, |tape| {
        Ok(model.batch_loss(tape, &refs, &cfg, NormMode::Batch)?.total)
    })
}
