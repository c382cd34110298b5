//! Shared fixture for the benchmarks: a prepared synthetic dataset and an
//! untrained model sized like a small production configuration.

use cars_core::data::prepare::{prepare, PrepareConfig, PreparedData};
use cars_core::data::segment::QueryVectors;
use cars_core::data::synth::{synthesize_corpus, SynthSpec};
use cars_core::model::{encode_task, CarsModel, EncodedTask, ModelConfig};

pub struct Fixture {
    pub data: PreparedData,
    pub model: CarsModel,
    pub train: Vec<EncodedTask>,
}

pub fn fixture(tasks: usize, dim: usize) -> Fixture {
    let spec = SynthSpec {
        tasks,
        ..SynthSpec::default()
    };
    let corpus = synthesize_corpus(&spec, 1).expect("synthetic corpus");
    let text = cars_core::data::log::format_log(&corpus.records);
    let log = cars_core::data::log::parse_log_str(&text, "bench").expect("parse");
    let data = prepare(&log, QueryVectors::BagOfWords, &PrepareConfig::default()).expect("prepare");
    let config = ModelConfig {
        vocab_size: data.vocab.len(),
        word_dim: dim,
        hidden: dim,
        ..ModelConfig::default()
    };
    let model = CarsModel::random(config, 1).expect("model");
    let train = data.splits.train.iter().map(|t| encode_task(t, &data.vocab)).collect();
    Fixture { data, model, train }
}
