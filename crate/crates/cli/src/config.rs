//! Flat `key = value` config files and flag resolution.
//! Precedence is flag, then file, then built-in default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cars_core::model::{Ablation, ModelConfig};
use cars_core::train::TrainConfig;

use crate::args::SharedArgs;
use crate::CliError;

pub const DEFAULT_SEED: u64 = 13;

const KEYS: [&str; 18] = [
    "data",
    "checkpoint",
    "embeddings",
    "report",
    "seed",
    "threads",
    "lr",
    "dropout",
    "hidden",
    "word_dim",
    "batch",
    "epochs",
    "patience",
    "no_decoder_attn",
    "no_session_query",
    "no_session_click",
    "no_ranker",
    "no_recommender",
];

/// Parsed config file. Keys may use `-` or `_`; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{source}:{}: expected `key = value`", n + 1)))?;
            let key = key.trim().replace('-', "_");
            if !KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("{source}:{}: unknown key {key:?}", n + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("config key {key:?}: cannot parse {v:?}")))
            })
            .transpose()
    }
}

/// Every option resolved to its effective value.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub hidden: usize,
    pub word_dim: usize,
    pub ablation: Ablation,
    pub train: TrainConfig,
}

impl Settings {
    pub fn resolve(args: &SharedArgs, file: &ConfigFile) -> Result<Self, CliError> {
        fn pick<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str) -> Result<Option<T>, CliError> {
            Ok(match flag {
                Some(v) => Some(v),
                None => file.get(key)?,
            })
        }
        let switch = |flag: bool, key: &str| -> Result<bool, CliError> {
            Ok(flag || file.get::<bool>(key)?.unwrap_or(false))
        };
        let model = ModelConfig::default();
        let base = TrainConfig::default();
        let seed = pick(args.seed, file, "seed")?.unwrap_or(DEFAULT_SEED);
        let mut train = TrainConfig {
            lr: pick(args.lr, file, "lr")?.unwrap_or(base.lr),
            batch_size: pick(args.batch, file, "batch")?.unwrap_or(base.batch_size),
            epochs: pick(args.epochs, file, "epochs")?.unwrap_or(base.epochs),
            patience: pick(args.patience, file, "patience")?.unwrap_or(base.patience),
            seed,
            ..base
        };
        train.loss.dropout = pick(args.dropout, file, "dropout")?.unwrap_or(train.loss.dropout);
        Ok(Self {
            data: pick(args.data.clone(), file, "data")?,
            checkpoint: pick(args.checkpoint.clone(), file, "checkpoint")?,
            embeddings: pick(args.embeddings.clone(), file, "embeddings")?,
            report: pick(args.report.clone(), file, "report")?,
            seed,
            threads: pick(args.threads, file, "threads")?,
            hidden: pick(args.hidden, file, "hidden")?.unwrap_or(model.hidden),
            word_dim: pick(args.word_dim, file, "word_dim")?.unwrap_or(model.word_dim),
            ablation: Ablation {
                decoder_attention: !switch(args.no_decoder_attn, "no_decoder_attn")?,
                session_query: !switch(args.no_session_query, "no_session_query")?,
                session_click: !switch(args.no_session_click, "no_session_click")?,
                ranker: !switch(args.no_ranker, "no_ranker")?,
                recommender: !switch(args.no_recommender, "no_recommender")?,
            },
            train,
        })
    }

    pub fn require_data(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| CliError::Usage("--data is required".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&Path, CliError> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))
    }
}
