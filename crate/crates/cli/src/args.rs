//! Command-line grammar. Every shared option is optional here so a config
//! file can fill the gaps; [`crate::config::Settings`] resolves the result.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cars", version, about = "Context-attentive ranking and query suggestion over search tasks")]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct SharedArgs {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset directory (also where `synth` writes its log).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Pretrained word vectors, one `token v1 .. vN` line each.
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    /// Where the machine-readable report goes.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    #[arg(long = "word-dim", global = true)]
    pub word_dim: Option<usize>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    #[arg(long = "no-decoder-attn", global = true)]
    pub no_decoder_attn: bool,
    #[arg(long = "no-session-query", global = true)]
    pub no_session_query: bool,
    #[arg(long = "no-session-click", global = true)]
    pub no_session_click: bool,
    #[arg(long = "no-ranker", global = true)]
    pub no_ranker: bool,
    #[arg(long = "no-recommender", global = true)]
    pub no_recommender: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic impression log into the data directory.
    Synth {
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        users: Option<usize>,
    },
    /// Segment, label and split a log into a dataset.
    Prepare {
        /// Input log; defaults to `log.tsv` inside the data directory.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train on a prepared dataset and save a checkpoint.
    Train,
    /// Ranking metrics on the test split.
    #[command(name = "eval-rank")]
    EvalRank,
    /// Suggestion metrics on the test split.
    #[command(name = "eval-suggest")]
    EvalSuggest,
    /// Rank the candidates of every query in a task file.
    Rank {
        /// Task file in the dataset JSON-lines format.
        #[arg(long)]
        input: PathBuf,
    },
    /// Suggest a next query after every query in a task file.
    Suggest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of the joint loss on a tiny model.
    Gradcheck,
    /// Serve live sessions over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// BM25 pool re-ranked per query.
        #[arg(long, default_value_t = 1000)]
        pool: usize,
        #[arg(long = "idle-timeout-secs", default_value_t = 1800)]
        idle_timeout_secs: u64,
    },
}
