use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use cars_core::autodiff::Tape;
use cars_core::checkpoint;
use cars_core::data::log::{format_log, parse_log};
use cars_core::data::prepare::{read_dataset, read_tasks, write_dataset, Dataset, PrepareConfig};
use cars_core::data::segment::QueryVectors;
use cars_core::data::synth::{synthesize_corpus, SynthSpec, SynthStats};
use cars_core::diagnostics::{joint_gradcheck, TinySpec};
use cars_core::eval::{evaluate_ranking, evaluate_suggestion, score_task, Background};
use cars_core::model::{encode_task, CarsModel, EncodedTask, ModelConfig};
use cars_core::ranker::rank_order;
use cars_core::session::SessionState;
use cars_core::train::train;
use cars_core::vocab::{load_pretrained, tokenize, Vocabulary};
use cars_service::{AppState, Engine, ServiceConfig};
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command};
use crate::config::{ConfigFile, Settings};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const LOG_FILE: &str = "log.tsv";
pub const SYNTH_REPORT: &str = "synth.json";
/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-4;

pub fn execute(cli: Cli) -> Result<()> {
    let file = match &cli.shared.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let settings = Settings::resolve(&cli.shared, &file)?;
    if let Some(n) = settings.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A pool built earlier in the same process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth { tasks, users } => synth(&settings, tasks, users),
        Command::Prepare { log } => prepare(&settings, log),
        Command::Train => train_model(&settings),
        Command::EvalRank => eval_rank(&settings),
        Command::EvalSuggest => eval_suggest(&settings),
        Command::Rank { input } => rank(&settings, &input),
        Command::Suggest { input } => suggest(&settings, &input),
        Command::Gradcheck => gradcheck(&settings),
        Command::Serve {
            addr,
            pool,
            idle_timeout_secs,
        } => serve(&settings, &addr, pool, Duration::from_secs(idle_timeout_secs)),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `bytes` to `path`, or to standard output without one.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_bytes(p, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::io("<stdout>", e)),
    }
}

#[derive(Serialize, Deserialize)]
struct SynthReport {
    seed: u64,
    spec_hash: String,
    spec: SynthSpec,
    stats: SynthStats,
}

fn synth(s: &Settings, tasks: Option<usize>, users: Option<usize>) -> Result<()> {
    let dir = s.require_data()?;
    let base = SynthSpec::default();
    let spec = SynthSpec {
        tasks: tasks.unwrap_or(base.tasks),
        users: users.unwrap_or(base.users),
        ..base
    };
    let corpus = synthesize_corpus(&spec, s.seed)?;
    write_bytes(&dir.join(LOG_FILE), format_log(&corpus.records).as_bytes())?;
    let report = SynthReport {
        seed: s.seed,
        spec_hash: spec.hash(s.seed),
        spec,
        stats: corpus.stats,
    };
    let bytes = pretty(&report)?;
    write_bytes(&dir.join(SYNTH_REPORT), &bytes)?;
    if let Some(p) = &s.report {
        write_bytes(p, &bytes)?;
    }
    println!(
        "wrote {} impressions for {} tasks to {}",
        corpus.records.len(),
        corpus.tasks.len(),
        dir.join(LOG_FILE).display()
    );
    Ok(())
}

fn prepare(s: &Settings, log: Option<PathBuf>) -> Result<()> {
    let dir = s.require_data()?;
    let log_path = log.unwrap_or_else(|| dir.join(LOG_FILE));
    let parsed = parse_log(&log_path)?;
    let cfg = PrepareConfig {
        seed: s.seed,
        ..PrepareConfig::default()
    };
    let data = match &s.embeddings {
        Some(path) => {
            let vocab = Vocabulary::build(
                parsed.users.values().flatten().map(|q| tokenize(&q.text)),
                usize::MAX,
            )?;
            let table = load_pretrained(path, &vocab, s.word_dim, s.seed)?;
            cars_core::data::prepare::prepare(&parsed, QueryVectors::Embeddings(&table, &vocab), &cfg)?
        }
        None => cars_core::data::prepare::prepare(&parsed, QueryVectors::BagOfWords, &cfg)?,
    };
    let spec_hash = std::fs::read(dir.join(SYNTH_REPORT))
        .ok()
        .and_then(|b| serde_json::from_slice::<SynthReport>(&b).ok())
        .map(|r| r.spec_hash);
    let manifest = write_dataset(dir, &data, &cfg, spec_hash)?;
    if let Some(p) = &s.report {
        write_bytes(p, &pretty(&manifest.report)?)?;
    }
    let r = &manifest.report;
    println!(
        "{} tasks train / {} val / {} test, vocabulary {}",
        r.train.tasks, r.val.tasks, r.test.tasks, r.vocab_size
    );
    Ok(())
}

fn build_model(s: &Settings, vocab: &Vocabulary) -> Result<CarsModel> {
    let config = ModelConfig {
        vocab_size: vocab.len(),
        word_dim: s.word_dim,
        hidden: s.hidden,
        ablation: s.ablation,
        ..ModelConfig::default()
    };
    Ok(match &s.embeddings {
        Some(path) => CarsModel::new(config, &load_pretrained(path, vocab, s.word_dim, s.seed)?, s.seed)?,
        None => CarsModel::random(config, s.seed)?,
    })
}

fn train_model(s: &Settings) -> Result<()> {
    let data = read_dataset(s.require_data()?)?;
    let ckpt = s.require_checkpoint()?;
    let model = build_model(s, &data.vocab)?;
    let out = train(
        model,
        &data.vocab,
        &data.splits.train,
        &data.splits.val,
        s.train.clone(),
        |_| {},
    )?;
    let t = &out.trainer;
    checkpoint::save(ckpt, &t.model, &data.vocab, Some(&t.config), Some(&t.optimizer))?;
    if let Some(p) = &s.report {
        write_bytes(p, &pretty(&out.history)?)?;
    }
    println!(
        "best epoch {} (validation {:.4}); checkpoint {}",
        out.history.best_epoch,
        out.history.best_metric,
        ckpt.display()
    );
    Ok(())
}

fn trained_model(s: &Settings) -> Result<(Dataset, CarsModel)> {
    let data = read_dataset(s.require_data()?)?;
    let ckpt = checkpoint::load_for_vocab(s.require_checkpoint()?, &data.vocab)?;
    Ok((data, ckpt.model))
}

/// JSON report at `--report` plus the per-length CSV beside it; without a
/// report path the summary goes to standard output.
fn emit_eval<T: Serialize, S: Serialize>(s: &Settings, report: &T, summary: &S, csv: String) -> Result<()> {
    match &s.report {
        Some(p) => {
            write_bytes(p, &pretty(report)?)?;
            write_bytes(&p.with_extension("csv"), csv.as_bytes())?;
        }
        None => emit(None, &pretty(summary)?)?,
    }
    Ok(())
}

fn eval_rank(s: &Settings) -> Result<()> {
    let (data, model) = trained_model(s)?;
    let test: Vec<EncodedTask> = data.splits.test.iter().map(|t| encode_task(t, &data.vocab)).collect();
    let report = evaluate_ranking(&model, &test)?;
    emit_eval(s, &report, &report.overall, report.to_csv())
}

fn eval_suggest(s: &Settings) -> Result<()> {
    let (data, model) = trained_model(s)?;
    let background = Background::build(&data.splits.train);
    let report = evaluate_suggestion(&model, &data.vocab, &data.splits.test, &background)?;
    emit_eval(s, &report, &report.overall, report.to_csv())
}

#[derive(Serialize)]
struct RankedCandidate<'a> {
    doc_id: &'a str,
    score: f64,
    clicked: bool,
}

#[derive(Serialize)]
struct QueryRanking<'a> {
    task: &'a str,
    position: usize,
    query: &'a str,
    ranking: Vec<RankedCandidate<'a>>,
}

fn json_lines<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn rank(s: &Settings, input: &Path) -> Result<()> {
    let ckpt = checkpoint::load(s.require_checkpoint()?)?;
    let tasks = read_tasks(input)?;
    let mut lines = Vec::new();
    for task in &tasks {
        let encoded = encode_task(task, &ckpt.vocab);
        let scores = score_task(&ckpt.model, &encoded)?;
        for (i, (q, probs)) in task.queries.iter().zip(&scores).enumerate() {
            if q.candidates.is_empty() {
                continue;
            }
            let ids: Vec<&str> = q.candidates.iter().map(|c| c.doc_id.as_str()).collect();
            let ranking = rank_order(probs, &ids)?
                .into_iter()
                .map(|j| RankedCandidate {
                    doc_id: ids[j],
                    score: probs[j],
                    clicked: q.candidates[j].clicked(),
                })
                .collect();
            lines.push(QueryRanking {
                task: &task.id,
                position: i,
                query: &q.text,
                ranking,
            });
        }
    }
    emit(s.report.as_deref(), &json_lines(&lines)?)
}

#[derive(Serialize)]
struct QuerySuggestion<'a> {
    task: &'a str,
    position: usize,
    query: &'a str,
    suggestion: String,
    score: f64,
    next: Option<&'a str>,
}

fn suggest(s: &Settings, input: &Path) -> Result<()> {
    let ckpt = checkpoint::load(s.require_checkpoint()?)?;
    let (model, vocab) = (&ckpt.model, &ckpt.vocab);
    let tasks = read_tasks(input)?;
    let mut lines = Vec::new();
    for task in &tasks {
        let encoded = encode_task(task, vocab);
        let mut tape = Tape::new(&model.params);
        let mut state = SessionState::new();
        for (i, (q, eq)) in task.queries.iter().zip(&encoded.queries).enumerate() {
            let query = model.encode_query(&mut tape, &eq.tokens, 0.0)?;
            let (decoded, _) = model.suggest(&mut tape, &state, &query)?;
            lines.push(QuerySuggestion {
                task: &task.id,
                position: i,
                query: &q.text,
                suggestion: vocab.decode(&decoded.tokens).join(" "),
                score: decoded.score(),
                next: task.queries.get(i + 1).map(|n| n.text.as_str()),
            });
            let clicked = eq
                .clicks
                .iter()
                .map(|&c| model.encode_doc(&mut tape, &eq.docs[c].tokens, 0.0))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            model.observe(&mut tape, &mut state, &query, &clicked)?;
        }
    }
    emit(s.report.as_deref(), &json_lines(&lines)?)
}

#[derive(Serialize)]
struct GradcheckReport {
    seed: u64,
    step: f64,
    max_relative_error: f64,
    worst: Option<(String, usize)>,
    entries: usize,
    kink_refinements: usize,
    per_parameter: Vec<(String, f64)>,
}

fn gradcheck(s: &Settings) -> Result<()> {
    let r = joint_gradcheck(TinySpec::default(), s.seed, GRADCHECK_STEP)?;
    let worst = r
        .worst
        .as_ref()
        .map_or_else(String::new, |(name, k)| format!(" at {name}[{k}]"));
    println!(
        "max relative error {:.3e}{worst} over {} entries of {} parameters",
        r.max_rel_error,
        r.entries_checked,
        r.per_param.len()
    );
    if let Some(p) = &s.report {
        let report = GradcheckReport {
            seed: s.seed,
            step: GRADCHECK_STEP,
            max_relative_error: r.max_rel_error,
            worst: r.worst.clone(),
            entries: r.entries_checked,
            kink_refinements: r.kink_refinements,
            per_parameter: r.per_param.clone(),
        };
        write_bytes(p, &pretty(&report)?)?;
    }
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            r.max_rel_error
        )))
    }
}

fn load_engine(data_dir: &Path, ckpt_path: &Path, pool: usize) -> Result<Engine> {
    let data = read_dataset(data_dir)?;
    let ckpt = checkpoint::load_for_vocab(ckpt_path, &data.vocab)?;
    Ok(Engine::new(ckpt.model, ckpt.vocab, &data.documents, pool))
}

fn serve(s: &Settings, addr: &str, pool: usize, idle_timeout: Duration) -> Result<()> {
    let data_dir = s.require_data()?.to_path_buf();
    let ckpt_path = s.require_checkpoint()?.to_path_buf();
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io("<tokio runtime>", e))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::io(addr, e))?;
        let state = AppState::loading(ServiceConfig { idle_timeout });
        let server = tokio::spawn(cars_service::serve(listener, state.clone()));
        eprintln!("listening on {addr}; loading model");
        let engine = tokio::task::spawn_blocking(move || load_engine(&data_dir, &ckpt_path, pool))
            .await
            .map_err(|e| CliError::Failed(e.to_string()))??;
        eprintln!("ready: {} documents", engine.document_count());
        state.set_engine(engine);
        server
            .await
            .map_err(|e| CliError::Failed(e.to_string()))?
            .map_err(|e| CliError::io(addr, e))
    })
}
