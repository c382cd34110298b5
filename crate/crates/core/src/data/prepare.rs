//! End-to-end preparation: parsed log to segmented, labeled and split tasks,
//! plus the on-disk dataset layout and manifest.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bm25::{Bm25Params, CorpusIndex};
use super::candidates::{generate_candidates, CandidateConfig};
use super::log::{LoggedQuery, ParsedLog};
use super::segment::{segment_boundaries, QueryVectors, DEFAULT_THRESHOLD};
use super::split::{split_dataset, DatasetSplits, SplitRatios};
use super::{Document, SearchTask, TaskQuery};
use crate::error::{Error, Result};
use crate::vocab::{tokenize, Vocabulary};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub pool: usize,
    pub window: usize,
    pub train_candidates: usize,
    pub test_candidates: usize,
    pub ratios: SplitRatios,
    pub threshold: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            pool: 1000,
            window: 50,
            train_candidates: CandidateConfig::TRAIN_CANDIDATES,
            test_candidates: CandidateConfig::TEST_CANDIDATES,
            ratios: SplitRatios::default(),
            threshold: DEFAULT_THRESHOLD,
            vocab_size: 5000,
            seed: 13,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub tasks: usize,
    pub queries: usize,
    pub candidates: usize,
}

impl SplitCounts {
    fn of(tasks: &[SearchTask]) -> Self {
        Self {
            tasks: tasks.len(),
            queries: tasks.iter().map(|t| t.queries.len()).sum(),
            candidates: tasks.iter().flat_map(|t| &t.queries).map(|q| q.candidates.len()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub users: usize,
    pub logged_queries: usize,
    pub skipped_lines: usize,
    pub documents: usize,
    pub segments: usize,
    pub queries_without_pool_click: usize,
    pub short_tasks_dropped: usize,
    pub train: SplitCounts,
    pub val: SplitCounts,
    pub test: SplitCounts,
    pub vocab_size: usize,
    pub vocab_hash: String,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub splits: DatasetSplits,
    /// Every logged document in doc-id order.
    pub documents: Vec<Document>,
    pub vocab: Vocabulary,
    pub report: PrepareReport,
}

fn click_map(q: &LoggedQuery) -> HashMap<String, u64> {
    q.impressions
        .iter()
        .filter(|i| i.click_time > 0)
        .map(|i| (i.doc_id.clone(), i.click_time))
        .collect()
}

fn has_pool_click(q: &LoggedQuery, index: &CorpusIndex, pool: usize) -> bool {
    let clicks = click_map(q);
    !clicks.is_empty()
        && index
            .rank(&tokenize(&q.text), pool)
            .iter()
            .any(|(idx, _)| clicks.contains_key(index.doc_id(*idx)))
}

/// Labels every query of `tasks` with candidates. `sources[id]` holds the
/// task's ordinal and logged queries; the ordinal selects the RNG stream.
fn label_split(
    tasks: Vec<SearchTask>,
    sources: &Sources<'_>,
    index: &CorpusIndex,
    cfg: CandidateConfig,
    seed: u64,
) -> Result<Vec<SearchTask>> {
    tasks
        .into_par_iter()
        .map(|mut task| {
            let (ordinal, logged) = &sources[&task.id];
            for (k, (q, src)) in task.queries.iter_mut().zip(logged).enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ordinal * 4096 + k as u64);
                q.candidates = generate_candidates(&src.text, &click_map(src), index, cfg, &mut rng)
                    .ok_or_else(|| Error::Data(format!("query {:?} has no click in the pool", src.text)))?;
            }
            Ok(task)
        })
        .collect()
}

/// Segments, filters and labels every task with `n_candidates` candidates,
/// without splitting. Tasks come back in chronological order.
pub fn label_all(log: &ParsedLog, vectors: QueryVectors<'_>, cfg: &PrepareConfig, n_candidates: usize) -> Result<Vec<SearchTask>> {
    let index = build_index(log);
    let (mut tasks, sources, _) = segment_log(log, &index, vectors, cfg);
    tasks.sort_by(|a, b| a.start_time().cmp(&b.start_time()).then_with(|| a.id.cmp(&b.id)));
    let c = CandidateConfig {
        pool: cfg.pool,
        window: cfg.window,
        n_candidates,
    };
    label_split(tasks, &sources, &index, c, cfg.seed)
}

fn build_index(log: &ParsedLog) -> CorpusIndex {
    CorpusIndex::build(
        log.users
            .values()
            .flatten()
            .flat_map(|q| q.impressions.iter().map(|i| (i.doc_id.clone(), i.title.clone()))),
        Bm25Params::default(),
    )
}

#[derive(Clone, Copy, Debug, Default)]
struct SegmentCounts {
    segments: usize,
    without_click: usize,
    short: usize,
}

type Sources<'a> = HashMap<String, (u64, Vec<&'a LoggedQuery>)>;

fn segment_log<'a>(
    log: &'a ParsedLog,
    index: &CorpusIndex,
    vectors: QueryVectors<'_>,
    cfg: &PrepareConfig,
) -> (Vec<SearchTask>, Sources<'a>, SegmentCounts) {
    let mut counts = SegmentCounts::default();
    let mut sources: Sources<'a> = HashMap::new();
    let mut tasks = Vec::new();
    for (user, queries) in &log.users {
        let texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
        let mut n = 0;
        for range in segment_boundaries(&texts, vectors, cfg.threshold) {
            counts.segments += 1;
            let total = range.len();
            let kept: Vec<&LoggedQuery> = queries[range]
                .par_iter()
                .filter(|q| has_pool_click(q, index, cfg.pool))
                .collect();
            counts.without_click += total - kept.len();
            if kept.len() < 2 {
                counts.short += 1;
                continue;
            }
            let id = format!("{user}-{n:04}");
            n += 1;
            tasks.push(SearchTask {
                id: id.clone(),
                user: user.clone(),
                queries: kept
                    .iter()
                    .map(|q| TaskQuery {
                        text: q.text.clone(),
                        time: q.time,
                        candidates: Vec::new(),
                    })
                    .collect(),
            });
            sources.insert(id, (sources.len() as u64, kept));
        }
    }
    (tasks, sources, counts)
}

/// Builds the BM25 index over every logged impression, segments each user's
/// stream, drops queries without an in-pool click and tasks left with fewer
/// than two queries, splits chronologically, samples candidates per split and
/// builds the vocabulary from the training split.
pub fn prepare(log: &ParsedLog, vectors: QueryVectors<'_>, cfg: &PrepareConfig) -> Result<PreparedData> {
    let index = build_index(log);
    let (tasks, sources, counts) = segment_log(log, &index, vectors, cfg);
    let split = split_dataset(tasks, cfg.ratios)?;
    let with = |n: usize| CandidateConfig {
        pool: cfg.pool,
        window: cfg.window,
        n_candidates: n,
    };
    let splits = DatasetSplits {
        train: label_split(split.train, &sources, &index, with(cfg.train_candidates), cfg.seed)?,
        val: label_split(split.val, &sources, &index, with(cfg.train_candidates), cfg.seed)?,
        test: label_split(split.test, &sources, &index, with(cfg.test_candidates), cfg.seed)?,
    };
    let vocab = Vocabulary::build(
        splits.train.iter().flat_map(|t| &t.queries).flat_map(|q| {
            std::iter::once(tokenize(&q.text)).chain(q.candidates.iter().map(|c| tokenize(&c.title)))
        }),
        cfg.vocab_size,
    )?;
    let report = PrepareReport {
        users: log.users.len(),
        logged_queries: log.query_count(),
        skipped_lines: log.skipped_lines,
        documents: index.len(),
        segments: counts.segments,
        queries_without_pool_click: counts.without_click,
        short_tasks_dropped: counts.short,
        train: SplitCounts::of(&splits.train),
        val: SplitCounts::of(&splits.val),
        test: SplitCounts::of(&splits.test),
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
    };
    let documents = (0..index.len())
        .map(|i| Document {
            doc_id: index.doc_id(i).to_string(),
            title: index.title(i).to_string(),
        })
        .collect();
    Ok(PreparedData {
        splits,
        documents,
        vocab,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub train: String,
    pub val: String,
    pub test: String,
    pub vocab: String,
    pub documents: String,
}

impl Default for DatasetFiles {
    fn default() -> Self {
        Self {
            train: "train.jsonl".into(),
            val: "val.jsonl".into(),
            test: "test.jsonl".into(),
            vocab: "vocab.json".into(),
            documents: "documents.jsonl".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: DatasetFiles,
    pub config: PrepareConfig,
    pub report: PrepareReport,
    pub generator_spec_hash: Option<String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for t in items {
        serde_json::to_writer(&mut out, t)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_tasks(path: &Path, tasks: &[SearchTask]) -> Result<()> {
    write_lines(path, tasks)
}

/// Reads JSON-lines tasks; blank lines are ignored.
pub fn read_tasks(path: &Path) -> Result<Vec<SearchTask>> {
    read_lines(path)
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    read_lines(path)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the split files, vocabulary and manifest into `dir`.
pub fn write_dataset(dir: &Path, data: &PreparedData, cfg: &PrepareConfig, spec_hash: Option<String>) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = DatasetFiles::default();
    write_tasks(&dir.join(&files.train), &data.splits.train)?;
    write_tasks(&dir.join(&files.val), &data.splits.val)?;
    write_tasks(&dir.join(&files.test), &data.splits.test)?;
    write_file(&dir.join(&files.vocab), &serde_json::to_vec(&data.vocab)?)?;
    write_lines(&dir.join(&files.documents), &data.documents)?;
    let manifest = DatasetManifest {
        files,
        config: cfg.clone(),
        report: data.report.clone(),
        generator_spec_hash: spec_hash,
    };
    write_file(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A prepared dataset loaded back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub splits: DatasetSplits,
    pub documents: Vec<Document>,
    pub vocab: Vocabulary,
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let f = &manifest.files;
    let splits = DatasetSplits {
        train: read_tasks(&dir.join(&f.train))?,
        val: read_tasks(&dir.join(&f.val))?,
        test: read_tasks(&dir.join(&f.test))?,
    };
    let vocab = read_vocab(&dir.join(&f.vocab))?;
    let documents = read_documents(&dir.join(&f.documents))?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        manifest,
        splits,
        documents,
        vocab,
    })
}
