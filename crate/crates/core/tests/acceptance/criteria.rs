use std::collections::HashMap;
use std::time::{Duration, Instant};

use cars_core::autodiff::{Tape, Var};
use cars_core::checkpoint;
use cars_core::data::bm25::{Bm25Params, CorpusIndex, B, K1};
use cars_core::data::log::{format_log, parse_log_str};
use cars_core::data::prepare::{label_all, prepare, read_dataset, write_dataset, PrepareConfig};
use cars_core::data::segment::{segment_boundaries, QueryVectors, DEFAULT_THRESHOLD};
use cars_core::data::split::SplitRatios;
use cars_core::data::synth::{synthesize_corpus, SynthSpec};
use cars_core::data::SearchTask;
use cars_core::diagnostics::{joint_gradcheck, tiny_problem, TinySpec};
use cars_core::eval::{evaluate_ranking, evaluate_suggestion, Background};
use cars_core::metrics;
use cars_core::model::{encode_task, Ablation, CarsModel, EncodedTask, LossConfig, ModelConfig};
use cars_core::ranker::NormMode;
use cars_core::session::{Head, SessionState};
use cars_core::train::{train, TrainConfig, Trainer};
use cars_core::vocab::{tokenize, Vocabulary, RESERVED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracles;
use crate::Outcome;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let report = joint_gradcheck(TinySpec::default(), 7, 1e-4).map_err(err)?;
    let elapsed = start.elapsed();
    let (model, _) = tiny_problem(TinySpec::default(), 7).map_err(err)?;
    ensure!(
        report.entries_checked == model.params.num_scalars(),
        "checked {} of {} entries",
        report.entries_checked,
        model.params.num_scalars()
    );
    ensure!(report.per_param.len() == model.params.len(), "not every parameter was checked");
    ensure!(
        report.max_rel_error < 1e-4,
        "max relative error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "{} groups, {} entries, max rel error {:.2e}, {} kink refinements",
        report.per_param.len(),
        report.entries_checked,
        report.max_rel_error,
        report.kink_refinements
    ))
}

pub fn decomposition_isolation() -> Outcome {
    let mut lines = Vec::new();
    for seed in [3, 11, 29] {
        let (model, tasks) = tiny_problem(TinySpec::default(), seed).map_err(err)?;
        let refs: Vec<&EncodedTask> = tasks.iter().collect();
        let mut tape = Tape::new(&model.params);
        let loss = model
            .batch_loss(&mut tape, &refs, &LossConfig::default(), NormMode::Batch)
            .map_err(err)?;
        let from_ranker = tape.backward(loss.ranker).map_err(err)?;
        let from_recom = tape.backward(loss.recom).map_err(err)?;
        let leak_r = from_ranker.max_abs(model.decoder.private);
        let leak_c = from_recom.max_abs(model.ranker.private);
        ensure!(leak_r == 0.0, "seed {seed}: ranker loss reaches the suggestion matrix ({leak_r:e})");
        ensure!(leak_c == 0.0, "seed {seed}: suggestion loss reaches the ranking matrix ({leak_c:e})");
        let (sr, sc) = (from_ranker.max_abs(model.shared), from_recom.max_abs(model.shared));
        ensure!(sr > 0.0 && sc > 0.0, "seed {seed}: shared gradient {sr:e} / {sc:e}");
        ensure!(
            from_ranker.max_abs(model.ranker.private) > 0.0 && from_recom.max_abs(model.decoder.private) > 0.0,
            "seed {seed}: a private matrix gets no gradient from its own loss"
        );
        lines.push(format!("|dW_shared| {sr:.1e}/{sc:.1e}"));
    }
    Ok(format!("cross gradients exactly 0; {}", lines.join(", ")))
}

/// Share of next-query pairs reproduced exactly by greedy decoding.
fn exact_next_query_rate(model: &CarsModel, tasks: &[EncodedTask]) -> Result<f64, String> {
    let (mut hit, mut n) = (0, 0);
    for t in tasks {
        let mut tape = Tape::new(&model.params);
        let mut state = SessionState::new();
        for (i, q) in t.queries.iter().enumerate() {
            let qe = model.encode_query(&mut tape, &q.tokens, 0.0).map_err(err)?;
            if let Some(next) = t.queries.get(i + 1) {
                let (d, _) = model.suggest(&mut tape, &state, &qe).map_err(err)?;
                n += 1;
                hit += usize::from(d.tokens == next.tokens);
            }
            let clicked = q
                .clicks
                .iter()
                .map(|&c| model.encode_doc(&mut tape, &q.docs[c].tokens, 0.0))
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            model.observe(&mut tape, &mut state, &qe, &clicked).map_err(err)?;
        }
    }
    Ok(hit as f64 / n.max(1) as f64)
}

fn task_vocab(tasks: &[SearchTask], limit: usize) -> Result<Vocabulary, String> {
    Vocabulary::build(
        tasks.iter().flat_map(|t| &t.queries).flat_map(|q| {
            std::iter::once(tokenize(&q.text)).chain(q.candidates.iter().map(|c| tokenize(&c.title)))
        }),
        limit,
    )
    .map_err(err)
}

pub fn overfit() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec {
        tasks: 32,
        users: 8,
        vocab_size: 96,
        topics: 8,
        themes_per_topic: 6,
        facets_per_topic: 3,
        aspects: 2,
        position_bias: 0.0,
        noise_click: 0.0,
        ..SynthSpec::default()
    };
    let corpus = synthesize_corpus(&spec, 1).map_err(err)?;
    let log = parse_log_str(&format_log(&corpus.records), "overfit").map_err(err)?;
    let tasks = label_all(&log, QueryVectors::BagOfWords, &PrepareConfig::default(), 5).map_err(err)?;
    let vocab = task_vocab(&tasks, 100)?;
    ensure!(vocab.len() <= 100, "vocabulary has {} entries", vocab.len());
    let encoded: Vec<EncodedTask> = tasks.iter().map(|t| encode_task(t, &vocab)).collect();
    ensure!(encoded.len() == 32, "{} tasks survived preparation", encoded.len());
    ensure!(
        encoded.iter().flat_map(|t| &t.queries).all(|q| q.docs.len() == 5),
        "every query needs 5 candidates"
    );
    let config = ModelConfig {
        vocab_size: vocab.len(),
        word_dim: 32,
        hidden: 32,
        ..ModelConfig::default()
    };
    let model = CarsModel::random(config, 7).map_err(err)?;
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            lr: 1e-2,
            ..TrainConfig::default()
        },
    )
    .map_err(err)?;
    let batch: Vec<&EncodedTask> = encoded.iter().collect();
    for _ in 0..300 {
        trainer.step(&batch).map_err(err)?;
    }
    let map = evaluate_ranking(&trainer.model, &encoded).map_err(err)?.overall.map;
    let exact = exact_next_query_rate(&trainer.model, &encoded)?;
    let elapsed = start.elapsed();
    let detail = format!("300 steps, train MAP {map:.4}, exact next query {:.1}%", 100.0 * exact);
    ensure!(map >= 0.95, "{detail}");
    ensure!(exact >= 0.8, "{detail}");
    ensure!(elapsed < Duration::from_secs(600), "{detail}, took {elapsed:?}");
    Ok(detail)
}

enum Direction {
    Click,
    Query,
}

/// Test-set metric of the full model and of the ablation for one seed.
fn direction_pair(dir: &Direction, seed: u64) -> Result<(f64, f64), String> {
    let shared = SynthSpec {
        users: 40,
        vocab_size: 400,
        topics: 20,
        themes_per_topic: 4,
        facets_per_topic: 4,
        aspects: 2,
        position_bias: 0.0,
        noise_click: 0.0,
        ..SynthSpec::default()
    };
    let (spec, dim, epochs) = match dir {
        Direction::Click => (
            SynthSpec {
                tasks: 600,
                p_ctx: 1.0,
                ..shared
            },
            24,
            50,
        ),
        Direction::Query => (
            SynthSpec {
                tasks: 1000,
                qualifiers: 6,
                qualifier_len: 1,
                mean_task_len: 3.0,
                max_task_len: 3,
                p_extend: 1.0,
                ..shared
            },
            24,
            30,
        ),
    };
    let corpus = synthesize_corpus(&spec, 100 + seed).map_err(err)?;
    let log = parse_log_str(&format_log(&corpus.records), "direction").map_err(err)?;
    let cfg = PrepareConfig {
        test_candidates: 10,
        seed: 100 + seed,
        ..PrepareConfig::default()
    };
    let data = prepare(&log, QueryVectors::BagOfWords, &cfg).map_err(err)?;
    let test: Vec<EncodedTask> = data.splits.test.iter().map(|t| encode_task(t, &data.vocab)).collect();
    let background = Background::build(&data.splits.train);
    let mut out = [0.0; 2];
    for (slot, full) in [true, false].into_iter().enumerate() {
        let mut ablation = Ablation::default();
        if !full {
            match dir {
                Direction::Click => ablation.session_click = false,
                Direction::Query => ablation.session_query = false,
            }
        }
        let config = ModelConfig {
            vocab_size: data.vocab.len(),
            word_dim: dim,
            hidden: dim,
            ablation,
            ..ModelConfig::default()
        };
        let model = CarsModel::random(config, seed).map_err(err)?;
        let tc = TrainConfig {
            lr: 0.005,
            epochs,
            patience: epochs,
            seed,
            ..TrainConfig::default()
        };
        let trained = train(model, &data.vocab, &data.splits.train, &data.splits.val, tc, |_| {}).map_err(err)?;
        let m = &trained.trainer.model;
        out[slot] = match dir {
            Direction::Click => evaluate_ranking(m, &test).map_err(err)?.overall.map,
            Direction::Query => {
                evaluate_suggestion(m, &data.vocab, &data.splits.test, &background)
                    .map_err(err)?
                    .overall
                    .bleu[0]
            }
        };
    }
    Ok((out[0], out[1]))
}

fn direction_check(dir: Direction, margin: f64, unit: &str) -> Outcome {
    let mut deltas = Vec::new();
    for seed in 0..5 {
        let (full, ablated) = direction_pair(&dir, seed)?;
        deltas.push(full - ablated);
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let shown: Vec<String> = deltas.iter().map(|d| format!("{d:+.3}")).collect();
    let detail = format!("mean {unit} gain {mean:.4} over seeds [{}], need >= {margin}", shown.join(", "));
    ensure!(mean >= margin, "{detail}");
    Ok(detail)
}

pub fn click_context_direction() -> Outcome {
    direction_check(Direction::Click, 0.05, "test MAP")
}

pub fn query_context_direction() -> Outcome {
    direction_check(Direction::Query, 5.0, "BLEU-1")
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn random_words(rng: &mut ChaCha8Rng, alphabet: usize, max_len: usize, min_len: usize) -> Vec<String> {
    let n = rng.gen_range(min_len..=max_len);
    (0..n).map(|_| format!("w{}", rng.gen_range(0..alphabet))).collect()
}

pub fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut compared = 0usize;
    for case in 0..1000 {
        let lists: Vec<Vec<bool>> = (0..rng.gen_range(1..=6))
            .map(|_| {
                let n = rng.gen_range(1..=30);
                let p = rng.gen_range(0.05..0.6);
                (0..n).map(|_| rng.gen_bool(p)).collect()
            })
            .collect();
        let k = rng.gen_range(1..=12);
        for l in &lists {
            let ap = metrics::average_precision(l).ok();
            let ap_ref = oracles::average_precision(l);
            ensure!(
                ap.is_some() == ap_ref.is_some() && ap.zip(ap_ref).map_or(true, |(a, b)| close(a, b)),
                "case {case}: AP {ap:?} vs {ap_ref:?} on {l:?}"
            );
            let rr = metrics::reciprocal_rank(l);
            ensure!(close(rr, oracles::reciprocal_rank(l)), "case {case}: RR on {l:?}");
            let nd = metrics::ndcg_at_k(l, k).ok();
            let nd_ref = oracles::ndcg(l, k);
            ensure!(
                nd.is_some() == nd_ref.is_some() && nd.zip(nd_ref).map_or(true, |(a, b)| close(a, b)),
                "case {case}: NDCG@{k} {nd:?} vs {nd_ref:?} on {l:?}"
            );
            compared += 3;
        }
        if lists.iter().all(|l| l.contains(&true)) {
            let map = metrics::mean_average_precision(&lists).map_err(err)?;
            let expect = lists.iter().filter_map(|l| oracles::average_precision(l)).sum::<f64>() / lists.len() as f64;
            ensure!(close(map, expect), "case {case}: MAP {map} vs {expect}");
            compared += 1;
        }
        let mrr = metrics::mean_reciprocal_rank(&lists);
        let expect = lists.iter().map(|l| oracles::reciprocal_rank(l)).sum::<f64>() / lists.len() as f64;
        ensure!(close(mrr, expect), "case {case}: MRR {mrr} vs {expect}");

        let alphabet = rng.gen_range(2..=8);
        let pairs: Vec<(Vec<String>, Vec<String>)> = (0..rng.gen_range(1..=4))
            .map(|_| (random_words(&mut rng, alphabet, 8, 1), random_words(&mut rng, alphabet, 8, 1)))
            .collect();
        for (p, r) in &pairs {
            let f = metrics::f1_terms(p, r);
            ensure!(close(f, oracles::f1(p, r)), "case {case}: F1 {p:?} {r:?}");
        }
        for n in 1..=4 {
            let b = metrics::corpus_bleu(&pairs, n).map_err(err)?;
            let expect = oracles::corpus_bleu(&pairs, n);
            ensure!(close(b, expect), "case {case}: BLEU-{n} {b} vs {expect}");
            let (p, r) = &pairs[0];
            let single = metrics::bleu_n(p, r, n).map_err(err)?;
            ensure!(close(single, oracles::corpus_bleu(&pairs[..1], n)), "case {case}: sentence BLEU-{n}");
        }
        compared += 2 * pairs.len() + 9;
    }

    let mut scored = 0usize;
    for corpus_no in 0..100 {
        let docs: Vec<Vec<String>> = (0..rng.gen_range(2..=40))
            .map(|_| random_words(&mut rng, 30, 12, 1))
            .collect();
        let index = CorpusIndex::build(
            docs.iter().enumerate().map(|(i, d)| (format!("doc{i:03}"), d.join(" "))),
            Bm25Params::default(),
        );
        for _ in 0..5 {
            let query = random_words(&mut rng, 35, 4, 1);
            let mut expect: Vec<(String, f64)> = Vec::new();
            for (i, d) in docs.iter().enumerate() {
                let id = format!("doc{i:03}");
                let want = oracles::bm25(&query, d, &docs, K1, B);
                let got = index.score(&query, &id).ok_or("indexed doc missing")?;
                ensure!(close(got, want), "corpus {corpus_no}: {id} scored {got} vs {want}");
                if query.iter().any(|t| d.contains(t)) {
                    expect.push((id, want));
                }
                scored += 1;
            }
            let ranked = index.rank(&query, usize::MAX);
            ensure!(ranked.len() == expect.len(), "corpus {corpus_no}: ranked {} docs", ranked.len());
            for (idx, s) in &ranked {
                let want = expect.iter().find(|(id, _)| id == index.doc_id(*idx)).map(|e| e.1);
                ensure!(want.is_some_and(|w| close(*s, w)), "corpus {corpus_no}: rank score mismatch");
            }
            ensure!(ranked.windows(2).all(|w| w[0].1 >= w[1].1), "corpus {corpus_no}: ranking not sorted");
        }
    }
    Ok(format!("{compared} metric values over 1000 instances and {scored} BM25 scores over 100 corpora within 1e-9"))
}

#[derive(Default)]
struct NormTally {
    counts: HashMap<&'static str, usize>,
    worst: f64,
    negative: bool,
}

impl NormTally {
    fn check(&mut self, tape: &Tape<'_>, kind: &'static str, v: Var) {
        let data = tape.value(v).data();
        self.negative |= data.iter().any(|&x| x < 0.0);
        self.worst = self.worst.max((data.iter().sum::<f64>() - 1.0).abs());
        *self.counts.entry(kind).or_default() += 1;
    }

    fn check_opt(&mut self, tape: &Tape<'_>, kind: &'static str, v: Option<Var>) -> Result<(), String> {
        let v = v.ok_or_else(|| format!("{kind}: no weights on a nonempty history"))?;
        self.check(tape, kind, v);
        Ok(())
    }
}

const ATTENTION_KINDS: [&str; 10] = [
    "query words",
    "document words",
    "click chain inner",
    "rank/query chain",
    "rank/click chain",
    "suggest/query chain",
    "suggest/click chain",
    "decoder",
    "output softmax",
    "greedy steps",
];

pub fn attention_normalization() -> Outcome {
    let mut tally = NormTally::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let vocab = 30;
    let first = RESERVED.len();
    for model_seed in 0..10 {
        let config = ModelConfig {
            vocab_size: vocab,
            word_dim: 6,
            hidden: 6,
            max_decode_len: 4,
            click_gating: model_seed % 2 == 0,
            ..ModelConfig::default()
        };
        let model = CarsModel::random(config, model_seed).map_err(err)?;
        for _ in 0..100 {
            let words = |rng: &mut ChaCha8Rng| -> Vec<usize> {
                (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(first..vocab)).collect()
            };
            let mut tape = Tape::new(&model.params);
            let mut state = SessionState::new();
            for i in 0..rng.gen_range(1..=4) {
                let q = model.encode_query(&mut tape, &words(&mut rng), 0.0).map_err(err)?;
                tally.check(&tape, "query words", q.attn);
                let clicks = if i == 0 { 1 } else { rng.gen_range(0..=2) };
                let mut clicked = Vec::new();
                for _ in 0..clicks {
                    let d = model.encode_doc(&mut tape, &words(&mut rng), 0.0).map_err(err)?;
                    tally.check(&tape, "document words", d.attn);
                    clicked.push(d);
                }
                model.observe(&mut tape, &mut state, &q, &clicked).map_err(err)?;
            }
            let inner = model.session.click_inner_weights(&mut tape, &state).map_err(err)?;
            tally.check_opt(&tape, "click chain inner", inner)?;
            let q = model.encode_query(&mut tape, &words(&mut rng), 0.0).map_err(err)?;
            let rank = model.context(&mut tape, &state, &q, Head::Rank).map_err(err)?;
            tally.check_opt(&tape, "rank/query chain", rank.query_weights)?;
            tally.check_opt(&tape, "rank/click chain", rank.click_weights)?;
            let suggest = model.context(&mut tape, &state, &q, Head::Suggest).map_err(err)?;
            tally.check_opt(&tape, "suggest/query chain", suggest.query_weights)?;
            tally.check_opt(&tape, "suggest/click chain", suggest.click_weights)?;

            let dec = &model.decoder;
            let h0 = dec.init(&mut tape, suggest.joint).map_err(err)?;
            let (attended, weights) = dec.attend(&mut tape, h0.h, q.states).map_err(err)?;
            tally.check_opt(&tape, "decoder", weights)?;
            let term = dec.context_term(&mut tape, suggest.joint).map_err(err)?;
            let p = dec.output_distribution(&mut tape, term, h0.h, attended).map_err(err)?;
            tally.check(&tape, "output softmax", p);

            let (decoded, _) = model.suggest(&mut tape, &state, &q).map_err(err)?;
            for lp in &decoded.step_log_probs {
                ensure!(*lp <= 1e-12, "greedy step log-probability {lp} above 0");
            }
            *tally.counts.entry("greedy steps").or_default() += 1;
        }
    }
    ensure!(!tally.negative, "a distribution has a negative entry");
    ensure!(tally.worst <= 1e-6, "worst |sum - 1| = {:e}", tally.worst);
    for kind in ATTENTION_KINDS {
        let n = tally.counts.get(kind).copied().unwrap_or(0);
        ensure!(n >= 1000, "{kind}: only {n} distributions checked");
    }
    let total: usize = tally.counts.values().sum();
    Ok(format!("{total} distributions over 1000 forward passes, worst |sum - 1| {:.1e}", tally.worst))
}

/// Two users, eight titles, one malformed line.
const FIXTURE: &str = "\
U1\t100\tApple pie\tD1\tapple pie recipe\t105
U1\t100\tApple pie\tD2\tapple pie crust\t0
U1\t100\tApple pie\tD4\tapple pie history\t0
U1\t200\tapple pie recipe\tD3\tapple tart recipe\t0
U1\t200\tapple pie recipe\tD1\tapple pie recipe\t210
U1\t300\tapple pie crust\tD2\tapple pie crust\t0
U1\t400\tjaguar car\tD5\tjaguar car price\t410
U1\t400\tjaguar car\tD6\tjaguar car dealer\t0
U1\t500\tjaguar car review\tD7\tjaguar car review\t0
U1\t500\tjaguar car review\tD5\tjaguar car price\t520
U1\t600\tjaguar habitat\tD8\trainforest jaguar habitat\t610
U2\t100\tapple tart\tD3\tapple tart recipe\t120
U2\t100\tapple tart\tD1\tapple pie recipe\t0
U2\t200\tapple tart recipe\tD3\tapple tart recipe\t0
U2\t200\tapple tart recipe\tD1\tapple pie recipe\t230
U2\t300\tapple tart history\tD8\trainforest jaguar habitat\t305
U2\t300\tapple tart history\tD4\tapple pie history\t0
U2\t900\tcar dealer\tD6\tjaguar car dealer\t905
U2\t1000\tjaguar car dealer\tD6\tjaguar car dealer\t1010
U3\t1100\tbroken line\tD1
";

/// `(task id, [(query, [candidate doc ids], clicked doc)])` in task order.
type ExpectedTask = (&'static str, Vec<(&'static str, [&'static str; 3], &'static str)>);

fn expected_fixture_tasks() -> Vec<ExpectedTask> {
    vec![
        (
            "U1-0000",
            vec![
                ("apple pie", ["D1", "D2", "D4"], "D1"),
                ("apple pie recipe", ["D1", "D3", "D2"], "D1"),
            ],
        ),
        (
            "U2-0000",
            vec![
                ("apple tart", ["D3", "D1", "D2"], "D3"),
                ("apple tart recipe", ["D3", "D1", "D2"], "D1"),
            ],
        ),
        (
            "U1-0001",
            vec![
                ("jaguar car", ["D5", "D6", "D7"], "D5"),
                ("jaguar car review", ["D7", "D5", "D6"], "D5"),
            ],
        ),
        (
            "U2-0001",
            vec![
                ("car dealer", ["D6", "D5", "D7"], "D6"),
                ("jaguar car dealer", ["D6", "D5", "D7"], "D6"),
            ],
        ),
    ]
}

fn forward_fingerprint(model: &CarsModel, tasks: &[EncodedTask]) -> Result<Vec<u64>, String> {
    let mut bits = Vec::new();
    for t in tasks {
        let mut tape = Tape::new(&model.params);
        let mut state = SessionState::new();
        for q in &t.queries {
            let qe = model.encode_query(&mut tape, &q.tokens, 0.0).map_err(err)?;
            let docs = q
                .docs
                .iter()
                .map(|d| model.encode_doc(&mut tape, &d.tokens, 0.0))
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            let (probs, _) = model
                .doc_probabilities(&mut tape, &state, &qe, &docs, model.eval_norm())
                .map_err(err)?;
            let (decoded, _) = model.suggest(&mut tape, &state, &qe).map_err(err)?;
            bits.extend(probs.iter().chain(&decoded.step_log_probs).map(|v| v.to_bits()));
            bits.extend(decoded.tokens.iter().map(|&t| t as u64));
            let clicked: Vec<_> = q.clicks.iter().map(|&c| docs[c]).collect();
            model.observe(&mut tape, &mut state, &qe, &clicked).map_err(err)?;
        }
    }
    Ok(bits)
}

pub fn pipeline_fidelity() -> Outcome {
    ensure!(FIXTURE.lines().count() == 20, "fixture must have 20 lines");
    let log = parse_log_str(FIXTURE, "fixture").map_err(err)?;
    ensure!(log.skipped_lines == 1, "skipped {} lines", log.skipped_lines);

    let vectors = QueryVectors::BagOfWords;
    let u1: Vec<&str> = log.users["U1"].iter().map(|q| q.text.as_str()).collect();
    let u2: Vec<&str> = log.users["U2"].iter().map(|q| q.text.as_str()).collect();
    let b1 = segment_boundaries(&u1, vectors, DEFAULT_THRESHOLD);
    let b2 = segment_boundaries(&u2, vectors, DEFAULT_THRESHOLD);
    ensure!(b1 == vec![0..3, 3..5, 5..6], "U1 boundaries {b1:?}");
    ensure!(b2 == vec![0..3, 3..5], "U2 boundaries {b2:?}");

    let cfg = PrepareConfig {
        window: 2,
        ratios: SplitRatios {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        },
        ..PrepareConfig::default()
    };
    let tasks = label_all(&log, vectors, &cfg, 3).map_err(err)?;
    let expected = expected_fixture_tasks();
    ensure!(tasks.len() == expected.len(), "{} tasks", tasks.len());
    for (task, (id, queries)) in tasks.iter().zip(&expected) {
        ensure!(task.id == *id, "task {} where {id} was expected", task.id);
        ensure!(task.queries.len() == queries.len(), "{id}: {} queries", task.queries.len());
        for (q, (text, docs, clicked)) in task.queries.iter().zip(queries) {
            let got: Vec<&str> = q.candidates.iter().map(|c| c.doc_id.as_str()).collect();
            ensure!(q.text == *text, "{id}: query {:?} where {text:?} was expected", q.text);
            ensure!(got == docs, "{id} {text:?}: candidates {got:?}, expected {docs:?}");
            let clicks: Vec<&str> = q.candidates.iter().filter(|c| c.clicked()).map(|c| c.doc_id.as_str()).collect();
            ensure!(clicks == [*clicked], "{id} {text:?}: clicks {clicks:?}");
        }
    }
    let all = prepare(&log, vectors, &cfg).map_err(err)?.report;
    ensure!(
        (all.segments, all.queries_without_pool_click, all.short_tasks_dropped) == (5, 2, 1),
        "report counts {} segments, {} queries without in-pool click, {} short tasks",
        all.segments,
        all.queries_without_pool_click,
        all.short_tasks_dropped
    );

    let vocab = task_vocab(&tasks, 100)?;
    let encoded: Vec<EncodedTask> = tasks.iter().map(|t| encode_task(t, &vocab)).collect();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        word_dim: 6,
        hidden: 6,
        max_decode_len: 4,
        ..ModelConfig::default()
    };
    let mut trainer = Trainer::new(CarsModel::random(config, 5).map_err(err)?, TrainConfig::default()).map_err(err)?;
    let batch: Vec<&EncodedTask> = encoded.iter().collect();
    for _ in 0..3 {
        trainer.step(&batch).map_err(err)?;
    }
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &trainer.model, &vocab, Some(&trainer.config), Some(&trainer.optimizer)).map_err(err)?;
    let loaded = checkpoint::load(&path).map_err(err)?;
    ensure!(loaded.vocab == vocab, "vocabulary changed in the round trip");
    ensure!(
        loaded.model.parameter_hash() == trainer.model.parameter_hash(),
        "parameters changed in the round trip"
    );
    let before = forward_fingerprint(&trainer.model, &encoded)?;
    let after = forward_fingerprint(&loaded.model, &encoded)?;
    ensure!(before == after, "forward outputs differ after reload");
    Ok(format!(
        "4 tasks from 20 lines, 8 candidate windows exact, {} forward values bit-identical after reload",
        before.len()
    ))
}

/// Every artifact the pipeline writes, as `(name, bytes)`.
fn pipeline_artifacts() -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    let spec = SynthSpec {
        tasks: 120,
        users: 12,
        vocab_size: 200,
        topics: 10,
        ..SynthSpec::default()
    };
    let corpus = synthesize_corpus(&spec, 9).map_err(err)?;
    out.push(("synth.log".into(), format_log(&corpus.records).into_bytes()));
    out.push(("synth.stats".into(), serde_json::to_vec(&corpus.stats).map_err(err)?));

    let log = parse_log_str(&format_log(&corpus.records), "determinism").map_err(err)?;
    let cfg = PrepareConfig {
        test_candidates: 10,
        ..PrepareConfig::default()
    };
    let prepared = prepare(&log, QueryVectors::BagOfWords, &cfg).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    write_dataset(dir.path(), &prepared, &cfg, Some(spec.hash(9))).map_err(err)?;
    let mut files: Vec<_> = std::fs::read_dir(dir.path())
        .map_err(err)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    files.sort();
    for f in &files {
        let name = f.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        out.push((format!("dataset/{name}"), std::fs::read(f).map_err(err)?));
    }
    let data = read_dataset(dir.path()).map_err(err)?;

    let config = ModelConfig {
        vocab_size: data.vocab.len(),
        word_dim: 8,
        hidden: 8,
        ..ModelConfig::default()
    };
    let model = CarsModel::random(config, 13).map_err(err)?;
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        lr: 5e-3,
        ..TrainConfig::default()
    };
    let trained = train(model, &data.vocab, &data.splits.train, &data.splits.val, tc, |_| {}).map_err(err)?;
    let t = &trained.trainer;
    out.push(("train.history".into(), serde_json::to_vec(&trained.history).map_err(err)?));
    out.push((
        "train.checkpoint".into(),
        checkpoint::encode(&t.model, &data.vocab, Some(&t.config), Some(&t.optimizer)).map_err(err)?,
    ));

    let test: Vec<EncodedTask> = data.splits.test.iter().map(|t| encode_task(t, &data.vocab)).collect();
    let ranking = evaluate_ranking(&t.model, &test).map_err(err)?;
    out.push(("eval-rank.json".into(), serde_json::to_vec(&ranking).map_err(err)?));
    out.push(("eval-rank.csv".into(), ranking.to_csv().into_bytes()));
    let background = Background::build(&data.splits.train);
    let suggestion = evaluate_suggestion(&t.model, &data.vocab, &data.splits.test, &background).map_err(err)?;
    out.push(("eval-suggest.json".into(), serde_json::to_vec(&suggestion).map_err(err)?));
    out.push(("eval-suggest.csv".into(), suggestion.to_csv().into_bytes()));
    Ok(out)
}

pub fn determinism() -> Outcome {
    let first = pipeline_artifacts()?;
    let second = pipeline_artifacts()?;
    ensure!(first.len() == second.len(), "artifact counts differ");
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        ensure!(a == b, "{name} differs between runs");
    }
    Ok(format!("{} artifacts byte-identical across two runs", first.len()))
}
