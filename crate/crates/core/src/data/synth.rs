//! Seeded synthetic search logs.
//!
//! Each topic owns a few anchor words, theme words and facet words. A task
//! opens with `anchor + theme`, moves across facets with `anchor + facet`,
//! and with probability `p_extend` follows a facet query with a recap
//! `anchor + theme + facet` that brings back the opening theme. With
//! qualifier words enabled, the opening also carries `qualifier_len` distinct
//! global qualifiers that no document title contains, and the recap repeats
//! them. Documents are
//! `anchor + word + aspect` for every topic word and every global aspect
//! word. The relevant document of a query carries the query's focus word and
//! an aspect that, with probability `p_ctx`, copies the aspect of the
//! previous query's first click.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::log::LogRecord;
use crate::error::{Error, Result};

pub const TARGET_TASK_LEN: f64 = 2.58;
pub const TARGET_QUERY_LEN: f64 = 2.86;

const EPOCH_START: u64 = 1_141_171_200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub tasks: usize,
    pub users: usize,
    /// Size of the word pool the topics and aspects are drawn from.
    pub vocab_size: usize,
    pub topics: usize,
    pub anchor_len: usize,
    pub themes_per_topic: usize,
    pub facets_per_topic: usize,
    /// Global query-only words; 0 disables qualifiers.
    pub qualifiers: usize,
    /// Qualifiers appended to each opening query.
    pub qualifier_len: usize,
    pub aspects: usize,
    pub mean_task_len: f64,
    pub max_task_len: usize,
    pub p_ctx: f64,
    pub p_extend: f64,
    pub impressions: usize,
    /// Examination probability at 0-based position `k` is `(k + 1)^-bias`.
    pub position_bias: f64,
    /// Click probability of an examined non-relevant document.
    pub noise_click: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            tasks: 1000,
            users: 100,
            vocab_size: 2000,
            topics: 60,
            anchor_len: 2,
            themes_per_topic: 4,
            facets_per_topic: 6,
            qualifiers: 0,
            qualifier_len: 1,
            aspects: 3,
            mean_task_len: TARGET_TASK_LEN,
            max_task_len: 10,
            p_ctx: 0.5,
            p_extend: 0.5,
            impressions: 10,
            position_bias: 0.3,
            noise_click: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn words_needed(&self) -> usize {
        self.topics * (self.anchor_len + self.themes_per_topic + self.facets_per_topic) + self.aspects + self.qualifiers
    }

    pub fn docs_per_topic(&self) -> usize {
        (self.themes_per_topic + self.facets_per_topic) * self.aspects
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.tasks == 0 || self.users == 0 {
            return fail("tasks and users must be positive".into());
        }
        if self.topics < 2 || self.anchor_len == 0 || self.themes_per_topic == 0 || self.aspects == 0 {
            return fail("need at least 2 topics and one anchor, theme and aspect word".into());
        }
        if self.qualifiers > 0 && !(1..=self.qualifiers).contains(&self.qualifier_len) {
            return fail(format!("qualifier_len must lie in 1..={}", self.qualifiers));
        }
        if self.facets_per_topic < 2 {
            return fail("need at least 2 facets per topic".into());
        }
        if self.words_needed() > self.vocab_size {
            return fail(format!(
                "{} words needed but the vocabulary holds {}",
                self.words_needed(),
                self.vocab_size
            ));
        }
        if !(self.mean_task_len >= 2.0) || self.max_task_len < 2 || self.mean_task_len > self.max_task_len as f64 {
            return fail(format!(
                "mean task length {} must lie in [2, {}]",
                self.mean_task_len, self.max_task_len
            ));
        }
        for (name, p) in [
            ("p_ctx", self.p_ctx),
            ("p_extend", self.p_extend),
            ("noise_click", self.noise_click),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.position_bias >= 0.0) {
            return fail("position_bias must be non-negative".into());
        }
        if self.impressions == 0 || self.impressions > self.docs_per_topic() {
            return fail(format!(
                "impressions must lie in 1..={} (documents per topic)",
                self.docs_per_topic()
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the spec and seed.
    pub fn hash(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("spec serializes"));
        h.update(seed.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Pronounceable word for a pool index, unique per index.
pub fn pool_word(mut index: usize) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let base = CONSONANTS.len() * VOWELS.len();
    let mut syllables = Vec::new();
    loop {
        let s = index % base;
        syllables.push([CONSONANTS[s / VOWELS.len()], VOWELS[s % VOWELS.len()]]);
        index /= base;
        if index == 0 {
            break;
        }
        index -= 1;
    }
    let mut word: String = syllables.iter().rev().flat_map(|s| s.iter().map(|&b| b as char)).collect();
    if syllables.len() == 1 {
        word.push('n');
    }
    word
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryKind {
    Opening,
    Facet,
    Recap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthQuery {
    pub text: String,
    pub time: u64,
    pub kind: QueryKind,
    pub relevant_doc: String,
    pub aspect: usize,
    /// Aspect of the previous query's first click, when there was one.
    pub prior_click_aspect: Option<usize>,
    pub clicked: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTask {
    pub user: String,
    pub topic: usize,
    pub queries: Vec<SynthQuery>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub tasks: usize,
    pub users: usize,
    pub queries: usize,
    pub documents: usize,
    pub words: usize,
    pub mean_task_len: f64,
    pub target_task_len: f64,
    pub mean_query_len: f64,
    pub target_query_len: f64,
    pub clicks_per_query: f64,
    pub queries_without_click: usize,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub records: Vec<LogRecord>,
    pub tasks: Vec<SynthTask>,
    pub stats: SynthStats,
}

struct Topic {
    anchors: Vec<String>,
    themes: Vec<String>,
    facets: Vec<String>,
}

fn doc_id(topic: usize, word: usize, aspect: usize) -> String {
    format!("D{topic:04}-{word:02}-{aspect}")
}

/// Aspect index encoded in a synthetic doc id.
pub fn doc_aspect(doc_id: &str) -> Option<usize> {
    doc_id.rsplit('-').next()?.parse().ok()
}

fn sample_task_len<R: Rng>(spec: &SynthSpec, rng: &mut R) -> usize {
    let extra_mean = spec.mean_task_len - 2.0;
    let stop = 1.0 / (1.0 + extra_mean);
    let mut len = 2;
    while len < spec.max_task_len && rng.gen::<f64>() >= stop {
        len += 1;
    }
    len
}

pub fn synthesize_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<String> = (0..spec.vocab_size).map(pool_word).collect();
    pool.shuffle(&mut rng);
    let mut words = pool.into_iter();
    let mut take = |n: usize| -> Vec<String> { words.by_ref().take(n).collect() };
    let topics: Vec<Topic> = (0..spec.topics)
        .map(|_| Topic {
            anchors: take(spec.anchor_len),
            themes: take(spec.themes_per_topic),
            facets: take(spec.facets_per_topic),
        })
        .collect();
    let aspect_words = take(spec.aspects);
    let qualifier_words = take(spec.qualifiers);

    let title = |t: usize, w: usize, a: usize| -> String {
        let topic = &topics[t];
        let word = if w < spec.themes_per_topic {
            &topic.themes[w]
        } else {
            &topic.facets[w - spec.themes_per_topic]
        };
        format!("{} {} {}", topic.anchors.join(" "), word, aspect_words[a])
    };

    let mut combos: Vec<(usize, usize)> = (0..spec.topics)
        .flat_map(|t| (0..spec.themes_per_topic).map(move |th| (t, th)))
        .collect();
    let mut combo_cursor = combos.len();
    let mut last_topic: Vec<Option<usize>> = vec![None; spec.users];
    let mut clock = EPOCH_START;
    let words_per_topic = spec.themes_per_topic + spec.facets_per_topic;
    let mut records = Vec::new();
    let mut tasks = Vec::with_capacity(spec.tasks);

    for _ in 0..spec.tasks {
        if combo_cursor == combos.len() {
            combos.shuffle(&mut rng);
            combo_cursor = 0;
        }
        let (topic_idx, theme) = combos[combo_cursor];
        combo_cursor += 1;
        let first_user = rng.gen_range(0..spec.users);
        let user_idx = (0..spec.users)
            .map(|k| (first_user + k) % spec.users)
            .find(|&u| last_topic[u] != Some(topic_idx))
            .unwrap_or(first_user);
        last_topic[user_idx] = Some(topic_idx);
        let user = format!("U{user_idx:05}");
        let topic = &topics[topic_idx];
        let anchor = topic.anchors.join(" ");
        let len = sample_task_len(spec, &mut rng);
        let mut opening = format!("{anchor} {}", topic.themes[theme]);
        if !qualifier_words.is_empty() {
            for q in qualifier_words.choose_multiple(&mut rng, spec.qualifier_len) {
                opening.push(' ');
                opening.push_str(q);
            }
        }
        clock += rng.gen_range(1800..7200);

        let mut queries: Vec<SynthQuery> = Vec::with_capacity(len);
        let mut facet: Option<usize> = None;
        for i in 0..len {
            let prev_kind = queries.last().map(|q| q.kind.clone());
            let (kind, text, focus) = if i == 0 {
                (QueryKind::Opening, opening.clone(), theme)
            } else if prev_kind == Some(QueryKind::Facet) && rng.gen::<f64>() < spec.p_extend {
                let f = facet.expect("facet query precedes a recap");
                (
                    QueryKind::Recap,
                    format!("{opening} {}", topic.facets[f]),
                    theme,
                )
            } else {
                let mut f = rng.gen_range(0..spec.facets_per_topic - 1);
                if let Some(cur) = facet {
                    if f >= cur {
                        f += 1;
                    }
                }
                facet = Some(f);
                (
                    QueryKind::Facet,
                    format!("{anchor} {}", topic.facets[f]),
                    spec.themes_per_topic + f,
                )
            };
            let prior_click_aspect = queries
                .last()
                .and_then(|q| q.clicked.first())
                .and_then(|d| doc_aspect(d));
            let aspect = match prior_click_aspect {
                Some(a) if rng.gen::<f64>() < spec.p_ctx => a,
                _ => rng.gen_range(0..spec.aspects),
            };
            let relevant = (focus, aspect);
            let mut shown: Vec<(usize, usize)> = (0..words_per_topic)
                .flat_map(|w| (0..spec.aspects).map(move |a| (w, a)))
                .filter(|&d| d != relevant)
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng, spec.impressions - 1)
                .copied()
                .collect();
            shown.push(relevant);
            shown.shuffle(&mut rng);

            clock += rng.gen_range(30..120);
            let qtime = clock;
            let mut click_clock = qtime;
            let mut clicked = Vec::new();
            for (pos, &(w, a)) in shown.iter().enumerate() {
                let examine = ((pos + 1) as f64).powf(-spec.position_bias);
                let p = if (w, a) == relevant {
                    examine
                } else {
                    spec.noise_click * examine
                };
                let id = doc_id(topic_idx, w, a);
                let click_time = if rng.gen::<f64>() < p {
                    click_clock += rng.gen_range(5..25);
                    clicked.push(id.clone());
                    click_clock
                } else {
                    0
                };
                records.push(LogRecord {
                    user: user.clone(),
                    query_time: qtime,
                    query: text.clone(),
                    doc_id: id,
                    title: title(topic_idx, w, a),
                    click_time,
                });
            }
            clock = clock.max(click_clock);
            queries.push(SynthQuery {
                text,
                time: qtime,
                kind,
                relevant_doc: doc_id(topic_idx, relevant.0, relevant.1),
                aspect,
                prior_click_aspect,
                clicked,
            });
        }
        tasks.push(SynthTask {
            user,
            topic: topic_idx,
            queries,
        });
    }

    let n_queries: usize = tasks.iter().map(|t| t.queries.len()).sum();
    let query_words: usize = tasks
        .iter()
        .flat_map(|t| &t.queries)
        .map(|q| q.text.split_whitespace().count())
        .sum();
    let clicks: usize = tasks.iter().flat_map(|t| &t.queries).map(|q| q.clicked.len()).sum();
    let mut docs: HashMap<&str, ()> = HashMap::new();
    for r in &records {
        docs.insert(&r.doc_id, ());
    }
    let stats = SynthStats {
        tasks: tasks.len(),
        users: tasks.iter().map(|t| &t.user).collect::<std::collections::BTreeSet<_>>().len(),
        queries: n_queries,
        documents: docs.len(),
        words: spec.words_needed(),
        mean_task_len: n_queries as f64 / tasks.len() as f64,
        target_task_len: TARGET_TASK_LEN,
        mean_query_len: query_words as f64 / n_queries as f64,
        target_query_len: TARGET_QUERY_LEN,
        clicks_per_query: clicks as f64 / n_queries as f64,
        queries_without_click: tasks
            .iter()
            .flat_map(|t| &t.queries)
            .filter(|q| q.clicked.is_empty())
            .count(),
    };
    Ok(SynthCorpus { records, tasks, stats })
}
