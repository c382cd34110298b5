//! Tab-separated impression logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One impression: a document shown for a query, and when it was clicked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogRecord {
    pub user: String,
    pub query_time: u64,
    pub query: String,
    pub doc_id: String,
    pub title: String,
    /// Click epoch seconds, 0 when not clicked.
    pub click_time: u64,
}

/// A query issued at one instant with every impression logged for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoggedQuery {
    pub text: String,
    pub time: u64,
    pub impressions: Vec<Impression>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Impression {
    pub doc_id: String,
    pub title: String,
    pub click_time: u64,
}

impl LoggedQuery {
    pub fn clicked_doc_ids(&self) -> Vec<&str> {
        self.impressions
            .iter()
            .filter(|i| i.click_time > 0)
            .map(|i| i.doc_id.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedLog {
    /// Time-sorted queries per user.
    pub users: BTreeMap<String, Vec<LoggedQuery>>,
    pub skipped_lines: usize,
}

impl ParsedLog {
    pub fn query_count(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }
}

/// Replaces every non-alphanumeric character with a space, lowercases and
/// collapses whitespace.
pub fn clean_text(text: &str) -> String {
    let mapped: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_epoch(field: &str, source: &str, line: usize, what: &str) -> Result<u64> {
    field.trim().parse().map_err(|_| Error::Parse {
        source_name: source.to_string(),
        line,
        msg: format!("bad {what} timestamp {field:?}"),
    })
}

/// Parses one line. `Ok(None)` marks a malformed line to be skipped.
fn parse_line(raw: &str, source: &str, line: usize) -> Result<Option<LogRecord>> {
    let fields: Vec<&str> = raw.split('\t').collect();
    if fields.len() != 6 {
        return Ok(None);
    }
    let query_time = parse_epoch(fields[1], source, line, "query")?;
    let click_time = parse_epoch(fields[5], source, line, "click")?;
    if click_time != 0 && click_time < query_time {
        return Err(Error::Parse {
            source_name: source.to_string(),
            line,
            msg: format!("click time {click_time} precedes query time {query_time}"),
        });
    }
    let user = fields[0].trim();
    let query = clean_text(fields[2]);
    let doc_id = fields[3].trim();
    if user.is_empty() || query.is_empty() || doc_id.is_empty() {
        return Ok(None);
    }
    Ok(Some(LogRecord {
        user: user.to_string(),
        query_time,
        query,
        doc_id: doc_id.to_string(),
        title: clean_text(fields[4]),
        click_time,
    }))
}

/// Parses log text, skipping malformed lines and grouping impressions of the
/// same user, time and query into one query.
pub fn parse_log_str(text: &str, source: &str) -> Result<ParsedLog> {
    let mut per_user: BTreeMap<String, Vec<LogRecord>> = BTreeMap::new();
    let mut skipped = 0;
    for (i, raw) in text.lines().enumerate() {
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        match parse_line(raw, source, i + 1)? {
            Some(r) => per_user.entry(r.user.clone()).or_default().push(r),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{source}: skipped {skipped} malformed line(s)");
    }
    let users = per_user
        .into_iter()
        .map(|(user, mut records)| {
            records.sort_by_key(|r| r.query_time);
            let mut queries: Vec<LoggedQuery> = Vec::new();
            for r in records {
                let imp = Impression {
                    doc_id: r.doc_id,
                    title: r.title,
                    click_time: r.click_time,
                };
                match queries.last_mut() {
                    Some(q) if q.time == r.query_time && q.text == r.query => {
                        match q.impressions.iter_mut().find(|i| i.doc_id == imp.doc_id) {
                            Some(existing) => {
                                if existing.click_time == 0 || (imp.click_time > 0 && imp.click_time < existing.click_time) {
                                    existing.click_time = imp.click_time;
                                }
                            }
                            None => q.impressions.push(imp),
                        }
                    }
                    _ => queries.push(LoggedQuery {
                        text: r.query,
                        time: r.query_time,
                        impressions: vec![imp],
                    }),
                }
            }
            (user, queries)
        })
        .collect();
    Ok(ParsedLog {
        users,
        skipped_lines: skipped,
    })
}

pub fn parse_log(path: &Path) -> Result<ParsedLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log_str(&text, &path.display().to_string())
}

/// Serializes records in log format, one line each.
pub fn format_log(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.user, r.query_time, r.query, r.doc_id, r.title, r.click_time
        );
    }
    out
}
