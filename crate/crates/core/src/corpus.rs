//! Raw chat-log parsing and preprocessing.
//!
//! The pipeline is `parse_chat_log` → `concat_consecutive` → `build_windows`
//! → `QuestionFilter::apply`. Every stage is a pure function over its input.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Read};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_GAP_SECONDS: i64 = 600;
pub const DEFAULT_WINDOW_CAP: usize = 12;
pub const DEFAULT_THROTTLE: u8 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMessage {
    pub id: i64,
    /// Anonymized sender ID, never a display name.
    pub sender: String,
    pub text: String,
    /// Unix seconds.
    pub timestamp: i64,
}

impl RawMessage {
    fn order_key(&self) -> (i64, i64) {
        (self.timestamp, self.id)
    }
}

/// One history entry inside a record's context window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowEntry {
    pub sender: String,
    pub text: String,
    pub timestamp: i64,
}

/// A candidate inquiry with its history window and label slots.
///
/// Field order and names are the on-disk JSON Lines format; unset labels
/// serialize as `null`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessedRecord {
    pub id: i64,
    pub sender: String,
    pub text: String,
    pub timestamp: i64,
    #[serde(default)]
    pub is_question: Option<bool>,
    #[serde(default)]
    pub kimi_is_question: Option<bool>,
    #[serde(default)]
    pub cr_window: Vec<WindowEntry>,
    #[serde(default)]
    pub cr_need_gt: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    JsonArray,
}

impl InputFormat {
    /// Guess the format from the first non-whitespace byte.
    pub fn sniff(bytes: &[u8]) -> Self {
        match bytes.iter().find(|b| !b.is_ascii_whitespace()) {
            Some(b'[') => InputFormat::JsonArray,
            _ => InputFormat::Jsonl,
        }
    }
}

/// Parse a chat log and return its messages in ascending `(timestamp, id)` order.
pub fn parse_chat_log<R: Read>(stream: R, format: InputFormat) -> Result<Vec<RawMessage>> {
    let mut messages = match format {
        InputFormat::Jsonl => {
            let mut out = Vec::new();
            for (idx, line) in BufReader::new(stream).lines().enumerate() {
                let line_no = idx + 1;
                let line = line.map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let msg: RawMessage = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
                out.push((line_no, msg));
            }
            out
        }
        InputFormat::JsonArray => {
            let mut buf = String::new();
            BufReader::new(stream)
                .read_to_string(&mut buf)
                .map_err(|e| Error::Parse {
                    line: 0,
                    message: e.to_string(),
                })?;
            if buf.trim().is_empty() {
                return Ok(Vec::new());
            }
            let values: Vec<serde_json::Value> =
                serde_json::from_str(&buf).map_err(|e| Error::Parse {
                    line: e.line(),
                    message: e.to_string(),
                })?;
            let mut out = Vec::with_capacity(values.len());
            for (idx, value) in values.into_iter().enumerate() {
                let msg: RawMessage = serde_json::from_value(value).map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: format!("array element {}: {e}", idx + 1),
                })?;
                out.push((idx + 1, msg));
            }
            out
        }
    };

    let mut seen = HashSet::with_capacity(messages.len());
    for (line, msg) in &messages {
        if msg.timestamp < 0 {
            return Err(Error::Parse {
                line: *line,
                message: format!("negative timestamp {}", msg.timestamp),
            });
        }
        if !seen.insert(msg.id) {
            return Err(Error::Validation(format!(
                "duplicate message id {} (line {line})",
                msg.id
            )));
        }
    }

    messages.sort_by_key(|(_, m)| m.order_key());
    Ok(messages.into_iter().map(|(_, m)| m).collect())
}

fn ensure_sorted(messages: &[RawMessage]) -> Result<()> {
    if let Some(pos) = messages
        .windows(2)
        .position(|w| w[0].order_key() >= w[1].order_key())
    {
        return Err(Error::Contract(format!(
            "messages not sorted by (timestamp, id) at position {}: {:?} then {:?}",
            pos + 1,
            messages[pos].order_key(),
            messages[pos + 1].order_key()
        )));
    }
    Ok(())
}

/// Merge runs of same-sender messages whose adjacent gaps are at most
/// `max_gap_seconds`. The merged message carries the last member's id and
/// timestamp; texts are joined with `\n`.
pub fn concat_consecutive(messages: &[RawMessage], max_gap_seconds: i64) -> Result<Vec<RawMessage>> {
    ensure_sorted(messages)?;
    let mut out: Vec<RawMessage> = Vec::with_capacity(messages.len());
    for msg in messages {
        match out.last_mut() {
            Some(prev)
                if prev.sender == msg.sender && msg.timestamp - prev.timestamp <= max_gap_seconds =>
            {
                prev.text.push('\n');
                prev.text.push_str(&msg.text);
                prev.id = msg.id;
                prev.timestamp = msg.timestamp;
            }
            _ => out.push(msg.clone()),
        }
    }
    Ok(out)
}

/// One record per message, each carrying up to `window_cap` preceding messages.
pub fn build_windows(messages: &[RawMessage], window_cap: usize) -> Result<Vec<PreprocessedRecord>> {
    ensure_sorted(messages)?;
    Ok(messages
        .iter()
        .enumerate()
        .map(|(i, msg)| {
            let start = i.saturating_sub(window_cap);
            PreprocessedRecord {
                id: msg.id,
                sender: msg.sender.clone(),
                text: msg.text.clone(),
                timestamp: msg.timestamp,
                is_question: None,
                kimi_is_question: None,
                cr_window: messages[start..i]
                    .iter()
                    .map(|m| WindowEntry {
                        sender: m.sender.clone(),
                        text: m.text.clone(),
                        timestamp: m.timestamp,
                    })
                    .collect(),
                cr_need_gt: None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterPolicy {
    #[default]
    Both,
    Either,
    AOnly,
    BOnly,
}

impl FilterPolicy {
    fn needs_a(self) -> bool {
        !matches!(self, FilterPolicy::BOnly)
    }

    fn needs_b(self) -> bool {
        !matches!(self, FilterPolicy::AOnly)
    }
}

impl std::str::FromStr for FilterPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(FilterPolicy::Both),
            "either" => Ok(FilterPolicy::Either),
            "a_only" => Ok(FilterPolicy::AOnly),
            "b_only" => Ok(FilterPolicy::BOnly),
            other => Err(Error::Validation(format!("unknown filter policy {other:?}"))),
        }
    }
}

/// Question scores from the two scoring endpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionScores {
    /// 0..=10 scores from scorer A; compared against the throttle.
    pub a: BTreeMap<i64, u8>,
    /// Boolean verdicts from scorer B.
    pub b: BTreeMap<i64, bool>,
    /// Ids whose scoring reply could not be parsed.
    pub unscored: BTreeSet<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionFilter {
    pub throttle: u8,
    pub policy: FilterPolicy,
}

impl Default for QuestionFilter {
    fn default() -> Self {
        Self {
            throttle: DEFAULT_THROTTLE,
            policy: FilterPolicy::Both,
        }
    }
}

impl QuestionFilter {
    /// Set `kimi_is_question`/`is_question` from the scores and keep the
    /// records that pass the policy, in input order.
    ///
    /// Records listed as unscored that lack a score the policy needs are kept
    /// with that flag left `null`, so a scoring failure never silently drops
    /// an inquiry.
    pub fn apply(
        &self,
        records: &[PreprocessedRecord],
        scores: &QuestionScores,
    ) -> Result<Vec<PreprocessedRecord>> {
        if let Some((id, s)) = scores.a.iter().find(|(_, s)| **s > 10) {
            return Err(Error::Validation(format!("score {s} for id {id} outside 0..=10")));
        }

        let missing: Vec<i64> = records
            .iter()
            .filter(|r| !scores.unscored.contains(&r.id))
            .filter(|r| {
                (self.policy.needs_a() && !scores.a.contains_key(&r.id))
                    || (self.policy.needs_b() && !scores.b.contains_key(&r.id))
            })
            .map(|r| r.id)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingScores { ids: missing });
        }

        let mut out = Vec::new();
        for record in records {
            let a = scores.a.get(&record.id).map(|s| *s >= self.throttle);
            let b = scores.b.get(&record.id).copied();
            let unscored = scores.unscored.contains(&record.id);
            let keep = match (self.policy, a, b) {
                _ if unscored && (a.is_none() || b.is_none()) => true,
                (FilterPolicy::Both, Some(a), Some(b)) => a && b,
                (FilterPolicy::Either, Some(a), Some(b)) => a || b,
                (FilterPolicy::AOnly, Some(a), _) => a,
                (FilterPolicy::BOnly, _, Some(b)) => b,
                _ => unreachable!("missing scores rejected above"),
            };
            if keep {
                let mut r = record.clone();
                r.kimi_is_question = a;
                r.is_question = b;
                out.push(r);
            }
        }
        Ok(out)
    }
}

pub fn read_records<R: Read>(stream: R) -> Result<Vec<PreprocessedRecord>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(stream).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_records<W: std::io::Write>(mut out: W, records: &[PreprocessedRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
