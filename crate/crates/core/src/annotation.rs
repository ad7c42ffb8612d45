//! Versioned annotation rounds backed by an append-only label log.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! rounds/round-000001.json   one metadata document per round
//! labels.jsonl               every Label event, in write order
//! labels.snapshot.json       compacted current labels + number of events covered
//! ```
//!
//! The store is single-writer. Every mutation is fsynced before it returns.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::PreprocessedRecord;
use crate::error::{Error, Result};
use crate::prompt::PromptTemplate;

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(Utc::now)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Open,
    Evaluating,
    Calibrated,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRound {
    pub round_id: u64,
    pub prompt_template: String,
    pub created_at: DateTime<Utc>,
    pub parent_round: Option<u64>,
    pub status: RoundStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelValue {
    Needed,
    NotNeeded,
    Skip,
}

impl LabelValue {
    pub fn as_bool(self) -> Option<bool> {
        match self {
            LabelValue::Needed => Some(true),
            LabelValue::NotNeeded => Some(false),
            LabelValue::Skip => None,
        }
    }
}

impl std::str::FromStr for LabelValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "needed" => Ok(LabelValue::Needed),
            "not_needed" => Ok(LabelValue::NotNeeded),
            "skip" => Ok(LabelValue::Skip),
            other => Err(Error::Validation(format!("unknown label value {other:?}"))),
        }
    }
}

/// One label event; also the current label for `(round, item, annotator)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub round_id: u64,
    pub item_id: i64,
    pub value: LabelValue,
    pub annotator: String,
    pub revision: u32,
    pub labeled_at: DateTime<Utc>,
}

/// How labels from several annotators collapse to one value per item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictRule {
    /// The most recently written current label wins.
    #[default]
    LastWriteWins,
    /// Disagreeing annotators resolve to `skip`.
    RequireAgreement,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundDiff {
    pub changed: Vec<i64>,
    pub added: Vec<i64>,
    pub removed: Vec<i64>,
}

impl RoundDiff {
    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.added.is_empty() && self.removed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Items resolving to needed / not_needed.
    pub labeled: usize,
    pub total: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub record: PreprocessedRecord,
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemsPage {
    pub items: Vec<ItemView>,
    pub next_cursor: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SequencedLabel {
    seq: u64,
    label: Label,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    events: u64,
    labels: Vec<SequencedLabel>,
}

/// Current labels keyed by (round, item) then annotator.
#[derive(Debug, Default, Clone, PartialEq)]
struct LabelState {
    current: BTreeMap<(u64, i64), BTreeMap<String, (u64, Label)>>,
}

impl LabelState {
    fn apply(&mut self, seq: u64, label: Label) {
        let slot = self
            .current
            .entry((label.round_id, label.item_id))
            .or_default();
        match slot.get(&label.annotator) {
            Some((_, existing)) if existing.revision > label.revision => {}
            _ => {
                slot.insert(label.annotator.clone(), (seq, label));
            }
        }
    }

    fn for_item(&self, round: u64, item: i64) -> Option<&BTreeMap<String, (u64, Label)>> {
        self.current.get(&(round, item))
    }

    fn round(&self, round: u64) -> impl Iterator<Item = (i64, &BTreeMap<String, (u64, Label)>)> {
        self.current
            .range((round, i64::MIN)..=(round, i64::MAX))
            .map(|((_, item), m)| (*item, m))
    }
}

const ROUNDS_DIR: &str = "rounds";
const LOG_FILE: &str = "labels.jsonl";
const SNAPSHOT_FILE: &str = "labels.snapshot.json";

pub struct AnnotationStore {
    root: PathBuf,
    items: BTreeMap<i64, PreprocessedRecord>,
    rounds: BTreeMap<u64, AnnotationRound>,
    labels: LabelState,
    log: File,
    events: u64,
    conflict: ConflictRule,
    clock: Clock,
}

impl std::fmt::Debug for AnnotationStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnnotationStore")
            .field("root", &self.root)
            .field("items", &self.items.len())
            .field("rounds", &self.rounds.len())
            .field("events", &self.events)
            .finish()
    }
}

/// Write `bytes` to `path` via a synced temp file and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    File::open(dir)?.sync_all()?;
    Ok(())
}

/// Read every complete event; a torn final line left by a crash is truncated.
fn read_log(path: &Path) -> Result<Vec<Label>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut line_no = 0;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        if buf.trim().is_empty() {
            offset += n as u64;
            continue;
        }
        match serde_json::from_str::<Label>(buf.trim_end()) {
            Ok(label) if complete => out.push(label),
            Ok(_) | Err(_) if !complete => {
                tracing::warn!(path = %path.display(), "truncating torn final log line");
                OpenOptions::new().write(true).open(path)?.set_len(offset)?;
                break;
            }
            Ok(_) => unreachable!(),
            Err(e) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("{}: {e}", path.display()),
                })
            }
        }
        offset += n as u64;
    }
    Ok(out)
}

impl AnnotationStore {
    /// Open (or initialize) a store over the filtered corpus `items`.
    pub fn open(root: impl Into<PathBuf>, items: Vec<PreprocessedRecord>) -> Result<Self> {
        Self::open_with(root, items, ConflictRule::default(), system_clock())
    }

    pub fn open_with(
        root: impl Into<PathBuf>,
        items: Vec<PreprocessedRecord>,
        conflict: ConflictRule,
        clock: Clock,
    ) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join(ROUNDS_DIR))?;

        let mut by_id = BTreeMap::new();
        for item in items {
            let id = item.id;
            if by_id.insert(id, item).is_some() {
                return Err(Error::Validation(format!("duplicate corpus id {id}")));
            }
        }

        let mut rounds = BTreeMap::new();
        for entry in fs::read_dir(root.join(ROUNDS_DIR))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let round: AnnotationRound = serde_json::from_slice(&fs::read(&path)?)?;
            rounds.insert(round.round_id, round);
        }

        let mut labels = LabelState::default();
        let mut covered = 0u64;
        let snapshot_path = root.join(SNAPSHOT_FILE);
        if snapshot_path.exists() {
            let snap: Snapshot = serde_json::from_slice(&fs::read(&snapshot_path)?)?;
            for s in snap.labels {
                labels.apply(s.seq, s.label);
            }
            covered = snap.events;
        }
        let log_path = root.join(LOG_FILE);
        let events = read_log(&log_path)?;
        if (events.len() as u64) < covered {
            return Err(Error::State(format!(
                "snapshot covers {covered} events but the log holds {}",
                events.len()
            )));
        }
        let total = events.len() as u64;
        for (seq, label) in events.into_iter().enumerate().skip(covered as usize) {
            labels.apply(seq as u64, label);
        }

        let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        log.seek(SeekFrom::End(0))?;

        Ok(Self {
            root,
            items: by_id,
            rounds,
            labels,
            log,
            events: total,
            conflict,
            clock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn items(&self) -> impl Iterator<Item = &PreprocessedRecord> {
        self.items.values()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn rounds(&self) -> Vec<AnnotationRound> {
        self.rounds.values().cloned().collect()
    }

    pub fn round(&self, round_id: u64) -> Result<&AnnotationRound> {
        self.rounds
            .get(&round_id)
            .ok_or_else(|| Error::NotFound(format!("round {round_id}")))
    }

    fn round_path(&self, round_id: u64) -> PathBuf {
        self.root.join(ROUNDS_DIR).join(format!("round-{round_id:06}.json"))
    }

    fn persist_round(&self, round: &AnnotationRound) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(round)?;
        bytes.push(b'\n');
        write_atomic(&self.round_path(round.round_id), &bytes)
    }

    fn append(&mut self, labels: &[Label]) -> Result<()> {
        if labels.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for l in labels {
            serde_json::to_writer(&mut buf, l)?;
            buf.push(b'\n');
        }
        self.log.write_all(&buf)?;
        self.log.sync_data()?;
        for l in labels {
            self.labels.apply(self.events, l.clone());
            self.events += 1;
        }
        Ok(())
    }

    /// Start a new open round. With a parent, the parent's current labels are
    /// copied in at revision 0.
    pub fn create_round(&mut self, prompt_template: &str, parent: Option<u64>) -> Result<AnnotationRound> {
        PromptTemplate::parse(prompt_template)?;
        if let Some(p) = parent {
            self.round(p)?;
        }
        let round_id = self.rounds.keys().next_back().map_or(1, |id| id + 1);
        let now = (self.clock)();
        let round = AnnotationRound {
            round_id,
            prompt_template: prompt_template.to_owned(),
            created_at: now,
            parent_round: parent,
            status: RoundStatus::Open,
        };

        let copied: Vec<Label> = match parent {
            Some(p) => {
                let mut inherited: Vec<(u64, Label)> = self
                    .labels
                    .round(p)
                    .flat_map(|(_, by_annotator)| by_annotator.values().cloned())
                    .collect();
                // keep relative write order so last-write-wins resolves identically
                inherited.sort_by_key(|(seq, _)| *seq);
                inherited
                    .into_iter()
                    .map(|(_, l)| Label {
                        round_id,
                        revision: 0,
                        labeled_at: now,
                        ..l
                    })
                    .collect()
            }
            None => Vec::new(),
        };

        self.persist_round(&round)?;
        self.rounds.insert(round_id, round.clone());
        self.append(&copied)?;
        Ok(round)
    }

    pub fn submit_label(
        &mut self,
        round_id: u64,
        item_id: i64,
        value: LabelValue,
        annotator: &str,
    ) -> Result<Label> {
        let round = self.round(round_id)?;
        if round.status != RoundStatus::Open {
            return Err(Error::State(format!(
                "round {round_id} is {:?}; only open rounds accept labels",
                round.status
            )));
        }
        if !self.items.contains_key(&item_id) {
            return Err(Error::NotFound(format!("item {item_id}")));
        }
        if annotator.trim().is_empty() {
            return Err(Error::Validation("annotator must not be empty".into()));
        }
        let revision = self
            .labels
            .for_item(round_id, item_id)
            .and_then(|m| m.get(annotator))
            .map_or(0, |(_, l)| l.revision + 1);
        let label = Label {
            round_id,
            item_id,
            value,
            annotator: annotator.to_owned(),
            revision,
            labeled_at: (self.clock)(),
        };
        self.append(std::slice::from_ref(&label))?;
        Ok(label)
    }

    pub fn set_status(&mut self, round_id: u64, status: RoundStatus) -> Result<AnnotationRound> {
        let mut round = self.round(round_id)?.clone();
        if round.status != status {
            round.status = status;
            self.persist_round(&round)?;
            self.rounds.insert(round_id, round.clone());
        }
        Ok(round)
    }

    /// Current label of every annotator for `item_id`, ordered by annotator.
    pub fn current_labels(&self, round_id: u64, item_id: i64) -> Vec<Label> {
        self.labels
            .for_item(round_id, item_id)
            .map(|m| m.values().map(|(_, l)| l.clone()).collect())
            .unwrap_or_default()
    }

    fn resolve(&self, by_annotator: &BTreeMap<String, (u64, Label)>) -> Option<LabelValue> {
        match self.conflict {
            ConflictRule::LastWriteWins => by_annotator
                .values()
                .max_by_key(|(seq, _)| *seq)
                .map(|(_, l)| l.value),
            ConflictRule::RequireAgreement => {
                let values: BTreeSet<_> = by_annotator
                    .values()
                    .map(|(_, l)| l.value.as_bool())
                    .collect();
                let first = by_annotator.values().next()?.1.value;
                Some(if values.len() == 1 { first } else { LabelValue::Skip })
            }
        }
    }

    /// One resolved value per labeled item of the round.
    pub fn resolved(&self, round_id: u64) -> Result<BTreeMap<i64, LabelValue>> {
        self.round(round_id)?;
        Ok(self
            .labels
            .round(round_id)
            .filter_map(|(item, m)| self.resolve(m).map(|v| (item, v)))
            .collect())
    }

    /// Labeled records with `cr_need_gt` set, ascending by id. Skipped and
    /// unlabeled items are left out.
    pub fn export_round(&self, round_id: u64) -> Result<Vec<PreprocessedRecord>> {
        Ok(self
            .resolved(round_id)?
            .into_iter()
            .filter_map(|(item, v)| {
                let gt = v.as_bool()?;
                let mut record = self.items.get(&item)?.clone();
                record.cr_need_gt = Some(gt);
                Some(record)
            })
            .collect())
    }

    pub fn diff_rounds(&self, a: u64, b: u64) -> Result<RoundDiff> {
        let left = self.resolved(a)?;
        let right = self.resolved(b)?;
        let mut diff = RoundDiff::default();
        for (item, v) in &left {
            match right.get(item) {
                Some(w) if w != v => diff.changed.push(*item),
                Some(_) => {}
                None => diff.removed.push(*item),
            }
        }
        diff.added = right.keys().filter(|k| !left.contains_key(k)).copied().collect();
        Ok(diff)
    }

    /// Records in id order with their current labels; `cursor` is an offset.
    pub fn items_page(&self, round_id: u64, cursor: usize, limit: usize) -> Result<ItemsPage> {
        self.round(round_id)?;
        let items: Vec<ItemView> = self
            .items
            .values()
            .skip(cursor)
            .take(limit)
            .map(|record| ItemView {
                labels: self.current_labels(round_id, record.id),
                record: record.clone(),
            })
            .collect();
        let next = cursor + items.len();
        Ok(ItemsPage {
            next_cursor: (items.len() == limit && next < self.items.len()).then_some(next),
            items,
        })
    }

    pub fn progress(&self, round_id: u64) -> Result<Progress> {
        let resolved = self.resolved(round_id)?;
        let skipped = resolved.values().filter(|v| **v == LabelValue::Skip).count();
        Ok(Progress {
            labeled: resolved.len() - skipped,
            total: self.items.len(),
            skipped,
        })
    }

    /// Write the compacted snapshot covering every event so far.
    pub fn compact(&self) -> Result<()> {
        let labels = self
            .labels
            .current
            .values()
            .flat_map(|m| m.values())
            .map(|(seq, label)| SequencedLabel {
                seq: *seq,
                label: label.clone(),
            })
            .collect();
        let snap = Snapshot {
            events: self.events,
            labels,
        };
        write_atomic(&self.root.join(SNAPSHOT_FILE), &serde_json::to_vec(&snap)?)
    }

    /// Every label event in write order.
    pub fn history(&self) -> Result<Vec<Label>> {
        read_log(&self.root.join(LOG_FILE))
    }

    #[cfg(test)]
    fn state_eq(&self, other: &Self) -> bool {
        self.labels == other.labels && self.rounds == other.rounds && self.events == other.events
    }
}
