//! Evaluate a model endpoint on an exported annotation round.

use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationRound;
use crate::calibration::ModelCard;
use crate::corpus::PreprocessedRecord;
use crate::error::{Error, Result};
use crate::gateway::{CompletionRequest, EndpointClient};
use crate::options::{Meaning, OptionPermutation};
use crate::prompt::PromptTemplate;

/// Transport failures tolerated before a run is aborted, as a fraction of items.
pub const FAILURE_BUDGET: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    NotNeeded,
    Needed,
    DontKnow,
    Unparseable,
}

impl Choice {
    /// Only `needed` is a positive prediction.
    pub fn is_positive(self) -> bool {
        self == Choice::Needed
    }
}

impl From<Meaning> for Choice {
    fn from(m: Meaning) -> Self {
        match m {
            Meaning::NotNeeded => Choice::NotNeeded,
            Meaning::Needed => Choice::Needed,
            Meaning::DontKnow => Choice::DontKnow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Recall,
    F1,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precision" => Ok(Metric::Precision),
            "recall" => Ok(Metric::Recall),
            "f1" => Ok(Metric::F1),
            other => Err(Error::Validation(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        })
    }
}

fn is_boundary(c: Option<char>) -> bool {
    c.is_none_or(|c| !(c.is_ascii_alphanumeric() || c == '\'' || c == '_'))
}

/// Phrases tried after no option letter is found. Longer option texts come
/// first so "not needed" wins over "needed".
const FALLBACK_PHRASES: &[(&str, Meaning)] = &[
    ("don't know", Meaning::DontKnow),
    ("do not know", Meaning::DontKnow),
    ("dont know", Meaning::DontKnow),
    ("not sure", Meaning::DontKnow),
    ("unsure", Meaning::DontKnow),
    ("cannot tell", Meaning::DontKnow),
    ("can't tell", Meaning::DontKnow),
    ("cannot determine", Meaning::DontKnow),
    ("can't determine", Meaning::DontKnow),
    ("unclear", Meaning::DontKnow),
    ("uncertain", Meaning::DontKnow),
    ("不知道", Meaning::DontKnow),
    ("不确定", Meaning::DontKnow),
    ("not needed", Meaning::NotNeeded),
    ("no need", Meaning::NotNeeded),
    ("not need", Meaning::NotNeeded),
    ("don't need", Meaning::NotNeeded),
    ("doesn't need", Meaning::NotNeeded),
    ("does not need", Meaning::NotNeeded),
    ("do not need", Meaning::NotNeeded),
    ("not necessary", Meaning::NotNeeded),
    ("unnecessary", Meaning::NotNeeded),
    ("not required", Meaning::NotNeeded),
    ("不需要", Meaning::NotNeeded),
    ("needed", Meaning::Needed),
    ("needs", Meaning::Needed),
    ("necessary", Meaning::Needed),
    ("required", Meaning::Needed),
    ("需要", Meaning::Needed),
];

fn find_letter(reply: &str) -> Option<char> {
    let chars: Vec<char> = reply.chars().collect();
    let bare = reply.trim().trim_end_matches(['.', ')', ':', '!']);
    for (i, &c) in chars.iter().enumerate() {
        if !matches!(c.to_ascii_uppercase(), 'A' | 'B' | 'C') {
            continue;
        }
        let prev = i.checked_sub(1).map(|j| chars[j]);
        let next = chars.get(i + 1).copied();
        if !is_boundary(prev) || !is_boundary(next) {
            continue;
        }
        let marked = matches!(next, Some('.') | Some(')'));
        if c.is_ascii_lowercase() && !marked && bare.chars().count() != 1 {
            // lowercase "a" is almost always the article
            continue;
        }
        if c == 'A' && !marked && starts_sentence(&chars, i) && next == Some(' ') {
            // "A coreference is ...": an article opening a sentence
            if chars.get(i + 2).is_some_and(|n| n.is_lowercase()) {
                continue;
            }
        }
        return Some(c.to_ascii_uppercase());
    }
    None
}

fn starts_sentence(chars: &[char], i: usize) -> bool {
    chars[..i]
        .iter()
        .rev()
        .find(|c| !c.is_whitespace())
        .is_none_or(|c| matches!(c, '.' | '!' | '?' | '\n'))
}

/// Map a raw model reply to a choice under the item's option permutation.
///
/// The first standalone option letter wins (optionally followed by `.` or
/// `)`); otherwise the reply is matched against the option texts and a few
/// common paraphrases.
pub fn parse_choice(raw_reply: &str, options: &OptionPermutation) -> Choice {
    if let Some(letter) = find_letter(raw_reply) {
        if let Some(m) = options.meaning_of(letter) {
            return m.into();
        }
    }
    let norm = raw_reply.to_lowercase().replace(['’', '‘'], "'");
    FALLBACK_PHRASES
        .iter()
        .find(|(phrase, _)| norm.contains(phrase))
        .map_or(Choice::Unparseable, |(_, m)| (*m).into())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted_positive: bool, actual_positive: bool) {
        match (predicted_positive, actual_positive) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn from_predictions<'a>(preds: impl IntoIterator<Item = &'a Prediction>) -> Self {
        let mut m = Self::default();
        for p in preds {
            m.record(p.choice.is_positive(), p.ground_truth);
        }
        m
    }
}

/// Which ratios hit 0/0 and were defined as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: Degenerate,
}

impl Metrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
        }
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Precision, recall and F1 with `needed` as the positive class.
///
/// F1 is evaluated as `2tp / (2tp + fp + fn)`, which equals `2PR / (P + R)`
/// but takes a single rounding.
pub fn compute_metrics(m: &ConfusionMatrix) -> Metrics {
    let (precision, p_deg) = ratio(m.tp, m.tp + m.fp);
    let (recall, r_deg) = ratio(m.tp, m.tp + m.fn_);
    // P + R == 0 exactly when tp == 0
    let (f1, f_deg) = if m.tp == 0 {
        (0.0, true)
    } else {
        ratio(2 * m.tp, 2 * m.tp + m.fp + m.fn_)
    };
    Metrics {
        precision,
        recall,
        f1,
        degenerate: Degenerate {
            precision: p_deg,
            recall: r_deg,
            f1: f_deg,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: i64,
    pub raw_reply: String,
    pub choice: Choice,
    pub ground_truth: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Done,
    /// Aborted; partial predictions kept for inspection only.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub run_id: u64,
    pub round_id: u64,
    pub model: ModelCard,
    /// `None` evaluates every item under the identity option order.
    pub option_seed: Option<u64>,
    pub status: RunStatus,
    pub predictions: Vec<Prediction>,
    pub matrix: ConfusionMatrix,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: Degenerate,
    pub transport_failures: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl EvalRun {
    /// A placeholder for a run that has been scheduled but not finished.
    pub fn running(
        run_id: u64,
        round_id: u64,
        model: ModelCard,
        option_seed: Option<u64>,
        started_at: DateTime<Utc>,
    ) -> Self {
        let matrix = ConfusionMatrix::default();
        let metrics = compute_metrics(&matrix);
        Self {
            run_id,
            round_id,
            model,
            option_seed,
            status: RunStatus::Running,
            predictions: Vec::new(),
            matrix,
            precision: metrics.precision,
            recall: metrics.recall,
            f1: metrics.f1,
            degenerate: metrics.degenerate,
            transport_failures: 0,
            error: None,
            started_at,
            finished_at: None,
        }
    }

    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
        }
    }

    fn set_predictions(&mut self, mut predictions: Vec<Prediction>) {
        predictions.sort_by_key(|p| p.item_id);
        self.matrix = ConfusionMatrix::from_predictions(&predictions);
        let m = compute_metrics(&self.matrix);
        self.precision = m.precision;
        self.recall = m.recall;
        self.f1 = m.f1;
        self.degenerate = m.degenerate;
        self.predictions = predictions;
    }

    /// Replace predictions and recompute the matrix and metrics.
    pub fn with_predictions(mut self, predictions: Vec<Prediction>) -> Self {
        self.set_predictions(predictions);
        self
    }
}

/// Evaluate `model` on the labeled records of `round`.
///
/// Items are queried concurrently up to the endpoint's `max_in_flight`.
/// Predictions are sorted by item id, so the run is reproducible given a
/// deterministic endpoint. More than 10% transport failures abort the run
/// with status `failed`.
pub async fn run_eval(
    run: EvalRun,
    round: &AnnotationRound,
    records: &[PreprocessedRecord],
    client: &EndpointClient,
) -> Result<EvalRun> {
    if records.is_empty() {
        return Err(Error::Validation(format!("round {} has no labeled records", round.round_id)));
    }
    let template = PromptTemplate::parse(&round.prompt_template)?;
    let mut labeled = Vec::with_capacity(records.len());
    for r in records {
        let gt = r
            .cr_need_gt
            .ok_or_else(|| Error::Validation(format!("record {} has no cr_need_gt", r.id)))?;
        labeled.push((r.clone(), gt));
    }

    let seed = run.option_seed;
    let parallel = client.endpoint().max_in_flight.max(1) as usize;
    let mut results = futures::stream::iter(labeled)
        .map(|(record, gt)| {
            let template = &template;
            async move {
                let options = OptionPermutation::resolve(seed, record.id);
                let request = CompletionRequest::eval(template.render(&record, &options));
                let reply = client.complete(&request).await?;
                Ok::<_, Error>(Prediction {
                    item_id: record.id,
                    choice: parse_choice(&reply.text, &options),
                    raw_reply: reply.text,
                    ground_truth: gt,
                })
            }
        })
        .buffer_unordered(parallel);

    let budget = (records.len() as f64 * FAILURE_BUDGET).floor() as u64;
    let mut predictions = Vec::with_capacity(records.len());
    let mut failures = 0u64;
    let mut last_error = None;
    while let Some(res) = results.next().await {
        match res {
            Ok(p) => predictions.push(p),
            Err(e @ Error::Transport { .. }) => {
                failures += 1;
                last_error = Some(e.to_string());
                if failures > budget {
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    drop(results);

    let mut run = run.with_predictions(predictions);
    run.transport_failures = failures;
    run.finished_at = Some(Utc::now());
    if failures > budget {
        run.status = RunStatus::Failed;
        run.error = Some(format!(
            "aborted after {failures} transport failures (budget {budget}); last: {}",
            last_error.unwrap_or_default()
        ));
    } else {
        run.status = RunStatus::Done;
    }
    Ok(run)
}

/// `candidate − baseline` in percentage points, rounded half away from zero
/// to two decimals.
pub fn improvement_report(baseline: &EvalRun, candidate: &EvalRun, metric: Metric) -> Result<f64> {
    if baseline.round_id != candidate.round_id {
        return Err(Error::Validation(format!(
            "runs belong to different rounds ({} vs {})",
            baseline.round_id, candidate.round_id
        )));
    }
    Ok(round2((candidate.metric(metric) - baseline.metric(metric)) * 100.0))
}

/// Round half away from zero to two decimals.
pub fn round2(x: f64) -> f64 {
    // f64::round is half-away-from-zero; the inner round absorbs the
    // representation error of values like 29.069999999999997.
    ((x * 100.0 * 1e6).round() / 1e6).round() / 100.0
}

/// Text table with columns Model, Precision(%), F1 score(%).
pub fn render_table(runs: &[EvalRun]) -> String {
    let mut rows: Vec<&EvalRun> = runs.iter().collect();
    rows.sort_by(|a, b| {
        (a.model.tag, a.model.architecture_class)
            .cmp(&(b.model.tag, b.model.architecture_class))
            .then(a.model.params_billions.total_cmp(&b.model.params_billions))
            .then(a.run_id.cmp(&b.run_id))
    });
    let width = rows
        .iter()
        .map(|r| r.model.name.chars().count())
        .chain(std::iter::once("Model".len()))
        .max()
        .unwrap_or(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>12}  {:>11}", "Model", "Precision(%)", "F1 score(%)");
    let _ = writeln!(out, "{}", "-".repeat(width + 27));
    for r in rows {
        let mut line = format!(
            "{:<width$}  {:>12.2}  {:>11.2}",
            r.model.name,
            r.precision * 100.0,
            r.f1 * 100.0
        );
        if r.status != RunStatus::Done {
            line.push_str(&format!("  ({:?})", r.status).to_lowercase());
        }
        let _ = writeln!(out, "{line}");
    }
    out
}
