//! Size-series acceptance check for an annotation round.
//!
//! A round is accepted when the chosen metric never drops as parameter count
//! grows across the vanilla models of comparable architecture. Spearman's rho
//! is reported alongside as a diagnostic; it never decides the verdict.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{EvalRun, Metric, RunStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureClass {
    Dense,
    Moe,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    #[default]
    Vanilla,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    pub name: String,
    pub params_billions: f64,
    pub architecture_class: ArchitectureClass,
    /// Name of the endpoint serving this model.
    pub endpoint: String,
    #[serde(default)]
    pub tag: ModelTag,
}

impl ModelCard {
    pub fn validate(&self) -> Result<()> {
        if !(self.params_billions.is_finite() && self.params_billions > 0.0) {
            return Err(Error::Validation(format!(
                "model {}: params_billions must be > 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// Reject duplicate names and invalid cards.
pub fn validate_registry(models: &[ModelCard]) -> Result<()> {
    let mut names = BTreeSet::new();
    for m in models {
        m.validate()?;
        if !names.insert(m.name.as_str()) {
            return Err(Error::Validation(format!("duplicate model name {}", m.name)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Calibrated,
    NotCalibrated,
}

/// Adjacent pair `(i, i + 1)` whose value dropped by more than epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairViolation {
    pub smaller: usize,
    pub larger: usize,
    /// `value[larger] − value[smaller]`, negative.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicCheck {
    pub violations: Vec<PairViolation>,
    pub verdict: Verdict,
}

fn validate_series(series: &[(f64, f64)]) -> Result<()> {
    if let Some((p, v)) = series.iter().find(|(p, v)| !p.is_finite() || !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite point ({p}, {v})")));
    }
    for w in series.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Validation(format!("duplicate params {}", w[0].0)));
        }
        if w[0].0 > w[1].0 {
            return Err(Error::Validation(format!(
                "series not sorted by params ({} before {})",
                w[0].0, w[1].0
            )));
        }
    }
    Ok(())
}

/// `series` is `(params_billions, value)` sorted ascending by params.
pub fn check_monotonic(series: &[(f64, f64)], epsilon: f64) -> Result<MonotonicCheck> {
    if series.is_empty() {
        return Err(Error::Validation("empty series".into()));
    }
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(Error::Validation(format!("epsilon must be >= 0, got {epsilon}")));
    }
    validate_series(series)?;
    let violations: Vec<PairViolation> = series
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].1 < w[0].1 - epsilon)
        .map(|(i, w)| PairViolation {
            smaller: i,
            larger: i + 1,
            delta: w[1].1 - w[0].1,
        })
        .collect();
    let verdict = if violations.is_empty() {
        Verdict::Calibrated
    } else {
        Verdict::NotCalibrated
    };
    Ok(MonotonicCheck { violations, verdict })
}

/// 1-based ranks; ties share their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation between params and value.
///
/// Computed as the Pearson correlation of average ranks, which reduces to
/// `1 − 6Σd² / (n(n² − 1))` without ties. A series with a constant column
/// has no defined correlation and yields 0.
pub fn spearman_rho(series: &[(f64, f64)]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::Validation(format!(
            "spearman_rho needs at least 2 points, got {}",
            series.len()
        )));
    }
    let xs = average_ranks(&series.iter().map(|p| p.0).collect::<Vec<_>>());
    let ys = average_ranks(&series.iter().map(|p| p.1).collect::<Vec<_>>());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationOptions {
    #[serde(default = "CalibrationOptions::default_metric")]
    pub metric: Metric,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "CalibrationOptions::default_excluded")]
    pub exclude_classes: BTreeSet<ArchitectureClass>,
    /// Which model series to audit.
    #[serde(default)]
    pub tag: ModelTag,
}

impl CalibrationOptions {
    fn default_metric() -> Metric {
        Metric::Precision
    }

    fn default_excluded() -> BTreeSet<ArchitectureClass> {
        [ArchitectureClass::Moe, ArchitectureClass::Other].into()
    }

    pub fn for_metric(metric: Metric) -> Self {
        Self {
            metric,
            ..Self::default()
        }
    }
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Precision,
            epsilon: 0.0,
            exclude_classes: Self::default_excluded(),
            tag: ModelTag::Vanilla,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub model: ModelCard,
    pub run_id: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelViolation {
    pub smaller_model: String,
    pub larger_model: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub round_id: u64,
    pub metric: Metric,
    pub epsilon: f64,
    pub series: Vec<SeriesPoint>,
    pub violations: Vec<ModelViolation>,
    pub spearman_rho: f64,
    pub verdict: Verdict,
}

/// Audit the completed runs of `round_id`.
///
/// Only finished runs of the requested tag on non-excluded architectures take
/// part; when a model was evaluated more than once the latest run counts.
pub fn build_calibration_report(
    round_id: u64,
    eval_runs: &[EvalRun],
    options: &CalibrationOptions,
) -> Result<CalibrationReport> {
    let mut latest: BTreeMap<&str, &EvalRun> = BTreeMap::new();
    for run in eval_runs.iter().filter(|r| {
        r.round_id == round_id
            && r.status == RunStatus::Done
            && r.model.tag == options.tag
            && !options.exclude_classes.contains(&r.model.architecture_class)
    }) {
        let slot = latest.entry(run.model.name.as_str()).or_insert(run);
        if run.run_id > slot.run_id {
            *slot = run;
        }
    }
    if latest.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "round {round_id} has {} comparable completed run(s); need at least 2",
            latest.len()
        )));
    }

    let mut series: Vec<SeriesPoint> = latest
        .into_values()
        .map(|r| SeriesPoint {
            model: r.model.clone(),
            run_id: r.run_id,
            value: r.metric(options.metric),
        })
        .collect();
    series.sort_by(|a, b| a.model.params_billions.total_cmp(&b.model.params_billions));

    let points: Vec<(f64, f64)> = series
        .iter()
        .map(|p| (p.model.params_billions, p.value))
        .collect();
    let check = check_monotonic(&points, options.epsilon)?;
    let rho = spearman_rho(&points)?;
    let violations = check
        .violations
        .iter()
        .map(|v| ModelViolation {
            smaller_model: series[v.smaller].model.name.clone(),
            larger_model: series[v.larger].model.name.clone(),
            delta: v.delta,
        })
        .collect();

    Ok(CalibrationReport {
        round_id,
        metric: options.metric,
        epsilon: options.epsilon,
        series,
        violations,
        spearman_rho: rho,
        verdict: check.verdict,
    })
}

/// Text rendering used by the CLI.
pub fn render_report(report: &CalibrationReport) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "round {}  metric {}  epsilon {}", report.round_id, report.metric, report.epsilon);
    let width = report
        .series
        .iter()
        .map(|p| p.model.name.chars().count())
        .max()
        .unwrap_or(5)
        .max(5);
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}", "Model", "Params(B)", "Value(%)");
    for p in &report.series {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>10.2}",
            p.model.name,
            p.model.params_billions,
            p.value * 100.0
        );
    }
    for v in &report.violations {
        let _ = writeln!(
            out,
            "violation: {} -> {} ({:+.2})",
            v.smaller_model,
            v.larger_model,
            v.delta * 100.0
        );
    }
    let _ = writeln!(out, "spearman rho: {:.4}", report.spearman_rho);
    let _ = writeln!(
        out,
        "{}",
        match report.verdict {
            Verdict::Calibrated => "calibrated",
            Verdict::NotCalibrated => "not_calibrated",
        }
    );
    out
}
