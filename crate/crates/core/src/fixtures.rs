//! Small reference data sets used by tests, examples and demos.

use chrono::{TimeZone, Utc};

use crate::annotation::LabelValue;
use crate::calibration::{ArchitectureClass, ModelCard, ModelTag};
use crate::corpus::RawMessage;
use crate::evalharness::{compute_metrics, ConfusionMatrix, EvalRun, RunStatus};

fn msg(id: i64, sender: &str, text: &str, timestamp: i64) -> RawMessage {
    RawMessage {
        id,
        sender: sender.into(),
        text: text.into(),
        timestamp,
    }
}

/// Two users, each splitting one question over two messages; the second
/// question says "it" and means mmpose.
pub fn pronoun_chat_log() -> Vec<RawMessage> {
    vec![
        msg(1, "u_7f3a", "Can mmpose be deployed", 1_700_000_000),
        msg(2, "u_7f3a", "on mobile phones?", 1_700_000_012),
        msg(3, "u_c91e", "BTW, how to deploy it", 1_700_000_090),
        msg(4, "u_c91e", "on TX2 ?", 1_700_000_095),
    ]
}

/// The pronoun log followed by a few more inquiries.
pub fn extended_chat_log() -> Vec<RawMessage> {
    let mut log = pronoun_chat_log();
    log.extend([
        msg(5, "u_40bd", "Does ncnn support int8 quantization on ARM?", 1_700_001_000),
        msg(6, "u_9d02", "yes, see the wiki", 1_700_001_100),
        msg(7, "u_40bd", "How fast is it on a Raspberry Pi?", 1_700_001_200),
        msg(8, "u_e5a1", "Where can I download the Vulkan SDK?", 1_700_003_000),
    ]);
    log
}

/// Labels for [`extended_chat_log`] after merging: two positives, two negatives.
pub fn extended_labels() -> Vec<(i64, LabelValue)> {
    vec![
        (4, LabelValue::Needed),
        (5, LabelValue::NotNeeded),
        (7, LabelValue::Needed),
        (8, LabelValue::NotNeeded),
    ]
}

/// One row of the published size series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub params_billions: f64,
    pub class: ArchitectureClass,
    /// Vanilla precision in percent.
    pub precision: f64,
    /// Vanilla F1 in percent.
    pub f1: f64,
    /// Fine-tuned F1 in percent.
    pub finetuned_f1: f64,
    /// Printed fine-tuned minus vanilla F1, percentage points.
    pub improvement: f64,
}

pub const REFERENCE_SERIES: [ReferenceRow; 7] = [
    ReferenceRow { name: "Qwen1.5-0.5B-Chat", params_billions: 0.5, class: ArchitectureClass::Dense, precision: 55.68, f1: 52.43, finetuned_f1: 60.60, improvement: 8.17 },
    ReferenceRow { name: "Qwen1.5-1.8B-Chat", params_billions: 1.8, class: ArchitectureClass::Dense, precision: 56.15, f1: 50.02, finetuned_f1: 62.90, improvement: 12.88 },
    ReferenceRow { name: "Qwen1.5-4B-Chat", params_billions: 4.0, class: ArchitectureClass::Dense, precision: 56.92, f1: 62.75, finetuned_f1: 51.25, improvement: -11.50 },
    ReferenceRow { name: "Qwen1.5-7B-Chat", params_billions: 7.0, class: ArchitectureClass::Dense, precision: 57.11, f1: 68.17, finetuned_f1: 69.22, improvement: 1.05 },
    ReferenceRow { name: "Qwen1.5-14B-Chat", params_billions: 14.0, class: ArchitectureClass::Dense, precision: 60.77, f1: 64.59, finetuned_f1: 77.09, improvement: 12.50 },
    ReferenceRow { name: "Qwen1.5-32B-Chat", params_billions: 32.0, class: ArchitectureClass::Dense, precision: 68.29, f1: 60.15, finetuned_f1: 85.58, improvement: 25.43 },
    ReferenceRow { name: "Qwen1.5-MoE-2.7B-Chat", params_billions: 2.7, class: ArchitectureClass::Moe, precision: 61.79, f1: 32.86, finetuned_f1: 61.93, improvement: 29.07 },
];

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

fn basis_points(pct: f64) -> u64 {
    let bp = (pct * 100.0).round();
    assert!((0.0..=10_000.0).contains(&bp), "percentage {pct} out of range");
    bp as u64
}

/// Smallest confusion matrix whose precision and F1 equal the given
/// two-decimal percentages exactly.
///
/// With `P = a/10⁴`, `F1 = b/10⁴`: `tp = a·k`, `fp = (10⁴ − a)·k` and
/// `fn = k(2·10⁴·a/b − a − 10⁴)`, where `k` is the least multiple making
/// `fn` integral.
pub fn matrix_with(precision_pct: f64, f1_pct: f64) -> ConfusionMatrix {
    let a = basis_points(precision_pct);
    let b = basis_points(f1_pct);
    assert!(a > 0 && b > 0, "zero metrics have no unique matrix");
    let k = b / gcd(20_000 * a, b);
    let fn_total = 20_000 * a * k / b;
    assert!(fn_total >= a * k + 10_000 * k, "F1 {f1_pct} unreachable with precision {precision_pct}");
    ConfusionMatrix {
        tp: a * k,
        fp: (10_000 - a) * k,
        fn_: fn_total - a * k - 10_000 * k,
        tn: 0,
    }
}

/// A matrix with the given F1 (two decimals) and equal fp and fn.
pub fn matrix_with_f1(f1_pct: f64) -> ConfusionMatrix {
    let b = basis_points(f1_pct);
    ConfusionMatrix {
        tp: b,
        fp: 10_000 - b,
        fn_: 10_000 - b,
        tn: 0,
    }
}

pub fn model_card(row: &ReferenceRow, tag: ModelTag) -> ModelCard {
    let name = match tag {
        ModelTag::Vanilla => row.name.to_owned(),
        ModelTag::Finetuned => format!("{}-lora", row.name),
    };
    ModelCard {
        name,
        params_billions: row.params_billions,
        architecture_class: row.class,
        endpoint: "reference".into(),
        tag,
    }
}

/// A finished run whose stored metrics come from `matrix`.
pub fn run_from_matrix(run_id: u64, round_id: u64, model: ModelCard, matrix: ConfusionMatrix) -> EvalRun {
    let m = compute_metrics(&matrix);
    let at = Utc.with_ymd_and_hms(2024, 6, 1, 0, 0, 0).unwrap();
    EvalRun {
        run_id,
        round_id,
        model,
        option_seed: None,
        status: RunStatus::Done,
        predictions: Vec::new(),
        matrix,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        degenerate: m.degenerate,
        transport_failures: 0,
        error: None,
        started_at: at,
        finished_at: Some(at),
    }
}

/// Vanilla runs for all seven reference models, matching precision and F1.
pub fn reference_vanilla_runs(round_id: u64) -> Vec<EvalRun> {
    REFERENCE_SERIES
        .iter()
        .enumerate()
        .map(|(i, row)| {
            run_from_matrix(
                i as u64 + 1,
                round_id,
                model_card(row, ModelTag::Vanilla),
                matrix_with(row.precision, row.f1),
            )
        })
        .collect()
}

/// Fine-tuned runs for all seven reference models, matching F1 only.
pub fn reference_finetuned_runs(round_id: u64) -> Vec<EvalRun> {
    REFERENCE_SERIES
        .iter()
        .enumerate()
        .map(|(i, row)| {
            run_from_matrix(
                100 + i as u64,
                round_id,
                model_card(row, ModelTag::Finetuned),
                matrix_with_f1(row.finetuned_f1),
            )
        })
        .collect()
}
