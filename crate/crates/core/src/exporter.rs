//! Alpaca-format SFT export with per-record option shuffling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::PreprocessedRecord;
use crate::error::{Error, Result};
use crate::options::{Meaning, OptionPermutation, LETTERS};
use crate::prompt::{render_history, OPTIONS};

pub const CANONICAL_TEMPLATE_VERSION: &str = "instruction-v1";

/// Instruction shipped with the tool. `{options}` receives the shuffled block.
pub const CANONICAL_INSTRUCTION_TEMPLATE: &str = "\
The input is a group-chat history followed by a QUERY line. Decide whether the QUERY \
needs coreference resolution, i.e. whether pronouns or omitted subjects in it must be \
replaced with what they refer to in the history before it can be understood alone. \
Answer with exactly one option line.
{options}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlpacaRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

/// History lines followed by `QUERY: <text>`.
pub fn merge_window(record: &PreprocessedRecord) -> String {
    format!("{}\nQUERY: {}", render_history(&record.cr_window), record.text)
}

fn render_instruction(template: &str, options: &OptionPermutation) -> String {
    if template.contains(OPTIONS) {
        template.replace(OPTIONS, &options.block())
    } else {
        format!("{}\n{}", template.trim_end(), options.block())
    }
}

/// Convert labeled records; the option order of each record is drawn from
/// `(seed, record id)`.
pub fn to_alpaca(records: &[PreprocessedRecord], template: &str, seed: u64) -> Result<Vec<AlpacaRecord>> {
    let unlabeled: Vec<i64> = records
        .iter()
        .filter(|r| r.cr_need_gt.is_none())
        .map(|r| r.id)
        .collect();
    if !unlabeled.is_empty() {
        return Err(Error::Validation(format!(
            "records without cr_need_gt: {unlabeled:?}"
        )));
    }
    Ok(records
        .iter()
        .map(|r| {
            let options = OptionPermutation::for_item(seed, r.id);
            let truth = Meaning::from_label(r.cr_need_gt.expect("checked above"));
            AlpacaRecord {
                instruction: render_instruction(template, &options),
                input: merge_window(r),
                output: options.line_for(truth),
            }
        })
        .collect())
}

/// Recover the boolean label from an emitted record.
pub fn recover_label(record: &AlpacaRecord) -> Option<bool> {
    let options = OptionPermutation::parse_block(&record.instruction)?;
    let (letter, rest) = record.output.split_once(". ")?;
    let mut chars = letter.chars();
    let (Some(l), None) = (chars.next(), chars.next()) else {
        return None;
    };
    let meaning = options.meaning_of(l)?;
    if meaning.text() != rest {
        return None;
    }
    match meaning {
        Meaning::Needed => Some(true),
        Meaning::NotNeeded => Some(false),
        Meaning::DontKnow => None,
    }
}

/// JSON array, pretty-printed, LF line endings, trailing newline.
pub fn to_json_bytes(records: &[AlpacaRecord]) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(records)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Split off `holdout` records chosen by `seed`; both parts keep input order.
pub fn split_holdout(
    records: &[PreprocessedRecord],
    holdout: usize,
    seed: u64,
) -> Result<(Vec<PreprocessedRecord>, Vec<PreprocessedRecord>)> {
    if holdout > records.len() {
        return Err(Error::Validation(format!(
            "holdout {holdout} exceeds {} records",
            records.len()
        )));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut held = vec![false; records.len()];
    for &i in &idx[..holdout] {
        held[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, h) in records.iter().zip(held) {
        if h { test.push(r.clone()) } else { train.push(r.clone()) }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportCounts {
    pub total: usize,
    pub needed: usize,
    pub not_needed: usize,
    pub train: usize,
    pub holdout: usize,
    /// How often the correct answer sits under A, B and C.
    pub answer_letters: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportMetadata {
    pub round_id: u64,
    pub seed: u64,
    pub template_sha256: String,
    pub template_version: Option<String>,
    pub counts: ExportCounts,
    /// File names inside the export directory.
    pub train_path: PathBuf,
    pub holdout_path: Option<PathBuf>,
}

pub fn template_hash(template: &str) -> String {
    hex::encode(Sha256::digest(template.as_bytes()))
}

/// Which letter the correct answer occupies in each record.
pub fn answer_letter_counts(records: &[AlpacaRecord]) -> [usize; 3] {
    let mut counts = [0; 3];
    for r in records {
        if let Some(i) = r.output.chars().next().and_then(|c| LETTERS.iter().position(|l| *l == c)) {
            counts[i] += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy)]
pub struct ExportOptions<'a> {
    pub round_id: u64,
    pub template: &'a str,
    pub template_version: Option<&'a str>,
    pub seed: u64,
    pub holdout: Option<usize>,
}

/// Write `<stem>.json`, optional `<stem>.holdout.json`, and `<stem>.meta.json`.
pub fn write_export(
    dir: &Path,
    stem: &str,
    records: &[PreprocessedRecord],
    options: &ExportOptions<'_>,
) -> Result<ExportMetadata> {
    let ExportOptions { round_id, template, template_version, seed, holdout } = *options;
    let (train, test) = split_holdout(records, holdout.unwrap_or(0), seed)?;
    let train_alpaca = to_alpaca(&train, template, seed)?;
    let test_alpaca = to_alpaca(&test, template, seed)?;

    std::fs::create_dir_all(dir)?;
    let train_path = PathBuf::from(format!("{stem}.json"));
    crate::annotation::write_atomic(&dir.join(&train_path), &to_json_bytes(&train_alpaca)?)?;
    let holdout_path = match holdout {
        Some(_) => {
            let p = PathBuf::from(format!("{stem}.holdout.json"));
            crate::annotation::write_atomic(&dir.join(&p), &to_json_bytes(&test_alpaca)?)?;
            Some(p)
        }
        None => None,
    };

    let needed = records.iter().filter(|r| r.cr_need_gt == Some(true)).count();
    let meta = ExportMetadata {
        round_id,
        seed,
        template_sha256: template_hash(template),
        template_version: template_version.map(str::to_owned),
        counts: ExportCounts {
            total: records.len(),
            needed,
            not_needed: records.len() - needed,
            train: train.len(),
            holdout: test.len(),
            answer_letters: answer_letter_counts(&train_alpaca),
        },
        train_path,
        holdout_path,
    };
    let mut bytes = serde_json::to_vec_pretty(&meta)?;
    bytes.push(b'\n');
    crate::annotation::write_atomic(&dir.join(format!("{stem}.meta.json")), &bytes)?;
    Ok(meta)
}
