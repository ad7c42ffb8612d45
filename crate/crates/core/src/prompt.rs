//! Prompt templates with `{history}`, `{query}` and `{options}` placeholders.

use crate::corpus::{PreprocessedRecord, WindowEntry};
use crate::error::{Error, Result};
use crate::options::OptionPermutation;

pub const HISTORY: &str = "{history}";
pub const QUERY: &str = "{query}";
pub const OPTIONS: &str = "{options}";

pub const NO_HISTORY: &str = "(no history)";

/// Default resolution prompt for a new annotation round.
pub const DEFAULT_RESOLUTION_TEMPLATE: &str = "\
You are reading a group chat. Decide whether the last message needs coreference \
resolution (replacing pronouns or omitted subjects with what they refer to in the history) \
before it can be understood on its own.

Chat history:
{history}

Message:
{query}

Options:
{options}

Reply with exactly one option line.";

pub const SCORING_TEMPLATE_VERSION: &str = "score-v1";

/// Asks a scoring endpoint for a 0-10 question score.
pub const SCORING_TEMPLATE: &str = "\
Rate from 0 to 10 how likely the following group-chat message is a question \
seeking help, where 0 means certainly not a question and 10 means certainly a question. \
Reply with the integer only.

Message:
{query}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    /// Fails unless all three placeholders are present.
    pub fn parse(template: &str) -> Result<Self> {
        let missing: Vec<&str> = [HISTORY, QUERY, OPTIONS]
            .into_iter()
            .filter(|p| !template.contains(p))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Template(format!(
                "template is missing placeholder(s) {}",
                missing.join(", ")
            )));
        }
        Ok(Self(template.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn render(&self, record: &PreprocessedRecord, options: &OptionPermutation) -> String {
        self.0
            .replace(HISTORY, &render_history(&record.cr_window))
            .replace(QUERY, &record.text)
            .replace(OPTIONS, &options.block())
    }
}

/// One `"sender: text"` line per window entry, or `(no history)`.
pub fn render_history(window: &[WindowEntry]) -> String {
    if window.is_empty() {
        return NO_HISTORY.to_owned();
    }
    window
        .iter()
        .map(|m| format!("{}: {}", m.sender, m.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_scoring_prompt(record: &PreprocessedRecord) -> String {
    SCORING_TEMPLATE.replace(QUERY, &record.text)
}
