//! The ternary option block and its per-item letter permutations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LETTERS: [char; 3] = ['A', 'B', 'C'];

/// What an option means, independent of the letter it is shown under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Meaning {
    NotNeeded,
    Needed,
    DontKnow,
}

impl Meaning {
    pub const ALL: [Meaning; 3] = [Meaning::NotNeeded, Meaning::Needed, Meaning::DontKnow];

    pub fn text(self) -> &'static str {
        match self {
            Meaning::NotNeeded => "Not needed",
            Meaning::Needed => "Needed",
            Meaning::DontKnow => "Don't know",
        }
    }

    pub fn from_label(needed: bool) -> Self {
        if needed {
            Meaning::Needed
        } else {
            Meaning::NotNeeded
        }
    }

    fn from_text(text: &str) -> Option<Self> {
        Meaning::ALL.into_iter().find(|m| m.text() == text.trim())
    }
}

const PERMUTATIONS: [[Meaning; 3]; 6] = {
    use Meaning::*;
    [
        [NotNeeded, Needed, DontKnow],
        [NotNeeded, DontKnow, Needed],
        [Needed, NotNeeded, DontKnow],
        [Needed, DontKnow, NotNeeded],
        [DontKnow, NotNeeded, Needed],
        [DontKnow, Needed, NotNeeded],
    ]
};

/// Assignment of meanings to letters A, B, C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionPermutation([Meaning; 3]);

impl Default for OptionPermutation {
    fn default() -> Self {
        Self::identity()
    }
}

impl OptionPermutation {
    /// `A. Not needed`, `B. Needed`, `C. Don't know`.
    pub fn identity() -> Self {
        Self(PERMUTATIONS[0])
    }

    /// Uniform draw over all six orderings, keyed by `seed ^ item_id`.
    pub fn for_item(seed: u64, item_id: i64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ item_id as u64);
        Self(PERMUTATIONS[rng.random_range(0..PERMUTATIONS.len())])
    }

    /// Identity when `seed` is `None`, otherwise the seeded per-item draw.
    pub fn resolve(seed: Option<u64>, item_id: i64) -> Self {
        seed.map_or_else(Self::identity, |s| Self::for_item(s, item_id))
    }

    pub fn meanings(&self) -> [Meaning; 3] {
        self.0
    }

    pub fn meaning_of(&self, letter: char) -> Option<Meaning> {
        let idx = LETTERS.iter().position(|l| *l == letter.to_ascii_uppercase())?;
        Some(self.0[idx])
    }

    pub fn letter_of(&self, meaning: Meaning) -> char {
        let idx = self.0.iter().position(|m| *m == meaning).expect("permutation covers all meanings");
        LETTERS[idx]
    }

    /// `"X. <text>"` for the given meaning.
    pub fn line_for(&self, meaning: Meaning) -> String {
        format!("{}. {}", self.letter_of(meaning), meaning.text())
    }

    /// One `"X. <text>"` line per letter.
    pub fn block(&self) -> String {
        LETTERS
            .iter()
            .zip(self.0)
            .map(|(l, m)| format!("{l}. {}", m.text()))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Recover a permutation from text containing a rendered option block.
    pub fn parse_block(text: &str) -> Option<Self> {
        let mut found: [Option<Meaning>; 3] = [None; 3];
        for line in text.lines() {
            let line = line.trim();
            let mut chars = line.chars();
            let (Some(letter), Some('.')) = (chars.next(), chars.next()) else {
                continue;
            };
            let Some(idx) = LETTERS.iter().position(|l| *l == letter) else {
                continue;
            };
            if let Some(m) = Meaning::from_text(chars.as_str()) {
                found[idx] = Some(m);
            }
        }
        let [Some(a), Some(b), Some(c)] = found else {
            return None;
        };
        let candidate = [a, b, c];
        PERMUTATIONS.contains(&candidate).then_some(Self(candidate))
    }
}
