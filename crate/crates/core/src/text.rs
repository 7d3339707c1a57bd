//! Text normalization and tokenization shared by the sparse and dense paths.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TokenizerMode {
    UnicodeWords,
    CharNgram { n: usize },
}

/// Coarse Unicode category classes that `preprocess` can strip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CategoryClass {
    /// P*
    Punctuation,
    /// S*
    Symbol,
    /// M*
    Mark,
    /// N*
    Number,
    /// Cc, Cf, Co, Cn, Cs (whitespace control characters are never stripped)
    Other,
}

impl CategoryClass {
    fn of(c: char) -> Option<CategoryClass> {
        use GeneralCategory::*;
        Some(match get_general_category(c) {
            ConnectorPunctuation | DashPunctuation | OpenPunctuation | ClosePunctuation
            | InitialPunctuation | FinalPunctuation | OtherPunctuation => Self::Punctuation,
            MathSymbol | CurrencySymbol | ModifierSymbol | OtherSymbol => Self::Symbol,
            NonspacingMark | SpacingMark | EnclosingMark => Self::Mark,
            DecimalNumber | LetterNumber | OtherNumber => Self::Number,
            Control | Format | PrivateUse | Surrogate | Unassigned => Self::Other,
            _ => return None,
        })
    }

    pub fn parse(s: &str) -> Option<CategoryClass> {
        match s.trim() {
            "P" | "punctuation" => Some(Self::Punctuation),
            "S" | "symbol" => Some(Self::Symbol),
            "M" | "mark" => Some(Self::Mark),
            "N" | "number" => Some(Self::Number),
            "C" | "other" => Some(Self::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub mode: TokenizerMode,
    pub lowercase: bool,
    pub stopwords: BTreeSet<String>,
    pub strip: BTreeSet<CategoryClass>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::UnicodeWords,
            lowercase: true,
            stopwords: BTreeSet::new(),
            strip: [CategoryClass::Punctuation, CategoryClass::Symbol]
                .into_iter()
                .collect(),
        }
    }
}

impl TokenizerConfig {
    /// Character bigrams, the default for Japanese text.
    pub fn char_bigrams() -> Self {
        Self {
            mode: TokenizerMode::CharNgram { n: 2 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TokenizerMode::CharNgram { n } = self.mode {
            if !(2..=4).contains(&n) {
                return Err(Error::Config(format!("char n-gram size {n} outside 2..=4")));
            }
        }
        Ok(())
    }

    /// Replaces the stopword list, lowercasing entries when `lowercase` is set.
    pub fn with_stopwords<I, S>(mut self, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.stopwords = words
            .into_iter()
            .map(|w| {
                let w = w.as_ref().trim();
                if self.lowercase {
                    w.to_lowercase()
                } else {
                    w.to_string()
                }
            })
            .filter(|w| !w.is_empty())
            .collect();
        self
    }

    /// Loads a one-token-per-line stopword file.
    pub fn load_stopwords(self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(self.with_stopwords(text.lines()))
    }
}

/// NFKC-normalizes, strips the configured categories, optionally lowercases,
/// collapses whitespace runs to one space and trims.
pub fn preprocess(text: &str, cfg: &TokenizerConfig) -> String {
    let mut s: String = text.nfkc().collect();
    if cfg.lowercase {
        s = s.to_lowercase();
    }
    let stripped: String = s
        .chars()
        .filter(|&c| {
            c.is_whitespace() || CategoryClass::of(c).is_none_or(|cat| !cfg.strip.contains(&cat))
        })
        .collect();
    // stripping can leave a combining sequence that NFKC now composes
    let renormalized: String = stripped.nfkc().collect();
    let mut out = String::with_capacity(renormalized.len());
    for word in renormalized.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Splits preprocessed text into tokens according to `cfg.mode`.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    match cfg.mode {
        TokenizerMode::UnicodeWords => text
            .unicode_words()
            .filter(|w| !cfg.stopwords.contains(*w))
            .map(str::to_string)
            .collect(),
        TokenizerMode::CharNgram { n } => {
            let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
            chars.windows(n).map(|w| w.iter().collect()).collect()
        }
    }
}

/// `tokenize(preprocess(text))`.
pub fn analyze(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    tokenize(&preprocess(text, cfg), cfg)
}
