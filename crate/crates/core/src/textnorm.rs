//! Transcript normalization.
//!
//! Normalization runs five ordered steps: uppercase, diacritic folding,
//! expansion of standalone numerals 0..=30 through a language-specific table,
//! punctuation stripping (keeping `-` and `'` only between two letters), and
//! whitespace collapsing. The output is a token sequence that is stable under
//! re-normalization.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

/// Largest numeral the tables may map.
pub const MAX_NUMERAL: u32 = 30;

#[derive(Debug, thiserror::Error)]
pub enum TextNormError {
    #[error("{path}:{line}: malformed numeral line: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{path}:{line}: numeral {value} outside 0..=30")]
    OutOfRange { path: String, line: usize, value: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Word forms for the integers 0..=30 in one language.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NumeralTable {
    entries: BTreeMap<u32, Vec<String>>,
}

impl NumeralTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a mapping; the word is normalized on the way in. Returns `false`
    /// (and inserts nothing) when the key is out of range or the word
    /// normalizes to nothing.
    pub fn insert(&mut self, value: u32, word: &str) -> bool {
        if value > MAX_NUMERAL {
            return false;
        }
        let tokens = normalize(word, &NumeralTable::new()).tokens;
        if tokens.is_empty() {
            return false;
        }
        self.entries.insert(value, tokens);
        true
    }

    pub fn get(&self, value: u32) -> Option<&[String]> {
        self.entries.get(&value).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parse a numeral table: one `<int>\t<word>` pair per line, blank lines ignored.
pub fn parse_numeral_table(text: &str, origin: &str) -> Result<NumeralTable, TextNormError> {
    let mut table = NumeralTable::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, word) = line.split_once('\t').ok_or_else(|| TextNormError::Malformed {
            path: origin.to_string(),
            line: line_no,
            msg: "expected <int><TAB><word>".into(),
        })?;
        let key = key.trim();
        let value: u64 = key.parse().map_err(|_| TextNormError::Malformed {
            path: origin.to_string(),
            line: line_no,
            msg: format!("`{key}` is not a non-negative integer"),
        })?;
        if value > MAX_NUMERAL as u64 {
            return Err(TextNormError::OutOfRange {
                path: origin.to_string(),
                line: line_no,
                value: key.to_string(),
            });
        }
        if !table.insert(value as u32, word) {
            return Err(TextNormError::Malformed {
                path: origin.to_string(),
                line: line_no,
                msg: format!("word `{word}` is empty after normalization"),
            });
        }
    }
    Ok(table)
}

pub fn load_numeral_table(path: &Path) -> Result<NumeralTable, TextNormError> {
    let text = std::fs::read_to_string(path).map_err(|source| TextNormError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_numeral_table(&text, &path.display().to_string())
}

/// Canonical decomposition with all combining marks removed.
pub fn fold_diacritics(text: &str) -> String {
    text.nfd().filter(|c| !is_combining_mark(*c)).collect()
}

/// A numeral token that could not be expanded and was dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroppedNumeral {
    pub token: String,
}

impl fmt::Display for DroppedNumeral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dropped unmappable numeral `{}`", self.token)
    }
}

/// Output of [`normalize`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizedText {
    pub tokens: Vec<String>,
    pub dropped: Vec<DroppedNumeral>,
}

impl NormalizedText {
    pub fn joined(&self) -> String {
        self.tokens.join(" ")
    }
}

fn is_mark(c: char) -> bool {
    c == '-' || c == '\''
}

/// Whether `token` could have been produced by [`normalize`].
pub fn is_normalized_token(token: &str) -> bool {
    let chars: Vec<char> = token.chars().collect();
    if chars.is_empty() {
        return false;
    }
    chars.iter().enumerate().all(|(i, &c)| {
        if c.is_alphabetic() {
            c.to_uppercase().eq(std::iter::once(c)) && !is_combining_mark(c)
        } else if is_mark(c) {
            i > 0 && i + 1 < chars.len() && chars[i - 1].is_alphabetic() && chars[i + 1].is_alphabetic()
        } else {
            false
        }
    })
}

fn strip_punctuation(token: &str) -> String {
    let chars: Vec<char> = token.chars().collect();
    let mut out = String::with_capacity(token.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphabetic() {
            out.push(c);
        } else if is_mark(c)
            && i > 0
            && i + 1 < chars.len()
            && chars[i - 1].is_alphabetic()
            && chars[i + 1].is_alphabetic()
        {
            out.push(c);
        }
    }
    out
}

/// `Some(value)` when the token is a standalone integer, possibly wrapped in
/// punctuation such as `(3)` or `3,`. Values too large for `u64` map to `u64::MAX`.
fn standalone_integer(token: &str) -> Option<u64> {
    let core = token.trim_matches(|c: char| !c.is_alphanumeric());
    if core.is_empty() || !core.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some(core.parse().unwrap_or(u64::MAX))
}

/// Normalize a raw transcript line.
pub fn normalize(raw: &str, numerals: &NumeralTable) -> NormalizedText {
    let upper = raw.to_uppercase();
    let folded = fold_diacritics(&upper);
    // Folding can expose lowercase letters from decompositions of titlecase
    // forms; a second uppercase keeps the output stable.
    let folded = fold_diacritics(&folded.to_uppercase());

    let mut out = NormalizedText::default();
    for token in folded.split_whitespace() {
        if let Some(value) = standalone_integer(token) {
            match u32::try_from(value).ok().and_then(|v| numerals.get(v)) {
                Some(words) => out.tokens.extend(words.iter().cloned()),
                None => out.dropped.push(DroppedNumeral { token: token.to_string() }),
            }
            continue;
        }
        let stripped = strip_punctuation(token);
        if !stripped.is_empty() {
            out.tokens.push(stripped);
        }
    }
    for d in &out.dropped {
        log::warn!("{d}");
    }
    out
}
