//! Frequency wordlists and Unicode graphemic lexicons.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::textnorm::is_normalized_token;

/// Silence phone.
pub const SIL: &str = "SIL";
/// Garbage phone that `<UNK>` is pronounced with.
pub const SPN: &str = "SPN";
pub const UNK: &str = "<UNK>";

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot build a lexicon from an empty wordlist")]
    EmptyWordlist,
}

/// Words with corpus frequencies, ordered by descending count then word.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Wordlist {
    entries: Vec<(String, u64)>,
}

impl Wordlist {
    fn from_counts(counts: BTreeMap<String, u64>) -> Self {
        let mut entries: Vec<(String, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, word: &str) -> Option<u64> {
        self.entries.iter().find(|(w, _)| w == word).map(|(_, c)| *c)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(w, c)| format!("{w}\t{c}\n")).collect()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, LexiconError> {
        let mut counts = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: &str| LexiconError::Parse { path: origin.into(), line: idx + 1, msg: msg.into() };
            let (w, c) = line.split_once('\t').ok_or_else(|| perr("expected WORD<TAB>COUNT"))?;
            let c: u64 = c.trim().parse().map_err(|_| perr("count is not an integer"))?;
            if c == 0 || !is_normalized_token(w) {
                return Err(perr("invalid word or zero count"));
            }
            counts.insert(w.to_string(), c);
        }
        Ok(Self::from_counts(counts))
    }
}

/// Count normalized tokens and keep words seen at least `min_count` times.
pub fn build_wordlist<'a, I>(tokens: I, min_count: u64) -> Wordlist
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in tokens {
        *counts.entry(t.to_string()).or_default() += 1;
    }
    counts.retain(|_, c| *c >= min_count);
    Wordlist::from_counts(counts)
}

/// Add dictionary words; words missing from the corpus get frequency 1.
pub fn supplement(wl: &Wordlist, extra_words: &[String]) -> Wordlist {
    let mut counts: BTreeMap<String, u64> = wl.entries.iter().cloned().collect();
    for w in extra_words {
        counts.entry(w.clone()).or_insert(1);
    }
    Wordlist::from_counts(counts)
}

/// Word to grapheme-sequence pronunciations, plus the `<UNK>` special.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    prons: BTreeMap<String, Vec<String>>,
    graphemes: BTreeSet<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedWord {
    pub word: String,
    pub reason: String,
}

fn graphemes_of(word: &str) -> Vec<String> {
    word.chars().filter(|&c| c != '-' && c != '\'').map(String::from).collect()
}

impl Lexicon {
    /// A lexicon holding only the specials.
    pub fn new() -> Self {
        let mut prons = BTreeMap::new();
        prons.insert(UNK.to_string(), vec![SPN.to_string()]);
        Self { prons, graphemes: BTreeSet::new() }
    }

    /// Add a word with its graphemic pronunciation. Fails for words whose
    /// pronunciation would be empty.
    pub fn add_word(&mut self, word: &str) -> Result<(), RejectedWord> {
        if word == UNK {
            return Ok(());
        }
        let pron = graphemes_of(word);
        if pron.is_empty() {
            return Err(RejectedWord { word: word.into(), reason: "empty pronunciation".into() });
        }
        if pron.iter().any(|g| g == SIL || g == SPN) {
            return Err(RejectedWord { word: word.into(), reason: "collides with a special phone".into() });
        }
        self.graphemes.extend(pron.iter().cloned());
        self.prons.insert(word.to_string(), pron);
        Ok(())
    }

    pub fn pronunciation(&self, word: &str) -> Option<&[String]> {
        self.prons.get(word).map(Vec::as_slice)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.prons.contains_key(word)
    }

    /// Words including `<UNK>`, sorted.
    pub fn words(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.prons.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.prons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prons.len() <= 1
    }

    /// Observed graphemes, without the special phones.
    pub fn graphemes(&self) -> &BTreeSet<String> {
        &self.graphemes
    }

    /// Full phone inventory: graphemes plus `SIL` and `SPN`.
    pub fn inventory(&self) -> BTreeSet<String> {
        let mut inv = self.graphemes.clone();
        inv.insert(SIL.into());
        inv.insert(SPN.into());
        inv
    }

    pub fn to_text(&self) -> String {
        self.prons.iter().map(|(w, p)| format!("{w}\t{}\n", p.join(" "))).collect()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, LexiconError> {
        let mut lex = Lexicon::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: &str| LexiconError::Parse { path: origin.into(), line: idx + 1, msg: msg.into() };
            let (w, p) = line.split_once('\t').ok_or_else(|| perr("expected WORD<TAB>PRON"))?;
            let pron: Vec<String> = p.split_whitespace().map(str::to_string).collect();
            if pron.is_empty() {
                return Err(perr("empty pronunciation"));
            }
            if w == UNK {
                continue;
            }
            for g in &pron {
                if g != SIL && g != SPN {
                    lex.graphemes.insert(g.clone());
                }
            }
            lex.prons.insert(w.to_string(), pron);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| LexiconError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Build a graphemic lexicon; words with empty pronunciations are reported
/// and left out.
pub fn graphemic_lexicon(wl: &Wordlist) -> Result<(Lexicon, Vec<RejectedWord>), LexiconError> {
    if wl.is_empty() {
        return Err(LexiconError::EmptyWordlist);
    }
    let mut lex = Lexicon::new();
    let mut rejected = Vec::new();
    for (w, _) in wl.entries() {
        if let Err(r) = lex.add_word(w) {
            log::warn!("lexicon: rejected `{}`: {}", r.word, r.reason);
            rejected.push(r);
        }
    }
    Ok((lex, rejected))
}

/// Token-weighted out-of-vocabulary rate.
pub fn oov_rate<'a, I>(lex: &Lexicon, tokens: I) -> f64
where
    I: IntoIterator<Item = &'a str>,
{
    let (mut total, mut oov) = (0usize, 0usize);
    for t in tokens {
        total += 1;
        if t == UNK || !lex.contains(t) {
            oov += 1;
        }
    }
    if total == 0 {
        log::warn!("oov_rate: empty token stream, reporting 0");
        return 0.0;
    }
    oov as f64 / total as f64
}
