//! Backoff n-gram language models: estimation with Witten-Bell or modified
//! Kneser-Ney smoothing, ARPA serialization, scoring, and perplexity.
//!
//! Models are estimated in interpolated form and stored in backoff form:
//! every seen n-gram keeps its interpolated probability and every context
//! gets the backoff weight that makes its distribution sum to one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lexicon::UNK;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
/// Conventional log10 probability for tokens that can never be predicted.
pub const LOG10_ZERO: f64 = -99.0;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("corpus has no words")]
    EmptyVocabulary,
    #[error("order must be between 1 and 4, got {0}")]
    BadOrder(usize),
    #[error("ARPA {section}: {msg}")]
    Arpa { section: String, msg: String },
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("text to score is empty")]
    EmptyText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    WittenBell,
    KneserNeyMod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub order: usize,
    pub smoothing: Smoothing,
    /// N-grams (order >= 2) seen fewer times are dropped; 1 keeps everything.
    pub prune_min_count: u64,
    /// Count words seen once as `<UNK>`.
    pub unk_singletons: bool,
    /// Minimum unigram probability reserved for `<UNK>`.
    pub unk_floor: Option<f64>,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            order: 4,
            smoothing: Smoothing::WittenBell,
            prune_min_count: 1,
            unk_singletons: true,
            unk_floor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    logp: f64,
    backoff: Option<f64>,
}

/// Decoder-facing LM state: a minimal word-id history.
pub type LmState = Vec<u32>;

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    order: usize,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// `tables[n - 1]` holds the n-grams.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
}

impl NGramLM {
    fn empty(order: usize, vocab: Vec<String>) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { order, vocab, index, tables: vec![HashMap::new(); order] }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn word_id(&self, w: &str) -> Option<u32> {
        self.index.get(w).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.word_id(UNK)
    }

    /// Map a word to its id, falling back to `<UNK>`.
    pub fn lookup(&self, w: &str) -> Option<u32> {
        self.word_id(w).or_else(|| self.unk_id())
    }

    pub fn num_ngrams(&self, n: usize) -> usize {
        self.tables[n - 1].len()
    }

    /// Words that can be predicted (every vocabulary item except `<s>`).
    pub fn predictable(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.vocab.len() as u32).filter(move |&i| self.vocab[i as usize] != BOS)
    }

    /// Uniform unigram model over `words` plus `</s>` and `<UNK>`.
    pub fn uniform<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: BTreeSet<String> = words.into_iter().map(str::to_string).collect();
        set.insert(BOS.into());
        set.insert(EOS.into());
        set.insert(UNK.into());
        let mut lm = Self::empty(1, set.into_iter().collect());
        let v = (lm.vocab.len() - 1) as f64;
        for (i, w) in lm.vocab.iter().enumerate() {
            let logp = if w == BOS { LOG10_ZERO } else { -v.log10() };
            lm.tables[0].insert(vec![i as u32], Entry { logp, backoff: None });
        }
        lm
    }

    /// log10 P(word | history) by the backoff recursion. Histories longer
    /// than `order - 1` are truncated.
    pub fn score_ids(&self, history: &[u32], word: u32) -> f64 {
        let keep = history.len().min(self.order - 1);
        let mut h = &history[history.len() - keep..];
        let mut key: Vec<u32> = Vec::with_capacity(self.order);
        let mut bo = 0.0;
        loop {
            key.clear();
            key.extend_from_slice(h);
            key.push(word);
            if let Some(e) = self.tables[h.len()].get(&key) {
                return bo + e.logp;
            }
            if h.is_empty() {
                return bo + LOG10_ZERO;
            }
            if let Some(b) = self.tables[h.len() - 1].get(h).and_then(|e| e.backoff) {
                bo += b;
            }
            h = &h[1..];
        }
    }

    /// Score a word given a string history; unknown words map to `<UNK>`.
    pub fn score(&self, history: &[&str], word: &str) -> f64 {
        let hist: Vec<u32> = history.iter().filter_map(|w| self.lookup(w)).collect();
        match self.lookup(word) {
            Some(id) => self.score_ids(&hist, id),
            None => LOG10_ZERO,
        }
    }

    fn is_context(&self, h: &[u32]) -> bool {
        self.tables[h.len() - 1].get(h).is_some_and(|e| e.backoff.is_some())
    }

    pub fn initial_state(&self) -> LmState {
        let bos = self.word_id(BOS).expect("LM has <s>");
        if self.order > 1 {
            let (_, s) = self.minimize(vec![bos]);
            s
        } else {
            Vec::new()
        }
    }

    /// Drop leading words that no longer influence future scores. The
    /// returned adjustment carries backoff weights of dropped histories that
    /// every continuation would pay.
    fn minimize(&self, mut h: Vec<u32>) -> (f64, LmState) {
        let mut adj = 0.0;
        while !h.is_empty() && !self.is_context(&h) {
            if let Some(b) = self.tables[h.len() - 1].get(&h).and_then(|e| e.backoff) {
                adj += b;
            }
            h.remove(0);
        }
        (adj, h)
    }

    /// Score `word` from `state` and return the successor state. Equivalent
    /// to scoring with the full history.
    pub fn advance(&self, state: &[u32], word: u32) -> (f64, LmState) {
        let s = self.score_ids(state, word);
        if self.order == 1 {
            return (s, Vec::new());
        }
        let mut h: Vec<u32> = state.to_vec();
        h.push(word);
        if h.len() > self.order - 1 {
            h.remove(0);
        }
        let (adj, next) = self.minimize(h);
        (s + adj, next)
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for n in 1..=self.order {
            let _ = writeln!(out, "ngram {}={}", n, self.tables[n - 1].len());
        }
        for n in 1..=self.order {
            let _ = write!(out, "\n\\{n}-grams:\n");
            let mut rows: Vec<(Vec<&str>, &Entry)> = self.tables[n - 1]
                .iter()
                .map(|(k, e)| (k.iter().map(|&i| self.word(i)).collect(), e))
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            for (words, e) in rows {
                let _ = write!(out, "{}\t{}", e.logp, words.join(" "));
                if let (true, Some(b)) = (n < self.order, e.backoff) {
                    let _ = write!(out, "\t{b}");
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn write_arpa(&self, path: &Path) -> Result<(), LmError> {
        std::fs::write(path, self.to_arpa())
            .map_err(|source| LmError::Io { path: path.display().to_string(), source })
    }

    pub fn read_arpa(path: &Path) -> Result<Self, LmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| LmError::Io { path: path.display().to_string(), source })?;
        Self::parse_arpa(&text)
    }

    pub fn parse_arpa(text: &str) -> Result<Self, LmError> {
        let err = |section: &str, msg: String| LmError::Arpa { section: section.to_string(), msg };
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty()).peekable();
        while let Some(l) = lines.peek() {
            if *l == "\\data\\" {
                break;
            }
            lines.next();
        }
        if lines.next() != Some("\\data\\") {
            return Err(err("\\data\\", "missing header".into()));
        }
        let mut counts = Vec::new();
        while let Some(l) = lines.peek() {
            let Some(rest) = l.strip_prefix("ngram ") else { break };
            let (n, c) = rest
                .split_once('=')
                .ok_or_else(|| err("\\data\\", format!("malformed count line `{l}`")))?;
            let n: usize = n.trim().parse().map_err(|_| err("\\data\\", format!("bad order in `{l}`")))?;
            let c: usize = c.trim().parse().map_err(|_| err("\\data\\", format!("bad count in `{l}`")))?;
            if n != counts.len() + 1 {
                return Err(err("\\data\\", format!("orders out of sequence at `{l}`")));
            }
            counts.push(c);
            lines.next();
        }
        let order = counts.len();
        if !(1..=4).contains(&order) {
            return Err(LmError::BadOrder(order));
        }
        let mut raw: Vec<Vec<(Vec<String>, Entry)>> = Vec::new();
        for n in 1..=order {
            let section = format!("\\{n}-grams:");
            if lines.next() != Some(section.as_str()) {
                return Err(err(&section, "missing or out of order section header".into()));
            }
            let mut rows = Vec::with_capacity(counts[n - 1]);
            while let Some(l) = lines.peek() {
                if l.starts_with('\\') {
                    break;
                }
                let f: Vec<&str> = l.split_whitespace().collect();
                if f.len() != n + 1 && f.len() != n + 2 {
                    return Err(err(&section, format!("expected {n} words in `{l}`")));
                }
                let parse = |s: &str| s.parse::<f64>().map_err(|_| err(&section, format!("bad number `{s}`")));
                let logp = parse(f[0])?;
                let backoff = if f.len() == n + 2 { Some(parse(f[n + 1])?) } else { None };
                rows.push((f[1..=n].iter().map(|s| s.to_string()).collect(), Entry { logp, backoff }));
                lines.next();
            }
            if rows.len() != counts[n - 1] {
                return Err(err(
                    &section,
                    format!("header declares {} entries, found {}", counts[n - 1], rows.len()),
                ));
            }
            raw.push(rows);
        }
        if lines.next() != Some("\\end\\") {
            return Err(err("\\end\\", "missing end marker (truncated file?)".into()));
        }
        let vocab: Vec<String> = {
            let mut v: Vec<String> = raw[0].iter().map(|(w, _)| w[0].clone()).collect();
            v.sort();
            v.dedup();
            v
        };
        if !vocab.iter().any(|w| w == BOS) {
            return Err(err("\\1-grams:", "vocabulary lacks <s>".into()));
        }
        let mut lm = Self::empty(order, vocab);
        for (n, rows) in raw.into_iter().enumerate() {
            for (words, e) in rows {
                let key = words
                    .iter()
                    .map(|w| lm.word_id(w).ok_or_else(|| err(&format!("\\{}-grams:", n + 1), format!("`{w}` not in unigrams"))))
                    .collect::<Result<Vec<u32>, _>>()?;
                lm.tables[n].insert(key, e);
            }
        }
        Ok(lm)
    }
}

/// Raw n-gram counts for a sentence corpus.
#[derive(Debug, Clone)]
pub struct NGramCounts {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// `counts[n - 1]`: n-gram -> count. Ordered so iteration is deterministic.
    counts: Vec<BTreeMap<Vec<u32>, u64>>,
}

impl NGramCounts {
    pub fn collect(sentences: &[Vec<String>], order: usize, unk_singletons: bool) -> Result<Self, LmError> {
        if !(1..=4).contains(&order) {
            return Err(LmError::BadOrder(order));
        }
        if sentences.is_empty() {
            return Err(LmError::EmptyCorpus);
        }
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for s in sentences {
            for w in s {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(LmError::EmptyVocabulary);
        }
        let mapped = |w: &str| -> String {
            if unk_singletons && freq.get(w) == Some(&1) {
                UNK.to_string()
            } else {
                w.to_string()
            }
        };
        let mut vocab: BTreeSet<String> = freq.keys().map(|w| mapped(w)).collect();
        vocab.insert(BOS.into());
        vocab.insert(EOS.into());
        vocab.insert(UNK.into());
        let vocab: Vec<String> = vocab.into_iter().collect();
        let index: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let mut counts = vec![BTreeMap::new(); order];
        for s in sentences {
            let mut ids = vec![index[BOS]];
            ids.extend(s.iter().map(|w| index[&mapped(w)]));
            ids.push(index[EOS]);
            for end in 1..ids.len() {
                for n in 1..=order.min(end + 1) {
                    *counts[n - 1].entry(ids[end + 1 - n..=end].to_vec()).or_insert(0) += 1;
                }
            }
        }
        Ok(Self { vocab, index, counts })
    }

    pub fn count(&self, ngram: &[&str]) -> u64 {
        let key: Option<Vec<u32>> = ngram.iter().map(|w| self.index.get(*w).copied()).collect();
        key.and_then(|k| self.counts[k.len() - 1].get(&k).copied()).unwrap_or(0)
    }

    /// Unsmoothed relative frequency of `word` after `history`.
    pub fn mle(&self, history: &[&str], word: &str) -> f64 {
        let mut full: Vec<&str> = history.to_vec();
        full.push(word);
        let num = self.count(&full) as f64;
        let Some(h): Option<Vec<u32>> = history.iter().map(|w| self.index.get(*w).copied()).collect() else {
            return 0.0;
        };
        let den: u64 = self.counts[h.len()]
            .iter()
            .filter(|(k, _)| k[..h.len()] == h[..])
            .map(|(_, c)| *c)
            .sum();
        if den == 0 {
            0.0
        } else {
            num / den as f64
        }
    }
}

fn kn_discounts(adjusted: impl Iterator<Item = u64>) -> [f64; 3] {
    let mut n = [0u64; 5];
    for c in adjusted {
        if (1..=4).contains(&c) {
            n[c as usize] += 1;
        }
    }
    let (n1, n2, n3, n4) = (n[1] as f64, n[2] as f64, n[3] as f64, n[4] as f64);
    let fallback = [0.5, 1.0, 1.5];
    if n1 == 0.0 || n2 == 0.0 {
        return fallback;
    }
    let y = n1 / (n1 + 2.0 * n2);
    let d1 = 1.0 - 2.0 * y * n2 / n1;
    let d2 = if n2 > 0.0 { 2.0 - 3.0 * y * n3 / n2 } else { fallback[1] };
    let d3 = if n3 > 0.0 { 3.0 - 4.0 * y * n4 / n3 } else { fallback[2] };
    [d1.clamp(0.1, 1.0), d2.clamp(0.1, 2.0), d3.clamp(0.1, 3.0)]
}

fn kn_discount(d: &[f64; 3], c: u64) -> f64 {
    match c {
        0 => 0.0,
        1 => d[0],
        2 => d[1],
        _ => d[2],
    }
}

/// Estimate a backoff n-gram model from sentences of normalized tokens.
pub fn train_ngram(sentences: &[Vec<String>], cfg: &LmConfig) -> Result<NGramLM, LmError> {
    let counts = NGramCounts::collect(sentences, cfg.order, cfg.unk_singletons)?;
    let order = cfg.order;
    let mut lm = NGramLM::empty(order, counts.vocab.clone());
    let bos = counts.index[BOS];
    let v = (counts.vocab.len() - 1) as f64;

    // Adjusted counts: raw at the top order and for <s>-initial n-grams,
    // continuation counts elsewhere (Kneser-Ney only).
    let adjusted: Vec<BTreeMap<Vec<u32>, u64>> = (1..=order)
        .map(|n| {
            let raw = &counts.counts[n - 1];
            if cfg.smoothing == Smoothing::WittenBell || n == order {
                return raw.clone();
            }
            let mut cont: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
            for k in counts.counts[n].keys() {
                *cont.entry(k[1..].to_vec()).or_insert(0) += 1;
            }
            raw.iter()
                .map(|(k, &c)| {
                    let a = if k[0] == bos { c } else { cont.get(k).copied().unwrap_or(0) };
                    (k.clone(), a)
                })
                .collect()
        })
        .collect();

    // Kept n-grams, top-down so that contexts of kept n-grams survive.
    let mut kept: Vec<BTreeSet<Vec<u32>>> = vec![BTreeSet::new(); order];
    for n in (1..=order).rev() {
        let mut set: BTreeSet<Vec<u32>> = counts.counts[n - 1]
            .iter()
            .filter(|(_, &c)| n == 1 || c >= cfg.prune_min_count)
            .map(|(k, _)| k.clone())
            .collect();
        if n < order {
            let prefixes: Vec<Vec<u32>> = kept[n].iter().map(|k| k[..n].to_vec()).collect();
            set.extend(prefixes);
        }
        kept[n - 1] = set;
    }

    // Unigrams.
    let uni = &adjusted[0];
    let total: f64 = uni.iter().filter(|(k, _)| k[0] != bos).map(|(_, &c)| c as f64).sum();
    let mut probs: Vec<f64> = vec![0.0; counts.vocab.len()];
    match cfg.smoothing {
        Smoothing::WittenBell => {
            let types = uni.iter().filter(|(k, &c)| k[0] != bos && c > 0).count() as f64;
            for (i, p) in probs.iter_mut().enumerate() {
                let c = uni.get(&vec![i as u32]).copied().unwrap_or(0) as f64;
                *p = (c + types / v) / (total + types);
            }
        }
        Smoothing::KneserNeyMod => {
            let d = kn_discounts(uni.iter().filter(|(k, _)| k[0] != bos).map(|(_, &c)| c));
            let mut mass = 0.0;
            for (k, &c) in uni.iter().filter(|(k, _)| k[0] != bos) {
                probs[k[0] as usize] = (c as f64 - kn_discount(&d, c)).max(0.0) / total;
                mass += kn_discount(&d, c).min(c as f64);
            }
            let gamma = mass / total;
            probs.iter_mut().for_each(|p| *p += gamma / v);
        }
    }
    probs[bos as usize] = 0.0;
    if let Some(floor) = cfg.unk_floor {
        let unk = counts.index[UNK] as usize;
        if probs[unk] < floor {
            let rest = 1.0 - probs[unk];
            let scale = (1.0 - floor) / rest;
            probs.iter_mut().for_each(|p| *p *= scale);
            probs[unk] = floor;
        }
    }
    for (i, &p) in probs.iter().enumerate() {
        let logp = if i as u32 == bos { LOG10_ZERO } else { p.log10() };
        lm.tables[0].insert(vec![i as u32], Entry { logp, backoff: None });
    }

    // Higher orders, grouped by history (contiguous in key order).
    for n in 2..=order {
        let adj = &adjusted[n - 1];
        let d = kn_discounts(adj.values().copied());
        let mut groups: BTreeMap<&[u32], Vec<(&[u32], u64)>> = BTreeMap::new();
        for (k, &c) in adj {
            groups.entry(&k[..n - 1]).or_default().push((k, c));
        }
        let mut new_entries: Vec<(Vec<u32>, Entry)> = Vec::new();
        let mut backoffs: Vec<(Vec<u32>, f64)> = Vec::new();
        for (h, followers) in groups {
            let denom: f64 = followers.iter().map(|(_, c)| *c as f64).sum();
            if denom == 0.0 {
                continue;
            }
            let gamma = match cfg.smoothing {
                Smoothing::WittenBell => {
                    let t = followers.iter().filter(|(_, c)| *c > 0).count() as f64;
                    t / (denom + t)
                }
                Smoothing::KneserNeyMod => {
                    followers.iter().map(|(_, c)| kn_discount(&d, *c).min(*c as f64)).sum::<f64>() / denom
                }
            };
            let (mut sum_p, mut sum_lower) = (0.0, 0.0);
            for (k, c) in followers {
                if !kept[n - 1].contains(k) {
                    continue;
                }
                let w = k[n - 1];
                let lower = 10f64.powf(lm.score_ids(&h[1..], w));
                let own = match cfg.smoothing {
                    Smoothing::WittenBell => {
                        let t = gamma * denom / (1.0 - gamma);
                        c as f64 / (denom + t)
                    }
                    Smoothing::KneserNeyMod => (c as f64 - kn_discount(&d, c)).max(0.0) / denom,
                };
                let p = own + gamma * lower;
                sum_p += p;
                sum_lower += lower;
                new_entries.push((k.to_vec(), Entry { logp: p.log10(), backoff: None }));
            }
            let num = (1.0 - sum_p).max(0.0);
            let den = 1.0 - sum_lower;
            let bow = if den > 1e-12 && num > 0.0 { (num / den).log10() } else { 0.0 };
            backoffs.push((h.to_vec(), bow));
        }
        for (h, bow) in backoffs {
            if let Some(e) = lm.tables[n - 2].get_mut(&h) {
                e.backoff = Some(bow);
            }
        }
        for (k, e) in new_entries {
            lm.tables[n - 1].insert(k, e);
        }
    }
    Ok(lm)
}

/// Transcript-biased bigram for decoding one long recording, with at least
/// `unk_mass` unigram probability on `<UNK>`.
pub fn biased_lm(transcript: &[Vec<String>], unk_mass: f64) -> Result<NGramLM, LmError> {
    if transcript.iter().all(Vec::is_empty) {
        return Err(LmError::EmptyCorpus);
    }
    let cfg = LmConfig {
        order: 2,
        smoothing: Smoothing::WittenBell,
        prune_min_count: 1,
        unk_singletons: false,
        unk_floor: Some(unk_mass),
    };
    train_ngram(transcript, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub log10_total: f64,
    pub n_tokens: usize,
    pub perplexity: f64,
    pub n_oov: usize,
}

/// Perplexity over sentences, counting `</s>`; OOVs are scored as `<UNK>`
/// (or skipped when the model has no `<UNK>`).
pub fn perplexity(lm: &NGramLM, sentences: &[Vec<String>]) -> Result<PerplexityReport, LmError> {
    let bos = lm.word_id(BOS).expect("LM has <s>");
    let eos = lm.word_id(EOS).expect("LM has </s>");
    let (mut total, mut n_tokens, mut n_oov) = (0.0, 0usize, 0usize);
    for s in sentences {
        let mut hist = vec![bos];
        for w in s {
            let id = match lm.word_id(w) {
                Some(id) if w != UNK => id,
                _ => {
                    n_oov += 1;
                    match lm.unk_id() {
                        Some(u) => u,
                        None => continue,
                    }
                }
            };
            total += lm.score_ids(&hist, id);
            n_tokens += 1;
            hist.push(id);
        }
        total += lm.score_ids(&hist, eos);
        n_tokens += 1;
    }
    if n_tokens == 0 {
        return Err(LmError::EmptyText);
    }
    Ok(PerplexityReport {
        log10_total: total,
        n_tokens,
        perplexity: 10f64.powf(-total / n_tokens as f64),
        n_oov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
    }

    fn context_sum(lm: &NGramLM, hist: &[u32]) -> f64 {
        lm.predictable().map(|w| 10f64.powf(lm.score_ids(hist, w))).sum()
    }

    #[test]
    fn bigram_mle_by_hand() {
        let c = NGramCounts::collect(&sents(&["A B A B A"]), 2, false).unwrap();
        // A->B twice, A-></s> once.
        assert_eq!(c.count(&["A", "B"]), 2);
        assert!((c.mle(&["A"], "B") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.mle(&["A"], "A"), 0.0);
    }

    #[test]
    fn unigram_witten_bell_by_hand() {
        let cfg = LmConfig { order: 1, unk_singletons: false, ..LmConfig::default() };
        let lm = train_ngram(&sents(&["A A A"]), &cfg).unwrap();
        // counts A:3 </s>:1, N=4, T=2, V=3 ({A, </s>, <UNK>})
        let pa = 10f64.powf(lm.score(&[], "A"));
        assert!((pa - (3.0 + 2.0 / 3.0) / 6.0).abs() < 1e-12);
        assert!((context_sum(&lm, &[]) - 1.0).abs() < 1e-12);
        assert!(pa > 10f64.powf(lm.score(&[], UNK)));
    }

    #[test]
    fn normalization_for_every_smoothing_and_order() {
        let corpus = sents(&["A B C A", "B C", "A A B", "C", "D A B C D", "B D"]);
        for smoothing in [Smoothing::WittenBell, Smoothing::KneserNeyMod] {
            for order in 1..=4 {
                for prune in [1, 2] {
                    let cfg = LmConfig { order, smoothing, prune_min_count: prune, unk_singletons: false, unk_floor: None };
                    let lm = train_ngram(&corpus, &cfg).unwrap();
                    let ids: Vec<u32> = (0..lm.vocab().len() as u32).collect();
                    for &a in &ids {
                        for &b in &ids {
                            for h in [vec![], vec![a], vec![a, b]] {
                                let s = context_sum(&lm, &h);
                                assert!((s - 1.0).abs() < 1e-9, "{smoothing:?} n={order} h={h:?} sum={s}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_word_vocabulary_normalizes() {
        for order in 1..=4 {
            let cfg = LmConfig { order, unk_singletons: false, ..LmConfig::default() };
            let lm = train_ngram(&sents(&["A", "A A"]), &cfg).unwrap();
            let a = lm.word_id("A").unwrap();
            assert!((context_sum(&lm, &[a, a, a]) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_errors() {
        assert!(matches!(train_ngram(&[], &LmConfig::default()), Err(LmError::EmptyCorpus)));
        assert!(matches!(train_ngram(&sents(&[""]), &LmConfig::default()), Err(LmError::EmptyVocabulary)));
        let cfg = LmConfig { order: 5, ..LmConfig::default() };
        assert!(matches!(train_ngram(&sents(&["A"]), &cfg), Err(LmError::BadOrder(5))));
    }

    #[test]
    fn singletons_become_unk() {
        let cfg = LmConfig { order: 2, ..LmConfig::default() };
        let lm = train_ngram(&sents(&["A A B"]), &cfg).unwrap();
        assert!(lm.word_id("B").is_none());
        assert_eq!(lm.score(&["A"], "B"), lm.score(&["A"], UNK));
    }

    #[test]
    fn scoring_rules() {
        let lm = train_ngram(&sents(&["A B C D", "A B C D"]), &LmConfig::default()).unwrap();
        assert_eq!(lm.score(&["A"], "ZZZ"), lm.score(&["A"], UNK));
        let uni = lm.score(&[], "C");
        assert_eq!(uni, lm.tables[0][&vec![lm.word_id("C").unwrap()]].logp);
        let key: Vec<u32> = ["A", "B", "C", "D"].iter().map(|w| lm.word_id(w).unwrap()).collect();
        assert_eq!(lm.score(&["A", "B", "C"], "D"), lm.tables[3][&key].logp);
    }

    #[test]
    fn biased_lm_prefers_script() {
        let lm = biased_lm(&sents(&["A B"]), 0.01).unwrap();
        let mut v: Vec<&str> = lm.vocab().iter().map(String::as_str).collect();
        v.sort();
        assert_eq!(v, ["</s>", "<UNK>", "<s>", "A", "B"]);
        assert!(lm.score(&["A"], "B") > lm.score(&["A"], UNK) + 1.0);
        assert!(10f64.powf(lm.score(&[], UNK)) >= 0.01 - 1e-12);
        let a = lm.word_id("A").unwrap();
        assert!((context_sum(&lm, &[a]) - 1.0).abs() < 1e-9);
        assert!(biased_lm(&sents(&[""]), 0.01).is_err());
    }

    #[test]
    fn arpa_fixpoint_and_scores() {
        let lm = train_ngram(&sents(&["A B C", "B C A", "C A B A"]), &LmConfig { order: 3, unk_singletons: false, ..LmConfig::default() }).unwrap();
        let first = lm.to_arpa();
        let back = NGramLM::parse_arpa(&first).unwrap();
        assert_eq!(back.to_arpa(), first);
        for h in [vec![], vec!["A"], vec!["B", "C"], vec!["C", "C"]] {
            for w in ["A", "B", "C", "</s>", "Q"] {
                assert!((lm.score(&h, w) - back.score(&h, w)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn hand_written_arpa() {
        let text = "\\data\\\nngram 1=3\n\n\\1-grams:\n-0.5\tA\n-99\t<s>\n-0.1\t</s>\n\n\\end\\\n";
        let lm = NGramLM::parse_arpa(text).unwrap();
        assert_eq!(lm.score(&[], "A"), -0.5);
        assert_eq!(lm.score(&["A"], "</s>"), -0.1);
    }

    #[test]
    fn arpa_errors_name_sections() {
        let lm = train_ngram(&sents(&["A B"]), &LmConfig { order: 2, unk_singletons: false, ..LmConfig::default() }).unwrap();
        let text = lm.to_arpa();
        let truncated = &text[..text.find("\\end\\").unwrap()];
        let e = NGramLM::parse_arpa(truncated).unwrap_err().to_string();
        assert!(e.contains("\\end\\"), "{e}");
        let bad = text.replacen("ngram 2=", "ngram 2=9", 1);
        let e = NGramLM::parse_arpa(&bad).unwrap_err().to_string();
        assert!(e.contains("2-grams"), "{e}");
        assert!(NGramLM::parse_arpa("garbage").is_err());
    }

    #[test]
    fn perplexity_cases() {
        let certain = "\\data\\\nngram 1=3\nngram 2=2\n\n\\1-grams:\n-99\t<s>\t0\n-0.30103\tA\t0\n-0.30103\t</s>\n\n\\2-grams:\n0\t<s> A\n0\tA </s>\n\n\\end\\\n";
        let lm = NGramLM::parse_arpa(certain).unwrap();
        let r = perplexity(&lm, &sents(&["A"])).unwrap();
        assert!((r.perplexity - 1.0).abs() < 1e-12);

        let uniform = NGramLM::uniform(["A", "B", "C"]);
        let r = perplexity(&uniform, &sents(&["A B", "C"])).unwrap();
        assert!((r.perplexity - 5.0).abs() < 1e-9);
        let r = perplexity(&uniform, &sents(&["Z"])).unwrap();
        assert_eq!(r.n_oov, 1);
        assert!(perplexity(&uniform, &[]).is_err());
    }

    #[test]
    fn advance_matches_full_history_scoring() {
        let lm = train_ngram(&sents(&["A B C D A", "B B C", "D C B A"]), &LmConfig { order: 4, unk_singletons: false, ..LmConfig::default() }).unwrap();
        let bos = lm.word_id(BOS).unwrap();
        let seq: Vec<u32> = ["A", "B", "C", "D", "D", "A", "B", "</s>"].iter().map(|w| lm.word_id(w).unwrap()).collect();
        let mut state = lm.initial_state();
        let mut hist = vec![bos];
        let (mut fast, mut slow) = (0.0, 0.0);
        for &w in &seq {
            let (s, next) = lm.advance(&state, w);
            fast += s;
            slow += lm.score_ids(&hist, w);
            state = next;
            hist.push(w);
        }
        assert!((fast - slow).abs() < 1e-12);
    }
}
