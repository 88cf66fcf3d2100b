//! Transcript graphs and Viterbi forced alignment.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AcousticModel, Ctx};
use crate::features::FeatureMatrix;
use crate::lexicon::{Lexicon, UNK};

const LN_HALF: f64 = -std::f64::consts::LN_2;
const NO_PRED: u8 = u8::MAX;

/// Features paired with the word sequence they should align to.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignInput {
    pub id: String,
    pub feats: FeatureMatrix,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignOptions {
    /// Paths scoring more than this below the frame's best are dropped.
    pub beam: f64,
    /// Align words missing from the lexicon as `<UNK>` instead of failing.
    pub map_oov: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self { beam: 500.0, map_oov: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignFailureReason {
    BeamPruned,
    TooShort,
    Oov,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignFailure {
    pub reason: AlignFailureReason,
    pub detail: String,
}

impl fmt::Display for AlignFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.reason, self.detail)
    }
}

impl std::error::Error for AlignFailure {}

/// A phone occurrence on the best path, frames `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneSpan {
    pub phone: usize,
    pub left: Ctx,
    pub right: Ctx,
    /// Index into the transcript; `None` for silence.
    pub word: Option<usize>,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSpan {
    pub word: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    /// Model state per frame.
    pub states: Vec<usize>,
    /// Whether the frame entered its state (as opposed to a self-loop).
    pub entered: Vec<bool>,
    pub phones: Vec<PhoneSpan>,
    pub words: Vec<WordSpan>,
    pub log_likelihood: f64,
    pub frame_shift: f64,
    pub(crate) nodes: Vec<usize>,
}

impl AlignmentPath {
    pub fn n_frames(&self) -> usize {
        self.states.len()
    }
}

#[derive(Debug, Clone)]
struct PhoneInst {
    phone: usize,
    left: Ctx,
    right: Ctx,
    word: Option<usize>,
}

/// Left-to-right transcript graph: optional silence at both ends and
/// between words, every arc pointing to a higher node index.
#[derive(Debug, Clone)]
pub(crate) struct Graph {
    pub states: Vec<usize>,
    node_inst: Vec<usize>,
    insts: Vec<PhoneInst>,
    /// Incoming arcs from other nodes, sorted by source: (source, weight
    /// excluding the source's exit probability).
    pub preds: Vec<Vec<(usize, f64)>>,
    pub start: Vec<(usize, f64)>,
    pub finals: Vec<(usize, f64)>,
    words: Vec<String>,
    sil_units: Vec<(usize, usize)>,
    word_units: Vec<(usize, usize)>,
    pub min_frames: usize,
}

pub(crate) fn build_graph(
    model: &AcousticModel,
    lex: &Lexicon,
    words: &[String],
    map_oov: bool,
) -> Result<Graph, AlignFailure> {
    let oov = |w: &str| AlignFailure { reason: AlignFailureReason::Oov, detail: format!("`{w}` not coverable") };
    let mut g = Graph {
        states: Vec::new(),
        node_inst: Vec::new(),
        insts: Vec::new(),
        preds: Vec::new(),
        start: Vec::new(),
        finals: Vec::new(),
        words: words.to_vec(),
        sil_units: Vec::new(),
        word_units: Vec::new(),
        min_frames: 0,
    };
    let push_inst = |g: &mut Graph, inst: PhoneInst| -> (usize, usize) {
        let states = model.states_for(inst.phone, inst.left, inst.right).to_vec();
        let first = g.states.len();
        let idx = g.insts.len();
        g.insts.push(inst);
        for (k, s) in states.into_iter().enumerate() {
            let node = g.states.len();
            g.states.push(s);
            g.node_inst.push(idx);
            g.preds.push(if k == 0 { Vec::new() } else { vec![(node - 1, 0.0)] });
        }
        (first, g.states.len() - 1)
    };
    let sil = model.sil();
    let sil_unit = |g: &mut Graph| push_inst(g, PhoneInst { phone: sil, left: None, right: None, word: None });
    for (k, w) in words.iter().enumerate() {
        let key = if lex.contains(w) {
            w.as_str()
        } else if map_oov {
            UNK
        } else {
            return Err(oov(w));
        };
        let phones = model.word_phones(lex, key).ok_or_else(|| oov(w))?;
        if phones.is_empty() {
            return Err(oov(w));
        }
        let s = sil_unit(&mut g);
        g.sil_units.push(s);
        let mut first = usize::MAX;
        let mut last = 0;
        for (i, &p) in phones.iter().enumerate() {
            let left = if i == 0 { None } else { Some(phones[i - 1]) };
            let right = phones.get(i + 1).copied();
            let (f, l) = push_inst(&mut g, PhoneInst { phone: p, left, right, word: Some(k) });
            if i == 0 {
                first = f;
            } else {
                g.preds[f].push((last, 0.0));
            }
            last = l;
        }
        g.word_units.push((first, last));
    }
    let s = sil_unit(&mut g);
    g.sil_units.push(s);

    let n = words.len();
    if n == 0 {
        g.start.push((g.sil_units[0].0, 0.0));
        g.finals.push((g.sil_units[0].1, 0.0));
        g.min_frames = g.sil_units[0].1 - g.sil_units[0].0 + 1;
        return Ok(g);
    }
    g.start.push((g.sil_units[0].0, LN_HALF));
    g.start.push((g.word_units[0].0, LN_HALF));
    for k in 0..n {
        let (wf, wl) = g.word_units[k];
        let (_, sl) = g.sil_units[k];
        g.preds[wf].push((sl, 0.0));
        let (nf, _) = g.sil_units[k + 1];
        g.preds[nf].push((wl, LN_HALF));
        if k + 1 < n {
            g.preds[g.word_units[k + 1].0].push((wl, LN_HALF));
        } else {
            g.finals.push((wl, LN_HALF));
        }
    }
    g.finals.push((g.sil_units[n].1, 0.0));
    for p in &mut g.preds {
        p.sort_by_key(|a| a.0);
    }
    g.finals.sort_by_key(|a| a.0);
    g.min_frames = g.word_units.iter().map(|(f, l)| l - f + 1).sum();
    Ok(g)
}

/// Emission log-likelihoods for the distinct states of a graph.
struct Emissions {
    local: Vec<usize>,
    n_local: usize,
    table: Vec<f64>,
}

impl Emissions {
    fn new(model: &AcousticModel, g: &Graph, feats: &FeatureMatrix) -> Self {
        let mut index: HashMap<usize, usize> = HashMap::new();
        let mut distinct = Vec::new();
        let local = g
            .states
            .iter()
            .map(|s| {
                *index.entry(*s).or_insert_with(|| {
                    distinct.push(*s);
                    distinct.len() - 1
                })
            })
            .collect();
        let n_local = distinct.len();
        let mut table = Vec::with_capacity(feats.n_frames() * n_local);
        for x in feats.rows() {
            table.extend(distinct.iter().map(|&s| model.state_loglike(s, x)));
        }
        Self { local, n_local, table }
    }

    fn get(&self, t: usize, node: usize) -> f64 {
        self.table[t * self.n_local + self.local[node]]
    }
}

fn viterbi(model: &AcousticModel, g: &Graph, feats: &FeatureMatrix, beam: f64) -> Option<(Vec<usize>, f64)> {
    let n = g.states.len();
    let t_max = feats.n_frames();
    if t_max == 0 {
        return None;
    }
    let emit = Emissions::new(model, g, feats);
    let log_self: Vec<f64> = g.states.iter().map(|&s| model.states[s].log_self()).collect();
    let log_exit: Vec<f64> = g.states.iter().map(|&s| model.states[s].log_exit()).collect();
    // Highest node reachable in one step from any node <= i.
    let mut reach = vec![0usize; n];
    for (j, preds) in g.preds.iter().enumerate() {
        for &(p, _) in preds {
            reach[p] = reach[p].max(j);
        }
    }
    for i in 0..n {
        reach[i] = reach[i].max(i);
        if i > 0 {
            reach[i] = reach[i].max(reach[i - 1]);
        }
    }

    let neg = f64::NEG_INFINITY;
    let mut prev = vec![neg; n];
    let mut cur = vec![neg; n];
    let mut bp = vec![NO_PRED; t_max * n];
    for &(j, w) in &g.start {
        prev[j] = prev[j].max(w + emit.get(0, j));
    }
    let prune = |v: &mut [f64]| -> Option<(usize, usize)> {
        let best = v.iter().copied().fold(neg, f64::max);
        if best == neg {
            return None;
        }
        let (mut lo, mut hi) = (usize::MAX, 0);
        for (j, x) in v.iter_mut().enumerate() {
            if *x < best - beam {
                *x = neg;
            } else if *x > neg {
                lo = lo.min(j);
                hi = hi.max(j);
            }
        }
        Some((lo, hi))
    };
    let (mut lo, mut hi) = prune(&mut prev)?;
    for t in 1..t_max {
        cur[lo..=reach[hi]].fill(neg);
        for j in lo..=reach[hi] {
            let mut best = prev[j] + log_self[j];
            let mut code = 0u8;
            for (k, &(p, w)) in g.preds[j].iter().enumerate() {
                if p < lo || p > hi {
                    continue;
                }
                let s = prev[p] + log_exit[p] + w;
                if s > best {
                    best = s;
                    code = k as u8 + 1;
                }
            }
            if best > neg {
                cur[j] = best + emit.get(t, j);
                bp[t * n + j] = code;
            }
        }
        let next_hi = reach[hi];
        prev[lo..=next_hi].copy_from_slice(&cur[lo..=next_hi]);
        let (l, h) = prune(&mut prev[lo..=next_hi]).map(|(a, b)| (a + lo, b + lo))?;
        lo = l;
        hi = h;
    }
    let mut best: Option<(f64, usize)> = None;
    for &(j, w) in &g.finals {
        let s = prev[j] + log_exit[j] + w;
        if s > neg && best.is_none_or(|(b, _)| s > b) {
            best = Some((s, j));
        }
    }
    let (score, mut j) = best?;
    let mut nodes = vec![0; t_max];
    for t in (0..t_max).rev() {
        nodes[t] = j;
        if t > 0 {
            let code = bp[t * n + j];
            if code != 0 {
                j = g.preds[j][code as usize - 1].0;
            }
        }
    }
    Some((nodes, score))
}

/// Total log-likelihood of a node path, computed directly from the model.
pub(crate) fn path_score(model: &AcousticModel, g: &Graph, feats: &FeatureMatrix, nodes: &[usize]) -> f64 {
    let neg = f64::NEG_INFINITY;
    let Some(&first) = nodes.first() else { return neg };
    let Some(&(_, w0)) = g.start.iter().find(|(j, _)| *j == first) else { return neg };
    let mut s = w0 + model.state_loglike(g.states[first], feats.row(0));
    for t in 1..nodes.len() {
        let (a, b) = (nodes[t - 1], nodes[t]);
        let st = &model.states[g.states[a]];
        if a == b {
            s += st.log_self();
        } else {
            match g.preds[b].iter().find(|(p, _)| *p == a) {
                Some(&(_, w)) => s += st.log_exit() + w,
                None => return neg,
            }
        }
        s += model.state_loglike(g.states[b], feats.row(t));
    }
    let last = *nodes.last().unwrap();
    match g.finals.iter().find(|(j, _)| *j == last) {
        Some(&(_, w)) => s + model.states[g.states[last]].log_exit() + w,
        None => neg,
    }
}

fn make_path(g: &Graph, nodes: Vec<usize>, log_likelihood: f64, frame_shift: f64) -> AlignmentPath {
    let states: Vec<usize> = nodes.iter().map(|&j| g.states[j]).collect();
    let entered: Vec<bool> = (0..nodes.len()).map(|t| t == 0 || nodes[t] != nodes[t - 1]).collect();
    let mut phones: Vec<PhoneSpan> = Vec::new();
    for (t, &j) in nodes.iter().enumerate() {
        let inst_idx = g.node_inst[j];
        match phones.last_mut() {
            Some(last) if g.node_inst[nodes[t - 1]] == inst_idx => last.end = t + 1,
            _ => {
                let inst = &g.insts[inst_idx];
                phones.push(PhoneSpan {
                    phone: inst.phone,
                    left: inst.left,
                    right: inst.right,
                    word: inst.word,
                    start: t,
                    end: t + 1,
                });
            }
        }
    }
    let mut words: Vec<WordSpan> = Vec::new();
    let mut last_word: Option<usize> = None;
    for p in &phones {
        let Some(k) = p.word else {
            last_word = None;
            continue;
        };
        if last_word == Some(k) {
            let w = words.last_mut().unwrap();
            w.end_frame = p.end;
            w.end = p.end as f64 * frame_shift;
        } else {
            words.push(WordSpan {
                word: g.words[k].clone(),
                start_frame: p.start,
                end_frame: p.end,
                start: p.start as f64 * frame_shift,
                end: p.end as f64 * frame_shift,
            });
        }
        last_word = Some(k);
    }
    AlignmentPath { states, entered, phones, words, log_likelihood, frame_shift, nodes }
}

fn too_short(t: usize, need: usize) -> AlignFailure {
    AlignFailure { reason: AlignFailureReason::TooShort, detail: format!("{t} frames, path needs {need}") }
}

/// Viterbi forced alignment of `words` to `feats`.
pub fn force_align(
    model: &AcousticModel,
    lex: &Lexicon,
    feats: &FeatureMatrix,
    words: &[String],
    opts: &AlignOptions,
) -> Result<AlignmentPath, AlignFailure> {
    assert_eq!(feats.dim(), model.dim(), "feature dimension mismatch");
    let g = build_graph(model, lex, words, opts.map_oov)?;
    force_align_graph(model, &g, feats, opts.beam)
}

pub(crate) fn force_align_graph(
    model: &AcousticModel,
    g: &Graph,
    feats: &FeatureMatrix,
    beam: f64,
) -> Result<AlignmentPath, AlignFailure> {
    if feats.n_frames() < g.min_frames {
        return Err(too_short(feats.n_frames(), g.min_frames));
    }
    match viterbi(model, g, feats, beam) {
        Some((nodes, score)) => Ok(make_path(g, nodes, score, feats.frame_shift)),
        None => Err(AlignFailure {
            reason: AlignFailureReason::BeamPruned,
            detail: format!("no path survived beam {beam}"),
        }),
    }
}

/// Uniform segmentation over `[SIL] words [SIL]` (silences dropped when the
/// utterance is too short for them).
pub(crate) fn equal_alignment_graph(
    model: &AcousticModel,
    g: &Graph,
    feats: &FeatureMatrix,
) -> Result<AlignmentPath, AlignFailure> {
    let t_max = feats.n_frames();
    let range = |(a, b): (usize, usize)| a..=b;
    let words: Vec<usize> = g.word_units.iter().flat_map(|&u| range(u)).collect();
    let n_sil = g.sil_units.len();
    let seq: Vec<usize> = if words.is_empty() {
        range(g.sil_units[0]).collect()
    } else {
        let with_sil: Vec<usize> =
            range(g.sil_units[0]).chain(words.iter().copied()).chain(range(g.sil_units[n_sil - 1])).collect();
        if with_sil.len() <= t_max {
            with_sil
        } else {
            words
        }
    };
    if seq.len() > t_max {
        return Err(too_short(t_max, seq.len()));
    }
    let k = seq.len();
    let nodes: Vec<usize> = (0..t_max).map(|t| seq[t * k / t_max]).collect();
    let score = path_score(model, g, feats, &nodes);
    Ok(make_path(g, nodes, score, feats.frame_shift))
}

pub fn equal_alignment(
    model: &AcousticModel,
    lex: &Lexicon,
    feats: &FeatureMatrix,
    words: &[String],
    map_oov: bool,
) -> Result<AlignmentPath, AlignFailure> {
    let g = build_graph(model, lex, words, map_oov)?;
    equal_alignment_graph(model, &g, feats)
}

/// Re-score an existing alignment under (possibly different) model
/// parameters with the same state layout.
pub fn score_path(
    model: &AcousticModel,
    lex: &Lexicon,
    feats: &FeatureMatrix,
    words: &[String],
    path: &AlignmentPath,
) -> f64 {
    match build_graph(model, lex, words, true) {
        Ok(g) => path_score(model, &g, feats, &path.nodes),
        Err(_) => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone)]
pub struct CorpusAlignment {
    pub results: Vec<Result<AlignmentPath, AlignFailure>>,
    pub success_rate: f64,
}

impl CorpusAlignment {
    pub fn failures(&self) -> std::collections::BTreeMap<AlignFailureReason, usize> {
        let mut m = std::collections::BTreeMap::new();
        for r in &self.results {
            if let Err(e) = r {
                *m.entry(e.reason).or_insert(0) += 1;
            }
        }
        m
    }
}

/// Align every utterance (in parallel) and report the fraction that aligned.
pub fn align_corpus(model: &AcousticModel, lex: &Lexicon, utts: &[AlignInput], opts: &AlignOptions) -> CorpusAlignment {
    let results: Vec<Result<AlignmentPath, AlignFailure>> =
        utts.par_iter().map(|u| force_align(model, lex, &u.feats, &u.words, opts)).collect();
    let success_rate = if results.is_empty() {
        log::warn!("align_corpus: empty corpus, success rate reported as 0");
        0.0
    } else {
        results.iter().filter(|r| r.is_ok()).count() as f64 / results.len() as f64
    };
    CorpusAlignment { results, success_rate }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::separated_model;
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    /// Frames equal to the means of the given state sequence.
    fn frames_for(model: &AcousticModel, states: &[usize]) -> FeatureMatrix {
        let rows: Vec<Vec<f64>> = states.iter().map(|&s| model.states[s].gmm.means()[0].clone()).collect();
        FeatureMatrix::from_rows(&rows, 0.01)
    }

    #[test]
    fn recovers_generated_boundaries() {
        let (mut m, mut lex) = separated_model(&["A", "B", "C"], 3, 13);
        lex.add_word("AB").unwrap();
        lex.add_word("CA").unwrap();
        for s in &mut m.states {
            s.self_loop = 0.7;
        }
        let sil = m.mono_states(m.sil()).to_vec();
        let ph = |g: &str| m.mono_states(m.phone_id(g).unwrap()).to_vec();
        let mut seq = Vec::new();
        let mut push = |st: &[usize], d: usize| st.iter().for_each(|&s| seq.extend(std::iter::repeat_n(s, d)));
        push(&sil, 3);
        push(&ph("A"), 2);
        push(&ph("B"), 4);
        push(&sil, 2);
        push(&ph("C"), 3);
        push(&ph("A"), 2);
        push(&sil, 3);
        let f = frames_for(&m, &seq);
        let p = force_align(&m, &lex, &f, &words("AB CA"), &AlignOptions::default()).unwrap();
        assert_eq!(p.states, seq);
        assert_eq!(p.words.len(), 2);
        assert_eq!((p.words[0].start_frame, p.words[0].end_frame), (9, 27));
        assert_eq!((p.words[1].start_frame, p.words[1].end_frame), (33, 48));
        assert!((p.log_likelihood - score_path(&m, &lex, &f, &words("AB CA"), &p)).abs() < 1e-9);
        let covered: usize = p.phones.iter().map(|s| s.end - s.start).sum();
        assert_eq!(covered, f.n_frames());
    }

    #[test]
    fn too_short_and_oov() {
        let (m, lex) = separated_model(&["A", "B", "C"], 3, 4);
        let mut lex = lex;
        lex.add_word("ABC").unwrap();
        let wide = AlignOptions { beam: f64::INFINITY, map_oov: true };
        let f = FeatureMatrix::from_rows(&vec![vec![0.0; 4]; 8], 0.01);
        let e = force_align(&m, &lex, &f, &words("ABC"), &wide).unwrap_err();
        assert_eq!(e.reason, AlignFailureReason::TooShort);
        let f9 = FeatureMatrix::from_rows(&vec![vec![0.0; 4]; 9], 0.01);
        assert!(force_align(&m, &lex, &f9, &words("ABC"), &wide).is_ok());
        let strict = AlignOptions { map_oov: false, ..wide };
        let e = force_align(&m, &lex, &f9, &words("ZZ"), &strict).unwrap_err();
        assert_eq!(e.reason, AlignFailureReason::Oov);
        assert!(force_align(&m, &lex, &f9, &words("ZZ"), &wide).is_ok());
    }

    #[test]
    fn tight_beam_can_prune_everything() {
        let (m, mut lex) = separated_model(&["A", "B"], 1, 4);
        lex.add_word("AB").unwrap();
        let sil_mean = m.states[m.mono_states(m.sil())[0]].gmm.means()[0].clone();
        let f = FeatureMatrix::from_rows(&[sil_mean, vec![0.0; 4]], 0.01);
        let tight = AlignOptions { beam: 1e-9, map_oov: true };
        let e = force_align(&m, &lex, &f, &words("AB"), &tight).unwrap_err();
        assert_eq!(e.reason, AlignFailureReason::BeamPruned);
        assert!(force_align(&m, &lex, &f, &words("AB"), &AlignOptions::default()).is_ok());
    }

    #[test]
    fn equal_alignment_tiles() {
        let (m, mut lex) = separated_model(&["A", "B"], 3, 4);
        lex.add_word("AB").unwrap();
        let f = FeatureMatrix::from_rows(&vec![vec![0.0; 4]; 25], 0.01);
        let p = equal_alignment(&m, &lex, &f, &words("AB"), true).unwrap();
        assert_eq!(p.phones.len(), 4);
        assert!(p.log_likelihood.is_finite());
        let short = FeatureMatrix::from_rows(&vec![vec![0.0; 4]; 7], 0.01);
        let p = equal_alignment(&m, &lex, &short, &words("AB"), true).unwrap();
        assert_eq!(p.phones.len(), 2);
    }

    #[test]
    fn empty_corpus_rate() {
        let (m, lex) = separated_model(&["A"], 1, 2);
        let r = align_corpus(&m, &lex, &[], &AlignOptions::default());
        assert_eq!(r.success_rate, 0.0);
    }
}
