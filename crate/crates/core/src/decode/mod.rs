//! Time-synchronous token-passing decoder over a lexicon prefix tree, with
//! the n-gram LM applied at word ends.

mod tree;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use tree::{build_prefix_tree, LexTree, TreeNode};

use crate::am::{AcousticModel, Ctx};
use crate::features::FeatureMatrix;
use crate::lm::{LmState, NGramLM, EOS, LOG10_ZERO};
use crate::util::LN_10;

const LN_HALF: f64 = -std::f64::consts::LN_2;
const NO_LINK: u32 = u32::MAX;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("no token survived at frame {frame}; widen the beam")]
    NoSurvivors { frame: usize },
    #[error("no features to decode")]
    EmptyInput,
    #[error("grapheme `{0}` has no acoustic model")]
    UnknownPhone(String),
    #[error("feature dimension {got} does not match model dimension {want}")]
    DimMismatch { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Log-likelihood distance from the frame's best token beyond which
    /// tokens are dropped. Acoustic scores are unscaled, so one badly
    /// matched frame can cost hundreds of nats; the default is wide.
    pub beam: f64,
    pub max_active: usize,
    /// Multiplier on natural-log LM scores.
    pub lm_scale: f64,
    pub word_insertion_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 500.0, max_active: 7000, lm_scale: 12.0, word_insertion_penalty: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypWord {
    pub word: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub words: Vec<HypWord>,
    /// Acoustic and transition log-likelihood, including silence priors.
    pub am_score: f64,
    /// Unscaled log10 LM probability of the word sequence and `</s>`.
    pub lm_log10: f64,
    /// Search objective: acoustic score plus scaled LM score and penalties.
    pub total: f64,
}

impl Hypothesis {
    pub fn tokens(&self) -> Vec<String> {
        self.words.iter().map(|w| w.word.clone()).collect()
    }

    pub fn text(&self) -> String {
        self.tokens().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Exit {
    Child(usize),
    End,
}

/// One HMM chain in the search network: a tree node in a particular right
/// context group, or the silence model.
#[derive(Debug, Clone)]
struct Inst {
    states: Vec<usize>,
    next: Vec<u32>,
    words: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Network {
    insts: Vec<Inst>,
    roots: Vec<u32>,
    sil: u32,
}

fn build_network(model: &AcousticModel, tree: &LexTree) -> Result<Network, DecodeError> {
    let phone_of = |n: usize| -> Result<Option<usize>, DecodeError> {
        match &tree.nodes[n].label {
            None => Ok(None),
            Some(l) => model.phone_id(l).map(Some).ok_or_else(|| DecodeError::UnknownPhone(l.clone())),
        }
    };
    let mut variants: Vec<Vec<(u32, Vec<Exit>)>> = vec![Vec::new(); tree.nodes.len()];
    let mut insts: Vec<Inst> = Vec::new();
    for n in 1..tree.nodes.len() {
        let p = phone_of(n)?.expect("non-root node has a label");
        let left: Ctx = phone_of(tree.nodes[n].parent)?;
        let mut exits: Vec<(Ctx, Exit)> = Vec::new();
        for &c in &tree.nodes[n].children {
            exits.push((phone_of(c)?, Exit::Child(c)));
        }
        if !tree.nodes[n].words.is_empty() {
            exits.push((None, Exit::End));
        }
        let mut groups: Vec<(Vec<usize>, Vec<Exit>)> = Vec::new();
        for (right, exit) in exits {
            let states = model.states_for(p, left, right).to_vec();
            match groups.iter_mut().find(|g| g.0 == states) {
                Some(g) => g.1.push(exit),
                None => groups.push((states, vec![exit])),
            }
        }
        for (states, exits) in groups {
            let id = insts.len() as u32;
            let words = if exits.contains(&Exit::End) { tree.nodes[n].words.clone() } else { Vec::new() };
            insts.push(Inst { states, next: Vec::new(), words });
            variants[n].push((id, exits));
        }
    }
    for n in 1..tree.nodes.len() {
        for (id, exits) in &variants[n] {
            let next: Vec<u32> = exits
                .iter()
                .filter_map(|e| match e {
                    Exit::Child(c) => Some(variants[*c].iter().map(|v| v.0)),
                    Exit::End => None,
                })
                .flatten()
                .collect();
            insts[*id as usize].next = next;
        }
    }
    let roots = tree.root().children.iter().flat_map(|&c| variants[c].iter().map(|v| v.0)).collect();
    let sil = insts.len() as u32;
    insts.push(Inst { states: model.mono_states(model.sil()).to_vec(), next: Vec::new(), words: Vec::new() });
    Ok(Network { insts, roots, sil })
}

#[derive(Debug, Clone, Copy)]
struct WordLink {
    word: usize,
    start: u32,
    end: u32,
    prev: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Key {
    inst: u32,
    state: u32,
    lm: u32,
}

#[derive(Debug, Clone, Copy)]
struct Token {
    am: f64,
    lm: f64,
    lm_log10: f64,
    link: u32,
    word_start: u32,
}

impl Token {
    fn total(&self) -> f64 {
        self.am + self.lm
    }
}

struct LmCache<'a> {
    lm: &'a NGramLM,
    states: Vec<LmState>,
    index: HashMap<LmState, u32>,
    trans: HashMap<(u32, usize), (f64, u32)>,
    word_ids: Vec<Option<u32>>,
    eos: u32,
}

impl<'a> LmCache<'a> {
    fn new(lm: &'a NGramLM, tree: &LexTree) -> Self {
        let word_ids = tree.words.iter().map(|w| lm.lookup(w)).collect();
        let eos = lm.word_id(EOS).expect("LM has </s>");
        let mut c = Self { lm, states: Vec::new(), index: HashMap::new(), trans: HashMap::new(), word_ids, eos };
        c.intern(lm.initial_state());
        c
    }

    fn intern(&mut self, s: LmState) -> u32 {
        if let Some(&i) = self.index.get(&s) {
            return i;
        }
        let i = self.states.len() as u32;
        self.index.insert(s.clone(), i);
        self.states.push(s);
        i
    }

    /// log10 score and successor state; `word == usize::MAX` means `</s>`.
    fn advance(&mut self, state: u32, word: usize) -> (f64, u32) {
        if let Some(&r) = self.trans.get(&(state, word)) {
            return r;
        }
        let id = if word == usize::MAX { Some(self.eos) } else { self.word_ids[word] };
        let r = match id {
            Some(id) => {
                let (lp, next) = self.lm.advance(&self.states[state as usize], id);
                (lp, self.intern(next))
            }
            None => (LOG10_ZERO, state),
        };
        self.trans.insert((state, word), r);
        r
    }
}

struct Frontier {
    keys: Vec<Key>,
    toks: Vec<Token>,
    index: HashMap<Key, usize>,
}

impl Frontier {
    fn new() -> Self {
        Self { keys: Vec::new(), toks: Vec::new(), index: HashMap::new() }
    }

    fn clear(&mut self) {
        self.keys.clear();
        self.toks.clear();
        self.index.clear();
    }
}

/// Decoder over a fixed model, LM and tree; reusable across utterances.
pub struct Decoder<'a> {
    model: &'a AcousticModel,
    lm: &'a NGramLM,
    tree: &'a LexTree,
    net: Network,
    cfg: DecodeConfig,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a AcousticModel, lm: &'a NGramLM, tree: &'a LexTree, cfg: DecodeConfig) -> Result<Self, DecodeError> {
        assert!(cfg.beam > 0.0 && cfg.max_active >= 1, "beam must be positive and max_active at least 1");
        let net = build_network(model, tree)?;
        Ok(Self { model, lm, tree, net, cfg })
    }

    fn word_sequence(&self, links: &[WordLink], mut l: u32) -> Vec<usize> {
        let mut out = Vec::new();
        while l != NO_LINK {
            out.push(links[l as usize].word);
            l = links[l as usize].prev;
        }
        out.reverse();
        out
    }

    /// Does `a` beat `b`? Higher total, then higher acoustic score, then the
    /// lexicographically smaller word sequence.
    fn better(&self, links: &[WordLink], a: &Token, b: &Token) -> bool {
        match a.total().partial_cmp(&b.total()) {
            Some(Ordering::Greater) => return true,
            Some(Ordering::Less) => return false,
            _ => {}
        }
        match a.am.partial_cmp(&b.am) {
            Some(Ordering::Greater) => return true,
            Some(Ordering::Less) => return false,
            _ => {}
        }
        if a.link == b.link {
            return false;
        }
        let wa: Vec<&str> = self.word_sequence(links, a.link).iter().map(|&w| self.tree.words[w].as_str()).collect();
        let wb: Vec<&str> = self.word_sequence(links, b.link).iter().map(|&w| self.tree.words[w].as_str()).collect();
        wa < wb
    }

    fn relax(&self, links: &[WordLink], f: &mut Frontier, key: Key, tok: Token) {
        match f.index.get(&key) {
            Some(&i) => {
                if self.better(links, &tok, &f.toks[i]) {
                    f.toks[i] = tok;
                }
            }
            None => {
                f.index.insert(key, f.keys.len());
                f.keys.push(key);
                f.toks.push(tok);
            }
        }
    }

    fn lm_penalty(&self, lp: f64) -> f64 {
        self.cfg.lm_scale * LN_10 * lp + self.cfg.word_insertion_penalty
    }

    /// Expand a word end into next-word and silence entries.
    #[allow(clippy::too_many_arguments)]
    fn word_end(
        &self,
        links: &mut Vec<WordLink>,
        lmc: &mut LmCache,
        key: Key,
        tok: &Token,
        frame: u32,
        out: &mut Vec<(Key, Token)>,
    ) {
        for &w in &self.net.insts[key.inst as usize].words {
            let (lp, next_lm) = lmc.advance(key.lm, w);
            let link = links.len() as u32;
            links.push(WordLink { word: w, start: tok.word_start, end: frame, prev: tok.link });
            let t = Token {
                am: tok.am + LN_HALF,
                lm: tok.lm + self.lm_penalty(lp),
                lm_log10: tok.lm_log10 + lp,
                link,
                word_start: frame,
            };
            out.push((Key { inst: self.net.sil, state: 0, lm: next_lm }, t));
            for &r in &self.net.roots {
                out.push((Key { inst: r, state: 0, lm: next_lm }, t));
            }
        }
    }

    pub fn decode(&self, feats: &FeatureMatrix) -> Result<Hypothesis, DecodeError> {
        self.run(feats, false)
    }

    /// Like [`Decoder::decode`], but the input may stop mid-word: when no
    /// token can finish, the best surviving token's completed words are
    /// returned. Used on chunks cut from longer recordings.
    pub fn decode_open_end(&self, feats: &FeatureMatrix) -> Result<Hypothesis, DecodeError> {
        self.run(feats, true)
    }

    fn run(&self, feats: &FeatureMatrix, open_end: bool) -> Result<Hypothesis, DecodeError> {
        let t_max = feats.n_frames();
        if t_max == 0 {
            return Err(DecodeError::EmptyInput);
        }
        if feats.dim() != self.model.dim() {
            return Err(DecodeError::DimMismatch { got: feats.dim(), want: self.model.dim() });
        }
        let model = self.model;
        let mut lmc = LmCache::new(self.lm, self.tree);
        let mut links: Vec<WordLink> = Vec::new();
        let mut cache = vec![f64::NAN; model.states.len()];
        let mut cur = Frontier::new();
        let mut next = Frontier::new();
        let mut entries: Vec<(Key, Token)> = Vec::new();

        let start = Token { am: LN_HALF, lm: 0.0, lm_log10: 0.0, link: NO_LINK, word_start: 0 };
        entries.push((Key { inst: self.net.sil, state: 0, lm: 0 }, start));
        for &r in &self.net.roots {
            entries.push((Key { inst: r, state: 0, lm: 0 }, start));
        }
        for t in 0..t_max {
            next.clear();
            if t > 0 {
                for i in 0..cur.keys.len() {
                    let (key, tok) = (cur.keys[i], cur.toks[i]);
                    let inst = &self.net.insts[key.inst as usize];
                    let st = &model.states[inst.states[key.state as usize]];
                    let mut stay = tok;
                    stay.am += st.log_self();
                    self.relax(&links, &mut next, key, stay);
                    let mut fwd = tok;
                    fwd.am += st.log_exit();
                    if (key.state as usize) + 1 < inst.states.len() {
                        self.relax(&links, &mut next, Key { state: key.state + 1, ..key }, fwd);
                    } else if key.inst == self.net.sil {
                        for &r in &self.net.roots {
                            let mut e = fwd;
                            e.word_start = t as u32;
                            entries.push((Key { inst: r, state: 0, lm: key.lm }, e));
                        }
                    } else {
                        for &c in &inst.next {
                            entries.push((Key { inst: c, state: 0, lm: key.lm }, fwd));
                        }
                        self.word_end(&mut links, &mut lmc, key, &fwd, t as u32, &mut entries);
                    }
                }
            }
            for (key, tok) in entries.drain(..) {
                self.relax(&links, &mut next, key, tok);
            }
            // Emissions.
            cache.iter_mut().for_each(|c| *c = f64::NAN);
            let x = feats.row(t);
            for i in 0..next.keys.len() {
                let s = self.net.insts[next.keys[i].inst as usize].states[next.keys[i].state as usize];
                if cache[s].is_nan() {
                    cache[s] = model.state_loglike(s, x);
                }
                next.toks[i].am += cache[s];
            }
            self.prune(&mut next);
            if next.keys.is_empty() {
                return Err(DecodeError::NoSurvivors { frame: t });
            }
            std::mem::swap(&mut cur, &mut next);
        }

        // Termination: exit the last state, then `</s>`.
        let mut best: Option<Token> = None;
        let end = t_max as u32;
        for i in 0..cur.keys.len() {
            let (key, tok) = (cur.keys[i], cur.toks[i]);
            let inst = &self.net.insts[key.inst as usize];
            if key.state as usize + 1 != inst.states.len() {
                continue;
            }
            let mut fwd = tok;
            fwd.am += model.states[inst.states[key.state as usize]].log_exit();
            let mut finals: Vec<(u32, Token)> = Vec::new();
            if key.inst == self.net.sil {
                finals.push((key.lm, fwd));
            } else {
                let mut ends = Vec::new();
                self.word_end(&mut links, &mut lmc, key, &fwd, end, &mut ends);
                // Each word end produced one silence entry first; reuse it.
                for (k, tok) in ends.into_iter().filter(|(k, _)| k.inst == self.net.sil) {
                    finals.push((k.lm, tok));
                }
            }
            for (lm_state, mut tok) in finals {
                let (lp, _) = lmc.advance(lm_state, usize::MAX);
                tok.lm += self.cfg.lm_scale * LN_10 * lp;
                tok.lm_log10 += lp;
                if best.as_ref().is_none_or(|b| self.better(&links, &tok, b)) {
                    best = Some(tok);
                }
            }
        }
        if best.is_none() && open_end {
            for i in 0..cur.keys.len() {
                let tok = cur.toks[i];
                if best.as_ref().is_none_or(|b| self.better(&links, &tok, b)) {
                    best = Some(tok);
                }
            }
        }
        let best = best.ok_or(DecodeError::NoSurvivors { frame: t_max })?;
        let mut words = Vec::new();
        let mut l = best.link;
        while l != NO_LINK {
            let wl = links[l as usize];
            words.push(HypWord {
                word: self.tree.words[wl.word].clone(),
                start: wl.start as f64 * feats.frame_shift,
                end: wl.end as f64 * feats.frame_shift,
            });
            l = wl.prev;
        }
        words.reverse();
        Ok(Hypothesis { words, am_score: best.am, lm_log10: best.lm_log10, total: best.total() })
    }

    fn prune(&self, f: &mut Frontier) {
        let best = f.toks.iter().map(Token::total).fold(f64::NEG_INFINITY, f64::max);
        let floor = best - self.cfg.beam;
        let mut keep: Vec<usize> = (0..f.keys.len()).filter(|&i| f.toks[i].total() >= floor).collect();
        if keep.len() > self.cfg.max_active {
            keep.sort_by(|&a, &b| {
                f.toks[b].total().total_cmp(&f.toks[a].total()).then_with(|| f.keys[a].cmp(&f.keys[b]))
            });
            keep.truncate(self.cfg.max_active);
            keep.sort_unstable();
        }
        if keep.len() == f.keys.len() {
            return;
        }
        let keys: Vec<Key> = keep.iter().map(|&i| f.keys[i]).collect();
        let toks: Vec<Token> = keep.iter().map(|&i| f.toks[i]).collect();
        f.index.clear();
        for (i, k) in keys.iter().enumerate() {
            f.index.insert(*k, i);
        }
        f.keys = keys;
        f.toks = toks;
    }
}

/// Decode one feature matrix.
pub fn decode(
    model: &AcousticModel,
    lm: &NGramLM,
    tree: &LexTree,
    feats: &FeatureMatrix,
    cfg: &DecodeConfig,
) -> Result<Hypothesis, DecodeError> {
    Decoder::new(model, lm, tree, *cfg)?.decode(feats)
}

#[derive(Debug, Clone)]
pub struct DecodeItem {
    pub id: String,
    pub feats: FeatureMatrix,
}

#[derive(Debug)]
pub struct DecodeBatch {
    pub results: Vec<(String, Result<Hypothesis, DecodeError>)>,
    pub audio_seconds: f64,
    pub wall_seconds: f64,
}

impl DecodeBatch {
    /// Wall-clock seconds per second of audio.
    pub fn real_time_factor(&self) -> f64 {
        if self.audio_seconds > 0.0 {
            self.wall_seconds / self.audio_seconds
        } else {
            0.0
        }
    }
}

/// Decode a batch in parallel; results keep input order and per-item
/// errors do not stop the batch.
pub fn decode_corpus(
    model: &AcousticModel,
    lm: &NGramLM,
    tree: &LexTree,
    items: &[DecodeItem],
    cfg: &DecodeConfig,
) -> Result<DecodeBatch, DecodeError> {
    let clock = Instant::now();
    let dec = Decoder::new(model, lm, tree, *cfg)?;
    let results = items.par_iter().map(|it| (it.id.clone(), dec.decode(&it.feats))).collect();
    Ok(DecodeBatch {
        results,
        audio_seconds: items.iter().map(|i| i.feats.duration()).sum(),
        wall_seconds: clock.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize)]
struct HypLine<'a> {
    id: &'a str,
    text: String,
    words: &'a [HypWord],
    am_score: f64,
    lm_log10: f64,
    total: f64,
}

/// JSONL line for a hypothesis.
pub fn hypothesis_json(id: &str, h: &Hypothesis) -> String {
    serde_json::to_string(&HypLine {
        id,
        text: h.text(),
        words: &h.words,
        am_score: h.am_score,
        lm_log10: h.lm_log10,
        total: h.total,
    })
    .expect("hypothesis serializes")
}

/// CTM lines with times offset by `offset` seconds.
pub fn hypothesis_ctm(id: &str, offset: f64, h: &Hypothesis) -> String {
    h.words
        .iter()
        .map(|w| format!("{id} 1 {:.2} {:.2} {}\n", offset + w.start, w.end - w.start, w.word))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::am::{Gmm, HmmState, Topology};
    use crate::lexicon::Lexicon;

    fn setup() -> (AcousticModel, Lexicon) {
        let mut lex = Lexicon::new();
        for w in ["AB", "BA", "C"] {
            lex.add_word(w).unwrap();
        }
        let init = HmmState { gmm: Gmm::single(vec![0.0; 4], vec![1.0; 4]), self_loop: 0.6 };
        let mut m = AcousticModel::monophone(AcousticModel::inventory_for(&lex), Topology { states_per_phone: 2, silence_states: 2 }, &init);
        for (i, s) in m.states.iter_mut().enumerate() {
            let mut mean = vec![0.0; 4];
            mean[i % 4] = 6.0 * (1 + i / 4) as f64;
            s.gmm = Gmm::single(mean, vec![1.0; 4]);
        }
        (m, lex)
    }

    fn render(m: &AcousticModel, lex: &Lexicon, words: &[&str], dur: usize) -> FeatureMatrix {
        let mut rows = Vec::new();
        let mut push = |states: &[usize]| {
            for &s in states {
                for _ in 0..dur {
                    rows.push(m.states[s].gmm.means()[0].clone());
                }
            }
        };
        push(m.mono_states(m.sil()));
        for w in words {
            for g in lex.pronunciation(w).unwrap() {
                push(m.mono_states(m.phone_id(g).unwrap()));
            }
            push(m.mono_states(m.sil()));
        }
        FeatureMatrix::from_rows(&rows, 0.01)
    }

    #[test]
    fn recovers_rendered_words() {
        let (m, lex) = setup();
        let tree = build_prefix_tree(&lex, false);
        let lm = NGramLM::uniform(lex.words().map(|(w, _)| w));
        let f = render(&m, &lex, &["AB", "C", "BA"], 3);
        let h = decode(&m, &lm, &tree, &f, &DecodeConfig::default()).unwrap();
        assert_eq!(h.text(), "AB C BA");
        for w in h.words.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        assert!(h.words.last().unwrap().end <= f.duration());
    }

    #[test]
    fn silence_only_gives_empty_hypothesis() {
        let (m, lex) = setup();
        let tree = build_prefix_tree(&lex, false);
        let lm = NGramLM::uniform(lex.words().map(|(w, _)| w));
        let f = render(&m, &lex, &[], 4);
        assert!(decode(&m, &lm, &tree, &f, &DecodeConfig::default()).unwrap().words.is_empty());
    }

    #[test]
    fn batch_order_and_empty() {
        let (m, lex) = setup();
        let tree = build_prefix_tree(&lex, false);
        let lm = NGramLM::uniform(lex.words().map(|(w, _)| w));
        let b = decode_corpus(&m, &lm, &tree, &[], &DecodeConfig::default()).unwrap();
        assert!(b.results.is_empty());
        let items: Vec<DecodeItem> = [&["C"][..], &["AB", "BA"], &["BA"]]
            .iter()
            .enumerate()
            .map(|(i, w)| DecodeItem { id: format!("u{i}"), feats: render(&m, &lex, w, 2) })
            .collect();
        let b = decode_corpus(&m, &lm, &tree, &items, &DecodeConfig::default()).unwrap();
        let texts: Vec<String> = b.results.iter().map(|(_, r)| r.as_ref().unwrap().text()).collect();
        assert_eq!(texts, ["C", "AB BA", "BA"]);
        assert!(hypothesis_json("u", b.results[1].1.as_ref().unwrap()).contains("\"AB BA\""));
    }

    #[test]
    fn empty_features_error() {
        let (m, lex) = setup();
        let tree = build_prefix_tree(&lex, false);
        let lm = NGramLM::uniform(["AB"]);
        let f = FeatureMatrix::new(Vec::new(), 4, 0.01, 0.025);
        assert_eq!(decode(&m, &lm, &tree, &f, &DecodeConfig::default()).unwrap_err(), DecodeError::EmptyInput);
    }
}
