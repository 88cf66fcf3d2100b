//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use bootasr::am::gmm::Gmm;
use bootasr::am::{AcousticModel, HmmState, Topology};
use bootasr::features::FeatureMatrix;
use bootasr::lexicon::Lexicon;
use bootasr::lm::NGramLM;
use bootasr::pipeline::{Paths, PipelineConfig};
use bootasr::segment::SwConfig;
use bootasr::synth::{synth_corpus, SynthCorpus, SynthCorpusConfig, SynthSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- sequence alignment -------------------------------------------------

/// Best local alignment score over every pair of substrings that avoid the
/// masked positions; 0 for the empty pair. Each start pair gets its own
/// global DP, so every (start, end) pair is scored exactly.
pub fn brute_local<T: PartialEq>(a: &[T], b: &[T], mask_a: &[bool], mask_b: &[bool], cfg: &SwConfig) -> i32 {
    let mut best = 0;
    for i0 in 0..a.len() {
        let ie = (i0..a.len()).find(|&i| mask_a[i]).unwrap_or(a.len());
        for j0 in 0..b.len() {
            let je = (j0..b.len()).find(|&j| mask_b[j]).unwrap_or(b.len());
            if ie == i0 || je == j0 {
                continue;
            }
            let (x, y) = (&a[i0..ie], &b[j0..je]);
            let mut d = vec![vec![0i32; y.len() + 1]; x.len() + 1];
            for i in 0..=x.len() {
                for j in 0..=y.len() {
                    d[i][j] = match (i, j) {
                        (0, 0) => 0,
                        (0, _) => d[0][j - 1] + cfg.gap,
                        (_, 0) => d[i - 1][0] + cfg.gap,
                        _ => {
                            let s = if x[i - 1] == y[j - 1] { cfg.match_score } else { cfg.mismatch };
                            (d[i - 1][j - 1] + s).max(d[i - 1][j] + cfg.gap).max(d[i][j - 1] + cfg.gap)
                        }
                    };
                    if i > 0 && j > 0 {
                        best = best.max(d[i][j]);
                    }
                }
            }
        }
    }
    best
}

/// Levenshtein distance by plain recursion with memoization.
pub fn brute_edit<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            sub.min(go(a, b, i + 1, j, memo) + 1).min(go(a, b, i, j + 1, memo) + 1)
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

// ---- HMM enumeration ----------------------------------------------------

const LN_HALF: f64 = -std::f64::consts::LN_2;

/// All ways to split `t` frames into `parts` non-empty runs.
pub fn compositions(t: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 0 {
        return if t == 0 { vec![Vec::new()] } else { Vec::new() };
    }
    if t < parts {
        return Vec::new();
    }
    let mut out = Vec::new();
    for first in 1..=t - (parts - 1) {
        for mut rest in compositions(t - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Best score of a left-to-right state chain over `feats`: every state is
/// visited for at least one frame, self-loops while staying, and every
/// state (the last included) pays its exit probability.
pub fn best_chain(model: &AcousticModel, chain: &[usize], feats: &FeatureMatrix) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for durs in compositions(feats.n_frames(), chain.len()) {
        let mut s = 0.0;
        let mut t = 0;
        for (&st, &d) in chain.iter().zip(&durs) {
            let h = &model.states[st];
            s += (d - 1) as f64 * h.self_loop.ln() + (1.0 - h.self_loop).ln();
            for _ in 0..d {
                s += model.state_loglike(st, feats.row(t));
                t += 1;
            }
        }
        best = best.max(s);
    }
    best
}

fn word_states(model: &AcousticModel, lex: &Lexicon, w: &str) -> Vec<usize> {
    lex.pronunciation(w)
        .unwrap()
        .iter()
        .flat_map(|g| model.mono_states(model.phone_id(g).unwrap()).to_vec())
        .collect()
}

/// State chains for `words` with optional silence before, between and
/// after them (every 2^(n+1) choice).
fn silence_variants(model: &AcousticModel, lex: &Lexicon, words: &[String]) -> Vec<Vec<usize>> {
    let sil = model.mono_states(model.sil()).to_vec();
    let n = words.len();
    (0..1u32 << (n + 1))
        .map(|mask| {
            let mut chain = Vec::new();
            for k in 0..=n {
                if mask >> k & 1 == 1 {
                    chain.extend(&sil);
                }
                if k < n {
                    chain.extend(word_states(model, lex, &words[k]));
                }
            }
            chain
        })
        .collect()
}

/// Forced-alignment optimum by enumerating every silence placement and
/// every segmentation. Branches at the start and after each word cost ln 1/2.
pub fn brute_align(model: &AcousticModel, lex: &Lexicon, words: &[String], feats: &FeatureMatrix) -> f64 {
    if words.is_empty() {
        return best_chain(model, model.mono_states(model.sil()), feats);
    }
    let branch = (words.len() + 1) as f64 * LN_HALF;
    silence_variants(model, lex, words)
        .iter()
        .map(|c| best_chain(model, c, feats) + branch)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Decoder objective optimum: enumerate every word sequence that fits in
/// the frames, every silence placement and every segmentation.
pub fn brute_decode(
    model: &AcousticModel,
    lex: &Lexicon,
    vocab: &[String],
    lm: &NGramLM,
    lm_scale: f64,
    wip: f64,
    feats: &FeatureMatrix,
) -> f64 {
    let t = feats.n_frames();
    let lm_cost = |words: &[String]| -> f64 {
        let mut hist: Vec<&str> = vec!["<s>"];
        let mut s = 0.0;
        for w in words {
            s += lm_scale * std::f64::consts::LN_10 * lm.score(&hist, w) + wip;
            hist.push(w);
        }
        s + lm_scale * std::f64::consts::LN_10 * lm.score(&hist, "</s>")
    };
    let mut best = best_chain(model, model.mono_states(model.sil()), feats) + LN_HALF + lm_cost(&[]);
    let mut seqs: Vec<Vec<String>> = vec![Vec::new()];
    while let Some(seq) = seqs.pop() {
        for w in vocab {
            let mut next = seq.clone();
            next.push(w.clone());
            let min: usize = next.iter().map(|w| word_states(model, lex, w).len()).sum();
            if min > t {
                continue;
            }
            let am = silence_variants(model, lex, &next)
                .iter()
                .map(|c| best_chain(model, c, feats))
                .fold(f64::NEG_INFINITY, f64::max);
            let total = am + (next.len() + 1) as f64 * LN_HALF + lm_cost(&next);
            best = best.max(total);
            seqs.push(next);
        }
    }
    best
}

/// A random monophone model, one state per phone, for a lexicon of `words`.
pub fn micro_model(words: &[&str], dim: usize, r: &mut ChaCha8Rng) -> (AcousticModel, Lexicon) {
    let mut lex = Lexicon::new();
    for w in words {
        lex.add_word(w).unwrap();
    }
    let topo = Topology { states_per_phone: 1, silence_states: 1 };
    let init = HmmState { gmm: Gmm::single(vec![0.0; dim], vec![1.0; dim]), self_loop: 0.5 };
    let mut m = AcousticModel::monophone(AcousticModel::inventory_for(&lex), topo, &init);
    for s in &mut m.states {
        let k = r.random_range(1..=2);
        let w: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
        let z: f64 = w.iter().sum();
        s.gmm = Gmm::new(
            w.iter().map(|x| x / z).collect(),
            (0..k).map(|_| (0..dim).map(|_| r.random_range(-3.0..3.0)).collect()).collect(),
            (0..k).map(|_| (0..dim).map(|_| r.random_range(0.3..2.0)).collect()).collect(),
        );
        s.self_loop = r.random_range(0.05..0.95);
    }
    (m, lex)
}

pub fn random_feats(t: usize, dim: usize, r: &mut ChaCha8Rng) -> FeatureMatrix {
    let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..dim).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
    FeatureMatrix::from_rows(&rows, 0.01)
}

// ---- synthetic corpora --------------------------------------------------

/// Small corpus for pipeline tests: about a minute and a half of short-form
/// clips and one two-minute recording.
pub fn tiny_corpus_config() -> SynthCorpusConfig {
    SynthCorpusConfig {
        shortform_minutes: 1.5,
        longform_minutes: 2.0,
        recording_minutes: 2.0,
        n_test: 6,
        lm_sentences: 300,
        ..Default::default()
    }
}

pub fn make_corpus(dir: &Path, cfg: &SynthCorpusConfig) -> SynthCorpus {
    synth_corpus(&SynthSpec::default(), cfg, dir).expect("synthetic corpus")
}

/// Pipeline config over a synthetic corpus, with shortened training for speed
/// when `quick`.
pub fn pipeline_config(c: &SynthCorpus, workdir: PathBuf, quick: bool) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        paths: Paths {
            short_manifest: c.short_manifest.clone(),
            test_manifest: c.test_manifest.clone(),
            long_manifest: Some(c.long_manifest.clone()),
            text_corpus: Some(c.text_corpus.clone()),
            numerals: None,
            workdir,
        },
        ..Default::default()
    };
    if quick {
        cfg.mono.n_iters = 8;
        cfg.mono.split_iters = vec![3, 5];
        cfg.triphone.schedule.n_iters = 2;
        cfg.triphone.tie_min_count = 100;
    }
    cfg
}
