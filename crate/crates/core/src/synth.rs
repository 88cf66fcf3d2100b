//! Synthetic "language" used as ground truth for end-to-end tests.
//!
//! Each grapheme is a two-tone bundle with raised-cosine edges. Words are
//! grapheme strings, sentences come from a sparse Markov chain over the
//! vocabulary, and every rendered word carries its true time span.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::audio::{quantize_i16, write_pcm16};
use crate::corpus::{write_file, write_manifest, CorpusError, Utterance};

/// Pairwise signature separation floor, summed over matched tones, in mel.
pub const MIN_SIGNATURE_DISTANCE_MEL: f64 = 50.0;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("grapheme `{0}` is not in the inventory")]
    UnknownGrapheme(String),
    #[error("invalid synth spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub graphemes: Vec<String>,
    /// Tone pair (Hz) per grapheme, parallel to `graphemes`.
    pub tones: Vec<[f64; 2]>,
    /// Nominal seconds per grapheme.
    pub unit_dur: f64,
    /// Uniform duration jitter (± seconds).
    pub jitter: f64,
    /// Raised-cosine edge length in seconds.
    pub ramp: f64,
    /// Peak amplitude of each tone.
    pub amplitude: f64,
    /// Signal-to-noise ratio; infinity means no noise.
    pub snr_db: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

/// Log-spaced tone grid; grapheme `i` takes grid points `i` and `i + n`.
pub fn default_tones(n: usize, low: f64, high: f64) -> Vec<[f64; 2]> {
    let steps = (2 * n).max(2) - 1;
    let grid: Vec<f64> = (0..2 * n).map(|k| low * (high / low).powf(k as f64 / steps as f64)).collect();
    (0..n).map(|i| [grid[i], grid[i + n]]).collect()
}

impl Default for SynthSpec {
    fn default() -> Self {
        let graphemes: Vec<String> = ('A'..='J').map(String::from).collect();
        let tones = default_tones(graphemes.len(), 250.0, 6500.0);
        Self {
            graphemes,
            tones,
            unit_dur: 0.1,
            jitter: 0.015,
            ramp: 0.005,
            amplitude: 0.2,
            snr_db: 20.0,
            sample_rate: 16_000,
            seed: 1,
        }
    }
}

fn mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

impl SynthSpec {
    pub fn index_of(&self, g: &str) -> Option<usize> {
        self.graphemes.iter().position(|x| x == g)
    }

    /// Mel distance between two signatures (tones matched in sorted order).
    pub fn signature_distance(&self, a: usize, b: usize) -> f64 {
        let (mut x, mut y) = (self.tones[a], self.tones[b]);
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        x.iter().zip(&y).map(|(p, q)| (mel(*p) - mel(*q)).abs()).sum()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadSpec(m));
        if self.graphemes.is_empty() || self.graphemes.len() != self.tones.len() {
            return bad("need one tone pair per grapheme".into());
        }
        if self.graphemes.iter().collect::<BTreeSet<_>>().len() != self.graphemes.len() {
            return bad("duplicate grapheme".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.tones.iter().flatten().any(|&f| !(f > 0.0 && f < nyquist)) {
            return bad("tone outside (0, Nyquist)".into());
        }
        if !(self.unit_dur > 0.0 && self.jitter >= 0.0 && self.jitter < self.unit_dur / 2.0) {
            return bad("jitter must be below half the unit duration".into());
        }
        if !(self.ramp >= 0.0 && 2.0 * self.ramp <= self.unit_dur - self.jitter) {
            return bad("ramps longer than a grapheme".into());
        }
        for a in 0..self.graphemes.len() {
            for b in a + 1..self.graphemes.len() {
                let d = self.signature_distance(a, b);
                if d < MIN_SIGNATURE_DISTANCE_MEL {
                    return bad(format!("{} and {} are only {d:.1} mel apart", self.graphemes[a], self.graphemes[b]));
                }
            }
        }
        Ok(())
    }

    fn noise_std(&self) -> f64 {
        if self.snr_db.is_infinite() {
            return 0.0;
        }
        // Two tones of equal amplitude carry amplitude² of power.
        let power = self.amplitude * self.amplitude;
        (power / 10f64.powf(self.snr_db / 10.0)).sqrt()
    }
}

/// Rendered audio and the true span of every unit in it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthAudio {
    pub samples: Vec<f64>,
    pub spans: Vec<(f64, f64)>,
}

impl SynthAudio {
    /// Internal boundaries between consecutive spans.
    pub fn boundaries(&self) -> Vec<f64> {
        self.spans.iter().skip(1).map(|s| s.0).collect()
    }

    pub fn duration(&self, rate: u32) -> f64 {
        self.samples.len() as f64 / rate as f64
    }
}

fn graphemes_of(word: &str) -> Vec<String> {
    word.chars().map(String::from).collect()
}

/// Append the clean rendering of `word`; returns the per-grapheme spans.
fn render<S: AsRef<str>>(word: &[S], spec: &SynthSpec, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) -> Result<Vec<(f64, f64)>, SynthError> {
    let sr = spec.sample_rate as f64;
    let ramp = (spec.ramp * sr).round() as usize;
    let mut spans = Vec::with_capacity(word.len());
    for g in word {
        let g = g.as_ref();
        let idx = spec.index_of(g).ok_or_else(|| SynthError::UnknownGrapheme(g.to_string()))?;
        let dur = if spec.jitter > 0.0 { spec.unit_dur + rng.random_range(-spec.jitter..=spec.jitter) } else { spec.unit_dur };
        let n = (dur * sr).round() as usize;
        let phases: [f64; 2] = [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)];
        let start = out.len();
        for i in 0..n {
            let t = i as f64 / sr;
            let env = if i < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos()
            } else if i >= n - ramp {
                0.5 - 0.5 * (std::f64::consts::PI * (n - 1 - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let s: f64 = spec.tones[idx]
                .iter()
                .zip(&phases)
                .map(|(f, p)| (std::f64::consts::TAU * f * t + p).sin())
                .sum();
            out.push(env * spec.amplitude * s);
        }
        spans.push((start as f64 / sr, out.len() as f64 / sr));
    }
    Ok(spans)
}

fn add_noise(samples: &mut [f64], spec: &SynthSpec, rng: &mut ChaCha8Rng) {
    let sd = spec.noise_std();
    if sd == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sd).expect("finite noise level");
    for s in samples {
        *s += normal.sample(rng);
    }
}

fn silence(n_seconds: f64, rate: u32, out: &mut Vec<f64>) {
    out.extend(std::iter::repeat_n(0.0, (n_seconds * rate as f64).round() as usize));
}

/// Render one word (a grapheme sequence) with noise, deterministically per seed.
pub fn synth_word<S: AsRef<str>>(word: &[S], spec: &SynthSpec, seed: u64) -> Result<SynthAudio, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let spans = render(word, spec, &mut rng, &mut samples)?;
    add_noise(&mut samples, spec, &mut rng);
    Ok(SynthAudio { samples, spans })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCorpusConfig {
    /// Distinct prompt words; also the vocabulary size.
    pub n_shortform: usize,
    /// Prompts are re-recorded until the short-form set reaches this length.
    pub shortform_minutes: f64,
    pub longform_minutes: f64,
    pub recording_minutes: f64,
    pub n_test: usize,
    pub lm_sentences: usize,
    pub word_len: (usize, usize),
    pub sentence_len: (usize, usize),
    /// Successors per word in the sentence chain.
    pub successors: usize,
    pub word_gap: (f64, f64),
    pub sentence_pause: (f64, f64),
    pub clip_padding: (f64, f64),
    /// Target share of off-script tokens in the corrupted long-form transcripts.
    pub corruption_rate: f64,
    pub offscript_span: (usize, usize),
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            n_shortform: 60,
            shortform_minutes: 8.0,
            longform_minutes: 30.0,
            recording_minutes: 2.0,
            n_test: 40,
            lm_sentences: 3000,
            word_len: (2, 5),
            sentence_len: (4, 9),
            successors: 4,
            word_gap: (0.03, 0.10),
            sentence_pause: (0.4, 0.9),
            clip_padding: (0.15, 0.35),
            corruption_rate: 0.0,
            offscript_span: (3, 6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedToken {
    pub word: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthUtterance {
    pub id: String,
    pub duration: f64,
    pub words: Vec<TimedToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecording {
    pub id: String,
    pub duration: f64,
    /// Spoken words with their true spans.
    pub words: Vec<TimedToken>,
    /// Corrupted transcript, when corruption was requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrupted: Vec<String>,
    /// For each corrupted-transcript token, the spoken word it reads, or
    /// `None` for off-script text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrupted_source: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub vocabulary: Vec<String>,
    pub offscript_vocabulary: Vec<String>,
    pub short_form: Vec<TruthUtterance>,
    pub long_form: Vec<TruthRecording>,
    pub test: Vec<TruthUtterance>,
}

/// Paths of everything [`synth_corpus`] writes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub short_manifest: PathBuf,
    pub long_manifest: PathBuf,
    pub corrupted_manifest: Option<PathBuf>,
    pub test_manifest: PathBuf,
    pub text_corpus: PathBuf,
    pub truth_path: PathBuf,
    pub truth: SynthTruth,
}

fn random_word(spec: &SynthSpec, len: (usize, usize), rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(len.0..=len.1);
    let mut w = String::new();
    let mut prev: Option<usize> = None;
    while w.chars().count() < n {
        let g = rng.random_range(0..spec.graphemes.len());
        // No doubled graphemes: two identical bundles back to back are one long tone.
        if Some(g) != prev || spec.graphemes.len() == 1 {
            w.push_str(&spec.graphemes[g]);
            prev = Some(g);
        }
    }
    w
}

fn vocabulary(spec: &SynthSpec, n: usize, len: (usize, usize), taken: &BTreeSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = taken.clone();
    let mut out = Vec::with_capacity(n);
    let mut tries = 0usize;
    while out.len() < n && tries < 1_000_000 {
        tries += 1;
        let w = random_word(spec, len, rng);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Sparse first-order chain over the vocabulary.
struct SentenceChain {
    next: Vec<Vec<usize>>,
}

impl SentenceChain {
    fn new(n: usize, successors: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = successors.clamp(1, n.max(1));
        let next = (0..n).map(|_| rand::seq::index::sample(rng, n, k).into_vec()).collect();
        Self { next }
    }

    fn sentence(&self, vocab: &[String], len: (usize, usize), rng: &mut ChaCha8Rng) -> Vec<String> {
        let n = rng.random_range(len.0..=len.1);
        let mut w = rng.random_range(0..vocab.len());
        let mut out = vec![vocab[w].clone()];
        while out.len() < n {
            let succ = &self.next[w];
            w = succ[rng.random_range(0..succ.len())];
            out.push(vocab[w].clone());
        }
        out
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_SHORT: u64 = 1 << 32;
const STREAM_LONG: u64 = 2 << 32;
const STREAM_TEST: u64 = 3 << 32;

fn write_samples(path: &Path, samples: &[f64], rate: u32) -> Result<(), SynthError> {
    let pcm: Vec<i16> = samples.iter().map(|&x| quantize_i16(x)).collect();
    Ok(write_pcm16(path, &pcm, rate)?)
}

/// Render a sentence with word gaps after `lead` seconds of silence.
fn render_sentence(
    words: &[String],
    spec: &SynthSpec,
    gap: (f64, f64),
    rng: &mut ChaCha8Rng,
    out: &mut Vec<f64>,
) -> Result<Vec<TimedToken>, SynthError> {
    let mut timed = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            silence(rng.random_range(gap.0..=gap.1), spec.sample_rate, out);
        }
        let spans = render(&graphemes_of(w), spec, rng, out)?;
        timed.push(TimedToken { word: w.clone(), start: spans[0].0, end: spans[spans.len() - 1].1 });
    }
    Ok(timed)
}

fn round_ms(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Generate the full synthetic corpus under `out_dir`.
pub fn synth_corpus(spec: &SynthSpec, cfg: &SynthCorpusConfig, out_dir: &Path) -> Result<SynthCorpus, SynthError> {
    spec.validate()?;
    if cfg.n_shortform == 0 || cfg.word_len.0 == 0 || cfg.word_len.0 > cfg.word_len.1 || cfg.sentence_len.0 == 0 || cfg.sentence_len.0 > cfg.sentence_len.1 {
        return Err(SynthError::BadSpec("empty vocabulary or bad length ranges".into()));
    }
    let rate = spec.sample_rate;
    let mut rng = stream_rng(spec.seed, 0);
    let vocab = vocabulary(spec, cfg.n_shortform, cfg.word_len, &BTreeSet::new(), &mut rng);
    if vocab.len() < cfg.n_shortform {
        return Err(SynthError::BadSpec("grapheme inventory too small for the vocabulary".into()));
    }
    let offscript = vocabulary(spec, cfg.n_shortform, cfg.word_len, &vocab.iter().cloned().collect(), &mut rng);
    let chain = SentenceChain::new(vocab.len(), cfg.successors, &mut rng);
    let off_chain = SentenceChain::new(offscript.len().max(1), cfg.successors, &mut rng);

    // Short-form: each prompt word re-recorded until the budget is met.
    let mut plan: Vec<&String> = Vec::new();
    let mut approx = 0.0;
    let per_clip = |w: &String| w.len() as f64 * spec.unit_dur + cfg.clip_padding.0 + cfg.clip_padding.1;
    'outer: loop {
        for w in &vocab {
            if approx >= cfg.shortform_minutes * 60.0 && !plan.is_empty() {
                break 'outer;
            }
            approx += per_clip(w);
            plan.push(w);
        }
        if cfg.shortform_minutes <= 0.0 {
            break;
        }
    }
    let short: Vec<(Utterance, TruthUtterance)> = plan
        .par_iter()
        .enumerate()
        .map(|(k, w)| {
            let mut r = stream_rng(spec.seed, STREAM_SHORT + k as u64);
            let mut s = Vec::new();
            silence(r.random_range(cfg.clip_padding.0..=cfg.clip_padding.1), rate, &mut s);
            let timed = render_sentence(std::slice::from_ref(*w), spec, cfg.word_gap, &mut r, &mut s)?;
            silence(r.random_range(cfg.clip_padding.0..=cfg.clip_padding.1), rate, &mut s);
            add_noise(&mut s, spec, &mut r);
            let id = format!("sf{k:05}");
            let rel = format!("short/{id}.wav");
            write_samples(&out_dir.join(&rel), &s, rate)?;
            let dur = s.len() as f64 / rate as f64;
            let mut u = Utterance::whole(&id, out_dir.join(&rel), vec![(*w).clone()], dur);
            u.audio = rel;
            Ok((u, TruthUtterance { id, duration: dur, words: timed }))
        })
        .collect::<Result<_, SynthError>>()?;

    // Long-form: sentence sequences planned up front so rendering can run in parallel.
    let n_recordings = ((cfg.longform_minutes / cfg.recording_minutes).round() as usize).max(usize::from(cfg.longform_minutes > 0.0));
    let mut long_plan: Vec<Vec<Vec<String>>> = Vec::new();
    for _ in 0..n_recordings {
        let mut sents = Vec::new();
        let mut secs = 0.0;
        while secs < cfg.recording_minutes * 60.0 - 1.0 {
            let s = chain.sentence(&vocab, cfg.sentence_len, &mut rng);
            secs += s.iter().map(|w| w.len() as f64 * spec.unit_dur + 0.065).sum::<f64>() + 0.65;
            sents.push(s);
        }
        long_plan.push(sents);
    }
    let long: Vec<(Utterance, TruthRecording)> = long_plan
        .par_iter()
        .enumerate()
        .map(|(k, sents)| {
            let mut r = stream_rng(spec.seed, STREAM_LONG + k as u64);
            let mut s = Vec::new();
            silence(0.5, rate, &mut s);
            let mut words = Vec::new();
            for (i, sent) in sents.iter().enumerate() {
                if i > 0 {
                    silence(r.random_range(cfg.sentence_pause.0..=cfg.sentence_pause.1), rate, &mut s);
                }
                words.extend(render_sentence(sent, spec, cfg.word_gap, &mut r, &mut s)?);
            }
            silence(0.5, rate, &mut s);
            add_noise(&mut s, spec, &mut r);
            let id = format!("lf{k:03}");
            let rel = format!("long/{id}.wav");
            write_samples(&out_dir.join(&rel), &s, rate)?;
            let dur = s.len() as f64 / rate as f64;
            let text: Vec<String> = sents.iter().flatten().cloned().collect();
            let mut u = Utterance::whole(&id, out_dir.join(&rel), text, dur);
            u.audio = rel;
            for w in &mut words {
                w.start = round_ms(w.start);
                w.end = round_ms(w.end);
            }
            Ok((u, TruthRecording { id, duration: dur, words, corrupted: Vec::new(), corrupted_source: Vec::new() }))
        })
        .collect::<Result<_, SynthError>>()?;

    let test_sents: Vec<Vec<String>> = (0..cfg.n_test).map(|_| chain.sentence(&vocab, cfg.sentence_len, &mut rng)).collect();
    let test: Vec<(Utterance, TruthUtterance)> = test_sents
        .par_iter()
        .enumerate()
        .map(|(k, sent)| {
            let mut r = stream_rng(spec.seed, STREAM_TEST + k as u64);
            let mut s = Vec::new();
            silence(r.random_range(cfg.clip_padding.0..=cfg.clip_padding.1), rate, &mut s);
            let timed = render_sentence(sent, spec, cfg.word_gap, &mut r, &mut s)?;
            silence(r.random_range(cfg.clip_padding.0..=cfg.clip_padding.1), rate, &mut s);
            add_noise(&mut s, spec, &mut r);
            let id = format!("te{k:03}");
            let rel = format!("test/{id}.wav");
            write_samples(&out_dir.join(&rel), &s, rate)?;
            let dur = s.len() as f64 / rate as f64;
            let mut u = Utterance::whole(&id, out_dir.join(&rel), sent.clone(), dur);
            u.audio = rel;
            Ok((u, TruthUtterance { id, duration: dur, words: timed }))
        })
        .collect::<Result<_, SynthError>>()?;

    let mut text = String::new();
    for _ in 0..cfg.lm_sentences {
        text.push_str(&chain.sentence(&vocab, cfg.sentence_len, &mut rng).join(" "));
        text.push('\n');
    }

    let (short_utts, short_truth): (Vec<_>, Vec<_>) = short.into_iter().unzip();
    let (long_utts, mut long_truth): (Vec<_>, Vec<_>) = long.into_iter().unzip();
    let (test_utts, test_truth): (Vec<_>, Vec<_>) = test.into_iter().unzip();

    let mut corrupted_manifest = None;
    if cfg.corruption_rate > 0.0 {
        let mut r = stream_rng(spec.seed, 4 << 32);
        let mut corrupted_utts = Vec::new();
        for (k, u) in long_utts.iter().enumerate() {
            let (tokens, source) = corrupt(&long_plan[k], &offscript, &off_chain, cfg, &mut r);
            let mut c = u.clone();
            c.text = tokens.clone();
            corrupted_utts.push(c);
            long_truth[k].corrupted = tokens;
            long_truth[k].corrupted_source = source;
        }
        let path = out_dir.join("long_corrupted.jsonl");
        write_manifest(&path, &corrupted_utts)?;
        corrupted_manifest = Some(path);
    }

    let truth = SynthTruth {
        vocabulary: vocab,
        offscript_vocabulary: offscript,
        short_form: short_truth,
        long_form: long_truth,
        test: test_truth,
    };
    let out = SynthCorpus {
        short_manifest: out_dir.join("short.jsonl"),
        long_manifest: out_dir.join("long.jsonl"),
        corrupted_manifest,
        test_manifest: out_dir.join("test.jsonl"),
        text_corpus: out_dir.join("text.txt"),
        truth_path: out_dir.join("truth.json"),
        truth,
    };
    write_manifest(&out.short_manifest, &short_utts)?;
    write_manifest(&out.long_manifest, &long_utts)?;
    write_manifest(&out.test_manifest, &test_utts)?;
    write_file(&out.text_corpus, text.as_bytes())?;
    let json = serde_json::to_string_pretty(&out.truth).expect("truth serializes");
    write_file(&out.truth_path, json.as_bytes())?;
    Ok(out)
}

/// Insert off-script spans at sentence boundaries until they make up about
/// `corruption_rate` of the transcript.
fn corrupt(
    sents: &[Vec<String>],
    offscript: &[String],
    chain: &SentenceChain,
    cfg: &SynthCorpusConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, Vec<Option<usize>>) {
    let spoken: usize = sents.iter().map(Vec::len).sum();
    let rate = cfg.corruption_rate.clamp(0.0, 0.95);
    let target = (rate * spoken as f64 / (1.0 - rate)).round() as usize;
    let slots = sents.len() + 1;
    let mut inserts: Vec<Vec<String>> = vec![Vec::new(); slots];
    let mut added = 0;
    while added < target && !offscript.is_empty() {
        let slot = rng.random_range(0..slots);
        let len = rng.random_range(cfg.offscript_span.0..=cfg.offscript_span.1).min(target - added).max(1);
        let span = chain.sentence(offscript, (len, len), rng);
        added += span.len();
        inserts[slot].extend(span);
    }
    let (mut tokens, mut source) = (Vec::new(), Vec::new());
    let mut idx = 0;
    for (slot, ins) in inserts.into_iter().enumerate() {
        source.extend(std::iter::repeat_n(None, ins.len()));
        tokens.extend(ins);
        if let Some(s) = sents.get(slot) {
            for w in s {
                tokens.push(w.clone());
                source.push(Some(idx));
                idx += 1;
            }
        }
    }
    (tokens, source)
}
