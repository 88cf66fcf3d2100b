//! End-to-end recipe as a chain of cached stages:
//! normalize, lexicon, features, mono, harvest, triphone, lm, decode, score.
//!
//! Every stage writes into `workdir/stages/<name>-<key>/` where the key
//! hashes the stage parameters and the keys of its inputs, so unchanged
//! stages are skipped on re-runs and touching an input invalidates only
//! the stages downstream of it.

mod stage;
mod sweep;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use stage::{run_stage, KeyBuilder, StageOutput, StageResult, StageStatus};
pub use sweep::{render_svg, sweep, SweepCell, SweepConfig, SweepResult, SweepScore};

use crate::am::{align_corpus, flat_start, train, train_triphone, AcousticModel, AlignInput, IterStats, Topology, TrainSchedule};
use crate::corpus::audio::read_canonical_pcm;
use crate::corpus::{corpus_stats, load_manifest, load_manifest_with, subset_by_duration, write_manifest, CorpusStats, LoadOptions, Utterance};
use crate::decode::{build_prefix_tree, decode_corpus, hypothesis_ctm, hypothesis_json, DecodeConfig, DecodeItem};
use crate::eval::{cer, wer, ScoredPair, WerReport};
use crate::features::{cmvn, compute_mfcc, read_feature_dump, write_feature_dump, FeatureMatrix, MfccConfig};
use crate::lexicon::{build_wordlist, graphemic_lexicon, oov_rate, supplement, Lexicon, UNK};
use crate::lm::{perplexity, train_ngram, LmConfig, NGramLM};
use crate::segment::{harvest_segments, success_rate, HarvestConfig, SegmentCandidate, SegmentReport};
use crate::textnorm::{load_numeral_table, normalize, NumeralTable};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` failed (partial output in {}): {msg}", artifact.display())]
    Stage { stage: String, artifact: PathBuf, msg: String },
    #[error("cannot write {path}: {msg}")]
    Write { path: String, msg: String },
    #[error("{path}: {msg}")]
    Input { path: String, msg: String },
}

impl PipelineError {
    pub fn is_validation(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub short_manifest: PathBuf,
    pub test_manifest: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub long_manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub numerals: Option<PathBuf>,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LexiconParams {
    /// Corpus words seen fewer times are left out (transcript words are always kept).
    pub min_count: u64,
}

impl Default for LexiconParams {
    fn default() -> Self {
        Self { min_count: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriphoneParams {
    pub enabled: bool,
    /// Frames a context needs before it gets its own states.
    pub tie_min_count: usize,
    pub schedule: TrainSchedule,
}

impl Default for TriphoneParams {
    fn default() -> Self {
        Self {
            enabled: true,
            tie_min_count: 200,
            schedule: TrainSchedule { n_iters: 8, split_iters: Vec::new(), ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Train the monophone on a seeded subset of this many short-form minutes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_minutes: Option<f64>,
    /// Decode with the trained n-gram model; otherwise a uniform unigram.
    pub use_lm: bool,
    pub paths: Paths,
    pub features: MfccConfig,
    pub lexicon: LexiconParams,
    pub topology: Topology,
    pub mono: TrainSchedule,
    pub harvest: HarvestConfig,
    pub triphone: TriphoneParams,
    pub lm: LmConfig,
    pub decode: DecodeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            budget_minutes: None,
            use_lm: true,
            paths: Paths::default(),
            features: MfccConfig::default(),
            lexicon: LexiconParams::default(),
            topology: Topology::default(),
            mono: TrainSchedule::default(),
            harvest: HarvestConfig::default(),
            triphone: TriphoneParams::default(),
            lm: LmConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

fn absolutize(p: &mut PathBuf, base: &Path) {
    if p.as_os_str().is_empty() || p.is_absolute() {
        return;
    }
    let joined = base.join(&*p);
    *p = std::path::absolute(&joined).unwrap_or(joined);
}

impl PipelineConfig {
    /// Parse TOML; relative paths are taken relative to `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        absolutize(&mut p.short_manifest, base);
        absolutize(&mut p.test_manifest, base);
        absolutize(&mut p.workdir, base);
        for o in [&mut p.long_manifest, &mut p.text_corpus, &mut p.numerals].into_iter().flatten() {
            absolutize(o, base);
        }
    }

    /// Check paths and parameter ranges before any work starts.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let p = &self.paths;
        for (name, path) in [("paths.short_manifest", &p.short_manifest), ("paths.test_manifest", &p.test_manifest)] {
            if path.as_os_str().is_empty() {
                return bad(format!("{name} is required"));
            }
            if !path.is_file() {
                return bad(format!("{name}: {} does not exist", path.display()));
            }
        }
        if p.workdir.as_os_str().is_empty() {
            return bad("paths.workdir is required".into());
        }
        for (name, path) in [("paths.long_manifest", &p.long_manifest), ("paths.text_corpus", &p.text_corpus), ("paths.numerals", &p.numerals)] {
            if let Some(path) = path {
                if !path.is_file() {
                    return bad(format!("{name}: {} does not exist", path.display()));
                }
            }
        }
        if let Some(n) = &p.numerals {
            load_numeral_table(n).map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if let Some(b) = self.budget_minutes {
            if !(b >= 0.0 && b.is_finite()) {
                return bad(format!("budget_minutes must be a non-negative number, got {b}"));
            }
        }
        if self.topology.states_per_phone == 0 || self.topology.silence_states == 0 {
            return bad("topology needs at least one state per phone".into());
        }
        if self.mono.n_iters == 0 {
            return bad("mono.n_iters must be at least 1".into());
        }
        if !(self.decode.beam > 0.0) || self.decode.max_active == 0 {
            return bad("decode.beam must be > 0 and decode.max_active >= 1".into());
        }
        let sw = &self.harvest.sw;
        if !(sw.match_score > 0 && sw.mismatch <= 0 && sw.gap <= 0) {
            return bad("harvest.sw needs match > 0 >= mismatch, gap".into());
        }
        let h = &self.harvest;
        if !(h.chunk_len > h.overlap && h.overlap >= 0.0) {
            return bad("harvest.chunk_len must exceed harvest.overlap".into());
        }
        if !(0.0 < h.min_dur && h.min_dur <= h.max_dur) {
            return bad("harvest needs 0 < min_dur <= max_dur".into());
        }
        if !(1..=9).contains(&self.lm.order) {
            return bad(format!("lm.order must be in 1..=9, got {}", self.lm.order));
        }
        Ok(())
    }

    /// Fully materialized TOML (every default written out).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hash of everything that can change results; the workdir only says
    /// where they go, so it is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.workdir = PathBuf::new();
        KeyBuilder::new("config").params(&c).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub short: CorpusStats,
    pub test: CorpusStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub long: Option<CorpusStats>,
    pub dropped_numerals: usize,
    pub lm_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconSummary {
    pub words: usize,
    pub rejected: usize,
    pub test_oov_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub train_utterances: usize,
    pub train_minutes: f64,
    #[serde(default)]
    pub shortfall: bool,
    pub states: usize,
    pub gaussians: usize,
    pub contexts: usize,
    pub iterations: usize,
    pub final_log_likelihood: f64,
    pub failed_alignments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestSummary {
    pub recordings: usize,
    pub failed_recordings: usize,
    pub recording_rate: f64,
    pub word_yield: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub candidates: usize,
    pub accepted: usize,
    pub accepted_minutes: f64,
    /// Share of accepted segments the monophone force-aligns.
    pub segment_alignment_success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmSummary {
    pub kind: String,
    pub order: usize,
    pub test_perplexity: f64,
    pub test_oov: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub percent: String,
    pub rate: f64,
    pub n_ref: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl From<&WerReport> for ScoreSummary {
    fn from(r: &WerReport) -> Self {
        Self {
            percent: r.percent(),
            rate: r.rate,
            n_ref: r.totals.n_ref,
            substitutions: r.totals.substitutions,
            deletions: r.totals.deletions,
            insertions: r.totals.insertions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    /// Stage name to stage key.
    pub stages: BTreeMap<String, String>,
    pub data: DataSummary,
    pub lexicon: LexiconSummary,
    pub mono: ModelSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub harvest: Option<HarvestSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triphone: Option<ModelSummary>,
    pub lm: LmSummary,
    pub decode_failures: usize,
    pub wer: ScoreSummary,
    pub cer: ScoreSummary,
}

/// Result of [`run_pipeline`]: the summary plus where everything went.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub stages: Vec<StageOutput>,
    pub run_dir: PathBuf,
}

impl RunOutcome {
    pub fn stage_dir(&self, name: &str) -> Option<&Path> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.dir.as_path())
    }

    /// Path of the final acoustic model.
    pub fn final_model(&self) -> PathBuf {
        match self.stage_dir("triphone") {
            Some(d) => d.join("model.bam"),
            None => self.stage_dir("mono").expect("mono stage always runs").join("model.bam"),
        }
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), BoxError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Stage {
        stage: "summary".into(),
        artifact: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Stage {
        stage: "summary".into(),
        artifact: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn stage_err(stage: &str, dir: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage: stage.into(), artifact: dir.to_path_buf(), msg: e.to_string() }
}

/// Normalized corpora as written by the normalize stage.
struct Corpora {
    short: Vec<Utterance>,
    long: Vec<Utterance>,
    test: Vec<Utterance>,
    lm_text: Vec<Vec<String>>,
}

impl Corpora {
    fn load(dir: &Path) -> Result<Self, BoxError> {
        let long_path = dir.join("long.jsonl");
        Ok(Self {
            short: load_manifest(&dir.join("short.jsonl"))?,
            long: if long_path.is_file() { load_manifest(&long_path)? } else { Vec::new() },
            test: load_manifest(&dir.join("test.jsonl"))?,
            lm_text: std::fs::read_to_string(dir.join("lm_text.txt"))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| l.split(' ').map(str::to_string).collect())
                .collect(),
        })
    }

    fn audio_paths(&self) -> BTreeSet<PathBuf> {
        self.short.iter().chain(&self.long).chain(&self.test).map(|u| u.audio_path.clone()).collect()
    }
}

/// Raw (pre-normalization) features for every recording, keyed by audio path.
struct FeatureStore {
    dir: PathBuf,
    index: BTreeMap<String, String>,
}

impl FeatureStore {
    fn open(dir: &Path) -> Result<Self, BoxError> {
        let index = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    fn raw(&self, audio: &Path) -> Result<FeatureMatrix, BoxError> {
        let key = audio.display().to_string();
        let file = self.index.get(&key).ok_or_else(|| format!("no features for {key}"))?;
        Ok(read_feature_dump(&self.dir.join(file))?)
    }

    /// Normalized features for each utterance, reading every recording once.
    fn utterances(&self, utts: &[Utterance]) -> Result<Vec<FeatureMatrix>, BoxError> {
        let paths: BTreeSet<&Path> = utts.iter().map(|u| u.audio_path.as_path()).collect();
        let loaded: Vec<(&Path, FeatureMatrix)> = paths
            .into_par_iter()
            .map(|p| self.raw(p).map(|f| (p, f)))
            .collect::<Result<_, _>>()?;
        let raw: HashMap<&Path, FeatureMatrix> = loaded.into_iter().collect();
        Ok(utts.par_iter().map(|u| cmvn(&segment_frames(&raw[u.audio_path.as_path()], u).1)).collect())
    }

    fn align_inputs(&self, utts: &[Utterance]) -> Result<Vec<AlignInput>, BoxError> {
        Ok(self
            .utterances(utts)?
            .into_iter()
            .zip(utts)
            .map(|(feats, u)| AlignInput { id: u.id.clone(), feats, words: u.text.clone() })
            .collect())
    }
}

/// Frames covered by `u` in its recording's features, with the time of the
/// first frame.
fn segment_frames(raw: &FeatureMatrix, u: &Utterance) -> (f64, FeatureMatrix) {
    match (u.start, u.end) {
        (Some(s), Some(e)) => {
            let b = ((e / raw.frame_shift).round() as usize).min(raw.n_frames());
            let a = ((s / raw.frame_shift).round() as usize).min(b);
            (a as f64 * raw.frame_shift, raw.slice(a, b))
        }
        _ => (0.0, raw.clone()),
    }
}

/// MFCCs of a recording's audio, before normalization.
pub fn recording_features(audio: &Path, cfg: &MfccConfig) -> Result<FeatureMatrix, PipelineError> {
    let err = |e: &dyn std::fmt::Display| PipelineError::Input { path: audio.display().to_string(), msg: e.to_string() };
    let samples = read_canonical_pcm(audio).map_err(|e| err(&e))?;
    compute_mfcc(&samples, cfg).map_err(|e| err(&e))
}

/// CMVN-normalized features for each utterance, computed the same way the
/// pipeline does: whole-recording MFCCs sliced to the utterance span.
pub fn utterance_features(utts: &[Utterance], cfg: &MfccConfig) -> Result<Vec<FeatureMatrix>, PipelineError> {
    let paths: BTreeSet<&Path> = utts.iter().map(|u| u.audio_path.as_path()).collect();
    let loaded: Vec<(&Path, FeatureMatrix)> =
        paths.into_par_iter().map(|p| recording_features(p, cfg).map(|f| (p, f))).collect::<Result<_, _>>()?;
    let raw: HashMap<&Path, FeatureMatrix> = loaded.into_iter().collect();
    Ok(utts.par_iter().map(|u| cmvn(&segment_frames(&raw[u.audio_path.as_path()], u).1)).collect())
}

/// Harvest one long-form entry, with candidate times relative to the
/// recording rather than the entry.
pub fn harvest_entry(
    u: &Utterance,
    raw: &FeatureMatrix,
    model: &AcousticModel,
    cfg: &HarvestConfig,
) -> Result<(Vec<SegmentCandidate>, SegmentReport), crate::segment::SegmentError> {
    let (offset, feats) = segment_frames(raw, u);
    let (mut cands, report) = harvest_segments(&u.id, &feats, &u.text, model, cfg)?;
    for c in &mut cands {
        c.start += offset;
        c.end += offset;
    }
    Ok((cands, report))
}

/// Accepted candidates as manifest entries with ids `<entry>-NNNN`.
pub fn accepted_segments(u: &Utterance, cands: &[SegmentCandidate]) -> Vec<Utterance> {
    cands
        .iter()
        .filter(|c| c.accepted)
        .enumerate()
        .map(|(k, c)| {
            let mut seg = c.to_utterance(&format!("{}-{k:04}", u.id), &u.audio, &u.audio_path);
            seg.recording_id = u.recording_id.clone();
            seg
        })
        .collect()
}

fn normalize_utts(utts: &mut [Utterance], numerals: &NumeralTable) -> usize {
    let mut dropped = 0;
    for u in utts {
        let n = normalize(&u.text_line(), numerals);
        dropped += n.dropped.len();
        u.text = n.tokens;
        u.audio = u.audio_path.display().to_string();
    }
    dropped
}

fn stage_normalize(cfg: &PipelineConfig, dir: &Path) -> StageResult {
    let p = &cfg.paths;
    let numerals = match &p.numerals {
        Some(n) => load_numeral_table(n)?,
        None => NumeralTable::new(),
    };
    let opts = LoadOptions { require_normalized: false };
    let mut short = load_manifest_with(&p.short_manifest, opts)?;
    let mut test = load_manifest_with(&p.test_manifest, opts)?;
    let mut long = match &p.long_manifest {
        Some(l) => Some(load_manifest_with(l, opts)?),
        None => None,
    };
    let mut dropped = normalize_utts(&mut short, &numerals) + normalize_utts(&mut test, &numerals);
    if let Some(l) = &mut long {
        dropped += normalize_utts(l, &numerals);
    }
    let mut lm_lines = String::new();
    let mut lm_sentences = 0;
    if let Some(t) = &p.text_corpus {
        for line in std::fs::read_to_string(t)?.lines() {
            let n = normalize(line, &numerals);
            dropped += n.dropped.len();
            if !n.tokens.is_empty() {
                lm_lines.push_str(&n.joined());
                lm_lines.push('\n');
                lm_sentences += 1;
            }
        }
    }
    write_manifest(&dir.join("short.jsonl"), &short)?;
    write_manifest(&dir.join("test.jsonl"), &test)?;
    if let Some(l) = &long {
        write_manifest(&dir.join("long.jsonl"), l)?;
    }
    std::fs::write(dir.join("lm_text.txt"), lm_lines)?;
    write_json(
        &dir.join("summary.json"),
        &DataSummary {
            short: corpus_stats(&short),
            test: corpus_stats(&test),
            long: long.as_deref().map(corpus_stats),
            dropped_numerals: dropped,
            lm_sentences,
        },
    )
}

fn stage_lexicon(cfg: &PipelineConfig, corpora: &Corpora, dir: &Path) -> StageResult {
    let wl = build_wordlist(corpora.lm_text.iter().flatten().map(String::as_str), cfg.lexicon.min_count);
    let transcript_words: Vec<String> = corpora
        .short
        .iter()
        .chain(&corpora.long)
        .flat_map(|u| u.text.iter().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let wl = supplement(&wl, &transcript_words);
    let (lex, rejected) = graphemic_lexicon(&wl)?;
    std::fs::write(dir.join("wordlist.txt"), wl.to_text())?;
    std::fs::write(dir.join("lexicon.txt"), lex.to_text())?;
    let oov = oov_rate(&lex, corpora.test.iter().flat_map(|u| u.text.iter().map(String::as_str)));
    write_json(
        &dir.join("summary.json"),
        &LexiconSummary { words: lex.len(), rejected: rejected.len(), test_oov_rate: oov },
    )
}

fn stage_features(cfg: &PipelineConfig, audio: &BTreeSet<PathBuf>, dir: &Path) -> StageResult {
    let feats = dir.join("feats");
    std::fs::create_dir_all(&feats)?;
    let list: Vec<&PathBuf> = audio.iter().collect();
    list.par_iter().enumerate().try_for_each(|(i, p)| -> StageResult {
        let samples = read_canonical_pcm(p)?;
        let f = compute_mfcc(&samples, &cfg.features).map_err(|e| format!("{}: {e}", p.display()))?;
        write_feature_dump(&feats.join(format!("{i:05}.feat")), &f)?;
        Ok(())
    })?;
    let index: BTreeMap<String, String> =
        list.iter().enumerate().map(|(i, p)| (p.display().to_string(), format!("feats/{i:05}.feat"))).collect();
    write_json(&dir.join("index.json"), &index)
}

fn model_summary(model: &AcousticModel, trace: &[IterStats], utts: &[Utterance], shortfall: bool) -> ModelSummary {
    let last = trace.last();
    ModelSummary {
        train_utterances: utts.len(),
        train_minutes: crate::util::round2(utts.iter().map(|u| u.duration).sum::<f64>() / 60.0),
        shortfall,
        states: model.states.len(),
        gaussians: model.n_gaussians(),
        contexts: model.n_contexts(),
        iterations: trace.len(),
        final_log_likelihood: last.map_or(0.0, |s| s.updated_ll),
        failed_alignments: last.map_or(0, |s| s.n_failed),
    }
}

fn train_subset(cfg: &PipelineConfig, short: &[Utterance]) -> (Vec<Utterance>, bool) {
    match cfg.budget_minutes {
        Some(b) => {
            let s = subset_by_duration(short, b, cfg.seed);
            (s.utterances, s.shortfall)
        }
        None => (short.to_vec(), false),
    }
}

fn stage_mono(cfg: &PipelineConfig, corpora: &Corpora, lex: &Lexicon, store: &FeatureStore, dir: &Path) -> StageResult {
    let (subset, shortfall) = train_subset(cfg, &corpora.short);
    if subset.is_empty() {
        return Err("training subset is empty".into());
    }
    let inputs = store.align_inputs(&subset)?;
    let init = flat_start(&inputs, lex, cfg.topology, cfg.mono.align.map_oov)?;
    let (model, trace) = train(init, lex, &inputs, &cfg.mono)?;
    model.save(&dir.join("model.bam"))?;
    write_json(&dir.join("trace.json"), &trace)?;
    let ids: Vec<&str> = subset.iter().map(|u| u.id.as_str()).collect();
    write_json(&dir.join("subset.json"), &ids)?;
    write_json(&dir.join("summary.json"), &model_summary(&model, &trace, &subset, shortfall))
}

fn stage_harvest(cfg: &PipelineConfig, corpora: &Corpora, lex: &Lexicon, store: &FeatureStore, mono: &AcousticModel, dir: &Path) -> StageResult {
    let results: Vec<Result<(Vec<SegmentCandidate>, SegmentReport), String>> = corpora
        .long
        .par_iter()
        .map(|u| {
            let raw = store.raw(&u.audio_path).map_err(|e| e.to_string())?;
            harvest_entry(u, &raw, mono, &cfg.harvest).map_err(|e| e.to_string())
        })
        .collect();
    let mut reports = Vec::new();
    let mut segments = Vec::new();
    let mut cand_lines = String::new();
    let mut failed = 0;
    let mut n_cands = 0;
    for (u, r) in corpora.long.iter().zip(results) {
        match r {
            Ok((cands, report)) => {
                n_cands += cands.len();
                for c in &cands {
                    cand_lines.push_str(&serde_json::to_string(c)?);
                    cand_lines.push('\n');
                }
                segments.extend(accepted_segments(u, &cands));
                reports.push(report);
            }
            Err(e) => {
                log::warn!("harvest: {}: {e}", u.id);
                failed += 1;
                reports.push(SegmentReport {
                    recording_id: u.id.clone(),
                    transcript_words: u.text.len(),
                    hyp_words: 0,
                    n_candidates: 0,
                    n_accepted: 0,
                    accepted_words: 0,
                    accepted_seconds: 0.0,
                    acceptance_rate: 0.0,
                    regions: Vec::new(),
                    note: Some(e),
                });
            }
        }
    }
    write_manifest(&dir.join("segments.jsonl"), &segments)?;
    std::fs::write(dir.join("candidates.jsonl"), cand_lines)?;
    write_json(&dir.join("reports.json"), &reports)?;
    let rate = success_rate(&reports);
    let seg_inputs = store.align_inputs(&segments)?;
    let aligned = align_corpus(mono, lex, &seg_inputs, &cfg.mono.align);
    write_json(
        &dir.join("summary.json"),
        &HarvestSummary {
            recordings: reports.len(),
            failed_recordings: failed,
            recording_rate: rate.recording_rate,
            word_yield: rate.word_yield,
            warning: rate.warning,
            candidates: n_cands,
            accepted: segments.len(),
            accepted_minutes: crate::util::round2(segments.iter().map(|s| s.duration).sum::<f64>() / 60.0),
            segment_alignment_success: aligned.success_rate,
        },
    )
}

fn stage_triphone(
    cfg: &PipelineConfig,
    train_utts: &[Utterance],
    shortfall: bool,
    lex: &Lexicon,
    store: &FeatureStore,
    mono: &AcousticModel,
    dir: &Path,
) -> StageResult {
    let inputs = store.align_inputs(train_utts)?;
    let aligned = align_corpus(mono, lex, &inputs, &cfg.triphone.schedule.align);
    let paths: Vec<_> = aligned.results.into_iter().map(Result::ok).collect();
    let (model, trace) = train_triphone(mono, lex, &paths, &inputs, cfg.triphone.tie_min_count, &cfg.triphone.schedule)?;
    model.save(&dir.join("model.bam"))?;
    write_json(&dir.join("trace.json"), &trace)?;
    write_json(&dir.join("summary.json"), &model_summary(&model, &trace, train_utts, shortfall))
}

fn stage_lm(cfg: &PipelineConfig, corpora: &Corpora, lex: &Lexicon, dir: &Path) -> StageResult {
    let lm = if cfg.use_lm {
        let sentences: Vec<Vec<String>> = if corpora.lm_text.is_empty() {
            corpora.short.iter().chain(&corpora.long).map(|u| u.text.clone()).filter(|t| !t.is_empty()).collect()
        } else {
            corpora.lm_text.clone()
        };
        train_ngram(&sentences, &cfg.lm)?
    } else {
        NGramLM::uniform(lex.words().map(|(w, _)| w).filter(|w| *w != UNK))
    };
    lm.write_arpa(&dir.join("lm.arpa"))?;
    let refs: Vec<Vec<String>> = corpora.test.iter().map(|u| u.text.clone()).collect();
    let ppl = perplexity(&lm, &refs)?;
    write_json(
        &dir.join("summary.json"),
        &LmSummary {
            kind: if cfg.use_lm { "ngram".into() } else { "uniform".into() },
            order: lm.order(),
            test_perplexity: ppl.perplexity,
            test_oov: ppl.n_oov,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct DecodeSummary {
    utterances: usize,
    failures: Vec<(String, String)>,
}

#[derive(Deserialize)]
struct HypRecord {
    id: String,
    text: String,
}

fn stage_decode(cfg: &PipelineConfig, corpora: &Corpora, lex: &Lexicon, store: &FeatureStore, model_path: &Path, lm_path: &Path, dir: &Path) -> Result<f64, BoxError> {
    let model = AcousticModel::load(model_path)?;
    let lm = NGramLM::read_arpa(lm_path)?;
    let tree = build_prefix_tree(lex, false);
    let feats = store.utterances(&corpora.test)?;
    let items: Vec<DecodeItem> =
        corpora.test.iter().zip(feats).map(|(u, feats)| DecodeItem { id: u.id.clone(), feats }).collect();
    let batch = decode_corpus(&model, &lm, &tree, &items, &cfg.decode)?;
    let (mut jsonl, mut ctm, mut failures) = (String::new(), String::new(), Vec::new());
    for (id, r) in &batch.results {
        match r {
            Ok(h) => {
                jsonl.push_str(&hypothesis_json(id, h));
                jsonl.push('\n');
                ctm.push_str(&hypothesis_ctm(id, 0.0, h));
            }
            Err(e) => failures.push((id.clone(), e.to_string())),
        }
    }
    std::fs::write(dir.join("hyp.jsonl"), jsonl)?;
    std::fs::write(dir.join("hyp.ctm"), ctm)?;
    write_json(&dir.join("summary.json"), &DecodeSummary { utterances: items.len(), failures })?;
    Ok(batch.real_time_factor())
}

fn stage_score(corpora: &Corpora, decode_dir: &Path, dir: &Path) -> StageResult {
    let mut hyps: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in std::fs::read_to_string(decode_dir.join("hyp.jsonl"))?.lines() {
        let r: HypRecord = serde_json::from_str(line)?;
        hyps.insert(r.id, r.text.split_whitespace().map(str::to_string).collect());
    }
    let pairs: Vec<ScoredPair> = corpora
        .test
        .iter()
        .map(|u| ScoredPair {
            id: u.id.clone(),
            reference: u.text.clone(),
            hypothesis: hyps.get(&u.id).cloned().unwrap_or_default(),
        })
        .collect();
    let w = wer(&pairs)?;
    let c = cer(&pairs)?;
    std::fs::write(dir.join("wer.json"), w.to_json())?;
    std::fs::write(dir.join("cer.json"), c.to_json())?;
    std::fs::write(dir.join("per_utterance.tsv"), w.per_utterance_tsv())?;
    std::fs::write(dir.join("report.txt"), format!("{}\n{}", w.table(), c.table()))?;
    write_json(&dir.join("summary.json"), &(ScoreSummary::from(&w), ScoreSummary::from(&c)))
}

/// Run every stage, writing the config snapshot and summary into the workdir.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    run_pipeline_at(cfg, &cfg.paths.workdir)
}

/// As [`run_pipeline`], with `run.toml` and `summary.json` written to `run_dir`.
pub fn run_pipeline_at(cfg: &PipelineConfig, run_dir: &Path) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let work = cfg.paths.workdir.as_path();
    let wr = |p: &Path, e: std::io::Error| PipelineError::Write { path: p.display().to_string(), msg: e.to_string() };
    std::fs::create_dir_all(run_dir).map_err(|e| wr(run_dir, e))?;
    let snapshot = run_dir.join("run.toml");
    std::fs::write(&snapshot, cfg.to_toml()).map_err(|e| wr(&snapshot, e))?;
    let mut stages = Vec::new();

    // normalize
    let p = &cfg.paths;
    let mut kb = KeyBuilder::new("normalize");
    let hash_err = |name: &str, e: std::io::Error| PipelineError::Config(format!("cannot read {name}: {e}"));
    kb = kb.file("short", &p.short_manifest).map_err(|e| hash_err("short manifest", e))?;
    kb = kb.file("test", &p.test_manifest).map_err(|e| hash_err("test manifest", e))?;
    for (tag, path) in [("long", &p.long_manifest), ("text", &p.text_corpus), ("numerals", &p.numerals)] {
        if let Some(path) = path {
            kb = kb.file(tag, path).map_err(|e| hash_err(tag, e))?;
        }
    }
    // Manifest audio references resolve against the manifest location.
    kb = kb.params(&(&p.short_manifest, &p.test_manifest, &p.long_manifest));
    let norm = run_stage(work, "normalize", kb.finish(), |d| stage_normalize(cfg, d))?;
    let corpora = Corpora::load(&norm.dir).map_err(|e| stage_err("normalize", &norm.dir, e))?;

    // lexicon
    let key = KeyBuilder::new("lexicon").params(&cfg.lexicon).upstream(&norm.key).finish();
    let lex_out = run_stage(work, "lexicon", key, |d| stage_lexicon(cfg, &corpora, d))?;
    let lex = Lexicon::load(&lex_out.dir.join("lexicon.txt")).map_err(|e| stage_err("lexicon", &lex_out.dir, e))?;

    // features: keyed on audio content, not on transcripts
    let audio = corpora.audio_paths();
    let mut kb = KeyBuilder::new("features").params(&cfg.features);
    for a in &audio {
        kb = kb.file(&a.display().to_string(), a).map_err(|e| stage_err("features", a, e))?;
    }
    let feat = run_stage(work, "features", kb.finish(), |d| stage_features(cfg, &audio, d))?;
    let store = FeatureStore::open(&feat.dir).map_err(|e| stage_err("features", &feat.dir, e))?;

    // mono
    let key = KeyBuilder::new("mono")
        .params(&(cfg.seed, cfg.budget_minutes, cfg.topology, &cfg.mono))
        .upstream(&norm.key)
        .upstream(&lex_out.key)
        .upstream(&feat.key)
        .finish();
    let mono_out = run_stage(work, "mono", key, |d| stage_mono(cfg, &corpora, &lex, &store, d))?;
    let mono = AcousticModel::load(&mono_out.dir.join("model.bam")).map_err(|e| stage_err("mono", &mono_out.dir, e))?;

    // harvest
    let mut harvest_out = None;
    if !corpora.long.is_empty() {
        let key = KeyBuilder::new("harvest").params(&cfg.harvest).upstream(&mono_out.key).upstream(&norm.key).finish();
        harvest_out = Some(run_stage(work, "harvest", key, |d| stage_harvest(cfg, &corpora, &lex, &store, &mono, d))?);
    }

    // triphone
    let (subset, shortfall) = train_subset(cfg, &corpora.short);
    let mut tri_out = None;
    if cfg.triphone.enabled {
        let mut train_utts = subset.clone();
        let mut kb = KeyBuilder::new("triphone").params(&cfg.triphone).upstream(&mono_out.key);
        if let Some(h) = &harvest_out {
            let segs = load_manifest(&h.dir.join("segments.jsonl")).map_err(|e| stage_err("harvest", &h.dir, e))?;
            train_utts.extend(segs);
            kb = kb.upstream(&h.key);
        }
        let key = kb.finish();
        tri_out = Some(run_stage(work, "triphone", key, |d| stage_triphone(cfg, &train_utts, shortfall, &lex, &store, &mono, d))?);
    }
    let model_out = tri_out.as_ref().unwrap_or(&mono_out);

    // lm
    let key = KeyBuilder::new("lm").params(&(cfg.use_lm, &cfg.lm)).upstream(&norm.key).upstream(&lex_out.key).finish();
    let lm_out = run_stage(work, "lm", key, |d| stage_lm(cfg, &corpora, &lex, d))?;

    // decode
    let key = KeyBuilder::new("decode")
        .params(&cfg.decode)
        .upstream(&model_out.key)
        .upstream(&lm_out.key)
        .upstream(&feat.key)
        .upstream(&norm.key)
        .finish();
    let mut rtf = None;
    let dec_out = run_stage(work, "decode", key, |d| {
        rtf = Some(stage_decode(cfg, &corpora, &lex, &store, &model_out.dir.join("model.bam"), &lm_out.dir.join("lm.arpa"), d)?);
        Ok(())
    })?;
    if let Some(rtf) = rtf {
        log::info!("decode: real-time factor {rtf:.4}");
        let timing = run_dir.join("timing.json");
        std::fs::write(&timing, format!("{{\"decode_rtf\": {rtf}}}\n")).map_err(|e| wr(&timing, e))?;
    }

    // score
    let key = KeyBuilder::new("score").upstream(&dec_out.key).upstream(&norm.key).finish();
    let score_out = run_stage(work, "score", key, |d| stage_score(&corpora, &dec_out.dir, d))?;

    let (w, c): (ScoreSummary, ScoreSummary) = read_json(&score_out.dir.join("summary.json"))?;
    let dec: DecodeSummary = read_json(&dec_out.dir.join("summary.json"))?;
    stages.extend([norm, lex_out, feat, mono_out.clone()]);
    let harvest = match &harvest_out {
        Some(h) => Some(read_json(&h.dir.join("summary.json"))?),
        None => None,
    };
    let triphone = match &tri_out {
        Some(t) => Some(read_json(&t.dir.join("summary.json"))?),
        None => None,
    };
    stages.extend(harvest_out.clone());
    stages.extend(tri_out.clone());
    stages.extend([lm_out, dec_out, score_out]);
    let summary = RunSummary {
        config_hash: cfg.hash(),
        stages: stages.iter().map(|s| (s.name.clone(), s.key.clone())).collect(),
        data: read_json(&stages[0].dir.join("summary.json"))?,
        lexicon: read_json(&stages[1].dir.join("summary.json"))?,
        mono: read_json(&mono_out.dir.join("summary.json"))?,
        harvest,
        triphone,
        lm: read_json(&stages.iter().find(|s| s.name == "lm").expect("lm stage").dir.join("summary.json"))?,
        decode_failures: dec.failures.len(),
        wer: w,
        cer: c,
    };
    let path = run_dir.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| wr(&path, e))?;
    Ok(RunOutcome { summary, stages, run_dir: run_dir.to_path_buf() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_materializes_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 3\n[paths]\nshort_manifest = \"a.jsonl\"\n", Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.paths.short_manifest, PathBuf::from("/base/a.jsonl"));
        let text = cfg.to_toml();
        assert!(text.contains("[decode]") && text.contains("beam"));
        let back = PipelineConfig::from_toml(&text, Path::new("/elsewhere")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn validation_catches_missing_paths() {
        let tmp = tempfile::tempdir().unwrap();
        let m = tmp.path().join("m.jsonl");
        std::fs::write(&m, "").unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.paths = Paths { short_manifest: m.clone(), test_manifest: m.clone(), workdir: tmp.path().join("w"), ..Default::default() };
        cfg.validate().unwrap();
        cfg.paths.numerals = Some(tmp.path().join("missing.tsv"));
        let e = cfg.validate().unwrap_err();
        assert!(e.is_validation() && e.to_string().contains("numerals"), "{e}");
        cfg.paths.numerals = None;
        cfg.decode.beam = 0.0;
        assert!(cfg.validate().is_err());
    }
}
