//! Corpus data model: manifests, audio canonicalization, statistics, and
//! duration-budgeted subsets.

pub mod audio;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::textnorm::is_normalized_token;
use crate::util::round2;
use audio::{downmix, quantize_i16, read_wav, write_pcm16, SincResampler, TARGET_RATE};

/// Recordings at least this long count as long-form.
pub const LONG_FORM_SECONDS: f64 = 30.0;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("{path}:{line}: duplicate id `{id}`")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("{path}:{line}: audio `{audio}` does not exist")]
    DanglingRecording { path: String, line: usize, audio: String },
    #[error("{path}: {msg}")]
    Audio { path: String, msg: String },
    #[error("{path}: unsupported audio: {msg}")]
    UnsupportedAudio { path: String, msg: String },
    #[error("{path}: audio has no samples")]
    EmptyAudio { path: String },
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordingKind {
    ShortForm,
    LongForm,
}

impl RecordingKind {
    pub fn from_duration(seconds: f64) -> Self {
        if seconds >= LONG_FORM_SECONDS {
            Self::LongForm
        } else {
            Self::ShortForm
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub id: String,
    pub audio_path: PathBuf,
    pub sample_rate: u32,
    pub channels: u16,
    pub duration: f64,
    pub kind: RecordingKind,
}

/// One manifest entry: a whole recording, or a time-bounded segment of one.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Audio reference exactly as written in the manifest.
    pub audio: String,
    /// `audio` resolved against the manifest directory.
    pub audio_path: PathBuf,
    pub recording_id: String,
    pub start: Option<f64>,
    pub end: Option<f64>,
    pub text: Vec<String>,
    /// Seconds covered by this utterance.
    pub duration: f64,
    pub kind: RecordingKind,
}

impl Utterance {
    /// An in-memory utterance covering a whole recording.
    pub fn whole(id: &str, audio: impl Into<PathBuf>, text: Vec<String>, duration: f64) -> Self {
        let audio_path: PathBuf = audio.into();
        Self {
            id: id.to_string(),
            audio: audio_path.display().to_string(),
            audio_path,
            recording_id: id.to_string(),
            start: None,
            end: None,
            text,
            duration,
            kind: RecordingKind::from_duration(duration),
        }
    }

    pub fn text_line(&self) -> String {
        self.text.join(" ")
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    audio: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    recording: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    end: Option<f64>,
    text: String,
}

/// Manifest loading options.
#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Require every token to already satisfy the normalization rules.
    pub require_normalized: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { require_normalized: true }
    }
}

/// Load a JSONL manifest whose text is already normalized.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>, CorpusError> {
    load_manifest_with(path, LoadOptions::default())
}

pub fn load_manifest_with(path: &Path, opts: LoadOptions) -> Result<Vec<Utterance>, CorpusError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Manifest {
        path: shown.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut durations: BTreeMap<PathBuf, f64> = BTreeMap::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CorpusError::Manifest { path: shown.clone(), line: line_no, msg };
        let entry: ManifestLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if entry.id.is_empty() {
            return Err(err("empty id".into()));
        }
        if !seen.insert(entry.id.clone()) {
            return Err(CorpusError::DuplicateId { path: shown.clone(), line: line_no, id: entry.id });
        }
        let tokens: Vec<String> = entry.text.split_whitespace().map(str::to_string).collect();
        if opts.require_normalized {
            if let Some(bad) = tokens.iter().find(|t| !is_normalized_token(t)) {
                return Err(err(format!("token `{bad}` is not normalized")));
            }
        }
        match (entry.start, entry.end) {
            (Some(s), Some(e)) if !(s >= 0.0 && s < e) => {
                return Err(err(format!("invalid bounds: start {s} must be >= 0 and < end {e}")))
            }
            (Some(_), None) | (None, Some(_)) => {
                return Err(err("start and end must be given together".into()))
            }
            _ => {}
        }
        let audio_path = base.join(&entry.audio);
        if !audio_path.is_file() {
            return Err(CorpusError::DanglingRecording {
                path: shown.clone(),
                line: line_no,
                audio: entry.audio,
            });
        }
        let rec_duration = match durations.get(&audio_path) {
            Some(&d) => d,
            None => {
                let (_, d) = audio::probe_wav(&audio_path)?;
                durations.insert(audio_path.clone(), d);
                d
            }
        };
        let duration = match (entry.start, entry.end) {
            (Some(s), Some(e)) => {
                // Half a millisecond of slack for decimal rounding in the manifest.
                if e > rec_duration + 5e-4 {
                    return Err(err(format!("end {e} exceeds recording duration {rec_duration:.3}")));
                }
                e - s
            }
            _ => rec_duration,
        };
        let recording_id = entry.recording.unwrap_or_else(|| entry.id.clone());
        out.push(Utterance {
            id: entry.id,
            audio: entry.audio,
            audio_path,
            recording_id,
            start: entry.start,
            end: entry.end,
            text: tokens,
            duration,
            kind: RecordingKind::from_duration(rec_duration),
        });
    }
    Ok(out)
}

pub fn manifest_line(u: &Utterance) -> String {
    let line = ManifestLine {
        id: u.id.clone(),
        audio: u.audio.clone(),
        recording: (u.recording_id != u.id).then(|| u.recording_id.clone()),
        start: u.start,
        end: u.end,
        text: u.text_line(),
    };
    serde_json::to_string(&line).expect("manifest line serializes")
}

pub fn write_manifest(path: &Path, utts: &[Utterance]) -> Result<(), CorpusError> {
    let mut body = String::new();
    for u in utts {
        body.push_str(&manifest_line(u));
        body.push('\n');
    }
    write_file(path, body.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let werr = |source| CorpusError::Write { path: path.display().to_string(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(werr)?;
    }
    let mut f = std::fs::File::create(path).map_err(werr)?;
    f.write_all(bytes).map_err(werr)
}

/// Convert any supported WAV file to 16 kHz mono PCM16.
pub fn canonicalize_audio(input: &Path, out: &Path) -> Result<Recording, CorpusError> {
    let decoded = read_wav(input)?;
    if decoded.frames() == 0 {
        return Err(CorpusError::EmptyAudio { path: input.display().to_string() });
    }
    let mono = downmix(&decoded);
    let resampled = SincResampler::new(decoded.sample_rate, TARGET_RATE).process(&mono);
    if resampled.is_empty() {
        return Err(CorpusError::EmptyAudio { path: input.display().to_string() });
    }
    let pcm: Vec<i16> = resampled.iter().map(|&x| quantize_i16(x)).collect();
    write_pcm16(out, &pcm, TARGET_RATE)?;
    let duration = pcm.len() as f64 / TARGET_RATE as f64;
    Ok(Recording {
        id: out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        audio_path: out.to_path_buf(),
        sample_rate: TARGET_RATE,
        channels: 1,
        duration,
        kind: RecordingKind::from_duration(duration),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub n_utterances: usize,
    pub minutes: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_recordings: usize,
    pub n_utterances: usize,
    /// Total minutes, rounded to two decimals.
    pub total_minutes: f64,
    pub by_kind: BTreeMap<RecordingKind, KindStats>,
}

pub fn corpus_stats(utts: &[Utterance]) -> CorpusStats {
    let recordings: HashSet<&str> = utts.iter().map(|u| u.recording_id.as_str()).collect();
    let mut by_kind: BTreeMap<RecordingKind, (usize, f64)> = BTreeMap::new();
    let mut total = 0.0;
    for u in utts {
        total += u.duration;
        let e = by_kind.entry(u.kind).or_default();
        e.0 += 1;
        e.1 += u.duration;
    }
    CorpusStats {
        n_recordings: recordings.len(),
        n_utterances: utts.len(),
        total_minutes: round2(total / 60.0),
        by_kind: by_kind
            .into_iter()
            .map(|(k, (n, secs))| (k, KindStats { n_utterances: n, minutes: round2(secs / 60.0) }))
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct Subset {
    pub utterances: Vec<Utterance>,
    pub seconds: f64,
    /// The pool held less audio than requested; everything was returned.
    pub shortfall: bool,
}

/// Seeded shuffle followed by greedy accumulation until the budget is met.
///
/// The shuffle depends only on the seed and pool size, so a smaller budget is
/// always a prefix of a larger one under the same seed.
pub fn subset_by_duration(utts: &[Utterance], minutes: f64, seed: u64) -> Subset {
    let target = minutes * 60.0;
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = Vec::new();
    let mut seconds = 0.0;
    for i in order {
        if seconds >= target {
            break;
        }
        seconds += utts[i].duration;
        picked.push(utts[i].clone());
    }
    let shortfall = seconds < target;
    if shortfall {
        log::warn!("subset: requested {minutes} min but only {:.2} min available", seconds / 60.0);
    }
    Subset { utterances: picked, seconds, shortfall }
}

/// Write `wav.scp`, `text`, and (for bounded entries) `segments`.
pub fn export_kaldi(dir: &Path, utts: &[Utterance]) -> Result<(), CorpusError> {
    let mut wav: BTreeMap<&str, &str> = BTreeMap::new();
    let mut text = String::new();
    let mut segments = String::new();
    let mut sorted: Vec<&Utterance> = utts.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for u in sorted {
        wav.insert(&u.recording_id, &u.audio);
        text.push_str(&format!("{} {}\n", u.id, u.text_line()));
        if let (Some(s), Some(e)) = (u.start, u.end) {
            segments.push_str(&format!("{} {} {:.2} {:.2}\n", u.id, u.recording_id, s, e));
        }
    }
    let scp: String = wav.iter().map(|(id, p)| format!("{id} {p}\n")).collect();
    write_file(&dir.join("wav.scp"), scp.as_bytes())?;
    write_file(&dir.join("text"), text.as_bytes())?;
    if !segments.is_empty() {
        write_file(&dir.join("segments"), segments.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: &str, secs: f64) -> Utterance {
        Utterance::whole(id, format!("{id}.wav"), vec!["A".into()], secs)
    }

    #[test]
    fn stats_reproduce_minimal_regime_shape() {
        // 433 files totalling 8.5 minutes.
        let utts: Vec<_> = (0..433).map(|i| utt(&format!("u{i}"), 510.0 / 433.0)).collect();
        let s = corpus_stats(&utts);
        assert_eq!(s.n_utterances, 433);
        assert_eq!(s.total_minutes, 8.50);
        assert_eq!(s.by_kind[&RecordingKind::ShortForm].n_utterances, 433);
    }

    #[test]
    fn stats_simple_cases() {
        assert_eq!(corpus_stats(&[]), CorpusStats::default());
        let s = corpus_stats(&[utt("a", 30.0), utt("b", 30.0)]);
        assert_eq!(s.total_minutes, 1.00);
        assert_eq!(s.n_recordings, 2);
    }

    #[test]
    fn subset_counts_and_determinism() {
        let pool: Vec<_> = (0..10).map(|i| utt(&format!("u{i}"), 60.0)).collect();
        assert!(subset_by_duration(&pool, 0.0, 1).utterances.is_empty());
        let a = subset_by_duration(&pool, 5.0, 7);
        assert_eq!(a.utterances.len(), 5);
        assert!(!a.shortfall);
        let b = subset_by_duration(&pool, 5.0, 7);
        assert_eq!(a.utterances, b.utterances);
        let big = subset_by_duration(&pool, 20.0, 7);
        assert!(big.shortfall);
        assert_eq!(big.utterances.len(), 10);
    }
}
