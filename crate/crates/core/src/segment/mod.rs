//! Long-form segmentation: chunked decoding with a transcript-biased LM,
//! Smith-Waterman alignment of hypothesis to transcript, and cutting of
//! matched regions at silences into utterance-sized segments.

mod sw;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use sw::{smith_waterman, AlignedPair, AlignedRegion, PairOp, SwConfig};

use crate::am::AcousticModel;
use crate::corpus::{RecordingKind, Utterance};
use crate::decode::{build_prefix_tree, DecodeConfig, DecodeError, Decoder};
use crate::features::{cmvn, silence_mask, FeatureMatrix, SilenceMask};
use crate::lexicon::Lexicon;
use crate::lm::{biased_lm, LmError};

#[derive(Debug, thiserror::Error)]
pub enum SegmentError {
    #[error("recording `{id}` could not be decoded: {source}")]
    Undecodable { id: String, source: DecodeError },
    #[error("biased LM: {0}")]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestConfig {
    pub chunk_len: f64,
    pub overlap: f64,
    pub sw: SwConfig,
    /// Shortest silence (seconds) that may separate two segments.
    pub min_gap: f64,
    /// Neighbouring pieces are merged while the result stays this short.
    pub target_dur: f64,
    pub min_dur: f64,
    pub max_dur: f64,
    pub accept_ratio: f64,
    pub unk_mass: f64,
    pub silence_margin_db: f64,
    pub decode: DecodeConfig,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            chunk_len: 30.0,
            overlap: 5.0,
            sw: SwConfig::default(),
            min_gap: 0.15,
            target_dur: 10.0,
            min_dur: 1.0,
            max_dur: 20.0,
            accept_ratio: 0.9,
            unk_mass: 0.01,
            silence_margin_db: 10.0,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub recording_id: String,
    pub start: f64,
    pub end: f64,
    pub feats: FeatureMatrix,
}

/// `(start, end)` seconds of consecutive chunks covering `[0, duration]`.
pub fn chunk_spans(duration: f64, chunk_len: f64, overlap: f64) -> Vec<(f64, f64)> {
    assert!(chunk_len > overlap && overlap >= 0.0, "chunk length must exceed overlap");
    let stride = chunk_len - overlap;
    let mut spans = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k as f64 * stride;
        let end = (start + chunk_len).min(duration);
        spans.push((start, end));
        if end >= duration {
            break;
        }
        k += 1;
    }
    spans
}

/// Split recording features into overlapping chunks.
pub fn chunk(recording_id: &str, feats: &FeatureMatrix, chunk_len: f64, overlap: f64) -> Vec<Chunk> {
    let shift = feats.frame_shift;
    chunk_spans(feats.duration(), chunk_len, overlap)
        .into_iter()
        .map(|(start, end)| {
            let (a, b) = ((start / shift).round() as usize, (end / shift).round() as usize);
            Chunk { recording_id: recording_id.to_string(), start, end, feats: feats.slice(a, b) }
        })
        .collect()
}

/// A hypothesis word in recording time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub word: String,
    pub start: f64,
    pub end: f64,
}

/// Keep each word from the chunk whose centre is nearest to the word's
/// midpoint (ties to the earlier chunk).
pub fn merge_chunk_words(spans: &[(f64, f64)], per_chunk: &[Vec<TimedWord>]) -> Vec<TimedWord> {
    let centers: Vec<f64> = spans.iter().map(|(a, b)| 0.5 * (a + b)).collect();
    let mut out = Vec::new();
    for (k, words) in per_chunk.iter().enumerate() {
        for w in words {
            let mid = 0.5 * (w.start + w.end);
            let nearest = centers
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - mid).abs().total_cmp(&(b.1 - mid).abs()).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i);
            if nearest == Some(k) {
                out.push(w.clone());
            }
        }
    }
    out.sort_by(|a, b| a.start.total_cmp(&b.start));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentCandidate {
    pub recording_id: String,
    pub start: f64,
    pub end: f64,
    pub text: Vec<String>,
    pub match_ratio: f64,
    /// Half-open transcript index range the text was taken from.
    pub ref_range: (usize, usize),
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<String>,
}

impl SegmentCandidate {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Corpus entry for this segment of `audio`.
    pub fn to_utterance(&self, id: &str, audio: &str, audio_path: &Path) -> Utterance {
        Utterance {
            id: id.to_string(),
            audio: audio.to_string(),
            audio_path: audio_path.to_path_buf(),
            recording_id: self.recording_id.clone(),
            start: Some(self.start),
            end: Some(self.end),
            text: self.text.clone(),
            duration: self.duration(),
            kind: RecordingKind::ShortForm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDiag {
    pub score: i32,
    pub hyp_range: (usize, usize),
    pub ref_range: (usize, usize),
    pub matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub recording_id: String,
    pub transcript_words: usize,
    pub hyp_words: usize,
    pub n_candidates: usize,
    pub n_accepted: usize,
    pub accepted_words: usize,
    pub accepted_seconds: f64,
    pub acceptance_rate: f64,
    pub regions: Vec<RegionDiag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// One run of aligned pairs between two cut points.
struct Piece {
    pairs: Vec<AlignedPair>,
}

impl Piece {
    fn hyp_bounds(&self, hyp: &[TimedWord]) -> (f64, f64) {
        let first = self.pairs.iter().find_map(|p| p.hyp).expect("piece has a hypothesis word");
        let last = self.pairs.iter().rev().find_map(|p| p.hyp).expect("piece has a hypothesis word");
        (hyp[first].start, hyp[last].end)
    }
}

/// Split a region into pieces at silent inter-word gaps and at runs of two
/// or more skipped transcript words. Transcript words skipped at a cut are
/// dropped.
fn cut_region(region: &AlignedRegion, hyp: &[TimedWord], mask: &SilenceMask, cfg: &HarvestConfig, shift: f64) -> Vec<Piece> {
    let min_frames = (cfg.min_gap / shift).round() as usize;
    let mut pieces = Vec::new();
    let mut cur: Vec<AlignedPair> = Vec::new();
    let mut pending: Vec<AlignedPair> = Vec::new();
    let mut last_hyp: Option<usize> = None;
    for &p in &region.pairs {
        let Some(h) = p.hyp else {
            pending.push(p);
            continue;
        };
        if let Some(prev) = last_hyp {
            let (a, b) = ((hyp[prev].end / shift).round() as usize, (hyp[h].start / shift).round() as usize);
            let silent = b > a && mask.longest_silence(a, b) >= min_frames;
            if silent || pending.len() >= 2 {
                pieces.push(Piece { pairs: std::mem::take(&mut cur) });
                pending.clear();
            }
        }
        cur.append(&mut pending);
        cur.push(p);
        last_hyp = Some(h);
    }
    if !cur.is_empty() {
        pieces.push(Piece { pairs: cur });
    }
    pieces
}

fn candidate_from(pairs: &[AlignedPair], hyp: &[TimedWord], reference: &[String], recording_id: &str) -> SegmentCandidate {
    let piece = Piece { pairs: pairs.to_vec() };
    let (start, end) = piece.hyp_bounds(hyp);
    let refs: Vec<usize> = pairs.iter().filter_map(|p| p.reference).collect();
    let ref_range = match (refs.first(), refs.last()) {
        (Some(&a), Some(&b)) => (a, b + 1),
        _ => (0, 0),
    };
    let matches = pairs.iter().filter(|p| p.op == PairOp::Match).count();
    SegmentCandidate {
        recording_id: recording_id.to_string(),
        start,
        end,
        text: reference[ref_range.0..ref_range.1].to_vec(),
        match_ratio: matches as f64 / pairs.len() as f64,
        ref_range,
        accepted: false,
        reject_reason: None,
    }
}

/// Turn Smith-Waterman regions into judged segment candidates.
pub fn candidates_from_regions(
    recording_id: &str,
    regions: &[AlignedRegion],
    hyp: &[TimedWord],
    reference: &[String],
    mask: &SilenceMask,
    shift: f64,
    cfg: &HarvestConfig,
) -> Vec<SegmentCandidate> {
    let mut out = Vec::new();
    for region in regions {
        if region.matches() < cfg.sw.min_island {
            continue;
        }
        let pieces = cut_region(region, hyp, mask, cfg, shift);
        let mut group: Vec<AlignedPair> = Vec::new();
        let mut group_start = 0.0;
        let mut last_ref: Option<usize> = None;
        for piece in pieces {
            let (s, e) = piece.hyp_bounds(hyp);
            let first_ref = piece.pairs.iter().find_map(|p| p.reference);
            let contiguous = match (last_ref, first_ref) {
                (Some(a), Some(b)) => b == a + 1,
                _ => true,
            };
            if !group.is_empty() && (!contiguous || e - group_start > cfg.target_dur) {
                out.push(candidate_from(&group, hyp, reference, recording_id));
                group.clear();
            }
            if group.is_empty() {
                group_start = s;
            }
            if let Some(r) = piece.pairs.iter().rev().find_map(|p| p.reference) {
                last_ref = Some(r);
            }
            group.extend(piece.pairs);
        }
        if !group.is_empty() {
            out.push(candidate_from(&group, hyp, reference, recording_id));
        }
    }
    for c in &mut out {
        judge(c, cfg);
    }
    out.sort_by(|a, b| a.start.total_cmp(&b.start));
    out
}

fn judge(c: &mut SegmentCandidate, cfg: &HarvestConfig) {
    let d = c.duration();
    c.reject_reason = if d < cfg.min_dur {
        Some(format!("too short ({d:.2} s)"))
    } else if d > cfg.max_dur {
        Some(format!("too long ({d:.2} s)"))
    } else if c.match_ratio < cfg.accept_ratio {
        Some(format!("match ratio {:.3}", c.match_ratio))
    } else if c.text.is_empty() {
        Some("no transcript words".into())
    } else {
        None
    };
    c.accepted = c.reject_reason.is_none();
}

/// Segment one long recording. `raw_feats` are the recording's features
/// before normalization; the silence mask is computed from them.
pub fn harvest_segments(
    recording_id: &str,
    raw_feats: &FeatureMatrix,
    transcript: &[String],
    model: &AcousticModel,
    cfg: &HarvestConfig,
) -> Result<(Vec<SegmentCandidate>, SegmentReport), SegmentError> {
    let mut report = SegmentReport {
        recording_id: recording_id.to_string(),
        transcript_words: transcript.len(),
        hyp_words: 0,
        n_candidates: 0,
        n_accepted: 0,
        accepted_words: 0,
        accepted_seconds: 0.0,
        acceptance_rate: 0.0,
        regions: Vec::new(),
        note: None,
    };
    if transcript.is_empty() {
        report.note = Some("empty transcript; nothing to segment".into());
        return Ok((Vec::new(), report));
    }
    let lm = biased_lm(&[transcript.to_vec()], cfg.unk_mass)?;
    let mut lex = Lexicon::new();
    for w in transcript {
        let pron_ok = w.chars().filter(|&c| c != '-' && c != '\'').all(|c| model.phone_id(&c.to_string()).is_some());
        if pron_ok {
            let _ = lex.add_word(w);
        }
    }
    let tree = build_prefix_tree(&lex, true);
    let feats = cmvn(raw_feats);
    let mask = silence_mask(raw_feats, cfg.silence_margin_db);
    let chunks = chunk(recording_id, &feats, cfg.chunk_len, cfg.overlap);
    let spans: Vec<(f64, f64)> = chunks.iter().map(|c| (c.start, c.end)).collect();
    let decoder = Decoder::new(model, &lm, &tree, cfg.decode)
        .map_err(|source| SegmentError::Undecodable { id: recording_id.into(), source })?;
    let decoded: Vec<Result<Vec<TimedWord>, DecodeError>> = chunks
        .par_iter()
        .map(|c| {
            let h = decoder.decode_open_end(&c.feats)?;
            Ok(h.words
                .into_iter()
                .map(|w| TimedWord { word: w.word, start: c.start + w.start, end: c.start + w.end })
                .collect())
        })
        .collect();
    let mut per_chunk = Vec::with_capacity(decoded.len());
    let mut failures = 0;
    for d in decoded {
        match d {
            Ok(w) => per_chunk.push(w),
            Err(e) => {
                log::warn!("{recording_id}: chunk decode failed: {e}");
                failures += 1;
                per_chunk.push(Vec::new());
            }
        }
    }
    if failures == chunks.len() {
        return Err(SegmentError::Undecodable {
            id: recording_id.into(),
            source: DecodeError::NoSurvivors { frame: 0 },
        });
    }
    let hyp = merge_chunk_words(&spans, &per_chunk);
    report.hyp_words = hyp.len();
    let hyp_tokens: Vec<&str> = hyp.iter().map(|w| w.word.as_str()).collect();
    let ref_tokens: Vec<&str> = transcript.iter().map(String::as_str).collect();
    let regions = smith_waterman(&hyp_tokens, &ref_tokens, &cfg.sw);
    report.regions = regions
        .iter()
        .map(|r| RegionDiag { score: r.score, hyp_range: r.hyp_range, ref_range: r.ref_range, matches: r.matches() })
        .collect();
    let cands = candidates_from_regions(recording_id, &regions, &hyp, transcript, &mask, feats.frame_shift, cfg);
    report.n_candidates = cands.len();
    for c in cands.iter().filter(|c| c.accepted) {
        report.n_accepted += 1;
        report.accepted_words += c.text.len();
        report.accepted_seconds += c.duration();
    }
    report.acceptance_rate = if cands.is_empty() { 0.0 } else { report.n_accepted as f64 / cands.len() as f64 };
    Ok((cands, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    /// Recordings yielding at least one accepted segment.
    pub recording_rate: f64,
    /// Accepted transcript words over all transcript words.
    pub word_yield: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub const LOW_SUCCESS: f64 = 0.7;

/// Aggregate segmentation success over recordings.
pub fn success_rate(reports: &[SegmentReport]) -> SuccessRate {
    if reports.is_empty() {
        log::warn!("success_rate: no reports");
        return SuccessRate { recording_rate: 0.0, word_yield: 0.0, warning: Some("no recordings".into()) };
    }
    let ok = reports.iter().filter(|r| r.n_accepted > 0).count();
    let words: usize = reports.iter().map(|r| r.transcript_words).sum();
    let accepted: usize = reports.iter().map(|r| r.accepted_words).sum();
    let recording_rate = ok as f64 / reports.len() as f64;
    let word_yield = if words == 0 { 0.0 } else { accepted as f64 / words as f64 };
    let warning = (recording_rate < LOW_SUCCESS).then(|| {
        let w = format!(
            "segmentation success {:.0}% is below {:.0}%: check transcripts for missing or incomplete text",
            recording_rate * 100.0,
            LOW_SUCCESS * 100.0
        );
        log::warn!("{w}");
        w
    });
    SuccessRate { recording_rate, word_yield, warning }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_arithmetic() {
        assert_eq!(chunk_spans(10.0, 30.0, 5.0), vec![(0.0, 10.0)]);
        let s = chunk_spans(60.0, 30.0, 5.0);
        assert_eq!(s.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0.0, 25.0, 50.0]);
        assert_eq!(s.last().unwrap().1, 60.0);
        for w in s.windows(2) {
            assert!(w[1].0 <= w[0].1);
        }
    }

    #[test]
    fn overlap_words_taken_from_nearest_chunk() {
        let spans = [(0.0, 30.0), (25.0, 55.0)];
        let w = |s: &str, a: f64| TimedWord { word: s.into(), start: a, end: a + 0.5 };
        let merged = merge_chunk_words(&spans, &[vec![w("A", 10.0), w("B", 26.0), w("C", 28.0)], vec![w("B", 26.0), w("C", 28.0), w("D", 40.0)]]);
        let words: Vec<&str> = merged.iter().map(|x| x.word.as_str()).collect();
        assert_eq!(words, ["A", "B", "C", "D"]);
        // midpoint 26.25 is nearer chunk 0 (centre 15) than chunk 1 (centre 40)? no: 11.25 vs 13.75
        assert_eq!(merged.len(), 4);
    }

    fn report(id: &str, accepted: usize) -> SegmentReport {
        SegmentReport {
            recording_id: id.into(),
            transcript_words: 10,
            hyp_words: 10,
            n_candidates: 1,
            n_accepted: accepted,
            accepted_words: accepted * 5,
            accepted_seconds: 0.0,
            acceptance_rate: 0.0,
            regions: Vec::new(),
            note: None,
        }
    }

    #[test]
    fn success_rate_rules() {
        let all: Vec<SegmentReport> = (0..10).map(|i| report(&i.to_string(), 1)).collect();
        assert_eq!(success_rate(&all).recording_rate, 1.0);
        let seven: Vec<SegmentReport> = (0..10).map(|i| report(&i.to_string(), usize::from(i < 7))).collect();
        let r = success_rate(&seven);
        assert!((r.recording_rate - 0.7).abs() < 1e-12);
        assert!(r.warning.is_none());
        let five: Vec<SegmentReport> = (0..10).map(|i| report(&i.to_string(), usize::from(i < 5))).collect();
        let r = success_rate(&five);
        assert_eq!(r.recording_rate, 0.5);
        assert!(r.warning.unwrap().contains("check transcripts"));
    }

    fn timed(words: &[&str], gaps: &[f64]) -> Vec<TimedWord> {
        let mut t = 0.5;
        words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let s = t;
                t += 0.4 + gaps.get(i).copied().unwrap_or(0.05);
                TimedWord { word: w.to_string(), start: s, end: s + 0.4 }
            })
            .collect()
    }

    fn mask_for(hyp: &[TimedWord], total: f64) -> SilenceMask {
        let n = (total / 0.01) as usize;
        let mut m = vec![true; n];
        for w in hyp {
            for f in (w.start / 0.01).round() as usize..(w.end / 0.01).round() as usize {
                m[f] = false;
            }
        }
        SilenceMask(m)
    }

    #[test]
    fn skipped_transcript_span_is_excluded() {
        let words: Vec<String> = "A B C D E F G H".split(' ').map(String::from).collect();
        let mut reference = words[..4].to_vec();
        reference.extend(["X", "Y", "Z"].map(String::from));
        reference.extend(words[4..].iter().cloned());
        let hyp = timed(&["A", "B", "C", "D", "E", "F", "G", "H"], &[0.05, 0.05, 0.05, 0.6]);
        let mask = mask_for(&hyp, 10.0);
        let regions = smith_waterman(&words, &reference, &SwConfig::default());
        let cands = candidates_from_regions("r", &regions, &hyp, &reference, &mask, 0.01, &HarvestConfig::default());
        assert!(cands.len() >= 2);
        for c in cands.iter().filter(|c| c.accepted) {
            assert!(c.ref_range.1 <= 4 || c.ref_range.0 >= 7, "{c:?}");
        }
    }

    #[test]
    fn empty_transcript_reports_zero() {
        let model = {
            let mut lex = Lexicon::new();
            lex.add_word("A").unwrap();
            let init = crate::am::HmmState { gmm: crate::am::Gmm::single(vec![0.0], vec![1.0]), self_loop: 0.5 };
            AcousticModel::monophone(AcousticModel::inventory_for(&lex), Default::default(), &init)
        };
        let f = FeatureMatrix::from_rows(&vec![vec![0.0]; 50], 0.01);
        let (c, r) = harvest_segments("r", &f, &[], &model, &HarvestConfig::default()).unwrap();
        assert!(c.is_empty());
        assert!(r.note.is_some());
    }
}
