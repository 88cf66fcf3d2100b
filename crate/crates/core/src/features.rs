//! MFCC front-end, mean/variance normalization, and energy-based silence
//! detection.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

/// Floor applied before every logarithm.
pub const ENERGY_FLOOR: f64 = 1e-10;
const DUMP_MAGIC: &[u8; 4] = b"BAF1";

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("audio has {samples} samples, shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("feature file {path}: {msg}")]
    Dump { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub num_mel_bins: usize,
    pub num_ceps: usize,
    pub low_freq: f64,
    pub high_freq: f64,
    pub preemphasis: f64,
    /// Append delta and delta-delta coefficients.
    pub deltas: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            num_mel_bins: 23,
            num_ceps: 13,
            low_freq: 20.0,
            high_freq: 7800.0,
            preemphasis: 0.97,
            deltas: true,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.sample_rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    pub fn num_frames(&self, n_samples: usize) -> usize {
        let (w, s) = (self.window_samples(), self.shift_samples());
        if n_samples < w {
            0
        } else {
            1 + (n_samples - w) / s
        }
    }

    pub fn dim(&self) -> usize {
        if self.deltas {
            self.num_ceps * 3
        } else {
            self.num_ceps
        }
    }
}

/// Row-major `T x D` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_frames: usize,
    dim: usize,
    pub frame_shift: f64,
    pub frame_length: f64,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, dim: usize, frame_shift: f64, frame_length: f64) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "data length must be a multiple of dim");
        Self { n_frames: data.len() / dim, data, dim, frame_shift, frame_length }
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_shift: f64) -> Self {
        let dim = rows.first().map_or(1, Vec::len);
        Self::new(rows.concat(), dim, frame_shift, 0.025)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, d: usize) -> Vec<f64> {
        self.rows().map(|r| r[d]).collect()
    }

    /// Frames `[start, end)` as a new matrix.
    pub fn slice(&self, start: usize, end: usize) -> FeatureMatrix {
        let end = end.min(self.n_frames);
        let start = start.min(end);
        Self {
            data: self.data[start * self.dim..end * self.dim].to_vec(),
            n_frames: end - start,
            dim: self.dim,
            frame_shift: self.frame_shift,
            frame_length: self.frame_length,
        }
    }

    pub fn duration(&self) -> f64 {
        self.n_frames as f64 * self.frame_shift
    }
}

fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Triangular filters equally spaced on the mel scale.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Per filter: first FFT bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(num_bins: usize, fft_size: usize, sample_rate: u32, low: f64, high: f64) -> Self {
        let (mlo, mhi) = (hz_to_mel(low), hz_to_mel(high));
        let step = (mhi - mlo) / (num_bins + 1) as f64;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let n_fft_bins = fft_size / 2 + 1;
        let mut filters = Vec::with_capacity(num_bins);
        let mut centers_hz = Vec::with_capacity(num_bins);
        for b in 0..num_bins {
            let left = mlo + b as f64 * step;
            let center = left + step;
            let right = center + step;
            centers_hz.push(mel_to_hz(center));
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..n_fft_bins {
                let m = hz_to_mel(k as f64 * bin_hz);
                let w = if m > left && m < right {
                    if m <= center {
                        (m - left) / (center - left)
                    } else {
                        (right - m) / (right - center)
                    }
                } else {
                    0.0
                };
                if w > 0.0 {
                    first.get_or_insert(k);
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        Self { filters, centers_hz }
    }

    pub fn num_bins(&self) -> usize {
        self.filters.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// FFT bins with non-zero weight in filter `b`.
    pub fn support(&self, b: usize) -> std::ops::Range<usize> {
        let (first, w) = &self.filters[b];
        *first..first + w.len()
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (first, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Frame-level analysis shared by MFCC extraction and diagnostics.
pub struct Frontend {
    cfg: MfccConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    mel: MelFilterbank,
    dct: Vec<Vec<f64>>,
}

impl Frontend {
    pub fn new(cfg: MfccConfig) -> Self {
        let n = cfg.window_samples();
        let nfft = cfg.fft_size();
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        let mel = MelFilterbank::new(cfg.num_mel_bins, nfft, cfg.sample_rate, cfg.low_freq, cfg.high_freq);
        let nb = cfg.num_mel_bins as f64;
        let dct = (0..cfg.num_ceps)
            .map(|k| {
                let scale = if k == 0 { (1.0 / nb).sqrt() } else { (2.0 / nb).sqrt() };
                (0..cfg.num_mel_bins)
                    .map(|j| scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / nb).cos())
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        Self { cfg, fft, window, mel, dct }
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.mel
    }

    /// Per-frame `(log energy, log mel energies)`.
    pub fn analyze(&self, samples: &[f64]) -> Result<Vec<(f64, Vec<f64>)>, FeatureError> {
        let (w, s) = (self.cfg.window_samples(), self.cfg.shift_samples());
        let n_frames = self.cfg.num_frames(samples.len());
        if n_frames == 0 {
            return Err(FeatureError::TooShort { samples: samples.len(), window: w });
        }
        let nfft = self.cfg.fft_size();
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        let mut frame = vec![0.0; w];
        let mut power = vec![0.0; nfft / 2 + 1];
        let mut out = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            frame.copy_from_slice(&samples[t * s..t * s + w]);
            let mean = frame.iter().sum::<f64>() / w as f64;
            frame.iter_mut().for_each(|x| *x -= mean);
            let energy: f64 = frame.iter().map(|x| x * x).sum();
            for i in (1..w).rev() {
                frame[i] -= self.cfg.preemphasis * frame[i - 1];
            }
            frame[0] -= self.cfg.preemphasis * frame[0];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(if i < w { frame[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let mut mel = vec![0.0; self.mel.num_bins()];
            self.mel.apply(&power, &mut mel);
            mel.iter_mut().for_each(|m| *m = m.max(ENERGY_FLOOR).ln());
            out.push((energy.max(ENERGY_FLOOR).ln(), mel));
        }
        Ok(out)
    }

    /// Static cepstra with C0 replaced by frame log-energy, plus optional
    /// deltas.
    pub fn mfcc(&self, samples: &[f64]) -> Result<FeatureMatrix, FeatureError> {
        let frames = self.analyze(samples)?;
        let nc = self.cfg.num_ceps;
        let mut stat = Vec::with_capacity(frames.len() * nc);
        for (log_e, mel) in &frames {
            stat.push(*log_e);
            for row in &self.dct[1..] {
                stat.push(row.iter().zip(mel).map(|(a, b)| a * b).sum());
            }
        }
        let shift = self.cfg.frame_shift_ms / 1000.0;
        let len = self.cfg.frame_length_ms / 1000.0;
        let statics = FeatureMatrix::new(stat, nc, shift, len);
        Ok(if self.cfg.deltas { add_deltas(&statics) } else { statics })
    }
}

/// MFCCs for raw PCM samples (integer scale).
pub fn compute_mfcc(samples: &[f64], cfg: &MfccConfig) -> Result<FeatureMatrix, FeatureError> {
    Frontend::new(cfg.clone()).mfcc(samples)
}

fn regression(m: &FeatureMatrix) -> FeatureMatrix {
    let (t_max, d) = (m.n_frames(), m.dim());
    let mut out = vec![0.0; t_max * d];
    let clamp = |t: isize| t.clamp(0, t_max as isize - 1) as usize;
    for t in 0..t_max {
        for n in 1..=2isize {
            let (a, b) = (m.row(clamp(t as isize + n)), m.row(clamp(t as isize - n)));
            for j in 0..d {
                out[t * d + j] += n as f64 * (a[j] - b[j]) / 10.0;
            }
        }
    }
    FeatureMatrix::new(out, d, m.frame_shift, m.frame_length)
}

/// Append first and second order regression coefficients (window +-2).
pub fn add_deltas(statics: &FeatureMatrix) -> FeatureMatrix {
    let d1 = regression(statics);
    let d2 = regression(&d1);
    let dim = statics.dim() * 3;
    let mut data = Vec::with_capacity(statics.n_frames() * dim);
    for t in 0..statics.n_frames() {
        data.extend_from_slice(statics.row(t));
        data.extend_from_slice(d1.row(t));
        data.extend_from_slice(d2.row(t));
    }
    FeatureMatrix::new(data, dim, statics.frame_shift, statics.frame_length)
}

/// Per-dimension mean and variance normalization. Dimensions with variance
/// below 1e-10 are only mean-centred.
pub fn cmvn(f: &FeatureMatrix) -> FeatureMatrix {
    let (t, d) = (f.n_frames(), f.dim());
    if t == 0 {
        return f.clone();
    }
    let mut mean = vec![0.0; d];
    for r in f.rows() {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0; d];
    for r in f.rows() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let v = v / t as f64;
            if v < 1e-10 {
                1.0
            } else {
                1.0 / v.sqrt()
            }
        })
        .collect();
    let data = f
        .rows()
        .flat_map(|r| (0..d).map(|j| (r[j] - mean[j]) * scale[j]).collect::<Vec<_>>())
        .collect();
    FeatureMatrix::new(data, d, f.frame_shift, f.frame_length)
}

/// Per-frame silence flags (`true` = silence).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilenceMask(pub Vec<bool>);

impl SilenceMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Longest run of silence frames inside `[start, end)`.
    pub fn longest_silence(&self, start: usize, end: usize) -> usize {
        let end = end.min(self.0.len());
        let (mut best, mut cur) = (0, 0);
        for &s in self.0.get(start..end).unwrap_or(&[]) {
            cur = if s { cur + 1 } else { 0 };
            best = best.max(cur);
        }
        best
    }
}

const MIN_RUN: usize = 3;

/// Mark frames whose log-energy (column 0, natural log) lies below the 5th
/// percentile plus `margin_db`; runs shorter than three frames are absorbed
/// by their neighbours.
pub fn silence_mask(f: &FeatureMatrix, margin_db: f64) -> SilenceMask {
    let db: Vec<f64> = f.rows().map(|r| 10.0 * r[0] / std::f64::consts::LN_10).collect();
    if db.is_empty() {
        return SilenceMask(Vec::new());
    }
    let mut sorted = db.clone();
    sorted.sort_by(f64::total_cmp);
    let p5 = sorted[((sorted.len() - 1) as f64 * 0.05).floor() as usize];
    let threshold = p5 + margin_db;
    let raw: Vec<bool> = db.iter().map(|&e| e < threshold).collect();

    let mut runs: Vec<(bool, usize)> = Vec::new();
    for v in raw {
        match runs.last_mut() {
            Some((val, n)) if *val == v => *n += 1,
            _ => runs.push((v, 1)),
        }
    }
    if runs.len() > 1 {
        let first_next = runs[1].0;
        for i in 0..runs.len() {
            if runs[i].1 < MIN_RUN {
                runs[i].0 = if i == 0 { first_next } else { runs[i - 1].0 };
            }
        }
    }
    SilenceMask(runs.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect())
}

/// Write the debug feature dump: 16-byte header then little-endian `f32`s.
pub fn write_feature_dump(path: &Path, f: &FeatureMatrix) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DUMP_MAGIC)?;
    w.write_u32::<LittleEndian>(f.n_frames() as u32)?;
    w.write_u32::<LittleEndian>(f.dim() as u32)?;
    w.write_u32::<LittleEndian>((f.frame_shift * 1e6).round() as u32)?;
    for &x in f.data() {
        w.write_f32::<LittleEndian>(x as f32)?;
    }
    w.flush()
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    let derr = |msg: String| FeatureError::Dump { path: path.display().to_string(), msg };
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| derr(e.to_string()))?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| derr(e.to_string()))?;
    if &magic != DUMP_MAGIC {
        return Err(derr("bad magic".into()));
    }
    let mut header = [0u32; 3];
    for h in &mut header {
        *h = r.read_u32::<LittleEndian>().map_err(|e| derr(e.to_string()))?;
    }
    let [t, d, shift_us] = header;
    if d == 0 {
        return Err(derr("zero dimension".into()));
    }
    let mut data = Vec::with_capacity(t as usize * d as usize);
    for _ in 0..t as usize * d as usize {
        data.push(r.read_f32::<LittleEndian>().map_err(|e| derr(e.to_string()))? as f64);
    }
    Ok(FeatureMatrix::new(data, d as usize, shift_us as f64 / 1e6, 0.025))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = compute_mfcc(&tone(440.0, 16000, 1000.0), &MfccConfig::default()).unwrap();
        assert_eq!(f.n_frames(), 1 + (16000 - 400) / 160);
        assert_eq!(f.n_frames(), 98);
        assert_eq!(f.dim(), 39);
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(matches!(
            compute_mfcc(&[0.0; 399], &MfccConfig::default()),
            Err(FeatureError::TooShort { samples: 399, window: 400 })
        ));
    }

    #[test]
    fn constant_zero_audio_has_constant_cepstra() {
        let f = compute_mfcc(&vec![0.0; 8000], &MfccConfig::default()).unwrap();
        let first = f.row(0).to_vec();
        assert!(f.rows().all(|r| r == first.as_slice()));
    }

    #[test]
    fn tone_peaks_in_filter_nearest_its_frequency() {
        let fe = Frontend::new(MfccConfig::default());
        let frames = fe.analyze(&tone(1000.0, 4000, 1000.0)).unwrap();
        let mel = &frames[5].1;
        let peak = (0..mel.len()).max_by(|&a, &b| mel[a].total_cmp(&mel[b])).unwrap();
        // Oracle: direct DFT of the windowed frame locates the spectral peak bin.
        let x = tone(1000.0, 400, 1.0);
        let nfft = 512;
        let mag = |k: usize| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / 399.0).cos();
                let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / nfft as f64;
                re += v * w * a.cos();
                im += v * w * a.sin();
            }
            re * re + im * im
        };
        let dft_peak = (0..=nfft / 2).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
        assert!(fe.filterbank().support(peak).contains(&dft_peak));
        let centers = fe.filterbank().centers_hz();
        let nearest = (0..centers.len())
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();
        assert_eq!(peak, nearest);
    }

    #[test]
    fn amplitude_scaling_only_moves_c0() {
        let cfg = MfccConfig { deltas: false, ..MfccConfig::default() };
        let a = compute_mfcc(&tone(700.0, 8000, 1000.0), &cfg).unwrap();
        let b = compute_mfcc(&tone(700.0, 8000, 4000.0), &cfg).unwrap();
        for (ra, rb) in a.rows().zip(b.rows()) {
            assert!((rb[0] - ra[0] - 2.0 * 4f64.ln()).abs() < 1e-6);
            for j in 1..ra.len() {
                assert!((ra[j] - rb[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cmvn_standardizes_and_handles_constant_columns() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..13).map(|j| if j == 4 { 7.0 } else { rng.random::<f64>() * 5.0 + j as f64 }).collect())
            .collect();
        let n = cmvn(&FeatureMatrix::from_rows(&rows, 0.01));
        for j in 0..13 {
            let col = n.column(j);
            let mean = col.iter().sum::<f64>() / 100.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-6);
            if j == 4 {
                assert!(col.iter().all(|&x| x == 0.0));
            } else {
                assert!((var - 1.0).abs() < 1e-4);
            }
        }
        let twice = cmvn(&n);
        for (a, b) in twice.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn silence_mask_cases() {
        let cfg = MfccConfig::default();
        let zeros = compute_mfcc(&vec![0.0; 16000], &cfg).unwrap();
        assert!(silence_mask(&zeros, 10.0).0.iter().all(|&s| s));

        let mut sig = vec![0.0; 8000];
        sig.extend(tone(1000.0, 16000, 3000.0));
        let f = compute_mfcc(&sig, &cfg).unwrap();
        let m = silence_mask(&f, 10.0);
        let lead = m.0.iter().take_while(|&&s| s).count();
        assert!((lead as i64 - 48).abs() <= 3, "lead = {lead}");
        assert!(silence_mask(&f, f64::INFINITY).0.iter().all(|&s| s));
    }

    #[test]
    fn short_runs_are_absorbed() {
        // energies: long silence, 2-frame blip, long silence
        let mut rows = vec![vec![0.0]; 10];
        rows[4][0] = 20.0;
        rows[5][0] = 20.0;
        let m = silence_mask(&FeatureMatrix::from_rows(&rows, 0.01), 10.0);
        assert!(m.0.iter().all(|&s| s));
        assert_eq!(m.longest_silence(0, 10), 10);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = FeatureMatrix::from_rows(&[vec![1.0, 2.5], vec![-3.0, 0.125]], 0.01);
        let p = dir.path().join("x.feat");
        write_feature_dump(&p, &f).unwrap();
        let g = read_feature_dump(&p).unwrap();
        assert_eq!(g.data(), f.data());
        assert_eq!(g.frame_shift, 0.01);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 4 * 4);
    }
}
