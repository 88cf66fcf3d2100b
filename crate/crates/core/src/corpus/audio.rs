//! WAV decoding, downmixing, resampling, and PCM16 output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::CorpusError;

pub const TARGET_RATE: u32 = 16_000;

/// Decoded audio as floating-point samples in `[-1, 1)`, interleaved.
#[derive(Debug, Clone)]
pub struct Audio {
    pub sample_rate: u32,
    pub channels: u16,
    pub samples: Vec<f64>,
}

impl Audio {
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels.max(1) as usize
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Audio { path: path.display().to_string(), msg: e.to_string() }
}

/// Header information without decoding samples.
pub fn probe_wav(path: &Path) -> Result<(WavSpec, f64), CorpusError> {
    let reader = WavReader::open(path).map_err(|e| io_err(path, e))?;
    let spec = reader.spec();
    let duration = reader.duration() as f64 / spec.sample_rate as f64;
    Ok((spec, duration))
}

pub fn read_wav(path: &Path) -> Result<Audio, CorpusError> {
    let mut reader = WavReader::open(path).map_err(|e| io_err(path, e))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(CorpusError::UnsupportedAudio {
            path: path.display().to_string(),
            msg: format!("{} channels (1 or 2 supported)", spec.channels),
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()
            .map_err(|e| io_err(path, e))?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| io_err(path, e))?
        }
        (fmt, bits) => {
            return Err(CorpusError::UnsupportedAudio {
                path: path.display().to_string(),
                msg: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    Ok(Audio { sample_rate: spec.sample_rate, channels: spec.channels, samples })
}

/// Read a canonical (16 kHz mono PCM16) file as raw integer-scaled samples.
pub fn read_canonical_pcm(path: &Path) -> Result<Vec<f64>, CorpusError> {
    let mut reader = WavReader::open(path).map_err(|e| io_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != TARGET_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != SampleFormat::Int
    {
        return Err(CorpusError::UnsupportedAudio {
            path: path.display().to_string(),
            msg: "expected 16 kHz mono 16-bit PCM; run canonicalize first".into(),
        });
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64))
        .collect::<Result<_, _>>()
        .map_err(|e| io_err(path, e))
}

/// Average all channels into one.
pub fn downmix(audio: &Audio) -> Vec<f64> {
    let ch = audio.channels.max(1) as usize;
    if ch == 1 {
        return audio.samples.clone();
    }
    audio
        .samples
        .chunks_exact(ch)
        .map(|frame| frame.iter().sum::<f64>() / ch as f64)
        .collect()
}

pub fn quantize_i16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_pcm16(path: &Path, samples: &[i16], sample_rate: u32) -> Result<(), CorpusError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
    }
    let mut writer = WavWriter::create(path, spec).map_err(|e| io_err(path, e))?;
    for &s in samples {
        writer.write_sample(s).map_err(|e| io_err(path, e))?;
    }
    writer.finalize().map_err(|e| io_err(path, e))
}

/// Band-limited resampler: a Kaiser-windowed sinc with 64 taps, evaluated
/// through an oversampled kernel table (one polyphase branch per table
/// step, linearly interpolated between branches).
pub struct SincResampler {
    in_rate: u32,
    out_rate: u32,
    cutoff: f64,
    table: Vec<f64>,
}

const HALF_TAPS: usize = 32;
const PHASES: usize = 512;
const KAISER_BETA: f64 = 8.6;
const ROLLOFF: f64 = 0.97;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

impl SincResampler {
    pub fn new(in_rate: u32, out_rate: u32) -> Self {
        let cutoff = (out_rate as f64 / in_rate as f64).min(1.0) * ROLLOFF;
        let i0_beta = bessel_i0(KAISER_BETA);
        let n = HALF_TAPS * PHASES + 1;
        let table = (0..n)
            .map(|i| {
                let x = i as f64 / PHASES as f64;
                let r = x / HALF_TAPS as f64;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                let arg = std::f64::consts::PI * cutoff * x;
                let sinc = if x == 0.0 { 1.0 } else { arg.sin() / arg };
                cutoff * sinc * window
            })
            .collect();
        Self { in_rate, out_rate, cutoff, table }
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len as f64) * self.out_rate as f64 / self.in_rate as f64).round() as usize
    }

    fn kernel(&self, x: f64) -> f64 {
        let pos = x.abs() * PHASES as f64;
        let idx = pos.floor() as usize;
        if idx >= self.table.len() - 1 {
            return 0.0;
        }
        let frac = pos - idx as f64;
        self.table[idx] * (1.0 - frac) + self.table[idx + 1] * frac
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        if self.in_rate == self.out_rate {
            return input.to_vec();
        }
        let step = self.in_rate as f64 / self.out_rate as f64;
        (0..self.output_len(input.len()))
            .map(|n| {
                let t = n as f64 * step;
                let base = t.floor() as isize;
                let lo = (base - HALF_TAPS as isize + 1).max(0);
                let hi = (base + HALF_TAPS as isize).min(input.len() as isize - 1);
                (lo..=hi).map(|k| input[k as usize] * self.kernel(t - k as f64)).sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-12);
    }

    #[test]
    fn identity_rate_is_passthrough() {
        let r = SincResampler::new(16_000, 16_000);
        let x = vec![0.1, -0.2, 0.3];
        assert_eq!(r.process(&x), x);
    }

    #[test]
    fn quantize_round_trips_pcm16() {
        for s in [i16::MIN, -1, 0, 1, 12345, i16::MAX] {
            assert_eq!(quantize_i16(s as f64 / 32768.0), s);
        }
    }
}
