//! 16-bit PCM RIFF/WAV reading and writing.
//!
//! The canonical format is mono, 16 kHz, 16-bit little-endian PCM. Other
//! encodings are rejected unless resampling is requested, in which case
//! channels are averaged and the signal is resampled to 16 kHz.

use std::path::Path;

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn wav_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_wav(path: &Path, resample: bool) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e.to_string()))?;
    let spec = reader.spec();
    let canonical = spec.channels == 1
        && spec.sample_rate == SAMPLE_RATE
        && spec.bits_per_sample == 16
        && spec.sample_format == hound::SampleFormat::Int;
    if !canonical && !resample {
        return Err(wav_err(
            path,
            format!(
                "expected mono 16-bit PCM at {} Hz, found {} ch {}-bit {:?} at {} Hz",
                SAMPLE_RATE, spec.channels, spec.bits_per_sample, spec.sample_format, spec.sample_rate
            ),
        ));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e.to_string()))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e.to_string()))?,
    };
    let channels = spec.channels.max(1) as usize;
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    let samples = if spec.sample_rate != SAMPLE_RATE {
        resample_sinc(&mono, spec.sample_rate, SAMPLE_RATE)
    } else {
        mono
    };
    Waveform::new(samples, SAMPLE_RATE)
}

/// Write as mono 16-bit PCM; samples are clipped to [-1, 1] on quantization.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e.to_string()))?;
    for s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| wav_err(path, e.to_string()))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e.to_string()))
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample_sinc(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    const HALF_TAPS: i64 = 16;
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0);
    let out_len = ((x.len() as f64) * ratio).round() as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 / ratio;
            let center = pos.floor() as i64;
            let span = (HALF_TAPS as f64 / cutoff).ceil() as i64;
            let mut acc = 0.0;
            for j in (center - span + 1)..=(center + span) {
                if j < 0 || j as usize >= x.len() {
                    continue;
                }
                let d = pos - j as f64;
                let arg = d * cutoff;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg)
                };
                let win = 0.5 + 0.5 * (std::f64::consts::PI * d / (span as f64)).cos();
                acc += x[j as usize] * sinc * cutoff * win;
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 0.999, -1.0], SAMPLE_RATE).unwrap();
        write_wav(&p, &w).unwrap();
        let r = read_wav(&p, false).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.max_abs_diff(&w) < 1.0 / 32767.0);
    }

    #[test]
    fn rejects_8khz_without_resample_flag() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("narrow.wav");
        let w = Waveform::new(vec![0.1; 800], 8000).unwrap();
        write_wav(&p, &w).unwrap();
        let err = read_wav(&p, false).unwrap_err();
        assert!(err.to_string().contains("narrow.wav"));
        let up = read_wav(&p, true).unwrap();
        assert_eq!(up.sample_rate, SAMPLE_RATE);
        assert_eq!(up.len(), 1600);
    }

    #[test]
    fn resampled_tone_keeps_frequency() {
        let x: Vec<f64> = (0..8000)
            .map(|n| (2.0 * std::f64::consts::PI * 500.0 * n as f64 / 8000.0).sin())
            .collect();
        let y = resample_sinc(&x, 8000, 16_000);
        // compare against the analytic 16 kHz tone away from the edges
        for n in 200..15_800 {
            let expect = (2.0 * std::f64::consts::PI * 500.0 * n as f64 / 16_000.0).sin();
            assert!((y[n] - expect).abs() < 0.02, "n={n}");
        }
    }
}
