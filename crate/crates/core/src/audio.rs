//! Waveforms, STFT analysis/synthesis, log-mel features and a Griffin-Lim
//! style reconstruction that closes the mel-to-audio loop without a neural
//! vocoder.
//!
//! The log-mel front-end is differentiable: [`MelFrontend::forward_cached`]
//! keeps the complex spectra so that [`MelFrontend::backward`] can push a
//! gradient on the log-mel frames back onto the waveform samples. Attacks
//! use this path to perturb audio through the feature extractor.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with a sample rate. Nominal amplitude range is [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square over the whole utterance.
    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// Clamp every sample to [-1, 1].
    pub fn clipped(mut self) -> Self {
        for s in &mut self.samples {
            *s = s.clamp(-1.0, 1.0);
        }
        self
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn max_abs_diff(&self, other: &Waveform) -> f64 {
        self.samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// FFT size; analysis frames are zero-padded from `win_length` to this.
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_fft: 512,
            win_length: 400,
            hop_length: 200,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("feature config: {m}")));
        if self.sample_rate == 0 || self.hop_length == 0 || self.n_mels == 0 {
            return bad("sample_rate, hop_length and n_mels must be positive");
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return bad("win_length must be in 1..=n_fft");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return bad("require 0 <= fmin < fmax <= nyquist");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.win_length {
            0
        } else {
            (n_samples - self.win_length) / self.hop_length + 1
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular mel filters.
pub fn mel_center_frequencies(cfg: &FeatureConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filterbank, shape `n_mels x n_bins`, peak weight 1.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Array2<f64> {
    let edges = mel_edges(cfg);
    let n_bins = cfg.n_bins();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Array2::from_shape_fn((cfg.n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > l && f < c {
            (f - l) / (c - l)
        } else if f >= c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        }
    })
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Short-time Fourier transform without centering: frame `t` covers
/// samples `t*hop .. t*hop + win`.
#[derive(Clone)]
pub struct Stft {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("win_length", &self.win_length)
            .field("hop_length", &self.hop_length)
            .finish()
    }
}

impl Stft {
    pub fn new(n_fft: usize, win_length: usize, hop_length: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            win_length,
            hop_length,
            window: hann(win_length),
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn from_config(cfg: &FeatureConfig) -> Self {
        Self::new(cfg.n_fft, cfg.win_length, cfg.hop_length)
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.win_length {
            0
        } else {
            (n_samples - self.win_length) / self.hop_length + 1
        }
    }

    /// One-sided spectra, shape `frames x bins`.
    pub fn analyze(&self, x: &[f64]) -> Array2<Complex64> {
        let frames = self.frame_count(x.len());
        let bins = self.n_bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let start = t * self.hop_length;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for n in 0..self.win_length {
                buf[n].re = x[start + n] * self.window[n];
            }
            self.fwd.process(&mut buf);
            for k in 0..bins {
                out[[t, k]] = buf[k];
            }
        }
        out
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`]. Output has `len`
    /// samples; regions without window support are zero.
    pub fn synthesize(&self, spec: &Array2<Complex64>, len: usize) -> Vec<f64> {
        let (frames, bins) = spec.dim();
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f64;
        for t in 0..frames {
            for k in 0..self.n_fft {
                buf[k] = if k < bins {
                    spec[[t, k]]
                } else {
                    spec[[t, self.n_fft - k]].conj()
                };
            }
            buf[0].im = 0.0;
            if self.n_fft % 2 == 0 {
                buf[self.n_fft / 2].im = 0.0;
            }
            self.inv.process(&mut buf);
            let start = t * self.hop_length;
            for n in 0..self.win_length {
                let i = start + n;
                if i >= len {
                    break;
                }
                out[i] += buf[n].re * scale * self.window[n];
                norm[i] += self.window[n] * self.window[n];
            }
        }
        for (o, w) in out.iter_mut().zip(&norm) {
            if *w > 1e-8 {
                *o /= w;
            } else {
                *o = 0.0;
            }
        }
        out
    }
}

/// Log-mel frames, shape `T x n_mels`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub frame_hop_s: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelSpectrogram {
    pub fn from_frames(frames: Array2<f64>, cfg: &FeatureConfig) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::InvalidInput("mel spectrogram has no frames".into()));
        }
        if frames.ncols() != cfg.n_mels {
            return Err(Error::Shape(format!(
                "expected {} mel channels, got {}",
                cfg.n_mels,
                frames.ncols()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel spectrogram".into()));
        }
        Ok(Self {
            frames,
            frame_hop_s: cfg.hop_length as f64 / cfg.sample_rate as f64,
            n_mels: cfg.n_mels,
            fmin: cfg.fmin,
            fmax: cfg.fmax,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Channels-by-time view used by the convolutional models.
    pub fn channels_first(&self) -> Array2<f64> {
        self.frames.t().to_owned()
    }
}

/// Everything [`MelFrontend::backward`] needs from a forward pass.
pub struct FrontendCache {
    n_samples: usize,
    spectra: Array2<Complex64>,
    mel: Array2<f64>,
}

/// Reusable log-mel extractor (FFT plans and filterbank built once).
#[derive(Clone, Debug)]
pub struct MelFrontend {
    pub cfg: FeatureConfig,
    stft: Stft,
    filterbank: Array2<f64>,
}

impl MelFrontend {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            stft: Stft::from_config(cfg),
            filterbank: mel_filterbank(cfg),
        })
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    fn check(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate != self.cfg.sample_rate {
            return Err(Error::InvalidInput(format!(
                "sample rate {} does not match feature config {}",
                w.sample_rate, self.cfg.sample_rate
            )));
        }
        if w.len() < self.cfg.win_length {
            return Err(Error::TooShort {
                len: w.len(),
                needed: self.cfg.win_length,
            });
        }
        Ok(())
    }

    /// Linear mel magnitudes before log compression, `T x n_mels`.
    pub fn linear_mel(&self, w: &Waveform) -> Result<Array2<f64>> {
        self.check(w)?;
        let spectra = self.stft.analyze(&w.samples);
        Ok(self.mel_from_spectra(&spectra))
    }

    fn mel_from_spectra(&self, spectra: &Array2<Complex64>) -> Array2<f64> {
        let mags = spectra.mapv(|c| c.norm());
        mags.dot(&self.filterbank.t())
    }

    fn log_compress(&self, mel: &Array2<f64>) -> Array2<f64> {
        let floor = self.cfg.log_floor;
        mel.mapv(|v| v.max(floor).ln())
    }

    pub fn extract(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let mel = self.linear_mel(w)?;
        MelSpectrogram::from_frames(self.log_compress(&mel), &self.cfg)
    }

    /// Log-mel of raw samples plus the cache for [`MelFrontend::backward`].
    pub fn forward_cached(&self, w: &Waveform) -> Result<(Array2<f64>, FrontendCache)> {
        self.check(w)?;
        let spectra = self.stft.analyze(&w.samples);
        let mel = self.mel_from_spectra(&spectra);
        let out = self.log_compress(&mel);
        Ok((
            out,
            FrontendCache {
                n_samples: w.len(),
                spectra,
                mel,
            },
        ))
    }

    /// Gradient of a scalar objective with respect to the waveform samples,
    /// given its gradient with respect to the log-mel frames (`T x n_mels`).
    pub fn backward(&self, cache: &FrontendCache, d_logmel: ArrayView2<f64>) -> Vec<f64> {
        let floor = self.cfg.log_floor;
        let d_mel = ndarray::Zip::from(d_logmel)
            .and(&cache.mel)
            .map_collect(|g, m| if *m > floor { g / m } else { 0.0 });
        let d_mag = d_mel.dot(&self.filterbank);
        let n_fft = self.stft.n_fft;
        let win = self.stft.win_length;
        let hop = self.stft.hop_length;
        let window = self.stft.window();
        let mut grad = vec![0.0; cache.n_samples];
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        for (t, (spec_row, dmag_row)) in cache
            .spectra
            .axis_iter(Axis(0))
            .zip(d_mag.axis_iter(Axis(0)))
            .enumerate()
        {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (k, (x, g)) in spec_row.iter().zip(dmag_row.iter()).enumerate() {
                let mag = x.norm();
                if mag > 0.0 {
                    buf[k] = x.conj() * (g / mag);
                }
            }
            self.stft.fwd.process(&mut buf);
            let start = t * hop;
            for n in 0..win {
                grad[start + n] += window[n] * buf[n].re;
            }
        }
        grad
    }
}

/// Log-mel features of `w` under `cfg`.
pub fn extract_mel(w: &Waveform, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    MelFrontend::new(cfg)?.extract(w)
}

/// Multiplicative refinement steps applied by [`reconstruct_waveform`].
pub const INVERSE_MEL_ITERS: usize = 30;

/// Non-negative linear magnitudes whose mel projection approximates `m`:
/// the column-normalised transpose estimate refined by `n_iters`
/// multiplicative least-squares updates.
pub fn inverse_mel(m: &MelSpectrogram, cfg: &FeatureConfig, n_iters: usize) -> Array2<f64> {
    let fb = mel_filterbank(cfg);
    let mel_lin = m.frames.mapv(f64::exp);
    let col_sum = fb.sum_axis(Axis(0));
    let mut mag = mel_lin.dot(&fb);
    for mut row in mag.axis_iter_mut(Axis(0)) {
        for (v, s) in row.iter_mut().zip(col_sum.iter()) {
            *v = if *s > 0.0 { (*v / s).max(0.0) } else { 0.0 };
        }
    }
    if n_iters > 0 {
        let numer = mel_lin.dot(&fb);
        let gram = fb.t().dot(&fb);
        for _ in 0..n_iters {
            let denom = mag.dot(&gram);
            ndarray::Zip::from(&mut mag).and(&numer).and(&denom).for_each(|s, n, d| {
                if *d > 0.0 {
                    *s *= n / d;
                }
            });
        }
    }
    mag
}

/// Approximate waveform from log-mel frames: transpose-normalized inverse
/// mel projection followed by `n_iters` Griffin-Lim phase updates starting
/// from a seeded random phase.
pub fn reconstruct_waveform(
    m: &MelSpectrogram,
    cfg: &FeatureConfig,
    n_iters: usize,
    seed: u64,
) -> Result<Waveform> {
    cfg.validate()?;
    if m.n_mels != cfg.n_mels || m.frames.ncols() != cfg.n_mels {
        return Err(Error::Shape(format!(
            "mel has {} channels, config expects {}",
            m.frames.ncols(),
            cfg.n_mels
        )));
    }
    let stft = Stft::from_config(cfg);
    let mag = inverse_mel(m, cfg, INVERSE_MEL_ITERS);
    let frames = m.n_frames();
    let len = (frames - 1) * cfg.hop_length + cfg.win_length;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = mag.mapv(|a| {
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        Complex64::from_polar(a, phi)
    });
    let mut signal = stft.synthesize(&spec, len);
    for _ in 0..n_iters {
        let rebuilt = stft.analyze(&signal);
        ndarray::Zip::from(&mut spec)
            .and(&rebuilt)
            .and(&mag)
            .for_each(|s, r, a| {
                let n = r.norm();
                *s = if n > 0.0 {
                    r * (*a / n)
                } else {
                    Complex64::new(*a, 0.0)
                };
            });
        signal = stft.synthesize(&spec, len);
    }
    Waveform::new(signal, cfg.sample_rate)
}
