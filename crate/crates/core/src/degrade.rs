//! Additive noise, synthetic reverberation and band rejection, plus the
//! stochastic augmentation policy that chains them.
//!
//! Every random choice made by [`augment`] is written into the returned
//! [`DegradationSpec`], and [`apply`] replays a spec exactly, so a logged
//! spec is a complete witness of the degraded waveform.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{mean_square, Waveform};
use crate::error::{Error, Result};
use crate::seed;

pub const ROOM_SCALE_MAX: f64 = 100.0;
/// RT60 reached at room scale 100.
pub const MAX_RT60_S: f64 = 0.8;
const RIR_EXTRA_S: f64 = 0.05;
/// Amplitude of the reverberant tail relative to the unit direct path.
const RIR_TAIL_GAIN: f64 = 0.05;
const BAND_REJECT_TAPS: usize = 4001;

#[derive(Clone, Debug)]
pub struct NoiseClip {
    pub id: String,
    pub wave: Waveform,
}

/// A named set of noise recordings.
#[derive(Clone, Debug)]
pub struct NoiseCorpus {
    pub id: String,
    pub clips: Vec<NoiseClip>,
}

impl NoiseCorpus {
    pub fn new(id: impl Into<String>, clips: Vec<NoiseClip>) -> Self {
        Self {
            id: id.into(),
            clips,
        }
    }

    /// Load every `*.wav` in `dir` (sorted by file name). Clip ids are file stems.
    pub fn load_dir(dir: &Path, resample: bool) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let mut clips = Vec::with_capacity(paths.len());
        let mut failures = Vec::new();
        for p in paths {
            match crate::wav::read_wav(&p, resample) {
                Ok(wave) => clips.push(NoiseClip {
                    id: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                    wave,
                }),
                Err(e) => failures.push(e.to_string()),
            }
        }
        if !failures.is_empty() {
            return Err(Error::AudioBatch(failures));
        }
        Ok(Self::new(dir.display().to_string(), clips))
    }

    pub fn get(&self, id: &str) -> Option<&NoiseClip> {
        self.clips.iter().find(|c| c.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Everything sampled for one utterance. Absent fields mean the
/// corresponding degradation was not applied.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub noise_id: Option<String>,
    /// Start position inside the noise clip for circular tiling/cropping.
    pub noise_offset: Option<usize>,
    pub snr_db: Option<f64>,
    pub reverb_applied: bool,
    pub room_scale: Option<f64>,
    pub band_reject_applied: bool,
    pub lower_freq_hz: Option<f64>,
    pub bandwidth_hz: Option<f64>,
    /// Seed of the reverberation tail.
    pub seed: u64,
}

impl DegradationSpec {
    pub fn is_clean(&self) -> bool {
        self.noise_id.is_none() && !self.reverb_applied && !self.band_reject_applied
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("degradation spec: {m}")));
        if self.noise_id.is_some() != self.snr_db.is_some()
            || self.noise_id.is_some() != self.noise_offset.is_some()
        {
            return bad("snr_db and noise_offset must be present exactly when noise is applied");
        }
        if self.reverb_applied != self.room_scale.is_some() {
            return bad("room_scale must be present exactly when reverb is applied");
        }
        if self.band_reject_applied != (self.lower_freq_hz.is_some() && self.bandwidth_hz.is_some())
            || (!self.band_reject_applied
                && (self.lower_freq_hz.is_some() || self.bandwidth_hz.is_some()))
        {
            return bad("band-reject fields must be present exactly when band rejection is applied");
        }
        Ok(())
    }
}

/// Which noise corpus a policy draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSelector {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub p_augment: f64,
    pub snr_choices_db: Vec<f64>,
    pub p_reverb: f64,
    pub p_band_reject: f64,
    pub room_scale_range: (f64, f64),
    pub lower_freq_range_hz: (f64, f64),
    pub bandwidth_range_hz: (f64, f64),
    pub noise_corpus: CorpusSelector,
}

impl AugmentationPolicy {
    /// Training-time policy: 60% of utterances degraded, SNR from {0, 5, 10, 15} dB.
    pub fn train() -> Self {
        Self {
            p_augment: 0.6,
            snr_choices_db: vec![0.0, 5.0, 10.0, 15.0],
            p_reverb: 0.5,
            p_band_reject: 0.5,
            room_scale_range: (0.0, 100.0),
            lower_freq_range_hz: (100.0, 500.0),
            bandwidth_range_hz: (50.0, 150.0),
            noise_corpus: CorpusSelector::Train,
        }
    }

    /// Test-time policy: every utterance degraded with unseen SNRs
    /// {2.5, 7.5, 12.5, 17.5} dB from the test noise corpus.
    pub fn test() -> Self {
        Self {
            p_augment: 1.0,
            snr_choices_db: vec![2.5, 7.5, 12.5, 17.5],
            noise_corpus: CorpusSelector::Test,
            ..Self::train()
        }
    }

    /// A policy that never fires.
    pub fn disabled() -> Self {
        Self {
            p_augment: 0.0,
            p_reverb: 0.0,
            p_band_reject: 0.0,
            ..Self::train()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("augmentation policy: {m}")));
        for (name, p) in [
            ("p_augment", self.p_augment),
            ("p_reverb", self.p_reverb),
            ("p_band_reject", self.p_band_reject),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.p_augment > 0.0 && self.snr_choices_db.is_empty() {
            return bad("snr_choices_db is empty".into());
        }
        if self.snr_choices_db.iter().any(|s| !s.is_finite()) {
            return bad("non-finite SNR choice".into());
        }
        let (r0, r1) = self.room_scale_range;
        if !(0.0 <= r0 && r0 <= r1 && r1 <= ROOM_SCALE_MAX) {
            return bad(format!("room_scale_range {r0}..{r1} outside 0..100"));
        }
        let (l0, l1) = self.lower_freq_range_hz;
        let (b0, b1) = self.bandwidth_range_hz;
        if !(0.0 < l0 && l0 <= l1 && 0.0 < b0 && b0 <= b1) {
            return bad("band-reject ranges must be positive and ordered".into());
        }
        Ok(())
    }
}

/// Fail unless train and test SNR sets share no value.
pub fn check_disjoint_snr(train: &AugmentationPolicy, test: &AugmentationPolicy) -> Result<()> {
    let key = |v: &f64| (v * 1000.0).round() as i64;
    let a: BTreeSet<i64> = train.snr_choices_db.iter().map(key).collect();
    let shared: Vec<f64> = test
        .snr_choices_db
        .iter()
        .filter(|v| a.contains(&key(v)))
        .copied()
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "train and test SNR sets overlap at {shared:?} dB"
        )))
    }
}

fn fit_noise(noise: &[f64], len: usize, offset: usize) -> Vec<f64> {
    let n = noise.len();
    (0..len).map(|i| noise[(offset + i) % n]).collect()
}

/// Gain that puts `noise` at `snr_db` below `clean`, powers measured as
/// full-utterance mean squares.
fn snr_gain(clean_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (clean_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

fn mix_with_offset(clean: &Waveform, noise: &Waveform, snr_db: f64, offset: usize) -> Result<Waveform> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::InvalidInput(format!(
            "sample rates differ: clean {} vs noise {}",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidInput("snr_db must be finite".into()));
    }
    let p_clean = clean.power();
    if p_clean <= 0.0 {
        return Err(Error::Silent("clean signal has zero power; SNR undefined"));
    }
    if noise.is_empty() || noise.power() <= 0.0 {
        return Err(Error::Silent("noise has zero power; SNR undefined"));
    }
    let fitted = fit_noise(&noise.samples, clean.len(), offset % noise.len());
    let p_noise = mean_square(&fitted);
    if p_noise <= 0.0 {
        return Err(Error::Silent("noise segment has zero power; SNR undefined"));
    }
    let g = snr_gain(p_clean, p_noise, snr_db);
    Ok(Waveform {
        samples: clean
            .samples
            .iter()
            .zip(&fitted)
            .map(|(c, n)| c + g * n)
            .collect(),
        sample_rate: clean.sample_rate,
    })
}

/// `clean + g * noise'`, where `noise'` is the noise tiled or cropped to
/// the clean length and `g` sets the requested SNR.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    mix_with_offset(clean, noise, snr_db, 0)
}

/// Full linear convolution through the FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(*x.get(i).unwrap_or(&0.0), 0.0))
        .collect();
    let mut b: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(*h.get(i).unwrap_or(&0.0), 0.0))
        .collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..out_len].iter().map(|c| c.re * scale).collect()
}

pub fn rt60_for_room_scale(room_scale: f64) -> f64 {
    room_scale / ROOM_SCALE_MAX * MAX_RT60_S
}

/// Synthetic room impulse response: unit direct path followed by an
/// exponentially decaying Gaussian tail. Room scale 0 gives the unit impulse.
pub fn room_impulse_response(room_scale: f64, sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=ROOM_SCALE_MAX).contains(&room_scale) {
        return Err(Error::InvalidInput(format!(
            "room_scale {room_scale} outside [0, 100]"
        )));
    }
    if room_scale == 0.0 {
        return Ok(vec![1.0]);
    }
    let rt60 = rt60_for_room_scale(room_scale);
    let sr = sample_rate as f64;
    let len = ((rt60 + RIR_EXTRA_S) * sr).round() as usize;
    // 60 dB amplitude decay over rt60 seconds
    let decay = 3.0 * std::f64::consts::LN_10 / (rt60 * sr);
    let mut rng = seed::rng(seed);
    let mut rir = Vec::with_capacity(len);
    rir.push(1.0);
    for n in 1..len {
        rir.push(RIR_TAIL_GAIN * standard_normal(&mut rng) * (-decay * n as f64).exp());
    }
    Ok(rir)
}

/// Box-Muller draw; keeps the crate on `rand` alone.
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Direct-path energy over tail energy, in dB.
pub fn direct_to_reverberant_db(rir: &[f64]) -> f64 {
    let direct = rir[0] * rir[0];
    let tail: f64 = rir[1..].iter().map(|v| v * v).sum();
    if tail == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (direct / tail).log10()
    }
}

/// Convolve with the synthetic RIR for `room_scale`, truncated to the input length.
pub fn apply_reverb(w: &Waveform, room_scale: f64, seed: u64) -> Result<Waveform> {
    let rir = room_impulse_response(room_scale, w.sample_rate, seed)?;
    if rir.len() == 1 {
        return Ok(w.clone());
    }
    let mut y = fft_convolve(&w.samples, &rir);
    y.truncate(w.len());
    Ok(Waveform {
        samples: y,
        sample_rate: w.sample_rate,
    })
}

/// Linear-phase FIR band-stop over `[lower, lower + bandwidth]` Hz
/// (Hamming-windowed sinc, odd length).
pub fn band_reject_kernel(lower_hz: f64, bandwidth_hz: f64, sample_rate: u32, taps: usize) -> Vec<f64> {
    let sr = sample_rate as f64;
    let f1 = lower_hz / sr;
    let f2 = (lower_hz + bandwidth_hz) / sr;
    let m = (taps - 1) as f64 / 2.0;
    (0..taps)
        .map(|n| {
            let k = n as f64 - m;
            let bandpass = if k == 0.0 {
                2.0 * (f2 - f1)
            } else {
                let pk = std::f64::consts::PI * k;
                ((2.0 * pk * f2).sin() - (2.0 * pk * f1).sin()) / pk
            };
            let win = 0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / (taps - 1) as f64).cos();
            let delta = if k == 0.0 { 1.0 } else { 0.0 };
            delta - bandpass * win
        })
        .collect()
}

pub fn apply_band_reject(w: &Waveform, lower_freq_hz: f64, bandwidth_hz: f64) -> Result<Waveform> {
    let nyquist = w.sample_rate as f64 / 2.0;
    if !(lower_freq_hz > 0.0 && bandwidth_hz > 0.0) {
        return Err(Error::InvalidInput(
            "band-reject frequencies must be positive".into(),
        ));
    }
    if lower_freq_hz + bandwidth_hz >= nyquist {
        return Err(Error::InvalidInput(format!(
            "stop band {lower_freq_hz}..{} Hz exceeds Nyquist {nyquist} Hz",
            lower_freq_hz + bandwidth_hz
        )));
    }
    let h = band_reject_kernel(lower_freq_hz, bandwidth_hz, w.sample_rate, BAND_REJECT_TAPS);
    let delay = (BAND_REJECT_TAPS - 1) / 2;
    let y = fft_convolve(&w.samples, &h);
    Ok(Waveform {
        samples: y[delay..delay + w.len()].to_vec(),
        sample_rate: w.sample_rate,
    })
}

/// Replay a spec: noise, then reverb, then band rejection, then a single
/// clip to [-1, 1]. A clean spec returns the input unchanged.
pub fn apply(w: &Waveform, spec: &DegradationSpec, corpus: Option<&NoiseCorpus>) -> Result<Waveform> {
    spec.validate()?;
    if spec.is_clean() {
        return Ok(w.clone());
    }
    let mut out = w.clone();
    if let (Some(id), Some(snr), Some(offset)) = (&spec.noise_id, spec.snr_db, spec.noise_offset) {
        let corpus = corpus.ok_or_else(|| Error::InvalidInput("noise corpus required".into()))?;
        let clip = corpus
            .get(id)
            .ok_or_else(|| Error::InvalidInput(format!("noise clip {id} not in corpus {}", corpus.id)))?;
        out = mix_with_offset(&out, &clip.wave, snr, offset)?;
    }
    if let Some(room) = spec.room_scale {
        out = apply_reverb(&out, room, spec.seed)?;
    }
    if let (Some(lo), Some(bw)) = (spec.lower_freq_hz, spec.bandwidth_hz) {
        out = apply_band_reject(&out, lo, bw)?;
    }
    Ok(out.clipped())
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws one utterance's degradation. The number of values consumed from
/// `rng` does not depend on which branches fire.
pub fn sample_spec<R: Rng + ?Sized>(
    policy: &AugmentationPolicy,
    corpus: Option<&NoiseCorpus>,
    rng: &mut R,
) -> Result<DegradationSpec> {
    let tail_seed = rng.next_u64();
    let fire = rng.random::<f64>() < policy.p_augment;
    let clip_u: f64 = rng.random();
    let offset_u: f64 = rng.random();
    let snr_u: f64 = rng.random();
    let reverb = rng.random::<f64>() < policy.p_reverb;
    let room = uniform(rng, policy.room_scale_range);
    let band = rng.random::<f64>() < policy.p_band_reject;
    let lower = uniform(rng, policy.lower_freq_range_hz);
    let bw = uniform(rng, policy.bandwidth_range_hz);
    let mut spec = DegradationSpec {
        seed: tail_seed,
        ..Default::default()
    };
    if !fire {
        return Ok(spec);
    }
    let corpus = match corpus {
        Some(c) if !c.is_empty() => c,
        _ => return Err(Error::InvalidInput("noise corpus is empty".into())),
    };
    let pick = |u: f64, n: usize| ((u * n as f64) as usize).min(n - 1);
    let clip = &corpus.clips[pick(clip_u, corpus.clips.len())];
    spec.noise_id = Some(clip.id.clone());
    spec.noise_offset = Some(pick(offset_u, clip.wave.len().max(1)));
    spec.snr_db = Some(policy.snr_choices_db[pick(snr_u, policy.snr_choices_db.len())]);
    if reverb {
        spec.reverb_applied = true;
        spec.room_scale = Some(room);
    }
    if band {
        spec.band_reject_applied = true;
        spec.lower_freq_hz = Some(lower);
        spec.bandwidth_hz = Some(bw);
    }
    Ok(spec)
}

/// Degrade `w` according to `policy`, returning the output and the spec that reproduces it.
pub fn augment<R: Rng + ?Sized>(
    w: &Waveform,
    policy: &AugmentationPolicy,
    corpus: Option<&NoiseCorpus>,
    rng: &mut R,
) -> Result<(Waveform, DegradationSpec)> {
    let spec = sample_spec(policy, corpus, rng)?;
    let out = apply(w, &spec, corpus)?;
    Ok((out, spec))
}

/// The one-at-a-time conditions used by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleDegradation {
    None,
    Noise,
    Reverb,
    BandReject,
}

impl SingleDegradation {
    pub const ALL: [SingleDegradation; 4] = [
        SingleDegradation::None,
        SingleDegradation::Noise,
        SingleDegradation::Reverb,
        SingleDegradation::BandReject,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SingleDegradation::None => "none",
            SingleDegradation::Noise => "additive_noise",
            SingleDegradation::Reverb => "reverberation",
            SingleDegradation::BandReject => "band_rejection",
        }
    }

    /// Restrict a full spec drawn from `policy` to this single degradation.
    /// Parameters are sampled exactly as `sample_spec` would with every
    /// branch forced on, so conditions share the same draws.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        policy: &AugmentationPolicy,
        corpus: Option<&NoiseCorpus>,
        rng: &mut R,
    ) -> Result<DegradationSpec> {
        let forced = AugmentationPolicy {
            p_augment: 1.0,
            p_reverb: 1.0,
            p_band_reject: 1.0,
            ..policy.clone()
        };
        let full = sample_spec(&forced, corpus, rng)?;
        let mut spec = DegradationSpec {
            seed: full.seed,
            ..Default::default()
        };
        match self {
            SingleDegradation::None => {}
            SingleDegradation::Noise => {
                spec.noise_id = full.noise_id;
                spec.noise_offset = full.noise_offset;
                spec.snr_db = full.snr_db;
            }
            SingleDegradation::Reverb => {
                spec.reverb_applied = true;
                spec.room_scale = full.room_scale;
            }
            SingleDegradation::BandReject => {
                spec.band_reject_applied = true;
                spec.lower_freq_hz = full.lower_freq_hz;
                spec.bandwidth_hz = full.bandwidth_hz;
            }
        }
        Ok(spec)
    }
}
