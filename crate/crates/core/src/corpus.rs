//! Synthetic toy corpus.
//!
//! Speakers are source-filter voices: a harmonic glottal source at a
//! speaker-specific pitch, vowel formants scaled by a vocal-tract factor,
//! a speaker-specific spectral coloring and tilt, and some breath noise.
//! Utterances are random phone sequences, so content varies per utterance
//! while timbre stays fixed per speaker.
//!
//! Two disjoint noise families are provided: stationary "household" noises
//! for training and non-stationary "street/cafe" noises for testing.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::degrade::{standard_normal, NoiseClip, NoiseCorpus};
use crate::error::Result;
use crate::manifest::{Manifest, ManifestEntry};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: String,
    pub f0_hz: f64,
    pub formant_scale: f64,
    /// Spectral coloring bumps: (center Hz, gain dB, width Hz).
    pub coloring: Vec<(f64, f64, f64)>,
    pub tilt_db_per_octave: f64,
    pub breathiness: f64,
}

impl SpeakerProfile {
    pub fn random<R: Rng + ?Sized>(id: impl Into<String>, rng: &mut R) -> Self {
        let coloring = (0..4)
            .map(|_| {
                let center = 10f64.powf(rng.random_range(300f64.log10()..6000f64.log10()));
                (
                    center,
                    rng.random_range(-9.0..9.0),
                    rng.random_range(150.0..600.0),
                )
            })
            .collect();
        Self {
            id: id.into(),
            f0_hz: rng.random_range(90.0..240.0),
            formant_scale: rng.random_range(0.85..1.18),
            coloring,
            tilt_db_per_octave: rng.random_range(-9.0..-3.0),
            breathiness: rng.random_range(0.0..0.12),
        }
    }

    fn coloring_gain(&self, f: f64) -> f64 {
        let db: f64 = self
            .coloring
            .iter()
            .map(|(c, g, w)| g * (-0.5 * ((f - c) / w).powi(2)).exp())
            .sum();
        let octaves = (f.max(50.0) / 500.0).log2().max(0.0);
        10f64.powf((db + self.tilt_db_per_octave * octaves) / 20.0)
    }
}

#[derive(Clone, Copy, Debug)]
enum Phone {
    Vowel(char, [f64; 3]),
    Fricative(char, f64, f64),
    Pause,
}

const PHONES: &[Phone] = &[
    Phone::Vowel('a', [730.0, 1090.0, 2440.0]),
    Phone::Vowel('i', [270.0, 2290.0, 3010.0]),
    Phone::Vowel('u', [300.0, 870.0, 2240.0]),
    Phone::Vowel('e', [530.0, 1840.0, 2480.0]),
    Phone::Vowel('o', [570.0, 840.0, 2410.0]),
    Phone::Vowel('y', [660.0, 1720.0, 2410.0]),
    Phone::Vowel('r', [490.0, 1350.0, 1690.0]),
    Phone::Fricative('s', 5500.0, 1800.0),
    Phone::Fricative('x', 3200.0, 1200.0),
    Phone::Fricative('f', 2500.0, 3000.0),
];

/// Second-order resonator used to color noise.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(center: f64, bandwidth: f64) -> Self {
        let sr = SAMPLE_RATE as f64;
        let r = (-std::f64::consts::PI * bandwidth / sr).exp();
        let theta = std::f64::consts::TAU * center / sr;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Target RMS of generated utterances.
const SPEECH_RMS: (f64, f64) = (0.07, 0.14);
/// White noise floor, about -60 dBFS.
const NOISE_FLOOR: f64 = 1e-3;

/// Synthesize one utterance of `n_samples`; returns the audio and its phone string.
pub fn synthesize_utterance<R: Rng + ?Sized>(
    speaker: &SpeakerProfile,
    n_samples: usize,
    rng: &mut R,
) -> (Waveform, String) {
    let sr = SAMPLE_RATE as f64;
    // phone segmentation
    let mut segments: Vec<(Phone, usize)> = Vec::new();
    let lead = rng.random_range(800..2400);
    segments.push((Phone::Pause, lead));
    let mut used = lead;
    while used < n_samples {
        let phone = if rng.random::<f64>() < 0.12 {
            Phone::Pause
        } else {
            PHONES[rng.random_range(0..PHONES.len())]
        };
        let dur = match phone {
            Phone::Vowel(..) => rng.random_range(1600..3400),
            Phone::Fricative(..) => rng.random_range(1000..2000),
            Phone::Pause => rng.random_range(800..2000),
        };
        segments.push((phone, dur));
        used += dur;
    }
    let text: String = segments
        .iter()
        .filter_map(|(p, _)| match p {
            Phone::Vowel(c, _) | Phone::Fricative(c, ..) => Some(*c),
            Phone::Pause => None,
        })
        .collect();

    // per-sample control tracks
    let mut formants = vec![[0.0f64; 3]; n_samples];
    let mut voiced = vec![0.0f64; n_samples];
    let mut fric = vec![(0.0f64, 0.0f64, 0.0f64); n_samples];
    let mut pos = 0;
    let mut prev_formants = [500.0, 1500.0, 2500.0];
    for (phone, dur) in &segments {
        let end = (pos + dur).min(n_samples);
        let ramp = 480usize;
        for i in pos..end {
            let k = i - pos;
            let edge = (k.min(end - 1 - i) as f64 / ramp as f64).min(1.0);
            match phone {
                Phone::Vowel(_, f) => {
                    let t = (k as f64 / ramp as f64).min(1.0);
                    for j in 0..3 {
                        formants[i][j] = (prev_formants[j] * (1.0 - t) + f[j] * t) * speaker.formant_scale;
                    }
                    voiced[i] = edge;
                }
                Phone::Fricative(_, c, b) => {
                    formants[i] = prev_formants.map(|v| v * speaker.formant_scale);
                    fric[i] = (edge, *c, *b);
                }
                Phone::Pause => {
                    formants[i] = prev_formants.map(|v| v * speaker.formant_scale);
                }
            }
        }
        if let Phone::Vowel(_, f) = phone {
            prev_formants = *f;
        }
        pos = end;
        if pos >= n_samples {
            break;
        }
    }

    // pitch contour: declination plus a slow wobble
    let wobble_hz = rng.random_range(2.0..5.0);
    let wobble_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let start_ratio = rng.random_range(1.02..1.10);
    let mut out = vec![0.0; n_samples];
    let mut phase = 0.0f64;
    let bandwidths = [90.0, 110.0, 160.0];
    let mut fric_filters: Option<(f64, Resonator)> = None;
    let gain_table: Vec<f64> = (0..=1600).map(|k| speaker.coloring_gain(k as f64 * 5.0)).collect();
    let gain_at = |f: f64| gain_table[((f / 5.0).round() as usize).min(1600)];
    for i in 0..n_samples {
        let t = i as f64 / n_samples as f64;
        let f0 = speaker.f0_hz
            * (start_ratio - 0.1 * t)
            * (1.0 + 0.03 * (std::f64::consts::TAU * wobble_hz * i as f64 / sr + wobble_phase).sin());
        phase = (phase + std::f64::consts::TAU * f0 / sr) % std::f64::consts::TAU;
        let mut s = 0.0;
        if voiced[i] > 0.0 {
            let n_harm = ((7000.0 / f0) as usize).max(1);
            for h in 1..=n_harm {
                let f = f0 * h as f64;
                let env: f64 = (0..3)
                    .map(|j| 1.0 / (1.0 + ((f - formants[i][j]) / bandwidths[j]).powi(2)))
                    .sum::<f64>()
                    + 0.02;
                s += env * gain_at(f) * (phase * h as f64).sin();
            }
            s *= voiced[i] * 0.3;
            s += voiced[i] * speaker.breathiness * standard_normal(rng) * 0.5;
        }
        let (famp, fc, fb) = fric[i];
        if famp > 0.0 {
            let needs_new = fric_filters.as_ref().is_none_or(|(c, _)| *c != fc);
            if needs_new {
                fric_filters = Some((fc, Resonator::new(fc, fb)));
            }
            let (_, res) = fric_filters.as_mut().unwrap();
            s += famp * 4.0 * res.tick(standard_normal(rng)) * gain_at(fc);
        }
        out[i] = s;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n_samples as f64).sqrt();
    let target = rng.random_range(SPEECH_RMS.0..SPEECH_RMS.1);
    let g = if rms > 0.0 { target / rms } else { 0.0 };
    for v in &mut out {
        *v = (*v * g + NOISE_FLOOR * standard_normal(rng)).clamp(-1.0, 1.0);
    }
    (
        Waveform {
            samples: out,
            sample_rate: SAMPLE_RATE,
        },
        text,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Pink,
    Brown,
    Hum,
    Fan,
    Babble,
    White,
    Tonal,
    Clicks,
    Cafe,
    Street,
    Siren,
    Rain,
}

impl NoiseFamily {
    pub const TRAIN: [NoiseFamily; 8] = [
        NoiseFamily::Pink,
        NoiseFamily::Brown,
        NoiseFamily::Hum,
        NoiseFamily::Fan,
        NoiseFamily::Babble,
        NoiseFamily::White,
        NoiseFamily::Tonal,
        NoiseFamily::Clicks,
    ];
    pub const TEST: [NoiseFamily; 4] = [
        NoiseFamily::Cafe,
        NoiseFamily::Street,
        NoiseFamily::Siren,
        NoiseFamily::Rain,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseFamily::Pink => "pink",
            NoiseFamily::Brown => "brown",
            NoiseFamily::Hum => "hum",
            NoiseFamily::Fan => "fan",
            NoiseFamily::Babble => "babble",
            NoiseFamily::White => "white",
            NoiseFamily::Tonal => "tonal",
            NoiseFamily::Clicks => "clicks",
            NoiseFamily::Cafe => "cafe",
            NoiseFamily::Street => "street",
            NoiseFamily::Siren => "siren",
            NoiseFamily::Rain => "rain",
        }
    }
}

fn pink<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // Paul Kellet's economy filter
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let w = standard_normal(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

fn babble<R: Rng + ?Sized>(n: usize, talkers: usize, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for k in 0..talkers {
        let spk = SpeakerProfile::random(format!("babble{k}"), rng);
        let (w, _) = synthesize_utterance(&spk, n, rng);
        for (o, s) in out.iter_mut().zip(&w.samples) {
            *o += s;
        }
    }
    out
}

/// Generate one clip of the given family.
pub fn synthesize_noise<R: Rng + ?Sized>(family: NoiseFamily, n: usize, rng: &mut R) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let tau = std::f64::consts::TAU;
    let mut x: Vec<f64> = match family {
        NoiseFamily::Pink => pink(n, rng),
        NoiseFamily::Brown => {
            let mut acc = 0.0;
            (0..n)
                .map(|_| {
                    acc = 0.995 * acc + 0.1 * standard_normal(rng);
                    acc
                })
                .collect()
        }
        NoiseFamily::Hum => {
            let base = if rng.random::<bool>() { 50.0 } else { 60.0 };
            let amps: Vec<f64> = (1..=8).map(|_| rng.random_range(0.2..1.0)).collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    amps.iter()
                        .enumerate()
                        .map(|(h, a)| a * (tau * base * (h + 1) as f64 * t).sin())
                        .sum::<f64>()
                        + 0.05 * standard_normal(rng)
                })
                .collect()
        }
        NoiseFamily::Fan => {
            let mut res = Resonator::new(rng.random_range(300.0..1200.0), 400.0);
            let am = rng.random_range(0.5..2.0);
            (0..n)
                .map(|i| {
                    (1.0 + 0.3 * (tau * am * i as f64 / sr).sin()) * res.tick(standard_normal(rng))
                        + 0.02 * standard_normal(rng)
                })
                .collect()
        }
        NoiseFamily::Babble => babble(n, 4, rng),
        NoiseFamily::White => (0..n).map(|_| standard_normal(rng)).collect(),
        NoiseFamily::Tonal => {
            // stationary partials spread over the whole band
            let partials: Vec<(f64, f64, f64)> = (0..rng.random_range(3..7))
                .map(|_| {
                    let f = 150.0 * (40.0f64).powf(rng.random::<f64>());
                    (f, rng.random_range(0.3..1.0), rng.random_range(0.0..tau))
                })
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    partials.iter().map(|(f, a, p)| a * (tau * f * t + p).sin()).sum::<f64>()
                        + 0.05 * standard_normal(rng)
                })
                .collect()
        }
        NoiseFamily::Clicks => {
            let mut out: Vec<f64> = (0..n).map(|_| 0.02 * standard_normal(rng)).collect();
            let mut i = rng.random_range(0..800);
            while i < n {
                let mut res = Resonator::new(rng.random_range(500.0..7000.0), rng.random_range(200.0..1500.0));
                let amp = rng.random_range(0.5..2.0);
                let decay = rng.random_range(40.0..400.0);
                for k in 0..(6.0 * decay) as usize {
                    if i + k >= n {
                        break;
                    }
                    out[i + k] += amp * (-(k as f64) / decay).exp() * res.tick(standard_normal(rng)) * 8.0;
                }
                i += rng.random_range(400..4000);
            }
            out
        }
        NoiseFamily::Cafe => {
            let mut out = babble(n, 6, rng);
            let mut i = 0;
            while i < n {
                i += rng.random_range(1600..8000);
                let mut res = Resonator::new(rng.random_range(2000.0..6000.0), 300.0);
                let amp = rng.random_range(0.5..2.0);
                for k in 0..1200.min(n.saturating_sub(i)) {
                    let env = (-(k as f64) / 200.0).exp();
                    out[i + k] += amp * env * res.tick(standard_normal(rng)) * 8.0;
                }
            }
            out
        }
        NoiseFamily::Street => {
            let mut res = Resonator::new(80.0, 60.0);
            let f_start = rng.random_range(200.0..600.0);
            let f_end = rng.random_range(800.0..2000.0);
            let mut ph = 0.0f64;
            (0..n)
                .map(|i| {
                    let t = i as f64 / n as f64;
                    let f = f_start + (f_end - f_start) * t;
                    ph = (ph + tau * f / sr) % tau;
                    6.0 * res.tick(standard_normal(rng)) + 0.3 * ph.sin() * (tau * t).sin().abs()
                        + 0.05 * standard_normal(rng)
                })
                .collect()
        }
        NoiseFamily::Siren => {
            let center = rng.random_range(700.0..1100.0);
            let depth = rng.random_range(200.0..400.0);
            let rate = rng.random_range(0.5..1.5);
            let mut ph = 0.0f64;
            (0..n)
                .map(|i| {
                    let f = center + depth * (tau * rate * i as f64 / sr).sin();
                    ph = (ph + tau * f / sr) % tau;
                    ph.sin() + 0.3 * (3.0 * ph).sin() + 0.05 * standard_normal(rng)
                })
                .collect()
        }
        NoiseFamily::Rain => {
            let mut hp_prev = 0.0;
            (0..n)
                .map(|_| {
                    let w = standard_normal(rng);
                    let hp = w - 0.9 * hp_prev;
                    hp_prev = w;
                    let drop = if rng.random::<f64>() < 0.002 {
                        rng.random_range(-3.0..3.0)
                    } else {
                        0.0
                    };
                    0.3 * hp + drop
                })
                .collect()
        }
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let g = if rms > 0.0 { 0.1 / rms } else { 0.0 };
    for v in &mut x {
        *v = (*v * g).clamp(-1.0, 1.0);
    }
    Waveform {
        samples: x,
        sample_rate: SAMPLE_RATE,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusConfig {
    pub train_speakers: usize,
    pub eval_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_s: f64,
    pub noise_clips_per_family: usize,
    pub noise_clip_s: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            train_speakers: 12,
            eval_speakers: 8,
            utterances_per_speaker: 50,
            utterance_s: 1.0,
            noise_clips_per_family: 2,
            noise_clip_s: 4.0,
            seed: 2022,
        }
    }
}

/// One utterance held in memory.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub text: String,
    pub wave: Waveform,
}

/// An in-memory corpus split.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().map(|u| u.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn by_speaker(&self, speaker: &str) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.speaker == speaker).collect()
    }

    /// Manifest entries with paths `wav/<speaker>/<id>.wav`.
    pub fn manifest(&self) -> Manifest {
        Manifest {
            entries: self
                .utterances
                .iter()
                .map(|u| ManifestEntry {
                    utterance_id: u.id.clone(),
                    speaker_id: u.speaker.clone(),
                    path: format!("wav/{}/{}.wav", u.speaker, u.id).into(),
                    duration_s: Some(u.wave.duration_s()),
                    text: Some(u.text.clone()),
                })
                .collect(),
        }
    }
}

pub struct ToyCorpus {
    pub train: Dataset,
    pub eval: Dataset,
    pub train_noise: NoiseCorpus,
    pub test_noise: NoiseCorpus,
    pub speakers: Vec<SpeakerProfile>,
}

fn make_split(
    profiles: &[SpeakerProfile],
    cfg: &ToyCorpusConfig,
    label: &str,
) -> Dataset {
    let n = (cfg.utterance_s * SAMPLE_RATE as f64) as usize;
    let mut utterances = Vec::new();
    for (si, spk) in profiles.iter().enumerate() {
        for ui in 0..cfg.utterances_per_speaker {
            let mut rng = seed::derived_rng(cfg.seed, label, (si * 100_000 + ui) as u64);
            let (wave, text) = synthesize_utterance(spk, n, &mut rng);
            utterances.push(Utterance {
                id: format!("{}_{:03}", spk.id, ui),
                speaker: spk.id.clone(),
                text,
                wave,
            });
        }
    }
    Dataset { utterances }
}

fn make_noise(families: &[NoiseFamily], cfg: &ToyCorpusConfig, label: &str) -> NoiseCorpus {
    let n = (cfg.noise_clip_s * SAMPLE_RATE as f64) as usize;
    let mut clips = Vec::new();
    for (fi, fam) in families.iter().enumerate() {
        for k in 0..cfg.noise_clips_per_family {
            let mut rng = seed::derived_rng(cfg.seed, label, (fi * 1000 + k) as u64);
            clips.push(NoiseClip {
                id: format!("{}_{k}", fam.name()),
                wave: synthesize_noise(*fam, n, &mut rng),
            });
        }
    }
    NoiseCorpus::new(label, clips)
}

/// Build the whole corpus in memory. Deterministic in `cfg`.
pub fn generate(cfg: &ToyCorpusConfig) -> ToyCorpus {
    let mut rng = seed::derived_rng(cfg.seed, "speakers", 0);
    let total = cfg.train_speakers + cfg.eval_speakers;
    let speakers: Vec<SpeakerProfile> = (0..total)
        .map(|i| {
            let prefix = if i < cfg.train_speakers { "tr" } else { "ev" };
            SpeakerProfile::random(format!("{prefix}{i:02}"), &mut rng)
        })
        .collect();
    let (tr, ev) = speakers.split_at(cfg.train_speakers);
    ToyCorpus {
        train: make_split(tr, cfg, "train-utts"),
        eval: make_split(ev, cfg, "eval-utts"),
        train_noise: make_noise(&NoiseFamily::TRAIN, cfg, "noise-train"),
        test_noise: make_noise(&NoiseFamily::TEST, cfg, "noise-test"),
        speakers,
    }
}

/// Write the corpus as WAV files plus `train.tsv` / `eval.tsv` manifests
/// and `noise/train`, `noise/test` directories.
pub fn write_corpus(corpus: &ToyCorpus, dir: &Path) -> Result<()> {
    for (split, name) in [(&corpus.train, "train.tsv"), (&corpus.eval, "eval.tsv")] {
        let manifest = split.manifest();
        for (u, e) in split.utterances.iter().zip(&manifest.entries) {
            crate::wav::write_wav(&dir.join(&e.path), &u.wave)?;
        }
        manifest.write(&dir.join(name))?;
    }
    for (noise, sub) in [(&corpus.train_noise, "train"), (&corpus.test_noise, "test")] {
        for clip in &noise.clips {
            crate::wav::write_wav(&dir.join("noise").join(sub).join(format!("{}.wav", clip.id)), &clip.wave)?;
        }
    }
    let profiles = serde_json::to_string_pretty(&corpus.speakers)?;
    std::fs::write(dir.join("speakers.json"), profiles)?;
    Ok(())
}
