//! Self-reconstruction training in three regimes: clean autoencoding,
//! denoising (degraded input, clean target), and denoising with single-step
//! adversarial examples mixed in.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{fast_adv_example, AttackConfig};
use crate::audio::{FeatureConfig, MelFrontend, Waveform};
use crate::corpus::Dataset;
use crate::degrade::{augment, AugmentationPolicy, DegradationSpec, NoiseCorpus};
use crate::error::{Error, Result};
use crate::model::{l1_loss, l1_loss_grad, ModelConfig, VcModel};
use crate::nn::Adam;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Clean,
    Denoising,
    DenoisingAdversarial,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Clean, TrainMode::Denoising, TrainMode::DenoisingAdversarial];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s.replace('-', "_"))
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Clean => "clean",
            TrainMode::Denoising => "denoising",
            TrainMode::DenoisingAdversarial => "denoising_adversarial",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub policy: AugmentationPolicy,
    pub attack: Option<AttackConfig>,
    pub p_adv: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Random crop length in samples; `None` uses whole utterances.
    pub segment_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Denoising,
            policy: AugmentationPolicy::train(),
            attack: None,
            p_adv: 0.5,
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            segment_samples: None,
        }
    }
}

impl TrainConfig {
    /// Applies the mode rules: clean training never augments and only the
    /// adversarial mode carries an attack (defaulting to alpha 0.001, eps 0.005).
    pub fn resolved(mut self) -> Result<Self> {
        match self.mode {
            TrainMode::Clean => {
                self.policy = AugmentationPolicy::disabled();
                self.attack = None;
            }
            TrainMode::Denoising => self.attack = None,
            TrainMode::DenoisingAdversarial => {
                if self.attack.is_none() {
                    self.attack = Some(AttackConfig::default());
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_adv) {
            return Err(Error::Config(format!("p_adv = {} is not a probability", self.p_adv)));
        }
        Ok(())
    }
}

/// What happened to one utterance in a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub seed: u64,
    pub crop_start: usize,
    pub spec: DegradationSpec,
    pub adversarial: bool,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub utterances: Vec<UtteranceRecord>,
}

/// Arguments of one loss evaluation, passed to an observer.
pub struct LossCall<'a> {
    pub utterance_id: &'a str,
    pub input: &'a Waveform,
    pub clean: &'a Waveform,
    pub target_mel: &'a Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: VcModel,
    pub config: TrainConfig,
    frontend: MelFrontend,
    opt: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(model: VcModel, config: TrainConfig) -> Result<Self> {
        let config = config.resolved()?;
        let frontend = MelFrontend::new(&model.features)?;
        let opt = Adam::new(&model.params, config.learning_rate);
        Ok(Self {
            model,
            config,
            frontend,
            opt,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn batch_indices(&self, n: usize) -> Vec<usize> {
        let mut rng = seed::derived_rng(self.config.seed, "train.batch", self.step as u64);
        let k = self.config.batch_size.min(n);
        rand::seq::index::sample(&mut rng, n, k).into_vec()
    }

    fn crop<'a>(&self, w: &'a Waveform, rng: &mut seed::Rng) -> (usize, std::borrow::Cow<'a, Waveform>) {
        let u: f64 = rng.random();
        match self.config.segment_samples {
            Some(len) if w.len() > len => {
                let start = ((u * (w.len() - len + 1) as f64) as usize).min(w.len() - len);
                let seg = Waveform {
                    samples: w.samples[start..start + len].to_vec(),
                    sample_rate: w.sample_rate,
                };
                (start, std::borrow::Cow::Owned(seg))
            }
            _ => (0, std::borrow::Cow::Borrowed(w)),
        }
    }

    /// One optimizer update on a batch drawn from `data`.
    pub fn step(&mut self, data: &Dataset, noise: Option<&NoiseCorpus>) -> Result<StepRecord> {
        self.step_observed(data, noise, &mut |_| {})
    }

    /// As [`Trainer::step`], calling `observer` with the operands of every loss evaluation.
    pub fn step_observed(
        &mut self,
        data: &Dataset,
        noise: Option<&NoiseCorpus>,
        observer: &mut dyn FnMut(&LossCall),
    ) -> Result<StepRecord> {
        let (record, grads) = self.compute(data, noise, true, observer)?;
        let grads = grads.expect("gradients requested");
        self.opt.step(&mut self.model.params, &grads)?;
        self.step += 1;
        Ok(record)
    }

    /// Loss the next step would report, without updating anything.
    pub fn peek_loss(&self, data: &Dataset, noise: Option<&NoiseCorpus>) -> Result<f64> {
        Ok(self.compute(data, noise, false, &mut |_| {})?.0.loss)
    }

    fn compute(
        &self,
        data: &Dataset,
        noise: Option<&NoiseCorpus>,
        want_grads: bool,
        observer: &mut dyn FnMut(&LossCall),
    ) -> Result<(StepRecord, Option<crate::nn::ParamStore>)> {
        if data.is_empty() {
            return Err(Error::InvalidInput("training batch is empty".into()));
        }
        let idx = self.batch_indices(data.len());
        let nb = idx.len() as f64;
        let mut grads = want_grads.then(|| self.model.params.zeros_like());
        let mut total = 0.0;
        let mut records = Vec::with_capacity(idx.len());
        for (i, &u) in idx.iter().enumerate() {
            let utt = &data.utterances[u];
            let useed = seed::derive(self.config.seed, "train.utt", (self.step * self.config.batch_size + i) as u64);
            let mut rng = seed::rng(useed);
            let (crop_start, clean) = self.crop(&utt.wave, &mut rng);
            let (degraded, spec) = augment(&clean, &self.config.policy, noise, &mut rng)?;
            let adv_draw: f64 = rng.random();
            let adversarial = self.config.attack.is_some() && adv_draw < self.config.p_adv;
            let input = match (&self.config.attack, adversarial) {
                (Some(a), true) => {
                    fast_adv_example(&self.model, &self.frontend, &degraded, a.alpha, a.epsilon, &mut rng)?.wave
                }
                _ => degraded,
            };
            let target = self.frontend.extract(&clean)?.frames;
            let mel_in = self.frontend.extract(&input)?.frames;
            observer(&LossCall {
                utterance_id: &utt.id,
                input: &input,
                clean: &clean,
                target_mel: &target,
            });
            let (pred, tape) = self.model.forward_train(&mel_in, &mel_in)?;
            let loss = l1_loss(&pred, &target)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at step {} on utterance {} (seed {useed})",
                    self.step, utt.id
                )));
            }
            total += loss / nb;
            if let Some(g) = grads.as_mut() {
                let d = l1_loss_grad(&pred, &target).mapv(|v| v / nb);
                self.model.backward(&tape, &d, Some(g));
            }
            records.push(UtteranceRecord {
                utterance_id: utt.id.clone(),
                seed: useed,
                crop_start,
                spec,
                adversarial,
            });
        }
        Ok((
            StepRecord {
                step: self.step,
                loss: total,
                utterances: records,
            },
            grads,
        ))
    }
}

/// Mean and standard deviation of the clean log-mel features of `data`.
pub fn feature_stats(data: &Dataset, features: &FeatureConfig) -> Result<(f64, f64)> {
    let fe = MelFrontend::new(features)?;
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
    for u in &data.utterances {
        let m = fe.extract(&u.wave)?;
        for v in m.frames.iter() {
            s += v;
            s2 += v * v;
        }
        n += m.frames.len();
    }
    if n == 0 {
        return Err(Error::InvalidInput("no frames to compute feature statistics".into()));
    }
    let mean = s / n as f64;
    let var = (s2 / n as f64 - mean * mean).max(1e-12);
    Ok((mean, var.sqrt()))
}

pub struct TrainOutcome {
    pub model: VcModel,
    pub log: Vec<StepRecord>,
}

/// Full training run. With `out_dir`, writes `train_log.jsonl`, periodic
/// `checkpoint_<step>.ckpt` files and the final `model.ckpt`; on a
/// non-finite loss the current parameters go to `diagnostic.ckpt`.
pub fn train(
    data: &Dataset,
    noise: Option<&NoiseCorpus>,
    mut model_cfg: ModelConfig,
    features: FeatureConfig,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if data.speakers().len() < 2 {
        return Err(Error::InvalidInput("training needs at least two speakers".into()));
    }
    let (mean, std) = feature_stats(data, &features)?;
    model_cfg.feature_mean = mean;
    model_cfg.feature_std = std;
    let mut trainer = Trainer::new(VcModel::new(model_cfg, features)?, cfg)?;
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(std::io::BufWriter::new(std::fs::File::create(d.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut log = Vec::with_capacity(trainer.config.steps);
    for _ in 0..trainer.config.steps {
        let rec = match trainer.step(data, noise) {
            Ok(r) => r,
            Err(e) => {
                if let Some(d) = out_dir {
                    trainer.model.save(&d.join("diagnostic.ckpt"))?;
                }
                return Err(e);
            }
        };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &rec)?;
            f.write_all(b"\n")?;
        }
        log.push(rec);
        let every = trainer.config.checkpoint_every;
        if let Some(d) = out_dir {
            if every > 0 && trainer.steps_done() % every == 0 {
                trainer
                    .model
                    .save(&d.join(format!("checkpoint_{:06}.ckpt", trainer.steps_done())))?;
            }
        }
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    if let Some(d) = out_dir {
        trainer.model.save(&d.join("model.ckpt"))?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}

/// Reads a `train_log.jsonl` file.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Mean L1 between the model's self-reconstruction of `inputs[i]` and the
/// clean mel of `clean[i]`.
pub fn reconstruction_error(model: &VcModel, inputs: &[Waveform], clean: &[Waveform]) -> Result<f64> {
    if inputs.len() != clean.len() || inputs.is_empty() {
        return Err(Error::InvalidInput("reconstruction_error needs matching non-empty lists".into()));
    }
    let fe = MelFrontend::new(&model.features)?;
    let mut total = 0.0;
    for (x, c) in inputs.iter().zip(clean) {
        let m = fe.extract(x)?;
        let pred = model.convert(&m, &m)?;
        total += l1_loss(&pred.frames, &fe.extract(c)?.frames)?;
    }
    Ok(total / inputs.len() as f64)
}

/// Groups step records by whether their utterances were degraded; returns
/// `(augmented fraction, adversarial fraction)` over all utterances.
pub fn incidence(log: &[StepRecord]) -> (f64, f64) {
    let mut counts: HashMap<bool, usize> = HashMap::new();
    let (mut adv, mut n) = (0usize, 0usize);
    for r in log {
        for u in &r.utterances {
            *counts.entry(!u.spec.is_clean()).or_default() += 1;
            adv += usize::from(u.adversarial);
            n += 1;
        }
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (
        *counts.get(&true).unwrap_or(&0) as f64 / n as f64,
        adv as f64 / n as f64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, ToyCorpusConfig};

    fn small() -> (crate::corpus::ToyCorpus, ModelConfig, FeatureConfig) {
        let corpus = generate(&ToyCorpusConfig {
            train_speakers: 2,
            eval_speakers: 2,
            utterances_per_speaker: 4,
            utterance_s: 0.5,
            noise_clips_per_family: 1,
            noise_clip_s: 1.0,
            seed: 11,
        });
        let model = ModelConfig {
            hidden: 8,
            content_dim: 4,
            speaker_dim: 4,
            kernel: 3,
            init_seed: 1,
            ..ModelConfig::default()
        };
        let feats = FeatureConfig {
            n_mels: 20,
            ..FeatureConfig::default()
        };
        (corpus, model, feats)
    }

    #[test]
    fn clean_mode_forces_policy_off() {
        let cfg = TrainConfig {
            mode: TrainMode::Clean,
            ..TrainConfig::default()
        }
        .resolved()
        .unwrap();
        assert_eq!(cfg.policy.p_augment, 0.0);
        assert!(cfg.attack.is_none());
        let adv = TrainConfig {
            mode: TrainMode::DenoisingAdversarial,
            ..TrainConfig::default()
        }
        .resolved()
        .unwrap();
        let a = adv.attack.unwrap();
        assert_eq!((a.alpha, a.epsilon), (0.001, 0.005));
    }

    #[test]
    fn loss_target_is_always_the_clean_mel() {
        let (corpus, mc, fc) = small();
        let cfg = TrainConfig {
            mode: TrainMode::DenoisingAdversarial,
            policy: AugmentationPolicy {
                p_augment: 1.0,
                ..AugmentationPolicy::train()
            },
            p_adv: 1.0,
            batch_size: 3,
            steps: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(VcModel::new(mc, fc.clone()).unwrap(), cfg).unwrap();
        let fe = MelFrontend::new(&fc).unwrap();
        let mut calls = 0;
        let rec = t
            .step_observed(&corpus.train, Some(&corpus.train_noise), &mut |c| {
                calls += 1;
                let clean_mel = fe.extract(c.clean).unwrap().frames;
                assert_eq!(c.target_mel, &clean_mel);
                assert_ne!(c.input, c.clean);
            })
            .unwrap();
        assert_eq!(calls, 3);
        assert!(rec.utterances.iter().all(|u| u.adversarial && !u.spec.is_clean()));
    }

    #[test]
    fn clean_mode_equals_denoising_without_augmentation() {
        let (corpus, mc, fc) = small();
        let model = VcModel::new(mc, fc).unwrap();
        let clean = Trainer::new(
            model.clone(),
            TrainConfig {
                mode: TrainMode::Clean,
                batch_size: 4,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let denoise = Trainer::new(
            model,
            TrainConfig {
                mode: TrainMode::Denoising,
                policy: AugmentationPolicy::disabled(),
                batch_size: 4,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let a = clean.peek_loss(&corpus.train, None).unwrap();
        let b = denoise.peek_loss(&corpus.train, Some(&corpus.train_noise)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logged_step_replays_exactly() {
        let (corpus, mc, fc) = small();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(VcModel::new(mc, fc).unwrap(), cfg).unwrap();
        t.step(&corpus.train, Some(&corpus.train_noise)).unwrap();
        let snapshot = t.clone();
        let rec = t.step(&corpus.train, Some(&corpus.train_noise)).unwrap();
        assert_eq!(snapshot.peek_loss(&corpus.train, Some(&corpus.train_noise)).unwrap(), rec.loss);
    }

    #[test]
    fn train_writes_log_and_checkpoints() {
        let (corpus, mc, fc) = small();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 2,
            checkpoint_every: 2,
            ..TrainConfig::default()
        };
        let out = train(&corpus.train, Some(&corpus.train_noise), mc, fc, cfg, Some(dir.path())).unwrap();
        let log = read_log(&dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log, out.log);
        assert!(dir.path().join("checkpoint_000002.ckpt").exists());
        let reloaded = VcModel::load(&dir.path().join("model.ckpt")).unwrap();
        assert_eq!(reloaded.params, out.model.params);
    }

    #[test]
    fn needs_two_speakers() {
        let (mut corpus, mc, fc) = small();
        let first = corpus.train.utterances[0].speaker.clone();
        corpus.train.utterances.retain(|u| u.speaker == first);
        let r = train(&corpus.train, None, mc, fc, TrainConfig::default(), None);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
