//! l-infinity embedding attacks on the speaker encoder.
//!
//! The objective is measured on the VC model's own speaker encoder through
//! the differentiable log-mel front-end:
//! * targeted: `1 - cos(emb(x + d), emb(third))`, minimised
//! * untargeted: `cos(emb(x + d), emb(x))`, minimised
//!
//! Each iteration takes a signed gradient step of size `alpha` and projects
//! `d` back into `[-epsilon, epsilon]`. The perturbed waveform is clipped
//! to [-1, 1] once at the end, which never increases `|d|`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelFrontend, Waveform};
use crate::error::{Error, Result};
use crate::model::VcModel;
use crate::nn::{cosine_with_grad, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Untargeted,
    Targeted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub alpha: f64,
    pub epsilon: f64,
    pub n_steps: usize,
    pub target_utterance_id: Option<String>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Targeted,
            alpha: 0.001,
            epsilon: 0.005,
            n_steps: 10,
            target_utterance_id: None,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("attack epsilon {} must be >= 0", self.epsilon)));
        }
        if self.epsilon > 0.0 && !(self.alpha > 0.0 && self.alpha <= self.epsilon) {
            return Err(Error::Config(format!(
                "attack requires 0 < alpha <= epsilon, got alpha {} epsilon {}",
                self.alpha, self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub wave: Waveform,
    /// Objective at the start and after every step.
    pub objective_trace: Vec<f64>,
    pub gradient_evaluations: usize,
}

impl AttackOutcome {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }

    /// Fraction of steps where the objective did not increase.
    pub fn monotone_fraction(&self) -> f64 {
        let steps = self.objective_trace.len().saturating_sub(1);
        if steps == 0 {
            return 1.0;
        }
        let ok = self
            .objective_trace
            .windows(2)
            .filter(|w| w[1] <= w[0])
            .count();
        ok as f64 / steps as f64
    }
}

/// Speaker embedding of `w` under the VC model's speaker encoder.
pub fn speaker_embedding(model: &VcModel, frontend: &MelFrontend, w: &Waveform) -> Result<Mat> {
    let mel = frontend.extract(w)?;
    Ok(model.speaker_forward(&mel.frames)?.0)
}

fn objective_and_grad(
    model: &VcModel,
    frontend: &MelFrontend,
    x: &Waveform,
    anchor: &Mat,
    mode: AttackMode,
) -> Result<(f64, Vec<f64>)> {
    let (logmel, fcache) = frontend.forward_cached(x)?;
    let (emb, tape) = model.speaker_forward(&logmel)?;
    let (cos, dcos) = cosine_with_grad(&emb, anchor);
    let (value, d_emb) = match mode {
        AttackMode::Targeted => (1.0 - cos, -dcos),
        AttackMode::Untargeted => (cos, dcos),
    };
    let d_mel = model.speaker_input_grad(&tape, &d_emb);
    let grad = frontend.backward(&fcache, d_mel.view());
    if grad.iter().any(|g| !g.is_finite()) || !value.is_finite() {
        return Err(Error::NonFinite("attack gradient".into()));
    }
    Ok((value, grad))
}

fn objective(model: &VcModel, frontend: &MelFrontend, x: &Waveform, anchor: &Mat, mode: AttackMode) -> Result<f64> {
    let emb = speaker_embedding(model, frontend, x)?;
    let (cos, _) = cosine_with_grad(&emb, anchor);
    Ok(match mode {
        AttackMode::Targeted => 1.0 - cos,
        AttackMode::Untargeted => cos,
    })
}

fn perturbed(x: &Waveform, delta: &[f64]) -> Waveform {
    Waveform {
        samples: x.samples.iter().zip(delta).map(|(a, d)| a + d).collect(),
        sample_rate: x.sample_rate,
    }
}

/// `clip(x + delta)` such that the computed `|y - x|` never exceeds `eps`,
/// absorbing floating-point rounding of the sum.
fn finalize(x: &Waveform, delta: &[f64], eps: f64) -> Waveform {
    let samples = x
        .samples
        .iter()
        .zip(delta)
        .map(|(&a, &d)| {
            let mut d = d;
            let mut y = (a + d).clamp(-1.0, 1.0);
            while (y - a).abs() > eps {
                d *= 1.0 - 1e-12;
                y = (a + d).clamp(-1.0, 1.0);
            }
            y
        })
        .collect();
    Waveform {
        samples,
        sample_rate: x.sample_rate,
    }
}

/// Multi-step attack on `victim` (the target utterance of a conversion pair).
/// `third` must be given exactly when the attack is targeted.
pub fn embedding_attack(
    model: &VcModel,
    frontend: &MelFrontend,
    victim: &Waveform,
    cfg: &AttackConfig,
    third: Option<&Waveform>,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let anchor = match (cfg.mode, third) {
        (AttackMode::Targeted, Some(t)) => speaker_embedding(model, frontend, t)?,
        (AttackMode::Targeted, None) => {
            return Err(Error::InvalidInput("targeted attack needs a third-speaker utterance".into()))
        }
        (AttackMode::Untargeted, None) => speaker_embedding(model, frontend, victim)?,
        (AttackMode::Untargeted, Some(_)) => {
            return Err(Error::InvalidInput("untargeted attack takes no third utterance".into()))
        }
    };
    if cfg.epsilon == 0.0 {
        let value = objective(model, frontend, victim, &anchor, cfg.mode)?;
        return Ok(AttackOutcome {
            wave: victim.clone(),
            objective_trace: vec![value],
            gradient_evaluations: 0,
        });
    }
    let eps = cfg.epsilon;
    let mut delta = vec![0.0; victim.len()];
    let mut trace = Vec::with_capacity(cfg.n_steps + 1);
    let mut evals = 0;
    for _ in 0..cfg.n_steps {
        let (value, grad) = objective_and_grad(model, frontend, &perturbed(victim, &delta), &anchor, cfg.mode)?;
        evals += 1;
        trace.push(value);
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d = (*d - cfg.alpha * g.signum()).clamp(-eps, eps);
        }
    }
    let wave = finalize(victim, &delta, eps);
    trace.push(objective(model, frontend, &wave, &anchor, cfg.mode)?);
    Ok(AttackOutcome {
        wave,
        objective_trace: trace,
        gradient_evaluations: evals,
    })
}

/// Single-step fast adversarial example: uniform random start in the
/// epsilon-ball, one signed step of size `alpha` against the untargeted
/// objective, projection, clip.
pub fn fast_adv_example<R: Rng + ?Sized>(
    model: &VcModel,
    frontend: &MelFrontend,
    utt: &Waveform,
    alpha: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<AttackOutcome> {
    AttackConfig {
        mode: AttackMode::Untargeted,
        alpha,
        epsilon,
        ..Default::default()
    }
    .validate()?;
    let anchor = speaker_embedding(model, frontend, utt)?;
    if epsilon == 0.0 {
        return Ok(AttackOutcome {
            wave: utt.clone(),
            objective_trace: vec![1.0],
            gradient_evaluations: 0,
        });
    }
    let mut delta: Vec<f64> = (0..utt.len()).map(|_| rng.random_range(-epsilon..=epsilon)).collect();
    let (value, grad) = objective_and_grad(model, frontend, &perturbed(utt, &delta), &anchor, AttackMode::Untargeted)?;
    for (d, g) in delta.iter_mut().zip(&grad) {
        *d = (*d - alpha * g.signum()).clamp(-epsilon, epsilon);
    }
    Ok(AttackOutcome {
        wave: finalize(utt, &delta, epsilon),
        objective_trace: vec![value],
        gradient_evaluations: 1,
    })
}

/// SNR (dB) of the clean utterance relative to the perturbation `adv - clean`.
pub fn perturbation_snr_db(clean: &Waveform, adv: &Waveform) -> f64 {
    let noise: f64 = clean
        .samples
        .iter()
        .zip(&adv.samples)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let signal: f64 = clean.samples.iter().map(|a| a * a).sum();
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{FeatureConfig, SAMPLE_RATE};
    use crate::model::ModelConfig;
    use crate::seed;

    fn setup() -> (VcModel, MelFrontend) {
        let feats = FeatureConfig {
            n_mels: 20,
            ..FeatureConfig::default()
        };
        let model = VcModel::new(
            ModelConfig {
                hidden: 8,
                content_dim: 4,
                speaker_dim: 6,
                kernel: 3,
                init_seed: 5,
                ..ModelConfig::default()
            },
            feats.clone(),
        )
        .unwrap();
        (model, MelFrontend::new(&feats).unwrap())
    }

    fn wave(s: u64) -> Waveform {
        let mut rng = seed::rng(s);
        Waveform::new(
            (0..4000)
                .map(|n| 0.2 * (n as f64 * 0.05 * (1.0 + s as f64)).sin() + 0.02 * rng.random_range(-1.0..1.0))
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn perturbation_stays_in_ball() {
        let (model, fe) = setup();
        let cfg = AttackConfig::default();
        let out = embedding_attack(&model, &fe, &wave(1), &cfg, Some(&wave(2))).unwrap();
        assert!(out.wave.max_abs_diff(&wave(1)) <= 0.005);
        assert_eq!(out.gradient_evaluations, 10);
        assert_eq!(out.objective_trace.len(), 11);
    }

    #[test]
    fn perturbation_snr_is_bounded_by_the_ball() {
        let (model, fe) = setup();
        let x = wave(1);
        let out = embedding_attack(&model, &fe, &x, &AttackConfig::default(), Some(&wave(2))).unwrap();
        // |delta| <= eps everywhere, so the SNR cannot fall below 20 log10(rms / eps)
        let floor = 20.0 * (x.rms() / 0.005).log10();
        let snr = perturbation_snr_db(&x, &out.wave);
        assert!(snr >= floor - 1e-9, "{snr} < {floor}");
        assert!(snr.is_finite());
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let (model, fe) = setup();
        let cfg = AttackConfig {
            epsilon: 0.0,
            ..AttackConfig::default()
        };
        let out = embedding_attack(&model, &fe, &wave(1), &cfg, Some(&wave(2))).unwrap();
        assert_eq!(out.wave, wave(1));
    }

    #[test]
    fn targeted_needs_third_utterance() {
        let (model, fe) = setup();
        assert!(embedding_attack(&model, &fe, &wave(1), &AttackConfig::default(), None).is_err());
        let bad = AttackConfig {
            alpha: 0.01,
            ..AttackConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fast_example_uses_one_gradient_and_is_seeded() {
        let (model, fe) = setup();
        let a = fast_adv_example(&model, &fe, &wave(3), 0.001, 0.005, &mut seed::rng(9)).unwrap();
        let b = fast_adv_example(&model, &fe, &wave(3), 0.001, 0.005, &mut seed::rng(9)).unwrap();
        assert_eq!(a.gradient_evaluations, 1);
        assert_eq!(a.wave, b.wave);
        assert!(a.wave.max_abs_diff(&wave(3)) <= 0.005);
    }

    #[test]
    fn untargeted_attack_lowers_self_similarity() {
        let (model, fe) = setup();
        let cfg = AttackConfig {
            mode: AttackMode::Untargeted,
            ..AttackConfig::default()
        };
        let out = embedding_attack(&model, &fe, &wave(4), &cfg, None).unwrap();
        assert!(out.final_objective() < out.objective_trace[0]);
    }
}
