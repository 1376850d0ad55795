//! Independent speaker verifier: a residual conv encoder with a softmax
//! classification head, trained on the training speakers. Similarity is the
//! cosine between unit-normalised encoder outputs.

use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureConfig, MelFrontend, Waveform};
use crate::checkpoint;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::EmbeddingNet;
use crate::nn::{Adam, Linear, Mat, ParamStore};
use crate::seed;
use crate::train::feature_stats;

const CHECKPOINT_KIND: &str = "verifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifierConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub blocks: usize,
    pub steps: usize,
    pub batch_size: usize,
    /// Random crop length used during training.
    pub crop_frames: usize,
    pub min_frames: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed_dim: 32,
            kernel: 5,
            blocks: 2,
            steps: 400,
            batch_size: 16,
            crop_frames: 48,
            min_frames: 8,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: VerifierConfig,
    features: FeatureConfig,
    feature_mean: f64,
    feature_std: f64,
    speakers: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Verifier {
    pub config: VerifierConfig,
    pub features: FeatureConfig,
    pub speakers: Vec<String>,
    feature_mean: f64,
    feature_std: f64,
    params: ParamStore,
    net: EmbeddingNet,
    head: Linear,
    frontend: MelFrontend,
}

fn softmax_xent(logits: &Mat, label: usize) -> (f64, Mat) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let z = exps.sum();
    let mut grad = exps / z;
    let loss = -(grad[[label, 0]]).ln();
    grad[[label, 0]] -= 1.0;
    (loss, grad)
}

impl Verifier {
    fn build(
        config: VerifierConfig,
        features: FeatureConfig,
        speakers: Vec<String>,
        feature_mean: f64,
        feature_std: f64,
    ) -> Result<Self> {
        if config.hidden == 0 || config.embed_dim == 0 || config.kernel % 2 == 0 {
            return Err(Error::Config("verifier: dimensions must be positive and kernel odd".into()));
        }
        let mut rng = seed::derived_rng(config.seed, "verifier.init", 0);
        let mut params = ParamStore::default();
        let net = EmbeddingNet::build(
            &mut params,
            "verifier",
            features.n_mels,
            config.hidden,
            config.embed_dim,
            config.kernel,
            config.blocks,
            &mut rng,
        );
        let head = Linear::new(&mut params, "verifier.head", config.embed_dim, speakers.len().max(1), &mut rng);
        let frontend = MelFrontend::new(&features)?;
        Ok(Self {
            config,
            features,
            speakers,
            feature_mean,
            feature_std,
            params,
            net,
            head,
            frontend,
        })
    }

    fn normalize(&self, frames: &Array2<f64>) -> Mat {
        frames.t().mapv(|v| (v - self.feature_mean) / self.feature_std)
    }

    /// Trains on every utterance of `data`; returns the verifier and the per-step loss.
    pub fn train(data: &Dataset, features: &FeatureConfig, config: VerifierConfig) -> Result<(Self, Vec<f64>)> {
        let speakers = data.speakers();
        if speakers.len() < 2 {
            return Err(Error::InvalidInput("verifier training needs at least two speakers".into()));
        }
        let (mean, std) = feature_stats(data, features)?;
        let mut v = Self::build(config, features.clone(), speakers, mean, std)?;
        let mels: Vec<(Mat, usize)> = data
            .utterances
            .iter()
            .map(|u| {
                let m = v.frontend.extract(&u.wave)?;
                let label = v.speakers.binary_search(&u.speaker).expect("speaker listed");
                Ok((v.normalize(&m.frames), label))
            })
            .collect::<Result<_>>()?;
        let mut opt = Adam::new(&v.params, v.config.learning_rate);
        let mut losses = Vec::with_capacity(v.config.steps);
        for step in 0..v.config.steps {
            let mut rng = seed::derived_rng(v.config.seed, "verifier.batch", step as u64);
            let mut grads = v.params.zeros_like();
            let mut total = 0.0;
            let nb = v.config.batch_size.max(1);
            for _ in 0..nb {
                let (x, label) = &mels[rng.random_range(0..mels.len())];
                let t = x.ncols();
                let len = v.config.crop_frames.min(t);
                let start = rng.random_range(0..=t - len);
                let crop = x.slice(s![.., start..start + len]).to_owned();
                let (emb, tape) = v.net.forward(&v.params, &crop);
                let (logits, hc) = v.head.forward(&v.params, &emb);
                let (loss, dlogits) = softmax_xent(&logits, *label);
                total += loss / nb as f64;
                let demb = v.head.backward(&v.params, Some(&mut grads), &hc, &(dlogits / nb as f64));
                v.net.backward(&v.params, Some(&mut grads), &tape, &demb);
            }
            if !total.is_finite() {
                return Err(Error::NonFinite(format!("verifier loss at step {step}")));
            }
            opt.step(&mut v.params, &grads)?;
            losses.push(total);
        }
        Ok((v, losses))
    }

    /// Unit-norm embedding of a log-mel spectrogram (`T x M`).
    pub fn embed_mel(&self, frames: &Array2<f64>) -> Result<Vec<f64>> {
        if frames.nrows() < self.config.min_frames {
            return Err(Error::TooShort {
                len: frames.nrows(),
                needed: self.config.min_frames,
            });
        }
        let (e, _) = self.net.forward(&self.params, &self.normalize(frames));
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        Ok(e.iter().map(|v| v / norm).collect())
    }

    pub fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let m = self.frontend.extract(w)?;
        self.embed_mel(&m.frames)
    }

    /// Cosine similarity between the embeddings of `a` and `b`.
    pub fn similarity(&self, a: &Waveform, b: &Waveform) -> Result<f64> {
        Ok(cosine(&self.embed(a)?, &self.embed(b)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(Meta {
            config: self.config.clone(),
            features: self.features.clone(),
            feature_mean: self.feature_mean,
            feature_std: self.feature_std,
            speakers: self.speakers.clone(),
        })?;
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let meta: Meta = serde_json::from_value(meta)?;
        let mut v = Self::build(meta.config, meta.features, meta.speakers, meta.feature_mean, meta.feature_std)?;
        checkpoint::restore_into(&mut v.params, params)?;
        Ok(v)
    }
}

/// Cosine of two unit vectors, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, ToyCorpusConfig};

    fn tiny() -> (crate::corpus::ToyCorpus, FeatureConfig, VerifierConfig) {
        let corpus = generate(&ToyCorpusConfig {
            train_speakers: 3,
            eval_speakers: 2,
            utterances_per_speaker: 4,
            utterance_s: 0.5,
            noise_clips_per_family: 1,
            noise_clip_s: 1.0,
            seed: 3,
        });
        let feats = FeatureConfig {
            n_mels: 20,
            ..FeatureConfig::default()
        };
        let cfg = VerifierConfig {
            hidden: 8,
            embed_dim: 4,
            steps: 30,
            batch_size: 4,
            ..VerifierConfig::default()
        };
        (corpus, feats, cfg)
    }

    #[test]
    fn softmax_gradient_sums_to_zero() {
        let logits = Mat::from_shape_vec((3, 1), vec![0.1, 2.0, -1.0]).unwrap();
        let (loss, g) = softmax_xent(&logits, 1);
        assert!(loss > 0.0);
        assert!(g.sum().abs() < 1e-12);
    }

    #[test]
    fn similarity_properties_and_determinism() {
        let (corpus, feats, cfg) = tiny();
        let (v, losses) = Verifier::train(&corpus.train, &feats, cfg.clone()).unwrap();
        let head: f64 = losses[..5].iter().sum();
        let tail: f64 = losses[losses.len() - 5..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        let a = &corpus.eval.utterances[0].wave;
        let b = &corpus.eval.utterances[5].wave;
        assert!((v.similarity(a, a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(v.similarity(a, b).unwrap(), v.similarity(b, a).unwrap());
        let (v2, _) = Verifier::train(&corpus.train, &feats, cfg).unwrap();
        assert_eq!(v.embed(a).unwrap(), v2.embed(a).unwrap());
        let dir = tempfile::tempdir().unwrap();
        v.save(&dir.path().join("v.ckpt")).unwrap();
        let back = Verifier::load(&dir.path().join("v.ckpt")).unwrap();
        assert_eq!(back.embed(a).unwrap(), v.embed(a).unwrap());
    }

    #[test]
    fn too_short_input_is_rejected() {
        let (corpus, feats, cfg) = tiny();
        let v = Verifier::build(cfg, feats, corpus.train.speakers(), 0.0, 1.0).unwrap();
        let short = Waveform::zeros(400 + 200 * 3, 16_000);
        assert!(matches!(v.embed(&short), Err(Error::TooShort { .. })));
    }
}
