//! Speech enhancement front-ends and SI-SDR.
//!
//! The built-in denoiser predicts a sigmoid magnitude mask per STFT cell
//! from the log magnitude of the degraded input and resynthesises with the
//! degraded phase.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::{Stft, Waveform};
use crate::checkpoint;
use crate::corpus::Dataset;
use crate::degrade::{augment, AugmentationPolicy, NoiseCorpus};
use crate::error::{Error, Result};
use crate::external::ExternalCommand;
use crate::nn::{leaky_relu, leaky_relu_backward, sigmoid, Adam, Conv1d, ConvCache, Mat, Padding, ParamStore};
use crate::seed;

const CHECKPOINT_KIND: &str = "denoiser";
const MAG_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Loss exponent on magnitudes: L1 between `(m|Y|)^c` and `|X|^c`.
    /// 1 is the plain magnitude L1.
    pub compress: f64,
    /// Lower bound of the mask; limits the attenuation of any cell.
    pub mask_floor: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            win_length: 400,
            hop_length: 100,
            hidden: 64,
            kernel: 5,
            steps: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            compress: 0.3,
            mask_floor: 0.1,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: DenoiserConfig,
    log_mean: f64,
    log_std: f64,
}

struct MaskTape {
    c1: ConvCache,
    p1: Mat,
    c2: ConvCache,
    p2: Mat,
    c3: ConvCache,
}

/// Built-in magnitude-masking denoiser.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    log_mean: f64,
    log_std: f64,
    params: ParamStore,
    l1: Conv1d,
    l2: Conv1d,
    l3: Conv1d,
    stft: Stft,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, log_mean: f64, log_std: f64) -> Result<Self> {
        if config.win_length > config.n_fft || config.hop_length == 0 || config.kernel % 2 == 0 {
            return Err(Error::Config("denoiser: need win_length <= n_fft, hop > 0, odd kernel".into()));
        }
        if !(0.0..1.0).contains(&config.mask_floor) {
            return Err(Error::Config("denoiser: mask_floor must be in [0, 1)".into()));
        }
        if !(config.compress > 0.0 && config.compress <= 1.0) {
            return Err(Error::Config("denoiser: compress must be in (0, 1]".into()));
        }
        let bins = config.n_fft / 2 + 1;
        let mut rng = seed::derived_rng(config.seed, "denoiser.init", 0);
        let mut params = ParamStore::default();
        let (h, k) = (config.hidden, config.kernel);
        let l1 = Conv1d::new(&mut params, "denoiser.l1", bins, h, k, Padding::Zero, &mut rng);
        let l2 = Conv1d::new(&mut params, "denoiser.l2", h, h, k, Padding::Zero, &mut rng);
        let l3 = Conv1d::new(&mut params, "denoiser.l3", h, bins, 1, Padding::Zero, &mut rng);
        let stft = Stft::new(config.n_fft, config.win_length, config.hop_length);
        Ok(Self {
            config,
            log_mean,
            log_std,
            params,
            l1,
            l2,
            l3,
            stft,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    fn features(&self, mag: &Array2<f64>) -> Mat {
        mag.t().mapv(|v| ((v + MAG_FLOOR).ln() - self.log_mean) / self.log_std)
    }

    /// Mask logits, `bins x frames`.
    fn forward(&self, feats: &Mat) -> (Mat, MaskTape) {
        let (p1, c1) = self.l1.forward(&self.params, feats);
        let h1 = leaky_relu(&p1);
        let (p2, c2) = self.l2.forward(&self.params, &h1);
        let h2 = &h1 + &leaky_relu(&p2);
        let (z, c3) = self.l3.forward(&self.params, &h2);
        (z, MaskTape { c1, p1, c2, p2, c3 })
    }

    fn backward(&self, grads: &mut ParamStore, tape: &MaskTape, dz: &Mat) {
        let dh2 = self.l3.backward(&self.params, Some(grads), &tape.c3, dz);
        let dp2 = leaky_relu_backward(&tape.p2, &dh2);
        let dh1 = &dh2 + &self.l2.backward(&self.params, Some(grads), &tape.c2, &dp2);
        let dp1 = leaky_relu_backward(&tape.p1, &dh1);
        self.l1.backward(&self.params, Some(grads), &tape.c1, &dp1);
    }

    fn gain(&self, z: &Mat) -> Mat {
        let f = self.config.mask_floor;
        sigmoid(z).mapv(|s| f + (1.0 - f) * s)
    }

    fn padded(&self, w: &Waveform) -> Vec<f64> {
        let pad = self.config.win_length;
        let mut x = vec![0.0; w.len() + 2 * pad];
        x[pad..pad + w.len()].copy_from_slice(&w.samples);
        x
    }

    /// Mask values in [0, 1], `frames x bins`.
    pub fn mask(&self, w: &Waveform) -> Result<Array2<f64>> {
        let spec = self.stft.analyze(&self.padded(w));
        let mag = spec.mapv(|c| c.norm());
        let (z, _) = self.forward(&self.features(&mag));
        Ok(self.gain(&z).t().to_owned())
    }

    pub fn enhance(&self, w: &Waveform) -> Result<Waveform> {
        let x = self.padded(w);
        let spec = self.stft.analyze(&x);
        if spec.nrows() == 0 {
            return Err(Error::TooShort {
                len: w.len(),
                needed: 1,
            });
        }
        let mag = spec.mapv(|c| c.norm());
        let (z, _) = self.forward(&self.features(&mag));
        let m = self.gain(&z);
        let masked = Array2::from_shape_fn(spec.dim(), |(t, k)| spec[[t, k]] * m[[k, t]]);
        let y = self.stft.synthesize(&masked, x.len());
        let pad = self.config.win_length;
        Waveform::new(y[pad..pad + w.len()].to_vec(), w.sample_rate)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(Meta {
            config: self.config.clone(),
            log_mean: self.log_mean,
            log_std: self.log_std,
        })?;
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let meta: Meta = serde_json::from_value(meta)?;
        let mut d = Self::new(meta.config, meta.log_mean, meta.log_std)?;
        checkpoint::restore_into(&mut d.params, params)?;
        Ok(d)
    }
}

/// Trains the built-in denoiser on pairs (augment(clean), clean) drawn
/// from `data`; returns the model and the per-step loss.
pub fn train_denoiser(
    data: &Dataset,
    noise: Option<&NoiseCorpus>,
    policy: &AugmentationPolicy,
    config: DenoiserConfig,
) -> Result<(Denoiser, Vec<f64>)> {
    policy.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("denoiser training set is empty".into()));
    }
    let probe = Stft::new(config.n_fft, config.win_length, config.hop_length);
    let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
    for u in data.utterances.iter().take(64) {
        for c in probe.analyze(&u.wave.samples).iter() {
            let v = (c.norm() + MAG_FLOOR).ln();
            s += v;
            s2 += v * v;
            n += 1;
        }
    }
    let mean = s / n.max(1) as f64;
    let std = (s2 / n.max(1) as f64 - mean * mean).max(1e-12).sqrt();
    let mut d = Denoiser::new(config, mean, std)?;
    let mut opt = Adam::new(&d.params, d.config.learning_rate);
    let mut losses = Vec::with_capacity(d.config.steps);
    let nb = d.config.batch_size.max(1);
    for step in 0..d.config.steps {
        let mut grads = d.params.zeros_like();
        let mut total = 0.0;
        let idx = rand::seq::index::sample(
            &mut seed::derived_rng(d.config.seed, "denoiser.batch", step as u64),
            data.len(),
            nb.min(data.len()),
        );
        let count = idx.len() as f64;
        for (i, u) in idx.iter().enumerate() {
            let clean = &data.utterances[u].wave;
            let mut rng = seed::derived_rng(d.config.seed, "denoiser.utt", (step * nb + i) as u64);
            let (degraded, _) = augment(clean, policy, noise, &mut rng)?;
            let ys = d.stft.analyze(&d.padded(&degraded));
            let xs = d.stft.analyze(&d.padded(clean));
            let ymag_tf = ys.mapv(|c| c.norm());
            let (z, tape) = d.forward(&d.features(&ymag_tf));
            let ymag = ymag_tf.t();
            let xmag = xs.mapv(|c| c.norm()).t().to_owned();
            let sg = sigmoid(&z);
            let floor = d.config.mask_floor;
            let m = sg.mapv(|v| floor + (1.0 - floor) * v);
            let cells = m.len() as f64;
            let mut loss = 0.0;
            let c = d.config.compress;
            let dz = ndarray::Zip::from(&m).and(&sg).and(&ymag).and(&xmag).map_collect(|&mk, &sv, &y, &x| {
                // d mask / d logit
                let dm = (1.0 - floor) * sv * (1.0 - sv);
                if c == 1.0 {
                    let r = mk * y - x;
                    loss += r.abs();
                    return r.signum() * y * dm / (cells * count);
                }
                let e = mk * y + MAG_FLOOR;
                let r = e.powf(c) - (x + MAG_FLOOR).powf(c);
                loss += r.abs();
                r.signum() * c * e.powf(c - 1.0) * y * dm / (cells * count)
            });
            total += loss / cells / count;
            d.backward(&mut grads, &tape, &dz);
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("denoiser loss at step {step}")));
        }
        opt.step(&mut d.params, &grads)?;
        losses.push(total);
    }
    Ok((d, losses))
}

/// A speech enhancement front-end placed before the VC model.
#[derive(Clone, Debug)]
pub enum Enhancer {
    Identity,
    BuiltinMask(Box<Denoiser>),
    External(ExternalCommand),
}

impl Enhancer {
    pub fn kind(&self) -> &'static str {
        match self {
            Enhancer::Identity => "identity",
            Enhancer::BuiltinMask(_) => "builtin_mask",
            Enhancer::External(_) => "external_adapter",
        }
    }

    /// Output has the input's length and sample rate.
    pub fn enhance(&self, w: &Waveform) -> Result<Waveform> {
        match self {
            Enhancer::Identity => Ok(w.clone()),
            Enhancer::BuiltinMask(d) => d.enhance(w),
            Enhancer::External(cmd) => {
                let dir = tempfile::tempdir()?;
                let inp = dir.path().join("in.wav");
                let out = dir.path().join("out.wav");
                crate::wav::write_wav(&inp, w)?;
                cmd.run(&inp, Some(&out))?;
                if !out.exists() {
                    return Err(Error::External(format!("{} produced no output file", cmd.command)));
                }
                let mut y = crate::wav::read_wav(&out, true)?;
                y.samples.resize(w.len(), 0.0);
                Ok(y)
            }
        }
    }
}

/// Scale-invariant signal-to-distortion ratio in dB, capped at +100 dB.
pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "si_sdr operands differ in length: {} vs {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ss: f64 = reference.samples.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::Silent("si_sdr reference"));
    }
    let dot: f64 = estimate.samples.iter().zip(&reference.samples).map(|(e, s)| e * s).sum();
    let a = dot / ss;
    let (mut target, mut resid) = (0.0, 0.0);
    for (e, s) in estimate.samples.iter().zip(&reference.samples) {
        let p = a * s;
        target += p * p;
        resid += (e - p) * (e - p);
    }
    if resid <= 1e-12 * target {
        return Ok(100.0);
    }
    Ok((10.0 * (target / resid).log10()).min(100.0))
}

/// Mean SI-SDR of `estimates[i]` against `references[i]`.
pub fn mean_si_sdr(estimates: &[Waveform], references: &[Waveform]) -> Result<f64> {
    if estimates.len() != references.len() || estimates.is_empty() {
        return Err(Error::InvalidInput("mean_si_sdr needs matching non-empty lists".into()));
    }
    let mut total = 0.0;
    for (e, r) in estimates.iter().zip(references) {
        total += si_sdr(e, r)?;
    }
    Ok(total / estimates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use crate::corpus::{generate, ToyCorpusConfig};

    fn tone(n: usize) -> Waveform {
        Waveform::new(
            (0..n).map(|i| 0.3 * (i as f64 * 0.07).sin() + 0.1 * (i as f64 * 0.31).cos()).collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    #[test]
    fn si_sdr_closed_forms() {
        let x = tone(4000);
        assert_eq!(si_sdr(&x, &x).unwrap(), 100.0);
        assert_eq!(si_sdr(&x.scaled(2.0), &x).unwrap(), si_sdr(&x, &x).unwrap());
        assert!(si_sdr(&x, &Waveform::zeros(4000, SAMPLE_RATE)).is_err());
        assert!(si_sdr(&x, &tone(10)).is_err());
    }

    #[test]
    fn si_sdr_orthogonal_noise_at_10_db() {
        let s = tone(4000);
        // Gram-Schmidt a second signal against s, then scale to energy ratio 10.
        let raw: Vec<f64> = (0..4000).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let ss: f64 = s.samples.iter().map(|v| v * v).sum();
        let proj: f64 = raw.iter().zip(&s.samples).map(|(a, b)| a * b).sum::<f64>() / ss;
        let n: Vec<f64> = raw.iter().zip(&s.samples).map(|(a, b)| a - proj * b).collect();
        let nn: f64 = n.iter().map(|v| v * v).sum();
        let g = (ss / 10.0 / nn).sqrt();
        let est = Waveform::new(s.samples.iter().zip(&n).map(|(a, b)| a + g * b).collect(), SAMPLE_RATE).unwrap();
        assert!((si_sdr(&est, &s).unwrap() - 10.0).abs() < 0.01);
    }

    #[test]
    fn identity_enhancer_is_bitwise_passthrough() {
        let x = tone(3000);
        let e = Enhancer::Identity;
        assert_eq!(e.enhance(&e.enhance(&x).unwrap()).unwrap(), x);
    }

    #[test]
    fn external_adapter_copies_and_fails_loudly() {
        let x = tone(3000);
        let cp = Enhancer::External(ExternalCommand::new("cp {in} {out}"));
        let y = cp.enhance(&x).unwrap();
        assert_eq!(y.len(), x.len());
        assert!(y.max_abs_diff(&x) < 1.0 / 32767.0);
        let bad = Enhancer::External(ExternalCommand::new("exit 1"));
        assert!(matches!(bad.enhance(&x), Err(Error::External(_))));
        let silent = Enhancer::External(ExternalCommand::new("true"));
        assert!(silent.enhance(&x).is_err());
    }

    #[test]
    fn builtin_mask_is_bounded_small_and_deterministic() {
        let corpus = generate(&ToyCorpusConfig {
            train_speakers: 2,
            eval_speakers: 2,
            utterances_per_speaker: 3,
            utterance_s: 0.5,
            noise_clips_per_family: 1,
            noise_clip_s: 1.0,
            seed: 5,
        });
        let cfg = DenoiserConfig {
            hidden: 8,
            steps: 3,
            batch_size: 2,
            ..DenoiserConfig::default()
        };
        let policy = AugmentationPolicy::train();
        let (d, losses) = train_denoiser(&corpus.train, Some(&corpus.train_noise), &policy, cfg.clone()).unwrap();
        let (d2, losses2) = train_denoiser(&corpus.train, Some(&corpus.train_noise), &policy, cfg).unwrap();
        assert_eq!(losses, losses2);
        assert!(DenoiserConfig::default().hidden > 0 && Denoiser::new(DenoiserConfig::default(), 0.0, 1.0).unwrap().n_params() < 1_000_000);
        let x = &corpus.eval.utterances[0].wave;
        let m = d.mask(x).unwrap();
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        let y = d.enhance(x).unwrap();
        assert_eq!((y.len(), y.sample_rate), (x.len(), x.sample_rate));
        assert_eq!(y, d2.enhance(x).unwrap());
        let dir = tempfile::tempdir().unwrap();
        d.save(&dir.path().join("d.ckpt")).unwrap();
        assert_eq!(Denoiser::load(&dir.path().join("d.ckpt")).unwrap().enhance(x).unwrap(), y);
    }
}
