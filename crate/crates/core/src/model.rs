//! Any-to-any voice conversion model.
//!
//! * Content encoder: 1x1 projection, instance norm, residual conv stages
//!   each followed by 2x average pooling, 1x1 projection and a final
//!   instance norm. The first norm sits directly on a pointwise projection
//!   so per-channel input offsets are removed exactly.
//! * Speaker encoder: circularly padded residual convs and global average
//!   pooling, so the code ignores circular time shifts.
//! * Decoder: nearest-neighbour upsampling with adaptive instance norm
//!   whose scale and shift come from the speaker code.
//!
//! Inputs are standardised with fixed scalar statistics stored in the
//! config; outputs are mapped back to log-mel units.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::audio::{FeatureConfig, MelSpectrogram};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    adain, adain_backward, avg_pool2, avg_pool2_backward, instance_norm, instance_norm_backward,
    leaky_relu, leaky_relu_backward, mean_pool, mean_pool_backward, upsample2, upsample2_backward,
    ConvCache, Conv1d, Linear, Mat, NormCache, Padding, ParamStore,
};
use crate::seed;

pub const MODEL_VERSION: &str = "robustvc-adain-1";
const CHECKPOINT_KIND: &str = "vc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub content_dim: usize,
    pub speaker_dim: usize,
    pub kernel: usize,
    /// Time downsampling of the content code; a power of two.
    pub downsample: usize,
    pub speaker_blocks: usize,
    /// Minimum frames accepted by the speaker encoder.
    pub min_speaker_frames: usize,
    pub feature_mean: f64,
    pub feature_std: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            content_dim: 128,
            speaker_dim: 128,
            kernel: 5,
            downsample: 4,
            speaker_blocks: 2,
            min_speaker_frames: 8,
            feature_mean: -4.0,
            feature_std: 3.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model config: {m}")));
        if self.hidden == 0 || self.content_dim == 0 || self.speaker_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if !self.downsample.is_power_of_two() {
            return bad("downsample must be a power of two");
        }
        if !(self.feature_std > 0.0) || !self.feature_mean.is_finite() {
            return bad("feature statistics must be finite with positive std");
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

/// Time-downsampled content representation, `T' x content_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentCode {
    pub codes: Array2<f64>,
    pub source_frames: usize,
}

/// One vector per utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerCode {
    pub vector: Vec<f64>,
}

impl SpeakerCode {
    fn column(&self) -> Mat {
        Mat::from_shape_vec((self.vector.len(), 1), self.vector.clone()).expect("column")
    }
}

#[derive(Clone, Debug)]
struct ContentEncoder {
    inp: Conv1d,
    stages: Vec<Conv1d>,
    out: Conv1d,
}

pub struct ContentTape {
    frames: usize,
    padded: usize,
    inp: ConvCache,
    norm0: NormCache,
    pre0: Mat,
    stages: Vec<(ConvCache, Mat)>,
    out: ConvCache,
    norm1: NormCache,
}

fn pad_to_multiple(x: &Mat, m: usize) -> Mat {
    let t = x.ncols();
    let padded = t.div_ceil(m) * m;
    if padded == t {
        return x.clone();
    }
    let mut y = Mat::zeros((x.nrows(), padded));
    y.slice_mut(s![.., ..t]).assign(x);
    let last = x.column(t - 1).to_owned();
    for j in t..padded {
        y.column_mut(j).assign(&last);
    }
    y
}

impl ContentEncoder {
    fn forward(&self, ps: &ParamStore, x: &Mat, ds: usize) -> (Mat, ContentTape) {
        let frames = x.ncols();
        let xp = pad_to_multiple(x, ds);
        let padded = xp.ncols();
        let (c0, inp) = self.inp.forward(ps, &xp);
        let (n0, norm0) = instance_norm(&c0);
        let mut h = leaky_relu(&n0);
        let mut stages = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let (c, cc) = conv.forward(ps, &h);
            let a = &h + &leaky_relu(&c);
            h = avg_pool2(&a);
            stages.push((cc, c));
        }
        let (co, out) = self.out.forward(ps, &h);
        let (code, norm1) = instance_norm(&co);
        (
            code,
            ContentTape {
                frames,
                padded,
                inp,
                norm0,
                pre0: n0,
                stages,
                out,
                norm1,
            },
        )
    }

    fn backward(&self, ps: &ParamStore, mut grads: Option<&mut ParamStore>, tape: &ContentTape, dcode: &Mat) -> Mat {
        let dco = instance_norm_backward(&tape.norm1, dcode);
        let mut dh = self.out.backward(ps, grads.as_deref_mut(), &tape.out, &dco);
        for (conv, (cc, c)) in self.stages.iter().zip(&tape.stages).rev() {
            let da = avg_pool2_backward(&dh);
            let dc = leaky_relu_backward(c, &da);
            dh = da + conv.backward(ps, grads.as_deref_mut(), cc, &dc);
        }
        let dn0 = leaky_relu_backward(&tape.pre0, &dh);
        let dc0 = instance_norm_backward(&tape.norm0, &dn0);
        let dxp = self.inp.backward(ps, grads, &tape.inp, &dc0);
        let mut dx = dxp.slice(s![.., ..tape.frames]).to_owned();
        for j in tape.frames..tape.padded {
            let col = dxp.column(j).to_owned();
            let mut last = dx.column_mut(tape.frames - 1);
            last += &col;
        }
        dx
    }
}

#[derive(Clone, Debug)]
struct SpeakerEncoder {
    inp: Conv1d,
    blocks: Vec<Conv1d>,
    out: Linear,
}

pub struct SpeakerTape {
    frames: usize,
    inp: ConvCache,
    pre0: Mat,
    blocks: Vec<(ConvCache, Mat)>,
    out: ConvCache,
}

impl SpeakerEncoder {
    fn build<R: rand::Rng + ?Sized>(
        ps: &mut ParamStore,
        prefix: &str,
        n_in: usize,
        hidden: usize,
        out_dim: usize,
        kernel: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            inp: Conv1d::new(ps, &format!("{prefix}.inp"), n_in, hidden, 1, Padding::Circular, rng),
            blocks: (0..blocks)
                .map(|i| {
                    Conv1d::new(ps, &format!("{prefix}.block{i}"), hidden, hidden, kernel, Padding::Circular, rng)
                })
                .collect(),
            out: Linear::new(ps, &format!("{prefix}.out"), hidden, out_dim, rng),
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Mat) -> (Mat, SpeakerTape) {
        let (c0, inp) = self.inp.forward(ps, x);
        let mut h = leaky_relu(&c0);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for conv in &self.blocks {
            let (c, cc) = conv.forward(ps, &h);
            h = &h + &leaky_relu(&c);
            blocks.push((cc, c));
        }
        let pooled = mean_pool(&h);
        let (code, out) = self.out.forward(ps, &pooled);
        (
            code,
            SpeakerTape {
                frames: x.ncols(),
                inp,
                pre0: c0,
                blocks,
                out,
            },
        )
    }

    fn backward(&self, ps: &ParamStore, mut grads: Option<&mut ParamStore>, tape: &SpeakerTape, dcode: &Mat) -> Mat {
        let dpooled = self.out.backward(ps, grads.as_deref_mut(), &tape.out, dcode);
        let mut dh = mean_pool_backward(&dpooled, tape.frames);
        for (conv, (cc, c)) in self.blocks.iter().zip(&tape.blocks).rev() {
            let dc = leaky_relu_backward(c, &dh);
            dh = &dh + &conv.backward(ps, grads.as_deref_mut(), cc, &dc);
        }
        let dc0 = leaky_relu_backward(&tape.pre0, &dh);
        self.inp.backward(ps, grads, &tape.inp, &dc0)
    }
}

/// Standalone speaker encoder weights reused by the verifier.
#[derive(Clone, Debug)]
pub struct EmbeddingNet {
    enc: SpeakerEncoder,
}

impl EmbeddingNet {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: rand::Rng + ?Sized>(
        ps: &mut ParamStore,
        prefix: &str,
        n_in: usize,
        hidden: usize,
        out_dim: usize,
        kernel: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            enc: SpeakerEncoder::build(ps, prefix, n_in, hidden, out_dim, kernel, blocks, rng),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Mat) -> (Mat, SpeakerTape) {
        self.enc.forward(ps, x)
    }

    pub fn backward(&self, ps: &ParamStore, grads: Option<&mut ParamStore>, tape: &SpeakerTape, d: &Mat) -> Mat {
        self.enc.backward(ps, grads, tape, d)
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    inp: Conv1d,
    affine: Vec<Linear>,
    stages: Vec<Conv1d>,
    out: Conv1d,
}

pub struct DecoderTape {
    frames: usize,
    inp: ConvCache,
    affines: Vec<(ConvCache, Mat)>,
    norm0: NormCache,
    pre0: Mat,
    stages: Vec<(ConvCache, NormCache, Mat)>,
    out: ConvCache,
    out_len: usize,
}

impl Decoder {
    fn forward(&self, ps: &ParamStore, code: &Mat, spk: &Mat, frames: usize) -> (Mat, DecoderTape) {
        let affines: Vec<(ConvCache, Mat)> = self
            .affine
            .iter()
            .map(|l| {
                let (a, c) = l.forward(ps, spk);
                (c, a)
            })
            .collect();
        let (h0, inp) = self.inp.forward(ps, code);
        let (y0, norm0) = adain(&h0, &affines[0].1);
        let mut h = leaky_relu(&y0);
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, conv) in self.stages.iter().enumerate() {
            let u = upsample2(&h);
            let (c, cc) = conv.forward(ps, &u);
            let (y, nc) = adain(&c, &affines[i + 1].1);
            h = &u + &leaky_relu(&y);
            stages.push((cc, nc, y));
        }
        let (o, out) = self.out.forward(ps, &h);
        let out_len = o.ncols();
        let cropped = o.slice(s![.., ..frames]).to_owned();
        (
            cropped,
            DecoderTape {
                frames,
                inp,
                affines,
                norm0,
                pre0: y0,
                stages,
                out,
                out_len,
            },
        )
    }

    /// Returns gradients with respect to `(code, speaker)`.
    fn backward(&self, ps: &ParamStore, mut grads: Option<&mut ParamStore>, tape: &DecoderTape, dy: &Mat) -> (Mat, Mat) {
        let mut dfull = Mat::zeros((dy.nrows(), tape.out_len));
        dfull.slice_mut(s![.., ..tape.frames]).assign(dy);
        let mut dh = self.out.backward(ps, grads.as_deref_mut(), &tape.out, &dfull);
        let mut d_aff: Vec<Mat> = vec![Mat::zeros((0, 0)); self.affine.len()];
        for (i, (conv, (cc, nc, y))) in self.stages.iter().zip(&tape.stages).enumerate().rev() {
            let dyi = leaky_relu_backward(y, &dh);
            let (dc, da) = adain_backward(nc, &tape.affines[i + 1].1, &dyi);
            d_aff[i + 1] = da;
            let du = &dh + &conv.backward(ps, grads.as_deref_mut(), cc, &dc);
            dh = upsample2_backward(&du);
        }
        let dy0 = leaky_relu_backward(&tape.pre0, &dh);
        let (dh0, da0) = adain_backward(&tape.norm0, &tape.affines[0].1, &dy0);
        d_aff[0] = da0;
        let dcode = self.inp.backward(ps, grads.as_deref_mut(), &tape.inp, &dh0);
        let mut dspk: Option<Mat> = None;
        for ((lin, (cache, _)), da) in self.affine.iter().zip(&tape.affines).zip(&d_aff) {
            let d = lin.backward(ps, grads.as_deref_mut(), cache, da);
            dspk = Some(match dspk {
                Some(acc) => acc + d,
                None => d,
            });
        }
        (dcode, dspk.expect("at least one affine layer"))
    }
}

/// Everything produced by a self-reconstruction forward pass.
pub struct ConvertTape {
    content: ContentTape,
    speaker: SpeakerTape,
    decoder: DecoderTape,
}

#[derive(Clone, Debug)]
pub struct VcModel {
    pub config: ModelConfig,
    pub features: FeatureConfig,
    pub params: ParamStore,
    content: ContentEncoder,
    speaker: SpeakerEncoder,
    decoder: Decoder,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: String,
    model: ModelConfig,
    features: FeatureConfig,
}

impl VcModel {
    pub fn new(config: ModelConfig, features: FeatureConfig) -> Result<Self> {
        config.validate()?;
        features.validate()?;
        let mut rng = seed::rng(config.init_seed);
        let mut ps = ParamStore::default();
        let (m, h, k) = (features.n_mels, config.hidden, config.kernel);
        let stages = config.stages();
        let content = ContentEncoder {
            inp: Conv1d::new(&mut ps, "content.inp", m, h, 1, Padding::Zero, &mut rng),
            stages: (0..stages)
                .map(|i| Conv1d::new(&mut ps, &format!("content.stage{i}"), h, h, k, Padding::Zero, &mut rng))
                .collect(),
            out: Conv1d::new(&mut ps, "content.out", h, config.content_dim, 1, Padding::Zero, &mut rng),
        };
        let speaker = SpeakerEncoder::build(
            &mut ps,
            "speaker",
            m,
            h,
            config.speaker_dim,
            k,
            config.speaker_blocks,
            &mut rng,
        );
        let affine: Vec<Linear> = (0..=stages)
            .map(|i| {
                let l = Linear::new(&mut ps, &format!("decoder.affine{i}"), config.speaker_dim, 2 * h, &mut rng);
                ps.get_mut(l.weight()).mapv_inplace(|v| 0.1 * v);
                l
            })
            .collect();
        let decoder = Decoder {
            inp: Conv1d::new(&mut ps, "decoder.inp", config.content_dim, h, 1, Padding::Zero, &mut rng),
            affine,
            stages: (0..stages)
                .map(|i| Conv1d::new(&mut ps, &format!("decoder.stage{i}"), h, h, k, Padding::Zero, &mut rng))
                .collect(),
            out: Conv1d::new(&mut ps, "decoder.out", h, m, 1, Padding::Zero, &mut rng),
        };
        Ok(Self {
            config,
            features,
            params: ps,
            content,
            speaker,
            decoder,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    fn normalize(&self, mel: &Array2<f64>) -> Mat {
        let (mu, sd) = (self.config.feature_mean, self.config.feature_std);
        mel.t().mapv(|v| (v - mu) / sd)
    }

    fn denormalize(&self, y: &Mat) -> Array2<f64> {
        let (mu, sd) = (self.config.feature_mean, self.config.feature_std);
        y.t().mapv(|v| v * sd + mu)
    }

    fn check_mel(&self, frames: &Array2<f64>) -> Result<()> {
        if frames.ncols() != self.features.n_mels {
            return Err(Error::Shape(format!(
                "model expects {} mel channels, got {}",
                self.features.n_mels,
                frames.ncols()
            )));
        }
        if frames.nrows() == 0 {
            return Err(Error::InvalidInput("empty mel spectrogram".into()));
        }
        Ok(())
    }

    pub fn encode_content(&self, m: &MelSpectrogram) -> Result<ContentCode> {
        self.check_mel(&m.frames)?;
        let (code, _) = self.content.forward(&self.params, &self.normalize(&m.frames), self.config.downsample);
        Ok(ContentCode {
            codes: code.t().to_owned(),
            source_frames: m.n_frames(),
        })
    }

    /// Activations right after the first instance norm of the content encoder (`T' x hidden`, before pooling).
    pub fn content_first_norm(&self, m: &MelSpectrogram) -> Result<Array2<f64>> {
        self.check_mel(&m.frames)?;
        let x = pad_to_multiple(&self.normalize(&m.frames), self.config.downsample);
        let (c0, _) = self.content.inp.forward(&self.params, &x);
        Ok(instance_norm(&c0).0.t().to_owned())
    }

    fn check_speaker_len(&self, frames: usize) -> Result<()> {
        if frames < self.config.min_speaker_frames {
            return Err(Error::TooShort {
                len: frames,
                needed: self.config.min_speaker_frames,
            });
        }
        Ok(())
    }

    pub fn encode_speaker(&self, m: &MelSpectrogram) -> Result<SpeakerCode> {
        self.check_mel(&m.frames)?;
        self.check_speaker_len(m.n_frames())?;
        let (s, _) = self.speaker.forward(&self.params, &self.normalize(&m.frames));
        Ok(SpeakerCode {
            vector: s.iter().copied().collect(),
        })
    }

    pub fn decode(&self, c: &ContentCode, s: &SpeakerCode) -> Result<MelSpectrogram> {
        if c.codes.ncols() != self.config.content_dim {
            return Err(Error::Shape(format!(
                "content code has {} channels, model expects {}",
                c.codes.ncols(),
                self.config.content_dim
            )));
        }
        if s.vector.len() != self.config.speaker_dim {
            return Err(Error::Shape(format!(
                "speaker code has {} dims, model expects {}",
                s.vector.len(),
                self.config.speaker_dim
            )));
        }
        let expect = c.source_frames.div_ceil(self.config.downsample);
        if c.codes.nrows() != expect {
            return Err(Error::Shape(format!(
                "content code has {} frames, expected {expect} for {} source frames",
                c.codes.nrows(),
                c.source_frames
            )));
        }
        let (y, _) = self
            .decoder
            .forward(&self.params, &c.codes.t().to_owned(), &s.column(), c.source_frames);
        MelSpectrogram::from_frames(self.denormalize(&y), &self.features)
    }

    pub fn convert(&self, source: &MelSpectrogram, target: &MelSpectrogram) -> Result<MelSpectrogram> {
        let c = self.encode_content(source)?;
        let s = self.encode_speaker(target)?;
        self.decode(&c, &s)
    }

    /// Differentiable conversion of raw `T x M` inputs; returns the predicted
    /// `T x M` log-mel frames and the tape for [`VcModel::backward`].
    pub fn forward_train(&self, source: &Array2<f64>, target: &Array2<f64>) -> Result<(Array2<f64>, ConvertTape)> {
        self.check_mel(source)?;
        self.check_mel(target)?;
        self.check_speaker_len(target.nrows())?;
        let (code, content) = self.content.forward(&self.params, &self.normalize(source), self.config.downsample);
        let (spk, speaker) = self.speaker.forward(&self.params, &self.normalize(target));
        let (y, decoder) = self.decoder.forward(&self.params, &code, &spk, source.nrows());
        Ok((
            self.denormalize(&y),
            ConvertTape {
                content,
                speaker,
                decoder,
            },
        ))
    }

    /// Backpropagates `d_pred` (`T x M`) into `grads`; returns gradients on
    /// the source and target log-mel inputs.
    pub fn backward(
        &self,
        tape: &ConvertTape,
        d_pred: &Array2<f64>,
        mut grads: Option<&mut ParamStore>,
    ) -> (Array2<f64>, Array2<f64>) {
        let sd = self.config.feature_std;
        let dy = d_pred.t().mapv(|v| v * sd);
        let (dcode, dspk) = self.decoder.backward(&self.params, grads.as_deref_mut(), &tape.decoder, &dy);
        let dsrc = self.content.backward(&self.params, grads.as_deref_mut(), &tape.content, &dcode);
        let dtgt = self.speaker.backward(&self.params, grads, &tape.speaker, &dspk);
        (dsrc.t().mapv(|v| v / sd), dtgt.t().mapv(|v| v / sd))
    }

    /// Speaker code of raw `T x M` log-mel frames with a tape for input gradients.
    pub fn speaker_forward(&self, mel: &Array2<f64>) -> Result<(Mat, SpeakerTape)> {
        self.check_mel(mel)?;
        self.check_speaker_len(mel.nrows())?;
        Ok(self.speaker.forward(&self.params, &self.normalize(mel)))
    }

    /// Gradient of an objective on the speaker code with respect to the `T x M` input.
    pub fn speaker_input_grad(&self, tape: &SpeakerTape, d_code: &Mat) -> Array2<f64> {
        let dx = self.speaker.backward(&self.params, None, tape, d_code);
        dx.t().mapv(|v| v / self.config.feature_std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(Meta {
            version: MODEL_VERSION.into(),
            model: self.config.clone(),
            features: self.features.clone(),
        })?;
        checkpoint::save(path, CHECKPOINT_KIND, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let meta: Meta = serde_json::from_value(meta)?;
        if meta.version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!(
                "model version {} does not match {MODEL_VERSION}",
                meta.version
            )));
        }
        let mut model = Self::new(meta.model, meta.features)?;
        checkpoint::restore_into(&mut model.params, params)?;
        Ok(model)
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            hidden: 6,
            content_dim: 4,
            speaker_dim: 4,
            kernel: 3,
            downsample: 2,
            min_speaker_frames: 4,
            init_seed: 3,
            ..Self::default()
        }
    }
}

impl VcModel {
    /// Largest per-tensor relative error between the analytic gradient of
    /// the L1 reconstruction loss (against a random target) and central
    /// finite differences. Covers every parameter tensor plus both inputs.
    /// Tensors whose gradients are structurally ~0 are judged against an
    /// absolute floor of 1e-6 (biases feeding an
    /// instance norm, for example).
    pub fn gradient_check(&self, frames: usize, seed: u64) -> Result<f64> {
        const H: f64 = 1e-4;
        const PER_TENSOR: usize = 8;
        let mut rng = seed::rng(seed);
        let m = self.features.n_mels;
        let mut draw = |sd: f64, mu: f64| Array2::from_shape_fn((frames, m), |_| mu + sd * crate::degrade::standard_normal(&mut rng));
        let src = draw(2.0, -4.0);
        let tgt = draw(2.0, -4.0);
        let clean = draw(2.0, -4.0);
        let f = |model: &VcModel, s: &Array2<f64>, t: &Array2<f64>| -> Result<f64> {
            l1_loss(&model.forward_train(s, t)?.0, &clean)
        };
        let (pred, tape) = self.forward_train(&src, &tgt)?;
        let mut grads = self.params.zeros_like();
        let (dsrc, dtgt) = self.backward(&tape, &l1_loss_grad(&pred, &clean), Some(&mut grads));
        let rel = |a: &[f64], n: &[f64]| {
            let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
            diff / scale.max(1e-6)
        };
        let mut worst = 0.0f64;
        let mut probe = self.clone();
        for ti in 0..self.params.tensors.len() {
            let len = self.params.tensors[ti].len();
            let picks: Vec<usize> = (0..PER_TENSOR.min(len)).map(|k| k * len / PER_TENSOR.min(len)).collect();
            let (mut a, mut n) = (Vec::new(), Vec::new());
            for &p in &picks {
                let orig = self.params.tensors[ti].as_slice().expect("contiguous")[p];
                probe.params.tensors[ti].as_slice_mut().expect("contiguous")[p] = orig + H;
                let up = f(&probe, &src, &tgt)?;
                probe.params.tensors[ti].as_slice_mut().expect("contiguous")[p] = orig - H;
                let down = f(&probe, &src, &tgt)?;
                probe.params.tensors[ti].as_slice_mut().expect("contiguous")[p] = orig;
                a.push(grads.tensors[ti].as_slice().expect("contiguous")[p]);
                n.push((up - down) / (2.0 * H));
            }
            worst = worst.max(rel(&a, &n));
        }
        for (which, analytic) in [(0, &dsrc), (1, &dtgt)] {
            let (mut a, mut n) = (Vec::new(), Vec::new());
            for k in 0..PER_TENSOR {
                let idx = (k * frames / PER_TENSOR, (k * 3) % m);
                let (mut s1, mut t1) = (src.clone(), tgt.clone());
                let (mut s2, mut t2) = (src.clone(), tgt.clone());
                if which == 0 {
                    s1[idx] += H;
                    s2[idx] -= H;
                } else {
                    t1[idx] += H;
                    t2[idx] -= H;
                }
                a.push(analytic[idx]);
                n.push((f(self, &s1, &t1)? - f(self, &s2, &t2)?) / (2.0 * H));
            }
            worst = worst.max(rel(&a, &n));
        }
        Ok(worst)
    }
}

/// Mean absolute difference between two log-mel spectrograms.
pub fn reconstruction_loss(pred: &MelSpectrogram, clean_target: &MelSpectrogram) -> Result<f64> {
    l1_loss(&pred.frames, &clean_target.frames)
}

pub fn l1_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "loss operands differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Gradient of [`l1_loss`] with respect to `pred`.
pub fn l1_loss_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Array2<f64> {
    let n = pred.len() as f64;
    ndarray::Zip::from(pred)
        .and(target)
        .map_collect(|a, b| (a - b).signum() * f64::from(u8::from(a != b)) / n)
}

/// Mean over time of a `T x M` array, handy for summaries.
pub fn time_mean(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|v| v.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::standard_normal;

    fn tiny() -> VcModel {
        let cfg = ModelConfig::tiny();
        let feats = FeatureConfig {
            n_mels: 5,
            ..FeatureConfig::default()
        };
        VcModel::new(cfg, feats).unwrap()
    }

    fn rand_mel(t: usize, m: usize, s: u64) -> Array2<f64> {
        let mut rng = seed::rng(s);
        Array2::from_shape_fn((t, m), |_| -4.0 + 2.0 * standard_normal(&mut rng))
    }

    fn mel(frames: Array2<f64>, model: &VcModel) -> MelSpectrogram {
        MelSpectrogram::from_frames(frames, &model.features).unwrap()
    }

    #[test]
    fn content_length_is_ceil_of_downsample() {
        let model = tiny();
        for t in [8, 9, 11, 13] {
            let c = model.encode_content(&mel(rand_mel(t, 5, 1), &model)).unwrap();
            assert_eq!(c.codes.nrows(), t.div_ceil(model.config.downsample));
            let out = model.decode(&c, &model.encode_speaker(&mel(rand_mel(9, 5, 2), &model)).unwrap()).unwrap();
            assert_eq!(out.frames.dim(), (t, 5));
        }
    }

    #[test]
    fn speaker_code_dim_is_fixed_and_short_input_rejected() {
        let model = tiny();
        for t in [4, 10, 31] {
            assert_eq!(model.encode_speaker(&mel(rand_mel(t, 5, t as u64), &model)).unwrap().vector.len(), 4);
        }
        assert!(model.encode_speaker(&mel(rand_mel(3, 5, 0), &model)).is_err());
    }

    #[test]
    fn content_code_is_instance_normalised() {
        let model = tiny();
        let c = model.encode_content(&mel(rand_mel(40, 5, 4), &model)).unwrap();
        for col in c.codes.axis_iter(Axis(1)) {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn first_norm_ignores_channel_offsets() {
        let model = tiny();
        let x = rand_mel(16, 5, 5);
        let mut shifted = x.clone();
        for (j, mut col) in shifted.axis_iter_mut(Axis(1)).enumerate() {
            col += 0.7 * j as f64 - 1.0;
        }
        let a = model.content_first_norm(&mel(x, &model)).unwrap();
        let b = model.content_first_norm(&mel(shifted, &model)).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| (p - q).abs() < 1e-5));
    }

    #[test]
    fn speaker_code_stable_under_self_concatenation() {
        let model = tiny();
        let x = rand_mel(12, 5, 6);
        let doubled = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let a = model.encode_speaker(&mel(x, &model)).unwrap().vector;
        let b = model.encode_speaker(&mel(doubled, &model)).unwrap().vector;
        let diff: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-3);
    }

    #[test]
    fn decode_rejects_mismatched_codes() {
        let model = tiny();
        let c = model.encode_content(&mel(rand_mel(8, 5, 7), &model)).unwrap();
        let bad = SpeakerCode { vector: vec![0.0; 3] };
        assert!(model.decode(&c, &bad).is_err());
    }

    #[test]
    fn speaker_code_conditions_the_output() {
        let model = tiny();
        let c = model.encode_content(&mel(rand_mel(12, 5, 8), &model)).unwrap();
        let s = model.encode_speaker(&mel(rand_mel(12, 5, 9), &model)).unwrap();
        let mut s2 = s.clone();
        s2.vector[0] += 0.5;
        let a = model.decode(&c, &s).unwrap();
        let b = model.decode(&c, &s2).unwrap();
        assert!((&a.frames - &b.frames).iter().map(|v| v * v).sum::<f64>() > 0.0);
        assert_eq!(a, model.decode(&c, &s).unwrap());
    }

    #[test]
    fn l1_loss_cases() {
        let a = rand_mel(4, 3, 10);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert!((l1_loss(&a, &(&a + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let b = rand_mel(4, 3, 11);
        assert_eq!(l1_loss(&a, &b).unwrap(), l1_loss(&b, &a).unwrap());
        assert!(l1_loss(&a, &rand_mel(5, 3, 1)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let model = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        model.save(&p).unwrap();
        let back = VcModel::load(&p).unwrap();
        let a = mel(rand_mel(10, 5, 12), &model);
        assert_eq!(model.convert(&a, &a).unwrap(), back.convert(&a, &a).unwrap());
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let err = tiny().gradient_check(8, 21).unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }
}
