//! Log-mel analysis and the Griffin-Lim vocoder stub: how close the
//! re-analysed vocoder output gets to the input spectrogram.
//!
//! cargo run --example features_vocoder

use robustvc::audio::{inverse_mel, mel_filterbank, reconstruct_waveform, FeatureConfig, MelFrontend};
use robustvc::corpus::{generate, ToyCorpusConfig};
use robustvc::model::l1_loss;

fn main() -> robustvc::Result<()> {
    let cfg = FeatureConfig::default();
    let fe = MelFrontend::new(&cfg)?;
    let corpus = generate(&ToyCorpusConfig {
        train_speakers: 2,
        eval_speakers: 1,
        utterances_per_speaker: 1,
        ..ToyCorpusConfig::default()
    });
    let w = &corpus.train.utterances[0].wave;
    let m = fe.extract(w)?;
    println!("{} samples -> {} frames x {} mels", w.len(), m.n_frames(), cfg.n_mels);

    let fb = mel_filterbank(&cfg);
    let target = m.frames.mapv(f64::exp);
    for iters in [0, 5, 30] {
        let err = (inverse_mel(&m, &cfg, iters).dot(&fb.t()) - &target).mapv(f64::abs).mean().unwrap_or(0.0);
        println!("inverse mel with {iters:>2} refinement steps: mean |mel error| {err:.2e}");
    }
    for gl in [8, 32, 100] {
        let y = reconstruct_waveform(&m, &cfg, gl, 1)?;
        println!("Griffin-Lim {gl:>3} iterations: log-mel L1 after re-analysis {:.3}", l1_loss(&fe.extract(&y)?.frames, &m.frames)?);
    }
    Ok(())
}
