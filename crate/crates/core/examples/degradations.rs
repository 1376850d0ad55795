//! Additive noise at a requested SNR, synthetic reverberation and band
//! rejection applied to one toy utterance, with the measured effect of each.
//!
//! cargo run --example degradations

use robustvc::audio::{MelFrontend, FeatureConfig, Waveform};
use robustvc::corpus::{generate, ToyCorpusConfig};
use robustvc::degrade::{
    apply_band_reject, apply_reverb, augment, direct_to_reverberant_db, mix_at_snr, room_impulse_response,
    AugmentationPolicy,
};
use robustvc::model::l1_loss;
use robustvc::seed;

fn snr_db(clean: &Waveform, mixed: &Waveform) -> f64 {
    let noise: f64 = mixed.samples.iter().zip(&clean.samples).map(|(m, c)| (m - c).powi(2)).sum();
    10.0 * (clean.power() * clean.len() as f64 / noise).log10()
}

fn main() -> robustvc::Result<()> {
    let corpus = generate(&ToyCorpusConfig {
        train_speakers: 2,
        eval_speakers: 1,
        utterances_per_speaker: 2,
        ..ToyCorpusConfig::default()
    });
    let clean = &corpus.eval.utterances[0].wave;
    let fe = MelFrontend::new(&FeatureConfig::default())?;
    let clean_mel = fe.extract(clean)?;
    let mel_gap = |w: &Waveform| -> robustvc::Result<f64> { l1_loss(&fe.extract(w)?.frames, &clean_mel.frames) };

    println!("additive noise ({}):", corpus.test_noise.clips[0].id);
    for snr in [0.0, 5.0, 10.0, 15.0] {
        let mixed = mix_at_snr(clean, &corpus.test_noise.clips[0].wave, snr)?;
        println!("  requested {snr:>5.1} dB  achieved {:>7.3} dB  log-mel L1 {:.3}", snr_db(clean, &mixed), mel_gap(&mixed)?);
    }

    println!("reverberation:");
    for scale in [0.0, 25.0, 50.0, 100.0] {
        let rir = room_impulse_response(scale, 16_000, 7)?;
        let wet = apply_reverb(clean, scale, 7)?;
        println!(
            "  room scale {scale:>5.1}  RIR {:>5} taps  D/R {:>6.1} dB  log-mel L1 {:.3}",
            rir.len(),
            direct_to_reverberant_db(&rir),
            mel_gap(&wet)?
        );
    }

    println!("band rejection:");
    for (lower, width) in [(100.0, 50.0), (300.0, 100.0), (500.0, 150.0)] {
        let out = apply_band_reject(clean, lower, width)?;
        println!("  {lower:>5.0}..{:<5.0} Hz  log-mel L1 {:.3}", lower + width, mel_gap(&out)?);
    }

    println!("training policy draws:");
    let mut rng = seed::rng(3);
    for _ in 0..5 {
        let (out, spec) = augment(clean, &AugmentationPolicy::train(), Some(&corpus.train_noise), &mut rng)?;
        println!("  {}  log-mel L1 {:.3}", serde_json::to_string(&spec)?, mel_gap(&out)?);
    }
    Ok(())
}
