//! Trains the builtin magnitude-mask denoiser and reports SI-SDR before and
//! after enhancement on held-out speakers.
//!
//! cargo run --release --example speech_enhancement -- 300

use robustvc::corpus::{generate, ToyCorpusConfig};
use robustvc::degrade::{augment, AugmentationPolicy};
use robustvc::enhance::{mean_si_sdr, si_sdr, train_denoiser, DenoiserConfig, Enhancer};
use robustvc::seed;

fn main() -> robustvc::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let corpus = generate(&ToyCorpusConfig {
        train_speakers: 6,
        eval_speakers: 3,
        utterances_per_speaker: 10,
        ..ToyCorpusConfig::default()
    });
    let policy = AugmentationPolicy::train();
    let (denoiser, losses) = train_denoiser(
        &corpus.train,
        Some(&corpus.train_noise),
        &policy,
        DenoiserConfig {
            steps,
            ..DenoiserConfig::default()
        },
    )?;
    println!("{} parameters, loss {:.4} -> {:.4}", denoiser.n_params(), losses[0], losses[losses.len() - 1]);

    let validation = AugmentationPolicy {
        p_augment: 1.0,
        p_reverb: 0.0,
        p_band_reject: 0.0,
        ..policy
    };
    let mut rng = seed::rng(2);
    let (mut clean, mut noisy, mut enhanced) = (vec![], vec![], vec![]);
    for u in &corpus.eval.utterances {
        let (y, _) = augment(&u.wave, &validation, Some(&corpus.train_noise), &mut rng)?;
        enhanced.push(denoiser.enhance(&y)?);
        noisy.push(y);
        clean.push(u.wave.clone());
    }
    println!("SI-SDR degraded {:.2} dB -> enhanced {:.2} dB", mean_si_sdr(&noisy, &clean)?, mean_si_sdr(&enhanced, &clean)?);
    println!("clean passthrough {:.2} dB", si_sdr(&denoiser.enhance(&clean[0])?, &clean[0])?);

    let identity = Enhancer::Identity;
    assert_eq!(identity.enhance(&clean[0])?, clean[0]);
    println!("identity enhancer returns its input unchanged");
    Ok(())
}
