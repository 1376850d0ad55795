//! Trains the VC autoencoder in the three regimes on a small toy corpus and
//! compares their reconstruction error on clean and degraded inputs.
//!
//! cargo run --release --example train_vc -- 200

use robustvc::audio::FeatureConfig;
use robustvc::corpus::{generate, ToyCorpusConfig};
use robustvc::degrade::{augment, AugmentationPolicy};
use robustvc::model::ModelConfig;
use robustvc::seed;
use robustvc::train::{incidence, reconstruction_error, train, TrainConfig, TrainMode};

fn main() -> robustvc::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let corpus = generate(&ToyCorpusConfig {
        train_speakers: 6,
        eval_speakers: 3,
        utterances_per_speaker: 12,
        ..ToyCorpusConfig::default()
    });
    let model_cfg = ModelConfig {
        hidden: 48,
        content_dim: 16,
        speaker_dim: 24,
        ..ModelConfig::default()
    };
    let clean: Vec<_> = corpus.eval.utterances.iter().map(|u| u.wave.clone()).collect();
    let mut rng = seed::rng(11);
    let degraded = clean
        .iter()
        .map(|w| Ok(augment(w, &AugmentationPolicy::test(), Some(&corpus.test_noise), &mut rng)?.0))
        .collect::<robustvc::Result<Vec<_>>>()?;

    println!("{:<24} {:>8} {:>8} {:>6} {:>6} {:>10} {:>10}", "mode", "loss0", "lossN", "aug", "adv", "clean L1", "degr. L1");
    for mode in TrainMode::ALL {
        let cfg = TrainConfig {
            mode,
            steps,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        }
        .resolved()?;
        let out = train(&corpus.train, Some(&corpus.train_noise), model_cfg.clone(), FeatureConfig::default(), cfg, None)?;
        let (aug, adv) = incidence(&out.log);
        println!(
            "{:<24} {:>8.3} {:>8.3} {:>6.2} {:>6.2} {:>10.3} {:>10.3}",
            mode.name(),
            out.log[0].loss,
            out.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
            aug,
            adv,
            reconstruction_error(&out.model, &clean, &clean)?,
            reconstruction_error(&out.model, &degraded, &clean)?,
        );
    }
    Ok(())
}
