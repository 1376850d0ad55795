//! Trains the speaker verifier, scores every ordered pair of held-out
//! utterances and calibrates the equal-error-rate threshold.
//!
//! cargo run --release --example verification_eer

use robustvc::audio::FeatureConfig;
use robustvc::corpus::{generate, ToyCorpusConfig};
use robustvc::eval::{calibrate_threshold, svar, trial_grid};
use robustvc::verifier::{Verifier, VerifierConfig};

fn main() -> robustvc::Result<()> {
    let corpus = generate(&ToyCorpusConfig {
        train_speakers: 8,
        eval_speakers: 4,
        utterances_per_speaker: 10,
        ..ToyCorpusConfig::default()
    });
    let (verifier, losses) = Verifier::train(
        &corpus.train,
        &FeatureConfig::default(),
        VerifierConfig {
            steps: 200,
            ..VerifierConfig::default()
        },
    )?;
    println!("verifier loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);

    let trials = trial_grid(&verifier, &corpus.eval)?;
    let (threshold, eer) = calibrate_threshold(&trials)?;
    let same: Vec<f64> = trials.iter().filter(|t| t.same_speaker).map(|t| t.score).collect();
    let diff: Vec<f64> = trials.iter().filter(|t| !t.same_speaker).map(|t| t.score).collect();
    println!("{} trials ({} target, {} impostor)", trials.len(), same.len(), diff.len());
    println!("threshold {threshold:.4}, EER {:.2}%", 100.0 * eer);
    println!("accepted: targets {:.1}%, impostors {:.1}%", svar(&same, threshold)?, svar(&diff, threshold)?);
    Ok(())
}
