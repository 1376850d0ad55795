//! Single-step fast adversarial examples at several budgets, the inner step
//! of adversarial training.
//!
//! cargo run --release --example fast_adversarial

use robustvc::adversarial::{fast_adv_example, perturbation_snr_db, speaker_embedding};
use robustvc::audio::{FeatureConfig, MelFrontend};
use robustvc::corpus::{generate, ToyCorpusConfig};
use robustvc::model::{ModelConfig, VcModel};
use robustvc::seed;

fn main() -> robustvc::Result<()> {
    let corpus = generate(&ToyCorpusConfig {
        train_speakers: 2,
        eval_speakers: 1,
        utterances_per_speaker: 2,
        ..ToyCorpusConfig::default()
    });
    let model = VcModel::new(
        ModelConfig {
            hidden: 32,
            content_dim: 8,
            speaker_dim: 16,
            ..ModelConfig::default()
        },
        FeatureConfig::default(),
    )?;
    let fe = MelFrontend::new(&model.features)?;
    let utt = &corpus.eval.utterances[0].wave;
    let anchor = speaker_embedding(&model, &fe, utt)?;
    let mut rng = seed::rng(4);
    println!("{:>8} {:>8} {:>12} {:>10} {:>10}", "eps", "alpha", "linf", "snr_db", "emb_shift");
    for eps in [0.0f64, 0.001, 0.005, 0.01] {
        let adv = fast_adv_example(&model, &fe, utt, 0.5 * eps.max(1e-9), eps, &mut rng)?;
        let e = speaker_embedding(&model, &fe, &adv.wave)?;
        let shift = (&e - &anchor).iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "{eps:>8.3} {:>8.4} {:>12.6} {:>10.1} {shift:>10.5}",
            0.5 * eps,
            adv.wave.max_abs_diff(utt),
            perturbation_snr_db(utt, &adv.wave)
        );
    }
    Ok(())
}
