//! Targeted and untargeted embedding attacks on the speaker encoder of a
//! briefly trained VC model, with the l-inf bound and perturbation SNR.
//!
//! cargo run --release --example embedding_attack

use robustvc::adversarial::{embedding_attack, perturbation_snr_db, speaker_embedding, AttackConfig, AttackMode};
use robustvc::audio::{FeatureConfig, MelFrontend};
use robustvc::corpus::{generate, ToyCorpusConfig};
use robustvc::model::ModelConfig;
use robustvc::train::{train, TrainConfig, TrainMode};

fn cos(a: &robustvc::nn::Mat, b: &robustvc::nn::Mat) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

fn main() -> robustvc::Result<()> {
    let corpus = generate(&ToyCorpusConfig {
        train_speakers: 5,
        eval_speakers: 3,
        utterances_per_speaker: 8,
        ..ToyCorpusConfig::default()
    });
    let out = train(
        &corpus.train,
        None,
        ModelConfig {
            hidden: 32,
            content_dim: 8,
            speaker_dim: 16,
            ..ModelConfig::default()
        },
        FeatureConfig::default(),
        TrainConfig {
            mode: TrainMode::Clean,
            steps: 100,
            batch_size: 4,
            ..TrainConfig::default()
        },
        None,
    )?;
    let model = out.model;
    let fe = MelFrontend::new(&model.features)?;
    let victim = &corpus.eval.utterances[0].wave;
    let third = &corpus.eval.by_speaker(&corpus.eval.speakers()[2])[0].wave;
    let e_victim = speaker_embedding(&model, &fe, victim)?;
    let e_third = speaker_embedding(&model, &fe, third)?;

    for mode in [AttackMode::Targeted, AttackMode::Untargeted] {
        let cfg = AttackConfig {
            mode,
            ..AttackConfig::default()
        };
        let third_utt = (mode == AttackMode::Targeted).then_some(third);
        let adv = embedding_attack(&model, &fe, victim, &cfg, third_utt)?;
        let e_adv = speaker_embedding(&model, &fe, &adv.wave)?;
        println!("{mode:?}:");
        println!("  objective trace {:?}", adv.objective_trace.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
        println!("  non-increasing steps {:.0}%", 100.0 * adv.monotone_fraction());
        println!("  ||delta||_inf {:.6} (eps {})", adv.wave.max_abs_diff(victim), cfg.epsilon);
        println!("  perturbation SNR {:.1} dB", perturbation_snr_db(victim, &adv.wave));
        println!(
            "  cos to original {:.4}, cos to third {:.4} (before {:.4})",
            cos(&e_adv, &e_victim),
            cos(&e_adv, &e_third),
            cos(&e_victim, &e_third)
        );
    }
    Ok(())
}
