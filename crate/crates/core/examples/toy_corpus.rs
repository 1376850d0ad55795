//! Generates the synthetic multi-speaker corpus and writes it as WAV files
//! with train/eval manifests and disjoint train/test noise directories.
//!
//! cargo run --example toy_corpus -- /tmp/toy

use robustvc::corpus::{generate, write_corpus, ToyCorpusConfig};
use robustvc::manifest::Manifest;

fn main() -> robustvc::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "toy_corpus".into());
    let cfg = ToyCorpusConfig {
        utterances_per_speaker: 10,
        ..ToyCorpusConfig::default()
    };
    let corpus = generate(&cfg);
    write_corpus(&corpus, dir.as_ref())?;
    let train = Manifest::read(&std::path::Path::new(&dir).join("train.tsv"))?;
    println!(
        "{} train / {} eval utterances, {} + {} speakers",
        corpus.train.len(),
        corpus.eval.len(),
        corpus.train.speakers().len(),
        corpus.eval.speakers().len()
    );
    let ids = |c: &robustvc::degrade::NoiseCorpus| c.clips.iter().map(|c| c.id.as_str()).collect::<Vec<_>>().join(" ");
    println!("train noise: {}", ids(&corpus.train_noise));
    println!("test noise:  {}", ids(&corpus.test_noise));
    for e in train.entries.iter().take(3) {
        println!("{}\t{}\t{}\t{:?}", e.utterance_id, e.speaker_id, e.path.display(), e.text);
    }
    println!("written to {dir}");
    Ok(())
}
