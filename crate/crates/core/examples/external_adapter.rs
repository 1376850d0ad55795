//! Plugs shell commands in as the speech enhancer and the transcriber, and
//! scores transcripts with the character error rate.
//!
//! cargo run --release --example external_adapter

use robustvc::corpus::{generate, ToyCorpusConfig};
use robustvc::enhance::Enhancer;
use robustvc::eval::{cer, levenshtein};
use robustvc::external::ExternalCommand;

fn main() -> robustvc::Result<()> {
    let corpus = generate(&ToyCorpusConfig {
        train_speakers: 1,
        eval_speakers: 1,
        utterances_per_speaker: 1,
        ..ToyCorpusConfig::default()
    });
    let utt = &corpus.eval.utterances[0];

    // a pass-through "enhancer": `{in}` and `{out}` are replaced by quoted WAV paths
    let enhancer = Enhancer::External(ExternalCommand::new("cp {in} {out}"));
    let out = enhancer.enhance(&utt.wave)?;
    println!("{} enhancer: max |y - x| = {:.2e}", enhancer.kind(), out.max_abs_diff(&utt.wave));

    // a fake transcriber that prints a fixed hypothesis to stdout
    let dir = tempfile::tempdir()?;
    let wav = dir.path().join("utt.wav");
    robustvc::wav::write_wav(&wav, &utt.wave)?;
    let hypothesis = utt.text.replacen('a', "e", 2);
    let transcriber = ExternalCommand::new(format!("echo '{hypothesis}' # {{in}}"));
    let heard = transcriber.run(&wav, None)?;
    println!("reference  {:?}", utt.text);
    println!("hypothesis {:?}", heard.trim());
    println!("edits {}, CER {:.3}", levenshtein(heard.trim(), &utt.text), cer(heard.trim(), &utt.text));

    let failing = ExternalCommand::new("exit 3");
    match failing.run(&wav, None) {
        Ok(_) => println!("unexpected success"),
        Err(e) => println!("failing adapter reported: {e}"),
    }
    Ok(())
}
