//! End-to-end laboratory run: prepare the toy corpus, train every model,
//! evaluate the condition x defense matrix and write the report.
//!
//! cargo run --release --example lab_pipeline -- configs/smoke.toml

use std::path::PathBuf;

use robustvc::eval::summary_table;
use robustvc::pipeline::{Lab, RunOptions};
use robustvc::train::TrainMode;

fn main() -> robustvc::Result<()> {
    let config = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml"));
    let lab = Lab::open(&config, None, RunOptions { force: false, jobs: 2 })?;
    println!("output directory {}", lab.out().display());

    let (n_train, n_eval) = lab.prepare()?;
    println!("prepared {n_train} train and {n_eval} eval utterances");

    let (_, cal) = lab.train_verifier()?;
    println!("verifier threshold {:.4}, EER {:.2}%", cal.threshold, 100.0 * cal.eer);
    lab.train_builtin_denoiser()?;
    for mode in TrainMode::ALL {
        lab.train_vc(mode)?;
    }

    let reports = lab.matrix()?;
    print!("{}", summary_table(&reports));
    lab.report()?;
    println!("report written to {}", lab.out().join("report.md").display());

    // a second run finds every artifact current and recomputes nothing
    let again = lab.matrix()?;
    assert_eq!(again.len(), reports.len());
    Ok(())
}
