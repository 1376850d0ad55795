//! Loads a layered experiment configuration, shows the derived stage seeds
//! and the artifact hashes that decide when a stage must be rebuilt.
//!
//! cargo run --release --example config_snapshot

use robustvc::config::ExperimentConfig;
use robustvc::train::TrainMode;

fn main() -> robustvc::Result<()> {
    let dir = tempfile::tempdir()?;
    std::fs::write(
        dir.path().join("base.toml"),
        r#"
seed = 3
out_dir = "runs/base"
[data]
train_manifest = "data/train.tsv"
eval_manifest = "data/eval.tsv"
train_noise = "noise/train"
test_noise = "noise/test"
[train]
steps = 200
"#,
    )?;
    std::fs::write(
        dir.path().join("variant.toml"),
        "include = [\"base.toml\"]\nout_dir = \"runs/variant\"\n[train]\nsteps = 400\n",
    )?;

    let cfg = ExperimentConfig::load(&dir.path().join("variant.toml"))?;
    println!("out_dir {}", cfg.out_dir.display());
    println!("train.steps {} (overridden), batch_size {} (default)", cfg.train.steps, cfg.train.batch_size);
    for (stage, seed) in &cfg.seeds {
        println!("  seed[{stage}] = {seed}");
    }

    let other = cfg.clone().with_seed(4)?;
    for mode in TrainMode::ALL {
        let a = cfg.train_hash(mode)?;
        let b = other.train_hash(mode)?;
        println!("{:<24} {} (seed 4: {})", mode.name(), &a[..12], &b[..12]);
    }

    let snapshot = cfg.to_toml()?;
    let back = ExperimentConfig::from_toml_str(&snapshot, dir.path())?;
    assert_eq!(back, cfg);
    println!("snapshot round-trips ({} bytes)", snapshot.len());

    let bad = snapshot.replace("noise/test", "noise/train");
    match ExperimentConfig::from_toml_str(&bad, dir.path()) {
        Ok(_) => println!("unexpectedly accepted a shared noise corpus"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
