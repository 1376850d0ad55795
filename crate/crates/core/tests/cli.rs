use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMOKE: &str = r#"
seed = 5
out_dir = "run"
[data]
train_manifest = "data/train.tsv"
eval_manifest = "data/eval.tsv"
train_noise = "data/noise/train"
test_noise = "data/noise/test"
[toy]
train_speakers = 3
eval_speakers = 3
utterances_per_speaker = 3
noise_clips_per_family = 1
noise_clip_s = 1.5
[model]
hidden = 16
content_dim = 4
speaker_dim = 8
[train]
steps = 4
batch_size = 2
[verifier]
steps = 4
batch_size = 4
[denoiser]
steps = 4
[attack]
n_steps = 2
[eval]
n_pairs = 3
griffin_lim_iters = 4
"#;

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rvc-lab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn rvc-lab")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_tone(path: &Path, rate: u32, freq: f64) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for i in 0..rate {
        let t = i as f64 / rate as f64;
        w.write_sample((8000.0 * (std::f64::consts::TAU * freq * t).sin()) as i16).unwrap();
    }
    w.finalize().unwrap();
}

fn smoke_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("experiment.toml"), SMOKE).unwrap();
    dir
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lab(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(lab(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(lab(dir.path(), &["--help"]).status.code(), Some(0));
    // missing configuration file
    let o = lab(dir.path(), &["prepare"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn shared_noise_corpus_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMOKE.replace("data/noise/test", "data/noise/train");
    std::fs::write(dir.path().join("experiment.toml"), bad).unwrap();
    let o = lab(dir.path(), &["prepare"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("noise"), "{}", stderr(&o));
}

#[test]
fn prepare_names_every_wrong_rate_file_and_resample_accepts_it() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for (split, speakers) in [("train", ["ann", "bob"]), ("eval", ["cat", "dan"])] {
        for (k, spk) in speakers.iter().enumerate() {
            for u in 0..2 {
                write_tone(&root.join(format!("src/{split}/{spk}/{spk}_{u}.wav")), 16_000, 200.0 + 50.0 * (k + u) as f64);
            }
        }
    }
    let odd = root.join("src/train/bob/bob_9.wav");
    write_tone(&odd, 8_000, 300.0);
    write_tone(&root.join("noise/train/n0.wav"), 16_000, 90.0);
    write_tone(&root.join("noise/test/n1.wav"), 16_000, 110.0);
    let cfg = r#"
seed = 1
out_dir = "run"
[data]
train_manifest = "data/train.tsv"
eval_manifest = "data/eval.tsv"
train_noise = "noise/train"
test_noise = "noise/test"
train_source = "src/train"
eval_source = "src/eval"
"#;
    std::fs::write(root.join("experiment.toml"), cfg).unwrap();

    let o = lab(root, &["prepare"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bob_9.wav"), "{}", stderr(&o));
    assert!(!root.join("data/train.tsv").exists());

    let o = lab(root, &["--resample", "prepare"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(root.join("data/train.tsv")).unwrap();
    let ids: Vec<&str> = manifest
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("utterance_id"))
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    assert_eq!(ids, ["ann_0", "ann_1", "bob_0", "bob_1", "bob_9"]);
}

fn files(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn smoke_run_is_replayable() {
    let dir = smoke_dir();
    let root = dir.path();
    for args in [&["prepare"][..], &["train"], &["convert", "--defense", "se_concat"]] {
        let o = lab(root, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(files(&root.join("run/converted/se_concat"), "wav").len(), 3);

    let o = lab(root, &["evaluate", "--condition", "degraded"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = root.join("run/reports/degraded__baseline.json");
    let first = std::fs::read(&report).unwrap();

    // replay from the snapshot with the master seed
    let o = lab(root, &["--config", "run/config.toml", "--seed", "5", "--force", "evaluate", "--condition", "degraded"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(&report).unwrap(), first);

    // a changed seed makes the artifacts stale
    let o = lab(root, &["--seed", "6", "evaluate", "--condition", "degraded"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("--force"));

    let o = lab(root, &["attack", "--out-dir", "adv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = std::fs::read_to_string(root.join("adv/attacks.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["perturbation_linf"].as_f64().unwrap() <= 0.005);
    }

    let o = lab(root, &["enhance", "--out-dir", "enh", "adv/"]);
    assert_ne!(o.status.code(), Some(0));
    let wavs = files(&root.join("adv"), "wav");
    let mut args = vec!["enhance", "--out-dir", "enh"];
    let names: Vec<String> = wavs.iter().map(|p| p.display().to_string()).collect();
    args.extend(names.iter().map(String::as_str));
    let o = lab(root, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(files(&root.join("enh"), "wav").len(), wavs.len());
}
