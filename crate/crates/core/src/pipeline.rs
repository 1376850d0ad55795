//! The experiment commands behind `rvc-lab`. Every command works inside
//! the run directory `out_dir`:
//!
//! ```text
//! out_dir/config.toml                      resolved snapshot (with seeds)
//! out_dir/models/<name>/model.ckpt         + train_log.jsonl, stamp.json
//! out_dir/verifier/verifier.ckpt           + calibration.json, stamp.json
//! out_dir/denoiser/denoiser.ckpt           + stamp.json
//! out_dir/pairs.json                       evaluation pairs
//! out_dir/reports/<condition>__<defense>.{json,csv}
//! out_dir/summary.txt, report.md, *.svg
//! ```
//!
//! Artifacts carry the hash of their inputs. A command finding an artifact
//! with the same hash skips the work; a different hash is refused as stale
//! unless `force` is set.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{embedding_attack, AttackMode};
use crate::audio::{reconstruct_waveform, MelFrontend, Waveform};
use crate::config::{hash_value, ExperimentConfig};
use crate::corpus::{generate, Dataset};
use crate::degrade::{NoiseCorpus, SingleDegradation};
use crate::enhance::{train_denoiser, Denoiser, Enhancer};
use crate::error::{Error, Result};
use crate::eval::{
    bar_chart_svg, calibrate_threshold, evaluate, sample_pairs, summary_table, trial_grid, Condition, ConversionPair,
    EvalContext, EvalReport,
};
use crate::manifest::{Manifest, ManifestEntry};
use crate::model::VcModel;
use crate::seed;
use crate::train::{train, TrainMode};
use crate::verifier::Verifier;
use crate::wav::{read_wav, write_wav};

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Concurrent evaluation cells in `matrix`; 0 or 1 runs serially.
    pub jobs: usize,
}

/// The four rows of the defense grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    Baseline,
    SeConcat,
    Denoising,
    DenoisingAdversarial,
}

impl Defense {
    pub const ALL: [Defense; 4] = [
        Defense::Baseline,
        Defense::SeConcat,
        Defense::Denoising,
        Defense::DenoisingAdversarial,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Defense::Baseline => "baseline",
            Defense::SeConcat => "se_concat",
            Defense::Denoising => "denoising",
            Defense::DenoisingAdversarial => "denoising_adversarial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == s.replace('-', "_"))
    }

    /// The VC checkpoint this defense converts with.
    pub fn train_mode(&self) -> TrainMode {
        match self {
            Defense::Baseline | Defense::SeConcat => TrainMode::Clean,
            Defense::Denoising => TrainMode::Denoising,
            Defense::DenoisingAdversarial => TrainMode::DenoisingAdversarial,
        }
    }
}

pub fn parse_condition(s: &str) -> Option<Condition> {
    Some(match s.replace('-', "_").as_str() {
        "clean" => Condition::Clean,
        "degraded" => Condition::Degraded,
        "attacked" => Condition::Attacked,
        "noise" => Condition::Single(SingleDegradation::Noise),
        "reverb" => Condition::Single(SingleDegradation::Reverb),
        "band_reject" => Condition::Single(SingleDegradation::BandReject),
        _ => return None,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub eer: f64,
    pub n_trials: usize,
}

/// One line of `attacks.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub victim_utterance_id: String,
    pub third_speaker_id: Option<String>,
    pub third_utterance_id: Option<String>,
    pub epsilon: f64,
    pub alpha: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub final_objective: f64,
    pub perturbation_linf: f64,
    pub wav: PathBuf,
}

/// Returns true when the artifact in `dir` is current, false when it must
/// be (re)built. Errors when it exists under a different hash without `force`.
fn fresh(dir: &Path, artifact: &str, hash: &str, force: bool) -> Result<bool> {
    let stamp = dir.join("stamp.json");
    if !stamp.exists() || !dir.join(artifact).exists() {
        return Ok(false);
    }
    let old: Stamp = serde_json::from_str(&std::fs::read_to_string(&stamp)?)?;
    if old.hash == hash {
        Ok(!force)
    } else if force {
        Ok(false)
    } else {
        Err(Error::Stale(format!(
            "{} was built from a different configuration",
            dir.join(artifact).display()
        )))
    }
}

fn write_stamp(dir: &Path, hash: &str) -> Result<()> {
    std::fs::write(
        dir.join("stamp.json"),
        serde_json::to_string_pretty(&Stamp { hash: hash.into() })?,
    )?;
    Ok(())
}

fn rel_or_abs(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

pub struct Lab {
    pub config: ExperimentConfig,
    pub options: RunOptions,
}

impl Lab {
    pub fn new(config: ExperimentConfig, options: RunOptions) -> Self {
        Self { config, options }
    }

    pub fn open(config_path: &Path, seed: Option<u64>, options: RunOptions) -> Result<Self> {
        let mut config = ExperimentConfig::load(config_path)?;
        if let Some(s) = seed {
            config = config.with_seed(s)?;
        }
        Ok(Self::new(config, options))
    }

    pub fn out(&self) -> &Path {
        &self.config.out_dir
    }

    fn model_dir(&self, mode: TrainMode) -> PathBuf {
        self.out().join("models").join(mode.name())
    }

    /// Writes `config.toml`; a different existing snapshot is stale unless forced.
    pub fn write_snapshot(&self) -> Result<()> {
        std::fs::create_dir_all(self.out())?;
        let path = self.out().join("config.toml");
        let text = self.config.to_toml()?;
        if path.exists() && !self.options.force {
            let old = ExperimentConfig::load(&path)?;
            if old != self.config {
                return Err(Error::Stale(format!("{} holds a different configuration", path.display())));
            }
            return Ok(());
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    fn dataset(&self, manifest: &Path) -> Result<Dataset> {
        let m = Manifest::read(manifest)?;
        m.load(manifest.parent().unwrap_or(Path::new(".")), self.config.data.resample)
    }

    pub fn train_data(&self) -> Result<Dataset> {
        self.dataset(&self.config.data.train_manifest)
    }

    pub fn eval_data(&self) -> Result<Dataset> {
        self.dataset(&self.config.data.eval_manifest)
    }

    pub fn train_noise(&self) -> Result<NoiseCorpus> {
        NoiseCorpus::load_dir(&self.config.data.train_noise, self.config.data.resample)
    }

    pub fn test_noise(&self) -> Result<NoiseCorpus> {
        NoiseCorpus::load_dir(&self.config.data.test_noise, self.config.data.resample)
    }

    /// Builds or validates the dataset manifests. Source trees are scanned
    /// when configured; otherwise the synthetic corpus is written once.
    /// Every non-conforming file is reported, not just the first.
    pub fn prepare(&self) -> Result<(usize, usize)> {
        let d = &self.config.data;
        match (&d.train_source, &d.eval_source) {
            (Some(tr), Some(ev)) => {
                let mut failures = Vec::new();
                let train = scan_source(tr, &d.train_manifest, d.resample, &mut failures)?;
                let eval = scan_source(ev, &d.eval_manifest, d.resample, &mut failures)?;
                if !failures.is_empty() {
                    return Err(Error::AudioBatch(failures));
                }
                train.write(&d.train_manifest)?;
                eval.write(&d.eval_manifest)?;
            }
            (None, None) => {
                let exists = d.train_manifest.exists() && d.eval_manifest.exists();
                match &self.config.toy {
                    Some(toy) if !exists || self.options.force => {
                        let corpus = generate(toy);
                        write_split(&corpus.train, &d.train_manifest)?;
                        write_split(&corpus.eval, &d.eval_manifest)?;
                        for (noise, dir) in [(&corpus.train_noise, &d.train_noise), (&corpus.test_noise, &d.test_noise)] {
                            for clip in &noise.clips {
                                write_wav(&dir.join(format!("{}.wav", clip.id)), &clip.wave)?;
                            }
                        }
                    }
                    Some(_) => {}
                    None if !exists => {
                        return Err(Error::Config(
                            "data: manifests are missing and neither source trees nor [toy] are configured".into(),
                        ))
                    }
                    None => {}
                }
            }
            _ => return Err(Error::Config("data: train_source and eval_source must be given together".into())),
        }
        // validate everything in one pass so all failures are listed together
        let mut failures = Vec::new();
        let mut counts = (0, 0);
        for (path, count) in [(&d.train_manifest, &mut counts.0), (&d.eval_manifest, &mut counts.1)] {
            match self.dataset(path) {
                Ok(ds) => *count = ds.len(),
                Err(Error::AudioBatch(f)) => failures.extend(f),
                Err(e) => return Err(e),
            }
        }
        for dir in [&d.train_noise, &d.test_noise] {
            match NoiseCorpus::load_dir(dir, d.resample) {
                Ok(n) if n.is_empty() => failures.push(format!("{}: no noise clips", dir.display())),
                Ok(_) => {}
                Err(Error::AudioBatch(f)) => failures.extend(f),
                Err(e) => return Err(Error::Config(format!("{}: {e}", dir.display()))),
            }
        }
        if !failures.is_empty() {
            return Err(Error::AudioBatch(failures));
        }
        Ok(counts)
    }

    /// Trains one VC checkpoint unless a current one exists.
    pub fn train_vc(&self, mode: TrainMode) -> Result<VcModel> {
        self.write_snapshot()?;
        let dir = self.model_dir(mode);
        let hash = self.config.train_hash(mode)?;
        if fresh(&dir, "model.ckpt", &hash, self.options.force)? {
            return VcModel::load(&dir.join("model.ckpt"));
        }
        let data = self.train_data()?;
        let noise = self.train_noise()?;
        let outcome = train(
            &data,
            Some(&noise),
            self.config.model.clone(),
            self.config.features.clone(),
            self.config.train_config(mode),
            Some(&dir),
        )?;
        write_stamp(&dir, &hash)?;
        Ok(outcome.model)
    }

    /// Trains the verifier and calibrates its threshold on the eval split.
    pub fn train_verifier(&self) -> Result<(Verifier, Calibration)> {
        self.write_snapshot()?;
        let dir = self.out().join("verifier");
        let hash = self.config.verifier_hash()?;
        if fresh(&dir, "verifier.ckpt", &hash, self.options.force)? && dir.join("calibration.json").exists() {
            let cal = serde_json::from_str(&std::fs::read_to_string(dir.join("calibration.json"))?)?;
            return Ok((Verifier::load(&dir.join("verifier.ckpt"))?, cal));
        }
        std::fs::create_dir_all(&dir)?;
        let (v, losses) = Verifier::train(&self.train_data()?, &self.config.features, self.config.verifier.clone())?;
        let grid = trial_grid(&v, &self.eval_data()?)?;
        let (threshold, eer) = calibrate_threshold(&grid)?;
        let cal = Calibration {
            threshold,
            eer,
            n_trials: grid.len(),
        };
        v.save(&dir.join("verifier.ckpt"))?;
        std::fs::write(dir.join("losses.json"), serde_json::to_string(&losses)?)?;
        std::fs::write(dir.join("calibration.json"), serde_json::to_string_pretty(&cal)?)?;
        write_stamp(&dir, &hash)?;
        Ok((v, cal))
    }

    pub fn train_builtin_denoiser(&self) -> Result<Denoiser> {
        self.write_snapshot()?;
        let dir = self.out().join("denoiser");
        let hash = self.config.denoiser_hash()?;
        if fresh(&dir, "denoiser.ckpt", &hash, self.options.force)? {
            return Denoiser::load(&dir.join("denoiser.ckpt"));
        }
        std::fs::create_dir_all(&dir)?;
        let (d, losses) = train_denoiser(
            &self.train_data()?,
            Some(&self.train_noise()?),
            &self.config.policy.train,
            self.config.denoiser.clone(),
        )?;
        d.save(&dir.join("denoiser.ckpt"))?;
        std::fs::write(dir.join("losses.json"), serde_json::to_string(&losses)?)?;
        write_stamp(&dir, &hash)?;
        Ok(d)
    }

    /// The SE front-end: the configured external enhancer if any,
    /// otherwise the builtin denoiser.
    pub fn se_enhancer(&self) -> Result<Enhancer> {
        Ok(match &self.config.adapters.enhancer {
            Some(cmd) => Enhancer::External(cmd.clone()),
            None => Enhancer::BuiltinMask(Box::new(self.train_builtin_denoiser()?)),
        })
    }

    /// Evaluation pairs, sampled once from the eval seed and persisted.
    pub fn pairs(&self, data: &Dataset) -> Result<Vec<ConversionPair>> {
        let path = self.out().join("pairs.json");
        let with_third = self.config.attack.mode == AttackMode::Targeted;
        let mut rng = seed::derived_rng(self.config.eval.seed, "eval.pairs", 0);
        let pairs = sample_pairs(data, self.config.eval.n_pairs, &mut rng, with_third)?;
        std::fs::create_dir_all(self.out())?;
        std::fs::write(path, serde_json::to_string_pretty(&pairs)?)?;
        Ok(pairs)
    }

    /// Applies the enhancer of `kind` (`identity`, `builtin`, `external`)
    /// to each WAV, writing same-named files into `out_dir`.
    pub fn enhance_files(&self, inputs: &[PathBuf], out_dir: &Path, kind: &str) -> Result<Vec<PathBuf>> {
        let enhancer = match kind {
            "identity" => Enhancer::Identity,
            "builtin" => Enhancer::BuiltinMask(Box::new(self.train_builtin_denoiser()?)),
            "external" => Enhancer::External(
                self.config
                    .adapters
                    .enhancer
                    .clone()
                    .ok_or_else(|| Error::Config("adapters.enhancer is not configured".into()))?,
            ),
            other => return Err(Error::InvalidInput(format!("unknown enhancer kind {other:?}"))),
        };
        let mut failures = Vec::new();
        let waves: Vec<(PathBuf, Waveform)> = inputs
            .iter()
            .filter_map(|p| match read_wav(p, self.config.data.resample) {
                Ok(w) => Some((p.clone(), w)),
                Err(e) => {
                    failures.push(e.to_string());
                    None
                }
            })
            .collect();
        if !failures.is_empty() {
            return Err(Error::AudioBatch(failures));
        }
        let mut outs = Vec::with_capacity(waves.len());
        for (p, w) in waves {
            let name = p.file_name().ok_or_else(|| Error::InvalidInput(format!("{} has no file name", p.display())))?;
            let out = out_dir.join(name);
            write_wav(&out, &enhancer.enhance(&w)?)?;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Attacks the target utterance of every evaluation pair against the
    /// VC model of `defense`, writing WAVs plus `attacks.jsonl`.
    pub fn attack(&self, defense: Defense, out_dir: &Path) -> Result<Vec<AttackRecord>> {
        let model = self.train_vc(defense.train_mode())?;
        let data = self.eval_data()?;
        let pairs = self.pairs(&data)?;
        let fe = MelFrontend::new(&model.features)?;
        std::fs::create_dir_all(out_dir)?;
        let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("attacks.jsonl"))?);
        let mut records = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            let victim = lookup(&data, &pair.target_utterance_id)?;
            let third = match self.config.attack.mode {
                AttackMode::Targeted => Some(lookup(&data, pair.third_utterance_id.as_deref().unwrap_or_default())?),
                AttackMode::Untargeted => None,
            };
            let cfg = crate::adversarial::AttackConfig {
                seed: seed::derive(self.config.eval.seed, "eval.attack", i as u64),
                target_utterance_id: pair.third_utterance_id.clone(),
                ..self.config.attack.clone()
            };
            let outcome = embedding_attack(&model, &fe, &victim.wave, &cfg, third.map(|u| &u.wave))?;
            let wav = out_dir.join(format!("{i:04}_{}.wav", victim.id));
            write_wav(&wav, &outcome.wave)?;
            let rec = AttackRecord {
                victim_utterance_id: victim.id.clone(),
                third_speaker_id: pair.third_speaker_id.clone(),
                third_utterance_id: pair.third_utterance_id.clone(),
                epsilon: cfg.epsilon,
                alpha: cfg.alpha,
                n_steps: cfg.n_steps,
                seed: cfg.seed,
                final_objective: outcome.final_objective(),
                perturbation_linf: outcome.wave.max_abs_diff(&victim.wave),
                wav: rel_or_abs(&wav, out_dir),
            };
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n")?;
            records.push(rec);
        }
        log.flush()?;
        Ok(records)
    }

    /// Converts every evaluation pair with `defense` on clean inputs.
    pub fn convert(&self, defense: Defense, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let model = self.train_vc(defense.train_mode())?;
        let enhancer = match defense {
            Defense::SeConcat => self.se_enhancer()?,
            _ => Enhancer::Identity,
        };
        let data = self.eval_data()?;
        let pairs = self.pairs(&data)?;
        let fe = MelFrontend::new(&model.features)?;
        std::fs::create_dir_all(out_dir)?;
        let mut outs = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            let src = enhancer.enhance(&lookup(&data, &pair.source_utterance_id)?.wave)?;
            let tgt = enhancer.enhance(&lookup(&data, &pair.target_utterance_id)?.wave)?;
            let mel = model.convert(&fe.extract(&src)?, &fe.extract(&tgt)?)?;
            let w = reconstruct_waveform(
                &mel,
                &model.features,
                self.config.eval.griffin_lim_iters,
                seed::derive(self.config.eval.seed, "eval.vocoder", i as u64),
            )?;
            let p = out_dir.join(format!(
                "{i:04}_{}_to_{}.wav",
                pair.source_utterance_id, pair.target_utterance_id
            ));
            write_wav(&p, &w)?;
            outs.push(p);
        }
        Ok(outs)
    }

    fn report_path(&self, condition: &Condition, defense: Defense) -> PathBuf {
        self.out()
            .join("reports")
            .join(format!("{}__{}.json", condition.name(), defense.name()))
    }

    /// Evaluates a list of cells, reusing current reports and running up to
    /// `jobs` cells at once.
    pub fn evaluate_cells(&self, cells: &[(Condition, Defense)]) -> Result<Vec<EvalReport>> {
        self.write_snapshot()?;
        let hashes = self.config.eval_hashes()?;
        let mut todo = Vec::new();
        let mut done: BTreeMap<usize, EvalReport> = BTreeMap::new();
        for (k, (c, d)) in cells.iter().enumerate() {
            let path = self.report_path(c, *d);
            if path.exists() {
                let old: EvalReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                if old.config_hashes == hashes && !self.options.force {
                    done.insert(k, old);
                    continue;
                }
                if old.config_hashes != hashes && !self.options.force {
                    return Err(Error::Stale(format!("{} was produced from a different configuration", path.display())));
                }
            }
            todo.push(k);
        }
        if todo.is_empty() {
            return Ok(done.into_values().collect());
        }
        let data = self.eval_data()?;
        let noise = self.test_noise()?;
        let pairs = self.pairs(&data)?;
        let (verifier, cal) = self.train_verifier()?;
        let mut models = BTreeMap::new();
        let mut se = None;
        for k in &todo {
            let d = cells[*k].1;
            if let std::collections::btree_map::Entry::Vacant(e) = models.entry(d.train_mode()) {
                e.insert(self.train_vc(d.train_mode())?);
            }
            if d == Defense::SeConcat && se.is_none() {
                se = Some(self.se_enhancer()?);
            }
        }
        let identity = Enhancer::Identity;
        let transcriber = self.config.adapters.transcriber.as_ref();
        let run = |k: usize| -> Result<EvalReport> {
            let (condition, defense) = cells[k];
            let model = &models[&defense.train_mode()];
            let ctx = EvalContext {
                model,
                attack_model: model,
                enhancer: if defense == Defense::SeConcat { se.as_ref().expect("se loaded") } else { &identity },
                verifier: &verifier,
                data: &data,
                test_noise: &noise,
                test_policy: &self.config.policy.test,
                attack: &self.config.attack,
                settings: &self.config.eval,
                threshold: cal.threshold,
                eer: cal.eer,
                transcriber,
            };
            let report = evaluate(&ctx, condition, defense.name(), &pairs, hashes.clone())?;
            let path = self.report_path(&condition, defense);
            std::fs::create_dir_all(path.parent().expect("reports dir"))?;
            std::fs::write(&path, report.to_json()?)?;
            std::fs::write(path.with_extension("csv"), report.records_csv())?;
            Ok(report)
        };
        let jobs = self.options.jobs.max(1);
        let results: Vec<(usize, Result<EvalReport>)> = if jobs == 1 {
            todo.iter().map(|k| (*k, run(*k))).collect()
        } else {
            let next = std::sync::atomic::AtomicUsize::new(0);
            let out = std::sync::Mutex::new(Vec::new());
            std::thread::scope(|s| {
                for _ in 0..jobs.min(todo.len()) {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        let Some(k) = todo.get(i) else { break };
                        let r = run(*k);
                        out.lock().expect("no poisoned lock").push((*k, r));
                    });
                }
            });
            out.into_inner().expect("no poisoned lock")
        };
        for (k, r) in results {
            done.insert(k, r?);
        }
        Ok(done.into_values().collect())
    }

    pub fn evaluate(&self, condition: Condition, defense: Defense) -> Result<EvalReport> {
        Ok(self.evaluate_cells(&[(condition, defense)])?.remove(0))
    }

    /// The full grid: {clean, degraded, attacked} x four defenses, plus the
    /// single-degradation ablation on the baseline.
    pub fn matrix(&self) -> Result<Vec<EvalReport>> {
        let mut cells = Vec::new();
        for d in Defense::ALL {
            for c in [Condition::Clean, Condition::Degraded, Condition::Attacked] {
                cells.push((c, d));
            }
        }
        for s in [SingleDegradation::Noise, SingleDegradation::Reverb, SingleDegradation::BandReject] {
            cells.push((Condition::Single(s), Defense::Baseline));
        }
        let reports = self.evaluate_cells(&cells)?;
        std::fs::write(self.out().join("summary.txt"), summary_table(&reports))?;
        Ok(reports)
    }

    /// Collects every report in `reports/` into `summary.txt`, `report.md`
    /// and SVG bar charts.
    pub fn report(&self) -> Result<String> {
        let dir = self.out().join("reports");
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        let reports: Vec<EvalReport> = paths
            .iter()
            .map(|p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
            .collect::<Result<_>>()?;
        if reports.is_empty() {
            return Err(Error::InvalidInput(format!("no reports in {}", dir.display())));
        }
        let table = summary_table(&reports);
        std::fs::write(self.out().join("summary.txt"), &table)?;
        std::fs::write(
            self.out().join("svar.svg"),
            bar_chart_svg(&reports, "SVAR (%)", 100.0, |r| r.svar),
        )?;
        let with_cer: Vec<EvalReport> = reports.iter().filter(|r| r.mean_cer.is_some()).cloned().collect();
        if !with_cer.is_empty() {
            std::fs::write(
                self.out().join("cer.svg"),
                bar_chart_svg(&with_cer, "CER", 1.0, |r| r.mean_cer.unwrap_or(0.0)),
            )?;
        }
        let md = format!(
            "# Evaluation summary\n\nmaster seed {}, threshold {:.4}, EER {:.4}\n\n```\n{table}```\n\n![SVAR](svar.svg)\n",
            self.config.seed, reports[0].threshold, reports[0].eer
        );
        std::fs::write(self.out().join("report.md"), &md)?;
        Ok(table)
    }

    /// Hash of the whole snapshot, for display.
    pub fn config_hash(&self) -> Result<String> {
        hash_value(&self.config)
    }
}

fn lookup<'a>(data: &'a Dataset, id: &str) -> Result<&'a crate::corpus::Utterance> {
    data.get(id)
        .ok_or_else(|| Error::InvalidInput(format!("utterance {id:?} not in evaluation set")))
}

fn write_split(ds: &Dataset, manifest: &Path) -> Result<()> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let m = ds.manifest();
    for (u, e) in ds.utterances.iter().zip(&m.entries) {
        write_wav(&base.join(&e.path), &u.wave)?;
    }
    m.write(manifest)
}

/// Scans `<root>/<speaker>/<utterance>.wav` (with optional `<utterance>.txt`
/// transcripts) into a manifest sorted by utterance id. Unreadable files
/// are appended to `failures`.
fn scan_source(root: &Path, manifest: &Path, resample: bool, failures: &mut Vec<String>) -> Result<Manifest> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut speakers: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Config(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    speakers.sort();
    let mut entries = Vec::new();
    for dir in speakers {
        let speaker = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut wavs: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
            .collect();
        wavs.sort();
        for p in wavs {
            match read_wav(&p, resample) {
                Ok(w) => entries.push(ManifestEntry {
                    utterance_id: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                    speaker_id: speaker.clone(),
                    path: rel_or_abs(&p, base),
                    duration_s: Some(w.duration_s()),
                    text: std::fs::read_to_string(p.with_extension("txt"))
                        .ok()
                        .map(|t| t.trim().replace(['\t', '\n'], " ")),
                }),
                Err(e) => failures.push(e.to_string()),
            }
        }
    }
    entries.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
    for w in entries.windows(2) {
        if w[0].utterance_id == w[1].utterance_id {
            failures.push(format!("duplicate utterance id {} under {}", w[0].utterance_id, root.display()));
        }
    }
    Ok(Manifest { entries })
}
