//! Experiment configuration: a TOML file with optional `include = [..]`
//! lists, merged depth-first (later files win, the including file last).
//! Relative paths are resolved against the directory of the file that
//! declares them.
//!
//! One master `seed` expands into per-stage seeds with
//! `seed::derive(master, "stage.<name>", 0)`; the resolved values are
//! written into every run snapshot under `[seeds]`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{AttackConfig, AttackMode};
use crate::audio::FeatureConfig;
use crate::corpus::ToyCorpusConfig;
use crate::degrade::{check_disjoint_snr, AugmentationPolicy, CorpusSelector};
use crate::enhance::DenoiserConfig;
use crate::error::{Error, Result};
use crate::eval::EvalSettings;
use crate::external::ExternalCommand;
use crate::model::ModelConfig;
use crate::seed;
use crate::train::{TrainConfig, TrainMode};
use crate::verifier::VerifierConfig;

/// Stage names that receive derived seeds, in a fixed order.
pub const STAGES: [&str; 9] = [
    "toy",
    "model.init",
    "train.clean",
    "train.denoising",
    "train.denoising_adversarial",
    "verifier",
    "denoiser",
    "attack",
    "eval",
];

/// Keys holding paths, per table; resolved relative to the declaring file.
const PATH_KEYS: [(&str, &str); 7] = [
    ("", "out_dir"),
    ("data", "train_manifest"),
    ("data", "eval_manifest"),
    ("data", "train_noise"),
    ("data", "test_noise"),
    ("data", "train_source"),
    ("data", "eval_source"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    /// Directory of training-noise WAVs.
    pub train_noise: PathBuf,
    /// Directory of test-noise WAVs; must differ from `train_noise`.
    pub test_noise: PathBuf,
    /// Directory tree `<speaker>/<utterance>.wav` scanned by `prepare`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_source: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_source: Option<PathBuf>,
    /// Resample non-16 kHz input instead of rejecting it.
    #[serde(default)]
    pub resample: bool,
}

/// Training hyperparameters shared by the three VC training modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub p_adv: f64,
    pub checkpoint_every: usize,
    pub segment_samples: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            p_adv: d.p_adv,
            checkpoint_every: d.checkpoint_every,
            segment_samples: d.segment_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policies {
    pub train: AugmentationPolicy,
    pub test: AugmentationPolicy,
}

impl Default for Policies {
    fn default() -> Self {
        Self {
            train: AugmentationPolicy::train(),
            test: AugmentationPolicy::test(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adapters {
    /// External speech enhancer (`{in}` / `{out}` WAV paths).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhancer: Option<ExternalCommand>,
    /// External transcriber (`{in}` WAV path, transcript on stdout).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcriber: Option<ExternalCommand>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    /// Synthetic corpus written by `prepare` when no source trees are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyCorpusConfig>,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub policy: Policies,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub verifier: VerifierConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub adapters: Adapters,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Derived stage seeds; recomputed on every load.
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
}

fn lexical_normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other),
        }
    }
    out
}

fn absolutize_paths(table: &mut toml::Table, base: &Path) {
    for (section, key) in PATH_KEYS {
        let t = if section.is_empty() {
            Some(&mut *table)
        } else {
            table.get_mut(section).and_then(|v| v.as_table_mut())
        };
        if let Some(toml::Value::String(s)) = t.and_then(|t| t.get_mut(key)) {
            *s = lexical_normalize(&base.join(&*s)).display().to_string();
        }
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn load_table(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table> {
    let canon = std::fs::canonicalize(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if stack.contains(&canon) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    let text = std::fs::read_to_string(&canon)?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = canon.parent().unwrap_or(Path::new(".")).to_path_buf();
    absolutize_paths(&mut table, &base);
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(base.join(s)),
                other => Err(Error::Config(format!("{}: include entry {other} is not a string", path.display()))),
            })
            .collect::<Result<_>>()?,
        Some(other) => {
            return Err(Error::Config(format!("{}: include must be an array, got {other}", path.display())))
        }
    };
    stack.push(canon);
    let mut merged = toml::Table::new();
    for inc in includes {
        merge(&mut merged, load_table(&inc, stack)?);
    }
    stack.pop();
    merge(&mut merged, table);
    Ok(merged)
}

/// SHA-256 hex digest of the canonical JSON form of `value`.
pub fn hash_value<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(format!("{:x}", Sha256::digest(&json)))
}

/// SHA-256 hex digest of a file's bytes.
pub fn hash_file(path: &Path) -> Result<String> {
    Ok(format!("{:x}", Sha256::digest(std::fs::read(path)?)))
}

impl ExperimentConfig {
    /// Reads, merges includes, derives stage seeds and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let table = load_table(path, &mut Vec::new())?;
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolved()
    }

    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if table.contains_key("include") {
            return Err(Error::Config("include is only supported when loading from a file".into()));
        }
        absolutize_paths(&mut table, base);
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Result<Self> {
        self.seed = seed;
        self.resolved()
    }

    /// Fills the derived seeds into every component config, then validates.
    /// Stage seeds keep 63 bits so the snapshot stays valid TOML.
    pub fn resolved(mut self) -> Result<Self> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.seeds = STAGES
            .iter()
            .map(|s| (s.to_string(), seed::derive(self.seed, &format!("stage.{s}"), 0) >> 1))
            .collect();
        let s = |k: &str| self.seeds[k];
        if let Some(toy) = self.toy.as_mut() {
            toy.seed = s("toy");
        }
        self.model.init_seed = s("model.init");
        self.verifier.seed = s("verifier");
        self.denoiser.seed = s("denoiser");
        self.attack.seed = s("attack");
        self.eval.seed = s("eval");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let same = match (std::fs::canonicalize(&d.train_noise), std::fs::canonicalize(&d.test_noise)) {
            (Ok(a), Ok(b)) => a == b,
            _ => lexical_normalize(&d.train_noise) == lexical_normalize(&d.test_noise),
        };
        if same {
            return Err(Error::Config(format!(
                "test noise corpus must differ from the training noise corpus ({})",
                d.test_noise.display()
            )));
        }
        self.policy.train.validate()?;
        self.policy.test.validate()?;
        if self.policy.train.noise_corpus != CorpusSelector::Train
            || self.policy.test.noise_corpus != CorpusSelector::Test
        {
            return Err(Error::Config("policy.train must use the train noise corpus and policy.test the test corpus".into()));
        }
        check_disjoint_snr(&self.policy.train, &self.policy.test)?;
        self.model.validate()?;
        self.attack.validate()?;
        for m in TrainMode::ALL {
            self.train_config(m).validate()?;
        }
        if self.eval.n_pairs == 0 {
            return Err(Error::Config("eval.n_pairs must be positive".into()));
        }
        Ok(())
    }

    /// The resolved training configuration for one mode.
    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        let t = &self.train;
        let label = match mode {
            TrainMode::Clean => "train.clean",
            TrainMode::Denoising => "train.denoising",
            TrainMode::DenoisingAdversarial => "train.denoising_adversarial",
        };
        TrainConfig {
            mode,
            policy: self.policy.train.clone(),
            attack: (mode == TrainMode::DenoisingAdversarial).then(|| AttackConfig {
                mode: AttackMode::Untargeted,
                target_utterance_id: None,
                ..self.attack.clone()
            }),
            p_adv: t.p_adv,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: self.seeds.get(label).copied().unwrap_or_default(),
            checkpoint_every: t.checkpoint_every,
            segment_samples: t.segment_samples,
        }
    }

    /// Hash of everything that determines a trained VC checkpoint.
    pub fn train_hash(&self, mode: TrainMode) -> Result<String> {
        hash_value(&(
            "vc",
            &self.features,
            &self.model,
            self.train_config(mode).resolved()?,
            self.dataset_digest()?,
        ))
    }

    pub fn verifier_hash(&self) -> Result<String> {
        hash_value(&("verifier", &self.features, &self.verifier, self.dataset_digest()?))
    }

    pub fn denoiser_hash(&self) -> Result<String> {
        hash_value(&("denoiser", &self.denoiser, &self.policy.train, self.dataset_digest()?))
    }

    /// Hashes of every input to evaluation, embedded in each report.
    pub fn eval_hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut h = BTreeMap::new();
        for m in TrainMode::ALL {
            h.insert(format!("train.{}", m.name()), self.train_hash(m)?);
        }
        h.insert("verifier".into(), self.verifier_hash()?);
        h.insert("denoiser".into(), self.denoiser_hash()?);
        h.insert("attack".into(), hash_value(&self.attack)?);
        h.insert("policy.test".into(), hash_value(&self.policy.test)?);
        h.insert("eval".into(), hash_value(&(&self.eval, &self.adapters))?);
        h.insert("data".into(), self.dataset_digest()?);
        Ok(h)
    }

    /// Digest of the manifests' bytes (or their paths when not yet prepared).
    pub fn dataset_digest(&self) -> Result<String> {
        let d = &self.data;
        let part = |p: &Path| hash_file(p).unwrap_or_else(|_| format!("missing:{}", p.display()));
        hash_value(&(
            part(&d.train_manifest),
            part(&d.eval_manifest),
            d.train_noise.display().to_string(),
            d.test_noise.display().to_string(),
            d.resample,
        ))
    }

    /// Collects every path key so that callers can check reachability.
    pub fn referenced_paths(&self) -> BTreeSet<PathBuf> {
        let d = &self.data;
        let mut s: BTreeSet<PathBuf> = [&d.train_manifest, &d.eval_manifest, &d.train_noise, &d.test_noise, &self.out_dir]
            .into_iter()
            .cloned()
            .collect();
        s.extend(d.train_source.iter().cloned());
        s.extend(d.eval_source.iter().cloned());
        s
    }
}
