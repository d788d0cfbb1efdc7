//! End-to-end experiments: build the oracle, score every sample with every
//! attack, and write scores, metrics and ROC points.
//!
//! Work is spread over samples on a dedicated thread pool; results are merged
//! in a fixed order so output files do not depend on the number of workers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::metrics::{metrics_report, roc_curve, LabeledScores, MetricsReport};
use crate::attacks::Attack;
use crate::baselines::ShotPools;
use crate::error::{Error, Result};
use crate::io::{read_samples, read_shot_pools, write_scores};
use crate::oracle::remote::{RemoteConfig, RemoteOracle};
use crate::oracle::synthetic::{build_synthetic_world, merge_json, SyntheticWorldConfig};
use crate::oracle::{Backend, Oracle};
use crate::seed::{SeedSpec, DEFAULT_GLOBAL_SEED};
use crate::types::{LabeledSample, MembershipScore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub backend: Backend,
    /// Starting point for the synthetic world before `synthetic_world` overrides.
    #[serde(default)]
    pub preset: WorldPreset,
    /// Server base URL for the remote backend.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Overrides applied to the calibrated synthetic world.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub synthetic_world: Value,
    /// Overrides applied to the default remote client settings.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub remote: Value,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldPreset {
    /// The calibrated surrogate world.
    #[default]
    Calibrated,
    /// No membership signal and no domain effect.
    Null,
}

impl OracleSpec {
    pub fn synthetic() -> Self {
        Self {
            backend: Backend::Synthetic,
            preset: WorldPreset::Calibrated,
            url: None,
            synthetic_world: Value::Null,
            remote: Value::Null,
        }
    }

    pub fn world_config(&self) -> Result<SyntheticWorldConfig> {
        let base = match self.preset {
            WorldPreset::Calibrated => SyntheticWorldConfig::default(),
            WorldPreset::Null => SyntheticWorldConfig::null(),
        };
        match &self.synthetic_world {
            Value::Null => Ok(base),
            v => base.with_overrides(v),
        }
    }

    pub fn remote_config(&self) -> Result<RemoteConfig> {
        let mut base = serde_json::to_value(RemoteConfig::default())?;
        if !self.remote.is_null() {
            merge_json(&mut base, &self.remote);
        }
        let mut cfg: RemoteConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("oracle.remote: {e}")))?;
        if let Some(url) = &self.url {
            cfg.url = url.clone();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSource {
    /// Newline-delimited JSON samples file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Newline-delimited JSON shot-pool file for the context attacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<PathBuf>,
    /// Use the samples and shots of the synthetic world.
    #[serde(default)]
    pub synthetic: bool,
}

fn default_attacks() -> Vec<Value> {
    vec![Value::String("sama".into())]
}

fn default_seed() -> u64 {
    DEFAULT_GLOBAL_SEED
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub oracle: OracleSpec,
    pub samples: SampleSource,
    /// Attack names, or objects with a `name` and config overrides.
    #[serde(default = "default_attacks")]
    pub attacks: Vec<Value>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; all available cores when absent. Does not affect results.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    /// A synthetic-world experiment over the given attacks.
    pub fn synthetic(attacks: &[&str], seed: u64) -> Self {
        Self {
            oracle: OracleSpec::synthetic(),
            samples: SampleSource {
                synthetic: true,
                ..SampleSource::default()
            },
            attacks: attacks.iter().map(|a| Value::String(a.to_string())).collect(),
            seed,
            output_dir: default_output_dir(),
            workers: None,
        }
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.samples.path, self.samples.synthetic) {
            (Some(_), true) => return Err(Error::Config("samples: give either path or synthetic, not both".into())),
            (None, false) => return Err(Error::Config("samples: need a path or synthetic = true".into())),
            _ => {}
        }
        if self.samples.synthetic && self.oracle.backend != Backend::Synthetic {
            return Err(Error::Config("samples.synthetic requires the synthetic oracle backend".into()));
        }
        if self.samples.synthetic && self.samples.shots.is_some() {
            return Err(Error::Config("samples.shots cannot be combined with synthetic samples".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::Config("no attacks selected".into()));
        }
        match self.oracle.backend {
            Backend::Synthetic => {
                self.oracle.world_config()?;
            }
            Backend::Remote => {
                self.oracle.remote_config()?;
            }
        }
        self.resolved_attacks()?;
        Ok(())
    }

    pub fn resolved_attacks(&self) -> Result<Vec<Attack>> {
        let attacks = self.attacks.iter().map(Attack::from_json).collect::<Result<Vec<_>>>()?;
        for (i, a) in attacks.iter().enumerate() {
            if attacks[..i].iter().any(|b| b.name() == a.name()) {
                return Err(Error::Config(format!("attack {} listed twice", a.name())));
            }
        }
        Ok(attacks)
    }

    /// Canonical form of everything that influences the scores.
    pub fn canonical(&self) -> Result<Value> {
        let oracle = match self.oracle.backend {
            Backend::Synthetic => serde_json::json!({
                "backend": "synthetic",
                "synthetic_world": serde_json::to_value(self.oracle.world_config()?)?,
            }),
            Backend::Remote => serde_json::json!({
                "backend": "remote",
                "url": self.oracle.remote_config()?.url,
            }),
        };
        Ok(serde_json::json!({
            "oracle": oracle,
            "samples": serde_json::to_value(&self.samples)?,
            "attacks": self.resolved_attacks()?.iter().map(Attack::to_json).collect::<Vec<_>>(),
            "seed": self.seed,
        }))
    }

    /// Short hex digest of [`ExperimentConfig::canonical`]. Worker count and
    /// output location are excluded.
    pub fn digest(&self) -> Result<String> {
        Ok(bytes_digest(&serde_json::to_vec(&self.canonical()?)?))
    }
}

/// Short hex SHA-256 digest.
pub fn bytes_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets `key` (dot-separated path) in a JSON object. `raw` is parsed as JSON
/// when possible and kept as a string otherwise. Inside a list, a path part
/// selects an entry by index or by attack name, so `attacks.sama.mc_repetitions`
/// addresses the `sama` entry of `attacks`.
pub fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let bad = |i: usize, what: &str| Error::Config(format!("override {key:?}: {} {what}", parts[..i].join(".")));
    let mut node = root;
    let last = parts.len() - 1;
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(obj) if i == last => {
                obj.insert(part.to_string(), value);
                return Ok(());
            }
            Value::Object(obj) => obj.entry(part.to_string()).or_insert(Value::Null),
            Value::Array(items) => {
                let idx = match part.parse::<usize>() {
                    Ok(n) if n < items.len() => n,
                    Ok(_) => return Err(bad(i, "index out of range")),
                    Err(_) => items
                        .iter()
                        .position(|v| v.as_str() == Some(part) || v.get("name").and_then(Value::as_str) == Some(part))
                        .ok_or_else(|| bad(i, &format!("has no entry named {part:?}")))?,
                };
                let entry = &mut items[idx];
                if i == last {
                    *entry = value;
                    return Ok(());
                }
                if let Value::String(name) = entry {
                    *entry = serde_json::json!({ "name": name.clone() });
                }
                entry
            }
            _ => return Err(bad(i, "is not an object")),
        };
    }
    unreachable!("split yields at least one part")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample_id: String,
    pub attack: String,
    pub error: String,
}

/// A resolved experiment ready to run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub attacks: Vec<Attack>,
    pub oracle: Box<dyn Oracle>,
    pub samples: Vec<LabeledSample>,
    pub shots: ShotPools,
    pub digest: String,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let attacks = config.resolved_attacks()?;
        let digest = config.digest()?;
        let (oracle, mut samples, mut shots): (Box<dyn Oracle>, Vec<LabeledSample>, ShotPools) =
            match config.oracle.backend {
                Backend::Synthetic => {
                    let world = build_synthetic_world(&config.oracle.world_config()?, config.seed)?;
                    let shots = ShotPools {
                        member: world.member_shots,
                        nonmember: world.nonmember_shots,
                    };
                    (Box::new(world.oracle), world.samples, shots)
                }
                Backend::Remote => {
                    let oracle = RemoteOracle::new(config.oracle.remote_config()?)?;
                    (Box::new(oracle), Vec::new(), ShotPools::default())
                }
            };
        if let Some(path) = &config.samples.path {
            samples = read_samples(path, Some(oracle.as_ref()))?;
            shots = match &config.samples.shots {
                Some(p) => read_shot_pools(p, oracle.as_ref())?,
                None => ShotPools::default(),
            };
        }
        if samples.is_empty() {
            return Err(Error::Config("the sample set is empty".into()));
        }
        let vocab = oracle.info()?.vocab_size;
        for s in &samples {
            s.sequence.check_vocab(vocab)?;
        }
        Ok(Self {
            config,
            attacks,
            oracle,
            samples,
            shots,
            digest,
        })
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.config.workers {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn score_attack(&self, attack: &Attack, seeds: &SeedSpec) -> (Vec<MembershipScore>, Vec<SampleFailure>) {
        let fail = |id: &str, e: &Error| SampleFailure {
            sample_id: id.to_string(),
            attack: attack.name().to_string(),
            error: e.to_string(),
        };
        if attack.is_corpus_level() {
            return match attack.score_corpus(&self.samples, seeds) {
                Ok(scores) => (scores, Vec::new()),
                Err(e) => (
                    Vec::new(),
                    self.samples.iter().map(|s| fail(s.sequence.sample_id(), &e)).collect(),
                ),
            };
        }
        let results: Vec<std::result::Result<MembershipScore, SampleFailure>> = self
            .samples
            .par_iter()
            .map(|s| {
                attack
                    .score_sample(&s.sequence, self.oracle.as_ref(), &self.shots, seeds)
                    .map(|mut r| {
                        r.label = s.label;
                        r
                    })
                    .map_err(|e| fail(s.sequence.sample_id(), &e))
            })
            .collect();
        let mut scores = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for r in results {
            match r {
                Ok(s) => scores.push(s),
                Err(f) => failures.push(f),
            }
        }
        (scores, failures)
    }

    pub fn run(&self) -> Result<ExperimentOutcome> {
        let seeds = SeedSpec::new(self.config.seed);
        let pool = self.pool()?;
        let mut scores = Vec::new();
        let mut failures = Vec::new();
        for attack in &self.attacks {
            log::info!("scoring {} samples with {}", self.samples.len(), attack.name());
            let (s, f) = pool.install(|| self.score_attack(attack, &seeds));
            for failure in &f {
                log::warn!("{} failed on {}: {}", failure.attack, failure.sample_id, failure.error);
            }
            scores.extend(s);
            failures.extend(f);
        }
        let order = |name: &str| self.attacks.iter().position(|a| a.name() == name);
        scores.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(order(&a.attack).cmp(&order(&b.attack))));
        failures.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(order(&a.attack).cmp(&order(&b.attack))));
        let names: Vec<&str> = self.attacks.iter().map(Attack::name).collect();
        let reports = reports_for(&scores, &names, &failures, &self.digest, self.config.seed)?;
        Ok(ExperimentOutcome {
            digest: self.digest.clone(),
            scores,
            reports,
            failures,
        })
    }
}

/// One report per attack that has scores for both classes.
pub fn reports_for(
    scores: &[MembershipScore],
    attacks: &[&str],
    failures: &[SampleFailure],
    digest: &str,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    let mut reports = Vec::new();
    for &name in attacks {
        let ls = LabeledScores::from_scores(scores.iter().filter(|s| s.attack == name));
        if ls.members.is_empty() || ls.nonmembers.is_empty() {
            log::warn!("{name}: no metrics without both members and non-members");
            continue;
        }
        let mut r = metrics_report(name, &ls, digest, seed)?;
        r.failed_samples = failures.iter().filter(|f| f.attack == name).count();
        reports.push(r);
    }
    Ok(reports)
}

/// Attack names in order of first appearance.
pub fn attack_order(scores: &[MembershipScore]) -> Vec<&str> {
    let mut names: Vec<&str> = Vec::new();
    for s in scores {
        if !names.contains(&s.attack.as_str()) {
            names.push(&s.attack);
        }
    }
    names
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub digest: String,
    /// Sorted by sample id, then by attack order.
    pub scores: Vec<MembershipScore>,
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<SampleFailure>,
}

impl ExperimentOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    /// Writes `scores.csv`, `metrics.json`, `roc_<attack>.csv` and, when
    /// anything failed, `failures.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_scores(&dir.join("scores.csv"), &self.scores)?;
        write_metrics(dir, &self.scores, &self.reports)?;
        let failures = dir.join("failures.csv");
        if self.failures.is_empty() {
            if failures.exists() {
                std::fs::remove_file(&failures).map_err(|e| Error::io(&failures, e))?;
            }
        } else {
            let mut w = csv::Writer::from_path(&failures).map_err(|e| Error::Format(e.to_string()))?;
            for f in &self.failures {
                w.serialize(f).map_err(|e| Error::Format(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&failures, e))?;
        }
        Ok(())
    }
}

/// Writes `metrics.json` and one ROC file per reported attack.
pub fn write_metrics(dir: &Path, scores: &[MembershipScore], reports: &[MetricsReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.json");
    let mut json = serde_json::to_string_pretty(reports)?;
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for r in reports {
        let curve = roc_curve(&LabeledScores::from_scores(scores.iter().filter(|s| s.attack == r.attack)))?;
        let path = dir.join(format!("roc_{}.csv", r.attack));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format(e.to_string()))?;
        for p in &curve.points {
            w.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One row per attack: AUC and TPR at each reported FPR.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<12} {:>7}", "attack", "AUC");
    if let Some(r) = reports.first() {
        for t in &r.tpr_at {
            let _ = write!(out, " {:>11}", format!("TPR@{}%", t.fpr * 100.0));
        }
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<12} {:>7.4}", r.attack, r.auc);
        for t in &r.tpr_at {
            let mark = if t.warning.is_some() { "*" } else { "" };
            let _ = write!(out, " {:>11}", format!("{:.4}{mark}", t.tpr));
        }
        out.push('\n');
    }
    if reports.iter().any(|r| r.tpr_at.iter().any(|t| t.warning.is_some())) {
        out.push_str("* rests on at most one non-member score\n");
    }
    out
}

/// Prepares, runs and writes an experiment.
pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentOutcome> {
    let dir = config.output_dir.clone();
    let outcome = Experiment::prepare(config)?.run()?;
    outcome.write(&dir)?;
    Ok(outcome)
}
