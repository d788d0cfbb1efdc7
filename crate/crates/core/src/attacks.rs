//! Name-based registry over SAMA and the baselines.

use serde_json::{Map, Value};

use crate::baselines::{self, BaselineConfig, ShotPools, BASELINE_NAMES};
use crate::error::{Error, Result};
use crate::oracle::Oracle;
use crate::sama::{self, SamaConfig};
use crate::seed::SeedSpec;
use crate::types::{LabeledSample, MembershipScore, TokenSequence};

/// Every attack name, SAMA first.
pub const ATTACK_NAMES: [&str; 13] = [
    "sama",
    "loss",
    "zlib",
    "lowercase",
    "neighbor",
    "min_k",
    "min_k_pp",
    "recall",
    "con_recall",
    "bows",
    "ratio",
    "secmi",
    "pia",
];

#[derive(Clone, Debug, PartialEq)]
pub enum Attack {
    Sama(SamaConfig),
    Baseline { name: &'static str, config: BaselineConfig },
}

fn unknown(name: &str) -> Error {
    Error::Config(format!("unknown attack {name:?}; valid attacks: {}", ATTACK_NAMES.join(", ")))
}

impl Attack {
    pub fn with_defaults(name: &str) -> Result<Self> {
        if name == sama::ATTACK_NAME {
            return Ok(Attack::Sama(SamaConfig::default()));
        }
        let name = BASELINE_NAMES.iter().find(|n| **n == name).ok_or_else(|| unknown(name))?;
        Ok(Attack::Baseline {
            name,
            config: BaselineConfig::default(),
        })
    }

    /// Parses `"name"` or `{"name": ..., <config fields>}`.
    pub fn from_json(value: &Value) -> Result<Self> {
        let (name, rest) = match value {
            Value::String(s) => (s.as_str(), Map::new()),
            Value::Object(obj) => {
                let name = obj
                    .get("name")
                    .and_then(Value::as_str)
                    .ok_or_else(|| Error::Config("attack entry needs a string \"name\"".into()))?;
                let mut rest = obj.clone();
                rest.remove("name");
                (name, rest)
            }
            _ => return Err(Error::Config(format!("attack entry must be a name or object, got {value}"))),
        };
        let attack = match Self::with_defaults(name)? {
            Attack::Sama(_) => {
                let cfg: SamaConfig = serde_json::from_value(Value::Object(rest))
                    .map_err(|e| Error::Config(format!("attack {name}: {e}")))?;
                Attack::Sama(cfg)
            }
            Attack::Baseline { name, .. } => {
                let config: BaselineConfig = serde_json::from_value(Value::Object(rest))
                    .map_err(|e| Error::Config(format!("attack {name}: {e}")))?;
                Attack::Baseline { name, config }
            }
        };
        attack.validate()?;
        Ok(attack)
    }

    pub fn to_json(&self) -> Value {
        let mut v = match self {
            Attack::Sama(c) => serde_json::to_value(c),
            Attack::Baseline { config, .. } => serde_json::to_value(config),
        }
        .expect("configs serialize");
        if let Value::Object(obj) = &mut v {
            obj.insert("name".into(), Value::String(self.name().to_string()));
        }
        v
    }

    pub fn name(&self) -> &'static str {
        match self {
            Attack::Sama(_) => sama::ATTACK_NAME,
            Attack::Baseline { name, .. } => name,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Attack::Sama(c) => c.validate(),
            Attack::Baseline { config, .. } => config.validate(),
        }
    }

    /// Scored over the whole corpus at once rather than per sample.
    pub fn is_corpus_level(&self) -> bool {
        self.name() == "bows"
    }

    /// Loss queries issued per sample.
    pub fn planned_queries(&self) -> usize {
        match self {
            Attack::Sama(c) => c.query_budget(),
            Attack::Baseline { name, config } => {
                baselines::planned_queries(name, config).expect("registered baselines have budgets")
            }
        }
    }

    pub fn score_sample(
        &self,
        sample: &TokenSequence,
        oracle: &dyn Oracle,
        shots: &ShotPools,
        seeds: &SeedSpec,
    ) -> Result<MembershipScore> {
        let cfg = match self {
            Attack::Sama(c) => return sama::sama_score(sample, oracle, c, seeds),
            Attack::Baseline { config, .. } => config,
        };
        match self.name() {
            "loss" => baselines::loss_attack(sample, oracle, cfg, seeds),
            "zlib" => baselines::zlib_attack(sample, oracle, cfg, seeds),
            "lowercase" => baselines::lowercase_attack(sample, oracle, cfg, seeds),
            "neighbor" => baselines::neighbor_attack(sample, oracle, cfg, seeds),
            "min_k" => baselines::min_k_attack(sample, oracle, cfg, seeds),
            "min_k_pp" => baselines::min_k_pp_attack(sample, oracle, cfg, seeds),
            "recall" => baselines::recall_attack(sample, oracle, shots, cfg, seeds),
            "con_recall" => baselines::con_recall_attack(sample, oracle, shots, cfg, seeds),
            "ratio" => baselines::ratio_attack(sample, oracle, cfg, seeds),
            "secmi" => baselines::secmi_attack(sample, oracle, cfg, seeds),
            "pia" => baselines::pia_attack(sample, oracle, cfg, seeds),
            "bows" => Err(Error::invalid("bows scores a whole corpus; use score_corpus")),
            other => Err(unknown(other)),
        }
    }

    /// Corpus-level scoring; only meaningful for [`Attack::is_corpus_level`] attacks.
    pub fn score_corpus(&self, samples: &[LabeledSample], seeds: &SeedSpec) -> Result<Vec<MembershipScore>> {
        match self {
            Attack::Baseline { name: "bows", config } => {
                config.validate()?;
                baselines::bows_attack(samples, &config.bows, seeds)
            }
            _ => Err(Error::invalid(format!("{} is scored per sample", self.name()))),
        }
    }
}

/// One line per attack with its default budget, for help output.
pub fn describe_defaults() -> String {
    let b = BaselineConfig::default();
    let s = SamaConfig::default();
    let mut out = format!(
        "sama: T={} steps, alpha {}..{}, N={} subsets of m={}, R={} repetitions ({} queries)\n",
        s.schedule.steps,
        s.schedule.alpha_min,
        s.schedule.alpha_max,
        s.schedule.num_subsets,
        s.schedule.subset_size,
        s.mc_repetitions,
        s.query_budget()
    );
    let pct = |f: f64| format!("{:.0}%", 100.0 * f);
    for name in BASELINE_NAMES {
        let detail = match name {
            "loss" | "ratio" => format!("{} draws at {} masking", b.mc_samples, pct(b.mask_fraction)),
            "zlib" => format!("{} draws at {} masking, zlib level {}", b.mc_samples, pct(b.mask_fraction), b.zlib_level),
            "lowercase" => format!("{} draws at {} masking, original and lowercased", b.mc_samples, pct(b.mask_fraction)),
            "neighbor" => format!(
                "{} neighbors replacing {} of tokens, {} draws",
                b.neighbor.num_neighbors,
                pct(b.neighbor.perturb_fraction),
                b.mc_samples
            ),
            "min_k" | "min_k_pp" => format!(
                "{} draws at {} masking, lowest {} of tokens",
                b.mc_samples,
                pct(b.mask_fraction),
                pct(b.min_k_fraction)
            ),
            "recall" => format!("{} non-member shots, {} draws", b.recall_shots, b.mc_samples),
            "con_recall" => format!(
                "{} member and {} non-member shots, {} draws",
                b.recall_shots, b.recall_shots, b.mc_samples
            ),
            "bows" => format!(
                "TF-IDF (max {} terms, min df {}) + {} trees of depth {}, {}-fold CV",
                b.bows.max_features,
                pct(b.bows.min_df),
                b.bows.trees,
                b.bows.max_depth,
                b.bows.folds
            ),
            "secmi" => format!("{} masking ratios from 10% to 80%", b.secmi_ratios.len()),
            "pia" => format!("one {} content-seeded mask", pct(b.pia_mask_fraction)),
            _ => unreachable!(),
        };
        out.push_str(&format!(
            "{name}: {detail} ({} queries)\n",
            baselines::planned_queries(name, &b).unwrap_or(0)
        ));
    }
    out
}
