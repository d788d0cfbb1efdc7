//! Reference attacks, all oriented so that a higher score means "more likely member".
//!
//! Each oracle-querying attack issues a fixed number of loss queries that
//! depends only on its configuration; see [`planned_queries`].

mod bows;
mod forest;
mod likelihood;
mod min_k;
mod recall;
mod diffusion;

pub use bows::{bows_attack, tfidf_matrix, BowsConfig, TfIdf};
pub use forest::{ForestConfig, RandomForest};
pub use diffusion::{pia_attack, secmi_attack, secmi_combine};
pub use likelihood::{
    lowercase_attack, loss_attack, neighbor_attack, perturb, ratio_attack, zlib_attack, zlib_compressed_len,
};
pub use min_k::{min_k_attack, min_k_from_probabilities, min_k_pp_attack, min_k_pp_from_log_probabilities, MIN_K_PP_EPSILON};
pub use recall::{con_recall_attack, recall_attack, ShotPools};

use serde::{Deserialize, Serialize};

use crate::error::{Error, OracleResultExt, Result};
use crate::oracle::{LossQuery, ModelRole, Oracle};
use crate::schedule::{mask_count, sample_mask};
use crate::seed::{derive_seed, fnv1a64, SeedSpec};
use crate::types::{MaskConfiguration, MembershipScore, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeighborConfig {
    pub num_neighbors: usize,
    pub perturb_fraction: f64,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        Self {
            num_neighbors: 8,
            perturb_fraction: 0.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub mc_samples: usize,
    pub mask_fraction: f64,
    pub min_k_fraction: f64,
    pub zlib_level: u32,
    pub recall_shots: usize,
    pub secmi_ratios: Vec<f64>,
    pub pia_mask_fraction: f64,
    /// Largest allowed relative gap between the average lengths of the two prefix pools.
    pub prefix_length_tolerance: f64,
    pub bows: BowsConfig,
    pub neighbor: NeighborConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            mc_samples: 16,
            mask_fraction: 0.15,
            min_k_fraction: 0.20,
            zlib_level: 6,
            recall_shots: 7,
            secmi_ratios: (0..5).map(|s| 0.10 + 0.70 * s as f64 / 4.0).collect(),
            pia_mask_fraction: 0.30,
            prefix_length_tolerance: 0.10,
            bows: BowsConfig::default(),
            neighbor: NeighborConfig::default(),
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        open_unit("mask_fraction", self.mask_fraction)?;
        open_unit("min_k_fraction", self.min_k_fraction)?;
        open_unit("pia_mask_fraction", self.pia_mask_fraction)?;
        for &r in &self.secmi_ratios {
            open_unit("secmi_ratios[]", r)?;
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        if self.secmi_ratios.is_empty() {
            return Err(Error::Config("secmi_ratios must not be empty".into()));
        }
        if self.zlib_level > 9 {
            return Err(Error::Config(format!("zlib_level {} is outside 0..=9", self.zlib_level)));
        }
        if self.recall_shots == 0 {
            return Err(Error::Config("recall_shots must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.neighbor.perturb_fraction) || self.neighbor.num_neighbors == 0 {
            return Err(Error::Config(
                "neighbor.perturb_fraction must lie in [0, 1) and num_neighbors be >= 1".into(),
            ));
        }
        if !(self.prefix_length_tolerance >= 0.0) {
            return Err(Error::Config("prefix_length_tolerance must be non-negative".into()));
        }
        self.bows.validate()
    }
}

/// Every baseline, in reporting order.
pub const BASELINE_NAMES: [&str; 12] = [
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

/// Loss queries issued per sample by a baseline (tokenization calls excluded).
pub fn planned_queries(name: &str, cfg: &BaselineConfig) -> Option<usize> {
    let d = cfg.mc_samples;
    Some(match name {
        "loss" | "zlib" | "min_k" | "min_k_pp" => d,
        "lowercase" | "neighbor" | "recall" | "ratio" => 2 * d,
        "con_recall" => 3 * d,
        "bows" => 0,
        "secmi" => cfg.secmi_ratios.len(),
        "pia" => 2,
        _ => return None,
    })
}

pub(crate) fn score(sample: &TokenSequence, attack: &str, value: f64) -> MembershipScore {
    MembershipScore {
        sample_id: sample.sample_id().to_string(),
        attack: attack.to_string(),
        score: value,
        label: None,
    }
}

/// Seed derived from content rather than from the global seed.
pub(crate) fn content_seed(content: &[u8], purpose: &str, step: u64) -> u64 {
    derive_seed(fnv1a64(content), "", purpose, 0, step)
}

pub(crate) fn token_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
}

/// The `d`-th Monte Carlo mask at `fraction` density.
pub(crate) fn mc_mask(
    sample: &TokenSequence,
    fraction: f64,
    seeds: &SeedSpec,
    purpose: &str,
    draw: usize,
) -> Result<MaskConfiguration> {
    let len = sample.len();
    let seed = seeds.derive(sample.sample_id(), purpose, draw as u64, 0);
    sample_mask(len, mask_count(len, fraction), seed).map_err(|e| Error::invalid(e.to_string()))
}

/// Mean loss over the masked positions of one forward pass.
pub(crate) fn masked_mean_loss<O: Oracle + ?Sized>(
    oracle: &O,
    tokens: &[u32],
    mask: &MaskConfiguration,
    role: ModelRole,
    context: impl Fn() -> String,
) -> Result<f64> {
    let lv = oracle
        .position_losses(&LossQuery::masked(tokens, mask), role)
        .context(&context)?;
    lv.mean()
        .ok_or_else(|| Error::Format(format!("oracle returned no losses ({})", context())))
}

pub(crate) fn ensure_finite(attack: &str, sample: &TokenSequence, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::invalid(format!(
            "{attack}: non-finite score {v} for sample {:?}",
            sample.sample_id()
        )))
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Hand-built oracles for baseline tests.

    use std::sync::Mutex;

    use crate::oracle::tokenizer::WhitespaceTokenizer;
    use crate::oracle::{Backend, LossQuery, ModelRole, Oracle, OracleError, OracleInfo};
    use crate::types::LossVector;

    pub fn info() -> OracleInfo {
        OracleInfo {
            vocab_size: 4096,
            mask_token_id: 0,
            max_sequence_length: 512,
            models: vec![ModelRole::Target, ModelRole::Reference],
            backend: Backend::Synthetic,
        }
    }

    /// Loss computed by a closure of `(query, role, position)`.
    pub struct FnOracle<F>(pub F);

    impl<F> Oracle for FnOracle<F>
    where
        F: Fn(&LossQuery, ModelRole, usize) -> f64 + Send + Sync,
    {
        fn info(&self) -> Result<OracleInfo, OracleError> {
            Ok(info())
        }

        fn tokenize(&self, text: &str) -> Result<Vec<u32>, OracleError> {
            let t = WhitespaceTokenizer::default().tokenize(text);
            if t.is_empty() {
                Err(OracleError::EmptyTokenization)
            } else {
                Ok(t)
            }
        }

        fn position_losses(&self, q: &LossQuery, role: ModelRole) -> Result<LossVector, OracleError> {
            q.validate(&self.info()?)?;
            let losses = q.eval.iter().map(|&p| (self.0)(q, role, p)).collect();
            LossVector::new(q.eval.clone(), losses).map_err(|e| OracleError::InvalidQuery(e.to_string()))
        }
    }

    pub fn constant(c: f64) -> FnOracle<impl Fn(&LossQuery, ModelRole, usize) -> f64 + Send + Sync> {
        FnOracle(move |_: &LossQuery, _: ModelRole, _: usize| c)
    }

    /// Records every query, for inspecting what an attack asked for.
    pub struct Recorder<O> {
        pub inner: O,
        pub log: Mutex<Vec<(LossQuery, ModelRole)>>,
    }

    impl<O: Oracle> Recorder<O> {
        pub fn new(inner: O) -> Self {
            Self {
                inner,
                log: Mutex::new(Vec::new()),
            }
        }
    }

    impl<O: Oracle> Oracle for Recorder<O> {
        fn info(&self) -> Result<OracleInfo, OracleError> {
            self.inner.info()
        }
        fn tokenize(&self, text: &str) -> Result<Vec<u32>, OracleError> {
            self.inner.tokenize(text)
        }
        fn position_losses(&self, q: &LossQuery, role: ModelRole) -> Result<LossVector, OracleError> {
            self.log.lock().unwrap().push((q.clone(), role));
            self.inner.position_losses(q, role)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_documented_values() {
        let c = BaselineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.mc_samples, 16);
        let expected = [0.10, 0.275, 0.45, 0.625, 0.80];
        for (a, b) in c.secmi_ratios.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c.bows.max_features, 5000);
    }

    #[test]
    fn invalid_config_rejected() {
        let c = BaselineConfig {
            mask_fraction: 0.0,
            ..BaselineConfig::default()
        };
        assert!(c.validate().is_err());
        let c = BaselineConfig {
            mc_samples: 0,
            ..BaselineConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn budgets_are_defined_for_every_baseline() {
        let c = BaselineConfig::default();
        for name in BASELINE_NAMES {
            assert!(planned_queries(name, &c).is_some(), "{name}");
        }
        assert_eq!(planned_queries("bows", &c), Some(0));
        assert_eq!(planned_queries("secmi", &c), Some(5));
        assert_eq!(planned_queries("nope", &c), None);
    }
}
