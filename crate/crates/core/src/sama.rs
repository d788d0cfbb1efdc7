//! Subset-aggregated membership attack.
//!
//! For each of `T` progressively denser masks the target and reference models
//! are queried once each. `N` random subsets of `m` masked positions yield
//! localized loss differences, each reduced to the indicator `Δ > 0`. The
//! per-step fractions of positive subsets are combined with weights
//! proportional to `1/t`, and the result is averaged over `R` independent
//! repetitions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, OracleResultExt, Result};
use crate::oracle::{LossQuery, ModelRole, Oracle};
use crate::schedule::{self, ScheduleConfig};
use crate::seed::SeedSpec;
use crate::types::{EvidenceCollection, LossVector, MaskConfiguration, MembershipScore, StepEvidence, TokenSequence, MAX_SEQUENCE_TOKENS};

pub const ATTACK_NAME: &str = "sama";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamaConfig {
    pub schedule: ScheduleConfig,
    pub mc_repetitions: usize,
}

impl Default for SamaConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            mc_repetitions: 4,
        }
    }
}

impl SamaConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.mc_repetitions == 0 {
            return Err(Error::Config("mc_repetitions must be >= 1".into()));
        }
        Ok(())
    }

    /// Oracle calls per sample: one per model per step per repetition.
    pub fn query_budget(&self) -> usize {
        2 * self.schedule.steps * self.mc_repetitions
    }
}

/// Mean of `reference - target` over `subset`.
pub fn subset_difference(reference: &LossVector, target: &LossVector, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::invalid("subset must not be empty"));
    }
    let mut sum = 0.0;
    for &p in subset {
        let (r, t) = match (reference.get(p), target.get(p)) {
            (Some(r), Some(t)) => (r, t),
            _ => return Err(Error::invalid(format!("position {p} missing from a loss vector"))),
        };
        sum += r - t;
    }
    Ok(sum / subset.len() as f64)
}

/// Builds one step's evidence from per-position differences.
///
/// `positions[i]` carries difference `diffs[i]`; every subset position must
/// appear in `positions`.
pub fn step_evidence_from_differences(
    step: usize,
    density: f64,
    positions: &[usize],
    diffs: &[f64],
    subsets: &[Vec<usize>],
) -> Result<StepEvidence> {
    if positions.len() != diffs.len() {
        return Err(Error::invalid("positions and differences differ in length"));
    }
    let deltas = subsets
        .iter()
        .map(|subset| {
            if subset.is_empty() {
                return Err(Error::invalid("subset must not be empty"));
            }
            let mut sum = 0.0;
            for p in subset {
                let i = positions
                    .binary_search(p)
                    .map_err(|_| Error::invalid(format!("subset position {p} is not masked")))?;
                sum += diffs[i];
            }
            Ok(sum / subset.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StepEvidence {
        step,
        density,
        mask_count: positions.len(),
        deltas,
    })
}

/// Phase I: one repetition of progressive evidence collection (exactly `2T` oracle calls).
pub fn collect_evidence<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &SamaConfig,
    seeds: &SeedSpec,
    rep: usize,
) -> Result<EvidenceCollection> {
    cfg.validate()?;
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let len = sample.len();
    if len < 2 {
        return Err(Error::invalid(format!(
            "sample {:?} needs at least 2 tokens, has {len}",
            sample.sample_id()
        )));
    }
    let id = sample.sample_id();
    let sched = &cfg.schedule;
    let mut previous: Option<MaskConfiguration> = None;
    let mut steps = Vec::with_capacity(sched.steps);
    for t in 1..=sched.steps {
        let density = schedule::mask_density(t, sched).map_err(|e| Error::Config(e.to_string()))?;
        let k = schedule::mask_count(len, density);
        let mask_seed = seeds.derive(id, "sama/mask", rep as u64, t as u64);
        let mask = match (&previous, sched.accumulate) {
            (Some(prev), true) => schedule::grow_mask(prev, k, mask_seed),
            _ => schedule::sample_mask(len, k, mask_seed),
        }
        .map_err(|e| Error::invalid(e.to_string()))?;

        let query = LossQuery::masked(sample.tokens(), &mask);
        let ctx = || format!("sample {id:?}, repetition {rep}, step {t}");
        let target = oracle.position_losses(&query, ModelRole::Target).context(ctx)?;
        let reference = oracle.position_losses(&query, ModelRole::Reference).context(ctx)?;

        let diffs = mask
            .positions()
            .iter()
            .map(|&p| match (reference.get(p), target.get(p)) {
                (Some(r), Some(t)) => Ok(r - t),
                _ => Err(Error::Format(format!("oracle omitted masked position {p} ({})", ctx()))),
            })
            .collect::<Result<Vec<f64>>>()?;
        let subset_seed = seeds.derive(id, "sama/subset", rep as u64, t as u64);
        let subsets = schedule::sample_subsets(&mask, sched.subset_size, sched.num_subsets, subset_seed);
        steps.push(step_evidence_from_differences(t, density, mask.positions(), &diffs, &subsets)?);
        previous = Some(mask);
    }
    EvidenceCollection::new(id, steps)
}

/// Fraction of strictly positive differences; zero counts as negative.
pub fn sign_fraction(deltas: &[f64]) -> Result<f64> {
    if deltas.is_empty() {
        return Err(Error::invalid("sign fraction of an empty list"));
    }
    let positive = deltas.iter().filter(|d| **d > 0.0).count();
    Ok(positive as f64 / deltas.len() as f64)
}

/// Normalized inverse-step weights `(1/t) / H_T`.
pub fn inverse_weights(steps: usize) -> Vec<f64> {
    let harmonic: f64 = (1..=steps).map(|i| 1.0 / i as f64).sum();
    (1..=steps).map(|t| (1.0 / t as f64) / harmonic).collect()
}

/// Per-step sign fractions, in step order.
pub fn step_sign_fractions(evidence: &EvidenceCollection) -> Vec<f64> {
    evidence
        .steps
        .iter()
        .map(|s| sign_fraction(&s.deltas).expect("evidence steps are non-empty"))
        .collect()
}

/// Phase II: weighted sum of per-step sign fractions, summed in ascending step order.
pub fn aggregate_evidence(evidence: &EvidenceCollection) -> f64 {
    let weights = inverse_weights(evidence.steps.len());
    step_sign_fractions(evidence)
        .iter()
        .zip(&weights)
        .fold(0.0, |acc, (beta, w)| acc + w * beta)
}

/// Full attack: mean of `R` independent single-pass scores, in `[0, 1]`.
pub fn sama_score<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &SamaConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let mut total = 0.0;
    for rep in 0..cfg.mc_repetitions {
        total += aggregate_evidence(&collect_evidence(sample, oracle, cfg, seeds, rep)?);
    }
    Ok(MembershipScore {
        sample_id: sample.sample_id().to_string(),
        attack: ATTACK_NAME.to_string(),
        score: total / cfg.mc_repetitions as f64,
        label: None,
    })
}
