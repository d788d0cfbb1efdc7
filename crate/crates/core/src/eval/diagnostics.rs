//! Token-level loss-difference diagnostics.
//!
//! Each sample is masked `draws` times at a fixed density; every masked
//! position contributes one comparison `reference loss - target loss`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{distribution_stats, signal_strength, DistributionStats, TokenSignal, SIGNAL_STRENGTH_EPS};
use crate::error::{Error, OracleResultExt, Result};
use crate::oracle::synthetic::{CalibrationTargets, SyntheticWorld};
use crate::oracle::{LossQuery, ModelRole, Oracle};
use crate::schedule::{mask_count, sample_mask};
use crate::seed::SeedSpec;
use crate::types::{LabeledSample, TokenSequence, MAX_SEQUENCE_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Fraction of positions masked per configuration.
    pub density: f64,
    /// Configurations per sample.
    pub draws: usize,
    pub ccdf_points: usize,
    /// Rows in the signal-strength table.
    pub top_tokens: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            density: 0.15,
            draws: 16,
            ccdf_points: 40,
            top_tokens: 20,
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("diagnostics.density = {} must lie in (0, 1]", self.density)));
        }
        if self.draws == 0 {
            return Err(Error::Config("diagnostics.draws must be positive".into()));
        }
        Ok(())
    }
}

/// Per-position differences from one configuration, in position order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigurationDeltas {
    pub tokens: Vec<u32>,
    pub deltas: Vec<f64>,
}

impl ConfigurationDeltas {
    pub fn mean(&self) -> f64 {
        self.deltas.iter().sum::<f64>() / self.deltas.len() as f64
    }
}

/// Masks `sample` `draws` times at `density` and returns the differences of every draw.
pub fn configuration_deltas<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    density: f64,
    draws: usize,
    seeds: &SeedSpec,
) -> Result<Vec<ConfigurationDeltas>> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let len = sample.len();
    let id = sample.sample_id();
    (0..draws)
        .map(|d| {
            let seed = seeds.derive(id, "diagnostics/mask", d as u64, 0);
            let mask = sample_mask(len, mask_count(len, density), seed).map_err(|e| Error::invalid(e.to_string()))?;
            let q = LossQuery::masked(sample.tokens(), &mask);
            let ctx = || format!("diagnostics: sample {id:?}, draw {d}");
            let t = oracle.position_losses(&q, ModelRole::Target).context(ctx)?;
            let r = oracle.position_losses(&q, ModelRole::Reference).context(ctx)?;
            if t.positions() != mask.positions() || r.positions() != mask.positions() {
                return Err(Error::Format(format!("oracle returned positions other than the mask ({})", ctx())));
            }
            Ok(ConfigurationDeltas {
                tokens: mask.positions().iter().map(|&p| sample.tokens()[p]).collect(),
                deltas: r.losses().iter().zip(t.losses()).map(|(r, t)| r - t).collect(),
            })
        })
        .collect()
}

/// Monte Carlo estimate of the expected full-mask mean difference.
pub fn expected_loss_difference<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    density: f64,
    draws: usize,
    seeds: &SeedSpec,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::invalid("expected_loss_difference needs at least one draw"));
    }
    let per = configuration_deltas(sample, oracle, density, draws, seeds)?;
    Ok(per.iter().map(ConfigurationDeltas::mean).sum::<f64>() / draws as f64)
}

/// Differences pooled by class and by token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeltaPools {
    pub member: Vec<f64>,
    pub nonmember: Vec<f64>,
    pub member_by_token: BTreeMap<u32, Vec<f64>>,
    pub nonmember_by_token: BTreeMap<u32, Vec<f64>>,
    /// Across-configuration sd of the mean difference, one per sample.
    pub configuration_sd: Vec<f64>,
    /// Mean difference per sample, split by class.
    pub member_sample_means: Vec<f64>,
    pub nonmember_sample_means: Vec<f64>,
}

/// Collects differences over labeled samples. Unlabeled samples are skipped.
pub fn delta_pools<O: Oracle + ?Sized>(
    samples: &[LabeledSample],
    oracle: &O,
    cfg: &DiagnosticsConfig,
    seeds: &SeedSpec,
) -> Result<DeltaPools> {
    cfg.validate()?;
    let per_sample: Vec<(bool, Vec<ConfigurationDeltas>)> = samples
        .par_iter()
        .filter_map(|s| s.label.map(|l| (l.is_member(), s)))
        .map(|(member, s)| Ok((member, configuration_deltas(&s.sequence, oracle, cfg.density, cfg.draws, seeds)?)))
        .collect::<Result<_>>()?;

    let mut pools = DeltaPools::default();
    for (member, draws) in per_sample {
        let means: Vec<f64> = draws.iter().map(ConfigurationDeltas::mean).collect();
        if let Some(sd) = distribution_stats(&means).sd {
            pools.configuration_sd.push(sd);
        }
        let sample_mean = means.iter().sum::<f64>() / means.len() as f64;
        let (pool, by_token, sample_means) = if member {
            (&mut pools.member, &mut pools.member_by_token, &mut pools.member_sample_means)
        } else {
            (&mut pools.nonmember, &mut pools.nonmember_by_token, &mut pools.nonmember_sample_means)
        };
        sample_means.push(sample_mean);
        for d in draws {
            for (t, v) in d.tokens.into_iter().zip(d.deltas) {
                pool.push(v);
                by_token.entry(t).or_default().push(v);
            }
        }
    }
    Ok(pools)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub config: DiagnosticsConfig,
    pub member: DistributionStats,
    pub nonmember: DistributionStats,
    /// Mean over samples of the across-configuration sd.
    pub configuration_sd: Option<f64>,
    /// Mean per-sample member difference minus the non-member one.
    pub member_margin: Option<f64>,
    /// Tokens with the largest pooled mean difference.
    pub top_tokens: Vec<TokenSignal>,
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn with_ccdf(values: &[f64], points: usize) -> DistributionStats {
    let mut s = distribution_stats(values);
    s.ccdf = super::stats::ccdf(values, points);
    s
}

impl Diagnostics {
    pub fn from_pools(pools: &DeltaPools, cfg: &DiagnosticsConfig) -> Self {
        let mut top = signal_strength(&pools.member_by_token, &pools.nonmember_by_token);
        top.sort_by(|a, b| b.pooled_mean().total_cmp(&a.pooled_mean()).then(a.token.cmp(&b.token)));
        top.truncate(cfg.top_tokens);
        Self {
            config: cfg.clone(),
            member: with_ccdf(&pools.member, cfg.ccdf_points),
            nonmember: with_ccdf(&pools.nonmember, cfg.ccdf_points),
            configuration_sd: mean_of(&pools.configuration_sd),
            member_margin: mean_of(&pools.member_sample_means)
                .zip(mean_of(&pools.nonmember_sample_means))
                .map(|(m, n)| m - n),
            top_tokens: top,
        }
    }
}

/// Member over non-member mean difference, pooling every observation of the given tokens.
fn pooled_ratio<'a>(signals: impl Iterator<Item = &'a TokenSignal>) -> Option<f64> {
    let (mut m, mut mc, mut n, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for s in signals {
        m += s.member_mean * s.member_count as f64;
        mc += s.member_count;
        n += s.nonmember_mean * s.nonmember_count as f64;
        nc += s.nonmember_count;
    }
    if mc == 0 || nc == 0 {
        return None;
    }
    let (m, n) = (m / mc as f64, n / nc as f64);
    (n.abs() >= SIGNAL_STRENGTH_EPS).then(|| m / n)
}

/// Achieved statistics of a synthetic world next to its targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub targets: CalibrationTargets,
    pub diagnostics: Diagnostics,
    /// Pooled member/non-member mean ratio over domain tokens.
    pub domain_signal_strength: Option<f64>,
    /// Same ratio over the remaining tokens.
    pub instance_signal_strength: Option<f64>,
}

impl CalibrationReport {
    pub fn measure(world: &SyntheticWorld, cfg: &DiagnosticsConfig, seeds: &SeedSpec) -> Result<Self> {
        let pools = delta_pools(&world.samples, &world.oracle, cfg, seeds)?;
        let signals = signal_strength(&pools.member_by_token, &pools.nonmember_by_token);
        let (domain, instance): (Vec<&TokenSignal>, Vec<&TokenSignal>) =
            signals.iter().partition(|s| world.oracle.is_domain_token(s.token));
        Ok(Self {
            targets: world.config.calibration_targets.clone(),
            diagnostics: Diagnostics::from_pools(&pools, cfg),
            domain_signal_strength: pooled_ratio(domain.into_iter()),
            instance_signal_strength: pooled_ratio(instance.into_iter()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::testing::constant;
    use crate::oracle::synthetic::{build_synthetic_world, SyntheticWorldConfig};

    #[test]
    fn identical_models_give_zero() {
        let s = TokenSequence::new("x", (1..=60).collect()).unwrap();
        let v = expected_loss_difference(&s, &constant(2.0), 0.2, 5, &SeedSpec::default()).unwrap();
        assert_eq!(v, 0.0);
        assert!(expected_loss_difference(&s, &constant(2.0), 0.2, 0, &SeedSpec::default()).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SyntheticWorldConfig {
            num_members: 4,
            num_nonmembers: 4,
            ..SyntheticWorldConfig::default()
        };
        let w = build_synthetic_world(&cfg, 1).unwrap();
        let s = &w.samples[0].sequence;
        let a = expected_loss_difference(s, &w.oracle, 0.15, 20, &SeedSpec::new(3)).unwrap();
        let b = expected_loss_difference(s, &w.oracle, 0.15, 20, &SeedSpec::new(3)).unwrap();
        let c = expected_loss_difference(s, &w.oracle, 0.15, 20, &SeedSpec::new(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pools_split_by_label() {
        let cfg = SyntheticWorldConfig {
            num_members: 6,
            num_nonmembers: 4,
            ..SyntheticWorldConfig::default()
        };
        let w = build_synthetic_world(&cfg, 2).unwrap();
        let d = DiagnosticsConfig {
            draws: 3,
            ..DiagnosticsConfig::default()
        };
        let p = delta_pools(&w.samples, &w.oracle, &d, &SeedSpec::default()).unwrap();
        assert_eq!(p.member_sample_means.len(), 6);
        assert_eq!(p.nonmember_sample_means.len(), 4);
        assert_eq!(p.configuration_sd.len(), 10);
        let by_token: usize = p.member_by_token.values().map(Vec::len).sum();
        assert_eq!(by_token, p.member.len());
        assert!(DiagnosticsConfig { draws: 0, ..d }.validate().is_err());
    }
}
