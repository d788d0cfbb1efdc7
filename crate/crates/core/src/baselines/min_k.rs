use std::collections::BTreeMap;

use super::{mc_mask, score, BaselineConfig};
use crate::error::{Error, OracleResultExt, Result};
use crate::oracle::{LossQuery, ModelRole, Oracle};
use crate::seed::SeedSpec;
use crate::types::{MembershipScore, TokenSequence, MAX_SEQUENCE_TOKENS};

/// Added to probabilities before taking logarithms.
pub const MIN_K_PP_EPSILON: f64 = 1e-12;

/// `ceil(fraction * n)`, tolerant of representation error, and at least 1.
fn k_smallest(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).clamp(1, n.max(1))
}

fn sum_smallest(mut values: Vec<f64>, fraction: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = k_smallest(values.len(), fraction);
    values[..k].iter().sum()
}

/// Sum of the smallest `fraction` of per-token averaged probabilities.
pub fn min_k_from_probabilities(probs: &[f64], fraction: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::invalid("min_k: no token was ever masked"));
    }
    Ok(sum_smallest(probs.to_vec(), fraction))
}

/// Sum of the most negative `fraction` of per-token log-probabilities.
pub fn min_k_pp_from_log_probabilities(log_probs: &[f64], fraction: f64) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::invalid("min_k_pp: no token was ever masked"));
    }
    Ok(sum_smallest(log_probs.to_vec(), fraction))
}

/// Per-position true-token probability averaged over the draws that masked it.
///
/// Positions never masked are absent.
fn averaged_probabilities<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
    purpose: &str,
) -> Result<Vec<f64>> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for d in 0..cfg.mc_samples {
        let mask = mc_mask(sample, cfg.mask_fraction, seeds, purpose, d)?;
        let lv = oracle
            .position_losses(&LossQuery::masked(sample.tokens(), &mask), ModelRole::Target)
            .context(|| format!("{purpose}: sample {:?}, draw {d}", sample.sample_id()))?;
        for (p, loss) in lv.iter() {
            let e = acc.entry(p).or_insert((0.0, 0));
            e.0 += (-loss).exp();
            e.1 += 1;
        }
    }
    Ok(acc.values().map(|(sum, n)| sum / *n as f64).collect())
}

/// Negated sum of the lowest averaged token probabilities.
///
/// Follows the convention that a lower raw sum indicates membership.
pub fn min_k_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let probs = averaged_probabilities(&sample, oracle, cfg, seeds, "min_k")?;
    let raw = min_k_from_probabilities(&probs, cfg.min_k_fraction)?;
    Ok(score(&sample, "min_k", -raw))
}

/// Negated sum of the most negative `log(p + eps)` values.
pub fn min_k_pp_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let probs = averaged_probabilities(&sample, oracle, cfg, seeds, "min_k")?;
    let logs: Vec<f64> = probs.iter().map(|p| (p + MIN_K_PP_EPSILON).ln()).collect();
    let raw = min_k_pp_from_log_probabilities(&logs, cfg.min_k_fraction)?;
    Ok(score(&sample, "min_k_pp", -raw))
}

#[cfg(test)]
mod tests {
    use super::super::testing::{constant, FnOracle};
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn min_k_hand_example() {
        let raw = min_k_from_probabilities(&[0.1, 0.5, 0.9, 0.2, 0.8], 0.2).unwrap();
        assert!((raw - 0.1).abs() < 1e-12);
        // 20% of 10 is exactly 2 despite 0.2 * 10 rounding above 2.
        let ten: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert!((min_k_from_probabilities(&ten, 0.2).unwrap() - 0.3).abs() < 1e-12);
        assert!(min_k_from_probabilities(&[], 0.2).is_err());
    }

    #[test]
    fn uniform_probabilities() {
        let p = 0.37;
        for n in [1usize, 4, 5, 11, 100] {
            let raw = min_k_from_probabilities(&vec![p; n], 0.2).unwrap();
            assert!((raw - p * k_smallest(n, 0.2) as f64).abs() < 1e-12);
        }
        assert_eq!(k_smallest(11, 0.2), 3);
        assert_eq!(k_smallest(3, 0.2), 1);
    }

    #[test]
    fn min_k_pp_hand_example() {
        let raw = min_k_pp_from_log_probabilities(&[-2.3, -0.7, -0.1], 0.2).unwrap();
        assert!((-raw - 2.3).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_stays_finite() {
        // Loss of 1000 nats underflows exp() to exactly zero.
        let oracle = FnOracle(|_: &LossQuery, _: ModelRole, p: usize| if p == 0 { 1000.0 } else { 1.0 });
        let s = TokenSequence::new("x", (1..=40).collect()).unwrap();
        let cfg = BaselineConfig {
            mask_fraction: 0.9,
            ..BaselineConfig::default()
        };
        let r = min_k_pp_attack(&s, &oracle, &cfg, &SeedSpec::default()).unwrap();
        assert!(r.score.is_finite() && r.score > 0.0);
    }

    #[test]
    fn constant_oracle_score() {
        let s = TokenSequence::new("x", (1..=100).collect()).unwrap();
        let cfg = BaselineConfig::default();
        let r = min_k_attack(&s, &constant(0.5), &cfg, &SeedSpec::default()).unwrap();
        let masked_ever = r.score / -(-0.5f64).exp();
        // Score is -(k * p) for some k consistent with at least one masked token.
        assert!(masked_ever >= 1.0 && (masked_ever - masked_ever.round()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn pp_and_plain_rankings_agree(
            a in proptest::collection::vec(0.01f64..1.0, 1..40),
            b in proptest::collection::vec(0.01f64..1.0, 1..40),
        ) {
            // Same k for both samples keeps the comparison meaningful.
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let ka = min_k_from_probabilities(a, 0.2).unwrap();
            let kb = min_k_from_probabilities(b, 0.2).unwrap();
            let la: Vec<f64> = a.iter().map(|p| (p + MIN_K_PP_EPSILON).ln()).collect();
            let lb: Vec<f64> = b.iter().map(|p| (p + MIN_K_PP_EPSILON).ln()).collect();
            let pa = min_k_pp_from_log_probabilities(&la, 0.2).unwrap();
            let pb = min_k_pp_from_log_probabilities(&lb, 0.2).unwrap();
            // With a single selected token both reduce to monotone maps of the same value.
            if k_smallest(n, 0.2) == 1 {
                prop_assert_eq!(ka < kb, pa < pb);
            }
        }
    }
}
