//! Progressive masking schedule and probe sampling.
//!
//! Densities rise linearly from `alpha_min` at step 1 to `alpha_max` at step
//! `T`; step `t` masks `ceil(L * alpha_t)` positions drawn uniformly without
//! replacement, and `N` subsets of `min(m, k_t)` masked positions are drawn
//! independently from each mask.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from_seed;
use crate::types::MaskConfiguration;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("step {step} outside 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("cannot mask {k} of {len} positions")]
    TooManyMasked { k: usize, len: usize },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub subset_size: usize,
    pub num_subsets: usize,
    /// Grow each step's mask from the previous one instead of sampling it afresh.
    pub accumulate: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            alpha_min: 0.05,
            alpha_max: 0.50,
            subset_size: 10,
            num_subsets: 128,
            accumulate: false,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: &str| Err(ScheduleError::Invalid(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.subset_size == 0 || self.num_subsets == 0 {
            return bad("subset_size and num_subsets must be >= 1");
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < 1.0) {
            return bad("alpha_min must lie in (0, 1)");
        }
        if !(self.alpha_max > 0.0 && self.alpha_max <= 1.0) {
            return bad("alpha_max must lie in (0, 1]");
        }
        if self.alpha_min > self.alpha_max {
            return bad("alpha_min must not exceed alpha_max");
        }
        Ok(())
    }
}

/// Masking density at 1-based step `t`. A single-step schedule uses `alpha_min`.
pub fn mask_density(t: usize, cfg: &ScheduleConfig) -> Result<f64, ScheduleError> {
    if t == 0 || t > cfg.steps {
        return Err(ScheduleError::StepOutOfRange {
            step: t,
            steps: cfg.steps,
        });
    }
    if cfg.steps == 1 {
        return Ok(cfg.alpha_min);
    }
    let frac = (t - 1) as f64 / (cfg.steps - 1) as f64;
    Ok(cfg.alpha_min + frac * (cfg.alpha_max - cfg.alpha_min))
}

/// `ceil(L * alpha)`, clamped to `1..=L`.
///
/// Products within 1e-9 of an integer are treated as that integer so that
/// rounding noise in `alpha` cannot add a position.
pub fn mask_count(len: usize, alpha: f64) -> usize {
    let raw = len as f64 * alpha;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() < 1e-9 {
        nearest
    } else {
        raw.ceil()
    };
    (k as usize).clamp(1, len.max(1))
}

/// `k` distinct positions of `0..len`, uniformly without replacement.
pub fn sample_mask(len: usize, k: usize, seed: u64) -> Result<MaskConfiguration, ScheduleError> {
    if k == 0 || k > len {
        return Err(ScheduleError::TooManyMasked { k, len });
    }
    let mut rng = rng_from_seed(seed);
    let positions = index::sample(&mut rng, len, k).into_vec();
    Ok(MaskConfiguration::new(positions, len).expect("sampled positions are in range"))
}

/// Extends `previous` with fresh positions until it holds `k` of them.
pub fn grow_mask(
    previous: &MaskConfiguration,
    k: usize,
    seed: u64,
) -> Result<MaskConfiguration, ScheduleError> {
    let len = previous.sequence_length();
    if k > len {
        return Err(ScheduleError::TooManyMasked { k, len });
    }
    if k <= previous.len() {
        return Ok(previous.clone());
    }
    let free: Vec<usize> = (0..len).filter(|p| !previous.contains(*p)).collect();
    let mut rng = rng_from_seed(seed);
    let mut positions = previous.positions().to_vec();
    positions.extend(
        index::sample(&mut rng, free.len(), k - previous.len())
            .into_iter()
            .map(|i| free[i]),
    );
    Ok(MaskConfiguration::new(positions, len).expect("grown positions are in range"))
}

/// `n` independent subsets of `min(m, |mask|)` masked positions each, sorted.
pub fn sample_subsets(mask: &MaskConfiguration, m: usize, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let pool = mask.positions();
    let size = m.min(pool.len());
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let mut subset: Vec<usize> = index::sample(&mut rng, pool.len(), size)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            subset.sort_unstable();
            subset
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(steps: usize) -> ScheduleConfig {
        ScheduleConfig {
            steps,
            ..ScheduleConfig::default()
        }
    }

    #[test]
    fn density_endpoints_and_second_step() {
        let c = cfg(16);
        assert_eq!(mask_density(1, &c).unwrap(), 0.05);
        assert_eq!(mask_density(16, &c).unwrap(), 0.50);
        // 0.05 + (1/15) * 0.45
        assert!((mask_density(2, &c).unwrap() - 0.08).abs() < 1e-15);
        assert!(mask_density(0, &c).is_err());
        assert!(mask_density(17, &c).is_err());
    }

    #[test]
    fn single_step_uses_alpha_min() {
        assert_eq!(mask_density(1, &cfg(1)).unwrap(), 0.05);
    }

    #[test]
    fn mask_count_examples() {
        assert_eq!(mask_count(512, 0.05), 26);
        assert_eq!(mask_count(512, 0.50), 256);
        assert_eq!(mask_count(1, 0.05), 1);
        // 100 * 0.20000000000000004 must stay 20
        assert_eq!(mask_count(100, 0.1 + 0.1), 20);
        assert_eq!(mask_count(10, 1.0), 10);
    }

    #[test]
    fn full_mask_and_determinism() {
        let m = sample_mask(5, 5, 123).unwrap();
        assert_eq!(m.positions(), &[0, 1, 2, 3, 4]);
        assert_eq!(sample_mask(100, 10, 9).unwrap(), sample_mask(100, 10, 9).unwrap());
        assert!(sample_mask(3, 4, 0).is_err());
        assert!(sample_mask(3, 0, 0).is_err());
    }

    #[test]
    fn mask_inclusion_is_uniform() {
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for s in 0..draws {
            for &p in sample_mask(10, 3, s as u64).unwrap().positions() {
                counts[p] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.3).abs() < 0.01, "inclusion {freq}");
        }
    }

    #[test]
    fn subsets_clamp_to_small_masks() {
        let mask = MaskConfiguration::new(vec![1, 4, 7], 10).unwrap();
        let subsets = sample_subsets(&mask, 10, 2, 5);
        assert_eq!(subsets, vec![vec![1, 4, 7], vec![1, 4, 7]]);
    }

    #[test]
    fn subsets_are_contained_and_sized() {
        let mask = sample_mask(512, 26, 77).unwrap();
        let subsets = sample_subsets(&mask, 10, 128, 78);
        assert_eq!(subsets.len(), 128);
        for s in &subsets {
            assert_eq!(s.len(), 10);
            assert!(s.iter().all(|p| mask.contains(*p)));
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn subset_inclusion_is_uniform() {
        let mask = sample_mask(100, 26, 1).unwrap();
        let target = mask.positions()[3];
        let n = 100_000;
        let hits = sample_subsets(&mask, 10, n, 2)
            .iter()
            .filter(|s| s.contains(&target))
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 10.0 / 26.0).abs() < 0.01, "inclusion {freq}");
    }

    #[test]
    fn grow_mask_keeps_previous_positions() {
        let m1 = sample_mask(50, 5, 1).unwrap();
        let m2 = grow_mask(&m1, 12, 2).unwrap();
        assert_eq!(m2.len(), 12);
        assert!(m1.positions().iter().all(|p| m2.contains(*p)));
        assert_eq!(grow_mask(&m2, 3, 3).unwrap(), m2);
    }

    #[test]
    fn config_validation() {
        assert!(ScheduleConfig::default().validate().is_ok());
        let mut c = ScheduleConfig::default();
        c.alpha_min = 0.6;
        assert!(c.validate().is_err());
        c = ScheduleConfig::default();
        c.steps = 0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_monotone(steps in 1usize..64, lo in 0.01f64..0.5, width in 0.0f64..0.5, len in 1usize..600) {
            let c = ScheduleConfig { steps, alpha_min: lo, alpha_max: lo + width, ..ScheduleConfig::default() };
            let mut prev_alpha = 0.0;
            let mut prev_k = 0;
            for t in 1..=steps {
                let a = mask_density(t, &c).unwrap();
                prop_assert!(a >= prev_alpha);
                if width > 0.0 && t > 1 { prop_assert!(a > prev_alpha); }
                let k = mask_count(len, a);
                prop_assert!(k >= prev_k && k >= 1 && k <= len);
                prev_alpha = a;
                prev_k = k;
            }
        }
    }
}
