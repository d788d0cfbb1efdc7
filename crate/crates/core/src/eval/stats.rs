//! Moment summaries and per-token signal strength for loss-difference pools.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Below this magnitude a non-member mean makes the ratio meaningless.
pub const SIGNAL_STRENGTH_EPS: f64 = 1e-6;

/// Sample moments of a pool of values.
///
/// `skewness` is `g1 = m3 / m2^1.5`; `excess_kurtosis` is `g2 = m4 / m2^2 - 3`
/// (population central moments). Moments that are undefined for the pool
/// (too few values, or zero variance) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub count: usize,
    pub mean: Option<f64>,
    /// Uses the `n - 1` denominator.
    pub sd: Option<f64>,
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub ccdf: Vec<CcdfPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcdfPoint {
    pub value: f64,
    /// Fraction of the pool strictly greater than `value`.
    pub exceedance: f64,
}

pub fn distribution_stats(values: &[f64]) -> DistributionStats {
    let n = values.len();
    let mut stats = DistributionStats {
        count: n,
        mean: None,
        sd: None,
        skewness: None,
        excess_kurtosis: None,
        ccdf: ccdf(values, 24),
    };
    if n == 0 {
        return stats;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    stats.mean = Some(mean);
    if n < 2 {
        return stats;
    }
    if values.iter().all(|v| *v == values[0]) {
        stats.sd = Some(0.0);
        return stats;
    }
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    stats.sd = Some((m2 / (nf - 1.0)).sqrt());
    let (m2, m3, m4) = (m2 / nf, m3 / nf, m4 / nf);
    if m2 == 0.0 {
        return stats;
    }
    if n >= 3 {
        stats.skewness = Some(m3 / m2.powf(1.5));
    }
    if n >= 4 {
        stats.excess_kurtosis = Some(m4 / (m2 * m2) - 3.0);
    }
    stats
}

/// Complementary CDF sampled at log-spaced tail probabilities (1 down to `1/n`).
pub fn ccdf(values: &[f64], points: usize) -> Vec<CcdfPoint> {
    let n = values.len();
    if n == 0 || points == 0 {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let max_decades = (n as f64).log10();
    let mut out: Vec<CcdfPoint> = Vec::with_capacity(points);
    for i in 0..points {
        let frac = if points == 1 { 0.0 } else { i as f64 / (points - 1) as f64 };
        let p = 10f64.powf(-frac * max_decades);
        let rank = ((1.0 - p) * n as f64).floor() as usize;
        let value = sorted[rank.min(n - 1)];
        if out.last().is_some_and(|last| last.value == value) {
            continue;
        }
        let above = n - sorted.partition_point(|v| *v <= value);
        out.push(CcdfPoint {
            value,
            exceedance: above as f64 / n as f64,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSignal {
    pub token: u32,
    pub member_mean: f64,
    pub nonmember_mean: f64,
    pub member_count: usize,
    pub nonmember_count: usize,
    /// Member mean over non-member mean; `None` when the denominator is near zero.
    pub ratio: Option<f64>,
}

impl TokenSignal {
    pub fn pooled_mean(&self) -> f64 {
        let total = (self.member_count + self.nonmember_count) as f64;
        (self.member_mean * self.member_count as f64 + self.nonmember_mean * self.nonmember_count as f64) / total
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-token ratio of mean member difference to mean non-member difference.
///
/// Tokens missing from either pool are skipped.
pub fn signal_strength(
    member: &BTreeMap<u32, Vec<f64>>,
    nonmember: &BTreeMap<u32, Vec<f64>>,
) -> Vec<TokenSignal> {
    member
        .iter()
        .filter_map(|(&token, m)| {
            let n = nonmember.get(&token)?;
            if m.is_empty() || n.is_empty() {
                return None;
            }
            let (mm, nm) = (mean(m), mean(n));
            Some(TokenSignal {
                token,
                member_mean: mm,
                nonmember_mean: nm,
                member_count: m.len(),
                nonmember_count: n.len(),
                ratio: (nm.abs() >= SIGNAL_STRENGTH_EPS).then(|| mm / nm),
            })
        })
        .collect()
}
