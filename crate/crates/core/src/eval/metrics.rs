//! Threshold-free and low-FPR metrics for membership scores.
//!
//! Scores are oriented so that higher means "more likely member". A sample
//! is predicted member when its score is `>=` the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Label, MembershipScore};

/// Operating points reported for every attack.
pub const REPORTED_FPRS: [f64; 3] = [0.10, 0.01, 0.001];

/// Scores split by ground-truth label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledScores {
    pub members: Vec<f64>,
    pub nonmembers: Vec<f64>,
}

impl LabeledScores {
    pub fn new(members: Vec<f64>, nonmembers: Vec<f64>) -> Self {
        Self { members, nonmembers }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, Label)>) -> Self {
        let mut out = Self::default();
        for (score, label) in pairs {
            match label {
                Label::Member => out.members.push(score),
                Label::NonMember => out.nonmembers.push(score),
            }
        }
        out
    }

    /// Unlabeled scores are skipped.
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = &'a MembershipScore>) -> Self {
        Self::from_pairs(scores.into_iter().filter_map(|s| s.label.map(|l| (s.score, l))))
    }

    fn check(&self) -> Result<()> {
        if self.members.is_empty() || self.nonmembers.is_empty() {
            return Err(Error::invalid(format!(
                "metrics need both classes; got {} members and {} non-members",
                self.members.len(),
                self.nonmembers.len()
            )));
        }
        if self.members.iter().chain(&self.nonmembers).any(|s| s.is_nan()) {
            return Err(Error::invalid("scores contain NaN"));
        }
        Ok(())
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Number of elements of ascending `v` strictly below and equal to `x`.
fn below_and_equal(v: &[f64], x: f64) -> (usize, usize) {
    let lo = v.partition_point(|s| *s < x);
    let hi = v.partition_point(|s| *s <= x);
    (lo, hi - lo)
}

/// Mann-Whitney AUC: `P(member > non-member) + 0.5 * P(tie)`.
pub fn auc(scores: &LabeledScores) -> Result<f64> {
    scores.check()?;
    let neg = sorted(&scores.nonmembers);
    let mut twice_u: u128 = 0;
    for &m in &scores.members {
        let (below, equal) = below_and_equal(&neg, m);
        twice_u += 2 * below as u128 + equal as u128;
    }
    let pairs = scores.members.len() as f64 * neg.len() as f64;
    Ok((twice_u as f64 / 2.0) / pairs)
}

/// Largest count `c` with `c / n <= target`.
fn allowed_false_positives(target: f64, n: usize) -> usize {
    let mut c = (target * n as f64).floor().max(0.0) as usize;
    while c < n && (c + 1) as f64 / n as f64 <= target {
        c += 1;
    }
    while c > 0 && c as f64 / n as f64 > target {
        c -= 1;
    }
    c.min(n)
}

/// TPR at the smallest observed score whose FPR does not exceed `target`.
///
/// No interpolation between operating points.
pub fn tpr_at_fpr(scores: &LabeledScores, target: f64) -> Result<f64> {
    scores.check()?;
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid(format!("FPR target {target} must lie in (0, 1)")));
    }
    let neg = sorted(&scores.nonmembers);
    let allowed = allowed_false_positives(target, neg.len());
    if allowed >= neg.len() {
        return Ok(1.0);
    }
    // Threshold must sit strictly above the (allowed+1)-th highest non-member.
    let cutoff = neg[neg.len() - 1 - allowed];
    let passing = scores.members.iter().filter(|&&m| m > cutoff).count();
    Ok(passing as f64 / scores.members.len() as f64)
}

/// Whether the operating point rests on at most one non-member.
pub fn is_small_sample(target: f64, nonmembers: usize) -> bool {
    allowed_false_positives(target, nonmembers) <= 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// The first point uses `+inf` (nothing predicted member).
    pub threshold: f64,
}

/// Step ROC curve from `(0, 0)` to `(1, 1)`; ties yield diagonal segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }
}

pub fn roc_curve(scores: &LabeledScores) -> Result<RocCurve> {
    scores.check()?;
    let mut all: Vec<(f64, bool)> = scores
        .members
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nonmembers.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (p, n) = (scores.members.len() as f64, scores.nonmembers.len() as f64);
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
            threshold,
        });
    }
    Ok(RocCurve { points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TprAtFpr {
    pub fpr: f64,
    pub tpr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub attack: String,
    pub auc: f64,
    pub tpr_at: Vec<TprAtFpr>,
    pub n_members: usize,
    pub n_nonmembers: usize,
    /// Samples the attack failed on, excluded from the metrics.
    #[serde(default)]
    pub failed_samples: usize,
    pub config_digest: String,
    pub seed: u64,
    /// Operating-point convention, recorded so reports are self-describing.
    pub threshold_rule: String,
}

pub fn metrics_report(
    attack: &str,
    scores: &LabeledScores,
    config_digest: &str,
    seed: u64,
) -> Result<MetricsReport> {
    let tpr_at = REPORTED_FPRS
        .iter()
        .map(|&fpr| {
            let warning = is_small_sample(fpr, scores.nonmembers.len()).then(|| {
                format!(
                    "only {} non-members: this operating point rests on at most one non-member score",
                    scores.nonmembers.len()
                )
            });
            Ok(TprAtFpr {
                fpr,
                tpr: tpr_at_fpr(scores, fpr)?,
                warning,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        attack: attack.to_string(),
        auc: auc(scores)?,
        tpr_at,
        n_members: scores.members.len(),
        n_nonmembers: scores.nonmembers.len(),
        failed_samples: 0,
        config_digest: config_digest.to_string(),
        seed,
        threshold_rule: "no interpolation; TPR counts members scoring strictly above the (floor(fpr * n) + 1)-th highest non-member".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ls(m: &[f64], n: &[f64]) -> LabeledScores {
        LabeledScores::new(m.to_vec(), n.to_vec())
    }

    fn brute_force_auc(s: &LabeledScores) -> f64 {
        let mut acc = 0.0;
        for m in &s.members {
            for n in &s.nonmembers {
                if m > n {
                    acc += 1.0;
                } else if m == n {
                    acc += 0.5;
                }
            }
        }
        acc / (s.members.len() * s.nonmembers.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&ls(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(auc(&ls(&[0.5, 0.5], &[0.5, 0.5])).unwrap(), 0.5);
        assert_eq!(auc(&ls(&[0.9, 0.3], &[0.5, 0.1])).unwrap(), 0.75);
        assert!(auc(&ls(&[1.0], &[])).is_err());
        assert!(auc(&ls(&[f64::NAN], &[1.0])).is_err());
    }

    #[test]
    fn tpr_examples() {
        let s = ls(&[0.9, 0.8], &[0.1, 0.2]);
        for t in REPORTED_FPRS {
            assert_eq!(tpr_at_fpr(&s, t).unwrap(), 1.0);
        }
        assert_eq!(tpr_at_fpr(&ls(&[3.0, 2.0], &[1.0, 0.0]), 0.5).unwrap(), 1.0);
        // Threshold 1 admits one of two non-members and every member.
        assert_eq!(tpr_at_fpr(&ls(&[3.0, 2.0, 1.0], &[2.0, 0.0]), 0.5).unwrap(), 1.0);
        assert_eq!(tpr_at_fpr(&ls(&[3.0, 2.0, 1.0], &[2.0, 0.0]), 0.49).unwrap(), 1.0 / 3.0);
        assert!(tpr_at_fpr(&s, 0.0).is_err());
        assert!(tpr_at_fpr(&s, 1.0).is_err());
    }

    #[test]
    fn small_sample_flag() {
        assert!(is_small_sample(0.001, 1000));
        assert!(is_small_sample(0.001, 500));
        assert!(!is_small_sample(0.01, 1000));
    }

    #[test]
    fn roc_endpoints_and_ties() {
        let r = roc_curve(&ls(&[1.0], &[1.0])).unwrap();
        assert_eq!(r.points.len(), 2);
        assert_eq!((r.points[1].fpr, r.points[1].tpr), (1.0, 1.0));
        assert_eq!(r.trapezoid_area(), 0.5);

        let r = roc_curve(&ls(&[2.0], &[1.0])).unwrap();
        let pts: Vec<(f64, f64)> = r.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(r.points[1].threshold, 2.0);
    }

    #[test]
    fn null_tpr_tracks_fpr() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let s = LabeledScores::new(
            (0..n).map(|_| rng.random::<f64>()).collect(),
            (0..n).map(|_| rng.random::<f64>()).collect(),
        );
        for t in [0.1, 0.01] {
            let tpr = tpr_at_fpr(&s, t).unwrap();
            let se = (t * (1.0 - t) / n as f64).sqrt();
            // The threshold is itself estimated from n non-members, so allow both errors.
            assert!((tpr - t).abs() < 3.0 * se * 2f64.sqrt(), "{t}: {tpr}");
        }
    }

    fn scores_strategy() -> impl Strategy<Value = LabeledScores> {
        (
            proptest::collection::vec(0i32..8, 1..10),
            proptest::collection::vec(0i32..8, 1..10),
        )
            .prop_map(|(m, n)| {
                LabeledScores::new(m.into_iter().map(f64::from).collect(), n.into_iter().map(f64::from).collect())
            })
    }

    proptest! {
        #[test]
        fn auc_matches_brute_force_and_trapezoid(s in scores_strategy()) {
            let a = auc(&s).unwrap();
            prop_assert_eq!(a, brute_force_auc(&s));
            prop_assert!((roc_curve(&s).unwrap().trapezoid_area() - a).abs() < 1e-12);
        }

        #[test]
        fn auc_is_rank_invariant(s in scores_strategy()) {
            let t = LabeledScores::new(
                s.members.iter().map(|x| (x * 0.5).exp()).collect(),
                s.nonmembers.iter().map(|x| (x * 0.5).exp()).collect(),
            );
            prop_assert_eq!(auc(&s).unwrap(), auc(&t).unwrap());
        }

        #[test]
        fn label_flip_symmetry(s in scores_strategy()) {
            let flipped = LabeledScores::new(
                s.nonmembers.iter().map(|x| -x).collect(),
                s.members.iter().map(|x| -x).collect(),
            );
            prop_assert_eq!(auc(&s).unwrap(), auc(&flipped).unwrap());
        }

        #[test]
        fn tpr_monotone_in_target(s in scores_strategy(), a in 0.01f64..0.98, d in 0.0f64..0.01) {
            let lo = tpr_at_fpr(&s, a).unwrap();
            let hi = tpr_at_fpr(&s, (a + d).min(0.99)).unwrap();
            prop_assert!(lo <= hi);
        }

        #[test]
        fn tpr_achieved_fpr_within_target(s in scores_strategy(), t in 0.01f64..0.99) {
            // Recover the implied threshold and check its FPR directly.
            let tpr = tpr_at_fpr(&s, t).unwrap();
            let roc = roc_curve(&s).unwrap();
            let best = roc.points.iter().filter(|p| p.fpr <= t).map(|p| p.tpr).fold(0.0, f64::max);
            prop_assert_eq!(tpr, best);
        }

        #[test]
        fn roc_is_monotone(s in scores_strategy()) {
            let r = roc_curve(&s).unwrap();
            for w in r.points.windows(2) {
                prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
            }
            let last = r.points.last().unwrap();
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        }
    }
}
