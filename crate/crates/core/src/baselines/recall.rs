use rand::seq::index;

use super::{ensure_finite, mc_mask, score, BaselineConfig};
use crate::error::{Error, OracleResultExt, Result};
use crate::oracle::{LossQuery, ModelRole, Oracle};
use crate::seed::SeedSpec;
use crate::types::{MaskConfiguration, MembershipScore, TokenSequence, MAX_SEQUENCE_TOKENS};

/// Prefix sequences for the context-based attacks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShotPools {
    /// Presumed training data; used only by CON-ReCall.
    pub member: Vec<TokenSequence>,
    pub nonmember: Vec<TokenSequence>,
}

fn pick(pool_len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = crate::seed::rng_from_seed(seed);
    let mut idx = index::sample(&mut rng, pool_len, count).into_vec();
    idx.sort_unstable();
    idx
}

fn average_len(shots: &[&TokenSequence]) -> f64 {
    shots.iter().map(|s| s.len() as f64).sum::<f64>() / shots.len() as f64
}

/// Shots drawn once per seed, shared by every sample.
fn select<'a>(pool: &'a [TokenSequence], count: usize, seed: u64, which: &str) -> Result<Vec<&'a TokenSequence>> {
    if pool.len() < count {
        return Err(Error::Config(format!(
            "{which} shot pool has {} sequences, {count} needed",
            pool.len()
        )));
    }
    Ok(pick(pool.len(), count, seed).into_iter().map(|i| &pool[i]).collect())
}

/// `shots ++ sample`, dropping leading tokens so the whole sample fits in `max_len`.
///
/// Returns the tokens and the offset of the sample within them.
fn with_prefix(shots: &[&TokenSequence], sample: &[u32], max_len: usize) -> (Vec<u32>, usize) {
    let prefix: Vec<u32> = shots.iter().flat_map(|s| s.tokens().iter().copied()).collect();
    let room = max_len.saturating_sub(sample.len());
    let keep = prefix.len().min(room);
    let mut tokens = prefix[prefix.len() - keep..].to_vec();
    tokens.extend_from_slice(sample);
    (tokens, keep)
}

fn shifted(mask: &MaskConfiguration, offset: usize, len: usize) -> MaskConfiguration {
    MaskConfiguration::new(mask.positions().iter().map(|p| p + offset).collect(), len)
        .expect("shifted mask stays in range")
}

/// Mean over draws of the masked target loss on the sample's own positions,
/// for each context (the empty prefix included).
fn contextual_losses<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
    purpose: &str,
    contexts: &[Vec<&TokenSequence>],
) -> Result<Vec<f64>> {
    let info = oracle.info().context(|| format!("{purpose}: oracle info"))?;
    let max_len = info.max_sequence_length.min(MAX_SEQUENCE_TOKENS);
    let prepared: Vec<(Vec<u32>, usize)> = contexts
        .iter()
        .map(|c| with_prefix(c, sample.tokens(), max_len))
        .collect();
    let mut totals = vec![0.0; contexts.len()];
    for d in 0..cfg.mc_samples {
        let mask = mc_mask(sample, cfg.mask_fraction, seeds, purpose, d)?;
        for (total, (tokens, offset)) in totals.iter_mut().zip(&prepared) {
            let m = shifted(&mask, *offset, tokens.len());
            let lv = oracle
                .position_losses(&LossQuery::masked(tokens, &m), ModelRole::Target)
                .context(|| format!("{purpose}: sample {:?}, draw {d}", sample.sample_id()))?;
            *total += lv.mean().unwrap_or(0.0);
        }
    }
    Ok(totals.into_iter().map(|t| t / cfg.mc_samples as f64).collect())
}

/// Unprefixed loss divided by the loss after a non-member prefix.
pub fn recall_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    pools: &ShotPools,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let shots = select(&pools.nonmember, cfg.recall_shots, seeds.derive("", "recall/shots", 0, 0), "non-member")?;
    let l = contextual_losses(&sample, oracle, cfg, seeds, "recall", &[Vec::new(), shots])?;
    if l[1] <= 0.0 {
        return Err(Error::invalid(format!("recall: zero prefixed loss for sample {:?}", sample.sample_id())));
    }
    let value = ensure_finite("recall", &sample, l[0] / l[1])?;
    Ok(score(&sample, "recall", value))
}

/// `(loss after non-member prefix - loss after member prefix) / unprefixed loss`.
///
/// When both pools have the same size the same indices are drawn from each,
/// which keeps length-paired pools paired.
pub fn con_recall_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    pools: &ShotPools,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let member_seed = seeds.derive("", "con_recall/shots", 0, 0);
    let nonmember_seed = if pools.member.len() == pools.nonmember.len() {
        member_seed
    } else {
        seeds.derive("", "con_recall/shots", 1, 0)
    };
    let member = select(&pools.member, cfg.recall_shots, member_seed, "member")?;
    let nonmember = select(&pools.nonmember, cfg.recall_shots, nonmember_seed, "non-member")?;
    let (lm, ln) = (average_len(&member), average_len(&nonmember));
    let gap = (lm - ln).abs() / lm.max(ln);
    if gap > cfg.prefix_length_tolerance {
        return Err(Error::Config(format!(
            "con_recall: prefix pools differ in average length by {:.1}% (member {lm:.1}, non-member {ln:.1}); limit is {:.1}%",
            100.0 * gap,
            100.0 * cfg.prefix_length_tolerance
        )));
    }
    let l = contextual_losses(&sample, oracle, cfg, seeds, "con_recall", &[Vec::new(), nonmember, member])?;
    if l[0] <= 0.0 {
        return Err(Error::invalid(format!("con_recall: zero baseline loss for sample {:?}", sample.sample_id())));
    }
    let value = ensure_finite("con_recall", &sample, (l[1] - l[2]) / l[0])?;
    Ok(score(&sample, "con_recall", value))
}
