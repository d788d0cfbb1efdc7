use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rand::Rng;

use super::{ensure_finite, masked_mean_loss, mc_mask, score, BaselineConfig};
use crate::error::{Error, OracleResultExt, Result};
use crate::oracle::{ModelRole, Oracle};
use crate::schedule::sample_mask;
use crate::seed::{rng_from_seed, SeedSpec};
use crate::types::{MembershipScore, TokenSequence, MAX_SEQUENCE_TOKENS};

/// Mean over Monte Carlo draws of the mean masked target loss.
fn mc_target_loss<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
    purpose: &str,
) -> Result<f64> {
    let mut total = 0.0;
    for d in 0..cfg.mc_samples {
        let mask = mc_mask(sample, cfg.mask_fraction, seeds, purpose, d)?;
        total += masked_mean_loss(oracle, sample.tokens(), &mask, ModelRole::Target, || {
            format!("{purpose}: sample {:?}, draw {d}", sample.sample_id())
        })?;
    }
    Ok(total / cfg.mc_samples as f64)
}

/// Negated mean masked loss of the target model.
pub fn loss_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let loss = mc_target_loss(&sample, oracle, cfg, seeds, "loss")?;
    Ok(score(&sample, "loss", -loss))
}

/// Length in bytes of the zlib stream for `bytes` at `level`.
pub fn zlib_compressed_len(bytes: &[u8], level: u32) -> usize {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(level));
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail").len()
}

/// Negated ratio of the target loss to the compressed size of the text.
pub fn zlib_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let text = match sample.text() {
        Some(t) if !t.trim().is_empty() => t,
        _ => {
            return Err(Error::invalid(format!(
                "zlib: sample {:?} has no text to compress",
                sample.sample_id()
            )))
        }
    };
    let compressed = zlib_compressed_len(text.as_bytes(), cfg.zlib_level);
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let loss = mc_target_loss(&sample, oracle, cfg, seeds, "zlib")?;
    Ok(score(&sample, "zlib", -(loss / compressed as f64)))
}

/// Loss on the lowercased text minus loss on the original text.
///
/// Both sides reuse the same per-draw seeds, so equal-length sequences see
/// identical mask positions.
pub fn lowercase_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let text = sample
        .text()
        .ok_or_else(|| Error::invalid(format!("lowercase: sample {:?} has no text", sample.sample_id())))?;
    let lowered_tokens = oracle
        .tokenize(&text.to_lowercase())
        .context(|| format!("lowercase: tokenizing sample {:?}", sample.sample_id()))?;
    let lowered = TokenSequence::new(sample.sample_id(), lowered_tokens)?.truncated(MAX_SEQUENCE_TOKENS);
    let original = sample.truncated(MAX_SEQUENCE_TOKENS);
    let l_lower = mc_target_loss(&lowered, oracle, cfg, seeds, "lowercase")?;
    let l_orig = mc_target_loss(&original, oracle, cfg, seeds, "lowercase")?;
    Ok(score(&original, "lowercase", l_lower - l_orig))
}

/// `x` with `round(fraction * len)` positions replaced by random non-mask tokens.
///
/// Replacements always differ from the original token.
pub fn perturb(tokens: &[u32], fraction: f64, vocab_size: u32, mask_token: u32, seed: u64) -> Vec<u32> {
    let len = tokens.len();
    let k = ((fraction * len as f64).round() as usize).min(len);
    let mut out = tokens.to_vec();
    if k == 0 || vocab_size < 3 {
        return out;
    }
    let positions = sample_mask(len, k, seed).expect("0 < k <= len").into_positions();
    let mut rng = rng_from_seed(seed ^ 0x9e37_79b9_7f4a_7c15);
    for p in positions {
        loop {
            let t = rng.random_range(0..vocab_size);
            if t != mask_token && t != tokens[p] {
                out[p] = t;
                break;
            }
        }
    }
    out
}

/// Mean neighbor loss minus the sample's own loss.
///
/// Draw `d` scores the sample and neighbor `d mod k` under the same mask.
pub fn neighbor_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let info = oracle.info().context(|| "neighbor: oracle info".to_string())?;
    let id = sample.sample_id();
    let neighbors: Vec<Vec<u32>> = (0..cfg.neighbor.num_neighbors)
        .map(|j| {
            let seed = seeds.derive(id, "neighbor/perturb", j as u64, 0);
            perturb(sample.tokens(), cfg.neighbor.perturb_fraction, info.vocab_size, info.mask_token_id, seed)
        })
        .collect();
    let (mut own, mut other) = (0.0, 0.0);
    for d in 0..cfg.mc_samples {
        let mask = mc_mask(&sample, cfg.mask_fraction, seeds, "neighbor/mask", d)?;
        let ctx = || format!("neighbor: sample {id:?}, draw {d}");
        own += masked_mean_loss(oracle, sample.tokens(), &mask, ModelRole::Target, ctx)?;
        let neighbor = &neighbors[d % neighbors.len()];
        other += masked_mean_loss(oracle, neighbor, &mask, ModelRole::Target, ctx)?;
    }
    let n = cfg.mc_samples as f64;
    Ok(score(&sample, "neighbor", other / n - own / n))
}

/// Mean over draws of the reference-to-target masked loss ratio.
pub fn ratio_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let id = sample.sample_id();
    let mut total = 0.0;
    for d in 0..cfg.mc_samples {
        let mask = mc_mask(&sample, cfg.mask_fraction, seeds, "ratio", d)?;
        let ctx = || format!("ratio: sample {id:?}, draw {d}");
        let reference = masked_mean_loss(oracle, sample.tokens(), &mask, ModelRole::Reference, ctx)?;
        let target = masked_mean_loss(oracle, sample.tokens(), &mask, ModelRole::Target, ctx)?;
        if target <= 0.0 {
            return Err(Error::invalid(format!("ratio: zero target loss for sample {id:?}, draw {d}")));
        }
        total += reference / target;
    }
    let value = ensure_finite("ratio", &sample, total / cfg.mc_samples as f64)?;
    Ok(score(&sample, "ratio", value))
}
