use super::{content_seed, masked_mean_loss, score, token_bytes, BaselineConfig};
use crate::error::{Error, OracleResultExt, Result};
use crate::oracle::{LossQuery, ModelRole, Oracle};
use crate::schedule::{mask_count, sample_mask};
use crate::seed::SeedSpec;
use crate::types::{MaskConfiguration, MembershipScore, TokenSequence, MAX_SEQUENCE_TOKENS};

/// Negated weighted mean of per-ratio losses, weighting step `s` by `1 / (s + 1)`.
pub fn secmi_combine(losses: &[f64]) -> f64 {
    let (num, den) = losses
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(num, den), (s, l)| {
            let w = 1.0 / (s as f64 + 1.0);
            (num + w * l, den + w)
        });
    -(num / den)
}

fn content_mask(sample: &TokenSequence, fraction: f64, purpose: &str, step: u64) -> Result<MaskConfiguration> {
    let content = match sample.text() {
        Some(text) => text.as_bytes().to_vec(),
        None => token_bytes(sample.tokens()),
    };
    let len = sample.len();
    sample_mask(len, mask_count(len, fraction), content_seed(&content, purpose, step))
        .map_err(|e| Error::invalid(e.to_string()))
}

/// Masks are seeded by the sample content and step, so the global seed does not affect them.
pub fn secmi_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    _seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let losses = cfg
        .secmi_ratios
        .iter()
        .enumerate()
        .map(|(s, &ratio)| {
            let mask = content_mask(&sample, ratio, "secmi", s as u64)?;
            masked_mean_loss(oracle, sample.tokens(), &mask, ModelRole::Target, || {
                format!("secmi: sample {:?}, step {s}", sample.sample_id())
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(score(&sample, "secmi", secmi_combine(&losses)))
}

/// Negated gap between masked and unmasked losses on one content-seeded mask.
pub fn pia_attack<O: Oracle + ?Sized>(
    sample: &TokenSequence,
    oracle: &O,
    cfg: &BaselineConfig,
    _seeds: &SeedSpec,
) -> Result<MembershipScore> {
    let sample = sample.truncated(MAX_SEQUENCE_TOKENS);
    let mask = content_mask(&sample, cfg.pia_mask_fraction, "pia", 0)?;
    let ctx = || format!("pia: sample {:?}", sample.sample_id());
    let masked = masked_mean_loss(oracle, sample.tokens(), &mask, ModelRole::Target, ctx)?;
    let visible = oracle
        .position_losses(
            &LossQuery::new(sample.tokens().to_vec(), Vec::new(), mask.positions().to_vec()),
            ModelRole::Target,
        )
        .context(ctx)?
        .mean()
        .ok_or_else(|| Error::Format(format!("oracle returned no losses ({})", ctx())))?;
    Ok(score(&sample, "pia", -(masked - visible)))
}

#[cfg(test)]
mod tests {
    use super::super::testing::{constant, FnOracle, Recorder};
    use super::*;

    #[test]
    fn secmi_hand_examples() {
        assert!((secmi_combine(&[1.0, 2.0, 3.0, 4.0, 5.0]) + 300.0 / 137.0).abs() < 1e-12);
        assert_eq!(secmi_combine(&[0.7; 5]), -0.7);
        let w: f64 = (0..5).map(|s| 1.0 / (s as f64 + 1.0)).sum();
        assert!((w - 137.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn secmi_constant_oracle() {
        let s = TokenSequence::new("x", (1..=50).collect()).unwrap();
        let r = secmi_attack(&s, &constant(2.5), &BaselineConfig::default(), &SeedSpec::default()).unwrap();
        assert_eq!(r.score, -2.5);
    }

    #[test]
    fn secmi_uses_ratio_dependent_losses() {
        // Loss equals 1 + step index, recovered from the masked count.
        let s = TokenSequence::new("x", (1..=100).collect()).unwrap();
        let oracle = FnOracle(|q: &LossQuery, _: ModelRole, _: usize| match q.masked.len() {
            10 => 1.0,
            28 => 2.0,
            45 => 3.0,
            63 => 4.0,
            80 => 5.0,
            n => panic!("unexpected mask size {n}"),
        });
        let r = secmi_attack(&s, &oracle, &BaselineConfig::default(), &SeedSpec::default()).unwrap();
        assert!((r.score + 300.0 / 137.0).abs() < 1e-12);
    }

    #[test]
    fn pia_examples() {
        let s = TokenSequence::new("x", (1..=40).collect()).unwrap();
        let cfg = BaselineConfig::default();
        assert_eq!(pia_attack(&s, &constant(1.0), &cfg, &SeedSpec::default()).unwrap().score, 0.0);
        let oracle = FnOracle(|q: &LossQuery, _: ModelRole, _: usize| if q.masked.is_empty() { 1.5 } else { 2.0 });
        assert_eq!(pia_attack(&s, &oracle, &cfg, &SeedSpec::default()).unwrap().score, -0.5);
    }

    #[test]
    fn pia_mask_ignores_global_seed() {
        let s = TokenSequence::new("x", (1..=40).collect()).unwrap().with_text("some text here");
        let masks = |seed| {
            let rec = Recorder::new(constant(1.0));
            pia_attack(&s, &rec, &BaselineConfig::default(), &SeedSpec::new(seed)).unwrap();
            let log = rec.log.lock().unwrap();
            assert_eq!(log.len(), 2);
            assert_eq!(log[0].0.eval, log[1].0.eval);
            assert_eq!(log[0].0.eval.len(), 12);
            log[0].0.eval.clone()
        };
        assert_eq!(masks(1), masks(99));
    }
}
