//! Attack orientation and query counts against a target model that has
//! memorized the member sequences exactly.

use std::collections::HashSet;

use proptest::prelude::*;

use dlm_mia::attacks::{Attack, ATTACK_NAMES};
use dlm_mia::baselines::ShotPools;
use dlm_mia::oracle::tokenizer::WhitespaceTokenizer;
use dlm_mia::oracle::{Backend, CountingOracle, OracleInfo};
use dlm_mia::{LossQuery, LossVector, ModelRole, Oracle, OracleError, SeedSpec, TokenSequence};

const VOCAB: u32 = 4096;

/// Target losses drop by `gap` at masked positions of a memorized sequence;
/// everything else scores the same on both models. A memorized sequence is
/// recognized when it ends the query, so prefixed contexts still match.
struct MemorizingOracle {
    members: HashSet<Vec<u32>>,
    tokenizer: WhitespaceTokenizer,
    gap: f64,
}

impl MemorizingOracle {
    fn member_start(&self, tokens: &[u32]) -> Option<usize> {
        (0..tokens.len()).find(|&start| self.members.contains(&tokens[start..]))
    }
}

impl Oracle for MemorizingOracle {
    fn info(&self) -> Result<OracleInfo, OracleError> {
        Ok(OracleInfo {
            vocab_size: VOCAB,
            mask_token_id: 0,
            max_sequence_length: 512,
            models: vec![ModelRole::Target, ModelRole::Reference],
            backend: Backend::Synthetic,
        })
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>, OracleError> {
        Ok(self.tokenizer.tokenize(text))
    }

    fn position_losses(&self, q: &LossQuery, role: ModelRole) -> Result<LossVector, OracleError> {
        q.validate(&self.info()?)?;
        let start = self.member_start(&q.tokens);
        let losses = q
            .eval
            .iter()
            .map(|&p| {
                let masked = q.masked.binary_search(&p).is_ok();
                let base = if masked { 3.0 } else { 0.3 };
                match (role, start) {
                    (ModelRole::Target, Some(s)) if p >= s && masked => base - self.gap,
                    _ => base,
                }
            })
            .collect();
        LossVector::new(q.eval.clone(), losses).map_err(|e| OracleError::InvalidQuery(e.to_string()))
    }
}

struct Fixture {
    oracle: MemorizingOracle,
    members: Vec<TokenSequence>,
    nonmembers: Vec<TokenSequence>,
    shots: ShotPools,
}

fn words(seed: u64, n: usize) -> String {
    (0..n)
        .map(|i| {
            let x = seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 40;
            format!("Word{}x{}", x % 997, i % 7)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn fixture(gap: f64, per_class: usize) -> Fixture {
    let tokenizer = WhitespaceTokenizer::new(VOCAB);
    let seq = |id: String, text: String| TokenSequence::new(id, tokenizer.tokenize(&text)).unwrap().with_text(text);
    let members: Vec<TokenSequence> =
        (0..per_class).map(|i| seq(format!("m{i}"), words(i as u64 + 1, 20 + i % 5))).collect();
    let nonmembers: Vec<TokenSequence> =
        (0..per_class).map(|i| seq(format!("n{i}"), words(i as u64 + 1000, 20 + i % 5))).collect();
    let member_shots: Vec<TokenSequence> =
        (0..8).map(|i| seq(format!("ms{i}"), words(i + 5000, 12))).collect();
    let nonmember_shots: Vec<TokenSequence> =
        (0..8).map(|i| seq(format!("ns{i}"), words(i + 6000, 12))).collect();
    let memorized = members.iter().chain(&member_shots).map(|s| s.tokens().to_vec()).collect();
    Fixture {
        oracle: MemorizingOracle {
            members: memorized,
            tokenizer,
            gap,
        },
        members,
        nonmembers,
        shots: ShotPools {
            member: member_shots,
            nonmember: nonmember_shots,
        },
    }
}

fn scores(f: &Fixture, attack: &Attack, samples: &[TokenSequence]) -> Vec<f64> {
    let seeds = SeedSpec::new(3);
    samples
        .iter()
        .map(|s| attack.score_sample(s, &f.oracle, &f.shots, &seeds).unwrap().score)
        .collect()
}

/// The bag-of-words classifier never queries a model. The Min-K% pair emits
/// the negated sum of the lowest probabilities, which ranks memorized samples
/// lower (see `min_k_rank_memorized_samples_lower`). The ReCall pair measures
/// how a prefix changes the loss, and this oracle ignores context (see
/// `context_attacks_are_neutral_without_context_effects`).
fn exempt(name: &str) -> bool {
    matches!(name, "bows" | "min_k" | "min_k_pp" | "recall" | "con_recall")
}

fn separated(low: &[f64], high: &[f64]) -> bool {
    low.iter().copied().fold(f64::NEG_INFINITY, f64::max) < high.iter().copied().fold(f64::INFINITY, f64::min)
}

#[test]
fn members_score_higher() {
    let f = fixture(1.0, 6);
    for name in ATTACK_NAMES.iter().filter(|n| !exempt(n)) {
        let attack = Attack::with_defaults(name).unwrap();
        let m = scores(&f, &attack, &f.members);
        let n = scores(&f, &attack, &f.nonmembers);
        assert!(separated(&n, &m), "{name}: members {m:?} vs non-members {n:?}");
    }
}

#[test]
fn min_k_rank_memorized_samples_lower() {
    let f = fixture(1.0, 6);
    for name in ["min_k", "min_k_pp"] {
        let attack = Attack::with_defaults(name).unwrap();
        let m = scores(&f, &attack, &f.members);
        let n = scores(&f, &attack, &f.nonmembers);
        assert!(separated(&m, &n), "{name}: members {m:?} vs non-members {n:?}");
    }
}

#[test]
fn context_attacks_are_neutral_without_context_effects() {
    let f = fixture(1.0, 4);
    for (name, neutral) in [("recall", 1.0), ("con_recall", 0.0)] {
        let attack = Attack::with_defaults(name).unwrap();
        for s in scores(&f, &attack, &f.members).into_iter().chain(scores(&f, &attack, &f.nonmembers)) {
            assert!((s - neutral).abs() < 1e-12, "{name}: {s}");
        }
    }
}

#[test]
fn no_memorization_no_separation() {
    let f = fixture(0.0, 4);
    for name in ["sama", "loss", "ratio", "lowercase", "secmi", "pia"] {
        let attack = Attack::with_defaults(name).unwrap();
        let all: Vec<f64> = scores(&f, &attack, &f.members).into_iter().chain(scores(&f, &attack, &f.nonmembers)).collect();
        assert!(all.iter().all(|s| (s - all[0]).abs() < 1e-12), "{name}: {all:?}");
    }
}

#[test]
fn query_counts_match_plans() {
    let f = fixture(1.0, 3);
    let counter = CountingOracle::new(f.oracle);
    let seeds = SeedSpec::new(3);
    for name in ATTACK_NAMES {
        let attack = Attack::with_defaults(name).unwrap();
        if attack.is_corpus_level() {
            assert_eq!(attack.planned_queries(), 0);
            continue;
        }
        for s in f.members.iter().chain(&f.nonmembers) {
            counter.reset();
            attack.score_sample(s, &counter, &f.shots, &seeds).unwrap();
            assert_eq!(counter.total_queries(), attack.planned_queries(), "{name} on {}", s.sample_id());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sama_budget_is_two_t_r(steps in 1usize..=20, reps in 1usize..=5, len in 12usize..=60) {
        let f = fixture(1.0, 1);
        let attack = Attack::from_json(&serde_json::json!({
            "name": "sama",
            "mc_repetitions": reps,
            "schedule": {"steps": steps, "subset_size": 2, "num_subsets": 8}
        }))
        .unwrap();
        let tokens: Vec<u32> = (1..=len as u32).collect();
        let sample = TokenSequence::new("p", tokens).unwrap();
        let counter = CountingOracle::new(f.oracle);
        attack.score_sample(&sample, &counter, &f.shots, &SeedSpec::new(1)).unwrap();
        prop_assert_eq!(counter.target_queries(), steps * reps);
        prop_assert_eq!(counter.reference_queries(), steps * reps);
        prop_assert_eq!(attack.planned_queries(), 2 * steps * reps);
    }
}
