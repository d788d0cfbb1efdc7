//! Closed-form target/reference model pair over a synthetic corpus.
//!
//! Losses are generated directly rather than by a network. For a query
//! `(tokens, masked, eval)` with masking density `a = |masked| / L`, each
//! evaluated position `i` has a persistent *window* (the tokens at
//! `i-2..=i+2`) which keys every per-context quantity, and each query has a
//! *configuration key* (hash of tokens and masked set) which keys the
//! per-configuration noise.
//!
//! Masked position:
//!
//! ```text
//! base      = difficulty(token) * topic(token) * context(window) * (1 + slope * a)
//! reference = base + e_R + o_R + d/2 + domain
//! target    = base + e_T + o_T - d/2 - shift - member
//! ```
//!
//! * `e_*`: per-(configuration, position) Gaussian noise, `noise_sd / sqrt 2` each.
//! * `o_*`: per-configuration Gaussian offset, `config_noise_sd / sqrt 2` each,
//!   scaled by `config_outlier_scale` with probability `config_outlier_prob`.
//! * `d`: persistent symmetric model discrepancy present on a fraction of windows.
//! * `domain`: log-normal spike on a fraction of windows of domain tokens,
//!   identical for members and non-members. It is jargon cost that only the
//!   adapted target has shed, so it sits on the reference side and is never
//!   clipped by the zero floor of the target loss.
//! * `member`: only for windows seen in training, only on non-domain tokens,
//!   and only when the configuration activates the window (probability
//!   `activation_probability * exp(-activation_density_decay * a)`).
//!
//! Unmasked positions score `visible_loss_scale * base` for both models.
//! Losses are clamped at zero. Every value is a pure function of the world
//! seed and the query.

use std::collections::HashSet;
use std::f64::consts::{SQRT_2, TAU};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::{WhitespaceTokenizer, SYNTHETIC_MASK_TOKEN};
use super::{Backend, LossQuery, ModelRole, Oracle, OracleError, OracleInfo};
use crate::error::{Error, Result};
use crate::seed::{hash_words, rng_from_seed, unit_interval};
use crate::types::{Label, LabeledSample, LossVector, TokenSequence, MAX_SEQUENCE_TOKENS};

const WINDOW_RADIUS: usize = 2;
const MIN_BASE_LOSS: f64 = 0.2;

// Key tags separating the independent hash streams.
const TAG_TOKEN_DIFFICULTY: u64 = 1;
const TAG_TOPIC: u64 = 2;
const TAG_CONTEXT: u64 = 3;
const TAG_DOMAIN_TOKEN: u64 = 4;
const TAG_SPIKE: u64 = 5;
const TAG_SPIKE_SIZE: u64 = 6;
const TAG_DISCREPANCY: u64 = 7;
const TAG_DISCREPANCY_SIZE: u64 = 8;
const TAG_STRENGTH: u64 = 9;
const TAG_ACTIVATION: u64 = 10;
const TAG_NOISE: u64 = 11;
const TAG_CONFIG_NOISE: u64 = 12;
const TAG_WINDOW: u64 = 13;
const TAG_CONFIG: u64 = 14;
const TAG_CONFIG_OUTLIER: u64 = 15;

/// Moments the default world is tuned to reproduce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTargets {
    pub member_mean: f64,
    pub member_sd: f64,
    pub nonmember_mean: f64,
    pub nonmember_sd: f64,
    pub member_excess_kurtosis: f64,
    pub nonmember_excess_kurtosis: f64,
    pub member_skewness: f64,
    pub nonmember_skewness: f64,
    pub configuration_sd: f64,
    pub member_margin: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            member_mean: 0.032,
            member_sd: 0.034,
            nonmember_mean: 0.007,
            nonmember_sd: 0.029,
            member_excess_kurtosis: 82.9,
            nonmember_excess_kurtosis: 89.1,
            member_skewness: 7.5,
            nonmember_skewness: 7.6,
            configuration_sd: 0.10,
            member_margin: 0.06,
        }
    }
}

/// Generator parameters. Every field is required when deserializing; use
/// [`SyntheticWorldConfig::from_partial`] to override selected fields of the
/// calibrated default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub num_members: usize,
    pub num_nonmembers: usize,
    /// Inclusive range of sample lengths in tokens.
    pub seq_length_range: [usize; 2],
    /// Size of each of the member and non-member shot pools.
    pub num_shots: usize,
    pub vocab_size: u32,
    pub max_sequence_length: usize,
    pub num_topics: usize,
    pub words_per_topic: usize,
    pub topic_focus: f64,
    pub capitalization_prob: f64,

    pub base_loss_mean: f64,
    pub base_loss_sd: f64,
    pub topic_loss_sd: f64,
    pub context_loss_sd: f64,
    pub density_loss_slope: f64,
    pub visible_loss_scale: f64,

    pub global_shift: f64,
    pub domain_token_fraction: f64,
    pub domain_spike_prob: f64,
    pub domain_effect_mu: f64,
    pub domain_effect_sigma: f64,

    pub member_signal_delta: f64,
    pub memorization_strength_sd: f64,
    pub activation_probability: f64,
    pub activation_density_decay: f64,

    pub noise_sd: f64,
    pub config_noise_sd: f64,
    /// Probability that a configuration's offset is scaled up by `config_outlier_scale`.
    pub config_outlier_prob: f64,
    pub config_outlier_scale: f64,
    pub discrepancy_prob: f64,
    pub discrepancy_sd: f64,

    pub calibration_targets: CalibrationTargets,
}

/// The calibrated default parameters, frozen after tuning against the target moments.
pub const CALIBRATED_WORLD_JSON: &str = include_str!("../../calibration/synthetic_world.json");

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        serde_json::from_str(CALIBRATED_WORLD_JSON).expect("calibration file is valid")
    }
}

impl SyntheticWorldConfig {
    /// A world with no membership signal, no domain effect and symmetric noise.
    pub fn null() -> Self {
        Self {
            global_shift: 0.0,
            domain_token_fraction: 0.0,
            domain_spike_prob: 0.0,
            member_signal_delta: 0.0,
            activation_probability: 0.0,
            discrepancy_prob: 0.0,
            ..Self::default()
        }
    }

    /// The calibrated default with the fields present in `overrides` replaced.
    pub fn from_partial(overrides: &serde_json::Value) -> Result<Self> {
        Self::default().with_overrides(overrides)
    }

    /// This configuration with the fields present in `overrides` replaced.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge_json(&mut base, overrides);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(format!("synthetic_world: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("topic_focus", self.topic_focus),
            ("capitalization_prob", self.capitalization_prob),
            ("domain_token_fraction", self.domain_token_fraction),
            ("domain_spike_prob", self.domain_spike_prob),
            ("activation_probability", self.activation_probability),
            ("discrepancy_prob", self.discrepancy_prob),
            ("config_outlier_prob", self.config_outlier_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let sds = [
            ("base_loss_sd", self.base_loss_sd),
            ("topic_loss_sd", self.topic_loss_sd),
            ("context_loss_sd", self.context_loss_sd),
            ("domain_effect_sigma", self.domain_effect_sigma),
            ("memorization_strength_sd", self.memorization_strength_sd),
            ("noise_sd", self.noise_sd),
            ("config_noise_sd", self.config_noise_sd),
            ("discrepancy_sd", self.discrepancy_sd),
            ("config_outlier_scale", self.config_outlier_scale),
        ];
        for (name, sd) in sds {
            if !(sd >= 0.0 && sd.is_finite()) {
                return Err(Error::Config(format!("{name} = {sd} must be a finite non-negative value")));
            }
        }
        let [lo, hi] = self.seq_length_range;
        if lo < 2 || lo > hi || hi > self.max_sequence_length {
            return Err(Error::Config(format!(
                "seq_length_range {lo}..={hi} must satisfy 2 <= lo <= hi <= {}",
                self.max_sequence_length
            )));
        }
        if self.vocab_size < 2 || self.num_topics == 0 || self.words_per_topic == 0 {
            return Err(Error::Config("vocabulary, topics and lexicon must be non-empty".into()));
        }
        if self.base_loss_mean <= 0.0 {
            return Err(Error::Config("base_loss_mean must be positive".into()));
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON encoding together with the seed.
    pub fn digest(&self, seed: u64) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.update(seed.to_le_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Recursively overlays the object `patch` onto `base`.
pub fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Standard normal from a hash key (Box-Muller on two derived uniforms).
#[inline]
fn normal(key: u64) -> f64 {
    let u1 = unit_interval(hash_words(&[key, 1])).max(f64::MIN_POSITIVE);
    let u2 = unit_interval(hash_words(&[key, 2]));
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Log-normal multiplier with unit mean.
#[inline]
fn unit_mean_lognormal(key: u64, sd: f64) -> f64 {
    (sd * normal(key) - 0.5 * sd * sd).exp()
}

#[derive(Clone, Debug)]
pub struct SyntheticOracle {
    config: SyntheticWorldConfig,
    seed: u64,
    tokenizer: WhitespaceTokenizer,
    memorized: HashSet<u64>,
}

impl SyntheticOracle {
    /// An oracle that has memorized the given training sequences.
    pub fn new<'a>(
        config: SyntheticWorldConfig,
        seed: u64,
        training: impl IntoIterator<Item = &'a [u32]>,
    ) -> Result<Self> {
        config.validate()?;
        let mut oracle = Self {
            tokenizer: WhitespaceTokenizer::new(config.vocab_size),
            config,
            seed,
            memorized: HashSet::new(),
        };
        let mut memorized = HashSet::new();
        for tokens in training {
            for i in 0..tokens.len() {
                memorized.insert(oracle.window_key(tokens, i));
            }
        }
        oracle.memorized = memorized;
        Ok(oracle)
    }

    pub fn config(&self) -> &SyntheticWorldConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &WhitespaceTokenizer {
        &self.tokenizer
    }

    fn key(&self, words: &[u64]) -> u64 {
        let mut buf = [0u64; 6];
        buf[0] = self.seed;
        buf[1..=words.len()].copy_from_slice(words);
        hash_words(&buf[..=words.len()])
    }

    fn window_key(&self, tokens: &[u32], i: usize) -> u64 {
        let mut acc = self.key(&[TAG_WINDOW]);
        for offset in 0..=2 * WINDOW_RADIUS {
            let j = (i + offset).checked_sub(WINDOW_RADIUS);
            let word = match j.and_then(|j| tokens.get(j)) {
                Some(&t) => u64::from(t),
                None => u64::MAX,
            };
            acc = hash_words(&[acc, word]);
        }
        acc
    }

    fn configuration_key(&self, tokens: &[u32], masked: &[usize]) -> u64 {
        let mut acc = self.key(&[TAG_CONFIG, tokens.len() as u64]);
        for &t in tokens {
            acc = hash_words(&[acc, u64::from(t)]);
        }
        acc = hash_words(&[acc, u64::MAX]);
        for &p in masked {
            acc = hash_words(&[acc, p as u64]);
        }
        acc
    }

    pub fn is_domain_token(&self, token: u32) -> bool {
        unit_interval(self.key(&[TAG_DOMAIN_TOKEN, u64::from(token)])) < self.config.domain_token_fraction
    }

    fn base_loss(&self, token: u32, window: u64) -> f64 {
        let c = &self.config;
        let topic = u64::from(token) % c.num_topics as u64;
        let difficulty = c.base_loss_mean
            * unit_mean_lognormal(self.key(&[TAG_TOKEN_DIFFICULTY, u64::from(token)]), c.base_loss_sd);
        let topic_mult = unit_mean_lognormal(self.key(&[TAG_TOPIC, topic]), c.topic_loss_sd);
        let context = unit_mean_lognormal(hash_words(&[window, TAG_CONTEXT]), c.context_loss_sd);
        (difficulty * topic_mult * context).max(MIN_BASE_LOSS)
    }

    fn domain_effect(&self, token: u32, window: u64) -> f64 {
        let c = &self.config;
        if c.domain_spike_prob <= 0.0 || !self.is_domain_token(token) {
            return 0.0;
        }
        if unit_interval(hash_words(&[window, TAG_SPIKE])) >= c.domain_spike_prob {
            return 0.0;
        }
        (c.domain_effect_mu + c.domain_effect_sigma * normal(hash_words(&[window, TAG_SPIKE_SIZE]))).exp()
    }

    fn discrepancy(&self, window: u64) -> f64 {
        let c = &self.config;
        if c.discrepancy_prob <= 0.0 || unit_interval(hash_words(&[window, TAG_DISCREPANCY])) >= c.discrepancy_prob {
            return 0.0;
        }
        c.discrepancy_sd * normal(hash_words(&[window, TAG_DISCREPANCY_SIZE]))
    }

    fn member_effect(&self, token: u32, window: u64, config_key: u64, position: usize, density: f64) -> f64 {
        let c = &self.config;
        if c.member_signal_delta == 0.0 || !self.memorized.contains(&window) || self.is_domain_token(token) {
            return 0.0;
        }
        let p = c.activation_probability * (-c.activation_density_decay * density).exp();
        if unit_interval(hash_words(&[config_key, position as u64, TAG_ACTIVATION])) >= p {
            return 0.0;
        }
        c.member_signal_delta * unit_mean_lognormal(hash_words(&[window, TAG_STRENGTH]), c.memorization_strength_sd)
    }

    fn masked_loss(&self, tokens: &[u32], i: usize, config_key: u64, density: f64, role: ModelRole) -> f64 {
        let c = &self.config;
        let token = tokens[i];
        let window = self.window_key(tokens, i);
        let base = self.base_loss(token, window) * (1.0 + c.density_loss_slope * density);
        let role_tag = match role {
            ModelRole::Target => 1,
            ModelRole::Reference => 2,
        };
        let noise = c.noise_sd / SQRT_2 * normal(hash_words(&[config_key, i as u64, TAG_NOISE, role_tag]));
        let outlier = unit_interval(hash_words(&[config_key, TAG_CONFIG_OUTLIER, role_tag])) < c.config_outlier_prob;
        let scale = if outlier { c.config_outlier_scale } else { 1.0 };
        let offset = scale * c.config_noise_sd / SQRT_2 * normal(hash_words(&[config_key, TAG_CONFIG_NOISE, role_tag]));
        let half_disc = 0.5 * self.discrepancy(window);
        let loss = match role {
            ModelRole::Reference => base + noise + offset + half_disc + self.domain_effect(token, window),
            ModelRole::Target => {
                base + noise + offset - half_disc - c.global_shift - self.member_effect(token, window, config_key, i, density)
            }
        };
        loss.max(0.0)
    }

    fn visible_loss(&self, tokens: &[u32], i: usize) -> f64 {
        let window = self.window_key(tokens, i);
        self.config.visible_loss_scale * self.base_loss(tokens[i], window)
    }
}

impl Oracle for SyntheticOracle {
    fn info(&self) -> Result<OracleInfo, OracleError> {
        Ok(OracleInfo {
            vocab_size: self.config.vocab_size,
            mask_token_id: SYNTHETIC_MASK_TOKEN,
            max_sequence_length: self.config.max_sequence_length,
            models: vec![ModelRole::Target, ModelRole::Reference],
            backend: Backend::Synthetic,
        })
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>, OracleError> {
        let tokens = self.tokenizer.tokenize(text);
        if tokens.is_empty() {
            return Err(OracleError::EmptyTokenization);
        }
        Ok(tokens)
    }

    fn position_losses(&self, query: &LossQuery, role: ModelRole) -> Result<LossVector, OracleError> {
        query.validate(&self.info()?)?;
        if query.eval.is_empty() {
            return Ok(LossVector::default());
        }
        let tokens = &query.tokens;
        let density = query.masked.len() as f64 / tokens.len() as f64;
        let config_key = self.configuration_key(tokens, &query.masked);
        let losses = query
            .eval
            .iter()
            .map(|&i| {
                if query.masked.binary_search(&i).is_ok() {
                    self.masked_loss(tokens, i, config_key, density, role)
                } else {
                    self.visible_loss(tokens, i)
                }
            })
            .collect();
        LossVector::new(query.eval.clone(), losses).map_err(|e| OracleError::InvalidQuery(e.to_string()))
    }
}

/// A generated corpus with ground truth and the model pair trained on its members.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: SyntheticWorldConfig,
    pub seed: u64,
    pub samples: Vec<LabeledSample>,
    /// Training sequences not in the evaluation set, usable as in-distribution prefixes.
    pub member_shots: Vec<TokenSequence>,
    /// Held-out sequences paired in length with `member_shots`.
    pub nonmember_shots: Vec<TokenSequence>,
    pub oracle: SyntheticOracle,
}

struct Lexicon {
    by_topic: Vec<Vec<String>>,
}

impl Lexicon {
    fn build(cfg: &SyntheticWorldConfig, tokenizer: &WhitespaceTokenizer, rng: &mut impl Rng) -> Lexicon {
        const ONSETS: &[&str] = &[
            "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br",
            "ch", "dr", "gr", "kl", "pl", "sh", "st", "th", "tr",
        ];
        const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "io", "ou"];
        let mut by_topic = vec![Vec::new(); cfg.num_topics];
        let mut seen = HashSet::new();
        let mut remaining = cfg.num_topics;
        while remaining > 0 {
            let syllables = rng.random_range(1..=3);
            let mut word = String::new();
            for _ in 0..syllables {
                word.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
                word.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            }
            if rng.random_bool(0.3) {
                word.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            }
            if !seen.insert(word.clone()) {
                continue;
            }
            let topic = tokenizer.token_id(&word) as usize % cfg.num_topics;
            let bucket = &mut by_topic[topic];
            if bucket.len() < cfg.words_per_topic {
                bucket.push(word);
                if bucket.len() == cfg.words_per_topic {
                    remaining -= 1;
                }
            }
        }
        Lexicon { by_topic }
    }

    fn text(&self, cfg: &SyntheticWorldConfig, len: usize, rng: &mut impl Rng) -> String {
        let home = rng.random_range(0..self.by_topic.len());
        let words: Vec<String> = (0..len)
            .map(|_| {
                let topic = if rng.random_bool(cfg.topic_focus) {
                    home
                } else {
                    rng.random_range(0..self.by_topic.len())
                };
                let bucket = &self.by_topic[topic];
                let word = &bucket[rng.random_range(0..bucket.len())];
                if rng.random_bool(cfg.capitalization_prob) {
                    capitalize(word)
                } else {
                    word.clone()
                }
            })
            .collect();
        words.join(" ")
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Generates the labeled corpus, shot pools and model pair for `(cfg, seed)`.
pub fn build_synthetic_world(cfg: &SyntheticWorldConfig, seed: u64) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let tokenizer = WhitespaceTokenizer::new(cfg.vocab_size);
    let mut rng = rng_from_seed(hash_words(&[seed, 0x5EED_C0DE]));
    let lexicon = Lexicon::build(cfg, &tokenizer, &mut rng);
    let [lo, hi] = cfg.seq_length_range;
    let hi = hi.min(MAX_SEQUENCE_TOKENS.max(lo));

    let make = |id: String, len: usize, rng: &mut rand_chacha::ChaCha8Rng| -> TokenSequence {
        let text = lexicon.text(cfg, len, rng);
        TokenSequence::new(id, tokenizer.tokenize(&text))
            .expect("generated text is non-empty")
            .with_text(text)
    };

    let total = cfg.num_members + cfg.num_nonmembers;
    let mut labels: Vec<Label> = (0..total)
        .map(|i| if i < cfg.num_members { Label::Member } else { Label::NonMember })
        .collect();
    labels.shuffle(&mut rng);
    let width = total.max(1).to_string().len().max(4);
    let samples: Vec<LabeledSample> = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let len = rng.random_range(lo..=hi);
            LabeledSample {
                sequence: make(format!("s{i:0width$}"), len, &mut rng),
                label: Some(label),
            }
        })
        .collect();

    let mut member_shots = Vec::with_capacity(cfg.num_shots);
    let mut nonmember_shots = Vec::with_capacity(cfg.num_shots);
    for j in 0..cfg.num_shots {
        let len = rng.random_range(lo..=hi);
        member_shots.push(make(format!("shot-m{j:03}"), len, &mut rng));
        nonmember_shots.push(make(format!("shot-n{j:03}"), len, &mut rng));
    }

    let training = samples
        .iter()
        .filter(|s| s.label == Some(Label::Member))
        .map(|s| s.sequence.tokens())
        .chain(member_shots.iter().map(|s| s.tokens()));
    let oracle = SyntheticOracle::new(cfg.clone(), seed, training)?;

    Ok(SyntheticWorld {
        config: cfg.clone(),
        seed,
        samples,
        member_shots,
        nonmember_shots,
        oracle,
    })
}
