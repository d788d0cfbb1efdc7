//! Domain types shared by every attack and by the evaluator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every attack scores at most this many leading tokens of a sample.
pub const MAX_SEQUENCE_TOKENS: usize = 512;

/// Ground-truth membership of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "member")]
    Member,
    #[serde(rename = "non-member")]
    NonMember,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Member => "member",
            Label::NonMember => "non-member",
        }
    }

    pub fn is_member(&self) -> bool {
        matches!(self, Label::Member)
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.trim() {
            "member" | "1" => Some(Label::Member),
            "non-member" | "nonmember" | "0" => Some(Label::NonMember),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Token IDs of one audited sample, with its optional source text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    sample_id: String,
    tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

impl TokenSequence {
    pub fn new(sample_id: impl Into<String>, tokens: Vec<u32>) -> Result<Self> {
        let sample_id = sample_id.into();
        if tokens.is_empty() {
            return Err(Error::invalid(format!("sample {sample_id:?} has no tokens")));
        }
        Ok(Self {
            sample_id,
            tokens,
            text: None,
        })
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn text(&self) -> Option<&str> {
        self.text.as_deref()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keeps the first `limit` tokens. Shorter sequences are returned unchanged, never padded.
    pub fn truncated(&self, limit: usize) -> TokenSequence {
        if self.tokens.len() <= limit {
            return self.clone();
        }
        TokenSequence {
            sample_id: self.sample_id.clone(),
            tokens: self.tokens[..limit].to_vec(),
            text: self.text.clone(),
        }
    }

    pub fn check_vocab(&self, vocab_size: u32) -> Result<()> {
        match self.tokens.iter().find(|&&t| t >= vocab_size) {
            Some(t) => Err(Error::invalid(format!(
                "sample {:?}: token id {t} outside vocabulary of size {vocab_size}",
                self.sample_id
            ))),
            None => Ok(()),
        }
    }
}

/// A set of masked positions within a sequence of length `sequence_length`.
///
/// Positions are 0-based, sorted and unique, and there is at least one.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskConfiguration {
    positions: Vec<usize>,
    sequence_length: usize,
}

impl MaskConfiguration {
    pub fn new(mut positions: Vec<usize>, sequence_length: usize) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if positions.is_empty() {
            return Err(Error::invalid("mask configuration must mask at least one position"));
        }
        if let Some(&last) = positions.last() {
            if last >= sequence_length {
                return Err(Error::invalid(format!(
                    "masked position {last} out of range for length {sequence_length}"
                )));
            }
        }
        Ok(Self {
            positions,
            sequence_length,
        })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn sequence_length(&self) -> usize {
        self.sequence_length
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.positions.binary_search(&position).is_ok()
    }

    pub fn into_positions(self) -> Vec<usize> {
        self.positions
    }
}

/// Per-position negative log-likelihoods (nats) returned by an oracle.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossVector {
    positions: Vec<usize>,
    losses: Vec<f64>,
}

impl LossVector {
    /// `positions` must be sorted and unique; `losses[i]` belongs to `positions[i]`.
    pub fn new(positions: Vec<usize>, losses: Vec<f64>) -> Result<Self> {
        if positions.len() != losses.len() {
            return Err(Error::invalid(format!(
                "{} positions but {} losses",
                positions.len(),
                losses.len()
            )));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("loss positions must be strictly increasing"));
        }
        if let Some(bad) = losses.iter().find(|l| !l.is_finite() || **l < 0.0) {
            return Err(Error::invalid(format!("loss {bad} is not a finite non-negative value")));
        }
        Ok(Self { positions, losses })
    }

    pub fn get(&self, position: usize) -> Option<f64> {
        self.positions
            .binary_search(&position)
            .ok()
            .map(|i| self.losses[i])
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.positions.iter().copied().zip(self.losses.iter().copied())
    }

    pub fn mean(&self) -> Option<f64> {
        if self.losses.is_empty() {
            None
        } else {
            Some(self.losses.iter().sum::<f64>() / self.losses.len() as f64)
        }
    }
}

/// Localized loss differences gathered at one masking step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEvidence {
    /// 1-based step index.
    pub step: usize,
    pub density: f64,
    pub mask_count: usize,
    pub deltas: Vec<f64>,
}

/// Per-step evidence for one sample, ordered by step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCollection {
    pub sample_id: String,
    pub steps: Vec<StepEvidence>,
}

impl EvidenceCollection {
    pub fn new(sample_id: impl Into<String>, steps: Vec<StepEvidence>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("evidence collection has no steps"));
        }
        for (i, step) in steps.iter().enumerate() {
            if step.step != i + 1 {
                return Err(Error::invalid(format!(
                    "evidence steps must be 1..T without gaps; found step {} at index {i}",
                    step.step
                )));
            }
            if step.deltas.is_empty() {
                return Err(Error::invalid(format!("step {} has no differences", step.step)));
            }
        }
        Ok(Self {
            sample_id: sample_id.into(),
            steps,
        })
    }
}

/// One attack's score for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipScore {
    pub sample_id: String,
    pub attack: String,
    pub score: f64,
    pub label: Option<Label>,
}

/// A sample with its ground-truth label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sequence: TokenSequence,
    pub label: Option<Label>,
}
