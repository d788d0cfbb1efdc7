//! Grey-box masked-loss oracles.
//!
//! An oracle answers "what is the negative log-likelihood of the true token at
//! these positions, when these other positions are masked" for a target
//! (fine-tuned) and a reference (base) model. Two backends are provided: a
//! closed-form [`synthetic`] model pair and an HTTP [`remote`] client.

pub mod protocol;
pub mod remote;
pub mod synthetic;
pub mod tokenizer;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{LossVector, MaskConfiguration, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Target,
    Reference,
}

impl ModelRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelRole::Target => "target",
            ModelRole::Reference => "reference",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Synthetic,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub vocab_size: u32,
    pub mask_token_id: u32,
    pub max_sequence_length: usize,
    pub models: Vec<ModelRole>,
    pub backend: Backend,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("text produced no tokens")]
    EmptyTokenization,
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("server error (HTTP {status}): {body}")]
    ServerError { status: u16, body: String },
    #[error("model not served: {0}")]
    UnknownModel(String),
}

impl OracleError {
    /// Whether retrying the identical request may succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, OracleError::Timeout(_) | OracleError::Transport(_))
    }
}

/// One forward pass: `tokens` with `masked` replaced by the mask token,
/// scored at `eval` (which may include unmasked positions).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossQuery {
    pub tokens: Vec<u32>,
    pub masked: Vec<usize>,
    pub eval: Vec<usize>,
}

impl LossQuery {
    pub fn new(tokens: Vec<u32>, mut masked: Vec<usize>, mut eval: Vec<usize>) -> Self {
        masked.sort_unstable();
        masked.dedup();
        eval.sort_unstable();
        eval.dedup();
        Self {
            tokens,
            masked,
            eval,
        }
    }

    /// Scores exactly the masked positions.
    pub fn masked(tokens: &[u32], mask: &MaskConfiguration) -> Self {
        Self {
            tokens: tokens.to_vec(),
            masked: mask.positions().to_vec(),
            eval: mask.positions().to_vec(),
        }
    }

    pub fn validate(&self, info: &OracleInfo) -> Result<(), OracleError> {
        let len = self.tokens.len();
        if len == 0 {
            return Err(OracleError::InvalidQuery("empty token sequence".into()));
        }
        if len > info.max_sequence_length {
            return Err(OracleError::InvalidQuery(format!(
                "sequence of {len} tokens exceeds limit {}",
                info.max_sequence_length
            )));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t >= info.vocab_size) {
            return Err(OracleError::InvalidQuery(format!(
                "token id {t} outside vocabulary of size {}",
                info.vocab_size
            )));
        }
        for (name, list) in [("masked", &self.masked), ("eval", &self.eval)] {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(OracleError::InvalidQuery(format!(
                    "{name} positions must be sorted and unique"
                )));
            }
            if let Some(&p) = list.last() {
                if p >= len {
                    return Err(OracleError::InvalidQuery(format!(
                        "{name} position {p} out of range for length {len}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Grey-box access to a target/reference model pair.
///
/// Implementations must be safe to share across worker threads, and every
/// answer must depend only on the query (never on call order).
pub trait Oracle: Send + Sync {
    fn info(&self) -> Result<OracleInfo, OracleError>;

    fn tokenize(&self, text: &str) -> Result<Vec<u32>, OracleError>;

    fn position_losses(&self, query: &LossQuery, role: ModelRole) -> Result<LossVector, OracleError>;

    /// Results are returned in query order.
    fn position_losses_batch(
        &self,
        queries: &[LossQuery],
        role: ModelRole,
    ) -> Result<Vec<LossVector>, OracleError> {
        queries.iter().map(|q| self.position_losses(q, role)).collect()
    }
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn info(&self) -> Result<OracleInfo, OracleError> {
        (**self).info()
    }
    fn tokenize(&self, text: &str) -> Result<Vec<u32>, OracleError> {
        (**self).tokenize(text)
    }
    fn position_losses(&self, query: &LossQuery, role: ModelRole) -> Result<LossVector, OracleError> {
        (**self).position_losses(query, role)
    }
    fn position_losses_batch(
        &self,
        queries: &[LossQuery],
        role: ModelRole,
    ) -> Result<Vec<LossVector>, OracleError> {
        (**self).position_losses_batch(queries, role)
    }
}

impl<O: Oracle + ?Sized> Oracle for Box<O> {
    fn info(&self) -> Result<OracleInfo, OracleError> {
        (**self).info()
    }
    fn tokenize(&self, text: &str) -> Result<Vec<u32>, OracleError> {
        (**self).tokenize(text)
    }
    fn position_losses(&self, query: &LossQuery, role: ModelRole) -> Result<LossVector, OracleError> {
        (**self).position_losses(query, role)
    }
    fn position_losses_batch(
        &self,
        queries: &[LossQuery],
        role: ModelRole,
    ) -> Result<Vec<LossVector>, OracleError> {
        (**self).position_losses_batch(queries, role)
    }
}

/// Tokenizes `text` into a sequence carrying both ids and the original text.
pub fn tokenize_sequence<O: Oracle + ?Sized>(
    oracle: &O,
    sample_id: &str,
    text: &str,
) -> Result<TokenSequence, OracleError> {
    let tokens = oracle.tokenize(text)?;
    if tokens.is_empty() {
        return Err(OracleError::EmptyTokenization);
    }
    Ok(TokenSequence::new(sample_id, tokens)
        .expect("non-empty tokens")
        .with_text(text))
}

/// Wraps an oracle and counts loss queries per model role.
pub struct CountingOracle<O> {
    inner: O,
    target: AtomicUsize,
    reference: AtomicUsize,
}

impl<O: Oracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            target: AtomicUsize::new(0),
            reference: AtomicUsize::new(0),
        }
    }

    pub fn target_queries(&self) -> usize {
        self.target.load(Ordering::SeqCst)
    }

    pub fn reference_queries(&self) -> usize {
        self.reference.load(Ordering::SeqCst)
    }

    pub fn total_queries(&self) -> usize {
        self.target_queries() + self.reference_queries()
    }

    pub fn reset(&self) {
        self.target.store(0, Ordering::SeqCst);
        self.reference.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    fn bump(&self, role: ModelRole, n: usize) {
        match role {
            ModelRole::Target => self.target.fetch_add(n, Ordering::SeqCst),
            ModelRole::Reference => self.reference.fetch_add(n, Ordering::SeqCst),
        };
    }
}

impl<O: Oracle> Oracle for CountingOracle<O> {
    fn info(&self) -> Result<OracleInfo, OracleError> {
        self.inner.info()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>, OracleError> {
        self.inner.tokenize(text)
    }

    fn position_losses(&self, query: &LossQuery, role: ModelRole) -> Result<LossVector, OracleError> {
        self.bump(role, 1);
        self.inner.position_losses(query, role)
    }

    fn position_losses_batch(
        &self,
        queries: &[LossQuery],
        role: ModelRole,
    ) -> Result<Vec<LossVector>, OracleError> {
        self.bump(role, queries.len());
        self.inner.position_losses_batch(queries, role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info() -> OracleInfo {
        OracleInfo {
            vocab_size: 10,
            mask_token_id: 0,
            max_sequence_length: 4,
            models: vec![ModelRole::Target, ModelRole::Reference],
            backend: Backend::Synthetic,
        }
    }

    #[test]
    fn query_validation() {
        let ok = LossQuery::new(vec![1, 2, 3], vec![1], vec![0, 1]);
        assert!(ok.validate(&info()).is_ok());
        let far = LossQuery::new(vec![1, 2, 3], vec![3], vec![]);
        assert!(matches!(far.validate(&info()), Err(OracleError::InvalidQuery(_))));
        let long = LossQuery::new(vec![1; 5], vec![], vec![]);
        assert!(long.validate(&info()).is_err());
        let vocab = LossQuery::new(vec![10], vec![], vec![]);
        assert!(vocab.validate(&info()).is_err());
        let unsorted = LossQuery {
            tokens: vec![1, 2],
            masked: vec![],
            eval: vec![1, 0],
        };
        assert!(unsorted.validate(&info()).is_err());
    }

    #[test]
    fn role_serialization() {
        assert_eq!(serde_json::to_string(&ModelRole::Target).unwrap(), "\"target\"");
        assert_eq!(
            serde_json::from_str::<ModelRole>("\"reference\"").unwrap(),
            ModelRole::Reference
        );
    }
}
