//! JSON wire format shared by the remote client and any protocol server.
//!
//! ```text
//! GET  /v1/info          -> InfoResponse
//! POST /v1/tokenize      TokenizeRequest    -> TokenizeResponse
//! POST /v1/losses        LossesRequest      -> LossesResponse
//! POST /v1/losses_batch  BatchLossesRequest -> BatchLossesResponse
//! ```
//!
//! Positions are 0-based; `losses[i]` belongs to `eval_positions[i]`.
//! Unknown fields are rejected.

use serde::{Deserialize, Serialize};

use super::{LossQuery, ModelRole};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoResponse {
    pub vocab_size: u32,
    pub mask_token_id: u32,
    pub max_sequence_length: usize,
    pub models: Vec<ModelRole>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeResponse {
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireQuery {
    pub tokens: Vec<u32>,
    pub masked_positions: Vec<usize>,
    pub eval_positions: Vec<usize>,
}

impl From<&LossQuery> for WireQuery {
    fn from(q: &LossQuery) -> Self {
        Self {
            tokens: q.tokens.clone(),
            masked_positions: q.masked.clone(),
            eval_positions: q.eval.clone(),
        }
    }
}

impl From<WireQuery> for LossQuery {
    fn from(q: WireQuery) -> Self {
        LossQuery {
            tokens: q.tokens,
            masked: q.masked_positions,
            eval: q.eval_positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossesRequest {
    pub model: ModelRole,
    pub tokens: Vec<u32>,
    pub masked_positions: Vec<usize>,
    pub eval_positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossesResponse {
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchLossesRequest {
    pub model: ModelRole,
    pub queries: Vec<WireQuery>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchLossesResponse {
    pub results: Vec<LossesResponse>,
}
