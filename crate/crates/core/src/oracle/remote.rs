//! HTTP client for the JSON loss protocol (see [`super::protocol`]).

use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use reqwest::blocking::{Client, Response};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::protocol::{
    BatchLossesRequest, BatchLossesResponse, InfoResponse, LossesRequest, LossesResponse,
    TokenizeRequest, TokenizeResponse, WireQuery,
};
use super::{Backend, LossQuery, ModelRole, Oracle, OracleError, OracleInfo};
use crate::types::LossVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    /// Base URL serving both roles (or only the target when `reference_url` is set).
    pub url: String,
    pub reference_url: Option<String>,
    pub timeout_secs: f64,
    /// Extra attempts after a timeout or transport failure.
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub batch_size: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000".to_string(),
            reference_url: None,
            timeout_secs: 120.0,
            max_retries: 3,
            max_in_flight: 8,
            batch_size: 16,
        }
    }
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            ..Self::default()
        }
    }
}

struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("gate poisoned");
        while *n >= self.limit {
            n = self.freed.wait(n).expect("gate poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("gate poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteOracle {
    config: RemoteConfig,
    client: Client,
    gate: Gate,
    info: OnceLock<OracleInfo>,
}

impl RemoteOracle {
    pub fn new(config: RemoteConfig) -> Result<Self, OracleError> {
        if config.batch_size == 0 || config.max_in_flight == 0 {
            return Err(OracleError::InvalidQuery(
                "batch_size and max_in_flight must be positive".into(),
            ));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let limit = config.max_in_flight;
        Ok(Self {
            config,
            client,
            gate: Gate {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                limit,
            },
            info: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn base_url(&self, role: ModelRole) -> &str {
        match (role, &self.config.reference_url) {
            (ModelRole::Reference, Some(url)) => url,
            _ => &self.config.url,
        }
    }

    fn endpoint(base: &str, path: &str) -> String {
        format!("{}{}", base.trim_end_matches('/'), path)
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> Result<T, OracleError>) -> Result<T, OracleError> {
        let mut tries = 0;
        loop {
            let result = {
                let _permit = self.gate.acquire();
                attempt()
            };
            match result {
                Err(e) if e.is_transient() && tries < self.config.max_retries => {
                    tries += 1;
                    log::warn!("retrying after transient failure ({tries}): {e}");
                    std::thread::sleep(Duration::from_millis(50 * u64::from(tries)));
                }
                other => return other,
            }
        }
    }

    fn get<R: DeserializeOwned>(&self, base: &str, path: &str) -> Result<R, OracleError> {
        let url = Self::endpoint(base, path);
        self.with_retries(|| decode(self.client.get(&url).send().map_err(transport_error)?))
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, base: &str, path: &str, body: &B) -> Result<R, OracleError> {
        let url = Self::endpoint(base, path);
        self.with_retries(|| decode(self.client.post(&url).json(body).send().map_err(transport_error)?))
    }

    fn check_role(&self, info: &OracleInfo, role: ModelRole) -> Result<(), OracleError> {
        if self.config.reference_url.is_none() && !info.models.contains(&role) {
            return Err(OracleError::UnknownModel(role.as_str().to_string()));
        }
        Ok(())
    }

    fn batch_chunk(&self, queries: &[LossQuery], role: ModelRole) -> Result<Vec<LossVector>, OracleError> {
        let body = BatchLossesRequest {
            model: role,
            queries: queries.iter().map(WireQuery::from).collect(),
        };
        let resp: BatchLossesResponse = self.post(self.base_url(role), "/v1/losses_batch", &body)?;
        if resp.results.len() != queries.len() {
            return Err(OracleError::MalformedResponse(format!(
                "{} results for {} queries",
                resp.results.len(),
                queries.len()
            )));
        }
        queries
            .iter()
            .zip(resp.results)
            .map(|(q, r)| to_loss_vector(q, r.losses))
            .collect()
    }
}

fn transport_error(e: reqwest::Error) -> OracleError {
    if e.is_timeout() {
        OracleError::Timeout(e.to_string())
    } else {
        OracleError::Transport(e.to_string())
    }
}

fn decode<R: DeserializeOwned>(resp: Response) -> Result<R, OracleError> {
    let status = resp.status();
    let body = resp.text().map_err(transport_error)?;
    if status.is_server_error() {
        return Err(OracleError::ServerError {
            status: status.as_u16(),
            body,
        });
    }
    if !status.is_success() {
        return Err(OracleError::HttpStatus {
            status: status.as_u16(),
            body,
        });
    }
    serde_json::from_str(&body).map_err(|e| OracleError::MalformedResponse(format!("{e}: {body}")))
}

fn to_loss_vector(query: &LossQuery, losses: Vec<f64>) -> Result<LossVector, OracleError> {
    if losses.len() != query.eval.len() {
        return Err(OracleError::MalformedResponse(format!(
            "{} losses for {} eval positions",
            losses.len(),
            query.eval.len()
        )));
    }
    LossVector::new(query.eval.clone(), losses).map_err(|e| OracleError::MalformedResponse(e.to_string()))
}

impl Oracle for RemoteOracle {
    fn info(&self) -> Result<OracleInfo, OracleError> {
        if let Some(info) = self.info.get() {
            return Ok(info.clone());
        }
        let resp: InfoResponse = self.get(&self.config.url, "/v1/info")?;
        if resp.mask_token_id >= resp.vocab_size {
            return Err(OracleError::MalformedResponse(format!(
                "mask token {} outside vocabulary {}",
                resp.mask_token_id, resp.vocab_size
            )));
        }
        let info = OracleInfo {
            vocab_size: resp.vocab_size,
            mask_token_id: resp.mask_token_id,
            max_sequence_length: resp.max_sequence_length,
            models: resp.models,
            backend: Backend::Remote,
        };
        Ok(self.info.get_or_init(|| info).clone())
    }

    fn tokenize(&self, text: &str) -> Result<Vec<u32>, OracleError> {
        if text.trim().is_empty() {
            return Err(OracleError::EmptyTokenization);
        }
        let resp: TokenizeResponse = self.post(
            &self.config.url,
            "/v1/tokenize",
            &TokenizeRequest { text: text.to_string() },
        )?;
        if resp.tokens.is_empty() {
            return Err(OracleError::EmptyTokenization);
        }
        Ok(resp.tokens)
    }

    fn position_losses(&self, query: &LossQuery, role: ModelRole) -> Result<LossVector, OracleError> {
        let info = self.info()?;
        self.check_role(&info, role)?;
        query.validate(&info)?;
        if query.eval.is_empty() {
            return Ok(LossVector::default());
        }
        let body = LossesRequest {
            model: role,
            tokens: query.tokens.clone(),
            masked_positions: query.masked.clone(),
            eval_positions: query.eval.clone(),
        };
        let resp: LossesResponse = self.post(self.base_url(role), "/v1/losses", &body)?;
        to_loss_vector(query, resp.losses)
    }

    fn position_losses_batch(
        &self,
        queries: &[LossQuery],
        role: ModelRole,
    ) -> Result<Vec<LossVector>, OracleError> {
        let info = self.info()?;
        self.check_role(&info, role)?;
        for q in queries {
            q.validate(&info)?;
        }
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(self.config.batch_size) {
            out.extend(self.batch_chunk(chunk, role)?);
        }
        Ok(out)
    }
}
