//! Membership-inference auditing for masked diffusion language models.
//!
//! The crate provides the subset-aggregated sign attack ([`sama`]), twelve
//! reference attacks ([`baselines`]), loss oracles ([`oracle`]) and the
//! evaluation harness ([`eval`]).

pub mod attacks;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod io;
pub mod oracle;
pub mod sama;
pub mod schedule;
pub mod seed;
pub mod types;

pub use error::{Error, Result};
pub use oracle::{LossQuery, ModelRole, Oracle, OracleError, OracleInfo};
pub use seed::SeedSpec;
pub use types::{Label, LabeledSample, LossVector, MaskConfiguration, MembershipScore, TokenSequence};
