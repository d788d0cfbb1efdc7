//! Query-free bag-of-words classifier scored out of fold.
//!
//! Term weights: raw count times `ln((1 + D) / (1 + df)) + 1`, each row
//! scaled to unit L2 norm. Terms appearing in fewer than `min_df` of the
//! documents are dropped, then the `max_features` most frequent (by document
//! frequency, ties to the smaller id) are kept. Columns are in ascending term
//! order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forest::{ForestConfig, RandomForest};
use crate::error::{Error, Result};
use crate::seed::{rng_from_seed, SeedSpec};
use crate::types::{LabeledSample, MembershipScore, MAX_SEQUENCE_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BowsConfig {
    pub max_features: usize,
    pub min_df: f64,
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub folds: usize,
}

impl Default for BowsConfig {
    fn default() -> Self {
        Self {
            max_features: 5000,
            min_df: 0.05,
            trees: 100,
            max_depth: 2,
            min_leaf: 5,
            folds: 5,
        }
    }
}

impl BowsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.min_df) {
            return Err(Error::Config(format!("bows.min_df = {} must lie in [0, 1)", self.min_df)));
        }
        if self.max_features == 0 || self.trees == 0 || self.max_depth == 0 || self.min_leaf == 0 {
            return Err(Error::Config("bows sizes must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("bows.folds must be >= 2".into()));
        }
        Ok(())
    }

    fn forest(&self) -> ForestConfig {
        ForestConfig {
            trees: self.trees,
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            max_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TfIdf {
    /// Term of each column, ascending.
    pub terms: Vec<u32>,
    pub idf: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

pub fn tfidf_matrix(docs: &[&[u32]], max_features: usize, min_df: f64) -> TfIdf {
    let d = docs.len();
    let counts: Vec<BTreeMap<u32, usize>> = docs
        .iter()
        .map(|doc| {
            let mut m = BTreeMap::new();
            for &t in *doc {
                *m.entry(t).or_insert(0) += 1;
            }
            m
        })
        .collect();
    let mut df: BTreeMap<u32, usize> = BTreeMap::new();
    for c in &counts {
        for &t in c.keys() {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let floor = min_df * d as f64 - 1e-9;
    let mut kept: Vec<(u32, usize)> = df.into_iter().filter(|&(_, n)| n as f64 >= floor).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    kept.truncate(max_features);
    kept.sort_by_key(|&(t, _)| t);

    let terms: Vec<u32> = kept.iter().map(|&(t, _)| t).collect();
    let idf: Vec<f64> = kept
        .iter()
        .map(|&(_, n)| ((1.0 + d as f64) / (1.0 + n as f64)).ln() + 1.0)
        .collect();
    let rows = counts
        .iter()
        .map(|c| {
            let mut row: Vec<f64> = terms
                .iter()
                .zip(&idf)
                .map(|(t, w)| c.get(t).copied().unwrap_or(0) as f64 * w)
                .collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            row
        })
        .collect();
    TfIdf { terms, idf, rows }
}

/// Out-of-fold member probability for every sample.
///
/// Folds are a seeded shuffle dealt round-robin. Scores come back in input order.
pub fn bows_attack(samples: &[LabeledSample], cfg: &BowsConfig, seeds: &SeedSpec) -> Result<Vec<MembershipScore>> {
    cfg.validate()?;
    if samples.len() < cfg.folds {
        return Err(Error::invalid(format!(
            "bows: {} samples cannot fill {} folds",
            samples.len(),
            cfg.folds
        )));
    }
    let labels: Vec<bool> = samples
        .iter()
        .map(|s| {
            s.label.map(|l| l.is_member()).ok_or_else(|| {
                Error::invalid(format!("bows: sample {:?} has no label", s.sequence.sample_id()))
            })
        })
        .collect::<Result<_>>()?;
    let docs: Vec<&[u32]> = samples
        .iter()
        .map(|s| &s.sequence.tokens()[..s.sequence.len().min(MAX_SEQUENCE_TOKENS)])
        .collect();
    let x = tfidf_matrix(&docs, cfg.max_features, cfg.min_df).rows;

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng_from_seed(seeds.derive("", "bows/folds", 0, 0)));
    let mut fold_of = vec![0; samples.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold_of[i] = rank % cfg.folds;
    }

    let forest_cfg = cfg.forest();
    let per_fold: Vec<Vec<(usize, f64)>> = (0..cfg.folds)
        .into_par_iter()
        .map(|fold| {
            let (train, test): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| fold_of[i] != fold);
            let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
            let ty: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let forest = RandomForest::fit(&tx, &ty, &forest_cfg, seeds.derive("", "bows/forest", fold as u64, 0));
            test.into_iter().map(|i| (i, forest.predict(&x[i]))).collect()
        })
        .collect();

    let mut scores = vec![0.0; samples.len()];
    for (i, p) in per_fold.into_iter().flatten() {
        scores[i] = p;
    }
    Ok(samples
        .iter()
        .zip(scores)
        .map(|(s, p)| MembershipScore {
            sample_id: s.sequence.sample_id().to_string(),
            attack: "bows".to_string(),
            score: p,
            label: s.label,
        })
        .collect())
}
