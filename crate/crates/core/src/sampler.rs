//! Failure-weighted sampling of validation images and nearest-neighbour
//! matching into the augmentation pool.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pca::Coords2D;
use crate::saliency::FailureScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `w_i ∝ C_i`: likely failures are drawn more often.
    #[default]
    Failure,
    /// `w_i ∝ 1 - C_i`, the normalisation as literally printed.
    Eq7,
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Failure => "failure",
            WeightMode::Eq7 => "eq7",
        })
    }
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "failure" => Ok(WeightMode::Failure),
            "eq7" | "eq7-literal" => Ok(WeightMode::Eq7),
            other => Err(format!(
                "unknown weight mode `{other}` (expected failure or eq7)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWeights {
    pub ids: Vec<String>,
    pub weights: Vec<f64>,
    pub mode: WeightMode,
    /// Set when the normaliser was zero and uniform weights were used.
    pub fallback_uniform: bool,
}

pub fn make_weights(failures: &FailureScores, mode: WeightMode) -> Result<SampleWeights> {
    if failures.is_empty() {
        return Err(Error::Empty("no failure scores to weight"));
    }
    let raw: Vec<f64> = failures
        .entries
        .iter()
        .map(|e| match mode {
            WeightMode::Failure => e.failure,
            WeightMode::Eq7 => 1.0 - e.failure,
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let n = raw.len();
    let (weights, fallback_uniform) = if total > 0.0 {
        (raw.iter().map(|v| v / total).collect(), false)
    } else {
        log::warn!("{mode} weights sum to zero; falling back to uniform sampling");
        (vec![1.0 / n as f64; n], true)
    };
    Ok(SampleWeights {
        ids: failures.entries.iter().map(|e| e.id.clone()).collect(),
        weights,
        mode,
        fallback_uniform,
    })
}

/// `k` categorical draws with replacement by inverse CDF.
pub fn sample(weights: &SampleWeights, k: usize, seed: u64) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::InvalidParameter("sample size k must be >= 1".into()));
    }
    if weights.weights.is_empty() {
        return Err(Error::Empty("no weights to sample from"));
    }
    let mut cdf = Vec::with_capacity(weights.weights.len());
    let mut acc = 0.0;
    for &w in &weights.weights {
        acc += w;
        cdf.push(acc);
    }
    let last = cdf.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let i = cdf.partition_point(|&c| c <= u).min(last);
            weights.ids[i].clone()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    /// Sampled validation ids, with multiplicity.
    pub sampled_val_ids: Vec<String>,
    /// Matched pool ids in first-seen order, without repeats.
    pub matched_pool_ids: Vec<String>,
    /// Distance from each matched pool point to the query that first found it.
    pub distances: Vec<f64>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Indices and distances of the `m` pool points closest to `query`, nearest
/// first, lower index first on ties.
pub fn nearest(query: [f64; 2], pool: &Coords2D, m: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = pool
        .points
        .iter()
        .enumerate()
        .map(|(i, &p)| (i, dist(query, p)))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(m);
    all
}

pub fn match_pool(
    sampled_ids: &[String],
    val_coords: &Coords2D,
    pool_coords: &Coords2D,
    m: usize,
) -> Result<MatchSet> {
    if pool_coords.is_empty() {
        return Err(Error::Empty("augmentation pool"));
    }
    if m == 0 {
        return Err(Error::InvalidParameter(
            "neighbours per sample m must be >= 1".into(),
        ));
    }
    let val_index: HashMap<&str, usize> = val_coords
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut seen = HashSet::new();
    let mut matched = Vec::new();
    let mut distances = Vec::new();
    let mut cache: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
    for id in sampled_ids {
        let &vi = val_index
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownId(id.clone()))?;
        let hits = cache
            .entry(vi)
            .or_insert_with(|| nearest(val_coords.points[vi], pool_coords, m));
        for &(pi, d) in hits.iter() {
            if seen.insert(pi) {
                matched.push(pool_coords.ids[pi].clone());
                distances.push(d);
            }
        }
    }
    Ok(MatchSet {
        sampled_val_ids: sampled_ids.to_vec(),
        matched_pool_ids: matched,
        distances,
    })
}
