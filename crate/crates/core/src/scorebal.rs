//! Balanced and hybrid scoring.
//!
//! A candidate's balanced score compares its query similarity against the
//! aggregate of its auxiliary-prompt similarities:
//!
//! ```text
//! BS = e^sim_r / (e^sim_r + e^agg) = 1 / (1 + e^(agg - sim_r))
//! ```
//!
//! The right-hand form is used. With a scale of 100 and 180 prompts the
//! aggregate can reach +-18000, far outside the range of `f64::exp`.
//!
//! The hybrid score blends balanced scores with the softmax of the raw query
//! similarities: `alpha * BS + (1 - alpha) * softmax(sim_r)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simkern::{ScoreKind, ScoreTable, SimError};

/// Default blend weight for box-level grounding.
pub const DEFAULT_ALPHA_REC: f64 = 0.75;
/// Default blend weight for mask-level grounding.
pub const DEFAULT_ALPHA_RIS: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum BalanceError {
    #[error("no auxiliary scores")]
    EmptyAux,
    #[error("no scores to normalize")]
    EmptyScores,
    #[error("non-finite input {0}")]
    NonFiniteInput(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("unknown {kind} {value:?}")]
    UnknownVariant { kind: &'static str, value: String },
    #[error(transparent)]
    Table(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    #[default]
    Softmax,
    Minmax,
    Direct,
}

impl FromStr for Aggregator {
    type Err = BalanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            _ => Err(BalanceError::UnknownVariant {
                kind: "aggregator",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

impl FromStr for Normalizer {
    type Err = BalanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "minmax" => Ok(Self::Minmax),
            "direct" => Ok(Self::Direct),
            _ => Err(BalanceError::UnknownVariant {
                kind: "normalizer",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Minmax => "minmax",
            Self::Direct => "direct",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub aggregator: Aggregator,
    pub normalizer: Normalizer,
}

impl BalanceConfig {
    pub fn with_aggregator(aggregator: Aggregator) -> Self {
        Self {
            aggregator,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    alpha: f64,
}

impl HybridConfig {
    pub fn new(alpha: f64) -> Result<Self, BalanceError> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Self { alpha })
        } else {
            Err(BalanceError::BadAlpha(alpha))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA_REC,
        }
    }
}

fn check_finite(xs: &[f64]) -> Result<(), BalanceError> {
    match xs.iter().find(|v| !v.is_finite()) {
        Some(&v) => Err(BalanceError::NonFiniteInput(v)),
        None => Ok(()),
    }
}

/// Sum or mean of one candidate's auxiliary similarities.
pub fn aggregate_aux(aux: &[f64], agg: Aggregator) -> Result<f64, BalanceError> {
    if aux.is_empty() {
        return Err(BalanceError::EmptyAux);
    }
    check_finite(aux)?;
    let total: f64 = aux.iter().sum();
    Ok(match agg {
        Aggregator::Sum => total,
        Aggregator::Mean => total / aux.len() as f64,
    })
}

/// Logistic of `sim_r - aux_aggregate`.
///
/// Very large gaps saturate to the representable values closest to 0 and 1,
/// so the result always lies strictly inside `(0, 1)`.
pub fn balanced_score(sim_r: f64, aux_aggregate: f64) -> Result<f64, BalanceError> {
    if !sim_r.is_finite() {
        return Err(BalanceError::NonFiniteInput(sim_r));
    }
    if !aux_aggregate.is_finite() {
        return Err(BalanceError::NonFiniteInput(aux_aggregate));
    }
    let d = sim_r - aux_aggregate;
    Ok(logistic(d))
}

/// Smallest positive `f64` (subnormal).
const PROB_FLOOR: f64 = f64::from_bits(1);
/// Largest `f64` below 1.
const PROB_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

// Splitting on the sign keeps the exponent non-positive, so `exp` never
// overflows and small outputs keep their relative precision.
fn logistic(d: f64) -> f64 {
    let p = if d >= 0.0 {
        1.0 / (1.0 + (-d).exp())
    } else {
        let e = d.exp();
        e / (1.0 + e)
    };
    p.clamp(PROB_FLOOR, PROB_CEIL)
}

/// Normalizes one row of scores with the given method.
///
/// * softmax: max-subtracted exponentials divided by their sum.
/// * minmax: `(x - min) / (max - min)`; a constant row maps to 0.5.
/// * direct: `(x - min) / sum(x - min)`; a constant row maps to `1 / n`.
pub fn normalize(scores: &[f64], method: Normalizer) -> Result<Vec<f64>, BalanceError> {
    if scores.is_empty() {
        return Err(BalanceError::EmptyScores);
    }
    check_finite(scores)?;
    let n = scores.len() as f64;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(match method {
        Normalizer::Softmax => {
            let exps: Vec<f64> = scores.iter().map(|&x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        }
        Normalizer::Minmax => {
            let span = max - min;
            if span == 0.0 {
                vec![0.5; scores.len()]
            } else {
                scores.iter().map(|&x| (x - min) / span).collect()
            }
        }
        Normalizer::Direct => {
            let total: f64 = scores.iter().map(|&x| x - min).sum();
            if total == 0.0 {
                vec![1.0 / n; scores.len()]
            } else {
                scores.iter().map(|&x| (x - min) / total).collect()
            }
        }
    })
}

pub fn softmax(scores: &[f64]) -> Result<Vec<f64>, BalanceError> {
    normalize(scores, Normalizer::Softmax)
}

/// Balanced score of one candidate given its query similarity and the
/// similarities of every auxiliary prompt to it.
///
/// With the softmax normalizer this is the logistic of the gap to the
/// aggregate. Min-max and direct normalization instead rescale the
/// candidate's own score vector `[sim_r, aux_1, .., aux_A]` and report the
/// query entry; the aggregator is not used by them.
pub fn balance_candidate(
    sim_r: f64,
    aux: &[f64],
    cfg: &BalanceConfig,
) -> Result<f64, BalanceError> {
    match cfg.normalizer {
        Normalizer::Softmax => balanced_score(sim_r, aggregate_aux(aux, cfg.aggregator)?),
        method => {
            if aux.is_empty() {
                return Err(BalanceError::EmptyAux);
            }
            let mut v = Vec::with_capacity(aux.len() + 1);
            v.push(sim_r);
            v.extend_from_slice(aux);
            Ok(normalize(&v, method)?[0])
        }
    }
}

/// Balanced scores for one candidate set.
///
/// `raw` holds the query similarities in row 0 and one row per auxiliary
/// prompt after it; columns are candidates. Returns a `1 x n` table. With the
/// softmax normalizer the gaps `sim_r - aggregate` ride along as tie-break
/// keys.
pub fn balanced_table(raw: &ScoreTable, cfg: &BalanceConfig) -> Result<ScoreTable, BalanceError> {
    if raw.n_texts() < 2 {
        return Err(if raw.n_texts() == 1 {
            BalanceError::EmptyAux
        } else {
            BalanceError::ShapeMismatch("table has no query row".into())
        });
    }
    let n = raw.n_candidates();
    let a = raw.n_texts() - 1;
    let mut aux = vec![0.0; a];
    let mut out = Vec::with_capacity(n);
    let mut gaps = Vec::with_capacity(n);
    for m in 0..n {
        for (i, slot) in aux.iter_mut().enumerate() {
            *slot = raw.get(i + 1, m);
        }
        let sim_r = raw.get(0, m);
        if cfg.normalizer == Normalizer::Softmax {
            let agg = aggregate_aux(&aux, cfg.aggregator)?;
            out.push(balanced_score(sim_r, agg)?);
            gaps.push(sim_r - agg);
        } else {
            out.push(balance_candidate(sim_r, &aux, cfg)?);
        }
    }
    let table = ScoreTable::new(1, n, out, ScoreKind::Balanced)?;
    Ok(if gaps.is_empty() {
        table
    } else {
        table.with_tie_break(gaps)?
    })
}

/// `alpha * balanced + (1 - alpha) * softmax(raw_ref)` row by row.
///
/// Ties are broken by the same blend of the balanced table's own ranking key
/// and the raw similarity, so `alpha = 1` ranks exactly like the balanced
/// table and `alpha = 0` exactly like the raw scores.
pub fn hybrid_table(
    balanced: &ScoreTable,
    raw_ref: &ScoreTable,
    cfg: &HybridConfig,
) -> Result<ScoreTable, BalanceError> {
    if balanced.n_texts() != raw_ref.n_texts() || balanced.n_candidates() != raw_ref.n_candidates()
    {
        return Err(BalanceError::ShapeMismatch(format!(
            "balanced {}x{} vs raw {}x{}",
            balanced.n_texts(),
            balanced.n_candidates(),
            raw_ref.n_texts(),
            raw_ref.n_candidates()
        )));
    }
    let alpha = cfg.alpha;
    let mut out = Vec::with_capacity(balanced.values().len());
    let mut keys = Vec::with_capacity(balanced.values().len());
    for t in 0..balanced.n_texts() {
        let s_ref = softmax(raw_ref.row(t))?;
        out.extend(
            balanced
                .row(t)
                .iter()
                .zip(s_ref)
                .map(|(&bs, s)| alpha * bs + (1.0 - alpha) * s),
        );
        let bs_key = balanced.tie_break_row(t).unwrap_or(balanced.row(t));
        keys.extend(
            bs_key
                .iter()
                .zip(raw_ref.row(t))
                .map(|(&k, &r)| alpha * k + (1.0 - alpha) * r),
        );
    }
    Ok(ScoreTable::new(
        balanced.n_texts(),
        balanced.n_candidates(),
        out,
        ScoreKind::Hybrid,
    )?
    .with_tie_break(keys)?)
}

/// Index of the largest value; ties go to the lowest index.
///
/// Panics on an empty slice.
pub fn argmax(xs: &[f64]) -> usize {
    assert!(!xs.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Gap between the best and second-best score; 0 for a single score.
pub fn top_margin(xs: &[f64]) -> f64 {
    let best = argmax(xs);
    xs.iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &x)| xs[best] - x)
        .reduce(f64::min)
        .unwrap_or(0.0)
}
