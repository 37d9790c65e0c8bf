//! Top-1 retrieval over candidate sets with raw, balanced, or hybrid scores.
//!
//! Scores are only ever compared within one candidate set. The same routine
//! serves both directions: for text-to-image the query and auxiliary rows are
//! texts and the candidates images; for image-to-text the roles swap and the
//! auxiliary rows are images.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embstore::{EmbeddingMatrix, Manifest};
use crate::fixed::Fixed6;
use crate::scorebal::{
    balanced_table, hybrid_table, top_margin, BalanceConfig, BalanceError, HybridConfig,
};
use crate::simkern::{similarity_subset, ScoreKind, ScoreTable, SimError, SimilarityConfig};

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("query {query_id}: {what} row {row} out of range ({len} rows)")]
    IndexOutOfRange {
        query_id: String,
        what: &'static str,
        row: usize,
        len: usize,
    },
    #[error("query {0}: no auxiliary rows")]
    EmptyAux(String),
    #[error("query {query_id}: {reason}")]
    BadCandidateSet { query_id: String, reason: String },
    #[error(transparent)]
    Similarity(#[from] SimError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Raw,
    Bsap,
    BsapH,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Self::Raw),
            "bsap" => Ok(Self::Bsap),
            "bsap_h" | "bsap-h" => Ok(Self::BsapH),
            _ => Err(format!("unknown mode {s:?} (expected raw, bsap, bsap_h)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Bsap => "bsap",
            Self::BsapH => "bsap_h",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: String,
    pub query_row: usize,
    pub candidate_rows: Vec<usize>,
    /// Position of the correct candidate within `candidate_rows`.
    #[serde(default)]
    pub gt_candidate: Option<usize>,
    /// Restricts auxiliary rows for this set; all rows are used when absent.
    #[serde(default)]
    pub aux_rows: Option<Vec<usize>>,
}

impl CandidateSet {
    pub fn new(query_id: impl Into<String>, query_row: usize, candidate_rows: Vec<usize>) -> Self {
        Self {
            query_id: query_id.into(),
            query_row,
            candidate_rows,
            gt_candidate: None,
            aux_rows: None,
        }
    }

    pub fn with_gt(mut self, gt: usize) -> Self {
        self.gt_candidate = Some(gt);
        self
    }

    pub fn with_aux_rows(mut self, rows: Vec<usize>) -> Self {
        self.aux_rows = Some(rows);
        self
    }

    fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |reason: String| RetrievalError::BadCandidateSet {
            query_id: self.query_id.clone(),
            reason,
        };
        if self.candidate_rows.is_empty() {
            return Err(bad("no candidates".into()));
        }
        let mut seen = HashSet::new();
        if let Some(r) = self.candidate_rows.iter().find(|r| !seen.insert(**r)) {
            return Err(bad(format!("candidate row {r} repeated")));
        }
        if let Some(g) = self.gt_candidate {
            if g >= self.candidate_rows.len() {
                return Err(bad(format!("gt position {g} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub mode: Mode,
    pub similarity: SimilarityConfig,
    pub balance: BalanceConfig,
    pub hybrid: HybridConfig,
}

impl ScoringConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub mode: Mode,
    /// Position of the winner within the set's `candidate_rows`.
    pub predicted: usize,
    pub predicted_row: usize,
    pub gt_candidate: Option<usize>,
    /// One score per candidate, as used for the argmax.
    pub scores: Vec<f64>,
    pub margin: f64,
}

impl RetrievalResult {
    pub fn is_correct(&self) -> Option<bool> {
        self.gt_candidate.map(|g| g == self.predicted)
    }
}

fn check_row(
    set: &CandidateSet,
    what: &'static str,
    row: usize,
    m: &EmbeddingMatrix,
) -> Result<(), RetrievalError> {
    if row >= m.rows() {
        return Err(RetrievalError::IndexOutOfRange {
            query_id: set.query_id.clone(),
            what,
            row,
            len: m.rows(),
        });
    }
    Ok(())
}

/// Raw similarity table for one set: row 0 holds the query against every
/// candidate, rows `1..=A` each auxiliary row against every candidate.
pub fn set_table(
    set: &CandidateSet,
    queries: &EmbeddingMatrix,
    candidates: &EmbeddingMatrix,
    aux: Option<&EmbeddingMatrix>,
    sim: &SimilarityConfig,
) -> Result<ScoreTable, RetrievalError> {
    set.validate()?;
    check_row(set, "query", set.query_row, queries)?;
    for &r in &set.candidate_rows {
        check_row(set, "candidate", r, candidates)?;
    }
    let query = similarity_subset(
        queries,
        &[set.query_row],
        candidates,
        &set.candidate_rows,
        sim,
    )?;
    let Some(aux) = aux else {
        return Ok(query);
    };
    let aux_rows: Vec<usize> = match &set.aux_rows {
        Some(rows) => {
            for &r in rows {
                check_row(set, "auxiliary", r, aux)?;
            }
            rows.clone()
        }
        None => (0..aux.rows()).collect(),
    };
    if aux_rows.is_empty() {
        return Err(RetrievalError::EmptyAux(set.query_id.clone()));
    }
    let aux_table = similarity_subset(aux, &aux_rows, candidates, &set.candidate_rows, sim)?;
    let mut values = query.values().to_vec();
    values.extend_from_slice(aux_table.values());
    Ok(ScoreTable::new(
        1 + aux_rows.len(),
        set.candidate_rows.len(),
        values,
        ScoreKind::RawSimilarity,
    )?)
}

/// Scores one set under `cfg.mode` and picks the top candidate. Balanced and
/// hybrid scores that round to the same value are ranked by their tie-break
/// keys; exact ties go to the lowest position.
pub fn predict(
    set: &CandidateSet,
    queries: &EmbeddingMatrix,
    candidates: &EmbeddingMatrix,
    aux: Option<&EmbeddingMatrix>,
    cfg: &ScoringConfig,
) -> Result<RetrievalResult, RetrievalError> {
    let aux = match cfg.mode {
        Mode::Raw => None,
        _ => Some(aux.ok_or_else(|| RetrievalError::EmptyAux(set.query_id.clone()))?),
    };
    let table = set_table(set, queries, candidates, aux, &cfg.similarity)?;
    let scored = match cfg.mode {
        Mode::Raw => table,
        Mode::Bsap => balanced_table(&table, &cfg.balance)?,
        Mode::BsapH => {
            let bs = balanced_table(&table, &cfg.balance)?;
            let raw_ref = ScoreTable::new(
                1,
                table.n_candidates(),
                table.row(0).to_vec(),
                ScoreKind::RawSimilarity,
            )?;
            hybrid_table(&bs, &raw_ref, &cfg.hybrid)?
        }
    };
    let predicted = scored.argmax_row(0);
    let scores = scored.row(0).to_vec();
    Ok(RetrievalResult {
        query_id: set.query_id.clone(),
        mode: cfg.mode,
        predicted,
        predicted_row: set.candidate_rows[predicted],
        gt_candidate: set.gt_candidate,
        margin: top_margin(&scores),
        scores,
    })
}

pub fn predict_raw(
    set: &CandidateSet,
    texts: &EmbeddingMatrix,
    images: &EmbeddingMatrix,
    sim: &SimilarityConfig,
) -> Result<RetrievalResult, RetrievalError> {
    let cfg = ScoringConfig {
        mode: Mode::Raw,
        similarity: *sim,
        ..ScoringConfig::default()
    };
    predict(set, texts, images, None, &cfg)
}

pub fn predict_bsap(
    set: &CandidateSet,
    texts: &EmbeddingMatrix,
    images: &EmbeddingMatrix,
    aux_texts: &EmbeddingMatrix,
    balance: &BalanceConfig,
    sim: &SimilarityConfig,
) -> Result<RetrievalResult, RetrievalError> {
    let cfg = ScoringConfig {
        mode: Mode::Bsap,
        similarity: *sim,
        balance: *balance,
        ..ScoringConfig::default()
    };
    predict(set, texts, images, Some(aux_texts), &cfg)
}

pub fn predict_hybrid(
    set: &CandidateSet,
    texts: &EmbeddingMatrix,
    images: &EmbeddingMatrix,
    aux_texts: &EmbeddingMatrix,
    balance: &BalanceConfig,
    sim: &SimilarityConfig,
    hybrid: &HybridConfig,
) -> Result<RetrievalResult, RetrievalError> {
    let cfg = ScoringConfig {
        mode: Mode::BsapH,
        similarity: *sim,
        balance: *balance,
        hybrid: *hybrid,
    };
    predict(set, texts, images, Some(aux_texts), &cfg)
}

/// Image query against text candidates. Balanced scores compare each
/// candidate text's similarity to the query image against its similarity to
/// the auxiliary images.
pub fn predict_image_to_text(
    set: &CandidateSet,
    images: &EmbeddingMatrix,
    texts: &EmbeddingMatrix,
    aux_images: &EmbeddingMatrix,
    cfg: &ScoringConfig,
) -> Result<RetrievalResult, RetrievalError> {
    predict(set, images, texts, Some(aux_images), cfg)
}

/// Scores many sets in parallel; output order follows input order.
pub fn predict_batch(
    sets: &[CandidateSet],
    queries: &EmbeddingMatrix,
    candidates: &EmbeddingMatrix,
    aux: Option<&EmbeddingMatrix>,
    cfg: &ScoringConfig,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    sets.par_iter()
        .map(|s| predict(s, queries, candidates, aux, cfg))
        .collect()
}

/// Percentage of results that picked their ground-truth candidate. Results
/// without a ground truth are skipped.
pub fn top1_accuracy(results: &[RetrievalResult]) -> f64 {
    let judged: Vec<bool> = results
        .iter()
        .filter_map(RetrievalResult::is_correct)
        .collect();
    if judged.is_empty() {
        return 0.0;
    }
    100.0 * judged.iter().filter(|&&c| c).count() as f64 / judged.len() as f64
}

/// One line of the results JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: String,
    pub mode: Mode,
    pub predicted_id: String,
    #[serde(default)]
    pub gt_id: Option<String>,
    #[serde(default)]
    pub scores: Vec<f64>,
    #[serde(default)]
    pub margin: f64,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    query_id: &'a str,
    mode: Mode,
    predicted_id: &'a str,
    gt_id: Option<&'a str>,
    scores: Vec<Fixed6>,
    margin: Fixed6,
}

impl ResultRecord {
    /// Resolves candidate positions to ids through the candidate manifest.
    pub fn from_result(
        r: &RetrievalResult,
        set: &CandidateSet,
        candidates: &Manifest,
    ) -> Option<Self> {
        let id = |pos: usize| candidates.id(set.candidate_rows[pos]).map(String::from);
        Some(Self {
            query_id: r.query_id.clone(),
            mode: r.mode,
            predicted_id: id(r.predicted)?,
            gt_id: match r.gt_candidate {
                Some(g) => Some(id(g)?),
                None => None,
            },
            scores: r.scores.clone(),
            margin: r.margin,
        })
    }

    /// Single JSON line with every number printed to six decimals.
    pub fn to_json_line(&self) -> String {
        let out = RecordOut {
            query_id: &self.query_id,
            mode: self.mode,
            predicted_id: &self.predicted_id,
            gt_id: self.gt_id.as_deref(),
            scores: self.scores.iter().copied().map(Fixed6).collect(),
            margin: Fixed6(self.margin),
        };
        serde_json::to_string(&out).expect("record serializes")
    }
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_candidate() {
        let t = m(&[&[1.0, 0.0]]);
        let i = m(&[&[0.3, 0.7]]);
        let r = predict_raw(
            &CandidateSet::new("q", 0, vec![0]),
            &t,
            &i,
            &SimilarityConfig::default(),
        )
        .unwrap();
        assert_eq!((r.predicted, r.margin), (0, 0.0));
    }

    #[test]
    fn identical_candidate_wins() {
        let t = m(&[&[1.0, 0.0]]);
        let i = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let set = CandidateSet::new("q", 0, vec![0, 1]);
        let r = predict_raw(&set, &t, &i, &SimilarityConfig::default()).unwrap();
        assert_eq!(r.predicted, 1);
        assert_eq!(r.predicted_row, 1);
        assert!((r.margin - 100.0).abs() < 1e-12);
    }

    #[test]
    fn bad_sets() {
        let t = m(&[&[1.0, 0.0]]);
        let i = m(&[&[0.0, 1.0]]);
        let sim = SimilarityConfig::default();
        let oob = CandidateSet::new("q", 0, vec![3]);
        assert!(matches!(
            predict_raw(&oob, &t, &i, &sim),
            Err(RetrievalError::IndexOutOfRange {
                what: "candidate",
                ..
            })
        ));
        let dup = CandidateSet::new("q", 0, vec![0, 0]);
        assert!(predict_raw(&dup, &t, &i, &sim).is_err());
        let empty = CandidateSet::new("q", 0, vec![]);
        assert!(predict_raw(&empty, &t, &i, &sim).is_err());
        let gt = CandidateSet::new("q", 0, vec![0]).with_gt(1);
        assert!(predict_raw(&gt, &t, &i, &sim).is_err());
        let no_aux = CandidateSet::new("q", 0, vec![0]).with_aux_rows(vec![]);
        assert!(matches!(
            predict_bsap(&no_aux, &t, &i, &t, &BalanceConfig::default(), &sim),
            Err(RetrievalError::EmptyAux(_))
        ));
    }

    #[test]
    fn record_line_format() {
        let r = ResultRecord {
            query_id: "q1".into(),
            mode: Mode::BsapH,
            predicted_id: "b".into(),
            gt_id: Some("a".into()),
            scores: vec![0.25, 1.0 / 3.0],
            margin: 0.0833333333,
        };
        let line = r.to_json_line();
        assert_eq!(
            line,
            r#"{"query_id":"q1","mode":"bsap_h","predicted_id":"b","gt_id":"a","scores":[0.250000,0.333333],"margin":0.083333}"#
        );
        let back = parse_results(&line).unwrap();
        assert_eq!(back[0].predicted_id, "b");
        assert_eq!(back[0].scores, vec![0.25, 0.333333]);
    }
}
