//! Grounding metrics: box accuracy at an IoU threshold, overall and mean mask
//! IoU, and category-match diagnostics.
//!
//! Masks are run-length encoded in column-major order, starting with a run of
//! zeros (the COCO convention).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::ResultRecord;

/// Accuracy counts a prediction when its IoU with the target strictly exceeds this.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("mask shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(u32, u32, u32, u32),
    #[error("invalid box {0:?}")]
    BadBox([f64; 4]),
    #[error("invalid rle: {0}")]
    BadRle(String),
    #[error("query {query_id}: candidate {candidate_id} has no {what}")]
    MissingGeometry {
        query_id: String,
        candidate_id: String,
        what: &'static str,
    },
    #[error("query {query_id}: candidate {candidate_id} has no category")]
    MissingCategory {
        query_id: String,
        candidate_id: String,
    },
    #[error("id mismatch: {0}")]
    IdMismatch(String),
    #[error("invalid annotation {query_id}: {reason}")]
    BadAnnotation { query_id: String, reason: String },
    #[error("empty batch")]
    Empty,
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Box {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, EvalError> {
        let b = [x_min, y_min, x_max, y_max];
        if b.iter().any(|v| !v.is_finite()) || x_min > x_max || y_min > y_max {
            return Err(EvalError::BadBox(b));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

impl TryFrom<[f64; 4]> for Box {
    type Error = EvalError;

    fn try_from(b: [f64; 4]) -> Result<Self, Self::Error> {
        Box::new(b[0], b[1], b[2], b[3])
    }
}

impl From<Box> for [f64; 4] {
    fn from(b: Box) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

pub fn box_iou(a: &Box, b: &Box) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Deserialize)]
struct RleRepr {
    h: u32,
    w: u32,
    runs: Vec<u32>,
}

/// Run-length encoded binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RleRepr")]
pub struct RleMask {
    h: u32,
    w: u32,
    runs: Vec<u32>,
}

impl TryFrom<RleRepr> for RleMask {
    type Error = EvalError;

    fn try_from(r: RleRepr) -> Result<Self, Self::Error> {
        RleMask::new(r.h, r.w, r.runs)
    }
}

impl RleMask {
    pub fn new(h: u32, w: u32, runs: Vec<u32>) -> Result<Self, EvalError> {
        let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        if total != u64::from(h) * u64::from(w) {
            return Err(EvalError::BadRle(format!(
                "runs sum to {total}, expected {h}x{w}"
            )));
        }
        Ok(Self { h, w, runs })
    }

    /// Encodes a column-major bitmap; pixel `(x, y)` lives at `y + h * x`.
    pub fn encode(bits: &[bool], h: u32, w: u32) -> Result<Self, EvalError> {
        if bits.len() as u64 != u64::from(h) * u64::from(w) {
            return Err(EvalError::BadRle(format!(
                "bitmap has {} pixels, expected {h}x{w}",
                bits.len()
            )));
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0u32;
        for &b in bits {
            if b != current {
                runs.push(count);
                count = 0;
                current = b;
            }
            count += 1;
        }
        runs.push(count);
        Ok(Self { h, w, runs })
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut bits = Vec::with_capacity(self.pixels() as usize);
        let mut value = false;
        for &r in &self.runs {
            bits.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        bits
    }

    pub fn height(&self) -> u32 {
        self.h
    }

    pub fn width(&self) -> u32 {
        self.w
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn pixels(&self) -> u64 {
        u64::from(self.h) * u64::from(self.w)
    }

    pub fn area(&self) -> u64 {
        self.runs
            .iter()
            .skip(1)
            .step_by(2)
            .map(|&r| u64::from(r))
            .sum()
    }

    fn check_shape(&self, other: &Self) -> Result<(), EvalError> {
        if self.h != other.h || self.w != other.w {
            return Err(EvalError::ShapeMismatch(self.h, self.w, other.h, other.w));
        }
        Ok(())
    }

    /// Foreground pixels set in both masks, by walking the two run lists.
    pub fn intersection_area(&self, other: &Self) -> Result<u64, EvalError> {
        self.check_shape(other)?;
        let (mut i, mut j) = (0usize, 0usize);
        let (mut left_a, mut left_b) = (0u64, 0u64);
        let (mut val_a, mut val_b) = (true, true);
        let mut inter = 0u64;
        loop {
            // Advance past exhausted runs; the value flips with each new run.
            while left_a == 0 {
                if i >= self.runs.len() {
                    return Ok(inter);
                }
                left_a = u64::from(self.runs[i]);
                val_a = !val_a;
                i += 1;
            }
            while left_b == 0 {
                if j >= other.runs.len() {
                    return Ok(inter);
                }
                left_b = u64::from(other.runs[j]);
                val_b = !val_b;
                j += 1;
            }
            let step = left_a.min(left_b);
            if val_a && val_b {
                inter += step;
            }
            left_a -= step;
            left_b -= step;
        }
    }

    /// `(intersection, union)` pixel counts.
    pub fn overlap(&self, other: &Self) -> Result<(u64, u64), EvalError> {
        let inter = self.intersection_area(other)?;
        Ok((inter, self.area() + other.area() - inter))
    }
}

/// IoU of two masks; two empty masks count as a perfect match.
pub fn mask_iou(a: &RleMask, b: &RleMask) -> Result<f64, EvalError> {
    let (inter, union) = a.overlap(b)?;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn check_aligned(pred: &[RleMask], gt: &[RleMask]) -> Result<(), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::IdMismatch(format!(
            "{} predicted masks vs {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Total intersection over total union across the batch.
pub fn oiou(pred: &[RleMask], gt: &[RleMask]) -> Result<f64, EvalError> {
    check_aligned(pred, gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pred.iter().zip(gt) {
        let (i, u) = p.overlap(g)?;
        inter += i;
        union += u;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean of per-pair mask IoU, summed in input order.
pub fn miou(pred: &[RleMask], gt: &[RleMask]) -> Result<f64, EvalError> {
    check_aligned(pred, gt)?;
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        total += mask_iou(p, g)?;
    }
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Box>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<RleMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub query_id: String,
    #[serde(default)]
    pub query_text: String,
    #[serde(default)]
    pub category: String,
    pub gt_id: String,
    pub candidates: Vec<Candidate>,
}

impl Annotation {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: String| EvalError::BadAnnotation {
            query_id: self.query_id.clone(),
            reason,
        };
        if self.candidates.is_empty() {
            return Err(bad("no candidates".into()));
        }
        let mut ids = HashSet::new();
        for c in &self.candidates {
            if !ids.insert(c.id.as_str()) {
                return Err(bad(format!("duplicate candidate {}", c.id)));
            }
            if c.bbox.is_none() && c.mask.is_none() {
                return Err(bad(format!("candidate {} has neither box nor mask", c.id)));
            }
        }
        if !ids.contains(self.gt_id.as_str()) {
            return Err(bad(format!("gt_id {} is not a candidate", self.gt_id)));
        }
        Ok(())
    }

    pub fn candidate(&self, id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    pub fn gt_position(&self) -> Option<usize> {
        self.candidates.iter().position(|c| c.id == self.gt_id)
    }
}

/// Parses annotation JSONL, validating each line. Blank lines are skipped.
pub fn parse_annotations(text: &str, source: &str) -> Result<Vec<Annotation>, EvalError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse {
            path: source.to_string(),
            line: i + 1,
            message,
        };
        let a: Annotation = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        a.validate().map_err(|e| err(e.to_string()))?;
        if !seen.insert(a.query_id.clone()) {
            return Err(err(format!("duplicate query_id {}", a.query_id)));
        }
        out.push(a);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| EvalError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    parse_annotations(&text, &path.display().to_string())
}

/// Pairs each result with its annotation by query id. Every annotation must
/// have exactly one result and every predicted id must be a candidate.
fn align<'a>(
    results: &'a [ResultRecord],
    annotations: &'a [Annotation],
) -> Result<Vec<(&'a ResultRecord, &'a Annotation)>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let by_id: HashMap<&str, &Annotation> = annotations
        .iter()
        .map(|a| (a.query_id.as_str(), a))
        .collect();
    if results.len() != annotations.len() {
        return Err(EvalError::IdMismatch(format!(
            "{} results vs {} annotations",
            results.len(),
            annotations.len()
        )));
    }
    let mut seen = HashSet::new();
    results
        .iter()
        .map(|r| {
            let a = by_id.get(r.query_id.as_str()).ok_or_else(|| {
                EvalError::IdMismatch(format!("result for unknown query {}", r.query_id))
            })?;
            if !seen.insert(r.query_id.as_str()) {
                return Err(EvalError::IdMismatch(format!(
                    "duplicate result for {}",
                    r.query_id
                )));
            }
            if a.candidate(&r.predicted_id).is_none() {
                return Err(EvalError::IdMismatch(format!(
                    "query {}: predicted {} is not a candidate",
                    r.query_id, r.predicted_id
                )));
            }
            Ok((r, *a))
        })
        .collect()
}

fn candidate_box(a: &Annotation, id: &str) -> Result<Box, EvalError> {
    a.candidate(id)
        .and_then(|c| c.bbox)
        .ok_or_else(|| EvalError::MissingGeometry {
            query_id: a.query_id.clone(),
            candidate_id: id.to_string(),
            what: "box",
        })
}

fn candidate_mask<'a>(a: &'a Annotation, id: &str) -> Result<&'a RleMask, EvalError> {
    a.candidate(id)
        .and_then(|c| c.mask.as_ref())
        .ok_or_else(|| EvalError::MissingGeometry {
            query_id: a.query_id.clone(),
            candidate_id: id.to_string(),
            what: "mask",
        })
}

/// Percentage of predictions whose box IoU with the target exceeds `threshold`.
pub fn rec_accuracy(
    results: &[ResultRecord],
    annotations: &[Annotation],
    threshold: f64,
) -> Result<f64, EvalError> {
    let pairs = align(results, annotations)?;
    let mut correct = 0usize;
    for (r, a) in &pairs {
        let pred = candidate_box(a, &r.predicted_id)?;
        let gt = candidate_box(a, &a.gt_id)?;
        if box_iou(&pred, &gt) > threshold {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / pairs.len() as f64)
}

/// Predicted and ground-truth masks, in result order.
pub fn collect_masks(
    results: &[ResultRecord],
    annotations: &[Annotation],
) -> Result<(Vec<RleMask>, Vec<RleMask>), EvalError> {
    let pairs = align(results, annotations)?;
    let mut pred = Vec::with_capacity(pairs.len());
    let mut gt = Vec::with_capacity(pairs.len());
    for (r, a) in pairs {
        pred.push(candidate_mask(a, &r.predicted_id)?.clone());
        gt.push(candidate_mask(a, &a.gt_id)?.clone());
    }
    Ok((pred, gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryDiagnostics {
    /// Share of predictions whose category matches the target's.
    pub outside_rate: f64,
    /// Among same-category predictions, the share that hit the target itself.
    /// Zero when no prediction shares the target's category.
    pub inside_rate: f64,
    pub same_category: usize,
    pub total: usize,
}

pub fn category_diagnostics(
    results: &[ResultRecord],
    annotations: &[Annotation],
) -> Result<CategoryDiagnostics, EvalError> {
    let pairs = align(results, annotations)?;
    let category = |a: &Annotation, id: &str| -> Result<String, EvalError> {
        a.candidate(id)
            .and_then(|c| c.category.clone())
            .ok_or_else(|| EvalError::MissingCategory {
                query_id: a.query_id.clone(),
                candidate_id: id.to_string(),
            })
    };
    let mut same = 0usize;
    let mut exact = 0usize;
    for (r, a) in &pairs {
        if category(a, &r.predicted_id)? == category(a, &a.gt_id)? {
            same += 1;
            if r.predicted_id == a.gt_id {
                exact += 1;
            }
        }
    }
    let total = pairs.len();
    Ok(CategoryDiagnostics {
        outside_rate: 100.0 * same as f64 / total as f64,
        inside_rate: if same == 0 {
            0.0
        } else {
            100.0 * exact as f64 / same as f64
        },
        same_category: same,
        total,
    })
}
