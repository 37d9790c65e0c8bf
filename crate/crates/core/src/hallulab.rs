//! Synthetic populations with controlled score-range imbalance.
//!
//! Every vector is unit length and built from orthogonal axes:
//!
//! | axis          | texts                     | images                       |
//! |---------------|---------------------------|------------------------------|
//! | 0 shared      | `w` (common weight)        | `b` (common weight)          |
//! | 1 text filler | fills text norm to 1      | 0                            |
//! | 2 image filler| 0                         | fills image norm to 1        |
//! | 3.. class     | `c` on its own class axis | `s` on its class axis + noise|
//! | rest          | 0                         | noise                        |
//!
//! so `cos(text_k, image) = w_k * b + c * (s * [same class] + noise_k)`. The
//! first term is a per-pair additive offset. Raising `b` for a class of images
//! (or `w` for a class of texts) lifts every score involving them by the same
//! amount, which is the imbalanced-range pathology. The shift is common to the
//! query and to every auxiliary similarity of a candidate, so it cancels in
//! `sim_r - mean(aux)`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embstore::{EmbError, EmbeddingMatrix, Manifest, Modality};
use crate::fixed::fmt6;
use crate::retrieval::{
    predict_batch, top1_accuracy, CandidateSet, Mode, RetrievalError, RetrievalResult,
    ScoringConfig,
};
use crate::scorebal::{Aggregator, BalanceConfig, HybridConfig};
use crate::simkern::SimilarityConfig;

const G1: &str = include_str!("../assets/hallulab/g1.json");
const UNBIASED: &str = include_str!("../assets/hallulab/unbiased.json");
const FIG3_PAIR: &str = include_str!("../assets/hallulab/fig3_pair.json");

/// Extra cosine gap added on top of the minimum shift that separates ranges.
const CALIBRATION_MARGIN: f64 = 0.02;

#[derive(Debug, Error)]
pub enum HalluError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Embedding(#[from] EmbError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Either an explicit cosine offset or one derived from the sampled noise so
/// that the biased class's lowest score beats every other class's highest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OffsetBias {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl OffsetBias {
    pub const AUTO: Self = OffsetBias::Auto(AutoTag::Auto);
}

/// Which modality carries the injected offset. Image-side bias is measured
/// with text queries; text-side bias with image queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasSide {
    #[default]
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPopulationConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Larger values keep instances closer to their class anchor.
    pub intra_concentration: f64,
    pub offset_bias: OffsetBias,
    #[serde(default)]
    pub biased_classes: Vec<usize>,
    #[serde(default)]
    pub bias_side: BiasSide,
    pub seed: u64,
}

impl SyntheticPopulationConfig {
    pub fn g1() -> Self {
        serde_json::from_str(G1).expect("shipped g1 config parses")
    }

    pub fn unbiased() -> Self {
        serde_json::from_str(UNBIASED).expect("shipped unbiased config parses")
    }

    pub fn fig3_pair() -> Self {
        serde_json::from_str(FIG3_PAIR).expect("shipped fig3 config parses")
    }

    pub fn validate(&self) -> Result<(), HalluError> {
        let bad = |m: String| Err(HalluError::BadConfig(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.per_class == 0 {
            return bad("per_class must be positive".into());
        }
        if self.dim < self.n_classes + 3 {
            return bad(format!(
                "dim must be at least n_classes + 3 = {}, got {}",
                self.n_classes + 3,
                self.dim
            ));
        }
        if !(self.intra_concentration > 0.0 && self.intra_concentration.is_finite()) {
            return bad("intra_concentration must be positive".into());
        }
        if let OffsetBias::Fixed(b) = self.offset_bias {
            if !(b >= 0.0 && b.is_finite()) {
                return bad(format!("offset_bias must be >= 0, got {b}"));
            }
        }
        if let Some(&c) = self.biased_classes.iter().find(|&&c| c >= self.n_classes) {
            return bad(format!("biased class {c} out of range"));
        }
        Ok(())
    }
}

/// Axis weights; see the module table.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    text_common: f64,
    text_class: f64,
    image_common: f64,
    image_class: f64,
}

impl Geometry {
    // The biased side gets the small common weight so that raising it stays
    // within the unit ball; the other side's large weight makes that raise
    // translate into a large cosine shift.
    fn for_side(side: BiasSide) -> Self {
        match side {
            BiasSide::Image => Self {
                text_common: 0.7,
                text_class: 0.5,
                image_common: 0.3,
                image_class: 0.4,
            },
            BiasSide::Text => Self {
                text_common: 0.3,
                text_class: 0.4,
                image_common: 0.7,
                image_class: 0.5,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    pub config: SyntheticPopulationConfig,
    /// One anchor text per class, row = class.
    pub texts: EmbeddingMatrix,
    pub images: EmbeddingMatrix,
    pub text_manifest: Manifest,
    pub image_manifest: Manifest,
    pub image_labels: Vec<usize>,
    /// Each text against image `j` of every class, for every `j`.
    pub text_to_image: Vec<CandidateSet>,
    /// Each image against every class text, with one auxiliary image drawn
    /// from a different class.
    pub image_to_text: Vec<CandidateSet>,
    /// Cosine offset actually applied to the biased classes.
    pub offset_bias_used: f64,
}

impl Population {
    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn image_row(&self, class: usize, instance: usize) -> usize {
        class * self.config.per_class + instance
    }
}

fn unit_pad(parts: f64) -> Result<f64, HalluError> {
    let rest = 1.0 - parts;
    if rest < -1e-12 {
        return Err(HalluError::BadConfig(format!(
            "bias too large for a unit vector (squared norm {parts:.4} before padding)"
        )));
    }
    Ok(rest.max(0.0).sqrt())
}

/// Samples a population. Deterministic for a given config.
pub fn generate(config: &SyntheticPopulationConfig) -> Result<Population, HalluError> {
    config.validate()?;
    let n = config.n_classes;
    let per = config.per_class;
    let dim = config.dim;
    let geo = Geometry::for_side(config.bias_side);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Noise lives on the class axes and the spare axes; its expected norm is
    // 1 / sqrt(concentration).
    let noise_dims = dim - 3;
    let sd = 1.0 / (config.intra_concentration.sqrt() * (noise_dims as f64).sqrt());
    let normal = Normal::new(0.0, sd).map_err(|e| HalluError::BadConfig(e.to_string()))?;
    let noise: Vec<Vec<f64>> = (0..n * per)
        .map(|_| (0..noise_dims).map(|_| normal.sample(&mut rng)).collect())
        .collect();

    let biased = |c: usize| config.biased_classes.contains(&c);
    // Unbiased cosine of image `i` with class text `k`.
    let base_cos = |i: usize, k: usize| {
        let class = i / per;
        let own = if class == k { geo.image_class } else { 0.0 };
        geo.text_common * geo.image_common + geo.text_class * (own + noise[i][k])
    };

    let shift = match config.offset_bias {
        OffsetBias::Fixed(b) => b,
        OffsetBias::Auto(_) if config.biased_classes.is_empty() => 0.0,
        OffsetBias::Auto(_) => {
            let mut need = f64::NEG_INFINITY;
            match config.bias_side {
                // For every text, the biased images' lowest score must beat
                // every unbiased image's highest.
                BiasSide::Image => {
                    for k in 0..n {
                        let lo = (0..n * per)
                            .filter(|&i| biased(i / per))
                            .map(|i| base_cos(i, k))
                            .fold(f64::INFINITY, f64::min);
                        let hi = (0..n * per)
                            .filter(|&i| !biased(i / per))
                            .map(|i| base_cos(i, k))
                            .fold(f64::NEG_INFINITY, f64::max);
                        need = need.max(hi - lo);
                    }
                }
                // For every image, the biased texts' lowest score must beat
                // every unbiased text's highest.
                BiasSide::Text => {
                    for i in 0..n * per {
                        let lo = (0..n)
                            .filter(|&k| biased(k))
                            .map(|k| base_cos(i, k))
                            .fold(f64::INFINITY, f64::min);
                        let hi = (0..n)
                            .filter(|&k| !biased(k))
                            .map(|k| base_cos(i, k))
                            .fold(f64::NEG_INFINITY, f64::max);
                        need = need.max(hi - lo);
                    }
                }
            }
            need.max(0.0) + CALIBRATION_MARGIN
        }
    };

    let mut texts = Vec::with_capacity(n * dim);
    for k in 0..n {
        let mut v = vec![0.0f64; dim];
        v[0] = geo.text_common;
        if biased(k) && config.bias_side == BiasSide::Text {
            v[0] += shift / geo.image_common;
        }
        v[3 + k] = geo.text_class;
        v[1] = unit_pad(v[0] * v[0] + geo.text_class * geo.text_class)?;
        texts.extend(v.into_iter().map(|x| x as f32));
    }

    let mut images = Vec::with_capacity(n * per * dim);
    for (i, eps) in noise.iter().enumerate() {
        let class = i / per;
        let mut v = vec![0.0f64; dim];
        v[0] = geo.image_common;
        if biased(class) && config.bias_side == BiasSide::Image {
            v[0] += shift / geo.text_common;
        }
        v[3..].copy_from_slice(eps);
        v[3 + class] += geo.image_class;
        let sq: f64 = v.iter().map(|x| x * x).sum();
        v[2] = unit_pad(sq)?;
        images.extend(v.into_iter().map(|x| x as f32));
    }

    let texts = EmbeddingMatrix::new(n, dim, texts)?;
    let images = EmbeddingMatrix::new(n * per, dim, images)?;
    let text_manifest =
        Manifest::from_ids((0..n).map(|k| format!("class_{k:02}")), Modality::Text)?;
    let image_manifest = Manifest::from_ids(
        (0..n * per).map(|i| format!("img_c{:02}_{:04}", i / per, i % per)),
        Modality::Image,
    )?;
    let image_labels: Vec<usize> = (0..n * per).map(|i| i / per).collect();

    let mut text_to_image = Vec::with_capacity(n * per);
    for k in 0..n {
        for j in 0..per {
            let rows = (0..n).map(|c| c * per + j).collect();
            text_to_image.push(CandidateSet::new(format!("t{k:02}_{j:04}"), k, rows).with_gt(k));
        }
    }

    let mut image_to_text = Vec::with_capacity(n * per);
    for i in 0..n * per {
        let class = i / per;
        let other = (class + rng.random_range(1..n)) % n;
        let aux = other * per + rng.random_range(0..per);
        image_to_text.push(
            CandidateSet::new(format!("i{class:02}_{:04}", i % per), i, (0..n).collect())
                .with_gt(class)
                .with_aux_rows(vec![aux]),
        );
    }

    Ok(Population {
        config: config.clone(),
        texts,
        images,
        text_manifest,
        image_manifest,
        image_labels,
        text_to_image,
        image_to_text,
        offset_bias_used: shift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub similarity: SimilarityConfig,
    pub aggregator: Aggregator,
    pub alpha: f64,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            similarity: SimilarityConfig::default(),
            aggregator: Aggregator::Mean,
            alpha: crate::scorebal::DEFAULT_ALPHA_REC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub a: usize,
    pub b: usize,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: usize,
    pub queries: usize,
    pub raw_accuracy: f64,
    pub bsap_accuracy: f64,
    pub hybrid_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub direction: String,
    pub n_sets: usize,
    pub offset_bias_used: f64,
    pub aggregator: Aggregator,
    pub alpha: f64,
    pub raw_accuracy: f64,
    pub bsap_accuracy: f64,
    pub hybrid_accuracy: f64,
    /// BSAP with the other aggregator, for comparison.
    pub bsap_alt_accuracy: f64,
    pub mean_range_overlap: f64,
    pub range_overlap: Vec<PairOverlap>,
    pub per_class: Vec<ClassBreakdown>,
}

/// Overlap length of two closed intervals over the length of their hull.
/// Two identical points overlap fully.
pub fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    if union <= 0.0 {
        1.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// The sets, query matrix, candidate matrix and auxiliary matrix for the
/// direction that exercises the configured bias.
fn measured_direction(
    pop: &Population,
) -> (
    &[CandidateSet],
    &EmbeddingMatrix,
    &EmbeddingMatrix,
    &EmbeddingMatrix,
    &'static str,
) {
    match pop.config.bias_side {
        BiasSide::Image => (
            &pop.text_to_image,
            &pop.texts,
            &pop.images,
            &pop.texts,
            "text_to_image",
        ),
        BiasSide::Text => (
            &pop.image_to_text,
            &pop.images,
            &pop.texts,
            &pop.images,
            "image_to_text",
        ),
    }
}

/// Class of the candidate at position `pos` in a set of the measured direction.
fn candidate_class(pop: &Population, set: &CandidateSet, pos: usize) -> usize {
    match pop.config.bias_side {
        BiasSide::Image => pop.image_labels[set.candidate_rows[pos]],
        BiasSide::Text => set.candidate_rows[pos],
    }
}

fn query_class(pop: &Population, set: &CandidateSet) -> usize {
    match pop.config.bias_side {
        BiasSide::Image => set.query_row,
        BiasSide::Text => pop.image_labels[set.query_row],
    }
}

fn class_accuracy(
    pop: &Population,
    sets: &[CandidateSet],
    results: &[RetrievalResult],
    class: Option<usize>,
) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (s, r) in sets.iter().zip(results) {
        let q = query_class(pop, s);
        if class.is_some_and(|c| c != q) {
            continue;
        }
        total += 1;
        if candidate_class(pop, s, r.predicted) == q {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        100.0 * hit as f64 / total as f64
    }
}

/// Raw score range of each candidate class across all queries.
fn class_ranges(pop: &Population, cfg: &MeasureConfig) -> Result<Vec<(f64, f64)>, HalluError> {
    let n = pop.n_classes();
    let table = crate::simkern::similarity_matrix(&pop.texts, &pop.images, &cfg.similarity)
        .map_err(RetrievalError::from)?;
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
    for k in 0..n {
        for (i, &v) in table.row(k).iter().enumerate() {
            let class = match pop.config.bias_side {
                BiasSide::Image => pop.image_labels[i],
                BiasSide::Text => k,
            };
            let r = &mut ranges[class];
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
    Ok(ranges)
}

/// Runs raw, balanced and hybrid retrieval over the population and
/// summarizes accuracy and score-range overlap.
pub fn measure(pop: &Population, cfg: &MeasureConfig) -> Result<HallucinationReport, HalluError> {
    let (sets, queries, candidates, aux, direction) = measured_direction(pop);
    if pop.texts.dim() != pop.images.dim() {
        return Err(HalluError::ShapeMismatch(format!(
            "text dim {} vs image dim {}",
            pop.texts.dim(),
            pop.images.dim()
        )));
    }
    if pop.image_labels.len() != pop.images.rows() {
        return Err(HalluError::ShapeMismatch(
            "one label per image required".into(),
        ));
    }
    let hybrid = HybridConfig::new(cfg.alpha).map_err(RetrievalError::from)?;
    let scoring = |mode: Mode, aggregator: Aggregator| ScoringConfig {
        mode,
        similarity: cfg.similarity,
        balance: BalanceConfig::with_aggregator(aggregator),
        hybrid,
    };
    let alt = match cfg.aggregator {
        Aggregator::Sum => Aggregator::Mean,
        Aggregator::Mean => Aggregator::Sum,
    };
    let run = |mode, agg| predict_batch(sets, queries, candidates, Some(aux), &scoring(mode, agg));
    let raw = run(Mode::Raw, cfg.aggregator)?;
    let bsap = run(Mode::Bsap, cfg.aggregator)?;
    let hyb = run(Mode::BsapH, cfg.aggregator)?;
    let bsap_alt = run(Mode::Bsap, alt)?;

    let n = pop.n_classes();
    let per_class = (0..n)
        .map(|c| ClassBreakdown {
            class: c,
            queries: sets.iter().filter(|s| query_class(pop, s) == c).count(),
            raw_accuracy: class_accuracy(pop, sets, &raw, Some(c)),
            bsap_accuracy: class_accuracy(pop, sets, &bsap, Some(c)),
            hybrid_accuracy: class_accuracy(pop, sets, &hyb, Some(c)),
        })
        .collect();

    let ranges = class_ranges(pop, cfg)?;
    let mut range_overlap = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            range_overlap.push(PairOverlap {
                a,
                b,
                overlap: interval_overlap(ranges[a], ranges[b]),
            });
        }
    }
    let mean_range_overlap =
        range_overlap.iter().map(|p| p.overlap).sum::<f64>() / range_overlap.len() as f64;

    Ok(HallucinationReport {
        direction: direction.to_string(),
        n_sets: sets.len(),
        offset_bias_used: pop.offset_bias_used,
        aggregator: cfg.aggregator,
        alpha: cfg.alpha,
        raw_accuracy: class_accuracy(pop, sets, &raw, None),
        bsap_accuracy: class_accuracy(pop, sets, &bsap, None),
        hybrid_accuracy: class_accuracy(pop, sets, &hyb, None),
        bsap_alt_accuracy: class_accuracy(pop, sets, &bsap_alt, None),
        mean_range_overlap,
        range_overlap,
        per_class,
    })
}

/// Top-1 accuracy of the hybrid score at one blend weight.
pub fn hybrid_accuracy(
    pop: &Population,
    cfg: &MeasureConfig,
    alpha: f64,
) -> Result<f64, HalluError> {
    let (sets, queries, candidates, aux, _) = measured_direction(pop);
    let scoring = ScoringConfig {
        mode: Mode::BsapH,
        similarity: cfg.similarity,
        balance: BalanceConfig::with_aggregator(cfg.aggregator),
        hybrid: HybridConfig::new(alpha).map_err(RetrievalError::from)?,
    };
    let results = predict_batch(sets, queries, candidates, Some(aux), &scoring)?;
    Ok(top1_accuracy(&results))
}

/// Sorted raw scores per (query class, candidate class) as CSV with header
/// `query_class,candidate_class,rank,raw_score`. Ranks count from 0 in
/// descending score order.
pub fn scatter_csv(pop: &Population, sim: &SimilarityConfig) -> Result<String, HalluError> {
    let table = crate::simkern::similarity_matrix(&pop.texts, &pop.images, sim)
        .map_err(RetrievalError::from)?;
    let n = pop.n_classes();
    let per = pop.config.per_class;
    let mut out = String::from("query_class,candidate_class,rank,raw_score\n");
    for k in 0..n {
        for c in 0..n {
            let mut scores: Vec<f64> = (0..per)
                .map(|j| table.get(k, pop.image_row(c, j)))
                .collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            for (rank, s) in scores.iter().enumerate() {
                let _ = writeln!(out, "{k},{c},{rank},{}", fmt6(*s));
            }
        }
    }
    Ok(out)
}
