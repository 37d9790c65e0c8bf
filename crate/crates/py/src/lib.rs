//! Python bindings. Matrices cross the boundary as lists of rows, masks as
//! `(h, w, runs)` tuples and reports as JSON strings.

use std::fmt::Display;
use std::str::FromStr;

use bsap_core::embstore::{self, EmbeddingMatrix};
use bsap_core::evalkit::{self, RleMask};
use bsap_core::hallulab::{self, MeasureConfig, SyntheticPopulationConfig};
use bsap_core::promptgen::{self, HeadList, TemplateCatalog};
use bsap_core::retrieval::{self, CandidateSet, Mode, ScoringConfig};
use bsap_core::scorebal::{self, Aggregator, BalanceConfig, HybridConfig, Normalizer};
use bsap_core::simkern::SimilarityConfig;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: FromStr>(s: &str) -> PyResult<T>
where
    T::Err: Display,
{
    s.parse().map_err(value_err)
}

fn mask(m: (u32, u32, Vec<u32>)) -> PyResult<RleMask> {
    RleMask::new(m.0, m.1, m.2).map_err(value_err)
}

fn masks(ms: Vec<(u32, u32, Vec<u32>)>) -> PyResult<Vec<RleMask>> {
    ms.into_iter().map(mask).collect()
}

/// Dense f32 embedding matrix.
#[pyclass(name = "Matrix", module = "bsap", frozen)]
struct PyMatrix {
    inner: EmbeddingMatrix,
}

#[pymethods]
impl PyMatrix {
    #[new]
    fn new(rows: Vec<Vec<f32>>) -> PyResult<Self> {
        let inner = EmbeddingMatrix::from_rows(&rows).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = embstore::load_matrix(path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        embstore::save_matrix(&self.inner, path).map_err(value_err)
    }

    fn l2_normalize(&self) -> PyResult<Self> {
        let inner = self.inner.l2_normalize().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.inner.iter_rows().map(<[f32]>::to_vec).collect()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn __len__(&self) -> usize {
        self.inner.rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "Matrix(rows={}, dim={})",
            self.inner.rows(),
            self.inner.dim()
        )
    }
}

#[pyfunction]
fn balanced_score(sim: f64, aux_aggregate: f64) -> PyResult<f64> {
    scorebal::balanced_score(sim, aux_aggregate).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (scores, method = "softmax"))]
fn normalize(scores: Vec<f64>, method: &str) -> PyResult<Vec<f64>> {
    scorebal::normalize(&scores, parse::<Normalizer>(method)?).map_err(value_err)
}

/// Top-1 prediction of one query over its candidates.
/// Returns `(predicted, scores, margin)`.
#[pyfunction]
#[pyo3(signature = (
    query, candidates, aux = None, mode = "raw", gamma = 100.0, alpha = 0.75,
    aggregator = "sum", normalizer = "softmax"
))]
#[allow(clippy::too_many_arguments)]
fn predict(
    query: Vec<f32>,
    candidates: &PyMatrix,
    aux: Option<PyRef<'_, PyMatrix>>,
    mode: &str,
    gamma: f64,
    alpha: f64,
    aggregator: &str,
    normalizer: &str,
) -> PyResult<(usize, Vec<f64>, f64)> {
    let cfg = ScoringConfig {
        mode: parse::<Mode>(mode)?,
        similarity: SimilarityConfig::new(gamma).map_err(value_err)?,
        balance: BalanceConfig {
            aggregator: parse::<Aggregator>(aggregator)?,
            normalizer: parse::<Normalizer>(normalizer)?,
        },
        hybrid: HybridConfig::new(alpha).map_err(value_err)?,
    };
    let queries = EmbeddingMatrix::from_rows(&[query]).map_err(value_err)?;
    let set = CandidateSet::new("q", 0, (0..candidates.inner.rows()).collect());
    let aux = aux.as_ref().map(|m| &m.inner);
    let r = retrieval::predict(&set, &queries, &candidates.inner, aux, &cfg).map_err(value_err)?;
    Ok((r.predicted, r.scores, r.margin))
}

#[pyfunction]
fn box_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    let a = evalkit::Box::new(a.0, a.1, a.2, a.3).map_err(value_err)?;
    let b = evalkit::Box::new(b.0, b.1, b.2, b.3).map_err(value_err)?;
    Ok(evalkit::box_iou(&a, &b))
}

/// Column-major run lengths of a flattened `h x w` mask, starting with zeros.
#[pyfunction]
fn encode_mask(bits: Vec<bool>, h: u32, w: u32) -> PyResult<Vec<u32>> {
    Ok(RleMask::encode(&bits, h, w)
        .map_err(value_err)?
        .runs()
        .to_vec())
}

#[pyfunction]
fn decode_mask(m: (u32, u32, Vec<u32>)) -> PyResult<Vec<bool>> {
    Ok(mask(m)?.decode())
}

#[pyfunction]
fn mask_iou(a: (u32, u32, Vec<u32>), b: (u32, u32, Vec<u32>)) -> PyResult<f64> {
    evalkit::mask_iou(&mask(a)?, &mask(b)?).map_err(value_err)
}

#[pyfunction]
fn oiou(pred: Vec<(u32, u32, Vec<u32>)>, gt: Vec<(u32, u32, Vec<u32>)>) -> PyResult<f64> {
    evalkit::oiou(&masks(pred)?, &masks(gt)?).map_err(value_err)
}

#[pyfunction]
fn miou(pred: Vec<(u32, u32, Vec<u32>)>, gt: Vec<(u32, u32, Vec<u32>)>) -> PyResult<f64> {
    evalkit::miou(&masks(pred)?, &masks(gt)?).map_err(value_err)
}

/// Generates a synthetic population and returns the measurement report as
/// JSON. `population` is a preset name or a JSON config string.
#[pyfunction]
#[pyo3(signature = (population = "g1", aggregator = "mean", alpha = 0.75, seed = None))]
fn simulate(population: &str, aggregator: &str, alpha: f64, seed: Option<u64>) -> PyResult<String> {
    let mut config = match population {
        "g1" => SyntheticPopulationConfig::g1(),
        "unbiased" => SyntheticPopulationConfig::unbiased(),
        "fig3_pair" => SyntheticPopulationConfig::fig3_pair(),
        text => serde_json::from_str(text).map_err(value_err)?,
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let pop = hallulab::generate(&config).map_err(value_err)?;
    let cfg = MeasureConfig {
        aggregator: parse(aggregator)?,
        alpha,
        ..MeasureConfig::default()
    };
    let report = hallulab::measure(&pop, &cfg).map_err(value_err)?;
    serde_json::to_string(&report).map_err(value_err)
}

/// Auxiliary prompts from builtin head lists. The template matches
/// `query_words` when given, else the default template is used.
#[pyfunction]
#[pyo3(signature = (heads = vec!["coco80".to_string(), "cifar100".to_string()], query_words = None))]
fn build_catalog(heads: Vec<String>, query_words: Option<usize>) -> PyResult<Vec<String>> {
    let lists = heads
        .iter()
        .map(|h| HeadList::builtin(h))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let template = match query_words {
        Some(n) => promptgen::select_template(&TemplateCatalog::builtin(), n).0,
        None => promptgen::DEFAULT_TEMPLATE.to_string(),
    };
    let cat = promptgen::build_catalog(&lists, &template, false).map_err(value_err)?;
    Ok(cat.prompts)
}

#[pymodule]
pub fn bsap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatrix>()?;
    m.add_function(wrap_pyfunction!(balanced_score, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(box_iou, m)?)?;
    m.add_function(wrap_pyfunction!(encode_mask, m)?)?;
    m.add_function(wrap_pyfunction!(decode_mask, m)?)?;
    m.add_function(wrap_pyfunction!(mask_iou, m)?)?;
    m.add_function(wrap_pyfunction!(oiou, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(build_catalog, m)?)?;
    Ok(())
}
