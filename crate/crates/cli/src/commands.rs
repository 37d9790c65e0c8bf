use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bsap_core::embstore::{load_manifest, load_matrix, save_matrix, EmbeddingMatrix, Manifest};
use bsap_core::evalkit::{
    category_diagnostics, collect_masks, miou, oiou, parse_annotations, rec_accuracy, Annotation,
    EvalError, DEFAULT_IOU_THRESHOLD,
};
use bsap_core::fixed::{fmt6, to_json_pretty6};
use bsap_core::hallulab::{
    generate, hybrid_accuracy, measure, scatter_csv, MeasureConfig, SyntheticPopulationConfig,
};
use bsap_core::promptgen::{
    build_catalog, query_word_count, select_template, HeadList, TemplateCatalog, DEFAULT_TEMPLATE,
};
use bsap_core::retrieval::{
    parse_results, predict_batch, CandidateSet, Mode, ResultRecord, ScoringConfig,
};
use bsap_core::scorebal::{BalanceConfig, HybridConfig};
use bsap_core::simkern::SimilarityConfig;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Direction, RunConfig, Task};
use crate::error::{emb_error, eval_error, io_error, CliError};
use crate::ConvertArgs;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = RunConfig::require(&cfg.out, "out")?.clone();
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    Ok(dir)
}

fn matrix_with_manifest(
    matrix: &Path,
    manifest: &Path,
) -> Result<(EmbeddingMatrix, Manifest), CliError> {
    let m = load_matrix(matrix).map_err(|e| emb_error(matrix, e))?;
    let man = load_manifest(manifest).map_err(|e| emb_error(manifest, e))?;
    man.check_matrix(&m).map_err(|e| {
        CliError::data(format!(
            "{} vs {}: {e}",
            manifest.display(),
            matrix.display()
        ))
    })?;
    Ok((m, man))
}

/// Annotations plus the 1-based file line each one came from.
fn read_annotations(path: &Path) -> Result<(Vec<Annotation>, Vec<usize>), CliError> {
    let text = read_text(path)?;
    let anns =
        parse_annotations(&text, &path.display().to_string()).map_err(|e| eval_error(path, e))?;
    let lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    Ok((anns, lines))
}

fn similarity(cfg: &RunConfig) -> Result<SimilarityConfig, CliError> {
    SimilarityConfig::new(cfg.gamma()).map_err(|e| CliError::usage(e.to_string()))
}

fn scoring(cfg: &RunConfig, mode: Mode, alpha: f64) -> Result<ScoringConfig, CliError> {
    Ok(ScoringConfig {
        mode,
        similarity: similarity(cfg)?,
        balance: BalanceConfig {
            aggregator: cfg.aggregator(),
            normalizer: cfg.normalizer(),
        },
        hybrid: HybridConfig::new(alpha).map_err(|e| CliError::usage(e.to_string()))?,
    })
}

/// Everything `score` needs, loaded and cross-checked once.
struct ScoreInputs {
    queries: EmbeddingMatrix,
    candidates: EmbeddingMatrix,
    candidate_manifest: Manifest,
    aux: Option<EmbeddingMatrix>,
    sets: Vec<CandidateSet>,
    annotations: Vec<Annotation>,
}

impl ScoreInputs {
    fn load(cfg: &RunConfig, needs_aux: bool) -> Result<Self, CliError> {
        let texts = RunConfig::require(&cfg.texts, "texts")?;
        let text_manifest = RunConfig::require(&cfg.text_manifest, "text-manifest")?;
        let images = RunConfig::require(&cfg.images, "images")?;
        let image_manifest = RunConfig::require(&cfg.image_manifest, "image-manifest")?;
        let ann_path = RunConfig::require(&cfg.annotations, "annotations")?;
        let aux_path = match needs_aux {
            true => Some(RunConfig::require(&cfg.aux, "aux")?),
            false => None,
        };

        let (t, tm) = matrix_with_manifest(texts, text_manifest)?;
        let (i, im) = matrix_with_manifest(images, image_manifest)?;
        if t.dim() != i.dim() {
            return Err(CliError::data(format!(
                "{} has dim {} but {} has dim {}",
                texts.display(),
                t.dim(),
                images.display(),
                i.dim()
            )));
        }
        let aux = match aux_path {
            Some(p) => {
                let a = load_matrix(p).map_err(|e| emb_error(p, e))?;
                if a.dim() != t.dim() {
                    return Err(CliError::data(format!(
                        "{} has dim {} but the embeddings have dim {}",
                        p.display(),
                        a.dim(),
                        t.dim()
                    )));
                }
                Some(a)
            }
            None => None,
        };
        let (annotations, lines) = read_annotations(ann_path)?;

        let direction = cfg.direction();
        let (queries, query_manifest, candidates, candidate_manifest) = match direction {
            Direction::TextToImage => (t, tm, i, im),
            Direction::ImageToText => (i, im, t, tm),
        };
        let (query_kind, cand_kind) = match direction {
            Direction::TextToImage => ("text", "image"),
            Direction::ImageToText => ("image", "text"),
        };
        let missing = |line: usize, what: String| {
            CliError::data(format!("{}:{line}: {what}", ann_path.display()))
        };

        let mut sampler = AuxSampler::new(cfg, aux.as_ref())?;
        let mut sets = Vec::with_capacity(annotations.len());
        for (a, &line) in annotations.iter().zip(&lines) {
            let query_row = query_manifest.row_of(&a.query_id).ok_or_else(|| {
                missing(
                    line,
                    format!("query {} not in the {query_kind} manifest", a.query_id),
                )
            })?;
            let rows = a
                .candidates
                .iter()
                .map(|c| {
                    candidate_manifest.row_of(&c.id).ok_or_else(|| {
                        missing(
                            line,
                            format!("candidate {} not in the {cand_kind} manifest", c.id),
                        )
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut set = CandidateSet::new(a.query_id.clone(), query_row, rows);
            if let Some(g) = a.gt_position() {
                set = set.with_gt(g);
            }
            if direction == Direction::ImageToText {
                if let Some(rows) = sampler.draw() {
                    set = set.with_aux_rows(rows);
                }
            }
            sets.push(set);
        }
        Ok(Self {
            queries,
            candidates,
            candidate_manifest,
            aux,
            sets,
            annotations,
        })
    }

    fn run(&self, scoring: &ScoringConfig) -> Result<Vec<ResultRecord>, CliError> {
        let aux = match scoring.mode {
            Mode::Raw => None,
            _ => self.aux.as_ref(),
        };
        let results = predict_batch(&self.sets, &self.queries, &self.candidates, aux, scoring)
            .map_err(|e| CliError::data(e.to_string()))?;
        results
            .iter()
            .zip(&self.sets)
            .map(|(r, s)| {
                ResultRecord::from_result(r, s, &self.candidate_manifest).ok_or_else(|| {
                    CliError::data(format!("query {}: candidate row without an id", s.query_id))
                })
            })
            .collect()
    }
}

/// Picks the auxiliary images used by each image query. When the auxiliary
/// matrix holds exactly `aux_count` rows all of them are used; otherwise a
/// seeded sample is drawn per query.
struct AuxSampler {
    count: usize,
    rows: usize,
    rng: Option<ChaCha8Rng>,
}

impl AuxSampler {
    fn new(cfg: &RunConfig, aux: Option<&EmbeddingMatrix>) -> Result<Self, CliError> {
        let rows = aux.map_or(0, EmbeddingMatrix::rows);
        let count = cfg.aux_count.unwrap_or(1);
        if cfg.direction() == Direction::TextToImage || aux.is_none() {
            return Ok(Self {
                count,
                rows,
                rng: None,
            });
        }
        if count == 0 || count > rows {
            return Err(CliError::usage(format!(
                "--aux-count must be between 1 and the {rows} auxiliary rows, got {count}"
            )));
        }
        let rng = if count < rows {
            let seed = RunConfig::require(&cfg.seed, "seed")?;
            Some(ChaCha8Rng::seed_from_u64(*seed))
        } else {
            None
        };
        Ok(Self { count, rows, rng })
    }

    fn draw(&mut self) -> Option<Vec<usize>> {
        let rng = self.rng.as_mut()?;
        let mut picked = sample(rng, self.rows, self.count).into_vec();
        picked.sort_unstable();
        Some(picked)
    }
}

/// Scores every annotated query and writes results JSONL to `out`.
pub fn cmd_score(cfg: &RunConfig) -> Result<String, CliError> {
    let out = RunConfig::require(&cfg.out, "out")?;
    let mode = cfg.mode();
    let scoring = scoring(cfg, mode, cfg.alpha())?;
    let inputs = ScoreInputs::load(cfg, mode != Mode::Raw)?;
    let records = inputs.run(&scoring)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    write_text(out, &text)?;
    Ok(format!(
        "scored {} queries ({mode}) -> {}",
        records.len(),
        out.display()
    ))
}

fn read_results(path: &Path) -> Result<Vec<ResultRecord>, CliError> {
    parse_results(&read_text(path)?)
        .map_err(|(line, e)| CliError::data(format!("{}:{line}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct Metrics {
    task: Task,
    n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outside_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inside_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oiou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    miou: Option<f64>,
}

impl Metrics {
    fn csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let rows = [
            ("accuracy", self.accuracy),
            ("outside_rate", self.outside_rate),
            ("inside_rate", self.inside_rate),
            ("oiou", self.oiou),
            ("miou", self.miou),
        ];
        for (name, v) in rows {
            if let Some(v) = v {
                let _ = writeln!(out, "{name},{}", fmt6(v));
            }
        }
        out
    }
}

fn compute_metrics(
    task: Task,
    threshold: f64,
    results: &[ResultRecord],
    anns: &[Annotation],
    ann_path: &Path,
) -> Result<Metrics, CliError> {
    let err = |e| eval_error(ann_path, e);
    let mut m = Metrics {
        task,
        n: results.len(),
        threshold: None,
        accuracy: None,
        outside_rate: None,
        inside_rate: None,
        oiou: None,
        miou: None,
    };
    match task {
        Task::Rec => {
            m.threshold = Some(threshold);
            m.accuracy = Some(rec_accuracy(results, anns, threshold).map_err(err)?);
            // category diagnostics need categories on every involved candidate
            match category_diagnostics(results, anns) {
                Ok(d) => {
                    m.outside_rate = Some(d.outside_rate);
                    m.inside_rate = Some(d.inside_rate);
                }
                Err(EvalError::MissingCategory { .. }) => {}
                Err(e) => return Err(err(e)),
            }
        }
        Task::Ris => {
            let (pred, gt) = collect_masks(results, anns).map_err(err)?;
            m.oiou = Some(oiou(&pred, &gt).map_err(err)?);
            m.miou = Some(miou(&pred, &gt).map_err(err)?);
        }
    }
    Ok(m)
}

/// Writes `metrics.json` and `metrics.csv` into the `out` directory.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let results_path = RunConfig::require(&cfg.results, "results")?;
    let ann_path = RunConfig::require(&cfg.annotations, "annotations")?;
    let threshold = cfg.threshold.unwrap_or(DEFAULT_IOU_THRESHOLD);
    if !(0.0..1.0).contains(&threshold) {
        return Err(CliError::usage(format!(
            "--threshold must be in [0, 1), got {threshold}"
        )));
    }
    let dir = out_dir(cfg)?;
    let results = read_results(results_path)?;
    let (anns, _) = read_annotations(ann_path)?;
    let m = compute_metrics(cfg.task(), threshold, &results, &anns, ann_path)?;
    let json = to_json_pretty6(&m).map_err(|e| CliError::data(e.to_string()))?;
    write_text(&dir.join("metrics.json"), &json)?;
    write_text(&dir.join("metrics.csv"), &m.csv())?;
    Ok(m.csv().trim_end().to_string())
}

/// `n` evenly spaced points on [0, 1], endpoints exact.
pub fn even_grid(n: usize) -> Result<Vec<f64>, CliError> {
    match n {
        0 => Err(CliError::usage("empty alpha grid")),
        1 => Ok(vec![0.0]),
        _ => Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect()),
    }
}

fn resolve_population(cfg: &RunConfig) -> Result<SyntheticPopulationConfig, CliError> {
    let name = RunConfig::require(&cfg.population, "population")?;
    let mut pop = match name.as_str() {
        "g1" => SyntheticPopulationConfig::g1(),
        "unbiased" => SyntheticPopulationConfig::unbiased(),
        "fig3_pair" => SyntheticPopulationConfig::fig3_pair(),
        path => {
            let p = Path::new(path);
            let text = read_text(p)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("{}:{}: {e}", p.display(), e.line())))?
        }
    };
    if let Some(seed) = cfg.seed {
        pop.seed = seed;
    }
    Ok(pop)
}

/// Writes `alpha,<metric>` rows for each grid value.
pub fn cmd_sweep_alpha(cfg: &RunConfig) -> Result<String, CliError> {
    let out = RunConfig::require(&cfg.out, "out")?;
    let grid = cfg.grid.clone().unwrap_or_default();
    if grid.is_empty() {
        return Err(CliError::usage("empty alpha grid (use --grid or --steps)"));
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(CliError::usage(format!("alpha {a} is outside [0, 1]")));
    }

    let (metric, values) = if cfg.population.is_some() {
        let pop =
            generate(&resolve_population(cfg)?).map_err(|e| CliError::usage(e.to_string()))?;
        let mc = MeasureConfig {
            similarity: similarity(cfg)?,
            aggregator: cfg.aggregator(),
            alpha: cfg.alpha(),
        };
        let values = grid
            .iter()
            .map(|&a| hybrid_accuracy(&pop, &mc, a).map_err(|e| CliError::data(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        ("accuracy", values)
    } else {
        let ann_path = RunConfig::require(&cfg.annotations, "annotations")?.clone();
        let inputs = ScoreInputs::load(cfg, true)?;
        let task = cfg.task();
        let threshold = cfg.threshold.unwrap_or(DEFAULT_IOU_THRESHOLD);
        let mut values = Vec::with_capacity(grid.len());
        for &a in &grid {
            let records = inputs.run(&scoring(cfg, Mode::BsapH, a)?)?;
            let m = compute_metrics(task, threshold, &records, &inputs.annotations, &ann_path)?;
            values.push(match task {
                Task::Rec => m.accuracy,
                Task::Ris => m.oiou,
            });
        }
        let name = match task {
            Task::Rec => "accuracy",
            Task::Ris => "oiou",
        };
        (
            name,
            values.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        )
    };

    let mut csv = format!("alpha,{metric}\n");
    for (a, v) in grid.iter().zip(&values) {
        let _ = writeln!(csv, "{},{}", fmt6(*a), fmt6(*v));
    }
    write_text(out, &csv)?;
    Ok(format!("{} alpha values -> {}", grid.len(), out.display()))
}

#[derive(Serialize)]
struct SimulateOut<'a> {
    population: &'a SyntheticPopulationConfig,
    report: bsap_core::hallulab::HallucinationReport,
}

/// Writes `report.json` and `scatter.csv` into the `out` directory.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let dir = out_dir(cfg)?;
    let pop_cfg = resolve_population(cfg)?;
    let pop = generate(&pop_cfg).map_err(|e| CliError::usage(e.to_string()))?;
    let mc = MeasureConfig {
        similarity: similarity(cfg)?,
        aggregator: cfg.aggregator(),
        alpha: cfg.alpha(),
    };
    HybridConfig::new(mc.alpha).map_err(|e| CliError::usage(e.to_string()))?;
    let report = measure(&pop, &mc).map_err(|e| CliError::data(e.to_string()))?;
    let summary = format!(
        "raw {} bsap {} bsap_h {} ({} sets, offset {})",
        fmt6(report.raw_accuracy),
        fmt6(report.bsap_accuracy),
        fmt6(report.hybrid_accuracy),
        report.n_sets,
        fmt6(report.offset_bias_used)
    );
    let out = SimulateOut {
        population: &pop_cfg,
        report,
    };
    let json = to_json_pretty6(&out).map_err(|e| CliError::data(e.to_string()))?;
    write_text(&dir.join("report.json"), &json)?;
    let scatter = scatter_csv(&pop, &mc.similarity).map_err(|e| CliError::data(e.to_string()))?;
    write_text(&dir.join("scatter.csv"), &scatter)?;
    Ok(summary)
}

fn head_list(name: &str) -> Result<HeadList, CliError> {
    let p = Path::new(name);
    if p.is_file() {
        HeadList::load(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
    } else {
        HeadList::builtin(name).map_err(|e| CliError::usage(e.to_string()))
    }
}

/// Builds the prompt catalog and writes it as JSON to `out`.
pub fn cmd_build_prompts(cfg: &RunConfig, query: Option<&str>) -> Result<String, CliError> {
    let out = RunConfig::require(&cfg.out, "out")?;
    let names = cfg
        .head_lists
        .clone()
        .unwrap_or_else(|| vec!["coco80".into(), "cifar100".into()]);
    let lists = names
        .iter()
        .map(|n| head_list(n))
        .collect::<Result<Vec<_>, _>>()?;
    let templates = match &cfg.templates {
        Some(p) => {
            TemplateCatalog::load(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?
        }
        None => TemplateCatalog::builtin(),
    };
    let length = cfg.template_length.or(query.map(query_word_count));
    let (template, templated) = match length {
        Some(n) => select_template(&templates, n),
        None => (DEFAULT_TEMPLATE.to_string(), true),
    };
    let catalog =
        build_catalog(&lists, &template, templated).map_err(|e| CliError::usage(e.to_string()))?;
    let json = serde_json::to_string_pretty(&catalog).map_err(|e| CliError::data(e.to_string()))?;
    write_text(out, &(json + "\n"))?;
    Ok(format!(
        "{} prompts with template {:?} -> {}",
        catalog.len(),
        template,
        out.display()
    ))
}

/// Validates whichever inputs are given and reports their shape.
pub fn cmd_convert(args: &ConvertArgs) -> Result<String, CliError> {
    if args.matrix.is_none() && args.manifest.is_none() && args.annotations.is_none() {
        return Err(CliError::usage(
            "nothing to check: pass --matrix, --manifest or --annotations",
        ));
    }
    let mut lines = Vec::new();
    let matrix = match (&args.matrix, &args.manifest) {
        (Some(mp), Some(np)) => {
            let (m, man) = matrix_with_manifest(mp, np)?;
            lines.push(format!(
                "{}: {} x {}, {} ids",
                mp.display(),
                m.rows(),
                m.dim(),
                man.len()
            ));
            Some(m)
        }
        (Some(mp), None) => {
            let m = load_matrix(mp).map_err(|e| emb_error(mp, e))?;
            lines.push(format!("{}: {} x {}", mp.display(), m.rows(), m.dim()));
            Some(m)
        }
        (None, Some(np)) => {
            let man = load_manifest(np).map_err(|e| emb_error(np, e))?;
            lines.push(format!("{}: {} ids", np.display(), man.len()));
            None
        }
        (None, None) => None,
    };
    if let Some(p) = &args.annotations {
        let (anns, _) = read_annotations(p)?;
        let cands: usize = anns.iter().map(|a| a.candidates.len()).sum();
        lines.push(format!(
            "{}: {} queries, {} candidates",
            p.display(),
            anns.len(),
            cands
        ));
    }
    if args.normalize {
        let out = RunConfig::require(&args.out, "out")?;
        let m = matrix.ok_or_else(|| CliError::usage("--normalize needs --matrix"))?;
        let n = m
            .l2_normalize()
            .map_err(|e| CliError::data(e.to_string()))?;
        save_matrix(&n, out).map_err(|e| emb_error(out, e))?;
        lines.push(format!("normalized -> {}", out.display()));
    }
    Ok(lines.join("\n"))
}
