//! Run configuration: built-in defaults, then a JSON config file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use bsap_core::retrieval::Mode;
use bsap_core::scorebal::{Aggregator, Normalizer, DEFAULT_ALPHA_REC, DEFAULT_ALPHA_RIS};
use bsap_core::simkern::DEFAULT_GAMMA;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Rec,
    Ris,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    TextToImage,
    ImageToText,
}

/// Every setting a command may read. All fields are optional so that a config
/// file and the command line can each fill in a subset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub aggregator: Option<Aggregator>,
    pub normalizer: Option<Normalizer>,
    pub task: Option<Task>,
    pub direction: Option<Direction>,
    pub template_length: Option<usize>,
    pub head_lists: Option<Vec<String>>,
    pub templates: Option<PathBuf>,
    pub texts: Option<PathBuf>,
    pub text_manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub image_manifest: Option<PathBuf>,
    pub aux: Option<PathBuf>,
    pub aux_count: Option<usize>,
    pub annotations: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub population: Option<String>,
    pub threshold: Option<f64>,
    pub grid: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

macro_rules! overlay_fields {
    ($base:ident, $top:ident; $($f:ident),*) => {
        RunConfig { $($f: $top.$f.or($base.$f)),* }
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}:{}: {e}", path.display(), e.line())))
    }

    /// Fields set in `top` win over fields set in `self`.
    pub fn overlay(self, top: RunConfig) -> RunConfig {
        let base = self;
        overlay_fields!(base, top;
            mode, gamma, alpha, aggregator, normalizer, task, direction, template_length,
            head_lists, templates, texts, text_manifest, images, image_manifest, aux, aux_count,
            annotations, results, population, threshold, grid, out, seed)
    }

    /// Reads `config` (if given) and lays `flags` over it.
    pub fn resolve(config: Option<&Path>, flags: RunConfig) -> Result<Self, CliError> {
        let base = match config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(base.overlay(flags))
    }

    pub fn mode(&self) -> Mode {
        self.mode.unwrap_or_default()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(DEFAULT_GAMMA)
    }

    pub fn task(&self) -> Task {
        self.task.unwrap_or_default()
    }

    /// 0.75 for comprehension, 0.5 for segmentation unless set.
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.task() {
            Task::Rec => DEFAULT_ALPHA_REC,
            Task::Ris => DEFAULT_ALPHA_RIS,
        })
    }

    pub fn aggregator(&self) -> Aggregator {
        self.aggregator.unwrap_or_default()
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer.unwrap_or_default()
    }

    pub fn direction(&self) -> Direction {
        self.direction.unwrap_or_default()
    }

    pub fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::usage(format!("missing required setting --{flag}")))
    }
}
