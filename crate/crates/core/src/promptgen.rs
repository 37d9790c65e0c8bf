//! Auxiliary prompt construction.
//!
//! Each auxiliary prompt is a fixed template with one category head
//! substituted into its `{}` slot. Head lists and the length-indexed template
//! catalog ship as static assets so prompts are frozen across runs.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PLACEHOLDER: &str = "{}";
pub const DEFAULT_TEMPLATE: &str = "a photo of {}";

const COCO80: &str = include_str!("../assets/heads/coco80.txt");
const CIFAR100: &str = include_str!("../assets/heads/cifar100.txt");
const CALTECH101: &str = include_str!("../assets/heads/caltech101.txt");
const TEMPLATES: &str = include_str!("../assets/templates.json");

/// Names of the head lists compiled into the crate.
pub const BUILTIN_HEAD_LISTS: [&str; 3] = ["coco80", "cifar100", "caltech101"];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {0:?} must contain exactly one {{}} placeholder")]
    BadTemplate(String),
    #[error("no heads supplied")]
    EmptyHeads,
    #[error("head list {name:?}: {reason}")]
    BadHeadList { name: String, reason: String },
    #[error("template catalog: {0}")]
    BadCatalog(String),
    #[error("unknown head list {0:?}")]
    UnknownHeadList(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A named, ordered list of category heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadList {
    name: String,
    heads: Vec<String>,
}

impl HeadList {
    pub fn new(name: impl Into<String>, heads: Vec<String>) -> Result<Self, PromptError> {
        let name = name.into();
        let bad = |reason: String| PromptError::BadHeadList {
            name: name.clone(),
            reason,
        };
        if heads.is_empty() {
            return Err(bad("no heads".into()));
        }
        let mut seen = HashSet::new();
        for h in &heads {
            if h.trim().is_empty() {
                return Err(bad("blank head".into()));
            }
            if !seen.insert(h.as_str()) {
                return Err(bad(format!("duplicate head {h:?}")));
            }
        }
        Ok(Self { name, heads })
    }

    /// One head per line; surrounding whitespace and empty lines are ignored.
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, PromptError> {
        let heads = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(name, heads)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(name, &text)
    }

    pub fn builtin(name: &str) -> Result<Self, PromptError> {
        let text = match name {
            "coco80" => COCO80,
            "cifar100" => CIFAR100,
            "caltech101" => CALTECH101,
            other => return Err(PromptError::UnknownHeadList(other.to_string())),
        };
        Self::parse(name, text)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn heads(&self) -> &[String] {
        &self.heads
    }
}

fn placeholder_count(template: &str) -> usize {
    template.matches(PLACEHOLDER).count()
}

/// Number of words in a template, not counting the placeholder.
pub fn template_word_count(template: &str) -> usize {
    template
        .split_whitespace()
        .filter(|w| !w.replace(PLACEHOLDER, "").is_empty())
        .count()
}

pub fn query_word_count(query: &str) -> usize {
    query.split_whitespace().count()
}

/// Templates keyed by word count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateCatalog {
    templates: BTreeMap<usize, Vec<String>>,
}

impl TemplateCatalog {
    pub fn new(templates: BTreeMap<usize, Vec<String>>) -> Result<Self, PromptError> {
        if templates.is_empty() {
            return Err(PromptError::BadCatalog("empty catalog".into()));
        }
        for (&len, list) in &templates {
            if list.is_empty() {
                return Err(PromptError::BadCatalog(format!(
                    "length {len} has no templates"
                )));
            }
            for t in list {
                if placeholder_count(t) != 1 {
                    return Err(PromptError::BadTemplate(t.clone()));
                }
                let wc = template_word_count(t);
                if wc != len {
                    return Err(PromptError::BadCatalog(format!(
                        "template {t:?} has {wc} words but is filed under {len}"
                    )));
                }
            }
        }
        if let Some(zero) = templates.get(&0) {
            if zero.iter().any(|t| t.trim() != PLACEHOLDER) {
                return Err(PromptError::BadCatalog(
                    "length 0 must be the bare placeholder".into(),
                ));
            }
        }
        Ok(Self { templates })
    }

    /// Parses the JSON form `{"2": ["this is {}"], ...}`.
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| PromptError::BadCatalog(e.to_string()))?;
        let mut templates = BTreeMap::new();
        for (k, v) in raw {
            let len: usize = k
                .parse()
                .map_err(|_| PromptError::BadCatalog(format!("key {k:?} is not a word count")))?;
            templates.insert(len, v);
        }
        Self::new(templates)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn builtin() -> Self {
        Self::from_json(TEMPLATES).expect("shipped template catalog is valid")
    }

    pub fn get(&self, len: usize) -> Option<&[String]> {
        self.templates.get(&len).map(Vec::as_slice)
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.templates.keys().copied()
    }
}

/// Picks the first template whose length equals the query length; the query
/// is then left unwrapped. Otherwise falls back to [`DEFAULT_TEMPLATE`] and the
/// query gets the same template.
pub fn select_template(catalog: &TemplateCatalog, query_word_count: usize) -> (String, bool) {
    match catalog.get(query_word_count).and_then(|l| l.first()) {
        Some(t) => (t.clone(), false),
        None => (DEFAULT_TEMPLATE.to_string(), true),
    }
}

pub fn fill_template(template: &str, head: &str) -> String {
    template.replacen(PLACEHOLDER, head, 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCatalog {
    pub prompts: Vec<String>,
    pub template_used: String,
    pub heads_source: Vec<String>,
    pub templated_query: bool,
}

impl PromptCatalog {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// The text to embed for a query under this catalog's templating rule.
    pub fn query_text(&self, query: &str) -> String {
        if self.templated_query {
            fill_template(&self.template_used, query)
        } else {
            query.to_string()
        }
    }
}

/// Fills `template` with each head, concatenating lists in order and keeping
/// only the first occurrence of a repeated head.
pub fn build_catalog(
    heads: &[HeadList],
    template: &str,
    template_applies_to_query: bool,
) -> Result<PromptCatalog, PromptError> {
    if placeholder_count(template) != 1 {
        return Err(PromptError::BadTemplate(template.to_string()));
    }
    if heads.is_empty() {
        return Err(PromptError::EmptyHeads);
    }
    let mut seen = HashSet::new();
    let prompts = heads
        .iter()
        .flat_map(|l| l.heads.iter())
        .filter(|h| seen.insert(h.as_str()))
        .map(|h| fill_template(template, h))
        .collect();
    Ok(PromptCatalog {
        prompts,
        template_used: template.to_string(),
        heads_source: heads.iter().map(|l| l.name.clone()).collect(),
        templated_query: template_applies_to_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(name: &str, heads: &[&str]) -> HeadList {
        HeadList::new(name, heads.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn catalog_examples() {
        let c = build_catalog(&[list("x", &["dog", "person"])], "a photo of {}", true).unwrap();
        assert_eq!(c.prompts, ["a photo of dog", "a photo of person"]);
        let c = build_catalog(&[list("x", &["dog"])], "{}", false).unwrap();
        assert_eq!(c.prompts, ["dog"]);
        assert_eq!(c.query_text("red dog"), "red dog");
    }

    #[test]
    fn cross_list_duplicates_are_dropped() {
        let c = build_catalog(
            &[list("a", &["cat", "dog"]), list("b", &["dog", "emu"])],
            "{}",
            false,
        )
        .unwrap();
        assert_eq!(c.prompts, ["cat", "dog", "emu"]);
        assert_eq!(c.heads_source, ["a", "b"]);
    }

    #[test]
    fn bad_inputs() {
        let l = list("a", &["cat"]);
        assert!(matches!(
            build_catalog(std::slice::from_ref(&l), "a photo", true),
            Err(PromptError::BadTemplate(_))
        ));
        assert!(matches!(
            build_catalog(&[l], "{} and {}", true),
            Err(PromptError::BadTemplate(_))
        ));
        assert!(matches!(
            build_catalog(&[], "{}", true),
            Err(PromptError::EmptyHeads)
        ));
        assert!(HeadList::new("e", vec![]).is_err());
        assert!(HeadList::new("e", vec!["a".into(), "a".into()]).is_err());
        assert!(HeadList::new("e", vec![" ".into()]).is_err());
    }

    #[test]
    fn builtin_lists() {
        let coco = HeadList::builtin("coco80").unwrap();
        let cifar = HeadList::builtin("cifar100").unwrap();
        let caltech = HeadList::builtin("caltech101").unwrap();
        assert_eq!(coco.heads().len(), 80);
        assert_eq!(cifar.heads().len(), 100);
        assert_eq!(caltech.heads().len(), 101);
        assert!(HeadList::builtin("imagenet").is_err());
    }

    #[test]
    fn template_selection() {
        let cat = TemplateCatalog::builtin();
        assert_eq!(select_template(&cat, 2), ("this is {}".to_string(), false));
        let (t5, q) = select_template(&cat, 5);
        assert_eq!(template_word_count(&t5), 5);
        assert!(!q);
        let mut m = BTreeMap::new();
        m.insert(2, vec!["this is {}".to_string()]);
        let small = TemplateCatalog::new(m).unwrap();
        assert_eq!(
            select_template(&small, 9),
            ("a photo of {}".to_string(), true)
        );
    }

    #[test]
    fn catalog_validation() {
        assert!(TemplateCatalog::from_json(r#"{"2": ["a photo of {}"]}"#).is_err());
        assert!(TemplateCatalog::from_json(r#"{"0": ["x {}"]}"#).is_err());
        assert!(TemplateCatalog::from_json(r#"{"x": ["{}"]}"#).is_err());
        assert!(TemplateCatalog::from_json(r#"{"1": ["the"]}"#).is_err());
        assert!(TemplateCatalog::from_json(r#"{"0": ["{}"], "3": ["a photo of {}"]}"#).is_ok());
        assert_eq!(template_word_count("a photo of {}"), 3);
        assert_eq!(template_word_count("{}"), 0);
    }
}
