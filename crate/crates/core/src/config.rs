use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::DEFAULT_ORDERS;
use crate::generation::{GeneratorEndpointConfig, MockBehavior, DEFAULT_MAX_TOKENS};
use crate::mechanisms::{KRange, MechanismError};
use crate::metrics::Normalization;
use crate::retrieval::DEFAULT_DIMENSION;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    QueryLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

/// Which pipeline variant answers the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Private keyword extraction.
    Dpksa,
    /// Keyword extraction without noise.
    Ksa,
    /// Question plus the top retrieved documents in full.
    RagTop2,
    /// Question only.
    Nonrag,
}

impl Mode {
    pub fn uses_retrieval(self) -> bool {
        self != Self::Nonrag
    }

    pub fn is_private(self) -> bool {
        self == Self::Dpksa
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dpksa" | "dp_ksa" => Ok(Self::Dpksa),
            "ksa" => Ok(Self::Ksa),
            "rag_top2" | "rag" => Ok(Self::RagTop2),
            "nonrag" | "non_rag" => Ok(Self::Nonrag),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorChoice {
    Mock { behavior: MockBehavior },
    Endpoint(GeneratorEndpointConfig),
}

impl Default for GeneratorChoice {
    fn default() -> Self {
        Self::Mock {
            behavior: MockBehavior::EchoDocumentKeywords,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub ensemble_size: usize,
    pub k_min: usize,
    pub k_max: usize,
    /// Share of each epsilon given to the exponential mechanism.
    pub em_fraction: f64,
    /// Overrides the Gumbel scale `4 / epsilon_em`.
    pub gumbel_scale: Option<f64>,
    pub orders: Vec<f64>,
    pub modes: Vec<Mode>,
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    /// Embedding width used for corpus records and queries without vectors.
    pub dimension: usize,
    pub generator: GeneratorChoice,
    pub templates: Option<PathBuf>,
    pub max_tokens: usize,
    pub temperature: f64,
    /// Documents placed in the prompt by the plain RAG baseline.
    pub rag_documents: usize,
    pub normalization: Normalization,
    pub seed: u64,
    /// Adds wall-clock time to the report summary (makes reports non-reproducible).
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![1.0, 2.0, 3.0, 5.0, 8.0],
            delta: 1e-4,
            ensemble_size: 80,
            k_min: 15,
            k_max: 30,
            em_fraction: 0.5,
            gumbel_scale: None,
            orders: DEFAULT_ORDERS.to_vec(),
            modes: vec![Mode::Dpksa],
            corpus: None,
            queries: None,
            dimension: DEFAULT_DIMENSION,
            generator: GeneratorChoice::default(),
            templates: None,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            rag_documents: 2,
            normalization: Normalization::Basic,
            seed: 0,
            record_timing: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn k_range(&self) -> Result<KRange, ConfigError> {
        Ok(KRange::new(self.k_min, self.k_max)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta {} outside (0, 1)", self.delta));
        }
        if self.modes.is_empty() {
            return invalid("no modes selected".into());
        }
        if self.modes.contains(&Mode::Dpksa) {
            if self.epsilons.is_empty() {
                return invalid("dpksa mode needs at least one epsilon".into());
            }
            if let Some(e) = self
                .epsilons
                .iter()
                .find(|e| !(**e > 0.0) || !e.is_finite())
            {
                return invalid(format!("epsilon {e} must be positive and finite"));
            }
            if !(self.em_fraction > 0.0 && self.em_fraction < 1.0) {
                return invalid(format!("em_fraction {} outside (0, 1)", self.em_fraction));
            }
        }
        if self.ensemble_size == 0 {
            return invalid("ensemble_size must be >= 1".into());
        }
        if self.max_tokens == 0 {
            return invalid("max_tokens must be >= 1".into());
        }
        if self.rag_documents == 0 {
            return invalid("rag_documents must be >= 1".into());
        }
        self.k_range()?;
        if self.modes.iter().any(|m| m.uses_retrieval()) && self.corpus.is_none() {
            return invalid("selected modes need a corpus".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    #[serde(default)]
    pub references: Vec<String>,
}

impl QueryRecord {
    pub fn new(question: impl Into<String>, references: Vec<String>) -> Self {
        Self {
            id: None,
            question: question.into(),
            references,
        }
    }
}

/// Reads JSON-lines query records, dropping those with no non-empty reference.
pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>, ConfigError> {
    let io_err = |source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let mut q: QueryRecord =
            serde_json::from_str(&line).map_err(|e| ConfigError::QueryLine {
                path: path.display().to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        q.references.retain(|r| !r.trim().is_empty());
        if q.references.is_empty() {
            dropped += 1;
            continue;
        }
        if q.id.is_none() {
            q.id = Some(format!("q{}", idx + 1));
        }
        out.push(q);
    }
    if dropped > 0 {
        warn!("dropped {dropped} queries with empty references");
    }
    Ok(out)
}
