//! Flat-file corpus and exact inner-product retrieval.
//!
//! Corpus files are JSON lines. An optional first line `{"dimension": D}`
//! declares the embedding width; every other line is a record
//! `{"id": ..., "text": ..., "embedding": [...]}` where `embedding` may be
//! omitted, in which case [`mock_embed`] fills it in.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Dimension used by the mock embedder when a corpus declares none.
pub const DEFAULT_DIMENSION: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: embedding has dimension {found}, corpus dimension is {expected}")]
    LineDimension {
        line: usize,
        found: usize,
        expected: usize,
    },
    #[error("line {line}: duplicate document id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("query dimension {found} does not match corpus dimension {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("query embedding has a non-finite value")]
    NonFiniteQuery,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("n must be at least 1")]
    ZeroN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDocument {
    pub id: String,
    pub score: f64,
}

/// Ranked `(id, score)` pairs, scores non-increasing, ties by id ascending.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<RankedDocument>,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|r| r.id.as_str())
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    #[serde(default)]
    embedding: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dimension: usize,
}

impl Corpus {
    pub fn new(dimension: usize) -> Self {
        Self {
            documents: Vec::new(),
            dimension,
        }
    }

    /// Builds a corpus from documents, checking dimensions and id uniqueness.
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, RetrievalError> {
        let dimension = documents.first().map_or(0, |d| d.embedding.len());
        let mut corpus = Self::new(dimension);
        for (i, doc) in documents.into_iter().enumerate() {
            corpus.push(doc, i + 1)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, doc: Document, line: usize) -> Result<(), RetrievalError> {
        if doc.embedding.len() != self.dimension {
            return Err(RetrievalError::LineDimension {
                line,
                found: doc.embedding.len(),
                expected: self.dimension,
            });
        }
        if let Some(bad) = doc.embedding.iter().find(|x| !x.is_finite()) {
            return Err(RetrievalError::Malformed {
                line,
                message: format!("non-finite embedding value {bad}"),
            });
        }
        self.documents.push(doc);
        Ok(())
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }
}

/// Reads a JSON-lines corpus. `fallback_dimension` applies when there is no
/// header and the first record has no embedding.
pub fn ingest_corpus(path: &Path, fallback_dimension: usize) -> Result<Corpus, RetrievalError> {
    let io_err = |source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut corpus: Option<Corpus> = None;
    let mut seen = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        if corpus.is_none() {
            if let Ok(h) = serde_json::from_str::<Header>(&line) {
                corpus = Some(Corpus::new(h.dimension));
                continue;
            }
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| RetrievalError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        let corpus = corpus.get_or_insert_with(|| {
            Corpus::new(raw.embedding.as_ref().map_or(fallback_dimension, Vec::len))
        });
        if !seen.insert(raw.id.clone()) {
            return Err(RetrievalError::DuplicateId {
                line: line_no,
                id: raw.id,
            });
        }
        let embedding = raw
            .embedding
            .unwrap_or_else(|| mock_embed(&raw.text, corpus.dimension));
        corpus.push(
            Document {
                id: raw.id,
                text: raw.text,
                embedding,
            },
            line_no,
        )?;
    }
    Ok(corpus.unwrap_or_else(|| Corpus::new(fallback_dimension)))
}

fn feature_vector(feature: &str, dimension: usize) -> Vec<f64> {
    let digest = Sha256::digest(feature.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dimension)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect()
}

/// Deterministic unit-norm stand-in for a learned text encoder.
///
/// Sums a hash-seeded Gaussian vector per lowercase alphanumeric word, so texts
/// sharing words have positive inner product. Text without words hashes as a
/// whole.
pub fn mock_embed(text: &str, dimension: usize) -> Vec<f64> {
    if dimension == 0 {
        return Vec::new();
    }
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let mut v = vec![0.0; dimension];
    if words.is_empty() {
        v = feature_vector(&format!("\u{0}{text}"), dimension);
    } else {
        for w in words {
            for (acc, x) in v.iter_mut().zip(feature_vector(w, dimension)) {
                *acc += x;
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn inner_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rank_order(a: &RankedDocument, b: &RankedDocument) -> std::cmp::Ordering {
    // Scores are finite; partial_cmp treats 0.0 and -0.0 as a tie.
    b.score
        .partial_cmp(&a.score)
        .expect("finite scores")
        .then_with(|| a.id.cmp(&b.id))
}

/// Exact top-`n` by inner product.
pub fn top_n(
    corpus: &Corpus,
    query_embedding: &[f64],
    n: usize,
) -> Result<RetrievalResult, RetrievalError> {
    if n == 0 {
        return Err(RetrievalError::ZeroN);
    }
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    if query_embedding.len() != corpus.dimension {
        return Err(RetrievalError::DimensionMismatch {
            found: query_embedding.len(),
            expected: corpus.dimension,
        });
    }
    if query_embedding.iter().any(|x| !x.is_finite()) {
        return Err(RetrievalError::NonFiniteQuery);
    }
    let mut scored: Vec<RankedDocument> = corpus
        .documents
        .iter()
        .map(|d| RankedDocument {
            id: d.id.clone(),
            score: inner_product(&d.embedding, query_embedding),
        })
        .collect();
    if n < scored.len() {
        scored.select_nth_unstable_by(n - 1, rank_order);
        scored.truncate(n);
    }
    scored.sort_unstable_by(rank_order);
    Ok(RetrievalResult { ranked: scored })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDocument {
    pub id: String,
    pub text: String,
    pub score: f64,
}

/// Text-in, documents-out retrieval used by the pipeline.
pub trait Retriever: Sync {
    fn retrieve(&self, question: &str, n: usize) -> Result<Vec<ScoredDocument>, RetrievalError>;
}

/// A [`Corpus`] queried through [`mock_embed`].
#[derive(Debug, Clone)]
pub struct CorpusRetriever {
    corpus: Corpus,
}

impl CorpusRetriever {
    pub fn new(corpus: Corpus) -> Self {
        Self { corpus }
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }
}

impl Retriever for CorpusRetriever {
    fn retrieve(&self, question: &str, n: usize) -> Result<Vec<ScoredDocument>, RetrievalError> {
        let q = mock_embed(question, self.corpus.dimension);
        let result = top_n(&self.corpus, &q, n)?;
        Ok(result
            .ranked
            .into_iter()
            .map(|r| {
                let text = self
                    .corpus
                    .get(&r.id)
                    .map(|d| d.text.clone())
                    .unwrap_or_default();
                ScoredDocument {
                    id: r.id,
                    text,
                    score: r.score,
                }
            })
            .collect())
    }
}
