//! Per-query orchestration of the private keyword pipeline and its baselines,
//! batch experiments, and the JSON-lines run report.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{calibrate, AccountantError, CalibrationResult, DpGuarantee};
use crate::config::{load_queries, ConfigError, GeneratorChoice, Mode, QueryRecord, RunConfig};
use crate::generation::{
    render_prompt, GenerationError, GenerationRequest, Generator, HttpGenerator, MockGenerator,
    TemplateKind, Templates,
};
use crate::histogram::{build_histogram, gap_profile, normalize_and_tokenize, top_k_tokens};
use crate::mechanisms::{
    find_best_k, find_best_k_with_noise, top_k_with_ptr, EmParams, KeywordRelease, NoiseSource,
    PtrParams,
};
use crate::metrics::{score_against_references_with, EvalScores, Normalization};
use crate::retrieval::{ingest_corpus, CorpusRetriever, RetrievalError, Retriever, ScoredDocument};

pub const REPORT_VERSION: u32 = 1;

const REPORT_NOTE: &str =
    "refused releases are answered zero-shot and counted both in metric means and in the pass-rate denominator";

/// Stream offset separating generation seeds from mechanism noise.
const GENERATION_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("calibration failed for epsilon {epsilon}: {source}")]
    Calibration {
        epsilon: f64,
        source: AccountantError,
    },
    #[error("query set is empty")]
    NoQueries,
    #[error("report I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("report line {line}: {message}")]
    Report { line: usize, message: String },
    #[error("privacy boundary violated: {0}")]
    Boundary(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseSummary {
    pub released: bool,
    pub k_hat: Option<usize>,
    pub keywords: Vec<String>,
}

impl From<&KeywordRelease> for ReleaseSummary {
    fn from(r: &KeywordRelease) -> Self {
        match r {
            KeywordRelease::Released { tokens, k } => Self {
                released: true,
                k_hat: Some(*k),
                keywords: tokens.iter().map(|t| t.as_str().to_owned()).collect(),
            },
            KeywordRelease::Refused => Self {
                released: false,
                k_hat: None,
                keywords: Vec::new(),
            },
        }
    }
}

/// One report row: a query answered by one mode at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub question_id: String,
    pub question: String,
    pub references: Vec<String>,
    pub mode: Mode,
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub release: Option<ReleaseSummary>,
    /// Ensemble responses that actually entered the histogram.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_prompt_kind: Option<TemplateKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<EvalScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub achieved: Option<DpGuarantee>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A row together with the in-memory artifacts needed to audit it.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub row: QueryRow,
    pub final_prompt: Option<String>,
    pub retrieved: Vec<ScoredDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mode: Mode,
    pub epsilon: Option<f64>,
    pub rows: usize,
    pub errors: usize,
    /// Releases over rows, for the keyword modes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass_rate: Option<f64>,
    /// Mean scores over scored rows, times 100.
    pub mean_scores: EvalScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub version: u32,
    pub note: String,
    pub config: RunConfig,
    pub calibrations: Vec<(f64, CalibrationResult)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub header: ReportHeader,
    pub rows: Vec<QueryRow>,
    pub summary: Vec<GroupSummary>,
    pub wall_clock_secs: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ReportLine {
    Header(ReportHeader),
    Row(QueryRow),
    Summary {
        groups: Vec<GroupSummary>,
        #[serde(skip_serializing_if = "Option::is_none")]
        wall_clock_secs: Option<f64>,
    },
}

impl RunReport {
    /// Writes one JSON object per line: header, rows, summary.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), PipelineError> {
        let mut line = |l: &ReportLine| -> Result<(), PipelineError> {
            serde_json::to_writer(&mut w, l).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&ReportLine::Header(self.header.clone()))?;
        for row in &self.rows {
            line(&ReportLine::Row(row.clone()))?;
        }
        line(&ReportLine::Summary {
            groups: self.summary.clone(),
            wall_clock_secs: self.wall_clock_secs,
        })
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, PipelineError> {
        let mut header = None;
        let mut rows = Vec::new();
        let mut summary = Vec::new();
        let mut wall = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ReportLine =
                serde_json::from_str(&line).map_err(|e| PipelineError::Report {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            match parsed {
                ReportLine::Header(h) => header = Some(h),
                ReportLine::Row(row) => rows.push(row),
                ReportLine::Summary {
                    groups,
                    wall_clock_secs,
                } => {
                    summary = groups;
                    wall = wall_clock_secs;
                }
            }
        }
        let header = header.ok_or(PipelineError::Report {
            line: 1,
            message: "missing header".into(),
        })?;
        Ok(Self {
            header,
            rows,
            summary,
            wall_clock_secs: wall,
        })
    }
}

/// Lowercase alphanumeric words, stopwords included.
fn plain_words(text: &str) -> HashSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Checks that the only document-derived words in `final_prompt` are released
/// keywords. Words that also occur in the question or the template text are
/// not attributable to the corpus and are allowed.
pub fn check_privacy_boundary(
    final_prompt: &str,
    question: &str,
    template_text: &str,
    keywords: &[String],
    documents: &[ScoredDocument],
) -> Result<(), String> {
    let prompt_words = plain_words(final_prompt);
    let mut allowed = plain_words(question);
    allowed.extend(plain_words(template_text));
    for k in keywords {
        allowed.extend(plain_words(k));
    }
    for doc in documents {
        let leaked: Vec<String> = plain_words(&doc.text)
            .into_iter()
            .filter(|w| prompt_words.contains(w) && !allowed.contains(w))
            .collect();
        if !leaked.is_empty() {
            let mut leaked = leaked;
            leaked.sort();
            return Err(format!("document {} leaks {:?}", doc.id, leaked));
        }
    }
    Ok(())
}

pub struct Pipeline<'a> {
    config: RunConfig,
    retriever: Option<&'a dyn Retriever>,
    generator: &'a dyn Generator,
    templates: Templates,
    calibrations: Vec<(f64, CalibrationResult)>,
    force_refusal: bool,
}

impl<'a> Pipeline<'a> {
    /// Validates the configuration and calibrates every epsilon up front.
    pub fn new(
        config: RunConfig,
        retriever: Option<&'a dyn Retriever>,
        generator: &'a dyn Generator,
        templates: Templates,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut calibrations = Vec::new();
        if config.modes.contains(&Mode::Dpksa) {
            for &epsilon in &config.epsilons {
                let target = DpGuarantee::new(epsilon, config.delta)
                    .map_err(|source| PipelineError::Calibration { epsilon, source })?;
                let cal = calibrate(target, config.em_fraction, &config.orders)
                    .map_err(|source| PipelineError::Calibration { epsilon, source })?;
                info!(
                    "epsilon {epsilon}: sigma {:.4}, epsilon_em {:.4}, alpha* {}",
                    cal.sigma, cal.epsilon_em, cal.alpha_star
                );
                calibrations.push((epsilon, cal));
            }
        }
        Ok(Self {
            config,
            retriever,
            generator,
            templates,
            calibrations,
            force_refusal: false,
        })
    }

    /// Replaces every private release with a refusal (audits of the refusal path).
    pub fn with_forced_refusal(mut self) -> Self {
        self.force_refusal = true;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn calibrations(&self) -> &[(f64, CalibrationResult)] {
        &self.calibrations
    }

    fn calibration(&self, epsilon: f64) -> Option<&CalibrationResult> {
        self.calibrations
            .iter()
            .find(|(e, _)| *e == epsilon)
            .map(|(_, c)| c)
    }

    fn request(
        &self,
        prompt: String,
        query_index: usize,
    ) -> Result<GenerationRequest, GenerationError> {
        let seed =
            NoiseSource::derive(self.config.seed ^ GENERATION_SEED_SALT, query_index as u64).seed();
        Ok(GenerationRequest::new(prompt, self.config.max_tokens)?
            .with_temperature(self.config.temperature)
            .with_seed(seed))
    }

    fn retrieve(&self, question: &str, n: usize) -> Result<Vec<ScoredDocument>, PipelineError> {
        let retriever = self
            .retriever
            .ok_or_else(|| ConfigError::Invalid("mode needs a retriever".into()))?;
        Ok(retriever.retrieve(question, n)?)
    }

    /// Generates one response per document; failed generations are dropped.
    fn ensemble(&self, question: &str, docs: &[ScoredDocument], query_index: usize) -> Vec<String> {
        let results: Vec<Result<String, GenerationError>> = docs
            .par_iter()
            .map(|doc| {
                let prompt = render_prompt(
                    &self.templates.with_document,
                    question,
                    Some(&doc.text),
                    None,
                )?;
                self.generator.generate(&self.request(prompt, query_index)?)
            })
            .collect();
        let total = results.len();
        let ok: Vec<String> = results
            .into_iter()
            .filter_map(|r| r.map_err(|e| warn!("ensemble generation failed: {e}")).ok())
            .collect();
        if ok.len() < total {
            warn!(
                "query {query_index}: {} of {total} ensemble responses dropped; ensemble size is now {}",
                total - ok.len(),
                ok.len()
            );
        }
        ok
    }

    fn keyword_release(
        &self,
        mode: Mode,
        epsilon: Option<f64>,
        responses: &[String],
        noise: &mut NoiseSource,
    ) -> Result<KeywordRelease, PipelineError> {
        let sets: Vec<_> = responses
            .iter()
            .map(|r| normalize_and_tokenize(r))
            .collect();
        let histogram = build_histogram(&sets);
        let profile = gap_profile(&histogram);
        let range = self.config.k_range()?;
        match mode {
            Mode::Ksa => {
                let em = EmParams::new(1.0)
                    .and_then(|e| e.with_gumbel_scale(0.0))
                    .map_err(ConfigError::from)?;
                let zeros = vec![0.0; range.clamped(profile.len()).count()];
                Ok(match find_best_k_with_noise(&profile, range, &em, &zeros) {
                    Some(k) => KeywordRelease::Released {
                        tokens: top_k_tokens(&histogram, k),
                        k,
                    },
                    None => KeywordRelease::Refused,
                })
            }
            Mode::Dpksa => {
                let epsilon = epsilon.expect("private rows carry an epsilon");
                let cal = self.calibration(epsilon).ok_or_else(|| {
                    ConfigError::Invalid(format!("epsilon {epsilon} not calibrated"))
                })?;
                let mut em = EmParams::new(cal.epsilon_em).map_err(ConfigError::from)?;
                if let Some(scale) = self.config.gumbel_scale {
                    em = em.with_gumbel_scale(scale).map_err(ConfigError::from)?;
                }
                let ptr = PtrParams::new(cal.sigma, cal.ptr_delta).map_err(ConfigError::from)?;
                let release = match find_best_k(&profile, range, &em, noise) {
                    Some(k) => {
                        top_k_with_ptr(&histogram, k, &ptr, noise).map_err(ConfigError::from)?
                    }
                    None => KeywordRelease::Refused,
                };
                Ok(if self.force_refusal {
                    KeywordRelease::Refused
                } else {
                    release
                })
            }
            _ => unreachable!("only keyword modes release keywords"),
        }
    }

    /// Answers one query in one mode. Failures are recorded in the row.
    pub fn run_query(
        &self,
        query: &QueryRecord,
        query_index: usize,
        mode: Mode,
        epsilon: Option<f64>,
    ) -> QueryOutcome {
        let mut outcome = QueryOutcome {
            row: QueryRow {
                question_id: query
                    .id
                    .clone()
                    .unwrap_or_else(|| format!("q{}", query_index + 1)),
                question: query.question.clone(),
                references: query.references.clone(),
                mode,
                epsilon: if mode.is_private() { epsilon } else { None },
                release: None,
                ensemble_size: None,
                final_prompt_kind: None,
                answer: None,
                scores: None,
                achieved: None,
                error: None,
            },
            final_prompt: None,
            retrieved: Vec::new(),
        };
        if let Err(e) = self.answer(query, query_index, &mut outcome) {
            outcome.row.error = Some(e.to_string());
        }
        outcome
    }

    fn answer(
        &self,
        query: &QueryRecord,
        query_index: usize,
        out: &mut QueryOutcome,
    ) -> Result<(), PipelineError> {
        let question = query.question.as_str();
        let mode = out.row.mode;
        let (kind, prompt) = match mode {
            Mode::Nonrag => (
                TemplateKind::ZeroShot,
                render_prompt(&self.templates.zero_shot, question, None, None)?,
            ),
            Mode::RagTop2 => {
                out.retrieved = self.retrieve(question, self.config.rag_documents)?;
                let joined = out
                    .retrieved
                    .iter()
                    .map(|d| d.text.as_str())
                    .collect::<Vec<_>>()
                    .join("\n\n");
                (
                    TemplateKind::WithDocument,
                    render_prompt(&self.templates.with_document, question, Some(&joined), None)?,
                )
            }
            Mode::Dpksa | Mode::Ksa => {
                if mode.is_private() {
                    let eps = out.row.epsilon.expect("private rows carry an epsilon");
                    out.row.achieved = self.calibration(eps).map(|c| c.achieved);
                }
                out.retrieved = self.retrieve(question, self.config.ensemble_size)?;
                let responses = self.ensemble(question, &out.retrieved, query_index);
                out.row.ensemble_size = Some(responses.len());
                let mut noise = NoiseSource::derive(self.config.seed, query_index as u64);
                let release =
                    self.keyword_release(mode, out.row.epsilon, &responses, &mut noise)?;
                out.row.release = Some(ReleaseSummary::from(&release));
                match &release {
                    KeywordRelease::Released { tokens, .. } => {
                        let prompt = render_prompt(
                            &self.templates.with_keywords,
                            question,
                            None,
                            Some(tokens),
                        )?;
                        (TemplateKind::WithKeywords, prompt)
                    }
                    KeywordRelease::Refused => (
                        TemplateKind::ZeroShot,
                        render_prompt(&self.templates.zero_shot, question, None, None)?,
                    ),
                }
            }
        };

        if mode.is_private() {
            let template = match kind {
                TemplateKind::WithKeywords => &self.templates.with_keywords,
                _ => &self.templates.zero_shot,
            };
            let keywords = out
                .row
                .release
                .as_ref()
                .map(|r| r.keywords.clone())
                .unwrap_or_default();
            check_privacy_boundary(
                &prompt,
                question,
                template.text(),
                &keywords,
                &out.retrieved,
            )
            .map_err(PipelineError::Boundary)?;
        }

        out.row.final_prompt_kind = Some(kind);
        let answer = self
            .generator
            .generate(&self.request(prompt.clone(), query_index)?)?;
        out.final_prompt = Some(prompt);
        out.row.scores =
            score_against_references_with(self.config.normalization, &answer, &query.references)
                .ok();
        out.row.answer = Some(answer);
        Ok(())
    }

    /// Every `(mode, epsilon)` cell in run order.
    pub fn cells(&self) -> Vec<(Mode, Option<f64>)> {
        let mut cells = Vec::new();
        for &mode in &self.config.modes {
            if mode.is_private() {
                cells.extend(self.config.epsilons.iter().map(|e| (mode, Some(*e))));
            } else {
                cells.push((mode, None));
            }
        }
        cells
    }

    /// Runs all queries in every cell, in query order within each cell.
    pub fn run_outcomes(&self, queries: &[QueryRecord]) -> Vec<QueryOutcome> {
        let mut outcomes = Vec::new();
        for (mode, eps) in self.cells() {
            for (i, q) in queries.iter().enumerate() {
                outcomes.push(self.run_query(q, i, mode, eps));
            }
        }
        outcomes
    }

    pub fn run(&self, queries: &[QueryRecord]) -> Result<RunReport, PipelineError> {
        if queries.is_empty() {
            return Err(PipelineError::NoQueries);
        }
        let start = Instant::now();
        let rows: Vec<QueryRow> = self
            .run_outcomes(queries)
            .into_iter()
            .map(|o| o.row)
            .collect();
        let summary = summarize(&rows);
        Ok(RunReport {
            header: ReportHeader {
                version: REPORT_VERSION,
                note: REPORT_NOTE.into(),
                config: self.config.clone(),
                calibrations: self.calibrations.clone(),
            },
            rows,
            summary,
            wall_clock_secs: self
                .config
                .record_timing
                .then(|| start.elapsed().as_secs_f64()),
        })
    }
}

fn mode_epsilon_key(row: &QueryRow) -> (Mode, Option<u64>) {
    (row.mode, row.epsilon.map(f64::to_bits))
}

/// Aggregates rows per `(mode, epsilon)`.
pub fn summarize(rows: &[QueryRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(Mode, Option<u64>), Vec<&QueryRow>> = BTreeMap::new();
    for row in rows {
        groups.entry(mode_epsilon_key(row)).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|((mode, eps_bits), rows)| {
            let scored: Vec<&EvalScores> = rows.iter().filter_map(|r| r.scores.as_ref()).collect();
            let n = scored.len().max(1) as f64;
            let mean =
                |f: fn(&EvalScores) -> f64| 100.0 * scored.iter().map(|s| f(s)).sum::<f64>() / n;
            let pass_rate = matches!(mode, Mode::Dpksa | Mode::Ksa).then(|| {
                let released = rows
                    .iter()
                    .filter(|r| r.release.as_ref().is_some_and(|x| x.released))
                    .count();
                released as f64 / rows.len() as f64
            });
            GroupSummary {
                mode,
                epsilon: eps_bits.map(f64::from_bits),
                rows: rows.len(),
                errors: rows.iter().filter(|r| r.error.is_some()).count(),
                pass_rate,
                mean_scores: EvalScores {
                    f1: mean(|s| s.f1),
                    rouge1: mean(|s| s.rouge1),
                    rouge_l: mean(|s| s.rouge_l),
                    lev: mean(|s| s.lev),
                },
            }
        })
        .collect()
}

/// Rescores the answers of an existing report and recomputes its summary.
pub fn rescore_report(report: &RunReport, normalization: Normalization) -> RunReport {
    let rows: Vec<QueryRow> = report
        .rows
        .iter()
        .map(|row| {
            let mut row = row.clone();
            row.scores = row.answer.as_deref().and_then(|a| {
                score_against_references_with(normalization, a, &row.references).ok()
            });
            row
        })
        .collect();
    let mut header = report.header.clone();
    header.config.normalization = normalization;
    RunReport {
        summary: summarize(&rows),
        rows,
        header,
        wall_clock_secs: report.wall_clock_secs,
    }
}

/// Builds the generator named by the configuration.
pub fn build_generator(choice: &GeneratorChoice) -> Result<Box<dyn Generator>, PipelineError> {
    Ok(match choice {
        GeneratorChoice::Mock { behavior } => Box::new(MockGenerator::new(behavior.clone())),
        GeneratorChoice::Endpoint(cfg) => Box::new(HttpGenerator::new(cfg.clone())?),
    })
}

/// Loads inputs named by `config`, runs every cell and returns the report.
pub fn run_experiment(config: &RunConfig) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let queries = match &config.queries {
        Some(path) => load_queries(path)?,
        None => Vec::new(),
    };
    if queries.is_empty() {
        return Err(PipelineError::NoQueries);
    }
    let retriever = match &config.corpus {
        Some(path) if config.modes.iter().any(|m| m.uses_retrieval()) => {
            Some(CorpusRetriever::new(ingest_corpus(path, config.dimension)?))
        }
        _ => None,
    };
    let templates = match &config.templates {
        Some(dir) => Templates::load_dir(dir)?,
        None => Templates::default(),
    };
    let generator = build_generator(&config.generator)?;
    let pipeline = Pipeline::new(
        config.clone(),
        retriever.as_ref().map(|r| r as &dyn Retriever),
        generator.as_ref(),
        templates,
    )?;
    pipeline.run(&queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::MockBehavior;
    use crate::retrieval::{mock_embed, Corpus, Document};

    fn corpus() -> CorpusRetriever {
        let docs = (0..40)
            .map(|i| {
                let text = format!("paris capital france city{} river{}", i % 7, i % 3);
                Document {
                    id: format!("d{i:02}"),
                    embedding: mock_embed(&text, 32),
                    text,
                }
            })
            .collect();
        CorpusRetriever::new(Corpus::from_documents(docs).unwrap())
    }

    fn config() -> RunConfig {
        RunConfig {
            epsilons: vec![8.0],
            ensemble_size: 40,
            k_min: 1,
            k_max: 10,
            modes: vec![Mode::Dpksa, Mode::Ksa, Mode::Nonrag, Mode::RagTop2],
            corpus: Some("unused".into()),
            dimension: 32,
            seed: 11,
            ..RunConfig::default()
        }
    }

    #[test]
    fn all_modes_produce_rows() {
        let r = corpus();
        let g = MockGenerator::new(MockBehavior::EchoDocumentKeywords);
        let p = Pipeline::new(config(), Some(&r), &g, Templates::default()).unwrap();
        let q = QueryRecord::new("what is the capital of france", vec!["paris".into()]);
        let report = p.run(&[q]).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(
            report.rows.iter().all(|r| r.error.is_none()),
            "{:?}",
            report.rows
        );

        let ksa = report.rows.iter().find(|r| r.mode == Mode::Ksa).unwrap();
        let rel = ksa.release.as_ref().unwrap();
        assert!(rel.released);
        assert!(rel.keywords.iter().any(|k| k == "paris"));

        let dp = report.rows.iter().find(|r| r.mode == Mode::Dpksa).unwrap();
        assert!(dp.achieved.unwrap().epsilon <= 8.0 + 1e-3);
        assert_eq!(dp.ensemble_size, Some(40));
    }

    #[test]
    fn nonrag_row_has_no_release() {
        let g = MockGenerator::new(MockBehavior::FixedString("paris".into()));
        let cfg = RunConfig {
            modes: vec![Mode::Nonrag],
            ..RunConfig::default()
        };
        let p = Pipeline::new(cfg, None, &g, Templates::default()).unwrap();
        let out = p.run_query(
            &QueryRecord::new("q?", vec!["paris".into()]),
            0,
            Mode::Nonrag,
            None,
        );
        assert!(out.row.release.is_none());
        assert_eq!(out.row.scores.unwrap().f1, 1.0);
        assert!(out.retrieved.is_empty());
    }

    #[test]
    fn boundary_check_flags_leaks() {
        let docs = vec![ScoredDocument {
            id: "d".into(),
            text: "secret launch code zebra".into(),
            score: 1.0,
        }];
        let tpl = "Keywords: {keywords}\nQuestion: {question}";
        assert!(check_privacy_boundary(
            "Keywords: zebra\nQuestion: what code?",
            "what code?",
            tpl,
            &["zebra".into()],
            &docs
        )
        .is_ok());
        let err = check_privacy_boundary(
            "Keywords: zebra launch\nQuestion: what code?",
            "what code?",
            tpl,
            &["zebra".into()],
            &docs,
        )
        .unwrap_err();
        assert!(err.contains("launch"));
    }

    #[test]
    fn report_roundtrip_and_rescore() {
        let r = corpus();
        let g = MockGenerator::new(MockBehavior::EchoDocumentKeywords);
        let p = Pipeline::new(config(), Some(&r), &g, Templates::default()).unwrap();
        let report = p
            .run(&[QueryRecord::new(
                "capital of france",
                vec!["the paris".into()],
            )])
            .unwrap();
        let text = report.to_jsonl_string();
        let back = RunReport::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, report);
        let rescored = rescore_report(&back, Normalization::StripArticles);
        assert_eq!(rescored.rows.len(), report.rows.len());
        assert_eq!(
            rescored.header.config.normalization,
            Normalization::StripArticles
        );
    }

    #[test]
    fn empty_queries_rejected() {
        let g = MockGenerator::new(MockBehavior::EchoDocumentKeywords);
        let cfg = RunConfig {
            modes: vec![Mode::Nonrag],
            ..RunConfig::default()
        };
        let p = Pipeline::new(cfg, None, &g, Templates::default()).unwrap();
        assert!(matches!(p.run(&[]), Err(PipelineError::NoQueries)));
    }
}
