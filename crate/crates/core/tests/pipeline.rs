use std::sync::atomic::{AtomicUsize, Ordering};

use dpksa::config::{Mode, QueryRecord, RunConfig};
use dpksa::generation::{
    mock_generate, GenerationError, GenerationRequest, Generator, MockBehavior, MockGenerator,
    TemplateKind, Templates,
};
use dpksa::pipeline::{Pipeline, RunReport};
use dpksa::retrieval::{RetrievalError, Retriever, ScoredDocument};

/// Returns fixed documents and counts calls.
struct FixedRetriever {
    docs: Vec<ScoredDocument>,
    calls: AtomicUsize,
}

impl FixedRetriever {
    fn new(texts: Vec<String>) -> Self {
        let docs = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| ScoredDocument {
                id: format!("doc{i:03}"),
                text,
                score: 1.0 / (i + 1) as f64,
            })
            .collect();
        Self {
            docs,
            calls: AtomicUsize::new(0),
        }
    }
}

impl Retriever for FixedRetriever {
    fn retrieve(&self, _question: &str, n: usize) -> Result<Vec<ScoredDocument>, RetrievalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.docs.iter().take(n).cloned().collect())
    }
}

/// Echoes like the mock, but fails on prompts containing "broken".
struct FlakyGenerator;

impl Generator for FlakyGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        if request.prompt.contains("broken") {
            Err(GenerationError::Transport("connection reset".into()))
        } else {
            Ok(mock_generate(request, &MockBehavior::EchoDocumentKeywords))
        }
    }
}

fn paris_documents(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            format!(
                "Paris is the capital of France. Landmark{} river{}.",
                i,
                i % 5
            )
        })
        .collect()
}

fn config(modes: Vec<Mode>, epsilons: Vec<f64>) -> RunConfig {
    RunConfig {
        epsilons,
        modes,
        ensemble_size: 40,
        k_min: 1,
        k_max: 5,
        corpus: Some("in-memory".into()),
        seed: 17,
        ..RunConfig::default()
    }
}

fn query() -> QueryRecord {
    QueryRecord::new("What is the capital of France?", vec!["Paris".into()])
}

#[test]
fn agreeing_ensemble_releases_the_shared_answer() {
    let retriever = FixedRetriever::new(paris_documents(40));
    let generator = MockGenerator::new(MockBehavior::EchoDocumentKeywords);
    let p = Pipeline::new(
        config(vec![Mode::Dpksa], vec![1000.0]),
        Some(&retriever),
        &generator,
        Templates::default(),
    )
    .unwrap();
    let out = p.run_query(&query(), 0, Mode::Dpksa, Some(1000.0));
    let release = out.row.release.unwrap();
    assert!(release.released, "{:?}", out.row.error);
    assert_eq!(release.k_hat, Some(3));
    assert_eq!(release.keywords, ["capital", "france", "paris"]);
    assert_eq!(out.row.final_prompt_kind, Some(TemplateKind::WithKeywords));
    let prompt = out.final_prompt.unwrap();
    assert!(prompt.contains("capital, france, paris"));
    assert!(!prompt.contains("landmark"));
    assert_eq!(out.row.answer.as_deref(), Some("capital, france, paris"));
    assert_eq!(out.row.scores.unwrap().f1, 0.5);
    assert_eq!(out.row.ensemble_size, Some(40));
}

#[test]
fn forced_refusal_matches_question_only_answer() {
    let retriever = FixedRetriever::new(paris_documents(40));
    let generator = MockGenerator::new(MockBehavior::EchoDocumentKeywords);
    let p = Pipeline::new(
        config(vec![Mode::Dpksa, Mode::Nonrag], vec![8.0]),
        Some(&retriever),
        &generator,
        Templates::default(),
    )
    .unwrap()
    .with_forced_refusal();
    let private = p.run_query(&query(), 0, Mode::Dpksa, Some(8.0));
    let public = p.run_query(&query(), 0, Mode::Nonrag, None);
    assert!(!private.row.release.as_ref().unwrap().released);
    assert_eq!(private.row.final_prompt_kind, Some(TemplateKind::ZeroShot));
    assert_eq!(private.final_prompt, public.final_prompt);
    assert_eq!(private.row.answer, public.row.answer);
    assert_eq!(private.row.scores, public.row.scores);
}

#[test]
fn question_only_mode_never_retrieves() {
    let retriever = FixedRetriever::new(paris_documents(10));
    let generator = MockGenerator::new(MockBehavior::FixedString("Paris".into()));
    let mut c = config(vec![Mode::Nonrag], vec![]);
    c.corpus = None;
    let p = Pipeline::new(c, Some(&retriever), &generator, Templates::default()).unwrap();
    let report = p.run(&[query(), query()]).unwrap();
    assert_eq!(retriever.calls.load(Ordering::SeqCst), 0);
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.release.is_none()));
    assert_eq!(report.summary[0].mean_scores.f1, 100.0);
}

#[test]
fn disagreeing_ensemble_is_refused() {
    let texts = (0..40)
        .map(|i| format!("unique{i}a unique{i}b unique{i}c"))
        .collect();
    let retriever = FixedRetriever::new(texts);
    let generator = MockGenerator::new(MockBehavior::EchoDocumentKeywords);
    let p = Pipeline::new(
        config(vec![Mode::Dpksa], vec![2.0]),
        Some(&retriever),
        &generator,
        Templates::default(),
    )
    .unwrap();
    let refused = (0..50)
        .filter(|i| {
            let out = p.run_query(&query(), *i, Mode::Dpksa, Some(2.0));
            !out.row.release.unwrap().released
        })
        .count();
    assert_eq!(refused, 50);
}

#[test]
fn noiseless_and_private_agree_at_huge_budget() {
    let retriever = FixedRetriever::new(paris_documents(40));
    let generator = MockGenerator::new(MockBehavior::EchoDocumentKeywords);
    let p = Pipeline::new(
        config(vec![Mode::Dpksa, Mode::Ksa], vec![1000.0]),
        Some(&retriever),
        &generator,
        Templates::default(),
    )
    .unwrap();
    let a = p.run_query(&query(), 0, Mode::Dpksa, Some(1000.0));
    let b = p.run_query(&query(), 0, Mode::Ksa, None);
    assert_eq!(a.row.release, b.row.release);
    assert_eq!(a.row.answer, b.row.answer);
    assert!(b.row.achieved.is_none() && a.row.achieved.is_some());
}

#[test]
fn plain_rag_places_top_documents_in_the_prompt() {
    let retriever = FixedRetriever::new(paris_documents(10));
    let generator = MockGenerator::new(MockBehavior::EchoDocumentKeywords);
    let p = Pipeline::new(
        config(vec![Mode::RagTop2], vec![]),
        Some(&retriever),
        &generator,
        Templates::default(),
    )
    .unwrap();
    let out = p.run_query(&query(), 0, Mode::RagTop2, None);
    let prompt = out.final_prompt.unwrap();
    assert!(prompt.contains("Landmark0") && prompt.contains("Landmark1"));
    assert!(!prompt.contains("Landmark2"));
    assert_eq!(out.row.final_prompt_kind, Some(TemplateKind::WithDocument));
}

#[test]
fn failed_ensemble_members_are_dropped() {
    let mut texts = paris_documents(40);
    for t in texts.iter_mut().take(5) {
        t.push_str(" broken");
    }
    let retriever = FixedRetriever::new(texts);
    let p = Pipeline::new(
        config(vec![Mode::Ksa], vec![]),
        Some(&retriever),
        &FlakyGenerator,
        Templates::default(),
    )
    .unwrap();
    let out = p.run_query(&query(), 0, Mode::Ksa, None);
    assert_eq!(out.row.ensemble_size, Some(35));
    assert!(out.row.error.is_none());
}

#[test]
fn reports_are_reproducible_and_round_trip() {
    let retriever = FixedRetriever::new(paris_documents(40));
    let generator = MockGenerator::new(MockBehavior::EchoDocumentKeywords);
    let run = || {
        Pipeline::new(
            config(vec![Mode::Dpksa, Mode::Ksa, Mode::Nonrag], vec![1.0, 8.0]),
            Some(&retriever),
            &generator,
            Templates::default(),
        )
        .unwrap()
        .run(&[
            query(),
            QueryRecord::new("Where is the river?", vec!["Seine".into()]),
        ])
        .unwrap()
    };
    let (a, b) = (run().to_jsonl_string(), run().to_jsonl_string());
    assert_eq!(a, b);
    let parsed = RunReport::read_jsonl(a.as_bytes()).unwrap();
    assert_eq!(parsed.to_jsonl_string(), a);
    assert_eq!(parsed.rows.len(), 2 * 4);
    assert!(parsed.wall_clock_secs.is_none());
}
