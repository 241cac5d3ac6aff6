use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dpksa::accountant::{calibrate, DpGuarantee, DEFAULT_ORDERS};
use dpksa::config::{GeneratorChoice, Mode, RunConfig};
use dpksa::generation::{GeneratorEndpointConfig, MockBehavior};
use dpksa::mechanisms::KRange;
use dpksa::metrics::Normalization;
use dpksa::pipeline::{rescore_report, run_experiment, RunReport};
use dpksa::retrieval::{ingest_corpus, DEFAULT_DIMENSION};
use dpksa::simulate::{simulate_ptr_pass_rate, SimulationParams, SyntheticFamily};

type CliError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Parser)]
#[command(name = "dp-ksa", version, about = "Private keyword extraction for RAG")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus file and optionally write it back with embeddings filled in.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DIMENSION)]
        dimension: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find mechanism parameters meeting an (epsilon, delta) budget.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        delta: f64,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
    },
    /// Answer a query set and write a JSON-lines report.
    Run(Box<RunArgs>),
    /// Estimate the stability-test pass rate on synthetic histograms.
    SimulatePtr(SimArgs),
    /// Rescore the answers in an existing report.
    Evaluate {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strip_articles: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    mode: Vec<Mode>,
    #[arg(long, value_delimiter = ',')]
    epsilon: Vec<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    ensembles: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gumbel_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    dimension: Option<usize>,
    /// Chat-completion base URL, e.g. http://localhost:8000/v1
    #[arg(long, conflicts_with = "mock")]
    endpoint: Option<String>,
    #[arg(long, default_value = "default")]
    model: String,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    auth_env: Option<String>,
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    max_parallel: Option<usize>,
    #[arg(long)]
    retries: Option<u32>,
    /// Mock generator: echo, keywords, or fixed:<text>
    #[arg(long)]
    mock: Option<MockBehavior>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    strip_articles: bool,
    /// Record wall-clock time in the summary.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyKind {
    Flat,
    Maximal,
    Agreement,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_enum, default_value = "agreement")]
    family: FamilyKind,
    #[arg(long, default_value_t = 80)]
    ensembles: usize,
    /// Support size of the flat family.
    #[arg(long, default_value_t = 40)]
    support: usize,
    /// Number of always-present tokens in the maximal family.
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 20)]
    answers: usize,
    #[arg(long, default_value_t = 0.6)]
    agreement: f64,
    #[arg(long, default_value_t = 200)]
    distractors: usize,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 3.0, 5.0, 8.0])]
    epsilon: Vec<f64>,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 15)]
    k_min: usize,
    #[arg(long, default_value_t = 30)]
    k_max: usize,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Emit JSON lines instead of a table.
    #[arg(long)]
    json: bool,
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_config(args: RunArgs) -> Result<(RunConfig, Option<PathBuf>), CliError> {
    let mut c = match &args.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    if !args.mode.is_empty() {
        c.modes = args.mode;
    }
    if !args.epsilon.is_empty() {
        c.epsilons = args.epsilon;
    }
    macro_rules! set {
        ($($field:ident <- $value:expr),* $(,)?) => {
            $(if let Some(v) = $value { c.$field = v; })*
        };
    }
    set!(
        delta <- args.delta,
        ensemble_size <- args.ensembles,
        k_min <- args.k_min,
        k_max <- args.k_max,
        em_fraction <- args.rho,
        seed <- args.seed,
        dimension <- args.dimension,
        max_tokens <- args.max_tokens,
        temperature <- args.temperature,
    );
    if args.gumbel_scale.is_some() {
        c.gumbel_scale = args.gumbel_scale;
    }
    if args.corpus.is_some() {
        c.corpus = args.corpus;
    }
    if args.queries.is_some() {
        c.queries = args.queries;
    }
    if args.templates.is_some() {
        c.templates = args.templates;
    }
    if let Some(behavior) = args.mock {
        c.generator = GeneratorChoice::Mock { behavior };
    }
    if let Some(url) = args.endpoint {
        let mut e = GeneratorEndpointConfig::new(url, args.model);
        e.auth_env = args.auth_env;
        c.generator = GeneratorChoice::Endpoint(e);
    }
    if let GeneratorChoice::Endpoint(e) = &mut c.generator {
        if let Some(t) = args.timeout {
            e.timeout_secs = t;
        }
        if let Some(p) = args.max_parallel {
            e.max_parallel = p;
        }
        if let Some(r) = args.retries {
            e.retry.max_retries = r;
        }
    }
    if args.strip_articles {
        c.normalization = Normalization::StripArticles;
    }
    if args.timing {
        c.record_timing = true;
    }
    Ok((c, args.out))
}

fn print_summary(report: &RunReport) {
    for g in &report.summary {
        let eps = g.epsilon.map_or("-".to_owned(), |e| e.to_string());
        let pass = g.pass_rate.map_or("-".to_owned(), |p| format!("{p:.3}"));
        eprintln!(
            "{:?}\teps={eps}\trows={}\terrors={}\tpass={pass}\tF1={:.2}\tR1={:.2}\tRL={:.2}\tLev={:.2}",
            g.mode,
            g.rows,
            g.errors,
            g.mean_scores.f1,
            g.mean_scores.rouge1,
            g.mean_scores.rouge_l,
            g.mean_scores.lev
        );
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest {
            corpus,
            dimension,
            out,
        } => {
            let c = ingest_corpus(&corpus, dimension)?;
            if let Some(path) = out {
                let mut w = BufWriter::new(File::create(path)?);
                writeln!(w, "{}", json!({ "dimension": c.dimension() }))?;
                for d in c.documents() {
                    serde_json::to_writer(&mut w, d)?;
                    writeln!(w)?;
                }
                w.flush()?;
            }
            println!(
                "{}",
                json!({ "documents": c.len(), "dimension": c.dimension() })
            );
        }
        Command::Calibrate {
            epsilon,
            delta,
            rho,
        } => {
            let cal = calibrate(DpGuarantee::new(epsilon, delta)?, rho, &DEFAULT_ORDERS)?;
            println!(
                "{}",
                json!({
                    "target": { "epsilon": epsilon, "delta": delta },
                    "rho": rho,
                    "sigma": cal.sigma,
                    "epsilon_em": cal.epsilon_em,
                    "alpha_star": cal.alpha_star,
                    "ptr_delta": cal.ptr_delta,
                    "achieved": cal.achieved,
                })
            );
        }
        Command::Run(args) => {
            let (config, out) = run_config(*args)?;
            let report = run_experiment(&config)?;
            let mut w = output(out.as_ref())?;
            report.write_jsonl(&mut w)?;
            w.flush()?;
            print_summary(&report);
        }
        Command::SimulatePtr(a) => {
            let family = match a.family {
                FamilyKind::Flat => SyntheticFamily::Flat {
                    ensemble_size: a.ensembles,
                    support: a.support,
                },
                FamilyKind::Maximal => SyntheticFamily::MaximalGap {
                    ensemble_size: a.ensembles,
                    k: a.k,
                },
                FamilyKind::Agreement => SyntheticFamily::Agreement {
                    ensemble_size: a.ensembles,
                    answers: a.answers,
                    agreement: a.agreement,
                    distractors: a.distractors,
                    noise: a.noise,
                },
            };
            let params = SimulationParams {
                epsilons: a.epsilon,
                delta: a.delta,
                em_fraction: a.rho,
                k_range: KRange::new(a.k_min, a.k_max)?,
                orders: DEFAULT_ORDERS.to_vec(),
                trials: a.trials,
                seed: a.seed,
            };
            let rows = simulate_ptr_pass_rate(&family, &params)?;
            if a.json {
                for r in &rows {
                    println!("{}", serde_json::to_string(r)?);
                }
            } else {
                println!("epsilon\tsigma\tpass_rate\tstd_err\treleased/trials");
                for r in &rows {
                    println!(
                        "{}\t{:.4}\t{:.4}\t{:.4}\t{}/{}",
                        r.epsilon, r.sigma, r.pass_rate, r.std_err, r.released, r.trials
                    );
                }
            }
        }
        Command::Evaluate {
            report,
            out,
            strip_articles,
        } => {
            let parsed = RunReport::read_jsonl(BufReader::new(File::open(&report)?))?;
            let norm = if strip_articles {
                Normalization::StripArticles
            } else {
                Normalization::Basic
            };
            let rescored = rescore_report(&parsed, norm);
            let mut w = output(out.as_ref())?;
            rescored.write_jsonl(&mut w)?;
            w.flush()?;
            print_summary(&rescored);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
