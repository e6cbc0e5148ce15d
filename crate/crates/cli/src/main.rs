use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cfsize_core::clients::{Clients, HttpConfig};
use cfsize_core::dataset::{Catalog, Construction, ConstructionConfig, FewShot};
use cfsize_core::dpo::{toy_train, DpoConfig, ToyScorer};
use cfsize_core::evaluator::{outcomes_to_jsonl, read_outcomes, EvalItem, Evaluator, EvaluatorConfig, ImageDir, OutcomeLine};
use cfsize_core::jsonl::{read_jsonl, to_jsonl};
use cfsize_core::label::{nearest_label, ReferenceDb};
use cfsize_core::ranking::{generate_and_rank, CandidateScorer, RemoteRanker, SamplingConfig};
use cfsize_core::report::{
    render_ablation, render_accuracy, run_ablation, AccuracyReport, AnnotatedCorpus, ReportFormat,
};
use cfsize_core::synthetic::{sample_catalog, write_ablation_corpus, write_dataset_corpus, CorpusLayout};

#[derive(Parser)]
#[command(name = "cfsize", version, about = "Counterfactual-size image evaluation and prompt pipeline")]
struct Cli {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BackendArgs {
    /// Replay model responses from this fixture directory instead of calling services.
    #[arg(long, global = true, env = "CFSIZE_FIXTURES")]
    fixtures: Option<PathBuf>,
    /// HTTP request timeout in seconds.
    #[arg(long, global = true, default_value_t = 60)]
    timeout_secs: u64,
    /// Retries on transient HTTP failures.
    #[arg(long, global = true, default_value_t = 3)]
    retries: u32,
    /// Maximum concurrent requests per service.
    #[arg(long, global = true, default_value_t = 4)]
    max_in_flight: usize,
}

impl BackendArgs {
    fn clients(&self) -> Result<Clients> {
        self.clients_or(None)
    }

    fn clients_or(&self, default_fixtures: Option<&Path>) -> Result<Clients> {
        if let Some(root) = self.fixtures.as_deref().or(default_fixtures) {
            return Clients::fixtures(root).with_context(|| format!("opening fixtures at {}", root.display()));
        }
        let mut config = HttpConfig::from_env();
        if config.urls.is_empty() {
            bail!("no backend: pass --fixtures or set CFSIZE_*_URL environment variables");
        }
        config.timeout = Duration::from_secs(self.timeout_secs);
        config.retries = self.retries;
        config.max_in_flight = self.max_in_flight;
        Ok(Clients::http(config)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Score images for counterfactual object sizes.
    Evaluate {
        /// JSONL of {"image_id","small","big"[,"image_ref","seed"]}.
        #[arg(long)]
        pairs: PathBuf,
        /// Directory holding `<image_ref>.png`.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Reference embedding database tools.
    Db {
        #[command(subcommand)]
        command: DbCommand,
    },
    /// Build SFT pairs and DPO triplets from an object catalog.
    BuildDataset {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        few_shot: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        db: PathBuf,
        /// Directory holding generated images as `<image_ref>.png`.
        #[arg(long)]
        images: PathBuf,
        /// Evaluator configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 15)]
        rewrites: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.6)]
        temperature: f64,
        #[arg(long, default_value_t = 1.0)]
        top_p: f64,
        #[arg(long)]
        max_triplets_per_base: Option<usize>,
    },
    /// Train the linear toy scorer with the DPO objective.
    DpoToyTrain {
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        ref_mixup_alpha: f64,
        #[arg(long, default_value_t = 512)]
        ref_sync_steps: usize,
        /// Start from this scorer instead of zero weights.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite base prompts and keep the best candidate of each.
    Rank {
        /// One base prompt per line.
        #[arg(long)]
        base_prompts: PathBuf,
        #[arg(long, default_value_t = 15)]
        n: usize,
        #[arg(long, default_value_t = 0.6)]
        temperature: f64,
        #[arg(long, default_value_t = 1.0)]
        top_p: f64,
        /// Rank with a trained toy scorer instead of the remote ranker.
        #[arg(long)]
        toy_model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metric reports.
    Report {
        #[command(subcommand)]
        command: ReportCommand,
    },
    /// F1 of each evaluator variant against human annotations.
    Ablate {
        /// Corpus directory with items.jsonl, db.jsonl, images/ and fixtures/.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Write the synthetic sample corpora.
    #[command(hide = true)]
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        rewrites: usize,
    },
}

#[derive(Subcommand)]
enum DbCommand {
    /// Check that every entry parses and shares one dimension.
    Validate { path: PathBuf },
    /// Nearest label for a query vector stored as a JSON array.
    Query {
        path: PathBuf,
        #[arg(long)]
        vector_file: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Per-seed accuracy aggregated as mean ± std.
    Accuracy {
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Comma-separated seeds; defaults to all seeds present.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value = "cfsize")]
        method: String,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<EvaluatorConfig> {
    match path {
        Some(p) => Ok(EvaluatorConfig::load(p)?),
        None => Ok(EvaluatorConfig::default()),
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let backend = &cli.backend;
    match cli.command {
        Command::Evaluate {
            pairs,
            images,
            db,
            config,
            out,
            parallelism,
        } => {
            let config = load_config(config.as_deref())?;
            let db = ReferenceDb::load(&db)?;
            let items: Vec<EvalItem> = read_jsonl(&pairs)?;
            let clients = backend.clients()?;
            let images = ImageDir::new(images);
            let evaluator = Evaluator::new(&clients, &images, &db, &config);
            let lines: Vec<OutcomeLine> = items
                .iter()
                .zip(evaluator.evaluate_batch(&items, parallelism))
                .map(|(item, r)| OutcomeLine::from_result(item, r))
                .collect();
            let failed = lines.iter().filter(|l| l.outcome().is_none()).count();
            write_out(Some(&out), &outcomes_to_jsonl(&lines)?)?;
            eprintln!("evaluated {} images, {failed} errors", lines.len());
        }
        Command::Db { command } => match command {
            DbCommand::Validate { path } => {
                let db = ReferenceDb::load(&path)?;
                println!("ok: {} entries, dimension {}", db.len(), db.dim());
            }
            DbCommand::Query { path, vector_file } => {
                let db = ReferenceDb::load(&path)?;
                let text = fs::read_to_string(&vector_file)
                    .with_context(|| format!("reading {}", vector_file.display()))?;
                let query: Vec<f64> =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", vector_file.display()))?;
                let m = nearest_label(&query, &db)?;
                println!("{}", serde_json::to_string(&m)?);
            }
        },
        Command::BuildDataset {
            catalog,
            few_shot,
            out,
            db,
            images,
            config,
            rewrites,
            seed,
            temperature,
            top_p,
            max_triplets_per_base,
        } => {
            let eval_config = load_config(config.as_deref())?;
            let catalog = Catalog::load(&catalog)?;
            let few_shot = FewShot::load(&few_shot)?;
            let db = ReferenceDb::load(&db)?;
            let clients = backend.clients()?;
            let images = ImageDir::new(images);
            let config = ConstructionConfig {
                rewrites_per_base: rewrites,
                temperature,
                top_p,
                seed,
                max_triplets_per_base,
            };
            let summary = Construction {
                clients: &clients,
                images: &images,
                db: &db,
                eval_config: &eval_config,
                config: &config,
            }
            .run(&catalog, &few_shot, &out)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::DpoToyTrain {
            triplets,
            steps,
            lr,
            beta,
            ref_mixup_alpha,
            ref_sync_steps,
            init,
            out,
        } => {
            let triplets = read_jsonl(&triplets)?;
            let scorer = match init {
                Some(p) => ToyScorer::load(p)?,
                None => ToyScorer::default(),
            };
            let config = DpoConfig {
                beta,
                ref_mixup_alpha,
                ref_sync_steps,
            };
            let (trained, report) = toy_train(&triplets, scorer, config, steps, lr)?;
            trained.save(&out)?;
            println!(
                "loss {:.6} -> {:.6}, pairwise accuracy {:.3}",
                report.losses.first().copied().unwrap_or(f64::NAN),
                report.final_loss.mean,
                report.final_loss.pairwise_accuracy
            );
        }
        Command::Rank {
            base_prompts,
            n,
            temperature,
            top_p,
            toy_model,
            out,
        } => {
            let text = fs::read_to_string(&base_prompts)
                .with_context(|| format!("reading {}", base_prompts.display()))?;
            let clients = backend.clients()?;
            let toy = toy_model.map(ToyScorer::load).transpose()?;
            let remote = RemoteRanker { clients: &clients };
            let ranker: &dyn CandidateScorer = match &toy {
                Some(t) => t,
                None => &remote,
            };
            let sampling = SamplingConfig {
                n_candidates: n,
                temperature,
                top_p,
            };
            let ranked = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|base| generate_and_rank(base, &clients, ranker, &sampling))
                .collect::<cfsize_core::Result<Vec<_>>>()?;
            write_out(Some(&out), &to_jsonl(&ranked)?)?;
        }
        Command::Report { command } => match command {
            ReportCommand::Accuracy {
                outcomes,
                tau,
                seeds,
                method,
                format,
                out,
            } => {
                let lines = read_outcomes(&outcomes)?;
                let skipped = lines.iter().filter(|l| l.outcome().is_none()).count();
                if skipped > 0 {
                    log::warn!("{skipped} error lines skipped");
                }
                let outcomes: Vec<_> = lines.iter().filter_map(|l| l.outcome().cloned()).collect();
                let report = AccuracyReport::from_outcomes(&method, &outcomes, tau, seeds.as_deref())?;
                write_out(out.as_deref(), &render_accuracy(&report, format.into())?)?;
                eprintln!("{method}: {}", report.summary());
            }
        },
        Command::Ablate {
            corpus,
            annotations,
            config,
            format,
            out,
            parallelism,
        } => {
            let layout = CorpusLayout::in_dir(&corpus);
            let config = load_config(config.as_deref())?;
            let data = AnnotatedCorpus::load(&layout.items, &annotations)?;
            let db = ReferenceDb::load(&layout.db)?;
            let clients = backend.clients_or(Some(&layout.fixtures))?;
            let images = ImageDir::new(&layout.images);
            let table = run_ablation(&data, &clients, &images, &db, &config, parallelism)?;
            write_out(Some(&out), &render_ablation(&table, format.into())?)?;
            for row in &table.rows {
                eprintln!("{:<52} F1 {:.3}", row.variant.name(), row.f1);
            }
        }
        Command::SynthCorpus { out, rewrites } => {
            let ablation = write_ablation_corpus(out.join("ablation"))?;
            eprintln!("ablation corpus written to {}", ablation.items.parent().unwrap_or(&out).display());
            let config = ConstructionConfig {
                rewrites_per_base: rewrites,
                ..ConstructionConfig::default()
            };
            let (_, summary) = write_dataset_corpus(out.join("dataset"), &sample_catalog(), &config)?;
            eprintln!("dataset corpus: {}", serde_json::to_string(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
