use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use pspot::config::PipelineConfig;
use pspot::evalkit::{self, reference, EvalReport};
use pspot::index::save_index;
use pspot::pipeline::{self, BuildOptions, DirPages, Engine, PageSource};
use pspot::preprocess::load_image;
use pspot::regionfilter::{read_annotations, Class, FilterModels};
use pspot::service::{self, AppState};
use pspot::spotting::{read_run, write_run};
use pspot::synth::{self, SynthParams};
use pspot::{Error, Result};

#[derive(Parser)]
#[command(name = "pspot", version, about = "Query-by-example pattern spotting in document images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration (TOML).
    #[arg(short, long, default_value = "pspot.toml")]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Crop, canvas and tile every page; writes tiles and their geometry.
    Preprocess {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline index construction.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Region classifier training and filtered indexing.
    #[command(subcommand)]
    Filter(FilterCommand),
    /// Run one or more queries; writes JSON lines (stdout by default).
    Spot {
        #[command(flatten)]
        config: ConfigArg,
        /// Query image; repeat for several.
        #[arg(short, long, required = true)]
        query: Vec<PathBuf>,
        /// Identifier for a single query (defaults to the file stem).
        #[arg(long)]
        query_id: Option<String>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Override the configured result list length.
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Score a run file against ground truth.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Validates page ids against this configuration's index.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-query size vs AP table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare evaluation reports of the three configurations with published figures.
    Report {
        #[arg(long)]
        dense_black: PathBuf,
        #[arg(long)]
        nontext_black: PathBuf,
        #[arg(long)]
        nontext_texture: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Generate a synthetic collection with planted queries.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        pages: usize,
        #[arg(long, default_value_t = 5)]
        planted: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Build the index (filtered when `filter.enabled`).
    Build(ConfigArg),
}

#[derive(Subcommand)]
enum FilterCommand {
    /// Train one region classifier per level from the annotated pages.
    Train(ConfigArg),
    /// Build a non-text-filtered index with the trained classifiers.
    Apply(ConfigArg),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn build(config: &PipelineConfig, filtered: bool) -> Result<()> {
    let source = DirPages::scan(config.pages_dir()?)?;
    let extractor = config.extractor_spec()?.build()?;
    let models = if filtered {
        Some(FilterModels::load_dir(&config.filter.model_dir)?)
    } else {
        None
    };
    let started = Instant::now();
    let index = pipeline::build_index(&source, extractor.as_ref(), &BuildOptions::from_config(config, models.as_ref()))?;
    save_index(&index, &config.output.index_dir)?;
    let counts: Vec<String> = index.shards.iter().map(|(k, s)| format!("P{k}={}", s.len())).collect();
    eprintln!(
        "indexed {} pages ({}) into {} in {:.1}s",
        source.len(),
        counts.join(", "),
        config.output.index_dir.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_report(path: &Path) -> Result<EvalReport> {
    let file = File::open(path).map_err(|_| Error::MissingAsset(path.to_path_buf()))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Preprocess { config, out } => {
            let config = PipelineConfig::load(&config.config)?;
            let source = DirPages::scan(config.pages_dir()?)?;
            std::fs::create_dir_all(&out)?;
            let mut lines = BufWriter::new(File::create(out.join("pages.jsonl"))?);
            let canvas = config.page_canvas();
            for n in 0..source.len() {
                let page = pipeline::preprocess_page(source.page_id(n), &source.load(n)?, &canvas, &config.preprocess)?;
                for (t, tile) in page.tiles.iter().enumerate() {
                    tile.image.save(out.join(format!("{}_t{t}.png", page.entry.page_id)))?;
                }
                serde_json::to_writer(&mut lines, &page.entry)?;
                lines.write_all(b"\n")?;
            }
            lines.flush()?;
        }
        Command::Index(IndexCommand::Build(c)) => {
            let config = PipelineConfig::load(&c.config)?;
            build(&config, config.filter.enabled)?;
        }
        Command::Filter(FilterCommand::Apply(c)) => build(&PipelineConfig::load(&c.config)?, true)?,
        Command::Filter(FilterCommand::Train(c)) => {
            let config = PipelineConfig::load(&c.config)?;
            let annotations_path = config
                .dataset
                .annotations
                .clone()
                .ok_or_else(|| Error::Config("dataset.annotations: required for training".into()))?;
            let annotations = read_annotations(&annotations_path)?;
            let source = DirPages::scan(config.pages_dir()?)?;
            let extractor = config.extractor_spec()?.build()?;
            let samples = pipeline::collect_samples(
                &source,
                &annotations,
                extractor.as_ref(),
                &config.page_canvas(),
                &config.preprocess,
                &config.filter,
            )?;
            let trained = pipeline::train_filters(samples, &config.filter)?;
            std::fs::create_dir_all(&config.filter.model_dir)?;
            for t in &trained {
                let k = t.model.level_k;
                t.model.save(&FilterModels::model_path(&config.filter.model_dir, k))?;
                let recall = t.test.recall_of(Class::NonText).map_or("n/a".into(), |r| format!("{r:.4}"));
                println!(
                    "P{k}: train/val/test = {:?}, val accuracy {:.4}, test non-text recall {recall}, test accuracy {:.4}",
                    t.split_sizes, t.validation.accuracy, t.test.accuracy
                );
            }
        }
        Command::Spot {
            config,
            query,
            query_id,
            out,
            top_n,
        } => {
            let mut config = PipelineConfig::load(&config.config)?;
            if let Some(n) = top_n {
                config.search.top_n = n;
            }
            if query_id.is_some() && query.len() > 1 {
                return Err(Error::InvalidInput("--query-id needs exactly one --query".into()));
            }
            let engine = Engine::open(config)?;
            let mut out = output(out.as_deref())?;
            for path in &query {
                let id = match &query_id {
                    Some(id) => id.clone(),
                    None => path.file_stem().and_then(|s| s.to_str()).unwrap_or("query").to_string(),
                };
                let image = load_image(path)?;
                let result = engine.spot(&id, &image)?;
                write_run(&result, &mut out)?;
                eprintln!(
                    "{id}: P{} {} detections in {:.3}s",
                    result.level_k,
                    result.detections.len(),
                    result.elapsed.as_secs_f64()
                );
            }
            out.flush()?;
        }
        Command::Eval {
            run,
            gt,
            config,
            out,
            csv,
        } => {
            let file = File::open(&run).map_err(|_| Error::MissingAsset(run.clone()))?;
            let results = read_run(BufReader::new(file))?;
            let truth = evalkit::read_ground_truth(&gt)?;
            let known: Option<HashSet<String>> = match config {
                Some(c) => {
                    let c = PipelineConfig::load(&c)?;
                    let index = pspot::index::load_index(&c.output.index_dir)?;
                    Some(index.catalog.pages.into_iter().map(|p| p.page_id).collect())
                }
                None => None,
            };
            let report = evalkit::evaluate(&results, &truth, known.as_ref(), evalkit::DEFAULT_IOU_THRESHOLD)?;
            println!(
                "queries {}  mAP image retrieval {:.4}  mAP pattern spotting {:.4}",
                report.queries.len(),
                report.map_retrieval,
                report.map_spotting
            );
            for c in &report.categories {
                println!(
                    "  {:>3}. {:<24} {:>6?} n={:<3} retrieval {:.4} spotting {:.4}",
                    c.rank, c.category, c.tier, c.queries, c.map_retrieval, c.map_spotting
                );
            }
            if let Some(p) = out {
                serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &report)?;
            }
            if let Some(p) = csv {
                evalkit::write_size_csv(&report, BufWriter::new(File::create(p)?))?;
            }
        }
        Command::Report {
            dense_black,
            nontext_black,
            nontext_texture,
        } => {
            let ours = [
                ("Dense + BlackCanv.", load_report(&dense_black)?),
                ("NonText clf + BlackCanv.", load_report(&nontext_black)?),
                ("NonText clf + TemplCanv.", load_report(&nontext_texture)?),
            ];
            println!("{:<28} {:>10} {:>10}   {:>10} {:>10}", "configuration", "retrieval", "spotting", "published", "");
            for ((name, r), published) in ours.iter().zip(reference::CONFIGURATIONS) {
                println!(
                    "{name:<28} {:>10.3} {:>10.3}   {:>10.3} {:>10.3}",
                    r.map_retrieval, r.map_spotting, published.map_retrieval, published.map_spotting
                );
            }
            let prior = reference::PRIOR_SYSTEM;
            println!(
                "{:<28} {:>10} {:>10}   {:>10.3} {:>10.3}",
                prior.name, "-", "-", prior.map_retrieval, prior.map_spotting
            );
            for check in reference::trend_checks(&ours[0].1, &ours[1].1, &ours[2].1) {
                let mark = if check.passed { "PASS" } else { "FAIL" };
                println!("{mark} {}: {}", check.name, check.detail);
            }
        }
        Command::Serve { config, addr } => {
            let config = PipelineConfig::load(&config.config)?;
            let service = config.service.clone();
            let engine = match Engine::open(config) {
                Ok(e) => Some(e),
                Err(e @ (Error::MissingAsset(_) | Error::CorruptIndex(_))) => {
                    log::warn!("serving without an index: {e}");
                    None
                }
                Err(e) => return Err(e),
            };
            let state = AppState::new(engine, service.max_inflight, service.cache_size, service.max_query_side);
            tokio::runtime::Runtime::new()?.block_on(service::serve(state, addr))?;
        }
        Command::Synth {
            out,
            pages,
            planted,
            seed,
        } => {
            let params = SynthParams {
                pages,
                planted_pages: planted,
                seed,
                ..SynthParams::default()
            };
            let collection = synth::generate(&params);
            collection.write_to_dir(&out)?;
            eprintln!(
                "wrote {} pages with {} planted instances to {}",
                collection.pages.len(),
                collection.planted.len(),
                out.display()
            );
        }
    }
    Ok(())
}
