//! `ihcube`: generate data, build and inspect indexes, answer queries, serve
//! the HTTP API and run the benchmark experiments.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ihcube_bench::experiments::{run_experiment, BenchConfig, Experiment};
use ihcube_bench::generate::{Dataset, SkewSpec, SplomSpec};
use ihcube_core::ingest::{build_from_csv, SchemaConfig};
use ihcube_core::query::execute;
use ihcube_core::store;
use ihcube_server::api::{to_spec, QueryRequest, QueryResponse, SchemaResponse, StatsResponse};

#[derive(Parser)]
#[command(
    name = "ihcube",
    version,
    about = "Approximate aggregate queries over integral histograms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Splom,
    Skewed,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic CSV plus a matching ingest config.
    Generate {
        #[arg(value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        /// Ingest config path; defaults to the CSV path with a .toml extension.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        rows: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of dimensions (splom only).
        #[arg(long)]
        dims: Option<usize>,
    },
    /// Ingest a CSV and write an index file.
    Build {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer one query request (JSON, as sent to POST /query).
    Query {
        #[arg(long)]
        index: PathBuf,
        /// Request file; `-` reads standard input.
        #[arg(long)]
        request: PathBuf,
    },
    /// Print the schema document of an index.
    Schema {
        #[arg(long)]
        index: PathBuf,
    },
    /// Print the build statistics of an index.
    Stats {
        #[arg(long)]
        index: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Run one experiment (or `all`) and write its report.
    Bench {
        experiment: String,
        /// TOML with one table per experiment; defaults apply where absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            kind,
            out,
            config,
            rows,
            seed,
            dims,
        } => generate(kind, &out, config, rows, seed, dims),
        Command::Build { config, csv, out } => build(&config, &csv, &out),
        Command::Query { index, request } => query(&index, &request),
        Command::Schema { index } => print(&SchemaResponse::new(&load(&index)?)),
        Command::Stats { index } => print(&StatsResponse::new(&load(&index)?)),
        Command::Serve { index, port } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(ihcube_server::serve(index, port))?;
            Ok(())
        }
        Command::Bench {
            experiment,
            config,
            out,
        } => bench(&experiment, config.as_deref(), &out),
    }
}

fn print<T: serde::Serialize>(v: &T) -> Result<()> {
    emit(&format!("{}\n", serde_json::to_string_pretty(v)?))
}

/// Writes to stdout; a closed pipe (`| head`) ends output quietly.
fn emit(s: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(s.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn load(path: &Path) -> Result<ihcube_core::Index> {
    store::load(path).with_context(|| format!("loading {}", path.display()))
}

fn generate(
    kind: Kind,
    out: &Path,
    config: Option<PathBuf>,
    rows: Option<u64>,
    seed: Option<u64>,
    dims: Option<usize>,
) -> Result<()> {
    let dataset = match kind {
        Kind::Splom => {
            let mut spec = SplomSpec::default();
            spec.rows = rows.unwrap_or(spec.rows);
            spec.seed = seed.unwrap_or(spec.seed);
            spec.dims = dims.unwrap_or(spec.dims);
            Dataset::splom(&spec)?
        }
        Kind::Skewed => {
            if dims.is_some() {
                bail!("--dims applies to splom only");
            }
            let mut spec = SkewSpec::default();
            spec.rows = rows.unwrap_or(spec.rows);
            spec.seed = seed.unwrap_or(spec.seed);
            Dataset::skewed(&spec)?
        }
    };
    dataset
        .write_csv(out)
        .with_context(|| format!("writing {}", out.display()))?;
    let config = config.unwrap_or_else(|| out.with_extension("toml"));
    fs::write(&config, dataset.ingest_config().to_toml_string()?)?;
    eprintln!(
        "wrote {} rows to {} and config {}",
        dataset.rows(),
        out.display(),
        config.display()
    );
    Ok(())
}

fn build(config: &Path, csv: &Path, out: &Path) -> Result<()> {
    let cfg = SchemaConfig::from_file(config).with_context(|| format!("reading {}", config.display()))?;
    let (index, report) = build_from_csv(csv, &cfg)?;
    for w in &report.warnings {
        tracing::warn!("{w}");
    }
    store::save(&index, out).with_context(|| format!("writing {}", out.display()))?;
    // Reload so the printed storage is the file's.
    let saved = load(out)?;
    print(&serde_json::json!({
        "rows": report.rows,
        "skipped": report.skipped,
        "stats": StatsResponse::new(&saved),
    }))
}

fn query(index: &Path, request: &Path) -> Result<()> {
    let body = if request == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        fs::read_to_string(request).with_context(|| format!("reading {}", request.display()))?
    };
    let req: QueryRequest = serde_json::from_str(&body).context("parsing request")?;
    let index = load(index)?;
    let spec = to_spec(&index, &req)?;
    let result = execute(&index, &spec)?;
    print(&QueryResponse::from_result(index.schema(), result, req.timing))
}

fn bench(experiment: &str, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => {
            BenchConfig::from_toml_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => BenchConfig::default(),
    };
    let kinds: Vec<Experiment> = if experiment == "all" {
        Experiment::ALL.to_vec()
    } else {
        vec![experiment.parse()?]
    };
    let mut failed = false;
    for kind in kinds {
        tracing::info!(experiment = kind.name(), "running");
        let report = run_experiment(kind, &cfg)?;
        let files = report.write(out)?;
        emit(&report.to_text())?;
        for f in files {
            eprintln!("wrote {}", f.display());
        }
        failed |= !report.passed();
    }
    if failed {
        bail!("one or more checks failed");
    }
    Ok(())
}
