use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use annoforge::config::{BackendChoice, ConfigError, Initial, Method, Overrides, RunConfig};
use annoforge::datasets::{make_fixture, reference_fixture_spec, FixtureSpec};
use annoforge::discussion::TiePolicy;
use annoforge::metrics::McNemarMethod;
use annoforge::providers::BackendMode;
use annoforge::runner::{self, RunError, Selector, REPORTS_DIR};

/// Multi-agent LLM annotation runner.
#[derive(Parser)]
#[command(name = "annoforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate a dataset sample with the configured strategy or discussion.
    Annotate(RunArgs),
    /// Score finished runs and write report tables.
    Evaluate(EvaluateArgs),
    /// McNemar comparison of two runs over the same instances.
    Compare(CompareArgs),
    /// Re-run a recorded run from its cache and check transcripts match.
    Replay(ReplayArgs),
    /// Emit a synthetic dataset with a prerecorded response cache.
    Fixture(FixtureArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    guideline: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "r-max")]
    r_max: Option<u32>,
    /// abstain | label-order | seeded-random:<seed>
    #[arg(long = "tie-policy")]
    tie_policy: Option<TiePolicy>,
    #[arg(long = "cache-dir")]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// real | simulated
    #[arg(long)]
    backend: Option<BackendChoice>,
    /// vanilla | cot | sc | refine | discussion
    #[arg(long)]
    strategy: Option<Method>,
    /// Round-0 procedure of a discussion: vanilla | cot | sc | refine | discuss-initial
    #[arg(long)]
    initial: Option<Initial>,
    #[arg(long = "sc-samples")]
    sc_samples: Option<u32>,
    #[arg(long = "sc-temperature")]
    sc_temperature: Option<f64>,
    /// exact | chi2_cc | auto
    #[arg(long)]
    mcnemar: Option<McNemarMethod>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            name: self.name.clone(),
            dataset: self.dataset.clone(),
            guideline: self.guideline.clone(),
            task: self.task.clone(),
            templates: self.templates.clone(),
            seed: self.seed,
            n: self.n,
            r_max: self.r_max,
            tie_policy: self.tie_policy,
            cache_dir: self.cache_dir.clone(),
            out: self.out.clone(),
            parallelism: self.parallelism,
            backend: self.backend,
            strategy: self.strategy,
            initial: self.initial,
            sc_samples: self.sc_samples,
            sc_temperature: self.sc_temperature,
            mcnemar: self.mcnemar,
        }
    }

    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        match &self.config {
            Some(path) => {
                let mut cfg = RunConfig::load(path)?;
                cfg.apply(&self.overrides());
                Ok(cfg)
            }
            None => RunConfig::from_overrides(&self.overrides()),
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directories; defaults to the `out` of --config.
    runs: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where report files go; defaults to <first run>/reports.
    #[arg(long)]
    reports: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    guideline: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    mcnemar: McNemarMethod,
}

#[derive(Args)]
struct CompareArgs {
    first: PathBuf,
    second: PathBuf,
    /// final | mv | agent:<id>
    #[arg(long = "select-first", default_value = "final")]
    select_first: Selector,
    #[arg(long = "select-second", default_value = "final")]
    select_second: Selector,
    #[arg(long, default_value = "auto")]
    mcnemar: McNemarMethod,
    /// Also write the full-precision result as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    guideline: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Run directory; defaults to the `out` of --config.
    run: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML fixture spec; the built-in reference spec when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn run_dir_from(config: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<PathBuf, RunError> {
    if let Some(o) = out {
        return Ok(o.clone());
    }
    match config {
        Some(c) => Ok(RunConfig::load(c)?.out),
        None => Err(ConfigError("give a run directory, --out or --config".into()).into()),
    }
}

fn dataset_override<'a>(d: &'a Option<PathBuf>, g: &'a Option<PathBuf>) -> Result<Option<(&'a Path, &'a Path)>, RunError> {
    match (d, g) {
        (Some(d), Some(g)) => Ok(Some((d, g))),
        (None, None) => Ok(None),
        _ => Err(ConfigError("--dataset and --guideline go together".into()).into()),
    }
}

fn annotate(args: RunArgs) -> Result<ExitCode, RunError> {
    let cfg = args.resolve()?;
    let s = runner::annotate(&cfg, BackendMode::Live)?;
    println!(
        "annotated {} instances ({} failed, {} resumed, {} backend calls) into {}",
        s.instances,
        s.failed,
        s.resumed,
        s.backend_calls,
        s.out.display()
    );
    Ok(if s.failed > 0 { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn evaluate(args: EvaluateArgs) -> Result<ExitCode, RunError> {
    let runs = if args.runs.is_empty() {
        vec![run_dir_from(&args.config, &args.out)?]
    } else {
        args.runs.clone()
    };
    let over = dataset_override(&args.dataset, &args.guideline)?;
    let loaded = runs
        .iter()
        .map(|r| runner::load_run(r, over))
        .collect::<Result<Vec<_>, _>>()?;
    let reports = args.reports.unwrap_or_else(|| runs[0].join(REPORTS_DIR));
    let report = runner::evaluate(&loaded, args.mcnemar, &reports)?;
    print!("{}", annoforge::report::accuracy_csv(&report));
    println!("reports written to {}", reports.display());
    let failed: usize = report.summaries.iter().map(|s| s.failed).sum();
    Ok(if failed > 0 { ExitCode::from(3) } else { ExitCode::SUCCESS })
}

fn compare(args: CompareArgs) -> Result<ExitCode, RunError> {
    let over = dataset_override(&args.dataset, &args.guideline)?;
    let a = runner::load_run(&args.first, over)?;
    let b = runner::load_run(&args.second, over)?;
    let r = runner::compare(&a, &args.select_first, &b, &args.select_second, args.mcnemar)?;
    print!("{}", r.table());
    if let Some(path) = &args.json {
        let mut text = serde_json::to_string_pretty(&r).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| RunError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(ExitCode::SUCCESS)
}

fn replay(args: ReplayArgs) -> Result<ExitCode, RunError> {
    let dir = match args.run {
        Some(d) => d,
        None => run_dir_from(&args.config, &args.out)?,
    };
    let r = runner::replay(&dir)?;
    if r.identical {
        println!("replayed {} instances from cache: transcripts identical", r.instances);
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "replayed {} instances ({} failed): transcripts differ, see {}",
            r.instances,
            r.failed,
            r.replay_dir.display()
        );
        Ok(ExitCode::from(1))
    }
}

fn fixture(args: FixtureArgs) -> Result<ExitCode, RunError> {
    let spec: FixtureSpec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| RunError::Io {
                path: p.clone(),
                source,
            })?;
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
        }
        None => reference_fixture_spec(),
    };
    let f = make_fixture(&spec, args.seed, &args.out)?;
    println!(
        "fixture with {} instances at {} (framework accuracy {:.1})",
        f.transcripts.len(),
        args.out.display(),
        f.accuracy * 100.0
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Annotate(a) => annotate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Replay(a) => replay(a),
        Command::Fixture(a) => fixture(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
