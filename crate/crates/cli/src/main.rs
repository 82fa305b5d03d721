use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dnc_core::divide::{FineBin, Subset};
use dnc_core::model::DatasetSchema;
use dnc_core::run::{self, BackendKind, DivideMode, RunConfig, SimulationSpec};
use dnc_core::Error;

#[derive(Parser)]
#[command(name = "dnc", version, about = "Confidence-partitioned multiple-choice inference")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Log one line per question.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample every question and split the dataset by confidence.
    Divide(DivideArgs),
    /// Re-ask medium and low confidence questions with one strategy.
    Conquer(ConquerArgs),
    /// Full run on the simulator, checking the profile's assertions.
    Simulate(SimulateArgs),
    /// Write report files for a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct DivideArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// mcq-jsonl or cloze-jsonl.
    #[arg(long)]
    schema: Option<String>,
    #[arg(long)]
    name: Option<String>,
    /// mock, http or replay.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    nu: Option<String>,
    #[arg(long)]
    divide_base: Option<u32>,
    /// sample or verify.
    #[arg(long)]
    mode: Option<String>,
    /// prompt0 or prompt1.
    #[arg(long)]
    tail: Option<String>,
    /// Also print counts for the split of the low subset.
    #[arg(long)]
    fine_bins: bool,
}

#[derive(Args)]
struct ConquerArgs {
    /// ztcot, pkr, fcr, com1 or com2.
    #[arg(long)]
    strategy: Option<String>,
    /// Self-consistency: sample as many times as the divide phase and vote.
    #[arg(long)]
    sc: bool,
    /// longest, shortest or random.
    #[arg(long)]
    rationale_select: Option<String>,
    /// Comma-separated: med, low, low_top, low_bottom.
    #[arg(long, value_delimiter = ',')]
    subsets: Option<Vec<String>>,
    /// full, random_k:<k>, with_prior, without_prior or without_prior_2.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    tail: Option<String>,
    /// mock, http or replay.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON or TOML simulation profile.
    #[arg(long)]
    profile: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Print accuracy differences between two run directories instead.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    compare: Option<Vec<PathBuf>>,
    /// Re-run every phase from the cache alone and check the outputs match.
    #[arg(long)]
    replay: bool,
}

fn backend_kind(s: &str) -> Result<BackendKind, Error> {
    match s {
        "mock" => Ok(BackendKind::Mock),
        "http" => Ok(BackendKind::Http),
        "replay" => Ok(BackendKind::Replay),
        _ => Err(Error::Validation(vec![format!("unknown backend `{s}`")])),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(p) = cli.parallelism {
        cfg.run.parallelism = p;
    }
    if let Some(c) = &cli.cache_dir {
        cfg.run.cache_dir = Some(c.clone());
    }
    if let Some(o) = &cli.out_dir {
        cfg.run.out_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_divide(cfg: &mut RunConfig, a: &DivideArgs) -> Result<(), Error> {
    if let Some(p) = &a.dataset {
        cfg.dataset.path = Some(p.clone());
    }
    if let Some(s) = &a.schema {
        cfg.dataset.schema = s.parse::<DatasetSchema>()?;
    }
    if let Some(n) = &a.name {
        cfg.dataset.name = Some(n.clone());
    }
    if let Some(b) = &a.backend {
        cfg.backend.kind = backend_kind(b)?;
    }
    if let Some(e) = &a.endpoint {
        cfg.backend.endpoint = Some(e.clone());
    }
    if let Some(m) = &a.model {
        cfg.backend.model = Some(m.clone());
    }
    if let Some(k) = &a.api_key_env {
        cfg.backend.api_key_env = k.clone();
    }
    if let Some(p) = &a.profiles {
        cfg.simulator.profiles = Some(p.clone());
    }
    if let Some(x) = a.noise_rate {
        cfg.simulator.noise_rate = x;
    }
    if let Some(m) = &a.mu {
        cfg.dataset.mu = run::FractionValue::Text(m.clone());
    }
    if let Some(n) = &a.nu {
        cfg.dataset.nu = run::FractionValue::Text(n.clone());
    }
    if let Some(t) = a.divide_base {
        cfg.dataset.divide_base = t;
    }
    if let Some(m) = &a.mode {
        cfg.divide.mode = match m.as_str() {
            "sample" => DivideMode::Sample,
            "verify" => DivideMode::Verify,
            _ => return Err(Error::Validation(vec![format!("unknown divide mode `{m}`")])),
        };
    }
    if let Some(t) = &a.tail {
        cfg.divide.tail = t.clone();
    }
    Ok(())
}

fn apply_conquer(cfg: &mut RunConfig, a: &ConquerArgs) -> Result<(), Error> {
    if let Some(s) = &a.strategy {
        cfg.conquer.strategy = s.clone();
    }
    if a.sc {
        cfg.conquer.sc = true;
    }
    if let Some(r) = &a.rationale_select {
        cfg.conquer.rationale_select = r.clone();
    }
    if let Some(s) = &a.subsets {
        cfg.conquer.subsets = s.clone();
    }
    if let Some(x) = &a.ablation {
        cfg.conquer.ablation = Some(x.clone());
    }
    if let Some(t) = &a.tail {
        cfg.conquer.tail = Some(t.clone());
    }
    if let Some(b) = &a.backend {
        cfg.backend.kind = backend_kind(b)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Divide(a) => {
            apply_divide(&mut cfg, a)?;
            let s = run::cmd_divide(&cfg)?;
            let mut subsets: BTreeMap<Subset, usize> = BTreeMap::new();
            let mut bins: BTreeMap<FineBin, usize> = BTreeMap::new();
            for r in &s.reports {
                *subsets.entry(r.subset).or_default() += 1;
                *bins.entry(r.fine_bin).or_default() += 1;
            }
            println!("run {}: {} questions, {} records ({} cached, {} fetched)", s.run_id, s.reports.len(), s.records, s.cache_hits, s.fetches);
            for (k, n) in subsets {
                println!("  {:<10} {n}", k.to_string());
            }
            if a.fine_bins {
                for (k, n) in bins {
                    println!("  {:<10} {n}", k.as_str());
                }
            }
            println!("partition: {}", cfg.out_dir().join("divide/partition.jsonl").display());
        }
        Command::Conquer(a) => {
            apply_conquer(&mut cfg, a)?;
            let s = run::cmd_conquer(&cfg)?;
            let answered = s.outcomes.iter().filter(|o| o.final_answer.is_some()).count();
            let short = s.outcomes.iter().filter(|o| o.short_circuit).count();
            println!(
                "{}: {} questions, {} answered, {} short-circuited, {} records ({} cached, {} fetched)",
                s.tag,
                s.outcomes.len(),
                answered,
                short,
                s.records,
                s.cache_hits,
                s.fetches
            );
        }
        Command::Simulate(a) => {
            let spec = SimulationSpec::load(&a.profile)?;
            let result = run::cmd_simulate(&cfg, &spec);
            print_report_dir(&cfg);
            match result {
                Ok(s) => {
                    for r in &s.assertions {
                        println!("PASS {}", r.description);
                    }
                }
                Err(Error::Assertion(failed)) => {
                    for f in &failed {
                        println!("FAIL {f}");
                    }
                    return Err(Error::Assertion(failed));
                }
                Err(e) => return Err(e),
            }
        }
        Command::Report(a) => {
            if let Some(dirs) = &a.compare {
                for line in run::compare_runs(&dirs[0], &dirs[1])? {
                    println!("{line}");
                }
                return Ok(());
            }
            let dir = cfg.out_dir().to_path_buf();
            if a.replay {
                let s = run::replay_run(&dir, cfg.run.parallelism)?;
                println!(
                    "replayed {} records: {} cache hits, {} fetches, outputs {}",
                    s.records,
                    s.cache_hits,
                    s.fetches,
                    if s.identical { "identical" } else { "DIFFER" }
                );
                if !s.identical {
                    return Err(Error::Assertion(vec!["replayed outputs differ from stored files".into()]));
                }
            }
            let report = run::cmd_report(&dir)?;
            if report.json["partial"].as_bool() == Some(true) {
                println!("note: some conquer runs are incomplete; report is partial");
            }
            print_report_dir(&cfg);
        }
    }
    Ok(())
}

fn print_report_dir(cfg: &RunConfig) {
    for f in run::REPORT_FILES {
        let p = cfg.out_dir().join(f);
        if p.exists() {
            println!("wrote {}", p.display());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
