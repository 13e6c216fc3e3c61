use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paraal::alloop::{bootstrap, build_space};
use paraal::harness::{self, ExperimentConfig, GridOptions};
use paraal::numerics::checkpoint;
use paraal::taskgen::{generate_dataset, write_dataset};
use paraal::uncertainty::Strategy;
use paraal::Error;

#[derive(Parser)]
#[command(
    name = "paraal",
    version,
    about = "Active learning with embedding-variance uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's output_dir and PARAAL_OUTPUT_DIR
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated seeds, e.g. 1,2,3
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset of each seed
    GenData(Common),
    /// Train and checkpoint the semantic space of each seed
    TrainVs(Common),
    /// Run the strategy × seed active-learning grid
    RunAl {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategy names
        #[arg(long)]
        strategies: Option<String>,
        /// Replace finished runs instead of skipping them
        #[arg(long)]
        overwrite: bool,
        /// Grid cells run concurrently per seed
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Write every pool's uncertainty scores
        #[arg(long)]
        dump_scores: bool,
    },
    /// Dump raw and corrected entropy and variance scores of f0 on test items
    DiagnoseEntropy {
        #[command(flatten)]
        common: Common,
        /// Score only the first N test items
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Aggregate completed runs into mean ± std per strategy and iteration
    Report {
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Only print this metric
        #[arg(long, default_value = paraal::metrics::PARAPHRASE_ACCURACY)]
        metric: String,
    },
}

fn load(common: &Common) -> paraal::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &common.seed_list {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    let out = cfg.resolve_output_dir(common.output_dir.as_deref());
    Ok((cfg, out))
}

fn parse_strategies(list: &str) -> paraal::Result<Vec<Strategy>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse())
        .collect()
}

fn run(cli: Cli) -> paraal::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, out) = load(&common)?;
            for &seed in &cfg.seeds {
                let ds = generate_dataset(&cfg.dataset, seed)?;
                let dir = out.join("data").join(format!("seed_{seed}"));
                write_dataset(&ds, &dir)?;
                println!("seed {seed}: {} items -> {}", ds.items.len(), dir.display());
            }
        }
        Command::TrainVs(common) => {
            let (cfg, out) = load(&common)?;
            let dir = out.join("spaces");
            std::fs::create_dir_all(&dir)?;
            for &seed in &cfg.seeds {
                let ds = generate_dataset(&cfg.dataset, seed)?;
                let state = bootstrap(&ds, &cfg.schedule, seed)?;
                let space = build_space(&ds, &state, &cfg.vs, seed)?;
                let path = dir.join(format!("seed_{seed}.ckpt"));
                checkpoint::save(&space.store, &path)?;
                println!("seed {seed}: space -> {}", path.display());
            }
        }
        Command::RunAl {
            common,
            strategies,
            overwrite,
            jobs,
            dump_scores,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(list) = strategies {
                cfg.strategies = parse_strategies(&list)?;
                cfg.validate()?;
            }
            let opts = GridOptions {
                output_dir: out.clone(),
                overwrite,
                jobs,
                dump_scores,
                stop_after: None,
            };
            for r in harness::run_grid(&cfg, &opts)? {
                let secs: f64 = r.timings_secs.iter().sum();
                println!(
                    "{} {:<16} seed {:<4} {:.1}s",
                    r.run_id,
                    r.strategy.as_str(),
                    r.seed,
                    secs
                );
            }
            println!("results in {}", out.display());
        }
        Command::DiagnoseEntropy { common, limit } => {
            let (cfg, out) = load(&common)?;
            let dir = out.join("diagnostics");
            std::fs::create_dir_all(&dir)?;
            for &seed in &cfg.seeds {
                let d = harness::diagnose_entropy(&cfg, seed, limit)?;
                let path = dir.join(format!("entropy_seed_{seed}.csv"));
                harness::write_csv(&path, &d.rows)?;
                println!(
                    "seed {seed}: raw entropy single {:.4} (n={}) multi {:.4} (n={}) (+{:.1}%), corrected multi {:.4} -> {}",
                    d.single_raw_mean,
                    d.n_single,
                    d.multi_raw_mean,
                    d.n_multi,
                    100.0 * d.overestimation(),
                    d.multi_corrected_mean,
                    path.display()
                );
            }
        }
        Command::Report { output_dir, metric } => {
            let out = ExperimentConfig::default().resolve_output_dir(output_dir.as_deref());
            let rows = harness::report(&out)?;
            print_report(&rows, &metric, &out);
        }
    }
    Ok(())
}

fn print_report(rows: &[harness::AggregateRow], metric: &str, out: &Path) {
    println!(
        "{:<16} {:>4} {:>9} {:>18} {:>3}",
        "strategy", "iter", "labeled", metric, "n"
    );
    for r in rows
        .iter()
        .filter(|r| r.metric_name == metric && r.question_type == harness::ALL_TYPES)
    {
        println!(
            "{:<16} {:>4} {:>8.1}% {:>10.4} ± {:.4} {:>3}",
            r.strategy,
            r.iteration,
            100.0 * r.labeled_fraction,
            r.mean,
            r.std,
            r.n
        );
    }
    println!("full table in {}", out.join("report.csv").display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Schedule(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
