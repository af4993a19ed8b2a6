use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use otafl::harness::acceptance::{run_criterion, CRITERIA};
use otafl::harness::config::ExperimentConfig;
use otafl::harness::experiment::{run_experiment, write_outputs};
use otafl::harness::ledger::{channel_ledger, format_ledger};
use otafl::harness::report::{check_records, read_csv};
use otafl::harness::sweep::{run_sweep, SweepGrid};

#[derive(Parser)]
#[command(
    name = "otafl",
    version,
    about = "Over-the-air clustered federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every protocol and seed of one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of variations of one configuration.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        clusters: Vec<usize>,
        #[arg(long = "classes", value_delimiter = ',')]
        classes_per_client: Vec<usize>,
        #[arg(long = "snr", value_delimiter = ',', allow_negative_numbers = true)]
        snr_db: Vec<f64>,
        #[arg(long = "prox-lambda", value_delimiter = ',')]
        prox_lambda: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance checks, or validate a metrics file.
    Verify {
        /// Run only these criteria (1-10).
        #[arg(long = "criterion", value_delimiter = ',')]
        criteria: Vec<u8>,
        /// Parse and check a metrics CSV instead of running the checks.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print channel uses per protocol.
    Ledger {
        #[arg(long = "K", alias = "clients")]
        clients: usize,
        #[arg(long = "C", alias = "clusters")]
        clusters: usize,
        #[arg(long)]
        rounds: usize,
    },
}

fn load(path: &Path) -> Result<(ExperimentConfig, Vec<u8>)> {
    let source = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ExperimentConfig::load(path)?;
    Ok((cfg, source))
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let (mut cfg, source) = load(config)?;
    if let Some(seed) = seed {
        cfg.experiment.seeds = vec![seed];
    }
    let dir = out.unwrap_or_else(|| cfg.experiment.output_dir.clone());
    let result = run_experiment(&cfg)?;
    write_outputs(&cfg, &source, &result, &dir)?;
    for &kind in &cfg.experiment.protocols {
        let traces = result.traces_of(kind);
        let uses = traces.first().map_or(0, |t| t.total_channel_uses);
        match result.mean_final_accuracy(kind) {
            Some(acc) => println!(
                "{kind:<12} accuracy {:.2}%  channel uses {uses}",
                100.0 * acc
            ),
            None => {
                let deltas: Vec<f64> = traces
                    .iter()
                    .filter_map(|t| t.mean_at(t.final_slot(), |r| r.delta))
                    .collect();
                let mean = deltas.iter().sum::<f64>() / deltas.len().max(1) as f64;
                println!("{kind:<12} final distance {mean:.4e}  channel uses {uses}");
            }
        }
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn sweep(config: &Path, grid: SweepGrid, out: Option<PathBuf>) -> Result<bool> {
    let (cfg, source) = load(config)?;
    let dir = out.unwrap_or_else(|| cfg.experiment.output_dir.clone());
    let outcome = run_sweep(&cfg, &source, &grid, &dir)?;
    for r in &outcome.rows {
        let metric = match (r.mean_accuracy, r.mean_final_delta) {
            (Some(a), _) => format!("accuracy {:.2}%", 100.0 * a),
            (None, Some(d)) => format!("final distance {d:.4e}"),
            (None, None) => "no metric".into(),
        };
        println!(
            "{:<36} {:<12} {metric}  channel uses {}",
            r.cell.label(),
            r.protocol.name(),
            r.channel_uses
        );
    }
    for c in &outcome.checks {
        println!("{c}");
    }
    println!("wrote {}", dir.join("summary.csv").display());
    Ok(outcome.orderings_hold())
}

fn verify(criteria: Vec<u8>, csv: Option<PathBuf>) -> Result<bool> {
    if let Some(path) = csv {
        let file =
            std::fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let records = read_csv(file)?;
        check_records(&records)?;
        println!("{}: {} rows ok", path.display(), records.len());
        return Ok(true);
    }
    let ids: Vec<u8> = if criteria.is_empty() {
        CRITERIA.iter().map(|c| c.0).collect()
    } else {
        criteria
    };
    let mut all = true;
    for id in ids {
        let outcome = run_criterion(id)?;
        println!("{outcome}");
        all &= outcome.passed;
    }
    Ok(all)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => run(&config, seed, out).map(|_| true),
        Command::Sweep {
            config,
            clusters,
            classes_per_client,
            snr_db,
            prox_lambda,
            out,
        } => sweep(
            &config,
            SweepGrid {
                clusters,
                classes_per_client,
                snr_db,
                prox_lambda,
            },
            out,
        ),
        Command::Verify { criteria, csv } => verify(criteria, csv),
        Command::Ledger {
            clients,
            clusters,
            rounds,
        } => channel_ledger(clients, clusters, rounds)
            .map(|lines| print!("{}", format_ledger(&lines)))
            .map(|_| true)
            .map_err(Into::into),
    };
    match result.and_then(|ok| {
        if ok {
            Ok(())
        } else {
            bail!("one or more checks failed")
        }
    }) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
