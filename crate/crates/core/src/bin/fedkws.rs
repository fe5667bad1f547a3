//! Command line front end: dataset generation, partition inspection,
//! config-driven experiment runs, and relative FRR evaluation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedkws::config::{execute_run, load_config, parse_partition_name};
use fedkws::data::{gen_synthetic, load_dataset, save_dataset, split_labeled, Dataset};
use fedkws::fedsim::build_partition;
use fedkws::metrics::{frr_at_far, read_scored_set};
use fedkws::Error;

#[derive(Parser)]
#[command(name = "fedkws", version, about = "Semi-supervised federated keyword-spotting simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic spectrogram dataset and save it as .skws
    GenData {
        /// Output path for the dataset file
        #[arg(long)]
        out: PathBuf,
        /// Examples per class
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        /// Number of keyword classes
        #[arg(long, default_value_t = 12)]
        n_classes: usize,
        /// Mel bins per frame
        #[arg(long, default_value_t = 16)]
        n_mels: usize,
        /// Frames per example
        #[arg(long, default_value_t = 32)]
        n_frames: usize,
        /// Additive noise level on the class templates
        #[arg(long, default_value_t = 0.5)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print shard statistics for a partition of a dataset
    Partition {
        /// Dataset file (.skws)
        #[arg(long)]
        dataset: PathBuf,
        /// Partition scheme: iid, label-skew, or dirichlet
        #[arg(long, default_value = "iid")]
        partition: String,
        /// Classes per client (label-skew) or concentration (dirichlet)
        #[arg(long, default_value_t = 0.0)]
        partition_param: f64,
        #[arg(long, default_value_t = 10)]
        m_clients: usize,
        /// Examples split off as the server's labeled pool first (0 = none)
        #[arg(long, default_value_t = 0)]
        n_labeled: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment described by a config file
    Run {
        /// Config file, one key = value per line
        config: PathBuf,
    },
    /// Relative false-reject rate of a test model against a baseline
    EvalFrr {
        /// Score file stem for the test model (reads <stem>.pos and <stem>.neg)
        test: PathBuf,
        /// Score file stem for the baseline model
        baseline: PathBuf,
        /// False-accept rate target in (0,1)
        #[arg(long, default_value_t = 0.05)]
        far: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData {
            out,
            n_per_class,
            n_classes,
            n_mels,
            n_frames,
            noise_sigma,
            seed,
        } => {
            let ds = gen_synthetic(n_per_class, n_classes, n_mels, n_frames, noise_sigma, seed)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {}: {} examples, {} classes, {}x{}",
                out.display(),
                ds.len(),
                ds.n_classes,
                ds.n_mels,
                ds.n_frames
            );
            Ok(())
        }
        Command::Partition {
            dataset,
            partition,
            partition_param,
            m_clients,
            n_labeled,
            seed,
        } => {
            let scheme = parse_partition_name(&partition)?;
            let ds = load_dataset(&dataset)?;
            let (server, pool) = if n_labeled > 0 {
                split_labeled(&ds, n_labeled, seed)?
            } else {
                (Dataset::new(Vec::new(), ds.n_classes, ds.n_mels, ds.n_frames)?, ds)
            };
            let plan = build_partition(&pool, scheme, partition_param, m_clients, seed)?;
            plan.validate(pool.len())?;
            print_partition_table(&partition, partition_param, server.len(), &pool, &plan);
            Ok(())
        }
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let final_accuracy = execute_run(&cfg, |log| {
                eprintln!(
                    "round {}: test_accuracy={:.4} label_ratio={:.4}",
                    log.round, log.test_accuracy, log.label_ratio
                );
            })?;
            println!("final_accuracy={final_accuracy:.6}");
            Ok(())
        }
        Command::EvalFrr { test, baseline, far } => {
            let test_set = read_scored_set(&test)?;
            let baseline_set = read_scored_set(&baseline)?;
            let rel = frr_at_far(&test_set, &baseline_set, far)?;
            println!("relative_frr={rel:.6}");
            Ok(())
        }
    }
}

fn print_partition_table(
    scheme: &str,
    param: f64,
    n_server: usize,
    pool: &Dataset,
    plan: &fedkws::data::PartitionPlan,
) {
    println!(
        "scheme={scheme} param={param} clients={} pool={} server_labeled={n_server}",
        plan.client_shards.len(),
        pool.len()
    );
    println!("{:>6} {:>6} {:>8}  per-class", "client", "size", "classes");
    let mut totals = vec![0usize; pool.n_classes];
    for (id, shard) in plan.client_shards.iter().enumerate() {
        let mut counts = vec![0usize; pool.n_classes];
        for &idx in shard {
            if let Some(c) = pool.example(idx).ground_truth() {
                counts[c] += 1;
            }
        }
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += c;
        }
        let support = counts.iter().filter(|&&c| c > 0).count();
        let histogram: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        println!("{id:>6} {:>6} {support:>8}  {}", shard.len(), histogram.join(" "));
    }
    let support = totals.iter().filter(|&&c| c > 0).count();
    let histogram: Vec<String> = totals.iter().map(|c| c.to_string()).collect();
    println!("{:>6} {:>6} {support:>8}  {}", "total", pool.len(), histogram.join(" "));
}
