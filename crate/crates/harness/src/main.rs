use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use log::info;

use lfs_harness::config::{ExperimentConfig, DATA_ROOT_ENV, DEFAULT_DATA_ROOT};
use lfs_harness::pipeline::{self, Options, PairKind, Paths, Stage};
use lfs_harness::{report, sweep};

#[derive(Parser, Debug)]
#[command(name = "lfs", version, about = "Latent-space fluid surrogate experiments")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set lin.family=mlp`.
    #[arg(long = "set", value_name = "K=V", global = true)]
    set: Vec<String>,
    /// Worker threads for data generation and sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Byte-identical outputs on rerun: wall-clock values only in timing tables.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Run the models in double precision.
    #[arg(long = "f64", global = true)]
    f64: bool,
    /// Root for datasets and runs.
    #[arg(long, global = true, env = DATA_ROOT_ENV, default_value = DEFAULT_DATA_ROOT)]
    data_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the simulation dataset.
    GenData,
    /// Train one stage: lvm, lin or e2e.
    Train {
        #[arg(long, default_value = "lvm")]
        stage: Stage,
    },
    /// Roll out the test split and write the metrics tables.
    Evaluate {
        #[arg(long, default_value = "classic")]
        pair: PairKind,
    },
    /// Run every cell of the configured sweep.
    Sweep,
    /// Collect the tables of a run or sweep directory.
    Report {
        /// Directory to report on; defaults to the configured output.
        dir: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.set)?;
    let opts = Options {
        workers: cli
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
            .max(1),
        deterministic: cli.deterministic,
        f64: cli.f64,
    };
    let paths = Paths::for_config(&cli.data_root, &cfg);
    match cli.command {
        Command::GenData => {
            let hash = pipeline::gen_data(&cfg, &paths.data, opts.workers)?;
            println!("{}  {hash}", paths.data.display());
        }
        Command::Train { stage } => {
            let out = pipeline::train(&cfg, &paths, &opts, stage)?;
            for (name, hash) in &out.checkpoints {
                println!("{}  {hash}", paths.run_file(name).display());
            }
        }
        Command::Evaluate { pair } => {
            let ev = pipeline::evaluate(&cfg, &paths, &opts, pair)?;
            println!("Error_IA {:.6}", ev.report.error_ia);
            println!("Error_VF {:.6}", ev.report.error_vf);
            println!("speedup  {:.1}", ev.speedup);
        }
        Command::Sweep => {
            let dir = cfg.run_dir(&cli.data_root);
            let (rows, _) = sweep::run_sweep(&cfg, &dir, &opts)?;
            let failed = rows.iter().filter(|r| !r.ok).count();
            info!("{} rows, {failed} failed", rows.len());
            println!("{}", dir.join(sweep::SUMMARY).display());
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(|| cfg.run_dir(&cli.data_root));
            let r = report::build_report(&dir)?;
            print!("{}", r.summary);
        }
    }
    Ok(())
}
