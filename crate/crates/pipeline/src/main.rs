use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use factcheck::api::serve_annotation_api;
use factcheck::arm;
use factcheck::config::RunConfig;
use factcheck::report;
use factcheck::runner::{self, Runner};
use factcheck::store::{run_id, RunDir};
use factcheck_core::Granularity;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "factcheck", version, about = "Error-aware LM credit classification experiments")]
struct Cli {
    /// Run configuration (TOML). Required by `prepare`; later steps check it against the run snapshot.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact of one experiment.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides both the sampling seed and the fold seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    SinglePoint,
    EntireContent,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::SinglePoint => Granularity::SinglePoint,
            GranularityArg::EntireContent => Granularity::EntireContent,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load, preprocess and sample the dataset; fix the fold plan.
    Prepare,
    /// Round-0 generation for every case.
    Generate,
    /// Serve the annotation API until interrupted.
    ServeAnnotate {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Collect verifier scores for round-0 points.
    Score,
    /// Decision/hallucination association from annotations.
    Associate,
    /// Leakage audit, then AUPRC, balanced accuracy and Wilcoxon per scorer.
    DetectEval,
    /// One round of feedback and refinement per channel.
    Adapt {
        /// Channels: oracle, verifier, verifier:<id>, self_reflection, finetuned_slm. Defaults to the config.
        #[arg(long = "source")]
        sources: Vec<String>,
        #[arg(long, value_enum)]
        granularity: Option<GranularityArg>,
        /// Self-reflection at both granularities instead.
        #[arg(long, conflicts_with_all = ["sources", "granularity"])]
        compare_granularity: bool,
    },
    /// Multi-round self-feedback series.
    Rounds,
    /// Write report tables and the replay manifest.
    Report {
        /// Recompute from raw records and compare with the files on disk.
        #[arg(long)]
        check: bool,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.dataset.seed = s;
        cfg.experiment.fold_seed = s;
    }
    Ok(cfg)
}

/// Later steps run on the snapshot taken by `prepare`; a differing config is refused.
fn check_snapshot(cli: &Cli, dir: &RunDir) -> anyhow::Result<()> {
    let info = dir.info()?;
    let cfg = match &cli.config {
        Some(p) => load_config(p, cli.seed)?,
        None => match cli.seed {
            Some(s) => {
                let mut c = info.config.clone();
                c.dataset.seed = s;
                c.experiment.fold_seed = s;
                c
            }
            None => return Ok(()),
        },
    };
    let id = run_id(&cfg);
    if id != info.run_id {
        bail!(
            "configuration (run {id}) differs from the snapshot of run {} in {}; use a new --run-dir",
            info.run_id,
            dir.root().display()
        );
    }
    Ok(())
}

fn print<T: Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn open_runner(cli: &Cli) -> anyhow::Result<Runner> {
    let runner = Runner::open(&cli.run_dir).with_context(|| format!("opening run directory {}", cli.run_dir.display()))?;
    check_snapshot(cli, runner.dir())?;
    Ok(runner)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Prepare => {
            let Some(path) = &cli.config else { bail!("prepare needs --config") };
            let cfg = load_config(path, cli.seed)?;
            let s = runner::prepare(&cfg, &cli.run_dir)?;
            println!(
                "run {}: {} cases ({} good, {} bad), fold sizes {:?}",
                s.run_id, s.cases, s.good, s.bad, s.fold_sizes
            );
        }
        Command::Generate => print(&open_runner(&cli)?.run_initial()?)?,
        Command::ServeAnnotate { bind } => {
            let dir = RunDir::open(&cli.run_dir)?;
            check_snapshot(&cli, &dir)?;
            let handle = serve_annotation_api(dir, *bind)?;
            println!("annotation API on http://{}", handle.local_addr());
            handle.run_until_interrupted()?;
        }
        Command::Score => {
            for (id, n) in open_runner(&cli)?.collect_scores()? {
                println!("{id}: {n} new scores");
            }
        }
        Command::Associate => print(&open_runner(&cli)?.run_association()?)?,
        Command::DetectEval => {
            let (rows, _) = open_runner(&cli)?.run_detection_eval()?;
            print(&rows)?;
        }
        Command::Adapt { sources, granularity, compare_granularity } => {
            let runner = open_runner(&cli)?;
            let rows = if *compare_granularity {
                runner.run_granularity_compare()?
            } else {
                let cfg = runner.config();
                let channels = if sources.is_empty() {
                    arm::channels(cfg)
                } else {
                    arm::parse_channels(sources, cfg).map_err(anyhow::Error::msg)?
                };
                let g = granularity.map(Granularity::from).unwrap_or(cfg.experiment.granularity);
                runner.run_adaptive(&channels, g)?
            };
            print(&rows)?;
        }
        Command::Rounds => print(&open_runner(&cli)?.run_multi_round_experiment()?)?,
        Command::Report { check } => {
            let dir = RunDir::read_only(&cli.run_dir)?;
            check_snapshot(&cli, &dir)?;
            if *check {
                let problems = report::verify(&dir)?;
                if !problems.is_empty() {
                    for p in &problems {
                        eprintln!("{p}");
                    }
                    bail!("{} report discrepancies", problems.len());
                }
                println!("reports match raw records");
            } else {
                let r = report::emit(&dir)?;
                println!("run {}: reports written to {}", r.run_id, dir.path("reports").display());
            }
        }
    }
    Ok(())
}
