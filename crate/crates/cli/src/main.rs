//! `incrdet` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
//! 4 numerical failure during training.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use incrdet::dataset::{generate_dataset, load_dataset, DomainKind, SceneSpec, Split};
use incrdet::detector::Detector;
use incrdet::eval::evaluate_detector;
use incrdet::experiment::{exit_code, run_adapt, run_train, ExperimentConfig, RunManifest, MANIFEST_FILE, REPORT_FILE};
use incrdet::{Error, Result};

#[derive(Parser)]
#[command(name = "incrdet", version, about = "Incremental two-stage object detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset for one domain.
    GenData {
        #[arg(long)]
        domain: DomainKind,
        #[arg(long, default_value_t = 2500)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source-domain baseline.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add a target-domain head and run the adaptation schedule.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from_checkpoint: PathBuf,
        /// Built-in plan (table3_row1 .. table3_row4, full_unfreeze); overrides the config.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one domain head of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0.05)]
        score_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        nms_threshold: f64,
        /// Where to write the JSON table; defaults to eval_<domain>.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print and store the forgetting report of an adaptation run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            domain,
            count,
            seed,
            image_size,
            out,
        } => {
            let spec = SceneSpec {
                image_size,
                ..SceneSpec::for_domain(domain)
            };
            let data = generate_dataset(&spec, count, seed)?;
            incrdet::dataset::write_dataset(&data, &out)?;
            let instances = data.instances_per_category();
            println!(
                "domain {domain}: {} images ({} train / {} val), {} instances",
                data.len(),
                data.splits.train.len(),
                data.splits.val.len(),
                instances.values().sum::<usize>()
            );
            for c in &data.categories {
                println!("  {:>2} {:<9} {}", c.id, c.name, instances[&c.id]);
            }
        }
        Command::Train { config, out } => {
            let (cfg, bytes) = ExperimentConfig::load(&config)?;
            let (manifest, log) = run_train(&cfg, &bytes, &config_dir(&config), &out)?;
            if let (Some(first), Some(_)) = (log.losses.first(), log.losses.last()) {
                let n = log.losses.len();
                info!(
                    "l_det first {:.4}, mean of last {} iterations {:.4}",
                    first.l_det,
                    n.min(20),
                    log.mean_l_det(n.saturating_sub(20)..n)
                );
            }
            for (domain, table) in &manifest.stages[0].eval {
                println!("baseline on {domain} val\n{table}");
            }
        }
        Command::Adapt {
            config,
            from_checkpoint,
            preset,
            out,
        } => {
            let (cfg, bytes) = ExperimentConfig::load(&config)?;
            let (manifest, _) = run_adapt(&cfg, &bytes, &config_dir(&config), &from_checkpoint, preset.as_deref(), &out)?;
            print!("{}", manifest.report());
        }
        Command::Eval {
            checkpoint,
            dataset,
            domain,
            split,
            score_threshold,
            nms_threshold,
            out,
        } => {
            let model = Detector::load(&checkpoint)?;
            model.domain(&domain)?;
            let data = load_dataset(&dataset)?;
            let table = evaluate_detector(&model, &data, split, &domain, score_threshold, nms_threshold)?;
            print!("{table}");
            let path = out.unwrap_or_else(|| config_dir(&checkpoint).join(format!("eval_{domain}.json")));
            let mut json = serde_json::to_vec_pretty(&table).expect("table serializes");
            json.push(b'\n');
            fs::write(&path, json).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        }
        Command::Report { run } => {
            let manifest = RunManifest::load(&run.join(MANIFEST_FILE))?;
            if !manifest.verify_config() {
                return Err(Error::InvalidConfig(format!(
                    "{}: stored config does not match its hash",
                    run.join(MANIFEST_FILE).display()
                )));
            }
            let text = manifest.report().to_string();
            print!("{text}");
            let path = run.join(REPORT_FILE);
            fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("INCRDET_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
