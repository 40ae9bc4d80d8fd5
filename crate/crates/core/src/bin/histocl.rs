use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use histocl::data::{load_folder, synth_generate, write_folder, SynthParams};
use histocl::harness::{self, HarnessError, RunConfig};
use histocl::stain::{build_augmented_dataset, DomainSpec, StainMatrix};

#[derive(Parser)]
#[command(name = "histocl", version, about = "Continual-learning benchmark for H&E-like image streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as a PNG folder.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a class folder into the five stain domains.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid search over dotted config keys given as a JSON object of lists.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate CSV and SVG files from a stored result.json.
    Report {
        #[arg(long)]
        result: PathBuf,
        /// Defaults to the directory holding the result.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn read_input(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = read_input(path)?;
    RunConfig::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), Failure> {
    harness::configure_threads()?;
    match command {
        Command::Synth {
            classes,
            per_class,
            side,
            seed,
            out,
        } => {
            let params = SynthParams {
                classes,
                per_class,
                side,
                seed,
            };
            let ds = synth_generate(&params).map_err(|e| Failure::Usage(e.to_string()))?;
            let m = write_folder(&ds, &out).map_err(runtime)?;
            println!("wrote {} patches in {} classes to {}", m.files.len(), m.class_names.len(), out.display());
        }
        Command::Augment { input, out, seed } => {
            let ds = load_folder(&input, None).map_err(|e| Failure::Usage(e.to_string()))?;
            let aug = build_augmented_dataset(&ds, &DomainSpec::presets(), &StainMatrix::default(), seed)
                .map_err(runtime)?;
            let m = write_folder(&aug, &out).map_err(runtime)?;
            println!("wrote {} patches per domain {:?} to {}", m.files.len(), m.domain_counts, out.display());
        }
        Command::Run { config, out } => {
            let mut cfg = load_config(&config)?;
            if out.is_some() {
                cfg.output.dir = out;
            }
            let result = harness::run_experiment(&cfg)?;
            if let Some(dir) = &cfg.output.dir {
                harness::write_results(&result, dir)?;
                println!("results written to {}", dir.display());
            }
            let a = &result.aggregate;
            println!(
                "ACC {:.5} ± {:.5}  BWT {:.5} ± {:.5}  FWT {:.5} ± {:.5}  ({} seeds)",
                a.acc.mean, a.acc.std, a.bwt.mean, a.bwt.std, a.fwt.mean, a.fwt.std, a.n
            );
        }
        Command::Grid { config, grid, out } => {
            let cfg = load_config(&config)?;
            let text = read_input(&grid)?;
            let grid: BTreeMap<String, Vec<serde_json::Value>> =
                serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", grid.display())))?;
            let result = harness::grid_search(&cfg, &grid)?;
            print!("{}", result.table());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(runtime)?;
                let mut text = serde_json::to_string_pretty(&result).map_err(runtime)?;
                text.push('\n');
                let path = dir.join("grid.json");
                std::fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            }
        }
        Command::Report { result, out } => {
            if !result.is_file() {
                return Err(Failure::Usage(format!("cannot read {}", result.display())));
            }
            let r = harness::read_result(&result)?;
            let dir = out.unwrap_or_else(|| result.parent().map(Path::to_path_buf).unwrap_or_default());
            harness::render_report(&r, &dir)?;
            println!("report written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
