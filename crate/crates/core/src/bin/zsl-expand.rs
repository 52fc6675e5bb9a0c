use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zsl_expand::data::format_f64;
use zsl_expand::experiment::{
    generate_data, mean_std, run_ablation, run_expansion_sweep, run_grad_check, run_pipeline, ExperimentConfig,
};
use zsl_expand::Error;

#[derive(Parser)]
#[command(version, about = "Zero-shot recognition with expanded semantic prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark as CSV files
    GenData(Common),
    /// Train and evaluate the full pipeline
    Run(Common),
    /// Compare predefined, expanded and concatenated prototypes
    Ablate(Common),
    /// Vary the number of expanded dimensions
    Sweep(Common),
    /// Compare analytic and finite-difference gradients
    GradCheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed (overrides `seeds`)
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        Ok(config)
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData(c) => {
            for dir in generate_data(&c.load()?)? {
                println!("{}", dir.display());
            }
        }
        Command::Run(c) => {
            let runs = run_pipeline(&c.load()?)?;
            let hits: Vec<f64> = runs.iter().map(|r| r.report.hit1()).collect();
            let (m, s) = mean_std(&hits);
            println!("hit@1 {} ± {} over {} seed(s)", format_f64(m), format_f64(s), runs.len());
        }
        Command::Ablate(c) => {
            let runs = run_ablation(&c.load()?)?;
            for entry in &runs[0].entries {
                let hits: Vec<f64> = runs.iter().filter_map(|r| r.hit1(entry.segment)).collect();
                let (m, s) = mean_std(&hits);
                println!("{:<4} dim {:>3}  hit@1 {} ± {}", entry.segment.label(), entry.dim, format_f64(m), format_f64(s));
            }
        }
        Command::Sweep(c) => {
            let config = c.load()?;
            let table = run_expansion_sweep(&config, &config.sweep_k)?;
            for r in &table.rows {
                println!(
                    "k {:>3}  alignment {} ± {}  hit@1 {}",
                    r.k,
                    format_f64(r.mean_final_alignment),
                    format_f64(r.std_final_alignment),
                    format_f64(r.mean_hit_at_1)
                );
            }
        }
        Command::GradCheck(c) => {
            for e in run_grad_check(&c.load()?, 8, 2000)? {
                println!(
                    "{:<18} checked {:>5}  skipped {:>3}  max rel err {}",
                    e.target,
                    e.report.checked,
                    e.report.skipped,
                    format_f64(e.report.max_relative_error)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e.stage().unwrap_or("cli");
            eprintln!("error [{stage}]: {e}");
            ExitCode::FAILURE
        }
    }
}
