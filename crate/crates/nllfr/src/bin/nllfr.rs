use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nllfr::cli::{self, PipelineConfig};

#[derive(Parser)]
#[command(name = "nllfr", about = "NL-LFR restoring-force identification pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// Pipeline configuration file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in setup: `duffing` or `chain2dof`.
    #[arg(long)]
    preset: Option<String>,
    /// Output SNR in dB for preset data generation (omit for noise-free).
    #[arg(long)]
    snr: Option<f64>,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for multisine phases (overrides the config file).
    #[arg(long)]
    seed_phases: Option<u64>,
    /// Seed for measurement noise (overrides the config file).
    #[arg(long)]
    seed_noise: Option<u64>,
}

impl ConfigSource {
    fn resolve(&self) -> Result<PipelineConfig, nllfr::Error> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => PipelineConfig::load(path)?,
            (None, Some(name)) => PipelineConfig::preset(name, self.snr, "out")?,
            (None, None) => {
                return Err(nllfr::Error::Config(
                    "pass either --config <file> or --preset <name>".into(),
                ))
            }
        };
        if let Some(out) = &self.out {
            config.output.dir = out.clone();
        }
        if let Some(s) = self.seed_phases {
            config.seeds.phases = s;
        }
        if let Some(s) = self.seed_noise {
            config.seeds.noise = s;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multisine dataset.
    Generate(ConfigSource),
    /// Run the three-step identification pipeline.
    Identify {
        #[command(flatten)]
        source: ConfigSource,
        /// Existing dataset directory (overrides the config data block).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Stop after `step1` or `step2`.
        #[arg(long)]
        stop_after: Option<String>,
    },
    /// Evaluate a stored model on a dataset.
    Validate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Warm-up samples discarded before comparing.
        #[arg(long, default_value_t = 100)]
        n0: usize,
    },
    /// Upsampling of a dataset by an integer factor (cubic-spline outputs).
    Resample {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(long)]
        out: PathBuf,
        /// `zoh` repeats input samples (exact for held inputs); `spline`
        /// interpolates them like the outputs.
        #[arg(long, default_value = "zoh")]
        inputs: String,
    },
    /// Run the (H, lambda) grid search (Steps I and II only).
    Grid {
        #[command(flatten)]
        source: ConfigSource,
        /// Existing dataset directory (overrides the config data block).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn run() -> Result<(), nllfr::Error> {
    match Cli::parse().command {
        Command::Generate(source) => {
            let config = source.resolve()?;
            let dir = cli::cmd_generate(&config)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Identify {
            source,
            dataset,
            stop_after,
        } => {
            let mut config = source.resolve()?;
            if let Some(ds) = dataset {
                config.data.dataset = Some(ds);
            }
            if stop_after.is_some() {
                config.stop_after = stop_after;
            }
            let report = cli::cmd_identify(&config)?;
            println!(
                "report written to {}",
                config.output.dir.join("report.json").display()
            );
            let fmt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.3}%"));
            println!(
                "NRMSE  bla: {}  initial: {}  final: {}",
                fmt(report.nrmse.bla),
                fmt(report.nrmse.initial),
                fmt(report.nrmse.r#final)
            );
        }
        Command::Validate {
            model,
            dataset,
            out,
            n0,
        } => {
            let metrics = cli::cmd_validate(&model, &dataset, &out, n0)?;
            println!(
                "NRMSE {:.4}% over {} realizations",
                metrics.nrmse,
                metrics.nrmse_per_r.len()
            );
        }
        Command::Resample {
            dataset,
            factor,
            out,
            inputs,
        } => {
            let mode = match inputs.as_str() {
                "zoh" => cli::ResampleInputs::ZohRepeat,
                "spline" => cli::ResampleInputs::Spline,
                other => {
                    return Err(nllfr::Error::Config(format!(
                        "unknown input resampling mode `{other}` (use zoh or spline)"
                    )))
                }
            };
            cli::cmd_resample(&dataset, factor, &out, mode)?;
            println!("resampled dataset written to {}", out.display());
        }
        Command::Grid { source, dataset } => {
            let mut config = source.resolve()?;
            if let Some(ds) = dataset {
                config.data.dataset = Some(ds);
            }
            if config.step2.grid.is_none() {
                config.step2.grid = Some(cli::GridConfig {
                    h_values: vec![1, 2, 3, 5, 10, 15, 25, 50],
                    lambda_values: vec![1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0],
                });
            }
            let points = cli::cmd_grid(&config)?;
            let best = points
                .iter()
                .filter(|p| p.polyfit_nrmse.is_finite())
                .min_by(|a, b| a.polyfit_nrmse.partial_cmp(&b.polyfit_nrmse).unwrap());
            if let Some(best) = best {
                println!(
                    "best polynomial fit: H = {}, lambda = {:.1e} ({:.3}% fit NRMSE)",
                    best.h, best.lambda, best.polyfit_nrmse
                );
            }
            println!(
                "grid written to {}",
                config.output.dir.join("grid_nrmse.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
