use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use phideepc::experiment::{
    check_predictor, generate_data, identify, load_report, metrics_table, run_experiment, verify_identified,
    write_identification, ExperimentConfig,
};
use phideepc::regress::ExportedPredictor;
use phideepc::signal::TrajectoryDataset;
use phideepc::Error;

/// Basis-function DeePC and SPC experiments on simulated plants.
#[derive(Parser)]
#[command(name = "phideepc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the identification experiment and write `data.csv`.
    GenerateData(Common),
    /// Identify the predictor and write the data, basis and predictor files.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Fit from an existing `data.csv` instead of simulating.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the controller suite and write trajectories, metrics and plot files.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated controller labels or formulation names.
        #[arg(long, value_delimiter = ',')]
        controllers: Vec<String>,
    },
    /// Check the consistency and equivalence properties on the configured instance.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Compare a stored `predictor.json` with a fresh identification.
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Print the metrics table of a finished run.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces every seed in the configuration with values derived from this one.
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Validation(Error),
    Runtime(Error),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. }
            | Error::MalformedFile { .. }
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_)
            | Error::InvalidParameter { .. }
            | Error::Dimension { .. }
            | Error::InsufficientData { .. } => Failure::Validation(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        log::info!("loaded {}", self.config.display());
        if let Some(seed) = self.seed {
            cfg.override_seed(seed);
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
        self.out.clone().or_else(|| cfg.output_dir.clone()).ok_or_else(|| Error::Config {
            path: "output_dir".into(),
            reason: "no output directory; pass --out or set output_dir".into(),
        })
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenerateData(common) => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg)?;
            let data = generate_data(&cfg)?;
            create_dir(&out)?;
            data.write_csv(out.join("data.csv"))?;
            println!("wrote {} samples to {}", data.len(), out.join("data.csv").display());
        }
        Command::Fit { common, data } => {
            let cfg = common.load()?;
            let out = common.out_dir(&cfg)?;
            let data = match data {
                Some(path) => TrajectoryDataset::read_csv(path)?,
                None => generate_data(&cfg)?,
            };
            let ident = identify(&cfg, data)?;
            write_identification(&ident, &out)?;
            let phi = ident.predictor.phi();
            println!(
                "Φ is {}x{}; consistency diagnostic {:.3e}; artifacts in {}",
                phi.nrows(),
                phi.ncols(),
                ident.predictor.consistency_diagnostic(),
                out.display()
            );
        }
        Command::Run { common, controllers } => {
            let mut cfg = common.load()?;
            if !controllers.is_empty() {
                cfg.select_controllers(&controllers)?;
            }
            let out = common.out_dir(&cfg)?;
            let report = run_experiment(&cfg, &out)?;
            print!("{}", metrics_table(&report.results));
            println!("artifacts in {}", out.display());
        }
        Command::Verify { common, predictor } => {
            let cfg = common.load()?;
            let stored = predictor.map(ExportedPredictor::load).transpose()?;
            let ident = identify(&cfg, generate_data(&cfg)?)?;
            let mut report = verify_identified(&cfg, &ident)?;
            if let Some(stored) = &stored {
                report.checks.push(check_predictor(&ident, stored));
            }
            print!("{}", report.to_text());
            if let Some(out) = common.out.as_ref().or(cfg.output_dir.as_ref()) {
                create_dir(out)?;
                let path = out.join("verification.json");
                let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
                std::fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
            }
            if !report.all_passed() {
                return Err(Failure::Verification);
            }
        }
        Command::Report { out } => {
            let report = load_report(&out)?;
            println!(
                "Φ {}x{}, consistency diagnostic {:.3e}",
                report.phi_rows, report.phi_columns, report.consistency_diagnostic
            );
            print!("{}", metrics_table(&report.results));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Verification) => {
            eprintln!("verification failed");
            ExitCode::from(3)
        }
    }
}
