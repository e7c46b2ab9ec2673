use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajpred::error::Error;
use trajpred::io::write_trajectories;
use trajpred::pipeline::{self, PipelineConfig, Predictor, RolloutMode, RunData, Setting};
use trajpred::preprocess::WEATHER_FEATURE_NAMES;

#[derive(Parser)]
#[command(name = "trajpred", version, about = "Flight trajectory prediction by imitation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set gail.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (same as `--set run_dir=...`).
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic scenario into the run directory.
    Synth(Common),
    /// Resample, clean and enrich flights; write the train/test split.
    Preprocess(Common),
    /// Cluster the training flights.
    Cluster(Common),
    /// Train the mode classifier.
    TrainClassifier(Common),
    /// Behavioral-cloning initialization of every policy.
    TrainBc(Common),
    /// GAIL training starting from the behavioral-cloning policies.
    TrainGail(Common),
    /// Evaluate the trained settings on the test flights.
    Evaluate(Common),
    /// Predict the rest of one test flight.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        setting: Setting,
        /// Test flight id.
        #[arg(long)]
        flight: String,
        /// Fraction of the flight already observed.
        #[arg(long, default_value_t = 0.0)]
        m: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Roll out the policy mean instead of sampling.
        #[arg(long)]
        mean: bool,
        /// Use the behavioral-cloning policy instead of the GAIL one.
        #[arg(long)]
        bc: bool,
        /// Output CSV.
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Run every stage.
    Pipeline(Common),
}

fn load(c: &Common) -> trajpred::error::Result<PipelineConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(d) = &c.run_dir {
        overrides.push(format!("run_dir={}", d.display()));
    }
    PipelineConfig::load(c.config.as_deref(), &overrides)
}

fn run(cmd: Command) -> trajpred::error::Result<()> {
    match cmd {
        Command::Synth(c) => {
            let cfg = load(&c)?;
            pipeline::write_resolved_config(&cfg)?;
            pipeline::stage_synth(&cfg)
        }
        Command::Preprocess(c) => pipeline::stage_preprocess(&load(&c)?),
        Command::Cluster(c) => pipeline::stage_cluster(&load(&c)?).map(drop),
        Command::TrainClassifier(c) => pipeline::stage_classifier(&load(&c)?).map(drop),
        Command::TrainBc(c) => pipeline::stage_bc(&load(&c)?),
        Command::TrainGail(c) => pipeline::stage_gail(&load(&c)?),
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            let n = pipeline::stage_evaluate(&cfg)?.len();
            println!("{n} rollouts scored, summary in {}", cfg.summary_path().display());
            Ok(())
        }
        Command::Predict {
            common,
            setting,
            flight,
            m,
            seed,
            mean,
            bc,
            output,
        } => {
            let cfg = load(&common)?;
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("--m must lie in [0, 1), got {m}")));
            }
            let data = RunData::load(&cfg)?;
            let test = pipeline::read_test(&cfg, &data)?;
            let t = test
                .iter()
                .find(|t| t.id == flight)
                .ok_or_else(|| Error::Config(format!("no test flight `{flight}`")))?;
            let predictor = Predictor::load(&cfg, setting, bc)?;
            let mode = if mean { RolloutMode::Mean } else { RolloutMode::Stochastic };
            let p = predictor.predict(&data, &data.env(&cfg), t, m, mode, seed)?;
            let names: Vec<String> = WEATHER_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
            write_trajectories(&output, &[p.trajectory.clone()], &names)?;
            println!(
                "{} states from state {}, policy {}, {}",
                p.trajectory.len(),
                p.start_index,
                p.policy,
                p.termination.code()
            );
            Ok(())
        }
        Command::Pipeline(c) => {
            let cfg = load(&c)?;
            pipeline::run_pipeline(&cfg)?;
            println!("summary in {}", cfg.summary_path().display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
