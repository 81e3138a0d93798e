//! Command-line experiment driver. All randomness derives from configured
//! seeds; artifacts embed the hash of the config that produced them, so
//! identical invocations yield byte-identical outputs.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;
pub mod util;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use error::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "infusion",
    about = "Conditional 2-D diffusion lab: customization methods and overfitting metrics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Builtin preset: toy-four-peak, toy-grid25, paper-sd15.
    #[arg(long)]
    preset: Option<String>,
    /// Override the DDIM step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the classifier-free guidance scale.
    #[arg(long)]
    guidance: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => {
                let json = std::fs::read_to_string(path)?;
                ExperimentConfig::from_json(&json)?
            }
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => ExperimentConfig::preset("toy-grid25")?,
            (Some(_), Some(_)) => {
                return Err(CliError::Usage("pass either --config or --preset, not both".into()))
            }
        };
        if let Some(steps) = self.steps {
            cfg.sampler.steps = steps;
        }
        if let Some(s) = self.guidance {
            cfg.sampler.guidance_scale = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a world description as versioned JSON.
    GenWorld {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "world.json")]
        out: PathBuf,
    },
    /// Train the base denoiser; write its checkpoint and loss curve.
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train one customization method against a base checkpoint.
    Customize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// infusion, full-finetune, or token-inversion.
        #[arg(long)]
        method: String,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Draw samples from a base (optionally with a customization
    /// checkpoint applied) and write them as JSON.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        base: PathBuf,
        /// Residual, finetuned-weights, or token-embedding checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample under the empty condition.
        #[arg(long, default_value_t = false)]
        null_prompt: bool,
        #[arg(long, default_value = "samples.json")]
        out: PathBuf,
        /// Also render the samples to this SVG path.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Sample-space metrics between a sample file and a reference file.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full experiment: base training, every configured customization
    /// method, and the per-step overfitting curves (CSV/JSON/SVG).
    Curves {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reuse an existing base checkpoint instead of training.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Render sample files into a scatter SVG.
    Plot {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "plot.svg")]
        out: PathBuf,
    },
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenWorld { cfg, out } => commands::gen_world(&cfg.load()?, &out),
        Command::TrainBase { cfg, out } => {
            let config = cfg.load()?;
            std::fs::create_dir_all(&out)?;
            commands::run_train_base(&config, &out)?;
            Ok(())
        }
        Command::Customize { cfg, method, base, out } => {
            let config = cfg.load()?;
            std::fs::create_dir_all(&out)?;
            let method = infusion_core::customization::Method::parse(&method)?;
            let world = config.build_world()?;
            let weights = commands::load_base_weights(&base)?;
            commands::run_customize(&config, method, &weights, &world, &out)?;
            Ok(())
        }
        Command::Sample { cfg, base, ckpt, n, seed, null_prompt, out, svg } => {
            let config = cfg.load()?;
            commands::run_sample(
                &config,
                &base,
                ckpt.as_deref(),
                n,
                seed,
                null_prompt,
                &out,
                svg.as_deref(),
            )
        }
        Command::Eval { cfg, samples, reference, out } => {
            commands::run_eval(&cfg.load()?, &samples, &reference, out.as_deref())
        }
        Command::Curves { cfg, base, out } => {
            commands::run_curves(&cfg.load()?, base.as_deref(), &out)
        }
        Command::Plot { cfg, inputs, out } => commands::run_plot(&cfg.load()?, &inputs, &out),
    }
}

/// Parse and execute. Exit code 0 on success, 1 on usage/contract/config
/// errors, 2 on numeric or integrity failures.
pub fn run_cli(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
