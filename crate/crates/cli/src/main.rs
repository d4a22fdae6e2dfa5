use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segdiff_cli::commands::{self, EvalArgs, Predictor};
use segdiff_cli::config::RunConfig;
use segdiff_cli::{exit_code, render};
use segdiff_core::netseg::Ablation;
use segdiff_core::synthdata::io::read_labels;
use segdiff_core::synthdata::{ScenarioConfig, Split, SplitMode};
use segdiff_core::{Error, Result};

#[derive(Parser)]
#[command(name = "segdiff", version, about = "Referring action segmentation with dual-branch diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthCmd),
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Workers for the final validation pass.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score predictions on one split.
    Eval(EvalCmd),
    /// Train and score several ablation variants with the same seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = Ablation::VARIANTS.map(String::from))]
        variants: Vec<String>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Draw a prediction against its ground truth as SVG.
    Render {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Config file helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print or write a config with every default filled in.
    Init {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value = "random")]
    split: SplitMode,
    #[arg(long)]
    families: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    persons: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    p_stay: Option<f64>,
    #[arg(long)]
    cooccurrence: Option<f64>,
    /// Holistic weight per person, comma separated.
    #[arg(long, value_delimiter = ',')]
    mixing: Option<Vec<f64>>,
}

impl SynthCmd {
    fn scenario(&self) -> ScenarioConfig {
        let d = ScenarioConfig::default();
        ScenarioConfig {
            persons: self.persons.unwrap_or(d.persons),
            classes: self.classes.unwrap_or(d.classes),
            frames: self.frames.unwrap_or(d.frames),
            p_stay: self.p_stay.unwrap_or(d.p_stay),
            cooccurrence: self.cooccurrence.unwrap_or(d.cooccurrence),
            feature_dim: self.feature_dim.unwrap_or(d.feature_dim),
            snr: self.snr.unwrap_or(d.snr),
            mixing: self.mixing.clone().unwrap_or(d.mixing),
            families: self.families.unwrap_or(d.families),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>.sdl` predictions to score instead of a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Overrides the seed stored in the checkpoint.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each prediction as `<dir>/<id>.sdl`.
    #[arg(long)]
    pred_out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(cmd) => {
            let m = commands::synth(&cmd.out, &cmd.scenario(), cmd.samples, cmd.split)?;
            eprintln!("wrote {} samples to {}", m.samples.len(), cmd.out.display());
        }
        Command::Train { config, resume, workers } => {
            let cfg = RunConfig::load(&config)?;
            let total = cfg.train.epochs;
            let outcome = commands::train(&cfg, resume.as_deref(), commands::worker_count(workers), |e, loss| {
                eprintln!("epoch {e}/{total} loss {loss:.6}");
            })?;
            eprintln!("checkpoint {}", outcome.checkpoint.display());
            if let Some(val) = outcome.val {
                println!("{}", serde_json::to_string_pretty(&val).expect("report serializes"));
            }
        }
        Command::Eval(cmd) => {
            let predictor = match (cmd.checkpoint, cmd.predictions) {
                (Some(path), _) => Predictor::Checkpoint { path, seed: cmd.seed },
                (None, Some(dir)) => Predictor::Files(dir),
                (None, None) => return Err(Error::Config("eval needs --checkpoint or --predictions".into())),
            };
            let report = commands::eval(&EvalArgs {
                predictor,
                manifest: cmd.manifest,
                split: cmd.split,
                workers: commands::worker_count(cmd.workers),
                pred_out: cmd.pred_out,
            })?;
            match cmd.out {
                Some(path) => commands::write_report(&path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
            }
        }
        Command::Ablate {
            config,
            variants,
            split,
            workers,
        } => {
            let cfg = RunConfig::load(&config)?;
            let rows = commands::ablate(&cfg, &variants, split, commands::worker_count(workers), |v| {
                eprintln!("variant {v}");
            })?;
            print!("{}", commands::ablation_table(&rows));
        }
        Command::Render { pred, gt, out } => {
            let svg = render::render_svg(&read_labels(&pred)?, &read_labels(&gt)?)?;
            fs::write(&out, svg).map_err(|e| Error::io(&out, e))?;
        }
        Command::Config {
            action: ConfigAction::Init { out },
        } => {
            let cfg = RunConfig::default();
            match out {
                Some(path) => cfg.save(&path)?,
                None => print!("{}", cfg.to_json()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
