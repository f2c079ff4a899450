use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uts_core::pipeline::{Pipeline, PipelineConfig, RunManifest, Stage};
use uts_core::toy::{Objective, PoolKind};
use uts_core::Error;

/// Caption-to-tag pipeline: ingest, parse, build the tag vocabulary, label,
/// and report; plus loss evaluation and toy training.
#[derive(Debug, Parser)]
#[command(name = "uts", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Directory holding every stage's inputs and outputs.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Print the run manifest as JSON instead of a one-line summary.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load the caption corpus and extract summary paragraphs.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Turn captions into tag lists with the configured LLM backend.
    Parse {
        /// Base URL of an OpenAI-compatible server, or `fixture`.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        fixture: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
    },
    /// Rank the tag pool and keep the top K.
    BuildUts {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Map tag lists to multi-hot labels and canonical tag sequences.
    Label {
        /// Use this vocabulary instead of the one in the work directory.
        #[arg(long)]
        vocabulary: Option<PathBuf>,
    },
    /// Write the rank-frequency table and dataset summary.
    Stats,
    /// Evaluate a JSON bundle of loss cases.
    Losses {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the toy model on planted synthetic data.
    TrainToy(TrainArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Mtc,
    Par,
    Contrastive,
    Mtl,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Generative weight for `--objective mtl`.
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Attention-pooling heads; mean pooling when omitted.
    #[arg(long)]
    heads: Option<usize>,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(w) = &cli.workdir {
        cfg.workdir = w.clone();
    }
    match &cli.command {
        Command::Ingest { corpus } => {
            if let Some(c) = corpus {
                cfg.corpus = Some(c.clone());
            }
        }
        Command::Parse { endpoint, fixture, model } => {
            if let Some(e) = endpoint {
                cfg.parser.endpoint_url = e.clone();
            }
            if let Some(f) = fixture {
                cfg.parser.fixture_path = Some(f.clone());
            }
            if let Some(m) = model {
                cfg.parser.model_name = m.clone();
            }
        }
        Command::BuildUts { k } => {
            if let Some(k) = k {
                cfg.k = *k;
            }
        }
        Command::Label { vocabulary } => {
            if let Some(v) = vocabulary {
                cfg.vocabulary = Some(v.clone());
            }
        }
        Command::Stats => {}
        Command::Losses { input } => {
            if let Some(i) = input {
                cfg.losses.input = Some(i.clone());
            }
        }
        Command::TrainToy(a) => {
            let t = &mut cfg.toy;
            if let Some(o) = a.objective {
                t.objective = match o {
                    ObjectiveArg::Mtc => Objective::Mtc,
                    ObjectiveArg::Par => Objective::Par,
                    ObjectiveArg::Contrastive => Objective::Contrastive,
                    ObjectiveArg::Mtl => Objective::Mtl { lambda: a.lambda },
                };
            }
            if let Some(s) = a.steps {
                t.steps = s;
            }
            if let Some(b) = a.batch {
                t.batch = b;
            }
            if let Some(lr) = a.learning_rate {
                t.learning_rate = lr;
            }
            if let Some(tau) = a.tau {
                t.tau = tau;
            }
            if let Some(h) = a.heads {
                t.pool = PoolKind::Attention { heads: h };
            }
        }
    }
    Ok(cfg)
}

fn stage_of(command: &Command) -> Stage {
    match command {
        Command::Ingest { .. } => Stage::Ingest,
        Command::Parse { .. } => Stage::Parse,
        Command::BuildUts { .. } => Stage::BuildUts,
        Command::Label { .. } => Stage::Label,
        Command::Stats => Stage::Stats,
        Command::Losses { .. } => Stage::Losses,
        Command::TrainToy(_) => Stage::TrainToy,
    }
}

fn summary(m: &RunManifest) -> String {
    let outputs: Vec<&str> = m.outputs.iter().map(|d| d.path.as_str()).collect();
    let mut line = format!("{}: wrote {} ({} ms)", m.stage, outputs.join(", "), m.wall_time_ms);
    for note in &m.notes {
        line.push_str("\n  ");
        line.push_str(note);
    }
    line
}

fn run(cli: &Cli) -> Result<RunManifest, Error> {
    let pipeline = Pipeline::new(build_config(cli)?)?;
    pipeline.run(stage_of(&cli.command))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(m) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&m).expect("manifest serializes"));
            } else {
                println!("{}", summary(&m));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
