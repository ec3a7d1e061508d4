use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lobelens::rnn::Preset;
use lobelens_cli::{CliError, Overrides, PipelineConfig, Run};

#[derive(Parser)]
#[command(name = "lobelens", version, about = "Explanatory models for recurrent fault detectors")]
struct Cli {
    /// JSON pipeline config; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fault impact in dB.
    #[arg(long, global = true)]
    impact: Option<f64>,
    /// Hidden layers: 1, 2 or 3.
    #[arg(long, global = true)]
    layers: Option<usize>,
    /// Feedback order: 1, 2 or 4.
    #[arg(long, global = true)]
    order: Option<usize>,
    /// PWL segment count.
    #[arg(long, global = true)]
    segments: Option<usize>,
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset splits and the evaluation stream.
    Gen,
    /// Train the RNN.
    Train,
    /// PWL table, LSS tables and expansion coefficients.
    Linearize,
    /// Main and detailed model runs.
    Model,
    /// RNN vs models: ROC, histograms, lobe table, error decomposition, tolerance checks.
    Compare,
    /// Sweep network configurations over the configured seeds.
    Study {
        #[arg(long, value_enum)]
        preset: Option<StudyPreset>,
    },
    /// Collate headline numbers and the artifact index.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyPreset {
    /// The five configurations: 1 layer order 1, 2, 4; 2 and 3 layers order 1.
    Paper,
    /// 1, 2 and 3 first-order layers.
    Depth,
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Overrides { seed: cli.seed, impact: cli.impact, layers: cli.layers, order: cli.order, segments: cli.segments }
        .apply(&mut cfg);
    let step = match cli.command {
        Command::Gen => "gen",
        Command::Train => "train",
        Command::Linearize => "linearize",
        Command::Model => "model",
        Command::Compare => "compare",
        Command::Study { preset } => {
            match preset {
                Some(StudyPreset::Paper) => {
                    cfg.study_configs = Preset::PAPER.iter().map(|p| p.layers_and_order()).collect()
                }
                Some(StudyPreset::Depth) => cfg.study_configs = vec![(1, 1), (2, 1), (3, 1)],
                None => {}
            }
            "study"
        }
        Command::Report => "report",
    };
    let mut run = Run::open(&cli.out, cfg)?;
    let result = run.run_step(step)?;
    Ok(serde_json::json!({
        "run_dir": run.dir.display().to_string(),
        "config_hash": run.manifest.config_hash,
        "step": step,
        "result": result,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
