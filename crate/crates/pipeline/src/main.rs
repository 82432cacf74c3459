use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use stratpred::config::{ConfigFile, PipelineConfig};
use stratpred::stages::Stage;

#[derive(Parser)]
#[command(name = "stratpred", version, about = "Predict problem-solving strategies from tutoring logs")]
struct Cli {
    /// TOML configuration file. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the full-size model defaults instead of the desk-scale ones.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Training budget as a fraction of the training split.
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// Sampling method: as, gs, rs or ns.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Embedding ablation: ns, ss or ssms.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic world into corpus.tsv.
    GenData,
    /// Parse a transaction log into corpus.tsv.
    Ingest,
    /// Train the mastery model and write per-step mastery.
    TrainMastery,
    /// Compute student, problem and KC embeddings.
    Embed,
    /// Cluster students and problems.
    Cluster,
    /// Sample a training set and train the strategy decoder.
    TrainPredictor,
    /// Decode strategies for the test split.
    Predict,
    /// Score the predictions.
    Evaluate,
    /// Accuracy by performance and strategy-variance group.
    Fairness,
    /// Run the configured sweep of methods, ablations and budgets.
    Ablate,
    /// Run every stage from data to fairness.
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Ingest => "ingest",
            Command::TrainMastery => "train-mastery",
            Command::Embed => "embed",
            Command::Cluster => "cluster",
            Command::TrainPredictor => "train-predictor",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Fairness => "fairness",
            Command::Ablate => "ablate",
            Command::Pipeline => "pipeline",
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    if let Some(seed) = cli.seed {
        file.seed = seed;
    }
    if let Some(b) = cli.budget {
        file.experiment.budget = b;
    }
    if let Some(m) = &cli.method {
        file.experiment.method = m.clone();
    }
    if let Some(a) = &cli.ablation {
        file.experiment.ablation = a.clone();
    }
    if let Some(out) = &cli.out {
        file.paths.out_dir = out.clone();
    }
    Ok(file.resolve(cli.paper_scale)?)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    let stage = Stage::new(&cfg, cli.command.name());
    let ctx = || format!("{} failed", cli.command.name());
    match cli.command {
        Command::GenData => println!("{}", stage.gen_data().with_context(ctx)?.display()),
        Command::Ingest => println!("{}", stage.ingest().with_context(ctx)?.display()),
        Command::TrainMastery => println!("{}", stage.train_mastery().with_context(ctx)?.display()),
        Command::Embed => println!("{}", stage.embed().with_context(ctx)?.display()),
        Command::Cluster => println!("{}", stage.cluster().with_context(ctx)?.display()),
        Command::TrainPredictor => println!("{}", stage.train_predictor().with_context(ctx)?.display()),
        Command::Predict => println!("{}", stage.predict().with_context(ctx)?.display()),
        Command::Evaluate => {
            let d = stage.evaluate().with_context(ctx)?;
            println!("step accuracy {:.4} exact match {:.4} over {} test traces", d.step_accuracy, d.exact_match, d.test_traces);
        }
        Command::Fairness => {
            let d = stage.fairness().with_context(ctx)?;
            println!("performance disparity {:.4} variance disparity {:.4}", d.performance_disparity, d.variance_disparity);
        }
        Command::Ablate => {
            let d = stage.ablate().with_context(ctx)?;
            for r in &d.rows {
                println!("{}/{} budget {} accuracy {:.4} ({:.1}s)", r.method, r.ablation, r.budget, r.accuracy, r.seconds_total);
            }
        }
        Command::Pipeline => {
            let (e, f) = stage.pipeline().with_context(ctx)?;
            println!("step accuracy {:.4} performance disparity {:.4}", e.step_accuracy, f.performance_disparity);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
