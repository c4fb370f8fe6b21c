use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use doris_core::config::{ExplainScope, PipelineConfig};
use doris_core::pipeline::{self, Providers, RunOptions, Stage};
use doris_core::synth::{self, SynthConfig};
use doris_core::Error;

#[derive(Parser)]
#[command(name = "doris", version, about = "Depression screening pipeline over post histories")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the split, the trees and (for `synth`) the cohort.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort.
    Synth(SynthArgs),
    /// Load and validate the dataset, then apply the history window.
    Ingest,
    /// Score posts against the templates and select posts for annotation and mood.
    Filter,
    /// Annotate the selected posts.
    Annotate,
    /// Summarize each user's mood course.
    Mood,
    /// Build per-user feature vectors.
    Featurize,
    /// Split, train and calibrate.
    Train,
    /// Evaluate on the test split, or score a saved model.
    Eval(EvalArgs),
    /// Write explanations.
    Explain(ExplainArgs),
    /// Run every stage.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    prevalence: f64,
    #[arg(long, default_value_t = 69)]
    posts_per_user: usize,
    #[arg(long, default_value_t = 0.3)]
    injection_rate: f64,
    #[arg(long, default_value_t = 0.02)]
    background_rate: f64,
    #[arg(long, default_value_t = 0.3)]
    emotion_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    mood_coupling: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Score this model file instead of running the pipeline.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split part scored with `--model`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also train and score every feature-set ablation.
    #[arg(long)]
    ablation: bool,
}

#[derive(Args)]
struct ExplainArgs {
    /// Explain only this user, from a finished run.
    #[arg(long)]
    user: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Reuse artifacts of completed stages.
    #[arg(long)]
    resume: bool,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_until(cfg: &PipelineConfig, until: Stage, resume: bool) -> Result<pipeline::PipelineOutcome, Error> {
    let outcome = pipeline::run_pipeline(cfg, RunOptions { resume, until })?;
    info!(
        "executed [{}], reused [{}], {} chat calls",
        outcome.executed.iter().map(|s| s.name()).collect::<Vec<_>>().join(", "),
        outcome.reused.iter().map(|s| s.name()).collect::<Vec<_>>().join(", "),
        outcome.chat_calls
    );
    Ok(outcome)
}

fn print_report(outcome: &pipeline::PipelineOutcome) {
    if let Some(report) = &outcome.report {
        print!("{}", report.to_table());
    }
}

fn execute(cli: &Cli) -> Result<(), Error> {
    if let Command::Synth(a) = &cli.command {
        let sc = SynthConfig {
            n_users: a.n,
            prevalence: a.prevalence,
            posts_per_user: a.posts_per_user,
            symptom_injection_rate: a.injection_rate,
            background_symptom_rate: a.background_rate,
            emotion_rate: a.emotion_rate,
            mood_coupling: a.mood_coupling,
            seed: cli.seed.unwrap_or(SynthConfig::default().seed),
        };
        let stats = synth::generate_to_file(&sc, &a.out)?;
        println!(
            "{}: {} users ({} positive), {} posts, {} injected",
            a.out.display(),
            stats.n_users,
            stats.n_positive,
            stats.n_posts,
            stats.injected_posts
        );
        return Ok(());
    }

    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth(_) => unreachable!("handled above"),
        Command::Ingest => drop(run_until(&cfg, Stage::Truncate, true)?),
        Command::Filter => drop(run_until(&cfg, Stage::Filter, true)?),
        Command::Annotate => drop(run_until(&cfg, Stage::Annotate, true)?),
        Command::Mood => drop(run_until(&cfg, Stage::Mood, true)?),
        Command::Featurize => drop(run_until(&cfg, Stage::Featurize, true)?),
        Command::Train => drop(run_until(&cfg, Stage::Calibrate, true)?),
        Command::Eval(a) => {
            if let Some(model) = &a.model {
                let m = pipeline::evaluate_saved(&cfg, model, &a.split)?;
                println!(
                    "{} split: precision {:.4} recall {:.4} f1 {:.4} auroc {:.4} auprc {:.4}",
                    a.split, m.precision, m.recall, m.f1, m.auroc, m.auprc
                );
            } else {
                let outcome = run_until(&cfg, Stage::Eval, true)?;
                print_report(&outcome);
            }
            if a.ablation {
                let features = doris_core::artifacts::read_jsonl(&cfg.out_dir.join("features.jsonl"))?;
                println!("{:<18} {:>9} {:>9} {:>9}", "feature set", "f1", "auroc", "auprc");
                for row in pipeline::ablation(&features, &cfg)? {
                    println!(
                        "{:<18} {:>9.4} {:>9.4} {:>9.4}",
                        row.feature_set.name(),
                        row.mean.f1,
                        row.mean.auroc,
                        row.mean.auprc
                    );
                }
            }
        }
        Command::Explain(a) => match &a.user {
            Some(user) => {
                let providers = Providers::from_config(&cfg)?;
                let report = pipeline::explain_saved(&cfg, user, &providers)?;
                println!("{}: {:?} (p = {:.4})", report.user_id, report.verdict, report.probability);
                println!("{}", report.explanation);
            }
            None => {
                if cfg.explain == ExplainScope::None {
                    cfg.explain = ExplainScope::Test;
                }
                run_until(&cfg, Stage::Explain, true)?;
                println!("explanations written to {}", cfg.out_dir.join("explanations").display());
            }
        },
        Command::Run(a) => {
            let outcome = run_until(&cfg, Stage::Explain, a.resume)?;
            print_report(&outcome);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_provider() {
        3
    } else if e.is_validation() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
