use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use progembed::experiment::{
    cmd_compose, cmd_eval_post, cmd_extract, cmd_feedback, cmd_gen, cmd_report, cmd_train, ExperimentConfig,
    ExperimentError, FeedbackMethod, PostModel,
};
use progembed::feedback::SelectionStrategy;

/// Program embeddings from Hoare triples, and feedback propagation.
#[derive(Debug, Parser)]
#[command(name = "progembed", version)]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (corpus, splits and models).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus with labels and the rubric.
    Gen,
    /// Extract Hoare triples and print the dataset summary.
    Extract,
    /// Train a postcondition model on the training split.
    Train {
        #[arg(long, value_enum)]
        model: TrainModel,
    },
    /// Score saved models and the Common baseline on held-out triples.
    EvalPost,
    /// Evaluate composability on two- and three-part compositions.
    Compose,
    /// Propagate exemplar annotations to the whole corpus.
    Feedback {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, value_enum)]
        strategy: Option<Strategy>,
    },
    /// Collect the reports in the output directory.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainModel {
    Npm,
    Npm0,
    Rnn,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Method {
    NpmRnn,
    Rnn,
    Bag,
    Knn,
    Unittest,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Strategy {
    Kmeans,
    Random,
    MostCommon,
}

fn config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let mut cfg = config(&cli)?;
    match cli.command {
        Command::Gen => {
            cmd_gen(&cfg)?;
            println!("wrote {} programs to {}", cfg.corpus_size, cfg.out_dir.display());
        }
        Command::Extract => print!("{}", cmd_extract(&cfg)?.to_text(&cfg.task)),
        Command::Train { model } => {
            let model = match model {
                TrainModel::Npm => PostModel::Npm,
                TrainModel::Npm0 => PostModel::Npm0,
                TrainModel::Rnn => PostModel::Rnn,
            };
            cmd_train(&cfg, model)?;
            println!("trained {}", model.name());
        }
        Command::EvalPost => {
            println!("model\ttrain\ttest\tscored");
            for e in cmd_eval_post(&cfg)? {
                println!("{}\t{:.4}\t{:.4}\t{}", e.model.name(), e.train.accuracy, e.test.accuracy, e.test.scored);
            }
        }
        Command::Compose => {
            println!("corpus\tmethod\taccuracy\tscored");
            for r in cmd_compose(&cfg)? {
                println!("{}\t{}\t{:.4}\t{}", r.corpus, r.method, r.score.accuracy, r.score.scored);
            }
        }
        Command::Feedback { method, strategy } => {
            if let Some(s) = strategy {
                cfg.strategy = match s {
                    Strategy::Kmeans => SelectionStrategy::KmeansCentroids,
                    Strategy::Random => SelectionStrategy::RandomUniform,
                    Strategy::MostCommon => SelectionStrategy::MostCommon,
                };
            }
            let method = match method {
                Method::NpmRnn => FeedbackMethod::NpmRnn,
                Method::Rnn => FeedbackMethod::Rnn,
                Method::Bag => FeedbackMethod::Bag,
                Method::Knn => FeedbackMethod::Knn,
                Method::Unittest => FeedbackMethod::UnitTest,
            };
            let out = cmd_feedback(&cfg, method)?;
            let p = &out.propagation;
            println!(
                "{}: recall at 90% precision {:.4}{}, force multiplier {:.2}",
                method.name(),
                p.recall,
                if p.reached_target { "" } else { " (target precision unreachable)" },
                p.force_multiplier
            );
        }
        Command::Report => print!("{}", cmd_report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
