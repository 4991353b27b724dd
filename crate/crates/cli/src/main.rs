//! `speechmmse` command-line driver.
//!
//! Every subcommand reads its inputs from, and writes its outputs to, the run
//! directory. Diagnostics go to stderr; the process exits nonzero on any error.
//!
//! Settings are layered: built-in defaults, then `--config FILE`, then the
//! global flags, then any `--key value` / `--key=value` overrides after the
//! subcommand (any key the config file accepts).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use speechmmse::config::RunConfig;
use speechmmse::evalreport::EvaluationReport;
use speechmmse::pipeline::{self, StageIndex};

#[derive(Parser, Debug)]
#[command(name = "speechmmse", version, about = "Speech to MMSE regression and cognitive-decline classification")]
struct Cli {
    /// Flat TOML config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_name = "PATH")]
    run_dir: Option<PathBuf>,

    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads for per-file stages.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the manifest and assign the train/dev split.
    Ingest(Overrides),
    /// Transcribe every recording.
    Transcribe(Overrides),
    /// Embed every transcript.
    Embed(Overrides),
    /// Extract acoustic and readability features.
    Featurize(Overrides),
    /// Train the regression head.
    TrainRegressor(Overrides),
    /// Train the SVM, text classifier and ensemble.
    TrainClassifier(Overrides),
    /// Predict scores (and classes, if a classifier was trained).
    Predict(Overrides),
    /// Write report.json and report.md.
    Evaluate(Overrides),
    /// Check the head's analytic gradients against finite differences.
    Gradcheck(Overrides),
    /// Every stage in order.
    Run(Overrides),
}

#[derive(clap::Args, Debug)]
struct Overrides {
    /// Config overrides such as `--manifest data.csv --epochs 100`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    rest: Vec<String>,
}

impl Command {
    fn overrides(&self) -> &[String] {
        match self {
            Command::Ingest(o)
            | Command::Transcribe(o)
            | Command::Embed(o)
            | Command::Featurize(o)
            | Command::TrainRegressor(o)
            | Command::TrainClassifier(o)
            | Command::Predict(o)
            | Command::Evaluate(o)
            | Command::Gradcheck(o)
            | Command::Run(o) => &o.rest,
        }
    }
}

/// Splits `--key value` and `--key=value` pairs.
fn parse_overrides(args: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            bail!("unexpected argument '{arg}' (overrides take the form --key value)");
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let value = it.next().with_context(|| format!("missing value for --{key}"))?;
                out.push((key.to_string(), value.clone()));
            }
        }
    }
    Ok(out)
}

fn build_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let overrides = parse_overrides(cli.command.overrides())?;
    let mut cfg = RunConfig::default();
    // A config file named among the trailing overrides still loads first.
    let trailing_config = overrides.iter().rev().find(|(k, _)| k == "config").map(|(_, v)| PathBuf::from(v));
    if let Some(path) = cli.config.clone().or(trailing_config) {
        cfg.merge_file(&path)?;
    }
    if let Some(dir) = &cli.run_dir {
        cfg.run_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    for (k, v) in overrides.iter().filter(|(k, _)| k != "config") {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_stage(index: &StageIndex) {
    eprintln!(
        "{}: {} entries, {} backend invocations ({})",
        index.stage,
        index.entries.len(),
        index.backend_invocations,
        index.backend
    );
}

fn report_evaluation(reports: &[EvaluationReport]) {
    for r in reports {
        let test = r.test.map_or_else(|| "-".to_string(), |t| format!("{t:.4}"));
        eprintln!("{}: dev {} {:.4}, test {}", r.model, r.metric, r.dev, test);
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Ingest(_) => {
            let v = pipeline::cmd_ingest(&cfg)?;
            eprintln!("ingest: {} subjects ({} train, {} dev)", v.n_subjects, v.n_train, v.n_dev);
            let counts: Vec<String> = v.class_counts.iter().map(|(c, n)| format!("{}={n}", c.as_str())).collect();
            eprintln!("classes: {}", counts.join(" "));
            if v.missing_mmse > 0 {
                eprintln!("missing mmse: {}", v.missing_mmse);
            }
        }
        Command::Transcribe(_) => report_stage(&pipeline::cmd_transcribe(&cfg)?),
        Command::Embed(_) => report_stage(&pipeline::cmd_embed(&cfg)?),
        Command::Featurize(_) => report_stage(&pipeline::cmd_featurize(&cfg)?),
        Command::TrainRegressor(_) => {
            let s = pipeline::cmd_train_regressor(&cfg)?;
            eprintln!(
                "train-regressor: {} train / {} dev examples, selected epoch {}, train mse {:.6}",
                s.n_train_examples, s.n_dev_examples, s.selected_epoch, s.train_mse
            );
            if let Some(d) = s.dev_mse {
                eprintln!("dev mse (normalized) {d:.6}");
            }
        }
        Command::TrainClassifier(_) => {
            let s = pipeline::cmd_train_classifier(&cfg)?;
            eprintln!(
                "train-classifier: {} subjects, train accuracy svm {:.4}, text {:.4}",
                s.n_train_subjects, s.train_accuracy_svm, s.train_accuracy_text
            );
        }
        Command::Predict(_) => {
            let n = pipeline::cmd_predict(&cfg)?;
            eprintln!("predict: {n} subjects");
        }
        Command::Evaluate(_) => report_evaluation(&pipeline::cmd_evaluate(&cfg)?),
        Command::Gradcheck(_) => {
            let r = pipeline::cmd_gradcheck(&cfg);
            let path = cfg.run_dir.join("gradcheck.json");
            match r {
                Ok(r) => eprintln!(
                    "gradcheck: max relative error {:.3e} over {} probes (tolerance {:.0e})",
                    r.max_relative_error,
                    r.probes.len(),
                    pipeline::GRADCHECK_TOLERANCE
                ),
                Err(e) => {
                    eprintln!("gradcheck: details in {}", path.display());
                    return Err(e.into());
                }
            }
        }
        Command::Run(_) => report_evaluation(&pipeline::run_all(&cfg)?),
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

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn override_forms() {
        let o = parse_overrides(&args(&["--epochs", "5", "--lr=0.01"])).unwrap();
        assert_eq!(o, vec![("epochs".into(), "5".into()), ("lr".into(), "0.01".into())]);
        assert!(parse_overrides(&args(&["--epochs"])).is_err());
        assert!(parse_overrides(&args(&["epochs", "5"])).is_err());
    }

    #[test]
    fn layering() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 3\nepochs = 10\njobs = 2\n").unwrap();
        let cli = Cli::parse_from([
            "speechmmse",
            "--config",
            file.to_str().unwrap(),
            "--jobs",
            "1",
            "train-regressor",
            "--epochs",
            "20",
        ]);
        let cfg = build_config(&cli).unwrap();
        assert_eq!((cfg.seed, cfg.train.epochs, cfg.jobs), (3, 20, 1));

        let cli = Cli::parse_from(["speechmmse", "ingest", "--run-dir", "elsewhere", "--seed", "9"]);
        let cfg = build_config(&cli).unwrap();
        assert_eq!(cfg.run_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.train.seed, 9);
    }
}
