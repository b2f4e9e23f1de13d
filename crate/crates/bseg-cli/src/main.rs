//! `bseg`: Bayesian semantic-segmentation pipeline over synthetic
//! inspection scenes.
//!
//! Subcommands: `generate-data`, `train`, `infer`, `evaluate`, `surrogate`,
//! and `experiment` (preset runner). Exit codes: 0 ok, 2 configuration
//! error, 3 I/O error, 4 data/model contract violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use bseg::{Error, Result};

use commands::{EvalArgs, InferArgs};
use config::RunConfig;

const USAGE: &str = "\
usage: bseg <command> [flags]

commands:
  generate-data --config C --out DIR
  train         --config C --data DIR --out DIR [--benchmark]
  infer         --model M --image I --out DIR [--samples N] [--seed S]
                [--rule MAP|ML] [--keep-stack]
  evaluate      --model M --data DIR --split train|val|test --out DIR
                [--samples N] [--seed S] [--rule MAP|ML]
  surrogate     --base M --data DIR --config C --out DIR
  experiment    --preset P --out DIR

environment:
  BSEG_THREADS  cap internal parallelism (default: machine cores)
";

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        _ => 4,
    }
}

#[derive(Default)]
struct Flags {
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    model: Option<PathBuf>,
    base: Option<PathBuf>,
    image: Option<PathBuf>,
    preset: Option<PathBuf>,
    split: Option<String>,
    samples: Option<usize>,
    seed: Option<u64>,
    rule: Option<String>,
    benchmark: bool,
    keep_stack: bool,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags> {
        let mut flags = Flags::default();
        let mut iter = args.iter();
        while let Some(flag) = iter.next() {
            let mut value = |name: &str| -> Result<String> {
                iter.next()
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("flag {name} needs a value")))
            };
            match flag.as_str() {
                "--config" => flags.config = Some(PathBuf::from(value("--config")?)),
                "--data" => flags.data = Some(PathBuf::from(value("--data")?)),
                "--out" => flags.out = Some(PathBuf::from(value("--out")?)),
                "--model" => flags.model = Some(PathBuf::from(value("--model")?)),
                "--base" => flags.base = Some(PathBuf::from(value("--base")?)),
                "--image" => flags.image = Some(PathBuf::from(value("--image")?)),
                "--preset" => flags.preset = Some(PathBuf::from(value("--preset")?)),
                "--split" => flags.split = Some(value("--split")?),
                "--samples" => {
                    let v = value("--samples")?;
                    flags.samples =
                        Some(v.parse().map_err(|_| {
                            Error::Config(format!("bad value {v:?} for --samples"))
                        })?);
                }
                "--seed" => {
                    let v = value("--seed")?;
                    flags.seed = Some(
                        v.parse()
                            .map_err(|_| Error::Config(format!("bad value {v:?} for --seed")))?,
                    );
                }
                "--rule" => flags.rule = Some(value("--rule")?),
                "--benchmark" => flags.benchmark = true,
                "--keep-stack" => flags.keep_stack = true,
                other => return Err(Error::Config(format!("unknown flag {other}"))),
            }
        }
        Ok(flags)
    }

    fn need(path: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        path.clone()
            .ok_or_else(|| Error::Config(format!("missing required flag {name}")))
    }

    fn ml_rule(&self) -> Result<bool> {
        match self.rule.as_deref() {
            None | Some("MAP") => Ok(false),
            Some("ML") => Ok(true),
            Some(other) => Err(Error::Config(format!(
                "unknown rule {other:?} (expected MAP or ML)"
            ))),
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("BSEG_THREADS") {
        let threads: usize = raw
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("bad BSEG_THREADS value {raw:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(command: &str, flags: Flags) -> Result<()> {
    match command {
        "generate-data" => {
            let config = RunConfig::from_file(Flags::need(&flags.config, "--config")?)?;
            commands::generate_data(&config, &Flags::need(&flags.out, "--out")?)
        }
        "train" => {
            let config = RunConfig::from_file(Flags::need(&flags.config, "--config")?)?;
            commands::train(
                &config,
                &Flags::need(&flags.data, "--data")?,
                &Flags::need(&flags.out, "--out")?,
                flags.benchmark,
            )
        }
        "infer" => commands::infer(&InferArgs {
            model: Flags::need(&flags.model, "--model")?,
            image: Flags::need(&flags.image, "--image")?,
            out: Flags::need(&flags.out, "--out")?,
            samples: flags.samples.unwrap_or(50),
            seed: flags.seed.unwrap_or(0),
            ml_rule: flags.ml_rule()?,
            keep_stack: flags.keep_stack,
        }),
        "evaluate" => commands::evaluate(&EvalArgs {
            model: Flags::need(&flags.model, "--model")?,
            data: Flags::need(&flags.data, "--data")?,
            split: flags.split.clone().unwrap_or_else(|| "test".into()),
            out: Flags::need(&flags.out, "--out")?,
            samples: flags.samples.unwrap_or(50),
            seed: flags.seed.unwrap_or(0),
            ml_rule: flags.ml_rule()?,
        }),
        "surrogate" => {
            let config = RunConfig::from_file(Flags::need(&flags.config, "--config")?)?;
            commands::surrogate(
                &Flags::need(&flags.base, "--base")?,
                &Flags::need(&flags.data, "--data")?,
                &config,
                &Flags::need(&flags.out, "--out")?,
            )
        }
        "experiment" => {
            let config = RunConfig::from_file(Flags::need(&flags.preset, "--preset")?)?;
            commands::experiment(&config, &Flags::need(&flags.out, "--out")?)
        }
        other => Err(Error::Config(format!("unknown command {other:?}"))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        eprint!("{USAGE}");
        return ExitCode::from(2);
    };
    if command == "--help" || command == "-h" || command == "help" {
        print!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    let result = init_threads()
        .and_then(|()| Flags::parse(&args[1..]))
        .and_then(|flags| run(command, flags));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
