//! `mapbert` command-line entry point.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence,
//! 5 evaluation error. Errors print one machine-parsable line to stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use mapbert_core::error::Error;

use commands::GenerateArgs;
use config::ExperimentConfig;

const USAGE: &str = "\
usage: mapbert <command> [options]

commands:
  gen-data    generate the synthetic map dataset
  train-vae   train the map tokenizer (bitvae or vqvae baseline)
  train-mt    train the masked transformer on the frozen tokenizer
  generate    complete one partially observed map
  eval        run the object-aware evaluation protocol
  ablate      run the quantizer x masking ablation grid

common options:
  --config <path>            experiment config file (default: built-in defaults)
  --set <section.key=value>  override one config key (repeatable)

generate options:
  --input <path>     dataset file to draw the map from (default: [paths] dataset)
  --index <n>        map index inside the dataset (default: 0)
  --target <name>    object category to condition on (e.g. bed)
  --mask-spec <s>    none | random:<frac> | object:<name> | patches:r.c;r.c
                     parts combine with commas, e.g. object:bed,random:0.5
  --output <dir>     output directory (default: out/generate)

environment:
  MAPBERT_THREADS    caps ablation worker threads
";

struct Cli {
    command: String,
    config_path: Option<PathBuf>,
    overrides: Vec<String>,
    generate: GenerateArgs,
}

const COMMANDS: &[&str] = &["gen-data", "train-vae", "train-mt", "generate", "eval", "ablate"];

fn parse_args(args: &[String]) -> Result<Cli, String> {
    if args.is_empty() {
        return Err("missing command".to_string());
    }
    let command = args[0].clone();
    if !COMMANDS.contains(&command.as_str()) {
        return Err(format!("unknown command {command:?}"));
    }
    let mut cli = Cli {
        command,
        config_path: None,
        overrides: Vec::new(),
        generate: GenerateArgs {
            input: None,
            index: 0,
            target: None,
            mask_spec: "none".to_string(),
            output: PathBuf::from("out/generate"),
        },
    };
    let mut i = 1;
    let value = |i: &mut usize, flag: &str| -> Result<String, String> {
        *i += 1;
        args.get(*i)
            .cloned()
            .ok_or_else(|| format!("{flag} expects a value"))
    };
    while i < args.len() {
        match args[i].as_str() {
            "--config" => cli.config_path = Some(PathBuf::from(value(&mut i, "--config")?)),
            "--set" => cli.overrides.push(value(&mut i, "--set")?),
            "--input" => cli.generate.input = Some(PathBuf::from(value(&mut i, "--input")?)),
            "--index" => {
                let v = value(&mut i, "--index")?;
                cli.generate.index = v.parse().map_err(|_| format!("bad index {v:?}"))?;
            }
            "--target" => cli.generate.target = Some(value(&mut i, "--target")?),
            "--mask-spec" => cli.generate.mask_spec = value(&mut i, "--mask-spec")?,
            "--output" => cli.generate.output = PathBuf::from(value(&mut i, "--output")?),
            other => return Err(format!("unknown option {other:?}")),
        }
        i += 1;
    }
    Ok(cli)
}

fn exit_code_for(command: &str, error: &Error) -> u8 {
    match error {
        Error::Config { .. } => 2,
        Error::Diverged { .. } => 4,
        _ if command == "eval" || command == "ablate" => 5,
        _ => 3,
    }
}

fn kind_of(error: &Error) -> &'static str {
    match error {
        Error::Config { .. } => "config",
        Error::Diverged { .. } => "divergence",
        Error::Io(_) => "io",
        Error::Format { .. } => "format",
        Error::ShapeMismatch { .. } => "shape",
        Error::Infeasible(_) => "infeasible",
        Error::Invalid(_) => "invalid",
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let text = match &cli.config_path {
        Some(path) => std::fs::read_to_string(path)?,
        None => String::new(),
    };
    let cfg = ExperimentConfig::parse(&text, &cli.overrides)?;
    match cli.command.as_str() {
        "gen-data" => commands::cmd_gen_data(&cfg),
        "train-vae" => commands::cmd_train_vae(&cfg),
        "train-mt" => commands::cmd_train_mt(&cfg),
        "generate" => commands::cmd_generate(&cfg, &cli.generate),
        "eval" => commands::cmd_eval(&cfg),
        "ablate" => commands::cmd_ablate(&cfg),
        other => unreachable!("command {other:?} validated in parse_args"),
    }
}


fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "-h") || args.is_empty() {
        print!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(msg) => {
            eprintln!("mapbert: error kind=usage exit=2 msg={msg:?}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code_for(&cli.command, &e);
            eprintln!(
                "mapbert: error kind={} exit={} msg={:?}",
                kind_of(&e),
                code,
                e.to_string()
            );
            ExitCode::from(code)
        }
    }
}
