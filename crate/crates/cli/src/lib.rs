//! Command-line front end: configuration, manifests and subcommands.

pub mod commands;
pub mod config;
pub mod manifest;

use clap::{Args, Parser, Subcommand};
use commands::{defaults, Failure, COMMANDS};
use config::{parse_config_text, parse_overrides, ConfigError, Resolved};
use gradalign::train::Regularizer;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "gradalign", version, about = "Gradient-alignment training and attribution robustness", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a network with a chosen regularizer.
    Train(TrainArgs),
    /// Run attribution attacks on a checkpoint.
    Attack(EvalArgs),
    /// Random perturbation similarity of attribution maps.
    EvalRps(EvalArgs),
    /// Insertion and adversarial insertion curves.
    EvalInsertion(EvalArgs),
    /// Decision surface and gradient field of a 2-input network.
    Surface(EvalArgs),
    /// Cosine criterion against its Hessian bound over an epsilon list.
    BoundSweep(EvalArgs),
    /// Attribution map of one sample.
    Attribute(EvalArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    /// Any config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub reg: Option<String>,
    #[arg(long)]
    pub lambda_cos: Option<String>,
    #[arg(long)]
    pub lambda_l2: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    /// Perturbation radius, e.g. 8/255.
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub activation: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub count: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
}

fn push(out: &mut Vec<(String, String)>, key: &str, v: &Option<String>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.clone()));
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Attack(_) => "attack",
            Command::EvalRps(_) => "eval-rps",
            Command::EvalInsertion(_) => "eval-insertion",
            Command::Surface(_) => "surface",
            Command::BoundSweep(_) => "bound-sweep",
            Command::Attribute(_) => "attribute",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train(a) => &a.common,
            Command::Attack(a)
            | Command::EvalRps(a)
            | Command::EvalInsertion(a)
            | Command::Surface(a)
            | Command::BoundSweep(a)
            | Command::Attribute(a) => &a.common,
        }
    }

    /// Flag overrides in application order; `--set` comes last.
    fn flags(&self) -> Result<Vec<(String, String)>, ConfigError> {
        let c = self.common();
        let mut out = Vec::new();
        push(&mut out, "out", &c.out);
        push(&mut out, "seed", &c.seed);
        match self {
            Command::Train(a) => {
                push(&mut out, "reg", &a.reg);
                push(&mut out, "lambda_cos", &a.lambda_cos);
                push(&mut out, "lambda_l2", &a.lambda_l2);
                push(&mut out, "lambda", &a.lambda);
                push(&mut out, "eps", &a.eps);
                push(&mut out, "epochs", &a.epochs);
                push(&mut out, "batch_size", &a.batch_size);
                push(&mut out, "lr", &a.lr);
                push(&mut out, "data", &a.data);
                push(&mut out, "model", &a.model);
                push(&mut out, "activation", &a.activation);
            }
            Command::Attack(a)
            | Command::EvalRps(a)
            | Command::EvalInsertion(a)
            | Command::Surface(a)
            | Command::BoundSweep(a)
            | Command::Attribute(a) => {
                push(&mut out, "checkpoint", &a.checkpoint);
                push(&mut out, "method", &a.method);
                let eps_key = match self {
                    Command::EvalInsertion(_) => "attack_eps",
                    Command::BoundSweep(_) => "eps_list",
                    _ => "eps",
                };
                push(&mut out, eps_key, &a.eps);
                push(&mut out, "count", &a.count);
                push(&mut out, "data", &a.data);
            }
        }
        out.extend(parse_overrides(&c.set)?);
        Ok(out)
    }
}

/// Resolves defaults, the config file and flags for `cmd`.
pub fn resolve(cmd: &Command) -> Result<Resolved, ConfigError> {
    let name = cmd.name();
    let file = match &cmd.common().config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError(format!("reading {}: {e}", p.display())))?;
            parse_config_text(&text, name, &COMMANDS)?
        }
        None => Default::default(),
    };
    let flags = cmd.flags()?;
    // The regularizer picks the training defaults, so find it first.
    let reg_text = flags.iter().rev().find(|(k, _)| k == "reg").map(|(_, v)| v.clone()).or_else(|| file.get("reg").cloned());
    let reg = match reg_text {
        Some(t) => t.parse::<Regularizer>().map_err(|e| ConfigError(format!("key 'reg': {e}")))?,
        None => Regularizer::Ce,
    };
    Resolved::new(name, defaults(name, reg)?, &file, &flags)
}

/// Runs one parsed command and returns the run directory.
pub fn execute(cmd: &Command) -> Result<PathBuf, Failure> {
    let r = resolve(cmd)?;
    commands::run(cmd.name(), &r)
}
