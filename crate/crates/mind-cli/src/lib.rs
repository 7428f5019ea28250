//! The `mind` command line: bank building, episode running, evaluation,
//! toy GRPO training, and artifact inspection over the mind-core library.

pub mod args;
pub mod commands;
pub mod policy;

pub use args::{Cli, Command, PolicyKind, SimKind};

/// One error per documented exit code. Messages go to stderr verbatim.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("bank schema: {0}")]
    BankSchema(String),
    #[error("client failure: {0}")]
    Client(String),
    #[error("threshold missed: {0}")]
    Threshold(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("malformed input: {0}")]
    Data(String),
    #[error("cannot read input: {0}")]
    Input(String),
    #[error("cannot write output: {0}")]
    Output(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BankSchema(_) => 2,
            CliError::Client(_) => 3,
            CliError::Threshold(_) => 4,
            CliError::Usage(_) => 64,
            CliError::Data(_) => 65,
            CliError::Input(_) => 66,
            CliError::Output(_) => 74,
            CliError::Config(_) => 78,
            CliError::Internal(_) => 70,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let workers = cli.workers;
    let mock = cli.mock;
    match cli.command {
        Command::BuildBank { cases, knowledge, out } => {
            commands::cmd_build_bank(&cases, knowledge.as_deref(), &out, mock)
        }
        Command::Run {
            config,
            cases,
            bank,
            out,
            policy,
            sim,
            seed,
        } => commands::cmd_run(commands::RunArgs {
            config,
            cases,
            bank,
            out,
            policy,
            sim,
            seed,
            mock,
            workers,
        }),
        Command::Eval {
            trajectories,
            live_config,
            report,
            policy,
            sim,
            seed,
        } => commands::cmd_eval(commands::EvalArgs {
            trajectories,
            live_config,
            report,
            policy,
            sim,
            seed,
            mock,
            workers,
        }),
        Command::TrainToy { config, out_curve, seed } => {
            commands::cmd_train_toy(config.as_deref(), &out_curve, seed)
        }
        Command::Inspect { file } => commands::cmd_inspect(&file),
    }
}
