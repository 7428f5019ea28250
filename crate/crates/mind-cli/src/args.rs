//! Argument grammar of the `mind` binary.

use std::path::PathBuf;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "mind",
    version,
    about = "Retrieval-grounded multi-turn consultation toolkit"
)]
pub struct Cli {
    /// Force the deterministic in-process backends; refuses env-var URLs.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Worker threads for batch episodes (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a reasoning-bank index from consultation dialogues.
    BuildBank {
        /// Bank-building dialogues, one JSON object per line.
        #[arg(long)]
        cases: PathBuf,
        /// Knowledge chunks appended to every dialogue, one per line.
        #[arg(long)]
        knowledge: Option<PathBuf>,
        /// Index destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one episode per case, appending trajectories to the log.
    Run {
        /// Global config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Case profiles, one JSON object per line (default: paths.cases).
        #[arg(long)]
        cases: Option<PathBuf>,
        /// Bank index (default: paths.bank).
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Trajectory log to append to (default: paths.output).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyKind::Scripted)]
        policy: PolicyKind,
        #[arg(long, value_enum, default_value_t = SimKind::Std)]
        sim: SimKind,
        /// Overrides episode.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score diagnoses: four-class P/R/F1 table plus Acc and macro-F1.
    #[command(group(ArgGroup::new("source").required(true).args(["trajectories", "live_config"])))]
    Eval {
        /// Existing trajectory log to score.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Global config JSON to run a fresh evaluation from.
        #[arg(long)]
        live_config: Option<PathBuf>,
        /// JSON report destination (default: <input>.report.json).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyKind::Scripted)]
        policy: PolicyKind,
        #[arg(long, value_enum, default_value_t = SimKind::Std)]
        sim: SimKind,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the tabular toy policy with GRPO; exits 0 iff accuracy >= 0.9.
    TrainToy {
        /// Toy trainer config JSON; defaults cover every field.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Learning-curve CSV destination.
        #[arg(long)]
        out_curve: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a bank index, trajectory log, or case file.
    Inspect {
        file: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    /// Built-in deterministic inquiry ladder.
    Scripted,
    /// Live chat endpoint driving both stages.
    Remote,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimKind {
    /// Strict-adherence profile simulator.
    Std,
    /// Controlled-variation profile simulator.
    Adapt,
    /// Line-oriented interactive loop: you answer as the patient.
    Human,
}

#[cfg(test)]
mod tests {
    use clap::Parser;

    use super::*;

    #[test]
    fn subcommand_names_and_flags_parse() {
        let cli = Cli::try_parse_from([
            "mind", "run", "--cases", "c.jsonl", "--bank", "b.jsonl", "--out", "t.jsonl",
            "--policy", "scripted", "--sim", "adapt", "--seed", "7", "--mock",
        ])
        .unwrap();
        assert!(cli.mock);
        match cli.command {
            Command::Run { seed, sim, .. } => {
                assert_eq!(seed, Some(7));
                assert_eq!(sim, SimKind::Adapt);
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn eval_requires_exactly_one_source() {
        assert!(Cli::try_parse_from(["mind", "eval"]).is_err());
        assert!(Cli::try_parse_from([
            "mind", "eval", "--trajectories", "a", "--live-config", "b"
        ])
        .is_err());
        assert!(Cli::try_parse_from(["mind", "eval", "--trajectories", "a"]).is_ok());
    }

    #[test]
    fn build_bank_requires_cases_and_out() {
        assert!(Cli::try_parse_from(["mind", "build-bank", "--out", "x"]).is_err());
        assert!(Cli::try_parse_from(["mind", "build-bank", "--cases", "d.jsonl", "--out", "x"]).is_ok());
    }
}
