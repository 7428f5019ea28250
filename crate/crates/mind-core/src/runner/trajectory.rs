//! Trajectory records, their line-delimited JSON persistence, and the
//! return-recomputation audit.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::case::{Action, DiagnosisLabel};
use crate::judge::RubricScores;
use crate::prb::{reliability_proxy, RetrievalHit};
use crate::rectify::{penalty_kinds, RectifyDecision, UtilityEvent};
use crate::rewards::{
    aggregate, info_gain_reward, penalty, process_reward, retrieval_reward, terminal_reward,
    RewardBreakdown, RewardConfig,
};

use super::RunnerError;

pub const TRAJ_SCHEMA: &str = "traj-v1";

/// Everything logged for one executed turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: u32,
    pub stage1_text: String,
    pub rag_query: String,
    pub hits: Vec<RetrievalHit>,
    pub injected: bool,
    pub injected_supports: Vec<String>,
    pub stage2_text: String,
    /// None when the output stayed unparseable through the ladder.
    pub action: Option<Action>,
    pub rubric: RubricScores,
    pub reward: RewardBreakdown,
    pub events: Vec<UtilityEvent>,
    pub decisions: Vec<RectifyDecision>,
    pub patient_utterance: String,
    pub revealed_cue_ids: BTreeSet<String>,
    pub info_gain: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema: String,
    pub case_id: String,
    pub label: DiagnosisLabel,
    pub seed: u64,
    pub opening: String,
    pub turns: Vec<TurnRecord>,
    pub final_diagnosis: Option<DiagnosisLabel>,
    pub terminal: f64,
    pub episode_return: f64,
    pub incomplete: bool,
    #[serde(default)]
    pub abort_reason: Option<String>,
}

/// Recomputes the episode return from logged parts and checks every
/// recomputable component against what was logged, to 1e-9.
pub fn recompute_return(traj: &Trajectory, cfg: &RewardConfig) -> Result<f64, RunnerError> {
    const TOL: f64 = 1e-9;
    let mismatch = |delta: f64| RunnerError::ReturnMismatch { delta };

    let mut breakdowns = Vec::with_capacity(traj.turns.len());
    for turn in &traj.turns {
        turn.reward.check_total().map_err(mismatch)?;

        let proc = process_reward(&turn.rubric, cfg)
            .map_err(|e| RunnerError::InvalidConfig(e.to_string()))?;
        if (proc - turn.reward.proc).abs() > TOL {
            return Err(mismatch((proc - turn.reward.proc).abs()));
        }

        let rho = if turn.hits.is_empty() {
            0.0
        } else {
            reliability_proxy(&turn.hits, cfg.alpha_sim, cfg.alpha_qual)
                .expect("hits are non-empty")
        };
        let retr = retrieval_reward(rho, cfg);
        if (retr - turn.reward.retr).abs() > TOL {
            return Err(mismatch((retr - turn.reward.retr).abs()));
        }

        let gain = info_gain_reward(turn.info_gain as usize, cfg);
        if (gain - turn.reward.gain).abs() > TOL {
            return Err(mismatch((gain - turn.reward.gain).abs()));
        }

        let final_decision = turn.decisions.last().cloned().unwrap_or(RectifyDecision::Accept);
        let kinds = penalty_kinds(&turn.events, &final_decision);
        let pen = penalty(&kinds, cfg).map_err(|e| RunnerError::InvalidConfig(e.to_string()))?;
        if (pen - turn.reward.pen).abs() > TOL {
            return Err(mismatch((pen - turn.reward.pen).abs()));
        }

        breakdowns.push(turn.reward);
    }

    let terminal = terminal_reward(traj.final_diagnosis, traj.label, cfg);
    if (terminal - traj.terminal).abs() > TOL {
        return Err(mismatch((terminal - traj.terminal).abs()));
    }

    let recomputed = aggregate(&breakdowns, terminal, cfg);
    let delta = (recomputed - traj.episode_return).abs();
    if delta > TOL {
        return Err(mismatch(delta));
    }
    Ok(recomputed)
}

pub fn append_trajectory(out: &mut dyn Write, traj: &Trajectory) -> Result<(), RunnerError> {
    let line = serde_json::to_string(traj).expect("trajectory serializes");
    writeln!(out, "{line}")?;
    Ok(())
}

pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), RunnerError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for traj in trajectories {
        append_trajectory(&mut out, traj)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, RunnerError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line).map_err(|e| RunnerError::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if traj.schema != TRAJ_SCHEMA {
            return Err(RunnerError::Parse {
                line: idx + 1,
                reason: format!("schema {:?} is not {TRAJ_SCHEMA:?}", traj.schema),
            });
        }
        out.push(traj);
    }
    Ok(out)
}
