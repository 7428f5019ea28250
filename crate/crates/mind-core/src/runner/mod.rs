//! Episode orchestration: the two-stage turn loop with retrieval, gated
//! support injection, rectification, judging, and reward accounting;
//! batch evaluation; and the toy GRPO trainer.

mod metrics;
mod toy;
mod trajectory;

pub use metrics::{metrics_from_pairs, ClassMetrics, EvalReport};
pub use toy::{
    canonical_question, save_curve, toy_cases, train_toy_grpo, CurvePoint, ToyAction, ToyPolicy,
    ToyTrainConfig,
};
pub use trajectory::{
    append_trajectory, load_trajectories, recompute_return, save_trajectories, Trajectory,
    TurnRecord, TRAJ_SCHEMA,
};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::case::{Action, CaseProfile, DialogueHistory, DiagnosisLabel, Speaker};
use crate::clients::{ChatClient, ChatTurnMsg, ClientError, EmbedClient, GenParams};
use crate::judge::TurnJudge;
use crate::patientsim::{PatientSim, RoutingTable};
use crate::prb::{gate, reliability_proxy, retrieve, PRBIndex, PrbError};
use crate::protocol::{
    check_compliance, parse_stage1, parse_stage2, render_stage1, render_stage2, Stage,
    Stage1Output, Stage2Output,
};
use crate::rectify::{
    decide, detect, penalty_kinds, RectifyConfig, RectifyDecision, RectifyState, TurnOutput,
};
use crate::rewards::{
    aggregate, info_gain_reward, penalty, process_reward, retrieval_reward, terminal_reward,
    RewardBreakdown, RewardConfig,
};
use crate::util::{fill_template, fnv1a_64_str, seeded_rng};

pub const DOCTOR_STAGE1_PROMPT: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../prompts/doctor-stage1-v1.txt"
));
pub const DOCTOR_STAGE2_PROMPT: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../prompts/doctor-stage2-v1.txt"
));

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("recomputed return differs from the logged return by {delta}")]
    ReturnMismatch { delta: f64 },
    #[error("non-finite logits at iteration {iteration}")]
    NonFiniteLogits { iteration: usize },
    #[error("no cases supplied")]
    EmptyCases,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("trajectory line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Inference-time knobs of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub max_turns: u32,
    pub top_k: usize,
    pub support_injection_prob: f64,
    pub gating_threshold: f64,
    pub doctor_gen: GenParams,
    pub patient_gen: GenParams,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_turns: 10,
            top_k: 5,
            support_injection_prob: 0.33,
            gating_threshold: 0.70,
            doctor_gen: GenParams::doctor_default(),
            patient_gen: GenParams::patient_default(),
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_turns == 0 {
            return Err("max_turns must be at least 1".to_string());
        }
        if self.top_k == 0 {
            return Err("top_k must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.support_injection_prob) {
            return Err("support_injection_prob must lie in [0, 1]".to_string());
        }
        if !(0.0..=1.0).contains(&self.gating_threshold) {
            return Err("gating_threshold must lie in [0, 1]".to_string());
        }
        self.doctor_gen.validate()?;
        self.patient_gen.validate()?;
        Ok(())
    }
}

/// What the policy sees when generating a stage.
#[derive(Debug, Clone)]
pub struct StageView<'a> {
    pub history_text: &'a str,
    pub turn_index: u32,
    pub max_turns: u32,
}

/// A doctor policy emitting raw tagged two-stage text.
pub trait Policy {
    fn stage1(&mut self, view: &StageView) -> Result<String, ClientError>;
    /// `constraint` carries the rectification note on regeneration.
    fn stage2(
        &mut self,
        view: &StageView,
        supports: &[String],
        constraint: Option<&str>,
    ) -> Result<String, ClientError>;
}

/// One scripted turn; `stage2_retry` replaces the primary text when the
/// rectifier asks for a regeneration.
#[derive(Debug, Clone)]
pub struct ScriptedTurn {
    pub query: String,
    pub stage2: String,
    pub stage2_retry: Option<String>,
}

impl ScriptedTurn {
    pub fn inquiry(query: &str, think: &str, question: &str) -> Self {
        Self {
            query: query.to_string(),
            stage2: render_stage2(&Stage2Output {
                think: think.to_string(),
                action: Action::Inquiry {
                    question: question.to_string(),
                },
            }),
            stage2_retry: None,
        }
    }

    pub fn diagnose(
        query: &str,
        think: &str,
        label: DiagnosisLabel,
        recommendation: Option<&str>,
    ) -> Self {
        Self {
            query: query.to_string(),
            stage2: render_stage2(&Stage2Output {
                think: think.to_string(),
                action: Action::Diagnose {
                    label,
                    recommendation: recommendation.unwrap_or("").to_string(),
                },
            }),
            stage2_retry: None,
        }
    }

    /// Raw stage-2 text, for driving format failures in tests.
    pub fn raw(query: &str, stage2: &str) -> Self {
        Self {
            query: query.to_string(),
            stage2: stage2.to_string(),
            stage2_retry: None,
        }
    }

    pub fn with_retry(mut self, stage2_retry: &str) -> Self {
        self.stage2_retry = Some(stage2_retry.to_string());
        self
    }
}

/// Replays a fixed turn script, cycling when the episode outlives it.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    turns: Vec<ScriptedTurn>,
    cursor: usize,
}

impl ScriptedPolicy {
    pub fn new(turns: Vec<ScriptedTurn>) -> Self {
        assert!(!turns.is_empty(), "a scripted policy needs at least one turn");
        Self { turns, cursor: 0 }
    }

    fn current(&self) -> &ScriptedTurn {
        &self.turns[self.cursor % self.turns.len()]
    }
}

impl Policy for ScriptedPolicy {
    fn stage1(&mut self, view: &StageView) -> Result<String, ClientError> {
        self.cursor = view.turn_index as usize;
        Ok(render_stage1(&Stage1Output {
            think: None,
            rag_query: self.current().query.clone(),
        }))
    }

    fn stage2(
        &mut self,
        _view: &StageView,
        _supports: &[String],
        constraint: Option<&str>,
    ) -> Result<String, ClientError> {
        let turn = self.current();
        match (constraint, &turn.stage2_retry) {
            (Some(_), Some(retry)) => Ok(retry.clone()),
            _ => Ok(turn.stage2.clone()),
        }
    }
}

/// Test oracle: asks one on-topic question, then reads the ground truth.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    truth: DiagnosisLabel,
}

impl OraclePolicy {
    pub fn new(profile: &CaseProfile) -> Self {
        Self {
            truth: profile.label,
        }
    }
}

impl Policy for OraclePolicy {
    fn stage1(&mut self, _view: &StageView) -> Result<String, ClientError> {
        Ok(render_stage1(&Stage1Output {
            think: None,
            rag_query: "complaint confirmed; duration severity sleep risk not mentioned".to_string(),
        }))
    }

    fn stage2(
        &mut self,
        view: &StageView,
        _supports: &[String],
        _constraint: Option<&str>,
    ) -> Result<String, ClientError> {
        let action = if view.turn_index == 0 {
            Action::Inquiry {
                question: "How long has this been going on?".to_string(),
            }
        } else {
            Action::Diagnose {
                label: self.truth,
                recommendation: String::new(),
            }
        };
        Ok(render_stage2(&Stage2Output {
            think: format!("deciding between depression anxiety mix other; duration {}", self.truth),
            action,
        }))
    }
}

/// Always diagnoses the same label on the first turn.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    pub label: DiagnosisLabel,
}

impl Policy for ConstantPolicy {
    fn stage1(&mut self, _view: &StageView) -> Result<String, ClientError> {
        Ok(render_stage1(&Stage1Output {
            think: None,
            rag_query: "initial presentation; fields not mentioned".to_string(),
        }))
    }

    fn stage2(
        &mut self,
        _view: &StageView,
        _supports: &[String],
        _constraint: Option<&str>,
    ) -> Result<String, ClientError> {
        Ok(render_stage2(&Stage2Output {
            think: format!("committing to {} immediately", self.label),
            action: Action::Diagnose {
                label: self.label,
                recommendation: String::new(),
            },
        }))
    }
}

/// LLM-backed doctor speaking the two-stage wire protocol.
pub struct RemotePolicy {
    chat: std::sync::Arc<dyn ChatClient>,
    gen: GenParams,
    model_tag: String,
}

impl RemotePolicy {
    pub fn new(chat: std::sync::Arc<dyn ChatClient>, gen: GenParams) -> Self {
        Self {
            chat,
            gen,
            model_tag: "doctor".to_string(),
        }
    }
}

impl Policy for RemotePolicy {
    fn stage1(&mut self, view: &StageView) -> Result<String, ClientError> {
        let prompt = fill_template(DOCTOR_STAGE1_PROMPT, &[("history", view.history_text)]);
        let key = format!("{}-s1-{:016x}", self.model_tag, fnv1a_64_str(&prompt));
        self.chat.chat(&[ChatTurnMsg::user(prompt)], &self.gen, &key)
    }

    fn stage2(
        &mut self,
        view: &StageView,
        supports: &[String],
        constraint: Option<&str>,
    ) -> Result<String, ClientError> {
        let supports_text = if supports.is_empty() {
            "none".to_string()
        } else {
            supports.join("\n")
        };
        let prompt = fill_template(
            DOCTOR_STAGE2_PROMPT,
            &[
                ("history", view.history_text),
                ("supports", &supports_text),
                ("constraint", constraint.unwrap_or("")),
            ],
        );
        let key = format!("{}-s2-{:016x}", self.model_tag, fnv1a_64_str(&prompt));
        self.chat.chat(&[ChatTurnMsg::user(prompt)], &self.gen, &key)
    }
}

/// Immutable components shared by every episode of a run.
pub struct EpisodeContext<'a> {
    pub index: &'a PRBIndex,
    pub judge: &'a dyn TurnJudge,
    pub embed: &'a dyn EmbedClient,
    pub routing: &'a RoutingTable,
    pub reward_cfg: &'a RewardConfig,
    pub rectify_cfg: &'a RectifyConfig,
    pub episode_cfg: &'a EpisodeConfig,
}

pub fn history_text(history: &DialogueHistory) -> String {
    history
        .turns
        .iter()
        .map(|(speaker, text)| match speaker {
            Speaker::Agent => format!("Doctor: {text}"),
            Speaker::Patient => format!("Patient: {text}"),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

struct StageTwoOutcome {
    stage2_text: String,
    parsed: Option<Stage2Output>,
    events: Vec<crate::rectify::UtilityEvent>,
    decisions: Vec<RectifyDecision>,
    pen: f64,
}

/// Runs the per-turn rectification ladder around stage-2 generation.
#[allow(clippy::too_many_arguments)]
fn stage_two_with_rectification(
    policy: &mut dyn Policy,
    view: &StageView,
    supports: &[String],
    q_t: &str,
    prior_inquiries: &[String],
    recent_gains: &[u64],
    state: &mut RectifyState,
    ctx: &EpisodeContext,
) -> Result<StageTwoOutcome, ClientError> {
    let mut constraint: Option<String> = None;
    let mut decisions = Vec::new();
    loop {
        let stage2_text = policy.stage2(view, supports, constraint.as_deref())?;
        let violation_count = check_compliance(&stage2_text, Stage::Two).len();
        let parsed = parse_stage2(&stage2_text).ok();

        let (inquiry, is_diagnose) = match parsed.as_ref().map(|p| &p.action) {
            Some(Action::Inquiry { question }) => (Some(question.as_str()), false),
            Some(Action::Diagnose { .. }) => (None, true),
            None => (None, false),
        };
        let output = TurnOutput {
            inquiry,
            format_violation_count: violation_count,
            action_is_diagnose: is_diagnose,
            turn_index: view.turn_index,
            max_turns: view.max_turns,
        };
        let events = detect(&output, prior_inquiries, recent_gains, ctx.rectify_cfg, ctx.routing);
        let decision = decide(&events, state, ctx.index, q_t, ctx.embed, ctx.rectify_cfg);
        decisions.push(decision.clone());

        match decision {
            RectifyDecision::Retry { ref constraint_note, .. } => {
                constraint = Some(constraint_note.clone());
            }
            RectifyDecision::Fallback { ref entry_id, ref ref_inquiry } => {
                let kinds = penalty_kinds(&events, &decision);
                let pen = penalty(&kinds, ctx.reward_cfg).expect("default kinds are priced");
                let fallback = Stage2Output {
                    think: format!("Executing reference inquiry {entry_id} from the reasoning bank."),
                    action: Action::Inquiry {
                        question: ref_inquiry.clone(),
                    },
                };
                return Ok(StageTwoOutcome {
                    stage2_text: render_stage2(&fallback),
                    parsed: Some(fallback),
                    events,
                    decisions,
                    pen,
                });
            }
            RectifyDecision::Accept => {
                let kinds = penalty_kinds(&events, &decision);
                let pen = penalty(&kinds, ctx.reward_cfg).expect("default kinds are priced");
                return Ok(StageTwoOutcome {
                    stage2_text,
                    parsed,
                    events,
                    decisions,
                    pen,
                });
            }
        }
    }
}

/// Runs one full episode against one case. Transport failures abort with
/// the partial trajectory marked incomplete instead of erroring.
pub fn run_episode(
    policy: &mut dyn Policy,
    sim: &mut dyn PatientSim,
    profile: &CaseProfile,
    ctx: &EpisodeContext,
) -> Trajectory {
    let ep = ctx.episode_cfg;
    let mut rng = seeded_rng(ep.seed, &[&profile.case_id, "episode"]);
    let mut rectify_state = RectifyState::new();

    let opening = sim.opening();
    let mut history = DialogueHistory::new().with_patient_turn(&opening.utterance);
    let ids: Vec<&str> = opening.revealed_cue_ids.iter().map(String::as_str).collect();
    let (h, _) = history
        .reveal(profile, ids)
        .expect("simulator reveals only profile cue ids");
    history = h;

    let mut traj = Trajectory {
        schema: TRAJ_SCHEMA.to_string(),
        case_id: profile.case_id.clone(),
        label: profile.label,
        seed: ep.seed,
        opening: opening.utterance.clone(),
        turns: Vec::new(),
        final_diagnosis: None,
        terminal: 0.0,
        episode_return: 0.0,
        incomplete: false,
        abort_reason: None,
    };

    let mut prior_inquiries: Vec<String> = Vec::new();
    let mut recent_gains: Vec<u64> = Vec::new();

    'episode: for turn_index in 0..ep.max_turns {
        rectify_state.begin_turn();
        let inject_coin = rng.gen::<f64>() < ep.support_injection_prob;
        let text = history_text(&history);
        let view = StageView {
            history_text: &text,
            turn_index,
            max_turns: ep.max_turns,
        };

        let stage1_text = match policy.stage1(&view) {
            Ok(t) => t,
            Err(e) => {
                traj.incomplete = true;
                traj.abort_reason = Some(e.to_string());
                break 'episode;
            }
        };
        let rag_query = parse_stage1(&stage1_text)
            .map(|s| s.rag_query)
            .unwrap_or_default();

        let hits = if rag_query.is_empty() {
            Vec::new()
        } else {
            match retrieve(ctx.index, &rag_query, ep.top_k, ctx.embed) {
                Ok(hits) => hits,
                Err(PrbError::ZeroVector | PrbError::EmptyIndex) => Vec::new(),
                Err(PrbError::Client(e)) => {
                    traj.incomplete = true;
                    traj.abort_reason = Some(e.to_string());
                    break 'episode;
                }
                Err(other) => {
                    traj.incomplete = true;
                    traj.abort_reason = Some(other.to_string());
                    break 'episode;
                }
            }
        };
        let gate_decision = gate(&hits, ep.gating_threshold);
        let injected = gate_decision.inject && inject_coin;
        let injected_supports = if injected {
            gate_decision.gated_supports.clone()
        } else {
            Vec::new()
        };
        let rho = if hits.is_empty() {
            0.0
        } else {
            reliability_proxy(&hits, ctx.reward_cfg.alpha_sim, ctx.reward_cfg.alpha_qual)
                .expect("hits are non-empty")
        };

        let outcome = match stage_two_with_rectification(
            policy,
            &view,
            &injected_supports,
            &rag_query,
            &prior_inquiries,
            &recent_gains,
            &mut rectify_state,
            ctx,
        ) {
            Ok(o) => o,
            Err(e) => {
                traj.incomplete = true;
                traj.abort_reason = Some(e.to_string());
                break 'episode;
            }
        };

        let think = outcome.parsed.as_ref().map(|p| p.think.clone()).unwrap_or_default();
        let answer = match outcome.parsed.as_ref().map(|p| &p.action) {
            Some(Action::Inquiry { question }) => question.clone(),
            Some(Action::Diagnose { label, .. }) => format!("<Diagnosis>: {label}"),
            None => String::new(),
        };
        let rubric = match ctx.judge.rubric(&text, &think, &answer, &injected_supports) {
            Ok(r) => r,
            Err(e) => {
                traj.incomplete = true;
                traj.abort_reason = Some(e.to_string());
                break 'episode;
            }
        };
        let proc = process_reward(&rubric, ctx.reward_cfg).expect("dims default is non-empty");
        let retr = retrieval_reward(rho, ctx.reward_cfg);

        match outcome.parsed.as_ref().map(|p| p.action.clone()) {
            Some(Action::Diagnose { label, .. }) => {
                let reward = RewardBreakdown::new(proc, retr, 0.0, outcome.pen);
                traj.turns.push(TurnRecord {
                    turn_index,
                    stage1_text,
                    rag_query,
                    hits,
                    injected,
                    injected_supports,
                    stage2_text: outcome.stage2_text,
                    action: outcome.parsed.map(|p| p.action),
                    rubric,
                    reward,
                    events: outcome.events,
                    decisions: outcome.decisions,
                    patient_utterance: String::new(),
                    revealed_cue_ids: Default::default(),
                    info_gain: 0,
                });
                traj.final_diagnosis = Some(label);
                break 'episode;
            }
            Some(Action::Inquiry { question }) => {
                let reply = sim.respond(&question);
                let ids: Vec<&str> = reply.revealed_cue_ids.iter().map(String::as_str).collect();
                let (h, gained) = history
                    .with_agent_turn(&question)
                    .with_patient_turn(&reply.utterance)
                    .reveal(profile, ids)
                    .expect("simulator reveals only profile cue ids");
                history = h;
                let gain = info_gain_reward(gained, ctx.reward_cfg);
                let reward = RewardBreakdown::new(proc, retr, gain, outcome.pen);
                prior_inquiries.push(question);
                recent_gains.push(gained as u64);
                traj.turns.push(TurnRecord {
                    turn_index,
                    stage1_text,
                    rag_query,
                    hits,
                    injected,
                    injected_supports,
                    stage2_text: outcome.stage2_text,
                    action: outcome.parsed.map(|p| p.action),
                    rubric,
                    reward,
                    events: outcome.events,
                    decisions: outcome.decisions,
                    patient_utterance: reply.utterance,
                    revealed_cue_ids: reply.revealed_cue_ids,
                    info_gain: gained as u64,
                });
            }
            None => {
                // Unparseable output survived the ladder: the turn is spent
                // with no action, no patient response, and no gain.
                let reward = RewardBreakdown::new(proc, retr, 0.0, outcome.pen);
                recent_gains.push(0);
                traj.turns.push(TurnRecord {
                    turn_index,
                    stage1_text,
                    rag_query,
                    hits,
                    injected,
                    injected_supports,
                    stage2_text: outcome.stage2_text,
                    action: None,
                    rubric,
                    reward,
                    events: outcome.events,
                    decisions: outcome.decisions,
                    patient_utterance: String::new(),
                    revealed_cue_ids: Default::default(),
                    info_gain: 0,
                });
            }
        }
    }

    traj.terminal = terminal_reward(traj.final_diagnosis, profile.label, ctx.reward_cfg);
    let breakdowns: Vec<RewardBreakdown> = traj.turns.iter().map(|t| t.reward).collect();
    traj.episode_return = aggregate(&breakdowns, traj.terminal, ctx.reward_cfg);
    traj
}

/// Runs one episode per case across a bounded worker pool, preserving
/// input order in the output.
pub fn run_batch(
    policy_factory: &(dyn Fn(&CaseProfile) -> Box<dyn Policy> + Sync),
    sim_factory: &(dyn Fn(&CaseProfile) -> Box<dyn PatientSim> + Sync),
    cases: &[CaseProfile],
    ctx: &EpisodeContext,
    workers: usize,
) -> Vec<Trajectory> {
    let workers = workers.max(1).min(cases.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Trajectory>>> = Mutex::new(vec![None; cases.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cases.len() {
                    break;
                }
                let case = &cases[i];
                let mut policy = policy_factory(case);
                let mut sim = sim_factory(case);
                let traj = run_episode(policy.as_mut(), sim.as_mut(), case, ctx);
                results.lock().expect("no poisoned batch lock")[i] = Some(traj);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned batch lock")
        .into_iter()
        .map(|t| t.expect("every case produced a trajectory"))
        .collect()
}

/// Runs one episode per case and scores the predictions.
pub fn evaluate(
    policy_factory: &(dyn Fn(&CaseProfile) -> Box<dyn Policy> + Sync),
    sim_factory: &(dyn Fn(&CaseProfile) -> Box<dyn PatientSim> + Sync),
    cases: &[CaseProfile],
    ctx: &EpisodeContext,
    workers: usize,
) -> Result<(EvalReport, Vec<Trajectory>), RunnerError> {
    if cases.is_empty() {
        return Err(RunnerError::EmptyCases);
    }
    let trajectories = run_batch(policy_factory, sim_factory, cases, ctx, workers);
    let pairs: Vec<(DiagnosisLabel, Option<DiagnosisLabel>)> = trajectories
        .iter()
        .map(|t| (t.label, t.final_diagnosis))
        .collect();
    Ok((metrics_from_pairs(&pairs), trajectories))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{MockEmbed, MOCK_EMBED_DIMS};
    use crate::judge::MockJudge;
    use crate::patientsim::{PriorTable, ProfileSim, SimMode};
    use crate::prb::{PRBCategory, PRBEntry, PRBMeta};
    use crate::case::{CueField, CueItem, CueStatus};
    use crate::clients::mock_embed;

    fn cue(id: &str, field: CueField, value: &str, status: CueStatus) -> CueItem {
        CueItem {
            id: id.to_string(),
            field,
            value: value.to_string(),
            status,
        }
    }

    fn depression_profile() -> CaseProfile {
        CaseProfile {
            case_id: "case-dep-12w".to_string(),
            label: DiagnosisLabel::Depression,
            explicit_cues: vec![cue(
                "c1",
                CueField::Complaint,
                "feeling low and exhausted",
                CueStatus::Present,
            )],
            implicit_cues: vec![
                cue("c2", CueField::Duration, "about 12 weeks", CueStatus::Present),
                cue("c3", CueField::Symptom, "low mood most of the day", CueStatus::Present),
                cue("c4", CueField::Sleep, "trouble falling asleep", CueStatus::Present),
            ],
        }
    }

    fn bank_entry(id: &str, state: &str, inquiry: &str) -> PRBEntry {
        PRBEntry {
            entry_id: id.to_string(),
            state_text: state.to_string(),
            state_vec: mock_embed(state),
            support_text: format!("support note of {id}"),
            ref_inquiry: inquiry.to_string(),
            meta: PRBMeta {
                category: PRBCategory::General,
                quality: 4,
                hard_flags: [false; 3],
                source_note: String::new(),
            },
        }
    }

    fn small_bank() -> PRBIndex {
        PRBIndex::new(
            MOCK_EMBED_DIMS,
            MockEmbed.fingerprint(),
            vec![
                bank_entry(
                    "e1",
                    "low mood duration unknown sleep not mentioned",
                    "How long has this been going on?",
                ),
                bank_entry(
                    "e2",
                    "anxiety panic stressor exam pressure",
                    "Has any particular stress or pressure been affecting you?",
                ),
            ],
        )
        .unwrap()
    }

    struct Fixture {
        index: PRBIndex,
        judge: MockJudge,
        routing: RoutingTable,
        reward_cfg: RewardConfig,
        rectify_cfg: RectifyConfig,
        episode_cfg: EpisodeConfig,
    }

    impl Fixture {
        fn new() -> Self {
            Self {
                index: small_bank(),
                judge: MockJudge::new(5),
                routing: RoutingTable::shipped(),
                reward_cfg: RewardConfig::default(),
                rectify_cfg: RectifyConfig::default(),
                episode_cfg: EpisodeConfig::default(),
            }
        }

        fn ctx(&self) -> EpisodeContext<'_> {
            EpisodeContext {
                index: &self.index,
                judge: &self.judge,
                embed: &MockEmbed,
                routing: &self.routing,
                reward_cfg: &self.reward_cfg,
                rectify_cfg: &self.rectify_cfg,
                episode_cfg: &self.episode_cfg,
            }
        }
    }

    fn duration_then_diagnose() -> ScriptedPolicy {
        ScriptedPolicy::new(vec![
            ScriptedTurn::inquiry(
                "complaint low mood; duration not mentioned; sleep not mentioned",
                "complaint known; duration missing, ask duration before depression anxiety split",
                "How long has this been going on?",
            ),
            ScriptedTurn::diagnose(
                "complaint low mood; duration 12 weeks; depression likely",
                "duration 12 weeks supports depression over anxiety; committing",
                DiagnosisLabel::Depression,
                Some("begin structured follow-up"),
            ),
        ])
    }

    #[test]
    fn scripted_episode_diagnoses_in_two_turns() {
        let fixture = Fixture::new();
        let profile = depression_profile();
        let mut policy = duration_then_diagnose();
        let mut sim = ProfileSim::standard(profile.clone());
        let traj = run_episode(&mut policy, &mut sim, &profile, &fixture.ctx());

        assert!(!traj.incomplete);
        assert_eq!(traj.turns.len(), 2);
        assert_eq!(traj.final_diagnosis, Some(DiagnosisLabel::Depression));
        assert_eq!(traj.terminal, 5.0);
        assert_eq!(traj.turns[0].info_gain, 1);
        assert!(traj.turns[0].patient_utterance.contains("12 weeks"));

        let manual: f64 = traj.turns.iter().map(|t| t.reward.turn_total).sum::<f64>() + 5.0;
        assert!((traj.episode_return - manual).abs() <= 1e-12);
        assert_eq!(recompute_return(&traj, &fixture.reward_cfg).unwrap(), traj.episode_return);
    }

    #[test]
    fn never_diagnosing_policy_runs_all_turns_with_zero_terminal() {
        let fixture = Fixture::new();
        let profile = depression_profile();
        let mut policy = ScriptedPolicy::new(vec![ScriptedTurn::inquiry(
            "state summary with open fields",
            "asking sleep again and again",
            "How is your sleep?",
        )]);
        let mut sim = ProfileSim::standard(profile.clone());
        let traj = run_episode(&mut policy, &mut sim, &profile, &fixture.ctx());

        assert_eq!(traj.turns.len(), 10);
        assert_eq!(traj.final_diagnosis, None);
        assert_eq!(traj.terminal, 0.0);
        assert!(traj.turns.iter().all(|t| t.turn_index < 10));
        recompute_return(&traj, &fixture.reward_cfg).unwrap();
    }

    #[test]
    fn fixed_seed_episodes_are_byte_identical() {
        let fixture = Fixture::new();
        let profile = depression_profile();
        let run = || {
            let mut policy = duration_then_diagnose();
            let mut sim = ProfileSim::new(
                profile.clone(),
                RoutingTable::shipped(),
                PriorTable::shipped(),
                SimMode::Adapt { seed: 3, level: crate::patientsim::VariationLevel::Mild },
            );
            run_episode(&mut policy, &mut sim, &profile, &fixture.ctx())
        };
        let a = serde_json::to_string(&run()).unwrap();
        let b = serde_json::to_string(&run()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_stage2_escalates_to_fallback_inquiry() {
        let fixture = Fixture::new();
        let profile = depression_profile();
        // The script always emits garbage, also on retry; the rectifier
        // must fall back to the nearest bank entry's reference inquiry.
        let mut policy = ScriptedPolicy::new(vec![
            ScriptedTurn::raw("low mood duration unknown sleep not mentioned", "no tags at all"),
            ScriptedTurn::diagnose(
                "after fallback",
                "enough evidence for depression now",
                DiagnosisLabel::Depression,
                None,
            ),
        ]);
        let mut sim = ProfileSim::standard(profile.clone());
        let traj = run_episode(&mut policy, &mut sim, &profile, &fixture.ctx());

        let first = &traj.turns[0];
        assert!(matches!(first.decisions[0], RectifyDecision::Retry { .. }));
        assert!(matches!(first.decisions[1], RectifyDecision::Fallback { .. }));
        match &first.action {
            Some(Action::Inquiry { question }) => {
                assert_eq!(question, "How long has this been going on?");
            }
            other => panic!("expected fallback inquiry, got {other:?}"),
        }
        assert_eq!(first.reward.pen, 0.0, "fallback pays no format penalty");
        assert_eq!(first.info_gain, 1, "fallback inquiry still earns gain");
        assert_eq!(traj.final_diagnosis, Some(DiagnosisLabel::Depression));
    }

    #[test]
    fn exhausted_ladder_accepts_with_format_penalty() {
        let mut fixture = Fixture::new();
        fixture.rectify_cfg.fallback_cap = 0;
        let profile = depression_profile();
        let mut policy = ScriptedPolicy::new(vec![ScriptedTurn::raw(
            "query text",
            "still no tags",
        )]);
        let mut sim = ProfileSim::standard(profile.clone());
        let traj = run_episode(&mut policy, &mut sim, &profile, &fixture.ctx());

        let first = &traj.turns[0];
        assert_eq!(first.action, None);
        assert!((first.reward.pen - (-0.1)).abs() <= 1e-12);
        recompute_return(&traj, &fixture.reward_cfg).unwrap();
    }

    #[test]
    fn oracle_and_constant_policies_evaluate_as_enumerated() {
        let fixture = Fixture::new();
        let mut cases = Vec::new();
        for label in DiagnosisLabel::ALL {
            for i in 0..2 {
                let mut p = depression_profile();
                p.case_id = format!("case-{label}-{i}");
                p.label = label;
                cases.push(p);
            }
        }
        let ctx = fixture.ctx();
        let sim_factory = |case: &CaseProfile| -> Box<dyn PatientSim> {
            Box::new(ProfileSim::standard(case.clone()))
        };

        let oracle_factory = |case: &CaseProfile| -> Box<dyn Policy> {
            Box::new(OraclePolicy::new(case))
        };
        let (report, trajs) = evaluate(&oracle_factory, &sim_factory, &cases, &ctx, 4).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(trajs.len(), cases.len());
        assert_eq!(trajs[0].case_id, cases[0].case_id, "order preserved");

        let constant_factory = |_: &CaseProfile| -> Box<dyn Policy> {
            Box::new(ConstantPolicy { label: DiagnosisLabel::Depression })
        };
        let (report, _) = evaluate(&constant_factory, &sim_factory, &cases, &ctx, 2).unwrap();
        assert!((report.accuracy - 0.25).abs() <= 1e-12);
        let dep = &report.per_class[&DiagnosisLabel::Depression];
        assert_eq!(dep.recall, 1.0);
        assert!((dep.precision - 0.25).abs() <= 1e-12);
    }

    #[test]
    fn episode_config_validation() {
        assert!(EpisodeConfig::default().validate().is_ok());
        let bad = EpisodeConfig { max_turns: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EpisodeConfig { support_injection_prob: 1.2, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
