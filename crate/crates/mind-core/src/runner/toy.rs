//! Tabular GRPO trainer over a scripted-simulator toy: a softmax policy on
//! revealed-field states learns to ask separating questions, then diagnose.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::case::{CaseProfile, CueField, CueItem, CueStatus, DiagnosisLabel};
use crate::judge::mock_judge_rule;
use crate::patientsim::{PatientSim, ProfileSim};
use crate::rewards::{
    aggregate, grpo_advantages, info_gain_reward, penalty, process_reward, terminal_reward,
    PenaltyKind, RewardBreakdown, RewardConfig,
};
use crate::util::seeded_rng;

use super::RunnerError;

/// The 13-action menu: one ask per cue field, one commit per label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyAction {
    Ask(CueField),
    Diagnose(DiagnosisLabel),
}

const N_ACTIONS: usize = CueField::ALL.len() + DiagnosisLabel::ALL.len();

fn action_menu() -> [ToyAction; N_ACTIONS] {
    let mut menu = [ToyAction::Ask(CueField::Complaint); N_ACTIONS];
    for (i, field) in CueField::ALL.iter().enumerate() {
        menu[i] = ToyAction::Ask(*field);
    }
    for (i, label) in DiagnosisLabel::ALL.iter().enumerate() {
        menu[CueField::ALL.len() + i] = ToyAction::Diagnose(*label);
    }
    menu
}

/// A fixed phrasing per field, each routing to exactly its own field.
pub fn canonical_question(field: CueField) -> &'static str {
    match field {
        CueField::Complaint => "What is the main concern that brings you in today?",
        CueField::Symptom => "Which symptoms have you noticed day to day?",
        CueField::Duration => "How long has this been going on?",
        CueField::Severity => "How much does this interfere with your daily life?",
        CueField::Sleep => "How has your sleep been lately?",
        CueField::Risk => "Have you had any thoughts of self-harm or suicide?",
        CueField::PsychosisMania => {
            "Have you experienced hallucinations, paranoia, or manic racing thoughts?"
        }
        CueField::Stressor => "Has any particular stress or pressure been affecting you?",
        CueField::Substance => "Do you use alcohol, drugs, or other substances?",
    }
}

/// Twenty fixed profiles, five per label, separable by which of the
/// sleep / stressor / substance asks actually reveal a cue.
pub fn toy_cases() -> Vec<CaseProfile> {
    let mut cases = Vec::with_capacity(20);
    for label in DiagnosisLabel::ALL {
        for i in 0..5 {
            cases.push(toy_case(label, i));
        }
    }
    cases
}

fn toy_case(label: DiagnosisLabel, i: usize) -> CaseProfile {
    let cue = |field: CueField, value: String| CueItem {
        id: format!("q-{}", field.as_str()),
        field,
        value,
        status: CueStatus::Present,
    };
    let weeks = format!("about {} weeks", 8 + i);
    let (complaint, implicit) = match label {
        DiagnosisLabel::Depression => (
            "feeling low and exhausted",
            vec![
                cue(CueField::Symptom, "low mood and little interest".to_string()),
                cue(CueField::Duration, weeks),
                cue(CueField::Sleep, "trouble falling asleep most nights".to_string()),
            ],
        ),
        DiagnosisLabel::Anxiety => (
            "feeling on edge most days",
            vec![
                cue(CueField::Symptom, "constant worry and restlessness".to_string()),
                cue(CueField::Duration, weeks),
                cue(CueField::Stressor, "mounting deadlines around onset".to_string()),
            ],
        ),
        DiagnosisLabel::Mix => (
            "feeling low and on edge at once",
            vec![
                cue(CueField::Symptom, "low mood with constant worry".to_string()),
                cue(CueField::Duration, weeks),
                cue(CueField::Sleep, "waking far too early".to_string()),
                cue(CueField::Stressor, "a breakup around onset".to_string()),
            ],
        ),
        DiagnosisLabel::Other => (
            "feeling off and unwell",
            vec![
                cue(CueField::Duration, format!("about {} days", 10 + i)),
                cue(CueField::Substance, "heavy drinking on weekends".to_string()),
            ],
        ),
    };
    CaseProfile {
        case_id: format!("toy-{}-{i}", label.as_str().to_lowercase()),
        label,
        explicit_cues: vec![cue(CueField::Complaint, complaint.to_string())],
        implicit_cues: implicit,
    }
}

/// Tabular softmax policy; states absent from the table act uniformly.
#[derive(Debug, Clone, Default)]
pub struct ToyPolicy {
    logits: BTreeMap<String, Vec<f64>>,
}

impl ToyPolicy {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn n_states(&self) -> usize {
        self.logits.len()
    }

    fn logits_mut(&mut self, state: &str) -> &mut Vec<f64> {
        self.logits
            .entry(state.to_string())
            .or_insert_with(|| vec![0.0; N_ACTIONS])
    }

    pub fn probs(&self, state: &str) -> Vec<f64> {
        let zeros = vec![0.0; N_ACTIONS];
        let z = self.logits.get(state).unwrap_or(&zeros);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Samples an action index, returning it with its log-probability.
    /// `floor` mixes in that much uniform mass so no action's sampling
    /// probability ever reaches zero; the returned log-probability is the
    /// mixture's, for importance correction against the learned policy.
    pub fn sample(&self, state: &str, rng: &mut ChaCha8Rng, floor: f64) -> (usize, f64) {
        let uniform = floor / N_ACTIONS as f64;
        let probs: Vec<f64> = self
            .probs(state)
            .into_iter()
            .map(|p| (1.0 - floor) * p + uniform)
            .collect();
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                return (i, p.ln());
            }
        }
        let last = probs.len() - 1;
        (last, probs[last].ln())
    }

    /// The highest-probability action, lowest index on ties.
    pub fn greedy(&self, state: &str) -> usize {
        let probs = self.probs(state);
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        best
    }

    fn is_finite(&self) -> bool {
        self.logits
            .values()
            .all(|z| z.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub iters: usize,
    pub group_size: usize,
    pub lr: f64,
    pub kl_coeff: f64,
    pub clip_range: f64,
    pub entropy_coeff: f64,
    pub max_turns: u32,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            iters: 300,
            group_size: 8,
            lr: 0.05,
            kl_coeff: 0.02,
            clip_range: 0.15,
            entropy_coeff: 1e-4,
            max_turns: 6,
            seed: 0,
        }
    }
}

impl ToyTrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iters == 0 {
            return Err("iters must be at least 1".to_string());
        }
        if self.group_size < 2 {
            return Err("group_size must be at least 2 for group-relative advantages".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return Err(format!("clip_range must lie in (0, 1), got {}", self.clip_range));
        }
        if !(self.kl_coeff >= 0.0 && self.entropy_coeff >= 0.0) {
            return Err("kl_coeff and entropy_coeff must be non-negative".to_string());
        }
        if self.max_turns == 0 {
            return Err("max_turns must be at least 1".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_return: f64,
    pub accuracy: f64,
}

pub fn save_curve(path: &Path, curve: &[CurvePoint]) -> Result<(), RunnerError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "iteration,mean_return,accuracy")?;
    for p in curve {
        writeln!(out, "{},{},{}", p.iteration, p.mean_return, p.accuracy)?;
    }
    out.flush()?;
    Ok(())
}

fn state_key(revealed: &BTreeSet<CueField>, turn: u32) -> String {
    let fields: Vec<&str> = revealed.iter().map(|f| f.as_str()).collect();
    format!("{}|b{turn}", fields.join(","))
}

/// Uniform share mixed into the behavior policy during sampling. Keeps
/// every group's returns from saturating, which would zero the
/// group-relative advantages and freeze learning.
const EXPLORE_FLOOR: f64 = 0.10;

struct ToyStep {
    state: String,
    action: usize,
    old_logp: f64,
}

struct ToyEpisode {
    steps: Vec<ToyStep>,
    episode_return: f64,
    final_diagnosis: Option<DiagnosisLabel>,
}

/// Plays one toy episode with the real simulator, judge rule, and reward
/// algebra. Retrieval is absent, so the retrieval term is zero throughout.
fn play_toy_episode(
    case: &CaseProfile,
    policy: &ToyPolicy,
    rng: &mut ChaCha8Rng,
    greedy: bool,
    cfg: &ToyTrainConfig,
    reward_cfg: &RewardConfig,
) -> ToyEpisode {
    let menu = action_menu();
    let field_of: BTreeMap<&str, CueField> = case
        .explicit_cues
        .iter()
        .chain(&case.implicit_cues)
        .map(|c| (c.id.as_str(), c.field))
        .collect();

    let mut sim = ProfileSim::standard(case.clone());
    let opening = sim.opening();
    let mut revealed_ids = opening.revealed_cue_ids;
    let mut revealed_fields: BTreeSet<CueField> =
        revealed_ids.iter().filter_map(|id| field_of.get(id.as_str()).copied()).collect();
    let mut asked: BTreeSet<CueField> = BTreeSet::new();

    let mut steps = Vec::new();
    let mut breakdowns = Vec::new();
    let mut final_diagnosis = None;

    for turn in 0..cfg.max_turns {
        let state = state_key(&revealed_fields, turn);
        let (a_idx, old_logp) = if greedy {
            (policy.greedy(&state), 0.0)
        } else {
            policy.sample(&state, rng, EXPLORE_FLOOR)
        };
        steps.push(ToyStep {
            state,
            action: a_idx,
            old_logp,
        });

        let mut kinds: Vec<PenaltyKind> = Vec::new();
        let (rubric, gained, diagnosed) = match menu[a_idx] {
            ToyAction::Ask(field) => {
                if !asked.insert(field) {
                    kinds.push(PenaltyKind::Loop);
                }
                if turn + 1 == cfg.max_turns {
                    kinds.push(PenaltyKind::Budget);
                }
                let question = canonical_question(field);
                let reply = sim.respond(question);
                let mut gained = 0usize;
                for id in reply.revealed_cue_ids {
                    if let Some(f) = field_of.get(id.as_str()) {
                        revealed_fields.insert(*f);
                    }
                    if revealed_ids.insert(id) {
                        gained += 1;
                    }
                }
                let think = format!(
                    "{} still open; weighing depression anxiety mix other",
                    field.as_str()
                );
                (
                    mock_judge_rule(&think, question, &[], reward_cfg.s_max),
                    gained,
                    None,
                )
            }
            ToyAction::Diagnose(label) => {
                let think =
                    format!("evidence points to {} over the remaining labels", label.as_str().to_lowercase());
                let answer = format!("<Diagnosis>: {label}");
                (
                    mock_judge_rule(&think, &answer, &[], reward_cfg.s_max),
                    0,
                    Some(label),
                )
            }
        };

        let proc = process_reward(&rubric, reward_cfg).expect("toy dims are the defaults");
        let gain = info_gain_reward(gained, reward_cfg);
        let pen = penalty(&kinds, reward_cfg).expect("toy kinds are priced");
        breakdowns.push(RewardBreakdown::new(proc, 0.0, gain, pen));

        if let Some(label) = diagnosed {
            final_diagnosis = Some(label);
            break;
        }
    }

    let terminal = terminal_reward(final_diagnosis, case.label, reward_cfg);
    ToyEpisode {
        steps,
        episode_return: aggregate(&breakdowns, terminal, reward_cfg),
        final_diagnosis,
    }
}

fn greedy_accuracy(
    cases: &[CaseProfile],
    policy: &ToyPolicy,
    cfg: &ToyTrainConfig,
    reward_cfg: &RewardConfig,
) -> f64 {
    let mut rng = seeded_rng(cfg.seed, &["greedy-eval"]);
    let correct = cases
        .iter()
        .filter(|case| {
            let ep = play_toy_episode(case, policy, &mut rng, true, cfg, reward_cfg);
            ep.final_diagnosis == Some(case.label)
        })
        .count();
    correct as f64 / cases.len() as f64
}

/// Group-relative policy optimization with a clipped surrogate, an entropy
/// bonus, and a KL penalty toward the uniform reference. Episodes are
/// sampled with a uniform exploration floor; two passes over each
/// iteration's batch, stepping lr per sampled turn.
pub fn train_toy_grpo(
    cases: &[CaseProfile],
    policy: &mut ToyPolicy,
    cfg: &ToyTrainConfig,
    reward_cfg: &RewardConfig,
) -> Result<Vec<CurvePoint>, RunnerError> {
    cfg.validate().map_err(RunnerError::InvalidConfig)?;
    if cases.is_empty() {
        return Err(RunnerError::EmptyCases);
    }

    let n = N_ACTIONS as f64;
    let scale = cfg.lr;
    let mut curve = Vec::with_capacity(cfg.iters);

    for iter in 0..cfg.iters {
        let mut batch: Vec<(ToyStep, f64)> = Vec::new();
        let mut return_sum = 0.0;
        let mut episode_count = 0usize;

        for case in cases {
            let mut returns = Vec::with_capacity(cfg.group_size);
            let mut episodes = Vec::with_capacity(cfg.group_size);
            for g in 0..cfg.group_size {
                let mut rng = seeded_rng(
                    cfg.seed,
                    &[&case.case_id, "iter", &iter.to_string(), "g", &g.to_string()],
                );
                let ep = play_toy_episode(case, policy, &mut rng, false, cfg, reward_cfg);
                returns.push(ep.episode_return);
                episodes.push(ep);
            }
            return_sum += returns.iter().sum::<f64>();
            episode_count += returns.len();
            let advantages = grpo_advantages(&returns);
            for (ep, adv) in episodes.into_iter().zip(advantages) {
                for step in ep.steps {
                    batch.push((step, adv));
                }
            }
        }

        for _epoch in 0..2 {
            for (step, adv) in &batch {
                let probs = policy.probs(&step.state);
                let logp: Vec<f64> = probs.iter().map(|p| p.max(1e-300).ln()).collect();
                let ratio = (logp[step.action] - step.old_logp).exp();
                let clip_binding = (*adv > 0.0 && ratio > 1.0 + cfg.clip_range)
                    || (*adv < 0.0 && ratio < 1.0 - cfg.clip_range);
                let entropy = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
                let kl = probs.iter().zip(&logp).map(|(p, l)| p * (l + n.ln())).sum::<f64>();

                let z = policy.logits_mut(&step.state);
                for b in 0..N_ACTIONS {
                    let indicator = if b == step.action { 1.0 } else { 0.0 };
                    let pg = if clip_binding {
                        0.0
                    } else {
                        adv * ratio * (indicator - probs[b])
                    };
                    let ent_grad = -probs[b] * (logp[b] + entropy);
                    let kl_grad = probs[b] * (logp[b] + n.ln() - kl);
                    z[b] += scale * (pg + cfg.entropy_coeff * ent_grad - cfg.kl_coeff * kl_grad);
                }
            }
        }

        if !policy.is_finite() {
            return Err(RunnerError::NonFiniteLogits { iteration: iter });
        }

        curve.push(CurvePoint {
            iteration: iter + 1,
            mean_return: return_sum / episode_count as f64,
            accuracy: greedy_accuracy(cases, policy, cfg, reward_cfg),
        });
    }
    Ok(curve)
}
