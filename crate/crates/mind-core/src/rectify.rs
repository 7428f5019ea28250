//! Value-aware trajectory rectification.
//!
//! Detection is rule-based and offline: duplicates are flagged with mock
//! embeddings regardless of the configured backend, so the same turn is
//! judged identically in mock and remote runs. The per-turn escalation
//! ladder is Accept, then Retry under a stricter constraint note, then
//! PRB-guided fallback under a per-episode cap, then accept-with-penalty.

use serde::{Deserialize, Serialize};

use crate::clients::{cosine, mock_embed, EmbedClient};
use crate::patientsim::RoutingTable;
use crate::prb::{nearest_entry, PRBIndex};
use crate::rewards::PenaltyKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UtilityEventKind {
    DuplicateInquiry,
    FormatFailure,
    ZeroGainStreak,
    OffTopicDrift,
    BudgetNear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilityEvent {
    pub kind: UtilityEventKind,
    pub detail: String,
}

impl UtilityEvent {
    fn new(kind: UtilityEventKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RectifyDecision {
    Accept,
    Retry {
        constraint_note: String,
        attempt: u32,
    },
    Fallback {
        entry_id: String,
        ref_inquiry: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RectifyConfig {
    pub max_retries: u32,
    pub fallback_cap: u32,
    pub duplicate_threshold: f64,
    pub streak: u32,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            max_retries: 1,
            fallback_cap: 2,
            duplicate_threshold: 0.95,
            streak: 2,
        }
    }
}

impl RectifyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.duplicate_threshold) {
            return Err("duplicate_threshold must lie in [0, 1]".to_string());
        }
        if self.streak == 0 {
            return Err("streak must be at least 1".to_string());
        }
        Ok(())
    }
}

/// Per-episode rectification counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RectifyState {
    retries_this_turn: u32,
    fallbacks_used: u32,
}

impl RectifyState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin_turn(&mut self) {
        self.retries_this_turn = 0;
    }

    pub fn retries_this_turn(&self) -> u32 {
        self.retries_this_turn
    }

    pub fn fallbacks_used(&self) -> u32 {
        self.fallbacks_used
    }
}

/// The agent output under scrutiny, after stage-2 parsing.
#[derive(Debug, Clone, Copy)]
pub struct TurnOutput<'a> {
    /// The inquiry text; None when the action is a diagnosis or when the
    /// output failed to parse.
    pub inquiry: Option<&'a str>,
    pub format_violation_count: usize,
    pub action_is_diagnose: bool,
    /// 0-based index of the turn being produced.
    pub turn_index: u32,
    pub max_turns: u32,
}

fn duplicate_of(inquiry: &str, prior: &str, threshold: f64) -> Option<f64> {
    if inquiry == prior {
        return Some(1.0);
    }
    let a = mock_embed(inquiry);
    let b = mock_embed(prior);
    if a.is_zero() || b.is_zero() {
        return None;
    }
    let sim = cosine(&a, &b).expect("mock embeddings share dims and are non-zero");
    (sim >= threshold).then_some(sim)
}

/// Rule-checked utility signals for one candidate output, in a fixed
/// kind order. `recent_gains` holds the information gain of prior turns,
/// oldest first.
pub fn detect(
    output: &TurnOutput,
    prior_inquiries: &[String],
    recent_gains: &[u64],
    cfg: &RectifyConfig,
    routing: &RoutingTable,
) -> Vec<UtilityEvent> {
    let mut events = Vec::new();

    if output.format_violation_count > 0 {
        events.push(UtilityEvent::new(
            UtilityEventKind::FormatFailure,
            format!("{} protocol violations", output.format_violation_count),
        ));
    }

    if let Some(inquiry) = output.inquiry {
        if let Some((idx, sim)) = prior_inquiries
            .iter()
            .enumerate()
            .find_map(|(i, p)| duplicate_of(inquiry, p, cfg.duplicate_threshold).map(|s| (i, s)))
        {
            events.push(UtilityEvent::new(
                UtilityEventKind::DuplicateInquiry,
                format!("similarity {sim:.3} to inquiry {idx}"),
            ));
        }
    }

    let s = cfg.streak as usize;
    if recent_gains.len() >= s && recent_gains[recent_gains.len() - s..].iter().all(|g| *g == 0) {
        events.push(UtilityEvent::new(
            UtilityEventKind::ZeroGainStreak,
            format!("last {s} turns revealed nothing"),
        ));
    }

    if let Some(inquiry) = output.inquiry {
        if routing.route(inquiry).is_empty() {
            events.push(UtilityEvent::new(
                UtilityEventKind::OffTopicDrift,
                "proxy rule: inquiry routes to no known cue field",
            ));
        }
    }

    if output.turn_index + 1 == output.max_turns && !output.action_is_diagnose {
        events.push(UtilityEvent::new(
            UtilityEventKind::BudgetNear,
            "final turn without a diagnosis",
        ));
    }

    events
}

fn constraint_note(events: &[UtilityEvent]) -> String {
    let mut clauses = vec!["Regenerate under strict constraints".to_string()];
    for event in events {
        let clause = match event.kind {
            UtilityEventKind::DuplicateInquiry => {
                "do not repeat prior questions; target an unrevealed cue field"
            }
            UtilityEventKind::FormatFailure => {
                "emit exactly one <think> block followed by exactly one <answer> block"
            }
            UtilityEventKind::ZeroGainStreak => {
                "ask about a field the patient has not yet disclosed"
            }
            UtilityEventKind::OffTopicDrift => {
                "stay on recognized clinical topics (symptoms, duration, severity, sleep, risk, psychosis or mania, stressors, substances)"
            }
            UtilityEventKind::BudgetNear => {
                "the turn budget is ending: commit to a diagnosis now"
            }
        };
        clauses.push(clause.to_string());
    }
    format!("{}.", clauses.join(": "))
}

/// Escalation ladder for one candidate output. Counters advance inside:
/// a Retry consumes a per-turn retry, a Fallback consumes per-episode
/// budget. When the fallback rung is unreachable (cap hit, no eligible
/// entry, or an unusable query embedding) the decision degrades to
/// Accept and the caller records penalty events.
pub fn decide(
    events: &[UtilityEvent],
    state: &mut RectifyState,
    index: &PRBIndex,
    q_t: &str,
    embed: &dyn EmbedClient,
    cfg: &RectifyConfig,
) -> RectifyDecision {
    if events.is_empty() {
        return RectifyDecision::Accept;
    }
    if state.retries_this_turn < cfg.max_retries {
        state.retries_this_turn += 1;
        return RectifyDecision::Retry {
            constraint_note: constraint_note(events),
            attempt: state.retries_this_turn,
        };
    }
    if state.fallbacks_used < cfg.fallback_cap {
        let nearest = embed
            .embed(q_t)
            .ok()
            .and_then(|q| nearest_entry(index, &q).ok());
        if let Some(entry) = nearest {
            state.fallbacks_used += 1;
            return RectifyDecision::Fallback {
                entry_id: entry.entry_id.clone(),
                ref_inquiry: entry.ref_inquiry.clone(),
            };
        }
    }
    RectifyDecision::Accept
}

/// Penalty kinds charged for a turn, given its final events and decision.
/// Retry defers judgment to the regenerated output. A fallback turn
/// executes a well-formed curated inquiry, so only a missed budget still
/// costs. Each kind is charged at most once per turn.
pub fn penalty_kinds(events: &[UtilityEvent], decision: &RectifyDecision) -> Vec<PenaltyKind> {
    let mut kinds = Vec::new();
    let mut push = |k: PenaltyKind| {
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    };
    match decision {
        RectifyDecision::Retry { .. } => {}
        RectifyDecision::Fallback { .. } => {
            if events.iter().any(|e| e.kind == UtilityEventKind::BudgetNear) {
                push(PenaltyKind::Budget);
            }
        }
        RectifyDecision::Accept => {
            for event in events {
                push(match event.kind {
                    UtilityEventKind::FormatFailure => PenaltyKind::Format,
                    UtilityEventKind::DuplicateInquiry
                    | UtilityEventKind::ZeroGainStreak
                    | UtilityEventKind::OffTopicDrift => PenaltyKind::Loop,
                    UtilityEventKind::BudgetNear => PenaltyKind::Budget,
                });
            }
        }
    }
    kinds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{MockEmbed, MOCK_EMBED_DIMS};
    use crate::prb::{PRBCategory, PRBEntry, PRBMeta};
    use proptest::prelude::*;

    fn routing() -> RoutingTable {
        RoutingTable::shipped()
    }

    fn inquiry_output(inquiry: &'static str) -> TurnOutput<'static> {
        TurnOutput {
            inquiry: Some(inquiry),
            format_violation_count: 0,
            action_is_diagnose: false,
            turn_index: 3,
            max_turns: 10,
        }
    }

    fn bank_entry(id: &str, state: &str) -> PRBEntry {
        PRBEntry {
            entry_id: id.to_string(),
            state_text: state.to_string(),
            state_vec: mock_embed(state),
            support_text: format!("support {id}"),
            ref_inquiry: format!("reference inquiry {id}"),
            meta: PRBMeta {
                category: PRBCategory::General,
                quality: 4,
                hard_flags: [false; 3],
                source_note: String::new(),
            },
        }
    }

    fn bank() -> PRBIndex {
        let entries = vec![
            bank_entry("e1", "low mood duration sleep appetite"),
            bank_entry("e7", "sleep insomnia waking night rest"),
            bank_entry("e9", "substance alcohol intake history"),
        ];
        PRBIndex::new(MOCK_EMBED_DIMS, MockEmbed.fingerprint(), entries).unwrap()
    }

    #[test]
    fn exact_duplicate_fires() {
        let prior = vec!["How is your sleep?".to_string()];
        let events = detect(
            &inquiry_output("How is your sleep?"),
            &prior,
            &[],
            &RectifyConfig::default(),
            &routing(),
        );
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, UtilityEventKind::DuplicateInquiry);
    }

    #[test]
    fn near_duplicate_fires_above_threshold() {
        let q1 = "tell me more about your sleep pattern during the last weeks";
        let q2 = "tell me more about your sleep pattern during the last weeks please";
        let sim = cosine(&mock_embed(q1), &mock_embed(q2)).unwrap();
        assert!(sim >= 0.95, "construction gives {sim}");

        let prior = vec![q1.to_string()];
        let events = detect(&inquiry_output(q2), &prior, &[], &RectifyConfig::default(), &routing());
        assert!(events.iter().any(|e| e.kind == UtilityEventKind::DuplicateInquiry));

        let far = "any thoughts of self-harm or suicide lately?";
        let sim = cosine(&mock_embed(q1), &mock_embed(far)).unwrap();
        assert!(sim < 0.95, "construction gives {sim}");
        let events = detect(&inquiry_output(far), &prior, &[], &RectifyConfig::default(), &routing());
        assert!(events.is_empty());
    }

    #[test]
    fn format_failure_fires_on_violations() {
        let output = TurnOutput {
            inquiry: None,
            format_violation_count: 2,
            action_is_diagnose: false,
            turn_index: 0,
            max_turns: 10,
        };
        let events = detect(&output, &[], &[], &RectifyConfig::default(), &routing());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, UtilityEventKind::FormatFailure);
    }

    #[test]
    fn zero_gain_streak_scans_the_last_window() {
        let cfg = RectifyConfig::default();
        let fires = |gains: &[u64]| {
            detect(&inquiry_output("How is your sleep?"), &[], gains, &cfg, &routing())
                .iter()
                .any(|e| e.kind == UtilityEventKind::ZeroGainStreak)
        };
        assert!(fires(&[0, 0]));
        assert!(fires(&[3, 0, 0]));
        assert!(!fires(&[0]));
        assert!(!fires(&[1, 0]));
        assert!(!fires(&[0, 0, 5]));
    }

    #[test]
    fn off_topic_drift_is_the_unroutable_proxy() {
        let events = detect(
            &inquiry_output("What is your favorite color?"),
            &[],
            &[],
            &RectifyConfig::default(),
            &routing(),
        );
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, UtilityEventKind::OffTopicDrift);
        assert!(events[0].detail.contains("proxy"));
    }

    #[test]
    fn budget_near_fires_on_the_last_turn_only() {
        let mut output = inquiry_output("How is your sleep?");
        output.turn_index = 9;
        let events = detect(&output, &[], &[], &RectifyConfig::default(), &routing());
        assert!(events.iter().any(|e| e.kind == UtilityEventKind::BudgetNear));

        output.action_is_diagnose = true;
        output.inquiry = None;
        let events = detect(&output, &[], &[], &RectifyConfig::default(), &routing());
        assert!(events.is_empty());

        let mut mid = inquiry_output("How is your sleep?");
        mid.turn_index = 8;
        let events = detect(&mid, &[], &[], &RectifyConfig::default(), &routing());
        assert!(events.is_empty());
    }

    fn dup_event() -> Vec<UtilityEvent> {
        vec![UtilityEvent::new(UtilityEventKind::DuplicateInquiry, "test")]
    }

    #[test]
    fn ladder_escalates_retry_then_fallback_then_accept() {
        let cfg = RectifyConfig::default();
        let index = bank();
        let mut state = RectifyState::new();
        let q = "sleep insomnia waking night rest";

        state.begin_turn();
        let first = decide(&dup_event(), &mut state, &index, q, &MockEmbed, &cfg);
        match &first {
            RectifyDecision::Retry { attempt, constraint_note } => {
                assert_eq!(*attempt, 1);
                assert!(constraint_note.contains("do not repeat"));
            }
            other => panic!("expected Retry, got {other:?}"),
        }

        let second = decide(&dup_event(), &mut state, &index, q, &MockEmbed, &cfg);
        let brute_best = index
            .eligible()
            .map(|e| {
                let sim = cosine(&mock_embed(q), &e.state_vec).unwrap();
                (e.entry_id.clone(), sim)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .unwrap()
            .0;
        assert_eq!(brute_best, "e7");
        match &second {
            RectifyDecision::Fallback { entry_id, ref_inquiry } => {
                assert_eq!(entry_id, "e7");
                assert_eq!(ref_inquiry, "reference inquiry e7");
            }
            other => panic!("expected Fallback, got {other:?}"),
        }
        assert_eq!(state.fallbacks_used(), 1);

        state.begin_turn();
        decide(&dup_event(), &mut state, &index, q, &MockEmbed, &cfg);
        let fb2 = decide(&dup_event(), &mut state, &index, q, &MockEmbed, &cfg);
        assert!(matches!(fb2, RectifyDecision::Fallback { .. }));
        assert_eq!(state.fallbacks_used(), 2);

        state.begin_turn();
        decide(&dup_event(), &mut state, &index, q, &MockEmbed, &cfg);
        let exhausted = decide(&dup_event(), &mut state, &index, q, &MockEmbed, &cfg);
        assert_eq!(exhausted, RectifyDecision::Accept);
        assert_eq!(state.fallbacks_used(), 2);
    }

    #[test]
    fn empty_events_accept_and_unusable_fallback_degrades() {
        let cfg = RectifyConfig::default();
        let index = bank();
        let mut state = RectifyState::new();
        assert_eq!(
            decide(&[], &mut state, &index, "q", &MockEmbed, &cfg),
            RectifyDecision::Accept
        );

        let all_flagged = PRBIndex::new(
            MOCK_EMBED_DIMS,
            MockEmbed.fingerprint(),
            vec![{
                let mut e = bank_entry("f", "some state");
                e.meta.hard_flags = [true, false, false];
                e
            }],
        )
        .unwrap();
        let mut state = RectifyState::new();
        state.begin_turn();
        decide(&dup_event(), &mut state, &all_flagged, "some state", &MockEmbed, &cfg);
        let degraded = decide(&dup_event(), &mut state, &all_flagged, "some state", &MockEmbed, &cfg);
        assert_eq!(degraded, RectifyDecision::Accept);
        assert_eq!(state.fallbacks_used(), 0);

        let mut state = RectifyState::new();
        state.begin_turn();
        decide(&dup_event(), &mut state, &bank(), "???", &MockEmbed, &cfg);
        let zero_query = decide(&dup_event(), &mut state, &bank(), "???", &MockEmbed, &cfg);
        assert_eq!(zero_query, RectifyDecision::Accept);
    }

    #[test]
    fn penalty_mapping_dedupes_by_kind() {
        let events = vec![
            UtilityEvent::new(UtilityEventKind::FormatFailure, ""),
            UtilityEvent::new(UtilityEventKind::DuplicateInquiry, ""),
            UtilityEvent::new(UtilityEventKind::OffTopicDrift, ""),
            UtilityEvent::new(UtilityEventKind::BudgetNear, ""),
        ];
        assert_eq!(
            penalty_kinds(&events, &RectifyDecision::Accept),
            vec![PenaltyKind::Format, PenaltyKind::Loop, PenaltyKind::Budget]
        );
        assert!(penalty_kinds(
            &events,
            &RectifyDecision::Retry { constraint_note: String::new(), attempt: 1 }
        )
        .is_empty());
        assert_eq!(
            penalty_kinds(
                &events,
                &RectifyDecision::Fallback { entry_id: "e".into(), ref_inquiry: "q".into() }
            ),
            vec![PenaltyKind::Budget]
        );
        assert!(penalty_kinds(&[], &RectifyDecision::Accept).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(RectifyConfig::default().validate().is_ok());
        let bad = RectifyConfig { duplicate_threshold: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = RectifyConfig { streak: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        /// Over any per-turn event pattern, fallbacks never exceed the cap
        /// and the within-turn ladder never de-escalates.
        #[test]
        fn fallbacks_never_exceed_cap(pattern in proptest::collection::vec(any::<bool>(), 1..40)) {
            let cfg = RectifyConfig::default();
            let index = bank();
            let mut state = RectifyState::new();
            for has_events in pattern {
                state.begin_turn();
                let mut rank_prev = 0u8;
                loop {
                    let events = if has_events { dup_event() } else { Vec::new() };
                    let decision = decide(&events, &mut state, &index, "sleep rest", &MockEmbed, &cfg);
                    let rank = match &decision {
                        RectifyDecision::Retry { .. } => 1,
                        RectifyDecision::Fallback { .. } => 2,
                        RectifyDecision::Accept => 3,
                    };
                    prop_assert!(rank >= rank_prev, "ladder moved backward");
                    rank_prev = rank;
                    prop_assert!(state.fallbacks_used() <= cfg.fallback_cap);
                    if !matches!(decision, RectifyDecision::Retry { .. }) {
                        break;
                    }
                }
            }
        }
    }
}
