//! Profile-driven patient simulators.
//!
//! PsySim-Std answers with fixed canonical templates; PsySim-Adapt picks a
//! seeded paraphrase per cue while embedding the same factual content.
//! Both route questions to cue fields through a keyword table, answer
//! annotated cues from the profile, fall back to clinical priors via weak
//! inference for everything else, and keep every asserted status frozen in
//! cross-turn memory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::case::{CaseProfile, CueField, CueStatus, DiagnosisLabel};
use crate::util::{seeded_rng, token_matches, tokens};

pub const ROUTING_ASSET: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../assets/routing-v1.jsonl"
));
pub const PRIORS_ASSET: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../assets/priors-v1.jsonl"
));

/// Utterance for a question no keyword rule recognizes. Discloses nothing.
pub const NEUTRAL_UTTERANCE: &str =
    "I'm not sure what you mean; could you ask me more specifically?";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("no prior for ({label}, {field})")]
    MissingPrior {
        label: DiagnosisLabel,
        field: CueField,
    },
    #[error("routing table: {reason}")]
    InvalidRouting { reason: String },
    #[error("prior table: {reason}")]
    InvalidPriors { reason: String },
    #[error("asset line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-episode dialogue memory. Once a cue id is asserted its status is
/// frozen for the rest of the episode.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimMemory {
    asserted: BTreeMap<String, (CueStatus, String)>,
    inferred: BTreeSet<String>,
}

impl SimMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn status_of(&self, cue_id: &str) -> Option<CueStatus> {
        self.asserted.get(cue_id).map(|(s, _)| *s)
    }

    pub fn phrasing_of(&self, cue_id: &str) -> Option<&str> {
        self.asserted
            .get(cue_id)
            .map(|(_, p)| p.as_str())
            .filter(|p| !p.is_empty())
    }

    pub fn is_inferred(&self, cue_id: &str) -> bool {
        self.inferred.contains(cue_id)
    }

    pub fn asserted_len(&self) -> usize {
        self.asserted.len()
    }

    /// Returns whether the id was newly asserted. Re-asserting with a
    /// different status is a caller bug and panics; an empty stored
    /// phrasing may be filled in once.
    fn assert_cue(&mut self, cue_id: &str, status: CueStatus, phrasing: String) -> bool {
        match self.asserted.get_mut(cue_id) {
            Some((existing, stored)) => {
                assert_eq!(
                    *existing, status,
                    "memory invariant: status of {cue_id:?} may not change"
                );
                if stored.is_empty() {
                    *stored = phrasing;
                }
                false
            }
            None => {
                self.asserted.insert(cue_id.to_string(), (status, phrasing));
                true
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariationLevel {
    Mild,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimMode {
    Std,
    Adapt { seed: u64, level: VariationLevel },
}

/// Total map (label, field) -> default status for unannotated items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PriorTable {
    map: BTreeMap<(DiagnosisLabel, CueField), CueStatus>,
}

#[derive(Deserialize)]
struct PriorLine {
    label: DiagnosisLabel,
    field: CueField,
    status: CueStatus,
}

impl PriorTable {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (DiagnosisLabel, CueField, CueStatus)>,
    ) -> Result<Self, SimError> {
        let mut map = BTreeMap::new();
        for (label, field, status) in entries {
            if map.insert((label, field), status).is_some() {
                return Err(SimError::InvalidPriors {
                    reason: format!("duplicate entry for ({label}, {field})"),
                });
            }
        }
        for label in DiagnosisLabel::ALL {
            for field in CueField::ALL {
                if !map.contains_key(&(label, field)) {
                    return Err(SimError::InvalidPriors {
                        reason: format!("missing entry for ({label}, {field})"),
                    });
                }
            }
        }
        Ok(Self { map })
    }

    /// The table shipped with the crate.
    pub fn shipped() -> Self {
        parse_priors(PRIORS_ASSET).expect("shipped prior table is valid and total")
    }

    pub fn get(&self, label: DiagnosisLabel, field: CueField) -> Option<CueStatus> {
        self.map.get(&(label, field)).copied()
    }

    /// Overrides one pair; totality is preserved by construction.
    pub fn set(&mut self, label: DiagnosisLabel, field: CueField, status: CueStatus) {
        self.map.insert((label, field), status);
    }
}

fn parse_priors(text: &str) -> Result<PriorTable, SimError> {
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PriorLine = serde_json::from_str(line).map_err(|e| SimError::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        entries.push((p.label, p.field, p.status));
    }
    PriorTable::from_entries(entries)
}

pub fn load_priors(path: &Path) -> Result<PriorTable, SimError> {
    parse_priors(&std::fs::read_to_string(path)?)
}

/// Keyword routing from question text to cue fields. Keywords are stored
/// as token phrases; matching tolerates a trailing plural s per token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTable {
    rules: BTreeMap<CueField, Vec<Vec<String>>>,
}

#[derive(Deserialize)]
struct RoutingLine {
    field: CueField,
    keywords: Vec<String>,
}

impl RoutingTable {
    pub fn from_entries(
        entries: impl IntoIterator<Item = (CueField, Vec<String>)>,
    ) -> Result<Self, SimError> {
        let mut rules: BTreeMap<CueField, Vec<Vec<String>>> = BTreeMap::new();
        for (field, keywords) in entries {
            if rules.contains_key(&field) {
                return Err(SimError::InvalidRouting {
                    reason: format!("duplicate rule for {field}"),
                });
            }
            let phrases: Vec<Vec<String>> = keywords.iter().map(|k| tokens(k)).collect();
            if phrases.is_empty() || phrases.iter().any(Vec::is_empty) {
                return Err(SimError::InvalidRouting {
                    reason: format!("empty keyword for {field}"),
                });
            }
            rules.insert(field, phrases);
        }
        for field in CueField::ALL {
            if !rules.contains_key(&field) {
                return Err(SimError::InvalidRouting {
                    reason: format!("no rule for {field}"),
                });
            }
        }
        Ok(Self { rules })
    }

    /// The table shipped with the crate.
    pub fn shipped() -> Self {
        parse_routing(ROUTING_ASSET).expect("shipped routing table is valid")
    }

    /// All fields whose keyword list matches the question.
    pub fn route(&self, question: &str) -> BTreeSet<CueField> {
        let q = tokens(question);
        self.rules
            .iter()
            .filter(|(_, phrases)| phrases.iter().any(|p| phrase_matches(&q, p)))
            .map(|(field, _)| *field)
            .collect()
    }
}

fn phrase_matches(question: &[String], phrase: &[String]) -> bool {
    question
        .windows(phrase.len())
        .any(|w| w.iter().zip(phrase).all(|(t, k)| token_matches(t, k)))
}

fn parse_routing(text: &str) -> Result<RoutingTable, SimError> {
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: RoutingLine = serde_json::from_str(line).map_err(|e| SimError::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        entries.push((r.field, r.keywords));
    }
    RoutingTable::from_entries(entries)
}

pub fn load_routing(path: &Path) -> Result<RoutingTable, SimError> {
    parse_routing(&std::fs::read_to_string(path)?)
}

/// Looks up the prior for an unannotated field and freezes it into
/// memory under the synthetic id `inferred:<field>`. A second call for
/// the same field is a memory hit and changes nothing.
pub fn weak_infer(
    field: CueField,
    label: DiagnosisLabel,
    priors: &PriorTable,
    memory: &mut SimMemory,
) -> Result<CueStatus, SimError> {
    let cue_id = inferred_id(field);
    if let Some(status) = memory.status_of(&cue_id) {
        return Ok(status);
    }
    let status = priors
        .get(label, field)
        .ok_or(SimError::MissingPrior { label, field })?;
    memory.assert_cue(&cue_id, status, String::new());
    memory.inferred.insert(cue_id);
    Ok(status)
}

pub fn inferred_id(field: CueField) -> String {
    format!("inferred:{field}")
}

/// Conversational stand-in for an annotated value when a field's status
/// comes from weak inference.
fn field_topic(field: CueField) -> &'static str {
    match field {
        CueField::Complaint => "a specific complaint",
        CueField::Symptom => "other symptoms",
        CueField::Duration => "how long it has lasted",
        CueField::Severity => "how severe it is",
        CueField::Sleep => "sleep problems",
        CueField::Risk => "thoughts of self-harm",
        CueField::PsychosisMania => "unusual energy or strange experiences",
        CueField::Stressor => "particular stress",
        CueField::Substance => "substance use",
    }
}

const PRESENT_TEMPLATES: [&str; 3] = ["Yes, {v}.", "Honestly, yes: {v}.", "I would say yes, {v}."];
const ABSENT_TEMPLATES: [&str; 3] = [
    "No, I have not had {v}.",
    "No, nothing like {v}.",
    "I do not think so; no {v}.",
];
const UNKNOWN_TEMPLATES: [&str; 3] = [
    "I'm not sure about {v}.",
    "Hard to say about {v}.",
    "I cannot really tell about {v}.",
];

fn templates_for(status: CueStatus) -> &'static [&'static str; 3] {
    match status {
        CueStatus::Present => &PRESENT_TEMPLATES,
        CueStatus::Absent => &ABSENT_TEMPLATES,
        CueStatus::Unknown => &UNKNOWN_TEMPLATES,
    }
}

/// Renders one fact. Std always uses template 0; Adapt draws the template
/// from an rng keyed by (seed, case, cue), so the paraphrase for a cue is
/// independent of when in the episode it is first asked.
fn render_fact(status: CueStatus, value: &str, mode: &SimMode, case_id: &str, cue_id: &str) -> String {
    let options = templates_for(status);
    let template = match mode {
        SimMode::Std => options[0],
        SimMode::Adapt { seed, level: VariationLevel::Mild } => {
            let mut rng = seeded_rng(*seed, &[case_id, cue_id, "paraphrase"]);
            options[rng.gen_range(0..options.len())]
        }
    };
    template.replace("{v}", value)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientReply {
    pub utterance: String,
    pub revealed_cue_ids: BTreeSet<String>,
}

/// A patient backend the episode runner can drive.
pub trait PatientSim {
    /// The unprompted initial report disclosing the explicit cues.
    fn opening(&mut self) -> PatientReply;
    fn respond(&mut self, question: &str) -> PatientReply;
}

/// The scripted simulator: one instance per episode.
#[derive(Debug, Clone)]
pub struct ProfileSim {
    profile: CaseProfile,
    routing: RoutingTable,
    priors: PriorTable,
    mode: SimMode,
    memory: SimMemory,
}

impl ProfileSim {
    pub fn new(
        profile: CaseProfile,
        routing: RoutingTable,
        priors: PriorTable,
        mode: SimMode,
    ) -> Self {
        Self {
            profile,
            routing,
            priors,
            mode,
            memory: SimMemory::new(),
        }
    }

    /// PsySim-Std over the shipped routing and prior tables.
    pub fn standard(profile: CaseProfile) -> Self {
        Self::new(profile, RoutingTable::shipped(), PriorTable::shipped(), SimMode::Std)
    }

    /// PsySim-Adapt over the shipped tables.
    pub fn adaptive(profile: CaseProfile, seed: u64) -> Self {
        Self::new(
            profile,
            RoutingTable::shipped(),
            PriorTable::shipped(),
            SimMode::Adapt { seed, level: VariationLevel::Mild },
        )
    }

    pub fn profile(&self) -> &CaseProfile {
        &self.profile
    }

    pub fn memory(&self) -> &SimMemory {
        &self.memory
    }

    /// Answers one annotated cue, asserting it on first mention.
    fn speak_cue(
        &mut self,
        cue_id: &str,
        status: CueStatus,
        value: &str,
        revealed: &mut BTreeSet<String>,
        parts: &mut Vec<String>,
    ) {
        if let Some(stored) = self.memory.phrasing_of(cue_id) {
            parts.push(stored.to_string());
            return;
        }
        let phrasing = render_fact(status, value, &self.mode, &self.profile.case_id, cue_id);
        if self.memory.assert_cue(cue_id, status, phrasing.clone()) {
            revealed.insert(cue_id.to_string());
        }
        parts.push(phrasing);
    }

    /// Answers an unannotated field from the prior table. Inferred facts
    /// never appear in the revealed set: they carry no profile cue id.
    fn speak_inferred(&mut self, field: CueField, parts: &mut Vec<String>) {
        let cue_id = inferred_id(field);
        if let Some(stored) = self.memory.phrasing_of(&cue_id) {
            parts.push(stored.to_string());
            return;
        }
        let status = weak_infer(field, self.profile.label, &self.priors, &mut self.memory)
            .expect("PriorTable invariant: total over all (label, field) pairs");
        let phrasing = render_fact(
            status,
            field_topic(field),
            &self.mode,
            &self.profile.case_id,
            &cue_id,
        );
        self.memory.assert_cue(&cue_id, status, phrasing.clone());
        parts.push(phrasing);
    }
}

impl PatientSim for ProfileSim {
    fn opening(&mut self) -> PatientReply {
        let mut revealed = BTreeSet::new();
        let mut parts = Vec::new();
        let cues: Vec<_> = self
            .profile
            .explicit_cues
            .iter()
            .map(|c| (c.id.clone(), c.status, c.value.clone()))
            .collect();
        for (id, status, value) in cues {
            self.speak_cue(&id, status, &value, &mut revealed, &mut parts);
        }
        PatientReply {
            utterance: parts.join(" "),
            revealed_cue_ids: revealed,
        }
    }

    fn respond(&mut self, question: &str) -> PatientReply {
        assert!(!question.trim().is_empty(), "respond requires a non-empty question");
        let fields = self.routing.route(question);
        if fields.is_empty() {
            return PatientReply {
                utterance: NEUTRAL_UTTERANCE.to_string(),
                revealed_cue_ids: BTreeSet::new(),
            };
        }
        let mut revealed = BTreeSet::new();
        let mut parts = Vec::new();
        for field in fields {
            let cues: Vec<_> = self
                .profile
                .all_cues()
                .filter(|c| c.field == field)
                .map(|c| (c.id.clone(), c.status, c.value.clone()))
                .collect();
            if cues.is_empty() {
                self.speak_inferred(field, &mut parts);
            } else {
                for (id, status, value) in cues {
                    self.speak_cue(&id, status, &value, &mut revealed, &mut parts);
                }
            }
        }
        PatientReply {
            utterance: parts.join(" "),
            revealed_cue_ids: revealed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub question: String,
    pub utterance: String,
    pub revealed: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub fc_violations: u32,
    pub completeness: f64,
    pub overshare: u32,
}

/// Recovers (status, value) fragments from a simulator utterance by
/// matching the closed template vocabulary.
pub fn parse_fragments(utterance: &str) -> Vec<(CueStatus, String)> {
    let mut out = Vec::new();
    for piece in utterance.split('.') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let statuses = [CueStatus::Present, CueStatus::Absent, CueStatus::Unknown];
        let parsed = statuses.iter().find_map(|status| {
            templates_for(*status).iter().find_map(|t| {
                let prefix = &t[..t.find("{v}").expect("template has a value slot")];
                piece
                    .strip_prefix(prefix.trim_end_matches(|c| c == '.'))
                    .map(|rest| (*status, rest.trim().to_lowercase()))
            })
        });
        if let Some(found) = parsed {
            out.push(found);
        }
    }
    out
}

/// Desk-scale consistency audit over a transcript this module produced.
///
/// fc_violations counts status flips for the same spoken value across the
/// whole transcript; completeness is the fraction of questions that got a
/// factual (non-neutral) answer; overshare counts cue ids revealed on a
/// turn whose question does not route to their field.
pub fn audit_consistency(
    transcript: &[TranscriptTurn],
    routing: &RoutingTable,
    profile: &CaseProfile,
) -> ConsistencyReport {
    let mut fc_violations = 0u32;
    let mut answered = 0usize;
    let mut overshare = 0u32;
    let mut seen: BTreeMap<String, CueStatus> = BTreeMap::new();

    for turn in transcript {
        let fragments = parse_fragments(&turn.utterance);
        if !fragments.is_empty() {
            answered += 1;
        }
        for (status, value) in fragments {
            match seen.get_mut(&value) {
                Some(prev) if *prev != status => {
                    fc_violations += 1;
                    *prev = status;
                }
                Some(_) => {}
                None => {
                    seen.insert(value, status);
                }
            }
        }
        let asked_fields = routing.route(&turn.question);
        for cue_id in &turn.revealed {
            let on_topic = profile
                .cue_by_id(cue_id)
                .is_some_and(|c| asked_fields.contains(&c.field));
            if !on_topic {
                overshare += 1;
            }
        }
    }

    let completeness = if transcript.is_empty() {
        1.0
    } else {
        answered as f64 / transcript.len() as f64
    };
    ConsistencyReport {
        fc_violations,
        completeness,
        overshare,
    }
}
