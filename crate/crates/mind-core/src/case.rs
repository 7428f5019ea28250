//! Domain types for consultation cases: cues, profiles, actions, and
//! dialogue state shared by every other module.
//!
//! All values here are immutable after construction; updates return new
//! values so episode workers can share them freely.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("duplicate cue id {0:?} in profile")]
    DuplicateCueId(String),
    #[error("profile {0:?} has no explicit cues")]
    EmptyExplicitCues(String),
    #[error("cue {item_id:?} has unknown field {field:?}")]
    UnknownField { item_id: String, field: String },
    #[error("unknown diagnosis label {0:?}")]
    UnknownLabel(String),
    #[error("cue id {0:?} not present in the case")]
    UnknownCueId(String),
    #[error("cue {0:?} has empty {1}")]
    EmptyCueText(String, &'static str),
    #[error("case file line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The closed four-label diagnosis set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiagnosisLabel {
    Depression,
    Anxiety,
    Mix,
    Other,
}

impl DiagnosisLabel {
    pub const ALL: [DiagnosisLabel; 4] = [
        DiagnosisLabel::Depression,
        DiagnosisLabel::Anxiety,
        DiagnosisLabel::Mix,
        DiagnosisLabel::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DiagnosisLabel::Depression => "Depression",
            DiagnosisLabel::Anxiety => "Anxiety",
            DiagnosisLabel::Mix => "Mix",
            DiagnosisLabel::Other => "Other",
        }
    }
}

impl fmt::Display for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DiagnosisLabel {
    type Err = CaseError;

    // Case-sensitive on purpose: the diagnosis marker grammar is byte-exact.
    fn from_str(s: &str) -> Result<Self, CaseError> {
        match s {
            "Depression" => Ok(DiagnosisLabel::Depression),
            "Anxiety" => Ok(DiagnosisLabel::Anxiety),
            "Mix" => Ok(DiagnosisLabel::Mix),
            "Other" => Ok(DiagnosisLabel::Other),
            other => Err(CaseError::UnknownLabel(other.to_string())),
        }
    }
}

/// The closed set of clinical cue fields a profile may annotate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueField {
    Complaint,
    Symptom,
    Duration,
    Severity,
    Sleep,
    Risk,
    PsychosisMania,
    Stressor,
    Substance,
}

impl CueField {
    pub const ALL: [CueField; 9] = [
        CueField::Complaint,
        CueField::Symptom,
        CueField::Duration,
        CueField::Severity,
        CueField::Sleep,
        CueField::Risk,
        CueField::PsychosisMania,
        CueField::Stressor,
        CueField::Substance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CueField::Complaint => "complaint",
            CueField::Symptom => "symptom",
            CueField::Duration => "duration",
            CueField::Severity => "severity",
            CueField::Sleep => "sleep",
            CueField::Risk => "risk",
            CueField::PsychosisMania => "psychosis_mania",
            CueField::Stressor => "stressor",
            CueField::Substance => "substance",
        }
    }
}

impl fmt::Display for CueField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CueField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        CueField::ALL
            .iter()
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// Annotated truth status of a cue. `Unknown` is a first-class value so
/// weak inference can later upgrade it in simulator memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueStatus {
    Present,
    Absent,
    Unknown,
}

impl CueStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CueStatus::Present => "present",
            CueStatus::Absent => "absent",
            CueStatus::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueItem {
    pub id: String,
    pub field: CueField,
    pub value: String,
    pub status: CueStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseProfile {
    pub case_id: String,
    pub explicit_cues: Vec<CueItem>,
    pub implicit_cues: Vec<CueItem>,
    pub label: DiagnosisLabel,
}

impl CaseProfile {
    /// All cues, explicit first, preserving annotation order.
    pub fn all_cues(&self) -> impl Iterator<Item = &CueItem> {
        self.explicit_cues.iter().chain(self.implicit_cues.iter())
    }

    pub fn cue_by_id(&self, id: &str) -> Option<&CueItem> {
        self.all_cues().find(|c| c.id == id)
    }

    /// First cue annotating `field`, if any.
    pub fn cue_by_field(&self, field: CueField) -> Option<&CueItem> {
        self.all_cues().find(|c| c.field == field)
    }
}

/// Checks the profile invariants and returns the profile unchanged.
pub fn validate_profile(profile: CaseProfile) -> Result<CaseProfile, CaseError> {
    if profile.explicit_cues.is_empty() {
        return Err(CaseError::EmptyExplicitCues(profile.case_id));
    }
    let mut seen = BTreeSet::new();
    for cue in profile.all_cues() {
        if !seen.insert(cue.id.as_str()) {
            return Err(CaseError::DuplicateCueId(cue.id.clone()));
        }
        if cue.id.is_empty() {
            return Err(CaseError::EmptyCueText(cue.id.clone(), "id"));
        }
    }
    Ok(profile)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    Patient,
}

/// One agent action: keep asking, or commit to a diagnosis and end the
/// episode. Recommendation text is free-form and reward-irrelevant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Inquiry { question: String },
    Diagnose {
        label: DiagnosisLabel,
        recommendation: String,
    },
}

impl Action {
    pub fn is_diagnose(&self) -> bool {
        matches!(self, Action::Diagnose { .. })
    }
}

/// Dialogue state H_t: utterances so far, the set of cue ids the patient
/// has disclosed, and the count of completed agent turns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueHistory {
    pub turns: Vec<(Speaker, String)>,
    pub revealed_cue_ids: BTreeSet<String>,
    pub turn_index: u32,
}

impl DialogueHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a completed agent utterance, advancing `turn_index`.
    pub fn with_agent_turn(mut self, utterance: impl Into<String>) -> Self {
        self.turns.push((Speaker::Agent, utterance.into()));
        self.turn_index += 1;
        self
    }

    /// Appends a patient utterance. Does not advance `turn_index`.
    pub fn with_patient_turn(mut self, utterance: impl Into<String>) -> Self {
        self.turns.push((Speaker::Patient, utterance.into()));
        self
    }

    /// Unions `cue_ids` into the revealed set and reports how many were new.
    pub fn reveal<'a, I>(
        mut self,
        profile: &CaseProfile,
        cue_ids: I,
    ) -> Result<(Self, usize), CaseError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut newly = 0;
        for id in cue_ids {
            if profile.cue_by_id(id).is_none() {
                return Err(CaseError::UnknownCueId(id.to_string()));
            }
            if self.revealed_cue_ids.insert(id.to_string()) {
                newly += 1;
            }
        }
        Ok((self, newly))
    }
}

#[derive(Deserialize)]
struct RawCue {
    id: String,
    field: String,
    value: String,
    status: CueStatus,
}

#[derive(Deserialize)]
struct RawProfile {
    case_id: String,
    explicit_cues: Vec<RawCue>,
    implicit_cues: Vec<RawCue>,
    label: DiagnosisLabel,
}

fn convert_cue(raw: RawCue) -> Result<CueItem, CaseError> {
    let field = raw.field.parse().map_err(|f| CaseError::UnknownField {
        item_id: raw.id.clone(),
        field: f,
    })?;
    Ok(CueItem {
        id: raw.id,
        field,
        value: raw.value,
        status: raw.status,
    })
}

/// Loads validated profiles from a line-delimited JSON file.
pub fn load_cases(path: &Path) -> Result<Vec<CaseProfile>, CaseError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut cases = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawProfile = serde_json::from_str(&line).map_err(|source| CaseError::Parse {
            line: idx + 1,
            source,
        })?;
        let profile = CaseProfile {
            case_id: raw.case_id,
            explicit_cues: raw
                .explicit_cues
                .into_iter()
                .map(convert_cue)
                .collect::<Result<_, _>>()?,
            implicit_cues: raw
                .implicit_cues
                .into_iter()
                .map(convert_cue)
                .collect::<Result<_, _>>()?,
            label: raw.label,
        };
        cases.push(validate_profile(profile)?);
    }
    Ok(cases)
}

/// Writes profiles as line-delimited JSON, one case per line.
pub fn save_cases(path: &Path, cases: &[CaseProfile]) -> Result<(), CaseError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for case in cases {
        let json = serde_json::to_string(case).expect("profile serialization is infallible");
        writeln!(out, "{json}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn cue(id: &str, field: CueField, value: &str, status: CueStatus) -> CueItem {
        CueItem {
            id: id.to_string(),
            field,
            value: value.to_string(),
            status,
        }
    }

    fn sample_profile() -> CaseProfile {
        CaseProfile {
            case_id: "case-001".into(),
            explicit_cues: vec![
                cue("c1", CueField::Complaint, "low mood", CueStatus::Present),
                cue("c2", CueField::Symptom, "anhedonia", CueStatus::Present),
                cue("c3", CueField::Duration, "12 weeks", CueStatus::Present),
            ],
            implicit_cues: vec![
                cue("c4", CueField::Sleep, "early waking", CueStatus::Present),
                cue("c5", CueField::Risk, "passive ideation", CueStatus::Absent),
                cue("c6", CueField::PsychosisMania, "mania episodes", CueStatus::Absent),
                cue("c7", CueField::Stressor, "job loss", CueStatus::Unknown),
                cue("c8", CueField::Substance, "alcohol use", CueStatus::Absent),
            ],
            label: DiagnosisLabel::Depression,
        }
    }

    #[test]
    fn valid_profile_accepted() {
        let p = sample_profile();
        assert_eq!(p.explicit_cues.len(), 3);
        assert_eq!(p.implicit_cues.len(), 5);
        let validated = validate_profile(p.clone()).unwrap();
        assert_eq!(validated, p);
    }

    #[test]
    fn duplicate_id_across_lists_rejected() {
        let mut p = sample_profile();
        p.implicit_cues.push(cue("c1", CueField::Severity, "x", CueStatus::Unknown));
        match validate_profile(p) {
            Err(CaseError::DuplicateCueId(id)) => assert_eq!(id, "c1"),
            other => panic!("expected DuplicateCueId, got {other:?}"),
        }
    }

    #[test]
    fn empty_explicit_cues_rejected() {
        let mut p = sample_profile();
        p.explicit_cues.clear();
        assert!(matches!(
            validate_profile(p),
            Err(CaseError::EmptyExplicitCues(_))
        ));
    }

    #[test]
    fn reveal_counts_new_ids_only() {
        let p = sample_profile();
        let h = DialogueHistory::new();
        let (h, n) = h.reveal(&p, ["c1", "c2"]).unwrap();
        assert_eq!(n, 2);
        let (h, n) = h.reveal(&p, ["c1"]).unwrap();
        assert_eq!(n, 0);
        let (h, n) = h.reveal(&p, ["c1", "c3"]).unwrap();
        assert_eq!(n, 1);
        assert_eq!(h.revealed_cue_ids.len(), 3);
    }

    #[test]
    fn reveal_rejects_foreign_ids() {
        let p = sample_profile();
        let h = DialogueHistory::new();
        assert!(matches!(
            h.reveal(&p, ["zz"]),
            Err(CaseError::UnknownCueId(id)) if id == "zz"
        ));
    }

    #[test]
    fn reveal_conserves_counts_over_random_sequences() {
        let p = sample_profile();
        let ids: Vec<&str> = p.all_cues().map(|c| c.id.as_str()).collect();
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let mut h = DialogueHistory::new();
            let mut total = 0;
            for _ in 0..rng.gen_range(0..12) {
                let mut batch = ids.clone();
                batch.shuffle(&mut rng);
                batch.truncate(rng.gen_range(0..=ids.len()));
                let (next, n) = h.reveal(&p, batch.iter().copied()).unwrap();
                h = next;
                total += n;
            }
            assert_eq!(total, h.revealed_cue_ids.len());
        }
    }

    #[test]
    fn turn_index_counts_agent_turns_only() {
        let h = DialogueHistory::new();
        assert_eq!(h.turn_index, 0);
        let h = h.with_agent_turn("q1");
        assert_eq!(h.turn_index, 1);
        let h = h.with_patient_turn("a1");
        assert_eq!(h.turn_index, 1);
        let h = h.with_agent_turn("q2");
        assert_eq!(h.turn_index, 2);
    }

    #[test]
    fn case_file_round_trip_uses_exact_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cases.jsonl");
        let cases = vec![sample_profile()];
        save_cases(&path, &cases).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        for key in [
            "\"case_id\"",
            "\"explicit_cues\"",
            "\"implicit_cues\"",
            "\"label\"",
            "\"id\"",
            "\"field\"",
            "\"value\"",
            "\"status\"",
            "\"psychosis_mania\"",
        ] {
            assert!(text.contains(key), "missing {key} in {text}");
        }

        let loaded = load_cases(&path).unwrap();
        assert_eq!(loaded, cases);
    }

    #[test]
    fn loader_names_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"case_id":"x","explicit_cues":[{"id":"c1","field":"mood_ring","value":"v","status":"present"}],"implicit_cues":[],"label":"Other"}"#,
        )
        .unwrap();
        match load_cases(&path) {
            Err(CaseError::UnknownField { item_id, field }) => {
                assert_eq!(item_id, "c1");
                assert_eq!(field, "mood_ring");
            }
            other => panic!("expected UnknownField, got {other:?}"),
        }
    }

    #[test]
    fn label_parsing_is_case_sensitive() {
        assert!(DiagnosisLabel::from_str("Depression").is_ok());
        assert!(DiagnosisLabel::from_str("depression").is_err());
        assert!(DiagnosisLabel::from_str("MIX").is_err());
    }
}
