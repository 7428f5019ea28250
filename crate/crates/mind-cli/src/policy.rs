//! The built-in deterministic doctor policy and the interactive
//! line-oriented patient loop.

use std::io::{BufRead, Write};

use mind_core::case::{Action, CueField, DiagnosisLabel};
use mind_core::clients::ClientError;
use mind_core::patientsim::{PatientReply, PatientSim, NEUTRAL_UTTERANCE};
use mind_core::protocol::{render_stage1, render_stage2, Stage1Output, Stage2Output};
use mind_core::runner::{canonical_question, Policy, StageView};

/// Inquiry order of the scripted ladder: the label-separating fields
/// first, then severity color.
const LADDER: [CueField; 8] = [
    CueField::Duration,
    CueField::Sleep,
    CueField::Stressor,
    CueField::Substance,
    CueField::Risk,
    CueField::PsychosisMania,
    CueField::Symptom,
    CueField::Severity,
];

/// Deterministic demo doctor: walks the canonical question ladder, then
/// diagnoses from keyword evidence in the patient's lines. A rectification
/// constraint advances the ladder instead of repeating a question.
pub struct ScriptedLadder {
    cursor: usize,
}

impl ScriptedLadder {
    pub fn new() -> Self {
        Self { cursor: 0 }
    }
}

impl Default for ScriptedLadder {
    fn default() -> Self {
        Self::new()
    }
}

fn patient_lines(history_text: &str) -> impl Iterator<Item = &str> {
    history_text
        .lines()
        .filter_map(|l| l.strip_prefix("Patient: "))
}

const NEGATORS: [&str; 3] = ["not", "no", "never"];

/// A token counts only when none of the three preceding words negate it,
/// so "never stops" after "pressure" does not erase the stressor.
fn affirms(line: &str, tokens: &[&str]) -> bool {
    let lower = line.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .collect();
    words.iter().enumerate().any(|(i, w)| {
        tokens.iter().any(|t| w.contains(t))
            && !words[i.saturating_sub(3)..i]
                .iter()
                .any(|p| NEGATORS.contains(p))
    })
}

/// Keyword differential over what the patient volunteered: disturbed
/// sleep reads depressive, live stressors read anxious, both read mixed,
/// neither (or substance-led) reads other.
fn diagnose_from_history(history_text: &str) -> DiagnosisLabel {
    let mut sleep = false;
    let mut stress = false;
    let mut substance = false;
    for line in patient_lines(history_text) {
        sleep |= affirms(line, &["sleep", "insomnia", "awake"]);
        stress |= affirms(line, &["stress", "pressure", "deadline", "worry", "overwhelmed"]);
        substance |= affirms(line, &["alcohol", "drink", "substance"]);
    }
    match (sleep, stress) {
        (true, true) => DiagnosisLabel::Mix,
        (true, false) => DiagnosisLabel::Depression,
        (false, true) => DiagnosisLabel::Anxiety,
        (false, false) => {
            let _ = substance;
            DiagnosisLabel::Other
        }
    }
}

impl Policy for ScriptedLadder {
    fn stage1(&mut self, view: &StageView) -> Result<String, ClientError> {
        let latest = patient_lines(view.history_text)
            .last()
            .unwrap_or("initial presentation");
        let focus = LADDER
            .get(self.cursor)
            .map(|f| f.as_str())
            .unwrap_or("diagnosis");
        Ok(render_stage1(&Stage1Output {
            think: Some(
                "Reviewing what the patient has shared and picking the next screening focus."
                    .to_string(),
            ),
            rag_query: format!("{latest} | next focus: {focus}"),
        }))
    }

    fn stage2(
        &mut self,
        view: &StageView,
        _supports: &[String],
        _constraint: Option<&str>,
    ) -> Result<String, ClientError> {
        let step = self.cursor;
        self.cursor += 1;
        let must_commit = view.turn_index + 1 >= view.max_turns;
        let out = if step < LADDER.len() && !must_commit {
            let field = LADDER[step];
            Stage2Output {
                think: format!("The {field} picture is still open; screening it next."),
                action: Action::Inquiry {
                    question: canonical_question(field).to_string(),
                },
            }
        } else {
            let label = diagnose_from_history(view.history_text);
            Stage2Output {
                think: format!(
                    "Volunteered evidence points to {label} over the remaining labels."
                ),
                action: Action::Diagnose {
                    label,
                    recommendation: "Schedule a structured follow-up assessment.".to_string(),
                },
            }
        };
        Ok(render_stage2(&out))
    }
}

/// Interactive patient: prints each doctor question and reads your answer
/// line. Empty lines and EOF fall back to the neutral utterance.
pub struct HumanSim<R, W> {
    input: R,
    output: W,
}

impl HumanSim<std::io::BufReader<std::io::Stdin>, std::io::Stdout> {
    pub fn stdio() -> Self {
        Self {
            input: std::io::BufReader::new(std::io::stdin()),
            output: std::io::stdout(),
        }
    }
}

impl<R: BufRead, W: Write> HumanSim<R, W> {
    pub fn over(input: R, output: W) -> Self {
        Self { input, output }
    }

    fn read_reply(&mut self, prompt: &str) -> PatientReply {
        let _ = write!(self.output, "{prompt}");
        let _ = self.output.flush();
        let mut line = String::new();
        let utterance = match self.input.read_line(&mut line) {
            Ok(n) if n > 0 && !line.trim().is_empty() => line.trim().to_string(),
            _ => NEUTRAL_UTTERANCE.to_string(),
        };
        PatientReply {
            utterance,
            revealed_cue_ids: Default::default(),
        }
    }
}

impl<R: BufRead, W: Write> PatientSim for HumanSim<R, W> {
    fn opening(&mut self) -> PatientReply {
        self.read_reply("[patient] opening statement> ")
    }

    fn respond(&mut self, question: &str) -> PatientReply {
        let _ = writeln!(self.output, "Doctor: {question}");
        self.read_reply("[patient]> ")
    }
}
