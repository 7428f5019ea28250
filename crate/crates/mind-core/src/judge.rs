//! Rubric scoring of reasoning traces, support-faithfulness auditing, and
//! the deterministic mock judge used by all offline tests.
//!
//! Judge replies are plain text under fixed grammars. Anything that fails
//! to parse, or escapes its score range, quarantines to zeros rather than
//! aborting an episode.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clients::{ChatClient, ChatTurnMsg, ClientError, GenParams};
use crate::util::{fill_template, fnv1a_64_str, token_matches, tokens};

pub const RUBRIC_PROMPT: &str =
    include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../prompts/rubric-v1.txt"));
pub const FAITHFULNESS_PROMPT: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../prompts/faithfulness-v1.txt"
));

/// Judges decode deterministically.
const JUDGE_GEN: GenParams = GenParams {
    temperature: 0.0,
    top_p: 1.0,
    max_len: 512,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RubricDim {
    Sym,
    Diff,
    Dec,
    Emp,
    Nat,
}

impl RubricDim {
    pub const ALL: [RubricDim; 5] = [
        RubricDim::Sym,
        RubricDim::Diff,
        RubricDim::Dec,
        RubricDim::Emp,
        RubricDim::Nat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RubricDim::Sym => "sym",
            RubricDim::Diff => "diff",
            RubricDim::Dec => "dec",
            RubricDim::Emp => "emp",
            RubricDim::Nat => "nat",
        }
    }
}

/// Five per-turn process scores, each in {0, …, s_max}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricScores {
    pub sym: u8,
    pub diff: u8,
    pub dec: u8,
    pub emp: u8,
    pub nat: u8,
    pub s_max: u8,
}

impl RubricScores {
    pub fn zeros(s_max: u8) -> Self {
        Self {
            sym: 0,
            diff: 0,
            dec: 0,
            emp: 0,
            nat: 0,
            s_max,
        }
    }

    pub fn get(&self, dim: RubricDim) -> u8 {
        match dim {
            RubricDim::Sym => self.sym,
            RubricDim::Diff => self.diff,
            RubricDim::Dec => self.dec,
            RubricDim::Emp => self.emp,
            RubricDim::Nat => self.nat,
        }
    }

    pub fn in_range(&self) -> bool {
        RubricDim::ALL.iter().all(|d| self.get(*d) <= self.s_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessScores {
    pub fc: f64,
    pub sg: f64,
    pub pf: f64,
    pub avg: f64,
}

impl FaithfulnessScores {
    pub fn new(fc: f64, sg: f64, pf: f64) -> Self {
        Self {
            fc,
            sg,
            pf,
            avg: (fc + sg + pf) / 3.0,
        }
    }

    pub fn zeros() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

/// Parses `sym=3 diff=4 dec=5 emp=4 nat=4`. None when any value is
/// missing, non-integer, or above `s_max`.
pub fn parse_rubric_reply(reply: &str, s_max: u8) -> Option<RubricScores> {
    let mut vals = [0u8; 5];
    for (i, dim) in RubricDim::ALL.iter().enumerate() {
        let key = format!("{}=", dim.as_str());
        let at = reply.find(&key)? + key.len();
        let digits: String = reply[at..].chars().take_while(char::is_ascii_digit).collect();
        let v: u8 = digits.parse().ok()?;
        if v > s_max {
            return None;
        }
        vals[i] = v;
    }
    Some(RubricScores {
        sym: vals[0],
        diff: vals[1],
        dec: vals[2],
        emp: vals[3],
        nat: vals[4],
        s_max,
    })
}

/// Parses `FC=8.6 SG=8.8 PF=8.3`; every value must lie in [0, 10].
pub fn parse_faithfulness_reply(reply: &str) -> Option<FaithfulnessScores> {
    let mut vals = [0.0f64; 3];
    for (i, key) in ["FC=", "SG=", "PF="].iter().enumerate() {
        let at = reply.find(key)? + key.len();
        let num: String = reply[at..]
            .chars()
            .take_while(|c| c.is_ascii_digit() || *c == '.')
            .collect();
        let v: f64 = num.parse().ok()?;
        if !(0.0..=10.0).contains(&v) {
            return None;
        }
        vals[i] = v;
    }
    Some(FaithfulnessScores::new(vals[0], vals[1], vals[2]))
}

/// Scores one turn's reasoning trace and response against the rubric.
/// Unparseable judge replies quarantine to all zeros.
pub fn score_turn(
    history_summary: &str,
    think: &str,
    answer: &str,
    supports: &[String],
    chat: &dyn ChatClient,
    s_max: u8,
) -> Result<RubricScores, ClientError> {
    let prompt = fill_template(
        RUBRIC_PROMPT,
        &[
            ("history", history_summary),
            ("think", think),
            ("answer", answer),
            ("supports", &supports.join("\n")),
            ("s_max", &s_max.to_string()),
        ],
    );
    let messages = [ChatTurnMsg::user(prompt)];
    let key = format!("rubric-{:016x}", fnv1a_64_str(&messages[0].content));
    let reply = chat.chat(&messages, &JUDGE_GEN, &key)?;
    Ok(parse_rubric_reply(&reply, s_max).unwrap_or_else(|| RubricScores::zeros(s_max)))
}

/// Audits a finished dialogue against its injected supports.
pub fn score_support_faithfulness(
    dialogue: &str,
    supports: &[String],
    chat: &dyn ChatClient,
) -> Result<FaithfulnessScores, ClientError> {
    if supports.is_empty() {
        return Err(ClientError::InvalidRequest(
            "faithfulness scoring needs at least one support".into(),
        ));
    }
    let prompt = fill_template(
        FAITHFULNESS_PROMPT,
        &[("dialogue", dialogue), ("supports", &supports.join("\n"))],
    );
    let messages = [ChatTurnMsg::user(prompt)];
    let key = format!("faith-{:016x}", fnv1a_64_str(&messages[0].content));
    let reply = chat.chat(&messages, &JUDGE_GEN, &key)?;
    Ok(parse_faithfulness_reply(&reply).unwrap_or_else(FaithfulnessScores::zeros))
}

const FIELD_TOKENS: [(&str, &[&str]); 9] = [
    ("complaint", &["complaint"]),
    ("symptom", &["symptom"]),
    ("duration", &["duration"]),
    ("severity", &["severity"]),
    ("sleep", &["sleep"]),
    ("risk", &["risk"]),
    ("psychosis_mania", &["psychosis", "mania"]),
    ("stressor", &["stressor"]),
    ("substance", &["substance"]),
];

const LABEL_TOKENS: [&str; 4] = ["depression", "anxiety", "mix", "other"];

const EMPATHY_PHRASES: [&str; 6] = [
    "thank you",
    "i understand",
    "i'm sorry",
    "that sounds",
    "i hear you",
    "it must be",
];

const NATURALNESS_PHRASES: [&str; 8] = [
    "could you",
    "can you",
    "please",
    "how",
    "what",
    "when",
    "would you",
    "i recommend",
];

/// The answer's topic token: its longest token, earliest on ties.
fn topic_token(answer: &str) -> Option<String> {
    tokens(answer)
        .into_iter()
        .fold(None::<String>, |best, t| match best {
            Some(b) if b.len() >= t.len() => Some(b),
            _ => Some(t),
        })
}

/// Deterministic offline rubric: sym counts distinct cue-field names in
/// the think trace, diff fires on any diagnosis-label mention, dec fires
/// when the answer's topic token is echoed in the think trace, and
/// emp/nat come from fixed phrase lists over the response.
pub fn mock_judge_rule(think: &str, answer: &str, _supports: &[String], s_max: u8) -> RubricScores {
    if think.trim().is_empty() {
        return RubricScores::zeros(s_max);
    }
    let think_tokens = tokens(think);
    let sym_count = FIELD_TOKENS
        .iter()
        .filter(|(_, names)| {
            think_tokens
                .iter()
                .any(|t| names.iter().any(|n| token_matches(t, n)))
        })
        .count();
    let sym = (sym_count as u8).min(s_max);
    let diff = if think_tokens
        .iter()
        .any(|t| LABEL_TOKENS.iter().any(|l| token_matches(t, l)))
    {
        s_max
    } else {
        0
    };
    let dec = match topic_token(answer) {
        Some(topic) if think_tokens.contains(&topic) => s_max,
        _ => 0,
    };
    let answer_lc = answer.to_lowercase();
    let emp = if EMPATHY_PHRASES.iter().any(|p| answer_lc.contains(p)) {
        s_max
    } else {
        0
    };
    let nat = if NATURALNESS_PHRASES.iter().any(|p| answer_lc.contains(p)) {
        s_max
    } else {
        0
    };
    RubricScores {
        sym,
        diff,
        dec,
        emp,
        nat,
        s_max,
    }
}

/// Role interface the runner scores turns through.
pub trait TurnJudge: Send + Sync {
    fn rubric(
        &self,
        history_summary: &str,
        think: &str,
        answer: &str,
        supports: &[String],
    ) -> Result<RubricScores, ClientError>;
}

pub struct ChatJudge {
    chat: Arc<dyn ChatClient>,
    s_max: u8,
}

impl ChatJudge {
    pub fn new(chat: Arc<dyn ChatClient>, s_max: u8) -> Self {
        Self { chat, s_max }
    }
}

impl TurnJudge for ChatJudge {
    fn rubric(
        &self,
        history_summary: &str,
        think: &str,
        answer: &str,
        supports: &[String],
    ) -> Result<RubricScores, ClientError> {
        score_turn(
            history_summary,
            think,
            answer,
            supports,
            self.chat.as_ref(),
            self.s_max,
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MockJudge {
    pub s_max: u8,
}

impl MockJudge {
    pub fn new(s_max: u8) -> Self {
        Self { s_max }
    }
}

impl TurnJudge for MockJudge {
    fn rubric(
        &self,
        _history_summary: &str,
        think: &str,
        answer: &str,
        supports: &[String],
    ) -> Result<RubricScores, ClientError> {
        Ok(mock_judge_rule(think, answer, supports, self.s_max))
    }
}
