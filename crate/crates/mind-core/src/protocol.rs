//! Parsing, rendering, and compliance checking for the two-stage tagged
//! turn format.
//!
//! Stage I: `<think>…</think><rag_query>…</rag_query>` (think optional).
//! Stage II: `<think>…</think><answer>…</answer>`, where an answer body
//! beginning with `<Diagnosis>:` is a terminal diagnosis.
//!
//! Tags are matched flat (non-nested, non-overlapping). Parsing is lenient
//! where possible (first well-formed span wins); `check_compliance` is the
//! strict view whose violations feed the operational penalty.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::case::{Action, DiagnosisLabel};

pub const THINK_TAG: &str = "think";
pub const RAG_QUERY_TAG: &str = "rag_query";
pub const ANSWER_TAG: &str = "answer";
pub const DIAGNOSIS_MARKER: &str = "<Diagnosis>:";
pub const RECOMMENDATION_MARKER: &str = "<Recommendation>:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    MissingTag,
    UnclosedTag,
    DuplicateTag,
    EmptySegment,
    TrailingGarbage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatViolation {
    pub kind: ViolationKind,
    /// Byte offset into the raw text where the violation was detected.
    pub location: usize,
    pub detail: String,
}

impl FormatViolation {
    fn new(kind: ViolationKind, location: usize, detail: impl Into<String>) -> Self {
        Self {
            kind,
            location,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("format violations: {0:?}")]
    Violations(Vec<FormatViolation>),
    #[error("unknown diagnosis label {label:?} at byte {location}")]
    UnknownLabel { label: String, location: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage1Output {
    pub think: Option<String>,
    pub rag_query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Output {
    pub think: String,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, Copy)]
struct Span {
    open_start: usize,
    content_start: usize,
    content_end: usize,
    end: usize,
}

/// Flat left-to-right pairing of `<tag>`/`</tag>` tokens. Reopening before
/// a close and stray or missing closes all surface as UnclosedTag at the
/// offending token's offset.
fn scan_spans(raw: &str, tag: &str) -> (Vec<Span>, Vec<FormatViolation>) {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut events: Vec<(usize, bool)> = raw
        .match_indices(&open)
        .map(|(p, _)| (p, true))
        .chain(raw.match_indices(&close).map(|(p, _)| (p, false)))
        .collect();
    events.sort_by_key(|&(p, _)| p);

    let mut spans = Vec::new();
    let mut viols = Vec::new();
    let mut open_pos: Option<usize> = None;
    for (p, is_open) in events {
        match (open_pos, is_open) {
            (None, true) => open_pos = Some(p),
            (None, false) => viols.push(FormatViolation::new(
                ViolationKind::UnclosedTag,
                p,
                format!("stray </{tag}> without opener"),
            )),
            (Some(op), true) => {
                viols.push(FormatViolation::new(
                    ViolationKind::UnclosedTag,
                    op,
                    format!("<{tag}> reopened before closing"),
                ));
                open_pos = Some(p);
            }
            (Some(op), false) => {
                spans.push(Span {
                    open_start: op,
                    content_start: op + open.len(),
                    content_end: p,
                    end: p + close.len(),
                });
                open_pos = None;
            }
        }
    }
    if let Some(op) = open_pos {
        viols.push(FormatViolation::new(
            ViolationKind::UnclosedTag,
            op,
            format!("<{tag}> never closed"),
        ));
    }
    (spans, viols)
}

fn classify_answer(body: &str, body_offset: usize) -> Result<Action, ProtocolError> {
    let Some(rest) = body.strip_prefix(DIAGNOSIS_MARKER) else {
        return Ok(Action::Inquiry {
            question: body.to_string(),
        });
    };
    let after = rest.trim_start();
    let label_offset = body_offset + DIAGNOSIS_MARKER.len() + (rest.len() - after.len());
    let token_end = after
        .find(|c: char| c.is_whitespace() || c == '<')
        .unwrap_or(after.len());
    let token = &after[..token_end];
    let label = DiagnosisLabel::from_str(token).map_err(|_| ProtocolError::UnknownLabel {
        label: token.to_string(),
        location: label_offset,
    })?;
    let mut recommendation = after[token_end..].trim_start();
    if let Some(stripped) = recommendation.strip_prefix(RECOMMENDATION_MARKER) {
        recommendation = stripped;
    }
    Ok(Action::Diagnose {
        label,
        recommendation: recommendation.trim().to_string(),
    })
}

/// Extracts the first well-formed `<rag_query>` span plus an optional
/// preceding `<think>` span; contents are tag-stripped and trimmed.
pub fn parse_stage1(raw: &str) -> Result<Stage1Output, Vec<FormatViolation>> {
    let (q_spans, _) = scan_spans(raw, RAG_QUERY_TAG);
    let q = match q_spans.first() {
        Some(s) => *s,
        None => return Err(check_compliance(raw, Stage::One)),
    };
    let q_text = raw[q.content_start..q.content_end].trim();
    if q_text.is_empty() {
        return Err(check_compliance(raw, Stage::One));
    }
    let (t_spans, _) = scan_spans(raw, THINK_TAG);
    let think = t_spans
        .iter()
        .find(|s| s.open_start < q.open_start)
        .map(|s| raw[s.content_start..s.content_end].trim())
        .filter(|t| !t.is_empty())
        .map(String::from);
    Ok(Stage1Output {
        think,
        rag_query: q_text.to_string(),
    })
}

/// Extracts `<think>` and `<answer>` and classifies the answer body into
/// Inquiry or Diagnose per the diagnosis marker grammar.
pub fn parse_stage2(raw: &str) -> Result<Stage2Output, ProtocolError> {
    let (t_spans, _) = scan_spans(raw, THINK_TAG);
    let (a_spans, _) = scan_spans(raw, ANSWER_TAG);
    let (Some(t), Some(a)) = (t_spans.first(), a_spans.first()) else {
        return Err(ProtocolError::Violations(check_compliance(raw, Stage::Two)));
    };
    let think = raw[t.content_start..t.content_end].trim();
    let content = &raw[a.content_start..a.content_end];
    let body = content.trim();
    if think.is_empty() || body.is_empty() {
        return Err(ProtocolError::Violations(check_compliance(raw, Stage::Two)));
    }
    let body_offset = a.content_start + (content.len() - content.trim_start().len());
    let action = classify_answer(body, body_offset)?;
    Ok(Stage2Output {
        think: think.to_string(),
        action,
    })
}

/// Strict format check. Empty result iff the text is canonical: the
/// stage's blocks in grammar order, nothing but whitespace outside them,
/// non-empty contents, and a recognizable diagnosis label when the marker
/// is used. Violations are reported in document order.
pub fn check_compliance(raw: &str, stage: Stage) -> Vec<FormatViolation> {
    let tags: &[(&str, bool)] = match stage {
        Stage::One => &[(THINK_TAG, false), (RAG_QUERY_TAG, true)],
        Stage::Two => &[(THINK_TAG, true), (ANSWER_TAG, true)],
    };

    let mut viols = Vec::new();
    let mut any_unclosed = false;
    let mut per_tag: Vec<(&str, Vec<Span>)> = Vec::new();
    for &(tag, required) in tags {
        let (spans, mut sv) = scan_spans(raw, tag);
        let broken = !sv.is_empty();
        any_unclosed |= broken;
        viols.append(&mut sv);
        if required && spans.is_empty() && !broken {
            viols.push(FormatViolation::new(
                ViolationKind::MissingTag,
                0,
                format!("<{tag}> block missing"),
            ));
        }
        per_tag.push((tag, spans));
    }

    for (tag, spans) in &per_tag {
        for s in spans.iter().skip(1) {
            viols.push(FormatViolation::new(
                ViolationKind::DuplicateTag,
                s.open_start,
                format!("extra <{tag}> block"),
            ));
        }
        if let Some(s) = spans.first() {
            if raw[s.content_start..s.content_end].trim().is_empty() {
                viols.push(FormatViolation::new(
                    ViolationKind::EmptySegment,
                    s.content_start,
                    format!("<{tag}> content empty"),
                ));
            }
        }
    }

    // Grammar order over the selected (first) span of each tag.
    let selected: Vec<(&str, Span)> = per_tag
        .iter()
        .filter_map(|(t, sp)| sp.first().map(|s| (*t, *s)))
        .collect();
    for w in selected.windows(2) {
        if w[0].1.open_start > w[1].1.open_start {
            viols.push(FormatViolation::new(
                ViolationKind::TrailingGarbage,
                w[0].1.open_start,
                format!("<{}> block out of order", w[0].0),
            ));
        }
    }

    // Stray non-whitespace outside any recognized span, one violation per
    // gap. Skipped when pairing already failed: offsets would mislead.
    if !any_unclosed {
        let mut covered = vec![false; raw.len()];
        for (_, spans) in &per_tag {
            for s in spans {
                covered[s.open_start..s.end].fill(true);
            }
        }
        let mut gap_start = None;
        for i in 0..=raw.len() {
            let open_gap = i < raw.len() && !covered[i];
            match (gap_start, open_gap) {
                (None, true) => gap_start = Some(i),
                (Some(gs), false) => {
                    if let Some(off) = raw[gs..i].find(|c: char| !c.is_whitespace()) {
                        viols.push(FormatViolation::new(
                            ViolationKind::TrailingGarbage,
                            gs + off,
                            "stray content outside tags",
                        ));
                    }
                    gap_start = None;
                }
                _ => {}
            }
        }
    }

    if stage == Stage::Two {
        if let Some((_, a)) = selected.iter().find(|(t, _)| *t == ANSWER_TAG) {
            let content = &raw[a.content_start..a.content_end];
            let body = content.trim();
            if !body.is_empty() {
                let body_offset = a.content_start + (content.len() - content.trim_start().len());
                if let Err(ProtocolError::UnknownLabel { label, location }) =
                    classify_answer(body, body_offset)
                {
                    viols.push(FormatViolation::new(
                        ViolationKind::TrailingGarbage,
                        location,
                        format!("unrecognized diagnosis label {label:?}"),
                    ));
                }
            }
        }
    }

    viols.sort_by_key(|v| v.location);
    viols
}

/// Canonical Stage I text: `parse_stage1(render_stage1(x)) == x` with zero
/// violations for values whose texts are trimmed and tag-literal-free.
pub fn render_stage1(out: &Stage1Output) -> String {
    match &out.think {
        Some(t) => format!("<think>{t}</think><rag_query>{}</rag_query>", out.rag_query),
        None => format!("<rag_query>{}</rag_query>", out.rag_query),
    }
}

/// Canonical Stage II text; same round-trip contract as `render_stage1`.
pub fn render_stage2(out: &Stage2Output) -> String {
    let body = match &out.action {
        Action::Inquiry { question } => question.clone(),
        Action::Diagnose {
            label,
            recommendation,
        } => {
            if recommendation.is_empty() {
                format!("{DIAGNOSIS_MARKER} {label}")
            } else {
                format!("{DIAGNOSIS_MARKER} {label} {RECOMMENDATION_MARKER} {recommendation}")
            }
        }
    };
    format!("<think>{}</think><answer>{body}</answer>", out.think)
}
