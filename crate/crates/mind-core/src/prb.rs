//! The criteria-grounded reasoning bank: entry construction, reliability
//! assessment, persistent index, exact top-k retrieval, the reliability
//! proxy, and support gating.
//!
//! Retrieval is an exhaustive cosine scan. Entries carrying any hard-issue
//! flag exist in the index (they still count in the quality histogram) but
//! are never retrieved.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clients::{
    ChatClient, ChatTurnMsg, ClientError, EmbedClient, EmbeddingVector, GenParams,
};
use crate::util::{fill_template, fnv1a_64_str};

pub const SCHEMA_VERSION: &str = "prb-v1";

pub const STATE_COMPRESS_PROMPT: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../prompts/state-compress-v1.txt"
));
pub const SUPPORT_SYNTH_PROMPT: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../prompts/support-synth-v1.txt"
));
pub const RELIABILITY_PROMPT: &str = include_str!(concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/../../prompts/reliability-v1.txt"
));

const BANK_GEN: GenParams = GenParams {
    temperature: 0.0,
    top_p: 1.0,
    max_len: 512,
};

#[derive(Debug, thiserror::Error)]
pub enum PrbError {
    #[error("compressed state is blank")]
    EmptyState,
    #[error("no eligible entries in the index")]
    EmptyIndex,
    #[error("query embeds to the flagged zero vector")]
    ZeroVector,
    #[error("reliability proxy needs at least one hit")]
    EmptyHits,
    #[error("invalid entry {entry_id:?}: {reason}")]
    InvalidEntry { entry_id: String, reason: String },
    #[error("index schema {found:?} is not {SCHEMA_VERSION:?}")]
    SchemaVersionMismatch { found: String },
    #[error("index built under backend fingerprint {found:#018x}, expected {expected:#018x}")]
    BackendFingerprintMismatch { expected: u64, found: u64 },
    #[error("index file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Diagnostic category tag of a bank entry, or General for entries not
/// tied to one label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PRBCategory {
    Depression,
    Anxiety,
    Mix,
    Other,
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRBMeta {
    pub category: PRBCategory,
    pub quality: u8,
    pub hard_flags: [bool; 3],
    pub source_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRBEntry {
    pub entry_id: String,
    pub state_text: String,
    pub state_vec: EmbeddingVector,
    pub support_text: String,
    pub ref_inquiry: String,
    pub meta: PRBMeta,
}

impl PRBEntry {
    /// Any hard flag excludes the entry from retrieval.
    pub fn eligible(&self) -> bool {
        !self.meta.hard_flags.iter().any(|f| *f)
    }

    fn validate(&self, dims: usize) -> Result<(), PrbError> {
        let fail = |reason: &str| {
            Err(PrbError::InvalidEntry {
                entry_id: self.entry_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.entry_id.is_empty() {
            return fail("empty entry_id");
        }
        if self.state_text.trim().is_empty() {
            return fail("empty state_text");
        }
        if self.support_text.trim().is_empty() {
            return fail("empty support_text");
        }
        if self.ref_inquiry.trim().is_empty() {
            return fail("empty ref_inquiry");
        }
        if !(1..=5).contains(&self.meta.quality) {
            return fail("quality outside 1..=5");
        }
        if self.state_vec.dims() != dims {
            return fail("state_vec dims differ from index dims");
        }
        if let Err(e) = self.state_vec.check_unit() {
            return fail(&e);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub entry_id: String,
    pub similarity: f64,
    pub support_text: String,
    pub quality: u8,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    schema: String,
    dims: usize,
    backend_fingerprint: u64,
}

/// Immutable bank index: concurrent retrievals are safe.
#[derive(Debug, Clone, PartialEq)]
pub struct PRBIndex {
    dims: usize,
    backend_fingerprint: u64,
    entries: Vec<PRBEntry>,
}

impl PRBIndex {
    pub fn new(
        dims: usize,
        backend_fingerprint: u64,
        entries: Vec<PRBEntry>,
    ) -> Result<Self, PrbError> {
        for entry in &entries {
            entry.validate(dims)?;
        }
        Ok(Self {
            dims,
            backend_fingerprint,
            entries,
        })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn backend_fingerprint(&self) -> u64 {
        self.backend_fingerprint
    }

    pub fn entries(&self) -> &[PRBEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn eligible(&self) -> impl Iterator<Item = &PRBEntry> {
        self.entries.iter().filter(|e| e.eligible())
    }

    pub fn check_fingerprint(&self, embed: &dyn EmbedClient) -> Result<(), PrbError> {
        let expected = embed.fingerprint();
        if self.backend_fingerprint != expected {
            return Err(PrbError::BackendFingerprintMismatch {
                expected,
                found: self.backend_fingerprint,
            });
        }
        Ok(())
    }
}

/// Parses `(Score) n/5. (Hard issues) …` into (quality, flags). Accepts
/// both the collective `H1-H3: NO` form and individual `Hi: YES|NO`
/// answers; individual answers override the collective one.
pub fn parse_reliability_reply(reply: &str) -> Option<(u8, [bool; 3])> {
    let score_at = reply.find("(Score)")? + "(Score)".len();
    let after = reply[score_at..].trim_start();
    let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
    let quality: u8 = digits.parse().ok()?;
    if !(1..=5).contains(&quality) || !after[digits.len()..].starts_with("/5") {
        return None;
    }
    let flags_text = &reply[reply.find("(Hard issues)")?..];
    let mut flags = [false; 3];
    let mut recognized = false;
    if flags_text.contains("H1-H3: YES") {
        flags = [true; 3];
        recognized = true;
    } else if flags_text.contains("H1-H3: NO") {
        recognized = true;
    }
    for (i, flag) in flags.iter_mut().enumerate() {
        if flags_text.contains(&format!("H{}: YES", i + 1)) {
            *flag = true;
            recognized = true;
        } else if flags_text.contains(&format!("H{}: NO", i + 1)) {
            *flag = false;
            recognized = true;
        }
    }
    recognized.then_some((quality, flags))
}

/// Scores a support note's reliability via the judge; unparseable replies
/// quarantine to quality 1 with every hard flag raised.
pub fn assess_reliability(
    dialogue_context: &str,
    support_text: &str,
    chat: &dyn ChatClient,
) -> Result<PRBMeta, PrbError> {
    let prompt = fill_template(
        RELIABILITY_PROMPT,
        &[("dialogue", dialogue_context), ("support", support_text)],
    );
    let key = format!("rel-{:016x}", fnv1a_64_str(&prompt));
    let reply = chat.chat(&[ChatTurnMsg::user(prompt)], &BANK_GEN, &key)?;
    let (quality, hard_flags) = parse_reliability_reply(&reply).unwrap_or((1, [true; 3]));
    Ok(PRBMeta {
        category: PRBCategory::General,
        quality,
        hard_flags,
        source_note: String::new(),
    })
}

/// Builds one bank entry: compress the dialogue into a retrieval state,
/// synthesize the support note, embed the state, assess reliability.
pub fn build_entry(
    dialogue_context: &str,
    knowledge_chunks: &[String],
    next_question: &str,
    chat: &dyn ChatClient,
    embed: &dyn EmbedClient,
) -> Result<PRBEntry, PrbError> {
    build_entry_for(
        dialogue_context,
        knowledge_chunks,
        next_question,
        PRBCategory::General,
        chat,
        embed,
    )
}

pub fn build_entry_for(
    dialogue_context: &str,
    knowledge_chunks: &[String],
    next_question: &str,
    category: PRBCategory,
    chat: &dyn ChatClient,
    embed: &dyn EmbedClient,
) -> Result<PRBEntry, PrbError> {
    if dialogue_context.trim().is_empty() {
        return Err(PrbError::EmptyState);
    }
    let entry_id = format!(
        "e{:016x}",
        fnv1a_64_str(&format!("{dialogue_context}\u{1f}{next_question}"))
    );
    if next_question.trim().is_empty() {
        return Err(PrbError::InvalidEntry {
            entry_id,
            reason: "empty next_question".to_string(),
        });
    }

    let state_prompt = fill_template(STATE_COMPRESS_PROMPT, &[("dialogue", dialogue_context)]);
    let state_key = format!("state-{:016x}", fnv1a_64_str(&state_prompt));
    let state_text = chat
        .chat(&[ChatTurnMsg::user(state_prompt)], &BANK_GEN, &state_key)?
        .trim()
        .to_string();
    if state_text.is_empty() {
        return Err(PrbError::EmptyState);
    }

    let support_prompt = fill_template(
        SUPPORT_SYNTH_PROMPT,
        &[
            ("dialogue", dialogue_context),
            ("knowledge", &knowledge_chunks.join("\n")),
            ("question", next_question),
        ],
    );
    let support_key = format!("support-{:016x}", fnv1a_64_str(&support_prompt));
    let support_text = chat
        .chat(&[ChatTurnMsg::user(support_prompt)], &BANK_GEN, &support_key)?
        .trim()
        .to_string();
    if support_text.is_empty() {
        return Err(PrbError::InvalidEntry {
            entry_id,
            reason: "empty support_text".to_string(),
        });
    }

    let state_vec = embed.embed(&state_text)?;
    if state_vec.is_zero() {
        return Err(PrbError::InvalidEntry {
            entry_id,
            reason: "state embeds to the flagged zero vector".to_string(),
        });
    }

    let mut meta = assess_reliability(dialogue_context, &support_text, chat)?;
    meta.category = category;
    meta.source_note = if knowledge_chunks.is_empty() {
        "no references".to_string()
    } else {
        format!("{} reference chunks", knowledge_chunks.len())
    };

    Ok(PRBEntry {
        entry_id,
        state_text,
        state_vec,
        support_text,
        ref_inquiry: next_question.trim().to_string(),
        meta,
    })
}

/// Exact top-k by cosine over eligible entries; ties break by entry_id
/// ascending.
pub fn retrieve(
    index: &PRBIndex,
    query_text: &str,
    k: usize,
    embed: &dyn EmbedClient,
) -> Result<Vec<RetrievalHit>, PrbError> {
    assert!(k >= 1, "retrieve requires k >= 1");
    let query = embed.embed(query_text)?;
    retrieve_by_vector(index, &query, k)
}

pub fn retrieve_by_vector(
    index: &PRBIndex,
    query: &EmbeddingVector,
    k: usize,
) -> Result<Vec<RetrievalHit>, PrbError> {
    if query.is_zero() {
        return Err(PrbError::ZeroVector);
    }
    let mut hits: Vec<RetrievalHit> = index
        .eligible()
        .map(|e| {
            let similarity = crate::clients::cosine(query, &e.state_vec)?;
            Ok(RetrievalHit {
                entry_id: e.entry_id.clone(),
                similarity,
                support_text: e.support_text.clone(),
                quality: e.meta.quality,
            })
        })
        .collect::<Result<_, PrbError>>()?;
    if hits.is_empty() {
        return Err(PrbError::EmptyIndex);
    }
    hits.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.entry_id.cmp(&b.entry_id))
    });
    hits.truncate(k);
    Ok(hits)
}

/// Nearest eligible entry to the query; the rectification fallback rule.
pub fn nearest_entry<'a>(
    index: &'a PRBIndex,
    query: &EmbeddingVector,
) -> Result<&'a PRBEntry, PrbError> {
    let top = retrieve_by_vector(index, query, 1)?;
    Ok(index
        .entries
        .iter()
        .find(|e| e.entry_id == top[0].entry_id)
        .expect("hit refers to an index entry"))
}

/// rho = alpha_sim * max similarity + alpha_qual * mean(quality / 5).
pub fn reliability_proxy(
    hits: &[RetrievalHit],
    alpha_sim: f64,
    alpha_qual: f64,
) -> Result<f64, PrbError> {
    if hits.is_empty() {
        return Err(PrbError::EmptyHits);
    }
    let max_sim = hits
        .iter()
        .map(|h| h.similarity)
        .fold(f64::NEG_INFINITY, f64::max);
    let mean_quality = hits
        .iter()
        .map(|h| f64::from(h.quality) / 5.0)
        .sum::<f64>()
        / hits.len() as f64;
    Ok(alpha_sim * max_sim + alpha_qual * mean_quality)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub inject: bool,
    pub gated_supports: Vec<String>,
}

/// Injection is allowed when max similarity reaches the threshold
/// (closed boundary). No hits never inject.
pub fn gate(hits: &[RetrievalHit], threshold: f64) -> GateDecision {
    let inject = hits
        .iter()
        .map(|h| h.similarity)
        .fold(f64::NEG_INFINITY, f64::max)
        >= threshold
        && !hits.is_empty();
    GateDecision {
        inject,
        gated_supports: if inject {
            hits.iter().map(|h| h.support_text.clone()).collect()
        } else {
            Vec::new()
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityHistogram {
    pub counts: [u64; 5],
    pub ratios: [f64; 5],
    pub total: u64,
}

/// Counts over all entries, hard-flagged included.
pub fn quality_histogram(index: &PRBIndex) -> QualityHistogram {
    let mut counts = [0u64; 5];
    for e in &index.entries {
        counts[usize::from(e.meta.quality) - 1] += 1;
    }
    let total: u64 = counts.iter().sum();
    let ratios = if total == 0 {
        [0.0; 5]
    } else {
        counts.map(|c| c as f64 / total as f64)
    };
    QualityHistogram {
        counts,
        ratios,
        total,
    }
}

/// Writes the header line then one entry per line. Byte-stable for a
/// given index.
pub fn save_index(path: &Path, index: &PRBIndex) -> Result<(), PrbError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = IndexHeader {
        schema: SCHEMA_VERSION.to_string(),
        dims: index.dims,
        backend_fingerprint: index.backend_fingerprint,
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for entry in &index.entries {
        writeln!(out, "{}", serde_json::to_string(entry).expect("entry serializes"))?;
    }
    out.flush()?;
    Ok(())
}

/// Loads and re-validates an index. Backend compatibility is checked
/// separately via `PRBIndex::check_fingerprint`.
pub fn load_index(path: &Path) -> Result<PRBIndex, PrbError> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let header_line = lines.next().ok_or(PrbError::Parse {
        line: 1,
        reason: "missing header line".to_string(),
    })??;
    let header: IndexHeader = serde_json::from_str(&header_line).map_err(|e| PrbError::Parse {
        line: 1,
        reason: e.to_string(),
    })?;
    if header.schema != SCHEMA_VERSION {
        return Err(PrbError::SchemaVersionMismatch {
            found: header.schema,
        });
    }
    let mut entries = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: PRBEntry = serde_json::from_str(&line).map_err(|e| PrbError::Parse {
            line: idx + 2,
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    PRBIndex::new(header.dims, header.backend_fingerprint, entries)
}

/// Loads an index and refuses one built under a different embedding
/// backend than the one about to query it.
pub fn load_index_for(path: &Path, embed: &dyn EmbedClient) -> Result<PRBIndex, PrbError> {
    let index = load_index(path)?;
    index.check_fingerprint(embed)?;
    Ok(index)
}

/// One bank-building input: a consultation dialogue and the question an
/// interviewer asked next, optionally tagged with a category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BankDialogue {
    pub dialogue: String,
    pub next_question: String,
    #[serde(default)]
    pub category: Option<PRBCategory>,
    #[serde(default)]
    pub knowledge: Vec<String>,
}

pub fn load_bank_dialogues(path: &Path) -> Result<Vec<BankDialogue>, PrbError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: BankDialogue = serde_json::from_str(&line).map_err(|e| PrbError::Parse {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}

/// Deterministic chat backend for offline bank building: recognizes the
/// three bank prompts and answers each in its expected grammar, as a pure
/// function of the prompt text.
#[derive(Debug, Default, Clone)]
pub struct MockBankChat;

fn extract_between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let e = s + text[s..].find(end)?;
    Some(text[s..e].trim())
}

fn gist(text: &str, max_tokens: usize) -> String {
    text.split_whitespace()
        .take(max_tokens)
        .collect::<Vec<_>>()
        .join(" ")
}

impl ChatClient for MockBankChat {
    fn chat(
        &self,
        messages: &[ChatTurnMsg],
        _params: &GenParams,
        _idempotency_key: &str,
    ) -> Result<String, ClientError> {
        let prompt = messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        if prompt.starts_with("Compress the consultation dialogue") {
            let dialogue = extract_between(prompt, "Dialogue:\n", "\n\nReply with the state text")
                .unwrap_or_default();
            return Ok(format!(
                "{}; remaining fields not mentioned",
                gist(dialogue, 40)
            ));
        }
        if prompt.starts_with("Write a support note") {
            let dialogue =
                extract_between(prompt, "Dialogue:\n", "\n\nReference criteria").unwrap_or_default();
            let question = extract_between(prompt, "Next question:\n", "\n\nThe note must state")
                .unwrap_or_default();
            return Ok(format!(
                "known: {}. gap: the field probed by \"{}\" is unconfirmed; asking it narrows the differential.",
                gist(dialogue, 25),
                gist(question, 12),
            ));
        }
        if prompt.starts_with("Assess the reliability") {
            let support = extract_between(prompt, "Support note:\n", "\n\nVerify").unwrap_or_default();
            let quality = 2 + (fnv1a_64_str(support) % 4) as u8;
            return Ok(format!(
                "(Score) {quality}/5. (Hard issues) H1: NO; H2: NO; H3: NO. (Rationale) note restates the state."
            ));
        }
        Ok(format!("mock-reply-{:016x}", fnv1a_64_str(prompt)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{mock_bucket, mock_embed, MockChat, MockEmbed};

    fn entry(id: &str, state: &str, quality: u8, flags: [bool; 3]) -> PRBEntry {
        PRBEntry {
            entry_id: id.to_string(),
            state_text: state.to_string(),
            state_vec: mock_embed(state),
            support_text: format!("support for {id}"),
            ref_inquiry: format!("reference question {id}"),
            meta: PRBMeta {
                category: PRBCategory::General,
                quality,
                hard_flags: flags,
                source_note: String::new(),
            },
        }
    }

    fn index_of(entries: Vec<PRBEntry>) -> PRBIndex {
        PRBIndex::new(MockEmbed.dims(), MockEmbed.fingerprint(), entries).unwrap()
    }

    #[test]
    fn reliability_reply_examples() {
        assert_eq!(
            parse_reliability_reply("(Score) 4/5. (Hard issues) H1-H3: NO. (Rationale) ok"),
            Some((4, [false, false, false]))
        );
        assert_eq!(
            parse_reliability_reply("(Score) 5/5. (Hard issues) H1: YES because it contradicts"),
            Some((5, [true, false, false]))
        );
        assert_eq!(parse_reliability_reply("total garbage"), None);
        assert_eq!(parse_reliability_reply("(Score) 9/5. (Hard issues) H1-H3: NO"), None);
        assert_eq!(
            parse_reliability_reply(
                "(Score) 3/5. (Hard issues) H1: NO; H2: YES; H3: NO. (Rationale) x"
            ),
            Some((3, [false, true, false]))
        );
    }

    #[test]
    fn assess_reliability_quarantines_garbage() {
        let chat = MockChat::new(0);
        let meta = assess_reliability("state", "support", &chat).unwrap();
        assert_eq!(meta.quality, 1);
        assert_eq!(meta.hard_flags, [true; 3]);
    }

    #[test]
    fn build_entry_via_scripted_pair() {
        let dialogue = "Doctor: what brings you in? Patient: low mood for three months.";
        let question = "How is your sleep?";
        let state_prompt = fill_template(STATE_COMPRESS_PROMPT, &[("dialogue", dialogue)]);
        let support_prompt = fill_template(
            SUPPORT_SYNTH_PROMPT,
            &[("dialogue", dialogue), ("knowledge", ""), ("question", question)],
        );
        let rel_prompt = fill_template(
            RELIABILITY_PROMPT,
            &[("dialogue", dialogue), ("support", "fixed support note")],
        );
        let chat = MockChat::new(0)
            .with_reply(&[ChatTurnMsg::user(state_prompt)], "fixed state text")
            .with_reply(&[ChatTurnMsg::user(support_prompt)], "fixed support note")
            .with_reply(
                &[ChatTurnMsg::user(rel_prompt)],
                "(Score) 4/5. (Hard issues) H1-H3: NO. (Rationale) fine",
            );
        let e = build_entry(dialogue, &[], question, &chat, &MockEmbed).unwrap();
        assert_eq!(e.state_text, "fixed state text");
        assert_eq!(e.support_text, "fixed support note");
        assert_eq!(e.ref_inquiry, question);
        assert_eq!(e.state_vec, mock_embed("fixed state text"));
        assert_eq!(e.meta.quality, 4);
        assert!(e.eligible());
        assert_eq!(e.meta.source_note, "no references");
    }

    #[test]
    fn build_entry_counts_knowledge_chunks() {
        let e = build_entry(
            "dialogue text",
            &["chunk a".into(), "chunk b".into()],
            "q?",
            &MockBankChat,
            &MockEmbed,
        )
        .unwrap();
        assert_eq!(e.meta.source_note, "2 reference chunks");
    }

    #[test]
    fn batch_build_yields_unique_valid_entries() {
        let mut ids = std::collections::BTreeSet::new();
        let mut entries = Vec::new();
        for i in 0..10 {
            let dialogue = format!("Patient reports issue number {i} with mood and energy.");
            let e = build_entry(&dialogue, &[], "What about sleep?", &MockBankChat, &MockEmbed)
                .unwrap();
            assert!(ids.insert(e.entry_id.clone()), "duplicate id {}", e.entry_id);
            entries.push(e);
        }
        let index = index_of(entries);
        assert_eq!(index.len(), 10);
    }

    #[test]
    fn retrieve_orders_by_similarity() {
        // Tokens occupy distinct buckets, so cosines are shared/5 exactly.
        let toks = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"];
        let buckets: Vec<usize> = toks.iter().map(|t| mock_bucket(t)).collect();
        let mut unique = buckets.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), toks.len(), "bucket collision in test tokens");

        let query = "alpha bravo charlie delta echo";
        let e1 = entry("e1", "alpha bravo charlie delta foxtrot", 4, [false; 3]);
        let e2 = entry("e2", "alpha bravo foxtrot golf hotel", 4, [false; 3]);
        let e3 = entry("e3", "alpha foxtrot golf hotel alpha2", 4, [false; 3]);
        let index = index_of(vec![e3.clone(), e1.clone(), e2.clone()]);

        let hits = retrieve(&index, query, 2, &MockEmbed).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].entry_id, "e1");
        assert_eq!(hits[1].entry_id, "e2");
        assert!(hits[0].similarity > hits[1].similarity);

        let all = retrieve(&index, query, 10, &MockEmbed).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[2].entry_id, "e3");
    }

    #[test]
    fn retrieve_identity_hits_first_with_similarity_one() {
        let e1 = entry("e1", "sleep loss early waking", 3, [false; 3]);
        let e2 = entry("e2", "appetite change weight", 3, [false; 3]);
        let index = index_of(vec![e1, e2]);
        let hits = retrieve(&index, "sleep loss early waking", 1, &MockEmbed).unwrap();
        assert_eq!(hits[0].entry_id, "e1");
        assert!((hits[0].similarity - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn retrieve_breaks_ties_by_entry_id() {
        let e_b = entry("b", "same text", 3, [false; 3]);
        let e_a = entry("a", "same text", 3, [false; 3]);
        let index = index_of(vec![e_b, e_a]);
        let hits = retrieve(&index, "same text", 2, &MockEmbed).unwrap();
        assert_eq!(hits[0].entry_id, "a");
        assert_eq!(hits[1].entry_id, "b");
    }

    #[test]
    fn hard_flagged_entries_are_never_retrieved() {
        let flagged = entry("f", "exact match text", 5, [true, false, false]);
        let clean = entry("c", "unrelated words entirely", 2, [false; 3]);
        let index = index_of(vec![flagged, clean]);
        let hits = retrieve(&index, "exact match text", 5, &MockEmbed).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entry_id, "c");

        let all_flagged = index_of(vec![entry("f", "x y", 5, [false, true, false])]);
        assert!(matches!(
            retrieve(&all_flagged, "x y", 1, &MockEmbed),
            Err(PrbError::EmptyIndex)
        ));
    }

    #[test]
    fn retrieve_rejects_zero_query() {
        let index = index_of(vec![entry("e", "words", 3, [false; 3])]);
        assert!(matches!(
            retrieve(&index, "???", 1, &MockEmbed),
            Err(PrbError::ZeroVector)
        ));
    }

    fn hit(sim: f64, quality: u8) -> RetrievalHit {
        RetrievalHit {
            entry_id: format!("h{sim}"),
            similarity: sim,
            support_text: "s".into(),
            quality,
        }
    }

    #[test]
    fn reliability_proxy_hand_values() {
        let rho = reliability_proxy(&[hit(0.8, 4), hit(0.5, 4)], 0.5, 0.5).unwrap();
        assert!((rho - 0.8).abs() <= 1e-12);
        let rho = reliability_proxy(&[hit(0.73, 2), hit(0.2, 5)], 1.0, 0.0).unwrap();
        assert!((rho - 0.73).abs() <= 1e-12);
        let rho = reliability_proxy(&[hit(1.0, 5), hit(0.4, 5)], 0.5, 0.5).unwrap();
        assert!((rho - 1.0).abs() <= 1e-12);
        assert!(matches!(
            reliability_proxy(&[], 0.5, 0.5),
            Err(PrbError::EmptyHits)
        ));
    }

    #[test]
    fn gate_boundary_is_closed() {
        assert!(gate(&[hit(0.90, 3)], 0.70).inject);
        assert!(gate(&[hit(0.70, 3)], 0.70).inject);
        let d = gate(&[hit(0.69, 3)], 0.70);
        assert!(!d.inject);
        assert!(d.gated_supports.is_empty());
        assert!(!gate(&[], 0.0).inject);
    }

    #[test]
    fn histogram_counts_everything_including_flagged() {
        let entries = vec![
            entry("a", "one", 1, [false; 3]),
            entry("b", "two", 2, [true, false, false]),
            entry("c", "three", 2, [false; 3]),
            entry("d", "four", 5, [false; 3]),
        ];
        let h = quality_histogram(&index_of(entries));
        assert_eq!(h.counts, [1, 2, 0, 0, 1]);
        assert_eq!(h.total, 4);
        assert!((h.ratios.iter().sum::<f64>() - 1.0).abs() <= 1e-9);

        let empty = quality_histogram(&index_of(vec![]));
        assert_eq!(empty.counts, [0; 5]);
        assert_eq!(empty.ratios, [0.0; 5]);
    }

    #[test]
    fn index_round_trip_is_byte_stable() {
        let entries: Vec<PRBEntry> = (0..100)
            .map(|i| {
                entry(
                    &format!("e{i:03}"),
                    &format!("state text number {i} mood sleep"),
                    1 + (i % 5) as u8,
                    [i % 7 == 0, false, false],
                )
            })
            .collect();
        let index = index_of(entries);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("bank1.ldjson");
        let p2 = dir.path().join("bank2.ldjson");

        save_index(&p1, &index).unwrap();
        let loaded = load_index_for(&p1, &MockEmbed).unwrap();
        assert_eq!(loaded, index);

        save_index(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_rejects_unknown_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ldjson");
        std::fs::write(
            &p,
            "{\"schema\":\"prb-v9\",\"dims\":256,\"backend_fingerprint\":1}\n",
        )
        .unwrap();
        assert!(matches!(
            load_index(&p),
            Err(PrbError::SchemaVersionMismatch { found }) if found == "prb-v9"
        ));
    }

    #[test]
    fn load_rejects_foreign_fingerprint() {
        let index = PRBIndex::new(MockEmbed.dims(), 0xdead_beef, vec![]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("foreign.ldjson");
        save_index(&p, &index).unwrap();
        assert!(load_index(&p).is_ok());
        assert!(matches!(
            load_index_for(&p, &MockEmbed),
            Err(PrbError::BackendFingerprintMismatch { .. })
        ));
    }

    #[test]
    fn index_header_field_names_are_exact() {
        let index = index_of(vec![entry("a", "text", 3, [false; 3])]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.ldjson");
        save_index(&p, &index).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let header = text.lines().next().unwrap();
        for key in ["\"schema\":\"prb-v1\"", "\"dims\":256", "\"backend_fingerprint\""] {
            assert!(header.contains(key), "{header}");
        }
        let entry_line = text.lines().nth(1).unwrap();
        for key in [
            "\"entry_id\"",
            "\"state_text\"",
            "\"state_vec\"",
            "\"support_text\"",
            "\"ref_inquiry\"",
            "\"meta\"",
            "\"category\"",
            "\"quality\"",
            "\"hard_flags\"",
            "\"source_note\"",
        ] {
            assert!(entry_line.contains(key), "{entry_line}");
        }
    }

    #[test]
    fn load_validates_entry_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("invalid.ldjson");
        let vec256: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat(0.0)).take(256).collect();
        let header = format!(
            "{{\"schema\":\"prb-v1\",\"dims\":256,\"backend_fingerprint\":{}}}",
            MockEmbed.fingerprint()
        );
        let bad_entry = serde_json::json!({
            "entry_id": "e1",
            "state_text": "ok",
            "state_vec": vec256,
            "support_text": "",
            "ref_inquiry": "q",
            "meta": {"category": "General", "quality": 3, "hard_flags": [false, false, false], "source_note": ""}
        });
        std::fs::write(&p, format!("{header}\n{bad_entry}\n")).unwrap();
        assert!(matches!(
            load_index(&p),
            Err(PrbError::InvalidEntry { reason, .. }) if reason.contains("support_text")
        ));
    }
}
