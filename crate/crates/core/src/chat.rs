//! Messages, tool-call transcripts and reviewer verdict detection.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speaker of a chat message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

/// What happened at one step of a round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    AssistantText { text: String },
    ToolCall { name: String, args: BTreeMap<String, String> },
    ToolResult { name: String, payload: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("round id must not be empty")]
    EmptyRoundId,
    #[error("tool result for `{0}` has no preceding call")]
    OrphanToolResult(String),
    #[error("event sequence {found} does not follow {previous}")]
    NonIncreasingSeq { previous: u64, found: u64 },
}

/// Ordered record of one round. Sequence numbers are assigned on push and
/// are dense from zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub round_id: String,
    pub events: Vec<Event>,
}

impl Transcript {
    pub fn new(round_id: impl Into<String>) -> Result<Self, TranscriptError> {
        let round_id = round_id.into();
        if round_id.is_empty() {
            return Err(TranscriptError::EmptyRoundId);
        }
        Ok(Self { round_id, events: Vec::new() })
    }

    /// Appends an event and returns its sequence number.
    pub fn push(&mut self, kind: EventKind) -> Result<u64, TranscriptError> {
        if let EventKind::ToolResult { name, .. } = &kind {
            let called =
                self.events.iter().any(|e| matches!(&e.kind, EventKind::ToolCall { name: n, .. } if n == name));
            if !called {
                return Err(TranscriptError::OrphanToolResult(name.clone()));
            }
        }
        let seq = self.events.len() as u64;
        self.events.push(Event { seq, kind });
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks the ordering invariants on a transcript that did not come
    /// through [`Transcript::push`], e.g. one read back from disk.
    pub fn validate(&self) -> Result<(), TranscriptError> {
        if self.round_id.is_empty() {
            return Err(TranscriptError::EmptyRoundId);
        }
        let mut rebuilt = Transcript { round_id: self.round_id.clone(), events: Vec::new() };
        let mut previous: Option<u64> = None;
        for event in &self.events {
            if let Some(prev) = previous {
                if event.seq <= prev {
                    return Err(TranscriptError::NonIncreasingSeq { previous: prev, found: event.seq });
                }
            }
            previous = Some(event.seq);
            rebuilt.push(event.kind.clone())?;
        }
        Ok(())
    }
}

pub const AGREE_MARKER: &str = "I agree";
pub const DISAGREE_MARKER: &str = "I do not agree";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictValue {
    Agree,
    Disagree,
    Ambiguous,
}

/// Reviewer verdict. `marker_offset` is the character index of the first
/// occurrence of the deciding marker and is `None` only for `Ambiguous`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub value: VerdictValue,
    pub marker_offset: Option<usize>,
}

impl Verdict {
    pub fn is_agree(&self) -> bool {
        self.value == VerdictValue::Agree
    }
}

fn find_ignore_ascii_case(haystack: &str, needle: &str) -> Option<usize> {
    let hay = haystack.as_bytes();
    let pat = needle.as_bytes();
    if pat.len() > hay.len() {
        return None;
    }
    (0..=hay.len() - pat.len()).find(|&i| hay[i..i + pat.len()].eq_ignore_ascii_case(pat))
}

/// Classifies a reviewer response. The disagree marker wins whenever it
/// occurs anywhere, since a reviewer may quote agreement on side points
/// after disagreeing.
pub fn detect_verdict(text: &str) -> Verdict {
    let found = find_ignore_ascii_case(text, DISAGREE_MARKER)
        .map(|at| (VerdictValue::Disagree, at))
        .or_else(|| find_ignore_ascii_case(text, AGREE_MARKER).map(|at| (VerdictValue::Agree, at)));
    match found {
        // markers are ASCII, so the match starts on a char boundary
        Some((value, byte_at)) => Verdict { value, marker_offset: Some(text[..byte_at].chars().count()) },
        None => Verdict { value: VerdictValue::Ambiguous, marker_offset: None },
    }
}
