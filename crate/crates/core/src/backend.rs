//! The chat-completion interface every model call goes through, plus the
//! ordinal-replay backend used for fixtures and tests.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{Message, Role};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("script exhausted after {calls} responses")]
    ScriptExhausted { calls: usize },
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("api key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("backend returned an empty message")]
    EmptyResponse,
    #[error("no messages to send")]
    EmptyMessages,
}

impl BackendError {
    /// Transport failures, timeouts, 429 and 5xx are worth another attempt.
    /// Everything else is a caller or fixture problem.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Http { status, .. } => *status == 429 || (500..600).contains(status),
            BackendError::Timeout | BackendError::Transport(_) => true,
            _ => false,
        }
    }
}

/// One chat-completion endpoint. Implementations keep per-instance state
/// (a replay cursor, a connection) and are driven by one caller at a time.
pub trait ChatBackend {
    fn complete(&mut self, messages: &[Message]) -> Result<Message, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &mut B {
    fn complete(&mut self, messages: &[Message]) -> Result<Message, BackendError> {
        (**self).complete(messages)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for alloc::boxed::Box<B> {
    fn complete(&mut self, messages: &[Message]) -> Result<Message, BackendError> {
        (**self).complete(messages)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallSpec {
    pub name: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub index: usize,
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallSpec>,
}

/// Replays canned entries by call ordinal, ignoring the prompt content.
/// Every input is recorded so tests can assert on what was sent.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    cursor: usize,
    inputs: Vec<Vec<Message>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { entries, cursor: 0, inputs: Vec::new() }
    }

    /// Builds a backend from bare response texts.
    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries = responses
            .into_iter()
            .enumerate()
            .map(|(index, r)| ScriptEntry { index, response: r.into(), tool_calls: Vec::new() })
            .collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    /// Number of entries handed out so far.
    pub fn calls(&self) -> usize {
        self.cursor
    }

    pub fn inputs(&self) -> &[Vec<Message>] {
        &self.inputs
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.cursor
    }

    /// Hands out the next entry, tool calls included.
    pub fn next_entry(&mut self, messages: &[Message]) -> Result<ScriptEntry, BackendError> {
        let entry =
            self.entries.get(self.cursor).cloned().ok_or(BackendError::ScriptExhausted { calls: self.cursor })?;
        self.inputs.push(messages.to_vec());
        self.cursor += 1;
        Ok(entry)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&mut self, messages: &[Message]) -> Result<Message, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::EmptyMessages);
        }
        let entry = self.next_entry(messages)?;
        if entry.response.is_empty() {
            return Err(BackendError::EmptyResponse);
        }
        Ok(Message::new(Role::Assistant, entry.response))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetryPolicyError {
    #[error("max_attempts must be between 1 and 10, got {0}")]
    Attempts(u32),
    #[error("timeout must be positive")]
    ZeroTimeout,
}

/// Retry budget for transport-level failures. Backoff doubles from
/// `base_backoff_ms` before each retry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_backoff_ms: 500, timeout_ms: 120_000 }
    }
}

impl RetryPolicy {
    pub fn validate(&self) -> Result<(), RetryPolicyError> {
        if !(1..=10).contains(&self.max_attempts) {
            return Err(RetryPolicyError::Attempts(self.max_attempts));
        }
        if self.timeout_ms == 0 {
            return Err(RetryPolicyError::ZeroTimeout);
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Delay before attempt `attempt` (1-based). The first attempt is
    /// immediate.
    pub fn backoff_before(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u64 << (attempt - 2).min(16);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }

    pub fn total_backoff(&self) -> Duration {
        (1..=self.max_attempts).map(|a| self.backoff_before(a)).sum()
    }

    /// Upper bound on the wall clock of one call including all retries.
    pub fn worst_case(&self) -> Duration {
        self.timeout() * self.max_attempts + self.total_backoff()
    }
}
