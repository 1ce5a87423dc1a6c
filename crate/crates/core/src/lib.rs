//! Core of the reviewer/responder debate toolkit.
//!
//! Everything in this crate is pure computation over in-memory values:
//! chat types and verdict detection, prompt rendering, the scripted
//! backend, the bounded review/refine debate loop, the two experiment
//! harnesses and a classical particle counter used as ground truth.
//! File formats, HTTP and the command line live in the `duet` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backend;
pub mod chat;
pub mod debate;
pub mod exp1;
pub mod exp2;
pub mod particles;
pub mod prompt;

pub use backend::{BackendError, ChatBackend, RetryPolicy, ScriptEntry, ScriptedBackend, ToolCallSpec};
pub use chat::{detect_verdict, Event, EventKind, Message, Role, Transcript, TranscriptError, Verdict, VerdictValue};
pub use debate::{
    run_debate, AmbiguousPolicy, DebateConfig, DebateCycleRecord, DebateError, DebateOutcome, DebateStatus, Speaker,
};
pub use prompt::{FinalObjective, PromptError, PromptTemplateSet, SystemPromptFlags};
