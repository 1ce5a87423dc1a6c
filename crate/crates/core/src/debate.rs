//! Bounded review/refine loop between a responder and a reviewer.
//!
//! The responder's text is reviewed; on agreement the debate ends, on
//! disagreement the responder refines against the critique. After
//! `max_review_cycles` reviews without agreement the responder's latest
//! text is taken as final.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend};
use crate::chat::{detect_verdict, Message, Verdict, VerdictValue};
use crate::prompt::{build_refine_prompt, build_reviewer_prompt, PromptError, PromptTemplateSet};

pub const DEFAULT_MAX_REVIEW_CYCLES: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguousPolicy {
    #[default]
    TreatAsDisagree,
    AbortDebate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebateConfig {
    pub max_review_cycles: u32,
    pub ambiguous_policy: AmbiguousPolicy,
    /// Whether the responder refines once more after the last
    /// disagreement, so the fallback text has seen every critique.
    pub refine_after_final_disagreement: bool,
    /// Sent as the first message to both participants when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
}

impl Default for DebateConfig {
    fn default() -> Self {
        Self {
            max_review_cycles: DEFAULT_MAX_REVIEW_CYCLES,
            ambiguous_policy: AmbiguousPolicy::default(),
            refine_after_final_disagreement: true,
            system_prompt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Responder,
    Reviewer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateCycleRecord {
    pub cycle: u32,
    pub reviewer_text: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responder_refinement: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebateStatus {
    Agreed,
    FallbackAfterMaxCycles,
    /// No reviewer took part (single-model runs).
    Unreviewed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateOutcome {
    pub status: DebateStatus,
    pub final_text: String,
    pub cycles_used: u32,
    pub cycles: Vec<DebateCycleRecord>,
    pub ambiguous_count: u32,
}

impl DebateOutcome {
    pub fn unreviewed(text: impl Into<String>) -> Self {
        Self {
            status: DebateStatus::Unreviewed,
            final_text: text.into(),
            cycles_used: 0,
            cycles: Vec::new(),
            ambiguous_count: 0,
        }
    }

    pub fn reviewer_calls(&self) -> usize {
        self.cycles.len()
    }

    pub fn responder_calls(&self) -> usize {
        self.cycles.iter().filter(|c| c.responder_refinement.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DebateError {
    #[error("initial response is empty")]
    EmptyInitialText,
    #[error("max_review_cycles must be at least 1")]
    ZeroCycles,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{speaker:?} call failed in cycle {cycle}: {source}")]
    Backend { cycle: u32, speaker: Speaker, source: BackendError },
    #[error("reviewer verdict was ambiguous in cycle {cycle}")]
    AmbiguousAbort { cycle: u32 },
}

pub fn run_debate<R, V>(
    initial_text: &str,
    responder: &mut R,
    reviewer: &mut V,
    templates: &PromptTemplateSet,
    config: &DebateConfig,
) -> Result<DebateOutcome, DebateError>
where
    R: ChatBackend + ?Sized,
    V: ChatBackend + ?Sized,
{
    if initial_text.is_empty() {
        return Err(DebateError::EmptyInitialText);
    }
    if config.max_review_cycles == 0 {
        return Err(DebateError::ZeroCycles);
    }

    let mut reviewer_history = Vec::new();
    let mut responder_history = Vec::new();
    if let Some(system) = &config.system_prompt {
        reviewer_history.push(Message::system(system.clone()));
        responder_history.push(Message::system(system.clone()));
    }
    responder_history.push(Message::assistant(initial_text));

    let mut current = String::from(initial_text);
    let mut cycles = Vec::new();
    let mut ambiguous_count = 0;

    for cycle in 1..=config.max_review_cycles {
        reviewer_history.push(Message::user(build_reviewer_prompt(templates, &current)?));
        let review = reviewer.complete(&reviewer_history).map_err(|source| DebateError::Backend {
            cycle,
            speaker: Speaker::Reviewer,
            source,
        })?;
        let verdict = detect_verdict(&review.content);
        reviewer_history.push(review.clone());

        match verdict.value {
            VerdictValue::Agree => {
                cycles.push(DebateCycleRecord {
                    cycle,
                    reviewer_text: review.content,
                    verdict,
                    responder_refinement: None,
                });
                return Ok(DebateOutcome {
                    status: DebateStatus::Agreed,
                    final_text: current,
                    cycles_used: cycle,
                    cycles,
                    ambiguous_count,
                });
            }
            VerdictValue::Ambiguous => {
                ambiguous_count += 1;
                if config.ambiguous_policy == AmbiguousPolicy::AbortDebate {
                    return Err(DebateError::AmbiguousAbort { cycle });
                }
                log::debug!("ambiguous verdict in cycle {cycle}, continuing as disagreement");
            }
            VerdictValue::Disagree => {}
        }

        let refine = cycle < config.max_review_cycles || config.refine_after_final_disagreement;
        let responder_refinement = if refine {
            responder_history.push(Message::user(build_refine_prompt(templates, &review.content)?));
            let refined = responder.complete(&responder_history).map_err(|source| DebateError::Backend {
                cycle,
                speaker: Speaker::Responder,
                source,
            })?;
            current.clone_from(&refined.content);
            responder_history.push(refined);
            Some(current.clone())
        } else {
            None
        };
        cycles.push(DebateCycleRecord { cycle, reviewer_text: review.content, verdict, responder_refinement });
    }

    Ok(DebateOutcome {
        status: DebateStatus::FallbackAfterMaxCycles,
        final_text: current,
        cycles_used: config.max_review_cycles,
        cycles,
        ambiguous_count,
    })
}
