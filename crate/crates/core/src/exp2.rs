//! Particle-counting experiment: analyst answers, critic reviews, analyst
//! answers again. A revision counts as improved when it lands strictly
//! closer to the true count.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend};
use crate::chat::Message;
use crate::prompt::{build_exp2_reviewer_prompt, build_exp2_round2_prompt, PromptError, PromptTemplateSet};

pub const LABELED_COUNT: &str = "Identified Particles Larger Than 10 Microns:";

const UNIT_PREFIXES: &[&str] =
    &["micrometer", "micrometre", "micron", "µm", "μm", "um", "nm", "mm", "cm", "px", "pixel", "%", "²"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStage {
    FirstAnswer,
    Critique,
    RevisedAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Exp2Error {
    #[error("no particle count found in the {0:?} response")]
    CountExtractionFailed(LoopStage),
    #[error("{stage:?} call failed: {source}")]
    Backend { stage: LoopStage, source: BackendError },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no records to summarise")]
    EmptyRecordSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueLoopRecord {
    pub image_id: String,
    pub first_answer: u64,
    #[serde(default)]
    pub critique: String,
    pub revised_answer: u64,
    pub correct_answer: u64,
    pub improved: bool,
}

impl CritiqueLoopRecord {
    pub fn new(image_id: impl Into<String>, first: u64, critique: impl Into<String>, revised: u64, truth: u64) -> Self {
        Self {
            image_id: image_id.into(),
            first_answer: first,
            critique: critique.into(),
            revised_answer: revised,
            correct_answer: truth,
            improved: improved(first, revised, truth),
        }
    }
}

/// Strictly smaller absolute error. Equal distance is not improvement.
pub fn improved(first: u64, revised: u64, truth: u64) -> bool {
    revised.abs_diff(truth) < first.abs_diff(truth)
}

/// True when the word after `rest` (whitespace skipped) is a unit.
fn is_unit_suffix(rest: &str) -> bool {
    let word: String = rest
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic() || matches!(c, '²' | '%'))
        .flat_map(char::to_lowercase)
        .collect();
    UNIT_PREFIXES.iter().any(|unit| word.starts_with(unit))
}

/// Integers standing on their own: not part of a word, a decimal, a
/// negative number or a measurement with a unit.
fn standalone_integers(text: &str) -> Vec<u64> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let before = text[..start].chars().next_back();
        let after = text[i..].chars().next();
        let glued_before = before.is_some_and(|c| c.is_alphanumeric() || c == '_' || c == '-' || c == '.' || c == ',');
        let decimal_after = matches!(after, Some('.' | ',')) && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit());
        let glued_after = after.is_some_and(|c| c.is_alphanumeric() || matches!(c, '_' | '²' | '%'));
        if glued_before || decimal_after || glued_after || is_unit_suffix(&text[i..]) {
            continue;
        }
        if let Ok(n) = text[start..i].parse() {
            out.push(n);
        }
    }
    out
}

/// Pulls the particle count out of an analyst response. The labelled
/// `Identified Particles Larger Than 10 Microns: <n>` line wins when
/// present; otherwise the last standalone integer is used.
pub fn extract_count(text: &str) -> Option<u64> {
    let labeled = text
        .match_indices(LABELED_COUNT)
        .filter_map(|(at, _)| {
            let rest = text[at + LABELED_COUNT.len()..].trim_start();
            let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
            rest[..digits].parse().ok()
        })
        .last();
    labeled.or_else(|| standalone_integers(text).last().copied())
}

fn stage_count(text: &str, stage: LoopStage) -> Result<u64, Exp2Error> {
    extract_count(text).ok_or(Exp2Error::CountExtractionFailed(stage))
}

/// Runs the two-round critique loop for one image. `image_note` is
/// appended to the first analyst prompt so the analyst knows which image
/// is meant.
pub fn run_critique_loop<A, R>(
    image_id: &str,
    image_note: Option<&str>,
    analyst: &mut A,
    reviewer: &mut R,
    templates: &PromptTemplateSet,
    truth: u64,
) -> Result<CritiqueLoopRecord, Exp2Error>
where
    A: ChatBackend + ?Sized,
    R: ChatBackend + ?Sized,
{
    let mut round1 = templates.exp2_analyst_round1.clone();
    if let Some(note) = image_note {
        round1.push_str("\n\n");
        round1.push_str(note);
    }
    let mut analyst_history = vec![Message::user(round1.clone())];
    let first = analyst
        .complete(&analyst_history)
        .map_err(|source| Exp2Error::Backend { stage: LoopStage::FirstAnswer, source })?;
    let first_answer = stage_count(&first.content, LoopStage::FirstAnswer)?;

    let critique_prompt = build_exp2_reviewer_prompt(templates, &round1, &first.content)?;
    let critique = reviewer
        .complete(&[Message::user(critique_prompt)])
        .map_err(|source| Exp2Error::Backend { stage: LoopStage::Critique, source })?;

    analyst_history.push(first);
    analyst_history.push(Message::user(build_exp2_round2_prompt(templates, &critique.content)));
    let revised = analyst
        .complete(&analyst_history)
        .map_err(|source| Exp2Error::Backend { stage: LoopStage::RevisedAnswer, source })?;
    let revised_answer = stage_count(&revised.content, LoopStage::RevisedAnswer)?;

    Ok(CritiqueLoopRecord::new(image_id, first_answer, critique.content, revised_answer, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp2Summary {
    pub records: Vec<CritiqueLoopRecord>,
    pub improved_count: usize,
    pub improvement_rate: f64,
}

pub const TABLE_HEADERS: [&str; 5] = ["Image", "First", "Revised", "Improved", "Correct"];

impl Exp2Summary {
    /// Rows in the column order of [`TABLE_HEADERS`].
    pub fn table_rows(&self) -> Vec<[String; 5]> {
        self.records
            .iter()
            .map(|r| {
                [
                    r.image_id.clone(),
                    r.first_answer.to_string(),
                    r.revised_answer.to_string(),
                    String::from(if r.improved { "Yes" } else { "No" }),
                    r.correct_answer.to_string(),
                ]
            })
            .collect()
    }
}

/// Recomputes `improved` for every record from its counts, then
/// aggregates.
pub fn summarize_exp2(records: &[CritiqueLoopRecord]) -> Result<Exp2Summary, Exp2Error> {
    if records.is_empty() {
        return Err(Exp2Error::EmptyRecordSet);
    }
    let records: Vec<_> = records
        .iter()
        .map(|r| CritiqueLoopRecord {
            improved: improved(r.first_answer, r.revised_answer, r.correct_answer),
            ..r.clone()
        })
        .collect();
    let improved_count = records.iter().filter(|r| r.improved).count();
    let improvement_rate = improved_count as f64 / records.len() as f64;
    Ok(Exp2Summary { records, improved_count, improvement_rate })
}
