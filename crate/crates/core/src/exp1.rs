//! Region-of-interest experiment: replay a scripted task driver, attach a
//! debate to every `image_analysis` call, then extract and score the
//! final ROI label.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ScriptEntry, ScriptedBackend};
use crate::chat::{EventKind, Message, Role, Transcript, TranscriptError};
use crate::debate::{run_debate, DebateConfig, DebateError, DebateOutcome};
use crate::prompt::PromptTemplateSet;

pub const TAKE_IMAGE: &str = "take_image";
pub const IMAGE_ANALYSIS: &str = "image_analysis";
pub const DEFAULT_SUMMARIZE_TOOL: &str = "list-summarize";
const ROI_SENTENCE: &str = "The final largest ROI is ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoundError {
    #[error("malformed task script: {0}")]
    MalformedTaskScript(String),
    #[error("driver failed before event {seq}: {source}")]
    Driver { seq: u64, source: BackendError },
    #[error("responder failed at event {seq}: {source}")]
    Responder { seq: u64, source: BackendError },
    #[error("debate at event {seq} failed: {source}")]
    Debate { seq: u64, source: DebateError },
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

/// The scripted driver for one round. Each entry is one driver turn: its
/// text becomes an assistant event and its tool calls follow in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskScript {
    round_id: String,
    entries: Vec<ScriptEntry>,
    summarize_tool: String,
}

impl TaskScript {
    /// Checks that the summarize tool is called exactly once and that the
    /// call is the last event of the script.
    pub fn new(
        round_id: impl Into<String>,
        entries: Vec<ScriptEntry>,
        summarize_tool: impl Into<String>,
    ) -> Result<Self, RoundError> {
        let round_id = round_id.into();
        let summarize_tool = summarize_tool.into();
        if round_id.is_empty() {
            return Err(RoundError::MalformedTaskScript("empty round id".into()));
        }
        let calls: Vec<&str> = entries.iter().flat_map(|e| e.tool_calls.iter().map(|c| c.name.as_str())).collect();
        let summarize_count = calls.iter().filter(|n| **n == summarize_tool).count();
        if summarize_count != 1 {
            return Err(RoundError::MalformedTaskScript(format!(
                "expected exactly one `{summarize_tool}` call, found {summarize_count}"
            )));
        }
        let terminal = entries.last().and_then(|e| e.tool_calls.last()).map(|c| c.name.as_str());
        if terminal != Some(summarize_tool.as_str()) {
            return Err(RoundError::MalformedTaskScript(format!("`{summarize_tool}` must be the final event")));
        }
        Ok(Self { round_id, entries, summarize_tool })
    }

    pub fn round_id(&self) -> &str {
        &self.round_id
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    pub fn summarize_tool(&self) -> &str {
        &self.summarize_tool
    }

    /// Image names in the order the driver captures them.
    pub fn image_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .flat_map(|e| &e.tool_calls)
            .filter(|c| c.name == TAKE_IMAGE)
            .filter_map(|c| c.args.get("name").map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_id: String,
    pub last_photo_name: String,
    pub final_roi: Option<char>,
    pub function_call_count: usize,
    pub debates: Vec<DebateOutcome>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// A finished round together with its full event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRun {
    pub record: RoundRecord,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundConfig {
    pub debate: DebateConfig,
}

fn analysis_request(image: &str, description: Option<&String>) -> String {
    match description {
        Some(d) if !d.is_empty() => format!("image_analysis was called on image `{image}`.\n{d}"),
        _ => format!("image_analysis was called on image `{image}`."),
    }
}

/// Replays the driver of `task`. With `reviewer` set every analysis is
/// debated; without it the responder's first analysis stands alone.
pub fn run_round<R>(
    task: &TaskScript,
    responder: &mut R,
    mut reviewer: Option<&mut dyn ChatBackend>,
    templates: &PromptTemplateSet,
    config: &RoundConfig,
) -> Result<RoundRun, RoundError>
where
    R: ChatBackend + ?Sized,
{
    let mut transcript = Transcript::new(task.round_id.clone())?;
    let mut driver = ScriptedBackend::new(task.entries.clone());
    let mut driver_inbox = Vec::new();
    if let Some(system) = &config.debate.system_prompt {
        driver_inbox.push(Message::system(system.clone()));
    }
    driver_inbox.push(Message::user("Begin the round."));

    let mut last_photo: Option<String> = None;
    let mut debates = Vec::new();
    let mut warnings = Vec::new();
    let mut final_roi = None;

    while driver.remaining() > 0 {
        let seq = transcript.len() as u64;
        let entry = driver.next_entry(&driver_inbox).map_err(|source| RoundError::Driver { seq, source })?;
        if !entry.response.is_empty() {
            transcript.push(EventKind::AssistantText { text: entry.response.clone() })?;
            driver_inbox.push(Message::assistant(entry.response.clone()));
        }
        for call in &entry.tool_calls {
            let seq = transcript.push(EventKind::ToolCall { name: call.name.clone(), args: call.args.clone() })?;
            let payload = if call.name == task.summarize_tool {
                match extract_final_roi(&entry.response) {
                    Ok(found) => {
                        final_roi = Some(found.label);
                        warnings.extend(found.warnings);
                    }
                    Err(e) => warnings.push(e.to_string()),
                }
                continue;
            } else if call.name == TAKE_IMAGE {
                let name = call.args.get("name").ok_or_else(|| {
                    RoundError::MalformedTaskScript(format!("`{TAKE_IMAGE}` at event {seq} has no `name` argument"))
                })?;
                last_photo = Some(name.clone());
                format!("Image captured and saved as {name}.")
            } else if call.name == IMAGE_ANALYSIS {
                let image = call.args.get("image").or(last_photo.as_ref()).ok_or_else(|| {
                    RoundError::MalformedTaskScript(format!(
                        "`{IMAGE_ANALYSIS}` at event {seq} has no image to analyse"
                    ))
                })?;
                let mut request = Vec::new();
                if let Some(system) = &config.debate.system_prompt {
                    request.push(Message::system(system.clone()));
                }
                request.push(Message::user(analysis_request(image, call.args.get("description"))));
                let initial = responder.complete(&request).map_err(|source| RoundError::Responder { seq, source })?;
                let outcome = match reviewer.as_deref_mut() {
                    Some(reviewer) => run_debate(&initial.content, responder, reviewer, templates, &config.debate)
                        .map_err(|source| RoundError::Debate { seq, source })?,
                    None => DebateOutcome::unreviewed(initial.content),
                };
                let payload = outcome.final_text.clone();
                debates.push(outcome);
                payload
            } else {
                String::from("ok")
            };
            transcript.push(EventKind::ToolResult { name: call.name.clone(), payload: payload.clone() })?;
            driver_inbox.push(Message::new(Role::Tool, payload));
        }
    }

    let last_photo_name = last_photo.unwrap_or_else(|| {
        warnings.push(String::from("no image was captured in this round"));
        String::new()
    });
    let function_call_count = count_image_analysis_calls(&transcript);
    debug_assert_eq!(function_call_count, debates.len());
    Ok(RoundRun {
        record: RoundRecord {
            round_id: task.round_id.clone(),
            last_photo_name,
            final_roi,
            function_call_count,
            debates,
            warnings,
        },
        transcript,
    })
}

pub fn count_image_analysis_calls(transcript: &Transcript) -> usize {
    transcript
        .events
        .iter()
        .filter(|e| matches!(&e.kind, EventKind::ToolCall { name, .. } if name == IMAGE_ANALYSIS))
        .count()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoiError {
    #[error("no \"The final largest ROI is <label>\" statement found")]
    MissingRoiStatement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiExtraction {
    pub label: char,
    pub warnings: Vec<String>,
}

/// Finds the last `The final largest ROI is <l>` sentence whose label is a
/// single letter. Labels are returned lower-cased. Repeated statements and
/// multi-letter labels produce warnings.
pub fn extract_final_roi(text: &str) -> Result<RoiExtraction, RoiError> {
    let mut labels = Vec::new();
    let mut warnings = Vec::new();
    for (at, _) in text.match_indices(ROI_SENTENCE) {
        let rest = &text[at + ROI_SENTENCE.len()..];
        let token: String = rest.chars().take_while(|c| c.is_alphanumeric()).collect();
        let mut chars = token.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => labels.push(c.to_ascii_lowercase()),
            _ => warnings.push(format!("ignored ROI statement with label `{token}`")),
        }
    }
    let label = *labels.last().ok_or(RoiError::MissingRoiStatement)?;
    if labels.len() > 1 {
        warnings.push(format!("ROI statement appeared {} times; using the last", labels.len()));
    }
    Ok(RoiExtraction { label, warnings })
}

/// Acceptable labels per image. An empty set means the image has no
/// correct answer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruthMap {
    pub entries: BTreeMap<String, BTreeSet<char>>,
}

impl GroundTruthMap {
    pub fn insert<I: IntoIterator<Item = char>>(&mut self, image: impl Into<String>, labels: I) {
        self.entries.insert(image.into(), labels.into_iter().map(|c| c.to_ascii_lowercase()).collect());
    }

    /// Returns the first image whose label set holds a non-letter.
    pub fn validate(&self) -> Result<(), String> {
        match self.entries.iter().find(|(_, labels)| labels.iter().any(|c| !c.is_ascii_alphabetic())) {
            Some((image, _)) => Err(image.clone()),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVerdict {
    Correct,
    Incorrect,
    Unscorable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundScore {
    pub round_id: String,
    pub verdict: ScoreVerdict,
}

pub fn score_round(record: &RoundRecord, truth: &GroundTruthMap) -> RoundScore {
    let verdict = match (record.final_roi, truth.entries.get(&record.last_photo_name)) {
        (Some(label), Some(ok)) if ok.contains(&label.to_ascii_lowercase()) => ScoreVerdict::Correct,
        (Some(_), Some(_)) => ScoreVerdict::Incorrect,
        _ => ScoreVerdict::Unscorable,
    };
    RoundScore { round_id: record.round_id.clone(), verdict }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub correct: usize,
    pub incorrect: usize,
    pub unscorable: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no scorable rounds")]
pub struct NoScorableRounds;

pub fn compute_accuracy(scores: &[RoundScore]) -> Result<AccuracySummary, NoScorableRounds> {
    let tally = |v| scores.iter().filter(|s| s.verdict == v).count();
    let (correct, incorrect, unscorable) =
        (tally(ScoreVerdict::Correct), tally(ScoreVerdict::Incorrect), tally(ScoreVerdict::Unscorable));
    if correct + incorrect == 0 {
        return Err(NoScorableRounds);
    }
    Ok(AccuracySummary { correct, incorrect, unscorable, accuracy: correct as f64 / (correct + incorrect) as f64 })
}

/// One line of the per-round report,
/// `<id> * Number of function calls: <n> * ROI Identified: <l>.`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundLine {
    pub round_id: String,
    pub function_calls: usize,
    pub roi: Option<char>,
}

const CALLS_FIELD: &str = " * Number of function calls: ";
const ROI_FIELD: &str = " * ROI Identified: ";
const NO_ROI: &str = "none";

impl From<&RoundRecord> for RoundLine {
    fn from(r: &RoundRecord) -> Self {
        Self { round_id: r.round_id.clone(), function_calls: r.function_call_count, roi: r.final_roi }
    }
}

impl fmt::Display for RoundLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{CALLS_FIELD}{}{ROI_FIELD}", self.round_id, self.function_calls)?;
        match self.roi {
            Some(c) => write!(f, "{c}."),
            None => write!(f, "{NO_ROI}."),
        }
    }
}

pub fn format_round_line(record: &RoundRecord) -> String {
    RoundLine::from(record).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a round line: {0}")]
pub struct RoundLineError(pub String);

pub fn parse_round_line(line: &str) -> Result<RoundLine, RoundLineError> {
    let bad = || RoundLineError(line.to_string());
    let body = line.strip_suffix('.').ok_or_else(bad)?;
    let calls_at = body.rfind(CALLS_FIELD).ok_or_else(bad)?;
    let (round_id, rest) = (&body[..calls_at], &body[calls_at + CALLS_FIELD.len()..]);
    let (calls, roi) = rest.split_once(ROI_FIELD).ok_or_else(bad)?;
    if round_id.is_empty() || calls.is_empty() || !calls.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let function_calls = calls.parse().map_err(|_| bad())?;
    let roi = if roi == NO_ROI {
        None
    } else {
        let mut chars = roi.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => Some(c),
            _ => return Err(bad()),
        }
    };
    Ok(RoundLine { round_id: round_id.to_string(), function_calls, roi })
}
