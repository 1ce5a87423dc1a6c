//! Run directories, JSON Lines persistence and summary tables.
//!
//! A run directory holds `manifest.json`, `transcripts.jsonl`,
//! `rounds.jsonl`, `summary.md` and `summary.csv`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use duet_core::exp1::{compute_accuracy, format_round_line, RoundRecord, RoundRun, ScoreVerdict};
use duet_core::exp2::{Exp2Summary, TABLE_HEADERS};
use duet_core::{DebateOutcome, Event};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const TRANSCRIPTS: &str = "transcripts.jsonl";
pub const ROUNDS: &str = "rounds.jsonl";
pub const SUMMARY_MD: &str = "summary.md";
pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("nothing to summarise")]
    EmptyInput,
    #[error("no scorable rounds")]
    NoScorableRounds,
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
    #[error("{0} already holds a run")]
    RunDirTaken(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.display().to_string(), source }
}

/// Percentage with one fixed decimal, e.g. `0.19354` gives `19.4%`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}%", fraction * 100.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl ReportTable {
    pub fn new(headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, ReportError> {
        if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != headers.len()) {
            return Err(ReportError::RaggedRow { row, found: r.len(), expected: headers.len() });
        }
        Ok(Self { headers, rows })
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 cells is utf-8")
    }

    pub fn to_markdown(&self) -> String {
        let cell = |s: &String| s.replace('|', "\\|").replace('\n', " ");
        let line = |cells: &[String]| format!("| {} |\n", cells.iter().map(cell).collect::<Vec<_>>().join(" | "));
        let mut out = line(&self.headers);
        out.push_str(&format!("|{}\n", "---|".repeat(self.headers.len())));
        for row in &self.rows {
            out.push_str(&line(row));
        }
        out
    }
}

/// A table plus the markdown report built around it.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSummary {
    pub table: ReportTable,
    pub text: String,
}

/// One line of an Exp-I `rounds.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRow {
    #[serde(flatten)]
    pub record: RoundRecord,
    pub score: ScoreVerdict,
    pub line: String,
}

impl RoundRow {
    pub fn new(record: RoundRecord, score: ScoreVerdict) -> Self {
        let line = format_round_line(&record);
        Self { record, score, line }
    }
}

pub const EXP1_HEADERS: [&str; 5] = ["Round", "Image", "Function calls", "ROI", "Score"];

fn verdict_text(v: ScoreVerdict) -> &'static str {
    match v {
        ScoreVerdict::Correct => "correct",
        ScoreVerdict::Incorrect => "incorrect",
        ScoreVerdict::Unscorable => "unscorable",
    }
}

pub fn render_exp1_summary(rows: &[RoundRow]) -> Result<RenderedSummary, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let scores: Vec<_> = rows
        .iter()
        .map(|r| duet_core::exp1::RoundScore { round_id: r.record.round_id.clone(), verdict: r.score })
        .collect();
    let acc = compute_accuracy(&scores).map_err(|_| ReportError::NoScorableRounds)?;
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.record.round_id.clone(),
                r.record.last_photo_name.clone(),
                r.record.function_call_count.to_string(),
                r.record.final_roi.map_or_else(|| "none".into(), String::from),
                verdict_text(r.score).into(),
            ]
        })
        .collect();
    let table = ReportTable::new(EXP1_HEADERS.map(String::from).to_vec(), body)?;
    let mut text = String::from("# Round summary\n\n");
    for r in rows {
        text.push_str(&r.line);
        text.push('\n');
    }
    text.push('\n');
    text.push_str(&table.to_markdown());
    text.push_str(&format!(
        "\nAccuracy: {} ({} correct, {} incorrect, {} unscorable)\n",
        format_percent(acc.accuracy),
        acc.correct,
        acc.incorrect,
        acc.unscorable
    ));
    Ok(RenderedSummary { table, text })
}

pub fn render_exp2_summary(summary: &Exp2Summary) -> Result<RenderedSummary, ReportError> {
    if summary.records.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let rows = summary.table_rows().into_iter().map(Vec::from).collect();
    let table = ReportTable::new(TABLE_HEADERS.map(String::from).to_vec(), rows)?;
    let text = format!(
        "# Critique loop summary\n\n{}\nImprovement rate: {} ({} of {})\n",
        table.to_markdown(),
        format_percent(summary.improvement_rate),
        summary.improved_count,
        summary.records.len()
    );
    Ok(RenderedSummary { table, text })
}

/// One line of `transcripts.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TranscriptLine {
    Event {
        round_id: String,
        #[serde(flatten)]
        event: Event,
    },
    Debate {
        round_id: String,
        index: usize,
        outcome: DebateOutcome,
    },
    /// One request/response pair with a backend outside a debate.
    Exchange {
        round_id: String,
        role: String,
        prompt: String,
        response: String,
    },
}

/// Driver events first, then one line per debate.
pub fn transcript_lines(run: &RoundRun) -> Vec<TranscriptLine> {
    let round_id = &run.transcript.round_id;
    let events = run
        .transcript
        .events
        .iter()
        .map(|event| TranscriptLine::Event { round_id: round_id.clone(), event: event.clone() });
    let debates = run.record.debates.iter().enumerate().map(|(index, outcome)| TranscriptLine::Debate {
        round_id: round_id.clone(),
        index,
        outcome: outcome.clone(),
    });
    events.chain(debates).collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<usize, ReportError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| ReportError::Io { path: path.display().to_string(), source: e.into() })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(items.len())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ReportError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| ReportError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_transcript(path: &Path, runs: &[RoundRun]) -> Result<usize, ReportError> {
    let lines: Vec<_> = runs.iter().flat_map(transcript_lines).collect();
    write_jsonl(path, &lines)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Exp1Individual,
    Exp1Teamwork,
    Exp2,
    OracleOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub mode: RunMode,
    pub config_digest: String,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub round_count: usize,
}

/// A directory owned by a single run.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory, refusing one that already has a manifest.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, ReportError> {
        let root = root.into();
        if root.join(MANIFEST).exists() {
            return Err(ReportError::RunDirTaken(root.display().to_string()));
        }
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), ReportError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), ReportError> {
        let text = serde_json::to_string_pretty(manifest).expect("manifest serialises");
        self.write_text(MANIFEST, &(text + "\n"))
    }

    pub fn read_manifest(&self) -> Result<RunManifest, ReportError> {
        let path = self.path(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| ReportError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write_summary(&self, summary: &RenderedSummary) -> Result<(), ReportError> {
        self.write_text(SUMMARY_MD, &summary.text)?;
        self.write_text(SUMMARY_CSV, &summary.table.to_csv())
    }
}
