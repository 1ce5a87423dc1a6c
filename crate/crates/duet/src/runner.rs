//! Orchestrates experiment runs over configured backends and writes the
//! run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::Utc;
use duet_core::exp1::{run_round, score_round, GroundTruthMap, RoundConfig, RoundError, RoundRun, TaskScript};
use duet_core::exp2::{run_critique_loop, summarize_exp2, CritiqueLoopRecord, Exp2Error, Exp2Summary};
use duet_core::particles::{calibrate, count_particles, ParticleError};
use duet_core::prompt::build_system_prompt;
use duet_core::{run_debate, BackendError, ChatBackend, DebateError, DebateOutcome, Message};
use serde::{Deserialize, Serialize};

use crate::config::{Config, ConfigError, ANALYST, CRITIC, RESPONDER, REVIEWER};
use crate::imageio::{load_gray, save_rgb_png, ImageIoError, OracleRecord};
use crate::report::{
    render_exp1_summary, render_exp2_summary, write_jsonl, write_transcript, ReportError, RoundRow, RunDir,
    RunManifest, RunMode, TranscriptLine, ROUNDS, TRANSCRIPTS,
};
use crate::script::{read_script, ScriptError};

pub const ORACLE_RECORDS: &str = "oracle.jsonl";
pub const OVERLAYS: &str = "overlays";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Particle(#[from] ParticleError),
    #[error("{0}")]
    Input(String),
    #[error("round {round_id}: {source}")]
    Round { round_id: String, source: RoundError },
    #[error("image {image_id}: {source}")]
    Exp2 { image_id: String, source: Exp2Error },
    #[error(transparent)]
    Debate(#[from] DebateError),
}

impl RunError {
    /// 1 for usage or input problems, 2 for backend failures, 3 when
    /// nothing could be scored.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Report(ReportError::NoScorableRounds) => 3,
            Self::Round { source: RoundError::MalformedTaskScript(_) | RoundError::Transcript(_), .. } => 1,
            Self::Round { .. } | Self::Debate(_) => 2,
            Self::Exp2 { source: Exp2Error::Prompt(_) | Exp2Error::EmptyRecordSet, .. } => 1,
            Self::Exp2 { .. } => 2,
            _ => 1,
        }
    }
}

/// Applies `f` to every item on up to `jobs` threads. Results keep input
/// order whatever the scheduling.
pub fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = f(item);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot filled")).collect()
}

/// Wraps a backend and keeps every request/response pair.
pub struct Recording {
    inner: Box<dyn ChatBackend + Send>,
    role: &'static str,
    log: Vec<(String, String)>,
}

impl Recording {
    pub fn new(inner: Box<dyn ChatBackend + Send>, role: &'static str) -> Self {
        Self { inner, role, log: Vec::new() }
    }

    pub fn lines(&self, round_id: &str) -> Vec<TranscriptLine> {
        self.log
            .iter()
            .map(|(prompt, response)| TranscriptLine::Exchange {
                round_id: round_id.into(),
                role: self.role.into(),
                prompt: prompt.clone(),
                response: response.clone(),
            })
            .collect()
    }
}

impl ChatBackend for Recording {
    fn complete(&mut self, messages: &[Message]) -> Result<Message, BackendError> {
        let reply = self.inner.complete(messages)?;
        let prompt = messages.last().map(|m| m.content.clone()).unwrap_or_default();
        self.log.push((prompt, reply.content.clone()));
        Ok(reply)
    }
}

/// The configured debate settings with the system prompt filled in from
/// templates, flags and objective unless one was given explicitly.
pub fn resolved_debate(config: &Config) -> Result<duet_core::DebateConfig, RunError> {
    let mut debate = config.debate.clone();
    if debate.system_prompt.is_none() {
        let prompt = build_system_prompt(&config.templates, &config.flags, &config.objective)
            .map_err(|e| RunError::Input(e.to_string()))?;
        debate.system_prompt = Some(prompt);
    }
    Ok(debate)
}

fn run_manifest(
    run_id: &str,
    mode: RunMode,
    config: &Config,
    started: chrono::DateTime<Utc>,
    rounds: usize,
) -> RunManifest {
    RunManifest {
        run_id: run_id.into(),
        mode,
        config_digest: config.digest(),
        started,
        finished: Utc::now(),
        round_count: rounds,
    }
}

pub fn run_single_debate(config: &Config, initial: &str) -> Result<DebateOutcome, RunError> {
    let debate = resolved_debate(config)?;
    let mut responder = config.backend(RESPONDER)?.open("debate")?;
    let mut reviewer = config.backend(REVIEWER)?.open("debate")?;
    Ok(run_debate(initial, &mut responder, &mut reviewer, &config.templates, &debate)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exp1Mode {
    Individual,
    Teamwork,
}

#[derive(Debug, Clone)]
pub struct Exp1Request {
    /// One task script, or a directory of `<round id>.jsonl` scripts.
    pub task: PathBuf,
    pub truth: PathBuf,
    pub rounds: Option<usize>,
    pub mode: Exp1Mode,
}

#[derive(Debug, Clone)]
pub struct Exp1Output {
    pub runs: Vec<RoundRun>,
    pub rows: Vec<RoundRow>,
}

fn jsonl_files(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| RunError::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Resolves the task argument into round scripts. A single file is
/// repeated `rounds` times as `round-01`, `round-02`, ...; a directory
/// yields its scripts in name order, truncated to `rounds`.
pub fn load_tasks(task: &Path, rounds: Option<usize>, summarize_tool: &str) -> Result<Vec<TaskScript>, RunError> {
    let named: Vec<(String, PathBuf)> = if task.is_dir() {
        let files = jsonl_files(task)?;
        let n = rounds.unwrap_or(files.len());
        if n > files.len() {
            return Err(RunError::Input(format!(
                "{} holds {} task scripts, {n} requested",
                task.display(),
                files.len()
            )));
        }
        files.into_iter().take(n).map(|p| (stem(&p), p)).collect()
    } else {
        let n = rounds.unwrap_or(1);
        let width = n.to_string().len().max(2);
        (1..=n).map(|i| (format!("round-{i:0width$}"), task.to_path_buf())).collect()
    };
    if named.is_empty() {
        return Err(RunError::Input("no rounds to run".into()));
    }
    named
        .into_iter()
        .map(|(id, path)| {
            let entries = read_script(&path)?;
            TaskScript::new(id.clone(), entries, summarize_tool)
                .map_err(|source| RunError::Round { round_id: id, source })
        })
        .collect()
}

pub fn load_truth(path: &Path) -> Result<GroundTruthMap, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))?;
    let truth: GroundTruthMap =
        serde_json::from_str(&text).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))?;
    truth.validate().map_err(|e| RunError::Input(format!("{}: {e}", path.display())))?;
    Ok(truth)
}

pub fn run_exp1(config: &Config, req: &Exp1Request) -> Result<Exp1Output, RunError> {
    let tasks = load_tasks(&req.task, req.rounds, &config.summarize_tool)?;
    let truth = load_truth(&req.truth)?;
    let round_config = RoundConfig { debate: resolved_debate(config)? };
    let responder_spec = config.backend(RESPONDER)?;
    let reviewer_spec = match req.mode {
        Exp1Mode::Teamwork => Some(config.backend(REVIEWER)?),
        Exp1Mode::Individual => None,
    };

    let results = parallel_map(&tasks, config.jobs, |task| -> Result<RoundRun, RunError> {
        let id = task.round_id();
        let mut responder = responder_spec.open(id)?;
        let mut reviewer = reviewer_spec.map(|s| s.open(id)).transpose()?;
        let reviewer_ref: Option<&mut dyn ChatBackend> = match reviewer.as_mut() {
            Some(b) => Some(b.as_mut()),
            None => None,
        };
        log::info!("round {id} started");
        run_round(task, &mut responder, reviewer_ref, &config.templates, &round_config)
            .map_err(|source| RunError::Round { round_id: id.into(), source })
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows =
        runs.iter().map(|run| RoundRow::new(run.record.clone(), score_round(&run.record, &truth).verdict)).collect();
    Ok(Exp1Output { runs, rows })
}

/// Runs Exp-I and writes the run directory. The manifest and per-round
/// files are written even when no round could be scored.
pub fn execute_exp1(config: &Config, req: &Exp1Request, dir: &RunDir, run_id: &str) -> Result<Exp1Output, RunError> {
    let started = Utc::now();
    let out = run_exp1(config, req)?;
    write_transcript(&dir.path(TRANSCRIPTS), &out.runs)?;
    write_jsonl(&dir.path(ROUNDS), &out.rows)?;
    let mode = match req.mode {
        Exp1Mode::Individual => RunMode::Exp1Individual,
        Exp1Mode::Teamwork => RunMode::Exp1Teamwork,
    };
    dir.write_manifest(&run_manifest(run_id, mode, config, started, out.rows.len()))?;
    dir.write_summary(&render_exp1_summary(&out.rows)?)?;
    Ok(out)
}

/// One fixture row. With both answers present the row is replayed as is;
/// with neither, the analyst and critic backends are asked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRow {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_answer: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revised_answer: Option<u64>,
    pub correct_answer: u64,
}

pub fn load_fixture(path: &Path) -> Result<Vec<FixtureRow>, RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub enum Exp2Source {
    Fixture(PathBuf),
    Images(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Exp2Output {
    pub summary: Exp2Summary,
    pub transcript: Vec<TranscriptLine>,
    pub oracle: Vec<OracleRecord>,
}

struct Exp2Item {
    image_id: String,
    note: Option<String>,
    truth: u64,
    replay: Option<(u64, u64)>,
}

fn critique(config: &Config, item: &Exp2Item) -> Result<(CritiqueLoopRecord, Vec<TranscriptLine>), RunError> {
    if let Some((first, revised)) = item.replay {
        return Ok((CritiqueLoopRecord::new(&item.image_id, first, "", revised, item.truth), Vec::new()));
    }
    let mut analyst = Recording::new(config.backend(ANALYST)?.open(&item.image_id)?, ANALYST);
    let mut critic = Recording::new(config.backend(CRITIC)?.open(&item.image_id)?, CRITIC);
    let record = run_critique_loop(
        &item.image_id,
        item.note.as_deref(),
        &mut analyst,
        &mut critic,
        &config.templates,
        item.truth,
    )
    .map_err(|source| RunError::Exp2 { image_id: item.image_id.clone(), source })?;
    // analyst, critic, analyst: interleave in call order
    let (a, c) = (analyst.lines(&item.image_id), critic.lines(&item.image_id));
    let mut lines = Vec::with_capacity(a.len() + c.len());
    let mut a = a.into_iter();
    lines.extend(a.next());
    lines.extend(c);
    lines.extend(a);
    Ok((record, lines))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| RunError::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| x.eq_ignore_ascii_case("png") || x.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(RunError::Input(format!("no .png or .pgm images in {}", dir.display())));
    }
    Ok(files)
}

/// Counts particles in every image, saving overlays into `overlay_dir`
/// when given.
pub fn oracle_pass(
    config: &Config,
    images: &[PathBuf],
    overlay_dir: Option<&Path>,
) -> Result<Vec<OracleRecord>, RunError> {
    let source = config
        .oracle
        .calibration
        .ok_or_else(|| ConfigError::Invalid("oracle.calibration is required to count particles".into()))?;
    let calibration = calibrate(source)?;
    if let Some(d) = overlay_dir {
        fs::create_dir_all(d).map_err(|e| RunError::Input(format!("{}: {e}", d.display())))?;
    }
    parallel_map(images, config.jobs, |path| {
        let img = load_gray(path)?;
        let result = count_particles(&img, &calibration, &config.oracle.options)?;
        if let Some(d) = overlay_dir {
            save_rgb_png(&d.join(format!("{}.png", stem(path))), &result.overlay)?;
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(OracleRecord::new(name, &result))
    })
    .into_iter()
    .collect()
}

pub fn run_exp2(config: &Config, source: &Exp2Source, overlay_dir: Option<&Path>) -> Result<Exp2Output, RunError> {
    let (items, oracle) = match source {
        Exp2Source::Fixture(path) => {
            let rows = load_fixture(path)?;
            let items = rows
                .into_iter()
                .map(|r| match (r.first_answer, r.revised_answer) {
                    (Some(f), Some(v)) => {
                        Ok(Exp2Item { image_id: r.image_id, note: None, truth: r.correct_answer, replay: Some((f, v)) })
                    }
                    (None, None) => {
                        Ok(Exp2Item { image_id: r.image_id, note: None, truth: r.correct_answer, replay: None })
                    }
                    _ => Err(RunError::Input(format!("fixture row {}: give both answers or neither", r.image_id))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            (items, Vec::new())
        }
        Exp2Source::Images(dir) => {
            let files = image_files(dir)?;
            let oracle = oracle_pass(config, &files, overlay_dir)?;
            let items = files
                .iter()
                .zip(&oracle)
                .map(|(path, rec)| Exp2Item {
                    image_id: stem(path),
                    note: Some(format!("[image: {}]", rec.image)),
                    truth: rec.count as u64,
                    replay: None,
                })
                .collect();
            (items, oracle)
        }
    };
    let results = parallel_map(&items, config.jobs, |item| critique(config, item));
    let mut records = Vec::with_capacity(results.len());
    let mut transcript = Vec::new();
    for r in results {
        let (record, lines) = r?;
        records.push(record);
        transcript.extend(lines);
    }
    let summary = summarize_exp2(&records).map_err(|_| ReportError::EmptyInput)?;
    Ok(Exp2Output { summary, transcript, oracle })
}

pub fn execute_exp2(config: &Config, source: &Exp2Source, dir: &RunDir, run_id: &str) -> Result<Exp2Output, RunError> {
    let started = Utc::now();
    let out = run_exp2(config, source, Some(&dir.path(OVERLAYS)))?;
    write_jsonl(&dir.path(TRANSCRIPTS), &out.transcript)?;
    write_jsonl(&dir.path(ROUNDS), &out.summary.records)?;
    if !out.oracle.is_empty() {
        write_jsonl(&dir.path(ORACLE_RECORDS), &out.oracle)?;
    }
    dir.write_manifest(&run_manifest(run_id, RunMode::Exp2, config, started, out.summary.records.len()))?;
    dir.write_summary(&render_exp2_summary(&out.summary)?)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..100).collect();
        for jobs in [1, 3, 8, 200] {
            let out = parallel_map(&items, jobs, |x| x * x);
            assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
        assert!(parallel_map(&[] as &[u8], 4, |x| *x).is_empty());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(RunError::Report(ReportError::NoScorableRounds).exit_code(), 3);
        let backend = RunError::Round {
            round_id: "r".into(),
            source: RoundError::Responder { seq: 0, source: BackendError::Timeout },
        };
        assert_eq!(backend.exit_code(), 2);
        assert_eq!(RunError::Input("x".into()).exit_code(), 1);
        let malformed = RunError::Round { round_id: "r".into(), source: RoundError::MalformedTaskScript("x".into()) };
        assert_eq!(malformed.exit_code(), 1);
    }

    #[test]
    fn system_prompt_is_filled_in() {
        let cfg = Config::default();
        let d = resolved_debate(&cfg).unwrap();
        assert!(d.system_prompt.unwrap().ends_with(&cfg.objective.text));
    }
}
