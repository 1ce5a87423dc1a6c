use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use duet::config::{BackendSpec, Config, ANALYST, CRITIC, RESPONDER, REVIEWER};
use duet::imageio::{load_gray, save_rgb_png, OracleRecord};
use duet::report::{
    read_jsonl, render_exp1_summary, render_exp2_summary, ReportError, RoundRow, RunDir, RunMode, ROUNDS,
};
use duet::runner::{execute_exp1, execute_exp2, run_single_debate, Exp1Mode, Exp1Request, Exp2Source, RunError};
use duet_core::exp2::{summarize_exp2, CritiqueLoopRecord};
use duet_core::particles::{calibrate, count_particles, CalibrationSource, Connectivity, Rect, ThresholdMode};

#[derive(Parser)]
#[command(
    name = "duet",
    version,
    about = "Reviewer/responder debate runs, experiment harnesses and a particle counter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single debates between responder and reviewer.
    Debate {
        #[command(subcommand)]
        command: DebateCommand,
    },
    /// Multi-round ROI identification runs.
    Exp1 {
        #[command(subcommand)]
        command: Exp1Command,
    },
    /// Two-round particle-count critique runs.
    Exp2 {
        #[command(subcommand)]
        command: Exp2Command,
    },
    /// Classical particle counting.
    Oracle {
        #[command(subcommand)]
        command: OracleCommand,
    },
    /// Re-renders the summary of a finished run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for independent rounds or images.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum DebateCommand {
    Run(DebateArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("initial_text").required(true).args(["initial", "initial_file"])))]
struct DebateArgs {
    #[command(flatten)]
    common: Common,
    /// The responder's first answer.
    #[arg(long)]
    initial: Option<String>,
    /// File holding the responder's first answer.
    #[arg(long)]
    initial_file: Option<PathBuf>,
    /// Scripted responder (JSONL file).
    #[arg(long)]
    responder: Option<PathBuf>,
    /// Scripted reviewer (JSONL file).
    #[arg(long)]
    reviewer: Option<PathBuf>,
    /// Review cycles before falling back to the latest answer.
    #[arg(long)]
    max_cycles: Option<u32>,
    /// Writes the outcome JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Exp1Command {
    Run(Exp1Args),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Individual,
    Teamwork,
}

#[derive(Args)]
struct Exp1Args {
    #[command(flatten)]
    common: Common,
    /// Number of rounds to run.
    #[arg(long)]
    rounds: Option<usize>,
    /// `teamwork` sends each analysis through the reviewer debate; `individual` keeps the first answer.
    #[arg(long, value_enum, default_value = "teamwork")]
    mode: ModeArg,
    /// Driver task script, or a directory of `<round id>.jsonl` scripts.
    #[arg(long)]
    task: PathBuf,
    /// Ground truth JSON: image name to acceptable ROI labels.
    #[arg(long)]
    truth: PathBuf,
    /// Scripted responder: JSONL file or per-round directory.
    #[arg(long)]
    responder: Option<PathBuf>,
    /// Scripted reviewer: JSONL file or per-round directory.
    #[arg(long)]
    reviewer: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Identifier recorded in the manifest; defaults to the directory name.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand)]
enum Exp2Command {
    Run(Exp2Args),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["images", "fixture"])))]
struct Exp2Args {
    #[command(flatten)]
    common: Common,
    /// Directory of grayscale PNG/PGM images counted by the oracle.
    #[arg(long)]
    images: Option<PathBuf>,
    /// JSON list of {image_id, first_answer?, revised_answer?, correct_answer}.
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Scripted analyst: JSONL file or per-image directory.
    #[arg(long)]
    analyst: Option<PathBuf>,
    /// Scripted critic: JSONL file or per-image directory.
    #[arg(long)]
    critic: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Identifier recorded in the manifest; defaults to the directory name.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand)]
enum OracleCommand {
    Count(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ConnectivityArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

#[derive(Args)]
#[command(group(ArgGroup::new("scale").args(["um_per_px", "bar_um"])))]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// Grayscale PNG or PGM image.
    #[arg(long)]
    image: PathBuf,
    /// Direct calibration in microns per pixel.
    #[arg(long)]
    um_per_px: Option<f64>,
    /// Physical scale-bar length in microns.
    #[arg(long, requires_all = ["bar_px", "exclude"])]
    bar_um: Option<f64>,
    /// Scale-bar length in pixels.
    #[arg(long, requires = "bar_um")]
    bar_px: Option<u32>,
    /// Excluded rectangle as x,y,w,h.
    #[arg(long, value_parser = parse_rect)]
    exclude: Option<Rect>,
    /// Particles must exceed this area in square microns.
    #[arg(long)]
    min_area_um2: Option<f64>,
    /// Pixel neighbourhood used for labelling.
    #[arg(long, value_enum)]
    connectivity: Option<ConnectivityArg>,
    /// `otsu` or a fixed level 0-255.
    #[arg(long, value_parser = parse_threshold)]
    threshold: Option<ThresholdMode>,
    /// Writes the tinted RGB overlay PNG here.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `exp1 run` or `exp2 run`.
    run_dir: PathBuf,
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    let parts: Vec<u32> =
        s.split(',').map(|p| p.trim().parse::<u32>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match parts[..] {
        [x, y, w, h] => Ok(Rect::new(x, y, w, h)),
        _ => Err(format!("expected x,y,w,h, got `{s}`")),
    }
}

fn parse_threshold(s: &str) -> Result<ThresholdMode, String> {
    if s.eq_ignore_ascii_case("otsu") {
        return Ok(ThresholdMode::Otsu);
    }
    s.parse::<u8>().map(ThresholdMode::Fixed).map_err(|_| format!("expected `otsu` or 0-255, got `{s}`"))
}

/// An error paired with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: error.into() }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Self { code: e.exit_code(), error: e.into() }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        RunError::from(e).into()
    }
}

fn load_config(common: &Common, overrides: &[(&str, &Option<PathBuf>)]) -> Result<Config, Failure> {
    let mut config = Config::load_or_default(common.config.as_deref()).map_err(Failure::usage)?;
    if let Some(jobs) = common.jobs {
        config.jobs = jobs;
    }
    for (role, path) in overrides {
        if let Some(path) = path {
            config.backends.insert((*role).into(), BackendSpec::scripted(path.clone()));
        }
    }
    config.validate().map_err(Failure::usage)?;
    Ok(config)
}

fn run_id_for(out: &Path, given: Option<String>) -> String {
    given.unwrap_or_else(|| out.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()))
}

fn debate(args: DebateArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.common, &[(RESPONDER, &args.responder), (REVIEWER, &args.reviewer)])?;
    if let Some(n) = args.max_cycles {
        config.debate.max_review_cycles = n;
        config.validate().map_err(Failure::usage)?;
    }
    let initial = match (args.initial, args.initial_file) {
        (Some(text), _) => text,
        (None, Some(path)) => {
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).map_err(Failure::usage)?
        }
        (None, None) => unreachable!("clap requires one of the two"),
    };
    let outcome = run_single_debate(&config, &initial)?;
    let json = serde_json::to_string_pretty(&outcome).expect("outcome serialises");
    if let Some(out) = args.out {
        fs::write(&out, format!("{json}\n"))
            .with_context(|| format!("writing {}", out.display()))
            .map_err(Failure::usage)?;
    }
    println!("{json}");
    Ok(())
}

fn exp1(args: Exp1Args) -> Result<(), Failure> {
    let config = load_config(&args.common, &[(RESPONDER, &args.responder), (REVIEWER, &args.reviewer)])?;
    let dir = RunDir::create(&args.out)?;
    let req = Exp1Request {
        task: args.task,
        truth: args.truth,
        rounds: args.rounds,
        mode: match args.mode {
            ModeArg::Individual => Exp1Mode::Individual,
            ModeArg::Teamwork => Exp1Mode::Teamwork,
        },
    };
    let out = execute_exp1(&config, &req, &dir, &run_id_for(&args.out, args.run_id))?;
    for row in &out.rows {
        println!("{}", row.line);
    }
    let text = fs::read_to_string(dir.path(duet::report::SUMMARY_MD)).unwrap_or_default();
    if let Some(acc) = text.lines().find(|l| l.starts_with("Accuracy:")) {
        println!("{acc}");
    }
    Ok(())
}

fn exp2(args: Exp2Args) -> Result<(), Failure> {
    let config = load_config(&args.common, &[(ANALYST, &args.analyst), (CRITIC, &args.critic)])?;
    let source = match (args.images, args.fixture) {
        (Some(dir), _) => Exp2Source::Images(dir),
        (None, Some(path)) => Exp2Source::Fixture(path),
        (None, None) => unreachable!("clap requires one of the two"),
    };
    let dir = RunDir::create(&args.out)?;
    let out = execute_exp2(&config, &source, &dir, &run_id_for(&args.out, args.run_id))?;
    print!("{}", render_exp2_summary(&out.summary)?.text);
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.common, &[])?;
    let source = match (args.um_per_px, args.bar_um, args.bar_px, args.exclude) {
        (Some(um), _, _, exclusion_region) => {
            Some(CalibrationSource::Direct { microns_per_pixel: um, exclusion_region })
        }
        (None, Some(physical_length_um), Some(pixel_length), Some(exclusion_region)) => {
            Some(CalibrationSource::Bar { physical_length_um, pixel_length, exclusion_region })
        }
        _ => config.oracle.calibration,
    };
    let source = source.ok_or_else(|| {
        Failure::usage(anyhow!("give --um-per-px or --bar-um/--bar-px/--exclude, or set oracle.calibration"))
    })?;
    let options = &mut config.oracle.options;
    if let Some(a) = args.min_area_um2 {
        options.min_area_um2 = a;
    }
    if let Some(c) = args.connectivity {
        options.connectivity = match c {
            ConnectivityArg::Four => Connectivity::Four,
            ConnectivityArg::Eight => Connectivity::Eight,
        };
    }
    if let Some(t) = args.threshold {
        options.threshold = t;
    }
    let calibration = calibrate(source).map_err(Failure::usage)?;
    let image = load_gray(&args.image).map_err(Failure::usage)?;
    let result = count_particles(&image, &calibration, &config.oracle.options).map_err(Failure::usage)?;
    if let Some(path) = &args.overlay {
        save_rgb_png(path, &result.overlay).map_err(Failure::usage)?;
    }
    let name = args.image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    println!("{}", serde_json::to_string_pretty(&OracleRecord::new(name, &result)).expect("record serialises"));
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let dir = RunDir::open(&args.run_dir);
    let manifest = dir.read_manifest()?;
    let rounds = dir.path(ROUNDS);
    let summary = match manifest.mode {
        RunMode::Exp1Individual | RunMode::Exp1Teamwork => render_exp1_summary(&read_jsonl::<RoundRow>(&rounds)?)?,
        RunMode::Exp2 => {
            let records: Vec<CritiqueLoopRecord> = read_jsonl(&rounds)?;
            let summary = summarize_exp2(&records).map_err(|_| ReportError::EmptyInput)?;
            render_exp2_summary(&summary)?
        }
        RunMode::OracleOnly => return Err(Failure::usage(anyhow!("oracle-only runs have no summary"))),
    };
    println!("run {} ({:?}), config {}", manifest.run_id, manifest.mode, manifest.config_digest);
    print!("{}", summary.text);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Debate { command: DebateCommand::Run(a) } => debate(a),
        Command::Exp1 { command: Exp1Command::Run(a) } => exp1(a),
        Command::Exp2 { command: Exp2Command::Run(a) } => exp2(a),
        Command::Oracle { command: OracleCommand::Count(a) } => oracle(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
