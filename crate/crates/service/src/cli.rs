//! Command-line entry points.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use groundtrack_core::annotations::{read_tracks, write_tracks};
use groundtrack_core::checkpoint::Checkpoint;
use groundtrack_core::metrics::{ca_idf1, ca_mota, map50, match_frames, mota, summary, MatchMode, IOU_THRESHOLD};
use groundtrack_core::model::ForwardMode;
use groundtrack_core::simworld::{export_groot, generate, ground_truth, Scenario, WorldConfig};
use groundtrack_core::tracker::{PromptSchedule, TrackerConfig};
use groundtrack_core::train::{loss_curve_csv, train_epochs, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::server::{ServeContext, Server};
use crate::session::{track_batch, Backend};

#[derive(Debug, Parser)]
#[command(name = "groundtrack", version, about = "Prompt-driven multiple object tracking on a synthetic world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track a scenario and report metrics against its ground truth.
    Track(TrackArgs),
    /// Compare predicted tracks with ground-truth tracks.
    Eval(EvalArgs),
    /// Train weights on the synthetic world.
    Train(TrainArgs),
    /// Generate a scenario file.
    Generate(GenerateArgs),
    /// Serve interactive sessions over websockets.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Scenario JSON file; a fresh default world is generated when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Seed of the generated world when no scenario file is given.
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
    /// Prompt schedule JSON: `[{"frame": 0, "prompt": "..."}, ...]`.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrackerArgs {
    /// Checkpoint to load.
    #[arg(long, required_unless_present = "oracle")]
    pub weights: Option<PathBuf>,
    /// Use ground-truth boxes instead of a model.
    #[arg(long, conflicts_with = "weights")]
    pub oracle: bool,
    #[arg(long, value_enum, default_value = "simplified")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = TrackerConfig::default().gamma)]
    pub gamma: f64,
    #[arg(long = "gamma-reassign", default_value_t = TrackerConfig::default().gamma_reassign)]
    pub gamma_reassign: f64,
    #[arg(long, default_value_t = TrackerConfig::default().t_tlr)]
    pub ttlr: usize,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ModeArg {
    Full,
    Simplified,
}

impl From<ModeArg> for ForwardMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => ForwardMode::Full,
            ModeArg::Simplified => ForwardMode::Simplified,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub tracker: TrackerArgs,
    /// Track records (one JSON object per line).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print one timing line per frame to stderr.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Report only class-agnostic metrics.
    #[arg(long, conflicts_with = "class_aware")]
    pub class_agnostic: bool,
    /// Report only class-aware metrics.
    #[arg(long)]
    pub class_aware: bool,
    /// Also write the report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration JSON; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint that carries training state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
    /// World configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth track records output.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Annotation document output.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub tracker: TrackerArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

impl From<groundtrack_core::Error> for CliError {
    fn from(e: groundtrack_core::Error) -> Self {
        Self {
            code: 1,
            error: e.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub frame: usize,
    pub prompt: String,
}

pub fn read_schedule(path: &Path) -> anyhow::Result<PromptSchedule> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries: Vec<ScheduleEntry> =
        serde_json::from_str(&text).with_context(|| format!("parsing schedule {}", path.display()))?;
    Ok(PromptSchedule::new(entries.into_iter().map(|e| (e.frame, e.prompt)).collect())?)
}

pub fn load_scenario(src: &SourceArgs) -> anyhow::Result<(Scenario, PromptSchedule)> {
    let scenario = match &src.scenario {
        Some(p) => Scenario::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing scenario {}", p.display()))?,
        None => generate(src.seed, &WorldConfig::default())?,
    };
    let schedule = match &src.schedule {
        Some(p) => read_schedule(p)?,
        None => PromptSchedule::new(scenario.schedule.clone())?,
    };
    Ok((scenario, schedule))
}

fn backend(t: &TrackerArgs) -> Result<Backend, CliError> {
    if t.oracle {
        return Ok(Backend::Oracle);
    }
    let path = t.weights.as_ref().expect("clap requires weights without --oracle");
    if !path.is_file() {
        return Err(CliError {
            code: 2,
            error: anyhow!("weights file {} does not exist", path.display()),
        });
    }
    let weights = Checkpoint::load(path)
        .and_then(|c| c.weights())
        .with_context(|| format!("loading weights from {}", path.display()))?;
    Ok(Backend::Network {
        weights: Arc::new(weights),
        mode: t.mode.into(),
    })
}

fn tracker_config(t: &TrackerArgs) -> Result<TrackerConfig, CliError> {
    let c = TrackerConfig {
        gamma: t.gamma,
        gamma_reassign: t.gamma_reassign,
        t_tlr: t.ttlr,
        ..TrackerConfig::default()
    };
    c.validate()?;
    Ok(c)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| anyhow!("{}: schema error at `{}`: {}", path.display(), e.path(), e.inner()))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Track(a) => track(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Train(a) => train(a, out),
        Command::Generate(a) => generate_cmd(a, out),
        Command::Serve(a) => serve(a, out),
    }
}

fn track(a: TrackArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let backend = backend(&a.tracker)?;
    let config = tracker_config(&a.tracker)?;
    let (scenario, schedule) = load_scenario(&a.source)?;
    let (records, stats) = track_batch(&scenario, &schedule, &backend, config)?;
    if a.timing {
        let mode = match &backend {
            Backend::Network { mode, .. } => format!("{mode:?}").to_lowercase(),
            Backend::Oracle => "oracle".into(),
        };
        for s in &stats {
            eprintln!(
                "frame {} mode {mode} branch {:?} {:.3} ms {} flops",
                s.frame,
                s.branch,
                s.elapsed.as_secs_f64() * 1e3,
                s.flops
            );
        }
    }
    if let Some(p) = &a.out {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_tracks(&records, std::io::BufWriter::new(f))?;
    }
    let s = summary(&ground_truth(&scenario), &records)?;
    writeln!(out, "{s}").map_err(anyhow::Error::from)?;
    Ok(())
}

fn read_track_file(path: &Path) -> anyhow::Result<Vec<groundtrack_core::annotations::TrackRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_tracks(std::io::BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let gt = read_track_file(&a.gt)?;
    let pred = read_track_file(&a.pred)?;
    let mut rows: Vec<(&str, String)> = Vec::new();
    if !a.class_aware {
        let (_, c) = match_frames(&gt, &pred, IOU_THRESHOLD, MatchMode::ClassAgnostic)?;
        rows.push(("ca_mota", ca_mota(&c)?.to_string()));
        rows.push(("ca_idf1", ca_idf1(&gt, &pred, MatchMode::ClassAgnostic)?.to_string()));
        rows.push(("ids", c.pooled.id_switches.to_string()));
    }
    if !a.class_agnostic {
        let (_, c) = match_frames(&gt, &pred, IOU_THRESHOLD, MatchMode::ClassAware)?;
        rows.push(("mota", mota(&c.pooled)?.to_string()));
        rows.push(("idf1", ca_idf1(&gt, &pred, MatchMode::ClassAware)?.to_string()));
    }
    rows.push(("map50", map50(&gt, &pred)?.to_string()));
    for (k, v) in &rows {
        writeln!(out, "{k:<10}{v:>22}").map_err(anyhow::Error::from)?;
    }
    if let Some(p) = &a.out {
        let header: Vec<&str> = rows.iter().map(|r| r.0).collect();
        let values: Vec<&str> = rows.iter().map(|r| r.1.as_str()).collect();
        fs::write(p, format!("{}\n{}\n", header.join(","), values.join(",")))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut state = match &a.resume {
        Some(p) => Checkpoint::load(p)
            .and_then(|c| c.train_state())
            .with_context(|| format!("resuming from {}", p.display()))?,
        None => {
            let mut cfg: TrainConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            TrainState::new(cfg)?
        }
    };
    let epochs = a.epochs.unwrap_or(state.config.epochs);
    train_epochs(&mut state, epochs, |e| {
        let _ = writeln!(
            out,
            "epoch {} l_tp {:.5} l_it {:.5} l_giou {:.5} total {:.5}",
            e.epoch, e.components.alignment, e.components.objectness, e.components.giou, e.total
        );
    })?;
    Checkpoint::from_state(&state).save(&a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    fs::write(&csv, loss_curve_csv(&state.curve)).with_context(|| format!("writing {}", csv.display()))?;
    Ok(())
}

fn generate_cmd(a: GenerateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg: WorldConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => WorldConfig::default(),
    };
    let s = generate(a.seed, &cfg)?;
    fs::write(&a.out, s.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.gt {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        write_tracks(&ground_truth(&s), std::io::BufWriter::new(f))?;
    }
    if let Some(p) = &a.annotations {
        fs::write(p, export_groot(&s)?.write()?).with_context(|| format!("writing {}", p.display()))?;
    }
    writeln!(out, "{} objects, {} frames, prompt `{}`", s.objects.len(), s.frames(), s.prompt_at(0))
        .map_err(anyhow::Error::from)?;
    Ok(())
}

fn serve(a: ServeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let backend = backend(&a.tracker)?;
    let config = tracker_config(&a.tracker)?;
    let (scenario, schedule) = load_scenario(&a.source)?;
    let server = Server::bind(
        (a.host.as_str(), a.port),
        ServeContext {
            scenario: Arc::new(scenario),
            schedule,
            backend,
            config,
        },
    )
    .with_context(|| format!("binding {}:{}", a.host, a.port))?;
    writeln!(out, "listening on ws://{}", server.local_addr().map_err(anyhow::Error::from)?)
        .map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;
    server.run().map_err(anyhow::Error::from)?;
    Ok(())
}
