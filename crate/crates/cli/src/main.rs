//! `lanedep`: extraction, synthesis, fitting, sampling and closed-loop
//! evaluation of lane departure events from the command line.

mod meta;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use lanedep::bgmm::{em_fit, BgmModel, EmConfig, MomentMethod};
use lanedep::metrics::{departure_area, evaluate_batch};
use lanedep::sampler::{sample_event_batch, Noise, SampledEvent};
use lanedep::synth::{generate_corpus, GroundTruthSpec};
use lanedep::trace::io::{read_features_file, read_trace_file, write_features_file, write_trace_file};
use lanedep::trace::{extract_features, EventFilterCriteria, FeatureVector, Side, TrajectoryTrace};
use lanedep::vehicle::{simulate_event_with, Controller, VehicleConfig};

use meta::RunMeta;

const FEATURES_FILE: &str = "features.csv";
const TRACES_DIR: &str = "traces";

#[derive(Parser, Debug)]
#[command(name = "lanedep", version, about = "Stochastic lane departure model toolkit")]
struct Cli {
    /// Top-level seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Vehicle and controller configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract feature vectors from a directory of trace CSV files.
    Extract(ExtractArgs),
    /// Generate a synthetic corpus from a ground-truth mixture.
    Synth(SynthArgs),
    /// Fit a bounded Gaussian mixture to a feature file.
    Fit(FitArgs),
    /// Draw events from a fitted model.
    Sample(SampleArgs),
    /// Replay one trace with the correction controller.
    Simulate(SimulateArgs),
    /// Compare departure areas with and without the controller.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    trace_dir: PathBuf,
    #[arg(long, default_value_t = EventFilterCriteria::default().min_duration)]
    min_duration: f64,
    #[arg(long, default_value_t = EventFilterCriteria::default().max_duration)]
    max_duration: f64,
    #[arg(long, default_value_t = EventFilterCriteria::default().min_mean_speed)]
    min_speed: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Ground-truth spec (JSON); the bundled spec is used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Side of the bundled spec.
    #[arg(long, value_enum, default_value_t = SideArg::Left)]
    side: SideArg,
    /// Override the corpus size.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    features: PathBuf,
    /// Component count.
    #[arg(long, conflicts_with = "k_range")]
    k: Option<usize>,
    /// Inclusive range `A..B`; fits every K and keeps the lowest BIC.
    #[arg(long)]
    k_range: Option<String>,
    /// Only fit events of this side.
    #[arg(long, value_enum)]
    side: Option<SideArg>,
    /// EM settings (JSON); flags below override it.
    #[arg(long)]
    em_config: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// `qmc` or `closed-form`.
    #[arg(long)]
    moment_method: Option<String>,
    #[arg(long)]
    qmc_points: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    model: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0.1)]
    ts: f64,
    #[arg(long, value_enum, default_value_t = NoiseArg::On)]
    noise: NoiseArg,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    trace: PathBuf,
    /// Feature file holding the event's row; extracted from the trace when omitted.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long, value_enum, default_value_t = ControllerArg::On)]
    controller: ControllerArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Event directories as written by `sample` or `synth`.
    #[arg(required = true)]
    events: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SideArg {
    Left,
    Right,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Side {
        match s {
            SideArg::Left => Side::Left,
            SideArg::Right => Side::Right,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseArg {
    Off,
    On,
}

impl From<NoiseArg> for Noise {
    fn from(n: NoiseArg) -> Noise {
        match n {
            NoiseArg::Off => Noise::Off,
            NoiseArg::On => Noise::On,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ControllerArg {
    Off,
    On,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

/// The error chain joined with `: `, skipping causes already spelled out
/// by the message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// 3 for numerical failures inside the library, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<lanedep::Error>()) {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match &cli.command {
        Command::Extract(a) => cmd_extract(cli, a),
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Fit(a) => cmd_fit(cli, a),
        Command::Sample(a) => cmd_sample(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
    }
}

fn vehicle_config(cli: &Cli) -> anyhow::Result<VehicleConfig> {
    match &cli.config {
        Some(path) => Ok(VehicleConfig::load(path)?),
        None => Ok(VehicleConfig::default()),
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Trace CSV files of an event directory, sorted by name. Traces live in a
/// `traces/` subdirectory when one exists.
fn trace_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let nested = dir.join(TRACES_DIR);
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut files = Vec::new();
    for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let is_csv = path.extension().is_some_and(|e| e == "csv");
        let is_features = path.file_name().is_some_and(|n| n == FEATURES_FILE);
        if path.is_file() && is_csv && !is_features {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn event_name(i: usize) -> String {
    format!("event_{i:05}.csv")
}

/// Writes `traces/event_NNNNN.csv` and `features.csv` under `dir`.
fn write_events(dir: &Path, traces: &[TrajectoryTrace], features: &[FeatureVector]) -> anyhow::Result<()> {
    let trace_dir = dir.join(TRACES_DIR);
    create_dir(&trace_dir)?;
    traces
        .par_iter()
        .enumerate()
        .try_for_each(|(i, t)| write_trace_file(&trace_dir.join(event_name(i)), t))?;
    write_features_file(&dir.join(FEATURES_FILE), features)?;
    Ok(())
}

#[derive(Serialize)]
struct Rejection {
    file: String,
    reason: String,
}

fn cmd_extract(cli: &Cli, a: &ExtractArgs) -> anyhow::Result<()> {
    let criteria = EventFilterCriteria {
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        min_mean_speed: a.min_speed,
    };
    criteria.validate()?;
    let files = trace_files(&a.trace_dir)?;
    let results: Vec<_> = files
        .par_iter()
        .map(|path| read_trace_file(path, None).and_then(|t| extract_features(&t, &criteria)))
        .collect();
    let mut features = Vec::new();
    let mut rejected = Vec::new();
    for (path, result) in files.iter().zip(results) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match result {
            Ok(f) => features.push(f),
            Err(e) => {
                warn!("skipping {name}: {e}");
                rejected.push(Rejection {
                    file: name,
                    reason: e.to_string(),
                });
            }
        }
    }
    let out = out_path(cli, FEATURES_FILE);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_features_file(&out, &features)?;
    let log_path = sibling(&out, "rejected.json");
    write_text(&log_path, &(serde_json::to_string_pretty(&rejected)? + "\n"))?;
    info!("extracted {} of {} traces", features.len(), files.len());
    RunMeta::new("extract", cli.seed)
        .config(&criteria)?
        .inputs(&files)?
        .write_for(&out)
}

/// `path` with its file name replaced by `<stem>.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(path) => GroundTruthSpec::load(path)?,
        None => GroundTruthSpec::default_for(a.side.into()),
    };
    if let Some(n) = a.n {
        spec.n = n;
    }
    if cli.seed != 0 {
        spec.seed = cli.seed;
    }
    let (traces, features) = generate_corpus(&spec)?;
    let dir = out_path(cli, "corpus");
    create_dir(&dir)?;
    write_events(&dir, &traces, &features)?;
    write_text(&dir.join("ground_truth.json"), &(spec.to_json_string()? + "\n"))?;
    let inputs: Vec<PathBuf> = a.spec.iter().cloned().collect();
    RunMeta::new("synth", spec.seed)
        .config(&spec)?
        .inputs(&inputs)?
        .write_in(&dir)
}

fn parse_k_range(text: &str) -> anyhow::Result<(usize, usize)> {
    let (lo, hi) = text
        .split_once("..")
        .ok_or_else(|| anyhow!(lanedep::Error::InvalidConfig(format!("K range `{text}` is not of the form A..B"))))?;
    let lo: usize = lo.trim().parse().context("K range start")?;
    let hi: usize = hi.trim_start_matches('=').trim().parse().context("K range end")?;
    if lo == 0 || lo > hi {
        bail!(lanedep::Error::InvalidConfig(format!("K range `{text}` must satisfy 1 <= A <= B")));
    }
    Ok((lo, hi))
}

fn em_config(cli: &Cli, a: &FitArgs) -> anyhow::Result<EmConfig> {
    let mut cfg = match &a.em_config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(lanedep::Error::from).with_context(|| format!("parsing {}", path.display()))?
        }
        None => EmConfig::default(),
    };
    cfg.seed = cli.seed;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(tol) = a.tol {
        cfg.tol = tol;
    }
    if let Some(m) = a.max_iter {
        cfg.max_iter = m;
    }
    if let Some(m) = &a.moment_method {
        cfg.moment_method = m.parse::<MomentMethod>()?;
    }
    if let Some(q) = a.qmc_points {
        cfg.qmc_points = q;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_fit(cli: &Cli, a: &FitArgs) -> anyhow::Result<()> {
    let mut features = read_features_file(&a.features)?;
    if let Some(side) = a.side {
        let side = Side::from(side);
        features.retain(|f| f.side() == side);
    } else if features.iter().any(|f| f.side() != features[0].side()) {
        warn!("feature file mixes left and right departures; fitting the majority side");
    }
    let cfg = em_config(cli, a)?;
    let ks = match &a.k_range {
        Some(r) => {
            let (lo, hi) = parse_k_range(r)?;
            (lo..=hi).collect()
        }
        None => vec![cfg.k],
    };
    let out = out_path(cli, "model.json");
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let run_meta = RunMeta::new("fit", cli.seed).config(&cfg)?.inputs(std::slice::from_ref(&a.features))?;

    let mut best: Option<BgmModel> = None;
    let mut table = String::from("K,bic,loglik,iterations,converged\n");
    for k in ks {
        let fit = em_fit(&features, &EmConfig { k, ..cfg.clone() })?;
        let m = fit.model.meta();
        table.push_str(&format!("{k},{},{},{},{}\n", m.bic, m.final_log_likelihood, m.iterations, fit.converged));
        if !fit.converged {
            warn!("K = {k} stopped at the iteration cap");
        }
        if best.as_ref().is_none_or(|b| m.bic < b.meta().bic) {
            best = Some(fit.model);
        }
    }
    let mut model = best.expect("at least one K is fitted");
    {
        let m = model.meta_mut();
        m.tool_version = Some(meta::TOOL_VERSION.to_string());
        m.input_hash = run_meta.inputs.first().map(|i| i.sha256.clone());
        m.config_hash = Some(run_meta.config_hash.clone());
    }
    model.save(&out)?;
    if a.k_range.is_some() {
        let bic_path = out.with_file_name("bic.csv");
        write_text(&bic_path, &table)?;
        info!("selected K = {}", model.k());
    }
    run_meta.write_for(&out)
}

fn cmd_sample(cli: &Cli, a: &SampleArgs) -> anyhow::Result<()> {
    let model = BgmModel::load(&a.model)?;
    let (events, report) = sample_event_batch(&model, a.count, a.ts, a.noise.into(), cli.seed)?;
    let dir = out_path(cli, "events");
    create_dir(&dir)?;
    let (traces, features): (Vec<_>, Vec<_>) = events.into_iter().map(|e| (e.trace, e.features)).unzip();
    write_events(&dir, &traces, &features)?;
    write_text(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    RunMeta::new("sample", cli.seed)
        .config(&serde_json::json!({"count": a.count, "ts": a.ts, "noise": Noise::from(a.noise)}))?
        .inputs(std::slice::from_ref(&a.model))?
        .write_in(&dir)
}

/// Feature vectors for `traces`: the directory's feature file when it lines
/// up with the traces, otherwise extracted from each trace.
fn load_events(dir: &Path) -> anyhow::Result<(Vec<PathBuf>, Vec<SampledEvent>)> {
    let files = trace_files(dir)?;
    let features_path = dir.join(FEATURES_FILE);
    let stored = if features_path.is_file() {
        let f = read_features_file(&features_path)?;
        if f.len() == files.len() {
            Some(f)
        } else {
            warn!(
                "{} has {} rows for {} traces; extracting features instead",
                features_path.display(),
                f.len(),
                files.len()
            );
            None
        }
    } else {
        None
    };
    let events = files
        .par_iter()
        .enumerate()
        .map(|(i, path)| match &stored {
            Some(f) => Ok(SampledEvent {
                trace: read_trace_file(path, Some(f[i].side()))?,
                features: f[i],
            }),
            None => {
                let trace = read_trace_file(path, None)?;
                let features = extract_features(&trace, &EventFilterCriteria::default())
                    .with_context(|| format!("extracting features of {}", path.display()))?;
                Ok(SampledEvent { trace, features })
            }
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((files, events))
}

#[derive(Serialize)]
struct SimulationSummary {
    side: Side,
    controller: &'static str,
    outcome: lanedep::vehicle::SimOutcome,
    trigger_time: Option<f64>,
    departure_area: f64,
    uncontrolled_area: f64,
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> anyhow::Result<()> {
    let cfg = vehicle_config(cli)?;
    let mut inputs = vec![a.trace.clone()];
    let (trace, xi) = match &a.features {
        Some(path) => {
            inputs.push(path.clone());
            let rows = read_features_file(path)?;
            let xi = *rows.get(a.row).ok_or_else(|| {
                anyhow!(lanedep::Error::InvalidConfig(format!("{} has no row {}", path.display(), a.row)))
            })?;
            (read_trace_file(&a.trace, Some(xi.side()))?, xi)
        }
        None => {
            let trace = read_trace_file(&a.trace, None)?;
            let xi = extract_features(&trace, &EventFilterCriteria::default())?;
            (trace, xi)
        }
    };
    let controller = match a.controller {
        ControllerArg::Off => Controller::Off,
        ControllerArg::On => Controller::On,
    };
    let (params, gains, options) = (cfg.params(), cfg.gains(), cfg.options());
    let traj = simulate_event_with(&trace, &xi, &params, &gains, controller, &options)?;
    let off = simulate_event_with(&trace, &xi, &params, &gains, Controller::Off, &options)?;

    let out = out_path(cli, "simulated.csv");
    let mut csv = String::from("t,y,active,steering\n");
    for l in 0..traj.len() {
        csv.push_str(&format!("{},{},{},{}\n", traj.time[l], traj.y[l], u8::from(traj.active[l]), traj.steering[l]));
    }
    write_text(&out, &csv)?;
    let summary = SimulationSummary {
        side: traj.side,
        controller: if controller == Controller::On { "on" } else { "off" },
        outcome: traj.outcome,
        trigger_time: traj.trigger_time,
        departure_area: departure_area(&traj),
        uncontrolled_area: departure_area(&off),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    RunMeta::new("simulate", cli.seed).config(&cfg)?.inputs(&inputs)?.write_for(&out)
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> anyhow::Result<()> {
    let cfg = vehicle_config(cli)?;
    let mut files = Vec::new();
    let mut events = Vec::new();
    for dir in &a.events {
        let (f, e) = load_events(dir)?;
        files.extend(f);
        events.extend(e);
    }
    let report = evaluate_batch(&events, &cfg.params(), &cfg.gains(), &cfg.options());
    for f in &report.failures {
        warn!("event {} ({}) failed: {}", f.index, files[f.index].display(), f.error);
    }
    for s in &report.summaries {
        info!(
            "{}: {} events, mean S {:.4} -> {:.4}",
            s.side, s.count, s.mean_s_off, s.mean_s_on
        );
    }
    let dir = out_path(cli, "evaluation");
    create_dir(&dir)?;
    write_text(&dir.join("report.json"), &report.to_json_string()?)?;
    let csv_path = dir.join("report.csv");
    let file = fs::File::create(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    report.write_csv(std::io::BufWriter::new(file))?;
    let mut inputs = files;
    if let Some(c) = &cli.config {
        inputs.push(c.clone());
    }
    RunMeta::new("evaluate", cli.seed).config(&cfg)?.inputs(&inputs)?.write_in(&dir)
}
