//! Batch experiment runner: TOML configs, seeded shot pools, reports and CSVs.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad configuration, 3 runtime error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::analysis::{
    closed_form_xi, correlation_length, correlator_csv, entropy_csv, fit_decay, local_entropy, shots_csv, spectrum_csv,
    success_stats, wilson_interval, PhaseSample, SuccessStats,
};
use crate::compiler::{
    compile_prep, compile_rotation, compile_v, compile_web_prep, primitive, run_pattern, BasisMap, MeasurementPattern,
};
use crate::error::Error;
use crate::numerics::random::random_state;
use crate::numerics::{
    fidelity, hadamard, identity, ket0, normalized, operator_distance, pauli_x, pauli_y, pauli_z, phase, ComplexMatrix,
    StateVector, C64,
};
use crate::protocol::{
    build_filter, failure_restart_check, localize_simple, localize_web, localize_with_trials, report_shot,
    required_trials, wire_length, LocalizationResult,
};
use crate::resource::{
    default_left, default_right, make_cluster_wire_with, make_theta_wire_with, make_w_wire, make_web, CanonicalWire,
    Coupling, WebResource,
};
use crate::simulator::{oracle, EnvCache, SimState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MISMATCH: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

const FIDELITY_TOL: f64 = 1e-9;
const TV_TOL: f64 = 1e-9;
const FACTOR_TOL: f64 = 1e-10;
const CHI_P_MIN: f64 = 0.01;
const R1_ZERO: f64 = 1e-12;
const ORACLE_MAX_QUBITS: usize = 14;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(#[from] Error),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output { .. } => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

trait Setup<T> {
    fn setup(self) -> Result<T, CliError>;
}

impl<T> Setup<T> for crate::Result<T> {
    fn setup(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "corrspace",
    version,
    about = "Correlation-space measurement-based quantum computation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a measurement pattern on a wire and record transcripts.
    Simulate(RunArgs),
    /// Localize the correlation-space output onto a physical site.
    Localize(RunArgs),
    /// Transfer spectra, correlators, entropies, trial bounds and filter algebra.
    Analyze(RunArgs),
    /// Compile a target state or unitary into a pattern file.
    Compile(RunArgs),
    /// Compare the simulator against the dense reference.
    OracleCheck(RunArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Worker threads; 0 uses the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub resource: ResourceSpec,
    #[serde(default)]
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub analyze: AnalyzeSpec,
    #[serde(default)]
    pub run: RunSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSpec {
    /// `cluster`, `theta` or `w`.
    pub family: String,
    pub theta: Option<f64>,
    pub sites: Option<usize>,
    #[serde(default = "default_wires")]
    pub wires: usize,
    /// Boundary vectors as `["re,im", "re,im"]`.
    pub left: Option<Vec<String>>,
    pub right: Option<Vec<String>>,
    /// `[upper, lower, column]` CZ couplings.
    #[serde(default)]
    pub couplings: Vec<[usize; 3]>,
    /// Row-major 2x2 unitary for the `w` family.
    pub w: Option<Vec<String>>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    /// `simple`, `general`, `filter`, `web` or `failure`.
    #[serde(default = "default_kind")]
    pub kind: String,
    pub target: Option<Vec<String>>,
    #[serde(default)]
    pub random_targets: bool,
    pub unitary: Option<Vec<String>>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub trials: Option<usize>,
    /// Per-wire gate names applied before each coupling column.
    #[serde(default)]
    pub pre: Vec<Vec<String>>,
    /// Per-wire gate names applied after the last coupling column.
    #[serde(default)]
    pub post: Vec<String>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    pub pattern: Option<PathBuf>,
    pub steps: Option<usize>,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        ProtocolSpec {
            kind: default_kind(),
            target: None,
            random_targets: false,
            unitary: None,
            epsilon: default_epsilon(),
            trials: None,
            pre: Vec::new(),
            post: Vec::new(),
            confidence: default_confidence(),
            pattern: None,
            steps: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSpec {
    pub thetas: Option<Vec<f64>>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_distances")]
    pub distances: Vec<usize>,
    #[serde(default = "default_margin")]
    pub margin: usize,
    pub filter_r1: Option<Vec<f64>>,
}

impl Default for AnalyzeSpec {
    fn default() -> Self {
        AnalyzeSpec {
            thetas: None,
            grid: default_grid(),
            epsilons: default_epsilons(),
            distances: default_distances(),
            margin: default_margin(),
            filter_r1: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub seed: Option<u64>,
    pub shots: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    /// Include full transcripts in `report.txt`.
    #[serde(default)]
    pub transcripts: bool,
    /// Extra sites appended to automatically sized wires.
    pub padding: Option<usize>,
}

fn default_wires() -> usize {
    1
}
fn default_kind() -> String {
    "general".into()
}
fn default_epsilon() -> f64 {
    1e-3
}
fn default_confidence() -> f64 {
    0.99
}
fn default_grid() -> usize {
    20
}
fn default_epsilons() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3]
}
fn default_distances() -> Vec<usize> {
    vec![2, 4, 6, 8, 10, 12]
}
fn default_margin() -> usize {
    40
}

const DEFAULT_PADDING: usize = 128;

/// Flags merged over the `[run]` section.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub shots: usize,
    pub jobs: usize,
    pub out: PathBuf,
    pub transcripts: bool,
    pub padding: usize,
    pub base_dir: PathBuf,
}

/// Checks and key/value lines written to `summary.txt`.
#[derive(Debug, Clone, Default)]
pub struct Summary {
    lines: Vec<String>,
    passed: bool,
}

impl Summary {
    fn new(command: &str) -> Self {
        Summary {
            lines: vec![format!("command = {command}")],
            passed: true,
        }
    }

    fn kv(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} = {value}"));
    }

    fn check(&mut self, name: &str, ok: bool, detail: impl std::fmt::Display) {
        self.passed &= ok;
        self.lines.push(format!(
            "check {name} = {} ({detail})",
            if ok { "pass" } else { "fail" }
        ));
    }

    pub fn passed(&self) -> bool {
        self.passed
    }

    pub fn text(&self) -> String {
        let mut out = self.lines.join("\n");
        let _ = write!(out, "\nstatus = {}\n", if self.passed { "pass" } else { "fail" });
        out
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn settings(args: &RunArgs, cfg: &ExperimentConfig) -> Result<Settings, CliError> {
    let seed = args
        .seed
        .or(cfg.run.seed)
        .ok_or_else(|| CliError::Config("a seed is required (--seed or [run] seed)".into()))?;
    let shots = args.shots.or(cfg.run.shots).unwrap_or(1);
    if shots == 0 {
        return Err(CliError::Config("shots must be at least 1".into()));
    }
    if !(cfg.protocol.confidence > 0.0 && cfg.protocol.confidence < 1.0) {
        return Err(CliError::Config(format!(
            "confidence must lie in (0, 1), got {}",
            cfg.protocol.confidence
        )));
    }
    let base_dir = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Settings {
        seed,
        shots,
        jobs: args.jobs.or(cfg.run.jobs).unwrap_or(0),
        out: args
            .out
            .clone()
            .or_else(|| cfg.run.out.clone())
            .unwrap_or_else(|| PathBuf::from("corrspace-out")),
        transcripts: cfg.run.transcripts,
        padding: cfg.run.padding.unwrap_or(DEFAULT_PADDING),
        base_dir,
    })
}

pub fn parse_complex(s: &str) -> Result<C64, CliError> {
    let bad = || CliError::Config(format!("expected a complex number as \"re,im\", got {s:?}"));
    let (re, im) = s.split_once(',').ok_or_else(bad)?;
    let re: f64 = re.trim().parse().map_err(|_| bad())?;
    let im: f64 = im.trim().parse().map_err(|_| bad())?;
    if !(re.is_finite() && im.is_finite()) {
        return Err(bad());
    }
    Ok(C64::new(re, im))
}

fn parse_vector(entries: &[String], len: usize, what: &str) -> Result<Vec<C64>, CliError> {
    if entries.len() != len {
        return Err(CliError::Config(format!(
            "{what} needs {len} entries, got {}",
            entries.len()
        )));
    }
    entries.iter().map(|s| parse_complex(s)).collect()
}

pub fn parse_state(entries: &[String], what: &str) -> Result<StateVector, CliError> {
    normalized(&StateVector::from_vec(parse_vector(entries, 2, what)?)).setup()
}

pub fn parse_unitary(entries: &[String], what: &str) -> Result<ComplexMatrix, CliError> {
    let u = ComplexMatrix::from_row_slice(2, 2, &parse_vector(entries, 4, what)?);
    if !crate::numerics::is_unitary(&u, 1e-10) {
        return Err(CliError::Config(format!("{what} is not unitary")));
    }
    Ok(u)
}

/// `I`, `H`, `X`, `Y`, `Z`, `S`, `T` or `P:η` (Hadamard after a phase `η`).
pub fn parse_gate(name: &str) -> Result<ComplexMatrix, CliError> {
    let name = name.trim();
    if let Some(angle) = name.strip_prefix("P:") {
        let eta: f64 = angle
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad primitive angle in {name:?}")))?;
        return Ok(primitive(eta));
    }
    Ok(match name {
        "I" => identity(2),
        "H" => hadamard(),
        "X" => pauli_x(),
        "Y" => pauli_y(),
        "Z" => pauli_z(),
        "S" => phase(std::f64::consts::FRAC_PI_2),
        "T" => phase(std::f64::consts::FRAC_PI_4),
        _ => return Err(CliError::Config(format!("unknown gate {name:?}"))),
    })
}

fn boundary(entries: &Option<Vec<String>>, default: StateVector, what: &str) -> Result<StateVector, CliError> {
    match entries {
        Some(e) => parse_state(e, what),
        None => Ok(default),
    }
}

/// One wire of the configured family with `sites` sites and the given left boundary.
pub fn build_wire_with(
    spec: &ResourceSpec,
    sites: usize,
    left: Option<StateVector>,
) -> Result<CanonicalWire, CliError> {
    let left = match left {
        Some(l) => l,
        None => boundary(&spec.left, default_left(), "resource.left")?,
    };
    let right = boundary(&spec.right, default_right(), "resource.right")?;
    match spec.family.as_str() {
        "cluster" => make_cluster_wire_with(sites, left, right).setup(),
        "theta" => {
            let theta = spec
                .theta
                .ok_or_else(|| CliError::Config("theta family needs resource.theta".into()))?;
            make_theta_wire_with(theta, sites, left, right).setup()
        }
        "w" => {
            let w = spec
                .w
                .as_ref()
                .ok_or_else(|| CliError::Config("w family needs resource.w".into()))?;
            let w = parse_unitary(w, "resource.w")?;
            let alpha = spec
                .alpha
                .ok_or_else(|| CliError::Config("w family needs resource.alpha".into()))?;
            let cw = make_w_wire(&w, alpha, sites).setup()?;
            let base = cw.base.with_boundaries(left, right).setup()?;
            Ok(cw.with_base(base))
        }
        other => Err(CliError::Config(format!(
            "unknown family {other:?}; expected cluster, theta or w"
        ))),
    }
}

pub fn build_wire(spec: &ResourceSpec, sites: usize) -> Result<CanonicalWire, CliError> {
    build_wire_with(spec, sites, None)
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|source| CliError::Output { path, source })
}

fn shot_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))
}

/// Run `f` for every shot index on the worker pool; results come back in shot order.
fn run_shots<T, F>(settings: &Settings, f: F) -> Result<Vec<T>, CliError>
where
    T: Send,
    F: Fn(usize) -> crate::Result<T> + Sync + Send,
{
    let pool = shot_pool(settings.jobs)?;
    let out: crate::Result<Vec<T>> = pool.install(|| (0..settings.shots).into_par_iter().map(&f).collect());
    Ok(out?)
}

fn target_rng(seed: u64, shot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_7267_6574_7321);
    rng.set_stream(shot as u64);
    rng
}

fn is_exhaustion(e: &Error) -> bool {
    matches!(e, Error::WireExhausted(_) | Error::RusExhausted(_))
}

/// Parse arguments, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(summary) => {
            print!("{}", summary.text());
            if summary.passed() {
                EXIT_OK
            } else {
                EXIT_MISMATCH
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: &Command) -> Result<Summary, CliError> {
    let (name, args) = match command {
        Command::Simulate(a) => ("simulate", a),
        Command::Localize(a) => ("localize", a),
        Command::Analyze(a) => ("analyze", a),
        Command::Compile(a) => ("compile", a),
        Command::OracleCheck(a) => ("oracle-check", a),
    };
    let cfg = load_config(&args.config)?;
    let settings = settings(args, &cfg)?;
    fs::create_dir_all(&settings.out).map_err(|source| CliError::Output {
        path: settings.out.clone(),
        source,
    })?;
    let mut summary = Summary::new(name);
    summary.kv("seed", settings.seed);
    match command {
        Command::Simulate(_) => simulate(&cfg, &settings, &mut summary)?,
        Command::Localize(_) => localize(&cfg, &settings, &mut summary)?,
        Command::Analyze(_) => analyze(&cfg, &settings, &mut summary)?,
        Command::Compile(_) => compile(&cfg, &settings, &mut summary)?,
        Command::OracleCheck(_) => oracle_check(&cfg, &settings, &mut summary)?,
    }
    write_file(&settings.out, "summary.txt", &summary.text())?;
    Ok(summary)
}

fn single_wire_only(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.resource.wires != 1 || !cfg.resource.couplings.is_empty() {
        return Err(CliError::Config(format!(
            "protocol kind {:?} runs on a single uncoupled wire",
            cfg.protocol.kind
        )));
    }
    Ok(())
}

/// Pattern for `compile` and `simulate`: a target state if given, else a unitary.
fn configured_pattern(
    cfg: &ExperimentConfig,
    cw: &CanonicalWire,
    settings: &Settings,
) -> Result<MeasurementPattern, CliError> {
    let p = &cfg.protocol;
    if let Some(path) = &p.pattern {
        let path = settings.base_dir.join(path);
        let text =
            fs::read_to_string(&path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let pattern = MeasurementPattern::from_text(&text).setup()?;
        if pattern.family.name() != cw.family.name() {
            return Err(CliError::Config(format!(
                "pattern family {} does not match resource family {}",
                pattern.family.name(),
                cw.family.name()
            )));
        }
        return Ok(pattern);
    }
    match (&p.target, &p.unitary) {
        (Some(t), _) => compile_prep(cw, &parse_state(t, "protocol.target")?, p.epsilon).setup(),
        (None, Some(u)) => compile_rotation(cw, &parse_unitary(u, "protocol.unitary")?, p.epsilon).setup(),
        (None, None) => Err(CliError::Config(
            "set protocol.target, protocol.unitary or protocol.pattern".into(),
        )),
    }
}

fn compile(cfg: &ExperimentConfig, settings: &Settings, summary: &mut Summary) -> Result<(), CliError> {
    single_wire_only(cfg)?;
    let cw = build_wire(&cfg.resource, cfg.resource.sites.unwrap_or(2))?;
    let pattern = configured_pattern(cfg, &cw, settings)?;
    summary.kv("family", cw.family.name());
    summary.kv("steps", pattern.steps.len());
    summary.kv("declared_length", pattern.declared_length);
    summary.kv("trial_budget", pattern.trial_budget);
    let ideal = pattern.ideal_operator();
    if let Some(t) = &cfg.protocol.target {
        let psi = parse_state(t, "protocol.target")?;
        let got = normalized(&(&ideal * cw.base.left())).setup()?;
        let f = fidelity(&got, &psi);
        summary.check("prepared_state", f >= 1.0 - FIDELITY_TOL, format!("fidelity {f:.15}"));
    } else {
        let d = operator_distance(&ideal, &pattern.target);
        summary.check("implemented_operator", d <= FIDELITY_TOL, format!("distance {d:.3e}"));
    }
    write_file(&settings.out, "pattern.txt", &pattern.to_text())
}

fn simulate(cfg: &ExperimentConfig, settings: &Settings, summary: &mut Summary) -> Result<(), CliError> {
    single_wire_only(cfg)?;
    let probe = build_wire(&cfg.resource, 2)?;
    let pattern = configured_pattern(cfg, &probe, settings)?;
    let sites = cfg.resource.sites.unwrap_or(pattern.declared_length + settings.padding);
    let cw = build_wire(&cfg.resource, sites)?;
    summary.kv("family", cw.family.name());
    summary.kv("sites", sites);
    summary.kv("shots", settings.shots);
    summary.kv("declared_length", pattern.declared_length);

    struct Shot {
        frame: (bool, bool),
        distance: Option<f64>,
        sites_used: usize,
        text: String,
    }
    let shots = run_shots(settings, |i| {
        let mut sim = SimState::with_reference(cw.base.clone(), settings.seed, i as u64);
        let (distance, sites_used) = match run_pattern(&mut sim, 0, &pattern) {
            Ok(stats) => {
                let mut op = sim.reference_operator()?;
                let f = sim.frames[0];
                if f.x {
                    op = pauli_x() * op;
                }
                if f.z {
                    op = pauli_z() * op;
                }
                (Some(operator_distance(&op, &pattern.target)), stats.sites_used)
            }
            Err(e) if is_exhaustion(&e) => (None, sim.cursor(0)),
            Err(e) => return Err(e),
        };
        let f = sim.frames[0];
        let mut text = format!(
            "shot={i} seed={} stream={i} frame_x={} frame_z={} sites_used={sites_used} completed={}\n",
            settings.seed,
            f.x as u8,
            f.z as u8,
            distance.is_some()
        );
        for line in sim.transcript_text().lines() {
            let _ = writeln!(text, "  {line}");
        }
        Ok(Shot {
            frame: (f.x, f.z),
            distance,
            sites_used,
            text,
        })
    })?;

    let completed: Vec<&Shot> = shots.iter().filter(|s| s.distance.is_some()).collect();
    let worst = completed.iter().filter_map(|s| s.distance).fold(0.0, f64::max);
    let mean_sites = shots.iter().map(|s| s.sites_used as f64).sum::<f64>() / shots.len() as f64;
    summary.kv("completed", completed.len());
    summary.kv("exhausted", shots.len() - completed.len());
    summary.kv("mean_sites_used", format!("{mean_sites:.6}"));
    summary.check(
        "implemented_operator",
        worst <= FIDELITY_TOL,
        format!("max distance {worst:.3e}"),
    );

    let mut freq = String::from("frame_x,frame_z,count,fraction\n");
    for fx in [false, true] {
        for fz in [false, true] {
            let n = shots.iter().filter(|s| s.frame == (fx, fz)).count();
            let _ = writeln!(
                freq,
                "{},{},{n},{:.6}",
                fx as u8,
                fz as u8,
                n as f64 / shots.len() as f64
            );
        }
    }
    let transcripts: String = shots.iter().map(|s| s.text.as_str()).collect();
    write_file(&settings.out, "transcripts.txt", &transcripts)?;
    write_file(&settings.out, "frequencies.csv", &freq)
}

/// Per-shot localization outcome.
#[derive(Clone, Debug)]
struct ShotRecord {
    index: usize,
    /// Filter attempts per wire, phase (i) then phase (iii).
    trials: Vec<[usize; 2]>,
    wire_success: Vec<bool>,
    succeeded: bool,
    fidelity: Option<f64>,
    exhausted: bool,
    /// The wire itself ran out of sites, which truncates a phase.
    wire_exhausted: bool,
    filter_calls: usize,
    report: String,
}

fn filter_calls(sim: &SimState) -> usize {
    sim.transcript().iter().filter(|r| r.label == "filter").count()
}

fn shot_report(
    settings: &Settings,
    index: usize,
    sim: &SimState,
    results: &[LocalizationResult],
    fid: Option<f64>,
) -> String {
    let full = report_shot(index, sim, results, fid);
    if settings.transcripts {
        full
    } else {
        full.lines().next().map(|l| format!("{l}\n")).unwrap_or_default()
    }
}

fn exhausted_record(settings: &Settings, index: usize, sim: &SimState, e: &Error) -> ShotRecord {
    ShotRecord {
        index,
        trials: Vec::new(),
        wire_success: Vec::new(),
        succeeded: false,
        fidelity: None,
        exhausted: true,
        wire_exhausted: matches!(e, Error::WireExhausted(_)),
        filter_calls: filter_calls(sim),
        report: format!("shot={index} seed={} stream={index} exhausted: {e}\n", settings.seed),
    }
}

/// Phase samples pooled over wires: phase (i) always, phase (iii) when (i) succeeded.
fn phase_samples(records: &[ShotRecord]) -> (Vec<PhaseSample>, Vec<PhaseSample>) {
    let mut first = Vec::new();
    let mut second = Vec::new();
    for r in records {
        for (t, &done) in r.trials.iter().zip(&r.wire_success) {
            let first_ok = t[1] > 0;
            first.push(PhaseSample {
                attempts: t[0],
                succeeded: first_ok,
            });
            if first_ok {
                second.push(PhaseSample {
                    attempts: t[1],
                    succeeded: done,
                });
            }
        }
    }
    (first, second)
}

fn stats_checks(summary: &mut Summary, name: &str, stats: &SuccessStats) {
    summary.kv(&format!("{name}_shots"), stats.shots);
    summary.kv(&format!("{name}_successes"), stats.successes);
    summary.kv(&format!("{name}_p_hat"), format!("{:.6}", stats.p_hat));
    summary.kv(&format!("{name}_expected"), format!("{:.6}", stats.expected));
    summary.kv(&format!("{name}_ci"), format!("[{:.6}, {:.6}]", stats.ci.0, stats.ci.1));
    summary.check(
        &format!("{name}_expected_in_ci"),
        stats.expected_in_ci,
        format!("p_hat {:.6}", stats.p_hat),
    );
    if let Some(chi) = stats.chi_square {
        summary.kv(
            &format!("{name}_chi_square"),
            format!("{:.6} dof {}", chi.statistic, chi.dof),
        );
        summary.check(
            &format!("{name}_geometric_fit"),
            chi.p_value > CHI_P_MIN,
            format!("p-value {:.6}", chi.p_value),
        );
    }
}

fn fidelity_check(summary: &mut Summary, records: &[ShotRecord]) {
    let fids: Vec<f64> = records
        .iter()
        .filter(|r| r.succeeded)
        .filter_map(|r| r.fidelity)
        .collect();
    let worst = fids.iter().copied().fold(1.0, f64::min);
    let missing = records.iter().filter(|r| r.succeeded && r.fidelity.is_none()).count();
    summary.kv("successful_shots", fids.len());
    summary.check(
        "success_fidelity",
        worst >= 1.0 - FIDELITY_TOL && missing == 0,
        format!("min fidelity {worst:.15} over {} successes", fids.len()),
    );
}

fn write_shot_outputs(settings: &Settings, records: &[ShotRecord]) -> Result<(), CliError> {
    let rows: Vec<(usize, Vec<[usize; 2]>, bool)> = records
        .iter()
        .map(|r| (r.index, r.trials.clone(), r.succeeded))
        .collect();
    write_file(&settings.out, "shots.csv", &shots_csv(&rows))?;
    let report: String = records.iter().map(|r| r.report.as_str()).collect();
    write_file(&settings.out, "report.txt", &report)
}

fn localize(cfg: &ExperimentConfig, settings: &Settings, summary: &mut Summary) -> Result<(), CliError> {
    summary.kv("kind", &cfg.protocol.kind);
    match cfg.protocol.kind.as_str() {
        "simple" | "general" => localize_single(cfg, settings, summary),
        "filter" => localize_filter(cfg, settings, summary),
        "web" => localize_web_run(cfg, settings, summary),
        other => Err(CliError::Config(format!(
            "unknown localize kind {other:?}; expected simple, general, filter or web"
        ))),
    }
}

fn localize_single(cfg: &ExperimentConfig, settings: &Settings, summary: &mut Summary) -> Result<(), CliError> {
    single_wire_only(cfg)?;
    let p = &cfg.protocol;
    let simple = p.kind == "simple";
    let probe = build_wire(&cfg.resource, 2)?;
    let r1 = probe.r1();
    if simple && r1 >= R1_ZERO {
        return Err(CliError::Config(format!(
            "the simple protocol needs r1 = 0, this wire has r1 = {r1}"
        )));
    }
    let trials = match (simple, p.trials) {
        (true, _) => 1,
        (false, Some(0)) => return Err(CliError::Config("protocol.trials must be at least 1".into())),
        (false, Some(t)) => t,
        (false, None) => required_trials(p.epsilon, r1).setup()?.trials,
    };
    let fixed_target = match (&p.target, p.random_targets) {
        (Some(_), true) => return Err(CliError::Config("set either protocol.target or random_targets".into())),
        (Some(t), false) => Some(parse_state(t, "protocol.target")?),
        (None, true) => None,
        (None, false) => Some(ket0()),
    };
    let sizing_target = fixed_target
        .clone()
        .unwrap_or_else(|| random_state(&mut target_rng(settings.seed, 0), 2));
    let prep_len = compile_prep(&probe, &sizing_target, p.epsilon).setup()?.declared_length;
    let seg = compile_v(&probe, BasisMap::V, p.epsilon)
        .setup()?
        .declared_length
        .max(compile_v(&probe, BasisMap::VPrime, p.epsilon).setup()?.declared_length);
    let sites = cfg
        .resource
        .sites
        .unwrap_or(wire_length(prep_len, trials, seg) + settings.padding);
    let cw = build_wire(&cfg.resource, sites)?;
    let web = Arc::new(WebResource::single(cw.base.clone()));
    let env = Arc::new(EnvCache::new(&web));
    summary.kv("family", cw.family.name());
    summary.kv("r1", format!("{r1:.12}"));
    summary.kv("sites", sites);
    summary.kv("trials_per_phase", trials);
    summary.kv("epsilon", p.epsilon);
    summary.kv("shots", settings.shots);

    let records = run_shots(settings, |i| {
        let target = match &fixed_target {
            Some(t) => t.clone(),
            None => random_state(&mut target_rng(settings.seed, i), 2),
        };
        let prep = compile_prep(&cw, &target, p.epsilon)?;
        let mut sim = SimState::with_env(web.clone(), env.clone(), settings.seed, i as u64);
        let res = if simple {
            localize_simple(&mut sim, 0, &cw, &prep)
        } else {
            localize_with_trials(&mut sim, 0, &cw, &prep, p.epsilon, trials)
        };
        match res {
            Ok(r) => Ok(ShotRecord {
                index: i,
                trials: vec![r.trials],
                wire_success: vec![r.succeeded],
                succeeded: r.succeeded,
                fidelity: r.fidelity,
                exhausted: false,
                wire_exhausted: false,
                filter_calls: filter_calls(&sim),
                report: shot_report(settings, i, &sim, std::slice::from_ref(&r), r.fidelity),
            }),
            Err(e) if is_exhaustion(&e) => Ok(exhausted_record(settings, i, &sim, &e)),
            Err(e) => Err(e),
        }
    })?;

    let exhausted = records.iter().filter(|r| r.exhausted).count();
    let wire_exhausted = records.iter().filter(|r| r.wire_exhausted).count();
    let successes = records.iter().filter(|r| r.succeeded).count();
    summary.kv("exhausted", exhausted);
    summary.kv("successes", successes);
    summary.kv("p_hat", format!("{:.6}", successes as f64 / records.len() as f64));
    let phase_p = 1.0 - r1.powi(trials as i32);
    summary.kv("expected_per_phase", format!("{phase_p:.6}"));
    summary.kv("expected_overall", format!("{:.6}", phase_p * phase_p));
    fidelity_check(summary, &records);

    if r1 < R1_ZERO {
        let all_single = records.iter().all(|r| r.exhausted || r.trials == vec![[1, 1]]);
        let calls: usize = records.iter().map(|r| r.filter_calls).sum();
        summary.check("single_trial_per_phase", all_single, "r1 = 0");
        summary.check(
            "filter_never_invoked",
            calls == 0,
            format!("{calls} filter measurements"),
        );
        let (lo, hi) = wilson_interval(successes, records.len(), p.confidence);
        summary.check(
            "success_probability",
            lo <= 1.0 && hi >= 1.0 && successes == records.len() - exhausted,
            format!("p_hat {:.6}", successes as f64 / records.len() as f64),
        );
    } else if wire_exhausted > 0 {
        summary.kv(
            "phase_statistics",
            format!("skipped ({wire_exhausted} shots ran out of wire)"),
        );
    } else {
        let (first, second) = phase_samples(&records);
        statistics(summary, "phase_i", &first, r1, trials, p.confidence);
        statistics(summary, "phase_iii", &second, r1, trials, p.confidence);
    }
    write_shot_outputs(settings, &records)
}

fn statistics(summary: &mut Summary, name: &str, samples: &[PhaseSample], r1: f64, trials: usize, confidence: f64) {
    match success_stats(samples, r1, trials, confidence) {
        Ok(stats) => stats_checks(summary, name, &stats),
        Err(e) => summary.kv(&format!("{name}_statistics"), format!("skipped ({e})")),
    }
}

fn localize_filter(cfg: &ExperimentConfig, settings: &Settings, summary: &mut Summary) -> Result<(), CliError> {
    single_wire_only(cfg)?;
    let sites = cfg.resource.sites.unwrap_or(200);
    let cw = build_wire(&cfg.resource, sites)?;
    let r1 = cw.r1();
    let op = build_filter(r1).setup()?.measurement(&cw.form.m_matrix()).setup()?;
    let web = Arc::new(WebResource::single(cw.base.clone()));
    let env = Arc::new(EnvCache::new(&web));
    let exact = {
        let mut sim = SimState::with_env(web.clone(), env.clone(), settings.seed, 0);
        let site = sim.retain_site(0)?;
        sim.outcome_distribution(site, &op)?[0]
    };
    summary.kv("family", cw.family.name());
    summary.kv("r1", format!("{r1:.12}"));
    summary.kv("sites", sites);
    summary.kv("shots", settings.shots);
    summary.kv("exact_success_probability", format!("{exact:.12}"));

    let records = run_shots(settings, |i| {
        let mut sim = SimState::with_env(web.clone(), env.clone(), settings.seed, i as u64);
        let site = sim.retain_site(0)?;
        let outcome = sim.apply_measurement(site, &op, None)?;
        Ok(ShotRecord {
            index: i,
            trials: vec![[1, 0]],
            wire_success: vec![outcome == 0],
            succeeded: outcome == 0,
            fidelity: None,
            exhausted: false,
            wire_exhausted: false,
            filter_calls: 1,
            report: format!(
                "shot={i} seed={} stream={i} outcome={}\n",
                settings.seed,
                op.outcome_label(outcome)
            ),
        })
    })?;
    let samples: Vec<PhaseSample> = records
        .iter()
        .map(|r| PhaseSample {
            attempts: 1,
            succeeded: r.succeeded,
        })
        .collect();
    statistics(summary, "filter", &samples, r1, 1, cfg.protocol.confidence);
    if samples.len() < 100 {
        summary.kv("note", "statistics need at least 100 shots");
    }
    write_shot_outputs(settings, &records)
}

/// Ideal web output: boundaries, then per coupling column the wire gates and the CZs, then the post gates.
pub fn web_target(
    lefts: &[StateVector],
    columns: &[usize],
    couplings: &[Coupling],
    pre: &[Vec<ComplexMatrix>],
    post: &[ComplexMatrix],
) -> crate::Result<StateVector> {
    let m = lefts.len();
    let mut state = StateVector::from_element(1, C64::new(1.0, 0.0));
    for l in lefts {
        state = crate::numerics::kron_vec(&state, &normalized(l)?);
    }
    let cz = |v: &mut StateVector, a: usize, b: usize| {
        for idx in 0..v.len() {
            if (idx >> (m - 1 - a)) & 1 == 1 && (idx >> (m - 1 - b)) & 1 == 1 {
                v[idx] = -v[idx];
            }
        }
    };
    for (j, &col) in columns.iter().enumerate() {
        for (w, gates) in pre.iter().enumerate() {
            state = oracle::apply_kraus(&state, m, w, &gates[j]);
        }
        for c in couplings.iter().filter(|c| c.column == col) {
            cz(&mut state, c.upper, c.lower);
        }
    }
    for (w, g) in post.iter().enumerate() {
        state = oracle::apply_kraus(&state, m, w, g);
    }
    normalized(&state)
}

fn localize_web_run(cfg: &ExperimentConfig, settings: &Settings, summary: &mut Summary) -> Result<(), CliError> {
    let spec = &cfg.resource;
    let p = &cfg.protocol;
    let m = spec.wires;
    if m < 1 {
        return Err(CliError::Config("a web needs at least one wire".into()));
    }
    if p.trials.is_some() {
        return Err(CliError::Config(
            "web runs derive trials from epsilon; remove protocol.trials".into(),
        ));
    }
    let couplings: Vec<Coupling> = spec.couplings.iter().map(|c| Coupling::cz(c[0], c[1], c[2])).collect();
    let mut columns: Vec<usize> = couplings.iter().map(|c| c.column).collect();
    columns.sort_unstable();
    columns.dedup();
    let pre: Vec<Vec<ComplexMatrix>> = if p.pre.is_empty() {
        vec![vec![identity(2); columns.len()]; m]
    } else {
        p.pre
            .iter()
            .map(|g| g.iter().map(|s| parse_gate(s)).collect())
            .collect::<Result<_, _>>()?
    };
    let post: Vec<ComplexMatrix> = if p.post.is_empty() {
        vec![identity(2); m]
    } else {
        p.post.iter().map(|s| parse_gate(s)).collect::<Result<_, _>>()?
    };
    if pre.len() != m || post.len() != m || pre.iter().any(|g| g.len() != columns.len()) {
        return Err(CliError::Config(format!(
            "protocol.pre needs {m} lists of {} gates and protocol.post needs {m} gates",
            columns.len()
        )));
    }
    let probe = build_wire(spec, 2)?;
    let r1 = probe.r1();
    let trials = required_trials(p.epsilon, r1).setup()?.trials;
    let post_len = post
        .iter()
        .map(|u| compile_rotation(&probe, u, p.epsilon).map(|q| q.declared_length))
        .collect::<crate::Result<Vec<_>>>()
        .setup()?
        .into_iter()
        .max()
        .unwrap_or(0);
    let seg = compile_v(&probe, BasisMap::V, p.epsilon)
        .setup()?
        .declared_length
        .max(compile_v(&probe, BasisMap::VPrime, p.epsilon).setup()?.declared_length);
    let prep_cols = columns.last().map_or(0, |c| c + 1);
    let sites = spec
        .sites
        .unwrap_or(wire_length(prep_cols + post_len, trials, seg) + settings.padding);
    let wires: Vec<CanonicalWire> = (0..m).map(|_| build_wire(spec, sites)).collect::<Result<_, _>>()?;
    let web = make_web(&wires, couplings.clone()).setup()?;
    let prep = compile_web_prep(&wires, &web, &pre, &post, p.epsilon).setup()?;
    let lefts: Vec<StateVector> = wires.iter().map(|w| w.base.left().clone()).collect();
    let target = match &p.target {
        Some(_) => {
            return Err(CliError::Config(
                "web targets follow from protocol.pre and protocol.post".into(),
            ))
        }
        None => web_target(&lefts, &columns, &couplings, &pre, &post).setup()?,
    };
    let web = Arc::new(web);
    let env = Arc::new(EnvCache::new(&web));
    summary.kv("family", probe.family.name());
    summary.kv("wires", m);
    summary.kv("r1", format!("{r1:.12}"));
    summary.kv("sites", sites);
    summary.kv("trials_per_phase", trials);
    summary.kv("epsilon", p.epsilon);
    summary.kv("shots", settings.shots);

    let records = run_shots(settings, |i| {
        let mut sim = SimState::with_env(web.clone(), env.clone(), settings.seed, i as u64);
        match localize_web(&mut sim, &wires, &prep, &target, p.epsilon) {
            Ok(out) => Ok(ShotRecord {
                index: i,
                trials: out.results.iter().map(|r| r.trials).collect(),
                wire_success: out.results.iter().map(|r| r.succeeded).collect(),
                succeeded: out.succeeded,
                fidelity: out.joint_fidelity,
                exhausted: false,
                wire_exhausted: false,
                filter_calls: filter_calls(&sim),
                report: shot_report(settings, i, &sim, &out.results, out.joint_fidelity),
            }),
            Err(e) if is_exhaustion(&e) => Ok(exhausted_record(settings, i, &sim, &e)),
            Err(e) => Err(e),
        }
    })?;

    let exhausted = records.iter().filter(|r| r.exhausted).count();
    let wire_exhausted = records.iter().filter(|r| r.wire_exhausted).count();
    let successes = records.iter().filter(|r| r.succeeded).count();
    let expected = (1.0 - r1.powi(trials as i32)).powi(2 * m as i32);
    let completed = records.len() - exhausted;
    let (lo, hi) = wilson_interval(successes, completed.max(1), p.confidence);
    summary.kv("exhausted", exhausted);
    summary.kv("successes", successes);
    summary.kv("p_hat", format!("{:.6}", successes as f64 / completed.max(1) as f64));
    summary.kv("expected_overall", format!("{expected:.6}"));
    summary.kv("ci", format!("[{lo:.6}, {hi:.6}]"));
    fidelity_check(summary, &records);
    if wire_exhausted > 0 {
        summary.kv(
            "statistics",
            format!("skipped ({wire_exhausted} shots ran out of wire)"),
        );
    } else if completed >= 100 {
        summary.check(
            "overall_expected_in_ci",
            lo <= expected && expected <= hi,
            "product of per-phase success",
        );
        if r1 >= R1_ZERO {
            let (first, second) = phase_samples(&records);
            statistics(summary, "phase_i", &first, r1, trials, p.confidence);
            statistics(summary, "phase_iii", &second, r1, trials, p.confidence);
        }
    } else {
        summary.kv("statistics", "skipped (fewer than 100 shots)");
    }
    write_shot_outputs(settings, &records)
}

fn theta_grid(spec: &AnalyzeSpec) -> Result<Vec<f64>, CliError> {
    match &spec.thetas {
        Some(t) if t.is_empty() => Err(CliError::Config("analyze.thetas is empty".into())),
        Some(t) => Ok(t.clone()),
        None if spec.grid == 0 => Err(CliError::Config("analyze.grid must be at least 1".into())),
        None => Ok((1..=spec.grid)
            .map(|k| std::f64::consts::FRAC_PI_4 * (k as f64 / spec.grid as f64))
            .collect()),
    }
}

fn analyze(cfg: &ExperimentConfig, settings: &Settings, summary: &mut Summary) -> Result<(), CliError> {
    let a = &cfg.analyze;
    let thetas = theta_grid(a)?;
    let mut theta_spec = cfg.resource.clone();
    theta_spec.family = "theta".into();
    theta_spec.left = None;
    theta_spec.right = None;

    let mut spectrum_rows = Vec::new();
    let mut entropy_rows = Vec::new();
    let mut trials_csv = String::from("epsilon,theta,r1,xi,trials,bound\n");
    let mut worst_xi: f64 = 0.0;
    let mut quarter_ok = true;
    let mut bound_ok = true;
    for &theta in &thetas {
        theta_spec.theta = Some(theta);
        let w = build_wire(&theta_spec, 2 * a.margin + 1)?;
        let spectrum = correlation_length(&w).setup()?;
        let r1 = w.r1();
        let from_xi = if spectrum.xi > 0.0 {
            (-1.0 / spectrum.xi).exp()
        } else {
            0.0
        };
        worst_xi = worst_xi.max((from_xi - r1.sqrt()).abs());
        if r1 < R1_ZERO {
            quarter_ok &= spectrum.xi == 0.0;
        }
        spectrum_rows.push((theta, r1, spectrum.xi, closed_form_xi(r1)));
        entropy_rows.push((theta, local_entropy(&w.base, a.margin).setup()?));
        for &eps in &a.epsilons {
            let tb = required_trials(eps, r1).setup()?;
            bound_ok &= tb.trials as f64 >= tb.xi_bound - 1.0;
            let _ = writeln!(
                trials_csv,
                "{eps:e},{theta:.12},{r1:.12},{:.12},{},{:.12}",
                spectrum.xi, tb.trials, tb.xi_bound
            );
        }
    }
    summary.kv("theta_points", thetas.len());
    summary.check(
        "spectral_xi",
        worst_xi <= 1e-9,
        format!("max |exp(-1/xi) - sqrt(r1)| {worst_xi:.3e}"),
    );
    summary.check("zero_xi_at_r1_zero", quarter_ok, "xi = 0 whenever r1 = 0");
    summary.check("trials_bound", bound_ok, "trials >= ln(1/eps) xi / 2 - 1");

    let filter_r1 = a.filter_r1.clone().unwrap_or_else(|| {
        let mut v: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
        v.push(std::f64::consts::FRAC_PI_4.cos());
        v
    });
    let mut filter_csv = String::from("r1,completeness_defect,failure_rank_defect\n");
    let mut worst_filter: f64 = 0.0;
    for &r1 in &filter_r1 {
        let f = build_filter(r1).setup()?;
        let (c, r) = (f.completeness_defect(), f.failure_rank_defect());
        worst_filter = worst_filter.max(c).max(r);
        let _ = writeln!(filter_csv, "{r1:.12},{c:.3e},{r:.3e}");
    }
    summary.check(
        "filter_algebra",
        worst_filter <= 1e-12,
        format!("max defect {worst_filter:.3e}"),
    );

    let mut correlator = correlator_csv(&[]);
    if cfg.resource.family == "theta" {
        let w = build_wire(&cfg.resource, 2)?;
        if w.r1() >= R1_ZERO {
            let fit = fit_decay(&w, &pauli_x(), &a.distances, a.margin).setup()?;
            let rel = fit.relative_error();
            summary.kv("correlator_slope", format!("{:.12}", fit.slope));
            summary.kv("correlator_expected_slope", format!("{:.12}", fit.expected_slope));
            summary.check(
                "correlator_decay",
                rel <= 1e-6,
                format!("relative slope error {rel:.3e}"),
            );
            correlator = correlator_csv(&fit.points);
        }
    }
    write_file(&settings.out, "spectrum.csv", &spectrum_csv(&spectrum_rows))?;
    write_file(&settings.out, "entropy.csv", &entropy_csv(&entropy_rows))?;
    write_file(&settings.out, "correlator.csv", &correlator)?;
    write_file(&settings.out, "trials.csv", &trials_csv)?;
    write_file(&settings.out, "filter.csv", &filter_csv)
}

fn oracle_check(cfg: &ExperimentConfig, settings: &Settings, summary: &mut Summary) -> Result<(), CliError> {
    if cfg.protocol.kind == "failure" {
        return failure_check(cfg, settings, summary);
    }
    let spec = &cfg.resource;
    let sites = spec.sites.unwrap_or(ORACLE_MAX_QUBITS / spec.wires.max(1));
    let wires: Vec<CanonicalWire> = (0..spec.wires)
        .map(|_| build_wire(spec, sites))
        .collect::<Result<_, _>>()?;
    let couplings: Vec<Coupling> = spec.couplings.iter().map(|c| Coupling::cz(c[0], c[1], c[2])).collect();
    let web = if wires.len() == 1 && couplings.is_empty() {
        WebResource::single(wires[0].base.clone())
    } else {
        make_web(&wires, couplings).setup()?
    };
    let qubits = web.qubit_count();
    if qubits > ORACLE_MAX_QUBITS {
        return Err(CliError::Config(format!(
            "oracle-check supports at most {ORACLE_MAX_QUBITS} qubits, resource has {qubits}"
        )));
    }
    let steps = cfg.protocol.steps.unwrap_or(qubits);
    let web = Arc::new(web);
    summary.kv("family", wires[0].family.name());
    summary.kv("wires", spec.wires);
    summary.kv("qubits", qubits);
    summary.kv("steps", steps);
    summary.kv("shots", settings.shots);
    let checks = run_shots(settings, |i| {
        oracle::random_transcript(web.clone(), settings.seed, i as u64, steps)
    })?;
    let worst_tv = checks.iter().map(|c| c.max_tv).fold(0.0, f64::max);
    let worst_factor = checks.iter().map(|c| c.min_factor_weight).fold(1.0, f64::min);
    let mut text = String::new();
    for (i, c) in checks.iter().enumerate() {
        let _ = writeln!(
            text,
            "shot={i} steps={} max_tv={:.3e} min_factor_weight={:.15}",
            c.steps, c.max_tv, c.min_factor_weight
        );
    }
    summary.check("max_tv", worst_tv <= TV_TOL, format!("{worst_tv:.3e}"));
    summary.check(
        "consumed_sites_factor",
        worst_factor >= 1.0 - FACTOR_TOL,
        format!("min weight {worst_factor:.15}"),
    );
    write_file(&settings.out, "oracle.txt", &text)
}

fn failure_check(cfg: &ExperimentConfig, settings: &Settings, summary: &mut Summary) -> Result<(), CliError> {
    single_wire_only(cfg)?;
    let p = &cfg.protocol;
    let sites = cfg.resource.sites.unwrap_or(12);
    let fixed = match &p.target {
        Some(t) => Some(parse_state(t, "protocol.target")?),
        None => None,
    };
    let probe = build_wire(&cfg.resource, sites)?;
    if probe.r1() < R1_ZERO {
        return Err(CliError::Config("failure checks need a wire with r1 > 0".into()));
    }
    summary.kv("family", probe.family.name());
    summary.kv("sites", sites);
    summary.kv("shots", settings.shots);
    let spec = cfg.resource.clone();
    let checks = run_shots(settings, |i| {
        let psi = fixed
            .clone()
            .unwrap_or_else(|| random_state(&mut target_rng(settings.seed, i), 2));
        let cw = build_wire_with(&spec, sites, Some(psi)).map_err(|e| Error::OutOfRange(e.to_string()))?;
        failure_restart_check(&cw, p.epsilon, settings.seed, i as u64)
    })?;
    let worst_factor = checks.iter().map(|c| c.factor_weight).fold(1.0, f64::min);
    let worst_tv = checks.iter().map(|c| c.restart_tv).fold(0.0, f64::max);
    let worst_fid = checks.iter().map(|c| c.restart_fidelity).fold(1.0, f64::min);
    let mut text = String::new();
    for (i, c) in checks.iter().enumerate() {
        let _ = writeln!(
            text,
            "shot={i} failure_probability={:.12} factor_weight={:.15} restart_fidelity={:.15} restart_tv={:.3e}",
            c.failure_probability, c.factor_weight, c.restart_fidelity, c.restart_tv
        );
    }
    summary.check(
        "failed_site_factorizes",
        worst_factor >= 1.0 - FACTOR_TOL,
        format!("min weight {worst_factor:.15}"),
    );
    summary.check(
        "restart_matches_fresh",
        worst_tv <= TV_TOL,
        format!("max TV {worst_tv:.3e}"),
    );
    summary.check(
        "restart_state",
        worst_fid >= 1.0 - FIDELITY_TOL,
        format!("min fidelity {worst_fid:.15}"),
    );
    write_file(&settings.out, "oracle.txt", &text)
}
