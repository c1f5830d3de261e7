//! `npdg`: design, identify, simulate, sweep and verify shared controllers for the
//! vehicle-manipulator plant. Every stage reads and writes plain files, so a stage's
//! outputs are the complete inputs of the next.
//!
//! Exit codes: 0 success, 2 user or configuration error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use npdg::io;
use npdg::lisc::CsSign;
use npdg::vmsim::{
    self, AVariant, Check, ControllerKind, ControllerRecord, FiscRecord, NpdgRecord, ScenarioConfig, SweepConfig,
};

#[derive(Parser)]
#[command(name = "npdg", version, about = "Near potential differential games for shared control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tune the full-information controller against the global cost.
    DesignFisc(Common),
    /// Estimate feedback gains from trajectories and identify a potential surrogate.
    IdentifyNpdg {
        #[command(flatten)]
        common: Common,
        /// Measured trajectories; segments are separated where time stops increasing.
        /// Without this file the identification experiment is simulated and saved.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        fisc: Option<PathBuf>,
    },
    /// Derive the cooperation state and tune the limited-information controller.
    DesignLisc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fisc: Option<PathBuf>,
        #[arg(long)]
        npdg: Option<PathBuf>,
    },
    /// Simulate the configured scenario and write the trajectory and metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fisc: Option<PathBuf>,
        /// Surrogate used for the certificate metrics (optional).
        #[arg(long)]
        npdg: Option<PathBuf>,
        /// Limited-information controller, required for `--controller-kind lisc`.
        #[arg(long)]
        controller: Option<PathBuf>,
        #[arg(long, value_enum)]
        controller_kind: Option<KindArg>,
    },
    /// Repeat identification over noise levels and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fisc: Option<PathBuf>,
        /// Runs per noise level.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Replay every stored invariant; nonzero exit names the violated constraints.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fisc: Option<PathBuf>,
        #[arg(long)]
        npdg: Option<PathBuf>,
        #[arg(long)]
        controller: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario configuration (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; default artifact paths are resolved inside it.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// SNR levels in dB, comma separated; `inf` is noiseless.
    #[arg(long, value_delimiter = ',')]
    snr: Vec<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    cs_sign: Option<SignArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Printed,
    Kinematic,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Printed,
    Corrected,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Nc,
    Fisc,
    Lisc,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: npdg::Error },
    #[error(transparent)]
    Core(#[from] npdg::Error),
    #[error("verification failed: {0}")]
    Violation(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use npdg::Error as E;
        match self {
            CliError::Usage(_) | CliError::File { .. } | CliError::Parse { .. } => 2,
            CliError::Core(E::InvalidParams(_) | E::ShapeMismatch(_) | E::IndefiniteWeight(_) | E::MissingDesign)
            | CliError::Core(E::ZeroSignalChannel(_) | E::NegativeXmax) => 2,
            CliError::Core(_) | CliError::Violation(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// One line of `manifest.jsonl` in the output directory.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: Option<String>,
    seed: u64,
    version: &'static str,
    out_dir: String,
    duration_s: f64,
    outputs: Vec<String>,
}

/// Cooperation-state diagnostics file.
#[derive(Serialize)]
struct CsReportFile {
    rank: usize,
    are_identity: f64,
    pinv_contract: f64,
    m: Vec<Vec<f64>>,
    m_pinv: Vec<Vec<f64>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    let started = Instant::now();
    let (name, common) = match &command {
        Command::DesignFisc(c) => ("design-fisc", c),
        Command::IdentifyNpdg { common, .. } => ("identify-npdg", common),
        Command::DesignLisc { common, .. } => ("design-lisc", common),
        Command::Simulate { common, .. } => ("simulate", common),
        Command::Sweep { common, .. } => ("sweep", common),
        Command::Verify { common, .. } => ("verify", common),
    };
    let common = common.clone();
    let cfg = load_config(&common)?;
    fs::create_dir_all(&common.out).map_err(|source| CliError::File { path: common.out.clone(), source })?;
    let mut out = Outputs { dir: common.out.clone(), written: Vec::new() };

    let result = match command {
        Command::DesignFisc(_) => design_fisc(&cfg, &mut out),
        Command::IdentifyNpdg { trajectory, fisc, .. } => identify(&cfg, &mut out, trajectory, fisc),
        Command::DesignLisc { fisc, npdg, .. } => design_lisc(&cfg, &mut out, fisc, npdg),
        Command::Simulate { fisc, npdg, controller, controller_kind, .. } => {
            simulate(cfg.clone(), &mut out, fisc, npdg, controller, controller_kind)
        }
        Command::Sweep { fisc, seeds, .. } => sweep(&cfg, &common, &mut out, fisc, seeds),
        Command::Verify { fisc, npdg, controller, .. } => verify(&cfg, &mut out, fisc, npdg, controller),
    };
    // Record whatever was written, including the report of a failed verification.
    if !out.written.is_empty() {
        let manifest = RunManifest {
            command: name,
            config: common.config.as_ref().map(|p| p.display().to_string()),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION"),
            out_dir: common.out.display().to_string(),
            duration_s: started.elapsed().as_secs_f64(),
            outputs: out.written.clone(),
        };
        let line = serde_json::to_string(&manifest).expect("manifest serializes");
        append_line(&common.out.join("manifest.jsonl"), &line)?;
    }
    result
}

fn load_config(common: &Common) -> CliResult<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = read_text(path)?;
            io::from_json::<ScenarioConfig>(&text).map_err(|source| CliError::Parse { path: path.clone(), source })?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(delta) = common.delta {
        cfg.delta = delta;
    }
    if let Some(v) = common.variant {
        cfg.variant = match v {
            VariantArg::Printed => AVariant::Printed,
            VariantArg::Kinematic => AVariant::Kinematic,
        };
    }
    if let Some(s) = common.cs_sign {
        cfg.cs_sign = match s {
            SignArg::Printed => CsSign::Printed,
            SignArg::Corrected => CsSign::Corrected,
        };
    }
    if let [snr] = common.snr[..] {
        cfg.snr_db = snr.is_finite().then_some(snr);
    }
    cfg.validate().map_err(|e| match &common.config {
        Some(path) => CliError::Parse { path: path.clone(), source: e },
        None => CliError::Core(e),
    })?;
    Ok(cfg)
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|source| CliError::File { path: path.clone(), source })?;
        self.written.push(path.display().to_string());
        Ok(())
    }

    fn json<S: Serialize>(&mut self, name: &str, value: &S) -> CliResult<()> {
        self.write(name, io::to_json(value)?.as_bytes())
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn read_json<D: for<'de> serde::Deserialize<'de>>(path: &Path) -> CliResult<D> {
    io::from_json(&read_text(path)?).map_err(|source| CliError::Parse { path: path.to_path_buf(), source })
}

fn append_line(path: &Path, line: &str) -> CliResult<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| CliError::File { path: path.to_path_buf(), source })?;
    writeln!(f, "{line}").map_err(|source| CliError::File { path: path.to_path_buf(), source })
}

fn artifact(out: &Outputs, explicit: Option<PathBuf>, default: &str) -> PathBuf {
    explicit.unwrap_or_else(|| out.path(default))
}

fn design_fisc(cfg: &ScenarioConfig, out: &mut Outputs) -> CliResult<()> {
    let (record, _, _) = vmsim::design_fisc_vm(cfg)?;
    out.json("fisc.json", &record)?;
    println!("FISC gain {:?}, global cost {:.6} (from {:.6})", record.k_fi.as_slice(), record.global_cost, record.initial_cost);
    Ok(())
}

fn identify(cfg: &ScenarioConfig, out: &mut Outputs, trajectory: Option<PathBuf>, fisc: Option<PathBuf>) -> CliResult<()> {
    let fisc: FiscRecord = read_json(&artifact(out, fisc, "fisc.json"))?;
    let (game, nash) = fisc.game(cfg)?;
    let segments = match trajectory {
        Some(path) => {
            let file = fs::File::open(&path).map_err(|source| CliError::File { path: path.clone(), source })?;
            let traj = io::read_trajectory_csv(file, 4, &[1, 2]).map_err(|source| CliError::Parse { path, source })?;
            io::split_at_time_resets(&traj)
        }
        None => {
            let segments = vmsim::identification_data(cfg, &game, &nash)?;
            let mut buf = Vec::new();
            io::write_trajectory_csv(&mut buf, &io::join_segments(&segments)?, &vmsim::vm_trajectory_header())?;
            out.write("identification_data.csv", &buf)?;
            segments
        }
    };
    let result = vmsim::identify_vm(cfg, &game, &nash, &segments)?;
    let record = NpdgRecord::from_result(&result);
    out.json("npdg.json", &record)?;
    out.json("residuals.json", &record.residuals)?;
    println!("surrogate identified at delta {} with beta {:.4}", record.delta, record.beta);
    Ok(())
}

fn design_lisc(cfg: &ScenarioConfig, out: &mut Outputs, fisc: Option<PathBuf>, npdg: Option<PathBuf>) -> CliResult<()> {
    let fisc: FiscRecord = read_json(&artifact(out, fisc, "fisc.json"))?;
    let npdg: NpdgRecord = read_json(&artifact(out, npdg, "npdg.json"))?;
    let (game, _) = fisc.game(cfg)?;
    let ident = npdg.to_result(&game.dynamics)?;
    let (record, cs) = vmsim::design_lisc_vm(cfg, &fisc, &game, &ident)?;
    out.json("controller.json", &record)?;
    out.json(
        "cs_report.json",
        &CsReportFile {
            rank: cs.rank,
            are_identity: cs.are_identity,
            pinv_contract: cs.pinv_contract,
            m: io::to_rows(&cs.m),
            m_pinv: io::to_rows(&cs.m_pinv),
        },
    )?;
    println!("LISC gain {:?}, input mismatch {:.4}", record.k_li.as_slice(), record.mismatch);
    Ok(())
}

fn simulate(
    mut cfg: ScenarioConfig,
    out: &mut Outputs,
    fisc: Option<PathBuf>,
    npdg: Option<PathBuf>,
    controller: Option<PathBuf>,
    kind: Option<KindArg>,
) -> CliResult<()> {
    if let Some(k) = kind {
        cfg.controller = match k {
            KindArg::Nc => ControllerKind::Nc,
            KindArg::Fisc => ControllerKind::Fisc,
            KindArg::Lisc => ControllerKind::Lisc,
        };
    }
    let fisc: FiscRecord = read_json(&artifact(out, fisc, "fisc.json"))?;
    let lisc: Option<ControllerRecord> = match (controller, cfg.controller) {
        (Some(p), _) => Some(read_json(&p)?),
        (None, ControllerKind::Lisc) => Some(read_json(&out.path("controller.json"))?),
        (None, _) => None,
    };
    let npdg: Option<NpdgRecord> = npdg.map(|p| read_json(&p)).transpose()?;
    let (game, nash) = fisc.game(&cfg)?;
    let ident = npdg.map(|r| r.to_result(&game.dynamics)).transpose()?;
    let surrogate = ident.as_ref().map(|i| (&game, &nash, i));
    let (traj, metrics) = vmsim::run_scenario(&cfg, &fisc, lisc.as_ref(), surrogate)?;
    let mut buf = Vec::new();
    io::write_trajectory_csv(&mut buf, &traj, &vmsim::vm_trajectory_header())?;
    out.write("trajectory.csv", &buf)?;
    let mut buf = Vec::new();
    io::write_table_csv(&mut buf, &[metrics.clone()])?;
    out.write("metrics.csv", &buf)?;
    println!("{:?}: manipulator RMSE {:.6} m", metrics.controller, metrics.rmse_dm);
    Ok(())
}

fn sweep(cfg: &ScenarioConfig, common: &Common, out: &mut Outputs, fisc: Option<PathBuf>, seeds: usize) -> CliResult<()> {
    let fisc: FiscRecord = read_json(&artifact(out, fisc, "fisc.json"))?;
    let (game, nash) = fisc.game(cfg)?;
    let mut sweep = SweepConfig { seeds, base_seed: cfg.seed, estimator: cfg.estimator, ..SweepConfig::default() };
    if !common.snr.is_empty() {
        sweep.snr_db = common.snr.clone();
    }
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    let (rows, runs) = vmsim::noise_sweep(
        &game,
        &nash,
        &vmsim::Scenario::identification_experiment(),
        &sweep,
        &npdg::identify::IdentifyOptions::default(),
    )?;
    let mut buf = Vec::new();
    io::write_table_csv(&mut buf, &rows)?;
    out.write("sweep.csv", &buf)?;
    let mut buf = Vec::new();
    io::write_table_csv(&mut buf, &runs)?;
    out.write("sweep_runs.csv", &buf)?;
    for r in &rows {
        println!(
            "SNR {:>5}: median max DD {}, median smallest delta {}, {} infeasible of {}",
            r.snr_db.map_or("inf".to_string(), |s| s.to_string()),
            r.median_max_dd.map_or("n/a".to_string(), |v| format!("{v:.4e}")),
            r.median_delta.map_or("n/a".to_string(), |v| v.to_string()),
            r.infeasible,
            r.runs
        );
    }
    Ok(())
}

fn verify(
    cfg: &ScenarioConfig,
    out: &mut Outputs,
    fisc: Option<PathBuf>,
    npdg: Option<PathBuf>,
    controller: Option<PathBuf>,
) -> CliResult<()> {
    let fisc: FiscRecord = read_json(&artifact(out, fisc, "fisc.json"))?;
    // Explicit paths must exist; otherwise whatever earlier stages left in the output
    // directory is verified too.
    let optional = |explicit: Option<PathBuf>, default: &str| explicit.or_else(|| Some(out.path(default)).filter(|p| p.exists()));
    let npdg: Option<NpdgRecord> = optional(npdg, "npdg.json").map(|p| read_json(&p)).transpose()?;
    let controller: Option<ControllerRecord> = optional(controller, "controller.json").map(|p| read_json(&p)).transpose()?;
    if controller.is_some() && npdg.is_none() {
        return Err(CliError::Usage("verifying a controller needs --npdg".into()));
    }
    let checks = vmsim::verify_artifacts(cfg, &fisc, npdg.as_ref(), controller.as_ref())?;
    out.json("verify.json", &checks)?;
    for c in &checks {
        println!("{} {:<32} {:.3e} (tol {:.0e})", if c.ok { "ok  " } else { "FAIL" }, c.name, c.value, c.tol);
    }
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.ok).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<String> = failed.iter().map(|c| format!("{} = {:.3e}", c.name, c.value)).collect();
        Err(CliError::Violation(names.join(", ")))
    }
}
