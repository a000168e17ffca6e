//! Command-line front end.
//!
//! Each subcommand computes everything first and writes its files at the
//! end, so a failed run leaves no partial output. Plotting is left to
//! external tools; the CSV headers below are part of the public contract:
//!
//! | subcommand  | files                                             |
//! |-------------|---------------------------------------------------|
//! | `spectrum`  | `spectrum.csv`: `omegaC_GHz`, one `E_<states>_GHz` column per request |
//! | `chi`       | `chi.csv`: `omegaC_GHz`, `chi101_MHz` .. `chi202_MHz` |
//! | `ramsey`    | `ramsey.csv` (Q1 ground probability vs analysis phase), `ramsey.json` |
//! | `calibrate` | `calibration.toml`, `cphase_scan.csv`, `calibrate.json` |
//! | `qpt`       | `chi_<gate>.json`, `chi_<gate>_abs.csv`, `qpt.json` |
//! | `leakage`   | `leakage.csv`: `total_ramp_ns`, `P_00` .. `P_22` |
//! | `epr`       | `epr_rho.json`, `epr_rho_abs.csv`, `epr.json` |
//!
//! Energies in `spectrum.csv` are measured from the dressed ground state.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;

use crate::control::{Schedule, DEFAULT_BUFFER_NS};
use crate::dynamics::{reduce_to_qutrits, unit_columns, DecoherenceModel, Simulator, DEFAULT_MACRO_DT_NS};
use crate::error::{Result, SimError};
use crate::gates::{
    calibrate_device, calibrate_standard_set, conditional_ramsey_chi, epr_schedule, epr_state, ideal_cphase,
    leakage_return_probabilities, simulate_process, CalibrationOptions, CphaseCalibration, DeviceCalibration,
    RamseyResult, SingleQutritCalibration, DEFAULT_TAU_EDGE_NS,
};
use crate::linalg::{C64, ONE};
use crate::model::{DeviceParams, HilbertSpace, Label};
use crate::spectrum::{chi_sweep, LabelMode, SpectrumTracker};
use crate::tomography::{
    process_fidelity, qpt, simulate_qst, state_fidelity, write_abs_csv, LinearMap, MatrixRecord, MeasurementModel,
    ProcessMatrix,
};

/// Step used by the command line when `--dt` is not given, ns.
pub const CLI_DT_NS: f64 = 0.05;

/// Smallest truncation the experiments accept.
pub const MIN_DIMS: (usize, usize, usize) = (3, 2, 3);

#[derive(Debug, Parser)]
#[command(name = "qutrit-sim", version, about = "Pulse-level simulation of two coupled transmon qutrits")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Device parameter file (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Levels kept for Q1, coupler and Q2, as `n1,nc,n2`.
    #[arg(long, global = true, default_value = "4,4,4")]
    pub dims: String,
    /// Integration step, ns.
    #[arg(long, global = true, default_value_t = CLI_DT_NS)]
    pub dt: f64,
    /// Lindblad macro step, ns.
    #[arg(long, global = true, default_value_t = DEFAULT_MACRO_DT_NS)]
    pub macro_dt: f64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for multinomial resampling; only used with `--shots`.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Shots per tomography setting; exact probabilities when omitted.
    #[arg(long, global = true)]
    pub shots: Option<usize>,
    /// `off`, `effective` (constant effective times) or `tables:<dir>`.
    #[arg(long, global = true, default_value = "effective")]
    pub decoherence: String,
    /// Calibration file written by `calibrate`; recalibrates when omitted.
    #[arg(long, global = true)]
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Dressed energies of labelled states (or sums of them) vs coupler frequency.
    Spectrum {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Comma-separated states; `+` joins states whose energies are summed.
        #[arg(long, default_value = "102,100+002")]
        states: String,
    },
    /// The four cross-Kerr coefficients vs coupler frequency.
    Chi {
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Conditional Ramsey estimate of one cross-Kerr coefficient.
    Ramsey(RamseyArgs),
    /// Single-qutrit pulses, Bell-state angles and the Cphase operating point.
    Calibrate,
    /// Process tomography of a gate.
    Qpt {
        #[arg(long, value_enum, default_value_t = GateChoice::Cphase)]
        gate: GateChoice,
        /// Idle time of the identity gate, ns.
        #[arg(long, default_value_t = 0.0)]
        idle: f64,
    },
    /// Return probabilities after a flux excursion with no flat top.
    Leakage {
        /// Total ramp times (up plus down), ns.
        #[arg(long, value_delimiter = ',', default_value = "40,60,80,100,120,140")]
        ramps: Vec<f64>,
        /// Flux amplitude; defaults to the calibrated Cphase amplitude.
        #[arg(long)]
        v_max: Option<f64>,
    },
    /// Bell-state preparation and state tomography.
    Epr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GateChoice {
    Cphase,
    Identity,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Lowest coupler frequency, GHz.
    #[arg(long, default_value_t = 6.6)]
    pub from: f64,
    /// Highest coupler frequency, GHz.
    #[arg(long, default_value_t = 7.64)]
    pub to: f64,
    #[arg(long, default_value_t = 105)]
    pub points: usize,
}

impl SweepArgs {
    pub fn grid(&self) -> Result<Vec<f64>> {
        if self.points == 0 || !self.from.is_finite() || !self.to.is_finite() || self.from > self.to {
            return Err(SimError::InvalidParameter(format!(
                "sweep needs points >= 1 and from <= to, got {} points on [{}, {}]",
                self.points, self.from, self.to
            )));
        }
        if self.points == 1 {
            return Ok(vec![self.from]);
        }
        let step = (self.to - self.from) / (self.points - 1) as f64;
        Ok((0..self.points).map(|k| self.from + step * k as f64).collect())
    }
}

#[derive(Debug, Clone, Args)]
pub struct RamseyArgs {
    /// Q1 level of the pair, 1 or 2.
    #[arg(long, default_value_t = 1)]
    pub i: usize,
    /// Q2 level of the pair, 1 or 2.
    #[arg(long, default_value_t = 2)]
    pub j: usize,
    /// Flux amplitude during the flat top.
    #[arg(long, default_value_t = 0.3)]
    pub v_b: f64,
    #[arg(long, default_value_t = DEFAULT_TAU_EDGE_NS)]
    pub tau_edge: f64,
    /// Longer flat-top duration, ns.
    #[arg(long, default_value_t = 40.0)]
    pub tau_a: f64,
    /// Shorter flat-top duration, ns.
    #[arg(long, default_value_t = 20.0)]
    pub tau_b: f64,
    /// Analysis phases over one period.
    #[arg(long, default_value_t = 24)]
    pub points: usize,
}

/// Where collapse-operator times come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DecoherenceMode {
    Off,
    Effective,
    Tables(PathBuf),
}

impl FromStr for DecoherenceMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(DecoherenceMode::Off),
            "effective" => Ok(DecoherenceMode::Effective),
            _ => match s.strip_prefix("tables:") {
                Some(dir) if !dir.is_empty() => Ok(DecoherenceMode::Tables(PathBuf::from(dir))),
                _ => Err(SimError::Parse(format!("decoherence mode {s:?}: expected off, effective or tables:<dir>"))),
            },
        }
    }
}

impl DecoherenceMode {
    pub fn model(&self) -> Result<Option<DecoherenceModel>> {
        match self {
            DecoherenceMode::Off => Ok(None),
            DecoherenceMode::Effective => Ok(Some(DecoherenceModel::effective_times())),
            DecoherenceMode::Tables(dir) => DecoherenceModel::from_table_dir(dir).map(Some),
        }
    }

    fn name(&self) -> String {
        match self {
            DecoherenceMode::Off => "off".into(),
            DecoherenceMode::Effective => "effective".into(),
            DecoherenceMode::Tables(d) => format!("tables:{}", d.display()),
        }
    }
}

/// Validated run settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub device: DeviceParams,
    pub device_path: Option<PathBuf>,
    pub space: HilbertSpace,
    pub dt: f64,
    pub macro_dt: f64,
    pub out: PathBuf,
    pub seed: u64,
    pub shots: Option<usize>,
    pub decoherence: DecoherenceMode,
    pub calibration: Option<PathBuf>,
}

pub fn parse_dims(s: &str) -> Result<HilbertSpace> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| SimError::Parse(format!("dims {s:?}: expected three comma-separated integers")))?;
    if parts.len() != 3 {
        return Err(SimError::Parse(format!("dims {s:?}: expected three comma-separated integers")));
    }
    let (n1, nc, n2) = (parts[0], parts[1], parts[2]);
    if n1 < MIN_DIMS.0 || nc < MIN_DIMS.1 || n2 < MIN_DIMS.2 {
        return Err(SimError::InvalidDimension(format!("dims ({n1},{nc},{n2}) below the minimum {MIN_DIMS:?}")));
    }
    HilbertSpace::new(n1, nc, n2)
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(SimError::InvalidParameter(format!("{what} {} does not exist", path.display())))
    }
}

impl ExperimentConfig {
    pub fn from_args(g: &GlobalArgs) -> Result<Self> {
        let space = parse_dims(&g.dims)?;
        if !(g.dt > 0.0) || !(g.macro_dt > 0.0) {
            return Err(SimError::InvalidParameter(format!("steps must be positive: dt {}, macro dt {}", g.dt, g.macro_dt)));
        }
        let device = match &g.config {
            Some(p) => {
                require_exists(p, "device config")?;
                DeviceParams::load(p)?
            }
            None => DeviceParams::default(),
        };
        let decoherence: DecoherenceMode = g.decoherence.parse()?;
        if let DecoherenceMode::Tables(dir) = &decoherence {
            require_exists(dir, "decoherence table directory")?;
        }
        if let Some(p) = &g.calibration {
            require_exists(p, "calibration file")?;
        }
        Ok(ExperimentConfig {
            device,
            device_path: g.config.clone(),
            space,
            dt: g.dt,
            macro_dt: g.macro_dt,
            out: g.out.clone(),
            seed: g.seed,
            shots: g.shots,
            decoherence,
            calibration: g.calibration.clone(),
        })
    }

    pub fn simulator(&self) -> Result<Simulator> {
        Simulator::new(&self.device, self.space)?.with_dt(self.dt)
    }

    fn measurement_model(&self) -> MeasurementModel {
        MeasurementModel { shots: self.shots.map(|n| (n, self.seed)), ..Default::default() }
    }

    /// Calibration from `--calibration`, or a fresh one.
    fn device_calibration(&self, sim: &Simulator) -> Result<DeviceCalibration> {
        match &self.calibration {
            Some(p) => DeviceCalibration::load(p),
            None => Ok(calibrate_device(sim, &CalibrationOptions::default())?.0),
        }
    }

    fn single_calibration(&self, sim: &Simulator) -> Result<SingleQutritCalibration> {
        match &self.calibration {
            Some(p) => Ok(DeviceCalibration::load(p)?.single),
            None => calibrate_standard_set(sim, &CalibrationOptions::default()),
        }
    }
}

/// One file produced by a subcommand, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFile {
    pub name: String,
    pub contents: Vec<u8>,
}

impl OutputFile {
    fn json<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        let mut contents = serde_json::to_vec_pretty(value)?;
        contents.push(b'\n');
        Ok(OutputFile { name: name.into(), contents })
    }
}

/// Write all files; the directory is created if needed.
pub fn write_outputs(dir: &Path, files: &[OutputFile]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    files
        .iter()
        .map(|f| {
            let p = dir.join(&f.name);
            fs::write(&p, &f.contents)?;
            Ok(p)
        })
        .collect()
}

/// Machine-readable record printed to stderr when a run fails.
pub fn error_record(e: &SimError) -> String {
    json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn csv_bytes(header: &[String], rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(header)?;
    for r in rows {
        wr.write_record(r.iter().map(|v| v.to_string()))?;
    }
    wr.into_inner().map_err(|e| SimError::Io(e.into_error()))
}

fn computational_names() -> Vec<String> {
    (0..9).map(|k| format!("{}{}", k / 3, k % 3)).collect()
}

/// A requested spectrum column: energies of these states are summed.
fn parse_state_sums(s: &str) -> Result<Vec<(String, Vec<Label>)>> {
    s.split(',')
        .map(|item| {
            let item = item.trim();
            let labels = item.split('+').map(Label::parse).collect::<Result<Vec<_>>>()?;
            Ok((item.to_string(), labels))
        })
        .collect()
}

pub fn spectrum_header(states: &str) -> Result<Vec<String>> {
    let mut h = vec!["omegaC_GHz".to_string()];
    h.extend(parse_state_sums(states)?.into_iter().map(|(n, _)| format!("E_{n}_GHz")));
    Ok(h)
}

pub fn cmd_spectrum(cfg: &ExperimentConfig, sweep: &SweepArgs, states: &str) -> Result<Vec<OutputFile>> {
    let requests = parse_state_sums(states)?;
    for (_, labels) in &requests {
        for l in labels {
            cfg.space.checked_index(*l)?;
        }
    }
    let mut tracker = SpectrumTracker::new(&cfg.device, cfg.space, LabelMode::Adiabatic)?;
    let ground = Label::new(0, 0, 0);
    let mut rows = Vec::new();
    for w in sweep.grid()? {
        let s = tracker.at(w)?;
        let e0 = s.energy(ground)?;
        let mut row = vec![w];
        for (_, labels) in &requests {
            let mut e = 0.0;
            for l in labels {
                e += s.energy(*l)? - e0;
            }
            row.push(e / std::f64::consts::TAU);
        }
        rows.push(row);
    }
    Ok(vec![OutputFile { name: "spectrum.csv".into(), contents: csv_bytes(&spectrum_header(states)?, &rows)? }])
}

pub fn cmd_chi(cfg: &ExperimentConfig, sweep: &SweepArgs) -> Result<Vec<OutputFile>> {
    let table = chi_sweep(&cfg.device, &sweep.grid()?, cfg.space)?;
    let mut contents = Vec::new();
    table.write_csv(&mut contents)?;
    Ok(vec![OutputFile { name: "chi.csv".into(), contents }])
}

pub fn ramsey_header() -> Vec<String> {
    ["theta_rad", "P0_ref_tauA", "P0_cond_tauA", "P0_ref_tauB", "P0_cond_tauB"].map(String::from).to_vec()
}

/// CSV and summary of a conditional Ramsey run.
pub fn ramsey_outputs(r: &RamseyResult, v_b: f64, tau_edge: f64) -> Result<Vec<OutputFile>> {
    let (a, b) = &r.curves;
    let worst_fit = [a.fit_reference, a.fit_conditional, b.fit_reference, b.fit_conditional]
        .iter()
        .map(|f| f.residual)
        .fold(0.0, f64::max);
    let rows: Vec<Vec<f64>> = (0..a.theta.len())
        .map(|k| vec![a.theta[k], a.reference[k], a.conditional[k], b.reference[k], b.conditional[k]])
        .collect();
    let summary = json!({
        "i": r.i,
        "j": r.j,
        "v_b": v_b,
        "tau_edge_ns": tau_edge,
        "tau_a_ns": r.tau.0,
        "tau_b_ns": r.tau.1,
        "delta_phi_a_rad": a.delta_phi,
        "delta_phi_b_rad": b.delta_phi,
        "fit_residual_max": worst_fit,
        "chi_MHz": r.chi_mhz,
    });
    Ok(vec![
        OutputFile { name: "ramsey.csv".into(), contents: csv_bytes(&ramsey_header(), &rows)? },
        OutputFile::json("ramsey.json", &summary)?,
    ])
}

pub fn cmd_ramsey(cfg: &ExperimentConfig, args: &RamseyArgs) -> Result<Vec<OutputFile>> {
    for t in [args.tau_a, args.tau_b] {
        if !(1.0..=2000.0).contains(&t) {
            return Err(SimError::InvalidParameter(format!("Ramsey flat-top duration {t} ns outside [1, 2000]")));
        }
    }
    if args.points < 3 {
        return Err(SimError::InvalidParameter("a Ramsey sweep needs at least three phases".into()));
    }
    let sim = cfg.simulator()?;
    let cal = cfg.single_calibration(&sim)?;
    let theta: Vec<f64> = (0..args.points).map(|k| std::f64::consts::TAU * k as f64 / args.points as f64).collect();
    let r = conditional_ramsey_chi(&sim, &cal, args.i, args.j, args.v_b, args.tau_edge, (args.tau_a, args.tau_b), &theta)?;
    ramsey_outputs(&r, args.v_b, args.tau_edge)
}

pub fn cphase_scan_header() -> Vec<String> {
    ["tau_flat_ns", "phi101_rad", "phi102_rad", "fit101_rad", "fit102_rad"].map(String::from).to_vec()
}

pub fn calibrate_outputs(device: &DeviceCalibration, op: &CphaseCalibration) -> Result<Vec<OutputFile>> {
    let s = &op.scan;
    let rows: Vec<Vec<f64>> = (0..s.tau.len())
        .map(|k| vec![s.tau[k], s.phi101[k], s.phi102[k], s.fit101.eval(s.tau[k]), s.fit102.eval(s.tau[k])])
        .collect();
    let gate = device.cphase()?;
    let summary = json!({
        "v_max": s.v_max,
        "tau_edge_ns": s.tau_edge,
        "tau_flat_ns": op.tau_flat,
        "phase_residual_rad": [op.residual.0, op.residual.1],
        "slope101_rad_per_ns": s.fit101.slope,
        "slope102_rad_per_ns": s.fit102.slope,
        "predicted_slope101_rad_per_ns": s.predicted_slope101,
        "predicted_slope102_rad_per_ns": s.predicted_slope102,
        "r_squared": [s.fit101.r_squared, s.fit102.r_squared],
        "gate_fidelity": gate.fidelity,
        "gate_duration_ns": gate.schedule(&device.single)?.duration,
        "pulses": device.single.pulses.len(),
    });
    Ok(vec![
        OutputFile { name: "calibration.toml".into(), contents: toml::to_string(device)?.into_bytes() },
        OutputFile { name: "cphase_scan.csv".into(), contents: csv_bytes(&cphase_scan_header(), &rows)? },
        OutputFile::json("calibrate.json", &summary)?,
    ])
}

pub fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<Vec<OutputFile>> {
    let sim = cfg.simulator()?;
    let (device, op) = calibrate_device(&sim, &CalibrationOptions::default())?;
    calibrate_outputs(&device, &op)
}

fn matrix_files(stem: &str, m: &Array2<C64>, basis: &str) -> Result<Vec<OutputFile>> {
    let mut abs = Vec::new();
    write_abs_csv(m, &mut abs)?;
    Ok(vec![
        OutputFile::json(&format!("{stem}.json"), &MatrixRecord::new(basis, m))?,
        OutputFile { name: format!("{stem}_abs.csv"), contents: abs },
    ])
}

pub fn cmd_qpt(cfg: &ExperimentConfig, gate: GateChoice, idle: f64) -> Result<Vec<OutputFile>> {
    let sim = cfg.simulator()?;
    let (schedule, target, name) = match gate {
        GateChoice::Cphase => {
            let device = cfg.device_calibration(&sim)?;
            (device.cphase()?.schedule(&device.single)?, ideal_cphase(), "cphase")
        }
        GateChoice::Identity => {
            if !(idle >= 0.0) {
                return Err(SimError::InvalidParameter(format!("idle time {idle} ns must be non-negative")));
            }
            let mut s = Schedule::empty(idle);
            s.buffer = DEFAULT_BUFFER_NS;
            (s, Array2::eye(9).mapv(|x: f64| C64::new(x, 0.0)), "identity")
        }
    };
    let model = cfg.decoherence.model()?;
    let map = LinearMap::new(simulate_process(&sim, &schedule, model.as_ref(), cfg.macro_dt)?)?;
    let chi = qpt(|r| Ok(map.apply(r)), &cfg.measurement_model())?;
    let fidelity = process_fidelity(&chi, &ProcessMatrix::from_unitary(&target)?)?;
    let mut files = matrix_files(&format!("chi_{name}"), &chi.chi, "two-qutrit Gell-Mann products E_m (x) E_n")?;
    files.push(OutputFile::json(
        "qpt.json",
        &json!({
            "gate": name,
            "decoherence": cfg.decoherence.name(),
            "duration_ns": schedule.duration,
            "fidelity": fidelity.value,
            "fidelity_raw": fidelity.raw,
            "clamped": fidelity.clamped,
            "completeness_residual": chi.completeness_residual(),
        }),
    )?);
    Ok(files)
}

pub fn leakage_header() -> Vec<String> {
    let mut h = vec!["total_ramp_ns".to_string()];
    h.extend(computational_names().into_iter().map(|n| format!("P_{n}")));
    h
}

pub fn cmd_leakage(cfg: &ExperimentConfig, ramps: &[f64], v_max: Option<f64>) -> Result<Vec<OutputFile>> {
    if ramps.is_empty() || ramps.iter().any(|r| !(*r > 0.0)) {
        return Err(SimError::InvalidParameter(format!("ramp times must be positive, got {ramps:?}")));
    }
    let sim = cfg.simulator()?;
    let v = match (v_max, &cfg.calibration) {
        (Some(v), _) => v,
        (None, Some(p)) => DeviceCalibration::load(p)?.cphase()?.flux.v_max,
        (None, None) => {
            return Err(SimError::InvalidParameter("leakage needs --v-max or a calibration file".into()));
        }
    };
    let rows = ramps
        .iter()
        .map(|&r| {
            let p = leakage_return_probabilities(&sim, v, r)?;
            Ok(std::iter::once(r).chain(p).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(vec![OutputFile { name: "leakage.csv".into(), contents: csv_bytes(&leakage_header(), &rows)? }])
}

pub fn cmd_epr(cfg: &ExperimentConfig) -> Result<Vec<OutputFile>> {
    let sim = cfg.simulator()?;
    let device = cfg.device_calibration(&sim)?;
    let schedule = epr_schedule(&device.single, device.cphase()?)?;
    let n = sim.space.dim();
    let ground = sim.space.index(Label::new(0, 0, 0));
    let full = match cfg.decoherence.model()? {
        Some(m) => {
            let mut rho0 = Array2::zeros((n, n));
            rho0[[ground, ground]] = ONE;
            sim.propagate_lindblad(&schedule, &m, &rho0, cfg.macro_dt)?
                .density()
                .cloned()
                .ok_or_else(|| SimError::Reconstruction("Lindblad run returned no density matrix".into()))?
        }
        None => {
            let x = sim.propagate_columns(&schedule, &unit_columns(n, &[ground]))?;
            Array2::from_shape_fn((n, n), |(r, c)| x[[r, 0]] * x[[c, 0]].conj())
        }
    };
    let rho = reduce_to_qutrits(sim.space, &full);
    let reconstructed = simulate_qst(&rho, &cfg.measurement_model())?;
    let fidelity = state_fidelity(&reconstructed, &epr_state())?;
    let mut files = matrix_files("epr_rho", &reconstructed, "computational |q1 q2>")?;
    files.push(OutputFile::json(
        "epr.json",
        &json!({
            "decoherence": cfg.decoherence.name(),
            "duration_ns": schedule.duration,
            "fidelity": fidelity,
            "population_in_computational": crate::linalg::trace(&rho).re,
        }),
    )?);
    Ok(files)
}

/// Run one parsed command line and write its files.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::from_args(&cli.global)?;
    let files = match &cli.command {
        Command::Spectrum { sweep, states } => cmd_spectrum(&cfg, sweep, states)?,
        Command::Chi { sweep } => cmd_chi(&cfg, sweep)?,
        Command::Ramsey(args) => cmd_ramsey(&cfg, args)?,
        Command::Calibrate => cmd_calibrate(&cfg)?,
        Command::Qpt { gate, idle } => cmd_qpt(&cfg, *gate, *idle)?,
        Command::Leakage { ramps, v_max } => cmd_leakage(&cfg, ramps, *v_max)?,
        Command::Epr => cmd_epr(&cfg)?,
    };
    write_outputs(&cfg.out, &files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(extra: &[&str]) -> ExperimentConfig {
        let mut argv = vec!["qutrit-sim", "--dims", "3,2,3", "--decoherence", "off"];
        argv.extend_from_slice(extra);
        argv.push("chi");
        let cli = Cli::try_parse_from(argv).unwrap();
        ExperimentConfig::from_args(&cli.global).unwrap()
    }

    fn text(f: &OutputFile) -> String {
        String::from_utf8(f.contents.clone()).unwrap()
    }

    #[test]
    fn dims_are_validated() {
        assert_eq!(parse_dims("4, 3,4").unwrap(), HilbertSpace::new(4, 3, 4).unwrap());
        assert!(matches!(parse_dims("2,2,3"), Err(SimError::InvalidDimension(_))));
        assert!(matches!(parse_dims("3,1,3"), Err(SimError::InvalidDimension(_))));
        assert!(matches!(parse_dims("3,3"), Err(SimError::Parse(_))));
        assert!(matches!(parse_dims("a,b,c"), Err(SimError::Parse(_))));
    }

    #[test]
    fn global_flags_are_validated() {
        let parse = |argv: &[&str]| {
            let cli = Cli::try_parse_from(argv.iter().copied().chain(["chi"])).unwrap();
            ExperimentConfig::from_args(&cli.global)
        };
        assert!(parse(&["q", "--dt", "0"]).is_err());
        assert!(parse(&["q", "--macro-dt=-1"]).is_err());
        assert!(parse(&["q", "--config", "/nonexistent/device.toml"]).is_err());
        assert!(parse(&["q", "--calibration", "/nonexistent/cal.toml"]).is_err());
        assert!(parse(&["q", "--decoherence", "tables:/nonexistent"]).is_err());
        assert!(parse(&["q", "--decoherence", "sometimes"]).is_err());
        let cfg = parse(&["q"]).unwrap();
        assert_eq!(cfg.decoherence, DecoherenceMode::Effective);
        assert_eq!(cfg.space, HilbertSpace::new(4, 4, 4).unwrap());
        assert_eq!(cfg.dt, CLI_DT_NS);
    }

    #[test]
    fn decoherence_modes_parse() {
        assert_eq!("off".parse::<DecoherenceMode>().unwrap(), DecoherenceMode::Off);
        assert_eq!("tables:data/x".parse::<DecoherenceMode>().unwrap(), DecoherenceMode::Tables("data/x".into()));
        assert!("tables:".parse::<DecoherenceMode>().is_err());
        assert!(DecoherenceMode::Off.model().unwrap().is_none());
    }

    #[test]
    fn sweep_grid_edges() {
        let one = SweepArgs { from: 7.0, to: 7.64, points: 1 };
        assert_eq!(one.grid().unwrap(), vec![7.0]);
        let g = SweepArgs { from: 7.0, to: 7.5, points: 6 }.grid().unwrap();
        assert_eq!(g.len(), 6);
        assert!((g[5] - 7.5).abs() < 1e-12);
        assert!(SweepArgs { from: 7.5, to: 7.0, points: 3 }.grid().is_err());
        assert!(SweepArgs { from: 7.0, to: 7.5, points: 0 }.grid().is_err());
    }

    #[test]
    fn golden_headers() {
        assert_eq!(spectrum_header("102,100+002").unwrap().join(","), "omegaC_GHz,E_102_GHz,E_100+002_GHz");
        assert_eq!(ramsey_header().join(","), "theta_rad,P0_ref_tauA,P0_cond_tauA,P0_ref_tauB,P0_cond_tauB");
        assert_eq!(cphase_scan_header().join(","), "tau_flat_ns,phi101_rad,phi102_rad,fit101_rad,fit102_rad");
        assert_eq!(
            leakage_header().join(","),
            "total_ramp_ns,P_00,P_01,P_02,P_10,P_11,P_12,P_20,P_21,P_22"
        );
        let cfg = config(&[]);
        let sweep = SweepArgs { from: 7.64, to: 7.64, points: 1 };
        let chi = text(&cmd_chi(&cfg, &sweep).unwrap()[0]);
        assert_eq!(chi.lines().next().unwrap(), "omegaC_GHz,chi101_MHz,chi102_MHz,chi201_MHz,chi202_MHz");
        assert_eq!(chi.lines().count(), 2);
        let spec = text(&cmd_spectrum(&cfg, &sweep, "102,100+002").unwrap()[0]);
        assert_eq!(spec.lines().next().unwrap(), "omegaC_GHz,E_102_GHz,E_100+002_GHz");
        assert_eq!(spec.lines().count(), 2);
    }

    #[test]
    fn uncoupled_spectrum_is_additive() {
        let mut cfg = config(&[]);
        cfg.device = DeviceParams::default().uncoupled();
        let sweep = SweepArgs { from: 6.8, to: 7.64, points: 5 };
        let csv = text(&cmd_spectrum(&cfg, &sweep, "102,100+002,010").unwrap()[0]);
        let rows: Vec<Vec<f64>> =
            csv.lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
        for r in &rows {
            assert!((r[1] - r[2]).abs() < 1e-9, "{r:?}");
            // The coupler-excited state follows the coupler frequency.
            assert!((r[3] - r[0]).abs() < 1e-9, "{r:?}");
        }
        assert!((rows[0][1] - rows[4][1]).abs() < 1e-9);
    }

    #[test]
    fn state_outside_truncation_is_rejected() {
        let cfg = config(&[]);
        let sweep = SweepArgs { from: 7.64, to: 7.64, points: 1 };
        assert!(cmd_spectrum(&cfg, &sweep, "030").is_err());
        assert!(cmd_spectrum(&cfg, &sweep, "1x2").is_err());
    }

    #[test]
    fn leakage_is_deterministic_and_needs_an_amplitude() {
        let cfg = config(&[]);
        assert!(cmd_leakage(&cfg, &[60.0], None).is_err());
        assert!(cmd_leakage(&cfg, &[-1.0], Some(0.2)).is_err());
        let a = cmd_leakage(&cfg, &[40.0, 100.0], Some(0.2)).unwrap();
        let b = cmd_leakage(&cfg, &[40.0, 100.0], Some(0.2)).unwrap();
        assert_eq!(a, b);
        let csv = text(&a[0]);
        assert_eq!(csv.lines().next().unwrap(), leakage_header().join(","));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn identity_qpt_is_perfect_without_idle_time() {
        let cfg = config(&[]);
        let files = cmd_qpt(&cfg, GateChoice::Identity, 0.0).unwrap();
        let names: Vec<&str> = files.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, ["chi_identity.json", "chi_identity_abs.csv", "qpt.json"]);
        let summary: serde_json::Value = serde_json::from_slice(&files[2].contents).unwrap();
        assert!(summary["fidelity"].as_f64().unwrap() > 0.999);
        assert!(cmd_qpt(&cfg, GateChoice::Identity, -1.0).is_err());
    }

    #[test]
    fn ramsey_durations_are_bounded() {
        let cfg = config(&[]);
        let args = RamseyArgs { i: 1, j: 2, v_b: 0.3, tau_edge: 50.0, tau_a: 2500.0, tau_b: 20.0, points: 12 };
        assert!(cmd_ramsey(&cfg, &args).is_err());
        let args = RamseyArgs { tau_a: 0.5, ..args };
        assert!(cmd_ramsey(&cfg, &args).is_err());
    }

    #[test]
    fn outputs_land_in_the_directory() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested");
        let files = vec![OutputFile { name: "a.txt".into(), contents: b"x".to_vec() }];
        let paths = write_outputs(&out, &files).unwrap();
        assert_eq!(fs::read(&paths[0]).unwrap(), b"x");
    }

    #[test]
    fn error_record_is_json() {
        let v: serde_json::Value =
            serde_json::from_str(&error_record(&SimError::Calibration("no crossing".into()))).unwrap();
        assert_eq!(v["error"], "Calibration");
        assert!(v["message"].as_str().unwrap().contains("no crossing"));
    }
}
