//! Calibrated gates built from pulses: single-qutrit rotations, the
//! two-qutrit controlled-phase gate, the qutrit Hadamard and the Bell-state
//! preparation, plus the conditional Ramsey and leakage experiments.
//!
//! All matrices here are logical: rows and columns are dressed idle states
//! in the rotating frame, with accumulated virtual-Z frames removed. A
//! frame shift `(d01, d12)` on a qutrit acts logically as
//! `diag(1, e^{-i d01}, e^{-i (d01 + d12)})`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::control::{
    compose, Event, FluxPulse, FrameShift, MicrowavePulse, Qutrit, Schedule, Subspace, DEFAULT_BUFFER_NS,
    DEFAULT_GATE_NS,
};
use crate::dynamics::{reduce_to_qutrits, unit_columns, DecoherenceModel, Simulator};
use crate::error::{Result, SimError};
use crate::linalg::{dagger, trace, wrap_2pi, wrap_pi, C64, ONE, ZERO};
use crate::model::{HilbertSpace, Label};
use crate::numerics::{brent_root, golden_min, linear_fit, sinusoid_fit, LinearFit, SinusoidFit};
use crate::spectrum::{LabelMode, SpectrumTracker};

/// Residual allowed on each conditional phase when picking the flat time, rad.
pub const CPHASE_PHASE_TOL: f64 = 0.02;

/// Magnitude below which a diagonal element counts as leaked.
pub const LEAKAGE_THRESHOLD: f64 = 0.9;

/// Rotations with smaller angles are dropped from decompositions.
const MIN_ROTATION: f64 = 1e-9;

const ANGLE_MATCH: f64 = 1e-9;

/// Ideal rotation `exp(-i theta/2 (cos(phi) sx + sin(phi) sy))` on one
/// subspace of a qutrit, identity on the third level.
pub fn rotation(sub: Subspace, theta: f64, phi: f64) -> Array2<C64> {
    let a = sub.lower();
    let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let mut r = Array2::eye(3).mapv(|x: f64| C64::new(x, 0.0));
    r[[a, a]] = C64::new(c, 0.0);
    r[[a + 1, a + 1]] = C64::new(c, 0.0);
    r[[a, a + 1]] = C64::new(0.0, -s) * C64::from_polar(1.0, -phi);
    r[[a + 1, a]] = C64::new(0.0, -s) * C64::from_polar(1.0, phi);
    r
}

/// Logical action of a frame shift `(d01, d12)`.
pub fn frame_operator(frames: [f64; 2]) -> Array2<C64> {
    Array2::from_diag(&Array1::from(vec![
        ONE,
        C64::from_polar(1.0, -frames[0]),
        C64::from_polar(1.0, -(frames[0] + frames[1])),
    ]))
}

/// Frame shifts realising the logical phase gate `diag(e^{i z0}, e^{i z1}, e^{i z2})`
/// up to a global phase.
pub fn frames_for_phases(z: [f64; 3]) -> [f64; 2] {
    [-(z[1] - z[0]), -(z[2] - z[1])]
}

/// Average gate fidelity `(Tr(C^dag C) + |Tr(T^dag C)|^2) / (d (d + 1))`.
/// Leakage out of the subspace shows up through `Tr(C^dag C) < d`.
pub fn average_gate_fidelity(actual: &Array2<C64>, target: &Array2<C64>) -> f64 {
    let d = actual.nrows() as f64;
    let tr_cc = trace(&dagger(actual).dot(actual)).re;
    let overlap = trace(&dagger(target).dot(actual)).norm_sqr();
    (tr_cc + overlap) / (d * (d + 1.0))
}

fn qutrit_label(q: Qutrit, level: usize) -> Label {
    match q {
        Qutrit::Q1 => Label::new(level, 0, 0),
        Qutrit::Q2 => Label::new(0, 0, level),
    }
}

/// Full-space indices of `|l00>` (Q1) or `|00l>` (Q2) for l = 0, 1, 2.
pub fn qutrit_levels(space: HilbertSpace, q: Qutrit) -> [usize; 3] {
    [0, 1, 2].map(|l| space.index(qutrit_label(q, l)))
}

/// 3x3 logical matrix of a schedule on one qutrit, the rest of the device
/// starting and ending in its ground state.
pub fn qutrit_block(sim: &Simulator, schedule: &Schedule, q: Qutrit) -> Result<Array2<C64>> {
    let idx = qutrit_levels(sim.space, q);
    let x = sim.propagate_columns(schedule, &unit_columns(sim.space.dim(), &idx))?;
    Ok(Array2::from_shape_fn((3, 3), |(r, c)| x[[idx[r], c]]))
}

fn single_pulse_block(sim: &Simulator, pulse: MicrowavePulse) -> Result<Array2<C64>> {
    let schedule = compose(vec![Event::Microwave(pulse)], DEFAULT_BUFFER_NS)?;
    qutrit_block(sim, &schedule, pulse.channel)
}

/// Root function for the amplitude search. With the 2x2 block written as
/// `sqrt(det) [[c e^{-i psi}, .], [., c e^{i psi}]]`, this returns
/// `c cos(psi) - cos(theta/2) cos(psi)`, which stays continuous through
/// `c = 0` even when leakage keeps `|M_aa|` away from zero.
fn rotation_residual(m: &Array2<C64>, sub: Subspace, angle: f64) -> f64 {
    let a = sub.lower();
    let det = m[[a, a]] * m[[a + 1, a + 1]] - m[[a, a + 1]] * m[[a + 1, a]];
    let root = det.sqrt();
    let (x, y) = (m[[a, a]] / root, m[[a + 1, a + 1]] / root);
    let cos_psi = ((y.arg() - x.arg()) / 2.0).cos();
    0.5 * (x.re + y.re) - (angle / 2.0).cos() * cos_psi
}

/// Phase bookkeeping that maps a simulated pulse onto `R(theta, 0)`:
/// `M = e^{i g} D_post R D_pre`, with the diagonal phases stored per level.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PhaseDecomposition {
    pre: [f64; 3],
    post: [f64; 3],
}

fn decompose_phases(m: &Array2<C64>, sub: Subspace) -> PhaseDecomposition {
    let arg = |r: usize, c: usize| m[[r, c]].arg();
    match sub {
        Subspace::S01 => {
            let g = if m[[0, 0]].norm() >= 0.3 { arg(0, 0) } else { arg(1, 0) + FRAC_PI_2 };
            let b = arg(0, 1) - g + FRAC_PI_2;
            let a = arg(1, 0) - g + FRAC_PI_2;
            let a2 = arg(2, 2) - g;
            PhaseDecomposition { pre: [0.0, b, 0.0], post: [0.0, a, a2] }
        }
        Subspace::S12 => {
            let g = arg(0, 0);
            let q1 = if m[[1, 1]].norm() >= 0.3 { arg(1, 1) - g } else { 0.0 };
            let p2 = arg(1, 2) - g + FRAC_PI_2 - q1;
            let q2 = arg(2, 1) - g + FRAC_PI_2;
            PhaseDecomposition { pre: [0.0, 0.0, p2], post: [0.0, q1, q2] }
        }
    }
}

/// Frame shifts that undo the pulse's phase errors. Without the Stark
/// correction only the addressed subspace is touched.
fn correction_frames(dec: &PhaseDecomposition, sub: Subspace, stark: bool) -> ([f64; 2], [f64; 2]) {
    let to_frames = |z: [f64; 3]| [wrap_pi(z[1]), wrap_pi(z[2] - z[1])];
    let (mut pre, mut post) = (to_frames(dec.pre), to_frames(dec.post));
    if !stark {
        let other = match sub {
            Subspace::S01 => 1,
            Subspace::S12 => 0,
        };
        pre[other] = 0.0;
        post[other] = 0.0;
    }
    (pre, post)
}

fn corrected(m: &Array2<C64>, pre: [f64; 2], post: [f64; 2]) -> Array2<C64> {
    frame_operator(post).dot(m).dot(&frame_operator(pre))
}

/// A calibrated microwave rotation with its virtual-Z corrections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPulse {
    pub qutrit: Qutrit,
    pub subspace: Subspace,
    pub angle: f64,
    pub amplitude: f64,
    pub drag_coeff: f64,
    /// GHz.
    pub carrier: f64,
    /// ns.
    pub duration: f64,
    /// Frame shifts `(d01, d12)` placed at the pulse start.
    pub pre_frame: [f64; 2],
    /// Frame shifts `(d01, d12)` placed at the pulse end.
    pub post_frame: [f64; 2],
    /// Average gate fidelity of the corrected pulse on its qutrit.
    pub fidelity: f64,
}

impl CalibratedPulse {
    pub fn pulse(&self, start: f64, phase: f64) -> MicrowavePulse {
        MicrowavePulse {
            channel: self.qutrit,
            subspace: self.subspace,
            carrier: self.carrier,
            duration: self.duration,
            amplitude: self.amplitude,
            phase,
            drag_coeff: self.drag_coeff,
            start,
        }
    }

    /// Pre frames, the pulse with the given logical phase, post frames.
    pub fn events(&self, start: f64, phase: f64) -> Vec<Event> {
        let mut ev = frame_events(self.qutrit, self.pre_frame, start);
        ev.push(Event::Microwave(self.pulse(start, phase)));
        ev.extend(frame_events(self.qutrit, self.post_frame, start + self.duration));
        ev
    }
}

/// Frame-shift events for `(d01, d12)` at `time`, skipping zeros.
pub fn frame_events(qutrit: Qutrit, frames: [f64; 2], time: f64) -> Vec<Event> {
    [Subspace::S01, Subspace::S12]
        .into_iter()
        .zip(frames)
        .filter(|(_, a)| *a != 0.0)
        .map(|(subspace, angle)| Event::Frame(FrameShift { qutrit, subspace, angle, time }))
        .collect()
}

/// Events for the logical phase gate `diag(e^{i z0}, e^{i z1}, e^{i z2})`.
pub fn virtual_z_events(qutrit: Qutrit, z: [f64; 3], time: f64) -> Vec<Event> {
    frame_events(qutrit, frames_for_phases(z), time)
}

/// Knobs for single-qutrit calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub duration: f64,
    pub optimize_drag: bool,
    pub drag_bounds: (f64, f64),
    pub drag_tol: f64,
    pub stark_correction: bool,
    pub amplitude_tol: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            duration: DEFAULT_GATE_NS,
            optimize_drag: true,
            drag_bounds: (-1.5, 1.5),
            drag_tol: 0.02,
            stark_correction: true,
            amplitude_tol: 1e-9,
        }
    }
}

struct PulseFit {
    amplitude: f64,
    frames: ([f64; 2], [f64; 2]),
    fidelity: f64,
}

fn fit_amplitude(
    sim: &Simulator,
    q: Qutrit,
    sub: Subspace,
    angle: f64,
    drag: f64,
    opts: &CalibrationOptions,
    guess: Option<f64>,
) -> Result<PulseFit> {
    let base = MicrowavePulse {
        channel: q,
        subspace: sub,
        carrier: sim.transition_frequency(q, sub),
        duration: opts.duration,
        amplitude: 1.0,
        phase: 0.0,
        drag_coeff: drag,
        start: 0.0,
    };
    let f = |a: f64| -> Result<f64> {
        Ok(rotation_residual(&single_pulse_block(sim, MicrowavePulse { amplitude: a, ..base })?, sub, angle))
    };
    // A nearby previous solution gives a tight bracket; otherwise start from
    // the small-angle estimate.
    let narrow = match guess {
        Some(g) if f(0.98 * g)? * f(1.02 * g)? < 0.0 => Some((0.98 * g, 1.02 * g)),
        _ => None,
    };
    let a0 = angle / base.area_factor();
    let (lo, hi) = narrow.unwrap_or((0.6 * a0, 1.4 * a0));
    let amplitude = brent_root(lo, hi, opts.amplitude_tol, 100, f)?;
    let m = single_pulse_block(sim, MicrowavePulse { amplitude, ..base })?;
    let frames = correction_frames(&decompose_phases(&m, sub), sub, opts.stark_correction);
    let fidelity = average_gate_fidelity(&corrected(&m, frames.0, frames.1), &rotation(sub, angle, 0.0));
    Ok(PulseFit { amplitude, frames, fidelity })
}

/// Calibrate a rotation by `angle` in (0, pi]. The amplitude is the root of
/// the simulated rotation angle; DRAG is optimised for fidelity when
/// `drag` is `None` and `opts.optimize_drag` is set, otherwise fixed.
pub fn calibrate_pulse(
    sim: &Simulator,
    q: Qutrit,
    sub: Subspace,
    angle: f64,
    drag: Option<f64>,
    opts: &CalibrationOptions,
) -> Result<CalibratedPulse> {
    if !(angle > 0.0 && angle <= PI + 1e-12) {
        return Err(SimError::InvalidParameter(format!("rotation angle must be in (0, pi], got {angle}")));
    }
    let mut last = None;
    let drag = match drag {
        Some(d) => d,
        None if opts.optimize_drag => {
            let (lo, hi) = opts.drag_bounds;
            golden_min(lo, hi, opts.drag_tol, 60, |d| {
                let fit = fit_amplitude(sim, q, sub, angle, d, opts, last)?;
                last = Some(fit.amplitude);
                Ok(-fit.fidelity)
            })?
            .0
        }
        None => 0.0,
    };
    let fit = fit_amplitude(sim, q, sub, angle, drag, opts, last)?;
    Ok(CalibratedPulse {
        qutrit: q,
        subspace: sub,
        angle,
        amplitude: fit.amplitude,
        drag_coeff: drag,
        carrier: sim.transition_frequency(q, sub),
        duration: opts.duration,
        pre_frame: fit.frames.0,
        post_frame: fit.frames.1,
        fidelity: fit.fidelity,
    })
}

/// A set of calibrated pulses, serialised as TOML `[[pulse]]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SingleQutritCalibration {
    #[serde(rename = "pulse", default)]
    pub pulses: Vec<CalibratedPulse>,
}

impl SingleQutritCalibration {
    pub fn find(&self, q: Qutrit, sub: Subspace, angle: f64) -> Option<&CalibratedPulse> {
        self.pulses
            .iter()
            .find(|p| p.qutrit == q && p.subspace == sub && (p.angle - angle).abs() < ANGLE_MATCH)
    }

    pub fn get(&self, q: Qutrit, sub: Subspace, angle: f64) -> Result<&CalibratedPulse> {
        self.find(q, sub, angle).ok_or_else(|| {
            SimError::Calibration(format!("no calibrated {} {sub} rotation by {angle} rad", q.channel_name()))
        })
    }

    /// Insert, replacing any pulse with the same key.
    pub fn insert(&mut self, p: CalibratedPulse) {
        self.pulses
            .retain(|o| !(o.qutrit == p.qutrit && o.subspace == p.subspace && (o.angle - p.angle).abs() < ANGLE_MATCH));
        self.pulses.push(p);
    }

    /// Calibrate `angle` unless present. A missing angle reuses the DRAG
    /// coefficient of the pi pulse in the same subspace when there is one.
    pub fn ensure(
        &mut self,
        sim: &Simulator,
        q: Qutrit,
        sub: Subspace,
        angle: f64,
        opts: &CalibrationOptions,
    ) -> Result<&CalibratedPulse> {
        if self.find(q, sub, angle).is_none() {
            let drag = self.find(q, sub, PI).map(|p| p.drag_coeff);
            let p = calibrate_pulse(sim, q, sub, angle, drag, opts)?;
            self.insert(p);
        }
        self.get(q, sub, angle)
    }

    /// Events of a rotation by `angle` (sign folded into the phase).
    pub fn rotation_events(
        &self,
        q: Qutrit,
        sub: Subspace,
        angle: f64,
        phase: f64,
        start: f64,
    ) -> Result<(Vec<Event>, f64)> {
        let (angle, phase) = if angle < 0.0 { (-angle, phase + PI) } else { (angle, phase) };
        let p = self.get(q, sub, angle)?;
        Ok((p.events(start, phase), start + p.duration))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// pi and pi/2 rotations in both subspaces of both qutrits. DRAG is
/// optimised on the pi pulse and shared with the pi/2 pulse.
pub fn calibrate_standard_set(sim: &Simulator, opts: &CalibrationOptions) -> Result<SingleQutritCalibration> {
    let mut cal = SingleQutritCalibration::default();
    for q in [Qutrit::Q1, Qutrit::Q2] {
        for sub in [Subspace::S01, Subspace::S12] {
            let pi = calibrate_pulse(sim, q, sub, PI, None, opts)?;
            cal.insert(pi);
            cal.insert(calibrate_pulse(sim, q, sub, FRAC_PI_2, Some(pi.drag_coeff), opts)?);
        }
    }
    Ok(cal)
}

/// Native single-qutrit operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NativeOp {
    Rotation { subspace: Subspace, theta: f64, phi: f64 },
    /// Logical `diag(e^{i z0}, e^{i z1}, e^{i z2})`, realised with frames.
    Phase([f64; 3]),
}

impl NativeOp {
    pub fn matrix(&self) -> Array2<C64> {
        match *self {
            NativeOp::Rotation { subspace, theta, phi } => rotation(subspace, theta, phi),
            NativeOp::Phase(z) => Array2::from_diag(&Array1::from(z.map(|x| C64::from_polar(1.0, x)).to_vec())),
        }
    }
}

/// Product of a time-ordered list of native operations.
pub fn circuit_matrix(ops: &[NativeOp]) -> Array2<C64> {
    ops.iter().fold(Array2::eye(3).mapv(|x: f64| C64::new(x, 0.0)), |u, op| op.matrix().dot(&u))
}

/// Rotation on levels (p, p+1) that zeroes row `p` of column `col`.
fn zero_top(w: &Array2<C64>, sub: Subspace, col: usize) -> NativeOp {
    let p = sub.lower();
    let (xp, xq) = (w[[p, col]], w[[p + 1, col]]);
    let theta = 2.0 * xp.norm().atan2(xq.norm());
    let phi = if xp.norm() < 1e-14 { 0.0 } else { xq.arg() - xp.arg() + FRAC_PI_2 };
    NativeOp::Rotation { subspace: sub, theta, phi }
}

/// Decompose a 3x3 unitary into a phase gate followed by at most three
/// subspace rotations (time order), equal to `u` up to a global phase.
/// Rotation angles lie in [0, pi].
pub fn decompose_qutrit_unitary(u: &Array2<C64>) -> Result<Vec<NativeOp>> {
    if u.dim() != (3, 3) {
        return Err(SimError::InvalidDimension(format!("expected a 3x3 unitary, got {:?}", u.dim())));
    }
    if crate::linalg::unitarity_residual(u) > 1e-8 {
        return Err(SimError::InvalidParameter("matrix is not unitary".into()));
    }
    let mut w = u.clone();
    let mut left = Vec::with_capacity(3);
    for (sub, col) in [(Subspace::S01, 2), (Subspace::S12, 2), (Subspace::S01, 1)] {
        let g = zero_top(&w, sub, col);
        w = g.matrix().dot(&w);
        left.push(g);
    }
    let mut ops = vec![NativeOp::Phase([0, 1, 2].map(|k| w[[k, k]].arg()))];
    for g in left.into_iter().rev() {
        if let NativeOp::Rotation { subspace, theta, phi } = g {
            if theta > MIN_ROTATION {
                ops.push(NativeOp::Rotation { subspace, theta, phi: phi + PI });
            }
        }
    }
    Ok(ops)
}

/// Qutrit Fourier transform `F_jk = w^{jk} / sqrt(3)`, `w = e^{2 pi i / 3}`.
pub fn qutrit_hadamard() -> Array2<C64> {
    Array2::from_shape_fn((3, 3), |(j, k)| C64::from_polar(1.0 / 3f64.sqrt(), TAU * (j * k) as f64 / 3.0))
}

/// Make sure every rotation angle of `ops` is calibrated on `q`.
pub fn ensure_circuit(
    sim: &Simulator,
    cal: &mut SingleQutritCalibration,
    q: Qutrit,
    ops: &[NativeOp],
    opts: &CalibrationOptions,
) -> Result<()> {
    for op in ops {
        if let NativeOp::Rotation { subspace, theta, .. } = *op {
            cal.ensure(sim, q, subspace, theta, opts)?;
        }
    }
    Ok(())
}

/// Events of a native circuit on one qutrit starting at `start`; returns
/// the events and the end time.
pub fn circuit_events(
    cal: &SingleQutritCalibration,
    q: Qutrit,
    ops: &[NativeOp],
    start: f64,
) -> Result<(Vec<Event>, f64)> {
    let mut events = Vec::new();
    let mut t = start;
    for op in ops {
        match *op {
            NativeOp::Phase(z) => events.extend(virtual_z_events(q, z, t)),
            NativeOp::Rotation { subspace, theta, phi } => {
                let (ev, end) = cal.rotation_events(q, subspace, theta, phi, t)?;
                events.extend(ev);
                t = end;
            }
        }
    }
    Ok((events, t))
}

/// Conditional phases `phi_i0j = arg U_ij - arg U_i0 - arg U_0j + arg U_00`,
/// in [0, 2 pi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalPhases {
    pub phi101: f64,
    pub phi102: f64,
    pub phi201: f64,
    pub phi202: f64,
}

impl ConditionalPhases {
    /// Targets of the qutrit controlled-phase gate.
    pub fn ideal() -> Self {
        let w = TAU / 3.0;
        ConditionalPhases { phi101: w, phi102: 2.0 * w, phi201: 2.0 * w, phi202: w }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.phi101, self.phi102, self.phi201, self.phi202]
    }

    /// Largest wrapped deviation from `other`, rad.
    pub fn max_deviation(&self, other: &ConditionalPhases) -> f64 {
        self.as_array().iter().zip(other.as_array()).map(|(a, b)| wrap_pi(a - b).abs()).fold(0.0, f64::max)
    }
}

fn check_diagonal(u: &Array2<C64>) -> Result<()> {
    for k in 0..9 {
        let m = u[[k, k]].norm();
        if m <= LEAKAGE_THRESHOLD {
            return Err(SimError::Leakage { index: k, magnitude: m });
        }
    }
    Ok(())
}

/// Conditional phases of a 9x9 computational block (index `3 i + j`).
pub fn extract_conditional_phases(u: &Array2<C64>) -> Result<ConditionalPhases> {
    if u.dim() != (9, 9) {
        return Err(SimError::InvalidDimension(format!("expected 9x9, got {:?}", u.dim())));
    }
    check_diagonal(u)?;
    let a = |i: usize, j: usize| u[[3 * i + j, 3 * i + j]].arg();
    let phi = |i, j| wrap_2pi(a(i, j) - a(i, 0) - a(0, j) + a(0, 0));
    Ok(ConditionalPhases { phi101: phi(1, 1), phi102: phi(1, 2), phi201: phi(2, 1), phi202: phi(2, 2) })
}

/// Frame shifts `[q1, q2]` removing the single-qutrit phases of a
/// diagonal-dominant 9x9 block.
pub fn local_phase_frames(u: &Array2<C64>) -> Result<[[f64; 2]; 2]> {
    check_diagonal(u)?;
    let a = |k: usize| u[[k, k]].arg();
    let frames = |t1: f64, t2: f64| [wrap_pi(t1), wrap_pi(t2 - t1)];
    Ok([
        frames(a(3) - a(0), a(6) - a(0)),
        frames(a(1) - a(0), a(2) - a(0)),
    ])
}

/// Ideal controlled-phase gate `diag(w^{ij})`.
pub fn ideal_cphase() -> Array2<C64> {
    Array2::from_diag(&Array1::from_shape_fn(9, |k| C64::from_polar(1.0, TAU * ((k / 3) * (k % 3)) as f64 / 3.0)))
}

/// Flux pulse, simultaneous X12 pi on both qutrits, flux pulse, X12 pi
/// again, separated by `buffer`. Local phases are not corrected.
pub fn cphase_core_schedule(cal: &SingleQutritCalibration, flux: FluxPulse, buffer: f64) -> Result<Schedule> {
    let mut events = Vec::new();
    let mut t = 0.0;
    for _ in 0..2 {
        let f = flux.with_start(t);
        events.push(Event::Flux(f));
        t = f.end() + buffer;
        let mut end = t;
        for q in [Qutrit::Q1, Qutrit::Q2] {
            let (ev, e) = cal.rotation_events(q, Subspace::S12, PI, 0.0, t)?;
            events.extend(ev);
            end = end.max(e);
        }
        t = end + buffer;
    }
    compose(events, buffer)
}

/// A calibrated controlled-phase gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CphaseGate {
    pub flux: FluxPulse,
    pub buffer: f64,
    /// End-of-gate frame shifts `(d01, d12)` for Q1 and Q2.
    pub frames: [[f64; 2]; 2],
    /// Conditional phases of the simulated gate.
    pub phases: ConditionalPhases,
    /// Average gate fidelity against the ideal gate on the 9 computational states.
    pub fidelity: f64,
}

impl CphaseGate {
    /// Complete gate with local corrections applied at its end.
    pub fn schedule(&self, cal: &SingleQutritCalibration) -> Result<Schedule> {
        let core = cphase_core_schedule(cal, self.flux, self.buffer)?;
        let mut events = core.events.clone();
        events.extend(frame_events(Qutrit::Q1, self.frames[0], core.duration));
        events.extend(frame_events(Qutrit::Q2, self.frames[1], core.duration));
        Ok(compose(events, self.buffer)?.with_duration(core.duration))
    }
}

/// Simulate the core sequence for `flux`, attach local corrections and
/// score the result.
pub fn build_cphase(
    sim: &Simulator,
    cal: &SingleQutritCalibration,
    flux: FluxPulse,
    buffer: f64,
) -> Result<CphaseGate> {
    let u = sim.computational_unitary(&cphase_core_schedule(cal, flux, buffer)?)?;
    let phases = extract_conditional_phases(&u)?;
    let frames = local_phase_frames(&u)?;
    let fix = crate::linalg::kron(&frame_operator(frames[0]), &frame_operator(frames[1]));
    let fidelity = average_gate_fidelity(&fix.dot(&u), &ideal_cphase());
    Ok(CphaseGate { flux: flux.with_start(0.0), buffer, frames, phases, fidelity })
}

/// Conditional phases versus flat-top time at one flux amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct CphaseScan {
    pub v_max: f64,
    pub tau_edge: f64,
    pub tau: Vec<f64>,
    /// Unwrapped phases.
    pub phi101: Vec<f64>,
    pub phi102: Vec<f64>,
    pub fit101: LinearFit,
    pub fit102: LinearFit,
    /// Slopes predicted from the spectrum at the flat-top coupler
    /// frequency, rad/ns.
    pub predicted_slope101: f64,
    pub predicted_slope102: f64,
}

/// Scan the flat-top duration. Phases are unwrapped against the slope
/// predicted from the flat-top cross-Kerr shifts, so coarse grids work.
pub fn scan_cphase(
    sim: &Simulator,
    cal: &SingleQutritCalibration,
    v_max: f64,
    tau_edge: f64,
    taus: &[f64],
    buffer: f64,
) -> Result<CphaseScan> {
    if taus.len() < 2 {
        return Err(SimError::InvalidParameter("a phase scan needs at least two durations".into()));
    }
    let omega_c = sim.params.flux_map.frequency(sim.params.flux_map.idle_bias() + v_max)?;
    let mut tracker = SpectrumTracker::new(&sim.params, sim.space, LabelMode::Adiabatic)?;
    let spec = tracker.at(omega_c)?;
    let chi = |i, j| crate::spectrum::chi_from_spectrum(&spec, i, j).map(|c| c * 1e-3 * TAU);
    let s101 = -(chi(1, 1)? + chi(2, 2)?);
    let s102 = -(chi(1, 2)? + chi(2, 1)?);

    let mut raw = Vec::with_capacity(taus.len());
    for &tau in taus {
        let u = sim.computational_unitary(&cphase_core_schedule(cal, FluxPulse::new(v_max, tau_edge, tau, 0.0), buffer)?)?;
        raw.push(extract_conditional_phases(&u)?);
    }
    let follow = |vals: Vec<f64>, slope: f64| -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(vals.len());
        for (k, v) in vals.iter().enumerate() {
            if k == 0 {
                out.push(*v);
            } else {
                let pred = out[k - 1] + slope * (taus[k] - taus[k - 1]);
                out.push(pred + wrap_pi(v - pred));
            }
        }
        out
    };
    let phi101 = follow(raw.iter().map(|p| p.phi101).collect(), s101);
    let phi102 = follow(raw.iter().map(|p| p.phi102).collect(), s102);
    Ok(CphaseScan {
        v_max,
        tau_edge,
        tau: taus.to_vec(),
        fit101: linear_fit(taus, &phi101)?,
        fit102: linear_fit(taus, &phi102)?,
        phi101,
        phi102,
        predicted_slope101: s101,
        predicted_slope102: s102,
    })
}

/// Flat-top times in `[lo, hi]` where the fitted phi101 equals 2pi/3 mod 2pi,
/// each with the wrapped phi102 residual there.
fn phi101_crossings(scan: &CphaseScan, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let (f1, f2) = (scan.fit101, scan.fit102);
    if f1.slope.abs() < 1e-12 {
        return Vec::new();
    }
    let target1 = TAU / 3.0;
    let target2 = 2.0 * TAU / 3.0;
    let (ka, kb) = ((f1.eval(lo) - target1) / TAU, (f1.eval(hi) - target1) / TAU);
    let (kmin, kmax) = (ka.min(kb).ceil() as i64, ka.max(kb).floor() as i64);
    let mut out: Vec<(f64, f64)> = (kmin..=kmax)
        .map(|k| {
            let tau = (target1 + TAU * k as f64 - f1.intercept) / f1.slope;
            (tau, wrap_pi(f2.eval(tau) - target2))
        })
        .filter(|(t, _)| *t >= lo - 1e-9 && *t <= hi + 1e-9)
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Result of choosing the flat-top time.
#[derive(Debug, Clone, PartialEq)]
pub struct CphaseCalibration {
    pub scan: CphaseScan,
    pub tau_flat: f64,
    /// Fitted residuals of (phi101, phi102) at `tau_flat`, rad.
    pub residual: (f64, f64),
}

/// Smallest flat-top time in the scanned range where both fitted phases
/// are within [`CPHASE_PHASE_TOL`] of 2pi/3 and 4pi/3.
pub fn choose_flat_time(scan: CphaseScan) -> Result<CphaseCalibration> {
    let lo = scan.tau[0];
    let hi = *scan.tau.last().unwrap_or(&lo);
    let (b1, b2) = (scan.fit101.slope, scan.fit102.slope);
    let crossings = phi101_crossings(&scan, lo, hi);
    for &(tau_k, r2) in &crossings {
        // Split the phi102 miss between both phases in the least-squares sense.
        let delta = -b2 * r2 / (b1 * b1 + b2 * b2);
        let tau = (tau_k + delta).clamp(lo, hi);
        let r1 = wrap_pi(scan.fit101.eval(tau) - TAU / 3.0);
        let r2 = wrap_pi(scan.fit102.eval(tau) - 2.0 * TAU / 3.0);
        if r1.abs() < CPHASE_PHASE_TOL && r2.abs() < CPHASE_PHASE_TOL {
            return Ok(CphaseCalibration { scan, tau_flat: tau, residual: (r1, r2) });
        }
    }
    Err(SimError::Calibration(format!(
        "no flat-top time in [{lo}, {hi}] ns meets both phase targets at v_max = {}; phi101 crossings (tau, phi102 miss): {crossings:?}",
        scan.v_max
    )))
}

/// Flux amplitude at which phi101 and phi102 reach their targets at the
/// same flat-top time inside `window`. Scans `v_grid`, then refines the
/// sign change of the phi102 miss with Brent's method.
pub fn find_cphase_operating_point(
    sim: &Simulator,
    cal: &SingleQutritCalibration,
    tau_edge: f64,
    v_grid: &[f64],
    window: (f64, f64),
    buffer: f64,
) -> Result<CphaseCalibration> {
    let taus: Vec<f64> = (0..5).map(|k| window.0 + (window.1 - window.0) * k as f64 / 4.0).collect();
    let miss = |v: f64| -> Result<Option<f64>> {
        let scan = scan_cphase(sim, cal, v, tau_edge, &taus, buffer)?;
        Ok(phi101_crossings(&scan, window.0, window.1).first().map(|c| c.1))
    };
    let mut prev: Option<(f64, f64)> = None;
    let mut bracket = None;
    for &v in v_grid {
        let m = match miss(v) {
            Ok(m) => m,
            Err(SimError::Leakage { .. }) => None,
            Err(e) => return Err(e),
        };
        if let (Some((v0, m0)), Some(m1)) = (prev, m) {
            // A jump of order pi is a branch change, not a zero crossing.
            if m0.signum() != m1.signum() && (m1 - m0).abs() < 2.0 {
                bracket = Some((v0, v));
                break;
            }
        }
        prev = m.map(|m| (v, m));
    }
    let (a, b) = bracket.ok_or_else(|| {
        SimError::Calibration(format!("phi102 miss never changes sign over v_max grid {v_grid:?}"))
    })?;
    let v = brent_root(a, b, 1e-6, 60, |v| miss(v)?.ok_or_else(|| SimError::Calibration("phi101 target left the window".into())))?;
    choose_flat_time(scan_cphase(sim, cal, v, tau_edge, &taus, buffer)?)
}

/// Edge duration of the Cphase flux pulse, ns.
pub const DEFAULT_TAU_EDGE_NS: f64 = 50.0;

/// Flat-top window searched for the Cphase operating point, ns.
pub const DEFAULT_CPHASE_WINDOW_NS: (f64, f64) = (0.0, 40.0);

/// Flux amplitudes scanned for the Cphase operating point.
pub fn default_v_grid() -> Vec<f64> {
    (0..=8).map(|k| 0.36 + 0.005 * k as f64).collect()
}

/// Single-qutrit pulses plus the calibrated Cphase gate, stored as one
/// TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceCalibration {
    pub single: SingleQutritCalibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cphase: Option<CphaseGate>,
}

impl DeviceCalibration {
    pub fn cphase(&self) -> Result<&CphaseGate> {
        self.cphase.as_ref().ok_or_else(|| SimError::Calibration("calibration holds no Cphase gate".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Full calibration: the standard single-qutrit set, the extra angles of
/// the Bell-state circuit and the Cphase operating point, returned with
/// the phase scan taken there.
pub fn calibrate_device(sim: &Simulator, opts: &CalibrationOptions) -> Result<(DeviceCalibration, CphaseCalibration)> {
    let mut single = calibrate_standard_set(sim, opts)?;
    prepare_epr_calibration(sim, &mut single, opts)?;
    let op = find_cphase_operating_point(
        sim,
        &single,
        DEFAULT_TAU_EDGE_NS,
        &default_v_grid(),
        DEFAULT_CPHASE_WINDOW_NS,
        DEFAULT_BUFFER_NS,
    )?;
    let flux = FluxPulse::new(op.scan.v_max, DEFAULT_TAU_EDGE_NS, op.tau_flat, 0.0);
    let gate = build_cphase(sim, &single, flux, DEFAULT_BUFFER_NS)?;
    Ok((DeviceCalibration { single, cphase: Some(gate) }, op))
}

/// Ideal Bell state `(|00> + |11> + |22>) / sqrt(3)` over the 9 computational states.
pub fn epr_state() -> Array1<C64> {
    Array1::from_shape_fn(9, |k| if k / 3 == k % 3 { C64::new(1.0 / 3f64.sqrt(), 0.0) } else { ZERO })
}

/// Native circuits of the Bell-state sequence: F on each qutrit, then F^dag on Q2.
pub fn epr_circuits() -> Result<(Vec<NativeOp>, Vec<NativeOp>)> {
    let f = qutrit_hadamard();
    Ok((decompose_qutrit_unitary(&f)?, decompose_qutrit_unitary(&dagger(&f))?))
}

/// Calibrate the rotation angles the Bell-state sequence needs.
pub fn prepare_epr_calibration(
    sim: &Simulator,
    cal: &mut SingleQutritCalibration,
    opts: &CalibrationOptions,
) -> Result<()> {
    let (f, fd) = epr_circuits()?;
    for q in [Qutrit::Q1, Qutrit::Q2] {
        ensure_circuit(sim, cal, q, &f, opts)?;
    }
    ensure_circuit(sim, cal, Qutrit::Q2, &fd, opts)
}

/// F on both qutrits, buffer, controlled phase, buffer, F^dag on Q2.
pub fn epr_schedule(cal: &SingleQutritCalibration, cphase: &CphaseGate) -> Result<Schedule> {
    let (f, fd) = epr_circuits()?;
    let (mut events, e1) = circuit_events(cal, Qutrit::Q1, &f, 0.0)?;
    let (ev2, e2) = circuit_events(cal, Qutrit::Q2, &f, 0.0)?;
    events.extend(ev2);
    let t_cz = e1.max(e2) + cphase.buffer;
    let cz = cphase.schedule(cal)?;
    for e in &cz.events {
        events.push(shift(e, t_cz));
    }
    let (ev3, _) = circuit_events(cal, Qutrit::Q2, &fd, t_cz + cz.duration + cphase.buffer)?;
    events.extend(ev3);
    compose(events, cphase.buffer)
}

fn shift(e: &Event, dt: f64) -> Event {
    match *e {
        Event::Flux(p) => Event::Flux(p.with_start(p.start + dt)),
        Event::Microwave(p) => Event::Microwave(MicrowavePulse { start: p.start + dt, ..p }),
        Event::Frame(f) => Event::Frame(FrameShift { time: f.time + dt, ..f }),
    }
}

/// Return probabilities `|<k|U|k>|^2` of the nine computational states
/// after a flux excursion to `v_max` and back with no flat top.
pub fn leakage_return_probabilities(sim: &Simulator, v_max: f64, total_ramp: f64) -> Result<[f64; 9]> {
    let schedule = compose(vec![Event::Flux(FluxPulse::new(v_max, total_ramp / 2.0, 0.0, 0.0))], DEFAULT_BUFFER_NS)?;
    let u = sim.computational_unitary(&schedule)?;
    Ok(std::array::from_fn(|k| u[[k, k]].norm_sqr()))
}

/// One Ramsey phase sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RamseyCurve {
    pub theta: Vec<f64>,
    /// P(Q1 = 0) with Q2 in |0>.
    pub reference: Vec<f64>,
    /// P(Q1 = 0) with Q2 in |j>.
    pub conditional: Vec<f64>,
    pub fit_reference: SinusoidFit,
    pub fit_conditional: SinusoidFit,
    /// Extra phase picked up when Q2 is in |j>, rad.
    pub delta_phi: f64,
}

/// Conditional Ramsey estimate of chi_i0j from two flat-top durations.
#[derive(Debug, Clone, PartialEq)]
pub struct RamseyResult {
    pub i: usize,
    pub j: usize,
    pub tau: (f64, f64),
    pub curves: (RamseyCurve, RamseyCurve),
    pub chi_mhz: f64,
}

/// Sequence up to (not including) the final analysis pulse, and the time
/// at which that pulse starts.
fn ramsey_prefix(
    cal: &SingleQutritCalibration,
    i: usize,
    j: usize,
    flux: FluxPulse,
    buffer: f64,
) -> Result<(Vec<Event>, f64)> {
    let mut events = Vec::new();
    let (ev, mut t2) = cal.rotation_events(Qutrit::Q2, Subspace::S01, PI, 0.0, 0.0)?;
    if j > 0 {
        events.extend(ev);
    } else {
        t2 = 0.0;
    }
    if j == 2 {
        let (ev, e) = cal.rotation_events(Qutrit::Q2, Subspace::S12, PI, 0.0, t2)?;
        events.extend(ev);
        t2 = e;
    }
    let (ev, mut t1) = cal.rotation_events(Qutrit::Q1, Subspace::S01, FRAC_PI_2, 0.0, 0.0)?;
    events.extend(ev);
    if i == 2 {
        let (ev, e) = cal.rotation_events(Qutrit::Q1, Subspace::S12, PI, 0.0, t1)?;
        events.extend(ev);
        t1 = e;
    }
    let f = flux.with_start(t1.max(t2) + buffer);
    events.push(Event::Flux(f));
    let mut t = f.end() + buffer;
    if i == 2 {
        let (ev, e) = cal.rotation_events(Qutrit::Q1, Subspace::S12, PI, PI, t)?;
        events.extend(ev);
        t = e;
    }
    Ok((events, t))
}

fn ramsey_curve(
    sim: &Simulator,
    cal: &SingleQutritCalibration,
    i: usize,
    j: usize,
    flux: FluxPulse,
    theta: &[f64],
    buffer: f64,
) -> Result<RamseyCurve> {
    let ground = unit_columns(sim.space.dim(), &[sim.space.index(Label::new(0, 0, 0))]);
    let p0 = |x: &Array2<C64>| -> f64 {
        (0..sim.space.dim()).filter(|&k| sim.space.label(k).q1 == 0).map(|k| x[[k, 0]].norm_sqr()).sum()
    };
    let sweep = |jj: usize| -> Result<Vec<f64>> {
        let (events, t_final) = ramsey_prefix(cal, i, jj, flux, buffer)?;
        let prefix = compose(events, buffer)?;
        let state = sim.propagate_columns(&prefix, &ground)?;
        let analysis = cal.get(Qutrit::Q1, Subspace::S01, FRAC_PI_2)?;
        theta
            .iter()
            .map(|&th| {
                let tail = compose(analysis.events(t_final, th), buffer)?;
                Ok(p0(&sim.propagate_columns_from(&tail, t_final, &state)?))
            })
            .collect()
    };
    let reference = sweep(0)?;
    let conditional = sweep(j)?;
    let fit_reference = sinusoid_fit(theta, &reference)?;
    let fit_conditional = sinusoid_fit(theta, &conditional)?;
    for (name, f) in [("reference", &fit_reference), ("conditional", &fit_conditional)] {
        if f.residual > 0.05 {
            return Err(SimError::FitQuality(format!("{name} Ramsey fit residual {:.3} exceeds 0.05", f.residual)));
        }
    }
    Ok(RamseyCurve {
        theta: theta.to_vec(),
        reference,
        conditional,
        delta_phi: wrap_pi(fit_reference.phase - fit_conditional.phase),
        fit_reference,
        fit_conditional,
    })
}

/// Measure chi_i0j with a conditional Ramsey experiment: a superposition
/// of Q1 levels 0 and i evolves through a flux pulse with flat top `tau`
/// while Q2 sits in 0 or j. The frequency follows from the phase
/// difference between two flat-top durations.
#[allow(clippy::too_many_arguments)]
pub fn conditional_ramsey_chi(
    sim: &Simulator,
    cal: &SingleQutritCalibration,
    i: usize,
    j: usize,
    v_b: f64,
    tau_edge: f64,
    tau: (f64, f64),
    theta: &[f64],
) -> Result<RamseyResult> {
    if !(1..=2).contains(&i) || !(1..=2).contains(&j) {
        return Err(SimError::InvalidParameter(format!("chi indices must be 1 or 2, got ({i},{j})")));
    }
    if (tau.0 - tau.1).abs() < 1e-9 {
        return Err(SimError::InvalidParameter("Ramsey durations must differ".into()));
    }
    let buffer = DEFAULT_BUFFER_NS;
    let a = ramsey_curve(sim, cal, i, j, FluxPulse::new(v_b, tau_edge, tau.0, 0.0), theta, buffer)?;
    let b = ramsey_curve(sim, cal, i, j, FluxPulse::new(v_b, tau_edge, tau.1, 0.0), theta, buffer)?;
    let dphi = wrap_pi(a.delta_phi - b.delta_phi);
    let chi_mhz = 1e3 * dphi / (TAU * (tau.0 - tau.1));
    Ok(RamseyResult { i, j, tau, curves: (a, b), chi_mhz })
}

/// Images `Phi(|a><b|)` of all 81 computational matrix units under a
/// schedule, index `9 a + b`, each reduced to the two qutrits. Without a
/// decoherence model the evolution is unitary.
pub fn simulate_process(
    sim: &Simulator,
    schedule: &Schedule,
    model: Option<&DecoherenceModel>,
    macro_dt: f64,
) -> Result<Vec<Array2<C64>>> {
    let space = sim.space;
    let idx = space.computational_indices();
    let n = space.dim();
    let mut out = vec![Array2::<C64>::zeros((9, 9)); 81];
    match model {
        None => {
            let x = sim.propagate_columns(schedule, &unit_columns(n, &idx))?;
            for a in 0..9 {
                for b in 0..9 {
                    let rho = Array2::from_shape_fn((n, n), |(r, c)| x[[r, a]] * x[[c, b]].conj());
                    out[9 * a + b] = reduce_to_qutrits(space, &rho);
                }
            }
        }
        Some(m) => {
            let pairs: Vec<(usize, usize)> = (0..9).flat_map(|a| (a..9).map(move |b| (a, b))).collect();
            let inputs: Vec<Array2<C64>> = pairs
                .iter()
                .map(|&(a, b)| {
                    let mut r = Array2::zeros((n, n));
                    r[[idx[a], idx[b]]] = ONE;
                    r
                })
                .collect();
            let outputs = sim.propagate_lindblad_batch(schedule, m, &inputs, macro_dt)?;
            for (&(a, b), rho) in pairs.iter().zip(outputs) {
                let red = reduce_to_qutrits(space, &rho);
                out[9 * b + a] = dagger(&red);
                out[9 * a + b] = red;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, unitarity_residual};
    use crate::model::DeviceParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sim() -> Simulator {
        Simulator::new(&DeviceParams::default(), HilbertSpace::new(4, 3, 4).unwrap()).unwrap().with_dt(0.05).unwrap()
    }

    #[test]
    fn rotation_composes_and_inverts() {
        let r = rotation(Subspace::S12, 1.1, 0.4);
        assert!(unitarity_residual(&r) < 1e-14);
        let rr = rotation(Subspace::S12, 1.1, 0.4 + PI).dot(&r);
        assert_abs_diff_eq!(crate::linalg::frobenius(&(rr - Array2::eye(3).mapv(|x: f64| C64::new(x, 0.0)))), 0.0, epsilon = 1e-14);
        let x = rotation(Subspace::S01, PI, 0.0);
        assert_abs_diff_eq!(x[[1, 0]].im, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn frames_realise_requested_phases() {
        let z = [0.3, -1.2, 2.0];
        let d = frame_operator(frames_for_phases(z));
        let target = NativeOp::Phase(z).matrix();
        assert_abs_diff_eq!(average_gate_fidelity(&d, &target), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn phase_decomposition_recovers_synthetic_errors() {
        for sub in [Subspace::S01, Subspace::S12] {
            for theta in [0.4, FRAC_PI_2, PI] {
                let pre = NativeOp::Phase([0.0, 0.3, -0.2]).matrix();
                let post = NativeOp::Phase([0.0, -0.7, 0.5]).matrix();
                let m = post.dot(&rotation(sub, theta, 0.0)).dot(&pre) * C64::from_polar(1.0, 0.9);
                let dec = decompose_phases(&m, sub);
                let (a, b) = correction_frames(&dec, sub, true);
                let f = average_gate_fidelity(&corrected(&m, a, b), &rotation(sub, theta, 0.0));
                assert_abs_diff_eq!(f, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn hadamard_decomposition_reproduces_the_fourier_matrix() {
        let f = qutrit_hadamard();
        for u in [f.clone(), dagger(&f)] {
            let ops = decompose_qutrit_unitary(&u).unwrap();
            assert!(ops.len() <= 4);
            assert_abs_diff_eq!(average_gate_fidelity(&circuit_matrix(&ops), &u), 1.0, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn decomposition_reproduces_random_unitaries(
            ops in proptest::collection::vec((0usize..2, 0.0f64..PI, -PI..PI), 1..6),
            z in proptest::array::uniform3(-PI..PI),
        ) {
            let mut seq = vec![NativeOp::Phase(z)];
            seq.extend(ops.iter().map(|&(s, theta, phi)| NativeOp::Rotation {
                subspace: if s == 0 { Subspace::S01 } else { Subspace::S12 },
                theta,
                phi,
            }));
            let u = circuit_matrix(&seq);
            let dec = decompose_qutrit_unitary(&u).unwrap();
            for op in &dec {
                if let NativeOp::Rotation { theta, .. } = op {
                    prop_assert!(*theta >= 0.0 && *theta <= PI + 1e-12);
                }
            }
            prop_assert!((average_gate_fidelity(&circuit_matrix(&dec), &u) - 1.0).abs() < 1e-10);
        }

        #[test]
        fn conditional_phases_ignore_local_phases(
            a in proptest::array::uniform3(-PI..PI),
            b in proptest::array::uniform3(-PI..PI),
        ) {
            let local = kron(&NativeOp::Phase(a).matrix(), &NativeOp::Phase(b).matrix());
            let p = extract_conditional_phases(&local.dot(&ideal_cphase())).unwrap();
            prop_assert!(p.max_deviation(&ConditionalPhases::ideal()) < 1e-12);
            let frames = local_phase_frames(&local).unwrap();
            let fix = kron(&frame_operator(frames[0]), &frame_operator(frames[1]));
            prop_assert!((average_gate_fidelity(&fix.dot(&local), &Array2::eye(9).mapv(|x: f64| C64::new(x, 0.0))) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ideal_cphase_has_target_phases() {
        let p = extract_conditional_phases(&ideal_cphase()).unwrap();
        assert!(p.max_deviation(&ConditionalPhases::ideal()) < 1e-14);
        assert_abs_diff_eq!(p.phi102, 4.0 * PI / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn leaked_diagonal_is_reported() {
        let mut u = ideal_cphase();
        u[[4, 4]] *= 0.5;
        assert!(matches!(extract_conditional_phases(&u), Err(SimError::Leakage { index: 4, .. })));
    }

    #[test]
    fn epr_circuit_prepares_bell_state() {
        let (f, fd) = epr_circuits().unwrap();
        let ff = kron(&circuit_matrix(&f), &circuit_matrix(&f));
        let id = Array2::eye(3).mapv(|x: f64| C64::new(x, 0.0));
        let u = kron(&id, &circuit_matrix(&fd)).dot(&ideal_cphase()).dot(&ff);
        let out = u.column(0).to_owned();
        let overlap = out.iter().zip(epr_state().iter()).map(|(a, b)| b.conj() * a).sum::<C64>();
        assert_abs_diff_eq!(overlap.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn calibration_round_trips_through_toml() {
        let mut cal = SingleQutritCalibration::default();
        cal.insert(CalibratedPulse {
            qutrit: Qutrit::Q2,
            subspace: Subspace::S12,
            angle: PI,
            amplitude: 0.1,
            drag_coeff: 0.4,
            carrier: 4.6,
            duration: 40.0,
            pre_frame: [0.0, 0.01],
            post_frame: [0.02, -0.03],
            fidelity: 0.9999,
        });
        let back = SingleQutritCalibration::from_toml_str(&cal.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cal);
        assert!(back.get(Qutrit::Q2, Subspace::S12, PI).is_ok());
        assert!(back.get(Qutrit::Q1, Subspace::S12, PI).is_err());

        let gate = CphaseGate {
            flux: FluxPulse::new(0.38, 50.0, 6.5, 0.0),
            buffer: 10.0,
            frames: [[0.1, -0.2], [0.3, 0.4]],
            phases: ConditionalPhases::ideal(),
            fidelity: 0.99,
        };
        let device = DeviceCalibration { single: cal, cphase: Some(gate) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.toml");
        device.save(&path).unwrap();
        assert_eq!(DeviceCalibration::load(&path).unwrap(), device);
        assert!(DeviceCalibration::default().cphase().is_err());
    }

    #[test]
    fn calibrated_pi_pulse_is_accurate() {
        let s = sim();
        let opts = CalibrationOptions { optimize_drag: false, ..Default::default() };
        let p = calibrate_pulse(&s, Qutrit::Q1, Subspace::S01, PI, Some(0.5), &opts).unwrap();
        assert!(p.fidelity > 0.999, "fidelity {}", p.fidelity);
        let mut cal = SingleQutritCalibration::default();
        cal.insert(p);
        let mut ev = p.events(0.0, 0.0);
        ev.extend(p.events(40.0, 0.0));
        let twice = qutrit_block(&s, &compose(ev, DEFAULT_BUFFER_NS).unwrap(), Qutrit::Q1).unwrap();
        assert!(twice[[0, 0]].norm_sqr() > 0.998);
    }

    #[test]
    fn leakage_probabilities_are_one_without_flux() {
        let s = sim();
        let p = leakage_return_probabilities(&s, 0.0, 20.0).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn closed_process_outputs_are_consistent() {
        let s = sim();
        let sched = Schedule::empty(15.0);
        let out = simulate_process(&s, &sched, None, 1.0).unwrap();
        for a in 0..9 {
            assert_abs_diff_eq!(trace(&out[9 * a + a]).re, 1.0, epsilon = 1e-10);
        }
        let lind = simulate_process(&s, &sched, Some(&DecoherenceModel::closed()), 1.0).unwrap();
        for (x, y) in out.iter().zip(&lind) {
            assert!(crate::linalg::frobenius(&(x - y)) < 1e-8);
        }
    }
}
