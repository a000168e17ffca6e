//! Time evolution of a schedule: unitary propagation, effective decoherence
//! times and Lindblad dynamics.
//!
//! Everything reported by this module lives in the *idle frame*: the dressed
//! eigenbasis `V` of the Hamiltonian at the sweet spot, rotating with the
//! local frequencies
//!
//! ```text
//! F(i c j) = E(i00) + E(0c0) + E(00j) - 2 E(000)
//! ```
//!
//! so that an idle period is the identity up to the residual cross-Kerr
//! phases `E - F`. A Schrodinger-picture propagator `U_S(t1, t0)` on the bare
//! basis maps to `e^{iF t1} V^T U_S V e^{-iF t0}`. Virtual-Z frames from the
//! schedule are removed at the end, so the reported operator is the logical
//! one.
//!
//! Schedules are cut into pieces with a single kind of dynamics:
//!
//! - idle: diagonal phases;
//! - flat flux: one exact exponential, eigendecompositions cached by coupler
//!   frequency;
//! - flux ramps: midpoint products of exact block exponentials, full edges
//!   cached;
//! - microwave drives: rotating-wave Hamiltonian in the idle frame, midpoint
//!   Taylor steps on the propagated columns;
//! - lab frame (optional): full complex Hamiltonian with carriers, one dense
//!   exponential per step.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::control::{drag_envelope, Event, FluxPulse, MicrowavePulse, Qutrit, Schedule, Subspace};
use crate::error::{Result, SimError};
use crate::linalg::{
    dagger, eigh_complex, eigh_real, expm_from_real_eig, expm_hermitian, symmetrize, taylor_step, to_complex,
    unitarity_residual, BlockUnitary, Csr, C64, ONE, ZERO,
};
use crate::model::{DeviceParams, HamiltonianParts, HilbertSpace, Label, Mode};
use crate::spectrum::{LabelMode, SpectrumTracker};

/// Default time step, ns.
pub const DEFAULT_DT_NS: f64 = 0.02;

/// Default Lindblad macro step, ns. The coherent part is exact within a
/// step, so this only has to resolve the dissipative rates.
pub const DEFAULT_MACRO_DT_NS: f64 = 1.0;

const DRIVE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct EdgeKey {
    v_max: u64,
    tau_edge: u64,
    rising: bool,
    literal: bool,
    dt: u64,
}

type FlatEig = Vec<(Array1<f64>, Array2<f64>)>;

/// Propagation engine for one device and truncation.
#[derive(Debug)]
pub struct Simulator {
    pub params: DeviceParams,
    pub space: HilbertSpace,
    pub dt: f64,
    /// Integrate the full Hamiltonian with carriers instead of the
    /// rotating-wave drive model. Slow; meant for validation on small spaces.
    pub lab_frame: bool,
    parts: HamiltonianParts,
    idle_bias: f64,
    basis: Array2<f64>,
    basis_c: Array2<C64>,
    energies: Array1<f64>,
    frame: Array1<f64>,
    raising: [Array2<f64>; 2],
    bare_raising: [Array2<f64>; 2],
    edge_cache: Mutex<HashMap<EdgeKey, Arc<Array2<C64>>>>,
    flat_cache: Mutex<HashMap<u64, Arc<FlatEig>>>,
}

impl Clone for Simulator {
    fn clone(&self) -> Self {
        Simulator {
            params: self.params,
            space: self.space,
            dt: self.dt,
            lab_frame: self.lab_frame,
            parts: self.parts.clone(),
            idle_bias: self.idle_bias,
            basis: self.basis.clone(),
            basis_c: self.basis_c.clone(),
            energies: self.energies.clone(),
            frame: self.frame.clone(),
            raising: self.raising.clone(),
            bare_raising: self.bare_raising.clone(),
            edge_cache: Mutex::new(self.edge_cache.lock().unwrap().clone()),
            flat_cache: Mutex::new(self.flat_cache.lock().unwrap().clone()),
        }
    }
}

fn mode_of(q: Qutrit) -> Mode {
    match q {
        Qutrit::Q1 => Mode::Q1,
        Qutrit::Q2 => Mode::Q2,
    }
}

impl Simulator {
    pub fn new(params: &DeviceParams, space: HilbertSpace) -> Result<Self> {
        let mut tracker = SpectrumTracker::new(params, space, LabelMode::Adiabatic)?;
        let idle_bias = params.flux_map.idle_bias();
        let idle = tracker.at(params.omega_c_max)?;
        let mut basis = idle.dressed_basis();
        for idx in 0..space.dim() {
            if basis[[idx, idx]] < 0.0 {
                basis.column_mut(idx).mapv_inplace(|x| -x);
            }
        }
        let energies = idle.energies_by_label();
        let e = |l: Label| energies[space.index(l)];
        let e0 = e(Label::new(0, 0, 0));
        let frame = Array1::from_shape_fn(space.dim(), |idx| {
            let l = space.label(idx);
            e(Label::new(l.q1, 0, 0)) + e(Label::new(0, l.c, 0)) + e(Label::new(0, 0, l.q2)) - 2.0 * e0
        });
        let bare_raising = [
            space.mode_lowering(Mode::Q1).reversed_axes(),
            space.mode_lowering(Mode::Q2).reversed_axes(),
        ];
        let raising = [
            basis.t().dot(&bare_raising[0]).dot(&basis),
            basis.t().dot(&bare_raising[1]).dot(&basis),
        ];
        Ok(Simulator {
            params: *params,
            space,
            dt: DEFAULT_DT_NS,
            lab_frame: false,
            parts: tracker.parts.clone(),
            idle_bias,
            basis_c: to_complex(&basis),
            basis,
            energies,
            frame,
            raising,
            bare_raising,
            edge_cache: Mutex::new(HashMap::new()),
            flat_cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SimError::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        self.dt = dt;
        Ok(self)
    }

    pub fn with_lab_frame(mut self, lab: bool) -> Self {
        self.lab_frame = lab;
        self
    }

    /// Dressed idle eigenvectors, column `space.index(label)` per label.
    pub fn dressed_basis(&self) -> &Array2<f64> {
        &self.basis
    }

    /// Dressed idle energies by label index, rad/ns.
    pub fn dressed_energies(&self) -> &Array1<f64> {
        &self.energies
    }

    /// Rotating-frame energies by label index, rad/ns.
    pub fn frame_energies(&self) -> &Array1<f64> {
        &self.frame
    }

    pub fn hamiltonian_parts(&self) -> &HamiltonianParts {
        &self.parts
    }

    /// Dressed transition frequency of (qutrit, subspace) at idle with the
    /// other qutrit in its ground state, GHz.
    pub fn transition_frequency(&self, q: Qutrit, sub: Subspace) -> f64 {
        let l = sub.lower();
        let (lo, hi) = match q {
            Qutrit::Q1 => (Label::new(l, 0, 0), Label::new(l + 1, 0, 0)),
            Qutrit::Q2 => (Label::new(0, 0, l), Label::new(0, 0, l + 1)),
        };
        (self.energies[self.space.index(hi)] - self.energies[self.space.index(lo)]) / TAU
    }

    /// Coupler frequency at time `t` of a schedule, GHz.
    pub fn coupler_frequency(&self, schedule: &Schedule, t: f64) -> Result<f64> {
        let bias = self.idle_bias + schedule.flux_at(t);
        self.params
            .flux_map
            .frequency(bias)
            .map_err(|e| SimError::FluxOutOfRangeAt { t_ns: t, source: Box::new(e) })
    }

    /// Coupler trajectory sampled at `step` ns, as (t, omegaC) pairs.
    pub fn coupler_trajectory(&self, schedule: &Schedule, step: f64) -> Result<Vec<(f64, f64)>> {
        let n = ((schedule.duration / step).ceil() as usize).max(1);
        (0..=n)
            .map(|k| {
                let t = schedule.duration * k as f64 / n as f64;
                Ok((t, self.coupler_frequency(schedule, t)?))
            })
            .collect()
    }

    /// Diagonal `exp(-i zeta)` that removes the accumulated virtual-Z frames.
    pub fn frame_correction(&self, schedule: &Schedule) -> Array1<C64> {
        let zeta = |q: Qutrit, level: usize| -> f64 {
            let d01 = schedule.final_frame(q, Subspace::S01);
            let d12 = schedule.final_frame(q, Subspace::S12);
            match level {
                0 => 0.0,
                1 => d01,
                _ => d01 + d12,
            }
        };
        Array1::from_shape_fn(self.space.dim(), |idx| {
            let l = self.space.label(idx);
            C64::from_polar(1.0, -(zeta(Qutrit::Q1, l.q1) + zeta(Qutrit::Q2, l.q2)))
        })
    }

    /// Propagate idle-frame columns through the schedule. The result is in
    /// the logical frame (virtual-Z frames removed).
    pub fn propagate_columns(&self, schedule: &Schedule, x0: &Array2<C64>) -> Result<Array2<C64>> {
        if x0.nrows() != self.space.dim() {
            return Err(SimError::InvalidDimension(format!(
                "state has {} rows, space has dimension {}",
                x0.nrows(),
                self.space.dim()
            )));
        }
        let tl = self.timeline(schedule)?;
        let mut x = x0.clone();
        self.evolve(&tl, 0.0, schedule.duration, &mut x)?;
        scale_rows(&mut x, &self.frame_correction(schedule));
        Ok(x)
    }

    /// Like [`Simulator::propagate_columns`], but starting at `t0` instead
    /// of zero. Events before `t0` must not overlap it.
    pub fn propagate_columns_from(&self, schedule: &Schedule, t0: f64, x0: &Array2<C64>) -> Result<Array2<C64>> {
        if x0.nrows() != self.space.dim() {
            return Err(SimError::InvalidDimension(format!(
                "state has {} rows, space has dimension {}",
                x0.nrows(),
                self.space.dim()
            )));
        }
        if !(0.0..=schedule.duration).contains(&t0) {
            return Err(SimError::InvalidParameter(format!("start time {t0} ns outside the schedule")));
        }
        let tl = self.timeline(schedule)?;
        let mut x = x0.clone();
        self.evolve(&tl, t0, schedule.duration, &mut x)?;
        scale_rows(&mut x, &self.frame_correction(schedule));
        Ok(x)
    }

    /// Full propagator in the logical idle frame.
    pub fn propagate_unitary(&self, schedule: &Schedule) -> Result<PropagationResult> {
        let n = self.space.dim();
        let u = self.propagate_columns(schedule, &Array2::eye(n).mapv(|x: f64| C64::new(x, 0.0)))?;
        let residual = unitarity_residual(&u);
        Ok(PropagationResult {
            final_state: FinalState::Unitary(u),
            populations: None,
            diagnostics: StepDiagnostics { steps: self.step_count(schedule), residual },
        })
    }

    /// Columns of the propagator for the nine computational states, and
    /// their 9x9 restriction (rows and columns ordered `3 i + j`).
    pub fn computational_unitary(&self, schedule: &Schedule) -> Result<Array2<C64>> {
        let idx = self.space.computational_indices();
        let x0 = unit_columns(self.space.dim(), &idx);
        let x = self.propagate_columns(schedule, &x0)?;
        Ok(Array2::from_shape_fn((idx.len(), idx.len()), |(r, c)| x[[idx[r], c]]))
    }

    /// Propagate a single state and record label populations at the
    /// requested times (sorted, within the schedule).
    pub fn propagate_state_series(
        &self,
        schedule: &Schedule,
        psi0: &Array1<C64>,
        times: &[f64],
    ) -> Result<PropagationResult> {
        let tl = self.timeline(schedule)?;
        let mut x = psi0.clone().insert_axis(Axis(1));
        let mut t = 0.0;
        let mut values = Vec::with_capacity(times.len());
        for &ts in times {
            if ts < t - 1e-12 || ts > schedule.duration + 1e-9 {
                return Err(SimError::InvalidParameter(format!("sample time {ts} ns out of order or range")));
            }
            self.evolve(&tl, t, ts, &mut x)?;
            t = ts;
            values.push(x.column(0).iter().map(|z| z.norm_sqr()).collect());
        }
        self.evolve(&tl, t, schedule.duration, &mut x)?;
        scale_rows(&mut x, &self.frame_correction(schedule));
        let psi = x.column(0).to_owned();
        let residual = (psi.iter().map(|z| z.norm_sqr()).sum::<f64>() - 1.0).abs();
        Ok(PropagationResult {
            final_state: FinalState::State(psi),
            populations: Some(PopulationSeries { times: times.to_vec(), labels: self.space.labels(), values }),
            diagnostics: StepDiagnostics { steps: self.step_count(schedule), residual },
        })
    }

    fn step_count(&self, schedule: &Schedule) -> usize {
        (schedule.duration / self.dt).ceil() as usize
    }

    fn timeline(&self, schedule: &Schedule) -> Result<Timeline> {
        schedule.validate()?;
        let mut cuts = vec![0.0, schedule.duration];
        for e in &schedule.events {
            match e {
                Event::Flux(p) => {
                    cuts.extend([p.start, p.start + p.tau_edge, p.end() - p.tau_edge, p.end()]);
                }
                Event::Microwave(p) => cuts.extend([p.start, p.end()]),
                Event::Frame(_) => {}
            }
        }
        cuts.retain(|&t| (0.0..=schedule.duration).contains(&t));
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

        let mut drives = Vec::new();
        let mut drive_of_event = HashMap::new();
        for (k, e) in schedule.events.iter().enumerate() {
            if let Event::Microwave(p) = e {
                drive_of_event.insert(k, drives.len());
                drives.push(self.prepare_drive(schedule, p));
            }
        }

        let mut pieces = Vec::new();
        for w in cuts.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            if t1 - t0 < 1e-9 {
                continue;
            }
            let mid = 0.5 * (t0 + t1);
            let flux: Vec<&FluxPulse> =
                schedule.flux_pulses().filter(|p| p.start < mid && mid < p.end()).collect();
            let active: Vec<usize> = schedule
                .events
                .iter()
                .enumerate()
                .filter_map(|(k, e)| match e {
                    Event::Microwave(p) if p.start < mid && mid < p.end() => Some(drive_of_event[&k]),
                    _ => None,
                })
                .collect();
            let kind = if !active.is_empty() {
                if !flux.is_empty() && !self.lab_frame {
                    return Err(SimError::Schedule(format!(
                        "flux and microwave pulses overlap in [{t0}, {t1}] ns; only the lab frame handles this"
                    )));
                }
                if self.lab_frame {
                    Kind::Lab(active)
                } else {
                    Kind::Drive(active)
                }
            } else if let Some(p) = flux.first() {
                let s = mid - p.start;
                if flux.len() == 1 && s > p.tau_edge && s < p.tau_edge + p.tau_flat {
                    Kind::Flat(self.coupler_frequency(schedule, mid)?)
                } else {
                    let key = if flux.len() != 1 {
                        None
                    } else if (t0 - p.start).abs() < 1e-9 && (t1 - p.start - p.tau_edge).abs() < 1e-9 {
                        Some(self.edge_key(p, true))
                    } else if (t0 - (p.end() - p.tau_edge)).abs() < 1e-9 && (t1 - p.end()).abs() < 1e-9 {
                        Some(self.edge_key(p, false))
                    } else {
                        None
                    };
                    Kind::Ramp(key)
                }
            } else {
                Kind::Idle
            };
            pieces.push(Piece { t0, t1, kind });
        }
        Ok(Timeline { schedule: schedule.clone(), pieces, drives })
    }

    fn edge_key(&self, p: &FluxPulse, rising: bool) -> EdgeKey {
        EdgeKey {
            v_max: p.v_max.to_bits(),
            tau_edge: p.tau_edge.to_bits(),
            rising,
            literal: p.literal_edges,
            dt: self.dt.to_bits(),
        }
    }

    fn prepare_drive(&self, schedule: &Schedule, p: &MicrowavePulse) -> Drive {
        let phase = p.phase + schedule.frame_at(p.channel, p.subspace, p.start);
        let alpha = match p.channel {
            Qutrit::Q1 => self.params.alpha1,
            Qutrit::Q2 => self.params.alpha2,
        };
        let scale = 1.0 / (2.0 * p.subspace.ladder_element());
        let wd = TAU * p.carrier;
        let r = &self.raising[p.channel as usize];
        let mut terms = Vec::new();
        for ((m, n), &a) in r.indexed_iter() {
            let det = self.frame[m] - self.frame[n] - wd;
            if a.abs() > DRIVE_TOL && det.abs() < 0.5 * wd {
                terms.push((m, n, a * scale, det));
            }
        }
        Drive { pulse: *p, phase, alpha, scale, terms }
    }

    /// x <- U_F(t1, t0) x, without frame correction.
    fn evolve(&self, tl: &Timeline, t0: f64, t1: f64, x: &mut Array2<C64>) -> Result<()> {
        for piece in &tl.pieces {
            let a = piece.t0.max(t0);
            let b = piece.t1.min(t1);
            if b - a <= 1e-12 {
                continue;
            }
            match &piece.kind {
                Kind::Idle => {
                    let ph = Array1::from_shape_fn(self.space.dim(), |i| {
                        C64::from_polar(1.0, -(self.energies[i] - self.frame[i]) * (b - a))
                    });
                    scale_rows(x, &ph);
                }
                Kind::Drive(active) => self.drive_window(tl, active, a, b, x)?,
                _ => {
                    let full = (a - piece.t0).abs() < 1e-12 && (b - piece.t1).abs() < 1e-12;
                    let us = self.schrodinger_piece(tl, piece, a, b, full)?;
                    self.apply_schrodinger(&us, a, b, x);
                }
            }
        }
        Ok(())
    }

    /// x <- e^{iF t1} V^T U_S V e^{-iF t0} x
    fn apply_schrodinger(&self, us: &Array2<C64>, t0: f64, t1: f64, x: &mut Array2<C64>) {
        scale_rows(x, &self.phases(-t0));
        let y = self.basis_c.dot(x);
        let y = us.dot(&y);
        *x = self.basis_c.t().dot(&y);
        scale_rows(x, &self.phases(t1));
    }

    fn phases(&self, t: f64) -> Array1<C64> {
        self.frame.mapv(|f| C64::from_polar(1.0, f * t))
    }

    /// Bare-basis Schrodinger propagator of one non-drive piece over [a, b].
    fn schrodinger_piece(&self, tl: &Timeline, piece: &Piece, a: f64, b: f64, full: bool) -> Result<Array2<C64>> {
        match &piece.kind {
            Kind::Flat(wc) => self.flat_propagator(*wc, b - a),
            Kind::Ramp(key) => {
                if let (true, Some(k)) = (full, key) {
                    if let Some(u) = self.edge_cache.lock().unwrap().get(k) {
                        return Ok((**u).clone());
                    }
                    let u = self.ramp_propagator(&tl.schedule, a, b)?;
                    self.edge_cache.lock().unwrap().insert(*k, Arc::new(u.clone()));
                    Ok(u)
                } else {
                    self.ramp_propagator(&tl.schedule, a, b)
                }
            }
            Kind::Lab(active) => self.lab_propagator(tl, active, a, b),
            Kind::Idle | Kind::Drive(_) => unreachable!("handled in the idle frame"),
        }
    }

    fn flat_propagator(&self, omega_c: f64, len: f64) -> Result<Array2<C64>> {
        let key = omega_c.to_bits();
        let cached = self.flat_cache.lock().unwrap().get(&key).cloned();
        let eig = match cached {
            Some(e) => e,
            None => {
                let h = self.parts.at(omega_c);
                let mut per_block = Vec::new();
                for b in 0..self.parts.blocks.blocks.len() {
                    per_block.push(eigh_real(&self.parts.blocks.extract(&h, b))?);
                }
                let e = Arc::new(per_block);
                self.flat_cache.lock().unwrap().insert(key, e.clone());
                e
            }
        };
        let blocks = eig.iter().map(|(v, w)| expm_from_real_eig(v, w, len)).collect();
        Ok(BlockUnitary { structure: self.parts.blocks.clone(), blocks }.to_dense())
    }

    fn ramp_propagator(&self, schedule: &Schedule, a: f64, b: f64) -> Result<Array2<C64>> {
        let n = (((b - a) / self.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        let mut u = BlockUnitary::identity(&self.parts.blocks);
        for k in 0..n {
            let tm = a + (k as f64 + 0.5) * h;
            let wc = self.coupler_frequency(schedule, tm)?;
            let step = BlockUnitary::expm_real(&self.parts.at(wc), &self.parts.blocks, h)?;
            u.left_mul(&step);
        }
        Ok(u.to_dense())
    }

    fn lab_propagator(&self, tl: &Timeline, active: &[usize], a: f64, b: f64) -> Result<Array2<C64>> {
        let dim = self.space.dim();
        let n = (((b - a) / self.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        let mut u = Array2::eye(dim).mapv(|x: f64| C64::new(x, 0.0));
        for k in 0..n {
            let tm = a + (k as f64 + 0.5) * h;
            let wc = self.coupler_frequency(&tl.schedule, tm)?;
            let mut hm = to_complex(&self.parts.at(wc));
            for &d in active {
                let drive = &tl.drives[d];
                let eps = drive.amplitude(tm)? * C64::from_polar(drive.scale, -TAU * drive.pulse.carrier * tm);
                let ad = &self.bare_raising[drive.pulse.channel as usize];
                for ((r, c), &v) in ad.indexed_iter() {
                    if v != 0.0 {
                        hm[[r, c]] += eps * v;
                        hm[[c, r]] += eps.conj() * v;
                    }
                }
            }
            u = expm_hermitian(&hm, h)?.dot(&u);
        }
        Ok(u)
    }

    fn drive_window(&self, tl: &Timeline, active: &[usize], a: f64, b: f64, x: &mut Array2<C64>) -> Result<()> {
        let n = (((b - a) / self.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        let diag = &self.energies - &self.frame;
        let dim = self.space.dim();
        // Fixed sparsity pattern; values are refilled every step.
        let mut entries = Vec::new();
        for &d in active {
            for &(m, nn, _, _) in &tl.drives[d].terms {
                entries.push((m, nn, ONE));
                entries.push((nn, m, ONE));
            }
        }
        let mut hm = Csr::from_triplets(dim, entries);
        let slot = |r: usize, c: usize| -> usize {
            let row = &hm.cols[hm.row_ptr[r]..hm.row_ptr[r + 1]];
            hm.row_ptr[r] + row.binary_search(&c).expect("pattern entry")
        };
        let mut slots = Vec::new();
        for &d in active {
            for &(m, nn, _, _) in &tl.drives[d].terms {
                slots.push((slot(m, nn), slot(nn, m)));
            }
        }
        for k in 0..n {
            let tm = a + (k as f64 + 0.5) * h;
            hm.vals.iter_mut().for_each(|v| *v = ZERO);
            let mut s = slots.iter();
            for &d in active {
                let drive = &tl.drives[d];
                let eps = drive.amplitude(tm)?;
                for &(_, _, c, det) in &drive.terms {
                    let z = eps * C64::from_polar(c, det * tm);
                    let &(up, down) = s.next().unwrap();
                    hm.vals[up] += z;
                    hm.vals[down] += z.conj();
                }
            }
            taylor_step(&diag, &hm, h, x);
        }
        Ok(())
    }

    /// Bare-basis Schrodinger propagator over [a, b] (inside the schedule).
    fn schrodinger_window(&self, tl: &Timeline, a: f64, b: f64) -> Result<Array2<C64>> {
        let dim = self.space.dim();
        let mut us = Array2::eye(dim).mapv(|x: f64| C64::new(x, 0.0));
        for piece in &tl.pieces {
            let lo = piece.t0.max(a);
            let hi = piece.t1.min(b);
            if hi - lo <= 1e-12 {
                continue;
            }
            let step = match &piece.kind {
                Kind::Idle => {
                    let ph = self.energies.mapv(|e| C64::from_polar(1.0, -e * (hi - lo)));
                    let mut vd = self.basis_c.clone();
                    scale_cols(&mut vd, &ph);
                    vd.dot(&self.basis_c.t())
                }
                Kind::Drive(active) => {
                    let mut uf = Array2::eye(dim).mapv(|x: f64| C64::new(x, 0.0));
                    self.drive_window(tl, active, lo, hi, &mut uf)?;
                    // U_S = V e^{-iF hi} U_F e^{iF lo} V^T
                    scale_rows(&mut uf, &self.phases(-hi));
                    scale_cols(&mut uf, &self.phases(lo));
                    self.basis_c.dot(&uf).dot(&self.basis_c.t())
                }
                _ => {
                    let full = (lo - piece.t0).abs() < 1e-12 && (hi - piece.t1).abs() < 1e-12;
                    self.schrodinger_piece(tl, piece, lo, hi, full)?
                }
            };
            us = step.dot(&us);
        }
        Ok(us)
    }

    /// Lindblad evolution of idle-frame operators (any matrices, not only
    /// density matrices) through a schedule. Inputs and outputs are full
    /// dimension and live in the logical idle frame.
    ///
    /// A model with tabulated times is first reduced to its effective
    /// constants along the schedule's coupler trajectory.
    pub fn propagate_lindblad_batch(
        &self,
        schedule: &Schedule,
        model: &DecoherenceModel,
        inputs: &[Array2<C64>],
        macro_dt: f64,
    ) -> Result<Vec<Array2<C64>>> {
        if !(macro_dt > 0.0) {
            return Err(SimError::InvalidParameter("macro step must be positive".into()));
        }
        let dim = self.space.dim();
        let constant = if model.is_constant() {
            model.clone()
        } else {
            let traj = self.coupler_trajectory(schedule, self.dt.max(0.1))?;
            effective_decoherence_time(model, &traj)?
        };
        let diss = Dissipator::new(&collapse_operators(&constant, self.space)?, dim);
        let tl = self.timeline(schedule)?;

        let hermitian: Vec<bool> = inputs.iter().map(|r| crate::linalg::hermiticity_residual(r) < 1e-12).collect();
        let mut states: Vec<Array2<C64>> = Vec::with_capacity(inputs.len());
        for r in inputs {
            if r.dim() != (dim, dim) {
                return Err(SimError::InvalidDimension(format!("operator shape {:?}, expected {dim}", r.dim())));
            }
            states.push(self.basis_c.dot(r).dot(&self.basis_c.t()));
        }

        for piece in &tl.pieces {
            let len = piece.t1 - piece.t0;
            let n = ((len / macro_dt) - 1e-9).ceil().max(1.0) as usize;
            let h = len / n as f64;
            for k in 0..n {
                let a = piece.t0 + k as f64 * h;
                let u1 = self.schrodinger_window(&tl, a, a + 0.5 * h)?;
                let u2 = self.schrodinger_window(&tl, a + 0.5 * h, a + h)?;
                let u1d = dagger(&u1);
                let u2d = dagger(&u2);
                let half1 = |r: &Array2<C64>| u1.dot(r).dot(&u1d);
                let half2 = |r: &Array2<C64>| u2.dot(r).dot(&u2d);
                for (rho, &herm) in states.iter_mut().zip(&hermitian) {
                    let mut next = lawson_rk4_step(rho, h, &half1, &half2, &|r| diss.apply(r));
                    if herm {
                        symmetrize(&mut next);
                    }
                    *rho = next;
                }
            }
        }

        let corr = self.frame_correction(schedule);
        let ph = self.phases(schedule.duration);
        let mut outputs = Vec::with_capacity(states.len());
        for (rho, herm) in states.into_iter().zip(hermitian) {
            let mut r = self.basis_c.t().dot(&rho).dot(&self.basis_c);
            let row = &ph * &corr;
            scale_rows(&mut r, &row);
            scale_cols(&mut r, &row.mapv(|z| z.conj()));
            if herm {
                let tr = crate::linalg::trace(&r).re;
                if (tr - 1.0).abs() < 1e-6 {
                    let (vals, _) = eigh_complex(&r)?;
                    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    if min < -1e-6 {
                        return Err(SimError::Instability { min_eig: min });
                    }
                }
            }
            outputs.push(r);
        }
        Ok(outputs)
    }

    /// Lindblad evolution of one density matrix.
    pub fn propagate_lindblad(
        &self,
        schedule: &Schedule,
        model: &DecoherenceModel,
        rho0: &Array2<C64>,
        macro_dt: f64,
    ) -> Result<PropagationResult> {
        let tr = crate::linalg::trace(rho0);
        if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-8 || crate::linalg::hermiticity_residual(rho0) > 1e-10 {
            return Err(SimError::InvalidParameter("initial state is not a unit-trace Hermitian matrix".into()));
        }
        let rho = self.propagate_lindblad_batch(schedule, model, std::slice::from_ref(rho0), macro_dt)?.remove(0);
        let residual = (crate::linalg::trace(&rho).re - 1.0).abs();
        Ok(PropagationResult {
            final_state: FinalState::Density(rho),
            populations: None,
            diagnostics: StepDiagnostics { steps: (schedule.duration / macro_dt).ceil() as usize, residual },
        })
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Idle,
    Flat(f64),
    Ramp(Option<EdgeKey>),
    Drive(Vec<usize>),
    Lab(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Piece {
    t0: f64,
    t1: f64,
    kind: Kind,
}

#[derive(Debug, Clone)]
struct Drive {
    pulse: MicrowavePulse,
    phase: f64,
    alpha: f64,
    scale: f64,
    /// (row, column, coefficient, detuning in rad/ns) of the kept raising part.
    terms: Vec<(usize, usize, f64, f64)>,
}

impl Drive {
    /// Complex envelope including the carrier phase and frame.
    fn amplitude(&self, t: f64) -> Result<C64> {
        Ok(drag_envelope(&self.pulse, t, self.alpha)? * C64::from_polar(1.0, self.phase))
    }
}

#[derive(Debug, Clone)]
struct Timeline {
    schedule: Schedule,
    pieces: Vec<Piece>,
    drives: Vec<Drive>,
}

fn scale_rows(x: &mut Array2<C64>, f: &Array1<C64>) {
    for (mut row, &v) in x.axis_iter_mut(Axis(0)).zip(f.iter()) {
        row.mapv_inplace(|z| z * v);
    }
}

fn scale_cols(x: &mut Array2<C64>, f: &Array1<C64>) {
    for (mut col, &v) in x.axis_iter_mut(Axis(1)).zip(f.iter()) {
        col.mapv_inplace(|z| z * v);
    }
}

/// Columns `e_k` for the given basis indices.
pub fn unit_columns(dim: usize, idx: &[usize]) -> Array2<C64> {
    let mut x = Array2::zeros((dim, idx.len()));
    for (c, &i) in idx.iter().enumerate() {
        x[[i, c]] = ONE;
    }
    x
}

/// Convenience wrapper: full propagator of a schedule at time step `dt`.
pub fn propagate_unitary(
    schedule: &Schedule,
    params: &DeviceParams,
    space: HilbertSpace,
    dt: f64,
) -> Result<PropagationResult> {
    Simulator::new(params, space)?.with_dt(dt)?.propagate_unitary(schedule)
}

/// Convenience wrapper around [`Simulator::propagate_lindblad`].
pub fn propagate_lindblad(
    schedule: &Schedule,
    params: &DeviceParams,
    space: HilbertSpace,
    model: &DecoherenceModel,
    rho0: &Array2<C64>,
    dt: f64,
) -> Result<PropagationResult> {
    Simulator::new(params, space)?.with_dt(dt)?.propagate_lindblad(schedule, model, rho0, DEFAULT_MACRO_DT_NS)
}

#[derive(Debug, Clone)]
pub enum FinalState {
    Unitary(Array2<C64>),
    State(Array1<C64>),
    Density(Array2<C64>),
}

#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub steps: usize,
    /// Unitarity residual, norm error or trace error of the final state.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct PopulationSeries {
    pub times: Vec<f64>,
    pub labels: Vec<Label>,
    /// One row per sample time, one column per label.
    pub values: Vec<Vec<f64>>,
}

impl PopulationSeries {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t_ns".to_string()];
        header.extend(self.labels.iter().map(|l| l.to_string()));
        wr.write_record(&header)?;
        for (t, row) in self.times.iter().zip(&self.values) {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|p| p.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PropagationResult {
    pub final_state: FinalState,
    pub populations: Option<PopulationSeries>,
    pub diagnostics: StepDiagnostics,
}

impl PropagationResult {
    pub fn unitary(&self) -> Option<&Array2<C64>> {
        match &self.final_state {
            FinalState::Unitary(u) => Some(u),
            _ => None,
        }
    }

    pub fn density(&self) -> Option<&Array2<C64>> {
        match &self.final_state {
            FinalState::Density(r) => Some(r),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Decoherence

/// A decoherence time in microseconds, constant or tabulated over the
/// coupler frequency (GHz) with linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecayTime {
    Constant(f64),
    Table(Vec<(f64, f64)>),
}

impl DecayTime {
    pub fn at(&self, omega_c: f64) -> Result<f64> {
        match self {
            DecayTime::Constant(t) => Ok(*t),
            DecayTime::Table(rows) => {
                let (lo, hi) = (rows[0].0, rows[rows.len() - 1].0);
                if omega_c < lo - 1e-9 || omega_c > hi + 1e-9 {
                    return Err(SimError::Extrapolation(format!(
                        "omegaC = {omega_c} GHz outside table range [{lo}, {hi}]"
                    )));
                }
                let k = rows.partition_point(|r| r.0 < omega_c).clamp(1, rows.len() - 1);
                let (x0, y0) = rows[k - 1];
                let (x1, y1) = rows[k];
                if x1 == x0 {
                    return Ok(y0);
                }
                Ok(y0 + (y1 - y0) * (omega_c - x0) / (x1 - x0))
            }
        }
    }

    /// Read a two-column CSV (`omegaC_GHz`, `T_us`) with a header row.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| SimError::Parse(format!("{}: missing column {i}", path.display())))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| SimError::Parse(format!("{}: {e}", path.display())))
            };
            rows.push((parse(0)?, parse(1)?));
        }
        let t = DecayTime::Table(rows);
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        match self {
            DecayTime::Constant(t) if *t > 0.0 => Ok(()),
            DecayTime::Constant(t) => Err(SimError::InvalidParameter(format!("decoherence time {t} us"))),
            DecayTime::Table(rows) => {
                if rows.is_empty() {
                    return Err(SimError::InvalidParameter("empty decoherence table".into()));
                }
                if rows.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(SimError::InvalidParameter("table frequencies must increase".into()));
                }
                if rows.iter().any(|r| !(r.1 > 0.0)) {
                    return Err(SimError::InvalidParameter("table times must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// Time average along a trajectory of (t, omegaC) samples (trapezoid).
    pub fn average(&self, trajectory: &[(f64, f64)]) -> Result<f64> {
        if let DecayTime::Constant(t) = self {
            return Ok(*t);
        }
        if trajectory.len() < 2 {
            return self.at(trajectory.first().map(|p| p.1).unwrap_or(f64::NAN));
        }
        let mut acc = 0.0;
        for w in trajectory.windows(2) {
            acc += 0.5 * (self.at(w[0].1)? + self.at(w[1].1)?) * (w[1].0 - w[0].0);
        }
        Ok(acc / (trajectory[trajectory.len() - 1].0 - trajectory[0].0))
    }
}

/// Decoherence times of one qutrit, microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QutritDecoherence {
    pub t1_01: DecayTime,
    pub t2_01: DecayTime,
    pub t1_12: DecayTime,
    pub t2_12: DecayTime,
    pub t2_02: DecayTime,
}

impl QutritDecoherence {
    pub fn constant(t1_01: f64, t2_01: f64, t1_12: f64, t2_12: f64, t2_02: f64) -> Self {
        QutritDecoherence {
            t1_01: DecayTime::Constant(t1_01),
            t2_01: DecayTime::Constant(t2_01),
            t1_12: DecayTime::Constant(t1_12),
            t2_12: DecayTime::Constant(t2_12),
            t2_02: DecayTime::Constant(t2_02),
        }
    }

    fn channels(&self) -> [(&'static str, &DecayTime); 5] {
        [
            ("T1_01", &self.t1_01),
            ("T2_01", &self.t2_01),
            ("T1_12", &self.t1_12),
            ("T2_12", &self.t2_12),
            ("T2_02", &self.t2_02),
        ]
    }

    fn map(&self, mut f: impl FnMut(&DecayTime) -> Result<DecayTime>) -> Result<Self> {
        Ok(QutritDecoherence {
            t1_01: f(&self.t1_01)?,
            t2_01: f(&self.t2_01)?,
            t1_12: f(&self.t1_12)?,
            t2_12: f(&self.t2_12)?,
            t2_02: f(&self.t2_02)?,
        })
    }
}

/// Per-qutrit decoherence. Only T1_01 and T2_01 enter the master equation;
/// the other channels are carried for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceModel {
    pub q1: QutritDecoherence,
    pub q2: QutritDecoherence,
    /// Use the printed dephasing prefactor `2/sqrt(T_phi)` instead of
    /// `sqrt(2/T_phi)`.
    #[serde(default)]
    pub literal_dephasing: bool,
}

impl DecoherenceModel {
    /// Effective times along the Cphase trajectory of the reference device.
    pub fn effective_times() -> Self {
        DecoherenceModel {
            q1: QutritDecoherence::constant(27.1, 16.5, 13.9, 12.3, 11.64),
            q2: QutritDecoherence::constant(16.8, 10.9, 8.9, 8.3, 11.62),
            literal_dephasing: false,
        }
    }

    /// Every time infinite: no collapse operators.
    pub fn closed() -> Self {
        let inf = f64::INFINITY;
        DecoherenceModel {
            q1: QutritDecoherence::constant(inf, inf, inf, inf, inf),
            q2: QutritDecoherence::constant(inf, inf, inf, inf, inf),
            literal_dephasing: false,
        }
    }

    /// All times multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let f = |d: &DecayTime| -> Result<DecayTime> {
            Ok(match d {
                DecayTime::Constant(t) => DecayTime::Constant(t * factor),
                DecayTime::Table(r) => DecayTime::Table(r.iter().map(|&(w, t)| (w, t * factor)).collect()),
            })
        };
        DecoherenceModel {
            q1: self.q1.map(f).expect("infallible"),
            q2: self.q2.map(f).expect("infallible"),
            literal_dephasing: self.literal_dephasing,
        }
    }

    pub fn qutrit(&self, q: Qutrit) -> &QutritDecoherence {
        match q {
            Qutrit::Q1 => &self.q1,
            Qutrit::Q2 => &self.q2,
        }
    }

    pub fn is_constant(&self) -> bool {
        [&self.q1, &self.q2]
            .iter()
            .all(|q| q.channels().iter().all(|(_, d)| matches!(d, DecayTime::Constant(_))))
    }

    /// Load the five tables of each qutrit from `dir/q{1,2}_{channel}.csv`.
    pub fn from_table_dir(dir: &Path) -> Result<Self> {
        let load = |q: &str| -> Result<QutritDecoherence> {
            let f = |c: &str| DecayTime::from_csv(&dir.join(format!("{q}_{c}.csv")));
            Ok(QutritDecoherence {
                t1_01: f("T1_01")?,
                t2_01: f("T2_01")?,
                t1_12: f("T1_12")?,
                t2_12: f("T2_12")?,
                t2_02: f("T2_02")?,
            })
        };
        let m = DecoherenceModel { q1: load("q1")?, q2: load("q2")?, literal_dephasing: false };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for q in [&self.q1, &self.q2] {
            for (name, d) in q.channels() {
                d.validate().map_err(|e| SimError::InvalidParameter(format!("{name}: {e}")))?;
            }
            if let (DecayTime::Constant(t1), DecayTime::Constant(t2)) = (&q.t1_01, &q.t2_01) {
                if t2 > &(2.0 * t1 * (1.0 + 1e-12)) {
                    return Err(SimError::InvalidParameter(format!("T2_01 = {t2} us exceeds 2 T1_01 = {}", 2.0 * t1)));
                }
            }
        }
        Ok(())
    }
}

/// Time-averaged decoherence times along a coupler trajectory of
/// (t ns, omegaC GHz) samples. The result has only constant entries.
pub fn effective_decoherence_time(model: &DecoherenceModel, trajectory: &[(f64, f64)]) -> Result<DecoherenceModel> {
    let avg = |d: &DecayTime| Ok(DecayTime::Constant(d.average(trajectory)?));
    Ok(DecoherenceModel {
        q1: model.q1.map(avg)?,
        q2: model.q2.map(avg)?,
        literal_dephasing: model.literal_dephasing,
    })
}

/// A collapse operator with exactly one nonzero entry per column, stored as
/// (row, column, value) triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseOperator {
    pub name: String,
    pub entries: Vec<(usize, usize, f64)>,
}

impl CollapseOperator {
    pub fn to_dense(&self, dim: usize) -> Array2<C64> {
        let mut c = Array2::zeros((dim, dim));
        for &(r, col, v) in &self.entries {
            c[[r, col]] = C64::new(v, 0.0);
        }
        c
    }
}

/// Relaxation `sqrt(1/T1) a` and dephasing `sqrt(2/T_phi) n` for each qutrit,
/// with `1/T_phi = 1/T2 - 1/(2 T1)`. Infinite times drop the operator.
/// Rates are per ns.
pub fn collapse_operators(model: &DecoherenceModel, space: HilbertSpace) -> Result<Vec<CollapseOperator>> {
    model.validate()?;
    let mut ops = Vec::new();
    for q in [Qutrit::Q1, Qutrit::Q2] {
        let d = model.qutrit(q);
        let (t1, t2) = match (&d.t1_01, &d.t2_01) {
            (DecayTime::Constant(a), DecayTime::Constant(b)) => (a * 1e3, b * 1e3),
            _ => {
                return Err(SimError::InvalidParameter(
                    "collapse operators need constant times; reduce tables with effective_decoherence_time".into(),
                ))
            }
        };
        let gamma1 = 1.0 / t1;
        let gamma_phi = (1.0 / t2 - 0.5 / t1).max(0.0);
        let lower = space.mode_lowering(mode_of(q));
        let occ = space.occupations(mode_of(q));
        if gamma1 > 0.0 {
            let s = gamma1.sqrt();
            let entries = lower.indexed_iter().filter(|(_, v)| **v != 0.0).map(|((r, c), v)| (r, c, s * v)).collect();
            ops.push(CollapseOperator { name: format!("relax_{}", q.channel_name()), entries });
        }
        if gamma_phi > 0.0 {
            let s = if model.literal_dephasing { 2.0 * gamma_phi.sqrt() } else { (2.0 * gamma_phi).sqrt() };
            let entries = occ.iter().enumerate().filter(|(_, n)| **n != 0.0).map(|(i, n)| (i, i, s * n)).collect();
            ops.push(CollapseOperator { name: format!("dephase_{}", q.channel_name()), entries });
        }
    }
    Ok(ops)
}

/// `D(rho) = sum_n C rho C^dagger - 1/2 {C^dagger C, rho}` for operators
/// with one nonzero per column, where `C^dagger C` is diagonal.
#[derive(Debug, Clone)]
pub struct Dissipator {
    ops: Vec<Vec<(usize, usize, f64)>>,
    half_loss: Array1<f64>,
}

impl Dissipator {
    pub fn new(ops: &[CollapseOperator], dim: usize) -> Self {
        let mut loss = Array1::zeros(dim);
        for op in ops {
            for &(_, c, v) in &op.entries {
                loss[c] += v * v;
            }
        }
        Dissipator { ops: ops.iter().map(|o| o.entries.clone()).collect(), half_loss: loss * 0.5 }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn apply(&self, rho: &Array2<C64>) -> Array2<C64> {
        let n = rho.nrows();
        let mut out = Array2::from_shape_fn((n, n), |(i, j)| -rho[[i, j]] * (self.half_loss[i] + self.half_loss[j]));
        for op in &self.ops {
            for &(ra, a, va) in op {
                for &(rb, b, vb) in op {
                    out[[ra, rb]] += rho[[a, b]] * (va * vb);
                }
            }
        }
        out
    }
}

/// One Lawson (integrating-factor) RK4 step of `rho' = L(t) rho + D(rho)`
/// where the flow of `L` over the two half steps is given exactly by
/// `half1` and `half2`.
pub fn lawson_rk4_step(
    rho: &Array2<C64>,
    h: f64,
    half1: &dyn Fn(&Array2<C64>) -> Array2<C64>,
    half2: &dyn Fn(&Array2<C64>) -> Array2<C64>,
    d: &dyn Fn(&Array2<C64>) -> Array2<C64>,
) -> Array2<C64> {
    let hh = 0.5 * h;
    let k1 = d(rho);
    let a = half1(rho);
    let b = half1(&k1);
    let k2 = d(&(&a + &(&b * C64::new(hh, 0.0))));
    let k3 = d(&(&a + &(&k2 * C64::new(hh, 0.0))));
    let k4 = d(&half2(&(&a + &(&k3 * C64::new(h, 0.0)))));
    let inner = &a + &(&b * C64::new(h / 6.0, 0.0)) + &((&k2 + &k3) * C64::new(h / 3.0, 0.0));
    half2(&inner) + &k4 * C64::new(h / 6.0, 0.0)
}

/// Pure state `|label>` as an idle-frame vector.
pub fn basis_state(space: HilbertSpace, l: Label) -> Result<Array1<C64>> {
    let mut v = Array1::zeros(space.dim());
    v[space.checked_index(l)?] = ONE;
    Ok(v)
}

/// Embed a 9x9 two-qutrit operator (index `3 i + j`) into the full space
/// with the coupler in its ground state.
pub fn embed_computational(space: HilbertSpace, op: &Array2<C64>) -> Array2<C64> {
    let idx = space.computational_indices();
    let mut out = Array2::zeros((space.dim(), space.dim()));
    for (r, &ri) in idx.iter().enumerate() {
        for (c, &ci) in idx.iter().enumerate() {
            out[[ri, ci]] = op[[r, c]];
        }
    }
    out
}

/// Reduce a full-space density matrix to the two qutrits: trace out the
/// coupler, then merge qutrit levels above 2 into level 2 (a three-outcome
/// readout cannot tell them apart). Returns a 9x9 matrix indexed `3 i + j`.
pub fn reduce_to_qutrits(space: HilbertSpace, rho: &Array2<C64>) -> Array2<C64> {
    let clamp = |l: usize| l.min(2);
    let mut out = Array2::<C64>::zeros((9, 9));
    for r in 0..space.dim() {
        let lr = space.label(r);
        for c in 0..space.dim() {
            let lc = space.label(c);
            if lr.c != lc.c {
                continue;
            }
            let v = rho[[r, c]];
            if v == ZERO {
                continue;
            }
            let hi_r = lr.q1 > 2 || lr.q2 > 2;
            let hi_c = lc.q1 > 2 || lc.q2 > 2;
            if hi_r || hi_c {
                // Only populations of leaked levels survive the merge.
                if r == c {
                    let i = 3 * clamp(lr.q1) + clamp(lr.q2);
                    out[[i, i]] += v;
                }
                continue;
            }
            out[[3 * lr.q1 + lr.q2, 3 * lc.q1 + lc.q2]] += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{compose, FluxPulse};
    use crate::linalg::{expm_hermitian, frobenius, hermiticity_residual, trace};

    fn small() -> (DeviceParams, HilbertSpace) {
        (DeviceParams::default(), HilbertSpace::new(3, 2, 3).unwrap())
    }

    #[test]
    fn empty_schedule_matches_direct_exponential() {
        let (p, space) = small();
        let sim = Simulator::new(&p, space).unwrap();
        let tau = 37.5;
        let u = sim.propagate_unitary(&Schedule::empty(tau)).unwrap();
        let u = u.unitary().unwrap().clone();
        // Direct: e^{iF tau} V^T exp(-i H tau) V in the idle frame.
        let h = to_complex(&sim.parts.at(p.omega_c_max));
        let us = expm_hermitian(&h, tau).unwrap();
        let mut direct = sim.basis_c.t().dot(&us).dot(&sim.basis_c);
        scale_rows(&mut direct, &sim.phases(tau));
        assert!(frobenius(&(&u - &direct)) < 1e-9);
    }

    #[test]
    fn flux_pulse_is_unitary_and_cached() {
        let (p, space) = small();
        let sim = Simulator::new(&p, space).unwrap().with_dt(0.05).unwrap();
        let sched = compose(vec![Event::Flux(FluxPulse::new(0.4, 20.0, 10.0, 5.0))], 10.0)
            .unwrap()
            .with_duration(60.0);
        let r = sim.propagate_unitary(&sched).unwrap();
        assert!(r.diagnostics.residual < 1e-8);
        assert_eq!(sim.edge_cache.lock().unwrap().len(), 2);
    }

    #[test]
    fn flat_piece_conserves_energy() {
        let (p, space) = small();
        let sim = Simulator::new(&p, space).unwrap();
        let wc = 6.9;
        let us = sim.flat_propagator(wc, 13.0).unwrap();
        let h = to_complex(&sim.parts.at(wc));
        let psi = Array1::from_shape_fn(space.dim(), |i| C64::new(1.0 + i as f64, 0.5 * i as f64));
        let psi = &psi / psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let energy = |v: &Array1<C64>| v.iter().zip(h.dot(v).iter()).map(|(a, b)| (a.conj() * b).re).sum::<f64>();
        let after = us.dot(&psi);
        assert!(((energy(&after) - energy(&psi)) / energy(&psi)).abs() < 1e-8);
    }

    #[test]
    fn flux_and_drive_overlap_is_rejected() {
        let (p, space) = small();
        let sim = Simulator::new(&p, space).unwrap();
        let mut s = Schedule::empty(60.0);
        s.buffer = 0.0;
        s.events.push(Event::Flux(FluxPulse::new(0.3, 10.0, 10.0, 0.0)));
        s.events.push(Event::Microwave(MicrowavePulse {
            channel: Qutrit::Q1,
            subspace: Subspace::S01,
            carrier: sim.transition_frequency(Qutrit::Q1, Subspace::S01),
            duration: 40.0,
            amplitude: 0.05,
            phase: 0.0,
            drag_coeff: 0.0,
            start: 5.0,
        }));
        assert!(matches!(sim.propagate_unitary(&s), Err(SimError::Schedule(_))));
    }

    #[test]
    fn resonant_drive_matches_lab_frame() {
        let (p, space) = small();
        let sim = Simulator::new(&p, space).unwrap().with_dt(0.005).unwrap();
        let lab = sim.clone().with_lab_frame(true);
        let pulse = MicrowavePulse {
            channel: Qutrit::Q1,
            subspace: Subspace::S01,
            carrier: sim.transition_frequency(Qutrit::Q1, Subspace::S01),
            duration: 40.0,
            amplitude: std::f64::consts::PI / 30.0,
            phase: 0.3,
            drag_coeff: 0.0,
            start: 0.0,
        };
        let s = compose(vec![Event::Microwave(pulse)], 10.0).unwrap();
        let psi = basis_state(space, Label::new(0, 0, 0)).unwrap().insert_axis(Axis(1));
        let a = sim.propagate_columns(&s, &psi).unwrap();
        let b = lab.propagate_columns(&s, &psi).unwrap();
        let p1 = |x: &Array2<C64>| x[[space.index(Label::new(1, 0, 0)), 0]].norm_sqr();
        assert!(p1(&a) > 0.99, "rwa transfer {}", p1(&a));
        // Counter-rotating terms give Bloch-Siegert corrections of order
        // (Omega / omega)^2.
        assert!((p1(&a) - p1(&b)).abs() < 2e-3, "rwa {} lab {}", p1(&a), p1(&b));
    }

    #[test]
    fn frame_shift_rotates_reported_state() {
        let (p, space) = small();
        let sim = Simulator::new(&p, space).unwrap();
        let s = crate::control::apply_virtual_z(&Schedule::empty(0.0), Qutrit::Q1, Subspace::S01, 0.7);
        let u = sim.propagate_unitary(&s).unwrap().unitary().unwrap().clone();
        let i1 = space.index(Label::new(1, 0, 0));
        assert!((u[[i1, i1]] - C64::from_polar(1.0, -0.7)).norm() < 1e-12);
        let i2 = space.index(Label::new(2, 0, 0));
        assert!((u[[i2, i2]] - C64::from_polar(1.0, -0.7)).norm() < 1e-12);
    }

    #[test]
    fn collapse_set_is_empty_for_infinite_times() {
        let (_, space) = small();
        assert!(collapse_operators(&DecoherenceModel::closed(), space).unwrap().is_empty());
        assert_eq!(collapse_operators(&DecoherenceModel::effective_times(), space).unwrap().len(), 4);
    }

    #[test]
    fn physicality_check() {
        let mut m = DecoherenceModel::effective_times();
        m.q1.t2_01 = DecayTime::Constant(60.0);
        assert!(m.validate().is_err());
    }

    #[test]
    fn table_interpolation_and_average() {
        let d = DecayTime::Table(vec![(6.0, 10.0), (7.0, 20.0), (8.0, 20.0)]);
        assert!((d.at(6.5).unwrap() - 15.0).abs() < 1e-12);
        assert!(d.at(5.9).is_err());
        // Two constant segments of equal length: mean of 10 and 20.
        let traj = [(0.0, 6.0), (1.0, 6.0), (1.0 + 1e-12, 7.5), (2.0, 7.5)];
        assert!((d.average(&traj).unwrap() - 15.0).abs() < 1e-6);
        assert_eq!(DecayTime::Constant(3.0).average(&traj).unwrap(), 3.0);
    }

    fn qubit_model(t1: f64, t2: f64) -> DecoherenceModel {
        let inf = f64::INFINITY;
        DecoherenceModel {
            q1: QutritDecoherence::constant(t1, t2, inf, inf, inf),
            q2: QutritDecoherence::constant(inf, inf, inf, inf, inf),
            literal_dephasing: false,
        }
    }

    #[test]
    fn two_level_relaxation_and_dephasing() {
        // Uncoupled device: the idle frame is the bare rotating frame.
        let p = DeviceParams::default().uncoupled();
        let space = HilbertSpace::new(3, 2, 3).unwrap();
        let sim = Simulator::new(&p, space).unwrap();
        let (i0, i1) = (space.index(Label::new(0, 0, 0)), space.index(Label::new(1, 0, 0)));
        let mut rho = Array2::zeros((space.dim(), space.dim()));
        rho[[i0, i0]] = C64::new(0.5, 0.0);
        rho[[i1, i1]] = C64::new(0.5, 0.0);
        rho[[i0, i1]] = C64::new(0.5, 0.0);
        rho[[i1, i0]] = C64::new(0.5, 0.0);
        let t = 2000.0;

        let (t1, tphi) = (1.5, 0.8);
        let t2 = 1.0 / (0.5 / t1 + 1.0 / tphi);
        let out = sim.propagate_lindblad(&Schedule::empty(t), &qubit_model(t1, t2), &rho, 5.0).unwrap();
        let r = out.density().unwrap();
        let (t1n, t2n) = (t1 * 1e3, t2 * 1e3);
        assert!((r[[i1, i1]].re - 0.5 * (-t / t1n).exp()).abs() < 1e-6);
        assert!((r[[i0, i1]].norm() - 0.5 * (-t / t2n).exp()).abs() < 1e-6);
        assert!((trace(r).re - 1.0).abs() < 1e-10);
    }

    #[test]
    fn literal_prefactor_doubles_dephasing_rate() {
        let p = DeviceParams::default().uncoupled();
        let space = HilbertSpace::new(3, 2, 3).unwrap();
        let sim = Simulator::new(&p, space).unwrap();
        let (i0, i1) = (space.index(Label::new(0, 0, 0)), space.index(Label::new(1, 0, 0)));
        let mut rho = Array2::zeros((space.dim(), space.dim()));
        for &(a, b) in &[(i0, i0), (i1, i1), (i0, i1), (i1, i0)] {
            rho[[a, b]] = C64::new(0.5, 0.0);
        }
        let mut m = qubit_model(f64::INFINITY, 2.0);
        m.literal_dephasing = true;
        let t = 500.0;
        let r = sim.propagate_lindblad(&Schedule::empty(t), &m, &rho, 5.0).unwrap();
        let coh = r.density().unwrap()[[i0, i1]].norm();
        // Rate 2/T_phi = 2 * (1/T2) with T1 infinite.
        assert!((coh - 0.5 * (-2.0 * t / 2000.0).exp()).abs() < 1e-6);
    }

    #[test]
    fn closed_lindblad_matches_unitary_conjugation() {
        let (p, space) = small();
        let sim = Simulator::new(&p, space).unwrap().with_dt(0.05).unwrap();
        let pulse = MicrowavePulse {
            channel: Qutrit::Q2,
            subspace: Subspace::S01,
            carrier: sim.transition_frequency(Qutrit::Q2, Subspace::S01),
            duration: 40.0,
            amplitude: 0.05,
            phase: 0.0,
            drag_coeff: 0.5,
            start: 0.0,
        };
        let s = compose(
            vec![Event::Microwave(pulse), Event::Flux(FluxPulse::new(0.5, 15.0, 5.0, 50.0))],
            10.0,
        )
        .unwrap();
        let u = sim.propagate_unitary(&s).unwrap().unitary().unwrap().clone();
        let psi = Array1::from_shape_fn(space.dim(), |i| C64::new((i as f64).cos(), (i as f64 * 0.3).sin()));
        let psi = &psi / psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let rho = Array2::from_shape_fn((space.dim(), space.dim()), |(i, j)| psi[i] * psi[j].conj());
        let out = sim.propagate_lindblad(&s, &DecoherenceModel::closed(), &rho, 1.0).unwrap();
        let expect = u.dot(&rho).dot(&dagger(&u));
        assert!(frobenius(&(out.density().unwrap() - &expect)) < 1e-8);
        assert!(hermiticity_residual(out.density().unwrap()) < 1e-12);
    }

    #[test]
    fn lawson_rk4_is_fourth_order() {
        // Driven, damped qubit with strong coherent part.
        let h = Array2::from_shape_vec((2, 2), vec![C64::new(1.0, 0.0), C64::new(0.7, 0.2), C64::new(0.7, -0.2), C64::new(-1.0, 0.0)])
            .unwrap();
        let c = CollapseOperator { name: "a".into(), entries: vec![(0, 1, 0.8)] };
        let c2 = CollapseOperator { name: "n".into(), entries: vec![(1, 1, 0.5)] };
        let diss = Dissipator::new(&[c, c2], 2);
        let run = |n: usize| {
            let t = 2.0;
            let dt = t / n as f64;
            let u = expm_hermitian(&h, 0.5 * dt).unwrap();
            let ud = dagger(&u);
            let half = |r: &Array2<C64>| u.dot(r).dot(&ud);
            let mut rho = Array2::from_shape_vec((2, 2), vec![ONE, ZERO, ZERO, ZERO]).unwrap();
            for _ in 0..n {
                rho = lawson_rk4_step(&rho, dt, &half, &half, &|r| diss.apply(r));
            }
            rho
        };
        let reference = run(8 * 64);
        let e1 = frobenius(&(&run(16) - &reference));
        let e2 = frobenius(&(&run(32) - &reference));
        let order = (e1 / e2).log2();
        assert!((order - 4.0).abs() < 0.4, "observed order {order}");
    }

    #[test]
    fn reduce_merges_third_level() {
        let space = HilbertSpace::new(4, 2, 3).unwrap();
        let mut rho = Array2::zeros((space.dim(), space.dim()));
        let a = space.index(Label::new(3, 0, 1));
        let b = space.index(Label::new(0, 1, 0));
        rho[[a, a]] = C64::new(0.25, 0.0);
        rho[[b, b]] = C64::new(0.75, 0.0);
        let r = reduce_to_qutrits(space, &rho);
        assert!((r[[7, 7]].re - 0.25).abs() < 1e-15);
        assert!((r[[0, 0]].re - 0.75).abs() < 1e-15);
        assert!((trace(&r).re - 1.0).abs() < 1e-15);
    }
}
