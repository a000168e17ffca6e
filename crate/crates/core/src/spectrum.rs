//! Eigen-analysis of the static Hamiltonian across coupler frequency.
//!
//! Dressed eigenstates are labelled by the bare product state they
//! resemble most, using a maximum-weight bipartite matching so that no two
//! eigenvectors ever share a label. Along a sweep, labels are carried by
//! overlap with reference vectors from a lattice of coupler frequencies
//! spaced `step` apart, starting at the sweet spot. Crossings whose width in
//! coupler frequency is much larger than `step` are followed adiabatically;
//! narrow stray crossings (a few MHz) are stepped over diabatically. A
//! reference vector is only refreshed when its new match is unambiguous, so
//! a lattice point that lands in the middle of a narrow crossing does not
//! flip the labels downstream.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use ndarray::{Array1, Array2, ArrayView1};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::control::FluxPulse;
use crate::error::{Result, SimError};
use crate::linalg::{eigh_blocked, to_complex, BlockStructure, C64};
use crate::model::{check_coupler_freq, DeviceParams, HamiltonianParts, HilbertSpace, Label};
use crate::numerics::golden_min;

/// Converts an angular frequency in rad/ns to MHz.
pub fn rad_per_ns_to_mhz(x: f64) -> f64 {
    x / TAU * 1e3
}

/// Overlap below which a match is considered ambiguous and does not refresh
/// the tracking reference.
const CLEAN_OVERLAP: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct LabeledSpectrum {
    pub omega_c: f64,
    /// Ascending, rad/ns.
    pub eigenvalues: Array1<f64>,
    /// Real orthonormal columns (the Hamiltonian is real symmetric).
    pub eigenvectors: Array2<f64>,
    /// Label of each eigenvector column.
    pub labels: Vec<Label>,
    /// |<bare label|dressed>|^2 per column.
    pub overlap_quality: Vec<f64>,
    /// Overlap of each column with the reference it was matched against.
    pub match_overlap: Vec<f64>,
    /// Pairs of labels whose candidate overlaps were equal within 1e-12.
    pub ties: Vec<(Label, Label)>,
    column_of: Vec<usize>,
    space: HilbertSpace,
}

impl LabeledSpectrum {
    pub fn space(&self) -> HilbertSpace {
        self.space
    }

    pub fn column(&self, l: Label) -> Result<usize> {
        let idx = self.space.checked_index(l)?;
        Ok(self.column_of[idx])
    }

    /// Dressed energy in rad/ns.
    pub fn energy(&self, l: Label) -> Result<f64> {
        Ok(self.eigenvalues[self.column(l)?])
    }

    pub fn vector(&self, l: Label) -> Result<ArrayView1<'_, f64>> {
        Ok(self.eigenvectors.column(self.column(l)?))
    }

    /// Eigenvectors reordered so that column `space.index(label)` holds the
    /// dressed state carrying that label.
    pub fn dressed_basis(&self) -> Array2<f64> {
        let n = self.space.dim();
        let mut v = Array2::zeros((n, n));
        for idx in 0..n {
            v.column_mut(idx).assign(&self.eigenvectors.column(self.column_of[idx]));
        }
        v
    }

    /// Energies ordered by bare-label index.
    pub fn energies_by_label(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.space.dim(), |idx| self.eigenvalues[self.column_of[idx]])
    }

    pub fn eigenvectors_complex(&self) -> Array2<C64> {
        to_complex(&self.eigenvectors)
    }
}

/// Assign labels to eigenvectors by maximum total overlap with reference
/// vectors. `refs` has one column per bare-label index.
fn assign_labels(
    omega_c: f64,
    values: Array1<f64>,
    vectors: Array2<f64>,
    refs: &Array2<f64>,
    space: HilbertSpace,
) -> LabeledSpectrum {
    let n = space.dim();
    let overlaps = vectors.t().dot(refs).mapv(|x| x * x);
    let scaled = Matrix::from_fn(n, n, |(k, l)| (overlaps[[k, l]] * 1e12).round() as i64);
    let (_, mut assignment) = kuhn_munkres(&scaled);
    let mut ties = Vec::new();
    // Equal-weight alternatives go to the lower bare index for the lower
    // eigenvalue column.
    for k1 in 0..n {
        for k2 in (k1 + 1)..n {
            let (l1, l2) = (assignment[k1], assignment[k2]);
            let same1 = (overlaps[[k1, l1]] - overlaps[[k1, l2]]).abs() < 1e-12;
            let same2 = (overlaps[[k2, l2]] - overlaps[[k2, l1]]).abs() < 1e-12;
            if same1 && same2 && overlaps[[k1, l1]] > 1e-12 {
                ties.push((space.label(l1.min(l2)), space.label(l1.max(l2))));
                if l2 < l1 {
                    assignment.swap(k1, k2);
                }
            }
        }
    }
    let mut column_of = vec![0; n];
    let mut labels = Vec::with_capacity(n);
    let mut overlap_quality = Vec::with_capacity(n);
    let mut match_overlap = Vec::with_capacity(n);
    for (k, &l) in assignment.iter().enumerate() {
        column_of[l] = k;
        labels.push(space.label(l));
        overlap_quality.push(vectors[[l, k]] * vectors[[l, k]]);
        match_overlap.push(overlaps[[k, l]]);
    }
    LabeledSpectrum {
        omega_c,
        eigenvalues: values,
        eigenvectors: vectors,
        labels,
        overlap_quality,
        match_overlap,
        ties,
        column_of,
        space,
    }
}

/// Label the eigenpairs of a real symmetric Hamiltonian. Without `previous`
/// the reference is the bare basis; with it, the previous eigenvectors.
pub fn eigensolve_labeled(
    h: &Array2<f64>,
    space: HilbertSpace,
    previous: Option<&LabeledSpectrum>,
) -> Result<LabeledSpectrum> {
    eigensolve_labeled_at(h, space, previous, f64::NAN, &BlockStructure::single(space.dim()))
}

fn eigensolve_labeled_at(
    h: &Array2<f64>,
    space: HilbertSpace,
    previous: Option<&LabeledSpectrum>,
    omega_c: f64,
    blocks: &BlockStructure,
) -> Result<LabeledSpectrum> {
    let (values, vectors) = eigh_blocked(h, blocks)?;
    let refs = match previous {
        Some(p) => p.dressed_basis(),
        None => Array2::eye(space.dim()),
    };
    Ok(assign_labels(omega_c, values, vectors, &refs, space))
}

/// How labels are carried across coupler frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LabelMode {
    /// Overlap continuation from the sweet spot.
    #[default]
    Adiabatic,
    /// Overlap with the bare product basis at every point.
    Diabatic,
}

/// Lazily extended chain of reference vectors for adiabatic labelling.
#[derive(Debug, Clone)]
pub struct SpectrumTracker {
    pub parts: HamiltonianParts,
    pub params: DeviceParams,
    pub mode: LabelMode,
    /// Lattice spacing in GHz.
    pub step: f64,
    chain: Vec<Array2<f64>>,
    cache: BTreeMap<u64, LabeledSpectrum>,
}

impl SpectrumTracker {
    pub const DEFAULT_STEP: f64 = 0.01;

    pub fn new(params: &DeviceParams, space: HilbertSpace, mode: LabelMode) -> Result<Self> {
        Self::with_step(params, space, mode, Self::DEFAULT_STEP)
    }

    pub fn with_step(params: &DeviceParams, space: HilbertSpace, mode: LabelMode, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(SimError::InvalidParameter("tracking step must be positive".into()));
        }
        let parts = HamiltonianParts::new(params, space)?;
        Ok(SpectrumTracker {
            parts,
            params: *params,
            mode,
            step,
            chain: Vec::new(),
            cache: BTreeMap::new(),
        })
    }

    pub fn space(&self) -> HilbertSpace {
        self.parts.space
    }

    fn solve(&self, omega_c: f64, refs: &Array2<f64>) -> Result<LabeledSpectrum> {
        let (values, vectors) = eigh_blocked(&self.parts.at(omega_c), &self.parts.blocks)?;
        Ok(assign_labels(omega_c, values, vectors, refs, self.space()))
    }

    fn lattice_point(&self, k: usize) -> f64 {
        self.params.omega_c_max - k as f64 * self.step
    }

    fn extend_chain(&mut self, k: usize) -> Result<()> {
        if self.chain.is_empty() {
            let s = self.solve(self.lattice_point(0), &Array2::eye(self.space().dim()))?;
            self.chain.push(s.dressed_basis());
        }
        while self.chain.len() <= k {
            let next = self.chain.len();
            let prev = self.chain.last().unwrap().clone();
            let s = self.solve(self.lattice_point(next), &prev)?;
            let mut refs = prev;
            let fresh = s.dressed_basis();
            for idx in 0..self.space().dim() {
                if s.match_overlap[s.column_of[idx]] >= CLEAN_OVERLAP {
                    refs.column_mut(idx).assign(&fresh.column(idx));
                }
            }
            self.chain.push(refs);
        }
        Ok(())
    }

    /// Labelled spectrum at `omega_c` (GHz).
    pub fn at(&mut self, omega_c: f64) -> Result<LabeledSpectrum> {
        check_coupler_freq(&self.params, omega_c)?;
        let key = omega_c.to_bits();
        if let Some(s) = self.cache.get(&key) {
            return Ok(s.clone());
        }
        let s = match self.mode {
            LabelMode::Diabatic => self.solve(omega_c, &Array2::eye(self.space().dim()))?,
            LabelMode::Adiabatic => {
                let k = ((self.params.omega_c_max - omega_c) / self.step).round().max(0.0) as usize;
                self.extend_chain(k)?;
                let refs = self.chain[k].clone();
                self.solve(omega_c, &refs)?
            }
        };
        if self.cache.len() > 4096 {
            self.cache.clear();
        }
        self.cache.insert(key, s.clone());
        Ok(s)
    }
}

/// Cross-Kerr coefficient chi_i0j in MHz from a labelled spectrum.
pub fn chi_from_spectrum(s: &LabeledSpectrum, i: usize, j: usize) -> Result<f64> {
    let e = |l: Label| {
        s.energy(l).map_err(|e| SimError::Labeling { label: l.to_string(), reason: e.to_string() })
    };
    let chi = e(Label::new(i, 0, j))? - e(Label::new(i, 0, 0))? - e(Label::new(0, 0, j))? + e(Label::new(0, 0, 0))?;
    Ok(rad_per_ns_to_mhz(chi))
}

/// chi_i0j = (E_i0j - E_i00 - E_00j + E_000) / 2pi in MHz at `omega_c`,
/// with labels carried adiabatically from the sweet spot.
pub fn cross_kerr(params: &DeviceParams, omega_c: f64, i: usize, j: usize, space: HilbertSpace) -> Result<f64> {
    if !(1..=2).contains(&i) || !(1..=2).contains(&j) {
        return Err(SimError::InvalidParameter(format!("chi indices must be 1 or 2, got ({i},{j})")));
    }
    let mut tracker = SpectrumTracker::new(params, space, LabelMode::Adiabatic)?;
    chi_from_spectrum(&tracker.at(omega_c)?, i, j)
}

/// The four cross-Kerr coefficients on a coupler-frequency grid, MHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiTable {
    pub omega_c: Vec<f64>,
    pub chi101: Vec<f64>,
    pub chi102: Vec<f64>,
    pub chi201: Vec<f64>,
    pub chi202: Vec<f64>,
}

impl ChiTable {
    pub fn columns(&self) -> [(&'static str, &Vec<f64>); 4] {
        [
            ("chi101_MHz", &self.chi101),
            ("chi102_MHz", &self.chi102),
            ("chi201_MHz", &self.chi201),
            ("chi202_MHz", &self.chi202),
        ]
    }

    /// Largest |chi| of any of the four at each grid point.
    pub fn max_abs(&self) -> Vec<f64> {
        (0..self.omega_c.len())
            .map(|k| self.columns().iter().map(|(_, c)| c[k].abs()).fold(0.0, f64::max))
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["omegaC_GHz"];
        header.extend(self.columns().iter().map(|(n, _)| *n));
        wr.write_record(&header)?;
        for k in 0..self.omega_c.len() {
            let mut row = vec![format!("{}", self.omega_c[k])];
            row.extend(self.columns().iter().map(|(_, c)| format!("{}", c[k])));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn chi_sweep(params: &DeviceParams, grid: &[f64], space: HilbertSpace) -> Result<ChiTable> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(SimError::InvalidParameter("chi sweep grid must be sorted ascending".into()));
    }
    let mut tracker = SpectrumTracker::new(params, space, LabelMode::Adiabatic)?;
    let mut t = ChiTable { omega_c: vec![], chi101: vec![], chi102: vec![], chi201: vec![], chi202: vec![] };
    for &w in grid {
        let s = tracker.at(w)?;
        t.omega_c.push(w);
        t.chi101.push(chi_from_spectrum(&s, 1, 1)?);
        t.chi102.push(chi_from_spectrum(&s, 1, 2)?);
        t.chi201.push(chi_from_spectrum(&s, 2, 1)?);
        t.chi202.push(chi_from_spectrum(&s, 2, 2)?);
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub gap_mhz: f64,
    pub omega_c_ghz: f64,
}

/// Minimum of |E_a - E_b| / 2pi over `[lo, hi]` GHz: a coarse scan at
/// `scan_step` followed by golden-section refinement around the best point.
pub fn minimum_gap(
    tracker: &mut SpectrumTracker,
    a: Label,
    b: Label,
    range: (f64, f64),
    scan_step: f64,
) -> Result<GapResult> {
    let space = tracker.space();
    space.checked_index(a)?;
    space.checked_index(b)?;
    let (lo, hi) = range;
    if !(lo < hi) || !(scan_step > 0.0) {
        return Err(SimError::InvalidParameter("gap scan needs lo < hi and a positive step".into()));
    }
    let mut last_good = hi;
    let gap_at = |tr: &mut SpectrumTracker, w: f64, last_good: &mut f64| -> Result<f64> {
        let s = tr.at(w)?;
        let (ca, cb) = (s.column(a)?, s.column(b)?);
        if tr.mode == LabelMode::Adiabatic && (s.match_overlap[ca] < 0.25 || s.match_overlap[cb] < 0.25) {
            return Err(SimError::TrackingLost { last_good_ghz: *last_good });
        }
        *last_good = w;
        Ok((s.eigenvalues[ca] - s.eigenvalues[cb]).abs())
    };
    let n = ((hi - lo) / scan_step).ceil() as usize;
    let mut best = (f64::INFINITY, hi);
    for k in 0..=n {
        let w = (hi - k as f64 * scan_step).max(lo);
        let g = gap_at(tracker, w, &mut last_good)?;
        if g < best.0 {
            best = (g, w);
        }
    }
    let a_lo = (best.1 - scan_step).max(lo);
    let a_hi = (best.1 + scan_step).min(hi);
    let (w, g) = golden_min(a_lo, a_hi, 1e-7, 200, |w| gap_at(tracker, w, &mut last_good))?;
    let (g, w) = if g < best.0 { (g, w) } else { best };
    Ok(GapResult { gap_mhz: rad_per_ns_to_mhz(g), omega_c_ghz: w })
}

/// Adiabaticity beta_mn = |<m| dH/dt |n>| / (E_m - E_n)^2 at time `t` of a
/// flux pulse, with dH/dt from a central difference of the coupler
/// frequency (step 1e-3 ns).
pub fn adiabaticity_metric(
    tracker: &mut SpectrumTracker,
    pulse: &FluxPulse,
    m: Label,
    n: Label,
    t: f64,
) -> Result<f64> {
    if m == n {
        return Err(SimError::InvalidParameter("adiabaticity needs two distinct states".into()));
    }
    let fm = tracker.params.flux_map;
    let freq = |time: f64| fm.frequency(fm.idle_bias() + pulse.envelope(time));
    let h = 1e-3;
    let domega = (freq(t + h)? - freq(t - h)?) / (2.0 * h);
    let s = tracker.at(freq(t)?)?;
    let (vm, vn) = (s.vector(m)?, s.vector(n)?);
    let gap = s.energy(m)? - s.energy(n)?;
    if gap.abs() < 1e-6 {
        return Err(SimError::Divergence { m: m.to_string(), n: n.to_string(), gap });
    }
    let nc = &tracker.parts.coupler_number;
    let element: f64 = (0..vm.len()).map(|k| vm[k] * vn[k] * nc[k]).sum::<f64>() * domega;
    Ok(element.abs() / (gap * gap))
}

/// Maximum of beta_mn over `samples` evenly spaced times of the pulse.
pub fn max_adiabaticity(
    tracker: &mut SpectrumTracker,
    pulse: &FluxPulse,
    m: Label,
    n: Label,
    samples: usize,
) -> Result<(f64, f64)> {
    let (t0, t1) = (pulse.start, pulse.end());
    let mut best = (0.0, t0);
    for k in 0..=samples {
        let t = t0 + (t1 - t0) * k as f64 / samples as f64;
        let b = adiabaticity_metric(tracker, pulse, m, n, t)?;
        if b > best.0 {
            best = (b, t);
        }
    }
    Ok(best)
}

/// Two-path Raman estimate of the stray |002>-|110> exchange, MHz:
/// g12 sqrt2 g2c / D21 + g2c sqrt2 g12 / (-(D21 + alpha2)), D21 = omega2 - omega1.
pub fn sw_stray_coupling(params: &DeviceParams) -> Result<f64> {
    let d21 = params.omega2 - params.omega1;
    let d2 = d21 + params.alpha2;
    if d21.abs() < 1e-12 || d2.abs() < 1e-12 {
        return Err(SimError::Singular(format!(
            "vanishing detuning in stray-coupling estimate: D21 = {d21}, D21 + alpha2 = {d2}"
        )));
    }
    let s2 = 2f64.sqrt();
    let g = params.g12 * s2 * params.g2c / d21 + params.g2c * s2 * params.g12 / (-d2);
    Ok(g * 1e3)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> (DeviceParams, HilbertSpace) {
        (DeviceParams::default(), HilbertSpace::default())
    }

    #[test]
    fn uncoupled_labels_are_bare() {
        let (p, space) = defaults();
        let parts = HamiltonianParts::new(&p.uncoupled(), space).unwrap();
        let s = eigensolve_labeled(&parts.at(7.0), space, None).unwrap();
        assert!(s.overlap_quality.iter().all(|&q| (q - 1.0).abs() < 1e-12));
        for (k, l) in s.labels.iter().enumerate() {
            assert!((s.eigenvectors[[space.index(*l), k]].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_are_a_permutation() {
        let (p, space) = defaults();
        let mut tr = SpectrumTracker::new(&p, space, LabelMode::Adiabatic).unwrap();
        let s = tr.at(6.7).unwrap();
        let mut seen = s.labels.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), space.dim());
    }

    #[test]
    fn dispersive_101_is_nearly_bare() {
        let (p, space) = defaults();
        let mut tr = SpectrumTracker::new(&p, space, LabelMode::Adiabatic).unwrap();
        let s = tr.at(7.64).unwrap();
        let c = s.column(Label::new(1, 0, 1)).unwrap();
        assert!(s.overlap_quality[c] > 0.95);
    }

    #[test]
    fn eigen_residual_and_trace() {
        let (p, space) = defaults();
        let mut tr = SpectrumTracker::new(&p, space, LabelMode::Adiabatic).unwrap();
        let h = tr.parts.at(6.9);
        let s = tr.at(6.9).unwrap();
        let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..space.dim() {
            let v = s.eigenvectors.column(k);
            let r = h.dot(&v) - &v.mapv(|x| x * s.eigenvalues[k]);
            assert!(r.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-9 * norm);
        }
        let tr_h = tr.parts.trace_at(6.9);
        assert!((s.eigenvalues.sum() - tr_h).abs() < 1e-8 * tr_h.abs());
    }

    #[test]
    fn chi_vanishes_without_coupling() {
        let (p, space) = defaults();
        for (i, j) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            let c = cross_kerr(&p.uncoupled(), 6.9, i, j, space).unwrap();
            assert!(c.abs() < 1e-9, "chi{i}0{j} = {c}");
        }
    }

    #[test]
    fn chi_mirror_symmetry() {
        let (p, space) = defaults();
        let a = cross_kerr(&p, 7.2, 1, 2, space).unwrap();
        let b = cross_kerr(&p.mirrored(), 7.2, 2, 1, space).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1e-3));
    }

    #[test]
    fn sweet_spot_chi102_is_order_100khz() {
        let (p, space) = defaults();
        let c = cross_kerr(&p, 7.64, 1, 2, space).unwrap().abs();
        assert!(c > 0.01 && c < 1.0, "chi102 = {c} MHz");
    }

    #[test]
    fn singleton_sweep_matches_cross_kerr() {
        let (p, space) = defaults();
        let t = chi_sweep(&p, &[7.64], space).unwrap();
        assert_eq!(t.omega_c.len(), 1);
        let c = cross_kerr(&p, 7.64, 2, 2, space).unwrap();
        assert!((t.chi202[0] - c).abs() < 1e-12);
    }

    #[test]
    fn stray_coupling_formula() {
        let p = DeviceParams::default();
        let d21 = 6.725 - 6.074;
        let expected = (0.005 * 2f64.sqrt() * 0.1065 / d21 - 0.1065 * 2f64.sqrt() * 0.005 / (d21 - 0.236)) * 1e3;
        assert!((sw_stray_coupling(&p).unwrap() - expected).abs() < 1e-12);
        assert_eq!(sw_stray_coupling(&DeviceParams { g12: 0.0, ..p }).unwrap(), 0.0);
        let degenerate = DeviceParams { omega2: p.omega1, ..p };
        assert!(sw_stray_coupling(&degenerate).is_err());
    }

    #[test]
    fn flat_top_has_zero_adiabaticity() {
        let (p, space) = defaults();
        let mut tr = SpectrumTracker::new(&p, space, LabelMode::Adiabatic).unwrap();
        let pulse = FluxPulse { v_max: 0.3, tau_edge: 50.0, tau_flat: 20.0, start: 0.0, literal_edges: false };
        let b = adiabaticity_metric(&mut tr, &pulse, Label::new(1, 0, 1), Label::new(1, 1, 0), 60.0).unwrap();
        assert!(b < 1e-12);
    }
}
