//! Two-qutrit state and process tomography.
//!
//! Preparation: nine single-qutrit states per qutrit, 81 product inputs.
//! Measurement: nine single-qutrit rotations per qutrit followed by a
//! readout of the nine computational outcomes, 81 settings. States are
//! reconstructed by least squares over the 729 probabilities and projected
//! onto the physical set; processes are expressed as a chi matrix over
//! `E_m (x) E_n`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::{Inverse, SVD};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::Subspace;
use crate::error::{Result, SimError};
use crate::gates::{circuit_matrix, NativeOp};
use crate::linalg::{dagger, eigh_complex, frobenius, hermiticity_residual, kron, trace, C64, ONE, ZERO};

/// Condition number above which process inversion is refused.
pub const QPT_CONDITION_LIMIT: f64 = 1e8;

/// Condition number above which readout mitigation warns.
pub const MITIGATION_CONDITION_WARN: f64 = 1e6;

/// The nine single-qutrit operators `E_0 .. E_8`, `Tr(E_m^dag E_n) = 3 delta_mn`.
pub fn qutrit_basis() -> [Array2<C64>; 9] {
    let s = (1.5f64).sqrt();
    let m = |entries: &[(usize, usize, f64)], scale: f64| {
        let mut a = Array2::<C64>::zeros((3, 3));
        for &(r, c, v) in entries {
            a[[r, c]] = C64::new(scale * v, 0.0);
        }
        a
    };
    [
        m(&[(0, 0, 1.0), (2, 2, 1.0)], s),
        m(&[(0, 2, 1.0), (2, 0, 1.0)], s),
        m(&[(0, 2, -1.0), (2, 0, 1.0)], s),
        m(&[(0, 0, 1.0), (2, 2, -1.0)], s),
        m(&[(0, 1, 1.0), (1, 0, 1.0)], s),
        m(&[(0, 1, -1.0), (1, 0, 1.0)], s),
        m(&[(1, 2, 1.0), (2, 1, 1.0)], s),
        m(&[(1, 2, -1.0), (2, 1, 1.0)], s),
        m(&[(1, 1, 1.0)], 3f64.sqrt()),
    ]
}

/// Two-qutrit basis `B_{9 m + n} = E_m (x) E_n`.
pub fn two_qutrit_basis() -> Vec<Array2<C64>> {
    let e = qutrit_basis();
    let mut out = Vec::with_capacity(81);
    for a in &e {
        for b in &e {
            out.push(kron(a, b));
        }
    }
    out
}

/// 81x81 matrix whose columns are the row-major vectorised basis operators.
fn basis_columns() -> Array2<C64> {
    let b = two_qutrit_basis();
    Array2::from_shape_fn((81, 81), |(r, m)| b[m][[r / 9, r % 9]])
}

fn rot(subspace: Subspace, theta: f64, phi: f64) -> NativeOp {
    NativeOp::Rotation { subspace, theta, phi }
}

/// Preparation circuits (time order) for the nine input states
/// |0>, |1>, |2>, (0+1), (1+2), (0+2), (0-i1), (1-i2), (0-i2), all /sqrt2.
pub fn preparation_circuits() -> [Vec<NativeOp>; 9] {
    use Subspace::{S01, S12};
    [
        vec![],
        vec![rot(S01, PI, 0.0)],
        vec![rot(S01, PI, 0.0), rot(S12, PI, 0.0)],
        vec![rot(S01, FRAC_PI_2, FRAC_PI_2)],
        vec![rot(S01, PI, 0.0), rot(S12, FRAC_PI_2, FRAC_PI_2)],
        vec![rot(S01, FRAC_PI_2, FRAC_PI_2), rot(S12, PI, FRAC_PI_2)],
        vec![rot(S01, FRAC_PI_2, 0.0)],
        vec![rot(S01, PI, 0.0), rot(S12, FRAC_PI_2, 0.0)],
        vec![rot(S01, FRAC_PI_2, FRAC_PI_2), rot(S12, PI, 0.0)],
    ]
}

/// Measurement rotations (time order): I, X01/2, Y01/2, X01, X12/2, Y12/2,
/// and the three 01 rotations conjugated by a 12 pi pulse (-Y first, then Y).
pub fn rotation_circuits() -> [Vec<NativeOp>; 9] {
    use Subspace::{S01, S12};
    let conj = |inner: NativeOp| vec![rot(S12, PI, -FRAC_PI_2), inner, rot(S12, PI, FRAC_PI_2)];
    [
        vec![],
        vec![rot(S01, FRAC_PI_2, 0.0)],
        vec![rot(S01, FRAC_PI_2, FRAC_PI_2)],
        vec![rot(S01, PI, 0.0)],
        vec![rot(S12, FRAC_PI_2, 0.0)],
        vec![rot(S12, FRAC_PI_2, FRAC_PI_2)],
        conj(rot(S01, FRAC_PI_2, 0.0)),
        conj(rot(S01, FRAC_PI_2, FRAC_PI_2)),
        conj(rot(S01, PI, 0.0)),
    ]
}

/// Preparation states and measurement rotations for one qutrit. The
/// matrices may be non-unitary when they come from simulated pulses.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleQutritSet {
    pub preparations: Vec<Array1<C64>>,
    pub rotations: Vec<Array2<C64>>,
}

impl SingleQutritSet {
    pub fn ideal() -> Self {
        Self::from_circuit_matrices(
            preparation_circuits().iter().map(|c| circuit_matrix(c)).collect(),
            rotation_circuits().iter().map(|c| circuit_matrix(c)).collect(),
        )
    }

    /// Build from the 3x3 matrices of the preparation and rotation
    /// circuits; preparations act on |0>.
    pub fn from_circuit_matrices(preparations: Vec<Array2<C64>>, rotations: Vec<Array2<C64>>) -> Self {
        SingleQutritSet { preparations: preparations.iter().map(|u| u.column(0).to_owned()).collect(), rotations }
    }
}

/// Settings for both qutrits.
#[derive(Debug, Clone, PartialEq)]
pub struct TomographySettings {
    pub q1: SingleQutritSet,
    pub q2: SingleQutritSet,
}

impl TomographySettings {
    pub fn ideal() -> Self {
        TomographySettings { q1: SingleQutritSet::ideal(), q2: SingleQutritSet::ideal() }
    }

    /// The 81 two-qutrit input density matrices, index `9 p1 + p2`.
    pub fn input_states(&self) -> Vec<Array2<C64>> {
        let mut out = Vec::with_capacity(81);
        for a in &self.q1.preparations {
            for b in &self.q2.preparations {
                let psi = kron_vec(a, b);
                let rho = outer(&psi, &psi);
                let tr = trace(&rho).re;
                out.push(rho.mapv(|z| z / tr));
            }
        }
        out
    }

    /// The 81 two-qutrit rotations, index `9 r1 + r2`.
    pub fn rotations(&self) -> Vec<Array2<C64>> {
        let mut out = Vec::with_capacity(81);
        for a in &self.q1.rotations {
            for b in &self.q2.rotations {
                out.push(kron(a, b));
            }
        }
        out
    }
}

fn kron_vec(a: &Array1<C64>, b: &Array1<C64>) -> Array1<C64> {
    Array1::from_shape_fn(a.len() * b.len(), |k| a[k / b.len()] * b[k % b.len()])
}

fn outer(a: &Array1<C64>, b: &Array1<C64>) -> Array2<C64> {
    Array2::from_shape_fn((a.len(), b.len()), |(r, c)| a[r] * b[c].conj())
}

/// Outcome probabilities `<k| R rho R^dag |k>` for each rotation,
/// renormalised when the rotations are not exactly unitary.
pub fn measurement_probabilities(rho: &Array2<C64>, rotations: &[Array2<C64>]) -> Vec<[f64; 9]> {
    rotations
        .iter()
        .map(|r| {
            let out = r.dot(rho).dot(&dagger(r));
            let mut p: [f64; 9] = std::array::from_fn(|k| out[[k, k]].re.max(0.0));
            let s: f64 = p.iter().sum();
            if s > 0.0 {
                p.iter_mut().for_each(|x| *x /= s);
            }
            p
        })
        .collect()
}

/// Real orthonormal Hermitian basis of 9x9 matrices used to parameterise
/// the unknown state.
fn hermitian_basis() -> Vec<Array2<C64>> {
    let mut out = Vec::with_capacity(81);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for a in 0..9 {
        for b in 0..9 {
            let mut m = Array2::<C64>::zeros((9, 9));
            match a.cmp(&b) {
                std::cmp::Ordering::Equal => m[[a, a]] = ONE,
                std::cmp::Ordering::Less => {
                    m[[a, b]] = C64::new(h, 0.0);
                    m[[b, a]] = C64::new(h, 0.0);
                }
                std::cmp::Ordering::Greater => {
                    m[[a, b]] = C64::new(0.0, h);
                    m[[b, a]] = C64::new(0.0, -h);
                }
            }
            out.push(m);
        }
    }
    out
}

/// Linear-inversion state tomography for a fixed rotation set.
#[derive(Debug, Clone)]
pub struct StateTomography {
    basis: Vec<Array2<C64>>,
    pinv: Array2<f64>,
}

impl StateTomography {
    /// Precompute the pseudo-inverse of the 729x81 measurement map.
    pub fn new(rotations: &[Array2<C64>]) -> Result<Self> {
        let basis = hermitian_basis();
        let rows = rotations.len() * 9;
        let mut design = Array2::<f64>::zeros((rows, basis.len()));
        for (s, r) in rotations.iter().enumerate() {
            let rd = dagger(r);
            for (m, h) in basis.iter().enumerate() {
                let out = r.dot(h).dot(&rd);
                for k in 0..9 {
                    design[[9 * s + k, m]] = out[[k, k]].re;
                }
            }
        }
        let (u, sv, vt) = design.svd(true, true)?;
        let (u, vt) = (u.expect("requested U"), vt.expect("requested V^T"));
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if sv.len() < basis.len() || smin <= 1e-10 * smax {
            return Err(SimError::Reconstruction(format!(
                "measurement map is rank deficient (singular values {smin:e} .. {smax:e}); the rotation set is not informationally complete"
            )));
        }
        let n = basis.len();
        let mut pinv = Array2::<f64>::zeros((n, rows));
        for k in 0..n {
            let v = vt.row(k);
            let w = u.column(k);
            for i in 0..n {
                let vi = v[i] / sv[k];
                if vi == 0.0 {
                    continue;
                }
                for j in 0..rows {
                    pinv[[i, j]] += vi * w[j];
                }
            }
        }
        Ok(StateTomography { basis, pinv })
    }

    pub fn ideal() -> Result<Self> {
        Self::new(&TomographySettings::ideal().rotations())
    }

    /// Unconstrained least-squares estimate (Hermitian, possibly not PSD).
    pub fn linear_inversion(&self, probs: &[[f64; 9]]) -> Result<Array2<C64>> {
        if probs.len() * 9 != self.pinv.ncols() {
            return Err(SimError::InvalidDimension(format!(
                "expected {} settings, got {}",
                self.pinv.ncols() / 9,
                probs.len()
            )));
        }
        for (s, p) in probs.iter().enumerate() {
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-6 || p.iter().any(|x| !x.is_finite()) {
                return Err(SimError::InvalidParameter(format!("setting {s}: probabilities sum to {total}")));
            }
        }
        let y = Array1::from_iter(probs.iter().flat_map(|p| p.iter().copied()));
        let x = self.pinv.dot(&y);
        let mut rho = Array2::<C64>::zeros((9, 9));
        for (c, h) in x.iter().zip(&self.basis) {
            rho.scaled_add(C64::new(*c, 0.0), h);
        }
        Ok(rho)
    }

    /// Linear inversion followed by projection onto unit-trace PSD matrices.
    pub fn reconstruct(&self, probs: &[[f64; 9]]) -> Result<Array2<C64>> {
        project_to_density(&self.linear_inversion(probs)?)
    }
}

/// State tomography with the ideal rotation set.
pub fn qst(probs: &[[f64; 9]]) -> Result<Array2<C64>> {
    StateTomography::ideal()?.reconstruct(probs)
}

/// Euclidean projection of a vector onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Nearest (Frobenius) unit-trace positive semidefinite matrix.
pub fn project_to_density(rho: &Array2<C64>) -> Result<Array2<C64>> {
    let mut h = rho.clone();
    crate::linalg::symmetrize(&mut h);
    let (vals, vecs) = eigh_complex(&h)?;
    let p = project_simplex(vals.as_slice().expect("contiguous eigenvalues"));
    let n = h.nrows();
    let mut out = Array2::<C64>::zeros((n, n));
    for (k, w) in p.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let v = vecs.column(k);
        for r in 0..n {
            for c in 0..n {
                out[[r, c]] += v[r] * v[c].conj() * *w;
            }
        }
    }
    Ok(out)
}

/// A linear map on two-qutrit operators given by its images of the matrix
/// units, index `9 a + b` for `|a><b|`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub images: Vec<Array2<C64>>,
}

impl LinearMap {
    pub fn new(images: Vec<Array2<C64>>) -> Result<Self> {
        if images.len() != 81 || images.iter().any(|m| m.dim() != (9, 9)) {
            return Err(SimError::InvalidDimension("a two-qutrit map needs 81 images of shape 9x9".into()));
        }
        Ok(LinearMap { images })
    }

    pub fn from_unitary(u: &Array2<C64>) -> Result<Self> {
        if u.dim() != (9, 9) {
            return Err(SimError::InvalidDimension(format!("expected 9x9, got {:?}", u.dim())));
        }
        let ud = dagger(u);
        Self::new(
            (0..81)
                .map(|k| {
                    let (a, b) = (k / 9, k % 9);
                    outer(&u.column(a).to_owned(), &ud.row(b).mapv(|z| z.conj()))
                })
                .collect(),
        )
    }

    pub fn apply(&self, rho: &Array2<C64>) -> Array2<C64> {
        let mut out = Array2::<C64>::zeros((9, 9));
        for (k, img) in self.images.iter().enumerate() {
            let c = rho[[k / 9, k % 9]];
            if c != ZERO {
                out.scaled_add(c, img);
            }
        }
        out
    }

    /// Choi matrix `J[(i, a), (j, b)] = Phi(|a><b|)[i, j]`.
    pub fn choi(&self) -> Array2<C64> {
        Array2::from_shape_fn((81, 81), |(r, c)| {
            let (i, a, j, b) = (r / 9, r % 9, c / 9, c % 9);
            self.images[9 * a + b][[i, j]]
        })
    }
}

/// Process matrix over the basis `E_m (x) E_n`, normalised so that a
/// unitary process has unit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessMatrix {
    pub chi: Array2<C64>,
}

impl ProcessMatrix {
    pub fn from_choi(j: &Array2<C64>) -> Result<Self> {
        if j.dim() != (81, 81) {
            return Err(SimError::InvalidDimension(format!("Choi matrix must be 81x81, got {:?}", j.dim())));
        }
        let b = basis_columns();
        Ok(ProcessMatrix { chi: dagger(&b).dot(j).dot(&b).mapv(|z| z / 81.0) })
    }

    pub fn from_map(map: &LinearMap) -> Result<Self> {
        Self::from_choi(&map.choi())
    }

    /// `chi = u u^dag` with `u_m = Tr(B_m^dag U) / 9`.
    pub fn from_unitary(u: &Array2<C64>) -> Result<Self> {
        if u.dim() != (9, 9) {
            return Err(SimError::InvalidDimension(format!("expected 9x9, got {:?}", u.dim())));
        }
        let coef: Vec<C64> = two_qutrit_basis().iter().map(|b| trace(&dagger(b).dot(u)) / 9.0).collect();
        Ok(ProcessMatrix { chi: Array2::from_shape_fn((81, 81), |(m, n)| coef[m] * coef[n].conj()) })
    }

    pub fn choi(&self) -> Array2<C64> {
        let b = basis_columns();
        b.dot(&self.chi).dot(&dagger(&b))
    }

    /// `rho -> sum chi_mn B_m rho B_n^dag`, evaluated through the Choi matrix.
    pub fn apply(&self, rho: &Array2<C64>) -> Array2<C64> {
        let j = self.choi();
        Array2::from_shape_fn((9, 9), |(i, jj)| {
            let mut s = ZERO;
            for a in 0..9 {
                for b in 0..9 {
                    s += j[[9 * i + a, 9 * jj + b]] * rho[[a, b]];
                }
            }
            s
        })
    }

    /// `|| sum chi_mn B_n^dag B_m - I ||_F`.
    pub fn completeness_residual(&self) -> f64 {
        let basis = two_qutrit_basis();
        let mut s = Array2::<C64>::zeros((9, 9));
        for (m, bm) in basis.iter().enumerate() {
            for (n, bn) in basis.iter().enumerate() {
                let c = self.chi[[m, n]];
                if c.norm() > 1e-15 {
                    s.scaled_add(c, &dagger(bn).dot(bm));
                }
            }
        }
        frobenius(&(s - Array2::eye(9).mapv(|x: f64| C64::new(x, 0.0))))
    }

    pub fn hermitize(&mut self) {
        crate::linalg::symmetrize(&mut self.chi);
    }

    pub fn hermiticity_residual(&self) -> f64 {
        hermiticity_residual(&self.chi)
    }

    pub fn to_record(&self) -> MatrixRecord {
        MatrixRecord::new("E_m (x) E_n, m,n = 0..8, index 9 m + n", &self.chi)
    }
}

/// Process fidelity with clamping information.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub value: f64,
    /// Real part before clamping to [0, 1].
    pub raw: f64,
    pub clamped: bool,
}

/// `Re Tr(chi_exp chi_0)`, clamped to [0, 1].
pub fn process_fidelity(chi_exp: &ProcessMatrix, chi_0: &ProcessMatrix) -> Result<Fidelity> {
    if chi_exp.chi.dim() != chi_0.chi.dim() {
        return Err(SimError::InvalidDimension(format!(
            "process matrices have shapes {:?} and {:?}",
            chi_exp.chi.dim(),
            chi_0.chi.dim()
        )));
    }
    let raw = trace(&chi_exp.chi.dot(&chi_0.chi)).re;
    let value = raw.clamp(0.0, 1.0);
    Ok(Fidelity { value, raw, clamped: value != raw })
}

/// `Re <psi| rho |psi>`.
pub fn state_fidelity(rho: &Array2<C64>, psi: &Array1<C64>) -> Result<f64> {
    if rho.dim() != (psi.len(), psi.len()) {
        return Err(SimError::InvalidDimension(format!("rho {:?} vs state of length {}", rho.dim(), psi.len())));
    }
    let tr = trace(rho);
    if (tr - ONE).norm() > 1e-6 {
        return Err(SimError::InvalidParameter(format!("density matrix trace is {tr}")));
    }
    let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(SimError::InvalidParameter(format!("state norm squared is {norm}")));
    }
    let v = rho.dot(psi);
    Ok(psi.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum::<C64>().re)
}

/// Readout assignment matrix, `M[measured, prepared]`; each column is the
/// outcome distribution of one prepared basis state.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    m: Array2<f64>,
}

impl AssignmentMatrix {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        if m.dim() != (9, 9) {
            return Err(SimError::InvalidDimension(format!("assignment matrix must be 9x9, got {:?}", m.dim())));
        }
        if m.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(SimError::InvalidParameter("assignment entries must lie in [0, 1]".into()));
        }
        for (c, col) in m.axis_iter(Axis(1)).enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(SimError::InvalidParameter(format!("column {c} sums to {s}")));
            }
        }
        Ok(AssignmentMatrix { m })
    }

    pub fn identity() -> Self {
        AssignmentMatrix { m: Array2::eye(9) }
    }

    /// Independent single-qutrit confusion matrices (columns: prepared level).
    pub fn from_qutrits(q1: &Array2<f64>, q2: &Array2<f64>) -> Result<Self> {
        let mut m = Array2::<f64>::zeros((9, 9));
        for r in 0..9 {
            for c in 0..9 {
                m[[r, c]] = q1[[r / 3, c / 3]] * q2[[r % 3, c % 3]];
            }
        }
        Self::new(m)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.m
    }

    /// 2-norm condition number.
    pub fn condition_number(&self) -> Result<f64> {
        let (_, s, _) = self.m.svd(false, false)?;
        let max = s.iter().cloned().fold(0.0, f64::max);
        let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(if min == 0.0 { f64::INFINITY } else { max / min })
    }

    /// Measured distribution for true populations `p`.
    pub fn apply(&self, p: &[f64; 9]) -> [f64; 9] {
        let v = self.m.dot(&Array1::from(p.to_vec()));
        std::array::from_fn(|k| v[k])
    }
}

/// Output of [`mitigate_readout`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mitigated {
    pub probabilities: [f64; 9],
    /// Total negative mass removed before renormalising.
    pub clipped_mass: f64,
    pub condition_number: f64,
    /// Set when the condition number exceeds [`MITIGATION_CONDITION_WARN`].
    pub ill_conditioned: bool,
}

/// `M^{-1} P_m`, with negatives clipped and the result renormalised.
pub fn mitigate_readout(measured: &[f64; 9], m: &AssignmentMatrix) -> Result<Mitigated> {
    let condition_number = m.condition_number()?;
    if !condition_number.is_finite() {
        return Err(SimError::Singular("assignment matrix is not invertible".into()));
    }
    let inv = m.m.inv()?;
    let raw = inv.dot(&Array1::from(measured.to_vec()));
    let clipped_mass: f64 = raw.iter().filter(|x| **x < 0.0).map(|x| -x).sum();
    let pos: Vec<f64> = raw.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = pos.iter().sum();
    if total <= 0.0 {
        return Err(SimError::Reconstruction("mitigated distribution has no positive mass".into()));
    }
    Ok(Mitigated {
        probabilities: std::array::from_fn(|k| pos[k] / total),
        clipped_mass,
        condition_number,
        ill_conditioned: condition_number > MITIGATION_CONDITION_WARN,
    })
}

/// Replace each distribution by the frequencies of `shots` multinomial draws.
pub fn resample(probs: &[[f64; 9]], shots: usize, seed: u64) -> Result<Vec<[f64; 9]>> {
    if shots == 0 {
        return Err(SimError::InvalidParameter("shot count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    probs
        .iter()
        .map(|p| {
            let dist = WeightedIndex::new(p.iter().map(|x| x.max(0.0)))
                .map_err(|e| SimError::InvalidParameter(format!("cannot sample from {p:?}: {e}")))?;
            let mut counts = [0usize; 9];
            for _ in 0..shots {
                counts[dist.sample(&mut rng)] += 1;
            }
            Ok(counts.map(|c| c as f64 / shots as f64))
        })
        .collect()
}

/// How simulated measurements are degraded before reconstruction.
#[derive(Debug, Clone, Default)]
pub struct MeasurementModel {
    /// Prepared and rotated with these (possibly imperfect) settings;
    /// reconstruction always assumes the ideal ones.
    pub actual: Option<TomographySettings>,
    /// Readout confusion, applied and then mitigated.
    pub assignment: Option<AssignmentMatrix>,
    /// Multinomial resampling (shots, seed).
    pub shots: Option<(usize, u64)>,
}

impl MeasurementModel {
    fn settings(&self) -> TomographySettings {
        self.actual.clone().unwrap_or_else(TomographySettings::ideal)
    }

    /// Simulated, degraded and mitigated probabilities for one state.
    pub fn measure(&self, rho: &Array2<C64>, rotations: &[Array2<C64>]) -> Result<Vec<[f64; 9]>> {
        let mut probs = measurement_probabilities(rho, rotations);
        if let Some(a) = &self.assignment {
            probs = probs.iter().map(|p| a.apply(p)).collect();
        }
        if let Some((shots, seed)) = self.shots {
            probs = resample(&probs, shots, seed ^ (hash_matrix(rho)))?;
        }
        if let Some(a) = &self.assignment {
            probs = probs.iter().map(|p| mitigate_readout(p, a).map(|m| m.probabilities)).collect::<Result<_>>()?;
        }
        Ok(probs)
    }
}

fn hash_matrix(rho: &Array2<C64>) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for z in rho.iter() {
        z.re.to_bits().hash(&mut h);
        z.im.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Simulated state tomography of `rho` under a measurement model.
pub fn simulate_qst(rho: &Array2<C64>, model: &MeasurementModel) -> Result<Array2<C64>> {
    let settings = model.settings();
    let probs = model.measure(rho, &settings.rotations())?;
    StateTomography::ideal()?.reconstruct(&probs)
}

/// Process tomography of a linear oracle: prepare the 81 inputs, apply the
/// oracle, reconstruct each output by state tomography, invert the input
/// map and convert to chi. The oracle is spot-checked for linearity.
pub fn qpt<F>(mut oracle: F, model: &MeasurementModel) -> Result<ProcessMatrix>
where
    F: FnMut(&Array2<C64>) -> Result<Array2<C64>>,
{
    let actual = model.settings();
    let ideal = TomographySettings::ideal();
    let inputs_actual = actual.input_states();
    let inputs_ideal = ideal.input_states();
    let rotations = actual.rotations();
    let tomo = StateTomography::ideal()?;

    check_linearity(&mut oracle, &inputs_ideal[1], &inputs_ideal[41])?;

    let mut outputs = Vec::with_capacity(81);
    for rho in &inputs_actual {
        let out = oracle(rho)?;
        outputs.push(tomo.reconstruct(&model.measure(&out, &rotations)?)?);
    }

    // c[k, 9 a + b] = <a| rho_k |b>
    let c = Array2::from_shape_fn((81, 81), |(k, ab)| inputs_ideal[k][[ab / 9, ab % 9]]);
    let (_, sv, _) = c.svd(false, false)?;
    let cond = sv.iter().cloned().fold(0.0, f64::max) / sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(cond <= QPT_CONDITION_LIMIT) {
        return Err(SimError::Reconstruction(format!("input states are ill-conditioned (condition number {cond:e})")));
    }
    let cinv = c.inv()?;
    let images: Vec<Array2<C64>> = (0..81)
        .map(|ab| {
            let mut img = Array2::<C64>::zeros((9, 9));
            for (k, out) in outputs.iter().enumerate() {
                img.scaled_add(cinv[[ab, k]], out);
            }
            img
        })
        .collect();
    let mut chi = ProcessMatrix::from_map(&LinearMap::new(images)?)?;
    chi.hermitize();
    Ok(chi)
}

fn check_linearity<F>(oracle: &mut F, a: &Array2<C64>, b: &Array2<C64>) -> Result<()>
where
    F: FnMut(&Array2<C64>) -> Result<Array2<C64>>,
{
    let mix = (a + b).mapv(|z| z * 0.5);
    let lhs = oracle(&mix)?;
    let rhs = (oracle(a)? + oracle(b)?).mapv(|z| z * 0.5);
    let err = frobenius(&(lhs - rhs));
    if err > 1e-6 {
        return Err(SimError::InvalidParameter(format!("process oracle is not linear (spot-check error {err:e})")));
    }
    Ok(())
}

/// Serialisable complex matrix with basis metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub basis: String,
    pub real: Vec<Vec<f64>>,
    pub imag: Vec<Vec<f64>>,
}

impl MatrixRecord {
    pub fn new(basis: &str, m: &Array2<C64>) -> Self {
        MatrixRecord {
            basis: basis.to_string(),
            real: m.rows().into_iter().map(|r| r.iter().map(|z| z.re).collect()).collect(),
            imag: m.rows().into_iter().map(|r| r.iter().map(|z| z.im).collect()).collect(),
        }
    }

    pub fn density(m: &Array2<C64>) -> Self {
        Self::new("|ij>, index 3 i + j", m)
    }

    pub fn to_matrix(&self) -> Result<Array2<C64>> {
        let n = self.real.len();
        if self.imag.len() != n || self.real.iter().chain(&self.imag).any(|r| r.len() != n) {
            return Err(SimError::Parse("real and imaginary parts must be equal square arrays".into()));
        }
        Ok(Array2::from_shape_fn((n, n), |(r, c)| C64::new(self.real[r][c], self.imag[r][c])))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// CSV of `|m_rc|` with a `row` column and one column per matrix column.
pub fn write_abs_csv<W: Write>(m: &Array2<C64>, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["row".to_string()];
    header.extend((0..m.ncols()).map(|c| format!("c{c}")));
    wr.write_record(&header)?;
    for (r, row) in m.rows().into_iter().enumerate() {
        let mut rec = vec![r.to_string()];
        rec.extend(row.iter().map(|z| format!("{:.10e}", z.norm())));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::ideal_cphase;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn eye9() -> Array2<C64> {
        Array2::eye(9).mapv(|x: f64| C64::new(x, 0.0))
    }

    fn ket(k: usize) -> Array1<C64> {
        Array1::from_shape_fn(9, |i| if i == k { ONE } else { ZERO })
    }

    fn random_unitary(seed: u64) -> Array2<C64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = Array2::from_shape_fn((9, 9), |_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let h = (&h + &dagger(&h)).mapv(|z| z * 0.5);
        crate::linalg::expm_hermitian(&h, 2.0).unwrap()
    }

    fn random_state(seed: u64) -> Array2<C64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((9, 9), |_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let r = a.dot(&dagger(&a));
        let t = trace(&r);
        r.mapv(|z| z / t)
    }

    #[test]
    fn basis_is_orthogonal() {
        let e = qutrit_basis();
        for (m, a) in e.iter().enumerate() {
            for (n, b) in e.iter().enumerate() {
                let g = trace(&dagger(a).dot(b));
                let want = if m == n { 3.0 } else { 0.0 };
                assert!((g - C64::new(want, 0.0)).norm() < 1e-12, "E{m} E{n}: {g}");
            }
        }
    }

    #[test]
    fn preparation_states_match_their_labels() {
        let s = 0.5f64.sqrt();
        let want: [[C64; 3]; 9] = [
            [ONE, ZERO, ZERO],
            [ZERO, ONE, ZERO],
            [ZERO, ZERO, ONE],
            [C64::new(s, 0.0), C64::new(s, 0.0), ZERO],
            [ZERO, C64::new(s, 0.0), C64::new(s, 0.0)],
            [C64::new(s, 0.0), ZERO, C64::new(s, 0.0)],
            [C64::new(s, 0.0), C64::new(0.0, -s), ZERO],
            [ZERO, C64::new(s, 0.0), C64::new(0.0, -s)],
            [C64::new(s, 0.0), ZERO, C64::new(0.0, -s)],
        ];
        for (k, psi) in SingleQutritSet::ideal().preparations.iter().enumerate() {
            let overlap: C64 = psi.iter().zip(want[k].iter()).map(|(a, b)| b.conj() * a).sum();
            assert_abs_diff_eq!(overlap.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn qst_recovers_ground_state() {
        let rho = outer(&ket(0), &ket(0));
        let probs = measurement_probabilities(&rho, &TomographySettings::ideal().rotations());
        let est = qst(&probs).unwrap();
        assert!(frobenius(&(est - rho)) < 1e-8);
    }

    #[test]
    fn qst_recovers_epr_state() {
        let psi = crate::gates::epr_state();
        let probs = measurement_probabilities(&outer(&psi, &psi), &TomographySettings::ideal().rotations());
        let f = state_fidelity(&qst(&probs).unwrap(), &psi).unwrap();
        assert!(f > 1.0 - 1e-8, "{f}");
    }

    #[test]
    fn qst_of_uniform_outcomes_is_maximally_mixed() {
        let probs = vec![[1.0 / 9.0; 9]; 81];
        let est = qst(&probs).unwrap();
        assert!(frobenius(&(est - eye9().mapv(|z| z / 9.0))) < 1e-8);
    }

    #[test]
    fn incomplete_rotation_set_is_rejected() {
        let rot = vec![eye9(); 81];
        assert!(matches!(StateTomography::new(&rot), Err(SimError::Reconstruction(_))));
    }

    #[test]
    fn unitary_chi_has_unit_trace_and_purity() {
        let chi = ProcessMatrix::from_unitary(&ideal_cphase()).unwrap();
        assert_abs_diff_eq!(trace(&chi.chi).re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(process_fidelity(&chi, &chi).unwrap().value, 1.0, epsilon = 1e-12);
        assert!(chi.completeness_residual() < 1e-10);
    }

    #[test]
    fn identity_chi_lives_on_e0_and_e8() {
        let chi = ProcessMatrix::from_unitary(&eye9()).unwrap();
        // I = sqrt(2/3) E0 + E8 / sqrt(3) on each qutrit.
        let w = [2.0 / 3.0, 1.0 / 3.0];
        for (a, wa) in [0usize, 8].iter().zip(w) {
            for (b, wb) in [0usize, 8].iter().zip(w) {
                let m = 9 * a + b;
                assert_abs_diff_eq!(chi.chi[[m, m]].re, wa * wb, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(chi.chi[[0, 0]].re, 4.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn choi_and_unitary_routes_agree() {
        let u = random_unitary(3);
        let a = ProcessMatrix::from_unitary(&u).unwrap();
        let b = ProcessMatrix::from_map(&LinearMap::from_unitary(&u).unwrap()).unwrap();
        assert!(frobenius(&(&a.chi - &b.chi)) < 1e-10);
    }

    #[test]
    fn depolarizing_chi_is_uniform() {
        let images = (0..81).map(|k| if k / 9 == k % 9 { eye9().mapv(|z| z / 9.0) } else { Array2::zeros((9, 9)) }).collect();
        let chi = ProcessMatrix::from_map(&LinearMap::new(images).unwrap()).unwrap();
        let want = Array2::<C64>::eye(81).mapv(|z| z / 81.0);
        assert!(frobenius(&(&chi.chi - &want)) < 1e-12);
        let f = process_fidelity(&chi, &ProcessMatrix::from_unitary(&random_unitary(5)).unwrap()).unwrap();
        assert_abs_diff_eq!(f.value, 1.0 / 81.0, epsilon = 1e-12);
    }

    #[test]
    fn qpt_of_ideal_cphase_matches_analytic_chi() {
        let map = LinearMap::from_unitary(&ideal_cphase()).unwrap();
        let chi = qpt(|r| Ok(map.apply(r)), &MeasurementModel::default()).unwrap();
        let f = process_fidelity(&chi, &ProcessMatrix::from_unitary(&ideal_cphase()).unwrap()).unwrap();
        assert!(f.value > 1.0 - 1e-6, "{f:?}");
        assert!(chi.completeness_residual() < 1e-6);
    }

    #[test]
    fn qpt_round_trip_on_random_unitaries() {
        for seed in 0..20 {
            let map = LinearMap::from_unitary(&random_unitary(100 + seed)).unwrap();
            let chi = qpt(|r| Ok(map.apply(r)), &MeasurementModel::default()).unwrap();
            for s in 0..50 {
                let rho = random_state(1000 * seed + s);
                assert!(frobenius(&(chi.apply(&rho) - map.apply(&rho))) < 1e-6);
            }
        }
    }

    #[test]
    fn nonlinear_oracle_is_rejected() {
        let r = qpt(|r| Ok(r.dot(r)), &MeasurementModel::default());
        assert!(matches!(r, Err(SimError::InvalidParameter(_))));
    }

    #[test]
    fn mitigation_inverts_symmetric_confusion() {
        let mut m = Array2::<f64>::eye(9);
        m[[0, 0]] = 0.99;
        m[[1, 1]] = 0.99;
        m[[1, 0]] = 0.01;
        m[[0, 1]] = 0.01;
        let a = AssignmentMatrix::new(m).unwrap();
        let p = [0.3, 0.2, 0.1, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05];
        let out = mitigate_readout(&a.apply(&p), &a).unwrap();
        for (got, want) in out.probabilities.iter().zip(p) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-10);
        }
        assert_eq!(out.clipped_mass, 0.0);
        let same = mitigate_readout(&p, &AssignmentMatrix::identity()).unwrap();
        assert_eq!(same.probabilities, p);
    }

    #[test]
    fn mitigation_clips_outside_the_simplex() {
        let mut m = Array2::<f64>::eye(9);
        m[[0, 0]] = 0.9;
        m[[1, 0]] = 0.1;
        let a = AssignmentMatrix::new(m).unwrap();
        let measured = [0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut skewed = measured;
        skewed[0] = 0.0;
        let out = mitigate_readout(&skewed, &a).unwrap();
        assert!(out.probabilities.iter().all(|x| *x >= 0.0));
        assert_abs_diff_eq!(out.probabilities.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let measured = [0.01, 0.49, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let out = mitigate_readout(&measured, &a).unwrap();
        assert_eq!(out.clipped_mass, 0.0);
        let bad = [0.0, 0.3, 0.7, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut m2 = Array2::<f64>::eye(9);
        m2[[0, 1]] = 0.2;
        m2[[1, 1]] = 0.8;
        let out = mitigate_readout(&bad, &AssignmentMatrix::new(m2).unwrap()).unwrap();
        assert!(out.clipped_mass > 0.0);
        assert!(out.probabilities.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn assignment_rejects_non_stochastic_columns() {
        let mut m = Array2::<f64>::eye(9);
        m[[1, 0]] = 0.1;
        assert!(AssignmentMatrix::new(m).is_err());
    }

    #[test]
    fn resampling_is_seeded() {
        let p = vec![[1.0 / 9.0; 9]; 3];
        let a = resample(&p, 1000, 7).unwrap();
        assert_eq!(a, resample(&p, 1000, 7).unwrap());
        for row in &a {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn records_round_trip_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rho.json");
        let rho = random_state(9);
        MatrixRecord::density(&rho).save_json(&path).unwrap();
        let back = MatrixRecord::load_json(&path).unwrap().to_matrix().unwrap();
        assert!(frobenius(&(back - &rho)) < 1e-15);
        let mut buf = Vec::new();
        write_abs_csv(&rho, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("row,c0,c1"));
        assert_eq!(text.lines().count(), 10);
    }

    proptest! {
        #[test]
        fn qst_inverts_the_forward_model(seed in 0u64..10_000) {
            let rho = random_state(seed);
            let probs = measurement_probabilities(&rho, &TomographySettings::ideal().rotations());
            let est = qst(&probs).unwrap();
            prop_assert!(frobenius(&(est - &rho)) < 1e-8);
        }

        #[test]
        fn projection_yields_a_density_matrix(seed in 0u64..10_000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((9, 9), |_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let p = project_to_density(&(&a + &dagger(&a))).unwrap();
            prop_assert!((trace(&p) - ONE).norm() < 1e-10);
            prop_assert!(hermiticity_residual(&p) < 1e-12);
            let (vals, _) = eigh_complex(&p).unwrap();
            prop_assert!(vals.iter().all(|v| *v > -1e-12));
        }

        #[test]
        fn fidelity_is_invariant_under_joint_rotation(seed in 0u64..1000) {
            let a = ProcessMatrix::from_unitary(&random_unitary(seed)).unwrap();
            let b = ProcessMatrix::from_unitary(&random_unitary(seed + 7)).unwrap();
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Array2::from_shape_fn((81, 81), |_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let w = crate::linalg::expm_hermitian(&(&h + &dagger(&h)), 0.3).unwrap();
            let rot = |p: &ProcessMatrix| ProcessMatrix { chi: w.dot(&p.chi).dot(&dagger(&w)) };
            let f0 = process_fidelity(&a, &b).unwrap().raw;
            let f1 = process_fidelity(&rot(&a), &rot(&b)).unwrap().raw;
            prop_assert!((f0 - f1).abs() < 1e-10);
        }
    }
}
