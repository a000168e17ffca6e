//! Truncated three-mode Hilbert space, ladder operators, the static
//! Hamiltonian of two qutrits coupled through a tunable coupler, and the
//! flux-bias to coupler-frequency map.
//!
//! Configuration values are ordinary frequencies in GHz. Every Hamiltonian
//! returned here is in angular units (rad/ns); the factor 2*pi is applied in
//! exactly one place, [`HamiltonianParts::new`].

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::linalg::{BlockStructure, C64};

/// Coefficients of the fitted map `A * sqrt(cos(B * (bias + phi0))) + C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxMap {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub phi0: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl Default for FluxMap {
    fn default() -> Self {
        FluxMap { a: 7.95, b: 1.71, phi0: 0.125, c: -0.31 }
    }
}

impl FluxMap {
    /// Bias at which the coupler sits at its maximum (the sweet spot).
    pub fn idle_bias(&self) -> f64 {
        -self.phi0
    }

    pub fn frequency(&self, bias: f64) -> Result<f64> {
        let arg = self.b * (bias + self.phi0);
        if !arg.is_finite() || arg.abs() >= FRAC_PI_2 {
            return Err(SimError::FluxOutOfRange { bias, arg });
        }
        Ok(self.a * arg.cos().sqrt() + self.c)
    }

    /// Pulse amplitude `v >= 0` (added to the idle bias) that brings the
    /// coupler to `freq`.
    pub fn amplitude_for(&self, freq: f64) -> Result<f64> {
        let r = (freq - self.c) / self.a;
        if !(0.0..=1.0).contains(&r) {
            return Err(SimError::InvalidParameter(format!(
                "coupler frequency {freq} GHz is not reachable by the flux map"
            )));
        }
        Ok((r * r).acos() / self.b)
    }
}

/// Device parameters in GHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceParams {
    pub omega1: f64,
    pub omega2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(rename = "alphaC")]
    pub alpha_c: f64,
    #[serde(rename = "omegaC_max")]
    pub omega_c_max: f64,
    pub g1c: f64,
    pub g2c: f64,
    pub g12: f64,
    #[serde(default)]
    pub flux_map: FluxMap,
}

impl Default for DeviceParams {
    fn default() -> Self {
        DeviceParams {
            omega1: 6.074,
            omega2: 6.725,
            alpha1: -0.256,
            alpha2: -0.236,
            alpha_c: -0.310,
            omega_c_max: 7.640,
            g1c: 0.0985,
            g2c: 0.1065,
            g12: 0.005,
            flux_map: FluxMap::default(),
        }
    }
}

/// The bundled default device file.
pub const DEFAULT_DEVICE_TOML: &str = include_str!("../data/device_default.toml");

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.omega1,
            self.omega2,
            self.alpha1,
            self.alpha2,
            self.alpha_c,
            self.omega_c_max,
            self.g1c,
            self.g2c,
            self.g12,
            self.flux_map.a,
            self.flux_map.b,
            self.flux_map.phi0,
            self.flux_map.c,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(SimError::InvalidParameter("non-finite device parameter".into()));
        }
        if self.omega1 <= 0.0 || self.omega2 <= 0.0 || self.omega_c_max <= 0.0 {
            return Err(SimError::InvalidParameter("mode frequencies must be positive".into()));
        }
        if self.alpha1 >= 0.0 || self.alpha2 >= 0.0 || self.alpha_c >= 0.0 {
            return Err(SimError::InvalidParameter("anharmonicities must be negative".into()));
        }
        if self.g1c < 0.0 || self.g2c < 0.0 || self.g12 < 0.0 {
            return Err(SimError::InvalidParameter("couplings must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: DeviceParams = toml::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Same device with every coupling set to zero.
    pub fn uncoupled(&self) -> Self {
        DeviceParams { g1c: 0.0, g2c: 0.0, g12: 0.0, ..*self }
    }

    /// Swap the roles of the two qutrits.
    pub fn mirrored(&self) -> Self {
        DeviceParams {
            omega1: self.omega2,
            omega2: self.omega1,
            alpha1: self.alpha2,
            alpha2: self.alpha1,
            g1c: self.g2c,
            g2c: self.g1c,
            ..*self
        }
    }
}

pub fn coupler_freq_from_bias(bias: f64, params: &DeviceParams) -> Result<f64> {
    params.flux_map.frequency(bias)
}

/// Bare product-state label |i c j> (Q1, coupler, Q2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub q1: usize,
    pub c: usize,
    pub q2: usize,
}

impl Label {
    pub const fn new(q1: usize, c: usize, q2: usize) -> Self {
        Label { q1, c, q2 }
    }

    /// Total excitation number.
    pub fn excitations(&self) -> usize {
        self.q1 + self.c + self.q2
    }

    /// Computational means both qutrits in {0,1,2} and the coupler empty.
    pub fn is_computational(&self) -> bool {
        self.c == 0 && self.q1 <= 2 && self.q2 <= 2
    }

    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('|').trim_end_matches('>').trim_end_matches('⟩');
        let digits: Vec<usize> = if t.contains(',') {
            t.split(',').map(|x| x.trim().parse::<usize>()).collect::<std::result::Result<_, _>>()
                .map_err(|_| SimError::Parse(format!("bad label {s}")))?
        } else {
            t.chars()
                .map(|ch| ch.to_digit(10).map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| SimError::Parse(format!("bad label {s}")))?
        };
        if digits.len() != 3 {
            return Err(SimError::Parse(format!("label {s} needs three occupations")));
        }
        Ok(Label::new(digits[0], digits[1], digits[2]))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.q1 < 10 && self.c < 10 && self.q2 < 10 {
            write!(f, "|{}{}{}>", self.q1, self.c, self.q2)
        } else {
            write!(f, "|{},{},{}>", self.q1, self.c, self.q2)
        }
    }
}

/// Truncated product space Q1 (x) C (x) Q2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HilbertSpace {
    pub n1: usize,
    pub nc: usize,
    pub n2: usize,
}

impl Default for HilbertSpace {
    fn default() -> Self {
        HilbertSpace { n1: 4, nc: 4, n2: 4 }
    }
}

impl HilbertSpace {
    pub fn new(n1: usize, nc: usize, n2: usize) -> Result<Self> {
        if n1 < 3 || n2 < 3 || nc < 2 {
            return Err(SimError::InvalidDimension(format!(
                "dims ({n1},{nc},{n2}) below the minimum (3,2,3)"
            )));
        }
        Ok(HilbertSpace { n1, nc, n2 })
    }

    pub fn dim(&self) -> usize {
        self.n1 * self.nc * self.n2
    }

    pub fn index(&self, l: Label) -> usize {
        (l.q1 * self.nc + l.c) * self.n2 + l.q2
    }

    pub fn label(&self, idx: usize) -> Label {
        let q2 = idx % self.n2;
        let rest = idx / self.n2;
        Label::new(rest / self.nc, rest % self.nc, q2)
    }

    pub fn contains(&self, l: Label) -> bool {
        l.q1 < self.n1 && l.c < self.nc && l.q2 < self.n2
    }

    pub fn checked_index(&self, l: Label) -> Result<usize> {
        if self.contains(l) {
            Ok(self.index(l))
        } else {
            Err(SimError::InvalidDimension(format!("{l} lies outside the truncation")))
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        (0..self.dim()).map(|i| self.label(i)).collect()
    }

    /// Indices of the nine computational states |i0j>, i,j in {0,1,2},
    /// ordered as 3*i + j.
    pub fn computational_indices(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(9);
        for i in 0..3 {
            for j in 0..3 {
                v.push(self.index(Label::new(i, 0, j)));
            }
        }
        v
    }

    /// Even and odd total excitation number. The full Hamiltonian, including
    /// counter-rotating coupling terms, never mixes the two.
    pub fn parity_blocks(&self) -> BlockStructure {
        let mut even = Vec::new();
        let mut odd = Vec::new();
        for i in 0..self.dim() {
            if self.label(i).excitations().is_multiple_of(2) {
                even.push(i);
            } else {
                odd.push(i);
            }
        }
        BlockStructure { dim: self.dim(), blocks: vec![even, odd] }
    }

    /// Ladder operator of one mode embedded in the full space (real).
    pub fn mode_lowering(&self, mode: Mode) -> Array2<f64> {
        let n = self.dim();
        let mut a = Array2::zeros((n, n));
        for idx in 0..n {
            let l = self.label(idx);
            let (occ, lowered) = match mode {
                Mode::Q1 if l.q1 > 0 => (l.q1, Label::new(l.q1 - 1, l.c, l.q2)),
                Mode::C if l.c > 0 => (l.c, Label::new(l.q1, l.c - 1, l.q2)),
                Mode::Q2 if l.q2 > 0 => (l.q2, Label::new(l.q1, l.c, l.q2 - 1)),
                _ => continue,
            };
            a[[self.index(lowered), idx]] = (occ as f64).sqrt();
        }
        a
    }

    /// Occupation of one mode for every basis state.
    pub fn occupations(&self, mode: Mode) -> Array1<f64> {
        Array1::from_shape_fn(self.dim(), |i| {
            let l = self.label(i);
            (match mode {
                Mode::Q1 => l.q1,
                Mode::C => l.c,
                Mode::Q2 => l.q2,
            }) as f64
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Q1,
    C,
    Q2,
}

/// Single-mode annihilation operator with <n-1|a|n> = sqrt(n).
pub fn annihilation(dim: usize) -> Result<Array2<C64>> {
    if dim < 2 {
        return Err(SimError::InvalidDimension(format!("annihilation needs dim >= 2, got {dim}")));
    }
    let mut a = Array2::zeros((dim, dim));
    for n in 1..dim {
        a[[n - 1, n]] = C64::new((n as f64).sqrt(), 0.0);
    }
    Ok(a)
}

/// The Hamiltonian split as `fixed + omegaC * coupler_number`, both real.
#[derive(Debug, Clone)]
pub struct HamiltonianParts {
    pub space: HilbertSpace,
    pub fixed: Array2<f64>,
    /// 2*pi*n_c on the diagonal.
    pub coupler_number: Array1<f64>,
    pub blocks: BlockStructure,
}

impl HamiltonianParts {
    pub fn new(params: &DeviceParams, space: HilbertSpace) -> Result<Self> {
        params.validate()?;
        let n = space.dim();
        let mut fixed = Array2::zeros((n, n));
        let kerr = |occ: usize, alpha: f64| 0.5 * alpha * (occ * occ.saturating_sub(1)) as f64;
        for idx in 0..n {
            let l = space.label(idx);
            let e = params.omega1 * l.q1 as f64
                + kerr(l.q1, params.alpha1)
                + params.omega2 * l.q2 as f64
                + kerr(l.q2, params.alpha2)
                + kerr(l.c, params.alpha_c);
            fixed[[idx, idx]] = TAU * e;
        }
        let x1 = position(&space, Mode::Q1);
        let xc = position(&space, Mode::C);
        let x2 = position(&space, Mode::Q2);
        // x_i and x_j act on different tensor factors, so x_i x_j is symmetric.
        fixed.scaled_add(TAU * params.g1c, &x1.dot(&xc));
        fixed.scaled_add(TAU * params.g2c, &xc.dot(&x2));
        fixed.scaled_add(TAU * params.g12, &x1.dot(&x2));
        let coupler_number = space.occupations(Mode::C).mapv(|x| TAU * x);
        Ok(HamiltonianParts { space, fixed, coupler_number, blocks: space.parity_blocks() })
    }

    /// Real symmetric H(omegaC) in rad/ns.
    pub fn at(&self, omega_c: f64) -> Array2<f64> {
        let mut h = self.fixed.clone();
        for (i, &nc) in self.coupler_number.iter().enumerate() {
            h[[i, i]] += omega_c * nc;
        }
        h
    }

    pub fn trace_at(&self, omega_c: f64) -> f64 {
        self.fixed.diag().sum() + omega_c * self.coupler_number.sum()
    }
}

fn position(space: &HilbertSpace, mode: Mode) -> Array2<f64> {
    let a = space.mode_lowering(mode);
    &a + &a.t()
}

/// Static Hamiltonian at coupler frequency `omega_c` (GHz), rad/ns.
pub fn build_hamiltonian(params: &DeviceParams, omega_c: f64, space: HilbertSpace) -> Result<Array2<C64>> {
    check_coupler_freq(params, omega_c)?;
    let parts = HamiltonianParts::new(params, space)?;
    Ok(parts.at(omega_c).mapv(|x| C64::new(x, 0.0)))
}

pub(crate) fn check_coupler_freq(params: &DeviceParams, omega_c: f64) -> Result<()> {
    if !omega_c.is_finite() || omega_c < 0.0 || omega_c > params.omega_c_max + 1e-9 {
        return Err(SimError::InvalidParameter(format!(
            "coupler frequency {omega_c} GHz outside [0, {}]",
            params.omega_c_max
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigh_real, hermiticity_residual};

    #[test]
    fn qubit_ladder() {
        let a = annihilation(2).unwrap();
        assert_eq!(a[[0, 1]], C64::new(1.0, 0.0));
        assert_eq!(a[[1, 0]], C64::new(0.0, 0.0));
        assert_eq!(a[[0, 0]], C64::new(0.0, 0.0));
        assert_eq!(a[[1, 1]], C64::new(0.0, 0.0));
    }

    #[test]
    fn qutrit_ladder_entries() {
        let a = annihilation(3).unwrap();
        assert_eq!(a[[0, 1]].re, 1.0);
        assert!((a[[1, 2]].re - 2f64.sqrt()).abs() < 1e-15);
        let nonzero = a.iter().filter(|z| z.norm() > 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn annihilation_rejects_dim_one() {
        assert!(matches!(annihilation(1), Err(SimError::InvalidDimension(_))));
    }

    #[test]
    fn commutator_is_identity_below_truncation_edge() {
        for dim in 2..8 {
            let a = annihilation(dim).unwrap();
            let ad = crate::linalg::dagger(&a);
            let comm = a.dot(&ad) - ad.dot(&a);
            for i in 0..dim - 1 {
                for j in 0..dim - 1 {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((comm[[i, j]].re - target).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn uncoupled_entry_for_102() {
        let p = DeviceParams::default().uncoupled();
        let space = HilbertSpace::new(3, 3, 3).unwrap();
        let h = build_hamiltonian(&p, 7.64, space).unwrap();
        let idx = space.index(Label::new(1, 0, 2));
        let expected = TAU * (p.omega1 + 2.0 * p.omega2 + p.alpha2);
        assert!((h[[idx, idx]].re - expected).abs() < 1e-12);
        assert!(h.iter().enumerate().all(|(k, z)| k / 27 == k % 27 || z.norm() == 0.0));
    }

    #[test]
    fn default_hamiltonian_is_hermitian() {
        let h = build_hamiltonian(&DeviceParams::default(), 7.64, HilbertSpace::default()).unwrap();
        assert!(hermiticity_residual(&h) < 1e-12);
    }

    #[test]
    fn dressed_q1_frequency_close_to_bare() {
        let space = HilbertSpace::default();
        let parts = HamiltonianParts::new(&DeviceParams::default(), space).unwrap();
        let (vals, vecs) = eigh_real(&parts.at(7.64)).unwrap();
        let i100 = space.index(Label::new(1, 0, 0));
        let k100 = (0..vals.len())
            .max_by(|&a, &b| vecs[[i100, a]].abs().partial_cmp(&vecs[[i100, b]].abs()).unwrap())
            .unwrap();
        let gap = vals[k100] - vals[0];
        assert!((gap - TAU * 6.074).abs() < TAU * 0.01);
    }

    #[test]
    fn flux_map_examples() {
        let fm = FluxMap::default();
        assert!((fm.frequency(-0.125).unwrap() - 7.64).abs() < 1e-12);
        let h = 1e-6;
        let d = (fm.frequency(-0.125 + h).unwrap() - fm.frequency(-0.125 - h).unwrap()) / (2.0 * h);
        assert!(d.abs() < 1e-9);
        let bias = std::f64::consts::FRAC_PI_3 / 1.71 - 0.125;
        let f = fm.frequency(bias).unwrap();
        assert!((f - (7.95 * 0.5f64.sqrt() - 0.31)).abs() < 1e-12);
        assert!((f - 5.3115).abs() < 1e-3);
    }

    #[test]
    fn flux_map_out_of_range() {
        let fm = FluxMap::default();
        assert!(matches!(fm.frequency(1.0), Err(SimError::FluxOutOfRange { .. })));
    }

    #[test]
    fn amplitude_inverts_frequency() {
        let fm = FluxMap::default();
        let v = fm.amplitude_for(6.8).unwrap();
        assert!((fm.frequency(fm.idle_bias() + v).unwrap() - 6.8).abs() < 1e-12);
    }

    #[test]
    fn bundled_config_matches_defaults() {
        let p = DeviceParams::from_toml_str(DEFAULT_DEVICE_TOML).unwrap();
        assert_eq!(p, DeviceParams::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let s = format!("{DEFAULT_DEVICE_TOML}\nbogus = 1.0\n");
        assert!(DeviceParams::from_toml_str(&s).is_err());
    }

    #[test]
    fn label_parse_and_display() {
        let l = Label::parse("|102>").unwrap();
        assert_eq!(l, Label::new(1, 0, 2));
        assert_eq!(l.to_string(), "|102>");
    }
}
