//! Scalar root finding, 1-D minimisation and small least-squares fits.

use std::cell::RefCell;

use roots::{find_root_brent, SimpleConvergency};

use crate::error::{Result, SimError};

/// Brent root of a possibly failing scalar function on `[a, b]`.
pub fn brent_root<F>(a: f64, b: f64, tol: f64, max_iter: usize, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let failure: RefCell<Option<SimError>> = RefCell::new(None);
    let mut conv = SimpleConvergency { eps: tol, max_iter };
    let root = find_root_brent(
        a,
        b,
        |x| match f(x) {
            Ok(y) => y,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        },
        &mut conv,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    root.map_err(|e| SimError::Calibration(format!("root search on [{a}, {b}]: {e:?}")))
}

/// Golden-section minimisation of a unimodal function on `[a, b]`.
/// Returns `(x_min, f(x_min))`.
pub fn golden_min<F>(mut a: f64, mut b: f64, tol: f64, max_iter: usize, mut f: F) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..max_iter {
        if (b - a).abs() < tol {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc < fd { (c, fc) } else { (d, fd) })
}

/// Ordinary least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl LinearFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(SimError::FitQuality("linear fit needs at least two paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(SimError::FitQuality("degenerate abscissa".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r_squared })
}

/// Least-squares fit of `A + B cos(theta) + C sin(theta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidFit {
    pub offset: f64,
    pub amplitude: f64,
    /// Phase `phi` in `amplitude * cos(theta - phi)`.
    pub phase: f64,
    /// Root-mean-square residual.
    pub residual: f64,
}

pub fn sinusoid_fit(theta: &[f64], y: &[f64]) -> Result<SinusoidFit> {
    if theta.len() != y.len() || theta.len() < 3 {
        return Err(SimError::FitQuality("sinusoid fit needs at least three points".into()));
    }
    let design = ndarray::Array2::from_shape_fn((theta.len(), 3), |(i, k)| match k {
        0 => 1.0,
        1 => theta[i].cos(),
        _ => theta[i].sin(),
    });
    let rhs = ndarray::Array1::from(y.to_vec());
    let coef = crate::linalg::lstsq_real(&design, &rhs)?;
    let fitted = design.dot(&coef);
    let residual = ((&fitted - &rhs).mapv(|v| v * v).sum() / theta.len() as f64).sqrt();
    Ok(SinusoidFit {
        offset: coef[0],
        amplitude: coef[1].hypot(coef[2]),
        phase: coef[2].atan2(coef[1]),
        residual,
    })
}
