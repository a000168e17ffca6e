//! Conditional Ramsey measurement of chi_12 at a fixed flux amplitude,
//! compared with the value read off the dressed spectrum.

use std::f64::consts::TAU;

use qutrit_sim::dynamics::Simulator;
use qutrit_sim::gates::{calibrate_standard_set, conditional_ramsey_chi, CalibrationOptions};
use qutrit_sim::model::{coupler_freq_from_bias, DeviceParams, HilbertSpace};
use qutrit_sim::spectrum::cross_kerr;

fn main() -> qutrit_sim::Result<()> {
    let params = DeviceParams::default();
    let space = HilbertSpace::new(4, 4, 4)?;
    let sim = Simulator::new(&params, space)?.with_dt(0.05)?;
    let cal = calibrate_standard_set(&sim, &CalibrationOptions::default())?;

    let v = 0.3;
    let theta: Vec<f64> = (0..24).map(|k| TAU * k as f64 / 24.0).collect();
    let r = conditional_ramsey_chi(&sim, &cal, 1, 2, v, 50.0, (40.0, 20.0), &theta)?;
    let omega_c = coupler_freq_from_bias(params.flux_map.idle_bias() + v, &params)?;
    println!("chi_12 from Ramsey {:.4} MHz", r.chi_mhz);
    println!("chi_12 from spectrum {:.4} MHz at {omega_c:.4} GHz", cross_kerr(&params, omega_c, 1, 2, space)?);
    Ok(())
}
