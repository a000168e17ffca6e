//! Cross-Kerr coefficients across the coupler tuning range, and the
//! smallest avoided crossings seen by the |i02> states.

use qutrit_sim::model::{DeviceParams, HilbertSpace, Label};
use qutrit_sim::spectrum::{chi_sweep, minimum_gap, sw_stray_coupling, LabelMode, SpectrumTracker};

fn main() -> qutrit_sim::Result<()> {
    let params = DeviceParams::default();
    let space = HilbertSpace::new(4, 4, 4)?;
    let grid: Vec<f64> = (0..=26).map(|k| 6.6 + 0.04 * k as f64).collect();
    let table = chi_sweep(&params, &grid, space)?;
    table.write_csv(std::io::stdout())?;

    for (a, b) in [("002", "011"), ("002", "110"), ("102", "210")] {
        let mut tracker = SpectrumTracker::new(&params, space, LabelMode::Adiabatic)?;
        let gap = minimum_gap(&mut tracker, Label::parse(a)?, Label::parse(b)?, (6.6, 7.64), 0.01)?;
        println!("|{a}>-|{b}>: {:.2} MHz at {:.3} GHz", gap.gap_mhz, gap.omega_c_ghz);
    }
    println!("second-order |002>-|110> coupling: {:.3} MHz", sw_stray_coupling(&params)?);
    Ok(())
}
