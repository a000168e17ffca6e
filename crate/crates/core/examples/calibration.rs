//! Single-qutrit pulse calibration: amplitudes, DRAG and the virtual-Z
//! frame corrections for the standard rotation set.

use qutrit_sim::dynamics::Simulator;
use qutrit_sim::gates::{calibrate_standard_set, CalibrationOptions};
use qutrit_sim::model::{DeviceParams, HilbertSpace};

fn main() -> qutrit_sim::Result<()> {
    let sim = Simulator::new(&DeviceParams::default(), HilbertSpace::new(4, 4, 4)?)?.with_dt(0.05)?;
    let cal = calibrate_standard_set(&sim, &CalibrationOptions::default())?;
    for p in &cal.pulses {
        println!(
            "{:?} {:?} angle {:.4}: amplitude {:.6} GHz, drag {:.4}, carrier {:.4} GHz, fidelity {:.6}",
            p.qutrit, p.subspace, p.angle, p.amplitude, p.drag_coeff, p.carrier, p.fidelity
        );
    }
    print!("{}", cal.to_toml_string()?);
    Ok(())
}
