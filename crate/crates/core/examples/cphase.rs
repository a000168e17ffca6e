//! Locate the flux-pulse operating point of the qutrit Cphase gate and
//! report its conditional phases and fidelity.

use qutrit_sim::control::DEFAULT_BUFFER_NS;
use qutrit_sim::dynamics::Simulator;
use qutrit_sim::gates::{calibrate_device, CalibrationOptions};
use qutrit_sim::model::{DeviceParams, HilbertSpace};

fn main() -> qutrit_sim::Result<()> {
    let sim = Simulator::new(&DeviceParams::default(), HilbertSpace::new(4, 4, 4)?)?.with_dt(0.05)?;
    let (cal, op) = calibrate_device(&sim, &CalibrationOptions::default())?;
    let s = &op.scan;
    println!("v_max {:.4}, flat top {:.3} ns, buffer {DEFAULT_BUFFER_NS} ns", s.v_max, op.tau_flat);
    println!(
        "phi101 slope {:.5} rad/ns (spectrum {:.5}), phi102 slope {:.5} rad/ns (spectrum {:.5})",
        s.fit101.slope, s.predicted_slope101, s.fit102.slope, s.predicted_slope102
    );
    let gate = cal.cphase()?;
    println!("conditional phases {:?}", gate.phases);
    println!("average gate fidelity {:.6}", gate.fidelity);
    Ok(())
}
