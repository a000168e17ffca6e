//! Prepare the two-qutrit maximally entangled state and reconstruct it by
//! state tomography, with and without decoherence.

use ndarray::Array2;
use qutrit_sim::dynamics::{reduce_to_qutrits, unit_columns, DecoherenceModel, Simulator, DEFAULT_MACRO_DT_NS};
use qutrit_sim::gates::{calibrate_device, epr_schedule, epr_state, CalibrationOptions};
use qutrit_sim::linalg::ONE;
use qutrit_sim::model::{DeviceParams, HilbertSpace, Label};
use qutrit_sim::tomography::{simulate_qst, state_fidelity, MeasurementModel};

fn main() -> qutrit_sim::Result<()> {
    let space = HilbertSpace::new(4, 4, 4)?;
    let sim = Simulator::new(&DeviceParams::default(), space)?.with_dt(0.05)?;
    let (cal, _) = calibrate_device(&sim, &CalibrationOptions::default())?;
    let schedule = epr_schedule(&cal.single, cal.cphase()?)?;
    println!("sequence length {:.1} ns", schedule.duration);

    let n = space.dim();
    let ground = space.index(Label::new(0, 0, 0));
    let psi = sim.propagate_columns(&schedule, &unit_columns(n, &[ground]))?;
    let closed = Array2::from_shape_fn((n, n), |(r, c)| psi[[r, 0]] * psi[[c, 0]].conj());

    let mut rho0 = Array2::zeros((n, n));
    rho0[[ground, ground]] = ONE;
    let open = sim.propagate_lindblad(&schedule, &DecoherenceModel::effective_times(), &rho0, DEFAULT_MACRO_DT_NS)?;

    // Finite-shot tomography with a fixed seed.
    let model = MeasurementModel { shots: Some((4000, 11)), ..Default::default() };
    for (name, full) in [("closed", &closed), ("open", open.density().unwrap())] {
        let rho = simulate_qst(&reduce_to_qutrits(space, full), &model)?;
        println!("{name}: state fidelity {:.4}", state_fidelity(&rho, &epr_state())?);
    }
    Ok(())
}
