//! Tomography on synthetic data: readout-error mitigation and state
//! reconstruction under finite shots.

use ndarray::{array, Array1, Array2};
use qutrit_sim::linalg::C64;
use qutrit_sim::tomography::{
    measurement_probabilities, mitigate_readout, simulate_qst, state_fidelity, AssignmentMatrix, MeasurementModel,
    TomographySettings,
};

fn main() -> qutrit_sim::Result<()> {
    let s = 1.0 / 3f64.sqrt();
    let psi: Array1<C64> = [s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, s].iter().map(|&x| C64::new(x, 0.0)).collect();
    let rho = Array2::from_shape_fn((9, 9), |(r, c)| psi[r] * psi[c].conj());

    // Columns are prepared levels, rows are reported outcomes.
    let readout = array![[0.95, 0.06, 0.02], [0.04, 0.90, 0.08], [0.01, 0.04, 0.90]];
    let assignment = AssignmentMatrix::from_qutrits(&readout, &readout)?;
    let ideal = measurement_probabilities(&rho, &TomographySettings::ideal().rotations())[0];
    let m = mitigate_readout(&assignment.apply(&ideal), &assignment)?;
    println!("condition number {:.3}, clipped mass {:.1e}", m.condition_number, m.clipped_mass);

    for shots in [100, 1000, 10000] {
        let model = MeasurementModel { assignment: Some(assignment.clone()), shots: Some((shots, 3)), ..Default::default() };
        let fit = simulate_qst(&rho, &model)?;
        println!("{shots:6} shots: fidelity {:.4}", state_fidelity(&fit, &psi)?);
    }
    Ok(())
}
