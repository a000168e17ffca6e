//! Process tomography of the calibrated Cphase gate, without and with
//! decoherence.

use qutrit_sim::dynamics::{DecoherenceModel, Simulator, DEFAULT_MACRO_DT_NS};
use qutrit_sim::gates::{calibrate_device, ideal_cphase, simulate_process, CalibrationOptions};
use qutrit_sim::model::{DeviceParams, HilbertSpace};
use qutrit_sim::tomography::{process_fidelity, qpt, LinearMap, MeasurementModel, ProcessMatrix};

fn main() -> qutrit_sim::Result<()> {
    let sim = Simulator::new(&DeviceParams::default(), HilbertSpace::new(4, 4, 4)?)?.with_dt(0.05)?;
    let (cal, _) = calibrate_device(&sim, &CalibrationOptions::default())?;
    let schedule = cal.cphase()?.schedule(&cal.single)?;
    let ideal = ProcessMatrix::from_unitary(&ideal_cphase())?;

    let noise = DecoherenceModel::effective_times();
    for (name, model) in [("closed", None), ("open", Some(&noise))] {
        let map = LinearMap::new(simulate_process(&sim, &schedule, model, DEFAULT_MACRO_DT_NS)?)?;
        let chi = qpt(|rho| Ok(map.apply(rho)), &MeasurementModel::default())?;
        let f = process_fidelity(&chi, &ideal)?;
        println!("{name}: process fidelity {:.4}, completeness residual {:.2e}", f.value, chi.completeness_residual());
    }
    Ok(())
}
