//! Return probabilities of the computational states after a flux pulse
//! with no flat top, as the ramp time grows.

use qutrit_sim::dynamics::Simulator;
use qutrit_sim::gates::leakage_return_probabilities;
use qutrit_sim::model::{DeviceParams, HilbertSpace};

fn main() -> qutrit_sim::Result<()> {
    let sim = Simulator::new(&DeviceParams::default(), HilbertSpace::new(4, 4, 4)?)?.with_dt(0.05)?;
    let v_max = 0.3835;
    println!("ramp_ns  P(002)  P(102)  P(202)  min(other)");
    for ramp in [40.0, 60.0, 80.0, 100.0, 120.0, 140.0] {
        let p = leakage_return_probabilities(&sim, v_max, ramp)?;
        let other = (0..9).filter(|k| k % 3 != 2).map(|k| p[k]).fold(1.0, f64::min);
        println!("{ramp:7.0}  {:.4}  {:.4}  {:.4}  {other:.4}", p[2], p[5], p[8]);
    }
    Ok(())
}
