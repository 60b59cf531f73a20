//! Elzerman readout at finite temperature compared with the zero-noise bound.

use spinread::experiments::{fidelity_bound_zero_noise, preset, run_scenario, Method};

fn main() -> spinread::Result<()> {
    let mut s = preset("elzerman-thermal")?;
    s.axes.clear();
    s.rate = 0.02;
    s.trace_len = 400;
    s.temperature = 1.0;
    s.n_test = 4000;
    s.methods = vec![Method::Hmm];
    let results = run_scenario(&s, 1, &mut |line| eprintln!("{line}"))?;
    let r = &results.points[0].reports[0];
    // spin-up over spin-down tunnel-out rate, e^{E_Z/kT}
    let ratio = (1.0f64 / s.temperature).exp();
    println!("HMM infidelity {:.4} [{:.4}, {:.4}]", r.infidelity_estimate, r.ci_lower, r.ci_upper);
    println!("zero-noise bound {:.4}", fidelity_bound_zero_noise(ratio)?);
    Ok(())
}
