//! Threshold readout against the trained HMM on PSB data at SNR 1.

use spinread::experiments::{preset, run_scenario};

fn main() -> spinread::Result<()> {
    let mut s = preset("psb-white-sweep-A")?;
    s.axes.clear();
    s.rate = 0.0022;
    s.n_test = 4000;
    let results = run_scenario(&s, 1, &mut |line| eprintln!("{line}"))?;
    let point = &results.points[0];
    if let Some(th) = &point.threshold {
        println!("threshold {:.3} over the first {} samples", th.config.threshold, th.config.window);
    }
    for r in &point.reports {
        println!("{:<10} infidelity {:.4} [{:.4}, {:.4}]", r.method.to_string(), r.infidelity_estimate, r.ci_lower, r.ci_upper);
    }
    Ok(())
}
