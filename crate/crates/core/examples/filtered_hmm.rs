//! Averaging filter before HMM inference on correlated noise (T_c = 3).

use spinread::experiments::{preset, run_scenario};

fn main() -> spinread::Result<()> {
    let mut s = preset("psb-corr-Tc3-filter")?;
    s.axes.clear();
    s.rate = 0.01;
    s.n_test = 4000;
    let results = run_scenario(&s, 1, &mut |line| eprintln!("{line}"))?;
    let point = &results.points[0];
    if let Some(f) = &point.filtered_params {
        println!("filtered noise variance {:.4}, effective SNR {:.3}", f.variances()[0], 1.0 / f.variances()[0].sqrt());
    }
    for r in &point.reports {
        println!("{:<13} infidelity {:.4} [{:.4}, {:.4}]", r.method.to_string(), r.infidelity_estimate, r.ci_lower, r.ci_upper);
    }
    Ok(())
}
