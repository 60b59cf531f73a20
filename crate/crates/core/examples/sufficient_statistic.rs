//! Two states without transitions: with equal variances the trace mean
//! decides as well as the full posterior; with unequal variances it cannot.

use spinread::hmm::{decide_initial_state, posteriors, SignalTrace};
use spinread::noise::sample_hmm_trace;
use spinread::readout::{equal_variance_threshold, log_posterior_ratio_two_state, Gaussian};
use spinread::{rng, HmmParams};

fn main() -> spinread::Result<()> {
    let len = 30;
    let params = HmmParams::new(
        vec![0.5, 0.5],
        vec![0.0, 1.0],
        vec![4.0, 4.0],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    )?;
    let threshold = equal_variance_threshold(0.5, 0.5, 0.0, 1.0, 4.0, len);
    let n = 10_000;
    let mut mismatches = 0;
    for k in 0..n {
        let trace = sample_hmm_trace(&params, None, len, &mut rng::stream(9, k))?;
        let (hmm, _) = decide_initial_state(&posteriors(&params, &trace)?);
        let mean = trace.samples.iter().sum::<f64>() / len as f64;
        let by_mean = usize::from(mean > threshold);
        mismatches += usize::from(hmm != by_mean);
    }
    println!("equal variances: threshold {threshold:.3}, {mismatches} mismatches in {n} traces");

    let a = Gaussian::new(0.0, 1.44);
    let b = Gaussian::new(1.0, 1.0);
    let mut spike = vec![0.0; 10];
    spike[0] = 10.0;
    for samples in [spike, vec![1.0; 10]] {
        let ln_r = log_posterior_ratio_two_state(0.5, 0.5, a, b, &SignalTrace::new(samples.clone()));
        println!("trace {samples:?}: mean 1, ln R = {ln_r:+.3}");
    }
    Ok(())
}
