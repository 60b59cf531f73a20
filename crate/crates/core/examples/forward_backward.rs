//! Posterior state probabilities of one simulated PSB trace.

use spinread::hmm::{decide_initial_state, posteriors};
use spinread::noise::sample_hmm_trace;
use spinread::{rng, HmmParams};

fn main() -> spinread::Result<()> {
    let params = HmmParams::new(
        vec![0.5, 0.5],
        vec![1.0, 0.0],
        vec![1.0, 1.0],
        vec![vec![0.99, 0.01], vec![0.0, 1.0]],
    )?;
    let mut r = rng::stream(7, 0);
    let trace = sample_hmm_trace(&params, Some(0), 200, &mut r)?;
    let table = posteriors(&params, &trace)?;
    for t in (0..trace.len()).step_by(20) {
        println!("t={t:>3}  y={:+.3}  P(triplet)={:.4}", trace.samples[t], table.get(t, 0));
    }
    let (state, p) = decide_initial_state(&table);
    println!("true initial state {}, decided {} with posterior {p:.4}", trace.initial_state().unwrap_or(0) + 1, state + 1);
    Ok(())
}
