//! Likelihood-ratio and Monte Carlo intervals for a trained PSB model.

use spinread::calibration::{train, TrainingConfig};
use spinread::confidence::{likelihood_ratio_intervals, monte_carlo_estimates, monte_carlo_interval_from_estimates, ProfileOptions};
use spinread::experiments::{default_init, ReadoutModel};
use spinread::hmm::SignalTrace;
use spinread::traces::{GenerationSpec, InitialStates, TraceSet};
use spinread::HmmParams;

fn main() -> spinread::Result<()> {
    let truth = HmmParams::new(
        vec![0.5, 0.5],
        vec![1.0, 0.0],
        vec![1.0, 1.0],
        vec![vec![0.998, 0.002], vec![0.0, 1.0]],
    )?;
    let set = TraceSet::generate(&GenerationSpec {
        params: truth.clone(),
        noise: None,
        num_traces: 2000,
        trace_len: 300,
        initial_states: InitialStates::FromModel,
        seed: 3,
        first_id: 0,
    })?;
    let cfg = TrainingConfig::new(default_init(ReadoutModel::Psb));
    let star = train(&cfg, &set.traces)?.params;
    let targets = star.free_parameters(&cfg.frozen);
    let lr = likelihood_ratio_intervals(&star, &set.traces, &targets, &ProfileOptions::for_training(&cfg))?;

    let chunks: Vec<&[SignalTrace]> = set.traces.chunks(400).collect();
    let estimates = monte_carlo_estimates(&cfg, &chunks)?;
    println!("parameter      truth   likelihood-ratio          Monte Carlo (5 x 400)");
    for (ci, &id) in lr.iter().zip(&targets) {
        let mc = monte_carlo_interval_from_estimates(&estimates, id)?;
        println!(
            "{:<8} {:>10.5}   [{:.5}, {:.5}]   [{:.5}, {:.5}]",
            id.to_string(),
            truth.get(id),
            ci.lower,
            ci.upper,
            mc.lower,
            mc.upper
        );
    }
    Ok(())
}
