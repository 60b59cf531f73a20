//! Baum-Welch training on simulated white-noise PSB traces.

use spinread::calibration::{train_with_observer, TrainingConfig};
use spinread::experiments::{default_init, ReadoutModel};
use spinread::traces::{GenerationSpec, InitialStates, TraceSet};
use spinread::HmmParams;

fn main() -> spinread::Result<()> {
    let truth = HmmParams::new(
        vec![0.5, 0.5],
        vec![1.0, 0.0],
        vec![1.0, 1.0],
        vec![vec![0.9978, 0.0022], vec![0.0, 1.0]],
    )?;
    let spec = GenerationSpec {
        params: truth.clone(),
        noise: None,
        num_traces: 1000,
        trace_len: 300,
        initial_states: InitialStates::FromModel,
        seed: 11,
        first_id: 0,
    };
    let set = TraceSet::generate(&spec)?;
    let cfg = TrainingConfig::new(default_init(ReadoutModel::Psb));
    let result = train_with_observer(&cfg, &set.traces, |p| {
        println!("iteration {:>3}  log-likelihood {:.4}", p.iteration, p.log_likelihood)
    })?;
    let est = &result.params;
    println!("pi_1  {:.4} (truth {:.4})", est.initial()[0], truth.initial()[0]);
    println!("mu    {:.4?} (truth {:?})", est.means(), truth.means());
    println!("var   {:.4?} (truth {:?})", est.variances(), truth.variances());
    println!("A_12  {:.5} (truth {})", est.transition(0, 1), truth.transition(0, 1));
    Ok(())
}
