//! Exact inference for Gaussian-emission hidden Markov models.

mod inference;
mod params;
mod trace;

pub use inference::{
    backward, decide_initial_state, decide_initial_state_among, emission_density, forward, posteriors,
    ForwardPass, PosteriorTable,
};
pub(crate) use inference::{dim, dispatch_states, forward_into, EmissionModel};
pub use params::{FrozenSet, HmmParams, ParamId};
pub use trace::SignalTrace;
