//! Writes a generated trace set as CSV and binary, then reads both back.

use spinread::traces::{GenerationSpec, InitialStates, TraceSet};
use spinread::HmmParams;

fn main() -> spinread::Result<()> {
    let spec = GenerationSpec {
        params: HmmParams::new(vec![0.5, 0.5], vec![1.0, 0.0], vec![1.0, 1.0], vec![vec![0.99, 0.01], vec![0.0, 1.0]])?,
        noise: None,
        num_traces: 50,
        trace_len: 100,
        initial_states: InitialStates::Balanced(vec![0, 1]),
        seed: 2,
        first_id: 0,
    };
    let set = TraceSet::generate(&spec)?;
    let dir = std::env::temp_dir().join("spinread-trace-io");
    std::fs::create_dir_all(&dir).map_err(|e| spinread::Error::Config(e.to_string()))?;
    for name in ["traces.csv", "traces.bin"] {
        let path = dir.join(name);
        set.write(&path)?;
        let back = TraceSet::read(&path)?;
        let same = back.traces == set.traces;
        println!("{}: {} traces, round trip exact: {same}, metadata kept: {}", path.display(), back.len(), back.metadata.generation.is_some());
    }
    Ok(())
}
