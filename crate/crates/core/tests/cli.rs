//! End-to-end runs of the command-line entry point.

use spinread::cli::main_with_args;
use spinread::HmmParams;

#[test]
fn generate_train_and_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.bin");
    let out = dir.path().join("trained");
    let (t, o) = (traces.to_str().unwrap(), out.to_str().unwrap());
    let gen = ["spinread", "generate", "--preset", "psb-white-sweep-A", "--seed", "3", "--point", "4", "-n", "400", "--len", "200", "--out", t];
    assert_eq!(main_with_args(gen), 0);
    assert!(dir.path().join("t.bin.meta.json").exists());

    assert_eq!(main_with_args(["spinread", "train", t, "--ci", "likelihood-ratio", "--out", o]), 0);
    for f in ["lambda_star.json", "ll_history.csv", "intervals.json", "residuals.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let star: HmmParams = serde_json::from_str(&std::fs::read_to_string(out.join("lambda_star.json")).unwrap()).unwrap();
    assert_eq!(star.num_states(), 2);
    let history = std::fs::read_to_string(out.join("ll_history.csv")).unwrap();
    let ll: Vec<f64> = history.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-8));

    let mc = dir.path().join("mc");
    let params = out.join("lambda_star.json");
    let ci = ["spinread", "ci", t, "--params", params.to_str().unwrap(), "--ci", "monte-carlo", "--sets", "4", "--out", mc.to_str().unwrap()];
    assert_eq!(main_with_args(ci), 0);
    let rows = std::fs::read_to_string(mc.join("residuals.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 7);
}

#[test]
fn invalid_input_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = out.to_str().unwrap();
    assert_eq!(main_with_args(["spinread", "fidelity", "--preset", "psb-white-sweep-A", "--seed", "1", "--set", "n_test=-5", "--out", o]), 2);
    assert_eq!(main_with_args(["spinread", "fidelity", "--preset", "psb-white-sweep-A", "--methods", "hmm,bogus", "--seed", "1", "--out", o]), 2);
    assert_eq!(main_with_args(["spinread", "fidelity", "--preset", "psb-white-sweep-A", "--out", o]), 2);
    assert!(!out.exists());
}
