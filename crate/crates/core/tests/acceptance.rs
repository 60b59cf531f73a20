//! Acceptance checks. Every criterion prints one `CRITERION n: PASS|FAIL`
//! line; the run exits non-zero if any fails. Criteria run one at a time so
//! their wall times are comparable to the budgets.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use spinread::calibration::{train, TrainingConfig};
use spinread::cli::main_with_args;
use spinread::confidence::{likelihood_ratio_intervals, ProfileOptions};
use spinread::experiments::{
    default_training, fidelity_bound_zero_noise, preset, run_scenario, Method, PointResult, ReadoutModel, SweepParameter,
};
use spinread::hmm::{decide_initial_state, posteriors, SignalTrace};
use spinread::noise::{sample_hmm_trace, CorrelatedSampler, NoiseSpec};
use spinread::readout::{equal_variance_threshold, log_posterior_ratio_two_state, Gaussian};
use spinread::traces::{GenerationSpec, InitialStates, TraceSet};
use spinread::{rng, HmmParams};

fn verdict(n: u32, pass: bool, detail: &str, took: Duration, budget_s: f64) -> bool {
    let in_time = took.as_secs_f64() < budget_s;
    let ok = pass && in_time;
    println!(
        "CRITERION {n}: {} | {detail} | {:.1} s (budget {budget_s:.0} s)",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    ok
}

fn gauss(mean: f64, var: f64, y: f64) -> f64 {
    (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn simplex(m: usize, r: &mut impl rand::Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..m).map(|_| r.random::<f64>() + 0.05).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn criterion_1_brute_force_oracle() -> bool {
    let start = Instant::now();
    let mut r = rng::stream(101, 0);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let m = 1 + case % 3;
        let len = 1 + case % 8;
        let p = HmmParams::new(
            simplex(m, &mut r),
            (0..m).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect(),
            (0..m).map(|_| rand::Rng::random_range(&mut r, 0.2..2.0)).collect(),
            (0..m).map(|_| simplex(m, &mut r)).collect(),
        )
        .unwrap();
        let y: Vec<f64> = (0..len).map(|_| rand::Rng::random_range(&mut r, -3.0..3.0)).collect();
        let mut marg = vec![vec![0.0; m]; len];
        let mut total = 0.0;
        let mut path = vec![0usize; len];
        for code in 0..m.pow(len as u32) {
            let mut c = code;
            for s in path.iter_mut() {
                *s = c % m;
                c /= m;
            }
            let mut w = p.initial()[path[0]] * gauss(p.means()[path[0]], p.variances()[path[0]], y[0]);
            for t in 1..len {
                w *= p.transition(path[t - 1], path[t]) * gauss(p.means()[path[t]], p.variances()[path[t]], y[t]);
            }
            total += w;
            for (t, &s) in path.iter().enumerate() {
                marg[t][s] += w;
            }
        }
        let trace = SignalTrace::new(y);
        let ll = spinread::hmm::forward(&p, &trace).unwrap().log_likelihood;
        worst = worst.max((ll - total.ln()).abs() / total.ln().abs().max(1e-300));
        let post = posteriors(&p, &trace).unwrap();
        for t in 0..len {
            for i in 0..m {
                let want = marg[t][i] / total;
                if want > 0.0 {
                    worst = worst.max((post.get(t, i) - want).abs() / want);
                }
            }
        }
    }
    verdict(1, worst < 1e-9, &format!("max relative error {worst:.2e} (tol 1e-9)"), start.elapsed(), 10.0)
}

/// Truth used for the white-noise training runs.
fn psb_truth() -> HmmParams {
    HmmParams::new(vec![0.5, 0.5], vec![1.0, 0.0], vec![1.0, 1.0], vec![vec![0.9978, 0.0022], vec![0.0, 1.0]]).unwrap()
}

fn elzerman_truth() -> HmmParams {
    let v = 0.25;
    HmmParams::new(
        vec![0.5, 0.0, 0.5],
        vec![0.0, 1.0, 0.0],
        vec![v; 3],
        vec![vec![0.98, 0.02, 0.0], vec![0.0, 0.98, 0.02], vec![0.0, 0.0, 1.0]],
    )
    .unwrap()
}

struct Run {
    ll_history: Vec<f64>,
    /// Parameters whose truth lies outside three times the interval.
    outside: Vec<String>,
    n_params: usize,
}

struct Runs {
    psb: Vec<Run>,
    elzerman: Vec<Run>,
    train_time: Duration,
    total_time: Duration,
}

const RUNS: u64 = 20;

fn one_run(model: ReadoutModel, truth: &HmmParams, seed: u64, train_time: &Mutex<Duration>) -> Run {
    let init_states = match model {
        ReadoutModel::Psb => InitialStates::FromModel,
        ReadoutModel::Elzerman => InitialStates::Balanced(vec![0, 2]),
    };
    let set = TraceSet::generate(&GenerationSpec {
        params: truth.clone(),
        noise: None,
        num_traces: 2000,
        trace_len: 300,
        initial_states: init_states,
        seed,
        first_id: 0,
    })
    .unwrap();
    let cfg: TrainingConfig = default_training(model);
    let t0 = Instant::now();
    let result = train(&cfg, &set.traces).unwrap();
    *train_time.lock().unwrap() += t0.elapsed();
    let targets = result.params.free_parameters(&cfg.frozen);
    let intervals =
        likelihood_ratio_intervals(&result.params, &set.traces, &targets, &ProfileOptions::for_training(&cfg)).unwrap();
    let outside = intervals
        .iter()
        .filter(|ci| !ci.contains_scaled(truth.get(ci.parameter), 3.0))
        .map(|ci| ci.parameter.to_string())
        .collect();
    Run {
        ll_history: result.ll_history,
        outside,
        n_params: targets.len(),
    }
}

fn training_runs() -> &'static Runs {
    static RUNS_CELL: OnceLock<Runs> = OnceLock::new();
    RUNS_CELL.get_or_init(|| {
        let start = Instant::now();
        let train_time = Mutex::new(Duration::ZERO);
        let psb_truth = psb_truth();
        let elz_truth = elzerman_truth();
        let psb = (0..RUNS)
            .into_par_iter()
            .map(|k| one_run(ReadoutModel::Psb, &psb_truth, 7000 + k, &train_time))
            .collect();
        let elzerman = (0..RUNS)
            .into_par_iter()
            .map(|k| one_run(ReadoutModel::Elzerman, &elz_truth, 8000 + k, &train_time))
            .collect();
        Runs {
            psb,
            elzerman,
            train_time: train_time.into_inner().unwrap(),
            total_time: start.elapsed(),
        }
    })
}

fn criterion_2_em_monotone() -> bool {
    let runs = training_runs();
    let mut worst_drop: f64 = 0.0;
    let mut violations = 0;
    for run in runs.psb.iter().chain(&runs.elzerman) {
        for w in run.ll_history.windows(2) {
            let drop = w[0] - w[1];
            worst_drop = worst_drop.max(drop);
            violations += usize::from(drop > 1e-8);
        }
    }
    verdict(
        2,
        violations == 0,
        &format!("{violations} decreasing steps over 40 runs, largest decrease {worst_drop:.2e} (slack 1e-8)"),
        runs.train_time,
        300.0,
    )
}

fn criterion_3_white_noise_recovery() -> bool {
    let runs = training_runs();
    let count = |list: &[Run]| list.iter().filter(|r| r.outside.is_empty()).count();
    let (psb, elz) = (count(&runs.psb), count(&runs.elzerman));
    let misses: Vec<String> = runs
        .psb
        .iter()
        .chain(&runs.elzerman)
        .flat_map(|r| r.outside.iter().cloned())
        .collect();
    verdict(
        3,
        psb >= 18 && elz >= 18,
        &format!(
            "truth inside 3x intervals for all {} PSB parameters in {psb}/20 runs, all {} Elzerman parameters in {elz}/20 (need 18); misses {misses:?}",
            runs.psb[0].n_params, runs.elzerman[0].n_params
        ),
        runs.total_time,
        900.0,
    )
}

fn single_point(name: &str, edit: impl FnOnce(&mut spinread::experiments::Scenario), seed: u64) -> PointResult {
    let mut s = preset(name).unwrap();
    edit(&mut s);
    run_scenario(&s, seed, &mut |_| {}).unwrap().points.remove(0)
}

fn criterion_4_hmm_beats_threshold() -> bool {
    let start = Instant::now();
    let p = single_point(
        "psb-white-sweep-A",
        |s| {
            s.axes.clear();
            s.rate = 0.0022;
            s.snr = 1.0;
            s.n_test = 10_000;
            s.trace_len = 300;
            s.methods = vec![Method::Threshold, Method::Hmm, Method::HmmStar];
        },
        1,
    );
    let (th, hmm, star) = (
        p.report(Method::Threshold).unwrap(),
        p.report(Method::Hmm).unwrap(),
        p.report(Method::HmmStar).unwrap(),
    );
    let pass = hmm.infidelity_estimate < th.infidelity_estimate && hmm.ci_upper < th.ci_lower && star.overlaps(hmm);
    verdict(
        4,
        pass,
        &format!(
            "threshold {:.4} [{:.4}, {:.4}], HMM {:.4} [{:.4}, {:.4}], HMM* {:.4} [{:.4}, {:.4}]",
            th.infidelity_estimate, th.ci_lower, th.ci_upper, hmm.infidelity_estimate, hmm.ci_lower, hmm.ci_upper,
            star.infidelity_estimate, star.ci_lower, star.ci_upper
        ),
        start.elapsed(),
        600.0,
    )
}

fn criterion_5_correlated_noise_reversal() -> bool {
    let start = Instant::now();
    let base = preset("psb-corr-Tc3-filter").unwrap();
    let largest = base
        .axes
        .iter()
        .find(|a| a.parameter == SweepParameter::Rate)
        .and_then(|a| a.values.iter().cloned().reduce(f64::max))
        .unwrap();
    let p = single_point(
        "psb-corr-Tc3-filter",
        |s| {
            s.axes.clear();
            s.rate = largest;
            s.snr = 1.0;
            s.correlation_time = 3.0;
            s.filter_ts = Some(20);
            s.n_test = 10_000;
            s.trace_len = 300;
            s.methods = vec![Method::Threshold, Method::Hmm, Method::HmmFiltered];
        },
        1,
    );
    let (th, hmm, filt) = (
        p.report(Method::Threshold).unwrap(),
        p.report(Method::Hmm).unwrap(),
        p.report(Method::HmmFiltered).unwrap(),
    );
    let snr_eff = 1.0 / p.filtered_params.as_ref().unwrap().variances()[0].sqrt();
    let pass = hmm.infidelity_estimate > th.infidelity_estimate
        && hmm.ci_lower >= th.ci_upper
        && filt.infidelity_estimate <= th.infidelity_estimate
        && filt.ci_upper <= th.ci_lower
        && (snr_eff - 2.02).abs() <= 0.05 * 2.02;
    verdict(
        5,
        pass,
        &format!(
            "A12 {largest}: threshold {:.4} [{:.4}, {:.4}], HMM {:.4} [{:.4}, {:.4}], filtered HMM {:.4} [{:.4}, {:.4}], effective SNR {snr_eff:.3} (2.02 +- 5%)",
            th.infidelity_estimate, th.ci_lower, th.ci_upper, hmm.infidelity_estimate, hmm.ci_lower, hmm.ci_upper,
            filt.infidelity_estimate, filt.ci_lower, filt.ci_upper
        ),
        start.elapsed(),
        1200.0,
    )
}

fn criterion_6_calibration_failure() -> bool {
    let start = Instant::now();
    let s = preset("baumwelch-corrfail").unwrap();
    let results = run_scenario(&s, 1, &mut |_| {}).unwrap();
    let mut by_tc: Vec<(f64, f64, Option<f64>)> = results
        .points
        .iter()
        .map(|p| {
            let tc = p.coordinates.iter().find(|(k, _)| k == "correlation_time").map(|c| c.1).unwrap();
            let cal = p.calibration.as_ref().unwrap();
            (tc, cal.variance_deviation(), cal.max_standardized_deviation())
        })
        .collect();
    by_tc.sort_by(|a, b| a.0.total_cmp(&b.0));
    let tcs: Vec<f64> = by_tc.iter().map(|r| r.0).collect();
    let monotone = by_tc.windows(2).all(|w| w[1].1 > w[0].1);
    let at_two = by_tc.iter().find(|r| r.0 == 2.0).and_then(|r| r.2).unwrap_or(0.0);
    verdict(
        6,
        tcs == [0.0, 1.0, 2.0, 3.0] && monotone && at_two > 3.0,
        &format!(
            "variance relative deviation by T_c {:?}, largest |estimate - model-matched| / half-width at T_c 2: {at_two:.1} (need > 3)",
            by_tc.iter().map(|r| (r.0, format!("{:.4}", r.1))).collect::<Vec<_>>()
        ),
        start.elapsed(),
        1200.0,
    )
}

/// Half the overlap of two geometric first-tunnelling distributions.
fn bound_series(a12: f64, a32: f64) -> f64 {
    let (mut sum, mut t) = (0.0, 0.0f64);
    loop {
        let p = ((1.0 - a12).ln() * t).exp() * a12;
        let q = ((1.0 - a32).ln() * t).exp() * a32;
        sum += p.min(q);
        if p.max(q) < 1e-24 {
            break;
        }
        t += 1.0;
    }
    0.5 * sum
}

fn criterion_7_thermal_bound() -> bool {
    let start = Instant::now();
    let series_err = [2.0, 5.0, 10.0]
        .iter()
        .map(|&r| (bound_series(r * 1e-6, 1e-6) - fidelity_bound_zero_noise(r).unwrap()).abs())
        .fold(0.0f64, f64::max);
    let p = single_point(
        "elzerman-thermal",
        |s| {
            s.axes.clear();
            s.snr = 4.0;
            s.temperature = 1.0;
            s.rate = 0.02;
            s.trace_len = 400;
            s.n_test = 10_000;
            s.methods = vec![Method::Hmm];
        },
        1,
    );
    let hmm = p.report(Method::Hmm).unwrap();
    // f(1) = 1/(1+e), so r = (1-f)/f = e
    let bound = fidelity_bound_zero_noise(std::f64::consts::E).unwrap();
    let sigma = hmm.sigma();
    let pass = series_err < 1e-6 && hmm.ci_upper >= bound && (hmm.infidelity_estimate - bound).abs() <= 3.0 * sigma;
    verdict(
        7,
        pass,
        &format!(
            "HMM infidelity {:.4} [{:.4}, {:.4}] vs bound {bound:.5} ({:+.2} sigma); series error {series_err:.1e}",
            hmm.infidelity_estimate,
            hmm.ci_lower,
            hmm.ci_upper,
            (hmm.infidelity_estimate - bound) / sigma
        ),
        start.elapsed(),
        600.0,
    )
}

fn criterion_8_noise_autocorrelation() -> bool {
    let start = Instant::now();
    let (len, n, lags) = (1000usize, 10_000u64, 11usize);
    let mut worst_z: f64 = 0.0;
    let mut worst_parseval: f64 = 0.0;
    for tc in [1.0, 3.0, 10.0] {
        let spec = NoiseSpec::gaussian(1.0, tc);
        let lambda = spec.spectrum(len).unwrap();
        worst_parseval = worst_parseval.max((lambda.iter().sum::<f64>() / len as f64 - 1.0).abs());
        // target: inverse DFT of the spectrum by direct summation
        let target: Vec<f64> = (0..lags)
            .map(|j| {
                lambda
                    .iter()
                    .enumerate()
                    .map(|(k, l)| l * (2.0 * std::f64::consts::PI * (j * k) as f64 / len as f64).cos())
                    .sum::<f64>()
                    / len as f64
            })
            .collect();
        let sampler = CorrelatedSampler::new(&spec, len).unwrap();
        let per_trace: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|k| {
                let x = sampler.sample(&mut rng::stream(88, k));
                (0..lags)
                    .map(|j| (0..len).map(|t| x[t] * x[(t + j) % len]).sum::<f64>() / len as f64)
                    .collect()
            })
            .collect();
        for j in 0..lags {
            let vals: Vec<f64> = per_trace.iter().map(|v| v[j]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            worst_z = worst_z.max((mean - target[j]).abs() / se);
        }
    }
    verdict(
        8,
        worst_z < 5.0 && worst_parseval < 1e-9,
        &format!("largest autocorrelation deviation {worst_z:.2} standard errors (need < 5), Parseval error {worst_parseval:.1e}"),
        start.elapsed(),
        300.0,
    )
}

fn criterion_9_threshold_optimality() -> bool {
    let start = Instant::now();
    let len = 30;
    let (mu_a, mu_b, var) = (0.0, 1.0, 4.0);
    let params = HmmParams::new(vec![0.5, 0.5], vec![mu_a, mu_b], vec![var, var], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let threshold = equal_variance_threshold(0.5, 0.5, mu_a, mu_b, var, len);
    let mismatches = (0..10_000u64)
        .into_par_iter()
        .filter(|&k| {
            let trace = sample_hmm_trace(&params, None, len, &mut rng::stream(99, k)).unwrap();
            let hmm = decide_initial_state(&posteriors(&params, &trace).unwrap()).0;
            let mean = trace.samples.iter().sum::<f64>() / len as f64;
            hmm != usize::from(mean > threshold)
        })
        .count();
    let (a, b) = (Gaussian::new(0.0, 1.44), Gaussian::new(1.0, 1.0));
    let mut spike = vec![0.0; 10];
    spike[0] = 10.0;
    let flat = vec![1.0; 10];
    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let r_spike = log_posterior_ratio_two_state(0.5, 0.5, a, b, &SignalTrace::new(spike.clone()));
    let r_flat = log_posterior_ratio_two_state(0.5, 0.5, a, b, &SignalTrace::new(flat.clone()));
    let pass = mismatches == 0 && r_spike > 0.0 && r_flat < 0.0 && mean_of(&spike) == mean_of(&flat);
    verdict(
        9,
        pass,
        &format!("{mismatches} mismatches in 10^4 traces; ln R {r_spike:+.3} and {r_flat:+.3} for two traces with mean 1"),
        start.elapsed(),
        60.0,
    )
}

fn criterion_10_manifest_rerun_is_byte_identical() -> bool {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cases: [(&str, &[&str]); 3] = [
        ("psb-white-sweep-A", &["--set", "n_test=2000", "--set", "n_train=500", "--set", "n_train_hmm=300"]),
        ("psb-corr-Tc3-filter", &["--set", "n_test=1000", "--set", "n_train=500", "--set", "n_train_hmm=300", "--set", "axes.0.values=[0.001,0.01]"]),
        ("elzerman-snr", &["--set", "n_test=1000", "--set", "n_train=500", "--set", "n_train_hmm=300", "--set", "axes.0.values=[2.0]"]),
    ];
    let mut identical = 0;
    for (name, extra) in cases {
        let first = dir.path().join(format!("{name}-1"));
        let second = dir.path().join(format!("{name}-2"));
        let mut args = vec!["spinread", "fidelity", "--preset", name, "--seed", "42", "--out", first.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert_eq!(main_with_args(args), 0, "{name}");
        let manifest = first.join("manifest.json");
        let rerun = ["spinread", "fidelity", "--config", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()];
        assert_eq!(main_with_args(rerun), 0, "{name} rerun");
        let a = std::fs::read(first.join("results.json")).unwrap();
        let b = std::fs::read(second.join("results.json")).unwrap();
        identical += usize::from(a == b);
    }
    verdict(10, identical == 3, &format!("{identical}/3 scenarios reproduced results.json byte for byte"), start.elapsed(), f64::INFINITY)
}

fn main() {
    let criteria: [(u32, fn() -> bool); 10] = [
        (1, criterion_1_brute_force_oracle),
        (2, criterion_2_em_monotone),
        (3, criterion_3_white_noise_recovery),
        (4, criterion_4_hmm_beats_threshold),
        (5, criterion_5_correlated_noise_reversal),
        (6, criterion_6_calibration_failure),
        (7, criterion_7_thermal_bound),
        (8, criterion_8_noise_autocorrelation),
        (9, criterion_9_threshold_optimality),
        (10, criterion_10_manifest_rerun_is_byte_identical),
    ];
    // `cargo test --test acceptance -- 4 7` runs only criteria 4 and 7
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let pass = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| {
            println!("CRITERION {n}: FAIL | panicked");
            false
        });
        if !pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
