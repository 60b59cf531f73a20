//! Forward-backward against brute-force path enumeration, plus structural
//! properties of the posteriors.

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use proptest::prelude::*;
use rand::Rng;
use spinread::hmm::{backward, forward, posteriors, SignalTrace};
use spinread::{rng, HmmParams};

// keeps the timing test free of competing work
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn gauss(mean: f64, var: f64, y: f64) -> f64 {
    (-(y - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn simplex<R: Rng>(m: usize, r: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..m).map(|_| r.random::<f64>() + 0.05).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn random_model<R: Rng>(m: usize, r: &mut R) -> HmmParams {
    HmmParams::new(
        simplex(m, r),
        (0..m).map(|_| r.random_range(-2.0..2.0)).collect(),
        (0..m).map(|_| r.random_range(0.2..2.0)).collect(),
        (0..m).map(|_| simplex(m, r)).collect(),
    )
    .unwrap()
}

/// Joint probabilities of every state path, summed into per-time marginals.
fn enumerate(p: &HmmParams, y: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let (m, t_len) = (p.num_states(), y.len());
    let mut marg = vec![vec![0.0; m]; t_len];
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    for code in 0..m.pow(t_len as u32) {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % m;
            c /= m;
        }
        let mut w = p.initial()[path[0]] * gauss(p.means()[path[0]], p.variances()[path[0]], y[0]);
        for t in 1..t_len {
            w *= p.transition(path[t - 1], path[t]) * gauss(p.means()[path[t]], p.variances()[path[t]], y[t]);
        }
        total += w;
        for (t, &s) in path.iter().enumerate() {
            marg[t][s] += w;
        }
    }
    for row in &mut marg {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    (total.ln(), marg)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn matches_brute_force_enumeration() {
    let _g = serial();
    let mut r = rng::stream(2024, 0);
    for case in 0..100 {
        let m = 1 + case % 3;
        let t_len = r.random_range(1..=8);
        let p = random_model(m, &mut r);
        let y: Vec<f64> = (0..t_len).map(|_| r.random_range(-3.0..3.0)).collect();
        let trace = SignalTrace::new(y.clone());
        let (ll, marg) = enumerate(&p, &y);
        let fw = forward(&p, &trace).unwrap();
        assert!(rel(fw.log_likelihood, ll) < 1e-9, "case {case}: {} vs {ll}", fw.log_likelihood);
        let post = posteriors(&p, &trace).unwrap();
        for t in 0..t_len {
            for i in 0..m {
                let want = marg[t][i];
                let got = post.get(t, i);
                assert!((got - want).abs() <= 1e-9 * want.max(1e-3), "case {case} t {t} i {i}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn alpha_beta_product_is_time_invariant() {
    let _g = serial();
    let mut r = rng::stream(5, 1);
    for _ in 0..20 {
        let p = random_model(3, &mut r);
        let y: Vec<f64> = (0..200).map(|_| r.random_range(-3.0..3.0)).collect();
        let trace = SignalTrace::new(y);
        let fw = forward(&p, &trace).unwrap();
        let beta = backward(&p, &trace, &fw.scaling).unwrap();
        let sums: Vec<f64> = (0..trace.len())
            .map(|t| fw.row(t).iter().zip(&beta[3 * t..3 * t + 3]).map(|(a, b)| a * b).sum())
            .collect();
        for s in &sums {
            assert!(rel(*s, sums[0]) < 1e-9, "{s} vs {}", sums[0]);
        }
    }
}

#[test]
fn affine_rescaling_leaves_posteriors_unchanged() {
    let _g = serial();
    let mut r = rng::stream(6, 1);
    for c in [0.01, 0.5, 3.0, 1e3] {
        let p = random_model(3, &mut r);
        let y: Vec<f64> = (0..100).map(|_| r.random_range(-3.0..3.0)).collect();
        let q = HmmParams::from_flat(
            p.initial().to_vec(),
            p.means().iter().map(|m| m * c).collect(),
            p.variances().iter().map(|v| v * c * c).collect(),
            p.transitions().to_vec(),
        )
        .unwrap();
        let a = posteriors(&p, &SignalTrace::new(y.clone())).unwrap();
        let b = posteriors(&q, &SignalTrace::new(y.iter().map(|v| v * c).collect())).unwrap();
        for t in 0..y.len() {
            for i in 0..3 {
                assert!((a.get(t, i) - b.get(t, i)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn runtime_is_linear_in_length() {
    let _g = serial();
    let p = HmmParams::new(vec![0.5, 0.5], vec![1.0, 0.0], vec![1.0, 1.0], vec![vec![0.99, 0.01], vec![0.0, 1.0]]).unwrap();
    let mut r = rng::stream(8, 0);
    let long: Vec<f64> = (0..400_000).map(|_| r.random_range(-2.0..3.0)).collect();
    let best = |len: usize| {
        let trace = SignalTrace::new(long[..len].to_vec());
        (0..7)
            .map(|_| {
                let start = Instant::now();
                std::hint::black_box(posteriors(&p, &trace).unwrap());
                start.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (t1, t2) = (best(200_000), best(400_000));
    assert!(t2 <= 2.5 * t1, "doubling the length took {:.2}x", t2 / t1);
}

proptest! {
    #[test]
    fn posterior_rows_sum_to_one(seed in 0u64..10_000, m in 1usize..=4, len in 1usize..300) {
        let _g = serial();
        let mut r = rng::stream(seed, 3);
        let p = random_model(m, &mut r);
        let y: Vec<f64> = (0..len).map(|_| r.random_range(-8.0..8.0)).collect();
        let post = posteriors(&p, &SignalTrace::new(y)).unwrap();
        for t in 0..len {
            let s: f64 = post.row(t).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(post.row(t).iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }
}
