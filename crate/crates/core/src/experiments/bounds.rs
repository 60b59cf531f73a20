//! Closed-form pieces of the fidelity experiments: binomial error bars,
//! thermal transition rates and the zero-noise Elzerman fidelity ceiling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default credible level of the infidelity error bars.
pub const DEFAULT_LEVEL: f64 = 0.68;

/// Absolute tolerance of the Beta-posterior quadrature.
const QUAD_TOLERANCE: f64 = 1e-10;

/// Posterior half-widths beyond which the Beta density is treated as zero.
const SUPPORT_WIDTHS: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Credible interval for the error probability p after `n_errors` errors in
/// `n_trials` trials with a flat prior, so p ~ Beta(n+1, N−n+1).
///
/// The interval leaves (1 − level)/2 of posterior mass on each side. When
/// that interval would exclude the estimate n/N (only possible for n = 0 or
/// n = N) it is pinned to the boundary and becomes one-sided.
pub fn binomial_infidelity_interval(n_errors: u64, n_trials: u64, level: f64) -> Result<BinomialInterval> {
    if n_trials == 0 || n_errors > n_trials {
        return Err(Error::Config(format!(
            "need 0 <= errors <= trials and trials > 0, got {n_errors} of {n_trials}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("credible level must lie in (0, 1), got {level}")));
    }
    let (n, total) = (n_errors as f64, n_trials as f64);
    let estimate = n / total;
    let post = BetaPosterior::new(n, total - n);
    let tail = 0.5 * (1.0 - level);
    let (mut lower, mut upper) = (post.quantile(tail), post.quantile(1.0 - tail));
    if lower > estimate {
        lower = 0.0;
        upper = post.quantile(level);
    } else if upper < estimate {
        upper = 1.0;
        lower = post.quantile(1.0 - level);
    }
    Ok(BinomialInterval { estimate, lower, upper })
}

/// Unnormalized Beta(k+1, m+1) density on the region where it is not
/// negligible, rescaled to peak at 1.
struct BetaPosterior {
    k: f64,
    m: f64,
    mode: f64,
    lo: f64,
    hi: f64,
    norm: f64,
}

impl BetaPosterior {
    fn new(k: f64, m: f64) -> Self {
        let mode = k / (k + m);
        let (a, b) = (k + 1.0, m + 1.0);
        let sd = (a * b / ((a + b) * (a + b) * (a + b + 1.0))).sqrt();
        let lo = (mode - SUPPORT_WIDTHS * sd).max(0.0);
        let hi = (mode + SUPPORT_WIDTHS * sd).min(1.0);
        let mut post = BetaPosterior { k, m, mode, lo, hi, norm: 1.0 };
        post.norm = post.mass(1.0);
        post
    }

    /// Density at p, divided by its value at the mode.
    fn density(&self, p: f64) -> f64 {
        let log_ratio = |count: f64, x: f64, x0: f64| {
            if count == 0.0 {
                0.0
            } else if x <= 0.0 {
                f64::NEG_INFINITY
            } else {
                count * (x / x0).ln()
            }
        };
        (log_ratio(self.k, p, self.mode) + log_ratio(self.m, 1.0 - p, 1.0 - self.mode)).exp()
    }

    /// Unnormalized mass on [lo, lo + u·(hi − lo)], integrated in the
    /// rescaled variable u so the integrand is of order one.
    fn mass(&self, u: f64) -> f64 {
        let w = self.hi - self.lo;
        let f = |u: f64| self.density(self.lo + u * w);
        adaptive_simpson(&f, 0.0, u, QUAD_TOLERANCE)
    }

    fn cdf(&self, p: f64) -> f64 {
        if p <= self.lo {
            return 0.0;
        }
        if p >= self.hi {
            return 1.0;
        }
        self.mass((p - self.lo) / (self.hi - self.lo)) / self.norm
    }

    fn quantile(&self, q: f64) -> f64 {
        let (mut a, mut b) = (self.lo, self.hi);
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if self.cdf(mid) < q {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= 1e-14 * b.max(1e-300) {
                break;
            }
        }
        0.5 * (a + b)
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    // split first so a narrow peak cannot slip between the initial nodes
    let pieces = 16;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (fa, fm, fb) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
            recurse(f, x0, x1, fa, fm, fb, simpson(fa, fm, fb, x0, x1), tol / pieces as f64, 40)
        })
        .sum()
}

/// Finite-temperature Elzerman tunnel rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalConfig {
    /// Tunnel probability per time step at zero temperature, A₀.
    pub base_rate: f64,
    /// E_Z/(k_B·temperature); `None` is zero temperature.
    pub zeeman_ratio: Option<f64>,
}

impl ThermalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return Err(Error::Config(format!("base rate must lie in (0, 1), got {}", self.base_rate)));
        }
        if let Some(x) = self.zeeman_ratio {
            if x.is_nan() || x < 0.0 {
                return Err(Error::Config(format!("Zeeman ratio must be nonnegative, got {x}")));
            }
        }
        Ok(())
    }

    /// Fermi occupation f(x) = 1/(1 + eˣ).
    pub fn fermi(&self) -> f64 {
        match self.zeeman_ratio {
            None => 0.0,
            Some(x) => {
                let e = (-x).exp();
                e / (1.0 + e)
            }
        }
    }
}

/// Transition matrix over (spin-up, empty, spin-down):
/// A₁₂ = A₂₃ = (1 − f)A₀, A₂₁ = A₃₂ = f·A₀, no direct spin flips.
pub fn thermal_transition_matrix(config: &ThermalConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let f = config.fermi();
    let a0 = config.base_rate;
    let (out, back) = ((1.0 - f) * a0, f * a0);
    Ok(vec![
        vec![1.0 - out, out, 0.0],
        vec![back, 1.0 - back - out, out],
        vec![0.0, back, 1.0 - back],
    ])
}

/// Infidelity floor 1 − F_max of Elzerman readout without noise, set by the
/// ratio of the spin-up and spin-down tunnel-out rates. The expression is
/// symmetric under r ↔ 1/r; r = 1 gives 1/2.
pub fn fidelity_bound_zero_noise(rate_ratio: f64) -> Result<f64> {
    if rate_ratio.is_nan() || rate_ratio <= 0.0 {
        return Err(Error::NonPositiveRatio(rate_ratio));
    }
    let r = rate_ratio.max(1.0 / rate_ratio);
    if r == 1.0 {
        return Ok(0.5);
    }
    if r.is_infinite() {
        return Ok(0.0);
    }
    let ln_r = (r - 1.0).ln_1p();
    let power = (ln_r / (1.0 - r)).exp();
    Ok(0.5 * (1.0 - power * (1.0 - 1.0 / r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trapezoid rule on a fine uniform grid, normalized numerically.
    fn beta_cdf_grid(k: f64, m: f64, x: f64) -> f64 {
        let n = 2_000_000;
        let dens = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { (k * p.ln() + m * (1.0 - p).ln()).exp() };
        let h = 1.0 / n as f64;
        let (mut below, mut total) = (0.0, 0.0);
        for i in 0..n {
            let (p0, p1) = (i as f64 * h, (i + 1) as f64 * h);
            let area = 0.5 * h * (dens(p0) + dens(p1));
            total += area;
            if p1 <= x {
                below += area;
            } else if p0 < x {
                below += 0.5 * (x - p0) * (dens(p0) + dens(x));
            }
        }
        below / total
    }

    #[test]
    fn interval_matches_grid_quadrature() {
        let ci = binomial_infidelity_interval(5, 100, 0.68).unwrap();
        assert_eq!(ci.estimate, 0.05);
        assert!((beta_cdf_grid(5.0, 95.0, ci.lower) - 0.16).abs() < 1e-4);
        assert!((beta_cdf_grid(5.0, 95.0, ci.upper) - 0.84).abs() < 1e-4);
        assert!(ci.lower < 0.05 && ci.upper > 0.05);
    }

    #[test]
    fn no_errors_pins_lower_edge() {
        let ci = binomial_infidelity_interval(0, 100, 0.68).unwrap();
        assert_eq!((ci.estimate, ci.lower), (0.0, 0.0));
        // one-sided: 1 − (1 − b)^101 = 0.68
        let b = 1.0 - 0.32f64.powf(1.0 / 101.0);
        assert!((ci.upper - b).abs() < 1e-9, "{} vs {b}", ci.upper);
        let all = binomial_infidelity_interval(100, 100, 0.68).unwrap();
        assert_eq!((all.estimate, all.upper), (1.0, 1.0));
        assert!((all.lower - (1.0 - ci.upper)).abs() < 1e-9);
    }

    #[test]
    fn large_counts_stay_accurate() {
        let ci = binomial_infidelity_interval(300, 10_000, 0.68).unwrap();
        let sd = (0.03f64 * 0.97 / 10_000.0).sqrt();
        assert!(((ci.upper - ci.lower) / (2.0 * sd) - 1.0).abs() < 0.02);
        assert!(binomial_infidelity_interval(3, 2, 0.68).is_err());
        assert!(binomial_infidelity_interval(1, 2, 1.0).is_err());
    }

    #[test]
    fn thermal_limits() {
        let cold = thermal_transition_matrix(&ThermalConfig { base_rate: 0.02, zeeman_ratio: None }).unwrap();
        assert_eq!(cold[0][1], 0.02);
        assert_eq!(cold[1][2], 0.02);
        assert_eq!(cold[1][0], 0.0);
        assert_eq!(cold[2][1], 0.0);
        let hot = thermal_transition_matrix(&ThermalConfig { base_rate: 0.02, zeeman_ratio: Some(0.0) }).unwrap();
        for (i, j) in [(0, 1), (1, 2), (1, 0), (2, 1)] {
            assert_eq!(hot[i][j], 0.01);
        }
        let cfg = ThermalConfig { base_rate: 0.02, zeeman_ratio: Some(2.5) };
        let a = thermal_transition_matrix(&cfg).unwrap();
        let f = 1.0 / (1.0 + 2.5f64.exp());
        assert!((a[1][0] / 0.02 - f).abs() < 1e-15);
        assert!((f - 0.0759).abs() < 1e-4);
        for row in &a {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn bound_limits() {
        assert_eq!(fidelity_bound_zero_noise(1.0).unwrap(), 0.5);
        assert!(fidelity_bound_zero_noise(1e12).unwrap() < 1e-10);
        assert!((fidelity_bound_zero_noise(1.0 + 1e-9).unwrap() - 0.5).abs() < 1e-8);
        assert_eq!(fidelity_bound_zero_noise(4.0).unwrap(), fidelity_bound_zero_noise(0.25).unwrap());
        assert!(fidelity_bound_zero_noise(0.0).is_err());
    }

    #[test]
    fn bound_matches_series() {
        // ½ Σ_t min over the two geometric tunnel-out distributions, in the small-rate limit
        for r in [2.0, 5.0, 10.0] {
            let a32: f64 = 1e-6;
            let a12 = r * a32;
            let (mut t, mut sum) = (0.0f64, 0.0);
            loop {
                let p = ((1.0 - a12).ln() * t).exp() * a12;
                let q = ((1.0 - a32).ln() * t).exp() * a32;
                let term = p.min(q);
                sum += term;
                if q < 1e-22 {
                    break;
                }
                t += 1.0;
            }
            let series = 0.5 * sum;
            assert!((series - fidelity_bound_zero_noise(r).unwrap()).abs() < 1e-6);
        }
    }
}
