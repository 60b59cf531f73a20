//! Confidence intervals for trained model parameters.
//!
//! Likelihood-ratio intervals follow the profile likelihood: the target
//! parameter is pinned at λ̂₀ ± δ, every other free parameter is re-maximized
//! with Baum-Welch, and δ is solved for where the maximum LL has dropped by
//! Δ. Monte Carlo intervals train on independent data sets and report the
//! mean ± the unbiased standard deviation of the estimates.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{run_accelerated, total_log_likelihood, train, train_accelerated, Ties, TrainingConfig, TrainingResult};
use crate::error::{Error, Result};
use crate::hmm::{FrozenSet, HmmParams, ParamId, SignalTrace};

/// Smallest half-width reported by either method.
pub const HALF_WIDTH_FLOOR: f64 = 3.4e-7;

/// LL drop for a 68% interval.
pub const DEFAULT_DELTA_LL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMethod {
    LikelihoodRatio,
    MonteCarlo,
}

impl fmt::Display for IntervalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntervalMethod::LikelihoodRatio => "likelihood-ratio",
            IntervalMethod::MonteCarlo => "monte-carlo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub parameter: ParamId,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: IntervalMethod,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn half_width_below(&self) -> f64 {
        self.estimate - self.lower
    }

    pub fn half_width_above(&self) -> f64 {
        self.upper - self.estimate
    }

    /// Whether `value` lies inside the interval widened `factor` times
    /// around the estimate.
    pub fn contains_scaled(&self, value: f64, factor: f64) -> bool {
        value >= self.estimate - factor * self.half_width_below() && value <= self.estimate + factor * self.half_width_above()
    }

    /// Deviation of `value` from the estimate in units of the half-width on
    /// that side.
    pub fn standardized(&self, value: f64) -> f64 {
        let d = value - self.estimate;
        let w = if d > 0.0 { self.half_width_above() } else { self.half_width_below() };
        if d == 0.0 {
            0.0
        } else if w > 0.0 {
            d / w
        } else {
            f64::INFINITY.copysign(d)
        }
    }
}

/// Coverage of a likelihood-ratio interval with LL drop Δ.
pub fn level_for_delta(delta_ll: f64) -> f64 {
    statrs::function::erf::erf(delta_ll.sqrt())
}

/// Settings of the profile-likelihood search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Target LL drop Δ.
    pub delta_ll: f64,
    /// Accepted error on the LL drop at the reported edge.
    pub drop_tolerance: f64,
    /// Stopping threshold on LL gain for the inner re-maximization.
    pub inner_tolerance: f64,
    pub inner_max_iterations: usize,
    /// Profile evaluations allowed per side.
    pub max_probes: usize,
    pub frozen: FrozenSet,
    pub ties: Ties,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            delta_ll: DEFAULT_DELTA_LL,
            drop_tolerance: 1e-3,
            inner_tolerance: 1e-5,
            inner_max_iterations: 5000,
            max_probes: 60,
            frozen: FrozenSet::new(),
            ties: Ties::none(),
        }
    }
}

impl ProfileOptions {
    /// Profile settings that re-maximize exactly what `config` trains.
    pub fn for_training(config: &TrainingConfig) -> Self {
        ProfileOptions {
            frozen: config.frozen.clone(),
            ties: config.ties.clone(),
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta_ll > 0.0) {
            return Err(Error::Config(format!("delta_ll {} must be > 0", self.delta_ll)));
        }
        if !(self.drop_tolerance > 0.0 && self.inner_tolerance > 0.0) {
            return Err(Error::Config("profile tolerances must be > 0".into()));
        }
        Ok(())
    }
}

/// Profile-likelihood evaluator around a maximum.
pub struct Profiler<'a> {
    traces: &'a [SignalTrace],
    opts: ProfileOptions,
    best: HmmParams,
    best_ll: f64,
}

#[derive(Clone, Copy)]
enum Search {
    Conditional,
    Profile,
}

struct Probe {
    delta: f64,
    drop: f64,
    params: HmmParams,
}

impl<'a> Profiler<'a> {
    /// Polishes `star` with an unconstrained Baum-Welch run at the inner
    /// tolerance, so that drops are measured from the true maximum.
    pub fn new(star: &HmmParams, traces: &'a [SignalTrace], opts: ProfileOptions) -> Result<Self> {
        opts.validate()?;
        let cfg = TrainingConfig {
            init_params: star.clone(),
            ll_tolerance: opts.inner_tolerance,
            max_iterations: opts.inner_max_iterations,
            frozen: opts.frozen.clone(),
            ties: opts.ties.clone(),
        };
        let r = train_accelerated(&cfg, traces)?;
        Ok(Profiler {
            traces,
            opts,
            best_ll: r.log_likelihood(),
            best: r.params,
        })
    }

    pub fn maximum(&self) -> &HmmParams {
        &self.best
    }

    pub fn max_log_likelihood(&self) -> f64 {
        self.best_ll
    }

    /// The target together with every parameter tied to it.
    fn pinned_group(&self, target: ParamId) -> Vec<ParamId> {
        let (list, make): (&[Vec<usize>], fn(usize) -> ParamId) = match target {
            ParamId::Mean(_) => (&self.opts.ties.means, ParamId::Mean),
            ParamId::Variance(_) => (&self.opts.ties.variances, ParamId::Variance),
            _ => return vec![target],
        };
        let i = match target {
            ParamId::Mean(i) | ParamId::Variance(i) => i,
            _ => unreachable!(),
        };
        list.iter()
            .find(|g| g.contains(&i))
            .map(|g| g.iter().map(|&k| make(k)).collect())
            .unwrap_or_else(|| vec![target])
    }

    /// Admissible range of the target given the frozen entries that share
    /// its simplex.
    fn domain(&self, target: ParamId) -> (f64, f64) {
        let (lo, hi) = target.domain();
        let m = self.best.num_states();
        let frozen_mass: f64 = match target {
            ParamId::Initial(i) => (0..m)
                .filter(|&k| k != i && self.opts.frozen.contains(ParamId::Initial(k)))
                .map(|k| self.best.initial()[k])
                .sum(),
            ParamId::Transition(i, j) => (0..m)
                .filter(|&k| k != j && self.opts.frozen.contains(ParamId::Transition(i, k)))
                .map(|k| self.best.transition(i, k))
                .sum(),
            _ => 0.0,
        };
        (lo, (hi - frozen_mass).max(lo))
    }

    /// Maximum LL with `target` pinned at `value`, starting from `warm`.
    pub fn profile(&self, target: ParamId, value: f64, warm: &HmmParams) -> Result<(f64, HmmParams)> {
        let group = self.pinned_group(target);
        let mut init = warm.clone();
        for &id in &group {
            init = init.with_value(id, value)?;
        }
        let mut frozen = self.opts.frozen.clone();
        for &id in &group {
            frozen.insert(id);
        }
        let cfg = TrainingConfig {
            init_params: init,
            ll_tolerance: self.opts.inner_tolerance,
            max_iterations: self.opts.inner_max_iterations,
            frozen,
            ties: self.opts.ties.clone(),
        };
        let r: TrainingResult = run_accelerated(&cfg, self.traces)?;
        if !r.converged {
            return Err(Error::ProfileDidNotConverge {
                parameter: target.to_string(),
                reason: format!("inner maximization at {value} hit {} iterations", self.opts.inner_max_iterations),
            });
        }
        Ok((r.log_likelihood(), r.params))
    }

    /// LL with `target` (and its tie group) moved to `value` and everything
    /// else held at the maximum. Never above the profile LL.
    fn conditional(&self, target: ParamId, value: f64) -> Result<f64> {
        let mut p = self.best.clone();
        for id in self.pinned_group(target) {
            p = p.with_value(id, value)?;
        }
        total_log_likelihood(&p, self.traces)
    }

    fn probe(&self, search: Search, target: ParamId, value: f64, delta: f64, warm: &HmmParams) -> Result<Probe> {
        let ll = match search {
            Search::Profile => self.profile(target, value, warm).map(|(ll, params)| (ll, Some(params))),
            Search::Conditional => self.conditional(target, value).map(|ll| (ll, None)),
        };
        match ll {
            Ok((ll, params)) => Ok(Probe {
                delta,
                drop: (self.best_ll - ll).max(0.0),
                params: params.unwrap_or_else(|| warm.clone()),
            }),
            // a model that cannot produce the data lies far outside any interval
            Err(e) if matches!(e.root(), Error::AllStatesImpossible { .. } | Error::EmptyStateOccupancy { .. }) => Ok(Probe {
                delta,
                drop: f64::INFINITY,
                params: warm.clone(),
            }),
            Err(e) => Err(e),
        }
    }

    /// Distance from the estimate to the interval edge on one side, and
    /// whether the edge was clamped to the parameter domain. The search
    /// expands geometrically from `start` until the drop exceeds Δ, then
    /// refines the bracket.
    fn side(&self, search: Search, target: ParamId, sign: f64, room: f64, start: f64, tolerance: f64) -> Result<(f64, bool)> {
        let opts = &self.opts;
        let name = target.to_string();
        let goal = opts.delta_ll;
        let center = self.best.get(target);
        if room <= 0.0 {
            return Ok((0.0, true));
        }
        let mut lo = Probe {
            delta: 0.0,
            drop: 0.0,
            params: self.best.clone(),
        };
        let mut hi: Option<Probe> = None;
        let mut delta = start.max(HALF_WIDTH_FLOOR);
        let mut probes = 0;
        while hi.is_none() {
            if probes == opts.max_probes {
                return Err(Error::NonMonotoneProfile { parameter: name });
            }
            probes += 1;
            if delta >= room {
                let p = self.probe(search, target, center + sign * room, room, &lo.params)?;
                log::trace!("{name}: boundary probe drop {}", p.drop);
                if p.drop < goal {
                    return Ok((room, true));
                }
                hi = Some(p);
                break;
            }
            let p = self.probe(search, target, center + sign * delta, delta, &lo.params)?;
            log::trace!("{name}: probe δ={delta:.3e} drop {}", p.drop);
            if (p.drop - goal).abs() <= tolerance {
                return Ok((delta, false));
            }
            if p.drop >= goal {
                hi = Some(p);
            } else {
                delta = if p.drop > 1e-3 {
                    delta * ((goal / p.drop).sqrt() * 1.1).clamp(1.05, 10.0)
                } else {
                    delta * 10.0
                };
                lo = p;
            }
        }
        let mut hi = hi.expect("bracket found");

        // Illinois regula falsi on √drop − √Δ, which is close to linear in δ
        let root_goal = goal.sqrt();
        let g = |p: &Probe| p.drop.sqrt() - root_goal;
        let (mut g_lo, mut g_hi) = (g(&lo), g(&hi));
        let mut side = 0i8;
        while probes < opts.max_probes {
            probes += 1;
            let width = hi.delta - lo.delta;
            if width <= 1e-12 * hi.delta.max(HALF_WIDTH_FLOOR) {
                return Ok((hi.delta, false));
            }
            let mut next = if g_hi.is_finite() {
                (lo.delta * g_hi - hi.delta * g_lo) / (g_hi - g_lo)
            } else {
                lo.delta + 0.5 * width
            };
            if !(next > lo.delta && next < hi.delta) {
                next = lo.delta + 0.5 * width;
            }
            let warm = if side >= 0 { &lo.params } else { &hi.params };
            let p = self.probe(search, target, center + sign * next, next, warm)?;
            log::trace!("{name}: refine δ={next:.6e} drop {}", p.drop);
            if (p.drop - goal).abs() <= tolerance {
                return Ok((next, false));
            }
            let gp = g(&p);
            if gp < 0.0 {
                lo = p;
                g_lo = gp;
                if side == -1 {
                    g_hi *= 0.5;
                }
                side = -1;
            } else {
                hi = p;
                g_hi = gp;
                if side == 1 {
                    g_lo *= 0.5;
                }
                side = 1;
            }
        }
        Err(Error::ProfileDidNotConverge {
            parameter: name,
            reason: format!("edge not located within {} profile evaluations", opts.max_probes),
        })
    }

    /// Profile edge on one side. The conditional edge (all other parameters
    /// held fixed) is found first with cheap likelihood evaluations; the
    /// profile edge can only lie further out, so the profile search starts
    /// there.
    fn profile_side(&self, target: ParamId, sign: f64, room: f64) -> Result<(f64, bool)> {
        let (start, clamped) = self.side(Search::Conditional, target, sign, room, HALF_WIDTH_FLOOR, 0.05 * self.opts.delta_ll)?;
        if clamped {
            return Ok((start, true));
        }
        self.side(Search::Profile, target, sign, room, start, self.opts.drop_tolerance)
    }

    pub fn interval(&self, target: ParamId) -> Result<ConfidenceInterval> {
        if self.opts.frozen.contains(target) {
            return Err(Error::Config(format!("{target} is frozen and has no interval")));
        }
        let m = self.best.num_states();
        let in_range = match target {
            ParamId::Initial(i) | ParamId::Mean(i) | ParamId::Variance(i) => i < m,
            ParamId::Transition(i, j) => i < m && j < m,
        };
        if !in_range {
            return Err(Error::UnknownParameter(target.to_string()));
        }
        let center = self.best.get(target);
        let (lo_b, hi_b) = self.domain(target);
        let (up, up_clamped) = self.profile_side(target, 1.0, hi_b - center)?;
        let (down, down_clamped) = self.profile_side(target, -1.0, center - lo_b)?;
        let upper = if up_clamped { center + up } else { (center + up.max(HALF_WIDTH_FLOOR)).min(hi_b) };
        let lower = if down_clamped { center - down } else { (center - down.max(HALF_WIDTH_FLOOR)).max(lo_b) };
        Ok(ConfidenceInterval {
            parameter: target,
            estimate: center,
            lower: lower.min(center),
            upper: upper.max(center),
            method: IntervalMethod::LikelihoodRatio,
            level: level_for_delta(self.opts.delta_ll),
        })
    }
}

/// Likelihood-ratio interval of one parameter around a trained maximum.
pub fn likelihood_ratio_interval(
    params_star: &HmmParams,
    traces: &[SignalTrace],
    target: ParamId,
    opts: &ProfileOptions,
) -> Result<ConfidenceInterval> {
    Profiler::new(params_star, traces, opts.clone())?.interval(target)
}

/// Likelihood-ratio intervals of several parameters, sharing one polished
/// maximum.
pub fn likelihood_ratio_intervals(
    params_star: &HmmParams,
    traces: &[SignalTrace],
    targets: &[ParamId],
    opts: &ProfileOptions,
) -> Result<Vec<ConfidenceInterval>> {
    let profiler = Profiler::new(params_star, traces, opts.clone())?;
    targets.iter().map(|&t| profiler.interval(t)).collect()
}

/// Trains on every set; failures carry the set index.
pub fn monte_carlo_estimates(config: &TrainingConfig, sets: &[&[SignalTrace]]) -> Result<Vec<HmmParams>> {
    sets.iter()
        .enumerate()
        .map(|(d, set)| {
            train(config, set).map(|r| r.params).map_err(|e| Error::TrainingSet {
                set: d,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Mean ± unbiased standard deviation of `target` across estimates.
pub fn monte_carlo_interval_from_estimates(estimates: &[HmmParams], target: ParamId) -> Result<ConfidenceInterval> {
    if estimates.len() < 2 {
        return Err(Error::Config(format!(
            "Monte Carlo intervals need at least 2 data sets, got {}",
            estimates.len()
        )));
    }
    let values: Vec<f64> = estimates.iter().map(|p| p.get(target)).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt().max(HALF_WIDTH_FLOOR);
    Ok(ConfidenceInterval {
        parameter: target,
        estimate: mean,
        lower: mean - sd,
        upper: mean + sd,
        method: IntervalMethod::MonteCarlo,
        level: level_for_delta(DEFAULT_DELTA_LL),
    })
}

/// Monte Carlo interval from `sets.len()` independent trainings.
pub fn monte_carlo_interval(config: &TrainingConfig, sets: &[&[SignalTrace]], target: ParamId) -> Result<ConfidenceInterval> {
    if sets.len() < 2 {
        return Err(Error::Config(format!("Monte Carlo intervals need at least 2 data sets, got {}", sets.len())));
    }
    monte_carlo_interval_from_estimates(&monte_carlo_estimates(config, sets)?, target)
}

/// One row of a residual table: everything relative to the true value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub parameter: ParamId,
    pub method: IntervalMethod,
    pub truth: f64,
    pub estimate_minus_truth: f64,
    pub lower_minus_truth: f64,
    pub upper_minus_truth: f64,
}

pub fn residuals(intervals: &[ConfidenceInterval], truth: &HmmParams) -> Vec<Residual> {
    intervals
        .iter()
        .map(|ci| {
            let t = truth.get(ci.parameter);
            Residual {
                parameter: ci.parameter,
                method: ci.method,
                truth: t,
                estimate_minus_truth: ci.estimate - t,
                lower_minus_truth: ci.lower - t,
                upper_minus_truth: ci.upper - t,
            }
        })
        .collect()
}

pub fn write_residuals_csv(rows: &[Residual], path: &Path) -> Result<()> {
    let mut out = String::from("parameter,method,truth,estimate_minus_truth,lower_minus_truth,upper_minus_truth\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.parameter, r.method, r.truth, r.estimate_minus_truth, r.lower_minus_truth, r.upper_minus_truth
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_hmm_trace;
    use crate::rng;

    fn gaussian_set(n: usize, len: usize, seed: u64) -> (HmmParams, Vec<SignalTrace>) {
        let p = HmmParams::new(vec![1.0], vec![0.5], vec![0.36], vec![vec![1.0]]).unwrap();
        let traces = (0..n as u64)
            .map(|k| sample_hmm_trace(&p, None, len, &mut rng::stream(seed, k)).unwrap())
            .collect();
        (p, traces)
    }

    #[test]
    fn level_of_half_unit_drop() {
        assert!((level_for_delta(0.5) - 0.682_689_492).abs() < 1e-8);
    }

    #[test]
    fn gaussian_mean_matches_fisher_information() {
        let (p, traces) = gaussian_set(50, 40, 1);
        let star = train(&TrainingConfig::new(p), &traces).unwrap().params;
        let ci = likelihood_ratio_interval(&star, &traces, ParamId::Mean(0), &ProfileOptions::default()).unwrap();
        let sigma = star.variances()[0].sqrt();
        let se = sigma / (2000f64).sqrt();
        for w in [ci.half_width_above(), ci.half_width_below()] {
            assert!((w / se - 1.0).abs() < 0.1, "half-width {w} vs {se}");
        }
        assert!(ci.lower <= ci.estimate && ci.estimate <= ci.upper);
    }

    #[test]
    fn drop_is_zero_at_the_maximum() {
        let (p, traces) = gaussian_set(10, 20, 2);
        let prof = Profiler::new(&p, &traces, ProfileOptions::default()).unwrap();
        let v = prof.maximum().get(ParamId::Variance(0));
        let (ll, _) = prof.profile(ParamId::Variance(0), v, prof.maximum()).unwrap();
        assert!((prof.max_log_likelihood() - ll).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_is_clamped_at_the_boundary() {
        // transitions 2→1 never happen, so the lower edge of A_21 sits on 0
        let truth = HmmParams::new(vec![0.5, 0.5], vec![1.0, 0.0], vec![0.25, 0.25], vec![vec![0.98, 0.02], vec![0.0, 1.0]]).unwrap();
        let traces: Vec<SignalTrace> = (0..60)
            .map(|k| sample_hmm_trace(&truth, Some(k as usize % 2), 60, &mut rng::stream(3, k)).unwrap())
            .collect();
        let init = truth.with_value(ParamId::Transition(1, 0), 1e-3).unwrap();
        let star = train(&TrainingConfig::new(init), &traces).unwrap().params;
        let ci = likelihood_ratio_interval(&star, &traces, ParamId::Transition(1, 0), &ProfileOptions::default()).unwrap();
        assert!(ci.lower >= 0.0);
        assert_eq!(ci.lower, 0.0);
        assert!(ci.upper > ci.estimate);
    }

    #[test]
    fn copies_give_the_floor() {
        let (p, traces) = gaussian_set(5, 20, 4);
        let cfg = TrainingConfig::new(p);
        let sets: Vec<&[SignalTrace]> = vec![&traces, &traces, &traces];
        let ci = monte_carlo_interval(&cfg, &sets, ParamId::Mean(0)).unwrap();
        assert!((ci.half_width_above() - HALF_WIDTH_FLOOR).abs() < 1e-15);
        assert_eq!(ci.method, IntervalMethod::MonteCarlo);
    }

    #[test]
    fn monte_carlo_spread_tracks_standard_error() {
        let sets: Vec<Vec<SignalTrace>> = (0..5).map(|d| gaussian_set(20, 50, 100 + d).1).collect();
        let refs: Vec<&[SignalTrace]> = sets.iter().map(Vec::as_slice).collect();
        let (p, _) = gaussian_set(1, 1, 0);
        let ci = monte_carlo_interval(&TrainingConfig::new(p), &refs, ParamId::Mean(0)).unwrap();
        let se = 0.6 / 1000f64.sqrt();
        let w = ci.half_width_above();
        assert!(w < 3.0 * se && w > se / 3.0, "{w} vs {se}");
    }

    #[test]
    fn frozen_target_is_rejected() {
        let (p, traces) = gaussian_set(3, 10, 5);
        let opts = ProfileOptions {
            frozen: FrozenSet::new().with(ParamId::Mean(0)),
            ..Default::default()
        };
        assert!(likelihood_ratio_interval(&p, &traces, ParamId::Mean(0), &opts).is_err());
        assert!(monte_carlo_interval(&TrainingConfig::new(p), &[&traces], ParamId::Mean(0)).is_err());
    }

    #[test]
    fn residual_rows() {
        let p = HmmParams::new(vec![1.0], vec![0.5], vec![0.36], vec![vec![1.0]]).unwrap();
        let ci = ConfidenceInterval {
            parameter: ParamId::Mean(0),
            estimate: 0.6,
            lower: 0.55,
            upper: 0.7,
            method: IntervalMethod::LikelihoodRatio,
            level: 0.68,
        };
        let r = &residuals(&[ci.clone()], &p)[0];
        assert!((r.estimate_minus_truth - 0.1).abs() < 1e-12);
        assert!((r.lower_minus_truth - 0.05).abs() < 1e-12);
        assert!((ci.standardized(0.5) + 2.0).abs() < 1e-9);
        assert!(ci.contains_scaled(0.5, 2.01) && !ci.contains_scaled(0.5, 1.9));
    }
}
