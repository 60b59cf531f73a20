//! Baum-Welch maximum-likelihood estimation over a set of traces.
//!
//! Each iteration runs the scaled forward-backward pass on every trace,
//! accumulates the expected sufficient statistics, and re-solves for the
//! parameters in closed form. Frozen parameters are never touched and tied
//! states share pooled statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{dim, dispatch_states, forward_into, EmissionModel, FrozenSet, HmmParams, ParamId, SignalTrace};

/// Smallest variance a reestimation step may produce.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Default stopping threshold on the per-iteration gain in total LL.
pub const DEFAULT_LL_TOLERANCE: f64 = 1e-3;

const CHUNK: usize = 64;

/// States whose means and/or variances are constrained to be equal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ties {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub means: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variances: Vec<Vec<usize>>,
}

impl Ties {
    pub fn none() -> Self {
        Ties::default()
    }

    /// Same mean and variance for every state in `states`.
    pub fn emission(states: &[usize]) -> Self {
        Ties {
            means: vec![states.to_vec()],
            variances: vec![states.to_vec()],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty() && self.variances.is_empty()
    }

    /// Partition of 0..m into groups; untied states form singletons.
    fn groups(list: &[Vec<usize>], m: usize) -> Vec<Vec<usize>> {
        let mut seen = vec![false; m];
        let mut out = Vec::new();
        for g in list {
            let g: Vec<usize> = g.iter().copied().filter(|&i| i < m && !seen[i]).collect();
            for &i in &g {
                seen[i] = true;
            }
            if !g.is_empty() {
                out.push(g);
            }
        }
        out.extend((0..m).filter(|&i| !seen[i]).map(|i| vec![i]));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub init_params: HmmParams,
    #[serde(default = "default_tolerance")]
    pub ll_tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub frozen: FrozenSet,
    #[serde(default)]
    pub ties: Ties,
}

fn default_tolerance() -> f64 {
    DEFAULT_LL_TOLERANCE
}

fn default_max_iterations() -> usize {
    1000
}

impl TrainingConfig {
    pub fn new(init_params: HmmParams) -> Self {
        TrainingConfig {
            init_params,
            ll_tolerance: DEFAULT_LL_TOLERANCE,
            max_iterations: default_max_iterations(),
            frozen: FrozenSet::new(),
            ties: Ties::none(),
        }
    }

    pub fn with_frozen(mut self, frozen: FrozenSet) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn with_ties(mut self, ties: Ties) -> Self {
        self.ties = ties;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.ll_tolerance = tol;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ll_tolerance > 0.0) {
            return Err(Error::Config(format!("ll_tolerance {} must be > 0", self.ll_tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        let m = self.init_params.num_states();
        for (kind, list) in [("mean", &self.ties.means), ("variance", &self.ties.variances)] {
            for g in list {
                if let Some(&bad) = g.iter().find(|&&i| i >= m) {
                    return Err(Error::Config(format!("{kind} tie names state {} of {m}", bad + 1)));
                }
                let id = |i: usize| if kind == "mean" { ParamId::Mean(i) } else { ParamId::Variance(i) };
                let frozen = g.iter().filter(|&&i| self.frozen.contains(id(i))).count();
                if frozen != 0 && frozen != g.len() {
                    return Err(Error::Config(format!(
                        "{kind} tie group mixes frozen and free states"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingResult {
    pub params: HmmParams,
    /// Total LL of the parameters entering each iteration; the last entry
    /// belongs to `params`.
    pub ll_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl TrainingResult {
    pub fn log_likelihood(&self) -> f64 {
        *self.ll_history.last().expect("history is never empty")
    }
}

/// Progress of one training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Progress {
    pub iteration: usize,
    pub log_likelihood: f64,
}

/// Expected sufficient statistics accumulated over traces.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    m: usize,
    pub log_likelihood: f64,
    /// Σ_n P_n0(i).
    pub initial: Vec<f64>,
    /// Σ_{n,t} P_nt(i).
    pub occupancy: Vec<f64>,
    /// Σ_{n,t} P_nt(i) y_nt.
    pub first_moment: Vec<f64>,
    /// Σ_{n,t} P_nt(i) y_nt².
    pub second_moment: Vec<f64>,
    /// Σ_{n,t<T−1} ξ_nt(i,j), M×M row-major.
    pub transitions: Vec<f64>,
}

impl SufficientStats {
    fn zeros(m: usize) -> Self {
        SufficientStats {
            m,
            log_likelihood: 0.0,
            initial: vec![0.0; m],
            occupancy: vec![0.0; m],
            first_moment: vec![0.0; m],
            second_moment: vec![0.0; m],
            transitions: vec![0.0; m * m],
        }
    }

    fn merge(&mut self, other: &SufficientStats) {
        self.log_likelihood += other.log_likelihood;
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.initial, &other.initial);
        add(&mut self.occupancy, &other.occupancy);
        add(&mut self.first_moment, &other.first_moment);
        add(&mut self.second_moment, &other.second_moment);
        add(&mut self.transitions, &other.transitions);
    }

    pub fn num_states(&self) -> usize {
        self.m
    }
}

#[derive(Default)]
struct Workspace {
    emis: Vec<f64>,
    shift: Vec<f64>,
    alpha: Vec<f64>,
    scale: Vec<f64>,
}

fn accumulate_trace(
    params: &HmmParams,
    model: &EmissionModel,
    y: &[f64],
    ws: &mut Workspace,
    st: &mut SufficientStats,
) -> Result<()> {
    model.fill(y, &mut ws.emis, &mut ws.shift);
    st.log_likelihood += forward_into(params, &ws.emis, &ws.shift, &mut ws.alpha, &mut ws.scale)?;
    dispatch_states!(params.num_states(), backward_accumulate(params, y, ws, st));
    Ok(())
}

/// Backward sweep that folds posteriors and pairwise terms into `st` as β̂
/// is produced, so the β̂ table is never stored.
fn backward_accumulate<const M: usize>(params: &HmmParams, y: &[f64], ws: &Workspace, st: &mut SufficientStats) {
    let m = dim::<M>(params.num_states());
    let len = y.len();
    let a = &params.transitions()[..m * m];
    let alpha = &ws.alpha[..len * m];
    let emis = &ws.emis[..len * m];
    let mut beta = vec![1.0; m];
    let mut tmp = vec![0.0; m];
    let (occ, s1, s2) = (&mut st.occupancy[..m], &mut st.first_moment[..m], &mut st.second_moment[..m]);
    let xi = &mut st.transitions[..m * m];
    for t in (0..len).rev() {
        let al = &alpha[t * m..(t + 1) * m];
        if t + 1 < len {
            let b = &emis[(t + 1) * m..(t + 2) * m];
            let inv_c = 1.0 / ws.scale[t + 1];
            for j in 0..m {
                tmp[j] = b[j] * beta[j] * inv_c;
            }
            for i in 0..m {
                let row = &a[i * m..(i + 1) * m];
                let out = &mut xi[i * m..(i + 1) * m];
                let ai = al[i];
                let mut s = 0.0;
                for j in 0..m {
                    let w = row[j] * tmp[j];
                    out[j] += ai * w;
                    s += w;
                }
                beta[i] = s;
            }
        }
        let mut norm = 0.0;
        for i in 0..m {
            norm += al[i] * beta[i];
        }
        let inv = 1.0 / norm;
        let yt = y[t];
        for i in 0..m {
            let p = al[i] * beta[i] * inv;
            occ[i] += p;
            s1[i] += p * yt;
            s2[i] += p * yt * yt;
            if t == 0 {
                st.initial[i] += p;
            }
        }
    }
}

/// E-step over all traces. Traces are processed in fixed chunks and the
/// per-chunk statistics are merged in order, so the result does not depend
/// on the number of worker threads.
pub fn expected_statistics(params: &HmmParams, traces: &[SignalTrace]) -> Result<SufficientStats> {
    let m = params.num_states();
    let model = EmissionModel::new(params);
    let parts: Vec<Result<SufficientStats>> = traces
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut ws = Workspace::default();
            let mut st = SufficientStats::zeros(m);
            for (k, tr) in chunk.iter().enumerate() {
                accumulate_trace(params, &model, &tr.samples, &mut ws, &mut st)
                    .map_err(|e| e.in_trace(c * CHUNK + k))?;
            }
            Ok(st)
        })
        .collect();
    let mut total = SufficientStats::zeros(m);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// Σ_n log 𝓛_n over the traces.
pub fn total_log_likelihood(params: &HmmParams, traces: &[SignalTrace]) -> Result<f64> {
    let model = EmissionModel::new(params);
    let parts: Vec<Result<f64>> = traces
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut ws = Workspace::default();
            let mut ll = 0.0;
            for (k, tr) in chunk.iter().enumerate() {
                model.fill(&tr.samples, &mut ws.emis, &mut ws.shift);
                ll += forward_into(params, &ws.emis, &ws.shift, &mut ws.alpha, &mut ws.scale)
                    .map_err(|e| e.in_trace(c * CHUNK + k))?;
            }
            Ok(ll)
        })
        .collect();
    parts.into_iter().sum()
}

/// Distributes the mass not held by frozen entries over the free entries in
/// proportion to `counts`.
fn reestimate_simplex(old: &[f64], counts: &[f64], frozen: impl Fn(usize) -> bool) -> Vec<f64> {
    let frozen_mass: f64 = (0..old.len()).filter(|&k| frozen(k)).map(|k| old[k]).sum();
    let free_mass = (1.0 - frozen_mass).max(0.0);
    let free_count: f64 = (0..old.len()).filter(|&k| !frozen(k)).map(|k| counts[k]).sum();
    let old_free: f64 = (0..old.len()).filter(|&k| !frozen(k)).map(|k| old[k]).sum();
    let mut out: Vec<f64> = (0..old.len())
        .map(|k| {
            if frozen(k) {
                old[k]
            } else if free_count > 0.0 {
                free_mass * counts[k] / free_count
            } else if old_free > 0.0 {
                free_mass * old[k] / old_free
            } else {
                old[k]
            }
        })
        .collect();
    // absorb round-off in the largest free entry
    let s: f64 = out.iter().sum();
    if let Some(k) = (0..out.len()).filter(|&k| !frozen(k)).max_by(|&a, &b| out[a].total_cmp(&out[b])) {
        out[k] = (out[k] + 1.0 - s).clamp(0.0, 1.0);
    }
    out
}

/// M-step: parameters maximizing the expected complete-data LL.
pub fn maximize(
    params: &HmmParams,
    stats: &SufficientStats,
    frozen: &FrozenSet,
    ties: &Ties,
) -> Result<HmmParams> {
    let m = params.num_states();

    let initial = reestimate_simplex(params.initial(), &stats.initial, |i| frozen.contains(ParamId::Initial(i)));

    let mut means = params.means().to_vec();
    for g in Ties::groups(&ties.means, m) {
        if frozen.contains(ParamId::Mean(g[0])) {
            continue;
        }
        let s0: f64 = g.iter().map(|&i| stats.occupancy[i]).sum();
        if !(s0 > 0.0) {
            return Err(Error::EmptyStateOccupancy { state: g[0] + 1 });
        }
        let mu = g.iter().map(|&i| stats.first_moment[i]).sum::<f64>() / s0;
        for &i in &g {
            means[i] = mu;
        }
    }

    let mut variances = params.variances().to_vec();
    for g in Ties::groups(&ties.variances, m) {
        if frozen.contains(ParamId::Variance(g[0])) {
            continue;
        }
        let s0: f64 = g.iter().map(|&i| stats.occupancy[i]).sum();
        if !(s0 > 0.0) {
            return Err(Error::EmptyStateOccupancy { state: g[0] + 1 });
        }
        let q: f64 = g
            .iter()
            .map(|&i| {
                let mu = means[i];
                stats.second_moment[i] - 2.0 * mu * stats.first_moment[i] + mu * mu * stats.occupancy[i]
            })
            .sum();
        let v = (q / s0).max(VARIANCE_FLOOR);
        for &i in &g {
            variances[i] = v;
        }
    }

    let mut transitions = Vec::with_capacity(m * m);
    for i in 0..m {
        let row = reestimate_simplex(
            params.transition_row(i),
            &stats.transitions[i * m..(i + 1) * m],
            |j| frozen.contains(ParamId::Transition(i, j)),
        );
        transitions.extend(row);
    }

    let mut out = params.clone();
    out.set_parts(initial, means, variances, transitions)?;
    Ok(out)
}

/// One Baum-Welch reestimation of all non-frozen parameters.
pub fn baum_welch_step(params: &HmmParams, traces: &[SignalTrace], frozen: &FrozenSet) -> Result<HmmParams> {
    baum_welch_step_tied(params, traces, frozen, &Ties::none())
}

pub fn baum_welch_step_tied(
    params: &HmmParams,
    traces: &[SignalTrace],
    frozen: &FrozenSet,
    ties: &Ties,
) -> Result<HmmParams> {
    check_traces(params, traces)?;
    let stats = expected_statistics(params, traces)?;
    maximize(params, &stats, frozen, ties)
}

fn check_traces(params: &HmmParams, traces: &[SignalTrace]) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for (n, tr) in traces.iter().enumerate() {
        tr.validate(params.num_states()).map_err(|e| e.in_trace(n))?;
    }
    Ok(())
}

pub fn train(config: &TrainingConfig, traces: &[SignalTrace]) -> Result<TrainingResult> {
    train_with_observer(config, traces, |_| {})
}

/// Runs Baum-Welch to convergence, reporting every iteration to `observer`.
pub fn train_with_observer(
    config: &TrainingConfig,
    traces: &[SignalTrace],
    mut observer: impl FnMut(Progress),
) -> Result<TrainingResult> {
    config.validate()?;
    check_traces(&config.init_params, traces)?;
    run_em(config, traces, &mut observer)
}

pub(crate) fn run_em(
    config: &TrainingConfig,
    traces: &[SignalTrace],
    observer: &mut dyn FnMut(Progress),
) -> Result<TrainingResult> {
    let mut params = config.init_params.clone();
    let mut history = Vec::new();
    let mut iteration = 0;
    loop {
        let stats = expected_statistics(&params, traces).map_err(|e| Error::Training {
            iteration,
            source: Box::new(e),
        })?;
        let ll = stats.log_likelihood;
        log::debug!("baum-welch iteration {iteration}: LL = {ll:.6}");
        observer(Progress {
            iteration,
            log_likelihood: ll,
        });
        let gain = history.last().map(|prev: &f64| ll - prev);
        history.push(ll);
        if let Some(g) = gain {
            if g < config.ll_tolerance {
                return Ok(TrainingResult {
                    params,
                    ll_history: history,
                    iterations: iteration,
                    converged: true,
                });
            }
        }
        if iteration == config.max_iterations {
            log::warn!("baum-welch stopped after {iteration} iterations without converging");
            return Ok(TrainingResult {
                params,
                ll_history: history,
                iterations: iteration,
                converged: false,
            });
        }
        params = maximize(&params, &stats, &config.frozen, &config.ties).map_err(|e| Error::Training {
            iteration,
            source: Box::new(e),
        })?;
        iteration += 1;
    }
}

/// Baum-Welch with squared-extrapolation acceleration.
///
/// Each cycle takes two plain steps θ₀→θ₁→θ₂, extrapolates along
/// r = θ₁−θ₀ and v = θ₂−2θ₁+θ₀ to θ′ = θ₀ − 2αr + α²v, and keeps θ′ only if
/// its LL is at least that of θ₁; otherwise the cycle falls back to θ₂.
/// The LL recorded at the start of every cycle is therefore non-decreasing.
/// Stopping uses the same LL-gain rule as [`train`], applied per cycle, and
/// `max_iterations` bounds the number of plain steps.
pub fn train_accelerated(config: &TrainingConfig, traces: &[SignalTrace]) -> Result<TrainingResult> {
    config.validate()?;
    check_traces(&config.init_params, traces)?;
    run_accelerated(config, traces)
}

pub(crate) fn run_accelerated(config: &TrainingConfig, traces: &[SignalTrace]) -> Result<TrainingResult> {
    let wrap = |iteration: usize| move |e: Error| Error::Training {
        iteration,
        source: Box::new(e),
    };
    let step = |p: &HmmParams, st: &SufficientStats, it: usize| {
        maximize(p, st, &config.frozen, &config.ties).map_err(wrap(it))
    };
    let mut p0 = config.init_params.clone();
    let mut history: Vec<f64> = Vec::new();
    let mut steps = 0;
    loop {
        let s0 = expected_statistics(&p0, traces).map_err(wrap(steps))?;
        let ll0 = s0.log_likelihood;
        let gain = history.last().map(|prev| ll0 - prev);
        history.push(ll0);
        let done = |converged| TrainingResult {
            params: p0.clone(),
            ll_history: history.clone(),
            iterations: steps,
            converged,
        };
        if gain.is_some_and(|g| g < config.ll_tolerance) {
            return Ok(done(true));
        }
        if steps >= config.max_iterations {
            return Ok(done(false));
        }
        let p1 = step(&p0, &s0, steps)?;
        let s1 = expected_statistics(&p1, traces).map_err(wrap(steps + 1))?;
        if s1.log_likelihood - ll0 < config.ll_tolerance {
            history.push(s1.log_likelihood);
            return Ok(TrainingResult {
                params: p1,
                ll_history: history,
                iterations: steps + 1,
                converged: true,
            });
        }
        let p2 = step(&p1, &s1, steps + 1)?;
        steps += 2;
        let mut next = p2.clone();
        let mut alpha = extrapolation_length(&p0, &p1, &p2);
        while alpha < -1.0 {
            if let Some(q) = extrapolate(&p0, &p1, &p2, alpha) {
                if let Ok(sq) = expected_statistics(&q, traces) {
                    steps += 1;
                    if sq.log_likelihood >= s1.log_likelihood {
                        if let Ok(n) = maximize(&q, &sq, &config.frozen, &config.ties) {
                            next = n;
                        }
                        break;
                    }
                }
            }
            alpha = 0.5 * (alpha - 1.0);
            if alpha > -1.01 {
                break;
            }
        }
        p0 = next;
    }
}

fn raw(p: &HmmParams) -> impl Iterator<Item = f64> + '_ {
    p.initial()
        .iter()
        .chain(p.means())
        .chain(p.variances())
        .chain(p.transitions())
        .copied()
}

fn extrapolation_length(p0: &HmmParams, p1: &HmmParams, p2: &HmmParams) -> f64 {
    let (mut rr, mut vv) = (0.0, 0.0);
    for ((a, b), c) in raw(p0).zip(raw(p1)).zip(raw(p2)) {
        let r = b - a;
        let v = c - 2.0 * b + a;
        rr += r * r;
        vv += v * v;
    }
    if !(vv > 0.0) {
        return -1.0;
    }
    (-(rr / vv).sqrt()).clamp(-100.0, -1.0)
}

fn extrapolate(p0: &HmmParams, p1: &HmmParams, p2: &HmmParams, alpha: f64) -> Option<HmmParams> {
    let mix = |a: &[f64], b: &[f64], c: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .zip(c)
            .map(|((&x0, &x1), &x2)| {
                let r = x1 - x0;
                let v = x2 - 2.0 * x1 + x0;
                x0 - 2.0 * alpha * r + alpha * alpha * v
            })
            .collect()
    };
    let mut initial = mix(p0.initial(), p1.initial(), p2.initial());
    let means = mix(p0.means(), p1.means(), p2.means());
    let variances = mix(p0.variances(), p1.variances(), p2.variances());
    let mut transitions = mix(p0.transitions(), p1.transitions(), p2.transitions());
    let m = p0.num_states();
    if initial.iter().chain(&transitions).any(|&x| x < 0.0 || x > 1.0) || variances.iter().any(|&v| v < VARIANCE_FLOOR) {
        return None;
    }
    // entries equal in all three points are kept bit-exact
    for (k, x) in initial.iter_mut().enumerate() {
        if p0.initial()[k] == p1.initial()[k] && p1.initial()[k] == p2.initial()[k] {
            *x = p0.initial()[k];
        }
    }
    for (k, x) in transitions.iter_mut().enumerate() {
        let t = (p0.transitions()[k], p1.transitions()[k], p2.transitions()[k]);
        if t.0 == t.1 && t.1 == t.2 {
            *x = t.0;
        }
    }
    renormalize(&mut initial, p0.initial(), p1.initial(), p2.initial());
    for i in 0..m {
        let r = i * m..(i + 1) * m;
        renormalize(&mut transitions[r.clone()], &p0.transitions()[r.clone()], &p1.transitions()[r.clone()], &p2.transitions()[r]);
    }
    let mut out = p0.clone();
    let means = means
        .iter()
        .enumerate()
        .map(|(k, &x)| if p0.means()[k] == p1.means()[k] && p1.means()[k] == p2.means()[k] { p0.means()[k] } else { x })
        .collect();
    let variances = variances
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            if p0.variances()[k] == p1.variances()[k] && p1.variances()[k] == p2.variances()[k] {
                p0.variances()[k]
            } else {
                x
            }
        })
        .collect();
    out.set_parts(initial, means, variances, transitions).ok()?;
    Some(out)
}

/// Pushes round-off into the largest entry that moved.
fn renormalize(v: &mut [f64], a: &[f64], b: &[f64], c: &[f64]) {
    let s: f64 = v.iter().sum();
    let moving = (0..v.len()).filter(|&k| !(a[k] == b[k] && b[k] == c[k]));
    if let Some(k) = moving.max_by(|&x, &y| v[x].total_cmp(&v[y])) {
        v[k] = (v[k] + 1.0 - s).clamp(0.0, 1.0);
    }
}

/// Trains from several starting points and keeps the highest final LL
/// (the first one wins on ties).
pub fn train_restarts(config: &TrainingConfig, inits: &[HmmParams], traces: &[SignalTrace]) -> Result<TrainingResult> {
    let mut best: Option<TrainingResult> = None;
    let starts = std::iter::once(&config.init_params).chain(inits);
    for init in starts {
        let cfg = TrainingConfig {
            init_params: init.clone(),
            ..config.clone()
        };
        let r = train(&cfg, traces)?;
        if best.as_ref().is_none_or(|b| r.log_likelihood() > b.log_likelihood()) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one start"))
}
