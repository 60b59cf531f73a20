//! Scaled forward-backward recursions.
//!
//! α̂_t is normalized to sum to one at every step and the normalizers c_t are
//! kept, so log 𝓛 = Σ_t log c_t and β̂ reuses the same c_t. Emission
//! densities that would underflow (< 1e-300) are evaluated in log space and
//! shifted by their per-step maximum; the shift is added back into the
//! log-likelihood.

use crate::error::{Error, Result};

use super::{HmmParams, SignalTrace};

const LN_TINY: f64 = -690.775_527_898_213_7; // ln(1e-300)
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian emission density b_i(y).
pub fn emission_density(params: &HmmParams, state: usize, y: f64) -> f64 {
    let var = params.variances()[state];
    let d = y - params.means()[state];
    (-(d * d) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Per-state constants for evaluating log b_i(y).
pub(crate) struct EmissionModel {
    means: Vec<f64>,
    half_inv_var: Vec<f64>,
    log_norm: Vec<f64>,
}

impl EmissionModel {
    pub(crate) fn new(params: &HmmParams) -> Self {
        let v = params.variances();
        EmissionModel {
            means: params.means().to_vec(),
            half_inv_var: v.iter().map(|v| 0.5 / v).collect(),
            log_norm: v.iter().map(|v| -0.5 * (LN_2PI + v.ln())).collect(),
        }
    }

    /// Fills `out` (T×M) with shifted densities and `shift` with the log shift
    /// applied at each step (zero unless a density would underflow).
    pub(crate) fn fill(&self, samples: &[f64], out: &mut Vec<f64>, shift: &mut Vec<f64>) {
        dispatch_states!(self.means.len(), fill_kernel(self, samples, out, shift))
    }
}

fn fill_kernel<const M: usize>(model: &EmissionModel, samples: &[f64], out: &mut Vec<f64>, shift: &mut Vec<f64>) {
    let m = dim::<M>(model.means.len());
    let (means, hiv, norm) = (&model.means[..m], &model.half_inv_var[..m], &model.log_norm[..m]);
    out.clear();
    out.resize(samples.len() * m, 0.0);
    shift.clear();
    shift.resize(samples.len(), 0.0);
    for ((&y, row), sh) in samples.iter().zip(out.chunks_exact_mut(m)).zip(shift.iter_mut()) {
        let mut min = f64::INFINITY;
        for i in 0..m {
            let d = y - means[i];
            let l = norm[i] - d * d * hiv[i];
            row[i] = l;
            min = min.min(l);
        }
        if min > LN_TINY {
            for x in row.iter_mut() {
                *x = x.exp();
            }
        } else {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            *sh = max;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
            }
        }
    }
}

/// Resolves the state count of a kernel: `M` when specialized, `m` otherwise.
#[inline(always)]
pub(crate) fn dim<const M: usize>(m: usize) -> usize {
    if M == 0 {
        m
    } else {
        M
    }
}

/// Calls `$f::<M>` specialized for small state counts.
macro_rules! dispatch_states {
    ($m:expr, $f:ident($($arg:expr),*)) => {
        match $m {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            3 => $f::<3>($($arg),*),
            4 => $f::<4>($($arg),*),
            _ => $f::<0>($($arg),*),
        }
    };
}
pub(crate) use dispatch_states;

/// Running Σ ln c_t that takes a logarithm only every few dozen steps.
pub(crate) struct LogSum {
    prod: f64,
    log: f64,
}

impl LogSum {
    pub(crate) fn new() -> Self {
        LogSum { prod: 1.0, log: 0.0 }
    }

    #[inline(always)]
    pub(crate) fn push(&mut self, c: f64) {
        if c > 1e-50 && c < 1e50 {
            self.prod *= c;
            if !(self.prod > 1e-200 && self.prod < 1e200) {
                self.log += self.prod.ln();
                self.prod = 1.0;
            }
        } else {
            self.log += c.ln();
        }
    }

    pub(crate) fn value(&self) -> f64 {
        self.log + self.prod.ln()
    }
}

/// Forward recursion into caller-provided buffers. Returns log 𝓛.
pub(crate) fn forward_into(
    params: &HmmParams,
    emis: &[f64],
    shift: &[f64],
    alpha: &mut Vec<f64>,
    scale: &mut Vec<f64>,
) -> Result<f64> {
    dispatch_states!(params.num_states(), forward_kernel(params, emis, shift, alpha, scale))
}

fn forward_kernel<const M: usize>(
    params: &HmmParams,
    emis: &[f64],
    shift: &[f64],
    alpha: &mut Vec<f64>,
    scale: &mut Vec<f64>,
) -> Result<f64> {
    let m = dim::<M>(params.num_states());
    let len = shift.len();
    let a = &params.transitions()[..m * m];
    let emis = &emis[..len * m];
    alpha.clear();
    alpha.resize(len * m, 0.0);
    scale.clear();
    scale.resize(len, 0.0);

    let mut logs = LogSum::new();
    let mut c = 0.0;
    for i in 0..m {
        let v = params.initial()[i] * emis[i];
        alpha[i] = v;
        c += v;
    }
    if !(c > 0.0) {
        return Err(Error::AllStatesImpossible { t: 0 });
    }
    let inv = 1.0 / c;
    for v in &mut alpha[..m] {
        *v *= inv;
    }
    scale[0] = c;
    logs.push(c);

    for t in 1..len {
        let (prev, cur) = alpha[(t - 1) * m..(t + 1) * m].split_at_mut(m);
        let b = &emis[t * m..(t + 1) * m];
        for i in 0..m {
            cur[i] = 0.0;
        }
        for j in 0..m {
            let pj = prev[j];
            let row = &a[j * m..(j + 1) * m];
            for i in 0..m {
                cur[i] += pj * row[i];
            }
        }
        let mut c = 0.0;
        for i in 0..m {
            cur[i] *= b[i];
            c += cur[i];
        }
        if !(c > 0.0) {
            return Err(Error::AllStatesImpossible { t });
        }
        let inv = 1.0 / c;
        for v in cur.iter_mut() {
            *v *= inv;
        }
        scale[t] = c;
        logs.push(c);
    }
    Ok(logs.value() + shift.iter().sum::<f64>())
}

/// Backward recursion sharing the forward normalizers.
pub(crate) fn backward_into(params: &HmmParams, emis: &[f64], scale: &[f64], beta: &mut Vec<f64>) {
    dispatch_states!(params.num_states(), backward_kernel(params, emis, scale, beta))
}

fn backward_kernel<const M: usize>(params: &HmmParams, emis: &[f64], scale: &[f64], beta: &mut Vec<f64>) {
    let m = dim::<M>(params.num_states());
    let len = scale.len();
    let a = &params.transitions()[..m * m];
    beta.clear();
    beta.resize(len * m, 0.0);
    beta[(len - 1) * m..].fill(1.0);
    let mut tmp = vec![0.0; m];
    for t in (0..len.saturating_sub(1)).rev() {
        let b = &emis[(t + 1) * m..(t + 2) * m];
        let inv = 1.0 / scale[t + 1];
        let (cur, next) = beta[t * m..(t + 2) * m].split_at_mut(m);
        for j in 0..m {
            tmp[j] = b[j] * next[j] * inv;
        }
        for i in 0..m {
            let row = &a[i * m..(i + 1) * m];
            let mut s = 0.0;
            for j in 0..m {
                s += row[j] * tmp[j];
            }
            cur[i] = s;
        }
    }
}

/// Result of the forward pass over one trace.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    num_states: usize,
    /// Normalized forward variables, T×M row-major; each row sums to one.
    pub alpha: Vec<f64>,
    /// Per-step normalizers c_t (after any emission shift).
    pub scaling: Vec<f64>,
    pub log_likelihood: f64,
}

impl ForwardPass {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.alpha[t * self.num_states..(t + 1) * self.num_states]
    }
}

pub fn forward(params: &HmmParams, trace: &SignalTrace) -> Result<ForwardPass> {
    trace.validate(params.num_states())?;
    let (mut emis, mut shift) = (Vec::new(), Vec::new());
    EmissionModel::new(params).fill(&trace.samples, &mut emis, &mut shift);
    let (mut alpha, mut scaling) = (Vec::new(), Vec::new());
    let log_likelihood = forward_into(params, &emis, &shift, &mut alpha, &mut scaling)?;
    Ok(ForwardPass {
        num_states: params.num_states(),
        alpha,
        scaling,
        log_likelihood,
    })
}

/// Scaled backward variables (T×M) for the normalizers of a forward pass on
/// the same trace.
pub fn backward(params: &HmmParams, trace: &SignalTrace, scaling: &[f64]) -> Result<Vec<f64>> {
    trace.validate(params.num_states())?;
    if scaling.len() != trace.len() {
        return Err(Error::LengthMismatch {
            expected: trace.len(),
            found: scaling.len(),
        });
    }
    let (mut emis, mut shift) = (Vec::new(), Vec::new());
    EmissionModel::new(params).fill(&trace.samples, &mut emis, &mut shift);
    let mut beta = Vec::new();
    backward_into(params, &emis, scaling, &mut beta);
    Ok(beta)
}

/// State posteriors P_t(i) for every time step of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    num_states: usize,
    /// T×M row-major.
    pub posteriors: Vec<f64>,
    pub log_likelihood: f64,
    pub scaling: Vec<f64>,
}

impl PosteriorTable {
    pub fn len(&self) -> usize {
        self.scaling.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scaling.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.posteriors[t * self.num_states..(t + 1) * self.num_states]
    }

    pub fn get(&self, t: usize, state: usize) -> f64 {
        self.posteriors[t * self.num_states + state]
    }
}

pub fn posteriors(params: &HmmParams, trace: &SignalTrace) -> Result<PosteriorTable> {
    trace.validate(params.num_states())?;
    let m = params.num_states();
    let (mut emis, mut shift) = (Vec::new(), Vec::new());
    EmissionModel::new(params).fill(&trace.samples, &mut emis, &mut shift);
    let (mut alpha, mut scaling, mut beta) = (Vec::new(), Vec::new(), Vec::new());
    let log_likelihood = forward_into(params, &emis, &shift, &mut alpha, &mut scaling)?;
    backward_into(params, &emis, &scaling, &mut beta);
    let mut post = alpha;
    for (row, brow) in post.chunks_exact_mut(m).zip(beta.chunks_exact(m)) {
        let mut s = 0.0;
        for (p, b) in row.iter_mut().zip(brow) {
            *p *= b;
            s += *p;
        }
        for p in row.iter_mut() {
            *p /= s;
        }
    }
    Ok(PosteriorTable {
        num_states: m,
        posteriors: post,
        log_likelihood,
        scaling,
    })
}

/// Most probable initial state and its posterior probability.
/// Exact ties go to the lowest state index.
pub fn decide_initial_state(table: &PosteriorTable) -> (usize, f64) {
    let row = table.row(0);
    let mut best = 0;
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = i;
        }
    }
    (best, row[best])
}

/// Initial-state decision restricted to `candidates`, with the returned
/// probability renormalized over the candidate set. Ties go to the
/// candidate with the lowest state index.
pub fn decide_initial_state_among(table: &PosteriorTable, candidates: &[usize]) -> (usize, f64) {
    let row = table.row(0);
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    let mut best = sorted[0];
    for &i in &sorted[1..] {
        if row[i] > row[best] {
            best = i;
        }
    }
    let total: f64 = sorted.iter().map(|&i| row[i]).sum();
    let p = if total > 0.0 { row[best] / total } else { 1.0 / sorted.len() as f64 };
    (best, p)
}
