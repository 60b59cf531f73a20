//! Threshold readout, its calibration, the averaging prefilter, and the
//! model-matched parameter mapping for correlated noise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{HmmParams, SignalTrace};
use crate::noise::{CorrelatedSampler, NoiseSpec};
use crate::rng;

/// Statistic a threshold decision is based on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Mean of the first `window` samples (PSB readout).
    IntegratedSignal,
    /// Maximum of the first `window` samples (Elzerman readout).
    PeakSignal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub mode: ThresholdMode,
    pub threshold: f64,
    /// Integration time or waiting time in samples.
    pub window: usize,
    /// State assigned when the statistic exceeds the threshold.
    pub high_state: usize,
    /// State assigned otherwise.
    pub low_state: usize,
}

impl ThresholdConfig {
    /// PSB convention: triplet (state 0) is the high-signal state, singlet
    /// (state 1) the low one.
    pub fn integrated(threshold: f64, window: usize) -> Self {
        ThresholdConfig {
            mode: ThresholdMode::IntegratedSignal,
            threshold,
            window,
            high_state: 0,
            low_state: 1,
        }
    }

    /// Elzerman convention: a blip means spin-up (state 0), its absence
    /// spin-down (state 2).
    pub fn peak(threshold: f64, window: usize) -> Self {
        ThresholdConfig {
            mode: ThresholdMode::PeakSignal,
            threshold,
            window,
            high_state: 0,
            low_state: 2,
        }
    }

    pub fn with_states(mut self, high_state: usize, low_state: usize) -> Self {
        self.high_state = high_state;
        self.low_state = low_state;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("threshold window must be at least 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config(format!("threshold must be finite, got {}", self.threshold)));
        }
        if self.high_state == self.low_state {
            return Err(Error::Config("high and low states must differ".into()));
        }
        Ok(())
    }

    /// Statistic over the first `window` samples.
    pub fn statistic(&self, trace: &SignalTrace) -> Result<f64> {
        if self.window > trace.len() || self.window == 0 {
            return Err(Error::WindowExceedsTrace {
                window: self.window,
                len: trace.len(),
            });
        }
        let head = &trace.samples[..self.window];
        Ok(match self.mode {
            ThresholdMode::IntegratedSignal => head.iter().sum::<f64>() / self.window as f64,
            ThresholdMode::PeakSignal => head.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Assigns the high state when the statistic is strictly above the
/// threshold, the low state otherwise.
pub fn threshold_assign(config: &ThresholdConfig, trace: &SignalTrace) -> Result<usize> {
    let s = config.statistic(trace)?;
    Ok(if s > config.threshold {
        config.high_state
    } else {
        config.low_state
    })
}

/// Number of threshold grid points.
pub const THRESHOLD_GRID: usize = 201;

/// Windows are tried exhaustively up to this length and on a geometric grid
/// beyond it.
pub const DENSE_WINDOWS: usize = 64;

const WINDOW_RATIO: f64 = 1.05;

/// Candidate windows for traces of length `len`.
pub fn window_grid(len: usize) -> Vec<usize> {
    let mut w: Vec<usize> = (1..=len.min(DENSE_WINDOWS)).collect();
    let mut next = DENSE_WINDOWS as f64;
    while let Some(&last) = w.last() {
        if last >= len {
            break;
        }
        next *= WINDOW_RATIO;
        let cand = (next.ceil() as usize).max(last + 1).min(len);
        w.push(cand);
    }
    w
}

/// Output of [`calibrate_threshold`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub config: ThresholdConfig,
    pub training_fidelity: f64,
    /// Training traces that started in the high or low state.
    pub n_traces: usize,
    pub grid: GridDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDiagnostics {
    pub threshold_min: f64,
    pub threshold_max: f64,
    pub threshold_points: usize,
    pub windows: Vec<usize>,
    /// Best training fidelity reached with each window.
    pub best_fidelity_per_window: Vec<f64>,
    /// Signal levels and noise scale used to place the threshold grid.
    pub level_low: f64,
    pub level_high: f64,
    pub noise_sd: f64,
}

/// Per-state sample mean and pooled within-state standard deviation from
/// ground-truth labels.
fn signal_levels(training: &[SignalTrace]) -> Result<(f64, f64, f64)> {
    let mut sums: Vec<(f64, f64, f64)> = Vec::new();
    for tr in training {
        let states = tr.true_states.as_ref().ok_or(Error::Unlabeled)?;
        for (&y, &s) in tr.samples.iter().zip(states) {
            if s >= sums.len() {
                sums.resize(s + 1, (0.0, 0.0, 0.0));
            }
            let e = &mut sums[s];
            e.0 += 1.0;
            e.1 += y;
            e.2 += y * y;
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ss, mut n) = (0.0, 0.0);
    for &(c, s1, s2) in &sums {
        if c > 0.0 {
            let m = s1 / c;
            lo = lo.min(m);
            hi = hi.max(m);
            ss += (s2 - s1 * m).max(0.0);
            n += c;
        }
    }
    if n == 0.0 {
        return Err(Error::Unlabeled);
    }
    Ok((lo, hi, (ss / n).sqrt()))
}

/// Grid search over (threshold, window) maximizing the fraction of correctly
/// assigned initial states. Only traces that start in `high_state` or
/// `low_state` take part. Ties go to the smallest window, then the smallest
/// threshold.
pub fn calibrate_threshold(
    mode: ThresholdMode,
    high_state: usize,
    low_state: usize,
    training: &[SignalTrace],
) -> Result<ThresholdCalibration> {
    if high_state == low_state {
        return Err(Error::Config("high and low states must differ".into()));
    }
    if training.iter().any(|t| t.true_states.is_none()) || training.is_empty() {
        return Err(Error::Unlabeled);
    }
    let (level_low, level_high, noise_sd) = signal_levels(training)?;
    let tmin = level_low - 2.0 * noise_sd;
    let tmax = level_high + 2.0 * noise_sd;
    let thresholds: Vec<f64> = (0..THRESHOLD_GRID)
        .map(|k| tmin + (tmax - tmin) * k as f64 / (THRESHOLD_GRID - 1) as f64)
        .collect();
    let len = training.iter().map(SignalTrace::len).min().unwrap_or(0);
    let windows = window_grid(len);

    let used: Vec<(&SignalTrace, bool)> = training
        .iter()
        .filter_map(|t| match t.initial_state() {
            Some(s) if s == high_state => Some((t, true)),
            Some(s) if s == low_state => Some((t, false)),
            _ => None,
        })
        .collect();
    if used.is_empty() {
        return Err(Error::Config(format!(
            "no training trace starts in state {} or {}",
            high_state + 1,
            low_state + 1
        )));
    }

    // counts[w][k]: traces whose statistic lies in (θ_{k-1}, θ_k], split by truth
    let nw = windows.len();
    let nb = THRESHOLD_GRID + 1;
    let tally = |mut acc: Vec<u32>, &(tr, high): &(&SignalTrace, bool)| {
        let base = if high { 0 } else { nw * nb };
        let (mut sum, mut peak) = (0.0, f64::NEG_INFINITY);
        let mut wi = 0;
        for (t, &y) in tr.samples.iter().enumerate() {
            sum += y;
            peak = peak.max(y);
            if wi < nw && windows[wi] == t + 1 {
                let s = match mode {
                    ThresholdMode::IntegratedSignal => sum / (t + 1) as f64,
                    ThresholdMode::PeakSignal => peak,
                };
                // first grid threshold ≥ s: the trace is "high" for all thresholds below it
                let bin = thresholds.partition_point(|&th| th < s);
                acc[base + wi * nb + bin] += 1;
                wi += 1;
            }
        }
        acc
    };
    let counts = used
        .par_iter()
        .fold(|| vec![0u32; 2 * nw * nb], tally)
        .reduce(
            || vec![0u32; 2 * nw * nb],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );

    let total = used.len();
    let mut best = (0usize, 0usize, 0usize);
    let mut per_window = Vec::with_capacity(nw);
    for wi in 0..nw {
        let hi = &counts[wi * nb..(wi + 1) * nb];
        let lo = &counts[nw * nb + wi * nb..nw * nb + (wi + 1) * nb];
        // threshold k: high traces with bin > k are right, low traces with bin ≤ k are right
        let mut high_above: usize = hi.iter().map(|&c| c as usize).sum();
        let mut low_below = 0usize;
        let mut window_best = 0;
        for k in 0..THRESHOLD_GRID {
            high_above -= hi[k] as usize;
            low_below += lo[k] as usize;
            let correct = high_above + low_below;
            window_best = window_best.max(correct);
            if correct > best.0 {
                best = (correct, wi, k);
            }
        }
        per_window.push(window_best as f64 / total as f64);
    }
    let (correct, wi, k) = best;
    Ok(ThresholdCalibration {
        config: ThresholdConfig {
            mode,
            threshold: thresholds[k],
            window: windows[wi],
            high_state,
            low_state,
        },
        training_fidelity: correct as f64 / total as f64,
        n_traces: total,
        grid: GridDiagnostics {
            threshold_min: tmin,
            threshold_max: tmax,
            threshold_points: THRESHOLD_GRID,
            windows,
            best_fidelity_per_window: per_window,
            level_low,
            level_high,
            noise_sd,
        },
    })
}

/// Block-averaging prefilter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub block_size: usize,
}

impl FilterConfig {
    pub fn new(block_size: usize) -> Self {
        FilterConfig { block_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("filter block size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Replaces each block of `block_size` samples by its mean and drops the
/// trailing remainder. Ground-truth states are downsampled by majority
/// within the block; ties go to the state that appears first.
pub fn averaging_filter(config: &FilterConfig, trace: &SignalTrace) -> Result<SignalTrace> {
    let ts = config.block_size;
    if ts == 0 || ts > trace.len() {
        return Err(Error::WindowExceedsTrace {
            window: ts,
            len: trace.len(),
        });
    }
    let samples: Vec<f64> = trace
        .samples
        .chunks_exact(ts)
        .map(|b| b.iter().sum::<f64>() / ts as f64)
        .collect();
    let true_states = trace
        .true_states
        .as_ref()
        .map(|states| states.chunks_exact(ts).map(majority).collect());
    Ok(SignalTrace {
        samples,
        true_states,
        sample_interval: trace.sample_interval.map(|dt| dt * ts as f64),
    })
}

fn majority(block: &[usize]) -> usize {
    let mut best = block[0];
    let mut best_count = 0;
    for (k, &s) in block.iter().enumerate() {
        if block[..k].contains(&s) {
            continue;
        }
        let c = block[k..].iter().filter(|&&x| x == s).count();
        if c > best_count {
            best = s;
            best_count = c;
        }
    }
    best
}

/// Noise traces used to measure the filtered noise variance.
pub const MATCHED_VARIANCE_TRACES: usize = 2000;

/// HMM parameters matched to a correlated-noise generator.
///
/// Without a filter (or with `block_size` 1) the variances become the noise
/// variance Σ₀. With a filter the off-diagonal transition probabilities are
/// scaled by t_s and the variances are the sample variance of filtered noise
/// traces of length `trace_len` generated without transitions.
pub fn model_matched_params(
    original: &HmmParams,
    noise: &NoiseSpec,
    filter: Option<&FilterConfig>,
    trace_len: usize,
    seed: u64,
) -> Result<HmmParams> {
    noise.validate()?;
    let m = original.num_states();
    let ts = match filter {
        Some(f) => {
            f.validate()?;
            f.block_size
        }
        None => 1,
    };
    if ts == 1 {
        return original.with_variances(vec![noise.variance(); m]);
    }
    if ts > trace_len {
        return Err(Error::WindowExceedsTrace { window: ts, len: trace_len });
    }
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = vec![0.0; m];
        let mut off = 0.0;
        for j in 0..m {
            if i != j {
                let v = original.transition(i, j) * ts as f64;
                if v >= 1.0 {
                    return Err(Error::ScaledProbabilityInvalid { i: i + 1, j: j + 1, value: v });
                }
                row[j] = v;
                off += v;
            }
        }
        if off > 1.0 {
            return Err(Error::ScaledProbabilityInvalid {
                i: i + 1,
                j: i + 1,
                value: 1.0 - off,
            });
        }
        row[i] = 1.0 - off;
        rows.push(row);
    }
    let variance = filtered_noise_variance(noise, ts, trace_len, MATCHED_VARIANCE_TRACES, seed)?;
    let mut out = HmmParams::new(original.initial().to_vec(), original.means().to_vec(), vec![variance; m], rows)?;
    if !original.labels().is_empty() {
        out = out.with_labels(original.labels().iter().cloned())?;
    }
    Ok(out)
}

/// Sample variance of block-averaged noise over `n_traces` traces.
pub fn filtered_noise_variance(noise: &NoiseSpec, block_size: usize, trace_len: usize, n_traces: usize, seed: u64) -> Result<f64> {
    let sampler = CorrelatedSampler::new(noise, trace_len)?;
    let filter = FilterConfig::new(block_size);
    let parts: Vec<(f64, f64, f64)> = (0..n_traces as u64)
        .into_par_iter()
        .map(|k| {
            let y = sampler.sample(&mut rng::stream(seed, k));
            let f = averaging_filter(&filter, &SignalTrace::new(y)).expect("block fits the trace");
            let s1: f64 = f.samples.iter().sum();
            let s2: f64 = f.samples.iter().map(|v| v * v).sum();
            (f.samples.len() as f64, s1, s2)
        })
        .collect();
    let (n, s1, s2) = parts.iter().fold((0.0, 0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    if n < 2.0 {
        return Err(Error::Config("too few filtered samples to estimate a variance".into()));
    }
    let mean = s1 / n;
    Ok((s2 - n * mean * mean) / (n - 1.0))
}

/// Gaussian emission of one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian {
    pub fn new(mean: f64, variance: f64) -> Self {
        Gaussian { mean, variance }
    }
}

/// ln P(A|y) − ln P(B|y) for two states without transitions.
///
/// Computed from the sufficient statistics ȳ and the mean of y²; positive
/// values favor A.
pub fn log_posterior_ratio_two_state(prior_a: f64, prior_b: f64, a: Gaussian, b: Gaussian, trace: &SignalTrace) -> f64 {
    let t = trace.len() as f64;
    let mean = trace.samples.iter().sum::<f64>() / t;
    let mean_sq = trace.samples.iter().map(|y| y * y).sum::<f64>() / t;
    let (va, vb) = (a.variance, b.variance);
    (prior_a / prior_b).ln()
        + 0.5 * t * (vb / va).ln()
        + t * (b.mean * b.mean / (2.0 * vb) - a.mean * a.mean / (2.0 * va)
            + mean_sq * (1.0 / (2.0 * vb) - 1.0 / (2.0 * va))
            + mean * (a.mean / va - b.mean / vb))
}

/// Integrated-signal threshold at which the log posterior ratio of two
/// equal-variance states vanishes for traces of length `len`.
pub fn equal_variance_threshold(prior_a: f64, prior_b: f64, mean_a: f64, mean_b: f64, variance: f64, len: usize) -> f64 {
    0.5 * (mean_a + mean_b) + variance * (prior_a / prior_b).ln() / (len as f64 * (mean_b - mean_a))
}
