//! Stationary noise synthesis and state-sequence sampling.
//!
//! Correlated noise is drawn in the Fourier domain: each frequency
//! component y_k is Gaussian with variance set by the spectrum Λ_k, the
//! components obey y_{T−k} = conj(y_k), and the trace is the inverse
//! transform y_t = T^{-1/2} Σ_k y_k exp(i2πtk/T). Traces are periodic, so
//! the generated noise is circularly stationary.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{HmmParams, SignalTrace};

/// Shape of a stationary noise process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum NoiseKind {
    White { variance: f64 },
    GaussianSpectrum { variance: f64, correlation_time: f64 },
    /// Explicit spectrum Λ_k for a fixed trace length.
    Explicit { spectrum: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    #[serde(default)]
    pub mean: f64,
}

impl NoiseSpec {
    pub fn white(variance: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::White { variance },
            mean: 0.0,
        }
    }

    pub fn gaussian(variance: f64, correlation_time: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::GaussianSpectrum {
                variance,
                correlation_time,
            },
            mean: 0.0,
        }
    }

    pub fn explicit(spectrum: Vec<f64>) -> Self {
        NoiseSpec {
            kind: NoiseKind::Explicit { spectrum },
            mean: 0.0,
        }
    }

    pub fn with_mean(mut self, mean: f64) -> Self {
        self.mean = mean;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() {
            return Err(Error::Config(format!("noise mean {} is not finite", self.mean)));
        }
        match &self.kind {
            NoiseKind::White { variance } => check_variance(*variance),
            NoiseKind::GaussianSpectrum {
                variance,
                correlation_time,
            } => {
                check_variance(*variance)?;
                if !(correlation_time.is_finite() && *correlation_time >= 0.0) {
                    return Err(Error::Config(format!(
                        "correlation time {correlation_time} must be >= 0"
                    )));
                }
                Ok(())
            }
            NoiseKind::Explicit { spectrum } => {
                let n = spectrum.len();
                if n == 0 {
                    return Err(Error::Config("explicit spectrum is empty".into()));
                }
                if let Some(x) = spectrum.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                    return Err(Error::Config(format!("spectrum entry {x} is negative")));
                }
                for k in 1..n {
                    let (a, b) = (spectrum[k], spectrum[n - k]);
                    if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                        return Err(Error::Config(format!(
                            "spectrum is not mirror-symmetric at k={k}"
                        )));
                    }
                }
                if spectrum.iter().all(|x| *x == 0.0) {
                    return Err(Error::Config("spectrum is identically zero".into()));
                }
                Ok(())
            }
        }
    }

    /// Spectrum Λ_k for traces of length `len`.
    pub fn spectrum(&self, len: usize) -> Result<Vec<f64>> {
        match &self.kind {
            NoiseKind::White { variance } => Ok(vec![*variance; len]),
            NoiseKind::GaussianSpectrum {
                variance,
                correlation_time,
            } => Ok(gaussian_spectrum(*variance, *correlation_time, len)),
            NoiseKind::Explicit { spectrum } => {
                if spectrum.len() != len {
                    return Err(Error::LengthMismatch {
                        expected: len,
                        found: spectrum.len(),
                    });
                }
                Ok(spectrum.clone())
            }
        }
    }

    /// Per-sample variance Σ₀ = (1/T) Σ_k Λ_k.
    pub fn variance(&self) -> f64 {
        match &self.kind {
            NoiseKind::White { variance } | NoiseKind::GaussianSpectrum { variance, .. } => *variance,
            NoiseKind::Explicit { spectrum } => spectrum.iter().sum::<f64>() / spectrum.len() as f64,
        }
    }

    pub fn is_white(&self) -> bool {
        match &self.kind {
            NoiseKind::White { .. } => true,
            NoiseKind::GaussianSpectrum { correlation_time, .. } => *correlation_time == 0.0,
            NoiseKind::Explicit { .. } => false,
        }
    }
}

fn check_variance(v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("noise variance {v} must be positive")))
    }
}

/// Gaussian-shaped spectrum with correlation time `correlation_time`
/// (in time steps), mirrored so that Λ_k = Λ_{T−k}.
///
/// The shape is Λ_k ∝ exp[−(kπT_c/T)²] for k ≤ ⌊T/2⌋, scaled so that
/// (1/T)Σ_k Λ_k equals `variance` exactly. `correlation_time == 0` gives the
/// flat (white) spectrum.
pub fn gaussian_spectrum(variance: f64, correlation_time: f64, len: usize) -> Vec<f64> {
    if correlation_time == 0.0 {
        return vec![variance; len];
    }
    let scale = variance * correlation_time * std::f64::consts::PI.sqrt();
    let mut out = vec![0.0; len];
    for k in 0..=len / 2 {
        let x = k as f64 * std::f64::consts::PI * correlation_time / len as f64;
        out[k] = scale * (-x * x).exp();
    }
    for k in len / 2 + 1..len {
        out[k] = out[len - k];
    }
    // truncation at T/2 loses variance for short correlation times
    let mean = out.iter().sum::<f64>() / len as f64;
    let fix = variance / mean;
    for x in &mut out {
        *x *= fix;
    }
    out
}

/// Autocorrelation Σ_j = (1/T) Σ_k Λ_k exp(i2πjk/T), the inverse of the
/// spectrum definition.
pub fn autocorrelation_from_spectrum(spectrum: &[f64]) -> Vec<f64> {
    let n = spectrum.len();
    let mut buf: Vec<Complex64> = spectrum.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Reusable Fourier-domain sampler for one spectrum and trace length.
#[derive(Clone)]
pub struct CorrelatedSampler {
    len: usize,
    mean: f64,
    /// Standard deviation of ℜy_k (and ℑy_k where it is free).
    real_sd: Vec<f64>,
    imag_sd: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CorrelatedSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorrelatedSampler")
            .field("len", &self.len)
            .field("mean", &self.mean)
            .finish_non_exhaustive()
    }
}

impl CorrelatedSampler {
    pub fn new(spec: &NoiseSpec, len: usize) -> Result<Self> {
        spec.validate()?;
        if len == 0 {
            return Err(Error::Config("trace length must be at least 1".into()));
        }
        let spectrum = spec.spectrum(len)?;
        let half = len / 2;
        let even = len % 2 == 0;
        let mut real_sd = vec![0.0; half + 1];
        let mut imag_sd = vec![0.0; half + 1];
        for k in 0..=half {
            // density ∝ exp(−d_k x²/Λ_k)  ⇒  variance Λ_k / (2 d_k)
            let self_conjugate = k == 0 || (even && k == half);
            let d = if self_conjugate { 0.5 } else { 1.0 };
            real_sd[k] = (spectrum[k] / (2.0 * d)).sqrt();
            imag_sd[k] = if self_conjugate { 0.0 } else { real_sd[k] };
        }
        Ok(CorrelatedSampler {
            len,
            mean: spec.mean,
            real_sd,
            imag_sd,
            fft: FftPlanner::new().plan_fft_inverse(len),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn with_mean(mut self, mean: f64) -> Self {
        self.mean = mean;
        self
    }

    /// Draws one trace; also returns the largest imaginary residue of the
    /// inverse transform.
    pub fn sample_with_residue<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let n = self.len;
        let root_n = (n as f64).sqrt();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for k in 0..self.real_sd.len() {
            let re: f64 = rng.sample::<f64, _>(StandardNormal) * self.real_sd[k];
            let im: f64 = if self.imag_sd[k] > 0.0 {
                rng.sample::<f64, _>(StandardNormal) * self.imag_sd[k]
            } else {
                0.0
            };
            let re = if k == 0 { re + root_n * self.mean } else { re };
            buf[k] = Complex64::new(re, im);
            if k != 0 && n - k != k {
                buf[n - k] = Complex64::new(re, -im);
            }
        }
        self.fft.process(&mut buf);
        let mut residue: f64 = 0.0;
        let out = buf
            .iter()
            .map(|c| {
                residue = residue.max(c.im.abs() / root_n);
                c.re / root_n
            })
            .collect();
        (out, residue)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.sample_with_residue(rng).0
    }
}

/// One correlated-noise trace of length `len` with the given spectrum.
pub fn sample_correlated_trace<R: Rng + ?Sized>(spec: &NoiseSpec, len: usize, rng: &mut R) -> Result<Vec<f64>> {
    Ok(CorrelatedSampler::new(spec, len)?.sample(rng))
}

/// Hidden state path of one trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSequence {
    pub states: Vec<usize>,
    pub initial_state: usize,
}

#[inline]
fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_nonzero = i;
            if u < acc {
                return i;
            }
        }
    }
    last_nonzero
}

/// Markov chain path of length `len` starting in `initial_state`.
pub fn sample_state_sequence<R: Rng + ?Sized>(
    params: &HmmParams,
    initial_state: usize,
    len: usize,
    rng: &mut R,
) -> Result<StateSequence> {
    if initial_state >= params.num_states() {
        return Err(Error::InvalidTrace(format!(
            "initial state {} outside 1..={}",
            initial_state + 1,
            params.num_states()
        )));
    }
    let mut states = Vec::with_capacity(len);
    let mut s = initial_state;
    for t in 0..len {
        if t > 0 {
            let row = params.transition_row(s);
            // staying put is by far the common case
            if row[s] < 1.0 {
                s = draw_categorical(row, rng);
            }
        }
        states.push(s);
    }
    Ok(StateSequence {
        states,
        initial_state,
    })
}

/// Trace built from per-state noise traces: y_t = y_t^{(s_t)}.
pub fn compose_trace(seq: &StateSequence, per_state_noise: &[Vec<f64>]) -> Result<SignalTrace> {
    let len = seq.states.len();
    for v in per_state_noise {
        if v.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                found: v.len(),
            });
        }
    }
    let samples = seq
        .states
        .iter()
        .enumerate()
        .map(|(t, &s)| {
            per_state_noise
                .get(s)
                .map(|v| v[t])
                .ok_or_else(|| Error::InvalidTrace(format!("no noise trace for state {}", s + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    SignalTrace::with_states(samples, seq.states.clone())
}

/// White-noise trace drawn from the HMM itself.
pub fn sample_hmm_trace<R: Rng + ?Sized>(
    params: &HmmParams,
    initial_state: Option<usize>,
    len: usize,
    rng: &mut R,
) -> Result<SignalTrace> {
    let s0 = match initial_state {
        Some(s) => s,
        None => draw_categorical(params.initial(), rng),
    };
    let seq = sample_state_sequence(params, s0, len, rng)?;
    let sd: Vec<f64> = params.variances().iter().map(|v| v.sqrt()).collect();
    let samples = seq
        .states
        .iter()
        .map(|&s| params.means()[s] + sd[s] * rng.sample::<f64, _>(StandardNormal))
        .collect();
    SignalTrace::with_states(samples, seq.states)
}

/// Trace with correlated noise: one independent noise trace per state, each
/// with that state's mean, stitched along a sampled state path.
pub fn sample_correlated_hmm_trace<R: Rng + ?Sized>(
    params: &HmmParams,
    sampler: &CorrelatedSampler,
    initial_state: Option<usize>,
    rng: &mut R,
) -> Result<SignalTrace> {
    let s0 = match initial_state {
        Some(s) => s,
        None => draw_categorical(params.initial(), rng),
    };
    let seq = sample_state_sequence(params, s0, sampler.len(), rng)?;
    let mut noise = vec![Vec::new(); params.num_states()];
    let mut visited = vec![false; params.num_states()];
    for &s in &seq.states {
        visited[s] = true;
    }
    for (i, slot) in noise.iter_mut().enumerate() {
        // draw for every state so the stream layout does not depend on the path
        let v = sampler.clone().with_mean(params.means()[i]).sample(rng);
        if visited[i] {
            *slot = v;
        } else {
            *slot = vec![0.0; sampler.len()];
        }
    }
    compose_trace(&seq, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn psb(a12: f64) -> HmmParams {
        HmmParams::new(
            vec![0.5, 0.5],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![vec![1.0 - a12, a12], vec![0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn flat_spectrum_for_zero_correlation_time() {
        assert_eq!(gaussian_spectrum(2.5, 0.0, 7), vec![2.5; 7]);
    }

    #[test]
    fn spectrum_is_mirrored_and_normalized() {
        for (tc, len) in [(1.0, 1000), (3.0, 300), (10.0, 1000), (2.0, 31)] {
            let s = gaussian_spectrum(1.7, tc, len);
            for k in 1..len {
                assert_eq!(s[k], s[len - k]);
            }
            let mean = s.iter().sum::<f64>() / len as f64;
            assert!((mean - 1.7).abs() < 1e-9 * 1.7);
        }
    }

    #[test]
    fn spectrum_matches_gaussian_autocorrelation() {
        // inverse transform ≈ Σ₀ exp(−(j/T_c)²) once T_c is a few steps
        for tc in [3.0, 10.0] {
            let ac = autocorrelation_from_spectrum(&gaussian_spectrum(1.0, tc, 1000));
            for j in 0..=30usize {
                let target = (-(j as f64 / tc).powi(2)).exp();
                assert!((ac[j] - target).abs() < 1e-6, "tc={tc} j={j}: {} vs {target}", ac[j]);
            }
        }
        // at T_c=1 the sampled Gaussian is too narrow for the approximation
        let ac = autocorrelation_from_spectrum(&gaussian_spectrum(1.0, 1.0, 1000));
        assert!((ac[0] - 1.0).abs() < 1e-12);
        assert!((ac[1] - (-1.0f64).exp()).abs() < 0.05);
    }

    #[test]
    fn generated_traces_are_real_and_seeded() {
        let s = CorrelatedSampler::new(&NoiseSpec::gaussian(1.0, 3.0), 300).unwrap();
        for n in 0..20 {
            let (_, res) = s.sample_with_residue(&mut rng::stream(11, n));
            assert!(res < 1e-9);
        }
        let odd = CorrelatedSampler::new(&NoiseSpec::gaussian(1.0, 2.0), 301).unwrap();
        let (_, res) = odd.sample_with_residue(&mut rng::stream(11, 0));
        assert!(res < 1e-9);
        let a = s.sample(&mut rng::stream(5, 9));
        let b = s.sample(&mut rng::stream(5, 9));
        assert_eq!(a, b);
    }

    #[test]
    fn mean_is_injected() {
        let s = CorrelatedSampler::new(&NoiseSpec::gaussian(1.0, 3.0).with_mean(2.5), 64).unwrap();
        let n = 4000;
        let mut acc = vec![0.0; 64];
        for k in 0..n {
            for (a, y) in acc.iter_mut().zip(s.sample(&mut rng::stream(3, k))) {
                *a += y;
            }
        }
        for a in acc {
            // standard error 1/sqrt(4000) ≈ 0.016
            assert!((a / n as f64 - 2.5).abs() < 0.08);
        }
    }

    #[test]
    fn white_spectrum_has_no_lag_one_correlation() {
        let s = CorrelatedSampler::new(&NoiseSpec::explicit(vec![1.0; 50]), 50).unwrap();
        let n = 10_000u64;
        let (mut m, mut c1) = (Vec::new(), Vec::new());
        for k in 0..n {
            let y = s.sample(&mut rng::stream(21, k));
            m.push(y.iter().sum::<f64>() / 50.0);
            c1.push((0..50).map(|t| y[t] * y[(t + 1) % 50]).sum::<f64>() / 50.0);
        }
        let stat = |v: &[f64]| {
            let mu = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (mu, (var / v.len() as f64).sqrt())
        };
        let (mu, se) = stat(&m);
        assert!(mu.abs() < 5.0 * se);
        let (c, se) = stat(&c1);
        assert!(c.abs() < 5.0 * se);
    }

    #[test]
    fn rejects_asymmetric_spectrum() {
        assert!(NoiseSpec::explicit(vec![1.0, 2.0, 3.0]).validate().is_err());
        assert!(NoiseSpec::explicit(vec![1.0, 2.0, 2.0]).validate().is_ok());
        assert!(NoiseSpec::gaussian(1.0, -1.0).validate().is_err());
        assert!(NoiseSpec::white(0.0).validate().is_err());
    }

    #[test]
    fn state_sequences() {
        let id = HmmParams::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = sample_state_sequence(&id, 1, 50, &mut rng::stream(1, 0)).unwrap();
        assert!(s.states.iter().all(|&x| x == 1));
        let jump = HmmParams::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 1.0], vec![vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let s = sample_state_sequence(&jump, 0, 5, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(s.states, vec![0, 1, 1, 1, 1]);
        assert!(sample_state_sequence(&jump, 2, 5, &mut rng::stream(1, 0)).is_err());
    }

    #[test]
    fn decay_frequency_matches_rate() {
        // the chain restarts in state 1 after each decay so every step is a trial
        let p = psb(0.01);
        let mut rng = rng::stream(8, 0);
        let trials = 100_000;
        let mut decays = 0u64;
        for _ in 0..trials {
            let s = sample_state_sequence(&p, 0, 2, &mut rng).unwrap();
            decays += s.states[1] as u64;
        }
        let sd = (trials as f64 * 0.01 * 0.99).sqrt();
        assert!((decays as f64 - 1000.0).abs() < 5.0 * sd, "{decays}");
    }

    #[test]
    fn composition() {
        let seq = StateSequence {
            states: vec![0, 0, 1, 1],
            initial_state: 0,
        };
        let tr = compose_trace(&seq, &[vec![1.0; 4], vec![0.0; 4]]).unwrap();
        assert_eq!(tr.samples, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(tr.true_states.as_deref(), Some(&[0, 0, 1, 1][..]));
        let constant = StateSequence {
            states: vec![1; 3],
            initial_state: 1,
        };
        let tr = compose_trace(&constant, &[vec![9.0; 3], vec![0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(tr.samples, vec![0.1, 0.2, 0.3]);
        assert!(compose_trace(&seq, &[vec![1.0; 3], vec![0.0; 4]]).is_err());
    }

    #[test]
    fn hmm_trace_with_tiny_noise_follows_means() {
        let p = psb(0.05).with_variances(vec![1e-20, 1e-20]).unwrap();
        let tr = sample_hmm_trace(&p, Some(0), 100, &mut rng::stream(2, 2)).unwrap();
        for (y, s) in tr.samples.iter().zip(tr.true_states.as_ref().unwrap()) {
            assert!((y - p.means()[*s]).abs() < 1e-8);
        }
    }

    #[test]
    fn pinned_state_without_transitions() {
        let p = HmmParams::new(vec![1.0, 0.0], vec![0.7, 0.0], vec![1.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut sum = 0.0;
        for k in 0..200 {
            let tr = sample_hmm_trace(&p, None, 100, &mut rng::stream(4, k)).unwrap();
            assert!(tr.true_states.unwrap().iter().all(|&s| s == 0));
            sum += tr.samples.iter().sum::<f64>();
        }
        assert!((sum / 20_000.0 - 0.7).abs() < 0.05);
    }
}
