//! Scenario execution and result files.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{train, TrainingResult};
use crate::confidence::{likelihood_ratio_intervals, ConfidenceInterval, ProfileOptions};
use crate::error::{Error, Result};
use crate::experiments::bounds::{binomial_infidelity_interval, DEFAULT_LEVEL};
use crate::experiments::scenario::{default_training, Method, Recipe, Scenario, ScenarioPoint};
use crate::hmm::{decide_initial_state_among, posteriors, HmmParams, ParamId, SignalTrace};
use crate::readout::{averaging_filter, calibrate_threshold, model_matched_params, threshold_assign, ThresholdCalibration};
use crate::rng::{derive_seed, derive_seed_str};
use crate::traces::{GenerationSpec, TraceSet};

/// First trace id of threshold-calibration sets; test traces start at 0.
pub const THRESHOLD_TRAIN_ID: u64 = 1 << 40;
/// First trace id of Baum-Welch training sets.
pub const HMM_TRAIN_ID: u64 = 2 << 40;

/// Infidelity of one method at one scenario point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub method: Method,
    pub n_traces: u64,
    pub n_errors: u64,
    pub infidelity_estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// SHA-256 of the resolved point configuration.
    pub config_digest: String,
    pub seed: u64,
}

impl FidelityReport {
    pub fn from_counts(method: Method, n_errors: u64, n_traces: u64, config_digest: String, seed: u64) -> Result<Self> {
        let ci = binomial_infidelity_interval(n_errors, n_traces, DEFAULT_LEVEL)?;
        Ok(FidelityReport {
            method,
            n_traces,
            n_errors,
            infidelity_estimate: ci.estimate,
            ci_lower: ci.lower,
            ci_upper: ci.upper,
            config_digest,
            seed,
        })
    }

    /// Whether the two credible intervals share at least one point.
    pub fn overlaps(&self, other: &FidelityReport) -> bool {
        self.ci_lower <= other.ci_upper && other.ci_lower <= self.ci_upper
    }

    /// 1σ-equivalent statistical error of the estimate.
    pub fn sigma(&self) -> f64 {
        0.5 * (self.ci_upper - self.ci_lower)
    }
}

/// Outcome of a Baum-Welch run inside an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: HmmParams,
    pub iterations: usize,
    pub converged: bool,
    pub log_likelihood: f64,
}

impl From<TrainingResult> for TrainedModel {
    fn from(r: TrainingResult) -> Self {
        TrainedModel {
            log_likelihood: r.log_likelihood(),
            params: r.params,
            iterations: r.iterations,
            converged: r.converged,
        }
    }
}

/// Estimated parameter against its model-matched value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDeviation {
    pub parameter: ParamId,
    pub model_matched: f64,
    pub estimate: f64,
    /// (estimate − model-matched) / scale, with scale |μ₂ − μ₁| for means
    /// and the model-matched value otherwise; absent when the scale is 0.
    pub relative_deviation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<ConfidenceInterval>,
    /// (estimate − model-matched) in units of the interval half-width on the
    /// side of the model-matched value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardized_deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFailure {
    pub model_matched: HmmParams,
    pub trained: TrainedModel,
    pub deviations: Vec<ParameterDeviation>,
}

impl CalibrationFailure {
    /// Mean |relative deviation| over the variances.
    pub fn variance_deviation(&self) -> f64 {
        let v: Vec<f64> = self
            .deviations
            .iter()
            .filter(|d| matches!(d.parameter, ParamId::Variance(_)))
            .filter_map(|d| d.relative_deviation)
            .map(f64::abs)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Largest |standardized deviation| over parameters with an interval.
    pub fn max_standardized_deviation(&self) -> Option<f64> {
        self.deviations
            .iter()
            .filter_map(|d| d.standardized_deviation)
            .map(f64::abs)
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub index: usize,
    pub coordinates: Vec<(String, f64)>,
    pub seed: u64,
    pub config_digest: String,
    pub truth: HmmParams,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<FidelityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdCalibration>,
    /// Parameters used by the `hmm` method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hmm_params: Option<HmmParams>,
    /// Model-matched parameters of the filtered traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtered_params: Option<HmmParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained: Option<TrainedModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_filtered: Option<TrainedModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationFailure>,
}

impl PointResult {
    pub fn report(&self, method: Method) -> Option<&FidelityReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub scenario: String,
    pub recipe: Recipe,
    pub seed: u64,
    pub points: Vec<PointResult>,
}

/// Hex SHA-256 of a point configuration together with its index.
pub fn config_digest(point: &ScenarioPoint) -> String {
    let payload = serde_json::json!({ "index": point.index, "config": point.config });
    hex::encode(Sha256::digest(payload.to_string().as_bytes()))
}

fn generation(point: &Scenario, truth: &HmmParams, num_traces: usize, first_id: u64, seed: u64) -> GenerationSpec {
    GenerationSpec {
        params: truth.clone(),
        noise: (!point.is_white()).then(|| point.noise()),
        num_traces,
        trace_len: point.trace_len,
        initial_states: point.initial_states(),
        seed,
        first_id,
    }
}

fn check_disjoint(sets: &[(u64, usize)]) -> Result<()> {
    let mut ids = BTreeSet::new();
    for &(first, n) in sets {
        if n == 0 {
            continue;
        }
        let range = (first, first + n as u64);
        if ids.iter().any(|&(a, b): &(u64, u64)| range.0 < b && a < range.1) {
            return Err(Error::Config("test and training trace ids overlap".into()));
        }
        ids.insert(range);
    }
    Ok(())
}

/// Runs every point of a scenario. `progress` receives one line per
/// finished point.
pub fn run_scenario(scenario: &Scenario, seed: u64, progress: &mut dyn FnMut(&str)) -> Result<ExperimentResults> {
    scenario.validate()?;
    let points = scenario.points();
    let total = points.len();
    let mut out = Vec::with_capacity(total);
    for point in &points {
        let r = match scenario.recipe {
            Recipe::Fidelity => run_fidelity_experiment(point, seed),
            Recipe::CalibrationFailure => run_calibration_failure(point, seed),
        }
        .map_err(|e| Error::Scenario {
            point: point.index,
            source: Box::new(e),
        })?;
        let coords: Vec<String> = point.coordinates.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let summary: Vec<String> = r
            .reports
            .iter()
            .map(|x| format!("{} {:.3e}", x.method, x.infidelity_estimate))
            .collect();
        progress(&format!(
            "point {}/{} [{}] {}",
            point.index + 1,
            total,
            coords.join(", "),
            summary.join(", ")
        ));
        out.push(r);
    }
    Ok(ExperimentResults {
        scenario: scenario.name.clone(),
        recipe: scenario.recipe,
        seed,
        points: out,
    })
}

/// Fidelity of every selected method at one scenario point.
///
/// Test traces, threshold-calibration traces and Baum-Welch traces come
/// from disjoint id ranges of the point's seed, so no calibration sees a
/// test trace. Test traces are generated and scored in batches.
pub fn run_fidelity_experiment(point: &ScenarioPoint, seed: u64) -> Result<PointResult> {
    let cfg = &point.config;
    let truth = cfg.truth()?;
    let noise = cfg.noise();
    let digest = config_digest(point);
    let pseed = derive_seed(seed, point.index as u64);
    let wants = |m: Method| cfg.methods.contains(&m);
    let states = cfg.readout_states();

    let n_threshold = if wants(Method::Threshold) { cfg.n_train } else { 0 };
    let n_hmm_train = if wants(Method::HmmStar) || wants(Method::HmmStarFiltered) {
        cfg.n_train_hmm
    } else {
        0
    };
    check_disjoint(&[(0, cfg.n_test), (THRESHOLD_TRAIN_ID, n_threshold), (HMM_TRAIN_ID, n_hmm_train)])?;

    let threshold = if n_threshold > 0 {
        let set = TraceSet::generate(&generation(cfg, &truth, n_threshold, THRESHOLD_TRAIN_ID, pseed))?;
        Some(calibrate_threshold(cfg.threshold_mode(), states[0], states[1], &set.traces)?)
    } else {
        None
    };
    let filter = cfg.filter();
    let filtered_params = match (&filter, wants(Method::HmmFiltered)) {
        (Some(f), true) => Some(model_matched_params(
            &truth,
            &noise,
            Some(f),
            cfg.trace_len,
            derive_seed_str(pseed, "matched-variance"),
        )?),
        _ => None,
    };
    let (mut trained, mut trained_filtered) = (None, None);
    if n_hmm_train > 0 {
        let set = TraceSet::generate(&generation(cfg, &truth, n_hmm_train, HMM_TRAIN_ID, pseed))?;
        let tcfg = default_training(cfg.model);
        if wants(Method::HmmStar) {
            trained = Some(TrainedModel::from(train(&tcfg, &set.traces)?));
        }
        if wants(Method::HmmStarFiltered) {
            let f = filter.as_ref().expect("validated");
            let filtered = set.traces.iter().map(|t| averaging_filter(f, t)).collect::<Result<Vec<_>>>()?;
            trained_filtered = Some(TrainedModel::from(train(&tcfg, &filtered)?));
        }
    }

    // method → parameters and whether it reads filtered traces
    let hmm_models: Vec<(Method, &HmmParams)> = cfg
        .methods
        .iter()
        .filter_map(|&m| match m {
            Method::Threshold => None,
            Method::Hmm => Some((m, &truth)),
            Method::HmmStar => trained.as_ref().map(|t| (m, &t.params)),
            Method::HmmFiltered => filtered_params.as_ref().map(|p| (m, p)),
            Method::HmmStarFiltered => trained_filtered.as_ref().map(|t| (m, &t.params)),
        })
        .collect();

    let nm = cfg.methods.len();
    let mut errors = vec![0u64; nm];
    let mut start = 0;
    while start < cfg.n_test {
        let len = cfg.batch_size.min(cfg.n_test - start);
        let set = TraceSet::generate(&generation(cfg, &truth, len, start as u64, pseed))?;
        let batch = set
            .traces
            .par_iter()
            .map(|tr| -> Result<Vec<u64>> {
                let truth_state = tr.initial_state().expect("generated traces are labeled");
                let filtered = match &filter {
                    Some(f) if cfg.methods.iter().any(|m| m.is_filtered()) => Some(averaging_filter(f, tr)?),
                    _ => None,
                };
                let mut wrong = vec![0u64; nm];
                for (slot, &m) in wrong.iter_mut().zip(&cfg.methods) {
                    let decided = if m == Method::Threshold {
                        let t = threshold.as_ref().expect("calibrated");
                        threshold_assign(&t.config, tr)?
                    } else {
                        let params = hmm_models.iter().find(|(x, _)| *x == m).map(|(_, p)| *p).expect("model prepared");
                        let input: &SignalTrace = if m.is_filtered() { filtered.as_ref().expect("filtered") } else { tr };
                        decide_initial_state_among(&posteriors(params, input)?, &states).0
                    };
                    *slot = u64::from(decided != truth_state);
                }
                Ok(wrong)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_trace(start))?;
        for w in batch {
            for (e, x) in errors.iter_mut().zip(w) {
                *e += x;
            }
        }
        start += len;
    }

    let reports = cfg
        .methods
        .iter()
        .zip(&errors)
        .map(|(&m, &n)| FidelityReport::from_counts(m, n, cfg.n_test as u64, digest.clone(), seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointResult {
        index: point.index,
        coordinates: point.coordinates.clone(),
        seed: pseed,
        config_digest: digest,
        hmm_params: wants(Method::Hmm).then(|| truth.clone()),
        truth,
        reports,
        threshold,
        filtered_params,
        trained,
        trained_filtered,
        calibration: None,
    })
}

/// Baum-Welch on one training set generated with the point's noise,
/// compared with the model-matched parameters.
pub fn run_calibration_failure(point: &ScenarioPoint, seed: u64) -> Result<PointResult> {
    let cfg = &point.config;
    let matched = cfg.truth()?;
    let digest = config_digest(point);
    let pseed = derive_seed(seed, point.index as u64);
    let set = TraceSet::generate(&generation(cfg, &matched, cfg.n_train_hmm, HMM_TRAIN_ID, pseed))?;
    let tcfg = default_training(cfg.model);
    let result = train(&tcfg, &set.traces)?;
    let targets = result.params.free_parameters(&tcfg.frozen);
    let intervals = if cfg.intervals {
        Some(likelihood_ratio_intervals(
            &result.params,
            &set.traces,
            &targets,
            &ProfileOptions::for_training(&tcfg),
        )?)
    } else {
        None
    };
    let mean_gap = {
        let m = matched.means();
        m.iter().copied().fold(f64::NEG_INFINITY, f64::max) - m.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let deviations = targets
        .iter()
        .enumerate()
        .map(|(k, &id)| {
            let mm = matched.get(id);
            let est = result.params.get(id);
            let scale = match id {
                ParamId::Mean(_) => mean_gap,
                _ => mm.abs(),
            };
            let interval = intervals.as_ref().map(|v| v[k].clone());
            let standardized_deviation = interval.as_ref().map(|ci| -ci.standardized(mm));
            ParameterDeviation {
                parameter: id,
                model_matched: mm,
                estimate: est,
                relative_deviation: (scale > 0.0).then(|| (est - mm) / scale),
                interval,
                standardized_deviation,
            }
        })
        .collect();
    Ok(PointResult {
        index: point.index,
        coordinates: point.coordinates.clone(),
        seed: pseed,
        config_digest: digest,
        truth: matched.clone(),
        reports: Vec::new(),
        threshold: None,
        hmm_params: None,
        filtered_params: None,
        trained: None,
        trained_filtered: None,
        calibration: Some(CalibrationFailure {
            model_matched: matched,
            trained: result.into(),
            deviations,
        }),
    })
}

/// Provenance written next to the results; feeding it back as a config
/// reruns the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub points: Vec<ManifestPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPoint {
    pub index: usize,
    pub coordinates: Vec<(String, f64)>,
    pub seed: u64,
    pub config_digest: String,
}

impl Manifest {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario: scenario.clone(),
            seed,
            points: scenario
                .points()
                .iter()
                .map(|p| ManifestPoint {
                    index: p.index,
                    coordinates: p.coordinates.clone(),
                    seed: derive_seed(seed, p.index as u64),
                    config_digest: config_digest(p),
                })
                .collect(),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes results.json, sweep.csv and manifest.json into `dir`.
pub fn write_outputs(dir: &Path, scenario: &Scenario, results: &ExperimentResults) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = serde_json::to_vec_pretty(results)?;
    json.push(b'\n');
    write_file(&dir.join("results.json"), &json)?;
    let mut manifest = serde_json::to_vec_pretty(&Manifest::new(scenario, results.seed))?;
    manifest.push(b'\n');
    write_file(&dir.join("manifest.json"), &manifest)?;
    write_file(&dir.join("sweep.csv"), sweep_csv(scenario, results).as_bytes())
}

/// One row per point and method (fidelity) or per point and parameter
/// (calibration failure).
pub fn sweep_csv(scenario: &Scenario, results: &ExperimentResults) -> String {
    let axes: Vec<&str> = scenario.axes.iter().map(|a| a.parameter.name()).collect();
    let mut out = Vec::new();
    let head = |rest: &str| {
        let mut cols = vec!["point"];
        cols.extend(&axes);
        format!("{},{rest}", cols.join(","))
    };
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    match results.recipe {
        Recipe::Fidelity => {
            writeln!(out, "{}", head("method,n_traces,n_errors,infidelity,ci_lower,ci_upper")).unwrap();
            for p in &results.points {
                let coords: Vec<String> = p.coordinates.iter().map(|(_, v)| format!("{v}")).collect();
                for r in &p.reports {
                    let mut cells = vec![p.index.to_string()];
                    cells.extend(coords.iter().cloned());
                    cells.extend([
                        r.method.to_string(),
                        r.n_traces.to_string(),
                        r.n_errors.to_string(),
                        format!("{:e}", r.infidelity_estimate),
                        format!("{:e}", r.ci_lower),
                        format!("{:e}", r.ci_upper),
                    ]);
                    writeln!(out, "{}", cells.join(",")).unwrap();
                }
            }
        }
        Recipe::CalibrationFailure => {
            writeln!(
                out,
                "{}",
                head("parameter,model_matched,estimate,relative_deviation,ci_lower,ci_upper,standardized_deviation")
            )
            .unwrap();
            for p in &results.points {
                let coords: Vec<String> = p.coordinates.iter().map(|(_, v)| format!("{v}")).collect();
                let Some(c) = &p.calibration else { continue };
                for d in &c.deviations {
                    let mut cells = vec![p.index.to_string()];
                    cells.extend(coords.iter().cloned());
                    cells.extend([
                        d.parameter.to_string(),
                        format!("{:e}", d.model_matched),
                        format!("{:e}", d.estimate),
                        fmt_opt(d.relative_deviation),
                        fmt_opt(d.interval.as_ref().map(|i| i.lower)),
                        fmt_opt(d.interval.as_ref().map(|i| i.upper)),
                        fmt_opt(d.standardized_deviation),
                    ]);
                    writeln!(out, "{}", cells.join(",")).unwrap();
                }
            }
        }
    }
    String::from_utf8(out).expect("ascii")
}
