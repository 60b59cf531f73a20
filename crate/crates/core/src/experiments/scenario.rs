//! Scenario descriptions and the built-in presets.

use serde::{Deserialize, Serialize};

use crate::calibration::{Ties, TrainingConfig};
use crate::error::{Error, Result};
use crate::experiments::bounds::{thermal_transition_matrix, ThermalConfig};
use crate::hmm::{FrozenSet, HmmParams, ParamId};
use crate::noise::NoiseSpec;
use crate::readout::{FilterConfig, ThresholdMode};
use crate::traces::InitialStates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutModel {
    /// Triplet (state 1, high signal) relaxing to singlet (state 2).
    Psb,
    /// Spin-up (1), empty dot (2, high signal), spin-down (3).
    Elzerman,
}

/// State-assignment method evaluated by a fidelity experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Threshold,
    /// HMM with the generating (or model-matched) parameters.
    Hmm,
    /// HMM with Baum-Welch parameters from a separate training set.
    HmmStar,
    /// `Hmm` on block-averaged traces.
    HmmFiltered,
    /// `HmmStar` trained and applied on block-averaged traces.
    HmmStarFiltered,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Threshold,
        Method::Hmm,
        Method::HmmStar,
        Method::HmmFiltered,
        Method::HmmStarFiltered,
    ];

    pub fn is_filtered(self) -> bool {
        matches!(self, Method::HmmFiltered | Method::HmmStarFiltered)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Threshold => "threshold",
            Method::Hmm => "hmm",
            Method::HmmStar => "hmm-star",
            Method::HmmFiltered => "hmm-filtered",
            Method::HmmStarFiltered => "hmm-star-filtered",
        }
    }

    pub fn parse_list(list: &str) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let m = Method::ALL
                .into_iter()
                .find(|m| m.name() == item)
                .ok_or_else(|| Error::Config(format!("unknown method '{item}'")))?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        Ok(out)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What a scenario computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Readout infidelity of each method on a labeled test set.
    Fidelity,
    /// Baum-Welch on correlated-noise data compared with the model-matched
    /// parameters.
    CalibrationFailure,
}

/// Scenario quantity a sweep axis varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParameter {
    Rate,
    ReverseRate,
    Snr,
    Temperature,
    CorrelationTime,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Rate => "rate",
            SweepParameter::ReverseRate => "reverse_rate",
            SweepParameter::Snr => "snr",
            SweepParameter::Temperature => "temperature",
            SweepParameter::CorrelationTime => "correlation_time",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Trace length for each value; empty keeps the scenario's length.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace_lens: Vec<usize>,
}

fn default_batch() -> usize {
    20_000
}

/// A readout experiment. Signal levels are fixed (PSB: triplet 1, singlet 0;
/// Elzerman: occupied 0, empty 1) and the noise variance is 1/SNR².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub recipe: Recipe,
    pub model: ReadoutModel,
    pub snr: f64,
    /// PSB: relaxation A₁₂. Elzerman: zero-temperature tunnel rate A₀.
    pub rate: f64,
    /// PSB excitation A₂₁; ignored for Elzerman.
    #[serde(default)]
    pub reverse_rate: f64,
    /// Elzerman k_B·temperature / E_Z; 0 is zero temperature.
    #[serde(default)]
    pub temperature: f64,
    /// Noise correlation time T_c in samples; 0 is white noise.
    #[serde(default)]
    pub correlation_time: f64,
    /// Test traces per point.
    pub n_test: usize,
    /// Labeled traces for threshold calibration.
    pub n_train: usize,
    /// Traces for Baum-Welch training.
    pub n_train_hmm: usize,
    pub trace_len: usize,
    pub methods: Vec<Method>,
    /// Block size t_s of the averaging filter for the filtered methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_ts: Option<usize>,
    /// Calibration-failure recipe: also compute likelihood-ratio intervals.
    #[serde(default)]
    pub intervals: bool,
    /// Test traces generated and scored at a time.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Sweep axes; the points are their Cartesian product.
    #[serde(default)]
    pub axes: Vec<SweepAxis>,
}

/// One resolved point of a scenario: the scenario with every sweep value
/// substituted and no axes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPoint {
    pub index: usize,
    /// Axis name and value for this point, in axis order.
    pub coordinates: Vec<(String, f64)>,
    pub config: Scenario,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scenario '{}': {m}", self.name)));
        if self.methods.is_empty() && self.recipe == Recipe::Fidelity {
            return bad("no methods selected".into());
        }
        if self.n_test == 0 && self.recipe == Recipe::Fidelity {
            return bad("n_test must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.methods.iter().any(|m| m.is_filtered()) && self.filter_ts.is_none() {
            return bad("filtered methods need filter_ts".into());
        }
        if let Some(ts) = self.filter_ts {
            FilterConfig::new(ts).validate()?;
        }
        for axis in &self.axes {
            if axis.values.is_empty() {
                return bad(format!("sweep axis {} has no values", axis.parameter.name()));
            }
            if !axis.trace_lens.is_empty() && axis.trace_lens.len() != axis.values.len() {
                return bad(format!(
                    "sweep axis {} has {} values but {} trace lengths",
                    axis.parameter.name(),
                    axis.values.len(),
                    axis.trace_lens.len()
                ));
            }
        }
        for p in self.points() {
            p.config.validate_point().map_err(|e| Error::Scenario {
                point: p.index,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    fn validate_point(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return bad(format!("SNR must be positive, got {}", self.snr));
        }
        if !(self.temperature >= 0.0) || !(self.correlation_time >= 0.0) {
            return bad("temperature and correlation time must be nonnegative".into());
        }
        if self.trace_len == 0 {
            return bad("trace_len must be at least 1".into());
        }
        if let Some(ts) = self.filter_ts {
            if ts > self.trace_len {
                return bad(format!("filter block {ts} exceeds trace length {}", self.trace_len));
            }
        }
        let needs_training = self.recipe == Recipe::CalibrationFailure
            || self.methods.iter().any(|m| matches!(m, Method::HmmStar | Method::HmmStarFiltered));
        if needs_training && self.n_train_hmm == 0 {
            return bad("Baum-Welch training needs n_train_hmm >= 1".into());
        }
        if self.methods.contains(&Method::Threshold) && self.recipe == Recipe::Fidelity && self.n_train == 0 {
            return bad("threshold calibration needs n_train >= 1".into());
        }
        self.truth()?;
        self.noise().validate()
    }

    /// Number of sweep points.
    pub fn num_points(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Every sweep point, last axis varying fastest.
    pub fn points(&self) -> Vec<ScenarioPoint> {
        let n = self.num_points();
        (0..n)
            .map(|index| {
                let mut config = self.clone();
                config.axes.clear();
                let mut coordinates = Vec::new();
                let mut rem = index;
                let mut picks = vec![0; self.axes.len()];
                for (a, axis) in self.axes.iter().enumerate().rev() {
                    picks[a] = rem % axis.values.len();
                    rem /= axis.values.len();
                }
                for (axis, &k) in self.axes.iter().zip(&picks) {
                    let v = axis.values[k];
                    match axis.parameter {
                        SweepParameter::Rate => config.rate = v,
                        SweepParameter::ReverseRate => config.reverse_rate = v,
                        SweepParameter::Snr => config.snr = v,
                        SweepParameter::Temperature => config.temperature = v,
                        SweepParameter::CorrelationTime => config.correlation_time = v,
                    }
                    if let Some(&len) = axis.trace_lens.get(k) {
                        config.trace_len = len;
                    }
                    coordinates.push((axis.parameter.name().to_string(), v));
                }
                ScenarioPoint {
                    index,
                    coordinates,
                    config,
                }
            })
            .collect()
    }

    pub fn noise_variance(&self) -> f64 {
        1.0 / (self.snr * self.snr)
    }

    /// Noise process shared by all states.
    pub fn noise(&self) -> NoiseSpec {
        if self.correlation_time == 0.0 {
            NoiseSpec::white(self.noise_variance())
        } else {
            NoiseSpec::gaussian(self.noise_variance(), self.correlation_time)
        }
    }

    pub fn is_white(&self) -> bool {
        self.correlation_time == 0.0
    }

    /// Generating model. For correlated noise its variances are the noise
    /// variance, which makes it the unfiltered model-matched model.
    pub fn truth(&self) -> Result<HmmParams> {
        let v = self.noise_variance();
        match self.model {
            ReadoutModel::Psb => HmmParams::new(
                vec![0.5, 0.5],
                vec![1.0, 0.0],
                vec![v, v],
                vec![
                    vec![1.0 - self.rate, self.rate],
                    vec![self.reverse_rate, 1.0 - self.reverse_rate],
                ],
            )?
            .with_labels(["triplet", "singlet"]),
            ReadoutModel::Elzerman => {
                let thermal = ThermalConfig {
                    base_rate: self.rate,
                    zeeman_ratio: (self.temperature > 0.0).then(|| 1.0 / self.temperature),
                };
                HmmParams::new(vec![0.5, 0.0, 0.5], vec![0.0, 1.0, 0.0], vec![v; 3], thermal_transition_matrix(&thermal)?)?
                    .with_labels(["spin-up", "empty", "spin-down"])
            }
        }
    }

    /// Balanced initial states of test and training sets.
    pub fn initial_states(&self) -> InitialStates {
        InitialStates::Balanced(self.readout_states().to_vec())
    }

    /// The two qubit states a readout distinguishes, high-signal outcome
    /// first.
    pub fn readout_states(&self) -> [usize; 2] {
        match self.model {
            ReadoutModel::Psb => [0, 1],
            ReadoutModel::Elzerman => [0, 2],
        }
    }

    pub fn threshold_mode(&self) -> ThresholdMode {
        match self.model {
            ReadoutModel::Psb => ThresholdMode::IntegratedSignal,
            ReadoutModel::Elzerman => ThresholdMode::PeakSignal,
        }
    }

    pub fn filter(&self) -> Option<FilterConfig> {
        self.filter_ts.map(FilterConfig::new)
    }
}

/// Fixed Baum-Welch starting point for each readout model.
pub fn default_init(model: ReadoutModel) -> HmmParams {
    match model {
        ReadoutModel::Psb => HmmParams::new(
            vec![0.45, 0.55],
            vec![0.4, 0.3],
            vec![0.36, 0.36],
            vec![vec![1.0 - 3e-4, 3e-4], vec![3e-4, 1.0 - 3e-4]],
        ),
        ReadoutModel::Elzerman => HmmParams::new(
            vec![0.5, 0.0, 0.5],
            vec![0.3, 0.4, 0.3],
            vec![0.36; 3],
            vec![
                vec![1.0 - 3e-4, 2e-4, 1e-4],
                vec![1e-4, 1.0 - 3e-4, 2e-4],
                vec![1e-4, 1e-4, 1.0 - 2e-4],
            ],
        ),
    }
    .expect("valid starting point")
}

/// Baum-Welch setup for a readout model. Elzerman keeps π fixed and ties
/// the emissions of the two occupied states.
pub fn default_training(model: ReadoutModel) -> TrainingConfig {
    let cfg = TrainingConfig::new(default_init(model));
    match model {
        ReadoutModel::Psb => cfg,
        ReadoutModel::Elzerman => cfg
            .with_frozen((0..3).map(ParamId::Initial).collect::<FrozenSet>())
            .with_ties(Ties::emission(&[0, 2])),
    }
}

/// Relaxation rates of the PSB sweeps.
pub const PSB_RATES: [f64; 7] = [1e-4, 2.2e-4, 4.6e-4, 1e-3, 2.2e-3, 4.6e-3, 1e-2];

fn base(name: &str, description: &str, model: ReadoutModel) -> Scenario {
    Scenario {
        name: name.into(),
        description: description.into(),
        recipe: Recipe::Fidelity,
        model,
        snr: 1.0,
        rate: 0.0022,
        reverse_rate: 0.0,
        temperature: 0.0,
        correlation_time: 0.0,
        n_test: 10_000,
        n_train: 10_000,
        n_train_hmm: 2000,
        trace_len: 300,
        methods: vec![Method::Threshold, Method::HmmStar, Method::Hmm],
        filter_ts: None,
        intervals: false,
        batch_size: default_batch(),
        axes: Vec::new(),
    }
}

fn axis(parameter: SweepParameter, values: &[f64]) -> SweepAxis {
    SweepAxis {
        parameter,
        values: values.to_vec(),
        trace_lens: Vec::new(),
    }
}

/// Built-in scenarios.
pub fn scenario_catalog() -> Vec<Scenario> {
    use ReadoutModel::*;
    use SweepParameter::*;
    let mut out = Vec::new();

    let mut s = base("psb-white-sweep-A", "PSB, white noise, SNR 1: infidelity against the relaxation rate", Psb);
    s.axes = vec![axis(Rate, &PSB_RATES)];
    out.push(s);

    let mut s = base("psb-white-sweep-snr", "PSB, white noise, A12 = 0.0022: infidelity against SNR", Psb);
    s.axes = vec![axis(Snr, &[0.5, 0.75, 1.0, 1.5, 2.0, 3.0])];
    out.push(s);

    let mut s = base("psb-corr-Tc1", "PSB, correlated noise T_c = 1, short traces", Psb);
    s.correlation_time = 1.0;
    s.n_test = 100_000;
    s.n_train = 100_000;
    s.trace_len = 30;
    s.methods = vec![Method::Threshold, Method::Hmm];
    s.axes = vec![axis(Rate, &PSB_RATES)];
    out.push(s);

    let mut s = base(
        "psb-corr-Tc3-filter",
        "PSB, correlated noise T_c = 3: threshold, HMM and HMM after a 20-sample averaging filter",
        Psb,
    );
    s.correlation_time = 3.0;
    s.filter_ts = Some(20);
    s.methods = vec![Method::Threshold, Method::Hmm, Method::HmmFiltered];
    s.axes = vec![axis(Rate, &PSB_RATES)];
    out.push(s);

    let mut s = base("elzerman-snr", "Elzerman, zero temperature, A0 = 0.02: infidelity against SNR", Elzerman);
    s.rate = 0.02;
    s.trace_len = 400;
    s.axes = vec![axis(Snr, &[1.0, 2.0, 3.0, 4.0, 5.0])];
    out.push(s);

    let mut s = base(
        "elzerman-thermal",
        "Elzerman, SNR 4: infidelity against temperature for four tunnel rates",
        Elzerman,
    );
    s.snr = 4.0;
    s.rate = 0.02;
    s.methods = vec![Method::Threshold, Method::Hmm];
    s.axes = vec![
        SweepAxis {
            parameter: Rate,
            values: vec![0.005, 0.01, 0.02, 0.04],
            trace_lens: vec![800, 400, 250, 150],
        },
        axis(Temperature, &[0.1, 0.2, 0.4, 0.7, 1.0]),
    ];
    out.push(s);

    let mut s = base(
        "baumwelch-corrfail",
        "Baum-Welch on PSB data with correlated noise, compared with the model-matched parameters",
        Psb,
    );
    s.recipe = Recipe::CalibrationFailure;
    s.rate = 1e-4;
    s.n_test = 0;
    s.n_train = 0;
    s.n_train_hmm = 2000;
    s.trace_len = 1000;
    s.methods = Vec::new();
    s.intervals = true;
    s.axes = vec![axis(CorrelationTime, &[0.0, 1.0, 2.0, 3.0])];
    out.push(s);

    out
}

pub fn preset(name: &str) -> Result<Scenario> {
    scenario_catalog()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::UnknownPreset(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_shapes() {
        for s in scenario_catalog() {
            s.validate().unwrap();
        }
        let t = preset("psb-corr-Tc1").unwrap();
        assert_eq!((t.n_test, t.trace_len), (100_000, 30));
        let z = preset("elzerman-thermal").unwrap();
        let lens: Vec<usize> = z.points().iter().map(|p| p.config.trace_len).collect();
        let mut distinct = lens.clone();
        distinct.dedup();
        assert_eq!(distinct, vec![800, 400, 250, 150]);
        let f = preset("baumwelch-corrfail").unwrap();
        assert_eq!((f.trace_len, f.n_train_hmm, f.rate), (1000, 2000, 1e-4));
        assert_eq!(preset("psb-white-sweep-A").unwrap().num_points(), 7);
        assert!(matches!(preset("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn points_substitute_values() {
        let z = preset("elzerman-thermal").unwrap();
        let pts = z.points();
        assert_eq!(pts.len(), 20);
        assert_eq!(pts[6].coordinates, vec![("rate".to_string(), 0.01), ("temperature".to_string(), 0.2)]);
        assert_eq!(pts[6].config.rate, 0.01);
        assert!(pts[6].config.axes.is_empty());
        let a = pts[6].config.truth().unwrap();
        let f = 1.0 / (1.0 + 5f64.exp());
        assert!((a.transition(2, 1) - f * 0.01).abs() < 1e-15);
    }

    #[test]
    fn scenario_json_round_trip() {
        for s in scenario_catalog() {
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<Scenario>(&json).unwrap(), s);
        }
    }

    #[test]
    fn method_lists() {
        assert_eq!(Method::parse_list("threshold, hmm-star").unwrap(), vec![Method::Threshold, Method::HmmStar]);
        assert!(Method::parse_list("hmm,bogus").is_err());
    }

    #[test]
    fn filtered_method_needs_block() {
        let mut s = preset("psb-corr-Tc3-filter").unwrap();
        s.filter_ts = None;
        assert!(s.validate().is_err());
    }
}
