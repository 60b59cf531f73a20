use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-12;

/// Gaussian-emission HMM parameters λ = (π, μ, σ², A).
///
/// States are indexed from 0 in code; parameter names ([`ParamId`]) use the
/// 1-based labels of the physics convention (`A_12` is the transition from
/// the first to the second state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HmmParamsRepr", into = "HmmParamsRepr")]
pub struct HmmParams {
    initial: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    transitions: Vec<f64>,
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct HmmParamsRepr {
    initial: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    transitions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<String>,
}

impl TryFrom<HmmParamsRepr> for HmmParams {
    type Error = Error;

    fn try_from(r: HmmParamsRepr) -> Result<Self> {
        let p = HmmParams::new(r.initial, r.means, r.variances, r.transitions)?;
        if r.labels.is_empty() {
            Ok(p)
        } else {
            p.with_labels(r.labels)
        }
    }
}

impl From<HmmParams> for HmmParamsRepr {
    fn from(p: HmmParams) -> Self {
        let m = p.num_states();
        let transitions = (0..m).map(|i| p.transition_row(i).to_vec()).collect();
        HmmParamsRepr {
            initial: p.initial,
            means: p.means,
            variances: p.variances,
            transitions,
            labels: p.labels,
        }
    }
}

fn check_simplex(name: &str, v: &[f64]) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::InvalidParams(format!("{name} has entry {x} outside [0, 1]")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidParams(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

impl HmmParams {
    pub fn new(
        initial: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        transitions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = means.len();
        if transitions.len() != m || transitions.iter().any(|row| row.len() != m) {
            return Err(Error::InvalidParams(format!(
                "transition matrix must be {m}x{m}"
            )));
        }
        Self::from_flat(initial, means, variances, transitions.concat())
    }

    /// Builds parameters from a row-major transition matrix.
    pub fn from_flat(
        initial: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        transitions: Vec<f64>,
    ) -> Result<Self> {
        let p = HmmParams {
            initial,
            means,
            variances,
            transitions,
            labels: Vec::new(),
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let m = self.means.len();
        if m == 0 {
            return Err(Error::InvalidParams("at least one state is required".into()));
        }
        if self.initial.len() != m || self.variances.len() != m {
            return Err(Error::InvalidParams(format!(
                "{m} means but {} initial probabilities and {} variances",
                self.initial.len(),
                self.variances.len()
            )));
        }
        if self.transitions.len() != m * m {
            return Err(Error::InvalidParams(format!(
                "transition matrix must be {m}x{m}"
            )));
        }
        if let Some(mu) = self.means.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidParams(format!("mean {mu} is not finite")));
        }
        if let Some(v) = self.variances.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidParams(format!("variance {v} is not positive")));
        }
        check_simplex("initial distribution", &self.initial)?;
        for i in 0..m {
            check_simplex(&format!("transition row {}", i + 1), self.transition_row(i))?;
        }
        if !self.labels.is_empty() && self.labels.len() != m {
            return Err(Error::InvalidParams(format!(
                "{} labels for {m} states",
                self.labels.len()
            )));
        }
        Ok(())
    }

    pub fn with_labels<S: Into<String>>(mut self, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        self.labels = labels.into_iter().map(Into::into).collect();
        self.validate()?;
        Ok(self)
    }

    #[inline]
    pub fn num_states(&self) -> usize {
        self.means.len()
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Row-major transition matrix.
    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    #[inline]
    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * self.num_states() + to]
    }

    pub fn transition_row(&self, from: usize) -> &[f64] {
        let m = self.num_states();
        &self.transitions[from * m..(from + 1) * m]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Label of a state, falling back to its 1-based number.
    pub fn label(&self, state: usize) -> String {
        self.labels
            .get(state)
            .cloned()
            .unwrap_or_else(|| (state + 1).to_string())
    }

    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::Initial(i) => self.initial[i],
            ParamId::Mean(i) => self.means[i],
            ParamId::Variance(i) => self.variances[i],
            ParamId::Transition(i, j) => self.transition(i, j),
        }
    }

    /// Returns a copy with one parameter moved to `value`.
    ///
    /// Simplex parameters (π_i, A_ij) keep their vector normalized by
    /// rescaling the remaining entries of the same vector.
    pub fn with_value(&self, id: ParamId, value: f64) -> Result<Self> {
        let mut p = self.clone();
        match id {
            ParamId::Mean(i) => p.means[i] = value,
            ParamId::Variance(i) => p.variances[i] = value,
            ParamId::Initial(i) => set_simplex_entry(&mut p.initial, i, value),
            ParamId::Transition(i, j) => {
                let m = p.num_states();
                set_simplex_entry(&mut p.transitions[i * m..(i + 1) * m], j, value)
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// Parameters that Baum-Welch estimates freely, excluding `frozen`.
    ///
    /// The last π entry and the diagonal of A are implied by normalization.
    pub fn free_parameters(&self, frozen: &FrozenSet) -> Vec<ParamId> {
        let m = self.num_states();
        let mut out = Vec::new();
        out.extend((0..m.saturating_sub(1)).map(ParamId::Initial));
        out.extend((0..m).map(ParamId::Mean));
        out.extend((0..m).map(ParamId::Variance));
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    out.push(ParamId::Transition(i, j));
                }
            }
        }
        out.retain(|id| !frozen.contains(*id));
        out
    }

    /// Replaces all variances with a single value.
    pub fn with_variances(&self, variances: Vec<f64>) -> Result<Self> {
        let mut p = self.clone();
        p.variances = variances;
        p.validate()?;
        Ok(p)
    }

    pub(crate) fn set_parts(
        &mut self,
        initial: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        transitions: Vec<f64>,
    ) -> Result<()> {
        let labels = std::mem::take(&mut self.labels);
        let p = HmmParams {
            initial,
            means,
            variances,
            transitions,
            labels,
        };
        p.validate()?;
        *self = p;
        Ok(())
    }
}

fn set_simplex_entry(v: &mut [f64], idx: usize, value: f64) {
    let old = v[idx];
    let rest_old = 1.0 - old;
    let rest_new = 1.0 - value;
    let others = v.len() - 1;
    for (k, x) in v.iter_mut().enumerate() {
        if k == idx {
            *x = value;
        } else if rest_old > 0.0 {
            *x *= rest_new / rest_old;
        } else {
            *x = rest_new / others as f64;
        }
    }
    // absorb round-off in the largest remaining entry
    let s: f64 = v.iter().sum();
    if let Some((k, _)) = v
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != idx)
        .max_by(|a, b| a.1.total_cmp(b.1))
    {
        v[k] = (v[k] + 1.0 - s).clamp(0.0, 1.0);
    }
}

/// Name of a single model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Initial(usize),
    Mean(usize),
    Variance(usize),
    Transition(usize, usize),
}

impl ParamId {
    pub fn is_probability(self) -> bool {
        matches!(self, ParamId::Initial(_) | ParamId::Transition(..))
    }

    /// Lowest and highest admissible value.
    pub fn domain(self) -> (f64, f64) {
        match self {
            ParamId::Initial(_) | ParamId::Transition(..) => (0.0, 1.0),
            ParamId::Variance(_) => (crate::calibration::VARIANCE_FLOOR, f64::INFINITY),
            ParamId::Mean(_) => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamId::Initial(i) => write!(f, "pi_{}", i + 1),
            ParamId::Mean(i) => write!(f, "mu_{}", i + 1),
            ParamId::Variance(i) => write!(f, "var_{}", i + 1),
            ParamId::Transition(i, j) if i < 9 && j < 9 => write!(f, "A_{}{}", i + 1, j + 1),
            ParamId::Transition(i, j) => write!(f, "A_{}_{}", i + 1, j + 1),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownParameter(s.to_string());
        let (kind, idx) = s.split_once('_').ok_or_else(bad)?;
        let one = |t: &str| -> Result<usize> {
            match t.parse::<usize>() {
                Ok(n) if n >= 1 => Ok(n - 1),
                _ => Err(bad()),
            }
        };
        match kind {
            "pi" => Ok(ParamId::Initial(one(idx)?)),
            "mu" => Ok(ParamId::Mean(one(idx)?)),
            "var" | "sigma2" => Ok(ParamId::Variance(one(idx)?)),
            "A" => {
                if let Some((a, b)) = idx.split_once('_') {
                    Ok(ParamId::Transition(one(a)?, one(b)?))
                } else if idx.len() == 2 && idx.is_ascii() {
                    Ok(ParamId::Transition(one(&idx[..1])?, one(&idx[1..])?))
                } else {
                    Err(bad())
                }
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for ParamId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters held fixed during reestimation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FrozenSet(BTreeSet<ParamId>);

impl FrozenSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId) {
        self.0.insert(id);
    }

    pub fn with(mut self, id: ParamId) -> Self {
        self.insert(id);
        self
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.iter().copied()
    }

    /// Parses a comma-separated list of parameter names or groups
    /// (`pi`, `mu`, `var`, `A`) for a model with `num_states` states.
    pub fn parse(list: &str, num_states: usize) -> Result<Self> {
        let mut set = FrozenSet::new();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "pi" => (0..num_states).for_each(|i| set.insert(ParamId::Initial(i))),
                "mu" => (0..num_states).for_each(|i| set.insert(ParamId::Mean(i))),
                "var" | "sigma2" => (0..num_states).for_each(|i| set.insert(ParamId::Variance(i))),
                "A" => {
                    for i in 0..num_states {
                        for j in 0..num_states {
                            set.insert(ParamId::Transition(i, j));
                        }
                    }
                }
                name => {
                    let id: ParamId = name.parse()?;
                    let max = match id {
                        ParamId::Initial(i) | ParamId::Mean(i) | ParamId::Variance(i) => i,
                        ParamId::Transition(i, j) => i.max(j),
                    };
                    if max >= num_states {
                        return Err(Error::UnknownParameter(name.to_string()));
                    }
                    set.insert(id);
                }
            }
        }
        Ok(set)
    }
}

impl FromIterator<ParamId> for FrozenSet {
    fn from_iter<I: IntoIterator<Item = ParamId>>(iter: I) -> Self {
        FrozenSet(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> HmmParams {
        HmmParams::new(
            vec![0.5, 0.5],
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![vec![0.9978, 0.0022], vec![0.0, 1.0]],
        )
        .unwrap()
    }

    #[test]
    fn rejects_invalid() {
        assert!(HmmParams::new(vec![0.6, 0.5], vec![0.0, 1.0], vec![1.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
        assert!(HmmParams::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![0.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
        assert!(HmmParams::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 1.0], vec![vec![0.9, 0.0], vec![0.0, 1.0]]).is_err());
        assert!(HmmParams::new(vec![1.0], vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn param_names_round_trip() {
        for s in ["pi_1", "mu_2", "var_3", "A_12", "A_1_12"] {
            let id: ParamId = s.parse().unwrap();
            assert_eq!(id.to_string(), s);
        }
        assert_eq!("sigma2_1".parse::<ParamId>().unwrap(), ParamId::Variance(0));
        assert!("A_0".parse::<ParamId>().is_err());
        assert!("nu_1".parse::<ParamId>().is_err());
    }

    #[test]
    fn free_parameters_of_psb_model() {
        let p = two_state();
        let free = p.free_parameters(&FrozenSet::new());
        assert_eq!(free.len(), 7);
        let frozen = FrozenSet::parse("pi", 3).unwrap();
        let elz = HmmParams::new(
            vec![0.5, 0.0, 0.5],
            vec![0.0, 1.0, 0.0],
            vec![1.0; 3],
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        assert_eq!(elz.free_parameters(&frozen).len(), 12);
    }

    #[test]
    fn with_value_renormalizes_row() {
        let p = two_state().with_value(ParamId::Transition(0, 1), 0.01).unwrap();
        assert_eq!(p.transition(0, 1), 0.01);
        assert!((p.transition(0, 0) - 0.99).abs() < 1e-15);
        let p = p.with_value(ParamId::Transition(1, 0), 0.2).unwrap();
        assert!((p.transition(1, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let p = two_state().with_labels(["triplet", "singlet"]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let q: HmmParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
        assert!(serde_json::from_str::<HmmParams>(
            r#"{"initial":[0.5,0.6],"means":[0,1],"variances":[1,1],"transitions":[[1,0],[0,1]]}"#
        )
        .is_err());
    }
}
