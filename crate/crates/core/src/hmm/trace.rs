use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One readout shot: the digitized sensor samples y_t, optionally with the
/// ground-truth state sequence that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTrace {
    pub samples: Vec<f64>,
    /// 0-based state index per sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_states: Option<Vec<usize>>,
    /// Seconds per sample. Metadata only; every algorithm counts time steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_interval: Option<f64>,
}

impl SignalTrace {
    pub fn new(samples: Vec<f64>) -> Self {
        SignalTrace {
            samples,
            true_states: None,
            sample_interval: None,
        }
    }

    pub fn with_states(samples: Vec<f64>, states: Vec<usize>) -> Result<Self> {
        if samples.len() != states.len() {
            return Err(Error::LengthMismatch {
                expected: samples.len(),
                found: states.len(),
            });
        }
        Ok(SignalTrace {
            samples,
            true_states: Some(states),
            sample_interval: None,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ground-truth state at t=0, if known.
    pub fn initial_state(&self) -> Option<usize> {
        self.true_states.as_ref().and_then(|s| s.first().copied())
    }

    /// Checks the trace against a model with `num_states` states.
    pub fn validate(&self, num_states: usize) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidTrace("trace has no samples".into()));
        }
        if let Some(y) = self.samples.iter().find(|y| !y.is_finite()) {
            return Err(Error::InvalidTrace(format!("sample {y} is not finite")));
        }
        if let Some(states) = &self.true_states {
            if states.len() != self.samples.len() {
                return Err(Error::LengthMismatch {
                    expected: self.samples.len(),
                    found: states.len(),
                });
            }
            if let Some(s) = states.iter().find(|s| **s >= num_states) {
                return Err(Error::InvalidTrace(format!(
                    "state index {} outside 1..={num_states}",
                    s + 1
                )));
            }
        }
        Ok(())
    }
}
