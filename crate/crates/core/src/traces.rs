//! Collections of traces, seeded generation, and file formats.
//!
//! Two on-disk forms are supported: a CSV table with columns
//! `trace_id,t,y,true_state` (states 1-based, empty when unknown) and a
//! little-endian binary container that round-trips every sample bit for bit.
//! Both are accompanied by a JSON sidecar (`<file>.meta.json`) describing how
//! the traces were made.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{HmmParams, SignalTrace};
use crate::noise::{sample_correlated_hmm_trace, sample_hmm_trace, CorrelatedSampler, NoiseSpec};
use crate::rng;

const MAGIC: &[u8; 4] = b"SPRT";
const VERSION: u32 = 1;

/// How the initial state of each generated trace is chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialStates {
    /// Drawn from the model's π.
    FromModel,
    /// Cycles through the listed states by trace id, giving equal shares.
    Balanced(Vec<usize>),
}

/// Everything needed to reproduce a generated trace set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub params: HmmParams,
    /// Noise process shared by every state; `None` draws white noise with
    /// the model's own variances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub num_traces: usize,
    pub trace_len: usize,
    pub initial_states: InitialStates,
    pub seed: u64,
    /// Identifier of the first trace; trace k gets `first_id + k`.
    #[serde(default)]
    pub first_id: u64,
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_traces == 0 || self.trace_len == 0 {
            return Err(Error::Config("trace count and length must be at least 1".into()));
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        if let InitialStates::Balanced(states) = &self.initial_states {
            if states.is_empty() || states.iter().any(|&s| s >= self.params.num_states()) {
                return Err(Error::Config(format!(
                    "balanced initial states must name states 1..={}",
                    self.params.num_states()
                )));
            }
        }
        Ok(())
    }
}

/// Provenance stored next to a trace file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_interval: Option<f64>,
    /// Creation time in seconds since the epoch, if reproducibility allows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
    #[serde(default)]
    pub tool_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub traces: Vec<SignalTrace>,
    /// One identifier per trace, unique within a set.
    pub ids: Vec<u64>,
    pub metadata: TraceMetadata,
}

impl TraceSet {
    pub fn new(traces: Vec<SignalTrace>) -> Self {
        let ids = (0..traces.len() as u64).collect();
        TraceSet {
            traces,
            ids,
            metadata: TraceMetadata::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn trace_len(&self) -> Option<usize> {
        self.traces.first().map(SignalTrace::len)
    }

    pub fn is_labeled(&self) -> bool {
        !self.traces.is_empty() && self.traces.iter().all(|t| t.true_states.is_some())
    }

    /// Draws the set described by `spec`. Trace k uses the random stream
    /// `first_id + k` of `seed`, so any subset can be regenerated alone.
    pub fn generate(spec: &GenerationSpec) -> Result<Self> {
        spec.validate()?;
        let sampler = match &spec.noise {
            Some(n) if !n.is_white() => Some(CorrelatedSampler::new(n, spec.trace_len)?),
            _ => None,
        };
        let params = match &spec.noise {
            Some(n) if n.is_white() => {
                let v = n.variance();
                spec.params.with_variances(vec![v; spec.params.num_states()])?
            }
            _ => spec.params.clone(),
        };
        let traces = (0..spec.num_traces)
            .into_par_iter()
            .map(|k| {
                let id = spec.first_id + k as u64;
                let mut rng = rng::stream(spec.seed, id);
                let s0 = match &spec.initial_states {
                    InitialStates::FromModel => None,
                    InitialStates::Balanced(states) => Some(states[(id % states.len() as u64) as usize]),
                };
                let tr = match &sampler {
                    Some(s) => sample_correlated_hmm_trace(&params, s, s0, &mut rng),
                    None => sample_hmm_trace(&params, s0, spec.trace_len, &mut rng),
                };
                tr.map_err(|e| e.in_trace(k))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TraceSet {
            traces,
            ids: (0..spec.num_traces as u64).map(|k| spec.first_id + k).collect(),
            metadata: TraceMetadata {
                generation: Some(spec.clone()),
                sample_interval: None,
                created_unix: reproducible_timestamp(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
            },
        })
    }

    pub fn validate(&self, num_states: usize) -> Result<()> {
        if self.ids.len() != self.traces.len() {
            return Err(Error::LengthMismatch {
                expected: self.traces.len(),
                found: self.ids.len(),
            });
        }
        for (n, t) in self.traces.iter().enumerate() {
            t.validate(num_states).map_err(|e| e.in_trace(n))?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut body = || -> std::io::Result<()> {
            writeln!(w, "trace_id,t,y,true_state")?;
            for (id, tr) in self.ids.iter().zip(&self.traces) {
                for (t, y) in tr.samples.iter().enumerate() {
                    match &tr.true_states {
                        Some(s) => writeln!(w, "{id},{t},{y},{}", s[t] + 1)?,
                        None => writeln!(w, "{id},{t},{y},")?,
                    }
                }
            }
            w.flush()
        };
        body().map_err(|e| Error::io(path, e))?;
        self.write_sidecar(path)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        };
        let mut ids: Vec<u64> = Vec::new();
        let mut traces: Vec<(Vec<f64>, Vec<Option<usize>>)> = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if n == 0 {
                if line.trim() != "trace_id,t,y,true_state" {
                    return Err(bad(1, "expected header trace_id,t,y,true_state"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad(n + 1, "expected 4 columns"));
            }
            let id: u64 = cols[0].trim().parse().map_err(|_| bad(n + 1, "bad trace_id"))?;
            let t: usize = cols[1].trim().parse().map_err(|_| bad(n + 1, "bad t"))?;
            let y: f64 = cols[2].trim().parse().map_err(|_| bad(n + 1, "bad y"))?;
            let s = match cols[3].trim() {
                "" => None,
                v => match v.parse::<usize>() {
                    Ok(s) if s >= 1 => Some(s - 1),
                    _ => return Err(bad(n + 1, "bad true_state")),
                },
            };
            if ids.last() != Some(&id) {
                ids.push(id);
                traces.push((Vec::new(), Vec::new()));
            }
            let cur = traces.last_mut().expect("pushed above");
            if t != cur.0.len() {
                return Err(bad(n + 1, "time index out of sequence"));
            }
            cur.0.push(y);
            cur.1.push(s);
        }
        let traces = traces
            .into_iter()
            .map(|(y, s)| assemble(y, s).map_err(|r| Error::Format { path: path.to_path_buf(), reason: r }))
            .collect::<Result<Vec<_>>>()?;
        let set = TraceSet {
            traces,
            ids,
            metadata: read_sidecar(path)?.unwrap_or_default(),
        };
        set.check_unique_ids(path)?;
        Ok(set)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut body = || -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(self.traces.len() as u64).to_le_bytes())?;
            for (id, tr) in self.ids.iter().zip(&self.traces) {
                w.write_all(&id.to_le_bytes())?;
                w.write_all(&(tr.len() as u64).to_le_bytes())?;
                let flags = u8::from(tr.true_states.is_some()) | (u8::from(tr.sample_interval.is_some()) << 1);
                w.write_all(&[flags])?;
                if let Some(dt) = tr.sample_interval {
                    w.write_all(&dt.to_bits().to_le_bytes())?;
                }
                for y in &tr.samples {
                    w.write_all(&y.to_bits().to_le_bytes())?;
                }
                if let Some(s) = &tr.true_states {
                    for &x in s {
                        w.write_all(&(x as u32).to_le_bytes())?;
                    }
                }
            }
            w.flush()
        };
        body().map_err(|e| Error::io(path, e))?;
        self.write_sidecar(path)
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader { buf: &buf, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.bad("not a trace container"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(r.bad(&format!("unsupported version {version}")));
        }
        let n = r.u64()? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        let mut traces = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            ids.push(r.u64()?);
            let len = r.u64()? as usize;
            let flags = r.take(1)?[0];
            let dt = if flags & 2 != 0 { Some(f64::from_bits(r.u64()?)) } else { None };
            let samples = (0..len).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            let states = if flags & 1 != 0 {
                Some(
                    (0..len)
                        .map(|_| r.array().map(|b| u32::from_le_bytes(b) as usize))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            traces.push(SignalTrace {
                samples,
                true_states: states,
                sample_interval: dt,
            });
        }
        if r.pos != buf.len() {
            return Err(r.bad("trailing bytes"));
        }
        let set = TraceSet {
            traces,
            ids,
            metadata: read_sidecar(path)?.unwrap_or_default(),
        };
        set.check_unique_ids(path)?;
        Ok(set)
    }

    /// Reads either format, chosen by file extension (`.csv` or anything else
    /// for the binary container).
    pub fn read(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::read_csv(path)
        } else {
            Self::read_binary(path)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            self.write_csv(path)
        } else {
            self.write_binary(path)
        }
    }

    fn write_sidecar(&self, path: &Path) -> Result<()> {
        let p = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.metadata)?;
        fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))
    }

    fn check_unique_ids(&self, path: &Path) -> Result<()> {
        let mut sorted = self.ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "duplicate trace_id".into(),
            });
        }
        Ok(())
    }
}

fn assemble(samples: Vec<f64>, states: Vec<Option<usize>>) -> std::result::Result<SignalTrace, String> {
    if states.iter().all(Option::is_none) {
        return Ok(SignalTrace::new(samples));
    }
    let s: Option<Vec<usize>> = states.into_iter().collect();
    match s {
        Some(s) => SignalTrace::with_states(samples, s).map_err(|e| e.to_string()),
        None => Err("true_state missing on some rows of a labeled trace".into()),
    }
}

/// Sidecar file holding the metadata of `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn read_sidecar(path: &Path) -> Result<Option<TraceMetadata>> {
    let p = sidecar_path(path);
    match fs::read_to_string(&p) {
        Ok(s) => serde_json::from_str(&s).map(Some).map_err(|e| Error::Format {
            path: p,
            reason: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(p, e)),
    }
}

/// `SOURCE_DATE_EPOCH` if set; otherwise no timestamp, so reruns stay
/// byte-identical.
fn reproducible_timestamp() -> Option<u64> {
    std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn bad(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: format!("{reason} (byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.bad("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
