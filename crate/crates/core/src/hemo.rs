//! Wall-shear-stress indices: TAWSS, OSI and ECAP.
//!
//! For a vertex with shear vector `τ(t)` sampled on `t₀ < … < t_T`, using
//! trapezoidal integrals over the sampled interval of length `L`:
//!
//! ```text
//! TAWSS = (1/L) ∫ ‖τ‖ dt
//! OSI   = ½ (1 − ‖∫ τ dt‖ / ∫ ‖τ‖ dt)
//! ECAP  = OSI / max(TAWSS, ε)
//! ```
//!
//! Vertices whose TAWSS falls below `ε` are counted as floored. Their OSI is
//! set to zero because the direction ratio is undefined without flow.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Vec3};

pub const WSS_SCHEMA: &str = "wss-v1";
pub const DEFAULT_FLOOR: f64 = 1e-6;
pub const DEFAULT_THRESHOLD: f64 = 4.0;

#[derive(Debug, Error)]
pub enum HemoError {
    #[error("a series needs at least 2 time samples, found {0}")]
    DegenerateSeries(usize),
    #[error("times must be strictly increasing (index {0})")]
    NonIncreasingTimes(usize),
    #[error("non-finite sample at time {time}, vertex {vertex}")]
    NonFinite { time: usize, vertex: usize },
    #[error("expected {expected} samples, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid wss file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Time-resolved wall shear stress (Pa) on `n_vertices` vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct WssSeries {
    times: Vec<f64>,
    n_vertices: usize,
    /// `(time, vertex)` row-major.
    samples: Vec<Vec3>,
}

impl WssSeries {
    pub fn new(times: Vec<f64>, n_vertices: usize, samples: Vec<Vec3>) -> Result<Self, HemoError> {
        if times.len() < 2 {
            return Err(HemoError::DegenerateSeries(times.len()));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(HemoError::NonIncreasingTimes(i + 1));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(HemoError::Format("non-finite time".into()));
        }
        let expected = times.len() * n_vertices;
        if samples.len() != expected {
            return Err(HemoError::LengthMismatch {
                expected,
                found: samples.len(),
            });
        }
        if let Some(k) = samples.iter().position(|s| s.iter().any(|c| !c.is_finite())) {
            return Err(HemoError::NonFinite {
                time: k / n_vertices.max(1),
                vertex: k % n_vertices.max(1),
            });
        }
        Ok(Self {
            times,
            n_vertices,
            samples,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn samples(&self) -> &[Vec3] {
        &self.samples
    }

    pub fn at(&self, time: usize, vertex: usize) -> Vec3 {
        self.samples[time * self.n_vertices + vertex]
    }

    /// Same signal played backwards on the mirrored time grid.
    pub fn reversed(&self) -> Self {
        let (t0, t1) = (self.times[0], *self.times.last().expect("T >= 2"));
        let times = self.times.iter().rev().map(|t| t0 + t1 - t).collect();
        let samples = (0..self.n_times())
            .rev()
            .flat_map(|k| self.samples[k * self.n_vertices..(k + 1) * self.n_vertices].to_vec())
            .collect();
        Self {
            times,
            n_vertices: self.n_vertices,
            samples,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            times: self.times.clone(),
            n_vertices: self.n_vertices,
            samples: self.samples.iter().map(|v| geom::scale(*v, s)).collect(),
        }
    }

    /// Writes the `wss-v1` format: one line of JSON header, then the samples
    /// as little-endian `f64` in `(time, vertex, component)` order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), HemoError> {
        let header = WssHeader {
            schema: WSS_SCHEMA.into(),
            n_vertices: self.n_vertices,
            n_times: self.n_times(),
            times: self.times.clone(),
            units: WssUnits::default(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| HemoError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        let mut blob = Vec::with_capacity(self.samples.len() * 24);
        for s in &self.samples {
            for c in s {
                blob.extend_from_slice(&c.to_le_bytes());
            }
        }
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, HemoError> {
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        let header: WssHeader = serde_json::from_slice(&line)
            .map_err(|e| HemoError::Format(format!("header: {e}")))?;
        if header.schema != WSS_SCHEMA {
            return Err(HemoError::Format(format!("schema `{}`", header.schema)));
        }
        if header.times.len() != header.n_times {
            return Err(HemoError::Format(format!(
                "header lists {} times but n_times = {}",
                header.times.len(),
                header.n_times
            )));
        }
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let expected = header.n_times * header.n_vertices * 24;
        if blob.len() != expected {
            return Err(HemoError::Format(format!(
                "blob has {} bytes, expected {expected}",
                blob.len()
            )));
        }
        let samples = blob
            .chunks_exact(24)
            .map(|c| {
                let f = |i: usize| f64::from_le_bytes(c[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
                [f(0), f(1), f(2)]
            })
            .collect();
        Self::new(header.times, header.n_vertices, samples)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory");
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WssUnits {
    time: String,
    wss: String,
}

impl Default for WssUnits {
    fn default() -> Self {
        Self {
            time: "s".into(),
            wss: "Pa".into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WssHeader {
    schema: String,
    n_vertices: usize,
    n_times: usize,
    times: Vec<f64>,
    units: WssUnits,
}

/// Per-vertex indices derived from a [`WssSeries`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EcapField {
    pub tawss: Vec<f64>,
    pub osi: Vec<f64>,
    pub ecap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexReport {
    pub field: EcapField,
    /// Vertices whose TAWSS fell below the floor.
    pub n_floored: usize,
}

pub fn compute_indices(wss: &WssSeries, floor: f64) -> IndexReport {
    let t = wss.times();
    let duration = t[t.len() - 1] - t[0];
    let n = wss.n_vertices();
    let mut field = EcapField {
        tawss: Vec::with_capacity(n),
        osi: Vec::with_capacity(n),
        ecap: Vec::with_capacity(n),
    };
    let mut n_floored = 0;
    for v in 0..n {
        let mut magnitude = 0.0;
        let mut vector = [0.0; 3];
        for k in 0..t.len() - 1 {
            let half = 0.5 * (t[k + 1] - t[k]);
            let (a, b) = (wss.at(k, v), wss.at(k + 1, v));
            magnitude += half * (geom::norm(a) + geom::norm(b));
            vector = geom::add(vector, geom::scale(geom::add(a, b), half));
        }
        let tawss = magnitude / duration;
        let steady = (1..t.len()).all(|k| wss.at(k, v) == wss.at(0, v));
        let osi = if tawss < floor {
            n_floored += 1;
            0.0
        } else if steady {
            0.0
        } else {
            (0.5 * (1.0 - geom::norm(vector) / magnitude.max(floor))).clamp(0.0, 0.5)
        };
        field.tawss.push(tawss);
        field.osi.push(osi);
        field.ecap.push(osi / tawss.max(floor));
    }
    IndexReport { field, n_floored }
}

/// `ecap > threshold`, strictly, per vertex.
pub fn threshold_map(ecap: &[f64], threshold: f64) -> Vec<bool> {
    ecap.iter().map(|&e| e > threshold).collect()
}

/// Linearly interpolated percentile (`q` in `[0, 100]`) of a non-empty slice.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Serialize, Deserialize)]
struct EcapRow {
    vertex: usize,
    tawss: f64,
    osi: f64,
    ecap: f64,
}

impl EcapField {
    pub fn len(&self) -> usize {
        self.ecap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ecap.is_empty()
    }

    /// CSV with header `vertex,tawss,osi,ecap`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HemoError> {
        let mut wr = csv::Writer::from_writer(w);
        for i in 0..self.len() {
            wr.serialize(EcapRow {
                vertex: i,
                tawss: self.tawss[i],
                osi: self.osi[i],
                ecap: self.ecap[i],
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, HemoError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut field = EcapField::default();
        for (i, row) in rd.deserialize::<EcapRow>().enumerate() {
            let row = row?;
            if row.vertex != i {
                return Err(HemoError::Format(format!("row {i} has vertex {}", row.vertex)));
            }
            field.tawss.push(row.tawss);
            field.osi.push(row.osi);
            field.ecap.push(row.ecap);
        }
        Ok(field)
    }
}
