//! `ckpt-v1`: one line of JSON manifest, a newline, then every parameter and
//! buffer as little-endian `f64`, concatenated in manifest order.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EcapNet, FcnBaseline, FcnConfig, ForwardCtx, ModelConfig, ModelError, PreparedBatch, Surrogate};
use crate::autodiff::{Tape, Var};
use crate::graph::FEATURE_CHANNELS;
use crate::spline::Aggregation;
use crate::tensor::{ParamStore, Tensor};

pub const CKPT_SCHEMA: &str = "ckpt-v1";

/// Either model kind, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    EcapNet { net: EcapNet, seed: u64 },
    Fcn { net: FcnBaseline, seed: u64 },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum ModelSpec {
    Ecapnet { config: ModelConfig },
    Fcn { config: FcnConfig },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    byte_offset: usize,
    n_values: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema: String,
    model: ModelSpec,
    feature_channels: Vec<String>,
    aggregation: Option<Aggregation>,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn seed(&self) -> u64 {
        match self {
            Self::EcapNet { seed, .. } | Self::Fcn { seed, .. } => *seed,
        }
    }

    fn spec(&self) -> (ModelSpec, Option<Aggregation>) {
        match self {
            Self::EcapNet { net, .. } => (
                ModelSpec::Ecapnet {
                    config: net.config.clone(),
                },
                Some(net.config.aggregation),
            ),
            Self::Fcn { net, .. } => (
                ModelSpec::Fcn {
                    config: net.config.clone(),
                },
                None,
            ),
        }
    }

    fn surrogate(&self) -> &dyn Surrogate {
        match self {
            Self::EcapNet { net, .. } => net,
            Self::Fcn { net, .. } => net,
        }
    }

    fn surrogate_mut(&mut self) -> &mut dyn Surrogate {
        match self {
            Self::EcapNet { net, .. } => net,
            Self::Fcn { net, .. } => net,
        }
    }
}

impl Surrogate for Checkpoint {
    fn store(&self) -> &ParamStore {
        self.surrogate().store()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.surrogate_mut().store_mut()
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: &PreparedBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        self.surrogate().forward(tape, params, input, ctx)
    }
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<(), ModelError> {
    let store = ckpt.store();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let entries = store
        .params()
        .iter()
        .map(|p| (&p.name, TensorKind::Param, &p.tensor))
        .chain(store.buffers().iter().map(|b| (&b.name, TensorKind::Buffer, &b.tensor)));
    for (name, kind, t) in entries {
        tensors.push(TensorEntry {
            name: name.clone(),
            kind,
            shape: t.shape().to_vec(),
            byte_offset: blob.len(),
            n_values: t.numel(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let (model, aggregation) = ckpt.spec();
    let manifest = Manifest {
        schema: CKPT_SCHEMA.into(),
        model,
        feature_channels: FEATURE_CHANNELS.iter().map(|s| s.to_string()).collect(),
        aggregation,
        seed: ckpt.seed(),
        tensors,
    };
    serde_json::to_writer(&mut w, &manifest).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(b"\n")?;
    w.write_all(&blob)?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Checkpoint, ModelError> {
    let bad = |m: String| ModelError::Checkpoint(m);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let manifest: Manifest = serde_json::from_slice(&line).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.schema != CKPT_SCHEMA {
        return Err(bad(format!("unsupported schema `{}`", manifest.schema)));
    }
    if manifest.feature_channels != FEATURE_CHANNELS {
        return Err(bad(format!("feature channels {:?}", manifest.feature_channels)));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut ckpt = match manifest.model {
        ModelSpec::Ecapnet { config } => {
            if manifest.aggregation != Some(config.aggregation) {
                return Err(bad("aggregation disagrees with the model config".into()));
            }
            Checkpoint::EcapNet {
                net: EcapNet::new(config, manifest.seed)?,
                seed: manifest.seed,
            }
        }
        ModelSpec::Fcn { config } => Checkpoint::Fcn {
            net: FcnBaseline::new(config, manifest.seed)?,
            seed: manifest.seed,
        },
    };
    let store = ckpt.store_mut();
    let expected = store.params().len() + store.buffers().len();
    if manifest.tensors.len() != expected {
        return Err(bad(format!("{} tensors listed, model has {expected}", manifest.tensors.len())));
    }
    let mut cursor = 0;
    let n_params = store.params().len();
    for (i, entry) in manifest.tensors.iter().enumerate() {
        let (name, target) = if i < n_params {
            let p = &mut store.params_mut()[i];
            (&p.name, &mut p.tensor)
        } else {
            let b = &mut store.buffers_mut()[i - n_params];
            (&b.name, &mut b.tensor)
        };
        let kind_ok = matches!(
            (&entry.kind, i < n_params),
            (TensorKind::Param, true) | (TensorKind::Buffer, false)
        );
        if &entry.name != name || !kind_ok || entry.shape != target.shape() || entry.byte_offset != cursor {
            return Err(bad(format!("tensor `{}` does not match the model layout", entry.name)));
        }
        let end = cursor + entry.n_values * 8;
        if entry.n_values != target.numel() || end > blob.len() {
            return Err(bad(format!("tensor `{}` has a bad length", entry.name)));
        }
        let values: Vec<f64> = blob[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let requires_grad = target.requires_grad();
        *target = Tensor::new(entry.shape.clone(), values)?.with_requires_grad(requires_grad);
        cursor = end;
    }
    if cursor != blob.len() {
        return Err(bad(format!("{} trailing bytes", blob.len() - cursor)));
    }
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    let mut bytes = Vec::new();
    write_checkpoint(ckpt, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes[..])
}
