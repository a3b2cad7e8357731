//! The ECAP surrogate network and the fully connected baseline.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CKPT_SCHEMA};
pub use layers::{BatchNorm, BnUpdate, Linear};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::graph::{FeatureGraph, GraphBatch, GraphError, N_FEATURES};
use crate::spline::{Aggregation, ConvGraph, SplineConvLayer, SplineError, SplineKernelSpec};
use crate::tensor::{ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected input length {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Elu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub n_hidden_layers: usize,
    pub dense_block_depth: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub kernel: SplineKernelSpec,
    pub out_channels: usize,
    pub aggregation: Aggregation,
    /// Per-channel standardization applied to node features before the
    /// first layer; absent means raw features.
    pub input_norm: Option<FeatureNorm>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: N_FEATURES,
            hidden_channels: 32,
            n_hidden_layers: 20,
            dense_block_depth: 4,
            dropout: 0.1,
            activation: Activation::Elu,
            kernel: SplineKernelSpec::default(),
            out_channels: 1,
            aggregation: Aggregation::Mean,
            input_norm: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.in_channels == 0 || self.hidden_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.dense_block_depth == 0 || !self.n_hidden_layers.is_multiple_of(self.dense_block_depth) {
            return bad("n_hidden_layers must be a multiple of a positive dense_block_depth");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        self.kernel.validate()?;
        if let Some(norm) = &self.input_norm {
            norm.validate(self.in_channels)?;
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.n_hidden_layers / self.dense_block_depth
    }

    /// Closed-form trainable parameter count.
    ///
    /// With `K` kernel weights, `h` hidden channels, depth `d` and `B` blocks:
    /// `conv(4, h) + 2h + B·(Σₗ [conv((l+1)h, h) + 2h] + (d+1)h·h + h) + conv(h, out) + out`,
    /// where `conv(a, b) = K·a·b + a·b`. Convolutions followed by batch norm
    /// carry no bias; `2h` counts the batch-norm scale and shift.
    pub fn expected_parameter_count(&self) -> usize {
        let conv = |a: usize, b: usize| (self.kernel.n_weights() + 1) * a * b;
        let h = self.hidden_channels;
        let d = self.dense_block_depth;
        let block: usize = (0..d).map(|l| conv((l + 1) * h, h) + 2 * h).sum::<usize>() + (d + 1) * h * h + h;
        conv(self.in_channels, h) + 2 * h + self.n_blocks() * block + conv(h, self.out_channels) + self.out_channels
    }
}

/// Per-channel `(x − mean) / std` feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    /// Mean and population standard deviation of every channel over all
    /// nodes of `graphs`; constant channels keep a unit scale.
    pub fn fit<'a>(graphs: impl IntoIterator<Item = &'a FeatureGraph>) -> Result<Self, ModelError> {
        let (mut n, mut sum, mut sq) = (0usize, [0.0; N_FEATURES], [0.0; N_FEATURES]);
        for g in graphs {
            for f in &g.node_features {
                n += 1;
                for c in 0..N_FEATURES {
                    sum[c] += f[c];
                    sq[c] += f[c] * f[c];
                }
            }
        }
        if n == 0 {
            return Err(ModelError::Config("cannot fit a feature norm without nodes".into()));
        }
        let mean = sum.map(|s| s / n as f64);
        let std: Vec<f64> = (0..N_FEATURES)
            .map(|c| {
                let sd = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt();
                if sd.is_finite() && sd > 1e-12 * mean[c].abs().max(1.0) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean: mean.to_vec(),
            std,
        })
    }

    fn validate(&self, channels: usize) -> Result<(), ModelError> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(ModelError::Config(format!("input_norm must have {channels} channels")));
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ModelError::Config("input_norm needs finite means and positive stds".into()));
        }
        Ok(())
    }

    /// Standardizes a node-feature matrix row by row.
    pub fn apply(&self, features: &Tensor) -> Tensor {
        let mut out = features.clone();
        let c = self.mean.len();
        for row in out.data_mut().chunks_mut(c) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out
    }
}

/// Mutable state threaded through one forward pass.
pub struct ForwardCtx<'a> {
    pub training: bool,
    rng: Option<&'a mut ChaCha8Rng>,
    /// Batch statistics to fold into running averages after the pass.
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    /// Training mode: batch statistics and dropout masks drawn from `rng`.
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
            bn_updates: Vec::new(),
        }
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var, TensorError> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.training => tape.dropout(x, p, true, rng),
            _ => Ok(x),
        }
    }
}

/// A batch with everything the models need precomputed.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub batch: GraphBatch,
    pub conv: ConvGraph,
    /// `n_nodes x 4`
    pub features: Tensor,
    /// `n_nodes x 1`
    pub targets: Tensor,
}

impl PreparedBatch {
    pub fn new(batch: GraphBatch, kernel: &SplineKernelSpec) -> Result<Self, ModelError> {
        let conv = ConvGraph::new(&batch, kernel)?;
        let features = Tensor::from_rows(&batch.node_features);
        let targets = Tensor::matrix(batch.n_nodes, 1, batch.targets.clone())?;
        Ok(Self {
            batch,
            conv,
            features,
            targets,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.batch.n_nodes
    }
}

/// Anything that maps a prepared batch to one prediction per node.
pub trait Surrogate {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// `params` are the tape bindings of [`Surrogate::store`].
    fn forward(&self, tape: &mut Tape, params: &[Var], input: &PreparedBatch, ctx: &mut ForwardCtx)
        -> Result<Var, ModelError>;

    /// Eval-mode predictions, one per node.
    fn predict(&self, input: &PreparedBatch) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let params = tape.bind_params(self.store());
        let y = self.forward(&mut tape, &params, input, &mut ForwardCtx::eval())?;
        Ok(tape.value(y).data().to_vec())
    }

    fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            u.apply(self.store_mut());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvUnit {
    conv: SplineConvLayer,
    bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseBlock {
    layers: Vec<ConvUnit>,
    transition: Linear,
}

/// Input SplineConv, dense blocks of SplineConv layers with node-wise linear
/// transitions, and an output SplineConv.
#[derive(Debug, Clone, PartialEq)]
pub struct EcapNet {
    pub config: ModelConfig,
    store: ParamStore,
    input: ConvUnit,
    blocks: Vec<DenseBlock>,
    output: SplineConvLayer,
}

impl EcapNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden_channels;
        let unit = |store: &mut ParamStore, name: &str, c_in: usize, rng: &mut ChaCha8Rng| ConvUnit {
            conv: SplineConvLayer::new_unbiased(store, name, config.kernel, c_in, h, config.aggregation, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), h),
        };
        let input = unit(&mut store, "input", config.in_channels, &mut rng);
        let blocks = (0..config.n_blocks())
            .map(|b| {
                let layers = (0..config.dense_block_depth)
                    .map(|l| unit(&mut store, &format!("block{b}.conv{l}"), (l + 1) * h, &mut rng))
                    .collect();
                let transition = Linear::new(
                    &mut store,
                    &format!("block{b}.transition"),
                    (config.dense_block_depth + 1) * h,
                    h,
                    &mut rng,
                );
                DenseBlock { layers, transition }
            })
            .collect();
        let output = SplineConvLayer::new(
            &mut store,
            "output",
            config.kernel,
            h,
            config.out_channels,
            config.aggregation,
            &mut rng,
        );
        Ok(Self {
            config,
            store,
            input,
            blocks,
            output,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    fn unit_forward(
        &self,
        unit: &ConvUnit,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        graph: &ConvGraph,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        let y = unit.conv.forward(tape, params, x, graph)?;
        let y = unit.bn.forward(tape, params, &self.store, y, ctx)?;
        let y = tape.elu(y);
        Ok(ctx.dropout(tape, y, self.config.dropout)?)
    }
}

impl Surrogate for EcapNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: &PreparedBatch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        if input.features.cols() != self.config.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "ecapnet",
                expected: vec![input.n_nodes(), self.config.in_channels],
                found: input.features.shape().to_vec(),
            }
            .into());
        }
        let graph = &input.conv;
        let features = match &self.config.input_norm {
            Some(norm) => norm.apply(&input.features),
            None => input.features.clone(),
        };
        let x = tape.constant(features);
        let mut x = self.unit_forward(&self.input, tape, params, x, graph, ctx)?;
        for block in &self.blocks {
            let mut parts = vec![x];
            for layer in &block.layers {
                let inp = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
                let y = self.unit_forward(layer, tape, params, inp, graph, ctx)?;
                parts.push(y);
            }
            let cat = tape.concat(&parts)?;
            x = block.transition.forward(tape, params, cat)?;
        }
        Ok(self.output.forward(tape, params, x, graph)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcnConfig {
    /// Template vertex count `N`.
    pub n_vertices: usize,
    pub hidden: Vec<usize>,
}

/// MLP from flattened template coordinates (`3N`) to `N` predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnBaseline {
    pub config: FcnConfig,
    store: ParamStore,
    layers: Vec<Linear>,
}

impl FcnBaseline {
    pub fn new(config: FcnConfig, seed: u64) -> Result<Self, ModelError> {
        if config.n_vertices == 0 || config.hidden.contains(&0) {
            return Err(ModelError::Config("FCN widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut widths = vec![3 * config.n_vertices];
        widths.extend(&config.hidden);
        widths.push(config.n_vertices);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("fc{i}"), w[0], w[1], &mut rng))
            .collect();
        Ok(Self { config, store, layers })
    }

    /// `3N·h₁ + h₁ + … + h_last·N + N`.
    pub fn expected_parameter_count(config: &FcnConfig) -> usize {
        let mut widths = vec![3 * config.n_vertices];
        widths.extend(&config.hidden);
        widths.push(config.n_vertices);
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    /// Forward on a `B x 3N` matrix of flattened coordinates; returns `B x N`.
    pub fn forward_flat(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, ModelError> {
        let n3 = 3 * self.config.n_vertices;
        if tape.value(x).cols() != n3 {
            return Err(ModelError::LengthMismatch {
                expected: n3,
                found: tape.value(x).cols(),
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, params, h)?;
            if i + 1 < self.layers.len() {
                h = tape.elu(h);
            }
        }
        Ok(h)
    }

    /// Predictions for one flattened coordinate vector of length `3N`.
    pub fn predict_flat(&self, coords: &[f64]) -> Result<Vec<f64>, ModelError> {
        let n3 = 3 * self.config.n_vertices;
        if coords.len() != n3 {
            return Err(ModelError::LengthMismatch {
                expected: n3,
                found: coords.len(),
            });
        }
        let mut tape = Tape::new();
        let params = tape.bind_params(&self.store);
        let x = tape.constant(Tensor::matrix(1, n3, coords.to_vec())?);
        let y = self.forward_flat(&mut tape, &params, x)?;
        Ok(tape.value(y).data().to_vec())
    }
}

impl Surrogate for FcnBaseline {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: &PreparedBatch,
        _ctx: &mut ForwardCtx,
    ) -> Result<Var, ModelError> {
        let n = self.config.n_vertices;
        let b = input.batch.n_graphs();
        if input.n_nodes() != b * n {
            return Err(ModelError::LengthMismatch {
                expected: b * n,
                found: input.n_nodes(),
            });
        }
        let flat: Vec<f64> = input.batch.positions.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::matrix(b, 3 * n, flat)?);
        let y = self.forward_flat(tape, params, x)?;
        Ok(tape.reshape(y, vec![b * n, 1])?)
    }
}

/// Uniform draw in `[-a, a)`.
pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

#[cfg(test)]
mod tests;
