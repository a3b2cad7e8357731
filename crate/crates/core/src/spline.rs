//! Continuous B-spline kernel convolution over edge pseudo-coordinates.
//!
//! For an edge `j -> i` with pseudo-coordinate `u ∈ [0,1]³` the kernel is a
//! degree-1 (trilinear) tensor-product B-spline with `k` control points per
//! dimension. At most eight control weights are active for any `u`. A layer
//! computes
//!
//! ```text
//! out_i = AGG_{j -> i} Σ_p B_p(u_ji) · x_j W_p  +  x_i W_root  +  bias
//! ```
//!
//! with `AGG` the mean (default) or sum over incoming edges.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{gemm, CustomOp, Tape, Var};
use crate::geom::Vec3;
use crate::graph::GraphBatch;
use crate::tensor::{ParamId, ParamStore, Tensor, TensorError};

/// Tolerance for pseudo-coordinates slightly outside the unit cube.
const DOMAIN_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("pseudo-coordinate component {value} outside [0, 1]")]
    OutOfDomain { value: f64 },
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplineKernelSpec {
    pub degree: usize,
    pub kernel_size: usize,
}

impl Default for SplineKernelSpec {
    fn default() -> Self {
        Self {
            degree: 1,
            kernel_size: 5,
        }
    }
}

impl SplineKernelSpec {
    pub const DIMS: usize = 3;
    /// Active control points for any `u` with a degree-1 basis.
    pub const ACTIVE: usize = 8;

    pub fn validate(&self) -> Result<(), SplineError> {
        if self.degree != 1 {
            return Err(SplineError::UnsupportedKernel(format!(
                "degree {} (only 1 is supported)",
                self.degree
            )));
        }
        if self.kernel_size < 2 {
            return Err(SplineError::UnsupportedKernel(format!(
                "kernel size {} (need at least 2)",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn n_weights(&self) -> usize {
        self.kernel_size.pow(Self::DIMS as u32)
    }
}

/// Active `(flat weight index, basis value)` pairs for one pseudo-coordinate.
/// Values sum to one; some may be exactly zero.
pub fn basis(u: Vec3, spec: &SplineKernelSpec) -> Result<[(usize, f64); 8], SplineError> {
    let k = spec.kernel_size;
    let mut per_dim = [[(0usize, 0.0f64); 2]; 3];
    for d in 0..3 {
        let ud = u[d];
        if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&ud) {
            return Err(SplineError::OutOfDomain { value: ud });
        }
        let p = ud.clamp(0.0, 1.0) * (k - 1) as f64;
        let i0 = (p.floor() as usize).min(k - 2);
        let t = p - i0 as f64;
        per_dim[d] = [(i0, 1.0 - t), (i0 + 1, t)];
    }
    let mut out = [(0usize, 0.0f64); 8];
    let mut n = 0;
    for &(ix, bx) in &per_dim[0] {
        for &(iy, by) in &per_dim[1] {
            for &(iz, bz) in &per_dim[2] {
                out[n] = (ix * k * k + iy * k + iz, bx * by * bz);
                n += 1;
            }
        }
    }
    Ok(out)
}

/// Edges per cache block: a block's messages stay cache resident while every
/// weight cell of the block is processed.
const EDGE_BLOCK: usize = 512;

/// Basis pairs of every edge regrouped by edge block and control weight, so
/// that each (block, weight) cell multiplies one gathered matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeBasis {
    n_edges: usize,
    n_weights: usize,
    /// `cell_ptr[c]..cell_ptr[c + 1]` index the entries of cell
    /// `c = block * n_weights + p`.
    cell_ptr: Vec<usize>,
    edge: Vec<usize>,
    source: Vec<usize>,
    value: Vec<f64>,
}

impl EdgeBasis {
    pub fn new(
        pseudo: &[Vec3],
        sources: &[usize],
        spec: &SplineKernelSpec,
    ) -> Result<Self, SplineError> {
        let n_weights = spec.n_weights();
        let n_cells = pseudo.len().div_ceil(EDGE_BLOCK) * n_weights;
        let mut per_edge = Vec::with_capacity(pseudo.len());
        let mut counts = vec![0usize; n_cells];
        for (e, u) in pseudo.iter().enumerate() {
            let pairs = basis(*u, spec)?;
            for &(p, b) in &pairs {
                if b != 0.0 {
                    counts[e / EDGE_BLOCK * n_weights + p] += 1;
                }
            }
            per_edge.push(pairs);
        }
        let mut cell_ptr = vec![0usize; n_cells + 1];
        for c in 0..n_cells {
            cell_ptr[c + 1] = cell_ptr[c] + counts[c];
        }
        let total = cell_ptr[n_cells];
        let mut fill = cell_ptr.clone();
        let mut edge = vec![0; total];
        let mut source = vec![0; total];
        let mut value = vec![0.0; total];
        for (e, pairs) in per_edge.iter().enumerate() {
            for &(p, b) in pairs {
                if b != 0.0 {
                    let c = e / EDGE_BLOCK * n_weights + p;
                    let slot = fill[c];
                    fill[c] += 1;
                    edge[slot] = e;
                    source[slot] = sources[e];
                    value[slot] = b;
                }
            }
        }
        Ok(Self {
            n_edges: pseudo.len(),
            n_weights,
            cell_ptr,
            edge,
            source,
            value,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    fn n_weights(&self) -> usize {
        self.n_weights
    }

    fn n_cells(&self) -> usize {
        self.cell_ptr.len() - 1
    }

    fn gather(&self, c: usize, x: &[f64], c_in: usize, buf: &mut Vec<f64>) -> std::ops::Range<usize> {
        let range = self.cell_ptr[c]..self.cell_ptr[c + 1];
        buf.clear();
        for s in range.clone() {
            let start = buf.len();
            buf.extend_from_slice(&x[self.source[s] * c_in..(self.source[s] + 1) * c_in]);
            let b = self.value[s];
            for v in &mut buf[start..] {
                *v *= b;
            }
        }
        range
    }
}

/// Edge messages `Σ_p B_p(u_e) · x_source(e) W_p` as an `E x C_out` matrix.
struct SplineMessage {
    basis: std::rc::Rc<EdgeBasis>,
}

fn message_forward(basis: &EdgeBasis, x: &Tensor, w: &Tensor) -> Tensor {
    let c_in = x.shape()[1];
    let c_out = w.shape()[2];
    let block = c_in * c_out;
    let mut out = vec![0.0; basis.n_edges * c_out];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for c in 0..basis.n_cells() {
        let p = c % basis.n_weights;
        let range = basis.gather(c, x.data(), c_in, &mut xs);
        let rows = range.len();
        if rows == 0 {
            continue;
        }
        ys.clear();
        ys.resize(rows * c_out, 0.0);
        gemm(rows, c_in, c_out, &xs, false, &w.data()[p * block..(p + 1) * block], false, &mut ys, 0.0);
        for (r, s) in range.enumerate() {
            let e = basis.edge[s];
            for (o, y) in out[e * c_out..(e + 1) * c_out].iter_mut().zip(&ys[r * c_out..(r + 1) * c_out]) {
                *o += y;
            }
        }
    }
    Tensor::matrix(basis.n_edges, c_out, out).expect("sized above")
}

impl CustomOp for SplineMessage {
    fn name(&self) -> &'static str {
        "spline_message"
    }

    fn backward(&self, inputs: &[&Tensor], needs: &[bool], _output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let c_in = x.shape()[1];
        let c_out = w.shape()[2];
        let block = c_in * c_out;
        let basis = &*self.basis;
        let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut gw = needs[1].then(|| vec![0.0; w.numel()]);
        let mut xs = Vec::new();
        let mut gs = Vec::new();
        let mut gxs = Vec::new();
        for c in 0..basis.n_cells() {
            let p = c % basis.n_weights;
            let range = basis.cell_ptr[c]..basis.cell_ptr[c + 1];
            let rows = range.len();
            if rows == 0 {
                continue;
            }
            gs.clear();
            for s in range.clone() {
                let e = basis.edge[s];
                gs.extend_from_slice(&g[e * c_out..(e + 1) * c_out]);
            }
            let wp = &w.data()[p * block..(p + 1) * block];
            if let Some(gw) = gw.as_mut() {
                basis.gather(c, x.data(), c_in, &mut xs);
                gemm(c_in, rows, c_out, &xs, true, &gs, false, &mut gw[p * block..(p + 1) * block], 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                gxs.clear();
                gxs.resize(rows * c_in, 0.0);
                gemm(rows, c_out, c_in, &gs, false, wp, true, &mut gxs, 0.0);
                for (r, s) in range.enumerate() {
                    let src = basis.source[s];
                    let b = basis.value[s];
                    for (o, v) in gx[src * c_in..(src + 1) * c_in].iter_mut().zip(&gxs[r * c_in..(r + 1) * c_in]) {
                        *o += b * v;
                    }
                }
            }
        }
        vec![gx, gw]
    }
}

/// Records the edge-message computation on the tape.
pub fn spline_message(
    tape: &mut Tape,
    x: Var,
    weight: Var,
    basis: &std::rc::Rc<EdgeBasis>,
) -> Result<Var, TensorError> {
    let xt = tape.value(x);
    let wt = tape.value(weight);
    if xt.shape().len() != 2 || wt.shape().len() != 3 || wt.shape()[1] != xt.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "spline_message",
            expected: vec![basis.n_weights(), xt.shape().get(1).copied().unwrap_or(0), 0],
            found: wt.shape().to_vec(),
        });
    }
    if wt.shape()[0] != basis.n_weights() {
        return Err(TensorError::ShapeMismatch {
            op: "spline_message",
            expected: vec![basis.n_weights()],
            found: vec![wt.shape()[0]],
        });
    }
    if let Some(&bad) = basis.source.iter().find(|&&s| s >= xt.shape()[0]) {
        return Err(TensorError::IndexOutOfRange {
            op: "spline_message",
            index: bad,
            bound: xt.shape()[0],
        });
    }
    let out = message_forward(basis, xt, wt);
    Ok(tape.custom(
        &[x, weight],
        out,
        Box::new(SplineMessage {
            basis: basis.clone(),
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

/// Edge structure of a batch prepared for convolution.
#[derive(Debug, Clone)]
pub struct ConvGraph {
    pub n_nodes: usize,
    pub targets: Vec<usize>,
    pub basis: std::rc::Rc<EdgeBasis>,
}

impl ConvGraph {
    pub fn new(batch: &GraphBatch, spec: &SplineKernelSpec) -> Result<Self, SplineError> {
        spec.validate()?;
        Ok(Self {
            n_nodes: batch.n_nodes,
            targets: batch.targets_index(),
            basis: std::rc::Rc::new(EdgeBasis::new(&batch.pseudo_coords, &batch.sources(), spec)?),
        })
    }
}

/// Half-width of the uniform initialization range.
pub fn init_bound(n_weights: usize, c_in: usize, c_out: usize) -> f64 {
    let active_fraction = SplineKernelSpec::ACTIVE as f64 / 125.0;
    (6.0 / ((1.0 + active_fraction * n_weights as f64) * c_in as f64 + c_out as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplineConvLayer {
    pub spec: SplineKernelSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub aggregation: Aggregation,
    /// `n_weights x c_in x c_out`
    pub weight: ParamId,
    /// `c_in x c_out`
    pub root: ParamId,
    /// Absent when a batch norm follows, which would cancel it.
    pub bias: Option<ParamId>,
}

impl SplineConvLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: SplineKernelSpec,
        c_in: usize,
        c_out: usize,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, spec, c_in, c_out, aggregation, true, rng)
    }

    /// Same as [`SplineConvLayer::new`] without the bias vector.
    pub fn new_unbiased<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: SplineKernelSpec,
        c_in: usize,
        c_out: usize,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, spec, c_in, c_out, aggregation, false, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: SplineKernelSpec,
        c_in: usize,
        c_out: usize,
        aggregation: Aggregation,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = spec.n_weights();
        let a = init_bound(k, c_in, c_out);
        let w = (0..k * c_in * c_out).map(|_| rng.gen_range(-a..a)).collect();
        let weight = store.add_param(
            format!("{name}.weight"),
            Tensor::new(vec![k, c_in, c_out], w).expect("sized"),
        );
        let a = init_bound(1, c_in, c_out);
        let r = (0..c_in * c_out).map(|_| rng.gen_range(-a..a)).collect();
        let root = store.add_param(
            format!("{name}.root"),
            Tensor::matrix(c_in, c_out, r).expect("sized"),
        );
        let bias = with_bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(vec![c_out])));
        Self {
            spec,
            c_in,
            c_out,
            aggregation,
            weight,
            root,
            bias,
        }
    }

    pub fn parameter_count(spec: &SplineKernelSpec, c_in: usize, c_out: usize) -> usize {
        spec.n_weights() * c_in * c_out + c_in * c_out + c_out
    }

    /// `params` are the tape bindings of the owning store, indexed by `ParamId`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, graph: &ConvGraph) -> Result<Var, TensorError> {
        let msg = spline_message(tape, x, params[self.weight.0], &graph.basis)?;
        let agg = match self.aggregation {
            Aggregation::Mean => tape.scatter_mean(msg, &graph.targets, graph.n_nodes)?,
            Aggregation::Sum => tape.scatter_sum(msg, &graph.targets, graph.n_nodes)?,
        };
        let root = tape.matmul(x, params[self.root.0])?;
        let out = tape.add(agg, root)?;
        match self.bias {
            Some(b) => tape.add_row(out, params[b.0]),
            None => Ok(out),
        }
    }
}
