use rand::Rng;

use super::{uniform, ForwardCtx};
use crate::autodiff::{BatchStats, Tape, Var, BN_MOMENTUM};
use crate::tensor::{BufferId, ParamId, ParamStore, Tensor, TensorError};

/// Node-wise affine map `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (c_in + c_out) as f64).sqrt();
        let weight = store.add_param(
            format!("{name}.weight"),
            Tensor::matrix(c_in, c_out, uniform(rng, c_in * c_out, a)).expect("sized"),
        );
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(vec![c_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, params[self.weight.0])?;
        tape.add_row(y, params[self.bias.0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::filled(vec![channels], 1.0)),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::filled(vec![channels], 1.0)),
        }
    }

    /// Batch statistics in training mode (recorded in `ctx`), the running
    /// statistics held in `store` otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        store: &ParamStore,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var, TensorError> {
        let (g, b) = (params[self.gamma.0], params[self.beta.0]);
        if ctx.training {
            let (y, stats) = tape.batch_norm_train(x, g, b)?;
            ctx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            tape.batch_norm_eval(
                x,
                g,
                b,
                store.buffer(self.running_mean).tensor.data(),
                store.buffer(self.running_var).tensor.data(),
            )
        }
    }
}

/// Pending running-average update for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats,
}

impl BnUpdate {
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply(&self, store: &mut ParamStore) {
        for (id, batch) in [(self.mean, &self.stats.mean), (self.var, &self.stats.var)] {
            for (r, v) in store.buffer_mut(id).tensor.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}
