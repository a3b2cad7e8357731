//! Dense row-major `f64` tensors and named parameters.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("backward requires a scalar output, found shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("consistent by construction")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("consistent by construction")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value]).expect("consistent by construction")
    }

    /// A `rows x cols` matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), C], data).expect("consistent by construction")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// First dimension; a 1-d tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Product of all but the first dimension (the whole length for 1-d).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.data.len()
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "set_grad",
                expected: self.shape.clone(),
                found: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: shape,
                found: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// A trainable tensor with a stable name.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// A non-trainable state tensor (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Owns every parameter and buffer of a model in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name, which is a
    /// model-construction bug.
    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> BufferId {
        let name = name.into();
        assert!(
            self.buffers.iter().all(|b| b.name != name),
            "duplicate buffer name `{name}`"
        );
        self.buffers.push(Buffer { name, tensor });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols(), t.numel()), (2, 3, 6));
        assert!(t.clone().reshaped(vec![3, 2]).is_ok());
        assert!(t.reshaped(vec![4]).is_err());
    }

    #[test]
    fn grad_slot_matches_shape() {
        let mut t = Tensor::zeros(vec![2, 2]);
        assert!(t.set_grad(vec![1.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0; 4][..]));
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add_param("w", Tensor::zeros(vec![1]));
        s.add_param("w", Tensor::zeros(vec![1]));
    }

    #[test]
    fn store_counts_trainable_scalars() {
        let mut s = ParamStore::new();
        s.add_param("a", Tensor::zeros(vec![2, 3]));
        s.add_param("b", Tensor::zeros(vec![3]));
        s.add_buffer("running_mean", Tensor::zeros(vec![3]));
        assert_eq!(s.count(), 9);
        assert!(s.params().iter().all(|p| p.tensor.requires_grad()));
    }
}
