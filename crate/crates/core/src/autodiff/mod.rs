//! Reverse-mode differentiation over a fixed operation set, in `f64`.
//!
//! Stochastic quantities (Gaussian noise, sampled lags) are drawn outside
//! the graph and fed in as constant inputs, so every loss is a
//! deterministic function of its parameters and can be checked with
//! [`finite_difference_check`].

mod fdcheck;
mod graph;
mod params;
mod tensor;

use thiserror::Error;

pub use fdcheck::{finite_difference_check, FdConfig, FdParamResult, FdReport};
pub use graph::{sigmoid, Gradients, Graph, Mask, Var};
pub use params::{ParameterSet, PARAMS_FORMAT_VERSION};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: left operand {left:?}, right operand {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("gradient requested for a non-scalar loss of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("softmax row {0} has no allowed entries")]
    EmptySoftmaxRow(usize),
    #[error("zero-norm row {row} in the {operand} operand of cosine similarity")]
    ZeroNorm { operand: &'static str, row: usize },
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange { what: &'static str, index: usize, size: usize },
    #[error("loss is not finite when parameter `{param}` entry {index} is offset by {offset:e}")]
    NonFiniteProbe { param: String, index: usize, offset: f64 },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, left: [usize; 2], right: [usize; 2]) -> Self {
        AutodiffError::ShapeMismatch { op, left: left.to_vec(), right: right.to_vec() }
    }
}

/// Result of [`evaluate_with_gradients`].
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub param_grads: ParameterSet,
    pub input_grads: Vec<Tensor>,
}

/// Builds a graph from `inputs` and `params`, evaluates the scalar loss it
/// returns and differentiates it with respect to every parameter and input.
pub fn evaluate_with_gradients<E, F>(params: &ParameterSet, inputs: &[Tensor], build: F) -> Result<Evaluation, E>
where
    E: From<AutodiffError>,
    F: FnOnce(&mut Graph<'_>, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new(params);
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut g, &vars)?;
    let value = g.scalar(loss)?;
    let grads = g.backward(loss)?;
    let input_grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();
    Ok(Evaluation { loss: value, param_grads: grads.parameters(&g), input_grads })
}

/// Forward-only evaluation of the tensor returned by `build`.
pub fn evaluate<E, F>(params: &ParameterSet, build: F) -> Result<Tensor, E>
where
    E: From<AutodiffError>,
    F: FnOnce(&mut Graph<'_>) -> Result<Var, E>,
{
    let mut g = Graph::new(params);
    let out = build(&mut g)?;
    Ok(g.value(out).clone())
}
