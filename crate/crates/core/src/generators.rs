//! Conditional causal mechanisms: one generator per variable.
//!
//! Generator j rebuilds column j of the data from the gated remaining
//! columns plus a fresh Gaussian noise draw. The non-linear form is a
//! 1-hidden-layer tanh network whose inputs pass the structural gates and
//! whose hidden units pass the functional gates; the linear form drops the
//! hidden layer and the functional gates entirely.

use crate::error::{Result, SamError};
use crate::gates::SampledGates;
use crate::rng::SamRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Parameters of one non-linear mechanism.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    /// (d+1) x n_h: d gated data inputs plus one noise row.
    pub hidden_weights: Tensor,
    /// n_h.
    pub hidden_bias: Tensor,
    /// n_h x 1.
    pub output_weights: Tensor,
    /// Scalar output bias.
    pub output_bias: Tensor,
}

/// Parameters of one linear mechanism.
#[derive(Clone, Debug)]
pub struct LinearParams {
    /// d x 1 input weights.
    pub weights: Tensor,
    /// 1 x 1 noise weight.
    pub noise_weight: Tensor,
    /// Scalar bias.
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub enum GeneratorBank {
    NonLinear(Vec<GeneratorParams>),
    Linear(Vec<LinearParams>),
}

impl GeneratorBank {
    pub fn len(&self) -> usize {
        match self {
            GeneratorBank::NonLinear(v) => v.len(),
            GeneratorBank::Linear(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scaled-uniform initialization, bounds 1/sqrt(fan-in).
pub fn init_nonlinear(d: usize, n_hidden: usize, rng: &mut SamRng) -> Vec<GeneratorParams> {
    let in_bound = 1.0 / ((d + 1) as f64).sqrt();
    let out_bound = 1.0 / (n_hidden as f64).sqrt();
    (0..d)
        .map(|_| GeneratorParams {
            hidden_weights: rng.uniform_tensor(&[d + 1, n_hidden], -in_bound, in_bound),
            hidden_bias: Tensor::zeros(&[n_hidden]),
            output_weights: rng.uniform_tensor(&[n_hidden, 1], -out_bound, out_bound),
            output_bias: Tensor::zeros(&[1]),
        })
        .collect()
}

pub fn init_linear(d: usize, rng: &mut SamRng) -> Vec<LinearParams> {
    let bound = 1.0 / ((d + 1) as f64).sqrt();
    (0..d)
        .map(|_| LinearParams {
            weights: rng.uniform_tensor(&[d, 1], -bound, bound),
            noise_weight: rng.uniform_tensor(&[1, 1], -bound, bound),
            bias: Tensor::zeros(&[1]),
        })
        .collect()
}

/// Tape handles for one generator's parameters.
pub enum GeneratorNodes {
    NonLinear {
        hidden_weights: NodeId,
        hidden_bias: NodeId,
        output_weights: NodeId,
        output_bias: NodeId,
    },
    Linear {
        weights: NodeId,
        noise_weight: NodeId,
        bias: NodeId,
    },
}

pub fn add_nonlinear_to_tape(tape: &mut Tape, p: &GeneratorParams) -> GeneratorNodes {
    GeneratorNodes::NonLinear {
        hidden_weights: tape.constant(p.hidden_weights.clone()),
        hidden_bias: tape.constant(p.hidden_bias.clone()),
        output_weights: tape.constant(p.output_weights.clone()),
        output_bias: tape.constant(p.output_bias.clone()),
    }
}

pub fn add_linear_to_tape(tape: &mut Tape, p: &LinearParams) -> GeneratorNodes {
    GeneratorNodes::Linear {
        weights: tape.constant(p.weights.clone()),
        noise_weight: tape.constant(p.noise_weight.clone()),
        bias: tape.constant(p.bias.clone()),
    }
}

/// Builds generator j's output column on the tape.
///
/// `structural_col` is gate column a_j (length d), `functional_col` the
/// z_j column for the non-linear form, `noise_col` the epoch's [n, 1]
/// Gaussian draw for this generator.
pub fn build_pseudo_column(
    tape: &mut Tape,
    nodes: &GeneratorNodes,
    data: NodeId,
    structural_col: NodeId,
    functional_col: Option<NodeId>,
    noise_col: NodeId,
) -> Result<NodeId> {
    let gated = tape.col_scale(data, structural_col)?;
    match nodes {
        GeneratorNodes::NonLinear {
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
        } => {
            let aug = tape.concat_cols(gated, noise_col)?;
            let pre = tape.matmul(aug, *hidden_weights)?;
            let pre = tape.broadcast_add_row(pre, *hidden_bias)?;
            let features = tape.tanh(pre)?;
            let z = functional_col.ok_or_else(|| {
                SamError::contract("non-linear generator needs a functional gate column")
            })?;
            let gated_features = tape.col_scale(features, z)?;
            let out = tape.matmul(gated_features, *output_weights)?;
            let out = tape.broadcast_add_row(out, *output_bias)?;
            let n = tape.value(out).rows();
            tape.reshape(out, vec![n])
        }
        GeneratorNodes::Linear {
            weights,
            noise_weight,
            bias,
        } => {
            let wx = tape.matmul(gated, *weights)?;
            let noise_term = tape.matmul(noise_col, *noise_weight)?;
            let sum = tape.add(wx, noise_term)?;
            let out = tape.broadcast_add_row(sum, *bias)?;
            let n = tape.value(out).rows();
            tape.reshape(out, vec![n])
        }
    }
}

/// Generated replacement columns; batch j is the observed data with column j
/// swapped for generator j's output, the other columns bit-identical.
#[derive(Clone, Debug)]
pub struct PseudoSampleBatch {
    data: Tensor,
    columns: Vec<Tensor>,
}

impl PseudoSampleBatch {
    pub fn new(data: Tensor, columns: Vec<Tensor>) -> Self {
        PseudoSampleBatch { data, columns }
    }

    pub fn column(&self, j: usize) -> &Tensor {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Tensor] {
        &self.columns
    }

    /// The full pseudo-sample matrix for variable j.
    pub fn matrix(&self, j: usize) -> Tensor {
        self.data.with_column(j, self.columns[j].data())
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// Non-linear generation for all d variables (public forward pass).
pub fn generate(
    params: &[GeneratorParams],
    data: &Tensor,
    gates: &SampledGates,
    noise: &Tensor,
) -> Result<PseudoSampleBatch> {
    let functional = gates.functional.as_ref().ok_or_else(|| {
        SamError::contract("non-linear generation needs sampled functional gates")
    })?;
    let d = data.cols();
    let n = data.rows();
    let mut tape = Tape::new();
    let data_node = tape.constant(data.clone());
    let adj = tape.constant(gates.structural.clone());
    let func = tape.constant(functional.clone());
    let mut columns = Vec::with_capacity(d);
    for (j, p) in params.iter().enumerate() {
        let nodes = add_nonlinear_to_tape(&mut tape, p);
        let a_col = tape.column(adj, j)?;
        let z_col = tape.column(func, j)?;
        let noise_col = tape.constant(noise.column(j).reshape(vec![n, 1]));
        let col = build_pseudo_column(&mut tape, &nodes, data_node, a_col, Some(z_col), noise_col)
            .map_err(|e| generator_error(j, e))?;
        columns.push(tape.value(col).clone());
    }
    Ok(PseudoSampleBatch::new(data.clone(), columns))
}

/// Linear generation for all d variables (public forward pass).
pub fn generate_linear(
    params: &[LinearParams],
    data: &Tensor,
    gates: &SampledGates,
    noise: &Tensor,
) -> Result<PseudoSampleBatch> {
    let d = data.cols();
    let n = data.rows();
    let mut tape = Tape::new();
    let data_node = tape.constant(data.clone());
    let adj = tape.constant(gates.structural.clone());
    let mut columns = Vec::with_capacity(d);
    for (j, p) in params.iter().enumerate() {
        let nodes = add_linear_to_tape(&mut tape, p);
        let a_col = tape.column(adj, j)?;
        let noise_col = tape.constant(noise.column(j).reshape(vec![n, 1]));
        let col = build_pseudo_column(&mut tape, &nodes, data_node, a_col, None, noise_col)
            .map_err(|e| generator_error(j, e))?;
        columns.push(tape.value(col).clone());
    }
    Ok(PseudoSampleBatch::new(data.clone(), columns))
}

fn generator_error(index: usize, e: SamError) -> SamError {
    match e {
        SamError::NumericOverflow { op_index, op_name } => SamError::Diverged {
            epoch: 0,
            message: format!(
                "generator {index} produced a non-finite value in {op_name} (op {op_index})"
            ),
        },
        other => other,
    }
}
