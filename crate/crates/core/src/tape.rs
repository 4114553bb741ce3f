//! Fixed-topology reverse-mode differentiation.
//!
//! The architectures trained here never change shape mid-run, so the tape is
//! rebuilt from scratch every epoch: forward values are computed eagerly as
//! operations are recorded, and a single reverse sweep accumulates gradients
//! additively across fan-out. Every recorded operation checks its output for
//! NaN/Inf and reports the offending op index on failure.

use crate::error::{Result, SamError};
use crate::penalties;
use crate::tensor::Tensor;

pub type NodeId = usize;

const BN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Forward semantics for straight-through gates.
///
/// `Hard` is the training mode: gates evaluate to the Heaviside step of
/// logits plus noise, and the tape records the hard-minus-relaxed offset of
/// each gate as it is created. `Surrogate` replays a recorded program with
/// gates evaluated as sigmoid(logits + noise) + offset, which is the
/// differentiable surrogate whose exact gradient the straight-through
/// backward rule computes; finite-difference oracles use it.
#[derive(Clone)]
pub enum SteMode {
    Hard,
    Surrogate(Vec<Tensor>),
}

enum Op {
    Const,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    BroadcastAddRow(NodeId, NodeId),
    ColScale(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId),
    Exp(NodeId),
    ClampMax(NodeId, f64),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    TracePowerSeries(NodeId),
    StGate {
        x: NodeId,
        noise: Tensor,
    },
    Column(NodeId, usize),
    ReplaceColumn {
        m: NodeId,
        j: usize,
        col: NodeId,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        a: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(NodeId, NodeId),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "elementwise-multiply",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::BroadcastAddRow(..) => "broadcast-add",
            Op::ColScale(..) => "col-scale",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::Exp(..) => "exp",
            Op::ClampMax(..) => "clamp-max",
            Op::BatchNorm { .. } => "batch-norm",
            Op::Sum(..) => "sum-reduce",
            Op::Mean(..) => "mean-reduce",
            Op::TracePowerSeries(..) => "trace-power-series",
            Op::StGate { .. } => "straight-through-gate",
            Op::Column(..) => "column",
            Op::ReplaceColumn { .. } => "replace-column",
            Op::ConcatRows(..) => "concat-rows",
            Op::SliceRows { .. } => "slice-rows",
            Op::ConcatCols(..) => "concat-cols",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
    ste_mode: SteMode,
    ste_created: usize,
    ste_offsets: Vec<Tensor>,
    clamp_events: usize,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros when the loss does not depend on it.
    pub fn take(&mut self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.grads.get_mut(id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(shape),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_mode(SteMode::Hard)
    }

    pub fn with_mode(mode: SteMode) -> Self {
        Tape {
            nodes: Vec::new(),
            ste_mode: mode,
            ste_created: 0,
            ste_offsets: Vec::new(),
            clamp_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Hard-minus-relaxed offsets of straight-through gates, in creation
    /// order; feeds `SteMode::Surrogate` replays of the same program.
    pub fn ste_offsets(&self) -> &[Tensor] {
        &self.ste_offsets
    }

    /// Number of entries flattened by `clamp_max` so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(SamError::NumericOverflow {
                op_index: self.nodes.len(),
                op_name: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(self.nodes.len() - 1)
    }

    fn shape_err(&self, what: &str) -> SamError {
        SamError::contract(format!("{} (op index {})", what, self.nodes.len()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Const,
            value,
        });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows() {
            return Err(self.shape_err("matmul shape mismatch"));
        }
        let value = av.matmul(bv);
        self.push(Op::MatMul(a, b), value)
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(self.shape_err(what));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add shape mismatch")?;
        let value = self.nodes[a].value.add(&self.nodes[b].value);
        self.push(Op::Add(a, b), value)
    }

    pub fn add_many(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub shape mismatch")?;
        let value = self.nodes[a].value.sub(&self.nodes[b].value);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "elementwise-multiply shape mismatch")?;
        let value = self.nodes[a].value.hadamard(&self.nodes[b].value);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.nodes[a].value.scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.nodes[a].value.map(|v| v + c);
        self.push(Op::AddScalar(a), value)
    }

    /// Add a length-c vector to every row of an [r, c] matrix.
    pub fn broadcast_add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (&self.nodes[m].value, &self.nodes[v].value);
        if mv.ndim() != 2 || vv.len() != mv.cols() {
            return Err(self.shape_err("broadcast-add shape mismatch"));
        }
        let (r, c) = (mv.rows(), mv.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for k in 0..c {
                data.push(mv.at(i, k) + vv.data()[k]);
            }
        }
        self.push(Op::BroadcastAddRow(m, v), Tensor::new(vec![r, c], data))
    }

    /// Scale column k of an [r, c] matrix by v[k].
    pub fn col_scale(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mv, vv) = (&self.nodes[m].value, &self.nodes[v].value);
        if mv.ndim() != 2 || vv.len() != mv.cols() {
            return Err(self.shape_err("col-scale shape mismatch"));
        }
        let (r, c) = (mv.rows(), mv.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for k in 0..c {
                data.push(mv.at(i, k) * vv.data()[k]);
            }
        }
        self.push(Op::ColScale(m, v), Tensor::new(vec![r, c], data))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a]
            .value
            .map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
        self.push(Op::LeakyRelu(a), value)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn clamp_max(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let clipped = self.nodes[a].value.data().iter().filter(|&&v| v > c).count();
        let value = self.nodes[a].value.map(|v| v.min(c));
        self.clamp_events += clipped;
        self.push(Op::ClampMax(a, c), value)
    }

    /// Train-mode batch normalization over the rows of the presented batch.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.ndim() != 2 {
            return Err(self.shape_err("batch-norm needs a matrix"));
        }
        let (r, c) = (xv.rows(), xv.cols());
        if self.nodes[gamma].value.len() != c || self.nodes[beta].value.len() != c {
            return Err(self.shape_err("batch-norm scale/shift shape mismatch"));
        }
        let (mean, var) = batch_moments(xv);
        let xv = &self.nodes[x].value;
        let gv = self.nodes[gamma].value.data();
        let bv = self.nodes[beta].value.data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for k in 0..c {
                let xhat = (xv.at(i, k) - mean[k]) / (var[k] + BN_EPS).sqrt();
                data.push(gv[k] * xhat + bv[k]);
            }
        }
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
            },
            Tensor::new(vec![r, c], data),
        )
    }

    /// Batch statistics saved by a batch-norm node, as (mean, var) per column.
    pub fn batch_norm_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.nodes[a].value.sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.nodes[a].value.mean());
        self.push(Op::Mean(a), value)
    }

    /// Sum over k = 1..d of trace(A^k) / k! for a square input.
    pub fn trace_power_series(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if av.ndim() != 2 || av.rows() != av.cols() {
            return Err(self.shape_err("trace-power-series needs a square matrix"));
        }
        let value = Tensor::scalar(penalties::trace_power_series(av));
        self.push(Op::TracePowerSeries(a), value)
    }

    /// Straight-through binary gate: forward H(x + noise), backward
    /// sigmoid'(x + noise).
    pub fn st_gate(&mut self, x: NodeId, noise: Tensor) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.shape() != noise.shape() {
            return Err(self.shape_err("straight-through-gate noise shape mismatch"));
        }
        let shifted = xv.add(&noise);
        let hard = shifted.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let value = match &self.ste_mode {
            SteMode::Hard => {
                let relaxed = shifted.map(sigmoid);
                self.ste_offsets.push(hard.sub(&relaxed));
                hard
            }
            SteMode::Surrogate(offsets) => {
                let offset = offsets
                    .get(self.ste_created)
                    .expect("surrogate replay has an offset per gate")
                    .clone();
                shifted.map(sigmoid).add(&offset)
            }
        };
        self.ste_created += 1;
        self.push(Op::StGate { x, noise }, value)
    }

    pub fn column(&mut self, m: NodeId, j: usize) -> Result<NodeId> {
        let mv = &self.nodes[m].value;
        if mv.ndim() != 2 || j >= mv.cols() {
            return Err(self.shape_err("column out of range"));
        }
        let value = mv.column(j);
        self.push(Op::Column(m, j), value)
    }

    pub fn replace_column(&mut self, m: NodeId, j: usize, col: NodeId) -> Result<NodeId> {
        let (mv, cv) = (&self.nodes[m].value, &self.nodes[col].value);
        if mv.ndim() != 2 || j >= mv.cols() || cv.len() != mv.rows() {
            return Err(self.shape_err("replace-column shape mismatch"));
        }
        let value = mv.with_column(j, cv.data());
        self.push(Op::ReplaceColumn { m, j, col }, value)
    }

    pub fn concat_rows(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(self.shape_err("concat-rows needs at least one input"));
        }
        let parts: Vec<&Tensor> = ids.iter().map(|&id| &self.nodes[id].value).collect();
        let c = parts[0].cols();
        if parts.iter().any(|p| p.ndim() != 2 || p.cols() != c) {
            return Err(self.shape_err("concat-rows column mismatch"));
        }
        let value = Tensor::vstack(&parts);
        self.push(Op::ConcatRows(ids.to_vec()), value)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if av.ndim() != 2 || start + len > av.rows() {
            return Err(self.shape_err("slice-rows out of range"));
        }
        let c = av.cols();
        let data = av.data()[start * c..(start + len) * c].to_vec();
        self.push(
            Op::SliceRows { a, start, len },
            Tensor::new(vec![len, c], data),
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.rows() != bv.rows() {
            return Err(self.shape_err("concat-cols row mismatch"));
        }
        let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        self.push(Op::ConcatCols(a, b), Tensor::new(vec![r, ca + cb], data))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let av = &self.nodes[a].value;
        if shape.iter().product::<usize>() != av.len() {
            return Err(self.shape_err("reshape element-count mismatch"));
        }
        let value = av.reshape(shape);
        self.push(Op::Reshape(a), value)
    }

    /// Reverse sweep from a scalar loss node. Visits each recorded operation
    /// exactly once, newest to oldest, accumulating gradients additively.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.len() != 1 {
            return Err(SamError::contract(
                "backward starts from a scalar loss".to_string(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.push_back(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn push_back(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Const => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                accum(&mut grads[*a], g.matmul(&bv.transpose()));
                accum(&mut grads[*b], av.transpose().matmul(g));
            }
            Op::Add(a, b) => {
                accum(&mut grads[*a], g.clone());
                accum(&mut grads[*b], g.clone());
            }
            Op::Sub(a, b) => {
                accum(&mut grads[*a], g.clone());
                accum(&mut grads[*b], g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accum(&mut grads[*a], g.hadamard(&self.nodes[*b].value));
                accum(&mut grads[*b], g.hadamard(&self.nodes[*a].value));
            }
            Op::Scale(a, c) => accum(&mut grads[*a], g.scale(*c)),
            Op::AddScalar(a) => accum(&mut grads[*a], g.clone()),
            Op::BroadcastAddRow(m, v) => {
                accum(&mut grads[*m], g.clone());
                let c = g.cols();
                let mut dv = vec![0.0; c];
                for i in 0..g.rows() {
                    for k in 0..c {
                        dv[k] += g.at(i, k);
                    }
                }
                accum(&mut grads[*v], Tensor::new(vec![c], dv));
            }
            Op::ColScale(m, v) => {
                let (mv, vv) = (&self.nodes[*m].value, &self.nodes[*v].value);
                let (r, c) = (mv.rows(), mv.cols());
                let mut dm = Vec::with_capacity(r * c);
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for k in 0..c {
                        dm.push(g.at(i, k) * vv.data()[k]);
                        dv[k] += g.at(i, k) * mv.at(i, k);
                    }
                }
                accum(&mut grads[*m], Tensor::new(vec![r, c], dm));
                accum(&mut grads[*v], Tensor::new(vec![c], dv));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                accum(&mut grads[*a], g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                accum(&mut grads[*a], g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)));
            }
            Op::LeakyRelu(a) => {
                let x = &self.nodes[*a].value;
                accum(
                    &mut grads[*a],
                    g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { gi * LEAKY_SLOPE }),
                );
            }
            Op::Exp(a) => {
                let y = &self.nodes[id].value;
                accum(&mut grads[*a], g.hadamard(y));
            }
            Op::ClampMax(a, c) => {
                let x = &self.nodes[*a].value;
                accum(
                    &mut grads[*a],
                    g.zip_map(x, |gi, xi| if xi <= *c { gi } else { 0.0 }),
                );
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
            } => {
                let xv = &self.nodes[*x].value;
                let gv = self.nodes[*gamma].value.data();
                let (r, c) = (xv.rows(), xv.cols());
                let rn = r as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut gsum = vec![0.0; c];
                let mut gxhat_sum = vec![0.0; c];
                let mut xhat = vec![0.0; r * c];
                for i in 0..r {
                    for k in 0..c {
                        let h = (xv.at(i, k) - mean[k]) / (var[k] + BN_EPS).sqrt();
                        xhat[i * c + k] = h;
                        let gi = g.at(i, k);
                        dgamma[k] += gi * h;
                        dbeta[k] += gi;
                        gsum[k] += gi;
                        gxhat_sum[k] += gi * h;
                    }
                }
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    for k in 0..c {
                        let s = (var[k] + BN_EPS).sqrt();
                        let h = xhat[i * c + k];
                        dx.push(
                            gv[k] / s * (g.at(i, k) - gsum[k] / rn - h * gxhat_sum[k] / rn),
                        );
                    }
                }
                accum(&mut grads[*x], Tensor::new(vec![r, c], dx));
                accum(&mut grads[*gamma], Tensor::new(vec![c], dgamma));
                accum(&mut grads[*beta], Tensor::new(vec![c], dbeta));
            }
            Op::Sum(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                accum(&mut grads[*a], Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let av = &self.nodes[*a].value;
                let shape = av.shape().to_vec();
                accum(
                    &mut grads[*a],
                    Tensor::full(&shape, g.item() / av.len() as f64),
                );
            }
            Op::TracePowerSeries(a) => {
                let av = &self.nodes[*a].value;
                accum(
                    &mut grads[*a],
                    penalties::trace_power_series_grad(av).scale(g.item()),
                );
            }
            Op::StGate { x, noise } => {
                let xv = &self.nodes[*x].value;
                let shifted = xv.add(noise);
                accum(
                    &mut grads[*x],
                    g.zip_map(&shifted, |gi, si| {
                        let s = sigmoid(si);
                        gi * s * (1.0 - s)
                    }),
                );
            }
            Op::Column(m, j) => {
                let mv = &self.nodes[*m].value;
                let mut dm = Tensor::zeros(&[mv.rows(), mv.cols()]);
                for i in 0..mv.rows() {
                    dm.set(i, *j, g.data()[i]);
                }
                accum(&mut grads[*m], dm);
            }
            Op::ReplaceColumn { m, j, col } => {
                let mut dm = g.clone();
                let mut dcol = vec![0.0; g.rows()];
                for i in 0..g.rows() {
                    dcol[i] = g.at(i, *j);
                    dm.set(i, *j, 0.0);
                }
                accum(&mut grads[*m], dm);
                accum(&mut grads[*col], Tensor::new(vec![g.rows()], dcol));
            }
            Op::ConcatRows(ids) => {
                let mut start = 0;
                for &part in ids {
                    let r = self.nodes[part].value.rows();
                    let c = g.cols();
                    let data = g.data()[start * c..(start + r) * c].to_vec();
                    accum(&mut grads[part], Tensor::new(vec![r, c], data));
                    start += r;
                }
            }
            Op::SliceRows { a, start, len } => {
                let av = &self.nodes[*a].value;
                let (r, c) = (av.rows(), av.cols());
                let mut da = Tensor::zeros(&[r, c]);
                for i in 0..*len {
                    for k in 0..c {
                        da.set(start + i, k, g.at(i, k));
                    }
                }
                accum(&mut grads[*a], da);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.cols();
                let cb = self.nodes[*b].value.cols();
                let r = g.rows();
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = g.row(i);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accum(&mut grads[*a], Tensor::new(vec![r, ca], da));
                accum(&mut grads[*b], Tensor::new(vec![r, cb], db));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                accum(&mut grads[*a], g.reshape(shape));
            }
        }
    }
}

fn accum(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => *acc = acc.add(&delta),
        None => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn batch_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = (x.rows(), x.cols());
    let rn = r as f64;
    let mut mean = vec![0.0; c];
    for i in 0..r {
        for k in 0..c {
            mean[k] += x.at(i, k);
        }
    }
    for m in mean.iter_mut() {
        *m /= rn;
    }
    let mut var = vec![0.0; c];
    for i in 0..r {
        for k in 0..c {
            let d = x.at(i, k) - mean[k];
            var[k] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= rn;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_grad_at_zero() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![1], vec![0.0]));
        let y = tape.tanh(w).unwrap();
        let loss = tape.sum(y).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(w, &[1]).data(), &[1.0]);
    }

    #[test]
    fn exp_shift_grad() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![1], vec![1.0]));
        let s = tape.add_scalar(w, -1.0).unwrap();
        let e = tape.exp(s).unwrap();
        let loss = tape.sum(e).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert!((grads.take(w, &[1]).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(w * w) has gradient 2w.
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![2], vec![3.0, -2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(w, &[2]).data(), &[6.0, -4.0]);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![1], vec![1e3]));
        let sq = tape.mul(w, w).unwrap();
        let err = tape.exp(sq).unwrap_err();
        match err {
            SamError::NumericOverflow { op_name, .. } => assert_eq!(op_name, "exp"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replace_column_routes_gradient() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let col = tape.constant(Tensor::new(vec![2], vec![5.0, 6.0]));
        let rep = tape.replace_column(m, 1, col).unwrap();
        assert_eq!(tape.value(rep).data(), &[1.0, 5.0, 3.0, 6.0]);
        let s = tape.sum(rep).unwrap();
        let mut grads = tape.backward(s).unwrap();
        assert_eq!(grads.take(col, &[2]).data(), &[1.0, 1.0]);
        // Column 1 of the matrix gradient is masked out.
        assert_eq!(grads.take(m, &[2, 2]).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![3.0]]));
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let sl = tape.slice_rows(cat, 1, 2).unwrap();
        assert_eq!(tape.value(sl).data(), &[2.0, 3.0]);
        let s = tape.sum(sl).unwrap();
        let mut grads = tape.backward(s).unwrap();
        assert_eq!(grads.take(a, &[2, 1]).data(), &[0.0, 1.0]);
        assert_eq!(grads.take(b, &[1, 1]).data(), &[1.0]);
    }

    #[test]
    fn batch_norm_normalizes_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0], vec![3.0]]));
        let gamma = tape.constant(Tensor::new(vec![1], vec![1.0]));
        let beta = tape.constant(Tensor::new(vec![1], vec![0.0]));
        let y = tape.batch_norm(x, gamma, beta).unwrap();
        let v = tape.value(y);
        // mean 2, population var 1.
        assert!((v.at(0, 0) + 1.0).abs() < 1e-2);
        assert!((v.at(1, 0) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clamp_counts_events() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![10.0, 40.0, 50.0]));
        let y = tape.clamp_max(x, 30.0).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 30.0, 30.0]);
        assert_eq!(tape.clamp_events(), 2);
    }
}
