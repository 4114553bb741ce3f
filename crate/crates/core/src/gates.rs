//! Structural and functional Binary-Concrete gates.
//!
//! Forward values are hard draws a = H(l + a') with fresh logistic noise l
//! each epoch; the backward pass routes gradients through the relaxed
//! sigmoid (straight-through). Structural gates live in a d x d logit
//! matrix whose diagonal is forced shut to forbid self-loops.

use crate::rng::SamRng;
use crate::tape::sigmoid;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GateState {
    /// d x d structural logits a'.
    pub structural: Tensor,
    /// n_h x d functional logits z'; absent in the linear variant.
    pub functional: Option<Tensor>,
}

impl GateState {
    /// Zero logits: every gate opens with probability exactly 1/2.
    pub fn new(d: usize, n_hidden: Option<usize>) -> Self {
        GateState {
            structural: Tensor::zeros(&[d, d]),
            functional: n_hidden.map(|h| Tensor::zeros(&[h, d])),
        }
    }

    /// sigmoid(a') with the diagonal reported as 0.
    pub fn open_probability(&self) -> Tensor {
        open_probability(&self.structural)
    }
}

pub fn open_probability(structural_logits: &Tensor) -> Tensor {
    let d = structural_logits.rows();
    let mut p = structural_logits.map(sigmoid);
    for i in 0..d {
        p.set(i, i, 0.0);
    }
    p
}

/// One epoch's hard gate draws plus the noises needed by the backward pass.
#[derive(Clone, Debug)]
pub struct SampledGates {
    /// Binary d x d adjacency with zero diagonal.
    pub structural: Tensor,
    /// Binary n_h x d functional gates.
    pub functional: Option<Tensor>,
    pub structural_noise: Tensor,
    pub functional_noise: Option<Tensor>,
}

pub fn sample_gates(state: &GateState, rng: &mut SamRng) -> SampledGates {
    let d = state.structural.rows();
    let structural_noise = rng.logistic_tensor(&[d, d]);
    let mut structural = hard_values(&state.structural, &structural_noise);
    for i in 0..d {
        structural.set(i, i, 0.0);
    }
    let (functional, functional_noise) = match &state.functional {
        Some(logits) => {
            let noise = rng.logistic_tensor(&[logits.rows(), logits.cols()]);
            (Some(hard_values(logits, &noise)), Some(noise))
        }
        None => (None, None),
    };
    SampledGates {
        structural,
        functional,
        structural_noise,
        functional_noise,
    }
}

/// H(logits + noise) elementwise.
pub fn hard_values(logits: &Tensor, noise: &Tensor) -> Tensor {
    logits.zip_map(noise, |a, l| if a + l > 0.0 { 1.0 } else { 0.0 })
}

/// Straight-through backward: upstream * sigmoid'(l + a'), using the noise
/// saved at forward time.
pub fn gate_backward(upstream: &Tensor, noise: &Tensor, logits: &Tensor) -> Tensor {
    assert_eq!(upstream.shape(), logits.shape());
    let shifted = logits.add(noise);
    upstream.zip_map(&shifted, |g, s| {
        let sig = sigmoid(s);
        g * sig * (1.0 - sig)
    })
}

/// Mask that zeroes the diagonal when multiplied elementwise into the hard
/// structural gates; masked entries receive no gradient.
pub fn self_loop_mask(d: usize) -> Tensor {
    let mut m = Tensor::full(&[d, d], 1.0);
    for i in 0..d {
        m.set(i, i, 0.0);
    }
    m
}
