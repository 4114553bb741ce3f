//! Shared discriminator and the two fit losses.
//!
//! One critic scores real rows against the pseudo-samples of all d
//! generators (cheaper and more stable than d discriminators). Architecture:
//! two hidden layers of LeakyReLU(0.2) units with train-mode batch
//! normalization over each presented batch, then a linear scalar head.

use crate::error::Result;
use crate::generators::PseudoSampleBatch;
use crate::rng::SamRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Scores are clamped here before exponentiation; engagements are counted
/// and surfaced as a warning by the trainer.
pub const SCORE_CLAMP: f64 = 30.0;

const RUNNING_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, Default)]
pub struct RunningStats {
    pub mean1: Vec<f64>,
    pub var1: Vec<f64>,
    pub mean2: Vec<f64>,
    pub var2: Vec<f64>,
    pub updates: usize,
}

#[derive(Clone, Debug)]
pub struct CriticParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub gamma1: Tensor,
    pub beta1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub gamma2: Tensor,
    pub beta2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
    /// Tracked on discriminator-update passes only; train-mode forward always
    /// uses batch statistics.
    pub running: RunningStats,
}

impl CriticParams {
    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }
}

pub fn init(input_dim: usize, hidden: usize, rng: &mut SamRng) -> CriticParams {
    let b1 = 1.0 / (input_dim as f64).sqrt();
    let b2 = 1.0 / (hidden as f64).sqrt();
    CriticParams {
        w1: rng.uniform_tensor(&[input_dim, hidden], -b1, b1),
        b1: Tensor::zeros(&[hidden]),
        gamma1: Tensor::full(&[hidden], 1.0),
        beta1: Tensor::zeros(&[hidden]),
        w2: rng.uniform_tensor(&[hidden, hidden], -b2, b2),
        b2: Tensor::zeros(&[hidden]),
        gamma2: Tensor::full(&[hidden], 1.0),
        beta2: Tensor::zeros(&[hidden]),
        w3: rng.uniform_tensor(&[hidden, 1], -b2, b2),
        b3: Tensor::zeros(&[1]),
        running: RunningStats::default(),
    }
}

pub struct CriticNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub gamma1: NodeId,
    pub beta1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub gamma2: NodeId,
    pub beta2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl CriticNodes {
    pub fn all(&self) -> [NodeId; 10] {
        [
            self.w1, self.b1, self.gamma1, self.beta1, self.w2, self.b2, self.gamma2,
            self.beta2, self.w3, self.b3,
        ]
    }
}

pub fn add_to_tape(tape: &mut Tape, p: &CriticParams) -> CriticNodes {
    CriticNodes {
        w1: tape.constant(p.w1.clone()),
        b1: tape.constant(p.b1.clone()),
        gamma1: tape.constant(p.gamma1.clone()),
        beta1: tape.constant(p.beta1.clone()),
        w2: tape.constant(p.w2.clone()),
        b2: tape.constant(p.b2.clone()),
        gamma2: tape.constant(p.gamma2.clone()),
        beta2: tape.constant(p.beta2.clone()),
        w3: tape.constant(p.w3.clone()),
        b3: tape.constant(p.b3.clone()),
    }
}

/// Scores node plus the two batch-norm nodes (whose batch statistics feed the
/// running-stat update on discriminator passes).
pub struct CriticForward {
    pub scores: NodeId,
    pub bn1: NodeId,
    pub bn2: NodeId,
}

pub fn build_forward(tape: &mut Tape, nodes: &CriticNodes, input: NodeId) -> Result<CriticForward> {
    let l1 = tape.matmul(input, nodes.w1)?;
    let l1 = tape.broadcast_add_row(l1, nodes.b1)?;
    let bn1 = tape.batch_norm(l1, nodes.gamma1, nodes.beta1)?;
    let h1 = tape.leaky_relu(bn1)?;
    let l2 = tape.matmul(h1, nodes.w2)?;
    let l2 = tape.broadcast_add_row(l2, nodes.b2)?;
    let bn2 = tape.batch_norm(l2, nodes.gamma2, nodes.beta2)?;
    let h2 = tape.leaky_relu(bn2)?;
    let out = tape.matmul(h2, nodes.w3)?;
    let scores = tape.broadcast_add_row(out, nodes.b3)?;
    Ok(CriticForward { scores, bn1, bn2 })
}

/// Scores one batch (one score per row). Read-only: running statistics are
/// untouched, normalization uses the presented batch.
pub fn forward(params: &CriticParams, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let input = tape.constant(batch.clone());
    let nodes = add_to_tape(&mut tape, params);
    let fwd = build_forward(&mut tape, &nodes, input)?;
    let m = tape.value(fwd.scores).rows();
    Ok(tape.value(fwd.scores).reshape(vec![m]))
}

/// Folds one pass's batch statistics into the running statistics. Called by
/// the trainer on discriminator updates only.
pub fn update_running_stats(
    params: &mut CriticParams,
    bn1: (&[f64], &[f64]),
    bn2: (&[f64], &[f64]),
) {
    let fold = |running: &mut Vec<f64>, batch: &[f64]| {
        if running.is_empty() {
            *running = batch.to_vec();
        } else {
            for (r, &b) in running.iter_mut().zip(batch) {
                *r = (1.0 - RUNNING_MOMENTUM) * *r + RUNNING_MOMENTUM * b;
            }
        }
    };
    fold(&mut params.running.mean1, bn1.0);
    fold(&mut params.running.var1, bn1.1);
    fold(&mut params.running.mean2, bn2.0);
    fold(&mut params.running.var2, bn2.1);
    params.running.updates += 1;
}

/// f-GAN objective and per-generator fit terms from plain score vectors.
///
/// objective = (d/n) sum_l T(x_l) + (1/n) sum_j sum_l [-exp(T(fake_jl) - 1)],
/// maximized by the critic; generator j minimizes its own fit term.
pub fn fgan_losses(scores_real: &Tensor, scores_fake: &[Tensor]) -> (f64, Vec<f64>) {
    let n = scores_real.len() as f64;
    let d = scores_fake.len() as f64;
    let real_term = d / n * scores_real.sum();
    let fits: Vec<f64> = scores_fake
        .iter()
        .map(|s| {
            s.data()
                .iter()
                .map(|&t| -(t.min(SCORE_CLAMP) - 1.0).exp())
                .sum::<f64>()
                / n
        })
        .collect();
    (real_term + fits.iter().sum::<f64>(), fits)
}

/// Mean-squared-error substitute: (1/n) sum_j sum_l (x_jl - pseudo_jl)^2.
pub fn mse_loss(data: &Tensor, pseudo: &PseudoSampleBatch) -> f64 {
    let n = data.rows();
    let mut total = 0.0;
    for j in 0..pseudo.len() {
        let col = pseudo.column(j);
        for l in 0..n {
            let diff = data.at(l, j) - col.data()[l];
            total += diff * diff;
        }
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_critic(d: usize, h: usize) -> CriticParams {
        let mut rng = SamRng::from_seed(0);
        let mut p = init(d, h, &mut rng);
        p.w1 = Tensor::zeros(&[d, h]);
        p.w2 = Tensor::zeros(&[h, h]);
        p.w3 = Tensor::zeros(&[h, 1]);
        p
    }

    #[test]
    fn zero_weights_zero_scores() {
        let p = zero_critic(3, 8);
        let mut rng = SamRng::from_seed(1);
        let batch = rng.normal_tensor(&[5, 3]);
        let scores = forward(&p, &batch).unwrap();
        for &s in scores.data() {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn duplicated_rows_get_duplicated_scores() {
        let mut rng = SamRng::from_seed(2);
        let p = init(3, 8, &mut rng);
        let row = rng.normal_tensor(&[1, 3]);
        let other = rng.normal_tensor(&[2, 3]);
        let batch = Tensor::vstack(&[&row, &other, &row]);
        let scores = forward(&p, &batch).unwrap();
        assert_eq!(scores.data()[0].to_bits(), scores.data()[3].to_bits());
    }

    #[test]
    fn row_permutation_permutes_scores() {
        let mut rng = SamRng::from_seed(3);
        let p = init(4, 10, &mut rng);
        let batch = rng.normal_tensor(&[7, 4]);
        let scores = forward(&p, &batch).unwrap();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&i| batch.row(i).to_vec()).collect();
        let permuted = Tensor::from_rows(&permuted_rows);
        let permuted_scores = forward(&p, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!(
                (permuted_scores.data()[k] - scores.data()[i]).abs() < 1e-12,
                "score moved under permutation"
            );
        }
    }

    #[test]
    fn fgan_optimum_at_unit_scores() {
        // T = 1 everywhere with one generator: d * mean(1) - exp(0) = 0.
        let real = Tensor::full(&[10], 1.0);
        let fake = vec![Tensor::full(&[10], 1.0)];
        let (obj, fits) = fgan_losses(&real, &fake);
        assert!(obj.abs() < 1e-12);
        assert!((fits[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fgan_zero_scores() {
        let real = Tensor::zeros(&[10]);
        let fake = vec![Tensor::zeros(&[10])];
        let (obj, _) = fgan_losses(&real, &fake);
        assert!((obj + (-1.0f64).exp()).abs() < 1e-12, "objective {obj}");
    }

    #[test]
    fn fgan_clamps_extreme_scores() {
        let real = Tensor::zeros(&[4]);
        let fake = vec![Tensor::full(&[4], 1e6)];
        let (obj, _) = fgan_losses(&real, &fake);
        assert!(obj.is_finite());
    }

    #[test]
    fn mse_examples() {
        let data = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let identical = PseudoSampleBatch::new(
            data.clone(),
            vec![data.column(0), data.column(1)],
        );
        assert_eq!(mse_loss(&data, &identical), 0.0);

        // Constant offset c on a single column: loss is exactly c^2.
        let c = 0.5;
        let shifted = PseudoSampleBatch::new(
            data.clone(),
            vec![data.column(0).map(|v| v + c), data.column(1)],
        );
        let l1 = mse_loss(&data, &shifted);
        assert!((l1 - c * c).abs() < 1e-12);

        let doubled = PseudoSampleBatch::new(
            data.clone(),
            vec![data.column(0).map(|v| v + 2.0 * c), data.column(1)],
        );
        let l2 = mse_loss(&data, &doubled);
        assert!((l2 - 4.0 * l1).abs() < 1e-12);
    }
}
