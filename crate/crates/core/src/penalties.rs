//! Sparsity and acyclicity penalties over gate matrices.
//!
//! The acyclicity score sum_{k=1..d} tr(A^k)/k! is zero exactly when the
//! binary adjacency A is acyclic; truncation at k = d is exact because any
//! directed cycle has length at most d. Powers are accumulated with the
//! scaled recurrence B_1 = A, B_k = B_{k-1} A / k, which keeps every term
//! bounded and never materializes a factorial.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct PenaltyWeights {
    pub lambda_s: f64,
    pub lambda_f: f64,
    pub lambda_d: f64,
    /// Sample count behind the 1/n scaling of the gate counts.
    pub n: usize,
}

/// (lambda_s / n) sum a_{i,j} + (lambda_f / n) sum z_{h,j} on the binary
/// epoch samples. Gradients flow to the logits through the straight-through
/// rule when the same expression is assembled on a tape.
pub fn sparsity_penalty(a: &Tensor, z: Option<&Tensor>, w: &PenaltyWeights) -> f64 {
    let n = w.n as f64;
    let mut p = w.lambda_s / n * a.sum();
    if let Some(z) = z {
        p += w.lambda_f / n * z.sum();
    }
    p
}

/// sum_{k=1..d} tr(A^k) / k!.
pub fn trace_power_series(a: &Tensor) -> f64 {
    let d = a.rows();
    let mut acc = a.trace();
    let mut power = a.clone();
    for k in 2..=d {
        power = power.matmul(a).scale(1.0 / k as f64);
        acc += power.trace();
    }
    acc
}

/// d/dA of the trace power series: sum_{k=1..d} (A^{k-1})^T / (k-1)!.
pub fn trace_power_series_grad(a: &Tensor) -> Tensor {
    let d = a.rows();
    // C_1 = I = A^0/0!, C_k = C_{k-1} A / (k-1) = A^{k-1}/(k-1)!.
    let mut c = Tensor::eye(d);
    let mut acc = c.clone();
    for k in 2..=d {
        c = c.matmul(a).scale(1.0 / (k - 1) as f64);
        acc = acc.add(&c);
    }
    acc.transpose()
}

/// Acyclicity penalty of a binary (or relaxed, entries in [0,1]) adjacency.
pub fn acyclicity_penalty(a: &Tensor) -> f64 {
    trace_power_series(a)
}

/// Gradient of the acyclicity penalty with respect to A.
pub fn acyclicity_grad(a: &Tensor) -> Tensor {
    trace_power_series_grad(a)
}

/// DAG certificate: true iff the binary adjacency carries no directed cycle.
/// Exact for 0/1 matrices because all power-series terms are non-negative.
pub fn is_dag(a: &Tensor) -> bool {
    acyclicity_penalty(a) == 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SamRng;

    fn topological_sort_is_acyclic(a: &Tensor) -> bool {
        // Kahn's algorithm, an oracle independent of the power series.
        let d = a.rows();
        let mut indegree = vec![0usize; d];
        for i in 0..d {
            for j in 0..d {
                if a.at(i, j) != 0.0 {
                    indegree[j] += 1;
                }
            }
        }
        let mut queue: Vec<usize> = (0..d).filter(|&j| indegree[j] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop() {
            seen += 1;
            for j in 0..d {
                if a.at(v, j) != 0.0 {
                    indegree[j] -= 1;
                    if indegree[j] == 0 {
                        queue.push(j);
                    }
                }
            }
        }
        seen == d
    }

    #[test]
    fn zero_matrix_is_acyclic() {
        assert_eq!(acyclicity_penalty(&Tensor::zeros(&[4, 4])), 0.0);
    }

    #[test]
    fn upper_triangular_is_acyclic() {
        let mut a = Tensor::zeros(&[5, 5]);
        for i in 0..5 {
            for j in (i + 1)..5 {
                a.set(i, j, 1.0);
            }
        }
        assert_eq!(acyclicity_penalty(&a), 0.0);
        assert!(is_dag(&a));
    }

    #[test]
    fn two_cycle_value() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        // Only tr(A^2)/2! = 2/2 = 1 survives at d = 2.
        assert!((acyclicity_penalty(&a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn grad_at_zero_is_identity() {
        let g = acyclicity_grad(&Tensor::zeros(&[3, 3]));
        assert_eq!(g, Tensor::eye(3));
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = SamRng::from_seed(11);
        for _ in 0..5 {
            let d = 4;
            let a = rng.uniform_tensor(&[d, d], 0.0, 1.0);
            let grad = acyclicity_grad(&a);
            let h = 1e-6;
            for i in 0..d {
                for j in 0..d {
                    let mut hi = a.clone();
                    hi.set(i, j, a.at(i, j) + h);
                    let mut lo = a.clone();
                    lo.set(i, j, a.at(i, j) - h);
                    let fd = (acyclicity_penalty(&hi) - acyclicity_penalty(&lo)) / (2.0 * h);
                    assert!(
                        (fd - grad.at(i, j)).abs() < 1e-6,
                        "fd {fd} vs analytic {} at ({i},{j})",
                        grad.at(i, j)
                    );
                }
            }
        }
    }

    #[test]
    fn certificate_matches_topological_sort_oracle() {
        let mut rng = SamRng::from_seed(23);
        for trial in 0..200 {
            let d = 2 + rng.index(19); // up to 20 nodes
            let density = rng.uniform_in(0.05, 0.5);
            let mut a = Tensor::zeros(&[d, d]);
            for i in 0..d {
                for j in 0..d {
                    if i != j && rng.uniform() < density {
                        a.set(i, j, 1.0);
                    }
                }
            }
            assert_eq!(
                is_dag(&a),
                topological_sort_is_acyclic(&a),
                "disagreement on trial {trial} (d = {d})"
            );
        }
    }

    #[test]
    fn dense_large_matrix_stays_finite() {
        let d = 100;
        let mut a = Tensor::full(&[d, d], 1.0);
        for i in 0..d {
            a.set(i, i, 0.0);
        }
        let p = acyclicity_penalty(&a);
        assert!(p.is_finite() && p > 0.0);
    }

    #[test]
    fn closing_a_cycle_increases_penalty() {
        // 0 -> 1 -> 2 is acyclic; adding 2 -> 0 closes a 3-cycle.
        let mut a = Tensor::zeros(&[3, 3]);
        a.set(0, 1, 1.0);
        a.set(1, 2, 1.0);
        let before = acyclicity_penalty(&a);
        a.set(2, 0, 1.0);
        let after = acyclicity_penalty(&a);
        assert_eq!(before, 0.0);
        assert!(after > before);
    }

    #[test]
    fn sparsity_exact_counts() {
        let w = PenaltyWeights {
            lambda_s: 5.0,
            lambda_f: 0.005,
            lambda_d: 0.0,
            n: 500,
        };
        let mut a = Tensor::zeros(&[4, 4]);
        a.set(0, 1, 1.0);
        a.set(1, 2, 1.0);
        a.set(3, 0, 1.0);
        let p = sparsity_penalty(&a, None, &w);
        assert!((p - 0.03).abs() < 1e-15, "structural penalty {p}");

        let mut z = Tensor::zeros(&[10, 4]);
        z.set(0, 0, 1.0);
        let with_z = sparsity_penalty(&a, Some(&z), &w);
        assert!((with_z - p - 1e-5).abs() < 1e-18, "functional increment");
    }

    #[test]
    fn all_gates_closed_is_free() {
        let w = PenaltyWeights {
            lambda_s: 5.0,
            lambda_f: 0.005,
            lambda_d: 1.0,
            n: 100,
        };
        let a = Tensor::zeros(&[3, 3]);
        let z = Tensor::zeros(&[8, 3]);
        assert_eq!(sparsity_penalty(&a, Some(&z), &w), 0.0);
    }
}
