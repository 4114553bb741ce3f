//! Evaluation of predicted causation scores against a ground-truth DAG.
//!
//! A prediction is the d x d matrix of edge confidences; candidates are all
//! ordered pairs i != j. A reversed edge counts as a false positive for
//! precision/recall purposes and as a single mistake for SHD.

use std::io::Write;

use crate::error::{Result, SamError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall triples ordered by decreasing threshold. The leading
/// point is the empty-prediction endpoint (threshold +inf, precision 1 by
/// convention, recall 0).
#[derive(Clone, Debug)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

fn check_square_pair(scores: &Tensor, truth: &Tensor) -> Result<usize> {
    let d = scores.rows();
    if scores.cols() != d || truth.rows() != d || truth.cols() != d {
        return Err(SamError::contract(format!(
            "scores {:?} and truth {:?} must be square and matching",
            scores.shape(),
            truth.shape()
        )));
    }
    Ok(d)
}

/// Sweeps every distinct score value as a threshold (prediction rule:
/// score >= threshold); diagonals are ignored.
pub fn pr_curve(scores: &Tensor, truth: &Tensor) -> Result<PrCurve> {
    let d = check_square_pair(scores, truth)?;
    for i in 0..d {
        for j in (i + 1)..d {
            if truth.at(i, j) != 0.0 && truth.at(j, i) != 0.0 {
                return Err(SamError::contract(format!(
                    "truth contains the 2-cycle {i} <-> {j}"
                )));
            }
        }
    }
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(d * (d - 1));
    let mut positives = 0usize;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let is_true = truth.at(i, j) != 0.0;
            positives += is_true as usize;
            pairs.push((scores.at(i, j), is_true));
        }
    }
    if positives == 0 {
        return Err(SamError::contract("truth graph has no edges"));
    }
    // Decreasing score; ties share one threshold point.
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let mut points = vec![PrPoint {
        threshold: f64::INFINITY,
        precision: 1.0,
        recall: 0.0,
    }];
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut idx = 0;
    while idx < pairs.len() {
        let threshold = pairs[idx].0;
        while idx < pairs.len() && pairs[idx].0 == threshold {
            predicted += 1;
            tp += pairs[idx].1 as usize;
            idx += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / predicted as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(PrCurve { points })
}

/// Area under the precision-recall curve by the step-wise average-precision
/// rule: sum over thresholds of (R_k - R_{k-1}) * P_k.
pub fn aupr(curve: &PrCurve) -> f64 {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for p in &curve.points {
        area += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    area
}

/// Convenience: AUPR of a score matrix against a truth DAG.
pub fn aupr_of(scores: &Tensor, truth: &Tensor) -> Result<f64> {
    Ok(aupr(&pr_curve(scores, truth)?))
}

/// Structural Hamming distance between binary adjacencies: the number of
/// unordered pairs whose edge status differs, a reversal counting once.
pub fn shd(pred: &Tensor, truth: &Tensor) -> Result<usize> {
    let d = check_square_pair(pred, truth)?;
    for i in 0..d {
        if pred.at(i, i) != 0.0 || truth.at(i, i) != 0.0 {
            return Err(SamError::contract("self-loops are not allowed in shd"));
        }
    }
    let status = |m: &Tensor, i: usize, j: usize| {
        (m.at(i, j) != 0.0, m.at(j, i) != 0.0)
    };
    let mut mistakes = 0usize;
    for i in 0..d {
        for j in (i + 1)..d {
            if status(pred, i, j) != status(truth, i, j) {
                mistakes += 1;
            }
        }
    }
    Ok(mistakes)
}

pub fn write_pr_csv<W: Write>(curve: &PrCurve, mut w: W) -> Result<()> {
    writeln!(w, "threshold,precision,recall")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.precision, p.recall)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SamRng;

    fn from_edges(d: usize, edges: &[(usize, usize)]) -> Tensor {
        let mut a = Tensor::zeros(&[d, d]);
        for &(i, j) in edges {
            a.set(i, j, 1.0);
        }
        a
    }

    #[test]
    fn perfect_scores_reach_the_corner() {
        let truth = from_edges(3, &[(0, 1), (1, 2)]);
        let curve = pr_curve(&truth, &truth).unwrap();
        let top = curve
            .points
            .iter()
            .find(|p| p.threshold == 1.0)
            .expect("threshold at the positive score");
        assert_eq!(top.precision, 1.0);
        assert_eq!(top.recall, 1.0);
        assert_eq!(aupr(&curve), 1.0);
    }

    #[test]
    fn all_zero_scores() {
        let truth = from_edges(3, &[(0, 1)]);
        let scores = Tensor::zeros(&[3, 3]);
        let curve = pr_curve(&scores, &truth).unwrap();
        // Every positive-threshold point has recall 0 (only the endpoint
        // exists above 0); the single real threshold is 0 with full recall.
        for p in curve.points.iter().filter(|p| p.threshold > 0.0) {
            assert_eq!(p.recall, 0.0);
        }
        let last = curve.points.last().unwrap();
        assert_eq!(last.recall, 1.0);
        assert!((last.precision - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_edge_is_a_false_positive() {
        let truth = from_edges(2, &[(0, 1)]);
        let mut scores = Tensor::zeros(&[2, 2]);
        scores.set(1, 0, 0.9);
        let curve = pr_curve(&scores, &truth).unwrap();
        let at_09 = curve
            .points
            .iter()
            .find(|p| p.threshold == 0.9)
            .expect("0.9 threshold point");
        assert_eq!(at_09.precision, 0.0);
        assert_eq!(at_09.recall, 0.0);
    }

    #[test]
    fn truth_two_cycle_rejected() {
        let truth = from_edges(2, &[(0, 1), (1, 0)]);
        assert!(matches!(
            pr_curve(&Tensor::zeros(&[2, 2]), &truth),
            Err(SamError::Contract(_))
        ));
    }

    #[test]
    fn single_true_edge_ranked_first_is_perfect() {
        let truth = from_edges(3, &[(2, 0)]);
        let mut scores = Tensor::zeros(&[3, 3]);
        scores.set(2, 0, 0.8);
        scores.set(0, 1, 0.3);
        scores.set(1, 2, 0.1);
        assert_eq!(aupr_of(&scores, &truth).unwrap(), 1.0);
    }

    #[test]
    fn random_scores_approach_prevalence() {
        // Random ranking has expected AP near e/m once enough positives
        // exist (the AP bias above prevalence shrinks like 1/e).
        let mut rng = SamRng::from_seed(51);
        let d = 14;
        let truth = {
            let mut t = Tensor::zeros(&[d, d]);
            for i in 0..d {
                for j in 0..d {
                    if i != j && rng.uniform() < 0.4 {
                        // Keep it 2-cycle free.
                        if t.at(j, i) == 0.0 {
                            t.set(i, j, 1.0);
                        }
                    }
                }
            }
            t
        };
        let e: f64 = truth.sum();
        let m = (d * (d - 1)) as f64;
        let trials = 1000;
        let mut total = 0.0;
        for _ in 0..trials {
            let scores = rng.uniform_tensor(&[d, d], 0.0, 1.0);
            total += aupr_of(&scores, &truth).unwrap();
        }
        let mean = total / trials as f64;
        let expected = e / m;
        assert!(
            (mean - expected).abs() / expected < 0.1,
            "random-ranking AUPR {mean} vs prevalence {expected}"
        );
    }

    #[test]
    fn aupr_invariant_to_monotone_rescaling() {
        let mut rng = SamRng::from_seed(53);
        let truth = from_edges(4, &[(0, 1), (1, 2), (0, 3)]);
        let scores = rng.uniform_tensor(&[4, 4], 0.0, 1.0);
        let base = aupr_of(&scores, &truth).unwrap();
        let squashed = scores.map(|v| 1.0 / (1.0 + (-3.0 * v).exp()));
        let scaled = scores.map(|v| 0.2 + 0.5 * v);
        assert!((aupr_of(&squashed, &truth).unwrap() - base).abs() < 1e-12);
        assert!((aupr_of(&scaled, &truth).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn shd_basics() {
        let truth = from_edges(4, &[(0, 1), (1, 2)]);
        assert_eq!(shd(&truth, &truth).unwrap(), 0);

        // Single reversal counts once.
        let reversed = from_edges(4, &[(1, 0), (1, 2)]);
        assert_eq!(shd(&reversed, &truth).unwrap(), 1);

        // One extra and one missing edge on disjoint pairs: two mistakes.
        let off = from_edges(4, &[(0, 1), (2, 3)]);
        assert_eq!(shd(&off, &truth).unwrap(), 2);
    }

    #[test]
    fn shd_extra_equals_missing() {
        let truth = from_edges(3, &[(0, 1)]);
        let extra = from_edges(3, &[(0, 1), (0, 2)]);
        let missing = from_edges(3, &[]);
        assert_eq!(shd(&extra, &truth).unwrap(), 1);
        assert_eq!(shd(&missing, &truth).unwrap(), 1);
    }

    #[test]
    fn shd_triangle_inequality() {
        let mut rng = SamRng::from_seed(59);
        for _ in 0..200 {
            let d = 3 + rng.index(5);
            let mut random_dag = || {
                let (adj, _) = crate::benchgen::sample_dag(d, 3, &mut rng);
                adj
            };
            let a = random_dag();
            let b = random_dag();
            let c = random_dag();
            let ab = shd(&a, &b).unwrap();
            let bc = shd(&b, &c).unwrap();
            let ac = shd(&a, &c).unwrap();
            assert!(ac <= ab + bc, "triangle violated: {ac} > {ab} + {bc}");
        }
    }
}
