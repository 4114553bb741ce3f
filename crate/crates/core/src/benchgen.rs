//! Synthetic benchmark generation.
//!
//! Random DAGs with per-node parent counts drawn uniformly, six causal
//! mechanism families, Gaussian noise with randomized location and scale,
//! ancestral sampling in topological order, and column standardization.
//! Also provides the two toy datasets used by the fixed-structure scoring
//! experiments.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Result, SamError};
use crate::rng::SamRng;
use crate::tensor::{cholesky, Tensor};

const GP_JITTER: f64 = 1e-6;
const GP_JITTER_RETRY: f64 = 1e-4;
const SIGMA_FLOOR: f64 = 1e-3;
const NN_HIDDEN: usize = 20;
const DEGENERATE_VAR: f64 = 1e-12;
const MAX_ATTEMPTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismFamily {
    Linear,
    SigmoidAm,
    SigmoidMix,
    GpAm,
    GpMix,
    Nn,
}

impl MechanismFamily {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "linear" => Some(MechanismFamily::Linear),
            "sigmoid_am" => Some(MechanismFamily::SigmoidAm),
            "sigmoid_mix" => Some(MechanismFamily::SigmoidMix),
            "gp_am" => Some(MechanismFamily::GpAm),
            "gp_mix" => Some(MechanismFamily::GpMix),
            "nn" => Some(MechanismFamily::Nn),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MechanismFamily::Linear => "linear",
            MechanismFamily::SigmoidAm => "sigmoid_am",
            MechanismFamily::SigmoidMix => "sigmoid_mix",
            MechanismFamily::GpAm => "gp_am",
            MechanismFamily::GpMix => "gp_mix",
            MechanismFamily::Nn => "nn",
        }
    }
}

/// Whether noise location/scale are drawn once per graph or per node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    PerNode,
    PerGraph,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n: usize,
    pub mechanism: MechanismFamily,
    pub seed: u64,
    pub max_parents: usize,
    pub noise_mode: NoiseMode,
}

impl SyntheticSpec {
    pub fn new(d: usize, mechanism: MechanismFamily, seed: u64) -> Self {
        SyntheticSpec {
            d,
            n: 500,
            mechanism,
            seed,
            max_parents: 5,
            noise_mode: NoiseMode::PerNode,
        }
    }
}

/// x -> a * b(x+c) / (1 + |b(x+c)|), an odd-shaped saturating response.
#[derive(Clone, Debug)]
pub struct SigmoidFn {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SigmoidFn {
    pub fn eval(&self, x: f64) -> f64 {
        let u = self.b * (x + self.c);
        self.a * u / (1.0 + u.abs())
    }

    fn draw(rng: &mut SamRng) -> Self {
        let a = rng.exponential(4.0) + 1.0;
        let mag = rng.uniform_in(0.5, 2.0);
        let b = if rng.uniform() < 0.5 { -mag } else { mag };
        let c = rng.uniform_in(-2.0, 2.0);
        SigmoidFn { a, b, c }
    }
}

/// Node mechanism parameters, drawn once at graph-build time.
#[derive(Clone, Debug)]
pub enum Mechanism {
    Linear {
        coeffs: Vec<f64>,
    },
    SigmoidAm {
        funcs: Vec<SigmoidFn>,
    },
    SigmoidMix {
        f: SigmoidFn,
    },
    /// One univariate Gaussian-process draw per parent, realized exactly at
    /// the observed inputs through the stored white-noise vector.
    GpAm {
        whites: Vec<Vec<f64>>,
    },
    GpMix {
        white: Vec<f64>,
    },
    Nn {
        hidden_weights: Tensor,
        hidden_bias: Vec<f64>,
        output_weights: Vec<f64>,
        output_bias: f64,
    },
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub adjacency: Tensor,
    /// Topological order: position t holds the node generated t-th.
    pub order: Vec<usize>,
    pub parents: Vec<Vec<usize>>,
    pub mechanisms: Vec<Mechanism>,
    /// Per-node (mu, sigma) of the Gaussian noise.
    pub noise: Vec<(f64, f64)>,
}

/// Random DAG: a uniform permutation fixes the topological order, then the
/// node at position t draws k ~ U{0..min(max_parents, t)} distinct parents
/// from its predecessors.
pub fn sample_dag(d: usize, max_parents: usize, rng: &mut SamRng) -> (Tensor, Vec<usize>) {
    let order = rng.permutation(d);
    let mut adjacency = Tensor::zeros(&[d, d]);
    for t in 0..d {
        let avail = t.min(max_parents);
        let k = rng.index(avail + 1);
        for &pos in rng.choose_distinct(t, k).iter() {
            adjacency.set(order[pos], order[t], 1.0);
        }
    }
    (adjacency, order)
}

fn draw_mechanism(
    family: MechanismFamily,
    n_parents: usize,
    n: usize,
    rng: &mut SamRng,
) -> Mechanism {
    match family {
        MechanismFamily::Linear => Mechanism::Linear {
            coeffs: (0..n_parents).map(|_| rng.standard_normal()).collect(),
        },
        MechanismFamily::SigmoidAm => Mechanism::SigmoidAm {
            funcs: (0..n_parents).map(|_| SigmoidFn::draw(rng)).collect(),
        },
        MechanismFamily::SigmoidMix => Mechanism::SigmoidMix {
            f: SigmoidFn::draw(rng),
        },
        MechanismFamily::GpAm => Mechanism::GpAm {
            whites: (0..n_parents)
                .map(|_| (0..n).map(|_| rng.standard_normal()).collect())
                .collect(),
        },
        MechanismFamily::GpMix => Mechanism::GpMix {
            white: (0..n).map(|_| rng.standard_normal()).collect(),
        },
        MechanismFamily::Nn => {
            let inputs = n_parents + 1;
            Mechanism::Nn {
                hidden_weights: rng.normal_tensor(&[inputs, NN_HIDDEN]),
                hidden_bias: (0..NN_HIDDEN).map(|_| rng.standard_normal()).collect(),
                output_weights: (0..NN_HIDDEN).map(|_| rng.standard_normal()).collect(),
                output_bias: rng.standard_normal(),
            }
        }
    }
}

/// Gaussian RBF kernel matrix with unit bandwidth over the rows of `inputs`.
fn rbf_kernel(inputs: &Tensor) -> Tensor {
    let n = inputs.rows();
    let mut k = Tensor::zeros(&[n, n]);
    for a in 0..n {
        for b in a..n {
            let mut sq = 0.0;
            for (xa, xb) in inputs.row(a).iter().zip(inputs.row(b)) {
                let diff = xa - xb;
                sq += diff * diff;
            }
            let v = (-0.5 * sq).exp();
            k.set(a, b, v);
            k.set(b, a, v);
        }
    }
    k
}

/// Exact joint GP draw at the given inputs: chol(K + jitter I) * white.
fn gp_draw(inputs: &Tensor, white: &[f64]) -> Result<Vec<f64>> {
    let n = inputs.rows();
    let base = rbf_kernel(inputs);
    let factor = |jitter: f64| {
        let mut k = base.clone();
        for i in 0..n {
            let v = k.at(i, i) + jitter;
            k.set(i, i, v);
        }
        cholesky(&k)
    };
    let l = match factor(GP_JITTER) {
        Ok(l) => l,
        Err(_) => factor(GP_JITTER_RETRY)?,
    };
    let w = Tensor::new(vec![n, 1], white.to_vec());
    Ok(l.matmul(&w).into_data())
}

/// Evaluates one node's mechanism jointly at n samples.
///
/// `parents` is the n x p matrix of parent values (p may be 0) and `noise`
/// the realized per-sample noise; additive families add it, mixing families
/// feed it through the mechanism.
pub fn mechanism_eval(mech: &Mechanism, parents: &Tensor, noise: &[f64]) -> Result<Vec<f64>> {
    let n = parents.rows();
    if noise.len() != n {
        return Err(SamError::contract(format!(
            "noise length {} for {} samples",
            noise.len(),
            n
        )));
    }
    let p = parents.cols();
    match mech {
        Mechanism::Linear { coeffs } => {
            check_parents(coeffs.len(), p)?;
            Ok((0..n)
                .map(|l| {
                    coeffs
                        .iter()
                        .zip(parents.row(l))
                        .map(|(a, x)| a * x)
                        .sum::<f64>()
                        + noise[l]
                })
                .collect())
        }
        Mechanism::SigmoidAm { funcs } => {
            check_parents(funcs.len(), p)?;
            Ok((0..n)
                .map(|l| {
                    funcs
                        .iter()
                        .zip(parents.row(l))
                        .map(|(f, &x)| f.eval(x))
                        .sum::<f64>()
                        + noise[l]
                })
                .collect())
        }
        Mechanism::SigmoidMix { f } => Ok((0..n)
            .map(|l| f.eval(parents.row(l).iter().sum::<f64>() + noise[l]))
            .collect()),
        Mechanism::GpAm { whites } => {
            check_parents(whites.len(), p)?;
            let mut out = noise.to_vec();
            for (j, white) in whites.iter().enumerate() {
                let col = parents.column(j).reshape(vec![n, 1]);
                let g = gp_draw(&col, white)?;
                for l in 0..n {
                    out[l] += g[l];
                }
            }
            Ok(out)
        }
        Mechanism::GpMix { white } => {
            // Noise is one more input dimension of the joint GP.
            let mut rows = Vec::with_capacity(n);
            for l in 0..n {
                let mut row = parents.row(l).to_vec();
                row.push(noise[l]);
                rows.push(row);
            }
            gp_draw(&Tensor::from_rows(&rows), white)
        }
        Mechanism::Nn {
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
        } => {
            let inputs = p + 1;
            if hidden_weights.rows() != inputs {
                return Err(SamError::contract(format!(
                    "nn mechanism drawn for {} inputs, got {}",
                    hidden_weights.rows(),
                    inputs
                )));
            }
            Ok((0..n)
                .map(|l| {
                    let mut out = *output_bias;
                    for k in 0..NN_HIDDEN {
                        let mut pre = hidden_bias[k];
                        for (i, &x) in parents.row(l).iter().enumerate() {
                            pre += hidden_weights.at(i, k) * x;
                        }
                        pre += hidden_weights.at(p, k) * noise[l];
                        out += output_weights[k] * pre.tanh();
                    }
                    out
                })
                .collect())
        }
    }
}

fn check_parents(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(SamError::contract(format!(
            "mechanism drawn for {expected} parents, got {got}"
        )));
    }
    Ok(())
}

/// Pure ancestral pass: raw (unstandardized) samples from the ground truth
/// and realized noises. Identical inputs reproduce the matrix bit-exactly.
pub fn ancestral_sample(truth: &GroundTruth, noises: &Tensor) -> Result<Tensor> {
    let d = truth.adjacency.rows();
    let n = noises.rows();
    let mut x = Tensor::zeros(&[n, d]);
    for &node in &truth.order {
        let parents = &truth.parents[node];
        let mut pm = Tensor::zeros(&[n, parents.len()]);
        for (pj, &parent) in parents.iter().enumerate() {
            for l in 0..n {
                pm.set(l, pj, x.at(l, parent));
            }
        }
        let noise_col = noises.column(node);
        let values = mechanism_eval(&truth.mechanisms[node], &pm, noise_col.data())?;
        for l in 0..n {
            x.set(l, node, values[l]);
        }
    }
    Ok(x)
}

/// Draws a ground-truth causal model and samples a standardized dataset from
/// it. Degenerate (zero-variance) columns trigger regeneration with a fresh
/// noise sub-seed, at most five times.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<(Dataset, GroundTruth)> {
    let mut rng = SamRng::from_seed(spec.seed);
    let (adjacency, order) = sample_dag(spec.d, spec.max_parents, &mut rng);
    let parents: Vec<Vec<usize>> = (0..spec.d)
        .map(|j| (0..spec.d).filter(|&i| adjacency.at(i, j) == 1.0).collect())
        .collect();

    let shared = (
        rng.uniform_in(-2.0, 2.0),
        rng.uniform_in(0.0, 0.4).max(SIGMA_FLOOR),
    );
    let noise: Vec<(f64, f64)> = (0..spec.d)
        .map(|_| match spec.noise_mode {
            NoiseMode::PerGraph => shared,
            NoiseMode::PerNode => (
                rng.uniform_in(-2.0, 2.0),
                rng.uniform_in(0.0, 0.4).max(SIGMA_FLOOR),
            ),
        })
        .collect();

    let mechanisms: Vec<Mechanism> = (0..spec.d)
        .map(|j| draw_mechanism(spec.mechanism, parents[j].len(), spec.n, &mut rng))
        .collect();

    let truth = GroundTruth {
        adjacency,
        order,
        parents,
        mechanisms,
        noise,
    };

    for attempt in 0..MAX_ATTEMPTS {
        let mut noise_rng =
            SamRng::from_seed(spec.seed ^ (attempt as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
        let mut noises = Tensor::zeros(&[spec.n, spec.d]);
        for j in 0..spec.d {
            let (mu, sigma) = truth.noise[j];
            for l in 0..spec.n {
                noises.set(l, j, mu + sigma * noise_rng.standard_normal());
            }
        }
        let raw = ancestral_sample(&truth, &noises)?;
        if let Some(col) = degenerate_column(&raw) {
            if attempt + 1 == MAX_ATTEMPTS {
                return Err(SamError::DegenerateColumn {
                    column: col,
                    attempts: MAX_ATTEMPTS,
                });
            }
            continue;
        }
        let dataset = Dataset::with_default_names(raw).standardize();
        return Ok((dataset, truth));
    }
    unreachable!("attempt loop returns or errors");
}

fn degenerate_column(x: &Tensor) -> Option<usize> {
    let (n, d) = (x.rows(), x.cols());
    for j in 0..d {
        let col = x.column(j);
        let mean = col.mean();
        let var = col.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var < DEGENERATE_VAR {
            return Some(j);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Toy datasets for fixed-structure scoring experiments.
// ---------------------------------------------------------------------------

/// Data-generating models over the three-variable skeleton A - B - C, all
/// with linear mechanisms and independent centered Gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VStructureModel {
    /// A -> B -> C.
    Chain,
    /// C -> B -> A.
    ReversedChain,
    /// A -> B <- C (the V-structure).
    Collider,
}

impl VStructureModel {
    pub fn adjacency(&self) -> Tensor {
        let mut a = Tensor::zeros(&[3, 3]);
        match self {
            VStructureModel::Chain => {
                a.set(0, 1, 1.0);
                a.set(1, 2, 1.0);
            }
            VStructureModel::ReversedChain => {
                a.set(2, 1, 1.0);
                a.set(1, 0, 1.0);
            }
            VStructureModel::Collider => {
                a.set(0, 1, 1.0);
                a.set(2, 1, 1.0);
            }
        }
        a
    }
}

/// The four candidate structures scored against V-structure data.
pub fn vstructure_candidates() -> Vec<(&'static str, Tensor)> {
    let mut fork = Tensor::zeros(&[3, 3]);
    fork.set(1, 0, 1.0);
    fork.set(1, 2, 1.0);
    vec![
        ("chain", VStructureModel::Chain.adjacency()),
        ("reversed_chain", VStructureModel::ReversedChain.adjacency()),
        ("v_structure", VStructureModel::Collider.adjacency()),
        ("reversed_v", fork),
    ]
}

const TOY_CHILD_NOISE: f64 = 0.5;

/// Standardized 3-column dataset (A, B, C) from the requested model, plus
/// the true adjacency.
pub fn toy_vstructure(n: usize, model: VStructureModel, rng: &mut SamRng) -> (Dataset, Tensor) {
    let mut values = Tensor::zeros(&[n, 3]);
    for l in 0..n {
        let (a, b, c) = match model {
            VStructureModel::Chain => {
                let a = rng.standard_normal();
                let b = a + TOY_CHILD_NOISE * rng.standard_normal();
                let c = b + TOY_CHILD_NOISE * rng.standard_normal();
                (a, b, c)
            }
            VStructureModel::ReversedChain => {
                let c = rng.standard_normal();
                let b = c + TOY_CHILD_NOISE * rng.standard_normal();
                let a = b + TOY_CHILD_NOISE * rng.standard_normal();
                (a, b, c)
            }
            VStructureModel::Collider => {
                let a = rng.standard_normal();
                let c = rng.standard_normal();
                let b = a + c + TOY_CHILD_NOISE * rng.standard_normal();
                (a, b, c)
            }
        };
        values.set(l, 0, a);
        values.set(l, 1, b);
        values.set(l, 2, c);
    }
    let names = vec!["A".to_string(), "B".to_string(), "C".to_string()];
    let ds = Dataset::new(names, values).expect("finite toy data").standardize();
    (ds, model.adjacency())
}

/// Raw 2-column dataset: X ~ U(-1,1), Y = 4(X^2 - 0.5)^2 + E with
/// E ~ U(-0.33, 0.33). Uncorrelated but strongly dependent.
pub fn toy_parabola(n: usize, rng: &mut SamRng) -> Dataset {
    let mut values = Tensor::zeros(&[n, 2]);
    for l in 0..n {
        let x = rng.uniform_in(-1.0, 1.0);
        let e = rng.uniform_in(-0.33, 0.33);
        let y = 4.0 * (x * x - 0.5) * (x * x - 0.5) + e;
        values.set(l, 0, x);
        values.set(l, 1, y);
    }
    let names = vec!["X".to_string(), "Y".to_string()];
    Dataset::new(names, values).expect("finite toy data")
}

pub fn parabola_adjacency() -> Tensor {
    let mut a = Tensor::zeros(&[2, 2]);
    a.set(0, 1, 1.0);
    a
}
