//! End-to-end training: the epoch loop, penalty schedule, variant dispatch,
//! multi-run ensembling, and final graph extraction.
//!
//! Each epoch follows the same alternation: sample gates, sample noise,
//! generate pseudo-samples, one critic ascent step (adversarial variants
//! only), then one descent step for every generator's parameters and the
//! gate logits. The acyclicity penalty is switched off for the first half of
//! the run and weighted 1 afterwards, so the sparsity term can prune edges
//! before the DAG constraint kicks in.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::critic::{self, CriticParams};
use crate::dataset::Dataset;
use crate::error::{Result, SamError};
use crate::gates::{self, GateState};
use crate::generators::{self, GeneratorNodes, GeneratorParams, LinearParams};
use crate::penalties;
use crate::rng::SamRng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitLossKind {
    Adversarial,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    NonLinear,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub fit: FitLossKind,
    pub mechanisms: MechanismKind,
}

impl Variant {
    pub const SAM: Variant = Variant {
        fit: FitLossKind::Adversarial,
        mechanisms: MechanismKind::NonLinear,
    };
    pub const SAM_LIN: Variant = Variant {
        fit: FitLossKind::Adversarial,
        mechanisms: MechanismKind::Linear,
    };
    pub const SAM_MSE: Variant = Variant {
        fit: FitLossKind::Mse,
        mechanisms: MechanismKind::NonLinear,
    };
    pub const SAM_LIN_MSE: Variant = Variant {
        fit: FitLossKind::Mse,
        mechanisms: MechanismKind::Linear,
    };

    pub fn parse(name: &str) -> Option<Variant> {
        match name {
            "sam" => Some(Variant::SAM),
            "sam-lin" => Some(Variant::SAM_LIN),
            "sam-mse" => Some(Variant::SAM_MSE),
            "sam-lin-mse" => Some(Variant::SAM_LIN_MSE),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.fit, self.mechanisms) {
            (FitLossKind::Adversarial, MechanismKind::NonLinear) => "sam",
            (FitLossKind::Adversarial, MechanismKind::Linear) => "sam-lin",
            (FitLossKind::Mse, MechanismKind::NonLinear) => "sam-mse",
            (FitLossKind::Mse, MechanismKind::Linear) => "sam-lin-mse",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden units per generator.
    pub gen_hidden: usize,
    /// Hidden units per critic layer.
    pub critic_hidden: usize,
    pub n_iter: usize,
    pub lr: f64,
    pub lambda_s: f64,
    pub lambda_f: f64,
    pub variant: Variant,
    pub nruns: usize,
    pub seed: u64,
    /// Uniform subsample per epoch; full batch when unset.
    pub batch_size: Option<usize>,
    pub force_dag: bool,
    /// Acyclicity weight reached at the final epoch. The weight is 1 at the
    /// midpoint switch and climbs geometrically to this ceiling; 1.0 keeps it
    /// constant over the whole second half.
    pub lambda_d_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gen_hidden: 200,
            critic_hidden: 200,
            n_iter: 10_000,
            lr: 0.01,
            lambda_s: 5.0,
            lambda_f: 0.005,
            variant: Variant::SAM,
            nruns: 16,
            seed: 0,
            batch_size: None,
            force_dag: false,
            lambda_d_max: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter < 2 {
            return Err(SamError::contract("n_iter must be at least 2"));
        }
        if self.nruns < 1 {
            return Err(SamError::contract("nruns must be at least 1"));
        }
        if self.lambda_s < 0.0 || self.lambda_f < 0.0 {
            return Err(SamError::contract("penalty weights must be non-negative"));
        }
        Ok(())
    }

    /// Acyclicity weight schedule: 0 before the midpoint, then 1 at the
    /// switch climbing linearly to `lambda_d_max` by the final epoch.
    pub fn lambda_d_at(&self, epoch: usize) -> f64 {
        let switch = self.n_iter / 2;
        if epoch < switch {
            return 0.0;
        }
        if self.lambda_d_max <= 1.0 {
            return 1.0;
        }
        let span = (self.n_iter - switch - 1).max(1) as f64;
        let progress = ((epoch - switch) as f64 / span).min(1.0);
        1.0 + (self.lambda_d_max - 1.0) * progress
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochTrace {
    /// Critic objective (adversarial) or mean-squared error (mse variants).
    pub fit: f64,
    pub structural_penalty: f64,
    pub functional_penalty: f64,
    /// Raw acyclicity score of the epoch's binary adjacency.
    pub acyclicity: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub logits: Tensor,
    pub open_probability: Tensor,
    /// open probability > 0.5 with zero diagonal.
    pub adjacency: Tensor,
    pub trace: Vec<EpochTrace>,
    /// Number of critic scores flattened by the pre-exp clamp.
    pub clamp_events: usize,
}

#[derive(Clone, Debug)]
pub struct CausationScores {
    pub names: Vec<String>,
    /// c_{i,j}: fraction of aggregated runs whose final graph has i -> j.
    pub scores: Tensor,
    pub per_run: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct EnsembleOutcome {
    pub scores: CausationScores,
    pub run_results: Vec<Option<RunResult>>,
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Single-run trainer.
// ---------------------------------------------------------------------------

struct NlGenOpt {
    hidden_w: AdamState,
    hidden_b: AdamState,
    out_w: AdamState,
    out_b: AdamState,
}

struct LinGenOpt {
    w: AdamState,
    nw: AdamState,
    b: AdamState,
}

enum Bank {
    NonLinear(Vec<GeneratorParams>, Vec<NlGenOpt>),
    Linear(Vec<LinearParams>, Vec<LinGenOpt>),
}

struct CriticOpt {
    states: [AdamState; 10],
}

/// Structural gates: trained logits or an adjacency frozen by the caller.
enum Structure {
    Trained {
        state: GateState,
        struct_opt: AdamState,
        func_opt: Option<AdamState>,
    },
    Frozen(Tensor),
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    data: &'a Tensor,
    d: usize,
    rng: SamRng,
    bank: Bank,
    structure: Structure,
    critic: Option<(CriticParams, CriticOpt)>,
    penalized: bool,
    clamp_events: usize,
    trace: Vec<EpochTrace>,
}

struct EpochDraw {
    x: Tensor,
    n_b: usize,
    structural: Tensor,
    structural_noise: Option<Tensor>,
    functional: Option<Tensor>,
    functional_noise: Option<Tensor>,
    gen_noise: Tensor,
}

impl<'a> Trainer<'a> {
    fn new(
        cfg: &'a TrainConfig,
        data: &'a Tensor,
        seed: u64,
        structure: Option<Tensor>,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = data.cols();
        if d < 2 || data.rows() < 2 {
            return Err(SamError::contract(
                "training needs at least 2 variables and 2 samples",
            ));
        }
        let mut rng = SamRng::from_seed(seed);
        let bank = match cfg.variant.mechanisms {
            MechanismKind::NonLinear => {
                let params = generators::init_nonlinear(d, cfg.gen_hidden, &mut rng);
                let opts = params
                    .iter()
                    .map(|p| NlGenOpt {
                        hidden_w: AdamState::new(cfg.lr, p.hidden_weights.len()),
                        hidden_b: AdamState::new(cfg.lr, p.hidden_bias.len()),
                        out_w: AdamState::new(cfg.lr, p.output_weights.len()),
                        out_b: AdamState::new(cfg.lr, p.output_bias.len()),
                    })
                    .collect();
                Bank::NonLinear(params, opts)
            }
            MechanismKind::Linear => {
                let params = generators::init_linear(d, &mut rng);
                let opts = params
                    .iter()
                    .map(|p| LinGenOpt {
                        w: AdamState::new(cfg.lr, p.weights.len()),
                        nw: AdamState::new(cfg.lr, p.noise_weight.len()),
                        b: AdamState::new(cfg.lr, p.bias.len()),
                    })
                    .collect();
                Bank::Linear(params, opts)
            }
        };
        let (structure, penalized) = match structure {
            Some(adjacency) => {
                if !penalties::is_dag(&adjacency) {
                    return Err(SamError::contract(
                        "fixed-structure scoring needs an acyclic adjacency",
                    ));
                }
                (Structure::Frozen(adjacency), false)
            }
            None => {
                let n_h = match cfg.variant.mechanisms {
                    MechanismKind::NonLinear => Some(cfg.gen_hidden),
                    MechanismKind::Linear => None,
                };
                let state = GateState::new(d, n_h);
                let struct_opt = AdamState::new(cfg.lr, d * d);
                let func_opt = n_h.map(|h| AdamState::new(cfg.lr, h * d));
                (
                    Structure::Trained {
                        state,
                        struct_opt,
                        func_opt,
                    },
                    true,
                )
            }
        };
        let critic = match cfg.variant.fit {
            FitLossKind::Adversarial => {
                let params = critic::init(d, cfg.critic_hidden, &mut rng);
                let opt = CriticOpt {
                    states: [
                        AdamState::new(cfg.lr, params.w1.len()),
                        AdamState::new(cfg.lr, params.b1.len()),
                        AdamState::new(cfg.lr, params.gamma1.len()),
                        AdamState::new(cfg.lr, params.beta1.len()),
                        AdamState::new(cfg.lr, params.w2.len()),
                        AdamState::new(cfg.lr, params.b2.len()),
                        AdamState::new(cfg.lr, params.gamma2.len()),
                        AdamState::new(cfg.lr, params.beta2.len()),
                        AdamState::new(cfg.lr, params.w3.len()),
                        AdamState::new(cfg.lr, params.b3.len()),
                    ],
                };
                Some((params, opt))
            }
            FitLossKind::Mse => None,
        };
        Ok(Trainer {
            cfg,
            data,
            d,
            rng,
            bank,
            structure,
            critic,
            penalized,
            clamp_events: 0,
            trace: Vec::with_capacity(cfg.n_iter),
        })
    }

    fn draw_epoch(&mut self) -> EpochDraw {
        let n = self.data.rows();
        let (x, n_b) = match self.cfg.batch_size {
            Some(b) if b < n => {
                let idx = self.rng.choose_distinct(n, b);
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.data.row(i).to_vec()).collect();
                (Tensor::from_rows(&rows), b)
            }
            _ => (self.data.clone(), n),
        };
        let nonlinear = matches!(self.cfg.variant.mechanisms, MechanismKind::NonLinear);
        let (structural, structural_noise, functional, functional_noise) = match &self.structure {
            Structure::Trained { state, .. } => {
                let draw = gates::sample_gates(state, &mut self.rng);
                (
                    draw.structural,
                    Some(draw.structural_noise),
                    draw.functional,
                    draw.functional_noise,
                )
            }
            Structure::Frozen(adjacency) => {
                let functional = nonlinear.then(|| Tensor::full(&[self.cfg.gen_hidden, self.d], 1.0));
                (adjacency.clone(), None, functional, None)
            }
        };
        let gen_noise = self.rng.normal_tensor(&[n_b, self.d]);
        EpochDraw {
            x,
            n_b,
            structural,
            structural_noise,
            functional,
            functional_noise,
            gen_noise,
        }
    }

    /// One forward of all generators without gradients (pre critic update).
    fn pseudo_columns(&self, draw: &EpochDraw) -> Result<Vec<Tensor>> {
        let sampled = gates::SampledGates {
            structural: draw.structural.clone(),
            functional: draw.functional.clone(),
            structural_noise: draw
                .structural_noise
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&[self.d, self.d])),
            functional_noise: draw.functional_noise.clone(),
        };
        let batch = match &self.bank {
            Bank::NonLinear(params, _) => {
                generators::generate(params, &draw.x, &sampled, &draw.gen_noise)?
            }
            Bank::Linear(params, _) => {
                generators::generate_linear(params, &draw.x, &sampled, &draw.gen_noise)?
            }
        };
        Ok(batch.columns().to_vec())
    }

    fn critic_ascent(&mut self, draw: &EpochDraw) -> Result<()> {
        let columns = self.pseudo_columns(draw)?;
        let mut parts: Vec<Tensor> = Vec::with_capacity(self.d + 1);
        parts.push(draw.x.clone());
        for (j, col) in columns.iter().enumerate() {
            parts.push(draw.x.with_column(j, col.data()));
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let input_matrix = Tensor::vstack(&refs);

        let (params, opt) = self.critic.as_mut().expect("adversarial variant");
        let mut tape = Tape::new();
        let input = tape.constant(input_matrix);
        let nodes = critic::add_to_tape(&mut tape, params);
        let fwd = critic::build_forward(&mut tape, &nodes, input)?;
        let fgan = build_fgan_nodes(&mut tape, fwd.scores, draw.n_b, self.d)?;
        let neg = tape.scale(fgan.objective, -1.0)?;
        let grads = tape.backward(neg)?;
        let mut grads = grads;

        let tensors: [(&mut Tensor, NodeId); 10] = [
            (&mut params.w1, nodes.w1),
            (&mut params.b1, nodes.b1),
            (&mut params.gamma1, nodes.gamma1),
            (&mut params.beta1, nodes.beta1),
            (&mut params.w2, nodes.w2),
            (&mut params.b2, nodes.b2),
            (&mut params.gamma2, nodes.gamma2),
            (&mut params.beta2, nodes.beta2),
            (&mut params.w3, nodes.w3),
            (&mut params.b3, nodes.b3),
        ];
        for (k, (tensor, node)) in tensors.into_iter().enumerate() {
            let g = grads.take(node, tensor.shape());
            opt.states[k].step(tensor, &g)?;
        }
        let bn1 = tape.batch_norm_stats(fwd.bn1).expect("bn node");
        let bn2 = tape.batch_norm_stats(fwd.bn2).expect("bn node");
        let (bn1, bn2) = ((bn1.0.to_vec(), bn1.1.to_vec()), (bn2.0.to_vec(), bn2.1.to_vec()));
        critic::update_running_stats(params, (&bn1.0, &bn1.1), (&bn2.0, &bn2.1));
        self.clamp_events += tape.clamp_events();
        Ok(())
    }

    fn generator_descent(&mut self, draw: &EpochDraw, lambda_d: f64) -> Result<EpochTrace> {
        let mut tape = Tape::new();
        let data_node = tape.constant(draw.x.clone());
        let n_b = draw.n_b;
        let d = self.d;

        // Structural gates: straight-through sample or frozen constant.
        let (adjacency_node, struct_logits_node) = match (&self.structure, &draw.structural_noise) {
            (Structure::Trained { state, .. }, Some(noise)) => {
                let logits = tape.constant(state.structural.clone());
                let raw = tape.st_gate(logits, noise.clone())?;
                let mask = tape.constant(gates::self_loop_mask(d));
                let masked = tape.mul(raw, mask)?;
                (masked, Some(logits))
            }
            _ => (tape.constant(draw.structural.clone()), None),
        };

        // Functional gates (non-linear mechanisms only).
        let (functional_node, func_logits_node) = match (&self.structure, &draw.functional_noise) {
            (Structure::Trained { state, .. }, Some(noise)) => {
                let logits_t = state.functional.as_ref().expect("nonlinear gate state");
                let logits = tape.constant(logits_t.clone());
                let z = tape.st_gate(logits, noise.clone())?;
                (Some(z), Some(logits))
            }
            _ => (
                draw.functional
                    .as_ref()
                    .map(|f| tape.constant(f.clone())),
                None,
            ),
        };

        // Generator forwards.
        let mut gen_nodes: Vec<GeneratorNodes> = Vec::with_capacity(d);
        let mut fake_nodes: Vec<NodeId> = Vec::with_capacity(d);
        match &self.bank {
            Bank::NonLinear(params, _) => {
                for p in params {
                    gen_nodes.push(generators::add_nonlinear_to_tape(&mut tape, p));
                }
            }
            Bank::Linear(params, _) => {
                for p in params {
                    gen_nodes.push(generators::add_linear_to_tape(&mut tape, p));
                }
            }
        }
        for (j, nodes) in gen_nodes.iter().enumerate() {
            let a_col = tape.column(adjacency_node, j)?;
            let z_col = match &functional_node {
                Some(z) => Some(tape.column(*z, j)?),
                None => None,
            };
            let noise_col = tape.constant(draw.gen_noise.column(j).reshape(vec![n_b, 1]));
            let col =
                generators::build_pseudo_column(&mut tape, nodes, data_node, a_col, z_col, noise_col)?;
            let fake = tape.replace_column(data_node, j, col)?;
            fake_nodes.push(fake);
        }

        // Fit loss.
        let (fit_total, fit_value) = match self.cfg.variant.fit {
            FitLossKind::Adversarial => {
                let mut parts = vec![data_node];
                parts.extend_from_slice(&fake_nodes);
                let all = tape.concat_rows(&parts)?;
                let (params, _) = self.critic.as_ref().expect("adversarial variant");
                let nodes = critic::add_to_tape(&mut tape, params);
                let fwd = critic::build_forward(&mut tape, &nodes, all)?;
                let fgan = build_fgan_nodes(&mut tape, fwd.scores, n_b, d)?;
                let objective_value = tape.value(fgan.objective).item();
                (fgan.fit_total, objective_value)
            }
            FitLossKind::Mse => {
                let mut terms = Vec::with_capacity(d);
                for (j, &fake) in fake_nodes.iter().enumerate() {
                    let fake_col = tape.column(fake, j)?;
                    let data_col = tape.constant(draw.x.column(j));
                    let diff = tape.sub(data_col, fake_col)?;
                    let sq = tape.mul(diff, diff)?;
                    terms.push(tape.sum(sq)?);
                }
                let total = tape.add_many(&terms)?;
                let scaled = tape.scale(total, 1.0 / n_b as f64)?;
                (scaled, tape.value(scaled).item())
            }
        };

        // Penalties on the epoch's sampled gates.
        let mut loss = fit_total;
        let mut structural_penalty = 0.0;
        let mut functional_penalty = 0.0;
        if self.penalized {
            let a_sum = tape.sum(adjacency_node)?;
            let sp = tape.scale(a_sum, self.cfg.lambda_s / n_b as f64)?;
            structural_penalty = tape.value(sp).item();
            loss = tape.add(loss, sp)?;
            if let Some(z) = functional_node {
                let z_sum = tape.sum(z)?;
                let fp = tape.scale(z_sum, self.cfg.lambda_f / n_b as f64)?;
                functional_penalty = tape.value(fp).item();
                loss = tape.add(loss, fp)?;
            }
            if lambda_d > 0.0 {
                let acyc = tape.trace_power_series(adjacency_node)?;
                let weighted = tape.scale(acyc, lambda_d)?;
                loss = tape.add(loss, weighted)?;
            }
        }
        let acyclicity = penalties::acyclicity_penalty(&draw.structural);

        let mut grads = tape.backward(loss)?;

        // Parameter updates: generators, then gate logits.
        match &mut self.bank {
            Bank::NonLinear(params, opts) => {
                for ((p, o), nodes) in params.iter_mut().zip(opts).zip(&gen_nodes) {
                    let GeneratorNodes::NonLinear {
                        hidden_weights,
                        hidden_bias,
                        output_weights,
                        output_bias,
                    } = nodes
                    else {
                        unreachable!()
                    };
                    let g = grads.take(*hidden_weights, p.hidden_weights.shape());
                    o.hidden_w.step(&mut p.hidden_weights, &g)?;
                    let g = grads.take(*hidden_bias, p.hidden_bias.shape());
                    o.hidden_b.step(&mut p.hidden_bias, &g)?;
                    let g = grads.take(*output_weights, p.output_weights.shape());
                    o.out_w.step(&mut p.output_weights, &g)?;
                    let g = grads.take(*output_bias, p.output_bias.shape());
                    o.out_b.step(&mut p.output_bias, &g)?;
                }
            }
            Bank::Linear(params, opts) => {
                for ((p, o), nodes) in params.iter_mut().zip(opts).zip(&gen_nodes) {
                    let GeneratorNodes::Linear {
                        weights,
                        noise_weight,
                        bias,
                    } = nodes
                    else {
                        unreachable!()
                    };
                    let g = grads.take(*weights, p.weights.shape());
                    o.w.step(&mut p.weights, &g)?;
                    let g = grads.take(*noise_weight, p.noise_weight.shape());
                    o.nw.step(&mut p.noise_weight, &g)?;
                    let g = grads.take(*bias, p.bias.shape());
                    o.b.step(&mut p.bias, &g)?;
                }
            }
        }
        if let Structure::Trained {
            state,
            struct_opt,
            func_opt,
        } = &mut self.structure
        {
            if let Some(node) = struct_logits_node {
                let g = grads.take(node, state.structural.shape());
                struct_opt.step(&mut state.structural, &g)?;
            }
            if let (Some(node), Some(opt)) = (func_logits_node, func_opt.as_mut()) {
                let logits = state.functional.as_mut().expect("nonlinear gate state");
                let g = grads.take(node, logits.shape());
                opt.step(logits, &g)?;
            }
        }
        self.clamp_events += tape.clamp_events();

        Ok(EpochTrace {
            fit: fit_value,
            structural_penalty,
            functional_penalty,
            acyclicity,
        })
    }

    fn run(mut self) -> Result<RunResult> {
        for epoch in 0..self.cfg.n_iter {
            let lambda_d = self.cfg.lambda_d_at(epoch);
            let draw = self.draw_epoch();
            let step = (|| -> Result<EpochTrace> {
                if matches!(self.cfg.variant.fit, FitLossKind::Adversarial) {
                    self.critic_ascent(&draw)?;
                }
                self.generator_descent(&draw, lambda_d)
            })();
            // TODO: remove debug hook after calibration.
            if std::env::var_os("SAM_DEBUG_EPOCH").is_some() && epoch % 100 == 0 {
                if let Structure::Trained { state, .. } = &self.structure {
                    let p = gates::open_probability(&state.structural);
                    eprintln!(
                        "epoch {epoch}: lambda_d {lambda_d:.1} fit {:?} probs {:?}",
                        self.trace.last().map(|t| t.fit),
                        p.data()
                    );
                }
            }
            match step {
                Ok(trace) => self.trace.push(trace),
                Err(SamError::NumericOverflow { op_index, op_name }) => {
                    let last = self.trace.last().copied();
                    return Err(SamError::Diverged {
                        epoch,
                        message: format!(
                            "non-finite value in {op_name} (op {op_index}); last finite losses: {last:?}"
                        ),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let logits = match &self.structure {
            Structure::Trained { state, .. } => state.structural.clone(),
            // Frozen runs report the fixed structure as infinitely confident
            // gates: +inf would not round-trip, so use a large logit.
            Structure::Frozen(adjacency) => adjacency.map(|v| if v > 0.0 { 40.0 } else { -40.0 }),
        };
        let open_probability = gates::open_probability(&logits);
        let adjacency = thresholded_adjacency(&open_probability, 0.5);
        Ok(RunResult {
            logits,
            open_probability,
            adjacency,
            trace: self.trace,
            clamp_events: self.clamp_events,
        })
    }
}

struct FganNodes {
    fit_total: NodeId,
    objective: NodeId,
}

/// Assembles the adversarial objective from the scores of one forward pass
/// over [reals; fakes_1; ...; fakes_d] (each block n_b rows):
/// (d/n) sum T(real) + (1/n) sum_j sum_l -exp(T(fake_jl) - 1).
fn build_fgan_nodes(tape: &mut Tape, scores: NodeId, n_b: usize, d: usize) -> Result<FganNodes> {
    let real = tape.slice_rows(scores, 0, n_b)?;
    let real_mean = tape.mean(real)?;
    let real_term = tape.scale(real_mean, d as f64)?;
    let mut fits = Vec::with_capacity(d);
    for j in 0..d {
        let s = tape.slice_rows(scores, (1 + j) * n_b, n_b)?;
        let clamped = tape.clamp_max(s, critic::SCORE_CLAMP)?;
        let shifted = tape.add_scalar(clamped, -1.0)?;
        let grown = tape.exp(shifted)?;
        let summed = tape.sum(grown)?;
        fits.push(tape.scale(summed, -1.0 / n_b as f64)?);
    }
    let fit_total = tape.add_many(&fits)?;
    let objective = tape.add(real_term, fit_total)?;
    Ok(FganNodes {
        fit_total,
        objective,
    })
}

/// Strictly-greater thresholding with a zeroed diagonal.
pub fn thresholded_adjacency(open_probability: &Tensor, threshold: f64) -> Tensor {
    let d = open_probability.rows();
    let mut adj = open_probability.map(|p| if p > threshold { 1.0 } else { 0.0 });
    for i in 0..d {
        adj.set(i, i, 0.0);
    }
    adj
}

/// One full training run.
pub fn train_single(data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<RunResult> {
    Trainer::new(cfg, data.values(), seed, None)?.run()
}

/// Trains with the structural gates frozen to `adjacency` (functional gates
/// all open, no penalties) and returns the converged fit loss, averaged over
/// the final tenth of the epochs.
pub fn score_fixed_structure(data: &Dataset, adjacency: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    if adjacency.rows() != data.d() || adjacency.cols() != data.d() {
        return Err(SamError::contract(format!(
            "adjacency {:?} does not match {} variables",
            adjacency.shape(),
            data.d()
        )));
    }
    let result = Trainer::new(cfg, data.values(), cfg.seed, Some(adjacency.clone()))?.run()?;
    let window = (cfg.n_iter / 10).max(1);
    let tail = &result.trace[result.trace.len() - window..];
    Ok(tail.iter().map(|t| t.fit).sum::<f64>() / window as f64)
}

/// Aggregates per-run binary adjacencies into causation scores: c_{i,j} is
/// the fraction of runs whose final graph contains i -> j.
pub fn aggregate_adjacencies(per_run: &[Tensor]) -> Tensor {
    assert!(!per_run.is_empty());
    let mut acc = Tensor::zeros(per_run[0].shape());
    for adj in per_run {
        acc = acc.add(adj);
    }
    acc.scale(1.0 / per_run.len() as f64)
}

/// Runs `cfg.nruns` independent trainings with seeds seed..seed+nruns-1 (in
/// parallel) and aggregates their final graphs. Individual run failures are
/// tolerated with a warning as long as at least half the runs succeed.
pub fn train_ensemble(data: &Dataset, cfg: &TrainConfig) -> Result<EnsembleOutcome> {
    cfg.validate()?;
    let results: Vec<(u64, Result<RunResult>)> = (0..cfg.nruns as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i);
            (seed, train_single(data, cfg, seed))
        })
        .collect();

    let mut warnings = Vec::new();
    let mut per_run = Vec::new();
    let mut run_results = Vec::with_capacity(cfg.nruns);
    let mut first_failure: Option<(usize, String)> = None;
    for (run, (seed, result)) in results.into_iter().enumerate() {
        match result {
            Ok(r) => {
                per_run.push(r.adjacency.clone());
                run_results.push(Some(r));
            }
            Err(e) => {
                warnings.push(format!("run {run} (seed {seed}) failed: {e}"));
                if first_failure.is_none() {
                    first_failure = Some((run, e.to_string()));
                }
                run_results.push(None);
            }
        }
    }
    let succeeded = per_run.len();
    if succeeded * 2 < cfg.nruns {
        let (run, message) = first_failure.expect("failures exist");
        return Err(SamError::EnsembleFailed {
            failed: cfg.nruns - succeeded,
            total: cfg.nruns,
            run,
            message,
        });
    }
    if succeeded < cfg.nruns {
        warnings.push(format!(
            "aggregated {succeeded} of {} runs; causation scores use successful runs only",
            cfg.nruns
        ));
    }
    let scores = aggregate_adjacencies(&per_run);
    Ok(EnsembleOutcome {
        scores: CausationScores {
            names: data.names().to_vec(),
            scores,
            per_run,
        },
        run_results,
        warnings,
    })
}

/// Thresholds causation scores into a graph (strict inequality). With
/// `force_dag`, repeatedly deletes the lowest-scoring edge on some remaining
/// cycle until the graph is acyclic.
pub fn extract_graph(scores: &CausationScores, threshold: f64, force_dag: bool) -> Tensor {
    let mut adj = thresholded_adjacency(&scores.scores, threshold);
    if force_dag {
        while let Some(cycle) = find_cycle(&adj) {
            let (&(i, j), _) = cycle
                .iter()
                .map(|e| (e, scores.scores.at(e.0, e.1)))
                .reduce(|best, cur| if cur.1 < best.1 { cur } else { best })
                .expect("cycle is nonempty");
            adj.set(i, j, 0.0);
        }
    }
    adj
}

/// Some directed cycle of a binary adjacency, as its edge list.
fn find_cycle(adj: &Tensor) -> Option<Vec<(usize, usize)>> {
    let d = adj.rows();
    // 0 = unvisited, 1 = on stack, 2 = done.
    let mut color = vec![0u8; d];
    let mut stack: Vec<usize> = Vec::new();

    fn dfs(
        v: usize,
        adj: &Tensor,
        color: &mut [u8],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<(usize, usize)>> {
        color[v] = 1;
        stack.push(v);
        for w in 0..adj.rows() {
            if adj.at(v, w) == 0.0 {
                continue;
            }
            if color[w] == 1 {
                let start = stack.iter().position(|&x| x == w).expect("on stack");
                let mut edges = Vec::new();
                for k in start..stack.len() - 1 {
                    edges.push((stack[k], stack[k + 1]));
                }
                edges.push((v, w));
                return Some(edges);
            }
            if color[w] == 0 {
                if let Some(c) = dfs(w, adj, color, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        color[v] = 2;
        None
    }

    for v in 0..d {
        if color[v] == 0 {
            if let Some(c) = dfs(v, adj, &mut color, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            gen_hidden: 8,
            critic_hidden: 12,
            n_iter: 600,
            lr: 0.01,
            lambda_s: 5.0,
            lambda_f: 0.005,
            variant,
            nruns: 1,
            seed: 0,
            batch_size: None,
            force_dag: false,
            lambda_d_max: 1.0,
        }
    }

    fn pair_dataset(n: usize, seed: u64) -> Dataset {
        // X2 = X1 + small noise.
        let mut rng = SamRng::from_seed(seed);
        let mut values = Tensor::zeros(&[n, 2]);
        for l in 0..n {
            let x1 = rng.standard_normal();
            values.set(l, 0, x1);
            values.set(l, 1, x1 + 0.3 * rng.standard_normal());
        }
        Dataset::with_default_names(values).standardize()
    }

    fn independent_dataset(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = SamRng::from_seed(seed);
        Dataset::with_default_names(rng.normal_tensor(&[n, d])).standardize()
    }

    #[test]
    fn dependent_pair_keeps_one_edge_only() {
        let data = pair_dataset(200, 3);
        let cfg = desk_cfg(Variant::SAM_LIN_MSE);
        let result = train_single(&data, &cfg, 1).unwrap();
        let p01 = result.open_probability.at(0, 1);
        let p10 = result.open_probability.at(1, 0);
        assert!(
            p01 > 0.5 || p10 > 0.5,
            "no edge found: p01 {p01}, p10 {p10}"
        );
        assert!(
            !(p01 > 0.5 && p10 > 0.5),
            "2-cycle survived the acyclicity phase: p01 {p01}, p10 {p10}"
        );
    }

    #[test]
    fn independent_noise_yields_empty_graph() {
        for seed in 0..5 {
            let data = independent_dataset(300, 3, 100 + seed);
            let mut cfg = desk_cfg(Variant::SAM_LIN_MSE);
            cfg.n_iter = 500;
            let result = train_single(&data, &cfg, seed).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert!(
                        result.open_probability.at(i, j) < 0.5,
                        "spurious edge {i}->{j} at seed {seed}: {}",
                        result.open_probability.at(i, j)
                    );
                }
            }
        }
    }

    #[test]
    fn same_seed_reproduces_run_exactly() {
        let data = pair_dataset(100, 7);
        let mut cfg = desk_cfg(Variant::SAM);
        cfg.n_iter = 40;
        cfg.gen_hidden = 6;
        cfg.critic_hidden = 8;
        let a = train_single(&data, &cfg, 5).unwrap();
        let b = train_single(&data, &cfg, 5).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.adjacency, b.adjacency);
        assert_eq!(a.trace.len(), b.trace.len());
        for (ta, tb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ta.fit.to_bits(), tb.fit.to_bits());
        }
    }

    #[test]
    fn acyclicity_gradient_inactive_in_first_half() {
        let cfg = desk_cfg(Variant::SAM);
        assert_eq!(cfg.lambda_d_at(0), 0.0);
        assert_eq!(cfg.lambda_d_at(cfg.n_iter / 2 - 1), 0.0);
        assert_eq!(cfg.lambda_d_at(cfg.n_iter / 2), 1.0);
        assert_eq!(cfg.lambda_d_at(cfg.n_iter - 1), 1.0);
    }

    #[test]
    fn ensemble_fractions_are_exact() {
        let edge = |on: bool| {
            let mut a = Tensor::zeros(&[2, 2]);
            if on {
                a.set(0, 1, 1.0);
            }
            a
        };
        // 16 runs: edge present in all runs -> 1.0; present in 8 -> 0.5.
        let always: Vec<Tensor> = (0..16).map(|_| edge(true)).collect();
        assert_eq!(aggregate_adjacencies(&always).at(0, 1), 1.0);
        let half: Vec<Tensor> = (0..16).map(|i| edge(i < 8)).collect();
        assert_eq!(aggregate_adjacencies(&half).at(0, 1), 0.5);
        let single = vec![edge(true)];
        assert_eq!(aggregate_adjacencies(&single).at(0, 1), 1.0);
    }

    #[test]
    fn ensemble_seeds_are_consecutive_and_deterministic() {
        let data = pair_dataset(80, 11);
        let mut cfg = desk_cfg(Variant::SAM_LIN_MSE);
        cfg.n_iter = 60;
        cfg.nruns = 3;
        cfg.seed = 21;
        let a = train_ensemble(&data, &cfg).unwrap();
        let b = train_ensemble(&data, &cfg).unwrap();
        assert_eq!(a.scores.scores, b.scores.scores);
        assert_eq!(a.scores.per_run.len(), 3);
        for (ra, rb) in a.scores.per_run.iter().zip(&b.scores.per_run) {
            assert_eq!(ra, rb);
        }
        // Each per-run adjacency matches its stand-alone training.
        for (i, adj) in a.scores.per_run.iter().enumerate() {
            let solo = train_single(&data, &cfg, 21 + i as u64).unwrap();
            assert_eq!(&solo.adjacency, adj);
        }
    }

    #[test]
    fn extract_graph_thresholds_strictly() {
        let mut scores = Tensor::zeros(&[2, 2]);
        scores.set(0, 1, 0.51);
        scores.set(1, 0, 0.5);
        let cs = CausationScores {
            names: vec!["X1".into(), "X2".into()],
            scores,
            per_run: vec![],
        };
        let g = extract_graph(&cs, 0.5, false);
        assert_eq!(g.at(0, 1), 1.0, "0.51 > 0.5 is kept");
        assert_eq!(g.at(1, 0), 0.0, "exactly 0.5 is dropped");

        let empty = CausationScores {
            names: vec!["X1".into(), "X2".into()],
            scores: Tensor::zeros(&[2, 2]),
            per_run: vec![],
        };
        assert_eq!(extract_graph(&empty, 0.5, false).sum(), 0.0);
    }

    #[test]
    fn force_dag_removes_low_confidence_cycle_edge() {
        let mut scores = Tensor::zeros(&[2, 2]);
        scores.set(0, 1, 0.9);
        scores.set(1, 0, 0.6);
        let cs = CausationScores {
            names: vec!["X1".into(), "X2".into()],
            scores,
            per_run: vec![],
        };
        let raw = extract_graph(&cs, 0.5, false);
        assert_eq!(raw.at(0, 1), 1.0);
        assert_eq!(raw.at(1, 0), 1.0);
        let repaired = extract_graph(&cs, 0.5, true);
        assert_eq!(repaired.at(0, 1), 1.0);
        assert_eq!(repaired.at(1, 0), 0.0);
        assert!(penalties::is_dag(&repaired));
    }

    #[test]
    fn score_fixed_structure_rejects_cycles() {
        let data = pair_dataset(50, 13);
        let cyclic = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let cfg = desk_cfg(Variant::SAM_LIN);
        assert!(matches!(
            score_fixed_structure(&data, &cyclic, &cfg),
            Err(SamError::Contract(_))
        ));
    }

    #[test]
    fn variant_names_round_trip() {
        for name in ["sam", "sam-lin", "sam-mse", "sam-lin-mse"] {
            assert_eq!(Variant::parse(name).unwrap().name(), name);
        }
        assert!(Variant::parse("nope").is_none());
    }
}
