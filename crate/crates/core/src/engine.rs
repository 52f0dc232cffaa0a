//! Federated training loop with pluggable client and server updates.
//!
//! Each round the server broadcasts `w_prev`, every participating client runs
//! `E` local epochs and reports `delta_m = w_prev - w_m`, and the server folds
//! the weighted deltas back into a new global model. Calibration penalties are
//! recomputed at the start of every local epoch from the similarity between
//! the previous round's aggregate delta and the client's running delta.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FedCalError, Result};
use crate::losses::{combined, cross_entropy, AuxKind, LossKind};
use crate::metrics::{evaluate, CalibrationReport};
use crate::model::{
    forward, init_model, predict_logits, softmax, ModelSpec, OptimizerState, ParameterDelta, ParameterSet,
    SgdConfig,
};
use crate::partition::{Dataset, PartitionPlan};
use crate::similarity::{DeltaSimilarity, SimKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlAlgorithm {
    FedAvg,
    FedProx {
        #[serde(default = "default_mu")]
        mu: f64,
    },
    Scaffold,
    FedDyn {
        #[serde(default = "default_dyn_alpha")]
        alpha: f64,
    },
    FedNova,
}

fn default_mu() -> f64 {
    1.0
}

fn default_dyn_alpha() -> f64 {
    0.1
}

impl FlAlgorithm {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FlAlgorithm::FedProx { mu } if !(mu >= 0.0 && mu.is_finite()) => {
                Err(FedCalError::config("algorithm.mu", "must be finite and >= 0"))
            }
            FlAlgorithm::FedDyn { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(FedCalError::config("algorithm.alpha", "must be finite and > 0"))
            }
            _ => Ok(()),
        }
    }
}

pub const REVERSED_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaRule {
    Fixed {
        beta: f64,
    },
    Nucfl {
        sim: SimKind,
    },
    /// Penalizes dissimilar clients hardest: `min(cap, 1 / max(sim, 1e-3))`.
    Reversed {
        sim: SimKind,
        #[serde(default = "default_cap")]
        cap: f64,
    },
}

fn default_cap() -> f64 {
    10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPolicy {
    #[serde(default)]
    pub task: LossKind,
    #[serde(default)]
    pub aux: AuxKind,
    pub beta_rule: BetaRule,
}

impl CalibrationPolicy {
    pub fn uncalibrated() -> Self {
        Self {
            task: LossKind::CrossEntropy,
            aux: AuxKind::None,
            beta_rule: BetaRule::Fixed { beta: 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            LossKind::Focal { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                return Err(FedCalError::config("calibration.task.gamma", "must be finite and >= 0"))
            }
            LossKind::LabelSmoothing { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                return Err(FedCalError::config("calibration.task.alpha", "must be in (0, 1)"))
            }
            _ => {}
        }
        match self.beta_rule {
            BetaRule::Fixed { beta } if !(beta >= 0.0 && beta.is_finite()) => {
                Err(FedCalError::config("calibration.beta_rule.beta", "must be finite and >= 0"))
            }
            BetaRule::Reversed { cap, .. } if !(cap > 0.0 && cap.is_finite()) => {
                Err(FedCalError::config("calibration.beta_rule.cap", "must be finite and > 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Server-side state carried between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    /// Round about to run, starting at 1.
    pub round: usize,
    pub global: ParameterSet,
    /// Aggregate delta of the previous round; `None` before round 1 finishes.
    pub prev_aggregate_delta: Option<ParameterDelta>,
    /// Scaffold server control variate `c`.
    pub server_control: ParameterDelta,
    /// FedDyn server state, accumulating `alpha` times the average client drift.
    pub dyn_state: ParameterDelta,
}

impl RoundState {
    pub fn new(global: ParameterSet) -> Self {
        let zero = global.delta_to(&global).scaled(0.0);
        Self {
            round: 1,
            prev_aggregate_delta: None,
            server_control: zero.clone(),
            dyn_state: zero,
            global,
        }
    }
}

/// Per-client state that survives across rounds.
///
/// Momentum buffers persist between the rounds a client participates in;
/// Scaffold and FedDyn keep their control variate and gradient memory here.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub indices: Vec<usize>,
    pub control: ParameterDelta,
    pub dyn_grad: ParameterDelta,
    pub optimizer: OptimizerState,
    /// Local steps taken in the client's most recent round.
    pub tau: usize,
}

impl ClientState {
    pub fn new(id: usize, indices: Vec<usize>, spec: &ModelSpec, sgd: SgdConfig) -> Self {
        Self {
            id,
            indices,
            control: ParameterDelta::zeros(spec),
            dyn_grad: ParameterDelta::zeros(spec),
            optimizer: OptimizerState::new(spec, sgd),
            tau: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
}

/// What a client reports after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub samples: usize,
    /// `w_prev - w_m^(t,E)`.
    pub delta: ParameterDelta,
    pub tau: usize,
    /// Penalty weight used in each local epoch.
    pub betas: Vec<f64>,
    /// Mean minibatch objective over the last local epoch.
    pub last_epoch_loss: f64,
    /// Scaffold only: `c_m_new - c_m_old`.
    pub control_change: Option<ParameterDelta>,
}

impl ClientUpdate {
    /// FedNova's step-normalized update `delta / tau`.
    pub fn normalized_delta(&self) -> ParameterDelta {
        self.delta.scaled(1.0 / self.tau.max(1) as f64)
    }
}

/// Penalty weight for the coming epoch.
pub fn compute_beta(
    round: &RoundState,
    running_local_delta: &ParameterDelta,
    policy: &CalibrationPolicy,
    similarity: &dyn DeltaSimilarity,
) -> Result<f64> {
    match policy.beta_rule {
        BetaRule::Fixed { beta } => Ok(beta),
        _ if policy.aux == AuxKind::None => Ok(0.0),
        BetaRule::Nucfl { .. } => {
            let s = similarity.similarity(round.prev_aggregate_delta.as_ref(), running_local_delta)?;
            Ok(s.clamp(0.0, 1.0))
        }
        BetaRule::Reversed { cap, .. } => {
            let Some(prev) = round.prev_aggregate_delta.as_ref() else {
                return Ok(0.0);
            };
            if running_local_delta.is_zero() {
                return Ok(0.0);
            }
            let s = similarity.similarity(Some(prev), running_local_delta)?.clamp(0.0, 1.0);
            Ok(cap.min(1.0 / s.max(REVERSED_EPS)))
        }
    }
}

/// Runs `E` local epochs for one client, updating its persistent state.
#[allow(clippy::too_many_arguments)]
pub fn client_opt(
    algorithm: FlAlgorithm,
    round: &RoundState,
    client: &mut ClientState,
    data: &Dataset,
    policy: &CalibrationPolicy,
    similarity: &dyn DeltaSimilarity,
    local: LocalTraining,
    rng_seed: u64,
) -> Result<ClientUpdate> {
    if client.indices.is_empty() {
        return Err(FedCalError::Partition(format!("client {} has no data", client.id)));
    }
    let w_prev = &round.global;
    let mut w = w_prev.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order = client.indices.clone();
    let scaffold_correction = match algorithm {
        FlAlgorithm::Scaffold => {
            let mut c = round.server_control.clone();
            c.add_scaled(-1.0, &client.control);
            Some(c)
        }
        _ => None,
    };
    let mut tau = 0;
    let mut betas = Vec::with_capacity(local.epochs);
    let mut last_epoch_loss = 0.0;

    for epoch in 1..=local.epochs {
        let beta = compute_beta(round, &w_prev.delta_to(&w), policy, similarity)?;
        betas.push(beta);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(local.batch_size) {
            let batch = data.batch(chunk)?;
            let (logits, cache) = forward(&w, &batch)?;
            let value = combined(policy.task, policy.aux, beta, &softmax(&logits), &batch.labels);
            if !value.loss.is_finite() {
                return Err(FedCalError::Divergence {
                    round: round.round,
                    client: client.id,
                    epoch,
                });
            }
            epoch_loss += value.loss;
            batches += 1;
            let mut grad = crate::model::backward(&w, &cache, &value.grad_logits)?;
            match algorithm {
                FlAlgorithm::FedAvg | FlAlgorithm::FedNova => {}
                FlAlgorithm::FedProx { mu } => {
                    // mu * (w - w_prev)
                    grad.add_scaled(-mu, &w_prev.delta_to(&w));
                }
                FlAlgorithm::Scaffold => {
                    grad.add_scaled(1.0, scaffold_correction.as_ref().unwrap());
                }
                FlAlgorithm::FedDyn { alpha } => {
                    grad.add_scaled(-1.0, &client.dyn_grad);
                    grad.add_scaled(-alpha, &w_prev.delta_to(&w));
                }
            }
            client.optimizer.step_in_place(&mut w, &grad);
            tau += 1;
        }
        last_epoch_loss = epoch_loss / batches as f64;
    }

    if !w.is_finite() {
        return Err(FedCalError::Divergence {
            round: round.round,
            client: client.id,
            epoch: local.epochs,
        });
    }
    let delta = w_prev.delta_to(&w);
    let control_change = match algorithm {
        FlAlgorithm::Scaffold => {
            // Option II: c_m <- c_m - c + delta / (tau * lr_eff), where
            // lr_eff = lr / (1 - momentum) is the length of a heavy-ball step.
            let sgd = client.optimizer.config;
            let step = sgd.lr / (1.0 - sgd.momentum);
            let mut next = client.control.clone();
            next.add_scaled(-1.0, &round.server_control);
            next.add_scaled(1.0 / (tau as f64 * step), &delta);
            let mut change = next.clone();
            change.add_scaled(-1.0, &client.control);
            client.control = next;
            Some(change)
        }
        FlAlgorithm::FedDyn { alpha } => {
            client.dyn_grad.add_scaled(alpha, &delta);
            None
        }
        _ => None,
    };
    client.tau = tau;
    Ok(ClientUpdate {
        client: client.id,
        samples: client.indices.len(),
        delta,
        tau,
        betas,
        last_epoch_loss,
        control_change,
    })
}

/// Folds client updates into the next round's state. `weights` must sum to 1;
/// `total_clients` is `M`, used by the control-variate averages.
pub fn server_opt(
    algorithm: FlAlgorithm,
    state: &RoundState,
    updates: &[ClientUpdate],
    weights: &[f64],
    total_clients: usize,
) -> Result<RoundState> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || weights.len() != updates.len() || updates.is_empty() {
        return Err(FedCalError::WeightSum(sum));
    }
    let mut aggregate = state.server_control.scaled(0.0);
    for (u, &p) in updates.iter().zip(weights) {
        aggregate.add_scaled(p, &u.delta);
    }
    let mut next = state.clone();
    next.round = state.round + 1;
    match algorithm {
        FlAlgorithm::FedAvg | FlAlgorithm::FedProx { .. } => {
            next.global = state.global.step(&aggregate, 1.0);
        }
        FlAlgorithm::Scaffold => {
            next.global = state.global.step(&aggregate, 1.0);
            let share = 1.0 / total_clients as f64;
            for u in updates {
                if let Some(change) = &u.control_change {
                    next.server_control.add_scaled(share, change);
                }
            }
        }
        FlAlgorithm::FedDyn { alpha } => {
            // The correction uses the state accumulated before this round, so
            // a fresh server takes a plain averaging step.
            let mut global = state.global.step(&aggregate, 1.0);
            global.step_in_place(&state.dyn_state, -1.0 / alpha);
            next.global = global;
            let share = alpha / total_clients as f64;
            for u in updates {
                next.dyn_state.add_scaled(-share, &u.delta);
            }
        }
        FlAlgorithm::FedNova => {
            let tau_eff: f64 = updates.iter().zip(weights).map(|(u, &p)| p * u.tau as f64).sum();
            let mut normalized = state.server_control.scaled(0.0);
            for (u, &p) in updates.iter().zip(weights) {
                normalized.add_scaled(p / u.tau.max(1) as f64, &u.delta);
            }
            normalized.scale(tau_eff);
            next.global = state.global.step(&normalized, 1.0);
            aggregate = normalized;
        }
    }
    next.prev_aggregate_delta = Some(aggregate);
    Ok(next)
}

/// Combines a base seed with a round and a client id (splitmix64 finalizer).
pub fn derive_seed(base: u64, round: u64, stream: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(base) ^ round) ^ stream)
}

/// Stream id reserved for client sampling.
const SAMPLING_STREAM: u64 = u64::MAX;
/// Stream id reserved for model initialization.
const INIT_STREAM: u64 = u64::MAX - 1;

pub fn init_seed(base: u64) -> u64 {
    derive_seed(base, 0, INIT_STREAM)
}

pub fn client_seed(base: u64, round: usize, client: usize) -> u64 {
    derive_seed(base, round as u64, client as u64)
}

/// `ceil(f * M)` clients sampled without replacement, in ascending id order.
pub fn select_participants(base: u64, round: usize, clients: usize, fraction: f64) -> Vec<usize> {
    let k = ((fraction * clients as f64).ceil() as usize).clamp(1, clients);
    if k == clients {
        return (0..clients).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, round as u64, SAMPLING_STREAM));
    let mut chosen = index::sample(&mut rng, clients, k).into_vec();
    chosen.sort_unstable();
    chosen
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationConfig {
    pub spec: ModelSpec,
    pub algorithm: FlAlgorithm,
    pub policy: CalibrationPolicy,
    pub sgd: SgdConfig,
    pub local: LocalTraining,
    pub rounds: usize,
    pub participation: f64,
    pub bins: usize,
    pub seed: u64,
    pub threads: usize,
    /// Off by default so histories are reproducible byte for byte.
    pub measure_wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStat {
    pub client: usize,
    pub samples: usize,
    pub tau: usize,
    pub delta_norm: f64,
    pub mean_beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub ece: f64,
    pub sce: f64,
    /// Mean over participants of each client's per-epoch mean penalty.
    pub mean_beta: f64,
    /// Cross-entropy of the new global model on the full training set.
    pub train_loss: f64,
    pub wall_ms: f64,
    pub clients: Vec<ClientRoundStat>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub final_state: RoundState,
    pub history: Vec<RoundRecord>,
    pub final_report: CalibrationReport,
}

impl ExperimentOutcome {
    pub fn final_params(&self) -> &ParameterSet {
        &self.final_state.global
    }
}

pub struct Simulator<'a> {
    config: SimulationConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    plan: &'a PartitionPlan,
    similarity: Arc<dyn DeltaSimilarity>,
}

impl<'a> Simulator<'a> {
    pub fn new(config: SimulationConfig, train: &'a Dataset, test: &'a Dataset, plan: &'a PartitionPlan) -> Self {
        let kind = match config.policy.beta_rule {
            BetaRule::Nucfl { sim } | BetaRule::Reversed { sim, .. } => sim,
            BetaRule::Fixed { .. } => SimKind::Cosine,
        };
        Self {
            config,
            train,
            test,
            plan,
            similarity: Arc::new(kind),
        }
    }

    /// Replaces the similarity hook used by the penalty rule.
    pub fn with_similarity(mut self, similarity: Arc<dyn DeltaSimilarity>) -> Self {
        self.similarity = similarity;
        self
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.sgd.validate()?;
        c.algorithm.validate()?;
        c.policy.validate()?;
        if c.local.epochs == 0 {
            return Err(FedCalError::config("epochs", "must be >= 1"));
        }
        if c.local.batch_size == 0 {
            return Err(FedCalError::config("batch_size", "must be >= 1"));
        }
        if !(c.participation > 0.0 && c.participation <= 1.0) {
            return Err(FedCalError::config("participation", "must be in (0, 1]"));
        }
        if c.bins == 0 {
            return Err(FedCalError::config("bins", "must be >= 1"));
        }
        if self.train.dim() != c.spec.input_dim() || self.test.dim() != c.spec.input_dim() {
            return Err(FedCalError::DimensionMismatch {
                context: "dataset features vs model input",
                expected: c.spec.input_dim(),
                actual: self.train.dim(),
            });
        }
        if self.train.num_classes > c.spec.num_classes() {
            return Err(FedCalError::DimensionMismatch {
                context: "dataset classes vs model outputs",
                expected: c.spec.num_classes(),
                actual: self.train.num_classes,
            });
        }
        if self.plan.clients.iter().any(Vec::is_empty) {
            return Err(FedCalError::Partition("partition has an empty client".into()));
        }
        Ok(())
    }

    pub fn run(&self) -> Result<ExperimentOutcome> {
        self.validate()?;
        let c = &self.config;
        let pool = if c.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(c.threads)
                    .build()
                    .map_err(|e| FedCalError::config("threads", e.to_string()))?,
            )
        } else {
            None
        };
        let mut clients: Vec<ClientState> = self
            .plan
            .clients
            .iter()
            .enumerate()
            .map(|(id, idx)| ClientState::new(id, idx.clone(), &c.spec, c.sgd))
            .collect();
        let total_clients = clients.len();
        let mut state = RoundState::new(init_model(&c.spec, init_seed(c.seed)));
        let mut history = Vec::with_capacity(c.rounds);

        for round in 1..=c.rounds {
            let started = Instant::now();
            let participants = select_participants(c.seed, round, total_clients, c.participation);
            let mut selected = vec![false; total_clients];
            for &p in &participants {
                selected[p] = true;
            }
            let round_state = &state;
            let train_one = |client: &mut ClientState| {
                client_opt(
                    c.algorithm,
                    round_state,
                    client,
                    self.train,
                    &c.policy,
                    self.similarity.as_ref(),
                    c.local,
                    client_seed(c.seed, round, client.id),
                )
            };
            let results: Vec<Result<ClientUpdate>> = match &pool {
                Some(pool) => pool.install(|| {
                    clients
                        .par_iter_mut()
                        .filter(|cl| selected[cl.id])
                        .map(train_one)
                        .collect()
                }),
                None => clients.iter_mut().filter(|cl| selected[cl.id]).map(train_one).collect(),
            };
            let updates = results.into_iter().collect::<Result<Vec<_>>>()?;

            let total: usize = updates.iter().map(|u| u.samples).sum();
            let weights: Vec<f64> = updates.iter().map(|u| u.samples as f64 / total as f64).collect();
            let weights = renormalize(weights);
            state = server_opt(c.algorithm, &state, &updates, &weights, total_clients)?;

            let report = evaluate(&state.global, self.test, c.bins)?;
            let train_logits = predict_logits(&state.global, self.train.features.view())?;
            let train_loss = cross_entropy(&softmax(&train_logits), &self.train.labels).loss;
            let stats: Vec<ClientRoundStat> = updates
                .iter()
                .map(|u| ClientRoundStat {
                    client: u.client,
                    samples: u.samples,
                    tau: u.tau,
                    delta_norm: u.delta.norm(),
                    mean_beta: u.betas.iter().sum::<f64>() / u.betas.len() as f64,
                })
                .collect();
            let mean_beta = stats.iter().map(|s| s.mean_beta).sum::<f64>() / stats.len() as f64;
            history.push(RoundRecord {
                round,
                test_accuracy: report.accuracy,
                ece: report.ece,
                sce: report.sce,
                mean_beta,
                train_loss,
                wall_ms: if c.measure_wall_clock {
                    started.elapsed().as_secs_f64() * 1e3
                } else {
                    0.0
                },
                clients: stats,
            });
        }
        let final_report = evaluate(&state.global, self.test, c.bins)?;
        Ok(ExperimentOutcome {
            final_state: state,
            history,
            final_report,
        })
    }
}

/// Pushes the rounding residue of `Σ w = 1` onto the largest weight.
fn renormalize(mut weights: Vec<f64>) -> Vec<f64> {
    let residue = 1.0 - weights.iter().sum::<f64>();
    if residue != 0.0 {
        let largest = (0..weights.len())
            .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
            .unwrap();
        weights[largest] += residue;
    }
    weights
}
