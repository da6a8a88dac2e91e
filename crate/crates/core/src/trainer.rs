//! Replay buffer, TD targets, the combined TD + KL loss gradient and the
//! episode training loop.
//!
//! The loss for a batch `B` is
//!
//! ```text
//! L = mean_b (Q(s_b, a_b) − Q*_b)²  +  λ Σ_b k_b · π(a_b | s_b, A_b)
//! ```
//!
//! where `k_b` is the stored `∂D_KL/∂π` for the transition the vehicle took
//! and `π` is the Boltzmann policy over the actions it chose among. `Q*_b`
//! and `k_b` are constants; only the chosen action's `Q` carries gradient
//! through `π`, so the KL part contributes
//! `λ · k_b · π_b(1 − π_b)/τ · ∇θ Q(s_b, a_b)`.

use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{DispatchEnv, EnvConfig, Metrics, OrderChoice, TraceRecord};
use crate::error::{Error, Result};
use crate::grid::{
    encode_action, encode_observation, state_dim, ActionFeature, GridId, GridTopology, ObservationScale,
    Order, PriceNorm, VehicleStatus, ACTION_DIM,
};
use crate::kl::{smooth, DispatchFlow, GridDistribution, KlGradientField, DEFAULT_SMOOTHING};
use crate::policy::{argmax, nod_policy, select_orders_for_grid, softmax, GridDecision, PolicyMode};
use crate::qnet::{Architecture, Optimizer, OptimizerKind, QNetwork, Scratch};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Boltzmann-weighted expectation over the next action set: weights from
    /// the online network, values from the target network.
    Expectation,
    /// Online argmax, evaluated by the target network.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub lr: f64,
    /// Boltzmann temperature.
    pub tau: f64,
    /// Weight of the KL term.
    pub lambda: f64,
    pub tau_soft: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Experiences required before the first update.
    pub warmup: usize,
    pub updates_per_step: usize,
    pub target_mode: TargetMode,
    /// Smoothing applied to order and vehicle counts before comparing them.
    pub kl_epsilon: f64,
    /// When false, or when `lambda` is 0, the KL coefficient is never
    /// computed and the loss is the plain TD loss.
    pub kl_term: bool,
    pub embed: usize,
    pub hidden: [usize; 2],
    pub optimizer: OptimizerKind,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lr: 1e-3,
            tau: 1.0,
            lambda: 0.0,
            tau_soft: 0.01,
            batch_size: 32,
            buffer_capacity: 100_000,
            warmup: 1_000,
            updates_per_step: 4,
            target_mode: TargetMode::Greedy,
            kl_epsilon: DEFAULT_SMOOTHING,
            kl_term: true,
            embed: 16,
            hidden: [32, 16],
            optimizer: OptimizerKind::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("Boltzmann temperature must be > 0"));
        }
        if !(self.tau_soft > 0.0 && self.tau_soft <= 1.0) {
            return Err(Error::config(format!(
                "tau_soft {} outside (0, 1]",
                self.tau_soft
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be > 0"));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return Err(Error::config(
                "batch_size must be positive and no larger than buffer_capacity",
            ));
        }
        if !(self.kl_epsilon > 0.0) {
            return Err(Error::config("kl_epsilon must be > 0"));
        }
        Ok(())
    }

    fn kl_active(&self) -> bool {
        self.kl_term && self.lambda != 0.0
    }
}

/// Shared state and action list of one grid at one timestep. The virtual
/// order is always the last action.
#[derive(Debug, Clone, PartialEq)]
pub struct GridContext {
    pub grid: GridId,
    pub timestep: u32,
    pub state: Vec<f64>,
    pub actions: Vec<ActionFeature>,
}

impl GridContext {
    pub fn real_orders(&self) -> usize {
        self.actions.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub current: Arc<GridContext>,
    /// Index of the taken action in `current.actions`.
    pub action: usize,
    /// Indices of the actions available when the choice was made.
    pub available: Vec<usize>,
    /// Context the vehicle reached; `None` for terminal experiences.
    pub next: Option<Arc<GridContext>>,
    pub kl_coeff: f64,
    pub reward: f64,
    pub terminal: bool,
}

impl Experience {
    pub fn state(&self) -> &[f64] {
        &self.current.state
    }

    pub fn action_feature(&self) -> &[f64] {
        self.current.actions[self.action].as_slice()
    }

    pub fn available_actions(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.available.iter().map(|&k| self.current.actions[k].as_slice())
    }

    /// Position of the taken action inside `available`.
    pub fn available_position(&self) -> Option<usize> {
        self.available.iter().position(|&k| k == self.action)
    }
}

/// Fixed-capacity FIFO of experiences.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Experience>,
    capacity: usize,
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
            head: 0,
            inserted: 0,
        }
    }

    pub fn push(&mut self, exp: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(exp);
        } else {
            self.items[self.head] = exp;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items[self.head..].iter().chain(&self.items[..self.head])
    }

    /// Uniform sample without replacement; `None` until the buffer holds at
    /// least `batch_size` experiences.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Option<Vec<&Experience>> {
        if batch_size == 0 || self.items.len() < batch_size {
            return None;
        }
        Some(
            index::sample(rng, self.items.len(), batch_size)
                .into_iter()
                .map(|k| &self.items[k])
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdTarget {
    pub value: f64,
    /// `|Q(s, a) − Q*|` under the online network.
    pub residual: f64,
}

fn target_value(exp: &Experience, online: &QNetwork, target: &QNetwork, cfg: &TrainerConfig, sc: &mut Scratch) -> Result<f64> {
    if exp.terminal {
        return Ok(exp.reward);
    }
    let next = exp
        .next
        .as_ref()
        .filter(|n| !n.actions.is_empty())
        .ok_or_else(|| Error::contract("non-terminal experience without a next action set"))?;
    if cfg.gamma == 0.0 {
        return Ok(exp.reward);
    }
    let acts = || next.actions.iter().map(|a| a.as_slice());
    let future = if next.actions.len() == 1 {
        target.forward_with(&next.state, next.actions[0].as_slice(), sc)
    } else {
        let q_online = online.forward_actions(&next.state, acts(), sc);
        match cfg.target_mode {
            TargetMode::Greedy => {
                let k = argmax(&q_online);
                target.forward_with(&next.state, next.actions[k].as_slice(), sc)
            }
            TargetMode::Expectation => {
                let w = softmax(&q_online, cfg.tau);
                let q_target = target.forward_actions(&next.state, acts(), sc);
                w.iter().zip(&q_target).map(|(w, q)| w * q).sum()
            }
        }
    };
    Ok(exp.reward + cfg.gamma * future)
}

pub fn compute_target(exp: &Experience, online: &QNetwork, target: &QNetwork, cfg: &TrainerConfig) -> Result<TdTarget> {
    let mut sc = online.scratch();
    let value = target_value(exp, online, target, cfg, &mut sc)?;
    let q = online.forward_with(exp.state(), exp.action_feature(), &mut sc);
    Ok(TdTarget {
        value,
        residual: (q - value).abs(),
    })
}

/// Boltzmann probability of the taken action among the available ones and
/// its derivative with respect to that action's own Q value.
pub fn policy_sensitivity(exp: &Experience, online: &QNetwork, tau: f64, sc: &mut Scratch) -> Result<(f64, f64)> {
    let pos = exp
        .available_position()
        .ok_or_else(|| Error::contract("taken action is not in the available set"))?;
    if exp.available.len() == 1 {
        return Ok((1.0, 0.0));
    }
    let q = online.forward_actions(exp.state(), exp.available_actions(), sc);
    let pi = softmax(&q, tau)[pos];
    Ok((pi, pi * (1.0 - pi) / tau))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub grads: Vec<f64>,
    /// Mean squared TD residual over the batch.
    pub td_loss: f64,
    /// `Σ_b k_b · π_b` at the current parameters (0 when the term is off).
    pub kl_surrogate: f64,
}

pub fn loss_gradients(batch: &[&Experience], online: &QNetwork, target: &QNetwork, cfg: &TrainerConfig) -> Result<LossGradients> {
    let mut sc = online.scratch();
    let mut out = LossGradients {
        grads: vec![0.0; online.params().len()],
        td_loss: 0.0,
        kl_surrogate: 0.0,
    };
    loss_gradients_into(batch, online, target, cfg, &mut sc, &mut out)?;
    Ok(out)
}

fn loss_gradients_into(
    batch: &[&Experience],
    online: &QNetwork,
    target: &QNetwork,
    cfg: &TrainerConfig,
    sc: &mut Scratch,
    out: &mut LossGradients,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::contract("empty training batch"));
    }
    out.grads.iter_mut().for_each(|g| *g = 0.0);
    out.td_loss = 0.0;
    out.kl_surrogate = 0.0;
    let scale = 2.0 / batch.len() as f64;
    for exp in batch {
        let q_star = target_value(exp, online, target, cfg, sc)?;
        let mut kl_upstream = 0.0;
        if cfg.kl_active() && exp.kl_coeff != 0.0 {
            let (pi, dpi_dq) = policy_sensitivity(exp, online, cfg.tau, sc)?;
            out.kl_surrogate += exp.kl_coeff * pi;
            kl_upstream = cfg.lambda * exp.kl_coeff * dpi_dq;
        }
        let mut td = 0.0;
        online.accumulate_gradient_with(exp.state(), exp.action_feature(), &mut out.grads, sc, |q| {
            td = q - q_star;
            if kl_upstream == 0.0 {
                scale * td
            } else {
                scale * td + kl_upstream
            }
        });
        out.td_loss += td * td;
    }
    out.td_loss /= batch.len() as f64;
    if !out.td_loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss gradients"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub metrics: Metrics,
    pub mean_loss: f64,
    pub updates: usize,
    pub skipped_updates: usize,
    pub experiences: usize,
}

/// Flow and order distribution behind the KL coefficients of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct KlSnapshot {
    pub timestep: u32,
    pub flow: DispatchFlow,
    pub p: GridDistribution,
    /// `(source, dest, stored coefficient)` per dispatched vehicle.
    pub transitions: Vec<(usize, usize, f64)>,
}

/// Encodes grid observations and orders for the network.
#[derive(Debug, Clone)]
pub struct Encoder {
    topo: GridTopology,
    norm: PriceNorm,
    scale: ObservationScale,
}

impl Encoder {
    pub fn new(env: &EnvConfig) -> Result<Self> {
        let topo = env.topology()?;
        Ok(Self {
            norm: env.price_norm(&topo),
            scale: ObservationScale {
                idle: (env.vehicle_count as f64 / 10.0).max(1.0),
                orders: (env.orders_per_step as f64 / 10.0).max(1.0),
            },
            topo,
        })
    }

    pub fn architecture(env: &EnvConfig, cfg: &TrainerConfig) -> Result<Architecture> {
        let topo = env.topology()?;
        Architecture::new(state_dim(&topo, env.dest_encoding), ACTION_DIM, cfg.embed, cfg.hidden)
    }

    /// Context for `grid` at the environment's current timestep.
    pub fn context(&self, env: &DispatchEnv, grid: GridId, idle: usize) -> GridContext {
        let orders = env.live_orders(grid);
        let obs = crate::grid::Observation::new(grid, idle, orders, &self.topo, env.config().dest_encoding);
        let mut actions: Vec<ActionFeature> = orders
            .iter()
            .map(|o| encode_action(o, &self.topo, self.norm))
            .collect();
        actions.push(encode_action(&Order::virtual_at(grid), &self.topo, self.norm));
        GridContext {
            grid,
            timestep: env.timestep(),
            state: encode_observation(&obs, &self.topo, self.scale),
            actions,
        }
    }
}

struct Pending {
    current: Arc<GridContext>,
    action: usize,
    available: Vec<usize>,
    kl_coeff: f64,
    reward: f64,
}

/// Online and target networks, optimizer and replay buffer for one training
/// run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainerConfig,
    env: EnvConfig,
    encoder: Encoder,
    pub online: QNetwork,
    pub target: QNetwork,
    pub optimizer: Optimizer,
    pub buffer: ReplayBuffer,
    replay_rng: ChaCha8Rng,
    seed: u64,
    episodes: u64,
    record_kl: bool,
    kl_log: Vec<KlSnapshot>,
}

impl Trainer {
    pub fn new(env: &EnvConfig, cfg: &TrainerConfig, seed: u64) -> Result<Self> {
        env.validate()?;
        cfg.validate()?;
        let arch = Encoder::architecture(env, cfg)?;
        let online = QNetwork::new(arch, seed::derive(seed, &[stream::NET_INIT]));
        Ok(Self {
            cfg: cfg.clone(),
            env: env.clone(),
            encoder: Encoder::new(env)?,
            target: online.clone(),
            optimizer: Optimizer::new(cfg.optimizer, cfg.lr, arch.param_count()),
            online,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            replay_rng: seed::rng(seed, &[stream::REPLAY]),
            seed,
            episodes: 0,
            record_kl: false,
            kl_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    /// Keeps a `KlSnapshot` per step of subsequent episodes.
    pub fn record_kl(&mut self, on: bool) {
        self.record_kl = on;
    }

    pub fn take_kl_log(&mut self) -> Vec<KlSnapshot> {
        std::mem::take(&mut self.kl_log)
    }

    /// Environment seed of training episode `episode`.
    pub fn episode_seed(&self, episode: u64) -> u64 {
        seed::derive(self.seed, &[stream::ENV_TRAIN, episode])
    }

    /// Runs one training episode with Boltzmann exploration, storing
    /// experiences and updating after every environment step once warm.
    pub fn train_epoch(&mut self) -> Result<EpisodeReport> {
        let env_seed = self.episode_seed(self.episodes);
        let mut env = DispatchEnv::reset(&EnvConfig {
            seed: env_seed,
            ..self.env.clone()
        })?;
        let horizon = self.env.horizon;
        let grids = env.topology().grid_count();
        let mode = PolicyMode::Boltzmann { tau: self.cfg.tau };
        let mut pending: Vec<Option<Pending>> = (0..self.env.vehicle_count).map(|_| None).collect();
        let mut sc = self.online.scratch();
        let mut lg = LossGradients {
            grads: vec![0.0; self.online.params().len()],
            td_loss: 0.0,
            kl_surrogate: 0.0,
        };
        let mut report = EpisodeReport {
            metrics: Metrics { adi: 0.0, orr: 0.0 },
            mean_loss: 0.0,
            updates: 0,
            skipped_updates: 0,
            experiences: 0,
        };
        let mut loss_sum = 0.0;

        loop {
            let t = env.timestep();
            let idle = env.idle_by_grid();
            let mut contexts: Vec<Option<Arc<GridContext>>> = vec![None; grids];
            for g in env.topology().grids() {
                if !idle[g.0].is_empty() {
                    contexts[g.0] = Some(Arc::new(self.encoder.context(&env, g, idle[g.0].len())));
                }
            }
            for (g, vehicles) in idle.iter().enumerate() {
                for v in vehicles {
                    if let Some(p) = pending[v.0].take() {
                        self.buffer.push(Experience {
                            current: p.current,
                            action: p.action,
                            available: p.available,
                            next: contexts[g].clone(),
                            kl_coeff: p.kl_coeff,
                            reward: p.reward,
                            terminal: false,
                        });
                        report.experiences += 1;
                    }
                }
            }

            let mut decisions: Vec<GridDecision> = Vec::new();
            for (g, ctx) in contexts.iter().enumerate() {
                let Some(ctx) = ctx else { continue };
                let mut rng = seed::rng(env_seed, &[stream::POLICY, t as u64, g as u64]);
                decisions.push(select_orders_for_grid(
                    GridId(g),
                    &ctx.state,
                    &ctx.actions,
                    &idle[g],
                    &self.online,
                    mode,
                    &mut rng,
                    &mut sc,
                )?);
            }
            let dispatches: Vec<_> = decisions
                .iter()
                .flat_map(|d| d.dispatches(contexts[d.grid.0].as_ref().unwrap().real_orders()))
                .collect();
            let dests: Vec<usize> = dispatches
                .iter()
                .map(|d| {
                    let here = env.state().vehicles[d.vehicle.0].location;
                    match d.choice {
                        OrderChoice::Real(k) => env.live_orders(here)[k].dest.0,
                        OrderChoice::Virtual => here.0,
                    }
                })
                .collect();
            let sources: Vec<usize> = dispatches
                .iter()
                .map(|d| env.state().vehicles[d.vehicle.0].location.0)
                .collect();

            let outcome = env.step(&dispatches)?;

            let field = if self.cfg.kl_active() && !outcome.done {
                let flow = DispatchFlow::from_moves(grids, sources.iter().copied().zip(dests.iter().copied()))?;
                let counts: Vec<f64> = env.state().live_orders.iter().map(|os| os.len() as f64).collect();
                let p = smooth(&counts, self.cfg.kl_epsilon)?;
                let field = KlGradientField::new(&flow, &p, self.cfg.kl_epsilon)?;
                if self.record_kl {
                    self.kl_log.push(KlSnapshot {
                        timestep: t,
                        transitions: sources
                            .iter()
                            .zip(&dests)
                            .map(|(&j, &i)| (j, i, field.coefficient(j, i)))
                            .collect(),
                        flow,
                        p,
                    });
                }
                Some(field)
            } else {
                None
            };

            let mut k = 0;
            for d in &decisions {
                let ctx = contexts[d.grid.0].as_ref().unwrap();
                for choice in &d.assignments {
                    let (j, i) = (sources[k], dests[k]);
                    k += 1;
                    let vehicle = &env.state().vehicles[choice.vehicle.0];
                    let p = Pending {
                        current: Arc::clone(ctx),
                        action: choice.action,
                        available: choice.candidates.clone(),
                        kl_coeff: field.as_ref().map_or(0.0, |f| f.coefficient(j, i)),
                        reward: outcome.rewards[choice.vehicle.0],
                    };
                    let arrives = if vehicle.status == VehicleStatus::Idle {
                        env.timestep()
                    } else {
                        vehicle.available_at
                    };
                    if outcome.done || arrives >= horizon {
                        self.buffer.push(Experience {
                            current: p.current,
                            action: p.action,
                            available: p.available,
                            next: None,
                            kl_coeff: p.kl_coeff,
                            reward: p.reward,
                            terminal: true,
                        });
                        report.experiences += 1;
                    } else {
                        pending[choice.vehicle.0] = Some(p);
                    }
                }
            }

            if self.buffer.len() >= self.cfg.warmup.max(self.cfg.batch_size) {
                for _ in 0..self.cfg.updates_per_step {
                    match self.update(&mut sc, &mut lg) {
                        Ok(()) => {
                            report.updates += 1;
                            loss_sum += lg.td_loss;
                        }
                        Err(Error::NonFinite(what)) => {
                            log::warn!("skipping update with non-finite {what}");
                            report.skipped_updates += 1;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            if outcome.done {
                break;
            }
        }

        self.episodes += 1;
        report.metrics = env.metrics();
        report.mean_loss = if report.updates > 0 {
            loss_sum / report.updates as f64
        } else {
            0.0
        };
        Ok(report)
    }

    fn update(&mut self, sc: &mut Scratch, lg: &mut LossGradients) -> Result<()> {
        let Some(batch) = self.buffer.sample_batch(self.cfg.batch_size, &mut self.replay_rng) else {
            return Ok(());
        };
        loss_gradients_into(&batch, &self.online, &self.target, &self.cfg, sc, lg)?;
        self.optimizer.apply_update(&mut self.online, &lg.grads)?;
        self.target.soft_update_from(&self.online, self.cfg.tau_soft)
    }

    /// Greedy evaluation episode on the given environment seed; no learning.
    pub fn evaluate(&self, env_seed: u64) -> Result<Metrics> {
        let env = EnvConfig {
            seed: env_seed,
            ..self.env.clone()
        };
        Ok(run_episode(&env, EvalPolicy::Learned {
            net: &self.online,
            mode: PolicyMode::Greedy,
        }, false)?
        .0)
    }
}

/// Policy driving an episode without learning.
#[derive(Debug, Clone, Copy)]
pub enum EvalPolicy<'a> {
    Learned { net: &'a QNetwork, mode: PolicyMode },
    Nod,
}

/// Plays one episode, optionally recording a trace. Per-grid randomness is
/// derived from the environment seed.
pub fn run_episode(env_cfg: &EnvConfig, policy: EvalPolicy<'_>, trace: bool) -> Result<(Metrics, Vec<TraceRecord>)> {
    let mut env = DispatchEnv::reset(env_cfg)?;
    if trace {
        env.enable_trace();
    }
    let encoder = Encoder::new(env_cfg)?;
    let mut sc = match policy {
        EvalPolicy::Learned { net, .. } => Some(net.scratch()),
        EvalPolicy::Nod => None,
    };
    let label = match policy {
        EvalPolicy::Learned { .. } => stream::POLICY,
        EvalPolicy::Nod => stream::NOD,
    };
    while !env.is_done() {
        let t = env.timestep();
        let idle = env.idle_by_grid();
        let mut dispatches = Vec::new();
        for g in env.topology().grids() {
            if idle[g.0].is_empty() {
                continue;
            }
            let mut rng = seed::rng(env_cfg.seed, &[label, t as u64, g.0 as u64]);
            let real = env.live_orders(g).len();
            let decision = match policy {
                EvalPolicy::Nod => nod_policy(g, real, &idle[g.0], &mut rng),
                EvalPolicy::Learned { net, mode } => {
                    let ctx = encoder.context(&env, g, idle[g.0].len());
                    select_orders_for_grid(g, &ctx.state, &ctx.actions, &idle[g.0], net, mode, &mut rng, sc.as_mut().unwrap())?
                }
            };
            dispatches.extend(decision.dispatches(real));
        }
        env.step(&dispatches)?;
    }
    let records = env.take_trace();
    Ok((env.metrics(), records))
}
