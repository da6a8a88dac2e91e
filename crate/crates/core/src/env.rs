//! Particle order-dispatching environment.
//!
//! Orders are born each timestep around a drifting 2-D Gaussian mean, each
//! heading to a uniformly chosen neighbor of its source grid and priced at
//! `price_coefficient` times the center-to-center distance. Vehicles are
//! placed once at reset and only move by serving orders. Unserved orders
//! expire at the end of the timestep they were born in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    DestEncoding, GridId, GridTopology, Observation, Order, PriceNorm, TopologyKind, Vehicle,
    VehicleId, VehicleStatus,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftPath {
    /// Straight line bouncing off the grid boundary.
    LinearReflect,
    /// Fixed-radius circuit around the grid center.
    Circular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub topology: TopologyKind,
    pub width: usize,
    pub height: usize,
    pub horizon: u32,
    pub vehicle_count: usize,
    pub orders_per_step: usize,
    /// Standard deviation of order origins, in grid units.
    pub sigma: f64,
    /// Distance the Gaussian mean moves per timestep.
    pub drift_step: f64,
    pub drift_path: DriftPath,
    /// Initial heading of the linear path, degrees counter-clockwise from +x.
    pub drift_heading_deg: f64,
    /// Initial mean; defaults to the center of the grid.
    pub mu0: Option<[f64; 2]>,
    /// Radius of the circular path; defaults to 0.3 x the shorter side.
    pub drift_radius: Option<f64>,
    pub order_duration: u32,
    pub price_coefficient: f64,
    pub dest_encoding: DestEncoding,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            topology: TopologyKind::Square8,
            width: 10,
            height: 10,
            horizon: 144,
            vehicle_count: 50,
            orders_per_step: 100,
            sigma: 1.5,
            drift_step: 1.0,
            drift_path: DriftPath::LinearReflect,
            drift_heading_deg: 30.0,
            mu0: None,
            drift_radius: None,
            order_duration: 1,
            price_coefficient: 0.1,
            dest_encoding: DestEncoding::MeanCoords,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn topology(&self) -> Result<GridTopology> {
        GridTopology::new(self.topology, self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let topo = self.topology()?;
        if self.vehicle_count == 0 {
            return Err(Error::config("vehicle_count must be positive"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if self.order_duration == 0 {
            return Err(Error::config("order_duration must be at least 1"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.drift_step.is_finite() && self.drift_step >= 0.0) {
            return Err(Error::config(format!(
                "drift_step must be >= 0, got {}",
                self.drift_step
            )));
        }
        if !(self.price_coefficient.is_finite() && self.price_coefficient >= 0.0) {
            return Err(Error::config("price_coefficient must be >= 0"));
        }
        let total_orders = self.orders_per_step * self.horizon as usize;
        if self.vehicle_count >= total_orders {
            return Err(Error::config(format!(
                "vehicle_count {} must be below the {} orders generated per episode",
                self.vehicle_count, total_orders
            )));
        }
        if self.drift_path == DriftPath::Circular {
            let r = self.circle_radius(&topo);
            if self.drift_step > 2.0 * r {
                return Err(Error::config(format!(
                    "drift_step {} exceeds the circular path diameter {}",
                    self.drift_step,
                    2.0 * r
                )));
            }
        }
        Ok(())
    }

    fn circle_radius(&self, topo: &GridTopology) -> f64 {
        let e = topo.extent();
        self.drift_radius.unwrap_or(0.3 * e[0].min(e[1]))
    }

    pub fn price_norm(&self, topo: &GridTopology) -> PriceNorm {
        PriceNorm {
            max_price: self.price_coefficient * topo.max_neighbor_distance(),
            max_duration: self.order_duration,
        }
    }

    fn initial_drift(&self, topo: &GridTopology) -> DriftState {
        let e = topo.extent();
        let center = [e[0] / 2.0, e[1] / 2.0];
        match self.drift_path {
            DriftPath::LinearReflect => {
                let a = self.drift_heading_deg.to_radians();
                DriftState {
                    mu: self.mu0.unwrap_or(center),
                    heading: [a.cos(), a.sin()],
                    angle: 0.0,
                }
            }
            DriftPath::Circular => {
                let r = self.circle_radius(topo);
                let a = self.drift_heading_deg.to_radians();
                DriftState {
                    mu: [center[0] + r * a.cos(), center[1] + r * a.sin()],
                    heading: [0.0, 0.0],
                    angle: a,
                }
            }
        }
    }
}

/// Position of the order-generating Gaussian mean plus whatever the path
/// needs to continue from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftState {
    pub mu: [f64; 2],
    heading: [f64; 2],
    angle: f64,
}

fn inside(p: [f64; 2], extent: [f64; 2]) -> bool {
    (0.0..=extent[0]).contains(&p[0]) && (0.0..=extent[1]).contains(&p[1])
}

/// Moves the mean by exactly `cfg.drift_step`, keeping it inside the grid.
pub fn advance_mu(drift: &DriftState, cfg: &EnvConfig, topo: &GridTopology) -> DriftState {
    let d = cfg.drift_step;
    if d == 0.0 {
        return *drift;
    }
    let extent = topo.extent();
    match cfg.drift_path {
        DriftPath::LinearReflect => {
            let mu = drift.mu;
            let at = |v: [f64; 2]| [mu[0] + d * v[0], mu[1] + d * v[1]];
            let mut v = drift.heading;
            let p = at(v);
            if !(0.0..=extent[0]).contains(&p[0]) {
                v[0] = -v[0];
            }
            if !(0.0..=extent[1]).contains(&p[1]) {
                v[1] = -v[1];
            }
            let flips = [
                v,
                [-v[0], v[1]],
                [v[0], -v[1]],
                [-v[0], -v[1]],
            ];
            if let Some(&v) = flips.iter().find(|&&v| inside(at(v), extent)) {
                return DriftState {
                    mu: at(v),
                    heading: v,
                    angle: drift.angle,
                };
            }
            // Near a corner with a long step: rotate until the endpoint fits.
            let base = v[1].atan2(v[0]);
            for k in 1..360 {
                for sign in [1.0, -1.0] {
                    let a = base + sign * (k as f64).to_radians();
                    let v = [a.cos(), a.sin()];
                    if inside(at(v), extent) {
                        return DriftState {
                            mu: at(v),
                            heading: v,
                            angle: drift.angle,
                        };
                    }
                }
            }
            log::warn!("drift step {d} does not fit inside the grid from {mu:?}; mean kept");
            *drift
        }
        DriftPath::Circular => {
            let r = cfg.circle_radius(topo);
            let angle = drift.angle + 2.0 * (d / (2.0 * r)).min(1.0).asin();
            let center = [extent[0] / 2.0, extent[1] / 2.0];
            DriftState {
                mu: [center[0] + r * angle.cos(), center[1] + r * angle.sin()],
                heading: drift.heading,
                angle,
            }
        }
    }
}

/// Which order a vehicle takes: an index into its grid's live orders, or the
/// virtual "stay" order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrderChoice {
    Real(usize),
    Virtual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatch {
    pub vehicle: VehicleId,
    pub choice: OrderChoice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub timestep: u32,
    pub vehicles: Vec<Vehicle>,
    /// Real orders born this timestep, per grid.
    pub live_orders: Vec<Vec<Order>>,
    pub drift: DriftState,
    pub orders_generated: u64,
    pub orders_served: u64,
    pub income: f64,
    next_order_id: u64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServedOrder {
    pub vehicle: VehicleId,
    pub order: Order,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Timestep at which the dispatch decisions were taken.
    pub timestep: u32,
    /// Reward per vehicle, indexed by vehicle id.
    pub rewards: Vec<f64>,
    pub served: Vec<ServedOrder>,
    pub expired: Vec<Order>,
    /// Observations of every grid at the next timestep; empty once done.
    pub observations: Vec<Observation>,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub adi: f64,
    pub orr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    Generated,
    Served,
    Expired,
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestep: u32,
    pub grid: usize,
    pub event: TraceEvent,
    pub order_id: u64,
    pub source: usize,
    pub dest: usize,
    pub duration: u32,
    pub price: f64,
    pub vehicle: Option<usize>,
}

impl TraceRecord {
    fn new(t: u32, event: TraceEvent, o: &Order, vehicle: Option<VehicleId>) -> Self {
        Self {
            timestep: t,
            grid: o.source.0,
            event,
            order_id: o.id,
            source: o.source.0,
            dest: o.dest.0,
            duration: o.duration,
            price: o.price,
            vehicle: vehicle.map(|v| v.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DispatchEnv {
    cfg: EnvConfig,
    topo: GridTopology,
    state: EnvState,
    trace: Option<Vec<TraceRecord>>,
}

impl DispatchEnv {
    /// Builds the environment at t = 0: vehicles placed around the initial
    /// mean and the first batch of orders generated.
    pub fn reset(cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let topo = cfg.topology()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let drift = cfg.initial_drift(&topo);
        let vehicles = (0..cfg.vehicle_count)
            .map(|i| Vehicle {
                id: VehicleId(i),
                location: sample_grid(&mut rng, drift.mu, cfg.sigma, &topo),
                status: VehicleStatus::Idle,
                available_at: 0,
            })
            .collect();
        let mut env = Self {
            cfg: cfg.clone(),
            state: EnvState {
                timestep: 0,
                vehicles,
                live_orders: vec![Vec::new(); topo.grid_count()],
                drift,
                orders_generated: 0,
                orders_served: 0,
                income: 0.0,
                next_order_id: 0,
                rng,
            },
            topo,
            trace: None,
        };
        env.populate_orders();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &GridTopology {
        &self.topo
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn timestep(&self) -> u32 {
        self.state.timestep
    }

    pub fn is_done(&self) -> bool {
        self.state.timestep >= self.cfg.horizon
    }

    /// Starts recording trace records; the orders already live are recorded
    /// as generated.
    pub fn enable_trace(&mut self) {
        let t = self.state.timestep;
        let records = self
            .state
            .live_orders
            .iter()
            .flatten()
            .map(|o| TraceRecord::new(t, TraceEvent::Generated, o, None))
            .collect();
        self.trace = Some(records);
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn live_orders(&self, g: GridId) -> &[Order] {
        &self.state.live_orders[g.0]
    }

    /// Idle vehicle ids grouped by grid, ascending within each grid.
    pub fn idle_by_grid(&self) -> Vec<Vec<VehicleId>> {
        let mut out = vec![Vec::new(); self.topo.grid_count()];
        for v in &self.state.vehicles {
            if v.status == VehicleStatus::Idle {
                out[v.location.0].push(v.id);
            }
        }
        out
    }

    pub fn observe(&self) -> Vec<Observation> {
        let idle = self.idle_by_grid();
        self.topo
            .grids()
            .map(|g| {
                Observation::new(
                    g,
                    idle[g.0].len(),
                    &self.state.live_orders[g.0],
                    &self.topo,
                    self.cfg.dest_encoding,
                )
            })
            .collect()
    }

    /// Samples this timestep's orders into `live_orders`.
    fn populate_orders(&mut self) {
        let orders = generate_orders(&mut self.state, &self.cfg, &self.topo);
        let t = self.state.timestep;
        for o in orders {
            if let Some(trace) = self.trace.as_mut() {
                trace.push(TraceRecord::new(t, TraceEvent::Generated, &o, None));
            }
            self.state.live_orders[o.source.0].push(o);
        }
    }

    /// Applies one round of dispatch decisions. Idle vehicles without an
    /// entry stay in place. The whole assignment is validated before any
    /// state changes.
    pub fn step(&mut self, dispatches: &[Dispatch]) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::contract("step called on a finished episode"));
        }
        let t = self.state.timestep;
        let n_vehicles = self.state.vehicles.len();
        let mut seen_vehicle = vec![false; n_vehicles];
        let mut taken: Vec<Vec<bool>> = self
            .state
            .live_orders
            .iter()
            .map(|os| vec![false; os.len()])
            .collect();
        for d in dispatches {
            let v = self
                .state
                .vehicles
                .get(d.vehicle.0)
                .ok_or_else(|| Error::contract(format!("unknown vehicle {}", d.vehicle.0)))?;
            if std::mem::replace(&mut seen_vehicle[d.vehicle.0], true) {
                return Err(Error::contract(format!(
                    "vehicle {} dispatched twice",
                    d.vehicle.0
                )));
            }
            if v.status != VehicleStatus::Idle {
                return Err(Error::contract(format!(
                    "vehicle {} is serving until t={}",
                    v.id.0, v.available_at
                )));
            }
            if let OrderChoice::Real(k) = d.choice {
                let slot = taken[v.location.0].get_mut(k).ok_or_else(|| {
                    Error::contract(format!(
                        "vehicle {} references dead order {k} in grid {}",
                        v.id.0, v.location.0
                    ))
                })?;
                if std::mem::replace(slot, true) {
                    return Err(Error::contract(format!(
                        "order {k} in grid {} assigned twice",
                        v.location.0
                    )));
                }
            }
        }

        let mut rewards = vec![0.0; n_vehicles];
        let mut served = Vec::new();
        for d in dispatches {
            let OrderChoice::Real(k) = d.choice else {
                continue;
            };
            let vehicle = &mut self.state.vehicles[d.vehicle.0];
            let order = self.state.live_orders[vehicle.location.0][k].clone();
            vehicle.status = VehicleStatus::Serving;
            vehicle.available_at = t + order.duration;
            vehicle.location = order.dest;
            rewards[d.vehicle.0] = order.price;
            self.state.income += order.price;
            self.state.orders_served += 1;
            if let Some(trace) = self.trace.as_mut() {
                trace.push(TraceRecord::new(t, TraceEvent::Served, &order, Some(d.vehicle)));
            }
            served.push(ServedOrder {
                vehicle: d.vehicle,
                order,
            });
        }
        let mut expired = Vec::new();
        for (g, orders) in self.state.live_orders.iter_mut().enumerate() {
            for (k, o) in orders.drain(..).enumerate() {
                if !taken[g][k] {
                    if let Some(trace) = self.trace.as_mut() {
                        trace.push(TraceRecord::new(t, TraceEvent::Expired, &o, None));
                    }
                    expired.push(o);
                }
            }
        }

        self.state.timestep += 1;
        let now = self.state.timestep;
        for v in &mut self.state.vehicles {
            if v.status == VehicleStatus::Serving && v.available_at <= now {
                v.status = VehicleStatus::Idle;
            }
        }
        let done = self.is_done();
        let observations = if done {
            Vec::new()
        } else {
            self.state.drift = advance_mu(&self.state.drift, &self.cfg, &self.topo);
            self.populate_orders();
            self.observe()
        };
        Ok(StepOutcome {
            timestep: t,
            rewards,
            served,
            expired,
            observations,
            done,
        })
    }

    pub fn metrics(&self) -> Metrics {
        metrics(&self.state)
    }
}

/// Episode-level income and response rate.
pub fn metrics(state: &EnvState) -> Metrics {
    let orr = if state.orders_generated == 0 {
        0.0
    } else {
        state.orders_served as f64 / state.orders_generated as f64
    };
    Metrics {
        adi: state.income,
        orr,
    }
}

fn sample_grid(rng: &mut ChaCha8Rng, mu: [f64; 2], sigma: f64, topo: &GridTopology) -> GridId {
    let zx: f64 = rng.sample(StandardNormal);
    let zy: f64 = rng.sample(StandardNormal);
    topo.locate(mu[0] + sigma * zx, mu[1] + sigma * zy)
}

/// Draws `orders_per_step` real orders around the current mean. Advances the
/// state's RNG and order-id counter.
pub fn generate_orders(state: &mut EnvState, cfg: &EnvConfig, topo: &GridTopology) -> Vec<Order> {
    let mu = state.drift.mu;
    let mut out = Vec::with_capacity(cfg.orders_per_step);
    for _ in 0..cfg.orders_per_step {
        let source = sample_grid(&mut state.rng, mu, cfg.sigma, topo);
        let ns = &topo.neighbors(source).expect("sampled grid is in range");
        let dest = ns[state.rng.random_range(0..ns.len())];
        out.push(Order {
            id: state.next_order_id,
            source,
            dest,
            duration: cfg.order_duration,
            price: cfg.price_coefficient * topo.distance(source, dest),
            is_virtual: false,
        });
        state.next_order_id += 1;
    }
    state.orders_generated += out.len() as u64;
    out
}
