//! Per-grid order selection.
//!
//! Every idle vehicle in a grid shares one observation and one action list:
//! the grid's live real orders followed by the virtual "stay" order. Q is
//! evaluated once per action; vehicles then pick one after another, each
//! from the real orders still unclaimed plus the virtual order, which is
//! never used up.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Dispatch, OrderChoice};
use crate::error::{Error, Result};
use crate::grid::{ActionFeature, GridId, VehicleId};
use crate::qnet::{QNetwork, Scratch};

/// Softmax of `q / tau`, computed with the maximum subtracted.
pub fn boltzmann_probs(q: &[f64], tau: f64) -> Result<Vec<f64>> {
    if q.is_empty() {
        return Err(Error::domain("Boltzmann policy over an empty action set"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!("temperature must be > 0, got {tau}")));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Q values"));
    }
    Ok(softmax(q, tau))
}

pub(crate) fn softmax(q: &[f64], tau: f64) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = q.iter().map(|v| ((v - max) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PolicyMode {
    Boltzmann { tau: f64 },
    /// Highest Q first; the same as picking the top-m orders.
    Greedy,
}

/// One vehicle's decision and the action indices it chose among.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchChoice {
    pub vehicle: VehicleId,
    /// Index into the grid's action list (virtual order last).
    pub action: usize,
    pub candidates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridDecision {
    pub grid: GridId,
    pub assignments: Vec<DispatchChoice>,
    /// Always empty: the virtual order guarantees every vehicle a choice.
    pub leftover: Vec<VehicleId>,
}

impl GridDecision {
    /// Converts to environment dispatches given the number of real orders in
    /// the grid.
    pub fn dispatches(&self, real_orders: usize) -> impl Iterator<Item = Dispatch> + '_ {
        self.assignments.iter().map(move |c| Dispatch {
            vehicle: c.vehicle,
            choice: if c.action < real_orders {
                OrderChoice::Real(c.action)
            } else {
                OrderChoice::Virtual
            },
        })
    }
}

/// Assigns `idle` vehicles given one Q value per action; the last entry of
/// `q` is the virtual order.
pub fn assign_by_q<R: Rng + ?Sized>(
    grid: GridId,
    q: &[f64],
    idle: &[VehicleId],
    mode: PolicyMode,
    rng: &mut R,
) -> Result<GridDecision> {
    if q.is_empty() {
        return Err(Error::domain("action list must contain the virtual order"));
    }
    if let PolicyMode::Boltzmann { tau } = mode {
        boltzmann_probs(q, tau)?;
    }
    let virtual_idx = q.len() - 1;
    let mut remaining: Vec<usize> = (0..q.len()).collect();
    let mut assignments = Vec::with_capacity(idle.len());
    let mut cand_q = Vec::with_capacity(q.len());
    for &vehicle in idle {
        let action = if remaining.len() == 1 {
            virtual_idx
        } else {
            cand_q.clear();
            cand_q.extend(remaining.iter().map(|&k| q[k]));
            let pos = match mode {
                PolicyMode::Greedy => argmax(&cand_q),
                PolicyMode::Boltzmann { tau } => sample(&softmax(&cand_q, tau), rng),
            };
            remaining[pos]
        };
        assignments.push(DispatchChoice {
            vehicle,
            action,
            candidates: remaining.clone(),
        });
        if action != virtual_idx {
            remaining.retain(|&k| k != action);
        }
    }
    Ok(GridDecision {
        grid,
        assignments,
        leftover: Vec::new(),
    })
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

fn sample<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Evaluates Q for every action of a grid (state embedded once) and assigns
/// its idle vehicles. `actions` must end with the virtual order.
#[allow(clippy::too_many_arguments)]
pub fn select_orders_for_grid<R: Rng + ?Sized>(
    grid: GridId,
    state: &[f64],
    actions: &[ActionFeature],
    idle: &[VehicleId],
    net: &QNetwork,
    mode: PolicyMode,
    rng: &mut R,
    scratch: &mut Scratch,
) -> Result<GridDecision> {
    if actions.is_empty() {
        return Err(Error::domain("action list must contain the virtual order"));
    }
    if idle.is_empty() {
        return Ok(GridDecision {
            grid,
            assignments: Vec::new(),
            leftover: Vec::new(),
        });
    }
    let q = if actions.len() == 1 {
        vec![0.0]
    } else {
        net.check_inputs(state, actions[0].as_slice())?;
        net.forward_actions(state, actions.iter().map(|a| a.as_slice()), scratch)
    };
    assign_by_q(grid, &q, idle, mode, rng)
}

/// Nearest-order dispatch, which within a grid is uniform random matching:
/// vehicles take distinct real orders in random order and stay once the
/// real orders run out.
pub fn nod_policy<R: Rng + ?Sized>(
    grid: GridId,
    real_orders: usize,
    idle: &[VehicleId],
    rng: &mut R,
) -> GridDecision {
    let mut perm: Vec<usize> = (0..real_orders).collect();
    perm.shuffle(rng);
    let virtual_idx = real_orders;
    let mut remaining: Vec<usize> = (0..=real_orders).collect();
    let assignments = idle
        .iter()
        .enumerate()
        .map(|(k, &vehicle)| {
            let action = perm.get(k).copied().unwrap_or(virtual_idx);
            let candidates = remaining.clone();
            if action != virtual_idx {
                remaining.retain(|&r| r != action);
            }
            DispatchChoice {
                vehicle,
                action,
                candidates,
            }
        })
        .collect();
    GridDecision {
        grid,
        assignments,
        leftover: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vehicles(n: usize) -> Vec<VehicleId> {
        (0..n).map(VehicleId).collect()
    }

    #[test]
    fn boltzmann_known_values() {
        assert_eq!(boltzmann_probs(&[1.0, 1.0], 1.0).unwrap(), vec![0.5, 0.5]);
        let p = boltzmann_probs(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(boltzmann_probs(&[], 1.0).is_err());
        assert!(boltzmann_probs(&[1.0], 0.0).is_err());
    }

    #[test]
    fn low_temperature_concentrates() {
        let p = boltzmann_probs(&[0.3, 0.4, 0.2], 1e-3).unwrap();
        assert!(p[1] >= 0.999);
    }

    #[test]
    fn no_vehicles_no_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = assign_by_q(GridId(0), &[0.1, 0.0], &[], PolicyMode::Greedy, &mut rng).unwrap();
        assert!(d.assignments.is_empty());
        let n = nod_policy(GridId(0), 3, &[], &mut rng);
        assert!(n.assignments.is_empty());
    }

    #[test]
    fn only_virtual_forces_stay() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = assign_by_q(
            GridId(4),
            &[0.7],
            &vehicles(3),
            PolicyMode::Boltzmann { tau: 1.0 },
            &mut rng,
        )
        .unwrap();
        assert!(d.assignments.iter().all(|c| c.action == 0));
        assert!(d.leftover.is_empty());
    }

    #[test]
    fn greedy_takes_top_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = [0.9, 0.5, 0.1, 0.05];
        let d = assign_by_q(GridId(0), &q, &vehicles(2), PolicyMode::Greedy, &mut rng).unwrap();
        let taken: Vec<usize> = d.assignments.iter().map(|c| c.action).collect();
        assert_eq!(taken, vec![0, 1]);
        // more vehicles than orders: extra ones stay
        let d = assign_by_q(GridId(0), &q, &vehicles(5), PolicyMode::Greedy, &mut rng).unwrap();
        let taken: Vec<usize> = d.assignments.iter().map(|c| c.action).collect();
        assert_eq!(taken, vec![0, 1, 2, 3, 3]);
    }

    #[test]
    fn greedy_prefers_staying_over_bad_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = [0.9, -0.5, 0.1];
        let d = assign_by_q(GridId(0), &q, &vehicles(3), PolicyMode::Greedy, &mut rng).unwrap();
        let taken: Vec<usize> = d.assignments.iter().map(|c| c.action).collect();
        assert_eq!(taken, vec![0, 2, 2]);
    }

    #[test]
    fn boltzmann_never_double_assigns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q = [0.1, 0.4, 0.3, 0.2, 0.0];
            let d = assign_by_q(
                GridId(0),
                &q,
                &vehicles(6),
                PolicyMode::Boltzmann { tau: 1.0 },
                &mut rng,
            )
            .unwrap();
            let mut real: Vec<usize> = d.assignments.iter().map(|c| c.action).filter(|&a| a < 4).collect();
            let n = real.len();
            real.sort();
            real.dedup();
            assert_eq!(real.len(), n);
            for c in &d.assignments {
                assert!(c.candidates.contains(&c.action));
                assert!(c.candidates.contains(&4));
            }
        }
    }

    #[test]
    fn nod_serves_everything_when_fleet_suffices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = nod_policy(GridId(0), 3, &vehicles(5), &mut rng);
        let mut taken: Vec<usize> = d.assignments.iter().map(|c| c.action).collect();
        taken.sort();
        assert_eq!(taken, vec![0, 1, 2, 3, 3]);
    }

    #[test]
    fn dispatch_conversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = nod_policy(GridId(0), 1, &vehicles(2), &mut rng);
        let ds: Vec<Dispatch> = d.dispatches(1).collect();
        assert_eq!(ds[0].choice, OrderChoice::Real(0));
        assert_eq!(ds[1].choice, OrderChoice::Virtual);
    }
}
