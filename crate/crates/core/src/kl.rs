//! Order/vehicle distribution matching.
//!
//! Idle vehicles `c[j]` are pushed through a row-stochastic dispatch matrix
//! `pi[j][i]`, giving next-step vehicle counts `n[i] = Σ_j c[j]·pi[j][i]`.
//! The divergence `D_KL(p ‖ q)` between the next-step order distribution `p`
//! and the (smoothed) vehicle distribution `q` is differentiated with respect
//! to every dispatch probability. With vehicle smoothing `ε`,
//! `q[i] = (n[i] + ε) / (N_vehicle + N·ε)` and
//!
//! ```text
//! ∂D_KL/∂pi[j][i] = c[j] · (1 / (N_vehicle + N·ε) − p[i] / (n[i] + ε))
//! ```
//!
//! which reduces to `c[j]·(1/N_vehicle − p[i]/n[i])` when `ε = 0`.

use crate::error::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 1e-3;

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GridDistribution {
    probs: Vec<f64>,
    epsilon: f64,
}

impl GridDistribution {
    /// Wraps an already-normalized probability vector.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::domain("distribution over zero grids"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::domain("probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs, epsilon: 0.0 })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `(counts + ε) / (Σ counts + N·ε)`.
pub fn smooth(counts: &[f64], epsilon: f64) -> Result<GridDistribution> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::domain(format!("smoothing epsilon must be > 0, got {epsilon}")));
    }
    if counts.is_empty() {
        return Err(Error::domain("distribution over zero grids"));
    }
    if counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::domain("counts must be finite and non-negative"));
    }
    let denom = counts.iter().sum::<f64>() + counts.len() as f64 * epsilon;
    Ok(GridDistribution {
        probs: counts.iter().map(|c| (c + epsilon) / denom).collect(),
        epsilon,
    })
}

/// Idle vehicles per grid and the probability of dispatching a vehicle from
/// grid `j` to grid `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchFlow {
    c: Vec<f64>,
    /// Row-major `N x N`.
    pi: Vec<f64>,
}

impl DispatchFlow {
    pub fn new(c: Vec<f64>, pi: Vec<f64>) -> Result<Self> {
        let n = c.len();
        if n == 0 || pi.len() != n * n {
            return Err(Error::Shape(format!(
                "dispatch matrix has {} entries for {n} grids",
                pi.len()
            )));
        }
        if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::domain("vehicle counts must be finite and non-negative"));
        }
        for (j, row) in pi.chunks_exact(n).enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::domain(format!("row {j} has invalid probabilities")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::domain(format!("row {j} sums to {s}, not 1")));
            }
        }
        Ok(Self { c, pi })
    }

    /// Empirical flow from realized moves `(from, to)` of the idle vehicles.
    /// Grids without idle vehicles get an identity row.
    pub fn from_moves(grids: usize, moves: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut c = vec![0.0; grids];
        let mut counts = vec![0.0; grids * grids];
        for (j, i) in moves {
            if j >= grids || i >= grids {
                return Err(Error::domain(format!("move {j}->{i} outside {grids} grids")));
            }
            c[j] += 1.0;
            counts[j * grids + i] += 1.0;
        }
        for (j, row) in counts.chunks_exact_mut(grids).enumerate() {
            if c[j] == 0.0 {
                row[j] = 1.0;
            } else {
                row.iter_mut().for_each(|v| *v /= c[j]);
            }
        }
        Ok(Self { c, pi: counts })
    }

    pub fn grids(&self) -> usize {
        self.c.len()
    }

    pub fn idle(&self) -> &[f64] {
        &self.c
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.pi[from * self.c.len() + to]
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// Copy with one dispatch probability replaced; rows are not
    /// renormalized.
    pub fn with_prob(&self, from: usize, to: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.pi[from * self.c.len() + to] = value;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowDerived {
    /// Vehicles arriving at each grid.
    pub n: Vec<f64>,
    pub n_vehicle: f64,
    /// `n / n_vehicle`.
    pub q: Vec<f64>,
}

pub fn vehicle_distribution(flow: &DispatchFlow) -> Result<FlowDerived> {
    let total: f64 = flow.c.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("empty fleet: no idle vehicles to dispatch"));
    }
    let n = arrivals(flow);
    let n_vehicle: f64 = n.iter().sum();
    let q = n.iter().map(|v| v / n_vehicle).collect();
    Ok(FlowDerived { n, n_vehicle, q })
}

fn arrivals(flow: &DispatchFlow) -> Vec<f64> {
    let grids = flow.c.len();
    let mut n = vec![0.0; grids];
    for (cj, row) in flow.c.iter().zip(flow.pi.chunks_exact(grids)) {
        if *cj != 0.0 {
            for (ni, p) in n.iter_mut().zip(row) {
                *ni += cj * p;
            }
        }
    }
    n
}

/// `Σ p_i ln(p_i / q_i)`; terms with `p_i = 0` contribute nothing.
pub fn kl_divergence(p: &GridDistribution, q: &GridDistribution) -> Result<f64> {
    kl_divergence_raw(&p.probs, &q.probs)
}

pub fn kl_divergence_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions over {} and {} grids",
            p.len(),
            q.len()
        )));
    }
    let mut d = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::domain(format!(
                "q[{i}] = 0 where p[{i}] = {pi}; smooth before comparing"
            )));
        }
        d += pi * (pi / qi).ln();
    }
    Ok(d)
}

/// `D_KL(p ‖ q(pi))` with vehicle counts smoothed by `vehicle_epsilon`
/// before normalizing.
pub fn flow_divergence(flow: &DispatchFlow, p: &GridDistribution, vehicle_epsilon: f64) -> Result<f64> {
    let n = arrivals(flow);
    if vehicle_epsilon > 0.0 {
        kl_divergence(p, &smooth(&n, vehicle_epsilon)?)
    } else {
        let total: f64 = n.iter().sum();
        if total <= 0.0 {
            return Err(Error::domain("empty fleet: no idle vehicles to dispatch"));
        }
        let q: Vec<f64> = n.iter().map(|v| v / total).collect();
        kl_divergence_raw(&p.probs, &q)
    }
}

/// Precomputed pieces of `∂D_KL/∂pi`, so single entries cost O(1).
#[derive(Debug, Clone, PartialEq)]
pub struct KlGradientField {
    c: Vec<f64>,
    /// `n[i] + ε`
    n_smoothed: Vec<f64>,
    /// `N_vehicle + N·ε`
    total: f64,
    p: Vec<f64>,
}

impl KlGradientField {
    pub fn new(flow: &DispatchFlow, p: &GridDistribution, vehicle_epsilon: f64) -> Result<Self> {
        if p.len() != flow.grids() {
            return Err(Error::Shape(format!(
                "order distribution over {} grids, flow over {}",
                p.len(),
                flow.grids()
            )));
        }
        if !(vehicle_epsilon >= 0.0 && vehicle_epsilon.is_finite()) {
            return Err(Error::domain("vehicle smoothing must be >= 0"));
        }
        let derived = vehicle_distribution(flow)?;
        let n_smoothed: Vec<f64> = derived.n.iter().map(|v| v + vehicle_epsilon).collect();
        for (i, (&ni, &pi)) in n_smoothed.iter().zip(&p.probs).enumerate() {
            if ni <= 0.0 && pi > 0.0 {
                return Err(Error::domain(format!(
                    "no vehicles reach grid {i} but p[{i}] = {pi}; smooth the vehicle counts"
                )));
            }
        }
        Ok(Self {
            c: flow.c.clone(),
            total: derived.n_vehicle + vehicle_epsilon * flow.grids() as f64,
            n_smoothed,
            p: p.probs.clone(),
        })
    }

    /// `∂D_KL/∂pi[from][to]`.
    pub fn coefficient(&self, from: usize, to: usize) -> f64 {
        let cj = self.c[from];
        if cj == 0.0 {
            return 0.0;
        }
        let pi = self.p[to];
        let ratio = if pi == 0.0 { 0.0 } else { pi / self.n_smoothed[to] };
        cj * (1.0 / self.total - ratio)
    }

    pub fn matrix(&self) -> Vec<f64> {
        let n = self.c.len();
        (0..n * n).map(|k| self.coefficient(k / n, k % n)).collect()
    }
}

/// Full `N x N` gradient, row-major, `g[j][i] = ∂D_KL/∂pi[j][i]`.
pub fn kl_policy_gradient(flow: &DispatchFlow, p: &GridDistribution, vehicle_epsilon: f64) -> Result<Vec<f64>> {
    Ok(KlGradientField::new(flow, p, vehicle_epsilon)?.matrix())
}

/// The scalar stored with each experience: the gradient entry for the
/// transition the vehicle actually took.
pub fn experience_kl_coefficient(
    flow: &DispatchFlow,
    p: &GridDistribution,
    vehicle_epsilon: f64,
    source: usize,
    dest: usize,
) -> Result<f64> {
    if source >= flow.grids() || dest >= flow.grids() {
        return Err(Error::domain(format!(
            "transition {source}->{dest} outside {} grids",
            flow.grids()
        )));
    }
    Ok(KlGradientField::new(flow, p, vehicle_epsilon)?.coefficient(source, dest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_flow() {
        let c = vec![2.0, 3.0, 5.0];
        let mut pi = vec![0.0; 9];
        for k in 0..3 {
            pi[k * 4] = 1.0;
        }
        let d = vehicle_distribution(&DispatchFlow::new(c.clone(), pi).unwrap()).unwrap();
        assert_eq!(d.n, c);
        assert_eq!(d.q, vec![0.2, 0.3, 0.5]);
        assert_eq!(d.n_vehicle, 10.0);
    }

    #[test]
    fn deterministic_flow() {
        let flow = DispatchFlow::new(vec![5.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(vehicle_distribution(&flow).unwrap().n, vec![0.0, 5.0]);
    }

    #[test]
    fn empty_fleet_is_error() {
        let flow = DispatchFlow::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(vehicle_distribution(&flow), Err(Error::Domain(_))));
    }

    #[test]
    fn non_stochastic_rows_rejected() {
        assert!(DispatchFlow::new(vec![1.0, 1.0], vec![0.5, 0.4, 0.0, 1.0]).is_err());
    }

    #[test]
    fn kl_known_values() {
        let p = GridDistribution::from_probs(vec![0.5, 0.5]).unwrap();
        let q = GridDistribution::from_probs(vec![0.9, 0.1]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 0.5108).abs() < 1e-4);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let z = GridDistribution::from_probs(vec![1.0, 0.0]).unwrap();
        assert!(matches!(kl_divergence(&p, &z), Err(Error::Domain(_))));
    }

    #[test]
    fn smoothing() {
        let d = smooth(&[3.0, 1.0], 1.0).unwrap();
        assert!((d.probs()[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((d.probs()[1] - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(smooth(&[0.0; 4], 1e-3).unwrap().probs(), &[0.25; 4]);
        let tiny = smooth(&[2.0, 6.0], 1e-12).unwrap();
        assert!((tiny.probs()[0] - 0.25).abs() < 1e-9);
        assert!(smooth(&[1.0], 0.0).is_err());
    }

    #[test]
    fn gradient_zero_rows_for_empty_grids() {
        let flow = DispatchFlow::from_moves(3, [(0, 1), (0, 2), (2, 2)]).unwrap();
        let p = smooth(&[1.0, 4.0, 2.0], 1e-3).unwrap();
        let g = kl_policy_gradient(&flow, &p, 1e-3).unwrap();
        assert!(g[3..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_grid_coefficient_vanishes() {
        let flow = DispatchFlow::from_moves(1, [(0, 0), (0, 0)]).unwrap();
        let p = GridDistribution::from_probs(vec![1.0]).unwrap();
        assert_eq!(experience_kl_coefficient(&flow, &p, 0.0, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn unsmoothed_missing_vehicles_is_error() {
        let flow = DispatchFlow::from_moves(2, [(0, 0)]).unwrap();
        let p = GridDistribution::from_probs(vec![0.5, 0.5]).unwrap();
        assert!(kl_policy_gradient(&flow, &p, 0.0).is_err());
        assert!(kl_policy_gradient(&flow, &p, 1e-3).is_ok());
    }

    #[test]
    fn self_transition_uses_same_formula() {
        let flow = DispatchFlow::from_moves(2, [(0, 0), (0, 1), (1, 1)]).unwrap();
        let p = GridDistribution::from_probs(vec![0.7, 0.3]).unwrap();
        let g = kl_policy_gradient(&flow, &p, 0.0).unwrap();
        let c0 = 2.0;
        assert!((g[0] - c0 * (1.0 / 3.0 - 0.7 / 1.0)).abs() < 1e-15);
        assert_eq!(experience_kl_coefficient(&flow, &p, 0.0, 0, 0).unwrap(), g[0]);
    }
}
