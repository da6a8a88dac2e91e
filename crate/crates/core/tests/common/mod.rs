//! Oracle checks shared by the focused test files and the acceptance suite.
//! Each returns the worst error it saw so callers pick the tolerance.

#![allow(dead_code)]

use std::sync::Arc;

use kldispatch::grid::{ActionFeature, GridId};
use kldispatch::kl::{flow_divergence, kl_policy_gradient, smooth, DispatchFlow, GridDistribution};
use kldispatch::matching::{hungarian_match, top_m_match};
use kldispatch::policy::boltzmann_probs;
use kldispatch::qnet::{Architecture, QNetwork};
use kldispatch::trainer::{compute_target, loss_gradients, Experience, GridContext, TargetMode, TrainerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_net(rng: &mut ChaCha8Rng, state_dim: usize, action_dim: usize) -> QNetwork {
    let arch = Architecture::new(
        state_dim,
        action_dim,
        rng.random_range(2..6),
        [rng.random_range(2..7), rng.random_range(2..5)],
    )
    .unwrap();
    let params = random_vec(rng, arch.param_count(), 0.8);
    QNetwork::from_params(arch, params).unwrap()
}

pub fn with_params(net: &QNetwork, params: Vec<f64>) -> QNetwork {
    QNetwork::from_params(*net.architecture(), params).unwrap()
}

/// Central differences of `f` over every parameter of `net`.
pub fn fd_params(net: &QNetwork, h: f64, f: impl Fn(&QNetwork) -> f64) -> Vec<f64> {
    let base = net.params().to_vec();
    (0..base.len())
        .map(|k| {
            let mut plus = base.clone();
            plus[k] += h;
            let mut minus = base.clone();
            minus[k] -= h;
            (f(&with_params(net, plus)) - f(&with_params(net, minus))) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn network_backward_worst(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let net = random_net(&mut rng, 6, 6);
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| (random_vec(&mut rng, 6, 1.0), random_vec(&mut rng, 6, 1.0)))
            .collect();
        let upstream = random_vec(&mut rng, 3, 1.0);
        let refs: Vec<(&[f64], &[f64])> = batch.iter().map(|(s, a)| (&s[..], &a[..])).collect();
        let analytic = net.backward(&refs, &upstream).unwrap();
        let numeric = fd_params(&net, 1e-6, |n| {
            refs.iter().zip(&upstream).map(|((s, a), u)| u * n.forward(s, a)).sum()
        });
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

pub fn random_flow(rng: &mut ChaCha8Rng, n: usize) -> DispatchFlow {
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(1..12) as f64).collect();
    let mut pi = Vec::with_capacity(n * n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        pi.extend(row.iter().map(|v| v / s));
    }
    DispatchFlow::new(c, pi).unwrap()
}

fn random_orders(rng: &mut ChaCha8Rng, n: usize) -> GridDistribution {
    let counts: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64).collect();
    smooth(&counts, 1e-3).unwrap()
}

/// Worst per-entry relative error of the analytic KL gradient against
/// central differences, over `instances` flows with 2 to 8 grids and both
/// with and without vehicle smoothing.
pub fn kl_gradient_worst(instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let n = 2 + instance % 7;
        let flow = random_flow(&mut rng, n);
        let p = random_orders(&mut rng, n);
        for eps in [0.0, 1e-3] {
            let g = kl_policy_gradient(&flow, &p, eps).unwrap();
            for j in 0..n {
                for i in 0..n {
                    let v = flow.prob(j, i);
                    let up = flow_divergence(&flow.with_prob(j, i, v + h), &p, eps).unwrap();
                    let down = flow_divergence(&flow.with_prob(j, i, v - h), &p, eps).unwrap();
                    let fd = (up - down) / (2.0 * h);
                    let analytic = g[j * n + i];
                    worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12));
                }
            }
        }
    }
    worst
}

/// Largest gradient entry when the order distribution equals the vehicle
/// distribution the flow induces.
pub fn kl_gradient_at_match() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut max: f64 = 0.0;
    for n in 2..=8 {
        let flow = random_flow(&mut rng, n);
        let mut arrivals = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                arrivals[i] += flow.idle()[j] * flow.prob(j, i);
            }
        }
        let total: f64 = arrivals.iter().sum();
        let p = GridDistribution::from_probs(arrivals.iter().map(|a| a / total).collect()).unwrap();
        let g = kl_policy_gradient(&flow, &p, 0.0).unwrap();
        max = g.iter().fold(max, |m, v| m.max(v.abs()));
    }
    max
}

fn context(rng: &mut ChaCha8Rng, actions: usize) -> Arc<GridContext> {
    Arc::new(GridContext {
        grid: GridId(0),
        timestep: 0,
        state: random_vec(rng, 6, 1.0),
        actions: (0..actions)
            .map(|_| {
                let v = random_vec(rng, 6, 1.0);
                ActionFeature([v[0], v[1], v[2], v[3], v[4], v[5]])
            })
            .collect(),
    })
}

fn random_experience(rng: &mut ChaCha8Rng) -> Experience {
    let len = rng.random_range(1..6);
    let current = context(rng, len);
    let available: Vec<usize> = (0..current.actions.len()).filter(|_| rng.random_bool(0.8)).collect();
    let available = if available.is_empty() { vec![0] } else { available };
    let action = available[rng.random_range(0..available.len())];
    let terminal = rng.random_bool(0.2);
    let next_len = rng.random_range(1..5);
    Experience {
        current,
        action,
        available,
        next: (!terminal).then(|| context(rng, next_len)),
        kl_coeff: rng.random_range(-2.0..2.0),
        reward: rng.random_range(0.0..0.2),
        terminal,
    }
}

/// Scalar loss whose gradient the trainer implements: targets and KL
/// coefficients fixed, the other available actions' Q values frozen.
fn surrogate_loss(
    batch: &[&Experience],
    net: &QNetwork,
    targets: &[f64],
    frozen: &[Vec<f64>],
    cfg: &TrainerConfig,
) -> f64 {
    let mut td = 0.0;
    let mut kl = 0.0;
    for ((exp, &q_star), q_avail) in batch.iter().zip(targets).zip(frozen) {
        let q = net.forward(exp.state(), exp.action_feature());
        td += (q - q_star).powi(2);
        let pos = exp.available_position().unwrap();
        let mut qs = q_avail.clone();
        qs[pos] = q;
        kl += exp.kl_coeff * boltzmann_probs(&qs, cfg.tau).unwrap()[pos];
    }
    td / batch.len() as f64 + cfg.lambda * kl
}

pub fn combined_loss_worst(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let online = random_net(&mut rng, 6, 6);
        let target = with_params(&online, random_vec(&mut rng, online.params().len(), 0.8));
        let cfg = TrainerConfig {
            lambda: rng.random_range(0.0..0.6),
            tau: rng.random_range(0.5..2.0),
            target_mode: if trial % 2 == 0 {
                TargetMode::Expectation
            } else {
                TargetMode::Greedy
            },
            ..TrainerConfig::default()
        };
        let exps: Vec<Experience> = (0..4).map(|_| random_experience(&mut rng)).collect();
        let batch: Vec<&Experience> = exps.iter().collect();
        let targets: Vec<f64> = batch
            .iter()
            .map(|e| compute_target(e, &online, &target, &cfg).unwrap().value)
            .collect();
        let frozen: Vec<Vec<f64>> = batch
            .iter()
            .map(|e| e.available_actions().map(|a| online.forward(e.state(), a)).collect())
            .collect();
        let analytic = loss_gradients(&batch, &online, &target, &cfg).unwrap().grads;
        let numeric = fd_params(&online, 1e-6, |n| surrogate_loss(&batch, n, &targets, &frozen, &cfg));
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Best objective over all partial one-to-one matchings, by enumeration.
pub fn brute_force(q: &[Vec<f64>]) -> f64 {
    fn go(q: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == q.len() {
            return 0.0;
        }
        let mut best = go(q, row + 1, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(q[row][j] + go(q, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(q, 0, &mut vec![false; q[0].len()])
}

/// Best full assignment of a square matrix over all `n!` permutations.
pub fn best_permutation(q: &[Vec<f64>]) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, q: &[Vec<f64>], best: &mut f64) {
        if k == perm.len() {
            let v: f64 = perm.iter().enumerate().map(|(i, &j)| q[i][j]).sum();
            *best = best.max(v);
            return;
        }
        for s in k..perm.len() {
            perm.swap(k, s);
            permute(k + 1, perm, q, best);
            perm.swap(k, s);
        }
    }
    let mut best = f64::NEG_INFINITY;
    permute(0, &mut (0..q.len()).collect(), q, &mut best);
    best
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(lo..1.0)).collect())
        .collect()
}

/// Worst objective gap between Hungarian and the permutation optimum on
/// square matrices of size 1 to 6. Invalid assignments count as infinite.
pub fn hungarian_square_worst(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let n = 1 + trial % 6;
        let q = random_matrix(&mut rng, n, n, 0.0);
        let a = hungarian_match(&q).unwrap();
        if !a.is_valid() {
            return f64::INFINITY;
        }
        worst = worst.max((a.objective(&q) - best_permutation(&q)).abs());
    }
    worst
}

/// Same against enumeration of partial matchings on rectangular matrices
/// with negative entries, which must be left unmatched.
pub fn hungarian_rect_worst(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(1..=6);
        let q = random_matrix(&mut rng, rows, cols, -1.0);
        let a = hungarian_match(&q).unwrap();
        if !a.is_valid() || a.pairs().iter().any(|&(i, j)| q[i][j] <= 0.0) {
            return f64::INFINITY;
        }
        worst = worst.max((a.objective(&q) - brute_force(&q)).abs());
    }
    worst
}

/// Number of identical-row matrices where top-m and Hungarian pick
/// different order sets.
pub fn top_m_mismatches(trials: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..trials {
        let drivers = rng.random_range(1..=6);
        let orders = rng.random_range(1..=6);
        let row: Vec<f64> = (0..orders).map(|_| rng.random_range(0.01..1.0)).collect();
        let q = vec![row.clone(); drivers];
        let hungarian = hungarian_match(&q).unwrap();
        let mut chosen = top_m_match(&row, drivers);
        chosen.sort();
        let mut matched: Vec<usize> = hungarian.pairs().into_iter().map(|(_, j)| j).collect();
        matched.sort();
        let top: f64 = chosen.iter().map(|&j| row[j]).sum();
        if chosen != matched || (top - hungarian.objective(&q)).abs() > 1e-12 {
            bad += 1;
        }
    }
    bad
}
