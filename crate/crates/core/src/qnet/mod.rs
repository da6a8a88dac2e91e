//! Action-selection Q-network: separate state and action embeddings,
//! concatenated and passed through two dense ReLU layers to a scalar.
//!
//! All parameters live in one flat `Vec<f64>` so the optimizer, soft updates
//! and checkpoints can treat them as a single array. Layer order (and thus
//! declaration order on disk) is: state embedding, action embedding, dense 1,
//! dense 2, output; each as weights (row-major, `out x in`) then bias.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint};
pub use optim::{Optimizer, OptimizerKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Width of each embedding branch.
    pub embed: usize,
    pub hidden: [usize; 2],
}

impl Architecture {
    pub fn new(state_dim: usize, action_dim: usize, embed: usize, hidden: [usize; 2]) -> Result<Self> {
        if [state_dim, action_dim, embed, hidden[0], hidden[1]].contains(&0) {
            return Err(Error::Shape("all layer widths must be positive".into()));
        }
        Ok(Self {
            state_dim,
            action_dim,
            embed,
            hidden,
        })
    }

    fn shapes(&self) -> [(usize, usize); 5] {
        [
            (self.embed, self.state_dim),
            (self.embed, self.action_dim),
            (self.hidden[0], 2 * self.embed),
            (self.hidden[1], self.hidden[0]),
            (1, self.hidden[1]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    out: usize,
    inp: usize,
}

fn layout(arch: &Architecture) -> [Dense; 5] {
    let mut off = 0;
    arch.shapes().map(|(out, inp)| {
        let d = Dense {
            w: off,
            b: off + out * inp,
            out,
            inp,
        };
        off += out * inp + out;
        d
    })
}

impl Dense {
    #[inline]
    fn apply(&self, p: &[f64], x: &[f64], y: &mut [f64], relu: bool) {
        let w = &p[self.w..self.w + self.out * self.inp];
        let b = &p[self.b..self.b + self.out];
        for (o, (row, bias)) in w.chunks_exact(self.inp).zip(b).enumerate() {
            let mut acc = *bias;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            y[o] = if relu { acc.max(0.0) } else { acc };
        }
    }

    /// Accumulates `dy ⊗ x` into the weight gradient and `dy` into the bias
    /// gradient; writes `Wᵀ dy` into `dx` when given.
    #[inline]
    fn back(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        let gw = &mut g[self.w..self.w + self.out * self.inp];
        for (row, &d) in gw.chunks_exact_mut(self.inp).zip(dy) {
            if d != 0.0 {
                for (gi, xi) in row.iter_mut().zip(x) {
                    *gi += d * xi;
                }
            }
        }
        for (gb, &d) in g[self.b..self.b + self.out].iter_mut().zip(dy) {
            *gb += d;
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            let w = &p[self.w..self.w + self.out * self.inp];
            for (row, &d) in w.chunks_exact(self.inp).zip(dy) {
                if d != 0.0 {
                    for (xi, wi) in dx.iter_mut().zip(row) {
                        *xi += d * wi;
                    }
                }
            }
        }
    }
}

/// Reusable activation buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Scratch {
    hs: Vec<f64>,
    z: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    dz: Vec<f64>,
    dh1: Vec<f64>,
    dh2: Vec<f64>,
    ds: Vec<f64>,
}

impl Scratch {
    pub fn new(arch: &Architecture) -> Self {
        Self {
            hs: vec![0.0; arch.embed],
            z: vec![0.0; 2 * arch.embed],
            h1: vec![0.0; arch.hidden[0]],
            h2: vec![0.0; arch.hidden[1]],
            dz: vec![0.0; 2 * arch.embed],
            dh1: vec![0.0; arch.hidden[0]],
            dh2: vec![0.0; arch.hidden[1]],
            ds: vec![0.0; arch.embed],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    arch: Architecture,
    params: Vec<f64>,
    layers: [Dense; 5],
}

impl QNetwork {
    /// He-uniform weights scaled by fan-in, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let layers = layout(&arch);
        let mut params = vec![0.0; arch.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            let bound = (6.0 / l.inp as f64).sqrt();
            for w in &mut params[l.w..l.w + l.out * l.inp] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Self {
            arch,
            params,
            layers,
        }
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            layers: layout(&arch),
            params: vec![0.0; arch.param_count()],
            arch,
        }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        Ok(Self {
            layers: layout(&arch),
            params,
            arch,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn scratch(&self) -> Scratch {
        Scratch::new(&self.arch)
    }

    pub fn check_inputs(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.arch.state_dim || a.len() != self.arch.action_dim {
            return Err(Error::Shape(format!(
                "inputs ({}, {}) do not match architecture ({}, {})",
                s.len(),
                a.len(),
                self.arch.state_dim,
                self.arch.action_dim
            )));
        }
        Ok(())
    }

    /// State-branch embedding, shared by every action of a grid.
    pub fn embed_state(&self, s: &[f64], out: &mut [f64]) {
        self.layers[0].apply(&self.params, s, out, true);
    }

    /// Scores one action given a precomputed state embedding.
    pub fn forward_embedded(&self, hs: &[f64], a: &[f64], sc: &mut Scratch) -> f64 {
        let e = self.arch.embed;
        sc.z[..e].copy_from_slice(hs);
        self.layers[1].apply(&self.params, a, &mut sc.z[e..], true);
        self.layers[2].apply(&self.params, &sc.z, &mut sc.h1, true);
        self.layers[3].apply(&self.params, &sc.h1, &mut sc.h2, true);
        let mut q = [0.0];
        self.layers[4].apply(&self.params, &sc.h2, &mut q, false);
        q[0]
    }

    pub fn forward_with(&self, s: &[f64], a: &[f64], sc: &mut Scratch) -> f64 {
        let mut hs = std::mem::take(&mut sc.hs);
        self.embed_state(s, &mut hs);
        let q = self.forward_embedded(&hs, a, sc);
        sc.hs = hs;
        q
    }

    pub fn forward(&self, s: &[f64], a: &[f64]) -> f64 {
        self.forward_with(s, a, &mut self.scratch())
    }

    /// Scores every action against one state, embedding the state once.
    pub fn forward_actions<'a, I>(&self, s: &[f64], actions: I, sc: &mut Scratch) -> Vec<f64>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut hs = std::mem::take(&mut sc.hs);
        self.embed_state(s, &mut hs);
        let out = actions
            .into_iter()
            .map(|a| self.forward_embedded(&hs, a, sc))
            .collect();
        sc.hs = hs;
        out
    }

    /// Adds `upstream * ∂Q(s, a)/∂θ` into `grads`, returning `Q(s, a)`.
    pub fn accumulate_gradient(
        &self,
        s: &[f64],
        a: &[f64],
        upstream: f64,
        grads: &mut [f64],
        sc: &mut Scratch,
    ) -> f64 {
        self.accumulate_gradient_with(s, a, grads, sc, |_| upstream)
    }

    /// Like `accumulate_gradient`, with the upstream factor computed from
    /// `Q(s, a)` by `upstream`.
    pub fn accumulate_gradient_with<F: FnOnce(f64) -> f64>(
        &self,
        s: &[f64],
        a: &[f64],
        grads: &mut [f64],
        sc: &mut Scratch,
        upstream: F,
    ) -> f64 {
        let e = self.arch.embed;
        let mut hs = std::mem::take(&mut sc.hs);
        self.embed_state(s, &mut hs);
        let q = self.forward_embedded(&hs, a, sc);
        sc.hs = hs;
        let upstream = upstream(q);
        if upstream == 0.0 {
            return q;
        }
        let p = &self.params;
        let [ls, la, l1, l2, lo] = &self.layers;
        lo.back(p, grads, &sc.h2, &[upstream], Some(&mut sc.dh2));
        relu_mask(&mut sc.dh2, &sc.h2);
        l2.back(p, grads, &sc.h1, &sc.dh2, Some(&mut sc.dh1));
        relu_mask(&mut sc.dh1, &sc.h1);
        l1.back(p, grads, &sc.z, &sc.dh1, Some(&mut sc.dz));
        relu_mask(&mut sc.dz, &sc.z);
        sc.ds.copy_from_slice(&sc.dz[..e]);
        ls.back(p, grads, s, &sc.ds, None);
        la.back(p, grads, a, &sc.dz[e..], None);
        q
    }

    /// Exact gradient of `Σ upstream_i · Q(s_i, a_i)` with respect to every
    /// parameter.
    pub fn backward(&self, batch: &[(&[f64], &[f64])], upstream: &[f64]) -> Result<Vec<f64>> {
        if batch.len() != upstream.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} upstream gradients",
                batch.len(),
                upstream.len()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut sc = self.scratch();
        for (&(s, a), &u) in batch.iter().zip(upstream) {
            self.check_inputs(s, a)?;
            self.accumulate_gradient(s, a, u, &mut grads, &mut sc);
        }
        Ok(grads)
    }

    /// `target ← tau·online + (1 − tau)·target`, elementwise.
    pub fn soft_update_from(&mut self, online: &QNetwork, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::config(format!("soft update rate {tau} outside (0, 1]")));
        }
        if self.arch != online.arch {
            return Err(Error::Shape("target and online architectures differ".into()));
        }
        if tau == 1.0 {
            self.params.copy_from_slice(&online.params);
            return Ok(());
        }
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = tau * o + (1.0 - tau) * *t;
        }
        Ok(())
    }
}

#[inline]
fn relu_mask(d: &mut [f64], act: &[f64]) {
    for (g, &h) in d.iter_mut().zip(act) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn soft_update(target: &mut QNetwork, online: &QNetwork, tau_soft: f64) -> Result<()> {
    target.soft_update_from(online, tau_soft)
}
