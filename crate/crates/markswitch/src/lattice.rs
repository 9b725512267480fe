//! The discrete-time recombining chain shared by the backward solvers and the
//! dynamic-programming oracle.
//!
//! Per step of length `dt = horizon / n_steps`, two independent branches:
//!
//! - a Brownian branch `+-sqrt(dt)` with probability `1/2` each;
//! - a jump branch: at most one jump, of mark `m` with probability
//!   `p_{k,m} = phi(t_k, m) * lambda(t_k) * dt`, no jump otherwise.
//!
//! Nodes recombine on `(w, n)`: the Brownian coordinate in lattice units and
//! the jump count. Data may depend on how many jumps occurred, not on which
//! marks; per-mark structure survives in the transition probabilities and in
//! the martingale-representation coefficients.
//!
//! The load-bearing fact is an exact, purely algebraic reweighting identity:
//! for any child values `V` and any kernel `rho`,
//!
//! ```text
//! E^rho[V] = E[V] + sum_m u(m) * (rho(t_k, m) - 1) * p_{k,m},
//! ```
//!
//! where `u(m) = E[V | jump m] - E[V | no jump]` and `E^rho` replaces the jump
//! probabilities by `rho(t_k, m) * p_{k,m}`. It is what lets the backward
//! equations carry the measure change in their driver while the oracle
//! reweights probabilities directly, with both routes agreeing to rounding.

use serde::Serialize;
use thiserror::Error;

use crate::mpp::KernelField;
use crate::problem::{State, SwitchingProblem};

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("need at least one step, got {0}")]
    NoSteps(usize),
    #[error(
        "one-step law not stable: sum of {desc} jump probabilities at step {step} is \
         {total:.6} > 1; n_steps >= {suggested_n} would fix it"
    )]
    StabilityViolation { step: usize, desc: String, total: f64, suggested_n: usize },
    #[error("negative jump probability {value} at step {step}, mark {mark}")]
    NegativeJumpProb { step: usize, mark: usize, value: f64 },
}

/// A node: time index `k`, Brownian coordinate `w` in lattice units (so the
/// real coordinate is `w * sqrt(dt)`), jump count `n`.
///
/// `|w| <= k` and `w` has the parity of `k`; `n <= min(k, max_jumps)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct NodeState {
    pub k: usize,
    pub w: i64,
    pub n: u32,
}

/// The Brownian branch of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrownianBranch {
    Up,
    Down,
}

impl BrownianBranch {
    pub const BOTH: [BrownianBranch; 2] = [BrownianBranch::Up, BrownianBranch::Down];

    pub fn sign(self) -> f64 {
        match self {
            BrownianBranch::Up => 1.0,
            BrownianBranch::Down => -1.0,
        }
    }
}

/// One-step conditional expectation and martingale-representation
/// coefficients of a value laid out on a node's children.
///
/// `u(m) = jump_conditional(m) - no_jump_conditional` is the discrete
/// analogue of the jump-component integrand; `z = E[V * dW] / dt` of the
/// Brownian one. The residual of the representation (the one-step outcome
/// space is larger than the span of `dW` and the jump indicators) is
/// deliberately dropped: backward recursions need only the expectation and
/// `u`, and the reweighting identity is exact regardless.
#[derive(Clone, Debug)]
pub struct StepCoefficients {
    pub expectation: f64,
    pub z: f64,
    pub u: Vec<f64>,
    pub jump_conditional: Vec<f64>,
    pub no_jump_conditional: f64,
}

/// The chain: per-step jump probabilities, clock increments, and node layout.
#[derive(Clone, Debug)]
pub struct ChainGrid {
    n_steps: usize,
    dt: f64,
    sqrt_dt: f64,
    horizon: f64,
    max_jumps: u32,
    n_marks: usize,
    /// `jump_probs[k][m] = phi(t_k, m) * lambda(t_k) * dt`.
    jump_probs: Vec<Vec<f64>>,
    /// `1 - sum_m jump_probs[k][m]`.
    no_jump_probs: Vec<f64>,
    /// Clock increments `dA_k = lambda(t_k) * dt`.
    da: Vec<f64>,
    /// Node-count offsets per step, for flat storage.
    offsets: Vec<usize>,
}

impl ChainGrid {
    /// Builds the chain for a problem, checking that the reference law and
    /// every mode-tilted law are well defined (jump probabilities in `[0,1]`
    /// with mass to spare for the no-jump branch).
    pub fn build(problem: &SwitchingProblem, n_steps: usize) -> Result<Self, LatticeError> {
        Self::build_capped(problem, n_steps, n_steps as u32)
    }

    /// As [`ChainGrid::build`] with an explicit cap on the tracked jump
    /// count. Jumps beyond the cap still occur; the count saturates, which is
    /// harmless when data do not distinguish counts that large.
    pub fn build_capped(
        problem: &SwitchingProblem,
        n_steps: usize,
        max_jumps: u32,
    ) -> Result<Self, LatticeError> {
        if n_steps == 0 {
            return Err(LatticeError::NoSteps(0));
        }
        let horizon = problem.horizon;
        let dt = horizon / n_steps as f64;
        let n_marks = problem.compensator.n_marks();

        let mut jump_probs = Vec::with_capacity(n_steps);
        let mut no_jump_probs = Vec::with_capacity(n_steps);
        let mut da = Vec::with_capacity(n_steps);
        // Worst one-step mass over steps, reference law and every tilted law.
        let mut worst: Option<(usize, String, f64)> = None;
        let mut bump = |step: usize, desc: &str, total: f64| {
            if worst.as_ref().is_none_or(|w| total > w.2) {
                worst = Some((step, desc.to_string(), total));
            }
        };

        for k in 0..n_steps {
            let t = k as f64 * dt;
            let lambda = problem.compensator.lambda(t);
            let mut probs = Vec::with_capacity(n_marks);
            let mut total = 0.0;
            for m in 0..n_marks {
                let p = problem.compensator.phi(t, m) * lambda * dt;
                if p < 0.0 {
                    return Err(LatticeError::NegativeJumpProb { step: k, mark: m, value: p });
                }
                probs.push(p);
                total += p;
            }
            bump(k, "reference", total);
            for (i, mode) in problem.modes.iter().enumerate() {
                let tilted: f64 =
                    (0..n_marks).map(|m| mode.kernel.value(t, m) * probs[m]).sum();
                bump(k, &format!("mode-{i} tilted"), tilted);
            }
            no_jump_probs.push(1.0 - total);
            da.push(lambda * dt);
            jump_probs.push(probs);
        }

        if let Some((step, desc, total)) = worst {
            if total > 1.0 {
                // One-step masses scale like 1/n_steps, so the smallest
                // stable grid is the horizon times the worst rate.
                return Err(LatticeError::StabilityViolation {
                    step,
                    desc,
                    total,
                    suggested_n: (horizon * total / dt).ceil() as usize,
                });
            }
        }

        let mut offsets = Vec::with_capacity(n_steps + 2);
        let mut acc = 0usize;
        for k in 0..=n_steps {
            offsets.push(acc);
            acc += (k + 1) * (k.min(max_jumps as usize) + 1);
        }
        offsets.push(acc);

        Ok(Self {
            n_steps,
            dt,
            sqrt_dt: dt.sqrt(),
            horizon,
            max_jumps,
            n_marks,
            jump_probs,
            no_jump_probs,
            da,
            offsets,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_marks(&self) -> usize {
        self.n_marks
    }

    pub fn max_jumps(&self) -> u32 {
        self.max_jumps
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Jump probability of mark `m` during step `k`.
    pub fn jump_prob(&self, k: usize, m: usize) -> f64 {
        self.jump_probs[k][m]
    }

    pub fn no_jump_prob(&self, k: usize) -> f64 {
        self.no_jump_probs[k]
    }

    /// Clock increment `dA_k`.
    pub fn da(&self, k: usize) -> f64 {
        self.da[k]
    }

    /// Cumulated clock `A_{t_k}`.
    pub fn cumulated_a(&self, k: usize) -> f64 {
        self.da[..k].iter().sum()
    }

    pub fn root(&self) -> NodeState {
        NodeState { k: 0, w: 0, n: 0 }
    }

    fn jumps_dim(&self, k: usize) -> usize {
        k.min(self.max_jumps as usize) + 1
    }

    pub fn n_nodes_at(&self, k: usize) -> usize {
        (k + 1) * self.jumps_dim(k)
    }

    pub fn n_nodes_total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Flat index of a node, for slice-backed per-node storage.
    pub fn node_index(&self, node: NodeState) -> usize {
        debug_assert!(self.contains(node), "node {node:?} off lattice");
        let iw = ((node.w + node.k as i64) / 2) as usize;
        self.offsets[node.k] + iw * self.jumps_dim(node.k) + node.n as usize
    }

    pub fn contains(&self, node: NodeState) -> bool {
        node.k <= self.n_steps
            && node.w.abs() <= node.k as i64
            && (node.w + node.k as i64) % 2 == 0
            && (node.n as usize) < self.jumps_dim(node.k)
    }

    /// All nodes at step `k`.
    pub fn nodes_at(&self, k: usize) -> impl Iterator<Item = NodeState> + '_ {
        let jd = self.jumps_dim(k);
        (0..=k).flat_map(move |iw| {
            (0..jd).map(move |n| NodeState {
                k,
                w: 2 * iw as i64 - k as i64,
                n: n as u32,
            })
        })
    }

    /// Observable state of a node.
    pub fn state(&self, node: NodeState) -> State {
        State { t: self.time(node.k), w: node.w as f64 * self.sqrt_dt, n: node.n }
    }

    /// The child reached from `node` by one Brownian branch and one jump
    /// outcome.
    pub fn child(&self, node: NodeState, bm: BrownianBranch, jump: Option<usize>) -> NodeState {
        NodeState {
            k: node.k + 1,
            w: node.w + bm.sign() as i64,
            n: match jump {
                Some(_) => (node.n + 1).min(self.max_jumps),
                None => node.n,
            },
        }
    }

    /// Probability of one `(brownian, jump)` outcome at step `node.k`.
    pub fn branch_prob(&self, node: NodeState, jump: Option<usize>) -> f64 {
        0.5 * match jump {
            Some(m) => self.jump_probs[node.k][m],
            None => self.no_jump_probs[node.k],
        }
    }

    /// One-step expectation and representation coefficients of child values.
    pub fn step_coefficients(
        &self,
        node: NodeState,
        values: impl Fn(BrownianBranch, Option<usize>) -> f64,
    ) -> StepCoefficients {
        let k = node.k;
        let no_jump_conditional =
            0.5 * (values(BrownianBranch::Up, None) + values(BrownianBranch::Down, None));
        let mut jump_conditional = Vec::with_capacity(self.n_marks);
        for m in 0..self.n_marks {
            jump_conditional.push(
                0.5 * (values(BrownianBranch::Up, Some(m)) + values(BrownianBranch::Down, Some(m))),
            );
        }
        let mut expectation = self.no_jump_probs[k] * no_jump_conditional;
        for (m, conditional) in jump_conditional.iter().enumerate() {
            expectation += self.jump_probs[k][m] * conditional;
        }
        // z = E[V dW] / dt; the dW branch has values +-sqrt(dt).
        let mut z = self.no_jump_probs[k]
            * (values(BrownianBranch::Up, None) - values(BrownianBranch::Down, None));
        for m in 0..self.n_marks {
            z += self.jump_probs[k][m]
                * (values(BrownianBranch::Up, Some(m)) - values(BrownianBranch::Down, Some(m)));
        }
        z /= 2.0 * self.sqrt_dt;
        let u = jump_conditional.iter().map(|&j| j - no_jump_conditional).collect();
        StepCoefficients { expectation, z, u, jump_conditional, no_jump_conditional }
    }

    /// One-step expectation under the tilted law of `kernel`: jump
    /// probabilities `rho(t_k, m) * p_{k,m}`, the remainder on the no-jump
    /// branch. Fails if the tilted probabilities exceed one.
    pub fn reweighted_expectation(
        &self,
        node: NodeState,
        values: impl Fn(BrownianBranch, Option<usize>) -> f64,
        kernel: &KernelField,
    ) -> Result<f64, LatticeError> {
        let k = node.k;
        let t = self.time(k);
        let mut total_tilted = 0.0;
        let mut acc = 0.0;
        for m in 0..self.n_marks {
            let p = kernel.value(t, m) * self.jump_probs[k][m];
            total_tilted += p;
            acc += p
                * 0.5
                * (values(BrownianBranch::Up, Some(m)) + values(BrownianBranch::Down, Some(m)));
        }
        if total_tilted > 1.0 + 1e-12 {
            return Err(LatticeError::StabilityViolation {
                step: k,
                desc: "tilted".into(),
                total: total_tilted,
                suggested_n: (self.horizon * total_tilted / self.dt).ceil() as usize,
            });
        }
        acc += (1.0 - total_tilted)
            * 0.5
            * (values(BrownianBranch::Up, None) + values(BrownianBranch::Down, None));
        Ok(acc)
    }

    /// All `2 * (n_marks + 1)` one-step outcomes.
    pub fn outcomes(&self) -> impl Iterator<Item = (BrownianBranch, Option<usize>)> + '_ {
        BrownianBranch::BOTH.into_iter().flat_map(move |bm| {
            std::iter::once((bm, None)).chain((0..self.n_marks).map(move |m| (bm, Some(m))))
        })
    }
}

/// Per-node flat storage over a chain.
#[derive(Clone, Debug)]
pub struct NodeArray {
    data: Vec<f64>,
}

impl NodeArray {
    pub fn zeros(grid: &ChainGrid) -> Self {
        Self { data: vec![0.0; grid.n_nodes_total()] }
    }

    pub fn filled(grid: &ChainGrid, value: f64) -> Self {
        Self { data: vec![value; grid.n_nodes_total()] }
    }

    pub fn get(&self, grid: &ChainGrid, node: NodeState) -> f64 {
        self.data[grid.node_index(node)]
    }

    pub fn set(&mut self, grid: &ChainGrid, node: NodeState, value: f64) {
        let idx = grid.node_index(node);
        self.data[idx] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest absolute difference against another array.
    pub fn sup_distance(&self, other: &NodeArray) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
