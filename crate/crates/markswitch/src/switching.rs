//! The interconnected-obstacle system and its verification.
//!
//! Mode `i`'s equation carries the jump-tilted driver of its kernel and is
//! reflected on the switching obstacle `max_{j != i} (Y^j - C(i, j))`. The
//! system is solved by Picard iteration over reflected solves: round `n`
//! reflects each mode on the obstacles built from round `n - 1`, starting
//! from the unreflected per-mode floors. Iterates increase nodewise, squeezed
//! between the floors and a single bounding process whose driver dominates
//! every mode's tilt, and on a finite chain the iteration reaches an exact
//! fixed point after finitely many rounds (each round prices one more
//! switching layer).
//!
//! The converged solution is the value of the switching problem; the optimal
//! strategy switches at the first contact times with the obstacle, into the
//! argmax mode. Monte Carlo verification simulates chain-compatible paths,
//! extracts the strategy along each path, and reweights payoffs with the
//! chain likelihood ratio of the strategy's kernel, whose expectation equals
//! the root value exactly on the chain.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::bsde::{
    solve_reflected, solve_standard, BsdeError, BsdeSolution, BsdeSpec, DriverG, LipschitzMeta,
};
use crate::lattice::{ChainGrid, LatticeError, NodeArray, NodeState};
use crate::mpp::{self, MarkedPath, MppError, QuadratureGrid};
use crate::oracle::{self, OracleError};
use crate::problem::{
    reward_on_path, McEstimate, PathSample, ProblemError, State, Strategy, SwitchingProblem,
};

/// Contact detection tolerance for first switching times.
const CONTACT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SwitchingError {
    #[error("Picard iteration did not converge: last update {last:?} after {iterations} rounds")]
    NonConvergence { iterations: usize, last: Option<f64>, report: PicardReport },
    #[error("path is not chain-compatible: {0}")]
    NotLatticeCompatible(String),
    #[error("start time {0} does not lie on the chain grid")]
    StartOffGrid(f64),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Mpp(#[from] MppError),
}

/// Per-mode solutions of the interconnected system.
#[derive(Clone, Debug)]
pub struct SystemSolution {
    per_mode: Vec<BsdeSolution>,
}

impl SystemSolution {
    pub fn n_modes(&self) -> usize {
        self.per_mode.len()
    }

    pub fn mode(&self, i: usize) -> &BsdeSolution {
        &self.per_mode[i]
    }

    pub fn y(&self, grid: &ChainGrid, node: NodeState, mode: usize) -> f64 {
        self.per_mode[mode].y(grid, node)
    }

    pub fn root_value(&self, grid: &ChainGrid, mode: usize) -> f64 {
        self.per_mode[mode].root_value(grid)
    }

    /// The switching obstacle of mode `i` at a node: the best alternative
    /// value net of its switching cost, `-inf` when there is no alternative.
    pub fn interconnected_obstacle(
        &self,
        grid: &ChainGrid,
        problem: &SwitchingProblem,
        node: NodeState,
        mode: usize,
    ) -> f64 {
        match self.best_alternative(grid, problem, node, mode) {
            Some((_, value)) => value,
            None => f64::NEG_INFINITY,
        }
    }

    /// Argmax alternative `(target, y^target - C(mode, target))`; ties go to
    /// the lowest target index.
    pub fn best_alternative(
        &self,
        grid: &ChainGrid,
        problem: &SwitchingProblem,
        node: NodeState,
        mode: usize,
    ) -> Option<(usize, f64)> {
        let t = grid.time(node.k);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.n_modes() {
            if j == mode {
                continue;
            }
            let value = self.per_mode[j].y(grid, node) - problem.costs.eval(t, mode, j);
            match best {
                Some((_, b)) if value <= b => {}
                _ => best = Some((j, value)),
            }
        }
        best
    }
}

/// Progress record of one Picard run.
#[derive(Clone, Debug, Serialize)]
pub struct PicardReport {
    pub iterations: usize,
    /// Sup-norm of the y-update of each round.
    pub sup_delta_history: Vec<f64>,
    /// Rounds are expected to increase nodewise; counted beyond `1e-12`.
    pub monotonicity_violations: usize,
    pub worst_monotonicity_violation: f64,
    pub converged: bool,
}

/// The backward equation of one mode: jump-tilted driver, the mode's running
/// gains, no obstacle.
pub fn mode_equation(problem: &SwitchingProblem, mode: usize) -> BsdeSpec {
    let m = &problem.modes[mode];
    BsdeSpec::new(m.terminal.clone())
        .with_jump_tilt(m.running_f.clone(), m.kernel.clone(), &problem.compensator)
        .with_driver_g(DriverG::of_state(m.running_g.clone()))
        .with_lipschitz(LipschitzMeta { l_f: 0.0, l_u: problem.m_prime(), l_g: 0.0, l_z: 0.0 })
        .with_beta(problem.beta)
}

/// Unreflected per-mode solves: the floor processes the iteration starts
/// from.
pub fn solve_mode_floor(
    grid: &ChainGrid,
    problem: &SwitchingProblem,
) -> Result<Vec<BsdeSolution>, SwitchingError> {
    (0..problem.n_modes())
        .into_par_iter()
        .map(|i| solve_standard(grid, &mode_equation(problem, i)).map_err(SwitchingError::from))
        .collect()
}

/// The bounding process: absolute-value data enveloping every mode, with a
/// driver whose slope is the largest (resp. smallest) kernel tilt depending
/// on the sign of each `u(m)`. It dominates every Picard iterate nodewise.
pub fn solve_upper_bound(
    grid: &ChainGrid,
    problem: &SwitchingProblem,
) -> Result<BsdeSolution, SwitchingError> {
    let modes = problem.modes.clone();
    let terminal: Vec<_> = modes.iter().map(|m| m.terminal.clone()).collect();
    let running_g: Vec<_> = modes.iter().map(|m| m.running_g.clone()).collect();
    let running_f: Vec<_> = modes.iter().map(|m| m.running_f.clone()).collect();
    let kernels: Vec<_> = modes.iter().map(|m| m.kernel.clone()).collect();
    let comp = problem.compensator.clone();
    let n_marks = comp.n_marks();

    let spec = BsdeSpec::new(Arc::new(move |s: State| {
        terminal.iter().map(|xi| xi(s).abs()).fold(0.0, f64::max)
    }))
    .with_driver_f(move |s: State, u: &[f64]| {
        let mut acc = running_f.iter().map(|f| f(s).abs()).fold(0.0, f64::max);
        for (m, u_m) in u.iter().enumerate().take(n_marks) {
            let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in &kernels {
                let tilt = k.value(s.t, m) - 1.0;
                hi = hi.max(tilt);
                lo = lo.min(tilt);
            }
            let slope = if *u_m >= 0.0 { hi } else { lo };
            acc += u_m * slope * comp.phi(s.t, m);
        }
        acc
    })
    .with_driver_g(DriverG::affine(move |s, _, _| {
        running_g.iter().map(|g| g(s).abs()).fold(0.0, f64::max)
    }))
    .with_beta(problem.beta);

    solve_standard(grid, &spec).map_err(SwitchingError::from)
}

fn obstacle_arrays(
    grid: &ChainGrid,
    problem: &SwitchingProblem,
    current: &[BsdeSolution],
) -> Vec<Arc<NodeArray>> {
    let m = current.len();
    (0..m)
        .map(|i| {
            let mut arr = NodeArray::filled(grid, f64::NEG_INFINITY);
            for k in 0..=grid.n_steps() {
                let t = grid.time(k);
                for node in grid.nodes_at(k) {
                    let mut best = f64::NEG_INFINITY;
                    for (j, sol) in current.iter().enumerate() {
                        if j == i {
                            continue;
                        }
                        best = best.max(sol.y(grid, node) - problem.costs.eval(t, i, j));
                    }
                    arr.set(grid, node, best);
                }
            }
            Arc::new(arr)
        })
        .collect()
}

/// Solves the interconnected system by Picard iteration over reflected
/// solves, starting from the per-mode floors. Stops when the sup-norm of the
/// y-update falls below `tolerance`; on a finite chain this reaches an exact
/// fixed point after finitely many rounds.
pub fn picard_solve(
    grid: &ChainGrid,
    problem: &SwitchingProblem,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(SystemSolution, PicardReport), SwitchingError> {
    assert!(tolerance > 0.0, "tolerance must be positive");
    let m = problem.n_modes();
    let mut current = solve_mode_floor(grid, problem)?;

    let mut history = Vec::new();
    let mut violations = 0usize;
    let mut worst_violation = 0.0_f64;
    let mut converged = false;

    for _ in 0..max_iterations {
        let obstacles = obstacle_arrays(grid, problem, &current);
        let next: Result<Vec<BsdeSolution>, SwitchingError> = (0..m)
            .into_par_iter()
            .map(|i| {
                let spec = mode_equation(problem, i).with_obstacle_nodes(obstacles[i].clone());
                solve_reflected(grid, &spec).map_err(SwitchingError::from)
            })
            .collect();
        let next = next?;

        let mut delta = 0.0_f64;
        for i in 0..m {
            delta = delta.max(next[i].sup_distance(&current[i]));
            for k in 0..=grid.n_steps() {
                for node in grid.nodes_at(k) {
                    let drop = current[i].y(grid, node) - next[i].y(grid, node);
                    if drop > 1e-12 {
                        violations += 1;
                        worst_violation = worst_violation.max(drop);
                    }
                }
            }
        }
        history.push(delta);
        current = next;
        if delta <= tolerance {
            converged = true;
            break;
        }
    }

    let report = PicardReport {
        iterations: history.len(),
        sup_delta_history: history,
        monotonicity_violations: violations,
        worst_monotonicity_violation: worst_violation,
        converged,
    };
    if !report.converged {
        return Err(SwitchingError::NonConvergence {
            iterations: report.iterations,
            last: report.sup_delta_history.last().copied(),
            report,
        });
    }
    Ok((SystemSolution { per_mode: current }, report))
}

/// Samples one chain-compatible path under the reference law: Brownian
/// increments `+-sqrt(dt)`, at most one jump per step with the chain's
/// probabilities, jump events recorded at the end of their step.
pub fn sample_lattice_path(
    grid: &ChainGrid,
    seed: u64,
    index: u64,
) -> Result<PathSample, SwitchingError> {
    let mut rng = mpp::path_rng(seed, index);
    let n = grid.n_steps();
    let quad = QuadratureGrid::new(n, grid.horizon());
    let mut incs = Vec::with_capacity(n);
    let mut events = Vec::new();
    for k in 0..n {
        let up: bool = rng.gen::<f64>() < 0.5;
        incs.push(if up { grid.sqrt_dt() } else { -grid.sqrt_dt() });
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for m in 0..grid.n_marks() {
            acc += grid.jump_prob(k, m);
            if u < acc {
                events.push(((k + 1) as f64 * quad.dt(), m));
                break;
            }
        }
    }
    let path = PathSample::new(quad, incs, MarkedPath::new(events, grid.horizon())?);
    Ok(path)
}

/// Node sequence of a chain-compatible path.
fn lattice_nodes(grid: &ChainGrid, path: &PathSample) -> Result<Vec<NodeState>, SwitchingError> {
    if path.grid().n_steps != grid.n_steps()
        || (path.grid().horizon - grid.horizon()).abs() > 1e-12
    {
        return Err(SwitchingError::NotLatticeCompatible(format!(
            "path grid {}x{} vs chain {}x{}",
            path.grid().n_steps,
            path.grid().horizon,
            grid.n_steps(),
            grid.horizon()
        )));
    }
    let mut nodes = Vec::with_capacity(grid.n_steps() + 1);
    let mut w = 0i64;
    for k in 0..=grid.n_steps() {
        if k > 0 {
            let inc = path.bm_increments()[k - 1] / grid.sqrt_dt();
            let rounded = inc.round();
            if (inc - rounded).abs() > 1e-6 || rounded.abs() != 1.0 {
                return Err(SwitchingError::NotLatticeCompatible(format!(
                    "increment {} at step {} is not +-sqrt(dt)",
                    path.bm_increments()[k - 1],
                    k - 1
                )));
            }
            w += rounded as i64;
        }
        let t = k as f64 * path.grid().dt();
        let n = (path.events().count_up_to(t) as u32).min(grid.max_jumps());
        nodes.push(NodeState { k, w, n });
    }
    Ok(nodes)
}

/// Likelihood ratio of the strategy's tilted chain law against the reference
/// chain law along one path: per step, `rho(t_k, m)` on a jump of mark `m`,
/// `(1 - sum_m rho p) / (1 - sum_m p)` on no jump. Averaging it against
/// reference paths turns reference expectations into tilted ones exactly.
pub fn chain_likelihood(
    grid: &ChainGrid,
    problem: &SwitchingProblem,
    strategy: &Strategy,
    path: &PathSample,
) -> Result<f64, SwitchingError> {
    let mut weight = 1.0;
    let mut event_idx = 0usize;
    let events = path.events().events();
    let dt = path.grid().dt();
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let mode = strategy.mode_after(t)?;
        let kernel = &problem.modes[mode].kernel;
        let step_end = (k + 1) as f64 * dt;
        let jump = if event_idx < events.len() && events[event_idx].0 <= step_end {
            let mark = events[event_idx].1;
            event_idx += 1;
            Some(mark)
        } else {
            None
        };
        match jump {
            Some(mark) => {
                weight *= kernel.value(t, mark);
            }
            None => {
                let mut tilted = 1.0;
                for m in 0..grid.n_marks() {
                    tilted -= kernel.value(t, m) * grid.jump_prob(k, m);
                }
                let reference = grid.no_jump_prob(k);
                if reference <= 0.0 {
                    return Err(SwitchingError::NotLatticeCompatible(
                        "no-jump outcome has zero reference probability".into(),
                    ));
                }
                weight *= tilted.max(0.0) / reference;
            }
        }
    }
    Ok(weight)
}

/// First-contact strategy extraction along a chain-compatible path: starting
/// at `(time, mode)`, switch at the first grid time where the mode's value
/// meets its switching obstacle (within `1e-9`), into the argmax alternative,
/// lowest index on ties. No contact means no switches. Contact at the
/// horizon is ignored: with consistent terminal data a switch there exchanges
/// the terminal gain for exactly its cost.
pub fn extract_strategy(
    system: &SystemSolution,
    grid: &ChainGrid,
    problem: &SwitchingProblem,
    path: &PathSample,
    start: (f64, usize),
) -> Result<Strategy, SwitchingError> {
    let dt = grid.dt();
    let start_steps = start.0 / dt;
    if (start_steps - start_steps.round()).abs() > 1e-9 {
        return Err(SwitchingError::StartOffGrid(start.0));
    }
    let k0 = start_steps.round() as usize;
    let nodes = lattice_nodes(grid, path)?;

    let mut switches = Vec::new();
    let mut mode = start.1;
    for (k, node) in nodes.iter().enumerate().take(grid.n_steps()).skip(k0) {
        let t = grid.time(k);
        // Strict triangle slack rules out chained same-time contacts on
        // validated data; the cap bounds the loop on hostile inputs.
        for _ in 0..problem.n_modes() {
            let Some((target, obstacle)) = system.best_alternative(grid, problem, *node, mode)
            else {
                break;
            };
            if system.y(grid, *node, mode) <= obstacle + CONTACT_TOL {
                switches.push((t, target));
                mode = target;
            } else {
                break;
            }
        }
    }
    Strategy::new((grid.time(k0), start.1), switches, problem.n_modes())
        .map_err(SwitchingError::from)
}

/// Reference-path Monte Carlo of a fixed strategy's expected payoff on the
/// chain, reweighted by the chain likelihood of the strategy's kernel.
pub fn estimate_on_chain(
    grid: &ChainGrid,
    problem: &SwitchingProblem,
    strategy: &Strategy,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate, SwitchingError> {
    let samples: Result<Vec<f64>, SwitchingError> = (0..n_paths as u64)
        .into_par_iter()
        .map(|idx| {
            let path = sample_lattice_path(grid, seed, idx)?;
            let weight = chain_likelihood(grid, problem, strategy, &path)?;
            let payoff = reward_on_path(problem, strategy, &path)?;
            Ok(weight * payoff)
        })
        .collect();
    Ok(McEstimate::from_samples(&samples?))
}

/// A strategy that switches at each grid time with probability `q_switch`,
/// to a uniformly random other mode.
pub fn random_strategy(
    grid: &ChainGrid,
    n_modes: usize,
    start_mode: usize,
    q_switch: f64,
    seed: u64,
    index: u64,
) -> Strategy {
    if n_modes < 2 {
        return Strategy::stay((0.0, start_mode));
    }
    let mut rng = mpp::path_rng(seed, index);
    let mut switches = Vec::new();
    let mut mode = start_mode;
    for k in 0..grid.n_steps() {
        if rng.gen::<f64>() < q_switch {
            let pick = rng.gen_range(0..n_modes - 1);
            let target = if pick >= mode { pick + 1 } else { pick };
            switches.push((grid.time(k), target));
            mode = target;
        }
    }
    Strategy::new((0.0, start_mode), switches, n_modes).expect("generator preserves validity")
}

/// Verification of one mode's root value.
#[derive(Clone, Debug, Serialize)]
pub struct ModeVerification {
    pub mode: usize,
    pub y_root: f64,
    /// Monte Carlo estimate of the extracted strategy's expected payoff.
    pub extracted: McEstimate,
    /// `|y_root - extracted.mean|` in stderr units.
    pub extracted_sigma_distance: f64,
    pub n_random_strategies: usize,
    /// Random strategies whose estimate exceeds `y_root + 3 stderr`.
    pub random_exceeding: usize,
    /// Largest random-strategy mean in excess over `y_root`.
    pub worst_random_excess: f64,
    /// `|y_root - dp_root|` against the dynamic-programming oracle.
    pub dp_root_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerificationReport {
    pub n_paths: usize,
    pub per_mode: Vec<ModeVerification>,
}

const N_RANDOM_STRATEGIES: usize = 50;
const RANDOM_SWITCH_RATES: [f64; 2] = [0.01, 0.05];

/// Monte Carlo verification of the solved system: per mode, (a) the payoff of
/// the strategy extracted path by path matches the root value within
/// sampling error, (b) no random strategy beats the root value beyond
/// sampling error, (c) the root value matches the dynamic-programming oracle.
pub fn verify_representation(
    system: &SystemSolution,
    grid: &ChainGrid,
    problem: &SwitchingProblem,
    n_paths: usize,
    seed: u64,
) -> Result<VerificationReport, SwitchingError> {
    let dp = oracle::dp_value(grid, problem)?;
    let mut per_mode = Vec::new();

    for mode in 0..problem.n_modes() {
        let y_root = system.root_value(grid, mode);

        let samples: Result<Vec<f64>, SwitchingError> = (0..n_paths as u64)
            .into_par_iter()
            .map(|idx| {
                let path = sample_lattice_path(grid, seed, idx)?;
                let strategy = extract_strategy(system, grid, problem, &path, (0.0, mode))?;
                let weight = chain_likelihood(grid, problem, &strategy, &path)?;
                let payoff = reward_on_path(problem, &strategy, &path)?;
                Ok(weight * payoff)
            })
            .collect();
        let extracted = McEstimate::from_samples(&samples?);
        let extracted_sigma_distance = if extracted.stderr > 0.0 {
            (y_root - extracted.mean).abs() / extracted.stderr
        } else {
            0.0
        };

        let mut exceeding = 0usize;
        let mut worst_excess = f64::NEG_INFINITY;
        for r in 0..N_RANDOM_STRATEGIES {
            let q = RANDOM_SWITCH_RATES[r % RANDOM_SWITCH_RATES.len()];
            let strategy = random_strategy(
                grid,
                problem.n_modes(),
                mode,
                q,
                seed ^ 0xd1b5_4a32_d192_ed03,
                (mode * N_RANDOM_STRATEGIES + r) as u64,
            );
            let est = estimate_on_chain(
                grid,
                problem,
                &strategy,
                n_paths,
                seed.wrapping_add(0x9e37_79b9 * (r as u64 + 1)),
            )?;
            let excess = est.mean - y_root;
            worst_excess = worst_excess.max(excess);
            if est.mean > y_root + 3.0 * est.stderr {
                exceeding += 1;
            }
        }

        per_mode.push(ModeVerification {
            mode,
            y_root,
            extracted,
            extracted_sigma_distance,
            n_random_strategies: N_RANDOM_STRATEGIES,
            random_exceeding: exceeding,
            worst_random_excess: worst_excess,
            dp_root_gap: (y_root - dp.root_value(grid, mode)).abs(),
        });
    }

    Ok(VerificationReport { n_paths, per_mode })
}
