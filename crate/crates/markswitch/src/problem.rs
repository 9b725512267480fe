//! Switching-problem instances, strategies, rewards, and validation of the
//! standing assumptions.
//!
//! All data processes are Markovian in the observable state `(t, w, n)`:
//! elapsed time, Brownian coordinate, and jump count. This restriction is what
//! makes the lattice solver and the dynamic-programming oracle exact and
//! comparable; the underlying theory allows general adapted processes.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::mpp::{
    self, CompensatorSpec, KernelField, MarkedPath, MppError, QuadratureGrid,
};

/// Observable state carried by paths and lattice nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    /// Elapsed time.
    pub t: f64,
    /// Brownian coordinate.
    pub w: f64,
    /// Number of jumps so far.
    pub n: u32,
}

/// A real-valued function of the observable state.
pub type DataFn = Arc<dyn Fn(State) -> f64 + Send + Sync>;

pub fn data_fn(f: impl Fn(State) -> f64 + Send + Sync + 'static) -> DataFn {
    Arc::new(f)
}

pub fn constant_fn(c: f64) -> DataFn {
    Arc::new(move |_| c)
}

/// Per-mode data: terminal gain, running gains, and the intensity kernel.
///
/// `running_f` integrates against `dA` (the point-process clock), `running_g`
/// against `dt`.
#[derive(Clone)]
pub struct ModeSpec {
    pub name: String,
    pub terminal: DataFn,
    pub running_f: DataFn,
    pub running_g: DataFn,
    pub kernel: KernelField,
}

impl std::fmt::Debug for ModeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModeSpec").field("name", &self.name).field("kernel", &self.kernel).finish()
    }
}

/// Switching costs `C_t(i, j)`, evaluated on the time grid.
#[derive(Clone)]
pub struct CostStructure {
    cost: Arc<dyn Fn(f64, usize, usize) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for CostStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("CostStructure(..)")
    }
}

impl CostStructure {
    pub fn new(cost: impl Fn(f64, usize, usize) -> f64 + Send + Sync + 'static) -> Self {
        Self { cost: Arc::new(cost) }
    }

    /// Time-constant costs from a square matrix.
    pub fn from_matrix(matrix: Vec<Vec<f64>>) -> Self {
        Self::new(move |_, i, j| matrix[i][j])
    }

    /// Same constant cost for every ordered pair of distinct modes.
    pub fn uniform(c: f64) -> Self {
        Self::new(move |_, i, j| if i == j { 0.0 } else { c })
    }

    pub fn eval(&self, t: f64, from: usize, to: usize) -> f64 {
        (self.cost)(t, from, to)
    }
}

/// A full problem instance.
#[derive(Clone, Debug)]
pub struct SwitchingProblem {
    pub modes: Vec<ModeSpec>,
    pub costs: CostStructure,
    pub compensator: CompensatorSpec,
    pub horizon: f64,
    /// Weight of the diagnostic norms; must exceed `max(|M - 1|, 1)^2` where
    /// `M` bounds the kernels.
    pub beta: f64,
}

impl SwitchingProblem {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Largest kernel bound across modes.
    pub fn kernel_bound(&self) -> f64 {
        self.modes.iter().map(|m| m.kernel.bound()).fold(0.0, f64::max)
    }

    /// `M' = max(|M - 1|, 1)`.
    pub fn m_prime(&self) -> f64 {
        (self.kernel_bound() - 1.0).abs().max(1.0)
    }
}

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("strategy switch times must be nondecreasing and >= the start time")]
    BadSwitchTimes,
    #[error("strategy may not switch a mode to itself")]
    SelfSwitch,
    #[error("mode index {0} out of range")]
    BadMode(usize),
    #[error("time {0} outside the strategy's domain")]
    TimeOutOfRange(f64),
    #[error("at least two paths required, got {0}")]
    TooFewPaths(usize),
    #[error("strategy start time {0} does not lie on the path grid")]
    StartOffGrid(f64),
    #[error(transparent)]
    Mpp(#[from] MppError),
}

/// A switching strategy: a start `(time, mode)` and a finite sequence of
/// switches `(time, target mode)` with nondecreasing times.
///
/// Intervals are left-open: a switch at `theta` takes effect strictly after
/// `theta`, while its cost is charged at `theta`. Equal switch times are
/// permitted in the data model; the mode process collapses them so only the
/// last target survives.
#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    start_time: f64,
    start_mode: usize,
    switches: Vec<(f64, usize)>,
}

impl Strategy {
    pub fn new(
        start: (f64, usize),
        switches: Vec<(f64, usize)>,
        n_modes: usize,
    ) -> Result<Self, ProblemError> {
        if start.1 >= n_modes {
            return Err(ProblemError::BadMode(start.1));
        }
        let mut prev_t = start.0;
        let mut prev_mode = start.1;
        for &(t, m) in &switches {
            if t < prev_t {
                return Err(ProblemError::BadSwitchTimes);
            }
            if m >= n_modes {
                return Err(ProblemError::BadMode(m));
            }
            if m == prev_mode {
                return Err(ProblemError::SelfSwitch);
            }
            prev_t = t;
            prev_mode = m;
        }
        Ok(Self { start_time: start.0, start_mode: start.1, switches })
    }

    /// A strategy that never switches.
    pub fn stay(start: (f64, usize)) -> Self {
        Self { start_time: start.0, start_mode: start.1, switches: Vec::new() }
    }

    pub fn start(&self) -> (f64, usize) {
        (self.start_time, self.start_mode)
    }

    pub fn switches(&self) -> &[(f64, usize)] {
        &self.switches
    }

    pub fn n_switches(&self) -> usize {
        self.switches.len()
    }

    pub fn has_simultaneous_switches(&self) -> bool {
        self.switches.windows(2).any(|w| w[0].0 == w[1].0)
    }

    /// The mode holding at time `t`. At a switch time exactly, the old mode
    /// still applies (left-open convention).
    pub fn mode_at(&self, t: f64) -> Result<usize, ProblemError> {
        if t < self.start_time {
            return Err(ProblemError::TimeOutOfRange(t));
        }
        let k = self.switches.iter().take_while(|&&(s, _)| s < t).count();
        Ok(if k == 0 { self.start_mode } else { self.switches[k - 1].1 })
    }

    /// The mode holding on `(t, t + eps]`, i.e. with switches at exactly `t`
    /// already applied. This is the mode that governs the step starting at a
    /// grid time `t`.
    pub fn mode_after(&self, t: f64) -> Result<usize, ProblemError> {
        if t < self.start_time {
            return Err(ProblemError::TimeOutOfRange(t));
        }
        let k = self.switches.iter().take_while(|&&(s, _)| s <= t).count();
        Ok(if k == 0 { self.start_mode } else { self.switches[k - 1].1 })
    }

    /// Total switching cost charged up to and including time `t`.
    pub fn cost_up_to(&self, problem: &SwitchingProblem, t: f64) -> f64 {
        let mut total = 0.0;
        let mut prev = self.start_mode;
        for &(s, m) in &self.switches {
            if s > t {
                break;
            }
            total += problem.costs.eval(s, prev, m);
            prev = m;
        }
        total
    }

    /// The time-dependent kernel induced by this strategy: pointwise the
    /// kernel of the holding mode. Switch times are declared as breakpoints
    /// so the weight quadrature resolves them exactly.
    pub fn switched_kernel(&self, problem: &SwitchingProblem) -> KernelField {
        let strategy = self.clone();
        let modes: Vec<KernelField> = problem.modes.iter().map(|m| m.kernel.clone()).collect();
        let bound = problem.kernel_bound();
        let eta = problem.modes.iter().map(|m| m.kernel.eta()).fold(f64::INFINITY, f64::min);
        KernelField::new(
            move |t, mark| {
                let mode = strategy.mode_at(t).unwrap_or(strategy.start_mode);
                modes[mode].value(t, mark)
            },
            bound,
            eta,
        )
        .with_breakpoints(self.switches.iter().map(|&(t, _)| t).collect())
    }
}

/// One simulated trajectory: Brownian increments on a uniform grid, the
/// marked jump events, and the measure-change weight attached by the sampler
/// (`1` for direct sampling).
#[derive(Clone, Debug)]
pub struct PathSample {
    grid: QuadratureGrid,
    bm_increments: Vec<f64>,
    events: MarkedPath,
    weight: f64,
}

impl PathSample {
    pub fn new(grid: QuadratureGrid, bm_increments: Vec<f64>, events: MarkedPath) -> Self {
        assert_eq!(bm_increments.len(), grid.n_steps);
        Self { grid, bm_increments, events, weight: 1.0 }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn grid(&self) -> QuadratureGrid {
        self.grid
    }

    pub fn events(&self) -> &MarkedPath {
        &self.events
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn bm_increments(&self) -> &[f64] {
        &self.bm_increments
    }

    /// Brownian coordinate at grid index `k`.
    pub fn w_at(&self, k: usize) -> f64 {
        self.bm_increments[..k].iter().sum()
    }

    /// Observable state at grid index `k`.
    pub fn state_at(&self, k: usize) -> State {
        let t = k as f64 * self.grid.dt();
        State { t, w: self.w_at(k), n: self.events.count_up_to(t) as u32 }
    }

    /// Samples a path under the reference law: Gaussian increments and a
    /// thinned marked point process.
    pub fn sample_reference(
        problem: &SwitchingProblem,
        grid: QuadratureGrid,
        seed: u64,
        index: u64,
    ) -> Result<Self, MppError> {
        let events = mpp::simulate_path_indexed(&problem.compensator, grid.horizon, seed, index)?;
        // Brownian stream kept separate from the jump stream.
        let mut rng = mpp::path_rng(seed ^ 0x9e37_79b9_7f4a_7c15, index);
        let sd = grid.dt().sqrt();
        let mut incs = vec![0.0; grid.n_steps];
        for inc in incs.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *inc = g * sd;
        }
        Ok(Self::new(grid, incs, events))
    }

    /// Samples a path whose jump part has the tilted compensator of `kernel`.
    pub fn sample_under_kernel(
        problem: &SwitchingProblem,
        kernel: &KernelField,
        grid: QuadratureGrid,
        seed: u64,
        index: u64,
    ) -> Result<Self, MppError> {
        let events = mpp::simulate_path_under_kernel_indexed(
            &problem.compensator,
            kernel,
            grid.horizon,
            seed,
            index,
        )?;
        let mut rng = mpp::path_rng(seed ^ 0x9e37_79b9_7f4a_7c15, index);
        let sd = grid.dt().sqrt();
        let mut incs = vec![0.0; grid.n_steps];
        for inc in incs.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *inc = g * sd;
        }
        Ok(Self::new(grid, incs, events))
    }
}

/// A single violated assumption, with enough location data to fix the input.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    /// `C_t(i, i)` must be zero.
    SelfSwitchCost { time_index: usize, mode: usize, value: f64 },
    /// `C_t(i, j)` must be nonnegative for `i != j`.
    NegativeCost { time_index: usize, from: usize, to: usize, value: f64 },
    /// `C(i,j) + C(j,l) - C(i,l)` must be strictly positive.
    TriangleSlack { time_index: usize, i: usize, j: usize, l: usize, slack: f64 },
    /// Terminal gains must satisfy `xi^i >= xi^j - C_T(i, j)`.
    TerminalConsistency { i: usize, j: usize, worst_gap: f64 },
    /// Kernel value outside `[0, bound]`.
    KernelBound { mode: usize, time_index: usize, mark: usize, value: f64, bound: f64 },
    /// `eta > 3 + M^4` fails for a mode kernel.
    EtaCondition { mode: usize, eta: f64, bound: f64 },
    /// `beta` must exceed `max(|M - 1|, 1)^2`.
    BetaTooSmall { beta: f64, required: f64 },
    /// Mark weights fail to form a probability at a grid time.
    MarkWeights { time_index: usize, sum: f64 },
    /// Intensity above its declared bound at a grid time.
    IntensityBound { time_index: usize, lambda: f64, bound: f64 },
}

/// Outcome of validating a problem on a grid. Violations are data, not
/// exceptions: an empty report means every checked assumption holds.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the standing assumptions on the grid's time points and terminal
/// states: cost structure (zero diagonal, nonnegativity, strict triangle
/// slack), terminal consistency, kernel bounds and integrability exponents,
/// the norm-weight condition on `beta`, and the compensator invariants.
pub fn validate_problem(
    problem: &SwitchingProblem,
    grid: &crate::lattice::ChainGrid,
) -> ValidationReport {
    let mut violations = Vec::new();
    let m = problem.n_modes();
    let times: Vec<f64> = (0..=grid.n_steps()).map(|k| grid.time(k)).collect();

    for (k, &t) in times.iter().enumerate() {
        for i in 0..m {
            let c_ii = problem.costs.eval(t, i, i);
            if c_ii != 0.0 {
                violations.push(Violation::SelfSwitchCost { time_index: k, mode: i, value: c_ii });
            }
            for j in 0..m {
                if i != j {
                    let c = problem.costs.eval(t, i, j);
                    if c < 0.0 {
                        violations.push(Violation::NegativeCost {
                            time_index: k,
                            from: i,
                            to: j,
                            value: c,
                        });
                    }
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                for l in 0..m {
                    if i != j && j != l && i != l {
                        let slack = problem.costs.eval(t, i, j) + problem.costs.eval(t, j, l)
                            - problem.costs.eval(t, i, l);
                        if slack <= 0.0 {
                            violations.push(Violation::TriangleSlack {
                                time_index: k,
                                i,
                                j,
                                l,
                                slack,
                            });
                        }
                    }
                }
            }
        }
    }

    // Terminal consistency over all terminal lattice states.
    let horizon = problem.horizon;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let c = problem.costs.eval(horizon, i, j);
            let mut worst = f64::INFINITY;
            for node in grid.nodes_at(grid.n_steps()) {
                let s = grid.state(node);
                let gap = (problem.modes[i].terminal)(s) - ((problem.modes[j].terminal)(s) - c);
                worst = worst.min(gap);
            }
            if worst < 0.0 {
                violations.push(Violation::TerminalConsistency { i, j, worst_gap: worst });
            }
        }
    }

    // Kernel bounds and integrability exponent per mode.
    for (i, mode) in problem.modes.iter().enumerate() {
        if !mode.kernel.eta_condition_holds() {
            violations.push(Violation::EtaCondition {
                mode: i,
                eta: mode.kernel.eta(),
                bound: mode.kernel.bound(),
            });
        }
        for (k, &t) in times.iter().enumerate() {
            for mark in 0..problem.compensator.n_marks() {
                let v = mode.kernel.value(t, mark);
                if !(0.0..=mode.kernel.bound() * (1.0 + 1e-12)).contains(&v) {
                    violations.push(Violation::KernelBound {
                        mode: i,
                        time_index: k,
                        mark,
                        value: v,
                        bound: mode.kernel.bound(),
                    });
                }
            }
        }
    }

    let required = problem.m_prime().powi(2);
    if problem.beta <= required {
        violations.push(Violation::BetaTooSmall { beta: problem.beta, required });
    }

    for (k, &t) in times.iter().enumerate() {
        match problem.compensator.check_at(t) {
            Err(MppError::MisnormalizedMarks { sum, .. }) => {
                violations.push(Violation::MarkWeights { time_index: k, sum });
            }
            Err(MppError::IntensityAboveBound { lambda, bound, .. }) => {
                violations.push(Violation::IntensityBound { time_index: k, lambda, bound });
            }
            _ => {}
        }
    }

    ValidationReport { violations }
}

/// Pathwise payoff of a strategy: terminal gain of the final mode, running
/// gains by left-endpoint quadrature on the path's grid, minus switching
/// costs. No expectation is taken.
///
/// Each quadrature cell `(t_k, t_{k+1}]` is charged with the data of
/// `mode_after(t_k)`, matching the left-open switch convention and the
/// lattice recursions. The strategy must start on the path grid.
pub fn reward_on_path(
    problem: &SwitchingProblem,
    strategy: &Strategy,
    path: &PathSample,
) -> Result<f64, ProblemError> {
    let grid = path.grid();
    let h = grid.dt();
    let (start_t, _) = strategy.start();
    let start_cell = start_t / h;
    if (start_cell - start_cell.round()).abs() > 1e-9 {
        return Err(ProblemError::StartOffGrid(start_t));
    }
    let start_k = start_cell.round() as usize;

    let mut total = 0.0;
    for k in start_k..grid.n_steps {
        let t = k as f64 * h;
        let mode = strategy.mode_after(t)?;
        let s = path.state_at(k);
        let da = problem.compensator.lambda(t) * h;
        total += (problem.modes[mode].running_f)(s) * da;
        total += (problem.modes[mode].running_g)(s) * h;
    }
    let terminal_mode = strategy.mode_at(grid.horizon)?;
    total += (problem.modes[terminal_mode].terminal)(path.state_at(grid.n_steps));
    total -= strategy.cost_up_to(problem, grid.horizon);
    Ok(total)
}

/// How [`estimate_reward`] samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum EstimateMethod {
    /// Sample under the reference law, weight payoffs by the measure-change
    /// weight of the strategy's switched kernel.
    Reweighted,
    /// Sample jump events directly under the strategy's tilted compensator.
    Direct,
}

#[derive(Clone, Copy, Debug)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub method: EstimateMethod,
    /// Resolution of the path grid (Brownian increments and quadrature).
    pub quad_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl McEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Self { mean, stderr: (var / n).sqrt() }
    }
}

/// Monte Carlo estimate of the expected reward of a fixed strategy, starting
/// at its start time (deterministic initial information).
///
/// Both methods estimate the same quantity; the reweighted route is the
/// measure-change identity `E[L_T * payoff]`, the direct route samples the
/// tilted law. Paths are generated from per-index streams, so the result is
/// deterministic in `(seed, n_paths, method)` and independent of scheduling.
pub fn estimate_reward(
    problem: &SwitchingProblem,
    strategy: &Strategy,
    cfg: &McConfig,
) -> Result<McEstimate, ProblemError> {
    if cfg.n_paths < 2 {
        return Err(ProblemError::TooFewPaths(cfg.n_paths));
    }
    let grid = QuadratureGrid::new(cfg.quad_steps, problem.horizon);
    let kernel = strategy.switched_kernel(problem);
    let samples: Result<Vec<f64>, ProblemError> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|i| -> Result<f64, ProblemError> {
            match cfg.method {
                EstimateMethod::Reweighted => {
                    let path = PathSample::sample_reference(problem, grid, cfg.seed, i)?;
                    let w = mpp::doleans_exponential(
                        path.events(),
                        &problem.compensator,
                        &kernel,
                        problem.horizon,
                        grid,
                    )?;
                    Ok(w * reward_on_path(problem, strategy, &path)?)
                }
                EstimateMethod::Direct => {
                    let path =
                        PathSample::sample_under_kernel(problem, &kernel, grid, cfg.seed, i)?;
                    reward_on_path(problem, strategy, &path)
                }
            }
        })
        .collect();
    Ok(McEstimate::from_samples(&samples?))
}
