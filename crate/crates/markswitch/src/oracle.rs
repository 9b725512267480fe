//! Independent ground truth: exact dynamic programming on the chain, and
//! exhaustive strategy enumeration on tiny instances.
//!
//! The Bellman recursion reweights transition probabilities directly, one
//! mode at a time, while the backward-equation route carries the measure
//! change inside its driver. The two agree by the one-step reweighting
//! identity, so cross-checking them exercises genuinely different code paths.

use serde::Serialize;
use thiserror::Error;

use crate::lattice::{BrownianBranch, ChainGrid, LatticeError, NodeArray, NodeState};
use crate::problem::{ProblemError, Strategy, SwitchingProblem};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(
        "enumeration too large: {strategies} strategies over {tree_paths} tree paths \
         (limits {max_strategies} / {max_tree_paths})"
    )]
    EnumerationTooLarge {
        strategies: usize,
        tree_paths: usize,
        max_strategies: usize,
        max_tree_paths: usize,
    },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Best action at a `(node, mode)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Action {
    Continue,
    SwitchTo(usize),
}

/// The dynamic-programming value `v(node, mode)` and its argmax action.
#[derive(Clone, Debug)]
pub struct ValueTable {
    values: Vec<NodeArray>,
    actions: Vec<Vec<Action>>,
}

impl ValueTable {
    pub fn value(&self, grid: &ChainGrid, node: NodeState, mode: usize) -> f64 {
        self.values[mode].get(grid, node)
    }

    pub fn action(&self, grid: &ChainGrid, node: NodeState, mode: usize) -> Action {
        self.actions[mode][grid.node_index(node)]
    }

    pub fn root_value(&self, grid: &ChainGrid, mode: usize) -> f64 {
        self.value(grid, grid.root(), mode)
    }
}

/// Bellman recursion over the chain: at each node and mode, the better of
/// continuing in place or paying a switching cost and continuing in another
/// mode, each continuation being the mode-tilted one-step expectation plus
/// the mode's running gains. A single switch per step suffices: the strict
/// triangle slack makes chained same-time switches strictly worse.
///
/// Ties prefer continuing, then the lowest target index.
pub fn dp_value(grid: &ChainGrid, problem: &SwitchingProblem) -> Result<ValueTable, OracleError> {
    let m = problem.n_modes();
    let n = grid.n_steps();
    let mut values: Vec<NodeArray> = (0..m).map(|_| NodeArray::zeros(grid)).collect();
    let mut actions: Vec<Vec<Action>> =
        (0..m).map(|_| vec![Action::Continue; grid.n_nodes_total()]).collect();

    for node in grid.nodes_at(n) {
        let s = grid.state(node);
        for (i, mode) in problem.modes.iter().enumerate() {
            values[i].set(grid, node, (mode.terminal)(s));
        }
    }

    for k in (0..n).rev() {
        let t = grid.time(k);
        let da = grid.da(k);
        let dt = grid.dt();
        let nodes: Vec<NodeState> = grid.nodes_at(k).collect();
        for node in nodes {
            let s = grid.state(node);
            let mut continuation = Vec::with_capacity(m);
            for (j, mode) in problem.modes.iter().enumerate() {
                let next = &values[j];
                let expected = grid.reweighted_expectation(
                    node,
                    |bm: BrownianBranch, jump: Option<usize>| {
                        next.get(grid, grid.child(node, bm, jump))
                    },
                    &mode.kernel,
                )?;
                continuation.push((mode.running_f)(s) * da + (mode.running_g)(s) * dt + expected);
            }
            for i in 0..m {
                let mut best = continuation[i];
                let mut act = Action::Continue;
                for (j, cont) in continuation.iter().enumerate() {
                    if j == i {
                        continue;
                    }
                    let candidate = cont - problem.costs.eval(t, i, j);
                    if candidate > best {
                        best = candidate;
                        act = Action::SwitchTo(j);
                    }
                }
                values[i].set(grid, node, best);
                actions[i][grid.node_index(node)] = act;
            }
        }
    }

    Ok(ValueTable { values, actions })
}

#[allow(clippy::too_many_arguments)]
fn walk_tree(
    grid: &ChainGrid,
    problem: &SwitchingProblem,
    modes: &[usize],
    terminal_mode: usize,
    node: NodeState,
    prob: f64,
    gains: f64,
    acc: &mut f64,
) {
    if node.k == grid.n_steps() {
        let xi = (problem.modes[terminal_mode].terminal)(grid.state(node));
        *acc += prob * (gains + xi);
        return;
    }
    let k = node.k;
    let mode = &problem.modes[modes[k]];
    let s = grid.state(node);
    let gain_k = (mode.running_f)(s) * grid.da(k) + (mode.running_g)(s) * grid.dt();
    let t = grid.time(k);
    let mut no_jump = 1.0;
    let mut jump_probs = Vec::with_capacity(grid.n_marks());
    for mark in 0..grid.n_marks() {
        let p = mode.kernel.value(t, mark) * grid.jump_prob(k, mark);
        jump_probs.push(p);
        no_jump -= p;
    }
    for bm in BrownianBranch::BOTH {
        let branch = 0.5 * no_jump;
        if branch != 0.0 {
            walk_tree(
                grid,
                problem,
                modes,
                terminal_mode,
                grid.child(node, bm, None),
                prob * branch,
                gains + gain_k,
                acc,
            );
        }
        for (mark, &p) in jump_probs.iter().enumerate() {
            let branch = 0.5 * p;
            if branch != 0.0 {
                walk_tree(
                    grid,
                    problem,
                    modes,
                    terminal_mode,
                    grid.child(node, bm, Some(mark)),
                    prob * branch,
                    gains + gain_k,
                    acc,
                );
            }
        }
    }
}

/// Exact expected payoff of a deterministic-time strategy, by enumerating
/// every `(brownian, jump)` path of the chain under the strategy's tilted
/// law. Exponential in the number of steps; gated by the caller.
pub fn strategy_value_on_chain(
    grid: &ChainGrid,
    problem: &SwitchingProblem,
    strategy: &Strategy,
) -> Result<f64, OracleError> {
    let n = grid.n_steps();
    let mut modes = Vec::with_capacity(n);
    for k in 0..n {
        modes.push(strategy.mode_after(grid.time(k))?);
    }
    let terminal_mode = strategy.mode_at(grid.horizon())?;
    let total_cost = strategy.cost_up_to(problem, grid.horizon());

    let mut acc = 0.0;
    walk_tree(grid, problem, &modes, terminal_mode, grid.root(), 1.0, 0.0, &mut acc);
    Ok(acc - total_cost)
}

const MAX_ENUMERATED_STRATEGIES: usize = 20_000;
const MAX_TREE_PATHS: usize = 2_000_000;

/// Exhaustive search over deterministic-time strategies with at most
/// `max_switches` switches at grid times (the horizon included), each
/// evaluated exactly by [`strategy_value_on_chain`].
///
/// The best value never exceeds the dynamic-programming root value; it
/// attains it when the optimal strategy is deterministic in time, which holds
/// whenever the instance data do not depend on the path state.
pub fn enumerate_strategies(
    grid: &ChainGrid,
    problem: &SwitchingProblem,
    start_mode: usize,
    max_switches: usize,
) -> Result<(f64, Strategy), OracleError> {
    let m = problem.n_modes();
    let n = grid.n_steps();

    let tree_paths =
        (2 * (grid.n_marks() + 1)).checked_pow(n as u32).unwrap_or(usize::MAX);
    let mut strategies_estimate = 1usize;
    let mut time_seqs = 1usize;
    for s in 1..=max_switches {
        // Nondecreasing time sequences of length s over n+1 grid times.
        time_seqs = time_seqs.saturating_mul(n + s) / s;
        strategies_estimate = strategies_estimate
            .saturating_add(time_seqs.saturating_mul((m - 1).saturating_pow(s as u32)));
    }
    if strategies_estimate > MAX_ENUMERATED_STRATEGIES || tree_paths > MAX_TREE_PATHS {
        return Err(OracleError::EnumerationTooLarge {
            strategies: strategies_estimate,
            tree_paths,
            max_strategies: MAX_ENUMERATED_STRATEGIES,
            max_tree_paths: MAX_TREE_PATHS,
        });
    }

    // Search frontier: (earliest next switch index, current mode, switches).
    type Frontier = Vec<(usize, usize, Vec<(f64, usize)>)>;
    let mut best: Option<(f64, Strategy)> = None;
    let mut stack: Frontier = vec![(0, start_mode, Vec::new())];
    while let Some((from_idx, current_mode, switches)) = stack.pop() {
        let strategy = Strategy::new((0.0, start_mode), switches.clone(), m)?;
        let value = strategy_value_on_chain(grid, problem, &strategy)?;
        match &best {
            Some((v, _)) if value <= *v => {}
            _ => best = Some((value, strategy)),
        }
        if switches.len() < max_switches {
            for idx in from_idx..=n {
                for target in 0..m {
                    if target == current_mode {
                        continue;
                    }
                    let mut next = switches.clone();
                    next.push((grid.time(idx), target));
                    stack.push((idx, target, next));
                }
            }
        }
    }

    Ok(best.expect("at least the stay-put strategy is enumerated"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::mpp::{CompensatorSpec, KernelField};
    use crate::problem::{constant_fn, data_fn, CostStructure, ModeSpec};

    fn single_mode_problem() -> SwitchingProblem {
        SwitchingProblem {
            modes: vec![ModeSpec {
                name: "only".into(),
                terminal: data_fn(|s| 1.0 + 0.5 * s.n as f64),
                running_f: constant_fn(0.2),
                running_g: constant_fn(0.1),
                kernel: KernelField::constant(1.5),
            }],
            costs: CostStructure::uniform(1.0),
            compensator: CompensatorSpec::constant_single_mark(1.0),
            horizon: 1.0,
            beta: 2.0,
        }
    }

    fn identical_two_modes(cost: f64) -> SwitchingProblem {
        let mode = ModeSpec {
            name: "m".into(),
            terminal: data_fn(|s| 0.6 + 0.2 * s.w.max(0.0)),
            running_f: constant_fn(0.3),
            running_g: constant_fn(0.05),
            kernel: KernelField::constant(1.3),
        };
        SwitchingProblem {
            modes: vec![mode.clone(), ModeSpec { name: "m2".into(), ..mode }],
            costs: CostStructure::uniform(cost),
            compensator: CompensatorSpec::constant_single_mark(1.0),
            horizon: 1.0,
            beta: 2.0,
        }
    }

    #[test]
    fn single_mode_dp_is_the_plain_tilted_expectation() {
        let p = single_mode_problem();
        let grid = ChainGrid::build(&p, 6).unwrap();
        let table = dp_value(&grid, &p).unwrap();
        let stay = Strategy::stay((0.0, 0));
        let direct = strategy_value_on_chain(&grid, &p, &stay).unwrap();
        assert!(
            (table.root_value(&grid, 0) - direct).abs() < 1e-12,
            "dp {} vs tree {}",
            table.root_value(&grid, 0),
            direct
        );
    }

    #[test]
    fn identical_modes_have_symmetric_values_and_never_switch() {
        let p = identical_two_modes(0.25);
        let grid = ChainGrid::build(&p, 8).unwrap();
        let table = dp_value(&grid, &p).unwrap();
        for k in 0..=8 {
            for node in grid.nodes_at(k) {
                let v0 = table.value(&grid, node, 0);
                let v1 = table.value(&grid, node, 1);
                assert_eq!(v0, v1, "symmetry at {node:?}");
                if k < 8 {
                    assert_eq!(table.action(&grid, node, 0), Action::Continue);
                }
            }
        }
    }

    #[test]
    fn terminal_shift_moves_values_without_changing_actions() {
        let (p, _) = instances::instance_a();
        let grid = ChainGrid::build(&p, 10).unwrap();
        let table = dp_value(&grid, &p).unwrap();
        let shifted_problem = instances::shift_terminals(&p, 2.5);
        let shifted = dp_value(&grid, &shifted_problem).unwrap();
        for mode in 0..p.n_modes() {
            for k in 0..=10 {
                for node in grid.nodes_at(k) {
                    let d = shifted.value(&grid, node, mode) - table.value(&grid, node, mode);
                    assert!((d - 2.5).abs() < 1e-12);
                    if k < 10 {
                        assert_eq!(
                            shifted.action(&grid, node, mode),
                            table.action(&grid, node, mode)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn value_table_is_bellman_consistent() {
        // v(node, i) >= v(node, j) - C(i, j): switching straight to j's
        // position is always an option, with strict triangle slack covering
        // the chained case.
        let (p, _) = instances::instance_rho_zero();
        let grid = ChainGrid::build(&p, 8).unwrap();
        let table = dp_value(&grid, &p).unwrap();
        for k in 0..=8 {
            let t = grid.time(k);
            for node in grid.nodes_at(k) {
                for i in 0..p.n_modes() {
                    for j in 0..p.n_modes() {
                        if i == j {
                            continue;
                        }
                        let lhs = table.value(&grid, node, i);
                        let rhs = table.value(&grid, node, j) - p.costs.eval(t, i, j);
                        assert!(lhs >= rhs - 1e-12, "at {node:?}: v({i}) < v({j}) - C");
                    }
                }
            }
        }
    }

    #[test]
    fn raising_costs_never_raises_values() {
        let (p, _) = instances::instance_a();
        let grid = ChainGrid::build(&p, 10).unwrap();
        let base = dp_value(&grid, &p).unwrap();
        let pricier = instances::scale_costs(&p, 1.5);
        let table = dp_value(&grid, &pricier).unwrap();
        for mode in 0..p.n_modes() {
            for k in 0..=10 {
                for node in grid.nodes_at(k) {
                    assert!(
                        table.value(&grid, node, mode) <= base.value(&grid, node, mode) + 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn enumeration_on_single_mode_returns_the_stay_value() {
        let p = single_mode_problem();
        let grid = ChainGrid::build(&p, 5).unwrap();
        let (best, strategy) = enumerate_strategies(&grid, &p, 0, 2).unwrap();
        assert_eq!(strategy.n_switches(), 0);
        let stay = strategy_value_on_chain(&grid, &p, &Strategy::stay((0.0, 0))).unwrap();
        assert_eq!(best, stay);
    }

    #[test]
    fn enumeration_on_identical_modes_prefers_no_switch() {
        let p = identical_two_modes(0.25);
        let grid = ChainGrid::build(&p, 5).unwrap();
        let (best, strategy) = enumerate_strategies(&grid, &p, 0, 2).unwrap();
        assert_eq!(strategy.n_switches(), 0);
        let table = dp_value(&grid, &p).unwrap();
        assert!((best - table.root_value(&grid, 0)).abs() < 1e-9);
    }

    #[test]
    fn enumeration_never_beats_dynamic_programming() {
        let (p, _) = instances::instance_a();
        let grid = ChainGrid::build(&p, 6).unwrap();
        let table = dp_value(&grid, &p).unwrap();
        for start in 0..p.n_modes() {
            let (best, _) = enumerate_strategies(&grid, &p, start, 2).unwrap();
            assert!(best <= table.root_value(&grid, start) + 1e-9);
        }
    }

    #[test]
    fn enumeration_size_gate_triggers() {
        let (p, _) = instances::instance_a();
        let grid = ChainGrid::build(&p, 40).unwrap();
        assert!(matches!(
            enumerate_strategies(&grid, &p, 0, 6),
            Err(OracleError::EnumerationTooLarge { .. })
        ));
    }
}
