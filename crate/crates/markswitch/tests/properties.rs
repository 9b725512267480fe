//! Property-based and enumeration-backed invariants that go beyond the
//! per-module unit tests.

use proptest::prelude::*;

use markswitch::instances;
use markswitch::lattice::{BrownianBranch, ChainGrid, NodeState};
use markswitch::mpp::{CompensatorSpec, KernelField, MarkedPath, QuadratureGrid};
use markswitch::problem::{constant_fn, CostStructure, ModeSpec, Strategy, SwitchingProblem};

fn small_problem(lambda: f64, mark_weights: Vec<f64>) -> SwitchingProblem {
    let marks: Vec<String> = (0..mark_weights.len()).map(|m| format!("m{m}")).collect();
    SwitchingProblem {
        modes: vec![ModeSpec {
            name: "only".into(),
            terminal: constant_fn(0.0),
            running_f: constant_fn(0.0),
            running_g: constant_fn(0.0),
            kernel: KernelField::constant(1.0),
        }],
        costs: CostStructure::uniform(1.0),
        compensator: CompensatorSpec::constant_with_marks(lambda, marks, mark_weights),
        horizon: 1.0,
        beta: 2.0,
    }
}

/// Full-tree expectation of a terminal functional of `(w, n)`, enumerating
/// all `(brownian, jump)` outcome sequences under the reference law.
fn tree_expectation(grid: &ChainGrid, terminal: &dyn Fn(NodeState) -> f64) -> f64 {
    fn recurse(
        grid: &ChainGrid,
        node: NodeState,
        prob: f64,
        terminal: &dyn Fn(NodeState) -> f64,
        acc: &mut f64,
    ) {
        if node.k == grid.n_steps() {
            *acc += prob * terminal(node);
            return;
        }
        for bm in BrownianBranch::BOTH {
            let outcomes = std::iter::once(None).chain((0..grid.n_marks()).map(Some));
            for jump in outcomes {
                let p = grid.branch_prob(node, jump);
                if p > 0.0 {
                    recurse(grid, grid.child(node, bm, jump), prob * p, terminal, acc);
                }
            }
        }
    }
    let mut acc = 0.0;
    recurse(grid, grid.root(), 1.0, terminal, &mut acc);
    acc
}

#[test]
fn tower_property_reproduces_full_tree_expectations() {
    for (lambda, weights, n_steps) in [
        (1.0, vec![1.0], 6),
        (1.5, vec![0.3, 0.7], 5),
        (0.8, vec![0.5, 0.2, 0.3], 4),
    ] {
        let p = small_problem(lambda, weights);
        let grid = ChainGrid::build(&p, n_steps).unwrap();
        let terminal = |node: NodeState| {
            (0.3 * node.w as f64).sin() + 1.7 * node.n as f64 + 0.25 * (node.w * node.w) as f64
        };
        // Backward pass of plain one-step expectations.
        let mut values = vec![0.0; grid.n_nodes_total()];
        for node in grid.nodes_at(grid.n_steps()) {
            values[grid.node_index(node)] = terminal(node);
        }
        for k in (0..grid.n_steps()).rev() {
            for node in grid.nodes_at(k) {
                let coeffs = grid.step_coefficients(node, |bm, jump| {
                    values[grid.node_index(grid.child(node, bm, jump))]
                });
                values[grid.node_index(node)] = coeffs.expectation;
            }
        }
        let iterated = values[grid.node_index(grid.root())];
        let direct = tree_expectation(&grid, &terminal);
        assert!(
            (iterated - direct).abs() <= 1e-12 * (1.0 + direct.abs()),
            "lambda {lambda}: iterated {iterated} vs direct {direct}"
        );
    }
}

#[test]
fn jump_count_marginals_match_the_bernoulli_convolution() {
    for n_steps in [4usize, 7, 10] {
        let p = small_problem(1.3, vec![0.6, 0.4]);
        let grid = ChainGrid::build(&p, n_steps).unwrap();

        // Forward pass of the chain law, marginalised over w.
        let probs = markswitch::bsde::forward_probabilities(&grid);
        let mut lattice_dist = vec![0.0; n_steps + 1];
        for node in grid.nodes_at(n_steps) {
            lattice_dist[node.n as usize] += probs.get(&grid, node);
        }

        // Independent per-step Bernoulli convolution.
        let mut exact = vec![1.0];
        for k in 0..n_steps {
            let q: f64 = (0..grid.n_marks()).map(|m| grid.jump_prob(k, m)).sum();
            let mut next = vec![0.0; exact.len() + 1];
            for (count, mass) in exact.iter().enumerate() {
                next[count] += mass * (1.0 - q);
                next[count + 1] += mass * q;
            }
            exact = next;
        }

        for count in 0..=n_steps {
            assert!(
                (lattice_dist[count] - exact[count]).abs() < 1e-12,
                "N={n_steps}, count {count}: lattice {} vs exact {}",
                lattice_dist[count],
                exact[count]
            );
        }
    }
}

#[test]
fn reweighting_identity_on_every_node_and_instance_kernel() {
    for (name, p, _) in instances::all_instances() {
        let grid = ChainGrid::build(&p, 10).unwrap();
        // Child values from a genuine solution surface keep the check honest.
        let floor = markswitch::switching::solve_mode_floor(&grid, &p).unwrap();
        let values_of = &floor[0];
        for mode in &p.modes {
            for k in 0..grid.n_steps() {
                for node in grid.nodes_at(k) {
                    let lookup = |bm: BrownianBranch, jump: Option<usize>| {
                        values_of.y(&grid, grid.child(node, bm, jump))
                    };
                    let coeffs = grid.step_coefficients(node, lookup);
                    let t = grid.time(k);
                    let generator: f64 = coeffs.expectation
                        + (0..grid.n_marks())
                            .map(|m| {
                                coeffs.u[m]
                                    * (mode.kernel.value(t, m) - 1.0)
                                    * grid.jump_prob(k, m)
                            })
                            .sum::<f64>();
                    let direct =
                        grid.reweighted_expectation(node, lookup, &mode.kernel).unwrap();
                    let scale = direct.abs().max(1.0);
                    assert!(
                        ((generator - direct) / scale).abs() < 1e-12,
                        "{name} {node:?}: generator {generator} vs direct {direct}"
                    );
                }
            }
        }
    }
}

#[test]
fn mode_floors_match_tree_enumeration() {
    let (p, _) = instances::instance_a();
    let grid = ChainGrid::build(&p, 6).unwrap();
    let floors = markswitch::switching::solve_mode_floor(&grid, &p).unwrap();
    for mode in 0..p.n_modes() {
        let stay = Strategy::stay((0.0, mode));
        let tree = markswitch::oracle::strategy_value_on_chain(&grid, &p, &stay).unwrap();
        let gap = (floors[mode].root_value(&grid) - tree).abs();
        assert!(gap <= 1e-12, "mode {mode}: floor vs tree gap {gap}");
    }
}

#[test]
fn bounding_process_on_a_neutral_single_mode_is_the_absolute_data_value() {
    // With kernel 1 the bounding driver's tilt vanishes, leaving the plain
    // expectation of the absolute data.
    let mode = ModeSpec {
        name: "only".into(),
        terminal: markswitch::problem::data_fn(|s| 0.4 + 0.2 * s.w),
        running_f: markswitch::problem::data_fn(|s| 0.3 - 0.1 * s.t),
        running_g: constant_fn(0.05),
        kernel: KernelField::constant(1.0),
    };
    let p = SwitchingProblem {
        modes: vec![mode.clone()],
        costs: CostStructure::uniform(1.0),
        compensator: CompensatorSpec::constant_single_mark(1.0),
        horizon: 1.0,
        beta: 2.0,
    };
    let grid = ChainGrid::build(&p, 10).unwrap();
    let upper = markswitch::switching::solve_upper_bound(&grid, &p).unwrap();

    let absolute = SwitchingProblem {
        modes: vec![ModeSpec {
            name: "abs".into(),
            terminal: {
                let xi = mode.terminal.clone();
                markswitch::problem::data_fn(move |s| xi(s).abs())
            },
            running_f: {
                let f = mode.running_f.clone();
                markswitch::problem::data_fn(move |s| f(s).abs())
            },
            running_g: {
                let g = mode.running_g.clone();
                markswitch::problem::data_fn(move |s| g(s).abs())
            },
            kernel: KernelField::constant(1.0),
        }],
        ..p.clone()
    };
    let floors = markswitch::switching::solve_mode_floor(&grid, &absolute).unwrap();
    assert!(upper.sup_distance(&floors[0]) <= 1e-12);

    // Nonnegative data: the bound dominates the floor nodewise.
    let plain_floors = markswitch::switching::solve_mode_floor(&grid, &p).unwrap();
    for k in 0..=grid.n_steps() {
        for node in grid.nodes_at(k) {
            assert!(upper.y(&grid, node) >= plain_floors[0].y(&grid, node) - 1e-12);
        }
    }
}

#[test]
fn single_mode_verification_matches_the_stay_strategy() {
    let mode = ModeSpec {
        name: "only".into(),
        terminal: markswitch::problem::data_fn(|s| 0.5 + 0.1 * s.n as f64),
        running_f: constant_fn(0.2),
        running_g: constant_fn(0.1),
        kernel: KernelField::constant(1.4),
    };
    let p = SwitchingProblem {
        modes: vec![mode],
        costs: CostStructure::uniform(1.0),
        compensator: CompensatorSpec::constant_single_mark(1.0),
        horizon: 1.0,
        beta: 2.0,
    };
    let grid = ChainGrid::build(&p, 10).unwrap();
    let (system, _) = markswitch::switching::picard_solve(&grid, &p, 1e-10, 10).unwrap();
    let report =
        markswitch::switching::verify_representation(&system, &grid, &p, 4000, 23).unwrap();
    assert!(report.per_mode[0].extracted_sigma_distance <= 3.0);
}

#[test]
fn forced_switches_between_identical_modes_burn_exactly_their_cost() {
    let (p, _) = instances::instance_sym();
    let grid = ChainGrid::build(&p, 12).unwrap();
    let (system, _) = markswitch::switching::picard_solve(&grid, &p, 1e-10, 24).unwrap();
    let y_root = system.root_value(&grid, 0);
    // One pointless switch between identical modes costs exactly 0.05.
    let one_switch = Strategy::new((0.0, 0), vec![(0.25, 1)], 2).unwrap();
    let est =
        markswitch::switching::estimate_on_chain(&grid, &p, &one_switch, 20_000, 31).unwrap();
    let expected = y_root - 0.05;
    assert!(
        (est.mean - expected).abs() <= 3.0 * est.stderr,
        "mean {} vs expected {expected} (stderr {})",
        est.mean,
        est.stderr
    );
}

#[test]
fn solution_norms_stay_within_the_data_bound_on_every_instance() {
    for (name, p, n) in instances::all_instances() {
        let grid = ChainGrid::build(&p, n).unwrap();
        let spec = markswitch::switching::mode_equation(&p, 0);
        let sol = markswitch::bsde::solve_standard(&grid, &spec).unwrap();
        let total = sol.weighted_norms.total();
        let bound = markswitch::bsde::data_norm_bound(&grid, &spec, &sol);
        assert!(total.is_finite(), "{name}");
        assert!(total <= 10.0 * bound, "{name}: norms {total} vs 10x bound {bound}");
    }
}

proptest! {
    /// The one-step reweighting identity holds for arbitrary child values and
    /// arbitrary bounded kernels, to relative 1e-12.
    #[test]
    fn reweighting_identity(
        values in proptest::collection::vec(-10.0..10.0f64, 6),
        rho in proptest::collection::vec(0.0..2.0f64, 2),
        lambda in 0.1..1.8f64,
        split in 0.05..0.95f64,
    ) {
        let p = small_problem(lambda, vec![split, 1.0 - split]);
        let grid = ChainGrid::build(&p, 4).unwrap();
        let kernel = KernelField::per_mark(rho.clone());
        let node = grid.root();
        let lookup = |bm: BrownianBranch, jump: Option<usize>| {
            let b = usize::from(bm == BrownianBranch::Down);
            let j = jump.map_or(0, |m| m + 1);
            values[b * 3 + j]
        };
        let coeffs = grid.step_coefficients(node, lookup);
        let generator: f64 = coeffs.expectation
            + (0..2)
                .map(|m| coeffs.u[m] * (rho[m] - 1.0) * grid.jump_prob(0, m))
                .sum::<f64>();
        let direct = grid.reweighted_expectation(node, lookup, &kernel).unwrap();
        let scale = direct.abs().max(1.0);
        prop_assert!(((generator - direct) / scale).abs() < 1e-12);
    }

    /// Representation coefficients: u is the jump/no-jump conditional gap.
    #[test]
    fn u_is_the_conditional_gap(
        values in proptest::collection::vec(-5.0..5.0f64, 6),
    ) {
        let p = small_problem(1.0, vec![0.5, 0.5]);
        let grid = ChainGrid::build(&p, 4).unwrap();
        let lookup = |bm: BrownianBranch, jump: Option<usize>| {
            let b = usize::from(bm == BrownianBranch::Down);
            let j = jump.map_or(0, |m| m + 1);
            values[b * 3 + j]
        };
        let coeffs = grid.step_coefficients(grid.root(), lookup);
        for m in 0..2 {
            prop_assert!(
                (coeffs.u[m] - (coeffs.jump_conditional[m] - coeffs.no_jump_conditional)).abs()
                    < 1e-15
            );
        }
    }

    /// The measure-change weight is positive on paths that avoid zero kernel
    /// values, and multiplicative in the kernel's event factors.
    #[test]
    fn weight_positivity(
        rho in 0.05..2.0f64,
        seed in 0u64..500,
    ) {
        let comp = CompensatorSpec::constant_single_mark(2.0);
        let kernel = KernelField::constant(rho);
        let path = markswitch::mpp::simulate_path(&comp, 1.0, seed).unwrap();
        let quad = QuadratureGrid::new(32, 1.0);
        let w = markswitch::mpp::doleans_exponential(&path, &comp, &kernel, 1.0, quad).unwrap();
        prop_assert!(w > 0.0);
        let expected = rho.powi(path.n_events() as i32) * ((1.0 - rho) * 2.0).exp();
        prop_assert!((w - expected).abs() < 1e-9 * expected.max(1.0));
    }

    /// Mode processes and cumulated costs of random strategies: piecewise
    /// structure, monotone costs, additivity over the switch set.
    #[test]
    fn strategy_process_invariants(
        times in proptest::collection::vec(0.0..1.0f64, 0..6),
        targets in proptest::collection::vec(0usize..3, 6),
    ) {
        let mut times = times;
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut switches = Vec::new();
        let mut mode = 0usize;
        for (i, t) in times.iter().enumerate() {
            let raw = targets[i] % 3;
            let target = if raw == mode { (raw + 1) % 3 } else { raw };
            switches.push((*t, target));
            mode = target;
        }
        let strategy = Strategy::new((0.0, 0), switches.clone(), 3).unwrap();
        let (sym, _) = instances::instance_sym();
        let three_mode = SwitchingProblem {
            modes: vec![
                sym.modes[0].clone(),
                sym.modes[1].clone(),
                sym.modes[0].clone(),
            ],
            costs: CostStructure::uniform(0.05),
            compensator: sym.compensator.clone(),
            horizon: 1.0,
            beta: 2.0,
        };

        // Start mode holds up to and including the first switch time.
        if let Some(&(t1, _)) = switches.first() {
            prop_assert_eq!(strategy.mode_at(t1 * 0.5).unwrap(), 0);
            prop_assert_eq!(strategy.mode_at(t1).unwrap(), 0);
        }
        // Costs are nondecreasing and additive: total equals per-switch sum.
        let mut prev_cost = 0.0;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let c = strategy.cost_up_to(&three_mode, t);
            prop_assert!(c >= prev_cost);
            prev_cost = c;
        }
        let total = strategy.cost_up_to(&three_mode, 1.0);
        prop_assert!((total - 0.05 * switches.len() as f64).abs() < 1e-12);
    }

    /// The two solution routes agree on randomized two-mode instances, not
    /// just the curated suite.
    #[test]
    fn solver_and_oracle_agree_on_random_instances(
        rho in proptest::collection::vec(0.0..2.0f64, 4),
        xi_const in 0.0..1.0f64,
        xi_w in 0.0..0.4f64,
        f_coef in proptest::collection::vec(-0.4..0.4f64, 4),
        g_coef in proptest::collection::vec(-0.2..0.2f64, 2),
        cost in 0.02..0.2f64,
        lambda in 0.5..1.5f64,
    ) {
        let terminal = markswitch::problem::data_fn(move |s: markswitch::problem::State| {
            xi_const + xi_w * s.w.abs()
        });
        let make_mode = |i: usize| ModeSpec {
            name: format!("m{i}"),
            terminal: terminal.clone(),
            running_f: {
                let (a, b) = (f_coef[2 * i], f_coef[2 * i + 1]);
                markswitch::problem::data_fn(move |s| a + b * s.t)
            },
            running_g: {
                let c = g_coef[i];
                markswitch::problem::data_fn(move |s| c * s.w)
            },
            kernel: KernelField::per_mark(vec![rho[2 * i], rho[2 * i + 1]]).with_eta(20.0),
        };
        let p = SwitchingProblem {
            modes: vec![make_mode(0), make_mode(1)],
            costs: CostStructure::uniform(cost),
            compensator: CompensatorSpec::constant_with_marks(
                lambda,
                vec!["a".into(), "b".into()],
                vec![0.5, 0.5],
            ),
            horizon: 1.0,
            beta: 2.0,
        };
        let grid = ChainGrid::build(&p, 8).unwrap();
        prop_assert!(markswitch::problem::validate_problem(&p, &grid).is_valid());
        let (system, report) =
            markswitch::switching::picard_solve(&grid, &p, 1e-10, 16).unwrap();
        prop_assert!(report.converged);
        prop_assert_eq!(report.monotonicity_violations, 0);
        let dp = markswitch::oracle::dp_value(&grid, &p).unwrap();
        for mode in 0..2 {
            for k in 0..=8 {
                for node in grid.nodes_at(k) {
                    let gap =
                        (system.y(&grid, node, mode) - dp.value(&grid, node, mode)).abs();
                    prop_assert!(gap <= 1e-9, "gap {} at {:?} mode {}", gap, node, mode);
                }
            }
        }
    }

    /// Paths generated by thinning always satisfy the path invariants.
    #[test]
    fn simulated_paths_are_well_formed(seed in 0u64..1000) {
        let comp = CompensatorSpec::constant_with_marks(
            3.0,
            vec!["a".into(), "b".into()],
            vec![0.25, 0.75],
        );
        let path = markswitch::mpp::simulate_path(&comp, 1.0, seed).unwrap();
        let mut prev = 0.0;
        for &(t, mark) in path.events() {
            prop_assert!(t > prev && t <= 1.0);
            prop_assert!(mark < 2);
            prev = t;
        }
        // Round-trips through the constructor.
        prop_assert!(MarkedPath::new(path.events().to_vec(), 1.0).is_ok());
    }
}
