//! Small benchmark instances shared by the test suite, the guide, and the
//! CLI selftest.
//!
//! Every instance has unit horizon and passes validation on its recommended
//! grid. `crossing_gains` has data that depend on time only, so its optimal
//! strategy is deterministic in time and exhaustive enumeration attains the
//! dynamic-programming value; the others exercise state-dependent gains,
//! three modes, several marks, a time-varying intensity, and a kernel that
//! shuts one mark off completely.

use std::sync::Arc;

use crate::bsde::{BsdeSpec, DriverG};
use crate::mpp::{CompensatorSpec, KernelField};
use crate::problem::{
    constant_fn, data_fn, CostStructure, DataFn, ModeSpec, SwitchingProblem,
};

fn mode(
    name: &str,
    terminal: DataFn,
    running_f: DataFn,
    running_g: DataFn,
    kernel: KernelField,
) -> ModeSpec {
    ModeSpec { name: name.into(), terminal, running_f, running_g, kernel }
}

/// Two modes with time-crossing running gains and constant kernels `1.5` and
/// `0.5`. All data depend on time only.
pub fn instance_a() -> (SwitchingProblem, usize) {
    let problem = SwitchingProblem {
        modes: vec![
            mode(
                "early",
                constant_fn(0.5),
                data_fn(|s| 0.6 * (1.0 - s.t)),
                constant_fn(0.1),
                KernelField::constant(1.5),
            ),
            mode(
                "late",
                constant_fn(0.5),
                data_fn(|s| 1.2 * s.t),
                constant_fn(0.0),
                KernelField::constant(0.5),
            ),
        ],
        costs: CostStructure::uniform(0.08),
        compensator: CompensatorSpec::constant_single_mark(1.0),
        horizon: 1.0,
        beta: 2.0,
    };
    (problem, 20)
}

/// Two modes with state-dependent gains: terminal and `dA`-gains react to the
/// jump count, `dt`-gains to the Brownian coordinate. Mode 1 dampens the jump
/// intensity, mode 0 amplifies it.
pub fn instance_b() -> (SwitchingProblem, usize) {
    let terminal = data_fn(|s| 0.4 + 0.3 * s.w.max(0.0) + 0.05 * (s.n as f64).min(4.0));
    let problem = SwitchingProblem {
        modes: vec![
            mode(
                "amplify",
                terminal.clone(),
                data_fn(|s| 0.3 - 0.04 * (s.n as f64).min(5.0)),
                data_fn(|s| 0.1 * s.w),
                KernelField::constant(1.6),
            ),
            mode(
                "dampen",
                terminal,
                data_fn(|s| 0.1 + 0.03 * (s.n as f64).min(5.0)),
                data_fn(|s| -0.05 * s.w),
                KernelField::constant(0.4),
            ),
        ],
        costs: CostStructure::uniform(0.1),
        compensator: CompensatorSpec::constant_single_mark(1.2),
        horizon: 1.0,
        beta: 2.0,
    };
    (problem, 50)
}

/// Three modes over two marks; the third mode's kernel is identically zero on
/// the second mark, cutting that part of the dynamic off entirely. Kernel
/// values span `[0, 2]`.
pub fn instance_rho_zero() -> (SwitchingProblem, usize) {
    let terminal = data_fn(|s| 0.5 + 0.2 * s.w.max(0.0));
    let problem = SwitchingProblem {
        modes: vec![
            mode(
                "neutral",
                terminal.clone(),
                constant_fn(0.2),
                constant_fn(0.0),
                KernelField::per_mark(vec![1.0, 1.0]).with_eta(20.0),
            ),
            mode(
                "boost-first",
                terminal.clone(),
                data_fn(|s| 0.1 + 0.1 * (s.n as f64).min(6.0)),
                constant_fn(0.0),
                KernelField::per_mark(vec![2.0, 1.0]).with_eta(20.0),
            ),
            mode(
                "cut-second",
                terminal,
                data_fn(|s| 0.35 - 0.05 * (s.n as f64).min(6.0)),
                constant_fn(0.0),
                KernelField::per_mark(vec![0.5, 0.0]).with_eta(20.0),
            ),
        ],
        costs: CostStructure::new(|_, i, j| {
            if i == j {
                0.0
            } else {
                0.06 + 0.02 * (i as f64 - j as f64).abs()
            }
        }),
        compensator: CompensatorSpec::constant_with_marks(
            1.0,
            vec!["small".into(), "large".into()],
            vec![0.6, 0.4],
        ),
        horizon: 1.0,
        beta: 2.0,
    };
    (problem, 20)
}

/// Two modes over three marks with a linearly increasing intensity.
pub fn instance_marks3() -> (SwitchingProblem, usize) {
    let terminal = data_fn(|s| 0.3 + 0.15 * s.w.abs());
    let problem = SwitchingProblem {
        modes: vec![
            mode(
                "steady",
                terminal.clone(),
                data_fn(|s| 0.2 + 0.1 * s.t),
                data_fn(|s| 0.05 * s.w),
                KernelField::per_mark(vec![1.2, 0.8, 1.0]).with_eta(15.0),
            ),
            mode(
                "frontloaded",
                terminal,
                data_fn(|s| 0.4 - 0.2 * s.t),
                constant_fn(0.0),
                KernelField::per_mark(vec![0.3, 1.8, 0.9]).with_eta(15.0),
            ),
        ],
        costs: CostStructure::uniform(0.07),
        compensator: CompensatorSpec::new(
            |t| 1.0 + 0.5 * t,
            1.5,
            vec!["a".into(), "b".into(), "c".into()],
            |_, m| [0.5, 0.3, 0.2][m],
        ),
        horizon: 1.0,
        beta: 2.0,
    };
    (problem, 20)
}

/// Two byte-identical modes separated only by a positive switching cost;
/// switching is strictly wasteful.
pub fn instance_sym() -> (SwitchingProblem, usize) {
    let terminal = data_fn(|s| 0.6 + 0.2 * s.w.max(0.0));
    let make = |name: &str| {
        mode(
            name,
            terminal.clone(),
            constant_fn(0.3),
            constant_fn(0.05),
            KernelField::constant(1.3),
        )
    };
    let problem = SwitchingProblem {
        modes: vec![make("left"), make("right")],
        costs: CostStructure::uniform(0.05),
        compensator: CompensatorSpec::constant_single_mark(1.0),
        horizon: 1.0,
        beta: 2.0,
    };
    (problem, 20)
}

/// Mode 1 strictly dominates from the start and the switching cost is tiny,
/// so the optimal strategy starting in mode 0 switches at the first grid time.
pub fn instance_dominant_mode() -> (SwitchingProblem, usize) {
    let problem = SwitchingProblem {
        modes: vec![
            mode(
                "idle",
                constant_fn(0.0),
                constant_fn(0.0),
                constant_fn(0.0),
                KernelField::constant(1.0),
            ),
            mode(
                "productive",
                constant_fn(0.0),
                constant_fn(1.0),
                constant_fn(0.0),
                KernelField::constant(1.0),
            ),
        ],
        costs: CostStructure::uniform(0.01),
        compensator: CompensatorSpec::constant_single_mark(1.0),
        horizon: 1.0,
        beta: 2.0,
    };
    (problem, 20)
}

/// The full suite with names and recommended grid sizes.
pub fn all_instances() -> Vec<(&'static str, SwitchingProblem, usize)> {
    let (a, na) = instance_a();
    let (b, nb) = instance_b();
    let (rz, nrz) = instance_rho_zero();
    let (m3, nm3) = instance_marks3();
    let (sym, nsym) = instance_sym();
    vec![
        ("crossing_gains", a, na),
        ("state_dependent", b, nb),
        ("three_modes_cut_mark", rz, nrz),
        ("three_marks_ramp", m3, nm3),
        ("identical_modes", sym, nsym),
    ]
}

/// A scalar reflected equation derived from an instance's first mode: same
/// terminal, gains, and kernel, with an obstacle that sits `0.3 (T - t)`
/// above the terminal profile, so it binds away from the horizon and matches
/// the terminal there.
pub fn penalization_spec(problem: &SwitchingProblem) -> BsdeSpec {
    let first = &problem.modes[0];
    let horizon = problem.horizon;
    let terminal = first.terminal.clone();
    let obstacle_terminal = first.terminal.clone();
    BsdeSpec::new(terminal)
        .with_jump_tilt(first.running_f.clone(), first.kernel.clone(), &problem.compensator)
        .with_driver_g(DriverG::of_state(first.running_g.clone()))
        .with_obstacle(Arc::new(move |s| obstacle_terminal(s) + 0.3 * (horizon - s.t)))
        .with_beta(problem.beta)
}

/// The same problem with every terminal gain shifted by `c`.
pub fn shift_terminals(problem: &SwitchingProblem, c: f64) -> SwitchingProblem {
    let mut shifted = problem.clone();
    for m in &mut shifted.modes {
        let xi = m.terminal.clone();
        m.terminal = data_fn(move |s| xi(s) + c);
    }
    shifted
}

/// The same problem with all switching costs scaled by `factor`.
pub fn scale_costs(problem: &SwitchingProblem, factor: f64) -> SwitchingProblem {
    let mut scaled = problem.clone();
    let costs = problem.costs.clone();
    scaled.costs = CostStructure::new(move |t, i, j| factor * costs.eval(t, i, j));
    scaled
}

/// The same problem with terminals, running gains, and costs all scaled by a
/// common positive factor. The payoff functional is linear in the data, so
/// values scale by the factor and optimal actions are unchanged.
pub fn scale_all_data(problem: &SwitchingProblem, factor: f64) -> SwitchingProblem {
    let mut scaled = scale_costs(problem, factor);
    for m in &mut scaled.modes {
        let xi = m.terminal.clone();
        let f = m.running_f.clone();
        let g = m.running_g.clone();
        m.terminal = data_fn(move |s| factor * xi(s));
        m.running_f = data_fn(move |s| factor * f(s));
        m.running_g = data_fn(move |s| factor * g(s));
    }
    scaled
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::ChainGrid;
    use crate::problem::validate_problem;

    #[test]
    fn every_instance_validates_on_its_recommended_grid() {
        for (name, problem, n_steps) in all_instances() {
            let grid = ChainGrid::build(&problem, n_steps)
                .unwrap_or_else(|e| panic!("{name}: chain build failed: {e}"));
            let report = validate_problem(&problem, &grid);
            assert!(report.is_valid(), "{name}: {:?}", report.violations);
        }
        let (dominant, n) = instance_dominant_mode();
        let grid = ChainGrid::build(&dominant, n).unwrap();
        assert!(validate_problem(&dominant, &grid).is_valid());
    }
}
