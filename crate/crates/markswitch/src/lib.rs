//! Optimal switching of jump intensities for marked point processes.
//!
//! A controller runs a system in one of finitely many modes. The ambient noise
//! is a marked point process `p` (with compensator `phi_t(de) dA_t`) plus an
//! independent Brownian motion `W`. Each mode `i` carries running gains, a
//! terminal gain, and a bounded intensity-reweighting kernel `rho^i` that tilts
//! the law of `p` through a Girsanov-type change of measure. Switching from
//! mode `i` to `j` costs `C_t(i,j)`. The controller maximises the expected
//! total gain, evaluated under the probability induced by the chosen strategy.
//!
//! The value of the problem solves a system of reflected backward equations
//! with interconnected obstacles: mode `i` is reflected on
//! `max_j (Y^j - C(i,j))`. This crate discretises everything onto a common
//! recombining chain and provides
//!
//! - [`mpp`]: simulation of marked point processes by thinning, compensated
//!   integrals, and the exponential measure-change weight;
//! - [`problem`]: problem instances, strategies, rewards, and validation of
//!   the standing assumptions;
//! - [`lattice`]: the recombining chain and its exact one-step conditional
//!   expectation / martingale-representation primitives;
//! - [`bsde`]: backward solvers (standard, penalized, reflected) and a
//!   comparison harness;
//! - [`switching`]: the interconnected system via Picard iteration, bounding
//!   processes, optimal-strategy extraction, and Monte Carlo verification;
//! - [`oracle`]: an independent dynamic-programming oracle and exhaustive
//!   strategy enumeration on tiny instances;
//! - [`instances`]: the small benchmark instances used throughout the test
//!   suite and the guide.
//!
//! The guide under `book/` walks through the concepts chapter by chapter; its
//! code snippets compile and run as doctests of this crate.

pub mod bsde;
pub mod instances;
pub mod lattice;
pub mod mpp;
pub mod oracle;
pub mod problem;
pub mod switching;

// Keep the book's code snippets honest: every fenced Rust block in the guide
// is compiled and run by `cargo test --doc`.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }

    chapter!(ch01, "../../../book/src/point-processes.md");
    chapter!(ch02, "../../../book/src/measure-change.md");
    chapter!(ch03, "../../../book/src/switching-problem.md");
    chapter!(ch04, "../../../book/src/chain.md");
    chapter!(ch05, "../../../book/src/backward-equations.md");
    chapter!(ch06, "../../../book/src/interconnected-system.md");
    chapter!(ch07, "../../../book/src/verification.md");
}
