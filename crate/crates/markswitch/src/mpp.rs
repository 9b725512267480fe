//! Marked point processes: simulation, compensated integrals, and the
//! exponential measure-change weight.
//!
//! A marked point process is a sequence of event times and marks
//! `(T_1, xi_1), (T_2, xi_2), ...` with strictly increasing times. Its law is
//! pinned down by a compensator `phi_t(de) dA_t` where `phi_t` is a
//! probability over marks and `A_t = \int_0^t lambda(s) ds` is the cumulative
//! intensity. We keep the mark set finite and `lambda` deterministic, so every
//! instance here is an inhomogeneous finite-mark Poisson process under the
//! reference measure.
//!
//! A bounded nonnegative kernel `rho(t, m)` tilts the law: under the tilted
//! measure the compensator becomes `rho_t phi_t(de) dA_t`. The Radon-Nikodym
//! weight on `[0, t]` is the exponential martingale
//!
//! ```text
//! L_t = prod_{T_n <= t} rho(T_n, xi_n) * exp( int_0^t sum_m (1 - rho(s,m)) phi(s,m) lambda(s) ds ).
//! ```
//!
//! Sampling is by thinning against a uniform intensity bound, which is exact
//! in law for time-varying intensities and extends directly to tilted ones.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Tolerance for checking that mark weights sum to one.
const PHI_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MppError {
    #[error("horizon must be positive, got {0}")]
    NonpositiveHorizon(f64),
    #[error("intensity {lambda} exceeds declared bound {bound} at t = {t}")]
    IntensityAboveBound { t: f64, lambda: f64, bound: f64 },
    #[error("mark weights at t = {t} sum to {sum}, expected 1")]
    MisnormalizedMarks { t: f64, sum: f64 },
    #[error("negative mark weight {value} for mark {mark} at t = {t}")]
    NegativeMarkWeight { t: f64, mark: usize, value: f64 },
    #[error("evaluation time {t} beyond path horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },
    #[error("event times must be strictly increasing within (0, horizon]")]
    BadEventTimes,
    #[error("kernel value {value} for mark {mark} at t = {t} outside [0, {bound}]")]
    KernelOutOfBounds { t: f64, mark: usize, value: f64, bound: f64 },
}

/// Intensity data of a marked point process under the reference measure.
///
/// `lambda` is the intensity density of the cumulative process `A`, `phi`
/// assigns each mark its conditional probability given an event at `t`, and
/// `lambda_bound` is a uniform bound used by the thinning sampler.
#[derive(Clone)]
pub struct CompensatorSpec {
    lambda: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    lambda_bound: f64,
    marks: Vec<String>,
    phi: Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for CompensatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompensatorSpec")
            .field("lambda_bound", &self.lambda_bound)
            .field("marks", &self.marks)
            .finish_non_exhaustive()
    }
}

impl CompensatorSpec {
    pub fn new(
        lambda: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lambda_bound: f64,
        marks: Vec<String>,
        phi: impl Fn(f64, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        assert!(!marks.is_empty(), "at least one mark label required");
        assert!(lambda_bound >= 0.0, "lambda_bound must be nonnegative");
        Self { lambda: Arc::new(lambda), lambda_bound, marks, phi: Arc::new(phi) }
    }

    /// Constant intensity with a single mark.
    pub fn constant_single_mark(rate: f64) -> Self {
        Self::new(move |_| rate, rate, vec!["*".into()], |_, _| 1.0)
    }

    /// Constant intensity with fixed mark weights.
    pub fn constant_with_marks(rate: f64, marks: Vec<String>, weights: Vec<f64>) -> Self {
        assert_eq!(marks.len(), weights.len());
        Self::new(move |_| rate, rate, marks, move |_, m| weights[m])
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn mark_labels(&self) -> &[String] {
        &self.marks
    }

    pub fn lambda(&self, t: f64) -> f64 {
        (self.lambda)(t)
    }

    pub fn lambda_bound(&self) -> f64 {
        self.lambda_bound
    }

    pub fn phi(&self, t: f64, mark: usize) -> f64 {
        (self.phi)(t, mark)
    }

    /// Checks the pointwise invariants at time `t`: mark weights form a
    /// probability and the intensity respects its declared bound.
    pub fn check_at(&self, t: f64) -> Result<(), MppError> {
        let mut sum = 0.0;
        for m in 0..self.n_marks() {
            let w = self.phi(t, m);
            if w < -PHI_SUM_TOL {
                return Err(MppError::NegativeMarkWeight { t, mark: m, value: w });
            }
            sum += w;
        }
        if (sum - 1.0).abs() > PHI_SUM_TOL {
            return Err(MppError::MisnormalizedMarks { t, sum });
        }
        let l = self.lambda(t);
        if l > self.lambda_bound * (1.0 + 1e-12) + 1e-300 {
            return Err(MppError::IntensityAboveBound { t, lambda: l, bound: self.lambda_bound });
        }
        Ok(())
    }
}

/// One realisation of a marked point process on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkedPath {
    events: Vec<(f64, usize)>,
    horizon: f64,
}

impl MarkedPath {
    pub fn new(events: Vec<(f64, usize)>, horizon: f64) -> Result<Self, MppError> {
        if horizon <= 0.0 {
            return Err(MppError::NonpositiveHorizon(horizon));
        }
        let mut prev = 0.0;
        for &(t, _) in &events {
            if t <= prev || t > horizon {
                return Err(MppError::BadEventTimes);
            }
            prev = t;
        }
        Ok(Self { events, horizon })
    }

    pub fn empty(horizon: f64) -> Self {
        Self { events: Vec::new(), horizon }
    }

    pub fn events(&self) -> &[(f64, usize)] {
        &self.events
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    /// Number of events with time `<= t` (the counting process `N_t`).
    pub fn count_up_to(&self, t: f64) -> usize {
        self.events.iter().take_while(|&&(s, _)| s <= t).count()
    }
}

/// A bounded nonnegative intensity-reweighting kernel `rho(t, mark)`.
///
/// `bound` is the uniform bound `M` on the values and `eta` the exponent of
/// the integrability condition `eta > 3 + M^4` required for the tilted law to
/// be a probability. `breakpoints` are declared time discontinuities (switch
/// times of a strategy); the weight quadrature splits its cells there and
/// evaluates the kernel at subcell midpoints, which resolves the left-open
/// convention at a switch time exactly for piecewise-constant kernels.
#[derive(Clone)]
pub struct KernelField {
    value: Arc<dyn Fn(f64, usize) -> f64 + Send + Sync>,
    bound: f64,
    eta: f64,
    breakpoints: Vec<f64>,
}

impl std::fmt::Debug for KernelField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelField")
            .field("bound", &self.bound)
            .field("eta", &self.eta)
            .field("breakpoints", &self.breakpoints)
            .finish_non_exhaustive()
    }
}

impl KernelField {
    pub fn new(
        value: impl Fn(f64, usize) -> f64 + Send + Sync + 'static,
        bound: f64,
        eta: f64,
    ) -> Self {
        assert!(bound >= 0.0, "kernel bound must be nonnegative");
        Self { value: Arc::new(value), bound, eta, breakpoints: Vec::new() }
    }

    /// Kernel constant in time and mark.
    pub fn constant(c: f64) -> Self {
        let bound = c.max(1.0);
        Self::new(move |_, _| c, bound, 4.0 + bound.powi(4))
    }

    /// Kernel constant in time with one value per mark.
    pub fn per_mark(values: Vec<f64>) -> Self {
        let bound = values.iter().cloned().fold(1.0_f64, f64::max);
        Self::new(move |_, m| values[m], bound, 4.0 + bound.powi(4))
    }

    pub fn with_breakpoints(mut self, mut breakpoints: Vec<f64>) -> Self {
        breakpoints.sort_by(|a, b| a.partial_cmp(b).unwrap());
        self.breakpoints = breakpoints;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn value(&self, t: f64, mark: usize) -> f64 {
        (self.value)(t, mark)
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// `eta > 3 + M^4`, the integrability exponent condition.
    pub fn eta_condition_holds(&self) -> bool {
        self.eta > 3.0 + self.bound.powi(4)
    }

    /// Checks `0 <= rho <= bound` at one point.
    pub fn check_at(&self, t: f64, mark: usize) -> Result<(), MppError> {
        let v = self.value(t, mark);
        if !(0.0..=self.bound * (1.0 + 1e-12)).contains(&v) {
            return Err(MppError::KernelOutOfBounds { t, mark, value: v, bound: self.bound });
        }
        Ok(())
    }
}

/// Reproducible per-path generator: one `seed` names a family of independent
/// streams, one stream per path index.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Draws a mark index from the weights `phi(t, .)`, assuming they sum to one.
fn draw_mark(comp: &CompensatorSpec, t: f64, rng: &mut ChaCha8Rng) -> Result<usize, MppError> {
    comp.check_at(t)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for m in 0..comp.n_marks() {
        acc += comp.phi(t, m);
        if u < acc {
            return Ok(m);
        }
    }
    Ok(comp.n_marks() - 1)
}

/// Simulates one path under the reference law by thinning against
/// `lambda_bound`.
pub fn simulate_path(
    comp: &CompensatorSpec,
    horizon: f64,
    seed: u64,
) -> Result<MarkedPath, MppError> {
    simulate_path_indexed(comp, horizon, seed, 0)
}

/// As [`simulate_path`], with an explicit path index selecting the stream of
/// the `(seed, index)` family.
pub fn simulate_path_indexed(
    comp: &CompensatorSpec,
    horizon: f64,
    seed: u64,
    path_index: u64,
) -> Result<MarkedPath, MppError> {
    if horizon <= 0.0 {
        return Err(MppError::NonpositiveHorizon(horizon));
    }
    let mut rng = path_rng(seed, path_index);
    let bound = comp.lambda_bound();
    if bound <= 0.0 {
        return Ok(MarkedPath::empty(horizon));
    }
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        let u: f64 = rng.gen();
        t += -u.ln() / bound;
        if t > horizon {
            break;
        }
        let l = comp.lambda(t);
        if l > bound * (1.0 + 1e-12) {
            return Err(MppError::IntensityAboveBound { t, lambda: l, bound });
        }
        let accept: f64 = rng.gen();
        if accept * bound < l {
            let mark = draw_mark(comp, t, &mut rng)?;
            events.push((t, mark));
        }
    }
    MarkedPath::new(events, horizon)
}

/// Simulates one path whose compensator is the tilted `rho phi lambda`:
/// thinning against `lambda_bound * kernel.bound()`, accepting candidate
/// `(t, m)` proportionally to `rho(t,m) phi(t,m) lambda(t)`.
pub fn simulate_path_under_kernel(
    comp: &CompensatorSpec,
    kernel: &KernelField,
    horizon: f64,
    seed: u64,
) -> Result<MarkedPath, MppError> {
    simulate_path_under_kernel_indexed(comp, kernel, horizon, seed, 0)
}

pub fn simulate_path_under_kernel_indexed(
    comp: &CompensatorSpec,
    kernel: &KernelField,
    horizon: f64,
    seed: u64,
    path_index: u64,
) -> Result<MarkedPath, MppError> {
    if horizon <= 0.0 {
        return Err(MppError::NonpositiveHorizon(horizon));
    }
    let mut rng = path_rng(seed, path_index);
    let bound = comp.lambda_bound() * kernel.bound();
    if bound <= 0.0 {
        return Ok(MarkedPath::empty(horizon));
    }
    let mut events = Vec::new();
    let mut t = 0.0;
    loop {
        let u: f64 = rng.gen();
        t += -u.ln() / bound;
        if t > horizon {
            break;
        }
        let l = comp.lambda(t);
        if l > comp.lambda_bound() * (1.0 + 1e-12) {
            return Err(MppError::IntensityAboveBound { t, lambda: l, bound: comp.lambda_bound() });
        }
        comp.check_at(t)?;
        // Total tilted intensity and per-mark weights at the candidate time.
        let mut weights = Vec::with_capacity(comp.n_marks());
        let mut total = 0.0;
        for m in 0..comp.n_marks() {
            kernel.check_at(t, m)?;
            let w = kernel.value(t, m) * comp.phi(t, m) * l;
            weights.push(w);
            total += w;
        }
        let accept: f64 = rng.gen();
        if accept * bound < total {
            let pick: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut mark = comp.n_marks() - 1;
            for (m, w) in weights.iter().enumerate() {
                acc += w;
                if pick < acc {
                    mark = m;
                    break;
                }
            }
            events.push((t, mark));
        }
    }
    MarkedPath::new(events, horizon)
}

/// A uniform quadrature grid on `[0, horizon]`, left-endpoint rule.
///
/// Path functionals integrate `... phi(s, m) lambda(s) ds` terms with this
/// grid; choosing the same resolution as the solver chain keeps path
/// functionals and lattice quantities consistent.
#[derive(Clone, Copy, Debug)]
pub struct QuadratureGrid {
    pub n_steps: usize,
    pub horizon: f64,
}

impl QuadratureGrid {
    pub fn new(n_steps: usize, horizon: f64) -> Self {
        assert!(n_steps > 0 && horizon > 0.0);
        Self { n_steps, horizon }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    fn cells_with_breakpoints(&self, upto: f64, breakpoints: &[f64]) -> Vec<(f64, f64)> {
        let h = self.dt();
        let mut edges: Vec<f64> = Vec::new();
        let mut k = 0;
        loop {
            let e = k as f64 * h;
            if e >= upto - 1e-15 {
                break;
            }
            edges.push(e);
            k += 1;
        }
        edges.push(upto);
        for &b in breakpoints {
            if b > 1e-15 && b < upto - 1e-15 {
                edges.push(b);
            }
        }
        edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        edges.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Integral of `c` against the compensated measure `q = p - phi dA`:
/// the sum of `c` over the path's events minus the deterministic quadrature of
/// `sum_m c(s,m) phi(s,m) lambda(s)` over `[0, horizon]`.
pub fn compensated_integral(
    path: &MarkedPath,
    comp: &CompensatorSpec,
    integrand: impl Fn(f64, usize) -> f64,
    quad: QuadratureGrid,
) -> f64 {
    let jump_part: f64 = path.events().iter().map(|&(t, m)| integrand(t, m)).sum();
    let h = quad.dt();
    let mut lebesgue = 0.0;
    for k in 0..quad.n_steps {
        let t = k as f64 * h;
        let l = comp.lambda(t);
        for m in 0..comp.n_marks() {
            lebesgue += integrand(t, m) * comp.phi(t, m) * l * h;
        }
    }
    jump_part - lebesgue
}

/// The exponential measure-change weight `L_t` of a kernel along a path.
///
/// The product term runs over events up to `t`; the exponent integrates
/// `sum_m (1 - rho(s,m)) phi(s,m) lambda(s)` by quadrature on `quad`, with
/// cells split at the kernel's declared breakpoints and the kernel evaluated
/// at subcell midpoints. A kernel identically one yields exactly `1.0`.
pub fn doleans_exponential(
    path: &MarkedPath,
    comp: &CompensatorSpec,
    kernel: &KernelField,
    t: f64,
    quad: QuadratureGrid,
) -> Result<f64, MppError> {
    if t > path.horizon() * (1.0 + 1e-12) {
        return Err(MppError::BeyondHorizon { t, horizon: path.horizon() });
    }
    let mut product = 1.0;
    for &(s, m) in path.events() {
        if s > t {
            break;
        }
        kernel.check_at(s, m)?;
        product *= kernel.value(s, m);
    }
    let mut exponent = 0.0;
    for (a, b) in quad.cells_with_breakpoints(t, kernel.breakpoints()) {
        let l = comp.lambda(a);
        let mid = 0.5 * (a + b);
        for m in 0..comp.n_marks() {
            exponent += (1.0 - kernel.value(mid, m)) * comp.phi(a, m) * l * (b - a);
        }
    }
    Ok(product * exponent.exp())
}
