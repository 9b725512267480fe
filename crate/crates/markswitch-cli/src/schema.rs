//! JSON instance and strategy files.
//!
//! Data functions come from a small whitelist of forms (affine, max, min,
//! abs, threshold indicator, product of two factors) instead of a general
//! expression interpreter, which keeps files deterministic to evaluate and
//! cheap to validate.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use markswitch::mpp::{CompensatorSpec, KernelField};
use markswitch::problem::{data_fn, CostStructure, DataFn, ModeSpec, SwitchingProblem};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSpec {
    /// `params = [c]`.
    Constant { params: Vec<f64> },
    /// `params = [a, b]` for `a + b t`.
    Linear { params: Vec<f64> },
    /// Piecewise constant: `values[r]` on `[breakpoints[r], breakpoints[r+1])`.
    Table { breakpoints: Vec<f64>, values: Vec<f64> },
}

impl LambdaSpec {
    fn build(&self, horizon: f64) -> Result<(impl Fn(f64) -> f64 + Send + Sync + Clone, f64)> {
        #[derive(Clone)]
        enum Built {
            Constant(f64),
            Linear(f64, f64),
            Table(Vec<f64>, Vec<f64>),
        }
        let built = match self {
            LambdaSpec::Constant { params } => {
                let [c] = params[..] else { bail!("constant lambda takes one parameter") };
                Built::Constant(c)
            }
            LambdaSpec::Linear { params } => {
                let [a, b] = params[..] else { bail!("linear lambda takes two parameters") };
                Built::Linear(a, b)
            }
            LambdaSpec::Table { breakpoints, values } => {
                if breakpoints.len() != values.len() || breakpoints.is_empty() {
                    bail!("lambda table needs matching nonempty breakpoints and values");
                }
                Built::Table(breakpoints.clone(), values.clone())
            }
        };
        let bound = match &built {
            Built::Constant(c) => *c,
            Built::Linear(a, b) => a.max(a + b * horizon),
            Built::Table(_, values) => values.iter().cloned().fold(0.0, f64::max),
        };
        if bound < 0.0 {
            bail!("intensity bound must be nonnegative");
        }
        let f = move |t: f64| match &built {
            Built::Constant(c) => *c,
            Built::Linear(a, b) => a + b * t,
            Built::Table(breaks, values) => {
                let idx = breaks.iter().rposition(|&b| b <= t).unwrap_or(0);
                values[idx]
            }
        };
        Ok((f, bound))
    }
}

/// Piecewise-constant mark weights: row `r` applies on
/// `[breakpoints[r], breakpoints[r+1])`.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct PhiTable {
    pub breakpoints: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Var {
    T,
    W,
    N,
}

/// Whitelisted data-function forms over the state `(t, w, n)`.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Affine {
        #[serde(default)]
        constant: f64,
        #[serde(default)]
        t: f64,
        #[serde(default)]
        w: f64,
        #[serde(default)]
        n: f64,
    },
    Max(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Abs(Box<Expr>),
    /// `1` when the variable is at or above the threshold, else `0`.
    Indicator { var: Var, threshold: f64 },
    Product(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn compile(&self) -> DataFn {
        match self {
            Expr::Affine { constant, t, w, n } => {
                let (c0, ct, cw, cn) = (*constant, *t, *w, *n);
                data_fn(move |s| c0 + ct * s.t + cw * s.w + cn * s.n as f64)
            }
            Expr::Max(a, b) => {
                let (a, b) = (a.compile(), b.compile());
                data_fn(move |s| a(s).max(b(s)))
            }
            Expr::Min(a, b) => {
                let (a, b) = (a.compile(), b.compile());
                data_fn(move |s| a(s).min(b(s)))
            }
            Expr::Abs(a) => {
                let a = a.compile();
                data_fn(move |s| a(s).abs())
            }
            Expr::Indicator { var, threshold } => {
                let (var, threshold) = (*var, *threshold);
                data_fn(move |s| {
                    let v = match var {
                        Var::T => s.t,
                        Var::W => s.w,
                        Var::N => s.n as f64,
                    };
                    f64::from(v >= threshold)
                })
            }
            Expr::Product(a, b) => {
                let (a, b) = (a.compile(), b.compile());
                data_fn(move |s| a(s) * b(s))
            }
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelJson {
    Constant {
        value: f64,
        #[serde(default)]
        eta: Option<f64>,
    },
    PerMark {
        values: Vec<f64>,
        #[serde(default)]
        eta: Option<f64>,
    },
}

impl KernelJson {
    fn build(&self, n_marks: usize) -> Result<KernelField> {
        let kernel = match self {
            KernelJson::Constant { value, eta } => {
                let k = KernelField::constant(*value);
                match eta {
                    Some(e) => k.with_eta(*e),
                    None => k,
                }
            }
            KernelJson::PerMark { values, eta } => {
                if values.len() != n_marks {
                    bail!("kernel has {} values for {} marks", values.len(), n_marks);
                }
                let k = KernelField::per_mark(values.clone());
                match eta {
                    Some(e) => k.with_eta(*e),
                    None => k,
                }
            }
        };
        Ok(kernel)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ModeJson {
    pub name: String,
    pub kernel: KernelJson,
    pub terminal: Expr,
    pub running_f: Expr,
    pub running_g: Expr,
}

/// One ordered cost entry, affine in time: `base + slope * t`.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct CostEntry {
    pub from: usize,
    pub to: usize,
    pub base: f64,
    #[serde(default)]
    pub slope: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ProblemFile {
    pub schema_version: u32,
    pub horizon: f64,
    pub n_steps: usize,
    pub beta: f64,
    pub lambda: LambdaSpec,
    pub marks: Vec<String>,
    pub phi: PhiTable,
    pub modes: Vec<ModeJson>,
    pub costs: Vec<CostEntry>,
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ProblemFile = serde_json::from_str(text).context("malformed instance file")?;
        if file.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {})",
                file.schema_version,
                SCHEMA_VERSION
            );
        }
        Ok(file)
    }

    /// Builds the in-memory problem. Semantic validity (cost structure,
    /// kernel bounds, terminal consistency) is checked separately against the
    /// chain by the caller.
    pub fn build(&self) -> Result<SwitchingProblem> {
        if self.marks.is_empty() {
            bail!("at least one mark required");
        }
        if self.modes.is_empty() {
            bail!("at least one mode required");
        }
        let n_marks = self.marks.len();
        if self.phi.breakpoints.len() != self.phi.weights.len() || self.phi.weights.is_empty() {
            bail!("phi table needs matching nonempty breakpoints and weight rows");
        }
        for row in &self.phi.weights {
            if row.len() != n_marks {
                bail!("phi rows must have one weight per mark");
            }
        }

        let (lambda, bound) = self.lambda.build(self.horizon)?;
        let phi = self.phi.clone();
        let compensator = CompensatorSpec::new(
            lambda,
            bound,
            self.marks.clone(),
            move |t, m| {
                let idx = phi.breakpoints.iter().rposition(|&b| b <= t).unwrap_or(0);
                phi.weights[idx][m]
            },
        );

        let mut modes = Vec::with_capacity(self.modes.len());
        for mode in &self.modes {
            modes.push(ModeSpec {
                name: mode.name.clone(),
                terminal: mode.terminal.compile(),
                running_f: mode.running_f.compile(),
                running_g: mode.running_g.compile(),
                kernel: mode.kernel.build(n_marks)?,
            });
        }

        let m = modes.len();
        let mut table: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
        for entry in &self.costs {
            if entry.from >= m || entry.to >= m {
                bail!("cost entry ({}, {}) out of mode range", entry.from, entry.to);
            }
            if table.insert((entry.from, entry.to), (entry.base, entry.slope)).is_some() {
                bail!("duplicate cost entry ({}, {})", entry.from, entry.to);
            }
        }
        for i in 0..m {
            for j in 0..m {
                if i != j && !table.contains_key(&(i, j)) {
                    bail!("missing cost entry ({i}, {j})");
                }
            }
        }
        let costs = CostStructure::new(move |t, i, j| match table.get(&(i, j)) {
            Some(&(base, slope)) => base + slope * t,
            None => 0.0,
        });

        Ok(SwitchingProblem {
            modes,
            costs,
            compensator,
            horizon: self.horizon,
            beta: self.beta,
        })
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct StrategySwitch {
    pub time: f64,
    pub mode: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct StrategyFile {
    pub schema_version: u32,
    pub start_mode: usize,
    pub switches: Vec<StrategySwitch>,
}

impl StrategyFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: StrategyFile = serde_json::from_str(text).context("malformed strategy file")?;
        if file.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported schema_version {} (expected {})",
                file.schema_version,
                SCHEMA_VERSION
            );
        }
        Ok(file)
    }

    /// Snaps switch times to the nearest grid time; returns the strategy and
    /// human-readable warnings for every time that moved.
    pub fn build(
        &self,
        n_modes: usize,
        horizon: f64,
        n_steps: usize,
    ) -> Result<(markswitch::problem::Strategy, Vec<String>)> {
        let dt = horizon / n_steps as f64;
        let mut warnings = Vec::new();
        let mut switches = Vec::with_capacity(self.switches.len());
        for sw in &self.switches {
            let idx = (sw.time / dt).round().clamp(0.0, n_steps as f64);
            let snapped = idx * dt;
            let off = (snapped - sw.time).abs();
            if off > 1e-9 {
                let note = if off > dt / 2.0 + 1e-12 { " (off-grid by more than dt/2)" } else { "" };
                warnings.push(format!(
                    "switch time {} snapped to grid time {snapped}{note}",
                    sw.time
                ));
            }
            switches.push((snapped, sw.mode));
        }
        let strategy = markswitch::problem::Strategy::new((0.0, self.start_mode), switches, n_modes)
            .map_err(|e| anyhow::anyhow!("invalid strategy: {e}"))?;
        Ok((strategy, warnings))
    }
}
