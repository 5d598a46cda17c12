//! Scenario configuration: JSON documents, built-in examples, and the
//! translation into solver inputs.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bridge::{ControlForm, FixedPointOptions};
use crate::density::{discretize, GaussianMixture, Grid, GridDensity};
use crate::error::{Result, SteerError};
use crate::lie::{build_tuple, FeedbackLinearizingTuple, NewtonOptions};
use crate::par::Exec;
use crate::steering::BridgeProblem;
use crate::systems::{self, BuiltinSystem};

pub const CONFIG_VERSION: u32 = 1;
pub const BUILTINS: [&str; 3] = ["example1", "example2", "brunovsky2d"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bridge,
    Ot,
    Hjb,
    Verify,
}

/// Where the linearizing tuple comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaChoice {
    /// Closed-form `(τ, α, β)` of the built-in system.
    #[default]
    Closed,
    /// Tuple assembled from λ by repeated Lie differentiation.
    Numeric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bounds: Vec<[f64; 2]>,
    pub nodes: Vec<usize>,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        let b: Vec<(f64, f64)> = self.bounds.iter().map(|b| (b[0], b[1])).collect();
        Grid::uniform(&b, &self.nodes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Diagonal covariances; exclusive with `covariances`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
}

impl MixtureSpec {
    fn diagonal(weights: &[f64], means: &[&[f64]], variances: &[&[f64]]) -> Self {
        Self {
            weights: weights.to_vec(),
            means: means.iter().map(|m| m.to_vec()).collect(),
            variances: Some(variances.iter().map(|v| v.to_vec()).collect()),
            covariances: None,
        }
    }

    pub fn build(&self) -> Result<GaussianMixture> {
        match (&self.variances, &self.covariances) {
            (Some(v), None) => {
                GaussianMixture::diagonal(self.weights.clone(), self.means.clone(), v.clone())
            }
            (None, Some(c)) => {
                GaussianMixture::new(self.weights.clone(), self.means.clone(), c.clone())
            }
            _ => Err(SteerError::domain(
                "give exactly one of `variances` and `covariances`",
            )),
        }
    }

    /// Per-axis `(min μ − kσ, max μ + kσ)` over components.
    fn extent(&self, k: f64) -> Vec<(f64, f64)> {
        let d = self.means[0].len();
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for (c, mean) in self.means.iter().enumerate() {
            for a in 0..d {
                let var = match (&self.variances, &self.covariances) {
                    (Some(v), _) => v[c][a],
                    (_, Some(cv)) => cv[c][a][a],
                    _ => 0.0,
                };
                let s = k * var.max(0.0).sqrt();
                out[a].0 = out[a].0.min(mean[a] - s);
                out[a].1 = out[a].1.max(mean[a] + s);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub relaxation: f64,
    pub relax_below: f64,
    pub continuation: Vec<f64>,
    pub stage_tolerance: f64,
    pub support_floor: f64,
    pub init_h1: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let d = FixedPointOptions::default();
        Self {
            relaxation: d.relaxation,
            relax_below: d.relax_below,
            continuation: d.continuation,
            stage_tolerance: d.stage_tol,
            support_floor: d.support_floor,
            init_h1: d.init_h1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OtSpec {
    /// Entropic regularization of the quadratic-cost plan.
    pub eta: f64,
}

impl Default for OtSpec {
    fn default() -> Self {
        Self { eta: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HjbSpec {
    /// Time samples of the value-function lattice, endpoints included.
    pub times: usize,
}

impl Default for HjbSpec {
    fn default() -> Self {
        Self { times: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub mode: Mode,
    /// Built-in system name.
    pub system: String,
    #[serde(default)]
    pub lambda: LambdaChoice,
    pub x_grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_grid: Option<GridSpec>,
    pub rho0: MixtureSpec,
    pub rho1: MixtureSpec,
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    pub snapshots: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub control_form: ControlForm,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub ot: OtSpec,
    #[serde(default)]
    pub hjb: HjbSpec,
}

fn tenths() -> Vec<f64> {
    (0..=5).map(|k| k as f64 / 5.0).collect()
}

impl Scenario {
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "example1" => Some(Self::example1()),
            "example2" => Some(Self::example2()),
            "brunovsky2d" => Some(Self::brunovsky2d()),
            _ => None,
        }
    }

    fn base(
        name: &str,
        system: &str,
        x_grid: GridSpec,
        rho0: MixtureSpec,
        rho1: MixtureSpec,
        eps: f64,
    ) -> Self {
        Self {
            version: CONFIG_VERSION,
            name: name.into(),
            mode: Mode::Bridge,
            system: system.into(),
            lambda: LambdaChoice::Closed,
            x_grid,
            z_grid: None,
            rho0,
            rho1,
            epsilon: eps,
            tolerance: 1e-9,
            max_iter: 5000,
            snapshots: tenths(),
            output_dir: None,
            control_form: ControlForm::LogGradient,
            solver: SolverSpec::default(),
            ot: OtSpec::default(),
            hjb: HjbSpec::default(),
        }
    }

    /// Van der Pol oscillator on `[−1, 1]²`.
    pub fn example1() -> Self {
        let rho0 = MixtureSpec::diagonal(
            &[0.19, 0.81],
            &[&[0.30, 0.35], &[0.30, 0.30]],
            &[&[0.05, 0.067], &[0.03, 0.05]],
        );
        let rho1 = MixtureSpec::diagonal(
            &[0.50, 0.50],
            &[&[-0.40, -0.30], &[-0.60, -0.50]],
            &[&[0.095, 0.02], &[0.02, 0.05]],
        );
        let grid = GridSpec {
            bounds: vec![[-1.0, 1.0]; 2],
            nodes: vec![51, 51],
        };
        Self::base("example1", "vdp2d", grid, rho0, rho1, 1e-3)
    }

    /// Three-state flat system, kept in `x₂ > −1`.
    pub fn example2() -> Self {
        let rho0 = MixtureSpec::diagonal(
            &[0.19, 0.81],
            &[&[0.30, 0.35, 0.50], &[0.30, 0.30, 0.50]],
            &[&[0.05, 0.067, 0.04], &[0.03, 0.05, 0.05]],
        );
        let rho1 = MixtureSpec::diagonal(
            &[0.39, 0.61],
            &[&[0.50, 0.40, 0.30], &[0.80, 0.60, 0.40]],
            &[&[0.095, 0.02, 0.04], &[0.02, 0.05, 0.04]],
        );
        let (a, b) = (rho0.extent(4.0), rho1.extent(4.0));
        let grid = GridSpec {
            bounds: a
                .iter()
                .zip(&b)
                .map(|(p, q)| [p.0.min(q.0), p.1.max(q.1)])
                .collect(),
            nodes: vec![10, 10, 10],
        };
        let mut s = Self::base("example2", "flat3d", grid, rho0, rho1, 0.01);
        // Hatting stretches the grid to spacings near [7.2, 3.3, 0.6], so
        // neighboring kernel entries are tiny and the fixed point is slow.
        s.tolerance = 1e-6;
        s.max_iter = 30_000;
        s.solver.continuation = vec![1024.0, 256.0, 64.0, 16.0, 4.0];
        s
    }

    /// Gaussian endpoints for the double integrator.
    pub fn brunovsky2d() -> Self {
        let rho0 = MixtureSpec::diagonal(&[1.0], &[&[-0.5, 0.3]], &[&[0.04, 0.03]]);
        let rho1 = MixtureSpec::diagonal(&[1.0], &[&[0.5, -0.2]], &[&[0.03, 0.02]]);
        let grid = GridSpec {
            bounds: vec![[-1.6, 1.6], [-1.6, 1.6]],
            nodes: vec![41, 41],
        };
        Self::base("brunovsky2d", "brunovsky2", grid, rho0, rho1, 0.05)
    }

    /// Parses a config document. A `"base"` field names a built-in whose
    /// fields the document overrides.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| SteerError::config("$", e.to_string()))?;
        let Value::Object(mut obj) = doc else {
            return Err(SteerError::config("$", "expected a JSON object"));
        };
        let value = match obj.remove("base") {
            None => Value::Object(obj),
            Some(Value::String(b)) => {
                let base = Self::builtin(&b)
                    .ok_or_else(|| SteerError::config("base", format!("unknown built-in `{b}`")))?;
                let mut merged = serde_json::to_value(base)?;
                merge(&mut merged, Value::Object(obj));
                merged
            }
            Some(_) => return Err(SteerError::config("base", "expected a string")),
        };
        match value.get("version") {
            None => return Err(SteerError::config("version", "missing")),
            Some(v) if v.as_u64() != Some(CONFIG_VERSION as u64) => {
                return Err(SteerError::config(
                    "version",
                    format!("unsupported version {v}"),
                ));
            }
            _ => {}
        }
        let s: Scenario =
            serde_json::from_value(value).map_err(|e| SteerError::config("$", e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        fn cfg(path: impl Into<String>, msg: impl Into<String>) -> SteerError {
            SteerError::config(path, msg)
        }
        let sys = systems::builtin(&self.system).ok_or_else(|| {
            cfg(
                "system",
                format!(
                    "unknown system `{}`; known: {:?}",
                    self.system,
                    systems::NAMES
                ),
            )
        })?;
        let n = sys.system.n;
        if self.x_grid.bounds.len() != n || self.x_grid.nodes.len() != n {
            return Err(cfg("x_grid", format!("expected {n} axes")));
        }
        self.x_grid
            .build()
            .map_err(|e| cfg("x_grid", e.to_string()))?;
        if let Some(z) = &self.z_grid {
            if z.bounds.len() != n || z.nodes.len() != n {
                return Err(cfg("z_grid", format!("expected {n} axes")));
            }
            z.build().map_err(|e| cfg("z_grid", e.to_string()))?;
        }
        for (path, m) in [("rho0", &self.rho0), ("rho1", &self.rho1)] {
            let mix = m.build().map_err(|e| cfg(path, e.to_string()))?;
            if mix.dim() != n {
                return Err(cfg(
                    format!("{path}.means"),
                    format!("expected dimension {n}"),
                ));
            }
        }
        if self.mode == Mode::Bridge && !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(cfg("epsilon", "must be positive in bridge mode"));
        }
        if !(self.tolerance > 0.0) {
            return Err(cfg("tolerance", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(cfg("max_iter", "must be positive"));
        }
        if self.snapshots.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(cfg("snapshots", "times must lie in [0, 1]"));
        }
        for e in [0.0, 1.0] {
            if !self.snapshots.contains(&e) {
                return Err(cfg("snapshots", "must include 0 and 1"));
            }
        }
        if !(1.0..2.0).contains(&self.solver.relaxation) {
            return Err(cfg("solver.relaxation", "must lie in [1, 2)"));
        }
        if self.solver.continuation.iter().any(|c| !(*c > 1.0)) {
            return Err(cfg("solver.continuation", "multipliers must exceed 1"));
        }
        if !(self.solver.init_h1 > 0.0) {
            return Err(cfg("solver.init_h1", "must be positive"));
        }
        if !(self.ot.eta > 0.0) {
            return Err(cfg("ot.eta", "must be positive"));
        }
        if self.hjb.times < 2 {
            return Err(cfg("hjb.times", "need at least two samples"));
        }
        Ok(())
    }

    pub fn system(&self) -> Result<BuiltinSystem> {
        systems::builtin(&self.system).ok_or_else(|| SteerError::config("system", "unknown system"))
    }

    pub fn tuple(&self) -> Result<FeedbackLinearizingTuple> {
        let sys = self.system()?;
        match self.lambda {
            LambdaChoice::Closed => Ok(sys.tuple),
            LambdaChoice::Numeric => {
                let samples = systems::sample_points(&sys, 64, 0x5eed);
                build_tuple(&sys.system, &sys.lambda, &samples, 1e-8)
            }
        }
    }

    pub fn fixed_point_options(&self, exec: Exec) -> FixedPointOptions {
        FixedPointOptions {
            tol: self.tolerance,
            max_iter: self.max_iter,
            init_h1: self.solver.init_h1,
            relaxation: self.solver.relaxation,
            relax_below: self.solver.relax_below,
            continuation: self.solver.continuation.clone(),
            stage_tol: self.solver.stage_tolerance,
            support_floor: self.solver.support_floor,
            exec,
        }
    }

    /// Renormalized endpoint densities on the x-grid.
    pub fn marginals(&self) -> Result<(GridDensity, GridDensity)> {
        let grid = self.x_grid.build()?;
        let (a, _) = discretize(&self.rho0.build()?, &grid, true)
            .map_err(|e| SteerError::config("rho0", e.to_string()))?;
        let (b, _) = discretize(&self.rho1.build()?, &grid, true)
            .map_err(|e| SteerError::config("rho1", e.to_string()))?;
        Ok((a, b))
    }

    pub fn bridge_problem(&self, exec: Exec) -> Result<BridgeProblem> {
        self.validate()?;
        let (rho0, rho1) = self.marginals()?;
        Ok(BridgeProblem {
            tuple: self.tuple()?,
            rho0,
            rho1,
            z_grid: self.z_grid.as_ref().map(|g| g.build()).transpose()?,
            eps: self.epsilon,
            snapshots: self.snapshots.clone(),
            fixed_point: self.fixed_point_options(exec),
            control_form: self.control_form,
            newton: NewtonOptions::default(),
        })
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
