//! End-to-end steering: x-space marginals are carried to Brunovsky
//! coordinates, bridged there, and the transient densities carried back.
//!
//! Marginals travel as weighted point clouds so every change of variables is
//! exact. Snapshots are assembled from the discrete coupling: each pair
//! `(z₀ᵢ, z₁ⱼ)` contributes the pinned-bridge Gaussian at time `t`, which is
//! the closed form of `ĥ(·,t)h(·,t)` for node-supported factors.

use serde::Serialize;

use crate::bridge::{
    fixed_point, recover_factors, BridgeFactors, ControlForm, FixedPointOptions, KernelOperator,
    PinnedBridge, RecoveredFactors, TransientEngine,
};
use crate::brunovsky::LinearPrior;
use crate::density::{l1_distance, Grid, GridDensity, WeightedCloud};
use crate::error::{Result, StageExt, SteerError};
use crate::lie::{tau_inverse, FeedbackLinearizingTuple, NewtonOptions, Point};
use crate::par::Exec;

/// Coupling pairs below this fraction of the heaviest pair are dropped.
pub const PAIR_FLOOR: f64 = 1e-12;

/// Bridge between two point clouds in Brunovsky coordinates.
#[derive(Clone, Debug)]
pub struct ZBridge {
    pub prior: LinearPrior,
    pub eps: f64,
    pub z0: WeightedCloud,
    pub z1: WeightedCloud,
    pub kernel: KernelOperator,
    pub factors: BridgeFactors,
    pub recovered: RecoveredFactors,
    /// `(i, j, πᵢⱼ)` with `Σ πᵢⱼ = 1` up to the fixed-point residual.
    pub pairs: Vec<(usize, usize, f64)>,
    pub hat_masses: (f64, f64),
    pub exec: Exec,
}

impl ZBridge {
    pub fn solve(
        z0: WeightedCloud,
        z1: WeightedCloud,
        eps: f64,
        opts: &FixedPointOptions,
    ) -> Result<Self> {
        if z0.dim != z1.dim {
            return Err(SteerError::domain("marginals differ in dimension"));
        }
        let exec = opts.exec;
        let prior = LinearPrior::new(z0.dim).stage("σ→σ̂ hatting")?;
        let hat0 = z0.map_linear(&prior.hat0);
        let hat1 = z1.map_linear(&prior.m10_inv_sqrt);
        let kernel =
            KernelOperator::brownian(&hat0, &hat1, eps, 0.0, 1.0, exec).stage("σ̂→ĥ fixed point")?;
        let factors =
            fixed_point(&kernel, &hat0.values, &hat1.values, opts).stage("σ̂→ĥ fixed point")?;
        let recovered = recover_factors(&factors, &prior, &z0, &z1).stage("ĥᴮ→ĥ recovery")?;
        let pairs = factors
            .coupling(&kernel, PAIR_FLOOR, exec)
            .into_iter()
            .map(|(i, j, l)| (i, j, l.exp()))
            .collect();
        Ok(Self {
            hat_masses: (hat0.mass(), hat1.mass()),
            prior,
            eps,
            z0,
            z1,
            kernel,
            factors,
            recovered,
            pairs,
            exec,
        })
    }

    pub fn engine(&self) -> TransientEngine<'_> {
        TransientEngine::new(&self.recovered, self.eps, self.exec)
    }

    /// Quadrature points `(z, mass, i, j)` of `σ_ε(·,t)`. Bridge Gaussians
    /// narrower than half of `resolution` collapse to their means.
    pub fn points(&self, t: f64, resolution: f64) -> Result<Vec<(Point, f64, usize, usize)>> {
        let pb = PinnedBridge::new(self.z0.dim, t, self.eps)?;
        let quad = pb.quadrature(resolution);
        let chunks: Vec<Vec<(Point, f64, usize, usize)>> = self.exec.map(self.pairs.len(), |k| {
            let (i, j, m) = self.pairs[k];
            let mean = pb.mean(self.z0.point(i), self.z1.point(j));
            quad.iter().map(|(o, w)| (&mean + o, m * w, i, j)).collect()
        });
        Ok(chunks.concat())
    }

    /// `σ_ε(·,t)` deposited on `grid`, with the mass that fell outside it.
    pub fn scatter(&self, t: f64, grid: &Grid) -> Result<(Vec<f64>, f64)> {
        let res = grid.spacing().iter().copied().fold(f64::INFINITY, f64::min);
        let mut values = vec![0.0; grid.len()];
        let mut lost = 0.0;
        for (z, m, _, _) in self.points(t, res)? {
            if !grid.deposit(&mut values, z.as_slice(), m) {
                lost += m;
            }
        }
        Ok((values, lost))
    }

    /// `v_ε(·,t)` at the nodes of `grid`. At `t = 1` the control is the
    /// difference quotient of `log h₁ = log σ₁ − log ĥ(·,1)` along the last
    /// axis, with `sigma1` the terminal snapshot on `grid`; it is zero where
    /// `σ₁` vanishes.
    pub fn control_field(
        &self,
        t: f64,
        grid: &Grid,
        sigma1: Option<&[f64]>,
        form: ControlForm,
    ) -> Result<Vec<f64>> {
        let eng = self.engine();
        if t < 1.0 {
            let k1 = crate::bridge::PriorKernel::new(self.z0.dim, t, 1.0, self.eps)?;
            let gain = eng.control_gain(t)?;
            return Ok(self.exec.map(grid.len(), |p| {
                let z = grid.node(p);
                let (lh, v) = eng.log_h_and_control(z.as_slice(), t, &k1, &gain);
                match form {
                    ControlForm::LogGradient => v,
                    ControlForm::Gradient => v * lh.exp(),
                }
            }));
        }
        let sigma1 = sigma1
            .ok_or_else(|| SteerError::domain("terminal control needs the terminal snapshot"))?;
        let log_hhat: Vec<Result<f64>> = self
            .exec
            .map(grid.len(), |p| eng.log_hhat(grid.node(p).as_slice(), 1.0));
        let log_h: Vec<f64> = log_hhat
            .into_iter()
            .zip(sigma1)
            .map(|(l, s)| {
                l.map(|l| {
                    if *s > 0.0 {
                        s.ln() - l
                    } else {
                        f64::NEG_INFINITY
                    }
                })
            })
            .collect::<Result<_>>()?;
        let d = grid.dim();
        let last = d - 1;
        let h = grid.spacing()[last];
        let nlast = grid.shape()[last];
        Ok((0..grid.len())
            .map(|p| {
                let k = p % nlast;
                let (a, b, span) = if k == 0 {
                    (p, p + 1, h)
                } else if k + 1 == nlast {
                    (p - 1, p, h)
                } else {
                    (p - 1, p + 1, 2.0 * h)
                };
                let dlog = (log_h[b] - log_h[a]) / span;
                if !dlog.is_finite() {
                    return 0.0;
                }
                let g = 2.0 * self.eps * dlog;
                match form {
                    ControlForm::LogGradient => g,
                    ControlForm::Gradient => g * log_h[p].exp(),
                }
            })
            .collect())
    }

    /// `∫₀¹ ∫ ½ v_ε² σ_ε dz dt` by Gauss–Legendre in time and Gauss–Hermite
    /// over each pinned-bridge Gaussian.
    pub fn control_cost(&self, time_nodes: usize) -> Result<f64> {
        let eng = self.engine();
        let mut total = 0.0;
        for (t, wt) in gauss_legendre(time_nodes) {
            let k1 = crate::bridge::PriorKernel::new(self.z0.dim, t, 1.0, self.eps)?;
            let gain = eng.control_gain(t)?;
            let pts = self.points(t, 0.0)?;
            let e: Vec<f64> = self.exec.map(pts.len(), |q| {
                let (z, m, _, _) = &pts[q];
                let v = eng.log_h_and_control(z.as_slice(), t, &k1, &gain).1;
                0.5 * v * v * m
            });
            total += wt * e.iter().sum::<f64>();
        }
        Ok(total)
    }
}

/// Nodes and weights of the `m`-point Gauss–Legendre rule on `[0, 1]`.
pub fn gauss_legendre(m: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        // Newton on P_m from the Chebyshev-like initial guess.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for l in 2..=m {
                let p2 = ((2 * l - 1) as f64 * x * p1 - (l - 1) as f64 * p0) / l as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if m == 0 {
                1.0
            } else if m == 1 {
                x
            } else {
                p1
            };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.reverse();
    out
}

/// Inputs of the full pipeline.
#[derive(Clone, Debug)]
pub struct BridgeProblem {
    pub tuple: FeedbackLinearizingTuple,
    /// Discretized endpoint densities on the common x-grid.
    pub rho0: GridDensity,
    pub rho1: GridDensity,
    /// Grid of the z-space snapshots; defaults to the bounding box of both
    /// mapped supports with the x-grid's node counts.
    pub z_grid: Option<Grid>,
    pub eps: f64,
    pub snapshots: Vec<f64>,
    pub fixed_point: FixedPointOptions,
    pub control_form: ControlForm,
    pub newton: NewtonOptions,
}

#[derive(Clone, Debug, Serialize)]
pub struct Snapshot {
    pub t: f64,
    /// `σ_ε(·,t)` on the z-grid.
    pub sigma: Vec<f64>,
    /// `v_ε(·,t)` at the z-grid nodes.
    pub v: Vec<f64>,
    /// `ρ_ε(·,t)` on the x-grid.
    pub rho: Vec<f64>,
    pub sigma_mass: f64,
    pub rho_mass: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    pub x_masses: (f64, f64),
    pub z_masses: (f64, f64),
    pub hat_masses: (f64, f64),
    pub support_sizes: (usize, usize),
    pub iterations: usize,
    pub final_stage_iterations: usize,
    pub residuals: (f64, f64),
    pub coupling_pairs: usize,
    pub endpoint_l1: (f64, f64),
    pub newton_solves: usize,
    pub newton_failures: usize,
    pub max_mass_error: f64,
}

#[derive(Clone, Debug)]
pub struct BridgeSolution {
    pub eps: f64,
    pub x_grid: Grid,
    pub z_grid: Grid,
    pub snapshots: Vec<Snapshot>,
    pub history: Vec<(f64, f64)>,
    pub diagnostics: Diagnostics,
}

impl BridgeSolution {
    pub fn sigma_density(&self, k: usize) -> Result<GridDensity> {
        GridDensity::unchecked_mass(self.z_grid.clone(), self.snapshots[k].sigma.clone())
    }

    pub fn rho_density(&self, k: usize) -> Result<GridDensity> {
        GridDensity::unchecked_mass(self.x_grid.clone(), self.snapshots[k].rho.clone())
    }
}

type QuadPoints = Vec<(Point, f64, usize, usize)>;

/// τ⁻¹ of each quadrature point, trying the blended endpoint preimages as
/// Newton guesses.
fn pull_back(
    exec: Exec,
    pts: &QuadPoints,
    t: f64,
    tuple: &FeedbackLinearizingTuple,
    x0: &WeightedCloud,
    x1: &WeightedCloud,
    newton: NewtonOptions,
) -> Vec<Option<Point>> {
    exec.map(pts.len(), |q| {
        let (z, _, i, j) = &pts[q];
        let a = x0.point_vec(*i);
        let b = x1.point_vec(*j);
        let blend = &a * (1.0 - t) + &b * t;
        [blend, a, b]
            .iter()
            .filter(|g| tuple.in_domain(g))
            .find_map(|g| tau_inverse(tuple, z, g, newton).ok())
    })
}

fn bbox<'a>(points: impl Iterator<Item = &'a Point>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in points {
        for k in 0..d {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

fn deposit_all<'a>(grid: &Grid, pts: impl Iterator<Item = (&'a Point, f64)>) -> (Vec<f64>, f64) {
    let mut values = vec![0.0; grid.len()];
    let mut lost = 0.0;
    for (x, m) in pts {
        if !grid.deposit(&mut values, x.as_slice(), m) {
            lost += m;
        }
    }
    (values, lost)
}

fn default_z_grid(z0: &WeightedCloud, z1: &WeightedCloud, nodes: &[usize]) -> Result<Grid> {
    let pts: Vec<Point> = (0..z0.len())
        .map(|i| z0.point_vec(i))
        .chain((0..z1.len()).map(|j| z1.point_vec(j)))
        .collect();
    Grid::bounding(&pts, nodes, 0.0)
}

/// `(ρ₀, ρ₁) → (σ₀, σ₁) → (σ̂₀, σ̂₁) → (ĥ₀ᴮ, h₁ᴮ) → (ĥ₀, h₁) → (ĥ, h) → σ_ε → ρ_ε`.
///
/// Transient mass may leave the hull of the endpoint supports, so snapshot
/// grids keep the configured spacing and are extended, node-aligned, to
/// cover every quadrature point. An explicit z-grid is used as given.
pub fn steer_pipeline(p: &BridgeProblem) -> Result<BridgeSolution> {
    if !(p.eps > 0.0) {
        return Err(SteerError::domain("ε must be positive"));
    }
    if p.rho0.grid != p.rho1.grid {
        return Err(SteerError::domain(
            "endpoint densities must share the x-grid",
        ));
    }
    let n = p.rho0.grid.dim();
    if p.tuple.n != n {
        return Err(SteerError::domain("system and grid dimensions differ"));
    }
    let mut times = p.snapshots.clone();
    if times.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(SteerError::domain("snapshot times must lie in [0, 1]"));
    }
    for e in [0.0, 1.0] {
        if !times.contains(&e) {
            times.push(e);
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup();

    let mut diag = Diagnostics {
        x_masses: (p.rho0.total_mass(), p.rho1.total_mass()),
        ..Diagnostics::default()
    };
    let x0 = WeightedCloud::from_grid(&p.rho0);
    let x1 = WeightedCloud::from_grid(&p.rho1);
    let z0 = x0.map_tau(&p.tuple).stage("ρ→σ pushforward")?;
    let z1 = x1.map_tau(&p.tuple).stage("ρ→σ pushforward")?;
    diag.z_masses = (z0.mass(), z1.mass());
    diag.support_sizes = (z0.len(), z1.len());
    let base_z = match &p.z_grid {
        Some(g) => g.clone(),
        None => default_z_grid(&z0, &z1, p.rho0.grid.shape()).stage("ρ→σ pushforward")?,
    };

    let zb = ZBridge::solve(z0, z1, p.eps, &p.fixed_point)?;
    diag.hat_masses = zb.hat_masses;
    diag.iterations = zb.factors.iterations;
    diag.final_stage_iterations = zb.factors.final_stage_iterations;
    diag.residuals = zb.factors.residuals;
    diag.coupling_pairs = zb.pairs.len();

    let res = base_z
        .spacing()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let zpts: Vec<QuadPoints> = times
        .iter()
        .map(|&t| zb.points(t, res))
        .collect::<Result<_>>()
        .stage("(ĥ,h)→σ_ε transient")?;
    let z_grid = if p.z_grid.is_some() {
        base_z
    } else {
        let (lo, hi) = bbox(zpts.iter().flatten().map(|q| &q.0), n);
        base_z.extended_to(&lo, &hi)?
    };

    let xpts: Vec<Vec<Option<Point>>> = times
        .iter()
        .zip(&zpts)
        .map(|(&t, pts)| pull_back(zb.exec, pts, t, &p.tuple, &x0, &x1, p.newton))
        .collect();
    for xs in &xpts {
        diag.newton_solves += xs.len();
        diag.newton_failures += xs.iter().filter(|x| x.is_none()).count();
    }
    let (lo, hi) = bbox(xpts.iter().flatten().flatten(), n);
    let x_grid = p
        .rho0
        .grid
        .extended_to(&lo, &hi)
        .stage("σ_ε→ρ_ε pullback")?;

    let mut sigmas = Vec::with_capacity(times.len());
    for pts in &zpts {
        sigmas.push(deposit_all(&z_grid, pts.iter().map(|q| (&q.0, q.1))).0);
    }
    let mut snapshots = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let sigma1 = sigmas.last().map(|s| s.as_slice());
        let v = zb
            .control_field(t, &z_grid, sigma1, p.control_form)
            .stage("(ĥ,h)→σ_ε transient")?;
        let pairs = zpts[k]
            .iter()
            .zip(&xpts[k])
            .filter_map(|(q, x)| x.as_ref().map(|x| (x, q.1)));
        let (rho, _) = deposit_all(&x_grid, pairs);
        let sigma = sigmas[k].clone();
        let sigma_mass = sigma.iter().sum::<f64>() * z_grid.cell_volume();
        let rho_mass = rho.iter().sum::<f64>() * x_grid.cell_volume();
        diag.max_mass_error = diag
            .max_mass_error
            .max((rho_mass - 1.0).abs())
            .max((sigma_mass - 1.0).abs());
        snapshots.push(Snapshot {
            t,
            sigma,
            v,
            rho,
            sigma_mass,
            rho_mass,
        });
    }
    let embed = |d: &GridDensity| -> Result<GridDensity> {
        GridDensity::unchecked_mass(x_grid.clone(), d.grid.embed(&d.values, &x_grid)?)
    };
    let first = GridDensity::unchecked_mass(x_grid.clone(), snapshots[0].rho.clone())?;
    let last =
        GridDensity::unchecked_mass(x_grid.clone(), snapshots[snapshots.len() - 1].rho.clone())?;
    diag.endpoint_l1 = (
        l1_distance(&first, &embed(&p.rho0)?)?,
        l1_distance(&last, &embed(&p.rho1)?)?,
    );

    snapshots.retain(|s| p.snapshots.contains(&s.t));
    Ok(BridgeSolution {
        eps: p.eps,
        x_grid,
        z_grid,
        snapshots,
        history: zb.factors.history.clone(),
        diagnostics: diag,
    })
}

/// `x ↦ x` as a linearizing tuple of the `n`-fold integrator.
pub fn identity_tuple(n: usize) -> FeedbackLinearizingTuple {
    FeedbackLinearizingTuple::from_maps(
        n,
        crate::lie::ScalarField::new(n, |x| x[0]),
        |x| x.clone(),
        move |_| nalgebra::DMatrix::identity(n, n),
        |_| 0.0,
        |_| 1.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for m in [1, 2, 5, 16] {
            let r = gauss_legendre(m);
            for deg in 0..2 * m {
                let q: f64 = r.iter().map(|(x, w)| w * x.powi(deg as i32)).sum();
                assert!(
                    (q - 1.0 / (deg as f64 + 1.0)).abs() < 1e-13,
                    "m={m} deg={deg}"
                );
            }
        }
    }
}
