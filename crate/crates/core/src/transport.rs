//! Deterministic steering: quadratic-cost transport between the hatted
//! marginals and its displacement interpolation under the linear prior.
//!
//! The entropic plan's barycentric projection has a closed form at any point,
//! `T̂(x) = Σⱼ pⱼ(x) ŷⱼ` with softmax weights `pⱼ ∝ exp((⟨x,ŷⱼ⟩ − ½‖ŷⱼ‖²)/η + bⱼ)`,
//! and is the gradient of the convex potential
//! `φ(x) = η log Σⱼ exp((⟨x,ŷⱼ⟩ − ½‖ŷⱼ‖²)/η + bⱼ)`, where `bⱼ = log(h₁ⱼ wⱼ)`.
//! This `φ` equals `½‖x‖²` minus the source potential of the plan.

use nalgebra::{DMatrix, DVector};

use crate::bridge::{fixed_point, log_sum_exp, BridgeFactors, FixedPointOptions, KernelOperator};
use crate::brunovsky::{interp_matrices, stm_offset, LinearPrior};
use crate::density::{hat_marginals, image_grid, Grid, GridDensity, WeightedCloud};
use crate::error::{Result, SteerError};
use crate::lie::{NewtonOptions, Point};
use crate::par::Exec;
use crate::steering::gauss_legendre;

const MAX_HALVINGS: usize = 30;

/// Sub-points per axis that share a source cell's mass in the scatter;
/// depositing one point per cell aliases against the target grid.
pub const SCATTER_SUBCELLS: usize = 4;

/// Entropic coupling of two hatted point sets, kept in factored form:
/// `πᵢⱼ = wᵢ ĥ₀ᵢ k(ẑᵢ, ŷⱼ) h₁ⱼ wⱼ`. The grid densities carry the same
/// marginals on rectilinear grids, where the potential is sampled.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub eta: f64,
    pub sigma0: GridDensity,
    pub sigma1: GridDensity,
    pub src: WeightedCloud,
    pub tgt: WeightedCloud,
    pub kernel: KernelOperator,
    pub factors: BridgeFactors,
    /// Largest deviation of row and column sums from the node masses.
    pub marginal_residuals: (f64, f64),
}

/// Plan for the cost `½‖ẑ₁ − ẑ₀‖²` with kernel `exp(−‖ẑ₀−ẑ₁‖²/(2η))`
/// between the support nodes of two hatted grid densities.
pub fn entropic_plan(
    sigma0: &GridDensity,
    sigma1: &GridDensity,
    eta: f64,
    opts: &FixedPointOptions,
) -> Result<TransportPlan> {
    plan_between(
        WeightedCloud::from_grid(sigma0),
        WeightedCloud::from_grid(sigma1),
        sigma0,
        sigma1,
        eta,
        opts,
    )
}

/// Plan between the exact hatted images of two `z`-marginals. Hatting shears
/// the grids, so coupling the mapped nodes resolves thin directions that an
/// axis-aligned hatted grid of the same size would not; `nodes` sizes the
/// rectilinear grids that carry `σ̂₀`, `σ̂₁` for sampling and diagnostics.
pub fn hatted_plan(
    sigma0: &GridDensity,
    sigma1: &GridDensity,
    prior: &LinearPrior,
    nodes: &[usize],
    eta: f64,
    opts: &FixedPointOptions,
) -> Result<TransportPlan> {
    let g0 = image_grid(sigma0, &prior.hat0, nodes, 0.05)?;
    let g1 = image_grid(sigma1, &prior.m10_inv_sqrt, nodes, 0.05)?;
    let (h0, h1) = hat_marginals(sigma0, sigma1, prior, &g0, &g1)?;
    plan_between(
        WeightedCloud::from_grid(sigma0).map_linear(&prior.hat0),
        WeightedCloud::from_grid(sigma1).map_linear(&prior.m10_inv_sqrt),
        &h0,
        &h1,
        eta,
        opts,
    )
}

fn plan_between(
    src: WeightedCloud,
    tgt: WeightedCloud,
    sigma0: &GridDensity,
    sigma1: &GridDensity,
    eta: f64,
    opts: &FixedPointOptions,
) -> Result<TransportPlan> {
    if src.dim != tgt.dim || sigma0.grid.dim() != src.dim {
        return Err(SteerError::domain(
            "transport marginals differ in dimension",
        ));
    }
    let kernel = KernelOperator::quadratic(&src, &tgt, eta, opts.exec)?;
    let factors = fixed_point(&kernel, &src.values, &tgt.values, opts)?;
    let mut plan = TransportPlan {
        eta,
        sigma0: sigma0.clone(),
        sigma1: sigma1.clone(),
        src,
        tgt,
        kernel,
        factors,
        marginal_residuals: (0.0, 0.0),
    };
    let (rows, cols) = (plan.row_sums(), plan.col_sums());
    let dev = |s: &[f64], c: &WeightedCloud| {
        s.iter()
            .zip(c.masses())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    plan.marginal_residuals = (dev(&rows, &plan.src), dev(&cols, &plan.tgt));
    Ok(plan)
}

impl TransportPlan {
    fn log_row_weight(&self, i: usize) -> f64 {
        self.src.weights[i].ln() + self.factors.log_h0[i]
    }

    fn log_col_weight(&self, j: usize) -> f64 {
        self.tgt.weights[j].ln() + self.factors.log_h1[j]
    }

    /// Mass `πᵢⱼ` between source node `i` and target node `j` of the supports.
    pub fn mass(&self, i: usize, j: usize) -> f64 {
        let l = self.log_row_weight(i)
            + self.kernel.log_values[i * self.tgt.len() + j]
            + self.log_col_weight(j);
        if l.is_nan() {
            0.0
        } else {
            l.exp()
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let with_h1 = self.kernel.log_apply(&self.factors.log_h1, Exec::default());
        (0..self.src.len())
            .map(|i| {
                let v = self.log_row_weight(i) + with_h1[i];
                if v.is_nan() {
                    0.0
                } else {
                    v.exp()
                }
            })
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let with_h0 = self
            .kernel
            .log_apply_t(&self.factors.log_h0, Exec::default());
        (0..self.tgt.len())
            .map(|j| {
                let v = self.log_col_weight(j) + with_h0[j];
                if v.is_nan() {
                    0.0
                } else {
                    v.exp()
                }
            })
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.row_sums().iter().sum()
    }
}

/// Barycentric projection of a plan and its Brenier potential.
#[derive(Clone, Debug)]
pub struct MongeMap {
    pub eta: f64,
    pub dim: usize,
    /// Target support nodes `ŷⱼ`, flattened.
    tgt: Vec<f64>,
    /// `(−½‖ŷⱼ‖² + η bⱼ)/η`, the affine offsets inside `φ`.
    offsets: Vec<f64>,
    /// Grid of the source marginal; `phi` and `map` are sampled on its nodes.
    pub grid: Grid,
    pub phi: Vec<f64>,
    /// `T̂` at every grid node, `dim` values per node.
    pub map: Vec<f64>,
    /// Grid nodes inside the source support.
    pub mask: Vec<bool>,
    /// Constant added to `T̂`; zero for the computed map.
    shift: Vec<f64>,
}

pub fn barycentric_map(plan: &TransportPlan) -> MongeMap {
    let dim = plan.src.dim;
    let eta = plan.eta;
    let nt = plan.tgt.len();
    let tgt = plan.tgt.coords.clone();
    let offsets: Vec<f64> = (0..nt)
        .map(|j| {
            let y = plan.tgt.point(j);
            let b = plan.log_col_weight(j);
            -0.5 * y.iter().map(|v| v * v).sum::<f64>() / eta + b
        })
        .collect();
    let grid = plan.sigma0.grid.clone();
    let mut m = MongeMap {
        eta,
        dim,
        tgt,
        offsets,
        grid: grid.clone(),
        phi: vec![],
        map: vec![],
        mask: vec![false; grid.len()],
        shift: vec![0.0; dim],
    };
    for i in plan.sigma0.support() {
        m.mask[i] = true;
    }
    let samples: Vec<(f64, Point)> = Exec::default().map(grid.len(), |i| {
        let x = grid.node(i);
        (m.phi_at(x.as_slice()), m.map_at(x.as_slice()))
    });
    m.phi = samples.iter().map(|s| s.0).collect();
    m.map = samples
        .iter()
        .flat_map(|s| s.1.iter().copied().collect::<Vec<_>>())
        .collect();
    m
}

impl MongeMap {
    fn exponents(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        self.offsets
            .iter()
            .enumerate()
            .map(|(j, o)| {
                let y = &self.tgt[j * d..(j + 1) * d];
                x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / self.eta + o
            })
            .collect()
    }

    fn weights(&self, x: &[f64]) -> Vec<f64> {
        let e = self.exponents(x);
        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    /// `φ(x)`, defined on all of `ℝⁿ`.
    pub fn phi_at(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.shift.iter().zip(x).map(|(c, v)| c * v).sum();
        self.eta * log_sum_exp(self.exponents(x).into_iter()) + lin
    }

    /// `T̂(x) = ∇φ(x)`.
    pub fn map_at(&self, x: &[f64]) -> Point {
        let d = self.dim;
        let w = self.weights(x);
        let mut out = DVector::from_row_slice(&self.shift);
        for (j, wj) in w.iter().enumerate() {
            if *wj > 0.0 {
                for k in 0..d {
                    out[k] += wj * self.tgt[j * d + k];
                }
            }
        }
        out
    }

    /// `∇T̂(x) = Hess φ(x)`: the softmax covariance of the targets over `η`.
    pub fn jacobian_at(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let w = self.weights(x);
        let mean = self.map_at(x) - DVector::from_row_slice(&self.shift);
        let mut cov = DMatrix::zeros(d, d);
        for (j, wj) in w.iter().enumerate() {
            if *wj > 0.0 {
                let r = DVector::from_fn(d, |k, _| self.tgt[j * d + k] - mean[k]);
                cov += &r * r.transpose() * *wj;
            }
        }
        cov / self.eta
    }

    /// `φ*(y) = maxᵢ ⟨xᵢ, y⟩ − φ(xᵢ)` over the grid nodes.
    pub fn phi_star(&self, y: &[f64]) -> f64 {
        (0..self.grid.len())
            .map(|i| {
                let x = self.grid.node(i);
                x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() - self.phi[i]
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The same map with `T̂ + c` and `φ + ⟨c, ·⟩`.
    pub fn shifted(&self, c: &[f64]) -> Self {
        let mut m = self.clone();
        for (s, v) in m.shift.iter_mut().zip(c) {
            *s += v;
        }
        for i in 0..m.grid.len() {
            let x = m.grid.node(i);
            m.phi[i] += x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            for k in 0..m.dim {
                m.map[i * m.dim + k] += c[k];
            }
        }
        m
    }

    /// Central finite-difference Hessian of the sampled `φ` at an interior node.
    pub fn fd_hessian(&self, idx: &[usize]) -> Option<DMatrix<f64>> {
        let d = self.dim;
        let shape = self.grid.shape();
        if (0..d).any(|k| idx[k] == 0 || idx[k] + 1 >= shape[k]) {
            return None;
        }
        let h = self.grid.spacing();
        let at = |off: &[(usize, isize)]| {
            let mut j = idx.to_vec();
            for &(k, s) in off {
                j[k] = (j[k] as isize + s) as usize;
            }
            self.phi[self.grid.flat_index(&j)]
        };
        let c = at(&[]);
        Some(DMatrix::from_fn(d, d, |k, l| {
            if k == l {
                (at(&[(k, 1)]) - 2.0 * c + at(&[(k, -1)])) / (h[k] * h[k])
            } else {
                (at(&[(k, 1), (l, 1)]) - at(&[(k, 1), (l, -1)]) - at(&[(k, -1), (l, 1)])
                    + at(&[(k, -1), (l, -1)]))
                    / (4.0 * h[k] * h[l])
            }
        }))
    }
}

/// Mass-weighted RMS of `det(Hess φ)·σ̂₁(∇φ) − σ̂₀` over interior nodes, with the
/// Hessian by finite differences of the sampled potential.
pub fn monge_ampere_residual(
    map: &MongeMap,
    sigma0: &GridDensity,
    sigma1: &GridDensity,
) -> Result<f64> {
    if sigma0.grid != map.grid {
        return Err(SteerError::domain("residual needs the map's source grid"));
    }
    let d = map.dim;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..map.grid.len() {
        let Some(hess) = map.fd_hessian(&map.grid.multi_index(i)) else {
            continue;
        };
        let w = sigma0.values[i];
        if w <= 0.0 {
            continue;
        }
        let r = hess.determinant() * sigma1.eval(&map.map[i * d..(i + 1) * d]) - sigma0.values[i];
        num += w * r * r;
        den += w;
    }
    if den == 0.0 {
        return Err(SteerError::domain("no interior support nodes"));
    }
    Ok((num / den).sqrt())
}

/// `T(z) = M₁₀^{1/2} T̂(M₁₀^{−1/2}Φ₁₀ z)` and `T_t(z) = P(t) z + Q(t) T(z)`.
#[derive(Clone, Debug)]
pub struct TransportInterpolation {
    pub prior: LinearPrior,
    pub map: MongeMap,
}

/// `T_t` at a fixed time.
#[derive(Clone, Debug)]
pub struct TimeSlice<'a> {
    pub t: f64,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    interp: &'a TransportInterpolation,
}

pub fn interpolate(map: &MongeMap, n: usize) -> Result<TransportInterpolation> {
    if map.dim != n {
        return Err(SteerError::domain("map dimension differs from n"));
    }
    Ok(TransportInterpolation {
        prior: LinearPrior::new(n)?,
        map: map.clone(),
    })
}

impl TransportInterpolation {
    pub fn t_map(&self, z: &Point) -> Point {
        let hz = &self.prior.hat0 * z;
        &self.prior.m10_sqrt * self.map.map_at(hz.as_slice())
    }

    pub fn t_jacobian(&self, z: &Point) -> DMatrix<f64> {
        let hz = &self.prior.hat0 * z;
        &self.prior.m10_sqrt * self.map.jacobian_at(hz.as_slice()) * &self.prior.hat0
    }

    pub fn at(&self, t: f64) -> Result<TimeSlice<'_>> {
        let (p, q) = interp_matrices(self.prior.n, t)?;
        Ok(TimeSlice {
            t,
            p,
            q,
            interp: self,
        })
    }

    /// `bᵀΦ(1,t)ᵀM₁₀^{−1}[T(x) − Φ₁₀ x]`, the feasible control along the path from `x`.
    pub fn control_from(&self, x: &Point, t: f64) -> Result<f64> {
        let n = self.prior.n;
        let r = self.t_map(x) - &self.prior.phi10 * x;
        let w = crate::brunovsky::spd_solve_vec(&self.prior.m10, &r)?;
        let row = stm_offset(n, 1.0 - t).column(n - 1).into_owned();
        Ok(row.dot(&w))
    }

    /// `Σᵢ mᵢ ∫₀¹ ½ ṽ(T_t(xᵢ), t)² dt` over the support nodes of `sigma0`.
    pub fn control_cost(&self, sigma0: &GridDensity, time_nodes: usize) -> Result<f64> {
        let cloud = WeightedCloud::from_grid(sigma0);
        let gl = gauss_legendre(time_nodes);
        let masses = cloud.masses();
        let per: Vec<Result<f64>> = Exec::default().map(cloud.len(), |i| {
            let x = cloud.point_vec(i);
            let mut acc = 0.0;
            for &(t, w) in &gl {
                let v = self.control_from(&x, t)?;
                acc += w * 0.5 * v * v;
            }
            Ok(acc * masses[i])
        });
        per.into_iter().sum()
    }
}

impl TimeSlice<'_> {
    pub fn apply(&self, z: &Point) -> Point {
        &self.p * z + &self.q * self.interp.t_map(z)
    }

    pub fn jacobian(&self, z: &Point) -> DMatrix<f64> {
        &self.p + &self.q * self.interp.t_jacobian(z)
    }

    /// Damped Newton for `T_t(x) = y`.
    pub fn inverse(&self, y: &Point, guess: &Point, opts: NewtonOptions) -> Result<Point> {
        let scale = 1.0 + y.amax();
        let mut x = guess.clone();
        let mut r = self.apply(&x) - y;
        for _ in 0..opts.max_iter {
            if r.amax() <= opts.tol * scale {
                return Ok(x);
            }
            let Some(step) = self.jacobian(&x).lu().solve(&r) else {
                break;
            };
            let norm = r.norm();
            let mut lam = 1.0;
            let mut moved = false;
            for _ in 0..=MAX_HALVINGS {
                let cand = &x - &step * lam;
                let rc = self.apply(&cand) - y;
                if rc.norm() < norm {
                    x = cand;
                    r = rc;
                    moved = true;
                    break;
                }
                lam *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if r.amax() <= opts.tol * scale {
            Ok(x)
        } else {
            Err(SteerError::numerical(format!(
                "T_t inverse failed at t = {} for y = {:?} (residual {:.3e})",
                self.t,
                y.as_slice(),
                r.amax()
            )))
        }
    }
}

/// `σ̃(·,t) = (T_t)♯σ₀` on `target` and `ṽ(·,t)` at its nodes.
#[derive(Clone, Debug)]
pub struct FeasibleSnapshot {
    pub t: f64,
    pub sigma: GridDensity,
    /// Zero where `mask` is false.
    pub v: Vec<f64>,
    /// Nodes carrying mass whose `T_t` preimage was found.
    pub mask: Vec<bool>,
    /// Mass deposited outside `target`.
    pub lost_mass: f64,
    pub inverse_failures: usize,
}

pub fn feasible_solution(
    interp: &TransportInterpolation,
    sigma0: &GridDensity,
    t: f64,
    target: &Grid,
) -> Result<FeasibleSnapshot> {
    let slice = interp.at(t)?;
    let cloud = WeightedCloud::from_grid(sigma0);
    let masses = cloud.masses();
    let d = cloud.dim;
    let h = sigma0.grid.spacing().to_vec();
    let per = SCATTER_SUBCELLS.pow(d as u32);
    let offsets: Vec<Point> = (0..per)
        .map(|mut c| {
            DVector::from_fn(d, |k, _| {
                let q = c % SCATTER_SUBCELLS;
                c /= SCATTER_SUBCELLS;
                h[k] * ((q as f64 + 0.5) / SCATTER_SUBCELLS as f64 - 0.5)
            })
        })
        .collect();
    let images: Vec<Point> = Exec::default().map(cloud.len(), |i| slice.apply(&cloud.point_vec(i)));
    let scattered: Vec<Vec<Point>> = Exec::default().map(cloud.len(), |i| {
        let x = cloud.point_vec(i);
        offsets.iter().map(|o| slice.apply(&(&x + o))).collect()
    });
    let mut values = vec![0.0; target.len()];
    let mut lost = 0.0;
    for (ys, m) in scattered.iter().zip(&masses) {
        let share = m / per as f64;
        for y in ys {
            if !target.deposit(&mut values, y.as_slice(), share) {
                lost += share;
            }
        }
    }
    let opts = NewtonOptions::default();
    let solved: Vec<Option<f64>> = Exec::default().map(target.len(), |k| {
        if values[k] <= 0.0 {
            return None;
        }
        let y = target.node(k);
        let nearest = (0..images.len()).min_by(|&a, &b| {
            (&images[a] - &y)
                .norm_squared()
                .total_cmp(&(&images[b] - &y).norm_squared())
        })?;
        let x = slice.inverse(&y, &cloud.point_vec(nearest), opts).ok()?;
        interp.control_from(&x, t).ok()
    });
    let carrying = values.iter().filter(|v| **v > 0.0).count();
    let mask: Vec<bool> = solved.iter().map(Option::is_some).collect();
    let inverse_failures = carrying - mask.iter().filter(|b| **b).count();
    Ok(FeasibleSnapshot {
        t,
        sigma: GridDensity::unchecked_mass(target.clone(), values)?,
        v: solved.into_iter().map(|v| v.unwrap_or(0.0)).collect(),
        mask,
        lost_mass: lost,
        inverse_failures,
    })
}

/// Terminal and initial value data `ψ̃₁(z) = ½zᵀM₁₀⁻¹z − φ*(M₁₀^{−1/2}z)` and
/// `ψ̃₀(z) = φ(M₁₀^{−1/2}Φ₁₀z) − ½zᵀΦ₁₀ᵀM₁₀⁻¹Φ₁₀z`.
#[derive(Clone, Debug)]
pub struct ValueBoundary<'a> {
    pub map: &'a MongeMap,
    pub prior: LinearPrior,
    /// Hull of the target marginal's grid, where `φ*` is trusted.
    pub target_grid: Grid,
}

pub fn value_boundary<'a>(
    map: &'a MongeMap,
    target_grid: &Grid,
    n: usize,
) -> Result<ValueBoundary<'a>> {
    Ok(ValueBoundary {
        map,
        prior: LinearPrior::new(n)?,
        target_grid: target_grid.clone(),
    })
}

impl ValueBoundary<'_> {
    /// `None` when `M₁₀^{−1/2}z` leaves the target hull.
    pub fn psi1(&self, z: &Point) -> Option<f64> {
        let y = &self.prior.m10_inv_sqrt * z;
        if !self.target_grid.contains(y.as_slice()) {
            return None;
        }
        Some(0.5 * y.norm_squared() - self.map.phi_star(y.as_slice()))
    }

    /// `None` when `M₁₀^{−1/2}Φ₁₀z` leaves the source hull.
    pub fn psi0(&self, z: &Point) -> Option<f64> {
        let x = &self.prior.hat0 * z;
        if !self.map.grid.contains(x.as_slice()) {
            return None;
        }
        Some(self.map.phi_at(x.as_slice()) - 0.5 * x.norm_squared())
    }

    /// Both fields sampled on `grid`.
    pub fn sample(&self, grid: &Grid) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let p1 = Exec::default().map(grid.len(), |i| self.psi1(&grid.node(i)));
        let p0 = Exec::default().map(grid.len(), |i| self.psi0(&grid.node(i)));
        (p1, p0)
    }
}
