//! Value functions of the minimum-energy problem in normal-form coordinates.
//!
//! The HJB equation is `ψ_t + H(z, ∇ψ) = 0` with
//! `H(z, ζ) = Σ z_{i+1}ζᵢ − (α_τ/β_τ)ζₙ + ζₙ²/(2β_τ²)`. For general `α_τ, β_τ`
//! only characteristic strips and residual checks are provided. For the linear
//! prior (`α_τ ≡ 0`, `β_τ ≡ 1`) the characteristics have a closed form through
//! the Brenier potential of the hatted transport problem, and the upper and
//! lower envelope formulas give two grid-based alternatives.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::brunovsky::{
    gramian_offset, reversed_gramian, spd_solve, spd_sqrt, stm_offset, LinearPrior,
};
use crate::density::Grid;
use crate::error::{Result, SteerError};
use crate::lie::{tau_inverse, FeedbackLinearizingTuple, NewtonOptions, Point};
use crate::par::Exec;
use crate::transport::MongeMap;

/// Smallest admissible `|β_τ|`; below it the relative degree drops.
pub const BETA_FLOOR: f64 = 1e-8;
const MAX_HALVINGS: usize = 30;

type Coefficients = Arc<dyn Fn(&Point) -> Result<(f64, f64)> + Send + Sync>;

/// `α_τ = α∘τ⁻¹` and `β_τ = β∘τ⁻¹`, with gradients by central differences.
#[derive(Clone)]
pub struct HamiltonianSpec {
    pub n: usize,
    coefficients: Coefficients,
    /// Central-difference step, scaled by `1 + |zₖ|`.
    pub fd_step: f64,
}

impl fmt::Debug for HamiltonianSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HamiltonianSpec")
            .field("n", &self.n)
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

fn shift(z: &Point) -> Point {
    let n = z.len();
    DVector::from_fn(n, |i, _| if i + 1 < n { z[i + 1] } else { 0.0 })
}

fn shift_t(z: &Point) -> Point {
    DVector::from_fn(z.len(), |i, _| if i > 0 { z[i - 1] } else { 0.0 })
}

impl HamiltonianSpec {
    /// `coefficients(z) = (α_τ(z), β_τ(z))`.
    pub fn new(
        n: usize,
        coefficients: impl Fn(&Point) -> Result<(f64, f64)> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            coefficients: Arc::new(coefficients),
            fd_step: 1e-4,
        }
    }

    /// `α_τ ≡ 0`, `β_τ ≡ 1`.
    pub fn brunovsky(n: usize) -> Self {
        Self::new(n, |_| Ok((0.0, 1.0)))
    }

    /// Composition with the Newton inverse of `τ`, started from `guess(z)`.
    pub fn from_tuple(
        tuple: FeedbackLinearizingTuple,
        guess: impl Fn(&Point) -> Point + Send + Sync + 'static,
        opts: NewtonOptions,
    ) -> Self {
        let n = tuple.n;
        Self::new(n, move |z| {
            let x = tau_inverse(&tuple, z, &guess(z), opts)?;
            Ok((tuple.alpha(&x), tuple.beta(&x)))
        })
    }

    /// `(α_τ(z), β_τ(z))`; errors when `|β_τ| < BETA_FLOOR`.
    pub fn coefficients(&self, z: &Point) -> Result<(f64, f64)> {
        let (a, b) = (self.coefficients)(z)?;
        if !(b.abs() >= BETA_FLOOR) || !a.is_finite() {
            return Err(SteerError::numerical(format!(
                "β_τ = {b:.3e} at z = {:?}: relative degree is not n here",
                z.as_slice()
            )));
        }
        Ok((a, b))
    }

    /// `(∇α_τ(z), ∇β_τ(z))`.
    pub fn gradients(&self, z: &Point) -> Result<(Point, Point)> {
        let mut ga = DVector::zeros(self.n);
        let mut gb = DVector::zeros(self.n);
        for k in 0..self.n {
            let h = self.fd_step * (1.0 + z[k].abs());
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let (ap, bp) = self.coefficients(&zp)?;
            let (am, bm) = self.coefficients(&zm)?;
            ga[k] = (ap - am) / (2.0 * h);
            gb[k] = (bp - bm) / (2.0 * h);
        }
        Ok((ga, gb))
    }

    pub fn hamiltonian(&self, z: &Point, zeta: &Point) -> Result<f64> {
        let (a, b) = self.coefficients(z)?;
        let zn = zeta[self.n - 1];
        Ok(shift(z).dot(zeta) - a / b * zn + zn * zn / (2.0 * b * b))
    }

    /// `a(z) = Az + L_fⁿλ(τ⁻¹z) b`, the drift under zero input.
    pub fn drift(&self, z: &Point) -> Result<Point> {
        let (a, b) = self.coefficients(z)?;
        let mut out = shift(z);
        out[self.n - 1] -= a / b;
        Ok(out)
    }

    /// `ℓ(z, w)`: `β_τ²(w − a(z))ₙ²/2` when `w − a(z)` is parallel to `b`,
    /// `+∞` otherwise.
    pub fn lagrangian(&self, z: &Point, w: &Point) -> Result<f64> {
        let (_, b) = self.coefficients(z)?;
        let d = w - self.drift(z)?;
        let scale = 1.0 + w.amax();
        if d.rows(0, self.n - 1).amax() > 1e-12 * scale {
            return Ok(f64::INFINITY);
        }
        let u = d[self.n - 1];
        Ok(0.5 * b * b * u * u)
    }
}

/// Sampled characteristic strip `(t, z, ζ, θ, ψ)` with `s = t`.
#[derive(Clone, Debug)]
pub struct CharacteristicStrip {
    pub times: Vec<f64>,
    pub z: Vec<Point>,
    pub zeta: Vec<Point>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
}

impl CharacteristicStrip {
    /// `H(z(s), ζ(s))` at every sample.
    pub fn hamiltonian(&self, spec: &HamiltonianSpec) -> Result<Vec<f64>> {
        self.z
            .iter()
            .zip(&self.zeta)
            .map(|(z, c)| spec.hamiltonian(z, c))
            .collect()
    }
}

/// Packed state `(z, ζ, θ, ψ)`.
fn strip_rhs(spec: &HamiltonianSpec, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n = spec.n;
    let z: Point = y.rows(0, n).into_owned();
    let zeta: Point = y.rows(n, n).into_owned();
    let (a, b) = spec.coefficients(&z)?;
    let (ga, gb) = spec.gradients(&z)?;
    let zn = zeta[n - 1];
    let mut dz = shift(&z);
    dz[n - 1] += zn / (b * b) - a / b;
    let dzeta =
        -shift_t(&zeta) + (&ga * b - &gb * a) * (zn / (b * b)) + &gb * (zn * zn / (b * b * b));
    let mut out = DVector::zeros(2 * n + 2);
    out.rows_mut(0, n).copy_from(&dz);
    out.rows_mut(n, n).copy_from(&dzeta);
    out[2 * n + 1] = zn * zn / (2.0 * b * b);
    Ok(out)
}

/// Classical RK4 on `[0, 1]` with `steps` uniform steps. `θ` starts at
/// `−H(z₀, ζ₀)` so that the strip lies on the HJB equation.
pub fn integrate_strip(
    spec: &HamiltonianSpec,
    z0: &Point,
    zeta0: &Point,
    psi0: f64,
    steps: usize,
) -> Result<CharacteristicStrip> {
    let n = spec.n;
    if z0.len() != n || zeta0.len() != n {
        return Err(SteerError::domain("strip initial data must have length n"));
    }
    if steps == 0 {
        return Err(SteerError::domain("strip needs at least one step"));
    }
    let theta0 = -spec.hamiltonian(z0, zeta0)?;
    let mut y = DVector::zeros(2 * n + 2);
    y.rows_mut(0, n).copy_from(z0);
    y.rows_mut(n, n).copy_from(zeta0);
    y[2 * n] = theta0;
    y[2 * n + 1] = psi0;
    let h = 1.0 / steps as f64;
    let mut strip = CharacteristicStrip {
        times: Vec::with_capacity(steps + 1),
        z: Vec::with_capacity(steps + 1),
        zeta: Vec::with_capacity(steps + 1),
        theta: Vec::with_capacity(steps + 1),
        psi: Vec::with_capacity(steps + 1),
    };
    let push = |s: &mut CharacteristicStrip, t: f64, y: &DVector<f64>| {
        s.times.push(t);
        s.z.push(y.rows(0, n).into_owned());
        s.zeta.push(y.rows(n, n).into_owned());
        s.theta.push(y[2 * n]);
        s.psi.push(y[2 * n + 1]);
    };
    push(&mut strip, 0.0, &y);
    for k in 0..steps {
        let k1 = strip_rhs(spec, &y)?;
        let k2 = strip_rhs(spec, &(&y + &k1 * (0.5 * h)))?;
        let k3 = strip_rhs(spec, &(&y + &k2 * (0.5 * h)))?;
        let k4 = strip_rhs(spec, &(&y + &k3 * h))?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        push(&mut strip, (k + 1) as f64 * h, &y);
    }
    Ok(strip)
}

/// A convex potential `φ` with `T̂ = ∇φ`.
pub trait BrenierPotential: Sync {
    fn dim(&self) -> usize;
    fn phi(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Point;

    /// Central differences of the gradient, symmetrized.
    fn hessian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        let mut xp = x.to_vec();
        for k in 0..d {
            let step = 1e-5 * (1.0 + x[k].abs());
            xp[k] = x[k] + step;
            let gp = self.gradient(&xp);
            xp[k] = x[k] - step;
            let gm = self.gradient(&xp);
            xp[k] = x[k];
            h.set_column(k, &((gp - gm) / (2.0 * step)));
        }
        (&h + h.transpose()) * 0.5
    }
}

impl BrenierPotential for MongeMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn phi(&self, x: &[f64]) -> f64 {
        self.phi_at(x)
    }

    fn gradient(&self, x: &[f64]) -> Point {
        self.map_at(x)
    }
}

/// `φ(x) = ½xᵀAx + cᵀx`, the Brenier potential between two Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePotential {
    pub a: DMatrix<f64>,
    pub c: Point,
}

impl AffinePotential {
    pub fn identity(n: usize) -> Self {
        Self {
            a: DMatrix::identity(n, n),
            c: DVector::zeros(n),
        }
    }

    /// Monge map `x ↦ μ₁ + A(x − μ₀)` from `N(μ₀, Σ₀)` to `N(μ₁, Σ₁)`, with
    /// `A = Σ₀^{−1/2}(Σ₀^{1/2}Σ₁Σ₀^{1/2})^{1/2}Σ₀^{−1/2}`.
    pub fn gaussian(
        mu0: &Point,
        cov0: &DMatrix<f64>,
        mu1: &Point,
        cov1: &DMatrix<f64>,
    ) -> Result<Self> {
        let s = spd_sqrt(cov0)?;
        let mid = spd_sqrt(&(&s * cov1 * &s))?;
        let s_inv = spd_solve(&s, &DMatrix::identity(s.nrows(), s.nrows()))?;
        let a = &s_inv * mid * &s_inv;
        let a = (&a + a.transpose()) * 0.5;
        let c = mu1 - &a * mu0;
        Ok(Self { a, c })
    }
}

impl BrenierPotential for AffinePotential {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn phi(&self, x: &[f64]) -> f64 {
        let x = DVector::from_row_slice(x);
        0.5 * x.dot(&(&self.a * &x)) + self.c.dot(&x)
    }

    fn gradient(&self, x: &[f64]) -> Point {
        &self.a * DVector::from_row_slice(x) + &self.c
    }
}

/// `ψ̃₀(z) = φ(Rz) − ½‖Rz‖²` with `R = M₁₀^{−1/2}Φ₁₀`.
pub fn initial_value(pot: &dyn BrenierPotential, prior: &LinearPrior, z: &Point) -> f64 {
    let x = &prior.hat0 * z;
    pot.phi(x.as_slice()) - 0.5 * x.norm_squared()
}

/// `∇ψ̃₀(z) = Rᵀ[∇φ(Rz) − Rz]`.
pub fn initial_gradient(pot: &dyn BrenierPotential, prior: &LinearPrior, z: &Point) -> Point {
    let x = &prior.hat0 * z;
    prior.hat0.transpose() * (pot.gradient(x.as_slice()) - x)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Time-`t` matrices of the closed-form characteristics.
#[derive(Clone, Debug)]
pub struct FlowGeometry {
    pub t: f64,
    pub prior: LinearPrior,
    /// `exp(tA)`.
    pub phi_t: DMatrix<f64>,
    /// `M(t, 0)`.
    pub m_t: DMatrix<f64>,
    /// `exp(−tAᵀ)`.
    pub back_t: DMatrix<f64>,
    /// `N(t) = exp(−tA) M(t,0) exp(−tAᵀ)`.
    pub n_t: DMatrix<f64>,
    /// `S(t)^{1/2}` with `S = R N(t) Rᵀ`.
    pub s_sqrt: DMatrix<f64>,
}

impl FlowGeometry {
    pub fn new(prior: &LinearPrior, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(SteerError::domain(format!("t = {t} outside [0, 1]")));
        }
        let n = prior.n;
        let n_t = reversed_gramian(n, t);
        let r = &prior.hat0;
        let s = r * &n_t * r.transpose();
        Ok(Self {
            t,
            prior: prior.clone(),
            phi_t: stm_offset(n, t),
            m_t: gramian_offset(n, t),
            back_t: stm_offset(n, -t).transpose(),
            s_sqrt: psd_sqrt(&s),
            n_t,
        })
    }

    /// `1 + λ_min(S^{1/2}[Hess φ − I]S^{1/2})`; the characteristic map is a
    /// local diffeomorphism iff this is positive.
    pub fn spectral_margin(&self, hess: &DMatrix<f64>) -> f64 {
        let n = self.prior.n;
        let k = &self.s_sqrt * (hess - DMatrix::identity(n, n)) * &self.s_sqrt;
        let eig = SymmetricEigen::new((&k + k.transpose()) * 0.5);
        1.0 + eig.eigenvalues.min()
    }

    /// `z(t) = exp(tA)z₀ + M(t,0)exp(−tAᵀ)∇ψ̃₀(z₀)`.
    pub fn forward(&self, pot: &dyn BrenierPotential, z0: &Point) -> Point {
        let zeta0 = initial_gradient(pot, &self.prior, z0);
        &self.phi_t * z0 + &self.m_t * (&self.back_t * zeta0)
    }

    /// `∇_{z₀} z = exp(tA){I + N(t)Rᵀ[Hess φ(Rz₀) − I]R}` and `Hess φ(Rz₀)`.
    fn forward_jacobian(
        &self,
        pot: &dyn BrenierPotential,
        z0: &Point,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.prior.n;
        let r = &self.prior.hat0;
        let x = r * z0;
        let hess = pot.hessian(x.as_slice());
        let eye = DMatrix::identity(n, n);
        let j = &self.phi_t * (&eye + &self.n_t * r.transpose() * (&hess - &eye) * r);
        (j, hess)
    }
}

/// Root `z₀` of `exp(tA)z₀ + M(t,0)exp(−tAᵀ)[RᵀT̂(Rz₀) − RᵀRz₀] = z`.
#[derive(Clone, Debug)]
pub struct Z0Solution {
    pub z0: Point,
    pub iterations: usize,
    /// Minimum spectral margin over the Newton iterates.
    pub spectral_margin: f64,
}

/// Damped Newton with the analytic Jacobian; starts from `guess`, or from the
/// identity-transport root `exp(−tA)z`.
pub fn solve_z0(
    pot: &dyn BrenierPotential,
    geom: &FlowGeometry,
    z: &Point,
    guess: Option<&Point>,
    opts: NewtonOptions,
) -> Result<Z0Solution> {
    let n = geom.prior.n;
    if pot.dim() != n || z.len() != n {
        return Err(SteerError::domain(
            "potential, point and prior dimensions differ",
        ));
    }
    if geom.t == 0.0 {
        return Ok(Z0Solution {
            z0: z.clone(),
            iterations: 0,
            spectral_margin: 1.0,
        });
    }
    let mut z0 = match guess {
        Some(g) => g.clone(),
        None => stm_offset(n, -geom.t) * z,
    };
    let scale = 1.0 + z.amax();
    let mut r = geom.forward(pot, &z0) - z;
    let mut margin = f64::INFINITY;
    for it in 0..opts.max_iter {
        let (j, hess) = geom.forward_jacobian(pot, &z0);
        margin = margin.min(geom.spectral_margin(&hess));
        if margin <= opts.tol {
            return Err(SteerError::numerical(format!(
                "characteristic map Jacobian degenerate at z₀ = {:?}: spectral margin {margin:.3e}",
                z0.as_slice()
            )));
        }
        if r.amax() <= opts.tol * scale {
            return Ok(Z0Solution {
                z0,
                iterations: it,
                spectral_margin: margin,
            });
        }
        let Some(step) = j.lu().solve(&r) else {
            break;
        };
        let norm = r.norm();
        let mut lam = 1.0;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &z0 - &step * lam;
            let rc = geom.forward(pot, &cand) - z;
            if rc.norm() < norm {
                z0 = cand;
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
        let (_, hess) = geom.forward_jacobian(pot, &z0);
        margin = margin.min(geom.spectral_margin(&hess));
        return Ok(Z0Solution {
            z0,
            iterations: opts.max_iter,
            spectral_margin: margin,
        });
    }
    Err(SteerError::numerical(format!(
        "z₀ Newton stagnated at t = {} for z = {:?} (residual {:.3e})",
        geom.t,
        z.as_slice(),
        r.amax()
    )))
}

/// `ψ̃(z,t)` on the characteristic through `z₀(z,t)`, with its gradient `ζ(t)`.
#[derive(Clone, Debug)]
pub struct CharacteristicValue {
    pub psi: f64,
    pub z0: Point,
    pub zeta: Point,
    pub spectral_margin: f64,
}

/// `ψ̃(z,t) = ψ̃₀(z₀) + ½‖z − Φ(t,0)z₀‖²_{M(t,0)⁻¹}`. The penalty is evaluated
/// as `½ζᵀM(t,0)ζ` with `ζ = exp(−tAᵀ)∇ψ̃₀(z₀)`, which stays finite as `t → 0`.
pub fn psi_characteristic(
    pot: &dyn BrenierPotential,
    geom: &FlowGeometry,
    z: &Point,
    opts: NewtonOptions,
) -> Result<CharacteristicValue> {
    let sol = solve_z0(pot, geom, z, None, opts)?;
    let zeta = &geom.back_t * initial_gradient(pot, &geom.prior, &sol.z0);
    let psi = initial_value(pot, &geom.prior, &sol.z0) + 0.5 * zeta.dot(&(&geom.m_t * &zeta));
    Ok(CharacteristicValue {
        psi,
        z0: sol.z0,
        zeta,
        spectral_margin: sol.spectral_margin,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Characteristic,
    UpperEnvelope,
    LowerEnvelope,
    RiccatiOracle,
}

/// `ψ` on a grid over `Z` at each of `times`, slice-major.
#[derive(Clone, Debug)]
pub struct ValueFunction {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl ValueFunction {
    fn build(
        grid: &Grid,
        times: &[f64],
        provenance: Provenance,
        eval: impl Fn(usize, usize) -> Result<f64> + Sync + Send,
    ) -> Result<Self> {
        let m = grid.len();
        let values: Result<Vec<f64>> = Exec::default()
            .map(m * times.len(), |i| eval(i / m, i % m))
            .into_iter()
            .collect();
        let values = values?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SteerError::numerical(format!(
                "{provenance:?} value not finite at t = {}, z = {:?}",
                times[i / m],
                grid.node(i % m).as_slice()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            times: times.to_vec(),
            values,
            provenance,
        })
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let m = self.grid.len();
        &self.values[k * m..(k + 1) * m]
    }

    pub fn value(&self, k: usize, node: usize) -> f64 {
        self.values[k * self.grid.len() + node]
    }

    /// `∂ψ/∂zₙ` at every node of slice `k`: central differences inside, one-sided
    /// on the two boundary layers.
    pub fn zn_derivative(&self, k: usize) -> Vec<f64> {
        let g = &self.grid;
        let a = g.dim() - 1;
        let len = g.shape()[a];
        let h = g.spacing()[a];
        let psi = self.slice(k);
        (0..g.len())
            .map(|i| {
                let mut idx = g.multi_index(i);
                let j = idx[a];
                let mut at = |jj: usize| {
                    idx[a] = jj;
                    psi[g.flat_index(&idx)]
                };
                if j == 0 {
                    (at(1) - at(0)) / h
                } else if j + 1 == len {
                    (at(j) - at(j - 1)) / h
                } else {
                    (at(j + 1) - at(j - 1)) / (2.0 * h)
                }
            })
            .collect()
    }
}

/// Characteristic values on `grid × times`; also returns the smallest spectral
/// margin met by any `z₀` solve.
pub fn characteristic_field(
    pot: &dyn BrenierPotential,
    prior: &LinearPrior,
    grid: &Grid,
    times: &[f64],
    opts: NewtonOptions,
) -> Result<(ValueFunction, f64)> {
    let geoms: Vec<FlowGeometry> = times
        .iter()
        .map(|&t| FlowGeometry::new(prior, t))
        .collect::<Result<_>>()?;
    let m = grid.len();
    let cells: Result<Vec<(f64, f64)>> = Exec::default()
        .map(m * times.len(), |i| {
            let c = psi_characteristic(pot, &geoms[i / m], &grid.node(i % m), opts)?;
            Ok((c.psi, c.spectral_margin))
        })
        .into_iter()
        .collect();
    let cells = cells?;
    let margin = cells.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let field = ValueFunction {
        grid: grid.clone(),
        times: times.to_vec(),
        values: cells.iter().map(|c| c.0).collect(),
        provenance: Provenance::Characteristic,
    };
    Ok((field, margin))
}

/// Like [`characteristic_field`], but nodes whose `z₀` solve fails hold NaN
/// instead of aborting; also returns the number of such nodes.
pub fn characteristic_field_masked(
    pot: &dyn BrenierPotential,
    prior: &LinearPrior,
    grid: &Grid,
    times: &[f64],
    opts: NewtonOptions,
) -> Result<(ValueFunction, usize, f64)> {
    let geoms: Vec<FlowGeometry> = times
        .iter()
        .map(|&t| FlowGeometry::new(prior, t))
        .collect::<Result<_>>()?;
    let m = grid.len();
    let cells: Vec<Option<(f64, f64)>> = Exec::default().map(m * times.len(), |i| {
        psi_characteristic(pot, &geoms[i / m], &grid.node(i % m), opts)
            .ok()
            .map(|c| (c.psi, c.spectral_margin))
    });
    let failures = cells.iter().filter(|c| c.is_none()).count();
    let margin = cells
        .iter()
        .flatten()
        .map(|c| c.1)
        .fold(f64::INFINITY, f64::min);
    let field = ValueFunction {
        grid: grid.clone(),
        times: times.to_vec(),
        values: cells.iter().map(|c| c.map_or(f64::NAN, |c| c.0)).collect(),
        provenance: Provenance::Characteristic,
    };
    Ok((field, failures, margin))
}

/// `v(z,t) = ψ_{zₙ}/β_τ² − α_τ/β_τ` with `ψ_{zₙ}` from differences on the
/// field's grid, interpolated multilinearly in `z` and linearly in `t`.
pub fn optimal_control_from_psi(
    spec: &HamiltonianSpec,
    field: &ValueFunction,
    z: &Point,
    t: f64,
) -> Result<f64> {
    let g = &field.grid;
    if z.len() != spec.n || g.dim() != spec.n {
        return Err(SteerError::domain("control evaluation dimensions differ"));
    }
    if !g.contains(z.as_slice()) {
        return Err(SteerError::domain(format!(
            "z = {:?} outside the value grid",
            z.as_slice()
        )));
    }
    let times = &field.times;
    let (t0, t1) = (times[0], times[times.len() - 1]);
    if !(t0..=t1).contains(&t) {
        return Err(SteerError::domain(format!(
            "t = {t} outside the value lattice"
        )));
    }
    let a = spec.n - 1;
    let (lo, _) = g.bounds(a);
    let u = (z[a] - lo) / g.spacing()[a];
    if u < 1.0 || u > (g.shape()[a] - 2) as f64 {
        log::warn!(
            "∂ψ/∂zₙ at z = {:?} uses one-sided differences",
            z.as_slice()
        );
    }
    let k = times
        .partition_point(|&s| s <= t)
        .clamp(1, times.len().max(2) - 1)
        - 1;
    let dpsi = if times.len() == 1 {
        g.interpolate(&field.zn_derivative(0), z.as_slice())
    } else {
        let w = ((t - times[k]) / (times[k + 1] - times[k])).clamp(0.0, 1.0);
        let d0 = g.interpolate(&field.zn_derivative(k), z.as_slice());
        let d1 = g.interpolate(&field.zn_derivative(k + 1), z.as_slice());
        (1.0 - w) * d0 + w * d1
    };
    let (alpha, beta) = spec.coefficients(z)?;
    Ok(dpsi / (beta * beta) - alpha / beta)
}

/// Fourth-order centered first difference on a uniform stencil.
fn d4(m2: f64, m1: f64, p1: f64, p2: f64, h: f64) -> f64 {
    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h)
}

/// Mass-weighted RMS of `ψ_t + H(z, ∇ψ)` over lattice points at least two
/// samples from every boundary, with fourth-order centered differences. The
/// time samples must be uniform. Stencils touching non-finite values are
/// skipped.
pub fn hjb_residual(
    field: &ValueFunction,
    spec: &HamiltonianSpec,
    weight: impl Fn(&Point, f64) -> f64 + Sync + Send,
) -> Result<f64> {
    let g = &field.grid;
    let d = g.dim();
    if d != spec.n {
        return Err(SteerError::domain("value grid dimension differs from n"));
    }
    let nt = field.times.len();
    if nt < 5 || g.shape().iter().any(|&s| s < 5) {
        return Err(SteerError::domain(
            "residual needs at least five samples per axis",
        ));
    }
    let dt = (field.times[nt - 1] - field.times[0]) / (nt - 1) as f64;
    if field
        .times
        .iter()
        .enumerate()
        .any(|(k, &t)| (t - field.times[0] - k as f64 * dt).abs() > 1e-9 * (1.0 + dt))
    {
        return Err(SteerError::domain("residual needs uniform time samples"));
    }
    let h = g.spacing();
    let interior: Vec<usize> = (0..g.len())
        .filter(|&i| {
            let idx = g.multi_index(i);
            (0..d).all(|k| idx[k] > 1 && idx[k] + 2 < g.shape()[k])
        })
        .collect();
    let m = interior.len();
    let terms: Result<Vec<(f64, f64)>> = Exec::default()
        .map(m * (nt - 4), |c| {
            let k = c / m + 2;
            let i = interior[c % m];
            let idx = g.multi_index(i);
            let z = g.node(i);
            let t = field.times[k];
            let psi_t = d4(
                field.value(k - 2, i),
                field.value(k - 1, i),
                field.value(k + 1, i),
                field.value(k + 2, i),
                dt,
            );
            let grad = DVector::from_fn(d, |a, _| {
                let at = |s: isize| {
                    let mut p = idx.clone();
                    p[a] = (p[a] as isize + s) as usize;
                    field.value(k, g.flat_index(&p))
                };
                d4(at(-2), at(-1), at(1), at(2), h[a])
            });
            if !(psi_t.is_finite() && grad.iter().all(|x| x.is_finite())) {
                return Ok((0.0, 0.0));
            }
            let r = psi_t + spec.hamiltonian(&z, &grad)?;
            let w = weight(&z, t);
            Ok((w * r * r, w))
        })
        .into_iter()
        .collect();
    let (num, den) = terms?
        .iter()
        .fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    if !(den > 0.0) {
        return Err(SteerError::domain(
            "residual weight vanishes on the lattice",
        ));
    }
    Ok((num / den).sqrt())
}

/// `ψ̃₀` sampled on a grid over `Z`.
#[derive(Clone, Debug)]
pub struct SampledField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl SampledField {
    pub fn sample(grid: &Grid, f: impl Fn(&Point) -> f64 + Sync + Send) -> Self {
        Self {
            grid: grid.clone(),
            values: Exec::default().map(grid.len(), |i| f(&grid.node(i))),
        }
    }

    fn interpolate(&self, z: &Point) -> Result<f64> {
        if !self.grid.contains(z.as_slice()) {
            return Err(SteerError::domain(format!(
                "z = {:?} outside the ψ̃₀ grid",
                z.as_slice()
            )));
        }
        Ok(self.grid.interpolate(&self.values, z.as_slice()))
    }

    /// Central-difference gradients inside, one-sided on the boundary.
    pub fn gradients(&self) -> Vec<Point> {
        let g = &self.grid;
        let d = g.dim();
        let h = g.spacing();
        (0..g.len())
            .map(|i| {
                let idx = g.multi_index(i);
                DVector::from_fn(d, |a, _| {
                    let len = g.shape()[a];
                    let (lo, hi) = (idx[a].saturating_sub(1), (idx[a] + 1).min(len - 1));
                    let mut p = idx.clone();
                    p[a] = hi;
                    let up = self.values[g.flat_index(&p)];
                    p[a] = lo;
                    let dn = self.values[g.flat_index(&p)];
                    (up - dn) / ((hi - lo) as f64 * h[a])
                })
            })
            .collect()
    }

    /// Smallest eigenvalue of the central-difference Hessian over interior nodes.
    pub fn min_hessian_eigenvalue(&self) -> f64 {
        let g = &self.grid;
        let d = g.dim();
        let h = g.spacing();
        let mut lo = f64::INFINITY;
        for i in 0..g.len() {
            let idx = g.multi_index(i);
            if (0..d).any(|k| idx[k] == 0 || idx[k] + 1 >= g.shape()[k]) {
                continue;
            }
            let at = |off: &[(usize, isize)]| {
                let mut j = idx.clone();
                for &(k, s) in off {
                    j[k] = (j[k] as isize + s) as usize;
                }
                self.values[g.flat_index(&j)]
            };
            let c = at(&[]);
            let hess = DMatrix::from_fn(d, d, |k, l| {
                if k == l {
                    (at(&[(k, 1)]) - 2.0 * c + at(&[(k, -1)])) / (h[k] * h[k])
                } else {
                    (at(&[(k, 1), (l, 1)]) - at(&[(k, 1), (l, -1)]) - at(&[(k, -1), (l, 1)])
                        + at(&[(k, -1), (l, -1)]))
                        / (4.0 * h[k] * h[l])
                }
            });
            lo = lo.min(SymmetricEigen::new(hess).eigenvalues.min());
        }
        lo
    }
}

/// `inf_{z̄} ψ̃₀(z̄) + ½‖z − exp(tA)z̄‖²_{M(t,0)⁻¹}` over the grid nodes `z̄`.
pub struct UpperEnvelope<'a> {
    psi0: &'a SampledField,
    t: f64,
    phi_t: DMatrix<f64>,
    m_inv: DMatrix<f64>,
}

impl<'a> UpperEnvelope<'a> {
    pub fn new(psi0: &'a SampledField, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(SteerError::domain(format!("t = {t} outside [0, 1]")));
        }
        let n = psi0.grid.dim();
        let m_inv = if t > 0.0 {
            spd_solve(&gramian_offset(n, t), &DMatrix::identity(n, n))?
        } else {
            DMatrix::zeros(n, n)
        };
        Ok(Self {
            psi0,
            t,
            phi_t: stm_offset(n, t),
            m_inv,
        })
    }

    /// At `t = 0` the formula degenerates and `ψ̃₀(z)` is interpolated instead.
    pub fn eval(&self, z: &Point) -> Result<f64> {
        if self.t == 0.0 {
            return self.psi0.interpolate(z);
        }
        let g = &self.psi0.grid;
        let mut best = f64::INFINITY;
        for (i, v) in self.psi0.values.iter().enumerate() {
            let d = z - &self.phi_t * g.node(i);
            best = best.min(v + 0.5 * d.dot(&(&self.m_inv * &d)));
        }
        Ok(best)
    }
}

pub fn upper_envelope(psi0: &SampledField, z: &Point, t: f64) -> Result<f64> {
    UpperEnvelope::new(psi0, t)?.eval(z)
}

/// Discrete conjugate `ψ̃₀*(r) = max_{z̄} ⟨r, z̄⟩ − ψ̃₀(z̄)` on a dual grid that
/// spans the difference gradients of `ψ̃₀`, padded by 20% of the range.
#[derive(Clone, Debug)]
pub struct Conjugate {
    pub grid: Grid,
    pub values: Vec<f64>,
}

/// Relative slack of the discrete convexity check.
const CONVEXITY_TOL: f64 = 1e-6;

pub fn conjugate(psi0: &SampledField) -> Result<Conjugate> {
    let d = psi0.grid.dim();
    let lam = psi0.min_hessian_eigenvalue();
    let grads = psi0.gradients();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for gr in &grads {
        for k in 0..d {
            lo[k] = lo[k].min(gr[k]);
            hi[k] = hi[k].max(gr[k]);
        }
    }
    let curv = (0..d)
        .map(|k| (hi[k] - lo[k]) / (psi0.grid.bounds(k).1 - psi0.grid.bounds(k).0))
        .fold(1.0, f64::max);
    if lam < -CONVEXITY_TOL * curv {
        return Err(SteerError::domain(format!(
            "ψ̃₀ is not convex on the grid bulk (Hessian eigenvalue {lam:.3e}); the lower envelope needs convexity"
        )));
    }
    let bounds: Vec<(f64, f64)> = (0..d)
        .map(|k| {
            let w = (hi[k] - lo[k]).max(1e-12);
            (lo[k] - 0.2 * w, hi[k] + 0.2 * w)
        })
        .collect();
    let grid = Grid::uniform(&bounds, psi0.grid.shape())?;
    let nodes: Vec<Point> = (0..psi0.grid.len()).map(|i| psi0.grid.node(i)).collect();
    let values = Exec::default().map(grid.len(), |j| {
        let r = grid.node(j);
        nodes
            .iter()
            .zip(&psi0.values)
            .map(|(z, v)| r.dot(z) - v)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    Ok(Conjugate { grid, values })
}

/// `sup_r −ψ̃₀*(r) + zᵀexp(−tAᵀ)r − ½rᵀN(t)r` over the dual grid.
pub struct LowerEnvelope<'a> {
    psi0: &'a SampledField,
    conj: &'a Conjugate,
    t: f64,
    back: DMatrix<f64>,
    n_t: DMatrix<f64>,
}

impl<'a> LowerEnvelope<'a> {
    pub fn new(psi0: &'a SampledField, conj: &'a Conjugate, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(SteerError::domain(format!("t = {t} outside [0, 1]")));
        }
        let n = psi0.grid.dim();
        Ok(Self {
            psi0,
            conj,
            t,
            back: stm_offset(n, -t),
            n_t: reversed_gramian(n, t),
        })
    }

    pub fn eval(&self, z: &Point) -> Result<f64> {
        if self.t == 0.0 {
            return self.psi0.interpolate(z);
        }
        let w = &self.back * z;
        let g = &self.conj.grid;
        let mut best = f64::NEG_INFINITY;
        for (j, v) in self.conj.values.iter().enumerate() {
            let r = g.node(j);
            best = best.max(-v + w.dot(&r) - 0.5 * r.dot(&(&self.n_t * &r)));
        }
        Ok(best)
    }
}

pub fn lower_envelope(psi0: &SampledField, conj: &Conjugate, z: &Point, t: f64) -> Result<f64> {
    LowerEnvelope::new(psi0, conj, t)?.eval(z)
}

pub fn upper_envelope_field(
    psi0: &SampledField,
    grid: &Grid,
    times: &[f64],
) -> Result<ValueFunction> {
    let env: Vec<UpperEnvelope> = times
        .iter()
        .map(|&t| UpperEnvelope::new(psi0, t))
        .collect::<Result<_>>()?;
    ValueFunction::build(grid, times, Provenance::UpperEnvelope, |k, i| {
        env[k].eval(&grid.node(i))
    })
}

pub fn lower_envelope_field(
    psi0: &SampledField,
    conj: &Conjugate,
    grid: &Grid,
    times: &[f64],
) -> Result<ValueFunction> {
    let env: Vec<LowerEnvelope> = times
        .iter()
        .map(|&t| LowerEnvelope::new(psi0, conj, t))
        .collect::<Result<_>>()?;
    ValueFunction::build(grid, times, Provenance::LowerEnvelope, |k, i| {
        env[k].eval(&grid.node(i))
    })
}

/// `½zᵀΠz + pᵀz + c`, a quadratic solution of the linear-prior HJB equation.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticValue {
    pub pi: DMatrix<f64>,
    pub p: Point,
    pub c: f64,
}

impl QuadraticValue {
    pub fn eval(&self, z: &Point) -> f64 {
        0.5 * z.dot(&(&self.pi * z)) + self.p.dot(z) + self.c
    }

    /// `ψ̃₀` of an affine Brenier potential: `Π = Rᵀ(A − I)R`, `p = Rᵀc`.
    pub fn from_affine(pot: &AffinePotential, prior: &LinearPrior) -> Self {
        let n = prior.n;
        let r = &prior.hat0;
        Self {
            pi: r.transpose() * (&pot.a - DMatrix::identity(n, n)) * r,
            p: r.transpose() * &pot.c,
            c: 0.0,
        }
    }

    fn rate(&self) -> (DMatrix<f64>, Point, f64) {
        let n = self.p.len();
        let a = DMatrix::from_fn(n, n, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        let pb = self.pi.column(n - 1).into_owned();
        let bp = self.p[n - 1];
        let dpi = -(&self.pi * &a + a.transpose() * &self.pi) - &pb * pb.transpose();
        let dp = -(a.transpose() * &self.p) - pb * bp;
        (dpi, dp, -0.5 * bp * bp)
    }

    fn axpy(&self, h: f64, d: &(DMatrix<f64>, Point, f64)) -> Self {
        Self {
            pi: &self.pi + &d.0 * h,
            p: &self.p + &d.1 * h,
            c: self.c + d.2 * h,
        }
    }
}

/// RK4 for `Π̇ = −(ΠA + AᵀΠ) − ΠbbᵀΠ`, `ṗ = −Aᵀp − Πbbᵀp`, `ċ = −½(bᵀp)²`
/// from `initial` at time 0 to `t`.
pub fn riccati_oracle(initial: &QuadraticValue, t: f64, steps: usize) -> QuadraticValue {
    let mut y = initial.clone();
    let steps = steps.max(1);
    let h = t / steps as f64;
    for _ in 0..steps {
        let k1 = y.rate();
        let k2 = y.axpy(0.5 * h, &k1).rate();
        let k3 = y.axpy(0.5 * h, &k2).rate();
        let k4 = y.axpy(h, &k3).rate();
        y = QuadraticValue::combine(&y, h, [k1, k2, k3, k4]);
    }
    y.pi = (&y.pi + y.pi.transpose()) * 0.5;
    y
}

impl QuadraticValue {
    fn combine(y: &Self, h: f64, k: [(DMatrix<f64>, Point, f64); 4]) -> Self {
        let [k1, k2, k3, k4] = k;
        let s = h / 6.0;
        Self {
            pi: &y.pi + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * s,
            p: &y.p + (k1.1 + k2.1 * 2.0 + k3.1 * 2.0 + k4.1) * s,
            c: y.c + (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2) * s,
        }
    }
}

/// Riccati oracle sampled on `grid × times`.
pub fn riccati_field(
    initial: &QuadraticValue,
    grid: &Grid,
    times: &[f64],
    steps: usize,
) -> Result<ValueFunction> {
    let q: Vec<QuadraticValue> = times
        .iter()
        .map(|&t| riccati_oracle(initial, t, (steps as f64 * t).ceil() as usize))
        .collect();
    ValueFunction::build(grid, times, Provenance::RiccatiOracle, |k, i| {
        Ok(q[k].eval(&grid.node(i)))
    })
}
