//! Node-sampled densities on uniform rectangular grids, Gaussian mixtures,
//! and changes of variables through `τ` and the hatting maps.
//!
//! Integrals are Riemann sums `Σ value · cell_volume`. Off-node evaluation is
//! multilinear and vanishes outside the grid hull; scatter is its adjoint.
//!
//! [`WeightedCloud`] carries the same data as a point set with per-point
//! quadrature weights. Mapping a cloud through a diffeomorphism is an exact
//! change of variables, which is what the steering pipeline uses between
//! stages; the grid-to-grid transforms here interpolate instead.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::brunovsky::LinearPrior;
use crate::error::{Result, SteerError};
use crate::lie::{FeedbackLinearizingTuple, NewtonOptions, Point};
use crate::par::Exec;

pub const DEFAULT_MASS_TOL: f64 = 1e-3;
/// Nodes below this fraction of the maximum count as outside the support.
pub const SUPPORT_FLOOR: f64 = 1e-12;
const MIN_COVERAGE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lo: Vec<f64>,
    step: Vec<f64>,
    len: Vec<usize>,
}

impl Grid {
    pub fn uniform(bounds: &[(f64, f64)], nodes: &[usize]) -> Result<Self> {
        if bounds.is_empty() || bounds.len() != nodes.len() {
            return Err(SteerError::domain(
                "grid bounds and node counts differ in length",
            ));
        }
        let mut step = Vec::with_capacity(bounds.len());
        for (k, (&(lo, hi), &m)) in bounds.iter().zip(nodes).enumerate() {
            if m < 2 {
                return Err(SteerError::domain(format!(
                    "axis {k} needs at least 2 nodes"
                )));
            }
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(SteerError::domain(format!(
                    "axis {k} bounds [{lo}, {hi}] are invalid"
                )));
            }
            step.push((hi - lo) / (m - 1) as f64);
        }
        Ok(Self {
            lo: bounds.iter().map(|b| b.0).collect(),
            step,
            len: nodes.to_vec(),
        })
    }

    /// Grid from explicit node lists; each must be strictly increasing and
    /// uniformly spaced.
    pub fn from_axes(axes: &[Vec<f64>]) -> Result<Self> {
        let mut bounds = Vec::new();
        let mut nodes = Vec::new();
        for (k, ax) in axes.iter().enumerate() {
            if ax.len() < 2 {
                return Err(SteerError::domain(format!(
                    "axis {k} needs at least 2 nodes"
                )));
            }
            let h = (ax[ax.len() - 1] - ax[0]) / (ax.len() - 1) as f64;
            for (i, w) in ax.windows(2).enumerate() {
                if !(w[1] > w[0]) {
                    return Err(SteerError::domain(format!(
                        "axis {k} is not strictly increasing at node {i}"
                    )));
                }
                if ((w[1] - w[0]) - h).abs() > 1e-12 * h.abs().max(1.0) * 1e3 {
                    return Err(SteerError::domain(format!(
                        "axis {k} is not uniformly spaced at node {i}"
                    )));
                }
            }
            bounds.push((ax[0], ax[ax.len() - 1]));
            nodes.push(ax.len());
        }
        Self::uniform(&bounds, &nodes)
    }

    pub fn dim(&self) -> usize {
        self.len.len()
    }

    /// Total node count.
    pub fn len(&self) -> usize {
        self.len.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.len
    }

    pub fn spacing(&self) -> &[f64] {
        &self.step
    }

    pub fn bounds(&self, axis: usize) -> (f64, f64) {
        let lo = self.lo[axis];
        (lo, lo + self.step[axis] * (self.len[axis] - 1) as f64)
    }

    pub fn axis(&self, axis: usize) -> Vec<f64> {
        (0..self.len[axis])
            .map(|i| self.lo[axis] + self.step[axis] * i as f64)
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.step.iter().product()
    }

    /// Row-major flat index; the last axis varies fastest.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.len)
            .fold(0, |acc, (&i, &m)| acc * m + i)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.len[k];
            flat /= self.len[k];
        }
        idx
    }

    pub fn node(&self, flat: usize) -> Point {
        let idx = self.multi_index(flat);
        DVector::from_iterator(
            self.dim(),
            idx.iter()
                .enumerate()
                .map(|(k, &i)| self.lo[k] + self.step[k] * i as f64),
        )
    }

    /// All node coordinates, flattened row-major.
    pub fn coords(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.len() * d);
        for i in 0..self.len() {
            out.extend(self.node(i).iter());
        }
        out
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|k| {
            let (lo, hi) = self.bounds(k);
            let slack = 1e-12 * self.step[k];
            x[k] >= lo - slack && x[k] <= hi + slack
        })
    }

    /// Lower cell corner and fractional offsets of `x`, or `None` outside the hull.
    fn cell(&self, x: &[f64]) -> Option<(Vec<usize>, Vec<f64>)> {
        if !self.contains(x) {
            return None;
        }
        let d = self.dim();
        let mut base = vec![0; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let u = ((x[k] - self.lo[k]) / self.step[k]).max(0.0);
            let i = (u.floor() as usize).min(self.len[k] - 2);
            base[k] = i;
            frac[k] = (u - i as f64).clamp(0.0, 1.0);
        }
        Some((base, frac))
    }

    fn corners(&self, base: &[usize], frac: &[f64], mut visit: impl FnMut(usize, f64)) {
        let d = self.dim();
        let mut idx = vec![0; d];
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            for k in 0..d {
                if mask >> k & 1 == 1 {
                    idx[k] = base[k] + 1;
                    w *= frac[k];
                } else {
                    idx[k] = base[k];
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                visit(self.flat_index(&idx), w);
            }
        }
    }

    /// Multilinear interpolation of node values; zero outside the hull.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        match self.cell(x) {
            None => 0.0,
            Some((base, frac)) => {
                let mut acc = 0.0;
                self.corners(&base, &frac, |i, w| acc += w * values[i]);
                acc
            }
        }
    }

    /// Adds `mass` to node densities with multilinear weights. Returns `false`
    /// and deposits nothing outside the hull.
    pub fn deposit(&self, values: &mut [f64], x: &[f64], mass: f64) -> bool {
        match self.cell(x) {
            None => false,
            Some((base, frac)) => {
                let scale = mass / self.cell_volume();
                self.corners(&base, &frac, |i, w| values[i] += w * scale);
                true
            }
        }
    }

    /// Grid with this spacing, nodes aligned with this grid's nodes, whose
    /// hull covers both this hull and `[lo, hi]`.
    pub fn extended_to(&self, lo: &[f64], hi: &[f64]) -> Result<Self> {
        let d = self.dim();
        if lo.len() != d || hi.len() != d {
            return Err(SteerError::domain("extension box has the wrong dimension"));
        }
        let mut new_lo = self.lo.clone();
        let mut new_len = self.len.clone();
        for k in 0..d {
            let h = self.step[k];
            let below = ((self.lo[k] - lo[k]) / h - 1e-9).ceil().max(0.0) as usize;
            let top = self.lo[k] + (self.len[k] - 1) as f64 * h;
            let above = ((hi[k] - top) / h - 1e-9).ceil().max(0.0) as usize;
            new_lo[k] = self.lo[k] - below as f64 * h;
            new_len[k] = self.len[k] + below + above;
        }
        Ok(Self {
            lo: new_lo,
            step: self.step.clone(),
            len: new_len,
        })
    }

    /// Node values of this grid placed on an aligned supergrid, zero elsewhere.
    pub fn embed(&self, values: &[f64], sup: &Grid) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut offset = vec![0usize; d];
        for k in 0..d {
            let o = (self.lo[k] - sup.lo[k]) / sup.step[k];
            let r = o.round();
            if sup.dim() != d
                || (self.step[k] - sup.step[k]).abs() > 1e-12 * sup.step[k]
                || (o - r).abs() > 1e-6
                || r < 0.0
                || r as usize + self.len[k] > sup.len[k]
            {
                return Err(SteerError::domain("target is not an aligned supergrid"));
            }
            offset[k] = r as usize;
        }
        let mut out = vec![0.0; sup.len()];
        for (i, v) in values.iter().enumerate() {
            let idx: Vec<usize> = self
                .multi_index(i)
                .iter()
                .zip(&offset)
                .map(|(a, b)| a + b)
                .collect();
            out[sup.flat_index(&idx)] = *v;
        }
        Ok(out)
    }

    /// Smallest grid with the given node counts whose hull contains `points`
    /// padded by `pad` cells on each side.
    pub fn bounding(points: &[Point], nodes: &[usize], pad: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(SteerError::domain("cannot bound an empty point set"));
        }
        let d = points[0].len();
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for p in points {
            for k in 0..d {
                bounds[k].0 = bounds[k].0.min(p[k]);
                bounds[k].1 = bounds[k].1.max(p[k]);
            }
        }
        for (k, b) in bounds.iter_mut().enumerate() {
            let width = (b.1 - b.0).max(1e-9);
            let m = nodes[k] as f64 - 1.0 - 2.0 * pad;
            if m <= 0.0 {
                return Err(SteerError::domain("padding leaves no interior nodes"));
            }
            let h = width / m;
            *b = (b.0 - pad * h, b.1 + pad * h);
        }
        Self::uniform(&bounds, nodes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub grid: Grid,
    pub values: Vec<f64>,
}

fn check_values(values: &[f64]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SteerError::numerical(format!(
            "density value {} at node {i} is negative or not finite",
            values[i]
        )));
    }
    Ok(())
}

impl GridDensity {
    /// Density with unit mass to within [`DEFAULT_MASS_TOL`].
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        Self::with_mass_tol(grid, values, DEFAULT_MASS_TOL)
    }

    pub fn with_mass_tol(grid: Grid, values: Vec<f64>, tol: f64) -> Result<Self> {
        let d = Self::unchecked_mass(grid, values)?;
        let m = d.total_mass();
        if (m - 1.0).abs() > tol {
            return Err(SteerError::numerical(format!(
                "density mass {m:.6} outside 1 ± {tol:e}"
            )));
        }
        Ok(d)
    }

    /// Nonnegative node function without a mass requirement.
    pub fn unchecked_mass(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(SteerError::domain(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        check_values(&values)?;
        Ok(Self { grid, values })
    }

    pub fn total_mass(&self) -> f64 {
        total_mass(self)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn normalized(mut self) -> Result<Self> {
        let m = self.total_mass();
        if !(m > 0.0) {
            return Err(SteerError::numerical(
                "cannot normalize a density with zero mass",
            ));
        }
        self.values.iter_mut().for_each(|v| *v /= m);
        Ok(self)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.grid.interpolate(&self.values, x)
    }

    /// Node indices carrying more than [`SUPPORT_FLOOR`] of the maximum.
    pub fn support(&self) -> Vec<usize> {
        let cut = SUPPORT_FLOOR * self.max_value();
        (0..self.values.len())
            .filter(|&i| self.values[i] > cut)
            .collect()
    }

    /// Mean and covariance under the node quadrature.
    pub fn moments(&self) -> (Point, DMatrix<f64>) {
        let d = self.grid.dim();
        let vol = self.grid.cell_volume();
        let m = self.total_mass();
        let mut mean = DVector::zeros(d);
        for (i, &v) in self.values.iter().enumerate() {
            mean += self.grid.node(i) * (v * vol);
        }
        mean /= m;
        let mut cov = DMatrix::zeros(d, d);
        for (i, &v) in self.values.iter().enumerate() {
            let r = self.grid.node(i) - &mean;
            cov += &r * r.transpose() * (v * vol);
        }
        (mean, cov / m)
    }
}

pub fn total_mass(a: &GridDensity) -> f64 {
    a.values.iter().sum::<f64>() * a.grid.cell_volume()
}

pub fn l1_distance(a: &GridDensity, b: &GridDensity) -> Result<f64> {
    if a.grid != b.grid {
        return Err(SteerError::domain(
            "L1 distance needs densities on the same grid",
        ));
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        * a.grid.cell_volume())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    #[serde(skip)]
    cache: Vec<(DMatrix<f64>, f64)>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(SteerError::domain(
                "mixture needs matching numbers of weights, means and covariances",
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(SteerError::domain("mixture weights must be positive"));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(SteerError::domain(format!(
                "mixture weights sum to {s}, not 1"
            )));
        }
        let n = means[0].len();
        let mut cache = Vec::with_capacity(k);
        for (i, (mu, cov)) in means.iter().zip(&covariances).enumerate() {
            if mu.len() != n || cov.len() != n || cov.iter().any(|r| r.len() != n) {
                return Err(SteerError::domain(format!(
                    "component {i} has inconsistent dimensions"
                )));
            }
            let c = DMatrix::from_fn(n, n, |a, b| cov[a][b]);
            if (&c - c.transpose()).amax() > 1e-12 {
                return Err(SteerError::domain(format!(
                    "covariance {i} is not symmetric"
                )));
            }
            let chol = c.clone().cholesky().ok_or_else(|| {
                SteerError::domain(format!("covariance {i} is not positive definite"))
            })?;
            let det = chol.determinant();
            let inv = chol.inverse();
            let norm = ((2.0 * std::f64::consts::PI).powi(n as i32) * det)
                .sqrt()
                .recip();
            cache.push((inv, norm));
        }
        Ok(Self {
            weights,
            means,
            covariances,
            cache,
        })
    }

    /// Mixture with diagonal covariances.
    pub fn diagonal(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let covs = variances
            .iter()
            .map(|v| {
                (0..v.len())
                    .map(|a| {
                        (0..v.len())
                            .map(|b| if a == b { v[a] } else { 0.0 })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self::new(weights, means, covs)
    }

    /// Rebuilds derived data after deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.weights, self.means, self.covariances)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((w, mu), (inv, norm)) in self.weights.iter().zip(&self.means).zip(&self.cache) {
            let r = DVector::from_iterator(mu.len(), x.iter().zip(mu).map(|(a, b)| a - b));
            acc += w * norm * (-0.5 * (r.transpose() * inv * &r)[(0, 0)]).exp();
        }
        acc
    }
}

/// Node-sampled mixture and its pre-normalization mass.
pub fn discretize(
    mix: &GaussianMixture,
    grid: &Grid,
    renormalize: bool,
) -> Result<(GridDensity, f64)> {
    if mix.dim() != grid.dim() {
        return Err(SteerError::domain("mixture and grid dimensions differ"));
    }
    let values = Exec::default().map(grid.len(), |i| mix.pdf(grid.node(i).as_slice()));
    let d = GridDensity::unchecked_mass(grid.clone(), values)?;
    let mass = d.total_mass();
    if mass < MIN_COVERAGE {
        return Err(SteerError::domain(format!(
            "grid does not cover support (captured mass {mass:.4})"
        )));
    }
    if renormalize {
        if (mass - 1.0).abs() > 1e-12 {
            log::info!(
                "discretize: renormalizing, discarded mass {:.3e}",
                1.0 - mass
            );
        }
        Ok((d.normalized()?, mass))
    } else {
        Ok((d, mass))
    }
}

/// Result of a grid-to-grid change of variables.
#[derive(Clone, Debug)]
pub struct Transformed {
    pub density: GridDensity,
    /// Mass before optional renormalization.
    pub raw_mass: f64,
}

/// Converged preimage from the first guess that works, else the iterate
/// with the smallest residual.
fn invert_tau(
    tuple: &FeedbackLinearizingTuple,
    z: &Point,
    guesses: &[Point],
    opts: NewtonOptions,
) -> std::result::Result<Point, Option<Point>> {
    let mut best: Option<(f64, Point)> = None;
    for g in guesses {
        if !tuple.in_domain(g) {
            continue;
        }
        if let Ok(out) = crate::lie::newton_tau(tuple, z, g, opts) {
            if out.residual <= opts.tol {
                return Ok(out.x);
            }
            if best.as_ref().is_none_or(|(r, _)| out.residual < *r) {
                best = Some((out.residual, out.x));
            }
        }
    }
    Err(best.map(|b| b.1))
}

fn hull_guesses(grid: &Grid) -> Vec<Point> {
    let d = grid.dim();
    let mid = DVector::from_iterator(
        d,
        (0..d).map(|k| {
            let (lo, hi) = grid.bounds(k);
            0.5 * (lo + hi)
        }),
    );
    let mut out = vec![mid.clone()];
    for mask in 0..(1usize << d) {
        let c = DVector::from_iterator(
            d,
            (0..d).map(|k| {
                let (lo, hi) = grid.bounds(k);
                let e = if mask >> k & 1 == 1 { hi } else { lo };
                0.5 * (mid[k] + e)
            }),
        );
        out.push(c);
    }
    out
}

/// `σ(z) = ρ(τ⁻¹(z)) / |det ∇τ(τ⁻¹(z))|` on `zgrid`.
pub fn pushforward_diffeo(
    rho: &GridDensity,
    tuple: &FeedbackLinearizingTuple,
    zgrid: &Grid,
    renormalize: bool,
) -> Result<Transformed> {
    let xgrid = &rho.grid;
    if zgrid.dim() != xgrid.dim() || tuple.n != xgrid.dim() {
        return Err(SteerError::domain("pushforward dimensions differ"));
    }
    let fallback = hull_guesses(xgrid);
    let floor = SUPPORT_FLOOR * rho.max_value();
    let opts = NewtonOptions::default();
    let vals: Vec<Result<f64>> = Exec::default().map(zgrid.len(), |i| {
        let z = zgrid.node(i);
        // Clamping z into the x-hull is a cheap first guess; built-in maps are
        // near-identity on their sample boxes.
        let clamp = DVector::from_iterator(
            z.len(),
            (0..z.len()).map(|k| {
                let (lo, hi) = xgrid.bounds(k);
                z[k].clamp(lo, hi)
            }),
        );
        let mut guesses = vec![clamp];
        guesses.extend(fallback.iter().cloned());
        match invert_tau(tuple, &z, &guesses, opts) {
            Ok(x) => {
                let r = rho.eval(x.as_slice());
                if r == 0.0 {
                    return Ok(0.0);
                }
                let det = tuple.det_jacobian(&x).abs();
                if !(det > 0.0) {
                    return Err(SteerError::numerical(format!(
                        "singular ∇τ at {:?}",
                        x.as_slice()
                    )));
                }
                Ok(r / det)
            }
            Err(best) => {
                // No preimage: acceptable only if the closest iterate sees no mass.
                let near = best.map_or(0.0, |x| rho.eval(x.as_slice()));
                if near > floor {
                    Err(SteerError::numerical(format!(
                        "τ⁻¹ Newton failed at z = {:?}",
                        z.as_slice()
                    )))
                } else {
                    Ok(0.0)
                }
            }
        }
    });
    let values = vals.into_iter().collect::<Result<Vec<_>>>()?;
    finish_transform(zgrid.clone(), values, renormalize, "pushforward")
}

fn finish_transform(
    grid: Grid,
    values: Vec<f64>,
    renormalize: bool,
    what: &str,
) -> Result<Transformed> {
    let d = GridDensity::unchecked_mass(grid, values)?;
    let raw_mass = d.total_mass();
    let density = if renormalize {
        log::info!(
            "{what}: renormalizing, discarded mass {:.3e}",
            1.0 - raw_mass
        );
        d.normalized()?
    } else {
        d
    };
    Ok(Transformed { density, raw_mass })
}

/// `ρ(x) = σ(τ(x)) |det ∇τ(x)|` on `xgrid`; nodes outside the domain get zero.
pub fn pullback_to_x(
    sigma: &GridDensity,
    tuple: &FeedbackLinearizingTuple,
    xgrid: &Grid,
    renormalize: bool,
) -> Result<Transformed> {
    if sigma.grid.dim() != xgrid.dim() || tuple.n != xgrid.dim() {
        return Err(SteerError::domain("pullback dimensions differ"));
    }
    let values = Exec::default().map(xgrid.len(), |i| {
        let x = xgrid.node(i);
        if !tuple.in_domain(&x) {
            return 0.0;
        }
        let s = sigma.eval(tuple.tau(&x).as_slice());
        if s == 0.0 {
            0.0
        } else {
            s * tuple.det_jacobian(&x).abs()
        }
    });
    finish_transform(xgrid.clone(), values, renormalize, "pullback")
}

/// `σ̂(ẑ) = σ(A⁻¹ẑ) / |det A|` on `target` for the linear map `ẑ = A z`.
pub fn linear_pushforward(
    sigma: &GridDensity,
    a: &DMatrix<f64>,
    target: &Grid,
) -> Result<GridDensity> {
    let n = sigma.grid.dim();
    if a.nrows() != n || a.ncols() != n || target.dim() != n {
        return Err(SteerError::domain("linear map dimensions differ"));
    }
    let det = a.determinant().abs();
    let inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| SteerError::domain("linear map is singular"))?;
    for i in sigma.support() {
        let img = a * sigma.grid.node(i);
        if !target.contains(img.as_slice()) {
            return Err(SteerError::domain(format!(
                "transformed support point {:?} escapes the target grid",
                img.as_slice()
            )));
        }
    }
    let values = Exec::default().map(target.len(), |i| {
        let z = &inv * target.node(i);
        sigma.eval(z.as_slice()) / det
    });
    GridDensity::unchecked_mass(target.clone(), values)
}

/// `σ̂₀(ẑ) = det(M₁₀)^{1/2} σ₀(Φ₁₀⁻¹M₁₀^{1/2}ẑ)` and
/// `σ̂₁(ẑ) = det(M₁₀)^{1/2} σ₁(M₁₀^{1/2}ẑ)`.
pub fn hat_marginals(
    sigma0: &GridDensity,
    sigma1: &GridDensity,
    prior: &LinearPrior,
    grid0: &Grid,
    grid1: &Grid,
) -> Result<(GridDensity, GridDensity)> {
    Ok((
        linear_pushforward(sigma0, &prior.hat0, grid0)?,
        linear_pushforward(sigma1, &prior.m10_inv_sqrt, grid1)?,
    ))
}

/// Inverse of [`hat_marginals`].
pub fn unhat_marginals(
    hat0: &GridDensity,
    hat1: &GridDensity,
    prior: &LinearPrior,
    grid0: &Grid,
    grid1: &Grid,
) -> Result<(GridDensity, GridDensity)> {
    Ok((
        linear_pushforward(hat0, &prior.unhat0(), grid0)?,
        linear_pushforward(hat1, &prior.m10_sqrt, grid1)?,
    ))
}

/// Grid enclosing the image of `sigma`'s support under `a`.
pub fn image_grid(
    sigma: &GridDensity,
    a: &DMatrix<f64>,
    nodes: &[usize],
    pad: f64,
) -> Result<Grid> {
    let pts: Vec<Point> = sigma
        .support()
        .into_iter()
        .map(|i| a * sigma.grid.node(i))
        .collect();
    Grid::bounding(&pts, nodes, pad)
}

/// Points with quadrature weights and node values; `∫ f ≈ Σ f(p_i) w_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedCloud {
    pub dim: usize,
    /// Flattened coordinates, `dim` per point.
    pub coords: Vec<f64>,
    pub weights: Vec<f64>,
    pub values: Vec<f64>,
}

impl WeightedCloud {
    /// Support nodes of a grid density.
    pub fn from_grid(d: &GridDensity) -> Self {
        let idx = d.support();
        let dim = d.grid.dim();
        let vol = d.grid.cell_volume();
        let mut coords = Vec::with_capacity(idx.len() * dim);
        for &i in &idx {
            coords.extend(d.grid.node(i).iter());
        }
        Self {
            dim,
            coords,
            weights: vec![vol; idx.len()],
            values: idx.iter().map(|&i| d.values[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_vec(&self, i: usize) -> Point {
        DVector::from_row_slice(self.point(i))
    }

    pub fn mass(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .sum()
    }

    pub fn masses(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .collect()
    }

    /// Exact change of variables under `p ↦ A p`.
    pub fn map_linear(&self, a: &DMatrix<f64>) -> Self {
        let det = a.determinant().abs();
        let mut coords = Vec::with_capacity(self.coords.len());
        for i in 0..self.len() {
            coords.extend((a * self.point_vec(i)).iter());
        }
        Self {
            dim: self.dim,
            coords,
            weights: self.weights.iter().map(|w| w * det).collect(),
            values: self.values.iter().map(|v| v / det).collect(),
        }
    }

    /// Exact change of variables under `z = τ(x)`.
    pub fn map_tau(&self, tuple: &FeedbackLinearizingTuple) -> Result<Self> {
        let mut coords = Vec::with_capacity(self.coords.len());
        let mut weights = Vec::with_capacity(self.len());
        let mut values = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let x = self.point_vec(i);
            if !tuple.in_domain(&x) {
                return Err(SteerError::domain(format!(
                    "support point {:?} lies outside the linearization domain",
                    x.as_slice()
                )));
            }
            let det = tuple.det_jacobian(&x).abs();
            if !(det > 0.0 && det.is_finite()) {
                return Err(SteerError::numerical(format!(
                    "singular ∇τ at {:?}",
                    x.as_slice()
                )));
            }
            coords.extend(tuple.tau(&x).iter());
            weights.push(self.weights[i] * det);
            values.push(self.values[i] / det);
        }
        Ok(Self {
            dim: self.dim,
            coords,
            weights,
            values,
        })
    }

    /// Mean and covariance.
    pub fn moments(&self) -> (Point, DMatrix<f64>) {
        let d = self.dim;
        let m = self.mass();
        let mut mean = DVector::zeros(d);
        for i in 0..self.len() {
            mean += self.point_vec(i) * (self.values[i] * self.weights[i]);
        }
        mean /= m;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..self.len() {
            let r = self.point_vec(i) - &mean;
            cov += &r * r.transpose() * (self.values[i] * self.weights[i]);
        }
        (mean, cov / m)
    }
}

/// JSON sidecar of a CSV snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub axes: Vec<AxisMeta>,
    pub mass: f64,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisMeta {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl GridMeta {
    pub fn new(grid: &Grid, values: &[f64], provenance: impl Into<String>) -> Self {
        Self {
            axes: (0..grid.dim())
                .map(|k| {
                    let (min, max) = grid.bounds(k);
                    AxisMeta {
                        min,
                        max,
                        nodes: grid.shape()[k],
                    }
                })
                .collect(),
            mass: values.iter().sum::<f64>() * grid.cell_volume(),
            provenance: provenance.into(),
        }
    }
}

/// Writes `axis0,…,axis{n-1},value` rows in row-major node order.
pub fn write_csv<W: Write>(grid: &Grid, values: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..grid.dim()).map(|k| format!("axis{k}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(grid.dim() + 1);
    for (i, v) in values.iter().enumerate() {
        row.clear();
        row.extend(grid.node(i).iter().map(|c| format!("{c}")));
        row.push(format!("{v}"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the format of [`write_csv`], rebuilding the grid from the node list.
pub fn read_csv<R: Read>(input: R) -> Result<(Grid, Vec<f64>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let d = header.len().saturating_sub(1);
    if d == 0
        || header.get(d) != Some("value")
        || (0..d).any(|k| header.get(k) != Some(format!("axis{k}").as_str()))
    {
        return Err(SteerError::config(
            "csv header",
            "expected axis0,…,axis{n-1},value",
        ));
    }
    let mut coords: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| SteerError::config("csv row", format!("{e}: {s}")))
        };
        for (k, c) in coords.iter_mut().enumerate() {
            c.push(parse(&rec[k])?);
        }
        values.push(parse(&rec[d])?);
    }
    let axes: Vec<Vec<f64>> = coords
        .iter()
        .map(|c| {
            let mut u = c.clone();
            u.sort_by(|a, b| a.partial_cmp(b).unwrap());
            u.dedup();
            u
        })
        .collect();
    let grid = Grid::from_axes(&axes)?;
    if grid.len() != values.len() {
        return Err(SteerError::config(
            "csv rows",
            "row count does not match the node lattice",
        ));
    }
    for (i, _) in values.iter().enumerate() {
        let node = grid.node(i);
        for k in 0..d {
            if (node[k] - coords[k][i]).abs() > 1e-9 * grid.spacing()[k] {
                return Err(SteerError::config(
                    "csv rows",
                    "rows are not in row-major node order",
                ));
            }
        }
    }
    Ok((grid, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss1(mean: f64, var: f64) -> GaussianMixture {
        GaussianMixture::diagonal(vec![1.0], vec![vec![mean]], vec![vec![var]]).unwrap()
    }

    #[test]
    fn extension_is_aligned_and_embedding_preserves_mass() {
        let g = Grid::uniform(&[(-1.0, 1.0), (0.0, 1.0)], &[5, 3]).unwrap();
        let e = g.extended_to(&[-1.7, 0.2], &[1.2, 2.01]).unwrap();
        assert_eq!(e.shape(), &[8, 6]);
        assert!((e.bounds(0).0 + 2.0).abs() < 1e-12 && (e.bounds(0).1 - 1.5).abs() < 1e-12);
        assert!((e.bounds(1).1 - 2.5).abs() < 1e-12);
        let vals: Vec<f64> = (0..g.len()).map(|i| i as f64).collect();
        let emb = g.embed(&vals, &e).unwrap();
        assert_eq!(emb.iter().sum::<f64>(), vals.iter().sum::<f64>());
        for i in 0..g.len() {
            let x = g.node(i);
            assert_eq!(e.interpolate(&emb, x.as_slice()), vals[i]);
        }
        assert_eq!(g.extended_to(&[0.0, 0.5], &[0.5, 0.5]).unwrap(), g);
        let off = Grid::uniform(&[(-1.1, 1.1)], &[5]).unwrap();
        assert!(Grid::uniform(&[(-1.0, 1.0)], &[5])
            .unwrap()
            .embed(&[0.0; 5], &off)
            .is_err());
    }

    #[test]
    fn grid_indexing_round_trip() {
        let g = Grid::uniform(&[(0.0, 1.0), (-1.0, 1.0), (2.0, 3.0)], &[3, 4, 5]).unwrap();
        assert_eq!(g.len(), 60);
        for i in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(i)), i);
        }
        assert_eq!(g.multi_index(1), vec![0, 0, 1]);
        let node = g.node(g.flat_index(&[2, 3, 4]));
        assert_eq!(node.as_slice(), &[1.0, 1.0, 3.0]);
        assert_eq!(
            Grid::from_axes(&[g.axis(0), g.axis(1), g.axis(2)]).unwrap(),
            g
        );
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::uniform(&[(0.0, 1.0)], &[1]).is_err());
        assert!(Grid::uniform(&[(1.0, 0.0)], &[3]).is_err());
        assert!(Grid::from_axes(&[vec![0.0, 0.5, 0.6]]).is_err());
        assert!(Grid::from_axes(&[vec![0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn interpolation_is_exact_for_multilinear_functions() {
        let g = Grid::uniform(&[(-1.0, 1.0), (0.0, 2.0)], &[5, 7]).unwrap();
        let f = |x: &[f64]| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1];
        let vals: Vec<f64> = (0..g.len()).map(|i| f(g.node(i).as_slice())).collect();
        for x in [[0.13, 1.77], [-1.0, 0.0], [1.0, 2.0], [0.3, 0.3]] {
            assert!((g.interpolate(&vals, &x) - f(&x)).abs() < 1e-12);
        }
        assert_eq!(g.interpolate(&vals, &[1.5, 0.0]), 0.0);
    }

    #[test]
    fn deposit_conserves_mass() {
        let g = Grid::uniform(&[(0.0, 1.0), (0.0, 1.0)], &[11, 11]).unwrap();
        let mut v = vec![0.0; g.len()];
        assert!(g.deposit(&mut v, &[0.123, 0.987], 0.3));
        assert!(g.deposit(&mut v, &[1.0, 1.0], 0.2));
        assert!(!g.deposit(&mut v, &[1.2, 0.5], 0.5));
        let m: f64 = v.iter().sum::<f64>() * g.cell_volume();
        assert!((m - 0.5).abs() < 1e-14);
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::diagonal(
            vec![0.5, 0.6],
            vec![vec![0.0], vec![1.0]],
            vec![vec![1.0], vec![1.0]]
        )
        .is_err());
        assert!(GaussianMixture::diagonal(vec![1.0], vec![vec![0.0]], vec![vec![-1.0]]).is_err());
        assert!(GaussianMixture::new(
            vec![1.0],
            vec![vec![0.0, 0.0]],
            vec![vec![vec![1.0, 0.5], vec![0.0, 1.0]]]
        )
        .is_err());
    }

    #[test]
    fn standard_gaussian_coverage() {
        let g = Grid::uniform(&[(-6.0, 6.0)], &[121]).unwrap();
        let (d, pre) = discretize(&gauss1(0.0, 1.0), &g, true).unwrap();
        assert!((pre - 1.0).abs() < 1e-6);
        assert!((d.total_mass() - 1.0).abs() < 1e-14);
        let narrow = Grid::uniform(&[(-1.0, 1.0)], &[41]).unwrap();
        let err = discretize(&gauss1(0.0, 1.0), &narrow, true).unwrap_err();
        assert!(err.to_string().contains("does not cover support"));
    }

    #[test]
    fn identity_and_scaling_pushforwards() {
        let g = Grid::uniform(&[(-3.0, 3.0)], &[121]).unwrap();
        let (rho, _) = discretize(&gauss1(0.2, 0.3), &g, true).unwrap();
        let id = FeedbackLinearizingTuple::from_maps(
            1,
            crate::lie::ScalarField::new(1, |x| x[0]),
            |x| x.clone(),
            |_| DMatrix::identity(1, 1),
            |_| 0.0,
            |_| 1.0,
        );
        let s = pushforward_diffeo(&rho, &id, &g, false).unwrap().density;
        assert!(l1_distance(&s, &rho).unwrap() < 1e-12);

        let dbl = FeedbackLinearizingTuple::from_maps(
            1,
            crate::lie::ScalarField::new(1, |x| 2.0 * x[0]),
            |x| x * 2.0,
            |_| DMatrix::from_element(1, 1, 2.0),
            |_| 0.0,
            |_| 1.0,
        );
        let zg = Grid::uniform(&[(-6.0, 6.0)], &[241]).unwrap();
        let s = pushforward_diffeo(&rho, &dbl, &zg, false).unwrap();
        assert!((s.raw_mass - 1.0).abs() < 1e-3);
        for i in 0..zg.len() {
            let z = zg.node(i)[0];
            assert!((s.density.values[i] - rho.eval(&[z / 2.0]) / 2.0).abs() < 1e-14);
        }
        let back = pullback_to_x(&s.density, &dbl, &g, false).unwrap().density;
        assert!(l1_distance(&back, &rho).unwrap() < 1e-10);
    }

    #[test]
    fn hatting_in_one_dimension_is_identity() {
        let g = Grid::uniform(&[(-2.0, 2.0)], &[81]).unwrap();
        let (a, _) = discretize(&gauss1(0.1, 0.2), &g, true).unwrap();
        let (b, _) = discretize(&gauss1(-0.3, 0.1), &g, true).unwrap();
        let lp = LinearPrior::new(1).unwrap();
        let (ha, hb) = hat_marginals(&a, &b, &lp, &g, &g).unwrap();
        assert!(l1_distance(&ha, &a).unwrap() < 1e-12);
        assert!(l1_distance(&hb, &b).unwrap() < 1e-12);
    }

    #[test]
    fn hat_escape_is_an_error() {
        let g = Grid::uniform(&[(-2.0, 2.0), (-2.0, 2.0)], &[41, 41]).unwrap();
        let mix = GaussianMixture::diagonal(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![0.1, 0.1]])
            .unwrap();
        let (a, _) = discretize(&mix, &g, true).unwrap();
        let lp = LinearPrior::new(2).unwrap();
        let tiny = Grid::uniform(&[(-0.1, 0.1), (-0.1, 0.1)], &[5, 5]).unwrap();
        assert!(hat_marginals(&a, &a, &lp, &tiny, &tiny).is_err());
    }

    #[test]
    fn l1_and_mass() {
        let g = Grid::uniform(&[(0.0, 1.0)], &[3]).unwrap();
        let a = GridDensity::new(g.clone(), vec![2.0, 0.0, 0.0]).unwrap();
        let b = GridDensity::new(g.clone(), vec![0.0, 0.0, 2.0]).unwrap();
        assert_eq!(l1_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(total_mass(&a), 1.0);
        let other = Grid::uniform(&[(0.0, 2.0)], &[3]).unwrap();
        let c = GridDensity::unchecked_mass(other, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(l1_distance(&a, &c).is_err());
        assert!(GridDensity::new(g.clone(), vec![1.0, -1.0, 0.0]).is_err());
        assert!(GridDensity::new(g, vec![5.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn cloud_changes_of_variables_preserve_mass() {
        let g = Grid::uniform(&[(-2.0, 2.0), (-2.0, 2.0)], &[31, 31]).unwrap();
        let mix = GaussianMixture::diagonal(vec![1.0], vec![vec![0.2, -0.1]], vec![vec![0.1, 0.2]])
            .unwrap();
        let (d, _) = discretize(&mix, &g, true).unwrap();
        let c = WeightedCloud::from_grid(&d);
        let lp = LinearPrior::new(2).unwrap();
        let h = c.map_linear(&lp.hat0);
        assert!((h.mass() - c.mass()).abs() < 1e-12);
        let (m0, c0) = c.moments();
        let (m1, c1) = h.moments();
        assert!((m1 - &lp.hat0 * m0).amax() < 1e-12);
        assert!((c1 - &lp.hat0 * c0 * lp.hat0.transpose()).amax() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let g = Grid::uniform(&[(0.0, 1.0), (-1.0, 1.0)], &[3, 4]).unwrap();
        let vals: Vec<f64> = (0..g.len()).map(|i| i as f64 * 0.1).collect();
        let mut buf = Vec::new();
        write_csv(&g, &vals, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("axis0,axis1,value\n"));
        let (g2, v2) = read_csv(buf.as_slice()).unwrap();
        assert_eq!(g2.shape(), g.shape());
        assert_eq!(v2, vals);
        assert!(read_csv("x,y\n1,2\n".as_bytes()).is_err());
    }
}
