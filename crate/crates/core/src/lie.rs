//! Lie derivatives, brackets and feedback linearization of single-input
//! control-affine systems.
//!
//! Derivatives use the analytic gradient or Jacobian when a field carries one
//! and nested central differences otherwise. Every field records how many
//! finite-difference layers its evaluator already contains; differencing a
//! field with `d` inner layers uses the step `(1e-5)^(1/(d+1))` scaled by
//! `max(1, |x_i|)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::brunovsky::BrunovskyPair;
use crate::error::{Result, SteerError};

pub type Point = DVector<f64>;
type VecFn = Arc<dyn Fn(&Point) -> Point + Send + Sync>;
type MatFn = Arc<dyn Fn(&Point) -> DMatrix<f64> + Send + Sync>;
type RealFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
type PredFn = Arc<dyn Fn(&Point) -> bool + Send + Sync>;

const BASE_STEP: f64 = 1e-5;

fn fd_step(inner_layers: usize, x: f64) -> f64 {
    BASE_STEP.powf(1.0 / (inner_layers as f64 + 1.0)) * x.abs().max(1.0)
}

fn perturbed(x: &Point, i: usize, h: f64) -> Result<(Point, Point, f64)> {
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp[i] += h;
    xm[i] -= h;
    let span = xp[i] - xm[i];
    if span == 0.0 || !span.is_finite() {
        return Err(SteerError::numerical(format!(
            "finite-difference step underflow at coordinate {i}"
        )));
    }
    Ok((xp, xm, span))
}

#[derive(Clone)]
pub struct VectorField {
    pub n: usize,
    eval: VecFn,
    jac: Option<MatFn>,
    layers: usize,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VectorField")
            .field("n", &self.n)
            .field("analytic_jacobian", &self.jac.is_some())
            .field("layers", &self.layers)
            .finish()
    }
}

impl VectorField {
    pub fn new(n: usize, eval: impl Fn(&Point) -> Point + Send + Sync + 'static) -> Self {
        Self {
            n,
            eval: Arc::new(eval),
            jac: None,
            layers: 0,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&Point) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jac = Some(Arc::new(jac));
        self
    }

    /// Same field with the analytic Jacobian dropped.
    pub fn numeric(&self) -> Self {
        Self {
            jac: None,
            ..self.clone()
        }
    }

    pub fn has_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    /// Constant field.
    pub fn constant(v: Point) -> Self {
        let n = v.len();
        let w = v.clone();
        Self::new(n, move |_| w.clone()).with_jacobian(move |_| DMatrix::zeros(n, n))
    }

    pub fn eval(&self, x: &Point) -> Point {
        (self.eval)(x)
    }

    /// Analytic Jacobian if present, else central differences.
    pub fn jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        if let Some(j) = &self.jac {
            return Ok(j(x));
        }
        self.fd_jacobian(x)
    }

    fn fd_jacobian(&self, x: &Point) -> Result<DMatrix<f64>> {
        let n = x.len();
        let mut m = DMatrix::zeros(self.n, n);
        for i in 0..n {
            let (xp, xm, span) = perturbed(x, i, fd_step(self.layers, x[i]))?;
            let d = (self.eval(&xp) - self.eval(&xm)) / span;
            m.set_column(i, &d);
        }
        Ok(m)
    }

    fn jacobian_layers(&self) -> usize {
        if self.jac.is_some() {
            self.layers
        } else {
            self.layers + 1
        }
    }
}

#[derive(Clone)]
pub struct ScalarField {
    pub n: usize,
    eval: RealFn,
    grad: Option<VecFn>,
    layers: usize,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("n", &self.n)
            .field("analytic_gradient", &self.grad.is_some())
            .field("layers", &self.layers)
            .finish()
    }
}

impl ScalarField {
    pub fn new(n: usize, eval: impl Fn(&Point) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            n,
            eval: Arc::new(eval),
            grad: None,
            layers: 0,
        }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&Point) -> Point + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn numeric(&self) -> Self {
        Self {
            grad: None,
            ..self.clone()
        }
    }

    pub fn eval(&self, x: &Point) -> f64 {
        (self.eval)(x)
    }

    pub fn gradient(&self, x: &Point) -> Result<Point> {
        if let Some(g) = &self.grad {
            return Ok(g(x));
        }
        let n = x.len();
        let mut g = DVector::zeros(n);
        for i in 0..n {
            let (xp, xm, span) = perturbed(x, i, fd_step(self.layers, x[i]))?;
            g[i] = (self.eval(&xp) - self.eval(&xm)) / span;
        }
        Ok(g)
    }

    fn gradient_layers(&self) -> usize {
        if self.grad.is_some() {
            self.layers
        } else {
            self.layers + 1
        }
    }

    /// `x ↦ ∇φ(x)·ξ(x)` as a new field.
    pub fn along(&self, xi: &VectorField) -> ScalarField {
        let phi = self.clone();
        let xi2 = xi.clone();
        let layers = self.gradient_layers().max(xi.layers);
        ScalarField {
            n: self.n,
            eval: Arc::new(move |x| match phi.gradient(x) {
                Ok(g) => g.dot(&xi2.eval(x)),
                Err(_) => f64::NAN,
            }),
            grad: None,
            layers,
        }
    }
}

/// `L_ξ^k φ(x)`.
pub fn lie_derivative(phi: &ScalarField, xi: &VectorField, x: &Point, k: usize) -> Result<f64> {
    if phi.n != xi.n || x.len() != xi.n {
        return Err(SteerError::domain("dimension mismatch in Lie derivative"));
    }
    if k > xi.n + 1 {
        return Err(SteerError::domain(format!(
            "order {k} exceeds the smoothness budget n + 1 = {}",
            xi.n + 1
        )));
    }
    let mut f = phi.clone();
    for _ in 0..k {
        f = f.along(xi);
    }
    let v = f.eval(x);
    if !v.is_finite() {
        return Err(SteerError::numerical("Lie derivative is not finite"));
    }
    Ok(v)
}

/// `L_ξ^k φ` as a field, for repeated evaluation.
pub fn lie_derivative_field(phi: &ScalarField, xi: &VectorField, k: usize) -> ScalarField {
    let mut f = phi.clone();
    for _ in 0..k {
        f = f.along(xi);
    }
    f
}

/// `[ξ, η](x) = (∇η)ξ − (∇ξ)η`.
pub fn lie_bracket(xi: &VectorField, eta: &VectorField, x: &Point) -> Result<Point> {
    if xi.n != eta.n || x.len() != xi.n {
        return Err(SteerError::domain("dimension mismatch in Lie bracket"));
    }
    Ok(eta.jacobian(x)? * xi.eval(x) - xi.jacobian(x)? * eta.eval(x))
}

/// `[ξ, η]` as a field.
pub fn bracket_field(xi: &VectorField, eta: &VectorField) -> Result<VectorField> {
    if xi.n != eta.n {
        return Err(SteerError::domain("dimension mismatch in Lie bracket"));
    }
    let (a, b) = (xi.clone(), eta.clone());
    let n = xi.n;
    let layers = xi.jacobian_layers().max(eta.jacobian_layers());
    Ok(VectorField {
        n,
        eval: Arc::new(move |x| {
            lie_bracket(&a, &b, x).unwrap_or_else(|_| DVector::from_element(n, f64::NAN))
        }),
        jac: None,
        layers,
    })
}

/// `ad_ξ^k η` as a field.
pub fn ad_field(xi: &VectorField, eta: &VectorField, k: usize) -> Result<VectorField> {
    let mut f = eta.clone();
    for _ in 0..k {
        f = bracket_field(xi, &f)?;
    }
    Ok(f)
}

pub fn ad_power(xi: &VectorField, eta: &VectorField, k: usize, x: &Point) -> Result<Point> {
    if xi.n != eta.n || x.len() != xi.n {
        return Err(SteerError::domain("dimension mismatch in ad operator"));
    }
    let v = ad_field(xi, eta, k)?.eval(x);
    if v.iter().any(|c| !c.is_finite()) {
        return Err(SteerError::numerical("ad operator is not finite"));
    }
    Ok(v)
}

#[derive(Clone)]
pub struct ControlAffineSystem {
    pub n: usize,
    pub f: VectorField,
    pub g: VectorField,
    domain: PredFn,
}

impl fmt::Debug for ControlAffineSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("n", &self.n)
            .field("f", &self.f)
            .field("g", &self.g)
            .finish()
    }
}

impl ControlAffineSystem {
    pub fn new(f: VectorField, g: VectorField) -> Result<Self> {
        if f.n != g.n {
            return Err(SteerError::domain("f and g must share a dimension"));
        }
        Ok(Self {
            n: f.n,
            f,
            g,
            domain: Arc::new(|_| true),
        })
    }

    pub fn with_domain(mut self, pred: impl Fn(&Point) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Arc::new(pred);
        self
    }

    pub fn in_domain(&self, x: &Point) -> bool {
        x.iter().all(|c| c.is_finite()) && (self.domain)(x)
    }

    pub fn rhs(&self, x: &Point, u: f64) -> Point {
        self.f.eval(x) + self.g.eval(x) * u
    }

    /// The system with all analytic Jacobians dropped.
    pub fn numeric(&self) -> Self {
        Self {
            f: self.f.numeric(),
            g: self.g.numeric(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearizabilityReport {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub involutivity_residual: f64,
    pub worst_point: Option<Point>,
    pub pass: bool,
}

impl fmt::Display for LinearizabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: controllability rank {}, involutivity residual {:.3e}",
            if self.pass { "pass" } else { "fail" },
            self.rank,
            self.involutivity_residual
        )
    }
}

fn orthogonal_residual(basis: &DMatrix<f64>, v: &Point) -> f64 {
    // Least-squares projection onto the column span via SVD.
    let svd = basis.clone().svd(true, true);
    match svd.solve(v, 1e-12) {
        Ok(c) => (v - basis * c).norm(),
        Err(_) => v.norm(),
    }
}

/// Controllability rank at `xbar` and involutivity of
/// `span{g, ad_f g, …, ad_f^{n-2} g}` over `samples`.
pub fn check_linearizable(
    sys: &ControlAffineSystem,
    xbar: &Point,
    samples: &[Point],
    tol: f64,
) -> Result<LinearizabilityReport> {
    let n = sys.n;
    let fields: Vec<VectorField> = (0..n)
        .map(|k| ad_field(&sys.f, &sys.g, k))
        .collect::<Result<_>>()?;

    let mut c = DMatrix::zeros(n, n);
    for (j, fld) in fields.iter().enumerate() {
        c.set_column(j, &fld.eval(xbar));
    }
    let sv: Vec<f64> = c.singular_values().iter().copied().collect();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > 1e-8 * smax.max(1e-300)).count();

    let dist = &fields[..n - 1];
    let mut residual: f64 = 0.0;
    let mut worst = None;
    for x in samples {
        let mut basis = DMatrix::zeros(n, dist.len());
        for (j, fld) in dist.iter().enumerate() {
            basis.set_column(j, &fld.eval(x));
        }
        for i in 0..dist.len() {
            for j in i + 1..dist.len() {
                let br = lie_bracket(&dist[i], &dist[j], x)?;
                let scale = (basis.column(i).norm() * basis.column(j).norm()).max(1.0);
                let r = orthogonal_residual(&basis, &br) / scale;
                if !r.is_finite() || r > residual {
                    residual = if r.is_finite() { r } else { f64::INFINITY };
                    worst = Some(x.clone());
                }
            }
        }
    }
    Ok(LinearizabilityReport {
        rank,
        singular_values: sv,
        involutivity_residual: residual,
        worst_point: worst,
        pass: rank == n && residual <= tol,
    })
}

/// `(τ, α, β)` with `z = τ(x)` and `u = α(x) + β(x) v`.
#[derive(Clone)]
pub struct FeedbackLinearizingTuple {
    pub n: usize,
    pub lambda: ScalarField,
    tau: VecFn,
    jac_tau: MatFn,
    alpha: RealFn,
    beta: RealFn,
    domain: PredFn,
}

impl fmt::Debug for FeedbackLinearizingTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackLinearizingTuple")
            .field("n", &self.n)
            .finish()
    }
}

impl FeedbackLinearizingTuple {
    /// Tuple from closed-form maps.
    pub fn from_maps(
        n: usize,
        lambda: ScalarField,
        tau: impl Fn(&Point) -> Point + Send + Sync + 'static,
        jac_tau: impl Fn(&Point) -> DMatrix<f64> + Send + Sync + 'static,
        alpha: impl Fn(&Point) -> f64 + Send + Sync + 'static,
        beta: impl Fn(&Point) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            lambda,
            tau: Arc::new(tau),
            jac_tau: Arc::new(jac_tau),
            alpha: Arc::new(alpha),
            beta: Arc::new(beta),
            domain: Arc::new(|_| true),
        }
    }

    pub fn with_domain(mut self, pred: impl Fn(&Point) -> bool + Send + Sync + 'static) -> Self {
        self.domain = Arc::new(pred);
        self
    }

    pub fn tau(&self, x: &Point) -> Point {
        (self.tau)(x)
    }

    pub fn jacobian_tau(&self, x: &Point) -> DMatrix<f64> {
        (self.jac_tau)(x)
    }

    pub fn alpha(&self, x: &Point) -> f64 {
        (self.alpha)(x)
    }

    pub fn beta(&self, x: &Point) -> f64 {
        (self.beta)(x)
    }

    pub fn in_domain(&self, x: &Point) -> bool {
        x.iter().all(|c| c.is_finite()) && (self.domain)(x)
    }

    pub fn det_jacobian(&self, x: &Point) -> f64 {
        self.jacobian_tau(x).determinant()
    }
}

/// Builds `τ = (λ, L_f λ, …, L_f^{n-1} λ)`, `α = −L_f^n λ / L_g L_f^{n-1} λ`,
/// `β = 1 / L_g L_f^{n-1} λ` after checking the relative-degree conditions
/// at every sample.
pub fn build_tuple(
    sys: &ControlAffineSystem,
    lambda: &ScalarField,
    samples: &[Point],
    tol: f64,
) -> Result<FeedbackLinearizingTuple> {
    let n = sys.n;
    if lambda.n != n {
        return Err(SteerError::domain("λ dimension differs from the system"));
    }
    let lf: Vec<ScalarField> = (0..=n)
        .map(|k| lie_derivative_field(lambda, &sys.f, k))
        .collect();
    let lglf: Vec<ScalarField> = lf[..n].iter().map(|l| l.along(&sys.g)).collect();

    for x in samples {
        if !sys.in_domain(x) {
            return Err(SteerError::domain(format!(
                "sample {:?} outside the system domain",
                x.as_slice()
            )));
        }
        for (k, l) in lglf.iter().enumerate().take(n - 1) {
            let v = l.eval(x);
            if !(v.abs() <= tol) {
                return Err(SteerError::domain(format!(
                    "relative degree condition L_g L_f^{k} λ = 0 fails at {:?} (value {v:.3e})",
                    x.as_slice()
                )));
            }
        }
        let v = lglf[n - 1].eval(x);
        if !(v.abs() > tol) {
            return Err(SteerError::domain(format!(
                "relative degree condition L_g L_f^{} λ ≠ 0 fails at {:?} (value {v:.3e})",
                n - 1,
                x.as_slice()
            )));
        }
    }

    let tau_parts = lf[..n].to_vec();
    let tau: VecFn =
        Arc::new(move |x| DVector::from_iterator(n, tau_parts.iter().map(|l| l.eval(x))));
    let tau_field = VectorField {
        n,
        eval: tau.clone(),
        jac: None,
        layers: lf[n - 1].layers,
    };
    let lfn = lf[n].clone();
    let den = lglf[n - 1].clone();
    let den2 = den.clone();
    let sys_domain = sys.domain.clone();
    Ok(FeedbackLinearizingTuple {
        n,
        lambda: lambda.clone(),
        tau,
        jac_tau: Arc::new(move |x| {
            tau_field
                .fd_jacobian(x)
                .unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN))
        }),
        alpha: Arc::new(move |x| -lfn.eval(x) / den.eval(x)),
        beta: Arc::new(move |x| 1.0 / den2.eval(x)),
        domain: sys_domain,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 50,
        }
    }
}

const MAX_HALVINGS: usize = 30;

/// Damped Newton for `τ(x) = z`, keeping iterates inside the tuple's domain.
pub fn tau_inverse(
    tuple: &FeedbackLinearizingTuple,
    z: &Point,
    guess: &Point,
    opts: NewtonOptions,
) -> Result<Point> {
    let out = newton_tau(tuple, z, guess, opts)?;
    if out.residual <= opts.tol {
        return Ok(out.x);
    }
    Err(SteerError::numerical(format!(
        "τ⁻¹ Newton failed for z = {:?} (residual {:.3e}); trace {:?}",
        z.as_slice(),
        out.residual,
        out.trace
    )))
}

/// Final state of a Newton run for `τ(x) = z`.
#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub x: Point,
    pub residual: f64,
    pub trace: Vec<f64>,
}

/// Newton iterations without the convergence verdict; `x` is the last
/// accepted iterate.
pub fn newton_tau(
    tuple: &FeedbackLinearizingTuple,
    z: &Point,
    guess: &Point,
    opts: NewtonOptions,
) -> Result<NewtonOutcome> {
    let mut x = guess.clone();
    if !tuple.in_domain(&x) {
        return Err(SteerError::domain(format!(
            "Newton guess {:?} outside the domain",
            x.as_slice()
        )));
    }
    let mut r = tuple.tau(&x) - z;
    let mut trace = Vec::new();
    for _ in 0..opts.max_iter {
        let rn = r.amax();
        trace.push(rn);
        if rn <= opts.tol {
            break;
        }
        let j = tuple.jacobian_tau(&x);
        let Some(step) = j.lu().solve(&r) else {
            return Err(SteerError::numerical(format!(
                "singular Jacobian of τ at {:?}; residual trace {trace:?}",
                x.as_slice()
            )));
        };
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &x - &step * lam;
            if tuple.in_domain(&cand) {
                let rc = tuple.tau(&cand) - z;
                if rc.amax() < rn {
                    x = cand;
                    r = rc;
                    accepted = true;
                    break;
                }
            }
            lam *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(NewtonOutcome {
        residual: r.amax(),
        x,
        trace,
    })
}

/// `u = α(x) + β(x) v(τ(x), t)`.
pub fn recover_control(
    tuple: &FeedbackLinearizingTuple,
    v: &dyn Fn(&Point, f64) -> f64,
    x: &Point,
    t: f64,
) -> f64 {
    tuple.alpha(x) + tuple.beta(x) * v(&tuple.tau(x), t)
}

fn rk4<F: Fn(f64, &Point) -> Point>(f: F, x0: &Point, steps: usize) -> Vec<Point> {
    let h = 1.0 / steps as f64;
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    out.push(x.clone());
    for k in 0..steps {
        let t = k as f64 * h;
        let k1 = f(t, &x);
        let k2 = f(t + 0.5 * h, &(&x + &k1 * (0.5 * h)));
        let k3 = f(t + 0.5 * h, &(&x + &k2 * (0.5 * h)));
        let k4 = f(t + h, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out.push(x.clone());
    }
    out
}

/// RK4 states of `ẋ = f + g(α + βv(t))` on a uniform grid of `[0, 1]`.
pub fn closed_loop_trajectory(
    sys: &ControlAffineSystem,
    tuple: &FeedbackLinearizingTuple,
    v: &dyn Fn(f64) -> f64,
    x0: &Point,
    steps: usize,
) -> Vec<Point> {
    rk4(
        |t, x| sys.rhs(x, tuple.alpha(x) + tuple.beta(x) * v(t)),
        x0,
        steps,
    )
}

/// RK4 states of `ż = Az + bv(t)`.
pub fn brunovsky_trajectory(
    n: usize,
    v: &dyn Fn(f64) -> f64,
    z0: &Point,
    steps: usize,
) -> Result<Vec<Point>> {
    let pair = BrunovskyPair::new(n)?;
    Ok(rk4(|t, z| &pair.a * z + &pair.b * v(t), z0, steps))
}
