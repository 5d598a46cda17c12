//! Schrödinger bridge with the Brunovsky prior.
//!
//! The bridge system is solved between the hatted marginals with the Brownian
//! kernel, where it is an entropic transport problem for the quadratic cost.
//! Factors are kept as logarithms: at small ε they span thousands of nats.
//!
//! The fixed point stores log offsets `(f, g)` and iterates scaled factors
//! `(u, v)` near one against `K̃ᵢⱼ = exp(log kᵢⱼ + fᵢ + gⱼ)`, folding the
//! scalings back into the offsets when they drift.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::brunovsky::{
    gramian_offset, interp_matrices, spd_solve, stm_offset, LinearPrior, MAX_DIM,
};
use crate::density::WeightedCloud;
use crate::error::{Result, SteerError};
use crate::lie::Point;
use crate::par::Exec;

/// Factor values below this are treated as zero.
pub const NUMERIC_FLOOR: f64 = 1e-300;
const ABSORB_AT: f64 = 50.0;
const BLOCK_ROWS: usize = 256;

fn check_times(s: f64, t: f64, eps: f64) -> Result<()> {
    if !(t > s) {
        return Err(SteerError::domain(format!(
            "kernel needs t > s, got s = {s}, t = {t}"
        )));
    }
    if !(eps > 0.0) {
        return Err(SteerError::domain(format!("ε must be positive, got {eps}")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(4π(t−s)ε)^{−n/2} exp(−‖z̄−z‖²/(4ε(t−s)))`.
pub fn brownian_kernel(s: f64, zbar: &[f64], t: f64, z: &[f64], eps: f64) -> Result<f64> {
    check_times(s, t, eps)?;
    if zbar.len() != z.len() {
        return Err(SteerError::domain("kernel arguments differ in dimension"));
    }
    let n = z.len() as f64;
    let dt = t - s;
    Ok((4.0 * PI * dt * eps).powf(-n / 2.0) * (-sq_dist(zbar, z) / (4.0 * eps * dt)).exp())
}

/// Transition density of `dz = Az dt + b√(2ε) dw` from `(s, z̄)` to `(t, z)`.
#[derive(Clone, Debug)]
pub struct PriorKernel {
    pub n: usize,
    pub eps: f64,
    pub s: f64,
    pub t: f64,
    /// Row-major `Φ(t,s)` and `M(t,s)⁻¹`.
    phi: Vec<f64>,
    m_inv: Vec<f64>,
    log_norm: f64,
}

impl PriorKernel {
    pub fn new(n: usize, s: f64, t: f64, eps: f64) -> Result<Self> {
        check_times(s, t, eps)?;
        if n == 0 || n > MAX_DIM {
            return Err(SteerError::domain(format!(
                "dimension {n} outside 1..={MAX_DIM}"
            )));
        }
        let m = gramian_offset(n, t - s);
        let det = m.determinant();
        if !(det > 0.0) {
            return Err(SteerError::numerical(format!(
                "Gramian over [{s}, {t}] is numerically singular"
            )));
        }
        let m_inv = spd_solve(&m, &DMatrix::identity(n, n))?;
        let log_norm = -0.5 * n as f64 * (4.0 * PI * eps).ln() - 0.5 * det.ln();
        let flat = |a: &DMatrix<f64>| (0..n * n).map(|k| a[(k / n, k % n)]).collect();
        Ok(Self {
            n,
            eps,
            s,
            t,
            phi: flat(&stm_offset(n, t - s)),
            m_inv: flat(&m_inv),
            log_norm,
        })
    }

    pub fn log_value(&self, zbar: &[f64], z: &[f64]) -> f64 {
        let n = self.n;
        let mut r = [0.0; MAX_DIM];
        for i in 0..n {
            let row = &self.phi[i * n..(i + 1) * n];
            r[i] = z[i] - row.iter().zip(zbar).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut q = 0.0;
        for i in 0..n {
            let row = &self.m_inv[i * n..(i + 1) * n];
            q += r[i] * row.iter().zip(&r[..n]).map(|(a, b)| a * b).sum::<f64>();
        }
        self.log_norm - q / (4.0 * self.eps)
    }

    pub fn value(&self, zbar: &[f64], z: &[f64]) -> f64 {
        self.log_value(zbar, z).exp()
    }
}

/// Linear-prior kernel; equals the Brownian kernel after warping by the
/// normalized Gramian `M(t,s)/(t−s)` and integrates to one in `z`.
pub fn prior_kernel(s: f64, zbar: &[f64], t: f64, z: &[f64], eps: f64) -> Result<f64> {
    if zbar.len() != z.len() {
        return Err(SteerError::domain("kernel arguments differ in dimension"));
    }
    Ok(PriorKernel::new(z.len(), s, t, eps)?.value(zbar, z))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum KernelKind {
    Brownian {
        eps: f64,
        s: f64,
        t: f64,
    },
    Prior {
        eps: f64,
        s: f64,
        t: f64,
    },
    /// `exp(−‖ẑ₀−ẑ₁‖²/(2η))`, the entropic kernel of quadratic-cost transport.
    Quadratic {
        eta: f64,
    },
}

/// Dense kernel between two weighted point sets, stored as logarithms so that
/// entries stay representable at small ε. Source and target quadrature
/// weights are applied inside the products.
#[derive(Clone, Debug)]
pub struct KernelOperator {
    pub dim: usize,
    pub kind: KernelKind,
    pub src: Vec<f64>,
    pub src_weights: Vec<f64>,
    pub tgt: Vec<f64>,
    pub tgt_weights: Vec<f64>,
    /// Row-major `|src| × |tgt|`.
    pub log_values: Vec<f64>,
}

impl KernelOperator {
    fn build(
        src: &WeightedCloud,
        tgt: &WeightedCloud,
        kind: KernelKind,
        exec: Exec,
        log_k: impl Fn(&[f64], &[f64]) -> f64 + Sync + Send,
    ) -> Result<Self> {
        if src.dim != tgt.dim {
            return Err(SteerError::domain("kernel point sets differ in dimension"));
        }
        let (ns, nt) = (src.len(), tgt.len());
        let mut log_values = vec![0.0; ns * nt];
        exec.for_rows(&mut log_values, nt, |i, row| {
            let a = src.point(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r = log_k(a, tgt.point(j));
            }
        });
        if log_values.iter().any(|v| !v.is_finite()) {
            return Err(SteerError::numerical(
                "kernel entry is not strictly positive",
            ));
        }
        Ok(Self {
            dim: src.dim,
            kind,
            src: src.coords.clone(),
            src_weights: src.weights.clone(),
            tgt: tgt.coords.clone(),
            tgt_weights: tgt.weights.clone(),
            log_values,
        })
    }

    pub fn brownian(
        src: &WeightedCloud,
        tgt: &WeightedCloud,
        eps: f64,
        s: f64,
        t: f64,
        exec: Exec,
    ) -> Result<Self> {
        check_times(s, t, eps)?;
        let dt = t - s;
        let ln = -0.5 * src.dim as f64 * (4.0 * PI * dt * eps).ln();
        Self::build(
            src,
            tgt,
            KernelKind::Brownian { eps, s, t },
            exec,
            |a, b| ln - sq_dist(a, b) / (4.0 * eps * dt),
        )
    }

    pub fn prior(
        src: &WeightedCloud,
        tgt: &WeightedCloud,
        eps: f64,
        s: f64,
        t: f64,
        exec: Exec,
    ) -> Result<Self> {
        let k = PriorKernel::new(src.dim, s, t, eps)?;
        Self::build(src, tgt, KernelKind::Prior { eps, s, t }, exec, |a, b| {
            k.log_value(a, b)
        })
    }

    pub fn quadratic(
        src: &WeightedCloud,
        tgt: &WeightedCloud,
        eta: f64,
        exec: Exec,
    ) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(SteerError::domain(format!("η must be positive, got {eta}")));
        }
        Self::build(src, tgt, KernelKind::Quadratic { eta }, exec, |a, b| {
            -sq_dist(a, b) / (2.0 * eta)
        })
    }

    /// Same point sets with the regularization parameter replaced. Brownian
    /// and quadratic kernels only.
    pub fn rescaled(&self, reg: f64, exec: Exec) -> Result<Self> {
        let mut out = self.clone();
        match self.kind {
            KernelKind::Brownian { eps, s, t } => {
                check_times(s, t, reg)?;
                let half_n = 0.5 * self.dim as f64;
                let l_old = -half_n * (4.0 * PI * (t - s) * eps).ln();
                let l_new = -half_n * (4.0 * PI * (t - s) * reg).ln();
                let r = eps / reg;
                exec.fill(&mut out.log_values, |k| {
                    (self.log_values[k] - l_old) * r + l_new
                });
                out.kind = KernelKind::Brownian { eps: reg, s, t };
            }
            KernelKind::Quadratic { eta } => {
                if !(reg > 0.0) {
                    return Err(SteerError::domain("η must be positive"));
                }
                let r = eta / reg;
                exec.fill(&mut out.log_values, |k| self.log_values[k] * r);
                out.kind = KernelKind::Quadratic { eta: reg };
            }
            KernelKind::Prior { .. } => {
                return Err(SteerError::domain(
                    "prior kernels are rebuilt, not rescaled",
                ));
            }
        }
        Ok(out)
    }

    /// Regularization parameter (ε or η).
    pub fn regularization(&self) -> f64 {
        match self.kind {
            KernelKind::Brownian { eps, .. } | KernelKind::Prior { eps, .. } => eps,
            KernelKind::Quadratic { eta } => eta,
        }
    }

    pub fn n_src(&self) -> usize {
        self.src_weights.len()
    }

    pub fn n_tgt(&self) -> usize {
        self.tgt_weights.len()
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.log_values[i * self.n_tgt() + j].exp()
    }

    /// `(K h)ᵢ = Σⱼ k(ẑᵢ, ẑⱼ) h(ẑⱼ) wⱼ`.
    pub fn apply(&self, h: &[f64], exec: Exec) -> Vec<f64> {
        let nt = self.n_tgt();
        exec.map(self.n_src(), |i| {
            let row = &self.log_values[i * nt..(i + 1) * nt];
            row.iter()
                .zip(h)
                .zip(&self.tgt_weights)
                .map(|((l, h), w)| l.exp() * h * w)
                .sum()
        })
    }

    /// `(Kᵀ h)ⱼ = Σᵢ k(ẑᵢ, ẑⱼ) h(ẑᵢ) wᵢ`.
    pub fn apply_t(&self, h: &[f64], exec: Exec) -> Vec<f64> {
        let nt = self.n_tgt();
        let x: Vec<f64> = h
            .iter()
            .zip(&self.src_weights)
            .map(|(a, b)| a * b)
            .collect();
        transpose_product(
            exec,
            self.n_src(),
            nt,
            |i, j| self.log_values[i * nt + j].exp(),
            &x,
        )
    }

    /// `log (K e^{φ})` by log-sum-exp.
    pub fn log_apply(&self, log_h: &[f64], exec: Exec) -> Vec<f64> {
        let nt = self.n_tgt();
        let lw: Vec<f64> = self
            .tgt_weights
            .iter()
            .zip(log_h)
            .map(|(w, l)| w.ln() + l)
            .collect();
        exec.map(self.n_src(), |i| {
            log_sum_exp(
                self.log_values[i * nt..(i + 1) * nt]
                    .iter()
                    .zip(&lw)
                    .map(|(a, b)| a + b),
            )
        })
    }

    /// `log (Kᵀ e^{φ})` by log-sum-exp.
    pub fn log_apply_t(&self, log_h: &[f64], exec: Exec) -> Vec<f64> {
        let (ns, nt) = (self.n_src(), self.n_tgt());
        let lw: Vec<f64> = self
            .src_weights
            .iter()
            .zip(log_h)
            .map(|(w, l)| w.ln() + l)
            .collect();
        // Column maxima first, then a stabilized transpose product.
        let mut cmax = vec![f64::NEG_INFINITY; nt];
        for i in 0..ns {
            if lw[i] == f64::NEG_INFINITY {
                continue;
            }
            let row = &self.log_values[i * nt..(i + 1) * nt];
            for (c, l) in cmax.iter_mut().zip(row) {
                *c = c.max(l + lw[i]);
            }
        }
        let ones = vec![1.0; ns];
        let sums = transpose_product(
            exec,
            ns,
            nt,
            |i, j| {
                if cmax[j] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (self.log_values[i * nt + j] + lw[i] - cmax[j]).exp()
                }
            },
            &ones,
        );
        sums.iter()
            .zip(&cmax)
            .map(|(s, c)| {
                if *s > 0.0 {
                    c + s.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }
}

pub fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `yⱼ = Σᵢ a(i,j) xᵢ`, blocked over rows with a fixed block size so that the
/// summation order does not depend on the thread count.
fn transpose_product(
    exec: Exec,
    rows: usize,
    cols: usize,
    a: impl Fn(usize, usize) -> f64 + Sync + Send,
    x: &[f64],
) -> Vec<f64> {
    let blocks = rows.div_ceil(BLOCK_ROWS);
    let partials: Vec<Vec<f64>> = exec.map(blocks, |b| {
        let mut acc = vec![0.0; cols];
        let mut row = vec![0.0; cols];
        for i in b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(rows) {
            if x[i] == 0.0 {
                continue;
            }
            for (j, r) in row.iter_mut().enumerate() {
                *r = a(i, j);
            }
            axpy(&mut acc, x[i], &row);
        }
        acc
    });
    sum_partials(partials, cols)
}

/// Blocked `Σᵢ xᵢ m[i, :]` over a dense row-major matrix.
fn transpose_dense(exec: Exec, m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let blocks = rows.div_ceil(BLOCK_ROWS);
    let partials: Vec<Vec<f64>> = exec.map(blocks, |b| {
        let mut acc = vec![0.0; cols];
        for i in b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(rows) {
            if x[i] != 0.0 {
                axpy(&mut acc, x[i], &m[i * cols..(i + 1) * cols]);
            }
        }
        acc
    });
    sum_partials(partials, cols)
}

fn sum_partials(partials: Vec<Vec<f64>>, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// Dot product with eight interleaved accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Dense `K̃ = exp(log k + f ⊕ g)` with products against weighted vectors.
struct ScaledKernel<'a> {
    op: &'a KernelOperator,
    values: Vec<f64>,
}

impl<'a> ScaledKernel<'a> {
    fn new(op: &'a KernelOperator, f: &[f64], g: &[f64], exec: Exec) -> Self {
        let nt = op.n_tgt();
        let mut values = vec![0.0; op.log_values.len()];
        exec.for_rows(&mut values, nt, |i, row| {
            let lrow = &op.log_values[i * nt..(i + 1) * nt];
            for ((r, l), gj) in row.iter_mut().zip(lrow).zip(g) {
                *r = (l + f[i] + gj).exp();
            }
        });
        Self { op, values }
    }

    /// `Σⱼ K̃ᵢⱼ wⱼ vⱼ`.
    fn row_product(&self, v: &[f64], exec: Exec) -> Vec<f64> {
        let nt = self.op.n_tgt();
        let x: Vec<f64> = v
            .iter()
            .zip(&self.op.tgt_weights)
            .map(|(a, b)| a * b)
            .collect();
        exec.map(self.op.n_src(), |i| {
            dot(&self.values[i * nt..(i + 1) * nt], &x)
        })
    }

    /// `Σᵢ K̃ᵢⱼ wᵢ uᵢ`.
    fn col_product(&self, u: &[f64], exec: Exec) -> Vec<f64> {
        let nt = self.op.n_tgt();
        let x: Vec<f64> = u
            .iter()
            .zip(&self.op.src_weights)
            .map(|(a, b)| a * b)
            .collect();
        transpose_dense(exec, &self.values, self.op.n_src(), nt, &x)
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointOptions {
    /// Stop when both residuals fall to this level.
    pub tol: f64,
    /// Iteration budget summed over all continuation stages.
    pub max_iter: usize,
    /// Constant initial value of `ĥ₁`.
    pub init_h1: f64,
    /// Over-relaxation exponent ω ∈ [1, 2); ω = 1 is the plain alternating update.
    pub relaxation: f64,
    /// Residual below which relaxation engages.
    pub relax_below: f64,
    /// Regularization multipliers of warm-start stages, largest first; each
    /// stage multiplies the previous log potentials by the parameter ratio.
    pub continuation: Vec<f64>,
    /// Residual target of the warm-start stages.
    pub stage_tol: f64,
    /// Marginal nodes below this fraction of the maximum are excluded.
    pub support_floor: f64,
    pub exec: Exec,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 5000,
            init_h1: 1.0,
            relaxation: 1.8,
            relax_below: 0.1,
            continuation: vec![16.0, 4.0],
            stage_tol: 1e-4,
            support_floor: crate::density::SUPPORT_FLOOR,
            exec: Exec::default(),
        }
    }
}

impl FixedPointOptions {
    /// The unaccelerated alternating scheme from a cold start.
    pub fn plain() -> Self {
        Self {
            relaxation: 1.0,
            continuation: vec![],
            ..Self::default()
        }
    }
}

/// Converged factors on the source and target nodes of the kernel.
#[derive(Clone, Debug, Serialize)]
pub struct BridgeFactors {
    /// `log ĥ₀` on source nodes; `-inf` off the support.
    pub log_h0: Vec<f64>,
    /// `log h₁` on target nodes; `-inf` off the support.
    pub log_h1: Vec<f64>,
    /// Iterations summed over all stages.
    pub iterations: usize,
    pub final_stage_iterations: usize,
    /// Per-iteration `(residual_h0, residual_h1)`.
    pub history: Vec<(f64, f64)>,
    /// Final `(‖ĥ₀∘(K h₁) − σ̂₀‖_∞, ‖h₁∘(Kᵀĥ₀) − σ̂₁‖_∞)`.
    pub residuals: (f64, f64),
}

fn support_mask(m: &[f64], floor: f64) -> Result<Vec<bool>> {
    if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SteerError::numerical(
            "marginal has negative or non-finite values",
        ));
    }
    let cut = floor * m.iter().copied().fold(0.0, f64::max);
    let mask: Vec<bool> = m.iter().map(|&v| v > cut && v > 0.0).collect();
    if !mask.iter().any(|&b| b) {
        return Err(SteerError::numerical("marginal has empty support"));
    }
    Ok(mask)
}

fn masked_log(m: &[f64], mask: &[bool]) -> Vec<f64> {
    m.iter()
        .zip(mask)
        .map(|(v, &k)| if k { v.ln() } else { f64::NEG_INFINITY })
        .collect()
}

/// Solves `ĥ₀ ∘ (K h₁) = σ̂₀`, `h₁ ∘ (Kᵀ ĥ₀) = σ̂₁` by alternating updates
/// `h₁ ← σ̂₁ ⊘ ĥ₁`, `ĥ₀ ← σ̂₀ ⊘ (K h₁)`, `ĥ₁ ← Kᵀ ĥ₀` from `ĥ₁ ≡ init_h1`.
pub fn fixed_point(
    k: &KernelOperator,
    sigma0: &[f64],
    sigma1: &[f64],
    opts: &FixedPointOptions,
) -> Result<BridgeFactors> {
    if sigma0.len() != k.n_src() || sigma1.len() != k.n_tgt() {
        return Err(SteerError::domain(
            "marginals do not match the kernel nodes",
        ));
    }
    if !(opts.init_h1 > 0.0) {
        return Err(SteerError::domain("initial ĥ₁ must be positive"));
    }
    if !(1.0..2.0).contains(&opts.relaxation) {
        return Err(SteerError::domain("relaxation must lie in [1, 2)"));
    }
    let exec = opts.exec;
    let m0 = support_mask(sigma0, opts.support_floor)?;
    let m1 = support_mask(sigma1, opts.support_floor)?;
    let la = masked_log(sigma0, &m0);
    let lb = masked_log(sigma1, &m1);

    let reg = k.regularization();
    let mut stages: Vec<f64> = opts
        .continuation
        .iter()
        .map(|c| c * reg)
        .filter(|&r| r > reg)
        .collect();
    stages.push(reg);

    // Cold start: h₁ = σ̂₁ / ĥ₁ with ĥ₁ constant, then ĥ₀ = σ̂₀ ⊘ (K h₁).
    let mut g: Vec<f64> = lb.iter().map(|l| l - opts.init_h1.ln()).collect();
    let mut f: Vec<f64> = Vec::new();
    let mut history = Vec::new();
    let mut total = 0;
    let mut last_stage = 0;
    let mut prev_reg = stages[0];
    for (si, &r) in stages.iter().enumerate() {
        let op_owned;
        let op = if r == reg {
            k
        } else {
            op_owned = k.rescaled(r, exec)?;
            &op_owned
        };
        if si > 0 {
            let ratio = prev_reg / r;
            f.iter_mut().for_each(|x| *x *= ratio);
            g = log_divide(&lb, &op.log_apply_t(&f, exec));
        }
        prev_reg = r;
        f = log_divide(&la, &op.log_apply(&g, exec));
        let last = si + 1 == stages.len();
        let tol = if last {
            opts.tol
        } else {
            opts.stage_tol.max(opts.tol)
        };
        let budget = opts.max_iter.saturating_sub(total);
        let out = sweep(
            op,
            sigma0,
            sigma1,
            &m0,
            &m1,
            &mut f,
            &mut g,
            tol,
            budget,
            opts,
            &mut history,
        )?;
        total += out;
        last_stage = out;
        if history
            .last()
            .is_some_and(|&(a, b): &(f64, f64)| a.max(b) > tol)
        {
            let res = history.last().map_or(f64::INFINITY, |&(a, b)| a.max(b));
            return Err(SteerError::Convergence {
                iterations: total,
                residual: res,
                history,
            });
        }
    }

    // Pin the gauge: equal mean log factor over the two supports.
    let mean = |v: &[f64]| {
        let fin: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        fin.iter().sum::<f64>() / fin.len() as f64
    };
    let shift = 0.5 * (mean(&g) - mean(&f));
    f.iter_mut().for_each(|x| *x += shift);
    g.iter_mut().for_each(|x| *x -= shift);

    let residuals = residuals_log(k, sigma0, sigma1, &f, &g, exec);
    Ok(BridgeFactors {
        log_h0: f,
        log_h1: g,
        iterations: total,
        final_stage_iterations: last_stage,
        history,
        residuals,
    })
}

fn log_divide(num: &[f64], den: &[f64]) -> Vec<f64> {
    num.iter()
        .zip(den)
        .map(|(a, b)| {
            if *a == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                a - b
            }
        })
        .collect()
}

/// Marginal-equation residuals recomputed from scratch in the log domain.
fn residuals_log(
    k: &KernelOperator,
    s0: &[f64],
    s1: &[f64],
    f: &[f64],
    g: &[f64],
    exec: Exec,
) -> (f64, f64) {
    let kg = k.log_apply(g, exec);
    let kf = k.log_apply_t(f, exec);
    let r0 = f
        .iter()
        .zip(&kg)
        .zip(s0)
        .map(|((a, b), s)| ((a + b).exp() - s).abs())
        .fold(0.0, f64::max);
    let r1 = g
        .iter()
        .zip(&kf)
        .zip(s1)
        .map(|((a, b), s)| ((a + b).exp() - s).abs())
        .fold(0.0, f64::max);
    (r0, r1)
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    op: &KernelOperator,
    a: &[f64],
    b: &[f64],
    m0: &[bool],
    m1: &[bool],
    f: &mut [f64],
    g: &mut [f64],
    tol: f64,
    budget: usize,
    opts: &FixedPointOptions,
    history: &mut Vec<(f64, f64)>,
) -> Result<usize> {
    let exec = opts.exec;
    let (ns, nt) = (op.n_src(), op.n_tgt());
    let mut kt = ScaledKernel::new(op, f, g, exec);
    let mut u = vec![1.0; ns];
    let mut v = vec![1.0; nt];
    let mut relax_ok = true;
    let mut prev = f64::INFINITY;
    let mut it = 0;
    while it < budget {
        it += 1;
        let w = if relax_ok && prev < opts.relax_below {
            opts.relaxation
        } else {
            1.0
        };

        // ĥ₁ ← Kᵀ ĥ₀, then h₁ ← σ̂₁ ⊘ ĥ₁.
        let t = kt.col_product(&u, exec);
        let mut r1: f64 = 0.0;
        for j in 0..nt {
            if !m1[j] {
                v[j] = 0.0;
                continue;
            }
            r1 = r1.max((v[j] * t[j] - b[j]).abs());
            let target = b[j] / t[j].max(NUMERIC_FLOOR);
            v[j] = if w == 1.0 {
                target
            } else {
                v[j].powf(1.0 - w) * target.powf(w)
            };
        }
        // ĥ₀ ← σ̂₀ ⊘ (K h₁).
        let s = kt.row_product(&v, exec);
        let mut r0: f64 = 0.0;
        for i in 0..ns {
            if !m0[i] {
                u[i] = 0.0;
                continue;
            }
            r0 = r0.max((u[i] * s[i] - a[i]).abs());
            let target = a[i] / s[i].max(NUMERIC_FLOOR);
            u[i] = if w == 1.0 {
                target
            } else {
                u[i].powf(1.0 - w) * target.powf(w)
            };
        }
        history.push((r0, r1));
        let res = r0.max(r1);
        if w > 1.0 && res > 2.0 * prev {
            log::debug!("fixed point: relaxation disabled at iteration {it}");
            relax_ok = false;
        }
        prev = res;

        let drift = u
            .iter()
            .chain(v.iter())
            .zip(m0.iter().chain(m1.iter()))
            .filter(|(_, &m)| m)
            .any(|(x, _)| !(x.is_finite() && *x > 0.0) || x.ln().abs() > ABSORB_AT);
        if drift {
            absorb(op, a, b, m0, m1, f, g, &u, &v, exec)?;
            kt = ScaledKernel::new(op, f, g, exec);
            u.iter_mut().for_each(|x| *x = 1.0);
            v.iter_mut().for_each(|x| *x = 1.0);
        }
        if res <= tol {
            break;
        }
    }
    for i in 0..ns {
        f[i] = if m0[i] {
            f[i] + u[i].ln()
        } else {
            f64::NEG_INFINITY
        };
    }
    for j in 0..nt {
        g[j] = if m1[j] {
            g[j] + v[j].ln()
        } else {
            f64::NEG_INFINITY
        };
    }
    Ok(it)
}

/// Moves the scalings into the log offsets. A scaling that left the
/// representable range is recomputed by a log-domain half step.
#[allow(clippy::too_many_arguments)]
fn absorb(
    op: &KernelOperator,
    a: &[f64],
    b: &[f64],
    m0: &[bool],
    m1: &[bool],
    f: &mut [f64],
    g: &mut [f64],
    u: &[f64],
    v: &[f64],
    exec: Exec,
) -> Result<()> {
    let bad_v = v
        .iter()
        .zip(m1)
        .any(|(x, &m)| m && !(x.is_finite() && *x > 0.0));
    for j in 0..g.len() {
        g[j] = if m1[j] {
            g[j] + v[j].ln()
        } else {
            f64::NEG_INFINITY
        };
    }
    if bad_v {
        // v overflowed: rebuild h₁ from the current ĥ₀ offsets.
        let lt = op.log_apply_t(f, exec);
        for j in 0..g.len() {
            g[j] = if m1[j] {
                b[j].ln() - lt[j]
            } else {
                f64::NEG_INFINITY
            };
        }
        let lt = op.log_apply(g, exec);
        for i in 0..f.len() {
            f[i] = if m0[i] {
                a[i].ln() - lt[i]
            } else {
                f64::NEG_INFINITY
            };
        }
    } else {
        let bad_u = u
            .iter()
            .zip(m0)
            .any(|(x, &m)| m && !(x.is_finite() && *x > 0.0));
        if bad_u {
            let lt = op.log_apply(g, exec);
            for i in 0..f.len() {
                f[i] = if m0[i] {
                    a[i].ln() - lt[i]
                } else {
                    f64::NEG_INFINITY
                };
            }
        } else {
            for i in 0..f.len() {
                f[i] = if m0[i] {
                    f[i] + u[i].ln()
                } else {
                    f64::NEG_INFINITY
                };
            }
        }
    }
    let bad = f
        .iter()
        .zip(m0)
        .chain(g.iter().zip(m1))
        .any(|(x, &m)| m && !x.is_finite());
    if bad {
        return Err(SteerError::numerical(
            "nonpositive factor on the support; raise the support floor or widen the grid",
        ));
    }
    Ok(())
}

impl BridgeFactors {
    /// Log masses `log πᵢⱼ` of the coupling `ĥ₀ᵢ kᵢⱼ h₁ⱼ wᵢ wⱼ`, for pairs
    /// above `rel_floor` times the largest mass.
    pub fn coupling(
        &self,
        k: &KernelOperator,
        rel_floor: f64,
        exec: Exec,
    ) -> Vec<(usize, usize, f64)> {
        let nt = k.n_tgt();
        let lw0: Vec<f64> = k
            .src_weights
            .iter()
            .zip(&self.log_h0)
            .map(|(w, f)| w.ln() + f)
            .collect();
        let lw1: Vec<f64> = k
            .tgt_weights
            .iter()
            .zip(&self.log_h1)
            .map(|(w, g)| w.ln() + g)
            .collect();
        let (lw0, lw1) = (&lw0, &lw1);
        let row = move |i: usize| {
            let base = lw0[i];
            k.log_values[i * nt..(i + 1) * nt]
                .iter()
                .zip(lw1)
                .map(move |(l, g)| l + g + base)
        };
        let max = exec.max(k.n_src(), |i| {
            if lw0[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                row(i).fold(f64::NEG_INFINITY, f64::max)
            }
        });
        let cut = max + rel_floor.ln();
        let rows: Vec<Vec<(usize, usize, f64)>> = exec.map(k.n_src(), |i| {
            if lw0[i] == f64::NEG_INFINITY {
                return vec![];
            }
            row(i)
                .enumerate()
                .filter(|(_, l)| *l >= cut)
                .map(|(j, l)| (i, j, l))
                .collect()
        });
        rows.concat()
    }
}

/// Factors relabeled onto the unhatted `z` points: `ĥ₀(z) = ĥ₀ᴮ(M₁₀^{−1/2}Φ₁₀ z)`
/// and `h₁(z) = det(M₁₀)^{−1/2} h₁ᴮ(M₁₀^{−1/2} z)`.
#[derive(Clone, Debug)]
pub struct RecoveredFactors {
    pub z0: WeightedCloud,
    pub z1: WeightedCloud,
    pub log_h0: Vec<f64>,
    pub log_h1: Vec<f64>,
}

/// Exact relabeling: the hatted nodes are the linear images of `z0`, `z1`.
pub fn recover_factors(
    factors: &BridgeFactors,
    prior: &LinearPrior,
    z0: &WeightedCloud,
    z1: &WeightedCloud,
) -> Result<RecoveredFactors> {
    if factors.log_h0.len() != z0.len() || factors.log_h1.len() != z1.len() {
        return Err(SteerError::domain("factors do not match the z point sets"));
    }
    let shift = -0.5 * prior.det_m10.ln();
    Ok(RecoveredFactors {
        z0: z0.clone(),
        z1: z1.clone(),
        log_h0: factors.log_h0.clone(),
        log_h1: factors.log_h1.iter().map(|g| g + shift).collect(),
    })
}

/// Pointwise transient fields at one time.
#[derive(Clone, Debug)]
pub struct Transient {
    pub t: f64,
    pub log_hhat: Vec<f64>,
    pub log_h: Vec<f64>,
    pub sigma: Vec<f64>,
    pub v: Vec<f64>,
}

/// How `v_ε` is extracted from `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlForm {
    /// `2ε bᵀ∇ log h`, the drift that transports `σ_ε`.
    #[default]
    LogGradient,
    /// `2ε bᵀ∇ h`, kept for comparison.
    Gradient,
}

/// Transient quantities of the linear-prior bridge.
pub struct TransientEngine<'a> {
    rec: &'a RecoveredFactors,
    pub eps: f64,
    n: usize,
    exec: Exec,
}

impl<'a> TransientEngine<'a> {
    pub fn new(rec: &'a RecoveredFactors, eps: f64, exec: Exec) -> Self {
        Self {
            rec,
            eps,
            n: rec.z0.dim,
            exec,
        }
    }

    /// `log ĥ(z,t) = log ∫ κ(0,z̄,t,z) ĥ₀(z̄) dz̄`.
    pub fn log_hhat(&self, z: &[f64], t: f64) -> Result<f64> {
        let k = PriorKernel::new(self.n, 0.0, t, self.eps)?;
        let z0 = &self.rec.z0;
        Ok(log_sum_exp((0..z0.len()).map(|i| {
            k.log_value(z0.point(i), z) + self.rec.log_h0[i] + z0.weights[i].ln()
        })))
    }

    /// `log h(z,t)` and `2ε bᵀ∇_z log h(z,t)`.
    pub fn log_h_and_control(
        &self,
        z: &[f64],
        t: f64,
        k: &PriorKernel,
        gain: &DMatrix<f64>,
    ) -> (f64, f64) {
        let z1 = &self.rec.z1;
        let logs: Vec<f64> = (0..z1.len())
            .map(|j| k.log_value(z, z1.point(j)) + self.rec.log_h1[j] + z1.weights[j].ln())
            .collect();
        let lh = log_sum_exp(logs.iter().copied());
        if lh == f64::NEG_INFINITY {
            return (lh, 0.0);
        }
        // E[z₁ | z, t] under the softmax weights of the kernel sum.
        let mut mean = DVector::zeros(self.n);
        for (j, l) in logs.iter().enumerate() {
            let w = (l - lh).exp();
            if w > 0.0 {
                mean += DVector::from_row_slice(z1.point(j)) * w;
            }
        }
        let phi = stm_offset(self.n, 1.0 - t);
        let r = mean - phi * DVector::from_row_slice(z);
        (lh, (gain * r)[(0, 0)])
    }

    /// Row vector `bᵀΦ(1,t)ᵀM(1,t)⁻¹`.
    pub fn control_gain(&self, t: f64) -> Result<DMatrix<f64>> {
        let n = self.n;
        let m = gramian_offset(n, 1.0 - t);
        let phi = stm_offset(n, 1.0 - t);
        // bᵀΦᵀM⁻¹ = (M⁻¹Φb)ᵀ with b = eₙ.
        let x = spd_solve(&m, &phi)?;
        Ok(DMatrix::from_row_slice(1, n, x.column(n - 1).as_slice()))
    }

    /// Pointwise `ĥ`, `h`, `σ = ĥh`, `v` at interior times.
    pub fn transient(&self, points: &[Point], t: f64, form: ControlForm) -> Result<Transient> {
        if !(t > 0.0 && t < 1.0) {
            return Err(SteerError::domain("pointwise transient needs 0 < t < 1"));
        }
        let k1 = PriorKernel::new(self.n, t, 1.0, self.eps)?;
        let gain = self.control_gain(t)?;
        let vals: Vec<Result<(f64, f64, f64)>> = self.exec.map(points.len(), |p| {
            let z = points[p].as_slice();
            let lhh = self.log_hhat(z, t)?;
            let (lh, v) = self.log_h_and_control(z, t, &k1, &gain);
            Ok((lhh, lh, v))
        });
        let mut out = Transient {
            t,
            log_hhat: Vec::with_capacity(points.len()),
            log_h: Vec::with_capacity(points.len()),
            sigma: Vec::with_capacity(points.len()),
            v: Vec::with_capacity(points.len()),
        };
        for r in vals {
            let (lhh, lh, v) = r?;
            out.log_hhat.push(lhh);
            out.log_h.push(lh);
            out.sigma.push((lhh + lh).exp());
            out.v.push(match form {
                ControlForm::LogGradient => v,
                // ∇h = h ∇log h.
                ControlForm::Gradient => v * lh.exp(),
            });
        }
        Ok(out)
    }

    /// `2ε bᵀ∇ log h(z,t)` at one point; `t < 1`.
    pub fn control(&self, z: &[f64], t: f64) -> Result<f64> {
        let k1 = PriorKernel::new(self.n, t, 1.0, self.eps)?;
        let gain = self.control_gain(t)?;
        Ok(self.log_h_and_control(z, t, &k1, &gain).1)
    }
}

/// Mean weights and covariance of the pinned bridge at time `t`:
/// `z(t) | z₀, z₁ ~ N(P(t)z₀ + Q(t)z₁, 2ε Σ_t)`.
#[derive(Clone, Debug)]
pub struct PinnedBridge {
    pub t: f64,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// `2ε (M(t,0) − Q(t)Φ(1,t)M(t,0))`.
    pub cov: DMatrix<f64>,
}

impl PinnedBridge {
    pub fn new(n: usize, t: f64, eps: f64) -> Result<Self> {
        let (p, q) = interp_matrices(n, t)?;
        let mt0 = gramian_offset(n, t);
        let phi1t = stm_offset(n, 1.0 - t);
        let sigma = &mt0 - &q * phi1t * &mt0;
        let sigma = (&sigma + sigma.transpose()) * (eps);
        Ok(Self {
            t,
            p,
            q,
            cov: sigma,
        })
    }

    pub fn mean(&self, z0: &[f64], z1: &[f64]) -> Point {
        &self.p * DVector::from_row_slice(z0) + &self.q * DVector::from_row_slice(z1)
    }

    /// Offsets and weights of a quadrature rule for `N(0, cov)`: a single
    /// node when the spread is below `resolution`, else the tensor 3-point
    /// Gauss–Hermite rule along the principal axes.
    pub fn quadrature(&self, resolution: f64) -> Vec<(Point, f64)> {
        let n = self.cov.nrows();
        let eig = self.cov.clone().symmetric_eigen();
        let sd: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
        let active: Vec<usize> = (0..n).filter(|&k| sd[k] > 0.5 * resolution).collect();
        if active.is_empty() {
            return vec![(DVector::zeros(n), 1.0)];
        }
        let nodes = [
            (-(3.0f64).sqrt(), 1.0 / 6.0),
            (0.0, 2.0 / 3.0),
            ((3.0f64).sqrt(), 1.0 / 6.0),
        ];
        let mut out = Vec::new();
        let m = active.len();
        for code in 0..3usize.pow(m as u32) {
            let mut off = DVector::zeros(n);
            let mut w = 1.0;
            let mut c = code;
            for &k in &active {
                let (x, wk) = nodes[c % 3];
                c /= 3;
                off += eig.eigenvectors.column(k) * (x * sd[k]);
                w *= wk;
            }
            out.push((off, w));
        }
        out
    }
}
