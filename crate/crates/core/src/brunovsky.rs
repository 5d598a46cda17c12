//! Closed-form linear algebra for the Brunovsky chain of integrators.
//!
//! `A` is the upper shift and `b = e_n`, so `exp(A dt)` and the controllability
//! Gramian have polynomial entries in the offset `dt = t - s`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Result, SteerError};

/// Largest supported dimension.
pub const MAX_DIM: usize = 8;
/// Above this dimension the Gramian is too ill-conditioned for reliable solves.
pub const WARN_DIM: usize = 5;

fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

fn check_dim(n: usize) -> Result<()> {
    if n == 0 || n > MAX_DIM {
        return Err(SteerError::domain(format!(
            "dimension {n} outside 1..={MAX_DIM}"
        )));
    }
    if n > WARN_DIM {
        log::warn!("dimension {n} > {WARN_DIM}: Gramian condition number exceeds 1e12");
    }
    Ok(())
}

fn check_interval(t: f64, s: f64) -> Result<()> {
    if !(t.is_finite() && s.is_finite()) || t < s {
        return Err(SteerError::domain(format!(
            "interval requires s <= t, got s = {s}, t = {t}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrunovskyPair {
    pub n: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl BrunovskyPair {
    pub fn new(n: usize) -> Result<Self> {
        check_dim(n)?;
        let a = DMatrix::from_fn(n, n, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        let mut b = DVector::zeros(n);
        b[n - 1] = 1.0;
        Ok(Self { n, a, b })
    }

    /// `[b | Ab | ... | A^{n-1} b]`.
    pub fn kalman_matrix(&self) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.n, self.n);
        let mut col = self.b.clone();
        for j in 0..self.n {
            k.set_column(j, &col);
            col = &self.a * col;
        }
        k
    }

    pub fn kalman_rank(&self) -> usize {
        self.kalman_matrix().rank(1e-12)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    pub value: DMatrix<f64>,
    pub s: f64,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gramian {
    pub value: DMatrix<f64>,
    pub s: f64,
    pub t: f64,
}

/// `exp(A dt)` for any real offset, including negative ones.
pub fn stm_offset(n: usize, dt: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if j >= i {
            dt.powi((j - i) as i32) / factorial(j - i)
        } else {
            0.0
        }
    })
}

/// Controllability Gramian over an interval of length `dt >= 0`.
pub fn gramian_offset(n: usize, dt: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        let p = 2 * n - i - j - 1;
        dt.powi(p as i32) / (factorial(n - 1 - i) * factorial(n - 1 - j) * p as f64)
    })
}

/// `∫₀ᵗ exp(-sA) b bᵀ exp(-sAᵀ) ds`, the Gramian with negated offset.
pub fn reversed_gramian(n: usize, t: f64) -> DMatrix<f64> {
    let mut m = gramian_offset(n, t);
    for i in 0..n {
        for j in 0..n {
            if (i + j) % 2 == 1 {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
    m
}

pub fn state_transition(n: usize, t: f64, s: f64) -> Result<TransitionMatrix> {
    check_dim(n)?;
    check_interval(t, s)?;
    Ok(TransitionMatrix {
        value: stm_offset(n, t - s),
        s,
        t,
    })
}

pub fn gramian_closed_form(n: usize, t: f64, s: f64) -> Result<Gramian> {
    check_dim(n)?;
    check_interval(t, s)?;
    Ok(Gramian {
        value: gramian_offset(n, t - s),
        s,
        t,
    })
}

/// Composite Simpson rule for `∫ₛᵗ Φ(t,τ) b bᵀ Φ(t,τ)ᵀ dτ`.
pub fn gramian_quadrature(n: usize, t: f64, s: f64, steps: usize) -> Result<Gramian> {
    check_dim(n)?;
    check_interval(t, s)?;
    if steps < 2 {
        return Err(SteerError::domain("quadrature needs at least 2 steps"));
    }
    let steps = steps + steps % 2;
    let h = (t - s) / steps as f64;
    let mut acc = DMatrix::zeros(n, n);
    for k in 0..=steps {
        let tau = s + k as f64 * h;
        // Φ(t,τ) b is the last column of exp(A (t - τ)).
        let col = DVector::from_fn(n, |i, _| {
            let p = n - 1 - i;
            (t - tau).powi(p as i32) / factorial(p)
        });
        let w = if k == 0 || k == steps {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += (&col * col.transpose()) * w;
    }
    Ok(Gramian {
        value: acc * (h / 3.0),
        s,
        t,
    })
}

fn symmetric_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !m.is_square() {
        return Err(SteerError::domain("matrix is not square"));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(SteerError::domain(format!(
            "matrix is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min <= 1e-14 * scale {
        return Err(SteerError::domain(format!(
            "matrix is not positive definite (eigenvalue {min:.3e})"
        )));
    }
    Ok(eig)
}

fn spd_power(m: &DMatrix<f64>, p: f64) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(m)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.powf(p)));
    let v = &eig.eigenvectors;
    let r = v * d * v.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// Principal square root of a symmetric positive definite matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_power(m, 0.5)
}

pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spd_power(m, -0.5)
}

/// Solves `M X = B` for SPD `M` by Cholesky.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| SteerError::domain("Cholesky factorization failed"))?;
    Ok(chol.solve(rhs))
}

pub fn spd_solve_vec(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| SteerError::domain("Cholesky factorization failed"))?;
    Ok(chol.solve(rhs))
}

/// `P(t) = Φ(t,1) M(1,t) M₁₀⁻¹ Φ₁₀` and `Q(t) = M(t,0) Φ(1,t)ᵀ M₁₀⁻¹`.
pub fn interp_matrices(n: usize, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_dim(n)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(SteerError::domain(format!("t = {t} outside [0, 1]")));
    }
    let m10 = gramian_offset(n, 1.0);
    let phi10 = stm_offset(n, 1.0);
    let m1t = gramian_offset(n, 1.0 - t);
    let mt0 = gramian_offset(n, t);
    let phi_t1 = stm_offset(n, t - 1.0);
    let phi_1t = stm_offset(n, 1.0 - t);
    // M₁₀⁻¹ Φ₁₀ and M₁₀⁻¹ Φ(1,t) via solves; M₁₀ is symmetric.
    let w = spd_solve(&m10, &phi10)?;
    let p = phi_t1 * m1t * w;
    let q = mt0 * spd_solve(&m10, &phi_1t)?.transpose();
    Ok((p, q))
}

/// Quantities of the hatting change of variables, fixed for a given `n`.
#[derive(Clone, Debug)]
pub struct LinearPrior {
    pub n: usize,
    pub phi10: DMatrix<f64>,
    pub m10: DMatrix<f64>,
    pub m10_sqrt: DMatrix<f64>,
    pub m10_inv_sqrt: DMatrix<f64>,
    pub det_m10: f64,
    /// `M₁₀^{-1/2} Φ₁₀`, the hatting map of the initial marginal.
    pub hat0: DMatrix<f64>,
}

impl LinearPrior {
    pub fn new(n: usize) -> Result<Self> {
        check_dim(n)?;
        let phi10 = stm_offset(n, 1.0);
        let m10 = gramian_offset(n, 1.0);
        let m10_sqrt = spd_sqrt(&m10)?;
        let m10_inv_sqrt = spd_inv_sqrt(&m10)?;
        let det_m10 = m10.determinant();
        let hat0 = &m10_inv_sqrt * &phi10;
        Ok(Self {
            n,
            phi10,
            m10,
            m10_sqrt,
            m10_inv_sqrt,
            det_m10,
            hat0,
        })
    }

    /// `Φ₁₀⁻¹ M₁₀^{1/2}`, inverse of `hat0`.
    pub fn unhat0(&self) -> DMatrix<f64> {
        stm_offset(self.n, -1.0) * &self.m10_sqrt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn small_cases() {
        let phi = state_transition(2, 1.0, 0.0).unwrap().value;
        assert_eq!(phi, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        let phi = state_transition(3, 1.0, 0.0).unwrap().value;
        assert_eq!(
            phi,
            DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
        );
        assert_eq!(
            state_transition(4, 0.3, 0.3).unwrap().value,
            DMatrix::identity(4, 4)
        );
        assert_abs_diff_eq!(
            gramian_closed_form(1, 0.8, 0.1).unwrap().value[(0, 0)],
            0.7,
            epsilon = 1e-15
        );
        assert_eq!(
            gramian_closed_form(3, 0.4, 0.4).unwrap().value,
            DMatrix::zeros(3, 3)
        );
    }

    #[test]
    fn matrix_exponential_series_oracle() {
        for n in 1..=6 {
            let pair = BrunovskyPair::new(n).unwrap();
            let dt = 0.37;
            let mut term = DMatrix::identity(n, n);
            let mut sum = DMatrix::identity(n, n);
            for k in 1..n {
                term = &term * &pair.a * (dt / k as f64);
                sum += &term;
            }
            assert_abs_diff_eq!(stm_offset(n, dt), sum, epsilon = 1e-15);
        }
    }

    #[test]
    fn pair_invariants() {
        for n in 1..=MAX_DIM {
            let p = BrunovskyPair::new(n).unwrap();
            assert_eq!(p.kalman_rank(), n);
            let mut an = DMatrix::identity(n, n);
            for _ in 0..n {
                an = &an * &p.a;
            }
            assert_eq!(an, DMatrix::zeros(n, n));
            assert_eq!(p.b.iter().filter(|&&v| v != 0.0).count(), 1);
        }
        assert!(BrunovskyPair::new(0).is_err());
        assert!(BrunovskyPair::new(9).is_err());
    }

    #[test]
    fn domain_errors() {
        assert!(state_transition(2, 0.1, 0.5).is_err());
        assert!(gramian_closed_form(2, 0.1, 0.5).is_err());
        assert!(gramian_quadrature(2, 1.0, 0.0, 1).is_err());
        assert!(interp_matrices(2, 1.5).is_err());
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let q = gramian_quadrature(1, 1.0, 0.0, 100).unwrap().value;
        assert_abs_diff_eq!(q[(0, 0)], 1.0, epsilon = 1e-12);
        let q = gramian_quadrature(2, 1.0, 0.0, 200).unwrap().value;
        let c = gramian_closed_form(2, 1.0, 0.0).unwrap().value;
        assert_abs_diff_eq!(q, c, epsilon = 1e-10);
        assert_abs_diff_eq!(
            c,
            DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.5, 0.5, 1.0]),
            epsilon = 1e-15
        );
        let q = gramian_quadrature(4, 0.7, 0.2, 200).unwrap().value;
        assert_abs_diff_eq!(q.clone(), q.transpose(), epsilon = 1e-15);
        assert!(q.symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn square_roots() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert_abs_diff_eq!(spd_sqrt(&i).unwrap(), i, epsilon = 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = spd_sqrt(&d).unwrap();
        assert_abs_diff_eq!(
            s,
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])),
            epsilon = 1e-14
        );
        let m = gramian_offset(2, 1.0);
        let s = spd_sqrt(&m).unwrap();
        assert!((&s * &s - &m).amax() <= 1e-12);
        let si = spd_inv_sqrt(&m).unwrap();
        assert_abs_diff_eq!(&s * &si, DMatrix::identity(2, 2), epsilon = 1e-12);

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = spd_sqrt(&bad).unwrap_err().to_string();
        assert!(err.contains("-1"), "{err}");
        let nonsym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(spd_sqrt(&nonsym).is_err());
    }

    #[test]
    fn interpolation_endpoints() {
        for n in 1..=5 {
            let (p0, q0) = interp_matrices(n, 0.0).unwrap();
            let (p1, q1) = interp_matrices(n, 1.0).unwrap();
            let id = DMatrix::<f64>::identity(n, n);
            let tol = 1e-9 * 10f64.powi(n as i32);
            assert!((p0 - &id).amax() < tol);
            assert!(q0.amax() < tol);
            assert!(p1.amax() < tol);
            assert!((q1 - &id).amax() < tol);
        }
    }

    #[test]
    fn reversed_gramian_matches_quadrature() {
        let n = 3;
        let t = 0.6;
        let steps = 400;
        let h = t / steps as f64;
        let mut acc = DMatrix::zeros(n, n);
        for k in 0..=steps {
            let s = k as f64 * h;
            let col = stm_offset(n, -s).column(n - 1).into_owned();
            let w = if k == 0 || k == steps {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += (&col * col.transpose()) * w;
        }
        acc *= h / 3.0;
        assert_abs_diff_eq!(reversed_gramian(n, t), acc, epsilon = 1e-12);
    }

    #[test]
    fn linear_prior_hat_inverse() {
        let lp = LinearPrior::new(3).unwrap();
        assert_abs_diff_eq!(
            &lp.hat0 * lp.unhat0(),
            DMatrix::identity(3, 3),
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(lp.det_m10, 1.0 / 8640.0, epsilon = 1e-15);
    }
}
