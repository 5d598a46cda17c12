//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when a criterion fails, unless it is listed in `KNOWN_FAILURES`.
//! A listed criterion that starts passing also fails the run so the list
//! stays honest.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steer_core::bridge::FixedPointOptions;
use steer_core::brunovsky::{
    gramian_closed_form, gramian_offset, interp_matrices, reversed_gramian, spd_solve,
    state_transition, stm_offset, LinearPrior,
};
use steer_core::density::{
    discretize, l1_distance, GaussianMixture, Grid, GridDensity, WeightedCloud,
};
use steer_core::hjb::{
    characteristic_field, conjugate, hjb_residual, integrate_strip, psi_characteristic,
    riccati_oracle, AffinePotential, FlowGeometry, HamiltonianSpec, LowerEnvelope, QuadraticValue,
    SampledField, UpperEnvelope,
};
use steer_core::lie::{
    ad_field, brunovsky_trajectory, closed_loop_trajectory, lie_derivative, NewtonOptions, Point,
};
use steer_core::par::Exec;
use steer_core::scenario::Scenario;
use steer_core::steering::{steer_pipeline, ZBridge};
use steer_core::systems;
use steer_core::transport::{
    barycentric_map, entropic_plan, hatted_plan, interpolate, monge_ampere_residual,
};

/// Example 2 carries transient mass outside the image of `x₂ > −1`, so some
/// interior `τ⁻¹` solves have no preimage. See the README.
const KNOWN_FAILURES: &[usize] = &[11];

#[derive(Default)]
struct Report {
    checks: Vec<(bool, String)>,
}

impl Report {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.checks.push((ok, what.into()));
    }

    fn runtime(&mut self, start: Instant, limit_s: f64) {
        let s = start.elapsed().as_secs_f64();
        self.check(s < limit_s, format!("{s:.2} s < {limit_s} s"));
    }

    fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.0)
    }
}

fn v(x: &[f64]) -> Point {
    DVector::from_row_slice(x)
}

fn gaussian(grid: &Grid, mean: &[f64], var: &[f64]) -> GridDensity {
    let mix =
        GaussianMixture::diagonal(vec![1.0], vec![mean.to_vec()], vec![var.to_vec()]).unwrap();
    discretize(&mix, grid, true).unwrap().0
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Gramian closed form against composite Simpson of `Φ(t,τ)bbᵀΦ(t,τ)ᵀ`.
fn gramian(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        for _ in 0..20 {
            let s: f64 = rng.random_range(-1.0..1.0);
            let t = s + rng.random_range(0.0..2.0);
            let steps = 2000;
            let h = (t - s) / steps as f64;
            let mut q = DMatrix::zeros(n, n);
            for k in 0..=steps {
                let w = if k == 0 || k == steps {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let d = t - (s + k as f64 * h);
                let col =
                    DVector::from_fn(n, |i, _| d.powi((n - 1 - i) as i32) / factorial(n - 1 - i));
                q += &col * col.transpose() * (w * h / 3.0);
            }
            let closed = gramian_closed_form(n, t, s).unwrap().value;
            worst = worst.max((closed - q).amax());
        }
    }
    r.check(
        worst <= 1e-8,
        format!("max entry error {worst:.2e} ≤ 1e-8 over n = 1..5"),
    );
    r.runtime(start, 1.0);
}

/// Entries against the truncated exponential series, then semigroup and inverse.
fn transition_laws(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut entries, mut semi, mut inv): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for n in 1..=6 {
        let a = DMatrix::from_fn(n, n, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        for _ in 0..20 {
            let s: f64 = rng.random_range(-1.0..1.0);
            let m = s + rng.random_range(0.0..1.0);
            let t = m + rng.random_range(0.0..1.0);
            let mut series = DMatrix::identity(n, n);
            let mut term = DMatrix::identity(n, n);
            for k in 1..n {
                term = &term * &a * ((t - s) / k as f64);
                series += &term;
            }
            let phi = |t: f64, s: f64| state_transition(n, t, s).unwrap().value;
            entries = entries.max((phi(t, s) - series).amax());
            semi = semi.max((phi(t, m) * phi(m, s) - phi(t, s)).amax());
            let back = stm_offset(n, s - t);
            inv = inv.max((phi(t, s) * back - DMatrix::identity(n, n)).amax());
        }
    }
    r.check(entries <= 1e-12, format!("entries {entries:.1e}"));
    r.check(semi <= 1e-12, format!("semigroup {semi:.1e}"));
    r.check(
        inv <= 1e-12,
        format!("inverse {inv:.1e} (all ≤ 1e-12, n ≤ 6)"),
    );
    r.runtime(start, 1.0);
}

/// The polynomial entries of `P(t)` and `Q(t)` for the double integrator.
fn double_integrator(r: &mut Report) {
    let start = Instant::now();
    let g = Grid::uniform(&[(-1.6, 1.6), (-1.6, 1.6)], &[21, 21]).unwrap();
    let a = gaussian(&g, &[-0.3, 0.1], &[0.06, 0.04]);
    let b = gaussian(&g, &[0.35, -0.2], &[0.04, 0.07]);
    let plan = entropic_plan(&a, &b, 1e-2, &FixedPointOptions::default()).unwrap();
    let it = interpolate(&barycentric_map(&plan), 2).unwrap();
    let probes: Vec<Point> = (0..g.len()).step_by(13).map(|i| g.node(i)).collect();
    let (mut coeff, mut path): (f64, f64) = (0.0, 0.0);
    for k in 0..=10 {
        let t = k as f64 / 10.0;
        let s = 1.0 - t;
        let p = DMatrix::from_row_slice(
            2,
            2,
            &[
                -2.0 * s.powi(3) + 3.0 * s * s,
                -s.powi(3) + s * s,
                6.0 * s * s - 6.0 * s,
                3.0 * s * s - 2.0 * s,
            ],
        );
        let q = DMatrix::from_row_slice(
            2,
            2,
            &[
                -2.0 * t.powi(3) + 3.0 * t * t,
                t.powi(3) - t * t,
                -6.0 * t * t + 6.0 * t,
                3.0 * t * t - 2.0 * t,
            ],
        );
        let (pm, qm) = interp_matrices(2, t).unwrap();
        let slice = it.at(t).unwrap();
        coeff = coeff
            .max((&pm - &p).amax())
            .max((&qm - &q).amax())
            .max((&slice.p - &p).amax())
            .max((&slice.q - &q).amax());
        for z in &probes {
            let want = &p * z + &q * it.t_map(z);
            path = path.max((slice.apply(z) - want).amax());
        }
    }
    r.check(coeff <= 1e-10, format!("coefficients {coeff:.1e}"));
    r.check(
        path <= 1e-10,
        format!("T_t(z) {path:.1e} (≤ 1e-10, 11 times)"),
    );
    r.runtime(start, 1.0);
}

/// Lie derivative identities of the flat three-state system.
fn lie_identities(r: &mut Report) {
    let start = Instant::now();
    let b = systems::builtin("flat3d").unwrap();
    let pts = systems::sample_points(&b, 100, 4);
    let inside = pts.iter().all(|x| b.system.in_domain(x));
    r.check(inside && pts.len() == 100, "100 points in x₂ > −1");
    let fields = |numeric: bool| {
        let (f, g, l) = if numeric {
            (
                b.system.f.numeric(),
                b.system.g.numeric(),
                b.lambda.numeric(),
            )
        } else {
            (b.system.f.clone(), b.system.g.clone(), b.lambda.clone())
        };
        let ad1 = ad_field(&f, &g, 1).unwrap();
        let ad2 = ad_field(&f, &g, 2).unwrap();
        (f, g, l, ad1, ad2)
    };
    for (numeric, tol) in [(false, 1e-6), (true, 1e-4)] {
        let (f, g, l, ad1, ad2) = fields(numeric);
        let mut worst: f64 = 0.0;
        for x in &pts {
            let (x1, x2, x3) = (x[0], x[1], x[2]);
            let cases = [
                (lie_derivative(&l, &g, x, 1).unwrap(), 0.0),
                (lie_derivative(&l, &ad1, x, 1).unwrap(), 0.0),
                (lie_derivative(&l, &ad2, x, 1).unwrap(), 1.0 + x2),
                (lie_derivative(&l, &f, x, 1).unwrap(), x3 - x2 * x2),
                (lie_derivative(&l, &f, x, 2).unwrap(), -x1 + x2),
                (lie_derivative(&l, &f, x, 3).unwrap(), -x3 - x2),
            ];
            for (got, want) in cases {
                worst = worst.max((got - want).abs());
            }
        }
        let kind = if numeric {
            "finite differences"
        } else {
            "analytic"
        };
        r.check(worst <= tol, format!("{kind} {worst:.1e} ≤ {tol:.0e}"));
    }
    r.runtime(start, 5.0);
}

/// Closed loop of the flat system mapped by `τ` against the chain of integrators.
fn closed_loop(r: &mut Report) {
    let start = Instant::now();
    let b = systems::builtin("flat3d").unwrap();
    let input = |t: f64| (2.0 * std::f64::consts::PI * t).sin();
    let (mut sq, mut count) = (0.0, 0usize);
    let mut inside = true;
    // Starts whose normal-form path keeps z₁ + z₃ > −½, the image of x₂ > −1.
    for x0 in [
        v(&[0.3, 0.3, 0.5]),
        v(&[-0.2, 0.6, 0.1]),
        v(&[0.2, 0.4, 0.6]),
    ] {
        let xs = closed_loop_trajectory(&b.system, &b.tuple, &input, &x0, 1000);
        let zs = brunovsky_trajectory(3, &input, &b.tuple.tau(&x0), 1000).unwrap();
        for (x, z) in xs.iter().zip(&zs) {
            inside &= b.system.in_domain(x);
            sq += (b.tuple.tau(x) - z).norm_squared();
            count += 3;
        }
    }
    let rms = (sq / count as f64).sqrt();
    r.check(inside, "trajectories stay in x₂ > −1");
    r.check(rms <= 1e-5, format!("RMS {rms:.1e} ≤ 1e-5"));
    r.runtime(start, 5.0);
}

fn snapshot_masses(sol: &steer_core::steering::BridgeSolution) -> f64 {
    let (vz, vx) = (sol.z_grid.cell_volume(), sol.x_grid.cell_volume());
    sol.snapshots
        .iter()
        .map(|s| {
            let a = s.sigma.iter().sum::<f64>() * vz;
            let b = s.rho.iter().sum::<f64>() * vx;
            (a - 1.0).abs().max((b - 1.0).abs())
        })
        .fold(0.0, f64::max)
}

/// Endpoint L¹ of the first and last `ρ` snapshots against the inputs.
fn endpoint_l1(
    sol: &steer_core::steering::BridgeSolution,
    p0: &GridDensity,
    p1: &GridDensity,
) -> (f64, f64) {
    let embed = |d: &GridDensity| {
        GridDensity::unchecked_mass(
            sol.x_grid.clone(),
            d.grid.embed(&d.values, &sol.x_grid).unwrap(),
        )
        .unwrap()
    };
    let last = sol.snapshots.len() - 1;
    (
        l1_distance(&sol.rho_density(0).unwrap(), &embed(p0)).unwrap(),
        l1_distance(&sol.rho_density(last).unwrap(), &embed(p1)).unwrap(),
    )
}

fn example1(r: &mut Report) {
    let start = Instant::now();
    let scn = Scenario::example1();
    let problem = scn.bridge_problem(Exec::default()).unwrap();
    r.check(
        problem.rho0.grid.shape() == [51, 51]
            && problem.eps == 1e-3
            && problem.fixed_point.tol == 1e-9,
        "51×51, ε = 1e-3, δ = 1e-9",
    );
    let sol = match steer_pipeline(&problem) {
        Ok(s) => s,
        Err(e) => {
            r.check(false, format!("pipeline: {e}"));
            return;
        }
    };
    let d = &sol.diagnostics;
    r.check(
        d.iterations <= 5000,
        format!("{} iterations ≤ 5000", d.iterations),
    );
    r.check(
        d.residuals.0 <= 1e-8 && d.residuals.1 <= 1e-8,
        format!(
            "residuals {:.1e} / {:.1e} ≤ 1e-8",
            d.residuals.0, d.residuals.1
        ),
    );
    let (a, b) = endpoint_l1(&sol, &problem.rho0, &problem.rho1);
    r.check(
        a <= 1e-3 && b <= 1e-3,
        format!("endpoint L¹ {a:.1e} / {b:.1e} ≤ 1e-3"),
    );
    let m = snapshot_masses(&sol);
    r.check(
        m <= 1e-3,
        format!(
            "snapshot mass error {m:.1e} over {} snapshots",
            sol.snapshots.len()
        ),
    );
    r.runtime(start, 60.0);
}

/// Snapshots of the same scenario from two initial values of `ĥ₁`.
fn gauge(r: &mut Report) {
    let scn = Scenario::brunovsky2d();
    let run = |init: f64| {
        let mut p = scn.bridge_problem(Exec::default()).unwrap();
        p.fixed_point.init_h1 = init;
        steer_pipeline(&p).unwrap()
    };
    let (a, b) = (run(1.0), run(7.0));
    r.check(a.z_grid == b.z_grid, "same snapshot grid");
    let mut worst: f64 = 0.0;
    for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
        let top = sa.sigma.iter().copied().fold(0.0, f64::max);
        for (x, y) in sa.sigma.iter().zip(&sb.sigma) {
            worst = worst.max((x - y).abs() / top);
        }
    }
    r.check(
        worst <= 1e-12,
        format!(
            "σ difference {worst:.1e} ≤ 1e-12 of the peak over {} snapshots, ĥ₁ = 1 vs 7",
            a.snapshots.len()
        ),
    );
}

/// Bridge control cost as ε decreases, against the transport cost.
fn epsilon_sweep(r: &mut Report) {
    let start = Instant::now();
    let g = Grid::uniform(&[(-2.5, 2.5)], &[201]).unwrap();
    let a = gaussian(&g, &[-0.5], &[0.09]);
    let b = gaussian(&g, &[0.5], &[0.04]);
    let mut costs = vec![];
    for eps in [0.05, 0.02, 0.01, 0.005] {
        let br = ZBridge::solve(
            WeightedCloud::from_grid(&a),
            WeightedCloud::from_grid(&b),
            eps,
            &FixedPointOptions::default(),
        )
        .unwrap();
        costs.push(br.control_cost(16).unwrap());
    }
    let monotone = costs.windows(2).all(|w| w[1] <= 1.05 * w[0]);
    let list: Vec<String> = costs.iter().map(|c| format!("{c:.4}")).collect();
    r.check(
        monotone,
        format!("costs [{}] nonincreasing within 5%", list.join(", ")),
    );
    let prior = LinearPrior::new(1).unwrap();
    let plan = hatted_plan(&a, &b, &prior, &[201], 1e-3, &FixedPointOptions::default()).unwrap();
    let ot = interpolate(&barycentric_map(&plan), 1)
        .unwrap()
        .control_cost(&a, 16)
        .unwrap();
    let last = costs[3];
    r.check(
        (last - ot).abs() <= 0.1 * ot,
        format!("ε = 0.005 cost {last:.4} within 10% of transport {ot:.4} (exact ½W₂² = 0.505)"),
    );
    r.runtime(start, 30.0);
}

/// Monotone rearrangement of two discretized densities on a line.
fn quantile_map(a: &GridDensity, b: &GridDensity) -> Vec<(f64, f64, f64)> {
    let cdf = |d: &GridDensity| {
        let h = d.grid.cell_volume();
        let mut acc = 0.0;
        d.values
            .iter()
            .map(|v| {
                acc += v * h;
                acc - 0.5 * v * h
            })
            .collect::<Vec<f64>>()
    };
    let (fa, fb) = (cdf(a), cdf(b));
    let yb = b.grid.axis(0);
    a.grid
        .axis(0)
        .into_iter()
        .zip(&fa)
        .filter_map(|(x, &f)| {
            let k = fb.iter().position(|&g| g >= f)?;
            if k == 0 {
                return None;
            }
            let s = (f - fb[k - 1]) / (fb[k] - fb[k - 1]);
            Some((x, f, yb[k - 1] + s * (yb[k] - yb[k - 1])))
        })
        .collect()
}

fn transport(r: &mut Report) {
    let g = Grid::uniform(&[(-1.5, 2.0)], &[141]).unwrap();
    let h = g.spacing()[0];
    let a = gaussian(&g, &[0.0], &[0.09]);
    let b = gaussian(&g, &[0.5], &[0.04]);
    let m = barycentric_map(&entropic_plan(&a, &b, 1e-3, &FixedPointOptions::default()).unwrap());
    let worst = quantile_map(&a, &b)
        .into_iter()
        .filter(|(_, f, _)| (0.01..=0.99).contains(f))
        .map(|(x, _, y)| (m.map_at(&[x])[0] - y).abs())
        .fold(0.0, f64::max);
    r.check(
        worst <= 2.0 * h,
        format!(
            "quantile map sup error {:.2} spacings ≤ 2 at η = 1e-3",
            worst / h
        ),
    );

    let g2 = Grid::uniform(&[(-1.6, 1.6), (-1.6, 1.6)], &[31, 31]).unwrap();
    let a2 = gaussian(&g2, &[-0.3, 0.1], &[0.06, 0.04]);
    let b2 = gaussian(&g2, &[0.35, -0.2], &[0.04, 0.07]);
    let mut res = vec![];
    let mut last = None;
    for eta in [0.05, 0.02, 0.01] {
        let m =
            barycentric_map(&entropic_plan(&a2, &b2, eta, &FixedPointOptions::default()).unwrap());
        res.push(monge_ampere_residual(&m, &a2, &b2).unwrap());
        last = Some(m);
    }
    r.check(
        res[0] > res[1] && res[1] > res[2],
        format!(
            "Monge–Ampère residuals {:.3e} > {:.3e} > {:.3e}",
            res[0], res[1], res[2]
        ),
    );
    let it = interpolate(&last.unwrap(), 2).unwrap();
    let (s0, s1) = (it.at(0.0).unwrap(), it.at(1.0).unwrap());
    let mut end: f64 = 0.0;
    for i in 0..g2.len() {
        let z = g2.node(i);
        end = end
            .max((s0.apply(&z) - &z).amax())
            .max((s1.apply(&z) - it.t_map(&z)).amax());
    }
    r.check(end <= 1e-10, format!("T₀ = id, T₁ = T to {end:.1e}"));
}

/// Gaussian endpoint pair of the double integrator with its exact Brenier map.
struct GaussPair {
    prior: LinearPrior,
    m0: Point,
    s0: DMatrix<f64>,
    pot: AffinePotential,
}

impl GaussPair {
    /// Target covariance either `c²` times the hatted source covariance or
    /// the `brunovsky2d` terminal covariance.
    fn new(c: Option<f64>) -> Self {
        let prior = LinearPrior::new(2).unwrap();
        let m0 = v(&[-0.5, 0.3]);
        let s0 = DMatrix::from_diagonal(&v(&[0.04, 0.03]));
        let r = &prior.hat0;
        let mu0 = r * &m0;
        let cov0 = r * &s0 * r.transpose();
        let mu1 = &prior.m10_inv_sqrt * v(&[0.5, -0.2]);
        let cov1 = match c {
            Some(c) => &cov0 * (c * c),
            None => {
                let s1 = DMatrix::from_diagonal(&v(&[0.03, 0.02]));
                &prior.m10_inv_sqrt * s1 * &prior.m10_inv_sqrt
            }
        };
        let pot = AffinePotential::gaussian(&mu0, &cov0, &mu1, &cov1).unwrap();
        Self { prior, m0, s0, pot }
    }

    fn moments(&self, t: f64) -> (Point, DMatrix<f64>) {
        let (p, q) = interp_matrices(2, t).unwrap();
        let l = &p + &q * &self.prior.m10_sqrt * &self.pot.a * &self.prior.hat0;
        let c = &q * &self.prior.m10_sqrt * &self.pot.c;
        (&l * &self.m0 + c, &l * &self.s0 * l.transpose())
    }

    fn density(&self, z: &Point, t: f64) -> f64 {
        let (m, s) = self.moments(t);
        let d = z - m;
        let w = s.clone().cholesky().unwrap().solve(&d);
        (-0.5 * d.dot(&w)).exp() / (2.0 * std::f64::consts::PI * s.determinant().sqrt())
    }

    fn lattice(&self, nodes: usize) -> Grid {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for k in 0..=20 {
            let (m, s) = self.moments(k as f64 / 20.0);
            for a in 0..2 {
                lo[a] = lo[a].min(m[a] - 3.0 * s[(a, a)].sqrt());
                hi[a] = hi[a].max(m[a] + 3.0 * s[(a, a)].sqrt());
            }
        }
        Grid::uniform(&[(lo[0], hi[0]), (lo[1], hi[1])], &[nodes, nodes]).unwrap()
    }

    fn source_grid(&self, nodes: usize) -> Grid {
        let b: Vec<(f64, f64)> = (0..2)
            .map(|a| {
                let s = 4.0 * self.s0[(a, a)].sqrt();
                (self.m0[a] - s, self.m0[a] + s)
            })
            .collect();
        Grid::uniform(&b, &[nodes, nodes]).unwrap()
    }

    fn probes(&self, t: f64) -> Vec<Point> {
        let geom = FlowGeometry::new(&self.prior, t).unwrap();
        let mut out = vec![];
        for i in 0..5 {
            for j in 0..5 {
                let u = [(i as f64 - 2.0) * 0.75, (j as f64 - 2.0) * 0.75];
                let z0 = v(&[
                    self.m0[0] + u[0] * self.s0[(0, 0)].sqrt(),
                    self.m0[1] + u[1] * self.s0[(1, 1)].sqrt(),
                ]);
                out.push(geom.forward(&self.pot, &z0));
            }
        }
        out
    }
}

fn newton() -> NewtonOptions {
    NewtonOptions {
        tol: 1e-12,
        max_iter: 60,
    }
}

/// `½λ_max(H)Σ(hₖ/2)²`, the worst lattice offset of a quadratic's optimum.
fn lattice_gap(h: &DMatrix<f64>, spacing: &[f64]) -> f64 {
    let lam = SymmetricEigen::new(h.clone()).eigenvalues.max();
    0.5 * lam * spacing.iter().map(|s| 0.25 * s * s).sum::<f64>()
}

/// Max and RMS errors of the two envelopes against the Riccati solution.
fn envelope_errors(s: &GaussPair, nodes: usize, t: f64) -> ((f64, f64), (f64, f64), bool) {
    let q0 = QuadraticValue::from_affine(&s.pot, &s.prior);
    let psi0 = SampledField::sample(&s.source_grid(nodes), |z| q0.eval(z));
    let conj = conjugate(&psi0).unwrap();
    let up = UpperEnvelope::new(&psi0, t).unwrap();
    let low = LowerEnvelope::new(&psi0, &conj, t).unwrap();
    let q = riccati_oracle(&q0, t, 2000);
    let (mut mu, mut ml, mut su, mut sl) = (0.0f64, 0.0f64, 0.0, 0.0);
    let mut above = true;
    let probes = s.probes(t);
    for z in &probes {
        let exact = q.eval(z);
        let u = up.eval(z).unwrap() - exact;
        let l = low.eval(z).unwrap() - exact;
        above &= u >= -1e-9;
        mu = mu.max(u.abs());
        ml = ml.max(l.abs());
        su += u * u;
        sl += l * l;
    }
    let m = probes.len() as f64;
    ((mu, (su / m).sqrt()), (ml, (sl / m).sqrt()), above)
}

fn flat3d_inverse(z: &Point) -> Point {
    let x2 = -1.0 + (1.0 + 2.0 * (z[0] + z[2])).max(1e-6).sqrt();
    v(&[z[0] - 0.5 * x2 * x2, x2, z[1] + x2 * x2])
}

fn hjb_suite(r: &mut Report) {
    // Linear strips: z(t) = Φz₀ + M(t,0)ζ(t), ζ(t) = e^{−tAᵀ}ζ₀.
    let mut strip_err: f64 = 0.0;
    let mut drift: f64 = 0.0;
    for n in 1..=3 {
        let spec = HamiltonianSpec::brunovsky(n);
        let z0 = DVector::from_fn(n, |i, _| 0.3 - 0.2 * i as f64);
        let zeta0 = DVector::from_fn(n, |i, _| 0.5 + 0.4 * i as f64);
        let strip = integrate_strip(&spec, &z0, &zeta0, 0.1, 100).unwrap();
        for (k, &t) in strip.times.iter().enumerate() {
            let zeta = stm_offset(n, -t).transpose() * &zeta0;
            let z = stm_offset(n, t) * &z0 + gramian_offset(n, t) * &zeta;
            strip_err = strip_err
                .max((&strip.z[k] - z).amax())
                .max((&strip.zeta[k] - zeta).amax());
        }
        let hs = strip.hamiltonian(&spec).unwrap();
        drift = hs.iter().map(|x| (x - hs[0]).abs()).fold(drift, f64::max);
    }
    r.check(
        strip_err <= 1e-8,
        format!("strip vs closed form {strip_err:.1e}"),
    );
    let b = systems::builtin("flat3d").unwrap();
    let spec =
        HamiltonianSpec::from_tuple(b.tuple.clone(), flat3d_inverse, NewtonOptions::default());
    let strip = integrate_strip(
        &spec,
        &b.tuple.tau(&v(&[0.3, 0.3, 0.5])),
        &v(&[0.1, -0.2, 0.3]),
        0.0,
        100,
    )
    .unwrap();
    let hs = strip.hamiltonian(&spec).unwrap();
    drift = hs.iter().map(|x| (x - hs[0]).abs()).fold(drift, f64::max);
    r.check(drift <= 1e-8, format!("Hamiltonian drift {drift:.1e}"));

    // Characteristics against Riccati on three Gaussian pairs.
    let mut ch_err: f64 = 0.0;
    for c in [Some(0.6), Some(1.0), Some(1.5), None] {
        let s = GaussPair::new(c);
        let q0 = QuadraticValue::from_affine(&s.pot, &s.prior);
        for t in [0.1, 0.5, 1.0] {
            let g = FlowGeometry::new(&s.prior, t).unwrap();
            let q = riccati_oracle(&q0, t, 2000);
            for z in s.probes(t) {
                let ch = psi_characteristic(&s.pot, &g, &z, newton()).unwrap();
                let want = q.eval(&z);
                ch_err = ch_err.max((ch.psi - want).abs() / (1.0 + want.abs()));
            }
        }
    }
    r.check(
        ch_err <= 1e-8,
        format!("characteristic vs Riccati {ch_err:.1e}"),
    );

    // Envelopes within lattice tolerance, and refinement order.
    let s = GaussPair::new(Some(1.5));
    let q0 = QuadraticValue::from_affine(&s.pot, &s.prior);
    let (mut within, mut above, mut order) = (true, true, f64::INFINITY);
    for t in [0.5, 1.0] {
        let grid = s.source_grid(61);
        let psi0 = SampledField::sample(&grid, |z| q0.eval(z));
        let conj = conjugate(&psi0).unwrap();
        let phi = stm_offset(2, t);
        let minv = spd_solve(&gramian_offset(2, t), &DMatrix::identity(2, 2)).unwrap();
        let tol_u = lattice_gap(&(&q0.pi + phi.transpose() * &minv * &phi), grid.spacing());
        let pinv = spd_solve(&q0.pi, &DMatrix::identity(2, 2)).unwrap();
        let tol_l = lattice_gap(&(pinv + reversed_gramian(2, t)), conj.grid.spacing())
            + lattice_gap(&q0.pi, grid.spacing());
        let (u, l, ok) = envelope_errors(&s, 61, t);
        within &= u.0 <= tol_u && l.0 <= tol_l;
        above &= ok;
        let (cu, cl, _) = envelope_errors(&s, 41, t);
        let (fu, fl, _) = envelope_errors(&s, 81, t);
        order = order.min(cu.1 / fu.1).min(cl.1 / fl.1);
    }
    r.check(
        within && above,
        "envelopes within lattice tolerance, upper above",
    );
    r.check(
        order >= 2.0,
        format!("error ratio {order:.2} ≥ 2 under a 2× refinement"),
    );

    let s = GaussPair::new(None);
    let grid = s.lattice(31);
    let times: Vec<f64> = (0..11).map(|k| k as f64 / 10.0).collect();
    let (field, _) = characteristic_field(&s.pot, &s.prior, &grid, &times, newton()).unwrap();
    let res = hjb_residual(&field, &HamiltonianSpec::brunovsky(2), |z, t| {
        s.density(z, t)
    })
    .unwrap();
    r.check(
        res <= 1e-2,
        format!("HJB residual RMS {res:.1e} ≤ 1e-2 at 31²×11"),
    );
}

fn example2(r: &mut Report) {
    let start = Instant::now();
    let scn = Scenario::example2();
    let problem = scn.bridge_problem(Exec::default()).unwrap();
    r.check(
        problem.rho0.grid.shape() == [10, 10, 10] && problem.eps == 0.01,
        "10³, ε = 0.01",
    );
    let sol = match steer_pipeline(&problem) {
        Ok(s) => s,
        Err(e) => {
            r.check(false, format!("pipeline: {e}"));
            return;
        }
    };
    r.check(
        true,
        format!("completes in {} iterations", sol.diagnostics.iterations),
    );
    let d = &sol.diagnostics;
    r.check(
        d.newton_failures == 0,
        format!("τ⁻¹ failures {} of {}", d.newton_failures, d.newton_solves),
    );
    let (a, b) = endpoint_l1(&sol, &problem.rho0, &problem.rho1);
    r.check(
        a <= 5e-3 && b <= 5e-3,
        format!("endpoint L¹ {a:.1e} / {b:.1e} ≤ 5e-3"),
    );
    r.runtime(start, 600.0);
}

type Criterion = (usize, &'static str, fn(&mut Report));

const CRITERIA: [Criterion; 11] = [
    (1, "Gramian closed form", gramian),
    (2, "transition matrix laws", transition_laws),
    (3, "double integrator interpolation", double_integrator),
    (4, "Lie derivative identities", lie_identities),
    (5, "closed-loop equivalence", closed_loop),
    (6, "Example 1 bridge", example1),
    (7, "gauge invariance", gauge),
    (8, "ε-sweep", epsilon_sweep),
    (9, "transport path", transport),
    (10, "HJB suite", hjb_suite),
    (11, "Example 2 pipeline", example2),
];

fn main() -> ExitCode {
    let filter: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut bad = false;
    for (id, name, run) in CRITERIA {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let mut report = Report::default();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut report)));
        if let Err(p) = outcome {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            report.check(false, format!("panicked: {msg}"));
        }
        let pass = report.pass();
        let known = KNOWN_FAILURES.contains(&id);
        let tag = match (pass, known) {
            (true, false) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known)",
            (true, true) => "PASS (listed as known failure)",
        };
        bad |= pass == known;
        let detail: Vec<String> = report
            .checks
            .iter()
            .map(|(ok, s)| if *ok { s.clone() } else { format!("✗ {s}") })
            .collect();
        println!("criterion {id:>2} {tag}: {name}; {}", detail.join("; "));
    }
    if bad {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
