//! One function per mode; each stages its artifacts and returns summary lines.

use std::time::Instant;

use nalgebra::DVector;
use serde_json::{json, Value};
use steer_core::brunovsky::{BrunovskyPair, LinearPrior};
use steer_core::density::{pullback_to_x, pushforward_diffeo, Grid, GridDensity};
use steer_core::hjb::{characteristic_field_masked, hjb_residual, HamiltonianSpec};
use steer_core::lie::{check_linearizable, NewtonOptions, Point};
use steer_core::par::Exec;
use steer_core::scenario::{Mode, Scenario};
use steer_core::steering::steer_pipeline;
use steer_core::systems;
use steer_core::transport::{
    barycentric_map, feasible_solution, hatted_plan, interpolate, monge_ampere_residual, MongeMap,
    TransportInterpolation, TransportPlan,
};
use steer_core::Result;

use crate::artifacts::{time_tag, Staging};

/// Seed of the diagnostic sample points.
const SAMPLE_SEED: u64 = 0x5eed;
const VERIFY_TOL: f64 = 1e-6;
/// Source nodes below this fraction of the peak do not shape the value lattice.
const CORE_FRACTION: f64 = 1e-3;

/// Summary of a completed run. A mode can complete and still fail its check;
/// its artifacts are kept either way.
pub struct Outcome {
    pub lines: Vec<String>,
    pub failure: Option<String>,
}

impl From<Vec<String>> for Outcome {
    fn from(lines: Vec<String>) -> Self {
        Self {
            lines,
            failure: None,
        }
    }
}

pub fn run_mode(scn: &Scenario, out: &Staging) -> Result<Outcome> {
    match scn.mode {
        Mode::Bridge => bridge(scn, out).map(Outcome::from),
        Mode::Ot => ot(scn, out).map(Outcome::from),
        Mode::Hjb => hjb(scn, out).map(Outcome::from),
        Mode::Verify => verify(scn, out),
    }
}

fn bridge(scn: &Scenario, out: &Staging) -> Result<Vec<String>> {
    let start = Instant::now();
    let problem = scn.bridge_problem(Exec::default())?;
    let sol = steer_pipeline(&problem)?;
    let wall = start.elapsed().as_secs_f64();

    out.convergence("convergence.csv", &sol.history)?;
    let mut snaps = Vec::new();
    for s in &sol.snapshots {
        let tag = time_tag(s.t);
        out.density(
            &format!("snapshots/sigma_{tag}"),
            &sol.z_grid,
            &s.sigma,
            "sigma_eps(z,t)",
        )?;
        out.field(&format!("snapshots/v_{tag}"), &sol.z_grid, &s.v)?;
        out.density(
            &format!("snapshots/rho_{tag}"),
            &sol.x_grid,
            &s.rho,
            "rho_eps(x,t)",
        )?;
        snaps.push(json!({"t": s.t, "sigma_mass": s.sigma_mass, "rho_mass": s.rho_mass}));
    }
    let d = &sol.diagnostics;
    if d.newton_failures > 0 {
        log::warn!(
            "{} of {} τ⁻¹ solves found no preimage; their mass is missing from ρ",
            d.newton_failures,
            d.newton_solves
        );
    }
    out.json(
        "run.json",
        &json!({
            "scenario": scn,
            "epsilon": sol.eps,
            "iterations": d.iterations,
            "residuals": [d.residuals.0, d.residuals.1],
            "endpoint_l1": [d.endpoint_l1.0, d.endpoint_l1.1],
            "wall_time_s": wall,
            "x_grid": grid_json(&sol.x_grid),
            "z_grid": grid_json(&sol.z_grid),
            "snapshots": snaps,
            "diagnostics": d,
        }),
    )?;
    Ok(vec![
        format!(
            "bridge: {} iterations, residuals {:.2e} / {:.2e}",
            d.iterations, d.residuals.0, d.residuals.1
        ),
        format!(
            "endpoint L1 {:.2e} / {:.2e}; τ⁻¹ failures {} of {}",
            d.endpoint_l1.0, d.endpoint_l1.1, d.newton_failures, d.newton_solves
        ),
        format!("wall time {wall:.1} s"),
    ])
}

fn grid_json(g: &Grid) -> Value {
    json!((0..g.dim())
        .map(|k| {
            let (lo, hi) = g.bounds(k);
            json!({"min": lo, "max": hi, "nodes": g.shape()[k]})
        })
        .collect::<Vec<_>>())
}

/// Quadratic transport between the Brunovsky-coordinate marginals.
struct OtChain {
    n: usize,
    x_grid: Grid,
    sigma0: GridDensity,
    plan: TransportPlan,
    map: MongeMap,
    interp: TransportInterpolation,
    ot_json: Value,
}

fn ot_chain(scn: &Scenario) -> Result<OtChain> {
    let tuple = scn.tuple()?;
    let (rho0, rho1) = scn.marginals()?;
    let n = tuple.n;
    let z_grid = match &scn.z_grid {
        Some(g) => g.build()?,
        None => {
            let pts: Vec<Point> = [&rho0, &rho1]
                .iter()
                .flat_map(|r| r.support().into_iter().map(|i| tuple.tau(&r.grid.node(i))))
                .collect();
            Grid::bounding(&pts, rho0.grid.shape(), 0.5)?
        }
    };
    let sigma0 = pushforward_diffeo(&rho0, &tuple, &z_grid, true)
        .map_err(|e| e.at_stage("ρ→σ pushforward"))?
        .density;
    let sigma1 = pushforward_diffeo(&rho1, &tuple, &z_grid, true)
        .map_err(|e| e.at_stage("ρ→σ pushforward"))?
        .density;
    let prior = LinearPrior::new(n)?;
    let plan = hatted_plan(
        &sigma0,
        &sigma1,
        &prior,
        z_grid.shape(),
        scn.ot.eta,
        &scn.fixed_point_options(Exec::default()),
    )
    .map_err(|e| e.at_stage("σ̂→π̂ transport plan"))?;
    let map = barycentric_map(&plan);
    let interp = interpolate(&map, n)?;
    let ma = monge_ampere_residual(&map, &plan.sigma0, &plan.sigma1).ok();
    let cost = interp.control_cost(&sigma0, 16)?;
    let ot_json = json!({
        "eta": scn.ot.eta,
        "iterations": plan.factors.iterations,
        "marginal_residuals": [plan.marginal_residuals.0, plan.marginal_residuals.1],
        "monge_ampere_residual": ma,
        "control_cost": cost,
        "z_grid": grid_json(&z_grid),
    });
    Ok(OtChain {
        n,
        x_grid: rho0.grid.clone(),
        sigma0,
        plan,
        map,
        interp,
        ot_json,
    })
}

/// Bounding box of `T_t` applied to `points` over `times`.
fn image_box(
    interp: &TransportInterpolation,
    points: &[Point],
    times: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = interp.prior.n;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for &t in times {
        let slice = interp.at(t)?;
        for p in points {
            let y = slice.apply(p);
            for k in 0..d {
                lo[k] = lo[k].min(y[k]);
                hi[k] = hi[k].max(y[k]);
            }
        }
    }
    Ok((lo, hi))
}

fn support_points(d: &GridDensity, fraction: f64) -> Vec<Point> {
    let cut = fraction * d.max_value();
    (0..d.grid.len())
        .filter(|&i| d.values[i] > cut)
        .map(|i| d.grid.node(i))
        .collect()
}

fn ot(scn: &Scenario, out: &Staging) -> Result<Vec<String>> {
    let start = Instant::now();
    let chain = ot_chain(scn)?;
    let tuple = scn.tuple()?;
    let pts = support_points(&chain.sigma0, 0.0);
    let (lo, hi) = image_box(&chain.interp, &pts, &scn.snapshots)?;
    let target = chain.sigma0.grid.extended_to(&lo, &hi)?;
    out.convergence("ot/convergence.csv", &chain.plan.factors.history)?;
    let mut snaps = Vec::new();
    for &t in &scn.snapshots {
        let tag = time_tag(t);
        let fs = feasible_solution(&chain.interp, &chain.sigma0, t, &target)?;
        out.density(
            &format!("ot/sigma_{tag}"),
            &target,
            &fs.sigma.values,
            "sigma_tilde(z,t)",
        )?;
        out.field(&format!("ot/v_{tag}"), &target, &fs.v)?;
        let rho = pullback_to_x(&fs.sigma, &tuple, &chain.x_grid, false)?;
        out.density(
            &format!("ot/rho_{tag}"),
            &chain.x_grid,
            &rho.density.values,
            "rho_tilde(x,t)",
        )?;
        snaps.push(json!({
            "t": t,
            "sigma_mass": fs.sigma.total_mass(),
            "rho_mass": rho.raw_mass,
            "lost_mass": fs.lost_mass,
            "inverse_failures": fs.inverse_failures,
        }));
    }
    let wall = start.elapsed().as_secs_f64();
    let mut record = chain.ot_json.clone();
    record["scenario"] = json!(scn);
    record["target_grid"] = grid_json(&target);
    record["snapshots"] = json!(snaps);
    record["wall_time_s"] = json!(wall);
    out.json("ot/run.json", &record)?;
    Ok(vec![
        format!(
            "ot: η = {}, {} iterations, control cost {:.4e}",
            scn.ot.eta,
            chain.plan.factors.iterations,
            record["control_cost"].as_f64().unwrap_or(f64::NAN)
        ),
        format!("wall time {wall:.1} s"),
    ])
}

fn hjb(scn: &Scenario, out: &Staging) -> Result<Vec<String>> {
    let start = Instant::now();
    let chain = ot_chain(scn)?;
    let nt = scn.hjb.times;
    let times: Vec<f64> = (0..nt).map(|k| k as f64 / (nt - 1) as f64).collect();
    let core = support_points(&chain.sigma0, CORE_FRACTION);
    let (lo, hi) = image_box(&chain.interp, &core, &times)?;
    let bounds: Vec<(f64, f64)> = lo.into_iter().zip(hi).collect();
    let lattice = Grid::uniform(&bounds, chain.sigma0.grid.shape())?;
    let opts = NewtonOptions {
        tol: 1e-11,
        max_iter: 80,
    };
    let (field, failures, margin) =
        characteristic_field_masked(&chain.map, &chain.interp.prior, &lattice, &times, opts)
            .map_err(|e| e.at_stage("ψ̃ characteristics"))?;
    if failures > 0 {
        log::warn!(
            "{failures} of {} lattice values have no characteristic foot",
            field.values.len()
        );
    }

    // Residual weighted by the transported density at each lattice time.
    let weights: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| {
            feasible_solution(&chain.interp, &chain.sigma0, t, &lattice).map(|f| f.sigma.values)
        })
        .collect::<Result<_>>()?;
    let spec = HamiltonianSpec::brunovsky(chain.n);
    let residual = hjb_residual(&field, &spec, |z, t| {
        let k = times
            .iter()
            .position(|&s| (s - t).abs() < 1e-12)
            .unwrap_or(0);
        lattice.interpolate(&weights[k], z.as_slice())
    })
    .ok();

    for (k, &t) in times.iter().enumerate() {
        out.field(
            &format!("hjb/psi_{}", time_tag(t)),
            &lattice,
            field.slice(k),
        )?;
    }
    let wall = start.elapsed().as_secs_f64();
    out.json(
        "hjb/run.json",
        &json!({
            "scenario": scn,
            "transport": chain.ot_json,
            "lattice": grid_json(&lattice),
            "times": times,
            "provenance": field.provenance,
            "masked_values": failures,
            "min_spectral_margin": margin,
            "residual_rms": residual,
            "wall_time_s": wall,
        }),
    )?;
    Ok(vec![
        format!(
            "hjb: {} lattice values, {failures} masked, min spectral margin {margin:.3e}",
            field.values.len()
        ),
        match residual {
            Some(r) => format!("HJB residual RMS {r:.3e}"),
            None => "HJB residual unavailable on this lattice".into(),
        },
        format!("wall time {wall:.1} s"),
    ])
}

fn verify(scn: &Scenario, out: &Staging) -> Result<Outcome> {
    let sys = scn.system()?;
    let tuple = scn.tuple()?;
    let n = sys.system.n;
    let grid = scn.x_grid.build()?;
    let center = DVector::from_iterator(
        n,
        (0..n).map(|k| {
            let (lo, hi) = grid.bounds(k);
            0.5 * (lo + hi)
        }),
    );
    let samples: Vec<Point> = systems::sample_points(&sys, 200, SAMPLE_SEED)
        .into_iter()
        .filter(|x| sys.system.in_domain(x))
        .collect();
    let report = check_linearizable(&sys.system, &center, &samples, VERIFY_TOL)?;

    // ∇τ·(f + g(α + βv)) must equal Aτ + bv.
    let pair = BrunovskyPair::new(n)?;
    let mut closed_loop: f64 = 0.0;
    let mut min_beta = f64::INFINITY;
    for x in &samples {
        let z = tuple.tau(x);
        let jac = tuple.jacobian_tau(x);
        min_beta = min_beta.min(tuple.beta(x).abs());
        for v in [-1.0, 0.0, 1.0] {
            let u = tuple.alpha(x) + tuple.beta(x) * v;
            let lhs = &jac * sys.system.rhs(x, u);
            let rhs = &pair.a * &z + &pair.b * v;
            closed_loop = closed_loop.max((lhs - rhs).amax());
        }
    }
    let pass = report.pass && closed_loop <= VERIFY_TOL;
    out.json(
        "verify.json",
        &json!({
            "system": sys.name,
            "reference_point": center.as_slice(),
            "samples": samples.len(),
            "rank": report.rank,
            "singular_values": report.singular_values,
            "involutivity_residual": report.involutivity_residual,
            "closed_loop_residual": closed_loop,
            "min_abs_beta": min_beta,
            "pass": pass,
        }),
    )?;
    let lines = vec![
        format!("{}: {report}", sys.name),
        format!(
            "closed-loop residual {closed_loop:.3e} over {} samples",
            samples.len()
        ),
    ];
    Ok(Outcome {
        lines,
        failure: (!pass).then(|| format!("{} is not verified as feedback linearizable", sys.name)),
    })
}
