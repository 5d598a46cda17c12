//! Built-in control-affine systems, each with an admissible λ and the
//! resulting closed-form linearizing tuple.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lie::{ControlAffineSystem, FeedbackLinearizingTuple, Point, ScalarField, VectorField};

/// Smallest admissible `|1 + x₂|` for `flat3d`.
pub const FLAT3D_MARGIN: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct BuiltinSystem {
    pub name: &'static str,
    pub system: ControlAffineSystem,
    pub lambda: ScalarField,
    pub tuple: FeedbackLinearizingTuple,
    /// Axis-aligned box used for diagnostic sampling.
    pub sample_box: Vec<(f64, f64)>,
}

pub const NAMES: [&str; 3] = ["vdp2d", "flat3d", "brunovsky2"];

pub fn builtin(name: &str) -> Option<BuiltinSystem> {
    match name {
        "vdp2d" => Some(vdp2d()),
        "flat3d" => Some(flat3d()),
        "brunovsky2" => Some(brunovsky2()),
        _ => None,
    }
}

fn v(x: &[f64]) -> Point {
    DVector::from_row_slice(x)
}

fn m(n: usize, x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, x)
}

/// `ẋ₁ = x₂`, `ẋ₂ = −x₁ + ½(1 − x₁²)x₂ + u`.
fn vdp2d() -> BuiltinSystem {
    let f = VectorField::new(2, |x| v(&[x[1], -x[0] + 0.5 * (1.0 - x[0] * x[0]) * x[1]]))
        .with_jacobian(|x| {
            m(
                2,
                &[0.0, 1.0, -1.0 - x[0] * x[1], 0.5 * (1.0 - x[0] * x[0])],
            )
        });
    let g = VectorField::constant(v(&[0.0, 1.0]));
    let system = ControlAffineSystem::new(f, g).expect("matching dimensions");
    let lambda = ScalarField::new(2, |x| x[0]).with_gradient(|_| v(&[1.0, 0.0]));
    let tuple = FeedbackLinearizingTuple::from_maps(
        2,
        lambda.clone(),
        |x| x.clone(),
        |_| DMatrix::identity(2, 2),
        |x| x[0] - 0.5 * (1.0 - x[0] * x[0]) * x[1],
        |_| 1.0,
    );
    BuiltinSystem {
        name: "vdp2d",
        system,
        lambda,
        tuple,
        sample_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
    }
}

/// `ẋ₁ = x₃ − x₂u`, `ẋ₂ = −x₂ + u`, `ẋ₃ = −x₁ + x₂ − 2x₂² + 2x₂u`,
/// restricted to `x₂ > −1`.
fn flat3d() -> BuiltinSystem {
    let f = VectorField::new(3, |x| v(&[x[2], -x[1], -x[0] + x[1] - 2.0 * x[1] * x[1]]))
        .with_jacobian(|x| {
            m(
                3,
                &[0.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 1.0 - 4.0 * x[1], 0.0],
            )
        });
    let g = VectorField::new(3, |x| v(&[-x[1], 1.0, 2.0 * x[1]]))
        .with_jacobian(|_| m(3, &[0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]));
    let domain = |x: &Point| 1.0 + x[1] > FLAT3D_MARGIN;
    let system = ControlAffineSystem::new(f, g)
        .expect("matching dimensions")
        .with_domain(domain);
    let lambda =
        ScalarField::new(3, |x| x[0] + 0.5 * x[1] * x[1]).with_gradient(|x| v(&[1.0, x[1], 0.0]));
    let tuple = FeedbackLinearizingTuple::from_maps(
        3,
        lambda.clone(),
        |x| v(&[x[0] + 0.5 * x[1] * x[1], x[2] - x[1] * x[1], -x[0] + x[1]]),
        |x| m(3, &[1.0, x[1], 0.0, 0.0, -2.0 * x[1], 1.0, -1.0, 1.0, 0.0]),
        |x| (x[1] + x[2]) / (1.0 + x[1]),
        |x| 1.0 / (1.0 + x[1]),
    )
    .with_domain(domain);
    BuiltinSystem {
        name: "flat3d",
        system,
        lambda,
        tuple,
        sample_box: vec![(-1.0, 1.0), (-0.9, 1.0), (-1.0, 1.0)],
    }
}

/// The double integrator, already in normal form.
fn brunovsky2() -> BuiltinSystem {
    let f = VectorField::new(2, |x| v(&[x[1], 0.0])).with_jacobian(|_| m(2, &[0.0, 1.0, 0.0, 0.0]));
    let g = VectorField::constant(v(&[0.0, 1.0]));
    let system = ControlAffineSystem::new(f, g).expect("matching dimensions");
    let lambda = ScalarField::new(2, |x| x[0]).with_gradient(|_| v(&[1.0, 0.0]));
    let tuple = FeedbackLinearizingTuple::from_maps(
        2,
        lambda.clone(),
        |x| x.clone(),
        |_| DMatrix::identity(2, 2),
        |_| 0.0,
        |_| 1.0,
    );
    BuiltinSystem {
        name: "brunovsky2",
        system,
        lambda,
        tuple,
        sample_box: vec![(-1.0, 1.0), (-1.0, 1.0)],
    }
}

/// Deterministic uniform samples from the system's sample box.
pub fn sample_points(b: &BuiltinSystem, count: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            DVector::from_iterator(
                b.sample_box.len(),
                b.sample_box
                    .iter()
                    .map(|&(lo, hi)| rng.random_range(lo..hi)),
            )
        })
        .collect()
}
