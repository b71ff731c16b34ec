mod common;

use varilearn::adjoint::{self, gradient_check, Which};
use varilearn::huber::HuberVariant;
use varilearn::solver::{ParamValue, SolverOptions};

fn opts() -> SolverOptions {
    SolverOptions { tol: 1e-11, max_iter: 200, ..Default::default() }
}

#[test]
fn adjoint_gradients_match_central_differences() {
    for (name, p, f0) in common::derivative_problems(32) {
        for w in Which::all(&p) {
            let c = gradient_check(&p, &f0, w, 1e-4, &opts()).unwrap();
            assert!(c.rel_error <= 1e-3, "{name} {w:?}: adjoint {:e} vs fd {:e}", c.adjoint, c.finite_difference);
        }
    }
}

#[test]
fn smooth_huber_variant_has_consistent_gradients() {
    let (_, p, f0) = common::derivative_problems(24).swap_remove(0);
    let p = p.with_variant(HuberVariant::Smooth);
    let so = SolverOptions { modified: false, ..opts() };
    for w in Which::all(&p) {
        let c = gradient_check(&p, &f0, w, 1e-4, &so).unwrap();
        assert!(c.rel_error <= 1e-3, "{w:?}: {:e} vs {:e}", c.adjoint, c.finite_difference);
    }
}

#[test]
fn spatial_gradient_integrates_to_the_scalar_gradient() {
    // Perturbing every pixel of λ by the same amount is the scalar derivative.
    let (_, p, f0) = common::derivative_problems(24).swap_remove(0);
    let (_, scalar) = adjoint::evaluate(&p, &f0, &opts(), None).unwrap();
    let mut q = p.clone();
    let lambda = p.fidelities[0].weight.scalar().unwrap();
    q.fidelities[0].weight = ParamValue::Field(varilearn::grid::ImageGrid::constant(p.data().spec, lambda));
    let (_, field) = adjoint::evaluate(&q, &f0, &opts(), None).unwrap();
    let ParamValue::Field(g) = &field.grad_lambda[0] else { panic!("expected a field gradient") };
    let total: f64 = g.values.iter().sum();
    let s = scalar.grad_lambda[0].scalar().unwrap();
    assert!((total - s).abs() <= 1e-8 * s.abs(), "{total:e} vs {s:e}");
    assert!((field.cost - scalar.cost).abs() <= 1e-12 * scalar.cost);
}

#[test]
fn cost_is_half_the_squared_grid_error() {
    let (_, p, f0) = common::derivative_problems(16).swap_remove(0);
    let (r, ev) = adjoint::evaluate(&p, &f0, &opts(), None).unwrap();
    let h2 = f0.h() * f0.h();
    let direct = 0.5 * h2 * r.u.values.iter().zip(&f0.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    assert!((ev.cost - direct).abs() <= 1e-14 * direct);
}
