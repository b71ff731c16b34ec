//! Adjoint states and reduced gradients of `J(u) = ½‖u − f₀‖²` (h²-scaled).
//!
//! With `R(x; θ) = ∇ₓE / h²` and `H = ∂R/∂x` at the lower-level solution,
//! the adjoint solves `Hᵀ p = −(u − f₀)` (zero on auxiliary blocks) and
//! `dJ/dθ = h² ⟨p, ∂R/∂θ⟩`. For a weight `θ` multiplying a Huber term
//! `Σ ψ(|A x − b|)` this is `h² Σₖ ⟨h_γ(z)ₖ, (A p)ₖ⟩`, for a smooth fidelity
//! `Σ φ(B x)` it is `h² Σₖ φ'(yₖ) (B p)ₖ`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::solver::{self, DenoiseProblem, DenoiseResult, Model, ParamId, ParamValue, SolverOptions};
use crate::sparse::{backward_error, CsrMatrix, LinearSolver};

/// Upper-level cost `½ Σ (u − f₀)² h²`.
pub fn cost(u: &ImageGrid, f0: &ImageGrid) -> Result<f64> {
    u.check_same_shape(f0)?;
    let s: f64 = u.values.iter().zip(&f0.values).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * s * u.spec.cell_area())
}

/// Adjoint state: the image block `p` and the full stacked vector.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub p: ImageGrid,
    pub full: Vec<f64>,
    /// Normwise backward error of the adjoint solve.
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReducedEval {
    pub cost: f64,
    /// One entry per fidelity, shaped like its weight.
    pub grad_lambda: Vec<ParamValue>,
    /// One entry per regulariser weight.
    pub grad_alpha: Vec<ParamValue>,
    #[serde(skip)]
    pub adjoint: ImageGrid,
}

/// Newton matrix of the lower-level problem at `result`, with duals taken
/// consistent with the primal (`q = α h_γ(A x)`). At such a point the
/// dual-projected matrix coincides with the plain Newton derivative.
pub fn linearization(problem: &DenoiseProblem, result: &DenoiseResult) -> Result<CsrMatrix> {
    let model = Model::build(problem)?;
    check_layout(&model, result)?;
    let x = &result.state.x;
    let lin = model.linearize(x, None);
    let j = model.jacobian(x, &lin);
    let projected = model.linearize(x, Some(&result.state.q));
    let mut gap: f64 = 0.0;
    let mut size: f64 = 0.0;
    for (a, b) in lin.iter().zip(&projected) {
        for (ba, bb) in a.blocks.iter().zip(&b.blocks) {
            for (x, y) in ba.iter().zip(bb) {
                gap = gap.max((x - y).abs());
                size = size.max(x.abs());
            }
        }
    }
    if gap > 1e-6 * size.max(1.0) {
        log::warn!("dual-projected Newton blocks differ from the consistent ones by {gap:e} at exit");
    }
    Ok(j)
}

fn check_layout(model: &Model, result: &DenoiseResult) -> Result<()> {
    if !result.state.compatible(model) {
        return Err(Error::InvalidInput("result does not belong to this problem".into()));
    }
    Ok(())
}

/// Solves the adjoint equation at a converged lower-level solution.
pub fn solve_adjoint(result: &DenoiseResult, problem: &DenoiseProblem, f0: &ImageGrid) -> Result<AdjointState> {
    result.u.check_same_shape(f0)?;
    if !result.converged {
        log::warn!("adjoint requested at an unconverged lower-level iterate");
    }
    let j = linearization(problem, result)?;
    let n = result.u.len();
    let mut rhs = vec![0.0; j.nrows];
    for k in 0..n {
        rhs[k] = -(result.u.values[k] - f0.values[k]);
    }
    let mut solver = LinearSolver::new();
    let full = solver
        .solve(&j, &rhs, true)
        .map_err(|e| Error::SingularSystem { iteration: result.iterations, detail: format!("adjoint: {e}") })?;
    let r: Vec<f64> = j.transpose_matvec(&full).iter().zip(&rhs).map(|(a, b)| b - a).collect();
    let residual = backward_error(j.transpose().norm_inf(), &full, &rhs, &r);
    Ok(AdjointState { p: ImageGrid { spec: result.u.spec, values: full[..n].to_vec() }, full, residual })
}

/// Reduced cost and gradient from a solved adjoint.
pub fn reduced_gradient(
    result: &DenoiseResult,
    adjoint: &AdjointState,
    problem: &DenoiseProblem,
    f0: &ImageGrid,
) -> Result<ReducedEval> {
    let model = Model::build(problem)?;
    check_layout(&model, result)?;
    let fields = model.param_fields(&result.state.x, &adjoint.full)?;
    let spec = result.u.spec;
    let shape = |weight: &ParamValue, id: ParamId| -> ParamValue {
        let f = fields.iter().find(|(i, _)| *i == id).map(|(_, f)| f.clone()).unwrap_or_else(|| vec![0.0; spec.len()]);
        match weight {
            ParamValue::Scalar(_) => ParamValue::Scalar(f.iter().sum()),
            ParamValue::Field(_) => ParamValue::Field(ImageGrid { spec, values: f }),
        }
    };
    let grad_lambda = problem.fidelities.iter().enumerate().map(|(i, fid)| shape(&fid.weight, ParamId::Lambda(i))).collect();
    let grad_alpha = (0..problem.regularizer.alphas().len())
        .map(|j| shape(&ParamValue::Scalar(0.0), ParamId::Alpha(j)))
        .collect();
    Ok(ReducedEval { cost: cost(&result.u, f0)?, grad_lambda, grad_alpha, adjoint: adjoint.p.clone() })
}

/// Lower-level solve, adjoint and gradient in one call.
pub fn evaluate(
    problem: &DenoiseProblem,
    f0: &ImageGrid,
    opts: &SolverOptions,
    warm_start: Option<&DenoiseResult>,
) -> Result<(DenoiseResult, ReducedEval)> {
    let result = solver::solve(problem, opts, warm_start)?;
    let adj = solve_adjoint(&result, problem, f0)?;
    let eval = reduced_gradient(&result, &adj, problem, f0)?;
    Ok((result, eval))
}

/// A scalar weight of a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Which {
    Lambda(usize),
    Alpha(usize),
}

impl Which {
    pub fn get(self, problem: &DenoiseProblem) -> Option<f64> {
        match self {
            Which::Lambda(i) => problem.fidelities.get(i)?.weight.scalar(),
            Which::Alpha(j) => problem.regularizer.alphas().get(j).copied(),
        }
    }

    pub fn set(self, problem: &DenoiseProblem, value: f64) -> Result<DenoiseProblem> {
        let mut p = problem.clone();
        match self {
            Which::Lambda(i) => {
                let fid = p.fidelities.get_mut(i).ok_or_else(|| Error::InvalidInput(format!("no fidelity {i}")))?;
                fid.weight = ParamValue::Scalar(value);
            }
            Which::Alpha(j) => {
                let mut a = p.regularizer.alphas();
                if j >= a.len() {
                    return Err(Error::InvalidInput(format!("no regulariser weight {j}")));
                }
                a[j] = value;
                p.regularizer = p.regularizer.with_alphas(&a)?;
            }
        }
        Ok(p)
    }

    pub fn of(self, eval: &ReducedEval) -> Option<f64> {
        match self {
            Which::Lambda(i) => eval.grad_lambda.get(i)?.scalar(),
            Which::Alpha(j) => eval.grad_alpha.get(j)?.scalar(),
        }
    }

    /// Every scalar weight of `problem`.
    pub fn all(problem: &DenoiseProblem) -> Vec<Which> {
        let mut v: Vec<Which> = (0..problem.fidelities.len())
            .filter(|&i| problem.fidelities[i].weight.scalar().is_some())
            .map(Which::Lambda)
            .collect();
        v.extend((0..problem.regularizer.alphas().len()).map(Which::Alpha));
        v
    }
}

/// Adjoint derivative against a central finite difference.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub which: Which,
    pub value: f64,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

/// Compares the adjoint derivative with respect to `which` with a central
/// difference in the relative step `rel_step`, through full re-solves.
pub fn gradient_check(
    problem: &DenoiseProblem,
    f0: &ImageGrid,
    which: Which,
    rel_step: f64,
    opts: &SolverOptions,
) -> Result<GradCheck> {
    let value = which.get(problem).ok_or_else(|| Error::InvalidInput("parameter is not a scalar".into()))?;
    let (base, eval) = evaluate(problem, f0, opts, None)?;
    let adjoint = which.of(&eval).expect("scalar parameter");
    let step = rel_step * value.abs().max(1e-12);
    let side = |s: f64| -> Result<f64> {
        let p = which.set(problem, value + s * step)?;
        let r = solver::solve(&p, opts, Some(&base))?;
        cost(&r.u, f0)
    };
    let fd = (side(1.0)? - side(-1.0)?) / (2.0 * step);
    let rel_error = (adjoint - fd).abs() / fd.abs().max(adjoint.abs()).max(f64::MIN_POSITIVE);
    Ok(GradCheck { which, value, adjoint, finite_difference: fd, rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Boundary, GridSpec};
    use crate::solver::Regularizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(n: usize, seed: u64) -> (ImageGrid, ImageGrid) {
        let spec = GridSpec::new(n, n, Boundary::Neumann);
        let f0 = ImageGrid::from_fn(spec, |x, y| if x + y < n { 0.7 } else { 0.2 });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..spec.len()).map(|_| 0.2 * (rng.random::<f64>() - 0.5)).collect();
        let f = ImageGrid { spec, values: f0.values.iter().zip(&noise).map(|(a, b)| a + b).collect() };
        (f0, f)
    }

    fn opts() -> SolverOptions {
        SolverOptions { tol: 1e-11, ..Default::default() }
    }

    #[test]
    fn exact_reconstruction_has_zero_adjoint() {
        let (f0, _) = pair(8, 1);
        let p = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, f0.clone(), 10.0);
        let r = solver::solve(&p, &opts(), None).unwrap();
        let adj = solve_adjoint(&r, &p, &r.u).unwrap();
        assert!(adj.full.iter().all(|&v| v == 0.0));
        let g = reduced_gradient(&r, &adj, &p, &r.u).unwrap();
        assert_eq!(g.grad_lambda[0].scalar(), Some(0.0));
        assert_eq!(g.grad_alpha[0].scalar(), Some(0.0));
        let _ = f0;
    }

    #[test]
    fn adjoint_residual_is_small() {
        let (f0, f) = pair(16, 2);
        let p = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, f, 200.0);
        let r = solver::solve(&p, &opts(), None).unwrap();
        let adj = solve_adjoint(&r, &p, &f0).unwrap();
        assert!(adj.residual <= 1e-10, "{}", adj.residual);
    }

    #[test]
    fn adjoint_matrix_is_the_transpose_of_the_linearisation() {
        let (_, f) = pair(10, 3);
        let p = DenoiseProblem::gaussian(Regularizer::TGV2 { alpha1: 1.0, alpha2: 2.0 }, f, 200.0);
        let r = solver::solve(&p, &opts(), None).unwrap();
        let j = linearization(&p, &r).unwrap();
        let jt = j.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x: Vec<f64> = (0..j.ncols).map(|_| rng.random::<f64>() - 0.5).collect();
            let y: Vec<f64> = (0..j.nrows).map(|_| rng.random::<f64>() - 0.5).collect();
            let a: f64 = j.matvec(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
            let b: f64 = x.iter().zip(jt.matvec(&y)).map(|(a, b)| a * b).sum();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn spatial_gradient_sums_to_scalar_gradient() {
        let (f0, f) = pair(12, 5);
        let p = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, f, 150.0);
        let (_, scalar) = evaluate(&p, &f0, &opts(), None).unwrap();
        let mut ps = p.clone();
        ps.fidelities[0].weight = ParamValue::Field(ImageGrid::constant(f0.spec, 150.0));
        let (_, field) = evaluate(&ps, &f0, &opts(), None).unwrap();
        let s = scalar.grad_lambda[0].scalar().unwrap();
        let ParamValue::Field(g) = &field.grad_lambda[0] else { panic!("expected a field") };
        let total: f64 = g.values.iter().sum();
        assert!((total - s).abs() <= 1e-12 * s.abs().max(1e-300), "{total} vs {s}");
    }

    #[test]
    fn small_gradient_step_decreases_cost() {
        for seed in 0..3 {
            let (f0, f) = pair(12, 10 + seed);
            let p = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, f, 80.0);
            let (_, e) = evaluate(&p, &f0, &opts(), None).unwrap();
            let g = e.grad_lambda[0].scalar().unwrap();
            let t = 1e-3 / g.abs() * 80.0;
            let q = Which::Lambda(0).set(&p, 80.0 - t * g).unwrap();
            let r = solver::solve(&q, &opts(), None).unwrap();
            assert!(cost(&r.u, &f0).unwrap() < e.cost);
        }
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let (f0, f) = pair(16, 6);
        let p = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, f, 300.0).with_mu(1e-2);
        for w in Which::all(&p) {
            let c = gradient_check(&p, &f0, w, 1e-4, &opts()).unwrap();
            assert!(c.rel_error <= 1e-3, "{c:?}");
        }
    }
}
