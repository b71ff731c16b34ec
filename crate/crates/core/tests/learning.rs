mod common;

use varilearn::bilevel::{grid_search, learn, LearnOptions, ParamSet, TrainingSet};
use varilearn::fidelity::{synthesize_noise, NoiseSpec};
use varilearn::grid::{Boundary, GridSpec, ImageGrid};
use varilearn::huber::HuberParam;
use varilearn::metrics::interior_condition;
use varilearn::sampling::batch_gradient;
use varilearn::solver::{DenoiseProblem, ParamValue, Regularizer, SolverOptions};

fn lambda_only(template: &DenoiseProblem) -> ParamSet {
    let mut ps = ParamSet::from_problem(template);
    for a in &mut ps.alphas {
        a.frozen = true;
    }
    ps
}

fn lambda_grid(base: &ParamSet, lo: f64, hi: f64, n: usize) -> Vec<ParamSet> {
    (0..n)
        .map(|i| {
            let mut q = base.clone();
            q.lambdas[0].value = ParamValue::Scalar(lo * (hi / lo).powf(i as f64 / (n - 1) as f64));
            q
        })
        .collect()
}

fn piecewise_affine(n: usize) -> ImageGrid {
    let spec = GridSpec::new(n, n, Boundary::Neumann);
    ImageGrid::from_fn(spec, |x, y| {
        let (s, t) = (x as f64 / n as f64, y as f64 / n as f64);
        if s + 0.5 * t < 0.6 {
            0.2 + 0.5 * s
        } else {
            0.9 - 0.4 * t
        }
    })
}

#[test]
fn learned_weight_matches_grid_minimum() {
    let (f0, f) = common::noisy_pair(32, 3, &NoiseSpec::Gaussian { variance: 0.02 });
    let t = TrainingSet::single(f0, f.clone()).unwrap();
    let template = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, f, 50.0);
    let init = lambda_only(&template);
    let out = learn(&t, &template, &init, &LearnOptions::default()).unwrap();
    let lambda = out.params.lambdas[0].value.scalar().unwrap();
    let grid = grid_search(&t, &template, &lambda_grid(&init, 100.0, 1000.0, 60), &SolverOptions { tol: 1e-10, ..Default::default() }).unwrap();
    let best = grid.best.lambdas[0].value.scalar().unwrap();
    assert!(grid.best_index > 0 && grid.best_index < 59);
    assert!((lambda - best).abs() <= 0.02 * best, "bfgs {lambda} grid {best}");
    assert!(out.cost <= grid.table[grid.best_index].cost * (1.0 + 1e-9));
    assert!(out.iterations <= 20);
}

#[test]
fn history_obeys_the_line_search_and_descent() {
    let t = common::training_set(3, 24, 0.01, 40);
    let template = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, t.pairs[0].f.clone(), 30.0);
    let opts = LearnOptions::default();
    let out = learn(&t, &template, &lambda_only(&template), &opts).unwrap();
    for w in out.history.windows(2) {
        assert!(w[1].cost <= w[0].cost);
    }
    for rec in out.history.iter().skip(1) {
        assert!(rec.satisfies_armijo(opts.beta), "iteration {}", rec.iter);
        assert!(rec.slope < 0.0);
        assert!(rec.params.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn noise_free_pair_drives_the_weight_up() {
    let f0 = common::phantom(24, 8);
    let t = TrainingSet::single(f0.clone(), f0.clone()).unwrap();
    let template = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, f0.clone(), 10.0);
    let out = learn(&t, &template, &lambda_only(&template), &LearnOptions::default()).unwrap();
    assert!(out.params.lambdas[0].value.scalar().unwrap() > 100.0);
    let so = SolverOptions { tol: 1e-10, ..Default::default() };
    let costs: Vec<f64> = [1e2, 1e4, 1e6]
        .iter()
        .map(|&l| {
            let p = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, f0.clone(), l);
            let r = varilearn::solver::solve(&p, &so, None).unwrap();
            varilearn::adjoint::cost(&r.u, &f0).unwrap()
        })
        .collect();
    assert!(costs[0] > costs[1] && costs[1] > costs[2] && costs[2] < 1e-8, "{costs:?}");
}

#[test]
fn batch_gradient_of_the_whole_set_is_the_mean() {
    let t = common::training_set(4, 16, 0.01, 60);
    let template = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, t.pairs[0].f.clone(), 200.0);
    let ps = ParamSet::from_problem(&template);
    let so = SolverOptions { tol: 1e-10, ..Default::default() };
    let all = batch_gradient(&t, &[0, 1, 2, 3], &template, &ps, &so).unwrap();
    for c in 0..all.grad.len() {
        let m = all.per_pair.iter().map(|g| g[c]).sum::<f64>() / 4.0;
        assert!((m - all.grad[c]).abs() <= 1e-14 * m.abs().max(1e-300));
    }
    let one = batch_gradient(&t, &[2], &template, &ps, &so).unwrap();
    assert_eq!(one.grad, one.per_pair[0]);
    assert_eq!(one.per_pair[0], all.per_pair[2]);
}

#[test]
fn grid_search_table_is_deterministic_and_unimodal_near_its_minimum() {
    let (f0, f) = common::noisy_pair(24, 6, &NoiseSpec::Gaussian { variance: 0.02 });
    let t = TrainingSet::single(f0, f.clone()).unwrap();
    let template = DenoiseProblem::gaussian(Regularizer::TV { alpha: 1.0 }, f, 50.0);
    let grid = lambda_grid(&lambda_only(&template), 50.0, 2000.0, 30);
    let so = SolverOptions { tol: 1e-10, ..Default::default() };
    let a = grid_search(&t, &template, &grid, &so).unwrap();
    let b = grid_search(&t, &template, &grid, &so).unwrap();
    assert_eq!(a.table, b.table);
    let i = a.best_index;
    for j in i.saturating_sub(3).max(1)..(i + 4).min(a.table.len() - 1) {
        let c = a.table[j].cost;
        assert!(!(c > a.table[j - 1].cost + 1e-9 && c > a.table[j + 1].cost + 1e-9), "bump at {j}");
    }
    let single = grid_search(&t, &template, &grid[..1], &so).unwrap();
    assert_eq!(single.best_index, 0);
    assert_eq!(single.best, grid[0]);
}

fn regularisation_weights_only(template: &DenoiseProblem) -> ParamSet {
    let mut ps = ParamSet::from_problem(template);
    ps.lambdas[0].frozen = true;
    ps
}

#[test]
fn learned_regularisation_weights_are_interior() {
    let f0 = piecewise_affine(32);
    for (i, variance) in [0.005, 0.02, 0.05].into_iter().enumerate() {
        let f = synthesize_noise(&f0, &NoiseSpec::Gaussian { variance }, 30 + i as u64).unwrap();
        assert!(interior_condition(&f, &f0, HuberParam::INFINITE).unwrap());
        let t = TrainingSet::single(f0.clone(), f.clone()).unwrap();
        for reg in [Regularizer::TV { alpha: 1e-2 }, Regularizer::TGV2 { alpha1: 1e-2, alpha2: 1e-2 }] {
            let template = DenoiseProblem::gaussian(reg, f.clone(), 1.0);
            let out = learn(&t, &template, &regularisation_weights_only(&template), &LearnOptions::default()).unwrap();
            for a in &out.params.alphas {
                let v = a.value.scalar().unwrap();
                assert!(v > 1e-6, "{} {}: {v:e} at variance {variance}", reg.name(), a.name);
            }
        }
    }
}
