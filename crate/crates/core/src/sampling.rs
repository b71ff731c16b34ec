//! Dynamic sampling: BFGS on a growing random subset of the training set.
//!
//! After every accepted step the sample variance of the per-pair gradients is
//! tested against `θ²‖∇F_S‖²`. A passing test draws a fresh sample of the
//! same size; a failing one enlarges the sample to the smallest size that
//! would pass at the current variance estimate.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::Which;
use crate::bilevel::{self, LearnOptions, LearnOutcome, ParamSet, SamplePolicy, TrainingSet};
use crate::error::{Error, Result};
use crate::grid::dot;
use crate::solver::{DenoiseProblem, SolverOptions};

/// The current subset and the generator that draws the next one.
#[derive(Debug, Clone)]
pub struct SampleState {
    /// Sorted pair indices.
    pub indices: Vec<usize>,
    pub theta: f64,
    pub rng: ChaCha8Rng,
}

impl SampleState {
    /// A random initial sample of `size` out of `total` pairs.
    pub fn new(total: usize, size: usize, theta: f64, seed: u64) -> Result<Self> {
        if size == 0 || size > total {
            return Err(Error::InvalidInput(format!("initial sample size {size} not in 1..={total}")));
        }
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(Error::InvalidInput("theta must be finite and >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices = draw(&mut rng, total, size);
        Ok(SampleState { indices, theta, rng })
    }
}

fn draw(rng: &mut ChaCha8Rng, total: usize, size: usize) -> Vec<usize> {
    if size == total {
        return (0..total).collect();
    }
    let mut v = index::sample(rng, total, size).into_vec();
    v.sort_unstable();
    v
}

/// Outcome of the variance test at one iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceTest {
    /// Estimated variance of the batch gradient.
    pub lhs: f64,
    /// `θ²‖∇F_S‖²`.
    pub rhs: f64,
    pub pass: bool,
    /// Summed per-component sample variance (divisor `|S| − 1`).
    pub sample_variance: f64,
}

/// Summed sample variance of per-pair gradient vectors.
pub fn sample_variance(grads: &[Vec<f64>]) -> f64 {
    let s = grads.len();
    if s < 2 {
        return f64::NAN;
    }
    let d = grads[0].len();
    let mut total = 0.0;
    for c in 0..d {
        let m = grads.iter().map(|g| g[c]).sum::<f64>() / s as f64;
        total += grads.iter().map(|g| (g[c] - m).powi(2)).sum::<f64>() / (s - 1) as f64;
    }
    total
}

/// Checks `Var_S·(K − |S|)/(|S|(K − 1)) ≤ θ²‖g‖²`.
///
/// With `K = 1` (or `|S| = K`) the correction factor vanishes and the test
/// passes; a single-element sample of a larger set always fails.
pub fn variance_test(grads: &[Vec<f64>], batch_grad: &[f64], theta: f64, total: usize, size: usize) -> VarianceTest {
    let rhs = theta * theta * dot(batch_grad, batch_grad);
    if total <= 1 || size >= total {
        return VarianceTest { lhs: 0.0, rhs, pass: 0.0 <= rhs, sample_variance: sample_variance(grads) };
    }
    if size < 2 {
        return VarianceTest { lhs: f64::INFINITY, rhs, pass: false, sample_variance: f64::NAN };
    }
    let v = sample_variance(grads);
    let lhs = v * (total - size) as f64 / (size as f64 * (total - 1) as f64);
    VarianceTest { lhs, rhs, pass: lhs <= rhs, sample_variance: v }
}

/// Smallest sample size that passes the test at the current variance
/// estimate, and at least one more than the current size.
pub fn target_size(variance: f64, grad_norm2: f64, theta: f64, total: usize, size: usize) -> usize {
    if !(variance.is_finite()) || size < 2 {
        return (size + 1).max(2).min(total);
    }
    let needed = if variance <= 0.0 {
        size + 1
    } else {
        let rho = theta * theta * grad_norm2 * (total - 1) as f64 / variance;
        let x = total as f64 / (1.0 + rho);
        (x - 1e-12 * x).ceil() as usize
    };
    needed.max(size + 1).min(total)
}

/// Keeps the current pairs and adds randomly chosen new ones up to
/// [`target_size`].
pub fn augment_sample(state: &SampleState, grads: &[Vec<f64>], batch_grad: &[f64], total: usize) -> SampleState {
    let size = state.indices.len();
    let target = target_size(sample_variance(grads), dot(batch_grad, batch_grad), state.theta, total, size);
    let mut next = state.clone();
    let rest: Vec<usize> = (0..total).filter(|i| state.indices.binary_search(i).is_err()).collect();
    let add = target - size;
    let chosen = if add >= rest.len() { rest.clone() } else { draw(&mut next.rng, rest.len(), add).into_iter().map(|i| rest[i]).collect() };
    next.indices.extend(chosen);
    next.indices.sort_unstable();
    next
}

/// A fresh sample of the current size.
pub(crate) fn resample(state: &mut SampleState, total: usize) -> Vec<usize> {
    let size = state.indices.len();
    draw(&mut state.rng, total, size)
}

/// Batch cost and gradient over `indices`, in the original parameter space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchGradient {
    pub cost: f64,
    pub grad: Vec<f64>,
    pub per_pair: Vec<Vec<f64>>,
    pub free: Vec<Which>,
}

/// `F_S` and `∇F_S` at `params` from cold-started solves, for inspection.
pub fn batch_gradient(
    training: &TrainingSet,
    indices: &[usize],
    template: &DenoiseProblem,
    params: &ParamSet,
    opts: &SolverOptions,
) -> Result<BatchGradient> {
    if indices.is_empty() || indices.iter().any(|&i| i >= training.len()) {
        return Err(Error::InvalidInput("sample indices out of range".into()));
    }
    params.validate()?;
    let free = params.free();
    let p = params.apply(template)?;
    let mut per_pair = Vec::with_capacity(indices.len());
    let mut total = 0.0;
    for &i in indices {
        let pair = &training.pairs[i];
        let pp = p.clone().with_data(&pair.f);
        let (_, ev) = crate::adjoint::evaluate(&pp, &pair.f0, opts, None)
            .map_err(|e| Error::Pair { pair: i, iteration: 0, source: Box::new(e) })?;
        total += ev.cost;
        per_pair.push(
            free.iter()
                .map(|w| w.of(&ev).ok_or_else(|| Error::InvalidInput("spatial weights have no scalar gradient".into())))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    let s = indices.len() as f64;
    let d = free.len();
    let grad = (0..d).map(|c| per_pair.iter().map(|g| g[c]).sum::<f64>() / s).collect();
    Ok(BatchGradient { cost: total / s, grad, per_pair, free })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicOptions {
    pub theta: f64,
    pub initial_size: usize,
    pub seed: u64,
}

impl Default for DynamicOptions {
    fn default() -> Self {
        DynamicOptions { theta: 0.5, initial_size: 1, seed: 0 }
    }
}

/// BFGS on dynamically sized samples; the run ends with one full-set cost
/// evaluation at the returned parameters.
pub fn dynamic_learn(
    training: &TrainingSet,
    template: &DenoiseProblem,
    init: &ParamSet,
    opts: &LearnOptions,
    dynamic: &DynamicOptions,
) -> Result<LearnOutcome> {
    let state = SampleState::new(training.len(), dynamic.initial_size, dynamic.theta, dynamic.seed)?;
    bilevel::run(training, template, init, opts, SamplePolicy::Dynamic(state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_variance() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = variance_test(&g, &[0.5, 0.5], 1.0, 4, 2);
        assert!((t.lhs - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.rhs - 0.5).abs() < 1e-15);
        assert!(t.pass);
        let t = variance_test(&g, &[0.5, 0.5], 0.5, 4, 2);
        assert!(!t.pass);
    }

    #[test]
    fn single_pair_set_always_passes() {
        let t = variance_test(&[vec![3.0]], &[3.0], 0.0, 1, 1);
        assert!(t.pass);
        let t = variance_test(&[vec![3.0]], &[3.0], 0.9, 5, 1);
        assert!(!t.pass);
    }

    #[test]
    fn zero_theta_grows_to_full_set() {
        let g = vec![vec![1.0], vec![2.0]];
        assert_eq!(target_size(sample_variance(&g), 2.25, 0.0, 10, 2), 10);
    }

    #[test]
    fn augmentation_keeps_old_pairs() {
        let s = SampleState::new(20, 3, 0.3, 7).unwrap();
        let g = vec![vec![1.0, 0.2], vec![-1.0, 0.1], vec![0.5, 0.0]];
        let n = augment_sample(&s, &g, &[0.1666, 0.1], 20);
        assert!(n.indices.len() > 3);
        assert!(s.indices.iter().all(|i| n.indices.contains(i)));
        assert!(n.indices.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn target_size_passes_the_test(
            v in 1e-6f64..10.0, g2 in 1e-6f64..10.0, theta in 0.01f64..2.0,
            total in 3usize..200, s0 in 2usize..50
        ) {
            let size = s0.min(total - 1);
            let t = target_size(v, g2, theta, total, size);
            prop_assert!(t > size && t <= total);
            let lhs = v * (total - t) as f64 / (t as f64 * (total - 1) as f64);
            prop_assert!(lhs <= theta * theta * g2 * (1.0 + 1e-9));
            if t > size + 1 {
                let tm = t - 1;
                let lhs = v * (total - tm) as f64 / (tm as f64 * (total - 1) as f64);
                prop_assert!(lhs > theta * theta * g2 * (1.0 - 1e-9));
            }
        }

        #[test]
        fn samples_are_sorted_distinct_and_in_range(total in 1usize..100, frac in 0.0f64..1.0, seed in 0u64..1000) {
            let size = ((total as f64 * frac) as usize).clamp(1, total);
            let s = SampleState::new(total, size, 0.5, seed).unwrap();
            prop_assert_eq!(s.indices.len(), size);
            prop_assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.indices.iter().all(|&i| i < total));
        }
    }
}
