//! Synthetic images shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varilearn::bilevel::{TrainingPair, TrainingSet};
use varilearn::fidelity::{synthesize_noise, NoiseSpec};
use varilearn::grid::{Boundary, GridSpec, ImageGrid};
use varilearn::huber::HuberParam;
use varilearn::solver::{DenoiseProblem, Positivity, Regularizer};

/// Piecewise-constant phantom: a background with random rectangles and disks.
pub fn phantom(n: usize, seed: u64) -> ImageGrid {
    let spec = GridSpec::new(n, n, Boundary::Neumann);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageGrid::constant(spec, rng.random_range(0.15..0.35));
    for _ in 0..6 {
        let v = rng.random_range(0.1..0.9);
        let cx = rng.random_range(0.1..0.9) * n as f64;
        let cy = rng.random_range(0.1..0.9) * n as f64;
        let r = rng.random_range(0.08..0.25) * n as f64;
        let disk = rng.random_bool(0.5);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disk { dx * dx + dy * dy < r * r } else { dx.abs() < r && dy.abs() < 0.6 * r };
                if inside {
                    img.values[y * n + x] = v;
                }
            }
        }
    }
    img
}

pub fn noisy_pair(n: usize, seed: u64, noise: &NoiseSpec) -> (ImageGrid, ImageGrid) {
    let f0 = phantom(n, seed);
    let f = synthesize_noise(&f0, noise, seed.wrapping_mul(7919).wrapping_add(1)).unwrap();
    (f0, f)
}

pub fn training_set(k: usize, n: usize, variance: f64, seed: u64) -> TrainingSet {
    let pairs = (0..k)
        .map(|i| {
            let (f0, f) = noisy_pair(n, seed + i as u64, &NoiseSpec::Gaussian { variance });
            TrainingPair { f0, f, id: i.to_string() }
        })
        .collect();
    TrainingSet::new(pairs).unwrap()
}

/// Gaussian variance 0.005 followed by 5% random-valued impulses.
pub fn mixed_noise() -> NoiseSpec {
    NoiseSpec::Composite { stages: vec![NoiseSpec::Gaussian { variance: 0.005 }, NoiseSpec::Impulse { density: 0.05 }] }
}

/// The five lower-level configurations used for derivative checks, with the
/// ground truth each is compared against.
pub fn derivative_problems(n: usize) -> Vec<(&'static str, DenoiseProblem, ImageGrid)> {
    let spec = GridSpec::new(n, n, Boundary::Neumann);
    let c = n as i64 / 2;
    let f0 = ImageGrid::from_fn(spec, |x, y| {
        if (x as i64 - c).pow(2) + (y as i64 - c + 2).pow(2) < (n * n / 13) as i64 {
            0.8
        } else {
            0.25 + 0.3 * x as f64 / n as f64
        }
    });
    let fg = synthesize_noise(&f0, &NoiseSpec::Gaussian { variance: 0.005 }, 1).unwrap();
    let fp = synthesize_noise(&f0, &NoiseSpec::Poisson { peak: 100.0 }, 2).unwrap();
    let fm = synthesize_noise(&f0, &mixed_noise(), 3).unwrap();
    let tv = Regularizer::TV { alpha: 1.0 };
    vec![
        ("tv-gaussian", DenoiseProblem::gaussian(tv, fg.clone(), 100.0), f0.clone()),
        ("tv-poisson", DenoiseProblem::poisson(tv, fp.clone(), 100.0, Positivity::default()).unwrap(), f0.clone()),
        ("tgv2-gaussian", DenoiseProblem::gaussian(Regularizer::TGV2 { alpha1: 1.0, alpha2: 2.0 }, fg, 100.0), f0.clone()),
        ("infconv-l1l2", DenoiseProblem::infconv_l1l2(tv, fm, 20.0, 150.0, HuberParam::new(100.0).unwrap()), f0.clone()),
        ("gauss-poisson", DenoiseProblem::gauss_poisson(tv, fp, 50.0, 50.0).unwrap(), f0),
    ]
}
