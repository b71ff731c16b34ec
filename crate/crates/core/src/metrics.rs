//! Quality measures and the interior-condition diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{grad_forward, ImageGrid};
use crate::huber::{huber_value, HuberParam};

/// `20·log₁₀(‖f₀‖/‖u − f₀‖)`; `+∞` when `u = f₀`.
pub fn snr(u: &ImageGrid, f0: &ImageGrid) -> Result<f64> {
    u.check_same_shape(f0)?;
    let err = u.values.iter().zip(&f0.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    let sig = f0.values.iter().map(|v| v * v).sum::<f64>();
    Ok(10.0 * (sig / err).log10())
}

/// `10·log₁₀(peak²/MSE)`; `+∞` when `u = f₀`.
pub fn psnr(u: &ImageGrid, f0: &ImageGrid, peak: f64) -> Result<f64> {
    u.check_same_shape(f0)?;
    let mse = u.values.iter().zip(&f0.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / u.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the intensities.
    pub peak: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 8, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

/// Mean structural similarity over all square windows (stride 1, uniform
/// weights). Images smaller than the window are treated as one window.
pub fn ssim(u: &ImageGrid, v: &ImageGrid, cfg: &SsimConfig) -> Result<f64> {
    u.check_same_shape(v)?;
    let (w, h) = (u.width(), u.height());
    let win_x = cfg.window.clamp(1, w);
    let win_y = cfg.window.clamp(1, h);
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let m = (win_x * win_y) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - win_y {
        for x0 in 0..=w - win_x {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + win_y {
                for x in x0..x0 + win_x {
                    let a = u.at(x, y);
                    let b = v.at(x, y);
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let (ma, mb) = (sa / m, sb / m);
            let va = (saa / m - ma * ma).max(0.0);
            let vb = (sbb / m - mb * mb).max(0.0);
            let cov = sab / m - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `h² Σₖ ψ_γ(|∇u|ₖ)`; `γ = ∞` gives the discrete total variation.
pub fn tv_seminorm(u: &ImageGrid, gamma: HuberParam) -> f64 {
    let g = grad_forward(u);
    let s: f64 = g.x.iter().zip(&g.y).map(|(&a, &b)| huber_value(&[a, b], gamma)).sum();
    u.spec.cell_area() * s
}

/// `TV(f) > TV(f₀)`: under this condition the learned regularisation weight
/// is strictly positive.
pub fn interior_condition(f: &ImageGrid, f0: &ImageGrid, gamma: HuberParam) -> Result<bool> {
    f.check_same_shape(f0)?;
    Ok(tv_seminorm(f, gamma) > tv_seminorm(f0, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fidelity::{synthesize_noise, NoiseSpec};
    use crate::grid::{Boundary, GridSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(spec: GridSpec, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(spec, |_, _| rng.random::<f64>())
    }

    #[test]
    fn snr_hand_values() {
        let spec = GridSpec::new(2, 2, Boundary::Neumann);
        let f0 = ImageGrid::new(spec, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let u = ImageGrid::new(spec, vec![1.1, 0.0, 0.0, 0.0]).unwrap();
        assert!((snr(&u, &f0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(snr(&f0, &f0).unwrap(), f64::INFINITY);
        let z = ImageGrid::zeros(spec);
        assert!(snr(&z, &f0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psnr_and_ssim_of_identical_images() {
        let spec = GridSpec::new(12, 10, Boundary::Neumann);
        let u = random(spec, 1);
        assert_eq!(psnr(&u, &u, 1.0).unwrap(), f64::INFINITY);
        assert!((ssim(&u, &u, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_hand_value() {
        let spec = GridSpec::new(4, 4, Boundary::Neumann);
        let f0 = ImageGrid::zeros(spec);
        let u = ImageGrid::constant(spec, 0.1);
        assert!((psnr(&u, &f0, 1.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_has_no_variation() {
        let spec = GridSpec::new(7, 5, Boundary::Neumann);
        assert_eq!(tv_seminorm(&ImageGrid::constant(spec, 0.3), HuberParam::INFINITE), 0.0);
    }

    #[test]
    fn step_variation_is_jump_length() {
        let n = 16;
        let spec = GridSpec::new(n, n, Boundary::Neumann);
        let u = ImageGrid::from_fn(spec, |x, _| if x < n / 2 { 0.0 } else { 1.0 });
        // One unit jump per row, each contributing h² · (1/h).
        let tv = tv_seminorm(&u, HuberParam::INFINITE);
        assert!((tv - n as f64 * spec.h).abs() < 1e-12);
        assert!((tv - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noisy_data_satisfies_interior_condition() {
        let spec = GridSpec::new(32, 32, Boundary::Neumann);
        let f0 = ImageGrid::from_fn(spec, |x, y| if x > 10 && y < 20 { 0.7 } else { 0.2 });
        let f = synthesize_noise(&f0, &NoiseSpec::Gaussian { variance: 0.02 }, 3).unwrap();
        assert!(interior_condition(&f, &f0, HuberParam::INFINITE).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let spec = GridSpec::new(32, 32, Boundary::Neumann);
        let f0 = random(spec, 9);
        for seed in 0..5 {
            let mut last = f64::INFINITY;
            for variance in [0.001, 0.005, 0.02, 0.05] {
                let f = synthesize_noise(&f0, &NoiseSpec::Gaussian { variance }, seed).unwrap();
                let p = psnr(&f, &f0, 1.0).unwrap();
                assert!(p < last);
                last = p;
            }
        }
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(seed in 0u64..500, w in 3usize..20, h in 3usize..20) {
            let spec = GridSpec::new(w, h, Boundary::Neumann);
            let a = random(spec, seed);
            let b = random(spec, seed + 1000);
            let cfg = SsimConfig::default();
            prop_assert!((ssim(&a, &b, &cfg).unwrap() - ssim(&b, &a, &cfg).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn tv_is_absolutely_homogeneous(seed in 0u64..500, c in -5.0f64..5.0) {
            let spec = GridSpec::new(9, 7, Boundary::Neumann);
            let u = random(spec, seed);
            let t = tv_seminorm(&u, HuberParam::INFINITE);
            let tc = tv_seminorm(&u.map(|v| c * v), HuberParam::INFINITE);
            prop_assert!((tc - c.abs() * t).abs() <= 1e-12 * t.max(1.0));
        }
    }
}
