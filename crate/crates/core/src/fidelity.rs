//! Data-fidelity terms and noise synthesis.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::huber::{huber_radial, HuberParam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FidelityKind {
    /// `½(u − f)²`
    GaussianL2,
    /// `u − f·log u`
    PoissonKL,
    /// Huberised `|u − f|`
    ImpulseL1Huber,
}

impl FromStr for FidelityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "l2" | "gaussian-l2" => Ok(FidelityKind::GaussianL2),
            "poisson" | "kl" | "poisson-kl" => Ok(FidelityKind::PoissonKL),
            "impulse" | "l1" | "impulse-l1" => Ok(FidelityKind::ImpulseL1Huber),
            other => Err(Error::InvalidInput(format!("unknown fidelity `{other}`"))),
        }
    }
}

/// A fidelity kind bound to its observation `f`.
#[derive(Debug, Clone)]
pub struct FidelityModel {
    pub kind: FidelityKind,
    pub data: ImageGrid,
    /// Only used by [`FidelityKind::ImpulseL1Huber`].
    pub gamma: HuberParam,
}

impl FidelityModel {
    pub fn new(kind: FidelityKind, data: ImageGrid, gamma: HuberParam) -> Result<Self> {
        if kind == FidelityKind::PoissonKL && data.values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput("Poisson data must be nonnegative".into()));
        }
        Ok(FidelityModel { kind, data, gamma })
    }

    pub fn gaussian(data: ImageGrid) -> Self {
        FidelityModel { kind: FidelityKind::GaussianL2, data, gamma: HuberParam::INFINITE }
    }
}

/// Pointwise `(φ, φ', φ'')` at `u` for observation `f`.
///
/// The second derivative of the Huberised L¹ term is its Newton derivative:
/// `γ` inside the quadratic zone, zero outside.
#[inline]
pub fn pointwise(kind: FidelityKind, u: f64, f: f64, gamma: HuberParam) -> (f64, f64, f64) {
    match kind {
        FidelityKind::GaussianL2 => {
            let r = u - f;
            (0.5 * r * r, r, 1.0)
        }
        FidelityKind::PoissonKL => {
            let log_term = if f == 0.0 { 0.0 } else { f * u.ln() };
            (u - log_term, 1.0 - f / u, f / (u * u))
        }
        FidelityKind::ImpulseL1Huber => {
            let r = u - f;
            let g = gamma.gamma();
            let value = huber_radial(r.abs(), gamma);
            if gamma.is_infinite() || r.abs() >= 1.0 / g {
                (value, r.signum(), 0.0)
            } else {
                (value, g * r, g)
            }
        }
    }
}

/// Value, gradient and diagonal Hessian of a fidelity.
#[derive(Debug, Clone)]
pub struct PhiEval {
    /// `h²`-weighted sum of the pointwise values.
    pub value: f64,
    /// Pointwise derivative `φ'(u)`.
    pub grad: ImageGrid,
    /// Pointwise second derivative `φ''(u)`.
    pub hess_diag: ImageGrid,
}

pub fn phi_eval(model: &FidelityModel, u: &ImageGrid) -> Result<PhiEval> {
    model.data.check_same_shape(u)?;
    if model.kind == FidelityKind::PoissonKL {
        let bad = u.values.iter().filter(|&&v| v <= 0.0).count();
        if bad > 0 {
            return Err(Error::Domain { pixels: bad });
        }
    }
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(u.len());
    let mut hess = Vec::with_capacity(u.len());
    for (&uk, &fk) in u.values.iter().zip(&model.data.values) {
        let (v, d1, d2) = pointwise(model.kind, uk, fk, model.gamma);
        value += v;
        grad.push(d1);
        hess.push(d2);
    }
    Ok(PhiEval {
        value: value * u.spec.cell_area(),
        grad: ImageGrid { spec: u.spec, values: grad },
        hess_diag: ImageGrid { spec: u.spec, values: hess },
    })
}

/// Noise model applied by [`synthesize_noise`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum NoiseSpec {
    /// Additive `N(0, variance)`.
    Gaussian { variance: f64 },
    /// `Poisson(peak·u) / peak`.
    Poisson { peak: f64 },
    /// A Bernoulli(`density`) subset of pixels replaced by uniform values in `[0, 1]`.
    Impulse { density: f64 },
    /// Stages applied left to right.
    Composite { stages: Vec<NoiseSpec> },
}

impl NoiseSpec {
    pub const DEFAULT_POISSON_PEAK: f64 = 100.0;

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::Gaussian { variance } if !(*variance >= 0.0 && variance.is_finite()) => {
                Err(Error::InvalidInput(format!("noise variance must be >= 0, got {variance}")))
            }
            NoiseSpec::Poisson { peak } if !(*peak > 0.0 && peak.is_finite()) => {
                Err(Error::InvalidInput(format!("Poisson peak must be > 0, got {peak}")))
            }
            NoiseSpec::Impulse { density } if !(0.0..=1.0).contains(density) => {
                Err(Error::InvalidInput(format!("impulse density must lie in [0, 1], got {density}")))
            }
            NoiseSpec::Composite { stages } => stages.iter().try_for_each(NoiseSpec::validate),
            _ => Ok(()),
        }
    }

    fn stages(&self) -> Vec<&NoiseSpec> {
        match self {
            NoiseSpec::Composite { stages } => stages.iter().flat_map(|s| s.stages()).collect(),
            other => vec![other],
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSpec::Gaussian { variance } => write!(f, "gaussian:{variance}"),
            NoiseSpec::Poisson { peak } => write!(f, "poisson:{peak}"),
            NoiseSpec::Impulse { density } => write!(f, "impulse:{density}"),
            NoiseSpec::Composite { stages } => {
                let parts: Vec<String> = stages.iter().map(|s| s.to_string()).collect();
                write!(f, "{}", parts.join("+"))
            }
        }
    }
}

/// Parses `gaussian:0.02`, `poisson[:peak]`, `impulse:0.05`, or stages joined
/// with `+` (e.g. `gaussian:0.005+impulse:0.05`).
impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('+').map(str::trim).filter(|p| !p.is_empty()).collect();
        if parts.is_empty() {
            return Err(Error::InvalidInput("empty noise descriptor".into()));
        }
        let mut stages = Vec::with_capacity(parts.len());
        for part in parts {
            let (name, arg) = match part.split_once(':') {
                Some((n, a)) => (n, Some(a)),
                None => (part, None),
            };
            let num = |a: Option<&str>| -> Result<f64> {
                a.ok_or_else(|| Error::InvalidInput(format!("noise stage `{part}` needs a parameter")))?
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("bad noise parameter in `{part}`: {e}")))
            };
            let stage = match name.to_ascii_lowercase().as_str() {
                "gaussian" | "gauss" => NoiseSpec::Gaussian { variance: num(arg)? },
                "poisson" => NoiseSpec::Poisson {
                    peak: if arg.is_some() { num(arg)? } else { Self::DEFAULT_POISSON_PEAK },
                },
                "impulse" => NoiseSpec::Impulse { density: num(arg)? },
                other => return Err(Error::InvalidInput(format!("unknown noise model `{other}`"))),
            };
            stages.push(stage);
        }
        let spec = if stages.len() == 1 { stages.pop().unwrap() } else { NoiseSpec::Composite { stages } };
        spec.validate()?;
        Ok(spec)
    }
}

/// Corrupts `clean` (intensities in `[0, 1]`) deterministically for a seed.
pub fn synthesize_noise(clean: &ImageGrid, spec: &NoiseSpec, seed: u64) -> Result<ImageGrid> {
    spec.validate()?;
    if clean.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("clean image must take values in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = clean.values.clone();
    for stage in spec.stages() {
        match *stage {
            NoiseSpec::Gaussian { variance } => {
                if variance == 0.0 {
                    continue;
                }
                let normal = Normal::new(0.0, variance.sqrt())
                    .map_err(|e| Error::InvalidInput(format!("gaussian noise: {e}")))?;
                for v in out.iter_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            NoiseSpec::Poisson { peak } => {
                for v in out.iter_mut() {
                    let mean = (*v).max(0.0) * peak;
                    *v = if mean > 0.0 {
                        let dist = Poisson::new(mean)
                            .map_err(|e| Error::InvalidInput(format!("poisson noise: {e}")))?;
                        dist.sample(&mut rng) / peak
                    } else {
                        0.0
                    };
                }
            }
            NoiseSpec::Impulse { density } => {
                for v in out.iter_mut() {
                    if rng.random::<f64>() < density {
                        *v = rng.random::<f64>();
                    }
                }
            }
            NoiseSpec::Composite { .. } => unreachable!("stages are flattened"),
        }
    }
    Ok(ImageGrid { spec: clean.spec, values: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Boundary, GridSpec};

    fn one_pixel(v: f64) -> ImageGrid {
        ImageGrid::constant(GridSpec::new(1, 1, Boundary::Neumann), v)
    }

    #[test]
    fn gaussian_and_poisson_derivatives() {
        let m = FidelityModel::gaussian(one_pixel(1.0));
        let e = phi_eval(&m, &one_pixel(3.0)).unwrap();
        assert_eq!(e.grad.values[0], 2.0);
        assert_eq!(e.hess_diag.values[0], 1.0);

        let p = FidelityModel::new(FidelityKind::PoissonKL, one_pixel(2.0), HuberParam::INFINITE).unwrap();
        let e = phi_eval(&p, &one_pixel(1.0)).unwrap();
        assert_eq!(e.grad.values[0], -1.0);
        assert_eq!(e.hess_diag.values[0], 2.0);
    }

    #[test]
    fn poisson_rejects_nonpositive_points() {
        let spec = GridSpec::new(3, 1, Boundary::Neumann);
        let p = FidelityModel::new(FidelityKind::PoissonKL, ImageGrid::constant(spec, 1.0), HuberParam::INFINITE)
            .unwrap();
        let u = ImageGrid::new(spec, vec![1.0, 0.0, -2.0]).unwrap();
        match phi_eval(&p, &u) {
            Err(Error::Domain { pixels }) => assert_eq!(pixels, 2),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = GridSpec::new(4, 4, Boundary::Neumann);
        let f = ImageGrid::from_fn(spec, |_, _| rng.random_range(0.1..1.0));
        let u = ImageGrid::from_fn(spec, |_, _| rng.random_range(0.1..1.0));
        let gamma = HuberParam::new(20.0).unwrap();
        for kind in [FidelityKind::GaussianL2, FidelityKind::PoissonKL, FidelityKind::ImpulseL1Huber] {
            let m = FidelityModel::new(kind, f.clone(), gamma).unwrap();
            let e = phi_eval(&m, &u).unwrap();
            for k in 0..u.len() {
                let eps = 1e-6;
                let mut up = u.clone();
                let mut dn = u.clone();
                up.values[k] += eps;
                dn.values[k] -= eps;
                let fd = (phi_eval(&m, &up).unwrap().value - phi_eval(&m, &dn).unwrap().value)
                    / (2.0 * eps * spec.cell_area());
                let g = e.grad.values[k];
                assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-2), "{kind:?} {fd} {g}");
                assert!(e.hess_diag.values[k] >= 0.0);
            }
        }
    }

    #[test]
    fn zero_variance_is_identity_and_seed_is_deterministic() {
        let spec = GridSpec::new(16, 16, Boundary::Neumann);
        let clean = ImageGrid::from_fn(spec, |x, y| ((x + y) % 5) as f64 / 5.0);
        let same = synthesize_noise(&clean, &NoiseSpec::Gaussian { variance: 0.0 }, 3).unwrap();
        assert_eq!(same, clean);
        let spec_noise: NoiseSpec = "gaussian:0.01+impulse:0.1+poisson:50".parse().unwrap();
        let a = synthesize_noise(&clean, &spec_noise, 9).unwrap();
        let b = synthesize_noise(&clean, &spec_noise, 9).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn gaussian_sample_variance() {
        let spec = GridSpec::new(256, 256, Boundary::Neumann);
        let clean = ImageGrid::constant(spec, 0.5);
        let noisy = synthesize_noise(&clean, &NoiseSpec::Gaussian { variance: 0.02 }, 1).unwrap();
        let n = noisy.len() as f64;
        let diffs: Vec<f64> = noisy.values.iter().zip(&clean.values).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.02).abs() < 0.1 * 0.02, "{var}");
    }

    #[test]
    fn impulse_density() {
        let spec = GridSpec::new(128, 128, Boundary::Neumann);
        let clean = ImageGrid::constant(spec, 0.5);
        let noisy = synthesize_noise(&clean, &NoiseSpec::Impulse { density: 0.05 }, 2).unwrap();
        let changed = noisy.values.iter().filter(|&&v| v != 0.5).count() as f64 / noisy.len() as f64;
        assert!((changed - 0.05).abs() <= 0.01, "{changed}");
    }

    #[test]
    fn invalid_descriptors() {
        assert!("gaussian:-1".parse::<NoiseSpec>().is_err());
        assert!("impulse:1.5".parse::<NoiseSpec>().is_err());
        assert!("speckle:0.1".parse::<NoiseSpec>().is_err());
        let d: NoiseSpec = "gaussian:0.005+impulse:0.05".parse().unwrap();
        assert_eq!(d.to_string(), "gaussian:0.005+impulse:0.05");
    }
}
