//! Huber regularisation of the Euclidean norm.
//!
//! All functions are generic over the vector length `N`: 1 for the
//! Huberised L¹ fidelity, 2 for gradients, 3 for symmetric tensors written in
//! orthonormal coordinates `(t11, √2·t12, t22)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard used on every division by a norm.
pub const DIV_EPS: f64 = 1e-30;

/// Huber parameter `γ ∈ (0, ∞]`; `∞` means no smoothing.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct HuberParam(f64);

impl HuberParam {
    pub const INFINITE: HuberParam = HuberParam(f64::INFINITY);

    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && !gamma.is_nan() {
            Ok(HuberParam(gamma))
        } else {
            Err(Error::InvalidInput(format!("Huber parameter must be > 0, got {gamma}")))
        }
    }

    pub fn gamma(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    /// Kink location `1/γ`.
    pub fn threshold(self) -> f64 {
        1.0 / self.0
    }
}

/// Which regularised subdifferential is used by the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HuberVariant {
    /// `z / max(1/γ, |z|)`, the gradient of [`huber_value`].
    #[default]
    Max,
    /// The three-branch C¹ form with a transition band of width `1/γ²`.
    Smooth,
}

#[inline]
pub fn norm<const N: usize>(z: &[f64; N]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Huber regularisation of `‖g‖₂`.
pub fn huber_value<const N: usize>(g: &[f64; N], gamma: HuberParam) -> f64 {
    huber_radial(norm(g), gamma)
}

/// Huber profile as a function of the norm `r ≥ 0`.
pub fn huber_radial(r: f64, gamma: HuberParam) -> f64 {
    if gamma.is_infinite() {
        return r;
    }
    let g = gamma.gamma();
    if r >= 1.0 / g {
        r - 0.5 / g
    } else {
        0.5 * g * r * r
    }
}

pub fn h_gamma_max<const N: usize>(z: &[f64; N], gamma: HuberParam) -> [f64; N] {
    let d = gamma.threshold().max(norm(z)).max(DIV_EPS);
    z.map(|v| v / d)
}

/// Transition band `(r1, r2)` of the smooth variant.
fn smooth_band(g: f64) -> (f64, f64) {
    ((1.0 - 0.5 / g) / g, (1.0 + 0.5 / g) / g)
}

pub fn h_gamma_smooth<const N: usize>(z: &[f64; N], gamma: HuberParam) -> [f64; N] {
    let r = norm(z);
    if gamma.is_infinite() {
        let d = r.max(DIV_EPS);
        return z.map(|v| v / d);
    }
    let g = gamma.gamma();
    let (r1, r2) = smooth_band(g);
    if r <= r1 {
        z.map(|v| g * v)
    } else {
        let s = if r >= r2 {
            1.0
        } else {
            let a = 1.0 + 0.5 / g - g * r;
            1.0 - 0.5 * g * a * a
        };
        let d = r.max(DIV_EPS);
        z.map(|v| s * v / d)
    }
}

/// Radial profile `(ψ(r), ψ'(r), ψ''(r))` of the energy density whose
/// gradient is the chosen `h_γ` variant.
pub fn radial_profile(r: f64, gamma: HuberParam, variant: HuberVariant) -> (f64, f64, f64) {
    let g = gamma.gamma();
    if gamma.is_infinite() {
        return (r, 1.0, 0.0);
    }
    match variant {
        HuberVariant::Max => {
            if r >= 1.0 / g {
                (r - 0.5 / g, 1.0, 0.0)
            } else {
                (0.5 * g * r * r, g * r, g)
            }
        }
        HuberVariant::Smooth => {
            let (r1, r2) = smooth_band(g);
            let psi1 = 0.5 * g * r1 * r1;
            let a1 = 1.0 / g;
            if r <= r1 {
                (0.5 * g * r * r, g * r, g)
            } else if r < r2 {
                let a = 1.0 + 0.5 / g - g * r;
                let psi = psi1 + (r - r1) + (a * a * a - a1 * a1 * a1) / 6.0;
                (psi, 1.0 - 0.5 * g * a * a, g * g * a)
            } else {
                let psi2 = psi1 + (r2 - r1) - a1 * a1 * a1 / 6.0;
                (psi2 + (r - r2), 1.0, 0.0)
            }
        }
    }
}

/// Newton derivative block of `h_γ` at `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonBlock<const N: usize> {
    pub matrix: [[f64; N]; N],
    /// `‖z‖ = 0`: the smooth-branch limit `γ·I` was returned.
    pub degenerate: bool,
    /// `γ‖z‖ > 1` (the nonsmooth branch is active).
    pub active: bool,
}

fn scaled_identity<const N: usize>(s: f64) -> [[f64; N]; N] {
    let mut m = [[0.0; N]; N];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = s;
    }
    m
}

/// Newton block of the max-form `h_γ`.
///
/// Unmodified: `𝔑(z)·I − χ·(z⊗z)/‖z‖³` with `𝔑(z) = min(1, γ‖z‖)/‖z‖`.
/// Modified: the rank-one term becomes `(q/max(‖q‖, α)) ⊗ (z/‖z‖²)`, where `q`
/// is the current dual iterate and `α` the term weight.
pub fn h_gamma_newton_block<const N: usize>(
    z: &[f64; N],
    q: &[f64; N],
    alpha: f64,
    gamma: HuberParam,
    modified: bool,
) -> NewtonBlock<N> {
    let r = norm(z);
    let g = gamma.gamma();
    if r <= DIV_EPS {
        return NewtonBlock { matrix: scaled_identity(g), degenerate: true, active: false };
    }
    if g * r <= 1.0 {
        return NewtonBlock { matrix: scaled_identity(g), degenerate: false, active: false };
    }
    let mut m = scaled_identity(1.0 / r);
    if modified {
        let qd = norm(q).max(alpha).max(DIV_EPS);
        let r2 = r * r;
        for i in 0..N {
            for j in 0..N {
                m[i][j] -= (q[i] / qd) * (z[j] / r2);
            }
        }
    } else {
        let r3 = r * r * r;
        for i in 0..N {
            for j in 0..N {
                m[i][j] -= z[i] * z[j] / r3;
            }
        }
    }
    NewtonBlock { matrix: m, degenerate: false, active: true }
}

/// Exact Jacobian of the chosen `h_γ` variant (symmetric).
pub fn h_gamma_jacobian<const N: usize>(
    z: &[f64; N],
    gamma: HuberParam,
    variant: HuberVariant,
) -> [[f64; N]; N] {
    let r = norm(z);
    let (_, d1, d2) = radial_profile(r, gamma, variant);
    if r <= DIV_EPS {
        // Both variants are linear (slope γ) near the origin.
        return scaled_identity(gamma.gamma());
    }
    let mut m = scaled_identity(d1 / r);
    let c = (d2 - d1 / r) / (r * r);
    for i in 0..N {
        for j in 0..N {
            m[i][j] += c * z[i] * z[j];
        }
    }
    m
}
