//! Scalar, vector and symmetric-tensor fields on a regular 2D grid, and the
//! finite-difference operators acting on them.
//!
//! Conventions:
//! - values are stored row-major: pixel `(x, y)` lives at `y * width + x`;
//! - the first gradient component differences along `x` (columns), the second
//!   along `y` (rows);
//! - gradients use forward differences, divergences backward differences, and
//!   `div_backward` is exactly the negative adjoint of `grad_forward` under the
//!   plain Euclidean inner product;
//! - [`Boundary::Neumann`] sets the forward difference leaving the grid to
//!   zero, [`Boundary::Dirichlet0`] evaluates it against a ghost value of zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boundary closure for the forward-difference stencils.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Zero ghost value past the last row/column.
    Dirichlet0,
    /// Zero forward difference at the last row/column.
    #[default]
    Neumann,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "neumann" => Ok(Boundary::Neumann),
            "dirichlet0" | "dirichlet" => Ok(Boundary::Dirichlet0),
            other => Err(Error::InvalidInput(format!("unknown boundary `{other}`"))),
        }
    }
}

/// Grid header shared by every field living on the same mesh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub h: f64,
    pub boundary: Boundary,
}

impl GridSpec {
    /// Grid with the default mesh size `1 / max(width, height)`.
    pub fn new(width: usize, height: usize, boundary: Boundary) -> Self {
        let h = 1.0 / width.max(height).max(1) as f64;
        GridSpec { width, height, h, boundary }
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    /// Area element `h²` used to weight every discrete integral.
    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("grid dimensions must be positive".into()));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidInput(format!("mesh size must be positive, got {}", self.h)));
        }
        Ok(())
    }

    /// True when `other` describes the same pixel layout.
    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Scalar field: images, adjoint states, spatial weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} values for a {}x{} grid, got {}",
                spec.len(),
                spec.width,
                spec.height,
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at pixel {k}")));
        }
        Ok(ImageGrid { spec, values })
    }

    pub fn zeros(spec: GridSpec) -> Self {
        ImageGrid { spec, values: vec![0.0; spec.len()] }
    }

    pub fn constant(spec: GridSpec, c: f64) -> Self {
        ImageGrid { spec, values: vec![c; spec.len()] }
    }

    /// Samples `f(x, y)` at every pixel, `x` the column and `y` the row index.
    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(spec.len());
        for y in 0..spec.height {
            for x in 0..spec.width {
                values.push(f(x, y));
            }
        }
        ImageGrid { spec, values }
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn h(&self) -> f64 {
        self.spec.h
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[self.spec.index(x, y)]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ImageGrid {
        ImageGrid { spec: self.spec, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// `h²`-weighted inner product.
    pub fn dot_l2(&self, other: &ImageGrid) -> f64 {
        self.spec.cell_area() * dot(&self.values, &other.values)
    }

    /// `h²`-weighted L² norm.
    pub fn norm_l2(&self) -> f64 {
        self.dot_l2(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &ImageGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn check_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if self.spec.same_shape(&other.spec) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: (self.spec.width, self.spec.height),
                found: (other.spec.width, other.spec.height),
            })
        }
    }
}

/// Per-pixel 2-vectors stored as two component planes.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub spec: GridSpec,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl VectorField {
    pub fn zeros(spec: GridSpec) -> Self {
        VectorField { spec, x: vec![0.0; spec.len()], y: vec![0.0; spec.len()] }
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut out = Self::zeros(spec);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (a, b) = f(x, y);
                let k = spec.index(x, y);
                out.x[k] = a;
                out.y[k] = b;
            }
        }
        out
    }

    #[inline]
    pub fn at(&self, k: usize) -> [f64; 2] {
        [self.x[k], self.y[k]]
    }

    /// Plain (unweighted) inner product summed over both components.
    pub fn dot(&self, other: &VectorField) -> f64 {
        dot(&self.x, &other.x) + dot(&self.y, &other.y)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Symmetric 2×2 tensors stored as `(t11, t12, t22)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub spec: GridSpec,
    pub t11: Vec<f64>,
    pub t12: Vec<f64>,
    pub t22: Vec<f64>,
}

impl TensorField {
    pub fn zeros(spec: GridSpec) -> Self {
        let n = spec.len();
        TensorField { spec, t11: vec![0.0; n], t12: vec![0.0; n], t22: vec![0.0; n] }
    }

    #[inline]
    pub fn at(&self, k: usize) -> [f64; 3] {
        [self.t11[k], self.t12[k], self.t22[k]]
    }

    /// Frobenius inner product; the off-diagonal entry counts twice.
    pub fn dot(&self, other: &TensorField) -> f64 {
        dot(&self.t11, &other.t11) + 2.0 * dot(&self.t12, &other.t12) + dot(&self.t22, &other.t22)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward difference of a scalar plane, closed by the boundary rule.
fn forward_diff(spec: &GridSpec, u: &[f64], along_x: bool) -> Vec<f64> {
    let (w, ht) = (spec.width, spec.height);
    let inv_h = 1.0 / spec.h;
    let mut out = vec![0.0; u.len()];
    for y in 0..ht {
        for x in 0..w {
            let k = y * w + x;
            let last = if along_x { x + 1 == w } else { y + 1 == ht };
            out[k] = if last {
                match spec.boundary {
                    Boundary::Neumann => 0.0,
                    Boundary::Dirichlet0 => -u[k] * inv_h,
                }
            } else {
                let next = if along_x { k + 1 } else { k + w };
                (u[next] - u[k]) * inv_h
            };
        }
    }
    out
}

/// Negative adjoint of [`forward_diff`]; a backward difference.
fn backward_diff(spec: &GridSpec, q: &[f64], along_x: bool) -> Vec<f64> {
    let (w, ht) = (spec.width, spec.height);
    let inv_h = 1.0 / spec.h;
    let mut out = vec![0.0; q.len()];
    for y in 0..ht {
        for x in 0..w {
            let k = y * w + x;
            let (first, last) = if along_x { (x == 0, x + 1 == w) } else { (y == 0, y + 1 == ht) };
            let prev = if first {
                0.0
            } else if along_x {
                q[k - 1]
            } else {
                q[k - w]
            };
            let here = if last && spec.boundary == Boundary::Neumann { 0.0 } else { q[k] };
            out[k] = (here - prev) * inv_h;
        }
    }
    out
}

pub fn grad_forward(u: &ImageGrid) -> VectorField {
    VectorField {
        spec: u.spec,
        x: forward_diff(&u.spec, &u.values, true),
        y: forward_diff(&u.spec, &u.values, false),
    }
}

pub fn div_backward(q: &VectorField) -> ImageGrid {
    let dx = backward_diff(&q.spec, &q.x, true);
    let dy = backward_diff(&q.spec, &q.y, false);
    ImageGrid { spec: q.spec, values: dx.iter().zip(&dy).map(|(a, b)| a + b).collect() }
}

/// Five-point Laplacian, `div_backward ∘ grad_forward`.
pub fn laplacian_5pt(u: &ImageGrid) -> ImageGrid {
    let spec = &u.spec;
    let (w, ht) = (spec.width, spec.height);
    let inv_h2 = 1.0 / (spec.h * spec.h);
    let dir = spec.boundary == Boundary::Dirichlet0;
    let v = &u.values;
    let mut out = vec![0.0; v.len()];
    for y in 0..ht {
        for x in 0..w {
            let k = y * w + x;
            let mut acc = 0.0;
            // x direction: forward flux out minus flux in.
            if x + 1 < w {
                acc += v[k + 1] - v[k];
            } else if dir {
                acc -= v[k];
            }
            if x > 0 {
                acc -= v[k] - v[k - 1];
            }
            if y + 1 < ht {
                acc += v[k + w] - v[k];
            } else if dir {
                acc -= v[k];
            }
            if y > 0 {
                acc -= v[k] - v[k - w];
            }
            out[k] = acc * inv_h2;
        }
    }
    ImageGrid { spec: *spec, values: out }
}

/// Symmetrised gradient `½(Dw + Dwᵀ)` with forward differences.
pub fn sym_grad(w: &VectorField) -> TensorField {
    let spec = &w.spec;
    let w1x = forward_diff(spec, &w.x, true);
    let w1y = forward_diff(spec, &w.x, false);
    let w2x = forward_diff(spec, &w.y, true);
    let w2y = forward_diff(spec, &w.y, false);
    TensorField {
        spec: *spec,
        t11: w1x,
        t12: w1y.iter().zip(&w2x).map(|(a, b)| 0.5 * (a + b)).collect(),
        t22: w2y,
    }
}

/// Negative adjoint of [`sym_grad`] under the Frobenius inner product.
pub fn sym_div(t: &TensorField) -> VectorField {
    let spec = &t.spec;
    let a = backward_diff(spec, &t.t11, true);
    let b = backward_diff(spec, &t.t12, false);
    let c = backward_diff(spec, &t.t12, true);
    let d = backward_diff(spec, &t.t22, false);
    VectorField {
        spec: *spec,
        x: a.iter().zip(&b).map(|(p, q)| p + q).collect(),
        y: c.iter().zip(&d).map(|(p, q)| p + q).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(spec: GridSpec, rng: &mut ChaCha8Rng) -> ImageGrid {
        ImageGrid::from_fn(spec, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_field(spec: GridSpec, rng: &mut ChaCha8Rng) -> VectorField {
        VectorField::from_fn(spec, |_, _| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn gradient_of_constant_vanishes() {
        for b in [Boundary::Neumann, Boundary::Dirichlet0] {
            let u = ImageGrid::constant(GridSpec::new(5, 4, b), 2.5);
            let g = grad_forward(&u);
            if b == Boundary::Neumann {
                assert!(g.x.iter().chain(&g.y).all(|&v| v == 0.0));
            } else {
                let spec = u.spec;
                for y in 0..spec.height - 1 {
                    for x in 0..spec.width - 1 {
                        let k = spec.index(x, y);
                        assert_eq!(g.at(k), [0.0, 0.0]);
                    }
                }
            }
        }
    }

    #[test]
    fn ramp_has_unit_gradient() {
        let spec = GridSpec::new(6, 6, Boundary::Neumann);
        let u = ImageGrid::from_fn(spec, |_, y| y as f64 * spec.h);
        let g = grad_forward(&u);
        for y in 0..5 {
            for x in 0..5 {
                let [a, b] = g.at(spec.index(x, y));
                assert!(a.abs() < 1e-14 && (b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_pointwise_stencil() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for b in [Boundary::Neumann, Boundary::Dirichlet0] {
            let spec = GridSpec::new(4, 4, b);
            let u = random_image(spec, &mut rng);
            let g = grad_forward(&u);
            let ghost = |x: usize, y: usize| -> f64 {
                if x < 4 && y < 4 {
                    u.at(x, y)
                } else {
                    0.0
                }
            };
            for y in 0..4 {
                for x in 0..4 {
                    let k = spec.index(x, y);
                    let ex = if x == 3 && b == Boundary::Neumann {
                        0.0
                    } else {
                        (ghost(x + 1, y) - u.at(x, y)) / spec.h
                    };
                    let ey = if y == 3 && b == Boundary::Neumann {
                        0.0
                    } else {
                        (ghost(x, y + 1) - u.at(x, y)) / spec.h
                    };
                    assert_eq!(g.x[k], ex);
                    assert_eq!(g.y[k], ey);
                }
            }
        }
    }

    #[test]
    fn divergence_is_negative_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for b in [Boundary::Neumann, Boundary::Dirichlet0] {
            let spec = GridSpec::new(6, 6, b);
            let u = random_image(spec, &mut rng);
            let q = random_field(spec, &mut rng);
            let lhs = grad_forward(&u).dot(&q);
            let rhs = -dot(&u.values, &div_backward(&q).values);
            let scale = dot(&u.values, &u.values).sqrt() * q.norm();
            assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn divergence_of_zero_and_constant_fields() {
        let spec = GridSpec::new(5, 5, Boundary::Dirichlet0);
        assert!(div_backward(&VectorField::zeros(spec)).values.iter().all(|&v| v == 0.0));
        let q = VectorField::from_fn(spec, |_, _| (1.0, 1.0));
        let d = div_backward(&q);
        for y in 0..5 {
            for x in 0..5 {
                // Backward difference sees the zero value in front of the first column/row.
                let expect = (if x == 0 { 1.0 } else { 0.0 } + if y == 0 { 1.0 } else { 0.0 }) / spec.h;
                assert!((d.at(x, y) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn laplacian_of_quadratic_is_four() {
        let spec = GridSpec::new(7, 7, Boundary::Neumann);
        let u = ImageGrid::from_fn(spec, |x, y| {
            let (a, b) = (x as f64 * spec.h, y as f64 * spec.h);
            a * a + b * b
        });
        let l = laplacian_5pt(&u);
        for y in 1..6 {
            for x in 1..6 {
                assert!((l.at(x, y) - 4.0).abs() < 1e-9, "{}", l.at(x, y));
            }
        }
        assert!(laplacian_5pt(&ImageGrid::constant(spec, 3.0)).values.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn laplacian_equals_div_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in [Boundary::Neumann, Boundary::Dirichlet0] {
            let u = random_image(GridSpec::new(5, 5, b), &mut rng);
            let a = laplacian_5pt(&u);
            let c = div_backward(&grad_forward(&u));
            let scale = a.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(a.max_abs_diff(&c) <= 1e-14 * scale);
        }
    }

    #[test]
    fn symmetric_gradient_of_shear() {
        let spec = GridSpec::new(6, 6, Boundary::Neumann);
        let w = VectorField::from_fn(spec, |_, y| (y as f64 * spec.h, 0.0));
        let e = sym_grad(&w);
        for y in 0..5 {
            for x in 0..5 {
                let [a, b, c] = e.at(spec.index(x, y));
                assert!(a.abs() < 1e-12 && (b - 0.5).abs() < 1e-12 && c.abs() < 1e-12);
            }
        }
        let c = VectorField::from_fn(spec, |_, _| (0.3, -1.2));
        assert!(sym_grad(&c).norm() < 1e-12);
    }

    #[test]
    fn symmetric_divergence_is_negative_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for b in [Boundary::Neumann, Boundary::Dirichlet0] {
            let spec = GridSpec::new(6, 6, b);
            let w = random_field(spec, &mut rng);
            let mut t = TensorField::zeros(spec);
            for k in 0..spec.len() {
                t.t11[k] = rng.random_range(-1.0..1.0);
                t.t12[k] = rng.random_range(-1.0..1.0);
                t.t22[k] = rng.random_range(-1.0..1.0);
            }
            let lhs = sym_grad(&w).dot(&t);
            let rhs = -w.dot(&sym_div(&t));
            assert!((lhs - rhs).abs() <= 1e-12 * w.norm() * t.norm());
        }
    }

    #[test]
    fn default_mesh_size_follows_largest_side() {
        let spec = GridSpec::new(177, 120, Boundary::Neumann);
        assert!((spec.h - 1.0 / 177.0).abs() < 1e-15);
        assert!(ImageGrid::new(spec, vec![0.0; 3]).is_err());
    }
}
