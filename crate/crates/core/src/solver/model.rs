//! Assembled form of a [`DenoiseProblem`]: stacked unknowns, sparse
//! operators, energy, residual and Newton matrices.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::fidelity::{pointwise, FidelityKind};
use crate::grid::{Boundary, GridSpec, ImageGrid, TensorField, VectorField};
use crate::huber::{
    h_gamma_jacobian, h_gamma_max, h_gamma_newton_block, h_gamma_smooth, norm, radial_profile, HuberParam,
    HuberVariant,
};
use crate::sparse::{CsrMatrix, Pattern};

use super::newton::{RunOutput, State};
use super::{Aux, Combine, DenoiseProblem, DenoiseResult, Dual, ParamValue, Regularizer, TermDual};

/// Which upper-level parameter scales a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum ParamId {
    /// Weight of `problem.fidelities[i]`.
    Lambda(usize),
    /// `i`-th regulariser weight.
    Alpha(usize),
}

/// `Σₖ wₖ ψ(|(A x − b)ₖ|)` with `dim`-vectors per pixel.
#[derive(Debug, Clone)]
pub(crate) struct HuberTerm {
    pub op: CsrMatrix,
    pub dim: usize,
    pub weight: ParamValue,
    pub offset: Option<Vec<f64>>,
    pub gamma: HuberParam,
    pub variant: HuberVariant,
    pub param: ParamId,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum SmoothKind {
    Fidelity(FidelityKind),
    /// `½ min(y − δ, 0)²`
    Penalty { delta: f64 },
}

/// `Σₖ wₖ φ((B x)ₖ; fₖ)`.
#[derive(Debug, Clone)]
pub(crate) struct SmoothTerm {
    pub op: CsrMatrix,
    pub kind: SmoothKind,
    pub data: Vec<f64>,
    pub weight: ParamValue,
    pub param: Option<ParamId>,
}

impl SmoothTerm {
    /// `(φ, φ', φ'')` at `y` for pixel `k`, or `None` outside the domain.
    #[inline]
    pub fn eval(&self, k: usize, y: f64) -> Option<(f64, f64, f64)> {
        match self.kind {
            SmoothKind::Fidelity(FidelityKind::PoissonKL) if y <= 0.0 => None,
            SmoothKind::Fidelity(kind) => Some(pointwise(kind, y, self.data[k], HuberParam::INFINITE)),
            SmoothKind::Penalty { delta } => {
                let m = (y - delta).min(0.0);
                Some((0.5 * m * m, m, if y < delta { 1.0 } else { 0.0 }))
            }
        }
    }
}

/// Per-pixel data of one Huber term at a point.
pub(crate) struct TermLinearization {
    /// `h_γ(z)`, component-major.
    pub h: Vec<f64>,
    /// Newton block of `h_γ` (unweighted), row-major `dim × dim` per pixel.
    pub blocks: Vec<[f64; 9]>,
}

#[derive(Debug)]
pub(crate) struct Model {
    pub spec: GridSpec,
    pub n: usize,
    pub nx: usize,
    /// `μ S` plus the null-space anchor.
    pub quad: CsrMatrix,
    pub huber: Vec<HuberTerm>,
    pub smooth: Vec<SmoothTerm>,
    /// Newton iteration on `u ⊙ ∇E` instead of `∇E`.
    pub multiplied: bool,
    /// Some term requires `u > 0`.
    pub needs_positive: bool,
    pub delta: Option<f64>,
    pub regularizer: Regularizer,
    pub has_n: bool,
    pattern: OnceLock<Pattern>,
}

/// Forward-difference gradient as a `2n × n` matrix.
pub(crate) fn grad_matrix(spec: &GridSpec) -> CsrMatrix {
    let (w, ht, n) = (spec.width, spec.height, spec.len());
    let ih = 1.0 / spec.h;
    let dir = spec.boundary == Boundary::Dirichlet0;
    let mut t = Vec::with_capacity(4 * n);
    for y in 0..ht {
        for x in 0..w {
            let k = y * w + x;
            if x + 1 < w {
                t.push((k, k + 1, ih));
                t.push((k, k, -ih));
            } else if dir {
                t.push((k, k, -ih));
            }
            if y + 1 < ht {
                t.push((n + k, k + w, ih));
                t.push((n + k, k, -ih));
            } else if dir {
                t.push((n + k, k, -ih));
            }
        }
    }
    CsrMatrix::from_triplets(2 * n, n, &t)
}

/// Symmetrised gradient of a vector field as a `3n × 2n` matrix, in the
/// orthonormal coordinates `(t11, √2·t12, t22)`.
pub(crate) fn sym_grad_matrix(spec: &GridSpec) -> CsrMatrix {
    let n = spec.len();
    let g = grad_matrix(spec);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut t = Vec::new();
    for (i, j, v) in g.triplets() {
        let (comp, k) = (i / n, i % n);
        if comp == 0 {
            // d/dx: w1 → t11, w2 → t12
            t.push((k, j, v));
            t.push((n + k, n + j, s * v));
        } else {
            // d/dy: w1 → t12, w2 → t22
            t.push((n + k, j, s * v));
            t.push((2 * n + k, n + j, v));
        }
    }
    CsrMatrix::from_triplets(3 * n, 2 * n, &t)
}

/// Places `m` at column offset `col` in a matrix with `ncols` columns,
/// optionally scaling it.
fn embed(parts: &[(&CsrMatrix, usize, f64)], nrows: usize, ncols: usize) -> CsrMatrix {
    let mut t = Vec::new();
    for &(m, col, s) in parts {
        assert_eq!(m.nrows, nrows);
        t.extend(m.triplets().into_iter().map(|(i, j, v)| (i, j + col, s * v)));
    }
    CsrMatrix::from_triplets(nrows, ncols, &t)
}

#[inline]
fn arr<const N: usize>(s: &[f64]) -> [f64; N] {
    std::array::from_fn(|i| s[i])
}

fn pad<const N: usize>(m: [[f64; N]; N]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..N {
        for j in 0..N {
            out[i * N + j] = m[i][j];
        }
    }
    out
}

fn h_fixed<const N: usize>(z: &[f64], gamma: HuberParam, variant: HuberVariant) -> [f64; 3] {
    let z: [f64; N] = arr(z);
    let h = match variant {
        HuberVariant::Max => h_gamma_max(&z, gamma),
        HuberVariant::Smooth => h_gamma_smooth(&z, gamma),
    };
    let mut out = [0.0; 3];
    out[..N].copy_from_slice(&h);
    out
}

fn block_fixed<const N: usize>(
    z: &[f64],
    q: Option<&[f64]>,
    weight: f64,
    gamma: HuberParam,
    variant: HuberVariant,
) -> [f64; 9] {
    let z: [f64; N] = arr(z);
    match variant {
        HuberVariant::Max => {
            let (qa, modified) = match q {
                Some(q) => (arr::<N>(q), true),
                None => (z, false),
            };
            pad(h_gamma_newton_block(&z, &qa, weight, gamma, modified).matrix)
        }
        HuberVariant::Smooth => pad(h_gamma_jacobian(&z, gamma, variant)),
    }
}

/// `h_γ(z)` for a `dim`-vector; unused trailing entries are zero.
pub(crate) fn h_dyn(dim: usize, z: &[f64], gamma: HuberParam, variant: HuberVariant) -> [f64; 3] {
    match dim {
        1 => h_fixed::<1>(z, gamma, variant),
        2 => h_fixed::<2>(z, gamma, variant),
        3 => h_fixed::<3>(z, gamma, variant),
        _ => unreachable!("Huber terms have 1 to 3 components"),
    }
}

/// Newton block for a `dim`-vector. `q` selects the dual-projected form.
pub(crate) fn block_dyn(
    dim: usize,
    z: &[f64],
    q: Option<&[f64]>,
    weight: f64,
    gamma: HuberParam,
    variant: HuberVariant,
) -> [f64; 9] {
    match dim {
        1 => block_fixed::<1>(z, q, weight, gamma, variant),
        2 => block_fixed::<2>(z, q, weight, gamma, variant),
        3 => block_fixed::<3>(z, q, weight, gamma, variant),
        _ => unreachable!("Huber terms have 1 to 3 components"),
    }
}

fn two_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Model {
    pub fn build(problem: &DenoiseProblem) -> Result<Model> {
        problem.validate()?;
        let spec = problem.data().spec;
        let n = spec.len();
        let g = grad_matrix(&spec);
        let dir = spec.boundary == Boundary::Dirichlet0;
        let has_n = problem.combine == Combine::InfConvL1L2;
        let reg_blocks = match problem.regularizer {
            Regularizer::TV { .. } => 1,
            Regularizer::TGV2 { .. } => 3,
            Regularizer::ICTV { .. } => 2,
        };
        let n_off = reg_blocks * n;
        let nx = n_off + if has_n { n } else { 0 };
        let alphas = problem.regularizer.alphas();
        let names = problem.regularizer.alpha_names();
        let reg_term = |op: CsrMatrix, dim: usize, j: usize| HuberTerm {
            op,
            dim,
            weight: ParamValue::Scalar(alphas[j]),
            offset: None,
            gamma: problem.gamma,
            variant: problem.variant,
            param: ParamId::Alpha(j),
            name: names[j].to_string(),
        };

        let mut huber = Vec::new();
        let ident = CsrMatrix::identity(n);
        match problem.regularizer {
            Regularizer::TV { .. } => {
                huber.push(reg_term(embed(&[(&g, 0, 1.0)], 2 * n, nx), 2, 0));
            }
            Regularizer::TGV2 { .. } => {
                let minus_i = CsrMatrix::identity(2 * n);
                huber.push(reg_term(embed(&[(&g, 0, 1.0), (&minus_i, n, -1.0)], 2 * n, nx), 2, 0));
                let e = sym_grad_matrix(&spec);
                huber.push(reg_term(embed(&[(&e, n, 1.0)], 3 * n, nx), 3, 1));
            }
            Regularizer::ICTV { .. } => {
                huber.push(reg_term(embed(&[(&g, 0, 1.0), (&g, n, -1.0)], 2 * n, nx), 2, 0));
                let hess = sym_grad_matrix(&spec).matmul(&g);
                huber.push(reg_term(embed(&[(&hess, n, 1.0)], 3 * n, nx), 3, 1));
            }
        }

        let mut smooth = Vec::new();
        let u_sel = embed(&[(&ident, 0, 1.0)], n, nx);
        for (i, fid) in problem.fidelities.iter().enumerate() {
            let kind = fid.model.kind;
            let data = fid.model.data.values.clone();
            match (problem.combine, kind) {
                (Combine::InfConvL1L2, FidelityKind::ImpulseL1Huber) => huber.push(HuberTerm {
                    op: embed(&[(&ident, n_off, 1.0)], n, nx),
                    dim: 1,
                    weight: fid.weight.clone(),
                    offset: None,
                    gamma: fid.model.gamma,
                    variant: HuberVariant::Max,
                    param: ParamId::Lambda(i),
                    name: "lambda_l1".into(),
                }),
                (Combine::InfConvL1L2, _) => smooth.push(SmoothTerm {
                    op: embed(&[(&ident, 0, 1.0), (&ident, n_off, 1.0)], n, nx),
                    kind: SmoothKind::Fidelity(kind),
                    data,
                    weight: fid.weight.clone(),
                    param: Some(ParamId::Lambda(i)),
                }),
                (_, FidelityKind::ImpulseL1Huber) => huber.push(HuberTerm {
                    op: u_sel.clone(),
                    dim: 1,
                    weight: fid.weight.clone(),
                    offset: Some(data),
                    gamma: fid.model.gamma,
                    variant: HuberVariant::Max,
                    param: ParamId::Lambda(i),
                    name: "lambda_l1".into(),
                }),
                (_, _) => smooth.push(SmoothTerm {
                    op: u_sel.clone(),
                    kind: SmoothKind::Fidelity(kind),
                    data,
                    weight: fid.weight.clone(),
                    param: Some(ParamId::Lambda(i)),
                }),
            }
        }
        if let Some(pos) = problem.positivity {
            smooth.push(SmoothTerm {
                op: u_sel.clone(),
                kind: SmoothKind::Penalty { delta: pos.delta },
                data: vec![0.0; n],
                weight: ParamValue::Scalar(pos.eta),
                param: None,
            });
        }

        // H¹ smoothing on every scalar unknown. The impulse component gets an
        // extra μ‖n‖² so that the split stays strictly convex.
        let lap = g.transpose().matmul(&g);
        let mut qt = Vec::new();
        for b in 0..nx / n {
            qt.extend(lap.triplets().into_iter().map(|(i, j, v)| (i + b * n, j + b * n, problem.mu * v)));
        }
        if has_n {
            qt.extend((0..n).map(|k| (n_off + k, n_off + k, problem.mu)));
        }
        if matches!(problem.regularizer, Regularizer::ICTV { .. }) && !dir {
            // v only enters through ∇v; pin its mean-free null space.
            qt.push((n, n, 1.0));
        }
        let quad = CsrMatrix::from_triplets(nx, nx, &qt);

        let needs_positive = smooth.iter().any(|s| s.kind == SmoothKind::Fidelity(FidelityKind::PoissonKL));
        Ok(Model {
            spec,
            n,
            nx,
            quad,
            huber,
            smooth,
            multiplied: problem.combine == Combine::GaussPoissonProduct,
            needs_positive,
            delta: problem.positivity.map(|p| p.delta),
            regularizer: problem.regularizer,
            has_n,
            pattern: OnceLock::new(),
        })
    }

    pub fn initial_state(&self, problem: &DenoiseProblem) -> State {
        let mut x = vec![0.0; self.nx];
        let floor = if self.needs_positive { Some(self.delta.unwrap_or(1e-3)) } else { None };
        for (xk, &fk) in x.iter_mut().zip(&problem.data().values) {
            *xk = match floor {
                Some(d) => fk.max(d),
                None => fk,
            };
        }
        let q = self.huber.iter().map(|t| vec![0.0; t.dim * self.n]).collect();
        State { x, q }
    }

    pub fn cell_area(&self) -> f64 {
        self.spec.cell_area()
    }

    pub fn term_z(&self, t: &HuberTerm, x: &[f64]) -> Vec<f64> {
        let mut z = t.op.matvec(x);
        if let Some(b) = &t.offset {
            for (zk, bk) in z.iter_mut().zip(b) {
                *zk -= bk;
            }
        }
        z
    }

    #[inline]
    fn pixel(z: &[f64], dim: usize, n: usize, k: usize) -> [f64; 3] {
        let mut p = [0.0; 3];
        for c in 0..dim {
            p[c] = z[c * n + k];
        }
        p
    }

    /// `E(x)`, `+∞` outside the domain.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let qx = self.quad.matvec(x);
        let mut e = 0.5 * crate::grid::dot(x, &qx);
        for t in &self.huber {
            let z = self.term_z(t, x);
            let mut s = 0.0;
            for k in 0..n {
                let p = Self::pixel(&z, t.dim, n, k);
                let r = norm(&p);
                s += t.weight.at(k) * radial_profile(r, t.gamma, t.variant).0;
            }
            e += s;
        }
        for t in &self.smooth {
            let y = t.op.matvec(x);
            let mut s = 0.0;
            for (k, &yk) in y.iter().enumerate() {
                match t.eval(k, yk) {
                    Some((v, _, _)) => s += t.weight.at(k) * v,
                    None => return f64::INFINITY,
                }
            }
            e += s;
        }
        e * self.cell_area()
    }

    /// Individual contributions to `R = ∇E / h²`, or `None` outside the
    /// domain.
    pub fn residual_parts(&self, x: &[f64]) -> Option<Vec<Vec<f64>>> {
        let n = self.n;
        let mut parts = vec![self.quad.matvec(x)];
        for t in &self.huber {
            let z = self.term_z(t, x);
            let mut hw = vec![0.0; z.len()];
            for k in 0..n {
                let p = Self::pixel(&z, t.dim, n, k);
                let h = h_dyn(t.dim, &p[..t.dim], t.gamma, t.variant);
                let w = t.weight.at(k);
                for c in 0..t.dim {
                    hw[c * n + k] = w * h[c];
                }
            }
            parts.push(t.op.transpose_matvec(&hw));
        }
        for t in &self.smooth {
            let y = t.op.matvec(x);
            let mut d = vec![0.0; n];
            for (k, &yk) in y.iter().enumerate() {
                d[k] = t.weight.at(k) * t.eval(k, yk)?.1;
            }
            parts.push(t.op.transpose_matvec(&d));
        }
        Some(parts)
    }

    /// Row scaling of the multiplied form: `u` on the image block, one
    /// elsewhere.
    pub fn multiplier(&self, x: &[f64]) -> Vec<f64> {
        let mut d = vec![1.0; self.nx];
        d[..self.n].copy_from_slice(&x[..self.n]);
        d
    }

    /// Residual used for the stopping test and its relative size:
    /// `‖Σ partsᵢ‖ / (Σ ‖partsᵢ‖ + data scale)`, multiplied row-wise by `u` in the
    /// multiplied form.
    pub fn residual(&self, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>, f64)> {
        let parts = self.residual_parts(x)?;
        let mut r = vec![0.0; self.nx];
        for p in &parts {
            for (a, b) in r.iter_mut().zip(p) {
                *a += b;
            }
        }
        let d = if self.multiplied { Some(self.multiplier(x)) } else { None };
        let scaled = |v: &[f64]| -> Vec<f64> {
            match &d {
                Some(d) => v.iter().zip(d).map(|(a, b)| a * b).collect(),
                None => v.to_vec(),
            }
        };
        let g = scaled(&r);
        let scale: f64 = parts.iter().map(|p| two_norm(&scaled(p))).sum::<f64>() + self.data_scale(&d);
        let num = two_norm(&g);
        let rel = if num == 0.0 { 0.0 } else { num / scale.max(f64::MIN_POSITIVE) };
        Some((r, g, rel))
    }

    /// Size of the data forcing, so that the relative residual stays
    /// meaningful when every individual term vanishes.
    fn data_scale(&self, d: &Option<Vec<f64>>) -> f64 {
        let n = self.n;
        let mut total = 0.0;
        let mut add = |op: &CsrMatrix, v: Vec<f64>| {
            let mut r = op.transpose_matvec(&v);
            if let Some(d) = d {
                r.iter_mut().zip(d).for_each(|(a, b)| *a *= b);
            }
            total += two_norm(&r);
        };
        for t in &self.smooth {
            if let SmoothKind::Fidelity(kind) = t.kind {
                let v = (0..n)
                    .map(|k| match kind {
                        FidelityKind::PoissonKL => t.weight.at(k),
                        _ => t.weight.at(k) * t.data[k],
                    })
                    .collect();
                add(&t.op, v);
            }
        }
        for t in self.huber.iter().filter(|t| matches!(t.param, ParamId::Lambda(_))) {
            let v = (0..t.dim * n).map(|r| t.weight.at(r % n)).collect();
            add(&t.op, v);
        }
        total
    }

    /// `z`, `h_γ(z)` and the Newton blocks of every Huber term. With `duals`
    /// the max-form blocks use the dual-projected modification.
    pub fn linearize(&self, x: &[f64], duals: Option<&[Vec<f64>]>) -> Vec<TermLinearization> {
        let n = self.n;
        self.huber
            .iter()
            .enumerate()
            .map(|(ti, t)| {
                let z = self.term_z(t, x);
                let mut h = vec![0.0; z.len()];
                let mut blocks = Vec::with_capacity(n);
                for k in 0..n {
                    let p = Self::pixel(&z, t.dim, n, k);
                    let hk = h_dyn(t.dim, &p[..t.dim], t.gamma, t.variant);
                    for c in 0..t.dim {
                        h[c * n + k] = hk[c];
                    }
                    let qk = duals.map(|q| Self::pixel(&q[ti], t.dim, n, k));
                    blocks.push(block_dyn(
                        t.dim,
                        &p[..t.dim],
                        qk.as_ref().map(|q| &q[..t.dim]),
                        t.weight.at(k),
                        t.gamma,
                        t.variant,
                    ));
                }
                TermLinearization { h, blocks }
            })
            .collect()
    }

    /// Emits every entry of the Newton matrix in a fixed order.
    fn emit(&self, x: &[f64], lin: &[TermLinearization], mut sink: impl FnMut(usize, usize, f64)) {
        let n = self.n;
        for i in 0..self.nx {
            sink(i, i, 0.0);
        }
        for i in 0..self.quad.nrows {
            for (j, v) in self.quad.row(i) {
                sink(i, j, v);
            }
        }
        for (t, l) in self.huber.iter().zip(lin) {
            let d = t.dim;
            for k in 0..n {
                let w = t.weight.at(k);
                let b = &l.blocks[k];
                for c in 0..d {
                    for c2 in 0..d {
                        let coef = w * b[c * d + c2];
                        for (i, a) in t.op.row(c * n + k) {
                            for (j, a2) in t.op.row(c2 * n + k) {
                                sink(i, j, coef * a * a2);
                            }
                        }
                    }
                }
            }
        }
        for t in &self.smooth {
            let y = t.op.matvec(x);
            for (k, &yk) in y.iter().enumerate() {
                let coef = t.eval(k, yk).map(|e| t.weight.at(k) * e.2).unwrap_or(0.0);
                for (i, a) in t.op.row(k) {
                    for (j, a2) in t.op.row(k) {
                        sink(i, j, coef * a * a2);
                    }
                }
            }
        }
    }

    /// Newton matrix of `R` at `x` for the given linearisation.
    pub fn jacobian(&self, x: &[f64], lin: &[TermLinearization]) -> CsrMatrix {
        let pattern = self.pattern.get_or_init(|| {
            let mut coords = Vec::new();
            self.emit(x, lin, |i, j, _| coords.push((i, j)));
            Pattern::new(self.nx, self.nx, &coords)
        });
        let mut values = Vec::with_capacity(pattern.len());
        self.emit(x, lin, |_, _, v| values.push(v));
        pattern.assemble(&values)
    }

    /// Jacobian of the multiplied residual `D ⊙ R`:
    /// `diag(mask ⊙ R) + diag(D) J`.
    pub fn multiplied_jacobian(&self, x: &[f64], r: &[f64], j: CsrMatrix) -> CsrMatrix {
        let mut m = j;
        m.scale_rows(&self.multiplier(x));
        for i in 0..self.n {
            for p in m.indptr[i]..m.indptr[i + 1] {
                if m.indices[p] == i {
                    m.data[p] += r[i];
                }
            }
        }
        m
    }

    /// Largest step in `(0, 1]` keeping the image strictly positive, with a
    /// fraction-to-boundary margin.
    pub fn max_step(&self, x: &[f64], dx: &[f64]) -> f64 {
        if !self.needs_positive {
            return 1.0;
        }
        let mut t: f64 = 1.0;
        for k in 0..self.n {
            if dx[k] < 0.0 {
                t = t.min(0.995 * x[k] / -dx[k]);
            }
        }
        t
    }

    /// Per-pixel derivative fields `∂E/∂θ` contracted with `p`, one per
    /// parameter: `h² ⟨h_γ(z)ₖ, (A p)ₖ⟩` for Huber terms and
    /// `h² φ'(yₖ) (B p)ₖ` for smooth terms.
    pub fn param_fields(&self, x: &[f64], p: &[f64]) -> Result<Vec<(ParamId, Vec<f64>)>> {
        let n = self.n;
        let area = self.cell_area();
        let mut out: Vec<(ParamId, Vec<f64>)> = Vec::new();
        let mut push = |id: ParamId, f: Vec<f64>| match out.iter_mut().find(|(i, _)| *i == id) {
            Some((_, g)) => g.iter_mut().zip(&f).for_each(|(a, b)| *a += b),
            None => out.push((id, f)),
        };
        for t in &self.huber {
            let z = self.term_z(t, x);
            let ap = t.op.matvec(p);
            let mut g = vec![0.0; n];
            for (k, gk) in g.iter_mut().enumerate() {
                let zk = Self::pixel(&z, t.dim, n, k);
                let h = h_dyn(t.dim, &zk[..t.dim], t.gamma, t.variant);
                *gk = area * (0..t.dim).map(|c| h[c] * ap[c * n + k]).sum::<f64>();
            }
            push(t.param, g);
        }
        for t in &self.smooth {
            let Some(id) = t.param else { continue };
            let y = t.op.matvec(x);
            let bp = t.op.matvec(p);
            let mut g = vec![0.0; n];
            for k in 0..n {
                let d1 = t.eval(k, y[k]).ok_or(Error::Domain { pixels: 1 })?.1;
                g[k] = area * d1 * bp[k];
            }
            push(id, g);
        }
        Ok(out)
    }

    pub fn package(&self, problem: &DenoiseProblem, out: RunOutput) -> DenoiseResult {
        let n = self.n;
        let spec = self.spec;
        let x = &out.state.x;
        let u = ImageGrid { spec, values: x[..n].to_vec() };
        let mut aux = Aux::default();
        match self.regularizer {
            Regularizer::TV { .. } => {}
            Regularizer::TGV2 { .. } => {
                aux.w = Some(VectorField { spec, x: x[n..2 * n].to_vec(), y: x[2 * n..3 * n].to_vec() })
            }
            Regularizer::ICTV { .. } => aux.v = Some(ImageGrid { spec, values: x[n..2 * n].to_vec() }),
        }
        if self.has_n {
            aux.n = Some(ImageGrid { spec, values: x[self.nx - n..].to_vec() });
        }
        let s2 = std::f64::consts::SQRT_2;
        let duals = self
            .huber
            .iter()
            .zip(&out.state.q)
            .map(|(t, q)| {
                let dual = match t.dim {
                    1 => Dual::Scalar(ImageGrid { spec, values: q.clone() }),
                    2 => Dual::Vector(VectorField { spec, x: q[..n].to_vec(), y: q[n..].to_vec() }),
                    _ => Dual::Tensor(TensorField {
                        spec,
                        t11: q[..n].to_vec(),
                        t12: q[n..2 * n].iter().map(|v| v / s2).collect(),
                        t22: q[2 * n..].to_vec(),
                    }),
                };
                TermDual { name: t.name.clone(), dual, bound: t.weight.clone() }
            })
            .collect();
        let active_set = problem.positivity.map(|p| u.values.iter().filter(|&&v| v < p.delta).count());
        DenoiseResult {
            u,
            duals,
            aux,
            trace: out.trace,
            energies: out.energies,
            converged: out.converged,
            iterations: out.iterations,
            halvings: out.halvings,
            direction_fallbacks: out.direction_fallbacks,
            active_set,
            state: out.state,
        }
    }
}
