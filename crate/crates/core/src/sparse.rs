//! Compressed sparse row matrices and the linear solver used by the Newton
//! iterations.
//!
//! Factorisations go through faer's sparse LU. Our CSR arrays are handed to
//! faer unchanged as the CSC description of the transpose, so `A x = b` is a
//! transposed solve against that factorisation and `Aᵀ p = r` a plain one.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::Mat;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    /// Explicit zeros are kept so that the pattern only depends on the
    /// coordinates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let coords: Vec<(usize, usize)> = triplets.iter().map(|&(i, j, _)| (i, j)).collect();
        let pattern = Pattern::new(nrows, ncols, &coords);
        let values: Vec<f64> = triplets.iter().map(|t| t.2).collect();
        pattern.assemble(&values)
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CsrMatrix { nrows, ncols, indptr: vec![0; nrows + 1], indices: vec![], data: vec![] }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.data[r].iter().copied())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn transpose_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            for (j, v) in self.row(i) {
                out[j] += v * yi;
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &j in &self.indices {
            counts[j + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut indices = vec![0; self.nnz()];
        let mut data = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                let slot = next[j];
                indices[slot] = i;
                data[slot] = v;
                next[j] += 1;
            }
        }
        CsrMatrix { nrows: self.ncols, ncols: self.nrows, indptr: counts, indices, data }
    }

    /// Sparse product `self · other`.
    pub fn matmul(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, other.nrows, "inner dimensions differ");
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut data = Vec::new();
        for i in 0..self.nrows {
            let start = indices.len();
            for (k, a) in self.row(i) {
                for (j, b) in other.row(k) {
                    if mark[j] != i {
                        mark[j] = i;
                        indices.push(j);
                        acc[j] = 0.0;
                    }
                    acc[j] += a * b;
                }
            }
            indices[start..].sort_unstable();
            data.extend(indices[start..].iter().map(|&j| acc[j]));
            indptr.push(indices.len());
        }
        CsrMatrix { nrows: self.nrows, ncols: other.ncols, indptr, indices, data }
    }

    /// Returns `(row, col, value)` for every stored entry.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows).flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v))).collect()
    }

    /// Multiplies every column `j` by `s[j]`.
    pub fn scale_columns(&mut self, s: &[f64]) {
        for (v, &j) in self.data.iter_mut().zip(&self.indices) {
            *v *= s[j];
        }
    }

    /// Multiplies every row `i` by `s[i]`.
    pub fn scale_rows(&mut self, s: &[f64]) {
        for i in 0..self.nrows {
            for p in self.indptr[i]..self.indptr[i + 1] {
                self.data[p] *= s[i];
            }
        }
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.ncols]; self.nrows];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        m
    }

    fn same_pattern(&self, other: &CsrMatrix) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.indptr == other.indptr
            && self.indices == other.indices
    }
}

/// A fixed sparsity pattern together with the slot of every input
/// coordinate. Re-assembling a matrix from values emitted in the same order
/// then skips all sorting.
#[derive(Debug, Clone)]
pub struct Pattern {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    slots: Vec<usize>,
}

impl Pattern {
    pub fn new(nrows: usize, ncols: usize, coords: &[(usize, usize)]) -> Self {
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_unstable_by_key(|&t| coords[t]);
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::new();
        let mut slots = vec![0usize; coords.len()];
        let mut last: Option<(usize, usize)> = None;
        for &t in &order {
            let (i, j) = coords[t];
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) outside {nrows}x{ncols}");
            if last != Some((i, j)) {
                indices.push(j);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
            slots[t] = indices.len() - 1;
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Pattern { nrows, ncols, indptr, indices, slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// `values[t]` belongs to the `t`-th coordinate given to [`Pattern::new`].
    pub fn assemble(&self, values: &[f64]) -> CsrMatrix {
        assert_eq!(values.len(), self.slots.len(), "value count does not match the pattern");
        let mut data = vec![0.0; self.indices.len()];
        for (&s, &v) in self.slots.iter().zip(values) {
            data[s] += v;
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            data,
        }
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("structurally singular matrix")]
    Structural,
    #[error("no accurate solution: backward error {0:e} after the direct and iterative solves")]
    Inaccurate(f64),
}

/// Normwise backward error `‖b − A x‖ / (‖A‖‖x‖ + ‖b‖)` in the ∞-norm.
pub fn backward_error(a_norm: f64, x: &[f64], b: &[f64], r: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let den = a_norm * inf(x) + inf(b);
    if den == 0.0 {
        return 0.0;
    }
    let e = inf(r) / den;
    if e.is_finite() && x.iter().all(|v| v.is_finite()) {
        e
    } else {
        f64::INFINITY
    }
}

/// Target backward error for every solve.
pub const SOLVE_TOL: f64 = 1e-10;

/// Sparse LU with reuse of the symbolic analysis across matrices that share
/// a pattern, and a BiCGSTAB fallback.
#[derive(Default)]
pub struct LinearSolver {
    symbolic: Option<(CsrMatrix, SymbolicLu<usize>)>,
    /// Number of solves that needed the iterative fallback.
    pub fallbacks: usize,
}

impl LinearSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solves `A x = b`, or `Aᵀ x = b` with `transpose`.
    pub fn solve(&mut self, a: &CsrMatrix, b: &[f64], transpose: bool) -> Result<Vec<f64>, SolveError> {
        if a.nrows != a.ncols {
            return Err(SolveError::NotSquare(a.nrows, a.ncols));
        }
        let n = a.nrows;
        if b.iter().all(|&v| v == 0.0) {
            return Ok(vec![0.0; n]);
        }
        let apply = |x: &[f64]| if transpose { a.transpose_matvec(x) } else { a.matvec(x) };
        let a_norm = if transpose { a.transpose().norm_inf() } else { a.norm_inf() };
        let residual = |x: &[f64]| -> Vec<f64> { apply(x).iter().zip(b).map(|(ax, bi)| bi - ax).collect() };

        let mut best: Option<(Vec<f64>, f64)> = None;
        if let Ok(lu) = self.factor(a) {
            let solve = |rhs: &[f64]| -> Vec<f64> {
                let m = Mat::from_fn(n, 1, |i, _| rhs[i]);
                // The factorisation is of Aᵀ.
                let x = if transpose { lu.solve(&m) } else { lu.solve_transpose(&m) };
                (0..n).map(|i| x[(i, 0)]).collect()
            };
            let mut x = solve(b);
            let mut r = residual(&x);
            let mut err = backward_error(a_norm, &x, b, &r);
            for _ in 0..2 {
                if err <= SOLVE_TOL || !err.is_finite() {
                    break;
                }
                let dx = solve(&r);
                let cand: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
                let rc = residual(&cand);
                let ec = backward_error(a_norm, &cand, b, &rc);
                if ec >= err {
                    break;
                }
                x = cand;
                r = rc;
                err = ec;
            }
            if err <= SOLVE_TOL {
                return Ok(x);
            }
            if err.is_finite() {
                best = Some((x, err));
            }
        }

        self.fallbacks += 1;
        let x0 = best.as_ref().map(|(x, _)| x.clone()).unwrap_or_else(|| vec![0.0; n]);
        let at;
        let op = if transpose {
            at = a.transpose();
            &at
        } else {
            a
        };
        let x = bicgstab(op, b, x0, 1e-14, 20 * n.max(100));
        let r = residual(&x);
        let err = backward_error(a_norm, &x, b, &r);
        if err <= SOLVE_TOL {
            log::debug!("iterative fallback reached backward error {err:e}");
            return Ok(x);
        }
        match best {
            Some((_, e)) if e <= err => Err(SolveError::Inaccurate(e)),
            _ => Err(SolveError::Inaccurate(err)),
        }
    }

    fn factor(&mut self, a: &CsrMatrix) -> Result<Lu<usize, f64>, SolveError> {
        let n = a.nrows;
        let sym_ref = SymbolicSparseColMatRef::new_checked(n, n, &a.indptr, None, &a.indices);
        let reuse = matches!(&self.symbolic, Some((p, _)) if p.same_pattern(a));
        if !reuse {
            let sym = SymbolicLu::try_new(sym_ref).map_err(|_| SolveError::Structural)?;
            let skeleton = CsrMatrix {
                nrows: a.nrows,
                ncols: a.ncols,
                indptr: a.indptr.clone(),
                indices: a.indices.clone(),
                data: vec![],
            };
            self.symbolic = Some((skeleton, sym));
        }
        let sym = self.symbolic.as_ref().map(|(_, s)| s.clone()).expect("symbolic factorisation present");
        let mat = SparseColMatRef::new(sym_ref, &a.data);
        Lu::try_new_with_symbolic(sym, mat).map_err(|_| SolveError::Structural)
    }
}

/// Jacobi-preconditioned BiCGSTAB. Returns the last iterate; callers judge
/// its accuracy themselves.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], mut x: Vec<f64>, rtol: f64, max_iter: usize) -> Vec<f64> {
    let n = b.len();
    let mut diag = vec![1.0; n];
    for (i, d) in diag.iter_mut().enumerate() {
        let v: f64 = a.row(i).filter(|&(j, _)| j == i).map(|(_, v)| v).sum();
        if v.abs() > 0.0 {
            *d = 1.0 / v;
        }
    }
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let precond = |v: &[f64]| v.iter().zip(&diag).map(|(a, d)| a * d).collect::<Vec<f64>>();
    let ax = a.matvec(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let r_hat = r.clone();
    let b_norm = dot(b, b).sqrt().max(f64::MIN_POSITIVE);
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut best = (dot(&r, &r).sqrt(), x.clone());
    for _ in 0..max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let y = precond(&p);
        v = a.matvec(&y);
        let den = dot(&r_hat, &v);
        if den == 0.0 {
            break;
        }
        alpha = rho / den;
        let s: Vec<f64> = r.iter().zip(&v).map(|(r, v)| r - alpha * v).collect();
        let z = precond(&s);
        let t = a.matvec(&z);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        let rn = dot(&r, &r).sqrt();
        if !rn.is_finite() {
            break;
        }
        if rn < best.0 {
            best = (rn, x.clone());
        }
        if rn <= rtol * b_norm || omega == 0.0 {
            break;
        }
    }
    best.1
}
