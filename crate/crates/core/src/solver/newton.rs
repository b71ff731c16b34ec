//! Globalised primal–dual semismooth Newton iteration.

use crate::error::{Error, Result};
use crate::grid::dot;
use crate::huber::HuberVariant;
use crate::sparse::{CsrMatrix, LinearSolver};

use super::model::{Model, TermLinearization};
use super::SolverOptions;

const ARMIJO_C: f64 = 1e-4;
/// Relative energy change below which values are treated as roundoff.
const ENERGY_ROUNDOFF: f64 = 1e-12;

/// Stacked primal unknown and one dual vector per Huber term.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct State {
    pub x: Vec<f64>,
    pub q: Vec<Vec<f64>>,
}

impl State {
    pub fn compatible(&self, model: &Model) -> bool {
        self.x.len() == model.nx
            && self.q.len() == model.huber.len()
            && self.q.iter().zip(&model.huber).all(|(q, t)| q.len() == t.dim * model.n)
    }
}

pub(crate) struct RunOutput {
    pub state: State,
    pub trace: Vec<f64>,
    pub energies: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub halvings: usize,
    pub direction_fallbacks: usize,
}

fn nonpositive(model: &Model, x: &[f64]) -> usize {
    x[..model.n].iter().filter(|&&v| v <= 0.0).count()
}

fn solve_or_fail(
    solver: &mut LinearSolver,
    a: &CsrMatrix,
    rhs: &[f64],
    iteration: usize,
) -> Result<Vec<f64>> {
    solver.solve(a, rhs, false).map_err(|e| Error::SingularSystem { iteration, detail: e.to_string() })
}

fn is_descent(r: &[f64], dx: &[f64]) -> bool {
    let s = dot(r, dx);
    s < 0.0 && s.is_finite()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    /// Newton step, with the projected duals when enabled.
    Newton,
    /// Newton step with the consistent duals.
    Plain,
    /// `−R`.
    Residual,
}

/// The residual direction is not scaled, so it may need a much shorter step.
const RESIDUAL_EXTRA_HALVINGS: usize = 40;

/// Backtracking on the energy from `t = max_step`. Accepts the Armijo
/// condition, or a step in the roundoff band that still lowers the residual.
#[allow(clippy::too_many_arguments)]
fn line_search(
    model: &Model,
    x: &[f64],
    dx: &[f64],
    e: f64,
    r: &[f64],
    rel: f64,
    max_halvings: usize,
    halvings: &mut usize,
) -> Option<(Vec<f64>, f64, f64)> {
    let slope = model.cell_area() * dot(r, dx);
    let eps_e = ENERGY_ROUNDOFF * e.abs().max(f64::MIN_POSITIVE);
    let mut t = model.max_step(x, dx);
    for _ in 0..=max_halvings {
        let xt: Vec<f64> = x.iter().zip(dx).map(|(a, b)| a + t * b).collect();
        let et = model.energy(&xt);
        if et.is_finite() {
            let armijo = et <= e + ARMIJO_C * t * slope;
            let flat = !armijo
                && et <= e + eps_e
                && -slope * t <= 100.0 * eps_e
                && model.residual(&xt).map(|r| r.2 < rel).unwrap_or(false);
            if armijo || flat {
                return Some((xt, et, t));
            }
        }
        t *= 0.5;
        *halvings += 1;
    }
    None
}

pub(crate) fn run(model: &Model, mut state: State, opts: &SolverOptions) -> Result<RunOutput> {
    let n = model.n;
    let mut solver = LinearSolver::new();
    let mut e = model.energy(&state.x);
    if !e.is_finite() {
        return Err(Error::Domain { pixels: nonpositive(model, &state.x) });
    }
    let mut out = RunOutput {
        state: state.clone(),
        trace: Vec::new(),
        energies: Vec::new(),
        converged: false,
        iterations: 0,
        halvings: 0,
        direction_fallbacks: 0,
    };
    let mut it = 0;
    loop {
        let (r, g, rel) = model
            .residual(&state.x)
            .ok_or_else(|| Error::Domain { pixels: nonpositive(model, &state.x) })?;
        out.trace.push(rel);
        out.energies.push(e);
        if rel <= opts.tol {
            out.converged = true;
            break;
        }
        if it >= opts.max_iter {
            break;
        }

        // Newton direction, then the fallbacks, until the energy line search
        // accepts a step.
        let duals = if opts.modified { Some(state.q.as_slice()) } else { None };
        let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
        let mut accepted = None;
        let mut plain_tried = false;
        for kind in [Direction::Newton, Direction::Plain, Direction::Residual] {
            let found = match kind {
                Direction::Newton => {
                    let lin = model.linearize(&state.x, duals);
                    let j = model.jacobian(&state.x, &lin);
                    let mut dx = None;
                    if model.multiplied {
                        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
                        let jg = model.multiplied_jacobian(&state.x, &r, j.clone());
                        if let Ok(d) = solver.solve(&jg, &neg_g, false) {
                            if is_descent(&r, &d) {
                                dx = Some(d);
                            }
                        }
                    }
                    if dx.is_none() {
                        match solver.solve(&j, &neg_r, false) {
                            Ok(d) if is_descent(&r, &d) => dx = Some(d),
                            Ok(_) => {}
                            Err(e) if duals.is_none() => {
                                return Err(Error::SingularSystem { iteration: it, detail: e.to_string() })
                            }
                            Err(_) => {}
                        }
                    }
                    plain_tried = duals.is_none() && !model.multiplied;
                    dx.map(|d| (lin, d))
                }
                Direction::Plain if plain_tried => None,
                Direction::Plain => {
                    // The plain Newton derivative is symmetric positive
                    // semidefinite.
                    let lin = model.linearize(&state.x, None);
                    let ju = model.jacobian(&state.x, &lin);
                    let d = solve_or_fail(&mut solver, &ju, &neg_r, it)?;
                    is_descent(&r, &d).then_some((lin, d))
                }
                Direction::Residual => {
                    out.direction_fallbacks += 1;
                    log::debug!("iteration {it}: falling back to -R");
                    Some((model.linearize(&state.x, None), neg_r.clone()))
                }
            };
            let Some((lin, dx)) = found else { continue };
            let extra = if kind == Direction::Residual { RESIDUAL_EXTRA_HALVINGS } else { 0 };
            match line_search(model, &state.x, &dx, e, &r, rel, opts.max_halvings + extra, &mut out.halvings) {
                Some((x_new, e_new, t)) => {
                    accepted = Some((x_new, e_new, t, lin, dx));
                    break;
                }
                None => log::debug!("iteration {it}: line search failed for the {kind:?} direction"),
            }
        }
        let Some((x_new, e_new, t, lin, dx)) = accepted else {
            log::warn!("iteration {it}: energy line search failed (residual {rel:e})");
            break;
        };

        // Dual update from the linearisation that produced the step.
        update_duals(model, &mut state.q, &lin, &dx, t);
        state.x = x_new;
        if model.huber.iter().any(|h| h.variant == HuberVariant::Smooth) {
            let fresh = model.linearize(&state.x, None);
            for ((q, l), term) in state.q.iter_mut().zip(&fresh).zip(&model.huber) {
                if term.variant == HuberVariant::Smooth {
                    for c in 0..term.dim {
                        for k in 0..n {
                            q[c * n + k] = term.weight.at(k) * l.h[c * n + k];
                        }
                    }
                }
            }
        }
        e = e_new;
        it += 1;
    }
    out.iterations = it;
    out.state = state;
    Ok(out)
}

/// `q ← P(q + t·(w h(z) − q + w C A dx))`, with `P` the pointwise projection
/// onto `|qₖ| ≤ wₖ`.
fn update_duals(model: &Model, q: &mut [Vec<f64>], lin: &[TermLinearization], dx: &[f64], t: f64) {
    let n = model.n;
    for ((qt, l), term) in q.iter_mut().zip(lin).zip(&model.huber) {
        let d = term.dim;
        let adx = term.op.matvec(dx);
        for k in 0..n {
            let w = term.weight.at(k);
            let b = &l.blocks[k];
            let mut nq = [0.0; 3];
            for c in 0..d {
                let mut cad = 0.0;
                for c2 in 0..d {
                    cad += b[c * d + c2] * adx[c2 * n + k];
                }
                let cur = qt[c * n + k];
                let dq = w * l.h[c * n + k] - cur + w * cad;
                nq[c] = cur + t * dq;
            }
            let norm = nq[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = if norm > w { w / norm } else { 1.0 };
            for c in 0..d {
                qt[c * n + k] = s * nq[c];
            }
        }
    }
}
