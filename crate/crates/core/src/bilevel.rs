//! Upper-level optimisation: BFGS with Armijo backtracking over the scalar
//! weights, a grid-search oracle, and projected limited-memory quasi-Newton
//! for a spatially varying fidelity weight.
//!
//! Scalar weights are optimised in log-space; gradients are chain-ruled and
//! every reported value is in the original space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{self, cost, Which};
use crate::error::{Error, Result};
use crate::grid::{dot, ImageGrid};
use crate::sampling::{self, SampleState, VarianceTest};
use crate::solver::{self, DenoiseProblem, DenoiseResult, ParamValue, SolverOptions};

/// One training example.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub f0: ImageGrid,
    pub f: ImageGrid,
    pub id: String,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub pairs: Vec<TrainingPair>,
}

impl TrainingSet {
    pub fn new(pairs: Vec<TrainingPair>) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::InvalidInput("training set is empty".into()))?;
        let spec = first.f0.spec;
        for p in &pairs {
            for g in [&p.f0, &p.f] {
                if !g.spec.same_shape(&spec) {
                    return Err(Error::DimensionMismatch {
                        expected: (spec.width, spec.height),
                        found: (g.spec.width, g.spec.height),
                    });
                }
            }
        }
        Ok(TrainingSet { pairs })
    }

    pub fn single(f0: ImageGrid, f: ImageGrid) -> Result<Self> {
        Self::new(vec![TrainingPair { f0, f, id: "0".into() }])
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub value: ParamValue,
    pub frozen: bool,
}

/// Fidelity weights `λ` and regulariser weights `α` of a problem template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub lambdas: Vec<NamedParam>,
    pub alphas: Vec<NamedParam>,
}

fn fidelity_name(problem: &DenoiseProblem, i: usize) -> String {
    if problem.fidelities.len() == 1 {
        "lambda".into()
    } else {
        format!("lambda{}", i + 1)
    }
}

impl ParamSet {
    /// Reads the weights of `problem`, all unfrozen.
    pub fn from_problem(problem: &DenoiseProblem) -> Self {
        let lambdas = problem
            .fidelities
            .iter()
            .enumerate()
            .map(|(i, f)| NamedParam { name: fidelity_name(problem, i), value: f.weight.clone(), frozen: false })
            .collect();
        let alphas = problem
            .regularizer
            .alphas()
            .iter()
            .zip(problem.regularizer.alpha_names())
            .map(|(&a, n)| NamedParam { name: n.to_string(), value: ParamValue::Scalar(a), frozen: false })
            .collect();
        ParamSet { lambdas, alphas }
    }

    /// Writes the weights into a copy of `template`.
    pub fn apply(&self, template: &DenoiseProblem) -> Result<DenoiseProblem> {
        if self.lambdas.len() != template.fidelities.len() || self.alphas.len() != template.regularizer.alphas().len() {
            return Err(Error::InvalidInput("parameter set does not match the problem template".into()));
        }
        let mut p = template.clone();
        for (fid, l) in p.fidelities.iter_mut().zip(&self.lambdas) {
            fid.weight = l.value.clone();
        }
        let a: Vec<f64> = self
            .alphas
            .iter()
            .map(|a| a.value.scalar().ok_or_else(|| Error::InvalidInput("regulariser weights must be scalars".into())))
            .collect::<Result<_>>()?;
        p.regularizer = p.regularizer.with_alphas(&a)?;
        Ok(p)
    }

    fn entry(&self, w: Which) -> &NamedParam {
        match w {
            Which::Lambda(i) => &self.lambdas[i],
            Which::Alpha(j) => &self.alphas[j],
        }
    }

    fn entry_mut(&mut self, w: Which) -> &mut NamedParam {
        match w {
            Which::Lambda(i) => &mut self.lambdas[i],
            Which::Alpha(j) => &mut self.alphas[j],
        }
    }

    /// Unfrozen entries.
    pub fn free(&self) -> Vec<Which> {
        let l = (0..self.lambdas.len()).map(Which::Lambda);
        let a = (0..self.alphas.len()).map(Which::Alpha);
        l.chain(a).filter(|&w| !self.entry(w).frozen).collect()
    }

    pub fn scalar(&self, w: Which) -> Option<f64> {
        self.entry(w).value.scalar()
    }

    pub fn set_scalar(&mut self, w: Which, v: f64) {
        self.entry_mut(w).value = ParamValue::Scalar(v);
    }

    pub fn name(&self, w: Which) -> &str {
        &self.entry(w).name
    }

    pub fn freeze(&mut self, w: Which, frozen: bool) {
        self.entry_mut(w).frozen = frozen;
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.lambdas.iter().chain(&self.alphas) {
            if !p.value.is_nonnegative() {
                return Err(Error::InvalidInput(format!("parameter {} must be nonnegative", p.name)));
            }
        }
        Ok(())
    }
}

/// Dense quasi-Newton matrix over the free scalar weights (log-space).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BfgsState {
    pub b: Vec<Vec<f64>>,
    pub point: Vec<f64>,
    pub grad: Vec<f64>,
    pub iteration: usize,
    /// `(cost, step length, curvature accepted)` per update.
    pub history: Vec<(f64, f64, bool)>,
    /// The identity has been rescaled after the first step.
    pub scaled: bool,
}

impl BfgsState {
    pub fn new(point: Vec<f64>, grad: Vec<f64>) -> Self {
        let n = point.len();
        let b = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        BfgsState { b, point, grad, iteration: 0, history: Vec::new(), scaled: false }
    }

    pub fn dim(&self) -> usize {
        self.point.len()
    }

    /// `B d = −g`.
    pub fn direction(&self, g: &[f64]) -> Option<Vec<f64>> {
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        dense_solve(&self.b, &rhs)
    }
}

fn matvec(b: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    b.iter().map(|row| dot(row, x)).collect()
}

/// Gaussian elimination with partial pivoting for the small BFGS systems.
fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(r, &v)| r.iter().copied().chain([v]).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))?;
        if m[p][c] == 0.0 || !m[p][c].is_finite() {
            return None;
        }
        m.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..=n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for c in (0..n).rev() {
        let s: f64 = (c + 1..n).map(|k| m[c][k] * x[k]).sum();
        x[c] = (m[c][n] - s) / m[c][c];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Classical BFGS update `B⁺ = B − (Bs⊗Bs)/⟨Bs,s⟩ + (z⊗z)/⟨z,s⟩`, skipped when
/// `⟨z,s⟩ ≤ 0`.
pub fn bfgs_update(state: &BfgsState, s: &[f64], z: &[f64]) -> Result<BfgsState> {
    if s.len() != state.dim() || z.len() != state.dim() {
        return Err(Error::DimensionMismatch { expected: (state.dim(), 1), found: (s.len(), z.len()) });
    }
    let mut next = state.clone();
    let zs = dot(z, s);
    let accepted = zs > 0.0 && zs.is_finite();
    if accepted {
        let bs = matvec(&state.b, s);
        let sbs = dot(&bs, s);
        if !(sbs > 0.0) {
            return Err(Error::CorruptState(sbs));
        }
        for i in 0..state.dim() {
            for j in 0..state.dim() {
                next.b[i][j] += -bs[i] * bs[j] / sbs + z[i] * z[j] / zs;
            }
        }
    }
    next.history.push((f64::NAN, f64::NAN, accepted));
    Ok(next)
}

/// Outcome of [`armijo_search`].
#[derive(Debug, Clone)]
pub struct ArmijoStep<T> {
    pub t: f64,
    pub point: Vec<f64>,
    pub cost: f64,
    pub halvings: usize,
    pub payload: T,
}

/// Largest `t ∈ {1, shrink, shrink², …}` with
/// `F(x + t d) ≤ F(x) + β t ⟨∇F(x), d⟩`. Trial points where the cost cannot
/// be evaluated because a lower-level solve failed count as rejections.
pub fn armijo_search<T>(
    point: &[f64],
    direction: &[f64],
    cost0: f64,
    grad: &[f64],
    beta: f64,
    shrink: f64,
    max_halvings: usize,
    mut cost_fn: impl FnMut(&[f64]) -> Result<(f64, T)>,
) -> Result<ArmijoStep<T>> {
    if !(beta > 0.0 && beta <= 1.0 && shrink > 0.0 && shrink < 1.0) {
        return Err(Error::InvalidInput("Armijo needs beta in (0,1] and shrink in (0,1)".into()));
    }
    let slope = dot(grad, direction);
    if !(slope < 0.0) {
        return Err(Error::NotDescent(slope));
    }
    let mut t = 1.0;
    for halvings in 0..=max_halvings {
        let trial: Vec<f64> = point.iter().zip(direction).map(|(x, d)| x + t * d).collect();
        match cost_fn(&trial) {
            Ok((c, payload)) if c.is_finite() && c <= cost0 + beta * t * slope => {
                return Ok(ArmijoStep { t, point: trial, cost: c, halvings, payload });
            }
            Ok(_) => {}
            Err(e) if e.is_solver_failure() => log::debug!("trial step {t:e} rejected: {e}"),
            Err(e) => return Err(e),
        }
        t *= shrink;
    }
    Err(Error::LineSearch { halvings: max_halvings, slope })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnOptions {
    pub beta: f64,
    pub shrink: f64,
    pub max_halvings: usize,
    /// Stop when `‖∇F‖ ≤ gtol·F` (log-space gradient).
    pub gtol: f64,
    /// Stop when `|ΔF| ≤ ftol·F`.
    pub ftol: f64,
    /// Stop when the log-space step is below this in max-norm.
    pub xtol: f64,
    pub max_iter: usize,
    /// Length (in log units) of the first steepest-descent step.
    pub first_step: f64,
    pub solver: SolverOptions,
}

impl Default for LearnOptions {
    fn default() -> Self {
        LearnOptions {
            beta: 1e-4,
            shrink: 0.5,
            max_halvings: 40,
            gtol: 1e-6,
            ftol: 1e-10,
            xtol: 1e-10,
            max_iter: 100,
            first_step: 1.0,
            solver: SolverOptions { tol: 1e-10, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Gradient,
    CostChange,
    Step,
    MaxIterations,
    LineSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub sample_size: usize,
    /// Batch cost at the iterate.
    pub cost: f64,
    /// Log-space gradient norm at the iterate.
    pub grad_norm: f64,
    /// Free weights at the iterate, original space.
    pub params: Vec<f64>,
    /// Accepted Armijo step (0 for the initial record).
    pub step: f64,
    pub halvings: usize,
    /// Cost before the step, cost after it on the same sample, and the
    /// directional derivative, for checking the sufficient-decrease condition.
    pub cost_before: f64,
    pub trial_cost: f64,
    pub slope: f64,
    pub curvature_accepted: bool,
    pub cum_solves: usize,
    pub cum_adjoint_solves: usize,
    pub variance: Option<VarianceTest>,
}

impl IterationRecord {
    /// Does the accepted step satisfy the sufficient-decrease condition?
    pub fn satisfies_armijo(&self, beta: f64) -> bool {
        self.iter == 0 || self.trial_cost <= self.cost_before + beta * self.step * self.slope
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LearnOutcome {
    pub params: ParamSet,
    pub history: Vec<IterationRecord>,
    pub stop: StopReason,
    /// Batch cost at the returned parameters.
    pub cost: f64,
    /// Full-set cost at the returned parameters.
    pub full_cost: f64,
    pub solves: usize,
    pub adjoint_solves: usize,
    pub iterations: usize,
}

/// How the training subset is chosen at each iteration.
#[derive(Debug, Clone)]
pub(crate) enum SamplePolicy {
    Full,
    Dynamic(SampleState),
}

/// Per-pair solutions and gradients on a sample, in sorted index order.
struct Batch {
    indices: Vec<usize>,
    costs: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

impl Batch {
    fn cost(&self) -> f64 {
        mean(&self.costs)
    }

    fn grad(&self) -> Vec<f64> {
        mean_vec(&self.grads)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_vec(v: &[Vec<f64>]) -> Vec<f64> {
    let d = v[0].len();
    let mut m = vec![0.0; d];
    for g in v {
        for (a, b) in m.iter_mut().zip(g) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= v.len() as f64);
    m
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Caps the rayon pool from `VARILEARN_THREADS` the first time it is called.
pub fn configure_threads() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        if let Ok(v) = std::env::var("VARILEARN_THREADS") {
            match v.trim().parse::<usize>() {
                Ok(n) => {
                    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                        log::debug!("thread pool already configured: {e}");
                    }
                }
                Err(_) => log::warn!("ignoring VARILEARN_THREADS={v}"),
            }
        }
    });
}

/// Shared state of one learning run.
pub(crate) struct Engine<'a> {
    training: &'a TrainingSet,
    template: &'a DenoiseProblem,
    opts: &'a LearnOptions,
    free: Vec<Which>,
    base: ParamSet,
    warm: Vec<Option<DenoiseResult>>,
    pub solves: usize,
    pub adjoint_solves: usize,
    iteration: usize,
}

impl<'a> Engine<'a> {
    pub fn new(training: &'a TrainingSet, template: &'a DenoiseProblem, base: ParamSet, opts: &'a LearnOptions) -> Result<Self> {
        base.validate()?;
        base.apply(template)?;
        let free = base.free();
        if free.is_empty() {
            return Err(Error::InvalidInput("no unfrozen parameter to optimise".into()));
        }
        for &w in &free {
            match base.scalar(w) {
                Some(v) if v > 0.0 => {}
                Some(_) => return Err(Error::InvalidInput(format!("{} must be > 0 to learn it", base.name(w)))),
                None => {
                    return Err(Error::InvalidInput(format!(
                        "{} is spatial; use the spatial learner or freeze it",
                        base.name(w)
                    )))
                }
            }
        }
        configure_threads();
        Ok(Engine {
            training,
            template,
            opts,
            free,
            base,
            warm: vec![None; training.len()],
            solves: 0,
            adjoint_solves: 0,
            iteration: 0,
        })
    }

    pub fn log_point(&self) -> Vec<f64> {
        self.free.iter().map(|&w| self.base.scalar(w).expect("scalar").ln()).collect()
    }

    fn params_at(&self, y: &[f64]) -> ParamSet {
        let mut p = self.base.clone();
        for (&w, &v) in self.free.iter().zip(y) {
            p.set_scalar(w, v.exp());
        }
        p
    }

    fn annotate(&self, pair: usize, e: Error) -> Error {
        Error::Pair { pair, iteration: self.iteration, source: Box::new(e) }
    }

    fn problems(&self, y: &[f64], indices: &[usize]) -> Result<Vec<DenoiseProblem>> {
        let p = self.params_at(y).apply(self.template)?;
        Ok(indices.iter().map(|&i| p.clone().with_data(&self.training.pairs[i].f)).collect())
    }

    /// Lower-level solves on `indices`, warm-started.
    fn solve(&mut self, y: &[f64], indices: &[usize]) -> Result<(Vec<f64>, Vec<DenoiseResult>)> {
        let problems = self.problems(y, indices)?;
        self.solves += indices.len();
        let warm = &self.warm;
        let opts = &self.opts.solver;
        let out: Vec<Result<DenoiseResult>> = indices
            .par_iter()
            .zip(problems.par_iter())
            .map(|(&i, p)| solver::solve_converged(p, opts, warm[i].as_ref()))
            .collect();
        let mut results = Vec::with_capacity(out.len());
        let mut costs = Vec::with_capacity(out.len());
        for (&i, r) in indices.iter().zip(out) {
            let r = r.map_err(|e| self.annotate(i, e))?;
            costs.push(cost(&r.u, &self.training.pairs[i].f0)?);
            results.push(r);
        }
        Ok((costs, results))
    }

    /// Adjoint gradients (log-space) for solved pairs; stores them as warm
    /// starts.
    fn gradients(&mut self, y: &[f64], indices: &[usize], results: Vec<DenoiseResult>) -> Result<Vec<Vec<f64>>> {
        let problems = self.problems(y, indices)?;
        self.adjoint_solves += indices.len();
        let pairs = &self.training.pairs;
        let free = &self.free;
        let theta: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        let out: Vec<Result<Vec<f64>>> = indices
            .par_iter()
            .zip(problems.par_iter())
            .zip(results.par_iter())
            .map(|((&i, p), r)| {
                let adj = adjoint::solve_adjoint(r, p, &pairs[i].f0)?;
                let ev = adjoint::reduced_gradient(r, &adj, p, &pairs[i].f0)?;
                Ok(free.iter().zip(&theta).map(|(w, t)| t * w.of(&ev).expect("scalar")).collect())
            })
            .collect();
        let mut grads = Vec::with_capacity(out.len());
        for (&i, g) in indices.iter().zip(out) {
            grads.push(g.map_err(|e| self.annotate(i, e))?);
        }
        for (&i, r) in indices.iter().zip(results) {
            self.warm[i] = Some(r);
        }
        Ok(grads)
    }

    fn batch(&mut self, y: &[f64], indices: &[usize]) -> Result<Batch> {
        let (costs, results) = self.solve(y, indices)?;
        let grads = self.gradients(y, indices, results)?;
        Ok(Batch { indices: indices.to_vec(), costs, grads })
    }

    /// Extends `batch` (evaluated at `y`) to `indices`, solving only the new
    /// pairs.
    fn extend(&mut self, y: &[f64], batch: Batch, indices: &[usize]) -> Result<Batch> {
        let missing: Vec<usize> = indices.iter().copied().filter(|i| !batch.indices.contains(i)).collect();
        let extra = if missing.is_empty() { None } else { Some(self.batch(y, &missing)?) };
        let mut costs = Vec::with_capacity(indices.len());
        let mut grads = Vec::with_capacity(indices.len());
        for &i in indices {
            if let Some(p) = batch.indices.iter().position(|&j| j == i) {
                costs.push(batch.costs[p]);
                grads.push(batch.grads[p].clone());
            } else {
                let e = extra.as_ref().expect("missing pairs were solved");
                let p = e.indices.iter().position(|&j| j == i).expect("solved");
                costs.push(e.costs[p]);
                grads.push(e.grads[p].clone());
            }
        }
        Ok(Batch { indices: indices.to_vec(), costs, grads })
    }
}

/// BFGS loop shared by [`learn`] and the dynamic-sampling variant.
pub(crate) fn run(
    training: &TrainingSet,
    template: &DenoiseProblem,
    init: &ParamSet,
    opts: &LearnOptions,
    mut policy: SamplePolicy,
) -> Result<LearnOutcome> {
    let k_total = training.len();
    let mut eng = Engine::new(training, template, init.clone(), opts)?;
    let all: Vec<usize> = (0..k_total).collect();
    let mut sample = match &policy {
        SamplePolicy::Full => all.clone(),
        SamplePolicy::Dynamic(s) => s.indices.clone(),
    };
    let mut y = eng.log_point();
    let batch = eng.batch(&y, &sample)?;
    let mut f = batch.cost();
    let mut g = batch.grad();
    let mut state = BfgsState::new(y.clone(), g.clone());
    let record = |it: usize, eng: &Engine, y: &[f64], size: usize, f: f64, g: &[f64]| IterationRecord {
        iter: it,
        sample_size: size,
        cost: f,
        grad_norm: norm(g),
        params: y.iter().map(|v| v.exp()).collect(),
        step: 0.0,
        halvings: 0,
        cost_before: f,
        trial_cost: f,
        slope: 0.0,
        curvature_accepted: false,
        cum_solves: eng.solves,
        cum_adjoint_solves: eng.adjoint_solves,
        variance: None,
    };
    let mut history = vec![record(0, &eng, &y, sample.len(), f, &g)];
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    if norm(&g) <= opts.gtol * f.abs() {
        stop = StopReason::Gradient;
    } else {
        for it in 1..=opts.max_iter {
            eng.iteration = it;
            let mut d = if state.scaled {
                state.direction(&g).unwrap_or_else(|| g.iter().map(|v| -v).collect())
            } else {
                let gn = norm(&g);
                g.iter().map(|v| -v / gn * opts.first_step).collect()
            };
            if !(dot(&g, &d) < 0.0) {
                log::warn!("quasi-Newton direction is not a descent direction; resetting to steepest descent");
                d = g.iter().map(|v| -v).collect();
            }
            let slope = dot(&g, &d);
            let idx = sample.clone();
            let step = armijo_search(&y, &d, f, &g, opts.beta, opts.shrink, opts.max_halvings, |trial| {
                let (costs, results) = eng.solve(trial, &idx)?;
                Ok((mean(&costs), (costs, results)))
            });
            let step = match step {
                Ok(s) => s,
                Err(Error::LineSearch { .. }) => {
                    stop = StopReason::LineSearch;
                    break;
                }
                Err(e) => return Err(e),
            };
            iterations = it;
            let (costs, results) = step.payload;
            let y_new = step.point;
            let grads = eng.gradients(&y_new, &idx, results)?;
            let same = Batch { indices: idx.clone(), costs, grads };
            let f_new = same.cost();
            let g_new = same.grad();
            let s: Vec<f64> = y_new.iter().zip(&y).map(|(a, b)| a - b).collect();
            let z: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            if !state.scaled && dot(&z, &s) > 0.0 {
                let c = dot(&z, &z) / dot(&z, &s);
                for (i, row) in state.b.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if i == j { c } else { 0.0 };
                    }
                }
                state.scaled = true;
            }
            let prev_state = state.clone();
            state = bfgs_update(&state, &s, &z)?;
            let accepted = state.history.last().map(|h| h.2).unwrap_or(false);
            if let Some(h) = state.history.last_mut() {
                *h = (f_new, step.t, accepted);
            }
            if !state.scaled {
                // Still at the unscaled identity after a rejected first update.
                state = BfgsState { history: state.history.clone(), ..prev_state };
            }
            state.point = y_new.clone();
            state.iteration = it;

            // Sample for the next iteration.
            let mut variance = None;
            let next_batch = match &mut policy {
                SamplePolicy::Full => same,
                SamplePolicy::Dynamic(ss) => {
                    let test = sampling::variance_test(&same.grads, &g_new, ss.theta, k_total, same.indices.len());
                    variance = Some(test.clone());
                    let next = if test.pass {
                        sampling::resample(ss, k_total)
                    } else {
                        let s2 = sampling::augment_sample(ss, &same.grads, &g_new, k_total);
                        *ss = s2;
                        ss.indices.clone()
                    };
                    ss.indices = next.clone();
                    if next == same.indices {
                        same
                    } else {
                        // Pairs that left the sample are dropped; new ones are solved.
                        eng.extend(&y_new, same, &next)?
                    }
                }
            };
            let f_prev = f;
            y = y_new;
            sample = next_batch.indices.clone();
            f = next_batch.cost();
            g = next_batch.grad();
            state.grad = g.clone();
            history.push(IterationRecord {
                iter: it,
                sample_size: sample.len(),
                cost: f,
                grad_norm: norm(&g),
                params: y.iter().map(|v| v.exp()).collect(),
                step: step.t,
                halvings: step.halvings,
                cost_before: f_prev,
                trial_cost: f_new,
                slope,
                curvature_accepted: accepted,
                cum_solves: eng.solves,
                cum_adjoint_solves: eng.adjoint_solves,
                variance,
            });
            if norm(&g) <= opts.gtol * f.abs() {
                stop = StopReason::Gradient;
                break;
            }
            if (f_prev - f_new).abs() <= opts.ftol * f_prev.abs() {
                stop = StopReason::CostChange;
                break;
            }
            if s.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= opts.xtol {
                stop = StopReason::Step;
                break;
            }
        }
    }
    let params = eng.params_at(&y);
    let cost_batch = f;
    let full_cost = if sample.len() == k_total {
        f
    } else {
        let rest: Vec<usize> = all.clone();
        let (costs, results) = eng.solve(&y, &rest)?;
        for (&i, r) in rest.iter().zip(results) {
            eng.warm[i] = Some(r);
        }
        mean(&costs)
    };
    Ok(LearnOutcome {
        params,
        history,
        stop,
        cost: cost_batch,
        full_cost,
        solves: eng.solves,
        adjoint_solves: eng.adjoint_solves,
        iterations,
    })
}

/// Reduced-form BFGS over the unfrozen scalar weights on the whole training
/// set.
pub fn learn(training: &TrainingSet, template: &DenoiseProblem, init: &ParamSet, opts: &LearnOptions) -> Result<LearnOutcome> {
    run(training, template, init, opts, SamplePolicy::Full)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub params: Vec<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridOutcome {
    pub best: ParamSet,
    pub best_index: usize,
    pub table: Vec<GridRow>,
    pub solves: usize,
}

/// Evaluates the reduced cost at every grid point, warm-starting each pair
/// from the previous point.
pub fn grid_search(
    training: &TrainingSet,
    template: &DenoiseProblem,
    grid: &[ParamSet],
    solver_opts: &SolverOptions,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("grid is empty".into()));
    }
    configure_threads();
    let mut warm: Vec<Option<DenoiseResult>> = vec![None; training.len()];
    let mut table = Vec::with_capacity(grid.len());
    let mut solves = 0;
    for (gi, ps) in grid.iter().enumerate() {
        ps.validate()?;
        let p = ps.apply(template)?;
        let out: Vec<Result<DenoiseResult>> = training
            .pairs
            .par_iter()
            .zip(warm.par_iter())
            .map(|(pair, w)| solver::solve_converged(&p.clone().with_data(&pair.f), solver_opts, w.as_ref()))
            .collect();
        solves += training.len();
        let mut costs = Vec::with_capacity(out.len());
        for (i, r) in out.into_iter().enumerate() {
            let r = r.map_err(|e| Error::Pair { pair: i, iteration: gi, source: Box::new(e) })?;
            costs.push(cost(&r.u, &training.pairs[i].f0)?);
            warm[i] = Some(r);
        }
        let values = ps
            .lambdas
            .iter()
            .chain(&ps.alphas)
            .map(|e| e.value.mean())
            .collect();
        table.push(GridRow { params: values, cost: mean(&costs) });
    }
    let best_index = (0..table.len())
        .min_by(|&a, &b| table[a].cost.total_cmp(&table[b].cost))
        .expect("nonempty");
    Ok(GridOutcome { best: grid[best_index].clone(), best_index, table, solves })
}

/// Options of the spatial learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialOptions {
    pub beta: f64,
    pub shrink: f64,
    pub max_halvings: usize,
    pub ftol: f64,
    pub gtol: f64,
    pub max_iter: usize,
    /// Stored correction pairs.
    pub memory: usize,
    /// Length `ℓ` of the screened-Laplacian smoothing `(I − ℓ²Δ)⁻¹` applied
    /// to the gradient field (0 disables it).
    pub smoothing: f64,
    /// Size of the first step relative to the mean weight.
    pub first_step: f64,
    pub solver: SolverOptions,
}

impl Default for SpatialOptions {
    fn default() -> Self {
        SpatialOptions {
            beta: 1e-4,
            shrink: 0.5,
            max_halvings: 30,
            ftol: 1e-10,
            gtol: 1e-8,
            max_iter: 50,
            memory: 5,
            smoothing: 0.0,
            first_step: 0.5,
            solver: SolverOptions { tol: 1e-10, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialRecord {
    pub iter: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub mean_lambda: f64,
    pub cum_solves: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpatialOutcome {
    pub params: ParamSet,
    pub lambda: ImageGrid,
    pub history: Vec<SpatialRecord>,
    pub stop: StopReason,
    pub cost: f64,
    pub solves: usize,
}

/// Projected limited-memory quasi-Newton on a spatial fidelity weight.
///
/// The weight being learned is the single unfrozen fidelity weight of
/// `init`; it may be given as a scalar, in which case it is expanded to a
/// constant field. Every other entry must be frozen.
pub fn learn_spatial(
    training: &TrainingSet,
    template: &DenoiseProblem,
    init: &ParamSet,
    opts: &SpatialOptions,
) -> Result<SpatialOutcome> {
    init.validate()?;
    let free = init.free();
    let which = match free.as_slice() {
        [Which::Lambda(i)] => *i,
        _ => return Err(Error::InvalidInput("exactly one unfrozen fidelity weight is required".into())),
    };
    configure_threads();
    let spec = training.pairs[0].f.spec;
    let n = spec.len();
    let start = match &init.lambdas[which].value {
        ParamValue::Scalar(v) => ImageGrid::constant(spec, *v),
        ParamValue::Field(g) => g.clone(),
    };
    let mut base = init.clone();
    let smoother = if opts.smoothing > 0.0 { Some(ScreenedLaplacian::new(spec, opts.smoothing)) } else { None };
    let mut warm: Vec<Option<DenoiseResult>> = vec![None; training.len()];
    let mut solves = 0usize;

    let mut evaluate = |lam: &[f64], grad: bool, warm: &mut Vec<Option<DenoiseResult>>, solves: &mut usize| -> Result<(f64, Vec<f64>)> {
        base.lambdas[which].value = ParamValue::Field(ImageGrid { spec, values: lam.to_vec() });
        let p = base.apply(template)?;
        *solves += training.len();
        let out: Vec<Result<(f64, Vec<f64>, DenoiseResult)>> = training
            .pairs
            .par_iter()
            .zip(warm.par_iter())
            .map(|(pair, w)| {
                let pp = p.clone().with_data(&pair.f);
                let r = solver::solve_converged(&pp, &opts.solver, w.as_ref())?;
                let c = cost(&r.u, &pair.f0)?;
                let g = if grad {
                    let adj = adjoint::solve_adjoint(&r, &pp, &pair.f0)?;
                    let ev = adjoint::reduced_gradient(&r, &adj, &pp, &pair.f0)?;
                    match &ev.grad_lambda[which] {
                        ParamValue::Field(g) => g.values.clone(),
                        ParamValue::Scalar(_) => unreachable!("weight is a field"),
                    }
                } else {
                    Vec::new()
                };
                Ok((c, g, r))
            })
            .collect();
        let k = training.len() as f64;
        let mut total = 0.0;
        let mut g = vec![0.0; if grad { n } else { 0 }];
        for (i, o) in out.into_iter().enumerate() {
            let (c, gi, r) = o.map_err(|e| Error::Pair { pair: i, iteration: 0, source: Box::new(e) })?;
            total += c;
            for (a, b) in g.iter_mut().zip(&gi) {
                *a += b;
            }
            warm[i] = Some(r);
        }
        g.iter_mut().for_each(|a| *a /= k);
        Ok((total / k, g))
    };

    let mut lam = start.values.clone();
    let (mut f, mut g) = evaluate(&lam, true, &mut warm, &mut solves)?;
    let mut history = vec![SpatialRecord { iter: 0, cost: f, grad_norm: norm(&g), step: 0.0, mean_lambda: mean(&lam), cum_solves: solves }];
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut stop = StopReason::MaxIterations;
    for it in 1..=opts.max_iter {
        let pg = match &smoother {
            Some(s) => s.apply(&g)?,
            None => g.clone(),
        };
        let mut d = lbfgs_direction(&pairs, &g, &pg, smoother.as_ref())?;
        if pairs.is_empty() {
            let scale = opts.first_step * mean(&lam).max(f64::MIN_POSITIVE) / pg.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
            d = pg.iter().map(|v| -scale * v).collect();
        }
        // Variables held at the bound with an outward direction stay fixed.
        for k in 0..n {
            if lam[k] <= 0.0 && d[k] < 0.0 {
                d[k] = 0.0;
            }
        }
        if !(dot(&g, &d) < 0.0) {
            d = pg.iter().map(|v| -v).collect();
            pairs.clear();
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = lam.iter().zip(&d).map(|(l, dk)| (l + t * dk).max(0.0)).collect();
            let step: Vec<f64> = trial.iter().zip(&lam).map(|(a, b)| a - b).collect();
            match evaluate(&trial, false, &mut warm, &mut solves) {
                Ok((c, _)) if c <= f + opts.beta * dot(&g, &step) => {
                    accepted = Some((trial, c));
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_solver_failure() => log::debug!("spatial trial rejected: {e}"),
                Err(e) => return Err(e),
            }
            t *= opts.shrink;
        }
        let Some((trial, _)) = accepted else {
            stop = StopReason::LineSearch;
            break;
        };
        let (f_new, g_new) = evaluate(&trial, true, &mut warm, &mut solves)?;
        let s: Vec<f64> = trial.iter().zip(&lam).map(|(a, b)| a - b).collect();
        let z: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &z) > 1e-16 * norm(&s) * norm(&z) {
            pairs.push((s.clone(), z));
            if pairs.len() > opts.memory {
                pairs.remove(0);
            }
        }
        let f_prev = f;
        lam = trial;
        f = f_new;
        g = g_new;
        history.push(SpatialRecord { iter: it, cost: f, grad_norm: norm(&g), step: t, mean_lambda: mean(&lam), cum_solves: solves });
        if (f_prev - f).abs() <= opts.ftol * f_prev.abs() {
            stop = StopReason::CostChange;
            break;
        }
        let pgrad: f64 = (0..n)
            .map(|k| if lam[k] <= 0.0 { g[k].min(0.0) } else { g[k] })
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if pgrad <= opts.gtol * f.abs() {
            stop = StopReason::Gradient;
            break;
        }
    }
    let lambda = ImageGrid { spec, values: lam };
    let mut params = init.clone();
    params.lambdas[which].value = ParamValue::Field(lambda.clone());
    Ok(SpatialOutcome { params, lambda, history, stop, cost: f, solves })
}

/// Two-loop recursion with the initial matrix `c·P`, `P` the smoother.
fn lbfgs_direction(
    pairs: &[(Vec<f64>, Vec<f64>)],
    g: &[f64],
    pg: &[f64],
    smoother: Option<&ScreenedLaplacian>,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(pg.iter().map(|v| -v).collect());
    }
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, z) in pairs.iter().rev() {
        let rho = 1.0 / dot(z, s);
        let a = rho * dot(s, &q);
        q.iter_mut().zip(z).for_each(|(qi, zi)| *qi -= a * zi);
        alphas.push((a, rho));
    }
    let (s_last, z_last) = pairs.last().expect("nonempty");
    let mut r = match smoother {
        Some(sm) => sm.apply(&q)?,
        None => q,
    };
    let pz = match smoother {
        Some(sm) => sm.apply(z_last)?,
        None => z_last.clone(),
    };
    let c = dot(s_last, z_last) / dot(z_last, &pz);
    r.iter_mut().for_each(|v| *v *= c);
    for ((s, z), (a, rho)) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(z, &r);
        r.iter_mut().zip(s).for_each(|(ri, si)| *ri += (a - b) * si);
    }
    Ok(r.iter().map(|v| -v).collect())
}

/// `(I − ℓ² Δ)⁻¹` with the five-point Laplacian.
struct ScreenedLaplacian {
    matrix: crate::sparse::CsrMatrix,
    solver: std::sync::Mutex<crate::sparse::LinearSolver>,
}

impl ScreenedLaplacian {
    fn new(spec: crate::grid::GridSpec, ell: f64) -> Self {
        let g = crate::solver::grad_matrix(&spec);
        let lap = g.transpose().matmul(&g);
        let n = spec.len();
        let mut t: Vec<(usize, usize, f64)> = lap.triplets().into_iter().map(|(i, j, v)| (i, j, ell * ell * v)).collect();
        t.extend((0..n).map(|k| (k, k, 1.0)));
        ScreenedLaplacian {
            matrix: crate::sparse::CsrMatrix::from_triplets(n, n, &t),
            solver: std::sync::Mutex::new(crate::sparse::LinearSolver::new()),
        }
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut s = self.solver.lock().expect("solver lock");
        s.solve(&self.matrix, v, false).map_err(|e| Error::SingularSystem { iteration: 0, detail: e.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_update_for_equal_pair() {
        let s0 = BfgsState::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        let s1 = bfgs_update(&s0, &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(s1.b, s0.b);
        assert!(s1.history[0].2);
    }

    #[test]
    fn negative_curvature_is_skipped() {
        let s0 = BfgsState::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        let s1 = bfgs_update(&s0, &[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert_eq!(s1.b, s0.b);
        assert!(!s1.history[0].2);
    }

    #[test]
    fn corrupted_matrix_is_reported() {
        let mut s0 = BfgsState::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        s0.b = vec![vec![-1.0, 0.0], vec![0.0, -1.0]];
        assert!(matches!(bfgs_update(&s0, &[1.0, 0.0], &[1.0, 0.0]), Err(Error::CorruptState(_))));
    }

    #[test]
    fn updates_recover_quadratic_hessian() {
        let h = [[3.0, 1.0], [1.0, 2.0]];
        let hv = |v: &[f64]| vec![h[0][0] * v[0] + h[0][1] * v[1], h[1][0] * v[0] + h[1][1] * v[1]];
        let mut st = BfgsState::new(vec![1.0, 1.0], hv(&[1.0, 1.0]));
        // Exact line searches on a quadratic: BFGS terminates in n steps with
        // B = H.
        let mut x = vec![1.0, 1.0];
        for _ in 0..2 {
            let g = hv(&x);
            let d = st.direction(&g).unwrap();
            let t = -dot(&g, &d) / dot(&d, &hv(&d));
            let s: Vec<f64> = d.iter().map(|v| t * v).collect();
            let z = hv(&s);
            st = bfgs_update(&st, &s, &z).unwrap();
            x = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((st.b[i][j] - h[i][j]).abs() <= 1e-8, "{:?}", st.b);
            }
        }
    }

    #[test]
    fn armijo_accepts_exact_newton_step_on_quadratic() {
        let f = |x: &[f64]| Ok((0.5 * (x[0] - 2.0).powi(2), ()));
        let s = armijo_search(&[0.0], &[2.0], 2.0, &[-2.0], 1e-4, 0.5, 40, f).unwrap();
        assert_eq!(s.t, 1.0);
        assert_eq!(s.point, vec![2.0]);
    }

    #[test]
    fn armijo_rejects_ascent_direction() {
        let f = |x: &[f64]| Ok((x[0] * x[0], ()));
        assert!(matches!(armijo_search(&[1.0], &[1.0], 1.0, &[2.0], 1e-4, 0.5, 40, f), Err(Error::NotDescent(_))));
    }

    #[test]
    fn armijo_backtracks_until_sufficient_decrease() {
        let f = |x: &[f64]| Ok((x[0] * x[0], ()));
        let s = armijo_search(&[1.0], &[-10.0], 1.0, &[2.0], 1e-4, 0.5, 40, f).unwrap();
        assert!(s.cost <= 1.0 + 1e-4 * s.t * (-20.0));
        assert!(s.t < 1.0);
    }
}
