//! Lower-level denoising solvers.
//!
//! Every configuration is reduced to one energy over a stacked unknown `x`
//! (the image `u` first, then any auxiliary fields):
//!
//! ```text
//! E(x) = h² [ μ/2 ‖∇x‖² + Σⱼ Σₖ wⱼₖ ψⱼ(|(Aⱼx − bⱼ)ₖ|) + Σᵢ Σₖ λᵢₖ φᵢ((Bᵢx)ₖ) ]
//! ```
//!
//! with Huberised norms `ψ` and smooth pointwise terms `φ`. The minimiser is
//! found by a primal–dual semismooth Newton method on `∇E = 0`, with the
//! globalising dual projection in the Newton matrix and an energy line
//! search.

mod model;
mod newton;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::{FidelityKind, FidelityModel};
use crate::grid::{ImageGrid, TensorField, VectorField};
use crate::huber::{HuberParam, HuberVariant};

pub(crate) use model::{grad_matrix, Model, ParamId};
pub(crate) use newton::State;

/// A weight that is either one number or one value per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamValue {
    Scalar(f64),
    Field(ImageGrid),
}

impl ParamValue {
    #[inline]
    pub fn at(&self, k: usize) -> f64 {
        match self {
            ParamValue::Scalar(v) => *v,
            ParamValue::Field(g) => g.values[k],
        }
    }

    pub fn scalar(&self) -> Option<f64> {
        match self {
            ParamValue::Scalar(v) => Some(*v),
            ParamValue::Field(_) => None,
        }
    }

    /// Pixel mean for fields, the value itself for scalars.
    pub fn mean(&self) -> f64 {
        match self {
            ParamValue::Scalar(v) => *v,
            ParamValue::Field(g) => g.mean(),
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        match self {
            ParamValue::Scalar(v) => *v >= 0.0 && v.is_finite(),
            ParamValue::Field(g) => g.values.iter().all(|v| *v >= 0.0 && v.is_finite()),
        }
    }
}

/// Regulariser and its weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Regularizer {
    /// `α |∇u|`
    TV { alpha: f64 },
    /// `α₁ |∇u − w| + α₂ |Ew|`
    TGV2 { alpha1: f64, alpha2: f64 },
    /// `α₁ |∇u − ∇v| + α₂ |∇²v|`
    ICTV { alpha1: f64, alpha2: f64 },
}

impl Regularizer {
    pub fn alphas(&self) -> Vec<f64> {
        match *self {
            Regularizer::TV { alpha } => vec![alpha],
            Regularizer::TGV2 { alpha1, alpha2 } | Regularizer::ICTV { alpha1, alpha2 } => {
                vec![alpha1, alpha2]
            }
        }
    }

    pub fn alpha_names(&self) -> &'static [&'static str] {
        match self {
            Regularizer::TV { .. } => &["alpha"],
            _ => &["alpha1", "alpha2"],
        }
    }

    /// Same regulariser with its weights replaced.
    pub fn with_alphas(&self, a: &[f64]) -> Result<Regularizer> {
        let n = self.alphas().len();
        if a.len() != n {
            return Err(Error::InvalidInput(format!("{} expects {n} weights, got {}", self.name(), a.len())));
        }
        Ok(match self {
            Regularizer::TV { .. } => Regularizer::TV { alpha: a[0] },
            Regularizer::TGV2 { .. } => Regularizer::TGV2 { alpha1: a[0], alpha2: a[1] },
            Regularizer::ICTV { .. } => Regularizer::ICTV { alpha1: a[0], alpha2: a[1] },
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::TV { .. } => "tv",
            Regularizer::TGV2 { .. } => "tgv2",
            Regularizer::ICTV { .. } => "ictv",
        }
    }

    /// Parses `tv`, `tgv2` or `ictv` with the given weights.
    pub fn from_name(name: &str, alphas: &[f64]) -> Result<Regularizer> {
        let template = match name.to_ascii_lowercase().as_str() {
            "tv" => Regularizer::TV { alpha: 1.0 },
            "tgv" | "tgv2" => Regularizer::TGV2 { alpha1: 1.0, alpha2: 1.0 },
            "ictv" => Regularizer::ICTV { alpha1: 1.0, alpha2: 1.0 },
            other => return Err(Error::InvalidInput(format!("unknown regulariser `{other}`"))),
        };
        template.with_alphas(alphas)
    }
}

/// How several fidelities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    /// `Σ λᵢ φᵢ(u)`
    #[default]
    WeightedSum,
    /// `min over n of λ₁ |n|_γ + λ₂/2 ‖f − u − n‖²`
    InfConvL1L2,
    /// `λ₁/2 ‖u − f‖² + λ₂ ∫ (u − f log u)`, solved in the multiplied form
    GaussPoissonProduct,
}

/// Quadratic penalty `η/2 ‖min(u − δ, 0)‖²` keeping `u` away from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Positivity {
    pub eta: f64,
    pub delta: f64,
}

impl Default for Positivity {
    fn default() -> Self {
        Positivity { eta: 1e6, delta: 1e-2 }
    }
}

#[derive(Debug, Clone)]
pub struct WeightedFidelity {
    pub weight: ParamValue,
    pub model: FidelityModel,
}

#[derive(Debug, Clone)]
pub struct DenoiseProblem {
    pub regularizer: Regularizer,
    pub fidelities: Vec<WeightedFidelity>,
    pub combine: Combine,
    pub mu: f64,
    pub gamma: HuberParam,
    pub variant: HuberVariant,
    pub positivity: Option<Positivity>,
}

pub const DEFAULT_MU: f64 = 1e-12;
pub const DEFAULT_GAMMA: f64 = 100.0;

impl DenoiseProblem {
    fn base(regularizer: Regularizer, fidelities: Vec<WeightedFidelity>, combine: Combine) -> Self {
        DenoiseProblem {
            regularizer,
            fidelities,
            combine,
            mu: DEFAULT_MU,
            gamma: HuberParam::new(DEFAULT_GAMMA).expect("positive"),
            variant: HuberVariant::Max,
            positivity: None,
        }
    }

    /// `R(u) + λ/2 ‖u − f‖²`
    pub fn gaussian(regularizer: Regularizer, f: ImageGrid, lambda: f64) -> Self {
        let fid = WeightedFidelity { weight: ParamValue::Scalar(lambda), model: FidelityModel::gaussian(f) };
        Self::base(regularizer, vec![fid], Combine::WeightedSum)
    }

    /// `R(u) + λ ∫ (u − f log u)` with the positivity penalty.
    pub fn poisson(regularizer: Regularizer, f: ImageGrid, lambda: f64, positivity: Positivity) -> Result<Self> {
        let model = FidelityModel::new(FidelityKind::PoissonKL, f, HuberParam::INFINITE)?;
        let fid = WeightedFidelity { weight: ParamValue::Scalar(lambda), model };
        let mut p = Self::base(regularizer, vec![fid], Combine::WeightedSum);
        p.positivity = Some(positivity);
        Ok(p)
    }

    /// `R(u) + λ Σ |u − f|_γ`, the Huberised L¹ fidelity for impulse noise.
    pub fn impulse(regularizer: Regularizer, f: ImageGrid, lambda: f64, gamma_l1: HuberParam) -> Self {
        let model = FidelityModel { kind: FidelityKind::ImpulseL1Huber, data: f, gamma: gamma_l1 };
        let fid = WeightedFidelity { weight: ParamValue::Scalar(lambda), model };
        Self::base(regularizer, vec![fid], Combine::WeightedSum)
    }

    /// Infimal convolution of a Huberised L¹ (weight `λ₁`) and an L² (weight
    /// `λ₂`) fidelity.
    pub fn infconv_l1l2(regularizer: Regularizer, f: ImageGrid, lambda1: f64, lambda2: f64, gamma_l1: HuberParam) -> Self {
        let l1 = FidelityModel { kind: FidelityKind::ImpulseL1Huber, data: f.clone(), gamma: gamma_l1 };
        let fids = vec![
            WeightedFidelity { weight: ParamValue::Scalar(lambda1), model: l1 },
            WeightedFidelity { weight: ParamValue::Scalar(lambda2), model: FidelityModel::gaussian(f) },
        ];
        Self::base(regularizer, fids, Combine::InfConvL1L2)
    }

    /// `R(u) + λ₁/2 ‖u − f‖² + λ₂ ∫ (u − f log u)`.
    pub fn gauss_poisson(regularizer: Regularizer, f: ImageGrid, lambda1: f64, lambda2: f64) -> Result<Self> {
        let poisson = FidelityModel::new(FidelityKind::PoissonKL, f.clone(), HuberParam::INFINITE)?;
        let fids = vec![
            WeightedFidelity { weight: ParamValue::Scalar(lambda1), model: FidelityModel::gaussian(f) },
            WeightedFidelity { weight: ParamValue::Scalar(lambda2), model: poisson },
        ];
        Ok(Self::base(regularizer, fids, Combine::GaussPoissonProduct))
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_gamma(mut self, gamma: HuberParam) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_variant(mut self, variant: HuberVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_positivity(mut self, positivity: Option<Positivity>) -> Self {
        self.positivity = positivity;
        self
    }

    /// The observation, taken from the first fidelity.
    pub fn data(&self) -> &ImageGrid {
        &self.fidelities[0].model.data
    }

    /// Replaces the observation of every fidelity.
    pub fn with_data(mut self, f: &ImageGrid) -> Self {
        for fid in &mut self.fidelities {
            fid.model.data = f.clone();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fidelities.is_empty() {
            return Err(Error::InvalidInput("at least one fidelity is required".into()));
        }
        let spec = self.data().spec;
        spec.validate()?;
        for fid in &self.fidelities {
            fid.model.data.check_same_shape(self.data())?;
            if !fid.weight.is_nonnegative() {
                return Err(Error::InvalidInput("fidelity weights must be finite and nonnegative".into()));
            }
            if let ParamValue::Field(g) = &fid.weight {
                if !g.spec.same_shape(&spec) {
                    return Err(Error::DimensionMismatch {
                        expected: (spec.width, spec.height),
                        found: (g.spec.width, g.spec.height),
                    });
                }
            }
            if fid.model.kind == FidelityKind::PoissonKL && fid.model.data.values.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidInput("Poisson data must be nonnegative".into()));
            }
            if fid.model.kind == FidelityKind::ImpulseL1Huber && fid.model.gamma.is_infinite() {
                return Err(Error::InvalidInput("the L1 fidelity needs a finite Huber parameter".into()));
            }
        }
        if self.regularizer.alphas().iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidInput("regulariser weights must be finite and nonnegative".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidInput(format!("mu must be >= 0, got {}", self.mu)));
        }
        if self.gamma.is_infinite() {
            return Err(Error::InvalidInput("the Newton solver needs a finite Huber parameter".into()));
        }
        if self.variant == HuberVariant::Smooth && self.gamma.gamma() <= 0.5 {
            return Err(Error::InvalidInput("the smooth Huber form needs gamma > 1/2".into()));
        }
        if let Some(p) = self.positivity {
            if !(p.eta > 0.0 && p.delta > 0.0 && p.eta.is_finite() && p.delta.is_finite()) {
                return Err(Error::InvalidInput("positivity needs eta > 0 and delta > 0".into()));
            }
        }
        let kinds: Vec<FidelityKind> = self.fidelities.iter().map(|f| f.model.kind).collect();
        match self.combine {
            Combine::WeightedSum => {}
            Combine::InfConvL1L2 => {
                let ok = kinds.len() == 2
                    && kinds.contains(&FidelityKind::ImpulseL1Huber)
                    && kinds.contains(&FidelityKind::GaussianL2);
                if !ok {
                    return Err(Error::InvalidInput("inf-convolution needs one L1 and one Gaussian fidelity".into()));
                }
            }
            Combine::GaussPoissonProduct => {
                let ok = kinds.len() == 2
                    && kinds.contains(&FidelityKind::PoissonKL)
                    && kinds.contains(&FidelityKind::GaussianL2);
                if !ok {
                    return Err(Error::InvalidInput("the Gauss-Poisson model needs one Gaussian and one Poisson fidelity".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Relative residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// Use the dual-projected Newton matrix (max-form Huber only).
    pub modified: bool,
    /// Step halvings allowed by the energy line search.
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-7, max_iter: 100, modified: true, max_halvings: 20 }
    }
}

/// Dual variable of one Huber term.
#[derive(Debug, Clone, PartialEq)]
pub enum Dual {
    Scalar(ImageGrid),
    Vector(VectorField),
    Tensor(TensorField),
}

impl Dual {
    /// Pointwise Euclidean norm (tensors in Frobenius norm).
    pub fn pointwise_norm(&self) -> Vec<f64> {
        match self {
            Dual::Scalar(g) => g.values.iter().map(|v| v.abs()).collect(),
            Dual::Vector(q) => q.x.iter().zip(&q.y).map(|(a, b)| a.hypot(*b)).collect(),
            Dual::Tensor(t) => (0..t.t11.len())
                .map(|k| (t.t11[k].powi(2) + 2.0 * t.t12[k].powi(2) + t.t22[k].powi(2)).sqrt())
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TermDual {
    /// What the dual belongs to (`alpha`, `alpha1`, `alpha2` or `lambda_l1`).
    pub name: String,
    pub dual: Dual,
    /// Pointwise bound of the dual, i.e. the term weight.
    pub bound: ParamValue,
}

#[derive(Debug, Clone, Default)]
pub struct Aux {
    /// TGV² vector field.
    pub w: Option<VectorField>,
    /// ICTV second image.
    pub v: Option<ImageGrid>,
    /// Impulse component of the inf-convolution split.
    pub n: Option<ImageGrid>,
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    pub u: ImageGrid,
    pub duals: Vec<TermDual>,
    pub aux: Aux,
    /// Relative residual at every iterate.
    pub trace: Vec<f64>,
    /// Energy at every iterate.
    pub energies: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Total step halvings made by the line search.
    pub halvings: usize,
    /// Iterations whose Newton direction had to be replaced.
    pub direction_fallbacks: usize,
    /// Pixels with `u < δ` at exit when the positivity penalty is present.
    pub active_set: Option<usize>,
    pub(crate) state: State,
}

impl DenoiseResult {
    pub fn residual(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn energy(&self) -> f64 {
        self.energies.last().copied().unwrap_or(f64::NAN)
    }
}

/// Solves any supported configuration.
pub fn solve(problem: &DenoiseProblem, opts: &SolverOptions, warm_start: Option<&DenoiseResult>) -> Result<DenoiseResult> {
    problem.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidInput("tol must be > 0".into()));
    }
    let model = Model::build(problem)?;
    let init = match warm_start {
        Some(r) if r.state.compatible(&model) => r.state.clone(),
        Some(_) => {
            log::warn!("warm start does not match the problem layout; starting cold");
            model.initial_state(problem)
        }
        None => model.initial_state(problem),
    };
    let out = newton::run(&model, init, opts)?;
    if !out.converged {
        log::warn!(
            "lower-level solve stopped after {} iterations at relative residual {:e}",
            out.iterations,
            out.trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(model.package(problem, out))
}

/// Like [`solve`], but retries a non-converged warm-started solve from a
/// cold start and reports non-convergence as an error.
pub fn solve_converged(problem: &DenoiseProblem, opts: &SolverOptions, warm_start: Option<&DenoiseResult>) -> Result<DenoiseResult> {
    let r = solve(problem, opts, warm_start)?;
    if r.converged {
        return Ok(r);
    }
    let r = if warm_start.is_some() {
        log::debug!("warm-started solve did not converge; retrying cold");
        solve(problem, opts, None)?
    } else {
        r
    };
    if r.converged {
        Ok(r)
    } else {
        Err(Error::NotConverged { iterations: r.iterations, residual: r.residual() })
    }
}

fn expect_regularizer(problem: &DenoiseProblem, name: &str) -> Result<()> {
    if problem.regularizer.name() != name {
        return Err(Error::InvalidInput(format!(
            "expected a {name} problem, got {}",
            problem.regularizer.name()
        )));
    }
    Ok(())
}

fn expect_combine(problem: &DenoiseProblem, combine: Combine) -> Result<()> {
    if problem.combine != combine {
        return Err(Error::InvalidInput(format!("expected {combine:?}, got {:?}", problem.combine)));
    }
    Ok(())
}

pub fn solve_tv(problem: &DenoiseProblem, opts: &SolverOptions, warm_start: Option<&DenoiseResult>) -> Result<DenoiseResult> {
    expect_regularizer(problem, "tv")?;
    expect_combine(problem, Combine::WeightedSum)?;
    solve(problem, opts, warm_start)
}

pub fn solve_tgv2(problem: &DenoiseProblem, opts: &SolverOptions, warm_start: Option<&DenoiseResult>) -> Result<DenoiseResult> {
    expect_regularizer(problem, "tgv2")?;
    solve(problem, opts, warm_start)
}

pub fn solve_ictv(problem: &DenoiseProblem, opts: &SolverOptions, warm_start: Option<&DenoiseResult>) -> Result<DenoiseResult> {
    expect_regularizer(problem, "ictv")?;
    solve(problem, opts, warm_start)
}

pub fn solve_poisson_penalty(problem: &DenoiseProblem, opts: &SolverOptions, warm_start: Option<&DenoiseResult>) -> Result<DenoiseResult> {
    expect_combine(problem, Combine::WeightedSum)?;
    if !problem.fidelities.iter().any(|f| f.model.kind == FidelityKind::PoissonKL) || problem.positivity.is_none() {
        return Err(Error::InvalidInput("expected a Poisson fidelity with the positivity penalty".into()));
    }
    solve(problem, opts, warm_start)
}

pub fn solve_infconv_l1l2(problem: &DenoiseProblem, opts: &SolverOptions, warm_start: Option<&DenoiseResult>) -> Result<DenoiseResult> {
    expect_combine(problem, Combine::InfConvL1L2)?;
    solve(problem, opts, warm_start)
}

pub fn solve_gauss_poisson(problem: &DenoiseProblem, opts: &SolverOptions, warm_start: Option<&DenoiseResult>) -> Result<DenoiseResult> {
    expect_combine(problem, Combine::GaussPoissonProduct)?;
    solve(problem, opts, warm_start)
}

/// Huberised energy of `problem` at the stacked unknown of `result`.
pub fn energy(problem: &DenoiseProblem, result: &DenoiseResult) -> Result<f64> {
    let model = Model::build(problem)?;
    if !result.state.compatible(&model) {
        return Err(Error::InvalidInput("result does not belong to this problem".into()));
    }
    Ok(model.energy(&result.state.x))
}

/// Energy at an arbitrary image `u`, with the auxiliary unknowns taken from
/// `result`.
pub fn energy_at(problem: &DenoiseProblem, result: &DenoiseResult, u: &ImageGrid) -> Result<f64> {
    let model = Model::build(problem)?;
    if !result.state.compatible(&model) {
        return Err(Error::InvalidInput("result does not belong to this problem".into()));
    }
    u.check_same_shape(problem.data())?;
    let mut x = result.state.x.clone();
    x[..u.len()].copy_from_slice(&u.values);
    Ok(model.energy(&x))
}

/// Energy at a perturbation of the full stacked unknown (`dx` has the
/// length of the state).
pub fn energy_perturbed(problem: &DenoiseProblem, result: &DenoiseResult, dx: &[f64]) -> Result<f64> {
    let model = Model::build(problem)?;
    if !result.state.compatible(&model) || dx.len() != result.state.x.len() {
        return Err(Error::InvalidInput("perturbation does not match the problem layout".into()));
    }
    let x: Vec<f64> = result.state.x.iter().zip(dx).map(|(a, b)| a + b).collect();
    Ok(model.energy(&x))
}

impl DenoiseResult {
    /// Length of the stacked unknown (image plus auxiliary fields).
    pub fn state_len(&self) -> usize {
        self.state.x.len()
    }
}
