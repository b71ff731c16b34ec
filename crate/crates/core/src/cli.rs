//! Command-line driver.
//!
//! Every problem and optimiser setting can come from a flat `key = value`
//! config file (`--config`) and be overridden by the flag of the same name.
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::adjoint::{gradient_check, Which};
use crate::bilevel::{self, grid_search, learn, LearnOptions, LearnOutcome, ParamSet, TrainingSet};
use crate::error::{Error, Result};
use crate::fidelity::synthesize_noise;
use crate::grid::{Boundary, ImageGrid};
use crate::huber::{HuberParam, HuberVariant};
use crate::io::{self, parse_boundary, DatasetManifest};
use crate::metrics::{psnr, snr, ssim, SsimConfig};
use crate::sampling::{dynamic_learn, DynamicOptions};
use crate::solver::{self, DenoiseProblem, ParamValue, Positivity, Regularizer, SolverOptions};

/// Problem and optimiser settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub reg: String,
    pub alpha: Option<Vec<f64>>,
    pub model: String,
    pub lambda: Option<Vec<f64>>,
    pub mu: f64,
    pub gamma: f64,
    pub gamma_l1: Option<f64>,
    pub eta: f64,
    pub delta: f64,
    pub variant: HuberVariant,
    pub boundary: Boundary,
    pub h: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub outer_max_iter: usize,
    pub gtol: f64,
    pub ftol: f64,
    pub theta: f64,
    pub s0: usize,
    pub seed: u64,
    pub learn: Vec<String>,
    pub grid: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lo = LearnOptions::default();
        ExperimentConfig {
            reg: "tv".into(),
            alpha: None,
            model: "gaussian".into(),
            lambda: None,
            mu: solver::DEFAULT_MU,
            gamma: solver::DEFAULT_GAMMA,
            gamma_l1: None,
            eta: Positivity::default().eta,
            delta: Positivity::default().delta,
            variant: HuberVariant::Max,
            boundary: Boundary::Neumann,
            h: None,
            tol: None,
            max_iter: SolverOptions::default().max_iter,
            outer_max_iter: lo.max_iter,
            gtol: lo.gtol,
            ftol: lo.ftol,
            theta: DynamicOptions::default().theta,
            s0: DynamicOptions::default().initial_size,
            seed: 0,
            learn: vec!["lambda".into()],
            grid: None,
        }
    }
}

fn list(v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?}")))).collect()
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "reg", "alpha", "model", "lambda", "mu", "gamma", "gamma_l1", "eta", "delta", "variant", "boundary", "h", "tol",
        "max_iter", "outer_max_iter", "gtol", "ftol", "theta", "s0", "seed", "learn", "grid",
    ];

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (k, v) in map {
            match k.as_str() {
                "reg" => c.reg = v.clone(),
                "alpha" => c.alpha = Some(list(v)?),
                "model" => c.model = v.clone(),
                "lambda" => c.lambda = Some(list(v)?),
                "mu" => c.mu = num(k, v)?,
                "gamma" => c.gamma = num(k, v)?,
                "gamma_l1" => c.gamma_l1 = Some(num(k, v)?),
                "eta" => c.eta = num(k, v)?,
                "delta" => c.delta = num(k, v)?,
                "variant" => {
                    c.variant = match v.as_str() {
                        "max" => HuberVariant::Max,
                        "smooth" => HuberVariant::Smooth,
                        o => return Err(Error::Config(format!("unknown variant {o}"))),
                    }
                }
                "boundary" => c.boundary = parse_boundary(v)?,
                "h" => c.h = Some(num(k, v)?),
                "tol" => c.tol = Some(num(k, v)?),
                "max_iter" => c.max_iter = num(k, v)?,
                "outer_max_iter" => c.outer_max_iter = num(k, v)?,
                "gtol" => c.gtol = num(k, v)?,
                "ftol" => c.ftol = num(k, v)?,
                "theta" => c.theta = num(k, v)?,
                "s0" => c.s0 = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                "learn" => c.learn = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                "grid" => c.grid = Some(v.clone()),
                other => return Err(Error::Config(format!("unknown key {other}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite")))
            }
        };
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config("mu must be >= 0".into()));
        }
        pos("gamma", self.gamma)?;
        pos("eta", self.eta)?;
        pos("delta", self.delta)?;
        pos("gtol", self.gtol)?;
        pos("ftol", self.ftol)?;
        if let Some(g) = self.gamma_l1 {
            pos("gamma_l1", g)?;
        }
        if let Some(h) = self.h {
            pos("h", h)?;
        }
        if let Some(t) = self.tol {
            pos("tol", t)?;
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return Err(Error::Config("theta must be >= 0".into()));
        }
        if self.s0 == 0 || self.max_iter == 0 {
            return Err(Error::Config("s0 and max_iter must be >= 1".into()));
        }
        Ok(())
    }

    /// Every setting, resolved, for the run summary.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("reg", self.reg.clone());
        put("alpha", self.alpha.as_deref().map(join).unwrap_or_default());
        put("model", self.model.clone());
        put("lambda", self.lambda.as_deref().map(join).unwrap_or_default());
        put("mu", format!("{:?}", self.mu));
        put("gamma", format!("{:?}", self.gamma));
        put("gamma_l1", self.gamma_l1.map(|g| format!("{g:?}")).unwrap_or_default());
        put("eta", format!("{:?}", self.eta));
        put("delta", format!("{:?}", self.delta));
        put("variant", if self.variant == HuberVariant::Max { "max" } else { "smooth" }.into());
        put("boundary", if self.boundary == Boundary::Neumann { "neumann" } else { "dirichlet0" }.into());
        put("h", self.h.map(|g| format!("{g:?}")).unwrap_or_default());
        put("tol", self.tol.map(|g| format!("{g:?}")).unwrap_or_default());
        put("max_iter", self.max_iter.to_string());
        put("outer_max_iter", self.outer_max_iter.to_string());
        put("gtol", format!("{:?}", self.gtol));
        put("ftol", format!("{:?}", self.ftol));
        put("theta", format!("{:?}", self.theta));
        put("s0", self.s0.to_string());
        put("seed", self.seed.to_string());
        put("learn", self.learn.join(","));
        put("grid", self.grid.clone().unwrap_or_default());
        m.retain(|_, v| !v.is_empty());
        m
    }

    /// The denoising problem for data `f`.
    pub fn problem(&self, f: ImageGrid) -> Result<DenoiseProblem> {
        let default_alpha: &[f64] = if self.reg == "tv" { &[1.0] } else { &[1.0, 2.0] };
        let alpha = self.alpha.clone().unwrap_or_else(|| default_alpha.to_vec());
        let reg = Regularizer::from_name(&self.reg, &alpha)?;
        let lam = |default: &[f64]| -> Result<Vec<f64>> {
            let l = self.lambda.clone().unwrap_or_else(|| default.to_vec());
            if l.len() != default.len() {
                return Err(Error::Config(format!("model {} takes {} lambda value(s)", self.model, default.len())));
            }
            Ok(l)
        };
        let gamma = HuberParam::new(self.gamma)?;
        let positivity = Positivity { eta: self.eta, delta: self.delta };
        let p = match self.model.as_str() {
            "gaussian" => DenoiseProblem::gaussian(reg, f, lam(&[100.0])?[0]),
            "poisson" => DenoiseProblem::poisson(reg, f, lam(&[100.0])?[0], positivity)?,
            "impulse" => DenoiseProblem::impulse(reg, f, lam(&[10.0])?[0], HuberParam::new(self.gamma_l1.unwrap_or(self.gamma))?),
            "infconv" => {
                let l = lam(&[10.0, 100.0])?;
                DenoiseProblem::infconv_l1l2(reg, f, l[0], l[1], HuberParam::new(self.gamma_l1.unwrap_or(self.gamma))?)
            }
            "gauss-poisson" => {
                let l = lam(&[100.0, 10.0])?;
                DenoiseProblem::gauss_poisson(reg, f, l[0], l[1])?.with_positivity(Some(positivity))
            }
            m => return Err(Error::Config(format!("unknown model {m}"))),
        };
        let p = p.with_mu(self.mu).with_gamma(gamma).with_variant(self.variant);
        p.validate()?;
        Ok(p)
    }

    pub fn solver_options(&self, learning: bool) -> SolverOptions {
        let default = if learning { LearnOptions::default().solver.tol } else { SolverOptions::default().tol };
        SolverOptions { tol: self.tol.unwrap_or(default), max_iter: self.max_iter, ..Default::default() }
    }

    pub fn learn_options(&self) -> LearnOptions {
        LearnOptions {
            gtol: self.gtol,
            ftol: self.ftol,
            max_iter: self.outer_max_iter,
            solver: self.solver_options(true),
            ..Default::default()
        }
    }

    /// Parameter set of `problem` with everything outside `learn` frozen.
    pub fn param_set(&self, problem: &DenoiseProblem) -> Result<ParamSet> {
        let mut ps = ParamSet::from_problem(problem);
        let all = Which::all(problem);
        for &w in &all {
            ps.freeze(w, true);
        }
        for name in &self.learn {
            let hits: Vec<Which> = all
                .iter()
                .copied()
                .filter(|&w| {
                    let n = ps.name(w);
                    n == name || (name == "lambda" && matches!(w, Which::Lambda(_))) || (name == "alpha" && matches!(w, Which::Alpha(_)))
                })
                .collect();
            if hits.is_empty() {
                let names: Vec<&str> = all.iter().map(|&w| ps.name(w)).collect();
                return Err(Error::Config(format!("cannot learn {name}; parameters are {}", names.join(", "))));
            }
            for w in hits {
                ps.freeze(w, false);
            }
        }
        Ok(ps)
    }
}

#[derive(Parser, Debug)]
#[command(name = "varilearn", version, about = "Bilevel learning of denoising weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct Settings {
    /// Flat key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// tv, tgv2 or ictv.
    #[arg(long)]
    reg: Option<String>,
    /// Regulariser weight(s), comma separated.
    #[arg(long)]
    alpha: Option<String>,
    /// gaussian, poisson, impulse, infconv or gauss-poisson.
    #[arg(long)]
    model: Option<String>,
    /// Fidelity weight(s), comma separated.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long = "gamma-l1")]
    gamma_l1: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    delta: Option<String>,
    /// max or smooth.
    #[arg(long)]
    variant: Option<String>,
    /// neumann or dirichlet0.
    #[arg(long)]
    boundary: Option<String>,
    #[arg(long)]
    h: Option<String>,
    /// Lower-level relative residual tolerance.
    #[arg(long)]
    tol: Option<String>,
    #[arg(long = "max-iter")]
    max_iter: Option<String>,
    #[arg(long = "outer-max-iter")]
    outer_max_iter: Option<String>,
    #[arg(long)]
    gtol: Option<String>,
    #[arg(long)]
    ftol: Option<String>,
    #[arg(long)]
    theta: Option<String>,
    #[arg(long)]
    s0: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Parameters to learn: lambda, alpha or individual names.
    #[arg(long)]
    learn: Option<String>,
    /// Log-spaced grid `lo:hi:n` over the learned parameter.
    #[arg(long)]
    grid: Option<String>,
}

impl Settings {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut map = match &self.config {
            Some(p) => io::load_config(p)?,
            None => BTreeMap::new(),
        };
        let flags: [(&str, &Option<String>); 22] = [
            ("reg", &self.reg),
            ("alpha", &self.alpha),
            ("model", &self.model),
            ("lambda", &self.lambda),
            ("mu", &self.mu),
            ("gamma", &self.gamma),
            ("gamma_l1", &self.gamma_l1),
            ("eta", &self.eta),
            ("delta", &self.delta),
            ("variant", &self.variant),
            ("boundary", &self.boundary),
            ("h", &self.h),
            ("tol", &self.tol),
            ("max_iter", &self.max_iter),
            ("outer_max_iter", &self.outer_max_iter),
            ("gtol", &self.gtol),
            ("ftol", &self.ftol),
            ("theta", &self.theta),
            ("s0", &self.s0),
            ("seed", &self.seed),
            ("learn", &self.learn),
            ("grid", &self.grid),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        }
        ExperimentConfig::from_map(&map)
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Training manifest.
    #[arg(long, conflicts_with_all = ["clean", "noisy"])]
    manifest: Option<PathBuf>,
    /// Clean image of a single training pair.
    #[arg(long, requires = "noisy")]
    clean: Option<PathBuf>,
    /// Noisy image of a single training pair.
    #[arg(long, requires = "clean")]
    noisy: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corrupt a clean image with synthetic noise.
    AddNoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// e.g. gaussian:0.02 or impulse:0.05+gaussian:0.005
        #[arg(long)]
        noise: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve one denoising problem.
    Denoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Ground truth for quality figures in the summary.
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Learn weights with BFGS on the whole training set.
    Learn {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Learn weights with dynamically sampled batches.
    LearnDynamic {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Tabulate the reduced cost on a grid of one parameter.
    GridSearch {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Compare adjoint gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        data: DataArgs,
        /// Relative finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Quality figures of an image against a reference.
    Metrics {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
        /// Write the figures to this file instead of standard output.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

/// Relative error accepted by `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-3;

/// Runs the program on `argv` (with the program name first) and returns the
/// exit code.
pub fn run_cli(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    bilevel::configure_threads();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_solver_failure() {
                2
            } else {
                1
            }
        }
    }
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let o = fs::canonicalize(out).ok();
    for i in inputs {
        if o.is_some() && o == fs::canonicalize(i).ok() {
            return Err(Error::InvalidInput(format!("refusing to overwrite input {}", i.display())));
        }
    }
    Ok(())
}

fn load_data(data: &DataArgs, cfg: &ExperimentConfig) -> Result<(TrainingSet, Value)> {
    match (&data.manifest, &data.clean, &data.noisy) {
        (Some(m), _, _) => {
            let mut man = DatasetManifest::load_file(m)?;
            if cfg.h.is_some() {
                man.h = cfg.h;
            }
            Ok((man.load()?, json!({ "manifest": m.display().to_string() })))
        }
        (None, Some(c), Some(n)) => {
            let f0 = io::load_image_on(c, cfg.boundary, cfg.h)?;
            let f = io::load_image_on(n, cfg.boundary, cfg.h)?;
            let inputs = json!({ "clean": c.display().to_string(), "noisy": n.display().to_string() });
            Ok((TrainingSet::single(f0, f)?, inputs))
        }
        _ => Err(Error::InvalidInput("give --manifest or both --clean and --noisy".into())),
    }
}

fn named_params(ps: &ParamSet) -> Value {
    let mut m = serde_json::Map::new();
    for p in ps.lambdas.iter().chain(&ps.alphas) {
        let v = match &p.value {
            ParamValue::Scalar(s) => json!(s),
            ParamValue::Field(g) => json!({ "mean": g.mean() }),
        };
        m.insert(p.name.clone(), v);
    }
    Value::Object(m)
}

fn history_csv(path: &Path, out: &LearnOutcome, names: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "iter,sample_size,cost,grad_norm,step,halvings,curvature_accepted,cum_solves,cum_adjoint_solves,variance_lhs,variance_rhs")?;
    for n in names {
        write!(f, ",{n}")?;
    }
    writeln!(f)?;
    for h in &out.history {
        let (vl, vr) = h.variance.as_ref().map(|v| (format!("{:e}", v.lhs), format!("{:e}", v.rhs))).unwrap_or_default();
        write!(
            f,
            "{},{},{:e},{:e},{:e},{},{},{},{},{},{}",
            h.iter, h.sample_size, h.cost, h.grad_norm, h.step, h.halvings, h.curvature_accepted, h.cum_solves, h.cum_adjoint_solves, vl, vr
        )?;
        for p in &h.params {
            write!(f, ",{p:e}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Denoised training images at the learned parameters, with quality figures.
fn finish_learning(
    training: &TrainingSet,
    template: &DenoiseProblem,
    params: &ParamSet,
    opts: &SolverOptions,
    out_dir: &Path,
) -> Result<Value> {
    let p = params.apply(template)?;
    let mut rows = Vec::new();
    for (i, pair) in training.pairs.iter().enumerate() {
        let r = solver::solve(&p.clone().with_data(&pair.f), opts, None)?;
        io::save_image(&r.u, &out_dir.join(format!("denoised_{i}.pgm")))?;
        rows.push(json!({
            "pair": i,
            "psnr_noisy": finite(psnr(&pair.f, &pair.f0, 1.0)?),
            "psnr": finite(psnr(&r.u, &pair.f0, 1.0)?),
            "ssim": ssim(&r.u, &pair.f0, &SsimConfig::default())?,
            "snr": finite(snr(&r.u, &pair.f0)?),
        }));
    }
    Ok(Value::Array(rows))
}

/// JSON has no infinity; the `+∞` sentinel is written as a string.
fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!("inf")
    }
}

fn learning_command(kind: &str, data: DataArgs, out_dir: PathBuf, settings: Settings) -> Result<i32> {
    let cfg = settings.resolve()?;
    let (training, inputs) = load_data(&data, &cfg)?;
    let template = cfg.problem(training.pairs[0].f.clone())?;
    let init = cfg.param_set(&template)?;
    fs::create_dir_all(&out_dir)?;
    let free = init.free();
    let free_names: Vec<String> = free.iter().map(|&w| init.name(w).to_string()).collect();
    let lo = cfg.learn_options();
    let mut summary = json!({
        "command": kind,
        "config": cfg.to_map(),
        "seed": cfg.seed,
        "inputs": inputs,
        "pairs": training.len(),
    });
    let s = summary.as_object_mut().expect("object");
    if kind == "grid-search" {
        let [w] = free.as_slice() else {
            return Err(Error::Config("grid-search needs exactly one learned parameter".into()));
        };
        let spec = cfg.grid.clone().ok_or_else(|| Error::Config("grid-search needs grid = lo:hi:n".into()))?;
        let parts: Vec<&str> = spec.split(':').collect();
        let [lo_s, hi_s, n_s] = parts.as_slice() else {
            return Err(Error::Config(format!("bad grid {spec}")));
        };
        let (a, b): (f64, f64) = (num("grid", lo_s)?, num("grid", hi_s)?);
        let n: usize = num("grid", n_s)?;
        if !(a > 0.0 && b > a && n >= 2) {
            return Err(Error::Config("grid needs 0 < lo < hi and n >= 2".into()));
        }
        let grid: Vec<ParamSet> = (0..n)
            .map(|i| {
                let mut p = init.clone();
                p.set_scalar(*w, a * (b / a).powf(i as f64 / (n - 1) as f64));
                p
            })
            .collect();
        let g = grid_search(&training, &template, &grid, &cfg.solver_options(true))?;
        let mut f = std::io::BufWriter::new(fs::File::create(out_dir.join("grid.csv"))?);
        writeln!(f, "{},cost", free_names[0])?;
        for (p, row) in grid.iter().zip(&g.table) {
            writeln!(f, "{:e},{:e}", p.scalar(*w).expect("scalar"), row.cost)?;
        }
        f.flush()?;
        s.insert("params".into(), named_params(&g.best));
        s.insert("cost".into(), json!(g.table[g.best_index].cost));
        s.insert("best_index".into(), json!(g.best_index));
        s.insert("solves".into(), json!(g.solves));
        let quality = finish_learning(&training, &template, &g.best, &cfg.solver_options(true), &out_dir)?;
        s.insert("quality".into(), quality);
    } else {
        let out = if kind == "learn" {
            learn(&training, &template, &init, &lo)?
        } else {
            let d = DynamicOptions { theta: cfg.theta, initial_size: cfg.s0.min(training.len()), seed: cfg.seed };
            dynamic_learn(&training, &template, &init, &lo, &d)?
        };
        history_csv(&out_dir.join("history.csv"), &out, &free_names)?;
        s.insert("params".into(), named_params(&out.params));
        s.insert("cost".into(), json!(out.cost));
        s.insert("full_cost".into(), json!(out.full_cost));
        s.insert("iterations".into(), json!(out.iterations));
        s.insert("solves".into(), json!(out.solves));
        s.insert("adjoint_solves".into(), json!(out.adjoint_solves));
        s.insert("stop".into(), serde_json::to_value(out.stop).map_err(|e| Error::Io(std::io::Error::other(e)))?);
        let quality = finish_learning(&training, &template, &out.params, &cfg.solver_options(true), &out_dir)?;
        s.insert("quality".into(), quality);
    }
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(0)
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::AddNoise { input, output, noise, seed } => {
            guard_output(&output, &[&input])?;
            let clean = io::load_image(&input)?;
            let noisy = synthesize_noise(&clean, &io::parse_noise(&noise)?, seed)?;
            io::save_image(&noisy, &output)?;
            Ok(0)
        }
        Command::Denoise { input, output, clean, summary, settings } => {
            let cfg = settings.resolve()?;
            guard_output(&output, &[&input])?;
            let f = io::load_image_on(&input, cfg.boundary, cfg.h)?;
            let p = cfg.problem(f.clone())?;
            let r = solver::solve(&p, &cfg.solver_options(false), None)?;
            if !r.converged {
                log::warn!("lower-level solve stopped at residual {:e}", r.residual());
            }
            io::save_image(&r.u, &output)?;
            if let Some(path) = summary {
                let mut v = json!({
                    "command": "denoise",
                    "config": cfg.to_map(),
                    "seed": cfg.seed,
                    "inputs": { "noisy": input.display().to_string() },
                    "iterations": r.iterations,
                    "converged": r.converged,
                    "residual": r.residual(),
                    "energy": r.energy(),
                });
                if let Some(c) = clean {
                    let f0 = io::load_image_on(&c, cfg.boundary, cfg.h)?;
                    let o = v.as_object_mut().expect("object");
                    o.insert("psnr_noisy".into(), finite(psnr(&f, &f0, 1.0)?));
                    o.insert("psnr".into(), finite(psnr(&r.u, &f0, 1.0)?));
                    o.insert("ssim".into(), json!(ssim(&r.u, &f0, &SsimConfig::default())?));
                }
                write_json(&path, &v)?;
            }
            Ok(0)
        }
        Command::Learn { data, out_dir, settings } => learning_command("learn", data, out_dir, settings),
        Command::LearnDynamic { data, out_dir, settings } => learning_command("learn-dynamic", data, out_dir, settings),
        Command::GridSearch { data, out_dir, settings } => learning_command("grid-search", data, out_dir, settings),
        Command::Gradcheck { data, step, summary, settings } => {
            let cfg = settings.resolve()?;
            let (training, _) = load_data(&data, &cfg)?;
            let pair = &training.pairs[0];
            let template = cfg.problem(pair.f.clone())?;
            let ps = cfg.param_set(&template)?;
            let mut rows = Vec::new();
            let mut ok = true;
            for w in ps.free() {
                let c = gradient_check(&template, &pair.f0, w, step, &cfg.solver_options(true))?;
                let line = format!("{}: adjoint {:e}, finite difference {:e}, relative error {:e}", ps.name(w), c.adjoint, c.finite_difference, c.rel_error);
                if summary.is_some() {
                    log::info!("{line}");
                } else {
                    eprintln!("{line}");
                }
                ok &= c.rel_error <= GRADCHECK_TOL;
                rows.push(json!({
                    "param": ps.name(w),
                    "value": c.value,
                    "adjoint": c.adjoint,
                    "finite_difference": c.finite_difference,
                    "rel_error": c.rel_error,
                }));
            }
            if let Some(p) = summary {
                write_json(&p, &json!({ "command": "gradcheck", "config": cfg.to_map(), "checks": rows, "pass": ok }))?;
            }
            Ok(if ok { 0 } else { 2 })
        }
        Command::Metrics { image, reference, peak, summary } => {
            let u = io::load_image(&image)?;
            let f0 = io::load_image(&reference)?;
            let v = json!({
                "psnr": finite(psnr(&u, &f0, peak)?),
                "snr": finite(snr(&u, &f0)?),
                "ssim": ssim(&u, &f0, &SsimConfig { peak, ..Default::default() })?,
                "tv": crate::metrics::tv_seminorm(&u, HuberParam::INFINITE),
            });
            match summary {
                Some(p) => write_json(&p, &v)?,
                None => println!("{}", serde_json::to_string_pretty(&v).map_err(|e| Error::Io(std::io::Error::other(e)))?),
            }
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run_cli(&args(&["varilearn", "denoise", "--bogus"])), 1);
        assert_eq!(run_cli(&args(&["varilearn"])), 1);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run_cli(&args(&["varilearn", "--help"])), 0);
    }

    #[test]
    fn config_roundtrips_through_its_echo() {
        let mut m = BTreeMap::new();
        m.insert("reg".to_string(), "tgv2".to_string());
        m.insert("alpha".to_string(), "0.5, 1.5".to_string());
        m.insert("lambda".to_string(), "300".to_string());
        m.insert("theta".to_string(), "0.25".to_string());
        let c = ExperimentConfig::from_map(&m).unwrap();
        assert_eq!(ExperimentConfig::from_map(&c.to_map()).unwrap(), c);
    }

    #[test]
    fn bad_config_values_are_rejected() {
        for (k, v) in [("gamma", "-1"), ("reg", "tv"), ("nope", "1"), ("variant", "cubic"), ("s0", "0")] {
            let mut m = BTreeMap::new();
            m.insert(k.to_string(), v.to_string());
            let r = ExperimentConfig::from_map(&m);
            assert_eq!(r.is_ok(), k == "reg", "{k}");
        }
    }

    #[test]
    fn learn_selection_freezes_the_rest() {
        let c = ExperimentConfig { reg: "tgv2".into(), learn: vec!["alpha2".into()], ..Default::default() };
        let spec = crate::grid::GridSpec::new(4, 4, Boundary::Neumann);
        let p = c.problem(ImageGrid::constant(spec, 0.5)).unwrap();
        let ps = c.param_set(&p).unwrap();
        assert_eq!(ps.free(), vec![Which::Alpha(1)]);
        let bad = ExperimentConfig { learn: vec!["beta".into()], ..Default::default() };
        assert!(bad.param_set(&p).is_err());
    }
}
