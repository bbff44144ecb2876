//! Momentum-SGD training loops for learned sketch matrices.
//!
//! Four learners share one loop:
//!
//! * `ivy`: values on a fixed CountSketch support.
//! * `ivy-ls`: values `S_base` and a nonnegative mask `D`, sketch `D ⊙ S_base`,
//!   L1 penalty on `D`, entries of `D` below `ε` pruned and frozen at zero;
//!   `D` stops training once `nnz(D) ≤ n·s`.
//! * `ivy-lr`: Gaussian entries `Z ⊙ √Σ_var + μ`, `Z ~ N(0, noise_var)`,
//!   with `Σ_var` kept nonnegative by a ReLU after every step.
//! * `ivy-ls-lr`: both, sketch `D ⊙ (Z ⊙ √Σ_var + μ)`.
//!
//! One training matrix is used per iteration, cycling through the set in
//! order. Each run is single-threaded in its updates and bit-reproducible
//! from `TrainConfig::seed`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MatrixDataset;
use crate::error::{Error, Result};
use crate::grad::{chain_to_gaussian, chain_to_mask, loss_grad, scw_loss, GradientMode, LossGrad};
use crate::matrix::Matrix;
use crate::scw::avg_test_error;
use crate::sketch::{
    init_countsketch, init_gaussian, nnz, sample_noise_with, threshold_mask, RngStream, SketchSpec,
    DEFAULT_NOISE_VAR,
};

/// Attempts per sample before a degenerate spectrum skips it.
pub const DEGENERACY_RETRIES: usize = 5;
const JITTER: f64 = 1e-8;

/// Stream purposes derived from the run seed.
mod purpose {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const JITTER: u64 = 3;
    pub const EVAL: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Ivy,
    IvyLs,
    IvyLr,
    IvyLsLr,
    /// Untrained CountSketch baseline.
    CountSketch,
    /// Untrained dense Gaussian baseline.
    Gaussian,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ivy,
        Method::IvyLs,
        Method::IvyLr,
        Method::IvyLsLr,
        Method::CountSketch,
        Method::Gaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ivy => "ivy",
            Method::IvyLs => "ivy-ls",
            Method::IvyLr => "ivy-lr",
            Method::IvyLsLr => "ivy-ls-lr",
            Method::CountSketch => "countsketch",
            Method::Gaussian => "gaussian",
        }
    }

    pub fn is_trained(self) -> bool {
        !matches!(self, Method::CountSketch | Method::Gaussian)
    }

    pub fn learns_sparsity(self) -> bool {
        matches!(self, Method::IvyLs | Method::IvyLsLr)
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::IvyLr | Method::IvyLsLr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        let norm = match norm.as_str() {
            "random-countsketch" => "countsketch",
            "random-gaussian" => "gaussian",
            other => other,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// L1 weight used with a target sparsity: 3e-4 for one nonzero per column,
/// 1e-4 above that.
pub fn default_lambda(target_sparsity: f64) -> f64 {
    if target_sparsity <= 1.0 {
        3e-4
    } else {
        1e-4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Sketch rows.
    pub m: usize,
    /// Target rank.
    pub k: usize,
    /// Nonzeros per column of the CountSketch init (`ivy`, `countsketch`).
    pub density: usize,
    /// Average nonzeros per column allowed in `D`: stop at `nnz(D) ≤ n·s`.
    pub target_sparsity: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub momentum_beta: f64,
    pub iterations: usize,
    pub noise_var: f64,
    /// Gate on `D` updates in `ivy-ls-lr`.
    pub early_stop_flag: bool,
    pub seed: u64,
    pub eval_every: usize,
    /// Noise draws averaged when evaluating stochastic sketches.
    pub eval_samples: usize,
    /// Evaluate stochastic sketches at `S = μ` instead of sampling.
    pub mean_sketch: bool,
    pub gradient_mode: GradientMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 20,
            k: 10,
            density: 1,
            target_sparsity: 1.0,
            lambda: default_lambda(1.0),
            epsilon: 0.5,
            eta: 1.0,
            momentum_beta: 1.0,
            iterations: 500,
            noise_var: DEFAULT_NOISE_VAR,
            early_stop_flag: true,
            seed: 0,
            eval_every: 10,
            eval_samples: 5,
            mean_sketch: false,
            gradient_mode: GradientMode::Analytic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.m == 0 || self.k == 0 {
            return bad(format!("m ({}) and k ({}) must be >= 1", self.m, self.k));
        }
        if self.density == 0 || self.density > self.m {
            return bad(format!("density {} must lie in 1..={}", self.density, self.m));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity <= self.m as f64) {
            return bad(format!("target sparsity {} must lie in (0, {}]", self.target_sparsity, self.m));
        }
        for (name, v) in [("lambda", self.lambda), ("epsilon", self.epsilon), ("noise-var", self.noise_var)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.momentum_beta) {
            return bad(format!("momentum must lie in [0, 1], got {}", self.momentum_beta));
        }
        if self.eval_every == 0 || self.eval_samples == 0 {
            return bad("eval-every and eval-samples must be >= 1".into());
        }
        Ok(())
    }

    /// The pruning stop point `n·s` for sketches with `n` columns.
    pub fn nnz_budget(&self, n: usize) -> f64 {
        n as f64 * self.target_sparsity
    }
}

/// One optimizer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    /// Training wall-clock since the run began (evaluation excluded).
    pub seconds: f64,
    /// Objective value: SCW loss plus the active L1 penalty.
    pub loss: f64,
    /// The active L1 penalty `λ·ΣD` included in `loss`.
    pub penalty: f64,
    pub nnz_d: Option<usize>,
    pub lambda_active: bool,
    /// Whether `nnz(D) ≤ n·s` held when this iteration started.
    pub sparsity_met: bool,
    /// Gradient skipped after exhausting degeneracy retries.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of completed iterations when evaluated.
    pub iteration: usize,
    pub seconds: f64,
    pub test_err: Option<f64>,
    pub ood_err: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub method: Option<Method>,
    pub records: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
    pub sparsity_met: bool,
    /// First iteration that started with `nnz(D) ≤ n·s`, counting the state
    /// after the final iteration as iteration `iterations`.
    pub sparsity_met_at: Option<usize>,
    pub skipped_samples: usize,
}

impl TrainTrace {
    pub fn final_test_err(&self) -> Option<f64> {
        self.evals.last().and_then(|e| e.test_err)
    }

    pub fn final_ood_err(&self) -> Option<f64> {
        self.evals.last().and_then(|e| e.ood_err)
    }

    pub fn train_seconds(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.seconds)
    }

    /// Copy with all wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainTrace {
        let mut t = self.clone();
        t.records.iter_mut().for_each(|r| r.seconds = 0.0);
        t.evals.iter_mut().for_each(|e| e.seconds = 0.0);
        t
    }
}

/// Receives trace rows as training produces them.
pub trait TraceSink {
    fn record(&mut self, rec: &IterRecord, eval: Option<&EvalRecord>) -> Result<()>;
}

#[derive(Default)]
pub struct EvalSets<'a> {
    pub test: Option<&'a MatrixDataset>,
    pub ood: Option<&'a MatrixDataset>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub eval: EvalSets<'a>,
    pub sink: Option<&'a mut dyn TraceSink>,
    /// Binary checkpoints are written here every `eval_every` iterations.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub spec: SketchSpec,
    pub trace: TrainTrace,
    /// Checkpoint with the lowest held-out test error, with its iteration.
    /// For sparsity learners only checkpoints meeting the budget qualify.
    pub best: Option<(usize, SketchSpec)>,
}

impl TrainResult {
    /// The best checkpoint if one was tracked, else the final sketch.
    pub fn best_spec(&self) -> &SketchSpec {
        self.best.as_ref().map_or(&self.spec, |(_, s)| s)
    }
}

/// Velocity buffers, one per trained tensor, zero-initialized.
#[derive(Debug, Clone, Default)]
pub struct MomentumState {
    pub s_base: Option<Matrix>,
    pub mask_d: Option<Matrix>,
    pub mu: Option<Matrix>,
    pub sigma_var: Option<Matrix>,
}

fn velocity(slot: &mut Option<Matrix>, shape: (usize, usize)) -> &mut Matrix {
    slot.get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// `vel′ = β·vel + grad`, `param′ = param − η·vel′`.
pub fn sgd_step(param: &Matrix, grad: &Matrix, vel: &Matrix, eta: f64, beta: f64) -> Result<(Matrix, Matrix)> {
    let mut new_vel = vel.scale(beta);
    new_vel.axpy(1.0, grad)?;
    let mut new_param = param.clone();
    new_param.axpy(-eta, &new_vel)?;
    Ok((new_param, new_vel))
}

fn sgd_in_place(param: &mut Matrix, grad: &Matrix, vel: &mut Matrix, eta: f64, beta: f64) -> Result<()> {
    let (p, v) = sgd_step(param, grad, vel, eta, beta)?;
    *param = p;
    *vel = v;
    Ok(())
}

/// Zeroes `grad` wherever `support` is zero.
fn restrict(grad: &Matrix, support: &Matrix) -> Matrix {
    Matrix::from_fn(grad.rows(), grad.cols(), |i, j| {
        if support[(i, j)] != 0.0 {
            grad[(i, j)]
        } else {
            0.0
        }
    })
}

/// Trained parameters of each learner.
enum Params {
    Fixed(SketchSpec),
    Ivy {
        s: Matrix,
        support: Matrix,
    },
    Ls {
        s_base: Matrix,
        d: Matrix,
    },
    Lr {
        mu: Matrix,
        var: Matrix,
    },
    LsLr {
        mu: Matrix,
        var: Matrix,
        d: Matrix,
    },
}

impl Params {
    fn init(method: Method, n: usize, cfg: &TrainConfig, init: &RngStream) -> Result<Params> {
        let m = cfg.m;
        Ok(match method {
            Method::CountSketch => Params::Fixed(init_countsketch(m, n, cfg.density, init)?),
            Method::Gaussian => Params::Fixed(init_gaussian(m, n, init)?),
            Method::Ivy => {
                let s = init_countsketch(m, n, cfg.density, init)?.materialize(None)?;
                let support = s.map(|x| if x != 0.0 { 1.0 } else { 0.0 });
                Params::Ivy { s, support }
            }
            Method::IvyLs => Params::Ls {
                s_base: init_gaussian(m, n, init)?.materialize(None)?,
                d: Matrix::filled(m, n, 1.0),
            },
            Method::IvyLr => Params::Lr {
                mu: Matrix::zeros(m, n),
                var: Matrix::filled(m, n, 1.0),
            },
            Method::IvyLsLr => Params::LsLr {
                mu: Matrix::zeros(m, n),
                var: Matrix::filled(m, n, 1.0),
                d: Matrix::filled(m, n, 1.0),
            },
        })
    }

    fn spec(&self, noise_var: f64) -> SketchSpec {
        match self {
            Params::Fixed(spec) => spec.clone(),
            Params::Ivy { s, .. } => SketchSpec::Plain { s_base: s.clone() },
            Params::Ls { s_base, d } => SketchSpec::Masked {
                s_base: s_base.clone(),
                mask_d: d.clone(),
            },
            Params::Lr { mu, var } => SketchSpec::Stochastic {
                mu: mu.clone(),
                sigma_var: var.clone(),
                noise_var,
            },
            Params::LsLr { mu, var, d } => SketchSpec::StochasticMasked {
                mu: mu.clone(),
                sigma_var: var.clone(),
                mask_d: d.clone(),
                noise_var,
            },
        }
    }

    fn mask(&self) -> Option<&Matrix> {
        match self {
            Params::Ls { d, .. } | Params::LsLr { d, .. } => Some(d),
            _ => None,
        }
    }
}

struct StepInfo {
    loss: f64,
    penalty: f64,
    lambda_active: bool,
    skipped: bool,
}

/// Calls `attempt` until it succeeds or fails with something other than a
/// degenerate spectrum; `Ok(None)` after [`DEGENERACY_RETRIES`] degenerate tries.
fn with_retries<T>(mut attempt: impl FnMut(usize) -> Result<T>) -> Result<Option<T>> {
    for i in 0..DEGENERACY_RETRIES {
        match attempt(i) {
            Ok(v) => return Ok(Some(v)),
            Err(Error::DegenerateSpectrum { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Adds `±JITTER` uniform noise to the nonzero entries of `s`.
fn jitter(s: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
    let mut out = s.clone();
    for x in out.as_mut_slice().iter_mut().filter(|x| **x != 0.0) {
        *x += JITTER * rng.gen_range(-1.0..1.0);
    }
    out
}

struct Learner<'c> {
    cfg: &'c TrainConfig,
    params: Params,
    vel: MomentumState,
    noise: ChaCha8Rng,
    jitter: ChaCha8Rng,
    budget: f64,
    floor: usize,
}

impl<'c> Learner<'c> {
    fn grad_deterministic(&mut self, a: &Matrix, s: &Matrix) -> Result<Option<LossGrad>> {
        let (k, mode) = (self.cfg.k, self.cfg.gradient_mode);
        let jit = &mut self.jitter;
        with_retries(|attempt| {
            if attempt == 0 {
                loss_grad(a, s, k, mode)
            } else {
                loss_grad(a, &jitter(s, jit), k, mode)
            }
        })
    }

    /// Draws `Z`, builds `S = mask ⊙ (Z ⊙ √var + μ)` and differentiates,
    /// redrawing `Z` on degeneracy. Returns `(Z, Z ⊙ √var + μ, grad)`.
    fn grad_stochastic(
        &mut self,
        a: &Matrix,
        mu: &Matrix,
        var: &Matrix,
        mask: Option<&Matrix>,
    ) -> Result<Option<(Matrix, Matrix, LossGrad)>> {
        let (k, mode, nv) = (self.cfg.k, self.cfg.gradient_mode, self.cfg.noise_var);
        let (m, n) = mu.shape();
        let noise = &mut self.noise;
        with_retries(|_| {
            let z = sample_noise_with(m, n, nv, noise);
            let mut raw = z.hadamard(&var.map(f64::sqrt))?;
            raw.axpy(1.0, mu)?;
            let s = match mask {
                Some(d) => d.hadamard(&raw)?,
                None => raw.clone(),
            };
            let lg = loss_grad(a, &s, k, mode)?;
            Ok((z, raw, lg))
        })
    }

    fn sparse_enough(&self) -> bool {
        self.params
            .mask()
            .is_none_or(|d| (nnz(d) as f64) <= self.budget)
    }

    fn step(&mut self, a: &Matrix) -> Result<StepInfo> {
        let cfg = self.cfg;
        let (eta, beta) = (cfg.eta, cfg.momentum_beta);
        let mut params = std::mem::replace(&mut self.params, Params::Fixed(SketchSpec::Plain { s_base: Matrix::zeros(0, 0) }));
        let result = (|| -> Result<StepInfo> {
            match &mut params {
                Params::Fixed(_) => Ok(StepInfo {
                    loss: 0.0,
                    penalty: 0.0,
                    lambda_active: false,
                    skipped: true,
                }),
                Params::Ivy { s, support } => {
                    let Some(lg) = self.grad_deterministic(a, s)? else {
                        return skipped(scw_loss(a, s, cfg.k)?, 0.0);
                    };
                    let g = restrict(&lg.grad_s, support);
                    let vel = velocity(&mut self.vel.s_base, s.shape());
                    sgd_in_place(s, &g, vel, eta, beta)?;
                    Ok(StepInfo {
                        loss: lg.loss,
                        penalty: 0.0,
                        lambda_active: false,
                        skipped: false,
                    })
                }
                Params::Ls { s_base, d } => {
                    let train_mask = (nnz(d) as f64) > self.budget;
                    let penalty = if train_mask { cfg.lambda * d.as_slice().iter().sum::<f64>() } else { 0.0 };
                    let s = d.hadamard(s_base)?;
                    let Some(lg) = self.grad_deterministic(a, &s)? else {
                        return skipped(scw_loss(a, &s, cfg.k)? + penalty, penalty);
                    };
                    let g_base = lg.grad_s.hadamard(d)?;
                    let g_mask = chain_to_mask(&lg.grad_s, s_base, d, cfg.lambda)?;
                    let vel = velocity(&mut self.vel.s_base, s_base.shape());
                    sgd_in_place(s_base, &g_base, vel, eta, beta)?;
                    if train_mask {
                        let vel = velocity(&mut self.vel.mask_d, d.shape());
                        update_mask(d, &g_mask, vel, cfg, self.floor)?;
                    }
                    Ok(StepInfo {
                        loss: lg.loss + penalty,
                        penalty,
                        lambda_active: train_mask,
                        skipped: false,
                    })
                }
                Params::Lr { mu, var } => {
                    let Some((z, _, lg)) = self.grad_stochastic(a, mu, var, None)? else {
                        return skipped(scw_loss(a, mu, cfg.k)?, 0.0);
                    };
                    let (g_mu, g_var) = chain_to_gaussian(&lg.grad_s, &z, var)?;
                    sgd_in_place(mu, &g_mu, velocity(&mut self.vel.mu, mu.shape()), eta, beta)?;
                    update_variance(var, &g_var, velocity(&mut self.vel.sigma_var, var.shape()), cfg)?;
                    Ok(StepInfo {
                        loss: lg.loss,
                        penalty: 0.0,
                        lambda_active: false,
                        skipped: false,
                    })
                }
                Params::LsLr { mu, var, d } => {
                    let dense = (nnz(d) as f64) > self.budget;
                    let lambda = if dense { cfg.lambda } else { 0.0 };
                    let penalty = lambda * d.as_slice().iter().map(|x| x.abs()).sum::<f64>();
                    let Some((z, raw, lg)) = self.grad_stochastic(a, mu, var, Some(d))? else {
                        return skipped(scw_loss(a, &d.hadamard(mu)?, cfg.k)? + penalty, penalty);
                    };
                    let g_raw = lg.grad_s.hadamard(d)?;
                    let (g_mu, g_var) = chain_to_gaussian(&g_raw, &z, var)?;
                    let g_mask = chain_to_mask(&lg.grad_s, &raw, d, lambda)?;
                    sgd_in_place(mu, &g_mu, velocity(&mut self.vel.mu, mu.shape()), eta, beta)?;
                    update_variance(var, &g_var, velocity(&mut self.vel.sigma_var, var.shape()), cfg)?;
                    if dense && cfg.early_stop_flag {
                        let vel = velocity(&mut self.vel.mask_d, d.shape());
                        update_mask(d, &g_mask, vel, cfg, self.floor)?;
                    }
                    Ok(StepInfo {
                        loss: lg.loss + penalty,
                        penalty,
                        lambda_active: dense,
                        skipped: false,
                    })
                }
            }
        })();
        self.params = params;
        result
    }
}

fn skipped(loss: f64, penalty: f64) -> Result<StepInfo> {
    Ok(StepInfo {
        loss,
        penalty,
        lambda_active: penalty > 0.0,
        skipped: true,
    })
}

/// Gradient step on `D` restricted to its live entries, clamp at zero, prune
/// below `ε`, and clear the velocity of every pruned entry.
///
/// Pruning stops at `floor` survivors: when more entries fall below `ε` than
/// the budget allows, the smallest go first. Entries clamped to zero are
/// always pruned.
fn update_mask(d: &mut Matrix, grad: &Matrix, vel: &mut Matrix, cfg: &TrainConfig, floor: usize) -> Result<()> {
    let live = d.map(|x| if x != 0.0 { 1.0 } else { 0.0 });
    let g = restrict(grad, &live);
    *vel = restrict(vel, &live);
    sgd_in_place(d, &g, vel, cfg.eta, cfg.momentum_beta)?;
    let clamped = restrict(&d.map(|x| x.max(0.0)), &live);
    let (mut pruned, count) = threshold_mask(&clamped, cfg.epsilon);
    let alive = nnz(&clamped);
    if alive.saturating_sub(count) < floor {
        let mut below: Vec<usize> = (0..clamped.len())
            .filter(|&i| {
                let x = clamped.as_slice()[i];
                x > 0.0 && x < cfg.epsilon
            })
            .collect();
        below.sort_by(|&i, &j| clamped.as_slice()[i].total_cmp(&clamped.as_slice()[j]).then(i.cmp(&j)));
        let spare = (floor + count).saturating_sub(alive).min(below.len());
        for &i in &below[below.len() - spare..] {
            pruned.as_mut_slice()[i] = clamped.as_slice()[i];
        }
    }
    *vel = restrict(vel, &pruned);
    *d = pruned;
    Ok(())
}

fn update_variance(var: &mut Matrix, grad: &Matrix, vel: &mut Matrix, cfg: &TrainConfig) -> Result<()> {
    sgd_in_place(var, grad, vel, cfg.eta, cfg.momentum_beta)?;
    *var = var.map(|x| x.max(0.0));
    Ok(())
}

/// Trains `method` on `train` and returns the final sketch, the trace and
/// the best held-out checkpoint.
pub fn train(method: Method, train: &MatrixDataset, cfg: &TrainConfig, mut opts: TrainOptions<'_>) -> Result<TrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (n, _) = train.shape();
    for ds in [opts.eval.test, opts.eval.ood].into_iter().flatten() {
        if ds.shape().0 != n {
            return Err(Error::mismatch("evaluation set", train.shape(), ds.shape()));
        }
    }
    let root = RngStream::new(cfg.seed, 0);
    let params = Params::init(method, n, cfg, &root.derive(purpose::INIT))?;
    let mut learner = Learner {
        cfg,
        params,
        vel: MomentumState::default(),
        noise: root.derive(purpose::NOISE).rng(),
        jitter: root.derive(purpose::JITTER).rng(),
        budget: cfg.nnz_budget(n),
        floor: cfg.nnz_budget(n).floor() as usize,
    };
    let eval_stream = root.derive(purpose::EVAL);
    let mut trace = TrainTrace {
        method: Some(method),
        ..TrainTrace::default()
    };
    let mut best: Option<(usize, f64, SketchSpec)> = None;
    let mut clock = Duration::ZERO;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let evaluate = |spec: &SketchSpec, iteration: usize, seconds: f64| -> Result<EvalRecord> {
        let eval_one = |ds: &MatrixDataset| -> Result<f64> {
            if cfg.mean_sketch && spec.kind().is_stochastic() {
                let mean = SketchSpec::Plain {
                    s_base: spec.mean_sketch()?,
                };
                avg_test_error(ds, &mean, cfg.k, 1, &eval_stream)
            } else {
                avg_test_error(ds, spec, cfg.k, cfg.eval_samples, &eval_stream)
            }
        };
        Ok(EvalRecord {
            iteration,
            seconds,
            test_err: opts.eval.test.map(eval_one).transpose()?,
            ood_err: opts.eval.ood.map(eval_one).transpose()?,
        })
    };
    let has_eval = opts.eval.test.is_some() || opts.eval.ood.is_some();

    if !method.is_trained() || cfg.iterations == 0 {
        let spec = learner.params.spec(cfg.noise_var);
        if learner.sparse_enough() && method.learns_sparsity() {
            trace.sparsity_met = true;
            trace.sparsity_met_at = Some(0);
        }
        if has_eval {
            let ev = evaluate(&spec, 0, 0.0)?;
            trace.evals.push(ev);
        }
        return Ok(TrainResult {
            spec,
            trace,
            best: None,
        });
    }

    let mut zero_set: Option<Vec<bool>> = None;
    for it in 0..cfg.iterations {
        let a = &train.matrices()[it % train.len()];
        let met_before = learner.sparse_enough();
        if met_before && trace.sparsity_met_at.is_none() && method.learns_sparsity() {
            trace.sparsity_met_at = Some(it);
        }
        let start = Instant::now();
        let info = learner.step(a)?;
        clock += start.elapsed();

        let mask = learner.params.mask();
        if let Some(d) = mask {
            let zeros: Vec<bool> = d.as_slice().iter().map(|&x| x == 0.0).collect();
            if let Some(prev) = &zero_set {
                assert!(
                    prev.iter().zip(&zeros).all(|(&was, &now)| !was || now),
                    "pruned mask entry revived at iteration {it}"
                );
            }
            zero_set = Some(zeros);
        }
        if let Params::Lr { var, .. } | Params::LsLr { var, .. } = &learner.params {
            assert!(var.as_slice().iter().all(|&x| x >= 0.0), "negative variance at iteration {it}");
        }
        if !info.loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }

        if info.skipped {
            trace.skipped_samples += 1;
        }
        let rec = IterRecord {
            iteration: it,
            seconds: clock.as_secs_f64(),
            loss: info.loss,
            penalty: info.penalty,
            nnz_d: mask.map(nnz),
            lambda_active: info.lambda_active,
            sparsity_met: met_before && method.learns_sparsity(),
            skipped: info.skipped,
        };

        let done = it + 1;
        let mut ev = None;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            let spec = learner.params.spec(cfg.noise_var);
            if has_eval {
                let e = evaluate(&spec, done, rec.seconds)?;
                let eligible = !method.learns_sparsity() || learner.sparse_enough();
                if let Some(err) = e.test_err.filter(|_| eligible) {
                    if best.as_ref().is_none_or(|(_, b, _)| err < *b) {
                        best = Some((done, err, spec.clone()));
                    }
                }
                ev = Some(e);
            }
            if let Some(dir) = &opts.checkpoint_dir {
                spec.save(&dir.join(format!("ckpt_{done:06}.sksp")))?;
            }
        }
        if let Some(sink) = opts.sink.as_deref_mut() {
            sink.record(&rec, ev.as_ref())?;
        }
        trace.records.push(rec);
        if let Some(e) = ev {
            trace.evals.push(e);
        }
    }

    if method.learns_sparsity() && learner.sparse_enough() {
        trace.sparsity_met = true;
        trace.sparsity_met_at.get_or_insert(cfg.iterations);
    }
    Ok(TrainResult {
        spec: learner.params.spec(cfg.noise_var),
        trace,
        best: best.map(|(it, _, spec)| (it, spec)),
    })
}

/// Baseline learner: values on a fixed, randomly chosen CountSketch support.
pub fn train_ivy(train_set: &MatrixDataset, cfg: &TrainConfig) -> Result<(SketchSpec, TrainTrace)> {
    let r = train(Method::Ivy, train_set, cfg, TrainOptions::default())?;
    Ok((r.spec, r.trace))
}

/// Learned sparsity: mask `D` and values `S_base` trained jointly until the
/// nonzero budget is met, then values only.
pub fn train_ivy_ls(train_set: &MatrixDataset, cfg: &TrainConfig) -> Result<(SketchSpec, TrainTrace)> {
    let r = train(Method::IvyLs, train_set, cfg, TrainOptions::default())?;
    Ok((r.spec, r.trace))
}

/// Learned randomness: Gaussian entries with trained mean and variance.
pub fn train_ivy_lr(train_set: &MatrixDataset, cfg: &TrainConfig) -> Result<(SketchSpec, TrainTrace)> {
    let r = train(Method::IvyLr, train_set, cfg, TrainOptions::default())?;
    Ok((r.spec, r.trace))
}

/// Learned sparsity and randomness combined.
pub fn train_ivy_ls_lr(train_set: &MatrixDataset, cfg: &TrainConfig) -> Result<(SketchSpec, TrainTrace)> {
    let r = train(Method::IvyLsLr, train_set, cfg, TrainOptions::default())?;
    Ok((r.spec, r.trace))
}
