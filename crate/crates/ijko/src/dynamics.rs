//! Ground-truth snapshot generation and the dataset format.
//!
//! Two generators produce particle trajectories under a potential `V` (plus
//! an optional symmetrized interaction kernel):
//!
//! - [`euler_maruyama`] integrates the Itô SDE
//!   `dX = −[∇V(X) + (2/N) Σ_j ∇W(X − x_j)] dt + √(2β) dW` with
//!   per-particle counter-based noise streams, so results are reproducible
//!   under any parallel schedule;
//! - [`prox_jko_generate`] advances each particle by the exact proximal
//!   step `argmin_y V(y) + ‖x − y‖²/(2τ)` — closed form for quadratics,
//!   damped gradient descent otherwise. For potential-only, zero-diffusion
//!   energies this *is* the implicit (JKO) step, which makes it the oracle
//!   the trainer is certified against.
//!
//! [`assemble`] turns a trajectory array into a paired or unpaired
//! [`SnapshotSequence`]: paired keeps row identity across time, unpaired
//! gives every snapshot its own disjoint block of trajectories, destroying
//! temporal correlation the way independently re-sampled data would.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{cholesky_lower, lu_inverse, Tensor};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite particle state at inner step {step}")]
    NonFinite { step: usize },
    #[error("prox solver did not reach gradient norm 1e-10 in {0} iterations")]
    ProxDiverged(usize),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("expression error: {0}")]
    Expr(String),
}

/// Ground-truth potential roster. Closed forms are the classical test
/// functions; anything outside the roster plugs in as `expr:<formula>` with
/// variables `x0 … x{D-1}` and finite-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PotentialSpec {
    Sphere,
    StyblinskiTang,
    Bohachevsky,
    HolderTable,
    DoubleExponential,
    OakleyOhagan,
    Flat,
    Quadratic { a: Vec<Vec<f64>>, b: Vec<f64> },
    UserExpression { expr: String },
}

impl PotentialSpec {
    /// Convenience quadratic `V(x) = ½xᵀAx + bᵀx`.
    pub fn quadratic(a: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
        PotentialSpec::Quadratic { a, b }
    }

    pub fn validate_dim(&self, d: usize) -> Result<(), DynamicsError> {
        match self {
            PotentialSpec::Bohachevsky | PotentialSpec::HolderTable if d != 2 => Err(
                DynamicsError::Config(format!("{self} is two-dimensional, got D={d}")),
            ),
            PotentialSpec::Quadratic { a, b } => {
                if a.len() != d || a.iter().any(|r| r.len() != d) || b.len() != d {
                    return Err(DynamicsError::Config(format!(
                        "quadratic potential has wrong dims for D={d}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// The (A, b) pair when the potential is exactly quadratic, with A
    /// symmetrized. Sphere and flat reduce to quadratics.
    pub fn as_quadratic(&self, d: usize) -> Option<(Tensor, Vec<f64>)> {
        match self {
            PotentialSpec::Sphere => {
                let mut a = Tensor::zeros(vec![d, d]);
                for i in 0..d {
                    a.data_mut()[i * d + i] = 2.0;
                }
                Some((a, vec![0.0; d]))
            }
            PotentialSpec::Flat => Some((Tensor::zeros(vec![d, d]), vec![0.0; d])),
            PotentialSpec::Quadratic { a, b } => {
                let mut m = Tensor::zeros(vec![d, d]);
                for i in 0..d {
                    for j in 0..d {
                        m.data_mut()[i * d + j] = 0.5 * (a[i][j] + a[j][i]);
                    }
                }
                Some((m, b.clone()))
            }
            _ => None,
        }
    }

    /// Bind the potential for repeated evaluation at dimension `d`.
    pub fn compile(&self, d: usize) -> Result<CompiledPotential, DynamicsError> {
        self.validate_dim(d)?;
        let kind = match self {
            PotentialSpec::UserExpression { expr } => {
                let parsed: meval::Expr =
                    expr.parse().map_err(|e| DynamicsError::Expr(format!("{expr}: {e}")))?;
                Compiled::Expr(parsed)
            }
            other => Compiled::Analytic(other.clone()),
        };
        Ok(CompiledPotential { kind, dim: d })
    }
}

impl fmt::Display for PotentialSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PotentialSpec::Sphere => write!(f, "sphere"),
            PotentialSpec::StyblinskiTang => write!(f, "styblinski_tang"),
            PotentialSpec::Bohachevsky => write!(f, "bohachevsky"),
            PotentialSpec::HolderTable => write!(f, "holder_table"),
            PotentialSpec::DoubleExponential => write!(f, "double_exponential"),
            PotentialSpec::OakleyOhagan => write!(f, "oakley_ohagan"),
            PotentialSpec::Flat => write!(f, "flat"),
            PotentialSpec::Quadratic { a, b } => {
                let rows: Vec<String> = a
                    .iter()
                    .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                    .collect();
                let bs: Vec<String> = b.iter().map(|v| v.to_string()).collect();
                write!(f, "quadratic:{}:{}", rows.join(";"), bs.join(","))
            }
            PotentialSpec::UserExpression { expr } => write!(f, "expr:{expr}"),
        }
    }
}

impl FromStr for PotentialSpec {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphere" => return Ok(PotentialSpec::Sphere),
            "styblinski_tang" => return Ok(PotentialSpec::StyblinskiTang),
            "bohachevsky" => return Ok(PotentialSpec::Bohachevsky),
            "holder_table" => return Ok(PotentialSpec::HolderTable),
            "double_exponential" => return Ok(PotentialSpec::DoubleExponential),
            "oakley_ohagan" => return Ok(PotentialSpec::OakleyOhagan),
            "flat" => return Ok(PotentialSpec::Flat),
            _ => {}
        }
        if let Some(expr) = s.strip_prefix("expr:") {
            return Ok(PotentialSpec::UserExpression { expr: expr.to_string() });
        }
        if let Some(body) = s.strip_prefix("quadratic:") {
            let parts: Vec<&str> = body.split(':').collect();
            if parts.len() != 2 {
                return Err(DynamicsError::Config(format!(
                    "quadratic potential syntax is quadratic:<A rows ;-separated>:<b>, got {s}"
                )));
            }
            let a = parse_matrix(parts[0])?;
            let b = parse_vector(parts[1])?;
            return Ok(PotentialSpec::Quadratic { a, b });
        }
        Err(DynamicsError::Config(format!("unknown potential {s}")))
    }
}

pub fn parse_matrix(s: &str) -> Result<Vec<Vec<f64>>, DynamicsError> {
    s.split(';').map(parse_vector).collect()
}

pub fn parse_vector(s: &str) -> Result<Vec<f64>, DynamicsError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| DynamicsError::Config(format!("bad number {v}: {e}")))
        })
        .collect()
}

enum Compiled {
    Analytic(PotentialSpec),
    Expr(meval::Expr),
}

/// A potential bound to a fixed dimension, cheap to evaluate repeatedly.
pub struct CompiledPotential {
    kind: Compiled,
    dim: usize,
}

impl CompiledPotential {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            Compiled::Analytic(spec) => analytic_value(spec, x),
            Compiled::Expr(expr) => {
                let mut ctx = meval::Context::new();
                for (i, &v) in x.iter().enumerate() {
                    ctx.var(format!("x{i}"), v);
                }
                expr.eval_with_context(ctx).unwrap_or(f64::NAN)
            }
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            Compiled::Analytic(spec) => analytic_grad(spec, x),
            Compiled::Expr(_) => {
                // Central differences; user expressions carry no analytic form.
                let h = 1e-6;
                let mut g = vec![0.0; x.len()];
                let mut probe = x.to_vec();
                for i in 0..x.len() {
                    probe[i] = x[i] + h;
                    let plus = self.value(&probe);
                    probe[i] = x[i] - h;
                    let minus = self.value(&probe);
                    probe[i] = x[i];
                    g[i] = (plus - minus) / (2.0 * h);
                }
                g
            }
        }
    }
}

fn analytic_value(spec: &PotentialSpec, x: &[f64]) -> f64 {
    match spec {
        PotentialSpec::Sphere => x.iter().map(|v| v * v).sum(),
        PotentialSpec::StyblinskiTang => {
            0.5 * x.iter().map(|v| v.powi(4) - 16.0 * v * v + 5.0 * v).sum::<f64>()
        }
        PotentialSpec::Bohachevsky => {
            let (a, b) = (x[0], x[1]);
            a * a + 2.0 * b * b - 0.3 * (3.0 * std::f64::consts::PI * a).cos()
                - 0.4 * (4.0 * std::f64::consts::PI * b).cos()
                + 0.7
        }
        PotentialSpec::HolderTable => {
            let (a, b) = (x[0], x[1]);
            let r = (a * a + b * b).sqrt();
            -(a.sin() * b.cos() * (1.0 - r / std::f64::consts::PI).abs().exp()).abs()
        }
        PotentialSpec::DoubleExponential => x.iter().map(|v| v.exp() + (-v).exp()).sum(),
        PotentialSpec::OakleyOhagan => x.iter().map(|v| v + v.sin() + v.cos() + v * v).sum(),
        PotentialSpec::Flat => 0.0,
        PotentialSpec::Quadratic { a, b } => {
            let d = x.len();
            let mut v = 0.0;
            for i in 0..d {
                v += b[i] * x[i];
                for j in 0..d {
                    v += 0.5 * x[i] * a[i][j] * x[j];
                }
            }
            v
        }
        PotentialSpec::UserExpression { .. } => unreachable!("compiled separately"),
    }
}

fn analytic_grad(spec: &PotentialSpec, x: &[f64]) -> Vec<f64> {
    match spec {
        PotentialSpec::Sphere => x.iter().map(|v| 2.0 * v).collect(),
        PotentialSpec::StyblinskiTang => x.iter().map(|v| 2.0 * v.powi(3) - 16.0 * v + 2.5).collect(),
        PotentialSpec::Bohachevsky => {
            let pi = std::f64::consts::PI;
            vec![
                2.0 * x[0] + 0.9 * pi * (3.0 * pi * x[0]).sin(),
                4.0 * x[1] + 1.6 * pi * (4.0 * pi * x[1]).sin(),
            ]
        }
        PotentialSpec::HolderTable => {
            // Differentiable away from the |·| crossings; signum picks the
            // almost-everywhere branch.
            let pi = std::f64::consts::PI;
            let (a, b) = (x[0], x[1]);
            let r = (a * a + b * b).sqrt().max(1e-12);
            let inner = 1.0 - r / pi;
            let e = inner.abs().exp();
            let g = a.sin() * b.cos() * e;
            let s = g.signum();
            let dh_da = inner.signum() * (-a / (r * pi));
            let dh_db = inner.signum() * (-b / (r * pi));
            vec![
                -s * e * (a.cos() * b.cos() + a.sin() * b.cos() * dh_da),
                -s * e * (-a.sin() * b.sin() + a.sin() * b.cos() * dh_db),
            ]
        }
        PotentialSpec::DoubleExponential => x.iter().map(|v| v.exp() - (-v).exp()).collect(),
        PotentialSpec::OakleyOhagan => {
            x.iter().map(|v| 1.0 + v.cos() - v.sin() + 2.0 * v).collect()
        }
        PotentialSpec::Flat => vec![0.0; x.len()],
        PotentialSpec::Quadratic { a, b } => {
            let d = x.len();
            let mut g = b.clone();
            for i in 0..d {
                for j in 0..d {
                    // Symmetrized quadratic-form gradient.
                    g[i] += 0.5 * (a[i][j] + a[j][i]) * x[j];
                }
            }
            g
        }
        PotentialSpec::UserExpression { .. } => unreachable!("compiled separately"),
    }
}

/// Initial particle distribution. An all-zero covariance degenerates to a
/// point mass at the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitDistribution {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitDistribution {
    pub fn standard_gaussian(d: usize) -> Self {
        let mut cov = vec![vec![0.0; d]; d];
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        InitDistribution::Gaussian { mean: vec![0.0; d], cov }
    }

    pub fn point(x: Vec<f64>) -> Self {
        let d = x.len();
        InitDistribution::Gaussian { mean: x, cov: vec![vec![0.0; d]; d] }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitDistribution::Gaussian { mean, .. } => mean.len(),
            InitDistribution::UniformBox { lo, .. } => lo.len(),
        }
    }
}

/// Generation settings: `n` particles per snapshot observed every `tau`
/// time units for `steps` intervals, integrated with `sde_substeps` inner
/// Euler–Maruyama steps per interval at diffusion level `beta`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub steps: usize,
    pub tau: f64,
    pub sde_substeps: usize,
    pub beta: f64,
    pub seed: u64,
    pub init: InitDistribution,
}

impl GenConfig {
    /// The synthetic-benchmark defaults: τ = 0.01, K = 5, N = 2000.
    pub fn default_experiment(d: usize) -> Self {
        GenConfig {
            n: 2000,
            steps: 5,
            tau: 0.01,
            sde_substeps: 1,
            beta: 0.0,
            seed: 0,
            init: InitDistribution::standard_gaussian(d),
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.sde_substeps == 0 {
            return Err(DynamicsError::Config("sde_substeps must be ≥ 1".into()));
        }
        if self.beta < 0.0 {
            return Err(DynamicsError::Config("beta must be ≥ 0".into()));
        }
        if self.n == 0 || self.steps == 0 {
            return Err(DynamicsError::Config("n and steps must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Full trajectory array: `n` particles observed at `snapshots = K+1`
/// times in dimension `dim`.
#[derive(Debug, Clone)]
pub struct Trajectories {
    pub n: usize,
    pub snapshots: usize,
    pub dim: usize,
    data: Vec<f64>,
}

impl Trajectories {
    fn new(n: usize, snapshots: usize, dim: usize) -> Self {
        Trajectories { n, snapshots, dim, data: vec![0.0; n * snapshots * dim] }
    }

    pub fn at(&self, particle: usize, k: usize) -> &[f64] {
        let base = (particle * self.snapshots + k) * self.dim;
        &self.data[base..base + self.dim]
    }

    fn at_mut(&mut self, particle: usize, k: usize) -> &mut [f64] {
        let base = (particle * self.snapshots + k) * self.dim;
        &mut self.data[base..base + self.dim]
    }

    /// Time-k positions of a block of particles as a B×D matrix.
    pub fn slice_at(&self, particles: std::ops::Range<usize>, k: usize) -> Tensor {
        let rows = particles.len();
        let mut out = Tensor::zeros(vec![rows, self.dim]);
        for (r, p) in particles.enumerate() {
            out.data_mut()[r * self.dim..(r + 1) * self.dim].copy_from_slice(self.at(p, k));
        }
        out
    }
}

/// How trajectories are squashed into a snapshot dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssembleMode {
    Paired,
    Unpaired,
    /// Ablation mode: a fraction of each snapshot's rows share trajectories,
    /// the rest come from disjoint per-snapshot blocks.
    Mixed { paired_fraction: f64, per_snapshot: usize },
}

impl AssembleMode {
    /// Trajectories the generator must produce for `n` rows per snapshot
    /// over `k` transport steps.
    pub fn trajectories_needed(&self, n: usize, k: usize) -> usize {
        match self {
            AssembleMode::Paired => n,
            AssembleMode::Unpaired => n * (k + 1),
            AssembleMode::Mixed { paired_fraction, per_snapshot } => {
                let shared = shared_rows(*paired_fraction, *per_snapshot);
                shared + (k + 1) * (per_snapshot - shared)
            }
        }
    }
}

fn shared_rows(fraction: f64, per_snapshot: usize) -> usize {
    ((fraction * per_snapshot as f64).round() as usize).min(per_snapshot)
}

/// Pairing state recorded in dataset metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairingMode {
    Paired,
    Unpaired,
    Mixed(f64),
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairingMode::Paired => write!(f, "paired"),
            PairingMode::Unpaired => write!(f, "unpaired"),
            PairingMode::Mixed(p) => write!(f, "mixed:{p}"),
        }
    }
}

impl FromStr for PairingMode {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paired" => Ok(PairingMode::Paired),
            "unpaired" => Ok(PairingMode::Unpaired),
            _ => match s.strip_prefix("mixed:") {
                Some(p) => Ok(PairingMode::Mixed(p.parse().map_err(|e| {
                    DynamicsError::Config(format!("bad mixed fraction {p}: {e}"))
                })?)),
                None => Err(DynamicsError::Config(format!("unknown pairing mode {s}"))),
            },
        }
    }
}

/// Where a dataset came from; kept exact for reproducibility audits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub seed: u64,
    pub generator: String,
    pub potential: String,
}

/// The observed marginals: one particle array per time step plus the step
/// size and pairing mode.
#[derive(Debug, Clone)]
pub struct SnapshotSequence {
    pub snapshots: Vec<Tensor>,
    pub tau: f64,
    pub mode: PairingMode,
    pub provenance: Provenance,
}

impl SnapshotSequence {
    /// Number of transport steps K (snapshots are k = 0 … K).
    pub fn k_steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.snapshots[0].cols()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.rows()).collect()
    }
}

fn sample_row(rng: &mut ChaCha8Rng, init: &InitDistribution, chol: Option<&Tensor>) -> Vec<f64> {
    match init {
        InitDistribution::Gaussian { mean, .. } => match chol {
            None => mean.clone(),
            Some(l) => {
                let d = mean.len();
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let mut x = mean.clone();
                for i in 0..d {
                    for j in 0..=i {
                        x[i] += l.data()[i * d + j] * z[j];
                    }
                }
                x
            }
        },
        InitDistribution::UniformBox { lo, hi } => lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| if a == b { a } else { rng.gen_range(a..b) })
            .collect(),
    }
}

fn init_cholesky(init: &InitDistribution) -> Result<Option<Tensor>, DynamicsError> {
    match init {
        InitDistribution::Gaussian { cov, mean } => {
            let d = mean.len();
            if cov.iter().all(|r| r.iter().all(|&v| v == 0.0)) {
                return Ok(None);
            }
            let flat: Vec<f64> = cov.iter().flatten().copied().collect();
            let l = cholesky_lower(&Tensor::matrix(d, d, flat))
                .map_err(|e| DynamicsError::Config(format!("initial covariance: {e}")))?;
            Ok(Some(l))
        }
        InitDistribution::UniformBox { .. } => Ok(None),
    }
}

fn particle_rng(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + particle as u64);
    rng
}

/// Draw the shared initial sample. Both generators start from this, so a
/// zero-diffusion SDE run and the prox oracle see identical particles.
pub fn sample_initial(cfg: &GenConfig, n_total: usize) -> Result<Tensor, DynamicsError> {
    let d = cfg.init.dim();
    let chol = init_cholesky(&cfg.init)?;
    let mut out = Tensor::zeros(vec![n_total, d]);
    for i in 0..n_total {
        let mut rng = particle_rng(cfg.seed, i);
        let row = sample_row(&mut rng, &cfg.init, chol.as_ref());
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&row);
    }
    Ok(out)
}

/// Number of worker threads, capped by the `IJKO_THREADS` env var.
pub(crate) fn worker_count() -> usize {
    std::env::var("IJKO_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Integrate the particle SDE. The optional interaction kernel is used in
/// symmetrized form `½(W_b(z) + W_b(−z))` and contributes drift
/// `−(2/N) Σ_j ∇W(x_i − x_j)`, the first variation of the double integral.
pub fn euler_maruyama(
    v: &PotentialSpec,
    w_base: Option<&PotentialSpec>,
    cfg: &GenConfig,
    n_total: usize,
) -> Result<Trajectories, DynamicsError> {
    cfg.validate()?;
    let d = cfg.init.dim();
    let potential = v.compile(d)?;
    let kernel = w_base.map(|w| w.compile(d)).transpose()?;
    let init = sample_initial(cfg, n_total)?;
    let dt = cfg.tau / cfg.sde_substeps as f64;
    let noise_scale = (2.0 * cfg.beta * dt).sqrt();

    let mut traj = Trajectories::new(n_total, cfg.steps + 1, d);
    for i in 0..n_total {
        traj.at_mut(i, 0).copy_from_slice(init.row(i));
    }

    match kernel {
        Some(kernel) => {
            // Interaction couples particles: synchronous single-threaded update.
            let grad_w_sym = |z: &[f64]| {
                let g_pos = kernel.grad(z);
                let neg: Vec<f64> = z.iter().map(|v| -v).collect();
                let g_neg = kernel.grad(&neg);
                g_pos
                    .iter()
                    .zip(&g_neg)
                    .map(|(p, n)| 0.5 * (p - n))
                    .collect::<Vec<f64>>()
            };
            let mut state = init.data().to_vec();
            let mut rngs: Vec<ChaCha8Rng> =
                (0..n_total).map(|i| particle_rng(cfg.seed, i)).collect();
            let mut inner = 0usize;
            let mut z = vec![0.0; d];
            for k in 1..=cfg.steps {
                for _ in 0..cfg.sde_substeps {
                    inner += 1;
                    let mut drift = vec![0.0; n_total * d];
                    for i in 0..n_total {
                        let xi = state[i * d..(i + 1) * d].to_vec();
                        let mut g = potential.grad(&xi);
                        for j in 0..n_total {
                            for c in 0..d {
                                z[c] = xi[c] - state[j * d + c];
                            }
                            let gw = grad_w_sym(&z);
                            for c in 0..d {
                                g[c] += 2.0 / n_total as f64 * gw[c];
                            }
                        }
                        drift[i * d..(i + 1) * d].copy_from_slice(&g);
                    }
                    for i in 0..n_total {
                        for c in 0..d {
                            let noise: f64 = rngs[i].sample(StandardNormal);
                            state[i * d + c] += -drift[i * d + c] * dt + noise_scale * noise;
                            if !state[i * d + c].is_finite() {
                                return Err(DynamicsError::NonFinite { step: inner });
                            }
                        }
                    }
                }
                for i in 0..n_total {
                    traj.at_mut(i, k).copy_from_slice(&state[i * d..(i + 1) * d]);
                }
            }
            Ok(traj)
        }
        None => {
            // Independent particles: chunked across workers, determinism
            // guaranteed by the per-particle noise streams.
            let workers = worker_count().min(n_total).max(1);
            let chunk = n_total.div_ceil(workers);
            let results: Vec<Result<Vec<f64>, DynamicsError>> = std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for w in 0..workers {
                    let lo = w * chunk;
                    let hi = ((w + 1) * chunk).min(n_total);
                    let init = &init;
                    let potential = &potential;
                    handles.push(scope.spawn(move || {
                        let mut out = vec![0.0; (hi - lo) * (cfg.steps + 1) * d];
                        for i in lo..hi {
                            let mut rng = particle_rng(cfg.seed, i);
                            let mut x = init.row(i).to_vec();
                            let base = (i - lo) * (cfg.steps + 1) * d;
                            out[base..base + d].copy_from_slice(&x);
                            let mut inner = 0usize;
                            for k in 1..=cfg.steps {
                                for _ in 0..cfg.sde_substeps {
                                    inner += 1;
                                    let g = potential.grad(&x);
                                    for c in 0..d {
                                        let noise: f64 = rng.sample(StandardNormal);
                                        x[c] += -g[c] * dt + noise_scale * noise;
                                        if !x[c].is_finite() {
                                            return Err(DynamicsError::NonFinite { step: inner });
                                        }
                                    }
                                }
                                out[base + k * d..base + (k + 1) * d].copy_from_slice(&x);
                            }
                        }
                        Ok(out)
                    }));
                }
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            let mut offset = 0usize;
            for r in results {
                let block = r?;
                traj.data[offset..offset + block.len()].copy_from_slice(&block);
                offset += block.len();
            }
            Ok(traj)
        }
    }
}

/// One proximal step `argmin_y V(y) + ‖x − y‖²/(2τ)` by damped gradient
/// descent, to gradient norm ≤ 1e-10.
pub fn prox_point_numeric(
    potential: &CompiledPotential,
    x: &[f64],
    tau: f64,
) -> Result<Vec<f64>, DynamicsError> {
    prox_point_with(&|y| potential.value(y), &|y| potential.grad(y), x, tau)
}

/// Generic damped-descent prox over value/gradient closures.
pub fn prox_point_with(
    value: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    tau: f64,
) -> Result<Vec<f64>, DynamicsError> {
    let objective = |y: &[f64]| {
        let mut q = 0.0;
        for (yi, xi) in y.iter().zip(x) {
            q += (yi - xi) * (yi - xi);
        }
        value(y) + q / (2.0 * tau)
    };
    let mut y = x.to_vec();
    let mut fy = objective(&y);
    let mut lr = tau * 0.5;
    for _ in 0..10_000 {
        let mut g = grad(&y);
        let mut norm2 = 0.0;
        for (gi, (yi, xi)) in g.iter_mut().zip(y.iter().zip(x)) {
            *gi += (yi - xi) / tau;
            norm2 += *gi * *gi;
        }
        if norm2.sqrt() <= 1e-10 {
            return Ok(y);
        }
        let trial: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - lr * gi).collect();
        let ft = objective(&trial);
        // Near the minimum the objective difference drops below float
        // resolution before the gradient does; accept near-equal steps so
        // the gradient criterion can be reached.
        if ft <= fy + 1e-12 * fy.abs().max(1.0) {
            y = trial;
            fy = ft.min(fy);
            lr = (lr * 1.2).min(tau);
        } else {
            lr *= 0.5;
            if lr < 1e-18 {
                break;
            }
        }
    }
    Err(DynamicsError::ProxDiverged(10_000))
}

/// Exact-JKO trajectories: every particle advances by the proximal map each
/// interval. Quadratics (sphere and flat included) use the closed form
/// `(τA + I)⁻¹(x − τb)`.
pub fn prox_trajectories(
    v: &PotentialSpec,
    cfg: &GenConfig,
    n_total: usize,
) -> Result<Trajectories, DynamicsError> {
    cfg.validate()?;
    let d = cfg.init.dim();
    v.validate_dim(d)?;
    let init = sample_initial(cfg, n_total)?;
    let mut traj = Trajectories::new(n_total, cfg.steps + 1, d);
    for i in 0..n_total {
        traj.at_mut(i, 0).copy_from_slice(init.row(i));
    }

    let closed_form = v.as_quadratic(d).map(|(a, b)| {
        let mut m = a.map(|v| cfg.tau * v);
        for i in 0..d {
            m.data_mut()[i * d + i] += 1.0;
        }
        let inv = lu_inverse(&m).expect("τA + I invertible");
        (inv, b)
    });
    let numeric = match closed_form {
        Some(_) => None,
        None => Some(v.compile(d)?),
    };

    let mut x = vec![0.0; d];
    for k in 1..=cfg.steps {
        for i in 0..n_total {
            x.copy_from_slice(traj.at(i, k - 1));
            let next = match (&closed_form, &numeric) {
                (Some((inv, b)), _) => {
                    let mut shifted = x.clone();
                    for c in 0..d {
                        shifted[c] -= cfg.tau * b[c];
                    }
                    let mut y = vec![0.0; d];
                    for r in 0..d {
                        let mut s = 0.0;
                        for c in 0..d {
                            s += inv.data()[r * d + c] * shifted[c];
                        }
                        y[r] = s;
                    }
                    y
                }
                (None, Some(p)) => prox_point_numeric(p, &x, cfg.tau)?,
                (None, None) => unreachable!(),
            };
            traj.at_mut(i, k).copy_from_slice(&next);
        }
    }
    Ok(traj)
}

/// Paired exact-JKO dataset for a potential-only energy.
pub fn prox_jko_generate(v: &PotentialSpec, cfg: &GenConfig) -> Result<SnapshotSequence, DynamicsError> {
    let traj = prox_trajectories(v, cfg, cfg.n)?;
    let mut seq = assemble(&traj, AssembleMode::Paired)?;
    seq.tau = cfg.tau;
    seq.provenance =
        Provenance { seed: cfg.seed, generator: "prox_jko".into(), potential: v.to_string() };
    Ok(seq)
}

/// Build a snapshot dataset from a trajectory array.
///
/// Paired keeps row alignment (snapshot k row i is trajectory i at time k).
/// Unpaired gives snapshot k the time-k slice of its own disjoint block of
/// trajectories. Mixed shares the first `round(p·N)` rows and fills the
/// rest from disjoint blocks.
pub fn assemble(traj: &Trajectories, mode: AssembleMode) -> Result<SnapshotSequence, DynamicsError> {
    let snapshots = match mode {
        AssembleMode::Paired => {
            (0..traj.snapshots).map(|k| traj.slice_at(0..traj.n, k)).collect::<Vec<_>>()
        }
        AssembleMode::Unpaired => {
            if traj.n % traj.snapshots != 0 {
                return Err(DynamicsError::Config(format!(
                    "unpaired assembly needs a multiple of {} trajectories, got {}",
                    traj.snapshots, traj.n
                )));
            }
            let n = traj.n / traj.snapshots;
            (0..traj.snapshots).map(|k| traj.slice_at(k * n..(k + 1) * n, k)).collect()
        }
        AssembleMode::Mixed { paired_fraction, per_snapshot } => {
            if !(0.0..=1.0).contains(&paired_fraction) {
                return Err(DynamicsError::Config("paired fraction must be in [0, 1]".into()));
            }
            let shared = shared_rows(paired_fraction, per_snapshot);
            let disjoint = per_snapshot - shared;
            let needed = shared + traj.snapshots * disjoint;
            if traj.n != needed {
                return Err(DynamicsError::Config(format!(
                    "mixed assembly needs {needed} trajectories, got {}",
                    traj.n
                )));
            }
            (0..traj.snapshots)
                .map(|k| {
                    let mut rows = Vec::with_capacity(per_snapshot * traj.dim);
                    for p in 0..shared {
                        rows.extend_from_slice(traj.at(p, k));
                    }
                    let base = shared + k * disjoint;
                    for p in base..base + disjoint {
                        rows.extend_from_slice(traj.at(p, k));
                    }
                    Tensor::matrix(per_snapshot, traj.dim, rows)
                })
                .collect()
        }
    };
    let mode = match mode {
        AssembleMode::Paired => PairingMode::Paired,
        AssembleMode::Unpaired => PairingMode::Unpaired,
        AssembleMode::Mixed { paired_fraction, .. } => PairingMode::Mixed(paired_fraction),
    };
    Ok(SnapshotSequence { snapshots, tau: 0.0, mode, provenance: Provenance::default() })
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    dim: usize,
    #[serde(rename = "K")]
    k: usize,
    tau: f64,
    mode: String,
    potential: String,
    seed: u64,
    counts: Vec<usize>,
}

/// Write `meta.json` plus one headerless `snapshot_k.csv` per step (LF line
/// endings, shortest round-trip decimal floats).
pub fn save_dataset(seq: &SnapshotSequence, dir: &Path) -> Result<(), DynamicsError> {
    fs::create_dir_all(dir)?;
    let meta = Meta {
        dim: seq.dim(),
        k: seq.k_steps(),
        tau: seq.tau,
        mode: seq.mode.to_string(),
        potential: seq.provenance.potential.clone(),
        seed: seq.provenance.seed,
        counts: seq.counts(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    for (k, snap) in seq.snapshots.iter().enumerate() {
        let mut out = String::new();
        for r in 0..snap.rows() {
            let row: Vec<String> = snap.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(dir.join(format!("snapshot_{k}.csv")), out)?;
    }
    Ok(())
}

/// Load a dataset directory, verifying the manifest against the files.
pub fn load_dataset(dir: &Path) -> Result<SnapshotSequence, DynamicsError> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    if meta.counts.len() != meta.k + 1 {
        return Err(DynamicsError::Parse {
            file: meta_path.display().to_string(),
            line: 0,
            msg: format!("manifest K={} but {} counts listed", meta.k, meta.counts.len()),
        });
    }
    let mut snapshots = Vec::with_capacity(meta.k + 1);
    for k in 0..=meta.k {
        let path = dir.join(format!("snapshot_{k}.csv"));
        let fname = path.display().to_string();
        let text = fs::read_to_string(&path).map_err(|e| DynamicsError::Parse {
            file: fname.clone(),
            line: 0,
            msg: format!("manifest K={} but snapshot_{k}.csv is unreadable: {e}", meta.k),
        })?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let vals = parse_vector(line).map_err(|e| DynamicsError::Parse {
                file: fname.clone(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            if vals.len() != meta.dim {
                return Err(DynamicsError::Parse {
                    file: fname.clone(),
                    line: lineno + 1,
                    msg: format!("row has {} values, dim is {}", vals.len(), meta.dim),
                });
            }
            rows.push(vals);
        }
        if rows.len() != meta.counts[k] {
            return Err(DynamicsError::Parse {
                file: fname,
                line: 0,
                msg: format!("manifest count {} but {} rows", meta.counts[k], rows.len()),
            });
        }
        snapshots.push(Tensor::matrix(rows.len(), meta.dim, rows.concat()));
    }
    Ok(SnapshotSequence {
        snapshots,
        tau: meta.tau,
        mode: meta.mode.parse()?,
        provenance: Provenance {
            seed: meta.seed,
            generator: String::new(),
            potential: meta.potential,
        },
    })
}

/// Empirical mean of `V` over a particle batch; the prox sequence is
/// non-increasing in this.
pub fn mean_potential(v: &CompiledPotential, batch: &Tensor) -> f64 {
    let mut acc = 0.0;
    for r in 0..batch.rows() {
        acc += v.value(batch.row(r));
    }
    acc / batch.rows() as f64
}
