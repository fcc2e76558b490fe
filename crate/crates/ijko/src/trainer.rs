//! Adversarial training of the free energy: descent–ascent on the
//! inverse-JKO objective.
//!
//! Each epoch runs `I_T` inner iterations that push the transport maps
//! toward the exact JKO step of the *current* energy candidate,
//!
//! `min_φ Σ_k [ Ĵ_θ(T^k_φ(X_k)) + (1/2τ)·mean_j ‖x_j − T^k_φ(x_j)‖² ]`,
//!
//! then one outer ascent step on the gap `Σ_k [Ĵ_θ(T^k(X_k)) − Ĵ_θ(X_{k+1})]`
//! (realized as descent on its negation, with global-norm gradient clipping
//! on the energy player only). Fresh mini-batches are drawn for every inner
//! iteration; per-step gradients are aggregated equally before each update.
//!
//! The transport penalty anchors to the source point `x`, matching the
//! derivation of the objective; batch estimates of `Ĵ` use sample means, so
//! the per-sample inner problem is exactly the proximal step the theory
//! harness certifies.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{gradient, DiffError, Tape, Tensor, Var};
use crate::dynamics::SnapshotSequence;
use crate::energy::{
    energy_on, inverse_softplus, map_with_logdet_on, softplus, ComponentMask, EnergyError,
    EnergyParams, EnergyVars, EntropyCache, KL_NEIGHBORS,
};
use crate::nets::{self, MapEnsemble, MlpSpec, NetError, ParamVector};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite gradient in the {component} component: {source}")]
    NonFinite { component: String, source: DiffError },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("train log io: {0}")]
    Io(#[from] std::io::Error),
}

/// Adaptive-moment optimizer settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Energy player: lr 5e-4, moments 0.9/0.999.
    pub fn energy_default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Map player: lr 1e-3, moments 0.5/0.9.
    pub fn map_default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.5, beta2: 0.9, eps: 1e-8 }
    }
}

/// First/second moment accumulators for one parameter vector.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected adaptive-moment update, in place.
pub fn adam_update(state: &mut OptimizerState, params: &mut [f64], grad: &[f64], cfg: &AdamConfig) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(state.m.len(), params.len(), "optimizer state shape");
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Scale a set of gradient buffers so their joint norm is at most
/// `max_norm`; returns the pre-clip global norm.
pub fn clip_global_norm(parts: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in parts.iter() {
        for &g in p.iter() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in parts.iter_mut() {
            for g in p.iter_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Transport-map parametrization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapParametrization {
    PerStep,
    TimeConditioned,
}

/// Static energy vs one potential per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialTime {
    Static,
    TimeVarying,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Inner map iterations I_T per outer energy step.
    pub inner_iters: usize,
    pub batch_size: usize,
    pub energy_opt: AdamConfig,
    /// Global-norm clip for the energy player's gradient.
    pub energy_clip_norm: f64,
    pub map_opt: AdamConfig,
    pub mask: ComponentMask,
    pub map_parametrization: MapParametrization,
    pub potential_time: PotentialTime,
    /// Feed k/K instead of raw k to time-conditioned maps.
    pub normalize_time: bool,
    /// Evaluate the learned kernel as ½(net(z) + net(−z)).
    pub symmetrize_w: bool,
    pub seed: u64,
    pub test_fraction: f64,
    pub v_hidden: Vec<usize>,
    pub w_hidden: Vec<usize>,
    pub map_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            inner_iters: 10,
            batch_size: 500,
            energy_opt: AdamConfig::energy_default(),
            energy_clip_norm: 10.0,
            map_opt: AdamConfig::map_default(),
            mask: ComponentMask::potential_only(),
            map_parametrization: MapParametrization::TimeConditioned,
            potential_time: PotentialTime::Static,
            normalize_time: false,
            symmetrize_w: true,
            seed: 0,
            test_fraction: 0.4,
            v_hidden: vec![64, 64],
            w_hidden: vec![64, 64],
            map_hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.inner_iters == 0 {
            return Err(TrainError::Config("inner_iters (I_T) must be ≥ 1".into()));
        }
        if self.mask.use_w && self.batch_size < 2 {
            return Err(TrainError::Config(
                "batch_size must be ≥ 2 when the interaction term is on".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(TrainError::Config("test_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// The learnable energy: one potential net (or one per step), an optional
/// interaction net and the raw diffusion scalar.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    pub potentials: Vec<ParamVector>,
    pub v_spec: MlpSpec,
    pub interaction: Option<ParamVector>,
    pub w_spec: MlpSpec,
    pub theta3_raw: Option<f64>,
    pub mask: ComponentMask,
    pub symmetrize_w: bool,
    pub time_varying: bool,
}

impl EnergyModel {
    pub fn init(dim: usize, k_steps: usize, cfg: &TrainConfig) -> Self {
        let v_spec = MlpSpec::new(dim, cfg.v_hidden.clone(), nets::Activation::Softplus, 1);
        let w_spec = MlpSpec::new(dim, cfg.w_hidden.clone(), nets::Activation::Softplus, 1);
        let time_varying = cfg.potential_time == PotentialTime::TimeVarying;
        let n_pots = if cfg.mask.use_v {
            if time_varying {
                k_steps
            } else {
                1
            }
        } else {
            0
        };
        EnergyModel {
            potentials: (0..n_pots)
                .map(|i| nets::init_params(&v_spec, cfg.seed.wrapping_add(100 + i as u64)))
                .collect(),
            v_spec,
            interaction: cfg
                .mask
                .use_w
                .then(|| nets::init_params(&w_spec, cfg.seed.wrapping_add(200))),
            w_spec,
            theta3_raw: cfg.mask.use_u.then(|| inverse_softplus(0.1)),
            mask: cfg.mask,
            symmetrize_w: cfg.symmetrize_w,
            time_varying,
        }
    }

    /// Index into `potentials` for step k.
    pub fn potential_index(&self, k: usize) -> usize {
        if self.time_varying {
            k
        } else {
            0
        }
    }

    /// Effective diffusion coefficient softplus(θ3_raw).
    pub fn theta3(&self) -> Option<f64> {
        self.theta3_raw.map(softplus)
    }

    /// Step-k view as an evaluation-level parameter set.
    pub fn energy_params_for_step(&self, k: usize) -> EnergyParams {
        EnergyParams {
            theta1: self
                .potentials
                .get(self.potential_index(k))
                .cloned()
                .unwrap_or_else(|| ParamVector::zeros(&self.v_spec)),
            theta2: self
                .interaction
                .clone()
                .unwrap_or_else(|| ParamVector::zeros(&self.w_spec)),
            theta3_raw: self.theta3_raw.unwrap_or_else(|| inverse_softplus(1e-12)),
            mask: self.mask,
            v_spec: self.v_spec.clone(),
            w_spec: self.w_spec.clone(),
            symmetrize_w: self.symmetrize_w,
        }
    }

    /// ∇V of the step-k learned potential at a point, through the tape.
    pub fn potential_gradient(&self, k: usize, x: &[f64]) -> Result<Vec<f64>, TrainError> {
        let params = &self.potentials[self.potential_index(k)];
        let spec = self.v_spec.clone();
        let params_t = params.as_tensor();
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::matrix(1, x.len(), x.to_vec()));
        let pv = tape.constant(params_t);
        let out = nets::forward_on(&mut tape, &spec, pv, xv);
        let s = tape.sum(out);
        let g = gradient(&tape, s, &[xv]).map_err(|source| TrainError::NonFinite {
            component: "potential gradient".into(),
            source,
        })?;
        Ok(g[0].data().to_vec())
    }
}

/// One step's mini-batches: a source draw from ρ_k and a target draw from
/// ρ_{k+1}.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub source: Tensor,
    pub target: Tensor,
}

/// Snapshot entropies used by a loss evaluation; `base[k]` is Ĥ(ρ_k).
#[derive(Debug, Clone)]
pub struct StepEntropies {
    pub base: Vec<f64>,
}

struct ModelVars {
    potentials: Vec<Var>,
    interaction: Option<Var>,
    theta3_raw: Option<Var>,
    maps: Vec<Var>,
}

fn stage_model(tape: &mut Tape, model: &EnergyModel, maps: &MapEnsemble) -> ModelVars {
    ModelVars {
        potentials: model.potentials.iter().map(|p| tape.input(p.as_tensor())).collect(),
        interaction: model.interaction.as_ref().map(|p| tape.input(p.as_tensor())),
        theta3_raw: model.theta3_raw.map(|raw| tape.input(Tensor::scalar(raw))),
        maps: maps.params.iter().map(|p| tape.input(p.as_tensor())).collect(),
    }
}

/// Record the loss for the given step batches. `with_data_term` includes
/// the `−Ĵ_θ(X_{k+1})` part (constant for the map player, so inner
/// iterations skip it).
fn build_loss(
    tape: &mut Tape,
    model: &EnergyModel,
    vars: &ModelVars,
    maps: &MapEnsemble,
    batches: &[StepBatch],
    entropies: Option<&StepEntropies>,
    tau: f64,
    with_data_term: bool,
) -> Result<Var, TrainError> {
    if model.mask.use_u && entropies.is_none() {
        return Err(TrainError::Config("internal energy needs an entropy cache".into()));
    }
    let mut total = tape.scalar(0.0);
    for (k, batch) in batches.iter().enumerate() {
        let x = tape.constant(batch.source.clone());
        let b = batch.source.rows();

        // Pushforward and, when the internal term is live, the mean
        // log|det ∇T| that corrects the cached source entropy.
        let (pred, pred_entropy) = if model.mask.use_u {
            let pvar = vars.maps[maps.param_index(k)];
            let (pred, mean_ld) =
                map_with_logdet_on(tape, &maps.spec, pvar, x, maps.time_input(k))?;
            let h_k = tape.scalar(entropies.unwrap().base[k]);
            let ent = tape.add(h_k, mean_ld);
            (pred, Some(ent))
        } else {
            (maps.apply_on(tape, &vars.maps, x, k)?, None)
        };

        let vslot = model.mask.use_v.then(|| {
            (&model.v_spec, vars.potentials[model.potential_index(k)])
        });
        let wslot = model.mask.use_w.then(|| (&model.w_spec, vars.interaction.unwrap()));
        let evars = EnergyVars {
            v: vslot.map(|(s, v)| (s as &MlpSpec, v)),
            w: wslot.map(|(s, v)| (s as &MlpSpec, v)),
            theta3_raw: vars.theta3_raw,
            symmetrize_w: model.symmetrize_w,
        };

        let j_pred = energy_on(tape, &evars, pred, pred_entropy);
        total = tape.add(total, j_pred);

        if with_data_term {
            let target = tape.constant(batch.target.clone());
            let data_entropy = model
                .mask
                .use_u
                .then(|| tape.scalar(entropies.unwrap().base[k + 1]));
            let j_data = energy_on(tape, &evars, target, data_entropy);
            total = tape.sub(total, j_data);
        }

        // (1/2τ)·mean over the batch of ‖x − T(x)‖².
        let diff = tape.sub(x, pred);
        let sq = tape.mul(diff, diff);
        let ssum = tape.sum(sq);
        let cost = tape.scale(ssum, 1.0 / (2.0 * tau * b as f64));
        total = tape.add(total, cost);
    }
    Ok(total)
}

/// Loss value and every gradient, from one recorded evaluation.
pub struct LossGrads {
    pub loss: f64,
    pub potentials: Vec<Tensor>,
    pub interaction: Option<Tensor>,
    pub theta3_raw: Option<f64>,
    pub maps: Vec<Tensor>,
}

/// Evaluate the empirical loss and differentiate it with respect to every
/// energy and map parameter, including through the log-det entropy term.
pub fn loss_gradients(
    model: &EnergyModel,
    maps: &MapEnsemble,
    batches: &[StepBatch],
    entropies: Option<&StepEntropies>,
    tau: f64,
) -> Result<LossGrads, TrainError> {
    let mut tape = Tape::new();
    let vars = stage_model(&mut tape, model, maps);
    let loss = build_loss(&mut tape, model, &vars, maps, batches, entropies, tau, true)?;
    let mut wrt = vars.potentials.clone();
    if let Some(w) = vars.interaction {
        wrt.push(w);
    }
    if let Some(t) = vars.theta3_raw {
        wrt.push(t);
    }
    wrt.extend_from_slice(&vars.maps);
    let grads = gradient(&tape, loss, &wrt).map_err(|source| TrainError::NonFinite {
        component: "loss".into(),
        source,
    })?;
    let mut it = grads.into_iter();
    let potentials: Vec<Tensor> = (0..vars.potentials.len()).map(|_| it.next().unwrap()).collect();
    let interaction = vars.interaction.map(|_| it.next().unwrap());
    let theta3_raw = vars.theta3_raw.map(|_| it.next().unwrap().item());
    let maps_g: Vec<Tensor> = it.collect();
    Ok(LossGrads {
        loss: tape.value(loss).item(),
        potentials,
        interaction,
        theta3_raw,
        maps: maps_g,
    })
}

/// The empirical loss
/// `Σ_k [Ĵ_θ(T^k(X_k)) − Ĵ_θ(X_{k+1}) + (1/2τ)·mean‖x − T^k(x)‖²]` over
/// per-step batches `X_0 … X_K` (step k pairs `X_k` with `X_{k+1}`).
pub fn empirical_loss(
    model: &EnergyModel,
    maps: &MapEnsemble,
    batches: &[Tensor],
    entropies: Option<&StepEntropies>,
    tau: f64,
) -> Result<f64, TrainError> {
    if batches.len() < 2 {
        return Err(TrainError::Config("need at least two snapshot batches".into()));
    }
    let pairs: Vec<StepBatch> = (0..batches.len() - 1)
        .map(|k| StepBatch { source: batches[k].clone(), target: batches[k + 1].clone() })
        .collect();
    let mut tape = Tape::new();
    let vars = stage_model(&mut tape, model, maps);
    let loss = build_loss(&mut tape, model, &vars, maps, &pairs, entropies, tau, true)?;
    Ok(tape.value(loss).item())
}

/// Optimizer state for the full model.
pub struct TrainState {
    pub potential_states: Vec<OptimizerState>,
    pub interaction_state: Option<OptimizerState>,
    pub theta3_state: Option<OptimizerState>,
    pub map_states: Vec<OptimizerState>,
}

impl TrainState {
    pub fn new(model: &EnergyModel, maps: &MapEnsemble) -> Self {
        TrainState {
            potential_states: model.potentials.iter().map(|p| OptimizerState::new(p.len())).collect(),
            interaction_state: model.interaction.as_ref().map(|p| OptimizerState::new(p.len())),
            theta3_state: model.theta3_raw.map(|_| OptimizerState::new(1)),
            map_states: maps.params.iter().map(|p| OptimizerState::new(p.len())).collect(),
        }
    }
}

/// One inner iteration: gradients of the map player's objective (data term
/// dropped — it is constant in φ) and one Adam update per map net, with
/// per-step gradients aggregated beforehand. Returns (objective, map grad
/// norm).
pub fn inner_map_iteration(
    model: &EnergyModel,
    maps: &mut MapEnsemble,
    state: &mut TrainState,
    batches: &[StepBatch],
    entropies: Option<&StepEntropies>,
    tau: f64,
    cfg: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    let mut tape = Tape::new();
    let vars = stage_model(&mut tape, model, maps);
    let objective = build_loss(&mut tape, model, &vars, maps, batches, entropies, tau, false)?;
    let grads = gradient(&tape, objective, &vars.maps).map_err(|source| TrainError::NonFinite {
        component: "transport maps".into(),
        source,
    })?;
    let mut norm_sq = 0.0;
    for g in &grads {
        norm_sq += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    for (i, g) in grads.iter().enumerate() {
        adam_update(&mut state.map_states[i], &mut maps.params[i].values, g.data(), &cfg.map_opt);
    }
    Ok((tape.value(objective).item(), norm_sq.sqrt()))
}

/// Per-component gradient norms recorded by the outer step.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnergyGradNorms {
    pub potential: f64,
    pub interaction: f64,
    pub theta3: f64,
}

/// One outer step: ascend the gap in θ (descend its negation), with the
/// energy player's gradient clipped to a global norm. Returns the loss
/// value on these batches and the pre-clip component norms.
pub fn outer_energy_step(
    model: &mut EnergyModel,
    maps: &MapEnsemble,
    state: &mut TrainState,
    batches: &[StepBatch],
    entropies: Option<&StepEntropies>,
    tau: f64,
    cfg: &TrainConfig,
) -> Result<(f64, EnergyGradNorms), TrainError> {
    let grads = loss_gradients(model, maps, batches, entropies, tau)?;

    // Energy player maximizes the gap: L_θ = −(loss without the φ-only
    // transport term)… the transport term is θ-free, so ∇θ L_θ = −∇θ loss.
    let mut pot_grads: Vec<Vec<f64>> =
        grads.potentials.iter().map(|g| g.data().iter().map(|v| -v).collect()).collect();
    let mut w_grad: Option<Vec<f64>> =
        grads.interaction.as_ref().map(|g| g.data().iter().map(|v| -v).collect());
    let mut t3_grad: Option<Vec<f64>> = grads.theta3_raw.map(|g| vec![-g]);

    let mut norms = EnergyGradNorms::default();
    norms.potential =
        pot_grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if let Some(g) = &w_grad {
        norms.interaction = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    if let Some(g) = &t3_grad {
        norms.theta3 = g[0].abs();
    }

    {
        let mut parts: Vec<&mut [f64]> = pot_grads.iter_mut().map(|g| g.as_mut_slice()).collect();
        if let Some(g) = w_grad.as_mut() {
            parts.push(g.as_mut_slice());
        }
        if let Some(g) = t3_grad.as_mut() {
            parts.push(g.as_mut_slice());
        }
        clip_global_norm(&mut parts, cfg.energy_clip_norm);
    }

    for (i, g) in pot_grads.iter().enumerate() {
        adam_update(
            &mut state.potential_states[i],
            &mut model.potentials[i].values,
            g,
            &cfg.energy_opt,
        );
    }
    if let (Some(g), Some(st), Some(p)) =
        (w_grad, state.interaction_state.as_mut(), model.interaction.as_mut())
    {
        adam_update(st, &mut p.values, &g, &cfg.energy_opt);
    }
    if let (Some(g), Some(st), Some(raw)) =
        (t3_grad, state.theta3_state.as_mut(), model.theta3_raw.as_mut())
    {
        let mut buf = [*raw];
        adam_update(st, &mut buf, &g, &cfg.energy_opt);
        *raw = buf[0];
    }
    Ok((grads.loss, norms))
}

/// Per-epoch log entry. Wall-clock lives on the log itself, not per row,
/// so serialized logs stay byte-identical across reruns.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub map_grad_norm: f64,
    pub potential_grad_norm: f64,
    pub interaction_grad_norm: f64,
    pub theta3_grad_norm: f64,
    pub theta3: f64,
}

/// Append-only training trace.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub wall_clock_seconds: f64,
}

impl TrainLog {
    /// CSV columns: epoch, loss, grad norms, theta3.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,loss,map_grad_norm,potential_grad_norm,interaction_grad_norm,theta3_grad_norm,theta3\n",
        );
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.epoch,
                e.loss,
                e.map_grad_norm,
                e.potential_grad_norm,
                e.interaction_grad_norm,
                e.theta3_grad_norm,
                e.theta3
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-step train/test split of a snapshot sequence.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
    pub tau: f64,
}

/// Shuffle each snapshot with the seeded stream and hold out
/// `round(fraction·B_k)` rows as the test split.
pub fn split_dataset(seq: &SnapshotSequence, fraction: f64, seed: u64) -> SplitData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x73706c6974);
    let mut train = Vec::with_capacity(seq.snapshots.len());
    let mut test = Vec::with_capacity(seq.snapshots.len());
    for snap in &seq.snapshots {
        let n = snap.rows();
        let d = snap.cols();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let n_test = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
        let n_train = n - n_test;
        let mut tr = Tensor::zeros(vec![n_train, d]);
        let mut te = Tensor::zeros(vec![n_test, d]);
        for (r, &src) in order[..n_train].iter().enumerate() {
            tr.data_mut()[r * d..(r + 1) * d].copy_from_slice(snap.row(src));
        }
        for (r, &src) in order[n_train..].iter().enumerate() {
            te.data_mut()[r * d..(r + 1) * d].copy_from_slice(snap.row(src));
        }
        train.push(tr);
        test.push(te);
    }
    SplitData { train, test, tau: seq.tau }
}

/// Mini-batch of rows without replacement (the whole set when `b ≥ n`).
fn sample_batch(rng: &mut ChaCha8Rng, data: &Tensor, b: usize) -> Tensor {
    let n = data.rows();
    let d = data.cols();
    if b >= n {
        return data.clone();
    }
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..b {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let mut out = Tensor::zeros(vec![b, d]);
    for (r, &src) in order[..b].iter().enumerate() {
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(data.row(src));
    }
    out
}

fn draw_step_batches(rng: &mut ChaCha8Rng, train: &[Tensor], b: usize) -> Vec<StepBatch> {
    (0..train.len() - 1)
        .map(|k| StepBatch {
            source: sample_batch(rng, &train[k], b),
            target: sample_batch(rng, &train[k + 1], b),
        })
        .collect()
}

/// Run `I_T` inner iterations with fresh batches per iteration.
pub fn inner_map_step(
    model: &EnergyModel,
    maps: &mut MapEnsemble,
    state: &mut TrainState,
    train: &[Tensor],
    entropies: Option<&StepEntropies>,
    tau: f64,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), TrainError> {
    let mut last = (0.0, 0.0);
    for _ in 0..cfg.inner_iters {
        let batches = draw_step_batches(rng, train, cfg.batch_size);
        last = inner_map_iteration(model, maps, state, &batches, entropies, tau, cfg)?;
    }
    Ok(last)
}

/// Everything `train` returns: the fitted energy, the transport maps, the
/// per-epoch log and the split used.
pub struct TrainOutcome {
    pub energy: EnergyModel,
    pub maps: MapEnsemble,
    pub log: TrainLog,
    pub split: SplitData,
    pub entropies: Option<EntropyCache>,
}

/// Alternate `I_T` inner map iterations with one outer energy step for the
/// configured number of epochs.
pub fn train(dataset: &SnapshotSequence, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let dim = dataset.dim();
    let k_steps = dataset.k_steps();
    if k_steps == 0 {
        return Err(TrainError::Config("need at least two snapshots".into()));
    }
    let split = split_dataset(dataset, cfg.test_fraction, cfg.seed);

    let entropy_cache = if cfg.mask.use_u {
        Some(EntropyCache::compute(&split.train, KL_NEIGHBORS)?)
    } else {
        None
    };
    let entropies = entropy_cache
        .as_ref()
        .map(|c| StepEntropies { base: c.values.clone() });

    let mut model = EnergyModel::init(dim, k_steps, cfg);
    let mut maps = match cfg.map_parametrization {
        MapParametrization::PerStep => {
            let spec = MlpSpec::new(dim, cfg.map_hidden.clone(), nets::Activation::Selu, dim);
            MapEnsemble {
                params: (0..k_steps)
                    .map(|k| nets::init_params(&spec, cfg.seed.wrapping_add(300 + k as u64)))
                    .collect(),
                spec,
                time_conditioned: false,
                normalize_time: false,
                n_steps: k_steps,
            }
        }
        MapParametrization::TimeConditioned => {
            let spec = MlpSpec::new(dim + 1, cfg.map_hidden.clone(), nets::Activation::Selu, dim);
            MapEnsemble {
                params: vec![nets::init_params(&spec, cfg.seed.wrapping_add(300))],
                spec,
                time_conditioned: true,
                normalize_time: cfg.normalize_time,
                n_steps: k_steps,
            }
        }
    };

    let mut state = TrainState::new(&model, &maps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xba7c4e5));
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let (_, map_norm) = inner_map_step(
            &model,
            &mut maps,
            &mut state,
            &split.train,
            entropies.as_ref(),
            split.tau,
            cfg,
            &mut rng,
        )?;
        let batches = draw_step_batches(&mut rng, &split.train, cfg.batch_size);
        let (loss, norms) = outer_energy_step(
            &mut model,
            &maps,
            &mut state,
            &batches,
            entropies.as_ref(),
            split.tau,
            cfg,
        )?;
        log.epochs.push(EpochStats {
            epoch,
            loss,
            map_grad_norm: map_norm,
            potential_grad_norm: norms.potential,
            interaction_grad_norm: norms.interaction,
            theta3_grad_norm: norms.theta3,
            theta3: model.theta3().unwrap_or(0.0),
        });
    }
    log.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { energy: model, maps, log, split, entropies: entropy_cache })
}

/// Row-wise application of the step-k transport map: `X̂_{k+1} = T^k(X_k)`.
pub fn predict_next(maps: &MapEnsemble, x_k: &Tensor, k: usize) -> Result<Tensor, TrainError> {
    Ok(maps.apply(x_k, k)?)
}
