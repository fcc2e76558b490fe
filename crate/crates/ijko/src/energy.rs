//! Sampled evaluation of the free energy
//! `J(ρ) = ∫V dρ + ∫∫W(x−y) dρ dρ − θ3·H(ρ)`.
//!
//! On a batch `X = {x_1 … x_B}` the estimator is
//! `(1/B) Σ_i [V(x_i) + (1/B) Σ_j W(x_i − x_j)] − θ3·Ĥ`, with masked-off
//! components contributing exactly zero. Entropies of the data snapshots are
//! precomputed once with the Kozachenko–Leonenko nearest-neighbor estimator;
//! the entropy of a pushforward `T♯ρ` is obtained from the change-of-variables
//! identity `H(T♯ρ) = H(ρ) + E_ρ log|det ∇T|`, which keeps every term
//! differentiable through the tape.
//!
//! The interaction double sum runs over all ordered pairs including `i = j`;
//! every kernel used here is finite at zero, and the learned kernel is
//! evaluated in symmetrized form `½(net(z) + net(−z))` by default so the
//! recovered interaction obeys the `W(z) = W(−z)` requirement of the
//! ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{
    self, jacobian_columns, DiffError, Tape, Tensor, Var,
};
use crate::nets::{self, MlpSpec, NetError, ParamVector};

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("interaction term needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("entropy estimator needs more than k={k} samples, got {n}")]
    TooFewSamples { n: usize, k: usize },
    #[error("zero nearest-neighbor distance after tie perturbation")]
    ZeroDistance,
    #[error("non-finite energy value")]
    NonFinite,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("entropy cache io: {0}")]
    Io(#[from] std::io::Error),
    #[error("entropy cache json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which free-energy components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMask {
    pub use_v: bool,
    pub use_w: bool,
    pub use_u: bool,
}

impl ComponentMask {
    pub fn potential_only() -> Self {
        ComponentMask { use_v: true, use_w: false, use_u: false }
    }

    pub fn full() -> Self {
        ComponentMask { use_v: true, use_w: true, use_u: true }
    }
}

/// Learnable energy: potential net θ1, interaction net θ2 and the raw
/// diffusion scalar θ3. The effective diffusion is `softplus(θ3_raw)`, which
/// keeps it nonnegative without constraining the optimizer.
#[derive(Debug, Clone)]
pub struct EnergyParams {
    pub theta1: ParamVector,
    pub theta2: ParamVector,
    pub theta3_raw: f64,
    pub mask: ComponentMask,
    pub v_spec: MlpSpec,
    pub w_spec: MlpSpec,
    /// Evaluate the learned kernel as `½(net(z) + net(−z))`.
    pub symmetrize_w: bool,
}

impl EnergyParams {
    pub fn new(dim: usize, mask: ComponentMask, seed: u64) -> Self {
        let v_spec = MlpSpec::energy_default(dim);
        let w_spec = MlpSpec::energy_default(dim);
        EnergyParams {
            theta1: nets::init_params(&v_spec, seed),
            theta2: nets::init_params(&w_spec, seed.wrapping_add(1)),
            theta3_raw: inverse_softplus(0.1),
            mask,
            v_spec,
            w_spec,
            symmetrize_w: true,
        }
    }

    /// Effective diffusion coefficient θ3 = softplus(θ3_raw).
    pub fn theta3(&self) -> f64 {
        softplus(self.theta3_raw)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Raw value whose softplus equals `y` (y > 0).
pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1), stable for small and large y.
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Tape handles for the energy terms; `None` entries are masked off.
pub struct EnergyVars<'a> {
    pub v: Option<(&'a MlpSpec, Var)>,
    pub w: Option<(&'a MlpSpec, Var)>,
    pub theta3_raw: Option<Var>,
    pub symmetrize_w: bool,
}

/// Record the batch energy estimate on a tape. `entropy` must be supplied
/// when the internal term is active; it is the (differentiable) entropy
/// estimate of the batch's distribution.
pub fn energy_on(tape: &mut Tape, vars: &EnergyVars, batch: Var, entropy: Option<Var>) -> Var {
    let b = tape.value(batch).rows();
    let mut total = tape.scalar(0.0);
    if let Some((spec, theta1)) = vars.v {
        let vals = nets::forward_on(tape, spec, theta1, batch);
        let mean = tape.mean(vals);
        total = tape.add(total, mean);
    }
    if let Some((spec, theta2)) = vars.w {
        let xi = tape.repeat_rows(batch, b);
        let xj = tape.tile_rows(batch, b);
        let diffs = tape.sub(xi, xj);
        let w_vals = if vars.symmetrize_w {
            let pos = nets::forward_on(tape, spec, theta2, diffs);
            let neg_diffs = tape.neg(diffs);
            let neg = nets::forward_on(tape, spec, theta2, neg_diffs);
            let sum = tape.add(pos, neg);
            tape.scale(sum, 0.5)
        } else {
            nets::forward_on(tape, spec, theta2, diffs)
        };
        let mean = tape.mean(w_vals);
        total = tape.add(total, mean);
    }
    if let Some(raw) = vars.theta3_raw {
        let entropy = entropy.expect("internal energy needs an entropy value");
        let theta3 = tape.act(raw, diffcore::Activation::Softplus);
        let u = tape.mul(theta3, entropy);
        total = tape.sub(total, u);
    }
    total
}

/// Batch estimate of the free energy at `params`, using a precomputed
/// entropy value for the internal term.
pub fn estimate_energy(
    params: &EnergyParams,
    batch: &Tensor,
    entropy_value: f64,
) -> Result<f64, EnergyError> {
    if params.mask.use_w && batch.rows() < 2 {
        return Err(EnergyError::BatchTooSmall(batch.rows()));
    }
    let mut tape = Tape::new();
    let theta1 = tape.constant(params.theta1.as_tensor());
    let theta2 = tape.constant(params.theta2.as_tensor());
    let raw = tape.constant(Tensor::scalar(params.theta3_raw));
    let vars = EnergyVars {
        v: params.mask.use_v.then_some((&params.v_spec, theta1)),
        w: params.mask.use_w.then_some((&params.w_spec, theta2)),
        theta3_raw: params.mask.use_u.then_some(raw),
        symmetrize_w: params.symmetrize_w,
    };
    let batch_var = tape.constant(batch.clone());
    let entropy = tape.constant(Tensor::scalar(entropy_value));
    let out = energy_on(&mut tape, &vars, batch_var, Some(entropy));
    let v = tape.value(out).item();
    if !v.is_finite() {
        return Err(EnergyError::NonFinite);
    }
    Ok(v)
}

/// Digamma ψ(x) for x > 0: recurrence up past 10, then the asymptotic
/// Bernoulli series through x⁻⁸ (absolute error below 1e-12 there).
pub fn digamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln()
        - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)))
}

/// ln Γ(d/2 + 1) for integer dimension d ≥ 1, split by parity.
fn ln_gamma_half_plus_one(d: usize) -> f64 {
    if d % 2 == 0 {
        // Γ(m + 1) = m!
        let m = d / 2;
        (2..=m).map(|i| (i as f64).ln()).sum()
    } else {
        // Γ(m + 1/2) with m = (d + 1) / 2.
        let m = (d + 1) / 2;
        let mut acc = 0.5 * std::f64::consts::PI.ln();
        for i in 1..=m {
            acc += ((2 * i - 1) as f64 / 2.0).ln();
        }
        acc
    }
}

/// Log volume of the unit ball in D dimensions.
pub fn ln_unit_ball_volume(d: usize) -> f64 {
    (d as f64 / 2.0) * std::f64::consts::PI.ln() - ln_gamma_half_plus_one(d)
}

/// Kozachenko–Leonenko differential entropy (nats) from the k-th
/// nearest-neighbor distances:
/// `Ĥ = ψ(N) − ψ(k) + log V_D + (D/N) Σ_i log r_{i,k}`.
///
/// Exact duplicates are nudged by uniform noise of magnitude 1e-12 before
/// the O(N²) distance scan; the estimator is undefined at zero distances.
pub fn kl_entropy(samples: &Tensor, k: usize) -> Result<f64, EnergyError> {
    let n = samples.rows();
    let d = samples.cols();
    if n <= k {
        return Err(EnergyError::TooFewSamples { n, k });
    }
    let mut data = samples.data().to_vec();

    // Perturb exact duplicates only; sort row indices to find them.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        data[a * d..(a + 1) * d]
            .partial_cmp(&data[b * d..(b + 1) * d])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b6c5f656e74);
    for w in 0..n - 1 {
        let (a, b) = (order[w], order[w + 1]);
        if data[a * d..(a + 1) * d] == data[b * d..(b + 1) * d] {
            for c in 0..d {
                data[b * d + c] += rng.gen_range(-1e-12..1e-12);
            }
        }
    }

    let mut sum_log_r = 0.0;
    let mut dist2 = vec![0.0f64; n];
    for i in 0..n {
        for (j, slot) in dist2.iter_mut().enumerate() {
            let mut s = 0.0;
            for c in 0..d {
                let diff = data[i * d + c] - data[j * d + c];
                s += diff * diff;
            }
            *slot = s;
        }
        dist2[i] = f64::INFINITY; // exclude the point itself
        let mut work = dist2.clone();
        let (_, kth, _) = work.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
        let r2 = *kth;
        if r2 <= 0.0 {
            return Err(EnergyError::ZeroDistance);
        }
        sum_log_r += 0.5 * r2.ln();
    }

    Ok(digamma(n as f64) - digamma(k as f64)
        + ln_unit_ball_volume(d)
        + (d as f64 / n as f64) * sum_log_r)
}

/// Default neighbor count for snapshot entropies.
pub const KL_NEIGHBORS: usize = 5;

/// Precomputed snapshot entropies `Ĥ(ρ_k)`, k = 0 … K.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyCache {
    pub values: Vec<f64>,
    pub neighbor_count: usize,
    pub sample_counts: Vec<usize>,
}

impl EntropyCache {
    /// Estimate every snapshot's entropy once, before training.
    pub fn compute(snapshots: &[Tensor], k: usize) -> Result<Self, EnergyError> {
        let mut values = Vec::with_capacity(snapshots.len());
        let mut sample_counts = Vec::with_capacity(snapshots.len());
        for s in snapshots {
            values.push(kl_entropy(s, k)?);
            sample_counts.push(s.rows());
        }
        Ok(EntropyCache { values, neighbor_count: k, sample_counts })
    }

    pub fn save(&self, path: &Path) -> Result<(), EnergyError> {
        #[derive(Serialize)]
        struct OnDisk<'a> {
            estimates: BTreeMap<String, f64>,
            neighbor_count: usize,
            sample_counts: &'a [usize],
        }
        let estimates =
            self.values.iter().enumerate().map(|(k, &v)| (k.to_string(), v)).collect();
        let doc = OnDisk {
            estimates,
            neighbor_count: self.neighbor_count,
            sample_counts: &self.sample_counts,
        };
        fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnergyError> {
        #[derive(Deserialize)]
        struct OnDisk {
            estimates: BTreeMap<String, f64>,
            neighbor_count: usize,
            sample_counts: Vec<usize>,
        }
        let doc: OnDisk = serde_json::from_str(&fs::read_to_string(path)?)?;
        let mut values = vec![0.0; doc.estimates.len()];
        for (k, v) in doc.estimates {
            let idx: usize = k.parse().map_err(|_| {
                EnergyError::Json(serde::de::Error::custom(format!("bad entropy key {k}")))
            })?;
            values[idx] = v;
        }
        Ok(EntropyCache {
            values,
            neighbor_count: doc.neighbor_count,
            sample_counts: doc.sample_counts,
        })
    }
}

/// Record `T(batch)` together with the mean log-det of its Jacobians.
///
/// Returns `(pred, mean_i log|det ∇T(x_i)|)`; both are differentiable tape
/// nodes. Degenerate Jacobians are absorbed by the determinant clamp.
pub fn map_with_logdet_on(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: Var,
    x: Var,
    time: Option<f64>,
) -> Result<(Var, Var), EnergyError> {
    let start = tape.len();
    let pred = nets::map_forward_on(tape, spec, params, x, time);
    let cols = jacobian_columns(tape, start, pred, x)?;
    let lds = tape.batched_logabsdet(&cols);
    let mean = tape.mean(lds);
    Ok((pred, mean))
}

/// Differential entropy of the pushforward `T♯ρ` from the base entropy of ρ
/// and a batch of ρ-samples:
/// `H(T♯ρ) = H(ρ) + (1/B) Σ_i log|det ∇T(x_i)|`.
pub fn pushforward_entropy(
    base_entropy: f64,
    maps: &crate::nets::MapEnsemble,
    k: usize,
    batch: &Tensor,
) -> Result<f64, EnergyError> {
    let mut tape = Tape::new();
    let pvar = tape.constant(maps.params[maps.param_index(k)].as_tensor());
    let x = tape.input(batch.clone());
    let (_, mean_ld) = map_with_logdet_on(&mut tape, &maps.spec, pvar, x, maps.time_input(k))?;
    Ok(base_entropy + tape.value(mean_ld).item())
}

/// Even part of a base kernel: `W(z) = ½(W_b(z) + W_b(−z))`, which satisfies
/// `W(z) = W(−z)` exactly.
pub fn symmetrize_kernel<F>(w_b: F) -> impl Fn(&[f64]) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    move |z: &[f64]| {
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        0.5 * (w_b(z) + w_b(&neg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Activation, MapEnsemble};
    use rand::Rng;
    use rand_distr::StandardNormal;

    const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

    fn gaussian_batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect())
    }

    /// Affine "net" y = x·M + b as a hidden-less MLP.
    fn linear_map_ensemble(m: &[f64], d: usize) -> MapEnsemble {
        let spec = MlpSpec::new(d, vec![], Activation::Selu, d);
        let mut p = ParamVector::zeros(&spec);
        p.values[..d * d].copy_from_slice(m);
        MapEnsemble {
            spec,
            params: vec![p],
            time_conditioned: false,
            normalize_time: false,
            n_steps: 1,
        }
    }

    #[test]
    fn masked_components_contribute_nothing() {
        let mut params = EnergyParams::new(2, ComponentMask::potential_only(), 3);
        // V ≡ c via zero weights and output bias.
        params.theta1 = ParamVector::zeros(&params.v_spec);
        let out = params.theta1.layout.last().unwrap().clone();
        params.theta1.values[out.b_offset] = 1.25;
        let batch = gaussian_batch(16, 2, 0);
        let e = estimate_energy(&params, &batch, 123.0).unwrap();
        assert!((e - 1.25).abs() < 1e-12);
    }

    #[test]
    fn symmetrized_odd_kernel_cancels() {
        // A linear "net" W_b(z) = w·z is odd, so its even part vanishes and
        // the interaction term is exactly zero.
        let mut params = EnergyParams::new(1, ComponentMask { use_v: false, use_w: true, use_u: false }, 3);
        let w_spec = MlpSpec::new(1, vec![], Activation::Softplus, 1);
        let mut w = ParamVector::zeros(&w_spec);
        w.values[0] = 0.7;
        params.w_spec = w_spec;
        params.theta2 = w;
        let batch = gaussian_batch(8, 1, 1);
        let e = estimate_energy(&params, &batch, 0.0).unwrap();
        assert!(e.abs() < 1e-12, "{e}");
    }

    #[test]
    fn internal_term_is_minus_theta3_times_entropy() {
        let mut params = EnergyParams::new(2, ComponentMask { use_v: false, use_w: false, use_u: true }, 3);
        params.theta3_raw = inverse_softplus(2.0);
        let e = estimate_energy(&params, &gaussian_batch(4, 2, 2), 1.5).unwrap();
        assert!((e - (-3.0)).abs() < 1e-12, "{e}");
    }

    #[test]
    fn interaction_needs_pairs() {
        let params = EnergyParams::new(2, ComponentMask::full(), 3);
        let one = gaussian_batch(1, 2, 0);
        assert!(matches!(
            estimate_energy(&params, &one, 0.0),
            Err(EnergyError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn energy_is_permutation_invariant() {
        let params = EnergyParams::new(2, ComponentMask::full(), 11);
        let batch = gaussian_batch(10, 2, 5);
        let mut rows: Vec<Vec<f64>> = (0..10).map(|i| batch.row(i).to_vec()).collect();
        rows.reverse();
        rows.swap(2, 7);
        let permuted = Tensor::matrix(10, 2, rows.concat());
        let a = estimate_energy(&params, &batch, 0.4).unwrap();
        let b = estimate_energy(&params, &permuted, 0.4).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn digamma_known_values() {
        assert!((digamma(1.0) + EULER_MASCHERONI).abs() < 1e-12);
        let psi5 = -EULER_MASCHERONI + 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        assert!((digamma(5.0) - psi5).abs() < 1e-12);
        let psi_half = -EULER_MASCHERONI - 2.0 * 2.0f64.ln();
        assert!((digamma(0.5) - psi_half).abs() < 1e-12);
    }

    #[test]
    fn unit_ball_volumes() {
        // V_1 = 2, V_2 = π, V_3 = 4π/3.
        assert!((ln_unit_ball_volume(1) - 2.0f64.ln()).abs() < 1e-12);
        assert!((ln_unit_ball_volume(2) - std::f64::consts::PI.ln()).abs() < 1e-12);
        assert!(
            (ln_unit_ball_volume(3) - (4.0 * std::f64::consts::PI / 3.0).ln()).abs() < 1e-12
        );
    }

    #[test]
    fn entropy_of_standard_gaussian() {
        let samples = gaussian_batch(10_000, 2, 42);
        let h = kl_entropy(&samples, KL_NEIGHBORS).unwrap();
        let truth = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((h - truth).abs() < 0.05, "estimate {h}, analytic {truth}");
    }

    #[test]
    fn entropy_of_unit_square_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples =
            Tensor::matrix(10_000, 2, (0..20_000).map(|_| rng.gen_range(0.0..1.0)).collect());
        let h = kl_entropy(&samples, KL_NEIGHBORS).unwrap();
        assert!(h.abs() < 0.05, "estimate {h}, analytic 0");
    }

    #[test]
    fn entropy_scaling_law() {
        let samples = gaussian_batch(10_000, 2, 9);
        let scaled = samples.map(|v| 2.0 * v);
        let h = kl_entropy(&samples, KL_NEIGHBORS).unwrap();
        let h2 = kl_entropy(&scaled, KL_NEIGHBORS).unwrap();
        // H(aX) = H(X) + D ln a in 2D with a = 2.
        assert!((h2 - h - 2.0 * 2.0f64.ln()).abs() < 0.02, "{h2} vs {h}");
    }

    #[test]
    fn entropy_is_translation_invariant_exactly() {
        let samples = gaussian_batch(500, 2, 21);
        let shifted = Tensor::matrix(
            500,
            2,
            samples
                .data()
                .chunks(2)
                .flat_map(|r| [r[0] + 17.0, r[1] - 4.0])
                .collect(),
        );
        let a = kl_entropy(&samples, KL_NEIGHBORS).unwrap();
        let b = kl_entropy(&shifted, KL_NEIGHBORS).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn entropy_rejects_tiny_samples() {
        let t = gaussian_batch(4, 2, 0);
        assert!(matches!(
            kl_entropy(&t, 5),
            Err(EnergyError::TooFewSamples { n: 4, k: 5 })
        ));
    }

    #[test]
    fn duplicate_samples_are_perturbed_not_fatal() {
        let mut rows = gaussian_batch(50, 2, 3).data().to_vec();
        // Duplicate a few rows exactly.
        for i in 0..6 {
            let (a, b) = (i * 2, (i + 20) * 2);
            let (x, y) = (rows[a], rows[a + 1]);
            rows[b] = x;
            rows[b + 1] = y;
        }
        let t = Tensor::matrix(50, 2, rows);
        assert!(kl_entropy(&t, 5).is_ok());
    }

    #[test]
    fn pushforward_identity_keeps_entropy() {
        let maps = linear_map_ensemble(&[1.0, 0.0, 0.0, 1.0], 2);
        let batch = gaussian_batch(64, 2, 4);
        let h = pushforward_entropy(1.37, &maps, 0, &batch).unwrap();
        assert!((h - 1.37).abs() < 1e-12);
    }

    #[test]
    fn pushforward_doubling_adds_two_log_two() {
        let maps = linear_map_ensemble(&[2.0, 0.0, 0.0, 2.0], 2);
        let batch = gaussian_batch(64, 2, 4);
        let h = pushforward_entropy(0.0, &maps, 0, &batch).unwrap();
        assert!((h - 2.0 * 2.0f64.ln()).abs() < 1e-12, "{h}");
    }

    #[test]
    fn pushforward_linear_shift_is_logabsdet_for_any_batch() {
        let m = [1.3, -0.4, 0.2, 0.9];
        let maps = linear_map_ensemble(&m, 2);
        let (ld, _) = diffcore::logabsdet(&Tensor::matrix(2, 2, m.to_vec())).unwrap();
        for seed in 0..5 {
            let batch = gaussian_batch(32, 2, 100 + seed);
            let h = pushforward_entropy(0.0, &maps, 0, &batch).unwrap();
            assert!((h - ld).abs() < 1e-12);
        }
    }

    #[test]
    fn pushforward_composition_matches_product_map() {
        let m1 = [1.5, 0.3, -0.2, 0.8];
        let m2 = [0.9, -0.5, 0.4, 1.2];
        let batch = gaussian_batch(40, 2, 8);
        let maps1 = linear_map_ensemble(&m1, 2);
        let h1 = pushforward_entropy(0.25, &maps1, 0, &batch).unwrap();
        let pushed = maps1.apply(&batch, 0).unwrap();
        let maps2 = linear_map_ensemble(&m2, 2);
        let h12 = pushforward_entropy(h1, &maps2, 0, &pushed).unwrap();

        // Single application of M2·M1 (inputs multiply on the right).
        let t1 = Tensor::matrix(2, 2, m1.to_vec());
        let t2 = Tensor::matrix(2, 2, m2.to_vec());
        let prod = t1.matmul(&t2);
        let maps_prod = linear_map_ensemble(prod.data(), 2);
        let h_direct = pushforward_entropy(0.25, &maps_prod, 0, &batch).unwrap();
        assert!((h12 - h_direct).abs() < 1e-9, "{h12} vs {h_direct}");
    }

    #[test]
    fn symmetrize_cancels_odd_and_keeps_even() {
        let lin = symmetrize_kernel(|z: &[f64]| z[0]);
        assert_eq!(lin(&[0.7]), 0.0);
        let quad = symmetrize_kernel(|z: &[f64]| z.iter().map(|v| v * v).sum());
        assert_eq!(quad(&[0.3, -0.4]), 0.25);
    }

    #[test]
    fn symmetrized_styblinski_tang_is_even() {
        let st = |z: &[f64]| 0.5 * z.iter().map(|v| v.powi(4) - 16.0 * v * v + 5.0 * v).sum::<f64>();
        let sym = symmetrize_kernel(st);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let z = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let neg = [-z[0], -z[1]];
            assert!((sym(&z) - sym(&neg)).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetrized_learned_kernel_is_even_on_tape() {
        let params = EnergyParams::new(2, ComponentMask::full(), 5);
        let eval = |z: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let theta2 = tape.constant(params.theta2.as_tensor());
            let zv = tape.constant(z.clone());
            let pos = nets::forward_on(&mut tape, &params.w_spec, theta2, zv);
            let nz = tape.neg(zv);
            let neg = nets::forward_on(&mut tape, &params.w_spec, theta2, nz);
            let s = tape.add(pos, neg);
            let half = tape.scale(s, 0.5);
            tape.value(half).item()
        };
        let z = Tensor::matrix(1, 2, vec![0.8, -0.3]);
        let zneg = z.map(|v| -v);
        assert_eq!(eval(&z), eval(&zneg));
    }

    #[test]
    fn entropy_cache_roundtrip() {
        let snaps = vec![gaussian_batch(200, 2, 0), gaussian_batch(200, 2, 1)];
        let cache = EntropyCache::compute(&snaps, KL_NEIGHBORS).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("entropy.json");
        cache.save(&path).unwrap();
        let back = EntropyCache::load(&path).unwrap();
        assert_eq!(cache.values, back.values);
        assert_eq!(back.neighbor_count, KL_NEIGHBORS);
        assert_eq!(back.sample_counts, vec![200, 200]);
    }
}
