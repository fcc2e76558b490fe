//! Multilayer perceptrons for the potential `V`, the interaction kernel `W`
//! and the transport maps `T^k`.
//!
//! Scalar energy nets default to two hidden layers of 64 softplus units;
//! map nets use selu and emit a point in the state space. Transport maps
//! come in two parametrizations with one call signature: a separate network
//! per time step, or a single network that takes the step index as an extra
//! input coordinate. Maps are deliberately unconstrained — no convexity is
//! imposed on any architecture here.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Activation as ActKind, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input has {got} coordinates, spec expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{0}")]
    Time(String),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("step index {k} out of range for {steps} transport steps")]
    Step { k: usize, steps: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Smooth activations available to the energy and map networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Selu,
    Celu,
}

impl Activation {
    fn kind(self) -> ActKind {
        match self {
            Activation::Softplus => ActKind::Softplus,
            Activation::Selu => ActKind::Selu,
            Activation::Celu => ActKind::Celu,
        }
    }
}

/// Architecture of one MLP: affine layers with a fixed activation between
/// them and an affine output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, activation: Activation, output_dim: usize) -> Self {
        MlpSpec { input_dim, hidden, activation, output_dim }
    }

    /// Default energy net: 2×64 softplus with a scalar output.
    pub fn energy_default(dim: usize) -> Self {
        MlpSpec::new(dim, vec![64, 64], Activation::Softplus, 1)
    }

    /// Default map net: 2×64 selu emitting a point in ℝ^D. With
    /// `time_conditioned` the step index is one extra input coordinate.
    pub fn map_default(dim: usize, time_conditioned: bool) -> Self {
        let input = if time_conditioned { dim + 1 } else { dim };
        MlpSpec::new(input, vec![64, 64], Activation::Selu, dim)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NetError::Spec("input and output dims must be ≥ 1".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(NetError::Spec("hidden widths must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Layer dims as (fan_in, fan_out) pairs, output layer included.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Where one layer's weight matrix and bias live inside the flat vector.
/// Weights are row-major `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub w_offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub b_offset: usize,
}

/// Flat parameter storage plus the slice layout describing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayerLayout>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        ParamVector { values: vec![0.0; spec.param_count()], layout: layout_for(spec) }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::vector(self.values.clone())
    }
}

pub fn layout_for(spec: &MlpSpec) -> Vec<LayerLayout> {
    let mut layout = Vec::new();
    let mut offset = 0;
    for (fan_in, fan_out) in spec.layer_dims() {
        let w_offset = offset;
        offset += fan_in * fan_out;
        let b_offset = offset;
        offset += fan_out;
        layout.push(LayerLayout { w_offset, fan_in, fan_out, b_offset });
    }
    layout
}

/// Draw weights i.i.d. from `N(0, 1/fan_in)`, biases zero. Deterministic in
/// the seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let layout = layout_for(spec);
    let mut values = vec![0.0; spec.param_count()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &layout {
        let std = (1.0 / l.fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        for w in &mut values[l.w_offset..l.w_offset + l.fan_in * l.fan_out] {
            *w = dist.sample(&mut rng);
        }
    }
    ParamVector { values, layout }
}

/// Record the MLP forward pass on a tape. `x` is a `B × input_dim` batch
/// (a vector counts as one row); the result is `B × output_dim`.
pub fn forward_on(tape: &mut Tape, spec: &MlpSpec, params: Var, x: Var) -> Var {
    let layout = layout_for(spec);
    let last = layout.len() - 1;
    let mut a = x;
    for (li, l) in layout.iter().enumerate() {
        let w = tape.slice(params, l.w_offset, vec![l.fan_in, l.fan_out]);
        let b = tape.slice(params, l.b_offset, vec![l.fan_out]);
        let z = tape.matmul(a, w);
        let z = tape.add_row_broadcast(z, b);
        a = if li == last { z } else { tape.act(z, spec.activation.kind()) };
    }
    a
}

fn check_input(spec: &MlpSpec, cols: usize) -> Result<(), NetError> {
    if cols != spec.input_dim {
        return Err(NetError::Dimension { expected: spec.input_dim, got: cols });
    }
    Ok(())
}

/// Evaluate a scalar-output net at a single point.
pub fn forward_scalar(params: &ParamVector, spec: &MlpSpec, x: &Tensor) -> Result<f64, NetError> {
    check_input(spec, x.cols())?;
    if spec.output_dim != 1 {
        return Err(NetError::Spec("forward_scalar needs output_dim 1".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(params.as_tensor());
    let xv = tape.constant(Tensor::matrix(1, x.cols(), x.data().to_vec()));
    let y = forward_on(&mut tape, spec, p, xv);
    Ok(tape.value(y).item())
}

/// Evaluate a scalar-output net over a batch of rows.
pub fn forward_scalar_batch(
    params: &ParamVector,
    spec: &MlpSpec,
    x: &Tensor,
) -> Result<Vec<f64>, NetError> {
    check_input(spec, x.cols())?;
    let mut tape = Tape::new();
    let p = tape.constant(params.as_tensor());
    let xv = tape.constant(x.clone());
    let y = forward_on(&mut tape, spec, p, xv);
    Ok(tape.value(y).data().to_vec())
}

/// Evaluate a map net at a batch of points, with the raw time coordinate
/// appended when the spec is time-conditioned (`input_dim == D + 1`).
pub fn forward_map(
    params: &ParamVector,
    spec: &MlpSpec,
    x: &Tensor,
    time: Option<f64>,
) -> Result<Tensor, NetError> {
    let d = x.cols();
    match (spec.input_dim == d + 1, time) {
        (true, None) => {
            return Err(NetError::Time("time-conditioned map needs a time index".into()))
        }
        (false, Some(_)) if spec.input_dim == d => {
            return Err(NetError::Time("per-step map takes no time input".into()))
        }
        (false, _) => check_input(spec, d)?,
        (true, Some(_)) => {}
    }
    let mut tape = Tape::new();
    let p = tape.constant(params.as_tensor());
    let xv = tape.constant(Tensor::matrix(x.rows(), d, x.data().to_vec()));
    let y = map_forward_on(&mut tape, spec, p, xv, time);
    Ok(tape.value(y).clone())
}

/// Tape-level map forward: appends the time column when given.
pub fn map_forward_on(tape: &mut Tape, spec: &MlpSpec, params: Var, x: Var, time: Option<f64>) -> Var {
    let input = match time {
        Some(t) => {
            let rows = tape.value(x).rows();
            let col = tape.constant(Tensor::matrix(rows, 1, vec![t; rows]));
            tape.concat_cols(x, col)
        }
        None => x,
    };
    forward_on(tape, spec, params, input)
}

/// The transport maps `T^k`, either one net per step or a single
/// time-conditioned net. Both variants answer the same k-indexed calls, so
/// training code never branches on the parametrization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapEnsemble {
    pub spec: MlpSpec,
    /// One entry per step, or a single entry when time-conditioned.
    pub params: Vec<ParamVector>,
    pub time_conditioned: bool,
    /// Feed `k / K` instead of raw `k` as the time coordinate.
    pub normalize_time: bool,
    /// Number of transport steps K (maps run k = 0 … K−1).
    pub n_steps: usize,
}

impl MapEnsemble {
    /// Per-step ensemble: K independent nets.
    pub fn per_step(dim: usize, n_steps: usize, seed: u64) -> Self {
        let spec = MlpSpec::map_default(dim, false);
        let params = (0..n_steps).map(|k| init_params(&spec, seed.wrapping_add(k as u64))).collect();
        MapEnsemble { spec, params, time_conditioned: false, normalize_time: false, n_steps }
    }

    /// Single net with the step index concatenated to the input.
    pub fn time_conditioned(dim: usize, n_steps: usize, seed: u64, normalize_time: bool) -> Self {
        let spec = MlpSpec::map_default(dim, true);
        let params = vec![init_params(&spec, seed)];
        MapEnsemble { spec, params, time_conditioned: true, normalize_time, n_steps }
    }

    /// Index into `params` used by step `k`.
    pub fn param_index(&self, k: usize) -> usize {
        if self.time_conditioned {
            0
        } else {
            k
        }
    }

    pub fn time_input(&self, k: usize) -> Option<f64> {
        if self.time_conditioned {
            let raw = k as f64;
            Some(if self.normalize_time { raw / self.n_steps as f64 } else { raw })
        } else {
            None
        }
    }

    fn check_step(&self, k: usize) -> Result<(), NetError> {
        if k >= self.n_steps {
            return Err(NetError::Step { k, steps: self.n_steps });
        }
        Ok(())
    }

    /// Apply `T^k` row-wise to a batch.
    pub fn apply(&self, x: &Tensor, k: usize) -> Result<Tensor, NetError> {
        self.check_step(k)?;
        forward_map(&self.params[self.param_index(k)], &self.spec, x, self.time_input(k))
    }

    /// Tape-level application; `param_vars` must hold one Var per entry of
    /// `self.params`, in order.
    pub fn apply_on(&self, tape: &mut Tape, param_vars: &[Var], x: Var, k: usize) -> Result<Var, NetError> {
        self.check_step(k)?;
        Ok(map_forward_on(tape, &self.spec, param_vars[self.param_index(k)], x, self.time_input(k)))
    }
}

/// One serialized model: architecture, slice layout and flat values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub layout: Vec<LayerLayout>,
    pub values: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, spec: &MlpSpec, params: &ParamVector) -> Result<(), NetError> {
    let ckpt = Checkpoint {
        spec: spec.clone(),
        layout: params.layout.clone(),
        values: params.values.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpSpec, ParamVector), NetError> {
    let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ckpt.values.len() != ckpt.spec.param_count() {
        return Err(NetError::Spec(format!(
            "checkpoint has {} values, spec wants {}",
            ckpt.values.len(),
            ckpt.spec.param_count()
        )));
    }
    Ok((ckpt.spec.clone(), ParamVector { values: ckpt.values, layout: ckpt.layout }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_counts_params() {
        let spec = MlpSpec::new(2, vec![64, 64], Activation::Softplus, 1);
        assert_eq!(spec.param_count(), 4417);
        let a = init_params(&spec, 5);
        let b = init_params(&spec, 5);
        assert_eq!(a, b);
        let c = init_params(&spec, 6);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn init_variance_tracks_fan_in() {
        // 1e5 first-layer weights: fan_in 100 into 1000 units.
        let spec = MlpSpec::new(100, vec![1000], Activation::Softplus, 1);
        let p = init_params(&spec, 0);
        let l = &p.layout[0];
        let ws = &p.values[l.w_offset..l.w_offset + l.fan_in * l.fan_out];
        let mean: f64 = ws.iter().sum::<f64>() / ws.len() as f64;
        let var: f64 = ws.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / ws.len() as f64;
        let expected = 1.0 / 100.0;
        assert!((var - expected).abs() / expected < 0.10, "sample var {var}");
    }

    #[test]
    fn zero_weights_emit_output_bias() {
        let spec = MlpSpec::new(3, vec![8], Activation::Softplus, 1);
        let mut p = ParamVector::zeros(&spec);
        let out_layer = p.layout.last().unwrap().clone();
        p.values[out_layer.b_offset] = 2.5;
        for x in [vec![0.0, 0.0, 0.0], vec![1.0, -2.0, 0.4]] {
            let y = forward_scalar(&p, &spec, &Tensor::vector(x)).unwrap();
            // Hidden softplus(0) = ln 2 feeds zero output weights.
            assert!((y - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_at_zero_propagates_log_two() {
        // Single hidden unit, zero first layer, unit output weight: the
        // hidden activation softplus(0) = ln 2 is passed straight through.
        let spec = MlpSpec::new(1, vec![1], Activation::Softplus, 1);
        let mut p = ParamVector::zeros(&spec);
        let out_layer = p.layout.last().unwrap().clone();
        p.values[out_layer.w_offset] = 1.0;
        let y = forward_scalar(&p, &spec, &Tensor::vector(vec![0.0])).unwrap();
        assert!((y - 2.0f64.ln()).abs() < 1e-15, "{y}");
    }

    #[test]
    fn forward_scalar_matches_naive_evaluation() {
        let spec = MlpSpec::new(2, vec![16], Activation::Softplus, 1);
        let p = init_params(&spec, 9);
        let x = [0.35, -1.2];

        // Hand-rolled evaluation with explicit loops.
        let l0 = &p.layout[0];
        let mut hidden = vec![0.0; 16];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut z = p.values[l0.b_offset + j];
            for (i, &xi) in x.iter().enumerate() {
                z += xi * p.values[l0.w_offset + i * 16 + j];
            }
            *h = z.max(0.0) + (-z.abs()).exp().ln_1p();
        }
        let l1 = &p.layout[1];
        let mut out = p.values[l1.b_offset];
        for (j, h) in hidden.iter().enumerate() {
            out += h * p.values[l1.w_offset + j];
        }

        let y = forward_scalar(&p, &spec, &Tensor::vector(x.to_vec())).unwrap();
        assert!((y - out).abs() < 1e-12, "{y} vs {out}");
    }

    #[test]
    fn zero_map_sends_everything_to_zero() {
        let spec = MlpSpec::map_default(2, false);
        let p = ParamVector::zeros(&spec);
        let y = forward_map(&p, &spec, &Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]), None).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn time_coordinate_shifts_output_when_weighted() {
        let spec = MlpSpec::new(3, vec![4], Activation::Selu, 2);
        let mut p = ParamVector::zeros(&spec);
        // Weight on the time coordinate (input index 2) into hidden unit 0,
        // and pass that unit to output 0.
        let l0 = p.layout[0].clone();
        let l1 = p.layout[1].clone();
        p.values[l0.w_offset + 2 * 4] = 1.0;
        p.values[l1.w_offset] = 1.0;
        let x = Tensor::matrix(1, 2, vec![0.4, -0.7]);
        let y0 = forward_map(&p, &spec, &x, Some(0.0)).unwrap();
        let y1 = forward_map(&p, &spec, &x, Some(1.0)).unwrap();
        assert_ne!(y0.data()[0], y1.data()[0]);
        // selu(0) = 0, so k=0 leaves the zero-bias path at zero.
        assert_eq!(y0.data()[0], 0.0);
    }

    #[test]
    fn time_input_mismatches_are_errors() {
        let cond = MlpSpec::map_default(2, true);
        let p = ParamVector::zeros(&cond);
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        assert!(matches!(forward_map(&p, &cond, &x, None), Err(NetError::Time(_))));

        let plain = MlpSpec::map_default(2, false);
        let p = ParamVector::zeros(&plain);
        assert!(matches!(forward_map(&p, &plain, &x, Some(1.0)), Err(NetError::Time(_))));
    }

    #[test]
    fn ensembles_share_one_call_signature() {
        let per_step = MapEnsemble::per_step(2, 3, 0);
        let cond = MapEnsemble::time_conditioned(2, 3, 0, false);
        let x = Tensor::matrix(4, 2, vec![0.1; 8]);
        for k in 0..3 {
            let a = per_step.apply(&x, k).unwrap();
            let b = cond.apply(&x, k).unwrap();
            assert_eq!(a.shape(), &[4, 2]);
            assert_eq!(b.shape(), &[4, 2]);
        }
        assert!(per_step.apply(&x, 3).is_err());
        assert!(cond.apply(&x, 3).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let spec = MlpSpec::energy_default(2);
        let p = init_params(&spec, 123);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("potential.json");
        save_checkpoint(&path, &spec, &p).unwrap();
        let (spec2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(p, p2);
    }
}
