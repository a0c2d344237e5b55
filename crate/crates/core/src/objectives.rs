//! Self-supervised objectives: NT-Xent (SimCLR), normalised regression with
//! an EMA target (BYOL), and swapped prototype prediction with Sinkhorn-Knopp
//! equipartition (SwAV).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{ConfigError, TensorError};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Guard for normalising near-zero vectors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    SimClr,
    Byol,
    Swav,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SimClr, Method::Byol, Method::Swav];

    pub fn tag(self) -> &'static str {
        match self {
            Method::SimClr => "simclr",
            Method::Byol => "byol",
            Method::Swav => "swav",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::SimClr => "SimCLR",
            Method::Byol => "BYOL",
            Method::Swav => "SwAV",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "simclr" => Ok(Method::SimClr),
            "byol" => Ok(Method::Byol),
            "swav" => Ok(Method::Swav),
            _ => Err(ConfigError::UnknownMethod(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionHeadConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl Default for ProjectionHeadConfig {
    fn default() -> Self {
        ProjectionHeadConfig { hidden_dim: 128, output_dim: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimClrConfig {
    pub temperature: f64,
}

impl Default for SimClrConfig {
    fn default() -> Self {
        SimClrConfig { temperature: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ByolConfig {
    pub ema_tau: f64,
    pub predictor_hidden_dim: usize,
}

impl Default for ByolConfig {
    fn default() -> Self {
        ByolConfig { ema_tau: 0.99, predictor_hidden_dim: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwavConfig {
    pub num_prototypes: usize,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iterations: usize,
    pub temperature: f64,
    pub prototype_freeze_steps: usize,
}

impl Default for SwavConfig {
    fn default() -> Self {
        SwavConfig {
            num_prototypes: 32,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iterations: 3,
            temperature: 0.1,
            prototype_freeze_steps: 100,
        }
    }
}

impl ProjectionHeadConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.hidden_dim == 0 || self.output_dim < 4 {
            return Err(ConfigError::Invalid(format!(
                "projection head needs hidden_dim > 0 and output_dim >= 4, got {} / {}",
                self.hidden_dim, self.output_dim
            )));
        }
        Ok(())
    }
}

impl SimClrConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError::Invalid(format!("simclr temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

impl ByolConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.ema_tau) {
            return Err(ConfigError::Invalid(format!("byol ema_tau must be in [0, 1], got {}", self.ema_tau)));
        }
        if self.predictor_hidden_dim == 0 {
            return Err(ConfigError::Invalid("byol predictor_hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

impl SwavConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_prototypes < 2 {
            return Err(ConfigError::Invalid(format!("swav needs at least 2 prototypes, got {}", self.num_prototypes)));
        }
        if !(self.sinkhorn_epsilon > 0.0 && self.sinkhorn_epsilon.is_finite()) {
            return Err(ConfigError::Invalid(format!("sinkhorn_epsilon must be positive, got {}", self.sinkhorn_epsilon)));
        }
        if self.sinkhorn_iterations == 0 {
            return Err(ConfigError::Invalid("sinkhorn_iterations must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError::Invalid(format!("swav temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ SimCLR

/// NT-Xent over `embeddings[2N, p]`, where row `i` and row `i + N` are the
/// two views of sample `i`. Rows are L2-normalised internally and each
/// anchor's own similarity is excluded from its denominator.
pub fn nt_xent_loss<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, temperature: f64) -> Result<Var, TensorError> {
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::Shape(format!("nt_xent expects [2N, p], got {shape:?}")));
    }
    let rows = shape[0];
    if rows == 0 || rows % 2 != 0 {
        return Err(TensorError::Contract(format!("nt_xent needs an even, non-zero number of rows, got {rows}")));
    }
    if temperature <= 0.0 {
        return Err(TensorError::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let n = rows / 2;
    let z = tape.l2_normalize(embeddings, T::of_f64(NORM_EPS))?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, T::of_f64(1.0 / temperature))?;
    let log_prob = tape.log_softmax(logits, true)?;
    let positives = (0..rows).map(|a| a * rows + (a + n) % rows).collect();
    let picked = tape.select(log_prob, positives)?;
    let mean = tape.mean(picked)?;
    tape.scale(mean, -T::one())
}

// -------------------------------------------------------------------- BYOL

/// Mean over rows of `‖p̂ − ẑ‖² = 2 − 2·cos(p, z)`. `target` must be detached.
pub fn byol_loss<T: Scalar>(tape: &mut Tape<T>, prediction: Var, target: Var) -> Result<Var, TensorError> {
    if tape.requires_grad(target) {
        return Err(TensorError::Contract("byol target projection must be detached from the gradient tape".into()));
    }
    if tape.shape(prediction) != tape.shape(target) || tape.shape(prediction).len() != 2 {
        return Err(TensorError::Shape(format!(
            "byol_loss: prediction {:?} vs target {:?}",
            tape.shape(prediction),
            tape.shape(target)
        )));
    }
    let p = tape.l2_normalize(prediction, T::of_f64(NORM_EPS))?;
    let z = tape.l2_normalize(target, T::of_f64(NORM_EPS))?;
    let prod = tape.mul(p, z)?;
    let cos = tape.sum_rows(prod)?;
    let mean = tape.mean(cos)?;
    tape.affine(mean, T::of_f64(-2.0), T::of_f64(2.0))
}

/// `L(p₁, z₂) + L(p₂, z₁)`.
pub fn byol_loss_symmetric<T: Scalar>(
    tape: &mut Tape<T>,
    pred1: Var,
    pred2: Var,
    target1: Var,
    target2: Var,
) -> Result<Var, TensorError> {
    let a = byol_loss(tape, pred1, target2)?;
    let b = byol_loss(tape, pred2, target1)?;
    tape.add(a, b)
}

/// `θ_target ← τ·θ_target + (1 − τ)·θ_online` for every target entry,
/// matched to the online entry of the same name.
pub fn ema_update<T: Scalar>(target: &mut ParamStore<T>, online: &ParamStore<T>, tau: f64) -> Result<(), TensorError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(TensorError::Contract(format!("ema tau must be in [0, 1], got {tau}")));
    }
    let mut pairs = Vec::with_capacity(target.len());
    for id in target.ids() {
        let name = target.name(id);
        let src = online
            .find(name)
            .ok_or_else(|| TensorError::Shape(format!("ema: online parameters have no `{name}`")))?;
        if target.get(id).shape() != online.get(src).shape() {
            return Err(TensorError::Shape(format!("ema: shape mismatch for `{name}`")));
        }
        pairs.push((id, src));
    }
    for (id, src) in pairs {
        let src = online.get(src).data();
        for (t, &o) in target.get_mut(id).data_mut().iter_mut().zip(src) {
            *t = T::of_f64(tau * t.as_f64() + (1.0 - tau) * o.as_f64());
        }
    }
    Ok(())
}

// -------------------------------------------------------------------- SwAV

/// Sinkhorn-Knopp soft assignments for `scores[B, K]` (row-major).
///
/// Starts from `exp((s − max) / ε)`, then alternates column normalisation to
/// `B/K` and row normalisation to 1; the last step is always a row
/// normalisation.
pub fn sinkhorn(scores: &[f64], b: usize, k: usize, eps: f64, iterations: usize) -> Vec<f64> {
    sinkhorn_traced(scores, b, k, eps, iterations).0
}

/// As [`sinkhorn`], also returning the maximum column-sum deviation from
/// `B/K` after each iteration.
pub fn sinkhorn_traced(scores: &[f64], b: usize, k: usize, eps: f64, iterations: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(scores.len(), b * k, "sinkhorn: scores must be B×K");
    assert!(b >= 1 && k >= 2 && eps > 0.0);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q: Vec<f64> = scores.iter().map(|&s| ((s - max) / eps).exp()).collect();
    let col_target = b as f64 / k as f64;
    let normalize_rows = |q: &mut [f64]| {
        for row in q.chunks_mut(k) {
            let s: f64 = row.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            row.iter_mut().for_each(|v| *v /= s);
        }
    };
    let col_deviation = |q: &[f64]| {
        (0..k)
            .map(|j| ((0..b).map(|i| q[i * k + j]).sum::<f64>() - col_target).abs())
            .fold(0.0, f64::max)
    };
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        for j in 0..k {
            let s: f64 = (0..b).map(|i| q[i * k + j]).sum::<f64>().max(f64::MIN_POSITIVE);
            let f = col_target / s;
            (0..b).for_each(|i| q[i * k + j] *= f);
        }
        normalize_rows(&mut q);
        trace.push(col_deviation(&q));
    }
    if iterations == 0 {
        normalize_rows(&mut q);
    }
    (q, trace)
}

/// SwAV swapped-prediction loss from projections `[B, p]` and unit-column
/// prototypes `[p, K]`. Assignments are computed from the score values and
/// enter the tape as constants. Returns the loss and both assignment matrices.
pub fn swav_loss<T: Scalar>(
    tape: &mut Tape<T>,
    proj1: Var,
    proj2: Var,
    prototypes: Var,
    cfg: &SwavConfig,
) -> Result<(Var, Vec<f64>, Vec<f64>), TensorError> {
    let b = tape.shape(proj1)[0];
    if b < 2 {
        log::warn!("swav batch of {b} sample(s): equipartition is meaningless");
    }
    let z1 = tape.l2_normalize(proj1, T::of_f64(NORM_EPS))?;
    let z2 = tape.l2_normalize(proj2, T::of_f64(NORM_EPS))?;
    let s1 = tape.matmul(z1, prototypes)?;
    let s2 = tape.matmul(z2, prototypes)?;
    let k = tape.shape(s1)[1];
    let to_f64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let q1 = sinkhorn(&to_f64(tape.data(s1)), b, k, cfg.sinkhorn_epsilon, cfg.sinkhorn_iterations);
    let q2 = sinkhorn(&to_f64(tape.data(s2)), b, k, cfg.sinkhorn_epsilon, cfg.sinkhorn_iterations);
    let loss = swapped_prediction_loss(tape, s1, s2, &q1, &q2, cfg.temperature)?;
    Ok((loss, q1, q2))
}

/// `−(Σ q₂·log softmax(s₁/T) + Σ q₁·log softmax(s₂/T)) / (2B)`.
pub fn swapped_prediction_loss<T: Scalar>(
    tape: &mut Tape<T>,
    scores1: Var,
    scores2: Var,
    q1: &[f64],
    q2: &[f64],
    temperature: f64,
) -> Result<Var, TensorError> {
    let shape = tape.shape(scores1).to_vec();
    if tape.shape(scores2) != shape.as_slice() || shape.len() != 2 || q1.len() != shape[0] * shape[1] || q2.len() != q1.len() {
        return Err(TensorError::Shape("swapped prediction: score/assignment shape mismatch".into()));
    }
    let b = shape[0];
    let as_const = |tape: &mut Tape<T>, q: &[f64]| {
        tape.constant(Tensor::new(shape.clone(), q.iter().map(|&v| T::of_f64(v)).collect()).expect("checked shape"))
    };
    let c1 = as_const(tape, q1);
    let c2 = as_const(tape, q2);
    let inv_t = T::of_f64(1.0 / temperature);
    let l1 = tape.scale(scores1, inv_t)?;
    let l1 = tape.log_softmax(l1, false)?;
    let l2 = tape.scale(scores2, inv_t)?;
    let l2 = tape.log_softmax(l2, false)?;
    let a = tape.mul(l1, c2)?;
    let a = tape.sum(a)?;
    let bb = tape.mul(l2, c1)?;
    let bb = tape.sum(bb)?;
    let total = tape.add(a, bb)?;
    tape.scale(total, T::of_f64(-1.0 / (2.0 * b as f64)))
}

/// Rescales each column of `prototypes[p, K]` to unit norm. Zero columns are
/// replaced by a random unit direction. Returns how many were replaced.
pub fn prototype_renormalize(prototypes: &mut Tensor<f32>, rng: &mut ChaCha8Rng) -> usize {
    let (p, k) = (prototypes.shape()[0], prototypes.shape()[1]);
    let data = prototypes.data_mut();
    let mut reinit = 0;
    for j in 0..k {
        let mut norm = (0..p).map(|i| (data[i * k + j] as f64).powi(2)).sum::<f64>().sqrt();
        if norm <= NORM_EPS {
            log::warn!("prototype column {j} collapsed to zero; re-initialising");
            reinit += 1;
            for i in 0..p {
                data[i * k + j] = rng.gen_range(-1.0f32..1.0);
            }
            norm = (0..p).map(|i| (data[i * k + j] as f64).powi(2)).sum::<f64>().sqrt();
        }
        for i in 0..p {
            data[i * k + j] = (data[i * k + j] as f64 / norm) as f32;
        }
    }
    reinit
}
