//! Code-modulated layers, link probabilities, kernel sampling and
//! kernel-masked attention.
//!
//! Module-indexed tensors carry a leading design-batch axis of size 1 (one
//! design shared by the whole batch) or `B` (one design per sample); the
//! tape's broadcasting takes care of both.

use rand::distr::Open01;
use rand::Rng;

use crate::error::{contract, NacError, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Initial value of the ModFC conditioning strength.
pub const ALPHA_INIT: f64 = 0.1;
/// Floor added inside the log of the normalized kernel.
pub const LOG_FLOOR: f64 = 1e-20;
/// Minimum admissible signature norm.
pub const MIN_SIGNATURE_NORM: f64 = 1e-12;

fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Affine layer `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, &[d_out, d_in], d_in), ParamKind::Weight);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), ParamKind::Weight);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_t(x, p.get(self.w))?;
        Ok(tape.add(y, p.get(self.b))?)
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[d]), ParamKind::Weight);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]), ParamKind::Weight);
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, Some(p.get(self.gain)), Some(p.get(self.bias)))?)
    }
}

/// Fully-connected layer whose input is rescaled per module by its code:
/// `y = W (x * (1 + alpha * LN(W_c c))) + b`.
#[derive(Debug, Clone)]
pub struct ModFc {
    pub w: ParamId,
    pub b: ParamId,
    pub w_code: ParamId,
    pub alpha: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub d_code: usize,
}

impl ModFc {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        d_code: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, &[d_out, d_in], d_in), ParamKind::Weight);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), ParamKind::Weight);
        let w_code = store.add(
            format!("{name}.w_code"),
            glorot(rng, &[d_in, d_code], d_code),
            ParamKind::Weight,
        );
        let alpha = store.add(format!("{name}.alpha"), Tensor::scalar(ALPHA_INIT), ParamKind::Weight);
        let ln_gain = store.add(format!("{name}.ln_gain"), Tensor::ones(&[d_in]), ParamKind::Weight);
        let ln_bias = store.add(format!("{name}.ln_bias"), Tensor::zeros(&[d_in]), ParamKind::Weight);
        Self {
            w,
            b,
            w_code,
            alpha,
            ln_gain,
            ln_bias,
            d_in,
            d_out,
            d_code,
        }
    }

    /// Scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.d_out * self.d_in + self.d_out + self.d_in * self.d_code + 1 + 2 * self.d_in
    }

    /// `1 + alpha * LN(W_c c)` for codes `[..., d_code]`, giving `[..., d_in]`.
    pub fn modulation(&self, tape: &mut Tape, p: &Bound, codes: Var) -> Result<Var> {
        let projected = tape.matmul_t(codes, p.get(self.w_code))?;
        let normed = tape.layer_norm(projected, Some(p.get(self.ln_gain)), Some(p.get(self.ln_bias)))?;
        let scaled = tape.mul(normed, p.get(self.alpha))?;
        Ok(tape.add_scalar(scaled, 1.0))
    }

    /// Applies the layer given a precomputed modulation that broadcasts
    /// against `x`.
    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var, modulation: Var) -> Result<Var> {
        let xm = tape.mul(x, modulation)?;
        let y = tape.matmul_t(xm, p.get(self.w))?;
        Ok(tape.add(y, p.get(self.b))?)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, codes: Var) -> Result<Var> {
        let m = self.modulation(tape, p, codes)?;
        self.apply(tape, p, x, m)
    }
}

/// Two ModFCs sharing one code with a GEGLU in between.
#[derive(Debug, Clone)]
pub struct ModFfn {
    pub fc1: ModFc,
    pub fc2: ModFc,
}

/// Precomputed modulations of a [`ModFfn`].
#[derive(Debug, Clone, Copy)]
pub struct FfnModulation {
    pub first: Var,
    pub second: Var,
}

impl ModFfn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        d_code: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fc1 = ModFc::new(store, &format!("{name}.fc1"), d, 2 * hidden, d_code, rng);
        let fc2 = ModFc::new(store, &format!("{name}.fc2"), hidden, d, d_code, rng);
        Self { fc1, fc2 }
    }

    pub fn hidden(&self) -> usize {
        self.fc2.d_in
    }

    pub fn parameter_count(&self) -> usize {
        self.fc1.parameter_count() + self.fc2.parameter_count()
    }

    pub fn modulation(&self, tape: &mut Tape, p: &Bound, codes: Var) -> Result<FfnModulation> {
        Ok(FfnModulation {
            first: self.fc1.modulation(tape, p, codes)?,
            second: self.fc2.modulation(tape, p, codes)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var, m: FfnModulation) -> Result<Var> {
        let h = self.fc1.apply(tape, p, x, m.first)?;
        let h = tape.geglu(h)?;
        self.fc2.apply(tape, p, h, m.second)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, codes: Var) -> Result<Var> {
        let m = self.modulation(tape, p, codes)?;
        self.apply(tape, p, x, m)
    }
}

/// ModFFN parameter accounting used for large-scale comparisons: per layer
/// two `d_in x d_h` weights and two `d_code x d_h` code projections, plus
/// one code of width `d_code` per module.
pub fn modffn_parameter_budget(layers: usize, d_in: usize, d_hidden: usize, d_code: usize, modules: usize) -> usize {
    layers * (2 * d_in * d_hidden + 2 * d_code * d_hidden) + modules * d_code
}

/// How the kernel is formed outside of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// Fresh Concrete sample.
    Sample,
    /// Deterministic `K = 1[P > 0.5]`.
    HardThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkmdpaConfig {
    /// Bandwidth of the signature kernel.
    pub epsilon: f64,
    /// Concrete temperature.
    pub tau: f64,
    /// Stabilizer in the kernel row normalizer.
    pub delta: f64,
    pub heads: usize,
    /// Kernel used when the model is evaluated rather than trained.
    pub eval_mode: KernelMode,
}

impl Default for SkmdpaConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            tau: 0.5,
            delta: 1e-6,
            heads: 4,
            eval_mode: KernelMode::Sample,
        }
    }
}

impl SkmdpaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(contract(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tau > 0.0) {
            return Err(contract(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.delta > 0.0 && self.delta <= 1e-3) {
            return Err(contract(format!("delta must lie in (0, 1e-3], got {}", self.delta)));
        }
        if self.heads == 0 {
            return Err(contract("heads must be positive"));
        }
        Ok(())
    }
}

fn check_signature_norms(tape: &Tape, s: Var) -> Result<()> {
    let shape = tape.shape(s);
    let d = *shape.last().unwrap_or(&0);
    if d == 0 {
        return Err(contract("signatures need a non-empty last axis"));
    }
    for (row, chunk) in tape.value(s).chunks(d).enumerate() {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_SIGNATURE_NORM) {
            return Err(NacError::DegenerateSignature { row, norm });
        }
    }
    Ok(())
}

fn unit_rows(tape: &mut Tape, s: Var) -> Result<Var> {
    let sq = tape.square(s);
    let norm2 = tape.sum_last(sq)?;
    let norm = tape.sqrt(norm2);
    Ok(tape.div(s, norm)?)
}

/// `P_ij = exp(-(1 - cos(s_i, t_j)) / epsilon)` for `s: [..., U_q, d]` and
/// `t: [..., U_k, d]`.
///
/// When `s` and `t` are the same node the cosine matrix is symmetrized, so
/// the result is exactly symmetric.
pub fn link_probabilities(tape: &mut Tape, s: Var, t: Var, epsilon: f64) -> Result<Var> {
    if !(epsilon > 0.0) {
        return Err(contract(format!("epsilon must be positive, got {epsilon}")));
    }
    check_signature_norms(tape, s)?;
    let s_hat = unit_rows(tape, s)?;
    let cos = if s == t {
        let c = tape.matmul_t(s_hat, s_hat)?;
        let rank = tape.shape(c).len();
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        let ct = tape.permute(c, &perm)?;
        let both = tape.add(c, ct)?;
        tape.scale(both, 0.5)
    } else {
        check_signature_norms(tape, t)?;
        let t_hat = unit_rows(tape, t)?;
        tape.matmul_t(s_hat, t_hat)?
    };
    let d = tape.add_scalar(cos, -1.0);
    let z = tape.scale(d, 1.0 / epsilon);
    Ok(tape.exp(z))
}

/// Plain-value version of [`link_probabilities`] for rank-2 inputs.
pub fn link_probability_matrix(s: &Tensor, t: &Tensor, epsilon: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let tv = if std::ptr::eq(s, t) { sv } else { tape.constant(t.clone()) };
    let p = link_probabilities(&mut tape, sv, tv, epsilon)?;
    Ok(tape.tensor(p))
}

/// Binary Concrete sample `K = sigmoid((logit(P) + logit(u)) / tau)` with
/// `u ~ Uniform(0, 1)` drawn from `rng` and kept on the tape.
pub fn sample_kernel(tape: &mut Tape, p: Var, tau: f64, rng: &mut impl Rng) -> Result<Var> {
    let n = tape.value(p).len();
    let uniforms: Vec<f64> = (0..n).map(|_| rng.sample(Open01)).collect();
    Ok(tape.concrete(p, tau, &uniforms)?)
}

/// Deterministic kernel `1[P > 0.5]`, carrying no gradient.
pub fn hard_kernel(tape: &mut Tape, p: Var) -> Var {
    let mut k = tape.tensor(p);
    k.data_mut().iter_mut().for_each(|v| *v = f64::from(*v > 0.5));
    tape.constant(k)
}

/// Number of kernel rows whose total mass does not exceed `delta`; such rows
/// fall back to unmasked attention.
pub fn dead_rows(kernel: &[f64], row_len: usize, delta: f64) -> usize {
    kernel
        .chunks(row_len)
        .filter(|row| row.iter().sum::<f64>() <= delta)
        .count()
}

/// Output of [`attend`].
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `[B, U_q, d]`, heads concatenated.
    pub out: Var,
    /// `[B, heads, U_q, U_k]`.
    pub weights: Var,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [b, u, d] = shape[..] else {
        return Err(contract(format!("attention expects [batch, modules, dim], got {shape:?}")));
    };
    if d % heads != 0 {
        return Err(contract(format!("width {d} is not divisible by {heads} heads")));
    }
    let x = tape.reshape(x, &[b, u, heads, d / heads])?;
    Ok(tape.permute(x, &[0, 2, 1, 3])?)
}

/// Multi-head dot-product attention of `q: [B_q, U_q, d]` over
/// `k, v: [B_k, U_k, d]`, optionally masked by a kernel `[B_K, U_q, U_k]`:
/// weights are `softmax_j(q_i.k_j / sqrt(d_head) + log(K_ij / (delta + sum_j K_ij) + 1e-20))`.
///
/// One kernel is shared by all heads. Batch axes of size 1 broadcast.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    kernel: Option<(Var, f64)>,
) -> Result<Attended> {
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let d_head = tape.shape(qh)[3];
    let raw = tape.matmul_t(qh, kh)?;
    let mut logits = tape.scale(raw, 1.0 / (d_head as f64).sqrt());
    if let Some((kern, delta)) = kernel {
        let ks = tape.shape(kern).to_vec();
        let [bk, uq, uk] = ks[..] else {
            return Err(contract(format!("kernel must be [batch, U_q, U_k], got {ks:?}")));
        };
        let row = tape.sum_last(kern)?;
        let denom = tape.add_scalar(row, delta);
        let normalized = tape.div(kern, denom)?;
        let floored = tape.add_scalar(normalized, LOG_FLOOR);
        let log_k = tape.log(floored);
        let log_k = tape.reshape(log_k, &[bk, 1, uq, uk])?;
        logits = tape.add(logits, log_k)?;
    }
    let weights = tape.softmax_last(logits)?;
    let y = tape.matmul(weights, vh)?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    let ys = tape.shape(y).to_vec();
    let out = tape.reshape(y, &[ys[0], ys[1], ys[2] * ys[3]])?;
    Ok(Attended { out, weights })
}
