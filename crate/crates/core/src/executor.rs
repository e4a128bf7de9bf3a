//! Executes a circuit design on a set of tokens.
//!
//! Read-in: each processor module cross-attends to the tokens with
//! code-modulated projections. Propagators: `L` rounds of kernel-masked
//! attention between processor modules followed by per-module ModFFNs.
//! Read-out: read-out modules attend to the final processor states and their
//! confidence-weighted outputs form the logits. All blocks are pre-norm with
//! residual connections.
//!
//! The read-in never materializes per-module keys and values. With
//! `k_uj = W_k (x_j * m_u) + b_k` the score `q_u . k_uj` equals
//! `(m_u * W_k^T q_u) . x_j` plus a per-module constant that the softmax
//! removes, and the value sum is `W_v ((sum_j a_uj x_j) * m_u) + b_v`. Both
//! cost `O(N U)` instead of `O(N U d_model)` per projection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::generator::DesignVars;
use crate::layers::{
    attend, dead_rows, hard_kernel, link_probabilities, sample_kernel, KernelMode, Linear, ModFc, ModFfn, Norm,
    SkmdpaConfig,
};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Score added to padded token positions.
const PAD_SCORE: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutorConfig {
    pub layers: usize,
    pub processors: usize,
    pub readouts: usize,
    pub d_model: usize,
    pub d_sig: usize,
    pub d_code: usize,
    pub d_token: usize,
    pub readin_heads: usize,
    /// GEGLU hidden width of every ModFFN.
    pub ffn_hidden: usize,
    pub classes: usize,
    /// One parameter set for all propagator layers.
    pub share_weights: bool,
    pub kernel: SkmdpaConfig,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExecutorConfig {
    /// Small configuration for single-core experiments.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            processors: 32,
            readouts: 4,
            d_model: 64,
            d_sig: 16,
            d_code: 64,
            d_token: 32,
            readin_heads: 1,
            ffn_hidden: 64,
            classes: 2,
            share_weights: false,
            kernel: SkmdpaConfig {
                heads: 4,
                ..SkmdpaConfig::default()
            },
        }
    }

    /// Image-classification scale from the original experiments.
    pub fn large() -> Self {
        Self {
            layers: 8,
            processors: 320,
            readouts: 64,
            d_model: 384,
            d_sig: 64,
            d_code: 384,
            d_token: 384,
            readin_heads: 1,
            ffn_hidden: 1536,
            classes: 200,
            share_weights: false,
            kernel: SkmdpaConfig {
                heads: 6,
                ..SkmdpaConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("processors", self.processors),
            ("readouts", self.readouts),
            ("d_model", self.d_model),
            ("d_sig", self.d_sig),
            ("d_code", self.d_code),
            ("d_token", self.d_token),
            ("readin_heads", self.readin_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(contract(format!("{name} must be positive")));
        }
        self.kernel.validate()?;
        for (name, heads) in [("heads", self.kernel.heads), ("readin_heads", self.readin_heads)] {
            if !self.d_model.is_multiple_of(heads) {
                return Err(contract(format!("d_model {} is not divisible by {name} {heads}", self.d_model)));
            }
        }
        Ok(())
    }
}

/// Per-sample matmul work split by how it scales with the input length `N`
/// and the number of active processor modules `U`.
///
/// Work that depends only on the design (code projections, read-in and
/// read-out queries, link probabilities) is done once per design and is not
/// counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopBreakdown {
    /// `a N U` with `a = 4 H_r d_token`: read-in scores and token averages.
    pub read_in: u64,
    /// `b U^2` with `b = 4 L d_model`: propagator attention.
    pub communication: u64,
    /// `c U`: per-module projections and ModFFNs in all stages, plus read-out
    /// attention over the `U_o` read-out modules.
    pub modules: u64,
    /// Read-out work independent of `U`.
    pub fixed: u64,
    /// Propagator-only share of `modules`.
    pub propagator_modules: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.read_in + self.communication + self.modules + self.fixed
    }

    /// Work done inside the propagator layers.
    pub fn propagator(&self) -> u64 {
        self.communication + self.propagator_modules
    }
}

/// Matmul FLOPs (2 m k n per product) of one sample through the executor.
pub fn flop_estimate(cfg: &ExecutorConfig, tokens: usize, active: usize) -> FlopBreakdown {
    let (n, u) = (tokens as u64, active as u64);
    let (l, dm, dt, h) = (cfg.layers as u64, cfg.d_model as u64, cfg.d_token as u64, cfg.ffn_hidden as u64);
    let (uo, classes, hr) = (cfg.readouts as u64, cfg.classes as u64, cfg.readin_heads as u64);
    let ffn = 6 * dm * h;
    let a = 4 * hr * dt;
    let b = 4 * l * dm;
    let read_in_modules = 2 * dt * dm + 2 * dm * dm + ffn;
    let propagator_modules = l * (8 * dm * dm + ffn);
    let read_out_modules = 4 * dm * dm + 4 * uo * dm;
    let c = read_in_modules + propagator_modules + read_out_modules;
    let fixed = 2 * uo * dm * dm + uo * ffn + 2 * uo * dm * classes + 2 * uo * dm + 2 * uo * classes;
    FlopBreakdown {
        read_in: a * n * u,
        communication: b * u * u,
        modules: c * u,
        fixed,
        propagator_modules: propagator_modules * u,
    }
}

#[derive(Debug, Clone)]
struct ReadIn {
    norm_tokens: Norm,
    norm_state: Norm,
    q: ModFc,
    k: ModFc,
    v: ModFc,
    o: ModFc,
    norm_ffn: Norm,
    ffn: ModFfn,
}

#[derive(Debug, Clone)]
struct Propagator {
    norm_attn: Norm,
    q: ModFc,
    k: ModFc,
    v: ModFc,
    o: ModFc,
    norm_ffn: Norm,
    ffn: ModFfn,
}

#[derive(Debug, Clone)]
struct ReadOut {
    norm_q: Norm,
    norm_kv: Norm,
    q: ModFc,
    k: ModFc,
    v: ModFc,
    o: ModFc,
    norm_ffn: Norm,
    ffn: ModFfn,
    norm_head: Norm,
    head: Linear,
    confidence: Linear,
}

/// Which kernel the processor and read-out attention use.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum KernelChoice {
    /// Concrete samples drawn from the forward RNG.
    #[default]
    Sample,
    /// `1[P > 0.5]`.
    HardThreshold,
    /// The given `[U, U]` processor kernel in every layer; read-out kernel
    /// sampled.
    Fixed(Tensor),
}

impl From<KernelMode> for KernelChoice {
    fn from(mode: KernelMode) -> Self {
        match mode {
            KernelMode::Sample => KernelChoice::Sample,
            KernelMode::HardThreshold => KernelChoice::HardThreshold,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub kernel: KernelChoice,
    /// Processor modules that take part, as indices into the design.
    /// `None` keeps all of them.
    pub active: Option<Vec<usize>>,
    /// `[U_p, U_p]` 0/1 mask multiplied into every processor kernel.
    pub edge_mask: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ExecOutput {
    /// `[B, classes]`.
    pub logits: Var,
    /// Processor link probabilities `[B_d, U, U]` over active modules.
    pub link_probs: Var,
    /// Read-out link probabilities `[B_d, U_o, U]`.
    pub readout_link_probs: Var,
    /// Read-in attention `[B, H_r, U, N]`.
    pub readin_weights: Var,
    /// Read-out confidence weights `[B, U_o]`.
    pub confidence: Var,
    /// Processor states after the read-in and after every propagator.
    pub states: Vec<Var>,
    /// Kernel rows with no open entry, summed over all kernels.
    pub dead_rows: usize,
}

#[derive(Debug, Clone)]
pub struct Executor {
    cfg: ExecutorConfig,
    read_in: ReadIn,
    propagators: Vec<Propagator>,
    read_out: ReadOut,
}

fn modfc(store: &mut ParamStore, name: String, d_in: usize, d_out: usize, cfg: &ExecutorConfig, rng: &mut impl Rng) -> ModFc {
    ModFc::new(store, &name, d_in, d_out, cfg.d_code, rng)
}

impl Executor {
    pub fn new(store: &mut ParamStore, cfg: ExecutorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (dm, dt, dh) = (cfg.d_model, cfg.d_token, cfg.ffn_hidden);
        let read_in = ReadIn {
            norm_tokens: Norm::new(store, "read_in.norm_tokens", dt),
            norm_state: Norm::new(store, "read_in.norm_state", dm),
            q: modfc(store, "read_in.q".into(), dm, dm, &cfg, rng),
            k: modfc(store, "read_in.k".into(), dt, dm, &cfg, rng),
            v: modfc(store, "read_in.v".into(), dt, dm, &cfg, rng),
            o: modfc(store, "read_in.o".into(), dm, dm, &cfg, rng),
            norm_ffn: Norm::new(store, "read_in.norm_ffn", dm),
            ffn: ModFfn::new(store, "read_in.ffn", dm, dh, cfg.d_code, rng),
        };
        let distinct = if cfg.share_weights { 1 } else { cfg.layers };
        let propagators = (0..distinct)
            .map(|l| Propagator {
                norm_attn: Norm::new(store, &format!("prop{l}.norm_attn"), dm),
                q: modfc(store, format!("prop{l}.q"), dm, dm, &cfg, rng),
                k: modfc(store, format!("prop{l}.k"), dm, dm, &cfg, rng),
                v: modfc(store, format!("prop{l}.v"), dm, dm, &cfg, rng),
                o: modfc(store, format!("prop{l}.o"), dm, dm, &cfg, rng),
                norm_ffn: Norm::new(store, &format!("prop{l}.norm_ffn"), dm),
                ffn: ModFfn::new(store, &format!("prop{l}.ffn"), dm, dh, cfg.d_code, rng),
            })
            .collect();
        let read_out = ReadOut {
            norm_q: Norm::new(store, "read_out.norm_q", dm),
            norm_kv: Norm::new(store, "read_out.norm_kv", dm),
            q: modfc(store, "read_out.q".into(), dm, dm, &cfg, rng),
            k: modfc(store, "read_out.k".into(), dm, dm, &cfg, rng),
            v: modfc(store, "read_out.v".into(), dm, dm, &cfg, rng),
            o: modfc(store, "read_out.o".into(), dm, dm, &cfg, rng),
            norm_ffn: Norm::new(store, "read_out.norm_ffn", dm),
            ffn: ModFfn::new(store, "read_out.ffn", dm, dh, cfg.d_code, rng),
            norm_head: Norm::new(store, "read_out.norm_head", dm),
            head: Linear::new(store, "read_out.head", dm, cfg.classes, rng),
            confidence: Linear::new(store, "read_out.confidence", dm, 1, rng),
        };
        Ok(Self {
            cfg,
            read_in,
            propagators,
            read_out,
        })
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.cfg
    }

    /// Runs the executor.
    ///
    /// `tokens` is `[B, N, d_token]`; `lengths`, when given, marks positions
    /// at or beyond `lengths[b]` as padding. Kernel draws consume `rng` in
    /// layer order, then for the read-out.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: Var,
        lengths: Option<&[usize]>,
        design: &DesignVars,
        rng: &mut impl Rng,
        opts: &ForwardOptions,
    ) -> Result<ExecOutput> {
        let design = match &opts.active {
            Some(keep) => {
                if keep.is_empty() || keep.iter().any(|&i| i >= self.cfg.processors) {
                    return Err(contract(format!("invalid active module set {keep:?}")));
                }
                design.select_processors(tape, keep)?
            }
            None => *design,
        };
        let active: Vec<usize> = opts.active.clone().unwrap_or_else(|| (0..self.cfg.processors).collect());
        let mut dead = 0;

        let (mut theta, readin_weights) = self.read_in(tape, p, tokens, lengths, &design)?;
        let mut states = vec![theta];

        let eps = self.cfg.kernel.epsilon;
        let delta = self.cfg.kernel.delta;
        let link_probs = link_probabilities(tape, design.proc_signatures, design.proc_signatures, eps)?;
        let edge_mask = match &opts.edge_mask {
            Some(mask) => {
                let u = self.cfg.processors;
                if mask.shape() != [u, u] {
                    return Err(contract(format!("edge mask must be [{u}, {u}], got {:?}", mask.shape())));
                }
                let ua = active.len();
                let mut sub = Tensor::zeros(&[1, ua, ua]);
                for (i, &a) in active.iter().enumerate() {
                    for (j, &b) in active.iter().enumerate() {
                        sub.set(&[0, i, j], mask.at(&[a, b]));
                    }
                }
                Some(tape.constant(sub))
            }
            None => None,
        };

        for layer in 0..self.cfg.layers {
            let prop = &self.propagators[if self.cfg.share_weights { 0 } else { layer }];
            let mut kernel = match &opts.kernel {
                KernelChoice::Sample => sample_kernel(tape, link_probs, self.cfg.kernel.tau, rng)?,
                KernelChoice::HardThreshold => hard_kernel(tape, link_probs),
                KernelChoice::Fixed(k) => {
                    let ua = active.len();
                    let k = k.clone().reshape(&[1, ua, ua])?;
                    tape.constant(k)
                }
            };
            if let Some(mask) = edge_mask {
                kernel = tape.mul(kernel, mask)?;
            }
            dead += dead_rows(tape.value(kernel), active.len(), delta);
            theta = self.propagate(tape, p, prop, theta, &design, kernel)?;
            states.push(theta);
        }

        let readout_link_probs = link_probabilities(tape, design.out_signatures, design.proc_signatures, eps)?;
        let out_kernel = match &opts.kernel {
            KernelChoice::HardThreshold => hard_kernel(tape, readout_link_probs),
            _ => sample_kernel(tape, readout_link_probs, self.cfg.kernel.tau, rng)?,
        };
        dead += dead_rows(tape.value(out_kernel), active.len(), delta);
        let (logits, confidence) = self.read_out(tape, p, theta, &design, out_kernel)?;
        Ok(ExecOutput {
            logits,
            link_probs,
            readout_link_probs,
            readin_weights,
            confidence,
            states,
            dead_rows: dead,
        })
    }

    fn read_in(
        &self,
        tape: &mut Tape,
        p: &Bound,
        tokens: Var,
        lengths: Option<&[usize]>,
        design: &DesignVars,
    ) -> Result<(Var, Var)> {
        let r = &self.read_in;
        let shape = tape.shape(tokens).to_vec();
        let [batch, n, dt] = shape[..] else {
            return Err(contract(format!("tokens must be [batch, n, d_token], got {shape:?}")));
        };
        if n == 0 || dt != self.cfg.d_token {
            return Err(contract(format!(
                "tokens must be [batch, n >= 1, {}], got {shape:?}",
                self.cfg.d_token
            )));
        }
        let codes = design.proc_codes;
        let bd = tape.shape(codes)[0];
        let u = tape.shape(codes)[1];
        let (dm, hr) = (self.cfg.d_model, self.cfg.readin_heads);
        let dh = dm / hr;

        let x = r.norm_tokens.forward(tape, p, tokens)?;
        let x4 = tape.reshape(x, &[batch, 1, n, dt])?;

        // Design-side projections, one per module.
        let h0 = r.norm_state.forward(tape, p, design.proc_states)?;
        let q = r.q.forward(tape, p, h0, codes)?;
        let q = tape.reshape(q, &[bd, u, hr, dh])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let wk = tape.reshape(p.get(r.k.w), &[hr, dh, dt])?;
        let qk = tape.matmul(q, wk)?;
        let mk = r.k.modulation(tape, p, codes)?;
        let mk = tape.reshape(mk, &[bd, 1, u, dt])?;
        let reader = tape.mul(qk, mk)?;

        let scores = tape.matmul_t(reader, x4)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(lengths) = lengths {
            if lengths.len() != batch || lengths.iter().any(|&l| l == 0 || l > n) {
                return Err(contract(format!("token lengths {lengths:?} do not fit {batch} x {n} tokens")));
            }
            let mut bias = Tensor::zeros(&[batch, 1, 1, n]);
            for (b, &len) in lengths.iter().enumerate() {
                bias.data_mut()[b * n + len..(b + 1) * n].fill(PAD_SCORE);
            }
            let bias = tape.constant(bias);
            scores = tape.add(scores, bias)?;
        }
        let weights = tape.softmax_last(scores)?;

        let averaged = tape.matmul(weights, x4)?;
        let mv = r.v.modulation(tape, p, codes)?;
        let mv = tape.reshape(mv, &[bd, 1, u, dt])?;
        let averaged = tape.mul(averaged, mv)?;
        let wv = tape.reshape(p.get(r.v.w), &[hr, dh, dt])?;
        let values = tape.matmul_t(averaged, wv)?;
        let bv = tape.reshape(p.get(r.v.b), &[hr, 1, dh])?;
        let values = tape.add(values, bv)?;
        let values = tape.permute(values, &[0, 2, 1, 3])?;
        let y = tape.reshape(values, &[batch, u, dm])?;

        let o = r.o.forward(tape, p, y, codes)?;
        let theta = tape.add(design.proc_states, o)?;
        let h = r.norm_ffn.forward(tape, p, theta)?;
        let f = r.ffn.forward(tape, p, h, codes)?;
        let theta = tape.add(theta, f)?;
        Ok((theta, weights))
    }

    fn propagate(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prop: &Propagator,
        theta: Var,
        design: &DesignVars,
        kernel: Var,
    ) -> Result<Var> {
        let codes = design.proc_codes;
        let h = prop.norm_attn.forward(tape, p, theta)?;
        let q = prop.q.forward(tape, p, h, codes)?;
        let k = prop.k.forward(tape, p, h, codes)?;
        let v = prop.v.forward(tape, p, h, codes)?;
        let a = attend(tape, q, k, v, self.cfg.kernel.heads, Some((kernel, self.cfg.kernel.delta)))?;
        let o = prop.o.forward(tape, p, a.out, codes)?;
        let theta = tape.add(theta, o)?;
        let h = prop.norm_ffn.forward(tape, p, theta)?;
        let f = prop.ffn.forward(tape, p, h, codes)?;
        Ok(tape.add(theta, f)?)
    }

    fn read_out(
        &self,
        tape: &mut Tape,
        p: &Bound,
        theta: Var,
        design: &DesignVars,
        kernel: Var,
    ) -> Result<(Var, Var)> {
        let r = &self.read_out;
        let batch = tape.shape(theta)[0];
        let (uo, classes) = (self.cfg.readouts, self.cfg.classes);
        let hq = r.norm_q.forward(tape, p, design.out_states)?;
        let q = r.q.forward(tape, p, hq, design.out_codes)?;
        let hkv = r.norm_kv.forward(tape, p, theta)?;
        let k = r.k.forward(tape, p, hkv, design.proc_codes)?;
        let v = r.v.forward(tape, p, hkv, design.proc_codes)?;
        let a = attend(tape, q, k, v, self.cfg.kernel.heads, Some((kernel, self.cfg.kernel.delta)))?;
        let o = r.o.forward(tape, p, a.out, design.out_codes)?;
        let out = tape.add(design.out_states, o)?;
        let h = r.norm_ffn.forward(tape, p, out)?;
        let f = r.ffn.forward(tape, p, h, design.out_codes)?;
        let out = tape.add(out, f)?;
        let h = r.norm_head.forward(tape, p, out)?;
        let per_module = r.head.forward(tape, p, h)?;
        let g = r.confidence.forward(tape, p, h)?;
        let g = tape.reshape(g, &[batch, uo])?;
        let confidence = tape.softmax_last(g)?;
        let w = tape.reshape(confidence, &[batch, 1, uo])?;
        let logits = tape.matmul(w, per_module)?;
        let logits = tape.reshape(logits, &[batch, classes])?;
        Ok((logits, confidence))
    }
}
