//! Circuit designs: per-module signatures, codes and initial states.
//!
//! The unconditional generator holds signatures and codes as free
//! parameters. The conditional generator derives processor signatures and
//! codes from a context sequence with a small attention network; read-out
//! descriptors stay free parameters in both modes. Initial states always come
//! from a two-layer MLP applied to the codes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::layers::{attend, Linear, Norm};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Plain-value descriptor of one module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleDescriptor {
    pub signature: Vec<f64>,
    pub code: Vec<f64>,
    pub initial_state: Vec<f64>,
}

/// Plain-value circuit design.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitDesign {
    pub processors: Vec<ModuleDescriptor>,
    pub readouts: Vec<ModuleDescriptor>,
}

impl CircuitDesign {
    fn matrix(rows: impl Iterator<Item = Vec<f64>>) -> Tensor {
        Tensor::from_rows(&rows.collect::<Vec<_>>()).expect("descriptor rows share a width")
    }

    /// Processor signatures as `[U_p, d_sig]`.
    pub fn processor_signatures(&self) -> Tensor {
        Self::matrix(self.processors.iter().map(|d| d.signature.clone()))
    }

    /// Processor codes as `[U_p, d_code]`.
    pub fn processor_codes(&self) -> Tensor {
        Self::matrix(self.processors.iter().map(|d| d.code.clone()))
    }

    pub fn readout_signatures(&self) -> Tensor {
        Self::matrix(self.readouts.iter().map(|d| d.signature.clone()))
    }
}

/// Tape handles of a design. Processor tensors are `[B_d, U_p, .]` with
/// `B_d` either 1 or the batch size; read-out tensors are `[1, U_o, .]`.
#[derive(Debug, Clone, Copy)]
pub struct DesignVars {
    pub proc_signatures: Var,
    pub proc_codes: Var,
    pub proc_states: Var,
    pub out_signatures: Var,
    pub out_codes: Var,
    pub out_states: Var,
}

impl DesignVars {
    pub fn design_batch(&self, tape: &Tape) -> usize {
        tape.shape(self.proc_signatures)[0]
    }

    /// Keeps only the listed processor modules, in the given order.
    pub fn select_processors(&self, tape: &mut Tape, keep: &[usize]) -> Result<DesignVars> {
        Ok(DesignVars {
            proc_signatures: tape.gather(self.proc_signatures, 1, keep)?,
            proc_codes: tape.gather(self.proc_codes, 1, keep)?,
            proc_states: tape.gather(self.proc_states, 1, keep)?,
            ..*self
        })
    }

    /// Extracts the design of batch element `index` (clamped to the design batch).
    pub fn to_design(&self, tape: &Tape, index: usize) -> CircuitDesign {
        let take = |v: Var, b: usize| -> Vec<Vec<f64>> {
            let shape = tape.shape(v);
            let (u, d) = (shape[1], shape[2]);
            let b = b.min(shape[0] - 1);
            tape.value(v)[b * u * d..(b + 1) * u * d].chunks(d).map(<[f64]>::to_vec).collect()
        };
        let build = |s: Var, c: Var, st: Var, b: usize| -> Vec<ModuleDescriptor> {
            take(s, b)
                .into_iter()
                .zip(take(c, b))
                .zip(take(st, b))
                .map(|((signature, code), initial_state)| ModuleDescriptor {
                    signature,
                    code,
                    initial_state,
                })
                .collect()
        };
        CircuitDesign {
            processors: build(self.proc_signatures, self.proc_codes, self.proc_states, index),
            readouts: build(self.out_signatures, self.out_codes, self.out_states, 0),
        }
    }
}

/// Dimensions shared by both generator kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignDims {
    pub processors: usize,
    pub readouts: usize,
    pub d_sig: usize,
    pub d_code: usize,
    pub d_model: usize,
}

/// `y = W2 GELU(W1 x + b1) + b2`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.l1"), d_in, hidden, rng),
            second: Linear::new(store, &format!("{name}.l2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.second.forward(tape, p, h)
    }
}

fn descriptor(store: &mut ParamStore, name: &str, rows: usize, d: usize, kind: ParamKind, rng: &mut impl Rng) -> ParamId {
    let t = Tensor::randn(&[1, rows, d], 1.0 / (d as f64).sqrt(), rng);
    store.add(name, t, kind)
}

/// Read-out descriptors and the state MLP, common to both generators.
#[derive(Debug, Clone)]
struct Shared {
    out_signatures: ParamId,
    out_codes: ParamId,
    state_mlp: Mlp,
}

impl Shared {
    fn new(store: &mut ParamStore, dims: DesignDims, rng: &mut impl Rng) -> Self {
        Self {
            out_signatures: descriptor(store, "design.out_signatures", dims.readouts, dims.d_sig, ParamKind::Signature, rng),
            out_codes: descriptor(store, "design.out_codes", dims.readouts, dims.d_code, ParamKind::Code, rng),
            state_mlp: Mlp::new(store, "design.state_mlp", dims.d_code, dims.d_model, dims.d_model, rng),
        }
    }

    fn finish(&self, tape: &mut Tape, p: &Bound, proc_signatures: Var, proc_codes: Var) -> Result<DesignVars> {
        let proc_states = self.state_mlp.forward(tape, p, proc_codes)?;
        let out_codes = p.get(self.out_codes);
        let out_states = self.state_mlp.forward(tape, p, out_codes)?;
        Ok(DesignVars {
            proc_signatures,
            proc_codes,
            proc_states,
            out_signatures: p.get(self.out_signatures),
            out_codes,
            out_states,
        })
    }
}

/// Free signatures and codes.
#[derive(Debug, Clone)]
pub struct UnconditionalGenerator {
    pub proc_signatures: ParamId,
    pub proc_codes: ParamId,
    shared: Shared,
}

impl UnconditionalGenerator {
    pub fn new(store: &mut ParamStore, dims: DesignDims, rng: &mut impl Rng) -> Self {
        let proc_signatures =
            descriptor(store, "design.proc_signatures", dims.processors, dims.d_sig, ParamKind::Signature, rng);
        let proc_codes = descriptor(store, "design.proc_codes", dims.processors, dims.d_code, ParamKind::Code, rng);
        Self {
            proc_signatures,
            proc_codes,
            shared: Shared::new(store, dims, rng),
        }
    }

    pub fn design(&self, tape: &mut Tape, p: &Bound) -> Result<DesignVars> {
        self.shared
            .finish(tape, p, p.get(self.proc_signatures), p.get(self.proc_codes))
    }

    pub fn state_mlp(&self) -> &Mlp {
        &self.shared.state_mlp
    }
}

/// Widths of the conditional generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionalConfig {
    /// Width of the learned module queries.
    pub d_query: usize,
    /// Width of the context vectors.
    pub d_context: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for ConditionalConfig {
    fn default() -> Self {
        Self {
            d_query: 64,
            d_context: 64,
            heads: 4,
            ffn_hidden: 128,
        }
    }
}

/// Pre-norm residual attention block with plain linear projections.
#[derive(Debug, Clone)]
struct AttentionBlock {
    norm_q: Norm,
    norm_kv: Option<Norm>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl AttentionBlock {
    fn new(store: &mut ParamStore, name: &str, d: usize, d_kv: Option<usize>, heads: usize, rng: &mut impl Rng) -> Self {
        let kv = d_kv.unwrap_or(d);
        Self {
            norm_q: Norm::new(store, &format!("{name}.norm_q"), d),
            norm_kv: d_kv.map(|w| Norm::new(store, &format!("{name}.norm_kv"), w)),
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.k"), kv, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), kv, d, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Self-attention when `kv` is `None`.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, kv: Option<Var>) -> Result<Var> {
        let h = self.norm_q.forward(tape, p, x)?;
        let src = match (kv, &self.norm_kv) {
            (Some(kv), Some(norm)) => norm.forward(tape, p, kv)?,
            (None, _) => h,
            (Some(_), None) => return Err(contract("cross-attention block built without a context norm")),
        };
        let q = self.wq.forward(tape, p, h)?;
        let k = self.wk.forward(tape, p, src)?;
        let v = self.wv.forward(tape, p, src)?;
        let a = attend(tape, q, k, v, self.heads, None)?;
        let o = self.wo.forward(tape, p, a.out)?;
        Ok(tape.add(x, o)?)
    }
}

/// Processor signatures and codes computed from a context sequence:
/// learned queries cross-attend to the context, pass an MLP, self-attend,
/// and two parallel MLPs emit signatures and codes.
#[derive(Debug, Clone)]
pub struct ConditionalGenerator {
    pub queries: ParamId,
    cross: AttentionBlock,
    norm_ffn: Norm,
    ffn: Mlp,
    self_attn: AttentionBlock,
    norm_heads: Norm,
    signature_head: Mlp,
    code_head: Mlp,
    shared: Shared,
    cfg: ConditionalConfig,
}

impl ConditionalGenerator {
    pub fn new(store: &mut ParamStore, dims: DesignDims, cfg: ConditionalConfig, rng: &mut impl Rng) -> Self {
        let dq = cfg.d_query;
        let queries = store.add(
            "design.queries",
            Tensor::randn(&[1, dims.processors, dq], 1.0 / (dq as f64).sqrt(), rng),
            ParamKind::Weight,
        );
        Self {
            queries,
            cross: AttentionBlock::new(store, "design.cross", dq, Some(cfg.d_context), cfg.heads, rng),
            norm_ffn: Norm::new(store, "design.norm_ffn", dq),
            ffn: Mlp::new(store, "design.ffn", dq, cfg.ffn_hidden, dq, rng),
            self_attn: AttentionBlock::new(store, "design.self", dq, None, cfg.heads, rng),
            norm_heads: Norm::new(store, "design.norm_heads", dq),
            signature_head: Mlp::new(store, "design.signature_head", dq, cfg.ffn_hidden, dims.d_sig, rng),
            code_head: Mlp::new(store, "design.code_head", dq, cfg.ffn_hidden, dims.d_code, rng),
            shared: Shared::new(store, dims, rng),
            cfg,
        }
    }

    pub fn config(&self) -> ConditionalConfig {
        self.cfg
    }

    /// `context` is `[B, N_ctx, d_context]`; the design batch is `B`.
    pub fn design(&self, tape: &mut Tape, p: &Bound, context: Var) -> Result<DesignVars> {
        let shape = tape.shape(context).to_vec();
        match shape[..] {
            [_, n, d] if n >= 1 && d == self.cfg.d_context => {}
            _ => {
                return Err(contract(format!(
                    "context must be [batch, n >= 1, {}], got {shape:?}",
                    self.cfg.d_context
                )))
            }
        }
        let x = self.cross.forward(tape, p, p.get(self.queries), Some(context))?;
        let h = self.norm_ffn.forward(tape, p, x)?;
        let f = self.ffn.forward(tape, p, h)?;
        let x = tape.add(x, f)?;
        let x = self.self_attn.forward(tape, p, x, None)?;
        let h = self.norm_heads.forward(tape, p, x)?;
        let signatures = self.signature_head.forward(tape, p, h)?;
        let codes = self.code_head.forward(tape, p, h)?;
        self.shared.finish(tape, p, signatures, codes)
    }
}

#[derive(Debug, Clone)]
pub enum Generator {
    Unconditional(UnconditionalGenerator),
    Conditional(ConditionalGenerator),
}

impl Generator {
    pub fn is_conditional(&self) -> bool {
        matches!(self, Generator::Conditional(_))
    }

    /// Builds the design; `context` is required exactly in conditional mode.
    pub fn design(&self, tape: &mut Tape, p: &Bound, context: Option<Var>) -> Result<DesignVars> {
        match (self, context) {
            (Generator::Unconditional(g), None) => g.design(tape, p),
            (Generator::Conditional(g), Some(c)) => g.design(tape, p, c),
            (Generator::Unconditional(_), Some(_)) => Err(contract("unconditional generator takes no context")),
            (Generator::Conditional(_), None) => Err(contract("conditional generator needs a context")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIMS: DesignDims = DesignDims {
        processors: 5,
        readouts: 2,
        d_sig: 4,
        d_code: 6,
        d_model: 8,
    };

    fn cond_cfg() -> ConditionalConfig {
        ConditionalConfig {
            d_query: 8,
            d_context: 6,
            heads: 2,
            ffn_hidden: 12,
        }
    }

    #[test]
    fn unconditional_design_is_deterministic() {
        let mut store = ParamStore::new();
        let g = UnconditionalGenerator::new(&mut store, DIMS, &mut ChaCha8Rng::seed_from_u64(1));
        let run = || {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let d = g.design(&mut tape, &p).unwrap();
            d.to_design(&tape, 0)
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.processors.len(), 5);
        assert_eq!(a.readouts.len(), 2);
        assert_eq!(a.processors[0].initial_state.len(), 8);
    }

    #[test]
    fn zero_mlp_gives_bias_states() {
        let mut store = ParamStore::new();
        let g = UnconditionalGenerator::new(&mut store, DIMS, &mut ChaCha8Rng::seed_from_u64(2));
        let mlp = g.state_mlp().clone();
        for id in [mlp.first.w, mlp.first.b, mlp.second.w] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
        *store.get_mut(mlp.second.b) = Tensor::new(vec![8], bias.clone()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let d = g.design(&mut tape, &p).unwrap().to_design(&tape, 0);
        for m in d.processors.iter().chain(&d.readouts) {
            assert_eq!(m.initial_state, bias);
        }
    }

    #[test]
    fn descriptor_parameter_count_at_large_scale() {
        let mut store = ParamStore::new();
        let dims = DesignDims {
            processors: 320,
            readouts: 1,
            d_sig: 64,
            d_code: 384,
            d_model: 4,
        };
        let g = UnconditionalGenerator::new(&mut store, dims, &mut ChaCha8Rng::seed_from_u64(3));
        let n = store.get(g.proc_signatures).len() + store.get(g.proc_codes).len();
        assert_eq!(n, 320 * (64 + 384));
    }

    fn conditional_designs(context: &Tensor) -> (CircuitDesign, CircuitDesign) {
        let mut store = ParamStore::new();
        let g = ConditionalGenerator::new(&mut store, DIMS, cond_cfg(), &mut ChaCha8Rng::seed_from_u64(4));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let c = tape.constant(context.clone());
        let d = g.design(&mut tape, &p, c).unwrap();
        (d.to_design(&tape, 0), d.to_design(&tape, 1))
    }

    #[test]
    fn conditional_design_depends_on_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx = Tensor::randn(&[2, 3, 6], 1.0, &mut rng);
        let (a, b) = conditional_designs(&ctx);
        let diff = a
            .processor_signatures()
            .max_abs_diff(&b.processor_signatures());
        assert!(diff > 1e-6);
        assert_eq!(a.processor_signatures().shape(), &[5, 4]);
        assert_eq!(a.processor_codes().shape(), &[5, 6]);
        assert_eq!(a.readouts, b.readouts);
    }

    #[test]
    fn conditional_design_shape_ignores_context_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [1, 7] {
            let (a, _) = conditional_designs(&Tensor::randn(&[2, n, 6], 1.0, &mut rng));
            assert_eq!(a.processor_signatures().shape(), &[5, 4]);
        }
    }

    #[test]
    fn conditional_design_is_a_set_function_of_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| Tensor::randn(&[6], 1.0, &mut rng).into_data()).collect();
        let order = [2, 0, 3, 1];
        let mut data = rows.concat();
        data.extend(order.iter().flat_map(|&i| rows[i].clone()));
        let (a, b) = conditional_designs(&Tensor::new(vec![2, 4, 6], data).unwrap());
        assert!(a.processor_signatures().max_abs_diff(&b.processor_signatures()) < 1e-10);
        assert!(a.processor_codes().max_abs_diff(&b.processor_codes()) < 1e-10);
    }

    #[test]
    fn repeated_token_context_is_deterministic() {
        let row = [0.3, -0.2, 0.1, 0.9, -1.0, 0.5];
        let ctx = Tensor::new(vec![2, 3, 6], row.repeat(6)).unwrap();
        let (a, b) = conditional_designs(&ctx);
        assert_eq!(a, b);
    }

    #[test]
    fn empty_or_missing_context_is_rejected() {
        let mut store = ParamStore::new();
        let g = Generator::Conditional(ConditionalGenerator::new(
            &mut store,
            DIMS,
            cond_cfg(),
            &mut ChaCha8Rng::seed_from_u64(8),
        ));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let empty = tape.constant(Tensor::zeros(&[1, 0, 6]));
        assert!(g.design(&mut tape, &p, Some(empty)).is_err());
        assert!(g.design(&mut tape, &p, None).is_err());
    }
}
