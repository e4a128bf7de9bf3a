//! The differentiation tape.
//!
//! Gradient contract: every call to [`Tape::backward`] recomputes gradients of
//! intermediate nodes from scratch and *adds* the result into the persistent
//! gradients of leaf nodes. Calling it twice on the same loss therefore doubles
//! every leaf gradient; [`Tape::zero_grad`] resets them.

use super::kernels::{self, broadcast_shapes, gemm, BroadcastMap};
use super::{gelu, gelu_derivative, logit, numel, sigmoid, Result, Tensor, TensorError, LAYER_NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    Tanh,
    Gelu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    AddScalar {
        a: Var,
    },
    Sum {
        a: Var,
    },
    SumLast {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Geglu {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Gather {
        a: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concrete {
        p: Var,
        tau: f64,
        clamped: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    matmul_flops: u64,
}

/// Probabilities are clamped into `[CONCRETE_CLAMP, 1 - CONCRETE_CLAMP]`
/// before the logit in [`Tape::concrete`].
pub const CONCRETE_CLAMP: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Forward matmul work recorded so far, counting `2*m*k*n` per product.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Pushes a tensor as a leaf; its `requires_grad` flag is honoured.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(true);
        self.leaf(t)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn item(&self, v: Var) -> f64 {
        let d = self.value(v);
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Snapshot of a node as a [`Tensor`], including its gradient if any.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape");
        t.requires_grad = n.requires_grad;
        t.grad = n.grad.clone();
        t
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears gradients of every node.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// Batched matrix product with numpy broadcasting over leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// Matrix product of the (optionally transposed) trailing two axes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let plan = MatMulPlan::new(self.shape(a), self.shape(b), trans_a, trans_b)?;
        let mut out = vec![0.0; numel(&plan.out_shape)];
        self.matmul_flops += 2 * (plan.batch * plan.m * plan.k * plan.n) as u64;
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            if plan.flatten_a() {
                gemm(plan.batch * plan.m, plan.k, plan.n, ad, false, bd, trans_b, &mut out, 0.0);
            } else {
                for (ob, ab, bb) in plan.batches() {
                    gemm(
                        plan.m,
                        plan.k,
                        plan.n,
                        &ad[ab * plan.m * plan.k..],
                        trans_a,
                        &bd[bb * plan.k * plan.n..],
                        trans_b,
                        &mut out[ob * plan.m * plan.n..],
                        0.0,
                    );
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            plan.out_shape,
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let out_shape = broadcast_shapes(name, self.shape(a), self.shape(b))?;
        let ma = BroadcastMap::new(self.shape(a), &out_shape);
        let mb = BroadcastMap::new(self.shape(b), &out_shape);
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let n = numel(&out_shape);
        let out = match kind {
            BinaryKind::Add => broadcast_apply(&ma, &mb, &out_shape, n, ad, bd, |x, y| x + y),
            BinaryKind::Sub => broadcast_apply(&ma, &mb, &out_shape, n, ad, bd, |x, y| x - y),
            BinaryKind::Mul => broadcast_apply(&ma, &mb, &out_shape, n, ad, bd, |x, y| x * y),
            BinaryKind::Div => broadcast_apply(&ma, &mb, &out_shape, n, ad, bd, |x, y| x / y),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Square => |x| x * x,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Gelu => gelu,
        };
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Unary { kind, a }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    /// Exact erf-based GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale { a, factor }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, Op::AddScalar { a }, rg)
    }

    // ------------------------------------------------------------------
    // Reductions and shape manipulation
    // ------------------------------------------------------------------

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&n) = shape.last() else {
            return Err(TensorError::InvalidShape {
                op: "sum_last",
                detail: "rank-0 input".into(),
            });
        };
        let out: Vec<f64> = if n == 0 {
            vec![0.0; numel(&shape[..shape.len() - 1])]
        } else {
            self.nodes[a.0].data.chunks(n).map(|c| c.iter().sum()).collect()
        };
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = 1;
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::SumLast { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape { a }, rg))
    }

    /// Output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of {rank} axes"),
            });
        }
        let (data, shape) = kernels::permute(&self.nodes[a.0].data, self.shape(a), perm);
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            data,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat_last",
            detail: "no inputs".into(),
        })?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Selects `indices` along `axis`; repeated indices are allowed.
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(TensorError::InvalidShape {
                op: "gather",
                detail: format!("indices {indices:?} on axis {axis} of {shape:?}"),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * shape[axis] + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            out,
            Op::Gather {
                a,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // Neural-network primitives
    // ------------------------------------------------------------------

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or(TensorError::InvalidShape {
            op: "softmax_last",
            detail: "rank-0 input".into(),
        })?;
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax_last",
                detail: "empty last axis".into(),
            });
        }
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { a }, rg))
    }

    /// Standardizes the last axis, then applies the optional affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::InvalidShape {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if d == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                detail: "empty last axis".into(),
            });
        }
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = &self.nodes[x.0].data;
        let rows = xd.len() / d;
        let mut normalized = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = rs;
            for (o, v) in normalized[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = normalized.clone();
        if let Some(g) = gain {
            let gd = &self.nodes[g.0].data;
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(gd).for_each(|(o, g)| *o *= g);
            }
        }
        if let Some(b) = bias {
            let bd = &self.nodes[b.0].data;
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
            }
        }
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g)) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Splits the last axis into halves `(a, g)` and returns `a * GELU(g)`.
    pub fn geglu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let two_h = *shape.last().ok_or(TensorError::InvalidShape {
            op: "geglu",
            detail: "rank-0 input".into(),
        })?;
        if two_h % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "geglu",
                detail: format!("last dimension {two_h} is odd"),
            });
        }
        let h = two_h / 2;
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(two_h.max(1))
            .flat_map(|row| (0..h).map(move |i| row[i] * gelu(row[h + i])))
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = h;
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Geglu { a: x }, rg))
    }

    /// Binary Concrete sample `sigmoid((logit(p) + logit(u)) / tau)` with the
    /// supplied uniform draws. The draws are baked into the node, so the
    /// gradient with respect to `p` is the reparameterized one.
    pub fn concrete(&mut self, p: Var, tau: f64, uniforms: &[f64]) -> Result<Var> {
        let pd = &self.nodes[p.0].data;
        if uniforms.len() != pd.len() {
            return Err(TensorError::ShapeMismatch {
                op: "concrete",
                lhs: self.shape(p).to_vec(),
                rhs: vec![uniforms.len()],
            });
        }
        let mut clamped = Vec::with_capacity(pd.len());
        let out: Vec<f64> = pd
            .iter()
            .zip(uniforms)
            .map(|(&pv, &u)| {
                let pc = pv.clamp(CONCRETE_CLAMP, 1.0 - CONCRETE_CLAMP);
                clamped.push(pc != pv);
                sigmoid((logit(pc) + logit(u)) / tau)
            })
            .collect();
        let shape = self.shape(p).to_vec();
        let rg = self.rg(p);
        Ok(self.push(shape, out, Op::Concrete { p, tau, clamped }, rg))
    }

    /// Mean cross-entropy of `logits: [B, C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {c} classes"),
            });
        }
        let mut probs = self.nodes[logits.0].data.clone();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].ln();
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for n in &mut self.nodes[..=loss.0] {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0], vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut self.nodes[v.0], cg);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => self.matmul_backward(*a, *b, *trans_a, *trans_b, g, &mut out),
            Op::Binary { kind, a, b } => self.binary_backward(*kind, *a, *b, &node.shape, g, &mut out),
            Op::Unary { kind, a } => {
                let x = &self.nodes[a.0].data;
                let y = &node.data;
                let d: Vec<f64> = match kind {
                    UnaryKind::Neg => g.iter().map(|g| -g).collect(),
                    UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    UnaryKind::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    UnaryKind::Sqrt => g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect(),
                    UnaryKind::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                    UnaryKind::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    UnaryKind::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    UnaryKind::Gelu => g.iter().zip(x).map(|(g, x)| g * gelu_derivative(*x)).collect(),
                };
                out.push((*a, d));
            }
            Op::Scale { a, factor } => out.push((*a, g.iter().map(|g| g * factor).collect())),
            Op::AddScalar { a } | Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::Sum { a } => out.push((*a, vec![g[0]; self.nodes[a.0].data.len()])),
            Op::SumLast { a } => {
                let n = *self.nodes[a.0].shape.last().expect("rank >= 1");
                let d: Vec<f64> = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, n)).collect();
                out.push((*a, d));
            }
            Op::Permute { a, perm } => {
                let inv = kernels::invert_permutation(perm);
                let (d, _) = kernels::permute(g, &node.shape, &inv);
                out.push((*a, d));
            }
            Op::Softmax { a } => {
                let n = *node.shape.last().expect("rank >= 1");
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(node.data.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - dot);
                    }
                }
                out.push((*a, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = *node.shape.last().expect("rank >= 1");
                let gain_v = gain.map(|gv| &self.nodes[gv.0].data);
                if let Some(gv) = gain {
                    if self.rg(*gv) {
                        let mut dg = vec![0.0; d];
                        for (gr, nr) in g.chunks(d).zip(normalized.chunks(d)) {
                            dg.iter_mut().zip(gr.iter().zip(nr)).for_each(|(o, (g, n))| *o += g * n);
                        }
                        out.push((*gv, dg));
                    }
                }
                if let Some(bv) = bias {
                    if self.rg(*bv) {
                        let mut db = vec![0.0; d];
                        for gr in g.chunks(d) {
                            db.iter_mut().zip(gr).for_each(|(o, g)| *o += g);
                        }
                        out.push((*bv, db));
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dn = vec![0.0; d];
                    for (r, (gr, nr)) in g.chunks(d).zip(normalized.chunks(d)).enumerate() {
                        for j in 0..d {
                            dn[j] = gr[j] * gain_v.map_or(1.0, |gv| gv[j]);
                        }
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Geglu { a } => {
                let h = *node.shape.last().expect("rank >= 1");
                let x = &self.nodes[a.0].data;
                let mut d = vec![0.0; x.len()];
                for ((dr, xr), gr) in d.chunks_mut(2 * h).zip(x.chunks(2 * h)).zip(g.chunks(h)) {
                    for j in 0..h {
                        let (lin, gate) = (xr[j], xr[h + j]);
                        dr[j] = gr[j] * gelu(gate);
                        dr[h + j] = gr[j] * lin * gelu_derivative(gate);
                    }
                }
                out.push((*a, d));
            }
            Op::Concat { parts } => {
                let total = *node.shape.last().expect("rank >= 1");
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = *self.nodes[p.0].shape.last().expect("rank >= 1");
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, d));
                    }
                    offset += w;
                }
            }
            Op::Gather { a, axis, indices } => {
                let shape = &self.nodes[a.0].shape;
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let mut d = vec![0.0; self.nodes[a.0].data.len()];
                let mut src = 0;
                for o in 0..outer {
                    for &idx in indices {
                        let base = (o * shape[*axis] + idx) * inner;
                        d[base..base + inner].iter_mut().zip(&g[src..src + inner]).for_each(|(d, g)| *d += g);
                        src += inner;
                    }
                }
                out.push((*a, d));
            }
            Op::Concrete { p, tau, clamped } => {
                let pd = &self.nodes[p.0].data;
                let d: Vec<f64> = g
                    .iter()
                    .zip(&node.data)
                    .zip(pd.iter().zip(clamped))
                    .map(|((g, k), (pv, &c))| {
                        if c {
                            0.0
                        } else {
                            g * k * (1.0 - k) / (tau * pv * (1.0 - pv))
                        }
                    })
                    .collect();
                out.push((*p, d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.nodes[logits.0].shape[1];
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= scale;
                }
                out.push((*logits, d));
            }
        }
        out
    }

    fn binary_backward(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[f64],
        out: &mut Vec<(Var, Vec<f64>)>,
    ) {
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let ma = BroadcastMap::new(&self.nodes[a.0].shape, out_shape);
        let mb = BroadcastMap::new(&self.nodes[b.0].shape, out_shape);
        let need_a = self.rg(a);
        let need_b = self.rg(b);
        let same_a = matches!(ma, BroadcastMap::Same);
        let same_b = matches!(mb, BroadcastMap::Same);
        // Index of the other operand for every output element, only needed
        // when neither side lines up with the output.
        let needs_other = matches!(kind, BinaryKind::Mul | BinaryKind::Div);
        let mut ia = Vec::new();
        let mut ib = Vec::new();
        if needs_other && !same_a && !same_b {
            ma.for_each(out_shape, |_, j| ia.push(j));
            mb.for_each(out_shape, |_, j| ib.push(j));
        }
        if need_a {
            let mut da = vec![0.0; ad.len()];
            match kind {
                BinaryKind::Add | BinaryKind::Sub => {
                    if same_a {
                        da.copy_from_slice(g);
                    } else {
                        ma.for_each(out_shape, |i, j| da[j] += g[i]);
                    }
                }
                BinaryKind::Mul if same_a => mb.for_each(out_shape, |i, j| da[i] = g[i] * bd[j]),
                BinaryKind::Div if same_a => mb.for_each(out_shape, |i, j| da[i] = g[i] / bd[j]),
                BinaryKind::Mul if same_b => ma.for_each(out_shape, |i, j| da[j] += g[i] * bd[i]),
                BinaryKind::Div if same_b => ma.for_each(out_shape, |i, j| da[j] += g[i] / bd[i]),
                BinaryKind::Mul => ma.for_each(out_shape, |i, j| da[j] += g[i] * bd[ib[i]]),
                BinaryKind::Div => ma.for_each(out_shape, |i, j| da[j] += g[i] / bd[ib[i]]),
            }
            out.push((a, da));
        }
        if need_b {
            let mut db = vec![0.0; bd.len()];
            match kind {
                BinaryKind::Add if same_b => db.copy_from_slice(g),
                BinaryKind::Add => mb.for_each(out_shape, |i, j| db[j] += g[i]),
                BinaryKind::Sub => mb.for_each(out_shape, |i, j| db[j] -= g[i]),
                BinaryKind::Mul if same_b => ma.for_each(out_shape, |i, j| db[i] = g[i] * ad[j]),
                BinaryKind::Mul if same_a => mb.for_each(out_shape, |i, j| db[j] += g[i] * ad[i]),
                BinaryKind::Mul => mb.for_each(out_shape, |i, j| db[j] += g[i] * ad[ia[i]]),
                BinaryKind::Div if same_b => ma.for_each(out_shape, |i, j| {
                    let y = bd[i];
                    db[i] = -g[i] * ad[j] / (y * y)
                }),
                BinaryKind::Div if same_a => mb.for_each(out_shape, |i, j| {
                    let y = bd[j];
                    db[j] -= g[i] * ad[i] / (y * y)
                }),
                BinaryKind::Div => mb.for_each(out_shape, |i, j| {
                    let y = bd[j];
                    db[j] -= g[i] * ad[ia[i]] / (y * y)
                }),
            }
            out.push((b, db));
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        g: &[f64],
        out: &mut Vec<(Var, Vec<f64>)>,
    ) {
        let plan = MatMulPlan::new(self.shape(a), self.shape(b), trans_a, trans_b).expect("validated in forward");
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if self.rg(a) {
            let mut da = vec![0.0; ad.len()];
            if plan.flatten_a() {
                // dA = dY * op(B)^T
                gemm(plan.batch * m, n, k, g, false, bd, !trans_b, &mut da, 0.0);
            } else {
                for (ob, ab, _) in plan.batches() {
                    let bb = plan.b_batch(ob);
                    let gs = &g[ob * m * n..];
                    let bs = &bd[bb * k * n..];
                    let das = &mut da[ab * m * k..];
                    if trans_a {
                        // stored k x m: op(B) * dY^T
                        gemm(k, n, m, bs, trans_b, gs, true, das, 1.0);
                    } else {
                        gemm(m, n, k, gs, false, bs, !trans_b, das, 1.0);
                    }
                }
            }
            out.push((a, da));
        }
        if self.rg(b) {
            let mut db = vec![0.0; bd.len()];
            if plan.flatten_a() {
                let rows = plan.batch * m;
                if trans_b {
                    gemm(n, rows, k, g, true, ad, false, &mut db, 0.0);
                } else {
                    gemm(k, rows, n, ad, true, g, false, &mut db, 0.0);
                }
            } else {
                for (ob, ab, bb) in plan.batches() {
                    let gs = &g[ob * m * n..];
                    let as_ = &ad[ab * m * k..];
                    let dbs = &mut db[bb * k * n..];
                    if trans_b {
                        // stored n x k: dY^T * op(A)
                        gemm(n, m, k, gs, true, as_, trans_a, dbs, 1.0);
                    } else {
                        gemm(k, m, n, as_, !trans_a, gs, false, dbs, 1.0);
                    }
                }
            }
            out.push((b, db));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn broadcast_apply(
    ma: &BroadcastMap,
    mb: &BroadcastMap,
    out_shape: &[usize],
    n: usize,
    ad: &[f64],
    bd: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match (ma, mb) {
        (BroadcastMap::Same, BroadcastMap::Same) => ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect(),
        (BroadcastMap::Same, _) => {
            let mut out = vec![0.0; n];
            mb.for_each(out_shape, |i, j| out[i] = f(ad[i], bd[j]));
            out
        }
        (_, BroadcastMap::Same) => {
            let mut out = vec![0.0; n];
            ma.for_each(out_shape, |i, j| out[i] = f(ad[j], bd[i]));
            out
        }
        _ => {
            let mut ia = Vec::with_capacity(n);
            ma.for_each(out_shape, |_, j| ia.push(j));
            let mut out = vec![0.0; n];
            mb.for_each(out_shape, |i, j| out[i] = f(ad[ia[i]], bd[j]));
            out
        }
    }
}

fn accumulate(node: &mut Node, g: Vec<f64>) {
    match &mut node.grad {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, g)| *e += g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Shape bookkeeping for a (batched) matrix product.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    out_shape: Vec<usize>,
    a_batch_shape: Vec<usize>,
    b_batch_shape: Vec<usize>,
    out_batch_shape: Vec<usize>,
    trans_a: bool,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize], trans_a: bool, trans_b: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "matmul",
                detail: format!("operands need rank >= 2, got {a:?} and {b:?}"),
            });
        }
        let (ra, rb) = (a.len(), b.len());
        let (m, ka) = if trans_a { (a[ra - 1], a[ra - 2]) } else { (a[ra - 2], a[ra - 1]) };
        let (kb, n) = if trans_b { (b[rb - 1], b[rb - 2]) } else { (b[rb - 2], b[rb - 1]) };
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let a_batch_shape = a[..ra - 2].to_vec();
        let b_batch_shape = b[..rb - 2].to_vec();
        let out_batch_shape =
            broadcast_shapes("matmul", &a_batch_shape, &b_batch_shape).map_err(|_| TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            })?;
        let mut out_shape = out_batch_shape.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k: ka,
            n,
            batch: numel(&out_batch_shape),
            out_shape,
            a_batch_shape,
            b_batch_shape,
            out_batch_shape,
            trans_a,
        })
    }

    /// The whole of `a` can be treated as one tall matrix against a shared `b`.
    fn flatten_a(&self) -> bool {
        !self.trans_a && numel(&self.b_batch_shape) == 1 && self.a_batch_shape == self.out_batch_shape
    }

    fn b_batch(&self, ob: usize) -> usize {
        map_batch(ob, &self.out_batch_shape, &self.b_batch_shape)
    }

    /// `(out_batch, a_batch, b_batch)` flat indices.
    fn batches(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.batch).map(move |ob| {
            (
                ob,
                map_batch(ob, &self.out_batch_shape, &self.a_batch_shape),
                map_batch(ob, &self.out_batch_shape, &self.b_batch_shape),
            )
        })
    }
}

fn map_batch(flat: usize, out: &[usize], input: &[usize]) -> usize {
    if out == input {
        return flat;
    }
    let lead = out.len() - input.len();
    let mut rem = flat;
    let mut idx = vec![0; out.len()];
    for d in (0..out.len()).rev() {
        idx[d] = rem % out[d];
        rem /= out[d];
    }
    let mut acc = 0;
    for (i, &d) in input.iter().enumerate() {
        acc = acc * d + if d == 1 { 0 } else { idx[lead + i] };
    }
    acc
}
