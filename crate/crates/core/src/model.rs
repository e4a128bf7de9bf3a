//! A complete NAC: tokenizer embeddings, circuit generator and executor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::executor::{ExecOutput, Executor, ExecutorConfig, ForwardOptions, KernelChoice};
use crate::generator::{
    CircuitDesign, ConditionalConfig, ConditionalGenerator, DesignDims, DesignVars, Generator,
    UnconditionalGenerator,
};
use crate::layers::{link_probability_matrix, Linear};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tasks::{extract_patches, Example, TaskConfig};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unconditional,
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub executor: ExecutorConfig,
    pub mode: Mode,
    pub conditional: ConditionalConfig,
    pub vocab: usize,
    pub max_len: usize,
    /// Width of the positional encoding; token embeddings take the rest of
    /// `d_token`.
    pub d_pos: usize,
    pub context_vocab: usize,
}

impl ModelConfig {
    /// Model sized for a task, with vocabulary, length and class count taken
    /// from it.
    pub fn for_task(task: &TaskConfig, executor: ExecutorConfig, mode: Mode, conditional: ConditionalConfig) -> Self {
        Self {
            executor: ExecutorConfig {
                classes: task.classes(),
                ..executor
            },
            mode,
            conditional,
            vocab: task.vocab(),
            max_len: task.max_len(),
            d_pos: executor.d_token / 2,
            context_vocab: task.context_vocab(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.executor.validate()?;
        if self.d_pos == 0 || self.d_pos >= self.executor.d_token {
            return Err(contract(format!(
                "d_pos {} must lie strictly between 0 and d_token {}",
                self.d_pos, self.executor.d_token
            )));
        }
        if self.vocab == 0 || self.max_len == 0 {
            return Err(contract("vocab and max_len must be positive"));
        }
        if self.mode == Mode::Conditional && self.context_vocab == 0 {
            return Err(contract("conditional mode needs a task with context tokens"));
        }
        Ok(())
    }
}

/// Learned symbol embeddings concatenated with learned positional encodings.
#[derive(Debug, Clone)]
pub struct SymbolEmbedder {
    pub table: ParamId,
    pub positions: ParamId,
}

impl SymbolEmbedder {
    pub fn new(store: &mut ParamStore, vocab: usize, max_len: usize, d_emb: usize, d_pos: usize, rng: &mut impl Rng) -> Self {
        Self {
            table: store.add("embed.table", Tensor::randn(&[vocab, d_emb], 1.0, rng), ParamKind::Weight),
            positions: store.add("embed.positions", Tensor::randn(&[max_len, d_pos], 1.0, rng), ParamKind::Weight),
        }
    }

    /// `[B, N, d_emb + d_pos]` for row-major ids `[B, N]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, ids: &[usize], batch: usize, n: usize) -> Result<Var> {
        let vocab = tape.shape(p.get(self.table))[0];
        let max_len = tape.shape(p.get(self.positions))[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        if n > max_len {
            return Err(contract(format!("sequence of {n} tokens exceeds maximum length {max_len}")));
        }
        let emb = tape.gather(p.get(self.table), 0, ids)?;
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = tape.gather(p.get(self.positions), 0, &pos_ids)?;
        let both = tape.concat_last(&[emb, pos])?;
        let d = tape.shape(both)[1];
        Ok(tape.reshape(both, &[batch, n, d])?)
    }
}

/// Flattened image patches projected linearly, with learned positions.
#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    pub proj: Linear,
    pub positions: ParamId,
    pub patch: usize,
}

impl PatchEmbedder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        patch: usize,
        channels: usize,
        patches: usize,
        d_emb: usize,
        d_pos: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            proj: Linear::new(store, "patch.proj", patch * patch * channels, d_emb, rng),
            positions: store.add("patch.positions", Tensor::randn(&[patches, d_pos], 1.0, rng), ParamKind::Weight),
            patch,
        }
    }

    /// Projected patches without positions, `[B, n, d_emb]`.
    pub fn project(&self, tape: &mut Tape, p: &Bound, images: &[Tensor]) -> Result<Var> {
        let flat: Vec<Tensor> = images.iter().map(|im| extract_patches(im, self.patch)).collect::<Result<_>>()?;
        let first = flat.first().ok_or_else(|| contract("no images"))?.shape().to_vec();
        if flat.iter().any(|f| f.shape() != first) {
            return Err(contract("images in a batch must share a shape"));
        }
        let data: Vec<f64> = flat.iter().flat_map(|f| f.data().iter().copied()).collect();
        let x = tape.constant(Tensor::new(vec![images.len(), first[0], first[1]], data)?);
        self.proj.forward(tape, p, x)
    }

    /// `[B, n, d_emb + d_pos]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, images: &[Tensor]) -> Result<Var> {
        let e = self.project(tape, p, images)?;
        let (b, n) = (tape.shape(e)[0], tape.shape(e)[1]);
        let max = tape.shape(p.get(self.positions))[0];
        if n > max {
            return Err(contract(format!("{n} patches exceed {max} learned positions")));
        }
        let ids: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = tape.gather(p.get(self.positions), 0, &ids)?;
        let d = tape.shape(e)[2];
        let e = tape.reshape(e, &[b * n, d])?;
        let both = tape.concat_last(&[e, pos])?;
        let dt = tape.shape(both)[1];
        Ok(tape.reshape(both, &[b, n, dt])?)
    }
}

/// Examples padded into rectangular id arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    /// `[size, len]`, padded with id 0.
    pub tokens: Vec<usize>,
    /// `None` when every example fills `len`.
    pub lengths: Option<Vec<usize>>,
    pub context_len: usize,
    pub contexts: Option<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(contract("empty batch"));
        }
        let len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(contract("examples need at least one token"));
        }
        let mut tokens = vec![0; examples.len() * len];
        for (b, e) in examples.iter().enumerate() {
            tokens[b * len..b * len + e.tokens.len()].copy_from_slice(&e.tokens);
        }
        let lengths: Vec<usize> = examples.iter().map(|e| e.tokens.len()).collect();
        let lengths = (!lengths.iter().all(|&l| l == len)).then_some(lengths);
        let (context_len, contexts) = match examples[0].context.as_ref().map(Vec::len) {
            Some(cl) => {
                let mut flat = Vec::with_capacity(cl * examples.len());
                for e in examples {
                    match &e.context {
                        Some(c) if c.len() == cl => flat.extend_from_slice(c),
                        _ => return Err(contract("examples in a batch need contexts of equal length")),
                    }
                }
                (cl, Some(flat))
            }
            None => (0, None),
        };
        Ok(Self {
            size: examples.len(),
            len,
            tokens,
            lengths,
            context_len,
            contexts,
            labels: examples.iter().map(|e| e.label).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ModelForward {
    pub exec: ExecOutput,
    pub design: DesignVars,
}

#[derive(Debug, Clone)]
pub struct NacModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    embed: SymbolEmbedder,
    context_table: Option<ParamId>,
    generator: Generator,
    executor: Executor,
}

impl NacModel {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let e = &cfg.executor;
        let embed = SymbolEmbedder::new(&mut store, cfg.vocab, cfg.max_len, e.d_token - cfg.d_pos, cfg.d_pos, rng);
        let dims = DesignDims {
            processors: e.processors,
            readouts: e.readouts,
            d_sig: e.d_sig,
            d_code: e.d_code,
            d_model: e.d_model,
        };
        let (generator, context_table) = match cfg.mode {
            Mode::Unconditional => (
                Generator::Unconditional(UnconditionalGenerator::new(&mut store, dims, rng)),
                None,
            ),
            Mode::Conditional => {
                let d = cfg.conditional.d_context;
                let table = store.add(
                    "context.table",
                    Tensor::randn(&[cfg.context_vocab, d], 1.0, rng),
                    ParamKind::Weight,
                );
                (
                    Generator::Conditional(ConditionalGenerator::new(&mut store, dims, cfg.conditional, rng)),
                    Some(table),
                )
            }
        };
        let executor = Executor::new(&mut store, cfg.executor, rng)?;
        Ok(Self {
            cfg,
            store,
            embed,
            context_table,
            generator,
            executor,
        })
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn is_conditional(&self) -> bool {
        self.generator.is_conditional()
    }

    /// Kernel used by evaluation.
    pub fn eval_options(&self) -> ForwardOptions {
        ForwardOptions {
            kernel: KernelChoice::from(self.cfg.executor.kernel.eval_mode),
            ..ForwardOptions::default()
        }
    }

    fn context_var(&self, tape: &mut Tape, p: &Bound, contexts: Option<&[usize]>, batch: usize, len: usize) -> Result<Option<Var>> {
        match (self.context_table, contexts) {
            (Some(table), Some(ids)) => {
                if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.context_vocab) {
                    return Err(contract(format!("context id {bad} outside vocabulary")));
                }
                let rows = tape.gather(p.get(table), 0, ids)?;
                let d = self.cfg.conditional.d_context;
                Ok(Some(tape.reshape(rows, &[batch, len, d])?))
            }
            (Some(_), None) => Err(contract("conditional model needs context tokens")),
            (None, _) => Ok(None),
        }
    }

    /// Design on the tape. `contexts` is `[batch, len]` in conditional mode.
    pub fn design_vars(
        &self,
        tape: &mut Tape,
        p: &Bound,
        contexts: Option<&[usize]>,
        batch: usize,
        len: usize,
    ) -> Result<DesignVars> {
        let ctx = self.context_var(tape, p, contexts, batch, len)?;
        self.generator.design(tape, p, ctx)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        rng: &mut impl Rng,
        opts: &ForwardOptions,
    ) -> Result<ModelForward> {
        let design = self.design_vars(tape, p, batch.contexts.as_deref(), batch.size, batch.context_len)?;
        let tokens = self.embed.embed(tape, p, &batch.tokens, batch.size, batch.len)?;
        let exec = self
            .executor
            .forward(tape, p, tokens, batch.lengths.as_deref(), &design, rng, opts)?;
        Ok(ModelForward { exec, design })
    }

    /// Logits `[B, classes]` with frozen parameters.
    pub fn logits(&self, batch: &Batch, rng: &mut impl Rng, opts: &ForwardOptions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, batch, rng, opts)?;
        Ok(tape.tensor(out.exec.logits))
    }

    pub fn predict(&self, batch: &Batch, rng: &mut impl Rng, opts: &ForwardOptions) -> Result<Vec<usize>> {
        let logits = self.logits(batch, rng, opts)?;
        let c = self.cfg.executor.classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Fraction of correctly classified examples, evaluated in chunks.
    pub fn accuracy(&self, examples: &[Example], chunk: usize, rng: &mut impl Rng, opts: &ForwardOptions) -> Result<f64> {
        if examples.is_empty() {
            return Err(contract("accuracy over zero examples"));
        }
        let mut correct = 0;
        for part in examples.chunks(chunk.max(1)) {
            let batch = Batch::new(part)?;
            let pred = self.predict(&batch, rng, opts)?;
            correct += pred.iter().zip(&batch.labels).filter(|(a, b)| a == b).count();
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    /// Plain-value design; `context` selects the design in conditional mode.
    pub fn design(&self, context: Option<&[usize]>) -> Result<CircuitDesign> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let len = context.map_or(0, <[usize]>::len);
        let d = self.design_vars(&mut tape, &p, context, 1, len)?;
        Ok(d.to_design(&tape, 0))
    }

    /// Processor link probabilities `[U_p, U_p]` of a design.
    pub fn link_probabilities(&self, context: Option<&[usize]>) -> Result<Tensor> {
        let s = self.design(context)?.processor_signatures();
        link_probability_matrix(&s, &s, self.cfg.executor.kernel.epsilon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_exec() -> ExecutorConfig {
        ExecutorConfig {
            layers: 2,
            processors: 6,
            readouts: 2,
            d_model: 16,
            d_sig: 4,
            d_code: 8,
            d_token: 8,
            ffn_hidden: 16,
            ..ExecutorConfig::desk()
        }
    }

    #[test]
    fn symbol_embedding_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = SymbolEmbedder::new(&mut store, 256, 4, 3, 2, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = e.embed(&mut tape, &p, &[65], 1, 1).unwrap();
        let v = tape.value(x);
        assert_eq!(&v[..3], store.get(e.table).row(65));
        assert_eq!(&v[3..], store.get(e.positions).row(0));
        assert!(e.embed(&mut tape, &p, &[300], 1, 1).is_err());
    }

    #[test]
    fn patch_embedding_counts_and_constant_images() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = PatchEmbedder::new(&mut store, 4, 1, 4, 6, 2, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let img = Tensor::full(&[8, 8, 1], 0.5);
        let x = e.project(&mut tape, &p, &[img.clone()]).unwrap();
        assert_eq!(tape.shape(x), &[1, 4, 6]);
        let v = tape.value(x);
        assert!((1..4).all(|i| v[i * 6..(i + 1) * 6] == v[..6]));
        let full = e.embed(&mut tape, &p, &[img]).unwrap();
        assert_eq!(tape.shape(full), &[1, 4, 8]);
    }

    #[test]
    fn batches_pad_ragged_examples() {
        let ex = |t: Vec<usize>| Example {
            tokens: t,
            context: None,
            label: 0,
        };
        let b = Batch::new(&[ex(vec![1, 2, 3]), ex(vec![4])]).unwrap();
        assert_eq!(b.tokens, vec![1, 2, 3, 4, 0, 0]);
        assert_eq!(b.lengths, Some(vec![3, 1]));
        let b = Batch::new(&[ex(vec![1, 2]), ex(vec![3, 4])]).unwrap();
        assert_eq!(b.lengths, None);
    }

    #[test]
    fn conditional_model_runs_end_to_end() {
        let task = TaskConfig::two_rule(6);
        let cfg = ModelConfig::for_task(
            &task,
            small_exec(),
            Mode::Conditional,
            ConditionalConfig {
                d_query: 8,
                d_context: 8,
                heads: 2,
                ffn_hidden: 8,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = NacModel::new(cfg, &mut rng).unwrap();
        let examples: Vec<Example> = (0..5).map(|_| task.sample(&mut rng)).collect();
        let batch = Batch::new(&examples).unwrap();
        let logits = model.logits(&batch, &mut rng, &ForwardOptions::default()).unwrap();
        assert_eq!(logits.shape(), &[5, 2]);
        let a = model.link_probabilities(Some(&[0])).unwrap();
        let b = model.link_probabilities(Some(&[1])).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        assert!(model.link_probabilities(None).is_err());
    }

    #[test]
    fn unconditional_model_on_listops() {
        let task = TaskConfig {
            kind: TaskKind::Listops,
            length: 20,
            ..TaskConfig::default()
        };
        let cfg = ModelConfig::for_task(&task, small_exec(), Mode::Unconditional, ConditionalConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = NacModel::new(cfg, &mut rng).unwrap();
        let examples: Vec<Example> = (0..7).map(|_| task.sample(&mut rng)).collect();
        let acc = model
            .accuracy(&examples, 3, &mut rng, &model.eval_options())
            .unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(model.link_probabilities(None).unwrap().shape(), &[6, 6]);
    }
}
