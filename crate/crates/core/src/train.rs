//! Optimization: loss composition, AdamW, warmup plus cosine schedule and
//! the training loop.
//!
//! All randomness comes from one seed split into ChaCha streams, so a run is
//! reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, NacError, Result};
use crate::graph::{graph_regularizer, PriorMatrix};
use crate::model::{Batch, NacModel};
use crate::params::ParamStore;
use crate::tasks::{Example, TaskConfig};
use crate::tensor::{Tape, Var};

pub const STREAM_INIT: u64 = 0;
pub const STREAM_DATA: u64 = 1;
pub const STREAM_KERNEL: u64 = 2;
pub const STREAM_VALID: u64 = 3;
pub const STREAM_EVAL: u64 = 4;

/// Independent generator `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    /// Learning rate at step 0 of the warmup.
    pub warmup_from: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub lambda_graph: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_size: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Stop once validation accuracy reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            steps: 5000,
            peak_lr: 1e-3,
            min_lr: 1e-5,
            warmup_from: 1e-6,
            warmup_steps: 200,
            weight_decay: 0.05,
            lambda_graph: 1.0,
            seed: 0,
            eval_every: 250,
            eval_size: 512,
            clip_norm: 1.0,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(contract("steps, batch_size, eval_every and eval_size must be positive"));
        }
        if self.warmup_steps >= self.steps {
            return Err(contract(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        let lrs = [self.peak_lr, self.min_lr, self.warmup_from];
        if lrs.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(contract("learning rates must be positive"));
        }
        if self.weight_decay < 0.0 || self.lambda_graph < 0.0 || self.clip_norm < 0.0 {
            return Err(contract("weight_decay, lambda_graph and clip_norm must be non-negative"));
        }
        if let Some(a) = self.stop_at_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(contract(format!("stop_at_accuracy {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Linear warmup from `warmup_from` to `peak_lr`, then cosine decay reaching
/// `min_lr` at `steps`.
pub fn cosine_lr(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        let t = step as f64 / cfg.warmup_steps as f64;
        return cfg.warmup_from + (cfg.peak_lr - cfg.warmup_from) * t;
    }
    let span = (cfg.steps - cfg.warmup_steps) as f64;
    let t = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    /// One update from the `grad` fields of `store`. Parameters without a
    /// gradient still count as a zero gradient for the moments.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decays() { weight_decay } else { 0.0 };
            let grad = p.tensor.grad.take();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                data[i] -= lr * (mh / (vh.sqrt() + self.eps) + decay * data[i]);
            }
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = &mut p.tensor.grad {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Loss {
    pub total: Var,
    pub cross_entropy: Var,
    pub graph: Option<Var>,
    pub sigma: Option<Vec<usize>>,
}

/// Cross-entropy plus `lambda_graph` times the graph regularizer. The
/// regularizer is skipped when `link_probs` or `prior` is absent, or when
/// `lambda_graph` is zero.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    link_probs: Option<Var>,
    prior: Option<&PriorMatrix>,
    lambda_graph: f64,
) -> Result<Loss> {
    let classes = tape.shape(logits).get(1).copied().unwrap_or(0);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(contract(format!("label {bad} outside {classes} classes")));
    }
    let ce = tape.cross_entropy(logits, labels)?;
    match (link_probs, prior) {
        (Some(p), Some(prior)) if lambda_graph > 0.0 => {
            let (g, sigma) = graph_regularizer(tape, p, prior)?;
            let weighted = tape.scale(g, lambda_graph);
            let total = tape.add(ce, weighted)?;
            Ok(Loss {
                total,
                cross_entropy: ce,
                graph: Some(g),
                sigma: Some(sigma),
            })
        }
        _ => Ok(Loss {
            total: ce,
            cross_entropy: ce,
            graph: None,
            sigma: None,
        }),
    }
}

/// One JSON-lines record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub l_graph: Option<f64>,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<StepMetrics>,
    /// Validation accuracy at the last evaluation.
    pub final_accuracy: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|m| m.loss).collect()
    }
}

/// Fixed validation examples for a seed.
pub fn validation_set(task: &TaskConfig, cfg: &TrainConfig) -> Vec<Example> {
    let mut rng = stream_rng(cfg.seed, STREAM_VALID);
    (0..cfg.eval_size).map(|_| task.sample(&mut rng)).collect()
}

/// Validation accuracy with a freshly seeded evaluation stream, so repeated
/// evaluations of the same parameters agree.
pub fn evaluate(model: &NacModel, examples: &[Example], seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, STREAM_EVAL);
    model.accuracy(examples, 128, &mut rng, &model.eval_options())
}

fn link_prob_summary(tape: &Tape, p: Var) -> String {
    let v = tape.value(p);
    let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
    format!(
        "link probabilities: {} entries, {} non-finite, min {min:.3e}, max {max:.3e}, mean {mean:.3e}",
        v.len(),
        v.len() - finite.len()
    )
}

/// Trains `model` on freshly sampled task data. `on_step` sees every record
/// after it is complete; records with `accuracy` set mark evaluation points.
pub fn train(
    model: &mut NacModel,
    task: &TaskConfig,
    prior: Option<&PriorMatrix>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics, &NacModel) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    task.validate()?;
    if task.classes() != model.cfg.executor.classes {
        return Err(contract(format!(
            "task has {} classes, model {}",
            task.classes(),
            model.cfg.executor.classes
        )));
    }
    let valid = validation_set(task, cfg);
    let mut data_rng = stream_rng(cfg.seed, STREAM_DATA);
    let mut kernel_rng = stream_rng(cfg.seed, STREAM_KERNEL);
    let mut opt = AdamW::new(&model.store);
    let regularize = !model.is_conditional();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut final_accuracy = 0.0;
    let mut stopped_early = false;
    for step in 0..cfg.steps {
        let examples: Vec<Example> = (0..cfg.batch_size).map(|_| task.sample(&mut data_rng)).collect();
        let batch = Batch::new(&examples)?;
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &batch, &mut kernel_rng, &Default::default())?;
        let p = regularize.then_some(out.exec.link_probs);
        let loss = total_loss(&mut tape, out.exec.logits, &batch.labels, p, prior, cfg.lambda_graph)?;
        let value = tape.item(loss.total);
        if !value.is_finite() {
            return Err(NacError::NonFinite(format!(
                "loss {value} at step {step}; {}",
                link_prob_summary(&tape, out.exec.link_probs)
            )));
        }
        tape.backward(loss.total)?;
        model.store.zero_grad();
        model.store.accumulate_grads(&tape, &bound);
        let grad_norm = clip_grad_norm(&mut model.store, cfg.clip_norm);
        let lr = cosine_lr(cfg, step);
        opt.update(&mut model.store, lr, cfg.weight_decay);

        let last = step + 1 == cfg.steps;
        let accuracy = if (step + 1) % cfg.eval_every == 0 || last {
            let a = evaluate(model, &valid, cfg.seed)?;
            final_accuracy = a;
            Some(a)
        } else {
            None
        };
        let record = StepMetrics {
            step,
            loss: value,
            lr,
            l_graph: loss.graph.map(|g| tape.item(g)),
            grad_norm,
            accuracy,
        };
        on_step(&record, model)?;
        history.push(record);
        if let (Some(a), Some(target)) = (accuracy, cfg.stop_at_accuracy) {
            if a >= target && !last {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        steps_run: history.len(),
        history,
        final_accuracy,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            steps: 1000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            min_lr: 1e-5,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(&cfg, 0), cfg.warmup_from);
        assert!((cosine_lr(&cfg, 100) - 1e-3).abs() < 1e-18);
        assert!((cosine_lr(&cfg, 1000) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(&cfg, 550) - (1e-3 + 1e-5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap(), ParamKind::Weight);
        store.get_mut(id).grad = Some(vec![1.0]);
        let mut opt = AdamW::new(&store);
        opt.update(&mut store, 0.1, 0.0);
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2, 2], 0.3), ParamKind::Weight);
        store.get_mut(id).grad = Some(vec![0.0; 4]);
        let mut opt = AdamW::new(&store);
        opt.update(&mut store, 0.1, 0.0);
        assert_eq!(store.get(id).data(), &[0.3; 4]);
    }

    #[test]
    fn decay_skips_signatures_codes_and_vectors() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[2, 2], 1.0), ParamKind::Weight);
        let b = store.add("b", Tensor::full(&[2], 1.0), ParamKind::Weight);
        let s = store.add("s", Tensor::full(&[1, 2, 2], 1.0), ParamKind::Signature);
        let c = store.add("c", Tensor::full(&[1, 2, 2], 1.0), ParamKind::Code);
        let mut opt = AdamW::new(&store);
        opt.update(&mut store, 0.1, 0.5);
        assert!((store.get(w).data()[0] - 0.95).abs() < 1e-15);
        for id in [b, s, c] {
            assert!(store.get(id).data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn clipping_rescales_to_the_cap() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::zeros(&[2]), ParamKind::Weight);
        store.get_mut(a).grad = Some(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = store.get(a).grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 10]));
        let loss = total_loss(&mut tape, logits, &[0, 4, 9], None, None, 1.0).unwrap();
        assert!((tape.item(loss.total) - 10f64.ln()).abs() < 1e-12);
        assert!(total_loss(&mut tape, logits, &[10], None, None, 1.0).is_err());
    }

    #[test]
    fn regularizer_vanishes_at_the_prior() {
        use crate::graph::{sample_prior, Graphon, GraphonFamily};
        let prior = sample_prior(Graphon::default_for(GraphonFamily::PlantedPartition), 8).unwrap();
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 2]));
        let p = tape.constant(prior.p0.clone());
        let with = total_loss(&mut tape, logits, &[0, 1], Some(p), Some(&prior), 1.0).unwrap();
        let without = total_loss(&mut tape, logits, &[0, 1], None, None, 0.0).unwrap();
        assert_eq!(tape.item(with.total), tape.item(without.total));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = TrainConfig::default();
        assert!(base.validate().is_ok());
        assert!(TrainConfig { warmup_steps: base.steps, ..base }.validate().is_err());
        assert!(TrainConfig { peak_lr: 0.0, ..base }.validate().is_err());
        assert!(TrainConfig { stop_at_accuracy: Some(1.5), ..base }.validate().is_err());
    }
}
