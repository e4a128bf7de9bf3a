//! Inference-time sparsification: dropping weakly connected processor
//! modules and eliminating weak edges, with accuracy and cost sweeps.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::{contract, Result};
use crate::executor::{flop_estimate, ForwardOptions};
use crate::model::{Batch, NacModel};
use crate::tasks::Example;
use crate::tensor::Tensor;
use crate::train::{stream_rng, STREAM_EVAL};

/// Row sums of a square link-probability matrix.
pub fn module_importance(p: &Tensor) -> Result<Vec<f64>> {
    let s = p.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(contract(format!("importance needs a square matrix, got {s:?}")));
    }
    Ok((0..s[0]).map(|i| p.row(i).iter().sum()).collect())
}

/// Module indices from least to most important; ties go to the lower index
/// first.
pub fn drop_order(importance: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]).then(a.cmp(&b)));
    order
}

/// Sorted indices kept after dropping the `k` least important modules.
pub fn retained_after_drop(importance: &[f64], k: usize) -> Result<Vec<usize>> {
    let u = importance.len();
    if k >= u {
        return Err(contract(format!("cannot drop {k} of {u} modules")));
    }
    let mut keep = drop_order(importance).split_off(k);
    keep.sort_unstable();
    Ok(keep)
}

/// Sorted indices kept after dropping `k` modules chosen uniformly at random.
pub fn random_retained(modules: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k >= modules {
        return Err(contract(format!("cannot drop {k} of {modules} modules")));
    }
    let mut keep = sample(rng, modules, modules - k).into_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Forward options for `model` with its `k` least important processors
/// removed.
pub fn drop_modules(model: &NacModel, k: usize) -> Result<ForwardOptions> {
    let q = module_importance(&model.link_probabilities(None)?)?;
    Ok(ForwardOptions {
        active: Some(retained_after_drop(&q, k)?),
        ..model.eval_options()
    })
}

/// Symmetric 0/1 mask zeroing the smallest `fraction` of off-diagonal link
/// probabilities, counted over unordered pairs. The diagonal is kept.
pub fn eliminate_edges(p: &Tensor, fraction: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(contract(format!("edge fraction {fraction} outside [0, 1]")));
    }
    let s = p.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(contract(format!("edge elimination needs a square matrix, got {s:?}")));
    }
    let u = s[0];
    let mut pairs: Vec<(usize, usize)> = (0..u).flat_map(|i| (i + 1..u).map(move |j| (i, j))).collect();
    pairs.sort_by(|a, b| {
        p.at(&[a.0, a.1])
            .total_cmp(&p.at(&[b.0, b.1]))
            .then(a.cmp(b))
    });
    let cut = (fraction * pairs.len() as f64).round() as usize;
    let mut mask = Tensor::ones(&[u, u]);
    for &(i, j) in &pairs[..cut] {
        mask.set(&[i, j], 0.0);
        mask.set(&[j, i], 0.0);
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchedulePoint {
    /// Drop this many processors by importance.
    Modules(usize),
    /// Eliminate this fraction of edges.
    Edges(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub dropped: usize,
    pub edge_fraction: f64,
    pub retained: Vec<usize>,
    pub accuracy: f64,
    pub flops: u64,
    pub seconds_per_sample: f64,
}

/// Accuracy of `model` on `examples` under `opts`, timing batches of 64
/// after one warmup batch.
pub fn timed_accuracy(model: &NacModel, examples: &[Example], opts: &ForwardOptions, seed: u64) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(contract("pruning sweep needs examples"));
    }
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let chunks: Vec<&[Example]> = examples.chunks(64).collect();
    let mut correct = 0;
    let mut timed = 0;
    let mut seconds = 0.0;
    for (i, part) in chunks.iter().enumerate() {
        let batch = Batch::new(part)?;
        let start = Instant::now();
        let pred = model.predict(&batch, &mut rng, opts)?;
        if i > 0 || chunks.len() == 1 {
            seconds += start.elapsed().as_secs_f64();
            timed += part.len();
        }
        correct += pred.iter().zip(&batch.labels).filter(|(a, b)| a == b).count();
    }
    Ok((correct as f64 / examples.len() as f64, seconds / timed as f64))
}

/// One report per schedule point, evaluated in order. Importance comes from
/// the unconditional design.
pub fn prune_sweep(model: &NacModel, examples: &[Example], schedule: &[SchedulePoint], seed: u64) -> Result<Vec<PruneReport>> {
    if model.is_conditional() {
        return Err(contract("pruning sweeps need an unconditional model"));
    }
    let p = model.link_probabilities(None)?;
    let q = module_importance(&p)?;
    let cfg = model.cfg.executor;
    let tokens = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    let mut reports = Vec::with_capacity(schedule.len());
    for point in schedule {
        let (dropped, fraction, opts) = match *point {
            SchedulePoint::Modules(k) => {
                let keep = retained_after_drop(&q, k)?;
                let opts = ForwardOptions {
                    active: Some(keep),
                    ..model.eval_options()
                };
                (k, 0.0, opts)
            }
            SchedulePoint::Edges(f) => {
                let opts = ForwardOptions {
                    edge_mask: Some(eliminate_edges(&p, f)?),
                    ..model.eval_options()
                };
                (0, f, opts)
            }
        };
        let (accuracy, seconds_per_sample) = timed_accuracy(model, examples, &opts, seed)?;
        let retained = opts.active.clone().unwrap_or_else(|| (0..cfg.processors).collect());
        reports.push(PruneReport {
            dropped,
            edge_fraction: fraction,
            flops: flop_estimate(&cfg, tokens, retained.len()).total(),
            retained,
            accuracy,
            seconds_per_sample,
        });
    }
    Ok(reports)
}

/// CSV with columns dropped, retained, accuracy, flops, seconds_per_sample,
/// edge_fraction. Retained ids are joined with `;`.
pub fn write_report_csv(path: &Path, reports: &[PruneReport]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "dropped,retained,accuracy,flops,seconds_per_sample,edge_fraction")?;
    for r in reports {
        let ids: Vec<String> = r.retained.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{},{},{},{},{:e},{}",
            r.dropped,
            ids.join(";"),
            r.accuracy,
            r.flops,
            r.seconds_per_sample,
            r.edge_fraction
        )?;
    }
    out.flush()?;
    Ok(())
}
