//! Subcommand implementations. Each returns a summary so tests can drive
//! them without spawning a process.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nac_core::checkpoint;
use nac_core::generator::CircuitDesign;
use nac_core::graph::{export_matching, graph_regularizer_value, sample_prior, solve_assignment, assignment_cost, write_matrix_csv, PriorMatrix};
use nac_core::model::NacModel;
use nac_core::pruning::{prune_sweep, write_report_csv, PruneReport, SchedulePoint};
use nac_core::tensor::Tensor;
use nac_core::train::{evaluate, stream_rng, train, validation_set, STREAM_INIT};
use nac_core::NacError;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Run(#[from] NacError),
    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(NacError::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => 2,
            CliError::Config(_) => 3,
            CliError::Run(_) | CliError::Usage(_) => 1,
        }
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

/// Config from `path` (desk defaults when absent) with an optional seed
/// override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            require_file(p)?;
            RunConfig::from_toml_str(&std::fs::read_to_string(p)?)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

pub fn new_model(cfg: &RunConfig) -> Result<NacModel, CliError> {
    Ok(NacModel::new(cfg.model_config(), &mut stream_rng(cfg.train.seed, STREAM_INIT))?)
}

pub fn load_model(cfg: &RunConfig, checkpoint_path: &Path) -> Result<NacModel, CliError> {
    require_file(checkpoint_path)?;
    let mut model = new_model(cfg)?;
    checkpoint::load_into(&mut model.store, checkpoint_path)?;
    Ok(model)
}

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoint.nacc")
}

fn prior_for(cfg: &RunConfig, model: &NacModel) -> Result<Option<PriorMatrix>, CliError> {
    if model.is_conditional() {
        return Ok(None);
    }
    Ok(Some(sample_prior(cfg.prior, cfg.executor.processors)?))
}

/// Context sequences whose designs are exported: none for unconditional
/// models, one single-token context per value otherwise.
fn design_contexts(cfg: &RunConfig, model: &NacModel) -> Vec<Option<Vec<usize>>> {
    if model.is_conditional() {
        (0..cfg.task.context_vocab()).map(|c| Some(vec![c])).collect()
    } else {
        vec![None]
    }
}

fn suffix(context: &Option<Vec<usize>>) -> String {
    match context {
        Some(c) => format!("_ctx{}", c.iter().map(usize::to_string).collect::<Vec<_>>().join("-")),
        None => String::new(),
    }
}

pub fn write_design_csv(path: &Path, design: &CircuitDesign) -> Result<(), CliError> {
    let mut out = BufWriter::new(File::create(path)?);
    let first = design.processors.first().ok_or_else(|| CliError::Usage("empty design".into()))?;
    let mut header = vec!["kind".to_string(), "module".to_string()];
    header.extend((0..first.signature.len()).map(|i| format!("sig_{i}")));
    header.extend((0..first.code.len()).map(|i| format!("code_{i}")));
    writeln!(out, "{}", header.join(","))?;
    for (kind, mods) in [("processor", &design.processors), ("readout", &design.readouts)] {
        for (u, m) in mods.iter().enumerate() {
            let mut row = vec![kind.to_string(), u.to_string()];
            row.extend(m.signature.iter().chain(&m.code).map(|v| v.to_string()));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_accuracy: f64,
    pub steps_run: usize,
    pub final_loss: f64,
}

/// Trains from scratch and writes the effective config, metrics, checkpoints
/// and design exports into the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    let mut model = new_model(cfg)?;
    let prior = prior_for(cfg, &model)?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let ckpt = default_checkpoint(cfg);
    let outcome = train(&mut model, &cfg.task, prior.as_ref(), &cfg.train, |record, m| {
        let line = serde_json::to_string(record).map_err(|e| NacError::Contract(e.to_string()))?;
        writeln!(metrics, "{line}")?;
        if record.accuracy.is_some() {
            metrics.flush()?;
            checkpoint::save(&m.store, &ckpt)?;
        }
        Ok(())
    })?;
    metrics.flush()?;

    for ctx in design_contexts(cfg, &model) {
        let s = suffix(&ctx);
        let design = model.design(ctx.as_deref())?;
        write_design_csv(&dir.join(format!("design{s}.csv")), &design)?;
        write_matrix_csv(&dir.join(format!("link_probs{s}.csv")), &model.link_probabilities(ctx.as_deref())?)?;
    }
    if let Some(prior) = &prior {
        let p = model.link_probabilities(None)?;
        let sigma = solve_assignment(&assignment_cost(&p, &prior.p0)?)?;
        let matching = dir.join("matching");
        std::fs::create_dir_all(&matching)?;
        export_matching(&matching, &p, prior, &sigma)?;
    }
    Ok(TrainSummary {
        final_accuracy: outcome.final_accuracy,
        steps_run: outcome.steps_run,
        final_loss: outcome.history.last().map_or(f64::NAN, |m| m.loss),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    /// Absent for conditional models, which are not regularized.
    pub l_graph: Option<f64>,
}

/// Validation accuracy on the same examples and evaluation stream that
/// training used.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<EvalSummary, CliError> {
    let model = load_model(cfg, checkpoint_path)?;
    let valid = validation_set(&cfg.task, &cfg.train);
    let accuracy = evaluate(&model, &valid, cfg.train.seed)?;
    let l_graph = match prior_for(cfg, &model)? {
        Some(prior) => Some(graph_regularizer_value(&model.link_probabilities(None)?, &prior)?),
        None => None,
    };
    Ok(EvalSummary { accuracy, l_graph })
}

/// Module-dropping sweep on the validation examples; writes
/// `prune_report.csv` into the output directory.
pub fn cmd_prune(cfg: &RunConfig, checkpoint_path: &Path, schedule: &[usize]) -> Result<Vec<PruneReport>, CliError> {
    let model = load_model(cfg, checkpoint_path)?;
    let valid = validation_set(&cfg.task, &cfg.train);
    let points: Vec<SchedulePoint> = schedule.iter().map(|&k| SchedulePoint::Modules(k)).collect();
    let reports = prune_sweep(&model, &valid, &points, cfg.train.seed)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_report_csv(&cfg.output_dir.join("prune_report.csv"), &reports)?;
    Ok(reports)
}

/// Default sweep: 0, U/8, 2U/8, ... up to 7U/8 dropped modules.
pub fn default_schedule(processors: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..8).map(|i| i * processors / 8).collect();
    s.dedup();
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphStats {
    pub threshold: f64,
    pub edges: usize,
    pub degrees: Vec<usize>,
    pub min_degree: usize,
    pub max_degree: usize,
    pub mean_degree: f64,
}

/// Unordered pairs `i < j` with `P_ij > threshold`, and the resulting
/// degree statistics.
pub fn threshold_graph(p: &Tensor, threshold: f64) -> (Vec<(usize, usize, f64)>, GraphStats) {
    let u = p.shape()[0];
    let mut edges = Vec::new();
    let mut degrees = vec![0; u];
    for i in 0..u {
        for j in i + 1..u {
            let v = p.at(&[i, j]);
            if v > threshold {
                edges.push((i, j, v));
                degrees[i] += 1;
                degrees[j] += 1;
            }
        }
    }
    let stats = GraphStats {
        threshold,
        edges: edges.len(),
        min_degree: degrees.iter().copied().min().unwrap_or(0),
        max_degree: degrees.iter().copied().max().unwrap_or(0),
        mean_degree: degrees.iter().sum::<usize>() as f64 / u.max(1) as f64,
        degrees,
    };
    (edges, stats)
}

/// Writes `edges{ctx}.csv` (columns i, j, p) and `degree_stats{ctx}.json`
/// for each exported design.
pub fn cmd_export_graph(cfg: &RunConfig, checkpoint_path: &Path, threshold: f64) -> Result<Vec<GraphStats>, CliError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("threshold {threshold} outside [0, 1]")));
    }
    let model = load_model(cfg, checkpoint_path)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut all = Vec::new();
    for ctx in design_contexts(cfg, &model) {
        let s = suffix(&ctx);
        let p = model.link_probabilities(ctx.as_deref())?;
        let (edges, stats) = threshold_graph(&p, threshold);
        let mut out = BufWriter::new(File::create(cfg.output_dir.join(format!("edges{s}.csv")))?);
        writeln!(out, "i,j,p")?;
        for (i, j, v) in &edges {
            writeln!(out, "{i},{j},{v}")?;
        }
        out.flush()?;
        let json = serde_json::to_string_pretty(&stats).map_err(|e| NacError::Contract(e.to_string()))?;
        std::fs::write(cfg.output_dir.join(format!("degree_stats{s}.json")), json)?;
        all.push(stats);
    }
    Ok(all)
}
