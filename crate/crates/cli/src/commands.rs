use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use obim_core::bench::{interference_from_models, report_csv, run_bench, Interference};
use obim_core::calib::{forward_collect, ActivationStats, INPUTS_TENSOR};
use obim_core::merge::{run_merge, Calibration, MergeOutcome};
use obim_core::taskvec::compute_task_vector;
use obim_core::{read_checkpoint, write_checkpoint, TensorMap};

use crate::config::{resolve, BenchRunConfig, RunConfig, StatsConfig};
use crate::error::{CliError, CliResult, Context};

/// Summary of a `stats` run.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsSummary {
    /// `(weight name, input feature count)` per layer.
    pub layers: Vec<(String, usize)>,
    pub sample_count: u64,
}

impl StatsSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, n) in &self.layers {
            let _ = writeln!(s, "{name}: {n} features");
        }
        let _ = writeln!(s, "samples: {}", self.sample_count);
        s
    }
}

pub fn cmd_stats(cfg: &StatsConfig, dir: &Path) -> CliResult<StatsSummary> {
    cfg.validate()?;
    let weights = read_checkpoint(resolve(dir, &cfg.weights_path)).field("weights_path")?;
    let inputs = read_checkpoint(resolve(dir, &cfg.inputs_path)).field("inputs_path")?;
    let x = inputs.require(INPUTS_TENSOR).field("inputs_path")?;
    if x.shape().first() == Some(&0) {
        return Err(CliError::new("invalid_tensor", "calibration inputs are empty").at("inputs_path"));
    }
    let (_, stats) = forward_collect(&cfg.spec, &weights, x).field("spec")?;
    write_checkpoint(&stats.to_tensor_map(), resolve(dir, &cfg.output_path)).field("output_path")?;
    Ok(StatsSummary {
        layers: stats
            .layers()
            .iter()
            .map(|(n, m)| (n.clone(), m.sqmean.len()))
            .collect(),
        sample_count: stats.sample_count(),
    })
}

fn load_models(cfg: &RunConfig, dir: &Path) -> CliResult<(TensorMap, Vec<TensorMap>)> {
    let base = read_checkpoint(resolve(dir, &cfg.base_path)).field("base_path")?;
    let models = cfg
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| read_checkpoint(resolve(dir, &m.path)).field(format!("models[{i}].path")))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((base, models))
}

fn load_calibration(cfg: &RunConfig, dir: &Path) -> CliResult<Option<Calibration>> {
    let Some(spec) = &cfg.spec else { return Ok(None) };
    let mut stats = Vec::with_capacity(cfg.models.len());
    for (i, m) in cfg.models.iter().enumerate() {
        let Some(p) = &m.stats_path else { return Ok(None) };
        let field = format!("models[{i}].stats_path");
        let map = read_checkpoint(resolve(dir, p)).field(field.clone())?;
        stats.push(ActivationStats::from_tensor_map(&map).field(field)?);
    }
    Ok(Some(Calibration {
        spec: spec.clone(),
        stats,
    }))
}

/// Result of a `merge` run.
#[derive(Debug, Clone)]
pub struct MergeRun {
    pub outcome: MergeOutcome,
    pub interference: Interference,
    pub report: String,
    pub output_path: PathBuf,
}

pub const MERGE_REPORT_HEADER: &str =
    "method,model,path,ratio,kept,total,overlap,disjoint,sign_conflict_fraction,deviation_fraction";

fn merge_report(cfg: &RunConfig, outcome: &MergeOutcome, ratios: &[f64], inter: &Interference) -> String {
    let mut s = String::from(MERGE_REPORT_HEADER);
    s.push('\n');
    let a = &outcome.audit;
    for (k, m) in cfg.models.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            a.method,
            k,
            m.path,
            ratios[k],
            a.kept[k],
            a.total,
            a.overlap,
            a.disjoint(),
            inter.sign_conflict_fraction,
            inter.deviation_fraction
        );
    }
    s
}

pub fn cmd_merge(cfg: &RunConfig, dir: &Path) -> CliResult<MergeRun> {
    let plan = cfg.validate()?;
    let (base, models) = load_models(cfg, dir)?;
    let calib = load_calibration(cfg, dir)?;
    let outcome = run_merge(&plan, &base, &models, calib.as_ref()).map_err(|e| CliError::from(e).or_at("models"))?;
    let interference = interference_from_models(&base, &outcome.deltas, &outcome.merged)?;

    let mut merged = outcome.merged.clone();
    merged.set_metadata("merge_method", plan.method.to_string());
    merged.set_metadata("merge_seed", plan.seed.to_string());
    let output_path = resolve(dir, &cfg.output_path);
    write_checkpoint(&merged, &output_path).field("output_path")?;

    let report = merge_report(cfg, &outcome, &plan.ratios, &interference);
    if let Some(p) = &cfg.report_path {
        std::fs::write(resolve(dir, p), &report).map_err(|e| CliError::new("io", e.to_string()).at("report_path"))?;
    }
    Ok(MergeRun {
        outcome,
        interference,
        report,
        output_path,
    })
}

pub const INTERFERENCE_HEADER: &str = "sign_conflict_fraction,deviation_fraction";

/// Interference statistics of the checkpoint at `output_path` against the
/// configured base and models.
pub fn cmd_report(cfg: &RunConfig, dir: &Path) -> CliResult<(Interference, String)> {
    let (base, models) = load_models(cfg, dir)?;
    let merged = read_checkpoint(resolve(dir, &cfg.output_path)).field("output_path")?;
    let deltas = models
        .iter()
        .enumerate()
        .map(|(i, m)| compute_task_vector(m, &base).field(format!("models[{i}].path")))
        .collect::<CliResult<Vec<_>>>()?;
    let r = interference_from_models(&base, &deltas, &merged).field("output_path")?;
    let text = format!(
        "{INTERFERENCE_HEADER}\n{},{}\n",
        r.sign_conflict_fraction, r.deviation_fraction
    );
    if let Some(p) = &cfg.report_path {
        std::fs::write(resolve(dir, p), &text).map_err(|e| CliError::new("io", e.to_string()).at("report_path"))?;
    }
    Ok((r, text))
}

pub fn cmd_bench(cfg: &BenchRunConfig, dir: &Path) -> CliResult<String> {
    cfg.validate()?;
    let result = run_bench(&cfg.bench)?;
    let csv = report_csv(&result.rows, cfg.bench.suite.tasks);
    if let Some(p) = &cfg.output_path {
        std::fs::write(resolve(dir, p), &csv).map_err(|e| CliError::new("io", e.to_string()).at("output_path"))?;
    }
    Ok(csv)
}
