//! JSON run configurations.

use std::path::{Path, PathBuf};

use obim_core::bench::BenchConfig;
use obim_core::calib::{ModelSpec, MomentPolicy};
use obim_core::merge::{MergeOrder, MergePlan, Method, OrderPolicy};
use obim_core::saliency::RatioBasis;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

const RATIO_SUM_SLACK: f64 = 1e-9;

/// Reads a JSON config, reporting parse errors with the path of the
/// offending field.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new("io", format!("cannot read config {}: {e}", path.display())))?;
    parse_json(&text)
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let err = CliError::new("config_parse", e.inner().to_string());
        if field == "." {
            err
        } else {
            err.at(field)
        }
    })
}

/// Resolves `p` against the directory holding the config file.
pub fn resolve(config_dir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        config_dir.join(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub path: String,
    /// Retention fraction; `1/K` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderConfig {
    pub policy: OrderPolicy,
    /// Visiting order as 0-based model indices; `0..K` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<Vec<usize>>,
}

impl Default for OrderConfig {
    fn default() -> Self {
        OrderConfig {
            policy: OrderPolicy::Rotation,
            sequence: None,
        }
    }
}

fn default_lambda() -> f64 {
    1.0
}

fn default_drop_p() -> f64 {
    0.5
}

/// Configuration of `merge` and `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub base_path: String,
    pub models: Vec<ModelEntry>,
    pub method: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_drop_p")]
    pub drop_p: f64,
    #[serde(default)]
    pub order: OrderConfig,
    #[serde(default)]
    pub seed: u64,
    pub output_path: String,
    /// Layer structure; required by the OBM-based methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ModelSpec>,
    /// Where the merge report CSV goes; stdout when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<String>,
    #[serde(default)]
    pub ratio_basis: RatioBasis,
    #[serde(default)]
    pub moment_policy: MomentPolicy,
    #[serde(default)]
    pub global_magnitude: bool,
}

fn non_empty(field: String, value: &str) -> CliResult<()> {
    if value.trim().is_empty() {
        return Err(CliError::config(field, "must not be empty"));
    }
    Ok(())
}

impl RunConfig {
    pub fn method(&self) -> CliResult<Method> {
        self.method
            .parse()
            .map_err(|e: obim_core::Error| CliError::from(e).at("method"))
    }

    /// Checks every field and returns the plan to execute.
    pub fn validate(&self) -> CliResult<MergePlan> {
        let method = self.method()?;
        non_empty("base_path".into(), &self.base_path)?;
        non_empty("output_path".into(), &self.output_path)?;
        if let Some(r) = &self.report_path {
            non_empty("report_path".into(), r)?;
        }
        let k = self.models.len();
        if k == 0 {
            return Err(CliError::config("models", "at least one model is required"));
        }
        let mut ratios = Vec::with_capacity(k);
        for (i, m) in self.models.iter().enumerate() {
            non_empty(format!("models[{i}].path"), &m.path)?;
            let r = m.ratio.unwrap_or(1.0 / k as f64);
            if !(0.0..=1.0).contains(&r) {
                return Err(CliError::config(
                    format!("models[{i}].ratio"),
                    format!("{r} is outside [0, 1]"),
                ));
            }
            ratios.push(r);
            if method.needs_calibration() {
                match &m.stats_path {
                    Some(p) => non_empty(format!("models[{i}].stats_path"), p)?,
                    None => {
                        return Err(CliError::new(
                            "missing_calibration",
                            format!("method {method} needs activation statistics for every model"),
                        )
                        .at(format!("models[{i}].stats_path")))
                    }
                }
            }
        }
        if method.is_iterative() {
            let sum: f64 = ratios.iter().sum();
            if sum > 1.0 + RATIO_SUM_SLACK {
                return Err(CliError::new(
                    "ratio_sum",
                    format!("ratios sum to {sum}, iterative merging needs a sum of at most 1"),
                )
                .at("models"));
            }
        }
        if method.needs_calibration() && self.spec.is_none() {
            return Err(CliError::new("missing_calibration", format!("method {method} needs a model spec")).at("spec"));
        }
        if !self.lambda.is_finite() {
            return Err(CliError::config("lambda", "must be finite"));
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(CliError::config("drop_p", format!("{} is outside [0, 1)", self.drop_p)));
        }
        let order = match &self.order.sequence {
            Some(seq) => MergeOrder::new(seq.clone(), self.order.policy)
                .map_err(|e| CliError::config("order.sequence", e.to_string()))?,
            None => MergeOrder::sequential(k, self.order.policy),
        };
        if order.len() != k {
            return Err(CliError::config(
                "order.sequence",
                format!("has {} entries for {k} models", order.len()),
            ));
        }
        let plan = MergePlan {
            method,
            ratios,
            lambda: self.lambda,
            drop_p: self.drop_p,
            order,
            seed: self.seed,
            ratio_basis: self.ratio_basis,
            moment_policy: self.moment_policy,
            global_magnitude: self.global_magnitude,
        };
        plan.validate(k).map_err(|e| CliError::from(e).or_at("models"))?;
        Ok(plan)
    }

    /// The configuration with every default made explicit.
    pub fn effective(&self) -> CliResult<RunConfig> {
        let plan = self.validate()?;
        let mut out = self.clone();
        out.method = plan.method.to_string();
        for (m, r) in out.models.iter_mut().zip(&plan.ratios) {
            m.ratio = Some(*r);
        }
        out.order.sequence = Some(plan.order.order().to_vec());
        Ok(out)
    }
}

/// Configuration of `stats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    pub spec: ModelSpec,
    pub weights_path: String,
    /// Checkpoint holding an `inputs` tensor of shape `[N, input_dim]`.
    pub inputs_path: String,
    pub output_path: String,
}

impl StatsConfig {
    pub fn validate(&self) -> CliResult<()> {
        non_empty("weights_path".into(), &self.weights_path)?;
        non_empty("inputs_path".into(), &self.inputs_path)?;
        non_empty("output_path".into(), &self.output_path)
    }
}

/// Configuration of `bench`: a benchmark plus where its report goes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRunConfig {
    #[serde(flatten)]
    pub bench: BenchConfig,
    /// Report CSV; stdout when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
}

impl BenchRunConfig {
    pub fn validate(&self) -> CliResult<()> {
        let k = self.bench.suite.tasks;
        if k == 0 {
            return Err(CliError::config("suite.tasks", "at least one task is required"));
        }
        if let Some(r) = &self.bench.ratios {
            if r.len() != k {
                return Err(CliError::config("ratios", format!("{} ratios for {k} tasks", r.len())));
            }
        }
        if let Some(p) = &self.output_path {
            non_empty("output_path".into(), p)?;
        }
        for (i, &m) in self.bench.methods.iter().enumerate() {
            self.bench
                .plan(m)
                .map_err(|e| CliError::from(e).at(format!("methods[{i}]")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json() -> &'static str {
        r#"{
            "base_path": "base.safetensors",
            "models": [
                {"path": "a.safetensors", "ratio": 0.4},
                {"path": "b.safetensors", "ratio": 0.45},
                {"path": "c.safetensors", "ratio": 0.1}
            ],
            "method": "TIES+IM",
            "output_path": "out.safetensors"
        }"#
    }

    #[test]
    fn accepts_sub_unit_ratio_sum() {
        let cfg: RunConfig = parse_json(base_json()).unwrap();
        let plan = cfg.validate().unwrap();
        assert_eq!(plan.ratios, vec![0.4, 0.45, 0.1]);
    }

    #[test]
    fn rejects_ratio_sum_above_one() {
        let mut cfg: RunConfig = parse_json(base_json()).unwrap();
        cfg.models.truncate(2);
        cfg.models[0].ratio = Some(0.6);
        cfg.models[1].ratio = Some(0.6);
        let e = cfg.validate().unwrap_err();
        assert_eq!(e.code, "ratio_sum");
        assert_eq!(e.field.as_deref(), Some("models"));
    }

    #[test]
    fn default_ratios_are_one_over_k() {
        for k in 1..9 {
            let mut cfg: RunConfig = parse_json(base_json()).unwrap();
            cfg.models = (0..k)
                .map(|i| ModelEntry {
                    path: format!("m{i}"),
                    ratio: None,
                    stats_path: None,
                })
                .collect();
            assert!(cfg.validate().is_ok(), "k={k}");
        }
    }

    #[test]
    fn unavailable_methods_fail_validation() {
        for name in ["DELLA", "TALL-Mask", "PCB"] {
            let mut cfg: RunConfig = parse_json(base_json()).unwrap();
            cfg.method = name.into();
            let e = cfg.validate().unwrap_err();
            assert_eq!(e.code, "unavailable_method");
            assert_eq!(e.field.as_deref(), Some("method"));
        }
    }

    #[test]
    fn field_paths_are_reported() {
        let mut cfg: RunConfig = parse_json(base_json()).unwrap();
        cfg.models[1].ratio = Some(1.5);
        assert_eq!(cfg.validate().unwrap_err().field.as_deref(), Some("models[1].ratio"));
        let mut cfg: RunConfig = parse_json(base_json()).unwrap();
        cfg.order.sequence = Some(vec![0, 0, 1]);
        assert_eq!(cfg.validate().unwrap_err().field.as_deref(), Some("order.sequence"));
        let mut cfg: RunConfig = parse_json(base_json()).unwrap();
        cfg.method = "OBIM".into();
        assert_eq!(
            cfg.validate().unwrap_err().field.as_deref(),
            Some("models[0].stats_path")
        );

        let e = parse_json::<RunConfig>(&base_json().replace("0.45", "\"x\"")).unwrap_err();
        assert_eq!(e.code, "config_parse");
        assert_eq!(e.field.as_deref(), Some("models[1].ratio"));
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg: RunConfig = parse_json(base_json()).unwrap();
        let eff = cfg.effective().unwrap();
        let text = serde_json::to_string_pretty(&eff).unwrap();
        let back: RunConfig = parse_json(&text).unwrap();
        assert_eq!(back, eff);
        assert_eq!(back.validate().unwrap(), cfg.validate().unwrap());
        assert_eq!(back.effective().unwrap(), eff);
    }
}
