//! Merging engines.
//!
//! * Iterative merging: per tensor, models take turns claiming their
//!   top-scoring coordinates among those not yet claimed, so each coordinate
//!   of the merged delta comes from at most one model.
//! * Disjoint mean (TIES aggregation), DARE drop-and-rescale, and plain task
//!   arithmetic as baselines.
//! * [`run_merge`] composes these into the named methods.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{hessian_diag_with, ActivationStats, ModelSpec, MomentPolicy};
use crate::error::{Error, Result};
use crate::rng::{model_seed, CounterRng};
use crate::saliency::{
    global_rank_magnitude_scores, magnitude_scores, obm_scores, select_top, trim_topk_with, RatioBasis, SaliencyMap,
};
use crate::taskvec::{apply, compute_task_vector, sum_masked, Mask, MergeMask, TaskVector};
use crate::tensorstore::{validate_compat, Tensor, TensorMap};

/// Slack allowed on `Σ ratios ≤ 1` for sums like `3 × (1/3)`.
const RATIO_SUM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    TaskArithmetic,
    Ties,
    Dare,
    TiesObm,
    TiesIm,
    Obim,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::TaskArithmetic,
        Method::Ties,
        Method::Dare,
        Method::TiesObm,
        Method::TiesIm,
        Method::Obim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::TaskArithmetic => "TA",
            Method::Ties => "TIES",
            Method::Dare => "DARE",
            Method::TiesObm => "TIES+OBM",
            Method::TiesIm => "TIES+IM",
            Method::Obim => "OBIM",
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, Method::TiesIm | Method::Obim)
    }

    pub fn needs_calibration(self) -> bool {
        matches!(self, Method::TiesObm | Method::Obim)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unavailable = |reason: &str| Error::UnavailableMethod {
            method: s.to_string(),
            reason: reason.to_string(),
        };
        match s.trim().to_ascii_uppercase().as_str() {
            "TA" | "TASK_ARITHMETIC" | "TASK-ARITHMETIC" => Ok(Method::TaskArithmetic),
            "TIES" => Ok(Method::Ties),
            "DARE" => Ok(Method::Dare),
            "TIES+OBM" => Ok(Method::TiesObm),
            "TIES+IM" => Ok(Method::TiesIm),
            "OBIM" => Ok(Method::Obim),
            "DELLA" => Err(unavailable(
                "its magnitude-to-drop-probability mapping is not specified precisely enough to reproduce",
            )),
            "TALL-MASK" | "TALL_MASK" | "TALLMASK" => Err(unavailable(
                "its consensus-mask threshold rule is not specified precisely enough to reproduce",
            )),
            "PCB" => Err(unavailable(
                "its parameter competition balancing rule is not implemented",
            )),
            _ => Err(Error::InvalidArgument(format!(
                "unknown merge method `{s}` (expected one of TA, TIES, DARE, TIES+OBM, TIES+IM, OBIM)"
            ))),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderPolicy {
    /// Left-rotate the visiting order once per tensor.
    Rotation,
    /// Same order for every tensor.
    Fixed,
}

/// Visiting order of the models (0-based indices) plus how it evolves
/// across tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOrder {
    order: Vec<usize>,
    policy: OrderPolicy,
}

impl MergeOrder {
    pub fn new(order: Vec<usize>, policy: OrderPolicy) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &o in &order {
            if o >= order.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::InvalidArgument(format!(
                    "merge order {order:?} is not a permutation of 0..{}",
                    order.len()
                )));
            }
        }
        Ok(MergeOrder { order, policy })
    }

    pub fn sequential(k: usize, policy: OrderPolicy) -> Self {
        MergeOrder {
            order: (0..k).collect(),
            policy,
        }
    }

    /// Fixed order with `model` visited first, the rest ascending.
    pub fn model_first(model: usize, k: usize) -> Result<Self> {
        let order = std::iter::once(model).chain((0..k).filter(|&m| m != model)).collect();
        MergeOrder::new(order, OrderPolicy::Fixed)
    }

    /// Fixed order with `model` visited last, the rest ascending.
    pub fn model_last(model: usize, k: usize) -> Result<Self> {
        let order = (0..k).filter(|&m| m != model).chain(std::iter::once(model)).collect();
        MergeOrder::new(order, OrderPolicy::Fixed)
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn policy(&self) -> OrderPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Order used for the tensor at position `index` in name order.
    pub fn for_tensor(&self, index: usize) -> Vec<usize> {
        match self.policy {
            OrderPolicy::Fixed => self.order.clone(),
            OrderPolicy::Rotation => {
                let mut o = self.order.clone();
                if !o.is_empty() {
                    let shift = index % o.len();
                    o.rotate_left(shift);
                }
                o
            }
        }
    }
}

/// `[o1, o2, …, oK] → [o2, …, oK, o1]`.
pub fn rotate_order(order: &MergeOrder) -> MergeOrder {
    let mut o = order.order.clone();
    if !o.is_empty() {
        o.rotate_left(1);
    }
    MergeOrder {
        order: o,
        policy: order.policy,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub method: Method,
    /// Retention fraction per model.
    pub ratios: Vec<f64>,
    /// Task-arithmetic scaling.
    pub lambda: f64,
    /// DARE drop probability.
    pub drop_p: f64,
    pub order: MergeOrder,
    pub seed: u64,
    pub ratio_basis: RatioBasis,
    pub moment_policy: MomentPolicy,
    /// TIES+IM: rank-normalise magnitudes across the whole task vector.
    pub global_magnitude: bool,
}

impl MergePlan {
    /// Defaults for `k` models: ratios `1/k`, rotation order, λ = 1.
    pub fn new(method: Method, k: usize) -> Self {
        MergePlan {
            method,
            ratios: vec![1.0 / k.max(1) as f64; k],
            lambda: 1.0,
            drop_p: 0.0,
            order: MergeOrder::sequential(k, OrderPolicy::Rotation),
            seed: 0,
            ratio_basis: RatioBasis::Total,
            moment_policy: MomentPolicy::MeanOfSquares,
            global_magnitude: false,
        }
    }

    pub fn with_ratios(mut self, ratios: Vec<f64>) -> Self {
        self.ratios = ratios;
        self
    }

    pub fn with_order(mut self, order: MergeOrder) -> Self {
        self.order = order;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_drop_p(mut self, drop_p: f64) -> Self {
        self.drop_p = drop_p;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::InvalidArgument("nothing to merge".into()));
        }
        if self.ratios.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{} ratios given for {k} models",
                self.ratios.len()
            )));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::InvalidArgument(format!("ratio {r} is outside [0, 1]")));
        }
        if self.method.is_iterative() {
            check_ratio_sum(&self.ratios)?;
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(Error::InvalidArgument(format!(
                "drop probability {} is outside [0, 1)",
                self.drop_p
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda {} is not finite", self.lambda)));
        }
        if self.order.len() != k {
            return Err(Error::InvalidArgument(format!(
                "merge order has {} entries for {k} models",
                self.order.len()
            )));
        }
        Ok(())
    }
}

fn check_ratio_sum(ratios: &[f64]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if sum > 1.0 + RATIO_SUM_SLACK {
        return Err(Error::RatioSum { sum });
    }
    Ok(())
}

fn check_shared_base(deltas: &[TaskVector]) -> Result<&TaskVector> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one task vector".into()))?;
    for d in &deltas[1..] {
        if d.base_fingerprint() != first.base_fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: first.base_fingerprint(),
                found: d.base_fingerprint(),
            });
        }
        validate_compat(&[first.deltas(), d.deltas()])?;
    }
    Ok(first)
}

/// Builds the per-model disjoint masks of iterative merging.
pub fn iterative_masks(
    deltas: &[TaskVector],
    saliencies: &[SaliencyMap],
    ratios: &[f64],
    order: &MergeOrder,
    basis: RatioBasis,
) -> Result<Vec<MergeMask>> {
    let first = check_shared_base(deltas)?;
    let k = deltas.len();
    if saliencies.len() != k || ratios.len() != k || order.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{k} task vectors, {} saliency maps, {} ratios, order of {}",
            saliencies.len(),
            ratios.len(),
            order.len()
        )));
    }
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidArgument(format!("ratio {r} is outside [0, 1]")));
    }
    check_ratio_sum(ratios)?;

    let names: Vec<(&String, &Tensor)> = first.iter().collect();
    let mut score_tensors = Vec::with_capacity(names.len());
    for (name, t) in &names {
        let per_model = saliencies
            .iter()
            .map(|s| {
                let st = s
                    .get(name)
                    .ok_or_else(|| Error::MissingTensor { name: (*name).clone() })?;
                if st.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        name: (*name).clone(),
                        expected: t.shape().to_vec(),
                        found: st.shape().to_vec(),
                    });
                }
                Ok(st)
            })
            .collect::<Result<Vec<_>>>()?;
        score_tensors.push(per_model);
    }

    // The schedule is a pure function of the tensor's position.
    let schedule: Vec<Vec<usize>> = (0..names.len()).map(|i| order.for_tensor(i)).collect();

    let per_tensor: Vec<Vec<Mask>> = (0..names.len())
        .into_par_iter()
        .map(|i| {
            let shape = names[i].1.shape();
            let mut merged = Mask::empty(shape);
            let mut masks = vec![Mask::empty(shape); k];
            for &m in &schedule[i] {
                let picked = select_top(score_tensors[i][m], ratios[m], Some(merged.bits()), basis);
                merged.union_with(&picked);
                masks[m] = picked;
            }
            masks
        })
        .collect();

    let mut out = vec![MergeMask::new(); k];
    for ((name, _), masks) in names.iter().zip(per_tensor) {
        for (m, mask) in masks.into_iter().enumerate() {
            out[m].insert((*name).clone(), mask);
        }
    }
    Ok(out)
}

/// Iterative merging of `deltas` into `base`; returns the merged checkpoint
/// and the disjoint per-model masks.
pub fn iterative_merge(
    base: &TensorMap,
    deltas: &[TaskVector],
    saliencies: &[SaliencyMap],
    plan: &MergePlan,
) -> Result<(TensorMap, Vec<MergeMask>)> {
    plan.validate(deltas.len())?;
    // The method in the plan may be non-iterative; the sum bound applies anyway.
    check_ratio_sum(&plan.ratios)?;
    let masks = iterative_masks(deltas, saliencies, &plan.ratios, &plan.order, plan.ratio_basis)?;
    let merged_delta = sum_masked(deltas, &masks)?;
    Ok((apply(base, &merged_delta)?, masks))
}

/// TIES aggregation: per coordinate, elect the sign of the summed deltas and
/// average the nonzero deltas carrying that sign. A zero sum elects `+`.
pub fn disjoint_mean(deltas: &[TaskVector]) -> Result<TaskVector> {
    let first = check_shared_base(deltas)?;
    let names: Vec<(&String, &Tensor)> = first.iter().collect();
    let merged: Vec<(String, Tensor)> = names
        .par_iter()
        .map(|(name, t)| {
            let srcs: Vec<&[f32]> = deltas.iter().map(|d| d.get(name).expect("validated").data()).collect();
            let data = (0..t.numel())
                .map(|i| {
                    let total: f64 = srcs.iter().map(|s| f64::from(s[i])).sum();
                    let positive = total >= 0.0;
                    let (acc, n) = srcs
                        .iter()
                        .map(|s| s[i])
                        .filter(|&v| if positive { v > 0.0 } else { v < 0.0 })
                        .fold((0.0f64, 0usize), |(a, n), v| (a + f64::from(v), n + 1));
                    if n == 0 {
                        0.0
                    } else {
                        (acc / n as f64) as f32
                    }
                })
                .collect();
            (
                (*name).clone(),
                Tensor::new(t.shape().to_vec(), data).expect("same shape"),
            )
        })
        .collect();
    Ok(TaskVector::from_parts(
        first.base_fingerprint(),
        merged.into_iter().collect(),
    ))
}

/// Keep-mask of DARE: coordinate `i` of tensor `name` survives iff its
/// counter-based uniform draw is at least `drop_p`.
pub fn dare_mask(delta: &TaskVector, drop_p: f64, seed: u64) -> Result<MergeMask> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::InvalidArgument(format!(
            "drop probability {drop_p} is outside [0, 1)"
        )));
    }
    let mut out = MergeMask::new();
    for (name, t) in delta.iter() {
        let rng = CounterRng::for_tensor(seed, name);
        let bits = (0..t.numel()).map(|i| rng.uniform(i as u64) >= drop_p).collect();
        out.insert(name.clone(), Mask::new(t.shape().to_vec(), bits)?);
    }
    Ok(out)
}

/// Zeroes each coordinate with probability `drop_p` and rescales survivors
/// by `1 / (1 − drop_p)`, so the expectation equals the input.
pub fn dare_drop_rescale(delta: &TaskVector, drop_p: f64, seed: u64) -> Result<TaskVector> {
    let keep = dare_mask(delta, drop_p, seed)?;
    let factor = 1.0 / (1.0 - drop_p);
    let deltas = delta
        .iter()
        .map(|(name, t)| {
            let bits = keep.get(name).expect("same names").bits();
            let data = t
                .data()
                .iter()
                .zip(bits)
                .map(|(&v, &b)| if b { (f64::from(v) * factor) as f32 } else { 0.0 })
                .collect();
            (name.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
        })
        .collect();
    Ok(TaskVector::from_parts(delta.base_fingerprint(), deltas))
}

/// `λ · Σ_k δ_k`, summed in f64.
pub fn task_arithmetic_delta(deltas: &[TaskVector], lambda: f64) -> Result<TaskVector> {
    if !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda {lambda} is not finite")));
    }
    let first = check_shared_base(deltas)?;
    let out = first
        .iter()
        .map(|(name, t)| {
            let srcs: Vec<&[f32]> = deltas.iter().map(|d| d.get(name).expect("validated").data()).collect();
            let data = (0..t.numel())
                .map(|i| (srcs.iter().map(|s| f64::from(s[i])).sum::<f64>() * lambda) as f32)
                .collect();
            (name.clone(), Tensor::new(t.shape().to_vec(), data).expect("same shape"))
        })
        .collect();
    Ok(TaskVector::from_parts(first.base_fingerprint(), out))
}

/// `θ_base + λ · Σ_k δ_k`.
pub fn task_arithmetic(base: &TensorMap, deltas: &[TaskVector], lambda: f64) -> Result<TensorMap> {
    apply(base, &task_arithmetic_delta(deltas, lambda)?)
}

/// Keeps the masked coordinates of `delta`, zeroing the rest.
pub fn mask_delta(delta: &TaskVector, mask: &MergeMask) -> Result<TaskVector> {
    let deltas = delta
        .iter()
        .map(|(name, t)| {
            let m = mask
                .get(name)
                .ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
            if m.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: m.shape().to_vec(),
                });
            }
            let data = t
                .data()
                .iter()
                .zip(m.bits())
                .map(|(&v, &b)| if b { v } else { 0.0 })
                .collect();
            Ok((name.clone(), Tensor::new(t.shape().to_vec(), data)?))
        })
        .collect::<Result<TensorMap>>()?;
    Ok(TaskVector::from_parts(delta.base_fingerprint(), deltas))
}

/// Calibration needed by the OBM scorer: the layer structure and one set of
/// activation statistics per model, in model order.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub spec: ModelSpec,
    pub stats: Vec<ActivationStats>,
}

/// Bookkeeping of one merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeAudit {
    pub method: Method,
    /// Coordinates retained from each model before aggregation.
    pub kept: Vec<usize>,
    /// Coordinates per model.
    pub total: usize,
    /// Coordinates retained by two or more models.
    pub overlap: usize,
}

impl MergeAudit {
    pub fn disjoint(&self) -> bool {
        self.overlap == 0
    }
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub merged: TensorMap,
    pub merged_delta: TaskVector,
    pub deltas: Vec<TaskVector>,
    /// Per-model retention masks (all-ones for task arithmetic).
    pub masks: Vec<MergeMask>,
    pub audit: MergeAudit,
}

fn overlap_count(masks: &[MergeMask]) -> usize {
    let Some(first) = masks.first() else { return 0 };
    first
        .iter()
        .map(|(name, m)| {
            (0..m.bits().len())
                .filter(|&i| {
                    masks
                        .iter()
                        .filter(|mm| mm.get(name).expect("aligned").bits()[i])
                        .count()
                        > 1
                })
                .count()
        })
        .sum()
}

fn scores_for(
    method: Method,
    plan: &MergePlan,
    deltas: &[TaskVector],
    calib: Option<&Calibration>,
) -> Result<Vec<SaliencyMap>> {
    if method.needs_calibration() {
        let calib = calib.ok_or_else(|| {
            Error::MissingCalibration(format!("method {method} needs activation statistics for every model"))
        })?;
        if calib.stats.len() != deltas.len() {
            return Err(Error::MissingCalibration(format!(
                "{} statistics sets for {} models",
                calib.stats.len(),
                deltas.len()
            )));
        }
        deltas
            .iter()
            .zip(&calib.stats)
            .enumerate()
            .map(|(k, (d, s))| {
                let h = hessian_diag_with(s, plan.moment_policy)?;
                obm_scores(d, &calib.spec, &h, model_seed(plan.seed, k))
            })
            .collect()
    } else if plan.global_magnitude && method.is_iterative() {
        Ok(deltas.iter().map(global_rank_magnitude_scores).collect())
    } else {
        Ok(deltas.iter().map(magnitude_scores).collect())
    }
}

/// Runs one named method end to end.
pub fn run_merge(
    plan: &MergePlan,
    base: &TensorMap,
    models: &[TensorMap],
    calib: Option<&Calibration>,
) -> Result<MergeOutcome> {
    plan.validate(models.len())?;
    let deltas = models
        .iter()
        .map(|m| compute_task_vector(m, base))
        .collect::<Result<Vec<_>>>()?;
    let total = base.total_elements();

    let (merged_delta, masks) = match plan.method {
        Method::TaskArithmetic => {
            let d = task_arithmetic_delta(&deltas, plan.lambda)?;
            (d, deltas.iter().map(MergeMask::full_like).collect())
        }
        Method::Ties | Method::TiesObm => {
            let scores = scores_for(plan.method, plan, &deltas, calib)?;
            let masks = scores
                .iter()
                .zip(&plan.ratios)
                .map(|(s, &r)| trim_topk_with(s, r, None, plan.ratio_basis))
                .collect::<Result<Vec<_>>>()?;
            let trimmed = deltas
                .iter()
                .zip(&masks)
                .map(|(d, m)| mask_delta(d, m))
                .collect::<Result<Vec<_>>>()?;
            (disjoint_mean(&trimmed)?, masks)
        }
        Method::Dare => {
            let masks = deltas
                .iter()
                .enumerate()
                .map(|(k, d)| dare_mask(d, plan.drop_p, model_seed(plan.seed, k)))
                .collect::<Result<Vec<_>>>()?;
            let dropped = deltas
                .iter()
                .enumerate()
                .map(|(k, d)| dare_drop_rescale(d, plan.drop_p, model_seed(plan.seed, k)))
                .collect::<Result<Vec<_>>>()?;
            (disjoint_mean(&dropped)?, masks)
        }
        Method::TiesIm | Method::Obim => {
            let scores = scores_for(plan.method, plan, &deltas, calib)?;
            let masks = iterative_masks(&deltas, &scores, &plan.ratios, &plan.order, plan.ratio_basis)?;
            (sum_masked(&deltas, &masks)?, masks)
        }
    };

    let merged = apply(base, &merged_delta)?;
    let audit = MergeAudit {
        method: plan.method,
        kept: masks.iter().map(MergeMask::count).collect(),
        total,
        overlap: overlap_count(&masks),
    };
    Ok(MergeOutcome {
        merged,
        merged_delta,
        deltas,
        masks,
        audit,
    })
}
