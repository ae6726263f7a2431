//! Per-coordinate importance scores for task vectors and top-fraction trimming.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{HessianDiag, ModelSpec};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::taskvec::{Mask, MergeMask, TaskVector};
use crate::tensorstore::{Tensor, TensorMap};

pub const SCORER_TAG_KEY: &str = "scorer_tag";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    Obm,
    Magnitude,
    Random,
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scorer::Obm => "obm",
            Scorer::Magnitude => "magnitude",
            Scorer::Random => "random",
        })
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "obm" => Ok(Scorer::Obm),
            "magnitude" => Ok(Scorer::Magnitude),
            "random" => Ok(Scorer::Random),
            other => Err(Error::InvalidArgument(format!("unknown scorer tag `{other}`"))),
        }
    }
}

/// Non-negative scores aligned elementwise with a task vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    scores: TensorMap,
    scorer: Scorer,
}

impl SaliencyMap {
    pub fn new(scores: TensorMap, scorer: Scorer) -> Result<Self> {
        for (name, t) in scores.iter() {
            if let Some(i) = t.data().iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidTensor {
                    name: name.clone(),
                    reason: format!("score {} at index {i} is negative or non-finite", t.data()[i]),
                });
            }
        }
        Ok(SaliencyMap { scores, scorer })
    }

    pub fn scorer(&self) -> Scorer {
        self.scorer
    }

    pub fn scores(&self) -> &TensorMap {
        &self.scores
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.scores.get(name)
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = self.scores.clone();
        m.metadata_mut().clear();
        m.set_metadata(SCORER_TAG_KEY, self.scorer.to_string());
        m
    }

    pub fn from_tensor_map(map: TensorMap) -> Result<Self> {
        let tag = map
            .metadata()
            .get(SCORER_TAG_KEY)
            .ok_or_else(|| Error::MalformedHeader(format!("saliency file lacks `{SCORER_TAG_KEY}` metadata")))?
            .parse()?;
        let mut scores = map;
        scores.metadata_mut().clear();
        SaliencyMap::new(scores, tag)
    }
}

fn per_tensor(delta: &TaskVector, f: impl Fn(&str, &Tensor) -> Result<Tensor> + Sync) -> Result<TensorMap> {
    let items: Vec<(&String, &Tensor)> = delta.iter().collect();
    items
        .into_par_iter()
        .map(|(name, t)| Ok((name.clone(), f(name, t)?)))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

fn uniform_scores(seed: u64, name: &str, t: &Tensor) -> Tensor {
    let rng = CounterRng::for_tensor(seed, name);
    t.map_indexed(|i, _| rng.uniform_f32(i as u64))
}

/// Layer-wise OBM saliency `s_ij = ½·h_j·δ_ij²` for linear weights; seeded
/// uniform scores for every other tensor, which amounts to random pruning.
pub fn obm_scores(delta: &TaskVector, spec: &ModelSpec, hessians: &HessianDiag, seed: u64) -> Result<SaliencyMap> {
    let scores = per_tensor(delta, |name, t| {
        if !spec.is_linear_weight(name) {
            return Ok(uniform_scores(seed, name, t));
        }
        let h = hessians
            .get(name)
            .ok_or_else(|| Error::MissingHessian(name.to_string()))?;
        let &[_, cols] = t.shape() else {
            return Err(Error::DimensionMismatch(format!(
                "linear weight `{name}` must be 2-D, found {:?}",
                t.shape()
            )));
        };
        if h.len() != cols {
            return Err(Error::DimensionMismatch(format!(
                "Hessian for `{name}` has {} entries, weight has {cols} input features",
                h.len()
            )));
        }
        Ok(t.map_indexed(|i, d| {
            let d = f64::from(d);
            (0.5 * h[i % cols] * d * d).min(f64::from(f32::MAX)) as f32
        }))
    })?;
    SaliencyMap::new(scores, Scorer::Obm)
}

pub fn magnitude_scores(delta: &TaskVector) -> SaliencyMap {
    let scores = delta.iter().map(|(n, t)| (n.clone(), t.map(f32::abs))).collect();
    SaliencyMap {
        scores,
        scorer: Scorer::Magnitude,
    }
}

pub fn random_scores(delta: &TaskVector, seed: u64) -> SaliencyMap {
    let scores = delta
        .iter()
        .map(|(n, t)| (n.clone(), uniform_scores(seed, n, t)))
        .collect();
    SaliencyMap {
        scores,
        scorer: Scorer::Random,
    }
}

/// Magnitude replaced by its rank among all coordinates of the whole task
/// vector, scaled into (0, 1]. Equal magnitudes share a rank.
pub fn global_rank_magnitude_scores(delta: &TaskVector) -> SaliencyMap {
    let mut all: Vec<f32> = delta
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
        .collect();
    all.sort_by(f32::total_cmp);
    all.dedup();
    let levels = all.len() as f64;
    let scores = delta
        .iter()
        .map(|(n, t)| {
            (
                n.clone(),
                t.map(|v| {
                    let rank = all.partition_point(|&x| x < v.abs()) + 1;
                    (rank as f64 / levels) as f32
                }),
            )
        })
        .collect();
    SaliencyMap {
        scores,
        scorer: Scorer::Magnitude,
    }
}

/// What the retention fraction is measured against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBasis {
    /// `floor(ratio · d)` with `d` the tensor's element count.
    #[default]
    Total,
    /// `floor(ratio · available)` over coordinates not yet excluded.
    Remaining,
}

/// `floor(ratio · n)`, tolerant of products like `0.29 · 100` landing a hair
/// below an integer.
pub fn retained_count(ratio: f64, n: usize) -> usize {
    let exact = ratio * n as f64;
    let snapped = exact.round();
    let r = if (exact - snapped).abs() <= 1e-9 * exact.abs().max(1.0) {
        snapped
    } else {
        exact.floor()
    };
    (r.max(0.0) as usize).min(n)
}

pub fn trim_topk(scores: &SaliencyMap, ratio: f64, exclude: Option<&MergeMask>) -> Result<MergeMask> {
    trim_topk_with(scores, ratio, exclude, RatioBasis::Total)
}

/// Marks, per tensor, the highest-scoring coordinates not set in `exclude`.
/// Ties go to the lower flat index.
pub fn trim_topk_with(
    scores: &SaliencyMap,
    ratio: f64,
    exclude: Option<&MergeMask>,
    basis: RatioBasis,
) -> Result<MergeMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "retention ratio {ratio} is outside [0, 1]"
        )));
    }
    let items: Vec<(&String, &Tensor)> = scores.scores.iter().collect();
    let masks = items
        .into_par_iter()
        .map(|(name, t)| {
            let excluded = match exclude {
                Some(ex) => {
                    let m = ex
                        .get(name)
                        .ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
                    if m.shape() != t.shape() {
                        return Err(Error::ShapeMismatch {
                            name: name.clone(),
                            expected: t.shape().to_vec(),
                            found: m.shape().to_vec(),
                        });
                    }
                    Some(m.bits())
                }
                None => None,
            };
            Ok((name.clone(), select_top(t, ratio, excluded, basis)))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut out = MergeMask::new();
    for (name, m) in masks {
        out.insert(name, m);
    }
    Ok(out)
}

pub(crate) fn select_top(t: &Tensor, ratio: f64, excluded: Option<&[bool]>, basis: RatioBasis) -> Mask {
    let s = t.data();
    let mut pool: Vec<usize> = match excluded {
        Some(ex) => (0..s.len()).filter(|&i| !ex[i]).collect(),
        None => (0..s.len()).collect(),
    };
    let wanted = match basis {
        RatioBasis::Total => retained_count(ratio, s.len()),
        RatioBasis::Remaining => retained_count(ratio, pool.len()),
    };
    let take = wanted.min(pool.len());
    let mut mask = Mask::empty(t.shape());
    if take == 0 {
        return mask;
    }
    let by_rank = |&a: &usize, &b: &usize| -> Ordering { s[b].total_cmp(&s[a]).then(a.cmp(&b)) };
    if take < pool.len() {
        pool.select_nth_unstable_by(take - 1, by_rank);
    }
    for &i in &pool[..take] {
        mask.bits_mut()[i] = true;
    }
    mask
}
