//! Task-vector algebra: deltas against a shared base, application, scaling,
//! and masked summation under disjoint binary masks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensorstore::{validate_compat, Tensor, TensorMap};

pub const BASE_FINGERPRINT_KEY: &str = "base_fingerprint";

/// Per-tensor deltas `θ − θ_base`, bound to the fingerprint of the base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    base_fingerprint: u64,
    deltas: TensorMap,
}

impl TaskVector {
    /// Wraps precomputed deltas. The caller vouches that they were taken
    /// against the base with `base_fingerprint`.
    pub fn from_parts(base_fingerprint: u64, deltas: TensorMap) -> Self {
        TaskVector {
            base_fingerprint,
            deltas,
        }
    }

    pub fn base_fingerprint(&self) -> u64 {
        self.base_fingerprint
    }

    pub fn deltas(&self) -> &TensorMap {
        &self.deltas
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.deltas.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.deltas.iter()
    }

    pub fn total_elements(&self) -> usize {
        self.deltas.total_elements()
    }

    pub fn zeros_like(&self) -> TaskVector {
        let deltas = self.deltas.iter().map(|(n, t)| (n.clone(), t.map(|_| 0.0))).collect();
        TaskVector::from_parts(self.base_fingerprint, deltas)
    }

    /// Checkpoint form, with the base fingerprint as 16 hex digits in metadata.
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = self.deltas.clone();
        m.metadata_mut().clear();
        m.set_metadata(BASE_FINGERPRINT_KEY, format!("{:016x}", self.base_fingerprint));
        m
    }

    pub fn from_tensor_map(map: TensorMap) -> Result<Self> {
        let fp = map
            .metadata()
            .get(BASE_FINGERPRINT_KEY)
            .ok_or_else(|| Error::MalformedHeader(format!("task vector lacks `{BASE_FINGERPRINT_KEY}` metadata")))?;
        let base_fingerprint = u64::from_str_radix(fp, 16)
            .map_err(|e| Error::MalformedHeader(format!("bad `{BASE_FINGERPRINT_KEY}` {fp:?}: {e}")))?;
        let mut deltas = map;
        deltas.metadata_mut().clear();
        Ok(TaskVector {
            base_fingerprint,
            deltas,
        })
    }
}

/// One binary mask tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::DimensionMismatch(format!(
                "mask shape {shape:?} does not match {} bits",
                bits.len()
            )));
        }
        Ok(Mask { shape, bits })
    }

    pub fn empty(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Mask {
            shape: shape.to_vec(),
            bits: vec![false; n],
        }
    }

    pub fn full(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Mask {
            shape: shape.to_vec(),
            bits: vec![true; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }
}

/// Per-tensor binary masks selecting coordinates of one task vector.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeMask {
    masks: BTreeMap<String, Mask>,
}

impl MergeMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mask: Mask) {
        self.masks.insert(name.into(), mask);
    }

    pub fn get(&self, name: &str) -> Option<&Mask> {
        self.masks.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mask)> {
        self.masks.iter()
    }

    pub fn count(&self) -> usize {
        self.masks.values().map(Mask::count).sum()
    }

    pub fn full_like(delta: &TaskVector) -> Self {
        MergeMask {
            masks: delta.iter().map(|(n, t)| (n.clone(), Mask::full(t.shape()))).collect(),
        }
    }

    /// 0/1 stored as f32, for audit files.
    pub fn to_tensor_map(&self) -> TensorMap {
        self.masks
            .iter()
            .map(|(n, m)| {
                let data = m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                (n.clone(), Tensor::from_valid(m.shape.clone(), data))
            })
            .collect()
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for (name, t) in map.iter() {
            let mut bits = Vec::with_capacity(t.numel());
            for (i, &v) in t.data().iter().enumerate() {
                bits.push(match v {
                    0.0 => false,
                    1.0 => true,
                    _ => {
                        return Err(Error::InvalidTensor {
                            name: name.clone(),
                            reason: format!("mask value {v} at index {i} is not 0 or 1"),
                        })
                    }
                });
            }
            masks.insert(name.clone(), Mask::new(t.shape().to_vec(), bits)?);
        }
        Ok(MergeMask { masks })
    }
}

/// `δ = θ − θ_base`, elementwise in f32.
pub fn compute_task_vector(model: &TensorMap, base: &TensorMap) -> Result<TaskVector> {
    validate_compat(&[base, model])?;
    let deltas = base
        .iter()
        .map(|(name, b)| {
            let m = model.get(name).expect("validated");
            let data = m.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            (name.clone(), Tensor::from_valid(b.shape().to_vec(), data))
        })
        .collect();
    Ok(TaskVector::from_parts(base.fingerprint(), deltas))
}

/// `θ = θ_base + δ`. The merged model inherits the base's metadata.
pub fn apply(base: &TensorMap, delta: &TaskVector) -> Result<TensorMap> {
    let fp = base.fingerprint();
    if fp != delta.base_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: delta.base_fingerprint,
            found: fp,
        });
    }
    validate_compat(&[base, &delta.deltas])?;
    let mut out: TensorMap = base
        .iter()
        .map(|(name, b)| {
            let d = delta.deltas.get(name).expect("validated");
            let data = b.data().iter().zip(d.data()).map(|(x, y)| x + y).collect();
            (name.clone(), Tensor::from_valid(b.shape().to_vec(), data))
        })
        .collect();
    *out.metadata_mut() = base.metadata().clone();
    Ok(out)
}

pub fn scale(delta: &TaskVector, lambda: f64) -> Result<TaskVector> {
    if !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scaling coefficient must be finite, got {lambda}"
        )));
    }
    let deltas = delta
        .iter()
        .map(|(n, t)| (n.clone(), t.map(|v| (f64::from(v) * lambda) as f32)))
        .collect();
    Ok(TaskVector::from_parts(delta.base_fingerprint, deltas))
}

/// Verifies that, per coordinate, at most one mask is set.
pub fn check_disjoint(masks: &[MergeMask]) -> Result<()> {
    let Some(first) = masks.first() else {
        return Ok(());
    };
    for (name, m0) in first.iter() {
        let mut counts = vec![0usize; m0.bits.len()];
        for mm in masks {
            let m = mm
                .get(name)
                .ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
            if m.shape != m0.shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: m0.shape.clone(),
                    found: m.shape.clone(),
                });
            }
            for (c, &b) in counts.iter_mut().zip(&m.bits) {
                *c += usize::from(b);
            }
        }
        if let Some(index) = counts.iter().position(|&c| c > 1) {
            return Err(Error::DisjointnessViolation {
                name: name.clone(),
                index,
                count: counts[index],
            });
        }
    }
    Ok(())
}

/// `Σ_k δ_k · mask_k` under disjoint masks: each coordinate is either the
/// single selected delta's value or zero.
pub fn sum_masked(deltas: &[TaskVector], masks: &[MergeMask]) -> Result<TaskVector> {
    if deltas.len() != masks.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} task vectors but {} masks",
            deltas.len(),
            masks.len()
        )));
    }
    let Some(first) = deltas.first() else {
        return Err(Error::InvalidArgument("masked sum of zero task vectors".into()));
    };
    for d in &deltas[1..] {
        if d.base_fingerprint != first.base_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: first.base_fingerprint,
                found: d.base_fingerprint,
            });
        }
        validate_compat(&[&first.deltas, &d.deltas])?;
    }
    for m in masks {
        for (name, t) in first.iter() {
            let mask = m.get(name).ok_or_else(|| Error::MissingTensor { name: name.clone() })?;
            if mask.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: mask.shape().to_vec(),
                });
            }
        }
    }
    check_disjoint(masks)?;

    let out = first
        .iter()
        .map(|(name, t)| {
            let mut data = vec![0.0f32; t.numel()];
            for (d, m) in deltas.iter().zip(masks) {
                let src = d.get(name).expect("validated").data();
                let bits = m.get(name).expect("validated").bits();
                for ((o, &v), &b) in data.iter_mut().zip(src).zip(bits) {
                    if b {
                        *o = v;
                    }
                }
            }
            (name.clone(), Tensor::from_valid(t.shape().to_vec(), data))
        })
        .collect();
    Ok(TaskVector::from_parts(first.base_fingerprint, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(name: &str, data: Vec<f32>) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(name, Tensor::vector(data).unwrap());
        m
    }

    fn mask(bits: &[u8]) -> MergeMask {
        let mut m = MergeMask::new();
        m.insert(
            "w",
            Mask::new(vec![bits.len()], bits.iter().map(|&b| b == 1).collect()).unwrap(),
        );
        m
    }

    #[test]
    fn delta_of_one_element() {
        let tv = compute_task_vector(&single("w", vec![1.5]), &single("w", vec![1.0])).unwrap();
        assert_eq!(tv.get("w").unwrap().data(), &[0.5]);
        assert_eq!(tv.base_fingerprint(), single("w", vec![1.0]).fingerprint());
    }

    #[test]
    fn identical_model_has_zero_delta() {
        let b = single("w", vec![0.3, -2.0, 7.5]);
        let tv = compute_task_vector(&b, &b).unwrap();
        assert!(tv.get("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_propagates() {
        let err = compute_task_vector(&single("w", vec![1.0, 2.0]), &single("w", vec![1.0]));
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn apply_adds_delta() {
        let base = single("w", vec![1.0]);
        let tv = TaskVector::from_parts(base.fingerprint(), single("w", vec![0.5]));
        assert_eq!(apply(&base, &tv).unwrap().get("w").unwrap().data(), &[1.5]);
        let zero = tv.zeros_like();
        assert_eq!(apply(&base, &zero).unwrap(), base);
    }

    #[test]
    fn apply_rejects_foreign_base() {
        let base = single("w", vec![1.0]);
        let other = single("w", vec![2.0]);
        let tv = compute_task_vector(&single("w", vec![3.0]), &other).unwrap();
        assert!(matches!(apply(&base, &tv), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn scale_cases() {
        let tv = TaskVector::from_parts(0, single("w", vec![0.5]));
        assert_eq!(scale(&tv, 2.0).unwrap().get("w").unwrap().data(), &[1.0]);
        assert_eq!(scale(&tv, 0.0).unwrap().get("w").unwrap().data(), &[0.0]);
        assert_eq!(scale(&tv, 1.0).unwrap(), tv);
        assert!(scale(&tv, f64::NAN).is_err());
        assert!(scale(&tv, f64::INFINITY).is_err());
    }

    #[test]
    fn masked_sum_picks_disjoint_coordinates() {
        let d1 = TaskVector::from_parts(9, single("w", vec![1.0, 2.0]));
        let d2 = TaskVector::from_parts(9, single("w", vec![3.0, 4.0]));
        let out = sum_masked(&[d1.clone(), d2.clone()], &[mask(&[1, 0]), mask(&[0, 1])]).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[1.0, 4.0]);

        let out = sum_masked(&[d1.clone(), d2.clone()], &[mask(&[0, 0]), mask(&[0, 0])]).unwrap();
        assert_eq!(out.get("w").unwrap().data(), &[0.0, 0.0]);

        let err = sum_masked(&[d1, d2], &[mask(&[1, 0]), mask(&[1, 0])]);
        assert!(matches!(
            err,
            Err(Error::DisjointnessViolation { index: 0, count: 2, .. })
        ));
    }

    #[test]
    fn masked_sum_rejects_mixed_bases() {
        let d1 = TaskVector::from_parts(1, single("w", vec![1.0]));
        let d2 = TaskVector::from_parts(2, single("w", vec![1.0]));
        let err = sum_masked(&[d1, d2], &[mask(&[1]), mask(&[0])]);
        assert!(matches!(err, Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn persisted_forms_round_trip() {
        let tv = TaskVector::from_parts(0xdead_beef_0123_4567, single("w", vec![0.25, -1.0]));
        let map = tv.to_tensor_map();
        assert_eq!(map.metadata().get(BASE_FINGERPRINT_KEY).unwrap(), "deadbeef01234567");
        let back = TaskVector::from_tensor_map(TensorMap::from_bytes(&map.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, tv);

        let m = mask(&[1, 0, 1]);
        assert_eq!(MergeMask::from_tensor_map(&m.to_tensor_map()).unwrap(), m);
        let bad = single("w", vec![0.5]);
        assert!(MergeMask::from_tensor_map(&bad).is_err());
    }

    proptest! {
        // Base and fine-tune of the same sign within a factor of two: the
        // f32 subtraction is exact, so the round trip is bit-exact.
        #[test]
        fn apply_inverts_task_vector(
            pairs in prop::collection::vec((0.01f32..100.0, 0.5f32..2.0, any::<bool>()), 1..64)
        ) {
            let base: Vec<f32> = pairs.iter().map(|&(b, _, neg)| if neg { -b } else { b }).collect();
            let model: Vec<f32> = pairs.iter().zip(&base).map(|(&(_, r, _), &b)| b * r).collect();
            let base = single("w", base);
            let model = single("w", model);
            let tv = compute_task_vector(&model, &base).unwrap();
            let back = apply(&base, &tv).unwrap();
            let lhs: Vec<u32> = back.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let rhs: Vec<u32> = model.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn scale_is_linear(v in prop::collection::vec(-10f32..10.0, 1..32), a in -4f64..4.0, b in -4f64..4.0) {
            let tv = TaskVector::from_parts(0, single("w", v));
            let sum = scale(&tv, a + b).unwrap();
            let sa = scale(&tv, a).unwrap();
            let sb = scale(&tv, b).unwrap();
            for ((&s, &x), &y) in sum.get("w").unwrap().data().iter()
                .zip(sa.get("w").unwrap().data())
                .zip(sb.get("w").unwrap().data())
            {
                let tol = 4.0 * f32::EPSILON * (x.abs() + y.abs()).max(s.abs()).max(1e-30);
                prop_assert!((s - (x + y)).abs() <= tol, "{} vs {}", s, x + y);
            }
        }

        #[test]
        fn masked_sum_output_is_zero_or_one_input(
            vals in prop::collection::vec(prop::collection::vec(-5f32..5.0, 16), 2..5),
            owners in prop::collection::vec(0usize..6, 16),
        ) {
            let k = vals.len();
            let deltas: Vec<TaskVector> = vals.iter().map(|v| TaskVector::from_parts(3, single("w", v.clone()))).collect();
            let masks: Vec<MergeMask> = (0..k)
                .map(|j| {
                    let bits: Vec<u8> = owners.iter().map(|&o| u8::from(o == j)).collect();
                    mask(&bits)
                })
                .collect();
            let out = sum_masked(&deltas, &masks).unwrap();
            for (i, &v) in out.get("w").unwrap().data().iter().enumerate() {
                if owners[i] < k {
                    prop_assert_eq!(v.to_bits(), vals[owners[i]][i].to_bits());
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }
}
