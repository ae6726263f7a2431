//! Forward engine for small dense models and the per-layer input statistics
//! from which the layer-wise diagonal Hessian is read off.
//!
//! For a linear layer with inputs `X` (features × samples), the layer-wise
//! output-MSE objective has Hessian `2·X·Xᵀ`. Only its diagonal is kept, and
//! it is normalised by the sample count: `h_j = 2·mean_n(x_j(n)²)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::{Tensor, TensorMap};

pub const SAMPLE_COUNT_KEY: &str = "sample_count";
pub const INPUTS_TENSOR: &str = "inputs";
const SQMEAN_SUFFIX: &str = ".sqmean";
const MEAN_SUFFIX: &str = ".mean";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    pub activation: Activation,
}

/// A feed-forward stack of dense layers `y = act(W·x + b)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn is_linear_weight(&self, name: &str) -> bool {
        self.layers.iter().any(|l| l.weight == name)
    }

    pub fn output_dim(&self, weights: &TensorMap) -> Result<usize> {
        let dims = self.layer_dims(weights)?;
        Ok(dims.last().map(|&(o, _)| o).unwrap_or(self.input_dim))
    }

    /// Checks the weights against the layer chain and returns `(out, in)` per layer.
    pub fn layer_dims(&self, weights: &TensorMap) -> Result<Vec<(usize, usize)>> {
        if self.input_dim == 0 {
            return Err(Error::DimensionMismatch("input_dim must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::DimensionMismatch("model spec has no layers".into()));
        }
        let mut expected_in = self.input_dim;
        let mut dims = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let w = weights.require(&layer.weight)?;
            let &[out, inp] = w.shape() else {
                return Err(Error::DimensionMismatch(format!(
                    "layer `{}`: weight must be 2-D, found shape {:?}",
                    layer.weight,
                    w.shape()
                )));
            };
            if inp != expected_in {
                return Err(Error::DimensionMismatch(format!(
                    "layer `{}`: expects {expected_in} input features, weight has {inp}",
                    layer.weight
                )));
            }
            if let Some(bias) = &layer.bias {
                let b = weights.require(bias)?;
                if b.shape() != [out] {
                    return Err(Error::DimensionMismatch(format!(
                        "layer `{}`: bias `{bias}` must have shape [{out}], found {:?}",
                        layer.weight,
                        b.shape()
                    )));
                }
            }
            dims.push((out, inp));
            expected_in = out;
        }
        Ok(dims)
    }
}

/// A dense layer held in f64 for computation.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight_name: String,
    pub bias_name: Option<String>,
    pub activation: Activation,
    /// `[out, in]`
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
}

/// Intermediate values of one forward pass, samples as rows.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer, `[N, in_l]`.
    pub layer_inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of each layer, `[N, out_l]`.
    pub pre_activations: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

impl Network {
    pub fn from_weights(spec: &ModelSpec, weights: &TensorMap) -> Result<Self> {
        let dims = spec.layer_dims(weights)?;
        let layers = spec
            .layers
            .iter()
            .zip(dims)
            .map(|(l, (out, inp))| {
                let w = weights.require(&l.weight).expect("checked");
                let weight = DMatrix::from_row_iterator(out, inp, w.data().iter().map(|&v| f64::from(v)));
                let bias = l.bias.as_ref().map(|b| {
                    let b = weights.require(b).expect("checked");
                    DVector::from_iterator(out, b.data().iter().map(|&v| f64::from(v)))
                });
                DenseLayer {
                    weight_name: l.weight.clone(),
                    bias_name: l.bias.clone(),
                    activation: l.activation,
                    weight,
                    bias,
                }
            })
            .collect();
        Ok(Network { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    pub fn forward_trace(&self, x: &DMatrix<f64>) -> Result<ForwardTrace> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "inputs have {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let mut z = &current * layer.weight.transpose();
            if let Some(b) = &layer.bias {
                for mut row in z.row_iter_mut() {
                    row += b.transpose();
                }
            }
            let a = z.map(|v| layer.activation.apply(v));
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    layer: layer.weight_name.clone(),
                });
            }
            layer_inputs.push(std::mem::replace(&mut current, a));
            pre_activations.push(z);
        }
        Ok(ForwardTrace {
            layer_inputs,
            pre_activations,
            output: current,
        })
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    /// Writes the parameters back as f32 tensors.
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        for l in &self.layers {
            let (out, inp) = l.weight.shape();
            let data = (0..out)
                .flat_map(|r| (0..inp).map(move |c| (r, c)))
                .map(|(r, c)| l.weight[(r, c)] as f32)
                .collect();
            m.insert(l.weight_name.clone(), Tensor::from_valid(vec![out, inp], data));
            if let (Some(name), Some(b)) = (&l.bias_name, &l.bias) {
                m.insert(
                    name.clone(),
                    Tensor::from_valid(vec![out], b.iter().map(|&v| v as f32).collect()),
                );
            }
        }
        m
    }
}

/// Converts a 2-D tensor into a row-major f64 matrix.
pub fn matrix_from_tensor(t: &Tensor) -> Result<DMatrix<f64>> {
    let &[rows, cols] = t.shape() else {
        return Err(Error::DimensionMismatch(format!(
            "expected a 2-D sample matrix, found shape {:?}",
            t.shape()
        )));
    };
    Ok(DMatrix::from_row_iterator(
        rows,
        cols,
        t.data().iter().map(|&v| f64::from(v)),
    ))
}

pub fn tensor_from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (rows, cols) = m.shape();
    let data = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)] as f32)
        .collect();
    Tensor::from_valid(vec![rows, cols], data)
}

/// First and second moments of one layer's input features.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMoments {
    /// `mean_n x_j(n)²`
    pub sqmean: Vec<f64>,
    /// `mean_n x_j(n)`; absent when loaded from a file that did not store it.
    pub mean: Option<Vec<f64>>,
}

/// How a layer's input second moment is approximated from the samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentPolicy {
    /// Mean of the squared activations (the diagonal of `X·Xᵀ / N`).
    #[default]
    MeanOfSquares,
    /// Square of the mean activation.
    SquareOfMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    layers: BTreeMap<String, LayerMoments>,
    sample_count: u64,
}

/// Diagonal Hessian per linear weight, indexed by input feature.
pub type HessianDiag = BTreeMap<String, Vec<f64>>;

impl ActivationStats {
    pub fn new(layers: BTreeMap<String, LayerMoments>, sample_count: u64) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::InvalidArgument("sample count must be positive".into()));
        }
        for (name, m) in &layers {
            if m.sqmean.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(format!(
                    "layer `{name}`: second moments must be finite and non-negative"
                )));
            }
            if m.mean.as_ref().is_some_and(|mu| mu.len() != m.sqmean.len()) {
                return Err(Error::DimensionMismatch(format!(
                    "layer `{name}`: first and second moment lengths differ"
                )));
            }
        }
        Ok(ActivationStats { layers, sample_count })
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn layers(&self) -> &BTreeMap<String, LayerMoments> {
        &self.layers
    }

    pub fn layer(&self, weight_name: &str) -> Option<&LayerMoments> {
        self.layers.get(weight_name)
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        for (name, mom) in &self.layers {
            let sq = mom.sqmean.iter().map(|&v| v as f32).collect();
            m.insert(
                format!("{name}{SQMEAN_SUFFIX}"),
                Tensor::from_valid(vec![mom.sqmean.len()], sq),
            );
            if let Some(mu) = &mom.mean {
                let mu = mu.iter().map(|&v| v as f32).collect();
                m.insert(
                    format!("{name}{MEAN_SUFFIX}"),
                    Tensor::from_valid(vec![mom.sqmean.len()], mu),
                );
            }
        }
        m.set_metadata(SAMPLE_COUNT_KEY, self.sample_count.to_string());
        m
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let count = map
            .metadata()
            .get(SAMPLE_COUNT_KEY)
            .ok_or_else(|| Error::MalformedHeader(format!("stats file lacks `{SAMPLE_COUNT_KEY}` metadata")))?;
        let sample_count: u64 = count
            .parse()
            .map_err(|e| Error::MalformedHeader(format!("bad `{SAMPLE_COUNT_KEY}` {count:?}: {e}")))?;
        let mut layers = BTreeMap::new();
        for (key, t) in map.iter() {
            let Some(name) = key.strip_suffix(SQMEAN_SUFFIX) else {
                continue;
            };
            if t.shape().len() != 1 {
                return Err(Error::DimensionMismatch(format!("`{key}` must be a vector")));
            }
            let sqmean = t.data().iter().map(|&v| f64::from(v)).collect();
            let mean = map
                .get(&format!("{name}{MEAN_SUFFIX}"))
                .map(|mu| mu.data().iter().map(|&v| f64::from(v)).collect());
            layers.insert(name.to_string(), LayerMoments { sqmean, mean });
        }
        ActivationStats::new(layers, sample_count)
    }
}

/// Runs the model over `inputs` (`[N, input_dim]`) and records, for each
/// linear layer, the per-feature moments of that layer's input.
pub fn forward_collect(
    spec: &ModelSpec,
    weights: &TensorMap,
    inputs: &Tensor,
) -> Result<(DMatrix<f64>, ActivationStats)> {
    let net = Network::from_weights(spec, weights)?;
    let x = matrix_from_tensor(inputs)?;
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("calibration set is empty".into()));
    }
    let trace = net.forward_trace(&x)?;
    let n = x.nrows() as f64;
    let mut layers = BTreeMap::new();
    for (layer, input) in net.layers.iter().zip(&trace.layer_inputs) {
        let mut sq = Vec::with_capacity(input.ncols());
        let mut mu = Vec::with_capacity(input.ncols());
        for col in input.column_iter() {
            let (s1, s2) = col.iter().fold((0.0, 0.0), |(a, b), &v| (a + v, b + v * v));
            mu.push(s1 / n);
            sq.push(s2 / n);
        }
        layers.insert(
            layer.weight_name.clone(),
            LayerMoments {
                sqmean: sq,
                mean: Some(mu),
            },
        );
    }
    let stats = ActivationStats::new(layers, x.nrows() as u64)?;
    Ok((trace.output, stats))
}

pub fn hessian_diag(stats: &ActivationStats) -> HessianDiag {
    hessian_diag_with(stats, MomentPolicy::MeanOfSquares).expect("second moments are always present")
}

/// `h_j = 2·m_j`, with `m_j` chosen by `policy`.
pub fn hessian_diag_with(stats: &ActivationStats, policy: MomentPolicy) -> Result<HessianDiag> {
    stats
        .layers
        .iter()
        .map(|(name, m)| {
            let h = match policy {
                MomentPolicy::MeanOfSquares => m.sqmean.iter().map(|&v| 2.0 * v).collect(),
                MomentPolicy::SquareOfMean => m
                    .mean
                    .as_ref()
                    .ok_or_else(|| Error::MissingCalibration(format!("layer `{name}` has no first moments")))?
                    .iter()
                    .map(|&v| 2.0 * v * v)
                    .collect(),
            };
            Ok((name.clone(), h))
        })
        .collect()
}

/// Sample-count weighted combination of two calibration batches.
pub fn merge_stats(a: &ActivationStats, b: &ActivationStats) -> Result<ActivationStats> {
    if a.layers.len() != b.layers.len() || a.layers.keys().ne(b.layers.keys()) {
        return Err(Error::DimensionMismatch("stats cover different layers".into()));
    }
    let total = a.sample_count + b.sample_count;
    let wa = a.sample_count as f64 / total as f64;
    let wb = b.sample_count as f64 / total as f64;
    let blend = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| wa * p + wb * q).collect() };
    let mut layers = BTreeMap::new();
    for ((name, ma), mb) in a.layers.iter().zip(b.layers.values()) {
        if ma.sqmean.len() != mb.sqmean.len() {
            return Err(Error::DimensionMismatch(format!(
                "layer `{name}`: {} vs {} input features",
                ma.sqmean.len(),
                mb.sqmean.len()
            )));
        }
        let mean = match (&ma.mean, &mb.mean) {
            (Some(x), Some(y)) => Some(blend(x, y)),
            _ => None,
        };
        layers.insert(
            name.clone(),
            LayerMoments {
                sqmean: blend(&ma.sqmean, &mb.sqmean),
                mean,
            },
        );
    }
    ActivationStats::new(layers, total)
}
