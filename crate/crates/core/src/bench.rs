//! Planted multi-task problems, fine-tuning oracles, evaluation and
//! interference statistics.
//!
//! A suite shares one random base model. Task `k` perturbs the base on the
//! input features of its support and generates targets from the perturbed
//! model, so the ideal fine-tune of every task is known.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{
    forward_collect, matrix_from_tensor, tensor_from_matrix, Activation, LayerSpec, ModelSpec, Network,
};
use crate::error::{Error, Result};
use crate::merge::{run_merge, Calibration, MergeOrder, MergePlan, Method, OrderPolicy};
use crate::taskvec::{apply, compute_task_vector, TaskVector};
use crate::tensorstore::{validate_compat, Tensor, TensorMap};

pub const INPUTS_KEY: &str = "inputs";
pub const TARGETS_KEY: &str = "targets";
pub const TASK_ID_KEY: &str = "task_id";

/// Absolute tolerance for "equals an input value" in the deviation count.
pub const DEVIATION_TOL: f32 = 1e-7;

/// Divergence is declared after this many consecutive loss increases.
const DIVERGENCE_STREAK: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    /// `[N, d_in]`
    pub inputs: Tensor,
    /// `[N, d_out]`
    pub targets: Tensor,
    pub task_id: String,
}

impl TaskDataset {
    pub fn new(inputs: Tensor, targets: Tensor, task_id: impl Into<String>) -> Result<Self> {
        let (&[n, _], &[m, _]) = (inputs.shape(), targets.shape()) else {
            return Err(Error::DimensionMismatch(format!(
                "dataset tensors must be 2-D, found {:?} and {:?}",
                inputs.shape(),
                targets.shape()
            )));
        };
        if n != m {
            return Err(Error::DimensionMismatch(format!("{n} input rows but {m} target rows")));
        }
        Ok(TaskDataset {
            inputs,
            targets,
            task_id: task_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert(INPUTS_KEY, self.inputs.clone());
        m.insert(TARGETS_KEY, self.targets.clone());
        m.set_metadata(TASK_ID_KEY, self.task_id.clone());
        m
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let task_id = map.metadata().get(TASK_ID_KEY).cloned().unwrap_or_default();
        TaskDataset::new(
            map.require(INPUTS_KEY)?.clone(),
            map.require(TARGETS_KEY)?.clone(),
            task_id,
        )
    }

    fn matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((matrix_from_tensor(&self.inputs)?, matrix_from_tensor(&self.targets)?))
    }
}

fn default_noise_std() -> f64 {
    0.05
}

fn default_off_support_std() -> f64 {
    0.01
}

fn default_hidden_activation() -> Activation {
    Activation::Tanh
}

/// Parameters of a planted suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub tasks: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub samples: usize,
    /// Fraction ω of each task's support shared by all tasks.
    #[serde(default)]
    pub overlap: f64,
    /// Target noise standard deviation.
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    /// Input standard deviation on features outside the task's support.
    #[serde(default = "default_off_support_std")]
    pub off_support_std: f64,
    /// Perturbation scale per task; empty means 1 for every task.
    #[serde(default)]
    pub delta_scales: Vec<f64>,
    /// Width of a hidden layer; `None` gives a single linear layer.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default = "default_hidden_activation")]
    pub hidden_activation: Activation,
    #[serde(default)]
    pub bias: bool,
}

impl SuiteConfig {
    pub fn new(seed: u64, tasks: usize, d_in: usize, d_out: usize, samples: usize) -> Self {
        SuiteConfig {
            seed,
            tasks,
            d_in,
            d_out,
            samples,
            overlap: 0.0,
            noise_std: default_noise_std(),
            off_support_std: default_off_support_std(),
            delta_scales: Vec::new(),
            hidden: None,
            hidden_activation: default_hidden_activation(),
            bias: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.tasks == 0 {
            return bad("a suite needs at least one task".into());
        }
        if self.d_in == 0 || self.d_out == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.d_in < self.tasks {
            return bad(format!("d_in = {} cannot hold {} task supports", self.d_in, self.tasks));
        }
        if self.samples < self.d_in {
            return bad(format!("samples = {} is below d_in = {}", self.samples, self.d_in));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap {} is outside [0, 1]", self.overlap));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        if !(self.off_support_std >= 0.0 && self.off_support_std.is_finite()) {
            return bad(format!(
                "off_support_std {} must be finite and non-negative",
                self.off_support_std
            ));
        }
        if !self.delta_scales.is_empty() && self.delta_scales.len() != self.tasks {
            return bad(format!(
                "{} delta scales for {} tasks",
                self.delta_scales.len(),
                self.tasks
            ));
        }
        if self.delta_scales.iter().any(|s| !s.is_finite()) {
            return bad("delta scales must be finite".into());
        }
        if self.hidden == Some(0) {
            return bad("hidden width must be positive".into());
        }
        Ok(())
    }

    fn delta_scale(&self, k: usize) -> f64 {
        self.delta_scales.get(k).copied().unwrap_or(1.0)
    }

    /// Input features each task is active on: a shared block of
    /// `round(ω·s)` features followed by private blocks, `s = d_in / K`.
    pub fn supports(&self) -> Vec<Vec<usize>> {
        let s = self.d_in / self.tasks;
        let c = ((self.overlap * s as f64).round() as usize).min(s);
        let private = s - c;
        (0..self.tasks)
            .map(|k| (0..c).chain(c + k * private..c + (k + 1) * private).collect())
            .collect()
    }

    pub fn model_spec(&self) -> ModelSpec {
        let layer = |i: usize, activation| LayerSpec {
            weight: format!("l{i}.weight"),
            bias: self.bias.then(|| format!("l{i}.bias")),
            activation,
        };
        let layers = match self.hidden {
            None => vec![layer(0, Activation::Identity)],
            Some(_) => vec![layer(0, self.hidden_activation), layer(1, Activation::Identity)],
        };
        ModelSpec {
            input_dim: self.d_in,
            layers,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub spec: ModelSpec,
    pub base: TensorMap,
    pub tasks: Vec<TaskDataset>,
    /// Ground-truth model of each task.
    pub planted: Vec<TensorMap>,
    pub supports: Vec<Vec<usize>>,
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("finite std").sample(rng)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gaussian(rng, std))
}

fn round_f32(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| f64::from(v as f32))
}

/// Builds a planted suite. Everything is drawn from one ChaCha8 stream
/// seeded by `config.seed`, so equal configs give bit-identical suites.
pub fn make_task_suite(config: &SuiteConfig) -> Result<TaskSuite> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spec = config.model_spec();
    let supports = config.supports();

    let dims: Vec<(usize, usize)> = match config.hidden {
        None => vec![(config.d_out, config.d_in)],
        Some(h) => vec![(h, config.d_in), (config.d_out, h)],
    };
    let base_layers: Vec<(DMatrix<f64>, Option<DVector<f64>>)> = dims
        .iter()
        .map(|&(out, inp)| {
            let w = round_f32(&random_matrix(&mut rng, out, inp, 1.0 / (inp as f64).sqrt()));
            let b = config
                .bias
                .then(|| DVector::from_fn(out, |_, _| f64::from(gaussian(&mut rng, 0.1) as f32)));
            (w, b)
        })
        .collect();

    let to_map = |layers: &[(DMatrix<f64>, Option<DVector<f64>>)]| -> TensorMap {
        let mut m = TensorMap::new();
        for (l, (w, b)) in spec.layers.iter().zip(layers) {
            m.insert(l.weight.clone(), tensor_from_matrix(w));
            if let (Some(name), Some(b)) = (&l.bias, b) {
                m.insert(
                    name.clone(),
                    Tensor::from_valid(vec![b.len()], b.iter().map(|&v| v as f32).collect()),
                );
            }
        }
        m
    };
    let base = to_map(&base_layers);

    let mut planted = Vec::with_capacity(config.tasks);
    let mut tasks = Vec::with_capacity(config.tasks);
    for (k, support) in supports.iter().enumerate() {
        let scale = config.delta_scale(k);
        let mut layers = base_layers.clone();
        // First layer: perturb only the support columns.
        let (w0, _) = &mut layers[0];
        let rows = w0.nrows();
        for &j in support {
            for i in 0..rows {
                w0[(i, j)] = f64::from((w0[(i, j)] + gaussian(&mut rng, scale)) as f32);
            }
        }
        // Deeper layers: dense perturbation at half the scale.
        for (w, _) in layers.iter_mut().skip(1) {
            let d = random_matrix(&mut rng, w.nrows(), w.ncols(), 0.5 * scale / (w.ncols() as f64).sqrt());
            *w = round_f32(&(&*w + d));
        }
        let model = to_map(&layers);

        let mut on_support = vec![false; config.d_in];
        for &j in support {
            on_support[j] = true;
        }
        // Column-major fill: feature j occupies indices j·N .. (j+1)·N.
        let x = DMatrix::from_iterator(
            config.samples,
            config.d_in,
            (0..config.samples * config.d_in).map(|idx| {
                let std = if on_support[idx / config.samples] {
                    1.0
                } else {
                    config.off_support_std
                };
                f64::from(gaussian(&mut rng, std) as f32)
            }),
        );
        let clean = Network::from_weights(&spec, &model)?.forward(&x)?;
        let y = clean.map(|v| f64::from((v + gaussian(&mut rng, config.noise_std)) as f32));
        tasks.push(TaskDataset::new(
            tensor_from_matrix(&x),
            tensor_from_matrix(&y),
            format!("task{k}"),
        )?);
        planted.push(model);
    }

    Ok(TaskSuite {
        config: config.clone(),
        spec,
        base,
        tasks,
        planted,
        supports,
    })
}

fn single_linear_layer(spec: &ModelSpec) -> Result<&LayerSpec> {
    match spec.layers.as_slice() {
        [l] if l.activation == Activation::Identity => Ok(l),
        _ => Err(Error::InvalidArgument(
            "closed-form fine-tuning needs a single identity-activation layer".into(),
        )),
    }
}

/// Ridge least squares towards the base:
/// `argmin ‖X·Θᵀ − Y‖² + λ‖Θ − Θ_base‖²`, with `Θ = [W | b]` when the layer
/// has a bias. Solved by Cholesky on the normal equations.
pub fn closed_form_finetune(spec: &ModelSpec, base: &TensorMap, data: &TaskDataset, ridge: f64) -> Result<TensorMap> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ridge {ridge} must be finite and non-negative"
        )));
    }
    let layer = single_linear_layer(spec)?;
    let net = Network::from_weights(spec, base)?;
    let dense = &net.layers[0];
    let (x, y) = data.matrices()?;
    let (d_out, d_in) = dense.weight.shape();
    if x.ncols() != d_in || y.ncols() != d_out {
        return Err(Error::DimensionMismatch(format!(
            "data is [{}, {}] -> [{}, {}], model is {d_in} -> {d_out}",
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    let has_bias = dense.bias.is_some();
    let p = d_in + usize::from(has_bias);
    let n = x.nrows();
    let xa = DMatrix::from_fn(n, p, |r, c| if c < d_in { x[(r, c)] } else { 1.0 });
    let theta_base = DMatrix::from_fn(p, d_out, |r, c| {
        if r < d_in {
            dense.weight[(c, r)]
        } else {
            dense.bias.as_ref().expect("has bias")[c]
        }
    });

    let mut a = xa.transpose() * &xa;
    for i in 0..p {
        a[(i, i)] += ridge;
    }
    let rhs = xa.transpose() * &y + &theta_base * ridge;
    let scale = (0..p).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
    let chol = a.cholesky().ok_or(Error::RankDeficient)?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v * v));
    if ridge == 0.0 && min_pivot <= 1e-12 * scale {
        return Err(Error::RankDeficient);
    }
    let theta = chol.solve(&rhs);

    let mut out = base.clone();
    let w = DMatrix::from_fn(d_out, d_in, |r, c| theta[(c, r)]);
    out.insert(layer.weight.clone(), tensor_from_matrix(&w));
    if let Some(b) = &layer.bias {
        out.insert(
            b.clone(),
            Tensor::from_valid(vec![d_out], (0..d_out).map(|c| theta[(d_in, c)] as f32).collect()),
        );
    }
    Ok(out)
}

/// Gradient of the mean squared error with respect to every parameter of
/// the spec, row-major like the tensors themselves.
pub type Gradients = BTreeMap<String, Vec<f64>>;

fn mse(out: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = (out.nrows() * out.ncols()) as f64;
    out.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

type LayerGrad = (DMatrix<f64>, Option<DVector<f64>>);

fn net_loss_and_gradient(net: &Network, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, Vec<LayerGrad>)> {
    let trace = net.forward_trace(x)?;
    if trace.output.shape() != y.shape() {
        return Err(Error::DimensionMismatch(format!(
            "model output is {:?}, targets are {:?}",
            trace.output.shape(),
            y.shape()
        )));
    }
    let loss = mse(&trace.output, y);
    let n = (y.nrows() * y.ncols()) as f64;
    let mut upstream = (&trace.output - y) * (2.0 / n);
    let mut grads = Vec::with_capacity(net.layers.len());
    for (l, layer) in net.layers.iter().enumerate().rev() {
        let z = &trace.pre_activations[l];
        let gz = upstream.zip_map(z, |g, zv| g * layer.activation.derivative(zv));
        let gw = gz.transpose() * &trace.layer_inputs[l];
        let gb = layer
            .bias
            .as_ref()
            .map(|_| DVector::from_iterator(gz.ncols(), gz.column_iter().map(|c| c.sum())));
        upstream = &gz * &layer.weight;
        grads.push((gw, gb));
    }
    grads.reverse();
    Ok((loss, grads))
}

/// MSE of the model on `data` and its gradient, by a reverse pass in f64.
pub fn loss_and_gradient(spec: &ModelSpec, weights: &TensorMap, data: &TaskDataset) -> Result<(f64, Gradients)> {
    let net = Network::from_weights(spec, weights)?;
    let (x, y) = data.matrices()?;
    let (loss, grads) = net_loss_and_gradient(&net, &x, &y)?;
    let mut out = Gradients::new();
    for (layer, (gw, gb)) in net.layers.iter().zip(grads) {
        let (r, c) = gw.shape();
        out.insert(
            layer.weight_name.clone(),
            (0..r)
                .flat_map(|i| (0..c).map(move |j| (i, j)))
                .map(|ij| gw[ij])
                .collect(),
        );
        if let (Some(name), Some(gb)) = (&layer.bias_name, gb) {
            out.insert(name.clone(), gb.iter().copied().collect());
        }
    }
    Ok((loss, out))
}

/// Full-batch gradient descent on the MSE, starting from `base`.
///
/// Fails with [`Error::Diverged`] once the loss has increased on
/// five consecutive epochs or stops being finite.
pub fn sgd_finetune(
    spec: &ModelSpec,
    base: &TensorMap,
    data: &TaskDataset,
    epochs: usize,
    lr: f64,
) -> Result<TensorMap> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {lr} must be finite and non-negative"
        )));
    }
    let mut net = Network::from_weights(spec, base)?;
    if lr == 0.0 || epochs == 0 {
        return Ok(base.clone());
    }
    let (x, y) = data.matrices()?;
    let mut prev = f64::INFINITY;
    let mut streak = 0;
    for epoch in 0..epochs {
        let (loss, grads) = net_loss_and_gradient(&net, &x, &y)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, epochs });
        }
        if loss > prev {
            streak += 1;
            if streak >= DIVERGENCE_STREAK {
                return Err(Error::Diverged { epoch, epochs });
            }
        } else {
            streak = 0;
        }
        prev = loss;
        for (layer, (gw, gb)) in net.layers.iter_mut().zip(grads) {
            layer.weight -= gw * lr;
            if let (Some(b), Some(gb)) = (layer.bias.as_mut(), gb) {
                *b -= gb * lr;
            }
        }
    }
    let mut out = base.clone();
    for (name, t) in net.to_tensor_map().into_entries() {
        if let Some(i) = t.first_non_finite() {
            return Err(Error::NonFinite { name, index: i });
        }
        out.insert(name, t);
    }
    Ok(out)
}

/// Mean squared error over all `N · d_out` outputs.
pub fn evaluate(spec: &ModelSpec, weights: &TensorMap, data: &TaskDataset) -> Result<f64> {
    let net = Network::from_weights(spec, weights)?;
    let (x, y) = data.matrices()?;
    let out = net.forward(&x)?;
    if out.shape() != y.shape() {
        return Err(Error::DimensionMismatch(format!(
            "model output is {:?}, targets are {:?}",
            out.shape(),
            y.shape()
        )));
    }
    Ok(mse(&out, &y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interference {
    /// Coordinates where two nonzero deltas disagree in sign.
    pub sign_conflict_fraction: f64,
    /// Nonzero merged coordinates equal to no input delta.
    pub deviation_fraction: f64,
}

fn sign_conflicts(deltas: &[TaskVector], name: &str, i: usize) -> bool {
    let (mut pos, mut neg) = (false, false);
    for d in deltas {
        let v = d.get(name).expect("aligned").data()[i];
        pos |= v > 0.0;
        neg |= v < 0.0;
    }
    pos && neg
}

fn check_aligned(deltas: &[TaskVector], merged: &TensorMap) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("need at least one task vector".into()));
    }
    let mut maps: Vec<&TensorMap> = deltas.iter().map(TaskVector::deltas).collect();
    maps.push(merged);
    validate_compat(&maps)
}

/// Interference statistics in delta space.
pub fn interference_report(deltas: &[TaskVector], merged: &TaskVector) -> Result<Interference> {
    check_aligned(deltas, merged.deltas())?;
    let (mut total, mut conflicts, mut deviations) = (0usize, 0usize, 0usize);
    for (name, t) in merged.iter() {
        for (i, &m) in t.data().iter().enumerate() {
            total += 1;
            conflicts += usize::from(sign_conflicts(deltas, name, i));
            let matches = deltas
                .iter()
                .any(|d| (m - d.get(name).expect("aligned").data()[i]).abs() <= DEVIATION_TOL);
            deviations += usize::from(m != 0.0 && !matches);
        }
    }
    Ok(Interference {
        sign_conflict_fraction: conflicts as f64 / total as f64,
        deviation_fraction: deviations as f64 / total as f64,
    })
}

/// Interference statistics in parameter space: a merged coordinate deviates
/// when it differs from the base and from every `base + δ_k` evaluated in
/// f32. Avoids counting the rounding of `merged − base` as a deviation.
pub fn interference_from_models(base: &TensorMap, deltas: &[TaskVector], merged: &TensorMap) -> Result<Interference> {
    check_aligned(deltas, merged)?;
    validate_compat(&[base, merged])?;
    let (mut total, mut conflicts, mut deviations) = (0usize, 0usize, 0usize);
    for (name, t) in merged.iter() {
        let b = base.require(name)?.data();
        for (i, &m) in t.data().iter().enumerate() {
            total += 1;
            conflicts += usize::from(sign_conflicts(deltas, name, i));
            let matches = deltas
                .iter()
                .any(|d| (m - (b[i] + d.get(name).expect("aligned").data()[i])).abs() <= DEVIATION_TOL);
            deviations += usize::from(m != b[i] && !matches);
        }
    }
    Ok(Interference {
        sign_conflict_fraction: conflicts as f64 / total as f64,
        deviation_fraction: deviations as f64 / total as f64,
    })
}

/// How each task's individual model is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finetune {
    ClosedForm {
        #[serde(default)]
        ridge: f64,
    },
    Gradient {
        epochs: usize,
        lr: f64,
    },
    /// Use the ground-truth models directly.
    Planted,
}

impl Default for Finetune {
    fn default() -> Self {
        Finetune::ClosedForm { ridge: 0.0 }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::TaskArithmetic, Method::Ties, Method::Obim]
}

fn default_lambda() -> f64 {
    1.0
}

fn default_drop_p() -> f64 {
    0.5
}

fn default_order_policy() -> OrderPolicy {
    OrderPolicy::Rotation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub suite: SuiteConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Retention ratios; defaults to `1/K` each.
    #[serde(default)]
    pub ratios: Option<Vec<f64>>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_drop_p")]
    pub drop_p: f64,
    #[serde(default = "default_order_policy")]
    pub order_policy: OrderPolicy,
    /// Visiting order; defaults to `0..K`.
    #[serde(default)]
    pub order: Option<Vec<usize>>,
    #[serde(default)]
    pub finetune: Finetune,
    /// Seed for DARE and for the random scores of non-linear tensors.
    #[serde(default)]
    pub merge_seed: u64,
}

impl BenchConfig {
    pub fn new(suite: SuiteConfig) -> Self {
        BenchConfig {
            suite,
            methods: default_methods(),
            ratios: None,
            lambda: default_lambda(),
            drop_p: default_drop_p(),
            order_policy: default_order_policy(),
            order: None,
            finetune: Finetune::default(),
            merge_seed: 0,
        }
    }

    pub fn plan(&self, method: Method) -> Result<MergePlan> {
        let k = self.suite.tasks;
        let mut plan = MergePlan::new(method, k)
            .with_lambda(self.lambda)
            .with_drop_p(self.drop_p)
            .with_seed(self.merge_seed);
        if let Some(r) = &self.ratios {
            plan = plan.with_ratios(r.clone());
        }
        let order = match &self.order {
            Some(o) => MergeOrder::new(o.clone(), self.order_policy)?,
            None => MergeOrder::sequential(k, self.order_policy),
        };
        plan = plan.with_order(order);
        plan.validate(k)?;
        Ok(plan)
    }
}

/// One line of the report: a method evaluated on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    /// Task id, or `avg` for the per-method average.
    pub task_id: String,
    pub loss_base: f64,
    pub loss_finetuned: f64,
    pub loss_merged: f64,
    pub interference: Interference,
    pub kept: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub suite: TaskSuite,
    pub finetuned: Vec<TensorMap>,
    pub merged: Vec<(Method, TensorMap)>,
    pub rows: Vec<BenchRow>,
}

pub fn finetune_all(suite: &TaskSuite, how: Finetune) -> Result<Vec<TensorMap>> {
    suite
        .tasks
        .par_iter()
        .zip(&suite.planted)
        .map(|(data, planted)| match how {
            Finetune::ClosedForm { ridge } => closed_form_finetune(&suite.spec, &suite.base, data, ridge),
            Finetune::Gradient { epochs, lr } => sgd_finetune(&suite.spec, &suite.base, data, epochs, lr),
            Finetune::Planted => Ok(planted.clone()),
        })
        .collect()
}

/// Activation statistics of each fine-tuned model on its own task inputs.
pub fn task_calibration(suite: &TaskSuite, finetuned: &[TensorMap]) -> Result<Calibration> {
    let stats = suite
        .tasks
        .par_iter()
        .zip(finetuned)
        .map(|(data, model)| forward_collect(&suite.spec, model, &data.inputs).map(|(_, s)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Calibration {
        spec: suite.spec.clone(),
        stats,
    })
}

/// Generates the suite, fine-tunes each task, merges with every method and
/// evaluates every merged model on every task.
pub fn run_bench(config: &BenchConfig) -> Result<BenchResult> {
    let suite = make_task_suite(&config.suite)?;
    let plans = config
        .methods
        .iter()
        .map(|&m| config.plan(m))
        .collect::<Result<Vec<_>>>()?;
    let finetuned = finetune_all(&suite, config.finetune)?;
    let calib = if config.methods.iter().any(|m| m.needs_calibration()) {
        Some(task_calibration(&suite, &finetuned)?)
    } else {
        None
    };
    let deltas = finetuned
        .iter()
        .map(|m| compute_task_vector(m, &suite.base))
        .collect::<Result<Vec<_>>>()?;

    let loss_base = suite
        .tasks
        .par_iter()
        .map(|d| evaluate(&suite.spec, &suite.base, d))
        .collect::<Result<Vec<_>>>()?;
    let loss_ft = suite
        .tasks
        .par_iter()
        .zip(&finetuned)
        .map(|(d, m)| evaluate(&suite.spec, m, d))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut merged_models = Vec::new();
    for plan in &plans {
        let outcome = run_merge(plan, &suite.base, &finetuned, calib.as_ref())?;
        let interference = interference_from_models(&suite.base, &deltas, &outcome.merged)?;
        let losses = suite
            .tasks
            .par_iter()
            .map(|d| evaluate(&suite.spec, &outcome.merged, d))
            .collect::<Result<Vec<_>>>()?;
        for (k, data) in suite.tasks.iter().enumerate() {
            rows.push(BenchRow {
                method: plan.method,
                task_id: data.task_id.clone(),
                loss_base: loss_base[k],
                loss_finetuned: loss_ft[k],
                loss_merged: losses[k],
                interference,
                kept: outcome.audit.kept.clone(),
            });
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(BenchRow {
            method: plan.method,
            task_id: "avg".into(),
            loss_base: mean(&loss_base),
            loss_finetuned: mean(&loss_ft),
            loss_merged: mean(&losses),
            interference,
            kept: outcome.audit.kept.clone(),
        });
        merged_models.push((plan.method, outcome.merged));
    }
    Ok(BenchResult {
        suite,
        finetuned,
        merged: merged_models,
        rows,
    })
}

/// Header of the report CSV for `k` models.
pub fn csv_header(k: usize) -> String {
    let mut h =
        String::from("method,task_id,loss_base,loss_finetuned,loss_merged,sign_conflict_fraction,deviation_fraction");
    for i in 0..k {
        let _ = write!(h, ",kept_{i}");
    }
    h
}

/// Renders rows as CSV with a fixed column order.
pub fn report_csv(rows: &[BenchRow], k: usize) -> String {
    let mut out = csv_header(k);
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            r.task_id,
            r.loss_base,
            r.loss_finetuned,
            r.loss_merged,
            r.interference.sign_conflict_fraction,
            r.interference.deviation_fraction
        );
        for c in &r.kept {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

/// Applies each delta to `base`; convenience for tests and reports.
pub fn models_from_deltas(base: &TensorMap, deltas: &[TaskVector]) -> Result<Vec<TensorMap>> {
    deltas.iter().map(|d| apply(base, d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::{disjoint_mean, iterative_merge};
    use crate::saliency::magnitude_scores;
    use proptest::prelude::*;

    fn spec1() -> ModelSpec {
        ModelSpec {
            input_dim: 1,
            layers: vec![LayerSpec {
                weight: "w".into(),
                bias: None,
                activation: Activation::Identity,
            }],
        }
    }

    fn w(v: f32) -> TensorMap {
        [("w".to_string(), Tensor::new(vec![1, 1], vec![v]).unwrap())]
            .into_iter()
            .collect()
    }

    fn data(xs: &[f32], ys: &[f32]) -> TaskDataset {
        TaskDataset::new(
            Tensor::new(vec![xs.len(), 1], xs.to_vec()).unwrap(),
            Tensor::new(vec![ys.len(), 1], ys.to_vec()).unwrap(),
            "t",
        )
        .unwrap()
    }

    fn tv(v: Vec<f32>) -> TaskVector {
        TaskVector::from_parts(0, [("w".to_string(), Tensor::vector(v).unwrap())].into_iter().collect())
    }

    #[test]
    fn closed_form_exact_fit() {
        let d = data(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]);
        let out = closed_form_finetune(&spec1(), &w(0.0), &d, 0.0).unwrap();
        assert!((out.get("w").unwrap().data()[0] - 2.0).abs() < 1e-6);
        let far = closed_form_finetune(&spec1(), &w(0.5), &d, 1e12).unwrap();
        assert!((far.get("w").unwrap().data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn closed_form_rank_deficient() {
        let d = data(&[0.0, 0.0], &[1.0, 2.0]);
        assert!(matches!(
            closed_form_finetune(&spec1(), &w(0.0), &d, 0.0),
            Err(Error::RankDeficient)
        ));
        assert!(closed_form_finetune(&spec1(), &w(0.0), &d, 0.1).is_ok());
    }

    #[test]
    fn closed_form_satisfies_optimality() {
        let mut cfg = SuiteConfig::new(11, 1, 6, 3, 40);
        cfg.bias = true;
        let suite = make_task_suite(&cfg).unwrap();
        for ridge in [0.0, 0.3] {
            let fit = closed_form_finetune(&suite.spec, &suite.base, &suite.tasks[0], ridge).unwrap();
            // Residual gradient from the f32 weights, with the ridge term.
            let (_, g) = loss_and_gradient(&suite.spec, &fit, &suite.tasks[0]).unwrap();
            let scale = (suite.tasks[0].len() * cfg.d_out) as f64;
            let mut norm = 0.0;
            for (name, grad) in &g {
                let f = fit.get(name).unwrap().data();
                let b = suite.base.get(name).unwrap().data();
                for ((gv, fv), bv) in grad.iter().zip(f).zip(b) {
                    let full = gv * scale + 2.0 * ridge * f64::from(fv - bv);
                    norm += full * full;
                }
            }
            // f32 storage of the solution bounds how small this can get.
            assert!(norm.sqrt() < 1e-3, "ridge {ridge}: {}", norm.sqrt());
        }
    }

    #[test]
    fn evaluate_examples() {
        let d = data(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]);
        assert_eq!(evaluate(&spec1(), &w(2.0), &d).unwrap(), 0.0);
        assert_eq!(evaluate(&spec1(), &w(0.0), &data(&[1.0], &[2.0])).unwrap(), 4.0);
        let shuffled = data(&[3.0, 1.0, 2.0], &[6.0, 2.0, 4.0]);
        assert_eq!(
            evaluate(&spec1(), &w(0.5), &d).unwrap(),
            evaluate(&spec1(), &w(0.5), &shuffled).unwrap()
        );
    }

    #[test]
    fn gd_with_zero_rate_is_identity() {
        let d = data(&[1.0, 2.0], &[3.0, 1.0]);
        assert_eq!(sgd_finetune(&spec1(), &w(0.7), &d, 10, 0.0).unwrap(), w(0.7));
    }

    #[test]
    fn gd_matches_closed_form_on_linear_suite() {
        let mut cfg = SuiteConfig::new(5, 1, 4, 2, 64);
        cfg.off_support_std = 1.0;
        cfg.bias = true;
        let suite = make_task_suite(&cfg).unwrap();
        let exact = closed_form_finetune(&suite.spec, &suite.base, &suite.tasks[0], 0.0).unwrap();
        let gd = sgd_finetune(&suite.spec, &suite.base, &suite.tasks[0], 3000, 0.3).unwrap();
        for (name, t) in exact.iter() {
            for (a, b) in t.data().iter().zip(gd.get(name).unwrap().data()) {
                assert!((a - b).abs() < 1e-4, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn gd_divergence_is_reported() {
        let d = data(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]);
        assert!(matches!(
            sgd_finetune(&spec1(), &w(0.0), &d, 100, 10.0),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn gradient_matches_hand_derivation() {
        // L = mean((w·x − y)²), dL/dw = 2·mean((w·x − y)·x).
        let d = data(&[1.0, 2.0], &[1.0, 1.0]);
        let (loss, g) = loss_and_gradient(&spec1(), &w(1.0), &d).unwrap();
        assert!((loss - 0.5).abs() < 1e-12);
        assert!((g["w"][0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn interference_examples() {
        let r = interference_report(
            &[tv(vec![1.0, -1.0, 2.0]), tv(vec![2.0, 1.0, -3.0])],
            &tv(vec![1.0, 1.0, 2.0]),
        )
        .unwrap();
        assert!((r.sign_conflict_fraction - 2.0 / 3.0).abs() < 1e-12);
        let a = tv(vec![0.3]);
        let b = tv(vec![0.1]);
        let mean = disjoint_mean(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(interference_report(&[a, b], &mean).unwrap().deviation_fraction, 1.0);
    }

    #[test]
    fn im_merge_has_no_deviation() {
        let base: TensorMap = [("w".to_string(), Tensor::vector(vec![0.3, -1.1, 2.0, 0.9]).unwrap())]
            .into_iter()
            .collect();
        let fp = base.fingerprint();
        let mk = |v: Vec<f32>| {
            TaskVector::from_parts(
                fp,
                [("w".to_string(), Tensor::vector(v).unwrap())].into_iter().collect(),
            )
        };
        let ds = [mk(vec![0.11, 0.2, -0.3, 0.4]), mk(vec![0.5, -0.6, 0.7, 0.13])];
        let plan = MergePlan::new(Method::TiesIm, 2);
        let sal: Vec<_> = ds.iter().map(magnitude_scores).collect();
        let (merged, _) = iterative_merge(&base, &ds, &sal, &plan).unwrap();
        let r = interference_from_models(&base, &ds, &merged).unwrap();
        assert_eq!(r.deviation_fraction, 0.0);
    }

    #[test]
    fn suite_is_deterministic_and_disjoint() {
        let mut cfg = SuiteConfig::new(3, 2, 8, 2, 16);
        cfg.hidden = Some(3);
        let a = make_task_suite(&cfg).unwrap();
        let b = make_task_suite(&cfg).unwrap();
        assert_eq!(a.base, b.base);
        assert_eq!(a.tasks, b.tasks);
        assert_eq!(a.planted, b.planted);
        assert!(a.supports[0].iter().all(|j| !a.supports[1].contains(j)));
        // First-layer deltas touch only support columns.
        for (k, p) in a.planted.iter().enumerate() {
            let d = compute_task_vector(p, &a.base).unwrap();
            let t = d.get("l0.weight").unwrap();
            for (idx, &v) in t.data().iter().enumerate() {
                if v != 0.0 {
                    assert!(a.supports[k].contains(&(idx % cfg.d_in)));
                }
            }
        }
    }

    #[test]
    fn supports_follow_overlap() {
        let mut cfg = SuiteConfig::new(0, 2, 8, 1, 8);
        cfg.overlap = 0.5;
        assert_eq!(cfg.supports(), vec![vec![0, 1, 2, 3], vec![0, 1, 4, 5]]);
        cfg.overlap = 1.0;
        assert_eq!(cfg.supports(), vec![vec![0, 1, 2, 3], vec![0, 1, 2, 3]]);
    }

    #[test]
    fn single_task_optimum_is_the_planted_model() {
        let mut cfg = SuiteConfig::new(9, 1, 5, 2, 30);
        cfg.noise_std = 0.0;
        let suite = make_task_suite(&cfg).unwrap();
        let fit = closed_form_finetune(&suite.spec, &suite.base, &suite.tasks[0], 0.0).unwrap();
        for (name, t) in suite.planted[0].iter() {
            for (a, b) in t.data().iter().zip(fit.get(name).unwrap().data()) {
                assert!((a - b).abs() < 1e-3, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn invalid_suites_are_rejected() {
        assert!(make_task_suite(&SuiteConfig::new(0, 0, 4, 1, 8)).is_err());
        assert!(make_task_suite(&SuiteConfig::new(0, 1, 4, 1, 2)).is_err());
        let mut c = SuiteConfig::new(0, 2, 4, 1, 8);
        c.overlap = 1.5;
        assert!(make_task_suite(&c).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let d = data(&[1.0, 2.0], &[3.0, 4.0]);
        let back =
            TaskDataset::from_tensor_map(&TensorMap::from_bytes(&d.to_tensor_map().to_bytes().unwrap()).unwrap())
                .unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn finetune_ridge_defaults_to_zero() {
        let f: Finetune = serde_json::from_str(r#"{"kind":"closed_form"}"#).unwrap();
        assert_eq!(f, Finetune::ClosedForm { ridge: 0.0 });
    }

    #[test]
    fn single_task_bench_reproduces_the_finetune() {
        let mut cfg = BenchConfig::new(SuiteConfig::new(2, 1, 4, 2, 20));
        cfg.suite.bias = true;
        cfg.methods = Method::ALL.to_vec();
        cfg.drop_p = 0.0;
        let res = run_bench(&cfg).unwrap();
        for r in &res.rows {
            assert!(
                (r.loss_merged - r.loss_finetuned).abs() <= 1e-6 * r.loss_finetuned.max(1e-6),
                "{r:?}"
            );
        }
    }

    #[test]
    fn csv_layout() {
        let cfg = BenchConfig::new(SuiteConfig::new(1, 2, 4, 1, 8));
        let res = run_bench(&cfg).unwrap();
        let csv = report_csv(&res.rows, 2);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,task_id,loss_base,loss_finetuned,loss_merged,sign_conflict_fraction,deviation_fraction,kept_0,kept_1"
        );
        assert_eq!(lines.count(), 3 * 3);
    }

    proptest! {
        #[test]
        fn fractions_are_in_unit_interval(a in prop::collection::vec(-2.0f32..2.0, 6), b in prop::collection::vec(-2.0f32..2.0, 6)) {
            let m = disjoint_mean(&[tv(a.clone()), tv(b.clone())]).unwrap();
            let r = interference_report(&[tv(a), tv(b)], &m).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.sign_conflict_fraction));
            prop_assert!((0.0..=1.0).contains(&r.deviation_fraction));
        }
    }
}
