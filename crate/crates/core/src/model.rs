//! Small differentiable classifiers with exact backpropagation.
//!
//! Two architectures are supported: a linear map and a single tanh hidden
//! layer. Both end in a softmax over `n_classes` logits and are trained with
//! cross-entropy. Gradients are written out by hand; there is no autodiff.

use std::collections::HashSet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp1,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp1" => Ok(ModelKind::Mlp1),
            other => Err(Error::Parse(format!("unknown model kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp1 => "mlp1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for [`ModelKind::Linear`].
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl Architecture {
    pub fn linear(input_dim: usize, n_classes: usize) -> Self {
        Self {
            kind: ModelKind::Linear,
            input_dim,
            hidden_dim: 0,
            n_classes,
        }
    }

    pub fn mlp1(input_dim: usize, hidden_dim: usize, n_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1,
            input_dim,
            hidden_dim,
            n_classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes == 0 {
            return Err(Error::InvalidConfig("input_dim and n_classes must be positive".into()));
        }
        if self.kind == ModelKind::Mlp1 && self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("hidden_dim must be positive".into()));
        }
        Ok(())
    }

    /// (out, in) shape of every dense layer, input side first.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::Linear => vec![(self.n_classes, self.input_dim)],
            ModelKind::Mlp1 => vec![(self.hidden_dim, self.input_dim), (self.n_classes, self.hidden_dim)],
        }
    }

    fn layer_names(&self) -> &'static [&'static str] {
        match self.kind {
            ModelKind::Linear => &["output"],
            ModelKind::Mlp1 => &["hidden", "output"],
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored as (out x in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Matrix::zeros(out, inp),
            bias: vec![0.0; out],
        }
    }

    fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        for (o, (b, w)) in out.iter_mut().zip(self.bias.iter().zip(0..self.weight.rows())) {
            *o = b + dot(self.weight.row(w), x);
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Parameter-shaped container. Used both for model parameters and for
/// gradients with respect to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<Dense>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            layers: other
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
        }
    }

    /// Every parameter tensor as a flat slice: weight then bias per layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Rows of a dataset prepared for one optimization step.
///
/// `group_ids` are the ids of whatever partition the trainer weights by, which
/// need not be the dataset's four annotation groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub group_ids: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>, group_ids: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n || group_ids.len() != n || indices.len() != n {
            return Err(Error::Shape(format!(
                "batch rows disagree: {n} features, {} labels, {} groups, {} indices",
                labels.len(),
                group_ids.len(),
                indices.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = indices.iter().find(|&&i| !seen.insert(i)) {
            return Err(Error::Shape(format!("index {dup} repeated within batch")));
        }
        Ok(Self {
            features,
            labels,
            group_ids,
            indices,
        })
    }

    /// Gather `indices` from `dataset`, labelling rows with `partition[i]`.
    pub fn gather(dataset: &Dataset, indices: &[usize], partition: &[usize]) -> Batch {
        debug_assert_eq!(partition.len(), dataset.len());
        Batch {
            features: dataset.features().gather_rows(indices),
            labels: indices.iter().map(|&i| dataset.labels()[i]).collect(),
            group_ids: indices.iter().map(|&i| partition[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    /// Whole dataset as one batch, grouped by annotation group.
    pub fn from_dataset(dataset: &Dataset) -> Batch {
        Batch {
            features: dataset.features().clone(),
            labels: dataset.labels().to_vec(),
            group_ids: dataset.group_ids().to_vec(),
            indices: (0..dataset.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Post-tanh hidden activations; empty for linear models.
    hidden: Option<Matrix>,
    pub logits: Matrix,
}

impl ForwardPass {
    /// Per-row cross-entropy against `labels`.
    pub fn losses(&self, labels: &[usize]) -> Vec<f64> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| cross_entropy(self.logits.row(i), y))
            .collect()
    }
}

/// `-log softmax(logits)[label]`, stabilized by subtracting the max logit.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let (arg_max, max) =
        logits.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (j, v)| if v > acc.1 { (j, v) } else { acc },
        );
    let tail: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != arg_max)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max - logits[label]) + tail.ln_1p()
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    arch: Architecture,
    params: Params,
}

impl Model {
    /// Weights ~ Normal(0, 1/sqrt(fan_in)), biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Model> {
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let normal = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).expect("positive scale");
                let mut layer = Dense::zeros(out, inp);
                layer
                    .weight
                    .as_mut_slice()
                    .iter_mut()
                    .for_each(|w| *w = normal.sample(&mut rng));
                layer
            })
            .collect();
        Ok(Model {
            arch,
            params: Params { layers },
        })
    }

    pub fn from_params(arch: Architecture, params: Params) -> Result<Model> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if shapes.len() != params.layers.len()
            || shapes
                .iter()
                .zip(&params.layers)
                .any(|(&(o, i), l)| l.weight.shape() != (o, i) || l.bias.len() != o)
        {
            return Err(Error::Shape("parameters do not match the architecture".into()));
        }
        if !params.is_finite() {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Model { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward_pass(&self, features: &Matrix) -> Result<ForwardPass> {
        if features.cols() != self.arch.input_dim {
            return Err(Error::Shape(format!(
                "feature width {} but model expects {}",
                features.cols(),
                self.arch.input_dim
            )));
        }
        let n = features.rows();
        let output = self.params.layers.last().expect("at least one layer");
        let mut logits = Matrix::zeros(n, self.arch.n_classes);
        let hidden = match self.arch.kind {
            ModelKind::Linear => {
                for i in 0..n {
                    output.apply_row(features.row(i), logits.row_mut(i));
                }
                None
            }
            ModelKind::Mlp1 => {
                let first = &self.params.layers[0];
                let mut hidden = Matrix::zeros(n, self.arch.hidden_dim);
                for i in 0..n {
                    let h = hidden.row_mut(i);
                    first.apply_row(features.row(i), h);
                    h.iter_mut().for_each(|v| *v = v.tanh());
                    output.apply_row(h, logits.row_mut(i));
                }
                Some(hidden)
            }
        };
        Ok(ForwardPass { hidden, logits })
    }

    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_pass(features)?.logits)
    }

    pub fn loss_per_sample(&self, batch: &Batch) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(self.forward_pass(&batch.features)?.losses(&batch.labels))
    }

    /// Argmax prediction; ties go to the lower class id.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(features)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Gradient of `sum_i weights[i] * loss_i`.
    pub fn grad(&self, batch: &Batch, sample_weights: &[f64]) -> Result<Params> {
        let pass = self.forward_pass(&batch.features)?;
        self.backward(&pass, batch, sample_weights)
    }

    /// Backward pass reusing the activations of `pass`, which must come from
    /// `self.forward_pass(&batch.features)`.
    pub fn backward(&self, pass: &ForwardPass, batch: &Batch, sample_weights: &[f64]) -> Result<Params> {
        if sample_weights.len() != batch.len() {
            return Err(Error::Shape(format!(
                "{} sample weights for a batch of {}",
                sample_weights.len(),
                batch.len()
            )));
        }
        if let Some(w) = sample_weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("invalid sample weight {w}")));
        }
        let mut grad = Params::zeros_like(&self.params);
        let n_classes = self.arch.n_classes;
        let mut delta = vec![0.0; n_classes];
        let mut hidden_delta = vec![0.0; self.arch.hidden_dim];
        let out_idx = grad.layers.len() - 1;

        for i in 0..batch.len() {
            let w = sample_weights[i];
            if w == 0.0 {
                continue;
            }
            softmax_into(pass.logits.row(i), &mut delta);
            delta[batch.labels[i]] -= 1.0;
            delta.iter_mut().for_each(|d| *d *= w);

            let x = batch.features.row(i);
            let input_to_output = match &pass.hidden {
                Some(h) => h.row(i),
                None => x,
            };
            accumulate_outer(&mut grad.layers[out_idx], &delta, input_to_output);

            if let Some(h) = &pass.hidden {
                let h = h.row(i);
                let output = &self.params.layers[1].weight;
                for (k, hd) in hidden_delta.iter_mut().enumerate() {
                    let back: f64 = (0..n_classes).map(|c| output.get(c, k) * delta[c]).sum();
                    *hd = back * (1.0 - h[k] * h[k]);
                }
                accumulate_outer(&mut grad.layers[0], &hidden_delta, x);
            }
        }
        Ok(grad)
    }

    /// `p <- p - lr * (grad + weight_decay * p)`.
    pub fn sgd_step(&mut self, grad: &Params, learning_rate: f64, weight_decay: f64) {
        let shrink = 1.0 - learning_rate * weight_decay;
        for (p, g) in self.params.tensors_mut().into_iter().zip(grad.tensors()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv = shrink * *pv - learning_rate * gv;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }
}

fn accumulate_outer(layer: &mut Dense, delta: &[f64], input: &[f64]) {
    for (r, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        layer.bias[r] += d;
        for (g, &x) in layer.weight.row_mut(r).iter_mut().zip(input) {
            *g += d * x;
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// On-disk model: architecture plus named tensors with explicit shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    arch: Architecture,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl From<&Model> for ModelFile {
    fn from(model: &Model) -> Self {
        let tensors = model
            .arch
            .layer_names()
            .iter()
            .zip(&model.params.layers)
            .flat_map(|(name, layer)| {
                [
                    TensorEntry {
                        name: format!("{name}.weight"),
                        shape: vec![layer.weight.rows(), layer.weight.cols()],
                        values: layer.weight.as_slice().to_vec(),
                    },
                    TensorEntry {
                        name: format!("{name}.bias"),
                        shape: vec![layer.bias.len()],
                        values: layer.bias.clone(),
                    },
                ]
            })
            .collect();
        ModelFile {
            arch: model.arch,
            tensors,
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<Model> {
        let names = self.arch.layer_names();
        if self.tensors.len() != 2 * names.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                2 * names.len(),
                self.tensors.len()
            )));
        }
        let mut layers = Vec::with_capacity(names.len());
        for (name, pair) in names.iter().zip(self.tensors.chunks(2)) {
            let (w, b) = (&pair[0], &pair[1]);
            if w.name != format!("{name}.weight") || b.name != format!("{name}.bias") {
                return Err(Error::Parse(format!("unexpected tensors {} / {}", w.name, b.name)));
            }
            let [rows, cols] = w.shape[..] else {
                return Err(Error::Shape(format!("{} must be 2-d", w.name)));
            };
            if b.shape != [b.values.len()] {
                return Err(Error::Shape(format!("{} shape does not match its values", b.name)));
            }
            layers.push(Dense {
                weight: Matrix::from_vec(rows, cols, w.values.clone())?,
                bias: b.values.clone(),
            });
        }
        Model::from_params(self.arch, Params { layers })
    }
}
