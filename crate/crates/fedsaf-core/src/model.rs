//! Small from-scratch differentiable classifiers over flat parameter
//! vectors: multinomial logistic regression and one-hidden-layer-style
//! ReLU MLPs, with softmax negative log-likelihood, analytic gradients,
//! SGD steps, and evaluation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics;
use crate::params::{LayerSchema, ParamVector};
use crate::seed;

/// Hidden-layer activation. Only ReLU is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture of the classifier every client trains.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        })
    }

    /// Layer width chain: input, hidden..., classes.
    fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    /// Parameter layout: one schema layer per {weights, bias} pair.
    pub fn schema(&self) -> LayerSchema {
        let dims = self.dims();
        LayerSchema::new(
            dims.windows(2)
                .map(|w| (vec![w[1], w[0]], w[1] * w[0] + w[1]))
                .collect(),
        )
    }

    pub fn num_params(&self) -> usize {
        self.schema().total_len()
    }
}

/// A batch of feature rows and their class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Integrity(format!(
                "{} feature rows for {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Accuracy, macro one-vs-rest AUC, and mean NLL on a batch.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    pub accuracy: f64,
    /// NaN when undefined (no class has both positives and negatives).
    pub auc: f64,
    pub loss: f64,
}

/// Glorot-uniform weights, zero biases; deterministic per seed.
pub fn init_params(spec: &ModelSpec, seed_value: u64) -> ParamVector {
    let mut rng = seed::rng_from(seed_value);
    let dims = spec.dims();
    let mut values = Vec::with_capacity(spec.num_params());
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-limit..limit));
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(values)
}

fn check_shapes(params: &ParamVector, spec: &ModelSpec, feature_width: usize) -> Result<()> {
    if params.len() != spec.num_params() {
        return Err(Error::Integrity(format!(
            "parameter vector length {} does not match model ({} expected)",
            params.len(),
            spec.num_params()
        )));
    }
    if feature_width != spec.input_dim {
        return Err(Error::Integrity(format!(
            "feature width {} does not match model input_dim {}",
            feature_width, spec.input_dim
        )));
    }
    Ok(())
}

/// Per-layer affine transform `a * W^T + b` over the flat parameter slice.
fn affine(a: &Array2<f64>, values: &[f64], offset: usize, inp: usize, out: usize) -> Array2<f64> {
    let w = ArrayView2::from_shape((out, inp), &values[offset..offset + out * inp])
        .expect("weight slice matches shape");
    let b = &values[offset + out * inp..offset + out * inp + out];
    let mut z = a.dot(&w.t());
    let b = Array1::from_iter(b.iter().copied());
    z += &b;
    z
}

/// Forward pass through all layers; returns the activations after every
/// layer (index 0 is the input), the last entry being the logits.
fn forward_all(params: &ParamVector, spec: &ModelSpec, inputs: &Array2<f64>) -> Vec<Array2<f64>> {
    let dims = spec.dims();
    let values = params.as_slice();
    let num_layers = dims.len() - 1;
    let mut acts = Vec::with_capacity(num_layers + 1);
    acts.push(inputs.clone());
    let mut offset = 0;
    for (l, w) in dims.windows(2).enumerate() {
        let (inp, out) = (w[0], w[1]);
        let mut z = affine(acts.last().unwrap(), values, offset, inp, out);
        if l + 1 < num_layers {
            z.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(z);
        offset += out * inp + out;
    }
    acts
}

/// Per-sample class scores (logits).
pub fn forward(
    params: &ParamVector,
    spec: &ModelSpec,
    inputs: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_shapes(params, spec, inputs.ncols())?;
    Ok(forward_all(params, spec, inputs).pop().unwrap())
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Mean softmax cross-entropy over the batch.
pub fn nll_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("nll_loss on an empty batch".into()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Integrity(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let num_classes = logits.ncols();
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        if label >= num_classes {
            return Err(Error::Integrity(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[label];
    }
    Ok(total / labels.len() as f64)
}

/// Analytic gradient of `nll_loss(forward(params, batch))` with respect to
/// every parameter, in schema order.
pub fn gradient(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<ParamVector> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient on an empty batch".into()));
    }
    check_shapes(params, spec, batch.inputs.ncols())?;
    let dims = spec.dims();
    let num_layers = dims.len() - 1;
    let acts = forward_all(params, spec, &batch.inputs);
    let logits = &acts[num_layers];
    let n = batch.len() as f64;

    // delta = (softmax - onehot) / n at the output
    let mut delta = softmax_rows(logits);
    for (mut row, &label) in delta.rows_mut().into_iter().zip(&batch.labels) {
        if label >= spec.num_classes {
            return Err(Error::Integrity(format!(
                "label {} out of range for {} classes",
                label, spec.num_classes
            )));
        }
        row[label] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n);

    let mut grad = vec![0.0; spec.num_params()];
    let values = params.as_slice();
    let mut offsets = Vec::with_capacity(num_layers);
    let mut off = 0;
    for w in dims.windows(2) {
        offsets.push(off);
        off += w[1] * w[0] + w[1];
    }

    for l in (0..num_layers).rev() {
        let (inp, out) = (dims[l], dims[l + 1]);
        let offset = offsets[l];
        let grad_w = delta.t().dot(&acts[l]); // out x in
        let grad_b = delta.sum_axis(Axis(0)); // out
        grad[offset..offset + out * inp]
            .copy_from_slice(grad_w.as_standard_layout().as_slice().unwrap());
        grad[offset + out * inp..offset + out * inp + out]
            .copy_from_slice(grad_b.as_slice().unwrap());
        if l > 0 {
            let w = ArrayView2::from_shape((out, inp), &values[offset..offset + out * inp])
                .expect("weight slice matches shape");
            let mut prev = delta.dot(&w);
            // ReLU mask: activations of layer l are zero where the unit was inactive
            prev.zip_mut_with(&acts[l], |d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = prev;
        }
    }
    Ok(ParamVector::new(grad))
}

/// One plain gradient step `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    if params.len() != grad.len() {
        return Err(Error::Integrity(format!(
            "gradient length {} does not match parameter length {}",
            grad.len(),
            params.len()
        )));
    }
    Ok(ParamVector::new(
        params
            .iter()
            .zip(grad.iter())
            .map(|(p, g)| p - lr * g)
            .collect(),
    ))
}

/// Accuracy (argmax, ties broken toward the lowest class index), macro
/// one-vs-rest AUC, and mean NLL on a batch.
pub fn evaluate(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::Empty("evaluate on an empty batch".into()));
    }
    let logits = forward(params, spec, &batch.inputs)?;
    let loss = nll_loss(&logits, &batch.labels)?;
    let mut correct = 0usize;
    for (row, &label) in logits.rows().into_iter().zip(&batch.labels) {
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    let probs = softmax_rows(&logits);
    let auc = metrics::macro_auc(&probs, &batch.labels);
    Ok(Evaluation {
        accuracy: correct as f64 / batch.len() as f64,
        auc,
        loss,
    })
}
