use serde::{Deserialize, Serialize};

use super::metrics::{accuracy_metrics, EvalReport};
use crate::error::{dim_err, invalid, Result};
use crate::tensor::{Graph, Real, Targets, Tensor};
use crate::train::{adam_step, AdamConfig, OptimizerState};
use crate::tensor::serialize::ParamStore;

/// Mean of per-model class probabilities and its row-wise argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble<F> {
    pub probabilities: Tensor<F>,
    pub predictions: Vec<usize>,
}

pub fn ensemble_average<F: Real>(sets: &[Tensor<F>]) -> Result<Ensemble<F>> {
    let first = sets.first().ok_or_else(|| invalid!("no prediction sets to average"))?;
    if first.rank() != 2 {
        return Err(dim_err!("prediction sets must be [B, C], got {:?}", first.shape()));
    }
    let classes = first.shape()[1];
    for s in sets {
        if s.shape() != first.shape() {
            return Err(dim_err!("prediction sets differ in shape: {:?} vs {:?}", s.shape(), first.shape()));
        }
        for (r, row) in s.data().chunks(classes).enumerate() {
            let total: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (total - 1.0).abs() > 1e-4 || row.iter().any(|&v| v < F::zero()) {
                return Err(invalid!("row {r} is not a probability distribution (sum {total})"));
            }
        }
    }
    let inv = F::of(1.0 / sets.len() as f64);
    let mut mean = vec![F::zero(); first.len()];
    for s in sets {
        for (m, &v) in mean.iter_mut().zip(s.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let probabilities = Tensor::new(first.shape().to_vec(), mean)?;
    let predictions = probabilities.argmax_rows();
    Ok(Ensemble {
        probabilities,
        predictions,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearSettings {
    /// L2 penalty `reg / 2 * |W|^2` on the weights.
    pub regularization: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for LinearSettings {
    fn default() -> Self {
        LinearSettings {
            regularization: 1e-3,
            steps: 300,
            learning_rate: 0.05,
        }
    }
}

/// Multinomial logistic regression on standardized, concatenated features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe<F> {
    pub mean: Vec<F>,
    pub scale: Vec<F>,
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> LinearProbe<F> {
    fn standardize(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let d = self.mean.len();
        if x.rank() != 2 || x.shape()[1] != d {
            return Err(dim_err!("probe expects [N, {d}] features, got {:?}", x.shape()));
        }
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.scale).map(|((&v, &m), &s)| (v - m) * s))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn logits(&self, features: &Tensor<F>) -> Result<Tensor<F>> {
        let x = self.standardize(features)?;
        let mut g = Graph::new();
        let (x, w, b) = (g.constant(x), g.constant(self.weight.clone()), g.constant(self.bias.clone()));
        let out = g.dense(x, w, b)?;
        Ok(g.value(out).clone())
    }
}

/// Concatenates per-model feature blocks column-wise.
pub fn concat_features<F: Real>(blocks: &[Tensor<F>]) -> Result<Tensor<F>> {
    let first = blocks.first().ok_or_else(|| invalid!("no feature blocks"))?;
    let rows = first.shape()[0];
    if blocks.iter().any(|b| b.rank() != 2 || b.shape()[0] != rows) {
        return Err(dim_err!("feature blocks disagree on the number of shapes"));
    }
    let width: usize = blocks.iter().map(|b| b.shape()[1]).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for b in blocks {
            let d = b.shape()[1];
            data.extend_from_slice(&b.data()[r * d..(r + 1) * d]);
        }
    }
    Tensor::new(vec![rows, width], data)
}

/// Trains a linear classifier on the concatenated training features of
/// several models and scores it on their test features.
pub fn ensemble_linear<F: Real>(
    train: &[Tensor<F>],
    train_labels: &[usize],
    test: &[Tensor<F>],
    test_labels: &[usize],
    class_names: &[String],
    settings: &LinearSettings,
) -> Result<(LinearProbe<F>, EvalReport)> {
    if train.len() != test.len() {
        return Err(invalid!("{} training feature sets but {} test sets", train.len(), test.len()));
    }
    for (a, b) in train.iter().zip(test) {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(dim_err!(
                "train features {:?} and test features {:?} do not match",
                a.shape(),
                b.shape()
            ));
        }
    }
    let x = concat_features(train)?;
    let xt = concat_features(test)?;
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if train_labels.len() != n || test_labels.len() != xt.shape()[0] {
        return Err(dim_err!("feature rows and labels differ in count"));
    }
    let c = class_names.len();
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in x.data().chunks(d) {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += v.as_f64();
            sq[j] += v.as_f64() * v.as_f64();
        }
    }
    let scale: Vec<F> = (0..d)
        .map(|j| {
            let m = mean[j] / n as f64;
            let var = (sq[j] / n as f64 - m * m).max(0.0);
            F::of(if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 })
        })
        .collect();
    let mean: Vec<F> = mean.iter().map(|m| F::of(m / n as f64)).collect();
    let mut probe = LinearProbe {
        mean,
        scale,
        weight: Tensor::zeros(&[d, c]),
        bias: Tensor::zeros(&[c]),
    };
    let xs = probe.standardize(&x)?;

    let mut store = ParamStore::new();
    store.insert("weight", probe.weight.clone());
    store.insert("bias", probe.bias.clone());
    let mut opt = OptimizerState::new(AdamConfig::new(settings.learning_rate, 0.0))?;
    for _ in 0..settings.steps {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, true);
        let (w, b) = (bound.get("weight")?, bound.get("bias")?);
        let input = g.constant(xs.clone());
        let logits = g.dense(input, w, b)?;
        let ce = g.softmax_cross_entropy(logits, Targets::Classes(train_labels))?;
        let sq = g.mul(w, w)?;
        let sq = g.sum(sq)?;
        let penalty = g.scale(sq, F::of(settings.regularization / 2.0))?;
        let loss = g.add(ce, penalty)?;
        g.backward(loss)?;
        let grads = bound
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t)))
            .collect();
        adam_step(&mut store, &grads, &mut opt)?;
    }
    probe.weight = store.get("weight")?.clone();
    probe.bias = store.get("bias")?.clone();
    let predictions = probe.logits(&xt)?.argmax_rows();
    let report = accuracy_metrics(&predictions, test_labels, class_names)?;
    Ok((probe, report))
}
