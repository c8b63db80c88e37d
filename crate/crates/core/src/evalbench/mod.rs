//! Accuracy metrics, ensembles, training-size sweeps and forward timing.

mod ensemble;
mod metrics;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use ensemble::{concat_features, ensemble_average, ensemble_linear, Ensemble, LinearProbe, LinearSettings};
pub use metrics::{accuracy_metrics, confusion_diff, ConfusionDiff, EvalReport};

use crate::error::{invalid, Result};
use crate::models::{ClassifierModel, SampleSet};
use crate::tensor::{softmax_rows, Graph, Real, Tensor};

/// Eval-mode logits for a whole set, computed `batch` samples at a time.
pub fn predict_logits<F: Real>(model: &ClassifierModel<F>, set: &SampleSet, batch: usize) -> Result<Tensor<F>> {
    collect_rows(set, batch, |x| model.logits(x))
}

pub fn predict_probabilities<F: Real>(model: &ClassifierModel<F>, set: &SampleSet, batch: usize) -> Result<Tensor<F>> {
    let logits = predict_logits(model, set, batch)?;
    Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), logits.shape()[1]))
}

pub fn predict_features<F: Real>(model: &ClassifierModel<F>, set: &SampleSet, batch: usize) -> Result<Tensor<F>> {
    collect_rows(set, batch, |x| model.extract_features(x))
}

fn collect_rows<F: Real>(
    set: &SampleSet,
    batch: usize,
    mut f: impl FnMut(&Tensor<F>) -> Result<Tensor<F>>,
) -> Result<Tensor<F>> {
    if batch == 0 {
        return Err(invalid!("batch size must be positive"));
    }
    if set.is_empty() {
        return Err(invalid!("cannot predict on an empty set"));
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in idx.chunks(batch) {
        let out = f(&set.batch(chunk)?)?;
        width = out.shape()[1];
        data.extend_from_slice(out.data());
    }
    Tensor::new(vec![set.len(), width], data)
}

pub fn evaluate<F: Real>(
    model: &ClassifierModel<F>,
    set: &SampleSet,
    class_names: &[String],
    batch: usize,
) -> Result<EvalReport> {
    let preds = predict_logits(model, set, batch)?.argmax_rows();
    accuracy_metrics(&preds, &set.labels, class_names)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub cap: usize,
    pub seed: u64,
    /// Training shapes per class after capping.
    pub class_counts: Vec<usize>,
    pub report: EvalReport,
}

/// Retrains from scratch on every per-class cap and scores on `test`.
///
/// `fit` receives the capped training set and the seed and returns the
/// trained model.
pub fn sweep_training_size<F: Real>(
    caps: &[usize],
    train: &SampleSet,
    test: &SampleSet,
    class_names: &[String],
    seed: u64,
    mut fit: impl FnMut(&SampleSet, u64) -> Result<ClassifierModel<F>>,
) -> Result<Vec<SweepPoint>> {
    if caps.is_empty() {
        return Err(invalid!("training-size sweep needs at least one cap"));
    }
    let mut points = Vec::with_capacity(caps.len());
    for &cap in caps {
        let subset = train.cap_per_class(cap)?;
        let class_counts = subset.class_counts();
        log::info!("sweep cap {cap}: per-class training counts {class_counts:?}");
        let model = fit(&subset, seed)?;
        let report = evaluate(&model, test, class_names, 32)?;
        log::info!(
            "sweep cap {cap}: per-instance {:.4}, per-class {:.4}",
            report.per_instance,
            report.per_class
        );
        points.push(SweepPoint {
            cap,
            seed,
            class_counts,
            report,
        });
    }
    Ok(points)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("cap,per_instance,per_class\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.cap, p.report.per_instance, p.report.per_class);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub batch: usize,
    pub repetitions: usize,
    pub median_ms: f64,
    pub parameter_count: usize,
    /// Estimated bytes held by one forward graph at this batch size.
    pub estimated_bytes: usize,
}

/// Times eval-mode forward passes on a zero input of `batch` samples.
///
/// The memory estimate scales a single-sample graph linearly; batches whose
/// estimate exceeds `memory_budget` bytes are refused before allocating.
pub fn benchmark_forward<F: Real>(
    model: &ClassifierModel<F>,
    batch: usize,
    repetitions: usize,
    points: usize,
    memory_budget: usize,
) -> Result<Benchmark> {
    if batch == 0 || repetitions == 0 {
        return Err(invalid!("batch and repetitions must be positive"));
    }
    let one = Tensor::zeros(&model.spec().input_shape(1, points));
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g, false);
    let x = g.constant(one);
    model.run(&mut g, &bound, x, crate::models::RunMode::EVAL)?;
    let per_sample = g.value_count().saturating_sub(model.params().parameter_count());
    let estimated_bytes = (per_sample * batch + model.params().parameter_count()) * std::mem::size_of::<F>();
    if estimated_bytes > memory_budget {
        return Err(invalid!(
            "batch {batch} needs about {estimated_bytes} bytes, over the {memory_budget}-byte budget"
        ));
    }
    let input = Tensor::zeros(&model.spec().input_shape(batch, points));
    model.logits(&input)?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        model.logits(&input)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median_ms = if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    };
    Ok(Benchmark {
        batch,
        repetitions,
        median_ms,
        parameter_count: model.params().manifest().parameter_count(),
        estimated_bytes,
    })
}
