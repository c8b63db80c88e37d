use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Fraction of all test shapes classified correctly.
    pub per_instance: f64,
    /// Unweighted mean of per-class recall over classes with test shapes.
    pub per_class: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// Classes without test shapes, left out of the per-class mean.
    pub empty_classes: Vec<usize>,
}

impl EvalReport {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_recall(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect()
    }

    pub fn confusion_csv(&self) -> String {
        matrix_csv(&self.class_names, &self.confusion)
    }
}

fn matrix_csv<T: std::fmt::Display>(names: &[String], rows: &[Vec<T>]) -> String {
    let mut out = String::from("true\\predicted");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (n, row) in names.iter().zip(rows) {
        out.push_str(n);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn accuracy_metrics(predictions: &[usize], labels: &[usize], class_names: &[String]) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(dim_err!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        ));
    }
    if predictions.is_empty() {
        return Err(invalid!("no predictions to score"));
    }
    let c = class_names.len();
    if let Some(v) = predictions.iter().chain(labels).find(|&&v| v >= c) {
        return Err(invalid!("class index {v} out of range for {c} classes"));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let mut recalls = Vec::with_capacity(c);
    let mut empty_classes = Vec::new();
    for (k, row) in confusion.iter().enumerate() {
        let n: usize = row.iter().sum();
        if n == 0 {
            empty_classes.push(k);
        } else {
            recalls.push(row[k] as f64 / n as f64);
        }
    }
    if !empty_classes.is_empty() {
        log::warn!(
            "classes {empty_classes:?} have no test shapes and are left out of per-class accuracy"
        );
    }
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        per_instance: correct as f64 / labels.len() as f64,
        per_class: recalls.iter().sum::<f64>() / recalls.len() as f64,
        confusion,
        predictions: predictions.to_vec(),
        labels: labels.to_vec(),
        empty_classes,
    })
}

/// Signed `A - B` confusion counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionDiff {
    pub class_names: Vec<String>,
    pub diff: Vec<Vec<i64>>,
}

impl ConfusionDiff {
    pub fn to_csv(&self) -> String {
        matrix_csv(&self.class_names, &self.diff)
    }
}

pub fn confusion_diff(a: &EvalReport, b: &EvalReport) -> Result<ConfusionDiff> {
    if a.class_names != b.class_names {
        return Err(invalid!("reports cover different class sets"));
    }
    let diff = a
        .confusion
        .iter()
        .zip(&b.confusion)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| x as i64 - y as i64).collect())
        .collect();
    Ok(ConfusionDiff {
        class_names: a.class_names.clone(),
        diff,
    })
}
