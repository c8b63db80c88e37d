use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{default_ladder, hardest_targets, linf, min_epsilon_search, AttackCase, AttackConfig, AttackOutcome};
use crate::error::{invalid, Error, Result};
use crate::models::{ClassifierModel, InputKind, SampleSet};
use crate::tensor::{Real, Tensor};

/// Which target classes the non-reference models are attacked towards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// The hardest class under each of the two reference models.
    #[default]
    Reference,
    /// The model's own two lowest-scoring classes.
    Own,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub per_class: usize,
    pub ladder: Vec<f64>,
    pub step_size: f64,
    pub max_iterations: usize,
    pub sign_step: bool,
    pub target_mode: TargetMode,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            per_class: 5,
            ladder: default_ladder(),
            step_size: 1e-3,
            max_iterations: 1000,
            sign_step: false,
            target_mode: TargetMode::Reference,
        }
    }
}

/// A model under test together with its view of the test set.
pub struct ReportModel<'a, F> {
    pub name: String,
    pub model: &'a ClassifierModel<F>,
    pub test: &'a SampleSet,
    /// Value range of the input; `[0, 1]` for occupancy, none for points.
    pub clamp: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub model: String,
    pub shape_id: String,
    pub label: usize,
    pub target: usize,
    /// Model whose hardest class chose the target.
    pub target_source: String,
    pub success: bool,
    pub epsilon: Option<f64>,
    pub iterations: Option<usize>,
    pub linf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub input: InputKind,
    pub cases: usize,
    pub successes: usize,
    pub mean_epsilon: Option<f64>,
    /// Population standard deviation over successful cases.
    pub std_epsilon: Option<f64>,
    pub clean_accuracy: f64,
    /// Radii on point coordinates and on occupancy values are not comparable.
    pub epsilon_units: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub config: ProtocolConfig,
    pub summaries: Vec<ModelSummary>,
    pub cases: Vec<CaseRecord>,
}

impl RobustnessReport {
    pub fn summary(&self, model: &str) -> Option<&ModelSummary> {
        self.summaries.iter().find(|s| s.model == model)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,successes,cases,mean_epsilon,std_epsilon,clean_accuracy,epsilon_units\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{}",
                s.model,
                s.successes,
                s.cases,
                opt(s.mean_epsilon),
                opt(s.std_epsilon),
                s.clean_accuracy,
                s.epsilon_units
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// The first `per_class` shapes of every class, in set order.
pub fn select_cases(test: &SampleSet, per_class: usize) -> Vec<usize> {
    let mut taken = vec![0usize; test.num_classes];
    let mut out = Vec::new();
    for (i, &y) in test.labels.iter().enumerate() {
        if taken[y] < per_class {
            taken[y] += 1;
            out.push(i);
        }
    }
    for (c, &n) in taken.iter().enumerate() {
        if n < per_class {
            log::warn!("class {c} has only {n} test shapes, fewer than {per_class}");
        }
    }
    out
}

fn predictions<F: Real>(model: &ClassifierModel<F>, set: &SampleSet) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(32) {
        out.extend(model.logits(&set.batch::<F>(chunk)?)?.argmax_rows());
    }
    Ok(out)
}

/// Two lowest-scoring classes per row, lowest first.
fn two_lowest<F: Real>(logits: &Tensor<F>) -> Vec<[usize; 2]> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal));
            [order[0], order[1.min(c - 1)]]
        })
        .collect()
}

/// Paired-target attack protocol. The first `per_class` test shapes of each
/// class (taken from the first reference model's test set) get one target
/// from each reference model; every model is then searched for the minimum
/// radius at which it predicts each target. Outcomes are returned in the
/// order of the case records.
#[allow(clippy::type_complexity)]
pub fn robustness_report<F: Real>(
    models: &[ReportModel<'_, F>],
    references: [usize; 2],
    config: &ProtocolConfig,
) -> Result<(RobustnessReport, Vec<Vec<AttackOutcome<F>>>)> {
    if references.iter().any(|&r| r >= models.len()) {
        return Err(invalid!("reference model index out of range"));
    }
    let base = models[references[0]].test;
    let chosen = select_cases(base, config.per_class);
    let ids: Vec<&str> = chosen.iter().map(|&i| base.ids[i].as_str()).collect();
    let labels: Vec<usize> = chosen.iter().map(|&i| base.labels[i]).collect();

    // Row of every chosen shape in each model's own test set.
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(models.len());
    for m in models {
        let pos: HashMap<&str, usize> = m.test.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let missing: Vec<&str> = ids.iter().copied().filter(|id| !pos.contains_key(id)).collect();
        if !missing.is_empty() {
            return Err(invalid!("{} test set lacks: {}", m.name, missing.join(", ")));
        }
        rows.push(ids.iter().map(|id| pos[id]).collect());
    }
    let mut reference_targets = Vec::with_capacity(2);
    for &r in &references {
        let m = &models[r];
        let batch = m.test.batch::<F>(&rows[r])?;
        reference_targets.push(hardest_targets(m.model, &batch)?);
    }

    let mut records = Vec::new();
    let mut outcomes = Vec::with_capacity(models.len());
    let mut summaries = Vec::with_capacity(models.len());
    for (mi, m) in models.iter().enumerate() {
        let own = if config.target_mode == TargetMode::Own && !references.contains(&mi) {
            let batch = m.test.batch::<F>(&rows[mi])?;
            Some(two_lowest(&m.model.logits(&batch)?))
        } else {
            None
        };
        let mut cases = Vec::with_capacity(2 * ids.len());
        let mut meta = Vec::with_capacity(2 * ids.len());
        for (k, &row) in rows[mi].iter().enumerate() {
            let input = m.test.batch::<F>(&[row])?;
            for slot in 0..2 {
                let (target, source) = match &own {
                    Some(t) => (t[k][slot], m.name.clone()),
                    None => (
                        reference_targets[slot][k],
                        models[references[slot]].name.clone(),
                    ),
                };
                cases.push(AttackCase {
                    input: input.clone(),
                    target,
                });
                meta.push((k, source));
            }
        }
        let attack = AttackConfig {
            step_size: config.step_size,
            epsilon: 0.0,
            max_iterations: config.max_iterations,
            clamp: m.clamp,
            sign_step: config.sign_step,
        };
        let found = min_epsilon_search(m.model, &cases, &config.ladder, &attack)?;

        let mut eps = Vec::new();
        for ((case, out), (k, source)) in cases.iter().zip(&found).zip(meta) {
            let distance = linf(case.input.data(), out.perturbed.data());
            if out.success {
                verify(m, case, out, distance)?;
                eps.push(out.epsilon.expect("success records epsilon"));
            }
            records.push(CaseRecord {
                model: m.name.clone(),
                shape_id: ids[k].to_string(),
                label: labels[k],
                target: out.target,
                target_source: source,
                success: out.success,
                epsilon: out.epsilon,
                iterations: out.iterations,
                linf: distance,
            });
        }
        let (mean, std) = if eps.is_empty() {
            (None, None)
        } else {
            let n = eps.len() as f64;
            let mean = eps.iter().sum::<f64>() / n;
            let var = eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
            (Some(mean), Some(var.sqrt()))
        };
        let preds = predictions(m.model, m.test)?;
        let correct = preds.iter().zip(&m.test.labels).filter(|(p, y)| p == y).count();
        let kind = m.model.spec().architecture.input_kind();
        summaries.push(ModelSummary {
            model: m.name.clone(),
            input: kind,
            cases: cases.len(),
            successes: eps.len(),
            mean_epsilon: mean,
            std_epsilon: std,
            clean_accuracy: correct as f64 / m.test.len().max(1) as f64,
            epsilon_units: match kind {
                InputKind::Points => "coordinates".into(),
                _ => "occupancy".into(),
            },
        });
        log::info!("{}: {} of {} attacks succeeded", m.name, eps.len(), cases.len());
        outcomes.push(found);
    }
    Ok((
        RobustnessReport {
            config: config.clone(),
            summaries,
            cases: records,
        },
        outcomes,
    ))
}

/// Re-checks a reported success against the model and the constraints.
fn verify<F: Real>(m: &ReportModel<'_, F>, case: &AttackCase<F>, out: &AttackOutcome<F>, distance: f64) -> Result<()> {
    let eps = out.epsilon.unwrap_or(0.0);
    if distance > eps + 1e-7 {
        return Err(invalid!("{}: perturbation {distance} exceeds radius {eps}", m.name));
    }
    if let Some([lo, hi]) = m.clamp {
        if out.perturbed.data().iter().any(|v| v.as_f64() < lo || v.as_f64() > hi) {
            return Err(invalid!("{}: perturbed input leaves [{lo}, {hi}]", m.name));
        }
    }
    let pred = m.model.logits(&out.perturbed)?.argmax_rows()[0];
    if pred != case.target {
        return Err(invalid!("{}: reported success predicts {pred}, target {}", m.name, case.target));
    }
    Ok(())
}
