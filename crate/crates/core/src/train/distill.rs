use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::cache::{read_f32, read_json, write_f32, write_json};
use crate::error::{dim_err, invalid, Result};
use crate::models::{ClassifierModel, SampleSet};
use crate::tensor::{softmax_rows, Graph, Real, Targets, Var};

/// Temperature and weight of the soft-target term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSettings {
    pub temperature: f64,
    pub weight: f64,
    /// Multiply the soft term by `T^2`. Off by default.
    #[serde(default)]
    pub compensate_temperature: bool,
}

impl DistillSettings {
    pub fn new(temperature: f64, weight: f64) -> Self {
        DistillSettings {
            temperature,
            weight,
            compensate_temperature: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid!("distillation temperature must be positive, got {}", self.temperature));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(invalid!("distillation weight must be non-negative, got {}", self.weight));
        }
        Ok(())
    }
}

/// Cross-entropy to the hard labels plus `weight` times the cross-entropy
/// between the temperature-softened teacher and student distributions.
/// Both terms are batch means. With zero weight only the hard term is built.
pub fn distill_loss<F: Real>(
    g: &mut Graph<F>,
    student: Var,
    teacher: &[F],
    labels: &[usize],
    settings: &DistillSettings,
) -> Result<Var> {
    settings.validate()?;
    let hard = g.softmax_cross_entropy(student, Targets::Classes(labels))?;
    if settings.weight == 0.0 {
        return Ok(hard);
    }
    let shape = g.shape(student).to_vec();
    if teacher.len() != shape[0] * shape[1] {
        return Err(dim_err!("teacher logits hold {} values, student {shape:?}", teacher.len()));
    }
    let inv_t = F::of(1.0 / settings.temperature);
    let softened: Vec<F> = teacher.iter().map(|&x| x * inv_t).collect();
    let targets = softmax_rows(&softened, shape[1]);
    let scaled = g.scale(student, inv_t)?;
    let soft = g.softmax_cross_entropy(scaled, Targets::Probabilities(&targets))?;
    let mut w = settings.weight;
    if settings.compensate_temperature {
        w *= settings.temperature * settings.temperature;
    }
    let weighted = g.scale(soft, F::of(w))?;
    g.add(hard, weighted)
}

/// Teacher logits for the training shapes, keyed by shape id.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherLogits {
    num_classes: usize,
    ids: Vec<String>,
    logits: Vec<f32>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TeacherIndex {
    num_classes: usize,
    ids: Vec<String>,
}

impl TeacherLogits {
    pub fn new(num_classes: usize, ids: Vec<String>, logits: Vec<f32>) -> Result<Self> {
        if logits.len() != ids.len() * num_classes {
            return Err(dim_err!(
                "{} teacher logits for {} shapes and {num_classes} classes",
                logits.len(),
                ids.len()
            ));
        }
        let index: HashMap<String, usize> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        if index.len() != ids.len() {
            return Err(invalid!("teacher logits list a shape id twice"));
        }
        Ok(TeacherLogits {
            num_classes,
            ids,
            logits,
            index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        let c = self.num_classes;
        self.index.get(id).map(|&i| &self.logits[i * c..(i + 1) * c])
    }

    /// Errors listing every id without stored logits.
    pub fn require(&self, ids: &[String]) -> Result<()> {
        let missing: Vec<&str> = ids
            .iter()
            .filter(|id| !self.index.contains_key(id.as_str()))
            .map(String::as_str)
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(invalid!("no teacher logits for: {}", missing.join(", ")))
        }
    }

    /// Writes `<stem>.bin` (n x C binary32) and `<stem>.json` (id index).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_f32(&dir.join(format!("{stem}.bin")), self.logits.iter().copied())?;
        write_json(
            &dir.join(format!("{stem}.json")),
            &TeacherIndex {
                num_classes: self.num_classes,
                ids: self.ids.clone(),
            },
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let idx: TeacherIndex = read_json(&dir.join(format!("{stem}.json")))?;
        let logits = read_f32(&dir.join(format!("{stem}.bin")))?;
        Self::new(idx.num_classes, idx.ids, logits)
    }
}

/// Eval-mode logits of `teacher` for each of `ids`, looked up in `set`
/// (the teacher's own representation of the shapes).
pub fn extract_teacher_logits<F: Real>(
    teacher: &ClassifierModel<F>,
    set: &SampleSet,
    ids: &[String],
    batch_size: usize,
) -> Result<TeacherLogits> {
    let position: HashMap<&str, usize> = set.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let missing: Vec<&str> = ids
        .iter()
        .filter(|id| !position.contains_key(id.as_str()))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        return Err(invalid!("teacher representation missing for: {}", missing.join(", ")));
    }
    let order: Vec<usize> = ids.iter().map(|id| position[id.as_str()]).collect();
    let mut logits = Vec::with_capacity(ids.len() * teacher.num_classes());
    for chunk in order.chunks(batch_size.max(1)) {
        let out = teacher.logits(&set.batch::<F>(chunk)?)?;
        logits.extend(out.data().iter().map(|v| v.as_f64() as f32));
    }
    TeacherLogits::new(teacher.num_classes(), ids.to_vec(), logits)
}
