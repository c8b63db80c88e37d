//! Adam, the supervised and distillation training loops, and two-stage
//! multiview training.

mod adam;
mod distill;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use distill::{distill_loss, extract_teacher_logits, DistillSettings, TeacherLogits};

use crate::dataio::{UpAxis, STEPS_PER_TURN};
use crate::error::{invalid, Error, Result};
use crate::models::{sample_tensor, Architecture, ClassifierModel, RunMode, Sample, SampleSet};
use crate::tensor::{Graph, Real, Targets};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Turn each training sample by a random multiple of 30 degrees about
    /// the up axis every time it is drawn.
    pub augment: bool,
    pub up_axis: UpAxis,
    pub seed: u64,
    /// Skip the final partial batch of each epoch.
    pub drop_last: bool,
    /// Max over views for multiview models; off classifies views separately.
    pub pool_views: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            augment: false,
            up_axis: UpAxis::Z,
            seed: 0,
            drop_last: true,
            pool_views: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid!("epochs and batch size must be positive"));
        }
        AdamConfig::new(self.learning_rate, self.weight_decay).validate()
    }

    fn batches(&self, n: usize) -> usize {
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}

/// What the training loss compares the logits with.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    CrossEntropy,
    Distill {
        settings: DistillSettings,
        teacher: &'a TeacherLogits,
    },
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub class_accuracy: Vec<f64>,
    pub wall_time_s: f64,
}

fn check_representation(model: &Architecture, data: &SampleSet) -> Result<()> {
    match data.kind() {
        None => Err(invalid!("training set is empty")),
        Some(k) if k != model.input_kind() => Err(invalid!(
            "{} consumes {:?} but the data holds {k:?}",
            model.tag(),
            model.input_kind()
        )),
        Some(_) => Ok(()),
    }
}

/// Mini-batch Adam training. Returns one metrics record per epoch and, when
/// `log` is given, writes each as a JSON line there.
pub fn train_classifier<F: Real>(
    model: &mut ClassifierModel<F>,
    data: &SampleSet,
    schedule: &TrainSchedule,
    objective: Objective<'_>,
    log: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    schedule.validate()?;
    check_representation(&model.spec().architecture, data)?;
    if data.num_classes != model.num_classes() {
        return Err(invalid!(
            "data has {} classes, the model {}",
            data.num_classes,
            model.num_classes()
        ));
    }
    let n = data.len();
    let batches = schedule.batches(n);
    if batches == 0 {
        return Err(invalid!(
            "{n} samples give no batch of size {} per epoch",
            schedule.batch_size
        ));
    }
    if let Objective::Distill { settings, teacher } = &objective {
        settings.validate()?;
        teacher.require(&data.ids)?;
        if teacher.num_classes() != model.num_classes() {
            return Err(invalid!("teacher and student class counts differ"));
        }
    }
    let strides: Vec<usize> = if schedule.augment {
        data.samples
            .iter()
            .map(|s| {
                s.rotation_stride()
                    .ok_or_else(|| invalid!("view rings must divide the 12 rotation steps"))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut log_file = match log {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };

    let classes = model.num_classes();
    let mode = RunMode {
        train: true,
        pool_views: schedule.pool_views,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut opt = OptimizerState::new(AdamConfig::new(schedule.learning_rate, schedule.weight_decay))?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(schedule.epochs);
    let start = Instant::now();

    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut rows_seen) = (0.0, 0usize);
        let mut hits = vec![0usize; classes];
        let mut seen = vec![0usize; classes];
        for batch in 0..batches {
            let idx = &order[batch * schedule.batch_size..((batch + 1) * schedule.batch_size).min(n)];
            let samples: Vec<Cow<'_, Sample>> = idx
                .iter()
                .map(|&i| {
                    if schedule.augment {
                        let stride = strides[i];
                        let k = rng.gen_range(0..STEPS_PER_TURN as usize / stride) * stride;
                        data.samples[i].rotated(k as i64, schedule.up_axis).map(Cow::Owned)
                    } else {
                        Ok(Cow::Borrowed(&data.samples[i]))
                    }
                })
                .collect::<Result<_>>()?;
            let x = sample_tensor::<F>(&samples.iter().map(|s| s.as_ref()).collect::<Vec<_>>())?;

            let mut g = Graph::new();
            let bound = model.params().bind(&mut g, true);
            let input = g.constant(x);
            let pass = model.run(&mut g, &bound, input, mode)?;
            let rows = g.shape(pass.logits)[0];
            // Unpooled multiview logits hold one row per view.
            let per_sample = rows / idx.len();
            let labels: Vec<usize> = idx
                .iter()
                .flat_map(|&i| std::iter::repeat(data.labels[i]).take(per_sample))
                .collect();
            let loss = match &objective {
                Objective::CrossEntropy => g.softmax_cross_entropy(pass.logits, Targets::Classes(&labels))?,
                Objective::Distill { settings, teacher } => {
                    let mut soft = Vec::with_capacity(rows * classes);
                    for &i in idx {
                        let row = teacher.get(&data.ids[i]).expect("checked above");
                        for _ in 0..per_sample {
                            soft.extend(row.iter().map(|&v| F::of(v as f64)));
                        }
                    }
                    distill_loss(&mut g, pass.logits, &soft, &labels, settings)?
                }
            };
            let loss_value = g.value(loss).item().expect("scalar loss").as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch + 1,
                    loss: loss_value,
                });
            }
            for (pred, &y) in g.value(pass.logits).argmax_rows().iter().zip(&labels) {
                seen[y] += 1;
                hits[y] += (*pred == y) as usize;
            }
            loss_sum += loss_value * rows as f64;
            rows_seen += rows;

            g.backward(loss)?;
            let grads: BTreeMap<String, _> = bound
                .iter()
                .filter_map(|(name, &v)| g.grad(v).map(|t| (name.clone(), t)))
                .collect();
            adam_step(model.params_mut(), &grads, &mut opt)?;
            model.apply_norm_updates(pass.norm_updates)?;
        }
        let metrics = EpochMetrics {
            epoch,
            loss: loss_sum / rows_seen as f64,
            accuracy: hits.iter().sum::<usize>() as f64 / rows_seen as f64,
            class_accuracy: hits
                .iter()
                .zip(&seen)
                .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
                .collect(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4}, accuracy {:.3}",
            model.spec().architecture.tag(),
            metrics.loss,
            metrics.accuracy
        );
        if let (Some(f), Some(p)) = (log_file.as_mut(), log) {
            let line = serde_json::to_string(&metrics)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        history.push(metrics);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageSchedule {
    /// Single images, views not pooled. Batch size counts images.
    pub stage1: TrainSchedule,
    /// Full view-pooled model. Batch size counts shapes.
    pub stage2: TrainSchedule,
}

impl Default for TwoStageSchedule {
    fn default() -> Self {
        TwoStageSchedule {
            stage1: TrainSchedule {
                epochs: 10,
                batch_size: 64,
                learning_rate: 5e-5,
                weight_decay: 1e-3,
                pool_views: false,
                ..TrainSchedule::default()
            },
            stage2: TrainSchedule {
                epochs: 10,
                batch_size: 8,
                learning_rate: 1e-5,
                weight_decay: 1e-3,
                ..TrainSchedule::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageReport {
    pub stage1: Vec<EpochMetrics>,
    pub stage2: Vec<EpochMetrics>,
    /// Parameter checksum at the end of stage 1.
    pub stage1_checksum: String,
    /// Parameter checksum right before the first stage-2 step.
    pub stage2_initial_checksum: String,
}

/// Stage 1 trains on every view as an independent labeled image; stage 2
/// continues from those weights with view pooling over whole view sets.
pub fn train_mvcnn_two_stage<F: Real>(
    model: &mut ClassifierModel<F>,
    data: &SampleSet,
    schedule: &TwoStageSchedule,
    log_dir: Option<&Path>,
) -> Result<TwoStageReport> {
    let views = match &model.spec().architecture {
        Architecture::Mvcnn(c) => c.views,
        other => return Err(invalid!("two-stage training needs mvcnn, got {}", other.tag())),
    };
    check_representation(&model.spec().architecture, data)?;
    for (id, s) in data.ids.iter().zip(&data.samples) {
        if let Sample::Views(v) = s {
            if v.views() != views {
                return Err(invalid!("shape '{id}' has {} views, the model {views}", v.views()));
            }
        }
    }
    let logs = log_dir.map(|d| (d.join("stage1.jsonl"), d.join("stage2.jsonl")));
    let singles = data.single_views();
    let stage1_schedule = TrainSchedule {
        pool_views: false,
        augment: false,
        ..schedule.stage1.clone()
    };
    let stage1 = train_classifier(
        model,
        &singles,
        &stage1_schedule,
        Objective::CrossEntropy,
        logs.as_ref().map(|l| l.0.as_path()),
    )?;
    let stage1_checksum = model.params().checksum();
    let stage2_schedule = TrainSchedule {
        pool_views: true,
        ..schedule.stage2.clone()
    };
    let stage2_initial_checksum = model.params().checksum();
    let stage2 = train_classifier(
        model,
        data,
        &stage2_schedule,
        Objective::CrossEntropy,
        logs.as_ref().map(|l| l.1.as_path()),
    )?;
    Ok(TwoStageReport {
        stage1,
        stage2,
        stage1_checksum,
        stage2_initial_checksum,
    })
}
