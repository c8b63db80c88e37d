use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::artifacts::Stage;
use super::config::{ExperimentConfig, ModelSetup};
use super::data::{load_dataset, sample_sets, write_cache, Cache, Representation};
use super::Command;
use crate::attack::{robustness_report, ReportModel};
use crate::dataio::{voxelize, Dataset};
use crate::error::{invalid, Result};
use crate::evalbench::{
    benchmark_forward, confusion_diff, ensemble_average, ensemble_linear, evaluate, predict_features,
    predict_probabilities, sweep_csv, sweep_training_size, EvalReport,
};
use crate::models::{Architecture, ClassifierModel, InputKind, ModelSpec, SampleSet};
use crate::render::{line_integral_views, render_views, ring_cameras, write_pgm, AXIS_VIEWS};
use crate::tensor::Real;
use crate::train::{extract_teacher_logits, train_classifier, train_mvcnn_two_stage, Objective, TrainSchedule};

const EVAL_BATCH: usize = 32;

pub(super) struct Pipeline<'a> {
    config: &'a ExperimentConfig,
    dataset: Dataset,
    cache: Option<Cache>,
}

#[derive(Serialize)]
struct Accuracy {
    model: String,
    per_instance: f64,
    per_class: f64,
}

impl Accuracy {
    fn of(model: &str, r: &EvalReport) -> Self {
        Accuracy {
            model: model.to_string(),
            per_instance: r.per_instance,
            per_class: r.per_class,
        }
    }
}

fn predictions_csv(set: &SampleSet, report: &EvalReport) -> String {
    let mut out = String::from("id,label,predicted\n");
    for ((id, y), p) in set.ids.iter().zip(&report.labels).zip(&report.predictions) {
        let _ = writeln!(out, "{id},{y},{p}");
    }
    out
}

impl<'a> Pipeline<'a> {
    pub(super) fn new(config: &'a ExperimentConfig) -> Result<Self> {
        let dataset = load_dataset(&config.dataset)?;
        let cache = Cache::open(&config.out.join(Command::Prepare.name()), &dataset, &config.prep)?;
        Ok(Pipeline {
            config,
            dataset,
            cache,
        })
    }

    fn sets(&self, arch: &Architecture) -> Result<(SampleSet, SampleSet)> {
        sample_sets(&self.dataset, &Representation::for_model(arch, &self.config.prep), self.cache.as_ref())
    }

    fn class_names(&self) -> &[String] {
        &self.dataset.class_names
    }

    fn seeded(&self, schedule: &TrainSchedule) -> TrainSchedule {
        TrainSchedule {
            seed: self.config.seed,
            ..schedule.clone()
        }
    }

    /// Fresh model trained on `train` with cross-entropy; logs go to `log_dir`.
    fn fit<F: Real>(&self, setup: &ModelSetup, train: &SampleSet, log_dir: Option<&Path>) -> Result<ClassifierModel<F>> {
        let spec = ModelSpec::new(setup.architecture.clone(), self.dataset.num_classes());
        let mut model = ClassifierModel::new(spec, self.config.seed)?;
        if let Some(dir) = log_dir {
            std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        }
        log::info!("training {} on {} shapes", setup.name, train.len());
        match &setup.two_stage {
            Some(two) => {
                let mut two = two.clone();
                two.stage1 = self.seeded(&two.stage1);
                two.stage2 = self.seeded(&two.stage2);
                train_mvcnn_two_stage(&mut model, train, &two, log_dir)?;
            }
            None => {
                let log = log_dir.map(|d| d.join("metrics.jsonl"));
                train_classifier(
                    &mut model,
                    train,
                    &self.seeded(&setup.schedule),
                    Objective::CrossEntropy,
                    log.as_deref(),
                )?;
            }
        }
        Ok(model)
    }

    fn write_eval(&self, stage: &Stage, prefix: &str, test: &SampleSet, report: &EvalReport) -> Result<()> {
        stage.write_json(&format!("{prefix}eval.json"), report)?;
        stage.write_text(&format!("{prefix}confusion.csv"), &report.confusion_csv())?;
        stage.write_text(&format!("{prefix}predictions.csv"), &predictions_csv(test, report))
    }

    pub(super) fn run<F: Real>(&self, command: Command, stage: &mut Stage) -> Result<()> {
        match command {
            Command::Prepare => self.prepare(stage),
            Command::Train => self.train::<F>(stage),
            Command::Eval => self.eval::<F>(stage),
            Command::Distill => self.distill::<F>(stage),
            Command::Attack => self.attack::<F>(stage),
            Command::Sweep => self.sweep::<F>(stage),
            Command::Ensemble => self.ensemble::<F>(stage),
            Command::Bench => self.bench::<F>(stage),
            Command::RenderDebug => self.render_debug(stage),
        }
    }

    fn prepare(&self, stage: &Stage) -> Result<()> {
        let index = write_cache(&self.dataset, &self.config.prep, &self.config.representations, &stage.dir)?;
        log::info!("cached {} shapes in {}", index.entries.len(), stage.dir.display());
        Ok(())
    }

    fn train<F: Real>(&self, stage: &Stage) -> Result<()> {
        let setup = &self.config.model;
        let (train, test) = self.sets(&setup.architecture)?;
        let model = self.fit::<F>(setup, &train, Some(&stage.dir))?;
        model.save(&stage.path("model"))?;
        let report = evaluate(&model, &test, self.class_names(), EVAL_BATCH)?;
        log::info!(
            "{}: test per-instance {:.4}, per-class {:.4}",
            setup.name,
            report.per_instance,
            report.per_class
        );
        self.write_eval(stage, "", &test, &report)
    }

    fn eval<F: Real>(&self, stage: &Stage) -> Result<()> {
        let dir = self.config.out.join(Command::Train.name()).join("model");
        if !dir.is_dir() {
            return Err(invalid!("no trained model at {}; run `train` first", dir.display()));
        }
        let model: ClassifierModel<F> = ClassifierModel::<f32>::load(&dir)?.cast();
        if model.spec().architecture != self.config.model.architecture {
            return Err(invalid!("checkpoint at {} was trained with a different architecture", dir.display()));
        }
        let (_, test) = self.sets(&model.spec().architecture)?;
        let report = evaluate(&model, &test, self.class_names(), EVAL_BATCH)?;
        self.write_eval(stage, "", &test, &report)
    }

    fn distill<F: Real>(&self, stage: &Stage) -> Result<()> {
        let cfg = self
            .config
            .distill
            .as_ref()
            .ok_or_else(|| invalid!("config has no distill section"))?;
        let (t_train, t_test) = self.sets(&cfg.teacher.architecture)?;
        let teacher = self.fit::<F>(&cfg.teacher, &t_train, Some(&stage.path("teacher")))?;
        teacher.save(&stage.path("teacher/model"))?;
        let teacher_report = evaluate(&teacher, &t_test, self.class_names(), EVAL_BATCH)?;
        self.write_eval(stage, "teacher/", &t_test, &teacher_report)?;

        let student = &self.config.model;
        let (train, test) = self.sets(&student.architecture)?;
        let soft = extract_teacher_logits(&teacher, &t_train, &train.ids, EVAL_BATCH)?;
        soft.save(&stage.dir, "teacher_logits")?;

        let baseline = self.fit::<F>(student, &train, Some(&stage.path("baseline")))?;
        baseline.save(&stage.path("baseline/model"))?;
        let base_report = evaluate(&baseline, &test, self.class_names(), EVAL_BATCH)?;
        self.write_eval(stage, "baseline/", &test, &base_report)?;

        let spec = ModelSpec::new(student.architecture.clone(), self.dataset.num_classes());
        let mut distilled = ClassifierModel::<F>::new(spec, self.config.seed)?;
        std::fs::create_dir_all(stage.path("distilled")).map_err(|e| crate::Error::io(&stage.dir, e))?;
        train_classifier(
            &mut distilled,
            &train,
            &self.seeded(&student.schedule),
            Objective::Distill {
                settings: cfg.settings,
                teacher: &soft,
            },
            Some(&stage.path("distilled/metrics.jsonl")),
        )?;
        distilled.save(&stage.path("distilled/model"))?;
        let dist_report = evaluate(&distilled, &test, self.class_names(), EVAL_BATCH)?;
        self.write_eval(stage, "distilled/", &test, &dist_report)?;
        log::info!(
            "teacher {:.4}, baseline {:.4}, distilled {:.4}",
            teacher_report.per_instance,
            base_report.per_instance,
            dist_report.per_instance
        );
        stage.write_json(
            "summary.json",
            &[
                Accuracy::of("teacher", &teacher_report),
                Accuracy::of("baseline", &base_report),
                Accuracy::of("distilled", &dist_report),
            ],
        )
    }

    fn attack<F: Real>(&self, stage: &Stage) -> Result<()> {
        let cfg = self
            .config
            .attack
            .as_ref()
            .ok_or_else(|| invalid!("config has no attack section"))?;
        let mut trained = Vec::with_capacity(cfg.models.len());
        for setup in &cfg.models {
            let (train, test) = self.sets(&setup.architecture)?;
            let dir = stage.path(&format!("models/{}", setup.name));
            let model = self.fit::<F>(setup, &train, Some(&dir))?;
            model.save(&dir.join("model"))?;
            trained.push((model, test));
        }
        let models: Vec<ReportModel<'_, F>> = cfg
            .models
            .iter()
            .zip(&trained)
            .map(|(setup, (model, test))| ReportModel {
                name: setup.name.clone(),
                model,
                test,
                clamp: (setup.architecture.input_kind() == InputKind::Voxels).then_some([0.0, 1.0]),
            })
            .collect();
        let (report, _) = robustness_report(&models, cfg.references, &cfg.protocol)?;
        for s in &report.summaries {
            log::info!(
                "{}: {}/{} adversarial examples, mean epsilon {:?}",
                s.model,
                s.successes,
                s.cases,
                s.mean_epsilon
            );
        }
        report.write_json(&stage.path("report.json"))?;
        report.write_csv(&stage.path("summary.csv"))
    }

    fn sweep<F: Real>(&self, stage: &Stage) -> Result<()> {
        let cfg = self
            .config
            .sweep
            .as_ref()
            .ok_or_else(|| invalid!("config has no sweep section"))?;
        let setup = &self.config.model;
        let (train, test) = self.sets(&setup.architecture)?;
        let mut caps = cfg.caps.iter();
        let points = sweep_training_size::<F>(&cfg.caps, &train, &test, self.class_names(), self.config.seed, |subset, _| {
            let cap = caps.next().expect("one fit per cap");
            self.fit::<F>(setup, subset, Some(&stage.path(&format!("cap_{cap}"))))
        })?;
        stage.write_json("points.json", &points)?;
        stage.write_text("curve.csv", &sweep_csv(&points))
    }

    fn ensemble<F: Real>(&self, stage: &Stage) -> Result<()> {
        let cfg = self
            .config
            .ensemble
            .as_ref()
            .ok_or_else(|| invalid!("config has no ensemble section"))?;
        let names = self.class_names();
        let mut probs = Vec::new();
        let mut train_feats = Vec::new();
        let mut test_feats = Vec::new();
        let mut reports = Vec::new();
        let mut labels = None;
        for setup in &cfg.members {
            let (train, test) = self.sets(&setup.architecture)?;
            let dir = stage.path(&format!("members/{}", setup.name));
            let model = self.fit::<F>(setup, &train, Some(&dir))?;
            model.save(&dir.join("model"))?;
            let report = evaluate(&model, &test, names, EVAL_BATCH)?;
            self.write_eval(stage, &format!("members/{}/", setup.name), &test, &report)?;
            reports.push((setup.name.clone(), report));
            probs.push(predict_probabilities(&model, &test, EVAL_BATCH)?);
            train_feats.push(predict_features(&model, &train, EVAL_BATCH)?);
            test_feats.push(predict_features(&model, &test, EVAL_BATCH)?);
            labels.get_or_insert((train.labels.clone(), test.labels.clone()));
        }
        let (train_labels, test_labels) = labels.expect("at least one member");
        let avg = ensemble_average(&probs)?;
        let avg_report = crate::evalbench::accuracy_metrics(&avg.predictions, &test_labels, names)?;
        let (_, linear_report) = ensemble_linear(&train_feats, &train_labels, &test_feats, &test_labels, names, &cfg.linear)?;
        for i in 0..reports.len() {
            for j in i + 1..reports.len() {
                let d = confusion_diff(&reports[i].1, &reports[j].1)?;
                stage.write_text(&format!("diff_{}_minus_{}.csv", reports[i].0, reports[j].0), &d.to_csv())?;
            }
        }
        stage.write_json("average_eval.json", &avg_report)?;
        stage.write_json("linear_eval.json", &linear_report)?;
        let mut summary: Vec<Accuracy> = reports.iter().map(|(n, r)| Accuracy::of(n, r)).collect();
        summary.push(Accuracy::of("average", &avg_report));
        summary.push(Accuracy::of("linear", &linear_report));
        for a in &summary {
            log::info!("{}: per-instance {:.4}, per-class {:.4}", a.model, a.per_instance, a.per_class);
        }
        stage.write_json("summary.json", &summary)
    }

    fn bench<F: Real>(&self, stage: &mut Stage) -> Result<()> {
        let cfg = self
            .config
            .bench
            .as_ref()
            .ok_or_else(|| invalid!("config has no bench section"))?;
        let mut params = String::from("model,parameters\n");
        let mut timing = String::from("model,batch,repetitions,median_ms,estimated_bytes\n");
        let mut results = Vec::new();
        for setup in &cfg.models {
            let spec = ModelSpec::new(setup.architecture.clone(), self.dataset.num_classes());
            let model = ClassifierModel::<F>::new(spec, self.config.seed)?;
            let b = benchmark_forward(
                &model,
                cfg.batch,
                cfg.repetitions,
                self.config.prep.points,
                cfg.memory_budget_mb.saturating_mul(1 << 20),
            )?;
            log::info!("{}: {} parameters, {:.2} ms per batch of {}", setup.name, b.parameter_count, b.median_ms, b.batch);
            let _ = writeln!(params, "{},{}", setup.name, b.parameter_count);
            let _ = writeln!(
                timing,
                "{},{},{},{:.4},{}",
                setup.name, b.batch, b.repetitions, b.median_ms, b.estimated_bytes
            );
            results.push((setup.name.clone(), b));
        }
        stage.write_text("parameters.csv", &params)?;
        stage.write_text("timing.csv", &timing)?;
        stage.write_json("bench.json", &results)?;
        stage.volatile("timing.csv");
        stage.volatile("bench.json");
        Ok(())
    }

    /// PGM dumps of the camera views and line-integral views of the first
    /// shape of every class.
    fn render_debug(&self, stage: &Stage) -> Result<()> {
        let prep = &self.config.prep;
        let cams = ring_cameras(prep.views, prep.elevation_deg, prep.view_size)?;
        for sub in ["views", "line_integral"] {
            std::fs::create_dir_all(stage.path(sub)).map_err(|e| crate::Error::io(&stage.dir, e))?;
        }
        let mut seen = vec![false; self.dataset.num_classes()];
        for r in &self.dataset.records {
            if std::mem::replace(&mut seen[r.label], true) {
                continue;
            }
            let stem = r.id.replace(['/', '\\'], "__");
            let views = render_views(&r.mesh, &cams, prep.render_mode)?;
            for v in 0..views.views() {
                write_pgm(
                    &stage.path(&format!("views/{stem}_{v:02}.pgm")),
                    views.image(v),
                    views.height,
                    views.width,
                )?;
            }
            let grid = voxelize(&r.mesh, prep.voxel_resolution)?;
            let line = line_integral_views::<f32>(&grid)?;
            let d = prep.voxel_resolution;
            for a in 0..AXIS_VIEWS {
                write_pgm(
                    &stage.path(&format!("line_integral/{stem}_{a}.pgm")),
                    &line.data()[a * d * d..(a + 1) * d * d],
                    d,
                    d,
                )?;
            }
        }
        Ok(())
    }
}
