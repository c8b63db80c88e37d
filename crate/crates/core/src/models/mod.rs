//! The four shape classifiers as forward graphs: VoxNet on voxel grids,
//! PointNet on point clouds, MVCNN on rendered views and VoxMVCNN on voxel
//! grids through the line-integral renderer.

mod input;
mod layers;
mod mvcnn;
mod pointnet;
mod voxnet;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use input::{point_tensor, sample_tensor, view_tensor, voxel_tensor, Sample, SampleSet};
pub use layers::{ConvBlock, Init, Layout, ParamDecl, BN_EPS, BN_MOMENTUM};
pub use mvcnn::{MvcnnConfig, Reduce, ViewCnn, ViewPool, VoxMvcnnConfig};
pub use pointnet::PointNetConfig;
pub use voxnet::VoxNetConfig;

use crate::error::{invalid, Error, Result};
use crate::tensor::serialize::{Bound, ParamStore};
use crate::tensor::{BatchNormState, Graph, Real, Tensor, Var};
use layers::Ctx;

pub const DESCRIPTOR_FILE: &str = "model.json";
pub const PARAMS_STEM: &str = "params";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    VoxNet(VoxNetConfig),
    PointNet(PointNetConfig),
    Mvcnn(MvcnnConfig),
    VoxMvcnn(VoxMvcnnConfig),
}

/// Which shape representation an architecture consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Voxels,
    Points,
    Views,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::VoxNet(_) => "voxnet",
            Architecture::PointNet(_) => "pointnet",
            Architecture::Mvcnn(_) => "mvcnn",
            Architecture::VoxMvcnn(_) => "voxmvcnn",
        }
    }

    pub fn input_kind(&self) -> InputKind {
        match self {
            Architecture::VoxNet(_) | Architecture::VoxMvcnn(_) => InputKind::Voxels,
            Architecture::PointNet(_) => InputKind::Points,
            Architecture::Mvcnn(_) => InputKind::Views,
        }
    }

    /// CPU-sized configuration for the given tag.
    pub fn compact(tag: &str) -> Result<Self> {
        Ok(match tag {
            "voxnet" => Architecture::VoxNet(VoxNetConfig::compact()),
            "pointnet" => Architecture::PointNet(PointNetConfig::compact()),
            "mvcnn" => Architecture::Mvcnn(MvcnnConfig::compact()),
            "voxmvcnn" => Architecture::VoxMvcnn(VoxMvcnnConfig::compact()),
            other => return Err(invalid!("unknown architecture '{other}'")),
        })
    }
}

/// Architecture plus class count: everything needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub num_classes: usize,
    pub architecture: Architecture,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, num_classes: usize) -> Self {
        ModelSpec {
            num_classes,
            architecture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid!("a classifier needs at least two classes"));
        }
        match &self.architecture {
            Architecture::VoxNet(c) => c.validate(),
            Architecture::PointNet(c) => c.validate(),
            Architecture::Mvcnn(c) => c.validate(),
            Architecture::VoxMvcnn(c) => c.validate(),
        }
    }

    /// Declared parameters and batch-norm buffers, without allocating them.
    pub fn layout(&self) -> Result<Layout> {
        self.validate()?;
        let mut layout = Layout::default();
        let width = match &self.architecture {
            Architecture::VoxNet(c) => c.layout(&mut layout)?,
            Architecture::PointNet(c) => c.layout(&mut layout),
            Architecture::Mvcnn(c) => c.layout(&mut layout)?,
            Architecture::VoxMvcnn(c) => c.layout(&mut layout)?,
        };
        layout.dense("classifier", width, self.num_classes);
        Ok(layout)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.layout()?.parameter_count())
    }

    /// Length of the penultimate feature vector.
    pub fn feature_dim(&self) -> Result<usize> {
        let layout = self.layout()?;
        let head = layout
            .params
            .iter()
            .find(|p| p.name == "classifier.weight")
            .ok_or_else(|| invalid!("model has no dense classifier"))?;
        Ok(head.shape[0])
    }

    /// Expected input shape for `batch` samples. Point clouds accept any
    /// point count and multiview models any view count; the default is given.
    pub fn input_shape(&self, batch: usize, points: usize) -> Vec<usize> {
        match &self.architecture {
            Architecture::VoxNet(c) => c.input_shape(batch),
            Architecture::PointNet(_) => vec![batch, points, 3],
            Architecture::Mvcnn(c) => c.input_shape(batch),
            Architecture::VoxMvcnn(c) => c.input_shape(batch),
        }
    }
}

/// Per-call forward options.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunMode {
    /// Batch statistics and running-stat updates instead of frozen stats.
    pub train: bool,
    /// Max over views; when off each view is classified on its own and
    /// multiview models return `B * V` rows.
    pub pool_views: bool,
}

impl RunMode {
    pub const EVAL: RunMode = RunMode {
        train: false,
        pool_views: true,
    };
    pub const TRAIN: RunMode = RunMode {
        train: true,
        pool_views: true,
    };
}

/// Graph outputs of one forward pass.
pub struct Pass<F> {
    pub logits: Var,
    /// Input of the final dense layer.
    pub features: Var,
    /// New running statistics per batch-norm layer (train mode only).
    pub norm_updates: Vec<(String, BatchNormState<F>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel<F> {
    spec: ModelSpec,
    params: ParamStore<F>,
}

impl<F: Real> ClassifierModel<F> {
    /// Fresh model with He-uniform weights drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let layout = spec.layout()?;
        let params = layout.materialize(&mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(ClassifierModel { spec, params })
    }

    /// Pairs a model description with stored parameters, checking names and shapes.
    pub fn from_parts(spec: ModelSpec, params: ParamStore<F>) -> Result<Self> {
        let layout = spec.layout()?;
        let declared = layout.params.len();
        if params.params().count() != declared {
            return Err(invalid!(
                "checkpoint holds {} tensors, the architecture declares {declared}",
                params.params().count()
            ));
        }
        for p in &layout.params {
            let t = params.get(&p.name)?;
            if t.shape() != p.shape.as_slice() {
                return Err(invalid!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                ));
            }
        }
        for (name, c) in &layout.norms {
            let b = params.buffer(name)?;
            if b.mean.len() != *c || b.var.len() != *c {
                return Err(invalid!("batch-norm buffer '{name}' has the wrong width"));
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(ClassifierModel { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Records the forward pass on `g`. `bound` comes from
    /// `self.params().bind(g, trainable)`.
    pub fn run(&self, g: &mut Graph<F>, bound: &Bound, input: Var, mode: RunMode) -> Result<Pass<F>> {
        let mut ctx = Ctx {
            g,
            bound,
            store: &self.params,
            train: mode.train,
            updates: Vec::new(),
        };
        let features = match &self.spec.architecture {
            Architecture::VoxNet(c) => c.features(&mut ctx, input)?,
            Architecture::PointNet(c) => c.features(&mut ctx, input)?,
            Architecture::Mvcnn(c) => c.features(&mut ctx, input, mode.pool_views)?,
            Architecture::VoxMvcnn(c) => c.features(&mut ctx, input, mode.pool_views)?,
        };
        let logits = ctx.dense("classifier", features)?;
        Ok(Pass {
            logits,
            features,
            norm_updates: ctx.updates,
        })
    }

    pub fn apply_norm_updates(&mut self, updates: Vec<(String, BatchNormState<F>)>) -> Result<()> {
        for (name, state) in updates {
            self.params.set_buffer(&name, state)?;
        }
        Ok(())
    }

    fn eval_pass(&self, input: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let pass = self.run(&mut g, &bound, x, RunMode::EVAL)?;
        Ok((g.value(pass.logits).clone(), g.value(pass.features).clone()))
    }

    /// Eval-mode logits `[B, C]`.
    pub fn logits(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        self.eval_pass(input).map(|(l, _)| l)
    }

    /// Eval-mode penultimate features `[B, feature_dim]`.
    pub fn extract_features(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        if self.params.get("classifier.weight").is_err() {
            return Err(invalid!("model has no dense classifier"));
        }
        self.eval_pass(input).map(|(_, f)| f)
    }

    /// Writes the JSON descriptor and the parameter blob into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(DESCRIPTOR_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&self.spec)?).map_err(|e| Error::io(&path, e))?;
        self.params.save(dir, PARAMS_STEM)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DESCRIPTOR_FILE);
        let spec: ModelSpec =
            serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        Self::from_parts(spec, ParamStore::load(dir, PARAMS_STEM)?)
    }

    /// Same model in another precision.
    pub fn cast<G: Real>(&self) -> ClassifierModel<G> {
        let mut params = ParamStore::new();
        for (k, v) in self.params.params() {
            params.insert(k.clone(), v.cast());
        }
        for (k, b) in self.params.buffers() {
            params.insert_buffer(
                k.clone(),
                BatchNormState {
                    mean: b.mean.iter().map(|v| G::of(v.as_f64())).collect(),
                    var: b.var.iter().map(|v| G::of(v.as_f64())).collect(),
                },
            );
        }
        ClassifierModel {
            spec: self.spec.clone(),
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::render::line_integral_render;
    use crate::tensor::gradcheck::check_gradient;
    use crate::tensor::Targets;

    fn tiny_cnn() -> ViewCnn {
        ViewCnn {
            in_channels: 1,
            blocks: vec![ConvBlock::new(3, 3, 2, 1), ConvBlock::new(4, 3, 2, 1)],
            reduce: Reduce::GlobalAverage,
            fc_hidden: vec![5],
            view_pool: ViewPool::BeforeFinalFc,
        }
    }

    fn tiny(tag: &str) -> ModelSpec {
        let arch = match tag {
            "voxnet" => Architecture::VoxNet(VoxNetConfig {
                input_size: 6,
                input_pad: 1,
                blocks: vec![ConvBlock::new(2, 3, 1, 1), ConvBlock::new(3, 3, 2, 1)],
                leaky_slope: 0.1,
                fc_hidden: 4,
            }),
            "pointnet" => Architecture::PointNet(PointNetConfig {
                point_widths: vec![4, 6],
                head_widths: vec![5],
                spatial_transform: false,
            }),
            "mvcnn" => Architecture::Mvcnn(MvcnnConfig {
                views: 3,
                image_size: 8,
                render_mode: crate::render::RenderMode::Depth,
                cnn: tiny_cnn(),
            }),
            _ => Architecture::VoxMvcnn(VoxMvcnnConfig {
                resolution: 6,
                cnn: tiny_cnn(),
            }),
        };
        ModelSpec::new(arch, 3)
    }

    fn random_input(spec: &ModelSpec, batch: usize, seed: u64) -> Tensor<f64> {
        let shape = spec.input_shape(batch, 8);
        let n = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = if spec.architecture.input_kind() == InputKind::Points { -1.0 } else { 0.05 };
        let data = (0..n).map(|_| rng.gen_range(lo..0.95)).collect();
        Tensor::new(shape, data).unwrap()
    }

    const TAGS: [&str; 4] = ["voxnet", "pointnet", "mvcnn", "voxmvcnn"];

    #[test]
    fn eval_is_deterministic_and_rowwise() {
        for tag in TAGS {
            let spec = tiny(tag);
            let model = ClassifierModel::<f64>::new(spec.clone(), 3).unwrap();
            let one = random_input(&spec, 1, 1);
            let mut both = one.data().to_vec();
            both.extend_from_slice(one.data());
            let mut shape = one.shape().to_vec();
            shape[0] = 2;
            let two = Tensor::new(shape, both).unwrap();
            let a = model.logits(&two).unwrap();
            assert_eq!(a.shape(), &[2, 3], "{tag}");
            assert_eq!(a.data()[..3], a.data()[3..], "{tag}");
            assert_eq!(model.logits(&two).unwrap(), a, "{tag}");
            let zero = Tensor::zeros(two.shape());
            assert!(model.logits(&zero).unwrap().all_finite());
        }
    }

    #[test]
    fn wrong_input_shapes_rejected() {
        for tag in TAGS {
            let model = ClassifierModel::<f64>::new(tiny(tag), 0).unwrap();
            assert!(model.logits(&Tensor::zeros(&[2, 5, 5])).is_err(), "{tag}");
        }
        let model = ClassifierModel::<f64>::new(tiny("mvcnn"), 0).unwrap();
        assert!(model.logits(&Tensor::zeros(&[1, 0, 1, 8, 8])).is_err());
        let model = ClassifierModel::<f64>::new(tiny("voxmvcnn"), 0).unwrap();
        assert!(model.logits(&Tensor::full(&[1, 1, 6, 6, 6], 1.5)).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = tiny("pointnet");
        s.num_classes = 1;
        assert!(ClassifierModel::<f32>::new(s, 0).is_err());
        let s = ModelSpec::new(
            Architecture::PointNet(PointNetConfig {
                spatial_transform: true,
                ..PointNetConfig::compact()
            }),
            5,
        );
        assert!(s.validate().is_err());
        let mut v = VoxNetConfig::compact();
        v.input_size = 2;
        v.input_pad = 0;
        v.blocks = vec![ConvBlock::new(4, 5, 1, 0)];
        assert!(ModelSpec::new(Architecture::VoxNet(v), 5).validate().is_err());
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        for tag in TAGS {
            let spec = tiny(tag);
            let model = ClassifierModel::<f64>::new(spec.clone(), 11).unwrap();
            let x = random_input(&spec, 2, 5);
            let f = |g: &mut Graph<f64>, v: Var| {
                let bound = model.params().bind(g, false);
                let pass = model.run(g, &bound, v, RunMode::EVAL)?;
                g.softmax_cross_entropy(pass.logits, Targets::Classes(&[0, 2]))
            };
            let err = check_gradient(f, &x, 1e-6).unwrap();
            assert!(err < 1e-4, "{tag}: {err}");
        }
    }

    #[test]
    fn pointnet_ignores_point_order() {
        let spec = ModelSpec::new(Architecture::PointNet(PointNetConfig::compact()), 5);
        let model = ClassifierModel::<f32>::new(spec.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 37;
        let pts: Vec<[f32; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let flat = |p: &[[f32; 3]]| Tensor::new(vec![1, p.len(), 3], p.iter().flatten().copied().collect()).unwrap();
        let base = model.logits(&flat(&pts)).unwrap();
        let mut shuffled = pts.clone();
        for _ in 0..5 {
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            assert_eq!(model.logits(&flat(&shuffled)).unwrap(), base);
        }
        let single = model.logits(&flat(&pts[..1])).unwrap();
        let repeated = model.logits(&flat(&vec![pts[0]; 16])).unwrap();
        assert_eq!(single, repeated);
    }

    fn views_input(v: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..v * 64).map(|_| rng.gen()).collect()
    }

    #[test]
    fn mvcnn_view_pooling_symmetries() {
        let model = ClassifierModel::<f64>::new(tiny("mvcnn"), 4).unwrap();
        let imgs = views_input(3, 1);
        let t = |d: Vec<f64>| Tensor::new(vec![1, d.len() / 64, 1, 8, 8], d).unwrap();
        let base = model.logits(&t(imgs.clone())).unwrap();
        // Reverse view order.
        let rev: Vec<f64> = imgs.chunks(64).rev().flatten().copied().collect();
        assert_eq!(model.logits(&t(rev)).unwrap(), base);
        // Duplicate the middle view.
        let mut dup = imgs.clone();
        dup.extend_from_slice(&imgs[64..128]);
        assert_eq!(model.logits(&t(dup)).unwrap(), base);
        // A single view: pooled and unpooled agree.
        let one = t(imgs[..64].to_vec());
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, false);
        let x = g.constant(one.clone());
        let unpooled = RunMode {
            train: false,
            pool_views: false,
        };
        let pass = model.run(&mut g, &bound, x, unpooled).unwrap();
        assert_eq!(g.value(pass.logits), &model.logits(&one).unwrap());
        // Unpooled mode classifies each view.
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, false);
        let x = g.constant(t(imgs));
        let pass = model.run(&mut g, &bound, x, unpooled).unwrap();
        assert_eq!(g.shape(pass.logits), &[3, 3]);
    }

    #[test]
    fn voxmvcnn_composes_renderer_and_mvcnn() {
        let vox = ClassifierModel::<f64>::new(tiny("voxmvcnn"), 6).unwrap();
        let mut mv_spec = tiny("mvcnn");
        if let Architecture::Mvcnn(c) = &mut mv_spec.architecture {
            c.views = 6;
            c.image_size = 6;
        }
        let mv = ClassifierModel::from_parts(mv_spec, vox.params().clone()).unwrap();
        let zero_grid = Tensor::zeros(&[1, 1, 6, 6, 6]);
        let zero_views = Tensor::zeros(&[1, 6, 1, 6, 6]);
        assert_eq!(vox.logits(&zero_grid).unwrap(), mv.logits(&zero_views).unwrap());
        let full = vox.logits(&Tensor::full(&[1, 1, 6, 6, 6], 1.0)).unwrap();
        assert_ne!(full, vox.logits(&zero_grid).unwrap());
    }

    #[test]
    fn voxmvcnn_gradient_is_view_gradient_times_transmittance() {
        let model = ClassifierModel::<f64>::new(tiny("voxmvcnn"), 8).unwrap();
        let x = random_input(model.spec(), 1, 2);
        let d = 6;
        let loss = |g: &mut Graph<f64>, logits: Var| g.softmax_cross_entropy(logits, Targets::Classes(&[1]));

        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, false);
        let v = g.param(x.clone());
        let pass = model.run(&mut g, &bound, v, RunMode::EVAL).unwrap();
        let l = loss(&mut g, pass.logits).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(v).unwrap();

        // Gradient with respect to the rendered views, through the CNN only.
        let mut g = Graph::new();
        let grids = g.constant(x.reshape(&[1, d, d, d]).unwrap());
        let views = line_integral_render(&mut g, grids).unwrap();
        let rendered = g.value(views).reshape(&[1, 6, 1, d, d]).unwrap();
        let mut mv_spec = tiny("mvcnn");
        if let Architecture::Mvcnn(c) = &mut mv_spec.architecture {
            c.views = 6;
            c.image_size = d;
        }
        let mv = ClassifierModel::from_parts(mv_spec, model.params().clone()).unwrap();
        let mut g = Graph::new();
        let bound = mv.params().bind(&mut g, false);
        let iv = g.param(rendered);
        let pass = mv.run(&mut g, &bound, iv, RunMode::EVAL).unwrap();
        let l = loss(&mut g, pass.logits).unwrap();
        g.backward(l).unwrap();
        let view_grad = g.grad(iv).unwrap();

        let occ = x.data();
        let at = |i: usize, j: usize, k: usize| occ[(i * d + j) * d + k];
        let pix = |view: usize, r: usize, c: usize| view_grad.data()[(view * d + r) * d + c];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let sx: f64 = (0..d).map(|t| at(t, j, k)).sum();
                    let sy: f64 = (0..d).map(|t| at(i, t, k)).sum();
                    let sz: f64 = (0..d).map(|t| at(i, j, t)).sum();
                    // View layout: +a has column u, row D-1-v with (u, v) cyclic after a.
                    let (m, r) = (|c: usize| d - 1 - c, |v: usize| d - 1 - v);
                    let want = (pix(0, r(k), j) + pix(1, r(k), m(j))) * (-sx).exp()
                        + (pix(2, r(i), k) + pix(3, r(i), m(k))) * (-sy).exp()
                        + (pix(4, r(j), i) + pix(5, r(j), m(i))) * (-sz).exp();
                    let got = grad.data()[(i * d + j) * d + k];
                    assert!((got - want).abs() < 1e-12, "cell ({i},{j},{k}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn features_recompose_into_logits() {
        for tag in TAGS {
            let spec = tiny(tag);
            let model = ClassifierModel::<f64>::new(spec.clone(), 1).unwrap();
            let x = random_input(&spec, 3, 4);
            let feats = model.extract_features(&x).unwrap();
            assert_eq!(feats.shape(), &[3, spec.feature_dim().unwrap()]);
            let mut g = Graph::new();
            let f = g.constant(feats);
            let w = g.constant(model.params().get("classifier.weight").unwrap().clone());
            let b = g.constant(model.params().get("classifier.bias").unwrap().clone());
            let out = g.dense(f, w, b).unwrap();
            assert_eq!(g.value(out), &model.logits(&x).unwrap(), "{tag}");
        }
    }

    #[test]
    fn compact_logits_are_moderate_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for tag in TAGS {
            let spec = ModelSpec::new(Architecture::compact(tag).unwrap(), 5);
            let model = ClassifierModel::<f32>::new(spec.clone(), 0).unwrap();
            let shape = spec.input_shape(2, 64);
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let logits = model.logits(&Tensor::new(shape, data).unwrap()).unwrap();
            assert!(logits.data().iter().all(|v| v.abs() < 1e3), "{tag}");
        }
    }

    #[test]
    fn parameter_counts() {
        let vgg = ModelSpec::new(Architecture::Mvcnn(MvcnnConfig::vgg11(3)), 40);
        assert_eq!(vgg.parameter_count().unwrap(), 128_930_216);
        let voxnet = ModelSpec::new(Architecture::VoxNet(VoxNetConfig::full()), 40);
        // Five 32-channel 5^3 blocks, an 8^3 x 32 flatten into 128, then 40.
        let conv = 32 * 125 + 4 * (32 * 32 * 125) + 5 * 32;
        let bn = 2 * (5 * 32 + 128);
        let fc = 8 * 8 * 8 * 32 * 128 + 128 + 128 * 40 + 40;
        assert_eq!(voxnet.parameter_count().unwrap(), conv + bn + fc);
        let compact = |t| ModelSpec::new(Architecture::compact(t).unwrap(), 5).parameter_count().unwrap();
        assert!(compact("voxnet") < compact("mvcnn"));
    }

    #[test]
    fn train_mode_reports_norm_updates() {
        let mut model = ClassifierModel::<f64>::new(tiny("voxnet"), 0).unwrap();
        let x = random_input(model.spec(), 4, 0);
        let mut g = Graph::new();
        let bound = model.params().bind(&mut g, true);
        let v = g.constant(x);
        let pass = model.run(&mut g, &bound, v, RunMode::TRAIN).unwrap();
        assert_eq!(pass.norm_updates.len(), 3);
        let before = model.params().buffer("fc1.bn").unwrap().clone();
        model.apply_norm_updates(pass.norm_updates).unwrap();
        assert_ne!(model.params().buffer("fc1.bn").unwrap(), &before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = ClassifierModel::<f32>::new(tiny("mvcnn"), 5).unwrap();
        model.save(dir.path()).unwrap();
        let back = ClassifierModel::<f32>::load(dir.path()).unwrap();
        assert_eq!(back, model);
        let other = ClassifierModel::<f32>::new(tiny("pointnet"), 5).unwrap();
        assert!(ClassifierModel::from_parts(tiny("mvcnn"), other.params().clone()).is_err());
    }
}
