use serde::{Deserialize, Serialize};

use super::layers::{ConvBlock, Ctx, Layout};
use crate::error::{dim_err, invalid, Result};
use crate::render::{check_occupancy, line_integral_render, RenderMode, AXIS_VIEWS};
use crate::tensor::{Activation, PoolMode, Real, Var};

/// How the last feature map becomes a vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    GlobalAverage,
    Flatten,
}

/// Where the element-wise max across views sits in the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPool {
    BeforeFirstFc,
    BeforeFinalFc,
}

/// Per-view 2-D CNN shared across views plus the dense head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewCnn {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlock>,
    pub reduce: Reduce,
    pub fc_hidden: Vec<usize>,
    pub view_pool: ViewPool,
}

impl ViewCnn {
    /// Four stride-2 blocks (16, 32, 64, 128), global average, one hidden fc.
    pub fn compact() -> Self {
        ViewCnn {
            in_channels: 1,
            blocks: [16, 32, 64, 128].iter().map(|&c| ConvBlock::new(c, 3, 2, 1)).collect(),
            reduce: Reduce::GlobalAverage,
            fc_hidden: vec![64],
            view_pool: ViewPool::BeforeFinalFc,
        }
    }

    /// VGG-11 layout at 224x224 with views pooled before the first fc.
    pub fn vgg11(in_channels: usize) -> Self {
        let conv = |c: usize, pool: bool| ConvBlock {
            channels: c,
            kernel: 3,
            stride: 1,
            padding: 1,
            batchnorm: false,
            pool: pool.then_some(2),
        };
        ViewCnn {
            in_channels,
            blocks: vec![
                conv(64, true),
                conv(128, true),
                conv(256, false),
                conv(256, true),
                conv(512, false),
                conv(512, true),
                conv(512, false),
                conv(512, true),
            ],
            reduce: Reduce::Flatten,
            fc_hidden: vec![4096, 4096],
            view_pool: ViewPool::BeforeFirstFc,
        }
    }

    fn final_extent(&self, image: usize) -> Result<usize> {
        let mut e = image;
        for (i, b) in self.blocks.iter().enumerate() {
            e = b
                .output_extent(e, 0)
                .filter(|&e| e > 0)
                .ok_or_else(|| invalid!("view cnn block {} shrinks the image to nothing", i + 1))?;
        }
        Ok(e)
    }

    fn validate(&self, image: usize) -> Result<()> {
        if self.in_channels == 0 || self.blocks.is_empty() {
            return Err(invalid!("view cnn needs input channels and at least one block"));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.kernel == 0 || b.stride == 0) {
            return Err(invalid!("view cnn blocks need positive channels, kernel and stride"));
        }
        if self.fc_hidden.iter().any(|&w| w == 0) {
            return Err(invalid!("hidden fc widths must be positive"));
        }
        self.final_extent(image).map(|_| ())
    }

    fn layout(&self, layout: &mut Layout, image: usize) -> Result<usize> {
        let mut cin = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            layout.conv(&format!("conv{}", i + 1), cin, b, 2);
            cin = b.channels;
        }
        let mut width = match self.reduce {
            Reduce::GlobalAverage => cin,
            Reduce::Flatten => cin * self.final_extent(image)?.pow(2),
        };
        for (i, &w) in self.fc_hidden.iter().enumerate() {
            layout.dense(&format!("fc{}", i + 1), width, w);
            width = w;
        }
        Ok(width)
    }

    /// `[B, V, C, H, W]` to penultimate features: `[B, F]` when pooling,
    /// `[B * V, F]` otherwise.
    fn features<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var, pool: bool) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        let (b, v) = (s[0], s[1]);
        let mut h = ctx.g.reshape(x, &[b * v, s[2], s[3], s[4]])?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = ctx.conv_block(&format!("conv{}", i + 1), h, block, 2, 0, Activation::Relu)?;
        }
        h = match self.reduce {
            Reduce::GlobalAverage => ctx.global_average(h)?,
            Reduce::Flatten => ctx.flatten(h)?,
        };
        let mut pooled = false;
        for i in 0..self.fc_hidden.len() {
            if pool && i == 0 && self.view_pool == ViewPool::BeforeFirstFc {
                h = view_max(ctx, h, b, v)?;
                pooled = true;
            }
            h = ctx.dense(&format!("fc{}", i + 1), h)?;
            h = ctx.act(h, Activation::Relu)?;
        }
        if pool && !pooled {
            h = view_max(ctx, h, b, v)?;
        }
        Ok(h)
    }
}

fn view_max<F: Real>(ctx: &mut Ctx<'_, F>, h: Var, b: usize, v: usize) -> Result<Var> {
    let width = ctx.g.shape(h)[1];
    let grouped = ctx.g.reshape(h, &[b, v, width])?;
    ctx.g.max_pool(grouped, PoolMode::Axis(1))
}

/// Multiview CNN over rendered images `[B, V, C, H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvcnnConfig {
    pub views: usize,
    pub image_size: usize,
    pub render_mode: RenderMode,
    pub cnn: ViewCnn,
}

impl MvcnnConfig {
    pub fn compact() -> Self {
        MvcnnConfig {
            views: 12,
            image_size: 32,
            render_mode: RenderMode::Depth,
            cnn: ViewCnn::compact(),
        }
    }

    pub fn vgg11(in_channels: usize) -> Self {
        MvcnnConfig {
            views: 12,
            image_size: 224,
            render_mode: RenderMode::Depth,
            cnn: ViewCnn::vgg11(in_channels),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.views == 0 || self.image_size == 0 {
            return Err(invalid!("mvcnn needs at least one view and a positive image size"));
        }
        self.cnn.validate(self.image_size)
    }

    pub(crate) fn layout(&self, layout: &mut Layout) -> Result<usize> {
        self.cnn.layout(layout, self.image_size)
    }

    pub(crate) fn input_shape(&self, batch: usize) -> Vec<usize> {
        let s = self.image_size;
        vec![batch, self.views, self.cnn.in_channels, s, s]
    }

    pub(crate) fn features<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var, pool: bool) -> Result<Var> {
        let s = ctx.g.shape(x);
        // The view count may differ from the configured one: the max over
        // views accepts any V >= 1.
        if s.len() != 5 || s[1] == 0 || s[2..] != self.input_shape(0)[2..] {
            return Err(dim_err!(
                "mvcnn expects [B, V >= 1, {c}, {d}, {d}], got {s:?}",
                c = self.cnn.in_channels,
                d = self.image_size
            ));
        }
        self.cnn.features(ctx, x, pool)
    }
}

/// Six line-integral views of a voxel grid fed to a multiview CNN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxMvcnnConfig {
    pub resolution: usize,
    pub cnn: ViewCnn,
}

impl VoxMvcnnConfig {
    pub fn compact() -> Self {
        VoxMvcnnConfig {
            resolution: 30,
            cnn: ViewCnn::compact(),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.cnn.in_channels != 1 {
            return Err(invalid!("voxmvcnn renders single-channel views"));
        }
        self.cnn.validate(self.resolution)
    }

    pub(crate) fn layout(&self, layout: &mut Layout) -> Result<usize> {
        self.cnn.layout(layout, self.resolution)
    }

    pub(crate) fn input_shape(&self, batch: usize) -> Vec<usize> {
        let d = self.resolution;
        vec![batch, 1, d, d, d]
    }

    pub(crate) fn features<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var, pool: bool) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        if s.len() != 5 || s[1..] != self.input_shape(0)[1..] {
            return Err(dim_err!(
                "voxmvcnn expects [B, 1, {d}, {d}, {d}], got {s:?}",
                d = self.resolution
            ));
        }
        check_occupancy(ctx.g.value(x).data())?;
        let d = self.resolution;
        let grids = ctx.g.reshape(x, &[s[0], d, d, d])?;
        let views = line_integral_render(ctx.g, grids)?;
        let views = ctx.g.reshape(views, &[s[0], AXIS_VIEWS, 1, d, d])?;
        self.cnn.features(ctx, views, pool)
    }
}
