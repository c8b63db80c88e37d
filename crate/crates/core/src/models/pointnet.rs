use serde::{Deserialize, Serialize};

use super::layers::{Ctx, Layout};
use crate::error::{dim_err, invalid, Result};
use crate::tensor::{Activation, PoolMode, Real, Var};

/// Shared per-point MLP, max over points, then a classifier MLP. Every
/// layer is `dense - batchnorm - ReLU`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointNetConfig {
    pub point_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    /// Learned input alignment network. Not implemented; must stay false.
    #[serde(default)]
    pub spatial_transform: bool,
}

impl PointNetConfig {
    pub fn full() -> Self {
        PointNetConfig {
            point_widths: vec![64, 64, 64, 128, 1024],
            head_widths: vec![512, 256],
            spatial_transform: false,
        }
    }

    pub fn compact() -> Self {
        PointNetConfig {
            point_widths: vec![32, 64, 128],
            head_widths: vec![64, 32],
            spatial_transform: false,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.spatial_transform {
            return Err(invalid!("pointnet spatial transform is not supported"));
        }
        if self.point_widths.is_empty() || self.head_widths.is_empty() {
            return Err(invalid!("pointnet needs at least one per-point and one head layer"));
        }
        if self.point_widths.iter().chain(&self.head_widths).any(|&w| w == 0) {
            return Err(invalid!("pointnet layer widths must be positive"));
        }
        Ok(())
    }

    pub(crate) fn layout(&self, layout: &mut Layout) -> usize {
        let mut width = 3;
        for (i, &w) in self.point_widths.iter().enumerate() {
            let name = format!("point{}", i + 1);
            layout.dense(&name, width, w);
            layout.norm(&format!("{name}.bn"), w);
            width = w;
        }
        for (i, &w) in self.head_widths.iter().enumerate() {
            let name = format!("head{}", i + 1);
            layout.dense(&name, width, w);
            layout.norm(&format!("{name}.bn"), w);
            width = w;
        }
        width
    }

    pub(crate) fn features<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != 3 || shape[1] == 0 {
            return Err(dim_err!("pointnet expects [B, N, 3] with N >= 1, got {shape:?}"));
        }
        let (b, n) = (shape[0], shape[1]);
        let mut h = ctx.g.reshape(x, &[b * n, 3])?;
        for i in 0..self.point_widths.len() {
            h = self.layer(ctx, &format!("point{}", i + 1), h)?;
        }
        let width = *self.point_widths.last().expect("validated");
        let per_cloud = ctx.g.reshape(h, &[b, n, width])?;
        h = ctx.g.max_pool(per_cloud, PoolMode::Axis(1))?;
        for i in 0..self.head_widths.len() {
            h = self.layer(ctx, &format!("head{}", i + 1), h)?;
        }
        Ok(h)
    }

    fn layer<F: Real>(&self, ctx: &mut Ctx<'_, F>, name: &str, x: Var) -> Result<Var> {
        let h = ctx.dense(name, x)?;
        let h = ctx.norm(&format!("{name}.bn"), h)?;
        ctx.act(h, Activation::Relu)
    }
}
