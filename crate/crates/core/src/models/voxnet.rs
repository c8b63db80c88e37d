use serde::{Deserialize, Serialize};

use super::layers::{ConvBlock, Ctx, Layout};
use crate::error::{dim_err, invalid, Result};
use crate::tensor::{Activation, Real, Var};

/// 3-D CNN over occupancy grids: conv blocks with batch norm and leaky ReLU,
/// then `fc - batchnorm - ReLU - fc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxNetConfig {
    /// Edge length of the input grid.
    pub input_size: usize,
    /// Zeros added on each side before the first block (30 -> 32).
    pub input_pad: usize,
    pub blocks: Vec<ConvBlock>,
    pub leaky_slope: f64,
    pub fc_hidden: usize,
}

impl VoxNetConfig {
    /// Five 32-channel blocks with kernel 5; blocks 2 and 4 downsample.
    pub fn full() -> Self {
        VoxNetConfig {
            input_size: 30,
            input_pad: 1,
            blocks: [1, 2, 1, 2, 1].iter().map(|&s| ConvBlock::new(32, 5, s, 2)).collect(),
            leaky_slope: 0.1,
            fc_hidden: 128,
        }
    }

    /// Three stride-2 blocks (8, 16, 32 channels) small enough for CPU training.
    pub fn compact() -> Self {
        VoxNetConfig {
            input_size: 30,
            input_pad: 1,
            blocks: [8, 16, 32].iter().map(|&c| ConvBlock::new(c, 3, 2, 1)).collect(),
            leaky_slope: 0.1,
            fc_hidden: 32,
        }
    }

    fn final_extent(&self) -> Result<usize> {
        let mut e = self.input_size;
        for (i, b) in self.blocks.iter().enumerate() {
            let pad = if i == 0 { self.input_pad } else { 0 };
            e = b
                .output_extent(e, pad)
                .filter(|&e| e > 0)
                .ok_or_else(|| invalid!("voxnet block {} shrinks the grid to nothing", i + 1))?;
        }
        Ok(e)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.blocks.is_empty() || self.fc_hidden == 0 {
            return Err(invalid!("voxnet needs a positive input size, blocks and hidden width"));
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.kernel == 0 || b.stride == 0) {
            return Err(invalid!("voxnet blocks need positive channels, kernel and stride"));
        }
        self.final_extent().map(|_| ())
    }

    pub(crate) fn layout(&self, layout: &mut Layout) -> Result<usize> {
        let mut cin = 1;
        for (i, b) in self.blocks.iter().enumerate() {
            layout.conv(&format!("conv{}", i + 1), cin, b, 3);
            cin = b.channels;
        }
        let flat = cin * self.final_extent()?.pow(3);
        layout.dense("fc1", flat, self.fc_hidden);
        layout.norm("fc1.bn", self.fc_hidden);
        Ok(self.fc_hidden)
    }

    pub(crate) fn input_shape(&self, batch: usize) -> Vec<usize> {
        let d = self.input_size;
        vec![batch, 1, d, d, d]
    }

    pub(crate) fn features<F: Real>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x);
        if shape.len() != 5 || shape[1..] != self.input_shape(0)[1..] {
            return Err(dim_err!(
                "voxnet expects [B, 1, {d}, {d}, {d}], got {shape:?}",
                d = self.input_size
            ));
        }
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let pad = if i == 0 { self.input_pad } else { 0 };
            h = ctx.conv_block(
                &format!("conv{}", i + 1),
                h,
                b,
                3,
                pad,
                Activation::LeakyRelu(self.leaky_slope),
            )?;
        }
        let flat = ctx.flatten(h)?;
        let fc = ctx.dense("fc1", flat)?;
        let fc = ctx.norm("fc1.bn", fc)?;
        ctx.act(fc, Activation::Relu)
    }
}
