use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::serialize::{Bound, ParamStore};
use crate::tensor::{Activation, BatchNormState, BnMode, ConvSpec, Graph, Real, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// One convolution block: conv, optional batch norm, activation, optional
/// max pool with window and stride `pool`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub batchnorm: bool,
    #[serde(default)]
    pub pool: Option<usize>,
}

impl ConvBlock {
    pub fn new(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvBlock {
            channels,
            kernel,
            stride,
            padding,
            batchnorm: true,
            pool: None,
        }
    }

    /// Spatial extent after the block.
    pub fn output_extent(&self, input: usize, extra_pad: usize) -> Option<usize> {
        let padded = input + 2 * (self.padding + extra_pad);
        let conv = padded.checked_sub(self.kernel)? / self.stride + 1;
        match self.pool {
            Some(p) if p > 0 => conv.checked_sub(p).map(|r| r / p + 1),
            _ => Some(conv),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform He initialization for the given fan-in.
    He(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Parameter and running-statistics layout of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Layout {
    pub params: Vec<ParamDecl>,
    pub norms: Vec<(String, usize)>,
}

impl Layout {
    pub fn conv(&mut self, prefix: &str, cin: usize, block: &ConvBlock, rank: usize) {
        let k = block.kernel.pow(rank as u32);
        let mut shape = vec![block.channels, cin];
        shape.extend(std::iter::repeat(block.kernel).take(rank));
        self.push(format!("{prefix}.weight"), shape, Init::He(cin * k));
        self.push(format!("{prefix}.bias"), vec![block.channels], Init::Zeros);
        if block.batchnorm {
            self.norm(&format!("{prefix}.bn"), block.channels);
        }
    }

    pub fn dense(&mut self, prefix: &str, input: usize, output: usize) {
        self.push(format!("{prefix}.weight"), vec![input, output], Init::He(input));
        self.push(format!("{prefix}.bias"), vec![output], Init::Zeros);
    }

    pub fn norm(&mut self, prefix: &str, channels: usize) {
        self.push(format!("{prefix}.gamma"), vec![channels], Init::Ones);
        self.push(format!("{prefix}.beta"), vec![channels], Init::Zeros);
        self.norms.push((prefix.to_string(), channels));
    }

    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.params.push(ParamDecl { name, shape, init });
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }

    pub fn materialize<F: Real>(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore<F>> {
        let mut store = ParamStore::new();
        for p in &self.params {
            let n: usize = p.shape.iter().product();
            let values: Vec<F> = match p.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::He(fan_in) => {
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect()
                }
            };
            store.insert(p.name.clone(), Tensor::new(p.shape.clone(), values)?);
        }
        for (name, c) in &self.norms {
            store.insert_buffer(name.clone(), BatchNormState::new(*c));
        }
        Ok(store)
    }
}

/// Forward-pass context: the graph, bound parameters and batch-norm mode.
pub(crate) struct Ctx<'a, F: Real> {
    pub g: &'a mut Graph<F>,
    pub bound: &'a Bound,
    pub store: &'a ParamStore<F>,
    pub train: bool,
    pub updates: Vec<(String, BatchNormState<F>)>,
}

impl<F: Real> Ctx<'_, F> {
    pub fn conv(&mut self, prefix: &str, x: Var, block: &ConvBlock, rank: usize, extra_pad: usize) -> Result<Var> {
        let w = self.bound.get(&format!("{prefix}.weight"))?;
        let b = self.bound.get(&format!("{prefix}.bias"))?;
        let spec = ConvSpec::new(rank, block.stride, block.padding + extra_pad);
        self.g.conv(x, w, b, spec)
    }

    pub fn dense(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.bound.get(&format!("{prefix}.weight"))?;
        let b = self.bound.get(&format!("{prefix}.bias"))?;
        self.g.dense(x, w, b)
    }

    pub fn norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.bound.get(&format!("{prefix}.gamma"))?;
        let beta = self.bound.get(&format!("{prefix}.beta"))?;
        let eps = F::of(BN_EPS);
        if self.train {
            let mut state = self.store.buffer(prefix)?.clone();
            let out = self.g.batchnorm(
                x,
                gamma,
                beta,
                BnMode::Train {
                    state: &mut state,
                    momentum: F::of(BN_MOMENTUM),
                },
                eps,
            )?;
            self.updates.push((prefix.to_string(), state));
            Ok(out)
        } else {
            let state = self.store.buffer(prefix)?;
            self.g.batchnorm(x, gamma, beta, BnMode::Eval(state), eps)
        }
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.g.activation(x, kind)
    }

    /// Conv, optional norm, activation and optional pooling.
    pub fn conv_block(
        &mut self,
        prefix: &str,
        x: Var,
        block: &ConvBlock,
        rank: usize,
        extra_pad: usize,
        kind: Activation,
    ) -> Result<Var> {
        let mut h = self.conv(prefix, x, block, rank, extra_pad)?;
        if block.batchnorm {
            h = self.norm(&format!("{prefix}.bn"), h)?;
        }
        h = self.act(h, kind)?;
        if let Some(p) = block.pool {
            h = self.g.max_pool(
                h,
                crate::tensor::PoolMode::Spatial {
                    rank,
                    window: p,
                    stride: p,
                },
            )?;
        }
        Ok(h)
    }

    /// Mean over all trailing axes of `[N, C, ...]`, giving `[N, C]`.
    pub fn global_average(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let inner: usize = s[2..].iter().product();
        let flat = self.g.reshape(x, &[s[0], s[1], inner])?;
        let summed = self.g.sum_axis(flat, 2)?;
        self.g.scale(summed, F::of(1.0 / inner as f64))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let rest: usize = s[1..].iter().product();
        self.g.reshape(x, &[s[0], rest])
    }
}
