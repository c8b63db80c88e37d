use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::conv::{col2im, im2col, pool_argmax, ConvSpec, Geom3};
use super::{softmax_rows, Real, Tensor};
use crate::error::{dim_err, invalid, Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Elementwise nonlinearities with exact analytic derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Exponential,
    /// `u -> 1 - exp(-u)`, the line-integral shading function.
    NegateExpComplement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    /// Sliding window over the trailing spatial axes of `[B, C, ...]`.
    Spatial {
        rank: usize,
        window: usize,
        stride: usize,
    },
    /// Maximum over a whole axis, which is removed from the output.
    Axis(usize),
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Real> BatchNormState<F> {
    /// Mean 0, variance 1: what eval mode uses before any training update.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }
}

pub enum BnMode<'a, F> {
    Train {
        state: &'a mut BatchNormState<F>,
        momentum: F,
    },
    Eval(&'a BatchNormState<F>),
}

/// Classification targets for [`Graph::softmax_cross_entropy`].
#[derive(Clone, Debug)]
pub enum Targets<'a, F> {
    Classes(&'a [usize]),
    /// Row-major `[B, C]` probability rows.
    Probabilities(&'a [F]),
}

enum Op<F> {
    Leaf,
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv {
        x: usize,
        w: usize,
        b: usize,
        geom: Geom3,
    },
    /// Output element `i` copies input element `source[i]`.
    Select {
        x: usize,
        source: Arc<Vec<usize>>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        channels: usize,
        inner: usize,
        train: bool,
    },
    Act {
        x: usize,
        kind: Activation,
    },
    SoftmaxXent {
        logits: usize,
        probs: Vec<F>,
        targets: Vec<F>,
        batch: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: F,
    },
    MulConst {
        x: usize,
        c: Tensor<F>,
    },
    Sum {
        x: usize,
    },
    SumAxis {
        x: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        x: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records operations of one forward pass; `backward` replays them in exact
/// reverse creation order.
pub struct Graph<F: Real> {
    id: u64,
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of values held by recorded nodes.
    pub fn value_count(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        assert_eq!(v.graph, self.id, "variable belongs to another graph");
        let g = self.grads.get(v.index)?.as_ref()?;
        Some(
            Tensor::new(self.nodes[v.index].value.shape().to_vec(), g.clone())
                .expect("gradient shape matches value"),
        )
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {v:?} is detached from graph {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn val(&self, i: usize) -> &Tensor<F> {
        &self.nodes[i].value
    }

    // ---- operators -------------------------------------------------------

    /// `x[B, I] @ w[I, O] + b[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
            return Err(dim_err!("dense: input {xs:?}, weight {ws:?}, bias {bs:?} do not agree"));
        }
        let (batch, inner, out) = (xs[0], xs[1], ws[1]);
        let bias = self.val(bi).data();
        let mut data = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            data.extend_from_slice(bias);
        }
        F::gemm(
            batch,
            inner,
            out,
            self.val(xi).data(),
            inner as isize,
            1,
            self.val(wi).data(),
            out as isize,
            1,
            F::one(),
            &mut data,
        );
        let value = Tensor::new(vec![batch, out], data)?;
        let rg = self.rg(&[xi, wi, bi]);
        Ok(self.push(value, Op::Dense { x: xi, w: wi, b: bi }, rg))
    }

    /// Cross-correlation of `x[B, Cin, ...]` with `kernels[Cout, Cin, ...]`.
    pub fn conv(&mut self, x: Var, kernels: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(kernels)?, self.idx(bias)?);
        let r = spec.rank;
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        if xs.len() != r + 2 || ws.len() != r + 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(dim_err!(
                "conv{r}d: input {xs:?}, kernels {ws:?}, bias {bs:?} do not agree"
            ));
        }
        let geom = Geom3::build(r, &xs[2..], &ws[2..], spec.stride, spec.padding)?;
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        let rows = cin * geom.kernel_len();
        let l = geom.out_len();
        let mut out = vec![F::zero(); batch * cout * l];
        let mut cols = vec![F::zero(); rows * l];
        let xd = self.val(xi).data();
        let wd = self.val(wi).data();
        let bd = self.val(bi).data();
        for s in 0..batch {
            im2col(&xd[s * cin * geom.in_len()..(s + 1) * cin * geom.in_len()], cin, &geom, &mut cols);
            let o = &mut out[s * cout * l..(s + 1) * cout * l];
            for (c, chunk) in o.chunks_mut(l).enumerate() {
                chunk.fill(bd[c]);
            }
            F::gemm(cout, rows, l, wd, rows as isize, 1, &cols, l as isize, 1, F::one(), o);
        }
        let mut shape = vec![batch, cout];
        shape.extend(geom.out_spatial(r));
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[xi, wi, bi]);
        Ok(self.push(
            value,
            Op::Conv {
                x: xi,
                w: wi,
                b: bi,
                geom,
            },
            rg,
        ))
    }

    pub fn max_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.val(xi).shape().to_vec();
        let xd = self.val(xi).data();
        let (shape, source) = match mode {
            PoolMode::Spatial {
                rank,
                window,
                stride,
            } => {
                if xs.len() != rank + 2 {
                    return Err(dim_err!("max_pool: input {xs:?} is not [B, C, {rank} spatial]"));
                }
                if window == 0 || xs[2..].iter().any(|&e| window > e) {
                    return Err(dim_err!("max_pool: window {window} exceeds extent of {xs:?}"));
                }
                let geom = Geom3::build(rank, &xs[2..], &vec![window; rank], stride, 0)?;
                let planes = xs[0] * xs[1];
                let plane = geom.in_len();
                let mut source = Vec::with_capacity(planes * geom.out_len());
                for p in 0..planes {
                    let start = source.len();
                    pool_argmax(&xd[p * plane..(p + 1) * plane], &geom, &mut source);
                    source[start..].iter_mut().for_each(|s| *s += p * plane);
                }
                let mut shape = xs[..2].to_vec();
                shape.extend(geom.out_spatial(rank));
                (shape, source)
            }
            PoolMode::Axis(dim) => {
                if dim >= xs.len() {
                    return Err(dim_err!("max_pool: axis {dim} invalid for {xs:?}"));
                }
                let outer: usize = xs[..dim].iter().product();
                let len = xs[dim];
                let inner: usize = xs[dim + 1..].iter().product();
                let mut source = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut best = base;
                        for k in 1..len {
                            let idx = base + k * inner;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        source.push(best);
                    }
                }
                let mut shape: Vec<usize> = xs[..dim].iter().chain(&xs[dim + 1..]).copied().collect();
                if shape.is_empty() {
                    shape.push(1);
                }
                (shape, source)
            }
        };
        self.select(xi, shape, Arc::new(source))
    }

    /// Output element `i` is `x[source[i]]`; covers flips, permutations and
    /// crops. Backward scatter-adds.
    pub fn gather(&mut self, x: Var, shape: &[usize], source: Arc<Vec<usize>>) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = self.val(xi).len();
        if source.iter().any(|&s| s >= n) {
            return Err(dim_err!("gather: source index out of range for {n} values"));
        }
        self.select(xi, shape.to_vec(), source)
    }

    fn select(&mut self, xi: usize, shape: Vec<usize>, source: Arc<Vec<usize>>) -> Result<Var> {
        let xd = self.val(xi).data();
        let data: Vec<F> = source.iter().map(|&s| xd[s]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Select { x: xi, source }, rg))
    }

    /// Normalizes each channel (axis 1) of `x[B, C, ...]`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, F>,
        eps: F,
    ) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.val(xi).shape();
        if xs.len() < 2 {
            return Err(dim_err!("batchnorm: input {xs:?} has no channel axis"));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.val(gi).shape() != [channels] || self.val(bi).shape() != [channels] {
            return Err(dim_err!(
                "batchnorm: gamma {:?} / beta {:?} must have {channels} channels",
                self.val(gi).shape(),
                self.val(bi).shape()
            ));
        }
        let n = batch * inner;
        let xd = self.val(xi).data();
        let (mean, var, train) = match &mode {
            BnMode::Train { .. } => {
                if n == 0 {
                    return Err(invalid!("batchnorm: empty batch"));
                }
                let mut mean = vec![F::zero(); channels];
                let mut var = vec![F::zero(); channels];
                let nf = F::of(n as f64);
                for c in 0..channels {
                    let mut s = F::zero();
                    for b in 0..batch {
                        let base = (b * channels + c) * inner;
                        s += xd[base..base + inner].iter().copied().sum::<F>();
                    }
                    let m = s / nf;
                    let mut q = F::zero();
                    for b in 0..batch {
                        let base = (b * channels + c) * inner;
                        for &v in &xd[base..base + inner] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = q / nf;
                }
                (mean, var, true)
            }
            BnMode::Eval(state) => {
                if state.mean.len() != channels || state.var.len() != channels {
                    return Err(dim_err!("batchnorm: running stats do not have {channels} channels"));
                }
                (state.mean.clone(), state.var.clone(), false)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gd = self.val(gi).data();
        let bd = self.val(bi).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * inner;
                for k in base..base + inner {
                    let h = (xd[k] - mean[c]) * inv_std[c];
                    xhat[k] = h;
                    out[k] = gd[c] * h + bd[c];
                }
            }
        }
        if let BnMode::Train { state, momentum } = mode {
            if state.mean.len() != channels {
                return Err(dim_err!("batchnorm: running stats do not have {channels} channels"));
            }
            let unbias = if n > 1 {
                F::of(n as f64 / (n as f64 - 1.0))
            } else {
                F::one()
            };
            for c in 0..channels {
                state.mean[c] = (F::one() - momentum) * state.mean[c] + momentum * mean[c];
                state.var[c] = (F::one() - momentum) * state.var[c] + momentum * var[c] * unbias;
            }
        }
        let value = Tensor::new(xs.to_vec(), out)?;
        let rg = self.rg(&[xi, gi, bi]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                inv_std,
                channels,
                inner,
                train,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = match kind {
            Activation::Relu => self.val(xi).map(|v| if v > F::zero() { v } else { F::zero() }),
            Activation::LeakyRelu(slope) => {
                let s = F::of(slope);
                self.val(xi).map(|v| if v > F::zero() { v } else { s * v })
            }
            Activation::Exponential => self.val(xi).map(|v| v.exp()),
            Activation::NegateExpComplement => self.val(xi).map(|v| -(-v).exp_m1()),
        };
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Act { x: xi, kind }, rg))
    }

    /// Batch-mean of `-sum_i p_i log softmax(z)_i` over `[B, C]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Targets<'_, F>) -> Result<Var> {
        let li = self.idx(logits)?;
        let ls = self.val(li).shape();
        if ls.len() != 2 {
            return Err(dim_err!("softmax_cross_entropy: logits {ls:?} are not [B, C]"));
        }
        let (batch, classes) = (ls[0], ls[1]);
        let target_rows = match targets {
            Targets::Classes(ys) => {
                if ys.len() != batch {
                    return Err(dim_err!("{} class targets for batch {batch}", ys.len()));
                }
                let mut rows = vec![F::zero(); batch * classes];
                for (b, &y) in ys.iter().enumerate() {
                    if y >= classes {
                        return Err(invalid!("class target {y} out of range for {classes} classes"));
                    }
                    rows[b * classes + y] = F::one();
                }
                rows
            }
            Targets::Probabilities(p) => {
                if p.len() != batch * classes {
                    return Err(dim_err!(
                        "probability targets hold {} values, logits {ls:?}",
                        p.len()
                    ));
                }
                for (b, row) in p.chunks(classes).enumerate() {
                    let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                    if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < F::zero()) {
                        return Err(invalid!(
                            "probability target row {b} is not a distribution (sum {s})"
                        ));
                    }
                }
                p.to_vec()
            }
        };
        let zd = self.val(li).data();
        let mut total = F::zero();
        for (row, prow) in zd.chunks(classes).zip(target_rows.chunks(classes)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
            let mut l = F::zero();
            for (&z, &p) in row.iter().zip(prow) {
                l += p * (lse - z);
            }
            total += l;
        }
        let loss = total / F::of(batch as f64);
        let probs = softmax_rows(zd, classes);
        let rg = self.rg(&[li]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: li,
                probs,
                targets: target_rows,
                batch,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.val(ai).shape() != self.val(bi).shape() {
            return Err(dim_err!(
                "add: shapes {:?} and {:?} differ",
                self.val(ai).shape(),
                self.val(bi).shape()
            ));
        }
        let data = self
            .val(ai)
            .data()
            .iter()
            .zip(self.val(bi).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.val(ai).shape().to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Add { a: ai, b: bi }, rg))
    }

    /// Elementwise product of two equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.val(ai).shape() != self.val(bi).shape() {
            return Err(dim_err!(
                "mul: shapes {:?} and {:?} differ",
                self.val(ai).shape(),
                self.val(bi).shape()
            ));
        }
        let data = self
            .val(ai)
            .data()
            .iter()
            .zip(self.val(bi).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.val(ai).shape().to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::Mul { a: ai, b: bi }, rg))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.val(xi).map(|v| v * c);
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Scale { x: xi, c }, rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<F>) -> Result<Var> {
        let xi = self.idx(x)?;
        if self.val(xi).shape() != c.shape() {
            return Err(dim_err!(
                "mul_const: shapes {:?} and {:?} differ",
                self.val(xi).shape(),
                c.shape()
            ));
        }
        let data = self
            .val(xi)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::MulConst { x: xi, c }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.val(xi).data().iter().copied().sum();
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }, rg))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.val(xi).shape().to_vec();
        if axis >= xs.len() {
            return Err(dim_err!("sum_axis: axis {axis} invalid for {xs:?}"));
        }
        let outer: usize = xs[..axis].iter().product();
        let len = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xd = self.val(xi).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &xd[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape: Vec<usize> = xs[..axis].iter().chain(&xs[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::SumAxis { x: xi, len, inner }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.val(xi).reshape(shape)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Reshape { x: xi }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self
            .val(*ids.first().ok_or_else(|| dim_err!("concat: no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err!("concat: axis {axis} invalid for {first:?}"));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        let mut chunks = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = self.val(i).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(dim_err!("concat: {s:?} incompatible with {first:?} on axis {axis}"));
            }
            total += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&i, &c) in ids.iter().zip(&chunks) {
                data.extend_from_slice(&self.val(i).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&ids);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: ids,
                outer,
                chunks,
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// gradients. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.val(li).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(li).shape()
            )));
        }
        if !self.nodes[li].requires_grad {
            return Ok(());
        }
        let mut tmp: Vec<Option<Vec<F>>> = (0..=li).map(|_| None).collect();
        tmp[li] = Some(vec![F::one()]);
        for i in (0..=li).rev() {
            let Some(g) = tmp[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut tmp);
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], tmp: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (batch, inner) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                let out = nodes[*w].value.shape()[1];
                if wants(*x) {
                    // dx = g @ w^T
                    let wd = nodes[*w].value.data();
                    F::gemm(batch, out, inner, g, out as isize, 1, wd, 1, out as isize, F::one(), slot(tmp, nodes, *x));
                }
                if wants(*w) {
                    // dw = x^T @ g
                    let xd = nodes[*x].value.data();
                    F::gemm(inner, batch, out, xd, 1, inner as isize, g, out as isize, 1, F::one(), slot(tmp, nodes, *w));
                }
                if wants(*b) {
                    let db = slot(tmp, nodes, *b);
                    for row in g.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Conv { x, w, b, geom } => {
                let xs = nodes[*x].value.shape();
                let (batch, cin) = (xs[0], xs[1]);
                let cout = nodes[*w].value.shape()[0];
                let rows = cin * geom.kernel_len();
                let l = geom.out_len();
                let in_len = cin * geom.in_len();
                let xd = nodes[*x].value.data();
                let wd = nodes[*w].value.data();
                let mut cols = vec![F::zero(); rows * l];
                if wants(*w) {
                    for s in 0..batch {
                        im2col(&xd[s * in_len..(s + 1) * in_len], cin, geom, &mut cols);
                        let gs = &g[s * cout * l..(s + 1) * cout * l];
                        // dw += g_s @ cols^T
                        F::gemm(cout, l, rows, gs, l as isize, 1, &cols, 1, l as isize, F::one(), slot(tmp, nodes, *w));
                    }
                }
                if wants(*b) {
                    let db = slot(tmp, nodes, *b);
                    for s in 0..batch {
                        for c in 0..cout {
                            let base = (s * cout + c) * l;
                            db[c] += g[base..base + l].iter().copied().sum::<F>();
                        }
                    }
                }
                if wants(*x) {
                    let dx = slot(tmp, nodes, *x);
                    for s in 0..batch {
                        let gs = &g[s * cout * l..(s + 1) * cout * l];
                        // dcols = w^T @ g_s
                        F::gemm(rows, cout, l, wd, 1, rows as isize, gs, l as isize, 1, F::zero(), &mut cols);
                        col2im(&cols, cin, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            Op::Select { x, source } => {
                if wants(*x) {
                    let dx = slot(tmp, nodes, *x);
                    for (&s, &v) in source.iter().zip(g) {
                        dx[s] += v;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                train,
            } => {
                let channels = *channels;
                let inner = *inner;
                let batch = nodes[*x].value.shape()[0];
                let mut sum_g = vec![F::zero(); channels];
                let mut sum_gx = vec![F::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * inner;
                        for k in base..base + inner {
                            sum_g[c] += g[k];
                            sum_gx[c] += g[k] * xhat[k];
                        }
                    }
                }
                if wants(*gamma) {
                    slot(tmp, nodes, *gamma).iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                }
                if wants(*beta) {
                    slot(tmp, nodes, *beta).iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                }
                if wants(*x) {
                    let gd = nodes[*gamma].value.data();
                    let n = F::of((batch * inner) as f64);
                    let dx = slot(tmp, nodes, *x);
                    for b in 0..batch {
                        for c in 0..channels {
                            let base = (b * channels + c) * inner;
                            let k0 = gd[c] * inv_std[c];
                            for k in base..base + inner {
                                dx[k] += if *train {
                                    k0 * (g[k] - sum_g[c] / n - xhat[k] * sum_gx[c] / n)
                                } else {
                                    k0 * g[k]
                                };
                            }
                        }
                    }
                }
            }
            Op::Act { x, kind } => {
                if wants(*x) {
                    let xd = nodes[*x].value.data();
                    let yd = nodes[i].value.data();
                    let dx = slot(tmp, nodes, *x);
                    match *kind {
                        Activation::Relu => {
                            for k in 0..g.len() {
                                if xd[k] > F::zero() {
                                    dx[k] += g[k];
                                }
                            }
                        }
                        Activation::LeakyRelu(slope) => {
                            let s = F::of(slope);
                            for k in 0..g.len() {
                                dx[k] += if xd[k] > F::zero() { g[k] } else { s * g[k] };
                            }
                        }
                        Activation::Exponential => {
                            for k in 0..g.len() {
                                dx[k] += g[k] * yd[k];
                            }
                        }
                        Activation::NegateExpComplement => {
                            for k in 0..g.len() {
                                dx[k] += g[k] * (-xd[k]).exp();
                            }
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
                batch,
            } => {
                if wants(*logits) {
                    let scale = g[0] / F::of(*batch as f64);
                    let classes = probs.len() / batch;
                    let dz = slot(tmp, nodes, *logits);
                    for (r, (prow, trow)) in probs.chunks(classes).zip(targets.chunks(classes)).enumerate() {
                        // d/dz of sum_i p_i (lse - z_i) = (sum_i p_i) softmax - p
                        let mass: F = trow.iter().copied().sum();
                        for c in 0..classes {
                            dz[r * classes + c] += scale * (mass * prow[c] - trow[c]);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if wants(j) {
                        slot(tmp, nodes, j).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
                if wants(*a) {
                    slot(tmp, nodes, *a).iter_mut().zip(g).zip(bd).for_each(|((d, &v), &k)| *d += k * v);
                }
                if wants(*b) {
                    slot(tmp, nodes, *b).iter_mut().zip(g).zip(ad).for_each(|((d, &v), &k)| *d += k * v);
                }
            }
            Op::Scale { x, c } => {
                if wants(*x) {
                    slot(tmp, nodes, *x).iter_mut().zip(g).for_each(|(d, &v)| *d += *c * v);
                }
            }
            Op::MulConst { x, c } => {
                if wants(*x) {
                    slot(tmp, nodes, *x)
                        .iter_mut()
                        .zip(g)
                        .zip(c.data())
                        .for_each(|((d, &v), &k)| *d += k * v);
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    slot(tmp, nodes, *x).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis { x, len, inner } => {
                if wants(*x) {
                    let dx = slot(tmp, nodes, *x);
                    let outer = g.len() / inner;
                    for o in 0..outer {
                        let go = &g[o * inner..(o + 1) * inner];
                        for k in 0..*len {
                            let base = (o * len + k) * inner;
                            dx[base..base + inner].iter_mut().zip(go).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    slot(tmp, nodes, *x).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&j, &c) in inputs.iter().zip(chunks) {
                    if wants(j) {
                        let dx = slot(tmp, nodes, j);
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + c];
                            dx[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += c;
                }
            }
        }
    }
}

fn slot<'a, F: Real>(tmp: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], j: usize) -> &'a mut Vec<F> {
    tmp[j].get_or_insert_with(|| vec![F::zero(); nodes[j].value.len()])
}
