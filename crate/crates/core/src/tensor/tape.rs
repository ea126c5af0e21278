use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{NowcastError, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Normalizes along the last axis.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one training batch's statistics into the running estimates.
    pub fn absorb(&mut self, stats: &BatchStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.unbiased_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// Statistics observed by a train-mode batch-norm pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: ConvDims,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BatchNormMode,
        spatial: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a computation. Node indices are a topological order,
/// so the reverse sweep visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input. No gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a trainable leaf whose gradient `backward` will populate.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.nodes[v.0]
            .grad
            .take()
            .map(|g| Tensor::new(shape, g).expect("gradient shape tracks value shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Valid (unpadded) stride-1 convolution of `[C,H,W]` or `[B,C,H,W]` input
    /// with `[O,C,k,k]` weights and `[O]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        let (batch, batched, c, h, w) = match in_shape.as_slice() {
            &[c, h, w] => (1, false, c, h, w),
            &[b, c, h, w] => (b, true, c, h, w),
            other => return Err(NowcastError::dim("conv2d input rank", "3 or 4", other.len())),
        };
        let (o, wc, kh, kw) = match w_shape.as_slice() {
            &[o, wc, kh, kw] => (o, wc, kh, kw),
            other => return Err(NowcastError::dim("conv2d weight rank", 4, other.len())),
        };
        if wc != c {
            return Err(NowcastError::dim("conv2d input channels", wc, c));
        }
        if kh != kw {
            return Err(NowcastError::dim("conv2d kernel width", kh, kw));
        }
        if kh > h {
            return Err(NowcastError::dim("conv2d input height", format!(">= {kh}"), h));
        }
        if kw > w {
            return Err(NowcastError::dim("conv2d input width", format!(">= {kw}"), w));
        }
        if self.shape(bias) != [o] {
            return Err(NowcastError::dim("conv2d bias", format!("[{o}]"), format!("{:?}", self.shape(bias))));
        }
        let dims = ConvDims {
            batch,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
        };
        let out = kernels::conv2d_forward(
            dims,
            self.value(input).values(),
            self.value(weight).values(),
            self.value(bias).values(),
        );
        let (oh, ow) = dims.out_hw();
        let shape = if batched { vec![batch, o, oh, ow] } else { vec![o, oh, ow] };
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
        ))
    }

    /// `weight · input + bias` for a `[N]` vector or each row of a `[B,N]` matrix.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let (rows, n, batched) = match in_shape.as_slice() {
            &[n] => (1, n, false),
            &[b, n] => (b, n, true),
            other => return Err(NowcastError::dim("linear input rank", "1 or 2", other.len())),
        };
        let (m, wn) = match self.shape(weight) {
            &[m, wn] => (m, wn),
            other => return Err(NowcastError::dim("linear weight rank", 2, other.len())),
        };
        if wn != n {
            return Err(NowcastError::dim("linear inner dimension", wn, n));
        }
        let mut out = vec![0.0; rows * m];
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(NowcastError::dim("linear bias", format!("[{m}]"), format!("{:?}", self.shape(b))));
            }
            let bv = self.value(b).values();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(
            rows,
            n,
            m,
            self.value(input).values(),
            (n, 1),
            self.value(weight).values(),
            (1, n),
            1.0,
            &mut out,
            m,
        );
        let shape = if batched { vec![rows, m] } else { vec![m] };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        let out = match kind {
            Activation::Relu => x.values().iter().map(|&v| v.max(0.0)).collect(),
            Activation::Sigmoid => x.values().iter().map(|&v| sigmoid(v)).collect(),
            Activation::Tanh => x.values().iter().map(|&v| v.tanh()).collect(),
            Activation::Softmax => {
                let last = *x.shape().last().expect("rank >= 1");
                let mut out = Vec::with_capacity(x.len());
                for row in x.values().chunks(last) {
                    softmax_into(row, &mut out);
                }
                out
            }
        };
        let shape = x.shape().to_vec();
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Activation { input, kind }))
    }

    /// Per-channel batch normalization of `[B,C,...]` input with learnable
    /// `gamma`/`beta`. In train mode the batch statistics are returned so the
    /// caller can fold them into `state`; `state` itself is never mutated here.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BnState,
        mode: BatchNormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(NowcastError::dim("batch_norm input rank", ">= 2", shape.len()));
        }
        let (b, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(NowcastError::dim(
                    format!("batch_norm {name}"),
                    format!("[{c}]"),
                    format!("{:?}", self.shape(v)),
                ));
            }
        }
        if state.channels() != c {
            return Err(NowcastError::dim("batch_norm running statistics", c, state.channels()));
        }
        if mode == BatchNormMode::Train && b < 2 {
            return Err(NowcastError::Config(format!(
                "batch_norm in train mode needs a batch of at least 2, got {b}"
            )));
        }
        let x = self.value(input).values();
        let count = (b * spatial) as f64;
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for (ci, m) in mean.iter_mut().enumerate() {
                        *m += x[(bi * c + ci) * spatial..][..spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for bi in 0..b {
                    for ci in 0..c {
                        let m = mean[ci];
                        var[ci] += x[(bi * c + ci) * spatial..][..spatial]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
            BatchNormMode::Infer => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let g = self.value(gamma).values();
        let bt = self.value(beta).values();
        let mut x_hat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                for s in base..base + spatial {
                    let xh = (x[s] - mean[ci]) * inv_std[ci];
                    x_hat[s] = xh;
                    out[s] = g[ci] * xh + bt[ci];
                }
            }
        }
        let stats = (mode == BatchNormMode::Train).then(|| BatchStats {
            unbiased_var: var.iter().map(|v| v * count / (count - 1.0)).collect(),
            mean,
        });
        let rg = self.needs(&[input, gamma, beta]);
        let v = self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                mode,
                spatial,
            },
        );
        Ok((v, stats))
    }

    /// 2x2 max pooling with stride 2 over the last two axes.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 3 {
            return Err(NowcastError::dim("max_pool2d input rank", ">= 3", shape.len()));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 2 != 0 {
            return Err(NowcastError::dim("max_pool2d height", "even extent", h));
        }
        if w % 2 != 0 {
            return Err(NowcastError::dim("max_pool2d width", "even extent", w));
        }
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let (out, argmax) = kernels::max_pool2_forward(self.value(input).values(), planes, h, w);
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = h / 2;
        out_shape[r - 1] = w / 2;
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::MaxPool2d { input, argmax }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` for
    /// `[B,2]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, classes) = match self.shape(logits) {
            &[b, c] => (b, c),
            other => return Err(NowcastError::dim("cross_entropy logits rank", 2, other.len())),
        };
        if classes != 2 {
            return Err(NowcastError::dim("cross_entropy classes", 2, classes));
        }
        if labels.len() != b {
            return Err(NowcastError::dim("cross_entropy labels", b, labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(NowcastError::Data(format!("label {bad} outside {{0,1}}")));
        }
        let x = self.value(logits).values();
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = 0.0;
        for (row, &label) in x.chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_into(row, &mut probs);
        }
        loss /= b as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Columns `start..start+len` of a `[B,N]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, n) = match self.shape(a) {
            &[r, n] => (r, n),
            other => return Err(NowcastError::dim("slice_cols input rank", 2, other.len())),
        };
        if len == 0 || start + len > n {
            return Err(NowcastError::dim("slice_cols columns", format!("<= {n}"), start + len));
        }
        let x = self.value(a).values();
        let mut out = Vec::with_capacity(rows * len);
        for row in x.chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, rg, Op::SliceCols { input: a, start }))
    }

    /// Selects rows of a `[U,F]` matrix; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (u, f) = match self.shape(a) {
            &[u, f] => (u, f),
            other => return Err(NowcastError::dim("gather_rows input rank", 2, other.len())),
        };
        if rows.is_empty() {
            return Err(NowcastError::dim("gather_rows index count", ">= 1", 0));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= u) {
            return Err(NowcastError::dim("gather_rows row index", format!("< {u}"), bad));
        }
        let x = self.value(a).values();
        let mut out = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            out.extend_from_slice(&x[r * f..(r + 1) * f]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), f], out)?,
            rg,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
        ))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NowcastError::dim(
                format!("{op} operand shape"),
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every node
    /// reachable from `loss` that requires them; other nodes are untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NowcastError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NowcastError::Usage("loss does not depend on any parameter".into()));
        }
        // Fresh sweep buffers; leaf grads from earlier sweeps are accumulated onto.
        let mut sweep: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        sweep[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = sweep[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(i, &g);
            for (target, tg) in contributions {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                accumulate(&mut sweep[target.0], tg);
            }
            accumulate(&mut self.nodes[i].grad, g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Which side of every non-differentiable point the recorded computation
    /// took: the sign of each ReLU input and each max-pool argmax. Two tapes
    /// of the same graph with equal signatures lie on one smooth piece.
    pub fn branch_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Activation {
                    input,
                    kind: Activation::Relu,
                } => {
                    let x = self.nodes[input.0].value.values();
                    for chunk in x.chunks(64) {
                        let bits = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |acc, (i, &v)| acc | (u64::from(v > 0.0) << i));
                        sig.push(bits);
                    }
                }
                Op::MaxPool2d { argmax, .. } => sig.extend(argmax.iter().map(|&a| a as u64)),
                _ => {}
            }
        }
        sig
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.values();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let grads = kernels::conv2d_backward(*dims, val(*input), val(*weight), g, wants(*input));
                let mut out = vec![(*weight, grads.weight), (*bias, grads.bias)];
                if let Some(gi) = grads.input {
                    out.push((*input, gi));
                }
                out
            }
            Op::Linear {
                input,
                weight,
                bias,
                rows,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let n = x.len() / rows;
                let m = w.len() / n;
                let mut out = Vec::with_capacity(3);
                if wants(*input) {
                    let mut gx = vec![0.0; x.len()];
                    kernels::gemm(*rows, m, n, g, (m, 1), w, (n, 1), 0.0, &mut gx, n);
                    out.push((*input, gx));
                }
                if wants(*weight) {
                    let mut gw = vec![0.0; w.len()];
                    kernels::gemm(m, *rows, n, g, (1, m), x, (n, 1), 0.0, &mut gw, n);
                    out.push((*weight, gw));
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, gb));
                }
                out
            }
            Op::Activation { input, kind } => {
                let y = node.value.values();
                let gx = match kind {
                    Activation::Relu => y
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| if yv > 0.0 { gv } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => y.iter().zip(g).map(|(&yv, &gv)| gv * yv * (1.0 - yv)).collect(),
                    Activation::Tanh => y.iter().zip(g).map(|(&yv, &gv)| gv * (1.0 - yv * yv)).collect(),
                    Activation::Softmax => {
                        let last = *node.value.shape().last().expect("rank >= 1");
                        let mut gx = Vec::with_capacity(y.len());
                        for (yr, gr) in y.chunks(last).zip(g.chunks(last)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            gx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                        }
                        gx
                    }
                };
                vec![(*input, gx)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                mode,
                spatial,
            } => {
                let c = inv_std.len();
                let spatial = *spatial;
                let b = x_hat.len() / (c * spatial);
                let gm = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for s in base..base + spatial {
                            sum_g[ci] += g[s];
                            sum_gx[ci] += g[s] * x_hat[s];
                        }
                    }
                }
                let mut out = vec![(*gamma, sum_gx.clone()), (*beta, sum_g.clone())];
                if wants(*input) {
                    let mut gx = vec![0.0; g.len()];
                    let count = (b * spatial) as f64;
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            let scale = gm[ci] * inv_std[ci];
                            for s in base..base + spatial {
                                gx[s] = match mode {
                                    BatchNormMode::Train => {
                                        scale * (g[s] - sum_g[ci] / count - x_hat[s] * sum_gx[ci] / count)
                                    }
                                    BatchNormMode::Infer => scale * g[s],
                                };
                            }
                        }
                    }
                    out.push((*input, gx));
                }
                out
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gx = vec![0.0; val(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx] += gv;
                }
                vec![(*input, gx)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g[0] / labels.len() as f64;
                let mut gx = probs.clone();
                for (row, &label) in gx.chunks_mut(2).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, gx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::SliceCols { input, start } => {
                let src_shape = self.nodes[input.0].value.shape();
                let n = src_shape[1];
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; val(*input).len()];
                for (dst, src) in gx.chunks_mut(n).zip(g.chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                vec![(*input, gx)]
            }
            Op::GatherRows { input, rows } => {
                let f = node.value.shape()[1];
                let mut gx = vec![0.0; val(*input).len()];
                for (&r, src) in rows.iter().zip(g.chunks(f)) {
                    for (d, s) in gx[r * f..(r + 1) * f].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![(*input, gx)]
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), values).expect("shapes checked by caller")
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for &v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= total);
}
