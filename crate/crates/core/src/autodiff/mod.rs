//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operator nodes in creation order, which is a valid
//! topological order; [`Graph::backward`] walks it in reverse. Leaves created
//! with [`Graph::param`] receive accumulated gradients in their tensor's grad
//! slot.

mod conv;
mod norm;

pub use norm::{BatchStats, BnMode, BnState, BN_EPS, BN_MOMENTUM};

use crate::error::{shape_err, OndaError, Result};
use crate::tensor::Tensor;
use conv::ConvDims;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<f64>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    SoftmaxChannel(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu(_) => "relu",
            Op::SoftmaxChannel(_) => "softmax_channel",
            Op::Log(_) => "log",
            Op::Clamp(..) => "clamp",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![input, kernel, bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::Relu(a) | Op::SoftmaxChannel(a) | Op::Log(a) | Op::Sum(a) => vec![a],
            Op::Clamp(a, ..) | Op::Scale(a, _) => vec![a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operator tape. Create one per forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that keeps everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only graph: parameters are treated as constants and no
    /// backward caches are kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf, honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad() && self.record;
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a trainable leaf holding a copy of `t`'s values.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let copy = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        let rg = self.record;
        self.push(copy, Op::Leaf, rg)
    }

    /// Adds a leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a leaf by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(OndaError::NonFinite { op: op.name() });
        }
        let rg = self.record && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push_checked(shape, data, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                op.name(),
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        self.push_checked(shape, data, op)
    }

    /// Same-size cross-correlation: `input [N,Cin,H,W]`, `kernel [Cout,Cin,k,k]`
    /// with odd `k`, `bias [Cout]`, `padding = (k-1)/2`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (x, kt, bt) = (self.value(input), self.value(kernel), self.value(bias));
        x.expect_rank("conv2d", 4)?;
        kt.expect_rank("conv2d", 4)?;
        let [n, cin, h, w] = x.dims4();
        let [cout, kcin, kh, kw] = kt.dims4();
        if kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input channels: input has {cin}, kernel expects {kcin}"),
            ));
        }
        if kh != kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel size: {kh}x{kw} is not square"),
            ));
        }
        if kh % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel size: {kh} is even")));
        }
        if padding != (kh - 1) / 2 {
            return Err(shape_err(
                "conv2d",
                format!("padding: {padding} does not preserve size for kernel {kh}"),
            ));
        }
        if bt.shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias: expected [{cout}], got {:?}", bt.shape()),
            ));
        }
        let dims = ConvDims {
            n,
            cin,
            cout,
            h,
            w,
            k: kh,
        };
        let (out, cols) = conv::conv_forward(&dims, x.data(), kt.data(), bt.data(), self.record);
        self.push_checked(
            vec![n, cout, h, w],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            },
        )
    }

    /// Batch normalization. In [`BnMode::TrainUpdate`] the batch's mean and
    /// variance are returned so the caller can fold them into `state`
    /// ([`BnState::absorb`]); the other modes return `None`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &BnState,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(input);
        x.expect_rank("batchnorm2d", 4)?;
        let dims = x.dims4();
        let c = dims[1];
        if dims[0] == 0 {
            return Err(OndaError::EmptyBatch);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [c] || b.shape() != [c] || state.channels() != c {
            return Err(shape_err(
                "batchnorm2d",
                format!(
                    "channels: input has {c}, gamma {:?}, beta {:?}, state {}",
                    g.shape(),
                    b.shape(),
                    state.channels()
                ),
            ));
        }
        let fwd = norm::bn_forward(dims, x.data(), g.data(), b.data(), state, mode);
        let (xhat, inv_std) = if self.record {
            (fwd.xhat, fwd.inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        let v = self.push_checked(
            dims.to_vec(),
            fwd.out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            },
        )?;
        Ok((v, fwd.stats))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Softmax over axis 1 of an `[N, C, ...]` tensor, max-subtracted.
    pub fn softmax_channel(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() < 2 {
            return Err(shape_err("softmax_channel", "needs at least [N, C]"));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let inner: usize = t.shape()[2..].iter().product();
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            let base = b * c * inner;
            for p in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for k in 0..c {
                    mx = mx.max(x[base + k * inner + p]);
                }
                let mut s = 0.0;
                for k in 0..c {
                    let e = (x[base + k * inner + p] - mx).exp();
                    out[base + k * inner + p] = e;
                    s += e;
                }
                for k in 0..c {
                    out[base + k * inner + p] /= s;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push_checked(shape, out, Op::SoftmaxChannel(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push_checked(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(OndaError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&g)?;
                continue;
            }
            for (input, local) in self.local_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(local),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            } => {
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let [n, cin, h, w] = x.dims4();
                let [cout, _, ks, _] = k.dims4();
                let dims = ConvDims {
                    n,
                    cin,
                    cout,
                    h,
                    w,
                    k: ks,
                };
                let (dx, dk, db) = conv::conv_backward(&dims, x.data(), cols, k.data(), g);
                vec![(*input, dx), (*kernel, dk), (*bias, db)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
            } => {
                let dims = self.nodes[input.0].value.dims4();
                let (dx, dg, db) = norm::bn_backward(dims, g, xhat, inv_std, val(*gamma), *mode);
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu(a) => {
                let d = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::SoftmaxChannel(a) => {
                let p = node.value.data();
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut d = vec![0.0; p.len()];
                for b in 0..n {
                    let base = b * c * inner;
                    for q in 0..inner {
                        let mut dot = 0.0;
                        for k in 0..c {
                            let i = base + k * inner + q;
                            dot += g[i] * p[i];
                        }
                        for k in 0..c {
                            let i = base + k * inner + q;
                            d[i] = p[i] * (g[i] - dot);
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Log(a) => {
                let d = val(*a).iter().zip(g).map(|(&x, &gi)| gi / x).collect();
                vec![(*a, d)]
            }
            Op::Clamp(a, lo, hi) => {
                let d = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x >= *lo && x <= *hi { gi } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(gi, y)| gi * y).collect();
                let db = g.iter().zip(val(*a)).map(|(gi, x)| gi * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.numel()])],
        }
    }
}

/// Plain SGD: `p ← p − lr·g`, then clears every gradient slot.
pub fn sgd_step(params: &mut [&mut Tensor], lr: f64) {
    for p in params.iter_mut() {
        if let Some(g) = p.grad().map(<[f64]>::to_vec) {
            p.data_mut()
                .iter_mut()
                .zip(&g)
                .for_each(|(w, gi)| *w -= lr * gi);
        }
        p.zero_grad();
    }
}
