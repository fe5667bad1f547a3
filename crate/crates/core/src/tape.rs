//! Reverse-mode automatic differentiation over a fixed op vocabulary.
//!
//! A `Tape` records the forward computation as a flat list of nodes; node
//! inputs always refer backward, so a single reverse sweep over the list is
//! a valid reverse-topological traversal. Parameter leaves carry the index
//! of their entry in the owning `ParamSet`, and `backward` accumulates into
//! those entries' grad buffers.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Targets for the fused softmax + cross-entropy op.
#[derive(Debug, Clone)]
pub enum Targets {
    Hard(Vec<usize>),
    /// One row of target probabilities per example, rows summing to 1.
    Soft(Tensor),
}

#[derive(Debug, Clone)]
enum Op {
    /// inputs: [x (B,Ci,T), w (Co,Ci,K), b (Co)] or [x, w] when bias absent
    Conv1d { stride: usize, padding: usize },
    /// inputs: [x (B,C,T), gamma (C), beta (C)]; saved normalized values
    /// and per-channel inverse std from the forward pass
    BatchNorm { x_hat: Tensor, inv_std: Vec<f64> },
    /// inputs: [x]
    Relu,
    /// inputs: [a, b], same shape
    Add,
    /// inputs: [x (B,C,T)] -> (B,C)
    GlobalAvgPool,
    /// inputs: [x (B,C), w (O,C), b (O)]
    Dense,
    /// inputs: [logits (B,C)] -> scalar; saved softmax rows
    CrossEntropy { probs: Tensor, targets: Targets },
    /// inputs: [a, b], scalars
    AddScalars,
    /// inputs: [a], scalar
    ScaleScalar { factor: f64 },
}

#[derive(Debug, Clone)]
enum Node {
    /// Constant input (batch features).
    Input,
    /// Copy of a parameter value; `index` addresses the ParamSet entry.
    Param { index: usize },
    Op { op: Op, inputs: Vec<NodeId> },
}

/// Recorded forward computation. Holds each node's value so backward can
/// re-read activations without recomputing them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    fn push(&mut self, node: Node, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value on tape");
        self.nodes.push(node);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Node::Input, value)
    }

    pub fn param(&mut self, index: usize, value: Tensor) -> NodeId {
        self.push(Node::Param { index }, value)
    }

    /// 1-D convolution over the last axis, `padding` zeros on both sides.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        let out = conv1d_raw(
            &self.values[x],
            &self.values[w],
            b.map(|id| &self.values[id]),
            stride,
            padding,
        );
        let mut inputs = vec![x, w];
        if let Some(bid) = b {
            inputs.push(bid);
        }
        self.push(
            Node::Op {
                op: Op::Conv1d { stride, padding },
                inputs,
            },
            out,
        )
    }

    /// Batch normalization with batch statistics (training mode). Returns
    /// the node id plus the per-channel batch mean and biased variance so
    /// the caller can maintain running statistics.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Vec<f64>, Vec<f64>) {
        let xs = self.values[x].shape();
        debug_assert_eq!(xs.len(), 3);
        let (batch, ch, t) = (xs[0], xs[1], xs[2]);
        let n = (batch * t) as f64;

        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        {
            let xv = self.values[x].data();
            for c in 0..ch {
                let mut s = 0.0;
                for bi in 0..batch {
                    let base = (bi * ch + c) * t;
                    for ti in 0..t {
                        s += xv[base + ti];
                    }
                }
                mean[c] = s / n;
                let mut sq = 0.0;
                for bi in 0..batch {
                    let base = (bi * ch + c) * t;
                    for ti in 0..t {
                        let d = xv[base + ti] - mean[c];
                        sq += d * d;
                    }
                }
                var[c] = sq / n;
            }
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(xs);
        let mut out = Tensor::zeros(xs);
        {
            let xv = self.values[x].data();
            let gv = self.values[gamma].data();
            let bv = self.values[beta].data();
            let xh = x_hat.data_mut();
            for bi in 0..batch {
                for c in 0..ch {
                    let base = (bi * ch + c) * t;
                    for ti in 0..t {
                        xh[base + ti] = (xv[base + ti] - mean[c]) * inv_std[c];
                    }
                }
            }
            let ov = out.data_mut();
            for bi in 0..batch {
                for c in 0..ch {
                    let base = (bi * ch + c) * t;
                    for ti in 0..t {
                        ov[base + ti] = gv[c] * xh[base + ti] + bv[c];
                    }
                }
            }
        }
        let id = self.push(
            Node::Op {
                op: Op::BatchNorm {
                    x_hat,
                    inv_std: inv_std.clone(),
                },
                inputs: vec![x, gamma, beta],
            },
            out,
        );
        (id, mean, var)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.values[x].clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(
            Node::Op {
                op: Op::Relu,
                inputs: vec![x],
            },
            out,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.values[a].shape(), self.values[b].shape());
        let mut out = self.values[a].clone();
        out.add_assign(&self.values[b]);
        self.push(
            Node::Op {
                op: Op::Add,
                inputs: vec![a, b],
            },
            out,
        )
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xs = self.values[x].shape();
        debug_assert_eq!(xs.len(), 3);
        let (batch, ch, t) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(&[batch, ch]);
        {
            let xv = self.values[x].data();
            let ov = out.data_mut();
            for bi in 0..batch {
                for c in 0..ch {
                    let base = (bi * ch + c) * t;
                    let mut s = 0.0;
                    for ti in 0..t {
                        s += xv[base + ti];
                    }
                    ov[bi * ch + c] = s / t as f64;
                }
            }
        }
        self.push(
            Node::Op {
                op: Op::GlobalAvgPool,
                inputs: vec![x],
            },
            out,
        )
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let out = dense_raw(&self.values[x], &self.values[w], &self.values[b]);
        self.push(
            Node::Op {
                op: Op::Dense,
                inputs: vec![x, w, b],
            },
            out,
        )
    }

    /// Mean softmax cross-entropy over the batch. Hard targets must be
    /// valid class indices; soft targets must match the logits shape.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Targets) -> Result<NodeId> {
        let ls = self.values[logits].shape();
        if ls.len() != 2 {
            return Err(Error::shape(format!("logits must be rank 2, got {:?}", ls)));
        }
        let (batch, classes) = (ls[0], ls[1]);
        match &targets {
            Targets::Hard(labels) => {
                if labels.len() != batch {
                    return Err(Error::shape(format!(
                        "{} labels for batch of {}",
                        labels.len(),
                        batch
                    )));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                    return Err(Error::domain(format!(
                        "label {} out of range for {} classes",
                        bad, classes
                    )));
                }
            }
            Targets::Soft(q) => {
                if q.shape() != ls {
                    return Err(Error::shape(format!(
                        "soft targets {:?} vs logits {:?}",
                        q.shape(),
                        ls
                    )));
                }
            }
        }

        let mut probs = Tensor::zeros(ls);
        let mut loss = 0.0;
        {
            let lv = self.values[logits].data();
            let pv = probs.data_mut();
            for bi in 0..batch {
                let row = &lv[bi * classes..(bi + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &z in row {
                    denom += (z - max).exp();
                }
                let lse = max + denom.ln();
                for (c, &z) in row.iter().enumerate() {
                    pv[bi * classes + c] = (z - lse).exp();
                }
                match &targets {
                    Targets::Hard(labels) => loss -= row[labels[bi]] - lse,
                    Targets::Soft(q) => {
                        for c in 0..classes {
                            loss -= q.data()[bi * classes + c] * (row[c] - lse);
                        }
                    }
                }
            }
        }
        loss /= batch as f64;
        Ok(self.push(
            Node::Op {
                op: Op::CrossEntropy { probs, targets },
                inputs: vec![logits],
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn add_scalars(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert!(self.values[a].is_scalar() && self.values[b].is_scalar());
        let v = self.values[a].scalar_value() + self.values[b].scalar_value();
        self.push(
            Node::Op {
                op: Op::AddScalars,
                inputs: vec![a, b],
            },
            Tensor::scalar(v),
        )
    }

    pub fn scale_scalar(&mut self, a: NodeId, factor: f64) -> NodeId {
        debug_assert!(self.values[a].is_scalar());
        let v = self.values[a].scalar_value() * factor;
        self.push(
            Node::Op {
                op: Op::ScaleScalar { factor },
                inputs: vec![a],
            },
            Tensor::scalar(v),
        )
    }
}

/// Reverse sweep from the scalar `root`, accumulating parameter gradients
/// into `params`. Gradients add onto whatever is already in the buffers.
pub fn backward(tape: &Tape, root: NodeId, params: &mut ParamSet) -> Result<()> {
    if tape.is_empty() {
        return Err(Error::state("backward on an empty tape"));
    }
    if root >= tape.nodes.len() {
        return Err(Error::state(format!(
            "backward root {} not on tape of {} nodes",
            root,
            tape.nodes.len()
        )));
    }
    if !tape.values[root].is_scalar() {
        return Err(Error::state("backward root must be a scalar loss"));
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; tape.nodes.len()];
    grads[root] = Some(Tensor::scalar(1.0));

    for id in (0..=root).rev() {
        let grad = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        match &tape.nodes[id] {
            Node::Input => {}
            Node::Param { index } => {
                params.accumulate_grad(*index, &grad)?;
            }
            Node::Op { op, inputs } => {
                backprop_op(tape, op, inputs, &grad, &mut grads);
            }
        }
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&grad),
        None => *slot = Some(grad),
    }
}

fn backprop_op(
    tape: &Tape,
    op: &Op,
    inputs: &[NodeId],
    grad: &Tensor,
    grads: &mut [Option<Tensor>],
) {
    match op {
        Op::Conv1d { stride, padding } => {
            let x = &tape.values[inputs[0]];
            let w = &tape.values[inputs[1]];
            let (batch, c_in, t_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let t_out = grad.shape()[2];

            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(w.shape());
            {
                let gv = grad.data();
                let xv = x.data();
                let wv = w.data();
                let gxv = gx.data_mut();
                let gwv = gw.data_mut();
                for bi in 0..batch {
                    for co in 0..c_out {
                        for t in 0..t_out {
                            let g = gv[(bi * c_out + co) * t_out + t];
                            if g == 0.0 {
                                continue;
                            }
                            for ci in 0..c_in {
                                let x_base = (bi * c_in + ci) * t_in;
                                let w_base = (co * c_in + ci) * k;
                                for kk in 0..k {
                                    let pos = t * stride + kk;
                                    if pos >= *padding && pos - padding < t_in {
                                        gwv[w_base + kk] += g * xv[x_base + pos - padding];
                                        gxv[x_base + pos - padding] += g * wv[w_base + kk];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            accumulate(&mut grads[inputs[0]], gx);
            accumulate(&mut grads[inputs[1]], gw);
            if inputs.len() == 3 {
                let mut gb = Tensor::zeros(&[c_out]);
                {
                    let gv = grad.data();
                    let gbv = gb.data_mut();
                    for bi in 0..batch {
                        for co in 0..c_out {
                            for t in 0..t_out {
                                gbv[co] += gv[(bi * c_out + co) * t_out + t];
                            }
                        }
                    }
                }
                accumulate(&mut grads[inputs[2]], gb);
            }
        }
        Op::BatchNorm { x_hat, inv_std } => {
            let gamma = &tape.values[inputs[1]];
            let shape = x_hat.shape();
            let (batch, ch, t) = (shape[0], shape[1], shape[2]);
            let n = (batch * t) as f64;

            let mut g_gamma = Tensor::zeros(&[ch]);
            let mut g_beta = Tensor::zeros(&[ch]);
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            {
                let gv = grad.data();
                let xh = x_hat.data();
                let ggv = g_gamma.data_mut();
                let gbv = g_beta.data_mut();
                for bi in 0..batch {
                    for c in 0..ch {
                        let base = (bi * ch + c) * t;
                        for ti in 0..t {
                            let g = gv[base + ti];
                            ggv[c] += g * xh[base + ti];
                            gbv[c] += g;
                            sum_g[c] += g;
                            sum_gx[c] += g * xh[base + ti];
                        }
                    }
                }
            }
            let mut gx = Tensor::zeros(shape);
            {
                let gv = grad.data();
                let xh = x_hat.data();
                let gxv = gx.data_mut();
                for bi in 0..batch {
                    for c in 0..ch {
                        let scale = gamma.data()[c] * inv_std[c];
                        let base = (bi * ch + c) * t;
                        for ti in 0..t {
                            gxv[base + ti] = scale
                                * (gv[base + ti]
                                    - sum_g[c] / n
                                    - xh[base + ti] * sum_gx[c] / n);
                        }
                    }
                }
            }
            accumulate(&mut grads[inputs[0]], gx);
            accumulate(&mut grads[inputs[1]], g_gamma);
            accumulate(&mut grads[inputs[2]], g_beta);
        }
        Op::Relu => {
            let x = &tape.values[inputs[0]];
            let mut gx = grad.clone();
            for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
            accumulate(&mut grads[inputs[0]], gx);
        }
        Op::Add => {
            accumulate(&mut grads[inputs[0]], grad.clone());
            accumulate(&mut grads[inputs[1]], grad.clone());
        }
        Op::GlobalAvgPool => {
            let x = &tape.values[inputs[0]];
            let (batch, ch, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut gx = Tensor::zeros(x.shape());
            {
                let gv = grad.data();
                let gxv = gx.data_mut();
                for bi in 0..batch {
                    for c in 0..ch {
                        let g = gv[bi * ch + c] / t as f64;
                        let base = (bi * ch + c) * t;
                        for ti in 0..t {
                            gxv[base + ti] = g;
                        }
                    }
                }
            }
            accumulate(&mut grads[inputs[0]], gx);
        }
        Op::Dense => {
            let x = &tape.values[inputs[0]];
            let w = &tape.values[inputs[1]];
            let (batch, c_in) = (x.shape()[0], x.shape()[1]);
            let c_out = w.shape()[0];
            let mut gx = Tensor::zeros(x.shape());
            let mut gw = Tensor::zeros(w.shape());
            let mut gb = Tensor::zeros(&[c_out]);
            {
                let gv = grad.data();
                let xv = x.data();
                let wv = w.data();
                let gxv = gx.data_mut();
                let gwv = gw.data_mut();
                let gbv = gb.data_mut();
                for bi in 0..batch {
                    for o in 0..c_out {
                        let g = gv[bi * c_out + o];
                        gbv[o] += g;
                        for c in 0..c_in {
                            gwv[o * c_in + c] += g * xv[bi * c_in + c];
                            gxv[bi * c_in + c] += g * wv[o * c_in + c];
                        }
                    }
                }
            }
            accumulate(&mut grads[inputs[0]], gx);
            accumulate(&mut grads[inputs[1]], gw);
            accumulate(&mut grads[inputs[2]], gb);
        }
        Op::CrossEntropy { probs, targets } => {
            let (batch, classes) = (probs.shape()[0], probs.shape()[1]);
            let g = grad.scalar_value();
            let mut gl = Tensor::zeros(probs.shape());
            {
                let pv = probs.data();
                let glv = gl.data_mut();
                match targets {
                    Targets::Hard(labels) => {
                        for bi in 0..batch {
                            for c in 0..classes {
                                let delta = if labels[bi] == c { 1.0 } else { 0.0 };
                                glv[bi * classes + c] =
                                    g * (pv[bi * classes + c] - delta) / batch as f64;
                            }
                        }
                    }
                    Targets::Soft(q) => {
                        // d/dz of -sum q*log softmax(z) is p*sum(q) - q.
                        for bi in 0..batch {
                            let qsum: f64 =
                                q.data()[bi * classes..(bi + 1) * classes].iter().sum();
                            for c in 0..classes {
                                glv[bi * classes + c] = g
                                    * (pv[bi * classes + c] * qsum - q.data()[bi * classes + c])
                                    / batch as f64;
                            }
                        }
                    }
                }
            }
            accumulate(&mut grads[inputs[0]], gl);
        }
        Op::AddScalars => {
            accumulate(&mut grads[inputs[0]], grad.clone());
            accumulate(&mut grads[inputs[1]], grad.clone());
        }
        Op::ScaleScalar { factor } => {
            let mut g = grad.clone();
            g.scale(*factor);
            accumulate(&mut grads[inputs[0]], g);
        }
    }
}

/// Forward kernel shared by the tape op and the eval-mode path.
pub(crate) fn conv1d_raw(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    debug_assert_eq!(xs.len(), 3);
    debug_assert_eq!(ws.len(), 3);
    debug_assert_eq!(xs[1], ws[1], "in-channel mismatch");
    let (batch, c_in, t_in) = (xs[0], xs[1], xs[2]);
    let (c_out, k) = (ws[0], ws[2]);
    debug_assert!(t_in + 2 * padding >= k);
    let t_out = (t_in + 2 * padding - k) / stride + 1;

    let mut out = Tensor::zeros(&[batch, c_out, t_out]);
    {
        let xv = x.data();
        let wv = w.data();
        let o = out.data_mut();
        for bi in 0..batch {
            for co in 0..c_out {
                let bias = b.map_or(0.0, |t| t.data()[co]);
                for t in 0..t_out {
                    let mut acc = bias;
                    for ci in 0..c_in {
                        let x_base = (bi * c_in + ci) * t_in;
                        let w_base = (co * c_in + ci) * k;
                        for kk in 0..k {
                            let pos = t * stride + kk;
                            if pos >= padding && pos - padding < t_in {
                                acc += wv[w_base + kk] * xv[x_base + pos - padding];
                            }
                        }
                    }
                    o[(bi * c_out + co) * t_out + t] = acc;
                }
            }
        }
    }
    out
}

/// Forward kernel shared by the tape op and the eval-mode path.
pub(crate) fn dense_raw(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    debug_assert_eq!(xs.len(), 2);
    debug_assert_eq!(ws.len(), 2);
    debug_assert_eq!(xs[1], ws[1]);
    let (batch, c_in, c_out) = (xs[0], xs[1], ws[0]);
    let mut out = Tensor::zeros(&[batch, c_out]);
    {
        let xv = x.data();
        let wv = w.data();
        let bv = b.data();
        let ov = out.data_mut();
        for bi in 0..batch {
            for o in 0..c_out {
                let mut acc = bv[o];
                for c in 0..c_in {
                    acc += wv[o * c_in + c] * xv[bi * c_in + c];
                }
                ov[bi * c_out + o] = acc;
            }
        }
    }
    out
}
