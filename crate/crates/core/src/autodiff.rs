//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order, which is already a topological
//! order; `backward` walks the tape once in reverse. Constants never receive
//! gradients, and neither does anything downstream of `stop_gradient` or the
//! quantized side of `straight_through`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Param,
    Constant,
    /// `x: [S, Cin, T]`, `w: [Cout, Cin, K]`, zero "same" padding.
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    /// `x: [B, In]`, `w: [Out, In]`, `b: [Out]`.
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mse(Var, Var),
    StopGradient,
    StraightThrough(Var),
    /// `out[i] = x[index[i]]`
    Gather { x: Var, index: Vec<usize> },
    /// Squared inter-joint distance mismatch on `[V, C, T]` streams.
    PairwiseDistance {
        pred: Var,
        target: Tensor,
        scale: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Conv1d { .. } => "conv1d",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mse(..) => "mse",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough(_) => "straight_through",
            Op::Gather { .. } => "gather",
            Op::PairwiseDistance { .. } => "pairwise_distance",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the parameter leaves of a graph.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Dilated 1-D cross-correlation with zero "same" padding.
    ///
    /// `x` is `[Cin, T]` or a stack of streams `[S, Cin, T]`; `w` is
    /// `[Cout, Cin, K]` with odd `K`; output keeps the rank of `x`.
    pub fn conv1d_dilated(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let (streams, cin, t) = stream_dims("conv1d_dilated", &xs)?;
        if ws.len() != 3 || ws[1] != cin {
            return Err(Error::shape(
                "conv1d_dilated",
                format!("weight {:?} does not fit input {:?}", ws, xs),
            ));
        }
        if ws[2] % 2 == 0 {
            return Err(Error::shape("conv1d_dilated", format!("kernel {} is not odd", ws[2])));
        }
        if dilation == 0 {
            return Err(Error::shape("conv1d_dilated", "dilation must be >= 1"));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    "conv1d_dilated",
                    format!("bias {:?} for {} output channels", self.value(b).shape(), cout),
                ));
            }
        }
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            streams,
            cin,
            cout,
            t,
            ws[2],
            dilation,
        );
        let mut shape = xs.clone();
        shape[xs.len() - 2] = cout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(shape, out)?,
            Op::Conv1d { x, w, b, dilation },
            rg,
        )
    }

    /// Per-timestep affine map across channels (a 1x1 convolution).
    ///
    /// `w` is `[Cout, Cin]`; it is recorded as a kernel of width one.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("pointwise_conv", format!("weight {:?} is not [Cout, Cin]", ws)));
        }
        let xs = self.value(x).shape().to_vec();
        let (_, cin, _) = stream_dims("pointwise_conv", &xs)?;
        if ws[1] != cin {
            return Err(Error::shape(
                "pointwise_conv",
                format!("weight {:?} does not fit input {:?}", ws, xs),
            ));
        }
        // Views the same storage as [Cout, Cin, 1]; kept as a separate node so
        // the gradient flows back to `w` through the reshape.
        let w3 = self.gather_reshape(w, &[ws[0], ws[1], 1])?;
        self.conv1d_dilated(x, w3, Some(b), 1)
    }

    fn gather_reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        self.gather(x, (0..n).collect(), shape)
    }

    /// Fully connected layer on row vectors: `x: [B, In]` -> `[B, Out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "affine",
                format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            ));
        }
        let (rows, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let xr = &xd[r * fan_in..(r + 1) * fan_in];
            for o in 0..fan_out {
                let wr = &wd[o * fan_in..(o + 1) * fan_in];
                out[r * fan_out + o] = bd[o] + dot(xr, wr);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![rows, fan_out], out)?, Op::Affine { x, w, b }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = av.len().max(1) as f64;
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Forward value of `quantized`; the gradient goes to `pre` unchanged.
    pub fn straight_through(&mut self, pre: Var, quantized: Var) -> Result<Var> {
        same_shape("straight_through", self.value(pre), self.value(quantized))?;
        let value = self.value(quantized).clone();
        let rg = self.rg(pre);
        self.push(value, Op::StraightThrough(pre), rg)
    }

    /// `out.flat[i] = x.flat[index[i]]`; indices may repeat.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(x).data();
        if n != index.len() {
            return Err(Error::shape("gather", format!("{} indices for shape {:?}", index.len(), shape)));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {} out of {}", bad, src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(shape.to_vec(), data)?, Op::Gather { x, index }, rg)
    }

    /// `scale * sum_{t,v,w} (|S_tv - S_tw|^2 - |P_tv - P_tw|^2)^2` over
    /// `[V, C, T]` streams, with `target = S` held constant.
    pub fn pairwise_distance_loss(&mut self, pred: Var, target: Tensor, scale: f64) -> Result<Var> {
        same_shape("pairwise_distance_loss", self.value(pred), &target)?;
        if self.value(pred).rank() != 3 {
            return Err(Error::shape(
                "pairwise_distance_loss",
                format!("expected [V, C, T], got {:?}", target.shape()),
            ));
        }
        let s = pairwise_forward(self.value(pred), &target);
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(scale * s),
            Op::PairwiseDistance { pred, target, scale },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Param => {
                    out.grads.insert(Var(i), g);
                }
                Op::Constant | Op::StopGradient => {}
                Op::Conv1d { x, w, b, dilation } => {
                    let (xs, ws) = (self.value(*x).shape(), self.value(*w).shape());
                    let (streams, cin, t) = stream_dims("conv1d_dilated", xs)?;
                    let (cout, k) = (ws[0], ws[2]);
                    let (gx, gw, gb) = conv_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        streams,
                        cin,
                        cout,
                        t,
                        k,
                        *dilation,
                    );
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, Tensor::new(xs.to_vec(), gx)?);
                    }
                    if self.rg(*w) {
                        accumulate(&mut grads, *w, Tensor::new(ws.to_vec(), gw)?);
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            accumulate(&mut grads, *b, Tensor::new(vec![cout], gb)?);
                        }
                    }
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, fan_in, fan_out) = (xv.dim(0), xv.dim(1), wv.dim(0));
                    let gd = g.data();
                    if self.rg(*x) {
                        let mut gx = vec![0.0; rows * fan_in];
                        for r in 0..rows {
                            let gxr = &mut gx[r * fan_in..(r + 1) * fan_in];
                            for o in 0..fan_out {
                                axpy(gd[r * fan_out + o], wv.row(o), gxr);
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(vec![rows, fan_in], gx)?);
                    }
                    if self.rg(*w) {
                        let mut gw = vec![0.0; fan_out * fan_in];
                        for o in 0..fan_out {
                            let gwr = &mut gw[o * fan_in..(o + 1) * fan_in];
                            for r in 0..rows {
                                axpy(gd[r * fan_out + o], xv.row(r), gwr);
                            }
                        }
                        accumulate(&mut grads, *w, Tensor::new(vec![fan_out, fan_in], gw)?);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; fan_out];
                        for r in 0..rows {
                            for o in 0..fan_out {
                                gb[o] += gd[r * fan_out + o];
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::new(vec![fan_out], gb)?);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.rg(*a) {
                        let data = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), data)?);
                    }
                    if self.rg(*b) {
                        let data = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, Tensor::new(g.shape().to_vec(), data)?);
                    }
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g.map(|v| v * c)),
                Op::Sum(x) => {
                    let gi = g.item();
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), gi));
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let c = 2.0 * g.item() / av.len().max(1) as f64;
                    let diff: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| c * (x - y)).collect();
                    if self.rg(*b) {
                        let neg = diff.iter().map(|v| -v).collect();
                        accumulate(&mut grads, *b, Tensor::new(av.shape().to_vec(), neg)?);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), diff)?);
                    }
                }
                Op::StraightThrough(pre) => accumulate(&mut grads, *pre, g),
                Op::Gather { x, index } => {
                    let xv = self.value(*x);
                    let mut gx = vec![0.0; xv.len()];
                    for (&src, &gi) in index.iter().zip(g.data()) {
                        gx[src] += gi;
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
                }
                Op::PairwiseDistance { pred, target, scale } => {
                    let gp = pairwise_backward(self.value(*pred), target, scale * g.item());
                    accumulate(&mut grads, *pred, gp);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn stream_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [s, c, t] => Ok((s, c, t)),
        _ => Err(Error::shape(op, format!("expected [C, T] or [S, C, T], got {:?}", shape))),
    }
}

#[inline]
/// Four interleaved partial sums, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (ca, cb) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0; 4];
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Overlap of output times `[lo, hi)` for tap offset `off` on length `t`.
#[inline]
fn tap_range(off: isize, t: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (t as isize - off.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Output channels updated together so each shifted input row is read once.
const OUT_BLOCK: usize = 4;

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    streams: usize,
    cin: usize,
    cout: usize,
    t: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let half = (k / 2) as isize;
    let mut out = vec![0.0; streams * cout * t];
    for s in 0..streams {
        let block = &mut out[s * cout * t..(s + 1) * cout * t];
        if let Some(b) = b {
            for (o, row) in block.chunks_exact_mut(t).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        for o0 in (0..cout).step_by(OUT_BLOCK) {
            let ob = OUT_BLOCK.min(cout - o0);
            let rows = &mut block[o0 * t..(o0 + ob) * t];
            for i in 0..cin {
                let xr = &x[(s * cin + i) * t..(s * cin + i + 1) * t];
                for tap in 0..k {
                    let off = (tap as isize - half) * dilation as isize;
                    let (lo, hi) = tap_range(off, t);
                    if lo >= hi {
                        continue;
                    }
                    let src = &xr[(lo as isize + off) as usize..(hi as isize + off) as usize];
                    if ob == OUT_BLOCK {
                        let wv = [0, 1, 2, 3].map(|q| w[((o0 + q) * cin + i) * k + tap]);
                        let (r0, rest) = rows.split_at_mut(t);
                        let (r1, rest) = rest.split_at_mut(t);
                        let (r2, r3) = rest.split_at_mut(t);
                        let (r0, r1, r2, r3) = (&mut r0[lo..hi], &mut r1[lo..hi], &mut r2[lo..hi], &mut r3[lo..hi]);
                        for (n, &xv) in src.iter().enumerate() {
                            r0[n] += wv[0] * xv;
                            r1[n] += wv[1] * xv;
                            r2[n] += wv[2] * xv;
                            r3[n] += wv[3] * xv;
                        }
                    } else {
                        for q in 0..ob {
                            let wv = w[((o0 + q) * cin + i) * k + tap];
                            axpy(wv, src, &mut rows[q * t + lo..q * t + hi]);
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    streams: usize,
    cin: usize,
    cout: usize,
    t: usize,
    k: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let half = (k / 2) as isize;
    let mut gx = vec![0.0; streams * cin * t];
    let mut gw = vec![0.0; cout * cin * k];
    let mut gb = vec![0.0; cout];
    for s in 0..streams {
        for o in 0..cout {
            gb[o] += g[(s * cout + o) * t..(s * cout + o + 1) * t].iter().sum::<f64>();
        }
        for i in 0..cin {
            let xr = &x[(s * cin + i) * t..(s * cin + i + 1) * t];
            let gxr = &mut gx[(s * cin + i) * t..(s * cin + i + 1) * t];
            for tap in 0..k {
                let off = (tap as isize - half) * dilation as isize;
                let (lo, hi) = tap_range(off, t);
                if lo >= hi {
                    continue;
                }
                let (slo, shi) = ((lo as isize + off) as usize, (hi as isize + off) as usize);
                let xs = &xr[slo..shi];
                let gxs = &mut gxr[slo..shi];
                for o0 in (0..cout).step_by(OUT_BLOCK) {
                    let ob = OUT_BLOCK.min(cout - o0);
                    let grow = |q: usize| &g[(s * cout + o0 + q) * t + lo..(s * cout + o0 + q) * t + hi];
                    if ob == OUT_BLOCK {
                        let (g0, g1, g2, g3) = (grow(0), grow(1), grow(2), grow(3));
                        let widx = [0, 1, 2, 3].map(|q| ((o0 + q) * cin + i) * k + tap);
                        let wv = widx.map(|j| w[j]);
                        let mut acc = [0.0; 4];
                        for n in 0..xs.len() {
                            let xv = xs[n];
                            acc[0] += g0[n] * xv;
                            acc[1] += g1[n] * xv;
                            acc[2] += g2[n] * xv;
                            acc[3] += g3[n] * xv;
                            gxs[n] += (wv[0] * g0[n] + wv[1] * g1[n]) + (wv[2] * g2[n] + wv[3] * g3[n]);
                        }
                        for q in 0..4 {
                            gw[widx[q]] += acc[q];
                        }
                    } else {
                        for q in 0..ob {
                            let widx = ((o0 + q) * cin + i) * k + tap;
                            gw[widx] += dot(grow(q), xs);
                            axpy(w[widx], grow(q), gxs);
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn pairwise_forward(pred: &Tensor, target: &Tensor) -> f64 {
    let (v, c, t) = (pred.dim(0), pred.dim(1), pred.dim(2));
    let (p, s) = (pred.data(), target.data());
    let at = |d: &[f64], j: usize, ch: usize, f: usize| d[(j * c + ch) * t + f];
    let mut total = 0.0;
    for f in 0..t {
        for a in 0..v {
            for b in 0..v {
                let mut dt = 0.0;
                let mut dp = 0.0;
                for ch in 0..c {
                    let es = at(s, a, ch, f) - at(s, b, ch, f);
                    let ep = at(p, a, ch, f) - at(p, b, ch, f);
                    dt += es * es;
                    dp += ep * ep;
                }
                let e = dt - dp;
                total += e * e;
            }
        }
    }
    total
}

fn pairwise_backward(pred: &Tensor, target: &Tensor, scale: f64) -> Tensor {
    let (v, c, t) = (pred.dim(0), pred.dim(1), pred.dim(2));
    let (p, s) = (pred.data(), target.data());
    let idx = |j: usize, ch: usize, f: usize| (j * c + ch) * t + f;
    let mut g = vec![0.0; p.len()];
    for f in 0..t {
        for a in 0..v {
            for b in 0..v {
                if a == b {
                    continue;
                }
                let mut dt = 0.0;
                let mut dp = 0.0;
                for ch in 0..c {
                    let es = s[idx(a, ch, f)] - s[idx(b, ch, f)];
                    let ep = p[idx(a, ch, f)] - p[idx(b, ch, f)];
                    dt += es * es;
                    dp += ep * ep;
                }
                // Both ordered pairs (a, b) and (b, a) contribute to joint a.
                let e = dt - dp;
                for ch in 0..c {
                    let ep = p[idx(a, ch, f)] - p[idx(b, ch, f)];
                    g[idx(a, ch, f)] += -8.0 * scale * e * ep;
                }
            }
        }
    }
    Tensor::new(pred.shape().to_vec(), g).expect("shape preserved")
}
