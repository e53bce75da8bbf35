//! Reverse-mode differentiation over a linear recording of operations.
//!
//! Every op appends one node holding its output value, the nodes it read,
//! and (only when some input requires a gradient) a backward rule mapping the
//! output gradient to input gradients. `backward` walks the nodes from the
//! loss down to index 0, so each recorded op is visited once, in reverse
//! recording order.

use super::kernels::{self, Window};
use super::{Scalar, Tensor};
use crate::error::{config_err, shape_err, Error, Result};
use crate::parallel;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values visible to a backward rule.
pub struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
}

/// Maps the output gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Running statistics handed to [`Tape::batchnorm`].
pub enum NormStats<'a, T> {
    Train { running_mean: &'a mut [T], running_var: &'a mut [T], momentum: f64 },
    Eval { running_mean: &'a [T], running_var: &'a [T] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams { stride: 1, padding: 0, groups: 1 }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < new_shape[d] {
                break;
            }
            off -= src_strides[d] * new_shape[d];
            idx[d] = 0;
        }
    }
    (new_shape, out)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by matmul and conv ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>, name: &str) -> Result<Var> {
        self.push_boxed(name, value, inputs.to_vec(), backward)
    }

    fn push<F>(&mut self, name: &str, value: Tensor<T>, inputs: Vec<Var>, backward: F) -> Result<Var>
    where
        F: Fn(&BackwardArgs<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        self.push_boxed(name, value, inputs, Box::new(backward))
    }

    fn push_boxed(&mut self, name: &str, value: Tensor<T>, inputs: Vec<Var>, backward: BackwardFn<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d(loss)/d(node) to every node the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else { continue };
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let args = BackwardArgs {
                grad: g,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
            };
            let input_grads = rule(&args);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.shape(*inp));
                match &mut lower[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Grads { grads })
    }

    // ----- elementwise -----

    /// `a + b`, where `b`'s shape equals `a`'s or is a suffix of it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err!("add: {:?} does not broadcast onto {:?}", sb, sa));
        }
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = *x + bv[i % nb];
        }
        self.push("add", out, vec![a, b], move |args| {
            let g = args.grad;
            let nb = args.inputs[1].len();
            let mut gb = vec![T::zero(); nb];
            for (i, &v) in g.data().iter().enumerate() {
                gb[i % nb] = gb[i % nb] + v;
            }
            vec![Some(g.clone()), Some(Tensor::new(args.inputs[1].shape(), gb).unwrap())]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mul: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", out, vec![a, b], |args| {
            let g = args.grad;
            vec![
                Some(g.zip_map(args.inputs[1], |g, y| g * y)),
                Some(g.zip_map(args.inputs[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.affine(a, c, T::zero())
    }

    /// `mul · a + add` with constant scalars.
    pub fn affine(&mut self, a: Var, mul: T, add: T) -> Result<Var> {
        let out = self.value(a).map(|x| mul * x + add);
        self.push("affine", out, vec![a], move |args| vec![Some(args.grad.map(|g| g * mul))])
    }

    /// Multiplies sample `i` of `x` (leading axis) by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let b = self.shape(x)[0];
        if self.value(s).len() != b {
            return Err(shape_err!("scale_rows: {} scalars for batch {}", self.value(s).len(), b));
        }
        let per = self.value(x).len() / b.max(1);
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * sv[i / per];
        }
        self.push("scale_rows", out, vec![x, s], move |args| {
            let (g, xv, sv) = (args.grad.data(), args.inputs[0].data(), args.inputs[1].data());
            let gx: Vec<T> = g.iter().enumerate().map(|(i, &gv)| gv * sv[i / per]).collect();
            let gs: Vec<T> = (0..sv.len())
                .map(|r| (r * per..(r + 1) * per).map(|i| g[i] * xv[i]).sum())
                .collect();
            vec![
                Some(Tensor::new(args.inputs[0].shape(), gx).unwrap()),
                Some(Tensor::new(args.inputs[1].shape(), gs).unwrap()),
            ]
        })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::gelu);
        self.push("gelu", out, vec![a], |args| {
            vec![Some(args.grad.zip_map(args.inputs[0], |g, x| g * kernels::gelu_grad(x)))]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::sigmoid);
        self.push("sigmoid", out, vec![a], |args| {
            vec![Some(args.grad.zip_map(args.output, |g, y| g * y * (T::one() - y)))]
        })
    }

    // ----- reductions and normalization -----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.value(a).rank();
        if axis >= rank {
            return Err(shape_err!("softmax: axis {axis} out of range for rank {rank}"));
        }
        if axis != rank - 1 {
            let t = self.transpose(a, axis, rank - 1)?;
            let s = self.softmax(t, rank - 1)?;
            return self.transpose(s, axis, rank - 1);
        }
        let n = self.shape(a)[axis];
        let out = Tensor::new(self.shape(a), kernels::softmax_rows(self.value(a).data(), n))?;
        self.push("softmax", out, vec![a], move |args| {
            let (g, y) = (args.grad.data(), args.output.data());
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::new(args.output.shape(), gx).unwrap())]
        })
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("mean: axis {axis} out of range for {:?}", shape));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 {
            return Err(shape_err!("mean over empty axis"));
        }
        let x = self.value(a).data();
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut oshape = shape.clone();
        oshape.remove(axis);
        self.push("mean", Tensor::new(&oshape, out)?, vec![a], move |args| {
            let g = args.grad.data();
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    for k in 0..inner {
                        gx[(o * n + j) * inner + k] = g[o * inner + k] * inv;
                    }
                }
            }
            vec![Some(Tensor::new(&shape, gx).unwrap())]
        })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), vec![a], |args| {
            vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]
        })
    }

    /// Normalizes over the last axis, then applies the per-feature affine.
    /// Statistics and backward reductions accumulate in `f64`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err!("layernorm on rank-0 tensor"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!("layernorm: affine shapes {:?}/{:?} for features {d}", self.shape(gamma), self.shape(beta)));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0f64; xv.len()];
        let mut rstd = vec![0.0f64; rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j].as_f64() - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = T::of(h * gv[j].as_f64() + bv[j].as_f64());
            }
        }
        self.push("layernorm", Tensor::new(&shape, out)?, vec![x, gamma, beta], move |args| {
            let g = args.grad.data();
            let gam = args.inputs[1].data();
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![0.0f64; d];
            let mut gb = vec![0.0f64; d];
            for r in 0..rows {
                let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                let (mut m1, mut m2) = (0.0, 0.0);
                for j in 0..d {
                    let gj = gr[j].as_f64();
                    gg[j] += gj * hr[j];
                    gb[j] += gj;
                    let dh = gj * gam[j].as_f64();
                    m1 += dh;
                    m2 += dh * hr[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    gx[r * d + j] = T::of(rstd[r] * (gr[j].as_f64() * gam[j].as_f64() - m1 - hr[j] * m2));
                }
            }
            vec![
                Some(Tensor::new(args.inputs[0].shape(), gx).unwrap()),
                Some(Tensor::new(&[d], gg.into_iter().map(T::of).collect()).unwrap()),
                Some(Tensor::new(&[d], gb.into_iter().map(T::of).collect()).unwrap()),
            ]
        })
    }

    /// Per-channel normalization over every axis except axis 1. Statistics and
    /// backward reductions accumulate in `f64`.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_, T>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("batchnorm needs [B, C, ..], got {:?}", shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("batchnorm: affine shapes {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)));
        }
        let count = b * inner;
        let xv = self.value(x).data();
        let idx = move |bi: usize, ch: usize, k: usize| (bi * c + ch) * inner + k;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        let training = matches!(stats, NormStats::Train { .. });
        match stats {
            NormStats::Train { running_mean, running_var, momentum } => {
                if count < 2 {
                    return Err(config_err!("batchnorm in training mode needs more than one value per channel"));
                }
                for ch in 0..c {
                    let values = || (0..b).flat_map(move |bi| (0..inner).map(move |k| xv[idx(bi, ch, k)].as_f64()));
                    let mu = values().sum::<f64>() / count as f64;
                    let ss = values().map(|v| (v - mu).powi(2)).sum::<f64>();
                    mean[ch] = mu;
                    var[ch] = ss / count as f64;
                    let unbiased = ss / (count - 1) as f64;
                    running_mean[ch] = T::of((1.0 - momentum) * running_mean[ch].as_f64() + momentum * mu);
                    running_var[ch] = T::of((1.0 - momentum) * running_var[ch].as_f64() + momentum * unbiased);
                }
            }
            NormStats::Eval { running_mean, running_var } => {
                mean = running_mean.iter().map(|v| v.as_f64()).collect();
                var = running_var.iter().map(|v| v.as_f64()).collect();
            }
        }
        let rstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0f64; xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                for k in 0..inner {
                    let i = idx(bi, ch, k);
                    let h = (xv[i].as_f64() - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = T::of(h * gv[ch].as_f64() + bv[ch].as_f64());
                }
            }
        }
        self.push("batchnorm", Tensor::new(&shape, out)?, vec![x, gamma, beta], move |args| {
            let g = args.grad.data();
            let gam = args.inputs[1].data();
            let mut gg = vec![0.0f64; c];
            let mut gb = vec![0.0f64; c];
            for bi in 0..b {
                for ch in 0..c {
                    for k in 0..inner {
                        let i = idx(bi, ch, k);
                        gg[ch] += g[i].as_f64() * xhat[i];
                        gb[ch] += g[i].as_f64();
                    }
                }
            }
            let mut gx = vec![T::zero(); g.len()];
            let inv = 1.0 / count as f64;
            for bi in 0..b {
                for ch in 0..c {
                    let scale = gam[ch].as_f64() * rstd[ch];
                    for k in 0..inner {
                        let i = idx(bi, ch, k);
                        let gi = g[i].as_f64();
                        gx[i] = T::of(if training {
                            scale * (gi - gb[ch] * inv - xhat[i] * gg[ch] * inv)
                        } else {
                            scale * gi
                        });
                    }
                }
            }
            vec![
                Some(Tensor::new(args.inputs[0].shape(), gx).unwrap()),
                Some(Tensor::new(&[c], gg.into_iter().map(T::of).collect()).unwrap()),
                Some(Tensor::new(&[c], gb.into_iter().map(T::of).collect()).unwrap()),
            ]
        })
    }

    /// Mean cross-entropy of `logits [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err!("cross_entropy: logits {:?} for {} labels", shape, labels.len()));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(config_err!("label {bad} out of range for {c} classes"));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * c + l].max(T::min_positive_value()).ln())
            .sum::<T>()
            / T::of(b as f64);
        let labels = labels.to_vec();
        self.push("cross_entropy", Tensor::scalar(loss), vec![logits], move |args| {
            let s = args.grad.item() / T::of(b as f64);
            let mut gx = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                gx[i * c + l] = gx[i * c + l] - T::one();
            }
            gx.iter_mut().for_each(|v| *v = *v * s);
            vec![Some(Tensor::new(&[b, c], gx).unwrap())]
        })
    }

    // ----- layout -----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, vec![a], |args| {
            vec![Some(args.grad.clone().reshaped(args.inputs[0].shape()).unwrap())]
        })
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("permute: {:?} is not a permutation of rank {rank}", perm));
        }
        let (shape, data) = permute_data(self.value(a).data(), self.shape(a), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.push("permute", Tensor::new(&shape, data)?, vec![a], move |args| {
            let (s, d) = permute_data(args.grad.data(), args.grad.shape(), &inverse);
            vec![Some(Tensor::new(&s, d).unwrap())]
        })
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let rank = self.value(a).rank();
        if d0 >= rank || d1 >= rank {
            return Err(shape_err!("transpose: axes ({d0}, {d1}) out of range for rank {rank}"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat: axis {axis} out of range for {:?}", first));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(shape_err!("concat: {:?} incompatible with {:?} on axis {axis}", s, first));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &n) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&self.value(p).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        self.push("concat", Tensor::new(&shape, out)?, parts.to_vec(), move |args| {
            let g = args.grad.data();
            let mut res: Vec<Vec<T>> = sizes.iter().map(|&n| Vec::with_capacity(outer * n * inner)).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (r, &n) in res.iter_mut().zip(&sizes) {
                    r.extend_from_slice(&g[off..off + n * inner]);
                    off += n * inner;
                }
            }
            res.into_iter()
                .zip(&args.inputs)
                .map(|(d, inp)| Some(Tensor::new(inp.shape(), d).unwrap()))
                .collect()
        })
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!("narrow: [{start}, {}) on axis {axis} of {:?}", start + len, shape));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        self.push("narrow", Tensor::new(&oshape, out)?, vec![a], move |args| {
            let g = args.grad.data();
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(&shape, gx).unwrap())]
        })
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(shape_err!("split: axis {axis} out of range for {:?}", shape));
        }
        if sizes.contains(&0) || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(shape_err!("split: sizes {:?} do not partition extent {}", sizes, shape[axis]));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    // ----- linear algebra -----

    /// `[.., m, k] · [.., k, n]`; a rank-2 `b` is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank ≥ 2, got {:?} · {:?}", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let b_batched = sb.len() > 2;
        if k != k2 || (b_batched && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(shape_err!("matmul: {:?} · {:?}", sa, sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let out = kernels::batched_matmul(self.value(a).data(), self.value(b).data(), batch, m, k, n, b_batched);
        self.macs += (batch * m * k * n) as u64;
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(&shape, out)?, vec![a, b], move |args| {
            let (da, db) = kernels::batched_matmul_backward(
                args.inputs[0].data(),
                args.inputs[1].data(),
                args.grad.data(),
                batch,
                m,
                k,
                n,
                b_batched,
            );
            vec![
                Some(Tensor::new(args.inputs[0].shape(), da).unwrap()),
                Some(Tensor::new(args.inputs[1].shape(), db).unwrap()),
            ]
        })
    }

    /// Grouped 2-D cross-correlation: `x [B, Cin, H, W]`, `w [Cout, Cin/g, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err!("conv2d: input {:?}, weight {:?}", sx, sw));
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cg, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let g = p.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cg {
            return Err(shape_err!("conv2d: {cin} input / {cout} output channels, groups {g}, weight {:?}", sw));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(shape_err!("conv2d: bias {:?} for {cout} channels", self.shape(bv)));
            }
        }
        let win = Window { kh, kw, stride: p.stride, pad: p.padding };
        let (oh, ow) = win
            .out_extent(h, wd)
            .ok_or_else(|| shape_err!("conv2d: kernel {kh}x{kw} larger than padded input {:?}", sx))?;
        let plan = ConvPlan { cin, h, w: wd, cout, cg, coutg: cout / g, groups: g, win, oh, ow };
        let mut out = vec![T::zero(); b * cout * oh * ow];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        parallel::for_each_chunk(&mut out, cout * oh * ow, |bi, o| {
            plan.forward(&xv[bi * cin * h * wd..(bi + 1) * cin * h * wd], wv, o);
        });
        if let Some(bv) = bias {
            let bv = self.value(bv).data();
            for (i, v) in out.iter_mut().enumerate() {
                *v = *v + bv[(i / (oh * ow)) % cout];
            }
        }
        self.macs += (b * cout * oh * ow * cg * kh * kw) as u64;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("conv2d", Tensor::new(&[b, cout, oh, ow], out)?, inputs, move |args| {
            let (xv, wv, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let per_in = plan.cin * plan.h * plan.w;
            let per_out = plan.cout * plan.oh * plan.ow;
            let parts = parallel::map_indices(b, |bi| {
                plan.backward(&xv[bi * per_in..(bi + 1) * per_in], wv, &g[bi * per_out..(bi + 1) * per_out])
            });
            let mut dx = Vec::with_capacity(b * per_in);
            let mut dw = vec![T::zero(); wv.len()];
            for (pdx, pdw) in parts {
                dx.extend(pdx);
                for (a, v) in dw.iter_mut().zip(pdw) {
                    *a = *a + v;
                }
            }
            let mut res = vec![
                Some(Tensor::new(args.inputs[0].shape(), dx).unwrap()),
                Some(Tensor::new(args.inputs[1].shape(), dw).unwrap()),
            ];
            if args.inputs.len() == 3 {
                let mut db = vec![T::zero(); plan.cout];
                let hw = plan.oh * plan.ow;
                for (i, &v) in g.iter().enumerate() {
                    db[(i / hw) % plan.cout] = db[(i / hw) % plan.cout] + v;
                }
                res.push(Some(Tensor::new(&[plan.cout], db).unwrap()));
            }
            res
        })
    }

    /// Sliding-window gather: `[B, C, H, W] → [B, N, C·k²]`, windows in raster
    /// order, each row flattened as (channel, row, column).
    pub fn unfold(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err!("unfold expects [B, C, H, W], got {:?}", sx));
        }
        if k == 0 || stride == 0 {
            return Err(config_err!("unfold: kernel {k} and stride {stride} must be positive"));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let win = Window { kh: k, kw: k, stride, pad: padding };
        let (oh, ow) = win
            .out_extent(h, w)
            .ok_or_else(|| shape_err!("unfold: kernel {k} larger than padded input {:?}", sx))?;
        let (np, row) = (oh * ow, c * k * k);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * np * row];
        parallel::for_each_chunk(&mut out, np * row, |bi, o| {
            kernels::im2col(&xv[bi * c * h * w..(bi + 1) * c * h * w], c, h, w, win, o, 1, row);
        });
        self.push("unfold", Tensor::new(&[b, np, row], out)?, vec![x], move |args| {
            let g = args.grad.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            parallel::for_each_chunk(&mut dx, c * h * w, |bi, d| {
                kernels::col2im(&g[bi * np * row..(bi + 1) * np * row], c, h, w, win, d, 1, row);
            });
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        })
    }
}

#[derive(Clone, Copy)]
struct ConvPlan {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cg: usize,
    coutg: usize,
    groups: usize,
    win: Window,
    oh: usize,
    ow: usize,
}

impl ConvPlan {
    fn depthwise(&self) -> bool {
        self.cg == 1 && self.coutg == 1
    }

    fn pointwise(&self) -> bool {
        self.win.kh == 1 && self.win.kw == 1 && self.win.stride == 1 && self.win.pad == 0
    }

    fn kdim(&self) -> usize {
        self.cg * self.win.kh * self.win.kw
    }

    fn columns<T: Scalar>(&self, x: &[T], gi: usize) -> Vec<T> {
        let p = self.oh * self.ow;
        let xs = &x[gi * self.cg * self.h * self.w..(gi + 1) * self.cg * self.h * self.w];
        let mut col = vec![T::zero(); self.kdim() * p];
        kernels::im2col(xs, self.cg, self.h, self.w, self.win, &mut col, p, 1);
        col
    }

    fn forward<T: Scalar>(&self, x: &[T], wt: &[T], out: &mut [T]) {
        if self.depthwise() {
            kernels::depthwise_forward(x, wt, self.cin, self.h, self.w, self.win, out);
            return;
        }
        let p = self.oh * self.ow;
        let kd = self.kdim();
        for gi in 0..self.groups {
            let wg = &wt[gi * self.coutg * kd..(gi + 1) * self.coutg * kd];
            let og = &mut out[gi * self.coutg * p..(gi + 1) * self.coutg * p];
            if self.pointwise() {
                let xs = &x[gi * self.cg * p..(gi + 1) * self.cg * p];
                T::gemm(self.coutg, kd, p, wg, (kd as isize, 1), xs, (p as isize, 1), og, p as isize, false);
            } else {
                let col = self.columns(x, gi);
                T::gemm(self.coutg, kd, p, wg, (kd as isize, 1), &col, (p as isize, 1), og, p as isize, false);
            }
        }
    }

    fn backward<T: Scalar>(&self, x: &[T], wt: &[T], g: &[T]) -> (Vec<T>, Vec<T>) {
        let mut dx = vec![T::zero(); self.cin * self.h * self.w];
        let mut dw = vec![T::zero(); wt.len()];
        if self.depthwise() {
            kernels::depthwise_backward(x, wt, g, self.cin, self.h, self.w, self.win, &mut dx, &mut dw);
            return (dx, dw);
        }
        let p = self.oh * self.ow;
        let kd = self.kdim();
        for gi in 0..self.groups {
            let wg = &wt[gi * self.coutg * kd..(gi + 1) * self.coutg * kd];
            let gg = &g[gi * self.coutg * p..(gi + 1) * self.coutg * p];
            let dwg = &mut dw[gi * self.coutg * kd..(gi + 1) * self.coutg * kd];
            if self.pointwise() {
                let xs = &x[gi * self.cg * p..(gi + 1) * self.cg * p];
                T::gemm(self.coutg, p, kd, gg, (p as isize, 1), xs, (1, p as isize), dwg, kd as isize, false);
                let dxs = &mut dx[gi * self.cg * p..(gi + 1) * self.cg * p];
                T::gemm(kd, self.coutg, p, wg, (1, kd as isize), gg, (p as isize, 1), dxs, p as isize, false);
            } else {
                let col = self.columns(x, gi);
                T::gemm(self.coutg, p, kd, gg, (p as isize, 1), &col, (1, p as isize), dwg, kd as isize, false);
                let mut dcol = vec![T::zero(); kd * p];
                T::gemm(kd, self.coutg, p, wg, (1, kd as isize), gg, (p as isize, 1), &mut dcol, p as isize, false);
                let dxs = &mut dx[gi * self.cg * self.h * self.w..(gi + 1) * self.cg * self.h * self.w];
                kernels::col2im(&dcol, self.cg, self.h, self.w, self.win, dxs, p, 1);
            }
        }
        (dx, dw)
    }
}
