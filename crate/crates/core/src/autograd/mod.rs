//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] borrows the parameter store read-only, records every
//! operation with its forward value, and [`Graph::backward`] walks the tape
//! in reverse to produce one gradient per parameter. Batch-norm running
//! statistics observed in training mode are collected on the graph and
//! applied to the store afterwards, so the forward pass itself is pure.

pub(crate) mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::losses::{self, Mining, Reduction};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;
use kernels::{col2im, gemm, im2col, ConvGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        act: Activation,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        act: Activation,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPoolRows {
        x: Var,
        rows: (usize, usize),
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    Mix {
        weights: Var,
        branches: Vec<Var>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    /// Scalar loss whose gradient with respect to each input was computed
    /// in the forward pass.
    Loss {
        inputs: Vec<(Var, Tensor)>,
    },
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by one training-mode batch-norm call.
#[derive(Debug, Clone)]
pub struct BnStat {
    pub mean_buffer: BufferId,
    pub var_buffer: BufferId,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
    pub momentum: f64,
}

/// Gradients indexed by parameter; `None` for parameters the loss does not
/// reach.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    training: bool,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    bn_stats: Vec<BnStat>,
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::Shape {
            op,
            expected: vec![0; rank],
            got: t.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Self {
            store,
            training,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id), &[]);
        self.param_vars.insert(id, v);
        v
    }

    /// Copies `x` as a constant, severing gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.input(t)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        act: Activation,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        expect_rank("conv2d", xv, 4)?;
        expect_rank("conv2d", wv, 4)?;
        let (n, ci, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (co, k) = (wv.dim(0), wv.dim(2));
        if wv.dim(1) != ci || wv.dim(3) != k {
            return Err(Error::Shape {
                op: "conv2d",
                expected: vec![co, ci, k, k],
                got: wv.shape().to_vec(),
            });
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::Argument(format!(
                "conv2d kernel {k} does not fit a {h}x{wd} input with padding {pad}"
            )));
        }
        let g = ConvGeom {
            channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; n * co * oh * ow];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; g.col_rows() * g.col_cols()]
        };
        for i in 0..n {
            let img = xv.row(i);
            let src: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(img, &g, &mut cols);
                &cols
            };
            let dst = &mut out[i * co * oh * ow..(i + 1) * co * oh * ow];
            gemm(co, g.col_rows(), oh * ow, wv.data(), false, src, false, 0.0, dst);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [co] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    expected: vec![co],
                    got: bv.shape().to_vec(),
                });
            }
            add_channel_bias(&mut out, bv.data(), oh * ow);
        }
        if act == Activation::Relu {
            out.iter_mut().for_each(|v| if *v < 0.0 { *v = 0.0 });
        }
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
                act,
            },
            &parents,
        ))
    }

    /// Transposed convolution; `w` has shape `[in, out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        act: Activation,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        expect_rank("conv_transpose2d", xv, 4)?;
        expect_rank("conv_transpose2d", wv, 4)?;
        let (n, ci, hin, win) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (co, k) = (wv.dim(1), wv.dim(2));
        if wv.dim(0) != ci || wv.dim(3) != k {
            return Err(Error::Shape {
                op: "conv_transpose2d",
                expected: vec![ci, co, k, k],
                got: wv.shape().to_vec(),
            });
        }
        let hout = (hin - 1) * stride + k - 2 * pad;
        let wout = (win - 1) * stride + k - 2 * pad;
        let g = ConvGeom {
            channels: co,
            height: hout,
            width: wout,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(g.out_height(), hin);
        let mut out = vec![0.0; n * co * hout * wout];
        let mut cols = vec![0.0; g.col_rows() * hin * win];
        for i in 0..n {
            gemm(g.col_rows(), ci, hin * win, wv.data(), true, xv.row(i), false, 0.0, &mut cols);
            col2im(&cols, &g, &mut out[i * co * hout * wout..(i + 1) * co * hout * wout]);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [co] {
                return Err(Error::Shape {
                    op: "conv_transpose2d bias",
                    expected: vec![co],
                    got: bv.shape().to_vec(),
                });
            }
            add_channel_bias(&mut out, bv.data(), hout * wout);
        }
        if act == Activation::Relu {
            out.iter_mut().for_each(|v| if *v < 0.0 { *v = 0.0 });
        }
        let value = Tensor::new(vec![n, co, hout, wout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::ConvTranspose {
                x,
                w,
                b,
                stride,
                pad,
                act,
            },
            &parents,
        ))
    }

    /// Batch normalization over every axis but the channel axis (1) of a
    /// rank-2 or rank-4 input. Training mode normalizes with batch
    /// statistics and records them; inference uses the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean_buffer: BufferId,
        var_buffer: BufferId,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 && xv.ndim() != 4 {
            return Err(Error::Shape {
                op: "batch_norm",
                expected: vec![0, 0, 0, 0],
                got: xv.shape().to_vec(),
            });
        }
        let (n, c) = (xv.dim(0), xv.dim(1));
        let plane: usize = xv.shape()[2..].iter().product();
        let count = n * plane;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        if gv.len() != c || bv.len() != c {
            return Err(Error::Shape {
                op: "batch_norm affine",
                expected: vec![c],
                got: vec![gv.len()],
            });
        }
        let batch_stats = self.training;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    s += xv.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for i in 0..n {
                    for v in &xv.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane] {
                        ss += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
            (mean, var)
        } else {
            (
                self.store.buffer(mean_buffer).data().to_vec(),
                self.store.buffer(var_buffer).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    let h = (xv.data()[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        if batch_stats {
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            self.bn_stats.push(BnStat {
                mean_buffer,
                var_buffer,
                mean,
                var_unbiased: var.iter().map(|v| v * unbias).collect(),
                momentum,
            });
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| if *v < 0.0 { *v = 0.0 });
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "add",
                expected: av.shape().to_vec(),
                got: bv.shape().to_vec(),
            });
        }
        let mut t = av.clone();
        t.add_assign(bv);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Max pooling with a square window; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("max_pool2d", xv, 4)?;
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = plane * h * w + at;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Average over rows `start..end` (all columns) of a `[N, C, H, W]`
    /// map, giving `[N, C]`.
    pub fn avg_pool_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("avg_pool_rows", xv, 4)?;
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        if start >= end || end > h {
            return Err(Error::Argument(format!("row range {start}..{end} outside height {h}")));
        }
        let scale = 1.0 / ((end - start) * w) as f64;
        let out: Vec<f64> = (0..n * c)
            .map(|plane| xv.data()[plane * h * w + start * w..plane * h * w + end * w].iter().sum::<f64>() * scale)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(
            value,
            Op::AvgPoolRows {
                x,
                rows: (start, end),
            },
            &[x],
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let h = self.value(x).dim(2);
        self.avg_pool_rows(x, 0, h)
    }

    /// `x · wᵀ + b` for `x: [N, D]`, `w: [O, D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        expect_rank("linear", xv, 2)?;
        expect_rank("linear", wv, 2)?;
        let (n, d, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
        if wv.dim(1) != d {
            return Err(Error::Shape {
                op: "linear",
                expected: vec![o, d],
                got: wv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * o];
        gemm(n, d, o, xv.data(), false, wv.data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return Err(Error::Shape {
                    op: "linear bias",
                    expected: vec![o],
                    got: vec![bv.len()],
                });
            }
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(y, b)| *y += b);
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Row-wise softmax of a `[N, K]` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("softmax_rows", xv, 2)?;
        let k = xv.dim(1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Per-sample convex combination `Σₖ weights[n, k] · branches[k][n]`.
    pub fn mix(&mut self, weights: Var, branches: &[Var]) -> Result<Var> {
        let wv = self.value(weights);
        expect_rank("mix", wv, 2)?;
        if wv.dim(1) != branches.len() || branches.is_empty() {
            return Err(Error::Argument(format!(
                "mix has {} weights per sample but {} branches",
                wv.dim(1),
                branches.len()
            )));
        }
        let first = self.value(branches[0]);
        let shape = first.shape().to_vec();
        if shape[0] != wv.dim(0) {
            return Err(Error::Shape {
                op: "mix",
                expected: vec![wv.dim(0)],
                got: vec![shape[0]],
            });
        }
        let per = first.row_len();
        let kk = branches.len();
        let mut out = vec![0.0; first.len()];
        for (k, &b) in branches.iter().enumerate() {
            let bv = self.value(b);
            if bv.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "mix",
                    expected: shape.clone(),
                    got: bv.shape().to_vec(),
                });
            }
            for n in 0..shape[0] {
                let wk = wv.data()[n * kk + k];
                for (o, v) in out[n * per..(n + 1) * per].iter_mut().zip(bv.row(n)) {
                    *o += wk * v;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let mut parents = vec![weights];
        parents.extend_from_slice(branches);
        Ok(self.push(
            value,
            Op::Mix {
                weights,
                branches: branches.to_vec(),
            },
            &parents,
        ))
    }

    /// Selects leading-axis rows (repeats allowed).
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.dim(0);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Argument(format!("row {bad} out of range for {n} rows")));
        }
        let items: Vec<&[f64]> = rows.iter().map(|&r| xv.row(r)).collect();
        let mut shape = xv.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, items.concat())?;
        Ok(self.push(
            value,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather(x, &rows)
    }

    /// Squared-error loss between `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: Var, reduction: Reduction) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        let (loss, grad) = losses::squared_error_with_grad(pv, tv, reduction)?;
        let neg = Tensor::new(grad.shape().to_vec(), grad.data().iter().map(|g| -g).collect())?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Loss {
                inputs: vec![(pred, grad), (target, neg)],
            },
            &[pred, target],
        ))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = losses::cross_entropy_with_grad(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Loss {
                inputs: vec![(logits, grad)],
            },
            &[logits],
        ))
    }

    pub fn triplet(
        &mut self,
        feats: Var,
        labels: &[usize],
        margin: f64,
        mining: Mining,
        reduction: Reduction,
    ) -> Result<Var> {
        let (loss, grad) = losses::triplet_with_grad(self.value(feats), labels, margin, mining, reduction)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Loss {
                inputs: vec![(feats, grad)],
            },
            &[feats],
        ))
    }

    /// Weighted sum of scalars.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Argument("combine takes scalar terms".into()));
            }
            total += c * t.item();
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(total), Op::Combine(terms.to_vec()), &parents))
    }

    /// Batch statistics recorded by training-mode batch norm.
    pub fn bn_stats(&self) -> &[BnStat] {
        &self.bn_stats
    }

    pub fn into_bn_stats(self) -> Vec<BnStat> {
        self.bn_stats
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Argument("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out[id.0] {
                    Some(g) => g.add_assign(&dy),
                    slot => *slot = Some(dy),
                },
                Op::Conv {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    act,
                } => {
                    let dy = self.mask_relu(dy, &node.value, *act);
                    let (dx, dw, db) = self.conv_backward(*x, *w, &dy, *stride, *pad)?;
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *w, Some(dw));
                    if let Some(b) = b {
                        self.accum(&mut grads, *b, Some(db));
                    }
                }
                Op::ConvTranspose {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    act,
                } => {
                    let dy = self.mask_relu(dy, &node.value, *act);
                    let (dx, dw, db) = self.conv_transpose_backward(*x, *w, &dy, *stride, *pad)?;
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *w, Some(dw));
                    if let Some(b) = b {
                        self.accum(&mut grads, *b, Some(db));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (dx, dg, db) =
                        batch_norm_backward(&dy, xhat, inv_std, self.value(*gamma).data(), *batch_stats)?;
                    self.accum(&mut grads, *x, Some(dx));
                    self.accum(&mut grads, *gamma, Some(dg));
                    self.accum(&mut grads, *beta, Some(db));
                }
                Op::Relu(x) => {
                    let dx = self.mask_relu(dy, &node.value, Activation::Relu);
                    self.accum(&mut grads, *x, Some(dx));
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy;
                    for (g, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= y * (1.0 - y);
                    }
                    self.accum(&mut grads, *x, Some(dx));
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, Some(dy.clone()));
                    self.accum(&mut grads, *b, Some(dy));
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (g, &at) in dy.data().iter().zip(argmax) {
                        dx.data_mut()[at] += g;
                    }
                    self.accum(&mut grads, *x, Some(dx));
                }
                Op::AvgPoolRows { x, rows } => {
                    let xs = self.value(*x).shape();
                    let (h, w) = (xs[2], xs[3]);
                    let scale = 1.0 / ((rows.1 - rows.0) * w) as f64;
                    let mut dx = Tensor::zeros(xs);
                    for (plane, g) in dy.data().iter().enumerate() {
                        let base = plane * h * w;
                        dx.data_mut()[base + rows.0 * w..base + rows.1 * w]
                            .iter_mut()
                            .for_each(|v| *v = g * scale);
                    }
                    self.accum(&mut grads, *x, Some(dx));
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, d, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; n * d];
                        gemm(n, o, d, dy.data(), false, wv.data(), false, 0.0, &mut dx);
                        self.accum(&mut grads, *x, Some(Tensor::new(vec![n, d], dx)?));
                    }
                    let mut dw = vec![0.0; o * d];
                    gemm(o, n, d, dy.data(), true, xv.data(), false, 0.0, &mut dw);
                    self.accum(&mut grads, *w, Some(Tensor::new(vec![o, d], dw)?));
                    if let Some(b) = b {
                        let mut db = vec![0.0; o];
                        for row in dy.data().chunks(o) {
                            db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                        }
                        self.accum(&mut grads, *b, Some(Tensor::new(vec![o], db)?));
                    }
                }
                Op::Softmax(x) => {
                    let k = node.value.dim(1);
                    let mut dx = dy;
                    for (g, y) in dx.data_mut().chunks_mut(k).zip(node.value.data().chunks(k)) {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        g.iter_mut().zip(y).for_each(|(gi, yi)| *gi = yi * (*gi - dot));
                    }
                    self.accum(&mut grads, *x, Some(dx));
                }
                Op::Mix { weights, branches } => {
                    let wv = self.value(*weights);
                    let (n, kk) = (wv.dim(0), wv.dim(1));
                    let per = dy.row_len();
                    let mut dw = vec![0.0; n * kk];
                    for (k, &b) in branches.iter().enumerate() {
                        let bv = self.value(b);
                        for s in 0..n {
                            dw[s * kk + k] = dy.row(s).iter().zip(bv.row(s)).map(|(a, b)| a * b).sum();
                        }
                        if self.nodes[b.0].needs_grad {
                            let mut db = dy.clone();
                            for s in 0..n {
                                let wk = wv.data()[s * kk + k];
                                db.data_mut()[s * per..(s + 1) * per].iter_mut().for_each(|v| *v *= wk);
                            }
                            self.accum(&mut grads, b, Some(db));
                        }
                    }
                    self.accum(&mut grads, *weights, Some(Tensor::new(vec![n, kk], dw)?));
                }
                Op::Gather { x, rows } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let per = dx.row_len();
                    for (j, &r) in rows.iter().enumerate() {
                        for (a, g) in dx.data_mut()[r * per..(r + 1) * per].iter_mut().zip(dy.row(j)) {
                            *a += g;
                        }
                    }
                    self.accum(&mut grads, *x, Some(dx));
                }
                Op::Loss { inputs } => {
                    let scale = dy.item();
                    for (v, g) in inputs {
                        if self.nodes[v.0].needs_grad {
                            let mut t = g.clone();
                            t.data_mut().iter_mut().for_each(|e| *e *= scale);
                            self.accum(&mut grads, *v, Some(t));
                        }
                    }
                }
                Op::Combine(terms) => {
                    for &(v, c) in terms {
                        self.accum(&mut grads, v, Some(Tensor::full(self.value(v).shape(), c * dy.item())));
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Option<Tensor>) {
        let Some(g) = g else { return };
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn mask_relu(&self, mut dy: Tensor, out: &Tensor, act: Activation) -> Tensor {
        if act == Activation::Relu {
            for (g, y) in dy.data_mut().iter_mut().zip(out.data()) {
                if *y <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        dy
    }

    #[allow(clippy::type_complexity)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        dy: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, ci, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (co, k) = (wv.dim(0), wv.dim(2));
        let g = ConvGeom {
            channels: ci,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let hw = g.col_cols();
        let need_dx = self.nodes[x.0].needs_grad;
        let mut dw = vec![0.0; wv.len()];
        let mut db = vec![0.0; co];
        let mut dx = if need_dx { vec![0.0; xv.len()] } else { Vec::new() };
        let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { g.col_rows() * hw }];
        let mut dcols = vec![0.0; if need_dx { g.col_rows() * hw } else { 0 }];
        for i in 0..n {
            let dyi = dy.row(i);
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyi[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
            let src: &[f64] = if g.is_pointwise() {
                xv.row(i)
            } else {
                im2col(xv.row(i), &g, &mut cols);
                &cols
            };
            gemm(co, hw, g.col_rows(), dyi, false, src, true, 1.0, &mut dw);
            if need_dx {
                let dxi = &mut dx[i * ci * h * wd..(i + 1) * ci * h * wd];
                if g.is_pointwise() {
                    gemm(ci, co, hw, wv.data(), true, dyi, false, 0.0, dxi);
                } else {
                    gemm(g.col_rows(), co, hw, wv.data(), true, dyi, false, 0.0, &mut dcols);
                    col2im(&dcols, &g, dxi);
                }
            }
        }
        let dx = if need_dx {
            Some(Tensor::new(xv.shape().to_vec(), dx)?)
        } else {
            None
        };
        Ok((dx, Tensor::new(wv.shape().to_vec(), dw)?, Tensor::new(vec![co], db)?))
    }

    #[allow(clippy::type_complexity)]
    fn conv_transpose_backward(
        &self,
        x: Var,
        w: Var,
        dy: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<(Option<Tensor>, Tensor, Tensor)> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, ci, hin, win) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let (co, k) = (wv.dim(1), wv.dim(2));
        let g = ConvGeom {
            channels: co,
            height: dy.dim(2),
            width: dy.dim(3),
            kernel: k,
            stride,
            pad,
        };
        let plane = g.height * g.width;
        let need_dx = self.nodes[x.0].needs_grad;
        let mut dw = vec![0.0; wv.len()];
        let mut db = vec![0.0; co];
        let mut dx = if need_dx { vec![0.0; xv.len()] } else { Vec::new() };
        let mut dcols = vec![0.0; g.col_rows() * hin * win];
        for i in 0..n {
            let dyi = dy.row(i);
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dyi[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
            im2col(dyi, &g, &mut dcols);
            gemm(ci, hin * win, g.col_rows(), xv.row(i), false, &dcols, true, 1.0, &mut dw);
            if need_dx {
                let dxi = &mut dx[i * ci * hin * win..(i + 1) * ci * hin * win];
                gemm(ci, g.col_rows(), hin * win, wv.data(), false, &dcols, false, 0.0, dxi);
            }
        }
        let dx = if need_dx {
            Some(Tensor::new(xv.shape().to_vec(), dx)?)
        } else {
            None
        };
        Ok((dx, Tensor::new(wv.shape().to_vec(), dw)?, Tensor::new(vec![co], db)?))
    }
}

/// Folds recorded batch statistics into the running buffers.
pub fn apply_bn_stats(store: &mut ParamStore, stats: &[BnStat]) {
    for s in stats {
        let m = s.momentum;
        for (r, v) in store.buffer_mut(s.mean_buffer).data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in store.buffer_mut(s.var_buffer).data_mut().iter_mut().zip(&s.var_unbiased) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn batch_norm_backward(
    dy: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    batch_stats: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c) = (dy.dim(0), dy.dim(1));
    let plane: usize = dy.shape()[2..].iter().product();
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            for j in base..base + plane {
                dbeta[ch] += dy.data()[j];
                dgamma[ch] += dy.data()[j] * xhat[j];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for j in base..base + plane {
                dx[j] = if batch_stats {
                    scale * (dy.data()[j] - dbeta[ch] / count - xhat[j] * dgamma[ch] / count)
                } else {
                    scale * dy.data()[j]
                };
            }
        }
    }
    Ok((
        Tensor::new(dy.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
