//! Tape-based reverse-mode differentiation over the layer kinds the detector
//! needs. Nodes are appended in evaluation order, so a reverse sweep over the
//! tape visits every consumer before its producers.

use super::kernels::{self, ConvGeom, BN_EPS};
use super::loss::{self, LossValue, RegressionPenalty, LOG_CLAMP};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sigmoid {
        x: Var,
    },
    Rmse {
        pred: Var,
        target: Vec<T>,
    },
    Regression {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        penalty: RegressionPenalty,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<f64>,
        k: usize,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::Shape(format!("conv3d expects [C,D,H,W] input and 5-d kernel, got {xs:?} / {ws:?}")));
        }
        if ws[1] != xs[0] {
            return Err(Error::Shape(format!(
                "conv3d channel mismatch: input has {} channels, kernel expects {}",
                xs[0], ws[1]
            )));
        }
        let k = ws[2];
        if k.is_multiple_of(2) || ws[3] != k || ws[4] != k || dilation == 0 {
            return Err(Error::Shape(format!("kernel {ws:?} must be odd and cubic, dilation ≥ 1")));
        }
        if let Some(b) = b {
            if self.value(b).len() != ws[0] {
                return Err(Error::Shape("conv3d bias length differs from output channels".into()));
            }
        }
        let geom = ConvGeom {
            c_in: xs[0],
            c_out: ws[0],
            k,
            dilation,
            spatial: [xs[1], xs[2], xs[3]],
        };
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![geom.c_out, xs[1], xs[2], xs[3]], out)?;
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, rg))
    }

    fn batch_norm_impl(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], train: bool) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.shape()[0];
        if self.value(gamma).len() != c || self.value(beta).len() != c || mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("batch norm parameters do not match {c} channels")));
        }
        let per = xv.len() / c;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let is = T::of(1.0 / (var[ch] + BN_EPS).sqrt());
            let m = T::of(mean[ch]);
            inv_std.push(is);
            for &v in &xv.data()[ch * per..(ch + 1) * per] {
                let h = (v - m) * is;
                xhat.push(h);
                out.push(g[ch] * h + bt[ch]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// Normalizes each channel with its own spatial statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let c = self.value(x).shape()[0];
        let (mean, var) = kernels::channel_moments(self.value(x).data(), c);
        let y = self.batch_norm_impl(x, gamma, beta, &mean, &var, true)?;
        Ok((y, BatchStats { mean, var }))
    }

    /// Normalizes with stored running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        self.batch_norm_impl(x, gamma, beta, mean, var, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| T::of(loss::sigmoid(v.f64()))).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add operands {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// `y = x·wᵀ + b` for `x` of shape `[In]` or `[N, In]`, `w` of shape `[Out, In]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let n_in = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != n_in || self.value(b).len() != ws[0] {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let rows = self.value(x).len() / n_in;
        let n_out = ws[0];
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            let xr = &xd[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                out.push(bd[o] + kernels::dot(xr, &wd[o * n_in..(o + 1) * n_in]));
            }
        }
        let shape = if xs.len() == 1 { vec![n_out] } else { vec![rows, n_out] };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b, rows }, rg))
    }

    /// `[C, ...] → [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let per = xv.len() / c;
        let data = (0..c)
            .map(|ch| kernels::sum(xv.channel(ch)) / T::of(per as f64))
            .collect();
        let value = Tensor::new(vec![c], data).expect("channel vector");
        let rg = self.rg(x);
        self.push(value, Op::GlobalAvgPool { x }, rg)
    }

    /// Softmax across axis 0 of a `[C, ...]` tensor, independently per position.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let per = xv.len() / c;
        let d = xv.data();
        let mut out = vec![T::zero(); xv.len()];
        for p in 0..per {
            let m = (0..c).map(|k| d[k * per + p]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for k in 0..c {
                let e = (d[k * per + p] - m).exp();
                out[k * per + p] = e;
                s = s + e;
            }
            for k in 0..c {
                out[k * per + p] = out[k * per + p] / s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x }, rg)
    }

    /// Picks spatial positions out of a `[C, ...]` tensor into `[N, C]` rows.
    pub fn gather_positions(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let per = xv.len() / c;
        if idx.is_empty() || idx.iter().any(|&i| i >= per) {
            return Err(Error::Shape(format!("gather index out of range for {per} positions")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            for ch in 0..c {
                out.push(xv.data()[ch * per + i]);
            }
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    pub fn rmse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let v = loss::rmse_loss(self.value(pred).data(), target.data())?;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(T::of(v)),
            Op::Rmse {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Masked mean regression penalty; entries with zero mask carry no gradient.
    pub fn regression_loss(
        &mut self,
        pred: Var,
        target: &[T],
        mask: &[T],
        penalty: RegressionPenalty,
    ) -> Result<(Var, LossValue)> {
        let lv = loss::smooth_distance_loss(self.value(pred).data(), target, mask, penalty)?;
        let rg = self.rg(pred);
        let v = self.push(
            Tensor::scalar(T::of(lv.value)),
            Op::Regression {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                penalty,
                count: lv.count,
            },
            rg,
        );
        Ok((v, lv))
    }

    /// Mean soft-target cross-entropy over the rows of `[N, K]` (or `[K]`) logits.
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let k = *lv.shape().last().unwrap();
        if target.len() != lv.len() {
            return Err(Error::Shape(format!(
                "cross-entropy target has {} entries for logits {:?}",
                target.len(),
                lv.shape()
            )));
        }
        let rows = lv.len() / k;
        let mut total = 0.0;
        for r in 0..rows {
            let z: Vec<f64> = lv.data()[r * k..(r + 1) * k].iter().map(|v| v.f64()).collect();
            total += loss::cross_entropy_soft(&z, &target[r * k..(r + 1) * k])?;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(T::of(total / rows as f64)),
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                k,
            },
            rg,
        ))
    }

    /// `Σ c_i · v_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape("weighted_sum expects scalar terms".into()));
            }
            acc += c * self.value(v).item().f64();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(
            Tensor::scalar(T::of(acc)),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(vec![T::one(); self.value(loss).len()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, delta: Vec<T>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e = *e + d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                if self.rg(*x) {
                    acc(*x, kernels::conv3d_backward_input(g, self.value(*w).data(), *geom));
                }
                let need_w = self.rg(*w) || b.is_some_and(|b| self.rg(b));
                if need_w {
                    let (gw, gb) = kernels::conv3d_backward_params(self.value(*x).data(), g, *geom);
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let per = xhat.len() / c;
                let gm = self.value(*gamma).data();
                let mut dgamma = Vec::with_capacity(c);
                let mut dbeta = Vec::with_capacity(c);
                let mut dx = Vec::with_capacity(xhat.len());
                for ch in 0..c {
                    let gy = &g[ch * per..(ch + 1) * per];
                    let xh = &xhat[ch * per..(ch + 1) * per];
                    let sum_g = kernels::sum(gy);
                    let sum_gx = kernels::dot(gy, xh);
                    dgamma.push(sum_gx);
                    dbeta.push(sum_g);
                    let scale = gm[ch] * inv_std[ch];
                    if *train {
                        let m = T::of(per as f64);
                        for j in 0..per {
                            dx.push(scale * (gy[j] - sum_g / m - xh[j] * sum_gx / m));
                        }
                    } else {
                        dx.extend(gy.iter().map(|&v| scale * v));
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(
                    *x,
                    g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                );
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Linear { x, w, b, rows } => {
                let wv = self.value(*w);
                let (n_out, n_in) = (wv.shape()[0], wv.shape()[1]);
                let xd = self.value(*x).data();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * n_in];
                    for r in 0..*rows {
                        for o in 0..n_out {
                            let go = g[r * n_out + o];
                            let wr = &wv.data()[o * n_in..(o + 1) * n_in];
                            for i in 0..n_in {
                                dx[r * n_in + i] = dx[r * n_in + i] + go * wr[i];
                            }
                        }
                    }
                    acc(*x, dx);
                }
                let mut dw = vec![T::zero(); n_out * n_in];
                let mut db = vec![T::zero(); n_out];
                for r in 0..*rows {
                    for o in 0..n_out {
                        let go = g[r * n_out + o];
                        db[o] = db[o] + go;
                        for i in 0..n_in {
                            dw[o * n_in + i] = dw[o * n_in + i] + go * xd[r * n_in + i];
                        }
                    }
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let per = xv.len() / c;
                let inv = T::of(1.0 / per as f64);
                let mut dx = Vec::with_capacity(xv.len());
                for &gc in g.iter().take(c) {
                    dx.extend(std::iter::repeat_n(gc * inv, per));
                }
                acc(*x, dx);
            }
            Op::Softmax { x } => {
                let s = node.value.data();
                let c = node.value.shape()[0];
                let per = s.len() / c;
                let mut dx = vec![T::zero(); s.len()];
                for p in 0..per {
                    let mut dotv = T::zero();
                    for k in 0..c {
                        dotv = dotv + g[k * per + p] * s[k * per + p];
                    }
                    for k in 0..c {
                        dx[k * per + p] = s[k * per + p] * (g[k * per + p] - dotv);
                    }
                }
                acc(*x, dx);
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let per = xv.len() / c;
                let mut dx = vec![T::zero(); xv.len()];
                for (n, &i) in idx.iter().enumerate() {
                    for ch in 0..c {
                        dx[ch * per + i] = dx[ch * per + i] + g[n * c + ch];
                    }
                }
                acc(*x, dx);
            }
            Op::Rmse { pred, target } => {
                let p = self.value(*pred).data();
                let r = node.value.item();
                let n = T::of(p.len() as f64);
                let dx = if r > T::zero() {
                    p.iter().zip(target).map(|(&p, &t)| g[0] * (p - t) / (n * r)).collect()
                } else {
                    vec![T::zero(); p.len()]
                };
                acc(*pred, dx);
            }
            Op::Regression {
                pred,
                target,
                mask,
                penalty,
                count,
            } => {
                let p = self.value(*pred).data();
                let mut dx = vec![T::zero(); p.len()];
                if *count > 0 {
                    let inv = g[0].f64() / *count as f64;
                    for i in 0..p.len() {
                        if mask[i] == T::zero() {
                            continue;
                        }
                        let d = p[i].f64() - target[i].f64();
                        let slope = penalty.derivative(d.abs()) * d.signum() * (d != 0.0) as u8 as f64;
                        dx[i] = T::of(slope * inv);
                    }
                }
                acc(*pred, dx);
            }
            Op::CrossEntropy { logits, target, k } => {
                let z = self.value(*logits).data();
                let rows = z.len() / k;
                let mut dx = Vec::with_capacity(z.len());
                let scale = g[0].f64() / rows as f64;
                for r in 0..rows {
                    let zr: Vec<f64> = z[r * k..(r + 1) * k].iter().map(|v| v.f64()).collect();
                    let ls = loss::log_softmax(&zr);
                    let s: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
                    let tr = &target[r * k..(r + 1) * k];
                    // active targets: those whose log-probability is above the clamp
                    let active: Vec<f64> = (0..*k).map(|m| if ls[m] > LOG_CLAMP { tr[m] } else { 0.0 }).collect();
                    let mass: f64 = active.iter().sum();
                    for j in 0..*k {
                        dx.push(T::of(scale * (mass * s[j] - active[j])));
                    }
                }
                acc(*logits, dx);
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    acc(v, vec![T::of(c * g[0].f64())]);
                }
            }
        }
    }
}

pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], |g| g.to_vec())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of every (or up to 24 sampled) coordinates of every parameter.
    fn grad_check(params: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |ps: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
            let l = build(&mut g, &vars);
            (g, vars, l)
        };
        let (g, vars, l) = eval(params);
        let grads = g.backward(l);
        let h = 1e-4;
        for (pi, p) in params.iter().enumerate() {
            let an = grads.get_or_zeros(vars[pi], p.len());
            let stride = p.len().div_ceil(24).max(1);
            for j in (0..p.len()).step_by(stride) {
                let mut ps = params.to_vec();
                ps[pi].data_mut()[j] += h;
                let (g1, _, l1) = eval(&ps);
                ps[pi].data_mut()[j] -= 2.0 * h;
                let (g2, _, l2) = eval(&ps);
                let num = (g1.value(l1).item() - g2.value(l2).item()) / (2.0 * h);
                let a = an[j];
                assert!(
                    (a - num).abs() <= 1e-3 * a.abs().max(num.abs()) + 1e-8,
                    "param {pi} coord {j}: analytic {a} vs numeric {num}"
                );
            }
        }
    }

    fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let mut t = rand_tensor(rng, shape);
        for v in t.data_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        }
        t
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..6 {
            let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let k = [1, 3][rng.random_range(0..2)];
            let dil = rng.random_range(1..=2);
            let x = rand_tensor(&mut rng, &[ci, 4, 4, 4]);
            let w = rand_tensor(&mut rng, &[co, ci, k, k, k]);
            let b = rand_tensor(&mut rng, &[co]);
            let t = rand_tensor(&mut rng, &[co, 4, 4, 4]);
            grad_check(&[x, w, b], |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), dil).unwrap();
                g.rmse(y, &t).unwrap()
            });
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for train in [true, false] {
            for _ in 0..4 {
                let c = rng.random_range(1..=3);
                let x = rand_tensor(&mut rng, &[c, 3, 4, 4]);
                let gm = rand_tensor(&mut rng, &[c]);
                let bt = rand_tensor(&mut rng, &[c]);
                let t = rand_tensor(&mut rng, &[c, 3, 4, 4]);
                let rm: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
                let rv: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
                grad_check(&[x, gm, bt], |g, v| {
                    let y = if train {
                        g.batch_norm_train(v[0], v[1], v[2]).unwrap().0
                    } else {
                        g.batch_norm_eval(v[0], v[1], v[2], &rm, &rv).unwrap()
                    };
                    g.rmse(y, &t).unwrap()
                });
            }
        }
    }

    #[test]
    fn pointwise_and_reduction_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            let x = away_from_zero(&mut rng, &[2, 3, 3, 3]);
            let y = rand_tensor(&mut rng, &[2, 3, 3, 3]);
            let t = rand_tensor(&mut rng, &[2, 3, 3, 3]);
            let t2 = rand_tensor(&mut rng, &[2]);
            let t3 = rand_tensor(&mut rng, &[4, 2]);
            grad_check(&[x.clone()], |g, v| {
                let r = g.relu(v[0]);
                g.rmse(r, &t).unwrap()
            });
            grad_check(&[x.clone()], |g, v| {
                let r = g.sigmoid(v[0]);
                g.rmse(r, &t).unwrap()
            });
            grad_check(&[x.clone(), y.clone()], |g, v| {
                let r = g.add(v[0], v[1]).unwrap();
                g.rmse(r, &t).unwrap()
            });
            grad_check(&[x.clone()], |g, v| {
                let r = g.global_avg_pool(v[0]);
                g.rmse(r, &t2).unwrap()
            });
            grad_check(&[x.clone()], |g, v| {
                let r = g.softmax_channels(v[0]);
                g.rmse(r, &t).unwrap()
            });
            grad_check(&[x.clone()], |g, v| {
                let r = g.gather_positions(v[0], &[0, 5, 5, 26]).unwrap();
                g.rmse(r, &t3).unwrap()
            });
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for rows in [0usize, 1, 3] {
            let (ni, no) = (rng.random_range(1..=5), rng.random_range(1..=4));
            let xs: Vec<usize> = if rows == 0 { vec![ni] } else { vec![rows, ni] };
            let ts: Vec<usize> = if rows == 0 { vec![no] } else { vec![rows, no] };
            let x = rand_tensor(&mut rng, &xs);
            let w = rand_tensor(&mut rng, &[no, ni]);
            let b = rand_tensor(&mut rng, &[no]);
            let t = rand_tensor(&mut rng, &ts);
            grad_check(&[x, w, b], |g, v| {
                let y = g.linear(v[0], v[1], v[2]).unwrap();
                g.rmse(y, &t).unwrap()
            });
        }
    }

    fn residuals_clear_of_kinks(p: &Tensor<f64>, t: &[f64]) -> bool {
        p.data().iter().zip(t).all(|(&p, &t)| {
            let r = (p - t).abs();
            [0.0, 0.5, 1.0, 2.125].iter().all(|&k| (r - k).abs() > 1e-3)
        })
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut done = 0;
        while done < 6 {
            let p = rand_tensor(&mut rng, &[12]).cast::<f64>();
            let p = Tensor::new(vec![12], p.data().iter().map(|v| v * 3.0).collect()).unwrap();
            let t: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            if !residuals_clear_of_kinks(&p, &t) {
                continue;
            }
            let mask: Vec<f64> = (0..12).map(|i| (i % 3 != 0) as u8 as f64).collect();
            for pen in [RegressionPenalty::SmoothDistance, RegressionPenalty::ContinuousSmoothL1] {
                grad_check(&[p.clone()], |g, v| g.regression_loss(v[0], &t, &mask, pen).unwrap().0);
            }
            let tt = Tensor::new(vec![12], t.clone()).unwrap();
            grad_check(&[p.clone()], |g, v| g.rmse(v[0], &tt).unwrap());

            let logits = rand_tensor(&mut rng, &[3, 4]);
            let mut soft: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
            for r in 0..3 {
                let s: f64 = soft[r * 4..r * 4 + 4].iter().sum();
                soft[r * 4..r * 4 + 4].iter_mut().for_each(|v| *v /= s);
            }
            grad_check(&[logits.clone()], |g, v| g.cross_entropy(v[0], &soft).unwrap());
            grad_check(&[logits, p.clone()], |g, v| {
                let a = g.cross_entropy(v[0], &soft).unwrap();
                let (b, _) = g.regression_loss(v[1], &t, &mask, RegressionPenalty::SmoothDistance).unwrap();
                let sb = g.sigmoid(b);
                g.weighted_sum(&[(a, 0.7), (sb, 1.3)]).unwrap()
            });
            done += 1;
        }
    }

    #[test]
    fn chain_rule_example() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1], vec![3.0]).unwrap());
        let w = g.param(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let b = g.input(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = g.linear(x, w, b).unwrap();
        // rmse of one entry is |y|; for y > 0, d(y²)/dw = 2·y·d|y|/dw
        let l = g.rmse(y, &Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let grads = g.backward(l);
        let d_abs = grads.get(w).unwrap()[0];
        assert_eq!(d_abs, 3.0);
        assert_eq!(2.0 * g.value(y).item() * d_abs, 36.0);
    }

    #[test]
    fn batch_norm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::<f64>::new();
        let mut xd = rand_tensor(&mut rng, &[3, 4, 4, 4]).into_data();
        xd[128..192].iter_mut().for_each(|v| *v = 0.7);
        let x = g.input(Tensor::new(vec![3, 4, 4, 4], xd).unwrap());
        let gm = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 1.0]).unwrap());
        let bt = g.param(Tensor::new(vec![3], vec![0.0, 3.0, -0.4]).unwrap());
        let (y, _) = g.batch_norm_train(x, gm, bt).unwrap();
        let yv = g.value(y);
        let (m, v) = kernels::channel_moments(yv.data(), 3);
        assert!(m[0].abs() < 1e-4 && (v[0] - 1.0).abs() < 1e-4);
        assert!((m[1] - 3.0).abs() < 1e-3 && (v[1].sqrt() - 2.0).abs() < 1e-3);
        assert!(yv.channel(2).iter().all(|&v| (v + 0.4).abs() < 1e-12));
    }

    #[test]
    fn masked_regression_entries_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(vec![4], vec![5.0, -3.0, 0.2, 9.0]).unwrap());
        let (l, lv) = g
            .regression_loss(p, &[0.0; 4], &[0.0, 1.0, 0.0, 0.0], RegressionPenalty::SmoothDistance)
            .unwrap();
        assert_eq!(lv.count, 1);
        let gr = g.backward(l);
        let d = gr.get(p).unwrap();
        assert_eq!([d[0], d[2], d[3]], [0.0; 3]);
        assert!(d[1] != 0.0);

        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(vec![2], vec![5.0, -3.0]).unwrap());
        let (l, lv) = g.regression_loss(p, &[0.0; 2], &[0.0; 2], RegressionPenalty::SmoothDistance).unwrap();
        assert!(lv.is_empty());
        assert_eq!(g.value(l).item(), 0.0);
        assert!(g.backward(l).get(p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn left_branch_slope_at_jump() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::new(vec![1], vec![0.5]).unwrap());
        let (l, _) = g.regression_loss(p, &[0.0], &[1.0], RegressionPenalty::SmoothDistance).unwrap();
        assert_eq!(g.value(l).item(), 0.375);
        assert_eq!(g.backward(l).get(p).unwrap()[0], 0.5);
    }

    #[test]
    fn no_parameters_no_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let l = g.rmse(x, &Tensor::zeros(&[2])).unwrap();
        assert!(g.backward(l).get(x).is_none());
    }

    #[test]
    fn softmax_sums_to_one_and_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[4, 5, 5, 5]).cast::<f32>();
        let w = rand_tensor(&mut rng, &[4, 4, 3, 3, 3]).cast::<f32>();
        let run = || {
            let mut g = Graph::<f32>::new();
            let xv = g.input(x.clone());
            let wv = g.param(w.clone());
            let y = g.conv3d(xv, wv, None, 2).unwrap();
            let s = g.softmax_channels(y);
            g.value(s).clone()
        };
        let s = run();
        assert_eq!(s, run());
        for p in 0..125 {
            let t: f32 = (0..4).map(|k| s.data()[k * 125 + p]).sum();
            assert!((t - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_identity_sum_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[2, 5, 5, 5]);
        let mut id = Tensor::<f64>::zeros(&[2, 2, 3, 3, 3]);
        id.data_mut()[13] = 1.0;
        id.data_mut()[27 * 3 + 13] = 1.0;
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let wv = g.input(id);
        let y = g.conv3d(xv, wv, None, 1).unwrap();
        assert_eq!(g.value(y), &x);

        let c = Tensor::<f64>::full(&[1, 5, 5, 5], 0.3);
        let ones = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0);
        let cv = g.input(c);
        let ov = g.input(ones);
        let y = g.conv3d(cv, ov, None, 1).unwrap();
        assert!((g.value(y).data()[62] - 27.0 * 0.3).abs() < 1e-12);

        let a = rand_tensor(&mut rng, &[2, 5, 5, 5]);
        let b = rand_tensor(&mut rng, &[2, 5, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
        let conv = |t: &Tensor<f64>| kernels::conv3d_forward(t.data(), w.data(), None, ConvGeom { c_in: 2, c_out: 3, k: 3, dilation: 2, spatial: [5, 5, 5] });
        let mix: Vec<f64> = a.data().iter().zip(b.data()).map(|(p, q)| 1.7 * p - 0.4 * q).collect();
        let lhs = kernels::conv3d_forward(&mix, w.data(), None, ConvGeom { c_in: 2, c_out: 3, k: 3, dilation: 2, spatial: [5, 5, 5] });
        let (ca, cb) = (conv(&a), conv(&b));
        for i in 0..lhs.len() {
            assert!((lhs[i] - (1.7 * ca[i] - 0.4 * cb[i])).abs() < 1e-4);
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2, 4, 4, 4]));
        let w = g.param(Tensor::zeros(&[1, 3, 3, 3, 3]));
        assert!(matches!(g.conv3d(x, w, None, 1), Err(Error::Shape(_))));
        let w = g.param(Tensor::zeros(&[1, 2, 2, 2, 2]));
        assert!(g.conv3d(x, w, None, 1).is_err());
    }
}
