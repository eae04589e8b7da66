//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every node that requires one.

use crate::error::{shape_err, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    /// Per-channel normalisation with batch statistics.
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    /// Per-channel affine map using frozen statistics.
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        k: f32,
    },
    Exp {
        a: Var,
    },
    WeightedCrossEntropy {
        logits: Var,
        weights: Vec<f32>,
        targets: Vec<u8>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct BatchNormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = tensor::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let y = tensor::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b, stride }, rg))
    }

    /// Batch normalisation. In training mode the batch statistics are used and
    /// returned so the caller can update running estimates; otherwise
    /// `running` supplies the statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<&BatchNormStats>,
        eps: f32,
    ) -> Result<(Var, Option<BatchNormStats>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err!("batch norm affine parameters do not match {} channels", c));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xv = self.value(x).data();
        let (mean, var) = match running {
            Some(stats) => (stats.mean.clone(), stats.var.clone()),
            None => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        s += xv[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        ss += xv[base..base + plane]
                            .iter()
                            .map(|&v| {
                                let d = v as f64 - m;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = m as f32;
                    var[ch] = (ss / count) as f32;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut y = Tensor::zeros(&[n, c, h, w]);
        let yd = y.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    yd[j] = g[ch] * xh + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let training = running.is_none();
        let op = if training {
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        };
        let out = self.push(y, op, rg);
        let stats = training.then_some(BatchNormStats { mean, var });
        Ok((out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.rg(x);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (y, argmax) = tensor::max_pool2d(self.value(x), k)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = tensor::concat_channels(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "elementwise op on {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let mut y = self.value(a).clone();
        for (v, w) in y.data_mut().iter_mut().zip(self.value(b).data()) {
            *v *= *w;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let mut y = self.value(a).clone();
        for v in y.data_mut() {
            *v *= k;
        }
        let rg = self.rg(a);
        self.push(y, Op::Scale { a, k }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        for v in y.data_mut() {
            *v = v.exp();
        }
        let rg = self.rg(a);
        self.push(y, Op::Exp { a }, rg)
    }

    /// Mean over all pixels of `-weight(p) · log softmax(logits)(p)[target(p)]`.
    ///
    /// `logits` is `[N, C, H, W]`; `targets` and `weights` hold one entry per
    /// pixel in `[N, H, W]` order.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[u8], weights: &[f32]) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        let plane = h * w;
        if targets.len() != n * plane || weights.len() != n * plane {
            return Err(shape_err!(
                "cross-entropy targets/weights have {}/{} entries, logits need {}",
                targets.len(),
                weights.len(),
                n * plane
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; z.len()];
        let mut total = 0.0f64;
        for i in 0..n {
            for p in 0..plane {
                let t = targets[i * plane + p] as usize;
                if t >= c {
                    return Err(shape_err!("target class {} out of range for {} classes", t, c));
                }
                let at = |ch: usize| (i * c + ch) * plane + p;
                let max = (0..c).map(|ch| z[at(ch)]).fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0.0f64;
                for ch in 0..c {
                    let e = ((z[at(ch)] - max) as f64).exp();
                    probs[at(ch)] = e as f32;
                    denom += e;
                }
                for ch in 0..c {
                    probs[at(ch)] = (probs[at(ch)] as f64 / denom) as f32;
                }
                let log_p = (z[at(t)] - max) as f64 - denom.ln();
                total -= weights[i * plane + p] as f64 * log_p;
            }
        }
        let loss = (total / (n * plane) as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy {
                logits,
                weights: weights.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gradient of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            ));
        }
        self.backward_with_seed(root, Tensor::full(self.value(root).shape(), 1.0))
    }

    /// Vector-Jacobian product seeded with `seed` at `root`.
    pub fn backward_with_seed(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(shape_err!("seed shape does not match root"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let g = tensor::conv2d_backward(self.value(*x), self.value(*w), dy, *stride, *pad, self.rg(*x))?;
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.db);
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let g = tensor::conv_transpose2d_backward(self.value(*x), self.value(*w), dy, *stride, self.rg(*x))?;
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.db);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = dy.dims4()?;
                let plane = h * w;
                let m = (n * plane) as f32;
                let g = self.value(*gamma).data();
                let dyd = dy.data();
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let (mut sg, mut sb) = (0.0f64, 0.0f64);
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            sg += (dyd[j] * xhat[j]) as f64;
                            sb += dyd[j] as f64;
                        }
                    }
                    dgamma.data_mut()[ch] = sg as f32;
                    dbeta.data_mut()[ch] = sb as f32;
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(dy.shape());
                    let dxd = dx.data_mut();
                    for ch in 0..c {
                        let sb = dbeta.data()[ch];
                        let sg = dgamma.data()[ch];
                        let k = g[ch] * inv_std[ch] / m;
                        for i in 0..n {
                            let base = (i * c + ch) * plane;
                            for j in base..base + plane {
                                dxd[j] = k * (m * dyd[j] - sb - xhat[j] * sg);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = dy.dims4()?;
                let plane = h * w;
                let g = self.value(*gamma).data();
                let dyd = dy.data();
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let mut dx = Tensor::zeros(dy.shape());
                for ch in 0..c {
                    let k = g[ch] * inv_std[ch];
                    for i in 0..n {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            dgamma.data_mut()[ch] += dyd[j] * xhat[j];
                            dbeta.data_mut()[ch] += dyd[j];
                            dx.data_mut()[j] = dyd[j] * k;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu { x } => {
                let mut dx = dy.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, ho, wo) = dy.dims4()?;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dxd = dx.data_mut();
                for plane in 0..n * c {
                    for o in 0..ho * wo {
                        let src = plane * ho * wo + o;
                        dxd[plane * h * w + argmax[src] as usize] += dy.data()[src];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts } => {
                let counts: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
                let pieces = tensor::split_channels(dy, &counts)?;
                for (&p, piece) in parts.iter().zip(pieces) {
                    self.accumulate(grads, p, piece);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Mul { a, b } => {
                let mut da = dy.clone();
                for (d, v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *d *= *v;
                }
                let mut db = dy.clone();
                for (d, v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d *= *v;
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale { a, k } => {
                let mut da = dy.clone();
                for d in da.data_mut() {
                    *d *= *k;
                }
                self.accumulate(grads, *a, da);
            }
            Op::Exp { a } => {
                let mut da = dy.clone();
                for (d, y) in da.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= *y;
                }
                self.accumulate(grads, *a, da);
            }
            Op::WeightedCrossEntropy {
                logits,
                weights,
                targets,
                probs,
            } => {
                let (n, c, h, w) = self.value(*logits).dims4()?;
                let plane = h * w;
                let scale = dy.item() / (n * plane) as f32;
                let mut dz = Tensor::from_vec(&[n, c, h, w], probs.clone())?;
                let dzd = dz.data_mut();
                for i in 0..n {
                    for p in 0..plane {
                        let t = targets[i * plane + p] as usize;
                        let wp = weights[i * plane + p] * scale;
                        for ch in 0..c {
                            let j = (i * c + ch) * plane + p;
                            let onehot = if ch == t { 1.0 } else { 0.0 };
                            dzd[j] = wp * (dzd[j] - onehot);
                        }
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f32 / (1u64 << 31) as f32) - 0.5
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Central differences in f64 over the f32 forward pass, on a scalar loss
    /// built by `f` from a single parameter.
    fn check_grad(param: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let p = g.param(param.clone());
        let out = f(&mut g, p);
        let grads = g.backward(out).unwrap();
        let analytic = grads.get(p).unwrap().clone();
        let h = 1e-2f32;
        for i in 0..param.numel() {
            let mut plus = param.clone();
            plus.data_mut()[i] += h;
            let mut minus = param.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor| {
                let mut g = Graph::new();
                let p = g.param(t);
                let out = f(&mut g, p);
                g.value(out).item() as f64
            };
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h as f64);
            let a = analytic.data()[i] as f64;
            assert!(
                (a - numeric).abs() <= 2e-3 * (1.0 + numeric.abs()),
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    /// `<y, probe>` for a fixed pseudo-random probe; `y` must have batch size 1.
    fn sum_with(g: &mut Graph, y: Var, seed: u64) -> Var {
        let probe = g.constant(t(g.value(y).shape(), seed));
        let prod = g.mul(y, probe).unwrap();
        reduce_sum(g, prod)
    }

    /// Sum of all entries of a batch-1 tensor, via convolutions with ones.
    fn reduce_sum(g: &mut Graph, v: Var) -> Var {
        let (_, c, h, w) = g.value(v).dims4().unwrap();
        let ones_c = g.constant(Tensor::full(&[1, c, 1, 1], 1.0));
        let s = g.conv2d(v, ones_c, None, 1, 0).unwrap();
        let ones_hw = g.constant(Tensor::full(&[1, 1, h, w], 1.0));
        g.conv2d(s, ones_hw, None, 1, 0).unwrap()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = t(&[1, 2, 5, 5], 1);
        check_grad(t(&[3, 2, 3, 3], 2), |g, w| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, w, None, 1, 1).unwrap();
            sum_with(g, y, 3)
        });
        let w = t(&[3, 2, 3, 3], 4);
        check_grad(x.clone(), |g, xv| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
            sum_with(g, y, 5)
        });
    }

    #[test]
    fn transpose_conv_gradients_match_finite_differences() {
        let x = t(&[1, 2, 3, 3], 6);
        check_grad(t(&[2, 3, 2, 2], 7), |g, w| {
            let xv = g.constant(x.clone());
            let y = g.conv_transpose2d(xv, w, None, 2).unwrap();
            sum_with(g, y, 8)
        });
        let w = t(&[2, 3, 2, 2], 9);
        check_grad(x.clone(), |g, xv| {
            let wv = g.constant(w.clone());
            let y = g.conv_transpose2d(xv, wv, None, 2).unwrap();
            sum_with(g, y, 10)
        });
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let gamma = Tensor::from_vec(&[2], vec![1.3, 0.7]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        check_grad(t(&[1, 2, 3, 3], 11), |g, xv| {
            let gv = g.constant(gamma.clone());
            let bv = g.constant(beta.clone());
            let (y, _) = g.batch_norm(xv, gv, bv, None, 1e-5).unwrap();
            sum_with(g, y, 12)
        });
    }

    #[test]
    fn weighted_ce_gradient_matches_finite_differences() {
        let targets = vec![0u8, 1, 1, 0, 1, 0, 0, 1, 1];
        let weights = vec![1.0f32, 2.0, 0.5, 1.5, 1.0, 3.0, 0.2, 1.0, 2.5];
        check_grad(t(&[1, 2, 3, 3], 13), |g, z| {
            g.weighted_cross_entropy(z, &targets, &weights).unwrap()
        });
    }

    #[test]
    fn scalar_ops_chain() {
        // d/ds [exp(-s) * l + 0.5 s] = -exp(-s) l + 0.5
        let l = 2.0f32;
        let s0 = 0.3f32;
        let mut g = Graph::new();
        let s = g.param(Tensor::scalar(s0));
        let lv = g.param(Tensor::scalar(l));
        let neg = g.scale(s, -1.0);
        let e = g.exp(neg);
        let prod = g.mul(e, lv).unwrap();
        let half = g.scale(s, 0.5);
        let out = g.add(prod, half).unwrap();
        let grads = g.backward(out).unwrap();
        let expected = -(-s0).exp() * l + 0.5;
        assert!((grads.get(s).unwrap().item() - expected).abs() < 1e-6);
        assert!((grads.get(lv).unwrap().item() - (-s0).exp()).abs() < 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 4, 4], 1));
        let w = g.param(t(&[1, 1, 3, 3], 2));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = reduce_sum(&mut g, y);
        let grads = g.backward(out).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }
}
