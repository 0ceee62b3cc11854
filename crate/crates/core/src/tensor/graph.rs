use super::conv::{self, ConvGeom};
use super::{strides, Conv2dSpec, Element, Tensor};
use crate::error::{dim_err, domain_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running mean and (unbiased) variance for batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    HFlip(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        broadcast_b: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        s: Var,
    },
    MulConst(Var, T),
    AddBias {
        x: Var,
        bias: Var,
    },
    Sum(Var),
    Square(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of recorded operations. Nodes are appended in creation order, so the
/// reverse of that order is always a valid topological order for backward.
#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    /// Record a leaf; gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    /// Record a leaf whose gradient is always tracked.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let t = Tensor::new(tensor.shape(), tensor.data().to_vec())
            .expect("tensor invariants already hold");
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, data: Vec<T>, op: Op<T>) -> Var {
        let t = Tensor::new(self.shape(x), data).expect("shape preserved");
        let rg = self.tracked(&[x]);
        self.push(t, op, rg)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.shape(x),
            self.shape(kernel),
            bias.map(|b| self.shape(b)),
            spec,
        )?;
        let out = conv::forward(
            &geom,
            self.data(x),
            self.data(kernel),
            bias.map(|b| self.data(b)),
        );
        let t = Tensor::new(&geom.out_shape(), out)?;
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.tracked(&deps);
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Mirror along the last axis.
    pub fn hflip(&mut self, x: Var) -> Result<Var> {
        let data = flip_last(self.value(x));
        Ok(self.unary(x, data, Op::HFlip(x)))
    }

    /// Matrix product over the last two axes. Leading axes must match, or
    /// `b` may be rank 2 and is then shared across every batch of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err!("matmul needs rank >= 2, got {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {sa:?} x {sb:?}"
            ));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let broadcast_b = lead_b.is_empty() && !lead_a.is_empty();
        if !broadcast_b && lead_a != lead_b {
            return Err(dim_err!(
                "matmul batch axes differ: {sa:?} x {sb:?}"
            ));
        }
        let batch: usize = lead_a.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a_blk = &da[bi * m * k..][..m * k];
            let b_blk = if broadcast_b { db } else { &db[bi * k * n..][..k * n] };
            let o_blk = &mut out[bi * m * n..][..m * n];
            gemm_acc(a_blk, b_blk, o_blk, m, k, n);
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(&shape, out)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                broadcast_b,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| src[at(j)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Ok(self.unary(x, out, Op::Softmax { x, outer, len, inner }))
    }

    /// Batch norm over `[N, C, H, W]`. In training mode the batch statistics
    /// normalize the input and are folded into `stats` with the given momentum.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        training: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(dim_err!("batchnorm2d expects [N,C,H,W], got {shape:?}"));
        }
        if eps <= 0.0 {
            return Err(domain_err!("batchnorm2d eps must be positive"));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(dim_err!(
                    "batchnorm2d {what} shape {:?}, expected [{c}]",
                    self.shape(v)
                ));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(dim_err!("batchnorm2d running stats do not cover {c} channels"));
        }
        let count = n * hw;
        if training && count == 1 {
            return Err(domain_err!(
                "batchnorm2d in training mode needs more than one value per channel"
            ));
        }
        let src = self.data(x);
        let eps_t = T::of(eps);
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        for ch in 0..c {
            if training {
                let vals = (0..n).flat_map(|b| src[(b * c + ch) * hw..][..hw].iter().copied());
                let mu = vals.clone().sum::<T>() / T::of(count as f64);
                let var = vals.map(|v| (v - mu) * (v - mu)).sum::<T>() / T::of(count as f64);
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var + eps_t).sqrt();
                let m = T::of(momentum);
                let unbiased = var * T::of(count as f64 / (count - 1) as f64);
                stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * mu;
                stats.var[ch] = (T::one() - m) * stats.var[ch] + m * unbiased;
            } else {
                mean[ch] = stats.mean[ch];
                inv_std[ch] = T::one() / (stats.var[ch] + eps_t).sqrt();
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        ))
    }

    /// Layer norm over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("tensors have rank >= 1");
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [d] {
                return Err(dim_err!(
                    "layernorm {what} shape {:?}, expected [{d}]",
                    self.shape(v)
                ));
            }
        }
        if eps <= 0.0 {
            return Err(domain_err!("layernorm eps must be positive"));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let tokens = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); tokens];
        for t in 0..tokens {
            let row = &src[t * d..][..d];
            let mu = row.iter().copied().sum::<T>() / T::of(d as f64);
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / T::of(d as f64);
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std[t] = is;
            for j in 0..d {
                let xh = (row[j] - mu) * is;
                xhat[t * d + j] = xh;
                out[t * d + j] = g[j] * xh + b[j];
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v * std_normal_cdf(v)).collect();
        self.unary(x, data, Op::Gelu(x))
    }

    /// Mean over the two spatial axes of `[N, C, H, W]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(dim_err!("global_avg_pool expects [N,C,H,W], got {shape:?}"));
        }
        let hw = shape[2] * shape[3];
        let data: Vec<T> = self
            .data(x)
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() / T::of(hw as f64))
            .collect();
        let t = Tensor::new(&shape[..2], data)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.tracked(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiply every entry of `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err!("scale factor must hold one value, got {:?}", self.shape(s)));
        }
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|&v| v * sv).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.tracked(&[x, s]);
        Ok(self.push(t, Op::Scale { x, s }, rg))
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let data = self.data(x).iter().map(|&v| v * c).collect();
        self.unary(x, data, Op::MulConst(x, c))
    }

    /// Add a `[D]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.shape(bias) != [d] {
            return Err(dim_err!(
                "bias shape {:?} does not match last axis {d}",
                self.shape(bias)
            ));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % d])
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.tracked(&[x, bias]);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.mul_const(s, T::of(1.0 / n as f64))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v * v).collect();
        self.unary(x, data, Op::Square(x))
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(dim_err!("invalid permutation {axes:?} for shape {shape:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.data(x), &shape, axes);
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a single-element `loss`. Gradients from a
    /// previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = self.grads[id].take() else {
                continue;
            };
            if !self.nodes[id].value.requires_grad {
                self.grads[id] = Some(gout);
                continue;
            }
            for (input, g) in self.local_grads(id, &gout) {
                debug_assert!(input.0 < id, "tape order violated");
                if !self.nodes[input.0].value.requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, gout: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let (gx, gk, gb) = conv::backward(geom, self.data(*x), self.data(*kernel), gout);
                let mut v = vec![(*x, gx), (*kernel, gk)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::HFlip(x) => {
                let g = Tensor::new(node.value.shape(), gout.to_vec()).expect("shape");
                vec![(*x, flip_last(&g))]
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                broadcast_b,
            } => {
                let (da, db) = (self.data(a), self.data(b));
                let mut ga = vec![T::zero(); da.len()];
                let mut gb = vec![T::zero(); db.len()];
                for bi in 0..batch {
                    let a_blk = &da[bi * m * k..][..m * k];
                    let boff = if broadcast_b { 0 } else { bi * k * n };
                    let b_blk = &db[boff..][..k * n];
                    let g_blk = &gout[bi * m * n..][..m * n];
                    let ga_blk = &mut ga[bi * m * k..][..m * k];
                    // dA = dC * B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc = acc + g_blk[i * n + j] * b_blk[p * n + j];
                            }
                            ga_blk[i * k + p] = acc;
                        }
                    }
                    // dB += A^T * dC
                    let gb_blk = &mut gb[boff..][..k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a_blk[i * k + p];
                            for j in 0..n {
                                gb_blk[p * n + j] = gb_blk[p * n + j] + av * g_blk[i * n + j];
                            }
                        }
                    }
                }
                vec![(a, ga), (b, gb)]
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).map(|j| gout[at(j)] * y[at(j)]).sum::<T>();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                vec![(x, gx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = node.value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let g = self.data(*gamma);
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); xhat.len()];
                let count = T::of((n * hw) as f64);
                for ch in 0..c {
                    let idx = || (0..n).flat_map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw);
                    let (mut sdy, mut sdyx) = (T::zero(), T::zero());
                    for i in idx() {
                        sdy = sdy + gout[i];
                        sdyx = sdyx + gout[i] * xhat[i];
                    }
                    gg[ch] = sdyx;
                    gbeta[ch] = sdy;
                    let k = g[ch] * inv_std[ch];
                    for i in idx() {
                        gx[i] = if *training {
                            k * (gout[i] - sdy / count - xhat[i] * sdyx / count)
                        } else {
                            k * gout[i]
                        };
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let g = self.data(*gamma);
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut gx = vec![T::zero(); xhat.len()];
                let df = T::of(d as f64);
                for (t, &is) in inv_std.iter().enumerate() {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..d {
                        let i = t * d + j;
                        let dxh = gout[i] * g[j];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xhat[i];
                        gg[j] = gg[j] + gout[i] * xhat[i];
                        gbeta[j] = gbeta[j] + gout[i];
                    }
                    for j in 0..d {
                        let i = t * d + j;
                        gx[i] = is * (gout[i] * g[j] - s1 / df - xhat[i] * s2 / df);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::Gelu(x) => {
                let inv_sqrt_2pi = T::of(0.398_942_280_401_432_7);
                let gx = self
                    .data(*x)
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| {
                        let pdf = inv_sqrt_2pi * (-(v * v) * T::of(0.5)).exp();
                        g * (std_normal_cdf(v) + v * pdf)
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::of(1.0 / hw as f64);
                let gx = gout
                    .iter()
                    .flat_map(|&g| std::iter::repeat(g * inv).take(hw))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Sub(a, b) => vec![(*a, gout.to_vec()), (*b, gout.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                vec![
                    (*a, gout.iter().zip(db).map(|(&g, &y)| g * y).collect()),
                    (*b, gout.iter().zip(da).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale { x, s } => {
                let sv = self.data(*s)[0];
                let dx = self.data(*x);
                let gs = gout.iter().zip(dx).map(|(&g, &v)| g * v).sum::<T>();
                vec![(*x, gout.iter().map(|&g| g * sv).collect()), (*s, vec![gs])]
            }
            Op::MulConst(x, c) => vec![(*x, gout.iter().map(|&g| g * *c).collect())],
            Op::AddBias { x, bias } => {
                let d = self.shape(*bias)[0];
                let mut gb = vec![T::zero(); d];
                for (i, &g) in gout.iter().enumerate() {
                    gb[i % d] = gb[i % d] + g;
                }
                vec![(*x, gout.to_vec()), (*bias, gb)]
            }
            Op::Sum(x) => vec![(*x, vec![gout[0]; self.value(*x).len()])],
            Op::Square(x) => {
                let two = T::of(2.0);
                let gx = self.data(*x).iter().zip(gout).map(|(&v, &g)| two * v * g).collect();
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, gout.to_vec())],
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, permute_data(gout, node.value.shape(), &inverse))]
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]` on row-major blocks.
fn gemm_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..][..n];
            for j in 0..n {
                row[j] = row[j] + av * brow[j];
            }
        }
    }
}

pub(crate) fn std_normal_cdf<T: Element>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn flip_last<T: Element>(t: &Tensor<T>) -> Vec<T> {
    let w = *t.shape().last().expect("rank >= 1");
    t.data()
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

fn permute_data<T: Element>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += gather[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= gather[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
