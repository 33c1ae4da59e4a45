use std::sync::Arc;

use super::tensor::{gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{contract_err, shape_err, Result};
use crate::Scalar;

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.01;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddRow(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    LeakyRelu(Var, S),
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Softmax(Var),
    Conv2d { input: Var, weight: Var, bias: Var, spec: Conv2dSpec },
    MeanPool(Var),
    Rope { a: Var, cos: Arc<Vec<S>>, sin: Arc<Vec<S>> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Operations are appended in execution order, so
/// the node list is always topologically sorted.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<S>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if reachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `a[m×n] + b` with `b` (n elements) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(b).len() != n {
            return Err(shape_err!("add_row: bias of {} elements for {} columns", self.value(b).len(), n));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddRow(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Contiguous slice of a 2-D tensor along `axis` (0 = rows, 1 = columns).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let extent = if axis == 0 { m } else if axis == 1 { n } else { return Err(shape_err!("slice axis {axis}")) };
        if start + len > extent {
            return Err(shape_err!("slice {start}..{} out of bounds for extent {extent}", start + len));
        }
        let src = self.value(a).data();
        let out = if axis == 0 {
            Tensor::new(&[len, n], src[start * n..(start + len) * n].to_vec())?
        } else {
            let mut d = Vec::with_capacity(m * len);
            for i in 0..m {
                d.extend_from_slice(&src[i * n + start..i * n + start + len]);
            }
            Tensor::new(&[m, len], d)?
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Slice { a, axis, start }, rg))
    }

    /// Concatenation of 2-D tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat of zero tensors"));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims2(p)).collect::<Result<_>>()?;
        let out = match axis {
            0 => {
                let n = dims[0].1;
                if dims.iter().any(|d| d.1 != n) {
                    return Err(shape_err!("concat rows: column counts differ {:?}", dims));
                }
                let m: usize = dims.iter().map(|d| d.0).sum();
                let mut d = Vec::with_capacity(m * n);
                for &p in parts {
                    d.extend_from_slice(self.value(p).data());
                }
                Tensor::new(&[m, n], d)?
            }
            1 => {
                let m = dims[0].0;
                if dims.iter().any(|d| d.0 != m) {
                    return Err(shape_err!("concat cols: row counts differ {:?}", dims));
                }
                let n: usize = dims.iter().map(|d| d.1).sum();
                let mut d = Vec::with_capacity(m * n);
                for i in 0..m {
                    for &p in parts {
                        d.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(&[m, n], d)?
            }
            _ => return Err(shape_err!("concat axis {axis}")),
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let slope = S::of(LEAKY_SLOPE);
        let out = self.value(a).map(|x| if x > S::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    /// Per-row layer normalization with learnable gain and bias (n elements each).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err!("layer_norm: gain/bias must have {n} elements"));
        }
        let eps = S::of(LAYER_NORM_EPS);
        let x = self.value(a).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nn = S::of_usize(n);
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<S>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::LayerNorm { a, gain, bias, xhat, inv_std }, rg))
    }

    /// Row-wise softmax, stabilized by row-max subtraction. Entries that are
    /// `-inf` or disallowed by `mask` (row-major, `true` = attend) get weight 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(shape_err!("softmax mask has {} entries for {m}x{n}", mk.len()));
            }
        }
        let out = softmax_rows_raw(self.value(a).data(), m, n, mask);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Softmax(a), rg))
    }

    /// Batched 2-D convolution. `input` is `[B, C, H, W]`, `weight` is
    /// `[O, C, K, K]`, `bias` has `O` elements.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        let g = conv_geometry(self.shape(input), self.shape(weight), spec)?;
        if self.value(bias).len() != g.o {
            return Err(shape_err!("conv2d bias has {} elements, expected {}", self.value(bias).len(), g.o));
        }
        let out = conv2d_forward(self.value(input).data(), self.value(weight).data(), self.value(bias).data(), &g);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Tensor::new(&[g.b, g.o, g.ho, g.wo], out)?, Op::Conv2d { input, weight, bias, spec }, rg))
    }

    /// `[B, C, H, W]` → `[B, C]` spatial mean.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let (b, c, hw) = match self.shape(a) {
            [b, c, h, w] => (*b, *c, h * w),
            s => return Err(shape_err!("mean_pool expects [B,C,H,W], got {:?}", s)),
        };
        let x = self.value(a).data();
        let inv = S::one() / S::of_usize(hw);
        let out: Vec<S> = (0..b * c).map(|i| x[i * hw..(i + 1) * hw].iter().copied().sum::<S>() * inv).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[b, c], out)?, Op::MeanPool(a), rg))
    }

    /// Rotates consecutive feature pairs `(2c, 2c+1)` of each row by the angle
    /// whose cosine/sine are given (`rows × cols/2`, row-major).
    pub fn rope(&mut self, a: Var, cos: Arc<Vec<S>>, sin: Arc<Vec<S>>) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if n % 2 != 0 || cos.len() != m * n / 2 || sin.len() != m * n / 2 {
            return Err(shape_err!("rope: {m}x{n} input with {} phases", cos.len()));
        }
        let x = self.value(a).data();
        let half = n / 2;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for c in 0..half {
                let (co, si) = (cos[i * half + c], sin[i * half + c]);
                let (re, im) = (x[i * n + 2 * c], x[i * n + 2 * c + 1]);
                out[i * n + 2 * c] = re * co - im * si;
                out[i * n + 2 * c + 1] = re * si + im * co;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Rope { a, cos, sin }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / S::of_usize(v.len().max(1));
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let n = S::of_usize(x.len().max(1));
        let s = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum::<S>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    /// Populates gradients of every node reachable from `loss`, which must be
    /// a single-element tensor. Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

fn accumulate<S: Scalar>(nodes: &[Node<S>], grads: &mut [Option<Tensor<S>>], v: Var, delta: Vec<S>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, d) in g.data_mut().iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(nodes[v.0].value.shape(), delta).expect("gradient shape"));
        }
    }
}

fn backprop<S: Scalar>(nodes: &[Node<S>], i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
    let gd = g.data();
    let val = |v: Var| -> &Tensor<S> { &nodes[v.0].value };
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, gd.to_vec());
            accumulate(nodes, grads, *b, gd.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, gd.to_vec());
            accumulate(nodes, grads, *b, gd.iter().map(|&x| -x).collect());
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let d = gd.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *a, d);
            }
            if rg(*b) {
                let d = gd.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, grads, *b, d);
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, gd.iter().map(|&x| x * *s).collect()),
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, gd.to_vec());
            if rg(*b) {
                let (m, n) = g.dims2()?;
                let mut d = vec![S::zero(); n];
                for r in 0..m {
                    for j in 0..n {
                        d[j] += gd[r * n + j];
                    }
                }
                accumulate(nodes, grads, *b, d);
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let n = val(*b).dims2()?.1;
            if rg(*a) {
                let mut d = vec![S::zero(); m * k];
                gemm_bt_acc(gd, val(*b).data(), &mut d, m, n, k);
                accumulate(nodes, grads, *a, d);
            }
            if rg(*b) {
                let mut d = vec![S::zero(); k * n];
                gemm_at_acc(val(*a).data(), gd, &mut d, k, m, n);
                accumulate(nodes, grads, *b, d);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()?.into_data()),
        Op::Reshape(a) => accumulate(nodes, grads, *a, gd.to_vec()),
        Op::Slice { a, axis, start } => {
            let (m, n) = val(*a).dims2()?;
            let (_, gn) = g.dims2()?;
            let mut d = vec![S::zero(); m * n];
            if *axis == 0 {
                d[start * n..start * n + gd.len()].copy_from_slice(gd);
            } else {
                for r in 0..m {
                    d[r * n + start..r * n + start + gn].copy_from_slice(&gd[r * gn..(r + 1) * gn]);
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Concat { parts, axis } => {
            let (m, n) = g.dims2()?;
            let mut offset = 0;
            for &p in parts {
                let (pm, pn) = val(p).dims2()?;
                if rg(p) {
                    let d = if *axis == 0 {
                        gd[offset * n..(offset + pm) * n].to_vec()
                    } else {
                        let mut d = Vec::with_capacity(pm * pn);
                        for r in 0..m {
                            d.extend_from_slice(&gd[r * n + offset..r * n + offset + pn]);
                        }
                        d
                    };
                    accumulate(nodes, grads, p, d);
                }
                offset += if *axis == 0 { pm } else { pn };
            }
        }
        Op::LeakyRelu(a, slope) => {
            let d = gd
                .iter()
                .zip(val(*a).data())
                .map(|(&x, &v)| if v > S::zero() { x } else { x * *slope })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
            let (m, n) = g.dims2()?;
            let gv = val(*gain).data();
            if rg(*gain) || rg(*bias) {
                let mut dg = vec![S::zero(); n];
                let mut db = vec![S::zero(); n];
                for r in 0..m {
                    for j in 0..n {
                        dg[j] += gd[r * n + j] * xhat[r * n + j];
                        db[j] += gd[r * n + j];
                    }
                }
                accumulate(nodes, grads, *gain, dg);
                accumulate(nodes, grads, *bias, db);
            }
            if rg(*a) {
                let nn = S::of_usize(n);
                let mut d = vec![S::zero(); m * n];
                for r in 0..m {
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for j in 0..n {
                        let dh = gd[r * n + j] * gv[j];
                        s1 += dh;
                        s2 += dh * xhat[r * n + j];
                    }
                    for j in 0..n {
                        let dh = gd[r * n + j] * gv[j];
                        d[r * n + j] = inv_std[r] / nn * (nn * dh - s1 - xhat[r * n + j] * s2);
                    }
                }
                accumulate(nodes, grads, *a, d);
            }
        }
        Op::Softmax(a) => {
            let y = nodes[i].value.data();
            let (m, n) = g.dims2()?;
            let mut d = vec![S::zero(); m * n];
            for r in 0..m {
                let row = r * n..(r + 1) * n;
                let dot: S = gd[row.clone()].iter().zip(&y[row.clone()]).map(|(&p, &q)| p * q).sum();
                for j in row {
                    d[j] = y[j] * (gd[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Conv2d { input, weight, bias, spec } => {
            let geo = conv_geometry(val(*input).shape(), val(*weight).shape(), *spec)?;
            let (di, dw, db) = conv2d_backward(val(*input).data(), val(*weight).data(), gd, &geo, rg(*input), rg(*weight));
            if let Some(di) = di {
                accumulate(nodes, grads, *input, di);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *weight, dw);
            }
            accumulate(nodes, grads, *bias, db);
        }
        Op::MeanPool(a) => {
            let hw: usize = val(*a).shape()[2..].iter().product();
            let inv = S::one() / S::of_usize(hw);
            let d = gd.iter().flat_map(|&x| std::iter::repeat_n(x * inv, hw)).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Rope { a, cos, sin } => {
            let (m, n) = g.dims2()?;
            let half = n / 2;
            let mut d = vec![S::zero(); m * n];
            for r in 0..m {
                for c in 0..half {
                    let (co, si) = (cos[r * half + c], sin[r * half + c]);
                    let (g0, g1) = (gd[r * n + 2 * c], gd[r * n + 2 * c + 1]);
                    d[r * n + 2 * c] = g0 * co + g1 * si;
                    d[r * n + 2 * c + 1] = -g0 * si + g1 * co;
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![gd[0]; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len();
            accumulate(nodes, grads, *a, vec![gd[0] / S::of_usize(n.max(1)); n]);
        }
        Op::Mse(a, b) => {
            let (x, y) = (val(*a).data(), val(*b).data());
            let k = S::of(2.0) * gd[0] / S::of_usize(x.len().max(1));
            let d: Vec<S> = x.iter().zip(y).map(|(&p, &q)| (p - q) * k).collect();
            if rg(*b) {
                accumulate(nodes, grads, *b, d.iter().map(|&v| -v).collect());
            }
            accumulate(nodes, grads, *a, d);
        }
    }
    Ok(())
}

pub(crate) fn softmax_rows_raw<S: Scalar>(x: &[S], m: usize, n: usize, mask: Option<&[bool]>) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    let allowed = |idx: usize| mask.is_none_or(|mk| mk[idx]) && x[idx] != S::neg_infinity();
    for r in 0..m {
        let row = r * n..(r + 1) * n;
        let mut mx = S::neg_infinity();
        for j in row.clone() {
            if allowed(j) && x[j] > mx {
                mx = x[j];
            }
        }
        if mx == S::neg_infinity() {
            continue;
        }
        let mut total = S::zero();
        for j in row.clone() {
            if allowed(j) {
                let e = (x[j] - mx).exp();
                out[j] = e;
                total += e;
            }
        }
        for j in row {
            out[j] /= total;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry(input: &[usize], weight: &[usize], spec: Conv2dSpec) -> Result<ConvGeometry> {
    let [b, c, h, w] = *input else {
        return Err(shape_err!("conv2d input must be [B,C,H,W], got {:?}", input));
    };
    let [o, c2, k, k2] = *weight else {
        return Err(shape_err!("conv2d weight must be [O,C,K,K], got {:?}", weight));
    };
    if c != c2 || k != k2 || spec.stride == 0 {
        return Err(shape_err!("conv2d: input {:?} incompatible with weight {:?}", input, weight));
    }
    if h + 2 * spec.padding < k || w + 2 * spec.padding < k {
        return Err(shape_err!("conv2d kernel {k} larger than padded input {h}x{w}"));
    }
    let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
    let wo = (w + 2 * spec.padding - k) / spec.stride + 1;
    Ok(ConvGeometry { b, c, h, w, o, k, ho, wo, stride: spec.stride, pad: spec.padding })
}

/// Output index range `[lo, hi)` for which `out*stride + tap - pad` lands in `[0, extent)`.
fn valid_range(tap: usize, pad: usize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if extent + pad > tap { (extent + pad - tap).div_ceil(stride).min(out_extent) } else { 0 };
    (lo, hi.max(lo))
}

fn conv2d_forward<S: Scalar>(x: &[S], wt: &[S], bias: &[S], g: &ConvGeometry) -> Vec<S> {
    let plane_out = g.ho * g.wo;
    let mut out = vec![S::zero(); g.b * g.o * plane_out];
    for bi in 0..g.b {
        for oc in 0..g.o {
            let obase = (bi * g.o + oc) * plane_out;
            out[obase..obase + plane_out].iter_mut().for_each(|v| *v = bias[oc]);
            for ic in 0..g.c {
                let xplane = &x[(bi * g.c + ic) * g.h * g.w..(bi * g.c + ic + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let (ylo, yhi) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
                    for kx in 0..g.k {
                        let wv = wt[((oc * g.c + ic) * g.k + ky) * g.k + kx];
                        let (xlo, xhi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &xplane[iy * g.w..(iy + 1) * g.w];
                            let orow = &mut out[obase + oy * g.wo..obase + (oy + 1) * g.wo];
                            for ox in xlo..xhi {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

type ConvGrads<S> = (Option<Vec<S>>, Option<Vec<S>>, Vec<S>);

fn conv2d_backward<S: Scalar>(x: &[S], wt: &[S], gd: &[S], g: &ConvGeometry, want_x: bool, want_w: bool) -> ConvGrads<S> {
    let plane_out = g.ho * g.wo;
    let mut dx = want_x.then(|| vec![S::zero(); x.len()]);
    let mut dw = want_w.then(|| vec![S::zero(); wt.len()]);
    let mut db = vec![S::zero(); g.o];
    for bi in 0..g.b {
        for (oc, dbo) in db.iter_mut().enumerate() {
            let obase = (bi * g.o + oc) * plane_out;
            let gplane = &gd[obase..obase + plane_out];
            *dbo += gplane.iter().copied().sum::<S>();
            for ic in 0..g.c {
                let xoff = (bi * g.c + ic) * g.h * g.w;
                for ky in 0..g.k {
                    let (ylo, yhi) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
                    for kx in 0..g.k {
                        let widx = ((oc * g.c + ic) * g.k + ky) * g.k + kx;
                        let wv = wt[widx];
                        let (xlo, xhi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                        let mut acc = S::zero();
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                            let rbase = xoff + iy * g.w;
                            if dw.is_some() {
                                for ox in xlo..xhi {
                                    acc += grow[ox] * x[rbase + ox * g.stride + kx - g.pad];
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                for ox in xlo..xhi {
                                    dx[rbase + ox * g.stride + kx - g.pad] += wv * grow[ox];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
