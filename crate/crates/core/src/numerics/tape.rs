use super::kernels;
use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Sum(Var),
    MeanRows(Var),
    SumSquares(Var),
    SumAbs(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Learned projections of one multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Define-by-run record of differentiable operations.
///
/// Ops whose inputs are all constants are stored as constants themselves, so
/// a graph built from non-trainable values records nothing to replay.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like its value when `v` is not on
    /// the path to the loss.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt inner dimensions differ: {m}x{k} by ({n}x{k2})^T"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            false,
            true,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            false,
        );
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::MatMulNt { a, b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(bias).numel() != c {
            return Err(Error::shape(format!(
                "bias of {} elements for {c} columns",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c.max(1)).take(r) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v = *v + bb;
            }
        }
        let value = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let src = self.value(x);
        let value = Tensor::from_parts(
            src.shape().to_vec(),
            src.data().iter().map(|&v| v * s).collect(),
        );
        self.push(value, Op::Scale(x, s), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if start > end || end > c {
            return Err(Error::shape(format!("column slice {start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let value = Tensor::from_parts(vec![r, w], data);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let r = self.dims2(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(Error::shape(format!("concat_cols: {pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_parts(vec![r, total], data);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let c = self.dims2(first)?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pc != c {
                return Err(Error::shape(format!("concat_rows: {pc} cols vs {c}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_parts(vec![rows, c], data);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(idx)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        let d = *src
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm on rank-0"))?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != d || b.numel() != d {
            return Err(Error::shape(format!(
                "layer_norm gain/bias must have {d} elements"
            )));
        }
        let ln = kernels::layer_norm(src.data(), d, g.data(), b.data(), T::from_f64(eps));
        let value = Tensor::from_parts(src.shape().to_vec(), ln.out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: ln.xhat,
                rstd: ln.rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).gelu();
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Column means of a matrix, as a `1 x c` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if r == 0 {
            return Err(Error::shape("mean over zero rows"));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + src[i * c + j];
            }
        }
        let inv = T::one() / T::from_f64(r as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        let value = Tensor::from_parts(vec![1, c], out);
        Ok(self.push(value, Op::MeanRows(x), &[x]))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn sum_abs(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::SumAbs(x), &[x])
    }

    /// `-log softmax(logits)[label]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data();
        if label >= z.len() {
            return Err(Error::shape(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let probs = kernels::softmax(z, 1, z.len(), 1);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - z[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Multi-head scaled dot-product attention; self-attention when
    /// `q_src == kv_src`. Output has `q_src`'s row count.
    pub fn attention(
        &mut self,
        q_src: Var,
        kv_src: Var,
        p: &AttentionParams,
        heads: usize,
    ) -> Result<Var> {
        Ok(self.attention_with_weights(q_src, kv_src, p, heads)?.0)
    }

    /// [`Tape::attention`], also returning the per-head weight matrices.
    pub fn attention_with_weights(
        &mut self,
        q_src: Var,
        kv_src: Var,
        p: &AttentionParams,
        heads: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.dims2(q_src)?.1;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("width {d} not divisible by {heads} heads")));
        }
        let q = self.matmul(q_src, p.wq)?;
        let q = self.add_bias(q, p.bq)?;
        let k = self.matmul(kv_src, p.wk)?;
        let k = self.add_bias(k, p.bk)?;
        let v = self.matmul(kv_src, p.wv)?;
        let v = self.add_bias(v, p.bv)?;
        let inner = self.dims2(q)?.1;
        if inner % heads != 0 {
            return Err(Error::shape(format!(
                "projection width {inner} not divisible by {heads} heads"
            )));
        }
        let dh = inner / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = self.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = self.slice_cols(v, h * dh, (h + 1) * dh)?;
            let scores = self.matmul_nt(qh, kh)?;
            let scores = self.scale(scores, scale);
            let w = self.softmax(scores, 1)?;
            outs.push(self.matmul(w, vh)?);
            weights.push(w);
        }
        let merged = if heads == 1 {
            outs[0]
        } else {
            self.concat_cols(&outs)?
        };
        let out = self.matmul(merged, p.wo)?;
        Ok((self.add_bias(out, p.bo)?, weights))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e = *e + x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.cols();
                if rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(false, true, m, n, k, dy, val(*b), &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(true, false, k, m, n, val(*a), dy, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.rows();
                if rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(false, false, m, n, k, dy, val(*b), &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm(true, false, n, m, k, dy, val(*a), &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let g = dy.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, g);
                }
                if rg(*b) {
                    let g = dy.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, dy.to_vec());
                if rg(*bias) {
                    let c = self.nodes[bias.0].value.numel();
                    let mut db = vec![T::zero(); c];
                    for row in dy.chunks(c.max(1)) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, dy.iter().map(|&g| g * *s).collect());
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2().unwrap();
                self.accumulate(grads, *x, kernels::transpose(dy, r, c));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, dy.to_vec()),
            Op::SliceCols { x, start } => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let w = node.value.cols();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if rg(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(grads, p, dy[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let src = &self.nodes[x.0].value;
                let c = src.cols();
                let mut dx = vec![T::zero(); src.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] = dx[i * c + j] + dy[k * c + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis).unwrap();
                let dx = kernels::softmax_backward(node.value.data(), dy, outer, len, inner);
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gain.0].value.numel();
                let (dx, dgain, dbias) =
                    kernels::layer_norm_backward(dy, xhat, rstd, val(*gain), d);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Gelu(x) => {
                let g = dy
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let inv = T::one() / T::from_f64(r as f64);
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend(dy.iter().map(|&g| g * inv));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumSquares(x) => {
                let two = T::from_f64(2.0);
                let g = val(*x).iter().map(|&v| two * v * dy[0]).collect();
                self.accumulate(grads, *x, g);
            }
            Op::SumAbs(x) => {
                let g = val(*x)
                    .iter()
                    .map(|&v| {
                        let s = if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        s * dy[0]
                    })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let g = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let t = if i == *label { T::one() } else { T::zero() };
                        (p - t) * dy[0]
                    })
                    .collect();
                self.accumulate(grads, *logits, g);
            }
        }
    }
}
