//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so a node's inputs always have
//! smaller indices than the node itself. [`Tape::backward`] walks the tape
//! once from the loss towards the leaves and consumes it.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    ScaleBy(Var, Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Act(Var, Activation),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    MeanRows(Var),
    Gather(Var, Vec<usize>),
    CrossEntropy(Var, usize, Vec<T>),
    SquaredError(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`. `None` when `v` does not
    /// require gradients or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Like [`get`](Self::get) but materializes zeros for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn dims<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::shape(op, &[t.shape()]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((r, k), (k2, c)) = (dims(ta, "matmul")?, dims(tb, "matmul")?);
        if k != k2 {
            return Err(Error::shape("matmul", &[ta.shape(), tb.shape()]));
        }
        let mut out = vec![T::zero(); r * c];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * c..(p + 1) * c];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((r, k), (c, k2)) = (dims(ta, "matmul_t")?, dims(tb, "matmul_t")?);
        if k != k2 {
            return Err(Error::shape("matmul_t", &[ta.shape(), tb.shape()]));
        }
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let arow = ta.row(i);
            for j in 0..c {
                let mut s = T::zero();
                for (&x, &y) in arow.iter().zip(tb.row(j)) {
                    s = s + x * y;
                }
                out[i * c + j] = s;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a `1×c` row to every row of an `r×c` input.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (r, c) = dims(tx, "add_row")?;
        if dims(tb, "add_row")? != (1, c) {
            return Err(Error::shape("add_row", &[tx.shape(), tb.shape()]));
        }
        let b = tb.data();
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + b[j];
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(x, bias), rg))
    }

    /// Adds a constant tensor (e.g. an attention mask).
    pub fn add_const(&mut self, x: Var, k: &Tensor<T>) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != k.shape() {
            return Err(Error::shape("add_const", &[tx.shape(), k.shape()]));
        }
        let data = tx.data().iter().zip(k.data()).map(|(&a, &b)| a + b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AddConst(x), rg))
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, k: Vec<T>) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != k.len() {
            return Err(Error::shape("mul_const", &[tx.shape(), &[k.len()]]));
        }
        let data = tx.data().iter().zip(&k).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulConst(x, k), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Multiplies `x` by the scalar variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(Error::shape("scale_by", &[self.value(x).shape(), ts.shape()]));
        }
        let sv = ts.data()[0];
        let t = self.value(x).map(|v| v * sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::ScaleBy(x, s), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims(tx, "softmax_rows")?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = tx.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                z = z + e;
            }
            for v in &mut data[i * c..(i + 1) * c] {
                *v = *v / z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::SoftmaxRows(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = dims(tx, "layer_norm")?;
        if dims(tg, "layer_norm")? != (1, c) || dims(tb, "layer_norm")? != (1, c) {
            return Err(Error::shape("layer_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let n = T::lit(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().copied().fold(T::zero(), |a, b| a + b) / n;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let t = match act {
            Activation::Gelu => self.value(x).map(gelu),
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
        };
        let rg = self.rg(&[x]);
        self.push(t, Op::Act(x, act), rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_cols", &[]));
        }
        let shapes: Vec<(usize, usize)> =
            xs.iter().map(|&v| dims(self.value(v), "concat_cols")).collect::<Result<_>>()?;
        let r = shapes[0].0;
        if shapes.iter().any(|s| s.0 != r) {
            let all: Vec<&[usize]> = xs.iter().map(|&v| self.value(v).shape()).collect();
            return Err(Error::shape("concat_cols", &all));
        }
        let total: usize = shapes.iter().map(|s| s.1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(i));
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims(tx, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", &[tx.shape(), &[start, len]]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(x, start), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims(tx, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", &[tx.shape(), &[start, len]]));
        }
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows(x, start), rg))
    }

    /// Mean over rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = dims(tx, "mean_rows")?;
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for (d, &v) in data.iter_mut().zip(tx.row(i)) {
                *d = *d + v;
            }
        }
        let n = T::lit(r as f64);
        for d in &mut data {
            *d = *d / n;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(1, c, data)?, Op::MeanRows(x), rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, c) = dims(tt, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", &[tt.shape(), &[0]]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather_rows", &[tt.shape(), &[bad]]));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::matrix(ids.len(), c, data)?, Op::Gather(table, ids.to_vec()), rg))
    }

    /// Softmax cross-entropy of a single logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = dims(tl, "cross_entropy")?;
        if r != 1 || target >= c {
            return Err(Error::shape("cross_entropy", &[tl.shape(), &[target]]));
        }
        let row = tl.row(0);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
        let lse = m + z.ln();
        let probs: Vec<T> = row.iter().map(|&v| (v - m).exp() / z).collect();
        let loss = lse - row[target];
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, target, probs), rg))
    }

    /// `(pred - target)²` for a single-element prediction.
    pub fn squared_error(&mut self, pred: Var, target: T) -> Result<Var> {
        let tp = self.value(pred);
        if !tp.is_scalar() {
            return Err(Error::shape("squared_error", &[tp.shape()]));
        }
        let d = tp.data()[0] - target;
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(d * d), Op::SquaredError(pred, target), rg))
    }

    /// Runs the reverse pass from a scalar `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(lt.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.accumulate(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let shaped = |v: Var, data: Vec<T>| Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).unwrap();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k) = ta.dims2().unwrap();
                let c = tb.dims2().unwrap().1;
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); r * k];
                    for ii in 0..r {
                        let grow = &gd[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let mut s = T::zero();
                            for (&gv, &bv) in grow.iter().zip(tb.row(p)) {
                                s = s + gv * bv;
                            }
                            da[ii * k + p] = s;
                        }
                    }
                    send(*a, shaped(*a, da));
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * c];
                    for ii in 0..r {
                        let grow = &gd[ii * c..(ii + 1) * c];
                        for p in 0..k {
                            let av = ta.data()[ii * k + p];
                            for (d, &gv) in db[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                *d = *d + av * gv;
                            }
                        }
                    }
                    send(*b, shaped(*b, db));
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k) = ta.dims2().unwrap();
                let c = tb.dims2().unwrap().0;
                if self.requires_grad(*a) {
                    // dA = G · B
                    let mut da = vec![T::zero(); r * k];
                    for ii in 0..r {
                        for j in 0..c {
                            let gv = gd[ii * c + j];
                            for (d, &bv) in da[ii * k..(ii + 1) * k].iter_mut().zip(tb.row(j)) {
                                *d = *d + gv * bv;
                            }
                        }
                    }
                    send(*a, shaped(*a, da));
                }
                if self.requires_grad(*b) {
                    // dB = Gᵀ · A
                    let mut db = vec![T::zero(); c * k];
                    for ii in 0..r {
                        for j in 0..c {
                            let gv = gd[ii * c + j];
                            for (d, &av) in db[j * k..(j + 1) * k].iter_mut().zip(ta.row(ii)) {
                                *d = *d + gv * av;
                            }
                        }
                    }
                    send(*b, shaped(*b, db));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(x, bias) => {
                send(*x, g.clone());
                if self.requires_grad(*bias) {
                    let (r, c) = g.dims2().unwrap();
                    let mut db = vec![T::zero(); c];
                    for ii in 0..r {
                        for (d, &gv) in db.iter_mut().zip(&gd[ii * c..(ii + 1) * c]) {
                            *d = *d + gv;
                        }
                    }
                    send(*bias, shaped(*bias, db));
                }
            }
            Op::AddConst(x) => send(*x, g.clone()),
            Op::MulConst(x, k) => {
                let d = gd.iter().zip(k).map(|(&a, &b)| a * b).collect();
                send(*x, shaped(*x, d));
            }
            Op::Scale(x, s) => send(*x, g.map(|v| v * *s)),
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).data()[0];
                if self.requires_grad(*x) {
                    send(*x, g.map(|v| v * sv));
                }
                if self.requires_grad(*s) {
                    let xd = self.value(*x).data();
                    let dot = gd.iter().zip(xd).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
                    send(*s, shaped(*s, vec![dot]));
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (r, c) = y.dims2().unwrap();
                let mut dx = vec![T::zero(); r * c];
                for ii in 0..r {
                    let yr = y.row(ii);
                    let gr = &gd[ii * c..(ii + 1) * c];
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for j in 0..c {
                        dx[ii * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, shaped(*x, dx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, c) = node.value.dims2().unwrap();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for ii in 0..r {
                        for j in 0..c {
                            dg[j] = dg[j] + gd[ii * c + j] * xhat[ii * c + j];
                        }
                    }
                    send(*gamma, shaped(*gamma, dg));
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![T::zero(); c];
                    for ii in 0..r {
                        for j in 0..c {
                            db[j] = db[j] + gd[ii * c + j];
                        }
                    }
                    send(*beta, shaped(*beta, db));
                }
                if self.requires_grad(*x) {
                    let n = T::lit(c as f64);
                    let mut dx = vec![T::zero(); r * c];
                    for ii in 0..r {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let dh = gd[ii * c + j] * gam[j];
                            mean_d = mean_d + dh;
                            mean_dx = mean_dx + dh * xhat[ii * c + j];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for j in 0..c {
                            let dh = gd[ii * c + j] * gam[j];
                            dx[ii * c + j] = rstd[ii] * (dh - mean_d - xhat[ii * c + j] * mean_dx);
                        }
                    }
                    send(*x, shaped(*x, dx));
                }
            }
            Op::Act(x, act) => {
                let xd = self.value(*x).data();
                let d = match act {
                    Activation::Gelu => gd.iter().zip(xd).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect(),
                    Activation::Relu => gd
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect(),
                };
                send(*x, shaped(*x, d));
            }
            Op::ConcatCols(xs) => {
                let (r, total) = g.dims2().unwrap();
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).dims2().unwrap().1;
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(r * c);
                        for ii in 0..r {
                            d.extend_from_slice(&gd[ii * total + offset..ii * total + offset + c]);
                        }
                        send(v, shaped(v, d));
                    }
                    offset += c;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let len = g.dims2().unwrap().1;
                let mut d = vec![T::zero(); r * c];
                for ii in 0..r {
                    d[ii * c + start..ii * c + start + len].copy_from_slice(&gd[ii * len..(ii + 1) * len]);
                }
                send(*x, shaped(*x, d));
            }
            Op::SliceRows(x, start) => {
                let c = self.value(*x).dims2().unwrap().1;
                let mut d = vec![T::zero(); self.value(*x).numel()];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                send(*x, shaped(*x, d));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let n = T::lit(r as f64);
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(gd.iter().map(|&v| v / n));
                }
                send(*x, shaped(*x, d));
            }
            Op::Gather(table, ids) => {
                let tt = self.value(*table);
                let c = tt.dims2().unwrap().1;
                let mut d = vec![T::zero(); tt.numel()];
                for (ii, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[id * c + j] = d[id * c + j] + gd[ii * c + j];
                    }
                }
                send(*table, shaped(*table, d));
            }
            Op::CrossEntropy(logits, target, probs) => {
                let gv = gd[0];
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(j, &p)| gv * if j == *target { p - T::one() } else { p })
                    .collect();
                send(*logits, shaped(*logits, d));
            }
            Op::SquaredError(pred, target) => {
                let p = self.value(*pred).data()[0];
                let two = T::lit(2.0);
                send(*pred, shaped(*pred, vec![gd[0] * two * (p - *target)]));
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh approximation of GELU.
fn gelu<T: Real>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}
