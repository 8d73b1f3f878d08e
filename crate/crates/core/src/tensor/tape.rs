use std::rc::Rc;

use super::{numel, Real, SparseMatrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    SafeDiv {
        a: Var,
        b: Var,
        min: T,
    },
    Scale(Var, T),
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        sizes: Vec<usize>,
        inner: usize,
    },
    Sum(Var),
    Mean(Var),
    SumLast {
        a: Var,
        width: usize,
    },
    Abs(Var),
    Relu(Var),
    Sqrt(Var),
    NormLast {
        a: Var,
        width: usize,
    },
    Gather {
        a: Var,
        outer: usize,
        src: usize,
        inner: usize,
        indices: Vec<usize>,
    },
    ConstMatMul {
        m: Rc<SparseMatrix<T>>,
        x: Var,
        batch: usize,
        width: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
        rows: usize,
        cols: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance per feature.
    pub var: Vec<T>,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so inputs always precede the ops
/// that consume them and backward can run in exact reverse order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    sealed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            sealed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; it is differentiated iff `requires_grad` is set on it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a differentiable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a / b` where `b > min`, and 0 elsewhere (gradient 0 there as well).
    pub fn safe_div(&mut self, a: Var, b: Var, min: T) -> Result<Var> {
        self.zip_with(
            "safe_div",
            a,
            b,
            move |x, y| if y > min { x / y } else { T::zero() },
            Op::SafeDiv { a, b, min },
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != numel(self.shape(a)) {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in inputs.iter().zip(&sizes) {
                let src = self.value(v);
                out.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                sizes,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or_else(|| Error::shape("sum_last", &shape, &[]))?;
        let out = self
            .value(a)
            .chunks(width.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(shape[..shape.len() - 1].to_vec(), out, Op::SumLast { a, width }, rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    /// Euclidean norm over the last axis, dropping it.
    pub fn norm_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or_else(|| Error::shape("norm_last", &shape, &[]))?;
        let out = self
            .value(a)
            .chunks(width.max(1))
            .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(shape[..shape.len() - 1].to_vec(), out, Op::NormLast { a, width }, rg))
    }

    /// Selects entries along `axis` by index list (repeats allowed).
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("gather", &shape, &[axis]));
        }
        let src = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= src) {
            return Err(Error::IndexOutOfRange {
                what: "gather axis",
                index: bad,
                len: src,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * src + i) * inner;
                out.extend_from_slice(&v[start..start + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = indices.len();
        let rg = self.rg(a);
        Ok(self.push(
            oshape,
            out,
            Op::Gather {
                a,
                outer,
                src,
                inner,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.gather(a, 0, indices)
    }

    /// Applies a constant matrix `m` (`r x c`) to `x` shaped `[c, w]` or `[b, c, w]`.
    pub fn const_matmul(&mut self, m: &Rc<SparseMatrix<T>>, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows_in, width) = match s.as_slice() {
            [c, w] => (1, *c, *w),
            [b, c, w] => (*b, *c, *w),
            _ => return Err(Error::shape("const_matmul", &[m.rows(), m.cols()], &s)),
        };
        if rows_in != m.cols() {
            return Err(Error::shape("const_matmul", &[m.rows(), m.cols()], &s));
        }
        let mut out = vec![T::zero(); batch * m.rows() * width];
        m.apply(self.value(x), batch, width, &mut out);
        let shape = if s.len() == 2 {
            vec![m.rows(), width]
        } else {
            vec![batch, m.rows(), width]
        };
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            out,
            Op::ConstMatMul {
                m: Rc::clone(m),
                x,
                batch,
                width,
            },
            rg,
        ))
    }

    /// Per-feature normalization of `x` (`[rows, cols]`) followed by `gamma * xhat + beta`.
    ///
    /// With `running = None` batch statistics are used and returned; otherwise the
    /// given mean and variance are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("batch_norm", &s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(Error::shape("batch_norm", &s, self.shape(p)));
            }
        }
        let xv = self.value(x);
        let (mean, var, training) = match running {
            Some((m, v)) => {
                if m.len() != cols || v.len() != cols {
                    return Err(Error::shape("batch_norm", &s, &[m.len(), v.len()]));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                if rows < 2 {
                    return Err(Error::Config(format!(
                        "batch norm in training mode needs at least 2 rows, got {rows}"
                    )));
                }
                let n = T::lit(rows as f64);
                let mut mean = vec![T::zero(); cols];
                for r in 0..rows {
                    for (m, &v) in mean.iter_mut().zip(&xv[r * cols..(r + 1) * cols]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let d = xv[r * cols + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + bt[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var_out = self.push(
            s,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
                rows,
                cols,
            },
            rg,
        );
        let stats = training.then_some(BatchStats { mean, var });
        Ok((var_out, stats))
    }

    /// Reverse-mode sweep from a scalar `loss`. Seals the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.sealed {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if numel(shape) != 1 || shape.len() > 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.sealed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (ki, ni) = (k as isize, n as isize);
                acc(a, &mut |da| T::gemm_acc(m, n, k, (g, ni, 1), (bv, 1, ni), (da, ki, 1)));
                acc(b, &mut |db| T::gemm_acc(k, m, n, (av, 1, ki), (g, ni, 1), (db, ni, 1)));
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(b, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            &Op::Div(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += x / y;
                    }
                });
                acc(b, &mut |d| {
                    for (((d, &x), &y), &num) in d.iter_mut().zip(g).zip(bv).zip(av) {
                        *d -= x * num / (y * y);
                    }
                });
            }
            &Op::SafeDiv { a, b, min } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(a, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(bv) {
                        if y > min {
                            *d += x / y;
                        }
                    }
                });
                acc(b, &mut |d| {
                    for (((d, &x), &y), &num) in d.iter_mut().zip(g).zip(bv).zip(av) {
                        if y > min {
                            *d -= x * num / (y * y);
                        }
                    }
                });
            }
            &Op::Scale(a, s) => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &x)| *d += x * s)),
            &Op::Transpose { a, rows, cols } => acc(a, &mut |d| {
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Reshape(a) => acc(a, &mut |d| add_into(d, g)),
            Op::Concat {
                inputs,
                outer,
                sizes,
                inner,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&v, &sz) in inputs.iter().zip(sizes) {
                    acc(v, &mut |d| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                            add_into(&mut d[o * sz * inner..(o + 1) * sz * inner], src);
                        }
                    });
                    offset += sz;
                }
            }
            &Op::Sum(a) => acc(a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(a) => {
                let n = T::lit(nodes[a.0].value.len() as f64);
                acc(a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            &Op::SumLast { a, width } => acc(a, &mut |d| {
                for (chunk, &gv) in d.chunks_mut(width.max(1)).zip(g) {
                    chunk.iter_mut().for_each(|x| *x += gv);
                }
            }),
            &Op::Abs(a) => {
                let av = &nodes[a.0].value;
                acc(a, &mut |d| {
                    for ((d, &x), &v) in d.iter_mut().zip(g).zip(av) {
                        *d += x * sign(v);
                    }
                });
            }
            &Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(a, &mut |d| {
                    for ((d, &x), &v) in d.iter_mut().zip(g).zip(av) {
                        if v > T::zero() {
                            *d += x;
                        }
                    }
                });
            }
            &Op::Sqrt(a) => {
                let out = &node.value;
                acc(a, &mut |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d += x / (y + y);
                        }
                    }
                });
            }
            &Op::NormLast { a, width } => {
                let av = &nodes[a.0].value;
                let out = &node.value;
                acc(a, &mut |d| {
                    let w = width.max(1);
                    for (((dc, xc), &nrm), &gv) in d.chunks_mut(w).zip(av.chunks(w)).zip(out).zip(g) {
                        if nrm > T::zero() {
                            for (dv, &xv) in dc.iter_mut().zip(xc) {
                                *dv += gv * xv / nrm;
                            }
                        }
                    }
                });
            }
            Op::Gather {
                a,
                outer,
                src,
                inner,
                indices,
            } => acc(*a, &mut |d| {
                let k = indices.len();
                for o in 0..*outer {
                    for (j, &i) in indices.iter().enumerate() {
                        let gs = (o * k + j) * inner;
                        let ds = (o * src + i) * inner;
                        add_into(&mut d[ds..ds + inner], &g[gs..gs + inner]);
                    }
                }
            }),
            Op::ConstMatMul { m, x, batch, width } => {
                acc(*x, &mut |d| m.apply_transpose_acc(g, *batch, *width, d));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
                rows,
                cols,
            } => {
                let (rows, cols) = (*rows, *cols);
                let gv = &nodes[gamma.0].value;
                let mut sum_g = vec![T::zero(); cols];
                let mut sum_gx = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                let n = T::lit(rows as f64);
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            let scale = gv[c] * inv_std[c];
                            if *training {
                                d[i] += scale * (g[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n);
                            } else {
                                d[i] += scale * g[i];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    T::gemm_acc(m, k, n, (a, k as isize, 1), (b, n as isize, 1), (out, n as isize, 1));
}
