use super::scalar::{gemm, MatView};
use super::tensor::axis_split;
use super::{Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Returns one gradient buffer per input, each the size of that input.
pub trait CustomBackward<T: Scalar> {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_output: &[T]) -> Vec<Vec<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { a: Var, axis: usize },
    MaskedSoftmax { a: Var, scale: T },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    ReduceSum { a: Var, axis: usize },
    ReduceMean { a: Var, axis: usize },
    ReduceMax { a: Var, argmax: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    BceWithLogits { logits: Var, targets: Vec<T> },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records tensor operations in execution order for reverse-mode
/// differentiation.
///
/// Inputs of a node always have smaller indices than the node itself, so the
/// recording order is a topological order and [`Tape::backward`] walks it in
/// reverse. Values are never mutated after being recorded.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer of `var`, or `None` if it does not require grad or is
    /// unreachable from the root.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, var: Var) -> Option<Tensor<T>> {
        self.get(var)
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.to_vec()).expect("gradient shape"))
    }

    /// Takes ownership of the buffer; later calls for the same var return `None`.
    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl<T: Scalar> Tape<T> {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor. Parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product. Supports `(m,k)x(k,n)`, batched `(b,m,k)x(b,k,n)` and
    /// `(b,m,k)x(k,n)` with the right operand shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => vec![sa[0], sb[1]],
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => vec![sa[0], sa[1], sb[2]],
            (3, 2) if sa[2] == sb[0] => vec![sa[0], sa[1], sb[1]],
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); out_shape.iter().product()];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            match (sa.len(), sb.len()) {
                (2, 2) => gemm(MatView::new(av, sa[0], sa[1]), MatView::new(bv, sb[0], sb[1]), T::zero(), &mut out),
                (3, 2) => gemm(
                    MatView::new(av, sa[0] * sa[1], sa[2]),
                    MatView::new(bv, sb[0], sb[1]),
                    T::zero(),
                    &mut out,
                ),
                _ => {
                    let (m, k, n) = (sa[1], sa[2], sb[2]);
                    for i in 0..sa[0] {
                        gemm(
                            MatView::new(&av[i * m * k..(i + 1) * m * k], m, k),
                            MatView::new(&bv[i * k * n..(i + 1) * k * n], k, n),
                            T::zero(),
                            &mut out[i * m * n..(i + 1) * m * n],
                        );
                    }
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Elementwise sum. `b` may have a shape equal to a suffix of `a`'s shape,
    /// in which case it is broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", sa, sb));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(bv.len()) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                *x = *x + y;
            }
        }
        let shape = sa.to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let data = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, Op::Sub { a, b }, rg))
    }

    /// Elementwise (Hadamard) product. As with [`Tape::add`], `b` may be
    /// shaped like a suffix of `a` and is then broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("mul", sa, sb));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(bv.len()) {
            for (x, &y) in chunk.iter_mut().zip(bv) {
                *x = *x * y;
            }
        }
        let shape = sa.to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.requires_grad(a);
        self.push(Tensor::new(shape, data).expect("unary shape"), op, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, factor: T) -> Var {
        self.map_unary(a, |x| x * factor, Op::Scale { a, factor })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = ta.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(x[at(j)]));
                if max == T::neg_infinity() {
                    // fully masked lane: leave as zeros
                    continue;
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, axis }, rg))
    }

    /// Computes `softmax(scale * a)` over the last axis of a `(b, m, n)`
    /// tensor, skipping keys whose `key_mask` entry is false. `key_mask`
    /// holds `n` flags per group of `b / groups` consecutive batch entries.
    /// Masked keys get probability zero; a lane with no keys is all zeros.
    /// `scale` must be positive.
    pub fn masked_softmax(&mut self, a: Var, scale: T, key_mask: &[bool]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(TensorError::InvalidAxis { axis: 2, rank: shape.len() });
        }
        let (b, m, n) = (shape[0], shape[1], shape[2]);
        if n == 0 || key_mask.is_empty() || !key_mask.len().is_multiple_of(n) || !b.is_multiple_of(key_mask.len() / n) {
            return Err(mismatch("masked_softmax", &shape, &[key_mask.len()]));
        }
        let per_group = b / (key_mask.len() / n);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            let keys = &key_mask[(bi / per_group) * n..(bi / per_group + 1) * n];
            for r in 0..m {
                let base = (bi * m + r) * n;
                let (xr, or) = (&x[base..base + n], &mut out[base..base + n]);
                let mut max = T::neg_infinity();
                for (&v, &k) in xr.iter().zip(keys) {
                    if k && v > max {
                        max = v;
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for ((o, &v), &k) in or.iter_mut().zip(xr).zip(keys) {
                    if k {
                        let e = ((v - max) * scale).exp();
                        *o = e;
                        total = total + e;
                    }
                }
                let inv = T::one() / total;
                for o in or.iter_mut() {
                    *o = *o * inv;
                }
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedSoftmax { a, scale }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`
    /// (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("non-empty shape");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(mismatch("layer_norm", &sx, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let dn = T::from_usize(d).expect("dim");
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(Tensor::new(sx, out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Gathers rows of a `(vocab, d)` table: output `(ids.len(), d)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(mismatch("embedding", st, &[ids.len()]));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: vocab });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, d]));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(Tensor::new([ids.len(), d], out)?, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*parts.first().ok_or(TensorError::EmptyInput("concat"))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis { axis, rank: first.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::InvalidAxis { axis, rank: sa.len() });
        }
        if len == 0 || start + len > sa[axis] {
            return Err(TensorError::SliceOutOfRange { start, len, dim: sa[axis] });
        }
        let (outer, dim, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(TensorError::InvalidAxis { axis: 1, rank: sa.len() });
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let out = transpose_blocks(self.value(a).data(), r, c);
        let mut shape = sa;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(mismatch("reshape", ta.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), ta.data().to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", &sa, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let out = permute_data(self.value(a).data(), &sa, perm);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { a, perm: perm.to_vec() }, rg))
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::InvalidAxis { axis, rank: sa.len() });
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        if mean {
            let n = T::from_usize(len).expect("len");
            out.iter_mut().for_each(|v| *v = *v / n);
        }
        let shape = reduced_shape(&sa, axis);
        let rg = self.requires_grad(a);
        let op = if mean { Op::ReduceMean { a, axis } } else { Op::ReduceSum { a, axis } };
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, false)
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, true)
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(TensorError::InvalidAxis { axis, rank: sa.len() });
        }
        let (outer, len, inner) = axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    let idx = o * len * inner + j * inner + i;
                    if src[idx] > out[o * inner + i] || j == 0 {
                        out[o * inner + i] = src[idx];
                        argmax[o * inner + i] = idx;
                    }
                }
            }
        }
        let shape = reduced_shape(&sa, axis);
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::ReduceMax { a, argmax }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / T::from_usize(t.numel()).expect("numel");
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Mean binary cross-entropy between `logits` and 0/1 `targets` of the
    /// same shape, in the stable form `max(z,0) - z*t + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var, TensorError> {
        let tz = self.value(logits);
        if tz.shape() != targets.shape() {
            return Err(mismatch("bce_with_logits", tz.shape(), targets.shape()));
        }
        let n = T::from_usize(tz.numel()).expect("numel");
        let total = tz
            .data()
            .iter()
            .zip(targets.data())
            .fold(T::zero(), |acc, (&z, &t)| acc + bce_term(z, t));
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits { logits, targets: targets.data().to_vec() },
            rg,
        ))
    }

    /// Records an externally computed value with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, rule: Box<dyn CustomBackward<T>>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), rule }, rg)
    }

    /// Reverse sweep from a scalar `root`. Gradients of every node that
    /// requires grad and is reachable from `root` are accumulated additively.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, TensorError> {
        let rt = self.value(root);
        if !rt.is_scalar() {
            return Err(TensorError::NonScalarRoot(rt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes[..=root.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: impl Fn(usize) -> T) {
        if let Some(buf) = self.slot(grads, v) {
            for (i, x) in buf.iter_mut().enumerate() {
                *x = *x + contribution(i);
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                match (sa.len(), sb.len()) {
                    (2, 2) | (3, 2) => {
                        let m = sa[..sa.len() - 1].iter().product::<usize>();
                        let (k, n) = (sb[0], sb[1]);
                        if let Some(ga) = self.slot(grads, *a) {
                            gemm(MatView::new(g, m, n), MatView::new(bv, k, n).t(), T::one(), ga);
                        }
                        if let Some(gb) = self.slot(grads, *b) {
                            gemm(MatView::new(av, m, k).t(), MatView::new(g, m, n), T::one(), gb);
                        }
                    }
                    _ => {
                        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                        if let Some(ga) = self.slot(grads, *a) {
                            for i in 0..batch {
                                gemm(
                                    MatView::new(&g[i * m * n..], m, n),
                                    MatView::new(&bv[i * k * n..], k, n).t(),
                                    T::one(),
                                    &mut ga[i * m * k..(i + 1) * m * k],
                                );
                            }
                        }
                        if let Some(gb) = self.slot(grads, *b) {
                            for i in 0..batch {
                                gemm(
                                    MatView::new(&av[i * m * k..], m, k).t(),
                                    MatView::new(&g[i * m * n..], m, n),
                                    T::one(),
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                );
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |i| g[i]);
                if let Some(gb) = self.slot(grads, *b) {
                    for chunk in g.chunks(gb.len()) {
                        for (acc, &x) in gb.iter_mut().zip(chunk) {
                            *acc = *acc + x;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| -g[i]);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let period = bv.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (gc, chunk) in ga.chunks_mut(period).zip(g.chunks(period)) {
                        for ((x, &gi), &y) in gc.iter_mut().zip(chunk).zip(bv) {
                            *x = *x + gi * y;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (chunk, ac) in g.chunks(period).zip(av.chunks(period)) {
                        for ((x, &gi), &ai) in gb.iter_mut().zip(chunk).zip(ac) {
                            *x = *x + gi * ai;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => self.accumulate(grads, *a, |i| g[i] * *factor),
            Op::Tanh(a) => self.accumulate(grads, *a, |i| g[i] * (T::one() - out[i] * out[i])),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |i| if av[i] > T::zero() { g[i] } else { T::zero() });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |i| g[i] * out[i] * (T::one() - out[i])),
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot = (0..len).fold(T::zero(), |s, j| s + out[at(j)] * g[at(j)]);
                            for j in 0..len {
                                let k = at(j);
                                ga[k] = ga[k] + out[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { a, scale } => {
                let n = *self.shape(*a).last().expect("rank 3");
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gar, orow), grow) in ga.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let dot = orow.iter().zip(grow).fold(T::zero(), |s, (&o, &gv)| s + o * gv);
                        for ((x, &o), &gv) in gar.iter_mut().zip(orow).zip(grow) {
                            *x = *x + *scale * o * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.shape(*gain)[0];
                let rows = xhat.len() / d;
                let gv = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let dn = T::from_usize(d).expect("dim");
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        let scale = inv_std[r] / dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            let v = scale * (dn * dh - s1 - hr[j] * s2);
                            gx[r * d + j] = gx[r * d + j] + v;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let d = self.shape(*table)[1];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[row * d + j];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                gp[dst + i] = gp[dst + i] + g[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, dim, inner) = axis_split(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            ga[dst + i] = ga[dst + i] + g[src + i];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let back = transpose_blocks(g, s[s.len() - 2], s[s.len() - 1]);
                self.accumulate(grads, *a, |i| back[i]);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |i| g[i]),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                self.accumulate(grads, *a, |i| back[i]);
            }
            Op::ReduceSum { a, axis } | Op::ReduceMean { a, axis } => {
                let (_, len, inner) = axis_split(self.shape(*a), *axis);
                let scale = if matches!(node.op, Op::ReduceMean { .. }) {
                    T::one() / T::from_usize(len).expect("len")
                } else {
                    T::one()
                };
                self.accumulate(grads, *a, |i| {
                    let o = i / (len * inner);
                    g[o * inner + i % inner] * scale
                });
            }
            Op::ReduceMax { a, argmax, .. } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, &src) in argmax.iter().enumerate() {
                        ga[src] = ga[src] + g[k];
                    }
                }
            }
            Op::SumAll(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::MeanAll(a) => {
                let n = T::from_usize(self.value(*a).numel()).expect("numel");
                self.accumulate(grads, *a, |_| g[0] / n);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let n = T::from_usize(z.len()).expect("numel");
                self.accumulate(grads, *logits, |i| g[0] * (sigmoid(z[i]) - targets[i]) / n);
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let contributions = rule.backward(&values, &node.value, g);
                for (&v, c) in inputs.iter().zip(contributions) {
                    self.accumulate(grads, v, |i| c[i]);
                }
            }
        }
    }
}

/// Overflow-safe logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// One element of the stable logistic loss.
pub(crate) fn bce_term<T: Scalar>(z: T, t: T) -> T {
    z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p()
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Transposes each trailing `r x c` block of a row-major buffer.
fn transpose_blocks<T: Copy>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let block = r * c;
    let mut out = Vec::with_capacity(src.len());
    for b in 0..src.len() / block {
        let base = b * block;
        for j in 0..c {
            for i in 0..r {
                out.push(src[base + i * c + j]);
            }
        }
    }
    out
}

fn permute_data<T: Copy + Default>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::default(); src.len()];
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for slot in out.iter_mut() {
        *slot = src[offset];
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    out
}
