use super::special::{digamma, ln_gamma, trigamma};
use super::{axis_extents, matmul_nt, matmul_raw, matmul_tn, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    LnGamma(Var),
    Digamma(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    SumAxis(Var, usize),
    BroadcastAxis(Var, usize),
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Minimum(..) => "minimum",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::LnGamma(..) => "ln_gamma",
            Op::Digamma(..) => "digamma",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::SumAxis(..) => "sum_axis",
            Op::BroadcastAxis(..) => "broadcast_axis",
            Op::Sum(..) => "sum",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are stored in creation order, which
/// is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn broadcast_compatible(big: &[usize], small: &[usize]) -> bool {
    small.iter().product::<usize>() == 1
        || (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// First node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<TensorError> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| TensorError::NonFinite {
                node: i,
                op: n.op.name(),
            })
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.dims2(), bv.dims2()) {
            (Some((m, k)), Some((k2, n))) if k == k2 => (m, k, n),
            _ => {
                return Err(TensorError::Shape {
                    op: "matmul",
                    left: av.shape().to_vec(),
                    right: bv.shape().to_vec(),
                })
            }
        };
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let out = if sa == sb {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(sa.to_vec(), data)?
        } else if av.numel() >= bv.numel() && broadcast_compatible(sa, sb) {
            let nb = bv.numel();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % nb]))
                .collect();
            Tensor::new(sa.to_vec(), data)?
        } else if broadcast_compatible(sb, sa) {
            let na = av.numel();
            let data = bv
                .data()
                .iter()
                .enumerate()
                .map(|(i, &y)| f(av.data()[i % na], y))
                .collect();
            Tensor::new(sb.to_vec(), data)?
        } else {
            return Err(TensorError::Shape {
                op: name,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    /// Elementwise sum; the smaller operand may broadcast as a trailing-shape suffix or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "minimum", |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, ln_gamma, Op::LnGamma(a))
    }

    pub fn digamma(&mut self, a: Var) -> Var {
        self.unary(a, digamma, Op::Digamma(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound binds.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Numerically guarded softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if axis >= av.rank() || av.shape()[axis] == 0 {
            return Err(TensorError::Shape {
                op: "softmax",
                left: av.shape().to_vec(),
                right: vec![axis],
            });
        }
        let (outer, len, inner) = axis_extents(av.shape(), axis);
        let mut data = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (data[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[idx(j)] /= total;
                }
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(TensorError::contract("sum_axis", format!("axis {axis} out of range for {:?}", av.shape())));
        }
        let (outer, len, inner) = axis_extents(av.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += av.data()[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SumAxis(a, axis), rg))
    }

    /// Inserts a new axis of extent `len` at `axis`, repeating values along it.
    pub fn broadcast_axis(&mut self, a: Var, axis: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        if axis > av.rank() {
            return Err(TensorError::contract("broadcast_axis", format!("axis {axis} out of range for {:?}", av.shape())));
        }
        let mut shape = av.shape().to_vec();
        shape.insert(axis, len);
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for _ in 0..len {
                data.extend_from_slice(&av.data()[o * inner..(o + 1) * inner]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::BroadcastAxis(a, axis), rg))
    }

    /// Per-slice mean and biased (divide-by-N) variance along `axis`.
    pub fn mean_var(&mut self, a: Var, axis: usize) -> Result<(Var, Var), TensorError> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| TensorError::contract("mean_var", "axis out of range"))?;
        if len == 0 {
            return Err(TensorError::contract("mean_var", "empty axis"));
        }
        let total = self.sum_axis(a, axis)?;
        let mean = self.scale(total, 1.0 / len as f64);
        let spread = self.broadcast_axis(mean, axis, len)?;
        let centered = self.sub(a, spread)?;
        let sq = self.square(centered);
        let sq_total = self.sum_axis(sq, axis)?;
        let var = self.scale(sq_total, 1.0 / len as f64);
        Ok((mean, var))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (m, n) = av
            .dims2()
            .ok_or_else(|| TensorError::contract("transpose", format!("rank-2 input required, got {:?}", av.shape())))?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (m, n) = av.dims2().filter(|&(m, _)| start + len <= m).ok_or_else(|| {
            TensorError::contract("slice_rows", format!("rows {start}..{} of {:?}", start + len, av.shape()))
        })?;
        let _ = m;
        let out = Tensor::new(vec![len, n], av.data()[start * n..(start + len) * n].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let av = self.value(a);
        let (m, n) = av.dims2().filter(|&(_, n)| start + len <= n).ok_or_else(|| {
            TensorError::contract("slice_cols", format!("cols {start}..{} of {:?}", start + len, av.shape()))
        })?;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&av.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("concat_rows", "no inputs"))?;
        let cols = self.value(*first).dims2().map(|d| d.1);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            match pv.dims2() {
                Some((r, c)) if Some(c) == cols => {
                    rows += r;
                    data.extend_from_slice(pv.data());
                }
                _ => {
                    return Err(TensorError::Shape {
                        op: "concat_rows",
                        left: self.value(*first).shape().to_vec(),
                        right: pv.shape().to_vec(),
                    })
                }
            }
        }
        let out = Tensor::new(vec![rows, cols.unwrap_or(0)], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Places rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("concat_cols", "no inputs"))?;
        let rows = self.value(*first).dims2().map(|d| d.0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.value(p).dims2() {
                Some((r, c)) if Some(r) == rows => widths.push(c),
                _ => {
                    return Err(TensorError::Shape {
                        op: "concat_cols",
                        left: self.value(*first).shape().to_vec(),
                        right: self.value(p).shape().to_vec(),
                    })
                }
            }
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Reverse-mode sweep from a scalar `root`. Only nodes that depend on a
    /// [`Graph::param`] leaf receive gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", rv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(rv.shape().to_vec(), vec![1.0])?);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces a broadcast gradient back onto an operand of shape `target`.
    fn unbroadcast(gout: &Tensor, target: &Tensor) -> Tensor {
        if gout.shape() == target.shape() {
            return gout.clone();
        }
        let n = target.numel();
        let mut data = vec![0.0; n];
        for (i, g) in gout.data().iter().enumerate() {
            data[i % n] += g;
        }
        Tensor {
            shape: target.shape().to_vec(),
            data,
        }
    }

    /// Gradient of a broadcast binary op w.r.t. each operand, using the
    /// elementwise partials `da(x, y)` and `db(x, y)`.
    fn binary_grads(
        &self,
        a: Var,
        b: Var,
        out: &Tensor,
        gout: &Tensor,
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) -> (Tensor, Tensor) {
        let (av, bv) = (self.value(a), self.value(b));
        let (na, nb) = (av.numel(), bv.numel());
        let mut ga = vec![0.0; out.numel()];
        let mut gb = vec![0.0; out.numel()];
        for i in 0..out.numel() {
            let (x, y) = (av.data()[i % na], bv.data()[i % nb]);
            ga[i] = gout.data()[i] * da(x, y);
            gb[i] = gout.data()[i] * db(x, y);
        }
        let ga = Tensor {
            shape: out.shape().to_vec(),
            data: ga,
        };
        let gb = Tensor {
            shape: out.shape().to_vec(),
            data: gb,
        };
        (Self::unbroadcast(&ga, av), Self::unbroadcast(&gb, bv))
    }

    fn propagate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let av = self.value(a);
            Tensor {
                shape: av.shape().to_vec(),
                data: av
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(gout.data())
                    .map(|((&x, &y), &g)| g * f(x, y))
                    .collect(),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().unwrap_or_default();
                let n = bv.dims2().unwrap_or_default().1;
                let ga = matmul_nt(gout.data(), bv.data(), m, n, k);
                let gb = matmul_tn(av.data(), gout.data(), m, k, n);
                self.accumulate(grads, *a, Tensor { shape: vec![m, k], data: ga });
                self.accumulate(grads, *b, Tensor { shape: vec![k, n], data: gb });
            }
            Op::Add(a, b) => {
                let (ga, gb) = self.binary_grads(*a, *b, out, gout, |_, _| 1.0, |_, _| 1.0);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let (ga, gb) = self.binary_grads(*a, *b, out, gout, |_, _| 1.0, |_, _| -1.0);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ga, gb) = self.binary_grads(*a, *b, out, gout, |_, y| y, |x, _| x);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let (ga, gb) =
                    self.binary_grads(*a, *b, out, gout, |_, y| 1.0 / y, |x, y| -x / (y * y));
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Minimum(a, b) => {
                let (ga, gb) = self.binary_grads(
                    *a,
                    *b,
                    out,
                    gout,
                    |x, y| if y < x { 0.0 } else { 1.0 },
                    |x, y| if y < x { 1.0 } else { 0.0 },
                );
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, k) => {
                let k = *k;
                let g = elementwise(*a, &|_, _| k);
                self.accumulate(grads, *a, g);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gout.clone()),
            Op::Relu(a) => {
                let g = elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = elementwise(*a, &|_, y| y * (1.0 - y));
                self.accumulate(grads, *a, g);
            }
            Op::Softplus(a) => {
                let g = elementwise(*a, &|x, _| sigmoid(x));
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => {
                let g = elementwise(*a, &|_, y| y);
                self.accumulate(grads, *a, g);
            }
            Op::Ln(a) => {
                let g = elementwise(*a, &|x, _| 1.0 / x);
                self.accumulate(grads, *a, g);
            }
            Op::Sqrt(a) => {
                let g = elementwise(*a, &|_, y| 0.5 / y);
                self.accumulate(grads, *a, g);
            }
            Op::Square(a) => {
                let g = elementwise(*a, &|x, _| 2.0 * x);
                self.accumulate(grads, *a, g);
            }
            Op::LnGamma(a) => {
                let g = elementwise(*a, &|x, _| digamma(x));
                self.accumulate(grads, *a, g);
            }
            Op::Digamma(a) => {
                let g = elementwise(*a, &|x, _| trigamma(x));
                self.accumulate(grads, *a, g);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let g = elementwise(*a, &|x, _| if x < lo || x > hi { 0.0 } else { 1.0 });
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let mut g = vec![0.0; out.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gout.data()[idx(j)] * out.data()[idx(j)]).sum();
                        for j in 0..len {
                            g[idx(j)] = out.data()[idx(j)] * (gout.data()[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor { shape: out.shape().to_vec(), data: g });
            }
            Op::SumAxis(a, axis) => {
                let shape = self.value(*a).shape().to_vec();
                let (outer, len, inner) = axis_extents(&shape, *axis);
                let mut g = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        g.extend_from_slice(&gout.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, Tensor { shape, data: g });
            }
            Op::BroadcastAxis(a, axis) => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let mut g = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            g[o * inner + i] += gout.data()[(o * len + j) * inner + i];
                        }
                    }
                }
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor { shape, data: g });
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                let g = Tensor::full(&shape, gout.item());
                self.accumulate(grads, *a, g);
            }
            Op::Transpose(a) => {
                let (m, n) = out.dims2().unwrap_or_default();
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[j * m + i] = gout.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *a, Tensor { shape: vec![n, m], data: g });
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor { shape, data: gout.data().to_vec() });
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let n = av.shape()[1];
                let mut g = vec![0.0; av.numel()];
                g[start * n..start * n + gout.numel()].copy_from_slice(gout.data());
                self.accumulate(grads, *a, Tensor { shape: av.shape().to_vec(), data: g });
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (m, n) = av.dims2().unwrap_or_default();
                let w = out.shape()[1];
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    g[i * n + start..i * n + start + w].copy_from_slice(&gout.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, Tensor { shape: vec![m, n], data: g });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let g = gout.data()[offset..offset + pv.numel()].to_vec();
                    offset += pv.numel();
                    self.accumulate(grads, p, Tensor { shape: pv.shape().to_vec(), data: g });
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.dims2().unwrap_or_default();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut g = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        g.extend_from_slice(&gout.data()[i * total + col..i * total + col + w]);
                    }
                    col += w;
                    self.accumulate(grads, p, Tensor { shape: vec![rows, w], data: g });
                }
            }
        }
    }
}

/// Logistic function evaluated without overflowing `exp`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), g.value(m));

        let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = g.constant(t2(&[&[1.0], &[1.0]]));
        let p = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let r = g.constant(Tensor::full(&[3, 4], 2.5));
        let p = g.matmul(z, r).unwrap();
        assert_eq!(g.value(p), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(TensorError::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_basic_properties() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![3.0, 3.0 + 800.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 1.0]);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data().to_vec();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((v[i] - x.exp() / z).abs() < 1e-15);
        }
        assert!(v[0] < v[1] && v[1] < v[2]);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_axis_is_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn sigmoid_saturates_and_is_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(20.0) >= 1.0 - 1e-8);
        assert!(sigmoid(-20.0) <= 1e-8);
        assert!(sigmoid(-1000.0).is_finite() && sigmoid(1000.0).is_finite());
        for x in [-7.3, -0.2, 0.9, 13.0] {
            assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let c = g.constant(Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap());
        let (m, v) = g.mean_var(c, 1).unwrap();
        assert_eq!(g.value(m).data(), &[1.0]);
        assert_eq!(g.value(v).data(), &[0.0]);

        let a = g.constant(Tensor::vector(vec![1.5, -2.0, 4.0]));
        let ones = g.constant(Tensor::ones(&[3]));
        let p = g.mul(a, ones).unwrap();
        assert_eq!(g.value(p), g.value(a));

        let bad = g.constant(Tensor::ones(&[2]));
        assert!(matches!(g.add(a, bad), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn row_broadcast_add_and_gradient() {
        let mut g = Graph::new();
        let m = g.param(t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let b = g.param(Tensor::vector(vec![10.0, 20.0]));
        let s = g.add(m, b).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let tot = g.sum(s);
        let grads = g.backward(tot).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(grads.get(m).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_simple_rules() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(4.0));
        let c = g.constant(Tensor::scalar(9.0));
        let p = g.mul(x, y).unwrap();
        let q = g.mul(p, c).unwrap();
        let grads = g.backward(q).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 36.0);
        assert_eq!(grads.get(y).unwrap().item(), 27.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn first_non_finite_reports_node() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = g.ln(x);
        assert_eq!(
            g.first_non_finite(),
            Some(TensorError::NonFinite { node: l.index(), op: "ln" })
        );
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.param(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.param(t2(&[&[5.0], &[6.0]]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice_cols(c, 1, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
        let r = g.concat_rows(&[a, a]).unwrap();
        let last = g.slice_rows(r, 3, 1).unwrap();
        assert_eq!(g.value(last).data(), &[3.0, 4.0]);
        let tot = g.sum(s);
        let grads = g.backward(tot).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
