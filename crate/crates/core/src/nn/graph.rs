use std::borrow::Cow;

use super::{Matrix, ParamId, ParamSet};

/// Node handle in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MaxRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Transpose(Var),
    BceWithLogits(Var, f64),
}

struct Node<'p> {
    value: Cow<'p, Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Parameter leaves borrow their values from a [`ParamSet`]; everything else
/// is owned by the graph. A graph is built for one forward pass and dropped
/// after [`Graph::backward`].
pub struct Graph<'p> {
    params: &'p ParamSet,
    frozen: Option<&'p [bool]>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<'p>>,
}

static EMPTY: ParamSet = ParamSet::new();

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            frozen: None,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    /// Parameters flagged in `frozen` become constants.
    pub fn with_frozen(params: &'p ParamSet, frozen: &'p [bool]) -> Self {
        let mut g = Graph::new(params);
        g.frozen = Some(frozen);
        g
    }

    /// A graph without parameters.
    pub fn standalone() -> Graph<'static> {
        Graph::new(&EMPTY)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let requires_grad = !self.frozen.is_some_and(|f| f[id.0]);
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds the 1×n row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1, "add_row expects a row vector");
        assert_eq!(bias.cols, self.value(a).cols, "add_row width mismatch");
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            for (x, &bb) in v.row_mut(r).iter_mut().zip(&bias.data) {
                *x += bb;
            }
        }
        self.push(v, Op::AddRow(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let v = Matrix::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect());
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    /// Row-wise softmax. With a mask, entries flagged `false` get weight
    /// exactly zero; every row must keep at least one entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Vec<bool>>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.len(), x.len(), "softmax mask shape mismatch");
        }
        let mut out = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[r * x.cols + c]);
            let row = x.row(r);
            let max = (0..x.cols)
                .filter(|&c| allowed(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.is_finite() || max == f64::INFINITY, "softmax row {r} fully masked");
            let mut total = 0.0;
            for c in 0..x.cols {
                if allowed(c) {
                    let e = (row[c] - max).exp();
                    out.data[r * x.cols + c] = e;
                    total += e;
                }
            }
            out.row_mut(r).iter_mut().for_each(|e| *e /= total);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row layer normalization with learned gain and bias (both 1×n).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in out.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Row lookup: output row i is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather(table, ids.to_vec()), &[table])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "slice_rows out of range");
        let v = Matrix::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut v = Matrix::zeros(x.rows, len);
        for r in 0..x.rows {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows width mismatch");
            data.extend_from_slice(&m.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Column-wise maximum over rows, giving a 1×n row. Ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows > 0, "max over zero rows");
        let mut out = Matrix::zeros(1, x.cols);
        let mut arg = vec![0; x.cols];
        for c in 0..x.cols {
            let mut best = x.get(0, c);
            for r in 1..x.rows {
                if x.get(r, c) > best {
                    best = x.get(r, c);
                    arg[c] = r;
                }
            }
            out.data[c] = best;
        }
        self.push(out, Op::MaxRows(a, arg), &[a])
    }

    /// Column-wise mean over rows, giving a 1×n row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.rows > 0, "mean over zero rows");
        let mut out = Matrix::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = x.rows as f64;
        out.data.iter_mut().for_each(|o| *o /= n);
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    /// Binary cross-entropy of a 1×1 logit against a 0/1 target.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Var {
        let z = self.scalar(logit);
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        self.push(Matrix::scalar(loss), Op::BceWithLogits(logit, target), &[logit])
    }

    /// Reverse pass from a scalar root (seeded with 1).
    pub fn backward(&self, root: Var) -> Gradients {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let rv = self.value(root);
        grads[root.0] = Some(Matrix::filled(rv.rows, rv.cols, 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.wants(v) {
            return;
        }
        let shape = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        f(slot);
    }

    fn propagate(&self, op: &Op, y: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let elementwise = |a: &Matrix, f: &dyn Fn(f64, f64, f64) -> f64| {
            Matrix::from_vec(
                g.rows,
                g.cols,
                g.data
                    .iter()
                    .zip(&a.data)
                    .zip(&y.data)
                    .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
                    .collect(),
            )
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc_with(grads, *b, |gb| {
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    self.acc(grads, *a, elementwise(bv, &|gi, bi, _| gi * bi));
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    self.acc(grads, *b, elementwise(av, &|gi, ai, _| gi * ai));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::Tanh(a) => self.acc(grads, *a, elementwise(y, &|gi, _, yi| gi * (1.0 - yi * yi))),
            Op::Sigmoid(a) => self.acc(grads, *a, elementwise(y, &|gi, _, yi| gi * yi * (1.0 - yi))),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, elementwise(x, &|gi, xi, _| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, elementwise(x, &|gi, xi, _| gi * gelu_grad(xi)));
            }
            Op::SoftmaxRows(a) => {
                // Masked entries have y = 0, so their gradient vanishes.
                let mut dx = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.acc(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let cols = g.cols as f64;
                self.acc_with(grads, *gain, |dg| {
                    for r in 0..g.rows {
                        for ((o, gi), xh) in dg.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gi * xh;
                        }
                    }
                });
                self.acc_with(grads, *bias, |db| {
                    for r in 0..g.rows {
                        for (o, gi) in db.data.iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    }
                });
                if self.wants(*x) {
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(&gv.data).map(|(a, b)| a * b).collect();
                        let xh = xhat.row(r);
                        let mean_d = dxhat.iter().sum::<f64>() / cols;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for ((o, d), xhi) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                            *o = rstd[r] * (d - mean_d - xhi * mean_dx);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Gather(table, ids) => self.acc_with(grads, *table, |dt| {
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
            }),
            Op::SliceRows(a, start) => self.acc_with(grads, *a, |da| {
                let c = da.cols;
                for (o, v) in da.data[start * c..(start + g.rows) * c].iter_mut().zip(&g.data) {
                    *o += v;
                }
            }),
            Op::SliceCols(a, start) => self.acc_with(grads, *a, |da| {
                for r in 0..g.rows {
                    for (o, v) in da.row_mut(r)[*start..start + g.cols].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.wants(p) {
                        let d =
                            Matrix::from_vec(rows, g.cols, g.data[offset * g.cols..(offset + rows) * g.cols].to_vec());
                        self.acc(grads, p, d);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.wants(p) {
                        let mut d = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.acc(grads, p, d);
                    }
                    offset += cols;
                }
            }
            Op::MaxRows(a, arg) => self.acc_with(grads, *a, |da| {
                for (c, &r) in arg.iter().enumerate() {
                    let cols = da.cols;
                    da.data[r * cols + c] += g.data[c];
                }
            }),
            Op::MeanRows(a) => self.acc_with(grads, *a, |da| {
                let inv = 1.0 / da.rows as f64;
                for r in 0..da.rows {
                    for (o, v) in da.row_mut(r).iter_mut().zip(&g.data) {
                        *o += v * inv;
                    }
                }
            }),
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                self.acc(grads, *a, Matrix::filled(shape.0, shape.1, g.data[0]));
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::BceWithLogits(z, target) => {
                let p = sigmoid(self.scalar(*z));
                self.acc(grads, *z, Matrix::scalar(g.data[0] * (p - target)));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` influenced the root.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients indexed like the [`ParamSet`].
    pub fn into_param_grads(mut self) -> Vec<Option<Matrix>> {
        self.param_vars
            .iter()
            .map(|pv| pv.and_then(|v| self.grads.get_mut(v.0).and_then(Option::take)))
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}
