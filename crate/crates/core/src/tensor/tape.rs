//! Recording tape and adjoints for every primitive.

use super::{gemm_acc, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Vec<f64>),
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { a: Var, axis: Axis, start: usize },
    Transpose(Var),
    Sum(Var, Axis),
    Expand(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Softmax(Var, Axis),
    LogSoftmax(Var),
    SegmentSoftmax { a: Var, seg: Vec<usize> },
    MaskedFill { a: Var, mask: Vec<bool> },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterAddRows { a: Var, idx: Vec<usize> },
    Pick { a: Var, idx: Vec<usize> },
    AggregateHeads { alpha: Var, x: Var, src: Vec<usize>, dst: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded record of primitive applications in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn acc(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf (zeros if never reached).
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape.clone();
        let n = self.nodes[v.0].value.len();
        Tensor {
            shape,
            data: self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; n]),
        }
    }

    /// Clears every gradient, leaves included.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn unary(&mut self, a: Var, op: &'static str, f: impl Fn(f64) -> f64, make: impl FnOnce(Var) -> Op) -> Result<Var> {
        self.mat(a, op)?;
        let x = &self.nodes[a.0].value;
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| f(v)).collect(),
        };
        let needs = self.needs(&[a]);
        Ok(self.push(value, make(a), needs))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64, make: Op) -> Result<Var> {
        self.mat(a, op)?;
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.shape != y.shape {
            return Err(shape_err(op, x, y));
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, make, needs))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.mat(a, "matmul")?;
        let (br, bc) = self.mat(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err("matmul", &self.nodes[a.0].value, &self.nodes[b.0].value));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, &self.nodes[a.0].value.data, ta, &self.nodes[b.0].value.data, tb, &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, ta, tb }, needs))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b` without materializing the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |p, q| p / q, Op::Div(a, b))
    }

    /// Adds a `1 × c` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "add_row")?;
        let (br, bc) = self.mat(row, "add_row")?;
        if br != 1 || bc != c {
            return Err(shape_err("add_row", &self.nodes[a.0].value, &self.nodes[row.0].value));
        }
        let bias = &self.nodes[row.0].value.data;
        let mut data = self.nodes[a.0].value.data.clone();
        for i in 0..r {
            for (x, b) in data[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *x += b;
            }
        }
        let needs = self.needs(&[a, row]);
        Ok(self.push(Tensor { shape: vec![r, c], data }, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, "scale", |x| x * k, |a| Op::Scale(a, k))
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, "shift", |x| x + k, Op::Shift)
    }

    /// Element-wise product with a constant buffer (dropout masks).
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Result<Var> {
        self.mat(a, "mul_const")?;
        let x = &self.nodes[a.0].value;
        if k.len() != x.len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: x.shape.clone(),
                rhs: vec![k.len()],
            });
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&k).map(|(p, q)| p * q).collect(),
        };
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::MulConst(a, k), needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (r0, c0) = self.mat(first, "concat")?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p, "concat")?;
            let ok = match axis {
                Axis::Rows => c == c0,
                Axis::Cols => r == r0,
            };
            if !ok {
                return Err(shape_err("concat", &self.nodes[first.0].value, &self.nodes[p.0].value));
            }
            dims.push((r, c));
        }
        let (value, needs) = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(&self.nodes[p.0].value.data);
                }
                let r = dims.iter().map(|d| d.0).sum();
                (Tensor { shape: vec![r, c0], data }, self.needs(parts))
            }
            Axis::Cols => {
                let c: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r0 * c);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.nodes[p.0].value.row_slice(i));
                    }
                }
                (Tensor { shape: vec![r0, c], data }, self.needs(parts))
            }
        };
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    /// `len` rows (or columns) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "slice")?;
        let extent = if axis == Axis::Rows { r } else { c };
        if start + len > extent {
            return Err(Error::Shape {
                op: "slice",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let x = &self.nodes[a.0].value;
        let value = match axis {
            Axis::Rows => Tensor {
                shape: vec![len, c],
                data: x.data[start * c..(start + len) * c].to_vec(),
            },
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
                }
                Tensor { shape: vec![r, len], data }
            }
        };
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Slice { a, axis, start }, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "transpose")?;
        let x = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), needs))
    }

    /// Sum over `axis`, keeping it as a dimension of size 1.
    pub fn sum(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.mat(a, "sum")?;
        let x = &self.nodes[a.0].value.data;
        let value = match axis {
            Axis::Rows => {
                let mut s = vec![0.0; c];
                for i in 0..r {
                    for (t, v) in s.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                        *t += v;
                    }
                }
                Tensor { shape: vec![1, c], data: s }
            }
            Axis::Cols => Tensor {
                shape: vec![r, 1],
                data: (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect(),
            },
        };
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Sum(a, axis), needs))
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.mat(a, "mean")?;
        let n = if axis == Axis::Rows { r } else { c };
        let s = self.sum(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of every entry as a `1 × 1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.sum(a, Axis::Rows)?;
        self.sum(s, Axis::Cols)
    }

    /// Repeats a `1 × c`, `r × 1` or `1 × 1` tensor to `rows × cols`.
    pub fn expand(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "expand")?;
        if !((r == 1 || r == rows) && (c == 1 || c == cols)) {
            return Err(Error::Shape {
                op: "expand",
                lhs: vec![r, c],
                rhs: vec![rows, cols],
            });
        }
        let x = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(x[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }]);
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![rows, cols], data }, Op::Expand(a), needs))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log", f64::ln, Op::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sqrt", f64::sqrt, Op::Sqrt)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(a, "leaky_relu", |x| if x > 0.0 { x } else { alpha * x }, |a| Op::LeakyRelu(a, alpha))
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "elu", |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu)
    }

    /// Softmax along `axis`.  `-inf` entries get weight 0; a slice holding
    /// NaN or `+inf` comes out all NaN so that the loss reports it.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.mat(a, "softmax")?;
        let x = &self.nodes[a.0].value.data;
        let mut y = x.clone();
        let (outer, inner, so, si) = match axis {
            Axis::Cols => (r, c, c, 1),
            Axis::Rows => (c, r, 1, c),
        };
        for o in 0..outer {
            softmax_strided(&mut y, o * so, si, inner);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![r, c], data: y }, Op::Softmax(a, axis), needs))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.mat(a, "log_softmax")?;
        let x = &self.nodes[a.0].value.data;
        let mut y = x.clone();
        for i in 0..r {
            let row = &mut y[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![r, c], data: y }, Op::LogSoftmax(a), needs))
    }

    /// Column-wise softmax over groups of rows: row `i` belongs to segment
    /// `seg[i]`.  Used for attention over variable-size neighbourhoods.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "segment_softmax")?;
        if seg.len() != r || seg.iter().any(|&s| s >= segments) {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: vec![r, c],
                rhs: vec![seg.len(), segments],
            });
        }
        let x = &self.nodes[a.0].value.data;
        let mut max = vec![f64::NEG_INFINITY; segments * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                max[s * c + j] = max[s * c + j].max(x[i * c + j]);
            }
        }
        let mut y = vec![0.0; r * c];
        let mut den = vec![0.0; segments * c];
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                let e = (x[i * c + j] - max[s * c + j]).exp();
                y[i * c + j] = e;
                den[s * c + j] += e;
            }
        }
        for (i, &s) in seg.iter().enumerate() {
            for j in 0..c {
                y[i * c + j] /= den[s * c + j];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![r, c], data: y }, Op::SegmentSoftmax { a, seg: seg.to_vec() }, needs))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        self.mat(a, "masked_fill")?;
        let x = &self.nodes[a.0].value;
        if mask.len() != x.len() {
            return Err(Error::Shape {
                op: "masked_fill",
                lhs: x.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let t = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(mask).map(|(&v, &m)| if m { value } else { v }).collect(),
        };
        let needs = self.needs(&[a]);
        Ok(self.push(t, Op::MaskedFill { a, mask: mask.to_vec() }, needs))
    }

    /// Rows `idx` of `a`, in order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(a, "gather_rows")?;
        if idx.iter().any(|&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: vec![r, c],
                rhs: vec![idx.iter().copied().max().unwrap_or(0)],
            });
        }
        let x = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(x.row_slice(i));
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![idx.len(), c], data }, Op::GatherRows { a, idx: idx.to_vec() }, needs))
    }

    /// Embedding lookup: rows `indices` of `table`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    /// Output row `idx[i]` accumulates input row `i`; `rows` output rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (r, c) = self.mat(a, "scatter_add_rows")?;
        if idx.len() != r || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: vec![r, c],
                rhs: vec![idx.len(), rows],
            });
        }
        let x = &self.nodes[a.0].value;
        let mut data = vec![0.0; rows * c];
        for (i, &d) in idx.iter().enumerate() {
            for (o, v) in data[d * c..(d + 1) * c].iter_mut().zip(x.row_slice(i)) {
                *o += v;
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![rows, c], data }, Op::ScatterAddRows { a, idx: idx.to_vec() }, needs))
    }

    /// Column `idx[i]` of each row `i`, as an `r × 1` tensor.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.mat(a, "pick")?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape {
                op: "pick",
                lhs: vec![r, c],
                rhs: vec![idx.len()],
            });
        }
        let x = &self.nodes[a.0].value;
        let data = idx.iter().enumerate().map(|(i, &j)| x.at(i, j)).collect();
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![r, 1], data }, Op::Pick { a, idx: idx.to_vec() }, needs))
    }

    /// Multi-head weighted message passing: for every edge `e` and head `m`,
    /// output row `dst[e]`, column block `m` accumulates `alpha[e, m] · x[src[e]]`.
    ///
    /// `alpha` is `E × M`, `x` is `R × w`; the result is `rows × (M·w)`.
    pub fn aggregate_heads(&mut self, alpha: Var, x: Var, src: &[usize], dst: &[usize], rows: usize) -> Result<Var> {
        let (e, m) = self.mat(alpha, "aggregate_heads")?;
        let (r, w) = self.mat(x, "aggregate_heads")?;
        if src.len() != e || dst.len() != e || src.iter().any(|&i| i >= r) || dst.iter().any(|&i| i >= rows) {
            return Err(shape_err("aggregate_heads", &self.nodes[alpha.0].value, &self.nodes[x.0].value));
        }
        let a = &self.nodes[alpha.0].value.data;
        let xv = &self.nodes[x.0].value.data;
        let mw = m * w;
        let mut out = vec![0.0; rows * mw];
        for k in 0..e {
            let xr = &xv[src[k] * w..(src[k] + 1) * w];
            let base = dst[k] * mw;
            for h in 0..m {
                let wt = a[k * m + h];
                axpy(&mut out[base + h * w..base + (h + 1) * w], xr, wt);
            }
        }
        let needs = self.needs(&[alpha, x]);
        let op = Op::AggregateHeads {
            alpha,
            x,
            src: src.to_vec(),
            dst: dst.to_vec(),
        };
        Ok(self.push(Tensor { shape: vec![rows, mw], data: out }, op, needs))
    }

    /// Reverse pass from a scalar `loss`.  Leaf gradients accumulate across
    /// calls; intermediate gradients are recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.adjoint(i, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = acc(&mut self.grads[v.0], n);
        f(slot, &self.nodes[v.0].value);
    }

    fn adjoint(&mut self, i: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let y = std::mem::take(&mut self.nodes[i].value);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, n) = (y.shape[0], y.shape[1]);
                let av = std::mem::take(&mut self.nodes[a.0].value);
                let bv = if a == b { av.clone() } else { std::mem::take(&mut self.nodes[b.0].value) };
                let k = if ta { av.shape[0] } else { av.shape[1] };
                if self.nodes[a.0].needs_grad {
                    let slot = acc(&mut self.grads[a.0], av.len());
                    if ta {
                        gemm_acc(k, n, m, &bv.data, tb, g, true, slot);
                    } else {
                        gemm_acc(m, n, k, g, false, &bv.data, !tb, slot);
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let slot = acc(&mut self.grads[b.0], bv.len());
                    if tb {
                        gemm_acc(n, m, k, g, true, &av.data, ta, slot);
                    } else {
                        gemm_acc(k, m, n, &av.data, !ta, g, false, slot);
                    }
                }
                if a != b {
                    self.nodes[b.0].value = bv;
                }
                self.nodes[a.0].value = av;
            }
            &Op::Add(a, b) => {
                self.add_grad(a, |s, _| axpy(s, g, 1.0));
                self.add_grad(b, |s, _| axpy(s, g, 1.0));
            }
            &Op::Sub(a, b) => {
                self.add_grad(a, |s, _| axpy(s, g, 1.0));
                self.add_grad(b, |s, _| axpy(s, g, -1.0));
            }
            &Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data.clone();
                let av = self.nodes[a.0].value.data.clone();
                self.add_grad(a, |s, _| s.iter_mut().zip(g).zip(&bv).for_each(|((s, g), b)| *s += g * b));
                self.add_grad(b, |s, _| s.iter_mut().zip(g).zip(&av).for_each(|((s, g), a)| *s += g * a));
            }
            &Op::Div(a, b) => {
                let bv = self.nodes[b.0].value.data.clone();
                self.add_grad(a, |s, _| s.iter_mut().zip(g).zip(&bv).for_each(|((s, g), b)| *s += g / b));
                self.add_grad(b, |s, bt| {
                    for (k, s) in s.iter_mut().enumerate() {
                        *s -= g[k] * y.data[k] / bt.data[k];
                    }
                });
            }
            &Op::AddRow(a, row) => {
                let c = y.shape[1];
                self.add_grad(a, |s, _| axpy(s, g, 1.0));
                self.add_grad(row, |s, _| {
                    for chunk in g.chunks(c) {
                        axpy(s, chunk, 1.0);
                    }
                });
            }
            &Op::Scale(a, k) => self.add_grad(a, |s, _| axpy(s, g, k)),
            &Op::Shift(a) => self.add_grad(a, |s, _| axpy(s, g, 1.0)),
            Op::MulConst(a, k) => {
                self.add_grad(*a, |s, _| s.iter_mut().zip(g).zip(k).for_each(|((s, g), k)| *s += g * k))
            }
            Op::Concat { parts, axis } => {
                let total_c = y.shape[1];
                let mut off = 0;
                for &p in parts {
                    let (pr, pc) = (self.nodes[p.0].value.shape[0], self.nodes[p.0].value.shape[1]);
                    match axis {
                        Axis::Rows => {
                            let o = off;
                            self.add_grad(p, |s, _| axpy(s, &g[o * pc..(o + pr) * pc], 1.0));
                            off += pr;
                        }
                        Axis::Cols => {
                            let o = off;
                            self.add_grad(p, |s, _| {
                                for r in 0..pr {
                                    axpy(&mut s[r * pc..(r + 1) * pc], &g[r * total_c + o..r * total_c + o + pc], 1.0);
                                }
                            });
                            off += pc;
                        }
                    }
                }
            }
            &Op::Slice { a, axis, start } => {
                let (r, c) = (y.shape[0], y.shape[1]);
                self.add_grad(a, |s, x| {
                    let xc = x.shape[1];
                    match axis {
                        Axis::Rows => axpy(&mut s[start * xc..(start + r) * xc], g, 1.0),
                        Axis::Cols => {
                            for i in 0..r {
                                axpy(&mut s[i * xc + start..i * xc + start + c], &g[i * c..(i + 1) * c], 1.0);
                            }
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                let (r, c) = (y.shape[0], y.shape[1]);
                self.add_grad(a, |s, _| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            &Op::Sum(a, axis) => self.add_grad(a, |s, x| {
                let (r, c) = (x.shape[0], x.shape[1]);
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += if axis == Axis::Rows { g[j] } else { g[i] };
                    }
                }
            }),
            &Op::Expand(a) => {
                let (rows, cols) = (y.shape[0], y.shape[1]);
                self.add_grad(a, |s, x| {
                    let (r, c) = (x.shape[0], x.shape[1]);
                    for i in 0..rows {
                        for j in 0..cols {
                            s[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }] += g[i * cols + j];
                        }
                    }
                });
            }
            &Op::Exp(a) => self.add_grad(a, |s, _| zip3(s, g, &y.data, |g, y, _| g * y)),
            &Op::Log(a) => self.add_grad(a, |s, x| zip3(s, g, &x.data, |g, x, _| g / x)),
            &Op::Sqrt(a) => self.add_grad(a, |s, _| zip3(s, g, &y.data, |g, y, _| 0.5 * g / y)),
            &Op::Tanh(a) => self.add_grad(a, |s, _| zip3(s, g, &y.data, |g, y, _| g * (1.0 - y * y))),
            &Op::Relu(a) => self.add_grad(a, |s, x| zip3(s, g, &x.data, |g, x, _| if x > 0.0 { g } else { 0.0 })),
            &Op::LeakyRelu(a, alpha) => {
                self.add_grad(a, |s, x| zip3(s, g, &x.data, |g, x, _| if x > 0.0 { g } else { alpha * g }))
            }
            &Op::Elu(a) => self.add_grad(a, |s, x| {
                for k in 0..s.len() {
                    s[k] += if x.data[k] > 0.0 { g[k] } else { g[k] * (y.data[k] + 1.0) };
                }
            }),
            &Op::Softmax(a, axis) => {
                let (r, c) = (y.shape[0], y.shape[1]);
                let (outer, inner, so, si) = match axis {
                    Axis::Cols => (r, c, c, 1),
                    Axis::Rows => (c, r, 1, c),
                };
                self.add_grad(a, |s, _| {
                    for o in 0..outer {
                        let base = o * so;
                        let dot: f64 = (0..inner).map(|t| g[base + t * si] * y.data[base + t * si]).sum();
                        for t in 0..inner {
                            let k = base + t * si;
                            s[k] += y.data[k] * (g[k] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let c = y.shape[1];
                self.add_grad(a, |s, _| {
                    for (i, gr) in g.chunks(c).enumerate() {
                        let tot: f64 = gr.iter().sum();
                        for j in 0..c {
                            s[i * c + j] += gr[j] - y.data[i * c + j].exp() * tot;
                        }
                    }
                });
            }
            Op::SegmentSoftmax { a, seg } => {
                let c = y.shape[1];
                let segments = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; segments * c];
                for (i, &sg) in seg.iter().enumerate() {
                    for j in 0..c {
                        dot[sg * c + j] += g[i * c + j] * y.data[i * c + j];
                    }
                }
                self.add_grad(*a, |s, _| {
                    for (i, &sg) in seg.iter().enumerate() {
                        for j in 0..c {
                            let k = i * c + j;
                            s[k] += y.data[k] * (g[k] - dot[sg * c + j]);
                        }
                    }
                });
            }
            Op::MaskedFill { a, mask } => self.add_grad(*a, |s, _| {
                for k in 0..s.len() {
                    if !mask[k] {
                        s[k] += g[k];
                    }
                }
            }),
            Op::GatherRows { a, idx } => {
                let c = y.shape[1];
                self.add_grad(*a, |s, _| {
                    for (i, &src) in idx.iter().enumerate() {
                        axpy(&mut s[src * c..(src + 1) * c], &g[i * c..(i + 1) * c], 1.0);
                    }
                });
            }
            Op::ScatterAddRows { a, idx } => {
                let c = y.shape[1];
                self.add_grad(*a, |s, _| {
                    for (i, &d) in idx.iter().enumerate() {
                        axpy(&mut s[i * c..(i + 1) * c], &g[d * c..(d + 1) * c], 1.0);
                    }
                });
            }
            Op::AggregateHeads { alpha, x, src, dst } => {
                let (m, w) = (self.nodes[alpha.0].value.shape[1], self.nodes[x.0].value.shape[1]);
                let mw = m * w;
                if self.nodes[alpha.0].needs_grad {
                    let xv = &self.nodes[x.0].value.data;
                    let slot = acc(&mut self.grads[alpha.0], src.len() * m);
                    for k in 0..src.len() {
                        let xr = &xv[src[k] * w..(src[k] + 1) * w];
                        let gr = &g[dst[k] * mw..(dst[k] + 1) * mw];
                        for h in 0..m {
                            slot[k * m + h] += gr[h * w..(h + 1) * w].iter().zip(xr).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let av = &self.nodes[alpha.0].value.data;
                    let len = self.nodes[x.0].value.len();
                    let slot = acc(&mut self.grads[x.0], len);
                    for k in 0..src.len() {
                        let gr = &g[dst[k] * mw..(dst[k] + 1) * mw];
                        let xs = &mut slot[src[k] * w..(src[k] + 1) * w];
                        for h in 0..m {
                            axpy(xs, &gr[h * w..(h + 1) * w], av[k * m + h]);
                        }
                    }
                }
            }
            Op::Pick { a, idx } => self.add_grad(*a, |s, x| {
                let c = x.shape[1];
                for (i, &j) in idx.iter().enumerate() {
                    s[i * c + j] += g[i];
                }
            }),
        }
        self.nodes[i].op = op;
        self.nodes[i].value = y;
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn zip3(s: &mut [f64], g: &[f64], v: &[f64], f: impl Fn(f64, f64, usize) -> f64) {
    for k in 0..s.len() {
        s[k] += f(g[k], v[k], k);
    }
}

fn softmax_strided(y: &mut [f64], base: usize, stride: usize, n: usize) {
    if (0..n).any(|t| y[base + t * stride].is_nan() || y[base + t * stride] == f64::INFINITY) {
        (0..n).for_each(|t| y[base + t * stride] = f64::NAN);
        return;
    }
    let m = (0..n).map(|t| y[base + t * stride]).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        // Fully masked: fall back to uniform weights.
        (0..n).for_each(|t| y[base + t * stride] = 1.0 / n as f64);
        return;
    }
    let mut z = 0.0;
    for t in 0..n {
        let e = (y[base + t * stride] - m).exp();
        y[base + t * stride] = e;
        z += e;
    }
    for t in 0..n {
        y[base + t * stride] /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: &mut Tape, v: &[f64]) -> Var {
        t.constant(Tensor::row(v))
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = row(&mut t, &[0.0, 0.0, 0.0]);
        let y = t.softmax(x, Axis::Cols).unwrap();
        for v in &t.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = row(&mut t, &[1.0, 1.0, 1.0]);
        let m = t.masked_fill(x, &[false, false, true], f64::NEG_INFINITY).unwrap();
        let y = t.softmax(m, Axis::Cols).unwrap();
        assert_eq!(t.value(y).data, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn scatter_example() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = t.scatter_add_rows(x, &[0, 0, 1], 2).unwrap();
        assert_eq!(t.value(y).data, vec![4.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b).unwrap_err() {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3]));
            }
            e => panic!("{e}"),
        }
        let s = t.sum_all(a).unwrap();
        let nonscalar = t.add(a, b).unwrap();
        assert!(t.backward(s).is_ok());
        assert_eq!(t.backward(nonscalar).unwrap_err().kind(), "contract");
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(&[1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let l = t.sum_all(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).data, vec![2.0, 4.0, 6.0]);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).data, vec![4.0, 8.0, 12.0]);
        t.zero_grad();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).data, vec![2.0, 4.0, 6.0]);
    }
}
