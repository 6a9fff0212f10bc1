//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates gradients into every node that
//! requires them. Graphs are built per forward pass and dropped afterwards.

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::kernels::{gemm, MatView};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` repeats over the leading dims of `a`.
    Suffix,
    /// `b` repeats over the trailing dims of `a`.
    Prefix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Exp,
    Log,
    Sqrt,
    Recip,
    Sigmoid,
    Relu,
    Softplus,
    ClampMin(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
        bcast: Broadcast,
    },
    Unary {
        a: Var,
        kind: UnaryKind,
    },
    Scale {
        a: Var,
        s: f64,
    },
    AddScalar {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum {
        a: Var,
        axis: usize,
    },
    SumAll {
        a: Var,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Gather {
        a: Var,
        idx: Vec<isize>,
    },
    ScatterAdd {
        a: Var,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    RowDots {
        a: Var,
        b: Var,
        ia: Vec<isize>,
        ib: Vec<usize>,
    },
    SparseRows {
        w: Var,
        x: Var,
        out_rows: Vec<usize>,
        in_rows: Vec<usize>,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if the node
    /// was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a × bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// `op(a) × op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = MatView::new(self.data(a), ar, ac).t_if(ta);
            let bv = MatView::new(self.data(b), br, bc).t_if(tb);
            gemm(av, bv, &mut out, n, 1, 0.0);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    // ---- elementwise binary ----

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind, bcast: Broadcast) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape(), bv.shape());
        let ok = match bcast {
            Broadcast::Same => sa == sb,
            Broadcast::Suffix => sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            Broadcast::Prefix => sb.len() <= sa.len() && sa[..sb.len()] == *sb,
        };
        if !ok {
            return shape_err("elementwise", sa, sb);
        }
        let (ad, bd) = (av.data(), bv.data());
        let nb = bd.len().max(1);
        let rep = ad.len() / nb;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<f64> = match bcast {
            Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Suffix => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % nb]))
                .collect(),
            Broadcast::Prefix => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i / rep]))
                .collect(),
        };
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Binary { a, b, kind, bcast },
            rg,
        ))
    }

    fn auto_bcast(&self, a: Var, b: Var) -> Broadcast {
        if self.shape(a) == self.shape(b) {
            Broadcast::Same
        } else {
            Broadcast::Suffix
        }
    }

    /// Elementwise `a + b`; `b` may match the trailing dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.auto_bcast(a, b);
        self.binary(a, b, BinaryKind::Add, bc)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.auto_bcast(a, b);
        self.binary(a, b, BinaryKind::Sub, bc)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.auto_bcast(a, b);
        self.binary(a, b, BinaryKind::Mul, bc)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.auto_bcast(a, b);
        self.binary(a, b, BinaryKind::Div, bc)
    }

    /// `a * b` where `b` matches the leading dims of `a` (e.g. per-row scale).
    pub fn mul_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, Broadcast::Prefix)
    }

    pub fn div_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div, Broadcast::Prefix)
    }

    pub fn add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, Broadcast::Prefix)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, s }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar { a }, rg)
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        let src = self.value(a);
        match kind {
            UnaryKind::Log | UnaryKind::Sqrt => {
                if let Some((index, &value)) = src.data().iter().enumerate().find(|(_, &x)| x < 0.0)
                {
                    let op = if kind == UnaryKind::Log {
                        "log"
                    } else {
                        "sqrt"
                    };
                    return Err(TensorError::Domain { op, index, value });
                }
            }
            _ => {}
        }
        let t = src.map(|x| match kind {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Recip => 1.0 / x,
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::ClampMin(m) => x.max(m),
        });
        let rg = self.rg(a);
        Ok(self.push(t, Op::Unary { a, kind }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Exp).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Recip).expect("recip is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sigmoid).expect("sigmoid is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Relu).expect("relu is total")
    }

    /// `ln(1 + eˣ)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Softplus)
            .expect("softplus is total")
    }

    /// `max(x, min)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(a, UnaryKind::ClampMin(min))
            .expect("clamp is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    // ---- normalizations ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_values(self.value(a), axis)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.value(a);
        if axis >= src.rank() {
            return invalid("log_softmax", format!("axis {axis} out of range"));
        }
        let (outer, n, inner) = split_axis(src.shape(), axis);
        let x = src.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let m = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return Err(TensorError::InvalidSlice {
                        slice: o * inner + i,
                    });
                }
                let lse = m + (0..n).map(|k| (x[at(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..n {
                    out[at(k)] = x[at(k)] - lse;
                }
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmax { a, axis }, rg))
    }

    /// Layer normalization over the last axis, then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", xv.shape(), self.shape(gamma));
        }
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                xhat[r * d + c] = (row[c] - mean) * s;
            }
        }
        let g = self.data(gamma);
        let b = self.data(beta);
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- reductions ----

    /// Sums over `axis`, removing it from the shape.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.value(a);
        if axis >= src.rank() {
            return invalid(
                "sum",
                format!("axis {axis} out of range for {:?}", src.shape()),
            );
        }
        let (outer, n, inner) = split_axis(src.shape(), axis);
        let x = src.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = o * n * inner + k * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(&x[base..base + inner]) {
                    *d += v;
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sum { a, axis }, rg))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(a).get(axis).unwrap_or(&1);
        let s = self.sum(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- indexing ----

    /// `out[k] = a[idx[k]]` over flat indices; a negative index yields 0.
    pub fn gather(&mut self, a: Var, idx: Vec<isize>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let src = self.data(a);
        if shape.iter().product::<usize>() != idx.len() {
            return invalid(
                "gather",
                format!("{} indices for shape {shape:?}", idx.len()),
            );
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in &idx {
            if i < 0 {
                out.push(0.0);
            } else {
                let i = i as usize;
                if i >= src.len() {
                    return invalid("gather", format!("index {i} out of bounds {}", src.len()));
                }
                out.push(src[i]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gather { a, idx }, rg))
    }

    /// Gathers whole rows of a rank-2 tensor; `-1` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, rows: &[isize]) -> Result<Var> {
        let (n, c) = self.value(a).dims2()?;
        let mut idx = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n as isize {
                return invalid("gather_rows", format!("row {r} out of bounds {n}"));
            }
            for j in 0..c {
                idx.push(if r < 0 {
                    -1
                } else {
                    r * c as isize + j as isize
                });
            }
        }
        self.gather(a, idx, [rows.len(), c])
    }

    /// `out[idx[k]] += a[k]` into a zero tensor of `shape`.
    pub fn scatter_add(
        &mut self,
        a: Var,
        idx: Vec<usize>,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let shape = shape.into();
        let src = self.data(a);
        if idx.len() != src.len() {
            return invalid(
                "scatter_add",
                format!("{} indices for {} values", idx.len(), src.len()),
            );
        }
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(src) {
            if i >= n {
                return invalid("scatter_add", format!("index {i} out of bounds {n}"));
            }
            out[i] += v;
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScatterAdd { a, idx }, rg))
    }

    /// Sums rows of a rank-2 tensor into `segments` buckets by segment id.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], segments: usize) -> Result<Var> {
        let (n, c) = self.value(a).dims2()?;
        if seg.len() != n {
            return invalid("segment_sum", format!("{} ids for {n} rows", seg.len()));
        }
        let idx = seg
            .iter()
            .flat_map(|&s| (0..c).map(move |j| s * c + j))
            .collect();
        self.scatter_add(a, idx, [segments, c])
    }

    /// `out[k] = a[ia[k]] · b[ib[k]]` for rank-2 `a`, `b` of equal width;
    /// `ia[k] = -1` yields 0.
    pub fn row_dots(&mut self, a: Var, ia: Vec<isize>, b: Var, ib: Vec<usize>) -> Result<Var> {
        let (na, c) = self.value(a).dims2()?;
        let (nb, cb) = self.value(b).dims2()?;
        if c != cb {
            return shape_err("row_dots", self.shape(a), self.shape(b));
        }
        if ia.len() != ib.len() {
            return invalid("row_dots", format!("{} vs {} indices", ia.len(), ib.len()));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ia.len());
        for (&i, &j) in ia.iter().zip(&ib) {
            if i >= na as isize || j >= nb {
                return invalid("row_dots", format!("row pair ({i}, {j}) out of bounds"));
            }
            if i < 0 {
                out.push(0.0);
                continue;
            }
            let i = i as usize;
            let ra = &ad[i * c..(i + 1) * c];
            let rb = &bd[j * c..(j + 1) * c];
            out.push(ra.iter().zip(rb).map(|(x, y)| x * y).sum());
        }
        let rg = self.rg(a) || self.rg(b);
        let n = out.len();
        Ok(self.push(Tensor::new([n], out)?, Op::RowDots { a, b, ia, ib }, rg))
    }

    /// Sparse-dense product in coordinate form:
    /// `out[out_rows[k]] += w[k] · x[in_rows[k]]`, with `out` of `n_out` rows.
    pub fn sparse_rows(
        &mut self,
        w: Var,
        out_rows: Vec<usize>,
        in_rows: Vec<usize>,
        x: Var,
        n_out: usize,
    ) -> Result<Var> {
        let (nx, c) = self.value(x).dims2()?;
        let wd = self.data(w);
        if wd.len() != out_rows.len() || wd.len() != in_rows.len() {
            return invalid(
                "sparse_rows",
                format!(
                    "{} weights, {} / {} indices",
                    wd.len(),
                    out_rows.len(),
                    in_rows.len()
                ),
            );
        }
        let xd = self.data(x);
        let mut out = vec![0.0; n_out * c];
        for ((&r, &i), &wk) in out_rows.iter().zip(&in_rows).zip(wd) {
            if r >= n_out || i >= nx {
                return invalid("sparse_rows", format!("pair ({r}, {i}) out of bounds"));
            }
            let dst = &mut out[r * c..(r + 1) * c];
            for (d, v) in dst.iter_mut().zip(&xd[i * c..(i + 1) * c]) {
                *d += wk * v;
            }
        }
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(
            Tensor::new([n_out, c], out)?,
            Op::SparseRows {
                w,
                x,
                out_rows,
                in_rows,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .to_vec();
        if axis >= first.len() {
            return invalid("concat", format!("axis {axis} out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let n = self.shape(p)[axis];
            let src = self.data(p);
            for o in 0..outer {
                let d0 = o * total * inner + offset * inner;
                out[d0..d0 + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
            offset += n;
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            );
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s0 = o * n * inner + start * inner;
            out.extend_from_slice(&src[s0..s0 + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice { a, axis, start },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of a `(h·w)×c` feature map by `factor`.
    pub fn upsample_nearest(&mut self, a: Var, h: usize, w: usize, factor: usize) -> Result<Var> {
        let (n, _) = self.value(a).dims2()?;
        if n != h * w {
            return invalid("upsample_nearest", format!("{n} rows for {h}x{w}"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let rows: Vec<isize> = (0..oh * ow)
            .map(|p| ((p / ow / factor) * w + (p % ow) / factor) as isize)
            .collect();
        self.gather_rows(a, &rows)
    }

    // ---- composites ----

    /// Rows divided by their L2 norm plus `eps`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank == 0 {
            return invalid("normalize_rows", "scalar input");
        }
        let sq = self.square(a);
        let ss = self.sum(sq, rank - 1)?;
        let norm = self.sqrt(ss)?;
        let norm = self.add_scalar(norm, eps);
        self.div_rows(a, norm)
    }

    /// `(1/τ)·x·y / (|x||y|)` for two vectors, with `1e-12` added to each norm.
    pub fn cosine_similarity(&mut self, x: Var, y: Var, tau: f64) -> Result<Var> {
        if self.shape(x) != self.shape(y) || self.value(x).rank() != 1 {
            return shape_err("cosine_similarity", self.shape(x), self.shape(y));
        }
        let d = self.shape(x)[0];
        let x2 = self.reshape(x, [1, d])?;
        let y2 = self.reshape(y, [1, d])?;
        let xn = self.normalize_rows(x2, COSINE_EPS)?;
        let yn = self.normalize_rows(y2, COSINE_EPS)?;
        let dot = self.matmul_nt(xn, yn)?;
        let dot = self.reshape(dot, Vec::<usize>::new())?;
        Ok(self.scale(dot, 1.0 / tau))
    }

    // ---- backward ----

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(TensorError::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = nodes[a.0].value.dims2().expect("rank 2");
                let (br, bc) = nodes[b.0].value.dims2().expect("rank 2");
                let (m, n) = node.value.dims2().expect("rank 2");
                let gv = MatView::new(g, m, n);
                let av = MatView::new(nodes[a.0].value.data(), ar, ac).t_if(ta);
                let bv = MatView::new(nodes[b.0].value.data(), br, bc).t_if(tb);
                acc(a, &mut |ga| {
                    // d op(a) = g × op(b)ᵀ, stored transposed when ta
                    if ta {
                        gemm(gv, bv.t(), ga, 1, ac, 1.0);
                    } else {
                        gemm(gv, bv.t(), ga, ac, 1, 1.0);
                    }
                });
                acc(b, &mut |gb| {
                    if tb {
                        gemm(av.t(), gv, gb, 1, bc, 1.0);
                    } else {
                        gemm(av.t(), gv, gb, bc, 1, 1.0);
                    }
                });
            }
            &Op::Binary { a, b, kind, bcast } => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                let nb = bd.len().max(1);
                let rep = ad.len() / nb;
                let bi = |i: usize| match bcast {
                    Broadcast::Same => i,
                    Broadcast::Suffix => i % nb,
                    Broadcast::Prefix => i / rep,
                };
                acc(a, &mut |ga| match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        for (x, &gi) in ga.iter_mut().zip(g) {
                            *x += gi;
                        }
                    }
                    BinaryKind::Mul => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bd[bi(i)];
                        }
                    }
                    BinaryKind::Div => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] / bd[bi(i)];
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..g.len() {
                        let j = bi(i);
                        gb[j] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * ad[i],
                            BinaryKind::Div => -g[i] * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                });
            }
            &Op::Unary { a, kind } => {
                let x = nodes[a.0].value.data();
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        let d = match kind {
                            UnaryKind::Exp => out[i],
                            UnaryKind::Log => 1.0 / x[i],
                            // subgradient 0 at the origin keeps zero vectors finite
                            UnaryKind::Sqrt if out[i] == 0.0 => 0.0,
                            UnaryKind::Sqrt => 0.5 / out[i],
                            UnaryKind::Recip => -out[i] * out[i],
                            UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Softplus => sigmoid(x[i]),
                            UnaryKind::ClampMin(m) => {
                                if x[i] >= m {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            &Op::Scale { a, s } => acc(a, &mut |ga| {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi * s;
                }
            }),
            &Op::AddScalar { a } | &Op::Reshape { a } => acc(a, &mut |ga| {
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }),
            &Op::Softmax { a, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            let dot: f64 = (0..n).map(|k| out[at(k)] * g[at(k)]).sum();
                            for k in 0..n {
                                let y = out[at(k)];
                                if y != 0.0 {
                                    ga[at(k)] += y * (g[at(k)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            &Op::LogSoftmax { a, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), axis);
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            let gs: f64 = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                let p = out[at(k)].exp();
                                ga[at(k)] += g[at(k)] - p * gs;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let gam = nodes[gamma.0].value.data();
                acc(*gamma, &mut |gg| {
                    for i in 0..g.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                });
                acc(*beta, &mut |gb| {
                    for i in 0..g.len() {
                        gb[i % d] += g[i];
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, &s) in rstd.iter().enumerate() {
                        let range = r * d..(r + 1) * d;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in range.clone() {
                            let dh = g[i] * gam[i % d];
                            m1 += dh;
                            m2 += dh * xhat[i];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for i in range {
                            let dh = g[i] * gam[i % d];
                            gx[i] += s * (dh - m1 - xhat[i] * m2);
                        }
                    }
                });
            }
            &Op::Sum { a, axis } => {
                let (outer, n, inner) = split_axis(nodes[a.0].value.shape(), axis);
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for k in 0..n {
                            let base = o * n * inner + k * inner;
                            for i in 0..inner {
                                ga[base + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            &Op::SumAll { a } => acc(a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            &Op::Transpose { a } => {
                let (r, c) = nodes[a.0].value.dims2().expect("rank 2");
                acc(a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Gather { a, idx } => acc(*a, &mut |ga| {
                for (k, &i) in idx.iter().enumerate() {
                    if i >= 0 {
                        ga[i as usize] += g[k];
                    }
                }
            }),
            Op::RowDots { a, b, ia, ib } => {
                let c = nodes[a.0].value.shape()[1];
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for (k, (&i, &j)) in ia.iter().zip(ib).enumerate() {
                        if i >= 0 {
                            let i = i as usize;
                            for t in 0..c {
                                ga[i * c + t] += g[k] * bd[j * c + t];
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, (&i, &j)) in ia.iter().zip(ib).enumerate() {
                        if i >= 0 {
                            let i = i as usize;
                            for t in 0..c {
                                gb[j * c + t] += g[k] * ad[i * c + t];
                            }
                        }
                    }
                });
            }
            Op::SparseRows {
                w,
                x,
                out_rows,
                in_rows,
            } => {
                let c = nodes[x.0].value.shape()[1];
                let (wd, xd) = (nodes[w.0].value.data(), nodes[x.0].value.data());
                acc(*w, &mut |gw| {
                    for (k, (&r, &i)) in out_rows.iter().zip(in_rows).enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        gw[k] += gr
                            .iter()
                            .zip(&xd[i * c..(i + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                });
                acc(*x, &mut |gx| {
                    for (k, (&r, &i)) in out_rows.iter().zip(in_rows).enumerate() {
                        let wk = wd[k];
                        for t in 0..c {
                            gx[i * c + t] += wk * g[r * c + t];
                        }
                    }
                });
            }
            Op::ScatterAdd { a, idx } => acc(*a, &mut |ga| {
                for (k, &i) in idx.iter().enumerate() {
                    ga[k] += g[i];
                }
            }),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let s0 = o * total * inner + offset * inner;
                            for (x, &gi) in gp[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(&g[s0..s0 + n * inner])
                            {
                                *x += gi;
                            }
                        }
                    });
                    offset += n;
                }
            }
            &Op::Slice { a, axis, start } => {
                let (outer, n, inner) = split_axis(nodes[a.0].value.shape(), axis);
                let len = node.value.shape()[axis];
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        let s0 = o * n * inner + start * inner;
                        for (x, &gi) in ga[s0..s0 + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *x += gi;
                        }
                    }
                });
            }
        }
    }
}

pub const COSINE_EPS: f64 = 1e-12;

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

/// Max-stabilized softmax along `axis`. `-∞` entries map to exactly zero.
pub fn softmax_values(src: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= src.rank() {
        return invalid(
            "softmax",
            format!("axis {axis} out of range for {:?}", src.shape()),
        );
    }
    let (outer, n, inner) = split_axis(src.shape(), axis);
    let x = src.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * n * inner + k * inner + i;
            let m = (0..n).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(TensorError::InvalidSlice {
                    slice: o * inner + i,
                });
            }
            let mut z = 0.0;
            for k in 0..n {
                let e = if x[at(k)] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (x[at(k)] - m).exp()
                };
                out[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                out[at(k)] /= z;
            }
        }
    }
    Tensor::new(src.shape().to_vec(), out)
}
