//! Reverse-mode differentiation over a recorded graph of tensor ops.
//!
//! Every op appends one node holding its forward value; node ids are handed
//! out in construction order, so a node's inputs always precede it and
//! [`Graph::backward`] simply walks the node list in reverse.
//!
//! The op set is deliberately small: exactly what the embedding, attention,
//! gating, interaction towers, batch normalization and logloss head need.

use crate::error::{PhnError, Result};
use crate::scalar::{sigmoid, total, Scalar};
use crate::tensor::{ParamId, ParameterStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-column batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population variance (divides by the batch size).
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    AddBroadcast(NodeId, NodeId),
    MulBroadcast(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    ScaleFields(NodeId, NodeId),
    FieldMix(NodeId, NodeId),
    Scale(NodeId, T),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, T),
    SoftmaxRows(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Gather {
        table: NodeId,
        rows: Vec<usize>,
    },
    Reshape(NodeId),
    SliceLast {
        a: NodeId,
        start: usize,
    },
    ConcatLast(Vec<NodeId>),
    SoftSelect {
        se: NodeId,
        sa: NodeId,
        theta: NodeId,
    },
    Sum(NodeId),
    Mean(NodeId),
    LogLoss {
        probs: NodeId,
        labels: Vec<T>,
        clamp: T,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A recorded computation. Build it with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to every node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`, or `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `id`, zeros when the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph<T>, id: NodeId) -> Vec<T> {
        self.get(id)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); graph.value(id).len()])
    }
}

fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> PhnError {
    PhnError::Dimension {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, delta: Vec<T>) {
    match &mut grads[id.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += *d),
        slot @ None => *slot = Some(delta),
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`
fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (c, b) in row.iter_mut().zip(brow) {
                *c += aip * *b;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = total(arow.iter().zip(brow).map(|(x, y)| *x * *y));
        }
    }
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (c, b) in row.iter_mut().zip(brow) {
                *c += api * *b;
            }
        }
    }
    c
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Smallest `|x|` fed to any LeakyReLU so far, or `None` without one.
    /// Central differences are only meaningful when this exceeds the step.
    pub fn kink_margin(&self) -> Option<T> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu(a, _) => Some(self.vals(a)),
                _ => None,
            })
            .flat_map(|v| v.iter().map(|x| x.abs()))
            .fold(None, |m, x| Some(m.map_or(x, |m: T| if x < m { x } else { m })))
    }

    fn vals(&self, id: NodeId) -> &[T] {
        self.nodes[id.0].value.values()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(PhnError::Numeric(format!("non-finite output from {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push_shaped(&mut self, shape: &[usize], values: Vec<T>, op: Op<T>) -> Result<NodeId> {
        let value = Tensor::new(shape.to_vec(), values)?;
        self.push(value, op)
    }

    /// Constant leaf. Its gradient is still computed and can be read back.
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        let mut value = value;
        value.clear_grad();
        self.push(value, Op::Input)
    }

    /// Leaf bound to a parameter; [`Graph::write_param_grads`] routes its
    /// gradient back into the store.
    pub fn param(&mut self, store: &ParameterStore<T>, id: ParamId) -> Result<NodeId> {
        let mut value = store.get(id).clone();
        value.clear_grad();
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm(self.vals(a), self.vals(b), m, k, n);
        self.push_shaped(&[m, n], out, Op::MatMul(a, b))
    }

    fn bmm_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(dim_err("batch_matmul", &sa, &sb));
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let mut out = Vec::with_capacity(batch * m * n);
        for s in 0..batch {
            let ablk = &av[s * m * k..(s + 1) * m * k];
            let bblk = &bv[s * k * n..(s + 1) * k * n];
            if transpose_b {
                out.extend(gemm_nt(ablk, bblk, m, k, n));
            } else {
                out.extend(gemm(ablk, bblk, m, k, n));
            }
        }
        self.push_shaped(&[batch, m, n], out, Op::BatchMatMul { a, b, transpose_b })
    }

    /// Per-sample product `[B,m,k] · [B,k,n] → [B,m,n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, false)
    }

    /// Per-sample product against a transposed right side:
    /// `[B,m,k] · [B,n,k]ᵀ → [B,m,n]`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, true)
    }

    fn zip_same(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let out = self.vals(a).iter().zip(self.vals(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push_shaped(&shape, out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, "hadamard", |x, y| x * y, Op::Hadamard(a, b))
    }

    fn check_trailing(&self, x: NodeId, v: NodeId, name: &'static str) -> Result<()> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sv.len() > sx.len() || sx[sx.len() - sv.len()..] != *sv {
            return Err(dim_err(name, sx, sv));
        }
        Ok(())
    }

    /// `x + v` where `v`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.check_trailing(x, v, "add_broadcast")?;
        let vv = self.vals(v);
        let out = self
            .vals(x)
            .chunks(vv.len())
            .flat_map(|row| row.iter().zip(vv).map(|(a, b)| *a + *b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_shaped(&shape, out, Op::AddBroadcast(x, v))
    }

    /// `x ⊙ v` where `v`'s shape equals the trailing axes of `x`.
    pub fn mul_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.check_trailing(x, v, "mul_broadcast")?;
        let vv = self.vals(v);
        let out = self
            .vals(x)
            .chunks(vv.len())
            .flat_map(|row| row.iter().zip(vv).map(|(a, b)| *a * *b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_shaped(&shape, out, Op::MulBroadcast(x, v))
    }

    /// Scales every row `i` of `x` (first axis) by `s[i]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        let rows = sx[0];
        if self.value(s).len() != rows {
            return Err(dim_err("scale_rows", &sx, &ss));
        }
        let width = self.value(x).len() / rows.max(1);
        let sv = self.vals(s);
        let out = self
            .vals(x)
            .chunks(width.max(1))
            .zip(sv)
            .flat_map(|(row, k)| row.iter().map(move |a| *a * *k))
            .collect();
        self.push_shaped(&sx, out, Op::ScaleRows(x, s))
    }

    /// `x[b,f,:] · u[f]` for a field matrix `x: [B,F,d]`.
    pub fn scale_fields(&mut self, x: NodeId, u: NodeId) -> Result<NodeId> {
        let (sx, su) = (self.shape(x).to_vec(), self.shape(u).to_vec());
        if sx.len() != 3 || self.value(u).len() != sx[1] {
            return Err(dim_err("scale_fields", &sx, &su));
        }
        let d = sx[2];
        let uv = self.vals(u);
        let f = sx[1];
        let out = self
            .vals(x)
            .chunks(d)
            .enumerate()
            .flat_map(|(r, v)| {
                let k = uv[r % f];
                v.iter().map(move |a| *a * k)
            })
            .collect();
        self.push_shaped(&sx, out, Op::ScaleFields(x, u))
    }

    /// `y[b,i,:] = Σ_j K[i,j] · e[b,j,:]` for `K: [F,F]`, `e: [B,F,d]`.
    pub fn field_mix(&mut self, kernel: NodeId, e: NodeId) -> Result<NodeId> {
        let (sk, se) = (self.shape(kernel).to_vec(), self.shape(e).to_vec());
        if se.len() != 3 || sk != [se[1], se[1]] {
            return Err(dim_err("field_mix", &sk, &se));
        }
        let (batch, f, d) = (se[0], se[1], se[2]);
        let (kv, ev) = (self.vals(kernel), self.vals(e));
        let mut out = Vec::with_capacity(batch * f * d);
        for b in 0..batch {
            out.extend(gemm(kv, &ev[b * f * d..(b + 1) * f * d], f, f, d));
        }
        self.push_shaped(&se, out, Op::FieldMix(kernel, e))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let out = self.vals(a).iter().map(|x| *x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push_shaped(&shape, out, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.vals(a).iter().map(|x| sigmoid(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_shaped(&shape, out, Op::Sigmoid(a))
    }

    /// LeakyReLU; the derivative at exactly zero is taken to be `slope`.
    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> Result<NodeId> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(PhnError::config(
                "leaky_relu_slope",
                format!("must lie in (0, 1), got {slope}"),
            ));
        }
        let out = self
            .vals(a)
            .iter()
            .map(|x| if *x > T::zero() { *x } else { *x * slope })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_shaped(&shape, out, Op::LeakyRelu(a, slope))
    }

    /// Softmax over the last axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).last_dim();
        if n == 0 {
            return Err(dim_err("softmax_rows", self.shape(a), &[1]));
        }
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.vals(a).chunks(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for x in row {
                let e = (*x - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let shape = self.shape(a).to_vec();
        self.push_shaped(&shape, out, Op::SoftmaxRows(a))
    }

    fn check_affine(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(dim_err("batch_norm", sx, &[0, 0]));
        }
        let (b, n) = (sx[0], sx[1]);
        for p in [gamma, beta] {
            if self.value(p).len() != n {
                return Err(dim_err("batch_norm", sx, self.shape(p)));
            }
        }
        Ok((b, n))
    }

    /// Train-mode batch normalization of `x: [B,n]` with learnable affine
    /// `gamma`, `beta: [n]`. Also returns the batch statistics so the caller
    /// can fold them into its running averages.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    ) -> Result<(NodeId, BatchStats<T>)> {
        let (b, n) = self.check_affine(x, gamma, beta)?;
        if b < 2 {
            return Err(PhnError::BatchSize(b));
        }
        let xv = self.vals(x);
        let bt = T::of(b as f64);
        let mut mean = vec![T::zero(); n];
        for row in xv.chunks(n) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += *v);
        }
        mean.iter_mut().for_each(|m| *m /= bt);
        let mut var = vec![T::zero(); n];
        for row in xv.chunks(n) {
            for j in 0..n {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= bt);
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (out, normalized) = self.affine_normalize(x, gamma, beta, &mean, &inv_std);
        let id = self.push_shaped(
            &[b, n],
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: true,
            },
        )?;
        Ok((id, BatchStats { mean, var }))
    }

    /// Eval-mode batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let (b, n) = self.check_affine(x, gamma, beta)?;
        if running_mean.len() != n || running_var.len() != n {
            return Err(dim_err("batch_norm_eval", &[b, n], &[running_mean.len()]));
        }
        let inv_std: Vec<T> = running_var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (out, normalized) = self.affine_normalize(x, gamma, beta, running_mean, &inv_std);
        self.push_shaped(
            &[b, n],
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: false,
            },
        )
    }

    fn affine_normalize(&self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
        let n = mean.len();
        let (gv, bv) = (self.vals(gamma), self.vals(beta));
        let xv = self.vals(x);
        let mut normalized = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(n) {
            for j in 0..n {
                let h = (row[j] - mean[j]) * inv_std[j];
                normalized.push(h);
                out.push(gv[j] * h + bv[j]);
            }
        }
        (out, normalized)
    }

    /// Row lookup `table[rows[i], :]` producing `[rows.len(), d]`.
    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(dim_err("gather_rows", &st, &[rows.len()]));
        }
        let (r, d) = (st[0], st[1]);
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(PhnError::Contract(format!(
                "row index {bad} out of range for table with {r} rows"
            )));
        }
        let tv = self.vals(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push_shaped(
            &[rows.len(), d],
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape(a))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let n = self.value(a).last_dim();
        if start + len > n || len == 0 {
            return Err(dim_err("slice_last", &sa, &[start, len]));
        }
        let out = self
            .vals(a)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = sa;
        *shape.last_mut().expect("non-scalar") = len;
        self.push_shaped(&shape, out, Op::SliceLast { a, start })
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| PhnError::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        for p in parts {
            let sp = self.shape(*p);
            if sp[..sp.len() - 1] != *lead {
                return Err(dim_err("concat_last", self.shape(first), sp));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.vals(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push_shaped(&shape, out, Op::ConcatLast(parts.to_vec()))
    }

    /// Soft selection `G ⊙ sa + (1 − G) ⊙ se` with `G = σ(theta)`.
    ///
    /// `theta` matches the trailing axes of `se`/`sa` and is shared across the
    /// batch. Each output is clamped into `[min(sa, se), max(sa, se)]` so that
    /// rounding can never push it outside the convex hull.
    pub fn soft_select(&mut self, se: NodeId, sa: NodeId, theta: NodeId) -> Result<NodeId> {
        if self.shape(se) != self.shape(sa) {
            return Err(dim_err("soft_select", self.shape(se), self.shape(sa)));
        }
        self.check_trailing(se, theta, "soft_select")?;
        let gates: Vec<T> = self.vals(theta).iter().map(|t| sigmoid(*t)).collect();
        let width = gates.len();
        let out = self
            .vals(se)
            .chunks(width)
            .zip(self.vals(sa).chunks(width))
            .flat_map(|(ser, sar)| {
                ser.iter()
                    .zip(sar)
                    .zip(&gates)
                    .map(|((e, a), g)| {
                        let y = *g * *a + (T::one() - *g) * *e;
                        y.max(e.min(*a)).min(e.max(*a))
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let shape = self.shape(se).to_vec();
        self.push_shaped(&shape, out, Op::SoftSelect { se, sa, theta })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = total(self.vals(a).iter().copied());
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(PhnError::EmptyBatch);
        }
        let s: T = total(self.vals(a).iter().copied());
        self.push(Tensor::scalar(s / T::of(n as f64)), Op::Mean(a))
    }

    /// Mean binary cross-entropy of probabilities against `labels`, with
    /// probabilities clamped to `[clamp, 1 − clamp]` before the logarithm.
    pub fn logloss(&mut self, probs: NodeId, labels: &[T], clamp: T) -> Result<NodeId> {
        let pv = self.vals(probs);
        if pv.len() != labels.len() {
            return Err(dim_err("logloss", self.shape(probs), &[labels.len()]));
        }
        if pv.is_empty() {
            return Err(PhnError::EmptyBatch);
        }
        let loss = logloss_value(pv, labels, clamp);
        self.push(
            Tensor::scalar(loss),
            Op::LogLoss {
                probs,
                labels: labels.to_vec(),
                clamp,
            },
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(PhnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.values();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                accumulate(grads, *a, gemm_nt(dy, self.vals(*b), m, n, k));
                accumulate(grads, *b, gemm_tn(self.vals(*a), dy, m, k, n));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.vals(*a), self.vals(*b));
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for s in 0..batch {
                    let ablk = &av[s * m * k..(s + 1) * m * k];
                    let bblk = &bv[s * k * n..(s + 1) * k * n];
                    let dblk = &dy[s * m * n..(s + 1) * m * n];
                    if *transpose_b {
                        // y = a·bᵀ: da = dy·b, db = dyᵀ·a
                        da.extend(gemm(dblk, bblk, m, n, k));
                        db.extend(gemm_tn(dblk, ablk, m, n, k));
                    } else {
                        da.extend(gemm_nt(dblk, bblk, m, n, k));
                        db.extend(gemm_tn(ablk, dblk, m, k, n));
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, dy.to_vec());
                accumulate(grads, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, dy.to_vec());
                accumulate(grads, *b, dy.iter().map(|g| -*g).collect());
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                accumulate(grads, *a, dy.iter().zip(bv).map(|(g, b)| *g * *b).collect());
                accumulate(grads, *b, dy.iter().zip(av).map(|(g, a)| *g * *a).collect());
            }
            Op::AddBroadcast(x, v) => {
                let w = self.value(*v).len();
                let mut dv = vec![T::zero(); w];
                for row in dy.chunks(w) {
                    dv.iter_mut().zip(row).for_each(|(d, g)| *d += *g);
                }
                accumulate(grads, *x, dy.to_vec());
                accumulate(grads, *v, dv);
            }
            Op::MulBroadcast(x, v) => {
                let vv = self.vals(*v);
                let w = vv.len();
                let xv = self.vals(*x);
                let mut dv = vec![T::zero(); w];
                let mut dx = Vec::with_capacity(dy.len());
                for (grow, xrow) in dy.chunks(w).zip(xv.chunks(w)) {
                    for j in 0..w {
                        dx.push(grow[j] * vv[j]);
                        dv[j] += grow[j] * xrow[j];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *v, dv);
            }
            Op::ScaleRows(x, s) => {
                let sv = self.vals(*s);
                let width = dy.len() / sv.len().max(1);
                let xv = self.vals(*x);
                let mut dx = Vec::with_capacity(dy.len());
                let mut ds = vec![T::zero(); sv.len()];
                for (i, (grow, xrow)) in dy.chunks(width).zip(xv.chunks(width)).enumerate() {
                    for (g, xv) in grow.iter().zip(xrow) {
                        dx.push(*g * sv[i]);
                        ds[i] += *g * *xv;
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *s, ds);
            }
            Op::ScaleFields(x, u) => {
                let sx = self.shape(*x);
                let (f, d) = (sx[1], sx[2]);
                let uv = self.vals(*u);
                let xv = self.vals(*x);
                let mut dx = Vec::with_capacity(dy.len());
                let mut du = vec![T::zero(); f];
                for (r, (grow, xrow)) in dy.chunks(d).zip(xv.chunks(d)).enumerate() {
                    let fi = r % f;
                    for (g, xv) in grow.iter().zip(xrow) {
                        dx.push(*g * uv[fi]);
                        du[fi] += *g * *xv;
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *u, du);
            }
            Op::FieldMix(kernel, e) => {
                let se = self.shape(*e);
                let (batch, f, d) = (se[0], se[1], se[2]);
                let (kv, ev) = (self.vals(*kernel), self.vals(*e));
                let mut dk = vec![T::zero(); f * f];
                let mut de = Vec::with_capacity(ev.len());
                for b in 0..batch {
                    let eblk = &ev[b * f * d..(b + 1) * f * d];
                    let gblk = &dy[b * f * d..(b + 1) * f * d];
                    // dK += dy_b · e_bᵀ ; de_b = Kᵀ · dy_b
                    let part = gemm_nt(gblk, eblk, f, d, f);
                    dk.iter_mut().zip(part).for_each(|(a, p)| *a += p);
                    de.extend(gemm_tn(kv, gblk, f, f, d));
                }
                accumulate(grads, *kernel, dk);
                accumulate(grads, *e, de);
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, dy.iter().map(|g| *g * *c).collect());
            }
            Op::Sigmoid(a) => {
                let dx = dy.iter().zip(y).map(|(g, s)| *g * *s * (T::one() - *s)).collect();
                accumulate(grads, *a, dx);
            }
            Op::LeakyRelu(a, slope) => {
                let dx = dy
                    .iter()
                    .zip(self.vals(*a))
                    .map(|(g, x)| if *x > T::zero() { *g } else { *g * *slope })
                    .collect();
                accumulate(grads, *a, dx);
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.last_dim();
                let mut dx = Vec::with_capacity(dy.len());
                for (grow, yrow) in dy.chunks(n).zip(y.chunks(n)) {
                    let dot: T = total(grow.iter().zip(yrow).map(|(g, s)| *g * *s));
                    dx.extend(grow.iter().zip(yrow).map(|(g, s)| *s * (*g - dot)));
                }
                accumulate(grads, *a, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let n = inv_std.len();
                let b = dy.len() / n;
                let gv = self.vals(*gamma);
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for (grow, hrow) in dy.chunks(n).zip(normalized.chunks(n)) {
                    for j in 0..n {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                let dx = if *batch_stats {
                    // dx = inv/B · (B·dĥ − Σdĥ − ĥ·Σ(dĥ·ĥ)), dĥ = dy·γ
                    let bt = T::of(b as f64);
                    let mut sum_dh = vec![T::zero(); n];
                    let mut sum_dh_h = vec![T::zero(); n];
                    for (grow, hrow) in dy.chunks(n).zip(normalized.chunks(n)) {
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            sum_dh[j] += dh;
                            sum_dh_h[j] += dh * hrow[j];
                        }
                    }
                    let mut dx = Vec::with_capacity(dy.len());
                    for (grow, hrow) in dy.chunks(n).zip(normalized.chunks(n)) {
                        for j in 0..n {
                            let dh = grow[j] * gv[j];
                            dx.push(inv_std[j] / bt * (bt * dh - sum_dh[j] - hrow[j] * sum_dh_h[j]));
                        }
                    }
                    dx
                } else {
                    dy.chunks(n)
                        .flat_map(|grow| (0..n).map(move |j| grow[j] * gv[j] * inv_std[j]))
                        .collect()
                };
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Gather { table, rows } => {
                let d = node.value.last_dim();
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for k in 0..d {
                        dt[r * d + k] += dy[i * d + k];
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Reshape(a) => accumulate(grads, *a, dy.to_vec()),
            Op::SliceLast { a, start } => {
                let n = self.value(*a).last_dim();
                let len = node.value.last_dim();
                let mut dx = vec![T::zero(); self.value(*a).len()];
                for (r, grow) in dy.chunks(len).enumerate() {
                    dx[r * n + start..r * n + start + len].copy_from_slice(grow);
                }
                accumulate(grads, *a, dx);
            }
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = dy.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    accumulate(grads, *p, dp);
                }
            }
            Op::SoftSelect { se, sa, theta } => {
                let gates: Vec<T> = self.vals(*theta).iter().map(|t| sigmoid(*t)).collect();
                let w = gates.len();
                let (sev, sav) = (self.vals(*se), self.vals(*sa));
                let mut dse = Vec::with_capacity(dy.len());
                let mut dsa = Vec::with_capacity(dy.len());
                let mut dtheta = vec![T::zero(); w];
                for (i, g) in dy.iter().enumerate() {
                    let j = i % w;
                    let gate = gates[j];
                    dsa.push(*g * gate);
                    dse.push(*g * (T::one() - gate));
                    dtheta[j] += *g * (sav[i] - sev[i]) * gate * (T::one() - gate);
                }
                accumulate(grads, *se, dse);
                accumulate(grads, *sa, dsa);
                accumulate(grads, *theta, dtheta);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![dy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![dy[0] / T::of(n as f64); n]);
            }
            Op::LogLoss { probs, labels, clamp } => {
                let pv = self.vals(*probs);
                let n = T::of(pv.len() as f64);
                let hi = T::one() - *clamp;
                let dp = pv
                    .iter()
                    .zip(labels)
                    .map(|(p, l)| {
                        if *p < *clamp || *p > hi {
                            T::zero()
                        } else {
                            dy[0] * (-*l / *p + (T::one() - *l) / (T::one() - *p)) / n
                        }
                    })
                    .collect();
                accumulate(grads, *probs, dp);
            }
        }
    }

    /// Adds the gradient of every parameter leaf into the store's grad slots.
    pub fn write_param_grads(&self, grads: &Gradients<T>, store: &mut ParameterStore<T>) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads.get(NodeId(idx)) {
                    store.get_mut(pid).accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[clamp, 1 − clamp]`.
pub fn logloss_value<T: Scalar>(probs: &[T], labels: &[T], clamp: T) -> T {
    let hi = T::one() - clamp;
    let sum = total(probs.iter().zip(labels).map(|(p, y)| {
        let p = p.max(clamp).min(hi);
        -(*y * p.ln() + (T::one() - *y) * (T::one() - p).ln())
    }));
    sum / T::of(probs.len() as f64)
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::BatchMatMul { .. } => "batch_matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Hadamard(..) => "hadamard",
        Op::AddBroadcast(..) => "add_broadcast",
        Op::MulBroadcast(..) => "mul_broadcast",
        Op::ScaleRows(..) => "scale_rows",
        Op::ScaleFields(..) => "scale_fields",
        Op::FieldMix(..) => "field_mix",
        Op::Scale(..) => "scale",
        Op::Sigmoid(_) => "sigmoid",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Gather { .. } => "gather_rows",
        Op::Reshape(_) => "reshape",
        Op::SliceLast { .. } => "slice_last",
        Op::ConcatLast(_) => "concat_last",
        Op::SoftSelect { .. } => "soft_select",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::LogLoss { .. } => "logloss",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::new();
        let i2 = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 2.0, 3.0, 4.0]);

        let col = g.input(t(&[2, 1], &[5.0, 6.0])).unwrap();
        let y = g.matmul(a, col).unwrap();
        assert_eq!(g.value(y).values(), &[17.0, 39.0]);
        assert_eq!(g.shape(y), &[2, 1]);

        let z = g.input(Tensor::zeros(vec![2, 3])).unwrap();
        let any = g.input(t(&[3, 4], &[1.5; 12])).unwrap();
        let y = g.matmul(z, any).unwrap();
        assert_eq!(g.value(y).values(), &[0.0; 8]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.input(Tensor::zeros(vec![2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn hadamard_cases() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.input(t(&[2], &[3.0, 4.0])).unwrap();
        let y = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(y).values(), &[3.0, 8.0]);
        let ones = g.input(Tensor::ones(vec![2])).unwrap();
        let y = g.hadamard(a, ones).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 2.0]);
        let zeros = g.input(Tensor::zeros(vec![2])).unwrap();
        let y = g.hadamard(a, zeros).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 0.0]);
        let c = g.input(Tensor::zeros(vec![3])).unwrap();
        assert!(matches!(g.hadamard(a, c), Err(PhnError::Dimension { .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let a = g.input(t(&[1, 2], &[0.0, 0.0])).unwrap();
        let y = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(y).values(), &[0.5, 0.5]);

        let a = g.input(t(&[1, 2], &[0.0, 2f64.ln()])).unwrap();
        let y = g.softmax_rows(a).unwrap();
        let v = g.value(y).values();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-15);

        let a = g.input(t(&[1, 2], &[1000.0, 1000.0])).unwrap();
        let y = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(y).values(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_cases() {
        let mut g = Graph::new();
        let z = g.input(t(&[3], &[0.0, 2.5, -2.5])).unwrap();
        let s = g.sigmoid(z).unwrap();
        let v = g.value(s).values().to_vec();
        assert_eq!(v[0], 0.5);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
        let picked = g.slice_last(s, 0, 1).unwrap();
        let loss = g.sum(picked).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap()[0], 0.25);
    }

    #[test]
    fn leaky_relu_cases() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[2.0, -1.0, 0.0])).unwrap();
        let y = g.leaky_relu(x, 0.01).unwrap();
        assert_eq!(g.value(y).values(), &[2.0, -0.01, 0.0]);
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.01, 0.01]);
        assert!(matches!(g.leaky_relu(x, 1.5), Err(PhnError::Config { .. })));
        assert!(g.leaky_relu(x, 0.0).is_err());
    }

    #[test]
    fn batch_norm_cases() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 1], &[1.0, 3.0])).unwrap();
        let gamma = g.input(Tensor::ones(vec![1])).unwrap();
        let beta = g.input(Tensor::zeros(vec![1])).unwrap();
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 0.0).unwrap();
        assert_eq!(g.value(y).values(), &[-1.0, 1.0]);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);

        let c = g.input(t(&[3, 1], &[4.0, 4.0, 4.0])).unwrap();
        let (y, _) = g.batch_norm_train(c, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 0.0, 0.0]);

        let x = g.input(t(&[2, 1], &[0.3, -7.0])).unwrap();
        let y = g.batch_norm_eval(x, gamma, beta, &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(g.value(y).values(), &[0.3, -7.0]);

        let single = g.input(t(&[1, 1], &[1.0])).unwrap();
        assert!(matches!(
            g.batch_norm_train(single, gamma, beta, 1e-5),
            Err(PhnError::BatchSize(1))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], &[1.0, -2.0, 3.0, 4.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_sigmoid_of_product_at_zero() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::zeros(vec![1, 1]));
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let x = g.input(t(&[1, 1], &[1.0])).unwrap();
        let z = g.matmul(x, wn).unwrap();
        let s = g.sigmoid(z).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        g.write_param_grads(&grads, &mut store).unwrap();
        assert_eq!(store.get(w).grad().unwrap(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(g.backward(x), Err(PhnError::Contract(_))));
    }

    #[test]
    fn fan_out_gradients_add() {
        // f = sigmoid(x) + x⊙x, both branches read x.
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.5, -1.0])).unwrap();
        let a = g.sigmoid(x).unwrap();
        let b = g.hadamard(x, x).unwrap();
        let f = g.add(a, b).unwrap();
        let loss = g.sum(f).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, xv) in [0.5f64, -1.0].iter().enumerate() {
            let s = sigmoid(*xv);
            let expected = s * (1.0 - s) + 2.0 * xv;
            assert!((grads.get(x).unwrap()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn gather_scatter_adds_duplicates() {
        let mut g = Graph::new();
        let table = g.input(t(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        let rows = g.gather_rows(table, &[0, 2, 2]).unwrap();
        assert_eq!(g.value(rows).values(), &[0.0, 1.0, 4.0, 5.0, 4.0, 5.0]);
        let loss = g.sum(rows).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn soft_select_boundaries() {
        let mut g = Graph::new();
        let se = g.input(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let sa = g.input(t(&[1, 2], &[3.0, 6.0])).unwrap();
        let half = g.input(Tensor::zeros(vec![2])).unwrap();
        let y = g.soft_select(se, sa, half).unwrap();
        assert_eq!(g.value(y).values(), &[2.0, 4.0]);
        let hi = g.input(t(&[2], &[1000.0, 1000.0])).unwrap();
        let y = g.soft_select(se, sa, hi).unwrap();
        assert_eq!(g.value(y).values(), &[3.0, 6.0]);
        let lo = g.input(t(&[2], &[-1000.0, -1000.0])).unwrap();
        let y = g.soft_select(se, sa, lo).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 2.0]);
    }

    #[test]
    fn logloss_clamps() {
        let p = [1.0f64 - 1e-7];
        let v = logloss_value(&p, &[1.0], 1e-7);
        assert!((v - 1e-7).abs() < 1e-12);
        let v = logloss_value(&[0.5f64], &[1.0], 1e-7);
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let v = logloss_value(&[1.0f64, 0.0], &[0.0, 1.0], 1e-7);
        assert!(v.is_finite());
    }
}
