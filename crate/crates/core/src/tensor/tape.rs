use std::collections::HashMap;

use super::kernels::{self, Broadcast};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Sub {
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        plan: Broadcast,
    },
    Scale {
        a: Var,
        s: f64,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Abs {
        a: Var,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        map: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    IndexSelect {
        a: Var,
        idx: Vec<usize>,
        row: usize,
    },
    Sum {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Graph construction and the backward sweep are single-threaded; independent
/// tapes may be driven from separate threads against a shared [`ParamStore`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients in parameter-id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(move |&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records `t` as a leaf; gradients flow to it when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, tracked)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Tracked leaf, used for differentiating with respect to inputs.
    pub fn input(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = &store.get(id).tensor;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// `a[..., k] * b[k, n] -> [..., n]`; leading dims of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[a.0].data.len() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, tracked))
    }

    /// Batched product over a shared leading batch extent:
    /// `a[B, m, k] * b[B, k, n]`, or `a[B, m, k] * b[B, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (batch, m, k) = if ok { (sa[0], sa[1], sa[2]) } else { (0, 0, 0) };
        let (kb, n) = if trans_b && ok { (sb[2], sb[1]) } else if ok { (sb[1], sb[2]) } else { (0, 0) };
        if !ok || kb != k {
            return Err(Error::shape("bmm", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.value(a), self.value(b));
            for bi in 0..batch {
                let a_blk = &da[bi * m * k..(bi + 1) * m * k];
                let b_blk = &db[bi * k * n..(bi + 1) * k * n];
                let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    kernels::matmul_bt_into(a_blk, b_blk, o_blk, m, k, n);
                } else {
                    kernels::matmul_into(a_blk, b_blk, o_blk, m, k, n);
                }
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            tracked,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let name = match kind {
            0 => "add",
            1 => "sub",
            _ => "mul",
        };
        let plan = Broadcast::new(name, self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; plan.numel()];
        {
            let (da, db) = (self.value(a), self.value(b));
            let f = match kind {
                0 => |x: f64, y: f64| x + y,
                1 => |x: f64, y: f64| x - y,
                _ => |x: f64, y: f64| x * y,
            };
            plan.for_each_row(|o, oa, ob, len, sa, sb| {
                let dst = &mut out[o..o + len];
                match (sa, sb) {
                    (1, 1) => {
                        let (xs, ys) = (&da[oa..oa + len], &db[ob..ob + len]);
                        for ((d, &x), &y) in dst.iter_mut().zip(xs).zip(ys) {
                            *d = f(x, y);
                        }
                    }
                    (1, 0) => {
                        let y = db[ob];
                        for (d, &x) in dst.iter_mut().zip(&da[oa..oa + len]) {
                            *d = f(x, y);
                        }
                    }
                    (0, 1) => {
                        let x = da[oa];
                        for (d, &y) in dst.iter_mut().zip(&db[ob..ob + len]) {
                            *d = f(x, y);
                        }
                    }
                    _ => {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = f(da[oa + j * sa], db[ob + j * sb]);
                        }
                    }
                }
            });
        }
        let tracked = self.tracked(a) || self.tracked(b);
        let shape = plan.out_shape.clone();
        let op = match kind {
            0 => Op::Add { a, b, plan },
            1 => Op::Sub { a, b, plan },
            _ => Op::Mul { a, b, plan },
        };
        Ok(self.push(shape, out, op, tracked))
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    /// Broadcasting element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * s).collect();
        let (shape, tracked) = (self.shape(a).to_vec(), self.tracked(a));
        self.push(shape, out, Op::Scale { a, s }, tracked)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|v| v + c).collect();
        let (shape, tracked) = (self.shape(a).to_vec(), self.tracked(a));
        self.push(shape, out, Op::AddScalar { a }, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&v| v.max(0.0)).collect();
        let (shape, tracked) = (self.shape(a).to_vec(), self.tracked(a));
        self.push(shape, out, Op::Relu { a }, tracked)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|v| v.abs()).collect();
        let (shape, tracked) = (self.shape(a).to_vec(), self.tracked(a));
        self.push(shape, out, Op::Abs { a }, tracked)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    z += e;
                }
                let inv = 1.0 / z;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            tracked,
        ))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x);
        let (g, bta) = (self.value(gamma), self.value(beta));
        let rows = src.len() / d.max(1);
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bta[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let tracked = self.tracked(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, tracked))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&ax| ax < shape.len() && !std::mem::replace(&mut seen[ax], true));
        if !valid {
            return Err(Error::shape("permute", &shape, axes));
        }
        let map = kernels::permute_map(&shape, axes);
        let src = self.value(a);
        let out = map.iter().map(|&i| src[i]).collect();
        let out_shape = axes.iter().map(|&ax| shape[ax]).collect();
        let tracked = self.tracked(a);
        Ok(self.push(out_shape, out, Op::Permute { a, map }, tracked))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            let inner: usize = s[axis..].iter().product();
            widths.push(inner);
        }
        let outer: usize = base[..axis].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            tracked,
        ))
    }

    /// Gathers slices along axis 0: `out[i] = a[idx[i]]`.
    pub fn index_select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::shape("index_select", &shape, &[]))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("index_select", &shape, &[bad]));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let tracked = self.tracked(a);
        Ok(self.push(
            out_shape,
            out,
            Op::IndexSelect {
                a,
                idx: idx.to_vec(),
                row,
            },
            tracked,
        ))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(Vec::new(), vec![s], Op::Sum { a }, tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `x * w + b` with `w[in, out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_unstable_by_key(|&(id, _)| id);
        Ok(Gradients { grads, params })
    }

    /// Backward sweep accumulated straight into the store's gradient buffers.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].data.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    kernels::acc_grad_lhs(g, self.value(b), ga, m, k, n);
                }
                if let Some(gb) = self.slot(grads, b) {
                    kernels::acc_grad_rhs(self.value(a), g, gb, m, k, n);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (da, db) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    for bi in 0..batch {
                        let gblk = &g[bi * m * n..(bi + 1) * m * n];
                        let bblk = &db[bi * k * n..(bi + 1) * k * n];
                        let gablk = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            kernels::acc_grad_lhs_bt(gblk, bblk, gablk, m, k, n);
                        } else {
                            kernels::acc_grad_lhs(gblk, bblk, gablk, m, k, n);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for bi in 0..batch {
                        let gblk = &g[bi * m * n..(bi + 1) * m * n];
                        let ablk = &da[bi * m * k..(bi + 1) * m * k];
                        let gbblk = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            kernels::acc_grad_rhs_bt(ablk, gblk, gbblk, m, k, n);
                        } else {
                            kernels::acc_grad_rhs(ablk, gblk, gbblk, m, k, n);
                        }
                    }
                }
            }
            Op::Add { a, b, plan } | Op::Sub { a, b, plan } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(grads, *a) {
                    plan.for_each_row(|o, oa, _, len, sa, _| {
                        for j in 0..len {
                            ga[oa + j * sa] += g[o + j];
                        }
                    });
                }
                if let Some(gb) = self.slot(grads, *b) {
                    plan.for_each_row(|o, _, ob, len, _, sb| {
                        for j in 0..len {
                            gb[ob + j * sb] += sign * g[o + j];
                        }
                    });
                }
            }
            Op::Mul { a, b, plan } => {
                let (da, db) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    plan.for_each_row(|o, oa, ob, len, sa, sb| {
                        for j in 0..len {
                            ga[oa + j * sa] += g[o + j] * db[ob + j * sb];
                        }
                    });
                }
                if let Some(gb) = self.slot(grads, *b) {
                    plan.for_each_row(|o, oa, ob, len, sa, sb| {
                        for j in 0..len {
                            gb[ob + j * sb] += g[o + j] * da[oa + j * sa];
                        }
                    });
                }
            }
            &Op::Scale { a, s } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += s * gi);
                }
            }
            &Op::AddScalar { a } | &Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                }
            }
            &Op::Relu { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(&node.data) {
                        if *y > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            &Op::Abs { a } => {
                let src = self.value(a);
                if let Some(ga) = self.slot(grads, a) {
                    for ((x, gi), v) in ga.iter_mut().zip(g).zip(src) {
                        if *v > 0.0 {
                            *x += gi;
                        } else if *v < 0.0 {
                            *x -= gi;
                        }
                    }
                }
            }
            &Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let y = &node.data;
                if let Some(ga) = self.slot(grads, a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut s = 0.0;
                            for j in 0..len {
                                s += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                ga[p] += y[p] * (g[p] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let rows = rstd.len();
                let gam = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            let dxh = g[r * d + j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let p = r * d + j;
                            let dxh = g[p] * gam[j];
                            gx[p] += rstd[r] * (dxh - inv_d * s1 - xhat[p] * inv_d * s2);
                        }
                    }
                }
            }
            Op::Permute { a, map } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (gi, &src) in g.iter().zip(map) {
                        ga[src] += gi;
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            gp[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, s)| *x += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::IndexSelect { a, idx, row } => {
                let row = *row;
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, &src) in idx.iter().enumerate() {
                        ga[src * row..(src + 1) * row]
                            .iter_mut()
                            .zip(&g[i * row..(i + 1) * row])
                            .for_each(|(x, s)| *x += s);
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }
}
