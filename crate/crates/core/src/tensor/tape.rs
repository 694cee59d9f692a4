use std::sync::Arc;

use super::{
    gemm_acc, gemm_nt_acc, gemm_tn_acc, numel, softmax_row, ParamId, ParamStore, Real, RowMap,
    Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Reshape(Var),
    Transpose {
        a: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Gather {
        a: Var,
        map: Arc<RowMap<T>>,
        width: usize,
    },
    Composite {
        sigma: Var,
        rgb: Var,
        delta: Vec<T>,
        rays: usize,
        samples: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Define-by-run record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape is consistent")
    }

    /// Records a tensor as a leaf. It participates in backward iff
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(shape_err("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf { param: None }, false))
    }

    /// Binds a stored parameter; its gradient can be routed back with
    /// [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            true,
        )
    }

    pub(crate) fn param_bindings(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(id) } => Some((Var(i), id)),
            _ => None,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, m, k, n }, ng))
    }

    /// Batched matmul over the leading axis: `[B×m×k]·[B×k×n]`, or with
    /// `trans_b`, `[B×m×k]·[B×n×k]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if !ok || k != kb {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            let ab = &va[i * m * k..(i + 1) * m * k];
            let bb = &vb[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt_acc(ab, bb, cb, m, k, n);
            } else {
                gemm_acc(ab, bb, cb, m, k, n);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = sb.iter().product::<usize>();
        if sb.len() != 1 || sx.last() != Some(&n) {
            return Err(shape_err("add_row", sx, sb));
        }
        let vb = self.value(b);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(vb).map(|(&v, &c)| v + c))
            .collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, b), ng))
    }

    /// `x·W + b` with `W[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    /// Rectifier with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Softmax along the last axis. Entries whose mask is `false` receive
    /// weight zero (equivalent to a −∞ logit); a row with no valid entry is
    /// all zeros.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        if n == 0 {
            return Err(Error::invalid("softmax over an empty axis"));
        }
        if let Some(m) = mask {
            if m.len() != numel(&shape) {
                return Err(shape_err("softmax mask", &shape, &[m.len()]));
            }
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for (r, (row, dst)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            softmax_row(row, mask.map(|m| &m[r * n..(r + 1) * n]), dst);
        }
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Softmax(a, n), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Mean(a), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            out_shape[axis] += s[axis];
            chunks.push(s[axis] * inner);
        }
        let row: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(p)[o * c..(o + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let src = self.value(a);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = src[base + i * cols + j];
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let ng = self.ng(a);
        Ok(self.push(
            shape,
            out,
            Op::Transpose {
                a,
                batch,
                rows,
                cols,
            },
            ng,
        ))
    }

    /// Applies a fixed sparse row map to `a`, viewed as `[map.src_rows() × width]`.
    pub fn gather(&mut self, a: Var, map: Arc<RowMap<T>>) -> Result<Var> {
        let len = self.value(a).len();
        let src_rows = map.src_rows();
        if src_rows == 0 || len % src_rows != 0 {
            return Err(shape_err("gather", self.shape(a), &[src_rows]));
        }
        let width = len / src_rows;
        let shape = if self.shape(a).first() == Some(&src_rows) {
            let mut s = self.shape(a).to_vec();
            s[0] = map.rows();
            s
        } else {
            vec![map.rows(), width]
        };
        let out = map.apply(self.value(a), width);
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Gather { a, map, width }, ng))
    }

    /// Front-to-back quadrature compositing of `rays × samples` densities
    /// `sigma` and colors `rgb` (`[rays×samples×3]`) with fixed intervals.
    /// Output is `[rays×3]`.
    pub fn composite(&mut self, sigma: Var, rgb: Var, delta: &[T]) -> Result<Var> {
        let ss = self.shape(sigma).to_vec();
        let sc = self.shape(rgb).to_vec();
        if ss.len() != 2 || sc != [ss[0], ss[1], 3] || delta.len() != ss[0] * ss[1] {
            return Err(shape_err("composite", &ss, &sc));
        }
        let (rays, samples) = (ss[0], ss[1]);
        let (vs, vc) = (self.value(sigma), self.value(rgb));
        if vs.iter().chain(delta).any(|&x| !(x >= T::zero())) {
            return Err(Error::invalid("composite needs non-negative sigma and delta"));
        }
        let mut out = vec![T::zero(); rays * 3];
        for r in 0..rays {
            let mut trans = T::one();
            for i in 0..samples {
                let j = r * samples + i;
                let decay = (-vs[j] * delta[j]).exp();
                let w = trans * (T::one() - decay);
                for ch in 0..3 {
                    out[r * 3 + ch] += w * vc[j * 3 + ch];
                }
                trans *= decay;
            }
        }
        let ng = self.ng(sigma) || self.ng(rgb);
        Ok(self.push(
            vec![rays, 3],
            out,
            Op::Composite {
                sigma,
                rgb,
                delta: delta.to_vec(),
                rays,
                samples,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that also routes parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        store.accumulate(self, &grads);
        Ok(grads)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_buf(nodes, grads, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::Matmul { a, b, m, k, n } => {
                let (va, vb) = (&nodes[a.0].data, &nodes[b.0].data);
                with_grad!(a, |ga| gemm_nt_acc(g, vb, ga, m, n, k));
                with_grad!(b, |gb| gemm_tn_acc(va, g, gb, m, k, n));
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (va, vb) = (&nodes[a.0].data, &nodes[b.0].data);
                with_grad!(a, |ga| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bb = &vb[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            // A·Bᵀ with B[n×k]: dA = G·B
                            gemm_acc(gi, bb, dst, m, n, k);
                        } else {
                            gemm_nt_acc(gi, bb, dst, m, n, k);
                        }
                    }
                });
                with_grad!(b, |gb| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ab = &va[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // dB[n×k] = Gᵀ·A
                            gemm_tn_acc(gi, ab, dst, m, n, k);
                        } else {
                            gemm_tn_acc(ab, gi, dst, m, k, n);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                with_grad!(a, |ga| add_into(ga, g));
                with_grad!(b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                with_grad!(a, |ga| add_into(ga, g));
                with_grad!(b, |gb| gb.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].data, &nodes[b.0].data);
                with_grad!(a, |ga| {
                    for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                });
                with_grad!(b, |gb| {
                    for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                });
            }
            &Op::Scale(a, s) => with_grad!(a, |ga| {
                ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v * s)
            }),
            &Op::AddRow(x, b) => {
                with_grad!(x, |gx| add_into(gx, g));
                with_grad!(b, |gb| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::Relu(a) => {
                let va = &nodes[a.0].data;
                with_grad!(a, |ga| {
                    for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(va) {
                        if x > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = &node.data;
                with_grad!(a, |ga| {
                    for ((d, &gv), &s) in ga.iter_mut().zip(g).zip(y) {
                        *d += gv * s * (T::one() - s);
                    }
                });
            }
            &Op::Softplus(a) => {
                let va = &nodes[a.0].data;
                with_grad!(a, |ga| {
                    for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(va) {
                        *d += gv * sigmoid(x);
                    }
                });
            }
            &Op::Exp(a) => {
                let y = &node.data;
                with_grad!(a, |ga| {
                    for ((d, &gv), &e) in ga.iter_mut().zip(g).zip(y) {
                        *d += gv * e;
                    }
                });
            }
            &Op::Softmax(a, n) => {
                let y = &node.data;
                with_grad!(a, |ga| {
                    for ((dst, yr), gr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &p), &q) in dst.iter_mut().zip(yr).zip(gr) {
                            *d += p * (q - dot);
                        }
                    }
                });
            }
            &Op::Sum(a) => with_grad!(a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(a) => with_grad!(a, |ga| {
                let s = g[0] / T::lit(ga.len().max(1) as f64);
                ga.iter_mut().for_each(|d| *d += s);
            }),
            Op::Concat {
                parts,
                outer,
                chunks,
            } => {
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    with_grad!(p, |gp| {
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + c];
                            add_into(&mut gp[o * c..(o + 1) * c], src);
                        }
                    });
                    offset += c;
                }
            }
            &Op::Reshape(a) => with_grad!(a, |ga| add_into(ga, g)),
            &Op::Transpose {
                a,
                batch,
                rows,
                cols,
            } => with_grad!(a, |ga| {
                for b in 0..batch {
                    let base = b * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[base + i * cols + j] += g[base + j * rows + i];
                        }
                    }
                }
            }),
            Op::Gather { a, map, width } => {
                with_grad!(*a, |ga| map.apply_transpose_acc(g, *width, ga));
            }
            Op::Composite {
                sigma,
                rgb,
                delta,
                rays,
                samples,
            } => {
                let (vs, vc) = (&nodes[sigma.0].data, &nodes[rgb.0].data);
                let n = *samples;
                let mut w = vec![T::zero(); n];
                let mut t_next = vec![T::zero(); n];
                let mut gc = vec![T::zero(); n];
                let mut gs_local = vec![T::zero(); n];
                for r in 0..*rays {
                    let gr = &g[r * 3..r * 3 + 3];
                    let mut trans = T::one();
                    for i in 0..n {
                        let j = r * n + i;
                        let decay = (-vs[j] * delta[j]).exp();
                        w[i] = trans * (T::one() - decay);
                        trans *= decay;
                        t_next[i] = trans;
                        gc[i] = (0..3).map(|ch| gr[ch] * vc[j * 3 + ch]).sum();
                    }
                    let mut suffix = T::zero();
                    for i in (0..n).rev() {
                        let j = r * n + i;
                        gs_local[i] = delta[j] * (t_next[i] * gc[i] - suffix);
                        suffix += w[i] * gc[i];
                    }
                    with_grad!(*sigma, |gs| {
                        add_into(&mut gs[r * n..(r + 1) * n], &gs_local);
                    });
                    with_grad!(*rgb, |gcol| {
                        for i in 0..n {
                            let j = r * n + i;
                            for ch in 0..3 {
                                gcol[j * 3 + ch] += w[i] * gr[ch];
                            }
                        }
                    });
                }
            }
        }
    }
}

fn grad_buf<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let id = tape.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.matmul(id, m).unwrap();
        assert_eq!(tape.value(r), &[1.0, 2.0, 3.0, 4.0]);
        let c = tape.leaf(&t64(&[2, 1], &[5.0, 6.0]));
        let r = tape.matmul(m, c).unwrap();
        assert_eq!(tape.value(r), &[17.0, 39.0]);
        let x = tape.leaf(&Tensor::zeros(&[2, 3]));
        match tape.matmul(x, x) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_and_shape_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let ones = tape.leaf(&Tensor::full(&[3, 4], 1.0));
        let s = tape.sum(ones);
        assert_eq!(tape.value(s), &[12.0]);
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 5]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
        let bad = tape.leaf(&Tensor::zeros(&[3, 5]));
        assert!(tape.concat(&[a, bad], 1).is_err());
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn concat_interleaves_rows() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[2, 1], &[1.0, 2.0]));
        let b = tape.leaf(&t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = tape.concat(&[b, b], 0).unwrap();
        assert_eq!(tape.shape(d), &[4, 2]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[3], &[1.0, -2.0, 0.5]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_of_softmax_sum_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 5.0, 0.1]).with_grad());
        let s = tape.softmax_rows(x).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        for v in g.get(x).unwrap() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn transpose_and_bmm_agree() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(&t64(&[1, 2, 3], &[1.0, 0.0, 2.0, -1.0, 1.0, 0.5]));
        let direct = tape.bmm(a, b, true).unwrap();
        let bt = tape.transpose(b).unwrap();
        let via = tape.bmm(a, bt, false).unwrap();
        assert_eq!(tape.value(direct), tape.value(via));
        assert_eq!(tape.shape(direct), &[1, 2, 2]);
    }

    #[test]
    fn composite_rejects_negative_density() {
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(&t64(&[1, 2], &[1.0, -1.0]));
        let c = tape.leaf(&Tensor::zeros(&[1, 2, 3]));
        assert!(tape.composite(s, c, &[0.5, 0.5]).is_err());
    }
}
