use super::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Where a multiply-accumulate was spent, for cost accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CostTag {
    Projection,
    CrossScore,
    CrossValue,
    SelfScore,
    SelfValue,
    Mlp,
    Readout,
    Other,
}

pub const COST_TAGS: [CostTag; 8] = [
    CostTag::Projection,
    CostTag::CrossScore,
    CostTag::CrossValue,
    CostTag::SelfScore,
    CostTag::SelfValue,
    CostTag::Mlp,
    CostTag::Readout,
    CostTag::Other,
];

/// Forward-pass multiply-accumulate counts, bucketed by [`CostTag`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    counts: [u64; 8],
}

impl MacCounter {
    fn slot(tag: CostTag) -> usize {
        COST_TAGS.iter().position(|&t| t == tag).unwrap()
    }

    pub fn add(&mut self, tag: CostTag, macs: u64) {
        self.counts[Self::slot(tag)] += macs;
    }

    pub fn get(&self, tag: CostTag) -> u64 {
        self.counts[Self::slot(tag)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

type BackFn<F> = Box<dyn Fn(&Tensor<F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Tensor<F>,
    parents: Vec<Var>,
    backward: Option<BackFn<F>>,
    requires_grad: bool,
}

/// Topologically ordered operation record with reverse-mode backward.
///
/// Ops panic on shape mismatches (messages name both shapes) and on any
/// non-finite output. Gradient accumulation is additive in exact reverse
/// construction order, so repeated runs are bit-identical.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    pub counter: MacCounter,
    tag: CostTag,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), counter: MacCounter::default(), tag: CostTag::Other }
    }

    /// Cost bucket for subsequent matmul/linear ops.
    pub fn set_tag(&mut self, tag: CostTag) {
        self.tag = tag;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<F>,
        parents: Vec<Var>,
        backward: Option<BackFn<F>>,
        requires_grad: bool,
    ) -> Var {
        value.check_finite("op output").unwrap_or_else(|e| panic!("{e}"));
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<F>, parents: Vec<Var>, backward: BackFn<F>) -> Var {
        let rg = parents.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.push(value, parents, if rg { Some(backward) } else { None }, rg)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), None, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push_op(out, vec![a, b], Box::new(|g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push_op(
            out,
            vec![a, b],
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.zip(&bv, |x, y| x * y);
        self.push_op(
            out,
            vec![a, b],
            Box::new(move |g| vec![Some(g.zip(&bv, |x, y| x * y)), Some(g.zip(&av, |x, y| x * y))]),
        )
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push_op(out, vec![a], Box::new(move |g| vec![Some(g.map(|x| x * c))]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(gelu_fwd);
        self.push_op(
            out,
            vec![a],
            Box::new(move |g| vec![Some(g.zip(&av, |gi, x| gi * gelu_deriv(x)))]),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.value(a).shape().to_vec();
        let out = self.value(a).reshaped(shape);
        self.push_op(out, vec![a], Box::new(move |g| vec![Some(g.reshaped(&in_shape))]))
    }

    pub fn swap_axes(&mut self, a: Var, i: usize, j: usize) -> Var {
        let out = swap_axes_raw(self.value(a), i, j);
        self.push_op(out, vec![a], Box::new(move |g| vec![Some(swap_axes_raw(g, i, j))]))
    }

    /// Concatenate along axis 0. All inputs must share trailing extents.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat0 of zero tensors");
        let first = self.value(parts[0]).shape().to_vec();
        let trailing = &first[1..];
        let mut rows = 0usize;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            assert_eq!(
                &t.shape()[1..],
                trailing,
                "concat0 trailing mismatch: {:?} vs {:?}",
                t.shape(),
                first
            );
            rows += t.shape()[0];
            lens.push(t.numel());
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        let shapes: Vec<Vec<usize>> =
            parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
        let out = Tensor::new(shape, data);
        self.push_op(
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut offset = 0;
                let mut outs = Vec::with_capacity(lens.len());
                for (len, shape) in lens.iter().zip(&shapes) {
                    let part = g.data()[offset..offset + len].to_vec();
                    outs.push(Some(Tensor::new(shape.clone(), part)));
                    offset += len;
                }
                outs
            }),
        )
    }

    /// Rows `[start, start+len)` along axis 0.
    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        assert!(
            start + len <= shape[0],
            "slice0 [{start}, {}) out of range for shape {:?}",
            start + len,
            shape
        );
        let stride: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = Tensor::new(
            out_shape,
            t.data()[start * stride..(start + len) * stride].to_vec(),
        );
        self.push_op(
            out,
            vec![a],
            Box::new(move |g| {
                let mut full = vec![F::zero(); shape.iter().product()];
                full[start * stride..(start + len) * stride].copy_from_slice(g.data());
                vec![Some(Tensor::new(shape.clone(), full))]
            }),
        )
    }

    /// Index-select along axis 0; backward scatter-adds.
    pub fn gather0(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let stride: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            assert!(i < shape[0], "gather0 index {i} out of range for shape {shape:?}");
            data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let out = Tensor::new(out_shape, data);
        let idx = indices.to_vec();
        self.push_op(
            out,
            vec![a],
            Box::new(move |g| {
                let mut full = vec![F::zero(); shape.iter().product()];
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g.data()[r * stride..(r + 1) * stride];
                    for (dst, &s) in full[i * stride..(i + 1) * stride].iter_mut().zip(src) {
                        *dst = *dst + s;
                    }
                }
                vec![Some(Tensor::new(shape.clone(), full))]
            }),
        )
    }

    /// Stack `n` copies of `a` along a new leading axis.
    pub fn repeat0(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        let inner = t.numel();
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(n * inner);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let in_shape = t.shape().to_vec();
        let out = Tensor::new(shape, data);
        self.push_op(
            out,
            vec![a],
            Box::new(move |g| {
                let mut acc = vec![F::zero(); inner];
                for chunk in g.data().chunks_exact(inner) {
                    for (a, &b) in acc.iter_mut().zip(chunk) {
                        *a = *a + b;
                    }
                }
                vec![Some(Tensor::new(in_shape.clone(), acc))]
            }),
        )
    }

    // ---- contractions ----

    /// Batched matmul: `[.., m, k] x [.., k, n] -> [.., m, n]`. Leading
    /// extents must match exactly (no broadcasting).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let (batch, m, k, n) = mm_dims(av.shape(), bv.shape(), false);
        self.counter.add(self.tag, (batch * m * k * n) as u64);
        let out = mm_batched(&av, &bv, false);
        self.push_op(
            out,
            vec![a, b],
            Box::new(move |g| {
                // dA = g . B^T, dB = A^T . g
                let da = mm_batched(g, &bv, true);
                let db = mm_batched_tn(&av, g);
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Batched matmul with transposed rhs: `[.., m, k] x [.., n, k] -> [.., m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let (batch, m, k, n) = mm_dims(av.shape(), bv.shape(), true);
        self.counter.add(self.tag, (batch * m * k * n) as u64);
        let out = mm_batched(&av, &bv, true);
        self.push_op(
            out,
            vec![a, b],
            Box::new(move |g| {
                // out = A . B^T; dA = g . B, dB = g^T . A
                let da = mm_batched(g, &bv, false);
                let db = mm_batched_tn(g, &av);
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Affine map on the last axis: `[.., cin] x [cin, cout] + [cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
        let bv = self.value(b).clone();
        assert_eq!(wv.shape().len(), 2, "linear weight must be 2-D, got {:?}", wv.shape());
        let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(
            xv.last_dim(),
            cin,
            "linear input {:?} does not match weight {:?}",
            xv.shape(),
            wv.shape()
        );
        assert_eq!(bv.shape(), [cout], "linear bias {:?} does not match weight {:?}", bv.shape(), wv.shape());
        let rows = xv.rows();
        self.counter.add(self.tag, (rows * cin * cout) as u64);
        let mut out = vec![F::zero(); rows * cout];
        for orow in out.chunks_exact_mut(cout) {
            for (o, &bi) in orow.iter_mut().zip(bv.data()) {
                *o = bi;
            }
        }
        mm_kernel(xv.data(), wv.data(), &mut out, rows, cin, cout);
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = cout;
        let out = Tensor::new(out_shape, out);
        let x_shape = xv.shape().to_vec();
        self.push_op(
            out,
            vec![x, w, b],
            Box::new(move |g| {
                let rows = g.numel() / cout;
                // dX = g . W^T
                let wt = transpose2(wv.data(), cin, cout);
                let mut dx = vec![F::zero(); rows * cin];
                mm_kernel(g.data(), &wt, &mut dx, rows, cout, cin);
                // dW = X^T . g
                let xt = transpose2(xv.data(), rows, cin);
                let mut dw = vec![F::zero(); cin * cout];
                mm_kernel(&xt, g.data(), &mut dw, cin, rows, cout);
                // db = column sum of g
                let mut db = vec![F::zero(); cout];
                for row in g.data().chunks_exact(cout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                vec![
                    Some(Tensor::new(x_shape.clone(), dx)),
                    Some(Tensor::new(vec![cin, cout], dw)),
                    Some(Tensor::new(vec![cout], db)),
                ]
            }),
        )
    }

    // ---- normalization & reductions ----

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        assert!(axis < shape.len(), "softmax axis {axis} invalid for shape {shape:?}");
        let out = softmax_raw(t, axis);
        let pv = out.clone();
        self.push_op(
            out,
            vec![a],
            Box::new(move |g| {
                // dx = p * (g - sum(g * p))
                let (outer, len, inner) = axis_split(pv.shape(), axis);
                let mut dx = vec![F::zero(); pv.numel()];
                let p = pv.data();
                let gd = g.data();
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let mut dot = F::zero();
                        for i in 0..len {
                            let at = base + i * inner;
                            dot = dot + gd[at] * p[at];
                        }
                        for i in 0..len {
                            let at = base + i * inner;
                            dx[at] = p[at] * (gd[at] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(pv.shape().to_vec(), dx))]
            }),
        )
    }

    /// Per-row zero mean / unit variance over the last axis, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x).clone();
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let d = xv.last_dim();
        assert!(d >= 1, "layer_norm needs a non-empty last axis");
        assert_eq!(gv.shape(), [d], "layer_norm gain {:?} vs input {:?}", gv.shape(), xv.shape());
        assert_eq!(bv.shape(), [d], "layer_norm bias {:?} vs input {:?}", bv.shape(), xv.shape());
        let rows = xv.rows();
        let eps = F::from_f64(eps);
        let dd = F::from_usize(d);
        let mut out = vec![F::zero(); xv.numel()];
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dd;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for i in 0..d {
                let xh = (row[i] - mean) * is;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * gv.data()[i] + bv.data()[i];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        let x_shape = xv.shape().to_vec();
        self.push_op(
            out,
            vec![x, gain, bias],
            Box::new(move |g| {
                let gd = g.data();
                let mut dx = vec![F::zero(); gd.len()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for r in 0..rows {
                    let gr = &gd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_dxh = F::zero();
                    let mut sum_dxh_xh = F::zero();
                    for i in 0..d {
                        let dxh = gr[i] * gv.data()[i];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh[i];
                        dgain[i] = dgain[i] + gr[i] * xh[i];
                        dbias[i] = dbias[i] + gr[i];
                    }
                    let mean_dxh = sum_dxh / dd;
                    let mean_dxh_xh = sum_dxh_xh / dd;
                    for i in 0..d {
                        let dxh = gr[i] * gv.data()[i];
                        dx[r * d + i] = inv_std[r] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                    }
                }
                vec![
                    Some(Tensor::new(x_shape.clone(), dx)),
                    Some(Tensor::new(vec![d], dgain)),
                    Some(Tensor::new(vec![d], dbias)),
                ]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let total: F = t.data().iter().copied().sum();
        let shape = t.shape().to_vec();
        self.push_op(
            Tensor::scalar(total),
            vec![a],
            Box::new(move |g| {
                let gv = g.data()[0];
                vec![Some(Tensor::full(&shape, gv))]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, F::from_usize(n).recip())
    }

    /// Mean of squared entries.
    pub fn mean_sq(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.mean_all(sq)
    }

    /// Mean softmax cross-entropy of `logits [N, C]` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits).clone();
        assert_eq!(lv.shape().len(), 2, "softmax_xent expects [N, C], got {:?}", lv.shape());
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n, "label count {} vs logits {:?}", labels.len(), lv.shape());
        let probs = softmax_raw(&lv, 1);
        let nn = F::from_usize(n);
        let mut loss = F::zero();
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < c, "label {y} out of range for {c} classes");
            let p = probs.data()[r * c + y];
            loss = loss - (p.max(F::from_f64(1e-300))).ln();
        }
        loss = loss / nn;
        let labels = labels.to_vec();
        self.push_op(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |g| {
                let gv = g.data()[0];
                let mut dx = probs.data().to_vec();
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * c + y] = dx[r * c + y] - F::one();
                }
                for v in dx.iter_mut() {
                    *v = *v * gv / nn;
                }
                vec![Some(Tensor::new(vec![n, c], dx))]
            }),
        )
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar root. Gradients are retrievable via
    /// [`Tape::grad`] until the next call.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward root must be scalar, got {:?}",
            self.nodes[root.0].value.shape()
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].clone() else { continue };
            let Some(back) = &self.nodes[i].backward else { continue };
            let parent_grads = back(&g);
            let parents = self.nodes[i].parents.clone();
            for (p, pg) in parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                pg.check_finite("gradient").unwrap_or_else(|e| panic!("{e}"));
                match &mut self.grads[p.0] {
                    Some(acc) => {
                        let sum = acc.zip(&pg, |a, b| a + b);
                        *acc = sum;
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

// ---- raw kernels ----

/// `out += a[m,k] . b[k,n]`, row-major.
fn mm_kernel<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn transpose2<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Validate batched matmul shapes; returns (batch, m, k, n).
fn mm_dims(a: &[usize], b: &[usize], b_transposed: bool) -> (usize, usize, usize, usize) {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2: {a:?} x {b:?}");
    assert_eq!(
        a.len(),
        b.len(),
        "matmul rank mismatch: {a:?} x {b:?} (explicit reshape required)"
    );
    let (la, lb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    assert_eq!(la, lb, "matmul batch extents differ: {a:?} x {b:?}");
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = if b_transposed {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    assert_eq!(k, k2, "matmul inner extents differ: {a:?} x {b:?}");
    (la.iter().product(), m, k, n)
}

fn mm_batched<F: Real>(a: &Tensor<F>, b: &Tensor<F>, b_transposed: bool) -> Tensor<F> {
    let (batch, m, k, n) = mm_dims(a.shape(), b.shape(), b_transposed);
    let mut out = vec![F::zero(); batch * m * n];
    for bi in 0..batch {
        let av = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bv = &b.data()[bi * k * n..(bi + 1) * k * n];
        let ov = &mut out[bi * m * n..(bi + 1) * m * n];
        if b_transposed {
            let t = transpose2(bv, n, k);
            mm_kernel(av, &t, ov, m, k, n);
        } else {
            mm_kernel(av, bv, ov, m, k, n);
        }
    }
    let mut shape = a.shape()[..a.shape().len() - 2].to_vec();
    shape.push(m);
    shape.push(n);
    Tensor::new(shape, out)
}

/// `a^T . b` per batch: `[.., m, k] x [.., m, n] -> [.., k, n]`.
fn mm_batched_tn<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let ra = a.shape().len();
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let n = b.shape()[b.shape().len() - 1];
    assert_eq!(&a.shape()[..ra - 2], &b.shape()[..ra - 2], "batch extents differ: {:?} x {:?}", a.shape(), b.shape());
    assert_eq!(b.shape()[ra - 2], m, "inner extents differ: {:?} x {:?}", a.shape(), b.shape());
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let mut out = vec![F::zero(); batch * k * n];
    for bi in 0..batch {
        let av = &a.data()[bi * m * k..(bi + 1) * m * k];
        let at = transpose2(av, m, k);
        let bv = &b.data()[bi * m * n..(bi + 1) * m * n];
        mm_kernel(&at, bv, &mut out[bi * k * n..(bi + 1) * k * n], k, m, n);
    }
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.push(k);
    shape.push(n);
    Tensor::new(shape, out)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn softmax_raw<F: Real>(t: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let x = t.data();
    let mut out = vec![F::zero(); t.numel()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * len * inner + j;
            let mut mx = F::neg_infinity();
            for i in 0..len {
                mx = mx.max(x[base + i * inner]);
            }
            let mut z = F::zero();
            for i in 0..len {
                let e = (x[base + i * inner] - mx).exp();
                out[base + i * inner] = e;
                z = z + e;
            }
            for i in 0..len {
                out[base + i * inner] = out[base + i * inner] / z;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn swap_axes_raw<F: Real>(t: &Tensor<F>, i: usize, j: usize) -> Tensor<F> {
    let shape = t.shape();
    assert!(i < shape.len() && j < shape.len(), "swap_axes {i},{j} invalid for {shape:?}");
    if i == j {
        return t.clone();
    }
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(i, j);
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut perm_strides = in_strides.clone();
    perm_strides.swap(i, j);
    let mut out = vec![F::zero(); t.numel()];
    let data = t.data();
    let mut idx = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        // decompose o in out_shape, read via permuted strides
        let mut rem = o;
        for d in 0..rank {
            let sz: usize = out_shape[d + 1..].iter().product();
            idx[d] = rem / sz;
            rem %= sz;
        }
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * perm_strides[d];
        }
        *slot = data[src];
    }
    Tensor::new(out_shape, out)
}

// Tanh-approximation GELU, fixed constants for reproducibility.
const GELU_C0: f64 = 0.7978845608;
const GELU_C1: f64 = 0.044715;

fn gelu_fwd<F: Real>(x: F) -> F {
    let c0 = F::from_f64(GELU_C0);
    let c1 = F::from_f64(GELU_C1);
    let half = F::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_deriv<F: Real>(x: F) -> F {
    let c0 = F::from_f64(GELU_C0);
    let c1 = F::from_f64(GELU_C1);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (F::one() + three * c1 * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn identity_matmul() {
        let mut tape: Tape<f64> = Tape::new();
        let eye = tape.constant(t64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = tape.constant(t64(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = tape.matmul(eye, x);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn hand_matmul_1x2_2x1() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(t64(&[1, 2], &[1., 2.]));
        let b = tape.constant(t64(&[2, 1], &[3., 4.]));
        let y = tape.matmul(a, b);
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch_names_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        tape.matmul(a, b);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t64(&[3], &[0., 0., 0.]));
        let p = tape.softmax(x, 0);
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t64(&[2], &[1000., 0.]));
        let p = tape.softmax(x, 0);
        let d = tape.value(p).data();
        assert!((d[0] - 1.0).abs() < 1e-30);
        assert!(d[1] < 1e-30);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t64(&[2, 4], &[0.3, -1.2, 2.0, 0.7, 5.0, 5.0, -3.0, 0.0]));
        let p = tape.softmax(x, 1);
        for row in tape.value(p).data().chunks_exact(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t64(&[1, 4], &[5., 5., 5., 5.]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5);
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_points() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t64(&[1, 2], &[1., 3.]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-5);
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-2 && (d[1] - 1.0).abs() < 1e-2);
        // tighter with tiny eps
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t64(&[1, 2], &[1., 3.]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-12);
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_zero_and_linear_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t64(&[1], &[0.]));
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).data(), &[0.0]);

        let x = tape.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
        let w = tape.constant(t64(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, b);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let s = tape.sum_all(x);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn gather_scatter_adds() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t64(&[3, 2], &[1., 2., 3., 4., 5., 6.]), true);
        let g = tape.gather0(x, &[0, 0, 2]);
        let s = tape.sum_all(g);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 2., 0., 0., 1., 1.]);
    }

    #[test]
    fn swap_axes_roundtrip() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t64(&[2, 3, 4], &(0..24).map(|i| i as f64).collect::<Vec<_>>()));
        let y = tape.swap_axes(x, 0, 2);
        assert_eq!(tape.value(y).shape(), &[4, 3, 2]);
        let z = tape.swap_axes(y, 0, 2);
        assert_eq!(tape.value(z).data(), tape.value(x).data());
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_output_is_an_error() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(t64(&[1], &[1e308]));
        let y = tape.mul(x, x); // overflows to inf
        let _ = y;
    }

    #[test]
    fn mac_counter_tracks_matmul() {
        let mut tape: Tape<f32> = Tape::new();
        tape.set_tag(CostTag::SelfScore);
        let a = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let b = tape.constant(Tensor::zeros(&[2, 4, 5]));
        tape.matmul(a, b);
        assert_eq!(tape.counter.get(CostTag::SelfScore), 2 * 3 * 4 * 5);
        assert_eq!(tape.counter.total(), 120);
    }
}
