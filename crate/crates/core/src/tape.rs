//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records operations as they are evaluated. Parameters are bound
//! by id so that every use of the same parameter accumulates into one
//! gradient. The op set is small and shaped around what the velocity network
//! needs: row-major matmul, broadcast row ops, layer norm, index gathers for
//! all reshuffling (padding, windows, rolls, patching), and a fused windowed
//! attention kernel.

use std::borrow::Cow;
use std::sync::Arc;

/// Marks a gather slot that reads as zero.
pub const ZERO_INDEX: u32 = u32::MAX;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns when viewed as a matrix over the last axis.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        (self.data.len() / cols.max(1), cols)
    }
}

/// Safe wrapper over `matrixmultiply::dgemm`: `c = alpha * a @ b + beta * c`
/// for an `m x k` by `k x n` product with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], usize, usize, usize),
    b: (&[f64], usize, usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize, usize),
) {
    let (a, ao, ars, acs) = a;
    let (b, bo, brs, bcs) = b;
    let (c, co, crs, ccs) = c;
    if m == 0 || n == 0 {
        return;
    }
    let last = |o: usize, r: usize, rs: usize, cc: usize, cs: usize| o + (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(last(ao, m, ars, k, acs) < a.len(), "gemm: a out of bounds");
        assert!(last(bo, k, brs, n, bcs) < b.len(), "gemm: b out of bounds");
    }
    assert!(last(co, m, crs, n, ccs) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index touched lies within the bounds asserted above, and
    // `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(ao),
            ars as isize,
            acs as isize,
            b.as_ptr().add(bo),
            brs as isize,
            bcs as isize,
            beta,
            c.as_mut_ptr().add(co),
            crs as isize,
            ccs as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape description of one windowed attention call.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub n_windows: usize,
    pub tokens: usize,
    pub heads: usize,
    pub dim: usize,
    /// Relative-position index into the bias table, `tokens * tokens` entries.
    pub rel_index: Arc<Vec<u32>>,
    /// Optional additive mask, `n_windows * tokens * tokens` entries.
    pub mask: Option<Arc<Vec<f64>>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddScaled(Var, Var, f64),
    Scale(Var, f64),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Modulate { h: Var, scale: Var, shift: Var },
    GatedAdd { x: Var, gate: Var, y: Var },
    Gelu(Var),
    Silu(Var),
    Gather { src: Var, index: Arc<Vec<u32>> },
    Concat(Vec<Var>),
    Attention { qkv: Var, bias: Var, spec: AttnSpec, probs: Vec<f64> },
    WeightedSq { pred: Var, target: Arc<Vec<f64>>, weights: Arc<Vec<f64>>, denom: f64 },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    grad: bool,
}

/// Gradients produced by a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient with respect to a recorded variable, if it influenced the seeds.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// (parameter id, gradient) for every parameter bound in the graph.
    pub fn params(&self) -> impl Iterator<Item = (usize, Option<&[f64]>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.wrt(v)))
    }

    pub fn param(&self, id: usize) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|&(_, v)| self.wrt(v))
    }
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<(usize, Var)>,
    track: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            track: true,
        }
    }

    /// A graph that records values only; parameters carry no gradient.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad: grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted, e.g. the state entering an Euler step.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Binds parameter `id`; repeated binds return the same variable.
    pub fn param(&mut self, id: usize, t: &'a Tensor) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(pid, _)| *pid == id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(t), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.as_matrix();
        assert_eq!(tb.shape.len(), 2, "matmul rhs must be 2-D");
        assert_eq!(tb.shape[0], k, "matmul inner dims {k} vs {}", tb.shape[0]);
        let m = tb.shape[1];
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, 1.0, (&ta.data, 0, k, 1), (&tb.data, 0, m, 1), 0.0, (&mut out, 0, m, 1));
        let mut shape = ta.shape.clone();
        *shape.last_mut().unwrap() = m;
        let grad = self.needs(&[a, b]);
        self.push(Cow::Owned(Tensor::new(shape, out)), Op::MatMul(a, b), grad)
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(bias);
        let (_, m) = ta.as_matrix();
        assert_eq!(tb.len(), m, "bias length");
        let mut out = ta.clone();
        for row in out.data.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let grad = self.needs(&[a, bias]);
        self.push(Cow::Owned(out), Op::AddRowBias(a, bias), grad)
    }

    /// `a + alpha * b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, alpha: f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add operands differ in size");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + alpha * y).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        let grad = self.needs(&[a, b]);
        self.push(Cow::Owned(out), Op::AddScaled(a, b, alpha), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.add_scaled(a, b, 1.0)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| alpha * x).collect());
        let grad = self.needs(&[a]);
        self.push(Cow::Owned(out), Op::Scale(a, alpha), grad)
    }

    /// Normalizes each row over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (rows, m) = tx.as_matrix();
        let mut out = vec![0.0; tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (src, dst) in tx.data.chunks(m).zip(out.chunks_mut(m)) {
            let mean = src.iter().sum::<f64>() / m as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(tx.shape.clone(), out);
        let grad = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::LayerNorm { x, inv_std }, grad)
    }

    /// `h * (1 + scale) + shift` with row-broadcast `scale` and `shift`.
    pub fn modulate(&mut self, h: Var, scale: Var, shift: Var) -> Var {
        let th = self.value(h);
        let (ts, tb) = (self.value(scale), self.value(shift));
        let (_, m) = th.as_matrix();
        assert!(ts.len() == m && tb.len() == m, "modulation width");
        let mut out = th.clone();
        for row in out.data.chunks_mut(m) {
            for j in 0..m {
                row[j] = row[j] * (1.0 + ts.data[j]) + tb.data[j];
            }
        }
        let grad = self.needs(&[h, scale, shift]);
        self.push(Cow::Owned(out), Op::Modulate { h, scale, shift }, grad)
    }

    /// `x + gate * y` with row-broadcast `gate`.
    pub fn gated_add(&mut self, x: Var, gate: Var, y: Var) -> Var {
        let (tx, tg, ty) = (self.value(x), self.value(gate), self.value(y));
        let (_, m) = tx.as_matrix();
        assert_eq!(tx.len(), ty.len(), "gated_add operand sizes");
        assert_eq!(tg.len(), m, "gate width");
        let mut out = tx.clone();
        for (row, yr) in out.data.chunks_mut(m).zip(ty.data.chunks(m)) {
            for j in 0..m {
                row[j] += tg.data[j] * yr[j];
            }
        }
        let grad = self.needs(&[x, gate, y]);
        self.push(Cow::Owned(out), Op::GatedAdd { x, gate, y }, grad)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(tx.shape.clone(), data);
        let grad = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::Gelu(x), grad)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let out = Tensor::new(tx.shape.clone(), data);
        let grad = self.needs(&[x]);
        self.push(Cow::Owned(out), Op::Silu(x), grad)
    }

    /// `out[i] = src[index[i]]`, or zero where `index[i] == ZERO_INDEX`.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<u32>>, shape: Vec<usize>) -> Var {
        let ts = self.value(src);
        let data = index
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { ts.data[i as usize] })
            .collect();
        let out = Tensor::new(shape, data);
        let grad = self.needs(&[src]);
        self.push(Cow::Owned(out), Op::Gather { src, index }, grad)
    }

    /// Contiguous range `[start, start + len)` of the flat data.
    pub fn slice(&mut self, src: Var, start: usize, len: usize, shape: Vec<usize>) -> Var {
        let index = Arc::new((start as u32..(start + len) as u32).collect());
        self.gather(src, index, shape)
    }

    /// Flat concatenation; the result takes `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: Vec<usize>) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let out = Tensor::new(shape, data);
        let grad = self.needs(parts);
        self.push(Cow::Owned(out), Op::Concat(parts.to_vec()), grad)
    }

    /// Multi-head attention within windows.
    ///
    /// `qkv` is `[n_windows * tokens, 3 * dim]` laid out as q | k | v with heads
    /// contiguous inside each; `bias` is the `[table, heads]` relative bias.
    /// Output is `[n_windows * tokens, dim]`.
    pub fn window_attention(&mut self, qkv: Var, bias: Var, spec: AttnSpec) -> Var {
        let tq = self.value(qkv);
        let tb = self.value(bias);
        let (nw, t, h, c) = (spec.n_windows, spec.tokens, spec.heads, spec.dim);
        assert_eq!(tq.len(), nw * t * 3 * c, "qkv size");
        assert_eq!(c % h, 0, "dim divisible by heads");
        assert_eq!(spec.rel_index.len(), t * t, "relative index size");
        if let Some(mask) = &spec.mask {
            assert_eq!(mask.len(), nw * t * t, "mask size");
        }
        let dh = c / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; nw * h * t * t];
        let mut out = vec![0.0; nw * t * c];
        for w in 0..nw {
            let row0 = w * t;
            for hd in 0..h {
                let p = &mut probs[(w * h + hd) * t * t..(w * h + hd + 1) * t * t];
                let qo = row0 * 3 * c + hd * dh;
                gemm(
                    t,
                    dh,
                    t,
                    scale,
                    (&tq.data, qo, 3 * c, 1),
                    (&tq.data, qo + c, 1, 3 * c),
                    0.0,
                    (p, 0, t, 1),
                );
                for (ij, s) in p.iter_mut().enumerate() {
                    *s += tb.data[spec.rel_index[ij] as usize * h + hd];
                    if let Some(mask) = &spec.mask {
                        *s += mask[w * t * t + ij];
                    }
                }
                for row in p.chunks_mut(t) {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        sum += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= sum;
                    }
                }
                gemm(
                    t,
                    t,
                    dh,
                    1.0,
                    (p, 0, t, 1),
                    (&tq.data, qo + 2 * c, 3 * c, 1),
                    0.0,
                    (&mut out, row0 * c + hd * dh, c, 1),
                );
            }
        }
        let out = Tensor::new(vec![nw * t, c], out);
        let grad = self.needs(&[qkv, bias]);
        let probs = if grad { probs } else { Vec::new() };
        self.push(
            Cow::Owned(out),
            Op::Attention {
                qkv,
                bias,
                spec,
                probs,
            },
            grad,
        )
    }

    /// `sum(weights * (pred - target)^2) / denom`, a scalar.
    pub fn weighted_sq(
        &mut self,
        pred: Var,
        target: Arc<Vec<f64>>,
        weights: Arc<Vec<f64>>,
        denom: f64,
    ) -> Var {
        let tp = self.value(pred);
        assert_eq!(tp.len(), target.len(), "target size");
        assert_eq!(tp.len(), weights.len(), "weight size");
        let s: f64 = tp
            .data
            .iter()
            .zip(target.iter())
            .zip(weights.iter())
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum();
        let grad = self.needs(&[pred]);
        self.push(
            Cow::Owned(Tensor::scalar(s / denom)),
            Op::WeightedSq {
                pred,
                target,
                weights,
                denom,
            },
            grad,
        )
    }

    /// Backpropagates from a scalar.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        self.backward_with_seeds(&[(loss, &[1.0])])
    }

    /// Backpropagates arbitrary cotangents attached to several variables.
    pub fn backward_with_seeds(&self, seeds: &[(Var, &[f64])]) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for &(v, s) in seeds {
            assert_eq!(s.len(), self.value(v).len(), "seed size");
            if self.nodes[v.0].grad {
                accumulate(&mut grads[v.0], s);
            }
        }
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=top.min(self.nodes.len().saturating_sub(1))).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            nodes: grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = ta.as_matrix();
                let m = tb.shape[1];
                if wants(*a) {
                    let da = grads[a.0].get_or_insert_with(|| vec![0.0; n * k]);
                    gemm(n, m, k, 1.0, (g, 0, m, 1), (&tb.data, 0, 1, m), 1.0, (da, 0, k, 1));
                }
                if wants(*b) {
                    let db = grads[b.0].get_or_insert_with(|| vec![0.0; k * m]);
                    gemm(k, n, m, 1.0, (&ta.data, 0, 1, k), (g, 0, m, 1), 1.0, (db, 0, m, 1));
                }
            }
            Op::AddRowBias(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(*b) {
                    let m = self.value(*b).len();
                    let db = grads[b.0].get_or_insert_with(|| vec![0.0; m]);
                    for row in g.chunks(m) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                }
            }
            Op::AddScaled(a, b, alpha) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(*b) {
                    accumulate_scaled(&mut grads[b.0], g, *alpha);
                }
            }
            Op::Scale(a, alpha) => {
                if wants(*a) {
                    accumulate_scaled(&mut grads[a.0], g, *alpha);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if wants(*x) {
                    let y = &self.nodes[i].value.data;
                    let m = self.value(*x).as_matrix().1;
                    let dx = grads[x.0].get_or_insert_with(|| vec![0.0; y.len()]);
                    for (r, is) in inv_std.iter().enumerate() {
                        let (gy, yy) = (&g[r * m..(r + 1) * m], &y[r * m..(r + 1) * m]);
                        let mg = gy.iter().sum::<f64>() / m as f64;
                        let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            dx[r * m + j] += is * (gy[j] - mg - yy[j] * mgy);
                        }
                    }
                }
            }
            Op::Modulate { h, scale, shift } => {
                let th = self.value(*h);
                let ts = self.value(*scale);
                let m = ts.len();
                if wants(*h) {
                    let dh = grads[h.0].get_or_insert_with(|| vec![0.0; th.len()]);
                    for (idx, d) in dh.iter_mut().enumerate() {
                        *d += g[idx] * (1.0 + ts.data[idx % m]);
                    }
                }
                if wants(*scale) {
                    let ds = grads[scale.0].get_or_insert_with(|| vec![0.0; m]);
                    for (idx, (gv, hv)) in g.iter().zip(&th.data).enumerate() {
                        ds[idx % m] += gv * hv;
                    }
                }
                if wants(*shift) {
                    let db = grads[shift.0].get_or_insert_with(|| vec![0.0; m]);
                    for row in g.chunks(m) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                }
            }
            Op::GatedAdd { x, gate, y } => {
                let tg = self.value(*gate);
                let ty = self.value(*y);
                let m = tg.len();
                if wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if wants(*gate) {
                    let dg = grads[gate.0].get_or_insert_with(|| vec![0.0; m]);
                    for (idx, (gv, yv)) in g.iter().zip(&ty.data).enumerate() {
                        dg[idx % m] += gv * yv;
                    }
                }
                if wants(*y) {
                    let dy = grads[y.0].get_or_insert_with(|| vec![0.0; ty.len()]);
                    for (idx, d) in dy.iter_mut().enumerate() {
                        *d += g[idx] * tg.data[idx % m];
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let tx = self.value(*x);
                    let dx = grads[x.0].get_or_insert_with(|| vec![0.0; tx.len()]);
                    for ((d, &v), gv) in dx.iter_mut().zip(&tx.data).zip(g) {
                        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d += gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner);
                    }
                }
            }
            Op::Silu(x) => {
                if wants(*x) {
                    let tx = self.value(*x);
                    let dx = grads[x.0].get_or_insert_with(|| vec![0.0; tx.len()]);
                    for ((d, &v), gv) in dx.iter_mut().zip(&tx.data).zip(g) {
                        let s = 1.0 / (1.0 + (-v).exp());
                        *d += gv * s * (1.0 + v * (1.0 - s));
                    }
                }
            }
            Op::Gather { src, index } => {
                if wants(*src) {
                    let n = self.value(*src).len();
                    let ds = grads[src.0].get_or_insert_with(|| vec![0.0; n]);
                    for (&ix, gv) in index.iter().zip(g) {
                        if ix != ZERO_INDEX {
                            ds[ix as usize] += gv;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if wants(*p) {
                        accumulate(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Attention {
                qkv,
                bias,
                spec,
                probs,
            } => self.attention_backward(*qkv, *bias, spec, probs, g, grads),
            Op::WeightedSq {
                pred,
                target,
                weights,
                denom,
            } => {
                if wants(*pred) {
                    let tp = self.value(*pred);
                    let dp = grads[pred.0].get_or_insert_with(|| vec![0.0; tp.len()]);
                    let c = 2.0 * g[0] / denom;
                    for (idx, d) in dp.iter_mut().enumerate() {
                        *d += c * weights[idx] * (tp.data[idx] - target[idx]);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        qkv: Var,
        bias: Var,
        spec: &AttnSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let tq = self.value(qkv);
        let (nw, t, h, c) = (spec.n_windows, spec.tokens, spec.heads, spec.dim);
        let dh = c / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = vec![0.0; tq.len()];
        let mut dbias = vec![0.0; self.value(bias).len()];
        let mut dp = vec![0.0; t * t];
        for w in 0..nw {
            let row0 = w * t;
            for hd in 0..h {
                let p = &probs[(w * h + hd) * t * t..(w * h + hd + 1) * t * t];
                let qo = row0 * 3 * c + hd * dh;
                let go = row0 * c + hd * dh;
                // dV = P^T dO
                gemm(t, t, dh, 1.0, (p, 0, 1, t), (g, go, c, 1), 1.0, (&mut dqkv, qo + 2 * c, 3 * c, 1));
                // dP = dO V^T
                gemm(
                    t,
                    dh,
                    t,
                    1.0,
                    (g, go, c, 1),
                    (&tq.data, qo + 2 * c, 1, 3 * c),
                    0.0,
                    (&mut dp, 0, t, 1),
                );
                // Softmax backward, in place: dS = P * (dP - rowsum(dP * P)).
                for r in 0..t {
                    let row = &mut dp[r * t..(r + 1) * t];
                    let pr = &p[r * t..(r + 1) * t];
                    let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (d, pv) in row.iter_mut().zip(pr) {
                        *d = pv * (*d - dot);
                    }
                }
                for (ij, ds) in dp.iter().enumerate() {
                    dbias[spec.rel_index[ij] as usize * h + hd] += ds;
                }
                // dQ = scale dS K, dK = scale dS^T Q
                gemm(t, t, dh, scale, (&dp, 0, t, 1), (&tq.data, qo + c, 3 * c, 1), 1.0, (&mut dqkv, qo, 3 * c, 1));
                gemm(t, t, dh, scale, (&dp, 0, 1, t), (&tq.data, qo, 3 * c, 1), 1.0, (&mut dqkv, qo + c, 3 * c, 1));
            }
        }
        if self.nodes[qkv.0].grad {
            accumulate(&mut grads[qkv.0], &dqkv);
        }
        if self.nodes[bias.0].grad {
            accumulate(&mut grads[bias.0], &dbias);
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(d) => d.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_scaled(slot: &mut Option<Vec<f64>>, g: &[f64], alpha: f64) {
    let d = slot.get_or_insert_with(|| vec![0.0; g.len()]);
    d.iter_mut().zip(g).for_each(|(a, b)| *a += alpha * b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks the gradient of `f` against central differences for every input entry.
    fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).data[0]
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.len()]);
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[k].data[j] += h;
                let mut minus = inputs.clone();
                minus[k].data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (fd - analytic[j]).abs() / fd.abs().max(1e-3);
                assert!(err < 1e-6, "input {k} entry {j}: fd {fd} analytic {}", analytic[j]);
            }
        }
    }

    /// Reduces any tensor to a scalar with fixed random weights.
    fn probe(g: &mut Graph, v: Var) -> Var {
        let n = g.value(v).len();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        g.weighted_sq(v, Arc::new(vec![0.3; n]), Arc::new(w), 1.0)
    }

    #[test]
    fn matmul_and_bias_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![
            rand_tensor(&mut rng, vec![5, 3]),
            rand_tensor(&mut rng, vec![3, 4]),
            rand_tensor(&mut rng, vec![4]),
        ];
        check_grad(ins, |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.add_row_bias(y, v[2]);
            probe(g, y)
        });
    }

    #[test]
    fn norm_and_modulation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![
            rand_tensor(&mut rng, vec![6, 4]),
            rand_tensor(&mut rng, vec![4]),
            rand_tensor(&mut rng, vec![4]),
            rand_tensor(&mut rng, vec![4]),
            rand_tensor(&mut rng, vec![6, 4]),
        ];
        check_grad(ins, |g, v| {
            let n = g.layer_norm(v[0]);
            let m = g.modulate(n, v[1], v[2]);
            let a = g.gelu(m);
            let s = g.silu(v[4]);
            let y = g.gated_add(a, v[3], s);
            let y = g.add_scaled(y, v[0], -0.7);
            let y = g.scale(y, 1.3);
            probe(g, y)
        });
    }

    #[test]
    fn gather_and_concat_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![rand_tensor(&mut rng, vec![6]), rand_tensor(&mut rng, vec![2])];
        check_grad(ins, |g, v| {
            let c = g.concat(&[v[0], v[1]], vec![8]);
            let idx = Arc::new(vec![0, 0, 7, ZERO_INDEX, 3, 5, 5, 1]);
            let y = g.gather(c, idx, vec![4, 2]);
            let sq = g.modulate(y, v[1], v[1]);
            probe(g, sq)
        });
    }

    #[test]
    fn attention_grads_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (nw, t, heads, c) = (2, 3, 2, 4);
        let rel: Vec<u32> = (0..t * t).map(|i| (i % 5) as u32).collect();
        let mut mask = vec![0.0; nw * t * t];
        mask[1] = -1e9;
        mask[t * t + 5] = -1e9;
        let spec = AttnSpec {
            n_windows: nw,
            tokens: t,
            heads,
            dim: c,
            rel_index: Arc::new(rel),
            mask: Some(Arc::new(mask)),
        };
        let ins = vec![
            rand_tensor(&mut rng, vec![nw * t, 3 * c]),
            rand_tensor(&mut rng, vec![5, heads]),
        ];
        check_grad(ins, move |g, v| {
            let y = g.window_attention(v[0], v[1], spec.clone());
            probe(g, y)
        });
    }

    #[test]
    fn attention_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, heads, c) = (4, 2, 6);
        let dh = c / heads;
        let qkv = rand_tensor(&mut rng, vec![t, 3 * c]);
        let bias = rand_tensor(&mut rng, vec![t * t, heads]);
        let spec = AttnSpec {
            n_windows: 1,
            tokens: t,
            heads,
            dim: c,
            rel_index: Arc::new((0..(t * t) as u32).collect()),
            mask: None,
        };
        let mut g = Graph::new();
        let q = g.constant(qkv.clone());
        let b = g.constant(bias.clone());
        let out = g.window_attention(q, b, spec);
        let got = &g.value(out).data;
        let at = |i: usize, j: usize| qkv.data[i * 3 * c + j];
        for hd in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|d| at(i, hd * dh + d) * at(j, c + hd * dh + d)).sum();
                        dot / (dh as f64).sqrt() + bias.data[(i * t + j) * heads + hd]
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for d in 0..dh {
                    let want: f64 = (0..t).map(|j| scores[j].exp() / z * at(j, 2 * c + hd * dh + d)).sum();
                    assert!((got[i * c + hd * dh + d] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn repeated_param_binding_accumulates() {
        let w = Tensor::new(vec![1, 1], vec![3.0]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1], vec![2.0]));
        let a = g.param(0, &w);
        let b = g.param(0, &w);
        assert_eq!(a, b);
        let y = g.matmul(x, a);
        let y = g.matmul(y, b);
        let loss = g.weighted_sq(y, Arc::new(vec![0.0]), Arc::new(vec![1.0]), 1.0);
        // loss = (2 w^2)^2, dloss/dw = 16 w^3
        let grads = g.backward(loss);
        assert!((grads.param(0).unwrap()[0] - 16.0 * 27.0).abs() < 1e-9);
    }

    #[test]
    fn inference_graph_has_no_grads() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let p = g.param(0, &w);
        let y = g.matmul(x, p);
        assert_eq!(g.value(y).data, vec![4.0, 6.0]);
        let loss = g.weighted_sq(y, Arc::new(vec![0.0; 2]), Arc::new(vec![1.0; 2]), 1.0);
        assert!(g.backward(loss).param(0).is_none());
    }
}
