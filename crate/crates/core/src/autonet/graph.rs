//! A tape of tensor operations with exact reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every consumer before its inputs. Feature maps are channel-major
//! (`[C, H, W]`); 2-D operations view a tensor as `dims[0] x rest`.

use crate::error::{Error, Result};

use super::tensor::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
        cols: Vec<f64>,
    },
    Silu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Upsample2(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    SoftmaxRows(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    MeanRows(NodeId),
    ChannelDot {
        f: NodeId,
        z: NodeId,
    },
    AddScalar {
        x: NodeId,
        s: NodeId,
    },
    MulMask {
        f: NodeId,
        m: NodeId,
    },
    SliceChannels {
        x: NodeId,
        start: usize,
    },
    BceWithLogits {
        logits: NodeId,
        target: Vec<f64>,
    },
    WeightedSmoothL1 {
        pred: NodeId,
        target: Vec<f64>,
        weight: Vec<f64>,
        beta: f64,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

fn rows_cols(dims: &[usize]) -> (usize, usize) {
    match dims {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

/// `c = beta * c + op(a) * op(b)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = 0.0;
                }
            }
        }
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= (m - 1) * rsc + (n - 1) * csc + 1);
    // SAFETY: the assertions above bound the furthest element each strided
    // operand addresses.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth-L1 with transition point `beta`.
pub fn smooth_l1(residual: f64, beta: f64) -> f64 {
    let a = residual.abs();
    if a < beta {
        0.5 * residual * residual / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(residual: f64, beta: f64) -> f64 {
    if residual.abs() < beta {
        residual / beta
    } else {
        residual.signum()
    }
}

fn conv_out(size: usize, spec: ConvSpec) -> usize {
    (size + 2 * spec.pad - spec.kernel) / spec.stride + 1
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, spec: ConvSpec) -> (Vec<f64>, usize, usize) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.pad);
    let (ho, wo) = (conv_out(h, spec), conv_out(w, spec));
    let n = ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, spec: ConvSpec) {
    let (k, s, p) = (spec.kernel, spec.stride, spec.pad);
    let (ho, wo) = (conv_out(h, spec), conv_out(w, spec));
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// Gradient of the last backward pass with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).map(Vec::as_slice).filter(|g| !g.is_empty())
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => self.inputs_of(&op).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            dims,
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Input | Op::Param(_) => vec![],
            Op::Conv { x, w, b, .. } => vec![*x, *w, *b],
            Op::Silu(x) | Op::Sigmoid(x) | Op::Tanh(x) | Op::Scale(x, _) | Op::Upsample2(x) => vec![*x],
            Op::SoftmaxRows(x) | Op::MeanRows(x) => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Gather { table, .. } => vec![*table],
            Op::ChannelDot { f, z } => vec![*f, *z],
            Op::AddScalar { x, s } => vec![*x, *s],
            Op::MulMask { f, m } => vec![*f, *m],
            Op::SliceChannels { x, .. } => vec![*x],
            Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::WeightedSmoothL1 { pred, .. } => vec![*pred],
            Op::WeightedSum(t) => t.iter().map(|(n, _)| *n).collect(),
        }
    }

    pub fn input(&mut self, dims: Vec<usize>, value: Vec<f64>) -> Result<NodeId> {
        if dims.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!("dims {dims:?} do not match {} values", value.len())));
        }
        Ok(self.push(dims, value, Op::Input))
    }

    /// Leaf bound to registry entry `index`; gradients flow back to it.
    pub fn param(&mut self, params: &ModelParams, index: usize) -> NodeId {
        let t = &params.tensors()[index];
        self.push(t.dims.clone(), t.values.clone(), Op::Param(index))
    }

    /// A trainable-looking leaf that is not in any registry (for tests).
    pub fn free_param(&mut self, dims: Vec<usize>, value: Vec<f64>) -> NodeId {
        self.push(dims, value, Op::Param(usize::MAX))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        let [cin, h, wid] = xd[..] else {
            return Err(Error::Shape(format!("conv input must be [C, H, W], got {xd:?}")));
        };
        let [cout, wcin, kh, kw] = wd[..] else {
            return Err(Error::Shape(format!("conv weight must be 4-D, got {wd:?}")));
        };
        if wcin != cin || kh != spec.kernel || kw != spec.kernel || self.dims(b) != [cout] {
            return Err(Error::Shape(format!(
                "conv weight {wd:?} / bias {:?} incompatible with input {xd:?}",
                self.dims(b)
            )));
        }
        if h + 2 * spec.pad < spec.kernel || wid + 2 * spec.pad < spec.kernel {
            return Err(Error::Shape("conv input smaller than kernel".into()));
        }
        let (cols, ho, wo) = im2col(self.value(x), cin, h, wid, spec);
        let n = ho * wo;
        let kk = cin * spec.kernel * spec.kernel;
        let mut out = vec![0.0; cout * n];
        let bias = self.value(b);
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        gemm(cout, kk, n, self.value(w), (kk, 1), &cols, (n, 1), 1.0, &mut out, (n, 1));
        Ok(self.push(vec![cout, ho, wo], out, Op::Conv { x, w, b, spec, cols }))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.value(x).iter().map(|&a| f(a)).collect();
        self.push(self.dims(x).to_vec(), v, op)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |a| a * sigmoid(a), Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.unary(x, |a| a * s, Op::Scale(x, s))
    }

    fn same_len(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Shape(format!(
                "elementwise operands differ: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    /// Elementwise sum; the result takes `a`'s dims.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.dims(a).to_vec(), v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.dims(a).to_vec(), v, Op::Mul(a, b)))
    }

    /// Nearest-neighbor 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let [c, h, w] = self.dims(x)[..] else {
            return Err(Error::Shape("upsample expects [C, H, W]".into()));
        };
        let src = self.value(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut v = vec![0.0; c * h2 * w2];
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    v[(ci * h2 + y) * w2 + xx] = src[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![c, h2, w2], v, Op::Upsample2(x)))
    }

    fn mm_view(&self, id: NodeId, t: bool) -> (usize, usize, (usize, usize)) {
        let (r, c) = rows_cols(self.dims(id));
        if t {
            (c, r, (1, c))
        } else {
            (r, c, (c, 1))
        }
    }

    /// `op(a) * op(b)`, viewing each operand as `dims[0] x rest`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (m, k, sa) = self.mm_view(a, ta);
        let (k2, n, sb) = self.mm_view(b, tb);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                self.dims(a),
                if ta { "ᵀ" } else { "" },
                self.dims(b),
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), sa, self.value(b), sb, 0.0, &mut out, (n, 1));
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = rows_cols(self.dims(x));
        let mut v = self.value(x).to_vec();
        for row in v.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            row.iter_mut().for_each(|e| *e /= sum);
        }
        self.push(self.dims(x).to_vec(), v, Op::SoftmaxRows(x))
    }

    /// Rows `ids` of a `[V, d]` table.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = rows_cols(self.dims(table));
        if let Some(&id) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::UnknownToken { id, vocab: v });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Mean over rows of an `[R, d]` matrix, giving `[1, d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, d) = rows_cols(self.dims(x));
        if r == 0 {
            return Err(Error::Shape("mean over zero rows".into()));
        }
        let mut out = vec![0.0; d];
        for row in self.value(x).chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        Ok(self.push(vec![1, d], out, Op::MeanRows(x)))
    }

    /// Per-pixel dot product of a `[C, H, W]` map with a length-`C` vector,
    /// giving `[H, W]`.
    pub fn channel_dot(&mut self, f: NodeId, z: NodeId) -> Result<NodeId> {
        let fd = self.dims(f).to_vec();
        let (c, n) = rows_cols(&fd);
        if self.value(z).len() != c {
            return Err(Error::Shape(format!("z has {} entries, features have {c} channels", self.value(z).len())));
        }
        let fv = self.value(f);
        let zv = self.value(z);
        let mut out = vec![0.0; n];
        for (ci, plane) in fv.chunks(n).enumerate() {
            let zc = zv[ci];
            out.iter_mut().zip(plane).for_each(|(o, v)| *o += zc * v);
        }
        Ok(self.push(fd[1..].to_vec(), out, Op::ChannelDot { f, z }))
    }

    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape("add_scalar needs a one-element operand".into()));
        }
        let b = self.value(s)[0];
        Ok(self.unary(x, |a| a + b, Op::AddScalar { x, s }))
    }

    /// `f[c, i, j] * m[i, j]`.
    pub fn mul_mask(&mut self, f: NodeId, m: NodeId) -> Result<NodeId> {
        let (c, n) = rows_cols(self.dims(f));
        if self.value(m).len() != n {
            return Err(Error::Shape(format!(
                "mask {:?} does not match feature map {:?}",
                self.dims(m),
                self.dims(f)
            )));
        }
        let mv = self.value(m);
        let mut out = self.value(f).to_vec();
        for plane in out.chunks_mut(n).take(c) {
            plane.iter_mut().zip(mv).for_each(|(v, m)| *v *= m);
        }
        Ok(self.push(self.dims(f).to_vec(), out, Op::MulMask { f, m }))
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let d = self.dims(x).to_vec();
        let (c, n) = rows_cols(&d);
        if start + len > c {
            return Err(Error::Shape(format!("channels {start}..{} out of {c}", start + len)));
        }
        let v = self.value(x)[start * n..(start + len) * n].to_vec();
        let mut dims = d.clone();
        dims[0] = len;
        Ok(self.push(dims, v, Op::SliceChannels { x, start }))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: &[f64]) -> Result<NodeId> {
        if self.value(logits).len() != target.len() {
            return Err(Error::Shape("mask and target sizes differ".into()));
        }
        let n = target.len() as f64;
        let loss = self
            .value(logits)
            .iter()
            .zip(target)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::BceWithLogits {
                logits,
                target: target.to_vec(),
            },
        ))
    }

    /// Mean over elements of `weight * smooth_l1(pred - target)`.
    pub fn weighted_smooth_l1(&mut self, pred: NodeId, target: &[f64], weight: &[f64], beta: f64) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != target.len() || p.len() != weight.len() {
            return Err(Error::Shape("prediction, target and weight sizes differ".into()));
        }
        let loss = p
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((&p, &t), &w)| w * smooth_l1(p - t, beta))
            .sum::<f64>()
            / p.len() as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::WeightedSmoothL1 {
                pred,
                target: target.to_vec(),
                weight: weight.to_vec(),
                beta,
            },
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, c) in terms {
            if self.value(id).len() != 1 {
                return Err(Error::Shape("weighted_sum takes scalars".into()));
            }
            total += c * self.value(id)[0];
        }
        Ok(self.push(vec![], vec![total], Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse pass from a scalar node. Returns `(registry index, gradient)`
    /// for every parameter leaf reached.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<(usize, Vec<f64>)>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph("backward called on a node this graph never computed".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Graph("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|_| Vec::new()).collect();
        grads[loss.0] = vec![1.0];
        let mut out = Vec::new();
        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.backprop_node(i, &g, &mut grads);
            if let Op::Param(idx) = self.nodes[i].op {
                out.push((idx, g.clone()));
            }
            grads[i] = g;
        }
        self.grads = grads;
        out.sort_by_key(|(i, _)| *i);
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |id: NodeId, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            let dst = &mut grads[id.0];
            if dst.is_empty() {
                *dst = vec![0.0; self.nodes[id.0].value.len()];
            }
            f(dst);
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, spec, cols } => {
                let [cin, h, wid] = self.nodes[x.0].dims[..] else { unreachable!() };
                let cout = node.dims[0];
                let n = node.dims[1] * node.dims[2];
                let kk = cin * spec.kernel * spec.kernel;
                acc(*b, &|d| {
                    for (co, row) in g.chunks(n).enumerate() {
                        d[co] += row.iter().sum::<f64>();
                    }
                });
                acc(*w, &|d| gemm(cout, n, kk, g, (n, 1), cols, (1, n), 1.0, d, (kk, 1)));
                let wv = &self.nodes[w.0].value;
                acc(*x, &|d| {
                    let mut dcols = vec![0.0; kk * n];
                    gemm(kk, cout, n, wv, (1, kk), g, (n, 1), 0.0, &mut dcols, (n, 1));
                    col2im(&dcols, d, cin, h, wid, *spec);
                });
            }
            Op::Silu(x) => {
                let xv = &self.nodes[x.0].value;
                acc(*x, &|d| {
                    for ((d, &a), &gi) in d.iter_mut().zip(xv).zip(g) {
                        let s = sigmoid(a);
                        *d += gi * (s + a * s * (1.0 - s));
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &|d| {
                for ((d, &s), &gi) in d.iter_mut().zip(y).zip(g) {
                    *d += gi * s * (1.0 - s);
                }
            }),
            Op::Tanh(x) => acc(*x, &|d| {
                for ((d, &t), &gi) in d.iter_mut().zip(y).zip(g) {
                    *d += gi * (1.0 - t * t);
                }
            }),
            Op::Scale(x, s) => acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s)),
            Op::Add(a, b) => {
                acc(*a, &|d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                acc(*b, &|d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Upsample2(x) => {
                let [c, h, w] = self.nodes[x.0].dims[..] else { unreachable!() };
                let (h2, w2) = (2 * h, 2 * w);
                acc(*x, &|d| {
                    for ci in 0..c {
                        for yy in 0..h2 {
                            for xx in 0..w2 {
                                d[(ci * h + yy / 2) * w + xx / 2] += g[(ci * h2 + yy) * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let (m, k, sa) = self.mm_view(*a, *ta);
                let (_, n, sb) = self.mm_view(*b, *tb);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                // d op(a) = g * op(b)ᵀ, written through op(a)'s strides
                acc(*a, &|d| gemm(m, n, k, g, (n, 1), bv, (sb.1, sb.0), 1.0, d, sa));
                // d op(b) = op(a)ᵀ * g
                acc(*b, &|d| gemm(k, m, n, av, (sa.1, sa.0), g, (n, 1), 1.0, d, sb));
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = rows_cols(&node.dims);
                acc(*x, &|d| {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d_len = node.dims[1];
                acc(*table, &|d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d_len {
                            d[id * d_len + j] += g[r * d_len + j];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let (r, _) = rows_cols(&self.nodes[x.0].dims);
                acc(*x, &|d| {
                    for row in d.chunks_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(d, gi)| *d += gi / r as f64);
                    }
                });
            }
            Op::ChannelDot { f, z } => {
                let n = g.len();
                let (fv, zv) = (&self.nodes[f.0].value, &self.nodes[z.0].value);
                acc(*f, &|d| {
                    for (ci, plane) in d.chunks_mut(n).enumerate() {
                        plane.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * zv[ci]);
                    }
                });
                acc(*z, &|d| {
                    for (ci, plane) in fv.chunks(n).enumerate() {
                        d[ci] += plane.iter().zip(g).map(|(v, gi)| v * gi).sum::<f64>();
                    }
                });
            }
            Op::AddScalar { x, s } => {
                acc(*x, &|d| d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                acc(*s, &|d| d[0] += g.iter().sum::<f64>());
            }
            Op::MulMask { f, m } => {
                let n = self.nodes[m.0].value.len();
                let (fv, mv) = (&self.nodes[f.0].value, &self.nodes[m.0].value);
                acc(*f, &|d| {
                    for (dp, gp) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            dp[j] += gp[j] * mv[j];
                        }
                    }
                });
                acc(*m, &|d| {
                    for (fp, gp) in fv.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            d[j] += gp[j] * fp[j];
                        }
                    }
                });
            }
            Op::SliceChannels { x, start } => {
                let n = rows_cols(&node.dims).1;
                acc(*x, &|d| {
                    d[start * n..start * n + g.len()].iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                });
            }
            Op::BceWithLogits { logits, target } => {
                let xv = &self.nodes[logits.0].value;
                let scale = g[0] / target.len() as f64;
                acc(*logits, &|d| {
                    for ((d, &x), &t) in d.iter_mut().zip(xv).zip(target) {
                        *d += scale * (sigmoid(x) - t);
                    }
                });
            }
            Op::WeightedSmoothL1 { pred, target, weight, beta } => {
                let pv = &self.nodes[pred.0].value;
                let scale = g[0] / target.len() as f64;
                acc(*pred, &|d| {
                    for i in 0..d.len() {
                        d[i] += scale * weight[i] * smooth_l1_grad(pv[i] - target[i], *beta);
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(id, c) in terms {
                    acc(id, &|d| d[0] += c * g[0]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.free_param(vec![1], vec![3.0]);
        let y = g.mul(x, x).unwrap();
        let y = g.weighted_sum(&[(y, 1.0)]).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.scalar(y), 9.0);
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_on_foreign_node_is_graph_error() {
        let mut a = Graph::new();
        let x = a.free_param(vec![1], vec![1.0]);
        let _ = a.weighted_sum(&[(x, 1.0)]).unwrap();
        let mut fresh = Graph::new();
        assert!(matches!(fresh.backward(NodeId(1)), Err(Error::Graph(_))));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (cin, h, w, cout) = (3, 7, 6, 4);
        let spec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
        let xv = rand_vec(&mut rng, cin * h * w);
        let wv = rand_vec(&mut rng, cout * cin * 9);
        let bv = rand_vec(&mut rng, cout);
        let mut g = Graph::new();
        let x = g.input(vec![cin, h, w], xv.clone()).unwrap();
        let wn = g.free_param(vec![cout, cin, 3, 3], wv.clone());
        let b = g.free_param(vec![cout], bv.clone());
        let y = g.conv2d(x, wn, b, spec).unwrap();
        let (ho, wo) = (4, 3);
        assert_eq!(g.dims(y), &[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bv[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    s += wv[((co * cin + ci) * 3 + ky) * 3 + kx] * xv[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((g.value(y)[(co * ho + oy) * wo + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    /// Central differences on every free leaf of a graph built by `build`.
    fn check_grads(build: impl Fn(&mut Graph, &[Vec<f64>]) -> (Vec<NodeId>, NodeId), leaves: Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let (ids, loss) = build(&mut g, &leaves);
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = ids.iter().map(|&i| g.grad(i).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(i).len()])).collect();
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for j in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut l = leaves.clone();
                    l[li][j] += delta;
                    let mut g = Graph::new();
                    let (_, loss) = build(&mut g, &l);
                    g.scalar(loss)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[li][j];
                assert!((fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())), "leaf {li}[{j}]: fd {fd} vs analytic {a}");
            }
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            rand_vec(&mut rng, 2 * 5 * 4), // x: [2, 5, 4]
            rand_vec(&mut rng, 3 * 2 * 9), // w: [3, 2, 3, 3]
            rand_vec(&mut rng, 3),         // b
            rand_vec(&mut rng, 4 * 3),     // keys [4, 3]
            rand_vec(&mut rng, 3),         // z
            rand_vec(&mut rng, 1),         // scalar bias
            rand_vec(&mut rng, 6 * 3),     // table [6, 3]
        ];
        let target: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
        let build = move |g: &mut Graph, l: &[Vec<f64>]| {
            let x = g.free_param(vec![2, 5, 4], l[0].clone());
            let w = g.free_param(vec![3, 2, 3, 3], l[1].clone());
            let b = g.free_param(vec![3], l[2].clone());
            let keys = g.free_param(vec![4, 3], l[3].clone());
            let z = g.free_param(vec![3], l[4].clone());
            let s = g.free_param(vec![1], l[5].clone());
            let table = g.free_param(vec![6, 3], l[6].clone());
            let c = g.conv2d(x, w, b, ConvSpec { kernel: 3, stride: 2, pad: 1 }).unwrap(); // [3, 3, 2]
            let c = g.silu(c);
            let up = g.upsample2(c).unwrap(); // [3, 6, 4]
            let tok = g.gather(table, &[1, 4, 4, 0]).unwrap(); // [4, 3]
            let sent = g.mean_rows(tok).unwrap();
            let q = g.matmul(keys, up, false, false).unwrap(); // [4, 24]
            let sc = g.matmul(q, tok, true, false).unwrap(); // [24, 3]
            let sc = g.scale(sc, 0.5);
            let a = g.softmax_rows(sc);
            let gram = g.matmul(tok, tok, true, false).unwrap(); // [3, 3]
            let att = g.matmul(gram, a, false, true).unwrap(); // [3, 24]
            let f = g.add(up, att).unwrap();
            let f = g.tanh(f);
            let zz = g.add(z, sent).unwrap();
            let logits = g.channel_dot(f, zz).unwrap(); // [6, 4]
            let logits = g.add_scalar(logits, s).unwrap();
            let m = g.sigmoid(logits);
            let pooled = g.mul_mask(f, m).unwrap();
            let first = g.slice_channels(pooled, 1, 1).unwrap();
            let l1 = g.weighted_smooth_l1(first, &[0.3; 24], &[1.5; 24], 0.2).unwrap();
            let small = g.slice_channels(logits, 0, 1).unwrap(); // [1, 4]
            let l2 = g.bce_with_logits(small, &target[..4]).unwrap();
            let loss = g.weighted_sum(&[(l1, 1.0), (l2, 0.7)]).unwrap();
            (vec![x, w, b, keys, z, s, table], loss)
        };
        check_grads(build, leaves);
    }

    #[test]
    fn smooth_l1_branches_meet_at_beta() {
        for beta in [0.1, 1.0, 3.0] {
            assert!((smooth_l1(beta, beta) - beta / 2.0).abs() < 1e-15);
            assert!((smooth_l1(beta * (1.0 - 1e-12), beta) - beta / 2.0).abs() < 1e-9);
        }
    }
}
