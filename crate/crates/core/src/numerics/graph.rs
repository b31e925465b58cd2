//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! Every operation appends a node to the tape and computes its value
//! eagerly. Because nodes can only reference earlier nodes, the tape order
//! is already a topological order and [`Graph::backward`] walks it in
//! reverse, accumulating each node's gradient into its inputs.

use std::sync::Arc;

use super::array::{softmax_in_place, Array, Scalar};
use super::NumericsError;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the rows of a packed activation matrix are grouped into sequences.
///
/// Attention only mixes rows inside the same segment. `positions` carries
/// the original sequence index of every row, which the distance bias uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    segments: Vec<(usize, usize)>,
    positions: Vec<usize>,
}

impl SeqLayout {
    /// `lengths[s]` consecutive rows form segment `s`.
    pub fn new(lengths: &[usize], positions: Vec<usize>) -> Result<Self, NumericsError> {
        let total: usize = lengths.iter().sum();
        if total != positions.len() {
            return Err(NumericsError::Layout(format!(
                "segments cover {total} rows but {} positions were given",
                positions.len()
            )));
        }
        let mut start = 0;
        let segments = lengths
            .iter()
            .map(|&len| {
                let seg = (start, len);
                start += len;
                seg
            })
            .collect();
        Ok(Self {
            segments,
            positions,
        })
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Gather {
        sources: Vec<NodeId>,
        index: Vec<(usize, usize)>,
    },
    Softmax(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Arc<SeqLayout>,
        heads: usize,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    Mse(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Softmax(..) => "softmax",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
        }
    }
}

struct Node<T> {
    op: Op,
    value: Array<T>,
    // Forward intermediates the backward pass reuses (softmax rows,
    // normalized activations, inverse standard deviations).
    aux: Vec<T>,
    requires_grad: bool,
}

/// A recorded computation. Build it with the op methods, then call
/// [`Graph::backward`] on a scalar node.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
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

    /// A differentiable input (a parameter or anything whose gradient is wanted).
    pub fn leaf(&mut self, value: Array<T>) -> NodeId {
        self.push(Op::Leaf, value, Vec::new(), true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> NodeId {
        self.push(Op::Leaf, value, Vec::new(), false)
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn push(&mut self, op: Op, value: Array<T>, aux: Vec<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            aux,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let value = av.matmul(bv)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, Vec::new(), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.zip(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.zip(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn zip(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.mismatch(name, a, b));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::from_vec(av.shape(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(op, value, Vec::new(), rg))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(self.mismatch("add_row", x, bias));
        }
        let mut value = xv.clone();
        let b = bv.data().to_vec();
        for r in 0..value.rows() {
            for (v, &bb) in value.row_mut(r).iter_mut().zip(&b) {
                *v = *v + bb;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Op::AddRow(x, bias), value, Vec::new(), rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let f = T::of(factor);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * f).collect();
        let value = Array::from_vec(xv.shape(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(Op::Scale(x, factor), value, Vec::new(), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (half, one, c, s) = (T::of(0.5), T::one(), T::of(GELU_COEF), T::of(GELU_SCALE));
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| half * v * (one + (s * (v + c * v * v * v)).tanh()))
            .collect();
        let value = Array::from_vec(xv.shape(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(Op::Gelu(x), value, Vec::new(), rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// the per-column `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).len() != d {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let n = T::of(d as f64);
        let eps = T::of(LAYER_NORM_EPS);
        // aux layout: normalized rows (rows * d) followed by per-row 1/std.
        let mut aux = vec![T::zero(); rows * d + rows];
        let mut value = Array::zeros(xv.shape());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / n;
            let var = row
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                / n;
            let rstd = T::one() / (var + eps).sqrt();
            aux[rows * d + r] = rstd;
            let out = value.row_mut(r);
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                aux[r * d + j] = xhat;
                out[j] = xhat * g[j] + b[j];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, value, aux, rg))
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `sources[index[r].0]`.
    pub fn gather(
        &mut self,
        sources: &[NodeId],
        index: Vec<(usize, usize)>,
    ) -> Result<NodeId, NumericsError> {
        let cols = match sources.first() {
            Some(&s) => self.value(s).cols(),
            None => return Err(NumericsError::Layout("gather needs a source".into())),
        };
        for &s in sources {
            if self.value(s).cols() != cols {
                return Err(self.mismatch("gather", sources[0], s));
            }
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(src, row) in &index {
            let Some(&s) = sources.get(src) else {
                return Err(NumericsError::Layout(format!("gather source {src} missing")));
            };
            let sv = self.value(s);
            if row >= sv.rows() {
                return Err(NumericsError::Layout(format!(
                    "gather row {row} out of range for shape {:?}",
                    sv.shape()
                )));
            }
            data.extend_from_slice(sv.row(row));
        }
        let value = Array::from_vec(&[index.len(), cols], data)?;
        let rg = self.needs(sources);
        Ok(self.push(
            Op::Gather {
                sources: sources.to_vec(),
                index,
            },
            value,
            Vec::new(),
            rg,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.needs(&[x]);
        self.push(Op::Softmax(x), value, Vec::new(), rg)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows × d]`; rows attend only within their own
    /// segment of `layout`. With `slopes`, head `h` adds
    /// `-slopes[h] * |pos_i - pos_j|` to every score. Rows outside a segment
    /// are never scored, which is equivalent to a `-inf` mask.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Arc<SeqLayout>,
        heads: usize,
        slopes: Option<Vec<f64>>,
    ) -> Result<NodeId, NumericsError> {
        let shape = self.value(q).shape().to_vec();
        for other in [k, v] {
            if self.value(other).shape() != shape.as_slice() {
                return Err(self.mismatch("attention", q, other));
            }
        }
        if shape.len() != 2 || shape[0] != layout.rows() {
            return Err(NumericsError::Layout(format!(
                "attention input {shape:?} does not match layout of {} rows",
                layout.rows()
            )));
        }
        let d = shape[1];
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Layout(format!(
                "model width {d} not divisible into {heads} heads"
            )));
        }
        if let Some(s) = &slopes {
            if s.len() != heads {
                return Err(NumericsError::Layout(format!(
                    "{} slopes for {heads} heads",
                    s.len()
                )));
            }
        }
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let prob_len: usize = layout.segments().iter().map(|&(_, l)| heads * l * l).sum();
        let mut probs = vec![T::zero(); prob_len];
        let mut out = Array::zeros(&shape);
        let mut off = 0;
        for &(start, len) in layout.segments() {
            let pos = &layout.positions()[start..start + len];
            for h in 0..heads {
                let p = &mut probs[off..off + len * len];
                let base = start * d + h * hd;
                // scores = scale * Q_h K_h^T
                T::gemm(
                    len,
                    hd,
                    len,
                    scale,
                    &qv.data()[base..],
                    d as isize,
                    1,
                    &kv.data()[base..],
                    1,
                    d as isize,
                    T::zero(),
                    p,
                    len as isize,
                    1,
                );
                if let Some(s) = &slopes {
                    let slope = T::of(s[h]);
                    for i in 0..len {
                        for j in 0..len {
                            let dist = T::of(pos[i].abs_diff(pos[j]) as f64);
                            p[i * len + j] = p[i * len + j] - slope * dist;
                        }
                    }
                }
                for i in 0..len {
                    softmax_in_place(&mut p[i * len..(i + 1) * len]);
                }
                T::gemm(
                    len,
                    len,
                    hd,
                    T::one(),
                    p,
                    len as isize,
                    1,
                    &vv.data()[base..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out.data_mut()[base..],
                    d as isize,
                    1,
                );
                off += len * len;
            }
        }
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
            },
            out,
            probs,
            rg,
        ))
    }

    /// Attention probabilities recorded by an attention node, one
    /// `len × len` block per (segment, head) in segment-major order.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[T]> {
        match self.nodes[id.0].op {
            Op::Attention { .. } => Some(&self.nodes[id.0].aux),
            _ => None,
        }
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, NumericsError> {
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.cols());
        if labels.len() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NumericsError::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &mut probs[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
            total = total + (sum.ln() + max - row[label]);
            softmax_in_place(row);
        }
        let value = Array::scalar(total / T::of(rows.max(1) as f64));
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
            probs,
            rg,
        ))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(self.mismatch("mse", a, b));
        }
        let sum = av
            .data()
            .iter()
            .zip(bv.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let value = Array::scalar(sum / T::of(av.len().max(1) as f64));
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mse(a, b), value, Vec::new(), rg))
    }

    /// Propagates d(root)/d(node) to every node that depends on a leaf.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, NumericsError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(NumericsError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array::filled(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &gout, &mut grads);
        }
        // Interior gradients were consumed above; only leaves keep theirs.
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, gout: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    // dA = dC B^T
                    let ga = slot(grads, *a, av.shape());
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gout.data(),
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga.data_mut(),
                        k as isize,
                        1,
                    );
                }
                if wants(*b) {
                    // dB = A^T dC
                    let gb = slot(grads, *b, bv.shape());
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        1,
                        k as isize,
                        gout.data(),
                        n as isize,
                        1,
                        T::one(),
                        gb.data_mut(),
                        n as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        slot(grads, id, gout.shape()).add_assign(gout);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for (id, other) in [(*a, bv), (*b, av)] {
                    if wants(id) {
                        let g = slot(grads, id, gout.shape());
                        for ((gv, &go), &o) in g.data_mut().iter_mut().zip(gout.data()).zip(other.data()) {
                            *gv = *gv + go * o;
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    slot(grads, *x, gout.shape()).add_assign(gout);
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, self.value(*bias).shape());
                    for r in 0..gout.rows() {
                        for (gv, &go) in gb.data_mut().iter_mut().zip(gout.row(r)) {
                            *gv = *gv + go;
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                if wants(*x) {
                    let f = T::of(*factor);
                    let g = slot(grads, *x, gout.shape());
                    for (gv, &go) in g.data_mut().iter_mut().zip(gout.data()) {
                        *gv = *gv + go * f;
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let (half, one, c, s) =
                        (T::of(0.5), T::one(), T::of(GELU_COEF), T::of(GELU_SCALE));
                    let three_c = T::of(3.0 * GELU_COEF);
                    let xv = self.value(*x);
                    let g = slot(grads, *x, gout.shape());
                    for ((gv, &go), &v) in g.data_mut().iter_mut().zip(gout.data()).zip(xv.data()) {
                        let t = (s * (v + c * v * v * v)).tanh();
                        let dt = s * (one + three_c * v * v);
                        let d = half * (one + t) + half * v * (one - t * t) * dt;
                        *gv = *gv + go * d;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = gout.cols();
                let rows = gout.rows();
                let (xhat, rstd) = node.aux.split_at(rows * d);
                if wants(*gain) {
                    let gg = slot(grads, *gain, self.value(*gain).shape());
                    for r in 0..rows {
                        for j in 0..d {
                            gg.data_mut()[j] = gg.data()[j] + gout.row(r)[j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, self.value(*bias).shape());
                    for r in 0..rows {
                        for (gv, &go) in gb.data_mut().iter_mut().zip(gout.row(r)) {
                            *gv = *gv + go;
                        }
                    }
                }
                if wants(*x) {
                    let g = self.value(*gain).data().to_vec();
                    let n = T::of(d as f64);
                    let gx = slot(grads, *x, gout.shape());
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let go = gout.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            dxhat[j] = go[j] * g[j];
                            mean_d = mean_d + dxhat[j];
                            mean_dx = mean_dx + dxhat[j] * xh[j];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        let out = gx.row_mut(r);
                        for j in 0..d {
                            out[j] = out[j] + rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { sources, index } => {
                for (si, &src) in sources.iter().enumerate() {
                    if !wants(src) {
                        continue;
                    }
                    let gs = slot(grads, src, self.value(src).shape());
                    for (r, &(s, row)) in index.iter().enumerate() {
                        if s == si {
                            for (gv, &go) in gs.row_mut(row).iter_mut().zip(gout.row(r)) {
                                *gv = *gv + go;
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if wants(*x) {
                    let y = &node.value;
                    let gx = slot(grads, *x, gout.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), gout.row(r));
                        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        for (j, gv) in gx.row_mut(r).iter_mut().enumerate() {
                            *gv = *gv + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
            } => self.attention_backward(node, gout, grads, [*q, *k, *v], layout, *heads),
            Op::CrossEntropy { logits, labels } => {
                if wants(*logits) {
                    let classes = self.value(*logits).cols();
                    let scale = gout.item() / T::of(labels.len().max(1) as f64);
                    let gl = slot(grads, *logits, self.value(*logits).shape());
                    for (r, &label) in labels.iter().enumerate() {
                        let p = &node.aux[r * classes..(r + 1) * classes];
                        let row = gl.row_mut(r);
                        for j in 0..classes {
                            let target = if j == label { T::one() } else { T::zero() };
                            row[j] = row[j] + (p[j] - target) * scale;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = T::of(2.0) * gout.item() / T::of(av.len().max(1) as f64);
                for (id, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if wants(id) {
                        let g = slot(grads, id, av.shape());
                        for ((gv, &x), &y) in g.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            *gv = *gv + sign * scale * (x - y);
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        node: &Node<T>,
        gout: &Array<T>,
        grads: &mut [Option<Array<T>>],
        [q, k, v]: [NodeId; 3],
        layout: &SeqLayout,
        heads: usize,
    ) {
        let shape = gout.shape().to_vec();
        let d = shape[1];
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = Array::zeros(&shape);
        let mut gk = Array::zeros(&shape);
        let mut gv = Array::zeros(&shape);
        let max_len = layout.segments().iter().map(|&(_, l)| l).max().unwrap_or(0);
        let mut dp = vec![T::zero(); max_len * max_len];
        let mut off = 0;
        for &(start, len) in layout.segments() {
            for h in 0..heads {
                let p = &node.aux[off..off + len * len];
                let base = start * d + h * hd;
                let dp = &mut dp[..len * len];
                // dP = dO V^T
                T::gemm(
                    len,
                    hd,
                    len,
                    T::one(),
                    &gout.data()[base..],
                    d as isize,
                    1,
                    &vv.data()[base..],
                    1,
                    d as isize,
                    T::zero(),
                    dp,
                    len as isize,
                    1,
                );
                // dV += P^T dO
                T::gemm(
                    len,
                    len,
                    hd,
                    T::one(),
                    p,
                    1,
                    len as isize,
                    &gout.data()[base..],
                    d as isize,
                    1,
                    T::one(),
                    &mut gv.data_mut()[base..],
                    d as isize,
                    1,
                );
                // dS = P * (dP - rowsum(P * dP)), kept in dp.
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for j in 0..len {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                // dQ += scale dS K ; dK += scale dS^T Q
                T::gemm(
                    len,
                    len,
                    hd,
                    scale,
                    dp,
                    len as isize,
                    1,
                    &kv.data()[base..],
                    d as isize,
                    1,
                    T::one(),
                    &mut gq.data_mut()[base..],
                    d as isize,
                    1,
                );
                T::gemm(
                    len,
                    len,
                    hd,
                    scale,
                    dp,
                    1,
                    len as isize,
                    &qv.data()[base..],
                    d as isize,
                    1,
                    T::one(),
                    &mut gk.data_mut()[base..],
                    d as isize,
                    1,
                );
                off += len * len;
            }
        }
        for (id, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[id.0].requires_grad {
                slot(grads, id, &shape).add_assign(&g);
            }
        }
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Array<T>>],
    id: NodeId,
    shape: &[usize],
) -> &'a mut Array<T> {
    grads[id.0].get_or_insert_with(|| Array::zeros(shape))
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `id`; `None` when no path
    /// connects them.
    pub fn get(&self, id: NodeId) -> Option<&Array<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but returns zeros shaped like the node's
    /// value when the node does not influence the root.
    pub fn wrt(&self, graph: &Graph<T>, id: NodeId) -> Array<T> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Array::zeros(graph.value(id).shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Array<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
