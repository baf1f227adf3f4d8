use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;

use super::{gemm_into, log_sum_exp, softmax_row, Array, Float};
use crate::error::{NppError, Result};

/// Recorded operation. Inputs refer to earlier node ids, so insertion order
/// is a topological order and the backward sweep is a reverse scan.
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Transpose(usize),
    Reshape(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<T>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        inv_std: Vec<T>,
    },
    Silu(usize),
    Dropout {
        a: usize,
        mask: Vec<T>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    Sum(usize),
    Softmax(usize),
    CausalMask(usize, usize),
    Rope {
        a: usize,
        cos: Rc<Vec<T>>,
        sin: Rc<Vec<T>>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    PatchCrossEntropy {
        logits: usize,
        groups: Vec<usize>,
        group_size: usize,
        token_count: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation record. One graph per forward pass; drop it after
/// `backward` and reading gradients.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Array<T>>>>,
}

/// Handle to a node in a [`Graph`].
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input; gradients are not tracked through it.
    pub fn constant(&self, value: Array<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; `backward` populates its gradient.
    pub fn param(&self, value: Array<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf sharing an existing buffer, e.g. model weights.
    pub fn shared(&self, value: Arc<Array<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Array<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Array<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracks(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn push_op(&self, value: Array<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let rg = self.tracks(inputs);
        self.push(value, op, rg)
    }

    /// Gradient of the last `backward` loss with respect to `var`.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Array<T>> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    pub fn take_grad(&self, var: Var<'_, T>) -> Option<Array<T>> {
        self.grads.borrow_mut().get_mut(var.id).and_then(Option::take)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(NppError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Array<T>>], id: usize, delta: Array<T>) {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop<T: Float>(nodes: &[Node<T>], node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
    let wants = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| nodes[id].value.as_ref();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_a, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                let mut da = Array::zeros(av.shape());
                if *trans_a {
                    gemm_into(da.data_mut(), bv, *trans_b, g, true, false);
                } else {
                    gemm_into(da.data_mut(), g, false, bv, !*trans_b, false);
                }
                accumulate(grads, *a, da);
            }
            if wants(*b) {
                let mut db = Array::zeros(bv.shape());
                if *trans_b {
                    gemm_into(db.data_mut(), g, true, av, *trans_a, false);
                } else {
                    gemm_into(db.data_mut(), av, !*trans_a, g, false, false);
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, g.clone());
            }
            if wants(*b) {
                let neg = Array::from_fn(g.shape(), |i| -g.data()[i]);
                accumulate(grads, *b, neg);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                let d = Array::from_fn(g.shape(), |i| g.data()[i] * bv.data()[i]);
                accumulate(grads, *a, d);
            }
            if wants(*b) {
                let d = Array::from_fn(g.shape(), |i| g.data()[i] * av.data()[i]);
                accumulate(grads, *b, d);
            }
        }
        Op::Scale(a, s) => {
            let d = Array::from_fn(g.shape(), |i| g.data()[i] * *s);
            accumulate(grads, *a, d);
        }
        Op::Transpose(a) => {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            let d = Array::from_fn(&[c, r], |i| g.data()[(i % r) * c + i / r]);
            accumulate(grads, *a, d);
        }
        Op::Reshape(a) => {
            let d = g.clone().reshaped(val(*a).shape().to_vec()).expect("same size");
            accumulate(grads, *a, d);
        }
        Op::Gather { table, ids } => {
            let tv = val(*table);
            let mut d = Array::zeros(tv.shape());
            for (r, &id) in ids.iter().enumerate() {
                for (dst, &src) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                    *dst += src;
                }
            }
            accumulate(grads, *table, d);
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let (xv, gv) = (val(*x), val(*gain));
            let c = xv.last_dim();
            let cf = T::from_usize(c).unwrap();
            let mut dx = Array::zeros(xv.shape());
            let mut dgain = Array::zeros(gv.shape());
            for r in 0..xv.rows() {
                let (xr, gr, ir) = (xv.row(r), g.row(r), inv_rms[r]);
                let mut dot = T::zero();
                for j in 0..c {
                    let xhat = xr[j] * ir;
                    dgain.data_mut()[j] += gr[j] * xhat;
                    dot += gr[j] * gv.data()[j] * xhat;
                }
                let mean = dot / cf;
                let dr = dx.row_mut(r);
                for j in 0..c {
                    let xhat = xr[j] * ir;
                    dr[j] = ir * (gr[j] * gv.data()[j] - xhat * mean);
                }
            }
            if wants(*x) {
                accumulate(grads, *x, dx);
            }
            if wants(*gain) {
                accumulate(grads, *gain, dgain);
            }
        }
        Op::LayerNorm { x, gain, bias, inv_std } => {
            let (xv, gv) = (val(*x), val(*gain));
            let c = xv.last_dim();
            let cf = T::from_usize(c).unwrap();
            let mut dx = Array::zeros(xv.shape());
            let mut dgain = Array::zeros(gv.shape());
            let mut dbias = Array::zeros(gv.shape());
            for r in 0..xv.rows() {
                let (xr, gr, is) = (xv.row(r), g.row(r), inv_std[r]);
                let mu = xr.iter().copied().sum::<T>() / cf;
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for j in 0..c {
                    let xhat = (xr[j] - mu) * is;
                    let dyg = gr[j] * gv.data()[j];
                    dgain.data_mut()[j] += gr[j] * xhat;
                    dbias.data_mut()[j] += gr[j];
                    s1 += dyg;
                    s2 += dyg * xhat;
                }
                let (m1, m2) = (s1 / cf, s2 / cf);
                let dr = dx.row_mut(r);
                for j in 0..c {
                    let xhat = (xr[j] - mu) * is;
                    dr[j] = is * (gr[j] * gv.data()[j] - m1 - xhat * m2);
                }
            }
            if wants(*x) {
                accumulate(grads, *x, dx);
            }
            if wants(*gain) {
                accumulate(grads, *gain, dgain);
            }
            if wants(*bias) {
                accumulate(grads, *bias, dbias);
            }
        }
        Op::Silu(a) => {
            let av = val(*a);
            let d = Array::from_fn(g.shape(), |i| {
                let x = av.data()[i];
                let s = T::one() / (T::one() + (-x).exp());
                g.data()[i] * s * (T::one() + x * (T::one() - s))
            });
            accumulate(grads, *a, d);
        }
        Op::Dropout { a, mask } => {
            let d = Array::from_fn(g.shape(), |i| g.data()[i] * mask[i]);
            accumulate(grads, *a, d);
        }
        Op::Concat { parts, axis } => {
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let (pr, pc) = (pv.shape()[0], pv.shape()[1]);
                if wants(p) {
                    let d = if *axis == 0 {
                        let c = g.shape()[1];
                        Array::new(vec![pr, pc], g.data()[offset * c..(offset + pr) * c].to_vec()).expect("sized")
                    } else {
                        let gc = g.shape()[1];
                        Array::from_fn(&[pr, pc], |i| g.data()[(i / pc) * gc + offset + i % pc])
                    };
                    accumulate(grads, p, d);
                }
                offset += if *axis == 0 { pr } else { pc };
            }
        }
        Op::Slice { a, rows, cols } => {
            let av = val(*a);
            let ac = av.shape()[1];
            let mut d = Array::zeros(av.shape());
            let w = cols.len();
            for (i, r) in rows.clone().enumerate() {
                d.data_mut()[r * ac + cols.start..r * ac + cols.end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            accumulate(grads, *a, d);
        }
        Op::MeanAxis { a, axis } => {
            let av = val(*a);
            let (_, n, inner) = axis_split(av.shape(), *axis);
            let inv = T::one() / T::from_usize(n).unwrap();
            let d = Array::from_fn(av.shape(), |i| {
                let o = i / (n * inner);
                let r = i % inner;
                g.data()[o * inner + r] * inv
            });
            accumulate(grads, *a, d);
        }
        Op::Sum(a) => {
            let av = val(*a);
            accumulate(grads, *a, Array::full(av.shape(), g.item()));
        }
        Op::Softmax(a) => {
            let y = node.value.as_ref();
            let c = y.last_dim();
            let mut d = Array::zeros(y.shape());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                let dr = d.row_mut(r);
                for j in 0..c {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, *a, d);
        }
        Op::CausalMask(a, offset) => {
            let c = g.shape()[1];
            let d = Array::from_fn(
                g.shape(),
                |i| {
                    if i % c > i / c + offset {
                        T::zero()
                    } else {
                        g.data()[i]
                    }
                },
            );
            accumulate(grads, *a, d);
        }
        Op::Rope { a, cos, sin } => {
            let c = g.shape()[1];
            let mut d = Array::zeros(g.shape());
            let half = c / 2;
            for r in 0..g.shape()[0] {
                let (gr, dr) = (g.row(r), d.row_mut(r));
                for p in 0..half {
                    let (co, si) = (cos[r * half + p], sin[r * half + p]);
                    let (g0, g1) = (gr[2 * p], gr[2 * p + 1]);
                    dr[2 * p] = g0 * co + g1 * si;
                    dr[2 * p + 1] = g1 * co - g0 * si;
                }
            }
            accumulate(grads, *a, d);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let v = val(*logits).last_dim();
            let scale = g.item() / T::from_usize(labels.len()).unwrap();
            let mut d = Array::from_fn(val(*logits).shape(), |i| probs[i]);
            for (r, &label) in labels.iter().enumerate() {
                let row = &mut d.data_mut()[r * v..(r + 1) * v];
                row[label] -= T::one();
                row.iter_mut().for_each(|x| *x *= scale);
            }
            accumulate(grads, *logits, d);
        }
        Op::PatchCrossEntropy {
            logits,
            groups,
            group_size,
            token_count,
            probs,
        } => {
            let v = val(*logits).last_dim();
            let k = T::from_usize(*group_size).unwrap();
            let scale = g.item() / T::from_usize(*token_count).unwrap();
            let mut d = Array::from_fn(val(*logits).shape(), |i| probs[i] * k);
            for (r, group) in groups.chunks(*group_size).enumerate() {
                let row = &mut d.data_mut()[r * v..(r + 1) * v];
                for &label in group {
                    row[label] -= T::one();
                }
                row.iter_mut().for_each(|x| *x *= scale);
            }
            accumulate(grads, *logits, d);
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_same_shape<T: Float>(op: &str, a: &Array<T>, b: &Array<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NppError::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'g, T: Float> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Array<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, value: Array<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push_op(value, op, &[self.id])
    }

    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) * op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, other: Var<'g, T>, trans_a: bool, trans_b: bool) -> Result<Var<'g, T>> {
        let out = super::matmul_arrays(&self.value(), trans_a, &other.value(), trans_b)?;
        Ok(self.graph.push_op(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_a,
                trans_b,
            },
            &[self.id, other.id],
        ))
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("add", &a, &b)?;
        let out = Array::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);
        Ok(self
            .graph
            .push_op(out, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("sub", &a, &b)?;
        let out = Array::from_fn(a.shape(), |i| a.data()[i] - b.data()[i]);
        Ok(self
            .graph
            .push_op(out, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same_shape("mul", &a, &b)?;
        let out = Array::from_fn(a.shape(), |i| a.data()[i] * b.data()[i]);
        Ok(self
            .graph
            .push_op(out, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        let a = self.value();
        let out = Array::from_fn(a.shape(), |i| a.data()[i] * s);
        self.unary(out, Op::Scale(self.id, s))
    }

    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        let out = Array::from_fn(&[c, r], |i| a.data()[(i % r) * c + i / r]);
        Ok(self.unary(out, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().as_ref().clone().reshaped(shape.to_vec())?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    /// Row lookup into a 2D table: output row `i` is `table[ids[i]]`.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Var<'g, T>> {
        let table = self.value();
        let (rows, cols) = table.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(NppError::Index(format!("row {id} out of range for {rows}-row table")));
            }
            data.extend_from_slice(table.row(id));
        }
        let out = Array::new(vec![ids.len(), cols], data)?;
        Ok(self.unary(
            out,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Same as [`Var::embedding_lookup`]; named for non-embedding uses.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g, T>> {
        self.embedding_lookup(ids)
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` along the last axis.
    pub fn layer_norm_rms(&self, gain: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let (x, gv) = (self.value(), gain.value());
        let c = x.last_dim();
        if gv.shape() != [c] {
            return Err(NppError::Dimension(format!(
                "rms norm gain {:?} vs width {c}",
                gv.shape()
            )));
        }
        let cf = T::from_usize(c).unwrap();
        let mut out = Array::zeros(x.shape());
        let mut inv_rms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let ms = xr.iter().fold(T::zero(), |acc, &v| acc + v * v) / cf;
            let ir = T::one() / (ms + eps).sqrt();
            inv_rms.push(ir);
            for ((o, &v), &gj) in out.row_mut(r).iter_mut().zip(xr).zip(gv.data()) {
                *o = v * ir * gj;
            }
        }
        Ok(self.graph.push_op(
            out,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms,
            },
            &[self.id, gain.id],
        ))
    }

    /// Standard layer norm with gain and bias along the last axis.
    pub fn layer_norm(&self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let c = x.last_dim();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(NppError::Dimension(format!("layer norm params vs width {c}")));
        }
        let cf = T::from_usize(c).unwrap();
        let mut out = Array::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let mu = xr.iter().copied().sum::<T>() / cf;
            let var = xr.iter().fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (xr[j] - mu) * is * gv.data()[j] + bv.data()[j];
            }
        }
        Ok(self.graph.push_op(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    pub fn silu(&self) -> Var<'g, T> {
        let a = self.value();
        let out = Array::from_fn(a.shape(), |i| {
            let x = a.data()[i];
            x / (T::one() + (-x).exp())
        });
        self.unary(out, Op::Silu(self.id))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`. Rate 0 returns
    /// `self` unchanged and draws nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Result<Var<'g, T>> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(NppError::Config(format!("dropout rate {rate} outside [0, 1]")));
        }
        if rate == 0.0 {
            return Ok(*self);
        }
        let a = self.value();
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..a.len())
            .map(|_| {
                if rate >= 1.0 || rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = Array::from_fn(a.shape(), |i| a.data()[i] * mask[i]);
        Ok(self.unary(out, Op::Dropout { a: self.id, mask }))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let a = self.value();
        let s = a.data().iter().copied().fold(T::zero(), |acc, x| acc + x);
        self.unary(Array::scalar(s), Op::Sum(self.id))
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_over_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(NppError::Dimension(format!(
                "axis {axis} out of range for {:?}",
                a.shape()
            )));
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        if n == 0 {
            return Err(NppError::Dimension("mean over an empty axis".into()));
        }
        let nf = T::from_usize(n).unwrap();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for r in 0..inner {
                let base = o * n * inner + r;
                // Seeded with the first element so a length-1 axis is exact.
                let mut acc = a.data()[base];
                for k in 1..n {
                    acc += a.data()[base + k * inner];
                }
                data.push(acc / nf);
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let out = Array::new(shape, data)?;
        Ok(self.unary(out, Op::MeanAxis { a: self.id, axis }))
    }

    pub fn softmax(&self) -> Result<Var<'g, T>> {
        let out = super::softmax_array(&self.value())?;
        Ok(self.unary(out, Op::Softmax(self.id)))
    }

    /// Sets entry `(i, j)` to `-inf` when `j > i + offset`.
    pub fn causal_mask(&self, offset: usize) -> Result<Var<'g, T>> {
        let a = self.value();
        let (_, c) = a.dims2()?;
        let out = Array::from_fn(a.shape(), |i| {
            if i % c > i / c + offset {
                T::neg_infinity()
            } else {
                a.data()[i]
            }
        });
        Ok(self.unary(out, Op::CausalMask(self.id, offset)))
    }

    /// Rotates adjacent pairs `(2p, 2p+1)` of every row by per-row angles:
    /// `cos`/`sin` hold `rows * cols/2` entries.
    pub fn rotate_pairs(&self, cos: Rc<Vec<T>>, sin: Rc<Vec<T>>) -> Result<Var<'g, T>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        if c % 2 != 0 || cos.len() != r * c / 2 || sin.len() != cos.len() {
            return Err(NppError::Dimension(format!(
                "rotation tables of length {} do not fit a {r}x{c} input",
                cos.len()
            )));
        }
        let half = c / 2;
        let mut out = Array::zeros(a.shape());
        for i in 0..r {
            let (xr, or) = (a.row(i), out.row_mut(i));
            for p in 0..half {
                let (co, si) = (cos[i * half + p], sin[i * half + p]);
                let (x0, x1) = (xr[2 * p], xr[2 * p + 1]);
                or[2 * p] = x0 * co - x1 * si;
                or[2 * p + 1] = x0 * si + x1 * co;
            }
        }
        Ok(self.unary(out, Op::Rope { a: self.id, cos, sin }))
    }

    /// Concatenates 2D arrays along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| NppError::Dimension("concat of zero arrays".into()))?;
        if axis > 1 {
            return Err(NppError::Dimension(format!("concat axis {axis} on 2D arrays")));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let dims: Vec<(usize, usize)> = values.iter().map(|v| v.dims2()).collect::<Result<_>>()?;
        let keep = if axis == 0 { dims[0].1 } else { dims[0].0 };
        if dims.iter().any(|d| (if axis == 0 { d.1 } else { d.0 }) != keep) {
            return Err(NppError::Dimension(format!("concat along {axis}: mismatched {dims:?}")));
        }
        let out = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let data = values.iter().flat_map(|v| v.data().iter().copied()).collect();
            Array::new(vec![rows, keep], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(keep * cols);
            for r in 0..keep {
                for v in &values {
                    data.extend_from_slice(v.row(r));
                }
            }
            Array::new(vec![keep, cols], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.graph.push_op(
            out,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// 2D sub-block `[rows, cols]`.
    pub fn slice(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Var<'g, T>> {
        let a = self.value();
        let (r, c) = a.dims2()?;
        if rows.end > r || cols.end > c || rows.start > rows.end || cols.start > cols.end {
            return Err(NppError::Dimension(format!(
                "slice [{rows:?}, {cols:?}] out of bounds for {r}x{c}"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&a.row(i)[cols.clone()]);
        }
        let out = Array::new(vec![rows.len(), cols.len()], data)?;
        Ok(self.unary(out, Op::Slice { a: self.id, rows, cols }))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'g, T>> {
        let logits = self.value();
        let (m, v) = logits.dims2()?;
        if labels.len() != m || m == 0 {
            return Err(NppError::Dimension(format!(
                "{} labels for {m} logit rows",
                labels.len()
            )));
        }
        check_labels(labels, v)?;
        let mut probs = vec![T::zero(); m * v];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let lse = row_softmax_lse(row, &mut probs[r * v..(r + 1) * v]);
            total += lse - row[label];
        }
        let loss = total / T::from_usize(m).unwrap();
        Ok(self.unary(
            Array::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `-(1/token_count) * sum_i sum_k log softmax(logits_i)[groups[i][k]]`,
    /// where `groups` is `rows * group_size` labels laid out group by group.
    pub fn patch_cross_entropy(&self, groups: &[usize], group_size: usize, token_count: usize) -> Result<Var<'g, T>> {
        let logits = self.value();
        let (m, v) = logits.dims2()?;
        if group_size == 0 || groups.len() != m * group_size {
            return Err(NppError::Contract(format!(
                "{} labels do not form {m} groups of {group_size}",
                groups.len()
            )));
        }
        if token_count == 0 {
            return Err(NppError::Contract("token count must be positive".into()));
        }
        check_labels(groups, v)?;
        let mut probs = vec![T::zero(); m * v];
        let mut total = T::zero();
        for (r, group) in groups.chunks(group_size).enumerate() {
            let row = logits.row(r);
            let lse = row_softmax_lse(row, &mut probs[r * v..(r + 1) * v]);
            for &label in group {
                total += lse - row[label];
            }
        }
        let loss = total / T::from_usize(token_count).unwrap();
        Ok(self.unary(
            Array::scalar(loss),
            Op::PatchCrossEntropy {
                logits: self.id,
                groups: groups.to_vec(),
                group_size,
                token_count,
                probs,
            },
        ))
    }
}

fn check_labels(labels: &[usize], vocab: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= vocab) {
        Some(l) => Err(NppError::Index(format!("label {l} out of range for vocab {vocab}"))),
        None => Ok(()),
    }
}

/// Writes `softmax(row)` into `probs` and returns `ln(sum(exp(row)))`.
fn row_softmax_lse<T: Float>(row: &[T], probs: &mut [T]) -> T {
    softmax_row(row, probs);
    log_sum_exp(row)
}
