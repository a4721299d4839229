//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already a topological order and [`Graph::backward`] only has to walk it
//! in reverse. Trainable weights live outside the graph as [`Param`]s; a graph
//! binds each param to a single leaf node, and `backward` adds that leaf's
//! gradient into the param's accumulator. Binding the same param at several
//! sites therefore sums the site contributions.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};
use crate::tensor::{strides, Element, Tensor};

/// Sentinel in gather indices producing a zero output element.
pub const GATHER_ZERO: usize = usize::MAX;

/// A trainable weight with its gradient accumulator.
///
/// Clones share storage; this is what makes two module instances "the same
/// weight".
#[derive(Clone, Debug)]
pub struct Param<T>(Arc<ParamCell<T>>);

#[derive(Debug)]
struct ParamCell<T> {
    value: RwLock<Arc<Tensor<T>>>,
    grad: Mutex<Tensor<T>>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param(Arc::new(ParamCell {
            value: RwLock::new(Arc::new(value)),
            grad: Mutex::new(grad),
        }))
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.0.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn set_value(&self, value: Tensor<T>) -> Result<()> {
        let mut slot = self.0.value.write().expect("param lock");
        if slot.shape() != value.shape() {
            return Err(Error::dim("param assign", slot.shape(), value.shape()));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self) -> Tensor<T> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        let mut g = self.0.grad.lock().expect("grad lock");
        g.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }

    fn accumulate(&self, delta: &[T]) {
        let mut g = self.0.grad.lock().expect("grad lock");
        for (a, &d) in g.data_mut().iter_mut().zip(delta) {
            *a = *a + d;
        }
    }

    /// In-place update of the value given the current gradient.
    pub fn update(&self, f: impl FnOnce(&mut [T], &[T])) {
        let grad = self.0.grad.lock().expect("grad lock");
        let mut slot = self.0.value.write().expect("param lock");
        f(Arc::make_mut(&mut slot).data_mut(), grad.data());
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn addr(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    /// Dropout active, driven by a counter-based generator seeded here.
    Train { seed: u64 },
}

/// Attention-score bookkeeping: which score tensors were produced and which
/// were consumed by score-reusing attention modules.
#[derive(Clone, Debug, Default)]
pub struct ScoreLog {
    pub produced: Vec<Var>,
    pub consumed: Vec<Var>,
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T> {
    Leaf,
    Param(Param<T>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulConst(Var, Arc<Vec<T>>),
    MatMul {
        a: Var,
        b: Var,
        a_batch: Vec<usize>,
        b_batch: Vec<usize>,
        m: usize,
        k: usize,
        n: usize,
    },
    Gather(Var, Arc<Vec<usize>>),
    Reshape(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        count: usize,
    },
}

/// The computation tape.
pub struct Graph<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Arc<Tensor<T>>>>>,
    bound: RefCell<HashMap<usize, Var>>,
    mode: Mode,
    dropout_counter: Cell<u64>,
    scores: RefCell<ScoreLog>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self::with_mode(Mode::Eval)
    }

    pub fn with_mode(mode: Mode) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            mode,
            dropout_counter: Cell::new(0),
            scores: RefCell::new(ScoreLog::default()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Arc<Tensor<T>>> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a param; repeated binds of the same storage return the same leaf.
    pub fn param(&self, p: &Param<T>) -> Var {
        if let Some(&v) = self.bound.borrow().get(&p.addr()) {
            return v;
        }
        let v = self.push_arc(p.value(), Op::Param(p.clone()), true);
        self.bound.borrow_mut().insert(p.addr(), v);
        v
    }

    pub fn log_scores_produced(&self, v: Var) {
        self.scores.borrow_mut().produced.push(v);
    }

    pub fn log_scores_consumed(&self, v: Var) {
        self.scores.borrow_mut().consumed.push(v);
    }

    pub fn score_log(&self) -> ScoreLog {
        self.scores.borrow().clone()
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((Tensor::new(av.shape(), data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `x + b` where `b`'s shape is the trailing part of `x`'s shape.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (xs, bs) = (xv.shape(), bv.shape());
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::dim("add_bias", xs, bs));
        }
        let w = bv.numel();
        let data = xv
            .data()
            .chunks(w)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&a, &c)| a + c))
            .collect();
        let t = Tensor::new(xs, data)?;
        Ok(self.push(t, Op::AddBias(x, b), self.rg(x) || self.rg(b)))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), self.rg(x))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(Error::dim("mul_const", xv.shape(), mask.shape()));
        }
        let data = xv.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(xv.shape(), data)?;
        let mask = Arc::new(mask.data().to_vec());
        Ok(self.push(t, Op::MulConst(x, mask), self.rg(x)))
    }

    /// Batched matrix product over the last two dims. Leading dims broadcast
    /// when equal or 1; a missing leading dim counts as 1.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        let err = || Error::dim("matmul", ash, bsh);
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(err());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let ab = &ash[..ash.len() - 2];
        let bb = &bsh[..bsh.len() - 2];
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut out_batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(err());
            }
            out_batch.push(x.max(y));
        }
        let nb: usize = out_batch.iter().product();
        let (sa, sb) = (strides(&pa), strides(&pb));
        let out_strides = strides(&out_batch);
        let mut a_batch = Vec::with_capacity(nb);
        let mut b_batch = Vec::with_capacity(nb);
        for bi in 0..nb {
            let (mut ia, mut ib) = (0, 0);
            for d in 0..rank {
                let c = (bi / out_strides[d]) % out_batch[d];
                if pa[d] != 1 {
                    ia += c * sa[d];
                }
                if pb[d] != 1 {
                    ib += c * sb[d];
                }
            }
            a_batch.push(ia);
            b_batch.push(ib);
        }
        let mut out = vec![T::zero(); nb * m * n];
        for bi in 0..nb {
            let ad = &av.data()[a_batch[bi] * m * k..][..m * k];
            let bd = &bv.data()[b_batch[bi] * k * n..][..k * n];
            let od = &mut out[bi * m * n..][..m * n];
            gemm(ad, bd, od, m, k, n);
        }
        let mut shape = out_batch;
        shape.extend_from_slice(&[m, n]);
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                a_batch,
                b_batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `out[i] = src[index[i]]`, or zero where the index is [`GATHER_ZERO`].
    pub fn gather(&self, src: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let n = sv.numel();
        if let Some(&bad) = index.iter().find(|&&i| i != GATHER_ZERO && i >= n) {
            return Err(Error::Index {
                what: "gather source",
                index: bad,
                size: n,
            });
        }
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { sv.data()[i] })
            .collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather(src, Arc::new(index)), self.rg(src)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.value(x)).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), self.rg(x)))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let sh = self.shape(x);
        let mut seen = vec![false; sh.len()];
        if axes.len() != sh.len() || axes.iter().any(|&a| a >= sh.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &sh, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sh[a]).collect();
        let in_strides = strides(&sh);
        let out_strides = strides(&out_shape);
        let n: usize = sh.iter().product();
        let index = (0..n)
            .map(|o| {
                axes.iter()
                    .enumerate()
                    .map(|(d, &a)| ((o / out_strides[d]) % out_shape[d]) * in_strides[a])
                    .sum()
            })
            .collect();
        self.gather(x, index, &out_shape)
    }

    /// Swaps the last two dims.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", &self.shape(x), &[2]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let sh = self.shape(table);
        if sh.len() != 2 {
            return Err(Error::dim("embedding", &sh, &[0, 0]));
        }
        let (v, d) = (sh[0], sh[1]);
        let mut index = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    size: v,
                });
            }
            index.extend(id * d..(id + 1) * d);
        }
        self.gather(table, index, &[ids.len(), d])
    }

    pub fn relu(&self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x), self.rg(x))
    }

    /// Softmax over the last dim, with max subtraction.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(Error::Numeric("softmax input"));
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            softmax_row(row, &mut data);
        }
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::Softmax(x), self.rg(x)))
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().unwrap();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let dn = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.numel() / d);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[i] + bv.data()[i]);
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::contract(format!("dropout probability {p} not in [0,1)")));
        }
        let seed = match self.mode {
            Mode::Train { seed } if p > 0.0 => seed,
            _ => return Ok(x),
        };
        let xv = self.value(x);
        let keep = T::of(1.0 / (1.0 - p));
        let start = self.dropout_counter.get();
        self.dropout_counter.set(start + xv.numel() as u64);
        let mask = Tensor::from_fn(xv.shape(), |i| {
            if unit_hash(seed, start + i as u64) < p {
                T::zero()
            } else {
                keep
            }
        });
        self.mul_const(x, &mask)
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Label-smoothed cross entropy over `[T, V]` logits.
    ///
    /// Each non-pad target gets mass `1 - smoothing`, the remaining
    /// `smoothing` is spread evenly over the other `V - 1` classes, and the
    /// loss is the KL divergence from that distribution to the model's,
    /// averaged over non-pad positions. All-pad input yields zero.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad_id: usize,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let sh = lv.shape();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(Error::dim("cross_entropy", sh, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::contract(format!("smoothing {smoothing} not in [0,1)")));
        }
        let v = sh[1];
        if v < 2 && smoothing > 0.0 {
            return Err(Error::contract("label smoothing needs at least two classes"));
        }
        let mut probs = Vec::with_capacity(lv.numel());
        let mut tg = Vec::with_capacity(targets.len());
        let mut total = 0.0f64;
        let mut count = 0;
        for (row, &t) in lv.rows().zip(targets) {
            let start = probs.len();
            softmax_row(row, &mut probs);
            if t == pad_id {
                tg.push(None);
                continue;
            }
            if t >= v {
                return Err(Error::Index {
                    what: "target class",
                    index: t,
                    size: v,
                });
            }
            tg.push(Some(t));
            count += 1;
            let lse = log_sum_exp(row);
            for (j, &z) in row.iter().enumerate() {
                let q = smoothed_target(j, t, v, smoothing);
                if q > 0.0 {
                    let logp = z.as_f64() - lse;
                    total += q * (q.ln() - logp);
                }
            }
            debug_assert_eq!(probs.len() - start, v);
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::CrossEntropy {
                logits,
                probs,
                targets: tg,
                smoothing,
                count,
            },
            self.rg(logits),
        ))
    }

    /// Populates gradients for every node reachable from `loss`, and adds
    /// bound params' gradients into their accumulators.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            if let Op::Param(p) = &node.op {
                p.accumulate(&g);
            }
            grads[id] = Some(g);
        }
        let out = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Arc::new(Tensor::new(n.value.shape(), g).expect("grad shape"))))
            .collect();
        *self.grads.borrow_mut() = out;
        Ok(())
    }
}

fn slot<'a, T: Element>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn propagate<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) => {
            for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                if let Some(s) = slot(grads, nodes, v) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + sign * g);
                }
            }
        }
        Op::Sub(a, b) => {
            for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                if let Some(s) = slot(grads, nodes, v) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + sign * g);
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if let Some(s) = slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    s[i] = s[i] + g[i] * bv.data()[i];
                }
            }
            if let Some(s) = slot(grads, nodes, *b) {
                for i in 0..g.len() {
                    s[i] = s[i] + g[i] * av.data()[i];
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(s) = slot(grads, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
            }
            if let Some(s) = slot(grads, nodes, *b) {
                let w = s.len();
                for row in g.chunks(w) {
                    s.iter_mut().zip(row).for_each(|(s, &g)| *s = *s + g);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(s) = slot(grads, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g * *c);
            }
        }
        Op::MulConst(x, mask) => {
            if let Some(s) = slot(grads, nodes, *x) {
                for i in 0..g.len() {
                    s[i] = s[i] + g[i] * mask[i];
                }
            }
        }
        Op::MatMul {
            a,
            b,
            a_batch,
            b_batch,
            m,
            k,
            n,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if let Some(s) = slot(grads, nodes, *a) {
                for (bi, (&ia, &ib)) in a_batch.iter().zip(b_batch).enumerate() {
                    let gd = &g[bi * m * n..][..m * n];
                    let bd = &bv.data()[ib * k * n..][..k * n];
                    let sd = &mut s[ia * m * k..][..m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..][..n];
                        for p in 0..k {
                            let brow = &bd[p * n..][..n];
                            let dot = grow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                            sd[i * k + p] = sd[i * k + p] + dot;
                        }
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *b) {
                for (bi, (&ia, &ib)) in a_batch.iter().zip(b_batch).enumerate() {
                    let gd = &g[bi * m * n..][..m * n];
                    let ad = &av.data()[ia * m * k..][..m * k];
                    let sd = &mut s[ib * k * n..][..k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..][..n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == T::zero() {
                                continue;
                            }
                            let srow = &mut sd[p * n..][..n];
                            srow.iter_mut().zip(grow).for_each(|(s, &g)| *s = *s + aip * g);
                        }
                    }
                }
            }
        }
        Op::Gather(src, index) => {
            if let Some(s) = slot(grads, nodes, *src) {
                for (&i, &gv) in index.iter().zip(g) {
                    if i != GATHER_ZERO {
                        s[i] = s[i] + gv;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(s) = slot(grads, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
            }
        }
        Op::Relu(x) => {
            let xv = val(*x).clone();
            if let Some(s) = slot(grads, nodes, *x) {
                for i in 0..g.len() {
                    if xv.data()[i] > T::zero() {
                        s[i] = s[i] + g[i];
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = node.value.clone();
            if let Some(s) = slot(grads, nodes, *x) {
                let w = *y.shape().last().unwrap();
                for ((yr, gr), sr) in y.data().chunks(w).zip(g.chunks(w)).zip(s.chunks_mut(w)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for i in 0..w {
                        sr[i] = sr[i] + yr[i] * (gr[i] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma).clone();
            let d = gv.numel();
            let dn = T::of(d as f64);
            if let Some(s) = slot(grads, nodes, *gamma) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for i in 0..d {
                        s[i] = s[i] + gr[i] * hr[i];
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *beta) {
                for gr in g.chunks(d) {
                    for i in 0..d {
                        s[i] = s[i] + gr[i];
                    }
                }
            }
            if let Some(s) = slot(grads, nodes, *x) {
                for (r, ((gr, hr), sr)) in g.chunks(d).zip(xhat.chunks(d)).zip(s.chunks_mut(d)).enumerate() {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for i in 0..d {
                        let dh = gr[i] * gv.data()[i];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[i];
                    }
                    let c = inv_std[r] / dn;
                    for i in 0..d {
                        let dh = gr[i] * gv.data()[i];
                        sr[i] = sr[i] + c * (dn * dh - sum_dh - hr[i] * sum_dh_h);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(s) = slot(grads, nodes, *x) {
                s.iter_mut().for_each(|s| *s = *s + g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            smoothing,
            count,
        } => {
            if *count == 0 {
                return;
            }
            if let Some(s) = slot(grads, nodes, *logits) {
                let v = probs.len() / targets.len();
                let scale = g[0] / T::of(*count as f64);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        let q = T::of(smoothed_target(j, t, v, *smoothing));
                        s[r * v + j] = s[r * v + j] + scale * (probs[r * v + j] - q);
                    }
                }
            }
        }
    }
}

fn gemm<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..][..n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..][..n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c = *c + aip * b);
        }
    }
}

fn softmax_row<T: Element>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let start = out.len();
    let mut z = T::zero();
    for &v in row {
        let e = (v - max).exp();
        z = z + e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e = *e / z);
}

fn log_sum_exp<T: Element>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}

fn smoothed_target(j: usize, target: usize, classes: usize, smoothing: f64) -> f64 {
    if j == target {
        1.0 - smoothing
    } else if classes > 1 {
        smoothing / (classes - 1) as f64
    } else {
        0.0
    }
}

/// Uniform in [0, 1) from a seed and a counter (splitmix64 finalizer).
pub fn unit_hash(seed: u64, counter: u64) -> f64 {
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Worst coordinate found by a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub checked: usize,
}

/// Magnitude below which gradients are compared absolutely: central
/// differences on an O(1) loss cannot resolve values much smaller than
/// this, so a gradient that is exactly zero (a key bias under softmax) would
/// otherwise register as a large relative error.
pub const REL_ERR_FLOOR: f64 = 1e-7;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of `f` at `x` against central differences and
/// returns the worst relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.variable(x.clone());
    let loss = f(&g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let v = g.variable(t);
        let l = f(&g, v)?;
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check over the entries of `params`, with the loss built
/// by `f` on a fresh graph each evaluation. `max_coords` caps how many
/// evenly-strided coordinates of each param are probed.
pub fn grad_check_params<F>(
    f: F,
    params: &[Param<f64>],
    h: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>) -> Result<Var>,
{
    for p in params {
        p.zero_grad();
    }
    let g = Graph::new();
    let loss = f(&g)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = params.iter().map(Param::grad).collect();
    let eval = || -> Result<f64> {
        let g = Graph::new();
        let l = f(&g)?;
        g.value(l).item()
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let base = (*p.value()).clone();
        let n = base.numel();
        let stride = max_coords.map_or(1, |c| n.div_ceil(c.max(1)));
        for i in (0..n).step_by(stride) {
            let mut plus = base.clone();
            plus.data_mut()[i] += h;
            p.set_value(plus)?;
            let fp = eval()?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= h;
            p.set_value(minus)?;
            let fm = eval()?;
            let numeric = (fp - fm) / (2.0 * h);
            let err = rel_err(analytic[pi].data()[i], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = pi;
                report.worst_coord = i;
            }
            report.checked += 1;
        }
        p.set_value(base)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let g = Graph::<f64>::new();
        let i = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let a = g.constant(t(&[1, 1], &[2.]));
        let b = g.constant(t(&[1, 1], &[3.]));
        assert_eq!(g.value(g.matmul(a, b).unwrap()).data(), &[6.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (a, b) = (random(&[4, 3], 1), random(&[3, 5], 2));
        let g = Graph::<f64>::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.value(g.matmul(av, bv).unwrap());
        assert!(c.max_abs_diff(&naive_matmul(&a, &b)).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_broadcasts_leading_dims() {
        let a = random(&[3, 2, 4], 3);
        let b = random(&[4, 5], 4);
        let g = Graph::<f64>::new();
        let c = g.value(g.matmul(g.constant(a.clone()), g.constant(b.clone())).unwrap());
        assert_eq!(c.shape(), &[3, 2, 5]);
        for bi in 0..3 {
            let slice = Tensor::new(&[2, 4], a.data()[bi * 8..][..8].to_vec()).unwrap();
            let want = naive_matmul(&slice, &b);
            assert_eq!(&c.data()[bi * 10..][..10], want.data());
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::<f64>::new();
        let s = |v: &[f64]| g.value(g.softmax(g.constant(t(&[v.len()], v))).unwrap()).data().to_vec();
        assert_eq!(s(&[0., 0.]), vec![0.5, 0.5]);
        let r = s(&[0., 3f64.ln()]);
        assert_abs_diff_eq!(r[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 0.75, epsilon = 1e-12);
        assert_eq!(s(&[1000., 1000.]), vec![0.5, 0.5]);
        assert!(matches!(
            g.softmax(g.constant(t(&[2], &[f64::NAN, 0.]))),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::<f64>::new();
        let ln = |x: &[f64], eps: f64| {
            let d = x.len();
            let y = g
                .layer_norm(
                    g.constant(t(&[d], x)),
                    g.constant(Tensor::ones(&[d])),
                    g.constant(Tensor::zeros(&[d])),
                    eps,
                )
                .unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(ln(&[1., 1., 1.], 1e-12), vec![0., 0., 0.]);
        let r = ln(&[-1., 1.], 1e-300);
        assert_abs_diff_eq!(r[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 1.0, epsilon = 1e-12);

        let x = random(&[16], 9);
        let y = ln(x.data(), 1e-12);
        let mean = y.iter().sum::<f64>() / 16.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);

        let bad = g.layer_norm(
            g.constant(Tensor::zeros(&[2, 3])),
            g.constant(Tensor::ones(&[2])),
            g.constant(Tensor::zeros(&[2])),
            1e-5,
        );
        assert!(matches!(bad, Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_examples() {
        let g = Graph::<f64>::new();
        let y = g.relu(g.constant(t(&[3], &[-1., 0., 2.])));
        assert_eq!(g.value(y).data(), &[0., 0., 2.]);
        let y = g.relu(g.constant(t(&[2], &[-3., -0.5])));
        assert_eq!(g.value(y).data(), &[0., 0.]);

        let x = g.variable(t(&[2], &[-1., 2.]));
        let l = g.sum(g.relu(x));
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 1.]);

        let g = Graph::<f64>::new();
        let x = g.variable(t(&[1], &[0.]));
        g.backward(g.sum(g.relu(x))).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.]);
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::<f64>::new();
        let l = g.cross_entropy(g.constant(t(&[1, 2], &[0., 0.])), &[0], 0.0, 99).unwrap();
        assert_abs_diff_eq!(g.value(l).data()[0], 2f64.ln(), epsilon = 1e-12);

        let l = g.cross_entropy(g.constant(t(&[2, 2], &[1., 2., 3., 4.])), &[0, 0], 0.1, 0).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);

        // Hand expansion for logits [10, -10], target 0, eps 0.1 over two
        // classes: q = [0.9, 0.1], log p0 = -ln(1 + e^-20), log p1 = -20 + log p0.
        let lp0 = -(1.0 + (-20f64).exp()).ln();
        let lp1 = -20.0 + lp0;
        let want = 0.9 * (0.9f64.ln() - lp0) + 0.1 * (0.1f64.ln() - lp1);
        let l = g.cross_entropy(g.constant(t(&[1, 2], &[10., -10.])), &[0], 0.1, 99).unwrap();
        assert_abs_diff_eq!(g.value(l).data()[0], want, epsilon = 1e-12);

        let bad = g.cross_entropy(g.constant(t(&[1, 2], &[0., 0.])), &[5], 0.0, 99);
        assert!(matches!(bad, Err(Error::Index { .. })));
    }

    #[test]
    fn backward_examples() {
        let g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[4., 5., 6.]));
        g.backward(g.sum(x)).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

        let g = Graph::<f64>::new();
        let x = g.variable(t(&[1], &[2.]));
        g.backward(g.sum(g.mul(x, x).unwrap())).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.]);

        let g = Graph::<f64>::new();
        let y = g.variable(t(&[2], &[1., -1.]));
        let l = g.add(g.sum(y), g.sum(y)).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[2., 2.]);

        let g = Graph::<f64>::new();
        let y = g.variable(t(&[2], &[1., -1.]));
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn param_binds_once_and_accumulates() {
        let p = Param::new(t(&[2], &[1., 2.]));
        let g = Graph::<f64>::new();
        let a = g.param(&p);
        let b = g.param(&p.clone());
        assert_eq!(a, b);
        let l = g.add(g.sum(g.mul(a, a).unwrap()), g.sum(b)).unwrap();
        g.backward(l).unwrap();
        assert_eq!(p.grad().data(), &[3., 5.]);
        p.zero_grad();
        assert_eq!(p.grad().data(), &[0., 0.]);
    }

    #[test]
    fn gradcheck_sum_is_exact() {
        let x = random(&[5], 11);
        let err = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn gradcheck_softmax_square() {
        let x = random(&[2, 4], 12);
        let err = grad_check(
            |g, x| {
                let s = g.softmax(x)?;
                Ok(g.sum(g.mul(s, s)?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gradcheck_each_op() {
        let w = random(&[4, 3], 20);
        let bias = random(&[3], 21);
        let gamma = random(&[3], 22);
        let x = random(&[2, 4], 23);
        let err = grad_check(
            |g, x| {
                let w = g.constant(w.clone());
                let h = g.matmul(x, w)?;
                let h = g.add_bias(h, g.constant(bias.clone()))?;
                let h = g.layer_norm(h, g.constant(gamma.clone()), g.constant(bias.clone()), 1e-5)?;
                let h = g.relu(h);
                let h = g.transpose(h)?;
                let h = g.reshape(h, &[6])?;
                let h2 = g.scale(h, 0.5);
                let h = g.sub(h, h2)?;
                let h = g.reshape(h, &[2, 3])?;
                g.cross_entropy(h, &[1, 2], 0.1, 99)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dropout_is_deterministic_and_off_in_eval() {
        let x = Tensor::<f32>::ones(&[64]);
        let run = |mode| {
            let g = Graph::with_mode(mode);
            let v = g.constant(x.clone());
            g.value(g.dropout(v, 0.5).unwrap()).data().to_vec()
        };
        assert_eq!(run(Mode::Eval), x.data());
        let a = run(Mode::Train { seed: 7 });
        assert_eq!(a, run(Mode::Train { seed: 7 }));
        assert_ne!(a, run(Mode::Train { seed: 8 }));
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(a.iter().any(|&v| v == 0.0));
    }
}
