//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation applied to a [`Var`] appends a record to its [`Tape`].
//! Records are stored in creation order, so the tape is always
//! topologically sorted and [`Tape::backward`] can walk it in reverse.
//! A tape supports exactly one backward pass.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Row-norm floor used by [`Var::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    L2NormalizeRows { input: usize, norms: Vec<f64> },
    SoftmaxCrossEntropy {
        logits: usize,
        // Row-major B×C; zero outside the mask.
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Mse(usize, usize),
    AbsMean(usize),
    Sum(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Stack(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    shapes: HashMap<usize, Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros if `var` does not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(&var.id) {
            Some(g) => g.clone(),
            None => {
                let shape = self
                    .shapes
                    .get(&var.id)
                    .cloned()
                    .unwrap_or_else(|| var.value().shape().to_vec());
                Tensor::zeros(&shape)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Stacks scalars into a vector.
    pub fn stack<'t>(&'t self, items: &[Var<'t>]) -> Result<Var<'t>> {
        if items.is_empty() {
            return Err(Error::Empty("stack of zero scalars".into()));
        }
        let mut data = Vec::with_capacity(items.len());
        for v in items {
            data.push(v.value().item()?);
        }
        let rg = items.iter().any(|v| self.requires(v.id));
        let ids = items.iter().map(|v| v.id).collect();
        Ok(self.push(Tensor::vector(data), Op::Stack(ids), rg))
    }

    /// Propagates gradients from the scalar `loss` to every reachable parameter.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        adj[loss.id] = Some(Tensor::filled(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[id] = Some(g);
                continue;
            }
            for (input, contrib) in local_grads(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut adj[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut grads = HashMap::new();
        let mut shapes = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                shapes.insert(id, node.value.shape().to_vec());
                if let Some(Some(g)) = adj.get_mut(id).map(Option::take) {
                    grads.insert(id, g);
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Vector-Jacobian products of one record.
fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &nodes[i].value;
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let mut v = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                v.push((*a, g.matmul_nt(val(*b))?));
            }
            if nodes[*b].requires_grad {
                v.push((*b, val(*a).matmul_tn(g)?));
            }
            v
        }
        Op::Transpose(a) => vec![(*a, g.transpose()?)],
        Op::Relu(a) => {
            let x = val(*a);
            let mut d = g.clone();
            for (gi, xi) in d.data_mut().iter_mut().zip(x.data()) {
                if *xi <= 0.0 {
                    *gi = 0.0;
                }
            }
            vec![(*a, d)]
        }
        Op::L2NormalizeRows { input, norms } => {
            let y = &node.value;
            let cols = y.cols();
            let mut d = g.clone();
            for (r, &n) in norms.iter().enumerate() {
                let yr = y.row(r);
                let gr = &mut d.data_mut()[r * cols..(r + 1) * cols];
                if n > NORM_EPS {
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for (gi, yi) in gr.iter_mut().zip(yr) {
                        *gi = (*gi - yi * dot) / n;
                    }
                } else {
                    for gi in gr.iter_mut() {
                        *gi /= NORM_EPS;
                    }
                }
            }
            vec![(*input, d)]
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels,
        } => {
            let upstream = g.item()?;
            let x = val(*logits);
            let (b, c) = (x.rows(), x.cols());
            let scale = upstream / b as f64;
            let mut d = probs.clone();
            for (r, &y) in labels.iter().enumerate() {
                d[r * c + y] -= 1.0;
            }
            for v in &mut d {
                *v *= scale;
            }
            vec![(*logits, Tensor::new(x.shape().to_vec(), d)?)]
        }
        Op::Mse(a, b) => {
            let (xa, xb) = (val(*a), val(*b));
            let k = 2.0 * g.item()? / xa.len() as f64;
            let diff: Vec<f64> = xa
                .data()
                .iter()
                .zip(xb.data())
                .map(|(p, q)| k * (p - q))
                .collect();
            let da = Tensor::new(xa.shape().to_vec(), diff)?;
            let db = da.map(|v| -v);
            vec![(*a, da), (*b, db)]
        }
        Op::AbsMean(a) => {
            let x = val(*a);
            let k = g.item()? / x.len() as f64;
            vec![(*a, x.map(|v| k * sign0(v)))]
        }
        Op::Sum(a) => {
            let k = g.item()?;
            vec![(*a, Tensor::filled(val(*a).shape(), k))]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
        Op::Stack(ids) => ids
            .iter()
            .zip(g.data())
            .map(|(&i, &gi)| (i, Tensor::filled(val(i).shape(), gi)))
            .collect(),
    };
    Ok(out)
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value. Drop it before recording new operations.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn check_same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(shape_err(op, "operands recorded on different tapes"))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "matmul")?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(&other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    /// Divides each row by `max(‖row‖₂, NORM_EPS)`.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(shape_err(
                "l2_normalize_rows",
                format!("expected a matrix, got {:?}", x.shape()),
            ));
        }
        let cols = x.cols();
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = n.max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= denom;
            }
            norms.push(n);
        }
        drop(x);
        Ok(self.unary(out, Op::L2NormalizeRows {
            input: self.id,
            norms,
        }))
    }

    /// Mean negative log-likelihood of `labels` under a row softmax.
    ///
    /// With a mask, the softmax runs over the masked classes only and the
    /// remaining logits receive exactly zero gradient.
    pub fn softmax_cross_entropy(&self, labels: &[usize], mask: Option<&[usize]>) -> Result<Var<'t>> {
        let x = self.value();
        let (b, c) = match x.shape() {
            [b, c] => (*b, *c),
            s => {
                return Err(shape_err(
                    "softmax_cross_entropy",
                    format!("expected B×C logits, got {:?}", s),
                ))
            }
        };
        if labels.len() != b {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {} rows", labels.len(), b),
            ));
        }
        if b == 0 {
            return Err(Error::Empty("cross-entropy over an empty batch".into()));
        }
        let classes: Vec<usize> = match mask {
            Some(m) => {
                if m.is_empty() {
                    return Err(Error::Config("empty class mask".into()));
                }
                if let Some(&bad) = m.iter().find(|&&k| k >= c) {
                    return Err(Error::Config(format!("mask class {} outside {} logits", bad, c)));
                }
                m.to_vec()
            }
            None => (0..c).collect(),
        };
        let mut in_mask = vec![false; c];
        for &k in &classes {
            in_mask[k] = true;
        }
        for &y in labels {
            if y >= c {
                return Err(Error::Config(format!("label {} outside {} classes", y, c)));
            }
            if !in_mask[y] {
                return Err(Error::Config(format!("label {} outside the class mask", y)));
            }
        }

        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = x.row(r);
            let m = classes
                .iter()
                .map(|&k| row[k])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = classes.iter().map(|&k| (row[k] - m).exp()).sum();
            for &k in &classes {
                probs[r * c + k] = (row[k] - m).exp() / z;
            }
            total += z.ln() - (row[y] - m);
        }
        drop(x);
        let loss = Tensor::scalar(total / b as f64);
        Ok(self.unary(loss, Op::SoftmaxCrossEntropy {
            logits: self.id,
            probs,
            labels: labels.to_vec(),
        }))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "mse")?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        if a.is_empty() {
            return Err(Error::Empty("mse over empty tensors".into()));
        }
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let v = Tensor::scalar(s / a.len() as f64);
        drop((a, b));
        Ok(self.binary(&other, v, Op::Mse(self.id, other.id)))
    }

    /// Mean absolute value. The subgradient at zero is zero.
    pub fn abs_mean(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::Empty("abs_mean over an empty tensor".into()));
        }
        let v = Tensor::scalar(x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64);
        drop(x);
        Ok(self.unary(v, Op::AbsMean(self.id)))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().data().iter().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, |a, b| Op::Add(a, b))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, |a, b| Op::Sub(a, b))
    }

    fn elementwise(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.check_same_tape(&other, name)?;
        let (a, b) = (self.value(), other.value());
        let same = a.shape() == b.shape() || (a.is_scalar() && b.is_scalar());
        if !same {
            return Err(shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        drop((a, b));
        Ok(self.binary(&other, v, op(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }
}

/// Plain gradient descent: `p ← p − lr·g`.
///
/// Gradients are validated before any parameter is touched, so a
/// non-finite gradient leaves every parameter unchanged.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", lr)));
    }
    if params.len() != grads.len() {
        return Err(shape_err(
            "sgd_step",
            format!("{} params, {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(shape_err(
                "sgd_step",
                format!("param {} {:?} vs grad {:?}", i, p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", i)));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(())
}
