//! Op tape with reverse-mode gradients.
//!
//! A [`Tape`] records every forward op together with the data its
//! backward rule needs. Nodes that do not depend on any gradient-carrying
//! leaf are marked as such and skipped during the backward sweep.

use super::kernels::{
    conv_filter_grad, conv_forward, deconv_forward, matmul_a_bt, matmul_at_b, matmul_naive, ConvGeometry,
};
use super::{check_finite, Result, Tensor, TensorError};
use std::cell::{Ref, RefCell};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRowVector {
        mat: usize,
        vec: usize,
        rows: usize,
        cols: usize,
    },
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    AddScalar(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Concat {
        parts: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        a: usize,
        start: usize,
    },
    Pick {
        a: usize,
        index: usize,
    },
    Row {
        a: usize,
        index: usize,
    },
    Sum(usize),
    MeanRows {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Conv {
        input: usize,
        filters: usize,
        bias: usize,
        geom: ConvGeometry,
    },
    Deconv {
        topics: usize,
        filters: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
    },
    L1 {
        a: usize,
        b: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    /// Leaf that gradients flow into.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient (inputs, masks, statistics).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn var_at(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
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

    fn record(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var<'_>> {
        check_finite(op_name, &data)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents(&op).iter().any(|&p| nodes[p].requires_grad)
        };
        let value = Tensor {
            shape,
            data,
            grad: None,
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape.clone()));
        }
        check_finite("loss", &root.value.data)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        let shape = var.shape();
        self.grads.get(var.id)?.as_ref().map(|g| Tensor {
            shape,
            data: g.clone(),
            grad: None,
        })
    }

    pub(crate) fn raw(&self, id: usize) -> Option<&[f64]> {
        self.grads.get(id)?.as_deref()
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul { a, b, .. } => vec![*a, *b],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::AddScalar(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Sum(a)
        | Op::Reshape(a) => vec![*a],
        Op::AddRowVector { mat, vec, .. } => vec![*mat, *vec],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Slice { a, .. } | Op::Pick { a, .. } | Op::Row { a, .. } | Op::MeanRows { a, .. } => {
            vec![*a]
        }
        Op::Conv {
            input, filters, bias, ..
        } => vec![*input, *filters, *bias],
        Op::Deconv {
            topics, filters, bias, ..
        } => {
            let mut p = vec![*topics, *filters];
            p.extend(bias);
            p
        }
        Op::L1 { a, b } => vec![*a, *b],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, contrib: impl FnOnce() -> Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    let c = contrib();
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(c).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(c),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value.data;
    let val = |id: usize| &nodes[id].value.data;
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b, m, k, n } => {
            let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
            accumulate(grads, nodes, a, || matmul_a_bt(g, val(b), m, k, n));
            accumulate(grads, nodes, b, || matmul_at_b(val(a), g, m, k, n));
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, || g.to_vec());
            accumulate(grads, nodes, *b, || g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, || g.to_vec());
            accumulate(grads, nodes, *b, || g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            accumulate(grads, nodes, a, || g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
            accumulate(grads, nodes, b, || g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, || g.iter().map(|x| x * c).collect()),
        Op::AddRowVector { mat, vec, rows, cols } => {
            accumulate(grads, nodes, *mat, || g.to_vec());
            accumulate(grads, nodes, *vec, || {
                let mut s = vec![0.0; *cols];
                for r in 0..*rows {
                    for (o, x) in s.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *o += x;
                    }
                }
                s
            });
        }
        Op::Tanh(a) => accumulate(grads, nodes, *a, || {
            g.iter().zip(out).map(|(x, y)| x * (1.0 - y * y)).collect()
        }),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, || {
            g.iter().zip(out).map(|(x, y)| x * y * (1.0 - y)).collect()
        }),
        Op::Relu(a) => accumulate(grads, nodes, *a, || {
            g.iter()
                .zip(out)
                .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                .collect()
        }),
        Op::Exp(a) => accumulate(grads, nodes, *a, || g.iter().zip(out).map(|(x, y)| x * y).collect()),
        Op::Ln(a) => accumulate(grads, nodes, *a, || g.iter().zip(val(*a)).map(|(x, y)| x / y).collect()),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, || g.to_vec()),
        Op::Softmax(a) => accumulate(grads, nodes, *a, || {
            let dot: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
            g.iter().zip(out).map(|(x, y)| y * (x - dot)).collect()
        }),
        Op::LogSoftmax(a) => accumulate(grads, nodes, *a, || {
            let total: f64 = g.iter().sum();
            g.iter().zip(out).map(|(x, y)| x - y.exp() * total).collect()
        }),
        Op::Concat { parts, outer, widths } => {
            let row: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                accumulate(grads, nodes, p, || {
                    let mut s = Vec::with_capacity(outer * w);
                    for o in 0..*outer {
                        s.extend_from_slice(&g[o * row + offset..o * row + offset + w]);
                    }
                    s
                });
                offset += w;
            }
        }
        Op::Slice { a, start } => accumulate(grads, nodes, *a, || {
            let mut s = vec![0.0; nodes[*a].value.len()];
            s[*start..*start + g.len()].copy_from_slice(g);
            s
        }),
        Op::Pick { a, index } => accumulate(grads, nodes, *a, || {
            let mut s = vec![0.0; nodes[*a].value.len()];
            s[*index] = g[0];
            s
        }),
        Op::Row { a, index } => accumulate(grads, nodes, *a, || {
            let mut s = vec![0.0; nodes[*a].value.len()];
            let w = g.len();
            s[index * w..(index + 1) * w].copy_from_slice(g);
            s
        }),
        Op::Sum(a) => accumulate(grads, nodes, *a, || vec![g[0]; nodes[*a].value.len()]),
        Op::MeanRows { a, rows, cols } => accumulate(grads, nodes, *a, || {
            let inv = 1.0 / *rows as f64;
            let mut s = Vec::with_capacity(rows * cols);
            for _ in 0..*rows {
                s.extend(g.iter().map(|x| x * inv));
            }
            s
        }),
        Op::Reshape(a) => accumulate(grads, nodes, *a, || g.to_vec()),
        Op::Conv {
            input,
            filters,
            bias,
            geom,
        } => {
            let d2 = geom.out_width();
            accumulate(grads, nodes, *input, || deconv_forward(geom, g, val(*filters), None));
            accumulate(grads, nodes, *filters, || conv_filter_grad(geom, val(*input), g));
            accumulate(grads, nodes, *bias, || {
                (0..geom.filters)
                    .map(|k| g[k * d2..(k + 1) * d2].iter().sum())
                    .collect()
            });
        }
        Op::Deconv {
            topics,
            filters,
            bias,
            geom,
        } => {
            let zero_bias = vec![0.0; geom.filters];
            // The adjoint of the transposed convolution is the convolution.
            accumulate(grads, nodes, *topics, || {
                conv_forward(geom, g, val(*filters), &zero_bias)
            });
            accumulate(grads, nodes, *filters, || conv_filter_grad(geom, g, val(*topics)));
            if let Some(b) = bias {
                accumulate(grads, nodes, *b, || {
                    let mut s = vec![0.0; geom.feature_dim];
                    for m in 0..geom.regions {
                        for (o, x) in s.iter_mut().zip(&g[m * geom.feature_dim..(m + 1) * geom.feature_dim]) {
                            *o += x;
                        }
                    }
                    s
                });
            }
        }
        Op::L1 { a, b } => {
            let sign: Vec<f64> = val(*a)
                .iter()
                .zip(val(*b))
                .map(|(x, y)| {
                    let d = x - y;
                    if d > 0.0 {
                        g[0]
                    } else if d < 0.0 {
                        -g[0]
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(grads, nodes, *b, || sign.iter().map(|s| -s).collect());
            accumulate(grads, nodes, *a, || sign);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let cols = inv_std.len();
            let rows = g.len() / cols;
            let gam = val(*gamma);
            accumulate(grads, nodes, *beta, || {
                let mut s = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        s[c] += g[r * cols + c];
                    }
                }
                s
            });
            accumulate(grads, nodes, *gamma, || {
                let mut s = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        s[c] += g[r * cols + c] * xhat[r * cols + c];
                    }
                }
                s
            });
            accumulate(grads, nodes, *x, || {
                let mut dx = vec![0.0; rows * cols];
                for c in 0..cols {
                    if *train {
                        let n = rows as f64;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for r in 0..rows {
                            let d = g[r * cols + c] * gam[c];
                            sum_d += d;
                            sum_dx += d * xhat[r * cols + c];
                        }
                        for r in 0..rows {
                            let d = g[r * cols + c] * gam[c];
                            dx[r * cols + c] = inv_std[c] / n * (n * d - sum_d - xhat[r * cols + c] * sum_dx);
                        }
                    } else {
                        for r in 0..rows {
                            dx[r * cols + c] = g[r * cols + c] * gam[c] * inv_std[c];
                        }
                    }
                }
                dx
            });
        }
    }
}

/// Per-column statistics observed by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

// Fallible ops, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.value(self.id).data.clone()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, data) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
            (a.shape.clone(), data)
        };
        self.tape.record(name, shape, data, op)
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (shape, data) = {
            let a = self.tape.value(self.id);
            (a.shape.clone(), a.data.iter().map(|x| f(*x)).collect())
        };
        self.tape.record(name, shape, data, op)
    }

    /// Matrix product. Rank-1 operands act as a row (left) or column
    /// (right) vector and the corresponding output axis is dropped.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, data, m, k, n) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            let (m, ka, left_vec) = match *a.shape.as_slice() {
                [k] => (1, k, true),
                [m, k] => (m, k, false),
                _ => return Err(mismatch()),
            };
            let (kb, n, right_vec) = match *b.shape.as_slice() {
                [k] => (k, 1, true),
                [k, n] => (k, n, false),
                _ => return Err(mismatch()),
            };
            if ka != kb {
                return Err(mismatch());
            }
            let mut shape = Vec::new();
            if !left_vec {
                shape.push(m);
            }
            if !right_vec {
                shape.push(n);
            }
            (shape, matmul_naive(&a.data, &b.data, m, ka, n), m, ka, n)
        };
        self.tape.record(
            "matmul",
            shape,
            data,
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| x * c, Op::Scale(self.id, c))
    }

    /// Adds `vec[c]` to every row of `self[r×c]`.
    pub fn add_row_vector(self, vec: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&vec);
        let (shape, data, rows, cols) = {
            let m = self.tape.value(self.id);
            let v = self.tape.value(vec.id);
            let (rows, cols) = m.dims2()?;
            if v.shape != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row_vector",
                    lhs: m.shape.clone(),
                    rhs: v.shape.clone(),
                });
            }
            let mut data = m.data.clone();
            for r in 0..rows {
                for (o, x) in data[r * cols..(r + 1) * cols].iter_mut().zip(&v.data) {
                    *o += x;
                }
            }
            (m.shape.clone(), data, rows, cols)
        };
        self.tape.record(
            "add_row_vector",
            shape,
            data,
            Op::AddRowVector {
                mat: self.id,
                vec: vec.id,
                rows,
                cols,
            },
        )
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    /// Natural log; non-positive inputs produce a non-finite error.
    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", f64::ln, Op::Ln(self.id))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar(self.id))
    }

    /// Softmax over a rank-1 tensor, computed with max subtraction.
    pub fn softmax(self) -> Result<Var<'t>> {
        let (shape, data) = {
            let a = self.tape.value(self.id);
            ensure_rank1("softmax", &a)?;
            check_finite("softmax", &a.data)?;
            (a.shape.clone(), softmax(&a.data))
        };
        self.tape.record("softmax", shape, data, Op::Softmax(self.id))
    }

    pub fn log_softmax(self) -> Result<Var<'t>> {
        let (shape, data) = {
            let a = self.tape.value(self.id);
            ensure_rank1("log_softmax", &a)?;
            check_finite("log_softmax", &a.data)?;
            (a.shape.clone(), log_softmax(&a.data))
        };
        self.tape.record("log_softmax", shape, data, Op::LogSoftmax(self.id))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no parts".into(),
        })?;
        let tape = first.tape;
        let (shape, data, outer, widths) = {
            let vals: Vec<_> = parts
                .iter()
                .map(|p| {
                    first.same_tape(p);
                    tape.value(p.id)
                })
                .collect();
            let base = vals[0].shape.clone();
            if axis >= base.len() {
                return Err(TensorError::InvalidShape {
                    op: "concat",
                    shape: base,
                    reason: format!("axis {axis} out of range"),
                });
            }
            for v in &vals[1..] {
                let ok = v.shape.len() == base.len()
                    && v.shape
                        .iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: v.shape.clone(),
                    });
                }
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let widths: Vec<usize> = vals.iter().map(|v| v.shape[axis] * inner).collect();
            let mut data = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
            for o in 0..outer {
                for (v, w) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data[o * w..(o + 1) * w]);
                }
            }
            let mut shape = base;
            shape[axis] = vals.iter().map(|v| v.shape[axis]).sum();
            (shape, data, outer, widths)
        };
        tape.record(
            "concat",
            shape,
            data,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                outer,
                widths,
            },
        )
    }

    /// Contiguous sub-vector `[start, start + len)` of a rank-1 tensor.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        let data = {
            let a = self.tape.value(self.id);
            ensure_rank1("slice", &a)?;
            if start + len > a.len() || len == 0 {
                return Err(TensorError::IndexOutOfRange {
                    op: "slice",
                    index: start + len,
                    len: a.len(),
                });
            }
            a.data[start..start + len].to_vec()
        };
        self.tape
            .record("slice", vec![len], data, Op::Slice { a: self.id, start })
    }

    /// Scalar element of a rank-1 tensor.
    pub fn pick(self, index: usize) -> Result<Var<'t>> {
        let v = {
            let a = self.tape.value(self.id);
            ensure_rank1("pick", &a)?;
            *a.data.get(index).ok_or(TensorError::IndexOutOfRange {
                op: "pick",
                index,
                len: a.len(),
            })?
        };
        self.tape
            .record("pick", vec![], vec![v], Op::Pick { a: self.id, index })
    }

    /// Row `index` of a matrix (embedding lookup).
    pub fn row(self, index: usize) -> Result<Var<'t>> {
        let (data, cols) = {
            let a = self.tape.value(self.id);
            let (rows, cols) = a.dims2()?;
            if index >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "row",
                    index,
                    len: rows,
                });
            }
            (a.row(index).to_vec(), cols)
        };
        self.tape.record("row", vec![cols], data, Op::Row { a: self.id, index })
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).data.iter().sum();
        self.tape.record("sum", vec![], vec![s], Op::Sum(self.id))
    }

    /// Column-wise mean of an `M×D` matrix.
    pub fn mean_pool_columns(self) -> Result<Var<'t>> {
        let (t, rows, cols) = {
            let a = self.tape.value(self.id);
            let (rows, cols) = a.dims2()?;
            (super::kernels::mean_pool_columns(&a)?, rows, cols)
        };
        self.tape.record(
            "mean_pool_columns",
            vec![cols],
            t.data,
            Op::MeanRows { a: self.id, rows, cols },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let data = {
            let a = self.tape.value(self.id);
            if shape.iter().product::<usize>() != a.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            a.data.clone()
        };
        self.tape.record("reshape", shape.to_vec(), data, Op::Reshape(self.id))
    }

    /// Valid strided convolution of an `M×D1` map into `K×D2` outputs.
    pub fn conv(self, filters: Var<'t>, bias: Var<'t>, geom: ConvGeometry) -> Result<Var<'t>> {
        geom.validate()?;
        let data = {
            let x = self.tape.value(self.id);
            let f = self.tape.value(filters.id);
            let b = self.tape.value(bias.id);
            expect_shape("conv input", &x, &[geom.regions, geom.feature_dim])?;
            expect_shape("conv filters", &f, &[geom.filters, geom.regions, geom.width])?;
            expect_shape("conv bias", &b, &[geom.filters])?;
            conv_forward(&geom, &x.data, &f.data, &b.data)
        };
        self.tape.record(
            "conv",
            vec![geom.filters, geom.out_width()],
            data,
            Op::Conv {
                input: self.id,
                filters: filters.id,
                bias: bias.id,
                geom,
            },
        )
    }

    /// Transposed convolution of `K×D2` topics back to `M×D1`.
    pub fn deconv(self, filters: Var<'t>, bias: Option<Var<'t>>, geom: ConvGeometry) -> Result<Var<'t>> {
        geom.validate()?;
        let data = {
            let t = self.tape.value(self.id);
            let f = self.tape.value(filters.id);
            expect_shape("deconv topics", &t, &[geom.filters, geom.out_width()])?;
            expect_shape("deconv filters", &f, &[geom.filters, geom.regions, geom.width])?;
            let b = bias.map(|b| self.tape.value(b.id));
            if let Some(b) = &b {
                expect_shape("deconv bias", b, &[geom.feature_dim])?;
            }
            deconv_forward(&geom, &t.data, &f.data, b.as_ref().map(|b| b.data.as_slice()))
        };
        self.tape.record(
            "deconv",
            vec![geom.regions, geom.feature_dim],
            data,
            Op::Deconv {
                topics: self.id,
                filters: filters.id,
                bias: bias.map(|b| b.id),
                geom,
            },
        )
    }

    /// `Σ |self − other|`; the subgradient at exact ties is zero.
    pub fn l1_distance(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let s = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape != b.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "l1_distance",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum()
        };
        self.tape.record(
            "l1_distance",
            vec![],
            vec![s],
            Op::L1 {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Column-wise batch normalization over the rows of `self`, using the
    /// rows' own statistics. Returns the statistics for running averages.
    pub fn batch_norm_train(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, BatchStats)> {
        let (rows, cols, data) = {
            let x = self.tape.value(self.id);
            let (rows, cols) = x.dims2()?;
            (rows, cols, x.data.clone())
        };
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += data[r * cols + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = data[r * cols + c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let y = self.normalize(gamma, beta, &mean, &var, eps, true)?;
        Ok((y, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        self.normalize(gamma, beta, mean, var, eps, false)
    }

    fn normalize(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (shape, xhat, inv_std, out) = {
            let x = self.tape.value(self.id);
            let (rows, cols) = x.dims2()?;
            let gm = self.tape.value(gamma.id);
            let bt = self.tape.value(beta.id);
            expect_shape("batch_norm gamma", &gm, &[cols])?;
            expect_shape("batch_norm beta", &bt, &[cols])?;
            if mean.len() != cols || var.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm stats",
                    lhs: vec![cols],
                    rhs: vec![mean.len(), var.len()],
                });
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; rows * cols];
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    xhat[i] = (x.data[i] - mean[c]) * inv_std[c];
                    out[i] = gm.data[c] * xhat[i] + bt.data[c];
                }
            }
            (x.shape.clone(), xhat, inv_std, out)
        };
        self.tape.record(
            "batch_norm",
            shape,
            out,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
        )
    }
}

fn ensure_rank1(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() == 1 {
        Ok(())
    } else {
        Err(TensorError::InvalidShape {
            op,
            shape: t.shape.clone(),
            reason: "expected a vector".into(),
        })
    }
}

fn expect_shape(op: &'static str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape == shape {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: shape.to_vec(),
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let z = tape.constant(vec_t(&[0.0]));
        assert_eq!(z.tanh().unwrap().item(), 0.0);
        assert_eq!(z.sigmoid().unwrap().item(), 0.5);
        let a = tape.constant(vec_t(&[1.0, 2.0]));
        let b = tape.constant(vec_t(&[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().to_vec(), vec![4.0, 6.0]);
        assert_eq!(a.sub(b).unwrap().to_vec(), vec![-2.0, -2.0]);
        assert_eq!(a.mul(b).unwrap().to_vec(), vec![3.0, 8.0]);
        assert_eq!(a.scale(-2.0).unwrap().to_vec(), vec![-2.0, -4.0]);
        let c = tape.constant(vec_t(&[1.0, 2.0, 3.0]));
        assert!(matches!(a.add(c), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        for c in [-3.0, 0.0, 7.5] {
            let s = tape.constant(vec_t(&[c; 4])).softmax().unwrap().to_vec();
            assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
        let s = tape.constant(vec_t(&[0.0, 3f64.ln()])).softmax().unwrap().to_vec();
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let s = tape.constant(vec_t(&[1000.0, 0.0])).softmax().unwrap().to_vec();
        assert!((s[0] - 1.0).abs() < 1e-15 && s[1] < 1e-300);
    }

    #[test]
    fn nan_is_rejected_not_propagated() {
        let tape = Tape::new();
        let big = tape.constant(vec_t(&[1e300]));
        let err = big.mul(big).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "mul" });
    }

    #[test]
    fn concat_examples() {
        let tape = Tape::new();
        let a = tape.constant(vec_t(&[1.0]));
        let b = tape.constant(vec_t(&[2.0]));
        assert_eq!(Var::concat(&[a, b], 0).unwrap().to_vec(), vec![1.0, 2.0]);
        let x = tape.constant(vec_t(&[1.0, 2.0, 3.0]));
        assert_eq!(Var::concat(&[x], 0).unwrap().to_vec(), x.to_vec());
        let h = tape.constant(Tensor::zeros(&[1000]));
        let v = tape.constant(Tensor::zeros(&[1024]));
        let w = tape.constant(Tensor::zeros(&[512]));
        assert_eq!(Var::concat(&[h, v, w], 0).unwrap().shape(), vec![2536]);
        let m1 = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let m2 = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let cat = Var::concat(&[m1, m2], 1).unwrap();
        assert_eq!(cat.shape(), vec![2, 3]);
        assert_eq!(cat.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert!(Var::concat(&[m1, x], 0).is_err());
    }

    #[test]
    fn backward_of_square() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.variable(vec_t(&[1.0, 2.0]));
        let c = tape.constant(vec_t(&[3.0, 4.0]));
        let y = x.mul(c).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_rejects_vector_loss() {
        let tape = Tape::new();
        let x = tape.variable(vec_t(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn l1_tie_has_zero_subgradient() {
        let tape = Tape::new();
        let a = tape.variable(vec_t(&[1.0, 2.0, 3.0]));
        let b = tape.constant(vec_t(&[1.0, 0.0, 5.0]));
        let l = a.l1_distance(b).unwrap();
        assert_eq!(l.item(), 4.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, -1.0]);
    }
}
