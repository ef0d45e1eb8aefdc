//! Minimal reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node, and
//! [`Graph::backward`] walks the tape in reverse. Nodes created with
//! [`Graph::constant`] never receive gradients, and neither does anything
//! computed purely from constants, so frozen sub-networks (for example a
//! density model used inside a generator loss) only pay for the input
//! gradient.
//!
//! Binary element-wise operations broadcast along size-1 axes in either
//! operand.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis, Zip};

type Tensor = Rc<Array2<f64>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    ClampMin(usize, f64),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    LogSoftmaxCols(usize),
    LogSumExpCols(usize),
    Pick(usize, Rc<Vec<usize>>),
    GatherRows(usize, Rc<Vec<usize>>),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Transpose(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Array2<f64>>>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let shape = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, shape.0, shape.1)
    }
}

fn reduce_to(grad: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn expand(a: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    a.broadcast(shape).expect("broadcastable").to_owned()
}

fn row_logsumexp(a: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), 1));
    for (i, row) in a.outer_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if m == f64::NEG_INFINITY {
            out[[i, 0]] = f64::NEG_INFINITY;
            continue;
        }
        let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        out[[i, 0]] = m + s.ln();
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable input: gradients are accumulated for it.
    pub fn param(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Fixed input: never differentiated.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: Var<'_>, value: Array2<f64>, op: Op) -> Var<'_> {
        let rg = self.needs(a.id);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, value: Array2<f64>, op: Op) -> Var<'_> {
        let rg = self.needs(a.id) || self.needs(b.id);
        self.push(value, op, rg)
    }

    /// Runs reverse accumulation from a scalar (1x1) node.
    pub fn backward(&self, loss: Var<'_>) {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.dim(), (1, 1), "loss must be 1x1");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Array2::ones((1, 1)));

        let acc = |grads: &mut Vec<Option<Array2<f64>>>, id: usize, g: Array2<f64>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &nodes[id].value;
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (nodes[*a].value.dim(), nodes[*b].value.dim());
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, reduce_to(g.clone(), sa));
                    }
                    acc(&mut grads, *b, reduce_to(g, sb));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (nodes[*a].value.dim(), nodes[*b].value.dim());
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, reduce_to(g.clone(), sa));
                    }
                    acc(&mut grads, *b, reduce_to(-g, sb));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, reduce_to(&g * &**vb, va.dim()));
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, reduce_to(&g * &**va, vb.dim()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, reduce_to(&g / &**vb, va.dim()));
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -out / b
                        let gb = -(&g * &**out) / &**vb;
                        acc(&mut grads, *b, reduce_to(gb, vb.dim()));
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, g.dot(&vb.t()));
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, va.t().dot(&g));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => {
                    let d = out.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, g * d);
                }
                Op::Tanh(a) => {
                    let d = out.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g * d);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&**out)
                        .for_each(|gv, &y| if y <= 0.0 { *gv = 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&*nodes[*a].value)
                        .for_each(|gv, &x| if x < 0.0 { *gv *= *slope });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &**out),
                Op::Log(a) => acc(&mut grads, *a, g / &*nodes[*a].value),
                Op::Sqrt(a) => {
                    let d = out.mapv(|y| if y > 0.0 { 0.5 / y } else { 0.0 });
                    acc(&mut grads, *a, g * d);
                }
                Op::Square(a) => acc(&mut grads, *a, g * &nodes[*a].value.mapv(|x| 2.0 * x)),
                Op::ClampMin(a, lo) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&*nodes[*a].value)
                        .for_each(|gv, &x| if x < *lo { *gv = 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let shape = nodes[*a].value.dim();
                    acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::SumRows(a) => {
                    let shape = nodes[*a].value.dim();
                    acc(&mut grads, *a, expand(&g, shape));
                }
                Op::SumCols(a) => {
                    let shape = nodes[*a].value.dim();
                    acc(&mut grads, *a, expand(&g, shape));
                }
                Op::LogSoftmaxCols(a) => {
                    // g - softmax * rowsum(g)
                    let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let mut ga = g;
                    Zip::from(ga.rows_mut())
                        .and(out.rows())
                        .and(rs.rows())
                        .for_each(|mut gr, yr, s| {
                            let s = s[0];
                            Zip::from(&mut gr).and(&yr).for_each(|gv, &y| *gv -= y.exp() * s);
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::LogSumExpCols(a) => {
                    let va = &nodes[*a].value;
                    let mut ga = Array2::zeros(va.dim());
                    Zip::from(ga.rows_mut())
                        .and(va.rows())
                        .and(out.rows())
                        .and(g.rows())
                        .for_each(|mut gr, xr, lse, gg| {
                            let (lse, gg) = (lse[0], gg[0]);
                            if lse.is_finite() {
                                Zip::from(&mut gr)
                                    .and(&xr)
                                    .for_each(|gv, &x| *gv = gg * (x - lse).exp());
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Pick(a, idx) => {
                    let shape = nodes[*a].value.dim();
                    let mut ga = Array2::zeros(shape);
                    for (r, &c) in idx.iter().enumerate() {
                        ga[[r, c]] = g[[r, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let shape = nodes[*a].value.dim();
                    let mut ga = Array2::zeros(shape);
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let shape = nodes[*a].value.dim();
                    let mut ga = Array2::zeros(shape);
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let shape = nodes[*a].value.dim();
                    let mut ga = Array2::zeros(shape);
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        if nodes[p].requires_grad {
                            acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = nodes[p].value.nrows();
                        if nodes[p].requires_grad {
                            acc(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        }
                        off += h;
                    }
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(shape, flat).expect("same size");
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
            }
        }
        *self.grads.borrow_mut() = grads;
    }

    /// Gradient of the last `backward` call with respect to `v`; zeros when
    /// `v` did not influence the loss.
    pub fn grad(&self, v: Var<'_>) -> Array2<f64> {
        let grads = self.grads.borrow();
        match grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Array2::zeros(v.shape()),
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Array2<f64>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id].value.dim()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn binary_op(self, other: Var<'g>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.dim(), b.dim());
        let mut out = Array2::zeros(shape);
        Zip::from(&mut out)
            .and_broadcast(&*a)
            .and_broadcast(&*b)
            .for_each(|o, &x, &y| *o = f(x, y));
        self.graph.binary(self, other, out, op)
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary_op(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary_op(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary_op(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary_op(other, Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        let out = self.value().dot(&*other.value());
        self.graph.binary(self, other, out, Op::MatMul(self.id, other.id))
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        let out = self.value().mapv(|x| x * k);
        self.graph.unary(self, out, Op::Scale(self.id, k))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        let out = self.value().mapv(|x| x + k);
        self.graph.unary(self, out, Op::AddScalar(self.id))
    }

    /// `k - self`
    pub fn rsub_scalar(self, k: f64) -> Var<'g> {
        self.neg().add_scalar(k)
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.graph.unary(self, out, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'g> {
        let out = self.value().mapv(f64::tanh);
        self.graph.unary(self, out, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'g> {
        let out = self.value().mapv(|x| x.max(0.0));
        self.graph.unary(self, out, Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let out = self.value().mapv(|x| if x < 0.0 { slope * x } else { x });
        self.graph.unary(self, out, Op::LeakyRelu(self.id, slope))
    }

    pub fn exp(self) -> Var<'g> {
        let out = self.value().mapv(f64::exp);
        self.graph.unary(self, out, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'g> {
        let out = self.value().mapv(f64::ln);
        self.graph.unary(self, out, Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        let out = self.value().mapv(f64::sqrt);
        self.graph.unary(self, out, Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'g> {
        let out = self.value().mapv(|x| x * x);
        self.graph.unary(self, out, Op::Square(self.id))
    }

    /// `max(self, lo)` with zero gradient where clamped.
    pub fn clamp_min(self, lo: f64) -> Var<'g> {
        let out = self.value().mapv(|x| x.max(lo));
        self.graph.unary(self, out, Op::ClampMin(self.id, lo))
    }

    /// Sum of all entries, as 1x1.
    pub fn sum(self) -> Var<'g> {
        let out = Array2::from_elem((1, 1), self.value().sum());
        self.graph.unary(self, out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Column sums, as 1 x cols.
    pub fn sum_rows(self) -> Var<'g> {
        let out = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.graph.unary(self, out, Op::SumRows(self.id))
    }

    /// Row means, as 1 x cols.
    pub fn mean_rows(self) -> Var<'g> {
        let r = self.shape().0;
        self.sum_rows().scale(1.0 / r as f64)
    }

    /// Row sums, as rows x 1.
    pub fn sum_cols(self) -> Var<'g> {
        let out = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.graph.unary(self, out, Op::SumCols(self.id))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(self) -> Var<'g> {
        let v = self.value();
        let lse = row_logsumexp(&v);
        let out = &*v - &lse;
        self.graph.unary(self, out, Op::LogSoftmaxCols(self.id))
    }

    /// Row-wise log-sum-exp, as rows x 1.
    pub fn logsumexp(self) -> Var<'g> {
        let out = row_logsumexp(&self.value());
        self.graph.unary(self, out, Op::LogSumExpCols(self.id))
    }

    /// Picks column `idx[r]` from each row `r`, as rows x 1.
    pub fn pick(self, idx: Vec<usize>) -> Var<'g> {
        let v = self.value();
        assert_eq!(idx.len(), v.nrows());
        let out = Array2::from_shape_fn((idx.len(), 1), |(r, _)| v[[r, idx[r]]]);
        self.graph.unary(self, out, Op::Pick(self.id, Rc::new(idx)))
    }

    /// Row lookup (embedding); rows may repeat.
    pub fn gather_rows(self, idx: Vec<usize>) -> Var<'g> {
        let out = self.value().select(Axis(0), &idx);
        self.graph.unary(self, out, Op::GatherRows(self.id, Rc::new(idx)))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'g> {
        let out = self.value().slice(s![.., start..end]).to_owned();
        self.graph.unary(self, out, Op::SliceCols(self.id, start, end))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'g> {
        let out = self.value().slice(s![start..end, ..]).to_owned();
        self.graph.unary(self, out, Op::SliceRows(self.id, start, end))
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'g> {
        let flat: Vec<f64> = self.value().iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        self.graph.unary(self, out, Op::Reshape(self.id))
    }

    pub fn t(self) -> Var<'g> {
        let out = self.value().t().to_owned();
        self.graph.unary(self, out, Op::Transpose(self.id))
    }
}

/// Horizontal concatenation.
pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Var<'g> {
    let graph = parts[0].graph;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
    let out = concatenate(Axis(1), &views).expect("row counts must agree");
    let rg = parts.iter().any(|p| graph.needs(p.id));
    graph.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg)
}

/// Vertical concatenation.
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Var<'g> {
    let graph = parts[0].graph;
    let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
    let out = concatenate(Axis(0), &views).expect("column counts must agree");
    let rg = parts.iter().any(|p| graph.needs(p.id));
    graph.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg)
}
