//! Eager reverse-mode tape.
//!
//! Every operation computes its value immediately and records how to
//! propagate gradients back to its inputs. Nodes are stored in creation
//! order, which is already a topological order, so the backward pass is a
//! single reverse sweep.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{ParamId, ParamStore};
use crate::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<(usize, usize)>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ShiftRows(Var, isize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recording of a single forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, Var>>,
}

/// Gradients of a scalar with respect to the leaves and parameters of a
/// tape. Intermediate gradients are released during the sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`, zeros when `v` does not influence the
    /// output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    /// Per-parameter gradients aligned with the store's parameter order.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Matrix>> {
        let mut out: Vec<Option<Matrix>> = vec![None; store.len()];
        let store_id = store.ids().next().map(|id| id.store());
        let store_id = match store_id {
            Some(s) => s,
            None => return out,
        };
        for (id, var) in &self.params {
            if id.store() != store_id {
                continue;
            }
            if let Some(g) = &self.grads[var.0] {
                out[id.index()] = Some(g.clone());
            }
        }
        out
    }
}

fn shape(m: &Matrix) -> (usize, usize) {
    m.dim()
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sum a broadcast gradient back down to `target` shape.
fn reduce_to(g: Matrix, target: (usize, usize)) -> Matrix {
    let mut g = g;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
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

fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn shift_rows(m: &Matrix, shift: isize) -> Matrix {
    // out[t] = m[t + shift], zero outside the range.
    let (rows, cols) = m.dim();
    let mut out = Array2::zeros((rows, cols));
    for t in 0..rows {
        let src = t as isize + shift;
        if src >= 0 && (src as usize) < rows {
            out.row_mut(t).assign(&m.row(src as usize));
        }
    }
    out
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

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Borrow the value of a node.
    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    /// A leaf that receives gradients but is not a stored parameter.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values that are conceptually constant.
    pub fn constant(&self, value: Matrix) -> Var {
        self.leaf(value)
    }

    pub fn scalar_const(&self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.borrow().get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.borrow_mut().insert(id, v);
        v
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        self.push(value, op)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(&Matrix, &Matrix) -> Matrix) -> Var {
        let value = {
            let va = self.value(a);
            let vb = self.value(b);
            broadcast_shape(shape(&va), shape(&vb));
            f(&va, &vb)
        };
        self.push(value, op)
    }

    /// Elementwise sum with 2-D broadcasting over unit dimensions.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let va = self.value(a);
            let vb = self.value(b);
            assert_eq!(
                va.ncols(),
                vb.nrows(),
                "matmul shape mismatch {:?} x {:?}",
                va.dim(),
                vb.dim()
            );
            va.dot(&*vb)
        };
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: `[m × n] -> [1 × n]`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(value, Op::SumRows(a))
    }

    /// Mean over rows: `[m × n] -> [1 × n]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let m = self.value(a).nrows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m)
    }

    /// Sum over columns: `[m × n] -> [m × 1]`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumCols(a))
    }

    pub fn mean_cols(&self, a: Var) -> Var {
        let n = self.value(a).ncols() as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            softmax_row_inplace(row.as_slice_mut().expect("standard layout"));
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Softmax of a column vector independently over each `(start, len)`
    /// segment. Segments must tile the column.
    pub fn segment_softmax(&self, a: Var, segments: &[(usize, usize)]) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.ncols(), 1, "segment_softmax expects a column");
        let mut covered = 0;
        for &(start, len) in segments {
            assert_eq!(start, covered, "segments must tile the column in order");
            covered += len;
            let mut seg = value.slice_mut(s![start..start + len, 0]);
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            seg.mapv_inplace(|x| (x - max).exp());
            let sum = seg.sum();
            seg.mapv_inplace(|x| x / sum);
        }
        assert_eq!(covered, value.nrows(), "segments must tile the column");
        self.push(value, Op::SegmentSoftmax(a, segments.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            concatenate(Axis(0), &views).expect("concat_rows: column mismatch")
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            concatenate(Axis(1), &views).expect("concat_cols: row mismatch")
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// `out[t] = a[t + shift]`, zero-filled where the source row does not
    /// exist.
    pub fn shift_rows(&self, a: Var, shift: isize) -> Var {
        let value = shift_rows(&self.value(a), shift);
        self.push(value, Op::ShiftRows(a, shift))
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Var {
        let value = {
            let t = self.value(table);
            let mut out = Array2::zeros((indices.len(), t.ncols()));
            for (r, &i) in indices.iter().enumerate() {
                out.row_mut(r).assign(&t.row(i));
            }
            out
        };
        self.push(value, Op::GatherRows(table, indices.to_vec()))
    }

    /// Row-major reshape.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        let value = {
            let v = self.value(a);
            assert_eq!(v.len(), rows * cols, "reshape size mismatch");
            let flat: Vec<f64> = v.iter().cloned().collect();
            Array2::from_shape_vec((rows, cols), flat).expect("reshape")
        };
        self.push(value, Op::Reshape(a))
    }

    /// Gradients of the 1×1 node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].value.dim(),
            (1, 1),
            "backward() needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(g.clone(), val(*b).dim()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(-&g, val(*b).dim()));
                }
                Op::Mul(a, b) => {
                    let ga = &g * val(*b);
                    let gb = &g * val(*a);
                    acc(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                }
                Op::Div(a, b) => {
                    let vb = val(*b);
                    let ga = &g / vb;
                    // d(a/b)/db = -a/b^2 = -out/b
                    let gb = -(&g * &node.value) / vb;
                    acc(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(gb, vb.dim()));
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, g * d)
                }
                Op::Sigmoid(a) => {
                    let d = node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, g * d)
                }
                Op::Relu(a) => {
                    let d = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * d)
                }
                Op::Softplus(a) => {
                    let d = val(*a).mapv(sigmoid);
                    acc(&mut grads, *a, g * d)
                }
                Op::Abs(a) => {
                    let d = val(*a).mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, g * d)
                }
                Op::Sqrt(a) => {
                    let d = node.value.mapv(|y| 0.5 / y);
                    acc(&mut grads, *a, g * d)
                }
                Op::Square(a) => {
                    let d = val(*a).mapv(|x| 2.0 * x);
                    acc(&mut grads, *a, g * d)
                }
                Op::Clamp(a, lo, hi) => {
                    let d = val(*a).mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g * d)
                }
                Op::SumAll(a) => {
                    let dim = val(*a).dim();
                    acc(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]]))
                }
                Op::SumRows(a) => {
                    let dim = val(*a).dim();
                    let full = g.broadcast(dim).expect("broadcast").to_owned();
                    acc(&mut grads, *a, full)
                }
                Op::SumCols(a) => {
                    let dim = val(*a).dim();
                    let full = g.broadcast(dim).expect("broadcast").to_owned();
                    acc(&mut grads, *a, full)
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    acc(&mut grads, *a, ga)
                }
                Op::SegmentSoftmax(a, segments) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for &(start, len) in segments {
                        let ys = y.slice(s![start..start + len, 0]);
                        let gs = g.slice(s![start..start + len, 0]);
                        let dot: f64 = ys.iter().zip(gs.iter()).map(|(p, q)| p * q).sum();
                        for k in 0..len {
                            ga[[start + k, 0]] = ys[k] * (gs[k] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga)
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga)
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga)
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = val(*p).nrows();
                        let gp = g.slice(s![offset..offset + rows, ..]).to_owned();
                        acc(&mut grads, *p, gp);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = val(*p).ncols();
                        let gp = g.slice(s![.., offset..offset + cols]).to_owned();
                        acc(&mut grads, *p, gp);
                        offset += cols;
                    }
                }
                Op::ShiftRows(a, shift) => acc(&mut grads, *a, shift_rows(&g, -shift)),
                Op::GatherRows(table, indices) => {
                    let mut gt = Array2::zeros(val(*table).dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut row = gt.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, gt)
                }
                Op::Reshape(a) => {
                    let dim = val(*a).dim();
                    let flat: Vec<f64> = g.iter().cloned().collect();
                    acc(
                        &mut grads,
                        *a,
                        Array2::from_shape_vec(dim, flat).expect("reshape"),
                    )
                }
            }
        }

        let params = self.params.borrow().iter().map(|(k, v)| (*k, *v)).collect();
        Gradients { grads, params }
    }
}
