use std::cell::{Ref, RefCell};
use std::rc::Rc;

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::error::{PmfError, Result};

/// Recorded operation. Indices refer to earlier nodes on the same tape.
#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    OuterAdd(usize, usize),
    Scale(usize, f64),
    ScaleRows(usize, Array1<f64>),
    Relu(usize),
    LeakyRelu(usize, f64),
    SoftmaxRows(usize),
    LogSumExpRows(usize, Option<Rc<Array2<bool>>>),
    NormalizeRows(usize),
    HConcat(Vec<usize>),
    Exp(usize),
    Log(usize),
    GatherRows(usize, Vec<usize>),
    MaskedRowSum(usize, Rc<Array2<bool>>),
    Sum(usize),
    Pick(usize, Vec<(usize, usize)>),
    Diag(usize),
    StopGradientRows(usize, Vec<bool>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Wengert list of dense-matrix operations.
///
/// Every operation appends a node; [`Tape::backward`] walks the nodes in
/// exact reverse order and accumulates gradients additively.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a matrix recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.idx, r, c)
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Array2<f64>> {
        self.grads.get(var.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or a zero matrix when nothing flowed into it.
    pub fn wrt(&self, var: &Var<'_>) -> Array2<f64> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[var.idx]),
        }
    }
}

fn rows_cols(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
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

    /// Trainable input.
    pub fn param(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn value(&self, idx: usize) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    /// Reverse pass from `root`, seeded with ones of the root's shape.
    pub fn backward(&self, root: &Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        let shapes = nodes.iter().map(|n| rows_cols(&n.value)).collect();
        grads[root.idx] = Some(Array2::ones(nodes[root.idx].value.dim()));

        for i in (0..=root.idx).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, shapes }
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Array2<f64>>],
    idx: usize,
    contribution: Array2<f64>,
) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(g) => *g += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}

fn masked_softmax(x: &Array2<f64>, mask: Option<&Array2<bool>>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (r, (xr, mut or)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
        let keep = |c: usize| mask.is_none_or(|m| m[[r, c]]);
        let mut max = f64::NEG_INFINITY;
        for (c, &v) in xr.iter().enumerate() {
            if keep(c) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (c, &v) in xr.iter().enumerate() {
            if keep(c) {
                let e = (v - max).exp();
                or[c] = e;
                total += e;
            }
        }
        or.mapv_inplace(|e| e / total);
    }
    out
}

fn backprop(nodes: &[Node], i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
    let val = |j: usize| &nodes[j].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, g.dot(&val(*b).t()));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, val(*a).t().dot(g));
            }
        }
        Op::MatMulT(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, g.dot(val(*b)));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, g.t().dot(val(*a)));
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.t().to_owned()),
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, -g);
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                accumulate(nodes, grads, *a, g * val(*b));
            }
            if nodes[*b].needs_grad {
                accumulate(nodes, grads, *b, g * val(*a));
            }
        }
        Op::AddRow(a, bias) => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[*bias].needs_grad {
                accumulate(nodes, grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
        }
        Op::OuterAdd(col, row) => {
            if nodes[*col].needs_grad {
                accumulate(nodes, grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            if nodes[*row].needs_grad {
                accumulate(nodes, grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g * *c),
        Op::ScaleRows(a, w) => {
            let mut d = g.clone();
            for (mut row, &wi) in d.outer_iter_mut().zip(w.iter()) {
                row *= wi;
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Relu(a) => {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(val(*a))
                .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
            accumulate(nodes, grads, *a, d);
        }
        Op::LeakyRelu(a, slope) => {
            let mut d = g.clone();
            Zip::from(&mut d)
                .and(val(*a))
                .for_each(|d, &x| if x <= 0.0 { *d *= *slope });
            accumulate(nodes, grads, *a, d);
        }
        Op::SoftmaxRows(a) => {
            let y = &nodes[i].value;
            let mut d = g * y;
            let dots = d.sum_axis(Axis(1));
            Zip::from(d.rows_mut())
                .and(y.rows())
                .and(&dots)
                .for_each(|mut dr, yr, &dot| {
                    Zip::from(&mut dr).and(&yr).for_each(|dv, &yv| *dv -= yv * dot);
                });
            accumulate(nodes, grads, *a, d);
        }
        Op::LogSumExpRows(a, mask) => {
            let mut p = masked_softmax(val(*a), mask.as_deref());
            for (mut row, &gi) in p.outer_iter_mut().zip(g.column(0).iter()) {
                row *= gi;
            }
            accumulate(nodes, grads, *a, p);
        }
        Op::NormalizeRows(a) => {
            let x = val(*a);
            let y = &nodes[i].value;
            let mut d = Array2::zeros(x.dim());
            for r in 0..x.nrows() {
                let norm = x.row(r).dot(&x.row(r)).sqrt();
                if norm == 0.0 {
                    continue;
                }
                let yr = y.row(r);
                let gr = g.row(r);
                let proj = yr.dot(&gr);
                let mut dr = d.row_mut(r);
                Zip::from(&mut dr)
                    .and(&gr)
                    .and(&yr)
                    .for_each(|dv, &gv, &yv| *dv = (gv - yv * proj) / norm);
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::HConcat(parts) => {
            let mut start = 0;
            for &p in parts {
                let width = val(p).ncols();
                if nodes[p].needs_grad {
                    accumulate(nodes, grads, p, g.slice(s![.., start..start + width]).to_owned());
                }
                start += width;
            }
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, g * &nodes[i].value),
        Op::Log(a) => accumulate(nodes, grads, *a, g / val(*a)),
        Op::GatherRows(a, idx) => {
            let mut d = Array2::zeros(val(*a).dim());
            for (k, &r) in idx.iter().enumerate() {
                let mut dr = d.row_mut(r);
                dr += &g.row(k);
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::MaskedRowSum(a, mask) => {
            let mut d = Array2::zeros(val(*a).dim());
            Zip::indexed(&mut d).and(mask.as_ref()).for_each(|(r, _), dv, &m| {
                if m {
                    *dv = g[[r, 0]];
                }
            });
            accumulate(nodes, grads, *a, d);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
        Op::Pick(a, entries) => {
            let mut d = Array2::zeros(val(*a).dim());
            for (k, &(r, c)) in entries.iter().enumerate() {
                d[[r, c]] += g[[k, 0]];
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Diag(a) => {
            let mut d = Array2::zeros(val(*a).dim());
            for k in 0..g.nrows() {
                d[[k, k]] = g[[k, 0]];
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::StopGradientRows(a, mask) => {
            let mut d = g.clone();
            for (mut row, &keep) in d.outer_iter_mut().zip(mask.iter()) {
                if !keep {
                    row.fill(0.0);
                }
            }
            accumulate(nodes, grads, *a, d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Array2<f64>> {
        self.tape.value(self.idx)
    }

    pub fn to_array(&self) -> Array2<f64> {
        self.value().clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        rows_cols(&self.value())
    }

    /// Value of a 1×1 result.
    pub fn scalar(&self) -> f64 {
        self.value()[[0, 0]]
    }

    fn unary(&self, value: Array2<f64>, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.idx);
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: &Var<'t>, value: Array2<f64>, op: Op) -> Var<'t> {
        let needs = self.tape.needs(self.idx) || self.tape.needs(other.idx);
        self.tape.push(value, op, needs)
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(PmfError::dim(op, format!("{a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            if a.ncols() != b.nrows() {
                return Err(PmfError::dim(
                    "matmul",
                    format!("{:?} x {:?}", a.dim(), b.dim()),
                ));
            }
            a.dot(&*b)
        };
        Ok(self.binary(other, v, Op::MatMul(self.idx, other.idx)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            if a.ncols() != b.ncols() {
                return Err(PmfError::dim(
                    "matmul_t",
                    format!("{:?} x {:?}ᵀ", a.dim(), b.dim()),
                ));
            }
            a.dot(&b.t())
        };
        Ok(self.binary(other, v, Op::MatMulT(self.idx, other.idx)))
    }

    pub fn t(&self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.unary(v, Op::Transpose(self.idx))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "add")?;
        let v = &*self.value() + &*other.value();
        Ok(self.binary(other, v, Op::Add(self.idx, other.idx)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "sub")?;
        let v = &*self.value() - &*other.value();
        Ok(self.binary(other, v, Op::Sub(self.idx, other.idx)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_shape(other, "mul")?;
        let v = &*self.value() * &*other.value();
        Ok(self.binary(other, v, Op::Mul(self.idx, other.idx)))
    }

    /// Adds a `1×cols` row vector to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let v = {
            let (a, b) = (self.value(), bias.value());
            if b.nrows() != 1 || b.ncols() != a.ncols() {
                return Err(PmfError::dim(
                    "add_row",
                    format!("{:?} + {:?}", a.dim(), b.dim()),
                ));
            }
            &*a + &*b
        };
        Ok(self.binary(bias, v, Op::AddRow(self.idx, bias.idx)))
    }

    /// `self` is `n×1`, `row` is `1×m`; entry `(i, j)` is `self_i + row_j`.
    pub fn outer_add(&self, row: &Var<'t>) -> Result<Var<'t>> {
        let v = {
            let (c, r) = (self.value(), row.value());
            if c.ncols() != 1 || r.nrows() != 1 {
                return Err(PmfError::dim(
                    "outer_add",
                    format!("{:?} ⊕ {:?}", c.dim(), r.dim()),
                ));
            }
            &*c + &*r
        };
        Ok(self.binary(row, v, Op::OuterAdd(self.idx, row.idx)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.unary(v, Op::Scale(self.idx, c))
    }

    /// Multiplies row `i` by the constant `w[i]`.
    pub fn scale_rows(&self, w: &[f64]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if w.len() != a.nrows() {
                return Err(PmfError::dim(
                    "scale_rows",
                    format!("{} weights for {} rows", w.len(), a.nrows()),
                ));
            }
            let mut v = a.clone();
            for (mut row, &wi) in v.outer_iter_mut().zip(w) {
                row *= wi;
            }
            v
        };
        Ok(self.unary(v, Op::ScaleRows(self.idx, Array1::from(w.to_vec()))))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.idx))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let v = self.value().mapv(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.idx, slope))
    }

    /// Row-wise softmax, optionally restricted to entries where `mask` is
    /// true. Masked-out entries are exactly zero; a fully masked row is zero.
    pub fn softmax_rows(&self, mask: Option<Rc<Array2<bool>>>) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            check_mask(&a, mask.as_deref(), "softmax_rows")?;
            masked_softmax(&a, mask.as_deref())
        };
        Ok(self.unary(v, Op::SoftmaxRows(self.idx)))
    }

    /// `n×1` column of `log Σ_j exp(x_ij)` over unmasked entries, computed
    /// with max subtraction.
    pub fn logsumexp_rows(&self, mask: Option<Rc<Array2<bool>>>) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            check_mask(&a, mask.as_deref(), "logsumexp_rows")?;
            let mut out = Array2::zeros((a.nrows(), 1));
            for (r, row) in a.outer_iter().enumerate() {
                let keep = |c: usize| mask.as_deref().is_none_or(|m| m[[r, c]]);
                let max = row
                    .iter()
                    .enumerate()
                    .filter(|(c, _)| keep(*c))
                    .map(|(_, &x)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                out[[r, 0]] = if max == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    let total: f64 = row
                        .iter()
                        .enumerate()
                        .filter(|(c, _)| keep(*c))
                        .map(|(_, &x)| (x - max).exp())
                        .sum();
                    max + total.ln()
                };
            }
            out
        };
        Ok(self.unary(v, Op::LogSumExpRows(self.idx, mask)))
    }

    /// Divides each row by its L2 norm; zero rows stay zero.
    pub fn normalize_rows(&self) -> Var<'t> {
        let v = normalize_rows(&self.value());
        self.unary(v, Op::NormalizeRows(self.idx))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.unary(v, Op::Exp(self.idx))
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.unary(v, Op::Log(self.idx))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if let Some(&bad) = idx.iter().find(|&&r| r >= a.nrows()) {
                return Err(PmfError::dim(
                    "gather_rows",
                    format!("row {bad} out of {} rows", a.nrows()),
                ));
            }
            a.select(Axis(0), idx)
        };
        Ok(self.unary(v, Op::GatherRows(self.idx, idx.to_vec())))
    }

    /// `n×1` column of per-row sums over the entries where `mask` is true.
    pub fn masked_row_sum(&self, mask: Rc<Array2<bool>>) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            check_mask(&a, Some(&mask), "masked_row_sum")?;
            let mut out = Array2::zeros((a.nrows(), 1));
            Zip::indexed(&*a).and(mask.as_ref()).for_each(|(r, _), &x, &m| {
                if m {
                    out[[r, 0]] += x;
                }
            });
            out
        };
        Ok(self.unary(v, Op::MaskedRowSum(self.idx, mask)))
    }

    /// Sum of all entries as a `1×1` matrix.
    pub fn sum(&self) -> Var<'t> {
        let total = self.value().sum();
        self.unary(Array2::from_elem((1, 1), total), Op::Sum(self.idx))
    }

    /// `k×1` column of the listed entries.
    pub fn pick(&self, entries: &[(usize, usize)]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            let mut out = Array2::zeros((entries.len(), 1));
            for (k, &(r, c)) in entries.iter().enumerate() {
                if r >= a.nrows() || c >= a.ncols() {
                    return Err(PmfError::dim(
                        "pick",
                        format!("entry ({r}, {c}) outside {:?}", a.dim()),
                    ));
                }
                out[[k, 0]] = a[[r, c]];
            }
            out
        };
        Ok(self.unary(v, Op::Pick(self.idx, entries.to_vec())))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&self) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if a.nrows() != a.ncols() {
                return Err(PmfError::dim("diag", format!("non-square {:?}", a.dim())));
            }
            a.diag().to_owned().insert_axis(Axis(1))
        };
        Ok(self.unary(v, Op::Diag(self.idx)))
    }

    /// Identity in the forward pass; during backward the gradient of rows
    /// whose mask entry is `false` is replaced by zero.
    pub fn stop_gradient_rows(&self, mask: &[bool]) -> Result<Var<'t>> {
        let v = {
            let a = self.value();
            if mask.len() != a.nrows() {
                return Err(PmfError::dim(
                    "stop_gradient_rows",
                    format!("mask of {} for {} rows", mask.len(), a.nrows()),
                ));
            }
            a.clone()
        };
        Ok(self.unary(v, Op::StopGradientRows(self.idx, mask.to_vec())))
    }

    /// Copy of the value with no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.to_array())
    }
}

/// Horizontal concatenation; all parts must share a row count.
pub fn hconcat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| PmfError::dim("hconcat", "no inputs"))?;
    let tape = first.tape;
    let v = {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].nrows();
        if let Some(bad) = values.iter().find(|v| v.nrows() != rows) {
            return Err(PmfError::dim(
                "hconcat",
                format!("row counts {rows} and {}", bad.nrows()),
            ));
        }
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("row counts checked")
    };
    let needs = parts.iter().any(|p| tape.needs(p.idx));
    Ok(tape.push(v, Op::HConcat(parts.iter().map(|p| p.idx).collect()), needs))
}

fn check_mask(a: &Array2<f64>, mask: Option<&Array2<bool>>, op: &'static str) -> Result<()> {
    match mask {
        Some(m) if m.dim() != a.dim() => Err(PmfError::dim(
            op,
            format!("mask {:?} for values {:?}", m.dim(), a.dim()),
        )),
        _ => Ok(()),
    }
}

/// Row-wise L2 normalization outside the tape; zero rows stay zero.
pub fn normalize_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut v = a.clone();
    for mut row in v.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    v
}
