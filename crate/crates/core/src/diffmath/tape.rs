//! Reverse-mode differentiation over dense matrices.
//!
//! Every primitive evaluates eagerly and appends a node holding its value and
//! the refs of its inputs, so nodes are stored in topological order by
//! construction. [`Tape::backward`] walks the nodes once in reverse and
//! returns the gradient of the designated scalar loss with respect to every
//! parameter leaf, laid out like the [`ParameterVector`] that was bound.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::Arc;

use super::params::{Layout, ParameterVector};
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param { offset: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    AddRow(Var, Var),
    AddDiag(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    ClampMin(Var, f64),
    NormPdf(Var),
    NormCdf(Var),
    SqDist(Var, Var),
    Cholesky(Var),
    TriSolve(Var, Var),
    Sum(Var),
    ColumnSums(Var),
    MeanRows(Var),
    LogSumExp(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    TileRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param { .. } => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::ScaleBy(..) => "scale_by",
            Op::ShiftBy(..) => "shift_by",
            Op::AddRow(..) => "add_row",
            Op::AddDiag(..) => "add_diag",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::NormPdf(..) => "norm_pdf",
            Op::NormCdf(..) => "norm_cdf",
            Op::SqDist(..) => "sqdist",
            Op::Cholesky(..) => "cholesky",
            Op::TriSolve(..) => "trisolve",
            Op::Sum(..) => "sum",
            Op::ColumnSums(..) => "column_sums",
            Op::MeanRows(..) => "mean_rows",
            Op::LogSumExp(..) => "logsumexp",
            Op::Gather(..) => "gather",
            Op::SelectRows(..) => "select_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::TileRows(..) => "tile_rows",
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Named leaves created by binding a [`ParameterVector`] to a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    names: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::contract(format!("no parameter named `{name}` on tape")))
    }
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Append-only record of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    layout: Option<Arc<Layout>>,
    loss: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).to_scalar()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Result<Var> {
        let idx = self.nodes.len();
        if value.as_slice().iter().any(|x| x.is_nan()) {
            return Err(Error::Tainted {
                node: idx,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(idx))
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::contract(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn want_scalar(&self, op: &str, s: Var) -> Result<f64> {
        self.value(s)
            .to_scalar()
            .map_err(|_| Error::contract(format!("{op}: second operand must be 1x1")))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(Op::Constant, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Matrix::scalar(value))
    }

    /// Binds every segment of `params` as a differentiable leaf. A tape
    /// carries at most one bound parameter vector.
    pub fn bind(&mut self, params: &ParameterVector) -> Result<ParamVars> {
        if self.layout.is_some() {
            return Err(Error::contract("tape already has bound parameters"));
        }
        self.layout = Some(params.layout().clone());
        let mut names = Vec::new();
        for seg in params.layout().segments() {
            let value = params.matrix(&seg.name)?;
            let v = self.push(Op::Param { offset: seg.offset }, value)?;
            names.push((seg.name.clone(), v));
        }
        Ok(ParamVars { names })
    }

    /// Like [`bind`](Self::bind) but the leaves are constants: no gradient
    /// flows into them.
    pub fn bind_frozen(&mut self, params: &ParameterVector) -> Result<ParamVars> {
        let mut names = Vec::new();
        for seg in params.layout().segments() {
            let v = self.constant(params.matrix(&seg.name)?)?;
            names.push((seg.name.clone(), v));
        }
        Ok(ParamVars { names })
    }

    /// Designates `v` as a loss term.
    pub fn set_loss(&mut self, v: Var) {
        self.loss.push(v);
    }

    /// Applies a primitive looked up by name. Only primitives without
    /// non-tensor arguments are reachable this way.
    pub fn apply(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::contract(format!(
                    "primitive `{name}` takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match name {
            "add" | "sub" | "mul" | "div" | "scale_by" | "shift_by" | "add_row" | "add_diag"
            | "matmul" | "sqdist" | "trisolve" | "concat_cols" => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match name {
                    "add" => self.add(a, b),
                    "sub" => self.sub(a, b),
                    "mul" => self.mul(a, b),
                    "div" => self.div(a, b),
                    "scale_by" => self.scale_by(a, b),
                    "shift_by" => self.shift_by(a, b),
                    "add_row" => self.add_row(a, b),
                    "add_diag" => self.add_diag(a, b),
                    "matmul" => self.matmul(a, b),
                    "sqdist" => self.sqdist(a, b),
                    "trisolve" => self.trisolve(a, b),
                    _ => self.concat_cols(a, b),
                }
            }
            "neg" | "transpose" | "exp" | "log" | "sqrt" | "relu" | "norm_pdf" | "norm_cdf"
            | "cholesky" | "sum" | "column_sums" | "mean_rows" | "logsumexp" => {
                arity(1)?;
                let a = inputs[0];
                match name {
                    "neg" => self.neg(a),
                    "transpose" => self.transpose(a),
                    "exp" => self.exp(a),
                    "log" => self.log(a),
                    "sqrt" => self.sqrt(a),
                    "relu" => self.relu(a),
                    "norm_pdf" => self.norm_pdf(a),
                    "norm_cdf" => self.norm_cdf(a),
                    "cholesky" => self.cholesky(a),
                    "sum" => self.sum(a),
                    "column_sums" => self.column_sums(a),
                    "mean_rows" => self.mean_rows(a),
                    _ => self.logsumexp(a),
                }
            }
            other => Err(Error::UnregisteredPrimitive(other.to_string())),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), v)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    /// Adds a constant.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::Shift(a), v)
    }

    /// Multiplies every entry by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.want_scalar("scale_by", s)?;
        let v = self.value(a).map(|x| c * x);
        self.push(Op::ScaleBy(a, s), v)
    }

    /// Adds the `1 x 1` node `s` to every entry.
    pub fn shift_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.want_scalar("shift_by", s)?;
        let v = self.value(a).map(|x| x + c);
        self.push(Op::ShiftBy(a, s), v)
    }

    /// Adds the row vector `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        if self.shape(r) != (1, c) {
            return Err(Error::contract(format!(
                "add_row: row {:?} does not fit {n}x{c}",
                self.shape(r)
            )));
        }
        let row = self.value(r).as_slice().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.as_mut_slice().iter_mut().enumerate() {
            *x += row[i % c];
        }
        self.push(Op::AddRow(a, r), v)
    }

    /// Adds the `1 x 1` node `s` to the diagonal of square `a`.
    pub fn add_diag(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.want_scalar("add_diag", s)?;
        if !self.value(a).is_square() {
            return Err(Error::contract("add_diag: matrix is not square"));
        }
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            v[(i, i)] += c;
        }
        self.push(Op::AddDiag(a, s), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(Error::contract(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    /// `max(0, x)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    /// `max(floor, x)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > floor { x } else { floor });
        self.push(Op::ClampMin(a, floor), v)
    }

    pub fn norm_pdf(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(std_normal_pdf);
        self.push(Op::NormPdf(a), v)
    }

    pub fn norm_cdf(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(std_normal_cdf);
        self.push(Op::NormCdf(a), v)
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (n x d)
    /// and the rows of `b` (m x d), as an n x m matrix.
    pub fn sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.shape(a);
        let (m, d2) = self.shape(b);
        if d != d2 {
            return Err(Error::contract(format!("sqdist: widths {d} and {d2} differ")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let ra = va.row(i);
            for j in 0..m {
                let rb = vb.row(j);
                out[(i, j)] = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        self.push(Op::SqDist(a, b), out)
    }

    /// Lower Cholesky factor of the symmetric part of `a`, with jitter
    /// escalation on failure.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = self.value(a).cholesky()?;
        self.push(Op::Cholesky(a), l)
    }

    /// `L^{-1} B` for lower-triangular `l`.
    pub fn trisolve(&mut self, l: Var, b: Var) -> Result<Var> {
        let (n, n2) = self.shape(l);
        if n != n2 || self.shape(b).0 != n {
            return Err(Error::contract(format!(
                "trisolve: {:?} against {:?}",
                self.shape(l),
                self.shape(b)
            )));
        }
        let x = self.value(l).solve_lower(self.value(b));
        self.push(Op::TriSolve(l, b), x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Column sums as a `1 x cols` row.
    pub fn column_sums(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).column_sums();
        self.push(Op::ColumnSums(a), v)
    }

    /// Mean of the rows as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).0;
        if n == 0 {
            return Err(Error::contract("mean_rows of an empty matrix"));
        }
        let v = self.value(a).column_sums().map(|x| x / n as f64);
        self.push(Op::MeanRows(a), v)
    }

    /// `log(sum(exp(a)))` over all entries, computed with max-subtraction.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::contract("logsumexp of an empty matrix"));
        }
        let m = va.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = va.as_slice().iter().map(|x| (x - m).exp()).sum();
        let v = Matrix::scalar(m + s.ln());
        self.push(Op::LogSumExp(a), v)
    }

    /// Picks entries by flat (row-major) index into a `k x 1` column.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.len()) {
            return Err(Error::contract(format!(
                "gather: index {bad} out of {}",
                va.len()
            )));
        }
        let v = Matrix::column(indices.iter().map(|&i| va.as_slice()[i]).collect());
        self.push(Op::Gather(a, indices.to_vec()), v)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (n, c) = va.shape();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::contract(format!("select_rows: row {r} out of {n}")));
            }
            data.extend_from_slice(va.row(r));
        }
        let v = Matrix::from_vec(rows.len(), c, data)?;
        self.push(Op::SelectRows(a, rows.to_vec()), v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = self.shape(a);
        let (n2, cb) = self.shape(b);
        if n != n2 {
            return Err(Error::contract(format!(
                "concat_cols: {n} rows against {n2}"
            )));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let v = Matrix::from_vec(n, ca + cb, data)?;
        self.push(Op::ConcatCols(a, b), v)
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != 1 {
            return Err(Error::contract("tile_rows needs a single row"));
        }
        let c = va.cols();
        let data: Vec<f64> = (0..n).flat_map(|_| va.as_slice().iter().cloned()).collect();
        let v = Matrix::from_vec(n, c, data)?;
        self.push(Op::TileRows(a), v)
    }

    /// Gradient of the single designated scalar loss with respect to the
    /// bound parameters. Unused parameters receive 0.
    pub fn backward(&self) -> Result<ParameterVector> {
        match self.loss.as_slice() {
            [loss] => self.gradient(*loss),
            other => Err(Error::contract(format!(
                "backward needs exactly one loss output, tape has {}",
                other.len()
            ))),
        }
    }

    /// Gradient of the scalar node `loss` with respect to the bound
    /// parameters.
    pub fn gradient(&self, loss: Var) -> Result<ParameterVector> {
        self.gradient_weighted(&[(loss, 1.0)])
    }

    /// Gradient of `sum_i w_i * v_i` for scalar nodes `v_i`, in one
    /// backward sweep.
    pub fn gradient_weighted(&self, terms: &[(Var, f64)]) -> Result<ParameterVector> {
        for &(v, _) in terms {
            if self.shape(v) != (1, 1) {
                return Err(Error::contract(format!(
                    "loss must be a scalar, got {:?}",
                    self.shape(v)
                )));
            }
        }
        let adjoints = self.adjoints(terms);
        let layout = self
            .layout
            .clone()
            .unwrap_or_else(|| Layout::builder().build());
        let mut grad = ParameterVector::zeros(layout);
        for (node, adj) in self.nodes.iter().zip(&adjoints) {
            if let (Op::Param { offset }, Some(g)) = (&node.op, adj) {
                let dst = &mut grad.values_mut()[*offset..*offset + g.len()];
                for (d, x) in dst.iter_mut().zip(g.as_slice()) {
                    *d += x;
                }
            }
        }
        Ok(grad)
    }

    /// Adjoint of every node with respect to `loss` (None when unreachable).
    pub fn adjoints_of(&self, loss: Var) -> Vec<Option<Matrix>> {
        self.adjoints(&[(loss, 1.0)])
    }

    fn adjoints(&self, seeds: &[(Var, f64)]) -> Vec<Option<Matrix>> {
        let Some(last) = seeds.iter().map(|(v, _)| v.0).max() else {
            return vec![None; self.nodes.len()];
        };
        let mut adj: Vec<Option<Matrix>> = vec![None; last + 1];
        for &(v, w) in seeds {
            let slot = adj[v.0].get_or_insert_with(|| Matrix::scalar(0.0));
            slot.as_mut_slice()[0] += w;
        }
        for idx in (0..=last).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        adj.resize(self.nodes.len(), None);
        adj
    }

    fn propagate(&self, idx: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        fn acc(adj: &mut [Option<Matrix>], v: Var, d: Matrix) {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        }
        let out = &self.nodes[idx].value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[idx].op {
            Op::Constant | Op::Param { .. } => {}
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(adj, *a, g.zip_map(val(*b), |x, y| x * y));
                acc(adj, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                acc(adj, *a, g.zip_map(val(*b), |x, y| x / y));
                let mut gb = g.zip_map(out, |x, o| x * o);
                gb = gb.zip_map(val(*b), |x, y| -x / y);
                acc(adj, *b, gb);
            }
            Op::Neg(a) => acc(adj, *a, g.map(|x| -x)),
            Op::Scale(a, c) => acc(adj, *a, g.map(|x| c * x)),
            Op::Shift(a) => acc(adj, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let c = val(*s).as_slice()[0];
                acc(adj, *a, g.map(|x| c * x));
                let ds: f64 = g.as_slice().iter().zip(val(*a).as_slice()).map(|(x, y)| x * y).sum();
                acc(adj, *s, Matrix::scalar(ds));
            }
            Op::ShiftBy(a, s) => {
                acc(adj, *a, g.clone());
                acc(adj, *s, Matrix::scalar(g.sum()));
            }
            Op::AddRow(a, r) => {
                acc(adj, *a, g.clone());
                acc(adj, *r, g.column_sums());
            }
            Op::AddDiag(a, s) => {
                acc(adj, *a, g.clone());
                let tr: f64 = (0..g.rows()).map(|i| g[(i, i)]).sum();
                acc(adj, *s, Matrix::scalar(tr));
            }
            Op::MatMul(a, b) => {
                acc(adj, *a, g.matmul(&val(*b).transpose()));
                acc(adj, *b, val(*a).transpose().matmul(g));
            }
            Op::Transpose(a) => acc(adj, *a, g.transpose()),
            Op::Exp(a) => acc(adj, *a, g.zip_map(out, |x, o| x * o)),
            Op::Log(a) => acc(adj, *a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Sqrt(a) => acc(adj, *a, g.zip_map(out, |x, o| 0.5 * x / o)),
            Op::Relu(a) => acc(
                adj,
                *a,
                g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::ClampMin(a, floor) => acc(
                adj,
                *a,
                g.zip_map(val(*a), |x, y| if y > *floor { x } else { 0.0 }),
            ),
            Op::NormPdf(a) => acc(
                adj,
                *a,
                g.zip_map(val(*a), |x, y| -x * y * std_normal_pdf(y)),
            ),
            Op::NormCdf(a) => acc(adj, *a, g.zip_map(val(*a), |x, y| x * std_normal_pdf(y))),
            Op::SqDist(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (n, d) = va.shape();
                let m = vb.rows();
                let mut ga = Matrix::zeros(n, d);
                let mut gb = Matrix::zeros(m, d);
                for i in 0..n {
                    for j in 0..m {
                        let gij = 2.0 * g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = va[(i, k)] - vb[(j, k)];
                            ga[(i, k)] += gij * diff;
                            gb[(j, k)] -= gij * diff;
                        }
                    }
                }
                acc(adj, *a, ga);
                acc(adj, *b, gb);
            }
            Op::Cholesky(a) => acc(adj, *a, cholesky_adjoint(out, g)),
            Op::TriSolve(l, b) => {
                let lv = val(*l);
                let gb = lv.solve_lower_transpose(g);
                let gl = gb.matmul(&out.transpose()).map(|x| -x).lower_triangle();
                acc(adj, *l, gl);
                acc(adj, *b, gb);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(adj, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::ColumnSums(a) | Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let w = if matches!(self.nodes[idx].op, Op::MeanRows(_)) {
                    1.0 / r as f64
                } else {
                    1.0
                };
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        ga[(i, j)] = w * g.as_slice()[j];
                    }
                }
                acc(adj, *a, ga);
            }
            Op::LogSumExp(a) => {
                let lse = out.as_slice()[0];
                let gs = g.as_slice()[0];
                acc(adj, *a, val(*a).map(|x| gs * (x - lse).exp()));
            }
            Op::Gather(a, indices) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    ga.as_mut_slice()[i] += g.as_slice()[k];
                }
                acc(adj, *a, ga);
            }
            Op::SelectRows(a, rows) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga[(row, j)] += g[(k, j)];
                    }
                }
                acc(adj, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let n = g.rows();
                let mut ga = Matrix::zeros(n, ca);
                let mut gb = Matrix::zeros(n, cb);
                for i in 0..n {
                    for j in 0..ca {
                        ga[(i, j)] = g[(i, j)];
                    }
                    for j in 0..cb {
                        gb[(i, j)] = g[(i, ca + j)];
                    }
                }
                acc(adj, *a, ga);
                acc(adj, *b, gb);
            }
            Op::TileRows(a) => acc(adj, *a, g.column_sums()),
        }
    }
}

/// Adjoint of `A` for `L = chol(sym(A))` given the adjoint of `L`:
/// `S = L^{-T} Phi(L^T Lbar) L^{-1}`, returned symmetrized, where `Phi`
/// keeps the lower triangle and halves the diagonal.
fn cholesky_adjoint(l: &Matrix, lbar: &Matrix) -> Matrix {
    let n = l.rows();
    let mut p = l.transpose().matmul(&lbar.lower_triangle()).lower_triangle();
    for i in 0..n {
        p[(i, i)] *= 0.5;
    }
    // S = L^{-T} P L^{-1}: solve L^T Y = P, then S^T = L^{-T} Y^T
    let y = l.solve_lower_transpose(&p);
    let s = l.solve_lower_transpose(&y.transpose()).transpose();
    let st = s.transpose();
    s.zip_map(&st, |a, b| 0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> ParameterVector {
        let layout = Layout::builder().push("x", 1, 1).build();
        ParameterVector::from_values(layout, vec![x]).unwrap()
    }

    #[test]
    fn square_forward_and_gradient() {
        let mut tape = Tape::new();
        let p = tape.bind(&scalar_param(3.0)).unwrap();
        let x = p.get("x").unwrap();
        let y = tape.mul(x, x).unwrap();
        tape.set_loss(y);
        assert_eq!(tape.scalar(y).unwrap(), 9.0);
        assert_eq!(tape.backward().unwrap().values(), &[6.0]);
    }

    #[test]
    fn relu_branches() {
        let mut tape = Tape::new();
        let p = tape.bind(&scalar_param(-2.0)).unwrap();
        let y = tape.relu(p.get("x").unwrap()).unwrap();
        assert_eq!(tape.scalar(y).unwrap(), 0.0);

        let mut tape = Tape::new();
        let p = tape.bind(&scalar_param(0.0)).unwrap();
        let y = tape.relu(p.get("x").unwrap()).unwrap();
        tape.set_loss(y);
        assert_eq!(tape.backward().unwrap().values(), &[0.0]);
    }

    #[test]
    fn identity_cholesky_diagonal_sums_to_n() {
        let mut tape = Tape::new();
        let i4 = tape.constant(Matrix::identity(4)).unwrap();
        let l = tape.cholesky(i4).unwrap();
        let s = tape.sum(l).unwrap();
        assert_eq!(tape.scalar(s).unwrap(), 4.0);
    }

    #[test]
    fn unregistered_primitive_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant_scalar(1.0).unwrap();
        assert!(matches!(
            tape.apply("tanh", &[x]),
            Err(Error::UnregisteredPrimitive(name)) if name == "tanh"
        ));
        let e = tape.apply("exp", &[x]).unwrap();
        assert_eq!(tape.scalar(e).unwrap(), 1f64.exp());
    }

    #[test]
    fn nan_taints_named_node() {
        let mut tape = Tape::new();
        let x = tape.constant_scalar(-1.0).unwrap();
        match tape.sqrt(x) {
            Err(Error::Tainted { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "sqrt");
            }
            other => panic!("expected taint, got {other:?}"),
        }
    }

    #[test]
    fn backward_requires_single_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.bind(&scalar_param(1.0)).unwrap();
        let x = p.get("x").unwrap();
        assert!(tape.backward().is_err());
        let xs = tape.tile_rows(x, 3).unwrap();
        tape.set_loss(xs);
        assert!(matches!(tape.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_parameters_get_zero() {
        let layout = Layout::builder().push("a", 1, 1).push("b", 2, 1).build();
        let pv = ParameterVector::from_values(layout, vec![2.0, 1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let p = tape.bind(&pv).unwrap();
        let a = p.get("a").unwrap();
        let y = tape.exp(a).unwrap();
        tape.set_loss(y);
        let g = tape.backward().unwrap();
        assert_eq!(g.get("b").unwrap(), &[0.0, 0.0]);
        assert_eq!(g.get("a").unwrap(), &[2f64.exp()]);
    }

    #[test]
    fn tape_matches_direct_arithmetic_bitwise() {
        let (a, b) = (0.37_f64, -1.9_f64);
        let direct = ((a * b).exp() + a.sqrt()).ln() * 0.5;
        let mut tape = Tape::new();
        let va = tape.constant_scalar(a).unwrap();
        let vb = tape.constant_scalar(b).unwrap();
        let ab = tape.mul(va, vb).unwrap();
        let e = tape.exp(ab).unwrap();
        let s = tape.sqrt(va).unwrap();
        let t = tape.add(e, s).unwrap();
        let l = tape.log(t).unwrap();
        let out = tape.scale(l, 0.5).unwrap();
        assert_eq!(tape.scalar(out).unwrap().to_bits(), direct.to_bits());
    }
}
