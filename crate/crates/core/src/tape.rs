//! Reverse-mode automatic differentiation over a tape of matrix-valued nodes.
//!
//! Values are `f64` matrices; scalars are 1x1. The backward pass emits its
//! intermediate products as ordinary tape nodes, so a gradient is itself
//! differentiable: calling [`Tape::grad`] on an expression built from the
//! output of a previous `grad` call yields exact second-order derivatives.
//! That is what the gradient-penalty term needs.

use ndarray::{Array2, Axis};
use ndarray::parallel::prelude::*;

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Input,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    Hadamard(Var, Var),
    /// `a^(ta) . b^(tb)` where `^(t)` transposes when the flag is set.
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `(m,n) + (1,n)` broadcast over rows.
    AddRow(Var, Var),
    LRelu(Var, f64),
    /// Pointwise derivative of `LRelu`; its own derivative is zero
    /// everywhere, including the kink.
    LReluGrad(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    PowConst(Var, f64),
    Sum(Var),
    RowSum(Var),
    ColSum(Var),
    BcastScalar { s: Var, rows: usize, cols: usize },
    BcastCol { v: Var, cols: usize },
    BcastRow { v: Var, rows: usize },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Append-only record of a computation. Single-writer; distinct tapes may be
/// used concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Dense matmul with optional transposes. Output rows are processed in fixed
/// 64-row chunks (in parallel when a rayon pool is available); the chunking
/// does not depend on thread count, so results are bitwise reproducible.
pub fn matmul_tt(a: &Matrix, b: &Matrix, ta: bool, tb: bool) -> Matrix {
    let av = if ta { a.t() } else { a.view() };
    let bv = if tb { b.t() } else { b.view() };
    assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimensions differ");
    let m = av.nrows();
    if m < 128 {
        return av.dot(&bv);
    }
    let mut out = Matrix::zeros((m, bv.ncols()));
    out.axis_chunks_iter_mut(Axis(0), 64)
        .into_par_iter()
        .zip(av.axis_chunks_iter(Axis(0), 64).into_par_iter())
        .for_each(|(mut oc, ac)| {
            ndarray::linalg::general_mat_mul(1.0, &ac, &bv, 0.0, &mut oc);
        });
    out
}

fn softplus_scalar(u: f64) -> f64 {
    // max(u,0) + ln(1+e^{-|u|}) avoids overflow for large |u|.
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn sigmoid_scalar(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn pow_const_value(x: &Matrix, p: f64) -> Matrix {
    if p == 1.0 {
        x.clone()
    } else if p == 2.0 {
        x.mapv(|t| t * t)
    } else if p == 0.5 {
        x.mapv(f64::sqrt)
    } else if p == -1.0 {
        x.mapv(f64::recip)
    } else {
        x.mapv(|t| t.powf(p))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        assert_eq!(m.dim(), (1, 1), "node is not scalar-valued");
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn is_input(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Input)
    }

    fn push_with_value(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn eval_here(&self, op: &Op) -> Matrix {
        let values: Vec<&Matrix> = self.nodes.iter().map(|n| &n.value).collect();
        eval_op_refs(&values, op)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.push_with_value(Op::Input, value)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_with_value(Op::Const, value)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), v))
    }

    fn emit(&mut self, op: Op) -> Var {
        let value = self.eval_here(&op);
        self.push_with_value(op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        self.emit(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        self.emit(Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.emit(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.emit(Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.emit(Op::AddConst(a, c))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "hadamard shape mismatch");
        self.emit(Op::Hadamard(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_tt_var(a, b, false, false)
    }

    pub fn matmul_tt_var(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        assert_eq!(inner_a, inner_b, "matmul inner dimensions differ");
        self.emit(Op::MatMul { a, b, ta, tb })
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, n) = self.shape(x);
        assert_eq!(self.shape(row), (1, n), "row bias shape mismatch");
        self.emit(Op::AddRow(x, row))
    }

    pub fn lrelu(&mut self, x: Var, slope: f64) -> Var {
        self.emit(Op::LRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.lrelu(x, 0.0)
    }

    /// min(0, x) = -max(0, -x)
    pub fn min_zero(&mut self, x: Var) -> Var {
        let nx = self.neg(x);
        let r = self.relu(nx);
        self.neg(r)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.emit(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.emit(Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.emit(Op::Softplus(x))
    }

    pub fn pow_const(&mut self, x: Var, p: f64) -> Var {
        self.emit(Op::PowConst(x, p))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.pow_const(x, 2.0)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.pow_const(x, 0.5)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.emit(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let s = self.sum(x);
        self.scale(s, 1.0 / (m * n) as f64)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        self.emit(Op::RowSum(x))
    }

    pub fn col_sum(&mut self, x: Var) -> Var {
        self.emit(Op::ColSum(x))
    }

    pub fn bcast_scalar(&mut self, s: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(s), (1, 1), "broadcast source must be scalar");
        self.emit(Op::BcastScalar { s, rows, cols })
    }

    pub fn bcast_col(&mut self, v: Var, cols: usize) -> Var {
        assert_eq!(self.shape(v).1, 1, "broadcast source must be a column");
        self.emit(Op::BcastCol { v, cols })
    }

    pub fn bcast_row(&mut self, v: Var, rows: usize) -> Var {
        assert_eq!(self.shape(v).0, 1, "broadcast source must be a row");
        self.emit(Op::BcastRow { v, rows })
    }

    /// Per-row euclidean norm of `x`: `(m,n) -> (m,1)`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        let rs = self.row_sum(sq);
        self.sqrt(rs)
    }

    /// Reverse-mode gradient of a scalar `target` with respect to input
    /// nodes, returned as tape nodes (hence differentiable again).
    pub fn grad(&mut self, target: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.shape(target) != (1, 1) {
            return Err(Error::Contract(format!(
                "grad target must be scalar, got shape {:?}",
                self.shape(target)
            )));
        }
        for &w in wrt {
            if !self.is_input(w) {
                return Err(Error::Contract(format!(
                    "grad wrt node {} is not an input",
                    w.0
                )));
            }
        }

        let frontier = target.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; frontier];
        adj[target.0] = Some(self.scalar_const(1.0));

        for i in (0..frontier).rev() {
            let Some(d) = adj[i] else { continue };
            let op = self.nodes[i].op;
            match op {
                Op::Input | Op::Const => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, d);
                    self.accumulate(&mut adj, b, d);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, d);
                    let nd = self.neg(d);
                    self.accumulate(&mut adj, b, nd);
                }
                Op::Neg(a) => {
                    let nd = self.neg(d);
                    self.accumulate(&mut adj, a, nd);
                }
                Op::Scale(a, c) => {
                    let sd = self.scale(d, c);
                    self.accumulate(&mut adj, a, sd);
                }
                Op::AddConst(a, _) => {
                    self.accumulate(&mut adj, a, d);
                }
                Op::Hadamard(a, b) => {
                    let da = self.hadamard(d, b);
                    self.accumulate(&mut adj, a, da);
                    let db = self.hadamard(d, a);
                    self.accumulate(&mut adj, b, db);
                }
                Op::MatMul { a, b, ta, tb } => {
                    if self.wants_grad(a) {
                        let da = if ta {
                            self.matmul_tt_var(b, d, tb, true)
                        } else {
                            self.matmul_tt_var(d, b, false, !tb)
                        };
                        self.accumulate(&mut adj, a, da);
                    }
                    if self.wants_grad(b) {
                        let db = if tb {
                            self.matmul_tt_var(d, a, true, ta)
                        } else {
                            self.matmul_tt_var(a, d, !ta, false)
                        };
                        self.accumulate(&mut adj, b, db);
                    }
                }
                Op::AddRow(x, r) => {
                    self.accumulate(&mut adj, x, d);
                    if self.wants_grad(r) {
                        let dr = self.col_sum(d);
                        self.accumulate(&mut adj, r, dr);
                    }
                }
                Op::LRelu(x, slope) => {
                    let g = self.emit(Op::LReluGrad(x, slope));
                    let dx = self.hadamard(d, g);
                    self.accumulate(&mut adj, x, dx);
                }
                // Zero second derivative everywhere by definition.
                Op::LReluGrad(_, _) => {}
                Op::Tanh(x) => {
                    let y = Var(i);
                    let ysq = self.square(y);
                    let nysq = self.neg(ysq);
                    let one_m = self.add_const(nysq, 1.0);
                    let dx = self.hadamard(d, one_m);
                    self.accumulate(&mut adj, x, dx);
                }
                Op::Sigmoid(x) => {
                    let s = Var(i);
                    let ns = self.neg(s);
                    let om = self.add_const(ns, 1.0);
                    let sp = self.hadamard(s, om);
                    let dx = self.hadamard(d, sp);
                    self.accumulate(&mut adj, x, dx);
                }
                Op::Softplus(x) => {
                    let s = self.sigmoid(x);
                    let dx = self.hadamard(d, s);
                    self.accumulate(&mut adj, x, dx);
                }
                Op::PowConst(x, p) => {
                    let dx = if p == 1.0 {
                        d
                    } else if p == 2.0 {
                        let two_x = self.scale(x, 2.0);
                        self.hadamard(d, two_x)
                    } else {
                        let xp = self.pow_const(x, p - 1.0);
                        let sxp = self.scale(xp, p);
                        self.hadamard(d, sxp)
                    };
                    self.accumulate(&mut adj, x, dx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(x);
                    let dx = self.bcast_scalar(d, r, c);
                    self.accumulate(&mut adj, x, dx);
                }
                Op::RowSum(x) => {
                    let (_, c) = self.shape(x);
                    let dx = self.bcast_col(d, c);
                    self.accumulate(&mut adj, x, dx);
                }
                Op::ColSum(x) => {
                    let (r, _) = self.shape(x);
                    let dx = self.bcast_row(d, r);
                    self.accumulate(&mut adj, x, dx);
                }
                Op::BcastScalar { s, .. } => {
                    let ds = self.sum(d);
                    self.accumulate(&mut adj, s, ds);
                }
                Op::BcastCol { v, .. } => {
                    let dv = self.row_sum(d);
                    self.accumulate(&mut adj, v, dv);
                }
                Op::BcastRow { v, .. } => {
                    let dv = self.col_sum(d);
                    self.accumulate(&mut adj, v, dv);
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| match adj[w.0] {
                Some(v) => v,
                None => {
                    let (r, c) = self.shape(w);
                    self.constant(Matrix::zeros((r, c)))
                }
            })
            .collect())
    }

    /// Gradient values (not nodes) for callers that only need numbers.
    pub fn grad_values(&mut self, target: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        let vars = self.grad(target, wrt)?;
        Ok(vars.into_iter().map(|v| self.value(v).clone()).collect())
    }

    /// Gradient of `||grad_x target||_2^2` (summed over rows of `x`) with
    /// respect to `wrt`. `target` must be scalar; per-sample input gradients
    /// are obtained by summing a per-row output before calling this.
    pub fn grad_of_grad_norm(&mut self, target: Var, x: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let gx = self.grad(target, &[x])?[0];
        let sq = self.square(gx);
        let nsq = self.sum(sq);
        self.grad(nsq, wrt)
    }

    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Const)
    }

    fn accumulate(&mut self, adj: &mut Vec<Option<Var>>, parent: Var, contribution: Var) {
        if matches!(self.nodes[parent.0].op, Op::Const) {
            return;
        }
        debug_assert!(parent.0 < adj.len(), "parents precede children");
        adj[parent.0] = Some(match adj[parent.0] {
            Some(prev) => self.add(prev, contribution),
            None => contribution,
        });
    }

    /// Recompute every node from the recorded leaves, in order. The result
    /// must match the recorded values bit for bit.
    pub fn replay(&self) -> Vec<Matrix> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Input | Op::Const => node.value.clone(),
                ref op => {
                    let refs: Vec<&Matrix> = values.iter().collect();
                    eval_op_refs(&refs, op)
                }
            };
            values.push(v);
        }
        values
    }
}

fn eval_op_refs(values: &[&Matrix], op: &Op) -> Matrix {
    match *op {
        Op::Input | Op::Const => unreachable!("leaf nodes carry their value"),
        Op::Add(a, b) => values[a.0] + values[b.0],
        Op::Sub(a, b) => values[a.0] - values[b.0],
        Op::Neg(a) => values[a.0].mapv(|t| -t),
        Op::Scale(a, c) => values[a.0].mapv(|t| c * t),
        Op::AddConst(a, c) => values[a.0].mapv(|t| t + c),
        Op::Hadamard(a, b) => values[a.0] * values[b.0],
        Op::MatMul { a, b, ta, tb } => matmul_tt(values[a.0], values[b.0], ta, tb),
        Op::AddRow(x, r) => {
            let row = values[r.0].row(0);
            let mut out = values[x.0].clone();
            for mut orow in out.rows_mut() {
                orow += &row;
            }
            out
        }
        Op::LRelu(x, slope) => values[x.0].mapv(|t| if t > 0.0 { t } else { slope * t }),
        Op::LReluGrad(x, slope) => values[x.0].mapv(|t| if t > 0.0 { 1.0 } else { slope }),
        Op::Tanh(x) => values[x.0].mapv(f64::tanh),
        Op::Sigmoid(x) => values[x.0].mapv(sigmoid_scalar),
        Op::Softplus(x) => values[x.0].mapv(softplus_scalar),
        Op::PowConst(x, p) => pow_const_value(values[x.0], p),
        Op::Sum(x) => Matrix::from_elem((1, 1), values[x.0].sum()),
        Op::RowSum(x) => {
            let s = values[x.0].sum_axis(Axis(1));
            let n = s.len();
            s.into_shape_with_order((n, 1)).expect("row sum shape")
        }
        Op::ColSum(x) => {
            let s = values[x.0].sum_axis(Axis(0));
            let n = s.len();
            s.into_shape_with_order((1, n)).expect("col sum shape")
        }
        Op::BcastScalar { s, rows, cols } => Matrix::from_elem((rows, cols), values[s.0][(0, 0)]),
        Op::BcastCol { v, cols } => {
            let col = values[v.0];
            let mut out = Matrix::zeros((col.nrows(), cols));
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                row.fill(col[(i, 0)]);
            }
            out
        }
        Op::BcastRow { v, rows } => {
            let r = values[v.0];
            let mut out = Matrix::zeros((rows, r.ncols()));
            for mut row in out.rows_mut() {
                row.assign(&r.row(0));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.scalar_value(v)
    }

    #[test]
    fn square_gradient_matches_polynomial_rule() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_elem((1, 1), 3.0));
        let y = tape.square(x);
        let g = tape.grad(y, &[x]).unwrap();
        assert_eq!(scalar(&tape, g[0]), 6.0);
    }

    #[test]
    fn lrelu_gradient_on_negative_side_is_slope() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_elem((1, 1), -1.0));
        let y = tape.lrelu(x, 0.2);
        let s = tape.sum(y);
        let g = tape.grad(s, &[x]).unwrap();
        assert_eq!(scalar(&tape, g[0]), 0.2);
    }

    #[test]
    fn grad_rejects_non_scalar_target() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::zeros((2, 2)));
        let y = tape.scale(x, 2.0);
        assert!(tape.grad(y, &[x]).is_err());
    }

    #[test]
    fn grad_rejects_non_input_wrt() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::zeros((1, 1)));
        let y = tape.scale(x, 2.0);
        let s = tape.sum(y);
        assert!(tape.grad(s, &[y]).is_err());
    }

    #[test]
    fn unreachable_input_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_elem((1, 1), 1.0));
        let z = tape.input(Matrix::from_elem((2, 3), 5.0));
        let y = tape.square(x);
        let g = tape.grad(y, &[z]).unwrap();
        assert_eq!(tape.shape(g[0]), (2, 3));
        assert!(tape.value(g[0]).iter().all(|&t| t == 0.0));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut t1 = Tape::new();
        let vals = Matrix::from_shape_vec((1, 3), vec![0.3, -1.2, 2.0]).unwrap();
        let x1 = t1.input(vals.clone());
        let a = t1.tanh(x1);
        let sa = t1.sum(a);
        let ga = t1.grad(sa, &[x1]).unwrap()[0];

        let b = t1.softplus(x1);
        let sb = t1.sum(b);
        let gb = t1.grad(sb, &[x1]).unwrap()[0];

        let mut t2 = Tape::new();
        let x2 = t2.input(vals);
        let a2 = t2.tanh(x2);
        let b2 = t2.softplus(x2);
        let both = t2.add(a2, b2);
        let s = t2.sum(both);
        let g = t2.grad(s, &[x2]).unwrap()[0];

        let expect = t1.value(ga) + t1.value(gb);
        assert_eq!(t2.value(g), &expect);
    }

    // Builds a random graph exercising every differentiable op, returning a
    // scalar from a flat input vector.
    fn random_graph_value(flat: &[f64], rows: usize, cols: usize, variant: u8) -> f64 {
        let x = Matrix::from_shape_vec((rows, cols), flat.to_vec()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let v = random_graph_on(&mut tape, xv, rows, cols, variant);
        tape.scalar_value(v)
    }

    fn random_graph_on(tape: &mut Tape, xv: Var, rows: usize, cols: usize, variant: u8) -> Var {
        let lin = tape.scale(xv, 0.7);
        let lin = tape.add_const(lin, 0.1);
        let h = match variant % 5 {
            0 => tape.tanh(lin),
            1 => tape.lrelu(lin, 0.2),
            2 => tape.softplus(lin),
            3 => tape.sigmoid(lin),
            _ => {
                let sq = tape.square(lin);
                tape.add_const(sq, 0.5)
            }
        };
        let had = tape.hadamard(h, lin);
        let hsq = tape.square(had);
        let rs = tape.row_sum(hsq);
        let rn = tape.add_const(rs, 1.75);
        let rn = tape.sqrt(rn);
        let bc = tape.bcast_col(rn, cols);
        let mixed = tape.add(bc, h);
        let cs = tape.col_sum(mixed);
        let br = tape.bcast_row(cs, rows);
        let prod = tape.hadamard(br, mixed);
        let neg = tape.neg(prod);
        let diff = tape.sub(prod, neg);
        let m = tape.mean(diff);
        let back = tape.bcast_scalar(m, rows, cols);
        let together = tape.add(back, mixed);
        tape.sum(together)
    }

    #[test]
    fn random_graphs_match_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..60u8 {
            let rows = rng.random_range(1..4usize);
            let cols = rng.random_range(1..5usize);
            let flat: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect();
            let variant = case;

            let mut tape = Tape::new();
            let xv = tape.input(Matrix::from_shape_vec((rows, cols), flat.clone()).unwrap());
            let out = random_graph_on(&mut tape, xv, rows, cols, variant);
            let g = tape.grad(out, &[xv]).unwrap()[0];
            let analytic: Vec<f64> = tape.value(g).iter().copied().collect();

            let fd = reference::central_difference(
                |p| random_graph_value(p, rows, cols, variant),
                &flat,
                1e-5,
            );
            for (a, f) in analytic.iter().zip(&fd) {
                let denom = f.abs().max(1e-6);
                assert!(
                    (a - f).abs() / denom < 1e-5,
                    "case {case}: ad {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients_cover_all_transpose_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let (m, k, n) = (2usize, 3usize, 2usize);
            let a_shape = if ta { (k, m) } else { (m, k) };
            let b_shape = if tb { (n, k) } else { (k, n) };
            let a_flat: Vec<f64> = (0..a_shape.0 * a_shape.1)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let b_flat: Vec<f64> = (0..b_shape.0 * b_shape.1)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();

            let eval = |af: &[f64], bf: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let av = tape.input(Matrix::from_shape_vec(a_shape, af.to_vec()).unwrap());
                let bv = tape.input(Matrix::from_shape_vec(b_shape, bf.to_vec()).unwrap());
                let c = tape.matmul_tt_var(av, bv, ta, tb);
                let sq = tape.square(c);
                let s = tape.sum(sq);
                tape.scalar_value(s)
            };

            let mut tape = Tape::new();
            let av = tape.input(Matrix::from_shape_vec(a_shape, a_flat.clone()).unwrap());
            let bv = tape.input(Matrix::from_shape_vec(b_shape, b_flat.clone()).unwrap());
            let c = tape.matmul_tt_var(av, bv, ta, tb);
            let sq = tape.square(c);
            let s = tape.sum(sq);
            let grads = tape.grad(s, &[av, bv]).unwrap();

            let fd_a = reference::central_difference(|p| eval(p, &b_flat), &a_flat, 1e-6);
            let fd_b = reference::central_difference(|p| eval(&a_flat, p), &b_flat, 1e-6);
            for (a, f) in tape.value(grads[0]).iter().zip(&fd_a) {
                assert_relative_eq!(*a, *f, max_relative = 1e-6, epsilon = 1e-9);
            }
            for (b, f) in tape.value(grads[1]).iter().zip(&fd_b) {
                assert_relative_eq!(*b, *f, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn second_order_linear_map_gradient_norm() {
        // D(x) = x w^T: ||grad_x D||^2 = ||w||^2, d/dw = 2w regardless of x.
        let w0 = vec![0.4, -1.3, 2.2];
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_shape_vec((1, 3), vec![5.0, -2.0, 0.3]).unwrap());
        let w = tape.input(Matrix::from_shape_vec((1, 3), w0.clone()).unwrap());
        let y = tape.matmul_tt_var(x, w, false, true);
        let s = tape.sum(y);
        let g2 = tape.grad_of_grad_norm(s, x, &[w]).unwrap();
        let got: Vec<f64> = tape.value(g2[0]).iter().copied().collect();
        for (g, w) in got.iter().zip(&w0) {
            assert_relative_eq!(*g, 2.0 * w, max_relative = 1e-12);
        }
    }

    #[test]
    fn second_order_matches_finite_differences_through_nonlinearity() {
        // f(w) = || grad_x sum(tanh(x w^T)) ||^2 for a single-row x.
        let x0 = vec![0.3, -0.8];
        let w0 = vec![0.9, 0.5];

        let norm_sq = |wf: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.input(Matrix::from_shape_vec((1, 2), x0.clone()).unwrap());
            let w = tape.input(Matrix::from_shape_vec((1, 2), wf.to_vec()).unwrap());
            let z = tape.matmul_tt_var(x, w, false, true);
            let y = tape.tanh(z);
            let s = tape.sum(y);
            let gx = tape.grad(s, &[x]).unwrap()[0];
            let sq = tape.square(gx);
            let nsq = tape.sum(sq);
            tape.scalar_value(nsq)
        };

        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_shape_vec((1, 2), x0.clone()).unwrap());
        let w = tape.input(Matrix::from_shape_vec((1, 2), w0.clone()).unwrap());
        let z = tape.matmul_tt_var(x, w, false, true);
        let y = tape.tanh(z);
        let s = tape.sum(y);
        let g2 = tape.grad_of_grad_norm(s, x, &[w]).unwrap();
        let analytic: Vec<f64> = tape.value(g2[0]).iter().copied().collect();

        let fd = reference::central_difference(|p| norm_sq(p), &w0, 1e-6);
        for (a, f) in analytic.iter().zip(&fd) {
            assert_relative_eq!(*a, *f, max_relative = 1e-6, epsilon = 1e-10);
        }
    }

    #[test]
    fn replay_reproduces_recorded_values_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)));
        let out = random_graph_on(&mut tape, x, 3, 4, 2);
        let _ = tape.grad(out, &[x]).unwrap();
        let replayed = tape.replay();
        for i in 0..tape.len() {
            let v = Var(i);
            assert_eq!(tape.value(v), &replayed[i], "node {i} differs on replay");
        }
    }

    #[test]
    fn large_matmul_chunking_matches_direct_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::from_shape_fn((200, 33), |_| rng.random_range(-1.0..1.0));
        let b = Matrix::from_shape_fn((33, 17), |_| rng.random_range(-1.0..1.0));
        let direct = a.dot(&b);
        let chunked = matmul_tt(&a, &b, false, false);
        // Same kernel applied per 64-row block: rows must agree exactly.
        assert_eq!(direct, chunked);
    }
}
