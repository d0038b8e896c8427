//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::gradients`] walks the nodes backwards once and returns the adjoint
//! of every node that depends on a trainable leaf. Leaves created with
//! [`Tape::constant`] or [`Tape::detach`] never receive gradient, so every
//! branch that passes through them contributes exactly zero.

use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Floor applied to every logarithm argument.
pub const LOG_FLOOR: f64 = 1e-8;

/// A trainable (or frozen) tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub tensor: DenseMatrix,
    pub requires_grad: bool,
    pub grad: DenseMatrix,
}

impl Parameter {
    pub fn new(tensor: DenseMatrix, requires_grad: bool) -> Self {
        let (r, c) = tensor.shape();
        Self {
            tensor,
            requires_grad,
            grad: DenseMatrix::zeros(r, c),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tensor.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &DenseMatrix) -> Result<()> {
        self.grad.add_assign(g)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, DenseMatrix),
    Scale(Var, f64),
    MatMulNt(Var, Var),
    Transpose(Var),
    AddRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    AddColBroadcast(Var, Var),
    DivScalar(Var, Var),
    NormalizeRows(Var, Vec<f64>),
    RowNorms(Var),
    Softmax(Var),
    LogSoftmax { input: Var, exclude_diagonal: bool, probs: DenseMatrix },
    LogFloor(Var),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `v`; `None`
    /// means the output does not depend on `v` through any trainable path.
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds the gradient of `v` (if any) into the parameter's buffer.
    pub fn accumulate_into(&self, v: Var, param: &mut Parameter) -> Result<()> {
        if let Some(g) = self.get(v) {
            if param.requires_grad {
                param.accumulate(g)?;
            }
        }
        Ok(())
    }
}

/// A scalar objective recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ScalarLoss {
    pub var: Var,
    pub value: f64,
}

impl ScalarLoss {
    /// Back-propagates and adds the resulting gradients into each bound
    /// parameter. Calling it twice without resetting accumulates.
    pub fn backward(&self, tape: &Tape, bindings: &mut [(Var, &mut Parameter)]) -> Result<()> {
        let grads = tape.gradients(self.var)?;
        for (v, p) in bindings.iter_mut() {
            grads.accumulate_into(*v, p)?;
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn loss(&self, v: Var) -> ScalarLoss {
        ScalarLoss {
            var: v,
            value: self.scalar(v),
        }
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: DenseMatrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, p: &Parameter) -> Var {
        self.leaf(p.tensor.clone(), p.requires_grad)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.leaf(value, false)
    }

    /// Value-equal copy of `v` through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Element-wise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, c: DenseMatrix) -> Result<Var> {
        let value = self.value(a).hadamard(&c)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Adds the 1×m row `v` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = row_broadcast(self.value(a), self.value(v), "add_row_broadcast", |x, y| x + y)?;
        let rg = self.rg(&[a, v]);
        Ok(self.push(value, Op::AddRowBroadcast(a, v), rg))
    }

    /// Multiplies every row of `a` element-wise by the 1×m row `v`.
    pub fn mul_row_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = row_broadcast(self.value(a), self.value(v), "mul_row_broadcast", |x, y| x * y)?;
        let rg = self.rg(&[a, v]);
        Ok(self.push(value, Op::MulRowBroadcast(a, v), rg))
    }

    /// Adds the n×1 column `v` to every column of `a`.
    pub fn add_col_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let (am, vm) = (self.value(a), self.value(v));
        if vm.shape() != (am.rows(), 1) {
            return Err(Error::ShapeMismatch {
                op: "add_col_broadcast",
                left: am.shape(),
                right: vm.shape(),
            });
        }
        let mut value = am.clone();
        for r in 0..value.rows() {
            let add = vm.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|x| *x += add);
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push(value, Op::AddColBroadcast(a, v), rg))
    }

    /// Divides `a` by the 1×1 node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "div_scalar",
                left: self.value(a).shape(),
                right: sv.shape(),
            });
        }
        let denom = sv.item();
        let value = self.value(a).map(|x| x / denom);
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::DivScalar(a, s), rg))
    }

    /// Scales each row to unit Euclidean norm; zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var, which: &'static str) -> Result<Var> {
        let (value, norms) = self.value(a).normalize_rows(which)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::NormalizeRows(a, norms), rg))
    }

    /// Euclidean norm of each row (n×1). The gradient at a zero row is taken as zero.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let norms = self.value(a).row_norms();
        let n = norms.len();
        let value = DenseMatrix::from_vec(n, 1, norms).expect("n x 1");
        let rg = self.rg(&[a]);
        self.push(value, Op::RowNorms(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Row-wise log-softmax. With `exclude_diagonal`, entry (i, i) is left out
    /// of row i's normalizer and its output is fixed at zero.
    pub fn log_softmax_rows(&mut self, a: Var, exclude_diagonal: bool) -> Result<Var> {
        let x = self.value(a);
        if exclude_diagonal && x.rows() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "log_softmax_rows(exclude_diagonal)",
                left: x.shape(),
                right: x.shape(),
            });
        }
        let (n, m) = x.shape();
        let mut probs = DenseMatrix::zeros(n, m);
        let mut value = DenseMatrix::zeros(n, m);
        for r in 0..n {
            let row = x.row(r);
            let keep = |c: usize| !(exclude_diagonal && c == r);
            let max = (0..m)
                .filter(|&c| keep(c))
                .fold(f64::NEG_INFINITY, |acc, c| acc.max(row[c]));
            let total = (0..m)
                .filter(|&c| keep(c))
                .fold(0.0, |acc, c| acc + (row[c] - max).exp());
            let lse = max + total.ln();
            for c in (0..m).filter(|&c| keep(c)) {
                value.set(r, c, row[c] - lse);
                probs.set(r, c, (row[c] - max).exp() / total);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            Op::LogSoftmax {
                input: a,
                exclude_diagonal,
                probs,
            },
            rg,
        ))
    }

    /// `ln(max(x, LOG_FLOOR))` element-wise.
    pub fn log_floor(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        let rg = self.rg(&[a]);
        self.push(value, Op::LogFloor(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).row_sums();
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSums(a), rg)
    }

    pub fn col_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).col_sums();
        let rg = self.rg(&[a]);
        self.push(value, Op::ColSums(a), rg)
    }

    /// Reverse sweep from the 1×1 node `output`.
    pub fn gradients(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "gradients",
                left: out.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        let mut send = |v: Var, contrib: DenseMatrix| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                send(*a, g.hadamard(self.value(*b))?)?;
                send(*b, g.hadamard(self.value(*a))?)?;
            }
            Op::MulConst(a, c) => send(*a, g.hadamard(c)?)?,
            Op::Scale(a, s) => send(*a, g.scale(*s))?,
            Op::MatMulNt(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                send(*a, g.matmul(self.value(*b))?)?;
                send(*b, g.transpose().matmul(self.value(*a))?)?;
            }
            Op::Transpose(a) => send(*a, g.transpose())?,
            Op::AddRowBroadcast(a, v) => {
                send(*a, g.clone())?;
                send(*v, g.col_sums())?;
            }
            Op::MulRowBroadcast(a, v) => {
                let vv = self.value(*v);
                let av = self.value(*a);
                let mut da = g.clone();
                for r in 0..da.rows() {
                    for (x, &s) in da.row_mut(r).iter_mut().zip(vv.values()) {
                        *x *= s;
                    }
                }
                send(*a, da)?;
                send(*v, g.hadamard(av)?.col_sums())?;
            }
            Op::AddColBroadcast(a, v) => {
                send(*a, g.clone())?;
                send(*v, g.row_sums())?;
            }
            Op::DivScalar(a, s) => {
                let sv = self.value(*s).item();
                send(*a, g.scale(1.0 / sv))?;
                let num = g.hadamard(self.value(*a))?.sum();
                send(*s, DenseMatrix::scalar(-num / (sv * sv)))?;
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut dx = DenseMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = super::matrix::dot(yr, gr);
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - yr[c] * proj) / norms[r];
                    }
                }
                send(*a, dx)?;
            }
            Op::RowNorms(a) => {
                let x = self.value(*a);
                let mut dx = DenseMatrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = node.value.get(r, 0);
                    if n > 0.0 {
                        let s = g.get(r, 0) / n;
                        for (o, &xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = s * xv;
                        }
                    }
                }
                send(*a, dx)?;
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let mut dx = DenseMatrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let sr = s.row(r);
                    let gr = g.row(r);
                    let inner = super::matrix::dot(sr, gr);
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = sr[c] * (gr[c] - inner);
                    }
                }
                send(*a, dx)?;
            }
            Op::LogSoftmax {
                input,
                exclude_diagonal,
                probs,
            } => {
                let (n, m) = probs.shape();
                let mut dx = DenseMatrix::zeros(n, m);
                for r in 0..n {
                    let keep = |c: usize| !(*exclude_diagonal && c == r);
                    let gr = g.row(r);
                    let gsum = (0..m).filter(|&c| keep(c)).fold(0.0, |acc, c| acc + gr[c]);
                    for c in (0..m).filter(|&c| keep(c)) {
                        dx.set(r, c, gr[c] - probs.get(r, c) * gsum);
                    }
                }
                send(*input, dx)?;
            }
            Op::LogFloor(a) => {
                let x = self.value(*a);
                send(
                    *a,
                    g.zip_map(x, "log_floor", |gv, xv| if xv > LOG_FLOOR { gv / xv } else { 0.0 })?,
                )?;
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, DenseMatrix::filled(r, c, g.item()))?;
            }
            Op::RowSums(a) => {
                let (r, c) = self.value(*a).shape();
                let mut dx = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    dx.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                send(*a, dx)?;
            }
            Op::ColSums(a) => {
                let (r, c) = self.value(*a).shape();
                let mut dx = DenseMatrix::zeros(r, c);
                for i in 0..r {
                    dx.row_mut(i).copy_from_slice(g.row(0));
                }
                send(*a, dx)?;
            }
        }
        Ok(())
    }
}

fn row_broadcast(
    a: &DenseMatrix,
    v: &DenseMatrix,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseMatrix> {
    if v.shape() != (1, a.cols()) {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: v.shape(),
        });
    }
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (x, &s) in out.row_mut(r).iter_mut().zip(v.values()) {
            *x = f(*x, s);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> DenseMatrix {
        DenseMatrix::row_vector(v)
    }

    #[test]
    fn detach_blocks_one_branch() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, 2.0]), true);
        let xd = t.detach(x);
        assert_eq!(t.value(xd), t.value(x));
        let prod = t.mul(xd, x).unwrap();
        let loss = t.sum_all(prod);
        let g = t.gradients(loss).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[1.0, 2.0]);
        assert!(g.get(xd).is_none());
    }

    #[test]
    fn fully_detached_graph_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(row(&[1.0, -3.0]), true);
        let xd = t.detach(x);
        let sq = t.mul(xd, xd).unwrap();
        let loss = t.sum_all(sq);
        let g = t.gradients(loss).unwrap();
        assert!(g.get(x).is_none());
        let mut p = Parameter::new(row(&[1.0, -3.0]), true);
        g.accumulate_into(x, &mut p).unwrap();
        assert!(p.grad.values().iter().all(|&v| v.to_bits() == 0));
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut p = Parameter::new(row(&[2.0, 3.0]), true);
        let mut t = Tape::new();
        let x = t.param(&p);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq);
        let loss = t.loss(s);
        loss.backward(&t, &mut [(x, &mut p)]).unwrap();
        loss.backward(&t, &mut [(x, &mut p)]).unwrap();
        assert_eq!(p.grad.values(), &[8.0, 12.0]);
        p.zero_grad();
        assert!(p.grad.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn excluded_diagonal_is_ignored() {
        let mut t = Tape::new();
        let s = t.leaf(
            DenseMatrix::from_rows(&[[5.0, 1.0], [2.0, 9.0]]).unwrap(),
            true,
        );
        let ls = t.log_softmax_rows(s, true).unwrap();
        // one candidate per row: log(1) = 0 everywhere
        assert!(t.value(ls).values().iter().all(|&v| v == 0.0));
        let total = t.sum_all(ls);
        let g = t.gradients(total).unwrap();
        assert!(g.get(s).unwrap().values().iter().all(|&v| v == 0.0));
    }
}
