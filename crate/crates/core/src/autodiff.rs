//! Reverse-mode differentiation over small dense matrices.
//!
//! Model code is written once against [`Backend`]. [`Eval`] runs it as plain
//! numerics; [`Tape`] records every operation so [`Tape::backward`] can
//! return gradients of a scalar output with respect to every leaf.
//!
//! Binary elementwise operations broadcast along any axis of length one.
//! Shape errors inside a backend are programming errors and panic; public
//! entry points validate dimensions before reaching this layer.

use std::rc::Rc;

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Sqrt,
    Square,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive arguments.
pub fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
        }
    }

    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
        }
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn broadcast_zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let (rows, cols) = match (
        broadcast_dim(a.nrows(), b.nrows()),
        broadcast_dim(a.ncols(), b.ncols()),
    ) {
        (Some(r), Some(c)) => (r, c),
        _ => panic!(
            "incompatible shapes {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        ),
    };
    let (ar, ac) = (a.nrows() == 1, a.ncols() == 1);
    let (br, bc) = (b.nrows() == 1, b.ncols() == 1);
    Mat::from_fn(rows, cols, |i, j| {
        let x = a[(if ar { 0 } else { i }, if ac { 0 } else { j })];
        let y = b[(if br { 0 } else { i }, if bc { 0 } else { j })];
        f(x, y)
    })
}

/// Sums `g` down to a `rows x cols` shape (adjoint of broadcasting).
fn reduce_to(g: Mat, rows: usize, cols: usize) -> Mat {
    if g.nrows() == rows && g.ncols() == cols {
        return g;
    }
    let mut out = Mat::zeros(rows, cols);
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            let r = if rows == 1 { 0 } else { i };
            let c = if cols == 1 { 0 } else { j };
            out[(r, c)] += g[(i, j)];
        }
    }
    out
}

fn lse_value(a: &Mat) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + a.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn cholesky_value(a: &Mat) -> Option<Mat> {
    let sym = (a + a.transpose()) * 0.5;
    nalgebra::Cholesky::new(sym).map(|c| c.l())
}

/// Operations available to differentiable model code.
pub trait Backend {
    type V: Clone;

    fn leaf(&mut self, m: Mat) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Mat;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn offset(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn transpose(&mut self, a: &Self::V) -> Self::V;
    fn unary(&mut self, a: &Self::V, op: Unary) -> Self::V;
    /// Sum of all entries, as a 1x1 matrix.
    fn sum(&mut self, a: &Self::V) -> Self::V;
    /// Per-row sums, as an n x 1 matrix.
    fn row_sum(&mut self, a: &Self::V) -> Self::V;
    /// Log-sum-exp over all entries, as a 1x1 matrix.
    fn log_sum_exp(&mut self, a: &Self::V) -> Self::V;
    fn hcat(&mut self, parts: &[Self::V]) -> Self::V;
    fn vcat(&mut self, parts: &[Self::V]) -> Self::V;
    fn slice(&mut self, a: &Self::V, r0: usize, nr: usize, c0: usize, nc: usize) -> Self::V;
    /// Lower Cholesky factor of the symmetric part of `a`.
    fn cholesky(&mut self, a: &Self::V) -> Option<Self::V>;
    /// Same value, no gradient flow.
    fn detach(&mut self, a: &Self::V) -> Self::V;

    fn constant(&mut self, m: Mat) -> Self::V {
        self.leaf(m)
    }
    fn scalar(&mut self, x: f64) -> Self::V {
        self.leaf(Mat::from_element(1, 1, x))
    }
    fn tanh(&mut self, a: &Self::V) -> Self::V {
        self.unary(a, Unary::Tanh)
    }
    fn sigmoid(&mut self, a: &Self::V) -> Self::V {
        self.unary(a, Unary::Sigmoid)
    }
    fn softplus(&mut self, a: &Self::V) -> Self::V {
        self.unary(a, Unary::Softplus)
    }
    fn exp(&mut self, a: &Self::V) -> Self::V {
        self.unary(a, Unary::Exp)
    }
    fn ln(&mut self, a: &Self::V) -> Self::V {
        self.unary(a, Unary::Ln)
    }
    fn sqrt(&mut self, a: &Self::V) -> Self::V {
        self.unary(a, Unary::Sqrt)
    }
    fn square(&mut self, a: &Self::V) -> Self::V {
        self.unary(a, Unary::Square)
    }
    fn scalar_value(&self, v: &Self::V) -> f64 {
        self.value(v)[(0, 0)]
    }
}

/// Direct evaluation without recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type V = Rc<Mat>;

    fn leaf(&mut self, m: Mat) -> Rc<Mat> {
        Rc::new(m)
    }
    fn value<'a>(&'a self, v: &'a Rc<Mat>) -> &'a Mat {
        v
    }
    fn matmul(&mut self, a: &Rc<Mat>, b: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(&**a * &**b)
    }
    fn add(&mut self, a: &Rc<Mat>, b: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(broadcast_zip(a, b, |x, y| x + y))
    }
    fn sub(&mut self, a: &Rc<Mat>, b: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(broadcast_zip(a, b, |x, y| x - y))
    }
    fn mul(&mut self, a: &Rc<Mat>, b: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(broadcast_zip(a, b, |x, y| x * y))
    }
    fn div(&mut self, a: &Rc<Mat>, b: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(broadcast_zip(a, b, |x, y| x / y))
    }
    fn scale(&mut self, a: &Rc<Mat>, c: f64) -> Rc<Mat> {
        Rc::new(&**a * c)
    }
    fn offset(&mut self, a: &Rc<Mat>, c: f64) -> Rc<Mat> {
        Rc::new(a.map(|x| x + c))
    }
    fn transpose(&mut self, a: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(a.transpose())
    }
    fn unary(&mut self, a: &Rc<Mat>, op: Unary) -> Rc<Mat> {
        Rc::new(a.map(|x| op.apply(x)))
    }
    fn sum(&mut self, a: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(Mat::from_element(1, 1, a.sum()))
    }
    fn row_sum(&mut self, a: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(Mat::from_fn(a.nrows(), 1, |i, _| a.row(i).sum()))
    }
    fn log_sum_exp(&mut self, a: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(Mat::from_element(1, 1, lse_value(a)))
    }
    fn hcat(&mut self, parts: &[Rc<Mat>]) -> Rc<Mat> {
        Rc::new(hcat_values(parts.iter().map(|p| &**p)))
    }
    fn vcat(&mut self, parts: &[Rc<Mat>]) -> Rc<Mat> {
        Rc::new(vcat_values(parts.iter().map(|p| &**p)))
    }
    fn slice(&mut self, a: &Rc<Mat>, r0: usize, nr: usize, c0: usize, nc: usize) -> Rc<Mat> {
        Rc::new(a.view((r0, c0), (nr, nc)).into_owned())
    }
    fn cholesky(&mut self, a: &Rc<Mat>) -> Option<Rc<Mat>> {
        cholesky_value(a).map(Rc::new)
    }
    fn detach(&mut self, a: &Rc<Mat>) -> Rc<Mat> {
        a.clone()
    }
}

fn hcat_values<'a>(parts: impl Iterator<Item = &'a Mat> + Clone) -> Mat {
    let rows = parts.clone().next().map_or(0, |m| m.nrows());
    let cols: usize = parts.clone().map(|m| m.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut c = 0;
    for p in parts {
        assert_eq!(p.nrows(), rows, "hcat row mismatch");
        out.view_mut((0, c), (rows, p.ncols())).copy_from(p);
        c += p.ncols();
    }
    out
}

fn vcat_values<'a>(parts: impl Iterator<Item = &'a Mat> + Clone) -> Mat {
    let cols = parts.clone().next().map_or(0, |m| m.ncols());
    let rows: usize = parts.clone().map(|m| m.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        assert_eq!(p.ncols(), cols, "vcat column mismatch");
        out.view_mut((r, 0), (p.nrows(), cols)).copy_from(p);
        r += p.nrows();
    }
    out
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Transpose(usize),
    Unary(usize, Unary),
    Sum(usize),
    RowSum(usize),
    Lse(usize),
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    Slice { src: usize, r0: usize, c0: usize },
    Cholesky(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
}

/// Recording backend.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Mat {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Mat {
        &self.nodes[i].value
    }

    /// Gradient of the 1x1 node `output` with respect to all nodes.
    pub fn backward(&self, output: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        assert_eq!(
            self.val(output.0).shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        grads[output.0] = Some(Mat::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<Mat>], i: usize, g: Mat) {
            match &mut grads[i] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = &g * self.val(*b).transpose();
                    let gb = self.val(*a).transpose() * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let (ar, ac) = self.val(*a).shape();
                    let (br, bc) = self.val(*b).shape();
                    let gb = reduce_to(g.clone(), br, bc);
                    let gb = if matches!(node.op, Op::Sub(..)) { -gb } else { gb };
                    acc(&mut grads, *a, reduce_to(g.clone(), ar, ac));
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (ar, ac) = self.val(*a).shape();
                    let (br, bc) = self.val(*b).shape();
                    let ga = broadcast_zip(&g, self.val(*b), |x, y| x * y);
                    let gb = broadcast_zip(&g, self.val(*a), |x, y| x * y);
                    acc(&mut grads, *a, reduce_to(ga, ar, ac));
                    acc(&mut grads, *b, reduce_to(gb, br, bc));
                }
                Op::Div(a, b) => {
                    let (ar, ac) = self.val(*a).shape();
                    let (br, bc) = self.val(*b).shape();
                    let ga = broadcast_zip(&g, self.val(*b), |x, y| x / y);
                    // d(a/b)/db = -y / b
                    let gy = g.component_mul(&node.value);
                    let gb = broadcast_zip(&gy, self.val(*b), |x, y| -x / y);
                    acc(&mut grads, *a, reduce_to(ga, ar, ac));
                    acc(&mut grads, *b, reduce_to(gb, br, bc));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Offset(a) => acc(&mut grads, *a, g.clone()),
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Unary(a, op) => {
                    let x = self.val(*a);
                    let y = &node.value;
                    let ga = Mat::from_fn(x.nrows(), x.ncols(), |r, c| {
                        g[(r, c)] * op.deriv(x[(r, c)], y[(r, c)])
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.val(*a).shape();
                    acc(&mut grads, *a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::RowSum(a) => {
                    let (r, c) = self.val(*a).shape();
                    acc(&mut grads, *a, Mat::from_fn(r, c, |i, _| g[(i, 0)]));
                }
                Op::Lse(a) => {
                    let y = node.value[(0, 0)];
                    let ga = self.val(*a).map(|x| g[(0, 0)] * (x - y).exp());
                    acc(&mut grads, *a, ga);
                }
                Op::HCat(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = self.val(p).ncols();
                        acc(&mut grads, p, g.columns(c, w).into_owned());
                        c += w;
                    }
                }
                Op::VCat(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let h = self.val(p).nrows();
                        acc(&mut grads, p, g.rows(r, h).into_owned());
                        r += h;
                    }
                }
                Op::Slice { src, r0, c0 } => {
                    let (r, c) = self.val(*src).shape();
                    let mut ga = Mat::zeros(r, c);
                    ga.view_mut((*r0, *c0), g.shape()).copy_from(&g);
                    acc(&mut grads, *src, ga);
                }
                Op::Cholesky(a) => {
                    acc(&mut grads, *a, cholesky_adjoint(&node.value, &g));
                }
            }
            grads[i] = Some(g);
        }

        Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }
}

/// Adjoint of `L = chol(sym(S))`: returns the symmetric gradient with
/// respect to `S` given the gradient with respect to `L`.
fn cholesky_adjoint(l: &Mat, l_bar: &Mat) -> Mat {
    let n = l.nrows();
    let l_bar = l_bar.lower_triangle();
    let mut phi = l.transpose() * l_bar;
    for j in 0..n {
        for i in 0..j {
            phi[(i, j)] = 0.0;
        }
        phi[(j, j)] *= 0.5;
    }
    let lt = l.transpose();
    // X = L^-T phi, then A = X L^-1 = (L^-T X^T)^T
    let x = lt
        .solve_upper_triangular(&phi)
        .expect("cholesky factor is nonsingular");
    let a = lt
        .solve_upper_triangular(&x.transpose())
        .expect("cholesky factor is nonsingular")
        .transpose();
    (&a + a.transpose()) * 0.5
}

impl Backend for Tape {
    type V = Var;

    fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Mat {
        &self.nodes[v.0].value
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(a.0) * self.val(b.0);
        self.push(v, Op::MatMul(a.0, b.0))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = broadcast_zip(self.val(a.0), self.val(b.0), |x, y| x + y);
        self.push(v, Op::Add(a.0, b.0))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = broadcast_zip(self.val(a.0), self.val(b.0), |x, y| x - y);
        self.push(v, Op::Sub(a.0, b.0))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let v = broadcast_zip(self.val(a.0), self.val(b.0), |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }
    fn div(&mut self, a: &Var, b: &Var) -> Var {
        let v = broadcast_zip(self.val(a.0), self.val(b.0), |x, y| x / y);
        self.push(v, Op::Div(a.0, b.0))
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let v = self.val(a.0) * c;
        self.push(v, Op::Scale(a.0, c))
    }
    fn offset(&mut self, a: &Var, c: f64) -> Var {
        let v = self.val(a.0).map(|x| x + c);
        self.push(v, Op::Offset(a.0))
    }
    fn transpose(&mut self, a: &Var) -> Var {
        let v = self.val(a.0).transpose();
        self.push(v, Op::Transpose(a.0))
    }
    fn unary(&mut self, a: &Var, op: Unary) -> Var {
        let v = self.val(a.0).map(|x| op.apply(x));
        self.push(v, Op::Unary(a.0, op))
    }
    fn sum(&mut self, a: &Var) -> Var {
        let v = Mat::from_element(1, 1, self.val(a.0).sum());
        self.push(v, Op::Sum(a.0))
    }
    fn row_sum(&mut self, a: &Var) -> Var {
        let m = self.val(a.0);
        let v = Mat::from_fn(m.nrows(), 1, |i, _| m.row(i).sum());
        self.push(v, Op::RowSum(a.0))
    }
    fn log_sum_exp(&mut self, a: &Var) -> Var {
        let v = Mat::from_element(1, 1, lse_value(self.val(a.0)));
        self.push(v, Op::Lse(a.0))
    }
    fn hcat(&mut self, parts: &[Var]) -> Var {
        let v = hcat_values(parts.iter().map(|p| &self.nodes[p.0].value));
        self.push(v, Op::HCat(parts.iter().map(|p| p.0).collect()))
    }
    fn vcat(&mut self, parts: &[Var]) -> Var {
        let v = vcat_values(parts.iter().map(|p| &self.nodes[p.0].value));
        self.push(v, Op::VCat(parts.iter().map(|p| p.0).collect()))
    }
    fn slice(&mut self, a: &Var, r0: usize, nr: usize, c0: usize, nc: usize) -> Var {
        let v = self.val(a.0).view((r0, c0), (nr, nc)).into_owned();
        self.push(v, Op::Slice { src: a.0, r0, c0 })
    }
    fn cholesky(&mut self, a: &Var) -> Option<Var> {
        let l = cholesky_value(self.val(a.0))?;
        Some(self.push(l, Op::Cholesky(a.0)))
    }
    fn detach(&mut self, a: &Var) -> Var {
        let v = self.val(a.0).clone();
        self.push(v, Op::Leaf)
    }
}

/// Cholesky with a single `1e-9 I` jitter retry.
pub fn cholesky_with_jitter<B: Backend>(b: &mut B, a: &B::V) -> Option<B::V> {
    if let Some(l) = b.cholesky(a) {
        return Some(l);
    }
    let n = b.value(a).nrows();
    let jitter = b.constant(Mat::identity(n, n) * 1e-9);
    let a2 = b.add(a, &jitter);
    b.cholesky(&a2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&mut Tape, Var) -> Var, x0: Mat) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&mut tape, x);
        let g = tape.backward(y).wrt(x);
        let h = 1e-6;
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            xp[idx] += h;
            let mut xm = x0.clone();
            xm[idx] -= h;
            let mut tp = Tape::new();
            let vp = tp.leaf(xp);
            let fp = f(&mut tp, vp);
            let fp = tp.scalar_value(&fp);
            let mut tm = Tape::new();
            let vm = tm.leaf(xm);
            let fm = f(&mut tm, vm);
            let fm = tm.scalar_value(&fm);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
            assert!(err < 1e-6, "entry {idx}: analytic {} vs fd {fd}", g[idx]);
        }
    }

    fn test_matrix(r: usize, c: usize, seed: f64) -> Mat {
        Mat::from_fn(r, c, |i, j| ((i * 7 + j * 3) as f64 * 0.37 + seed).sin())
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let w = test_matrix(3, 4, 0.2);
        fd_check(
            move |t, x| {
                let wv = t.constant(w.clone());
                let y = t.matmul(&x, &wv);
                let y = t.tanh(&y);
                let z = t.sigmoid(&y);
                let s = t.softplus(&z);
                let q = t.mul(&s, &y);
                t.sum(&q)
            },
            test_matrix(2, 3, 0.5),
        );
    }

    #[test]
    fn broadcast_gradients() {
        fd_check(
            |t, x| {
                let row = t.slice(&x, 0, 1, 0, 3);
                let col = t.slice(&x, 0, 3, 1, 1);
                let a = t.add(&x, &row);
                let b = t.mul(&a, &col);
                let c = t.offset(&row, 3.0);
                let d = t.div(&b, &c);
                let e = t.sub(&d, &col);
                let l = t.log_sum_exp(&e);
                let r = t.row_sum(&e);
                let r = t.square(&r);
                let s = t.sum(&r);
                t.add(&l, &s)
            },
            test_matrix(3, 3, 0.1),
        );
    }

    #[test]
    fn concat_and_transpose_gradients() {
        fd_check(
            |t, x| {
                let xt = t.transpose(&x);
                let top = t.slice(&xt, 0, 1, 0, 2);
                let h = t.hcat(&[x, x]);
                let v = t.vcat(&[top, top]);
                let vm = t.matmul(&v, &h);
                let e = t.exp(&vm);
                let e = t.scale(&e, 0.1);
                t.sum(&e)
            },
            test_matrix(2, 2, 0.3),
        );
    }

    #[test]
    fn cholesky_gradient_matches_finite_differences() {
        let base = test_matrix(4, 4, 0.7);
        let spd = &base * base.transpose() + Mat::identity(4, 4) * 0.5;
        let w = test_matrix(4, 4, 1.1);
        fd_check(
            move |t, x| {
                let l = t.cholesky(&x).unwrap();
                let wv = t.constant(w.clone());
                let p = t.mul(&l, &wv);
                let lt = t.transpose(&l);
                let q = t.matmul(&p, &lt);
                t.sum(&q)
            },
            spd,
        );
    }

    #[test]
    fn eval_and_tape_agree() {
        let x0 = test_matrix(3, 2, 0.9);
        let mut e = Eval;
        let xe = e.leaf(x0.clone());
        let ye = e.softplus(&xe);
        let ye = e.log_sum_exp(&ye);
        let mut t = Tape::new();
        let xt = t.leaf(x0);
        let yt = t.softplus(&xt);
        let yt = t.log_sum_exp(&yt);
        assert_eq!(e.scalar_value(&ye), t.scalar_value(&yt));
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for &y in &[1e-6, 0.01, 0.5, 1.0, 7.0, 40.0] {
            let x = inv_softplus(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }
}
