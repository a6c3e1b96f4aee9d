//! Reverse-mode autodiff over dense `f64` matrices.
//!
//! The generator, every loss, and every optimization stage build a fresh
//! expression graph per step, run one forward pass while building, then one
//! backward pass. Keeping the engine to exactly the ops the renderer and the
//! losses need makes gradients easy to audit against finite differences.
//!
//! Broadcasting for binary elementwise ops follows the usual rule: each
//! dimension must match or be 1 on one side.

use ndarray::Array2;
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    MatMul(Var, Var),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Softplus(Var),
    Softsign(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    /// `out.flat[i] = in.flat[idx[i]]`; reshapes, slices, shifts, im2col,
    /// pixel shuffle and row replication are all instances of this.
    Gather(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    /// Per-row exclusive prefix sum along columns.
    ExclCumsumCols(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every `leaf`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`; zero matrix if the loss did not depend on it.
    pub fn wrt(&self, g: &Graph, v: Var) -> Array2<f64> {
        match &self.grads[v.0] {
            Some(a) => a.clone(),
            None => Array2::zeros(g.nodes[v.0].value.dim()),
        }
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let pick = |x: usize, y: usize, axis: &str| {
        if x == y || y == 1 {
            x.max(y)
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast on {axis}: {x} vs {y}");
        }
    };
    (pick(a.0, b.0, "rows"), pick(a.1, b.1, "cols"))
}

fn bin_broadcast(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    if (ra, ca) == (rb, cb) {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    let (r, c) = broadcast_shape((ra, ca), (rb, cb));
    Array2::from_shape_fn((r, c), |(i, j)| {
        let av = a[[if ra == 1 { 0 } else { i }, if ca == 1 { 0 } else { j }]];
        let bv = b[[if rb == 1 { 0 } else { i }, if cb == 1 { 0 } else { j }]];
        f(av, bv)
    })
}

/// Reduce `grad` (shaped like the broadcast output) back to `shape`.
fn reduce_to(grad: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let (gr, gc) = grad.dim();
    if (gr, gc) == shape {
        return grad.clone();
    }
    let mut out = Array2::zeros(shape);
    for i in 0..gr {
        for j in 0..gc {
            out[[if shape.0 == 1 { 0 } else { i }, if shape.1 == 1 { 0 } else { j }]] +=
                grad[[i, j]];
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    // numerically stable log(1 + e^x)
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
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

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.dim(), (1, 1), "scalar_value on non-scalar node");
        a[[0, 0]]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = bin_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        let g = self.ng(a);
        self.push(v, Op::Neg(a), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x + k);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a, k), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).mapv(f);
        let g = self.ng(a);
        self.push(v, op, g)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// `x / (1 + |x|)`; the cheap saturating activation used by the toy MLPs.
    pub fn softsign(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softsign(a), |x| x / (1.0 + x.abs()))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        let g = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    /// Sum of all entries, as a `[1,1]` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let g = self.ng(a);
        self.push(v, Op::Sum(a), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[r,c] -> [r,1]` row sums.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, _) = src.dim();
        let mut v = Array2::zeros((r, 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            v[[i, 0]] = row.sum();
        }
        let g = self.ng(a);
        self.push(v, Op::SumCols(a), g)
    }

    /// `[r,c] -> [1,c]` column sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, c) = src.dim();
        let mut v = Array2::zeros((1, c));
        for j in 0..c {
            v[[0, j]] = src.column(j).sum();
        }
        let g = self.ng(a);
        self.push(v, Op::SumRows(a), g)
    }

    /// Arbitrary flat-index gather; `idx.len()` must equal `rows * cols`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather index length");
        let src = self.value(a);
        let flat: Vec<f64> = {
            let s = src.as_slice().expect("gather source must be contiguous");
            idx.iter().map(|&i| s[i]).collect()
        };
        let v = Array2::from_shape_vec((rows, cols), flat).unwrap();
        let g = self.ng(a);
        self.push(v, Op::Gather(a, idx), g)
    }

    /// Reshape without reordering (row-major).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let n = self.value(a).len();
        assert_eq!(n, rows * cols, "reshape must preserve element count");
        let idx = Rc::new((0..n).collect::<Vec<_>>());
        self.gather(a, idx, rows, cols)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).dim().0;
        let total: usize = parts.iter().map(|&p| self.value(p).dim().1).sum();
        let mut v = Array2::zeros((r, total));
        let mut off = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.dim().0, r, "concat_cols row mismatch");
            let c = src.dim().1;
            v.slice_mut(ndarray::s![.., off..off + c]).assign(src);
            off += c;
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), g)
    }

    /// Per-row exclusive prefix sum along columns.
    pub fn excl_cumsum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (r, c) = src.dim();
        let mut v = Array2::zeros((r, c));
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..c {
                v[[i, j]] = acc;
                acc += src[[i, j]];
            }
        }
        let g = self.ng(a);
        self.push(v, Op::ExclCumsumCols(a), g)
    }

    /// Backpropagate from scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &grad, &mut grads);
            // leaves keep their gradient; interior nodes may free theirs
            match self.nodes[id].op {
                Op::Leaf => grads[id] = Some(grad),
                _ => {}
            }
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(&self, id: usize, grad: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let shape = |v: Var| self.nodes[v.0].value.dim();
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.add_grad(grads, *a, reduce_to(grad, shape(*a)));
                self.add_grad(grads, *b, reduce_to(grad, shape(*b)));
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, reduce_to(grad, shape(*a)));
                self.add_grad(grads, *b, reduce_to(&grad.mapv(|x| -x), shape(*b)));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = bin_broadcast(grad, val(*b), |g, y| g * y);
                    self.add_grad(grads, *a, reduce_to(&ga, shape(*a)));
                }
                if self.ng(*b) {
                    let gb = bin_broadcast(grad, val(*a), |g, x| g * x);
                    self.add_grad(grads, *b, reduce_to(&gb, shape(*b)));
                }
            }
            Op::Div(a, b) => {
                if self.ng(*a) {
                    let ga = bin_broadcast(grad, val(*b), |g, y| g / y);
                    self.add_grad(grads, *a, reduce_to(&ga, shape(*a)));
                }
                if self.ng(*b) {
                    let num = bin_broadcast(val(*a), val(*b), |x, y| -x / (y * y));
                    let gb = bin_broadcast(grad, &num, |g, d| g * d);
                    self.add_grad(grads, *b, reduce_to(&gb, shape(*b)));
                }
            }
            Op::Neg(a) => self.add_grad(grads, *a, grad.mapv(|x| -x)),
            Op::Scale(a, k) => self.add_grad(grads, *a, grad.mapv(|x| x * k)),
            Op::AddScalar(a, _) => self.add_grad(grads, *a, grad.clone()),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.add_grad(grads, *a, grad.dot(&val(*b).t()));
                }
                if self.ng(*b) {
                    self.add_grad(grads, *b, val(*a).t().dot(grad));
                }
            }
            Op::Sin(a) => {
                let mut g = val(*a).mapv(f64::cos);
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Cos(a) => {
                let mut g = val(*a).mapv(|x| -x.sin());
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let mut g = y.mapv(|t| 1.0 - t * t);
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                let mut g = y.mapv(|s| s * (1.0 - s));
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Exp(a) => {
                let mut g = self.nodes[id].value.clone();
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Ln(a) => {
                let mut g = val(*a).mapv(|x| 1.0 / x);
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[id].value;
                let mut g = y.mapv(|s| 0.5 / s);
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Abs(a) => {
                let mut g = val(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Softplus(a) => {
                let mut g = val(*a).mapv(sigmoid);
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Softsign(a) => {
                let mut g = val(*a).mapv(|x| {
                    let d = 1.0 + x.abs();
                    1.0 / (d * d)
                });
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Clamp(a, lo, hi) => {
                let mut g = val(*a).mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                g.zip_mut_with(grad, |d, &g0| *d *= g0);
                self.add_grad(grads, *a, g);
            }
            Op::Sum(a) => {
                let g0 = grad[[0, 0]];
                self.add_grad(grads, *a, Array2::from_elem(shape(*a), g0));
            }
            Op::SumCols(a) => {
                let (r, c) = shape(*a);
                let mut g = Array2::zeros((r, c));
                for i in 0..r {
                    let gi = grad[[i, 0]];
                    g.row_mut(i).fill(gi);
                }
                self.add_grad(grads, *a, g);
            }
            Op::SumRows(a) => {
                let (r, c) = shape(*a);
                let mut g = Array2::zeros((r, c));
                for j in 0..c {
                    let gj = grad[[0, j]];
                    g.column_mut(j).fill(gj);
                }
                self.add_grad(grads, *a, g);
            }
            Op::Gather(a, idx) => {
                let (r, c) = shape(*a);
                let mut g = Array2::zeros((r, c));
                {
                    let gs = g.as_slice_mut().unwrap();
                    let grad_flat = grad.as_slice().expect("gather grad contiguous");
                    for (k, &i) in idx.iter().enumerate() {
                        gs[i] += grad_flat[k];
                    }
                }
                self.add_grad(grads, *a, g);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = shape(p).1;
                    let gp = grad.slice(ndarray::s![.., off..off + c]).to_owned();
                    self.add_grad(grads, p, gp);
                    off += c;
                }
            }
            Op::ExclCumsumCols(a) => {
                // d/dx[i,k] = sum_{j>k} grad[i,j]
                let (r, c) = shape(*a);
                let mut g = Array2::zeros((r, c));
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in (0..c).rev() {
                        g[[i, j]] = acc;
                        acc += grad[[i, j]];
                    }
                }
                self.add_grad(grads, *a, g);
            }
        }
    }
}
