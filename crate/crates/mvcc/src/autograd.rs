//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every forward pass in this crate (encoder, decoder, losses) is recorded
//! on a [`Tape`]; `Tape::backward` replays it in reverse to produce exact
//! analytic gradients. Nodes are topologically ordered by construction, so
//! the backward sweep is a single reverse scan.
//!
//! Values are `ndarray::Array2<f64>`; vectors are 1×D rows and scalars are
//! 1×1 matrices.

use std::rc::Rc;

use ndarray::{Array2, Axis};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Differentiable input. `param` ties the leaf to a parameter slot so
    /// gradients can be exported after backward.
    Leaf { param: Option<usize> },
    /// Non-differentiable input (targets, fixed data).
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var, f64),
    /// `(N×D) + (1×D)` with the row broadcast over N.
    AddRowBroadcast(Var, Var),
    /// Repeat a 1×D row N times.
    BroadcastRow(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    GatherCols(Var, Rc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    NormalizeRows(Var),
    /// Mean squared error against a constant target of the same shape.
    MseVsConst(Var, Rc<Mat>),
    /// Mean over rows of `logsumexp(row) - row[label]`.
    CrossEntropyMean { logits: Var, labels: Rc<Vec<usize>> },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Grads {
    node_grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.node_grads[v.0].as_ref()
    }
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1, "scalar() on non-scalar node");
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param_leaf(&mut self, value: Mat, param: usize) -> Var {
        self.push(value, Op::Leaf { param: Some(param) })
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddConst(a, c))
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let v = self.value(a) + &r.broadcast(self.value(a).raw_dim()).unwrap();
        self.push(v, Op::AddRowBroadcast(a, row))
    }

    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let mut v = Mat::zeros((n, r.ncols()));
        for mut out in v.rows_mut() {
            out.assign(&r.row(0));
        }
        self.push(v, Op::BroadcastRow(row, n))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((idx.len(), src.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(k).assign(&src.row(i));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn gather_cols(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((src.nrows(), idx.len()));
        for (k, &j) in idx.iter().enumerate() {
            v.column_mut(k).assign(&src.column(j));
        }
        self.push(v, Op::GatherCols(a, idx))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        debug_assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in &parts {
            let m = self.value(p);
            v.slice_mut(ndarray::s![at..at + m.nrows(), ..]).assign(m);
            at += m.nrows();
        }
        self.push(v, Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        debug_assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Mat::zeros((rows, cols));
        let mut at = 0;
        for &p in &parts {
            let m = self.value(p);
            v.slice_mut(ndarray::s![.., at..at + m.ncols()]).assign(m);
            at += m.ncols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xin = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut v = xin.clone();
        for mut row in v.rows_mut() {
            let (mean, std) = row_mean_std(row.as_slice().unwrap());
            for (j, e) in row.iter_mut().enumerate() {
                *e = g[[0, j]] * (*e - mean) / std + b[[0, j]];
            }
        }
        self.push(v, Op::LayerNormRows { x, gamma, beta })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_tanh);
        self.push(v, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = (m.sum_axis(Axis(0)) / m.nrows() as f64)
            .insert_axis(Axis(0))
            .to_owned();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s = m.sum() / m.len() as f64;
        self.push(Mat::from_elem((1, 1), s), Op::MeanAll(a))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.mapv_inplace(|x| x / n);
        }
        self.push(v, Op::NormalizeRows(a))
    }

    pub fn mse_vs_const(&mut self, a: Var, target: Rc<Mat>) -> Var {
        let m = self.value(a);
        debug_assert_eq!(m.raw_dim(), target.raw_dim());
        let n = m.len().max(1) as f64;
        let s = m
            .iter()
            .zip(target.iter())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
            / n;
        self.push(Mat::from_elem((1, 1), s), Op::MseVsConst(a, target))
    }

    pub fn cross_entropy_mean(&mut self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let z = self.value(logits);
        debug_assert_eq!(z.nrows(), labels.len());
        let mut total = 0.0;
        for (row, &lab) in z.rows().into_iter().zip(labels.iter()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[lab];
        }
        let v = Mat::from_elem((1, 1), total / labels.len() as f64);
        self.push(v, Op::CrossEntropyMean { logits, labels })
    }

    /// Backpropagate from `root`, seeding its gradient with `seed`
    /// (same shape as the root value).
    pub fn backward_seeded(&self, root: Var, seed: Mat) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(seed.raw_dim(), self.nodes[root.0].value.raw_dim());
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { node_grads: grads }
    }

    /// Backpropagate from a scalar (1×1) root with seed 1.
    pub fn backward(&self, root: Var) -> Grads {
        self.backward_seeded(root, Mat::from_elem((1, 1), 1.0))
    }

    /// Collect gradients of parameter leaves into a slot-indexed vector,
    /// accumulating when the same slot appears in several leaves.
    pub fn param_grads(&self, grads: &Grads, n_slots: usize) -> Vec<Option<Mat>> {
        let mut out: Vec<Option<Mat>> = (0..n_slots).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(slot) } = node.op {
                if let Some(g) = &grads.node_grads[i] {
                    match &mut out[slot] {
                        Some(acc) => *acc += g,
                        dst => *dst = Some(g.clone()),
                    }
                }
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let acc = |grads: &mut [Option<Mat>], v: Var, contrib: Mat| {
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot => *slot = Some(contrib),
            };
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } | Op::Constant => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Transpose(a) => acc(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g * self.value(*b));
                acc(grads, *b, g * self.value(*a));
            }
            Op::Scale(a, c) => acc(grads, *a, g.mapv(|x| x * c)),
            Op::AddConst(a, _) => acc(grads, *a, g.clone()),
            Op::AddRowBroadcast(a, row) => {
                acc(grads, *a, g.clone());
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::BroadcastRow(row, _) => {
                acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut da = Mat::zeros(src.raw_dim());
                for (k, &r) in idx.iter().enumerate() {
                    let mut dst = da.row_mut(r);
                    dst += &g.row(k);
                }
                acc(grads, *a, da);
            }
            Op::GatherCols(a, idx) => {
                let src = self.value(*a);
                let mut da = Mat::zeros(src.raw_dim());
                for (k, &c) in idx.iter().enumerate() {
                    let mut dst = da.column_mut(c);
                    dst += &g.column(k);
                }
                acc(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    acc(grads, p, g.slice(ndarray::s![at..at + n, ..]).to_owned());
                    at += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).ncols();
                    acc(grads, p, g.slice(ndarray::s![.., at..at + n]).to_owned());
                    at += n;
                }
            }
            Op::SliceCols(a, start, len) => {
                let src = self.value(*a);
                let mut da = Mat::zeros(src.raw_dim());
                da.slice_mut(ndarray::s![.., *start..start + len]).assign(g);
                acc(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut da = g * y;
                for (mut row, (grow, yrow)) in da
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows().into_iter().zip(y.rows()))
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    for (e, &yv) in row.iter_mut().zip(yrow.iter()) {
                        *e -= dot * yv;
                    }
                }
                acc(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut da = g.clone();
                for (mut row, (grow, yrow)) in da
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows().into_iter().zip(y.rows()))
                {
                    let gsum: f64 = grow.iter().sum();
                    for (e, &yv) in row.iter_mut().zip(yrow.iter()) {
                        *e -= yv.exp() * gsum;
                    }
                }
                acc(grads, *a, da);
            }
            Op::LayerNormRows { x, gamma, beta } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma);
                let d = xv.ncols() as f64;
                let mut dx = Mat::zeros(xv.raw_dim());
                let mut dgamma = Mat::zeros((1, xv.ncols()));
                let mut dbeta = Mat::zeros((1, xv.ncols()));
                for (r, xrow) in xv.rows().into_iter().enumerate() {
                    let (mean, std) = row_mean_std(xrow.as_slice().unwrap());
                    let grow = g.row(r);
                    let mut m1 = 0.0; // mean of gamma*dy
                    let mut m2 = 0.0; // mean of gamma*dy*xhat
                    for j in 0..xv.ncols() {
                        let xhat = (xrow[j] - mean) / std;
                        let gd = gm[[0, j]] * grow[j];
                        m1 += gd;
                        m2 += gd * xhat;
                        dgamma[[0, j]] += grow[j] * xhat;
                        dbeta[[0, j]] += grow[j];
                    }
                    m1 /= d;
                    m2 /= d;
                    for j in 0..xv.ncols() {
                        let xhat = (xrow[j] - mean) / std;
                        let gd = gm[[0, j]] * grow[j];
                        dx[[r, j]] = (gd - m1 - xhat * m2) / std;
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dgamma);
                acc(grads, *beta, dbeta);
            }
            Op::Gelu(a) => {
                let da = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&gv, &xv| gv * gelu_tanh_deriv(xv));
                acc(grads, *a, da);
            }
            Op::Relu(a) => {
                let da = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 });
                acc(grads, *a, da);
            }
            Op::Abs(a) => {
                let da = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&gv, &xv| gv * xv.signum_or_zero());
                acc(grads, *a, da);
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).nrows();
                let mut da = Mat::zeros(self.value(*a).raw_dim());
                for mut row in da.rows_mut() {
                    row.assign(&g.row(0).mapv(|x| x / n as f64));
                }
                acc(grads, *a, da);
            }
            Op::SumAll(a) => {
                let da = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                acc(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let da = Mat::from_elem(self.value(*a).raw_dim(), g[[0, 0]] / n);
                acc(grads, *a, da);
            }
            Op::NormalizeRows(a) => {
                let xv = self.value(*a);
                let mut da = Mat::zeros(xv.raw_dim());
                for (r, xrow) in xv.rows().into_iter().enumerate() {
                    let norm = xrow.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let grow = g.row(r);
                    let dot: f64 = grow
                        .iter()
                        .zip(xrow.iter())
                        .map(|(gv, xv)| gv * xv / norm)
                        .sum();
                    for j in 0..xv.ncols() {
                        da[[r, j]] = (grow[j] - xrow[j] / norm * dot) / norm;
                    }
                }
                acc(grads, *a, da);
            }
            Op::MseVsConst(a, target) => {
                let m = self.value(*a);
                let n = m.len().max(1) as f64;
                let scale = 2.0 * g[[0, 0]] / n;
                let da = ndarray::Zip::from(m)
                    .and(target.as_ref())
                    .map_collect(|&x, &t| scale * (x - t));
                acc(grads, *a, da);
            }
            Op::CrossEntropyMean { logits, labels } => {
                let z = self.value(*logits);
                let b = labels.len() as f64;
                let mut da = softmax_rows(z);
                for (r, &lab) in labels.iter().enumerate() {
                    da[[r, lab]] -= 1.0;
                }
                da.mapv_inplace(|x| x * g[[0, 0]] / b);
                acc(grads, *logits, da);
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

fn row_mean_std(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, (var + LAYER_NORM_EPS).sqrt())
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut v = x.clone();
    for mut row in v.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s: f64 = row.iter().sum();
        row.mapv_inplace(|x| x / s);
    }
    v
}

fn gelu_tanh(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row vector (1×D) from a slice.
pub fn row_mat(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

/// Matrix from row-major data.
pub fn mat_from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
    Mat::from_shape_vec((rows, cols), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. one input matrix entry.
    fn fd_grad(mut f: impl FnMut(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
        let mut g = Mat::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| {
                let denom = x.abs().max(y.abs()).max(1e-6);
                (x - y).abs() / denom
            })
            .fold(0.0, f64::max)
    }

    /// One scalar-valued graph exercising most op backward rules at once.
    fn everything_graph(tape: &mut Tape, x: Var, w: Var) -> Var {
        let xt = tape.transpose(x);
        let prod = tape.matmul(w, xt); // mixes matmul + transpose
        let sm = tape.softmax_rows(prod);
        let lsm = tape.log_softmax_rows(prod);
        let mixed = tape.add(sm, lsm);
        let gl = tape.gelu(mixed);
        let nr = tape.normalize_rows(gl);
        let gathered = tape.gather_rows(nr, Rc::new(vec![0, 1, 0]));
        let mean = tape.mean_rows(gathered);
        let grown = tape.broadcast_row(mean, 3);
        let scaled = tape.scale(grown, 0.7);
        let shifted = tape.add_const(scaled, 0.1);
        let ab = tape.abs(shifted);
        let rl = tape.relu(ab);
        tape.sum_all(rl)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_mat(&mut rng, 4, 3);
        let w0 = rand_mat(&mut rng, 2, 3);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let loss = everything_graph(&mut tape, x, w);
        let grads = tape.backward(loss);

        let f_x = |xm: &Mat| {
            let mut t = Tape::new();
            let xv = t.leaf(xm.clone());
            let wv = t.leaf(w0.clone());
            let l = everything_graph(&mut t, xv, wv);
            t.scalar(l)
        };
        let f_w = |wm: &Mat| {
            let mut t = Tape::new();
            let xv = t.leaf(x0.clone());
            let wv = t.leaf(wm.clone());
            let l = everything_graph(&mut t, xv, wv);
            t.scalar(l)
        };
        let fd_x = fd_grad(f_x, &x0, 1e-6);
        let fd_w = fd_grad(f_w, &w0, 1e-6);
        assert!(max_rel_err(grads.of(x).unwrap(), &fd_x) < 1e-6);
        assert!(max_rel_err(grads.of(w).unwrap(), &fd_w) < 1e-6);
    }

    #[test]
    fn layer_norm_and_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_mat(&mut rng, 3, 6);
        let g0 = rand_mat(&mut rng, 1, 6).mapv(|v| v + 1.5);
        let b0 = rand_mat(&mut rng, 1, 6);
        let target = Rc::new(rand_mat(&mut rng, 3, 6));
        let labels = Rc::new(vec![0usize, 1, 0]);

        let build = |t: &mut Tape, xv: Var, gv: Var, bv: Var| -> Var {
            let ln = t.layer_norm_rows(xv, gv, bv);
            let mse = t.mse_vs_const(ln, Rc::clone(&target));
            let sliced = t.slice_cols(ln, 1, 2);
            let ce = t.cross_entropy_mean(sliced, Rc::clone(&labels));
            let both = t.add(mse, ce);
            let cat = t.concat_rows(vec![both, mse]);
            t.mean_all(cat)
        };

        let mut tape = Tape::new();
        let (xv, gv, bv) = (
            tape.leaf(x0.clone()),
            tape.leaf(g0.clone()),
            tape.leaf(b0.clone()),
        );
        let loss = build(&mut tape, xv, gv, bv);
        let grads = tape.backward(loss);

        for (v0, var, which) in [(&x0, xv, 0usize), (&g0, gv, 1), (&b0, bv, 2)] {
            let f = |m: &Mat| {
                let mut t = Tape::new();
                let inputs = [
                    if which == 0 { m.clone() } else { x0.clone() },
                    if which == 1 { m.clone() } else { g0.clone() },
                    if which == 2 { m.clone() } else { b0.clone() },
                ];
                let xv = t.leaf(inputs[0].clone());
                let gv = t.leaf(inputs[1].clone());
                let bv = t.leaf(inputs[2].clone());
                let l = build(&mut t, xv, gv, bv);
                t.scalar(l)
            };
            let fd = fd_grad(f, v0, 1e-6);
            assert!(
                max_rel_err(grads.of(var).unwrap(), &fd) < 1e-6,
                "grad mismatch on input {which}"
            );
        }
    }

    #[test]
    fn gather_cols_and_concat_cols_roundtrip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_mat(&mut rng, 2, 5);

        let build = |t: &mut Tape, xv: Var| {
            let a = t.gather_cols(xv, Rc::new(vec![4, 0, 0, 2]));
            let b = t.slice_cols(xv, 1, 2);
            let cat = t.concat_cols(vec![a, b]);
            let sq = t.mul(cat, cat);
            t.sum_all(sq)
        };
        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss);
        let fd = fd_grad(
            |m: &Mat| {
                let mut t = Tape::new();
                let xv = t.leaf(m.clone());
                let l = build(&mut t, xv);
                t.scalar(l)
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(grads.of(xv).unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn param_grads_accumulate_across_leaves() {
        let w = row_mat(&[2.0, -1.0]);
        let mut tape = Tape::new();
        let a = tape.param_leaf(w.clone(), 0);
        let b = tape.param_leaf(w.clone(), 0);
        let s = tape.add(a, b);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss);
        let pg = tape.param_grads(&grads, 1);
        // d(sum(a+b))/dw through both leaves = 1 + 1
        assert_eq!(pg[0].as_ref().unwrap(), &row_mat(&[2.0, 2.0]));
    }
}
