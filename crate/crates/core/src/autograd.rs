//! Minimal reverse-mode autodiff over 2-D arrays.
//!
//! A [`Tape`] records each operation eagerly; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for every node. Matrices are
//! frames x channels throughout. The op set is exactly what the denoiser
//! and sync encoders need; nothing here is batched or lazy.

use ndarray::{Array2, Axis};

use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    /// A · Bᵀ
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    /// a (m x n) * r (1 x n), r broadcast over rows
    RowMul(Var, Var),
    RowAdd(Var, Var),
    /// Row-wise softmax; masked entries are exactly zero in the output,
    /// which already kills their gradient.
    Softmax(Var),
    /// scores[i,j] + bias[0, radius + clamp(j - i, ±radius)]
    RelBias { scores: Var, bias: Var, radius: usize },
    Tanh(Var),
    ConcatCols(Vec<Var>),
    SelectCols { x: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize, len: usize },
    /// Depthwise temporal convolution, odd width, zero padded same-length.
    /// w is width x channels.
    DwConv { x: Var, w: Var, dilation: usize },
    MeanRows(Var),
    MeanAll(Var),
    /// L2-normalize each row.
    NormalizeRows(Var),
    Clamp { x: Var, lo: T, hi: T },
    Ln(Var),
}

struct Node<T: Scalar> {
    value: Array2<T>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients for every node of a tape, produced by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss w.r.t. `v`; zeros if the node is unreachable.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Array2<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.dim();
        (s.0, s.1)
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul inner dims");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "matmul_nt inner dims");
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn row_mul(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.shape(r).0, 1, "row operand must be 1 x n");
        assert_eq!(self.shape(a).1, self.shape(r).1, "row_mul widths");
        let row = self.value(r).row(0).to_owned();
        let v = self.value(a) * &row;
        self.push(v, Op::RowMul(a, r))
    }

    pub fn row_add(&mut self, a: Var, r: Var) -> Var {
        assert_eq!(self.shape(r).0, 1, "row operand must be 1 x n");
        assert_eq!(self.shape(a).1, self.shape(r).1, "row_add widths");
        let row = self.value(r).row(0).to_owned();
        let v = self.value(a) + &row;
        self.push(v, Op::RowAdd(a, r))
    }

    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        self.softmax_rows_banded(x, causal, None)
    }

    /// Row-wise softmax over keys j with |j - i| <= band (and j <= i when
    /// causal); excluded entries are exactly zero. A bounded band makes the
    /// attention pattern independent of sequence length.
    pub fn softmax_rows_banded(&mut self, x: Var, causal: bool, band: Option<usize>) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.dim();
        let mut out = Array2::zeros((m, n));
        for i in 0..m {
            let hi = if causal { (i + 1).min(n) } else { n };
            let (lo, hi) = match band {
                Some(b) => (i.saturating_sub(b), hi.min(i + b + 1)),
                None => (0, hi),
            };
            let mut mx = T::neg_infinity();
            for j in lo..hi {
                mx = mx.max(xv[[i, j]]);
            }
            let mut sum = T::zero();
            for j in lo..hi {
                let e = (xv[[i, j]] - mx).exp();
                out[[i, j]] = e;
                sum += e;
            }
            for j in lo..hi {
                out[[i, j]] = out[[i, j]] / sum;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn rel_bias(&mut self, scores: Var, bias: Var, radius: usize) -> Var {
        assert_eq!(self.shape(bias), (1, 2 * radius + 1), "rel bias width");
        let sv = self.value(scores);
        let bv = self.value(bias);
        let (m, n) = sv.dim();
        let r = radius as isize;
        let mut out = sv.clone();
        for i in 0..m {
            for j in 0..n {
                let off = (j as isize - i as isize).clamp(-r, r);
                out[[i, j]] = out[[i, j]] + bv[[0, (off + r) as usize]];
            }
        }
        self.push(out, Op::RelBias { scores, bias, radius })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Array2::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat_cols row counts");
            out.slice_mut(ndarray::s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((xv.nrows(), idx.len()));
        for (k, &j) in idx.iter().enumerate() {
            out.column_mut(k).assign(&xv.column(j));
        }
        self.push(out, Op::SelectCols { x, idx: idx.to_vec() })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start, len })
    }

    pub fn dw_conv(&mut self, x: Var, w: Var, dilation: usize) -> Var {
        let (width, wc) = self.shape(w);
        assert!(width % 2 == 1, "depthwise kernel width must be odd");
        assert_eq!(wc, self.shape(x).1, "depthwise kernel channels");
        let xv = self.value(x);
        let wv = self.value(w);
        let (m, n) = xv.dim();
        let ctr = (width / 2) as isize;
        let mut out = Array2::zeros((m, n));
        for t in 0..m as isize {
            for k in 0..width as isize {
                let src = t + (k - ctr) * dilation as isize;
                if src < 0 || src >= m as isize {
                    continue;
                }
                for c in 0..n {
                    out[[t as usize, c]] =
                        out[[t as usize, c]] + wv[[k as usize, c]] * xv[[src as usize, c]];
                }
            }
        }
        self.push(out, Op::DwConv { x, w, dilation })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = T::from_f64(xv.nrows() as f64);
        let v = xv.sum_axis(Axis(0)).mapv(|s| s / m).insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cnt = T::from_f64(xv.len() as f64);
        let v = Array2::from_elem((1, 1), xv.sum() / cnt);
        self.push(v, Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let cnt = self.value(x).len();
        let m = self.mean_all(x);
        self.scale(m, T::from_f64(cnt as f64))
    }

    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        let mut out = v.clone();
        for mut row in out.rows_mut() {
            let norm = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            let denom = norm.max(T::from_f64(1e-12));
            row.mapv_inplace(|a| a / denom);
        }
        self.push(out, Op::NormalizeRows(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).mapv(|a| a.max(lo).min(hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.ln());
        self.push(v, Op::Ln(x))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Array2<T>) -> Var {
        let t = self.leaf(target.clone());
        let d = self.sub(pred, t);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Reverse sweep from a 1x1 loss node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar (1x1)");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for id in (0..=loss.0).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.mapv(|x| x * *c)),
                Op::AddScalar(a, _) => accumulate(&mut grads, *a, g),
                Op::RowMul(a, r) => {
                    let row = self.value(*r).row(0).to_owned();
                    let ga = &g * &row;
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *r, gr);
                }
                Op::RowAdd(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *r, gr);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let (m, n) = y.dim();
                    let mut gx = Array2::zeros((m, n));
                    for i in 0..m {
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[[i, j]] * y[[i, j]];
                        }
                        for j in 0..n {
                            gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RelBias { scores, bias, radius } => {
                    let (m, n) = g.dim();
                    let r = *radius as isize;
                    let mut gb = Array2::zeros((1, 2 * radius + 1));
                    for i in 0..m {
                        for j in 0..n {
                            let off = (j as isize - i as isize).clamp(-r, r);
                            gb[[0, (off + r) as usize]] =
                                gb[[0, (off + r) as usize]] + g[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *scores, g);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Tanh(a) => {
                    let gx = &g * &node.value.mapv(|y| T::one() - y * y);
                    accumulate(&mut grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        let gp = g.slice(ndarray::s![.., at..at + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += w;
                    }
                }
                Op::SelectCols { x, idx } => {
                    let (m, n) = self.shape(*x);
                    let mut gx = Array2::zeros((m, n));
                    for (k, &j) in idx.iter().enumerate() {
                        for i in 0..m {
                            gx[[i, j]] = gx[[i, j]] + g[[i, k]];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start, len } => {
                    let (m, n) = self.shape(*x);
                    let mut gx = Array2::zeros((m, n));
                    gx.slice_mut(ndarray::s![*start..*start + *len, ..]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::DwConv { x, w, dilation } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (m, n) = xv.dim();
                    let width = wv.nrows();
                    let ctr = (width / 2) as isize;
                    let mut gx = Array2::zeros((m, n));
                    let mut gw = Array2::zeros((width, n));
                    for t in 0..m as isize {
                        for k in 0..width as isize {
                            let src = t + (k - ctr) * *dilation as isize;
                            if src < 0 || src >= m as isize {
                                continue;
                            }
                            for c in 0..n {
                                gx[[src as usize, c]] = gx[[src as usize, c]]
                                    + wv[[k as usize, c]] * g[[t as usize, c]];
                                gw[[k as usize, c]] = gw[[k as usize, c]]
                                    + xv[[src as usize, c]] * g[[t as usize, c]];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::MeanRows(x) => {
                    let (m, n) = self.shape(*x);
                    let inv = T::one() / T::from_f64(m as f64);
                    let mut gx = Array2::zeros((m, n));
                    for i in 0..m {
                        for j in 0..n {
                            gx[[i, j]] = g[[0, j]] * inv;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanAll(x) => {
                    let (m, n) = self.shape(*x);
                    let inv = g[[0, 0]] / T::from_f64((m * n) as f64);
                    accumulate(&mut grads, *x, Array2::from_elem((m, n), inv));
                }
                Op::NormalizeRows(x) => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let (m, n) = xv.dim();
                    let mut gx = Array2::zeros((m, n));
                    for i in 0..m {
                        let norm = xv
                            .row(i)
                            .iter()
                            .map(|&a| a * a)
                            .sum::<T>()
                            .sqrt()
                            .max(T::from_f64(1e-12));
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[[i, j]] * y[[i, j]];
                        }
                        for j in 0..n {
                            gx[[i, j]] = (g[[i, j]] - y[[i, j]] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    ndarray::Zip::from(&mut gx).and(xv).for_each(|gv, &v| {
                        if v <= *lo || v >= *hi {
                            *gv = T::zero();
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Ln(x) => {
                    let gx = &g / self.value(*x);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}
