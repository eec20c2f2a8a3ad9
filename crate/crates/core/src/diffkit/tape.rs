//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value on the tape is an `Array2<f64>`; vectors are `n × 1` columns
//! and scalars are `1 × 1`. Operations are recorded in evaluation order, so
//! replaying the node list backwards visits every node after all of its
//! consumers.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use super::sparse::Csr;
use super::{leaky_relu, log_sigmoid, sigmoid};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, bias: Var },
    Affine { a: Var, scale: f64 },
    ScaleRows { a: Var, w: Var },
    LeakyRelu { a: Var, slope: f64 },
    Sigmoid(Var),
    LogSigmoid(Var),
    Abs(Var),
    Gather { a: Var, idx: Rc<Vec<usize>> },
    ScatterAdd { a: Var, idx: Rc<Vec<usize>> },
    SliceRows { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    RowDot(Var, Var),
    RowSum(Var),
    Sum(Var),
    SumSquares(Var),
    SegmentSoftmax { a: Var, offsets: Rc<Vec<usize>> },
    SpMM { a: Var, mat_t: Rc<Csr> },
    NormalizeRows(Var),
    Contrastive { s: Var, exclusive: bool },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Single-owner recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), x))
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let av = if ta { av.t() } else { av.view() };
        let bv = if tb { bv.t() } else { bv.view() };
        assert_eq!(av.ncols(), bv.nrows(), "matmul shape mismatch");
        let out = av.dot(&bv);
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "elementwise shape mismatch");
        let out = Zip::from(av).and(bv).map_collect(|&x, &y| f(x, y));
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        assert_eq!(bv.nrows(), 1);
        assert_eq!(av.ncols(), bv.ncols(), "bias width mismatch");
        let out = av + &bv.row(0);
        self.push(out, Op::AddRow { a, bias })
    }

    /// `scale · a + shift`; the shift is a constant.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).mapv(|x| scale * x + shift);
        self.push(out, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    /// Multiplies row `i` of `a` by `w[i]` (`w` is `m × 1`).
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let av = self.value(a);
        let wv = self.value(w);
        assert_eq!(wv.dim(), (av.nrows(), 1), "row weights shape mismatch");
        let out = av * &wv.column(0).insert_axis(Axis(1));
        self.push(out, Op::ScaleRows { a, w })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).mapv(|x| leaky_relu(x, slope));
        self.push(out, Op::LeakyRelu { a, slope })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(log_sigmoid);
        self.push(out, Op::LogSigmoid(a))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let out = av.select(Axis(0), &idx);
        self.push(out, Op::Gather { a, idx })
    }

    /// Adds row `k` of `a` into row `idx[k]` of a zero matrix with `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.nrows(), idx.len());
        let mut out = Array2::zeros((rows, av.ncols()));
        for (k, &r) in idx.iter().enumerate() {
            let mut dst = out.row_mut(r);
            dst += &av.row(k);
        }
        self.push(out, Op::ScatterAdd { a, idx })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat rows mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise dot product, `m × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "row_dot shape mismatch");
        let out = (av * bv).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowDot(a, b))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).sum();
        self.push(Array2::from_elem((1, 1), v), Op::SumSquares(a))
    }

    /// Softmax of an `m × 1` column within contiguous segments
    /// `offsets[k]..offsets[k + 1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: Rc<Vec<usize>>) -> Var {
        let av = self.value(a);
        assert_eq!(av.ncols(), 1);
        assert_eq!(*offsets.last().unwrap_or(&0), av.nrows());
        let col = av.column(0);
        let mut out = Array2::zeros(av.dim());
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            let max = col
                .slice(s![lo..hi])
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut total = 0.0;
            for k in lo..hi {
                let e = (col[k] - max).exp();
                out[[k, 0]] = e;
                total += e;
            }
            for k in lo..hi {
                out[[k, 0]] /= total;
            }
        }
        self.push(out, Op::SegmentSoftmax { a, offsets })
    }

    /// Sparse-dense product `mat · a`.
    pub fn spmm(&mut self, mat: &Csr, mat_t: Rc<Csr>, a: Var) -> Var {
        let out = mat.matmul(self.value(a).view());
        self.push(out, Op::SpMM { a, mat_t })
    }

    /// Unit-normalizes each row; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        self.push(out, Op::NormalizeRows(a))
    }

    /// `Σ_n [ logsumexp_{m ∈ D(n)} s[n,m] − s[n,n] ]` over a square logit
    /// matrix; `D(n)` excludes `n` when `exclusive`.
    pub fn contrastive(&mut self, s: Var, exclusive: bool) -> Var {
        let sv = self.value(s);
        let n = sv.nrows();
        assert_eq!(sv.ncols(), n, "contrastive logits must be square");
        assert!(!exclusive || n >= 2, "exclusive denominator needs at least two rows");
        let mut total = 0.0;
        for r in 0..n {
            total += row_lse(sv.row(r), r, exclusive) - sv[[r, r]];
        }
        self.push(Array2::from_elem((1, 1), total), Op::Contrastive { s, exclusive })
    }

    /// Reverse pass seeded with `d out / d out = 1`; `out` must be `1 × 1`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let val = &node.value;
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b, ta, tb } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let a_eff = if *ta { av.t() } else { av.view() };
                    let b_eff = if *tb { bv.t() } else { bv.view() };
                    // d op(A) = G op(B)^T, d op(B) = op(A)^T G
                    let ga = if *ta { b_eff.dot(&g.t()) } else { g.dot(&b_eff.t()) };
                    let gb = if *tb { g.t().dot(&a_eff) } else { a_eff.t().dot(&g) };
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], -&g);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = &g / bv;
                    let gb = Zip::from(&g)
                        .and(val)
                        .and(bv)
                        .map_collect(|&g, &q, &d| -g * q / d);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow { a, bias } => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[bias.0], gb);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Affine { a, scale } => {
                    accumulate(&mut grads[a.0], g * *scale);
                }
                Op::ScaleRows { a, w } => {
                    let av = self.value(*a);
                    let wv = self.value(*w);
                    let gw = (&g * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g * &wv.column(0).insert_axis(Axis(1));
                    accumulate(&mut grads[w.0], gw);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LeakyRelu { a, slope } => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| if x >= 0.0 { g } else { g * slope });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let ga = Zip::from(&g).and(val).map_collect(|&g, &y| g * y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LogSigmoid(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * sigmoid(-x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Abs(a) => {
                    let ga = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gather { a, idx } => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Array2::zeros((rows, cols));
                    for (k, &r) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ScatterAdd { a, idx } => {
                    accumulate(&mut grads[a.0], g.select(Axis(0), idx));
                }
                Op::SliceRows { a, start } => {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        let gp = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads[p.0], gp);
                        offset += w;
                    }
                }
                Op::RowDot(a, b) => {
                    let gcol = g.column(0).insert_axis(Axis(1));
                    let ga = self.value(*b) * &gcol;
                    let gb = self.value(*a) * &gcol;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::RowSum(a) => {
                    let (rows, cols) = self.shape(*a);
                    let gcol = g.column(0).insert_axis(Axis(1));
                    let ga = Array2::zeros((rows, cols)) + &gcol;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.shape(*a), g[[0, 0]]);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumSquares(a) => {
                    let ga = self.value(*a) * (2.0 * g[[0, 0]]);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SegmentSoftmax { a, offsets } => {
                    let mut ga = Array2::zeros(val.dim());
                    for w in offsets.windows(2) {
                        let (lo, hi) = (w[0], w[1]);
                        let inner: f64 = (lo..hi).map(|k| val[[k, 0]] * g[[k, 0]]).sum();
                        for k in lo..hi {
                            ga[[k, 0]] = val[[k, 0]] * (g[[k, 0]] - inner);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SpMM { a, mat_t } => {
                    accumulate(&mut grads[a.0], mat_t.matmul(g.view()));
                }
                Op::NormalizeRows(a) => {
                    let av = self.value(*a);
                    let mut ga = Array2::zeros(av.dim());
                    for r in 0..av.nrows() {
                        let n = av.row(r).dot(&av.row(r)).sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let y = val.row(r);
                        let gr = g.row(r);
                        let proj = y.dot(&gr);
                        let mut dst = ga.row_mut(r);
                        dst.assign(&((&gr - &(&y * proj)) / n));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Contrastive { s, exclusive } => {
                    let sv = self.value(*s);
                    let n = sv.nrows();
                    let scale = g[[0, 0]];
                    let mut gs = Array2::zeros((n, n));
                    for r in 0..n {
                        let row = sv.row(r);
                        let lse = row_lse(row, r, *exclusive);
                        for m in 0..n {
                            if *exclusive && m == r {
                                continue;
                            }
                            gs[[r, m]] += scale * (row[m] - lse).exp();
                        }
                        gs[[r, r]] -= scale;
                    }
                    accumulate(&mut grads[s.0], gs);
                }
            }
        }
        Gradients { grads }
    }
}

fn row_lse(row: ndarray::ArrayView1<'_, f64>, skip: usize, exclusive: bool) -> f64 {
    let keep = |m: usize| !(exclusive && m == skip);
    let max = row
        .iter()
        .enumerate()
        .filter(|(m, _)| keep(*m))
        .fold(f64::NEG_INFINITY, |acc, (_, &x)| acc.max(x));
    let total: f64 = row
        .iter()
        .enumerate()
        .filter(|(m, _)| keep(*m))
        .map(|(_, &x)| (x - max).exp())
        .sum();
    max + total.ln()
}
