//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is a 2-D array; scalars are `1 x 1`. A forward pass
//! records nodes in topological order, so the backward sweep is a single
//! reverse iteration. Leaves are either constants (no gradient ever flows into
//! them) or watched parameters whose gradients are returned by
//! [`Tape::backward`]. Leaves borrow their storage, so building a tape over a
//! large frozen model copies nothing.

use std::borrow::Cow;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, rows: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    Sum(Var),
    Log1mExp(Var),
    Softplus(Var),
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
    watched: bool,
}

/// A recording of one forward computation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of a scalar output with respect to the watched leaves.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of a watched leaf; `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `ln(1 - e^x)` for `x < 0`, accurate near both ends.
pub fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
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

impl<'a> Default for Tape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(512),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            watched: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A borrowed constant leaf.
    pub fn constant(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            watched: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An owned constant leaf.
    pub fn constant_owned(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Array2::from_elem((1, 1), x), Op::Leaf)
    }

    /// A borrowed leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: &'a Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            watched: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Row-wise root-mean-square normalisation with a learned `1 x d` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let inv_rms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| 1.0 / (r.iter().map(|e| e * e).sum::<f64>() / d + RMS_EPS).sqrt())
            .collect();
        let g = self.value(gain);
        let mut out = xv.clone();
        for (mut row, &r) in out.rows_mut().into_iter().zip(&inv_rms) {
            Zip::from(&mut row).and(g.row(0)).for_each(|o, &gj| *o *= r * gj);
        }
        self.push(out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Row-wise softmax where `visible[i][j] == false` forces weight exactly 0.
    /// Every row must have at least one visible entry.
    pub fn masked_softmax(&mut self, a: Var, visible: &Array2<bool>) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros(av.raw_dim());
        for ((src, vis), mut dst) in av.rows().into_iter().zip(visible.rows()).zip(out.rows_mut()) {
            let max = src
                .iter()
                .zip(vis.iter())
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for ((d, &x), &m) in dst.iter_mut().zip(src.iter()).zip(vis.iter()) {
                if m {
                    *d = (x - max).exp();
                    sum += *d;
                }
            }
            dst.mapv_inplace(|e| e / sum);
        }
        self.push(out, Op::MaskedSoftmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    /// Embedding lookup: one output row per entry of `rows`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((rows.len(), t.ncols()));
        for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
            dst.assign(&t.row(r));
        }
        self.push(out, Op::GatherRows { table, rows: rows.to_vec() })
    }

    /// `n x 1` column holding `x[i, cols[i]]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Var {
        let xv = self.value(x);
        let out = Array2::from_shape_fn((cols.len(), 1), |(i, _)| xv[[i, cols[i]]]);
        self.push(out, Op::Pick { x, cols: cols.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(x))
    }

    /// Elementwise `ln(1 - e^x)`.
    pub fn log1mexp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(log1mexp);
        self.push(v, Op::Log1mExp(x))
    }

    /// Elementwise `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(softplus);
        self.push(v, Op::Softplus(x))
    }

    /// Back-propagates from the scalar `output`. Only watched leaves keep
    /// their gradients in the result.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.nodes[output.0].value.raw_dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    if node.watched {
                        grads[idx] = Some(g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gi, &x| *gi *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let d = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut gg = Array2::zeros(gv.raw_dim());
                    for (i, &r) in inv_rms.iter().enumerate() {
                        let xr = xv.row(i);
                        let dy = g.row(i);
                        let mut dot = 0.0;
                        for j in 0..xr.len() {
                            let u = dy[j] * gv[[0, j]];
                            dot += u * xr[j];
                            gg[[0, j]] += dy[j] * xr[j] * r;
                        }
                        let coef = r * r * r * dot / d;
                        for j in 0..xr.len() {
                            gx[[i, j]] = r * dy[j] * gv[[0, j]] - xr[j] * coef;
                        }
                    }
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *x, gx);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.raw_dim());
                    for ((yr, gr), mut out) in y.rows().into_iter().zip(g.rows()).zip(ga.rows_mut()) {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        Zip::from(&mut out)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|o, &yi, &gi| *o = yi * (gi - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let total: f64 = gr.sum();
                        Zip::from(&mut gr).and(&yr).for_each(|gi, &yi| *gi -= yi.exp() * total);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![offset..offset + rows, ..]).to_owned());
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., offset..offset + cols]).to_owned());
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::GatherRows { table, rows } => {
                    let mut gt = Array2::zeros(self.value(*table).raw_dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Pick { x, cols } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (i, &c) in cols.iter().enumerate() {
                        gx[[i, c]] += g[[i, 0]];
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *x, gx);
                }
                Op::Log1mExp(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gi, &xi| *gi *= -1.0 / (-xi).exp_m1());
                    acc(&mut grads, *x, gx);
                }
                Op::Softplus(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gi, &xi| *gi *= sigmoid(xi));
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Gradients { grads }
    }
}
