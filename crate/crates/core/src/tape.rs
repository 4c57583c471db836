//! Reverse-mode automatic differentiation over dense 2D tensors.
//!
//! Everything the model touches is expressed as a 2D matrix: a T x J x d
//! feature block is stored frame-major as a (T*J) x d matrix, a scalar as
//! 1 x 1. The [`Tape`] is a growable arena of nodes; builder methods append
//! a node and return its [`Var`] handle. [`Tape::backward`] walks the arena
//! in reverse and produces a gradient per node.
//!
//! Training and verification run in f64 so finite-difference checks are
//! meaningful; checkpoints are truncated to f32 at serialization time.

use ndarray::{s, Array2, Axis};

use crate::error::{KasError, Result};

/// Epsilon added to the per-row variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Rows with L2 norm below this are treated as zero in `row_norms` backward.
const ROW_NORM_GUARD: f64 = 1e-30;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a * b^T without materializing the transpose.
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// n x m plus a broadcast 1 x m row.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// n x m times a broadcast 1 x m row.
    MulRow(Var, Var),
    /// n x m times a broadcast n x 1 column.
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    Transpose(Var),
    GatherRows(Var, std::sync::Arc<Vec<usize>>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    /// n x 1 vector of per-row L2 norms.
    RowNorms(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    param: Option<String>,
}

/// Growable computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Array2<f64>> {
        self.grads[var.0].as_ref()
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

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a constant leaf (inputs, adjacency matrices).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Inserts a named parameter leaf; its gradient can later be routed
    /// back to a parameter store by name.
    pub fn param(&mut self, value: Array2<f64>, name: &str) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn param_name(&self, var: Var) -> Option<&str> {
        self.nodes[var.0].param.as_deref()
    }

    fn shape_err(&self, what: &str, a: Var, b: Var) -> KasError {
        KasError::ShapeMismatch {
            expected: format!("{what}: lhs {:?}", self.shape(a)),
            got: format!("rhs {:?}", self.shape(b)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ka) = self.shape(a);
        let (kb, _) = self.shape(b);
        if ka != kb {
            return Err(self.shape_err("matmul inner dims", a, b));
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// a * b^T
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ka) = self.shape(a);
        let (_, kb) = self.shape(b);
        if ka != kb {
            return Err(self.shape_err("matmul_bt inner dims", a, b));
        }
        let value = self.value(a).dot(&self.value(b).t());
        Ok(self.push(value, Op::MatMulBT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", a, b));
        }
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Adds a 1 x m row vector to every row of an n x m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != self.shape(a).1 {
            return Err(self.shape_err("add_row", a, row));
        }
        let value = self.value(a) + &self.value(row).row(0);
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Multiplies every row of an n x m matrix by a 1 x m row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != self.shape(a).1 {
            return Err(self.shape_err("mul_row", a, row));
        }
        let value = self.value(a) * &self.value(row).row(0);
        Ok(self.push(value, Op::MulRow(a, row)))
    }

    /// Multiplies row i of an n x m matrix by scale[i] (n x 1).
    pub fn scale_rows(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (sr, sc) = self.shape(scale);
        if sc != 1 || sr != self.shape(a).0 {
            return Err(self.shape_err("scale_rows", a, scale));
        }
        let value = self.value(a) * &self.value(scale).column(0).insert_axis(Axis(1));
        Ok(self.push(value, Op::ScaleRows(a, scale)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Row-wise softmax (over the last axis).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization (no affine; compose with `mul_row` and
    /// `add_row` for the learned gain and shift).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.len() as f64;
            let mean = row.sum() / m;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let sigma = (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) / sigma);
        }
        self.push(value, Op::LayerNormRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let (n, m) = self.shape(a);
        if indices.iter().any(|&i| i >= n) {
            return Err(KasError::ShapeMismatch {
                expected: format!("row indices < {n}"),
                got: "out-of-range index".into(),
            });
        }
        let mut value = Array2::zeros((indices.len(), m));
        for (dst, &src) in indices.iter().enumerate() {
            value.row_mut(dst).assign(&self.value(a).row(src));
        }
        Ok(self.push(value, Op::GatherRows(a, std::sync::Arc::new(indices))))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, _) = self.shape(a);
        if start + len > n {
            return Err(KasError::ShapeMismatch {
                expected: format!("row slice within {n}"),
                got: format!("{start}..{}", start + len),
            });
        }
        let value = self
            .value(a)
            .slice(s![start..start + len, ..])
            .to_owned();
        Ok(self.push(value, Op::SliceRows(a, start, len)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, m) = self.shape(a);
        if start + len > m {
            return Err(KasError::ShapeMismatch {
                expected: format!("col slice within {m}"),
                got: format!("{start}..{}", start + len),
            });
        }
        let value = self
            .value(a)
            .slice(s![.., start..start + len])
            .to_owned();
        Ok(self.push(value, Op::SliceCols(a, start, len)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != m) {
            return Err(KasError::ShapeMismatch {
                expected: format!("all parts with {m} cols"),
                got: "ragged concat_rows".into(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut value = Array2::zeros((total, m));
        let mut at = 0;
        for &p in parts {
            let rows = self.shape(p).0;
            value
                .slice_mut(s![at..at + rows, ..])
                .assign(self.value(p));
            at += rows;
        }
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(KasError::ShapeMismatch {
                expected: format!("all parts with {n} rows"),
                got: "ragged concat_cols".into(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Array2::zeros((n, total));
        let mut at = 0;
        for &p in parts {
            let cols = self.shape(p).1;
            value
                .slice_mut(s![.., at..at + cols])
                .assign(self.value(p));
            at += cols;
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let value = Array2::from_elem((1, 1), self.value(a).sum() / (n * m) as f64);
        self.push(value, Op::MeanAll(a))
    }

    /// n x 1 vector of per-row Euclidean norms. Rows with (near-)zero norm
    /// get a zero gradient.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let (n, _) = self.shape(a);
        let mut value = Array2::zeros((n, 1));
        for (i, row) in self.value(a).rows().into_iter().enumerate() {
            value[(i, 0)] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        self.push(value, Op::RowNorms(a))
    }

    /// Reverse pass from a scalar (1 x 1) node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
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
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * &self.value(*row).row(0);
                    let gr = (&g * self.value(*a))
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::ScaleRows(a, scale) => {
                    let col = self.value(*scale).column(0).insert_axis(Axis(1));
                    let ga = &g * &col;
                    let gs = (&g * self.value(*a))
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *scale, gs);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &g * *c);
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for i in 0..y.dim().0 {
                        let yi = y.row(i);
                        let gi = g.row(i);
                        let dot: f64 = yi.iter().zip(gi.iter()).map(|(y, g)| y * g).sum();
                        for k in 0..y.dim().1 {
                            ga[(i, k)] = yi[k] * (gi[k] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a) => {
                    let y = &node.value;
                    let x = self.value(*a);
                    let (n, m) = x.dim();
                    let mf = m as f64;
                    let mut ga = Array2::zeros((n, m));
                    for i in 0..n {
                        let mean = x.row(i).sum() / mf;
                        let var = x
                            .row(i)
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>()
                            / mf;
                        let sigma = (var + LAYER_NORM_EPS).sqrt();
                        let g_mean = g.row(i).sum() / mf;
                        let gy_mean: f64 = g
                            .row(i)
                            .iter()
                            .zip(y.row(i).iter())
                            .map(|(g, y)| g * y)
                            .sum::<f64>()
                            / mf;
                        for k in 0..m {
                            ga[(i, k)] =
                                (g[(i, k)] - g_mean - y[(i, k)] * gy_mean) / sigma;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.t().to_owned());
                }
                Op::GatherRows(a, indices) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (src, &dst) in indices.iter().enumerate() {
                        let mut row = ga.row_mut(dst);
                        row += &g.row(src);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, len) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    let mut view = ga.slice_mut(s![*start..start + len, ..]);
                    view += &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start, len) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    let mut view = ga.slice_mut(s![.., *start..start + len]);
                    view += &g;
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        let gp = g.slice(s![at..at + rows, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let cols = self.shape(p).1;
                        let gp = g.slice(s![.., at..at + cols]).to_owned();
                        accumulate(&mut grads, p, gp);
                        at += cols;
                    }
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[(0, 0)]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let (n, m) = self.value(*a).dim();
                    let ga =
                        Array2::from_elem((n, m), g[(0, 0)] / (n * m) as f64);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNorms(a) => {
                    let x = self.value(*a);
                    let r = &node.value;
                    let mut ga = Array2::zeros(x.dim());
                    for i in 0..x.dim().0 {
                        if r[(i, 0)] > ROW_NORM_GUARD {
                            let c = g[(i, 0)] / r[(i, 0)];
                            for k in 0..x.dim().1 {
                                ga[(i, k)] = c * x[(i, k)];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }

    /// Collects (name, gradient) pairs for every parameter leaf that
    /// received a gradient.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                if let Some(g) = grads.grads[idx].as_ref() {
                    out.push((name.clone(), g.clone()));
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], var: Var, g: Array2<f64>) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}
