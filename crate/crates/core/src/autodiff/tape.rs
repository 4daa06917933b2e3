//! Tape-based reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Every operation appends one node to the tape, so node order is already a
//! topological order and the backward sweep is a single reverse scan. Rank-1
//! and scalar values are stored as `1 × n` and `1 × 1` matrices.
//!
//! Parameters from a [`ParamStore`] are bound lazily by [`Tape::param`] and
//! borrowed rather than copied; their gradients come back keyed by
//! [`ParamId`] in the [`Gradients`] returned from [`Tape::backward`].

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Normalize down each column.
    Rows,
    /// Normalize along each row.
    Cols,
}

enum Data<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Data<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Data::Owned(v) => v,
            Data::Borrowed(v) => v,
        }
    }
}

enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Softmax(Var, Axis),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Gather(Var, Vec<usize>),
    RowSelect(Vec<Var>, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<(f64, bool)>),
    LogClamp(Var, f64, f64),
    XLogX(Var),
    WeightedSum(Var, Vec<f64>),
}

struct Node<'p> {
    rows: usize,
    cols: usize,
    data: Data<'p>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            track: true,
        }
    }

    /// A tape that can bind the parameters of `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            nodes: Vec::new(),
            store: Some(store),
            bound: vec![None; store.len()],
            track: true,
        }
    }

    /// Like [`Tape::with_params`] but nothing requires grad; for evaluation.
    pub fn inference(store: &'p ParamStore) -> Self {
        Tape {
            track: false,
            ..Tape::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- construction -------------------------------------------------

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, values.len());
        self.nodes.push(Node {
            rows,
            cols,
            data: Data::Owned(values),
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `tensor`; it requires grad iff the tensor does.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Var> {
        let (r, c) = tensor.matrix_dims()?;
        Ok(self.push(r, c, tensor.values().to_vec(), Op::Leaf(None), tensor.requires_grad()))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(shape_err!("constant {rows}x{cols} with {} values", values.len()));
        }
        Ok(self.push(rows, cols, values, Op::Leaf(None), false))
    }

    /// Binds a stored parameter, reusing the node if it is already bound.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.store.expect("tape was not created with a parameter store");
        let t = store.tensor(id);
        let (rows, cols) = t.matrix_dims().expect("parameters are rank 1 or 2");
        self.nodes.push(Node {
            rows,
            cols,
            data: Data::Borrowed(t.values()),
            op: Op::Leaf(Some(id)),
            requires_grad: t.requires_grad() && self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    // ---- inspection ---------------------------------------------------

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].data.as_slice()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn row(&self, v: Var, r: usize) -> &[f64] {
        let c = self.cols(v);
        &self.value(v)[r * c..(r + 1) * c]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::new(vec![r, c], self.value(v).to_vec()).expect("node shape is consistent")
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err!("matmul_nt {m}x{k} by ({n}x{k2})^T"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(c, r, out, Op::Transpose(a), rg)
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            return Err(shape_err!("add_row: {r}x{c} with bias {:?}", self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(r, c, out, Op::AddRow(a, bias), rg))
    }

    /// Multiplies row `i` of `a` by entry `i` of the `r × 1` column `s`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(s) != (r, 1) {
            return Err(shape_err!("mul_col: {r}x{c} with scale {:?}", self.shape(s)));
        }
        let sv = self.value(s);
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
            row.iter_mut().for_each(|x| *x *= sv[i]);
        }
        let rg = self.rg(&[a, s]);
        Ok(self.push(r, c, out, Op::MulCol(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * k).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Scale(a, k), rg)
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Gelu(a), rg)
    }

    /// `ln(x)` with `x` clamped into `[lo, hi]`; zero gradient where clamped.
    pub fn log_clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x.clamp(lo, hi).ln()).collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::LogClamp(a, lo, hi), rg)
    }

    /// `x ln x` with `0 ln 0 = 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::XLogX(a), rg)
    }

    // ---- normalizations -----------------------------------------------

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        match axis {
            Axis::Cols => {
                for i in 0..r {
                    softmax_into(&x[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
                }
            }
            Axis::Rows => {
                let mut col = vec![0.0; r];
                let mut res = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = x[i * c + j];
                    }
                    softmax_into(&col, &mut res);
                    for i in 0..r {
                        out[i * c + j] = res[i];
                    }
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::Softmax(a, axis), rg)
    }

    /// Row softmax of a square score matrix with entries above the diagonal
    /// masked out (they come out as exact zeros).
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(shape_err!("causal softmax needs a square matrix, got {r}x{c}"));
        }
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&x[i * c..i * c + i + 1], &mut out[i * c..i * c + i + 1]);
        }
        let rg = self.rg(&[a]);
        // The backward formula y ⊙ (g − Σ g y) already yields 0 where y = 0.
        Ok(self.push(r, c, out, Op::Softmax(a, Axis::Cols), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row layer normalization with `1 × c` affine parameters.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(shape_err!("layer norm over zero features"));
        }
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(shape_err!("layer norm affine params must be 1x{c}"));
        }
        let x = self.value(a);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(&[a, gamma, beta]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Divides each row by `max(‖row‖, floor)`.
    pub fn l2_normalize_rows(&mut self, a: Var, floor: f64) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a);
        let mut denoms = vec![(0.0, false); r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = n.max(floor);
            denoms[i] = (d, n < floor);
            for j in 0..c {
                out[i * c + j] = row[j] / d;
            }
        }
        let rg = self.rg(&[a]);
        self.push(r, c, out, Op::L2NormalizeRows(a, denoms), rg)
    }

    // ---- structural ---------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.cols(p))
            .ok_or_else(|| shape_err!("concat_rows of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != c {
                return Err(shape_err!("concat_rows width {} vs {}", self.cols(p), c));
            }
            out.extend_from_slice(self.value(p));
            rows += self.rows(p);
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(shape_err!("slice_rows {start}..{} of {r} rows", start + len));
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.rows(p))
            .ok_or_else(|| shape_err!("concat_cols of nothing"))?;
        if parts.iter().any(|&p| self.rows(p) != r) {
            return Err(shape_err!("concat_cols with unequal row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let c = self.cols(p);
            let v = self.value(p);
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(&v[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err!("slice_cols {start}..{} of {c} cols", start + len));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), rg))
    }

    /// Rows of `table` at `ids` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Data(format!("token id {id} outside vocabulary of {r}")));
            }
            out.extend_from_slice(&t[id * c..(id + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(ids.len(), c, out, Op::Gather(table, ids.to_vec()), rg))
    }

    /// Row `i` of the result is row `i` of `candidates[pick[i]]`.
    pub fn row_select(&mut self, candidates: &[Var], pick: &[usize]) -> Result<Var> {
        let first = *candidates
            .first()
            .ok_or_else(|| shape_err!("row_select with no candidates"))?;
        let (r, c) = self.shape(first);
        if candidates.iter().any(|&v| self.shape(v) != (r, c)) {
            return Err(shape_err!("row_select candidates differ in shape"));
        }
        if pick.len() != r || pick.iter().any(|&k| k >= candidates.len()) {
            return Err(shape_err!("row_select pick list does not fit"));
        }
        let mut out = Vec::with_capacity(r * c);
        for (i, &k) in pick.iter().enumerate() {
            out.extend_from_slice(&self.value(candidates[k])[i * c..(i + 1) * c]);
        }
        let rg = self.rg(candidates);
        Ok(self.push(r, c, out, Op::RowSelect(candidates.to_vec(), pick.to_vec()), rg))
    }

    /// `r × 1` column holding `a[i, cols[i]]`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(shape_err!("pick_per_row index list does not fit {r}x{c}"));
        }
        let v = self.value(a);
        let out = cols.iter().enumerate().map(|(i, &j)| v[i * c + j]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(r, 1, out, Op::PickPerRow(a, cols.to_vec()), rg))
    }

    // ---- reductions ---------------------------------------------------

    /// Column means, `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::Data("mean over zero rows".into()));
        }
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for row in v.chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(1, c, out, Op::MeanRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Scalar `Σ a_ij · w_ij` for constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(shape_err!(
                "weighted_sum: {} weights for {} values",
                weights.len(),
                self.value(a).len()
            ));
        }
        let s = self.value(a).iter().zip(weights).map(|(x, w)| x * w).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(1, 1, vec![s], Op::WeightedSum(a, weights.to_vec()), rg))
    }

    /// Scalar at flat index `idx`.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        let n = self.value(a).len();
        if idx >= n {
            return Err(shape_err!("pick index {idx} of {n}"));
        }
        let mut w = vec![0.0; n];
        w[idx] = 1.0;
        self.weighted_sum(a, &w)
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = *terms.first().ok_or_else(|| shape_err!("sum of no terms"))?;
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params = Vec::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, params });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf(pid) = node.op {
                if let Some(pid) = pid {
                    if grads[i].is_some() {
                        params.push((pid, Var(i)));
                    }
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = (node.rows, node.cols);
        let y = node.data.as_slice();
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                if self.requires_grad(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.value(*b), true, ga, true);
                }
                if self.requires_grad(*b) {
                    let gb = grad_buf(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a), true, g, false, gb, true);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                if self.requires_grad(*a) {
                    let ga = grad_buf(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.value(*b), false, ga, true);
                }
                if self.requires_grad(*b) {
                    let gb = grad_buf(grads, *b, n * k);
                    gemm(n, m, k, g, true, self.value(*a), false, gb, true);
                }
            }
            Op::Transpose(a) => {
                if self.requires_grad(*a) {
                    // output is c_in x r_in = r x c; input is c x r
                    let ga = grad_buf(grads, *a, r * c);
                    for p in 0..r {
                        for q in 0..c {
                            ga[q * r + p] += g[p * c + q];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b));
                self.acc(grads, *b, g.iter().zip(av).map(|(g, a)| g * a));
            }
            Op::AddRow(a, bias) => {
                self.acc(grads, *a, g.iter().copied());
                if self.requires_grad(*bias) {
                    let gb = grad_buf(grads, *bias, c);
                    for row in g.chunks(c.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::MulCol(a, s) => {
                let sv = self.value(*s);
                if self.requires_grad(*a) {
                    let ga = grad_buf(grads, *a, r * c);
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * c + j] += g[ii * c + j] * sv[ii];
                        }
                    }
                }
                if self.requires_grad(*s) {
                    let av = self.value(*a);
                    let gs = grad_buf(grads, *s, r);
                    for ii in 0..r {
                        gs[ii] += (0..c).map(|j| g[ii * c + j] * av[ii * c + j]).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, k) => self.acc(grads, *a, g.iter().map(|x| x * k)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)));
            }
            Op::LogClamp(a, lo, hi) => {
                let x = self.value(*a);
                self.acc(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(g, &x)| {
                        if x >= *lo && x <= *hi {
                            g / x
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::XLogX(a) => {
                let x = self.value(*a);
                self.acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { g * (x.ln() + 1.0) } else { 0.0 }),
                );
            }
            Op::Softmax(a, axis) => {
                if !self.requires_grad(*a) {
                    return;
                }
                let ga = grad_buf(grads, *a, r * c);
                match axis {
                    Axis::Cols => {
                        for ii in 0..r {
                            let yr = &y[ii * c..(ii + 1) * c];
                            let gr = &g[ii * c..(ii + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                ga[ii * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                    Axis::Rows => {
                        for j in 0..c {
                            let dot: f64 = (0..r).map(|ii| y[ii * c + j] * g[ii * c + j]).sum();
                            for ii in 0..r {
                                ga[ii * c + j] += y[ii * c + j] * (g[ii * c + j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if !self.requires_grad(*a) {
                    return;
                }
                let ga = grad_buf(grads, *a, r * c);
                for ii in 0..r {
                    let gsum: f64 = g[ii * c..(ii + 1) * c].iter().sum();
                    for j in 0..c {
                        ga[ii * c + j] += g[ii * c + j] - y[ii * c + j].exp() * gsum;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                if self.requires_grad(*gamma) {
                    let gg = grad_buf(grads, *gamma, c);
                    for ii in 0..r {
                        for j in 0..c {
                            gg[j] += g[ii * c + j] * xhat[ii * c + j];
                        }
                    }
                }
                if self.requires_grad(*beta) {
                    let gb = grad_buf(grads, *beta, c);
                    for ii in 0..r {
                        for j in 0..c {
                            gb[j] += g[ii * c + j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = grad_buf(grads, *x, r * c);
                    let n = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for ii in 0..r {
                        let h = &xhat[ii * c..(ii + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[ii * c + j] * gam[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(h).map(|(d, h)| d * h).sum();
                        let inv = inv_std[ii];
                        for j in 0..c {
                            gx[ii * c + j] += inv / n * (n * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, g[off..off + len].iter().copied());
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                if self.requires_grad(*a) {
                    let (ar, ac) = self.shape(*a);
                    let ga = grad_buf(grads, *a, ar * ac);
                    ga[start * ac..start * ac + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, x)| *o += x);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.cols(p);
                    if self.requires_grad(p) {
                        let gp = grad_buf(grads, p, r * pc);
                        for ii in 0..r {
                            for j in 0..pc {
                                gp[ii * pc + j] += g[ii * c + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceCols(a, start) => {
                if self.requires_grad(*a) {
                    let ac = self.cols(*a);
                    let ga = grad_buf(grads, *a, r * ac);
                    for ii in 0..r {
                        for j in 0..c {
                            ga[ii * ac + start + j] += g[ii * c + j];
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if self.requires_grad(*a) {
                    let ar = self.rows(*a);
                    let ga = grad_buf(grads, *a, ar * c);
                    let inv = 1.0 / ar as f64;
                    for row in ga.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(o, x)| *o += x * inv);
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, std::iter::repeat_n(g[0], n));
            }
            Op::WeightedSum(a, w) => self.acc(grads, *a, w.iter().map(|w| w * g[0])),
            Op::Gather(table, ids) => {
                if self.requires_grad(*table) {
                    let (tr, tc) = self.shape(*table);
                    let gt = grad_buf(grads, *table, tr * tc);
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..tc {
                            gt[id * tc + j] += g[k * tc + j];
                        }
                    }
                }
            }
            Op::RowSelect(cands, pick) => {
                for (k, &cand) in cands.iter().enumerate() {
                    if !self.requires_grad(cand) || !pick.contains(&k) {
                        continue;
                    }
                    let gc = grad_buf(grads, cand, r * c);
                    for (ii, &p) in pick.iter().enumerate() {
                        if p == k {
                            for j in 0..c {
                                gc[ii * c + j] += g[ii * c + j];
                            }
                        }
                    }
                }
            }
            Op::PickPerRow(a, cols) => {
                if self.requires_grad(*a) {
                    let (ar, ac) = self.shape(*a);
                    let ga = grad_buf(grads, *a, ar * ac);
                    for (ii, &j) in cols.iter().enumerate() {
                        ga[ii * ac + j] += g[ii];
                    }
                }
            }
            Op::L2NormalizeRows(a, denoms) => {
                if !self.requires_grad(*a) {
                    return;
                }
                let ga = grad_buf(grads, *a, r * c);
                for ii in 0..r {
                    let yr = &y[ii * c..(ii + 1) * c];
                    let gr = &g[ii * c..(ii + 1) * c];
                    let (d, floored) = denoms[ii];
                    if floored {
                        for j in 0..c {
                            ga[ii * c + j] += gr[j] / d;
                        }
                    } else {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[ii * c + j] += (gr[j] - yr[j] * dot) / d;
                        }
                    }
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: impl Iterator<Item = f64>) {
        if !self.requires_grad(v) {
            return;
        }
        let len = self.value(v).len();
        let buf = grad_buf(grads, v, len);
        buf.iter_mut().zip(delta).for_each(|(o, d)| *o += d);
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Gradients from one backward sweep, available for leaves only.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.get(v))
    }

    /// Adds the gradient of leaf `v` into `tensor`'s buffer.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `out (m×n) [+]= op(a) (m×k) · op(b) (k×n)` where `op` optionally
/// transposes a row-major operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
