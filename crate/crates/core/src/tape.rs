//! A minimal reverse-mode tape over dense row-major matrices.
//!
//! Only the operations the reference models need are provided: affine maps,
//! ReLU, average pooling, row gathers and segment means (bag-of-tokens text
//! encoding), row normalization, temperature scaling and mean cross-entropy.

use std::ops::Range;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean-pooling geometry for flattened channel-major images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub factor: usize,
}

impl PoolSpec {
    pub fn out_len(&self) -> usize {
        self.channels * (self.height / self.factor) * (self.width / self.factor)
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn pool_row(&self, input: &[f64], out: &mut [f64]) {
        let (oh, ow, p) = (self.height / self.factor, self.width / self.factor, self.factor);
        let inv = 1.0 / (p * p) as f64;
        for c in 0..self.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..p {
                        let base = (c * self.height + oy * p + dy) * self.width + ox * p;
                        s += input[base..base + p].iter().sum::<f64>();
                    }
                    out[(c * oh + oy) * ow + ox] = s * inv;
                }
            }
        }
    }

    fn unpool_row(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let (oh, ow, p) = (self.height / self.factor, self.width / self.factor, self.factor);
        let inv = 1.0 / (p * p) as f64;
        for c in 0..self.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[(c * oh + oy) * ow + ox] * inv;
                    for dy in 0..p {
                        let base = (c * self.height + oy * p + dy) * self.width + ox * p;
                        for v in &mut grad_in[base..base + p] {
                            *v += g;
                        }
                    }
                }
            }
        }
    }

    /// Pools one flattened image without a tape.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_len()];
        self.pool_row(input, &mut out);
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    ScaleExp(Var, Var),
    Relu(Var),
    AvgPool(Var, PoolSpec),
    Gather(Var, Vec<usize>),
    VStack(Vec<Var>),
    SegmentMean(Var, Vec<Range<usize>>),
    NormalizeRows(Var, Vec<f64>),
    Transpose(Var),
    CrossEntropy(Var, Vec<usize>, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `var`; zeros if the output does not depend on it.
    pub fn get(&self, var: Var, like: &Tape) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let v = like.value(var);
                Matrix::zeros(v.rows, v.cols)
            }
        }
    }

    pub fn take(&mut self, var: Var, like: &Tape) -> Matrix {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let v = like.value(var);
                Matrix::zeros(v.rows, v.cols)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    /// Adds a `1 × cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, v.cols), "bias shape");
        for r in 0..v.rows {
            for (x, y) in v.row_mut(r).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= k);
        self.push(v, Op::Scale(a, k))
    }

    /// `a · exp(s)` for a `1 × 1` log-scale `s`.
    pub fn scale_exp(&mut self, a: Var, log_scale: Var) -> Var {
        let s = self.value(log_scale).data[0].exp();
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::ScaleExp(a, log_scale))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn avg_pool(&mut self, a: Var, spec: PoolSpec) -> Var {
        let input = self.value(a);
        assert_eq!(input.cols, spec.in_len(), "pool input width");
        let mut v = Matrix::zeros(input.rows, spec.out_len());
        for r in 0..input.rows {
            spec.pool_row(input.row(r), v.row_mut(r));
        }
        self.push(v, Op::AvgPool(a, spec))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(v, Op::Gather(table, ids))
    }

    /// Stacks matrices with equal column count vertically.
    pub fn vstack(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "vstack column count");
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::VStack(parts))
    }

    /// Row `s` of the output is the mean of rows `segments[s]` of `a`.
    pub fn segment_mean(&mut self, a: Var, segments: Vec<Range<usize>>) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(segments.len(), m.cols);
        for (s, seg) in segments.iter().enumerate() {
            assert!(!seg.is_empty(), "empty segment");
            let inv = 1.0 / seg.len() as f64;
            let out = &mut v.data[s * m.cols..(s + 1) * m.cols];
            for r in seg.clone() {
                for (o, x) in out.iter_mut().zip(m.row(r)) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        self.push(v, Op::SegmentMean(a, segments))
    }

    /// Scales each row to unit ℓ2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let n = dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        self.push(v, Op::NormalizeRows(a, norms))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Mean softmax cross-entropy of each row of `logits` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.rows, labels.len(), "one label per row");
        let mut probs = Matrix::zeros(z.rows, z.cols);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let (lse, p) = log_softmax_parts(z.row(r));
            total += lse - z.at(r, y);
            probs.row_mut(r).copy_from_slice(&p);
        }
        let loss = total / z.rows as f64;
        self.push(Matrix::scalar(loss), Op::CrossEntropy(logits, labels, probs))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let out = self.value(output);
        assert_eq!((out.rows, out.cols), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(&self.value(*b).clone());
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, k) => {
                    let mut d = g;
                    d.data.iter_mut().for_each(|x| *x *= k);
                    accumulate(&mut grads, *a, d);
                }
                Op::ScaleExp(a, s) => {
                    let factor = self.value(*s).data[0].exp();
                    let ds = dot(&g.data, &node.value.data);
                    let mut d = g;
                    d.data.iter_mut().for_each(|x| *x *= factor);
                    accumulate(&mut grads, *a, d);
                    accumulate(&mut grads, *s, Matrix::scalar(ds));
                }
                Op::Relu(a) => {
                    let mut d = g;
                    for (x, y) in d.data.iter_mut().zip(&node.value.data) {
                        if *y <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::AvgPool(a, spec) => {
                    let mut d = Matrix::zeros(g.rows, spec.in_len());
                    for r in 0..g.rows {
                        spec.unpool_row(g.row(r), d.row_mut(r));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut d = Matrix::zeros(t.rows, t.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (x, y) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::VStack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let slice = g.data[offset * g.cols..(offset + rows) * g.cols].to_vec();
                        accumulate(&mut grads, p, Matrix::from_vec(rows, g.cols, slice));
                        offset += rows;
                    }
                }
                Op::SegmentMean(a, segments) => {
                    let m = self.value(*a);
                    let mut d = Matrix::zeros(m.rows, m.cols);
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        for r in seg.clone() {
                            for (x, y) in d.row_mut(r).iter_mut().zip(g.row(s)) {
                                *x += y * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = dot(yr, gr);
                        for ((o, &yi), &gi) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gi - yi * proj) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::CrossEntropy(logits, labels, probs) => {
                    let scale = g.data[0] / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        d.data[r * d.cols + y] -= 1.0;
                    }
                    d.data.iter_mut().for_each(|x| *x *= scale);
                    accumulate(&mut grads, *logits, d);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Returns `(logsumexp(z), softmax(z))`.
pub fn log_softmax_parts(z: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

/// Softmax cross-entropy of a single logit vector.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let (lse, _) = log_softmax_parts(logits);
    lse - logits[label]
}
