//! Minimal reverse-mode differentiation over 2-D tensors.
//!
//! A tape records forward operations and replays them in reverse to
//! accumulate gradients. Everything is 64-bit; scalars are 1x1 tensors and
//! vectors are single rows or columns.

/// Row-major 2-D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(rows * cols, data.len());
        Tensor { rows, cols, data }
    }

    pub fn row(values: &[f64]) -> Tensor {
        Tensor::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// C = A @ B
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows);
        let mut out = Tensor::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// C = A @ B^T
    pub fn matmul_transb(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols);
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let b_row = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += a_row[k] * b_row[k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// C = A^T @ B
    pub fn transa_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows);
        let mut out = Tensor::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = &self.data[r * self.cols..(r + 1) * self.cols];
            let b_row = &other.data[r * other.cols..(r + 1) * other.cols];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    /// A @ B^T
    MatmulTransB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// matrix + row broadcast
    AddRow(Var, Var),
    /// matrix * row broadcast
    MulRow(Var, Var),
    /// matrix - scalar(1x1) broadcast
    SubBScalar(Var, Var),
    Silu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    MeanRows(Var),
    /// column-wise max over rows; argmax rows recorded
    MaxRows(Var, Vec<usize>),
    SumAll(Var),
    /// per-row sum -> column vector
    SumCols(Var),
    LogSumExpAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Computation tape. Build a graph forward, then call `backward` on a
/// scalar output to populate gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_transb(self.value(b));
        self.push(Op::MatmulTransB(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let v = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let v = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape());
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let v = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| x * c).collect());
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let v = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| x + c).collect());
        self.push(Op::AddConst(a), v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows, 1);
        assert_eq!(ta.cols, tr.cols);
        let mut v = ta.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += tr.data[c];
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows, 1);
        assert_eq!(ta.cols, tr.cols);
        let mut v = ta.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] *= tr.data[c];
            }
        }
        self.push(Op::MulRow(a, row), v)
    }

    pub fn sub_bscalar(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (self.value(a), self.value(s));
        assert_eq!(ts.shape(), (1, 1));
        let c = ts.data[0];
        let v = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| x - c).collect());
        self.push(Op::SubBScalar(a, s), v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let v = Tensor::from_vec(
            ta.rows,
            ta.cols,
            ta.data.iter().map(|&x| x * sigmoid(x)).collect(),
        );
        self.push(Op::Silu(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let v = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| x.exp()).collect());
        self.push(Op::Exp(a), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut v = ta.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let mut v = ta.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows(a, eps), v)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut v = Tensor::zeros(1, ta.cols);
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                v.data[c] += ta.at(r, c);
            }
        }
        for x in v.data.iter_mut() {
            *x /= ta.rows as f64;
        }
        self.push(Op::MeanRows(a), v)
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut v = Tensor::zeros(1, ta.cols);
        let mut arg = vec![0usize; ta.cols];
        for c in 0..ta.cols {
            let mut best = f64::NEG_INFINITY;
            for r in 0..ta.rows {
                let x = ta.at(r, c);
                if x > best {
                    best = x;
                    arg[c] = r;
                }
            }
            v.data[c] = best;
        }
        self.push(Op::MaxRows(a, arg), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut v = Tensor::zeros(ta.rows, 1);
        for r in 0..ta.rows {
            v.data[r] = ta.data[r * ta.cols..(r + 1) * ta.cols].iter().sum();
        }
        self.push(Op::SumCols(a), v)
    }

    pub fn logsumexp_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = ta.data.iter().map(|x| (x - m).exp()).sum();
        self.push(Op::LogSumExpAll(a), Tensor::scalar(m + s.ln()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols);
            data.extend_from_slice(&t.data);
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, cols, data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows);
            for r in 0..rows {
                for c in 0..t.cols {
                    v.data[r * cols + offset + c] = t.at(r, c);
                }
            }
            offset += t.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ta = self.value(a);
        assert!(start < end && end <= ta.cols);
        let mut v = Tensor::zeros(ta.rows, end - start);
        for r in 0..ta.rows {
            for c in start..end {
                v.data[r * (end - start) + (c - start)] = ta.at(r, c);
            }
        }
        self.push(Op::SliceCols(a, start, end), v)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), rows * cols);
        let v = Tensor::from_vec(rows, cols, ta.data.clone());
        self.push(Op::Reshape(a), v)
    }

    /// Reverse pass from a scalar output. Returns per-node gradients; read
    /// them back with `grad`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        let accumulate = |slot: &mut Option<Tensor>, delta: Tensor| match slot {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            None => *slot = Some(delta),
        };

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let da = g.matmul_transb(self.value(*b));
                    let db = self.value(*a).transa_matmul(&g);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatmulTransB(a, b) => {
                    // C = A B^T: dA = G B, dB = G^T A
                    let da = g.matmul(self.value(*b));
                    let db = g.transa_matmul(self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    let neg = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|x| -x).collect());
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
                    );
                    let db = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect(),
                    );
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(a, c) => {
                    let da =
                        Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|x| x * c).collect());
                    accumulate(&mut grads[a.0], da);
                }
                Op::AddConst(a) => accumulate(&mut grads[a.0], g),
                Op::AddRow(a, row) => {
                    let cols = g.cols;
                    let mut drow = Tensor::zeros(1, cols);
                    for r in 0..g.rows {
                        for c in 0..cols {
                            drow.data[c] += g.at(r, c);
                        }
                    }
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[row.0], drow);
                }
                Op::MulRow(a, row) => {
                    let ta = self.value(*a);
                    let tr = self.value(*row);
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    let mut drow = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            da.data[r * g.cols + c] = g.at(r, c) * tr.data[c];
                            drow.data[c] += g.at(r, c) * ta.at(r, c);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[row.0], drow);
                }
                Op::SubBScalar(a, s) => {
                    let ds = Tensor::scalar(-g.data.iter().sum::<f64>());
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[s.0], ds);
                }
                Op::Silu(a) => {
                    let ta = self.value(*a);
                    let da = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&ta.data)
                            .map(|(gy, &x)| {
                                let s = sigmoid(x);
                                gy * (s + x * s * (1.0 - s))
                            })
                            .collect(),
                    );
                    accumulate(&mut grads[a.0], da);
                }
                Op::Exp(a) => {
                    let da = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&node.value.data)
                            .map(|(gy, y)| gy * y)
                            .collect(),
                    );
                    accumulate(&mut grads[a.0], da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = (0..g.cols).map(|c| g.at(r, c) * y.at(r, c)).sum();
                        for c in 0..g.cols {
                            da.data[r * g.cols + c] = y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::LayerNormRows(a, eps) => {
                    let ta = self.value(*a);
                    let y = &node.value;
                    let n = g.cols as f64;
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let row = &ta.data[r * ta.cols..(r + 1) * ta.cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let g_mean: f64 = (0..g.cols).map(|c| g.at(r, c)).sum::<f64>() / n;
                        let gy_dot: f64 =
                            (0..g.cols).map(|c| g.at(r, c) * y.at(r, c)).sum::<f64>() / n;
                        for c in 0..g.cols {
                            da.data[r * g.cols + c] =
                                inv * (g.at(r, c) - g_mean - y.at(r, c) * gy_dot);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::MeanRows(a) => {
                    let ta = self.value(*a);
                    let scale = 1.0 / ta.rows as f64;
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        for c in 0..ta.cols {
                            da.data[r * ta.cols + c] = g.data[c] * scale;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::MaxRows(a, arg) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for c in 0..ta.cols {
                        da.data[arg[c] * ta.cols + c] = g.data[c];
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::SumAll(a) => {
                    let ta = self.value(*a);
                    let da = Tensor::from_vec(
                        ta.rows,
                        ta.cols,
                        vec![g.data[0]; ta.len()],
                    );
                    accumulate(&mut grads[a.0], da);
                }
                Op::SumCols(a) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        for c in 0..ta.cols {
                            da.data[r * ta.cols + c] = g.data[r];
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::LogSumExpAll(a) => {
                    let ta = self.value(*a);
                    let y = node.value.data[0];
                    let da = Tensor::from_vec(
                        ta.rows,
                        ta.cols,
                        ta.data.iter().map(|x| g.data[0] * (x - y).exp()).collect(),
                    );
                    accumulate(&mut grads[a.0], da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let slice =
                            g.data[offset * g.cols..(offset + t.rows) * g.cols].to_vec();
                        accumulate(
                            &mut grads[p.0],
                            Tensor::from_vec(t.rows, t.cols, slice),
                        );
                        offset += t.rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let t = self.value(p);
                        let mut dp = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            for c in 0..t.cols {
                                dp.data[r * t.cols + c] = g.at(r, offset + c);
                            }
                        }
                        accumulate(&mut grads[p.0], dp);
                        offset += t.cols;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..ta.rows {
                        for c in *start..*end {
                            da.data[r * ta.cols + c] = g.at(r, c - start);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::Reshape(a) => {
                    let ta = self.value(*a);
                    accumulate(
                        &mut grads[a.0],
                        Tensor::from_vec(ta.rows, ta.cols, g.data),
                    );
                }
            }
        }

        Gradients { grads }
    }
}

/// Gradient table produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the scalar output with respect to `v`; zeros if the
    /// variable does not influence the output.
    pub fn grad(&self, tape: &Tape, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).rows, tape.value(v).cols))
    }
}
