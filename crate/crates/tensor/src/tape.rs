use crate::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    MulConst { x: Var, factor: Vec<f64> },
    AddConst(Var),
    MaskFill { x: Var, mask: Vec<bool> },
    Gelu(Var),
    Relu(Var),
    Square(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    BceWithLogits { logits: Var, targets: Vec<f64>, mask: Vec<bool>, count: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ScaleRows { x: Var, s: Var },
    Gather { x: Var, coords: Vec<(usize, usize)> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    LogSumExpRows { x: Var, probs: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is single-use: build the graph, call [`Tape::backward`] once,
/// read gradients, drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
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

    /// Multiply-accumulate count of every matrix product recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- linear

    /// Matrix product `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b: false },
            &[a, b],
        ))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.value(a))?;
        let (n, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul_nt",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, trans_b: true },
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(x))?;
        let out = kernels::transpose(self.value(x).data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), &[x]))
    }

    // ----------------------------------------------------------- elementwise

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias has {} values for {cols} columns", self.value(bias).numel()),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let v = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        Ok(self.push(v, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x).map(|e| e * factor);
        Ok(self.push(v, Op::Scale { x, factor }, &[x]))
    }

    /// Elementwise product with a constant of the same shape (dropout masks,
    /// multiplicative noise).
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        same_shape("mul_const", self.value(x), factor)?;
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(factor.data())
            .map(|(a, b)| a * b)
            .collect();
        let v = Tensor::from_parts(factor.shape().to_vec(), data);
        Ok(self.push(
            v,
            Op::MulConst {
                x,
                factor: factor.data().to_vec(),
            },
            &[x],
        ))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        same_shape("add_const", self.value(x), c)?;
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let v = Tensor::from_parts(c.shape().to_vec(), data);
        Ok(self.push(v, Op::AddConst(x), &[x]))
    }

    /// Replaces entries where `mask` is true by `fill`; those entries get no gradient.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(TensorError::shape(
                "mask_fill",
                format!("mask of {} for {} values", mask.len(), self.value(x).numel()),
            ));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let v = Tensor::from_parts(self.value(x).shape().to_vec(), data);
        Ok(self.push(
            v,
            Op::MaskFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(kernels::gelu);
        Ok(self.push(v, Op::Gelu(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(0.0));
        Ok(self.push(v, Op::Relu(x), &[x]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e * e);
        Ok(self.push(v, Op::Square(x), &[x]))
    }

    // ------------------------------------------------------ normalisations

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, slot) in lane.iter_mut().enumerate() {
                    *slot = src[(o * len + l) * inner + i];
                }
                kernels::softmax_row(&mut lane);
                for (l, &val) in lane.iter().enumerate() {
                    out[(o * len + l) * inner + i] = val;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, outer, len, inner },
            &[x],
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let lse = kernels::logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(v, Op::LogSoftmax(x), &[x]))
    }

    /// Normalises every row of `x` to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if cols == 0 {
            return Err(TensorError::shape("layer_norm", "empty last axis"));
        }
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(TensorError::shape(
                "layer_norm",
                format!("gain/bias must have {cols} values"),
            ));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, row) in t.data().chunks(cols).enumerate() {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (c, v) in row.iter().enumerate() {
                xhat[r * cols + c] = (v - mean) * rs;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out = xhat
            .chunks(cols)
            .flat_map(|row| row.iter().enumerate().map(|(c, v)| v * g[c] + b[c]))
            .collect();
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // --------------------------------------------------------------- losses

    /// Mean negative log-likelihood over rows whose target is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (n, v) = dims2("cross_entropy", self.value(logits))?;
        if targets.len() != n {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        let mut tgt = Vec::with_capacity(n);
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            if t == ignore_index {
                tgt.push(None);
                continue;
            }
            if t >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: v,
                });
            }
            let lse = kernels::softmax_row(row);
            total += lse - self.nodes[logits.0].value.data()[r * v + t];
            count += 1;
            tgt.push(Some(t));
        }
        if count == 0 {
            return Err(TensorError::UndefinedLoss);
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: tgt,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy with logits over entries where `mask` is true.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], mask: &[bool]) -> Result<Var> {
        let numel = self.value(logits).numel();
        if targets.len() != numel || mask.len() != numel {
            return Err(TensorError::shape(
                "bce_with_logits",
                format!("{numel} logits, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::UndefinedLoss);
        }
        let total: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&z, &t), _)| kernels::softplus(z) - t * z)
            .sum();
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    // ------------------------------------------------------------ indexing

    /// Selects rows `idx` of a matrix; with a table this is an embedding lookup
    /// and gradients flow only into the selected rows.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2("gather_rows", self.value(x))?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            out.extend_from_slice(self.value(x).row_slice(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Writes row `i` of `x` into row `idx[i]` of a zero matrix with `rows`
    /// rows, summing duplicates.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (r, c) = dims2("scatter_rows", self.value(x))?;
        if idx.len() != r {
            return Err(TensorError::shape(
                "scatter_rows",
                format!("{} indices for {r} rows", idx.len()),
            ));
        }
        let mut out = vec![0.0; rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            if dst >= rows {
                return Err(TensorError::Index {
                    op: "scatter_rows",
                    index: dst,
                    bound: rows,
                });
            }
            let row = self.value(x).row_slice(src);
            for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::shape("concat_rows", "nothing to concatenate"));
        }
        let c = dims2("concat_rows", self.value(parts[0]))?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = dims2("concat_rows", self.value(p))?;
            if pc != c {
                return Err(TensorError::shape("concat_rows", format!("{pc} columns vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_rows", self.value(x))?;
        if start > end || end > r {
            return Err(TensorError::shape(
                "slice_rows",
                format!("range {start}..{end} of {r} rows"),
            ));
        }
        let out = self.value(x).data()[start * c..end * c].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![end - start, c], out),
            Op::SliceRows { x, start },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::shape("concat_cols", "nothing to concatenate"));
        }
        let r = dims2("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat_cols", self.value(p))?;
            if pr != r {
                return Err(TensorError::shape("concat_cols", format!("{pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for row in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(row));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims2("slice_cols", self.value(x))?;
        if start > end || end > c {
            return Err(TensorError::shape(
                "slice_cols",
                format!("range {start}..{end} of {c} columns"),
            ));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for row in 0..r {
            out.extend_from_slice(&self.value(x).row_slice(row)[start..end]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, end - start], out),
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    /// Multiplies row `i` of `x` by `s[i]`, with `s` of shape `[rows, 1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = dims2("scale_rows", self.value(x))?;
        if self.value(s).numel() != r {
            return Err(TensorError::shape(
                "scale_rows",
                format!("{} scales for {r} rows", self.value(s).numel()),
            ));
        }
        let scales = self.value(s).data();
        let out = self
            .value(x)
            .data()
            .chunks(c)
            .zip(scales)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::ScaleRows { x, s },
            &[x, s],
        ))
    }

    /// Picks `x[r, c]` for every coordinate into a `[len, 1]` column.
    pub fn gather(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = dims2("gather", self.value(x))?;
        let mut out = Vec::with_capacity(coords.len());
        for &(i, j) in coords {
            if i >= r || j >= c {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i * c + j,
                    bound: r * c,
                });
            }
            out.push(self.value(x).get(i, j));
        }
        Ok(self.push(
            Tensor::from_parts(vec![coords.len(), 1], out),
            Op::Gather {
                x,
                coords: coords.to_vec(),
            },
            &[x],
        ))
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::shape("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Column means: `[rows, cols] -> [1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("mean_rows", self.value(x))?;
        if r == 0 {
            return Err(TensorError::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        Ok(self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(x), &[x]))
    }

    /// Row-wise log-sum-exp: `[rows, cols] -> [rows, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("logsumexp_rows", self.value(x))?;
        let mut probs = self.value(x).data().to_vec();
        let mut out = Vec::with_capacity(r);
        for row in probs.chunks_mut(c) {
            out.push(kernels::softmax_row(row));
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, 1], out),
            Op::LogSumExpRows { x, probs },
            &[x],
        ))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2("l2_normalize_rows", self.value(x))?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::L2NormalizeRows { x, norms },
            &[x],
        ))
    }

    // ------------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss` (seed gradient 1).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.backward_with(loss, Tensor::scalar(1.0))
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if seed.numel() != self.value(out).numel() {
            return Err(TensorError::shape(
                "backward",
                format!("seed of {} values for {}", seed.numel(), self.value(out).numel()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[out.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let bad = grads
            .iter()
            .position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())));
        if let Some(node) = bad {
            self.grads = grads;
            return Err(TensorError::NonFinite(format!("gradient of node {node}")));
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(grads, nodes, $v) {
                    $body
                }
            };
        }
        let value = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (value(*a).shape()[0], value(*a).shape()[1]);
                if *trans_b {
                    // C = A·Bᵀ, B: n×k
                    let n = value(*b).shape()[0];
                    with_grad!(*a, |ga| {
                        gemm_nn(g, value(*b).data(), ga, m, n, k);
                    });
                    with_grad!(*b, |gb| {
                        gemm_tn(g, value(*a).data(), gb, m, n, k);
                    });
                } else {
                    let n = value(*b).shape()[1];
                    with_grad!(*a, |ga| {
                        gemm_nt(g, value(*b).data(), ga, m, n, k);
                    });
                    with_grad!(*b, |gb| {
                        gemm_tn(value(*a).data(), g, gb, m, k, n);
                    });
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (value(*x).shape()[0], value(*x).shape()[1]);
                with_grad!(*x, |gx| {
                    let gt = kernels::transpose(g, c, r);
                    for (d, s) in gx.iter_mut().zip(gt) {
                        *d += s;
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    axpy(ga, g, 1.0);
                });
                with_grad!(*b, |gb| {
                    axpy(gb, g, 1.0);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| {
                    axpy(ga, g, 1.0);
                });
                with_grad!(*b, |gb| {
                    axpy(gb, g, -1.0);
                });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |ga| {
                    for ((d, gv), bv) in ga.iter_mut().zip(g).zip(value(*b).data()) {
                        *d += gv * bv;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((d, gv), av) in gb.iter_mut().zip(g).zip(value(*a).data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddBias { x, bias } => {
                with_grad!(*x, |gx| {
                    axpy(gx, g, 1.0);
                });
                with_grad!(*bias, |gb| {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::Scale { x, factor } => {
                with_grad!(*x, |gx| {
                    axpy(gx, g, *factor);
                });
            }
            Op::MulConst { x, factor } => {
                with_grad!(*x, |gx| {
                    for ((d, gv), f) in gx.iter_mut().zip(g).zip(factor) {
                        *d += gv * f;
                    }
                });
            }
            Op::AddConst(x) => {
                with_grad!(*x, |gx| {
                    axpy(gx, g, 1.0);
                });
            }
            Op::MaskFill { x, mask } => {
                with_grad!(*x, |gx| {
                    for ((d, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                with_grad!(*x, |gx| {
                    for ((d, gv), xv) in gx.iter_mut().zip(g).zip(value(*x).data()) {
                        *d += gv * kernels::gelu_grad(*xv);
                    }
                });
            }
            Op::Relu(x) => {
                with_grad!(*x, |gx| {
                    for ((d, gv), xv) in gx.iter_mut().zip(g).zip(value(*x).data()) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Square(x) => {
                with_grad!(*x, |gx| {
                    for ((d, gv), xv) in gx.iter_mut().zip(g).zip(value(*x).data()) {
                        *d += 2.0 * xv * gv;
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                with_grad!(*x, |gx| {
                    for o in 0..*outer {
                        for k in 0..*inner {
                            let idx = |l: usize| (o * len + l) * inner + k;
                            let dot: f64 = (0..*len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..*len {
                                gx[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                with_grad!(*x, |gx| {
                    for ((gx_row, g_row), y_row) in
                        gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let gsum: f64 = g_row.iter().sum();
                        for ((d, gv), yv) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                            *d += gv - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gamma = value(*gain).data();
                with_grad!(*x, |gx| {
                    let mut dxhat = vec![0.0; c];
                    for (r, rs) in rstd.iter().enumerate() {
                        let g_row = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g_row[j] * gamma[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                with_grad!(*gain, |gg| {
                    for (g_row, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += g_row[j] * xh[j];
                        }
                    }
                });
                with_grad!(*bias, |gb| {
                    for g_row in g.chunks(c) {
                        axpy(gb, g_row, 1.0);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = value(*logits).cols();
                let scale = g[0] / *count as f64;
                with_grad!(*logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..v {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                targets,
                mask,
                count,
            } => {
                let scale = g[0] / *count as f64;
                with_grad!(*logits, |gl| {
                    for (j, z) in value(*logits).data().iter().enumerate() {
                        if mask[j] {
                            gl[j] += scale * (kernels::sigmoid(*z) - targets[j]);
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let c = value(*x).cols();
                with_grad!(*x, |gx| {
                    for (src, &dst) in idx.iter().enumerate() {
                        axpy(&mut gx[dst * c..(dst + 1) * c], &g[src * c..(src + 1) * c], 1.0);
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let c = value(*x).cols();
                with_grad!(*x, |gx| {
                    for (src, &dst) in idx.iter().enumerate() {
                        axpy(&mut gx[src * c..(src + 1) * c], &g[dst * c..(dst + 1) * c], 1.0);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = value(p).numel();
                    with_grad!(p, |gp| {
                        axpy(gp, &g[offset..offset + n], 1.0);
                    });
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = value(*x).cols();
                with_grad!(*x, |gx| {
                    axpy(&mut gx[start * c..start * c + g.len()], g, 1.0);
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = value(p).cols();
                    with_grad!(p, |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            axpy(row, &g[r * total + offset..r * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = value(*x).cols();
                let w = out.cols();
                with_grad!(*x, |gx| {
                    for (r, g_row) in g.chunks(w).enumerate() {
                        axpy(&mut gx[r * c + start..r * c + start + w], g_row, 1.0);
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let c = value(*x).cols();
                let scales = value(*s).data();
                with_grad!(*x, |gx| {
                    for (r, &k) in scales.iter().enumerate() {
                        axpy(&mut gx[r * c..(r + 1) * c], &g[r * c..(r + 1) * c], k);
                    }
                });
                with_grad!(*s, |gs| {
                    for (r, d) in gs.iter_mut().enumerate() {
                        let xr = &value(*x).data()[r * c..(r + 1) * c];
                        *d += g[r * c..(r + 1) * c].iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Gather { x, coords } => {
                let c = value(*x).cols();
                with_grad!(*x, |gx| {
                    for (k, &(r, col)) in coords.iter().enumerate() {
                        gx[r * c + col] += g[k];
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Mean(x) => {
                with_grad!(*x, |gx| {
                    let share = g[0] / gx.len() as f64;
                    for d in gx.iter_mut() {
                        *d += share;
                    }
                });
            }
            Op::MeanRows(x) => {
                let r = value(*x).rows() as f64;
                let c = value(*x).cols();
                with_grad!(*x, |gx| {
                    for row in gx.chunks_mut(c) {
                        axpy(row, g, 1.0 / r);
                    }
                });
            }
            Op::LogSumExpRows { x, probs } => {
                let c = value(*x).cols();
                with_grad!(*x, |gx| {
                    for (r, gv) in g.iter().enumerate() {
                        axpy(&mut gx[r * c..(r + 1) * c], &probs[r * c..(r + 1) * c], *gv);
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = value(*x).cols();
                let y = out.data();
                with_grad!(*x, |gx| {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
