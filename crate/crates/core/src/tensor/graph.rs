use rand::Rng;

use super::{gemm, Mode, Segments, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(width: usize) -> Self {
        BnStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SegmentMax {
        x: Var,
        // absolute row index per (segment, column)
        argmax: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segs: Segments,
    },
    SegmentAttention {
        x: Var,
        scores: Var,
        segs: Segments,
        weights: Vec<f64>,
    },
    SegmentTransform {
        x: Var,
        m: Var,
        segs: Segments,
        dim: usize,
    },
    ExpandSegments {
        g: Var,
        segs: Segments,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Orthogonality {
        a: Var,
        dim: usize,
        residual: Vec<f64>,
    },
    AbsCosine {
        pred: Var,
        gt: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Epsilon added to the norm product in the absolute-cosine loss.
pub const COSINE_EPS: f64 = 1e-12;

/// Recorded forward computation. Nodes are appended in evaluation order and
/// [`Graph::backward`] walks them in reverse insertion order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Leaf that accumulates gradients.
    pub fn parameter(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v`; empty for nodes that never needed one.
    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => dim_err(format!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, c) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return dim_err(format!("matmul inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; r * c];
        gemm(r, k, c, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    /// Adds a length-`c` bias to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "add_bias")?;
        if self.value(bias).numel() != c {
            return dim_err(format!("bias of length {} for {c} columns", self.value(bias).numel()));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::AddBias { x, bias }, &[x, bias]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        // NaN passes through so a poisoned network shows up in the loss
        let out: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 || v.is_nan() { v } else { 0.0 }).collect();
        let value = Tensor::new(t.shape(), out).expect("same shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Batch normalization over the rows of an `r×c` matrix.
    ///
    /// In train mode the batch statistics (biased variance) normalize the
    /// input and `stats` is updated as
    /// `running ← momentum·running + (1−momentum)·batch`. In eval mode the
    /// running statistics are used and `stats` is untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "batch_norm")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || stats.width() != c {
            return dim_err(format!("batch_norm parameters do not match width {c}"));
        }
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                if r < 2 {
                    return Err(Error::Config(format!(
                        "batch_norm in train mode needs at least 2 rows, got {r}"
                    )));
                }
                let mut mean = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= r as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= r as f64);
                for j in 0..c {
                    stats.mean[j] = momentum * stats.mean[j] + (1.0 - momentum) * mean[j];
                    stats.var[j] = momentum * stats.var[j] + (1.0 - momentum) * var[j];
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(r * c);
        let mut out = Vec::with_capacity(r * c);
        for row in xd.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        Ok(self.push(Tensor::new(&[r, c], out)?, op, &[x, gamma, beta]))
    }

    /// Column-wise maximum within each segment. Returns a `b×K` matrix and
    /// the within-segment argmax row per (segment, column); ties go to the
    /// lowest row.
    pub fn segment_max(&mut self, x: Var, segs: &Segments) -> Result<(Var, Vec<usize>)> {
        let (n, k) = self.matrix_dims(x, "segment_max")?;
        if segs.total_rows() != n {
            return dim_err(format!("segments cover {} rows, matrix has {n}", segs.total_rows()));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(segs.len() * k);
        let mut argmax = Vec::with_capacity(segs.len() * k);
        let mut local = Vec::with_capacity(segs.len() * k);
        for range in segs.iter() {
            let start = range.start;
            let mut best: Vec<f64> = xd[start * k..(start + 1) * k].to_vec();
            let mut arg = vec![start; k];
            for i in range.clone().skip(1) {
                let row = &xd[i * k..(i + 1) * k];
                for j in 0..k {
                    if row[j] > best[j] {
                        best[j] = row[j];
                        arg[j] = i;
                    }
                }
            }
            out.extend_from_slice(&best);
            local.extend(arg.iter().map(|&a| a - start));
            argmax.extend(arg);
        }
        let value = Tensor::new(&[segs.len(), k], out)?;
        Ok((self.push(value, Op::SegmentMax { x, argmax }, &[x]), local))
    }

    /// Max over all rows of an `n×K` matrix; returns a length-`K` vector.
    pub fn max_over_set(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let n = self.value(x).rows();
        if n == 0 {
            return Err(Error::EmptySet("max over an empty set".into()));
        }
        let (m, arg) = self.segment_max(x, &Segments::single(n)?)?;
        let k = self.value(m).numel();
        Ok((self.reshape(m, &[k])?, arg))
    }

    pub fn segment_mean(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let (n, k) = self.matrix_dims(x, "segment_mean")?;
        if segs.total_rows() != n {
            return dim_err(format!("segments cover {} rows, matrix has {n}", segs.total_rows()));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; segs.len() * k];
        for (s, range) in segs.iter().enumerate() {
            let acc = &mut out[s * k..(s + 1) * k];
            let len = range.len() as f64;
            for i in range {
                acc.iter_mut().zip(&xd[i * k..(i + 1) * k]).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= len);
        }
        let value = Tensor::new(&[segs.len(), k], out)?;
        Ok(self.push(value, Op::SegmentMean { x, segs: segs.clone() }, &[x]))
    }

    /// Softmax over per-row scalar `scores` within each segment, then the
    /// score-weighted sum of the rows of `x`.
    pub fn segment_attention(&mut self, x: Var, scores: Var, segs: &Segments) -> Result<Var> {
        let (n, k) = self.matrix_dims(x, "segment_attention")?;
        if segs.total_rows() != n || self.value(scores).numel() != n {
            return dim_err("segment_attention: rows, scores and segments disagree");
        }
        let xd = self.value(x).data();
        let sd = self.value(scores).data();
        let mut weights = vec![0.0; n];
        let mut out = vec![0.0; segs.len() * k];
        for (s, range) in segs.iter().enumerate() {
            let max = sd[range.clone()].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in range.clone() {
                weights[i] = (sd[i] - max).exp();
                z += weights[i];
            }
            let acc = &mut out[s * k..(s + 1) * k];
            for i in range {
                weights[i] /= z;
                let w = weights[i];
                acc.iter_mut().zip(&xd[i * k..(i + 1) * k]).for_each(|(a, v)| *a += w * v);
            }
        }
        let value = Tensor::new(&[segs.len(), k], out)?;
        let op = Op::SegmentAttention {
            x,
            scores,
            segs: segs.clone(),
            weights,
        };
        Ok(self.push(value, op, &[x, scores]))
    }

    /// Right-multiplies every row of segment `s` by the `d×d` matrix stored
    /// in row `s` of `m` (`b×d²`, or a single `d×d` matrix when `b == 1`).
    pub fn segment_transform(&mut self, x: Var, m: Var, segs: &Segments) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "segment_transform")?;
        if segs.total_rows() != n {
            return dim_err(format!("segments cover {} rows, matrix has {n}", segs.total_rows()));
        }
        if self.value(m).numel() != segs.len() * d * d {
            return dim_err(format!(
                "{} transform entries for {} sets of width {d}",
                self.value(m).numel(),
                segs.len()
            ));
        }
        let xd = self.value(x).data();
        let md = self.value(m).data();
        let mut out = vec![0.0; n * d];
        for (s, range) in segs.iter().enumerate() {
            let rows = range.len();
            gemm(
                rows,
                d,
                d,
                &xd[range.start * d..range.end * d],
                false,
                &md[s * d * d..(s + 1) * d * d],
                false,
                &mut out[range.start * d..range.end * d],
                false,
            );
        }
        let value = Tensor::new(&[n, d], out)?;
        let op = Op::SegmentTransform {
            x,
            m,
            segs: segs.clone(),
            dim: d,
        };
        Ok(self.push(value, op, &[x, m]))
    }

    /// Repeats row `s` of a `b×K` matrix once per row of segment `s`.
    pub fn expand_segments(&mut self, g: Var, segs: &Segments) -> Result<Var> {
        let (b, k) = self.matrix_dims(g, "expand_segments")?;
        if b != segs.len() {
            return dim_err(format!("{b} rows for {} segments", segs.len()));
        }
        let gd = self.value(g).data();
        let mut out = Vec::with_capacity(segs.total_rows() * k);
        for (s, range) in segs.iter().enumerate() {
            for _ in range {
                out.extend_from_slice(&gd[s * k..(s + 1) * k]);
            }
        }
        let value = Tensor::new(&[segs.total_rows(), k], out)?;
        Ok(self.push(value, Op::ExpandSegments { g, segs: segs.clone() }, &[g]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of nothing");
        };
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return dim_err(format!("concat rows {pr} vs {r}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[r, total], out)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return dim_err(format!("{} labels for {b} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label(format!("label {bad} outside [0, {c})")));
        }
        let ld = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &label) in ld.chunks_exact(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln();
            loss += -(row[label] - max - log_z);
            probs.extend(row.iter().map(|v| (v - max).exp() / z));
        }
        loss /= b as f64;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Inverted dropout: in train mode each element survives with
    /// probability `keep_prob` and survivors are scaled by `1/keep_prob`.
    /// Eval mode (or `keep_prob == 1`) returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        keep_prob: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep_prob {keep_prob} outside (0, 1]")));
        }
        if mode == Mode::Eval || keep_prob == 1.0 {
            return Ok(x);
        }
        let scale = 1.0 / keep_prob;
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < keep_prob { scale } else { 0.0 })
            .collect();
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape(), out)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean over the stacked `d×d` matrices in `a` of `‖I − A·Aᵀ‖_F²`.
    pub fn orthogonality_loss(&mut self, a: Var, dim: usize) -> Result<Var> {
        let t = self.value(a);
        if dim == 0 || t.numel() % (dim * dim) != 0 {
            return dim_err(format!("{} entries do not form {dim}×{dim} matrices", t.numel()));
        }
        let count = t.numel() / (dim * dim);
        let mut residual = vec![0.0; t.numel()];
        let mut total = 0.0;
        for (mat, res) in t.data().chunks_exact(dim * dim).zip(residual.chunks_exact_mut(dim * dim)) {
            gemm(dim, dim, dim, mat, false, mat, true, res, false);
            for i in 0..dim {
                res[i * dim + i] -= 1.0;
            }
            total += res.iter().map(|e| e * e).sum::<f64>();
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(value, Op::Orthogonality { a, dim, residual }, &[a]))
    }

    /// Mean over rows of `1 − |cos∠(pred, gt)|`, the cosine taken as
    /// `p·g / (‖p‖‖g‖ + 1e-12)`. Gradients flow to `pred` only.
    pub fn abs_cosine_loss(&mut self, pred: Var, gt: Var) -> Result<Var> {
        self.same_shape(pred, gt, "abs_cosine_loss")?;
        let (n, c) = self.matrix_dims(pred, "abs_cosine_loss")?;
        let p = self.value(pred).data();
        let g = self.value(gt).data();
        let mut total = 0.0;
        for i in 0..n {
            let (pr, gr) = (&p[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
            total += 1.0 - cosine(pr, gr).0.abs();
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(value, Op::AbsCosine { pred, gt }, &[pred]))
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    ///
    /// Gradients are added to whatever is already stored, so calling this
    /// twice without [`Graph::zero_grad`] doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!("backward from non-scalar shape {:?}", self.value(loss).shape()));
        }
        let mut upstream: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        upstream[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = upstream[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut upstream);
            self.nodes[i].value.accumulate_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], up: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let slot = |up: &mut [Option<Vec<f64>>], v: Var| -> bool {
            if !nodes[v.0].needs_grad {
                return false;
            }
            if up[v.0].is_none() {
                up[v.0] = Some(vec![0.0; nodes[v.0].value.numel()]);
            }
            true
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (r, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let c = nodes[b.0].value.cols();
                if slot(up, *a) {
                    let da = up[a.0].as_mut().unwrap();
                    gemm(r, c, k, g, false, val(*b), true, da, true);
                }
                if slot(up, *b) {
                    let db = up[b.0].as_mut().unwrap();
                    gemm(k, r, c, val(*a), true, g, false, db, true);
                }
            }
            Op::AddBias { x, bias } => {
                if slot(up, *x) {
                    add_into(up[x.0].as_mut().unwrap(), g);
                }
                if slot(up, *bias) {
                    let db = up[bias.0].as_mut().unwrap();
                    let c = db.len();
                    for row in g.chunks_exact(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if slot(up, *v) {
                        add_into(up[v.0].as_mut().unwrap(), g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if slot(up, *a) {
                    let d = up[a.0].as_mut().unwrap();
                    for ((d, gi), bv) in d.iter_mut().zip(g).zip(val(*b)) {
                        *d += gi * bv;
                    }
                }
                if slot(up, *b) {
                    let d = up[b.0].as_mut().unwrap();
                    for ((d, gi), av) in d.iter_mut().zip(g).zip(val(*a)) {
                        *d += gi * av;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if slot(up, *x) {
                    for (d, gi) in up[x.0].as_mut().unwrap().iter_mut().zip(g) {
                        *d += gi * factor;
                    }
                }
            }
            Op::Relu { x } => {
                if slot(up, *x) {
                    let d = up[x.0].as_mut().unwrap();
                    for ((d, gi), xv) in d.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let r = g.len() / c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * hrow[j];
                    }
                }
                if slot(up, *gamma) {
                    add_into(up[gamma.0].as_mut().unwrap(), &sum_gx);
                }
                if slot(up, *beta) {
                    add_into(up[beta.0].as_mut().unwrap(), &sum_g);
                }
                if slot(up, *x) {
                    let gam = val(*gamma);
                    let dx = up[x.0].as_mut().unwrap();
                    let rf = r as f64;
                    for ((drow, grow), hrow) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for j in 0..c {
                            let s = gam[j] * inv_std[j];
                            if *batch_stats {
                                drow[j] += s / rf * (rf * grow[j] - sum_g[j] - hrow[j] * sum_gx[j]);
                            } else {
                                drow[j] += s * grow[j];
                            }
                        }
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                if slot(up, *x) {
                    let k = nodes[x.0].value.cols();
                    let dx = up[x.0].as_mut().unwrap();
                    for (idx, (&row, gi)) in argmax.iter().zip(g).enumerate() {
                        dx[row * k + idx % k] += gi;
                    }
                }
            }
            Op::SegmentMean { x, segs } => {
                if slot(up, *x) {
                    let k = nodes[x.0].value.cols();
                    let dx = up[x.0].as_mut().unwrap();
                    for (s, range) in segs.iter().enumerate() {
                        let inv = 1.0 / range.len() as f64;
                        let gs = &g[s * k..(s + 1) * k];
                        for i in range {
                            for (d, gv) in dx[i * k..(i + 1) * k].iter_mut().zip(gs) {
                                *d += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::SegmentAttention {
                x,
                scores,
                segs,
                weights,
            } => {
                let k = nodes[x.0].value.cols();
                let xd = val(*x);
                if slot(up, *scores) {
                    let ds = up[scores.0].as_mut().unwrap();
                    for (s, range) in segs.iter().enumerate() {
                        let gs = &g[s * k..(s + 1) * k];
                        let dw: Vec<f64> = range
                            .clone()
                            .map(|i| dot(&xd[i * k..(i + 1) * k], gs))
                            .collect();
                        let avg: f64 = range.clone().zip(&dw).map(|(i, d)| weights[i] * d).sum();
                        for (i, d) in range.zip(&dw) {
                            ds[i] += weights[i] * (d - avg);
                        }
                    }
                }
                if slot(up, *x) {
                    let dx = up[x.0].as_mut().unwrap();
                    for (s, range) in segs.iter().enumerate() {
                        let gs = &g[s * k..(s + 1) * k];
                        for i in range {
                            let w = weights[i];
                            for (d, gv) in dx[i * k..(i + 1) * k].iter_mut().zip(gs) {
                                *d += w * gv;
                            }
                        }
                    }
                }
            }
            Op::SegmentTransform { x, m, segs, dim } => {
                let d = *dim;
                if slot(up, *x) {
                    let md = val(*m);
                    let dx = up[x.0].as_mut().unwrap();
                    for (s, range) in segs.iter().enumerate() {
                        gemm(
                            range.len(),
                            d,
                            d,
                            &g[range.start * d..range.end * d],
                            false,
                            &md[s * d * d..(s + 1) * d * d],
                            true,
                            &mut dx[range.start * d..range.end * d],
                            true,
                        );
                    }
                }
                if slot(up, *m) {
                    let xd = val(*x);
                    let dm = up[m.0].as_mut().unwrap();
                    for (s, range) in segs.iter().enumerate() {
                        gemm(
                            d,
                            range.len(),
                            d,
                            &xd[range.start * d..range.end * d],
                            true,
                            &g[range.start * d..range.end * d],
                            false,
                            &mut dm[s * d * d..(s + 1) * d * d],
                            true,
                        );
                    }
                }
            }
            Op::ExpandSegments { g: src, segs } => {
                if slot(up, *src) {
                    let k = nodes[src.0].value.cols();
                    let dg = up[src.0].as_mut().unwrap();
                    for (s, range) in segs.iter().enumerate() {
                        for i in range {
                            add_into(&mut dg[s * k..(s + 1) * k], &g[i * k..(i + 1) * k]);
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = nodes[i].value.cols();
                let r = nodes[i].value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if slot(up, *p) {
                        let dp = up[p.0].as_mut().unwrap();
                        for row in 0..r {
                            add_into(
                                &mut dp[row * w..(row + 1) * w],
                                &g[row * total + offset..row * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => {
                if slot(up, *x) {
                    add_into(up[x.0].as_mut().unwrap(), g);
                }
            }
            Op::Sum { x } => {
                if slot(up, *x) {
                    up[x.0].as_mut().unwrap().iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if slot(up, *x) {
                    let dx = up[x.0].as_mut().unwrap();
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if slot(up, *logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let s = g[0] / b as f64;
                    let dl = up[logits.0].as_mut().unwrap();
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[row * c + j] += s * (probs[row * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if slot(up, *x) {
                    for ((d, gi), m) in up[x.0].as_mut().unwrap().iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Orthogonality { a, dim, residual } => {
                if slot(up, *a) {
                    let d = *dim;
                    let ad = val(*a);
                    let count = ad.len() / (d * d);
                    let da = up[a.0].as_mut().unwrap();
                    let mut tmp = vec![0.0; d * d];
                    let s = 4.0 * g[0] / count as f64;
                    for ((mat, res), dst) in ad
                        .chunks_exact(d * d)
                        .zip(residual.chunks_exact(d * d))
                        .zip(da.chunks_exact_mut(d * d))
                    {
                        gemm(d, d, d, res, false, mat, false, &mut tmp, false);
                        for (o, t) in dst.iter_mut().zip(&tmp) {
                            *o += s * t;
                        }
                    }
                }
            }
            Op::AbsCosine { pred, gt } => {
                if slot(up, *pred) {
                    let c = nodes[pred.0].value.cols();
                    let n = nodes[pred.0].value.rows();
                    let pd = val(*pred);
                    let gd = val(*gt);
                    let dp = up[pred.0].as_mut().unwrap();
                    let s = g[0] / n as f64;
                    for i in 0..n {
                        let (pr, gr) = (&pd[i * c..(i + 1) * c], &gd[i * c..(i + 1) * c]);
                        let (cos, a, np, ng) = cosine(pr, gr);
                        let sign = if cos > 0.0 {
                            1.0
                        } else if cos < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        let den = np * ng + COSINE_EPS;
                        for j in 0..c {
                            let radial = if np > 0.0 { a * ng * pr[j] / (np * den * den) } else { 0.0 };
                            let dcos = gr[j] / den - radial;
                            dp[i * c + j] += -sign * dcos * s;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(cos, p·g, ‖p‖, ‖g‖)`.
fn cosine(p: &[f64], g: &[f64]) -> (f64, f64, f64, f64) {
    let a = dot(p, g);
    let np = dot(p, p).sqrt();
    let ng = dot(g, g).sqrt();
    (a / (np * ng + COSINE_EPS), a, np, ng)
}
