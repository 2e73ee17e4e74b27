//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to produce vector-Jacobian products. `backward` walks the list in
//! reverse, so topological order is the recording order.
//!
//! Values are viewed as `rows × cols` matrices (see [`Tensor::dims2`]).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, log_sum_exp, sigmoid, softmax_in_place, MatRef, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Log-probabilities are clamped at `ln(1e-30)`.
pub const MIN_LOG_PROB: f64 = -69.077_552_789_821_37;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    MulCols(Var, Var),
    OneMinus(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ScaleRows {
        a: Var,
        factors: Vec<f64>,
    },
    ScatterCols {
        a: Var,
        ids: Vec<Option<usize>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        clamped: Vec<bool>,
        denom: f64,
    },
    BceLogits {
        logits: Var,
        labels: Vec<Option<f64>>,
        denom: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` is tracked but did not reach the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let shape = self.shapes.get(v.0)?;
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Some(Tensor::new(shape.clone(), data).expect("gradient shape"))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamped_log_probs: usize,
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

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Number of target log-probabilities that hit the clamp so far.
    pub fn clamped_log_probs(&self) -> usize {
        self.clamped_log_probs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).expect("op output shape")
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_ext(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul of {:?}{} by {:?}{}",
                self.value(a).shape(),
                if ta { "ᵀ" } else { "" },
                self.value(b).shape(),
                if tb { "ᵀ" } else { "" },
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::new(self.value(a).data(), ac, ta),
            MatRef::new(self.value(b).data(), bc, tb),
            0.0,
            &mut out,
        );
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Self::mat(m, n, out), Op::MatMul { a, b, ta, tb }, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.dims(a)?;
        if self.value(row).len() != c {
            return Err(Error::Shape(format!(
                "row broadcast of {:?} onto {:?}",
                self.value(row).shape(),
                self.value(a).shape()
            )));
        }
        let rv = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(rv) {
                *x += b;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(&[a, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), tracked))
    }

    /// Adds a single-element tensor to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("scalar broadcast of {:?}", self.value(s).shape())));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|x| x + sv).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.tracked(&[a, s]);
        Ok(self.push(value, Op::AddScalar(a, s), tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(&[a]);
        self.push(value, Op::Scale(a, factor), tracked)
    }

    /// Multiplies row `i` of `a` by `col[i]`; `col` holds one value per row.
    pub fn mul_cols(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if self.value(col).len() != r {
            return Err(Error::Shape(format!(
                "column broadcast of {:?} onto {:?}",
                self.value(col).shape(),
                self.value(a).shape()
            )));
        }
        let cv = self.value(col).data();
        let mut data = self.value(a).data().to_vec();
        for (i, chunk) in data.chunks_mut(c).enumerate() {
            for x in chunk {
                *x *= cv[i];
            }
        }
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(&[a, col]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulCols(a, col), tracked))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect()).expect("same shape");
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    /// Softmax over the last axis of every row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.dims(a)?;
        let va = self.value(a);
        if va.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in softmax input".into()));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Op::Softmax(a), tracked))
    }

    /// Per-row normalisation to zero mean and unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Shape(format!(
                "layer norm over {:?} with gain {:?} and bias {:?}",
                self.value(x).shape(),
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let denom = var + eps;
            rstd[i] = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
            for j in 0..c {
                let h = (row[j] - mean) * rstd[i];
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table)?;
        if ids.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Shape(format!("row index {id} out of range for {r} rows")));
            }
            data.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let tracked = self.tracked(&[table]);
        Ok(self.push(
            Self::mat(ids.len(), c, data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "column slice {start}..{} of width {c}",
                start + len
            )));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Self::mat(r, len, data), Op::SliceCols { a, start }, tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (r, _) = self.dims(*first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(Error::Shape(format!("concat of {} rows with {pr} rows", r)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(Self::mat(r, total, data), Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Multiplies each row by a fixed factor (used for token-level dropout).
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if factors.len() != r {
            return Err(Error::Shape(format!("{} row factors for {r} rows", factors.len())));
        }
        let mut data = self.value(a).data().to_vec();
        for (row, f) in data.chunks_mut(c).zip(&factors) {
            for x in row {
                *x *= f;
            }
        }
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, Op::ScaleRows { a, factors }, tracked))
    }

    /// Token-level dropout: whole rows are zeroed with probability `rate` and
    /// survivors scaled by `1 / (1 − rate)`.
    pub fn dropout_rows<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let (r, _) = self.dims(a)?;
        let keep = 1.0 / (1.0 - rate);
        let factors = (0..r)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.scale_rows(a, factors)
    }

    /// Scatter-adds column `j` of `a` into output column `ids[j]` of a
    /// `rows × width` result; `None` columns are skipped.
    pub fn scatter_cols(&mut self, a: Var, ids: &[Option<usize>], width: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if ids.len() != c {
            return Err(Error::Shape(format!("{} scatter ids for {c} columns", ids.len())));
        }
        if let Some(bad) = ids.iter().flatten().find(|&&id| id >= width) {
            return Err(Error::Shape(format!("scatter id {bad} out of range for width {width}")));
        }
        let av = self.value(a).data();
        let mut data = vec![0.0; r * width];
        for i in 0..r {
            for (j, id) in ids.iter().enumerate() {
                if let Some(id) = id {
                    data[i * width + id] += av[i * c + j];
                }
            }
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(
            Self::mat(r, width, data),
            Op::ScatterCols { a, ids: ids.to_vec() },
            tracked,
        ))
    }

    /// `Σ_i −log softmax(logits_i)[target_i] / denom` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], denom: f64) -> Result<Var> {
        let (r, c) = self.dims(logits)?;
        if targets.len() != r {
            return Err(Error::Shape(format!("{} targets for {r} rows", targets.len())));
        }
        if denom <= 0.0 {
            return Err(Error::Numeric("cross entropy over zero positions".into()));
        }
        let lv = self.value(logits).data();
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = vec![0.0; r * c];
        let mut clamped = vec![false; r];
        let mut total = 0.0;
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            if let Some(t) = targets[i] {
                if t >= c {
                    return Err(Error::Shape(format!("target {t} out of range for {c} classes")));
                }
                let lp = row[t] - lse;
                if lp < MIN_LOG_PROB {
                    clamped[i] = true;
                    total -= MIN_LOG_PROB;
                } else {
                    total -= lp;
                }
            }
        }
        self.clamped_log_probs += clamped.iter().filter(|&&c| c).count();
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                clamped,
                denom,
            },
            tracked,
        ))
    }

    /// Binary cross-entropy on logits, summed over labelled entries and divided by `denom`.
    pub fn bce_logits(&mut self, logits: Var, labels: &[Option<f64>], denom: f64) -> Result<Var> {
        let lv = self.value(logits).data();
        if labels.len() != lv.len() {
            return Err(Error::Shape(format!("{} labels for {} logits", labels.len(), lv.len())));
        }
        if denom <= 0.0 {
            return Err(Error::Numeric("binary cross entropy over zero positions".into()));
        }
        let mut total = 0.0;
        for (&z, y) in lv.iter().zip(labels) {
            if let Some(y) = y {
                let log_p = -softplus(-z);
                let log_q = -softplus(z);
                total -= y * log_p.max(MIN_LOG_PROB) + (1.0 - y) * log_q.max(MIN_LOG_PROB);
            }
        }
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
                denom,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    /// Sums single-element values.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let mut acc = *iter.next().ok_or_else(|| Error::Shape("sum of no terms".into()))?;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.nodes.len();
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep gradients; the rest is freed.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, len: usize| -> usize {
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; len]);
            }
            v.0
        };
        let out_shape = node.value.dims2().unwrap_or((1, node.value.len()));
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, n) = out_shape;
                let (ar, ac) = self.dims(a).expect("rank");
                let (br, bc) = self.dims(b).expect("rank");
                let k = if ta { ar } else { ac };
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.nodes[a.0].tracked {
                    let i = acc(grads, a, ar * ac);
                    let ga = grads[i].as_mut().unwrap();
                    if ta {
                        // a stored k×m: dA = op(b) · gᵀ  (k×n · n×m)
                        gemm(k, n, m, 1.0, MatRef::new(bv, bc, tb), MatRef::new(g, n, true), 1.0, ga);
                    } else {
                        // dA = g · op(b)ᵀ  (m×n · n×k)
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            MatRef::new(g, n, false),
                            MatRef::new(bv, bc, !tb),
                            1.0,
                            ga,
                        );
                    }
                }
                if self.nodes[b.0].tracked {
                    let i = acc(grads, b, br * bc);
                    let gb = grads[i].as_mut().unwrap();
                    if tb {
                        // b stored n×k: dB = gᵀ · op(a)  (n×m · m×k)
                        gemm(n, m, k, 1.0, MatRef::new(g, n, true), MatRef::new(av, ac, ta), 1.0, gb);
                    } else {
                        // dB = op(a)ᵀ · g  (k×m · m×n)
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            MatRef::new(av, ac, !ta),
                            MatRef::new(g, n, false),
                            1.0,
                            gb,
                        );
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.nodes[v.0].tracked {
                        let i = acc(grads, v, g.len());
                        add_into(grads[i].as_mut().unwrap(), g);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if self.nodes[a.0].tracked {
                    let i = acc(grads, a, g.len());
                    add_into(grads[i].as_mut().unwrap(), g);
                }
                if self.nodes[row.0].tracked {
                    let c = out_shape.1;
                    let i = acc(grads, row, c);
                    let gr = grads[i].as_mut().unwrap();
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            &Op::AddScalar(a, s) => {
                if self.nodes[a.0].tracked {
                    let i = acc(grads, a, g.len());
                    add_into(grads[i].as_mut().unwrap(), g);
                }
                if self.nodes[s.0].tracked {
                    let i = acc(grads, s, 1);
                    grads[i].as_mut().unwrap()[0] += g.iter().sum::<f64>();
                }
            }
            &Op::Scale(a, f) => {
                let i = acc(grads, a, g.len());
                for (x, gi) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                    *x += f * gi;
                }
            }
            &Op::MulCols(a, col) => {
                let c = out_shape.1;
                let av = self.value(a).data();
                let cv = self.value(col).data();
                if self.nodes[a.0].tracked {
                    let i = acc(grads, a, g.len());
                    let ga = grads[i].as_mut().unwrap();
                    for (r, (gx, gg)) in ga.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        for (x, gi) in gx.iter_mut().zip(gg) {
                            *x += cv[r] * gi;
                        }
                    }
                }
                if self.nodes[col.0].tracked {
                    let i = acc(grads, col, cv.len());
                    let gc = grads[i].as_mut().unwrap();
                    for (r, (ar, gg)) in av.chunks(c).zip(g.chunks(c)).enumerate() {
                        gc[r] += ar.iter().zip(gg).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            &Op::OneMinus(a) => {
                let i = acc(grads, a, g.len());
                for (x, gi) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                    *x -= gi;
                }
            }
            &Op::Gelu(a) => {
                let av = self.value(a).data();
                let i = acc(grads, a, g.len());
                for ((x, gi), &xv) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(av) {
                    *x += gi * gelu_grad(xv);
                }
            }
            &Op::Sigmoid(a) => {
                let out = node.value.data();
                let i = acc(grads, a, g.len());
                for ((x, gi), &s) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(out) {
                    *x += gi * s * (1.0 - s);
                }
            }
            &Op::Softmax(a) => {
                let c = out_shape.1;
                let out = node.value.data();
                let i = acc(grads, a, g.len());
                let ga = grads[i].as_mut().unwrap();
                for ((gx, gg), s) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                    let dot: f64 = gg.iter().zip(s).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        gx[j] += s[j] * (gg[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out_shape.1;
                let gv = self.value(*gain).data();
                if self.nodes[gain.0].tracked {
                    let i = acc(grads, *gain, c);
                    let gg = grads[i].as_mut().unwrap();
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.nodes[bias.0].tracked {
                    let i = acc(grads, *bias, c);
                    let gb = grads[i].as_mut().unwrap();
                    for gr in g.chunks(c) {
                        add_into(gb, gr);
                    }
                }
                if self.nodes[x.0].tracked {
                    let i = acc(grads, *x, g.len());
                    let gx = grads[i].as_mut().unwrap();
                    let cf = c as f64;
                    for (r, ((gxr, gr), hr)) in gx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)).enumerate() {
                        // dx = rstd/c · (c·dh − Σdh − x̂·Σ(dh·x̂)), dh = g ⊙ gain
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            gxr[j] += rstd[r] / cf * (cf * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (tr, c) = self.dims(*table).expect("rank");
                let i = acc(grads, *table, tr * c);
                let gt = grads[i].as_mut().unwrap();
                for (row, &id) in g.chunks(c).zip(ids) {
                    add_into(&mut gt[id * c..(id + 1) * c], row);
                }
            }
            &Op::SliceCols { a, start } => {
                let (r, ac) = self.dims(a).expect("rank");
                let w = out_shape.1;
                let i = acc(grads, a, r * ac);
                let ga = grads[i].as_mut().unwrap();
                for row in 0..r {
                    add_into(
                        &mut ga[row * ac + start..row * ac + start + w],
                        &g[row * w..(row + 1) * w],
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out_shape;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.dims(p).expect("rank");
                    if self.nodes[p.0].tracked {
                        let i = acc(grads, p, r * w);
                        let gp = grads[i].as_mut().unwrap();
                        for row in 0..r {
                            add_into(
                                &mut gp[row * w..(row + 1) * w],
                                &g[row * total + offset..row * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ScaleRows { a, factors } => {
                let c = out_shape.1;
                let i = acc(grads, *a, g.len());
                let ga = grads[i].as_mut().unwrap();
                for ((gx, gg), f) in ga.chunks_mut(c).zip(g.chunks(c)).zip(factors) {
                    for (x, gi) in gx.iter_mut().zip(gg) {
                        *x += f * gi;
                    }
                }
            }
            Op::ScatterCols { a, ids } => {
                let (r, c) = self.dims(*a).expect("rank");
                let w = out_shape.1;
                let i = acc(grads, *a, r * c);
                let ga = grads[i].as_mut().unwrap();
                for row in 0..r {
                    for (j, id) in ids.iter().enumerate() {
                        if let Some(id) = id {
                            ga[row * c + j] += g[row * w + id];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                clamped,
                denom,
            } => {
                let (r, c) = self.dims(*logits).expect("rank");
                let scale = g[0] / denom;
                let i = acc(grads, *logits, r * c);
                let gl = grads[i].as_mut().unwrap();
                for row in 0..r {
                    let Some(t) = targets[row] else { continue };
                    if clamped[row] {
                        continue;
                    }
                    for j in 0..c {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        gl[row * c + j] += scale * (probs[row * c + j] - indicator);
                    }
                }
            }
            Op::BceLogits { logits, labels, denom } => {
                let lv = self.value(*logits).data();
                let scale = g[0] / denom;
                let i = acc(grads, *logits, lv.len());
                let gl = grads[i].as_mut().unwrap();
                for ((x, &z), y) in gl.iter_mut().zip(lv).zip(labels) {
                    if let Some(y) = y {
                        let mut d = 0.0;
                        // each clamped log term contributes no gradient
                        if -softplus(-z) >= MIN_LOG_PROB {
                            d -= y * (1.0 - sigmoid(z));
                        }
                        if -softplus(z) >= MIN_LOG_PROB {
                            d += (1.0 - y) * sigmoid(z);
                        }
                        *x += scale * d;
                    }
                }
            }
            &Op::Sum(a) => {
                let len = self.value(a).len();
                let i = acc(grads, a, len);
                for x in grads[i].as_mut().unwrap() {
                    *x += g[0];
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Compares analytic gradients of `f` with central differences for every
    /// input element.
    fn check<F>(inputs: &[Tensor], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
            let out = f(&mut tape, &vars);
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).unwrap();
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data()[i];
                let scale = fd.abs().max(an.abs());
                let err = if scale < 1e-7 {
                    (fd - an).abs()
                } else {
                    (fd - an).abs() / scale
                };
                assert!(err < 1e-4, "input {k}[{i}]: finite difference {fd}, analytic {an}");
            }
        }
    }

    /// Nonlinear scalar reduction so every element gets a distinct gradient.
    fn reduce(tape: &mut Tape, v: Var) -> Var {
        let s = tape.sigmoid(v);
        tape.sum(s)
    }

    #[test]
    fn matmul_sum_gradient_example() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[2, 2], 1.0));
        let b = tape.constant(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap().get(a).unwrap();
        assert_eq!(g.data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_gradients_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = random(if ta { &[4, 3] } else { &[3, 4] }, 1);
            let b = random(if tb { &[2, 4] } else { &[4, 2] }, 2);
            check(&[a, b], |t, v| {
                let c = t.matmul_ext(v[0], v[1], ta, tb).unwrap();
                reduce(t, c)
            });
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x = random(&[3, 4], 3);
        let y = random(&[3, 4], 4);
        let row = random(&[4], 5);
        let col = random(&[3, 1], 6);
        let s = random(&[1], 7);
        check(&[x.clone(), y], |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            reduce(t, a)
        });
        check(&[x.clone(), row], |t, v| {
            let a = t.add_row(v[0], v[1]).unwrap();
            reduce(t, a)
        });
        check(&[x.clone(), s], |t, v| {
            let a = t.add_scalar(v[0], v[1]).unwrap();
            reduce(t, a)
        });
        check(&[x.clone(), col], |t, v| {
            let a = t.mul_cols(v[0], v[1]).unwrap();
            reduce(t, a)
        });
        check(std::slice::from_ref(&x), |t, v| {
            let a = t.scale(v[0], -1.7);
            let b = t.one_minus(a);
            reduce(t, b)
        });
        check(std::slice::from_ref(&x), |t, v| {
            let a = t.gelu(v[0]);
            t.sum(a)
        });
        check(&[x], |t, v| {
            let a = t.sigmoid(v[0]);
            t.sum(a)
        });
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let x = random(&[3, 5], 8);
        check(std::slice::from_ref(&x), |t, v| {
            let a = t.softmax(v[0]).unwrap();
            let b = t.scale(a, 3.0);
            reduce(t, b)
        });
        check(&[x, random(&[5], 9), random(&[5], 10)], |t, v| {
            let a = t.layer_norm(v[0], v[1], v[2], 1e-12).unwrap();
            reduce(t, a)
        });
    }

    #[test]
    fn layer_norm_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 3.0]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
        let x = tape.constant(Tensor::full(&[4], 2.5));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indexing_gradients() {
        let table = random(&[5, 3], 11);
        check(&[table], |t, v| {
            let a = t.gather(v[0], &[4, 1, 4, 0]).unwrap();
            reduce(t, a)
        });
        let x = random(&[3, 6], 12);
        let y = random(&[3, 2], 13);
        check(&[x.clone(), y], |t, v| {
            let a = t.slice_cols(v[0], 2, 3).unwrap();
            let b = t.concat_cols(&[v[1], a, v[1]]).unwrap();
            reduce(t, b)
        });
        check(std::slice::from_ref(&x), |t, v| {
            let a = t.scale_rows(v[0], vec![0.0, 2.0, -1.0]).unwrap();
            reduce(t, a)
        });
        check(&[x], |t, v| {
            let a = t
                .scatter_cols(v[0], &[Some(2), None, Some(0), Some(2), Some(4), None], 5)
                .unwrap();
            reduce(t, a)
        });
    }

    #[test]
    fn loss_gradients() {
        let logits = random(&[4, 5], 14);
        check(std::slice::from_ref(&logits), |t, v| {
            t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)], 3.0).unwrap()
        });
        check(&[logits], |t, v| {
            let labels: Vec<Option<f64>> = (0..20).map(|i| (i % 3 != 0).then_some((i % 2) as f64)).collect();
            t.bce_logits(v[0], &labels, 7.0).unwrap()
        });
        let parts: Vec<Tensor> = (0..3).map(|i| random(&[1], 20 + i)).collect();
        check(&parts, |t, v| {
            let s = t.add_all(v).unwrap();
            let s = t.gelu(s);
            t.sum(s)
        });
    }

    #[test]
    fn cross_entropy_uniform_and_clamp() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 4]));
        let l = tape.cross_entropy(z, &[Some(0), Some(3)], 2.0).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);
        let z = tape.constant(Tensor::vector(vec![0.0, -1000.0]));
        let l = tape.cross_entropy(z, &[Some(1)], 1.0).unwrap();
        assert_eq!(tape.value(l).data()[0], -MIN_LOG_PROB);
        assert_eq!(tape.clamped_log_probs(), 1);
    }

    #[test]
    fn dropout_rows_semantics() {
        let x = random(&[50, 4], 30);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(tape.dropout_rows(v, 0.0, &mut rng).unwrap(), v);
        assert!(matches!(tape.dropout_rows(v, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(tape.dropout_rows(v, -0.1, &mut rng).is_err());
        let run = |seed| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let d = tape.dropout_rows(v, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            tape.value(d).clone()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        let mut dropped = 0;
        for i in 0..50 {
            let row = a.row(i);
            if row.iter().all(|&v| v == 0.0) {
                dropped += 1;
            } else {
                for (o, xi) in row.iter().zip(x.row(i)) {
                    assert!((o - xi / 0.7).abs() < 1e-12);
                }
            }
        }
        assert!(dropped > 0 && dropped < 50);
    }

    #[test]
    fn dropout_is_unbiased() {
        let x = Tensor::full(&[1, 1], 1.0);
        let trials = 10_000;
        let mut total = 0.0;
        for seed in 0..trials {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let d = tape.dropout_rows(v, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            total += tape.value(d).data()[0];
        }
        let mean = total / trials as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let unused = tape.param(Tensor::scalar(1.0));
        let s = tape.add(a, c).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none() || g.get(c).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn truncate_discards_later_nodes() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let mark = tape.len();
        let b = tape.scale(a, 3.0);
        assert_eq!(tape.value(b).data(), &[6.0]);
        tape.truncate(mark);
        assert_eq!(tape.len(), 1);
        let c = tape.scale(a, 5.0);
        assert_eq!(tape.value(c).data(), &[10.0]);
    }
}
