//! Reverse-mode gradient tape.
//!
//! Forward operations append nodes to the tape in topological order; the
//! backward pass walks the tape in reverse and applies each node's
//! vector-Jacobian product. Every forward op validates shapes up front and
//! rejects non-finite outputs.

use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position of this node on its tape; indexes the gradient vector that
    /// [`Tape::backward`] returns.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a[m,n] + b[n]` broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    /// Value holds the row-wise probabilities.
    SoftmaxRows(Var),
    LogSoftmaxRows {
        x: Var,
        probs: Tensor,
    },
    /// ln(max(x, floor)); keeps log finite on degenerate distributions.
    LnClamped {
        x: Var,
        floor: f64,
    },
    Transpose(Var),
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    /// Scalar `-sum(x ⊙ w)` against a constant weight tensor.
    NegDotConst {
        x: Var,
        w: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Leaves mirroring model parameters use the
    /// same entry point; the caller keeps the `Var` to read the gradient
    /// back after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.axpy(1.0, tb)?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// Broadcast a vector over each row of a matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(b).shape() != [n] {
            return Err(Error::Shape(format!(
                "add_row expects bias of shape [{n}], got {:?}",
                self.value(b).shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let bias = self.value(b).data();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += bias[c];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(out, Op::AddRow(a, b), "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "sub shapes disagree: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.axpy(-1.0, tb)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul shapes disagree: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Relu(a), "relu")
    }

    /// Row-wise normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.value(x).dims2()?;
        if self.value(gain).shape() != [d] || self.value(shift).shape() != [d] {
            return Err(Error::Shape("layer_norm gain/shift must have shape [d]".into()));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data().to_vec();
        let s = self.value(shift).data().to_vec();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + s[c];
            }
        }
        let xhat = Tensor::new(vec![m, d], xhat)?;
        let out = Tensor::new(vec![m, d], out)?;
        self.push(out, Op::LayerNorm { x, gain, shift, xhat, inv_std }, "layer_norm")
    }

    /// Numerically stable row-wise softmax (per-row max subtraction).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, c) = self.value(a).dims2()?;
        if c == 0 {
            return Err(Error::Shape("softmax over empty last axis".into()));
        }
        let xs = self.value(a).data();
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            let row = &xs[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[r * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[r * c + j] /= sum;
            }
        }
        let out = Tensor::new(vec![m, c], out)?;
        self.push(out, Op::SoftmaxRows(a), "softmax")
    }

    /// Row-wise `logits - logsumexp(logits)`; never computed as log(softmax).
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, c) = self.value(a).dims2()?;
        if c == 0 {
            return Err(Error::Shape("log_softmax over empty last axis".into()));
        }
        let xs = self.value(a).data();
        let mut out = vec![0.0; m * c];
        let mut probs = vec![0.0; m * c];
        for r in 0..m {
            let row = &xs[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[r * c + j] = row[j] - lse;
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::new(vec![m, c], out)?;
        let probs = Tensor::new(vec![m, c], probs)?;
        self.push(out, Op::LogSoftmaxRows { x: a, probs }, "log_softmax")
    }

    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(floor).ln()).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::LnClamped { x: a, floor }, "ln")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.value(a).dims2()?;
        let (mb, nb) = self.value(b).dims2()?;
        if na != nb {
            return Err(Error::Shape("concat_rows column counts disagree".into()));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(vec![ma + mb, na], data)?;
        self.push(out, Op::ConcatRows(a, b), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > m {
            return Err(Error::Shape(format!("slice_rows {start}..{} out of {m} rows", start + len)));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        self.push(out, Op::SliceRows { x: a, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start + len > n {
            return Err(Error::Shape(format!("slice_cols {start}..{} out of {n} cols", start + len)));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; m * len];
        for r in 0..m {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push(out, Op::SliceCols { x: a, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(Error::Shape("concat_cols row counts disagree".into()));
            }
            widths.push(pn);
            total += pn;
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::new(vec![m, total], data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    /// `-sum(x ⊙ w)` with `w` a constant; the soft-label cross-entropy core.
    pub fn neg_dot_const(&mut self, x: Var, w: Tensor) -> Result<Var> {
        if self.value(x).shape() != w.shape() {
            return Err(Error::Shape(format!(
                "neg_dot_const shapes disagree: {:?} vs {:?}",
                self.value(x).shape(),
                w.shape()
            )));
        }
        let s: f64 = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(-s), Op::NegDotConst { x, w }, "neg_dot_const")
    }

    /// Runs the reverse sweep from a scalar loss. Returns one gradient slot
    /// per tape node; nodes the loss does not depend on stay `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.apply_vjp(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn apply_vjp(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(t) => t.axpy(1.0, &delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose()?)?;
                let db = self.value(*a).transpose()?.matmul(g)?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g.clone())?;
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone())?;
                let (m, n) = g.dims2()?;
                let mut db = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        db[c] += g.data()[r * n + c];
                    }
                }
                acc(grads, *b, Tensor::vector(db))?;
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone())?;
                let mut db = Tensor::zeros(g.shape().to_vec());
                db.axpy(-1.0, g)?;
                acc(grads, *b, db)?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                )?;
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                )?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::Scale(a, factor) => {
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|x| x * factor).collect(),
                )?;
                acc(grads, *a, da)?;
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )?;
                acc(grads, *a, da)?;
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let (m, d) = g.dims2()?;
                let gvals = self.value(*gain).data();
                let mut dx = vec![0.0; m * d];
                let mut dgain = vec![0.0; d];
                let mut dshift = vec![0.0; d];
                for r in 0..m {
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let hrow = &xhat.data()[r * d..(r + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..d {
                        let dh = grow[c] * gvals[c];
                        m1 += dh;
                        m2 += dh * hrow[c];
                        dgain[c] += grow[c] * hrow[c];
                        dshift[c] += grow[c];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for c in 0..d {
                        let dh = grow[c] * gvals[c];
                        dx[r * d + c] = inv_std[r] * (dh - m1 - hrow[c] * m2);
                    }
                }
                acc(grads, *x, Tensor::new(vec![m, d], dx)?)?;
                acc(grads, *gain, Tensor::vector(dgain))?;
                acc(grads, *shift, Tensor::vector(dshift))?;
            }
            Op::SoftmaxRows(a) => {
                let probs = &self.nodes[idx].value;
                let (m, c) = probs.dims2()?;
                let mut dx = vec![0.0; m * c];
                for r in 0..m {
                    let prow = &probs.data()[r * c..(r + 1) * c];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = prow.iter().zip(grow).map(|(p, gv)| p * gv).sum();
                    for j in 0..c {
                        dx[r * c + j] = prow[j] * (grow[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::new(vec![m, c], dx)?)?;
            }
            Op::LogSoftmaxRows { x, probs } => {
                let (m, c) = probs.dims2()?;
                let mut dx = vec![0.0; m * c];
                for r in 0..m {
                    let prow = &probs.data()[r * c..(r + 1) * c];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        dx[r * c + j] = grow[j] - prow[j] * gsum;
                    }
                }
                acc(grads, *x, Tensor::new(vec![m, c], dx)?)?;
            }
            Op::LnClamped { x, floor } => {
                let tx = self.value(*x);
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, &v)| gv / v.max(*floor))
                        .collect(),
                )?;
                acc(grads, *x, da)?;
            }
            Op::Transpose(a) => {
                acc(grads, *a, g.transpose()?)?;
            }
            Op::ConcatRows(a, b) => {
                let (ma, n) = self.value(*a).dims2()?;
                let (mb, _) = self.value(*b).dims2()?;
                let da = Tensor::new(vec![ma, n], g.data()[..ma * n].to_vec())?;
                let db = Tensor::new(vec![mb, n], g.data()[ma * n..].to_vec())?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::SliceRows { x, start } => {
                let (m, n) = self.value(*x).dims2()?;
                let (gl, _) = g.dims2()?;
                let mut dx = Tensor::zeros(vec![m, n]);
                dx.data_mut()[start * n..(start + gl) * n].copy_from_slice(g.data());
                acc(grads, *x, dx)?;
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2()?;
                let (_, gl) = g.dims2()?;
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    dx.data_mut()[r * n + start..r * n + start + gl]
                        .copy_from_slice(&g.data()[r * gl..(r + 1) * gl]);
                }
                acc(grads, *x, dx)?;
            }
            Op::ConcatCols(parts) => {
                let (m, _) = g.dims2()?;
                let total = g.dims2()?.1;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2()?;
                    let mut dp = vec![0.0; m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    acc(grads, p, Tensor::new(vec![m, w], dp)?)?;
                    offset += w;
                }
            }
            Op::SumAll(a) => {
                let gv = g.item()?;
                acc(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), gv))?;
            }
            Op::NegDotConst { x, w } => {
                let gv = g.item()?;
                let dx = Tensor::new(
                    w.shape().to_vec(),
                    w.data().iter().map(|v| -gv * v).collect(),
                )?;
                acc(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, -5.0, 0.0, 5.0]).unwrap()).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(p).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);

        let y = tape.leaf(Tensor::matrix(1, 2, vec![2.0_f64.ln(), 0.0]).unwrap()).unwrap();
        let q = tape.softmax_rows(y).unwrap();
        assert!((tape.value(q).data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(q).data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap()).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        assert!(tape.value(p).is_finite());
        assert!((tape.value(p).data()[0] - 1.0).abs() < 1e-12);

        let huge = tape.leaf(Tensor::matrix(1, 2, vec![1e30, -1e30]).unwrap()).unwrap();
        let ph = tape.softmax_rows(huge).unwrap();
        assert!(tape.value(ph).is_finite());
    }

    #[test]
    fn softmax_rejects_empty_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 0])).unwrap();
        assert!(tape.softmax_rows(x).is_err());
    }

    #[test]
    fn layer_norm_constant_row_maps_to_shift() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap()).unwrap();
        let gain = tape.leaf(Tensor::vector(vec![1.0; 4])).unwrap();
        let shift = tape.leaf(Tensor::vector(vec![0.5; 4])).unwrap();
        let y = tape.layer_norm(x, gain, shift, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let gain = tape.leaf(Tensor::vector(vec![1.0, 1.0])).unwrap();
        let shift = tape.leaf(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = tape.layer_norm(x, gain, shift, 1e-12).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-5);
        assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_extreme_magnitudes_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1e30, -1e30, 0.0]).unwrap()).unwrap();
        let gain = tape.leaf(Tensor::vector(vec![1.0; 3])).unwrap();
        let shift = tape.leaf(Tensor::vector(vec![0.0; 3])).unwrap();
        let y = tape.layer_norm(x, gain, shift, 1e-5).unwrap();
        assert!(tape.value(y).is_finite());

        let tiny = tape.leaf(Tensor::matrix(1, 3, vec![1e-30, -1e-30, 0.0]).unwrap()).unwrap();
        let yt = tape.layer_norm(tiny, gain, shift, 1e-5).unwrap();
        assert!(tape.value(yt).is_finite());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_of_softmax_sum_is_zero() {
        // Row sums of softmax are constant 1, so the gradient vanishes.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 4, vec![0.3, -1.2, 2.0, 0.7]).unwrap()).unwrap();
        let p = tape.softmax_rows(x).unwrap();
        let loss = tape.sum_all(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads[0].as_ref().unwrap();
        for &v in gx.data() {
            assert!(v.abs() < 1e-12, "expected zero grad, got {v}");
        }
    }

    #[test]
    fn backward_of_half_norm_squared_is_identity() {
        // loss = 0.5 * ||x||^2  =>  dloss/dx = x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.5, -2.0, 0.25]).unwrap()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gx = grads[0].as_ref().unwrap();
        assert_eq!(gx.data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 1, vec![1e308]).unwrap()).unwrap();
        // 1e308 * 10 overflows to +inf
        assert!(tape.scale(a, 10.0).is_err());
    }
}
