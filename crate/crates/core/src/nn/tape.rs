//! Reverse-mode differentiation over a linear tape of tensor operations.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, matmul, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse rows; row `i` lists `(column, weight)` pairs.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl SparseRows {
    pub fn rows(&self) -> usize {
        self.row_ptr.len().saturating_sub(1)
    }

    pub fn from_dense(a: &Tensor) -> Self {
        let mut out = SparseRows {
            row_ptr: vec![0],
            ..Default::default()
        };
        for i in 0..a.rows() {
            for (j, &x) in a.row(i).iter().enumerate() {
                if x != 0.0 {
                    out.cols.push(j as u32);
                    out.vals.push(x);
                }
            }
            out.row_ptr.push(out.cols.len());
        }
        out
    }

    /// `self * other` for two sparse operands; `other` has `width` columns.
    pub fn product(&self, other: &SparseRows, width: usize) -> SparseRows {
        let mut out = SparseRows {
            row_ptr: vec![0],
            ..Default::default()
        };
        let mut acc = vec![0.0; width];
        let mut seen = vec![false; width];
        let mut touched: Vec<u32> = Vec::new();
        for i in 0..self.rows() {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let (j, a) = (self.cols[p] as usize, self.vals[p]);
                for q in other.row_ptr[j]..other.row_ptr[j + 1] {
                    let c = other.cols[q] as usize;
                    if !seen[c] {
                        seen[c] = true;
                        touched.push(c as u32);
                    }
                    acc[c] += a * other.vals[q];
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                out.cols.push(c);
                out.vals.push(acc[c as usize]);
                acc[c as usize] = 0.0;
                seen[c as usize] = false;
            }
            touched.clear();
            out.row_ptr.push(out.cols.len());
        }
        out
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        self.apply_masked(x, None)
    }

    /// `self * (mask ⊙ x)`.
    fn apply_masked(&self, x: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let c = x.cols();
        let mut out = Tensor::zeros(&[self.rows(), c]);
        let od = out.data_mut();
        let xd = x.data();
        for i in 0..self.rows() {
            let dst = &mut od[i * c..(i + 1) * c];
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[p] as usize;
                let a = self.vals[p];
                let src = &xd[j * c..(j + 1) * c];
                match mask {
                    None => {
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += a * v;
                        }
                    }
                    Some(m) => {
                        for ((o, &v), &k) in dst.iter_mut().zip(src).zip(&m.data()[j * c..(j + 1) * c]) {
                            *o += a * v * k;
                        }
                    }
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Tensor, out_rows: usize) -> Tensor {
        let c = g.cols();
        let mut out = Tensor::zeros(&[out_rows, c]);
        let od = out.data_mut();
        let gd = g.data();
        for i in 0..self.rows() {
            let src = &gd[i * c..(i + 1) * c];
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[p] as usize;
                let a = self.vals[p];
                for (o, &v) in od[j * c..(j + 1) * c].iter_mut().zip(src) {
                    *o += a * v;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    BiasRelu(Var, Var),
    Mask(Var, Tensor),
    Prop(Var, Arc<SparseRows>, Option<Tensor>),
    SparseMatMul(Arc<SparseRows>, Var),
    SparseAffineRelu(Arc<SparseRows>, Var, Var),
    /// Argmax rows per pooled entry; the pre-activation is not kept.
    AffineReluMax(Var, Var, Var, Vec<u32>),
    SegmentMax(Var, Vec<u32>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    LinComb(Vec<(Var, f64)>),
    /// Scalar whose gradient w.r.t. each input was computed alongside the value.
    Fused(Vec<(Var, Tensor)>),
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(&self.values[a.0], false, &self.values[b.0], false)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.values[x.0], &self.values[b.0]);
        if !xv.is_matrix() || bv.shape() != [xv.cols()] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `relu(x + b)` with a row-broadcast bias, in one pass.
    pub fn bias_relu(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.values[x.0], &self.values[b.0]);
        if !xv.is_matrix() || bv.shape() != [xv.cols()] {
            return Err(Error::shape(
                "bias_relu",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = (*o + bb).max(0.0);
            }
        }
        Ok(self.push(out, Op::BiasRelu(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Elementwise product with a constant mask of the same length.
    pub fn mask(&mut self, x: Var, mask: Tensor) -> Result<Var> {
        let xv = &self.values[x.0];
        if mask.len() != xv.len() {
            return Err(Error::shape(
                "mask",
                format!("{} mask values for {:?}", mask.len(), xv.shape()),
            ));
        }
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        Ok(self.push(out, Op::Mask(x, mask)))
    }

    pub fn propagate(&mut self, x: Var, adj: Arc<SparseRows>) -> Result<Var> {
        self.propagate_masked(x, None, adj)
    }

    /// `adj * (mask ⊙ x)` without materialising the masked input.
    pub fn propagate_masked(&mut self, x: Var, mask: Option<Tensor>, adj: Arc<SparseRows>) -> Result<Var> {
        let xv = &self.values[x.0];
        if !xv.is_matrix() || xv.rows() != adj.rows() {
            return Err(Error::shape(
                "propagate",
                format!("{} x {} adjacency against {:?}", adj.rows(), adj.rows(), xv.shape()),
            ));
        }
        if let Some(m) = &mask {
            if m.shape() != xv.shape() {
                return Err(Error::shape(
                    "propagate",
                    format!("mask {:?} for {:?}", m.shape(), xv.shape()),
                ));
            }
        }
        let out = adj.apply_masked(xv, mask.as_ref());
        Ok(self.push(out, Op::Prop(x, adj, mask)))
    }

    /// `relu(a * w + b)` for a constant sparse `a`.
    pub fn sparse_affine_relu(&mut self, a: Arc<SparseRows>, w: Var, b: Var) -> Result<Var> {
        let (wv, bv) = (&self.values[w.0], &self.values[b.0]);
        if !wv.is_matrix() || bv.shape() != [wv.cols()] || a.cols.iter().any(|&j| j as usize >= wv.rows()) {
            return Err(Error::shape(
                "sparse_affine_relu",
                format!("weight {:?}, bias {:?}", wv.shape(), bv.shape()),
            ));
        }
        let mut out = a.apply(wv);
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = (*o + bb).max(0.0);
            }
        }
        Ok(self.push(out, Op::SparseAffineRelu(a, w, b)))
    }

    /// Column-wise max of `relu(a * w + b)` over each row segment `offsets[s]..offsets[s + 1]`,
    /// equal to `segment_max(bias_relu(matmul(a, w), b))` without keeping the node-level values.
    pub fn affine_relu_segment_max(&mut self, a: Var, w: Var, b: Var, offsets: &[usize]) -> Result<Var> {
        let z = matmul(&self.values[a.0], false, &self.values[w.0], false)?;
        let bv = &self.values[b.0];
        if bv.shape() != [z.cols()] {
            return Err(Error::shape(
                "affine_relu_segment_max",
                format!("bias {:?} for {:?}", bv.shape(), z.shape()),
            ));
        }
        check_offsets(offsets, z.rows())?;
        let (segs, c) = (offsets.len() - 1, z.cols());
        let mut out = Tensor::zeros(&[segs, c]);
        let mut arg = vec![0u32; segs * c];
        let bd = bv.data();
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            let row = out.row_mut(s);
            row.copy_from_slice(z.row(lo));
            for r in lo + 1..hi {
                for (m, &v) in row.iter_mut().zip(z.row(r)) {
                    *m = if v > *m { v } else { *m };
                }
            }
            // relu(. + b) is monotone, so the first row reaching the raw maximum is the argmax
            let a = &mut arg[s * c..(s + 1) * c];
            for r in (lo..hi).rev() {
                for ((k, &v), &m) in a.iter_mut().zip(z.row(r)).zip(row.iter()) {
                    *k = if v == m { r as u32 } else { *k };
                }
            }
            for (o, &bb) in row.iter_mut().zip(bd) {
                *o = (*o + bb).max(0.0);
            }
        }
        Ok(self.push(out, Op::AffineReluMax(a, w, b, arg)))
    }

    /// `x * w` for a constant sparse `x`; only `w` receives a gradient.
    pub fn sparse_matmul(&mut self, x: Arc<SparseRows>, w: Var) -> Result<Var> {
        let wv = &self.values[w.0];
        if !wv.is_matrix() || x.cols.iter().any(|&j| j as usize >= wv.rows()) {
            return Err(Error::shape(
                "sparse_matmul",
                format!("sparse columns exceed {:?}", wv.shape()),
            ));
        }
        let out = x.apply(wv);
        Ok(self.push(out, Op::SparseMatMul(x, w)))
    }

    /// Column-wise max over each row segment `offsets[s]..offsets[s + 1]`.
    pub fn segment_max(&mut self, x: Var, offsets: Vec<usize>) -> Result<Var> {
        let xv = &self.values[x.0];
        check_offsets(&offsets, xv.rows())?;
        let segs = offsets.len() - 1;
        let c = xv.cols();
        let mut out = Tensor::zeros(&[segs, c]);
        let mut arg = vec![0u32; segs * c];
        for s in 0..segs {
            let row = out.row_mut(s);
            row.copy_from_slice(xv.row(offsets[s]));
            let a = &mut arg[s * c..(s + 1) * c];
            a.fill(offsets[s] as u32);
            for r in offsets[s] + 1..offsets[s + 1] {
                for (j, &v) in xv.row(r).iter().enumerate() {
                    // strict comparison keeps the lowest index on ties
                    if v > row[j] {
                        row[j] = v;
                        a[j] = r as u32;
                    }
                }
            }
        }
        Ok(self.push(out, Op::SegmentMax(x, arg)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = &self.values[x.0];
        if !xv.is_matrix() || start > end || end > xv.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {:?}", xv.shape()),
            ));
        }
        let c = xv.cols();
        let out = Tensor::from_vec(&[end - start, c], xv.data()[start * c..end * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = &self.values[x.0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {:?}", xv.shape())));
        }
        let out = xv.select_rows(&rows);
        Ok(self.push(out, Op::GatherRows(x, rows)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `sum(k_i * x_i)` over scalar inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, k) in terms {
            let t = &self.values[v.0];
            if t.len() != 1 {
                return Err(Error::shape("lin_comb", format!("non-scalar term {:?}", t.shape())));
            }
            s += k * t.item();
        }
        Ok(self.push(Tensor::scalar(s), Op::LinComb(terms.to_vec())))
    }

    /// Records a scalar computed outside the tape together with its input gradients.
    pub fn fused(&mut self, value: f64, grads: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &grads {
            if g.shape() != self.values[v.0].shape() {
                return Err(Error::shape(
                    "fused",
                    format!("gradient {:?} for value {:?}", g.shape(), self.values[v.0].shape()),
                ));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused(grads)))
    }

    /// Which units are active after every ReLU and which rows won every max-pool column.
    /// Two forward passes with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for (value, op) in self.values.iter().zip(&self.ops) {
            match op {
                Op::Relu(_) | Op::BiasRelu(..) | Op::SparseAffineRelu(..) => {
                    out.extend(value.data().iter().map(|&v| (v > 0.0) as u64))
                }
                Op::SegmentMax(_, arg) => out.extend(arg.iter().map(|&a| a as u64)),
                Op::AffineReluMax(.., arg) => {
                    out.extend(value.data().iter().map(|&v| (v > 0.0) as u64));
                    out.extend(arg.iter().map(|&a| a as u64));
                }
                _ => {}
            }
        }
        out
    }

    /// Gradients of the scalar `loss` w.r.t. every leaf (`None` where unreachable).
    /// Intermediate gradients are released as soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if loss.0 >= self.values.len() {
            return Err(Error::BackwardBeforeForward);
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.values[loss.0].shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.values[loss.0].shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let nnz = g.data().iter().filter(|&&v| v != 0.0).count();
                    if nnz * SPARSE_GRAD_RATIO < g.len() {
                        let (ga, gb) = sparse_matmul_grads(&g, av, bv);
                        accumulate(&mut grads, *a, ga);
                        accumulate(&mut grads, *b, gb);
                    } else {
                        accumulate_with(&mut grads, *a, av.shape(), |buf| {
                            gemm_into(&g, false, bv, true, buf, m, n, k, 1.0)
                        });
                        accumulate_with(&mut grads, *b, bv.shape(), |buf| {
                            gemm_into(av, true, &g, false, buf, k, m, n, 1.0)
                        });
                    }
                }
                Op::AddBias(x, b) => {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c.max(1)) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::from_vec(&[c], gb)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let mut d = g;
                    relu_gate(d.data_mut(), self.values[i].data());
                    accumulate(&mut grads, *x, d);
                }
                Op::BiasRelu(x, b) => {
                    let mut d = g;
                    let c = d.cols();
                    let mut gb = vec![0.0; c];
                    for (row, out) in d
                        .data_mut()
                        .chunks_mut(c.max(1))
                        .zip(self.values[i].data().chunks(c.max(1)))
                    {
                        relu_gate(row, out);
                        for (s, &v) in gb.iter_mut().zip(row.iter()) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::from_vec(&[c], gb)?);
                    accumulate(&mut grads, *x, d);
                }
                Op::Mask(x, m) => {
                    let mut d = g;
                    for (o, k) in d.data_mut().iter_mut().zip(m.data()) {
                        *o *= k;
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Prop(x, adj, mask) => {
                    let mut d = adj.apply_transpose(&g, adj.rows());
                    if let Some(m) = mask {
                        for (o, k) in d.data_mut().iter_mut().zip(m.data()) {
                            *o *= k;
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::SparseAffineRelu(a, w, b) => {
                    let mut d = g;
                    let c = d.cols();
                    let mut gb = vec![0.0; c];
                    for (row, out) in d
                        .data_mut()
                        .chunks_mut(c.max(1))
                        .zip(self.values[i].data().chunks(c.max(1)))
                    {
                        relu_gate(row, out);
                        for (s, &v) in gb.iter_mut().zip(row.iter()) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *b, Tensor::from_vec(&[c], gb)?);
                    accumulate(&mut grads, *w, a.apply_transpose(&d, self.values[w.0].rows()));
                }
                Op::AffineReluMax(a, w, b, arg) => {
                    let (av, wv) = (&self.values[a.0], &self.values[w.0]);
                    let (k, c) = (wv.rows(), wv.cols());
                    let wt = wv.transpose();
                    let mut ga = Tensor::zeros(av.shape());
                    let mut gwt = Tensor::zeros(&[c, k]);
                    let mut gb = vec![0.0; c];
                    let pooled = self.values[i].data();
                    for (idx, (&up, &r)) in g.data().iter().zip(arg).enumerate() {
                        if up == 0.0 || pooled[idx] <= 0.0 {
                            continue;
                        }
                        let (r, j) = (r as usize, idx % c);
                        gb[j] += up;
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(wt.row(j)) {
                            *o += up * x;
                        }
                        for (o, &x) in gwt.row_mut(j).iter_mut().zip(av.row(r)) {
                            *o += up * x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *w, gwt.transpose());
                    accumulate(&mut grads, *b, Tensor::from_vec(&[c], gb)?);
                }
                Op::SparseMatMul(x, w) => {
                    let rows = self.values[w.0].rows();
                    accumulate(&mut grads, *w, x.apply_transpose(&g, rows));
                }
                Op::SegmentMax(x, arg) => {
                    let xv = &self.values[x.0];
                    let c = xv.cols();
                    let gd = g.data();
                    accumulate_with(&mut grads, *x, xv.shape(), |buf| {
                        for (idx, &r) in arg.iter().enumerate() {
                            buf[r as usize * c + idx % c] += gd[idx];
                        }
                    });
                }
                Op::SliceRows(x, start) => {
                    let xv = &self.values[x.0];
                    let c = xv.cols();
                    accumulate_with(&mut grads, *x, xv.shape(), |buf| {
                        for (o, &v) in buf[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
                Op::GatherRows(x, rows) => {
                    let xv = &self.values[x.0];
                    let c = xv.cols();
                    accumulate_with(&mut grads, *x, xv.shape(), |buf| {
                        for (k, &r) in rows.iter().enumerate() {
                            for (o, &v) in buf[r * c..(r + 1) * c].iter_mut().zip(g.row(k)) {
                                *o += v;
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let up = g.item();
                    accumulate(&mut grads, *x, Tensor::filled(self.values[x.0].shape(), up));
                }
                Op::LinComb(terms) => {
                    let up = g.item();
                    for &(v, k) in terms {
                        accumulate(&mut grads, v, Tensor::filled(self.values[v.0].shape(), up * k));
                    }
                }
                Op::Fused(parts) => {
                    let up = g.item();
                    for (v, d) in parts {
                        let mut d = d.clone();
                        d.scale(up);
                        accumulate(&mut grads, *v, d);
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn check_offsets(offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || offsets.last() != Some(&rows) || offsets.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(Error::shape(
            "segment_max",
            format!("offsets {offsets:?} for {rows} rows"),
        ));
    }
    Ok(())
}

fn relu_gate(grad: &mut [f64], out: &[f64]) {
    for (o, &y) in grad.iter_mut().zip(out) {
        *o = if y > 0.0 { *o } else { 0.0 };
    }
}

/// Upstream gradients sparser than one nonzero in this many entries skip dense GEMM.
const SPARSE_GRAD_RATIO: usize = 4;

/// `(g * b^T, a^T * g)` visiting only the nonzeros of `g`.
fn sparse_matmul_grads(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let bt = b.transpose();
    let mut ga = Tensor::zeros(&[m, k]);
    let mut gbt = Tensor::zeros(&[n, k]);
    for r in 0..m {
        let ar = a.row(r);
        for (j, &v) in g.row(r).iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for (o, &x) in ga.row_mut(r).iter_mut().zip(bt.row(j)) {
                *o += v * x;
            }
            for (o, &x) in gbt.row_mut(j).iter_mut().zip(ar) {
                *o += v * x;
            }
        }
    }
    (ga, gbt.transpose())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn accumulate_with(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(slot.as_mut().unwrap().data_mut());
}
