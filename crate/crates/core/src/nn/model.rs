//! GCN encoder with max-pool readout, projection head and classifier head.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::tape::{SparseRows, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::sampling::AccountSubgraph;
use crate::tensor::Tensor;

/// What the classifier head consumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInput {
    #[default]
    Pooled,
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_classes: usize,
    /// Use symmetrised interaction counts instead of 0/1 entries in the propagation matrix.
    pub weighted_adjacency: bool,
    pub head_input: HeadInput,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: 128,
            layers: 2,
            num_classes: 2,
            weighted_adjacency: false,
            head_input: HeadInput::Pooled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!("degenerate model configuration {self:?}")));
        }
        Ok(())
    }
}

/// Flat parameter list. Layout: `gcn{l}.w`, `gcn{l}.b` for each layer, then `proj1`, `proj2`
/// and `clf` as weight/bias pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, &[0x696e_6974]);
        let mut tensors = Vec::new();
        let mut dense = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            tensors.push(Tensor::glorot(fan_in, fan_out, rng));
            tensors.push(Tensor::zeros(&[fan_out]));
        };
        let h = config.hidden;
        for l in 0..config.layers {
            dense(if l == 0 { config.input_dim } else { h }, h, &mut rng);
        }
        dense(h, h, &mut rng);
        dense(h, h, &mut rng);
        dense(h, config.num_classes, &mut rng);
        Ok(Self { config, tensors })
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.tensors.len());
        for l in 1..=self.config.layers {
            out.push(format!("gcn{l}.w"));
            out.push(format!("gcn{l}.b"));
        }
        for head in ["proj1", "proj2", "clf"] {
            out.push(format!("{head}.w"));
            out.push(format!("{head}.b"));
        }
        out
    }

    pub fn gcn_index(&self, layer: usize) -> usize {
        2 * layer
    }

    pub fn proj1_index(&self) -> usize {
        2 * self.config.layers
    }

    pub fn proj2_index(&self) -> usize {
        2 * self.config.layers + 2
    }

    pub fn clf_index(&self) -> usize {
        2 * self.config.layers + 4
    }

    pub fn expected_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let h = config.hidden;
        let mut out = Vec::new();
        for l in 0..config.layers {
            out.push(vec![if l == 0 { config.input_dim } else { h }, h]);
            out.push(vec![h]);
        }
        for (i, o) in [(h, h), (h, h), (h, config.num_classes)] {
            out.push(vec![i, o]);
            out.push(vec![o]);
        }
        out
    }

    pub fn check(&self) -> Result<()> {
        let shapes = Self::expected_shapes(&self.config);
        if shapes.len() != self.tensors.len() {
            return Err(Error::shape(
                "params",
                format!("{} tensors, expected {}", self.tensors.len(), shapes.len()),
            ));
        }
        for ((t, s), name) in self.tensors.iter().zip(&shapes).zip(self.names()) {
            if t.shape() != s.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("{name} is {:?}, expected {s:?}", t.shape()),
                ));
            }
            if !t.all_finite() {
                return Err(Error::NonFiniteGradient(format!("non-finite parameter {name}")));
            }
        }
        Ok(())
    }
}

/// Symmetric-normalised propagation matrix of a subgraph as a dense `|V| x |V|` tensor.
///
/// Entries come from the symmetrised local edges (self-edges skipped, self-loops added once),
/// so `A_hat = D^-1/2 (A_sym + I) D^-1/2`.
pub fn normalize_adjacency(g: &AccountSubgraph) -> Tensor {
    normalize_adjacency_with(g, false)
}

pub fn normalize_adjacency_with(g: &AccountSubgraph, weighted: bool) -> Tensor {
    let n = g.node_count();
    let mut a = Tensor::eye(n);
    for e in &g.edges {
        let (i, j) = (e.src as usize, e.dst as usize);
        if i == j {
            continue;
        }
        if weighted {
            a.set(i, j, a.get(i, j) + e.t as f64);
            a.set(j, i, a.get(j, i) + e.t as f64);
        } else {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
    }
    let d: Vec<f64> = (0..n).map(|i| 1.0 / a.row(i).iter().sum::<f64>().sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                a.set(i, j, d[i] * v * d[j]);
            }
        }
    }
    a
}

/// Sparse normalised adjacency rows for one subgraph, columns offset by `base`.
fn append_normalized(g: &AccountSubgraph, weighted: bool, base: usize, out: &mut SparseRows) {
    let n = g.node_count();
    let mut rows: Vec<Vec<(u32, f64)>> = (0..n).map(|i| vec![(i as u32, 1.0)]).collect();
    for e in &g.edges {
        let (i, j) = (e.src as usize, e.dst as usize);
        if i == j {
            continue;
        }
        let w = if weighted { e.t as f64 } else { 1.0 };
        for (r, c) in [(i, j), (j, i)] {
            match rows[r].iter_mut().find(|(cc, _)| *cc as usize == c) {
                Some(slot) if weighted => slot.1 += w,
                Some(_) => {}
                None => rows[r].push((c as u32, w)),
            }
        }
    }
    let d: Vec<f64> = rows
        .iter()
        .map(|r| 1.0 / r.iter().map(|&(_, v)| v).sum::<f64>().sqrt())
        .collect();
    for (i, mut row) in rows.into_iter().enumerate() {
        row.sort_unstable_by_key(|&(c, _)| c);
        for (c, v) in row {
            out.cols.push((base + c as usize) as u32);
            out.vals.push(d[i] * v * d[c as usize]);
        }
        out.row_ptr.push(out.cols.len());
    }
}

/// Several subgraphs stacked into one disjoint union with column-compacted sparse features.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    /// `N x F_c` features restricted to `columns`; column `k` is global column `columns[k]`.
    pub x: Arc<SparseRows>,
    /// Global feature columns kept, ascending.
    pub columns: Vec<usize>,
    pub adj: Arc<SparseRows>,
    /// `adj * x`, the first-layer input.
    pub ax: Arc<SparseRows>,
    /// Row offsets of each subgraph, length `batch + 1`.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(subgraphs: &[&AccountSubgraph], weighted: bool) -> Result<Self> {
        let Some(first) = subgraphs.first() else {
            return Err(Error::InvalidArgument("empty batch".into()));
        };
        let f = first.feature_dim();
        let mut offsets = vec![0];
        let mut keep = vec![false; f];
        for g in subgraphs {
            g.validate()?;
            if g.feature_dim() != f {
                return Err(Error::shape(
                    "batch",
                    format!("feature widths {f} and {}", g.feature_dim()),
                ));
            }
            for row in g.features.data().chunks(f.max(1)) {
                for (k, &v) in keep.iter_mut().zip(row) {
                    *k |= v != 0.0;
                }
            }
            offsets.push(offsets.last().unwrap() + g.node_count());
        }
        let columns: Vec<usize> = (0..f).filter(|&j| keep[j]).collect();
        let mut compact = vec![u32::MAX; f];
        for (k, &c) in columns.iter().enumerate() {
            compact[c] = k as u32;
        }
        let mut x = SparseRows {
            row_ptr: vec![0],
            ..Default::default()
        };
        let mut adj = SparseRows {
            row_ptr: vec![0],
            ..Default::default()
        };
        for (g, &base) in subgraphs.iter().zip(&offsets) {
            for i in 0..g.node_count() {
                for (c, &v) in g.features.row(i).iter().enumerate() {
                    if v != 0.0 {
                        x.cols.push(compact[c]);
                        x.vals.push(v);
                    }
                }
                x.row_ptr.push(x.cols.len());
            }
            append_normalized(g, weighted, base, &mut adj);
        }
        Ok(Self::from_parts(x, columns, adj, offsets))
    }

    fn from_parts(x: SparseRows, columns: Vec<usize>, adj: SparseRows, offsets: Vec<usize>) -> Self {
        let ax = adj.product(&x, columns.len());
        Self {
            x: Arc::new(x),
            columns,
            adj: Arc::new(adj),
            ax: Arc::new(ax),
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters recorded on a tape; the first-layer weight is restricted to the batch's columns.
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub first_rows: Vec<usize>,
}

impl BoundParams {
    /// Scatters leaf gradients back into full-size parameter gradients.
    pub fn gradients(&self, params: &ModelParams, grads: &[Option<Tensor>]) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.vars.len());
        for (i, (v, p)) in self.vars.iter().zip(&params.tensors).enumerate() {
            let g = grads.get(v.index()).and_then(Option::as_ref);
            if i == 0 {
                let mut full = Tensor::zeros(p.shape());
                if let Some(g) = g {
                    for (k, &r) in self.first_rows.iter().enumerate() {
                        full.row_mut(r).copy_from_slice(g.row(k));
                    }
                }
                out.push(full);
            } else {
                out.push(g.cloned().unwrap_or_else(|| Tensor::zeros(p.shape())));
            }
        }
        out
    }
}

pub fn bind_params(tape: &mut Tape, params: &ModelParams, columns: &[usize]) -> BoundParams {
    let mut vars = Vec::with_capacity(params.tensors.len());
    for (i, t) in params.tensors.iter().enumerate() {
        vars.push(if i == 0 {
            tape.leaf(t.select_rows(columns))
        } else {
            tape.leaf(t.clone())
        });
    }
    BoundParams {
        vars,
        first_rows: columns.to_vec(),
    }
}

pub(crate) fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Tensor {
    // 16-bit draws from a xoshiro stream seeded off `rng`; the keep scale uses the quantised rate
    let cut = (p * 65_536.0).round() as u64;
    let keep = 1.0 / (1.0 - cut as f64 / 65_536.0);
    let mut fast = Xoshiro256PlusPlus::seed_from_u64(rng.next_u64());
    let mut m = Tensor::scratch(shape);
    // branch-free select between 0.0 and `keep`
    let keep = keep.to_bits();
    let pick = |w: u64| f64::from_bits(keep & 0u64.wrapping_sub((w & 0xffff >= cut) as u64));
    let data = m.data_mut();
    let mut quads = data.chunks_exact_mut(4);
    for q in &mut quads {
        let w = fast.next_u64();
        q[0] = pick(w);
        q[1] = pick(w >> 16);
        q[2] = pick(w >> 32);
        q[3] = pick(w >> 48);
    }
    let w = fast.next_u64();
    for (k, v) in quads.into_remainder().iter_mut().enumerate() {
        *v = pick(w >> (16 * k));
    }
    m
}

/// Records the encoder on `tape`; returns node states `H` and pooled rows `h` (one per subgraph).
pub fn encode(
    tape: &mut Tape,
    batch: &GraphBatch,
    params: &ModelParams,
    bound: &BoundParams,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Var, Var)> {
    let (nodes, pooled) = encode_with(tape, batch, params, bound, dropout, training, rng, false)?;
    Ok((nodes.expect("unfused encoder keeps node states"), pooled))
}

/// Pooled rows only; the last layer is fused with pooling so node states of that layer are never stored.
pub fn encode_pooled(
    tape: &mut Tape,
    batch: &GraphBatch,
    params: &ModelParams,
    bound: &BoundParams,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    Ok(encode_with(tape, batch, params, bound, dropout, training, rng, true)?.1)
}

#[allow(clippy::too_many_arguments)]
fn encode_with(
    tape: &mut Tape,
    batch: &GraphBatch,
    params: &ModelParams,
    bound: &BoundParams,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
    fuse: bool,
) -> Result<(Option<Var>, Var)> {
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::InvalidArgument(format!("dropout {dropout} outside [0, 1)")));
    }
    let layers = params.config.layers;
    let mut h = None;
    for l in 0..layers {
        let w = bound.vars[params.gcn_index(l)];
        let b = bound.vars[params.gcn_index(l) + 1];
        h = Some(match h {
            None => tape.sparse_affine_relu(batch.ax.clone(), w, b)?,
            Some(h) => {
                let mask = (training && dropout > 0.0).then(|| dropout_mask(tape.value(h).shape(), dropout, rng));
                // propagating before the dense product keeps the max-pool gradient sparse at the GEMM
                let ah = tape.propagate_masked(h, mask, batch.adj.clone())?;
                if fuse && l + 1 == layers {
                    return Ok((None, tape.affine_relu_segment_max(ah, w, b, &batch.offsets)?));
                }
                let z = tape.matmul(ah, w)?;
                tape.bias_relu(z, b)?
            }
        });
    }
    let h = h.ok_or_else(|| Error::InvalidArgument("encoder without layers".into()))?;
    let pooled = tape.segment_max(h, batch.offsets.clone())?;
    Ok((Some(h), pooled))
}

pub fn project_var(tape: &mut Tape, h: Var, params: &ModelParams, bound: &BoundParams) -> Result<Var> {
    let i = params.proj1_index();
    let a = tape.matmul(h, bound.vars[i])?;
    let a = tape.bias_relu(a, bound.vars[i + 1])?;
    let j = params.proj2_index();
    let z = tape.matmul(a, bound.vars[j])?;
    tape.add_bias(z, bound.vars[j + 1])
}

pub fn classify_var(tape: &mut Tape, h: Var, params: &ModelParams, bound: &BoundParams) -> Result<Var> {
    let i = params.clf_index();
    let y = tape.matmul(h, bound.vars[i])?;
    tape.add_bias(y, bound.vars[i + 1])
}

/// Logits for the pooled rows `h`, honouring [`ModelConfig::head_input`].
pub fn logits_var(tape: &mut Tape, h: Var, params: &ModelParams, bound: &BoundParams) -> Result<Var> {
    match params.config.head_input {
        HeadInput::Pooled => classify_var(tape, h, params, bound),
        HeadInput::Projection => {
            let z = project_var(tape, h, params, bound)?;
            classify_var(tape, z, params, bound)
        }
    }
}

/// Single-subgraph encoder on an explicit propagation matrix. Returns `(H, h)`.
pub fn encoder_forward(
    adj: &Tensor,
    x: &Tensor,
    params: &ModelParams,
    dropout: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    if !adj.is_matrix() || adj.rows() != adj.cols() || adj.rows() != x.rows() || adj.rows() == 0 {
        return Err(Error::shape(
            "encoder_forward",
            format!("adjacency {:?} with features {:?}", adj.shape(), x.shape()),
        ));
    }
    if x.cols() != params.config.input_dim {
        return Err(Error::shape(
            "encoder_forward",
            format!(
                "{} feature columns, model expects {}",
                x.cols(),
                params.config.input_dim
            ),
        ));
    }
    let batch = GraphBatch::from_parts(
        SparseRows::from_dense(x),
        (0..x.cols()).collect(),
        SparseRows::from_dense(adj),
        vec![0, x.rows()],
    );
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, &batch.columns);
    let (h_nodes, h) = encode(&mut tape, &batch, params, &bound, dropout, training, rng)?;
    let pooled = tape.value(h).row(0).to_vec();
    Ok((tape.value(h_nodes).clone(), Tensor::from_vec(&[pooled.len()], pooled)?))
}

fn as_row(h: &Tensor, want: usize, op: &'static str) -> Result<Tensor> {
    if h.len() != want || h.shape().len() > 2 || h.rows() != 1 {
        return Err(Error::shape(
            op,
            format!("input {:?}, expected {want} values", h.shape()),
        ));
    }
    Tensor::from_vec(&[1, want], h.data().to_vec())
}

fn run_head(
    h: &Tensor,
    params: &ModelParams,
    op: &'static str,
    f: impl FnOnce(&mut Tape, Var, &BoundParams) -> Result<Var>,
) -> Result<Tensor> {
    let row = as_row(h, params.config.hidden, op)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, &[]);
    let v = tape.leaf(row);
    let out = f(&mut tape, v, &bound)?;
    let data = tape.value(out).data().to_vec();
    Tensor::from_vec(&[data.len()], data)
}

/// `z = W_p2^T relu(W_p1^T h + b_p1) + b_p2` for a single pooled vector.
pub fn project(h: &Tensor, params: &ModelParams) -> Result<Tensor> {
    run_head(h, params, "project", |t, v, b| project_var(t, v, params, b))
}

/// Logits `W_c^T h + b_c` for a single pooled vector.
pub fn classify(h: &Tensor, params: &ModelParams) -> Result<Tensor> {
    run_head(h, params, "classify", |t, v, b| classify_var(t, v, params, b))
}

/// Pooled representations for many subgraphs without recording gradients of interest.
pub fn embed(subgraphs: &[&AccountSubgraph], params: &ModelParams) -> Result<Tensor> {
    let batch = GraphBatch::new(subgraphs, params.config.weighted_adjacency)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, &batch.columns);
    let mut rng = stream_rng(0, &[]);
    let h = encode_pooled(&mut tape, &batch, params, &bound, 0.0, false, &mut rng)?;
    Ok(tape.value(h).clone())
}

/// Class logits for many subgraphs in evaluation mode.
pub fn predict_logits(subgraphs: &[&AccountSubgraph], params: &ModelParams) -> Result<Tensor> {
    let batch = GraphBatch::new(subgraphs, params.config.weighted_adjacency)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, &batch.columns);
    let mut rng = stream_rng(0, &[]);
    let h = encode_pooled(&mut tape, &batch, params, &bound, 0.0, false, &mut rng)?;
    let y = logits_var(&mut tape, h, params, &bound)?;
    Ok(tape.value(y).clone())
}
