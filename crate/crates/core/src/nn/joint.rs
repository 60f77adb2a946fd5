//! The full training objective recorded on a tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{bind_params, encode_pooled, logits_var, project_var, BoundParams, GraphBatch, ModelParams};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::objective::{cross_entropy_with_grad, joint_loss, ntxent_loss_with_grad, ContrastForm, LossReport};
use crate::sampling::AccountSubgraph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub lambda: f64,
    pub tau: f64,
    pub form: ContrastForm,
    pub dropout: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            tau: 0.5,
            form: ContrastForm::Literal,
            dropout: 0.3,
        }
    }
}

/// One mini-batch: originals and, unless running supervised-only, two aligned views.
pub struct JointBatch<'a> {
    pub originals: Vec<&'a AccountSubgraph>,
    pub views: Option<(Vec<&'a AccountSubgraph>, Vec<&'a AccountSubgraph>)>,
    pub labels: Vec<usize>,
}

fn ce_node(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<(Var, f64)> {
    let (l, g) = cross_entropy_with_grad(tape.value(logits), labels)?;
    Ok((tape.fused(l, vec![(logits, g)])?, l))
}

/// A recorded forward pass of the joint loss.
pub struct JointForward {
    pub tape: Tape,
    pub loss: Var,
    pub report: LossReport,
    pub bound: BoundParams,
}

/// Gradients of the joint loss for every parameter (same layout as `params.tensors`).
pub fn joint_gradients(
    params: &ModelParams,
    batch: &JointBatch<'_>,
    opts: &LossOptions,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(LossReport, Vec<Tensor>)> {
    let fwd = record_joint(params, batch, opts, training, rng)?;
    let grads = fwd.tape.backward(fwd.loss)?;
    Ok((fwd.report, fwd.bound.gradients(params, &grads)))
}

pub fn record_joint(
    params: &ModelParams,
    batch: &JointBatch<'_>,
    opts: &LossOptions,
    training: bool,
    rng: &mut impl Rng,
) -> Result<JointForward> {
    let b = batch.originals.len();
    if b == 0 || batch.labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{b} subgraphs with {} labels",
            batch.labels.len()
        )));
    }
    let mut all: Vec<&AccountSubgraph> = batch.originals.clone();
    if let Some((v1, v2)) = &batch.views {
        if v1.len() != b || v2.len() != b {
            return Err(Error::InvalidArgument(
                "views are not aligned with the originals".into(),
            ));
        }
        all.extend(v1.iter().copied());
        all.extend(v2.iter().copied());
    }
    let gb = GraphBatch::new(&all, params.config.weighted_adjacency)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, &gb.columns);
    let h = encode_pooled(&mut tape, &gb, params, &bound, opts.dropout, training, rng)?;
    let logits = logits_var(&mut tape, h, params, &bound)?;

    let report;
    let total;
    if batch.views.is_some() {
        let mut ce = [0.0; 3];
        let mut vars = Vec::with_capacity(4);
        for (k, slot) in ce.iter_mut().enumerate() {
            let part = tape.slice_rows(logits, k * b, (k + 1) * b)?;
            let (v, l) = ce_node(&mut tape, part, &batch.labels)?;
            *slot = l;
            vars.push((v, 1.0 / 3.0));
        }
        let mut l_self = 0.0;
        if b >= 2 && opts.lambda > 0.0 {
            let hv = tape.slice_rows(h, b, 3 * b)?;
            let z = project_var(&mut tape, hv, params, &bound)?;
            let z1 = tape.slice_rows(z, 0, b)?;
            let z2 = tape.slice_rows(z, b, 2 * b)?;
            let (l, g1, g2) = ntxent_loss_with_grad(tape.value(z1), tape.value(z2), opts.tau, opts.form)?;
            l_self = l;
            let v = tape.fused(l, vec![(z1, g1), (z2, g2)])?;
            vars.push((v, opts.lambda));
        }
        report = joint_loss(ce[0], ce[1], ce[2], l_self, opts.lambda)?;
        total = tape.lin_comb(&vars)?;
    } else {
        let (v, l) = ce_node(&mut tape, logits, &batch.labels)?;
        report = joint_loss(l, l, l, 0.0, 0.0)?;
        total = v;
    }
    Ok(JointForward {
        tape,
        loss: total,
        report,
        bound,
    })
}
