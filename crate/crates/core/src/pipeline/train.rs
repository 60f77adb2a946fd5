use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::augment::make_views;
use crate::error::{Error, Result};
use crate::nn::{adam_step, joint_gradients, AdamState, JointBatch, ModelParams};
use crate::objective::LossReport;
use crate::rng::stream_rng;
use crate::sampling::{AccountSubgraph, Dataset};

static SMALL_BATCH_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub epoch: usize,
    pub batch: usize,
    pub size: usize,
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<BatchLoss>,
}

impl TrainOutcome {
    /// Size-weighted mean of `l_total` per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let epochs = self.history.last().map_or(0, |b| b.epoch + 1);
        let mut sum = vec![0.0; epochs];
        let mut n = vec![0usize; epochs];
        for b in &self.history {
            sum[b.epoch] += b.report.l_total * b.size as f64;
            n[b.epoch] += b.size;
        }
        sum.iter().zip(&n).map(|(s, &c)| s / c.max(1) as f64).collect()
    }
}

/// Trains a fresh model on `d`. Every random choice is keyed by `(cfg.seed, epoch, ...)`,
/// so equal inputs give bit-identical parameters and history.
pub fn train(d: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = d.labels();
    if d.len() < 2 || labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument(
            "training needs at least two instances of both classes".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not binary")));
    }
    let mut params = ModelParams::init(cfg.model(d.feature_dim), cfg.seed)?;
    let names = params.names();
    let mut state = AdamState::new(&params.tensors);
    let views = cfg.views()?;
    let opts = cfg.loss();
    let adam = cfg.adam();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..d.len()).collect();
    for epoch in 0..cfg.epochs {
        let view_epoch = if cfg.freeze_views { 0 } else { epoch as u64 };
        let mut rng = stream_rng(cfg.seed, &[0x7368_7566, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let originals: Vec<&AccountSubgraph> = chunk.iter().map(|&i| &d.instances[i].subgraph).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let generated: Option<(Vec<AccountSubgraph>, Vec<AccountSubgraph>)> = views.map(|specs| {
                chunk
                    .iter()
                    .map(|&i| make_views(&d.instances[i].subgraph, i, specs, cfg.mask_mode, cfg.seed, view_epoch))
                    .unzip()
            });
            if generated.is_some()
                && chunk.len() < 2
                && cfg.lambda > 0.0
                && !SMALL_BATCH_WARNED.swap(true, Ordering::Relaxed)
            {
                log::warn!(
                    "batch of {} subgraph(s) has no negatives; contrastive term skipped",
                    chunk.len()
                );
            }
            let batch = JointBatch {
                originals,
                views: generated
                    .as_ref()
                    .map(|(a, b)| (a.iter().collect(), b.iter().collect())),
                labels: batch_labels,
            };
            let mut drop_rng = stream_rng(cfg.seed, &[0x6472_6f70, epoch as u64, bi as u64]);
            let (report, grads) = joint_gradients(&params, &batch, &opts, true, &mut drop_rng)?;
            adam_step(&mut params.tensors, &names, &grads, &mut state, &adam)?;
            history.push(BatchLoss {
                epoch,
                batch: bi,
                size: chunk.len(),
                report,
            });
        }
    }
    Ok(TrainOutcome { params, history })
}
