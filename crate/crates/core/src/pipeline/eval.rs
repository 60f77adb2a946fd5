use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::train;
use crate::baseline::{logistic_fit, logistic_predict, LogisticOptions, ManualFeatures, Standardizer};
use crate::error::{Error, Result};
use crate::nn::{predict_logits, ModelParams};
use crate::rng::stream_rng;
use crate::sampling::{AccountSubgraph, Dataset};

pub const METRICS_SCHEMA: u32 = 1;
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_predictions(pred: &[usize], truth: &[usize]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == 1, t == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }

    /// Precision, recall and F1 of the positive class.
    pub fn positive(&self) -> (f64, f64, f64) {
        Self::prf(self.tp, self.fp, self.fn_)
    }

    /// Unweighted mean of the two per-class F1 scores.
    pub fn macro_f1(&self) -> f64 {
        let pos = Self::prf(self.tp, self.fp, self.fn_).2;
        let neg = Self::prf(self.tn, self.fn_, self.fp).2;
        (pos + neg) / 2.0
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.fn_ + self.tn;
        if n == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

impl Evaluation {
    pub fn from_predictions(pred: &[usize], truth: &[usize]) -> Self {
        let confusion = Confusion::from_predictions(pred, truth);
        let (precision, recall, f1) = confusion.positive();
        Self {
            confusion,
            precision,
            recall,
            f1,
            macro_f1: confusion.macro_f1(),
            accuracy: confusion.accuracy(),
        }
    }
}

/// Argmax class per subgraph in evaluation mode; ties go to the lower class.
pub fn predict(params: &ModelParams, subgraphs: &[&AccountSubgraph]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(subgraphs.len());
    for chunk in subgraphs.chunks(PREDICT_CHUNK) {
        let logits = predict_logits(chunk, params)?;
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

pub fn evaluate_f1(params: &ModelParams, d: &Dataset) -> Result<Evaluation> {
    let subs: Vec<&AccountSubgraph> = d.instances.iter().map(|i| &i.subgraph).collect();
    let pred = predict(params, &subs)?;
    Ok(Evaluation::from_predictions(&pred, &d.labels()))
}

/// Fold index of every instance for one repeat: each class is shuffled separately and dealt
/// round-robin so fold sizes per class differ by at most one.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64, repeat: usize) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least two folds".into()));
    }
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut assign = vec![0; labels.len()];
    for &c in &classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < folds {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} members, fewer than {folds} folds",
                members.len()
            )));
        }
        let mut rng = stream_rng(seed, &[0x666f_6c64, repeat as u64, c as u64]);
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            assign[i] = k % folds;
        }
    }
    Ok(assign)
}

/// Disjointness and coverage of a train/test split, checked before every fold runs.
fn audit_split(n: usize, train: &[usize], test: &[usize]) -> Result<()> {
    let tr: HashSet<usize> = train.iter().copied().collect();
    if test.iter().any(|i| tr.contains(i)) || tr.len() + test.len() != n || tr.len() != train.len() {
        return Err(Error::InvalidArgument(
            "fold audit failed: train and test overlap".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(flatten)]
    pub eval: Evaluation,
    /// Mean training loss per epoch; empty for the baseline.
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub mean_f1: f64,
    /// Population standard deviation over runs.
    pub std_f1: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_macro_f1: f64,
}

impl Summary {
    pub fn of(folds: &[FoldResult]) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = |f: &dyn Fn(&FoldResult) -> f64| folds.iter().map(f).sum::<f64>() / n;
        let mean_f1 = mean(&|r| r.eval.f1);
        let var = folds.iter().map(|r| (r.eval.f1 - mean_f1).powi(2)).sum::<f64>() / n;
        Self {
            runs: folds.len(),
            mean_f1,
            std_f1: var.sqrt(),
            mean_precision: mean(&|r| r.eval.precision),
            mean_recall: mean(&|r| r.eval.recall),
            mean_macro_f1: mean(&|r| r.eval.macro_f1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub method: String,
    pub dataset: DatasetSummary,
    pub config: Vec<ConfigEntry>,
    pub folds: Vec<FoldResult>,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub class: String,
    pub instances: usize,
    pub positives: usize,
    pub feature_dim: usize,
    pub mean_nodes: f64,
    pub mean_edges: f64,
}

impl DatasetSummary {
    pub fn of(d: &Dataset) -> Self {
        let n = d.len().max(1) as f64;
        Self {
            class: d.meta.class.clone(),
            instances: d.len(),
            positives: d.labels().iter().filter(|&&l| l == 1).count(),
            feature_dim: d.feature_dim,
            mean_nodes: d.instances.iter().map(|i| i.subgraph.node_count()).sum::<usize>() as f64 / n,
            mean_edges: d.instances.iter().map(|i| i.subgraph.edge_count()).sum::<usize>() as f64 / n,
        }
    }

    /// Summary for account-level methods that sample no subgraphs.
    pub fn from_labels(class: &str, labels: &[usize]) -> Self {
        Self {
            class: class.to_string(),
            instances: labels.len(),
            positives: labels.iter().filter(|&&l| l == 1).count(),
            feature_dim: 0,
            mean_nodes: 0.0,
            mean_edges: 0.0,
        }
    }
}

impl MetricsReport {
    pub fn new(method: &str, dataset: DatasetSummary, cfg: &TrainConfig, mut folds: Vec<FoldResult>) -> Self {
        folds.sort_by_key(|f| (f.repeat, f.fold));
        let summary = Summary::of(&folds);
        Self {
            schema_version: METRICS_SCHEMA,
            method: method.into(),
            dataset,
            config: cfg
                .provenance()
                .into_iter()
                .map(|(k, v, s)| ConfigEntry {
                    key: k.into(),
                    value: v,
                    source: s.into(),
                })
                .collect(),
            folds,
            summary,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Per-job training seed, independent of scheduling.
fn job_seed(seed: u64, repeat: usize, fold: usize) -> u64 {
    use rand::RngCore;
    stream_rng(seed, &[0x6a_6f62, repeat as u64, fold as u64]).next_u64()
}

/// `(repeat, fold, train indices, test indices)`.
type Job = (usize, usize, Vec<usize>, Vec<usize>);

fn split_jobs(labels: &[usize], cfg: &TrainConfig) -> Result<Vec<Job>> {
    let mut jobs = Vec::with_capacity(cfg.folds * cfg.repeats);
    for repeat in 0..cfg.repeats {
        let assign = stratified_folds(labels, cfg.folds, cfg.seed, repeat)?;
        for fold in 0..cfg.folds {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| assign[i] != fold).collect();
            let test: Vec<usize> = (0..labels.len()).filter(|&i| assign[i] == fold).collect();
            audit_split(labels.len(), &train, &test)?;
            jobs.push((repeat, fold, train, test));
        }
    }
    Ok(jobs)
}

/// Repeated stratified k-fold evaluation; every fold trains from a fresh initialisation.
pub fn cross_validate(d: &Dataset, cfg: &TrainConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let jobs = split_jobs(&d.labels(), cfg)?;
    let folds = jobs
        .par_iter()
        .map(|(repeat, fold, tr, te)| {
            let mut job_cfg = cfg.clone();
            job_cfg.seed = job_seed(cfg.seed, *repeat, *fold);
            let train_set = d.subset(tr);
            let test_set = d.subset(te);
            let outcome = train(&train_set, &job_cfg)?;
            let eval = evaluate_f1(&outcome.params, &test_set)?;
            log::info!("repeat {repeat} fold {fold}: f1 {:.4}", eval.f1);
            Ok(FoldResult {
                repeat: *repeat,
                fold: *fold,
                train_size: tr.len(),
                test_size: te.len(),
                eval,
                loss_curve: outcome.epoch_losses(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new("blockgc", DatasetSummary::of(d), cfg, folds))
}

/// The same protocol over hand-crafted features and logistic regression.
pub fn cross_validate_baseline(
    features: &[ManualFeatures],
    labels: &[usize],
    cfg: &TrainConfig,
    summary: DatasetSummary,
) -> Result<MetricsReport> {
    if features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let x: Vec<Vec<f64>> = features.iter().map(|f| f.to_array().to_vec()).collect();
    let jobs = split_jobs(labels, cfg)?;
    let folds = jobs
        .par_iter()
        .map(|(repeat, fold, tr, te)| {
            let pick = |idx: &[usize]| idx.iter().map(|&i| x[i].clone()).collect::<Vec<_>>();
            let (xtr, xte) = (pick(tr), pick(te));
            let std = Standardizer::fit(&xtr)?;
            let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
            let yte: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
            let model = logistic_fit(&std.transform(&xtr), &ytr, &LogisticOptions::default())?;
            let p = logistic_predict(&model, &std.transform(&xte))?;
            let pred: Vec<usize> = p.iter().map(|&v| usize::from(v > 0.5)).collect();
            Ok(FoldResult {
                repeat: *repeat,
                fold: *fold,
                train_size: tr.len(),
                test_size: te.len(),
                eval: Evaluation::from_predictions(&pred, &yte),
                loss_curve: vec![],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new("manual-features-logistic", summary, cfg, folds))
}
