use crate::error::{Error, Result};
use crate::graph::{LwAig, NodeIndex};
use crate::ingest::Role;
use crate::sampling::{build_labeled_dataset, choose_targets, AccountClass, Dataset, SamplingParams};

/// Positives of `class` and the negative pool, as node indices of `g`.
///
/// The pool holds accounts labelled with any other class; with `widen` it also takes every
/// unlabelled externally owned account. Labelled accounts absent from the graph are skipped.
pub fn label_pools(
    g: &LwAig,
    labels: &[(String, AccountClass)],
    class: AccountClass,
    widen: bool,
) -> Result<(Vec<NodeIndex>, Vec<NodeIndex>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut missing = 0;
    let mut labelled = vec![false; g.node_count()];
    for (account, c) in labels {
        let Some(v) = g.node_of(account) else {
            missing += 1;
            continue;
        };
        labelled[v] = true;
        if *c == class {
            pos.push(v);
        } else {
            neg.push(v);
        }
    }
    if missing > 0 {
        log::warn!("{missing} labelled account(s) do not occur in the graph");
    }
    if pos.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no account labelled {} occurs in the graph",
            class.name()
        )));
    }
    if widen {
        neg.extend((0..g.node_count()).filter(|&v| !labelled[v] && g.role(v) == Role::Eoa));
    }
    Ok((pos, neg))
}

pub fn build_dataset(
    g: &LwAig,
    labels: &[(String, AccountClass)],
    class: AccountClass,
    params: SamplingParams,
    seed: u64,
    widen: bool,
) -> Result<Dataset> {
    let (pos, neg) = label_pools(g, labels, class, widen)?;
    let mut d = build_labeled_dataset(g, &pos, &neg, params, seed)?;
    d.meta.class = class.name().to_string();
    Ok(d)
}

/// The same balanced account selection as [`build_dataset`], without sampling subgraphs.
pub fn balanced_accounts(
    g: &LwAig,
    labels: &[(String, AccountClass)],
    class: AccountClass,
    seed: u64,
    widen: bool,
) -> Result<(Vec<String>, Vec<usize>)> {
    let (pos, neg) = label_pools(g, labels, class, widen)?;
    let targets = choose_targets(&pos, &neg, seed)?;
    Ok(targets.into_iter().map(|(v, l)| (g.account(v).to_string(), l)).unzip())
}
