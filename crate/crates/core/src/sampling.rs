//! Top-k neighborhood subgraph extraction and balanced labeled datasets.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder, MAX_LEN};
use crate::error::{Error, Result};
use crate::graph::{LwAig, NodeIndex};
use crate::ingest::{csv_io, Wei};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Edge attribute used to rank neighbors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RankAttr {
    #[default]
    #[serde(rename = "t")]
    T,
    #[serde(rename = "w_tilde")]
    WTilde,
}

impl FromStr for RankAttr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "t" => Ok(RankAttr::T),
            "w" | "w_tilde" | "w~" => Ok(RankAttr::WTilde),
            other => Err(Error::Config(format!("unknown ranking attribute {other:?}"))),
        }
    }
}

impl fmt::Display for RankAttr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankAttr::T => "t",
            RankAttr::WTilde => "w_tilde",
        })
    }
}

/// Account identity classes carried by label files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AccountClass {
    Exchange,
    IcoWallet,
    Mining,
    PhishHack,
}

impl AccountClass {
    pub const ALL: [AccountClass; 4] = [
        AccountClass::Exchange,
        AccountClass::IcoWallet,
        AccountClass::Mining,
        AccountClass::PhishHack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AccountClass::Exchange => "Exchange",
            AccountClass::IcoWallet => "ICO-wallets",
            AccountClass::Mining => "Mining",
            AccountClass::PhishHack => "Phish-hack",
        }
    }
}

impl fmt::Display for AccountClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AccountClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        match key.as_str() {
            "exchange" | "e" => Ok(AccountClass::Exchange),
            "icowallets" | "icowallet" | "ico" | "i" => Ok(AccountClass::IcoWallet),
            "mining" | "miner" | "m" => Ok(AccountClass::Mining),
            "phishhack" | "phish" | "phishing" | "p" => Ok(AccountClass::PhishHack),
            _ => Err(Error::InvalidArgument(format!("unknown account class {s:?}"))),
        }
    }
}

/// Reads `account,label` rows (header required).
pub fn read_labels<R: Read>(source: R) -> Result<Vec<(String, AccountClass)>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_io)?;
        if row.len() != 2 {
            return Err(Error::MalformedRow {
                line: i as u64 + 1,
                reason: format!("expected 2 fields, found {}", row.len()),
            });
        }
        let class = row[1].parse().map_err(|e: Error| Error::MalformedRow {
            line: i as u64 + 1,
            reason: e.to_string(),
        })?;
        out.push((row[0].trim().to_string(), class));
    }
    Ok(out)
}

pub fn write_labels<W: Write>(out: W, labels: &[(String, AccountClass)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["account", "label"]).map_err(csv_io)?;
    for (a, c) in labels {
        w.write_record([a.as_str(), c.name()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LocalEdge {
    pub src: u32,
    pub dst: u32,
    pub t: u64,
    pub w_tilde: Wei,
}

/// An induced neighborhood subgraph around one target account.
#[derive(Clone, Debug, PartialEq)]
pub struct AccountSubgraph {
    pub center: usize,
    /// Local index to global node index.
    pub node_map: Vec<u32>,
    /// Directed local edges sorted by (src, dst).
    pub edges: Vec<LocalEdge>,
    /// Dense `|V| x F` feature block.
    pub features: Tensor,
    pub label: Option<usize>,
}

impl AccountSubgraph {
    pub fn node_count(&self) -> usize {
        self.node_map.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if n == 0 || self.center >= n {
            return Err(Error::InvalidArgument("subgraph without a valid center".into()));
        }
        if self.features.rows() != n || !self.features.is_matrix() {
            return Err(Error::shape(
                "subgraph",
                format!("{} nodes but features {:?}", n, self.features.shape()),
            ));
        }
        if self.edges.iter().any(|e| e.src as usize >= n || e.dst as usize >= n) {
            return Err(Error::InvalidArgument("subgraph edge out of range".into()));
        }
        Ok(())
    }
}

/// Up to `k` neighbors of `v` over both orientations, ranked by the orientation-summed
/// attribute (descending), ties broken by ascending global index. `v` itself is excluded.
pub fn topk_neighbors(graph: &LwAig, v: NodeIndex, attr: RankAttr, k: usize) -> Result<Vec<NodeIndex>> {
    graph.check(v)?;
    let mut cand: Vec<(u32, u128)> = Vec::new();
    let weight = |t: u64, w: Wei| match attr {
        RankAttr::T => u128::from(t),
        RankAttr::WTilde => w.0,
    };
    for e in graph.out_edges(v) {
        cand.push((e.dst, weight(e.t, e.w_tilde)));
    }
    for e in graph.in_edges(v) {
        cand.push((e.src, weight(e.t, e.w_tilde)));
    }
    cand.retain(|&(n, _)| n as usize != v);
    cand.sort_unstable_by_key(|&(n, _)| n);
    let mut merged: Vec<(u32, u128)> = Vec::with_capacity(cand.len());
    for (n, w) in cand {
        match merged.last_mut() {
            Some(last) if last.0 == n => last.1 = last.1.saturating_add(w),
            _ => merged.push((n, w)),
        }
    }
    let rank = |a: &(u32, u128), b: &(u32, u128)| b.1.cmp(&a.1).then(a.0.cmp(&b.0));
    if k < merged.len() {
        merged.select_nth_unstable_by(k, rank);
        merged.truncate(k);
    }
    merged.sort_unstable_by(rank);
    Ok(merged.into_iter().map(|(n, _)| n as usize).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplingParams {
    pub hops: usize,
    pub k: usize,
    pub attr: RankAttr,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            hops: 2,
            k: 20,
            attr: RankAttr::T,
        }
    }
}

/// Node set of the h-hop top-k expansion, center first, then in discovery order.
pub fn expand_nodes(graph: &LwAig, v: NodeIndex, params: SamplingParams) -> Result<Vec<u32>> {
    graph.check(v)?;
    if params.hops == 0 || params.k == 0 {
        return Err(Error::InvalidArgument("hops and k must be at least 1".into()));
    }
    let mut nodes = vec![v as u32];
    let mut seen: HashSet<u32> = HashSet::from([v as u32]);
    let mut frontier = 0..1;
    for _ in 0..params.hops {
        let start = nodes.len();
        for i in frontier.clone() {
            for nb in topk_neighbors(graph, nodes[i] as usize, params.attr, params.k)? {
                if seen.insert(nb as u32) {
                    nodes.push(nb as u32);
                }
            }
        }
        frontier = start..nodes.len();
        if frontier.is_empty() {
            break;
        }
    }
    Ok(nodes)
}

/// Induces the subgraph on `nodes` (local order preserved) with dense features.
pub fn induce(graph: &LwAig, nodes: Vec<u32>, center: usize) -> AccountSubgraph {
    let local: HashMap<u32, u32> = nodes.iter().enumerate().map(|(i, &g)| (g, i as u32)).collect();
    let mut edges = Vec::new();
    for (i, &g) in nodes.iter().enumerate() {
        for e in graph.out_edges(g as usize) {
            if let Some(&j) = local.get(&e.dst) {
                edges.push(LocalEdge {
                    src: i as u32,
                    dst: j,
                    t: e.t,
                    w_tilde: e.w_tilde,
                });
            }
        }
    }
    edges.sort_unstable_by_key(|e| (e.src, e.dst));
    let f = graph.feature_dim();
    let mut features = Tensor::zeros(&[nodes.len(), f]);
    for (i, &g) in nodes.iter().enumerate() {
        let (cols, vals) = graph.feature_row(g as usize);
        let row = features.row_mut(i);
        for (&c, &x) in cols.iter().zip(vals) {
            row[c as usize] = x;
        }
    }
    AccountSubgraph {
        center,
        node_map: nodes,
        edges,
        features,
        label: None,
    }
}

pub fn sample_subgraph(graph: &LwAig, v: NodeIndex, params: SamplingParams) -> Result<AccountSubgraph> {
    let nodes = expand_nodes(graph, v, params)?;
    Ok(induce(graph, nodes, 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub account: String,
    pub subgraph: AccountSubgraph,
}

impl Instance {
    pub fn label(&self) -> usize {
        self.subgraph.label.unwrap_or(0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub class: String,
    pub hops: usize,
    pub k: usize,
    pub attr: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub meta: DatasetMeta,
    pub instances: Vec<Instance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(Instance::label).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            feature_dim: self.feature_dim,
            meta: self.meta.clone(),
            instances: idx.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }
}

/// Balanced target list: every positive (label 1) plus as many negatives (label 0) drawn
/// without replacement from the pool, sorted by node index.
pub fn choose_targets(
    positives: &[NodeIndex],
    negative_pool: &[NodeIndex],
    seed: u64,
) -> Result<Vec<(NodeIndex, usize)>> {
    let mut pos = positives.to_vec();
    pos.sort_unstable();
    pos.dedup();
    let mut pool: Vec<NodeIndex> = negative_pool
        .iter()
        .copied()
        .filter(|v| pos.binary_search(v).is_err())
        .collect();
    pool.sort_unstable();
    pool.dedup();
    if pool.len() < pos.len() {
        return Err(Error::InsufficientNegatives {
            required: pos.len(),
            available: pool.len(),
        });
    }
    let mut rng = stream_rng(seed, &[0x6e65_6761]);
    let chosen = index::sample(&mut rng, pool.len(), pos.len())
        .into_iter()
        .map(|i| pool[i]);
    let mut targets: Vec<(NodeIndex, usize)> = pos.iter().map(|&v| (v, 1)).collect();
    targets.extend(chosen.map(|v| (v, 0)));
    // node indexes follow account-id order
    targets.sort_unstable();
    Ok(targets)
}

/// One positive subgraph per target (label 1) plus an equal number of negatives (label 0)
/// drawn without replacement from the pool. Instances come back ordered by account id.
pub fn build_labeled_dataset(
    graph: &LwAig,
    positives: &[NodeIndex],
    negative_pool: &[NodeIndex],
    params: SamplingParams,
    seed: u64,
) -> Result<Dataset> {
    let targets = choose_targets(positives, negative_pool, seed)?;
    let instances = targets
        .par_iter()
        .map(|&(v, label)| {
            let mut sg = sample_subgraph(graph, v, params)?;
            sg.label = Some(label);
            Ok(Instance {
                account: graph.account(v).to_string(),
                subgraph: sg,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        feature_dim: graph.feature_dim(),
        meta: DatasetMeta {
            class: String::new(),
            hops: params.hops,
            k: params.k,
            attr: params.attr.to_string(),
            seed,
        },
        instances,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"BGCD";
const DATASET_VERSION: u32 = 1;
const NO_LABEL: u32 = u32::MAX;

/// Binary subgraph pack:
///
/// ```text
/// "BGCD" u32:version
/// str:class u64:hops u64:k str:attr u64:seed u64:feature_dim
/// u64:count {
///   str:account u32:label (u32::MAX = none) u32:center
///   u64:n { u32:global_node }*n
///   u64:m { u32:src u32:dst u64:t u128:w_tilde }*m
///   u64:nnz { u32:row u32:col f64:value }*nnz
/// }*count
/// ```
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut enc = Encoder::new(BufWriter::new(File::create(path)?));
    enc.header(DATASET_MAGIC, DATASET_VERSION)?;
    enc.str(&ds.meta.class)?;
    enc.u64(ds.meta.hops as u64)?;
    enc.u64(ds.meta.k as u64)?;
    enc.str(&ds.meta.attr)?;
    enc.u64(ds.meta.seed)?;
    enc.u64(ds.feature_dim as u64)?;
    enc.len(ds.instances.len())?;
    for inst in &ds.instances {
        let sg = &inst.subgraph;
        enc.str(&inst.account)?;
        enc.u32(sg.label.map_or(NO_LABEL, |l| l as u32))?;
        enc.u32(sg.center as u32)?;
        enc.len(sg.node_map.len())?;
        for &g in &sg.node_map {
            enc.u32(g)?;
        }
        enc.len(sg.edges.len())?;
        for e in &sg.edges {
            enc.u32(e.src)?;
            enc.u32(e.dst)?;
            enc.u64(e.t)?;
            enc.u128(e.w_tilde.0)?;
        }
        let f = sg.features.cols();
        let nz: Vec<(usize, f64)> = sg
            .features
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &x)| x.to_bits() != 0)
            .map(|(i, &x)| (i, x))
            .collect();
        enc.len(nz.len())?;
        for (i, x) in nz {
            enc.u32((i / f) as u32)?;
            enc.u32((i % f) as u32)?;
            enc.f64(x)?;
        }
    }
    enc.finish()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut dec = Decoder::new(BufReader::new(File::open(path)?), path.display().to_string());
    dec.header(DATASET_MAGIC, DATASET_VERSION)?;
    let meta = DatasetMeta {
        class: dec.str()?,
        hops: dec.u64()? as usize,
        k: dec.u64()? as usize,
        attr: dec.str()?,
        seed: dec.u64()?,
    };
    let feature_dim = dec.len(MAX_LEN)?;
    let count = dec.len(MAX_LEN)?;
    let mut instances = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let account = dec.str()?;
        let label = match dec.u32()? {
            NO_LABEL => None,
            l => Some(l as usize),
        };
        let center = dec.u32()? as usize;
        let n = dec.len(MAX_LEN)?;
        let node_map = (0..n).map(|_| dec.u32()).collect::<Result<Vec<_>>>()?;
        let m = dec.len(MAX_LEN)?;
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            edges.push(LocalEdge {
                src: dec.u32()?,
                dst: dec.u32()?,
                t: dec.u64()?,
                w_tilde: Wei(dec.u128()?),
            });
        }
        let nnz = dec.len(MAX_LEN)?;
        let mut features = Tensor::zeros(&[n, feature_dim]);
        for _ in 0..nnz {
            let r = dec.u32()? as usize;
            let c = dec.u32()? as usize;
            let x = dec.f64()?;
            if r >= n || c >= feature_dim {
                return Err(dec.err("feature triplet out of range"));
            }
            features.set(r, c, x);
        }
        let subgraph = AccountSubgraph {
            center,
            node_map,
            edges,
            features,
            label,
        };
        subgraph
            .validate()
            .map_err(|e| dec.err(format!("instance {account}: {e}")))?;
        instances.push(Instance { account, subgraph });
    }
    dec.expect_eof()?;
    Ok(Dataset {
        feature_dim,
        meta,
        instances,
    })
}

/// Tab-separated manifest: one line per subgraph.
pub fn write_manifest<W: Write>(mut out: W, ds: &Dataset) -> Result<()> {
    writeln!(out, "account\tlabel\tnodes\tedges")?;
    for inst in &ds.instances {
        let label = inst.subgraph.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            inst.account,
            label,
            inst.subgraph.node_count(),
            inst.subgraph.edge_count()
        )?;
    }
    Ok(())
}
