//! The lightweight account interaction graph.
//!
//! Parallel interactions between two accounts are coarsened into one directed edge that
//! carries the interaction count `t` and the summed transaction amount `w_tilde`;
//! timestamps and function names never reach the edges. Contract calls additionally feed a
//! sparse per-account feature row tallying calls per contract.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder, MAX_LEN};
use crate::error::{Error, Result};
use crate::ingest::{InteractionRecord, Role, Wei};

pub type NodeIndex = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CoarseEdge {
    pub src: u32,
    pub dst: u32,
    pub t: u64,
    pub w_tilde: Wei,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
    Both,
}

/// How a call tally becomes a feature value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureValue {
    #[default]
    Count,
    Binary,
    Log1p,
}

impl FeatureValue {
    fn apply(self, count: u64) -> f64 {
        match self {
            FeatureValue::Count => count as f64,
            FeatureValue::Binary => 1.0,
            FeatureValue::Log1p => (count as f64).ln_1p(),
        }
    }

    fn code(self) -> u8 {
        match self {
            FeatureValue::Count => 0,
            FeatureValue::Binary => 1,
            FeatureValue::Log1p => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FeatureValue::Count),
            1 => Some(FeatureValue::Binary),
            2 => Some(FeatureValue::Log1p),
            _ => None,
        }
    }
}

impl FromStr for FeatureValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "count" => Ok(FeatureValue::Count),
            "binary" => Ok(FeatureValue::Binary),
            "log1p" => Ok(FeatureValue::Log1p),
            other => Err(Error::Config(format!("unknown feature value mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureOptions {
    pub value: FeatureValue,
    /// Appends a trailing 0/1 column marking contract accounts.
    pub is_contract_column: bool,
    /// Contracts called fewer times than this (over all callers) get no column. 0 keeps all.
    pub min_contract_calls: u64,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            value: FeatureValue::Count,
            is_contract_column: false,
            min_contract_calls: 0,
        }
    }
}

/// Pair-level aggregation of raw interactions. Shards built independently merge by summing.
#[derive(Debug, Default, Clone)]
pub struct EdgeAccumulator {
    pairs: HashMap<(u32, u32), (u64, Wei)>,
}

impl EdgeAccumulator {
    pub fn add(&mut self, src: u32, dst: u32, amount: Option<Wei>) -> Result<()> {
        let slot = self.pairs.entry((src, dst)).or_insert((0, Wei::ZERO));
        slot.0 += 1;
        if let Some(a) = amount {
            slot.1 = slot.1.checked_add(a).ok_or(Error::AmountOverflow)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: EdgeAccumulator) -> Result<()> {
        for (k, (t, w)) in other.pairs {
            let slot = self.pairs.entry(k).or_insert((0, Wei::ZERO));
            slot.0 += t;
            slot.1 = slot.1.checked_add(w).ok_or(Error::AmountOverflow)?;
        }
        Ok(())
    }

    /// Edges sorted by (src, dst).
    pub fn into_edges(self) -> Vec<CoarseEdge> {
        let mut edges: Vec<CoarseEdge> = self
            .pairs
            .into_iter()
            .map(|((src, dst), (t, w_tilde))| CoarseEdge { src, dst, t, w_tilde })
            .collect();
        edges.sort_unstable_by_key(|e| (e.src, e.dst));
        edges
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LwAig {
    accounts: Vec<String>,
    index: HashMap<String, u32>,
    roles: Vec<Role>,
    out_offsets: Vec<usize>,
    out_edges: Vec<CoarseEdge>,
    in_offsets: Vec<usize>,
    /// Positions into `out_edges`, grouped by destination and ordered by source.
    in_edges: Vec<u32>,
    contracts: Vec<u32>,
    feature_options: FeatureOptions,
    feat_offsets: Vec<usize>,
    feat_cols: Vec<u32>,
    feat_vals: Vec<f64>,
    role_conflicts: usize,
}

/// Builds the coarsened graph topology. Feature rows are empty until
/// [`build_contract_features`] runs.
pub fn build_lw_aig(records: &[InteractionRecord]) -> Result<LwAig> {
    let ids: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| [r.from_account.as_str(), r.to_account.as_str()])
        .collect();
    if ids.len() > u32::MAX as usize {
        return Err(Error::IndexOverflow(ids.len()));
    }
    let accounts: Vec<String> = ids.into_iter().map(str::to_string).collect();
    let index: HashMap<String, u32> = accounts
        .iter()
        .enumerate()
        .map(|(i, a)| (a.clone(), i as u32))
        .collect();

    let mut flags = vec![0u8; accounts.len()];
    let mut acc = EdgeAccumulator::default();
    for r in records {
        let s = index[r.from_account.as_str()];
        let d = index[r.to_account.as_str()];
        flags[s as usize] |= if r.from_is_contract { 2 } else { 1 };
        flags[d as usize] |= if r.to_is_contract { 2 } else { 1 };
        acc.add(s, d, r.is_transaction().then_some(r.value))?;
    }
    let role_conflicts = flags.iter().filter(|&&f| f == 3).count();
    if role_conflicts > 0 {
        log::warn!("{role_conflicts} accounts carry conflicting contract flags; resolved as CA");
    }
    let roles = flags
        .iter()
        .map(|&f| if f & 2 != 0 { Role::Ca } else { Role::Eoa })
        .collect();
    let mut g = LwAig::from_parts(accounts, roles, acc.into_edges())?;
    g.index = index;
    g.role_conflicts = role_conflicts;
    Ok(g)
}

/// Installs contract-call feature rows: one column per called contract (columns ordered by
/// contract account id), EOA cells tally that account's calls to the contract, CA rows stay
/// empty apart from the optional is-contract marker.
pub fn build_contract_features(
    records: &[InteractionRecord],
    graph: &mut LwAig,
    options: FeatureOptions,
) -> Result<()> {
    let mut calls: HashMap<(u32, u32), u64> = HashMap::new();
    let mut per_contract: HashMap<u32, u64> = HashMap::new();
    for r in records.iter().filter(|r| r.is_contract_call()) {
        let caller = graph
            .node_of(&r.from_account)
            .ok_or_else(|| Error::InvalidArgument(format!("account {} missing from graph", r.from_account)))?;
        let contract = graph
            .node_of(&r.to_account)
            .ok_or_else(|| Error::InvalidArgument(format!("account {} missing from graph", r.to_account)))?;
        *calls.entry((caller as u32, contract as u32)).or_insert(0) += 1;
        *per_contract.entry(contract as u32).or_insert(0) += 1;
    }
    // node indexes are assigned in account-id order, so sorting by index sorts by id
    let mut contracts: Vec<u32> = per_contract
        .iter()
        .filter(|(_, &n)| n >= options.min_contract_calls)
        .map(|(&c, _)| c)
        .collect();
    contracts.sort_unstable();
    let column: HashMap<u32, u32> = contracts.iter().enumerate().map(|(col, &c)| (c, col as u32)).collect();

    let n = graph.node_count();
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for ((caller, contract), count) in calls {
        if graph.roles[caller as usize] == Role::Ca {
            continue;
        }
        if let Some(&col) = column.get(&contract) {
            rows[caller as usize].push((col, options.value.apply(count)));
        }
    }
    let width = contracts.len() as u32;
    let mut feat_offsets = Vec::with_capacity(n + 1);
    let mut feat_cols = Vec::new();
    let mut feat_vals = Vec::new();
    feat_offsets.push(0);
    for (v, row) in rows.iter_mut().enumerate() {
        row.sort_unstable_by_key(|&(c, _)| c);
        for &(c, x) in row.iter() {
            feat_cols.push(c);
            feat_vals.push(x);
        }
        if options.is_contract_column && graph.roles[v] == Role::Ca {
            feat_cols.push(width);
            feat_vals.push(1.0);
        }
        feat_offsets.push(feat_cols.len());
    }
    graph.contracts = contracts;
    graph.feature_options = options;
    graph.feat_offsets = feat_offsets;
    graph.feat_cols = feat_cols;
    graph.feat_vals = feat_vals;
    Ok(())
}

impl LwAig {
    /// Topology plus contract features in one pass.
    pub fn from_records(records: &[InteractionRecord], options: FeatureOptions) -> Result<Self> {
        let mut g = build_lw_aig(records)?;
        build_contract_features(records, &mut g, options)?;
        Ok(g)
    }

    /// Assembles a graph from an already-coarse edge list (at most one edge per ordered pair).
    pub fn from_parts(accounts: Vec<String>, roles: Vec<Role>, mut edges: Vec<CoarseEdge>) -> Result<Self> {
        let n = accounts.len();
        if n > u32::MAX as usize {
            return Err(Error::IndexOverflow(n));
        }
        if roles.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} roles for {} accounts",
                roles.len(),
                n
            )));
        }
        edges.sort_unstable_by_key(|e| (e.src, e.dst));
        for e in &edges {
            if e.src as usize >= n || e.dst as usize >= n {
                return Err(Error::InvalidNode {
                    index: e.src.max(e.dst) as usize,
                    len: n,
                });
            }
            if e.t == 0 {
                return Err(Error::InvalidArgument("edge with t = 0".into()));
            }
        }
        if edges.windows(2).any(|w| (w[0].src, w[0].dst) == (w[1].src, w[1].dst)) {
            return Err(Error::InvalidArgument("duplicate ordered pair in edge list".into()));
        }
        let out_offsets = offsets(n, edges.iter().map(|e| e.src as usize));
        let mut in_edges: Vec<u32> = (0..edges.len() as u32).collect();
        in_edges.sort_unstable_by_key(|&i| (edges[i as usize].dst, edges[i as usize].src));
        let in_offsets = offsets(n, edges.iter().map(|e| e.dst as usize));
        let index = accounts
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i as u32))
            .collect();
        Ok(Self {
            accounts,
            index,
            roles,
            out_offsets,
            out_edges: edges,
            in_offsets,
            in_edges,
            contracts: Vec::new(),
            feature_options: FeatureOptions::default(),
            feat_offsets: vec![0; n + 1],
            feat_cols: Vec::new(),
            feat_vals: Vec::new(),
            role_conflicts: 0,
        })
    }

    pub fn node_count(&self) -> usize {
        self.accounts.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out_edges.len()
    }

    pub fn edges(&self) -> &[CoarseEdge] {
        &self.out_edges
    }

    pub fn account(&self, v: NodeIndex) -> &str {
        &self.accounts[v]
    }

    pub fn accounts(&self) -> &[String] {
        &self.accounts
    }

    pub fn node_of(&self, account: &str) -> Option<NodeIndex> {
        self.index.get(account).map(|&i| i as usize)
    }

    pub fn role(&self, v: NodeIndex) -> Role {
        self.roles[v]
    }

    pub fn role_conflicts(&self) -> usize {
        self.role_conflicts
    }

    /// Feature width: one column per contract, plus the optional is-contract column.
    pub fn feature_dim(&self) -> usize {
        self.contracts.len() + usize::from(self.feature_options.is_contract_column)
    }

    pub fn contract_count(&self) -> usize {
        self.contracts.len()
    }

    pub fn contract_column(&self, account: &str) -> Option<usize> {
        let node = self.node_of(account)? as u32;
        self.contracts.binary_search(&node).ok()
    }

    pub fn contract_at(&self, column: usize) -> &str {
        &self.accounts[self.contracts[column] as usize]
    }

    pub fn feature_options(&self) -> FeatureOptions {
        self.feature_options
    }

    /// Sparse feature row as parallel (column, value) slices.
    pub fn feature_row(&self, v: NodeIndex) -> (&[u32], &[f64]) {
        let r = self.feat_offsets[v]..self.feat_offsets[v + 1];
        (&self.feat_cols[r.clone()], &self.feat_vals[r])
    }

    pub fn check(&self, v: NodeIndex) -> Result<()> {
        if v < self.node_count() {
            Ok(())
        } else {
            Err(Error::InvalidNode {
                index: v,
                len: self.node_count(),
            })
        }
    }

    pub fn out_edges(&self, v: NodeIndex) -> &[CoarseEdge] {
        &self.out_edges[self.out_offsets[v]..self.out_offsets[v + 1]]
    }

    pub fn in_edges(&self, v: NodeIndex) -> impl Iterator<Item = &CoarseEdge> + '_ {
        self.in_edges[self.in_offsets[v]..self.in_offsets[v + 1]]
            .iter()
            .map(move |&i| &self.out_edges[i as usize])
    }

    /// Directed edge lookup by binary search over the source's sorted out-list.
    pub fn edge(&self, src: NodeIndex, dst: NodeIndex) -> Option<&CoarseEdge> {
        let out = self.out_edges(src);
        out.binary_search_by_key(&(dst as u32), |e| e.dst).ok().map(|i| &out[i])
    }

    pub fn total_interactions(&self) -> u64 {
        self.out_edges.iter().map(|e| e.t).sum()
    }

    pub fn total_amount(&self) -> Option<Wei> {
        self.out_edges
            .iter()
            .try_fold(Wei::ZERO, |acc, e| acc.checked_add(e.w_tilde))
    }
}

fn offsets(n: usize, keys: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut off = vec![0usize; n + 1];
    for k in keys {
        off[k + 1] += 1;
    }
    for i in 0..n {
        off[i + 1] += off[i];
    }
    off
}

/// Adjacency of `v`. For [`Direction::Both`] out-edges come first, then in-edges, so a
/// neighbor linked both ways appears once per orientation.
pub fn neighbors(graph: &LwAig, v: NodeIndex, direction: Direction) -> Result<Vec<(NodeIndex, CoarseEdge)>> {
    graph.check(v)?;
    let mut out = Vec::new();
    if matches!(direction, Direction::Out | Direction::Both) {
        out.extend(graph.out_edges(v).iter().map(|e| (e.dst as usize, *e)));
    }
    if matches!(direction, Direction::In | Direction::Both) {
        out.extend(graph.in_edges(v).map(|e| (e.src as usize, *e)));
    }
    Ok(out)
}

const GRAPH_MAGIC: &[u8; 4] = b"BGCG";
const GRAPH_VERSION: u32 = 1;

/// Writes the binary snapshot. Layout (little-endian):
///
/// ```text
/// "BGCG" u32:version
/// u64:n  { str:account u8:role }*n                  role 0 = EOA, 1 = CA
/// u64:m  { u32:src u32:dst u64:t u128:w_tilde }*m   sorted by (src, dst)
/// { u64 }*(n+1)                                     out offsets
/// { u64 }*(n+1)  { u32 }*m                          in offsets, in-edge positions
/// u64:role_conflicts
/// u8:feature_value u8:is_contract_column u64:min_contract_calls
/// u64:F  { u32:contract_node }*F
/// u64:nnz  { u32:col f64:value }*nnz  { u64 }*(n+1) feature row offsets
/// ```
pub fn write_snapshot(path: &Path, g: &LwAig) -> Result<()> {
    let mut enc = Encoder::new(BufWriter::with_capacity(1 << 20, File::create(path)?));
    enc.header(GRAPH_MAGIC, GRAPH_VERSION)?;
    enc.len(g.accounts.len())?;
    for (a, r) in g.accounts.iter().zip(&g.roles) {
        enc.str(a)?;
        enc.u8(match r {
            Role::Eoa => 0,
            Role::Ca => 1,
        })?;
    }
    enc.len(g.out_edges.len())?;
    for e in &g.out_edges {
        enc.u32(e.src)?;
        enc.u32(e.dst)?;
        enc.u64(e.t)?;
        enc.u128(e.w_tilde.0)?;
    }
    for &o in &g.out_offsets {
        enc.u64(o as u64)?;
    }
    for &o in &g.in_offsets {
        enc.u64(o as u64)?;
    }
    for &i in &g.in_edges {
        enc.u32(i)?;
    }
    enc.u64(g.role_conflicts as u64)?;
    enc.u8(g.feature_options.value.code())?;
    enc.u8(u8::from(g.feature_options.is_contract_column))?;
    enc.u64(g.feature_options.min_contract_calls)?;
    enc.len(g.contracts.len())?;
    for &c in &g.contracts {
        enc.u32(c)?;
    }
    enc.len(g.feat_cols.len())?;
    for (&c, &x) in g.feat_cols.iter().zip(&g.feat_vals) {
        enc.u32(c)?;
        enc.f64(x)?;
    }
    for &o in &g.feat_offsets {
        enc.u64(o as u64)?;
    }
    enc.finish()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<LwAig> {
    let file = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut dec = Decoder::new(file, path.display().to_string());
    dec.header(GRAPH_MAGIC, GRAPH_VERSION)?;
    let n = dec.len(u32::MAX as usize)?;
    let mut accounts = Vec::with_capacity(n);
    let mut roles = Vec::with_capacity(n);
    for _ in 0..n {
        accounts.push(dec.str()?);
        roles.push(match dec.u8()? {
            0 => Role::Eoa,
            1 => Role::Ca,
            r => return Err(dec.err(format!("bad role code {r}"))),
        });
    }
    let m = dec.len(MAX_LEN)?;
    let mut edges = Vec::with_capacity(m);
    for _ in 0..m {
        edges.push(CoarseEdge {
            src: dec.u32()?,
            dst: dec.u32()?,
            t: dec.u64()?,
            w_tilde: Wei(dec.u128()?),
        });
    }
    let read_offsets = |dec: &mut Decoder<_>, len: usize| -> Result<Vec<usize>> {
        let off = (0..=n)
            .map(|_| dec.u64().map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        if off.first() != Some(&0) || off.last() != Some(&len) || off.windows(2).any(|w| w[0] > w[1]) {
            return Err(dec.err("inconsistent offsets"));
        }
        Ok(off)
    };
    let out_offsets = read_offsets(&mut dec, m)?;
    let in_offsets = read_offsets(&mut dec, m)?;
    let in_edges = (0..m).map(|_| dec.u32()).collect::<Result<Vec<_>>>()?;
    let role_conflicts = dec.u64()? as usize;
    let value = FeatureValue::from_code(dec.u8()?).ok_or_else(|| dec.err("bad feature value code"))?;
    let is_contract_column = dec.u8()? != 0;
    let min_contract_calls = dec.u64()?;
    let f = dec.len(n)?;
    let contracts = (0..f).map(|_| dec.u32()).collect::<Result<Vec<_>>>()?;
    let nnz = dec.len(MAX_LEN)?;
    let mut feat_cols = Vec::with_capacity(nnz);
    let mut feat_vals = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        feat_cols.push(dec.u32()?);
        feat_vals.push(dec.f64()?);
    }
    let feat_offsets = read_offsets(&mut dec, nnz)?;
    dec.expect_eof()?;

    let mut g = LwAig::from_parts(accounts, roles, edges)?;
    if g.out_offsets != out_offsets || g.in_offsets != in_offsets || g.in_edges != in_edges {
        return Err(Error::format(path.display().to_string(), "adjacency index mismatch"));
    }
    let width = f as u32 + u32::from(is_contract_column);
    if feat_cols.iter().any(|&c| c >= width) || contracts.iter().any(|&c| c as usize >= n) {
        return Err(Error::format(path.display().to_string(), "feature index out of range"));
    }
    g.role_conflicts = role_conflicts;
    g.feature_options = FeatureOptions {
        value,
        is_contract_column,
        min_contract_calls,
    };
    g.contracts = contracts;
    g.feat_offsets = feat_offsets;
    g.feat_cols = feat_cols;
    g.feat_vals = feat_vals;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ValueUnit;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn tx(from: &str, to: &str, ether: &str) -> InteractionRecord {
        InteractionRecord {
            block_number: 1,
            timestamp: 1,
            from_account: from.into(),
            to_account: to.into(),
            from_is_contract: false,
            to_is_contract: false,
            calling_function: None,
            value: Wei::parse(ether, ValueUnit::Ether).unwrap(),
        }
    }

    fn call(from: &str, to: &str) -> InteractionRecord {
        InteractionRecord {
            to_is_contract: true,
            calling_function: Some("transfer".into()),
            ..tx(from, to, "0")
        }
    }

    fn ether(s: &str) -> Wei {
        Wei::parse(s, ValueUnit::Ether).unwrap()
    }

    #[test]
    fn coarsens_parallel_transactions() {
        let g = build_lw_aig(&[tx("A", "B", "1.0"), tx("A", "B", "2.5"), tx("B", "A", "0.5")]).unwrap();
        let (a, b) = (g.node_of("A").unwrap(), g.node_of("B").unwrap());
        let ab = g.edge(a, b).unwrap();
        assert_eq!((ab.t, ab.w_tilde), (2, ether("3.5")));
        let ba = g.edge(b, a).unwrap();
        assert_eq!((ba.t, ba.w_tilde), (1, ether("0.5")));
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn calls_carry_no_amount() {
        let mut c = call("A", "C");
        c.value = ether("7");
        let g = build_lw_aig(&[c, call("A", "C")]).unwrap();
        let e = g.edge(g.node_of("A").unwrap(), g.node_of("C").unwrap()).unwrap();
        assert_eq!((e.t, e.w_tilde), (2, Wei::ZERO));
        assert_eq!(g.role(g.node_of("C").unwrap()), Role::Ca);
    }

    #[test]
    fn empty_records_give_empty_graph() {
        let g = LwAig::from_records(&[], FeatureOptions::default()).unwrap();
        assert_eq!((g.node_count(), g.edge_count(), g.feature_dim()), (0, 0, 0));
    }

    #[test]
    fn contract_feature_counts() {
        let records = [call("A", "C1"), call("A", "C1"), call("A", "C2"), tx("B", "A", "1")];
        let g = LwAig::from_records(&records, FeatureOptions::default()).unwrap();
        assert_eq!(g.contract_column("C1"), Some(0));
        assert_eq!(g.contract_column("C2"), Some(1));
        let (cols, vals) = g.feature_row(g.node_of("A").unwrap());
        assert_eq!(cols, &[0, 1]);
        assert_eq!(vals, &[2.0, 1.0]);
        let (cols, _) = g.feature_row(g.node_of("B").unwrap());
        assert!(cols.is_empty());
        for c in ["C1", "C2"] {
            assert!(g.feature_row(g.node_of(c).unwrap()).0.is_empty());
        }
    }

    #[test]
    fn feature_variants_and_filter() {
        let records = [call("A", "C1"), call("A", "C1"), call("A", "C2"), call("B", "C1")];
        let opts = FeatureOptions {
            value: FeatureValue::Log1p,
            is_contract_column: true,
            min_contract_calls: 2,
        };
        let g = LwAig::from_records(&records, opts).unwrap();
        assert_eq!(g.contract_count(), 1);
        assert_eq!(g.feature_dim(), 2);
        let (cols, vals) = g.feature_row(g.node_of("A").unwrap());
        assert_eq!(cols, &[0]);
        assert!((vals[0] - 2f64.ln_1p()).abs() < 1e-15);
        let (cols, vals) = g.feature_row(g.node_of("C2").unwrap());
        assert_eq!((cols, vals), (&[1u32][..], &[1.0][..]));
    }

    #[test]
    fn neighbor_orientations() {
        let g = build_lw_aig(&[tx("A", "B", "1"), tx("C", "A", "1"), tx("D", "D", "1")]).unwrap();
        let id = |s| g.node_of(s).unwrap();
        let names = |d| {
            let mut v: Vec<_> = neighbors(&g, id("A"), d)
                .unwrap()
                .into_iter()
                .map(|(n, _)| g.account(n).to_string())
                .collect();
            v.sort();
            v
        };
        assert_eq!(names(Direction::Out), ["B"]);
        assert_eq!(names(Direction::In), ["C"]);
        assert_eq!(names(Direction::Both), ["B", "C"]);
        assert!(neighbors(&g, 99, Direction::Out).is_err());
        let g2 = LwAig::from_parts(vec!["X".into()], vec![Role::Eoa], vec![]).unwrap();
        assert!(neighbors(&g2, 0, Direction::Both).unwrap().is_empty());
    }

    fn arb_records() -> impl Strategy<Value = Vec<InteractionRecord>> {
        proptest::collection::vec((0u8..12, 0u8..12, 0u8..3, 0u64..1_000_000), 0..80).prop_map(|rows| {
            rows.into_iter()
                .map(|(a, b, kind, amount)| {
                    let from = format!("acct{a}");
                    if kind == 0 {
                        let mut r = call(&from, &format!("ctr{}", b % 4));
                        r.value = Wei(u128::from(amount));
                        r
                    } else {
                        let mut r = tx(&from, &format!("acct{b}"), "0");
                        r.value = Wei(u128::from(amount) << 40);
                        r
                    }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn permutation_independent(records in arb_records(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let g1 = LwAig::from_records(&records, FeatureOptions::default()).unwrap();
            let mut shuffled = records.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let g2 = LwAig::from_records(&shuffled, FeatureOptions::default()).unwrap();
            prop_assert_eq!(g1, g2);
        }

        #[test]
        fn conservation_and_row_sums(records in arb_records()) {
            let g = LwAig::from_records(&records, FeatureOptions::default()).unwrap();
            prop_assert_eq!(g.total_interactions(), records.len() as u64);
            let tx_sum: u128 = records.iter().filter(|r| r.is_transaction()).map(|r| r.value.0).sum();
            prop_assert_eq!(g.total_amount(), Some(Wei(tx_sum)));
            let mut calls: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
            let mut call_counts: BTreeMap<&str, u64> = BTreeMap::new();
            for r in records.iter().filter(|r| r.is_contract_call()) {
                calls.entry(&r.from_account).or_default().insert(&r.to_account);
                *call_counts.entry(&r.from_account).or_default() += 1;
            }
            for v in 0..g.node_count() {
                let (cols, vals) = g.feature_row(v);
                let sum: f64 = vals.iter().sum();
                let acct = g.account(v);
                prop_assert_eq!(sum, *call_counts.get(acct).unwrap_or(&0) as f64);
                for &c in cols {
                    prop_assert!(calls[acct].contains(g.contract_at(c as usize)));
                }
            }
        }

        #[test]
        fn coarsening_is_idempotent(records in arb_records()) {
            let g = build_lw_aig(&records).unwrap();
            let again = LwAig::from_parts(
                g.accounts().to_vec(),
                (0..g.node_count()).map(|v| g.role(v)).collect(),
                g.edges().to_vec(),
            ).unwrap();
            prop_assert_eq!(again.edges(), g.edges());
        }

        #[test]
        fn both_is_union_of_out_and_in(records in arb_records()) {
            let g = build_lw_aig(&records).unwrap();
            for v in 0..g.node_count() {
                let set = |d| neighbors(&g, v, d).unwrap().into_iter().map(|(n, e)| (n, e.src, e.dst)).collect::<BTreeSet<_>>();
                let mut union = set(Direction::Out);
                union.extend(set(Direction::In));
                prop_assert_eq!(set(Direction::Both), union);
            }
        }

        #[test]
        fn snapshot_round_trip(records in arb_records(), icc in any::<bool>()) {
            let opts = FeatureOptions { is_contract_column: icc, ..FeatureOptions::default() };
            let g = LwAig::from_records(&records, opts).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("g1.bin");
            let p2 = dir.path().join("g2.bin");
            write_snapshot(&p1, &g).unwrap();
            let back = read_snapshot(&p1).unwrap();
            write_snapshot(&p2, &back).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn snapshot_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"BGCX\x01\0\0\0").unwrap();
        assert!(read_snapshot(&p).is_err());
        std::fs::write(&p, b"BGCG\x01\0\0\0\x05").unwrap();
        assert!(read_snapshot(&p).is_err());
    }
}
