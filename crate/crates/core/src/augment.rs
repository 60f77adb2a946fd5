//! Stochastic subgraph views: feature masking and node dropping.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::sampling::{AccountSubgraph, Dataset, Instance, LocalEdge};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentOp {
    FeatureMask,
    NodeDrop,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub op: AugmentOp,
    pub p: f64,
}

impl AugmentSpec {
    pub fn new(op: AugmentOp, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "augmentation probability {p} outside [0, 1]"
            )));
        }
        Ok(Self { op, p })
    }

    pub const fn identity() -> Self {
        Self {
            op: AugmentOp::Identity,
            p: 0.0,
        }
    }

    pub fn apply(&self, g: &AccountSubgraph, mode: MaskMode, rng: &mut impl Rng) -> AccountSubgraph {
        match self.op {
            AugmentOp::FeatureMask => feature_mask_with(g, self.p, mode, rng),
            AugmentOp::NodeDrop => node_drop(g, self.p, rng),
            AugmentOp::Identity => g.clone(),
        }
    }
}

impl FromStr for AugmentSpec {
    type Err = Error;

    /// `fm:0.2`, `nd:0.2`, or `identity`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_matches('"');
        let (name, p) = match s.split_once(':') {
            Some((n, p)) => (
                n.trim(),
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad augmentation probability in {s:?}")))?,
            ),
            None => (s, 0.0),
        };
        let op = match name.to_ascii_lowercase().as_str() {
            "fm" | "feature_mask" => AugmentOp::FeatureMask,
            "nd" | "node_drop" => AugmentOp::NodeDrop,
            "identity" | "id" | "none" => AugmentOp::Identity,
            other => return Err(Error::Config(format!("unknown augmentation {other:?}"))),
        };
        AugmentSpec::new(op, p)
    }
}

impl fmt::Display for AugmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            AugmentOp::FeatureMask => write!(f, "fm:{}", self.p),
            AugmentOp::NodeDrop => write!(f, "nd:{}", self.p),
            AugmentOp::Identity => f.write_str("identity"),
        }
    }
}

/// Granularity of the feature mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// One Bernoulli draw per feature dimension, applied to every node.
    #[default]
    Column,
    /// Independent draw per (node, dimension) cell.
    Element,
}

pub fn feature_mask(g: &AccountSubgraph, p: f64, rng: &mut impl Rng) -> AccountSubgraph {
    feature_mask_with(g, p, MaskMode::Column, rng)
}

pub fn feature_mask_with(g: &AccountSubgraph, p: f64, mode: MaskMode, rng: &mut impl Rng) -> AccountSubgraph {
    let mut view = g.clone();
    let f = view.features.cols();
    match mode {
        MaskMode::Column => {
            let masked: Vec<bool> = (0..f).map(|_| rng.gen_bool(p)).collect();
            for i in 0..view.features.rows() {
                for (x, &m) in view.features.row_mut(i).iter_mut().zip(&masked) {
                    if m {
                        *x = 0.0;
                    }
                }
            }
        }
        MaskMode::Element => {
            for x in view.features.data_mut() {
                if rng.gen_bool(p) {
                    *x = 0.0;
                }
            }
        }
    }
    view
}

/// Drops each non-center node with probability `p`; survivors keep their relative order.
pub fn node_drop(g: &AccountSubgraph, p: f64, rng: &mut impl Rng) -> AccountSubgraph {
    let n = g.node_count();
    let keep: Vec<bool> = (0..n)
        .map(|i| {
            let drop = rng.gen_bool(p);
            i == g.center || !drop
        })
        .collect();
    let mut remap = vec![u32::MAX; n];
    let mut survivors = Vec::with_capacity(n);
    for (i, &k) in keep.iter().enumerate() {
        if k {
            remap[i] = survivors.len() as u32;
            survivors.push(i);
        }
    }
    let edges = g
        .edges
        .iter()
        .filter(|e| keep[e.src as usize] && keep[e.dst as usize])
        .map(|e| LocalEdge {
            src: remap[e.src as usize],
            dst: remap[e.dst as usize],
            ..*e
        })
        .collect();
    AccountSubgraph {
        center: remap[g.center] as usize,
        node_map: survivors.iter().map(|&i| g.node_map[i]).collect(),
        edges,
        features: g.features.select_rows(&survivors),
        label: g.label,
    }
}

/// Random stream for view `view` (1 or 2) of instance `ordinal` in `epoch`.
pub fn view_rng(seed: u64, epoch: u64, ordinal: u64, view: u64) -> ChaCha8Rng {
    stream_rng(seed, &[0x7669_6577, epoch, ordinal, view])
}

/// Both views for one instance; depends only on (seed, epoch, ordinal).
pub fn make_views(
    g: &AccountSubgraph,
    ordinal: usize,
    specs: (AugmentSpec, AugmentSpec),
    mode: MaskMode,
    seed: u64,
    epoch: u64,
) -> (AccountSubgraph, AccountSubgraph) {
    let v1 = specs.0.apply(g, mode, &mut view_rng(seed, epoch, ordinal as u64, 1));
    let v2 = specs.1.apply(g, mode, &mut view_rng(seed, epoch, ordinal as u64, 2));
    (v1, v2)
}

/// Position-aligned augmented copies of `d`: `aug1[i]` and `aug2[i]` derive from `d[i]` and
/// carry its label.
pub fn make_view_datasets(
    d: &Dataset,
    spec1: AugmentSpec,
    spec2: AugmentSpec,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if d.is_empty() {
        return Err(Error::InvalidArgument("cannot augment an empty dataset".into()));
    }
    let mut a1 = Vec::with_capacity(d.len());
    let mut a2 = Vec::with_capacity(d.len());
    for (i, inst) in d.instances.iter().enumerate() {
        let (v1, v2) = make_views(&inst.subgraph, i, (spec1, spec2), MaskMode::Column, seed, 0);
        a1.push(Instance {
            account: inst.account.clone(),
            subgraph: v1,
        });
        a2.push(Instance {
            account: inst.account.clone(),
            subgraph: v2,
        });
    }
    let wrap = |instances| Dataset {
        feature_dim: d.feature_dim,
        meta: d.meta.clone(),
        instances,
    };
    Ok((wrap(a1), wrap(a2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Wei;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;

    fn random_subgraph(n: usize, f: usize, density: f64, seed: u64) -> AccountSubgraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n as u32 {
            for j in 0..n as u32 {
                if i != j && rng.gen_bool(density) {
                    edges.push(LocalEdge {
                        src: i,
                        dst: j,
                        t: rng.gen_range(1..5),
                        w_tilde: Wei(rng.gen_range(0..100)),
                    });
                }
            }
        }
        let data = (0..n * f).map(|_| f64::from(rng.gen_range(0u8..4))).collect();
        AccountSubgraph {
            center: rng.gen_range(0..n),
            node_map: (0..n as u32).map(|i| i * 3 + 1).collect(),
            edges,
            features: Tensor::from_vec(&[n, f], data).unwrap(),
            label: Some(1),
        }
    }

    #[test]
    fn spec_parsing() {
        let s: AugmentSpec = "nd:0.2".parse().unwrap();
        assert_eq!((s.op, s.p), (AugmentOp::NodeDrop, 0.2));
        let s: AugmentSpec = "\"fm:0.3\"".parse().unwrap();
        assert_eq!(s.op, AugmentOp::FeatureMask);
        assert_eq!("identity".parse::<AugmentSpec>().unwrap(), AugmentSpec::identity());
        assert!("fm:1.5".parse::<AugmentSpec>().is_err());
        assert!("xx:0.1".parse::<AugmentSpec>().is_err());
        assert_eq!(
            AugmentSpec::new(AugmentOp::FeatureMask, 0.25).unwrap().to_string(),
            "fm:0.25"
        );
    }

    #[test]
    fn full_feature_mask_zeroes_everything() {
        let g = random_subgraph(6, 5, 0.3, 1);
        let v = feature_mask(&g, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(v.features.data().iter().all(|&x| x == 0.0));
        assert_eq!(v.edges, g.edges);
        assert_eq!(v.label, g.label);
    }

    #[test]
    fn full_node_drop_keeps_center_only() {
        let g = random_subgraph(8, 3, 0.4, 2);
        let v = node_drop(&g, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(v.node_map, vec![g.node_map[g.center]]);
        assert_eq!(v.center, 0);
        assert_eq!(v.features.row(0), g.features.row(g.center));
        assert!(v.edges.iter().all(|e| e.src == 0 && e.dst == 0));
    }

    #[test]
    fn feature_mask_rate_concentrates() {
        // F = 10,000 dims, 500 trials, p = 0.3: the mean fraction sits within 3 sigma of p
        let f = 10_000;
        let p = 0.3;
        let g = AccountSubgraph {
            center: 0,
            node_map: vec![0],
            edges: vec![],
            features: Tensor::filled(&[1, f], 1.0),
            label: None,
        };
        let sigma = (p * (1.0 - p) / f as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        for _ in 0..500 {
            let v = feature_mask(&g, p, &mut rng);
            let frac = v.features.data().iter().filter(|&&x| x == 0.0).count() as f64 / f as f64;
            assert!((frac - p).abs() < 5.0 * sigma, "trial fraction {frac}");
            total += frac;
        }
        let mean = total / 500.0;
        assert!((mean - p).abs() < 3.0 * sigma / (500f64).sqrt());
    }

    #[test]
    fn node_drop_survivor_count_concentrates() {
        let g = random_subgraph(100, 2, 0.05, 4);
        let p = 0.2;
        let trials = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0usize;
        for _ in 0..trials {
            let v = node_drop(&g, p, &mut rng);
            total += v.node_count();
            let kept: BTreeSet<u32> = v.node_map.iter().copied().collect();
            let global =
                |sg: &AccountSubgraph, e: &LocalEdge| (sg.node_map[e.src as usize], sg.node_map[e.dst as usize]);
            let expect: BTreeSet<(u32, u32)> = g
                .edges
                .iter()
                .map(|e| global(&g, e))
                .filter(|(a, b)| kept.contains(a) && kept.contains(b))
                .collect();
            let got: BTreeSet<(u32, u32)> = v.edges.iter().map(|e| global(&v, e)).collect();
            assert_eq!(got, expect);
        }
        let mean = total as f64 / trials as f64;
        let expected = 1.0 + 99.0 * (1.0 - p);
        let sigma = (99.0 * p * (1.0 - p) / trials as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * sigma, "mean survivors {mean}");
    }

    #[test]
    fn element_mask_variant() {
        let g = random_subgraph(5, 4, 0.2, 6);
        let v = feature_mask_with(&g, 0.0, MaskMode::Element, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(v, g);
    }

    fn toy_dataset(n: usize) -> Dataset {
        Dataset {
            feature_dim: 4,
            meta: Default::default(),
            instances: (0..n)
                .map(|i| Instance {
                    account: format!("a{i}"),
                    subgraph: AccountSubgraph {
                        label: Some(i % 2),
                        ..random_subgraph(5 + i, 4, 0.3, i as u64)
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn view_datasets_are_aligned() {
        let d = toy_dataset(7);
        let id = AugmentSpec::identity();
        let (a, b) = make_view_datasets(&d, id, id, 1).unwrap();
        assert_eq!(a, d);
        assert_eq!(b, d);
        let nd: AugmentSpec = "nd:0.5".parse().unwrap();
        let fm: AugmentSpec = "fm:0.5".parse().unwrap();
        let (a, b) = make_view_datasets(&d, nd, fm, 1).unwrap();
        assert_eq!((a.len(), b.len()), (7, 7));
        for i in 0..7 {
            assert_eq!(a.instances[i].subgraph.label, d.instances[i].subgraph.label);
            assert_eq!(b.instances[i].subgraph.label, d.instances[i].subgraph.label);
            assert_eq!(a.instances[i].account, d.instances[i].account);
        }
        let again = make_view_datasets(&d, nd, fm, 1).unwrap();
        assert_eq!((a, b), again);
        assert!(make_view_datasets(&toy_dataset(0), nd, fm, 1).is_err());
    }

    proptest! {
        #[test]
        fn views_preserve_label_center_and_induce(
            n in 1usize..30, f in 0usize..6, seed in any::<u64>(), p in 0.0f64..=1.0
        ) {
            let g = random_subgraph(n, f, 0.2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let fm = feature_mask(&g, p, &mut rng);
            prop_assert_eq!(&fm.edges, &g.edges);
            prop_assert_eq!(fm.center, g.center);
            prop_assert_eq!(fm.label, g.label);
            let nd = node_drop(&g, p, &mut rng);
            prop_assert_eq!(nd.node_map[nd.center], g.node_map[g.center]);
            prop_assert_eq!(nd.label, g.label);
            nd.validate().unwrap();
            for (i, &gn) in nd.node_map.iter().enumerate() {
                let j = g.node_map.iter().position(|&x| x == gn).unwrap();
                prop_assert_eq!(nd.features.row(i), g.features.row(j));
            }
        }

        #[test]
        fn zero_probability_is_identity(n in 1usize..30, f in 0usize..6, seed in any::<u64>()) {
            let g = random_subgraph(n, f, 0.2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(&feature_mask(&g, 0.0, &mut rng), &g);
            prop_assert_eq!(&node_drop(&g, 0.0, &mut rng), &g);
        }
    }
}
