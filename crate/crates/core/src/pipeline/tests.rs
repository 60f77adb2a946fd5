use super::*;
use crate::graph::{FeatureOptions, LwAig};
use crate::nn::predict_logits;
use crate::objective::cross_entropy;
use crate::sampling::{AccountClass, AccountSubgraph, Dataset};
use crate::synth::{generate_ledger, SynthProfile};

fn planted_dataset(per_class: usize, seed: u64) -> Dataset {
    let mut p = SynthProfile::planted();
    p.commons = 1500;
    for c in &mut p.classes {
        c.accounts = per_class;
    }
    let ledger = generate_ledger(&p, seed).unwrap();
    let g = LwAig::from_records(&ledger.records, FeatureOptions::default()).unwrap();
    build_dataset(
        &g,
        &ledger.labels,
        AccountClass::PhishHack,
        TrainConfig::default().sampling(),
        seed,
        false,
    )
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        hidden: 32,
        ..Default::default()
    }
}

#[test]
fn supervised_only_run_overfits_ten_subgraphs() {
    let d = planted_dataset(5, 1);
    assert_eq!(d.len(), 10);
    let cfg = TrainConfig {
        lambda: 0.0,
        view1: "nd:0".parse().unwrap(),
        view2: "nd:0".parse().unwrap(),
        ..Default::default()
    };
    let out = train(&d, &cfg).unwrap();
    let subs: Vec<&AccountSubgraph> = d.instances.iter().map(|i| &i.subgraph).collect();
    let ce = cross_entropy(&predict_logits(&subs, &out.params).unwrap(), &d.labels()).unwrap();
    assert!(ce < 0.05, "final training CE {ce}");
}

#[test]
fn identical_seeds_give_identical_history() {
    let d = planted_dataset(6, 2);
    let cfg = quick(5);
    let a = train(&d, &cfg).unwrap();
    let b = train(&d, &cfg).unwrap();
    let bits = |o: &TrainOutcome| {
        o.history
            .iter()
            .flat_map(|h| [h.report.l_total.to_bits(), h.report.l_self.to_bits()])
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.params, b.params);
    let c = train(&d, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn full_defaults_descend_on_twenty_instances() {
    let d = planted_dataset(10, 3);
    assert_eq!(d.len(), 20);
    let out = train(&d, &TrainConfig::default()).unwrap();
    let curve = out.epoch_losses();
    assert_eq!(curve.len(), 200);
    assert!(
        curve[199] < curve[0],
        "epoch 1 {} vs epoch 200 {}",
        curve[0],
        curve[199]
    );
    for b in &out.history {
        let r = b.report;
        assert!((r.l_total - (r.l_pred + 0.2 * r.l_self)).abs() < 1e-12);
    }
}

#[test]
fn single_instance_batch_skips_contrast() {
    let d = planted_dataset(4, 4);
    let cfg = TrainConfig {
        batch_size: 7,
        ..quick(1)
    };
    let out = train(&d, &cfg).unwrap();
    let last = out.history.last().unwrap();
    assert_eq!(last.size, 1);
    assert_eq!(last.report.l_self, 0.0);
}

#[test]
fn training_rejects_one_class() {
    let d = planted_dataset(4, 5);
    let ones: Vec<usize> = (0..d.len()).filter(|&i| d.instances[i].label() == 1).collect();
    assert!(train(&d.subset(&ones), &quick(1)).is_err());
}

#[test]
fn embeddings_export_one_row_per_instance() {
    let d = planted_dataset(4, 6);
    let out = train(&d, &quick(2)).unwrap();
    let mut buf = Vec::new();
    export_embeddings(&out.params, &d, true, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), d.len() + 1);
    assert_eq!(lines[0].split('\t').count(), 2 + 32 + 2);
}

#[test]
fn frozen_views_match_live_views_in_the_first_epoch_only() {
    let d = planted_dataset(5, 7);
    let live = quick(3);
    let frozen = TrainConfig {
        freeze_views: true,
        ..live.clone()
    };
    let a = train(&d, &live).unwrap().history;
    let b = train(&d, &frozen).unwrap().history;
    let first = |h: &[BatchLoss]| {
        h.iter()
            .filter(|x| x.epoch == 0)
            .map(|x| x.report.l_total.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(first(&a), first(&b));
    assert_ne!(a.last().unwrap().report.l_total, b.last().unwrap().report.l_total);
}
