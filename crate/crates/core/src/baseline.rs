//! Hand-crafted account statistics and a logistic-regression classifier over them.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{csv_io, InteractionRecord, Wei};

pub const FEATURE_NAMES: [&str; 16] = [
    "active_days",
    "total_received",
    "num_received_tx",
    "inter_acct_received",
    "total_output",
    "num_output_tx",
    "inter_acct_output",
    "avg_received",
    "avg_received_day",
    "avg_received_tx_day",
    "avg_output",
    "avg_output_day",
    "avg_output_tx_day",
    "times_contract_called",
    "times_contract_called_day",
    "num_contract_called",
];

const SECONDS_PER_DAY: u64 = 86_400;

/// Amounts are in ether.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManualFeatures {
    pub active_days: f64,
    pub total_received: f64,
    pub num_received_tx: f64,
    pub inter_acct_received: f64,
    pub total_output: f64,
    pub num_output_tx: f64,
    pub inter_acct_output: f64,
    pub avg_received: f64,
    pub avg_received_day: f64,
    pub avg_received_tx_day: f64,
    pub avg_output: f64,
    pub avg_output_day: f64,
    pub avg_output_tx_day: f64,
    pub times_contract_called: f64,
    pub times_contract_called_day: f64,
    pub num_contract_called: f64,
}

impl ManualFeatures {
    pub fn to_array(&self) -> [f64; 16] {
        [
            self.active_days,
            self.total_received,
            self.num_received_tx,
            self.inter_acct_received,
            self.total_output,
            self.num_output_tx,
            self.inter_acct_output,
            self.avg_received,
            self.avg_received_day,
            self.avg_received_tx_day,
            self.avg_output,
            self.avg_output_day,
            self.avg_output_tx_day,
            self.times_contract_called,
            self.times_contract_called_day,
            self.num_contract_called,
        ]
    }
}

#[derive(Default)]
struct Tally<'a> {
    days: HashSet<u64>,
    received: Wei,
    received_n: u64,
    senders: HashSet<&'a str>,
    output: Wei,
    output_n: u64,
    receivers: HashSet<&'a str>,
    calls: u64,
    contracts: HashSet<&'a str>,
}

impl<'a> Tally<'a> {
    fn observe(&mut self, me: &str, r: &'a InteractionRecord) -> Result<()> {
        let (sent, got) = (r.from_account == me, r.to_account == me);
        if !sent && !got {
            return Ok(());
        }
        self.days.insert(r.timestamp / SECONDS_PER_DAY);
        if r.is_transaction() {
            if got {
                self.received = self.received.checked_add(r.value).ok_or(Error::AmountOverflow)?;
                self.received_n += 1;
                if !sent {
                    self.senders.insert(&r.from_account);
                }
            }
            if sent {
                self.output = self.output.checked_add(r.value).ok_or(Error::AmountOverflow)?;
                self.output_n += 1;
                if !got {
                    self.receivers.insert(&r.to_account);
                }
            }
        } else if sent {
            self.calls += 1;
            self.contracts.insert(&r.to_account);
        }
        Ok(())
    }

    fn finish(&self) -> ManualFeatures {
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        let days = self.days.len() as f64;
        let received = self.received.as_ether_f64();
        let output = self.output.as_ether_f64();
        let (rn, on) = (self.received_n as f64, self.output_n as f64);
        let calls = self.calls as f64;
        ManualFeatures {
            active_days: days,
            total_received: received,
            num_received_tx: rn,
            inter_acct_received: self.senders.len() as f64,
            total_output: output,
            num_output_tx: on,
            inter_acct_output: self.receivers.len() as f64,
            avg_received: ratio(received, rn),
            avg_received_day: ratio(received, days),
            avg_received_tx_day: ratio(rn, days),
            avg_output: ratio(output, on),
            avg_output_day: ratio(output, days),
            avg_output_tx_day: ratio(on, days),
            times_contract_called: calls,
            times_contract_called_day: ratio(calls, days),
            num_contract_called: self.contracts.len() as f64,
        }
    }
}

/// Statistics of `account`; all zero when it never appears.
///
/// A self-transfer counts as both received and spent but adds no counterparty.
pub fn compute_manual_features(records: &[InteractionRecord], account: &str) -> Result<ManualFeatures> {
    let mut t = Tally::default();
    for r in records {
        t.observe(account, r)?;
    }
    Ok(t.finish())
}

/// Features for many accounts in one pass over the records.
pub fn compute_manual_features_many(records: &[InteractionRecord], accounts: &[String]) -> Result<Vec<ManualFeatures>> {
    let mut tallies: HashMap<&str, Tally> = accounts.iter().map(|a| (a.as_str(), Tally::default())).collect();
    for r in records {
        if let Some(t) = tallies.get_mut(r.from_account.as_str()) {
            t.observe(&r.from_account, r)?;
        }
        if r.to_account != r.from_account {
            if let Some(t) = tallies.get_mut(r.to_account.as_str()) {
                t.observe(&r.to_account, r)?;
            }
        }
    }
    Ok(accounts.iter().map(|a| tallies[a.as_str()].finish()).collect())
}

pub fn write_feature_csv<W: Write>(out: W, accounts: &[String], features: &[ManualFeatures]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["account"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header).map_err(csv_io)?;
    for (a, f) in accounts.iter().zip(features) {
        let mut row = vec![a.clone()];
        row.extend(f.to_array().iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column affine standardisation fitted on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = x.first() else {
            return Err(Error::InvalidArgument("cannot standardise zero rows".into()));
        };
        let d = first.len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        // constant columns are centred but not scaled
        let scale = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    pub l2: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            max_iters: 2000,
            tol: 1e-10,
        }
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(s))` without overflow.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

/// Mean logistic loss plus `l2/2 * |w|^2` (intercept unpenalised) and its gradient.
pub fn logistic_objective(x: &[Vec<f64>], y: &[usize], w: &[f64], b: f64, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let s = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        let t = label as f64;
        loss += softplus(s) - t * s;
        let r = sigmoid(s) - t;
        for (g, a) in gw.iter_mut().zip(row) {
            *g += r * a / n;
        }
        gb += r / n;
    }
    loss /= n;
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    for (g, v) in gw.iter_mut().zip(w) {
        *g += l2 * v;
    }
    (loss, gw, gb)
}

/// Gradient descent with Armijo backtracking; the objective never increases between iterates.
pub fn logistic_fit(x: &[Vec<f64>], y: &[usize], opts: &LogisticOptions) -> Result<LogisticModel> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} rows with {} labels",
            x.len(),
            y.len()
        )));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("logistic_fit", "ragged design matrix"));
    }
    if let Some(&bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not binary")));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::InvalidArgument("logistic regression needs both classes".into()));
    }
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut step = 1.0;
    let (mut loss, mut gw, mut gb) = logistic_objective(x, y, &w, b, opts.l2);
    for _ in 0..opts.max_iters {
        let gnorm2 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        if gnorm2.sqrt() < opts.tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(v, g)| v - step * g).collect();
            let nb = b - step * gb;
            let (nl, ngw, ngb) = logistic_objective(x, y, &nw, nb, opts.l2);
            if nl <= loss - 0.5 * step * gnorm2 {
                w = nw;
                b = nb;
                loss = nl;
                gw = ngw;
                gb = ngb;
                accepted = true;
                step *= 2.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(LogisticModel { weights: w, bias: b })
}

pub fn logistic_predict(model: &LogisticModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    x.iter()
        .map(|row| {
            if row.len() != model.weights.len() {
                return Err(Error::shape(
                    "logistic_predict",
                    format!("{} features, model has {}", row.len(), model.weights.len()),
                ));
            }
            Ok(sigmoid(
                model.bias + row.iter().zip(&model.weights).map(|(a, c)| a * c).sum::<f64>(),
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(ts: u64, from: &str, to: &str, to_ca: bool, func: Option<&str>, ether: u128) -> InteractionRecord {
        InteractionRecord {
            block_number: ts,
            timestamp: ts,
            from_account: from.into(),
            to_account: to.into(),
            from_is_contract: false,
            to_is_contract: to_ca,
            calling_function: func.map(Into::into),
            value: Wei(ether * 1_000_000_000_000_000_000),
        }
    }

    #[test]
    fn worked_example() {
        let day = SECONDS_PER_DAY;
        let records = vec![
            rec(10, "X", "A", false, None, 3),
            rec(20, "Y", "A", false, None, 5),
            rec(day + 5, "A", "X", false, None, 2),
            rec(day + 9, "A", "C", true, Some("f"), 0),
        ];
        let f = compute_manual_features(&records, "A").unwrap();
        let want = [
            2.0, 8.0, 2.0, 2.0, 2.0, 1.0, 1.0, 4.0, 4.0, 1.0, 2.0, 1.0, 0.5, 1.0, 0.5, 1.0,
        ];
        assert_eq!(f.to_array(), want);
        assert_eq!(
            compute_manual_features(&records, "nobody").unwrap(),
            ManualFeatures::default()
        );
        let many = compute_manual_features_many(&records, &["A".into(), "X".into()]).unwrap();
        assert_eq!(many[0], f);
        assert_eq!(many[1], compute_manual_features(&records, "X").unwrap());
    }

    fn random_ledger(rng: &mut ChaCha8Rng, n: usize) -> Vec<InteractionRecord> {
        let eoas = ["a", "b", "c", "d", "e"];
        let cas = ["C1", "C2"];
        (0..n)
            .map(|_| {
                let from = eoas[rng.gen_range(0..eoas.len())];
                let ts = rng.gen_range(0..10 * SECONDS_PER_DAY);
                if rng.gen_bool(0.3) {
                    rec(ts, from, cas[rng.gen_range(0..2)], true, Some("f"), rng.gen_range(0..3))
                } else {
                    rec(
                        ts,
                        from,
                        eoas[rng.gen_range(0..eoas.len())],
                        false,
                        None,
                        rng.gen_range(0..100),
                    )
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn feature_identities(seed in any::<u64>(), n in 0usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records = random_ledger(&mut rng, n);
            for a in ["a", "b", "c", "C1"] {
                let f = compute_manual_features(&records, a).unwrap();
                prop_assert!(f.to_array().iter().all(|&v| v >= 0.0));
                if f.num_received_tx > 0.0 {
                    prop_assert!((f.avg_received * f.num_received_tx - f.total_received).abs() < 1e-9 * (1.0 + f.total_received));
                }
                if f.num_output_tx > 0.0 {
                    prop_assert!((f.avg_output * f.num_output_tx - f.total_output).abs() < 1e-9 * (1.0 + f.total_output));
                }
                if f.active_days == 0.0 {
                    prop_assert_eq!(f, ManualFeatures::default());
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_half() {
        let m = LogisticModel {
            weights: vec![0.0; 3],
            bias: 0.0,
        };
        assert_eq!(logistic_predict(&m, &[vec![1.0, 2.0, 3.0]]).unwrap(), vec![0.5]);
        let m = LogisticModel {
            weights: vec![100.0],
            bias: 0.0,
        };
        assert!(logistic_predict(&m, &[vec![10.0]]).unwrap()[0] > 1.0 - 1e-12);
        assert!(logistic_predict(&m, &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn separable_pair_is_fit() {
        let x = vec![vec![-1.0], vec![1.0]];
        let m = logistic_fit(&x, &[0, 1], &LogisticOptions::default()).unwrap();
        let p = logistic_predict(&m, &x).unwrap();
        assert!(p[0] < 0.5 && p[1] > 0.5);
        assert!(logistic_fit(&x, &[1, 1], &LogisticOptions::default()).is_err());
    }

    /// Newton's method on the same objective, used as a reference optimum.
    fn newton(x: &[Vec<f64>], y: &[usize], l2: f64) -> (Vec<f64>, f64) {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut theta = nalgebra::DVector::<f64>::zeros(d + 1);
        for _ in 0..50 {
            let w: Vec<f64> = theta.iter().take(d).cloned().collect();
            let b = theta[d];
            let (_, gw, gb) = logistic_objective(x, y, &w, b, l2);
            let mut g = nalgebra::DVector::from_vec(gw);
            g = g.push(gb);
            let mut h = nalgebra::DMatrix::<f64>::zeros(d + 1, d + 1);
            for row in x {
                let s = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let p = sigmoid(s);
                let mut z = row.clone();
                z.push(1.0);
                for i in 0..=d {
                    for j in 0..=d {
                        h[(i, j)] += p * (1.0 - p) * z[i] * z[j] / n;
                    }
                }
            }
            for i in 0..d {
                h[(i, i)] += l2;
            }
            theta -= h.lu().solve(&g).unwrap();
        }
        (theta.iter().take(d).cloned().collect(), theta[d])
    }

    #[test]
    fn matches_newton_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<usize> = x
            .iter()
            .map(|r| usize::from(r[0] - 0.5 * r[1] + rng.gen_range(-1.0..1.0) > 0.0))
            .collect();
        let opts = LogisticOptions {
            l2: 0.05,
            ..Default::default()
        };
        let m = logistic_fit(&x, &y, &opts).unwrap();
        let (nw, nb) = newton(&x, &y, opts.l2);
        let got = logistic_objective(&x, &y, &m.weights, m.bias, opts.l2).0;
        let best = logistic_objective(&x, &y, &nw, nb, opts.l2).0;
        assert!((got - best).abs() < 1e-6, "{got} vs {best}");
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..2000)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..2)).collect();
        let m = logistic_fit(&x[..1000], &y[..1000], &LogisticOptions::default()).unwrap();
        let p = logistic_predict(&m, &x[1000..]).unwrap();
        let acc = p
            .iter()
            .zip(&y[1000..])
            .filter(|(p, &t)| usize::from(**p > 0.5) == t)
            .count() as f64
            / 1000.0;
        assert!((acc - 0.5).abs() < 0.06, "{acc}");
    }

    #[test]
    fn standardizer_uses_train_statistics() {
        let train = vec![vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(&train).unwrap();
        assert_eq!(s.transform(&train), vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(s.transform(&[vec![5.0, 6.0]]), vec![vec![3.0, 1.0]]);
    }
}
