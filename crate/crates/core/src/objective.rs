//! Contrastive, classification and joint losses, with analytic gradients.
//!
//! The contrastive loss follows the literal form: for anchor `z1[i]` the denominator sums
//! over the negatives `z2[j], j != i` only, and only view-1 rows act as anchors. Because the
//! positive term is absent from the denominator the loss is unbounded below and routinely
//! negative. [`ContrastForm::Standard`] gives the conventional symmetric NT-Xent instead.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Norms are clamped below at this value before normalising.
pub const NORM_FLOOR: f64 = 1e-12;

static ZERO_NORM_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastForm {
    /// Positive excluded from the denominator, view-1 anchors only.
    #[default]
    Literal,
    /// SimCLR NT-Xent: positive included, all 2n rows anchor.
    Standard,
}

pub fn cosine_similarity(z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("lengths {} and {}", z1.len(), z2.len()),
        ));
    }
    let n1 = z1.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n2 = z2.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = z1.iter().zip(z2).map(|(a, b)| a * b).sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

/// Row-normalised copy of `z` together with each row's clamped norm.
fn normalize_rows(z: &Tensor) -> (Tensor, Vec<f64>) {
    let mut u = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    let mut clamped = false;
    for i in 0..z.rows() {
        let row = u.row_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = if norm < NORM_FLOOR {
            clamped = true;
            NORM_FLOOR
        } else {
            norm
        };
        for x in row.iter_mut() {
            *x /= r;
        }
        norms.push(norm);
    }
    if clamped && !ZERO_NORM_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("near-zero embedding in contrastive loss; norm clamped at {NORM_FLOOR}");
    }
    (u, norms)
}

/// Back-propagates `du` (gradient w.r.t. normalised rows) to the raw rows.
fn normalize_rows_backward(u: &Tensor, norms: &[f64], du: &Tensor) -> Tensor {
    let mut dz = du.clone();
    for (i, &norm) in norms.iter().enumerate() {
        let urow = u.row(i);
        let row = dz.row_mut(i);
        if norm < NORM_FLOOR {
            for x in row.iter_mut() {
                *x /= NORM_FLOOR;
            }
        } else {
            let proj: f64 = urow.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            for (x, &uk) in row.iter_mut().zip(urow) {
                *x = (*x - uk * proj) / norm;
            }
        }
    }
    dz
}

/// Log-sum-exp over `xs` skipping index `skip`, plus the matching softmax weights (zero at `skip`).
fn lse_excluding(xs: &[f64], skip: usize) -> (f64, Vec<f64>) {
    let max = xs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(j, &x)| if j == skip { 0.0 } else { (x - max).exp() })
        .collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    (max + sum.ln(), w)
}

fn check_views(z1: &Tensor, z2: &Tensor, tau: f64) -> Result<()> {
    if !z1.is_matrix() || z1.shape() != z2.shape() {
        return Err(Error::shape(
            "ntxent_loss",
            format!("views {:?} and {:?}", z1.shape(), z2.shape()),
        ));
    }
    if z1.rows() < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least two rows (no negatives otherwise)".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Literal loss from the scaled similarity matrix `s[i][j] = sim(z1_i, z2_j) / tau`,
/// with its gradient w.r.t. `s`.
fn literal_from_logits(s: &Tensor) -> (f64, Tensor) {
    let n = s.rows();
    let mut loss = 0.0;
    let mut ds = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let (lse, w) = lse_excluding(s.row(i), i);
        loss += lse - s.get(i, i);
        let row = ds.row_mut(i);
        for (d, wj) in row.iter_mut().zip(&w) {
            *d = wj / n as f64;
        }
        row[i] = -1.0 / n as f64;
    }
    (loss / n as f64, ds)
}

pub fn ntxent_loss(z1: &Tensor, z2: &Tensor, tau: f64, form: ContrastForm) -> Result<f64> {
    ntxent_loss_with_grad(z1, z2, tau, form).map(|(l, _, _)| l)
}

/// Loss value plus gradients with respect to `z1` and `z2`.
pub fn ntxent_loss_with_grad(z1: &Tensor, z2: &Tensor, tau: f64, form: ContrastForm) -> Result<(f64, Tensor, Tensor)> {
    check_views(z1, z2, tau)?;
    let n = z1.rows();
    let (u1, n1) = normalize_rows(z1);
    let (u2, n2) = normalize_rows(z2);
    match form {
        ContrastForm::Literal => {
            let mut s = matmul(&u1, false, &u2, true)?;
            s.scale(1.0 / tau);
            let (loss, mut ds) = literal_from_logits(&s);
            ds.scale(1.0 / tau);
            let du1 = matmul(&ds, false, &u2, false)?;
            let du2 = matmul(&ds, true, &u1, false)?;
            Ok((
                loss,
                normalize_rows_backward(&u1, &n1, &du1),
                normalize_rows_backward(&u2, &n2, &du2),
            ))
        }
        ContrastForm::Standard => {
            let m = 2 * n;
            let mut u = Tensor::zeros(&[m, z1.cols()]);
            u.data_mut()[..u1.len()].copy_from_slice(u1.data());
            u.data_mut()[u1.len()..].copy_from_slice(u2.data());
            let mut s = matmul(&u, false, &u, true)?;
            s.scale(1.0 / tau);
            let mut loss = 0.0;
            let mut ds = Tensor::zeros(&[m, m]);
            for k in 0..m {
                let pos = (k + n) % m;
                let (lse, w) = lse_excluding(s.row(k), k);
                loss += lse - s.get(k, pos);
                let row = ds.row_mut(k);
                for (d, wj) in row.iter_mut().zip(&w) {
                    *d = wj / m as f64;
                }
                row[pos] -= 1.0 / m as f64;
            }
            ds.scale(1.0 / tau);
            let sym = {
                let mut t = ds.transpose();
                t.add_assign(&ds);
                t
            };
            let du = matmul(&sym, false, &u, false)?;
            let half = u1.len();
            let du1 = Tensor::from_vec(u1.shape(), du.data()[..half].to_vec())?;
            let du2 = Tensor::from_vec(u2.shape(), du.data()[half..].to_vec())?;
            Ok((
                loss / m as f64,
                normalize_rows_backward(&u1, &n1, &du1),
                normalize_rows_backward(&u2, &n2, &du2),
            ))
        }
    }
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_grad(logits, labels).map(|(l, _)| l)
}

/// Mean cross-entropy over rows and its gradient w.r.t. the logits.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if !logits.is_matrix() || logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} for {} labels", logits.shape(), labels.len()),
        ));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cross entropy over an empty batch".into()));
    }
    let c = logits.cols();
    let mut grad = Tensor::zeros(&[n, c]);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::InvalidArgument(format!("label {y} outside [0, {c})")));
        }
        let row = logits.row(i);
        let (lse, w) = lse_excluding(row, usize::MAX);
        loss += lse - row[y];
        let g = grad.row_mut(i);
        for (gj, wj) in g.iter_mut().zip(&w) {
            *gj = wj / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_self: f64,
    pub l_pred: f64,
    pub l_total: f64,
    pub l_d: f64,
    pub l_aug1: f64,
    pub l_aug2: f64,
}

/// `l_pred` averages the three classification terms; `l_total = l_pred + lambda * l_self`.
pub fn joint_loss(l_d: f64, l_aug1: f64, l_aug2: f64, l_self: f64, lambda: f64) -> Result<LossReport> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let l_pred = (l_d + l_aug1 + l_aug2) / 3.0;
    Ok(LossReport {
        l_self,
        l_pred,
        l_total: l_pred + lambda * l_self,
        l_d,
        l_aug1,
        l_aug2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let s = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn two_row_closed_forms() {
        // positives identical, negatives orthogonal: L_i = -1/tau for both anchors
        let z1 = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let z2 = z1.clone();
        let l = ntxent_loss(&z1, &z2, 1.0, ContrastForm::Literal).unwrap();
        assert!((l + 1.0).abs() < 1e-12);
        let l = ntxent_loss(&z1, &z2, 0.5, ContrastForm::Literal).unwrap();
        assert!((l + 2.0).abs() < 1e-12);
    }

    #[test]
    fn ntxent_argument_errors() {
        let one = t(&[vec![1.0, 0.0]]);
        assert!(ntxent_loss(&one, &one, 1.0, ContrastForm::Literal).is_err());
        let two = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(ntxent_loss(&two, &two, 0.0, ContrastForm::Literal).is_err());
        assert!(ntxent_loss(&two, &one, 1.0, ContrastForm::Literal).is_err());
    }

    #[test]
    fn standard_form_is_non_negative_and_differs() {
        let z1 = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let lit = ntxent_loss(&z1, &z1, 1.0, ContrastForm::Literal).unwrap();
        let std = ntxent_loss(&z1, &z1, 1.0, ContrastForm::Standard).unwrap();
        assert!(std > 0.0);
        assert!(lit < 0.0);
    }

    #[test]
    fn zero_rows_do_not_produce_nan() {
        let z1 = t(&[vec![0.0, 0.0], vec![0.0, 1.0]]);
        let (l, g1, g2) = ntxent_loss_with_grad(&z1, &z1, 0.5, ContrastForm::Literal).unwrap();
        assert!(l.is_finite() && g1.all_finite() && g2.all_finite());
    }

    #[test]
    fn cross_entropy_cases() {
        let l = cross_entropy(&t(&[vec![0.0, 0.0]]), &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = cross_entropy(&t(&[vec![1000.0, 0.0]]), &[0]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-300);
        assert!(cross_entropy(&t(&[vec![0.0, 0.0]]), &[2]).is_err());
        assert!(cross_entropy(&t(&[vec![0.0, 0.0]]), &[0, 1]).is_err());
    }

    #[test]
    fn joint_loss_cases() {
        let r = joint_loss(0.9, 0.9, 0.9, -1.0, 0.2).unwrap();
        assert!((r.l_total - 0.7).abs() < 1e-12);
        let r = joint_loss(0.3, 0.6, 0.9, -4.0, 0.0).unwrap();
        assert_eq!(r.l_total, r.l_pred);
        assert!(joint_loss(0.1, 0.1, 0.1, 0.0, -0.1).is_err());
    }

    fn random_views(seed: u64, n: usize, d: usize) -> (Tensor, Tensor) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut z1 = Tensor::zeros(&[n, d]);
        let mut z2 = Tensor::zeros(&[n, d]);
        for x in z1.data_mut().iter_mut().chain(z2.data_mut().iter_mut()) {
            *x = rng.gen_range(-1.0..1.0);
        }
        (z1, z2)
    }

    fn finite_difference_check(form: ContrastForm, seed: u64) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..6);
        let d = rng.gen_range(1..6);
        let mut z1 = Tensor::zeros(&[n, d]);
        let mut z2 = Tensor::zeros(&[n, d]);
        for x in z1.data_mut().iter_mut().chain(z2.data_mut().iter_mut()) {
            *x = rng.gen_range(-1.0..1.0);
        }
        let tau = rng.gen_range(0.2..1.5);
        let (_, g1, g2) = ntxent_loss_with_grad(&z1, &z2, tau, form).unwrap();
        let h = 1e-6;
        for (which, grad) in [(0, &g1), (1, &g2)] {
            for idx in 0..n * d {
                let eval = |delta: f64| {
                    let (mut a, mut b) = (z1.clone(), z2.clone());
                    if which == 0 {
                        a.data_mut()[idx] += delta;
                    } else {
                        b.data_mut()[idx] += delta;
                    }
                    ntxent_loss(&a, &b, tau, form).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grad.data()[idx];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{form:?} fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        for seed in 0..10 {
            finite_difference_check(ContrastForm::Literal, seed);
            finite_difference_check(ContrastForm::Standard, seed);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = t(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.5]]);
        let labels = [2, 0];
        let (_, g) = cross_entropy_with_grad(&logits, &labels).unwrap();
        for idx in 0..6 {
            let mut a = logits.clone();
            let mut b = logits.clone();
            a.data_mut()[idx] += 1e-6;
            b.data_mut()[idx] -= 1e-6;
            let fd = (cross_entropy(&a, &labels).unwrap() - cross_entropy(&b, &labels).unwrap()) / 2e-6;
            assert!((fd - g.data()[idx]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn cross_entropy_is_non_negative(vals in proptest::collection::vec(-50.0f64..50.0, 6), y in 0usize..3) {
            let logits = Tensor::from_vec(&[2, 3], vals).unwrap();
            prop_assert!(cross_entropy(&logits, &[y, (y + 1) % 3]).unwrap() >= 0.0);
        }

        #[test]
        fn raising_a_positive_similarity_lowers_the_loss(
            vals in proptest::collection::vec(-2.0f64..2.0, 16), i in 0usize..4, delta in 1e-3f64..1.0
        ) {
            let s0 = Tensor::from_vec(&[4, 4], vals).unwrap();
            let mut s1 = s0.clone();
            s1.set(i, i, s0.get(i, i) + delta);
            prop_assert!(literal_from_logits(&s1).0 < literal_from_logits(&s0).0);
        }

        #[test]
        fn positive_scale_invariance(seed in any::<u64>(), a in 0.01f64..100.0, b in 0.01f64..100.0) {
            let (z1, z2) = random_views(seed, 5, 8);
            let mut z1s = z1.clone();
            z1s.scale(a);
            let mut z2s = z2.clone();
            z2s.scale(b);
            for form in [ContrastForm::Literal, ContrastForm::Standard] {
                let l0 = ntxent_loss(&z1, &z2, 0.5, form).unwrap();
                let l1 = ntxent_loss(&z1s, &z2s, 0.5, form).unwrap();
                prop_assert!((l0 - l1).abs() < 1e-12);
            }
        }

        #[test]
        fn anchor_permutation_equivariance(seed in any::<u64>(), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
            let (z1, z2) = random_views(seed, 6, 4);
            let l0 = ntxent_loss(&z1, &z2, 0.5, ContrastForm::Literal).unwrap();
            let l1 = ntxent_loss(&z1.select_rows(&perm), &z2.select_rows(&perm), 0.5, ContrastForm::Literal).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-12);
        }

        #[test]
        fn literal_matches_naive_loop(seed in any::<u64>(), tau in 0.1f64..2.0) {
            let (z1, z2) = random_views(seed, 5, 8);
            let got = ntxent_loss(&z1, &z2, tau, ContrastForm::Literal).unwrap();
            let mut want = 0.0;
            for i in 0..5 {
                let mut denom = 0.0;
                for j in 0..5 {
                    if j != i {
                        denom += (cosine_similarity(z1.row(i), z2.row(j)).unwrap() / tau).exp();
                    }
                }
                let num = (cosine_similarity(z1.row(i), z2.row(i)).unwrap() / tau).exp();
                want += -(num / denom).ln();
            }
            prop_assert!((got - want / 5.0).abs() < 1e-9);
        }
    }
}
