use std::io::Write;

use crate::error::{Error, Result};
use crate::nn::{embed, ModelParams};
use crate::sampling::{AccountSubgraph, Dataset};
use crate::tensor::{matmul, Tensor};

const POWER_ITERS: usize = 500;

/// Top principal directions of the rows of `x` by power iteration with deflation.
/// Each direction is signed so its largest-magnitude component is positive.
pub fn principal_axes(x: &Tensor, count: usize) -> Result<Vec<Vec<f64>>> {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("PCA of an empty table".into()));
    }
    let centered = center(x);
    let mut cov = matmul(&centered, true, &centered, false)?;
    cov.scale(1.0 / n as f64);
    let mut axes = Vec::with_capacity(count);
    for a in 0..count.min(d) {
        // deterministic start that is unlikely to be orthogonal to the leading direction
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i * 7 + a * 3) % 11) as f64 / 11.0).collect();
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let mut w = vec![0.0; d];
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = cov.row(i).iter().zip(&v).map(|(c, x)| c * x).sum();
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            for x in &mut w {
                *x /= norm;
            }
            lambda = norm;
            v = w;
        }
        let big = v
            .iter()
            .cloned()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        for i in 0..d {
            for j in 0..d {
                let c = cov.get(i, j) - lambda * v[i] * v[j];
                cov.set(i, j, c);
            }
        }
        axes.push(v);
    }
    Ok(axes)
}

fn center(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut out = x.clone();
    for i in 0..n {
        for (v, m) in out.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// Coordinates of the centred rows of `x` on the first two principal axes.
pub fn pca_2d(x: &Tensor) -> Result<Tensor> {
    let axes = principal_axes(x, 2)?;
    let c = center(x);
    let mut out = Tensor::zeros(&[x.rows(), 2]);
    for i in 0..x.rows() {
        for (k, axis) in axes.iter().enumerate() {
            out.set(i, k, c.row(i).iter().zip(axis).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

/// TSV with account, label, the pooled embedding and optionally two PCA columns.
pub fn export_embeddings<W: Write>(params: &ModelParams, d: &Dataset, with_pca: bool, mut out: W) -> Result<()> {
    let subs: Vec<&AccountSubgraph> = d.instances.iter().map(|i| &i.subgraph).collect();
    let mut rows = Vec::with_capacity(subs.len());
    for chunk in subs.chunks(256) {
        let h = embed(chunk, params)?;
        for i in 0..h.rows() {
            rows.push(h.row(i).to_vec());
        }
    }
    let dim = params.config.hidden;
    let h = Tensor::from_rows(&rows)?;
    let pca = if with_pca && !rows.is_empty() {
        Some(pca_2d(&h)?)
    } else {
        None
    };
    let mut header = vec!["account".to_string(), "label".to_string()];
    header.extend((0..dim).map(|j| format!("h{j}")));
    if pca.is_some() {
        header.push("pca1".into());
        header.push("pca2".into());
    }
    writeln!(out, "{}", header.join("\t"))?;
    for (i, inst) in d.instances.iter().enumerate() {
        let label = inst.subgraph.label.map_or_else(String::new, |l| l.to_string());
        write!(out, "{}\t{}", inst.account, label)?;
        for v in &rows[i] {
            write!(out, "\t{v}")?;
        }
        if let Some(p) = &pca {
            write!(out, "\t{}\t{}", p.get(i, 0), p.get(i, 1))?;
        }
        writeln!(out)?;
    }
    Ok(())
}
