//! Post-training analysis exports: codebook usage statistics and
//! principal-component projections of the finest-scale encoder
//! features. Everything here emits raw CSV; plotting happens elsewhere.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::BoundParams;
use crate::pipeline::ModelBundle;
use crate::tensor::Tensor;
use crate::tokenizer;
use crate::vq;

// ---------------------------------------------------------------------------
// Codebook usage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct UsageReport {
    pub counts: Vec<u64>,
    pub total_tokens: u64,
    pub used_codewords: usize,
    /// H(counts) / log2(K), in [0, 1].
    pub normalized_entropy: f64,
}

/// Histogram of hard assignments over a whole image set.
pub fn usage_over_images(bundle: &ModelBundle, images: &[Tensor]) -> Result<UsageReport> {
    let k = bundle.config.tokenizer.codebook_size;
    let mut all = Vec::new();
    for img in images {
        let (idx, _) = crate::pipeline::token_indices(bundle, img)?;
        all.extend(idx);
    }
    let (counts, normalized_entropy) = vq::usage_histogram(&all, k)?;
    let total_tokens = counts.iter().sum();
    let used_codewords = counts.iter().filter(|&&c| c > 0).count();
    Ok(UsageReport {
        counts,
        total_tokens,
        used_codewords,
        normalized_entropy,
    })
}

pub const USAGE_CSV_HEADER: &str = "codeword,count,frequency";

pub fn usage_csv(report: &UsageReport) -> String {
    let total = report.total_tokens.max(1) as f64;
    let mut out = String::from(USAGE_CSV_HEADER);
    out.push('\n');
    for (i, &c) in report.counts.iter().enumerate() {
        out.push_str(&format!("{},{},{:.6}\n", i, c, c as f64 / total));
    }
    out
}

pub const USAGE_SUMMARY_CSV_HEADER: &str = "total_tokens,used_codewords,normalized_entropy";

pub fn usage_summary_csv(report: &UsageReport) -> String {
    format!(
        "{}\n{},{},{:.6}\n",
        USAGE_SUMMARY_CSV_HEADER, report.total_tokens, report.used_codewords,
        report.normalized_entropy
    )
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

fn off_diagonal_norm(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for p in 0..n {
        for q in 0..n {
            if p != q {
                s += a[p][q] * a[p][q];
            }
        }
    }
    s.sqrt()
}

/// Eigenvalues and orthonormal eigenvectors (as columns) of a symmetric
/// matrix, by cyclic Jacobi rotations. Fine for the small covariance
/// matrices this module sees.
pub fn jacobi_eigen(matrix: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = matrix.len();
    if n == 0 || matrix.iter().any(|r| r.len() != n) {
        return Err(Error::shape("jacobi: matrix must be square and nonempty"));
    }
    for p in 0..n {
        for q in 0..n {
            if (matrix[p][q] - matrix[q][p]).abs() > 1e-9 * (1.0 + matrix[p][q].abs()) {
                return Err(Error::contract("jacobi: matrix is not symmetric"));
            }
        }
    }
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        if off_diagonal_norm(&a) < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[p][i];
                    let aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for row in v.iter_mut() {
                    let vip = row[p];
                    let viq = row[q];
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    Ok((eigenvalues, v))
}

// ---------------------------------------------------------------------------
// PCA of encoder features
// ---------------------------------------------------------------------------

/// A fitted principal-component basis: the mean and the top `components`
/// directions, eigenvalue-descending, each sign-fixed so its largest
/// coordinate is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

pub fn fit_pca(rows: &[Vec<f64>], components: usize) -> Result<Pca> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::contract("pca: need at least two samples"));
    }
    let c = rows[0].len();
    if components == 0 || components > c {
        return Err(Error::contract(format!(
            "pca: {components} components from {c}-dim features"
        )));
    }
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::shape("pca: ragged feature rows"));
    }
    let mut mean = vec![0.0; c];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; c]; c];
    for r in rows {
        for i in 0..c {
            let di = r[i] - mean[i];
            for j in i..c {
                cov[i][j] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i][j] /= (n - 1) as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let (eigenvalues, vectors) = jacobi_eigen(&cov)?;
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| eigenvalues[j].partial_cmp(&eigenvalues[i]).unwrap().then(i.cmp(&j)));
    let mut out_vecs = Vec::with_capacity(components);
    let mut out_vals = Vec::with_capacity(components);
    for &col in order.iter().take(components) {
        let mut vcol: Vec<f64> = (0..c).map(|row| vectors[row][col]).collect();
        let pivot = vcol
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if vcol[pivot] < 0.0 {
            for x in vcol.iter_mut() {
                *x = -*x;
            }
        }
        out_vecs.push(vcol);
        out_vals.push(eigenvalues[col]);
    }
    Ok(Pca {
        mean,
        components: out_vecs,
        eigenvalues: out_vals,
    })
}

pub fn project(pca: &Pca, row: &[f64]) -> Vec<f64> {
    pca.components
        .iter()
        .map(|comp| {
            comp.iter()
                .zip(row.iter().zip(&pca.mean))
                .map(|(w, (x, m))| w * (x - m))
                .sum()
        })
        .collect()
}

/// Continuous encoder features at the finest scale, one row per spatial
/// position, plus that scale's grid shape.
pub fn finest_scale_features(
    bundle: &ModelBundle,
    image: &Tensor,
) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected [3, H, W] image, got {s:?}")));
    }
    let tok = &bundle.config.tokenizer;
    let (ph, pw) = tokenizer::padded_dims(s[1], s[2], bundle.footprint());
    let batched = image.reshaped(&[1, 3, s[1], s[2]])?;
    let padded = tokenizer::pad_reflect(&batched, ph, pw)?;
    let mut g = Graph::new();
    let bp = BoundParams::bind_frozen(&mut g, &bundle.params);
    let x = g.constant(padded);
    let latents = tokenizer::encode(&mut g, x, tok, &bp)?;
    let finest = *latents
        .scales
        .last()
        .ok_or_else(|| Error::contract("encoder produced no scales"))?;
    let feat = g.value(finest);
    let fs = feat.shape();
    let (c, h, w) = (fs[1], fs[2], fs[3]);
    let data = feat.data();
    let mut rows = Vec::with_capacity(h * w);
    for r in 0..h {
        for col in 0..w {
            let mut vecrow = Vec::with_capacity(c);
            for ch in 0..c {
                vecrow.push(data[(ch * h + r) * w + col]);
            }
            rows.push(vecrow);
        }
    }
    Ok((rows, h, w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    pub image_id: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major over the grid, `components` values per position.
    pub values: Vec<Vec<f64>>,
}

pub const PCA_CSV_HEADER: &str = "image_id,row,col,pc1,pc2,pc3";

pub fn pca_csv(projections: &[PcaProjection]) -> String {
    let mut out = String::from(PCA_CSV_HEADER);
    out.push('\n');
    for p in projections {
        for r in 0..p.rows {
            for c in 0..p.cols {
                let v = &p.values[r * p.cols + c];
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6}\n",
                    p.image_id, r, c, v[0], v[1], v[2]
                ));
            }
        }
    }
    out
}

/// Fit one corpus-wide PCA on finest-scale features and project every
/// image onto the top three components.
pub fn pca_over_images(
    bundle: &ModelBundle,
    images: &[(String, Tensor)],
) -> Result<Vec<PcaProjection>> {
    if images.is_empty() {
        return Err(Error::contract("pca: empty image set"));
    }
    let mut per_image = Vec::with_capacity(images.len());
    let mut pooled = Vec::new();
    for (id, img) in images {
        let (rows, h, w) = finest_scale_features(bundle, img)?;
        pooled.extend(rows.iter().cloned());
        per_image.push((id.clone(), rows, h, w));
    }
    let pca = fit_pca(&pooled, 3)?;
    Ok(per_image
        .into_iter()
        .map(|(image_id, rows, h, w)| PcaProjection {
            image_id,
            rows: h,
            cols: w,
            values: rows.iter().map(|r| project(&pca, r)).collect(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
