//! Evaluation metrics: Fréchet distance between Gaussian fits, mean
//! pairwise diversity, integer-grid mode counting, sprite mode coverage and
//! a PCA projection for scatter plots.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sprites::classify_background_mode;
use crate::tensor::Tensor;

/// Eigen-decomposition of a symmetric `n x n` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues in descending order and the matching
/// unit eigenvectors as rows of an `n x n` matrix.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::shape("symmetric_eigen", &[a.len()], &[n, n]));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (r, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors[r * n + k] = v[k * n + i];
        }
    }
    Ok((values, vectors))
}

/// Sample mean and unbiased covariance of the rows of `x [n, d]`.
pub fn mean_and_covariance(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.ndim() != 2 || x.rows() < 2 {
        return Err(Error::invalid(format!("covariance needs at least 2 rows of a matrix, got {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.row_len());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..d {
            let da = r[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let c = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = c;
            cov[b * d + a] = c;
        }
    }
    Ok((mean, cov))
}

fn sym_sqrt(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = symmetric_eigen(a, n)?;
    let mut out = vec![0.0; n * n];
    for (k, &l) in vals.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        let u = &vecs[k * n..(k + 1) * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += s * u[i] * u[j];
            }
        }
    }
    Ok(out)
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

const ROUNDOFF_FACTOR: f64 = 256.0;

/// Squared Fréchet distance between Gaussian fits of two sample sets.
pub fn frechet_squared(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.row_len() != b.row_len() {
        return Err(Error::shape("frechet_gaussian", a.shape(), b.shape()));
    }
    let d = a.row_len();
    if d == 0 || a.rows() <= d || b.rows() <= d {
        return Err(Error::invalid(format!(
            "frechet_gaussian needs more samples than dimensions: {} and {} rows for d = {d}",
            a.rows(),
            b.rows()
        )));
    }
    let (m1, s1) = mean_and_covariance(a)?;
    let (m2, s2) = mean_and_covariance(b)?;
    let root1 = sym_sqrt(&s1, d)?;
    let mut inner = matmul_sq(&matmul_sq(&root1, &s2, d), &root1, d);
    // Symmetrize roundoff before the eigen solve.
    for i in 0..d {
        for j in i + 1..d {
            let avg = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = avg;
            inner[j * d + i] = avg;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, d)?;
    let tr_sqrt: f64 = vals.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = m1.iter().zip(&m2).map(|(x, y)| (x - y).powi(2)).sum();
    let tr: f64 = (0..d).map(|i| s1[i * d + i] + s2[i * d + i]).sum();
    let fd2 = mean_term + tr - 2.0 * tr_sqrt;
    // The trace difference cancels catastrophically for equal
    // distributions; values inside its roundoff band are zero.
    let noise = ROUNDOFF_FACTOR * f64::EPSILON * (tr + mean_term);
    Ok(if fd2 <= noise { 0.0 } else { fd2 })
}

/// Fréchet distance (the square root of [`frechet_squared`]).
pub fn frechet_gaussian(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(frechet_squared(a, b)?.sqrt())
}

/// Mean Euclidean distance over all unordered sample pairs of each
/// condition, averaged over conditions.
pub fn mean_pairwise_distance(samples: &[Tensor]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("mean_pairwise_distance needs at least one condition"));
    }
    let mut total = 0.0;
    for s in samples {
        let n = s.rows();
        if n < 2 {
            return Err(Error::invalid("mean_pairwise_distance needs N >= 2 samples per condition"));
        }
        let mut acc = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                acc += s.row(i).iter().zip(s.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            }
        }
        total += acc / (n * (n - 1) / 2) as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Grid cell of a 2D point: coordinates rounded half away from zero and
/// clamped to `[0, 100]`.
pub fn grid_cell(p: &[f64]) -> (i64, i64) {
    let cell = |v: f64| v.round().clamp(0.0, 100.0) as i64;
    (cell(p[0]), cell(p[1]))
}

/// Number of distinct integer grid cells occupied by `samples [K, 2]`.
pub fn count_modes(samples: &Tensor) -> Result<usize> {
    if samples.ndim() != 2 || samples.row_len() != 2 {
        return Err(Error::shape("count_modes", samples.shape(), &[0, 2]));
    }
    Ok((0..samples.rows()).map(|i| grid_cell(samples.row(i))).collect::<BTreeSet<_>>().len())
}

/// Mean number of distinct labels per condition.
pub fn coverage_from_labels(labels: &[Vec<usize>]) -> Result<f64> {
    if labels.is_empty() || labels.iter().any(|l| l.len() < 2) {
        return Err(Error::invalid("mode_coverage needs >= 2 samples for every condition"));
    }
    let distinct: usize = labels.iter().map(|l| l.iter().collect::<BTreeSet<_>>().len()).sum();
    Ok(distinct as f64 / labels.len() as f64)
}

/// Background mode labels of a stack of images `[N, 3, H, W]`.
pub fn classify_batch(images: &Tensor, mask: &Tensor) -> Result<Vec<usize>> {
    if images.ndim() != 4 {
        return Err(Error::shape("classify_batch", images.shape(), mask.shape()));
    }
    let per = images.len() / images.shape()[0].max(1);
    images
        .data()
        .chunks(per)
        .map(|img| classify_background_mode(&Tensor::new(images.shape()[1..].to_vec(), img.to_vec())?, mask))
        .collect()
}

/// Mean number of distinct background modes among each condition's samples.
pub fn mode_coverage(generated: &[Tensor], mask: &Tensor) -> Result<f64> {
    let labels = generated.iter().map(|g| classify_batch(g, mask)).collect::<Result<Vec<_>>>()?;
    coverage_from_labels(&labels)
}

/// Principal component fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit directions of length `d`, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component (unbiased).
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits the top `k` directions of `features [n, d]`. Uses the `n x n`
    /// Gram matrix when `d > n`. Each direction is signed so that its
    /// largest-magnitude loading is positive.
    pub fn fit(features: &Tensor, k: usize) -> Result<Self> {
        if features.ndim() != 2 || features.rows() < 2 {
            return Err(Error::invalid("pca needs a matrix with at least 2 rows"));
        }
        let (n, d) = (features.rows(), features.row_len());
        if k == 0 || k > d.min(n) {
            return Err(Error::invalid(format!("pca: k = {k} out of range for {n} x {d}")));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v / n as f64);
        }
        let centered: Vec<Vec<f64>> = (0..n)
            .map(|i| features.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        let denom = (n - 1) as f64;
        let mut components = Vec::with_capacity(k);
        let mut variances = Vec::with_capacity(k);
        if d <= n {
            let (_, cov) = mean_and_covariance(features)?;
            let (vals, vecs) = symmetric_eigen(&cov, d)?;
            for c in 0..k {
                variances.push(vals[c].max(0.0));
                components.push(vecs[c * d..(c + 1) * d].to_vec());
            }
        } else {
            let mut gram = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>() / denom;
                    gram[i * n + j] = v;
                    gram[j * n + i] = v;
                }
            }
            let (vals, vecs) = symmetric_eigen(&gram, n)?;
            for c in 0..k {
                let u = &vecs[c * n..(c + 1) * n];
                let mut dir = vec![0.0; d];
                for (row, &w) in centered.iter().zip(u) {
                    dir.iter_mut().zip(row).for_each(|(x, r)| *x += w * r);
                }
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    dir.iter_mut().for_each(|x| *x /= norm);
                }
                variances.push(vals[c].max(0.0));
                components.push(dir);
            }
        }
        for dir in &mut components {
            let lead = dir.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if lead < 0.0 {
                dir.iter_mut().for_each(|x| *x = -*x);
            }
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    /// Projects rows of `x [n, d]` onto the fitted directions.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.ndim() != 2 || x.row_len() != d {
            return Err(Error::shape("pca transform", x.shape(), &[0, d]));
        }
        let k = self.components.len();
        let mut out = Vec::with_capacity(x.rows() * k);
        for i in 0..x.rows() {
            let centered: Vec<f64> = x.row(i).iter().zip(&self.mean).map(|(v, m)| v - m).collect();
            out.extend(self.components.iter().map(|c| c.iter().zip(&centered).map(|(a, b)| a * b).sum::<f64>()));
        }
        Tensor::new([x.rows(), k], out)
    }
}

/// Projects `features [n, d]` onto its own top `k` principal directions.
pub fn pca_project(features: &Tensor, k: usize) -> Result<Tensor> {
    Pca::fit(features, k)?.transform(features)
}

pub fn pca_project_2d(features: &Tensor) -> Result<Tensor> {
    if features.rows() <= 2 {
        return Err(Error::invalid("pca_project_2d needs n > 2"));
    }
    pca_project(features, 2)
}

/// Metric summary for one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    /// Mean over sampling rounds.
    pub frechet: f64,
    pub pairwise: f64,
    /// Distinct grid cells (synthetic only).
    pub modes: Option<usize>,
    /// Mean distinct background modes per condition (sprites only).
    pub mode_coverage: Option<f64>,
    pub frechet_rounds: Vec<f64>,
    pub pairwise_rounds: Vec<f64>,
    pub modes_rounds: Vec<usize>,
    pub mode_coverage_rounds: Vec<f64>,
    /// Fraction of sprite samples whose masked pixels equal the foreground.
    pub foreground_preserved: Option<f64>,
}

#[cfg(test)]
mod tests;
