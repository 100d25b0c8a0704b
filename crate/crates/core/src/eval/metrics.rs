//! Distribution, retrieval and trajectory metrics over embeddings and motions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PmgError, Result};
use crate::motion::{forward_kinematics, MotionSequence};

/// Covariance regularizer added to sample covariances before the FID square root.
pub const FID_EPS: f64 = 1e-6;

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

/// Square root of a symmetric positive semidefinite matrix; negative eigenvalues are
/// clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Trace of `(A^{1/2} B A^{1/2})^{1/2}`, which equals `Tr((AB)^{1/2})` for PSD inputs.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let sa = psd_sqrt(a);
    let inner = &sa * b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Mean and unbiased covariance of the rows of `x`.
pub fn moments(x: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(PmgError::InsufficientSamples(format!("need at least 2 rows, got {n}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Frechet distance between Gaussians with the given moments.
pub fn fid_from_moments(mu_a: &Array1<f64>, cov_a: &Array2<f64>, mu_b: &Array1<f64>, cov_b: &Array2<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.dim() != (d, d) || cov_b.dim() != (d, d) {
        return Err(PmgError::Shape(format!(
            "moment dimensions disagree: {d} vs {} / {:?} / {:?}",
            mu_b.len(),
            cov_a.dim(),
            cov_b.dim()
        )));
    }
    let diff = mu_a - mu_b;
    let ca = to_dmatrix(cov_a);
    let cb = to_dmatrix(cov_b);
    let tr = ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
    Ok(diff.dot(&diff) + tr)
}

/// FID between two embedding sets (rows are samples).
pub fn fid(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(PmgError::Shape(format!("embedding widths {} vs {}", a.ncols(), b.ncols())));
    }
    let (mu_a, mut cov_a) = moments(a)?;
    let (mu_b, mut cov_b) = moments(b)?;
    for i in 0..a.ncols() {
        cov_a[[i, i]] += FID_EPS;
        cov_b[[i, i]] += FID_EPS;
    }
    fid_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Retrieval precision: motions are shuffled into pools of `pool_size`; within a pool
/// each motion ranks every pool text by Euclidean distance. Returns the Top-1..Top-`top_k`
/// hit rates averaged over `repeats` shuffles.
pub fn r_precision(
    motion: &Array2<f64>,
    text: &Array2<f64>,
    pool_size: usize,
    top_k: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = motion.nrows();
    if text.dim() != motion.dim() {
        return Err(PmgError::Shape("motion and text embeddings must pair up".into()));
    }
    if pool_size == 0 || n < pool_size {
        return Err(PmgError::InsufficientSamples(format!(
            "retrieval pool of {pool_size} needs at least that many samples, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; top_k];
    let mut total = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..repeats.max(1) {
        order.shuffle(&mut rng);
        for pool in order.chunks_exact(pool_size) {
            for &i in pool {
                let own = dist(motion.row(i), text.row(i));
                let rank = 1 + pool
                    .iter()
                    .filter(|&&j| j != i && dist(motion.row(i), text.row(j)) < own)
                    .count();
                for (k, h) in hits.iter_mut().enumerate() {
                    if rank <= k + 1 {
                        *h += 1;
                    }
                }
                total += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / total as f64).collect())
}

/// Mean distance between matched motion and text embeddings.
pub fn mm_dist(motion: &Array2<f64>, text: &Array2<f64>) -> Result<f64> {
    if text.dim() != motion.dim() || motion.nrows() == 0 {
        return Err(PmgError::Shape("motion and text embeddings must pair up".into()));
    }
    Ok(motion.rows().into_iter().zip(text.rows()).map(|(m, t)| dist(m, t)).sum::<f64>() / motion.nrows() as f64)
}

/// Mean distance over `pairs` disjoint random pairs of rows.
pub fn diversity(emb: &Array2<f64>, pairs: usize, seed: u64) -> Result<f64> {
    if pairs == 0 || emb.nrows() < 2 * pairs {
        return Err(PmgError::InsufficientSamples(format!(
            "{pairs} disjoint pairs need {} samples, got {}",
            2 * pairs,
            emb.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, emb.nrows(), 2 * pairs).into_vec();
    Ok(idx.chunks_exact(2).map(|p| dist(emb.row(p[0]), emb.row(p[1]))).sum::<f64>() / pairs as f64)
}

/// For each group (repeated generations of one text), the mean distance over all
/// pairs; averaged over groups.
pub fn multimodality(groups: &[Array2<f64>]) -> Result<f64> {
    if groups.is_empty() {
        return Err(PmgError::InsufficientSamples("no generation groups".into()));
    }
    let mut acc = 0.0;
    for g in groups {
        let r = g.nrows();
        if r < 2 {
            return Err(PmgError::InsufficientSamples("each text needs at least 2 generations".into()));
        }
        let mut s = 0.0;
        for i in 0..r {
            for j in i + 1..r {
                s += dist(g.row(i), g.row(j));
            }
        }
        acc += s / (r * (r - 1) / 2) as f64;
    }
    Ok(acc / groups.len() as f64)
}

/// `(AVE, APE)` over the selected joints. APE is the mean L2 position error over
/// frames and joints. AVE is the mean over joints of the L2 norm of the difference of
/// per-coordinate temporal (unbiased) variances.
pub fn ave_ape(generated: &MotionSequence, truth: &MotionSequence, joints: &[usize]) -> Result<(f64, f64)> {
    if generated.len() != truth.len() {
        return Err(PmgError::Shape(format!(
            "length mismatch: {} vs {}",
            generated.len(),
            truth.len()
        )));
    }
    if generated.skeleton != truth.skeleton {
        return Err(PmgError::InvalidSkeleton("skeletons differ".into()));
    }
    let jn = truth.skeleton.num_joints();
    if joints.is_empty() || joints.iter().any(|&j| j >= jn) {
        return Err(PmgError::schema("joints", format!("joint indices must lie in 0..{jn}")));
    }
    let pg = forward_kinematics(generated);
    let pt = forward_kinematics(truth);
    let n = truth.len();
    let mut ape = 0.0;
    for f in 0..n {
        for &j in joints {
            let d: f64 = (0..3).map(|c| (pg[[f, j, c]] - pt[[f, j, c]]).powi(2)).sum();
            ape += d.sqrt();
        }
    }
    ape /= (n * joints.len()) as f64;
    let denom = if n > 1 { n as f64 - 1.0 } else { 1.0 };
    let var = |p: &ndarray::Array3<f64>, j: usize, c: usize| {
        let mean = (0..n).map(|f| p[[f, j, c]]).sum::<f64>() / n as f64;
        (0..n).map(|f| (p[[f, j, c]] - mean).powi(2)).sum::<f64>() / denom
    };
    let mut ave = 0.0;
    for &j in joints {
        let d: f64 = (0..3).map(|c| (var(&pg, j, c) - var(&pt, j, c)).powi(2)).sum();
        ave += d.sqrt();
    }
    ave /= joints.len() as f64;
    Ok((ave, ape))
}

/// Normalizes each row to unit L2 norm.
pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    out
}

pub fn mean_vector(x: &Array2<f64>) -> DVector<f64> {
    let m = x.mean_axis(Axis(0)).expect("nonempty");
    DVector::from_vec(m.to_vec())
}
