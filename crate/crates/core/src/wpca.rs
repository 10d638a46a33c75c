//! Whitened PCA: the unsupervised baseline and the initializer of every learned projection.

use nalgebra::{DMatrix, DVector};

use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::model::ProjectionMatrix;

/// Which eigenproblem to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenPath {
    /// Gram when there are fewer samples than dimensions, covariance otherwise.
    #[default]
    Auto,
    /// D x D sample covariance.
    Primal,
    /// N x N Gram matrix of the centered samples.
    Gram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WpcaResult {
    /// Row k is the k-th principal direction scaled by `(lambda_k + eps)^(-1/2)`.
    pub projection: ProjectionMatrix,
    pub mean: Vec<f64>,
    /// Top-d covariance eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
}

/// Fits WPCA keeping `d` components.
///
/// `epsilon` is relative to the largest eigenvalue: each component is scaled by
/// `(lambda_k + epsilon * lambda_max)^(-1/2)`.
pub fn fit_wpca(samples: &FeatureSet, d: usize, epsilon: f64) -> Result<WpcaResult> {
    fit_wpca_with(samples, d, epsilon, EigenPath::Auto)
}

pub fn fit_wpca_with(
    samples: &FeatureSet,
    d: usize,
    epsilon: f64,
    path: EigenPath,
) -> Result<WpcaResult> {
    let n = samples.len();
    let dim = samples.dim();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("WPCA needs at least 2 samples, got {n}")));
    }
    if d == 0 || d > dim.min(n - 1) {
        return Err(Error::InvalidArgument(format!(
            "WPCA dimension {d} outside 1..={} (D = {dim}, N = {n})",
            dim.min(n - 1)
        )));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    if let Some(pos) = samples.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(pos));
    }

    let mut mean = vec![0.0; dim];
    for row in samples.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |r, c| samples.row(r)[c] - mean[c]);
    let scale = 1.0 / (n as f64 - 1.0);

    let use_gram = match path {
        EigenPath::Auto => n < dim,
        EigenPath::Primal => false,
        EigenPath::Gram => true,
    };

    let (values, vectors) = if use_gram {
        gram_eigenpairs(&centered, scale, d)?
    } else {
        let cov = centered.tr_mul(&centered) * scale;
        top_eigenpairs(cov, d)?
    };

    let lambda_max = values[0].max(0.0);
    let eps = epsilon * lambda_max;
    let mut data = Vec::with_capacity(d * dim);
    for (k, (&lambda, u)) in values.iter().zip(&vectors).enumerate() {
        let denom = lambda + eps;
        if denom <= f64::EPSILON * lambda_max.max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidArgument(format!(
                "component {k} has zero variance; cannot whiten (use epsilon > 0 or smaller d)"
            )));
        }
        let s = denom.sqrt().recip();
        data.extend(u.iter().map(|v| v * s));
    }
    Ok(WpcaResult {
        projection: ProjectionMatrix::new(d, dim, data)?,
        mean,
        eigenvalues: values,
    })
}

/// Descending top-`d` eigenpairs of a symmetric matrix, with sign-normalized vectors.
fn top_eigenpairs(sym: DMatrix<f64>, d: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    // Stable sort keeps equal eigenvalues in solver order, which is deterministic.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = Vec::with_capacity(d);
    let mut vectors = Vec::with_capacity(d);
    for &k in order.iter().take(d) {
        values.push(eig.eigenvalues[k].max(0.0));
        let mut u: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        normalize_sign(&mut u);
        vectors.push(u);
    }
    Ok((values, vectors))
}

/// Eigenpairs of the covariance recovered from the N x N Gram matrix of centered samples.
fn gram_eigenpairs(
    centered: &DMatrix<f64>,
    scale: f64,
    d: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let gram = centered * centered.transpose() * scale;
    let (values, small) = top_eigenpairs(gram, d)?;
    let mut vectors = Vec::with_capacity(d);
    for (k, (lambda, v)) in values.iter().zip(small).enumerate() {
        if *lambda <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "component {k} has zero variance in the Gram spectrum"
            )));
        }
        let v = DVector::from_vec(v);
        let mut u = centered.tr_mul(&v);
        let norm = u.norm();
        u /= norm;
        let mut u: Vec<f64> = u.iter().copied().collect();
        normalize_sign(&mut u);
        vectors.push(u);
    }
    Ok((values, vectors))
}

/// Makes the first component of non-negligible magnitude positive.
fn normalize_sign(u: &mut [f64]) {
    let max = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if let Some(first) = u.iter().find(|v| v.abs() > 1e-8 * max) {
        if *first < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn projected_cov(res: &WpcaResult, fs: &FeatureSet) -> DMatrix<f64> {
        let d = res.projection.rows();
        let n = fs.len();
        let mut z = DMatrix::zeros(n, d);
        for (r, row) in fs.rows().enumerate() {
            let c: Vec<f64> = row.iter().zip(&res.mean).map(|(a, m)| a - m).collect();
            let p = res.projection.project(&c).unwrap();
            for k in 0..d {
                z[(r, k)] = p[k];
            }
        }
        z.tr_mul(&z) / (n as f64 - 1.0)
    }

    fn assert_identity(m: &DMatrix<f64>, tol: f64) {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((m[(r, c)] - want).abs() < tol, "({r},{c}) = {}", m[(r, c)]);
            }
        }
    }

    /// Four points whose centered sample covariance is exactly diag(a, b) (N - 1 = 3).
    fn axis_cross(a: f64, b: f64) -> FeatureSet {
        let sa = (1.5 * a).sqrt();
        let sb = (1.5 * b).sqrt();
        FeatureSet::from_rows(
            2,
            &[vec![sa, 0.0], vec![-sa, 0.0], vec![0.0, sb], vec![0.0, -sb]],
        )
        .unwrap()
    }

    #[test]
    fn white_input_stays_white() {
        let fs = axis_cross(1.0, 1.0);
        let res = fit_wpca(&fs, 2, 0.0).unwrap();
        assert_identity(&projected_cov(&res, &fs), 1e-6);
    }

    #[test]
    fn diagonal_covariance() {
        let fs = axis_cross(4.0, 1.0);
        let res = fit_wpca(&fs, 2, 0.0).unwrap();
        assert!((res.eigenvalues[0] - 4.0).abs() < 1e-9);
        assert!((res.eigenvalues[1] - 1.0).abs() < 1e-9);
        assert_identity(&projected_cov(&res, &fs), 1e-6);

        let top = fit_wpca(&fs, 1, 0.0).unwrap();
        let row = top.projection.row(0);
        // eigenvector e1 scaled by 4^(-1/2)
        assert!((row[0] - 0.5).abs() < 1e-9 && row[1].abs() < 1e-9);
        assert_identity(&projected_cov(&top, &fs), 1e-6);
    }

    #[test]
    fn argument_errors() {
        let fs = axis_cross(2.0, 1.0);
        assert!(fit_wpca(&fs, 0, 0.0).is_err());
        assert!(fit_wpca(&fs, 3, 0.0).is_err());
        assert!(fit_wpca(&fs, 1, -1.0).is_err());
        let one = FeatureSet::new(2, vec![1.0, 2.0]).unwrap();
        assert!(fit_wpca(&one, 1, 0.0).is_err());
    }

    #[test]
    fn primal_and_gram_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // N < D so the Gram path is natural; both paths must agree.
        let (n, dim) = (12, 30);
        let data: Vec<f64> = (0..n * dim)
            .map(|i| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * (1.0 + (i % dim) as f64 * 0.2)
            })
            .collect();
        let fs = FeatureSet::new(dim, data).unwrap();
        let p = fit_wpca_with(&fs, 6, 0.0, EigenPath::Primal).unwrap();
        let g = fit_wpca_with(&fs, 6, 0.0, EigenPath::Gram).unwrap();
        for (a, b) in p.eigenvalues.iter().zip(&g.eigenvalues) {
            assert!((a - b).abs() < 1e-8 * a.max(1.0));
        }
        for (a, b) in p.projection.as_slice().iter().zip(g.projection.as_slice()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_identity(&projected_cov(&g, &fs), 1e-6);
    }

    #[test]
    fn full_rank_projection_is_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dim = 5;
        let data: Vec<f64> = (0..40 * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fs = FeatureSet::new(dim, data).unwrap();
        let res = fit_wpca(&fs, dim, 0.0).unwrap();
        let l = DMatrix::from_row_slice(dim, dim, res.projection.as_slice());
        let pinv = l.clone().pseudo_inverse(1e-12).unwrap();
        assert_identity(&(l * pinv), 1e-6);
    }

    #[test]
    fn eigenvalues_descending_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..20 * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let fs = FeatureSet::new(8, data).unwrap();
        let res = fit_wpca(&fs, 8, 1e-5).unwrap();
        assert!(res.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(res.eigenvalues.iter().all(|&v| v >= 0.0));
    }
}
