//! Dense small-matrix kernels: products, thin SVD, soft thresholding,
//! polar projection, orthonormal camera sampling.
//!
//! Everything here is a pure function on immutable inputs and safe to call
//! concurrently. All arithmetic is f64.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat: data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "Mat::from_rows: ragged input");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// self * other
    pub fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "Mat::mul: inner dims");
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for c in 0..other.cols {
                    dst[c] += a * orow[c];
                }
            }
        }
        out
    }

    /// self^T * other
    pub fn mul_tn(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "Mat::mul_tn: inner dims");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = &self.data[k * self.cols..(k + 1) * self.cols];
            let brow = &other.data[k * other.cols..(k + 1) * other.cols];
            for r in 0..self.cols {
                let a = arow[r];
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for c in 0..other.cols {
                    dst[c] += a * brow[c];
                }
            }
        }
        out
    }

    /// self * other^T
    pub fn mul_nt(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "Mat::mul_nt: inner dims");
        let mut out = Mat::zeros(self.rows, other.rows);
        for r in 0..self.rows {
            let arow = self.row(r);
            for c in 0..other.rows {
                let brow = other.row(c);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += arow[k] * brow[k];
                }
                out.data[r * other.rows + c] = acc;
            }
        }
        out
    }

    /// self * v for a column vector v.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "Mat::matvec: dims");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for k in 0..self.cols {
                acc += row[k] * v[k];
            }
            out[r] = acc;
        }
        out
    }

    /// self^T * v.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "Mat::matvec_t: dims");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let a = v[r];
            for c in 0..self.cols {
                out[c] += row[c] * a;
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// self += s * other
    pub fn axpy(&mut self, s: f64, other: &Mat) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn frob_inner(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn col_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                means[c] += self.data[r * self.cols + c];
            }
        }
        let n = self.rows.max(1) as f64;
        for m in &mut means {
            *m /= n;
        }
        means
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Thin SVD of an m x n matrix, m >= n: `a = u * diag(sigma) * v^T`.
#[derive(Clone, Debug)]
pub struct SvdThin {
    /// m x r with orthonormal columns.
    pub u: Mat,
    /// Nonnegative, descending.
    pub sigma: Vec<f64>,
    /// n x r with orthonormal columns.
    pub v: Mat,
}

impl SvdThin {
    pub fn reconstruct(&self) -> Mat {
        let r = self.sigma.len();
        let mut us = self.u.clone();
        for c in 0..r {
            for row in 0..us.rows() {
                us[(row, c)] *= self.sigma[c];
            }
        }
        us.mul_nt(&self.v)
    }
}

/// sign(x) * max(|x| - tau, 0). Total for tau >= 0.
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Thin SVD for m >= n. The 3x2 case goes through a closed form on the
/// 2x2 Gram matrix; everything else runs one-sided Jacobi.
pub fn svd_thin(a: &Mat) -> Result<SvdThin> {
    if a.rows() < a.cols() {
        return Err(Error::shape(format!(
            "svd_thin requires rows >= cols, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if a.rows() == 3 && a.cols() == 2 {
        if let Some(svd) = svd_3x2_gram(a) {
            return Ok(svd);
        }
        // near-singular Gram matrix: fall through to the general routine
    }
    svd_jacobi(a)
}

/// Closed-form thin SVD of a 3x2 matrix via the eigen-decomposition of
/// M^T M. Returns None when the Gram matrix is too ill-conditioned for the
/// closed form to be trustworthy.
fn svd_3x2_gram(m: &Mat) -> Option<SvdThin> {
    let g00 = m[(0, 0)] * m[(0, 0)] + m[(1, 0)] * m[(1, 0)] + m[(2, 0)] * m[(2, 0)];
    let g11 = m[(0, 1)] * m[(0, 1)] + m[(1, 1)] * m[(1, 1)] + m[(2, 1)] * m[(2, 1)];
    let g01 = m[(0, 0)] * m[(0, 1)] + m[(1, 0)] * m[(1, 1)] + m[(2, 0)] * m[(2, 1)];

    let mean = 0.5 * (g00 + g11);
    let half_diff = 0.5 * (g00 - g11);
    let disc = (half_diff * half_diff + g01 * g01).sqrt();
    let l1 = (mean + disc).max(0.0);
    let l2 = (mean - disc).max(0.0);

    if l1 <= 0.0 || l2 < 1e-10 * l1 {
        return None;
    }

    let theta = 0.5 * f64::atan2(2.0 * g01, g00 - g11);
    let (s, c) = theta.sin_cos();
    // v1 = (c, s) pairs with l1, v2 = (-s, c) with l2.
    let v = Mat::from_rows(&[&[c, -s], &[s, c]]);
    let sigma = [l1.sqrt(), l2.sqrt()];

    let mut u = Mat::zeros(3, 2);
    for j in 0..2 {
        for r in 0..3 {
            u[(r, j)] = (m[(r, 0)] * v[(0, j)] + m[(r, 1)] * v[(1, j)]) / sigma[j];
        }
    }
    // One re-orthogonalization pass keeps u near machine-precision orthonormal.
    let dot = u[(0, 0)] * u[(0, 1)] + u[(1, 0)] * u[(1, 1)] + u[(2, 0)] * u[(2, 1)];
    let mut n2 = 0.0;
    for r in 0..3 {
        let x = u[(r, 1)] - dot * u[(r, 0)];
        u[(r, 1)] = x;
        n2 += x * x;
    }
    let n2 = n2.sqrt();
    if n2 == 0.0 {
        return None;
    }
    for r in 0..3 {
        u[(r, 1)] /= n2;
    }

    Some(SvdThin {
        u,
        sigma: sigma.to_vec(),
        v,
    })
}

/// One-sided Jacobi SVD for m >= n.
fn svd_jacobi(a: &Mat) -> Result<SvdThin> {
    let m = a.rows();
    let n = a.cols();
    let mut w = a.clone();
    let mut v = Mat::identity(n);

    // Rotations preserve the total Frobenius norm, so this floor is stable:
    // columns below it are numerically zero and rotating them never
    // converges (they stay perfectly correlated with their source column).
    let tiny2 = (1e-14 * a.frob_norm()).powi(2);

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for r in 0..m {
                    let wi = w[(r, i)];
                    let wj = w[(r, j)];
                    alpha += wi * wi;
                    beta += wj * wj;
                    gamma += wi * wj;
                }
                if alpha <= tiny2 || beta <= tiny2 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                max_off = max_off.max(off);
                if off <= 1e-15 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let wi = w[(r, i)];
                    let wj = w[(r, j)];
                    w[(r, i)] = c * wi - s * wj;
                    w[(r, j)] = s * wi + c * wj;
                }
                for r in 0..n {
                    let vi = v[(r, i)];
                    let vj = v[(r, j)];
                    v[(r, i)] = c * vi - s * vj;
                    v[(r, j)] = s * vi + c * vj;
                }
            }
        }
        if max_off <= 1e-15 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            rows: m,
            cols: n,
            input: a.data().to_vec(),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|r| w[(r, j)] * w[(r, j)]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Mat::zeros(m, n);
    let mut vv = Mat::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let sig_max = norms[order[0]];
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(norms[src]);
        for r in 0..n {
            vv[(r, dst)] = v[(r, src)];
        }
        if norms[src] > sig_max * 1e-13 && norms[src] > 0.0 {
            for r in 0..m {
                u[(r, dst)] = w[(r, src)] / norms[src];
            }
        }
    }
    // Columns associated with (near-)zero singular values get completed to an
    // orthonormal basis so the factor invariants hold on rank-deficient input.
    for j in 0..n {
        let norm2: f64 = (0..m).map(|r| u[(r, j)] * u[(r, j)]).sum();
        if norm2 > 0.5 {
            continue;
        }
        'basis: for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for k in 0..n {
                if k == j {
                    continue;
                }
                let dot: f64 = (0..m).map(|r| cand[r] * u[(r, k)]).sum();
                for r in 0..m {
                    cand[r] -= dot * u[(r, k)];
                }
            }
            let nn: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nn > 1e-3 {
                for r in 0..m {
                    u[(r, j)] = cand[r] / nn;
                }
                break 'basis;
            }
        }
    }

    Ok(SvdThin { u, sigma, v: vv })
}

/// Relative threshold below which a camera counts as rank deficient.
pub const DEGENERATE_CAMERA_RTOL: f64 = 1e-12;

/// Nearest matrix with orthonormal columns: `U V^T` from the thin SVD.
/// Errors on rank-deficient input.
pub fn polar_project(m: &Mat) -> Result<Mat> {
    if m.rows() != 3 || m.cols() != 2 {
        return Err(Error::shape(format!(
            "polar_project expects 3x2, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let svd = svd_thin(m)?;
    check_camera_rank(&svd.sigma)?;
    Ok(svd.u.mul_nt(&svd.v))
}

pub fn check_camera_rank(sigma: &[f64]) -> Result<()> {
    let sig_max = sigma[0];
    let sig_min = sigma[sigma.len() - 1];
    if sig_max <= 0.0 || sig_min < DEGENERATE_CAMERA_RTOL * sig_max {
        return Err(Error::DegenerateCamera {
            sigma_min: sig_min,
            sigma_max: sig_max,
        });
    }
    Ok(())
}

/// First two columns of a Haar-random rotation: orthonormalized Gaussian
/// 3x3 with a determinant sign fix. Deterministic per seed.
pub fn random_orthonormal_camera(seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_orthonormal_camera_from(&mut rng)
}

pub fn random_orthonormal_camera_from(rng: &mut impl Rng) -> Mat {
    loop {
        let mut g = [[0.0f64; 3]; 3];
        for col in &mut g {
            for x in col.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
        }
        // Modified Gram-Schmidt over columns g[0..3], with one
        // re-orthogonalization pass, and R-diagonal sign fix for Haar.
        let mut q = g;
        let mut ok = true;
        for j in 0..3 {
            for _pass in 0..2 {
                for k in 0..j {
                    let dot: f64 = (0..3).map(|r| q[j][r] * q[k][r]).sum();
                    for r in 0..3 {
                        q[j][r] -= dot * q[k][r];
                    }
                }
            }
            let norm: f64 = q[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            // sign fix: diag(R) > 0
            let sign = {
                let dot: f64 = (0..3).map(|r| q[j][r] * g[j][r]).sum();
                if dot < 0.0 {
                    -1.0
                } else {
                    1.0
                }
            };
            for x in &mut q[j] {
                *x = *x / norm * sign;
            }
        }
        if !ok {
            continue;
        }
        let det = q[0][0] * (q[1][1] * q[2][2] - q[1][2] * q[2][1])
            - q[1][0] * (q[0][1] * q[2][2] - q[0][2] * q[2][1])
            + q[2][0] * (q[0][1] * q[1][2] - q[0][2] * q[1][1]);
        if det < 0.0 {
            for x in &mut q[2] {
                *x = -*x;
            }
        }
        return Mat::from_fn(3, 2, |r, c| q[c][r]);
    }
}

/// Largest singular value by power iteration on A^T A. Deterministic.
pub fn spectral_norm(a: &Mat, iters: usize) -> f64 {
    let n = a.cols();
    if n == 0 || a.rows() == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let av = a.matvec(&v);
        let atav = a.matvec_t(&av);
        let norm: f64 = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        for (x, y) in v.iter_mut().zip(&atav) {
            *x = y / norm;
        }
    }
    lambda.sqrt()
}
