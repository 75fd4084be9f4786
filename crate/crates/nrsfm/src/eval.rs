//! Alignment and error metrics, the rigid rank-3 baseline, and the
//! noise-robustness / coherence-correlation studies.

use crate::data::{add_noise, TrackSet};
use crate::error::{Error, Result};
use crate::network::{forward, LayerSizes, ModelParams};
use crate::numerics::{svd_thin, Mat};
use crate::train::{select_checkpoint, train, CheckpointRecord, TrainConfig};
use rayon::prelude::*;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_frame_errors: Vec<f64>,
    pub mean_error: f64,
    /// True when per-frame orthogonal alignment was applied.
    pub aligned: bool,
    pub noise_ratio: f64,
    pub coherence: f64,
}

/// Orthogonal R (det +-1 allowed) minimizing |s_est R - s_gt|_F, via the
/// Procrustes construction on the 3x3 cross-covariance.
pub fn align_orthonormal(s_est: &Mat, s_gt: &Mat) -> Result<Mat> {
    if s_est.rows() != s_gt.rows() || s_est.cols() != 3 || s_gt.cols() != 3 {
        return Err(Error::shape(format!(
            "align_orthonormal: {}x{} vs {}x{}",
            s_est.rows(),
            s_est.cols(),
            s_gt.rows(),
            s_gt.cols()
        )));
    }
    if s_gt.frob_norm() == 0.0 {
        return Err(Error::DegenerateAlignment);
    }
    if s_est == s_gt {
        return Ok(Mat::identity(3));
    }
    let h = s_est.mul_tn(s_gt);
    let svd = svd_thin(&h)?;
    Ok(svd.u.mul_nt(&svd.v))
}

/// Per-frame e_f = |S_est R_f - S_gt|_F / |S_gt|_F with R_f from
/// `align_orthonormal`; the report mean is the arithmetic mean over frames.
/// With a visibility mask, only visible rows enter the alignment and the
/// norms.
pub fn normalized_3d_error(
    estimates: &[Mat],
    ground_truth: &[Mat],
    visibility: Option<&[Vec<bool>]>,
) -> Result<EvalReport> {
    if estimates.len() != ground_truth.len() {
        return Err(Error::shape(format!(
            "normalized_3d_error: {} estimates vs {} ground-truth frames",
            estimates.len(),
            ground_truth.len()
        )));
    }
    if let Some(vis) = visibility {
        if vis.len() != estimates.len() {
            return Err(Error::shape(format!(
                "normalized_3d_error: {} masks vs {} frames",
                vis.len(),
                estimates.len()
            )));
        }
    }
    let per_frame_errors: Vec<f64> = estimates
        .par_iter()
        .zip(ground_truth.par_iter())
        .enumerate()
        .map(|(f, (est, gt))| -> Result<f64> {
            let (est, gt) = match visibility {
                Some(vis) => {
                    let rows: Vec<usize> = (0..gt.rows()).filter(|&r| vis[f][r]).collect();
                    let take = |m: &Mat| {
                        Mat::from_fn(rows.len(), 3, |r, c| m[(rows[r], c)])
                    };
                    (take(est), take(gt))
                }
                None => (est.clone(), gt.clone()),
            };
            let r = align_orthonormal(&est, &gt)?;
            Ok(est.mul(&r).sub(&gt).frob_norm() / gt.frob_norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_error = per_frame_errors.iter().sum::<f64>() / per_frame_errors.len().max(1) as f64;
    Ok(EvalReport {
        per_frame_errors,
        mean_error,
        aligned: true,
        noise_ratio: 0.0,
        coherence: 0.0,
    })
}

/// Run the model over every frame and collect the estimated shapes. A
/// frame whose camera degenerates gets the zero shape, which scores the
/// worst-case normalized error of 1 instead of aborting the evaluation.
pub fn estimate_shapes(params: &ModelParams, dataset: &TrackSet) -> Result<Vec<Mat>> {
    dataset
        .frames
        .par_iter()
        .map(|frame| match forward(&frame.points, params) {
            Ok(trace) => Ok(trace.shape),
            Err(Error::DegenerateCamera { .. }) => Ok(Mat::zeros(dataset.p, 3)),
            Err(e) => Err(e),
        })
        .collect()
}

/// Normalized 3D error of a model against the set's ground truth.
pub fn evaluate_params(params: &ModelParams, dataset: &TrackSet) -> Result<EvalReport> {
    let gts = dataset
        .ground_truth
        .as_ref()
        .ok_or(Error::MissingGroundTruth)?;
    let estimates = estimate_shapes(params, dataset)?;
    let gt_shapes: Vec<Mat> = gts.iter().map(|g| g.shape.clone()).collect();
    let vis: Vec<Vec<bool>> = dataset.frames.iter().map(|f| f.visibility.clone()).collect();
    let fully_visible = vis.iter().all(|v| v.iter().all(|&b| b));
    normalized_3d_error(
        &estimates,
        &gt_shapes,
        if fully_visible { None } else { Some(&vis) },
    )
}

/// Rigid rank-3 factorization baseline: stack all frames, truncate to rank
/// 3, then upgrade the affine ambiguity with the orthonormal-row metric
/// constraints. Every frame gets the same rigid shape estimate.
pub fn rigid_rank3_baseline(dataset: &TrackSet) -> Result<EvalReport> {
    let gts = dataset
        .ground_truth
        .as_ref()
        .ok_or(Error::MissingGroundTruth)?;
    let f = dataset.len();
    if f == 0 {
        return Err(Error::Config("empty dataset".into()));
    }
    let p = dataset.p;
    // measurement matrix: 2F x p, frame f contributes rows (2f, 2f+1) = W_f^T
    let meas = Mat::from_fn(2 * f, p, |r, c| dataset.frames[r / 2].points[(c, r % 2)]);
    // rank-3 truncation via the thin SVD of meas^T (p x 2F needs p >= ... SVD
    // wants rows >= cols, use whichever orientation is tall)
    let (motion, shape_t) = {
        if 2 * f >= p {
            let svd = svd_thin(&meas)?;
            // meas ~ U3 S3 V3^T: motion = U3 S3 (2F x 3), shape^T = V3^T (3 x p)
            let mut u3 = Mat::from_fn(2 * f, 3, |r, c| svd.u[(r, c)]);
            for c in 0..3 {
                for r in 0..2 * f {
                    u3[(r, c)] *= svd.sigma[c];
                }
            }
            let v3 = Mat::from_fn(p, 3, |r, c| svd.v[(r, c)]);
            (u3, v3.transpose())
        } else {
            let svd = svd_thin(&meas.transpose())?;
            let mut v3 = Mat::from_fn(2 * f, 3, |r, c| svd.v[(r, c)]);
            for c in 0..3 {
                for r in 0..2 * f {
                    v3[(r, c)] *= svd.sigma[c];
                }
            }
            let u3 = Mat::from_fn(p, 3, |r, c| svd.u[(r, c)]);
            (v3, u3.transpose())
        }
    };
    // metric upgrade: find symmetric Q with rows of motion*chol(Q)
    // orthonormal in pairs: a_i Q a_i^T = 1, a_{2k} Q a_{2k+1}^T = 0.
    // Linear least squares in the 6 free entries of Q.
    let mut ata = Mat::zeros(6, 6);
    let mut atb = vec![0.0; 6];
    let idx = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
    let row_coeffs = |a: &[f64], b: &[f64]| -> [f64; 6] {
        let mut c = [0.0; 6];
        for (t, &(i, j)) in idx.iter().enumerate() {
            c[t] = if i == j {
                a[i] * b[i]
            } else {
                a[i] * b[j] + a[j] * b[i]
            };
        }
        c
    };
    let mut add_eq = |coeffs: [f64; 6], rhs: f64| {
        for i in 0..6 {
            for j in 0..6 {
                ata[(i, j)] += coeffs[i] * coeffs[j];
            }
            atb[i] += coeffs[i] * rhs;
        }
    };
    for k in 0..f {
        let a = motion.row(2 * k).to_vec();
        let b = motion.row(2 * k + 1).to_vec();
        add_eq(row_coeffs(&a, &a), 1.0);
        add_eq(row_coeffs(&b, &b), 1.0);
        add_eq(row_coeffs(&a, &b), 0.0);
    }
    let qvec = solve_spd_6(&ata, &atb)?;
    let mut q = Mat::zeros(3, 3);
    for (t, &(i, j)) in idx.iter().enumerate() {
        q[(i, j)] = qvec[t];
        q[(j, i)] = qvec[t];
    }
    // Q = C C^T via eigen-decomposition with clamped eigenvalues
    let c = psd_factor(&q)?;
    // S_rigid^T = C^{-1} shape_t; equivalently shape_rigid = (C^{-1} B)^T.
    let c_inv = invert_3x3(&c)?;
    let shape_rigid = c_inv.mul(&shape_t).transpose();

    let estimates: Vec<Mat> = (0..f).map(|_| shape_rigid.clone()).collect();
    let gt_shapes: Vec<Mat> = gts.iter().map(|g| g.shape.clone()).collect();
    normalized_3d_error(&estimates, &gt_shapes, None)
}

fn solve_spd_6(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    // Gaussian elimination with partial pivoting on a copy.
    let n = 6;
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[(r, col)].abs() > m[(piv, col)].abs() {
                piv = r;
            }
        }
        if m[(piv, col)].abs() < 1e-300 {
            return Err(Error::Config("metric upgrade system is singular".into()));
        }
        if piv != col {
            for c in 0..n {
                let tmp = m[(col, c)];
                m[(col, c)] = m[(piv, c)];
                m[(piv, c)] = tmp;
            }
            rhs.swap(col, piv);
        }
        for r in col + 1..n {
            let fct = m[(r, col)] / m[(col, col)];
            for c in col..n {
                let v = m[(col, c)];
                m[(r, c)] -= fct * v;
            }
            rhs[r] -= fct * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = rhs[r];
        for c in r + 1..n {
            acc -= m[(r, c)] * x[c];
        }
        x[r] = acc / m[(r, r)];
    }
    Ok(x)
}

fn invert_3x3(m: &Mat) -> Result<Mat> {
    let det = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
        - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
    if det.abs() < 1e-300 {
        return Err(Error::Config("singular metric-upgrade factor".into()));
    }
    let inv_det = 1.0 / det;
    let mut out = Mat::zeros(3, 3);
    out[(0, 0)] = (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)]) * inv_det;
    out[(0, 1)] = (m[(0, 2)] * m[(2, 1)] - m[(0, 1)] * m[(2, 2)]) * inv_det;
    out[(0, 2)] = (m[(0, 1)] * m[(1, 2)] - m[(0, 2)] * m[(1, 1)]) * inv_det;
    out[(1, 0)] = (m[(1, 2)] * m[(2, 0)] - m[(1, 0)] * m[(2, 2)]) * inv_det;
    out[(1, 1)] = (m[(0, 0)] * m[(2, 2)] - m[(0, 2)] * m[(2, 0)]) * inv_det;
    out[(1, 2)] = (m[(0, 2)] * m[(1, 0)] - m[(0, 0)] * m[(1, 2)]) * inv_det;
    out[(2, 0)] = (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]) * inv_det;
    out[(2, 1)] = (m[(0, 1)] * m[(2, 0)] - m[(0, 0)] * m[(2, 1)]) * inv_det;
    out[(2, 2)] = (m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]) * inv_det;
    Ok(out)
}

/// Symmetric 3x3 PSD factor Q = C C^T by Jacobi eigen-decomposition with
/// negative eigenvalues clamped to a small positive floor.
fn psd_factor(q: &Mat) -> Result<Mat> {
    let (vals, vecs) = sym_eig_3x3(q);
    let floor = vals.iter().cloned().fold(0.0f64, f64::max).max(1e-12) * 1e-9;
    let mut c = Mat::zeros(3, 3);
    for j in 0..3 {
        let s = vals[j].max(floor).sqrt();
        for r in 0..3 {
            c[(r, j)] = vecs[(r, j)] * s;
        }
    }
    Ok(c)
}

/// Classic cyclic Jacobi for a symmetric 3x3: returns (eigenvalues,
/// eigenvector columns).
fn sym_eig_3x3(a: &Mat) -> (Vec<f64>, Mat) {
    let mut m = a.clone();
    let mut v = Mat::identity(3);
    for _ in 0..64 {
        // largest off-diagonal element
        let mut p = 0;
        let mut q = 1;
        let mut big = 0.0f64;
        for i in 0..3 {
            for j in (i + 1)..3 {
                if m[(i, j)].abs() > big {
                    big = m[(i, j)].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if big < 1e-300 || big < 1e-15 * (m[(0, 0)].abs() + m[(1, 1)].abs() + m[(2, 2)].abs()) {
            break;
        }
        let theta = 0.5 * f64::atan2(2.0 * m[(p, q)], m[(p, p)] - m[(q, q)]);
        let (s, c) = theta.sin_cos();
        let mut rot = Mat::identity(3);
        rot[(p, p)] = c;
        rot[(q, q)] = c;
        rot[(p, q)] = -s;
        rot[(q, p)] = s;
        m = rot.mul_tn(&m).mul(&rot);
        v = v.mul(&rot);
    }
    (vec![m[(0, 0)], m[(1, 1)], m[(2, 2)]], v)
}

/// Retrain from scratch at each noise ratio and report (ratio, mean error)
/// in ascending ratio order. Failures per ratio are reported alongside the
/// partial curve.
pub struct SweepOutcome {
    pub curve: Vec<(f64, f64)>,
    pub failures: Vec<(f64, String)>,
}

pub fn noise_sweep(
    dataset: &TrackSet,
    sizes: &LayerSizes,
    cfg: &TrainConfig,
    ratios: &[f64],
    out_dir: &Path,
) -> Result<SweepOutcome> {
    if !dataset.has_ground_truth() {
        return Err(Error::MissingGroundTruth);
    }
    let mut sorted: Vec<f64> = ratios.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    let mut curve = Vec::new();
    let mut failures = Vec::new();
    for (i, &ratio) in sorted.iter().enumerate() {
        let run = || -> Result<f64> {
            let noisy = add_noise(dataset, ratio, cfg.seed.wrapping_add(0x9e37 + i as u64));
            let run_dir = out_dir.join(format!("ratio_{:.4}", ratio));
            let (_, records) = train(&noisy, sizes, cfg, &run_dir)?;
            let best = select_checkpoint(&records)?;
            let ck = crate::network::checkpoint::load_checkpoint(&best.path)?;
            // error measured on the noisy observations against clean truth
            let mut eval_set = noisy.clone();
            eval_set.ground_truth = dataset.ground_truth.clone();
            Ok(evaluate_params(&ck.params, &eval_set)?.mean_error)
        };
        match run() {
            Ok(err) => curve.push((ratio, err)),
            Err(e) => failures.push((ratio, e.to_string())),
        }
    }
    Ok(SweepOutcome { curve, failures })
}

/// Pearson correlation; None when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Evaluate each checkpoint's 3D error and pair it with its recorded
/// coherence. Needs at least 3 checkpoints; the correlation is None when
/// the coherence values have zero variance.
pub fn coherence_error_series(
    records: &[CheckpointRecord],
    dataset: &TrackSet,
) -> Result<(Vec<(f64, f64)>, Option<f64>)> {
    if records.len() < 3 {
        return Err(Error::InsufficientData {
            need: 3,
            got: records.len(),
        });
    }
    if !dataset.has_ground_truth() {
        return Err(Error::MissingGroundTruth);
    }
    let mut series = Vec::with_capacity(records.len());
    for rec in records {
        let ck = crate::network::checkpoint::load_checkpoint(&rec.path)?;
        let report = evaluate_params(&ck.params, dataset)?;
        series.push((rec.coherence, report.mean_error));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = series.iter().cloned().unzip();
    Ok((series, pearson(&xs, &ys)))
}
