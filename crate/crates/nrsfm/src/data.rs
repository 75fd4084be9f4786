//! Synthetic ground-truth generation, track-file I/O, centering, noise
//! injection, and missing-data zero-fill.
//!
//! Track file format (text, line oriented, LF endings):
//!
//! ```text
//! NRSFM-TRACKS v1 p=<p> frames=<F> gt=<0|1>
//! <2p reals: u1 v1 ... up vp>          per frame
//! <p visibility bits>                  per frame
//! <3p reals: ground-truth S row-major> per frame, only when gt=1
//! <6 reals: ground-truth M row-major>  per frame, only when gt=1
//! ```
//!
//! Reals are serialized with 17 significant decimal digits so a save/load
//! round trip is bit exact.

use crate::error::{Error, Result};
use crate::numerics::{random_orthonormal_camera_from, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::Path;

/// Observed 2D landmarks for one frame plus a visibility mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackFrame {
    /// p x 2 image coordinates.
    pub points: Mat,
    pub visibility: Vec<bool>,
}

impl TrackFrame {
    pub fn fully_visible(points: Mat) -> Self {
        let p = points.rows();
        TrackFrame {
            points,
            visibility: vec![true; p],
        }
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }
}

/// Per-frame ground truth retained by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// p x 3 shape.
    pub shape: Mat,
    /// 3 x 2 orthonormal camera.
    pub camera: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    pub frames: Vec<TrackFrame>,
    pub p: usize,
    pub ground_truth: Option<Vec<GroundTruth>>,
}

impl TrackSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.ground_truth.is_some()
    }
}

/// Synthetic-dataset recipe: shapes drawn from a nonnegative hierarchical
/// sparse model, cameras Haar-random orthonormal.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub p: usize,
    pub frame_count: usize,
    /// Funnel k1 > k2 > ... > kn >= 1.
    pub layers: Vec<usize>,
    /// Active atoms in the deepest code, K <= kn.
    pub sparsity: usize,
    pub dict_seed: u64,
    pub camera_seed: u64,
    pub code_scale: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 3 {
            return Err(Error::Config(format!("p must be >= 3, got {}", self.p)));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("layer list must be non-empty".into()));
        }
        for w in self.layers.windows(2) {
            if w[0] <= w[1] {
                return Err(Error::Config(format!(
                    "layer sizes must strictly decrease, got {:?}",
                    self.layers
                )));
            }
        }
        let kn = *self.layers.last().unwrap();
        if kn < 1 {
            return Err(Error::Config("deepest layer size must be >= 1".into()));
        }
        if self.sparsity == 0 || self.sparsity > kn {
            return Err(Error::Config(format!(
                "sparsity must be in 1..={kn}, got {}",
                self.sparsity
            )));
        }
        if !(self.code_scale > 0.0 && self.code_scale.is_finite()) {
            return Err(Error::Config("code_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth dictionaries sampled by the generator, exposed so tests can
/// round-trip codes through them.
#[derive(Clone, Debug)]
pub struct SynthModel {
    /// D1 as 3p x k1.
    pub d1: Mat,
    /// D2..Dn, entrywise nonnegative so deeper codes stay nonnegative.
    pub deeper: Vec<Mat>,
    /// Per-frame deepest codes.
    pub codes: Vec<Vec<f64>>,
}

fn column_normalize(m: &mut Mat) {
    for j in 0..m.cols() {
        let norm = (0..m.rows()).map(|r| m[(r, j)] * m[(r, j)]).sum::<f64>().sqrt();
        if norm > 0.0 {
            for r in 0..m.rows() {
                m[(r, j)] /= norm;
            }
        }
    }
}

/// Generate a synthetic track set. Ground truth (shape, camera, codes,
/// dictionaries) is retained.
///
/// Layer-1 atoms are centered per 3D coordinate so every generated shape
/// (and hence every projection) has zero column mean; deeper dictionaries
/// are entrywise nonnegative so all intermediate codes satisfy the
/// nonnegativity the decoder enforces.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(TrackSet, SynthModel)> {
    cfg.validate()?;
    let n = cfg.layers.len();
    let k1 = cfg.layers[0];
    let kn = cfg.layers[n - 1];

    let mut dict_rng = ChaCha8Rng::seed_from_u64(cfg.dict_seed);
    dict_rng.set_stream(1);

    // D1: Gaussian, per-atom centroid removed, column normalized.
    let mut d1 = Mat::from_fn(3 * cfg.p, k1, |_, _| dict_rng.sample(StandardNormal));
    for j in 0..k1 {
        let mut means = [0.0f64; 3];
        for r in 0..cfg.p {
            for c in 0..3 {
                means[c] += d1[(3 * r + c, j)];
            }
        }
        for m in &mut means {
            *m /= cfg.p as f64;
        }
        for r in 0..cfg.p {
            for c in 0..3 {
                d1[(3 * r + c, j)] -= means[c];
            }
        }
    }
    column_normalize(&mut d1);

    // Deeper dictionaries: entrywise nonnegative, each column a normalized
    // disjoint-support part (rows permuted, dealt round-robin) plus a small
    // shared uniform component. Nonnegativity keeps every intermediate code
    // valid for the relu decoder; the shared component keeps all code
    // entries strictly positive for generic inputs; near-disjoint supports
    // keep the deepest ground-truth dictionary low-coherence, so coherence
    // decreasing toward the target tracks reconstruction quality.
    const MIX: f64 = 0.25;
    let mut deeper = Vec::with_capacity(n - 1);
    for i in 1..n {
        let rows = cfg.layers[i - 1];
        let cols = cfg.layers[i];
        let mut perm: Vec<usize> = (0..rows).collect();
        for t in (1..rows).rev() {
            let j = dict_rng.gen_range(0..=t);
            perm.swap(t, j);
        }
        let mut d = Mat::zeros(rows, cols);
        for (idx, &r) in perm.iter().enumerate() {
            let g: f64 = dict_rng.sample(StandardNormal);
            d[(r, idx % cols)] = g.abs();
        }
        column_normalize(&mut d);
        let shared = MIX / (rows as f64).sqrt();
        for r in 0..rows {
            for c in 0..cols {
                d[(r, c)] += shared;
            }
        }
        column_normalize(&mut d);
        deeper.push(d);
    }

    let mut frames = Vec::with_capacity(cfg.frame_count);
    let mut gts = Vec::with_capacity(cfg.frame_count);
    let mut codes = Vec::with_capacity(cfg.frame_count);

    let mut cam_rng = ChaCha8Rng::seed_from_u64(cfg.camera_seed);
    cam_rng.set_stream(2);
    let mut code_rng = ChaCha8Rng::seed_from_u64(cfg.dict_seed);
    code_rng.set_stream(3);

    for _ in 0..cfg.frame_count {
        // nonnegative K-sparse deepest code
        let mut psi_n = vec![0.0f64; kn];
        let mut support: Vec<usize> = (0..kn).collect();
        for i in 0..cfg.sparsity {
            let j = code_rng.gen_range(i..kn);
            support.swap(i, j);
        }
        for &idx in support.iter().take(cfg.sparsity) {
            let g: f64 = code_rng.sample(StandardNormal);
            psi_n[idx] = g.abs() * cfg.code_scale;
        }

        // compose down the hierarchy
        let mut psi = psi_n.clone();
        for d in deeper.iter().rev() {
            psi = d.matvec(&psi);
        }
        let s_vec = d1.matvec(&psi);
        let shape = Mat::from_fn(cfg.p, 3, |r, c| s_vec[3 * r + c]);

        let camera = random_orthonormal_camera_from(&mut cam_rng);
        let w = shape.mul(&camera);

        frames.push(TrackFrame::fully_visible(w));
        gts.push(GroundTruth { shape, camera });
        codes.push(psi_n);
    }

    Ok((
        TrackSet {
            frames,
            p: cfg.p,
            ground_truth: Some(gts),
        },
        SynthModel { d1, deeper, codes },
    ))
}

/// Remove each frame's centroid, computed over visible points only.
/// Ground-truth shapes, when present, get their 3D centroid removed the
/// same way so metric comparisons stay translation-consistent.
pub fn center_frames(ts: &TrackSet) -> Result<TrackSet> {
    let mut out = ts.clone();
    for (f, frame) in out.frames.iter_mut().enumerate() {
        let visible = frame.visible_count();
        if visible < 3 {
            return Err(Error::InsufficientObservations { frame: f, visible });
        }
        let mut mean = [0.0f64; 2];
        for r in 0..frame.points.rows() {
            if frame.visibility[r] {
                mean[0] += frame.points[(r, 0)];
                mean[1] += frame.points[(r, 1)];
            }
        }
        mean[0] /= visible as f64;
        mean[1] /= visible as f64;
        for r in 0..frame.points.rows() {
            frame.points[(r, 0)] -= mean[0];
            frame.points[(r, 1)] -= mean[1];
        }
    }
    if let Some(gts) = &mut out.ground_truth {
        for gt in gts.iter_mut() {
            let means = gt.shape.col_means();
            for r in 0..gt.shape.rows() {
                for c in 0..3 {
                    gt.shape[(r, c)] -= means[c];
                }
            }
        }
    }
    Ok(out)
}

/// Add Gaussian noise to visible coordinates, rescaled per frame so the
/// realized ratio |noise|_F / |W|_F equals `ratio` exactly.
pub fn add_noise(ts: &TrackSet, ratio: f64, seed: u64) -> TrackSet {
    assert!(ratio >= 0.0, "noise ratio must be nonnegative");
    let mut out = ts.clone();
    if ratio == 0.0 {
        return out;
    }
    for (f, frame) in out.frames.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x4000 + f as u64);
        let mut noise = Mat::zeros(frame.points.rows(), 2);
        let mut w_norm2 = 0.0;
        for r in 0..frame.points.rows() {
            if frame.visibility[r] {
                noise[(r, 0)] = rng.sample(StandardNormal);
                noise[(r, 1)] = rng.sample(StandardNormal);
                w_norm2 += frame.points[(r, 0)].powi(2) + frame.points[(r, 1)].powi(2);
            }
        }
        let n_norm = noise.frob_norm();
        if n_norm == 0.0 || w_norm2 == 0.0 {
            continue;
        }
        let scale = ratio * w_norm2.sqrt() / n_norm;
        for r in 0..frame.points.rows() {
            frame.points[(r, 0)] += scale * noise[(r, 0)];
            frame.points[(r, 1)] += scale * noise[(r, 1)];
        }
    }
    out
}

/// Frames whose points were entirely hidden before zero-fill.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ZeroFillReport {
    pub all_hidden_frames: Vec<usize>,
}

/// Replace invisible coordinates by zero. The visibility mask is preserved
/// so evaluation can still restrict itself to observed points.
pub fn zero_fill_missing(ts: &TrackSet) -> (TrackSet, ZeroFillReport) {
    let mut out = ts.clone();
    let mut report = ZeroFillReport::default();
    for (f, frame) in out.frames.iter_mut().enumerate() {
        if frame.visible_count() == 0 && frame.points.rows() > 0 {
            report.all_hidden_frames.push(f);
        }
        for r in 0..frame.points.rows() {
            if !frame.visibility[r] {
                frame.points[(r, 0)] = 0.0;
                frame.points[(r, 1)] = 0.0;
            }
        }
    }
    (out, report)
}

/// 17 significant digits: enough to make f64 round trips bit exact.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

pub fn tracks_to_string(ts: &TrackSet) -> String {
    let gt = ts.ground_truth.is_some();
    let mut out = String::new();
    out.push_str(&format!(
        "NRSFM-TRACKS v1 p={} frames={} gt={}\n",
        ts.p,
        ts.frames.len(),
        if gt { 1 } else { 0 }
    ));
    for (f, frame) in ts.frames.iter().enumerate() {
        let coords: Vec<String> = frame.points.data().iter().map(|&x| fmt_f64(x)).collect();
        out.push_str(&coords.join(" "));
        out.push('\n');
        let bits: Vec<&str> = frame
            .visibility
            .iter()
            .map(|&v| if v { "1" } else { "0" })
            .collect();
        out.push_str(&bits.join(" "));
        out.push('\n');
        if let Some(gts) = &ts.ground_truth {
            let s: Vec<String> = gts[f].shape.data().iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&s.join(" "));
            out.push('\n');
            let m: Vec<String> = gts[f].camera.data().iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&m.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn save_tracks(ts: &TrackSet, path: &Path) -> Result<()> {
    std::fs::write(path, tracks_to_string(ts))?;
    Ok(())
}

fn parse_floats(line: &str, lineno: usize, expect: usize, what: &str) -> Result<Vec<f64>> {
    let mut vals = Vec::new();
    for tok in line.split_ascii_whitespace() {
        if vals.len() == expect {
            return Err(Error::parse(
                lineno,
                format!("{what}: more than {expect} values"),
            ));
        }
        let x: f64 = tok
            .parse()
            .map_err(|_| Error::parse(lineno, format!("{what}: non-numeric token '{tok}'")))?;
        if !x.is_finite() {
            return Err(Error::parse(lineno, format!("{what}: non-finite value '{tok}'")));
        }
        vals.push(x);
    }
    if vals.len() != expect {
        return Err(Error::parse(
            lineno,
            format!("{what}: expected {expect} values, got {}", vals.len()),
        ));
    }
    Ok(vals)
}

/// Parse the track format from a string. Never panics on malformed input.
pub fn parse_tracks_str(text: &str) -> Result<TrackSet> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file".to_string()))?;
    let mut toks = header.split_ascii_whitespace();
    if toks.next() != Some("NRSFM-TRACKS") || toks.next() != Some("v1") {
        return Err(Error::parse(1, "expected header 'NRSFM-TRACKS v1 ...'"));
    }
    let mut p: Option<usize> = None;
    let mut frame_count: Option<usize> = None;
    let mut gt: Option<bool> = None;
    for tok in toks {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(1, format!("malformed header field '{tok}'")))?;
        match key {
            "p" => {
                let v: usize = val
                    .parse()
                    .map_err(|_| Error::parse(1, format!("bad p value '{val}'")))?;
                p = Some(v);
            }
            "frames" => {
                let v: usize = val
                    .parse()
                    .map_err(|_| Error::parse(1, format!("bad frames value '{val}'")))?;
                frame_count = Some(v);
            }
            "gt" => match val {
                "0" => gt = Some(false),
                "1" => gt = Some(true),
                _ => return Err(Error::parse(1, format!("gt must be 0 or 1, got '{val}'"))),
            },
            _ => return Err(Error::parse(1, format!("unknown header field '{key}'"))),
        }
    }
    let p = p.ok_or_else(|| Error::parse(1, "header missing p"))?;
    let frame_count = frame_count.ok_or_else(|| Error::parse(1, "header missing frames"))?;
    let gt = gt.ok_or_else(|| Error::parse(1, "header missing gt"))?;
    if p == 0 {
        return Err(Error::parse(1, "p must be positive"));
    }

    let mut next_line = |what: &str| -> Result<(usize, &str)> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l)),
            None => Err(Error::parse(0, format!("unexpected end of file, wanted {what}"))),
        }
    };

    let mut frames = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..frame_count {
        let (lineno, line) = next_line("point line")?;
        let coords = parse_floats(line, lineno, 2 * p, "point line")?;
        let points = Mat::new(p, 2, coords);

        let (lineno, line) = next_line("visibility line")?;
        let mut visibility = Vec::new();
        for tok in line.split_ascii_whitespace() {
            if visibility.len() == p {
                return Err(Error::parse(lineno, format!("visibility: more than {p} bits")));
            }
            match tok {
                "0" => visibility.push(false),
                "1" => visibility.push(true),
                _ => {
                    return Err(Error::parse(
                        lineno,
                        format!("visibility bit must be 0 or 1, got '{tok}'"),
                    ))
                }
            }
        }
        if visibility.len() != p {
            return Err(Error::parse(
                lineno,
                format!("visibility: expected {p} bits, got {}", visibility.len()),
            ));
        }
        frames.push(TrackFrame { points, visibility });

        if gt {
            let (lineno, line) = next_line("ground-truth shape line")?;
            let s_vals = parse_floats(line, lineno, 3 * p, "ground-truth shape line")?;
            let shape = Mat::new(p, 3, s_vals);

            let (lineno, line) = next_line("ground-truth camera line")?;
            let m_vals = parse_floats(line, lineno, 6, "ground-truth camera line")?;
            let camera = Mat::new(3, 2, m_vals);
            let gram = camera.mul_tn(&camera);
            let dev = gram.sub(&Mat::identity(2)).frob_norm();
            if dev > 1e-10 {
                return Err(Error::parse(
                    lineno,
                    format!("ground-truth camera not orthonormal (deviation {dev:.3e})"),
                ));
            }
            gts.push(GroundTruth { shape, camera });
        }
    }
    if let Some((i, l)) = lines.next() {
        if !l.trim().is_empty() {
            return Err(Error::parse(i + 1, "trailing content after last frame"));
        }
        for (j, rest) in lines {
            if !rest.trim().is_empty() {
                return Err(Error::parse(j + 1, "trailing content after last frame"));
            }
        }
    }
    Ok(TrackSet {
        frames,
        p,
        ground_truth: if gt { Some(gts) } else { None },
    })
}

pub fn load_tracks(path: &Path) -> Result<TrackSet> {
    let text = std::fs::read_to_string(path)?;
    parse_tracks_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            p: 8,
            frame_count: 12,
            layers: vec![10, 4],
            sparsity: 2,
            dict_seed: 5,
            camera_seed: 6,
            code_scale: 1.0,
        }
    }

    #[test]
    fn generator_cameras_orthonormal_and_shapes_centered() {
        let (ts, _) = generate_synthetic(&small_cfg()).unwrap();
        let gts = ts.ground_truth.as_ref().unwrap();
        for gt in gts {
            let gram = gt.camera.mul_tn(&gt.camera);
            assert!(gram.sub(&Mat::identity(2)).frob_norm() <= 1e-12);
            for mean in gt.shape.col_means() {
                assert!(mean.abs() <= 1e-12);
            }
        }
        for frame in &ts.frames {
            for mean in frame.points.col_means() {
                assert!(mean.abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn generator_projection_nonexpansive_and_exact() {
        let (ts, _) = generate_synthetic(&small_cfg()).unwrap();
        let gts = ts.ground_truth.as_ref().unwrap();
        for (frame, gt) in ts.frames.iter().zip(gts) {
            assert!(frame.points.frob_norm() <= gt.shape.frob_norm() + 1e-12);
            let recon = gt.shape.mul(&gt.camera);
            assert!(recon.sub(&frame.points).frob_norm() <= 1e-12);
        }
    }

    #[test]
    fn generator_single_atom_gives_collinear_shapes() {
        let cfg = SynthConfig {
            p: 6,
            frame_count: 2,
            layers: vec![1],
            sparsity: 1,
            dict_seed: 1,
            camera_seed: 2,
            code_scale: 1.0,
        };
        let (ts, _) = generate_synthetic(&cfg).unwrap();
        let gts = ts.ground_truth.as_ref().unwrap();
        let a = &gts[0].shape;
        let b = &gts[1].shape;
        // both frames are scalar multiples of the single base shape
        let scale = b.frob_norm() / a.frob_norm();
        let diff = a
            .scale(scale)
            .sub(b)
            .frob_norm()
            .min(a.scale(-scale).sub(b).frob_norm());
        assert!(diff <= 1e-10 * b.frob_norm());
    }

    #[test]
    fn generator_roundtrip_through_dictionaries() {
        // composing the retained codes through the retained dictionaries
        // reproduces the generated shape to 1e-12 (the decoder with zero
        // biases does exactly this; see the network tests for that version)
        let (ts, model) = generate_synthetic(&small_cfg()).unwrap();
        let gts = ts.ground_truth.as_ref().unwrap();
        for (f, gt) in gts.iter().enumerate() {
            let mut psi = model.codes[f].clone();
            for d in model.deeper.iter().rev() {
                psi = d.matvec(&psi);
                assert!(psi.iter().all(|&v| v >= 0.0), "intermediate code went negative");
            }
            let s_vec = model.d1.matvec(&psi);
            let shape = Mat::from_fn(ts.p, 3, |r, c| s_vec[3 * r + c]);
            assert!(shape.sub(&gt.shape).frob_norm() <= 1e-12);
        }
    }

    #[test]
    fn generator_deterministic() {
        let (a, _) = generate_synthetic(&small_cfg()).unwrap();
        let (b, _) = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn center_removes_shift_exactly() {
        let (ts, _) = generate_synthetic(&small_cfg()).unwrap();
        let mut shifted = ts.clone();
        for frame in &mut shifted.frames {
            for r in 0..frame.points.rows() {
                frame.points[(r, 0)] += 3.25;
                frame.points[(r, 1)] -= 1.5;
            }
        }
        let centered = center_frames(&shifted).unwrap();
        for (a, b) in centered.frames.iter().zip(&ts.frames) {
            assert!(a.points.sub(&b.points).frob_norm() <= 1e-9);
        }
        // idempotent on already-centered data
        let twice = center_frames(&centered).unwrap();
        for (a, b) in twice.frames.iter().zip(&centered.frames) {
            assert!(a.points.sub(&b.points).frob_norm() <= 1e-12);
        }
    }

    #[test]
    fn center_uses_visible_subset_only() {
        let points = Mat::from_rows(&[
            &[1.0, 2.0],
            &[3.0, 6.0],
            &[5.0, 10.0],
            &[100.0, 100.0],
        ]);
        let frame = TrackFrame {
            points,
            visibility: vec![true, true, true, false],
        };
        let ts = TrackSet {
            frames: vec![frame],
            p: 4,
            ground_truth: None,
        };
        let centered = center_frames(&ts).unwrap();
        // centroid over visible points is (3, 6); hidden point shifts too
        assert_eq!(centered.frames[0].points[(0, 0)], -2.0);
        assert_eq!(centered.frames[0].points[(1, 1)], 0.0);
        assert_eq!(centered.frames[0].points[(3, 0)], 97.0);
    }

    #[test]
    fn center_rejects_too_few_visible() {
        let frame = TrackFrame {
            points: Mat::zeros(4, 2),
            visibility: vec![true, true, false, false],
        };
        let ts = TrackSet {
            frames: vec![frame],
            p: 4,
            ground_truth: None,
        };
        assert!(matches!(
            center_frames(&ts),
            Err(Error::InsufficientObservations { frame: 0, visible: 2 })
        ));
    }

    #[test]
    fn noise_ratio_exact_per_frame() {
        let (ts, _) = generate_synthetic(&small_cfg()).unwrap();
        for ratio in [0.0, 0.05, 0.2] {
            let noisy = add_noise(&ts, ratio, 42);
            for (a, b) in noisy.frames.iter().zip(&ts.frames) {
                let realized = a.points.sub(&b.points).frob_norm() / b.points.frob_norm();
                assert!((realized - ratio).abs() <= 1e-10, "realized {realized} vs {ratio}");
            }
        }
    }

    #[test]
    fn noise_seeds_differ_ratio_matches() {
        let (ts, _) = generate_synthetic(&small_cfg()).unwrap();
        let a = add_noise(&ts, 0.1, 1);
        let b = add_noise(&ts, 0.1, 2);
        assert_ne!(a.frames[0].points, b.frames[0].points);
        let ra = a.frames[0].points.sub(&ts.frames[0].points).frob_norm()
            / ts.frames[0].points.frob_norm();
        let rb = b.frames[0].points.sub(&ts.frames[0].points).frob_norm()
            / ts.frames[0].points.frob_norm();
        assert!((ra - 0.1).abs() <= 1e-10 && (rb - 0.1).abs() <= 1e-10);
    }

    #[test]
    fn zero_fill_cases() {
        let (ts, _) = generate_synthetic(&small_cfg()).unwrap();
        let (filled, report) = zero_fill_missing(&ts);
        assert_eq!(filled, ts);
        assert!(report.all_hidden_frames.is_empty());

        let mut one_hidden = ts.clone();
        one_hidden.frames[1].visibility[3] = false;
        let (filled, report) = zero_fill_missing(&one_hidden);
        assert!(report.all_hidden_frames.is_empty());
        let mut zeroed = 0;
        for r in 0..filled.frames[1].points.rows() {
            for c in 0..2 {
                if filled.frames[1].points[(r, c)] == 0.0
                    && one_hidden.frames[1].points[(r, c)] != 0.0
                {
                    zeroed += 1;
                }
            }
        }
        assert_eq!(zeroed, 2);

        let mut all_hidden = ts.clone();
        for v in &mut all_hidden.frames[0].visibility {
            *v = false;
        }
        let (filled, report) = zero_fill_missing(&all_hidden);
        assert_eq!(report.all_hidden_frames, vec![0]);
        assert!(filled.frames[0].points.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tracks_roundtrip_bit_exact() {
        let (ts, _) = generate_synthetic(&small_cfg()).unwrap();
        let text = tracks_to_string(&ts);
        let back = parse_tracks_str(&text).unwrap();
        assert_eq!(ts, back);
    }

    #[test]
    fn tracks_empty_set_roundtrip() {
        let ts = TrackSet {
            frames: vec![],
            p: 5,
            ground_truth: None,
        };
        let text = tracks_to_string(&ts);
        assert_eq!(text.lines().count(), 1);
        let back = parse_tracks_str(&text).unwrap();
        assert_eq!(back, ts);
    }

    #[test]
    fn tracks_single_frame_format_shape() {
        let ts = TrackSet {
            frames: vec![TrackFrame::fully_visible(Mat::from_rows(&[
                &[1.0, 2.0],
                &[3.0, 4.0],
            ]))],
            p: 2,
            ground_truth: None,
        };
        let text = tracks_to_string(&ts);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split_ascii_whitespace().count(), 4);
        assert_eq!(lines[2], "1 1");
    }

    #[test]
    fn tracks_parse_errors_carry_line_numbers() {
        let bad_header = "NRSFM-TRACKS v2 p=3 frames=0 gt=0\n";
        match parse_tracks_str(bad_header) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }

        let bad_token = "NRSFM-TRACKS v1 p=2 frames=1 gt=0\n1.0 2.0 x 4.0\n1 1\n";
        match parse_tracks_str(bad_token) {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("non-numeric")),
            other => panic!("unexpected: {other:?}"),
        }

        let wrong_p = "NRSFM-TRACKS v1 p=2 frames=1 gt=0\n1.0 2.0 3.0\n1 1\n";
        match parse_tracks_str(wrong_p) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }

        let bad_bit = "NRSFM-TRACKS v1 p=2 frames=1 gt=0\n1.0 2.0 3.0 4.0\n1 2\n";
        match parse_tracks_str(bad_bit) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }

        let non_finite = "NRSFM-TRACKS v1 p=2 frames=1 gt=0\n1.0 inf 3.0 4.0\n1 1\n";
        assert!(matches!(parse_tracks_str(non_finite), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn tracks_file_roundtrip() {
        let (ts, _) = generate_synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.txt");
        save_tracks(&ts, &path).unwrap();
        let back = load_tracks(&path).unwrap();
        assert_eq!(ts, back);
    }

    #[test]
    fn rotation_equivariance_of_projection() {
        // W' = S (M R) equals W R for any in-plane rotation R
        let (ts, _) = generate_synthetic(&small_cfg()).unwrap();
        let gts = ts.ground_truth.as_ref().unwrap();
        let th = 0.7f64;
        let rot = Mat::from_rows(&[&[th.cos(), -th.sin()], &[th.sin(), th.cos()]]);
        for (frame, gt) in ts.frames.iter().zip(gts) {
            let w_rot = gt.shape.mul(&gt.camera.mul(&rot));
            let rot_w = frame.points.mul(&rot);
            assert!(w_rot.sub(&rot_w).frob_norm() <= 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_random_tracksets(seed in 0u64..1000, p in 1usize..6, nframes in 0usize..4, gt in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames: Vec<TrackFrame> = (0..nframes)
                .map(|_| TrackFrame {
                    points: Mat::from_fn(p, 2, |_, _| rng.sample(StandardNormal)),
                    visibility: (0..p).map(|_| rng.gen_bool(0.8)).collect(),
                })
                .collect();
            let gts = if gt {
                Some(
                    (0..nframes)
                        .map(|_| GroundTruth {
                            shape: Mat::from_fn(p, 3, |_, _| rng.sample(StandardNormal)),
                            camera: random_orthonormal_camera_from(&mut rng),
                        })
                        .collect(),
                )
            } else {
                None
            };
            let ts = TrackSet { frames, p, ground_truth: gts };
            let back = parse_tracks_str(&tracks_to_string(&ts)).unwrap();
            prop_assert_eq!(ts, back);
        }

        #[test]
        fn parser_never_panics_on_mutations(seed in 0u64..500) {
            let (ts, _) = generate_synthetic(&SynthConfig {
                p: 3,
                frame_count: 2,
                layers: vec![4, 2],
                sparsity: 1,
                dict_seed: seed,
                camera_seed: seed,
                code_scale: 1.0,
            }).unwrap();
            let mut text = tracks_to_string(&ts).into_bytes();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..8 {
                let i = rng.gen_range(0..text.len());
                text[i] = rng.gen_range(0x20..0x7f);
            }
            if let Ok(s) = String::from_utf8(text) {
                let _ = parse_tracks_str(&s);
            }
        }
    }
}
