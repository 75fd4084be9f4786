//! The trainable encoder/decoder model: parameter container, block-sparse
//! encoder, code/camera recovery heads, decoder, loss, and hand-written
//! reverse-mode gradients for the whole pipeline.
//!
//! Conventions: the shape vector s stacks points point-major,
//! s = (x1, y1, z1, x2, ...), so D1 (3p x k1) and its reshape
//! D1# (p x 3k1) are related by `D1#[r, 3i+c] = D1[3r+c, i]`. Block codes
//! Psi_i live in 3k_i x 2 matrices whose row-major layout doubles as the
//! block-major vec() ordering of the code-recovery head.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::numerics::{relu, svd_thin, Mat, SvdThin};
use crate::sparse::BlockMatrix32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Layer geometry: point count and funnel k1 > k2 > ... > kn >= 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSizes {
    pub p: usize,
    pub k: Vec<usize>,
}

impl LayerSizes {
    pub fn new(p: usize, k: Vec<usize>) -> Result<Self> {
        let sizes = LayerSizes { p, k };
        sizes.validate()?;
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 3 {
            return Err(Error::Config(format!("p must be >= 3, got {}", self.p)));
        }
        if self.k.is_empty() {
            return Err(Error::Config("need at least one layer".into()));
        }
        if *self.k.last().unwrap() < 1 {
            return Err(Error::Config("deepest layer size must be >= 1".into()));
        }
        for w in self.k.windows(2) {
            if w[0] <= w[1] {
                return Err(Error::Config(format!(
                    "layer sizes must strictly decrease, got {:?}",
                    self.k
                )));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.k.len()
    }

    pub fn deepest(&self) -> usize {
        *self.k.last().unwrap()
    }
}

/// All learned parameters. D1 is stored in its p x 3k1 reshape, which both
/// the encoder and decoder consume directly; `d1()` materializes the
/// 3p x k1 form.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub sizes: LayerSizes,
    /// D1# (p x 3k1).
    pub d1_sharp: Mat,
    /// D2..Dn, each k_{i-1} x k_i.
    pub deeper: Vec<Mat>,
    /// Encoder thresholds b1..bn, length k_i each.
    pub enc_bias: Vec<Vec<f64>>,
    /// Decoder thresholds b'2..b'n, length k_{i-1} each.
    pub dec_bias: Vec<Vec<f64>>,
    /// Camera head: block-combination coefficients, length kn.
    pub cam_weights: Vec<f64>,
    /// Code head weights G (kn x 6kn).
    pub code_weights: Mat,
    /// Code head bias g, length kn.
    pub code_bias: Vec<f64>,
}

/// Gradient (or Adam moment) container mirroring `ModelParams`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub d1_sharp: Mat,
    pub deeper: Vec<Mat>,
    pub enc_bias: Vec<Vec<f64>>,
    pub dec_bias: Vec<Vec<f64>>,
    pub cam_weights: Vec<f64>,
    pub code_weights: Mat,
    pub code_bias: Vec<f64>,
}

impl ModelParams {
    /// D1 in its 3p x k1 form.
    pub fn d1(&self) -> Mat {
        let p = self.sizes.p;
        let k1 = self.sizes.k[0];
        Mat::from_fn(3 * p, k1, |m, i| self.d1_sharp[(m / 3, 3 * i + m % 3)])
    }

    pub(crate) fn d1_sharp_from_d1(sizes: &LayerSizes, d1: &Mat) -> Mat {
        let p = sizes.p;
        let k1 = sizes.k[0];
        Mat::from_fn(p, 3 * k1, |r, j| d1[(3 * r + j % 3, j / 3)])
    }

    /// The deepest dictionary Dn (D1 when the model has a single layer).
    pub fn final_dictionary(&self) -> Mat {
        match self.deeper.last() {
            Some(d) => d.clone(),
            None => self.d1(),
        }
    }

    /// Parameter arrays in declared order: D1#, D2..Dn, b1..bn, b'2..b'n,
    /// cam, G, g. Drives the optimizer and mirrors the checkpoint layout.
    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.d1_sharp.data()];
        for d in &self.deeper {
            out.push(d.data());
        }
        for b in &self.enc_bias {
            out.push(b);
        }
        for b in &self.dec_bias {
            out.push(b);
        }
        out.push(&self.cam_weights);
        out.push(self.code_weights.data());
        out.push(&self.code_bias);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.d1_sharp.data_mut()];
        for d in &mut self.deeper {
            out.push(d.data_mut());
        }
        for b in &mut self.enc_bias {
            out.push(b);
        }
        for b in &mut self.dec_bias {
            out.push(b);
        }
        out.push(&mut self.cam_weights);
        out.push(self.code_weights.data_mut());
        out.push(&mut self.code_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            d1_sharp: Mat::zeros(params.d1_sharp.rows(), params.d1_sharp.cols()),
            deeper: params
                .deeper
                .iter()
                .map(|d| Mat::zeros(d.rows(), d.cols()))
                .collect(),
            enc_bias: params.enc_bias.iter().map(|b| vec![0.0; b.len()]).collect(),
            dec_bias: params.dec_bias.iter().map(|b| vec![0.0; b.len()]).collect(),
            cam_weights: vec![0.0; params.cam_weights.len()],
            code_weights: Mat::zeros(params.code_weights.rows(), params.code_weights.cols()),
            code_bias: vec![0.0; params.code_bias.len()],
        }
    }

    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.d1_sharp.data()];
        for d in &self.deeper {
            out.push(d.data());
        }
        for b in &self.enc_bias {
            out.push(b);
        }
        for b in &self.dec_bias {
            out.push(b);
        }
        out.push(&self.cam_weights);
        out.push(self.code_weights.data());
        out.push(&self.code_bias);
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.d1_sharp.data_mut()];
        for d in &mut self.deeper {
            out.push(d.data_mut());
        }
        for b in &mut self.enc_bias {
            out.push(b);
        }
        for b in &mut self.dec_bias {
            out.push(b);
        }
        out.push(&mut self.cam_weights);
        out.push(self.code_weights.data_mut());
        out.push(&mut self.code_bias);
        out
    }

    /// self += s * other
    pub fn accumulate(&mut self, s: f64, other: &Gradients) {
        for (dst, src) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (d, v) in dst.iter_mut().zip(src) {
                *d += s * v;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for dst in self.arrays_mut() {
            for d in dst {
                *d *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Everything forward computes, retained for backward.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Encoder outputs Psi_1..Psi_n.
    pub psi_blocks: Vec<BlockMatrix32>,
    /// Decoder-path codes in the order psi_n, psi_{n-1}, ..., psi_1.
    pub psi_codes: Vec<Vec<f64>>,
    /// Raw camera from the linear combination head.
    pub camera_raw: Mat,
    /// SVD of the raw camera; None when the raw camera is exactly zero.
    pub camera_svd: Option<SvdThin>,
    /// Orthonormal projection of the raw camera.
    pub camera_proj: Mat,
    /// Recovered p x 3 shape.
    pub shape: Mat,
    pub loss: f64,
}

/// Gaussian dictionaries scaled by 1/sqrt(fan_in), biases 0.01, uniform
/// camera weights. Deterministic per seed.
pub fn init_params(sizes: &LayerSizes, seed: u64) -> Result<ModelParams> {
    sizes.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x10);
    let n = sizes.depth();
    let p = sizes.p;
    let k1 = sizes.k[0];
    let kn = sizes.deepest();

    // D1 sampled in its canonical 3p x k1 layout, then reshaped.
    let scale1 = 1.0 / (k1 as f64).sqrt();
    let d1 = Mat::from_fn(3 * p, k1, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        g * scale1
    });
    let d1_sharp = ModelParams::d1_sharp_from_d1(sizes, &d1);

    let mut deeper = Vec::with_capacity(n - 1);
    for i in 1..n {
        let scale = 1.0 / (sizes.k[i] as f64).sqrt();
        deeper.push(Mat::from_fn(sizes.k[i - 1], sizes.k[i], |_, _| {
            let g: f64 = rng.sample(StandardNormal);
            g * scale
        }));
    }

    let enc_bias: Vec<Vec<f64>> = sizes.k.iter().map(|&k| vec![0.01; k]).collect();
    let dec_bias: Vec<Vec<f64>> = (1..n).map(|i| vec![0.01; sizes.k[i - 1]]).collect();
    let cam_weights = vec![1.0 / kn as f64; kn];
    let gscale = 1.0 / (6.0 * kn as f64).sqrt();
    let code_weights = Mat::from_fn(kn, 6 * kn, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        g * gscale
    });
    let code_bias = vec![0.01; kn];

    Ok(ModelParams {
        sizes: sizes.clone(),
        d1_sharp,
        deeper,
        enc_bias,
        dec_bias,
        cam_weights,
        code_weights,
        code_bias,
    })
}

/// (d (x) I3)^T psi without materializing the Kronecker product: output
/// block j = sum_l d[l, j] * input block l. This is the multi-channel 1x1
/// convolution form of the encoder step.
pub fn kron_t_apply(d: &Mat, psi: &Mat) -> Mat {
    assert_eq!(psi.rows(), 3 * d.rows(), "kron_t_apply: dims");
    assert_eq!(psi.cols(), 2);
    let mut out = Mat::zeros(3 * d.cols(), 2);
    for l in 0..d.rows() {
        let src = &psi.data()[6 * l..6 * l + 6];
        for j in 0..d.cols() {
            let w = d[(l, j)];
            if w == 0.0 {
                continue;
            }
            let dst = &mut out.data_mut()[6 * j..6 * j + 6];
            for t in 0..6 {
                dst[t] += w * src[t];
            }
        }
    }
    out
}

/// (d (x) I3) t, the transposed-convolution counterpart: output block l =
/// sum_j d[l, j] * input block j.
pub fn kron_apply(d: &Mat, t: &Mat) -> Mat {
    assert_eq!(t.rows(), 3 * d.cols(), "kron_apply: dims");
    assert_eq!(t.cols(), 2);
    let mut out = Mat::zeros(3 * d.rows(), 2);
    for l in 0..d.rows() {
        let dst = &mut out.data_mut()[6 * l..6 * l + 6];
        for j in 0..d.cols() {
            let w = d[(l, j)];
            if w == 0.0 {
                continue;
            }
            let src = &t.data()[6 * j..6 * j + 6];
            for tt in 0..6 {
                dst[tt] += w * src[tt];
            }
        }
    }
    out
}

/// d (x) I3 materialized; reference path for equivalence tests.
pub fn materialize_kron_i3(d: &Mat) -> Mat {
    Mat::from_fn(3 * d.rows(), 3 * d.cols(), |r, c| {
        if r % 3 == c % 3 {
            d[(r / 3, c / 3)]
        } else {
            0.0
        }
    })
}

fn relu_sub_block_bias(pre: &Mat, bias: &[f64]) -> Mat {
    let mut out = Mat::zeros(pre.rows(), 2);
    for j in 0..bias.len() {
        for r in 0..3 {
            for c in 0..2 {
                out[(3 * j + r, c)] = relu(pre[(3 * j + r, c)] - bias[j]);
            }
        }
    }
    out
}

/// Encoder: Psi_1 = relu(D1#^T W - b1 (x) 1), then
/// Psi_{i+1} = relu((D_{i+1} (x) I3)^T Psi_i - b_{i+1} (x) 1).
pub fn encode(w: &Mat, params: &ModelParams) -> Result<Vec<BlockMatrix32>> {
    let sizes = &params.sizes;
    if w.rows() != sizes.p || w.cols() != 2 {
        return Err(Error::shape(format!(
            "encode layer 1: observation {}x{} vs p={}",
            w.rows(),
            w.cols(),
            sizes.p
        )));
    }
    let mut psis = Vec::with_capacity(sizes.depth());
    let pre = params.d1_sharp.mul_tn(w);
    psis.push(BlockMatrix32::new(relu_sub_block_bias(&pre, &params.enc_bias[0])));
    for (i, d) in params.deeper.iter().enumerate() {
        let prev = psis.last().unwrap().as_mat();
        if prev.rows() != 3 * d.rows() {
            return Err(Error::shape(format!(
                "encode layer {}: code height {} vs dictionary rows {}",
                i + 2,
                prev.rows(),
                d.rows()
            )));
        }
        let pre = kron_t_apply(d, prev);
        psis.push(BlockMatrix32::new(relu_sub_block_bias(
            &pre,
            &params.enc_bias[i + 1],
        )));
    }
    Ok(psis)
}

/// Camera head: M = sum_j c_j Psi_n[j], raw (not orthonormalized).
pub fn recover_camera(psi_n: &BlockMatrix32, params: &ModelParams) -> Result<Mat> {
    if psi_n.len() != params.sizes.deepest() {
        return Err(Error::shape(format!(
            "recover_camera: {} blocks vs kn={}",
            psi_n.len(),
            params.sizes.deepest()
        )));
    }
    let mut m = Mat::zeros(3, 2);
    for (j, &c) in params.cam_weights.iter().enumerate() {
        for r in 0..3 {
            for cc in 0..2 {
                m[(r, cc)] += c * psi_n.as_mat()[(3 * j + r, cc)];
            }
        }
    }
    Ok(m)
}

/// Code head: psi_n = relu(G vec(Psi_n) - g). vec() flattens block-major,
/// row-major within each block, which is exactly the stacked layout.
pub fn recover_code(psi_n: &BlockMatrix32, params: &ModelParams) -> Result<Vec<f64>> {
    let kn = params.sizes.deepest();
    if psi_n.len() != kn {
        return Err(Error::shape(format!(
            "recover_code: {} blocks vs kn={}",
            psi_n.len(),
            kn
        )));
    }
    let v = psi_n.as_mat().data();
    let mut out = params.code_weights.matvec(v);
    for (o, g) in out.iter_mut().zip(&params.code_bias) {
        *o = relu(*o - g);
    }
    Ok(out)
}

/// Decoder: psi_{i-1} = relu(D_i psi_i - b'_i) down to psi_1, then the
/// shape S from reshaping D1 psi_1. Returns the intermediate codes in the
/// order psi_{n-1}, ..., psi_1 plus the shape.
pub fn decode(psi_n: &[f64], params: &ModelParams) -> Result<(Vec<Vec<f64>>, Mat)> {
    let sizes = &params.sizes;
    if psi_n.len() != sizes.deepest() {
        return Err(Error::shape(format!(
            "decode: code length {} vs kn={}",
            psi_n.len(),
            sizes.deepest()
        )));
    }
    let mut codes = Vec::new();
    let mut psi = psi_n.to_vec();
    for (d, b) in params.deeper.iter().zip(&params.dec_bias).rev() {
        let mut nxt = d.matvec(&psi);
        for (x, bb) in nxt.iter_mut().zip(b) {
            *x = relu(*x - bb);
        }
        codes.push(nxt.clone());
        psi = nxt;
    }
    // s = D1 psi_1 evaluated in the sharp layout: S[r, c] = sum_i
    // d1_sharp[r, 3i+c] * psi_1[i]
    let p = sizes.p;
    let k1 = sizes.k[0];
    let mut shape = Mat::zeros(p, 3);
    for r in 0..p {
        let row = params.d1_sharp.row(r);
        for i in 0..k1 {
            let w = psi[i];
            if w == 0.0 {
                continue;
            }
            for c in 0..3 {
                shape[(r, c)] += row[3 * i + c] * w;
            }
        }
    }
    Ok((codes, shape))
}

/// Canonical stand-in camera used when the raw camera is exactly zero; the
/// loss then reduces to |W - S Mtilde| with an arbitrary orthonormal frame
/// and backward treats the projection as locally constant.
fn canonical_camera() -> Mat {
    Mat::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]])
}

/// Full forward pass: encode, recover heads, decode, polar-project the
/// camera, and the unsquared Frobenius reprojection loss.
pub fn forward(w: &Mat, params: &ModelParams) -> Result<ForwardTrace> {
    let psis = encode(w, params)?;
    let psi_top = psis.last().unwrap();
    let camera_raw = recover_camera(psi_top, params)?;
    let psi_n_code = recover_code(psi_top, params)?;
    let (mut codes, shape) = decode(&psi_n_code, params)?;

    let mut psi_codes = Vec::with_capacity(codes.len() + 1);
    psi_codes.push(psi_n_code);
    psi_codes.append(&mut codes);

    let (camera_svd, camera_proj) = if camera_raw.frob_norm() == 0.0 {
        (None, canonical_camera())
    } else {
        let svd = svd_thin(&camera_raw)?;
        crate::numerics::check_camera_rank(&svd.sigma)?;
        let proj = svd.u.mul_nt(&svd.v);
        (Some(svd), proj)
    };

    let resid = w.sub(&shape.mul(&camera_proj));
    let loss = resid.frob_norm();

    Ok(ForwardTrace {
        psi_blocks: psis,
        psi_codes,
        camera_raw,
        camera_svd,
        camera_proj,
        shape,
        loss,
    })
}

/// Reverse-mode gradient of the loss with respect to every parameter.
pub fn backward(trace: &ForwardTrace, w: &Mat, params: &ModelParams) -> Result<Gradients> {
    backward_seeded(trace, w, params, 1.0)
}

/// Gradient of `seed * loss`; differentiation is linear so this just scales
/// the upstream seed.
pub fn backward_seeded(
    trace: &ForwardTrace,
    w: &Mat,
    params: &ModelParams,
    seed: f64,
) -> Result<Gradients> {
    let sizes = &params.sizes;
    let n = sizes.depth();
    let kn = sizes.deepest();
    let mut grads = Gradients::zeros_like(params);

    // Unsquared norm: gradient R / |R|, defined as 0 at |R| = 0.
    if trace.loss == 0.0 {
        return Ok(grads);
    }
    let resid = w.sub(&trace.shape.mul(&trace.camera_proj));
    let d_resid = resid.scale(seed / trace.loss);

    // loss <- W - S Mtilde
    let d_shape = d_resid.mul_nt(&trace.camera_proj).scale(-1.0);
    let d_mtilde = trace.shape.mul_tn(&d_resid).scale(-1.0);

    // Polar projection backward. With M = Q H (Q the orthonormal factor,
    // H = V diag(sigma) V^T):
    //   dL/dM = (k / tr(H)) Q E + (I - Q Q^T) dL/dQ H^{-1},
    // where E = [[0,1],[-1,0]] and k is the antisymmetric part of Q^T dL/dQ.
    let d_m = match &trace.camera_svd {
        None => Mat::zeros(3, 2),
        Some(svd) => {
            let sigma_sum = svd.sigma[0] + svd.sigma[1];
            if sigma_sum < 1e-10 {
                return Err(Error::GradientInstability { sigma_sum });
            }
            let q = &trace.camera_proj;
            let qt_g = q.mul_tn(&d_mtilde);
            let k_asym = qt_g[(0, 1)] - qt_g[(1, 0)];
            let a = k_asym / sigma_sum;
            let e = Mat::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
            let term1 = q.mul(&e).scale(a);

            let h_inv = {
                let v = &svd.v;
                Mat::from_fn(2, 2, |r, c| {
                    v[(r, 0)] * v[(c, 0)] / svd.sigma[0] + v[(r, 1)] * v[(c, 1)] / svd.sigma[1]
                })
            };
            let p_g = d_mtilde.sub(&q.mul(&qt_g));
            let term2 = p_g.mul(&h_inv);
            term1.add(&term2)
        }
    };

    // Camera head: M = sum_j c_j Psi_n[j].
    let psi_top = trace.psi_blocks.last().unwrap();
    let mut d_psi_top = Mat::zeros(3 * kn, 2);
    for j in 0..kn {
        let mut inner = 0.0;
        for r in 0..3 {
            for c in 0..2 {
                inner += psi_top.as_mat()[(3 * j + r, c)] * d_m[(r, c)];
                d_psi_top[(3 * j + r, c)] += params.cam_weights[j] * d_m[(r, c)];
            }
        }
        grads.cam_weights[j] += inner;
    }

    // Decoder backward, bottom-up. psi_codes = [psi_n, psi_{n-1}, .., psi_1].
    let psi1 = &trace.psi_codes[n - 1];
    let p = sizes.p;
    let k1 = sizes.k[0];
    let mut d_code = vec![0.0; k1];
    for r in 0..p {
        let row = params.d1_sharp.row(r);
        for i in 0..k1 {
            let mut acc = 0.0;
            for c in 0..3 {
                acc += row[3 * i + c] * d_shape[(r, c)];
                grads.d1_sharp[(r, 3 * i + c)] += d_shape[(r, c)] * psi1[i];
            }
            d_code[i] += acc;
        }
    }
    // walk decoder layers psi_{i-1} = relu(D_i psi_i - b'_i), i = 2..n
    for i in 2..=n {
        let psi_out = &trace.psi_codes[n - (i - 1)]; // psi_{i-1}
        let psi_in = &trace.psi_codes[n - i]; // psi_i
        let d = &params.deeper[i - 2];
        let mut t = vec![0.0; psi_out.len()];
        for (ti, (&g, &o)) in t.iter_mut().zip(d_code.iter().zip(psi_out)) {
            *ti = if o > 0.0 { g } else { 0.0 };
        }
        let g_dec = &mut grads.dec_bias[i - 2];
        for (gb, &ti) in g_dec.iter_mut().zip(&t) {
            *gb -= ti;
        }
        let gd = &mut grads.deeper[i - 2];
        for l in 0..d.rows() {
            for j in 0..d.cols() {
                gd[(l, j)] += t[l] * psi_in[j];
            }
        }
        d_code = d.matvec_t(&t);
    }
    // d_code now holds dL/d psi_n through the decoder path.

    // Code head backward: psi_n = relu(G v - g), v = vec(Psi_n).
    let psi_n_code = &trace.psi_codes[0];
    let mut r_head = vec![0.0; kn];
    for (ri, (&g, &o)) in r_head.iter_mut().zip(d_code.iter().zip(psi_n_code)) {
        *ri = if o > 0.0 { g } else { 0.0 };
    }
    let v = psi_top.as_mat().data();
    for i in 0..kn {
        if r_head[i] != 0.0 {
            for (jj, &vj) in v.iter().enumerate() {
                grads.code_weights[(i, jj)] += r_head[i] * vj;
            }
        }
        grads.code_bias[i] -= r_head[i];
    }
    let d_v = params.code_weights.matvec_t(&r_head);
    for (dst, src) in d_psi_top.data_mut().iter_mut().zip(&d_v) {
        *dst += src;
    }

    // Encoder backward from Psi_n down to the input.
    let mut d_psi = d_psi_top;
    for i in (1..=n).rev() {
        let psi_i = trace.psi_blocks[i - 1].as_mat();
        let ki = sizes.k[i - 1];
        // relu mask and bias gradient
        let mut t = Mat::zeros(psi_i.rows(), 2);
        for j in 0..ki {
            let mut bias_acc = 0.0;
            for r in 0..3 {
                for c in 0..2 {
                    if psi_i[(3 * j + r, c)] > 0.0 {
                        let g = d_psi[(3 * j + r, c)];
                        t[(3 * j + r, c)] = g;
                        bias_acc += g;
                    }
                }
            }
            grads.enc_bias[i - 1][j] -= bias_acc;
        }
        if i == 1 {
            // pre = D1#^T W: dD1# += W T^T
            let add = w.mul_nt(&t);
            grads.d1_sharp.axpy(1.0, &add);
        } else {
            let d = &params.deeper[i - 2];
            let psi_prev = trace.psi_blocks[i - 2].as_mat();
            let gd = &mut grads.deeper[i - 2];
            for l in 0..d.rows() {
                let src = &psi_prev.data()[6 * l..6 * l + 6];
                for j in 0..d.cols() {
                    let tb = &t.data()[6 * j..6 * j + 6];
                    let mut acc = 0.0;
                    for x in 0..6 {
                        acc += src[x] * tb[x];
                    }
                    gd[(l, j)] += acc;
                }
            }
            d_psi = kron_apply(d, &t);
        }
    }

    Ok(grads)
}
