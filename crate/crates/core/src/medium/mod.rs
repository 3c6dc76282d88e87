//! Direction-conditioned medium network.
//!
//! A ray direction is encoded with degree-3 real spherical harmonics and fed
//! through a 16 → 128 → 128 → 128 → 9 MLP with squareplus hidden units
//! (`(x + sqrt(x² + 4)) / 2`, a smooth algebraic softplus). The
//! nine outputs become attenuation density (softplus), backscatter density
//! (softplus) and medium color (sigmoid), three channels each.

mod sh;

use nalgebra::{DMatrix, DMatrixView, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::scene::{logit, sigmoid};

pub use sh::{non_unit_input_count, sh_encode, sh_encode_vjp, SH_DIM};

pub const LAYER_WIDTHS: [usize; 5] = [SH_DIM, 128, 128, 128, 9];
pub const NUM_LAYERS: usize = 4;

/// Density every freshly initialized network predicts for both channels.
pub const INIT_SIGMA: f64 = 0.05;

/// Directions per chunk in batched evaluation. Fixed so reductions happen in
/// the same order regardless of thread count.
const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediumSample {
    pub sigma_attn: Vector3<f64>,
    pub sigma_bs: Vector3<f64>,
    pub c_med: Vector3<f64>,
}

impl MediumSample {
    pub fn zeros() -> Self {
        Self {
            sigma_attn: Vector3::zeros(),
            sigma_bs: Vector3::zeros(),
            c_med: Vector3::zeros(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.sigma_attn.iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.sigma_bs.iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.c_med.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            sigma_attn: self.sigma_attn * k,
            sigma_bs: self.sigma_bs * k,
            c_med: self.c_med * k,
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        out[..3].copy_from_slice(self.sigma_attn.as_slice());
        out[3..6].copy_from_slice(self.sigma_bs.as_slice());
        out[6..].copy_from_slice(self.c_med.as_slice());
        out
    }

    pub fn from_array(v: &[f64; 9]) -> Self {
        Self {
            sigma_attn: Vector3::new(v[0], v[1], v[2]),
            sigma_bs: Vector3::new(v[3], v[4], v[5]),
            c_med: Vector3::new(v[6], v[7], v[8]),
        }
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive `y`.
#[inline]
/// Inverse of softplus; targets below 1e-300 are clamped so the result
/// stays finite.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-300);
    y + (-(-y).exp_m1()).ln()
}

/// Derivative of softplus expressed through its output: `1 - e^{-y}`.
#[inline]
fn softplus_grad_from_output(y: f64) -> f64 {
    -(-y).exp_m1()
}

/// Hidden activation, `(x + sqrt(x² + 4)) / 2`.
#[inline]
fn squareplus(x: f64) -> f64 {
    0.5 * (x + (x * x + 4.0).sqrt())
}

/// Derivative of [`squareplus`] through its (always positive) output:
/// `y² / (y² + 1)`.
#[inline]
fn squareplus_grad_from_output(y: f64) -> f64 {
    let yy = y * y;
    yy / (yy + 1.0)
}

/// `C = A·B + beta·C` on strided column data via `matrixmultiply`.
/// Strides are `(row, col)` in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len()));
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index the kernel touches is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Flat parameter vector. Layer-major; within a layer the weight matrix
/// (`out × in`, row-major) precedes the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumNetParams {
    data: Vec<f64>,
}

fn layer_offsets() -> [(usize, usize); NUM_LAYERS] {
    let mut out = [(0, 0); NUM_LAYERS];
    let mut off = 0;
    for (l, slot) in out.iter_mut().enumerate() {
        let (fan_in, fan_out) = (LAYER_WIDTHS[l], LAYER_WIDTHS[l + 1]);
        *slot = (off, off + fan_in * fan_out);
        off += fan_in * fan_out + fan_out;
    }
    out
}

impl MediumNetParams {
    pub fn param_count() -> usize {
        (0..NUM_LAYERS)
            .map(|l| LAYER_WIDTHS[l] * LAYER_WIDTHS[l + 1] + LAYER_WIDTHS[l + 1])
            .sum()
    }

    pub fn zeros() -> Self {
        Self {
            data: vec![0.0; Self::param_count()],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Option<Self> {
        (data.len() == Self::param_count()).then_some(Self { data })
    }

    /// A network that predicts `sample` for every direction: zero weights and
    /// output biases set to the inverse activations.
    pub fn constant(sample: &MediumSample) -> Self {
        let mut p = Self::zeros();
        let bias = p.bias_mut(NUM_LAYERS - 1);
        for c in 0..3 {
            bias[c] = softplus_inv(sample.sigma_attn[c]);
            bias[3 + c] = softplus_inv(sample.sigma_bs[c]);
            bias[6 + c] = logit(sample.c_med[c]);
        }
        p
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Transposed weight view, `in × out`, so that `wᵀ·x` is the layer map.
    pub fn weight_t(&self, layer: usize) -> DMatrixView<'_, f64> {
        let (w, _) = layer_offsets()[layer];
        let (fan_in, fan_out) = (LAYER_WIDTHS[layer], LAYER_WIDTHS[layer + 1]);
        DMatrixView::from_slice(&self.data[w..w + fan_in * fan_out], fan_in, fan_out)
    }

    /// Raw weight block of a layer: `in × out` column-major.
    fn weight_slice(&self, layer: usize) -> &[f64] {
        let (w, _) = layer_offsets()[layer];
        &self.data[w..w + LAYER_WIDTHS[layer] * LAYER_WIDTHS[layer + 1]]
    }

    fn weight_slice_mut(&mut self, layer: usize) -> &mut [f64] {
        let (w, _) = layer_offsets()[layer];
        &mut self.data[w..w + LAYER_WIDTHS[layer] * LAYER_WIDTHS[layer + 1]]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b) = layer_offsets()[layer];
        &self.data[b..b + LAYER_WIDTHS[layer + 1]]
    }

    fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b) = layer_offsets()[layer];
        &mut self.data[b..b + LAYER_WIDTHS[layer + 1]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &MediumNetParams) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Deterministic initialization: Glorot-uniform weights (the output layer
/// shrunk by 100×), zero hidden biases, output biases giving densities of
/// [`INIT_SIGMA`] and a mid-gray medium color.
pub fn medium_init(seed: u64) -> MediumNetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MediumNetParams::zeros();
    for layer in 0..NUM_LAYERS {
        let (fan_in, fan_out) = (LAYER_WIDTHS[layer], LAYER_WIDTHS[layer + 1]);
        let mut limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        if layer == NUM_LAYERS - 1 {
            limit *= 0.01;
        }
        for v in p.weight_slice_mut(layer).iter_mut() {
            *v = rng.gen_range(-limit..limit);
        }
    }
    let b = p.bias_mut(NUM_LAYERS - 1);
    for c in 0..3 {
        b[c] = softplus_inv(INIT_SIGMA);
        b[3 + c] = softplus_inv(INIT_SIGMA);
        b[6 + c] = 0.0;
    }
    p
}

/// Cached activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct MediumTape {
    chunks: Vec<ChunkTape>,
}

#[derive(Debug, Clone)]
struct ChunkTape {
    dirs: Vec<Vector3<f64>>,
    encoding: DMatrix<f64>,
    /// Post-activation hidden layers.
    hidden: [DMatrix<f64>; NUM_LAYERS - 1],
    samples: Vec<MediumSample>,
}

fn forward_chunk(params: &MediumNetParams, dirs: &[Vector3<f64>]) -> ChunkTape {
    let n = dirs.len();
    let mut encoding = DMatrix::zeros(SH_DIM, n);
    for (j, d) in dirs.iter().enumerate() {
        encoding.column_mut(j).copy_from_slice(&sh_encode(d));
    }
    let layer = |l: usize, x: &DMatrix<f64>| -> DMatrix<f64> {
        let (fan_in, fan_out) = (LAYER_WIDTHS[l], LAYER_WIDTHS[l + 1]);
        let bias = params.bias(l);
        let mut z = DMatrix::from_fn(fan_out, n, |r, _| bias[r]);
        gemm(
            (fan_out, fan_in, n),
            params.weight_slice(l),
            (fan_in, 1),
            x.as_slice(),
            (1, fan_in),
            1.0,
            z.as_mut_slice(),
            (1, fan_out),
        );
        z
    };
    let mut h1 = layer(0, &encoding);
    h1.apply(|v| *v = squareplus(*v));
    let mut h2 = layer(1, &h1);
    h2.apply(|v| *v = squareplus(*v));
    let mut h3 = layer(2, &h2);
    h3.apply(|v| *v = squareplus(*v));
    let out = layer(3, &h3);
    let samples = out
        .column_iter()
        .map(|c| MediumSample {
            sigma_attn: Vector3::new(softplus(c[0]), softplus(c[1]), softplus(c[2])),
            sigma_bs: Vector3::new(softplus(c[3]), softplus(c[4]), softplus(c[5])),
            c_med: Vector3::new(sigmoid(c[6]), sigmoid(c[7]), sigmoid(c[8])),
        })
        .collect();
    ChunkTape {
        dirs: dirs.to_vec(),
        encoding,
        hidden: [h1, h2, h3],
        samples,
    }
}

/// Gradients of one chunk: parameter gradients plus, optionally, gradients on
/// the 16-dim encodings (columns).
fn backward_chunk(
    params: &MediumNetParams,
    tape: &ChunkTape,
    grads: &[MediumSample],
    want_encoding_grad: bool,
) -> (MediumNetParams, Option<DMatrix<f64>>) {
    let n = tape.dirs.len();
    let mut dz = DMatrix::zeros(9, n);
    for (j, (s, g)) in tape.samples.iter().zip(grads).enumerate() {
        for c in 0..3 {
            dz[(c, j)] = g.sigma_attn[c] * softplus_grad_from_output(s.sigma_attn[c]);
            dz[(3 + c, j)] = g.sigma_bs[c] * softplus_grad_from_output(s.sigma_bs[c]);
            dz[(6 + c, j)] = g.c_med[c] * s.c_med[c] * (1.0 - s.c_med[c]);
        }
    }
    let mut out = MediumNetParams::zeros();
    for layer in (0..NUM_LAYERS).rev() {
        let input = if layer == 0 {
            &tape.encoding
        } else {
            &tape.hidden[layer - 1]
        };
        let (fan_in, fan_out) = (LAYER_WIDTHS[layer], LAYER_WIDTHS[layer + 1]);
        // dWᵀ (in × out) = X · dZᵀ
        gemm(
            (fan_in, n, fan_out),
            input.as_slice(),
            (1, fan_in),
            dz.as_slice(),
            (fan_out, 1),
            0.0,
            out.weight_slice_mut(layer),
            (1, fan_in),
        );
        for (b, row) in out.bias_mut(layer).iter_mut().zip(dz.row_iter()) {
            *b = row.sum();
        }
        if layer == 0 && !want_encoding_grad {
            break;
        }
        let mut dx = DMatrix::zeros(fan_in, n);
        gemm(
            (fan_in, fan_out, n),
            params.weight_slice(layer),
            (1, fan_in),
            dz.as_slice(),
            (1, fan_out),
            0.0,
            dx.as_mut_slice(),
            (1, fan_in),
        );
        if layer == 0 {
            return (out, Some(dx));
        }
        dx.zip_apply(&tape.hidden[layer - 1], |g, y| *g *= squareplus_grad_from_output(y));
        dz = dx;
    }
    (out, None)
}

/// Batched forward pass over many directions.
pub fn forward_batch(params: &MediumNetParams, dirs: &[Vector3<f64>]) -> (Vec<MediumSample>, MediumTape) {
    let chunks: Vec<ChunkTape> = dirs
        .par_chunks(CHUNK)
        .map(|c| forward_chunk(params, c))
        .collect();
    let samples = chunks.iter().flat_map(|c| c.samples.iter().copied()).collect();
    (samples, MediumTape { chunks })
}

/// Parameter gradients of `Σ_j ⟨grads_j, sample_j⟩` for a taped batch.
pub fn backward_batch(params: &MediumNetParams, tape: &MediumTape, grads: &[MediumSample]) -> MediumNetParams {
    let partials: Vec<MediumNetParams> = tape
        .chunks
        .par_iter()
        .enumerate()
        .map(|(i, c)| backward_chunk(params, c, &grads[i * CHUNK..i * CHUNK + c.dirs.len()], false).0)
        .collect();
    let mut total = MediumNetParams::zeros();
    for p in &partials {
        total.add_assign(p);
    }
    total
}

pub fn medium_forward(params: &MediumNetParams, dir: &Vector3<f64>) -> MediumSample {
    forward_chunk(params, std::slice::from_ref(dir)).samples[0]
}

/// Exact reverse-mode gradients of [`medium_forward`] for an output gradient
/// `grad_out`: parameter gradients and the gradient on `dir`.
pub fn medium_backward(
    params: &MediumNetParams,
    dir: &Vector3<f64>,
    grad_out: &MediumSample,
) -> (MediumNetParams, Vector3<f64>) {
    let tape = forward_chunk(params, std::slice::from_ref(dir));
    let (g, enc) = backward_chunk(params, &tape, std::slice::from_ref(grad_out), true);
    let enc = enc.expect("encoding gradient requested");
    let mut genc = [0.0; SH_DIM];
    genc.copy_from_slice(enc.column(0).as_slice());
    (g, sh_encode_vjp(dir, &genc))
}
