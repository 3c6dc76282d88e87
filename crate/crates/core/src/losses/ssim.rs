//! Mean structural similarity over valid 11×11 Gaussian windows.

use crate::error::LossError;
use crate::image::Image;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable Gaussian filter of a single-channel plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            horiz[y * ow + x] = k.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (j, kj) in k.iter().enumerate() {
            let src = &horiz[(y + j) * ow..(y + j + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kj * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter`]: scatters a valid-size map back to full size.
fn filter_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..oh {
        for (j, kj) in k.iter().enumerate() {
            let dst = &mut horiz[(y + j) * ow..(y + j + 1) * ow];
            for (d, s) in dst.iter_mut().zip(&map[y * ow..(y + 1) * ow]) {
                *d += kj * s;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = horiz[y * ow + x];
            for (i, ki) in k.iter().enumerate() {
                out[y * w + x + i] += ki * v;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SsimOutput {
    pub value: f64,
    /// ∂SSIM/∂a.
    pub grad_a: Image,
}

/// SSIM of `a` against `b`, averaged over window positions and channels,
/// with its gradient with respect to `a`.
pub fn ssim(a: &Image, b: &Image) -> Result<SsimOutput, LossError> {
    a.check_shape(b)?;
    let (w, h) = (a.width, a.height);
    if w < WINDOW || h < WINDOW {
        return Err(LossError::TooSmallForWindow {
            width: w,
            height: h,
            window: WINDOW,
        });
    }
    let k = kernel();
    let positions = (w - WINDOW + 1) * (h - WINDOW + 1);
    let norm = 1.0 / (3 * positions) as f64;
    let mut value = 0.0;
    let mut grad_a = Image::new(w, h);
    for ch in 0..3 {
        let pa: Vec<f64> = a.pixels.iter().map(|p| p[ch]).collect();
        let pb: Vec<f64> = b.pixels.iter().map(|p| p[ch]).collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter(&pa, w, h, &k);
        let mu_b = filter(&pb, w, h, &k);
        let e_aa = filter(&sq(&pa, &pa), w, h, &k);
        let e_bb = filter(&sq(&pb, &pb), w, h, &k);
        let e_ab = filter(&sq(&pa, &pb), w, h, &k);

        // per-position partials of SSIM w.r.t. μ_a, σ_a² and σ_ab
        let mut d_mu = vec![0.0; positions];
        let mut d_var = vec![0.0; positions];
        let mut d_cov = vec![0.0; positions];
        for i in 0..positions {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let n1 = 2.0 * ma * mb + C1;
            let n2 = 2.0 * cov + C2;
            let d1 = ma * ma + mb * mb + C1;
            let d2 = var_a + var_b + C2;
            let s = n1 * n2 / (d1 * d2);
            value += s * norm;
            d_mu[i] = norm * (2.0 * mb * n2 / (d1 * d2) - s * 2.0 * ma / d1);
            d_var[i] = norm * (-s / d2);
            d_cov[i] = norm * (2.0 * n1 / (d1 * d2));
        }
        // μ_a = F a, σ_a² = F a² − μ_a², σ_ab = F(ab) − μ_a μ_b
        let lin: Vec<f64> = (0..positions)
            .map(|i| d_mu[i] - 2.0 * d_var[i] * mu_a[i] - d_cov[i] * mu_b[i])
            .collect();
        let quad: Vec<f64> = d_var.iter().map(|v| 2.0 * v).collect();
        let g_lin = filter_adjoint(&lin, w, h, &k);
        let g_quad = filter_adjoint(&quad, w, h, &k);
        let g_cross = filter_adjoint(&d_cov, w, h, &k);
        for (i, g) in grad_a.pixels.iter_mut().enumerate() {
            g[ch] = g_lin[i] + g_quad[i] * pa[i] + g_cross[i] * pb[i];
        }
    }
    Ok(SsimOutput { value, grad_a })
}
