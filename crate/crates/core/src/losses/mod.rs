//! Semantic-guided photometric loss, isotropic regularizer and their sum.
//!
//! Water pixels (mask = 1) supervise the medium image; all other pixels
//! supervise the composite. SSIM runs on the full composite.

mod ssim;

use nalgebra::Vector3;

use crate::error::{LossError, ShapeError};
use crate::image::Image;
use crate::medium::MediumNetParams;
use crate::render::{render_backward_taped, ImageGrads, RenderGradients, RenderOutput, RenderTape};
use crate::scene::{CameraIntrinsics, GaussianPrimitive};

pub use ssim::{ssim, SsimOutput, C1, C2, WINDOW, WINDOW_SIGMA};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_sempho: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            lambda_sempho: 1.0,
            lambda_s: 3.0,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        self.lambda_ssim >= 0.0 && self.lambda_ssim <= 1.0 && self.lambda_sempho >= 0.0 && self.lambda_s >= 0.0
    }
}

fn check_mask(img: &Image, mask: &[bool]) -> Result<(), ShapeError> {
    if mask.len() == img.len() {
        Ok(())
    } else {
        Err(ShapeError {
            expected: (img.width, img.height),
            found: (mask.len(), 1),
        })
    }
}

/// Mean absolute error over the pixels where `select` holds, and its
/// gradient with respect to `render`.
fn masked_l1(render: &Image, target: &Image, mask: &[bool], select: bool) -> Result<(f64, Image), LossError> {
    render.check_shape(target)?;
    check_mask(render, mask)?;
    let n = mask.iter().filter(|&&m| m == select).count();
    let mut grad = Image::new(render.width, render.height);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let norm = 1.0 / (3 * n) as f64;
    let mut value = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m != select {
            continue;
        }
        for ch in 0..3 {
            let d = render.pixels[i][ch] - target.pixels[i][ch];
            value += d.abs();
            grad.pixels[i][ch] = if d > 0.0 {
                norm
            } else if d < 0.0 {
                -norm
            } else {
                0.0
            };
        }
    }
    Ok((value * norm, grad))
}

/// L1 between the medium image and the target over water pixels, averaged
/// over those pixels and the three channels.
pub fn medium_photo_loss(render_med: &Image, target: &Image, mask: &[bool]) -> Result<(f64, Image), LossError> {
    masked_l1(render_med, target, mask, true)
}

/// L1 between the composite and the target over non-water pixels.
pub fn composite_photo_loss(render: &Image, target: &Image, mask: &[bool]) -> Result<(f64, Image), LossError> {
    masked_l1(render, target, mask, false)
}

#[derive(Debug, Clone)]
pub struct SemphoLoss {
    pub value: f64,
    pub medium_l1: f64,
    pub composite_l1: f64,
    pub ssim: f64,
    pub grads: ImageGrads,
}

/// `(1-λ_ssim)(L_med + L_c) + λ_ssim (1 - SSIM(composite, target))`.
pub fn sempho_loss(render: &RenderOutput, target: &Image, mask: &[bool], w: &LossWeights) -> Result<SemphoLoss, LossError> {
    let (l_med, g_med) = medium_photo_loss(&render.medium, target, mask)?;
    let (l_c, g_c) = composite_photo_loss(&render.composite, target, mask)?;
    let s = ssim(&render.composite, target)?;
    let l = w.lambda_ssim;
    let value = (1.0 - l) * (l_med + l_c) + l * (1.0 - s.value);

    let mut g_comp = g_c;
    for (g, gs) in g_comp.pixels.iter_mut().zip(&s.grad_a.pixels) {
        for ch in 0..3 {
            g[ch] = (1.0 - l) * g[ch] - l * gs[ch];
        }
    }
    let mut g_medium = g_med;
    g_medium.pixels.iter_mut().flatten().for_each(|v| *v *= 1.0 - l);
    Ok(SemphoLoss {
        value,
        medium_l1: l_med,
        composite_l1: l_c,
        ssim: s.value,
        grads: ImageGrads {
            composite: Some(g_comp),
            medium: Some(g_medium),
            ..ImageGrads::default()
        },
    })
}

/// `Σ_{i∈visible} Σ_axis |S_i,axis − mean(S_i)|` and its gradient with
/// respect to every primitive's log-scales (zero off the visible set).
pub fn isotropic_loss(map: &[GaussianPrimitive], visible: &[usize]) -> (f64, Vec<Vector3<f64>>) {
    let mut grads = vec![Vector3::zeros(); map.len()];
    let mut value = 0.0;
    for &i in visible {
        let s = map[i].scale();
        let mean = s.mean();
        let sign = (s - Vector3::repeat(mean)).map(|d| {
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        value += (s - Vector3::repeat(mean)).abs().sum();
        // ∂/∂S_a = sign_a − mean(sign); chain through S = exp(log_scale)
        let g_s = sign - Vector3::repeat(sign.mean());
        grads[i] = g_s.component_mul(&s);
    }
    (value, grads)
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub sempho: SemphoLoss,
    pub isotropic: f64,
    /// Image gradients, already scaled by `λ_sempho`.
    pub image_grads: ImageGrads,
    /// Log-scale gradients of the isotropic term, already scaled by `λ_s`.
    pub log_scale_grads: Vec<Vector3<f64>>,
}

/// `λ_sempho L_sempho + λ_s L_s`.
pub fn total_loss(
    render: &RenderOutput,
    target: &Image,
    mask: &[bool],
    map: &[GaussianPrimitive],
    w: &LossWeights,
) -> Result<TotalLoss, LossError> {
    let sempho = sempho_loss(render, target, mask, w)?;
    let (iso, mut iso_grads) = isotropic_loss(map, &render.visible);
    iso_grads.iter_mut().for_each(|g| *g *= w.lambda_s);
    let scale = |img: &Option<Image>| {
        img.as_ref().map(|i| {
            let mut i = i.clone();
            i.pixels.iter_mut().flatten().for_each(|v| *v *= w.lambda_sempho);
            i
        })
    };
    let image_grads = ImageGrads {
        composite: scale(&sempho.grads.composite),
        object: scale(&sempho.grads.object),
        medium: scale(&sempho.grads.medium),
        clear: scale(&sempho.grads.clear),
    };
    Ok(TotalLoss {
        value: w.lambda_sempho * sempho.value + w.lambda_s * iso,
        sempho,
        isotropic: iso,
        image_grads,
        log_scale_grads: iso_grads,
    })
}

/// Pushes a [`TotalLoss`] through the renderer into primitive and medium
/// gradients.
pub fn total_loss_backward(
    loss: &TotalLoss,
    map: &[GaussianPrimitive],
    medium: &MediumNetParams,
    k: &CameraIntrinsics,
    tape: &RenderTape,
) -> RenderGradients {
    let mut g = render_backward_taped(map, medium, k, tape, &loss.image_grads);
    for (p, s) in g.primitives.iter_mut().zip(&loss.log_scale_grads) {
        p.log_scale += s;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::{medium_init, MediumSample};
    use crate::render::render_taped;
    use crate::scene::{logit, Sim3Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        let px = (0..w * h)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        Image::from_pixels(w, h, px)
    }

    #[test]
    fn photo_loss_examples() {
        let a = Image::from_pixels(2, 1, vec![[0.5; 3], [0.9; 3]]);
        let z = Image::new(2, 1);
        let mask = [true, false];
        assert_eq!(medium_photo_loss(&a, &a, &mask).unwrap().0, 0.0);
        assert_eq!(medium_photo_loss(&a, &z, &[false, false]).unwrap().0, 0.0);
        let (v, g) = medium_photo_loss(&a, &z, &mask).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert_eq!(g.pixels[1], [0.0; 3]);

        assert_eq!(composite_photo_loss(&a, &a, &mask).unwrap().0, 0.0);
        assert_eq!(composite_photo_loss(&a, &z, &[true, true]).unwrap().0, 0.0);
        let (v, _) = composite_photo_loss(&a, &z, &mask).unwrap();
        assert!((v - 0.9).abs() < 1e-15);
        assert!(medium_photo_loss(&a, &z, &[true]).is_err());
    }

    #[test]
    fn composite_loss_ignores_water_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_image(&mut rng, 6, 5);
        let t = random_image(&mut rng, 6, 5);
        let mask: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        let mut t2 = t.clone();
        for (i, m) in mask.iter().enumerate() {
            if *m {
                t2.pixels[i] = [rng.gen_range(0.0..1.0); 3];
            }
        }
        assert_eq!(
            composite_photo_loss(&r, &t, &mask).unwrap().0,
            composite_photo_loss(&r, &t2, &mask).unwrap().0
        );
    }

    #[test]
    fn isotropic_examples() {
        let iso = GaussianPrimitive::isotropic(Vector3::zeros(), 0.3, Vector3::zeros(), 0.5, 0);
        assert_eq!(isotropic_loss(&[iso, iso], &[0, 1]).0, 0.0);
        let mut aniso = iso;
        aniso.log_scale = Vector3::new(0.0, 0.0, 4f64.ln());
        let (v, _) = isotropic_loss(&[iso, aniso], &[1]);
        assert!((v - 4.0).abs() < 1e-12);
        let (v, g) = isotropic_loss(&[iso, aniso], &[0]);
        assert_eq!(v, 0.0);
        assert_eq!(g[1], Vector3::zeros());
    }

    #[test]
    fn isotropic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = GaussianPrimitive::isotropic(Vector3::zeros(), 0.3, Vector3::zeros(), 0.5, 0);
        for _ in 0..20 {
            g.log_scale = Vector3::new(rng.gen_range(-2.0..0.0), rng.gen_range(-2.0..0.0), rng.gen_range(-2.0..0.0));
            let (_, grads) = isotropic_loss(&[g], &[0]);
            for a in 0..3 {
                let h = 1e-6;
                let mut gp = g;
                let mut gm = g;
                gp.log_scale[a] += h;
                gm.log_scale[a] -= h;
                let fd = (isotropic_loss(&[gp], &[0]).0 - isotropic_loss(&[gm], &[0]).0) / (2.0 * h);
                assert!((fd - grads[0][a]).abs() < 1e-6, "{fd} vs {}", grads[0][a]);
            }
        }
    }

    struct Fixture {
        map: Vec<GaussianPrimitive>,
        medium: MediumNetParams,
        k: CameraIntrinsics,
        target: Image,
        mask: Vec<bool>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = (0..4)
            .map(|_| GaussianPrimitive {
                mu: Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(1.5..2.5)),
                rot: nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ))
                .into_inner(),
                log_scale: Vector3::new(rng.gen_range(-2.0..-1.2), rng.gen_range(-2.0..-1.2), rng.gen_range(-2.0..-1.2)),
                color: Vector3::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                opacity_logit: logit(rng.gen_range(0.4..0.9)),
                anchor: 0,
            })
            .collect();
        let k = CameraIntrinsics::new(14.0, 14.0, 6.5, 6.0, 13, 12);
        let target = random_image(&mut rng, 13, 12);
        let mask = (0..13 * 12).map(|_| rng.gen_bool(0.3)).collect();
        Fixture {
            map,
            medium: medium_init(seed),
            k,
            target,
            mask,
        }
    }

    #[test]
    fn sempho_limits() {
        let f = fixture(3);
        let out = crate::render::render(&f.map, &f.medium, &Sim3Pose::identity(), &f.k).unwrap();
        let w0 = LossWeights {
            lambda_ssim: 0.0,
            ..LossWeights::default()
        };
        let s0 = sempho_loss(&out, &f.target, &f.mask, &w0).unwrap();
        assert!((s0.value - (s0.medium_l1 + s0.composite_l1)).abs() < 1e-15);
        let w1 = LossWeights {
            lambda_ssim: 1.0,
            ..LossWeights::default()
        };
        let s1 = sempho_loss(&out, &f.target, &f.mask, &w1).unwrap();
        assert!((s1.value - (1.0 - s1.ssim)).abs() < 1e-15);

        // target equal to the render everywhere it is supervised
        let mut target = out.composite.clone();
        for (i, m) in f.mask.iter().enumerate() {
            if *m {
                target.pixels[i] = out.medium.pixels[i];
            }
        }
        let no_water = vec![false; f.mask.len()];
        let perfect = sempho_loss(&out, &out.composite, &no_water, &LossWeights::default()).unwrap();
        assert!(perfect.value.abs() < 1e-12);
        let masked = sempho_loss(&out, &target, &f.mask, &w0).unwrap();
        assert_eq!(masked.value, 0.0);
    }

    #[test]
    fn total_is_weighted_sum_of_parts() {
        let f = fixture(4);
        let out = crate::render::render(&f.map, &f.medium, &Sim3Pose::identity(), &f.k).unwrap();
        let w = LossWeights::default();
        let t = total_loss(&out, &f.target, &f.mask, &f.map, &w).unwrap();
        let s = sempho_loss(&out, &f.target, &f.mask, &w).unwrap().value;
        let i = isotropic_loss(&f.map, &out.visible).0;
        assert!((t.value - (w.lambda_sempho * s + w.lambda_s * i)).abs() < 1e-9);
        let no_iso = LossWeights { lambda_s: 0.0, ..w };
        assert!((total_loss(&out, &f.target, &f.mask, &f.map, &no_iso).unwrap().value - s).abs() < 1e-15);
        assert!(t.value >= 0.0);
    }

    #[test]
    fn composite_l1_gradient_vanishes_under_water() {
        let f = fixture(5);
        let out = crate::render::render(&f.map, &f.medium, &Sim3Pose::identity(), &f.k).unwrap();
        let (_, g) = composite_photo_loss(&out.composite, &f.target, &f.mask).unwrap();
        for (i, m) in f.mask.iter().enumerate() {
            if *m {
                assert_eq!(g.pixels[i], [0.0; 3]);
            }
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        for seed in 0..4 {
            let f = fixture(10 + seed);
            let w = LossWeights::default();
            let pose = Sim3Pose::identity();
            let eval = |map: &[GaussianPrimitive], medium: &MediumNetParams| {
                let out = crate::render::render(map, medium, &pose, &f.k).unwrap();
                total_loss(&out, &f.target, &f.mask, map, &w).unwrap().value
            };
            let (out, tape) = render_taped(&f.map, &f.medium, &pose, &f.k).unwrap();
            let loss = total_loss(&out, &f.target, &f.mask, &f.map, &w).unwrap();
            let grads = total_loss_backward(&loss, &f.map, &f.medium, &f.k, &tape);
            let h = 1e-6;
            for (i, pg) in grads.primitives.iter().enumerate() {
                for (j, a) in pg.to_array().iter().enumerate() {
                    let perturb = |d: f64| {
                        let mut m = f.map.clone();
                        let g = &mut m[i];
                        match j {
                            0..=2 => g.mu[j] += d,
                            3..=6 => g.rot.coords[j - 3] += d,
                            7..=9 => g.log_scale[j - 7] += d,
                            10..=12 => g.color[j - 10] += d,
                            _ => g.opacity_logit += d,
                        }
                        eval(&m, &f.medium)
                    };
                    let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                    assert!(
                        (fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()) + 1e-6,
                        "seed {seed} primitive {i} param {j}: {a} vs {fd}"
                    );
                }
            }
            let n = f.medium.as_slice().len();
            for idx in n - 9..n {
                let perturb = |d: f64| {
                    let mut m = f.medium.clone();
                    m.as_mut_slice()[idx] += d;
                    eval(&f.map, &m)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                let a = grads.medium.as_slice()[idx];
                assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()) + 1e-6, "medium {idx}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn zero_medium_constant_is_finite() {
        let zero = MediumSample {
            sigma_attn: Vector3::zeros(),
            sigma_bs: Vector3::zeros(),
            c_med: Vector3::repeat(0.5),
        };
        assert!(MediumNetParams::constant(&zero).is_finite());
    }
}
