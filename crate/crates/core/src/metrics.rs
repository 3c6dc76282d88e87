//! Image and trajectory quality metrics.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use crate::error::MetricsError;
use crate::image::Image;
use crate::scene::Sim3Pose;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    a.check_shape(b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).powi(2)))
        .sum();
    Ok(sum / (3 * a.len().max(1)) as f64)
}

/// `10 log10(1 / MSE)` for images in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP)
    })
}

/// Similarity transform minimizing `Σ ‖dst_i − (s R src_i + t)‖²`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Sim3Pose, MetricsError> {
    if src.len() != dst.len() {
        return Err(MetricsError::LengthMismatch(src.len(), dst.len()));
    }
    let n = src.len();
    if n < 3 {
        return Err(MetricsError::TooShort(n));
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let distinct = |pts: &[Vector3<f64>]| {
        let mut uniq: Vec<&Vector3<f64>> = Vec::new();
        for p in pts {
            if uniq.iter().all(|u| (*u - p).norm() > 1e-12) {
                uniq.push(p);
                if uniq.len() >= 3 {
                    break;
                }
            }
        }
        uniq.len()
    };
    if var_s <= 1e-24 || distinct(src) < 3 || distinct(dst) < 3 {
        return Err(MetricsError::Degenerate);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_s;
    if !(scale > 0.0) {
        return Err(MetricsError::Degenerate);
    }
    let t = mu_d - scale * r * mu_s;
    let rot = nalgebra::UnitQuaternion::from_matrix(&r);
    Ok(Sim3Pose::new(scale, rot, t))
}

/// RMSE of translation residuals after Sim(3) alignment of `estimated` onto
/// `ground_truth`.
pub fn ate_rmse(estimated: &[Vector3<f64>], ground_truth: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    let align = umeyama(estimated, ground_truth)?;
    let sq: f64 = estimated
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| (align.apply(e) - g).norm_squared())
        .sum();
    Ok((sq / estimated.len() as f64).sqrt())
}

/// Convenience over poses: uses their translations.
pub fn ate_rmse_poses(estimated: &[Sim3Pose], ground_truth: &[Sim3Pose]) -> Result<f64, MetricsError> {
    let e: Vec<_> = estimated.iter().map(|p| p.translation).collect();
    let g: Vec<_> = ground_truth.iter().map(|p| p.translation).collect();
    ate_rmse(&e, &g)
}

/// A labeled table of numeric metrics, printable as aligned text or CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MetricsTable {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) {
        assert_eq!(values.len(), self.columns.len(), "row width does not match the header");
        self.rows.push((label.into(), values));
    }

    /// Appends a `mean` row over all current rows.
    pub fn push_mean(&mut self) {
        let n = self.rows.len().max(1) as f64;
        let means = (0..self.columns.len())
            .map(|c| self.rows.iter().map(|(_, v)| v[c]).sum::<f64>() / n)
            .collect();
        self.rows.push(("mean".to_string(), means));
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (label, values) in &self.rows {
            s.push_str(label);
            for v in values {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(4);
        let mut s = format!("{:<label_w$}", "view");
        for c in &self.columns {
            let _ = write!(s, "  {c:>12}");
        }
        s.push('\n');
        for (label, values) in &self.rows {
            let _ = write!(s, "{label:<label_w$}");
            for v in values {
                let _ = write!(s, "  {v:>12.4}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(rng: &mut ChaCha8Rng) -> Image {
        Image::from_pixels(
            5,
            4,
            (0..20)
                .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
                .collect(),
        )
    }

    #[test]
    fn psnr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let c1 = Image::filled(4, 4, [0.5; 3]);
        let c2 = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&c1, &c2).unwrap() - 20.0).abs() < 1e-9);
        let b = random_image(&mut rng);
        let mut m = 0.0;
        for (p, q) in a.pixels.iter().zip(&b.pixels) {
            for c in 0..3 {
                m += (p[c] - q[c]) * (p[c] - q[c]);
            }
        }
        m /= 60.0;
        assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-9);
        assert!(psnr(&a, &Image::new(3, 3)).is_err());
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn ate_identity_and_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_trajectory(&mut rng, 30);
        assert!(ate_rmse(&gt, &gt).unwrap() < 1e-12);
        let t = Sim3Pose::new(
            2.7,
            UnitQuaternion::from_scaled_axis(Vector3::new(0.4, -1.1, 0.3)),
            Vector3::new(5.0, -3.0, 1.0),
        );
        let est: Vec<_> = gt.iter().map(|p| t.apply(p)).collect();
        assert!(ate_rmse(&est, &gt).unwrap() < 1e-9);
        assert!(ate_rmse(&gt, &est).unwrap() < 1e-9);
    }

    #[test]
    fn ate_noise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_trajectory(&mut rng, 5000);
        let sigma = 0.05;
        let n = Normal::new(0.0, sigma).unwrap();
        let est: Vec<_> = gt
            .iter()
            .map(|p| p + Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng)))
            .collect();
        let ate = ate_rmse(&est, &gt).unwrap();
        let expected = sigma * 3f64.sqrt();
        assert!((ate - expected).abs() < 0.1 * expected, "{ate} vs {expected}");
    }

    #[test]
    fn ate_errors() {
        let p = vec![Vector3::zeros(); 3];
        assert!(matches!(ate_rmse(&p, &p[..2]), Err(MetricsError::LengthMismatch(3, 2))));
        assert!(matches!(ate_rmse(&p[..2], &p[..2]), Err(MetricsError::TooShort(2))));
        let two = vec![Vector3::zeros(), Vector3::x(), Vector3::zeros()];
        assert!(matches!(ate_rmse(&two, &two), Err(MetricsError::Degenerate)));
    }

    #[test]
    fn table_formats() {
        let mut t = MetricsTable::new(["psnr", "ssim"]);
        t.push("000003", vec![30.0, 0.9]);
        t.push("000007", vec![32.0, 0.95]);
        t.push_mean();
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,31.000000,0.925000"));
        assert!(t.to_text().contains("mean"));
    }
}
