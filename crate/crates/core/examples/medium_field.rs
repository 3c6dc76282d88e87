//! The direction-conditioned medium network: its initial output, a network
//! that reproduces a constant medium, and the closed-form single-splat pixel.
//!
//! cargo run --release --example medium_field

use nalgebra::Vector3;
use watersplat::harness::default_medium;
use watersplat::medium::{medium_forward, medium_init, MediumNetParams};
use watersplat::render::render;
use watersplat::scene::{CameraIntrinsics, GaussianPrimitive, Sim3Pose};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let init = medium_init(0);
    for dir in [Vector3::z(), Vector3::new(1.0, 0.0, 1.0).normalize(), -Vector3::y()] {
        println!("initial network along {:?}: {:?}", dir.as_slice(), medium_forward(&init, &dir));
    }
    let water = default_medium();
    let constant = MediumNetParams::constant(&water);
    println!("constant network: {:?}", medium_forward(&constant, &Vector3::x()));

    // one opaque-ish splat straight ahead at range t
    let (t, color, alpha) = (2.5, Vector3::new(0.9, 0.4, 0.2), 0.95);
    let g = GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, t), 0.3, color, alpha, 0);
    let k = CameraIntrinsics::new(20.0, 20.0, 0.0, 0.0, 1, 1);
    let out = render(&[g], &constant, &Sim3Pose::identity(), &k)?;
    let a = g.opacity();
    for c in 0..3 {
        let expected = a * color[c] * (-water.sigma_attn[c] * t).exp()
            + water.c_med[c] * (1.0 - a * (-water.sigma_bs[c] * t).exp());
        println!("channel {c}: rendered {:.6}, closed form {expected:.6}", out.composite.pixels[0][c]);
    }
    Ok(())
}
