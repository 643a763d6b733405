//! Tile-based alpha compositing of a handful of anisotropic Gaussians.

use nalgebra::Vector3;
use splatforge::assets::write_png;
use splatforge::gaussians::{GaussianPrimitive, GaussianSet, Provenance};
use splatforge::geometry::Camera;
use splatforge::render::rasterize;

fn main() -> splatforge::Result<()> {
    let cam = Camera::look_at(
        Vector3::new(0.0, 0.0, -3.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        90.0,
        90.0,
        128,
        96,
    )?;
    let half = std::f64::consts::FRAC_PI_8;
    let mut set = GaussianSet::new(Provenance::Coarse);
    let blobs = [
        (
            [-0.6, 0.0, 0.0],
            [0.35, 0.08, 0.08],
            [half.cos(), 0.0, 0.0, half.sin()],
            [0.9, 0.2, 0.2],
        ),
        (
            [0.0, 0.0, 0.5],
            [0.2, 0.2, 0.2],
            [1.0, 0.0, 0.0, 0.0],
            [0.2, 0.8, 0.3],
        ),
        (
            [0.5, 0.3, -0.3],
            [0.1, 0.4, 0.1],
            [1.0, 0.0, 0.0, 0.0],
            [0.2, 0.3, 0.9],
        ),
    ];
    for (mean, scale, rotation, color) in blobs {
        set.push(GaussianPrimitive {
            mean,
            rotation,
            scale,
            opacity: 0.85,
            color,
        });
    }
    let out = rasterize(&set, &cam)?;
    let coverage = out.alpha.data().iter().filter(|&&a| a > 0.5).count();
    println!(
        "{} primitives, {coverage} pixels with alpha > 0.5",
        set.len()
    );
    let path = std::env::temp_dir().join("splatforge_blobs.png");
    write_png(&path, &out.image)?;
    println!("wrote {}", path.display());
    Ok(())
}
