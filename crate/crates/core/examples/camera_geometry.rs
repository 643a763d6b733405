//! Pinhole projection, unprojection and the plane-sweep transfer between two views.

use nalgebra::Vector3;
use splatforge::depth::DepthCandidates;
use splatforge::geometry::{plane_sweep, Camera};

fn main() -> splatforge::Result<()> {
    let up = Vector3::new(0.0, -1.0, 0.0);
    let target = Vector3::new(0.0, 0.0, 0.0);
    let a = Camera::look_at(
        Vector3::new(-0.3, 0.0, -2.0),
        target,
        up,
        60.0,
        60.0,
        64,
        48,
    )?;
    let b = Camera::look_at(Vector3::new(0.3, 0.0, -2.0), target, up, 60.0, 60.0, 64, 48)?;

    let p = Vector3::new(0.1, -0.2, 0.4);
    let (u, v, z) = a.project(&p)?;
    let back = a.unproject(u, v, z)?;
    println!(
        "world {p:?} -> pixel ({u:.3}, {v:.3}) at depth {z:.3}; round trip error {:.1e}",
        (back - p).norm()
    );

    let (ub, vb, _) = b.project(&p)?;
    println!(
        "same point in view b: ({ub:.3}, {vb:.3}), disparity {:.3} px",
        u - ub
    );

    let candidates = DepthCandidates::inverse_uniform(1.0, 6.0, 8)?;
    let sweep = plane_sweep(&a, &b, &candidates)?;
    for (d, valid) in candidates.values().iter().zip(&sweep.valid) {
        let seen = valid.iter().filter(|&&v| v).count();
        println!(
            "plane {d:6.3} m: {seen:5} of {} pixels land inside view b",
            valid.len()
        );
    }
    Ok(())
}
