//! Feed-forward reconstruction of a synthetic scene with untrained weights:
//! primitive counts per stage and a render from a held-out camera.

use splatforge::assets::{gen_scene, write_png, SceneData, SceneSpec};
use splatforge::pipeline::{init_params, reconstruct, render_view, PipelineConfig};
use splatforge::training::{psnr, ssim};

fn main() -> splatforge::Result<()> {
    let cfg = PipelineConfig::default();
    let params = init_params(&cfg)?;
    let syn = gen_scene(&SceneSpec::desk("desk", 64, 64), 2, cfg.factor)?;
    let scene = SceneData::from_synthetic(&syn);

    let rec = reconstruct(&scene, Some(&syn.reference), &cfg, &params)?;
    let c = rec.counts;
    println!(
        "coarse {}  densified parents {}  refined {}",
        c.coarse, c.dense, c.refined
    );

    let held = scene.roles.held_out[0];
    let image = render_view(
        &scene,
        Some(&syn.reference),
        &cfg,
        &params,
        &scene.cameras[held],
    )?;
    println!(
        "held-out view {held}: psnr {:.2} dB, ssim {:.3}",
        psnr(&image, &scene.hr[held])?,
        ssim(&image, &scene.hr[held])?
    );
    let path = std::env::temp_dir().join("splatforge_heldout.png");
    write_png(&path, &image)?;
    println!("wrote {}", path.display());
    Ok(())
}
