//! Sobel texture richness of a synthetic desk view and the pixels that a
//! quantile threshold would densify.

use splatforge::assets::{gen_scene, write_png, write_png_normalized, SceneSpec};
use splatforge::texture::{select_textured, sobel_tr};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("splatforge_texture");
    std::fs::create_dir_all(&out)?;
    let scene = gen_scene(&SceneSpec::desk("desk", 96, 96), 1, 4)?;
    let view = &scene.hr[0];
    let tr = sobel_tr(view)?;
    write_png(&out.join("view.png"), view)?;
    write_png_normalized(&out.join("tr.png"), &tr.values)?;

    let values = tr.values.data();
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    println!("texture richness: mean {mean:.3}, max {max:.3}");
    for q in [0.5, 0.8, 0.95] {
        let picked = select_textured(values, q).iter().filter(|&&s| s).count();
        println!(
            "quantile {q:.2}: {picked} of {} pixels selected",
            values.len()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
