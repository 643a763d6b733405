//! Encodes an upsampled low-resolution view and its high-resolution reference
//! twin, then matches them coarse to fine with cosine similarity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatforge::assets::{gen_scene, SceneSpec};
use splatforge::features::{encode, init_params, match_features, FeatureConfig, PyramidRole};
use splatforge::geometry::upsample_bicubic;
use splatforge::numerics::ParamStore;

fn main() -> splatforge::Result<()> {
    let cfg = FeatureConfig::default();
    let mut params = ParamStore::new();
    init_params(&mut params, &cfg, &mut ChaCha8Rng::seed_from_u64(0));

    let scene = gen_scene(&SceneSpec::desk("desk", 64, 64), 3, 4)?;
    let input = encode(
        &upsample_bicubic(&scene.lr[0], 4),
        &params,
        PyramidRole::Input,
    )?;
    let reference = encode(&scene.reference, &params, PyramidRole::Reference)?;
    let matches = match_features(&input, &reference, cfg.stride, cfg.radius)?;

    for (l, lm) in matches.levels.iter().enumerate() {
        let mean = lm.scores.iter().sum::<f64>() / lm.scores.len() as f64;
        let shift = lm
            .coords
            .iter()
            .enumerate()
            .map(|(i, &(u, v))| {
                let (x, y) = ((i % lm.width) as f64, (i / lm.width) as f64);
                ((u as f64 - x).powi(2) + (v as f64 - y).powi(2)).sqrt()
            })
            .sum::<f64>()
            / lm.coords.len() as f64;
        println!(
            "level {l}: {}x{}  mean score {mean:.3}  mean offset {shift:.2} px",
            lm.width, lm.height
        );
    }
    Ok(())
}
