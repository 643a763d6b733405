//! Trains the full pipeline and two ablations (no texture-aware densification,
//! no reference features) on a five-scene desk suite with equal budgets.

use splatforge::assets::{gen_scene, SceneData, SceneSpec};
use splatforge::pipeline::PipelineConfig;
use splatforge::training::ablation;

fn main() -> splatforge::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .map_or(100, |s| s.parse().expect("steps"));
    let mut cfg = PipelineConfig::default();
    cfg.depth.far = 10.0;
    let mut scenes = Vec::new();
    let mut refs = Vec::new();
    for (k, spec) in SceneSpec::texture_suite(5, 64).iter().enumerate() {
        let syn = gen_scene(spec, k as u64, cfg.factor)?;
        refs.push(Some(syn.reference.clone()));
        scenes.push(SceneData::from_synthetic(&syn));
    }
    let r = ablation(&scenes, &refs, &cfg, steps)?;
    println!("held-out psnr after {steps} steps");
    println!("  full pipeline        {:.3} dB", r.full);
    println!("  without densify      {:.3} dB", r.no_densify);
    println!("  without reference    {:.3} dB", r.no_reference);
    Ok(())
}
