//! Overfits the pipeline to one synthetic desk scene and reports the loss
//! curve and held-out PSNR before and after.

use splatforge::assets::{gen_scene, SceneData, SceneSpec};
use splatforge::pipeline::{init_params, PipelineConfig};
use splatforge::training::{evaluate, train};

fn main() -> splatforge::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .map_or(300, |s| s.parse().expect("steps"));
    let mut cfg = PipelineConfig {
        eval_every: 100,
        ..Default::default()
    };
    // the desk spans about 0.6 to 3.3 m
    cfg.depth.far = 10.0;
    let syn = gen_scene(&SceneSpec::desk("desk", 64, 64), 7, cfg.factor)?;
    let scenes = [SceneData::from_synthetic(&syn)];
    let refs = [Some(syn.reference.clone())];
    let mut params = init_params(&cfg)?;
    let (p0, s0) = evaluate(&scenes, &cfg, &params, &refs)?;
    println!("untrained held-out: psnr {p0:.2} dB, ssim {s0:.3}");
    let report = train(&scenes, &refs, &cfg, &mut params, steps)?;
    for s in report.steps.iter().step_by(25) {
        println!(
            "step {:4}  loss {:.5}  ({:.2}s)",
            s.step, s.loss.total, s.seconds
        );
    }
    for e in &report.evals {
        println!(
            "after {:4} steps: psnr {:.2} dB, ssim {:.3}",
            e.step, e.psnr, e.ssim
        );
    }
    if let (Some(a), Some(b)) = (report.initial_loss(), report.final_loss()) {
        println!("loss ratio final/initial = {:.3}", b / a);
    }
    Ok(())
}
