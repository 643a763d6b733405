//! Composite loss, image metrics and the training loop.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assets::SceneData;
use crate::error::{ensure, Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::pipeline::{self, PipelineConfig};
use crate::texture::{self, TextureMap, LUMA};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mse: f64,
    /// Weight of the gradient-map L1 term standing in for a learned perceptual metric.
    pub perceptual: f64,
    pub texture: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mse: 1.0,
            perceptual: 0.05,
            texture: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.mse, self.perceptual, self.texture];
        ensure!(
            w.iter().all(|x| *x >= 0.0 && x.is_finite()),
            Invalid,
            "loss weights must be non-negative"
        );
        ensure!(
            w.iter().any(|x| *x > 0.0),
            Invalid,
            "at least one loss weight must be positive"
        );
        Ok(())
    }
}

/// Weighted loss terms; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub mse: f64,
    pub perceptual: f64,
    pub texture: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mse: Var,
    pub perceptual: Var,
    pub texture: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossComponents {
        LossComponents {
            mse: g.scalar_value(self.mse),
            perceptual: g.scalar_value(self.perceptual),
            texture: g.scalar_value(self.texture),
            total: g.scalar_value(self.total),
        }
    }
}

pub fn mse_graph(g: &Graph, a: Var, b: Var) -> Var {
    g.mean(g.square(g.sub(a, b)))
}

/// Mean absolute difference of the horizontal and vertical Sobel responses.
pub fn gradient_l1_graph(g: &Graph, render: Var, gt: Var) -> Var {
    let (rx, ry) = texture::sobel_graph(g, render);
    let (gx, gy) = texture::sobel_graph(g, gt);
    let dx = g.mean(g.abs(g.sub(rx, gx)));
    let dy = g.mean(g.abs(g.sub(ry, gy)));
    g.scale(g.add(dx, dy), 0.5)
}

/// Image terms for one view. The texture term is added by the caller, which
/// owns the richness predictions.
pub fn image_loss_graph(g: &Graph, render: Var, gt: Var, cfg: &LossConfig) -> Result<(Var, Var)> {
    let (rs, gs) = (g.shape(render), g.shape(gt));
    ensure!(
        rs == gs,
        Shape,
        "render {rs:?} and ground truth {gs:?} differ"
    );
    let zero = || g.constant_scalar(0.0);
    let mse = if cfg.mse > 0.0 {
        g.scale(mse_graph(g, render, gt), cfg.mse)
    } else {
        zero()
    };
    let perc = if cfg.perceptual > 0.0 {
        g.scale(gradient_l1_graph(g, render, gt), cfg.perceptual)
    } else {
        zero()
    };
    Ok((mse, perc))
}

pub fn total_loss_graph(
    g: &Graph,
    render: Var,
    gt: Var,
    tr_pred: Var,
    tr_oracle: Var,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    let (mse, perceptual) = image_loss_graph(g, render, gt, cfg)?;
    let (ps, os) = (g.shape(tr_pred), g.shape(tr_oracle));
    ensure!(
        ps == os,
        Shape,
        "texture prediction {ps:?} and oracle {os:?} differ"
    );
    let texture = if cfg.texture > 0.0 {
        g.scale(texture::tex_loss_graph(g, tr_pred, tr_oracle), cfg.texture)
    } else {
        g.constant_scalar(0.0)
    };
    let total = g.add(g.add(mse, perceptual), texture);
    Ok(LossVars {
        mse,
        perceptual,
        texture,
        total,
    })
}

pub fn total_loss(
    render: &Tensor,
    gt: &Tensor,
    tr_pred: &TextureMap,
    tr_oracle: &TextureMap,
    cfg: &LossConfig,
) -> Result<LossComponents> {
    let g = Graph::new();
    let vars = total_loss_graph(
        &g,
        g.constant(render.clone()),
        g.constant(gt.clone()),
        g.constant(tr_pred.values.clone()),
        g.constant(tr_oracle.values.clone()),
        cfg,
    )?;
    g.check()?;
    Ok(vars.values(&g))
}

pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure!(
        a.shape() == b.shape(),
        Shape,
        "psnr of {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    ensure!(!a.is_empty(), Invalid, "psnr of empty images");
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn luminance(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w, c) = img.hwc()?;
    let lum = match c {
        1 => img.data().to_vec(),
        3 => img
            .data()
            .chunks_exact(3)
            .map(|p| LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2])
            .collect(),
        _ => return Err(Error::Shape(format!("ssim needs 1 or 3 channels, got {c}"))),
    };
    Ok((h, w, lum))
}

/// Single-scale SSIM on luminance with an 11×11 Gaussian window (σ = 1.5),
/// averaged over every position where the window fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure!(
        a.shape() == b.shape(),
        Shape,
        "ssim of {:?} and {:?}",
        a.shape(),
        b.shape()
    );
    let (h, w, la) = luminance(a)?;
    let (_, _, lb) = luminance(b)?;
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        Invalid,
        "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
    );
    let half = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let norm: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / norm).collect();
    let mut total = 0.0;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, wy) in g1.iter().enumerate() {
                for (dx, wx) in g1.iter().enumerate() {
                    let k = wy * wx;
                    let p = (y + dy) * w + x + dx;
                    let (u, v) = (la[p], lb[p]);
                    ma += k * u;
                    mb += k * v;
                    saa += k * u * u;
                    sbb += k * v * v;
                    sab += k * u * v;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (oh * ow) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossComponents,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    /// Number of optimiser steps taken before the evaluation.
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainReport {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss.total)
    }

    /// One row per step; evaluation columns are filled on the step an
    /// evaluation followed and left empty otherwise.
    pub fn write_csv(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(
            out,
            "step,loss_mse,loss_perc,loss_tex,psnr,ssim,loss_total,seconds"
        )?;
        for s in &self.steps {
            let eval = self.evals.iter().find(|e| e.step == s.step + 1);
            let (p, q) = eval.map_or((String::new(), String::new()), |e| {
                (format!("{:.6}", e.psnr), format!("{:.6}", e.ssim))
            });
            writeln!(
                out,
                "{},{:.9e},{:.9e},{:.9e},{},{},{:.9e},{:.6}",
                s.step,
                s.loss.mse,
                s.loss.perceptual,
                s.loss.texture,
                p,
                q,
                s.loss.total,
                s.seconds
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_csv(&mut file)
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Mean held-out PSNR and SSIM over `scenes`.
pub fn evaluate(
    scenes: &[SceneData],
    cfg: &PipelineConfig,
    params: &ParamStore,
    references: &[Option<Tensor>],
) -> Result<(f64, f64)> {
    let (mut p, mut s, mut n) = (0.0, 0.0, 0usize);
    for (scene, reference) in scenes.iter().zip(references) {
        for &v in &scene.roles.held_out {
            let render =
                pipeline::render_view(scene, reference.as_ref(), cfg, params, &scene.cameras[v])?;
            p += psnr(&render, &scene.hr[v])?;
            s += ssim(&render, &scene.hr[v])?;
            n += 1;
        }
    }
    ensure!(n > 0, Invalid, "no held-out views to evaluate");
    Ok((p / n as f64, s / n as f64))
}

/// Optimises `params` for `steps` steps, cycling through the scenes in order.
/// `references[i]` is the reference twin of scene `i`, if any.
pub fn train(
    scenes: &[SceneData],
    references: &[Option<Tensor>],
    cfg: &PipelineConfig,
    params: &mut ParamStore,
    steps: usize,
) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(
        !scenes.is_empty(),
        Invalid,
        "training needs at least one scene"
    );
    ensure!(
        references.len() == scenes.len(),
        Invalid,
        "need one reference slot per scene"
    );
    for s in scenes {
        ensure!(
            s.cameras.len() >= 3,
            Invalid,
            "scene `{}` has {} views, need at least 3",
            s.id,
            s.cameras.len()
        );
    }
    let mut report = TrainReport::default();
    for step in 0..steps {
        let start = Instant::now();
        let k = step % scenes.len();
        let g = Graph::new();
        let loss = pipeline::training_loss(&g, &scenes[k], references[k].as_ref(), cfg, params)?;
        g.check()?;
        params.backward(&g, loss.total)?;
        params.adam_step(&cfg.adam)?;
        report.steps.push(StepRecord {
            step,
            loss: loss.values(&g),
            seconds: start.elapsed().as_secs_f64(),
        });
        if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == steps) {
            let (p, s) = evaluate(scenes, cfg, params, references)?;
            report.evals.push(EvalRecord {
                step: step + 1,
                psnr: p,
                ssim: s,
            });
        }
    }
    Ok(report)
}

/// Held-out PSNR (dB) of the full pipeline and of two ablated variants after
/// identical training budgets from identical initial parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub full: f64,
    /// Texture-aware densification off (`quantile = 1.0`).
    pub no_densify: f64,
    /// Warped reference features replaced by zeros.
    pub no_reference: f64,
}

impl AblationReport {
    pub fn full_is_best(&self) -> bool {
        self.full >= self.no_densify && self.full >= self.no_reference
    }
}

pub fn ablation(
    scenes: &[SceneData],
    references: &[Option<Tensor>],
    cfg: &PipelineConfig,
    steps: usize,
) -> Result<AblationReport> {
    let run = |variant: &PipelineConfig| -> Result<f64> {
        let mut params = pipeline::init_params(variant)?;
        train(scenes, references, variant, &mut params, steps)?;
        Ok(evaluate(scenes, variant, &params, references)?.0)
    };
    let base = PipelineConfig {
        eval_every: 0,
        ..cfg.clone()
    };
    let mut no_densify = base.clone();
    no_densify.densify.quantile = 1.0;
    let no_reference = PipelineConfig {
        use_reference: false,
        ..base.clone()
    };
    Ok(AblationReport {
        full: run(&base)?,
        no_densify: run(&no_densify)?,
        no_reference: run(&no_reference)?,
    })
}
