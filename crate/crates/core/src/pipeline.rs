//! The feed-forward reconstruction: low-resolution context views in, Gaussians out.
//!
//! Per context view: bicubic upsampling, feature pyramid, reference matching
//! and fusion. Across views: windowed attention, plane-sweep depth, one
//! primitive per high-resolution pixel, then texture-driven splitting.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::SceneData;
use crate::depth::{self, DepthConfig};
use crate::error::{ensure, Error, Result};
use crate::features::{self, FeatureConfig, FeaturePyramid, PyramidRole, LEVELS};
use crate::gaussians::{self, GaussianSet, GaussianVars, Provenance};
use crate::geometry::{self, Camera, ScaleConfig};
use crate::numerics::{AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::render;
use crate::texture::{self, DensifyConfig, TextureMap, TrSource};
use crate::training::{self, LossConfig, LossVars};

/// Which image supplies the texture-richness target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrTarget {
    /// Sobel richness of the low-resolution input itself.
    LowRes,
    /// Sobel richness of the high-resolution view, resized to the input grid.
    HighRes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub factor: usize,
    pub depth: DepthConfig,
    pub features: FeatureConfig,
    /// A quantile of exactly 1.0 switches splitting off.
    pub densify: DensifyConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    /// When false the warped reference features are replaced by zeros.
    pub use_reference: bool,
    pub tr_target: TrTarget,
    /// Evaluate held-out views every this many steps (0: never).
    pub eval_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            factor: 4,
            depth: DepthConfig::default(),
            features: FeatureConfig::default(),
            densify: DensifyConfig::default(),
            loss: LossConfig::default(),
            adam: AdamConfig {
                lr: 5e-3,
                ..AdamConfig::default()
            },
            steps: 300,
            seed: 0,
            use_reference: true,
            tr_target: TrTarget::LowRes,
            eval_every: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn densify_enabled(&self) -> bool {
        self.densify.quantile < 1.0
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            matches!(self.factor, 2 | 4 | 8),
            Invalid,
            "downsample factor must be 2, 4 or 8, got {}",
            self.factor
        );
        self.depth.validate()?;
        self.features.validate()?;
        if self.densify_enabled() {
            self.densify.validate()?;
        } else {
            ensure!(
                self.densify.quantile == 1.0,
                Invalid,
                "quantile {} outside (0, 1]",
                self.densify.quantile
            );
        }
        self.loss.validate()?;
        self.adam.validate()?;
        Ok(())
    }

    /// Checks that a scene of `height × width` fits the network.
    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        ScaleConfig::new(self.factor, height, width)?;
        let (h4, w4) = (height / 4, width / 4);
        let win = self.features.window;
        ensure!(
            h4 % win == 0 && w4 % win == 0,
            Invalid,
            "attention window {win} does not divide the {h4}x{w4} feature map"
        );
        Ok(())
    }
}

/// Fresh parameters for every learnable block, seeded by `cfg.seed`.
pub fn init_params(cfg: &PipelineConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    features::init_params(&mut store, &cfg.features, &mut rng);
    depth::init_params(&mut store, &mut rng);
    let head_input = cfg.features.c_enhanced + 3;
    gaussians::init_params(&mut store, head_input, &mut rng);
    texture::init_perceptron(&mut store, &mut rng);
    texture::init_densify(&mut store, head_input, &cfg.densify, &mut rng);
    Ok(store)
}

/// Checks that `params` was created for `cfg`.
pub fn check_params(cfg: &PipelineConfig, params: &ParamStore) -> Result<()> {
    let expected = init_params(cfg)?;
    expected.check_layout(params)?;
    params.check_layout(&expected)
}

/// Context views of a scene at low resolution, with full-resolution cameras.
#[derive(Clone, Debug)]
pub struct Context {
    pub lr: Vec<Tensor>,
    pub cameras: Vec<Camera>,
    /// Sobel richness target per view, on the low-resolution grid.
    pub tr_oracle: Vec<TextureMap>,
}

impl Context {
    pub fn from_scene(scene: &SceneData, cfg: &PipelineConfig) -> Result<Self> {
        ensure!(
            scene.roles.context.len() >= 2,
            Invalid,
            "scene `{}` needs two context views",
            scene.id
        );
        ensure!(
            scene.factor == cfg.factor,
            Invalid,
            "scene factor {} differs from config factor {}",
            scene.factor,
            cfg.factor
        );
        let mut ctx = Context {
            lr: Vec::new(),
            cameras: Vec::new(),
            tr_oracle: Vec::new(),
        };
        for &v in &scene.roles.context {
            ensure!(
                v < scene.cameras.len(),
                Invalid,
                "context view {v} missing from scene `{}`",
                scene.id
            );
            let lr = scene.lr[v].clone();
            let (h, w, _) = lr.hwc()?;
            let oracle = match cfg.tr_target {
                TrTarget::LowRes => texture::sobel_tr(&lr)?,
                TrTarget::HighRes => texture::sobel_tr(&scene.hr[v])?.resized(h, w),
            };
            ctx.lr.push(lr);
            ctx.cameras.push(scene.cameras[v].clone());
            ctx.tr_oracle.push(oracle);
        }
        Ok(ctx)
    }

    fn validate(&self, cfg: &PipelineConfig) -> Result<(usize, usize)> {
        ensure!(
            self.lr.len() >= 2 && self.lr.len() == self.cameras.len(),
            Invalid,
            "need at least two context views with cameras"
        );
        let (h, w) = (self.cameras[0].height, self.cameras[0].width);
        cfg.check_size(h, w)?;
        for (img, cam) in self.lr.iter().zip(&self.cameras) {
            ensure!(
                cam.height == h && cam.width == w,
                Shape,
                "context cameras differ in size"
            );
            let (lh, lw, c) = img.hwc()?;
            ensure!(
                c == 3 && lh * cfg.factor == h && lw * cfg.factor == w,
                Shape,
                "low-resolution view {lh}x{lw}x{c} does not match a {h}x{w} camera at factor {}",
                cfg.factor
            );
        }
        Ok((h, w))
    }
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub gaussians: GaussianVars,
    pub coarse: usize,
    pub selected: usize,
    /// Predicted richness per context view, `[h, w, 1]` on the low-resolution grid.
    pub tr_pred: Vec<Var>,
    /// Regressed depth per context view, `[H, W, 1]`.
    pub depth: Vec<Var>,
    pub refined: usize,
}

fn pyramid_values(g: &Graph, levels: &[Var; LEVELS], role: PyramidRole) -> Result<FeaturePyramid> {
    FeaturePyramid::new(
        levels
            .iter()
            .map(|v| g.value(*v).as_ref().clone())
            .collect(),
        role,
    )
}

pub fn forward_graph(
    g: &Graph,
    ctx: &Context,
    reference: Option<&Tensor>,
    cfg: &PipelineConfig,
    params: &ParamStore,
) -> Result<Forward> {
    let (h, w) = ctx.validate(cfg)?;
    let candidates = cfg.depth.build()?;
    let n = ctx.lr.len();

    let reference = match reference.filter(|_| cfg.use_reference) {
        Some(r) => {
            let (rh, rw, c) = r.hwc()?;
            ensure!(c == 3, Shape, "reference must be RGB, got {c} channels");
            let r = if (rh, rw) == (h, w) {
                r.clone()
            } else {
                geometry::resize_bilinear(r, h, w)
            };
            let levels = features::encode_graph(g, params, g.constant(r))?;
            Some((pyramid_values(g, &levels, PyramidRole::Reference)?, levels))
        }
        None => None,
    };

    let mut ups = Vec::with_capacity(n);
    let mut fused = Vec::with_capacity(n);
    for lr in &ctx.lr {
        let up = g.constant(geometry::upsample_bicubic(lr, cfg.factor));
        let levels = features::encode_graph(g, params, up)?;
        let warped = match &reference {
            Some((ref_pyr, ref_levels)) => {
                let input = pyramid_values(g, &levels, PyramidRole::Input)?;
                let m = features::match_features(
                    &input,
                    ref_pyr,
                    cfg.features.stride,
                    cfg.features.radius,
                )?;
                features::warp_by_match_graph(g, ref_levels, &m)
            }
            None => levels.map(|v| g.constant(Tensor::zeros(&g.shape(v)))),
        };
        fused.push(features::fuse_graph(g, params, &levels, &warped)?);
        ups.push(up);
    }
    let enhanced = features::cross_view_exchange_graph(g, params, &fused, cfg.features.window)?;

    let fs = g.shape(enhanced[0]);
    let feat_scale = fs[1] as f64 / w as f64;
    let small: Vec<Camera> = ctx.cameras.iter().map(|c| c.scaled(feat_scale)).collect();
    let mut depths = Vec::with_capacity(n);
    for i in 0..n {
        let mut volumes = Vec::with_capacity(n - 1);
        for j in (0..n).filter(|&j| j != i) {
            let sweep = geometry::plane_sweep(&small[i], &small[j], &candidates)?;
            volumes.push(depth::cost_volume_graph(
                g,
                enhanced[i],
                enhanced[j],
                &sweep,
            ));
        }
        let (volume, mut mask) = depth::average_volumes(g, &volumes);
        depth::fill_unobserved(&mut mask, candidates.len());
        depths.push(depth::regress_depth_graph(
            g,
            params,
            volume,
            &mask,
            &candidates,
            h,
            w,
        ));
    }

    let mut parts = Vec::with_capacity(n);
    let mut pixel_features = Vec::with_capacity(n);
    for i in 0..n {
        let d =
            gaussians::decode_graph(g, params, enhanced[i], ups[i], depths[i], &ctx.cameras[i])?;
        parts.push(d.gaussians);
        pixel_features.push(d.pixel_features);
    }
    let coarse = GaussianVars::concat(g, &parts);
    let coarse_count = coarse.len(g);

    let tr_pred: Vec<Var> = ctx
        .lr
        .iter()
        .map(|lr| texture::tr_perceptron_graph(g, params, g.constant(lr.clone())))
        .collect();
    let (gaussians, selected) = if cfg.densify_enabled() {
        let maps: Vec<TextureMap> = tr_pred
            .iter()
            .map(|v| {
                let t = g.value(*v);
                let s = t.shape();
                let map = TextureMap {
                    values: t.as_ref().clone().reshape(&[s[0], s[1]])?,
                    source: TrSource::Perceptron,
                };
                Ok(map.resized(h, w))
            })
            .collect::<Result<_>>()?;
        let features = if n == 1 {
            pixel_features[0]
        } else {
            g.concat_rows(&pixel_features)
        };
        let out = texture::densify_graph(g, params, &coarse, features, &maps, &cfg.densify)?;
        (out.gaussians, out.selected)
    } else {
        (coarse, 0)
    };
    let refined = gaussians.len(g);
    Ok(Forward {
        gaussians,
        coarse: coarse_count,
        selected,
        tr_pred,
        depth: depths,
        refined,
    })
}

/// Training objective for one scene: image terms averaged over target views,
/// texture term averaged over context views.
pub fn training_loss(
    g: &Graph,
    scene: &SceneData,
    reference: Option<&Tensor>,
    cfg: &PipelineConfig,
    params: &ParamStore,
) -> Result<LossVars> {
    ensure!(
        !scene.roles.targets.is_empty(),
        Invalid,
        "scene `{}` has no target views",
        scene.id
    );
    let ctx = Context::from_scene(scene, cfg)?;
    let fwd = forward_graph(g, &ctx, reference, cfg, params)?;
    let nt = scene.roles.targets.len() as f64;
    let mut mse = g.constant_scalar(0.0);
    let mut perc = g.constant_scalar(0.0);
    for &t in &scene.roles.targets {
        let out = render::rasterize_graph(g, &fwd.gaussians, &scene.cameras[t])?;
        let (m, p) =
            training::image_loss_graph(g, out.rgb, g.constant(scene.hr[t].clone()), &cfg.loss)?;
        mse = g.add(mse, m);
        perc = g.add(perc, p);
    }
    let mse = g.scale(mse, 1.0 / nt);
    let perceptual = g.scale(perc, 1.0 / nt);
    let texture = if cfg.loss.texture > 0.0 {
        let mut acc = g.constant_scalar(0.0);
        for (pred, oracle) in fwd.tr_pred.iter().zip(&ctx.tr_oracle) {
            let (oh, ow) = (oracle.height(), oracle.width());
            let target = g.constant(oracle.values.clone().reshape(&[oh, ow, 1])?);
            acc = g.add(acc, texture::tex_loss_graph(g, *pred, target));
        }
        g.scale(acc, cfg.loss.texture / fwd.tr_pred.len() as f64)
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub coarse: usize,
    /// Primitives selected for splitting.
    pub dense: usize,
    pub refined: usize,
}

pub struct Reconstruction {
    pub gaussians: GaussianSet,
    pub counts: Counts,
    /// Regressed depth per context view, `[H, W]`.
    pub depth: Vec<Tensor>,
}

pub fn reconstruct_context(
    ctx: &Context,
    reference: Option<&Tensor>,
    cfg: &PipelineConfig,
    params: &ParamStore,
) -> Result<Reconstruction> {
    let g = Graph::new();
    let fwd = forward_graph(&g, ctx, reference, cfg, params)?;
    g.check()?;
    let provenance = if cfg.densify_enabled() {
        Provenance::Dense
    } else {
        Provenance::Coarse
    };
    let depth = fwd
        .depth
        .iter()
        .map(|d| {
            let t = g.value(*d);
            let s = t.shape().to_vec();
            t.as_ref().clone().reshape(&s[..2])
        })
        .collect::<Result<_>>()?;
    Ok(Reconstruction {
        gaussians: fwd.gaussians.to_set(&g, provenance),
        counts: Counts {
            coarse: fwd.coarse,
            dense: fwd.selected,
            refined: fwd.refined,
        },
        depth,
    })
}

pub fn reconstruct(
    scene: &SceneData,
    reference: Option<&Tensor>,
    cfg: &PipelineConfig,
    params: &ParamStore,
) -> Result<Reconstruction> {
    reconstruct_context(&Context::from_scene(scene, cfg)?, reference, cfg, params)
}

/// Reconstructs the scene and renders it from `cam`.
pub fn render_view(
    scene: &SceneData,
    reference: Option<&Tensor>,
    cfg: &PipelineConfig,
    params: &ParamStore,
    cam: &Camera,
) -> Result<Tensor> {
    let rec = reconstruct(scene, reference, cfg, params)?;
    Ok(render::rasterize(&rec.gaussians, cam)?.image)
}
