//! Texture richness: the Sobel oracle, the learnable perceptron that predicts it
//! from low-resolution input, and texture-aware density control.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::gaussians::{heads, GaussianSet, GaussianVars, Provenance};
use crate::geometry::resize_bilinear;
use crate::numerics::{layers, Graph, ParamStore, SparseMap, Tensor, Var};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
pub const PERCEPTRON_HIDDEN: usize = 16;
pub const DENSIFY_HIDDEN: usize = 32;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrSource {
    SobelOracle,
    Perceptron,
}

/// Non-negative texture richness per pixel, `[h, w]`.
#[derive(Clone, Debug)]
pub struct TextureMap {
    pub values: Tensor,
    pub source: TrSource,
}

impl TextureMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Bilinear resize to `h × w`.
    pub fn resized(&self, h: usize, w: usize) -> TextureMap {
        let t = self
            .values
            .clone()
            .reshape(&[self.height(), self.width(), 1])
            .unwrap();
        let up = resize_bilinear(&t, h, w).reshape(&[h, w]).unwrap();
        TextureMap {
            values: up.map(|v| v.max(0.0)),
            source: self.source,
        }
    }
}

fn stencil_map(h: usize, w: usize, kernel: &[[f64; 3]; 3]) -> SparseMap {
    let mut b = SparseMap::builder(h * w);
    for y in 0..h {
        for x in 0..w {
            for (ky, row) in kernel.iter().enumerate() {
                for (kx, &k) in row.iter().enumerate() {
                    if k != 0.0 {
                        let sy = (y + ky).saturating_sub(1).min(h - 1);
                        let sx = (x + kx).saturating_sub(1).min(w - 1);
                        b.push(sy * w + sx, k);
                    }
                }
            }
            b.end_row();
        }
    }
    b.build()
}

/// Horizontal and vertical Sobel responses as linear maps with replicate borders.
pub fn sobel_maps(h: usize, w: usize) -> (SparseMap, SparseMap) {
    (stencil_map(h, w, &SOBEL_X), stencil_map(h, w, &SOBEL_Y))
}

/// Luminance of an `[h, w, 3]` image as `[h, w, 1]`.
pub fn luminance_graph(g: &Graph, image: Var) -> Var {
    let s = g.shape(image);
    let flat = g.reshape(image, &[s[0] * s[1], 3]);
    let weights = g.constant(Tensor::from_parts(vec![3, 1], LUMA.to_vec()));
    g.reshape(g.matmul(flat, weights), &[s[0], s[1], 1])
}

/// `(T_x, T_y)` of the luminance, each `[h, w, 1]`.
pub fn sobel_graph(g: &Graph, image: Var) -> (Var, Var) {
    let s = g.shape(image);
    let (mx, my) = sobel_maps(s[0], s[1]);
    let lum = luminance_graph(g, image);
    (
        g.gather(lum, Rc::new(mx), &[s[0], s[1]]),
        g.gather(lum, Rc::new(my), &[s[0], s[1]]),
    )
}

pub fn sobel_tr(image: &Tensor) -> Result<TextureMap> {
    let (h, w, c) = image.hwc()?;
    ensure!(
        c == 3,
        Shape,
        "texture richness needs an RGB image, got {c} channels"
    );
    ensure!(
        h >= 3 && w >= 3,
        Invalid,
        "image {h}x{w} is smaller than the 3x3 Sobel kernel"
    );
    let lum: Vec<f64> = image
        .data()
        .chunks_exact(3)
        .map(|p| p[0] * LUMA[0] + p[1] * LUMA[1] + p[2] * LUMA[2])
        .collect();
    let (mx, my) = sobel_maps(h, w);
    let tx = mx.apply(&lum, 1);
    let ty = my.apply(&lum, 1);
    let tr = tx.iter().zip(&ty).map(|(a, b)| a.hypot(*b)).collect();
    Ok(TextureMap {
        values: Tensor::from_parts(vec![h, w], tr),
        source: TrSource::SobelOracle,
    })
}

pub fn init_perceptron(store: &mut ParamStore, rng: &mut impl Rng) {
    layers::init_conv(store, "tex.c1", 3, 3, PERCEPTRON_HIDDEN, rng);
    layers::init_conv(
        store,
        "tex.c2",
        3,
        PERCEPTRON_HIDDEN,
        PERCEPTRON_HIDDEN,
        rng,
    );
    layers::init_conv(store, "tex.c3", 3, PERCEPTRON_HIDDEN, 1, rng);
}

/// Predicted texture richness `[h, w, 1]` for a low-resolution image `[h, w, 3]`.
pub fn tr_perceptron_graph(g: &Graph, store: &ParamStore, image: Var) -> Var {
    let x = g.silu(layers::conv(g, store, "tex.c1", image, 1));
    let x = g.silu(layers::conv(g, store, "tex.c2", x, 1));
    g.softplus(layers::conv(g, store, "tex.c3", x, 1))
}

pub fn tr_perceptron(image_lr: &Tensor, store: &ParamStore) -> Result<TextureMap> {
    let (h, w, c) = image_lr.hwc()?;
    ensure!(
        c == 3,
        Shape,
        "texture perceptron needs an RGB image, got {c} channels"
    );
    let g = Graph::new();
    let x = g.constant(image_lr.clone());
    let out = tr_perceptron_graph(&g, store, x);
    g.check()?;
    Ok(TextureMap {
        values: g.value(out).as_ref().clone().reshape(&[h, w])?,
        source: TrSource::Perceptron,
    })
}

/// Mean absolute error between a predicted and an oracle map (any matching shapes).
pub fn tex_loss_graph(g: &Graph, pred: Var, oracle: Var) -> Var {
    g.mean(g.abs(g.sub(pred, oracle)))
}

pub fn tex_loss(pred: &TextureMap, oracle: &TextureMap) -> Result<f64> {
    ensure!(
        pred.values.shape() == oracle.values.shape(),
        Shape,
        "texture maps differ in shape: {:?} vs {:?}",
        pred.values.shape(),
        oracle.values.shape()
    );
    Ok(pred
        .values
        .data()
        .iter()
        .zip(oracle.values.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.values.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Primitives whose texture richness lies strictly above this quantile are split.
    pub quantile: f64,
    pub children: usize,
    pub shrink: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            quantile: 0.8,
            children: 4,
            shrink: 0.5,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.quantile > 0.0 && self.quantile < 1.0,
            Invalid,
            "quantile {} outside (0, 1)",
            self.quantile
        );
        ensure!(
            self.children >= 2,
            Invalid,
            "need at least 2 children per parent, got {}",
            self.children
        );
        ensure!(
            self.shrink > 0.0 && self.shrink < 1.0,
            Invalid,
            "shrink {} outside (0, 1)",
            self.shrink
        );
        Ok(())
    }
}

/// Pixels whose value is strictly above the `quantile` order statistic.
pub fn select_textured(values: &[f64], quantile: f64) -> Vec<bool> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[(quantile * (values.len() - 1) as f64).floor() as usize];
    values.iter().map(|&v| v > threshold).collect()
}

pub fn init_densify(
    store: &mut ParamStore,
    feature_dim: usize,
    cfg: &DensifyConfig,
    rng: &mut impl Rng,
) {
    layers::init_linear(store, "dens.l1", 3 + feature_dim, DENSIFY_HIDDEN, rng);
    layers::init_linear_zero(store, "dens.offset", DENSIFY_HIDDEN, cfg.children * 3);
    layers::init_linear_zero(
        store,
        "dens.residual",
        DENSIFY_HIDDEN,
        cfg.children * feature_dim,
    );
}

pub struct Densified {
    pub gaussians: GaussianVars,
    pub selected: usize,
}

/// Splits textured primitives into children and returns `coarse ∪ children`.
///
/// `pixel_features` holds the head input of every coarse primitive, and
/// `tr` one map per view at the decode resolution, concatenated in the same
/// order as the primitives.
pub fn densify_graph(
    g: &Graph,
    store: &ParamStore,
    coarse: &GaussianVars,
    pixel_features: Var,
    tr: &[TextureMap],
    cfg: &DensifyConfig,
) -> Result<Densified> {
    cfg.validate()?;
    let n = coarse.len(g);
    ensure!(n > 0, Invalid, "cannot densify an empty Gaussian set");
    let total: usize = tr.iter().map(|t| t.values.len()).sum();
    ensure!(
        total == n,
        Shape,
        "texture maps cover {total} pixels but the set has {n} primitives"
    );
    let fs = g.shape(pixel_features);
    ensure!(
        fs.len() == 2 && fs[0] == n,
        Shape,
        "pixel features {fs:?} do not match {n} primitives"
    );
    let f = fs[1];

    let mut chosen = Vec::new();
    let mut offset = 0;
    for t in tr {
        let sel = select_textured(t.values.data(), cfg.quantile);
        chosen.extend(
            sel.iter()
                .enumerate()
                .filter(|(_, &s)| s)
                .map(|(i, _)| offset + i),
        );
        offset += sel.len();
    }
    let m = chosen.len();
    if m == 0 {
        return Ok(Densified {
            gaussians: *coarse,
            selected: 0,
        });
    }
    let k = cfg.children;
    let mut rows = SparseMap::builder(n);
    for &i in &chosen {
        rows.push(i, 1.0);
        rows.end_row();
    }
    let rows = Rc::new(rows.build());
    let mut rep = SparseMap::builder(m);
    for i in 0..m {
        for _ in 0..k {
            rep.push(i, 1.0);
            rep.end_row();
        }
    }
    let rep = Rc::new(rep.build());

    let pos = g.gather(coarse.mean, rows.clone(), &[m]);
    let scale = g.gather(coarse.scale, rows.clone(), &[m]);
    let feat = g.gather(pixel_features, rows, &[m]);
    let hidden = g.silu(layers::linear(
        g,
        store,
        "dens.l1",
        g.concat_last(&[pos, feat]),
    ));
    let offsets = g.reshape(layers::linear(g, store, "dens.offset", hidden), &[m * k, 3]);
    let residual = g.reshape(
        layers::linear(g, store, "dens.residual", hidden),
        &[m * k, f],
    );

    let parent_scale = g.gather(scale, rep.clone(), &[m * k]);
    let mean = g.add(
        g.gather(pos, rep.clone(), &[m * k]),
        g.mul(offsets, parent_scale),
    );
    let child_feat = g.add(g.gather(feat, rep, &[m * k]), residual);
    let out = heads(g, store, child_feat);
    let children = GaussianVars {
        mean,
        rotation: out.rotation,
        scale: g.scale(parent_scale, cfg.shrink),
        opacity: out.opacity,
        color: out.color,
    };
    Ok(Densified {
        gaussians: GaussianVars::concat(g, &[*coarse, children]),
        selected: m,
    })
}

/// Densifies a stored set; see [`densify_graph`]. Texture maps are resized to
/// `sizes[v]` (the decode grid of view `v`) before selection.
pub fn densify(
    coarse: &GaussianSet,
    pixel_features: &Tensor,
    tr: &[TextureMap],
    sizes: &[(usize, usize)],
    cfg: &DensifyConfig,
    store: &ParamStore,
) -> Result<GaussianSet> {
    ensure!(
        tr.len() == sizes.len(),
        Shape,
        "need one decode size per texture map"
    );
    let aligned: Vec<TextureMap> = tr
        .iter()
        .zip(sizes)
        .map(|(t, &(h, w))| {
            if t.height() == h && t.width() == w {
                t.clone()
            } else {
                t.resized(h, w)
            }
        })
        .collect();
    let g = Graph::new();
    let set = GaussianVars::constant(&g, coarse);
    let feat = g.constant(pixel_features.clone());
    let out = densify_graph(&g, store, &set, feat, &aligned, cfg)?;
    g.check()?;
    Ok(out.gaussians.to_set(&g, Provenance::Dense))
}
