//! Reference-guided feature enhancement.
//!
//! The low-resolution input (lifted to the target grid) and its high-resolution
//! reference twin go through one shared three-level encoder. Input features are
//! matched against reference features coarse-to-fine by cosine similarity, the
//! reference features are pulled back along the matches and weighted by match
//! confidence, and a small fusion network merges both pyramids at quarter
//! resolution. A windowed self/cross-attention pass then exchanges information
//! between the context views.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::resize_map;
use crate::numerics::{layers, Graph, ParamStore, SparseMap, Tensor, Var};

pub const LEVELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub c_feature: usize,
    pub c_enhanced: usize,
    /// Grid stride of the coarse matching pass.
    pub stride: usize,
    /// Half-size of the refinement search window.
    pub radius: usize,
    /// Attention window edge length (quarter-resolution pixels).
    pub window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            c_feature: 16,
            c_enhanced: 32,
            stride: 4,
            radius: 2,
            window: 4,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.c_feature > 0 && self.c_enhanced > 0,
            Invalid,
            "channel counts must be positive"
        );
        ensure!(
            self.stride >= 1,
            Invalid,
            "matching stride must be at least 1"
        );
        ensure!(
            self.window >= 1,
            Invalid,
            "attention window must be at least 1"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidRole {
    Input,
    Reference,
    WarpedReference,
}

/// Three feature maps, each half the resolution of the previous one.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub role: PyramidRole,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, role: PyramidRole) -> Result<Self> {
        ensure!(
            levels.len() == LEVELS,
            Shape,
            "pyramid needs {LEVELS} levels, got {}",
            levels.len()
        );
        let (h0, w0, c) = levels[0].hwc()?;
        for (l, t) in levels.iter().enumerate() {
            let (h, w, cl) = t.hwc()?;
            ensure!(cl == c, Shape, "pyramid levels must share channel count");
            ensure!(
                h << l == h0 && w << l == w0,
                Shape,
                "level {l} is {h}x{w}, expected half of the previous level"
            );
        }
        Ok(Self { levels, role })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].last_dim()
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &FeatureConfig, rng: &mut impl Rng) {
    let c = cfg.c_feature;
    layers::init_conv(store, "enc.l1", 3, 3, c, rng);
    layers::init_conv(store, "enc.l2", 3, c, c, rng);
    layers::init_conv(store, "enc.l3", 3, c, c, rng);
    layers::init_conv(store, "fuse.c1", 3, 2 * LEVELS * c, cfg.c_enhanced, rng);
    layers::init_conv(store, "fuse.c2", 3, cfg.c_enhanced, cfg.c_enhanced, rng);
    for block in ["attn.self", "attn.cross"] {
        for proj in ["q", "k", "v"] {
            layers::init_linear(
                store,
                &format!("{block}.{proj}"),
                cfg.c_enhanced,
                cfg.c_enhanced,
                rng,
            );
        }
    }
}

/// Shared encoder: three stride-2 convolutions with SiLU. Input `[H, W, 3]`.
pub fn encode_graph(g: &Graph, store: &ParamStore, image: Var) -> Result<[Var; LEVELS]> {
    let s = g.shape(image);
    ensure!(
        s.len() == 3 && s[2] == 3,
        Shape,
        "encoder expects an [H, W, 3] image, got {s:?}"
    );
    ensure!(
        s[0].is_multiple_of(8) && s[1].is_multiple_of(8),
        Invalid,
        "image size {}x{} is not divisible by 8",
        s[0],
        s[1]
    );
    let l1 = g.silu(layers::conv(g, store, "enc.l1", image, 2));
    let l2 = g.silu(layers::conv(g, store, "enc.l2", l1, 2));
    let l3 = g.silu(layers::conv(g, store, "enc.l3", l2, 2));
    Ok([l1, l2, l3])
}

pub fn encode(image: &Tensor, store: &ParamStore, role: PyramidRole) -> Result<FeaturePyramid> {
    let g = Graph::new();
    let x = g.constant(image.clone());
    let levels = encode_graph(&g, store, x)?;
    g.check()?;
    FeaturePyramid::new(
        levels
            .iter()
            .map(|v| g.value(*v).as_ref().clone())
            .collect(),
        role,
    )
}

/// Zero-mean, unit-norm luminance patches of side `2 radius + 1` scaled by
/// `gain`, one per pixel with replicate border: a training-free stand-in for
/// learned features. Flat patches (norm below 1e-9) map to zero.
pub fn patch_features(image: &Tensor, radius: usize, gain: f64) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    ensure!(
        c == 3,
        Shape,
        "patch features need an RGB image, got {c} channels"
    );
    let lum: Vec<f64> = image
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    let side = 2 * radius + 1;
    let mut out = Vec::with_capacity(h * w * side * side);
    let mut patch = Vec::with_capacity(side * side);
    for y in 0..h {
        for x in 0..w {
            patch.clear();
            for dy in 0..side {
                for dx in 0..side {
                    let yy = (y + dy).saturating_sub(radius).min(h - 1);
                    let xx = (x + dx).saturating_sub(radius).min(w - 1);
                    patch.push(lum[yy * w + xx]);
                }
            }
            let mean = patch.iter().sum::<f64>() / patch.len() as f64;
            let norm = patch
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                .sqrt();
            let k = if norm > 1e-9 { gain / norm } else { 0.0 };
            out.extend(patch.iter().map(|v| k * (v - mean)));
        }
    }
    Tensor::new(&[h, w, side * side], out)
}

/// Matches of one pyramid level: reference pixel `(u, v)` and cosine score per source pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMatch {
    pub height: usize,
    pub width: usize,
    pub ref_height: usize,
    pub ref_width: usize,
    pub coords: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchMap {
    pub levels: Vec<LevelMatch>,
}

fn normalized(t: &Tensor) -> Vec<f64> {
    let c = t.last_dim();
    let mut out = t.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Cosine similarity of two feature vectors; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

struct LevelView<'a> {
    src: &'a [f64],
    reference: &'a [f64],
    c: usize,
    rw: usize,
    rh: usize,
}

impl LevelView<'_> {
    fn score(&self, p: usize, u: usize, v: usize) -> f64 {
        let a = &self.src[p * self.c..(p + 1) * self.c];
        let q = v * self.rw + u;
        let b = &self.reference[q * self.c..(q + 1) * self.c];
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Best candidate in a window around `(cu, cv)`; row-major scan, strict improvement.
    fn window_best(&self, p: usize, cu: usize, cv: usize, radius: usize) -> ((usize, usize), f64) {
        let mut best = ((cu, cv), f64::NEG_INFINITY);
        let v0 = cv.saturating_sub(radius);
        let v1 = (cv + radius).min(self.rh - 1);
        let u0 = cu.saturating_sub(radius);
        let u1 = (cu + radius).min(self.rw - 1);
        for v in v0..=v1 {
            for u in u0..=u1 {
                let s = self.score(p, u, v);
                if s > best.1 {
                    best = ((u, v), s);
                }
            }
        }
        best
    }
}

/// Coarse-to-fine cosine matching of `input` against `reference`.
///
/// The coarsest level is scanned on a `stride` grid and refined in a
/// `(2 radius + 1)^2` window; each finer level searches the same window
/// around the match propagated from its parent pixel.
pub fn match_features(
    input: &FeaturePyramid,
    reference: &FeaturePyramid,
    stride: usize,
    radius: usize,
) -> Result<MatchMap> {
    ensure!(stride >= 1, Invalid, "stride must be at least 1");
    ensure!(
        input.channels() == reference.channels(),
        Shape,
        "channel mismatch: {} vs {}",
        input.channels(),
        reference.channels()
    );
    let c = input.channels();
    let mut levels: Vec<Option<LevelMatch>> = vec![None; LEVELS];
    for l in (0..LEVELS).rev() {
        let (h, w, _) = input.levels[l].hwc()?;
        let (rh, rw, _) = reference.levels[l].hwc()?;
        let src = normalized(&input.levels[l]);
        let refn = normalized(&reference.levels[l]);
        let view = LevelView {
            src: &src,
            reference: &refn,
            c,
            rw,
            rh,
        };
        let mut coords = Vec::with_capacity(h * w);
        let mut scores = Vec::with_capacity(h * w);
        for p in 0..h * w {
            let (x, y) = (p % w, p / w);
            let centre = match &levels.get(l + 1).and_then(Option::as_ref) {
                None => {
                    let mut best = ((0, 0), f64::NEG_INFINITY);
                    for v in (0..rh).step_by(stride) {
                        for u in (0..rw).step_by(stride) {
                            let s = view.score(p, u, v);
                            if s > best.1 {
                                best = ((u, v), s);
                            }
                        }
                    }
                    best.0
                }
                Some(parent) => {
                    let q = (y / 2) * parent.width + (x / 2);
                    let (pu, pv) = parent.coords[q];
                    ((2 * pu + x % 2).min(rw - 1), (2 * pv + y % 2).min(rh - 1))
                }
            };
            let (uv, s) = view.window_best(p, centre.0, centre.1, radius);
            coords.push(uv);
            scores.push(s);
        }
        levels[l] = Some(LevelMatch {
            height: h,
            width: w,
            ref_height: rh,
            ref_width: rw,
            coords,
            scores,
        });
    }
    Ok(MatchMap {
        levels: levels.into_iter().map(Option::unwrap).collect(),
    })
}

/// Sparse map pulling reference rows to source pixels with weight `max(score, 0)`.
pub fn match_warp_map(level: &LevelMatch) -> SparseMap {
    let mut b = SparseMap::builder(level.ref_height * level.ref_width);
    for (&(u, v), &s) in level.coords.iter().zip(&level.scores) {
        assert!(
            u < level.ref_width && v < level.ref_height,
            "match coordinate out of bounds"
        );
        let wgt = s.max(0.0);
        if wgt > 0.0 {
            b.push(v * level.ref_width + u, wgt);
        }
        b.end_row();
    }
    b.build()
}

/// Differentiable score-weighted warp. Match coordinates and scores are constants.
pub fn warp_by_match_graph(g: &Graph, reference: &[Var; LEVELS], m: &MatchMap) -> [Var; LEVELS] {
    std::array::from_fn(|l| {
        let lm = &m.levels[l];
        g.gather(
            reference[l],
            Rc::new(match_warp_map(lm)),
            &[lm.height, lm.width],
        )
    })
}

pub fn warp_by_match(reference: &FeaturePyramid, m: &MatchMap) -> Result<FeaturePyramid> {
    ensure!(
        m.levels.len() == LEVELS,
        Shape,
        "match map must cover {LEVELS} levels"
    );
    let mut out = Vec::with_capacity(LEVELS);
    for (t, lm) in reference.levels.iter().zip(&m.levels) {
        let (h, w, c) = t.hwc()?;
        ensure!(
            h == lm.ref_height && w == lm.ref_width,
            Shape,
            "match map does not fit the reference pyramid"
        );
        let map = match_warp_map(lm);
        out.push(Tensor::from_parts(
            vec![lm.height, lm.width, c],
            map.apply(t.data(), c),
        ));
    }
    FeaturePyramid::new(out, PyramidRole::WarpedReference)
}

/// Fusion network: resample all six maps to quarter resolution, concatenate,
/// conv + SiLU + conv. Output `[H/4, W/4, C_enhanced]`.
pub fn fuse_graph(
    g: &Graph,
    store: &ParamStore,
    input: &[Var; LEVELS],
    warped: &[Var; LEVELS],
) -> Result<Var> {
    let s1 = g.shape(input[1]);
    let (h4, w4) = (s1[0], s1[1]);
    let c = s1[2];
    let mut parts = Vec::with_capacity(2 * LEVELS);
    for pyramid in [input, warped] {
        for (l, v) in pyramid.iter().enumerate() {
            let s = g.shape(*v);
            ensure!(
                s.len() == 3 && s[2] == c,
                Shape,
                "fusion inputs must share {c} channels, got {s:?}"
            );
            ensure!(
                s[0] << l == 2 * h4 && s[1] << l == 2 * w4,
                Shape,
                "fusion level {l} has size {s:?}"
            );
            parts.push(if l == 1 {
                *v
            } else {
                g.gather(*v, Rc::new(resize_map(s[0], s[1], h4, w4)), &[h4, w4])
            });
        }
    }
    let x = g.concat_last(&parts);
    let hidden = g.silu(layers::conv(g, store, "fuse.c1", x, 1));
    Ok(layers::conv(g, store, "fuse.c2", hidden, 1))
}

pub fn fuse(input: &FeaturePyramid, warped: &FeaturePyramid, store: &ParamStore) -> Result<Tensor> {
    ensure!(
        input.channels() == warped.channels(),
        Shape,
        "pyramids differ in channel count"
    );
    let g = Graph::new();
    let a: [Var; LEVELS] = std::array::from_fn(|l| g.constant(input.levels[l].clone()));
    let b: [Var; LEVELS] = std::array::from_fn(|l| g.constant(warped.levels[l].clone()));
    let out = fuse_graph(&g, store, &a, &b)?;
    g.check()?;
    Ok(g.value(out).as_ref().clone())
}

/// Permutation from row-major pixels to window-major tokens.
fn window_order(h: usize, w: usize, win: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(h * w);
    for wy in 0..h / win {
        for wx in 0..w / win {
            for y in 0..win {
                for x in 0..win {
                    order.push((wy * win + y) * w + wx * win + x);
                }
            }
        }
    }
    order
}

/// One attention block over windows. `query_tokens` is `[B, T, C]`, `kv_tokens` `[B, S, C]`.
/// Returns the attended values `[B, T, C]` and the attention weights `[B, T, S]`.
pub fn window_attention(
    g: &Graph,
    store: &ParamStore,
    prefix: &str,
    query_tokens: Var,
    kv_tokens: Var,
) -> (Var, Var) {
    let c = *g.shape(query_tokens).last().unwrap();
    let q = layers::linear(g, store, &format!("{prefix}.q"), query_tokens);
    let k = layers::linear(g, store, &format!("{prefix}.k"), kv_tokens);
    let v = layers::linear(g, store, &format!("{prefix}.v"), kv_tokens);
    let logits = g.scale(
        g.batch_matmul(q, g.transpose_last(k)),
        1.0 / (c as f64).sqrt(),
    );
    let attn = g.softmax(logits);
    (g.batch_matmul(attn, v), attn)
}

/// Windowed self-attention per view followed by windowed cross-attention to
/// the other views, both residual. Shapes are preserved.
pub fn cross_view_exchange_graph(
    g: &Graph,
    store: &ParamStore,
    views: &[Var],
    window: usize,
) -> Result<Vec<Var>> {
    ensure!(
        views.len() >= 2,
        Invalid,
        "cross-view exchange needs at least two views"
    );
    let s = g.shape(views[0]);
    ensure!(
        views.iter().all(|v| g.shape(*v) == s),
        Shape,
        "all views must have identical feature shapes"
    );
    let (h, w, c) = (s[0], s[1], s[2]);
    ensure!(
        window >= 1 && h % window == 0 && w % window == 0,
        Invalid,
        "attention window {window} does not divide {h}x{w}"
    );
    let t = window * window;
    let nwin = (h / window) * (w / window);
    let order = window_order(h, w, window);

    let to_tokens = {
        let mut b = SparseMap::builder(h * w);
        for &p in &order {
            b.push(p, 1.0);
            b.end_row();
        }
        Rc::new(b.build())
    };
    let from_tokens = {
        let mut inv = vec![0; h * w];
        for (i, &p) in order.iter().enumerate() {
            inv[p] = i;
        }
        let mut b = SparseMap::builder(h * w);
        for &i in &inv {
            b.push(i, 1.0);
            b.end_row();
        }
        Rc::new(b.build())
    };
    let tokens = |x: Var| g.reshape(g.gather(x, to_tokens.clone(), &[h * w]), &[nwin, t, c]);
    let pixels = |x: Var| g.gather(g.reshape(x, &[h * w, c]), from_tokens.clone(), &[h, w]);

    let after_self: Vec<Var> = views
        .iter()
        .map(|&x| {
            let tk = tokens(x);
            let (out, _) = window_attention(g, store, "attn.self", tk, tk);
            g.add(x, pixels(out))
        })
        .collect();

    let n = views.len();
    let mut result = Vec::with_capacity(n);
    for i in 0..n {
        let others: Vec<Var> = (0..n)
            .filter(|&j| j != i)
            .map(|j| g.reshape(after_self[j], &[h * w, c]))
            .collect();
        let stacked = if others.len() == 1 {
            others[0]
        } else {
            g.concat_rows(&others)
        };
        // window b of the key/value set: the window's tokens from every other view in turn
        let mut b = SparseMap::builder(others.len() * h * w);
        for win in 0..nwin {
            for o in 0..others.len() {
                for &p in &order[win * t..(win + 1) * t] {
                    b.push(o * h * w + p, 1.0);
                    b.end_row();
                }
            }
        }
        let kv = g.reshape(
            g.gather(stacked, Rc::new(b.build()), &[nwin * t * others.len()]),
            &[nwin, t * others.len(), c],
        );
        let (out, _) = window_attention(g, store, "attn.cross", tokens(after_self[i]), kv);
        result.push(g.add(after_self[i], pixels(out)));
    }
    Ok(result)
}

pub fn cross_view_exchange(
    features: &[Tensor],
    store: &ParamStore,
    window: usize,
) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let vars: Vec<Var> = features.iter().map(|t| g.constant(t.clone())).collect();
    if features.iter().any(|t| t.shape().len() != 3) {
        return Err(Error::Shape("features must be [h, w, c]".into()));
    }
    let out = cross_view_exchange_graph(&g, store, &vars, window)?;
    g.check()?;
    Ok(out.iter().map(|v| g.value(*v).as_ref().clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients_sampled;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &FeatureConfig, seed: u64) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_params(&mut store, cfg, &mut rng);
        (store, rng)
    }

    fn random_pyramid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeaturePyramid {
        let levels = (1..=LEVELS)
            .map(|l| Tensor::uniform(&[h >> l, w >> l, c], 1.0, rng))
            .collect();
        FeaturePyramid::new(levels, PyramidRole::Input).unwrap()
    }

    #[test]
    fn encoder_shapes() {
        let cfg = FeatureConfig::default();
        let (store, mut rng) = setup(&cfg, 0);
        let img = Tensor::uniform(&[64, 64, 3], 1.0, &mut rng);
        let p = encode(&img, &store, PyramidRole::Input).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![32, 32, 16], vec![16, 16, 16], vec![8, 8, 16]]
        );
        assert!(encode(&Tensor::zeros(&[60, 64, 3]), &store, PyramidRole::Input).is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_shared() {
        let cfg = FeatureConfig::default();
        let (store, mut rng) = setup(&cfg, 1);
        let img = Tensor::uniform(&[32, 32, 3], 1.0, &mut rng);
        let a = encode(&img, &store, PyramidRole::Input).unwrap();
        let b = encode(&img, &store, PyramidRole::Reference).unwrap();
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn constant_image_gives_constant_interior() {
        let cfg = FeatureConfig::default();
        let (store, _) = setup(&cfg, 2);
        let p = encode(&Tensor::full(&[64, 64, 3], 0.3), &store, PyramidRole::Input).unwrap();
        // zero padding contaminates a rim that grows by one pixel per level
        for (l, t) in p.levels.iter().enumerate() {
            let (h, w, c) = t.hwc().unwrap();
            let rim = l + 1;
            let at = |y: usize, x: usize, ch: usize| t.data()[(y * w + x) * c + ch];
            for y in rim..h - rim {
                for x in rim..w - rim {
                    for ch in 0..c {
                        assert!((at(y, x, ch) - at(rim, rim, ch)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_pyramid(&mut rng, 64, 64, 8);
        let m = match_features(&p, &p, 1, 2).unwrap();
        for lm in &m.levels {
            for (i, (&(u, v), &s)) in lm.coords.iter().zip(&lm.scores).enumerate() {
                assert_eq!((u, v), (i % lm.width, i / lm.width));
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_features_are_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = Tensor::uniform(&[6, 7, 3], 1.0, &mut rng);
        let f = patch_features(&img, 1, 3.0).unwrap();
        assert_eq!(f.shape(), &[6, 7, 9]);
        for p in f.data().chunks_exact(9) {
            assert!(p.iter().sum::<f64>().abs() < 1e-12);
            assert!((p.iter().map(|v| v * v).sum::<f64>().sqrt() - 3.0).abs() < 1e-12);
        }
        let flat = patch_features(&Tensor::full(&[4, 4, 3], 0.5), 1, 3.0).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    fn periodic_level(h: usize, w: usize, shift: usize) -> Tensor {
        const WAVES: [(f64, f64, f64); 8] = [
            (1.0, 0.0, 0.0),
            (1.0, 0.0, 1.6),
            (0.0, 1.0, 0.3),
            (0.0, 1.0, 1.9),
            (1.0, 1.0, 0.7),
            (1.0, 1.0, 2.3),
            (1.0, -1.0, 1.1),
            (1.0, -1.0, 2.7),
        ];
        let mut data = Vec::with_capacity(h * w * WAVES.len());
        for y in 0..h {
            for x in 0..w {
                let xs = ((x + w - shift) % w) as f64 / w as f64;
                let ys = y as f64 / h as f64;
                for &(a, b, phi) in &WAVES {
                    data.push((std::f64::consts::TAU * (a * xs + b * ys) + phi).cos());
                }
            }
        }
        Tensor::new(&[h, w, WAVES.len()], data).unwrap()
    }

    #[test]
    fn circular_shift_is_recovered_per_level() {
        let (h, w, full_shift) = (128, 128, 8);
        let build = |shifted: bool, role| {
            let levels = (1..=LEVELS)
                .map(|l| periodic_level(h >> l, w >> l, if shifted { full_shift >> l } else { 0 }))
                .collect();
            FeaturePyramid::new(levels, role).unwrap()
        };
        let m = match_features(
            &build(false, PyramidRole::Input),
            &build(true, PyramidRole::Reference),
            4,
            2,
        )
        .unwrap();
        for (l, lm) in m.levels.iter().enumerate() {
            let s = full_shift >> (l + 1);
            // the coarse grid cannot see matches that sit next to the wrap seam
            let margin = 4 << (LEVELS - 1 - l);
            for (i, (&(u, v), &score)) in lm.coords.iter().zip(&lm.scores).enumerate() {
                let (x, y) = (i % lm.width, i / lm.width);
                if x + s + margin >= lm.width || y + margin >= lm.height {
                    continue;
                }
                assert_eq!((u, v), (x + s, y), "level {l} pixel ({x}, {y})");
                assert!((score - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn refinement_never_loses_to_propagated_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_pyramid(&mut rng, 64, 64, 6);
        let b = random_pyramid(&mut rng, 64, 64, 6);
        let m = match_features(&a, &b, 4, 2).unwrap();
        for l in 0..LEVELS - 1 {
            let (fine, coarse) = (&m.levels[l], &m.levels[l + 1]);
            let c = 6;
            for p in 0..fine.height * fine.width {
                let (x, y) = (p % fine.width, p / fine.width);
                let (pu, pv) = coarse.coords[(y / 2) * coarse.width + x / 2];
                let (u, v) = (2 * pu + x % 2, 2 * pv + y % 2);
                let q = v * fine.ref_width + u;
                let propagated = cosine(
                    &a.levels[l].data()[p * c..(p + 1) * c],
                    &b.levels[l].data()[q * c..(q + 1) * c],
                );
                assert!(fine.scores[p] >= propagated - 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_fields_have_non_positive_scores() {
        let (h, w) = (32, 32);
        let levels_a = (1..=LEVELS)
            .map(|l| Tensor::from_fn(&[h >> l, w >> l, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 }))
            .collect();
        let levels_b = (1..=LEVELS)
            .map(|l| Tensor::from_fn(&[h >> l, w >> l, 4], |i| if i % 4 >= 2 { 1.0 } else { 0.0 }))
            .collect();
        let a = FeaturePyramid::new(levels_a, PyramidRole::Input).unwrap();
        let b = FeaturePyramid::new(levels_b, PyramidRole::Reference).unwrap();
        let m = match_features(&a, &b, 2, 1).unwrap();
        for lm in &m.levels {
            assert!(lm.scores.iter().all(|&s| s <= 0.0));
            assert!(lm
                .coords
                .iter()
                .all(|&(u, v)| u < lm.ref_width && v < lm.ref_height));
            // every score ties at 0, so the smallest row-major candidate wins
        }
        assert_eq!(m.levels[2].coords[0], (0, 0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_pyramid(&mut rng, 32, 32, 4);
        let b = random_pyramid(&mut rng, 32, 32, 5);
        assert!(match_features(&a, &b, 2, 1).is_err());
    }

    #[test]
    fn warp_by_match_scaling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pyramid(&mut rng, 32, 32, 4);
        let mut m = match_features(&p, &p, 1, 1).unwrap();
        let w = warp_by_match(&p, &m).unwrap();
        for (a, b) in w.levels.iter().zip(&p.levels) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
        m.levels.iter_mut().for_each(|lm| lm.scores.fill(0.5));
        let w = warp_by_match(&p, &m).unwrap();
        for (a, b) in w.levels.iter().zip(&p.levels) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| (x - 0.5 * y).abs() < 1e-15));
        }
        m.levels.iter_mut().for_each(|lm| lm.scores.fill(-0.2));
        let w = warp_by_match(&p, &m).unwrap();
        assert!(w.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn fuse_shape_and_zero_branch() {
        let cfg = FeatureConfig::default();
        let (store, mut rng) = setup(&cfg, 6);
        let fi = random_pyramid(&mut rng, 32, 48, 16);
        let mut fr = random_pyramid(&mut rng, 32, 48, 16);
        let mut m = match_features(&fi, &fr, 4, 2).unwrap();
        m.levels.iter_mut().for_each(|lm| lm.scores.fill(-1.0));
        let out = fuse(&fi, &warp_by_match(&fr, &m).unwrap(), &store).unwrap();
        assert_eq!(out.shape(), &[8, 12, 32]);
        fr.levels[0].data_mut().iter_mut().for_each(|v| *v += 3.0);
        let again = fuse(&fi, &warp_by_match(&fr, &m).unwrap(), &store).unwrap();
        assert_eq!(out.data(), again.data());
    }

    #[test]
    fn fusion_gradients() {
        let cfg = FeatureConfig {
            c_feature: 2,
            c_enhanced: 3,
            ..Default::default()
        };
        let (store, mut rng) = setup(&cfg, 7);
        let fi = random_pyramid(&mut rng, 16, 16, 2);
        let fw = random_pyramid(&mut rng, 16, 16, 2);
        let mut sub = ParamStore::new();
        for name in ["fuse.c1.w", "fuse.c1.b", "fuse.c2.w", "fuse.c2.b"] {
            sub.insert(name, store.value(name).unwrap().clone());
        }
        let report = check_gradients_sampled(
            |g, s| {
                let a: [Var; LEVELS] = std::array::from_fn(|l| g.constant(fi.levels[l].clone()));
                let b: [Var; LEVELS] = std::array::from_fn(|l| g.constant(fw.levels[l].clone()));
                let out = fuse_graph(g, s, &a, &b)?;
                Ok(g.mean(g.square(out)))
            },
            &sub,
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn uniform_attention_mean_pools_values() {
        let c = 4;
        let mut store = ParamStore::new();
        for block in ["attn.self", "attn.cross"] {
            store.insert(&format!("{block}.q.w"), Tensor::zeros(&[c, c]));
            store.insert(&format!("{block}.q.b"), Tensor::zeros(&[c]));
            store.insert(
                &format!("{block}.k.w"),
                Tensor::from_fn(&[c, c], |i| (i as f64).sin()),
            );
            store.insert(&format!("{block}.k.b"), Tensor::zeros(&[c]));
            store.insert(
                &format!("{block}.v.w"),
                Tensor::from_fn(&[c, c], |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }),
            );
            store.insert(&format!("{block}.v.b"), Tensor::zeros(&[c]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[4, 4, c], 1.0, &mut rng);
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let tokens = g.reshape(xv, &[1, 16, c]);
        let (out, attn) = window_attention(&g, &store, "attn.self", tokens, tokens);
        let a = g.value(attn);
        assert!(a.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        let mean: Vec<f64> = (0..c)
            .map(|ch| x.data().iter().skip(ch).step_by(c).sum::<f64>() / 16.0)
            .collect();
        for row in g.value(out).data().chunks(c) {
            for (v, m) in row.iter().zip(&mean) {
                assert!((v - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_normalised() {
        let cfg = FeatureConfig {
            c_enhanced: 6,
            ..Default::default()
        };
        let (store, mut rng) = setup(&cfg, 9);
        let g = Graph::new();
        let q = g.constant(Tensor::uniform(&[3, 4, 6], 2.0, &mut rng));
        let kv = g.constant(Tensor::uniform(&[3, 8, 6], 2.0, &mut rng));
        let (_, attn) = window_attention(&g, &store, "attn.cross", q, kv);
        for row in g.value(attn).data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exchange_is_symmetric_under_view_permutation() {
        let cfg = FeatureConfig {
            c_enhanced: 8,
            ..Default::default()
        };
        let (store, mut rng) = setup(&cfg, 10);
        let a = Tensor::uniform(&[8, 8, 8], 1.0, &mut rng);
        let b = Tensor::uniform(&[8, 8, 8], 1.0, &mut rng);
        let ab = cross_view_exchange(&[a.clone(), b.clone()], &store, 4).unwrap();
        let ba = cross_view_exchange(&[b, a], &store, 4).unwrap();
        assert_eq!(ab[0].data(), ba[1].data());
        assert_eq!(ab[1].data(), ba[0].data());
        assert_eq!(ab[0].shape(), &[8, 8, 8]);
    }

    #[test]
    fn exchange_rejects_bad_window() {
        let cfg = FeatureConfig {
            c_enhanced: 4,
            ..Default::default()
        };
        let (store, _) = setup(&cfg, 11);
        let t = Tensor::zeros(&[6, 6, 4]);
        assert!(cross_view_exchange(&[t.clone(), t.clone()], &store, 4).is_err());
        assert!(cross_view_exchange(&[t], &store, 3).is_err());
    }
}
