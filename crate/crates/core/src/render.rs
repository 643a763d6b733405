//! Tile-based front-to-back splatting with an analytic backward pass.
//!
//! Each Gaussian is projected with the local affine approximation of the
//! perspective map, binned into 16×16 pixel tiles and composited per pixel in
//! depth order. A fragment is skipped where its alpha is below 1/255, and
//! compositing stops before the fragment that would push transmittance below
//! 1e-4. The projected footprint used for binning is the exact region where
//! alpha can reach 1/255, so binning never changes the image.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::gaussians::{rotation_matrix, GaussianPrimitive, GaussianSet, GaussianVars};
use crate::geometry::Camera;
use crate::numerics::{CustomOp, Graph, Tensor, Var};

pub const TILE: usize = 16;
pub const SIGMA_FLOOR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const T_MIN: f64 = 1e-4;
pub const NEAR: f64 = 0.01;

/// A Gaussian projected into a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatFragment {
    pub mean: Vector2<f64>,
    /// Image-space covariance including the floor.
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Everything the backward pass needs about one projected Gaussian.
#[derive(Clone, Debug)]
struct Projected {
    index: usize,
    frag: SplatFragment,
    conic: [f64; 3],
    /// Pixel-space radius beyond which alpha stays below [`ALPHA_MIN`].
    radius: f64,
    t: Vector3<f64>,
    j: Matrix2x3<f64>,
    sigma_cam: Matrix3<f64>,
    r: Matrix3<f64>,
    q_hat: [f64; 4],
    q_norm: f64,
    scale: [f64; 3],
}

fn project_one(
    cam: &Camera,
    index: usize,
    mean: [f64; 3],
    q: [f64; 4],
    scale: [f64; 3],
    opacity: f64,
    color: [f64; 3],
) -> Option<Projected> {
    let t = cam.to_camera(&Vector3::from(mean));
    if t.z <= NEAR || opacity < ALPHA_MIN {
        return None;
    }
    let q_norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q_hat = q.map(|v| v / q_norm);
    let r = rotation_matrix(q_hat);
    let d = Matrix3::from_diagonal(&Vector3::new(
        scale[0] * scale[0],
        scale[1] * scale[1],
        scale[2] * scale[2],
    ));
    let w = cam.rotation();
    let sigma_cam = w * (r.transpose() * d * r) * w.transpose();
    let (z, z2) = (t.z, t.z * t.z);
    let j = Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * t.x / z2,
        0.0,
        cam.fy / z,
        -cam.fy * t.y / z2,
    );
    let cov = j * sigma_cam * j.transpose() + Matrix2::identity() * SIGMA_FLOOR;
    let cov = (cov + cov.transpose()) * 0.5;
    let det = cov.determinant();
    assert!(det > 0.0, "projected covariance is singular");
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (2.0 * (opacity / ALPHA_MIN).ln() * lambda_max).sqrt();
    let mean2 = Vector2::new(cam.cx + cam.fx * t.x / z, cam.cy + cam.fy * t.y / z);
    let (wf, hf) = (cam.width as f64, cam.height as f64);
    if mean2.x + radius < 0.0
        || mean2.x - radius > wf
        || mean2.y + radius < 0.0
        || mean2.y - radius > hf
    {
        return None;
    }
    Some(Projected {
        index,
        frag: SplatFragment {
            mean: mean2,
            cov,
            depth: z,
            opacity,
            color,
        },
        conic,
        radius,
        t,
        j,
        sigma_cam,
        r,
        q_hat,
        q_norm,
        scale,
    })
}

/// Projects one primitive; `None` when it is behind the camera or cannot touch the frame.
pub fn project_gaussian(g: &GaussianPrimitive, cam: &Camera) -> Option<SplatFragment> {
    project_one(cam, 0, g.mean, g.rotation, g.scale, g.opacity, g.color).map(|p| p.frag)
}

struct Binned {
    frags: Vec<Projected>,
    /// Per tile, indices into `frags` in compositing order.
    tiles: Vec<Vec<usize>>,
    tiles_x: usize,
}

fn bin(cam: &Camera, fields: [&Tensor; 5]) -> Binned {
    let [m, q, s, a, c] = fields;
    let n = m.rows();
    let mut frags: Vec<Projected> = (0..n)
        .into_par_iter()
        .filter_map(|i| {
            let f3 = |t: &Tensor| std::array::from_fn(|k| t.data()[3 * i + k]);
            project_one(
                cam,
                i,
                f3(m),
                std::array::from_fn(|k| q.data()[4 * i + k]),
                f3(s),
                a.data()[i],
                f3(c),
            )
        })
        .collect();
    frags.sort_by(|x, y| {
        x.frag
            .depth
            .total_cmp(&y.frag.depth)
            .then(x.index.cmp(&y.index))
    });

    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (fi, p) in frags.iter().enumerate() {
        let span = |centre: f64, size: usize| {
            let lo = (centre - p.radius - 0.5).ceil().max(0.0) as usize;
            let hi = (centre + p.radius - 0.5).floor().min(size as f64 - 1.0);
            (hi >= lo as f64).then_some((lo, hi as usize))
        };
        let (Some((x0, x1)), Some((y0, y1))) = (
            span(p.frag.mean.x, cam.width),
            span(p.frag.mean.y, cam.height),
        ) else {
            continue;
        };
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tiles[ty * tiles_x + tx].push(fi);
            }
        }
    }
    Binned {
        frags,
        tiles,
        tiles_x,
    }
}

struct Hit {
    frag: usize,
    alpha: f64,
    clamped: bool,
    gauss: f64,
    d: Vector2<f64>,
    transmittance: f64,
}

/// Walks one pixel front to back; returns the contributing fragments and the final transmittance.
fn composite(binned: &Binned, list: &[usize], px: usize, py: usize, hits: &mut Vec<Hit>) -> f64 {
    hits.clear();
    let centre = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
    let mut t = 1.0;
    for &fi in list {
        let p = &binned.frags[fi];
        let d = centre - p.frag.mean;
        let [a, b, c] = p.conic;
        let power = -0.5 * (a * d.x * d.x + 2.0 * b * d.x * d.y + c * d.y * d.y);
        if power > 0.0 {
            continue;
        }
        let gauss = power.exp();
        let raw = p.frag.opacity * gauss;
        if raw < ALPHA_MIN {
            continue;
        }
        let alpha = raw.min(ALPHA_MAX);
        let next = t * (1.0 - alpha);
        if next < T_MIN {
            break;
        }
        hits.push(Hit {
            frag: fi,
            alpha,
            clamped: raw > ALPHA_MAX,
            gauss,
            d,
            transmittance: t,
        });
        t = next;
    }
    t
}

fn tile_pixels(tile: usize, tiles_x: usize, cam: &Camera) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let (x0, y0) = (tx * TILE, ty * TILE);
    let (x1, y1) = ((x0 + TILE).min(cam.width), (y0 + TILE).min(cam.height));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Rendered `[H, W, 4]`: RGB then accumulated alpha.
fn forward(binned: &Binned, cam: &Camera) -> Tensor {
    let (w, h) = (cam.width, cam.height);
    let per_tile: Vec<Vec<(usize, [f64; 4])>> = binned
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut hits = Vec::new();
            tile_pixels(tile, binned.tiles_x, cam)
                .map(|(x, y)| {
                    let t = composite(binned, list, x, y, &mut hits);
                    let mut px = [0.0, 0.0, 0.0, 1.0 - t];
                    for hit in &hits {
                        let f = &binned.frags[hit.frag].frag;
                        for (p, c) in px.iter_mut().zip(f.color) {
                            *p += c * hit.alpha * hit.transmittance;
                        }
                    }
                    (y * w + x, px)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; h * w * 4];
    for (p, px) in per_tile.into_iter().flatten() {
        out[4 * p..4 * p + 4].copy_from_slice(&px);
    }
    Tensor::from_parts(vec![h, w, 4], out)
}

/// Screen-space gradients of one fragment: mean (2), conic (3), opacity, color (3).
#[derive(Clone, Copy, Default)]
struct FragGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl FragGrad {
    fn add(&mut self, o: &FragGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

fn screen_gradients(binned: &Binned, cam: &Camera, grad_out: &Tensor) -> Vec<FragGrad> {
    let w = cam.width;
    let g = grad_out.data();
    let per_tile: Vec<Vec<(usize, FragGrad)>> = binned
        .tiles
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut local = vec![FragGrad::default(); list.len()];
            let slot: std::collections::HashMap<usize, usize> =
                list.iter().enumerate().map(|(i, &f)| (f, i)).collect();
            let mut hits = Vec::new();
            for (x, y) in tile_pixels(tile, binned.tiles_x, cam) {
                let t_final = composite(binned, list, x, y, &mut hits);
                let p = y * w + x;
                let g_rgb = [g[4 * p], g[4 * p + 1], g[4 * p + 2]];
                let g_acc = g[4 * p + 3];
                let mut suffix = [0.0; 3];
                for hit in hits.iter().rev() {
                    let pr = &binned.frags[hit.frag];
                    let fg = &mut local[slot[&hit.frag]];
                    let (a, t) = (hit.alpha, hit.transmittance);
                    let mut g_alpha = g_acc * t_final / (1.0 - a);
                    for k in 0..3 {
                        fg.color[k] += g_rgb[k] * a * t;
                        g_alpha += g_rgb[k] * (t * pr.frag.color[k] - suffix[k] / (1.0 - a));
                        suffix[k] += pr.frag.color[k] * a * t;
                    }
                    if hit.clamped {
                        continue;
                    }
                    fg.opacity += g_alpha * hit.gauss;
                    let g_power = g_alpha * a;
                    let [ca, cb, cc] = pr.conic;
                    let d = hit.d;
                    fg.mean[0] += g_power * (ca * d.x + cb * d.y);
                    fg.mean[1] += g_power * (cb * d.x + cc * d.y);
                    fg.conic[0] += g_power * (-0.5 * d.x * d.x);
                    fg.conic[1] += g_power * (-d.x * d.y);
                    fg.conic[2] += g_power * (-0.5 * d.y * d.y);
                }
            }
            list.iter().copied().zip(local).collect()
        })
        .collect();
    let mut total = vec![FragGrad::default(); binned.frags.len()];
    for (fi, fg) in per_tile.into_iter().flatten() {
        total[fi].add(&fg);
    }
    total
}

/// Chain rule from screen-space to primitive gradients for one fragment.
/// Returns `(d mean, d q, d scale)`.
fn primitive_gradients(
    p: &Projected,
    fg: &FragGrad,
    cam: &Camera,
) -> ([f64; 3], [f64; 4], [f64; 3]) {
    let [ca, cb, cc] = p.conic;
    let m = Matrix2::new(ca, cb, cb, cc);
    let g_m = Matrix2::new(
        fg.conic[0],
        0.5 * fg.conic[1],
        0.5 * fg.conic[1],
        fg.conic[2],
    );
    let g_cov = -(m * g_m * m);
    let g_sigma_cam = p.j.transpose() * g_cov * p.j;
    let g_j = (g_cov + g_cov.transpose()) * p.j * p.sigma_cam;

    let (x, y, z) = (p.t.x, p.t.y, p.t.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let (z2, z3) = (z * z, z * z * z);
    let mut g_t = Vector3::new(
        fg.mean[0] * fx / z,
        fg.mean[1] * fy / z,
        -fg.mean[0] * fx * x / z2 - fg.mean[1] * fy * y / z2,
    );
    g_t.z += g_j[(0, 0)] * (-fx / z2) + g_j[(1, 1)] * (-fy / z2);
    g_t.x += g_j[(0, 2)] * (-fx / z2);
    g_t.z += g_j[(0, 2)] * (2.0 * fx * x / z3);
    g_t.y += g_j[(1, 2)] * (-fy / z2);
    g_t.z += g_j[(1, 2)] * (2.0 * fy * y / z3);
    let w = cam.rotation();
    let g_mean = w.transpose() * g_t;

    let g_sigma = w.transpose() * g_sigma_cam * w;
    let s = p.scale;
    let d = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let g_d = p.r * g_sigma * p.r.transpose();
    let g_scale = std::array::from_fn(|k| 2.0 * s[k] * g_d[(k, k)]);
    let g_r = d * p.r * (g_sigma + g_sigma.transpose());

    let [qw, qx, qy, qz] = p.q_hat;
    let gr = |i: usize, j: usize| g_r[(i, j)];
    let g_hat = [
        -2.0 * qz * gr(0, 1) + 2.0 * qy * gr(0, 2) + 2.0 * qz * gr(1, 0)
            - 2.0 * qx * gr(1, 2)
            - 2.0 * qy * gr(2, 0)
            + 2.0 * qx * gr(2, 1),
        2.0 * qy * gr(0, 1) + 2.0 * qz * gr(0, 2) + 2.0 * qy * gr(1, 0)
            - 4.0 * qx * gr(1, 1)
            - 2.0 * qw * gr(1, 2)
            + 2.0 * qz * gr(2, 0)
            + 2.0 * qw * gr(2, 1)
            - 4.0 * qx * gr(2, 2),
        -4.0 * qy * gr(0, 0)
            + 2.0 * qx * gr(0, 1)
            + 2.0 * qw * gr(0, 2)
            + 2.0 * qx * gr(1, 0)
            + 2.0 * qz * gr(1, 2)
            - 2.0 * qw * gr(2, 0)
            + 2.0 * qz * gr(2, 1)
            - 4.0 * qy * gr(2, 2),
        -4.0 * qz * gr(0, 0) - 2.0 * qw * gr(0, 1) + 2.0 * qx * gr(0, 2) + 2.0 * qw * gr(1, 0)
            - 4.0 * qz * gr(1, 1)
            + 2.0 * qy * gr(1, 2)
            + 2.0 * qx * gr(2, 0)
            + 2.0 * qy * gr(2, 1),
    ];
    let dot: f64 = g_hat.iter().zip(&p.q_hat).map(|(a, b)| a * b).sum();
    let g_q = std::array::from_fn(|k| (g_hat[k] - p.q_hat[k] * dot) / p.q_norm);
    ([g_mean.x, g_mean.y, g_mean.z], g_q, g_scale)
}

struct RasterOp {
    cam: Camera,
    binned: Binned,
    count: usize,
}

impl CustomOp for RasterOp {
    fn name(&self) -> &'static str {
        "rasterize"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let n = self.count;
        let screen = screen_gradients(&self.binned, &self.cam, grad_out);
        let per_frag: Vec<_> = self
            .binned
            .frags
            .par_iter()
            .zip(&screen)
            .map(|(p, fg)| {
                (
                    p.index,
                    primitive_gradients(p, fg, &self.cam),
                    fg.opacity,
                    fg.color,
                )
            })
            .collect();
        let (mut gm, mut gq, mut gs, mut ga, mut gc) = (
            vec![0.0; 3 * n],
            vec![0.0; 4 * n],
            vec![0.0; 3 * n],
            vec![0.0; n],
            vec![0.0; 3 * n],
        );
        for (i, (dm, dq, ds), da, dc) in per_frag {
            gm[3 * i..3 * i + 3].copy_from_slice(&dm);
            gq[4 * i..4 * i + 4].copy_from_slice(&dq);
            gs[3 * i..3 * i + 3].copy_from_slice(&ds);
            ga[i] = da;
            gc[3 * i..3 * i + 3].copy_from_slice(&dc);
        }
        vec![
            Some(Tensor::from_parts(vec![n, 3], gm)),
            Some(Tensor::from_parts(vec![n, 4], gq)),
            Some(Tensor::from_parts(vec![n, 3], gs)),
            Some(Tensor::from_parts(vec![n, 1], ga)),
            Some(Tensor::from_parts(vec![n, 3], gc)),
        ]
    }
}

/// Differentiable render of a Gaussian set.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars {
    /// `[H, W, 3]`
    pub rgb: Var,
    /// `[H, W, 1]`
    pub alpha: Var,
}

pub fn rasterize_graph(g: &Graph, set: &GaussianVars, cam: &Camera) -> Result<RenderVars> {
    let n = set.len(g);
    for (v, width) in set.fields().iter().zip([3, 4, 3, 1, 3]) {
        let s = g.shape(*v);
        ensure!(
            s == [n, width],
            Shape,
            "gaussian field has shape {s:?}, expected [{n}, {width}]"
        );
    }
    let values = set.fields().map(|v| g.value(v));
    let binned = bin(
        cam,
        [&values[0], &values[1], &values[2], &values[3], &values[4]],
    );
    let out = forward(&binned, cam);
    let rgba = g.custom(
        &set.fields(),
        out,
        Box::new(RasterOp {
            cam: cam.clone(),
            binned,
            count: n,
        }),
    );
    Ok(RenderVars {
        rgb: g.slice_last(rgba, 0, 3),
        alpha: g.slice_last(rgba, 3, 1),
    })
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: Tensor,
    /// `[H, W]`
    pub alpha: Tensor,
}

pub fn rasterize(set: &GaussianSet, cam: &Camera) -> Result<RenderOutput> {
    let g = Graph::new();
    let vars = GaussianVars::constant(&g, set);
    let out = rasterize_graph(&g, &vars, cam)?;
    g.check()?;
    let (h, w) = (cam.height, cam.width);
    Ok(RenderOutput {
        image: g.value(out.rgb).as_ref().clone(),
        alpha: g.value(out.alpha).as_ref().clone().reshape(&[h, w])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::Provenance;
    use crate::numerics::{check_gradients_sampled, ParamStore};
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(f: f64, size: usize) -> Camera {
        Camera::new(
            f,
            f,
            size as f64 / 2.0,
            size as f64 / 2.0,
            size,
            size,
            Matrix4::identity(),
        )
        .unwrap()
    }

    fn prim(mean: [f64; 3], s: f64, opacity: f64, color: [f64; 3]) -> GaussianPrimitive {
        GaussianPrimitive {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            scale: [s; 3],
            opacity,
            color,
        }
    }

    fn set(p: Vec<GaussianPrimitive>) -> GaussianSet {
        GaussianSet {
            primitives: p,
            provenance: Provenance::Dense,
        }
    }

    #[test]
    fn isotropic_projection_on_axis() {
        let cam = axis_camera(50.0, 64);
        let (sigma, z) = (0.1, 4.0);
        let f = project_gaussian(&prim([0.0, 0.0, z], sigma, 0.5, [1.0; 3]), &cam).unwrap();
        let expected = (50.0 * sigma / z).powi(2) + SIGMA_FLOOR;
        assert!((f.cov - Matrix2::identity() * expected).abs().max() < 1e-12);
        assert_eq!(f.depth, z);
        assert!((f.mean - Vector2::new(32.0, 32.0)).norm() < 1e-12);

        let wide = project_gaussian(
            &prim([0.0, 0.0, z], sigma, 0.5, [1.0; 3]),
            &axis_camera(100.0, 64),
        )
        .unwrap();
        let ratio = ((wide.cov[(0, 0)] - SIGMA_FLOOR) / (f.cov[(0, 0)] - SIGMA_FLOOR)).sqrt();
        assert!((ratio - 2.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(50.0, 32);
        assert!(project_gaussian(&prim([0.0, 0.0, -1.0], 0.1, 0.5, [1.0; 3]), &cam).is_none());
        assert!(project_gaussian(&prim([50.0, 0.0, 1.0], 0.01, 0.5, [1.0; 3]), &cam).is_none());
    }

    #[test]
    fn single_gaussian_peaks_at_principal_point() {
        let mut cam = axis_camera(40.0, 32);
        cam.cx = 16.5;
        cam.cy = 16.5;
        let out = rasterize(&set(vec![prim([0.0, 0.0, 2.0], 0.2, 0.99, [1.0; 3])]), &cam).unwrap();
        let img = out.image.data();
        let at = |x: usize, y: usize| img[(y * 32 + x) * 3];
        let peak = at(16, 16);
        assert!(img.iter().all(|&v| v <= peak));
        for r in 1..10 {
            assert!(at(16 + r, 16) <= at(16 + r - 1, 16));
            assert!(at(16, 16 + r) <= at(16, 16 + r - 1));
        }
        assert!((at(20, 16) - at(12, 16)).abs() < 1e-12);
    }

    #[test]
    fn zero_opacity_is_background() {
        let cam = axis_camera(40.0, 16);
        let out = rasterize(&set(vec![prim([0.0, 0.0, 2.0], 0.2, 0.0, [1.0; 3])]), &cam).unwrap();
        assert!(out.image.data().iter().all(|&v| v == 0.0));
        assert!(out.alpha.data().iter().all(|&v| v == 0.0));
        let empty = rasterize(&set(vec![]), &cam).unwrap();
        assert_eq!(empty.image.shape(), &[16, 16, 3]);
        assert!(empty.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn front_gaussian_occludes() {
        let cam = axis_camera(40.0, 16);
        let front = prim([0.0, 0.0, 1.0], 10.0, 1.0 - 1e-12, [1.0, 0.0, 0.0]);
        let back = prim([0.0, 0.0, 1.5], 10.0, 1.0 - 1e-12, [0.0, 1.0, 0.0]);
        for order in [vec![front, back], vec![back, front]] {
            let out = rasterize(&set(order), &cam).unwrap();
            for px in out.image.data().chunks(3) {
                // the back fragment would drop transmittance below T_MIN, so it is never composited
                assert_eq!(px, &[ALPHA_MAX, 0.0, 0.0]);
            }
            assert!(out.alpha.data().iter().all(|&a| a == ALPHA_MAX));
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
        set((0..n)
            .map(|_| GaussianPrimitive {
                mean: [
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(-0.6..0.6),
                    rng.gen_range(2.0..4.0),
                ],
                rotation: {
                    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    q.map(|v| v / n)
                },
                scale: std::array::from_fn(|_| rng.gen_range(0.05..0.3)),
                opacity: rng.gen_range(0.1..0.95),
                color: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
            })
            .collect())
    }

    #[test]
    fn permutation_invariant_and_alpha_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cam = axis_camera(30.0, 40);
        let s = random_set(&mut rng, 40);
        let a = rasterize(&s, &cam).unwrap();
        let mut shuffled = s.clone();
        shuffled.primitives.reverse();
        shuffled.primitives.swap(3, 17);
        let b = rasterize(&shuffled, &cam).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert!(a.alpha.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn equal_depth_ties_follow_input_order() {
        let cam = axis_camera(30.0, 16);
        let red = prim([0.0, 0.0, 2.0], 0.3, 0.6, [1.0, 0.0, 0.0]);
        let blue = prim([0.0, 0.0, 2.0], 0.3, 0.6, [0.0, 0.0, 1.0]);
        let rb = rasterize(&set(vec![red, blue]), &cam).unwrap();
        let centre = &rb.image.data()[(8 * 16 + 8) * 3..][..3];
        assert!(centre[0] > centre[2]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn adding_a_primitive_never_lowers_alpha(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cam = axis_camera(30.0, 24);
            let base = random_set(&mut rng, 12);
            let extra = random_set(&mut rng, 1).primitives[0];
            let before = rasterize(&base, &cam).unwrap();
            let mut more = base.clone();
            more.primitives.push(extra);
            let after = rasterize(&more, &cam).unwrap();
            for (a, b) in before.alpha.data().iter().zip(after.alpha.data()) {
                // early termination can drop a fragment worth less than T_MIN of coverage
                prop_assert!(*b >= a - T_MIN);
            }
        }
    }

    fn store_from(set: &GaussianSet) -> ParamStore {
        let mut store = ParamStore::new();
        let n = set.len();
        let pack = |w: usize, f: &dyn Fn(&GaussianPrimitive) -> Vec<f64>| {
            Tensor::new(&[n, w], set.primitives.iter().flat_map(f).collect()).unwrap()
        };
        store.insert("g.mean", pack(3, &|p| p.mean.to_vec()));
        store.insert("g.rot", pack(4, &|p| p.rotation.to_vec()));
        store.insert("g.scale", pack(3, &|p| p.scale.to_vec()));
        store.insert("g.opacity", pack(1, &|p| vec![p.opacity]));
        store.insert("g.color", pack(3, &|p| p.color.to_vec()));
        store
    }

    pub(crate) fn params_as_vars(g: &Graph, s: &ParamStore) -> GaussianVars {
        GaussianVars {
            mean: g.param(s, "g.mean"),
            rotation: g.param(s, "g.rot"),
            scale: g.param(s, "g.scale"),
            opacity: g.param(s, "g.opacity"),
            color: g.param(s, "g.color"),
        }
    }

    #[test]
    fn mse_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cam = axis_camera(24.0, 16);
        cam.world_to_camera = crate::geometry::pose_matrix(
            &rotation_matrix({
                let q = [0.98, 0.1, -0.12, 0.05];
                let n = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
                q.map(|v| v / n)
            }),
            &Vector3::new(0.05, -0.02, 0.1),
        );
        let gs = random_set(&mut rng, 8);
        let target = Tensor::uniform(&[16, 16, 3], 1.0, &mut rng).map(f64::abs);
        let store = store_from(&gs);
        let report = check_gradients_sampled(
            |g, s| {
                let out = rasterize_graph(g, &params_as_vars(g, s), &cam)?;
                let diff = g.sub(out.rgb, g.constant(target.clone()));
                Ok(g.add(g.mean(g.square(diff)), g.mean(out.alpha)))
            },
            &store,
            1e-6,
            usize::MAX,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
