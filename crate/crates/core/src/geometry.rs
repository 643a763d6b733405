//! Pinhole cameras, projection, cross-view warping and image resampling.
//!
//! Pixel convention: pixel `(x, y)` covers the unit square whose centre has
//! continuous image coordinates `(x + 0.5, y + 0.5)`. `project`/`unproject`
//! work in continuous coordinates; samplers take pixel-index coordinates, so
//! sampling at an integer index returns the stored value.

use std::path::Path;
use std::rc::Rc;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::depth::DepthCandidates;
use crate::error::{ensure, Error, Result};
use crate::numerics::{SparseMap, Tensor};

/// Pinhole camera with a rigid world-to-camera transform (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Matrix4<f64>,
}

const MIN_DEPTH: f64 = 1e-9;

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.fx > 0.0 && self.fy > 0.0,
            Invalid,
            "focal lengths must be positive"
        );
        ensure!(
            self.width >= 8 && self.height >= 8,
            Invalid,
            "camera must be at least 8x8 pixels"
        );
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        ensure!(
            err < 1e-9,
            Invalid,
            "rotation block is not orthonormal (error {err:e})"
        );
        ensure!(
            r.determinant() > 0.0,
            Invalid,
            "rotation block has negative determinant"
        );
        let last = self.world_to_camera.row(3);
        ensure!(
            last[0] == 0.0 && last[1] == 0.0 && last[2] == 0.0 && last[3] == 1.0,
            Invalid,
            "world_to_camera bottom row must be [0, 0, 0, 1]"
        );
        ensure!(
            self.world_to_camera.iter().all(|v| v.is_finite()),
            Invalid,
            "non-finite pose"
        );
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Invalid("eye equals target".into()))?;
        // image y points down, so "down" is the negated up vector
        let right = forward
            .cross(&-up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Invalid("up vector parallel to viewing direction".into()))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        Self::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            pose_matrix(&r, &t),
        )
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// World point to `(u, v, depth)`.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= MIN_DEPTH {
            return Err(Error::Invalid(format!(
                "point is behind the camera (z = {})",
                c.z
            )));
        }
        Ok((
            self.cx + self.fx * c.x / c.z,
            self.cy + self.fy * c.y / c.z,
            c.z,
        ))
    }

    /// Continuous image coordinate plus depth (camera z) to a world point.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        ensure!(depth > 0.0, Invalid, "depth must be positive, got {depth}");
        Ok(self.center() + self.ray(u, v) * depth)
    }

    /// World-space direction whose camera-frame z component is 1.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation().transpose() * d
    }

    /// Same pose with the image grid scaled by `s` (e.g. 0.25 for a quarter-resolution feature map).
    pub fn scaled(&self, s: f64) -> Camera {
        Camera {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width as f64 * s).round() as usize,
            height: (self.height as f64 * s).round() as usize,
            world_to_camera: self.world_to_camera,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CameraJson =
            serde_json::from_str(text).map_err(|e| Error::Invalid(e.to_string()))?;
        let m = Matrix4::from_row_slice(&raw.world_to_camera);
        Camera::new(raw.fx, raw.fy, raw.cx, raw.cy, raw.width, raw.height, m)
    }

    pub fn to_json(&self) -> String {
        let mut rows = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                rows[r * 4 + c] = self.world_to_camera[(r, c)];
            }
        }
        let raw = CameraJson {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: rows,
        };
        serde_json::to_string_pretty(&raw).expect("camera serializes")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    world_to_camera: [f64; 16],
}

pub fn pose_matrix(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Target resolution and low-resolution downsample factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub factor: usize,
    pub height: usize,
    pub width: usize,
}

impl ScaleConfig {
    pub fn new(factor: usize, height: usize, width: usize) -> Result<Self> {
        let s = Self {
            factor,
            height,
            width,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            matches!(self.factor, 2 | 4 | 8),
            Invalid,
            "downsample factor must be 2, 4 or 8, got {}",
            self.factor
        );
        ensure!(
            self.height.is_multiple_of(8)
                && self.width.is_multiple_of(8)
                && self.height > 0
                && self.width > 0,
            Invalid,
            "target size {}x{} must be a positive multiple of 8",
            self.height,
            self.width
        );
        Ok(())
    }

    pub fn lr_size(&self) -> (usize, usize) {
        (self.height / self.factor, self.width / self.factor)
    }
}

/// Bilinear read of an `[h, w, c]` map at pixel-index coordinates, clamped to the border.
pub fn sample_bilinear(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = map
        .hwc()
        .expect("sample_bilinear expects an image-like tensor");
    let mut out = vec![0.0; c];
    for (idx, wt) in bilinear_taps(x, y, w, h) {
        if wt == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(&map.data()[idx * c..(idx + 1) * c]) {
            *o += wt * v;
        }
    }
    out
}

/// Four (row-major index, weight) taps for bilinear sampling at pixel-index `(x, y)`.
/// Coordinates are clamped into `[0, w-1] x [0, h-1]`.
pub fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> [(usize, f64); 4] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

fn push_taps(b: &mut crate::numerics::SparseMapBuilder, taps: [(usize, f64); 4]) {
    for (i, w) in taps {
        if w != 0.0 {
            b.push(i, w);
        }
    }
}

/// Bilinear resize map from `(h, w)` to `(ho, wo)` (half-pixel centres).
pub fn resize_map(h: usize, w: usize, ho: usize, wo: usize) -> SparseMap {
    let mut b = SparseMap::builder(h * w);
    let sy = h as f64 / ho as f64;
    let sx = w as f64 / wo as f64;
    for y in 0..ho {
        for x in 0..wo {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            push_taps(&mut b, bilinear_taps(src_x, src_y, w, h));
            b.end_row();
        }
    }
    b.build()
}

/// Plain bilinear resize of an `[h, w, c]` tensor.
pub fn resize_bilinear(img: &Tensor, ho: usize, wo: usize) -> Tensor {
    let (h, w, c) = img.hwc().expect("resize expects an image-like tensor");
    let data = resize_map(h, w, ho, wo).apply(img.data(), c);
    let shape = if img.shape().len() == 2 {
        vec![ho, wo]
    } else {
        vec![ho, wo, c]
    };
    Tensor::from_parts(shape, data)
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Bicubic (Keys, a = -0.5) upsampling by an integer factor, clamped to `[0, 1]`.
/// This is the only place the low-resolution input is lifted to the target grid.
pub fn upsample_bicubic(img: &Tensor, factor: usize) -> Tensor {
    let (h, w, c) = img.hwc().expect("upsample expects an image-like tensor");
    let (ho, wo) = (h * factor, w * factor);
    let taps = |dst: usize, n: usize| -> Vec<(usize, f64)> {
        let src = (dst as f64 + 0.5) / factor as f64 - 0.5;
        let base = src.floor() as isize;
        (-1..=2)
            .map(|k| {
                let i = base + k;
                let wgt = cubic_weight(src - i as f64);
                (i.clamp(0, n as isize - 1) as usize, wgt)
            })
            .collect()
    };
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..ho {
        let ty = taps(y, h);
        for x in 0..wo {
            let tx = taps(x, w);
            let dst = &mut out[(y * wo + x) * c..(y * wo + x + 1) * c];
            for &(iy, wy) in &ty {
                for &(ix, wx) in &tx {
                    let src = &img.data()[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o += wy * wx * v;
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    let shape = if img.shape().len() == 2 {
        vec![ho, wo]
    } else {
        vec![ho, wo, c]
    };
    Tensor::from_parts(shape, out)
}

/// Per-candidate resampling maps from view `j`'s feature grid into view `i`'s.
///
/// Entry `d` maps every pixel of view `i`, hypothesised at depth `candidates[d]`,
/// to a bilinear read of view `j`. `valid[d][p]` is false where the reprojection
/// falls outside view `j`'s frame (or behind it); those rows are empty and read zero.
pub struct PlaneSweep {
    pub maps: Vec<Rc<SparseMap>>,
    pub valid: Vec<Vec<bool>>,
    pub height: usize,
    pub width: usize,
}

pub fn plane_sweep(
    cam_i: &Camera,
    cam_j: &Camera,
    candidates: &DepthCandidates,
) -> Result<PlaneSweep> {
    ensure!(
        !candidates.values().is_empty(),
        Invalid,
        "empty depth candidate list"
    );
    let (h, w) = (cam_i.height, cam_i.width);
    ensure!(
        cam_j.height == h && cam_j.width == w,
        Shape,
        "plane sweep needs equally sized views"
    );
    let mut maps = Vec::with_capacity(candidates.len());
    let mut valid = Vec::with_capacity(candidates.len());
    let centre = cam_i.center();
    let rays: Vec<Vector3<f64>> = (0..h * w)
        .map(|p| cam_i.ray((p % w) as f64 + 0.5, (p / w) as f64 + 0.5))
        .collect();
    for &d in candidates.values() {
        let mut b = SparseMap::builder(h * w);
        let mut ok = vec![false; h * w];
        for (p, ray) in rays.iter().enumerate() {
            let world = centre + ray * d;
            if let Ok((u, v, _)) = cam_j.project(&world) {
                if (0.0..=w as f64).contains(&u) && (0.0..=h as f64).contains(&v) {
                    ok[p] = true;
                    push_taps(&mut b, bilinear_taps(u - 0.5, v - 0.5, w, h));
                }
            }
            b.end_row();
        }
        maps.push(Rc::new(b.build()));
        valid.push(ok);
    }
    Ok(PlaneSweep {
        maps,
        valid,
        height: h,
        width: w,
    })
}

/// Feature map of view `j` warped into view `i` at every depth candidate.
#[derive(Clone, Debug)]
pub struct WarpedFeature {
    /// `[h, w, c, D]`
    pub values: Tensor,
    /// `[h, w, D]`, row-major
    pub valid: Vec<bool>,
}

/// Warps `features_j` (`[h, w, c]` on `cam_j`'s grid) into `cam_i` for every candidate depth.
/// Both cameras must describe the feature grid (see [`Camera::scaled`]).
pub fn warp_feature(
    features_j: &Tensor,
    cam_i: &Camera,
    cam_j: &Camera,
    candidates: &DepthCandidates,
) -> Result<WarpedFeature> {
    let (h, w, c) = features_j.hwc()?;
    ensure!(
        cam_j.height == h && cam_j.width == w,
        Shape,
        "feature map {h}x{w} does not match camera {}x{}",
        cam_j.height,
        cam_j.width
    );
    let sweep = plane_sweep(cam_i, cam_j, candidates)?;
    let nd = candidates.len();
    let mut values = vec![0.0; h * w * c * nd];
    let mut valid = vec![false; h * w * nd];
    for (d, (map, ok)) in sweep.maps.iter().zip(&sweep.valid).enumerate() {
        let sampled = map.apply(features_j.data(), c);
        for p in 0..h * w {
            valid[p * nd + d] = ok[p];
            for ch in 0..c {
                values[(p * c + ch) * nd + d] = sampled[p * c + ch];
            }
        }
    }
    Ok(WarpedFeature {
        values: Tensor::from_parts(vec![h, w, c, nd], values),
        valid,
    })
}
