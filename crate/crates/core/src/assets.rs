//! Synthetic scenes, the on-disk scene layout, reference providers and image I/O.
//!
//! Scenes are textured rectangles ray-cast analytically, so colour and depth
//! are exact functions of the camera. A scene directory looks like
//!
//! ```text
//! <id>/scene.json          view roles and degradation factor
//! <id>/gallery.json        reference manifest
//! <id>/hr/000.png ...      full-resolution views
//! <id>/lr/000.png ...      box-downsampled views
//! <id>/cams/000.json ...   full-resolution cameras
//! <id>/depth/000.json ...  exact depth, plus a 16-bit PNG preview
//! <id>/ref/ref.png         reference twin and its camera
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{ensure, Error, Result};
use crate::geometry::{pose_matrix, Camera, ScaleConfig};
use crate::numerics::Tensor;

/// Rig parameter of the reference camera, between the two context views and
/// away from every evenly spaced target position.
const REFERENCE_PARAM: f64 = 0.37;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    Checker {
        period: f64,
        colors: [[f64; 3]; 2],
    },
    Sine {
        period: f64,
        angle_deg: f64,
        colors: [[f64; 3]; 2],
    },
    Noise {
        cell: f64,
        colors: [[f64; 3]; 2],
    },
}

impl Texture {
    fn validate(&self) -> Result<()> {
        let (scale, colors) = match self {
            Texture::Checker { period, colors } | Texture::Sine { period, colors, .. } => {
                (*period, colors)
            }
            Texture::Noise { cell, colors } => (*cell, colors),
        };
        ensure!(
            scale > 0.0 && scale.is_finite(),
            Invalid,
            "texture period must be positive, got {scale}"
        );
        ensure!(
            colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)),
            Invalid,
            "texture colours must lie in [0, 1]"
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub center: [f64; 3],
    /// In-plane axes; normalised and made orthogonal on load.
    pub u_axis: [f64; 3],
    pub v_axis: [f64; 3],
    pub half_size: [f64; 2],
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
    pub texture: Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RigKind {
    /// Cameras on a horizontal arc looking at `target`.
    Ring,
    /// Cameras translated along +x with identity rotation.
    Line,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub kind: RigKind,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    #[serde(default)]
    pub target: [f64; 3],
    /// Ring: distance to `target`. Unused by line rigs, whose cameras sit on a
    /// segment through `target`.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Ring: total arc in degrees. Line: total travel.
    #[serde(default = "default_span")]
    pub span: f64,
}

fn default_radius() -> f64 {
    2.0
}

fn default_span() -> f64 {
    20.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default)]
    pub background: [f64; 3],
    pub rig: RigSpec,
    /// Supersampling factor per axis for colour.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
}

fn default_supersample() -> usize {
    2
}

impl SceneSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.id.is_empty()
                && self
                    .id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'),
            Invalid,
            "scene id `{}` must be non-empty and use [A-Za-z0-9_-]",
            self.id
        );
        ensure!(
            !self.planes.is_empty() || !self.boxes.is_empty(),
            Invalid,
            "scene has no geometry"
        );
        for p in &self.planes {
            p.texture.validate()?;
            ensure!(
                p.half_size[0] > 0.0 && p.half_size[1] > 0.0,
                Invalid,
                "plane has zero area"
            );
            let u = Vector3::from(p.u_axis);
            let v = Vector3::from(p.v_axis);
            ensure!(
                u.cross(&v).norm() > 1e-9 * u.norm() * v.norm() && u.norm() > 0.0,
                Invalid,
                "plane axes are degenerate"
            );
        }
        for b in &self.boxes {
            b.texture.validate()?;
            ensure!(
                b.half_extent.iter().all(|&e| e > 0.0),
                Invalid,
                "box has zero volume"
            );
        }
        ensure!(
            self.background.iter().all(|c| (0.0..=1.0).contains(c)),
            Invalid,
            "background colour outside [0, 1]"
        );
        ensure!(
            self.rig.count >= 3,
            Invalid,
            "need at least 3 cameras, got {}",
            self.rig.count
        );
        ensure!(
            self.rig.focal > 0.0,
            Invalid,
            "focal length must be positive"
        );
        ensure!(
            self.rig.radius > 0.0,
            Invalid,
            "rig radius must be positive"
        );
        ensure!(
            self.supersample >= 1,
            Invalid,
            "supersample must be at least 1"
        );
        Ok(())
    }

    /// A small default scene: a checkerboard wall, a noise floor and a striped box.
    pub fn desk(id: &str, width: usize, height: usize) -> Self {
        let warm = [[0.85, 0.75, 0.55], [0.25, 0.15, 0.1]];
        SceneSpec {
            id: id.to_string(),
            description: "wooden desk against a checkered wall with a striped box".into(),
            planes: vec![
                PlaneSpec {
                    center: [0.0, 0.0, 1.2],
                    u_axis: [1.0, 0.0, 0.0],
                    v_axis: [0.0, 1.0, 0.0],
                    half_size: [3.0, 3.0],
                    texture: Texture::Checker {
                        period: 0.3,
                        colors: [[0.9, 0.9, 0.85], [0.15, 0.2, 0.35]],
                    },
                },
                PlaneSpec {
                    center: [0.0, 0.45, 0.0],
                    u_axis: [1.0, 0.0, 0.0],
                    v_axis: [0.0, 0.0, 1.0],
                    half_size: [3.0, 3.0],
                    texture: Texture::Noise {
                        cell: 0.15,
                        colors: warm,
                    },
                },
            ],
            boxes: vec![BoxSpec {
                center: [0.15, 0.25, 0.2],
                half_extent: [0.2, 0.2, 0.2],
                texture: Texture::Sine {
                    period: 0.15,
                    angle_deg: 30.0,
                    colors: [[0.8, 0.2, 0.2], [0.95, 0.85, 0.3]],
                },
            }],
            background: [0.0; 3],
            rig: RigSpec {
                kind: RigKind::Ring,
                count: 6,
                width,
                height,
                focal: width as f64 * 0.9,
                target: [0.0, 0.1, 0.3],
                radius: 2.0,
                span: 24.0,
            },
            supersample: 2,
        }
    }

    /// `n` desk variants with moved boxes and rescaled textures.
    pub fn texture_suite(n: usize, size: usize) -> Vec<Self> {
        (0..n)
            .map(|k| {
                let mut spec = Self::desk(&format!("desk{k}"), size, size);
                let kf = k as f64;
                spec.description = format!("desk variant {k}");
                if let Texture::Checker { period, .. } = &mut spec.planes[0].texture {
                    *period = 0.25 + 0.05 * (k % 3) as f64;
                }
                if let Texture::Noise { cell, .. } = &mut spec.planes[1].texture {
                    *cell = 0.12 + 0.02 * kf;
                }
                let b = &mut spec.boxes[0];
                b.center[0] = -0.35 + 0.18 * kf;
                let e = 0.15 + 0.03 * (k % 3) as f64;
                b.half_extent = [e; 3];
                b.center[1] = 0.45 - e;
                if let Texture::Sine { angle_deg, .. } = &mut b.texture {
                    *angle_deg = 30.0 + 25.0 * kf;
                }
                spec
            })
            .collect()
    }

    /// A single fronto-parallel checkerboard seen by translated cameras.
    pub fn fronto_checker(id: &str, size: usize, depth: f64, baseline: f64, period: f64) -> Self {
        SceneSpec {
            id: id.to_string(),
            description: "fronto-parallel checkerboard".into(),
            planes: vec![PlaneSpec {
                center: [0.0, 0.0, depth],
                u_axis: [1.0, 0.0, 0.0],
                v_axis: [0.0, 1.0, 0.0],
                half_size: [50.0, 50.0],
                texture: Texture::Checker {
                    period,
                    colors: [[1.0; 3], [0.0; 3]],
                },
            }],
            boxes: Vec::new(),
            background: [0.0; 3],
            rig: RigSpec {
                kind: RigKind::Line,
                count: 3,
                width: size,
                height: size,
                focal: size as f64,
                target: [0.0; 3],
                radius: depth,
                span: baseline,
            },
            supersample: 1,
        }
    }
}

struct Quad {
    center: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    normal: Vector3<f64>,
    half: [f64; 2],
    texture: Texture,
    noise: Option<NoiseLattice>,
}

struct NoiseLattice {
    seed: u64,
}

impl NoiseLattice {
    fn value(&self, i: i64, j: i64) -> f64 {
        // lattice values are a pure function of (seed, i, j)
        let key = self.seed
            ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        ChaCha8Rng::seed_from_u64(key).gen::<f64>()
    }

    fn sample(&self, s: f64, t: f64) -> f64 {
        let (i, j) = (s.floor(), t.floor());
        let smooth = |x: f64| x * x * (3.0 - 2.0 * x);
        let (fx, fy) = (smooth(s - i), smooth(t - j));
        let (i, j) = (i as i64, j as i64);
        let top = self.value(i, j) * (1.0 - fx) + self.value(i + 1, j) * fx;
        let bottom = self.value(i, j + 1) * (1.0 - fx) + self.value(i + 1, j + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn mix(colors: &[[f64; 3]; 2], w: f64) -> [f64; 3] {
    std::array::from_fn(|k| colors[0][k] * (1.0 - w) + colors[1][k] * w)
}

impl Quad {
    fn shade(&self, s: f64, t: f64) -> [f64; 3] {
        match &self.texture {
            Texture::Checker { period, colors } => {
                let parity =
                    ((s / period).floor() as i64 + (t / period).floor() as i64).rem_euclid(2);
                colors[parity as usize]
            }
            Texture::Sine {
                period,
                angle_deg,
                colors,
            } => {
                let a = angle_deg.to_radians();
                let phase = std::f64::consts::TAU * (s * a.cos() + t * a.sin()) / period;
                mix(colors, 0.5 + 0.5 * phase.sin())
            }
            Texture::Noise { cell, colors } => mix(
                colors,
                self.noise.as_ref().unwrap().sample(s / cell, t / cell),
            ),
        }
    }

    /// Ray parameter (camera depth for rays with unit camera z) and in-plane coordinates.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.center - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let rel = origin + dir * t - self.center;
        let (s, v) = (rel.dot(&self.u), rel.dot(&self.v));
        (s.abs() <= self.half[0] && v.abs() <= self.half[1]).then_some((t, s, v))
    }
}

struct Geometry {
    quads: Vec<Quad>,
    background: [f64; 3],
}

impl Geometry {
    fn build(spec: &SceneSpec, seed: u64) -> Self {
        let mut quads = Vec::new();
        let mut push = |center: Vector3<f64>,
                        u: Vector3<f64>,
                        v: Vector3<f64>,
                        half: [f64; 2],
                        texture: &Texture| {
            let u = u.normalize();
            let v = (v - u * u.dot(&v)).normalize();
            let index = quads.len() as u64;
            let noise = matches!(texture, Texture::Noise { .. }).then(|| NoiseLattice {
                seed: seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(index),
            });
            quads.push(Quad {
                center,
                u,
                v,
                normal: u.cross(&v),
                half,
                texture: texture.clone(),
                noise,
            });
        };
        for p in &spec.planes {
            push(
                Vector3::from(p.center),
                Vector3::from(p.u_axis),
                Vector3::from(p.v_axis),
                p.half_size,
                &p.texture,
            );
        }
        for b in &spec.boxes {
            let c = Vector3::from(b.center);
            let e = b.half_extent;
            let axes = [Vector3::x(), Vector3::y(), Vector3::z()];
            for k in 0..3 {
                let (a, bb) = ((k + 1) % 3, (k + 2) % 3);
                for sign in [-1.0, 1.0] {
                    push(
                        c + axes[k] * (sign * e[k]),
                        axes[a],
                        axes[bb],
                        [e[a], e[bb]],
                        &b.texture,
                    );
                }
            }
        }
        Geometry {
            quads,
            background: spec.background,
        }
    }

    fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, [f64; 3])> = None;
        for q in &self.quads {
            if let Some((t, s, v)) = q.hit(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, q.shade(s, v)));
                }
            }
        }
        best
    }

    /// Colour `[H, W, 3]` and depth `[H, W]` (0 where nothing is hit).
    fn render(&self, cam: &Camera, supersample: usize) -> (Tensor, Tensor) {
        let (h, w) = (cam.height, cam.width);
        let origin = cam.center();
        let mut rgb = Vec::with_capacity(h * w * 3);
        let mut depth = Vec::with_capacity(h * w);
        let ss = supersample as f64;
        for y in 0..h {
            for x in 0..w {
                let centre = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                depth.push(self.trace(&origin, &centre).map_or(0.0, |(t, _)| t));
                let mut acc = [0.0; 3];
                for sy in 0..supersample {
                    for sx in 0..supersample {
                        let dir = cam.ray(
                            x as f64 + (sx as f64 + 0.5) / ss,
                            y as f64 + (sy as f64 + 0.5) / ss,
                        );
                        let c = self
                            .trace(&origin, &dir)
                            .map_or(self.background, |(_, c)| c);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                rgb.extend(acc.iter().map(|v| v / (ss * ss)));
            }
        }
        (
            Tensor::from_parts(vec![h, w, 3], rgb),
            Tensor::from_parts(vec![h, w], depth),
        )
    }
}

/// Camera of the rig at parameter `p ∈ [0, 1]`.
fn rig_camera(rig: &RigSpec, p: f64) -> Result<Camera> {
    let (w, h) = (rig.width, rig.height);
    let target = Vector3::from(rig.target);
    match rig.kind {
        RigKind::Ring => {
            let angle = (p - 0.5) * rig.span.to_radians();
            let eye =
                target + Vector3::new(rig.radius * angle.sin(), 0.0, -rig.radius * angle.cos());
            Camera::look_at(
                eye,
                target,
                Vector3::new(0.0, -1.0, 0.0),
                rig.focal,
                rig.focal,
                w,
                h,
            )
        }
        RigKind::Line => {
            let centre = target + Vector3::new((p - 0.5) * rig.span, 0.0, 0.0);
            let pose = pose_matrix(&Matrix3::identity(), &(-centre));
            Camera::new(
                rig.focal,
                rig.focal,
                w as f64 / 2.0,
                h as f64 / 2.0,
                w,
                h,
                pose,
            )
        }
    }
}

/// Rig parameters: views 0 and 1 at the ends, the rest evenly inside.
fn rig_params(count: usize) -> Vec<f64> {
    let mut p = vec![0.0, 1.0];
    p.extend((1..count - 1).map(|k| k as f64 / (count - 1) as f64));
    p
}

/// Which views feed the network, which supervise it and which are held out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRoles {
    pub context: Vec<usize>,
    pub targets: Vec<usize>,
    pub held_out: Vec<usize>,
}

impl ViewRoles {
    /// Views 0 and 1 are context, the last view is held out and the rest are
    /// targets. With exactly three views the third serves as both.
    pub fn standard(count: usize) -> Result<Self> {
        ensure!(
            count >= 3,
            Invalid,
            "need at least 3 views (2 context + 1 target), got {count}"
        );
        let last = count - 1;
        let targets = if count == 3 {
            vec![2]
        } else {
            (2..last).collect()
        };
        Ok(ViewRoles {
            context: vec![0, 1],
            targets,
            held_out: vec![last],
        })
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub factor: usize,
    pub cameras: Vec<Camera>,
    pub hr: Vec<Tensor>,
    pub lr: Vec<Tensor>,
    pub depth: Vec<Tensor>,
    pub reference: Tensor,
    pub reference_camera: Camera,
    pub roles: ViewRoles,
}

/// Box-filter downsample by an integer factor.
pub fn downsample_box(img: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    ensure!(
        factor >= 1 && h % factor == 0 && w % factor == 0,
        Invalid,
        "{h}x{w} is not divisible by {factor}"
    );
    let (ho, wo) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let data = img.data();
    let out = Tensor::from_fn(&[ho, wo, c], |i| {
        let (ch, x, y) = (i % c, (i / c) % wo, i / c / wo);
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += data[((y * factor + dy) * w + x * factor + dx) * c + ch];
            }
        }
        acc / norm
    });
    Ok(out)
}

pub fn gen_scene(spec: &SceneSpec, seed: u64, factor: usize) -> Result<SyntheticScene> {
    spec.validate()?;
    ScaleConfig::new(factor, spec.rig.height, spec.rig.width)?;
    let geometry = Geometry::build(spec, seed);
    let cameras = rig_params(spec.rig.count)
        .into_iter()
        .map(|p| rig_camera(&spec.rig, p))
        .collect::<Result<Vec<_>>>()?;
    let mut hr = Vec::new();
    let mut depth = Vec::new();
    for cam in &cameras {
        let (rgb, d) = geometry.render(cam, spec.supersample);
        hr.push(rgb);
        depth.push(d);
    }
    let lr = hr
        .iter()
        .map(|im| downsample_box(im, factor))
        .collect::<Result<Vec<_>>>()?;
    let reference_camera = rig_camera(&spec.rig, REFERENCE_PARAM)?;
    let (reference, _) = geometry.render(&reference_camera, spec.supersample);
    Ok(SyntheticScene {
        spec: spec.clone(),
        seed,
        factor,
        roles: ViewRoles::standard(cameras.len())?,
        cameras,
        hr,
        lr,
        depth,
        reference,
        reference_camera,
    })
}

/// Renders an arbitrary view of a synthetic scene.
pub fn render_scene_view(spec: &SceneSpec, seed: u64, cam: &Camera) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    Ok(Geometry::build(spec, seed).render(cam, spec.supersample))
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Tensor::from_parts(
        vec![h, w, 3],
        rgb.into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
    ))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[H, W, 3]` (RGB) or `[H, W]` / `[H, W, 1]` (gray) as an 8-bit PNG.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, c) = img.hwc()?;
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let color = match c {
        3 => image::ExtendedColorType::Rgb8,
        1 => image::ExtendedColorType::L8,
        _ => {
            return Err(Error::Shape(format!(
                "cannot write a {c}-channel image as PNG"
            )))
        }
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::parse(path, other),
    })
}

/// Gray PNG scaled so the map's maximum is white.
pub fn write_png_normalized(path: &Path, map: &Tensor) -> Result<()> {
    let max = map.data().iter().copied().fold(0.0, f64::max);
    let scaled = if max > 0.0 {
        map.map(|v| v / max)
    } else {
        map.clone()
    };
    write_png(path, &scaled)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryManifest {
    pub scene_id: String,
    pub description: String,
    /// Relative to the manifest's directory.
    pub reference: PathBuf,
}

impl GalleryManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneMeta {
    id: String,
    seed: u64,
    factor: usize,
    views: usize,
    roles: ViewRoles,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DepthFile {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

fn view_name(i: usize) -> String {
    format!("{i:03}")
}

/// Writes `scene` to `<root>/<id>` and returns that directory.
///
/// Files are staged in a sibling directory and moved into place at the end,
/// so a failure leaves nothing behind.
pub fn write_scene(scene: &SyntheticScene, root: &Path) -> Result<PathBuf> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output directory does not exist",
            ),
        ));
    }
    let id = &scene.spec.id;
    let dest = root.join(id);
    let stage = root.join(format!(".{id}.partial"));
    let result = (|| {
        if stage.exists() {
            std::fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
        }
        for sub in ["hr", "lr", "cams", "depth", "ref"] {
            let d = stage.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (i, cam) in scene.cameras.iter().enumerate() {
            let n = view_name(i);
            write_png(&stage.join("hr").join(format!("{n}.png")), &scene.hr[i])?;
            write_png(&stage.join("lr").join(format!("{n}.png")), &scene.lr[i])?;
            cam.save(&stage.join("cams").join(format!("{n}.json")))?;
            let d = &scene.depth[i];
            let (h, w) = (d.shape()[0], d.shape()[1]);
            write_json(
                &stage.join("depth").join(format!("{n}.json")),
                &DepthFile {
                    height: h,
                    width: w,
                    data: d.data().to_vec(),
                },
            )?;
            let max = d.data().iter().copied().fold(0.0, f64::max).max(1e-9);
            DepthMap {
                values: d.clone().reshape(&[h, w, 1])?,
            }
            .save_png16(&stage.join("depth").join(format!("{n}.png")), 0.0, max)?;
        }
        write_png(&stage.join("ref").join("ref.png"), &scene.reference)?;
        scene
            .reference_camera
            .save(&stage.join("ref").join("camera.json"))?;
        write_json(
            &stage.join("gallery.json"),
            &GalleryManifest {
                scene_id: id.clone(),
                description: scene.spec.description.clone(),
                reference: PathBuf::from("ref/ref.png"),
            },
        )?;
        write_json(
            &stage.join("scene.json"),
            &SceneMeta {
                id: id.clone(),
                seed: scene.seed,
                factor: scene.factor,
                views: scene.cameras.len(),
                roles: scene.roles.clone(),
            },
        )?;
        write_json(&stage.join("spec.json"), &scene.spec)?;
        if dest.exists() {
            std::fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
        }
        std::fs::rename(&stage, &dest).map_err(|e| Error::io(&dest, e))
    })();
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&stage);
    }
    result.map(|_| dest)
}

/// A scene read back from disk. Images carry 8-bit quantisation.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub id: String,
    pub dir: PathBuf,
    pub factor: usize,
    pub cameras: Vec<Camera>,
    pub hr: Vec<Tensor>,
    pub lr: Vec<Tensor>,
    pub depth: Vec<Tensor>,
    pub roles: ViewRoles,
}

impl SceneData {
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: SceneMeta = read_json(&dir.join("scene.json"))?;
        let mut s = SceneData {
            id: meta.id,
            dir: dir.to_path_buf(),
            factor: meta.factor,
            cameras: Vec::new(),
            hr: Vec::new(),
            lr: Vec::new(),
            depth: Vec::new(),
            roles: meta.roles,
        };
        for i in 0..meta.views {
            let n = view_name(i);
            let cam_path = dir.join("cams").join(format!("{n}.json"));
            s.cameras.push(Camera::load(&cam_path)?);
            s.hr.push(read_png(&dir.join("hr").join(format!("{n}.png")))?);
            s.lr.push(read_png(&dir.join("lr").join(format!("{n}.png")))?);
            let dpath = dir.join("depth").join(format!("{n}.json"));
            let d: DepthFile = read_json(&dpath)?;
            s.depth.push(
                Tensor::new(&[d.height, d.width], d.data).map_err(|e| Error::parse(&dpath, e))?,
            );
        }
        Ok(s)
    }

    pub fn from_synthetic(scene: &SyntheticScene) -> Self {
        SceneData {
            id: scene.spec.id.clone(),
            dir: PathBuf::new(),
            factor: scene.factor,
            cameras: scene.cameras.clone(),
            hr: scene.hr.clone(),
            lr: scene.lr.clone(),
            depth: scene.depth.clone(),
            roles: scene.roles.clone(),
        }
    }
}

/// Source of high-resolution reference twins.
pub trait ReferenceProvider {
    fn get_reference(&self, scene_id: &str) -> Result<Tensor>;
}

/// Reads references listed in gallery manifests.
#[derive(Clone, Debug, Default)]
pub struct FileProvider {
    entries: BTreeMap<String, PathBuf>,
}

impl FileProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_manifest(&mut self, manifest_path: &Path) -> Result<()> {
        let m = GalleryManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        self.entries.insert(m.scene_id, base.join(m.reference));
        Ok(())
    }

    pub fn from_manifest(manifest_path: &Path) -> Result<Self> {
        let mut p = Self::new();
        p.add_manifest(manifest_path)?;
        Ok(p)
    }
}

impl ReferenceProvider for FileProvider {
    fn get_reference(&self, scene_id: &str) -> Result<Tensor> {
        let path = self
            .entries
            .get(scene_id)
            .ok_or_else(|| Error::UnknownScene(scene_id.into()))?;
        read_png(path)
    }
}

/// Renders the held-out reference view of known synthetic scenes.
#[derive(Clone, Debug, Default)]
pub struct ProceduralProvider {
    scenes: BTreeMap<String, (SceneSpec, u64)>,
}

impl ProceduralProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: &SceneSpec, seed: u64) {
        self.scenes.insert(spec.id.clone(), (spec.clone(), seed));
    }
}

impl ReferenceProvider for ProceduralProvider {
    fn get_reference(&self, scene_id: &str) -> Result<Tensor> {
        let (spec, seed) = self
            .scenes
            .get(scene_id)
            .ok_or_else(|| Error::UnknownScene(scene_id.into()))?;
        let cam = rig_camera(&spec.rig, REFERENCE_PARAM)?;
        Ok(render_scene_view(spec, *seed, &cam)?.0)
    }
}

/// Stands in for a text-to-image generation service. Without a fixture
/// directory every request is unavailable; with one, `<fixtures>/<id>.png` is served.
#[derive(Clone, Debug, Default)]
pub struct StubRemoteProvider {
    pub fixtures: Option<PathBuf>,
}

impl ReferenceProvider for StubRemoteProvider {
    fn get_reference(&self, scene_id: &str) -> Result<Tensor> {
        let Some(dir) = &self.fixtures else {
            return Err(Error::Unavailable(
                "no generation service configured".into(),
            ));
        };
        let path = dir.join(format!("{scene_id}.png"));
        if !path.exists() {
            return Err(Error::Unavailable(format!(
                "no fixture for scene `{scene_id}`"
            )));
        }
        read_png(&path)
    }
}

/// Identity pose helper for tests and examples.
pub fn translation_pose(centre: Vector3<f64>) -> Matrix4<f64> {
    pose_matrix(&Matrix3::identity(), &(-centre))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::upsample_bicubic;
    use crate::texture::sobel_tr;

    fn small_desk() -> SceneSpec {
        SceneSpec::desk("desk", 32, 32)
    }

    #[test]
    fn lr_is_box_downsample() {
        let s = gen_scene(&small_desk(), 1, 4).unwrap();
        assert_eq!(s.lr[0].shape(), &[8, 8, 3]);
        let hr = s.hr[1].data();
        let manual: f64 = (0..4)
            .flat_map(|y| (0..4).map(move |x| hr[((8 + y) * 32 + 12 + x) * 3 + 1]))
            .sum::<f64>()
            / 16.0;
        assert!((s.lr[1].data()[(2 * 8 + 3) * 3 + 1] - manual).abs() < 1e-15);
        let big = gen_scene(&SceneSpec::desk("big", 64, 64), 1, 4).unwrap();
        assert_eq!(big.lr[0].shape(), &[16, 16, 3]);
    }

    #[test]
    fn depth_matches_geometry() {
        let s = gen_scene(&small_desk(), 2, 2).unwrap();
        let g = Geometry::build(&s.spec, 2);
        for (cam, d) in s.cameras.iter().zip(&s.depth) {
            for p in (0..32 * 32).step_by(7) {
                let (u, v) = ((p % 32) as f64 + 0.5, (p / 32) as f64 + 0.5);
                let z = d.data()[p];
                if z == 0.0 {
                    continue;
                }
                let world = cam.unproject(u, v, z).unwrap();
                let (pu, pv, pz) = cam.project(&world).unwrap();
                assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6 && (pz - z).abs() < 1e-6);
                let on_surface = g.quads.iter().any(|q| {
                    let rel = world - q.center;
                    rel.dot(&q.normal).abs() < 1e-6
                        && rel.dot(&q.u).abs() <= q.half[0] + 1e-6
                        && rel.dot(&q.v).abs() <= q.half[1] + 1e-6
                });
                assert!(on_surface);
            }
        }
    }

    #[test]
    fn fronto_plane_disparity() {
        let (size, depth, baseline) = (32, 2.0, 0.1);
        let s = gen_scene(
            &SceneSpec::fronto_checker("plane", size, depth, baseline, 0.2),
            0,
            2,
        )
        .unwrap();
        let (c0, c1) = (&s.cameras[0], &s.cameras[1]);
        assert!(s.depth[0].data().iter().all(|&d| (d - depth).abs() < 1e-12));
        let world = c0.unproject(10.5, 12.5, depth).unwrap();
        let (u1, v1, _) = c1.project(&world).unwrap();
        let disparity = c0.fx * (c1.center() - c0.center()).norm() / depth;
        assert!((10.5 - u1 - disparity).abs() < 1e-12 && (v1 - 12.5).abs() < 1e-12);
        assert!((disparity - size as f64 * baseline / depth).abs() < 1e-12);
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        std::fs::create_dir(&a).unwrap();
        std::fs::create_dir(&b).unwrap();
        let spec = small_desk();
        let pa = write_scene(&gen_scene(&spec, 9, 4).unwrap(), &a).unwrap();
        let pb = write_scene(&gen_scene(&spec, 9, 4).unwrap(), &b).unwrap();
        for rel in [
            "hr/000.png",
            "lr/002.png",
            "cams/001.json",
            "depth/003.json",
            "ref/ref.png",
            "gallery.json",
        ] {
            assert_eq!(
                std::fs::read(pa.join(rel)).unwrap(),
                std::fs::read(pb.join(rel)).unwrap(),
                "{rel}"
            );
        }
        let other = gen_scene(&spec, 10, 4).unwrap();
        assert_ne!(
            other.hr[0].data(),
            gen_scene(&spec, 9, 4).unwrap().hr[0].data()
        );
    }

    #[test]
    fn scene_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let scene = gen_scene(&small_desk(), 3, 2).unwrap();
        let path = write_scene(&scene, dir.path()).unwrap();
        let back = SceneData::load(&path).unwrap();
        assert_eq!(back.cameras, scene.cameras);
        assert_eq!(back.depth[2].data(), scene.depth[2].data());
        assert!(back.hr[0].max_abs_diff(&scene.hr[0]) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(
            back.roles,
            ViewRoles {
                context: vec![0, 1],
                targets: vec![2, 3, 4],
                held_out: vec![5]
            }
        );
        assert!(!dir.path().join(".desk.partial").exists());
    }

    #[test]
    fn texture_suite_variants_differ() {
        let suite = SceneSpec::texture_suite(5, 32);
        for (k, spec) in suite.iter().enumerate() {
            spec.validate().unwrap();
            assert_eq!(spec.id, format!("desk{k}"));
        }
        let views: Vec<Tensor> = suite
            .iter()
            .map(|s| gen_scene(s, 0, 4).unwrap().hr[0].clone())
            .collect();
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                assert!(views[i].max_abs_diff(&views[j]) > 0.1);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small_desk();
        s.planes[0].half_size = [0.0, 1.0];
        assert!(gen_scene(&s, 0, 4).is_err());
        let mut s = small_desk();
        s.rig.count = 2;
        assert!(gen_scene(&s, 0, 4).is_err());
        assert!(gen_scene(&small_desk(), 0, 3).is_err());
        let missing = Path::new("/nonexistent/parent/dir");
        let scene = gen_scene(&small_desk(), 0, 4).unwrap();
        assert!(matches!(
            write_scene(&scene, missing),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn providers() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::desk("desk", 64, 64);
        let scene = gen_scene(&spec, 4, 4).unwrap();
        let path = write_scene(&scene, dir.path()).unwrap();

        let files = FileProvider::from_manifest(&path.join("gallery.json")).unwrap();
        let r = files.get_reference("desk").unwrap();
        assert!(r.max_abs_diff(&scene.reference) <= 0.5 / 255.0 + 1e-12);
        assert!(matches!(
            files.get_reference("other"),
            Err(Error::UnknownScene(_))
        ));
        std::fs::remove_file(path.join("ref/ref.png")).unwrap();
        assert!(matches!(files.get_reference("desk"), Err(Error::Io { .. })));

        let mut procedural = ProceduralProvider::new();
        procedural.register(&spec, 4);
        let twin = procedural.get_reference("desk").unwrap();
        assert_eq!(twin.data(), scene.reference.data());
        let mean_tr = |im: &Tensor| sobel_tr(im).unwrap().values.mean();
        let context = 0.5 * (mean_tr(&scene.hr[0]) + mean_tr(&scene.hr[1]));
        assert!((mean_tr(&twin) - context).abs() <= 0.2 * context);

        assert!(matches!(
            StubRemoteProvider::default().get_reference("desk"),
            Err(Error::Unavailable(_))
        ));
        let fixtures = tempfile::tempdir().unwrap();
        write_png(&fixtures.path().join("desk.png"), &scene.reference).unwrap();
        let stub = StubRemoteProvider {
            fixtures: Some(fixtures.path().to_path_buf()),
        };
        assert_eq!(stub.get_reference("desk").unwrap().shape(), &[64, 64, 3]);
    }

    #[test]
    fn degradation_is_lossy_but_finite() {
        let s = gen_scene(&SceneSpec::desk("d", 64, 64), 5, 4).unwrap();
        let up = upsample_bicubic(&s.lr[0], 4);
        let mse = up
            .data()
            .iter()
            .zip(s.hr[0].data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / up.len() as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!(psnr.is_finite() && psnr < 100.0 && psnr > 5.0, "{psnr}");
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = small_desk();
        let text = serde_json::to_string(&spec).unwrap();
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(
            serde_json::from_str::<SceneSpec>(&text.replacen("\"planes\"", "\"plains\"", 1))
                .is_err()
        );
    }
}
