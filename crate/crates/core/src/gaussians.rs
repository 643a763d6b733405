//! Gaussian primitives, per-pixel decoding heads, covariance and the `.splat` file format.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::geometry::{resize_map, Camera};
use crate::numerics::{layers, Graph, ParamStore, Tensor, Var};

pub const SCALE_FLOOR: f64 = 1e-4;
pub const HEAD_HIDDEN: usize = 32;
const HEADS: [(&str, usize); 4] = [("alpha", 1), ("scale", 3), ("rot", 4), ("color", 3)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Coarse,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub scale: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianPrimitive {
    pub fn validate(&self) -> Result<()> {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(
            (n - 1.0).abs() <= 1e-9,
            Invalid,
            "rotation quaternion has norm {n}"
        );
        ensure!(
            self.scale.iter().all(|&s| s > 0.0),
            Invalid,
            "scales must be positive: {:?}",
            self.scale
        );
        ensure!(
            self.opacity > 0.0 && self.opacity < 1.0,
            Invalid,
            "opacity {} outside (0, 1)",
            self.opacity
        );
        Ok(())
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance(self.scale, self.rotation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub primitives: Vec<GaussianPrimitive>,
    pub provenance: Provenance,
}

impl GaussianSet {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            primitives: Vec::new(),
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn push(&mut self, p: GaussianPrimitive) {
        self.primitives.push(p);
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Rᵀ diag(s²) R`.
pub fn covariance(s: [f64; 3], q: [f64; 4]) -> Result<Matrix3<f64>> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure!(
        (n - 1.0).abs() <= 1e-6,
        Invalid,
        "quaternion norm {n} is not 1"
    );
    ensure!(
        s.iter().all(|&v| v > 0.0),
        Invalid,
        "scales must be positive: {s:?}"
    );
    let r = rotation_matrix(q);
    let d = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
    let sigma = r.transpose() * d * r;
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// A Gaussian set living on a tape: `mean [N,3]`, `rotation [N,4]`, `scale [N,3]`,
/// `opacity [N,1]`, `color [N,3]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub rotation: Var,
    pub scale: Var,
    pub opacity: Var,
    pub color: Var,
}

impl GaussianVars {
    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.mean)[0]
    }

    pub fn fields(&self) -> [Var; 5] {
        [
            self.mean,
            self.rotation,
            self.scale,
            self.opacity,
            self.color,
        ]
    }

    pub fn constant(g: &Graph, set: &GaussianSet) -> Self {
        let n = set.len();
        let field = |width: usize, f: &dyn Fn(&GaussianPrimitive) -> Vec<f64>| {
            g.constant(Tensor::from_parts(
                vec![n, width],
                set.primitives.iter().flat_map(f).collect(),
            ))
        };
        Self {
            mean: field(3, &|p| p.mean.to_vec()),
            rotation: field(4, &|p| p.rotation.to_vec()),
            scale: field(3, &|p| p.scale.to_vec()),
            opacity: field(1, &|p| vec![p.opacity]),
            color: field(3, &|p| p.color.to_vec()),
        }
    }

    pub fn concat(g: &Graph, parts: &[GaussianVars]) -> Self {
        let cat = |f: fn(&GaussianVars) -> Var| {
            let vs: Vec<Var> = parts.iter().map(f).collect();
            if vs.len() == 1 {
                vs[0]
            } else {
                g.concat_rows(&vs)
            }
        };
        Self {
            mean: cat(|p| p.mean),
            rotation: cat(|p| p.rotation),
            scale: cat(|p| p.scale),
            opacity: cat(|p| p.opacity),
            color: cat(|p| p.color),
        }
    }

    pub fn to_set(&self, g: &Graph, provenance: Provenance) -> GaussianSet {
        let [m, q, s, a, c] = self.fields().map(|v| g.value(v));
        let primitives = (0..m.rows())
            .map(|i| GaussianPrimitive {
                mean: std::array::from_fn(|k| m.data()[3 * i + k]),
                rotation: std::array::from_fn(|k| q.data()[4 * i + k]),
                scale: std::array::from_fn(|k| s.data()[3 * i + k]),
                opacity: a.data()[i],
                color: std::array::from_fn(|k| c.data()[3 * i + k]),
            })
            .collect();
        GaussianSet {
            primitives,
            provenance,
        }
    }
}

pub fn init_params(store: &mut ParamStore, input_dim: usize, rng: &mut impl Rng) {
    for (name, out) in HEADS {
        layers::init_linear(
            store,
            &format!("head.{name}.l1"),
            input_dim,
            HEAD_HIDDEN,
            rng,
        );
        layers::init_linear(store, &format!("head.{name}.l2"), HEAD_HIDDEN, out, rng);
    }
}

fn head(g: &Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let hidden = g.silu(layers::linear(g, store, &format!("head.{name}.l1"), x));
    layers::linear(g, store, &format!("head.{name}.l2"), hidden)
}

/// Activated head outputs for per-primitive features `x: [N, C]`.
pub struct HeadOutputs {
    pub opacity: Var,
    pub rotation: Var,
    /// `softplus` of the raw scale, before the pixel-footprint multiplier and floor.
    pub scale_unit: Var,
    pub color: Var,
}

pub fn heads(g: &Graph, store: &ParamStore, x: Var) -> HeadOutputs {
    let identity = g.constant(Tensor::from_parts(vec![4], vec![1.0, 0.0, 0.0, 0.0]));
    HeadOutputs {
        opacity: g.sigmoid(head(g, store, "alpha", x)),
        rotation: g.normalize_last(g.add_bias(head(g, store, "rot", x), identity)),
        scale_unit: g.softplus(head(g, store, "scale", x)),
        color: g.sigmoid(head(g, store, "color", x)),
    }
}

/// Per-pixel decode for one view.
pub struct Decoded {
    pub gaussians: GaussianVars,
    /// Head input per pixel, `[H·W, C_enhanced + 3]`.
    pub pixel_features: Var,
}

/// Decodes one primitive per pixel of the `H×W` grid of `cam`.
///
/// `features` is the enhanced map (any resolution, bilinearly lifted to `H×W`),
/// `image_up` the upsampled input `[H, W, 3]`, `depth` `[H, W]` or `[H, W, 1]`.
/// Scales are in units of the pixel footprint `depth / fx`.
pub fn decode_graph(
    g: &Graph,
    store: &ParamStore,
    features: Var,
    image_up: Var,
    depth: Var,
    cam: &Camera,
) -> Result<Decoded> {
    let (h, w) = (cam.height, cam.width);
    let ds = g.shape(depth);
    ensure!(
        ds.len() >= 2 && ds[0] == h && ds[1] == w && ds.iter().skip(2).all(|&d| d == 1),
        Shape,
        "depth map {ds:?} does not match the {h}x{w} camera"
    );
    let is = g.shape(image_up);
    ensure!(
        is == [h, w, 3],
        Shape,
        "upsampled image {is:?} does not match the {h}x{w} camera"
    );
    let fs = g.shape(features);
    ensure!(
        fs.len() == 3,
        Shape,
        "features must be [h, w, c], got {fs:?}"
    );
    let n = h * w;

    let lifted = if fs[0] == h && fs[1] == w {
        features
    } else {
        g.gather(
            features,
            std::rc::Rc::new(resize_map(fs[0], fs[1], h, w)),
            &[h, w],
        )
    };
    let x = g.reshape(g.concat_last(&[lifted, image_up]), &[n, fs[2] + 3]);
    let out = heads(g, store, x);

    let d = g.reshape(depth, &[n, 1]);
    let rays: Vec<f64> = (0..n)
        .flat_map(|p| {
            let r = cam.ray((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            [r.x, r.y, r.z]
        })
        .collect();
    let c = cam.center();
    let mean = g.add_bias(
        g.mul_col(g.constant(Tensor::from_parts(vec![n, 3], rays)), d),
        g.constant(Tensor::from_parts(vec![3], vec![c.x, c.y, c.z])),
    );
    let footprint = g.scale(d, 1.0 / cam.fx);
    let scale = g.affine(g.mul_col(out.scale_unit, footprint), 1.0, SCALE_FLOOR);

    Ok(Decoded {
        gaussians: GaussianVars {
            mean,
            rotation: out.rotation,
            scale,
            opacity: out.opacity,
            color: out.color,
        },
        pixel_features: x,
    })
}

/// Decodes the coarse set for several views without recording gradients.
pub fn decode(
    features: &[Tensor],
    images_up: &[Tensor],
    depths: &[Tensor],
    cams: &[Camera],
    store: &ParamStore,
) -> Result<GaussianSet> {
    let n = cams.len();
    ensure!(
        features.len() == n && images_up.len() == n && depths.len() == n,
        Shape,
        "need one feature map, image and depth map per camera"
    );
    let g = Graph::new();
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let f = g.constant(features[i].clone());
        let im = g.constant(images_up[i].clone());
        let d = g.constant(depths[i].clone());
        parts.push(decode_graph(&g, store, f, im, d, &cams[i])?.gaussians);
    }
    let all = GaussianVars::concat(&g, &parts);
    g.check()?;
    Ok(all.to_set(&g, Provenance::Coarse))
}

const MAGIC: &[u8; 4] = b"SRSP";
const VERSION: u32 = 1;
const HEADER: usize = 16;
const RECORD: usize = 14 * 4;

pub fn encode_splat(set: &GaussianSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + RECORD * set.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for p in &set.primitives {
        let fields = p
            .mean
            .iter()
            .chain(&p.rotation)
            .chain(&p.scale)
            .chain(std::iter::once(&p.opacity))
            .chain(&p.color);
        for &v in fields {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a `.splat` buffer. Loaded sets are tagged [`Provenance::Dense`].
pub fn decode_splat(bytes: &[u8]) -> Result<GaussianSet> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER {
        return Err(Error::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(RECORD))
        .and_then(|b| b.checked_add(HEADER))
        .ok_or(Error::Truncated {
            expected: usize::MAX,
            found: bytes.len(),
        })?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes(bytes.len() - expected));
    }
    let primitives = bytes[HEADER..]
        .chunks_exact(RECORD)
        .map(|rec| {
            let f: Vec<f64> = rec
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            GaussianPrimitive {
                mean: [f[0], f[1], f[2]],
                rotation: [f[3], f[4], f[5], f[6]],
                scale: [f[7], f[8], f[9]],
                opacity: f[10],
                color: [f[11], f[12], f[13]],
            }
        })
        .collect();
    Ok(GaussianSet {
        primitives,
        provenance: Provenance::Dense,
    })
}

pub fn write_splat(set: &GaussianSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_splat(set)).map_err(|e| Error::io(path, e))
}

pub fn read_splat(path: &Path) -> Result<GaussianSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_splat(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_quat(raw: [f64; 4]) -> [f64; 4] {
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.map(|v| v / n)
    }

    fn random_primitive(rng: &mut impl rand::Rng) -> GaussianPrimitive {
        GaussianPrimitive {
            mean: std::array::from_fn(|_| rng.gen_range(-5.0..5.0)),
            rotation: unit_quat(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))),
            scale: std::array::from_fn(|_| rng.gen_range(0.01..1.0)),
            opacity: rng.gen_range(0.01..0.99),
            color: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
        }
    }

    fn zero_heads(store: &mut ParamStore, input_dim: usize) {
        for (name, out) in HEADS {
            layers::init_linear_zero(store, &format!("head.{name}.l1"), input_dim, HEAD_HIDDEN);
            layers::init_linear_zero(store, &format!("head.{name}.l2"), HEAD_HIDDEN, out);
        }
    }

    fn camera(w: usize, h: usize) -> Camera {
        Camera::look_at(
            Vector3::new(0.3, -0.2, -2.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            40.0,
            40.0,
            w,
            h,
        )
        .unwrap()
    }

    #[test]
    fn identity_covariance() {
        let s = covariance([1.0; 3], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((s - Matrix3::identity()).norm() < 1e-15);
        let s = covariance([2.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((s - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).norm() < 1e-15);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        assert!(covariance([1.0; 3], [1.0, 0.1, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            s in prop::array::uniform3(0.05f64..3.0),
            raw in prop::array::uniform4(-1.0f64..1.0),
        ) {
            prop_assume!(raw.iter().map(|v| v * v).sum::<f64>() > 1e-2);
            let q = unit_quat(raw);
            let sigma = covariance(s, q).unwrap();
            prop_assert!((sigma - sigma.transpose()).abs().max() <= 1e-12);
            let mut eig: Vec<f64> = SymmetricEigen::new(sigma).eigenvalues.iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
            let det = (s[0] * s[1] * s[2]).powi(2);
            prop_assert!((sigma.determinant() - det).abs() <= 1e-9 * det.max(1e-6));
            let neg = covariance(s, q.map(|v| -v)).unwrap();
            prop_assert_eq!(sigma, neg);
        }
    }

    #[test]
    fn zero_heads_give_neutral_primitives() {
        let mut store = ParamStore::new();
        zero_heads(&mut store, 5);
        let cam = camera(16, 8);
        let set = decode(
            &[Tensor::full(&[4, 8, 2], 0.7)],
            &[Tensor::full(&[8, 16, 3], 0.2)],
            &[Tensor::full(&[8, 16], 3.0)],
            std::slice::from_ref(&cam),
            &store,
        )
        .unwrap();
        assert_eq!(set.len(), 128);
        assert_eq!(set.provenance, Provenance::Coarse);
        let ln2 = 2f64.ln();
        for p in &set.primitives {
            assert_eq!(p.opacity, 0.5);
            assert_eq!(p.rotation, [1.0, 0.0, 0.0, 0.0]);
            assert_eq!(p.color, [0.5; 3]);
            for s in p.scale {
                assert!((s - (ln2 * 3.0 / 40.0 + SCALE_FLOOR)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn principal_pixel_lies_on_the_optical_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_params(&mut store, 4 + 3, &mut rng);
        let mut cam = camera(16, 16);
        cam.cx = 5.5;
        cam.cy = 9.5;
        let d = 2.5;
        let set = decode(
            &[Tensor::uniform(&[4, 4, 4], 1.0, &mut rng)],
            &[Tensor::uniform(&[16, 16, 3], 1.0, &mut rng)],
            &[Tensor::full(&[16, 16, 1], d)],
            &[cam.clone()],
            &store,
        )
        .unwrap();
        let p = &set.primitives[9 * 16 + 5];
        let local = cam.to_camera(&Vector3::from(p.mean));
        assert!(local.x.abs() < 1e-12 && local.y.abs() < 1e-12);
        assert!((local.z - d).abs() < 1e-12);
        for q in &set.primitives {
            q.validate().unwrap();
            assert!(q.scale.iter().all(|&s| s >= SCALE_FLOOR));
        }
    }

    #[test]
    fn count_is_one_per_pixel_per_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_params(&mut store, 2 + 3, &mut rng);
        let cams = [camera(32, 32), camera(32, 32)];
        let set = decode(
            &[Tensor::zeros(&[8, 8, 2]), Tensor::zeros(&[8, 8, 2])],
            &[Tensor::zeros(&[32, 32, 3]), Tensor::zeros(&[32, 32, 3])],
            &[Tensor::full(&[32, 32], 1.0), Tensor::full(&[32, 32], 1.0)],
            &cams,
            &store,
        )
        .unwrap();
        assert_eq!(set.len(), 2048);
    }

    #[test]
    fn depth_camera_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        init_params(&mut store, 2 + 3, &mut rng);
        let r = decode(
            &[Tensor::zeros(&[4, 4, 2])],
            &[Tensor::zeros(&[16, 16, 3])],
            &[Tensor::full(&[8, 16], 1.0)],
            &[camera(16, 16)],
            &store,
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn splat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = GaussianSet {
            primitives: (0..1000).map(|_| random_primitive(&mut rng)).collect(),
            provenance: Provenance::Dense,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.splat");
        write_splat(&set, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 1000 * 56);
        let back = read_splat(&path).unwrap();
        let q = |v: f64| v as f32 as f64;
        for (a, b) in set.primitives.iter().zip(&back.primitives) {
            assert_eq!(a.mean.map(q), b.mean);
            assert_eq!(a.rotation.map(q), b.rotation);
            assert_eq!(a.scale.map(q), b.scale);
            assert_eq!(q(a.opacity), b.opacity);
            assert_eq!(a.color.map(q), b.color);
        }
    }

    #[test]
    fn splat_header_errors() {
        let empty = encode_splat(&GaussianSet::new(Provenance::Coarse));
        assert_eq!(empty.len(), 16);
        assert_eq!(&empty[..4], b"SRSP");
        assert!(decode_splat(&empty).unwrap().is_empty());

        let mut bad = empty.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_splat(&bad), Err(Error::BadMagic)));

        let mut v2 = empty.clone();
        v2[4] = 2;
        assert!(matches!(decode_splat(&v2), Err(Error::Version(2))));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut one = GaussianSet::new(Provenance::Dense);
        one.push(random_primitive(&mut rng));
        let bytes = encode_splat(&one);
        assert!(matches!(
            decode_splat(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated {
                expected: 72,
                found: 71
            })
        ));
        assert!(matches!(
            decode_splat(&bytes[..10]),
            Err(Error::Truncated { .. })
        ));
    }
}
