//! Plane-sweep cost volumes and softmax depth regression.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{self, PlaneSweep, WarpedFeature};
use crate::numerics::{layers, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub candidates: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            candidates: 32,
            near: 0.5,
            far: 100.0,
        }
    }
}

impl DepthConfig {
    pub fn validate(&self) -> Result<()> {
        self.build().map(|_| ())
    }

    /// Candidates uniform in inverse depth.
    pub fn build(&self) -> Result<DepthCandidates> {
        DepthCandidates::inverse_uniform(self.near, self.far, self.candidates)
    }
}

/// Strictly increasing positive depth hypotheses `[d_1, .., d_D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthCandidates(Vec<f64>);

impl DepthCandidates {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() >= 2,
            Invalid,
            "need at least two depth candidates, got {}",
            values.len()
        );
        ensure!(
            values[0] > 0.0,
            Invalid,
            "depth candidates must be positive"
        );
        ensure!(
            values.windows(2).all(|w| w[1] > w[0]) && values.iter().all(|v| v.is_finite()),
            Invalid,
            "depth candidates must be strictly increasing"
        );
        Ok(Self(values))
    }

    /// `count` candidates uniformly spaced in inverse depth over `[near, far]`.
    pub fn inverse_uniform(near: f64, far: f64, count: usize) -> Result<Self> {
        ensure!(
            near > 0.0 && far > near,
            Invalid,
            "need 0 < near < far, got near={near} far={far}"
        );
        ensure!(count >= 2, Invalid, "need at least two depth candidates");
        let (a, b) = (1.0 / far, 1.0 / near);
        // ascending depth = descending inverse depth
        let values = (0..count)
            .map(|k| 1.0 / (b - (b - a) * k as f64 / (count - 1) as f64))
            .collect();
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn near(&self) -> f64 {
        self.0[0]
    }

    pub fn far(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn nearest_index(&self, depth: f64) -> usize {
        (0..self.0.len())
            .min_by(|&a, &b| {
                (self.0[a] - depth)
                    .abs()
                    .total_cmp(&(self.0[b] - depth).abs())
            })
            .unwrap()
    }

    /// Distance from candidate `k` to its closest neighbour.
    pub fn local_spacing(&self, k: usize) -> f64 {
        let left = if k > 0 {
            self.0[k] - self.0[k - 1]
        } else {
            f64::INFINITY
        };
        let right = if k + 1 < self.0.len() {
            self.0[k + 1] - self.0[k]
        } else {
            f64::INFINITY
        };
        left.min(right)
    }
}

/// Matching costs `[h, w, D]` of one view with a validity flag per entry.
#[derive(Clone, Debug)]
pub struct CostVolume {
    pub values: Tensor,
    pub valid: Vec<bool>,
}

impl CostVolume {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.hwc().expect("cost volume is [h, w, D]")
    }
}

/// Regressed depth `[H, W]` in metres.
#[derive(Clone, Debug)]
pub struct DepthMap {
    pub values: Tensor,
}

impl DepthMap {
    /// 16-bit grayscale dump with `near..far` mapped to `0..65535`.
    pub fn save_png16(&self, path: &Path, near: f64, far: f64) -> Result<()> {
        let (h, w, _) = self.values.hwc()?;
        let pixels: Vec<u16> = self
            .values
            .data()
            .iter()
            .map(|d| (((d - near) / (far - near)).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, pixels)
            .expect("buffer size matches");
        img.save(path).map_err(|e| Error::parse(path, e))
    }
}

/// Channel-wise correlation `sum_c F_i[p, c] * F_warp[p, c, d] / sqrt(C)`.
pub fn cost_volume(features_i: &Tensor, warped: &WarpedFeature) -> Result<CostVolume> {
    let (h, w, c) = features_i.hwc()?;
    let ws = warped.values.shape();
    ensure!(
        ws.len() == 4 && ws[0] == h && ws[1] == w && ws[2] == c,
        Shape,
        "warped features {:?} do not match [{h}, {w}, {c}, D]",
        ws
    );
    let nd = ws[3];
    let norm = 1.0 / (c as f64).sqrt();
    let mut out = vec![0.0; h * w * nd];
    for p in 0..h * w {
        let fi = &features_i.data()[p * c..(p + 1) * c];
        for d in 0..nd {
            let mut s = 0.0;
            for (ch, f) in fi.iter().enumerate() {
                s += f * warped.values.data()[(p * c + ch) * nd + d];
            }
            out[p * nd + d] = if warped.valid[p * nd + d] {
                s * norm
            } else {
                0.0
            };
        }
    }
    Ok(CostVolume {
        values: Tensor::from_parts(vec![h, w, nd], out),
        valid: warped.valid.clone(),
    })
}

/// Differentiable cost volume of `f_i` against `f_j` swept through `sweep`.
/// Returns `[h, w, D]` costs and the row-major validity mask.
pub fn cost_volume_graph(g: &Graph, f_i: Var, f_j: Var, sweep: &PlaneSweep) -> (Var, Vec<bool>) {
    let (h, w) = (sweep.height, sweep.width);
    let c = g.shape(f_i)[2];
    let nd = sweep.maps.len();
    let slices: Vec<Var> = sweep
        .maps
        .iter()
        .map(|map| {
            let warped = g.gather(f_j, map.clone(), &[h, w]);
            g.sum_last(g.mul(f_i, warped))
        })
        .collect();
    let volume = g.scale(g.concat_last(&slices), 1.0 / (c as f64).sqrt());
    let mut mask = vec![false; h * w * nd];
    for (d, ok) in sweep.valid.iter().enumerate() {
        for (p, &v) in ok.iter().enumerate() {
            mask[p * nd + d] = v;
        }
    }
    (volume, mask)
}

/// Averages pairwise volumes over the partners whose sample is valid.
/// An entry is valid if any partner observed it.
pub fn average_volumes(g: &Graph, volumes: &[(Var, Vec<bool>)]) -> (Var, Vec<bool>) {
    if volumes.len() == 1 {
        return volumes[0].clone();
    }
    let shape = g.shape(volumes[0].0);
    let n = volumes[0].1.len();
    let mut counts = vec![0.0; n];
    for (_, m) in volumes {
        for (c, &v) in counts.iter_mut().zip(m) {
            *c += v as u8 as f64;
        }
    }
    let mut total = None;
    for (vol, m) in volumes {
        let weights: Vec<f64> = m
            .iter()
            .zip(&counts)
            .map(|(&v, &c)| if v { 1.0 / c } else { 0.0 })
            .collect();
        let term = g.mul(*vol, g.constant(Tensor::from_parts(shape.clone(), weights)));
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term),
        });
    }
    (total.unwrap(), counts.iter().map(|&c| c > 0.0).collect())
}

/// Marks every candidate valid at pixels where none is, so those pixels fall
/// back to a uniform distribution instead of failing. Returns the number of
/// pixels touched.
pub fn fill_unobserved(mask: &mut [bool], candidates: usize) -> usize {
    let mut filled = 0;
    for row in mask.chunks_exact_mut(candidates) {
        if row.iter().all(|v| !v) {
            row.fill(true);
            filled += 1;
        }
    }
    filled
}

pub const REFINE_PREFIX: &str = "depth.refine";

/// Registers the refinement convolution, zero-initialised so the untrained
/// refinement is the identity.
pub fn init_params(store: &mut ParamStore, _rng: &mut impl Rng) {
    store.insert(&format!("{REFINE_PREFIX}.w"), Tensor::zeros(&[3, 3, 1, 1]));
    store.insert(&format!("{REFINE_PREFIX}.b"), Tensor::zeros(&[1]));
}

/// Softmax over candidates (masked entries excluded), expectation against the
/// candidate depths: `[h, w, D] -> [h, w, 1]`.
pub fn softmax_depth(g: &Graph, logits: Var, mask: &[bool], candidates: &DepthCandidates) -> Var {
    let shape = g.shape(logits);
    let (h, w, nd) = (shape[0], shape[1], shape[2]);
    let weights = g.softmax_masked(logits, Some(mask));
    let flat = g.reshape(weights, &[h * w, nd]);
    let depths = g.constant(Tensor::from_parts(
        vec![nd, 1],
        candidates.values().to_vec(),
    ));
    g.reshape(g.matmul(flat, depths), &[h, w, 1])
}

/// Full regression: softmax expectation, bilinear upsampling to `(out_h, out_w)`,
/// residual learnable refinement, clamp to the candidate range. Returns `[H, W, 1]`.
pub fn regress_depth_graph(
    g: &Graph,
    store: &ParamStore,
    logits: Var,
    mask: &[bool],
    candidates: &DepthCandidates,
    out_h: usize,
    out_w: usize,
) -> Var {
    let shape = g.shape(logits);
    let lr = softmax_depth(g, logits, mask, candidates);
    let up = g.gather(
        lr,
        Rc::new(geometry::resize_map(shape[0], shape[1], out_h, out_w)),
        &[out_h, out_w],
    );
    let refined = g.add(up, layers::conv(g, store, REFINE_PREFIX, up, 1));
    g.clamp(refined, candidates.near(), candidates.far())
}

/// Regresses a full-resolution depth map from a cost volume.
pub fn regress_depth(
    volume: &CostVolume,
    candidates: &DepthCandidates,
    params: &ParamStore,
    out_h: usize,
    out_w: usize,
) -> Result<DepthMap> {
    let (h, w, nd) = volume.dims();
    ensure!(
        nd == candidates.len(),
        Shape,
        "volume has {nd} candidates, expected {}",
        candidates.len()
    );
    if let Some(p) = volume
        .valid
        .chunks_exact(nd)
        .position(|row| row.iter().all(|v| !v))
    {
        return Err(Error::Invalid(format!(
            "all depth candidates masked at pixel ({}, {})",
            p % w,
            p / w
        )));
    }
    let _ = h;
    let g = Graph::new();
    let logits = g.constant(volume.values.clone());
    let depth = regress_depth_graph(&g, params, logits, &volume.valid, candidates, out_h, out_w);
    g.check()?;
    let values = g.value(depth).as_ref().clone().reshape(&[out_h, out_w])?;
    Ok(DepthMap { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn expect_depth(logits: &[f64], g_values: &[f64]) -> f64 {
        let g = Graph::new();
        let n = logits.len();
        let l = g.constant(Tensor::new(&[1, 1, n], logits.to_vec()).unwrap());
        let cand = DepthCandidates::new(g_values.to_vec()).unwrap();
        g.value(softmax_depth(&g, l, &vec![true; n], &cand)).item()
    }

    #[test]
    fn hand_computed_softmax_expectation() {
        let d = expect_depth(&[0.0, 2f64.ln(), 0.0], &[1.0, 2.0, 4.0]);
        assert!((d - 2.25).abs() < 1e-12, "{d}");
    }

    #[test]
    fn uniform_logits_give_mean_depth() {
        let d = expect_depth(&[0.3; 4], &[1.0, 2.0, 3.5, 7.0]);
        assert!((d - 13.5 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_selects_candidate() {
        let d = expect_depth(&[0.0, 0.0, 20.0, 0.0], &[1.0, 2.0, 3.0, 4.0]);
        // error bounded by sum of off-peak weights times max distance: 3 e^-20 * 2
        assert!((d - 3.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn shift_invariance() {
        let base = expect_depth(&[0.1, -0.4, 1.3], &[1.0, 1.5, 9.0]);
        let shifted = expect_depth(&[5.1, 4.6, 6.3], &[1.0, 1.5, 9.0]);
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn inverse_uniform_candidates() {
        let c = DepthCandidates::inverse_uniform(0.5, 100.0, 32).unwrap();
        assert_eq!(c.len(), 32);
        assert!((c.near() - 0.5).abs() < 1e-12 && (c.far() - 100.0).abs() < 1e-9);
        let inv: Vec<f64> = c.values().iter().map(|d| 1.0 / d).collect();
        let step = inv[0] - inv[1];
        assert!(inv.windows(2).all(|w| ((w[0] - w[1]) - step).abs() < 1e-12));
        assert!(DepthCandidates::new(vec![1.0, 1.0]).is_err());
        assert!(DepthCandidates::new(vec![0.0, 1.0]).is_err());
    }

    fn warped_from(values: Vec<f64>, h: usize, w: usize, c: usize, nd: usize) -> WarpedFeature {
        WarpedFeature {
            values: Tensor::new(&[h, w, c, nd], values).unwrap(),
            valid: vec![true; h * w * nd],
        }
    }

    #[test]
    fn all_ones_cost() {
        let f = Tensor::full(&[2, 3, 4], 1.0);
        let cv = cost_volume(&f, &warped_from(vec![1.0; 2 * 3 * 4 * 5], 2, 3, 4, 5)).unwrap();
        assert!(cv.values.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_warp_zero_cost() {
        let f = Tensor::full(&[2, 2, 3], 0.7);
        let cv = cost_volume(&f, &warped_from(vec![0.0; 2 * 2 * 3 * 4], 2, 2, 3, 4)).unwrap();
        assert!(cv.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn planted_candidate_wins_argmax() {
        let (h, w, c, nd) = (3, 4, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::from_fn(&[h, w, c], |_| rng.gen_range(-1.0..1.0));
        let mut warped = vec![0.0; h * w * c * nd];
        for p in 0..h * w {
            let k = p % nd;
            let fi = &f.data()[p * c..(p + 1) * c];
            for d in 0..nd {
                // orthogonal competitor: rotate pairs (a, b) -> (-b, a)
                for ch in 0..c {
                    let v = if d == k {
                        fi[ch]
                    } else if ch % 2 == 0 {
                        -fi[ch + 1]
                    } else {
                        fi[ch - 1]
                    };
                    warped[(p * c + ch) * nd + d] = v;
                }
            }
        }
        let cv = cost_volume(&f, &warped_from(warped, h, w, c, nd)).unwrap();
        for p in 0..h * w {
            let row = &cv.values.data()[p * nd..(p + 1) * nd];
            let best = (0..nd).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, p % nd);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f = Tensor::full(&[2, 2, 3], 0.7);
        assert!(cost_volume(&f, &warped_from(vec![0.0; 2 * 2 * 4 * 2], 2, 2, 4, 2)).is_err());
    }

    #[test]
    fn fully_masked_pixel_is_an_error() {
        let cand = DepthCandidates::new(vec![1.0, 2.0]).unwrap();
        let mut store = ParamStore::new();
        init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let cv = CostVolume {
            values: Tensor::zeros(&[2, 2, 2]),
            valid: vec![true, true, false, false, true, true, true, true],
        };
        assert!(regress_depth(&cv, &cand, &store, 8, 8).is_err());
    }

    #[test]
    fn regressed_depth_stays_in_range() {
        let cand = DepthCandidates::inverse_uniform(0.5, 100.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        init_params(&mut store, &mut rng);
        // aggressive refinement to exercise the clamp
        store
            .value_mut("depth.refine.w")
            .unwrap()
            .data_mut()
            .fill(5.0);
        let cv = CostVolume {
            values: Tensor::from_fn(&[4, 4, 8], |_| rng.gen_range(-10.0..10.0)),
            valid: vec![true; 4 * 4 * 8],
        };
        let d = regress_depth(&cv, &cand, &store, 16, 16).unwrap();
        assert_eq!(d.values.shape(), &[16, 16]);
        assert!(d
            .values
            .data()
            .iter()
            .all(|&v| v >= cand.near() && v <= cand.far()));
    }

    #[test]
    fn refinement_gradients() {
        let cand = DepthCandidates::inverse_uniform(1.0, 10.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_params(&mut store, &mut rng);
        for v in store.value_mut("depth.refine.w").unwrap().data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let logits = Tensor::from_fn(&[2, 2, 5], |_| rng.gen_range(-1.0..1.0));
        let target = Tensor::from_fn(&[8, 8, 1], |_| rng.gen_range(2.0..4.0));
        let err = check_gradients(
            |g, s| {
                let l = g.constant(logits.clone());
                let d = regress_depth_graph(g, s, l, &[true; 20], &cand, 8, 8);
                Ok(g.mean(g.square(g.sub(d, g.constant(target.clone())))))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn averaged_volumes_respect_masks() {
        let g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 1, 2], vec![2.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(&[1, 1, 2], vec![6.0, 8.0]).unwrap());
        let (v, m) = average_volumes(&g, &[(a, vec![true, true]), (b, vec![true, false])]);
        assert_eq!(g.value(v).data(), &[4.0, 4.0]);
        assert_eq!(m, vec![true, true]);
    }

    #[test]
    fn unobserved_pixels_fall_back() {
        let mut mask = vec![false, false, true, false];
        assert_eq!(fill_unobserved(&mut mask, 2), 1);
        assert_eq!(mask, vec![true, true, true, false]);
    }
}
