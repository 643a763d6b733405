/// Fixed sparse linear map between row-major "pixel rows".
///
/// Output row `r` is `sum_k weight[k] * input[index[k]]` over the entries of `r`.
/// Every resampling in the crate (bilinear resize, plane-sweep warps, match
/// warps, Sobel filtering, row selection) goes through this one operator so a
/// single backward rule covers them all.
#[derive(Clone, Debug, Default)]
pub struct SparseMap {
    rows_in: usize,
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl SparseMap {
    pub fn builder(rows_in: usize) -> SparseMapBuilder {
        SparseMapBuilder {
            map: SparseMap {
                rows_in,
                offsets: vec![0],
                ..Default::default()
            },
        }
    }

    pub fn rows_in(&self) -> usize {
        self.rows_in
    }

    pub fn rows_out(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.index[span.clone()]
            .iter()
            .copied()
            .zip(self.weight[span].iter().copied())
    }

    /// `out[r, :] = sum w * input[i, :]` with `channels` values per row.
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.rows_in * channels);
        let mut out = vec![0.0; self.rows_out() * channels];
        for (r, dst) in out
            .chunks_exact_mut(channels.max(1))
            .enumerate()
            .take(self.rows_out())
        {
            for (i, w) in self.row(r) {
                let src = &input[i * channels..(i + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply).
    pub fn apply_transpose(&self, grad_out: &[f64], channels: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows_in * channels];
        for r in 0..self.rows_out() {
            let g = &grad_out[r * channels..(r + 1) * channels];
            for (i, w) in self.row(r) {
                let dst = &mut out[i * channels..(i + 1) * channels];
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

pub struct SparseMapBuilder {
    map: SparseMap,
}

impl SparseMapBuilder {
    pub fn push(&mut self, index: usize, weight: f64) {
        debug_assert!(index < self.map.rows_in);
        self.map.index.push(index);
        self.map.weight.push(weight);
    }

    pub fn end_row(&mut self) {
        self.map.offsets.push(self.map.index.len());
    }

    pub fn build(self) -> SparseMap {
        self.map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_is_adjoint() {
        let mut b = SparseMap::builder(3);
        b.push(0, 0.5);
        b.push(2, 2.0);
        b.end_row();
        b.end_row();
        b.push(1, -1.0);
        b.end_row();
        let m = b.build();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [0.3, -0.7, 1.1, 0.2, 0.9, -0.4];
        let ax = m.apply(&x, 2);
        let aty = m.apply_transpose(&y, 2);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(&ax[2..4], &[0.0, 0.0]);
    }
}
