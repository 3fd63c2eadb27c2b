//! Dense displacement fields.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-voxel displacement in voxel units on the fixed grid, stored as
/// `[3, D, H, W]` with component 0 along x.
///
/// Backward mapping: `warped(p) = moving(p + u(p))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; 3 * dims.iter().product::<usize>()],
        }
    }

    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "field of {} values for grid {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite displacement".into()));
        }
        Ok(Self { dims, data })
    }

    /// Builds a field from `f([x, y, z]) -> [ux, uy, uz]`.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let n = dims.iter().product::<usize>();
        let mut data = vec![0.0; 3 * n];
        let mut i = 0;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let u = f([x as f64, y as f64, z as f64]);
                    for c in 0..3 {
                        data[c * n + i] = u[c];
                    }
                    i += 1;
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.data.len() / 3
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let n = self.voxels();
        let i = (z * self.dims[1] + y) * self.dims[2] + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn max_norm(&self) -> f64 {
        let n = self.voxels();
        (0..n)
            .map(|i| {
                (self.data[i].powi(2) + self.data[n + i].powi(2) + self.data[2 * n + i].powi(2))
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Trilinear sample at a continuous voxel position `(x, y, z)`, clamped
    /// to the grid.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let n = self.voxels();
        std::array::from_fn(|c| trilinear_clamped(&self.data[c * n..(c + 1) * n], self.dims, p))
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let [d, h, w] = self.dims;
        Tensor::new(&[3, d, h, w], self.data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "displacement tensor must be [3, D, H, W], got {s:?}"
            )));
        }
        Self::new([s[1], s[2], s[3]], t.data().iter().map(|v| v.as_f64()).collect())
    }
}

/// Trilinear interpolation of a scalar `[d, h, w]` grid at `(x, y, z)`,
/// clamping the position to the grid bounds.
pub fn trilinear_clamped<V: Copy + Into<f64>>(data: &[V], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let [d, h, w] = dims;
    let ext = [w, h, d];
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        let hi = (ext[a] - 1) as f64;
        let c = p[a].clamp(0.0, hi);
        let fl = c.floor().min((ext[a].max(2) - 2) as f64).max(0.0);
        i0[a] = fl as usize;
        i1[a] = (i0[a] + 1).min(ext[a] - 1);
        f[a] = c - fl;
    }
    let at = |x: usize, y: usize, z: usize| -> f64 { data[(z * h + y) * w + x].into() };
    let mut acc = 0.0;
    for (zi, wz) in [(i0[2], 1.0 - f[2]), (i1[2], f[2])] {
        for (yi, wy) in [(i0[1], 1.0 - f[1]), (i1[1], f[1])] {
            for (xi, wx) in [(i0[0], 1.0 - f[0]), (i1[0], f[0])] {
                let wgt = wz * wy * wx;
                if wgt != 0.0 {
                    acc += wgt * at(xi, yi, zi);
                }
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_is_exact_on_affine_fields() {
        let f = DisplacementField::from_fn([4, 5, 6], |p| [0.5 * p[0] - p[2], 2.0, p[1]]);
        let u = f.sample([1.25, 2.5, 0.75]);
        assert!((u[0] - (0.625 - 0.75)).abs() < 1e-12);
        assert!((u[1] - 2.0).abs() < 1e-12);
        assert!((u[2] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn sample_at_upper_border_is_exact() {
        let f = DisplacementField::from_fn([3, 3, 3], |p| [p[0], p[1], p[2]]);
        assert_eq!(f.sample([2.0, 2.0, 2.0]), [2.0, 2.0, 2.0]);
        assert_eq!(f.sample([5.0, -1.0, 2.0]), [2.0, 0.0, 2.0]);
    }

    #[test]
    fn single_voxel_axis_is_supported() {
        let f = DisplacementField::from_fn([1, 1, 3], |p| [p[0], 0.0, 0.0]);
        assert_eq!(f.sample([1.5, 0.0, 0.0])[0], 1.5);
    }
}
