//! Scalar volumes, brain masks and multi-contrast studies.
//!
//! Voxel data is stored `[z][y][x]` with x fastest. Physical quantities
//! (spacing, origin, world points) are `(x, y, z)` triples in millimetres.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Sampling grid: voxel counts plus the voxel-to-world mapping
/// `world = origin + spacing ⊙ (x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// `(d, h, w)`, i.e. `(nz, ny, nx)`.
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("zero-sized dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite origin {origin:?}")));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    pub fn isotropic(dims: [usize; 3]) -> Self {
        Self::new(dims, [1.0; 3], [0.0; 3]).expect("valid unit grid")
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxel counts in `(x, y, z)` order.
    pub fn extent_xyz(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| self.origin[i] + self.spacing[i] * p[i])
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (p[i] - self.origin[i]) / self.spacing[i])
    }

    pub fn contains_voxel(&self, p: [f64; 3]) -> bool {
        let ext = self.extent_xyz();
        (0..3).all(|i| p[i] >= 0.0 && p[i] <= (ext[i] - 1) as f64)
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.dims == other.dims
    }

    pub fn center_voxel(&self) -> [f64; 3] {
        let ext = self.extent_xyz();
        std::array::from_fn(|i| (ext[i] as f64 - 1.0) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidVolume(format!(
                "{} values for grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite voxel value".into()));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    /// Builds a volume from `f(x, y, z)` evaluated at voxel indices.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let [d, h, w] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(z, y, x)]
    }

    /// Same grid, new values (validated).
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.grid, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `[1, D, H, W]` tensor for the autodiff engine.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let [d, h, w] = self.grid.dims;
        Tensor::new(
            &[1, d, h, w],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    /// Takes channel 0 of a `[C, D, H, W]` tensor on this grid.
    pub fn from_tensor<T: Real>(grid: Grid, t: &Tensor<T>) -> Result<Self> {
        let n = grid.len();
        if t.len() < n || t.len() % n != 0 {
            return Err(Error::ShapeMismatch(format!(
                "tensor {:?} on grid {:?}",
                t.shape(),
                grid.dims
            )));
        }
        Self::new(grid, t.data()[..n].iter().map(|v| v.as_f64() as f32).collect())
    }
}

/// Boolean mask on a volume's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainMask {
    grid: Grid,
    data: Vec<bool>,
}

impl BrainMask {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} voxels for grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn full(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![true; grid.len()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &BrainMask) -> Result<BrainMask> {
        if !self.grid.same_shape(&other.grid) {
            return Err(Error::ShapeMismatch("mask shapes differ".into()));
        }
        Ok(Self {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }

    /// Masked values of `vol`, in voxel order.
    pub fn select(&self, vol: &Volume3D) -> Vec<f32> {
        vol.data()
            .iter()
            .zip(&self.data)
            .filter_map(|(&v, &m)| m.then_some(v))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contrast {
    T1ce,
    T1,
    Flair,
    T2,
}

impl Contrast {
    /// Order of the per-contrast fusion blocks.
    pub const ALL: [Contrast; 4] = [Contrast::T1ce, Contrast::T1, Contrast::Flair, Contrast::T2];

    pub fn name(self) -> &'static str {
        match self {
            Contrast::T1ce => "t1ce",
            Contrast::T1 => "t1",
            Contrast::Flair => "flair",
            Contrast::T2 => "t2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s.to_ascii_lowercase())
    }
}

/// The four co-registered contrasts of one time point.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiContrastStudy {
    pub study_id: String,
    pub t1: Volume3D,
    pub t1ce: Volume3D,
    pub t2: Volume3D,
    pub flair: Volume3D,
    pub landmarks: Option<crate::landmarks::LandmarkSet>,
}

impl MultiContrastStudy {
    pub fn new(
        study_id: impl Into<String>,
        t1: Volume3D,
        t1ce: Volume3D,
        t2: Volume3D,
        flair: Volume3D,
        landmarks: Option<crate::landmarks::LandmarkSet>,
    ) -> Result<Self> {
        let study = Self {
            study_id: study_id.into(),
            t1,
            t1ce,
            t2,
            flair,
            landmarks,
        };
        study.validate()?;
        Ok(study)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.t1.grid();
        for c in Contrast::ALL {
            if self.get(c).grid() != g {
                return Err(Error::ShapeMismatch(format!(
                    "study {}: {} grid {:?} differs from t1 grid {:?}",
                    self.study_id,
                    c.name(),
                    self.get(c).grid(),
                    g
                )));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> &Grid {
        self.t1.grid()
    }

    pub fn get(&self, c: Contrast) -> &Volume3D {
        match c {
            Contrast::T1 => &self.t1,
            Contrast::T1ce => &self.t1ce,
            Contrast::T2 => &self.t2,
            Contrast::Flair => &self.flair,
        }
    }

    pub fn get_mut(&mut self, c: Contrast) -> &mut Volume3D {
        match c {
            Contrast::T1 => &mut self.t1,
            Contrast::T1ce => &mut self.t1ce,
            Contrast::T2 => &mut self.t2,
            Contrast::Flair => &mut self.flair,
        }
    }

    /// Applies `f` to every contrast.
    pub fn try_map(&self, mut f: impl FnMut(Contrast, &Volume3D) -> Result<Volume3D>) -> Result<Self> {
        Self::new(
            self.study_id.clone(),
            f(Contrast::T1, &self.t1)?,
            f(Contrast::T1ce, &self.t1ce)?,
            f(Contrast::T2, &self.t2)?,
            f(Contrast::Flair, &self.flair)?,
            self.landmarks.clone(),
        )
    }
}
