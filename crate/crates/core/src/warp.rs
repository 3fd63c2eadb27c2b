//! Spatial transformer: trilinear backward warping with clamp-to-border
//! sampling, affine transforms as displacement fields, and point mapping.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::{trilinear_clamped, DisplacementField};
use crate::landmarks::{Landmark, LandmarkSet};
use crate::tensor::{Real, Tensor};
use crate::volume::Volume3D;

/// Trilinear stencil at one continuous position `(x, y, z)`.
struct Tap<T> {
    /// Flat offsets of the lower and upper neighbour along each axis.
    lo: [usize; 3],
    hi: [usize; 3],
    frac: [T; 3],
    /// Whether the position lies inside `[0, n - 1]` along each axis; the
    /// derivative with respect to a clamped coordinate is zero.
    inside: [bool; 3],
}

impl<T: Real> Tap<T> {
    fn new(p: [T; 3], ext: [usize; 3], strides: [usize; 3]) -> Self {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        let mut frac = [T::zero(); 3];
        let mut inside = [false; 3];
        for a in 0..3 {
            let top = T::lit((ext[a] - 1) as f64);
            inside[a] = ext[a] > 1 && p[a] >= T::zero() && p[a] <= top;
            let c = p[a].max(T::zero()).min(top);
            let fl = c.floor().min(T::lit(ext[a].max(2) as f64 - 2.0)).max(T::zero());
            let i0 = fl.to_usize().unwrap_or(0);
            let i1 = (i0 + 1).min(ext[a] - 1);
            lo[a] = i0 * strides[a];
            hi[a] = i1 * strides[a];
            frac[a] = c - fl;
        }
        Self {
            lo,
            hi,
            frac,
            inside,
        }
    }

    /// The eight `(offset, weight)` pairs; zero weights are dropped by callers.
    fn corners(&self) -> [(usize, T); 8] {
        let one = T::one();
        let mut out = [(0, T::zero()); 8];
        let mut k = 0;
        for (oz, wz) in [(self.lo[2], one - self.frac[2]), (self.hi[2], self.frac[2])] {
            for (oy, wy) in [(self.lo[1], one - self.frac[1]), (self.hi[1], self.frac[1])] {
                for (ox, wx) in [(self.lo[0], one - self.frac[0]), (self.hi[0], self.frac[0])] {
                    out[k] = (oz + oy + ox, wz * wy * wx);
                    k += 1;
                }
            }
        }
        out
    }

    fn sample(&self, data: &[T]) -> T {
        let mut acc = T::zero();
        for (o, w) in self.corners() {
            if w != T::zero() {
                acc += w * data[o];
            }
        }
        acc
    }

    /// Partial derivatives of the interpolant with respect to `(x, y, z)`.
    fn gradient(&self, data: &[T]) -> [T; 3] {
        let one = T::one();
        let v = |ox: usize, oy: usize, oz: usize| data[ox + oy + oz];
        let (fx, fy, fz) = (self.frac[0], self.frac[1], self.frac[2]);
        let [x0, y0, z0] = self.lo;
        let [x1, y1, z1] = self.hi;
        let mut g = [T::zero(); 3];
        if self.inside[0] {
            g[0] = (one - fy) * (one - fz) * (v(x1, y0, z0) - v(x0, y0, z0))
                + fy * (one - fz) * (v(x1, y1, z0) - v(x0, y1, z0))
                + (one - fy) * fz * (v(x1, y0, z1) - v(x0, y0, z1))
                + fy * fz * (v(x1, y1, z1) - v(x0, y1, z1));
        }
        if self.inside[1] {
            g[1] = (one - fx) * (one - fz) * (v(x0, y1, z0) - v(x0, y0, z0))
                + fx * (one - fz) * (v(x1, y1, z0) - v(x1, y0, z0))
                + (one - fx) * fz * (v(x0, y1, z1) - v(x0, y0, z1))
                + fx * fz * (v(x1, y1, z1) - v(x1, y0, z1));
        }
        if self.inside[2] {
            g[2] = (one - fx) * (one - fy) * (v(x0, y0, z1) - v(x0, y0, z0))
                + fx * (one - fy) * (v(x1, y0, z1) - v(x1, y0, z0))
                + (one - fx) * fy * (v(x0, y1, z1) - v(x0, y1, z0))
                + fx * fy * (v(x1, y1, z1) - v(x1, y1, z0));
        }
        g
    }
}

fn check_warp_shapes(img: &[usize], flow: &[usize]) -> Result<()> {
    if img.len() != 4 {
        return Err(Error::ShapeMismatch(format!("image must be [C, D, H, W], got {img:?}")));
    }
    if flow.len() != 4 || flow[0] != 3 {
        return Err(Error::ShapeMismatch(format!("field must be [3, D, H, W], got {flow:?}")));
    }
    for (name, a) in [("D", 1), ("H", 2), ("W", 3)] {
        if img[a] != flow[a] {
            return Err(Error::ShapeMismatch(format!(
                "dimension {name}: image has {}, field has {}",
                img[a], flow[a]
            )));
        }
    }
    Ok(())
}

fn for_each_tap<T: Real>(shape: &[usize], flow: &[T], mut f: impl FnMut(usize, Tap<T>)) {
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    let n = d * h * w;
    let ext = [w, h, d];
    let strides = [1, w, h * w];
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [
                    T::lit(x as f64) + flow[i],
                    T::lit(y as f64) + flow[n + i],
                    T::lit(z as f64) + flow[2 * n + i],
                ];
                f(i, Tap::new(p, ext, strides));
                i += 1;
            }
        }
    }
}

/// `warped(p) = img(p + u(p))` for every channel of `img: [C, D, H, W]`, with
/// `flow: [3, D, H, W]` in voxel units. Differentiable in both inputs.
pub fn warp_var<T: Real>(g: &mut Graph<T>, img: Var, flow: Var) -> Result<Var> {
    let shape = g.shape(img).to_vec();
    check_warp_shapes(&shape, g.shape(flow))?;
    let c = shape[0];
    let n = shape[1] * shape[2] * shape[3];
    let mut out = vec![T::zero(); c * n];
    {
        let (iv, fv) = (g.value(img).data(), g.value(flow).data());
        for_each_tap(&shape, fv, |i, tap| {
            for ch in 0..c {
                out[ch * n + i] = tap.sample(&iv[ch * n..(ch + 1) * n]);
            }
        });
    }
    let value = Tensor::new(&shape, out);
    Ok(g.custom(&[img, flow], value, move |ctx| {
        let (iv, fv, gv) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gi = ctx.needs[0].then(|| vec![T::zero(); c * n]);
        let mut gf = ctx.needs[1].then(|| vec![T::zero(); 3 * n]);
        for_each_tap(&shape, fv, |i, tap| {
            for ch in 0..c {
                let go = gv[ch * n + i];
                if go == T::zero() {
                    continue;
                }
                let base = ch * n;
                if let Some(gi) = gi.as_mut() {
                    for (o, w) in tap.corners() {
                        if w != T::zero() {
                            gi[base + o] += go * w;
                        }
                    }
                }
                if let Some(gf) = gf.as_mut() {
                    let d = tap.gradient(&iv[base..base + n]);
                    for a in 0..3 {
                        gf[a * n + i] += go * d[a];
                    }
                }
            }
        });
        vec![
            gi.map(|v| Tensor::new(ctx.inputs[0].shape(), v)),
            gf.map(|v| Tensor::new(ctx.inputs[1].shape(), v)),
        ]
    }))
}

/// Warps a volume by a displacement field on the same grid.
pub fn warp(moving: &Volume3D, field: &DisplacementField) -> Result<Volume3D> {
    if moving.dims() != field.dims() {
        let (m, f) = (moving.dims(), field.dims());
        let name = ["D", "H", "W"][(0..3).find(|&a| m[a] != f[a]).unwrap_or(0)];
        return Err(Error::ShapeMismatch(format!(
            "dimension {name}: volume {m:?}, field {f:?}"
        )));
    }
    let dims = moving.dims();
    let n = field.voxels();
    let u = field.data();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [x as f64 + u[i], y as f64 + u[n + i], z as f64 + u[2 * n + i]];
                out.push(trilinear_clamped(moving.data(), dims, p) as f32);
                i += 1;
            }
        }
    }
    moving.with_data(out)
}

/// `x ↦ linear · x + translation` in voxel coordinates `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 4]; 3]", try_from = "[[f64; 4]; 3]")]
pub struct AffineTransform {
    pub linear: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<AffineTransform> for [[f64; 4]; 3] {
    fn from(a: AffineTransform) -> Self {
        a.matrix()
    }
}

impl TryFrom<[[f64; 4]; 3]> for AffineTransform {
    type Error = Error;

    fn try_from(m: [[f64; 4]; 3]) -> Result<Self> {
        Self::from_matrix(m)
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn new(linear: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        if linear.iter().flatten().chain(&translation).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite affine transform".into()));
        }
        Ok(Self {
            linear,
            translation,
        })
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// `linear · (x − center) + center`.
    pub fn about_center(linear: [[f64; 3]; 3], center: [f64; 3]) -> Self {
        let a = Self {
            linear,
            translation: [0.0; 3],
        };
        let ac = a.apply(center);
        Self {
            linear,
            translation: std::array::from_fn(|i| center[i] - ac[i]),
        }
    }

    /// 3×4 row-major `[linear | translation]`.
    pub fn matrix(&self) -> [[f64; 4]; 3] {
        std::array::from_fn(|r| {
            [
                self.linear[r][0],
                self.linear[r][1],
                self.linear[r][2],
                self.translation[r],
            ]
        })
    }

    pub fn from_matrix(m: [[f64; 4]; 3]) -> Result<Self> {
        Self::new(
            std::array::from_fn(|r| [m[r][0], m[r][1], m[r][2]]),
            std::array::from_fn(|r| m[r][3]),
        )
    }

    fn linear_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.linear[r][c])
    }

    pub fn det(&self) -> f64 {
        self.linear_matrix().determinant()
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.linear_matrix() * Vector3::from(p) + Vector3::from(self.translation);
        [q[0], q[1], q[2]]
    }

    pub fn inverse(&self) -> Option<Self> {
        let inv = self.linear_matrix().try_inverse()?;
        let t = -(inv * Vector3::from(self.translation));
        Some(Self {
            linear: std::array::from_fn(|r| std::array::from_fn(|c| inv[(r, c)])),
            translation: [t[0], t[1], t[2]],
        })
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let l = self.linear_matrix() * other.linear_matrix();
        let t = self.linear_matrix() * Vector3::from(other.translation) + Vector3::from(self.translation);
        Self {
            linear: std::array::from_fn(|r| std::array::from_fn(|c| l[(r, c)])),
            translation: [t[0], t[1], t[2]],
        }
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        (self.linear_matrix() - other.linear_matrix()).norm()
    }
}

/// `u(p) = linear · p + translation − p` on a `[d, h, w]` grid.
pub fn affine_to_field(a: &AffineTransform, dims: [usize; 3]) -> DisplacementField {
    DisplacementField::from_fn(dims, |p| {
        let q = a.apply(p);
        [q[0] - p[0], q[1] - p[1], q[2] - p[2]]
    })
}

/// `u_total(p) = u_def(p) + u_aff(p + u_def(p))`: the deformable field on the
/// fixed grid followed by the affine field it samples into.
pub fn compose_fields(u_def: &DisplacementField, u_aff: &DisplacementField) -> Result<DisplacementField> {
    if u_def.dims() != u_aff.dims() {
        return Err(Error::ShapeMismatch(format!(
            "fields {:?} and {:?}",
            u_def.dims(),
            u_aff.dims()
        )));
    }
    let n = u_def.voxels();
    let d = u_def.data();
    let mut i = 0;
    let mut out = vec![0.0; 3 * n];
    let [nz, ny, nx] = u_def.dims();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let ud = [d[i], d[n + i], d[2 * n + i]];
                let q = [x as f64 + ud[0], y as f64 + ud[1], z as f64 + ud[2]];
                let ua = u_aff.sample(q);
                for c in 0..3 {
                    out[c * n + i] = ud[c] + ua[c];
                }
                i += 1;
            }
        }
    }
    DisplacementField::new(u_def.dims(), out)
}

/// [`compose_fields`] with the affine stage evaluated in closed form, so
/// points mapped outside the grid are not clamped.
pub fn compose_affine(u_def: &DisplacementField, a: &AffineTransform) -> Result<DisplacementField> {
    let mut out = u_def.clone();
    let n = u_def.voxels();
    let [nz, ny, nx] = u_def.dims();
    let data = out.data_mut();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let q = [x as f64 + data[i], y as f64 + data[n + i], z as f64 + data[2 * n + i]];
                let r = a.apply(q);
                for c in 0..3 {
                    data[c * n + i] += r[c] - q[c];
                }
                i += 1;
            }
        }
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidVolume("non-finite composed displacement".into()));
    }
    Ok(out)
}

/// Points mapped through a field plus the ids that fell outside its extent.
#[derive(Clone, Debug, PartialEq)]
pub struct MappedPoints {
    pub points: LandmarkSet,
    pub out_of_bounds: Vec<i64>,
}

/// World point → voxel → `x + u(x)` → world. Points outside the grid are
/// still mapped (with the border displacement) and flagged.
pub fn transform_points(
    points: &LandmarkSet,
    field: &DisplacementField,
    spacing: [f64; 3],
    origin: [f64; 3],
) -> Result<MappedPoints> {
    let [d, h, w] = field.dims();
    let ext = [w, h, d];
    let mut out = Vec::with_capacity(points.len());
    let mut oob = Vec::new();
    for lm in points.entries() {
        let v: [f64; 3] = std::array::from_fn(|i| (lm.pos[i] - origin[i]) / spacing[i]);
        if (0..3).any(|i| !(v[i] >= 0.0 && v[i] <= (ext[i] - 1) as f64)) {
            oob.push(lm.id);
        }
        let u = field.sample(v);
        out.push(Landmark {
            id: lm.id,
            pos: std::array::from_fn(|i| origin[i] + spacing[i] * (v[i] + u[i])),
        });
    }
    Ok(MappedPoints {
        points: LandmarkSet::new(out)?,
        out_of_bounds: oob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::volume::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume3D {
        Volume3D::from_fn(Grid::isotropic(dims), |_, _, _| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_volume(&mut rng, [5, 6, 7]);
        let out = warp(&v, &DisplacementField::zeros([5, 6, 7])).unwrap();
        assert_eq!(out, v);
        let mut g = Graph::<f32>::new();
        let (a, f) = (g.constant(v.to_tensor()), g.constant(DisplacementField::zeros([5, 6, 7]).to_tensor()));
        let w = warp_var(&mut g, a, f).unwrap();
        assert_eq!(g.value(w).data(), v.data());
    }

    #[test]
    fn integer_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_volume(&mut rng, [4, 5, 6]);
        let f = DisplacementField::from_fn([4, 5, 6], |_| [1.0, 0.0, 0.0]);
        let out = warp(&v, &f).unwrap();
        for z in 0..4 {
            for y in 0..5 {
                for x in 0..5 {
                    assert_eq!(out.at(x, y, z), v.at(x + 1, y, z));
                }
                assert_eq!(out.at(5, y, z), v.at(5, y, z));
            }
        }
    }

    #[test]
    fn half_voxel_shift_on_ramp() {
        let v = Volume3D::from_fn(Grid::isotropic([6, 6, 6]), |x, y, z| (x + 2 * y) as f32 - 0.5 * z as f32);
        let f = DisplacementField::from_fn([6, 6, 6], |_| [0.5, 0.0, 0.0]);
        let out = warp(&v, &f).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..5 {
                    assert!((out.at(x, y, z) - v.at(x, y, z) - 0.5).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_names_dimension() {
        let v = Volume3D::zeros(Grid::isotropic([4, 5, 6]));
        let err = warp(&v, &DisplacementField::zeros([4, 5, 7])).unwrap_err();
        assert!(err.to_string().contains("dimension W"), "{err}");
    }

    #[test]
    fn affine_fields() {
        assert_eq!(
            affine_to_field(&AffineTransform::identity(), [3, 4, 5]),
            DisplacementField::zeros([3, 4, 5])
        );
        let t = affine_to_field(&AffineTransform::translation([1.0, -2.0, 0.5]), [3, 3, 3]);
        assert_eq!(t.at(2, 1, 0), [1.0, -2.0, 0.5]);
        let two = AffineTransform::new([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]], [0.0; 3]).unwrap();
        let f = affine_to_field(&two, [4, 4, 4]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(f.at(x, y, z), [x as f64, y as f64, z as f64]);
                }
            }
        }
    }

    #[test]
    fn affine_warp_matches_direct_resampling() {
        let grid = Grid::isotropic([10, 10, 10]);
        let v = Volume3D::from_fn(grid, |x, y, z| ((x as f32) * 0.7).sin() + (y as f32 * 0.3).cos() * z as f32 * 0.1);
        let a = AffineTransform::about_center(
            [[1.05, 0.02, 0.0], [-0.03, 0.97, 0.01], [0.0, 0.04, 1.02]],
            grid.center_voxel(),
        );
        let out = warp(&v, &affine_to_field(&a, grid.dims)).unwrap();
        for z in 1..9 {
            for y in 1..9 {
                for x in 1..9 {
                    let q = a.apply([x as f64, y as f64, z as f64]);
                    let direct = trilinear_clamped(v.data(), grid.dims, q);
                    assert!((out.at(x, y, z) as f64 - direct).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn affine_json_is_three_by_four() {
        let a = AffineTransform::new([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 10.0]], [0.5, -1.0, 2.0]).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, "[[1.0,2.0,3.0,0.5],[4.0,5.0,6.0,-1.0],[7.0,8.0,10.0,2.0]]");
        assert_eq!(serde_json::from_str::<AffineTransform>(&s).unwrap(), a);
        let inv = a.inverse().unwrap();
        let p = inv.apply(a.apply([1.0, 2.0, 3.0]));
        assert!((p[0] - 1.0).abs() < 1e-12 && (p[1] - 2.0).abs() < 1e-12 && (p[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn point_mapping() {
        let set = LandmarkSet::new(vec![
            Landmark { id: 1, pos: [2.0, 3.0, 1.0] },
            Landmark { id: 2, pos: [40.0, 0.0, 0.0] },
        ])
        .unwrap();
        let zero = transform_points(&set, &DisplacementField::zeros([4, 4, 4]), [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        assert_eq!(zero.points, set);
        assert_eq!(zero.out_of_bounds, vec![2]);
        let c = DisplacementField::from_fn([4, 4, 4], |_| [1.0, 0.0, 0.0]);
        let m = transform_points(&set, &c, [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        assert_eq!(m.points.entries()[0].pos, [4.0, 3.0, 1.0]);
    }

    #[test]
    fn warp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [5, 6, 6];
        let n: usize = dims.iter().product();
        let img = Tensor::new(&[2, 5, 6, 6], (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        // Displacements stay at least 0.1 voxel from lattice points.
        let flow = Tensor::new(
            &[3, 5, 6, 6],
            (0..3 * n)
                .map(|_| rng.gen_range(0.1..0.9) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect(),
        );
        let weights = Tensor::new(&[2, 5, 6, 6], (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let report = check_gradients(&[img, flow], 1e-6, |g, v| {
            let w = warp_var(g, v[0], v[1]).unwrap();
            let c = g.constant(weights.clone());
            let m = g.mul(w, c);
            g.sum(m)
        });
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn closed_form_composition() {
        let a = AffineTransform::about_center([[1.02, 0.03, 0.0], [-0.01, 0.98, 0.02], [0.0, 0.01, 1.01]], [3.5, 3.0, 2.5]);
        let u = DisplacementField::from_fn([6, 7, 8], |p| [0.2 * (p[1] * 0.5).sin(), 0.1 * p[2] / 6.0, -0.15]);
        let exact = compose_affine(&u, &a).unwrap();
        let sampled = compose_fields(&u, &affine_to_field(&a, [6, 7, 8])).unwrap();
        let [d, h, w] = u.dims();
        for z in 1..d - 1 {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let (e, s) = (exact.at(x, y, z), sampled.at(x, y, z));
                    assert!((0..3).all(|c| (e[c] - s[c]).abs() < 1e-12));
                }
            }
        }
    }
}
