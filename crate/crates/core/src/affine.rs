//! Intensity-based 12-parameter affine pre-registration: masked MSE,
//! Adam, three-level block-average pyramid, coarse to fine.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::preprocess::brain_mask;
use crate::tensor::Tensor;
use crate::volume::Volume3D;
use crate::warp::{warp_var, AffineTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineConfig {
    pub levels: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Contrast used for registration, by name (`t1ce`, `t1`, `flair`, `t2`).
    pub contrast: String,
}

impl Default for AffineConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: 200,
            lr: 1e-2,
            contrast: "t1ce".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineResult {
    pub transform: AffineTransform,
    pub mse: f64,
    pub identity_mse: f64,
    /// Set when optimisation did not beat identity and identity was returned.
    pub warning: Option<String>,
}

/// One pyramid level: fine-grid voxel `p = scale · q + offset` for level
/// voxel `q`.
struct Level {
    dims: [usize; 3],
    scale: f64,
    offset: f64,
    moving: Tensor<f64>,
    fixed: Tensor<f64>,
    mask: Tensor<f64>,
    count: f64,
}

fn downsample(data: &[f64], dims: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let nd = dims.map(|n| (n / 2).max(1));
    let [d, h, w] = dims;
    let mut out = Vec::with_capacity(nd.iter().product());
    for z in 0..nd[0] {
        for y in 0..nd[1] {
            for x in 0..nd[2] {
                let mut acc = 0.0;
                let mut k = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (zz, yy, xx) = (2 * z + dz, 2 * y + dy, 2 * x + dx);
                            if zz < d && yy < h && xx < w {
                                acc += data[(zz * h + yy) * w + xx];
                                k += 1.0;
                            }
                        }
                    }
                }
                out.push(acc / k);
            }
        }
    }
    (out, nd)
}

fn pyramid(moving: &Volume3D, fixed: &Volume3D, levels: usize) -> Result<Vec<Level>> {
    let mask_f = brain_mask(fixed)?;
    brain_mask(moving)?;
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let mut m = to64(moving.data());
    let mut f = to64(fixed.data());
    let mut k: Vec<f64> = mask_f.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut dims = moving.dims();
    let (mut scale, mut offset) = (1.0, 0.0);
    let mut out = Vec::new();
    for level in 0..levels {
        if level > 0 {
            if dims.iter().any(|&n| n < 8) {
                break;
            }
            (m, _) = downsample(&m, dims);
            (f, _) = downsample(&f, dims);
            let (kk, nd) = downsample(&k, dims);
            k = kk;
            dims = nd;
            offset += scale * 0.5;
            scale *= 2.0;
        }
        let bin: Vec<f64> = k.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let count = bin.iter().sum::<f64>();
        if count == 0.0 {
            break;
        }
        let shape = [1, dims[0], dims[1], dims[2]];
        out.push(Level {
            dims,
            scale,
            offset,
            moving: Tensor::new(&shape, m.clone()),
            fixed: Tensor::new(&shape, f.clone()),
            mask: Tensor::new(&shape, bin),
            count,
        });
    }
    out.reverse();
    Ok(out)
}

/// Parameters at one level: `A = I + M`, `x' = A (q − c) + c + r τ` in level
/// voxels, where `c` is the level grid centre and `r` its half extent. Both
/// blocks then move the boundary of the grid by comparable amounts.
struct Param {
    center: [f64; 3],
    radius: f64,
}

impl Param {
    fn new(dims: [usize; 3]) -> Self {
        let ext = [dims[2], dims[1], dims[0]];
        Self {
            center: std::array::from_fn(|a| (ext[a] as f64 - 1.0) / 2.0),
            radius: ext.iter().map(|&n| n as f64 / 2.0).fold(1.0, f64::max),
        }
    }

    /// Field op mapping the 12 parameters to `[3, D, H, W]` displacements.
    fn field_var(&self, g: &mut Graph<f64>, theta: Var, dims: [usize; 3]) -> Var {
        let [d, h, w] = dims;
        let n = d * h * w;
        let mut rel = Vec::with_capacity(3 * n);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    rel.extend([
                        x as f64 - self.center[0],
                        y as f64 - self.center[1],
                        z as f64 - self.center[2],
                    ]);
                }
            }
        }
        let rel = Rc::new(rel);
        let r = self.radius;
        let th = g.value(theta).data().to_vec();
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            let q = &rel[3 * i..3 * i + 3];
            for row in 0..3 {
                let m = &th[3 * row..3 * row + 3];
                out[row * n + i] = m[0] * q[0] + m[1] * q[1] + m[2] * q[2] + r * th[9 + row];
            }
        }
        g.custom(&[theta], Tensor::new(&[3, d, h, w], out), move |ctx| {
            let gd = ctx.grad.data();
            let mut gt = vec![0.0; 12];
            for i in 0..n {
                let q = &rel[3 * i..3 * i + 3];
                for row in 0..3 {
                    let go = gd[row * n + i];
                    for col in 0..3 {
                        gt[3 * row + col] += go * q[col];
                    }
                    gt[9 + row] += go * r;
                }
            }
            vec![Some(Tensor::new(&[12], gt))]
        })
    }

    /// Level parameters for a fine-grid transform.
    fn encode(&self, a: &AffineTransform, level: &Level) -> [f64; 12] {
        let c_fine: [f64; 3] = std::array::from_fn(|i| level.scale * self.center[i] + level.offset);
        let ac = a.apply(c_fine);
        let mut th = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                let id = if r == c { 1.0 } else { 0.0 };
                th[3 * r + c] = a.linear[r][c] - id;
            }
            th[9 + r] = (ac[r] - c_fine[r]) / (level.scale * self.radius);
        }
        th
    }

    fn decode(&self, th: &[f64], level: &Level) -> AffineTransform {
        let linear: [[f64; 3]; 3] = std::array::from_fn(|r| {
            std::array::from_fn(|c| if r == c { 1.0 } else { 0.0 } + th[3 * r + c])
        });
        let c_fine: [f64; 3] = std::array::from_fn(|i| level.scale * self.center[i] + level.offset);
        let centred = AffineTransform::about_center(linear, c_fine);
        AffineTransform {
            linear,
            translation: std::array::from_fn(|i| centred.translation[i] + level.scale * self.radius * th[9 + i]),
        }
    }
}

fn masked_mse(g: &mut Graph<f64>, level: &Level, field: Var) -> Var {
    let m = g.constant(level.moving.clone());
    let f = g.constant(level.fixed.clone());
    let k = g.constant(level.mask.clone());
    let warped = warp_var(g, m, field).expect("level tensors share one grid");
    let diff = g.sub(warped, f);
    let sq = g.square(diff);
    let masked = g.mul(sq, k);
    let s = g.sum(masked);
    g.scale(s, 1.0 / level.count)
}

fn level_loss(level: &Level, a: &AffineTransform) -> f64 {
    let p = Param::new(level.dims);
    let mut g = Graph::new();
    let th = g.constant(Tensor::new(&[12], p.encode(a, level).to_vec()));
    let field = p.field_var(&mut g, th, level.dims);
    let l = masked_mse(&mut g, level, field);
    g.value(l).data()[0]
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - Self::B1.powi(self.t), 1.0 - Self::B2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

pub fn affine_register(moving: &Volume3D, fixed: &Volume3D) -> Result<AffineResult> {
    affine_register_with(moving, fixed, &AffineConfig::default())
}

/// Finds `a` minimising the masked MSE between `moving ∘ a` and `fixed`.
/// The mask is the fixed image's nonzero region.
pub fn affine_register_with(moving: &Volume3D, fixed: &Volume3D, cfg: &AffineConfig) -> Result<AffineResult> {
    if moving.dims() != fixed.dims() {
        return Err(Error::ShapeMismatch(format!(
            "moving {:?} vs fixed {:?}",
            moving.dims(),
            fixed.dims()
        )));
    }
    if cfg.levels == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig(format!("affine levels {} lr {}", cfg.levels, cfg.lr)));
    }
    let levels = pyramid(moving, fixed, cfg.levels)?;
    let finest = levels.last().expect("pyramid has at least the full-resolution level");
    let identity_mse = level_loss(finest, &AffineTransform::identity());
    let mut a = AffineTransform::identity();
    for (k, level) in levels.iter().enumerate() {
        let p = Param::new(level.dims);
        let base_lr = cfg.lr / 2f64.powi(k as i32);
        let mut th = p.encode(&a, level);
        let mut adam = Adam::new(12);
        for it in 0..cfg.iterations {
            let mut g = Graph::new();
            let theta = g.leaf(Tensor::new(&[12], th.to_vec()));
            let field = p.field_var(&mut g, theta, level.dims);
            let loss = masked_mse(&mut g, level, field);
            let grads = g.backward(loss);
            let grad = grads.get(theta).expect("parameters are a leaf").data().to_vec();
            let lr = base_lr * (1.0 - it as f64 / cfg.iterations as f64);
            adam.step(&mut th, &grad, lr);
        }
        a = p.decode(&th, level);
    }
    let mse = level_loss(finest, &a);
    let valid = mse.is_finite() && a.det() > 0.0 && mse <= identity_mse;
    if !valid {
        log::warn!("affine registration did not improve on identity ({mse} vs {identity_mse})");
        return Ok(AffineResult {
            transform: AffineTransform::identity(),
            mse: identity_mse,
            identity_mse,
            warning: Some(format!(
                "optimised MSE {mse} not better than identity MSE {identity_mse}"
            )),
        });
    }
    Ok(AffineResult {
        transform: a,
        mse,
        identity_mse,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::volume::Grid;

    #[test]
    fn encode_decode_round_trip() {
        let grid = Grid::isotropic([16, 18, 20]);
        let fixed = Volume3D::from_fn(grid, |x, y, z| 1.0 + (x + y + z) as f32);
        let levels = pyramid(&fixed, &fixed, 3).unwrap();
        assert_eq!(levels.len(), 3);
        assert_eq!(levels[0].dims, [4, 4, 5]);
        let a = AffineTransform::new(
            [[1.1, 0.02, 0.0], [0.01, 0.95, -0.03], [0.0, 0.05, 1.02]],
            [1.5, -2.0, 0.25],
        )
        .unwrap();
        for level in &levels {
            let p = Param::new(level.dims);
            let b = p.decode(&p.encode(&a, level), level);
            assert!(a.frobenius_distance(&b) < 1e-12);
            for i in 0..3 {
                assert!((a.translation[i] - b.translation[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn level_field_matches_decoded_transform() {
        let grid = Grid::isotropic([16, 16, 16]);
        let fixed = Volume3D::from_fn(grid, |x, _, _| 1.0 + x as f32);
        let levels = pyramid(&fixed, &fixed, 2).unwrap();
        let level = &levels[0];
        let p = Param::new(level.dims);
        let th: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = p.decode(&th, level);
        let mut g = Graph::new();
        let t = g.constant(Tensor::new(&[12], th));
        let f = p.field_var(&mut g, t, level.dims);
        let u = g.value(f).data().to_vec();
        let n = 512;
        // Level voxel q maps to fine voxel 2q + 0.5.
        let q = [3.0, 5.0, 1.0];
        let i = (1 * 8 + 5) * 8 + 3;
        let fine = a.apply(q.map(|v| 2.0 * v + 0.5));
        for c in 0..3 {
            let expect = (fine[c] - 0.5) / 2.0 - q[c];
            assert!((u[c * n + i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn field_op_gradient() {
        let p = Param::new([4, 5, 6]);
        let th = Tensor::new(&[12], (0..12).map(|i| 0.1 * i as f64 - 0.4).collect());
        let w: Vec<f64> = (0..3 * 120).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let report = check_gradients(&[th], 1e-5, |g, v| {
            let f = p.field_var(g, v[0], [4, 5, 6]);
            let c = g.constant(Tensor::new(&[3, 4, 5, 6], w.clone()));
            let m = g.mul(f, c);
            g.sum(m)
        });
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn identical_images_stay_at_identity() {
        let grid = Grid::isotropic([16, 16, 16]);
        let v = Volume3D::from_fn(grid, |x, y, z| {
            let r = ((x as f32 - 7.5).powi(2) + (y as f32 - 7.5).powi(2) + (z as f32 - 7.5).powi(2)) / 30.0;
            if r < 1.5 { (-r).exp() } else { 0.0 }
        });
        let cfg = AffineConfig {
            iterations: 30,
            ..Default::default()
        };
        let r = affine_register_with(&v, &v, &cfg).unwrap();
        assert_eq!(r.identity_mse, 0.0);
        assert!(r.mse <= 1e-6 * (r.identity_mse + 1e-12));
    }
}
