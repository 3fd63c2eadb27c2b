//! Synthetic pre/post-operative case pairs with a known displacement field.
//!
//! The pre-op anatomy is an analytic function of position, so the post-op
//! study is evaluated exactly at `p + u(p)` instead of being resampled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::landmarks::{Landmark, LandmarkSet};
use crate::metrics::{jacobian_det, neg_jacobian_fraction};
use crate::volume::{Contrast, Grid, MultiContrastStudy, Volume3D};

pub const MIN_SIZE: usize = 32;
pub const MAX_DISPLACEMENT: f64 = 8.0;
const STRUCTURES: usize = 14;
const MIN_LANDMARKS: usize = 10;
const RBF_CENTERS: usize = 8;

/// One generated case. Moving is `pre`, fixed is `post`; both carry their
/// landmarks, and `post(p) ≈ remap(pre(p + gt_field(p)))` outside the void.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCase {
    pub pre: MultiContrastStudy,
    pub post: MultiContrastStudy,
    pub gt_field: DisplacementField,
    /// Centre (voxel `x, y, z`) and radius of the post-op void.
    pub void_center: [f64; 3],
    pub void_radius: f64,
}

impl SyntheticCase {
    pub fn grid(&self) -> &Grid {
        self.post.grid()
    }

    /// `(fixed, moving)` landmark sets.
    pub fn landmarks(&self) -> (&LandmarkSet, &LandmarkSet) {
        (
            self.post.landmarks.as_ref().expect("generated with landmarks"),
            self.pre.landmarks.as_ref().expect("generated with landmarks"),
        )
    }
}

struct Blob {
    center: [f64; 3],
    sigma: f64,
    amp: f64,
}

struct Anatomy {
    center: [f64; 3],
    radii: [f64; 3],
    blobs: Vec<Blob>,
    wave: [f64; 3],
    phase: f64,
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

impl Anatomy {
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// 1 in the core, falling smoothly to 0 at the ellipsoid surface.
    fn taper(&self, p: [f64; 3]) -> f64 {
        smoothstep((1.0 - self.radius(p)) / 0.3)
    }

    /// Tissue value in roughly `[0.3, 2]`.
    fn tissue(&self, p: [f64; 3]) -> f64 {
        let wave = 0.12 * ((0..3).map(|i| self.wave[i] * p[i]).sum::<f64>() + self.phase).sin();
        let blobs: f64 = self
            .blobs
            .iter()
            .map(|b| b.amp * (-dist2(p, b.center) / (2.0 * b.sigma * b.sigma)).exp())
            .sum();
        (1.0 + wave + blobs).max(0.3)
    }

    fn intensity(&self, c: Contrast, p: [f64; 3]) -> f64 {
        let t = self.taper(p);
        if t == 0.0 {
            return 0.0;
        }
        let s = self.tissue(p);
        let v = match c {
            Contrast::T1 => s,
            Contrast::T1ce => s.powf(1.6),
            Contrast::T2 => 2.4 - s,
            Contrast::Flair => 1.5 * s.ln_1p(),
        };
        t * v
    }
}

/// Smooth RBF displacement followed by a small affine, in voxel units.
struct Motion {
    centers: Vec<([f64; 3], [f64; 3])>,
    sigma: f64,
    linear: [[f64; 3]; 3],
    translation: [f64; 3],
    pivot: [f64; 3],
}

impl Motion {
    fn rbf(&self, p: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for (c, a) in &self.centers {
            let w = (-dist2(p, *c) / (2.0 * self.sigma * self.sigma)).exp();
            for i in 0..3 {
                u[i] += w * a[i];
            }
        }
        u
    }

    /// `u(p) = u_rbf(p) + (A − I)(q − pivot) + t` with `q = p + u_rbf(p)`.
    fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rbf(p);
        let q: [f64; 3] = std::array::from_fn(|i| p[i] + r[i] - self.pivot[i]);
        std::array::from_fn(|i| {
            let aq: f64 = (0..3).map(|j| self.linear[i][j] * q[j]).sum();
            r[i] + aq - q[i] + self.translation[i]
        })
    }

    /// Solves `p + u(p) = target` by fixed-point iteration.
    fn invert(&self, target: [f64; 3]) -> Option<[f64; 3]> {
        let mut p = target;
        for _ in 0..500 {
            let u = self.displacement(p);
            let next: [f64; 3] = std::array::from_fn(|i| target[i] - u[i]);
            let step = dist2(next, p);
            p = next;
            if step < 1e-24 {
                return Some(p);
            }
        }
        None
    }
}

fn rotation(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = angles;
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn uniform3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range(lo..hi))
}

fn make_anatomy(rng: &mut ChaCha8Rng, n: f64) -> Anatomy {
    let center = [(n - 1.0) / 2.0; 3];
    let radii = [0.36 * n, 0.40 * n, 0.32 * n].map(|r| r * rng.gen_range(0.95..1.05));
    let mut blobs: Vec<Blob> = Vec::with_capacity(STRUCTURES);
    while blobs.len() < STRUCTURES {
        let c: [f64; 3] = std::array::from_fn(|i| center[i] + radii[i] * rng.gen_range(-0.7..0.7));
        let q: f64 = (0..3).map(|i| ((c[i] - center[i]) / radii[i]).powi(2)).sum();
        if q > 0.7 * 0.7 || blobs.iter().any(|b| dist2(b.center, c) < (0.12 * n).powi(2)) {
            continue;
        }
        let sign = if blobs.len() % 2 == 0 { 1.0 } else { -1.0 };
        blobs.push(Blob {
            center: c,
            sigma: n * rng.gen_range(0.035..0.055),
            amp: sign * rng.gen_range(0.45..0.7),
        });
    }
    Anatomy {
        center,
        radii,
        blobs,
        wave: uniform3(rng, -0.25, 0.25),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

fn make_motion(rng: &mut ChaCha8Rng, n: f64) -> Motion {
    let centre = (n - 1.0) / 2.0;
    let amp = 0.07 * n;
    let centers = (0..RBF_CENTERS)
        .map(|_| (uniform3(rng, 0.2 * n, 0.8 * n), uniform3(rng, -amp, amp)))
        .collect();
    let rot = rotation(uniform3(rng, -0.06, 0.06));
    let scale = uniform3(rng, 0.96, 1.04);
    let linear = std::array::from_fn(|i| std::array::from_fn(|j| rot[i][j] * scale[j]));
    Motion {
        centers,
        sigma: n * rng.gen_range(0.15..0.2),
        linear,
        translation: uniform3(rng, -0.04 * n, 0.04 * n),
        pivot: [centre; 3],
    }
}

/// Generates a deterministic case on an `size³` grid with 1 mm spacing.
pub fn make_synthetic_case(seed: u64, size: usize) -> Result<SyntheticCase> {
    if size < MIN_SIZE {
        return Err(Error::InvalidConfig(format!(
            "synthetic size {size} is below the minimum {MIN_SIZE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let dims = [size; 3];
    let grid = Grid::isotropic(dims);
    let anatomy = make_anatomy(&mut rng, n);
    let void_radius = 0.1 * n;
    let (field, fixed_pts, void_center) = loop {
        let motion = make_motion(&mut rng, n);
        let field = DisplacementField::from_fn(dims, |p| motion.displacement(p));
        if field.max_norm() > MAX_DISPLACEMENT || neg_jacobian_fraction(&jacobian_det(&field)) > 0.0 {
            continue;
        }
        let void_center = uniform3(&mut rng, 0.3 * n, 0.7 * n);
        let u = motion.displacement(void_center);
        if anatomy.radius(std::array::from_fn(|i| void_center[i] + u[i])) > 0.6 {
            continue;
        }
        let keep = |p: [f64; 3]| {
            p.iter().all(|&v| v >= 1.0 && v <= n - 2.0) && dist2(p, void_center) > (void_radius + 2.0).powi(2)
        };
        let fixed_pts: Vec<(usize, [f64; 3])> = anatomy
            .blobs
            .iter()
            .enumerate()
            .filter_map(|(k, b)| motion.invert(b.center).filter(|&p| keep(p)).map(|p| (k, p)))
            .collect();
        if fixed_pts.len() >= MIN_LANDMARKS {
            break (field, fixed_pts, void_center);
        }
    };
    let remap: Vec<(f64, f64)> = Contrast::ALL
        .iter()
        .map(|_| (rng.gen_range(0.8..1.2), rng.gen_range(0.85..1.15)))
        .collect();

    let mut pre_vols = Vec::with_capacity(4);
    let mut post_vols = Vec::with_capacity(4);
    for (ci, &c) in Contrast::ALL.iter().enumerate() {
        pre_vols.push(Volume3D::from_fn(grid, |x, y, z| {
            anatomy.intensity(c, [x as f64, y as f64, z as f64]) as f32
        }));
        let (gain, gamma) = remap[ci];
        post_vols.push(Volume3D::from_fn(grid, |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            let u = field.at(x, y, z);
            let v = anatomy.intensity(c, std::array::from_fn(|i| p[i] + u[i]));
            let hole = 1.0 - 0.9 * smoothstep((void_radius + 1.0 - dist2(p, void_center).sqrt()) / 2.0);
            (gain * v.powf(gamma) * hole) as f32
        }));
    }
    let to_set = |pts: Vec<Landmark>| LandmarkSet::new(pts);
    let moving = to_set(
        fixed_pts
            .iter()
            .map(|&(k, _)| Landmark {
                id: k as i64 + 1,
                pos: grid.voxel_to_world(anatomy.blobs[k].center),
            })
            .collect(),
    )?;
    let fixed = to_set(
        fixed_pts
            .iter()
            .map(|&(k, p)| Landmark {
                id: k as i64 + 1,
                pos: grid.voxel_to_world(p),
            })
            .collect(),
    )?;
    let study = |tag: &str, v: Vec<Volume3D>, lm: LandmarkSet| {
        let [t1ce, t1, flair, t2]: [Volume3D; 4] = v.try_into().expect("four contrasts");
        MultiContrastStudy::new(format!("synth-{seed}-{tag}"), t1, t1ce, t2, flair, Some(lm))
    };
    Ok(SyntheticCase {
        pre: study("pre", pre_vols, moving)?,
        post: study("post", post_vols, fixed)?,
        gt_field: field,
        void_center,
        void_radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::score_case;

    #[test]
    fn rejects_small_grids() {
        assert!(make_synthetic_case(0, 31).is_err());
    }

    #[test]
    fn deterministic_and_self_consistent() {
        let a = make_synthetic_case(7, 32).unwrap();
        assert_eq!(a, make_synthetic_case(7, 32).unwrap());
        assert_ne!(a.gt_field, make_synthetic_case(8, 32).unwrap().gt_field);
        let (f, m) = a.landmarks();
        assert!(f.len() >= MIN_LANDMARKS);
        let s = score_case(f, m, &a.gt_field, a.grid()).unwrap();
        assert!(s.median_ae < 0.5, "{}", s.median_ae);
        assert!(a.gt_field.max_norm() <= MAX_DISPLACEMENT);
        assert_eq!(neg_jacobian_fraction(&jacobian_det(&a.gt_field)), 0.0);
    }

    #[test]
    fn void_only_in_post() {
        let a = make_synthetic_case(3, 32).unwrap();
        let [x, y, z] = a.void_center.map(|v| v.round() as usize);
        let u = a.gt_field.at(x, y, z);
        let m = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]].map(|v| v.round() as usize);
        let pre = a.pre.t1.at(m[0], m[1], m[2]);
        assert!(pre > 0.3);
        assert!(a.post.t1.at(x, y, z) < 0.2 * pre);
    }
}
