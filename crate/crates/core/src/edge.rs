//! Edge maps: 3×3×3 Gaussian smoothing, three fixed Sobel kernels and a
//! max-normalized gradient magnitude.
//!
//! Kernel layout is `[slice][row][col]` with slices along z, rows along y and
//! columns along x. Filters are applied as cross-correlations with replicated
//! borders.

use crate::autograd::{Graph, Var};
use crate::nn::filter_replicate;
use crate::tensor::{Real, Tensor};
use crate::volume::Volume3D;

/// Peak gradient magnitude, relative to the input's largest absolute value,
/// below which the input counts as flat.
pub const FLAT_TOLERANCE: f64 = 1e-9;

pub type Kernel3 = [[[f64; 3]; 3]; 3];

/// Stabilizer inside the magnitude square root.
pub const MAGNITUDE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SobelBank {
    pub sx: Kernel3,
    pub sy: Kernel3,
    pub sz: Kernel3,
}

pub fn sobel_bank() -> SobelBank {
    let outer = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let inner = [[-2.0, 0.0, 2.0], [-4.0, 0.0, 4.0], [-2.0, 0.0, 2.0]];
    let sx = [outer, inner, outer];

    let outer_y = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let inner_y = [[-2.0, -4.0, -2.0], [0.0, 0.0, 0.0], [2.0, 4.0, 2.0]];
    let sy = [outer_y, inner_y, outer_y];

    let sz = [
        [[-1.0, -2.0, -1.0], [-2.0, -4.0, -2.0], [-1.0, -2.0, -1.0]],
        [[0.0; 3]; 3],
        [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]],
    ];
    SobelBank { sx, sy, sz }
}

impl SobelBank {
    pub fn kernels(&self) -> [&Kernel3; 3] {
        [&self.sx, &self.sy, &self.sz]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel3 {
    pub weights: Kernel3,
}

/// Samples `exp(-(i² + j² + k²) / (2σ²))` on `{-1, 0, 1}³` and normalizes to
/// unit sum.
pub fn gaussian_kernel3(sigma: f64) -> GaussianKernel3 {
    let mut weights = [[[0.0; 3]; 3]; 3];
    let mut total = 0.0;
    for (i, plane) in weights.iter_mut().enumerate() {
        for (j, row) in plane.iter_mut().enumerate() {
            for (k, w) in row.iter_mut().enumerate() {
                let r2 = [i, j, k].iter().map(|&a| (a as f64 - 1.0).powi(2)).sum::<f64>();
                *w = (-r2 / (2.0 * sigma * sigma)).exp();
                total += *w;
            }
        }
    }
    for w in weights.iter_mut().flatten().flatten() {
        *w /= total;
    }
    GaussianKernel3 { weights }
}

pub fn kernel_tensor<T: Real>(k: &Kernel3) -> Tensor<T> {
    let flat: Vec<f64> = k.iter().flatten().flatten().copied().collect();
    Tensor::from_f64(&[3, 3, 3], &flat)
}

pub fn blur_var<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    filter_replicate(g, x, &kernel_tensor(&gaussian_kernel3(1.0).weights))
}

/// Squared gradient magnitude `Σ (S_a ∗ x)²` of a `[1, D, H, W]` input.
pub fn squared_gradient_var<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let bank = sobel_bank();
    let mut acc: Option<Var> = None;
    for k in bank.kernels() {
        let r = filter_replicate(g, x, &kernel_tensor(k));
        let r2 = g.square(r);
        acc = Some(match acc {
            Some(a) => g.add(a, r2),
            None => r2,
        });
    }
    acc.expect("three kernels")
}

/// Normalized edge map of a `[1, D, H, W]` input: blur, Sobel magnitude,
/// division by the global maximum. A flat input yields zeros.
pub fn edge_map_var<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let blurred = blur_var(g, x);
    let s = squared_gradient_var(g, blurred);
    let scale = g.value(x).data().iter().fold(T::one(), |m, v| m.max(v.abs()));
    if g.value(s).max_value().sqrt() <= T::lit(FLAT_TOLERANCE) * scale {
        let shape = g.shape(x).to_vec();
        return g.constant(Tensor::zeros(&shape));
    }
    let mag = g.sqrt_eps(s, T::lit(MAGNITUDE_EPS));
    let peak = g.max_all(mag);
    let inv = reciprocal(g, peak);
    g.mul_scalar_var(mag, inv)
}

fn reciprocal<T: Real>(g: &mut Graph<T>, s: Var) -> Var {
    let v = g.value(s).data()[0];
    g.custom(&[s], Tensor::scalar(T::one() / v), |ctx| {
        let v = ctx.inputs[0].data()[0];
        vec![Some(Tensor::scalar(-ctx.grad.data()[0] / (v * v)))]
    })
}

fn eval_f64(vol: &Volume3D, build: impl FnOnce(&mut Graph<f64>, Var) -> Var) -> Volume3D {
    let mut g = Graph::new();
    let x = g.constant(vol.to_tensor());
    let y = build(&mut g, x);
    Volume3D::from_tensor(*vol.grid(), g.value(y)).expect("filter preserves the grid")
}

pub fn gaussian_blur3(vol: &Volume3D) -> Volume3D {
    eval_f64(vol, blur_var)
}

/// Response of a single kernel, without smoothing.
pub fn filter_response(vol: &Volume3D, kernel: &Kernel3) -> Volume3D {
    eval_f64(vol, |g, x| filter_replicate(g, x, &kernel_tensor(kernel)))
}

/// Unnormalized magnitude `sqrt(Σ (S_a ∗ A)²)`; `blur` selects whether the
/// Gaussian is applied first.
pub fn gradient_magnitude(vol: &Volume3D, blur: bool) -> Volume3D {
    eval_f64(vol, |g, x| {
        let x = if blur { blur_var(g, x) } else { x };
        let s = squared_gradient_var(g, x);
        g.sqrt_eps(s, 0.0)
    })
}

pub fn edge_map(vol: &Volume3D) -> Volume3D {
    eval_f64(vol, edge_map_var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients_sampled;
    use crate::volume::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_layout() {
        let b = sobel_bank();
        assert_eq!(b.sx[1][1], [-4.0, 0.0, 4.0]);
        assert_eq!(b.sx[1][0], [-2.0, 0.0, 2.0]);
        assert_eq!(b.sx[0][1], [-2.0, 0.0, 2.0]);
        assert_eq!(b.sx[0][0], [-1.0, 0.0, 1.0]);
        for k in b.kernels() {
            assert_eq!(k.iter().flatten().flatten().sum::<f64>(), 0.0);
        }
        for s in 0..3 {
            for r in 0..3 {
                for c in 0..3 {
                    assert_eq!(b.sy[s][r][c], b.sx[s][c][r]);
                    assert_eq!(b.sz[s][r][c], b.sx[c][r][s]);
                }
            }
        }
    }

    #[test]
    fn gaussian_weights() {
        let k = gaussian_kernel3(1.0).weights;
        let total: f64 = k.iter().flatten().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // exp(0) / Σ over {-1,0,1}³ of exp(-r²/2) = 1 / (1 + 2e^{-1/2})³
        let expect = 1.0 / (1.0 + 2.0 * (-0.5f64).exp()).powi(3);
        assert!((k[1][1][1] - expect).abs() < 1e-15);
        assert!((k[1][1][1] - 0.09226).abs() < 5e-6);
        for s in 0..3 {
            for r in 0..3 {
                for c in 0..3 {
                    assert_eq!(k[s][r][c], k[2 - s][r][c]);
                    assert_eq!(k[s][r][c], k[s][2 - r][c]);
                    assert_eq!(k[s][r][c], k[s][r][2 - c]);
                }
            }
        }
    }

    #[test]
    fn blur_of_impulse_reproduces_kernel() {
        let g = Grid::isotropic([5, 5, 5]);
        let v = Volume3D::from_fn(g, |x, y, z| if (x, y, z) == (2, 2, 2) { 1.0 } else { 0.0 });
        let b = gaussian_blur3(&v);
        let k = gaussian_kernel3(1.0).weights;
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let inside = (1..=3).contains(&x) && (1..=3).contains(&y) && (1..=3).contains(&z);
                    let expect = if inside { k[z - 1][y - 1][x - 1] as f32 } else { 0.0 };
                    assert!((b.at(x, y, z) - expect).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn blur_keeps_constants_and_interior_ramps() {
        let g = Grid::isotropic([6, 6, 6]);
        let c = Volume3D::from_fn(g, |_, _, _| 3.5);
        assert!(gaussian_blur3(&c).data().iter().all(|&v| (v - 3.5).abs() < 1e-6));
        let ramp = Volume3D::from_fn(g, |x, _, _| x as f32);
        let b = gaussian_blur3(&ramp);
        for z in 0..6 {
            for y in 0..6 {
                for x in 1..5 {
                    assert!((b.at(x, y, z) - x as f32).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn raw_ramp_response_is_32() {
        let g = Grid::isotropic([6, 6, 6]);
        let ramp = Volume3D::from_fn(g, |x, _, _| x as f32);
        let r = filter_response(&ramp, &sobel_bank().sx);
        let m = gradient_magnitude(&ramp, false);
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    assert_eq!(r.at(x, y, z), 32.0);
                    assert_eq!(m.at(x, y, z), 32.0);
                }
            }
        }
    }

    #[test]
    fn flat_input_gives_zero_map() {
        let g = Grid::isotropic([5, 6, 7]);
        let v = Volume3D::from_fn(g, |_, _, _| -2.25);
        assert!(edge_map(&v).data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn step_peaks_on_the_step_plane() {
        let g = Grid::isotropic([8, 8, 8]);
        let v = Volume3D::from_fn(g, |x, _, _| if x >= 4 { 1.0 } else { 0.0 });
        let e = edge_map(&v);
        assert!(e.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        for z in 0..8 {
            for y in 0..8 {
                assert_eq!(e.at(3, y, z), 1.0);
                assert_eq!(e.at(4, y, z), 1.0);
                assert!(e.at(0, y, z) < 0.01);
            }
        }
    }

    fn random_volume(seed: u64) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(Grid::isotropic([7, 8, 9]), |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shift_and_scale_invariance() {
        let v = random_volume(1);
        let e = edge_map(&v);
        let shifted = edge_map(&v.map(|x| x + 7.0));
        let scaled = edge_map(&v.map(|x| x * 3.0));
        for ((a, b), c) in e.data().iter().zip(shifted.data()).zip(scaled.data()) {
            assert!((a - b).abs() < 1e-5);
            assert!((a - c).abs() < 1e-5);
        }
    }

    #[test]
    fn flip_along_x_flips_the_map() {
        let v = random_volume(2);
        let [d, h, w] = v.dims();
        let flipped = Volume3D::from_fn(*v.grid(), |x, y, z| v.at(w - 1 - x, y, z));
        let sx = filter_response(&v, &sobel_bank().sx);
        let sxf = filter_response(&flipped, &sobel_bank().sx);
        let (e, ef) = (edge_map(&v), edge_map(&flipped));
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    assert!((sxf.at(x, y, z) + sx.at(w - 1 - x, y, z)).abs() < 1e-5);
                    assert!((ef.at(x, y, z) - e.at(w - 1 - x, y, z)).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn edge_map_gradient_matches_finite_differences() {
        let v = random_volume(3);
        let report = check_gradients_sampled(&[v.to_tensor()], 1e-6, 120, 5, |g, x| {
            let e = edge_map_var(g, x[0]);
            let w = g.constant(Tensor::new(
                g.shape(e),
                (0..g.value(e).len()).map(|i| ((i * 7919) % 13) as f64 / 13.0).collect(),
            ));
            let y = g.mul(e, w);
            g.sum(y)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
