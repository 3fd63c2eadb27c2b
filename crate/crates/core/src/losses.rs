//! Training objective: image MSE, diffusion regularizer on the displacement
//! field, MSE between edge maps, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::edge::edge_map_var;
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::tensor::{Real, Tensor};
use crate::volume::Volume3D;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_diff: f64,
    pub w_edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_mse: 1.0,
            w_diff: 1.0,
            w_edge: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(w_mse: f64, w_diff: f64, w_edge: f64) -> Result<Self> {
        let w = Self {
            w_mse,
            w_diff,
            w_edge,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_mse", self.w_mse), ("w_diff", self.w_diff), ("w_edge", self.w_edge)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("loss weight {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Component values of one loss evaluation. Serialized per training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_mse: f64,
    pub l_diff: f64,
    pub l_edge: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_mse, self.l_diff, self.l_edge, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Graph handles of the individual terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mse: Var,
    pub diff: Var,
    pub edge: Var,
    pub total: Var,
}

impl LossVars {
    pub fn report<T: Real>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossReport {
            l_mse: v(self.mse),
            l_diff: v(self.diff),
            l_edge: v(self.edge),
            l_total: v(self.total),
        }
    }
}

fn check_same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// `(1/N) Σ (a_i − b_i)²`
pub fn mse_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    check_same_shape(g, a, b, "mse")?;
    let n = g.value(a).len();
    let inv_n = T::one() / T::lit(n as f64);
    let sum: T = g
        .value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(g.custom(&[a, b], Tensor::scalar(sum * inv_n), move |ctx| {
        let s = ctx.grad.data()[0] * T::lit(2.0) * inv_n;
        let diff = ctx.inputs[0].zip_map(ctx.inputs[1], |x, y| (x - y) * s);
        vec![
            ctx.needs[0].then(|| diff.clone()),
            ctx.needs[1].then(|| diff.map(|v| -v)),
        ]
    }))
}

/// Forward-difference offsets and the box of voxels that have a forward
/// neighbour along every axis of extent > 1.
fn interior(d: usize, h: usize, w: usize) -> ([usize; 3], Vec<(usize, usize)>) {
    let ext = [d, h, w];
    let hi: [usize; 3] = std::array::from_fn(|a| if ext[a] > 1 { ext[a] - 1 } else { 1 });
    let strides = [h * w, w, 1];
    let axes = (0..3)
        .filter(|&a| ext[a] > 1)
        .map(|a| (a, strides[a]))
        .collect();
    (hi, axes)
}

/// Mean over interior voxels of `Σ_axis ‖u(p + e_axis) − u(p)‖²`, field
/// `[3, D, H, W]`.
pub fn diffusion_var<T: Real>(g: &mut Graph<T>, u: Var) -> Result<Var> {
    let s = g.shape(u).to_vec();
    if s.len() != 4 || s[0] != 3 {
        return Err(Error::ShapeMismatch(format!("field must be [3, D, H, W], got {s:?}")));
    }
    let (d, h, w) = (s[1], s[2], s[3]);
    let (hi, axes) = interior(d, h, w);
    let count = hi.iter().product::<usize>();
    let n = d * h * w;
    let inv = T::one() / T::lit(count as f64);
    let visit = move |data: &[T], mut f: Box<dyn FnMut(usize, usize, T) + '_>| {
        for c in 0..3 {
            for z in 0..hi[0] {
                for y in 0..hi[1] {
                    for x in 0..hi[2] {
                        let p = c * n + (z * h + y) * w + x;
                        for &(_, st) in &axes {
                            f(p, p + st, data[p + st] - data[p]);
                        }
                    }
                }
            }
        }
    };
    let mut total = T::zero();
    visit(g.value(u).data(), Box::new(|_, _, dv| total += dv * dv));
    let value = Tensor::scalar(total * inv);
    Ok(g.custom(&[u], value, move |ctx| {
        let scale = T::lit(2.0) * inv * ctx.grad.data()[0];
        let mut gu = Tensor::zeros(ctx.inputs[0].shape());
        {
            let gd = gu.data_mut();
            visit(
                ctx.inputs[0].data(),
                Box::new(|p, q, dv| {
                    gd[q] += scale * dv;
                    gd[p] -= scale * dv;
                }),
            );
        }
        vec![Some(gu)]
    }))
}

/// MSE between the edge maps of `warped` and `fixed` (`[1, D, H, W]` each).
pub fn edge_loss_var<T: Real>(g: &mut Graph<T>, warped: Var, fixed: Var) -> Result<Var> {
    check_same_shape(g, warped, fixed, "edge loss")?;
    let ew = edge_map_var(g, warped);
    let ef = edge_map_var(g, fixed);
    mse_var(g, ew, ef)
}

pub fn total_loss_var<T: Real>(
    g: &mut Graph<T>,
    warped: Var,
    fixed: Var,
    field: Var,
    w: &LossWeights,
) -> Result<LossVars> {
    w.validate()?;
    let fs = g.shape(field);
    let ws = g.shape(warped);
    if fs.len() != 4 || ws.len() != 4 || fs[1..] != ws[1..] {
        return Err(Error::ShapeMismatch(format!(
            "field {fs:?} does not match image {ws:?}"
        )));
    }
    let mse = mse_var(g, warped, fixed)?;
    let diff = diffusion_var(g, field)?;
    let edge = edge_loss_var(g, warped, fixed)?;
    let a = g.scale(mse, T::lit(w.w_mse));
    let b = g.scale(diff, T::lit(w.w_diff));
    let c = g.scale(edge, T::lit(w.w_edge));
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    Ok(LossVars {
        mse,
        diff,
        edge,
        total,
    })
}

fn volume_shapes(a: &Volume3D, b: &Volume3D) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse_loss(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    volume_shapes(a, b)?;
    let mut g = Graph::<f64>::new();
    let (x, y) = (g.constant(a.to_tensor()), g.constant(b.to_tensor()));
    let l = mse_var(&mut g, x, y)?;
    Ok(g.value(l).data()[0])
}

pub fn diffusion_loss(field: &DisplacementField) -> f64 {
    let mut g = Graph::<f64>::new();
    let u = g.constant(field.to_tensor());
    let l = diffusion_var(&mut g, u).expect("field tensors are [3, D, H, W]");
    g.value(l).data()[0]
}

pub fn edge_loss(warped: &Volume3D, fixed: &Volume3D) -> Result<f64> {
    volume_shapes(warped, fixed)?;
    let mut g = Graph::<f64>::new();
    let (x, y) = (g.constant(warped.to_tensor()), g.constant(fixed.to_tensor()));
    let l = edge_loss_var(&mut g, x, y)?;
    Ok(g.value(l).data()[0])
}

pub fn total_loss(
    warped: &Volume3D,
    fixed: &Volume3D,
    field: &DisplacementField,
    w: &LossWeights,
) -> Result<LossReport> {
    volume_shapes(warped, fixed)?;
    let mut g = Graph::<f64>::new();
    let (x, y) = (g.constant(warped.to_tensor()), g.constant(fixed.to_tensor()));
    let u = g.constant(field.to_tensor());
    Ok(total_loss_var(&mut g, x, y, u, w)?.report(&g))
}
