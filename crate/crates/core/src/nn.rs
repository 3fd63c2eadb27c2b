//! Volumetric layers on `[C, D, H, W]` tensors: convolution, max pooling,
//! trilinear upsampling and fixed-kernel filtering with replicate borders.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::tensor::{spatial_dims, Real, Tensor};

pub type Dims = (usize, usize, usize);

fn volume(d: Dims) -> usize {
    d.0 * d.1 * d.2
}

/// Copies `[c, d, h, w]` into a larger zero buffer with `lo` voxels before and
/// `hi` after each spatial axis.
fn pad_zero<T: Real>(src: &[T], c: usize, d: Dims, lo: usize, hi: usize) -> (Vec<T>, Dims) {
    let pd = (d.0 + lo + hi, d.1 + lo + hi, d.2 + lo + hi);
    let mut out = vec![T::zero(); c * volume(pd)];
    for ch in 0..c {
        for z in 0..d.0 {
            for y in 0..d.1 {
                let s = ((ch * d.0 + z) * d.1 + y) * d.2;
                let t = ((ch * pd.0 + z + lo) * pd.1 + y + lo) * pd.2 + lo;
                out[t..t + d.2].copy_from_slice(&src[s..s + d.2]);
            }
        }
    }
    (out, pd)
}

fn pad_replicate<T: Real>(src: &[T], c: usize, d: Dims, p: usize) -> (Vec<T>, Dims) {
    let pd = (d.0 + 2 * p, d.1 + 2 * p, d.2 + 2 * p);
    let mut out = vec![T::zero(); c * volume(pd)];
    let clamp = |i: usize, n: usize| i.saturating_sub(p).min(n - 1);
    for ch in 0..c {
        for z in 0..pd.0 {
            let sz = clamp(z, d.0);
            for y in 0..pd.1 {
                let sy = clamp(y, d.1);
                let s = ((ch * d.0 + sz) * d.1 + sy) * d.2;
                let t = ((ch * pd.0 + z) * pd.1 + y) * pd.2;
                for i in 0..pd.2 {
                    out[t + i] = src[s + clamp(i, d.2)];
                }
            }
        }
    }
    (out, pd)
}

/// Adjoint of [`pad_replicate`]: folds padded-grid values back onto the
/// voxels they were copied from.
fn fold_replicate<T: Real>(padded: &[T], c: usize, d: Dims, p: usize) -> Vec<T> {
    let pd = (d.0 + 2 * p, d.1 + 2 * p, d.2 + 2 * p);
    let mut out = vec![T::zero(); c * volume(d)];
    let clamp = |i: usize, n: usize| i.saturating_sub(p).min(n - 1);
    for ch in 0..c {
        for z in 0..pd.0 {
            let sz = clamp(z, d.0);
            for y in 0..pd.1 {
                let sy = clamp(y, d.1);
                let s = ((ch * d.0 + sz) * d.1 + sy) * d.2;
                let t = ((ch * pd.0 + z) * pd.1 + y) * pd.2;
                for i in 0..pd.2 {
                    out[s + clamp(i, d.2)] += padded[t + i];
                }
            }
        }
    }
    out
}

fn crop<T: Real>(src: &[T], c: usize, pd: Dims, lo: usize, d: Dims) -> Vec<T> {
    let mut out = Vec::with_capacity(c * volume(d));
    for ch in 0..c {
        for z in 0..d.0 {
            for y in 0..d.1 {
                let s = ((ch * pd.0 + z + lo) * pd.1 + y + lo) * pd.2 + lo;
                out.extend_from_slice(&src[s..s + d.2]);
            }
        }
    }
    out
}

/// Valid stride-1 cross-correlation.
///
/// `inp` is `[ci, pd]`, `w` is `[co, ci, k, k, k]`; output is
/// `[co, pd - k + 1]`.
fn correlate_valid<T: Real>(
    inp: &[T],
    ci: usize,
    pd: Dims,
    w: &[T],
    co: usize,
    k: usize,
    bias: Option<&[T]>,
) -> (Vec<T>, Dims) {
    let od = (pd.0 + 1 - k, pd.1 + 1 - k, pd.2 + 1 - k);
    let plane = pd.1 * pd.2;
    let cvol = volume(pd);
    let k3 = k * k * k;
    let mut out = vec![T::zero(); co * volume(od)];
    for (o, oc) in out.chunks_mut(volume(od)).enumerate() {
        let b = bias.map_or(T::zero(), |b| b[o]);
        for z in 0..od.0 {
            for y in 0..od.1 {
                let acc = &mut oc[(z * od.1 + y) * od.2..(z * od.1 + y + 1) * od.2];
                acc.fill(b);
                for c in 0..ci {
                    let wc = &w[(o * ci + c) * k3..(o * ci + c + 1) * k3];
                    for kz in 0..k {
                        for ky in 0..k {
                            let base = c * cvol + (z + kz) * plane + (y + ky) * pd.2;
                            let row = &inp[base..base + pd.2];
                            let wrow = &wc[(kz * k + ky) * k..(kz * k + ky + 1) * k];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                if wv == T::zero() {
                                    continue;
                                }
                                for (a, &v) in acc.iter_mut().zip(&row[kx..kx + od.2]) {
                                    *a += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, od)
}

/// Gradient of [`correlate_valid`] with respect to its kernel.
fn correlate_kernel_grad<T: Real>(
    inp: &[T],
    ci: usize,
    pd: Dims,
    g: &[T],
    co: usize,
    k: usize,
) -> Vec<T> {
    let od = (pd.0 + 1 - k, pd.1 + 1 - k, pd.2 + 1 - k);
    let plane = pd.1 * pd.2;
    let cvol = volume(pd);
    let k3 = k * k * k;
    let mut gw = vec![T::zero(); co * ci * k3];
    // One lane-wise accumulator row per tap keeps the inner loop vectorizable.
    let mut lanes = vec![T::zero(); k3 * od.2];
    for o in 0..co {
        let go = &g[o * volume(od)..(o + 1) * volume(od)];
        for c in 0..ci {
            lanes.fill(T::zero());
            for z in 0..od.0 {
                for y in 0..od.1 {
                    let grow = &go[(z * od.1 + y) * od.2..(z * od.1 + y + 1) * od.2];
                    for kz in 0..k {
                        for ky in 0..k {
                            let base = c * cvol + (z + kz) * plane + (y + ky) * pd.2;
                            let row = &inp[base..base + pd.2];
                            for kx in 0..k {
                                let tap = (kz * k + ky) * k + kx;
                                let lane = &mut lanes[tap * od.2..(tap + 1) * od.2];
                                for ((l, &a), &b) in lane.iter_mut().zip(grow).zip(&row[kx..kx + od.2]) {
                                    *l += a * b;
                                }
                            }
                        }
                    }
                }
            }
            let acc = &mut gw[(o * ci + c) * k3..(o * ci + c + 1) * k3];
            for (tap, a) in acc.iter_mut().enumerate() {
                *a = lanes[tap * od.2..(tap + 1) * od.2].iter().copied().sum();
            }
        }
    }
    gw
}

/// `[co, ci, k³]` → `[ci, co, k³]` with every kernel reversed.
fn flip_transpose<T: Real>(w: &[T], co: usize, ci: usize, k3: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..co {
        for c in 0..ci {
            let s = &w[(o * ci + c) * k3..(o * ci + c + 1) * k3];
            let t = &mut out[(c * co + o) * k3..(c * co + o + 1) * k3];
            for (i, &v) in s.iter().enumerate() {
                t[k3 - 1 - i] = v;
            }
        }
    }
    out
}

/// Gradient with respect to the input of a stride-1 convolution with zero
/// padding `p`.
fn conv_input_grad<T: Real>(
    g: &[T],
    co: usize,
    od: Dims,
    w: &[T],
    ci: usize,
    k: usize,
    p: usize,
) -> Vec<T> {
    let wt = flip_transpose(w, co, ci, k * k * k);
    let q = k - 1 - p;
    let (gp, gpd) = pad_zero(g, co, od, q, q);
    correlate_valid(&gp, co, gpd, &wt, ci, k, None).0
}

/// 3D convolution (cross-correlation) with zero padding.
///
/// `x: [Ci, D, H, W]`, `w: [Co, Ci, k, k, k]`, optional `b: [Co]`.
pub fn conv3d<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
) -> Var {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    assert_eq!(ws.len(), 5, "conv3d weight must be [Co, Ci, k, k, k]");
    assert_eq!(ws[1], xs[0], "conv3d: weight expects {} input channels, got {}", ws[1], xs[0]);
    assert!(ws[2] == ws[3] && ws[3] == ws[4], "conv3d: cubic kernels only");
    if stride == 1 {
        conv3d_unit_stride(g, x, w, b, pad)
    } else {
        conv3d_strided(g, x, w, b, stride, pad)
    }
}

fn conv3d_unit_stride<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>, p: usize) -> Var {
    let (ci, d) = (g.shape(x)[0], spatial_dims(g.shape(x)));
    let ws = g.shape(w).to_vec();
    let (co, k) = (ws[0], ws[2]);
    assert!(p < k, "conv3d: padding must be smaller than the kernel");
    let (xp, pd) = pad_zero(g.value(x).data(), ci, d, p, p);
    let bias = b.map(|b| g.value(b).data().to_vec());
    let (out, od) = correlate_valid(&xp, ci, pd, g.value(w).data(), co, k, bias.as_deref());
    let value = Tensor::new(&[co, od.0, od.1, od.2], out);
    let mut parents = vec![x, w];
    parents.extend(b);
    g.custom(&parents, value, move |ctx| {
        let gd = ctx.grad.data();
        let gx = ctx.needs[0].then(|| {
            let gx = conv_input_grad(gd, co, od, ctx.inputs[1].data(), ci, k, p);
            Tensor::new(&[ci, d.0, d.1, d.2], gx)
        });
        let gw = ctx.needs[1].then(|| {
            let (xp, _) = pad_zero(ctx.inputs[0].data(), ci, d, p, p);
            Tensor::new(&ws, correlate_kernel_grad(&xp, ci, pd, gd, co, k))
        });
        let mut out = vec![gx, gw];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| channel_sums(gd, co)));
        }
        out
    })
}

fn channel_sums<T: Real>(g: &[T], c: usize) -> Tensor<T> {
    let n = g.len() / c;
    Tensor::new(&[c], g.chunks(n).map(|ch| ch.iter().copied().sum()).collect())
}

fn conv3d_strided<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    s: usize,
    p: usize,
) -> Var {
    let (ci, d) = (g.shape(x)[0], spatial_dims(g.shape(x)));
    let ws = g.shape(w).to_vec();
    let (co, k) = (ws[0], ws[2]);
    let (xp, pd) = pad_zero(g.value(x).data(), ci, d, p, p);
    let od = (
        (pd.0 - k) / s + 1,
        (pd.1 - k) / s + 1,
        (pd.2 - k) / s + 1,
    );
    let k3 = k * k * k;
    // Tap list per output voxel is shared by every channel pair.
    let idx = move |c: usize, z: usize, y: usize, xx: usize, kz: usize, ky: usize, kx: usize| {
        ((c * pd.0 + z * s + kz) * pd.1 + y * s + ky) * pd.2 + xx * s + kx
    };
    let wv = g.value(w).data();
    let bias = b.map(|b| g.value(b).data().to_vec());
    let mut out = vec![T::zero(); co * volume(od)];
    for o in 0..co {
        for z in 0..od.0 {
            for y in 0..od.1 {
                for xx in 0..od.2 {
                    let mut acc = bias.as_ref().map_or(T::zero(), |b| b[o]);
                    for c in 0..ci {
                        let wc = &wv[(o * ci + c) * k3..];
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += wc[(kz * k + ky) * k + kx]
                                        * xp[idx(c, z, y, xx, kz, ky, kx)];
                                }
                            }
                        }
                    }
                    out[((o * od.0 + z) * od.1 + y) * od.2 + xx] = acc;
                }
            }
        }
    }
    let value = Tensor::new(&[co, od.0, od.1, od.2], out);
    let mut parents = vec![x, w];
    parents.extend(b);
    g.custom(&parents, value, move |ctx| {
        let gd = ctx.grad.data();
        let wv = ctx.inputs[1].data();
        let (xp, _) = pad_zero(ctx.inputs[0].data(), ci, d, p, p);
        let mut gxp = vec![T::zero(); xp.len()];
        let mut gw = vec![T::zero(); wv.len()];
        for o in 0..co {
            for z in 0..od.0 {
                for y in 0..od.1 {
                    for xx in 0..od.2 {
                        let gv = gd[((o * od.0 + z) * od.1 + y) * od.2 + xx];
                        for c in 0..ci {
                            let base = (o * ci + c) * k3;
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wi = base + (kz * k + ky) * k + kx;
                                        let xi = idx(c, z, y, xx, kz, ky, kx);
                                        gxp[xi] += gv * wv[wi];
                                        gw[wi] += gv * xp[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let gx = ctx.needs[0]
            .then(|| Tensor::new(&[ci, d.0, d.1, d.2], crop(&gxp, ci, pd, p, d)));
        let mut out = vec![gx, ctx.needs[1].then(|| Tensor::new(&ws, gw))];
        if ctx.inputs.len() == 3 {
            out.push(ctx.needs[2].then(|| channel_sums(gd, co)));
        }
        out
    })
}

/// 3×3×3 max pooling, stride 1, out-of-range taps ignored; spatial size kept.
pub fn max_pool3<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let (c, d) = (g.shape(x)[0], spatial_dims(g.shape(x)));
    let n = volume(d);
    let src = g.value(x).data();
    let mut out = vec![T::zero(); c * n];
    let mut arg = vec![0u32; c * n];
    // Separable passes along x, y, z, carrying the flat source index.
    let mut val = vec![T::zero(); n];
    let mut idx = vec![0u32; n];
    let mut tmp_v = vec![T::zero(); n];
    let mut tmp_i = vec![0u32; n];
    for ch in 0..c {
        let s = &src[ch * n..(ch + 1) * n];
        for (i, (v, id)) in val.iter_mut().zip(idx.iter_mut()).enumerate() {
            *v = s[i];
            *id = i as u32;
        }
        for (stride, len) in [(1usize, d.2), (d.2, d.1), (d.1 * d.2, d.0)] {
            for i in 0..n {
                let pos = (i / stride) % len;
                let mut bv = val[i];
                let mut bi = idx[i];
                if pos > 0 && val[i - stride] > bv {
                    bv = val[i - stride];
                    bi = idx[i - stride];
                }
                if pos + 1 < len && val[i + stride] > bv {
                    bv = val[i + stride];
                    bi = idx[i + stride];
                }
                tmp_v[i] = bv;
                tmp_i[i] = bi;
            }
            std::mem::swap(&mut val, &mut tmp_v);
            std::mem::swap(&mut idx, &mut tmp_i);
        }
        out[ch * n..(ch + 1) * n].copy_from_slice(&val);
        arg[ch * n..(ch + 1) * n].copy_from_slice(&idx);
    }
    let value = Tensor::new(g.shape(x), out);
    g.custom(&[x], value, move |ctx| {
        let mut gx = Tensor::zeros(ctx.inputs[0].shape());
        let gd = gx.data_mut();
        for (j, (&gv, &a)) in ctx.grad.data().iter().zip(&arg).enumerate() {
            let ch = j / n;
            gd[ch * n + a as usize] += gv;
        }
        vec![Some(gx)]
    })
}

/// Linear resampling taps `(i0, i1, w0, w1)` for doubling an axis
/// (half-pixel centres, edge-clamped).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let f = src - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

fn resample_axis<T: Real>(g: &mut Graph<T>, x: Var, axis: usize) -> Var {
    let shape = g.shape(x).to_vec();
    let n = shape[axis];
    let taps: Vec<(usize, usize, T, T)> = upsample_taps(n)
        .into_iter()
        .map(|(a, b, w0, w1)| (a, b, T::lit(w0), T::lit(w1)))
        .collect();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut oshape = shape.clone();
    oshape[axis] = 2 * n;
    let src = g.value(x).data();
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let a = &src[(o * n + i0) * inner..(o * n + i0 + 1) * inner];
            let b = &src[(o * n + i1) * inner..(o * n + i1 + 1) * inner];
            let t = &mut out[(o * 2 * n + j) * inner..(o * 2 * n + j + 1) * inner];
            for ((t, &a), &b) in t.iter_mut().zip(a).zip(b) {
                *t = w0 * a + w1 * b;
            }
        }
    }
    let value = Tensor::new(&oshape, out);
    g.custom(&[x], value, move |ctx| {
        let mut gx = Tensor::zeros(&shape);
        let gd = gx.data_mut();
        let go = ctx.grad.data();
        for o in 0..outer {
            for (j, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                let src = &go[(o * 2 * n + j) * inner..(o * 2 * n + j + 1) * inner];
                for (q, &v) in src.iter().enumerate() {
                    gd[(o * n + i0) * inner + q] += w0 * v;
                    gd[(o * n + i1) * inner + q] += w1 * v;
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Doubles every spatial dimension with trilinear interpolation.
pub fn upsample2x<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let a = resample_axis(g, x, 3);
    let b = resample_axis(g, a, 2);
    resample_axis(g, b, 1)
}

/// Filters every channel with a fixed odd-sized cubic kernel, replicating
/// border voxels; output shape equals input shape. Gradients flow to `x`
/// only.
pub fn filter_replicate<T: Real>(g: &mut Graph<T>, x: Var, kernel: &Tensor<T>) -> Var {
    let (c, d) = (g.shape(x)[0], spatial_dims(g.shape(x)));
    let k = kernel.shape()[0];
    assert!(k % 2 == 1, "filter kernel must have odd size");
    assert_eq!(kernel.shape(), &[k, k, k]);
    let p = k / 2;
    let kdata = kernel.data().to_vec();
    let mut out = Vec::with_capacity(c * volume(d));
    for ch in 0..c {
        let src = &g.value(x).data()[ch * volume(d)..(ch + 1) * volume(d)];
        let (xp, pd) = pad_replicate(src, 1, d, p);
        out.extend(correlate_valid(&xp, 1, pd, &kdata, 1, k, None).0);
    }
    let value = Tensor::new(g.shape(x), out);
    g.custom(&[x], value, move |ctx| {
        let flipped: Vec<T> = kdata.iter().rev().copied().collect();
        let mut gx = Vec::with_capacity(c * volume(d));
        for ch in 0..c {
            let go = &ctx.grad.data()[ch * volume(d)..(ch + 1) * volume(d)];
            let (gp, gpd) = pad_zero(go, 1, d, k - 1, k - 1);
            let (gxp, _) = correlate_valid(&gp, 1, gpd, &flipped, 1, k, None);
            gx.extend(fold_replicate(&gxp, 1, d, p));
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape(), gx))]
    })
}

/// Plain forward evaluation of [`filter_replicate`] without a graph.
pub fn filter_replicate_raw<T: Real>(x: &[T], d: Dims, kernel: &Tensor<T>) -> Vec<T> {
    let k = kernel.shape()[0];
    let (xp, pd) = pad_replicate(x, 1, d, k / 2);
    correlate_valid(&xp, 1, pd, kernel.data(), 1, k, None).0
}

/// Zero-pads `[C, D, H, W]` at the far end of each axis to `target` `(d, h, w)`.
pub fn pad_end<T: Real>(g: &mut Graph<T>, x: Var, target: [usize; 3]) -> Var {
    let shape = g.shape(x).to_vec();
    let (c, d) = (shape[0], spatial_dims(&shape));
    let td = (target[0], target[1], target[2]);
    assert!(td.0 >= d.0 && td.1 >= d.1 && td.2 >= d.2, "pad_end: target smaller than input");
    if td == d {
        return x;
    }
    let mut out = vec![T::zero(); c * volume(td)];
    let src = g.value(x).data();
    for ch in 0..c {
        for z in 0..d.0 {
            for y in 0..d.1 {
                let s = ((ch * d.0 + z) * d.1 + y) * d.2;
                let t = ((ch * td.0 + z) * td.1 + y) * td.2;
                out[t..t + d.2].copy_from_slice(&src[s..s + d.2]);
            }
        }
    }
    let value = Tensor::new(&[c, td.0, td.1, td.2], out);
    g.custom(&[x], value, move |ctx| {
        let mut gx = Vec::with_capacity(c * volume(d));
        let gd = ctx.grad.data();
        for ch in 0..c {
            for z in 0..d.0 {
                for y in 0..d.1 {
                    let t = ((ch * td.0 + z) * td.1 + y) * td.2;
                    gx.extend_from_slice(&gd[t..t + d.2]);
                }
            }
        }
        vec![Some(Tensor::new(ctx.inputs[0].shape(), gx))]
    })
}

/// Leading `(d, h, w)` corner of `[C, D, H, W]`.
pub fn crop_start<T: Real>(g: &mut Graph<T>, x: Var, dims: [usize; 3]) -> Var {
    let shape = g.shape(x).to_vec();
    let (c, d) = (shape[0], spatial_dims(&shape));
    if (dims[0], dims[1], dims[2]) == d {
        return x;
    }
    let mut index = Vec::with_capacity(c * dims.iter().product::<usize>());
    for ch in 0..c {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let s = ((ch * d.0 + z) * d.1 + y) * d.2;
                index.extend(s..s + dims[2]);
            }
        }
    }
    g.gather(x, Rc::new(index), &[c, dims[0], dims[1], dims[2]])
}

/// `[C, D, H, W]` → `[D·H·W, C]`.
pub fn to_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let c = shape[0];
    let n = volume(spatial_dims(&shape));
    let index: Vec<usize> = (0..n).flat_map(|i| (0..c).map(move |ch| ch * n + i)).collect();
    g.gather(x, Rc::new(index), &[n, c])
}

/// `[D·H·W, C]` → `[C, D, H, W]`.
pub fn from_tokens<T: Real>(g: &mut Graph<T>, x: Var, dims: [usize; 3]) -> Var {
    let c = g.shape(x)[1];
    let n = dims.iter().product::<usize>();
    assert_eq!(g.shape(x)[0], n, "from_tokens: token count does not match grid");
    let index: Vec<usize> = (0..c).flat_map(|ch| (0..n).map(move |i| i * c + ch)).collect();
    g.gather(x, Rc::new(index), &[c, dims[0], dims[1], dims[2]])
}

/// Per-channel normalisation over the spatial axes, without affine terms.
pub fn instance_norm<T: Real>(g: &mut Graph<T>, x: Var, eps: f64) -> Var {
    let shape = g.shape(x).to_vec();
    let n = volume(spatial_dims(&shape));
    let flat = g.reshape(x, &[shape[0], n]);
    let ones = g.constant(Tensor::full(&[n], T::one()));
    let zeros = g.constant(Tensor::zeros(&[n]));
    let y = g.layer_norm(flat, ones, zeros, eps);
    g.reshape(y, &shape)
}
