//! Displacement backbone: a 3-D shifted-window attention encoder (or a plain
//! convolutional encoder with the same resolution schedule) followed by a
//! convolutional decoder with long skip connections and a zero-initialised
//! three-channel head.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::nn::{conv3d, crop_start, from_tokens, pad_end, to_tokens, upsample2x};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::volume::Volume3D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Swin,
    ConvFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// `(wd, wh, ww)`.
    pub window: [usize; 3],
    pub patch: usize,
    /// One width per skip join plus the final full-resolution conv:
    /// `stages + 1` entries.
    pub decoder: Vec<usize>,
    /// Channels of the full-resolution convolutional skip.
    pub skip_channels: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            depths: vec![2, 2],
            heads: vec![2, 4],
            window: [4, 4, 4],
            patch: 2,
            decoder: vec![32, 16, 16],
            skip_channels: 8,
            mlp_ratio: 4,
            variant: Variant::Swin,
        }
    }
}

const PREFIX: &str = "backbone";
const LEAK: f64 = 0.2;
const LN_EPS: f64 = 1e-5;
const MASK_VALUE: f64 = -100.0;

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let s = self.stages();
        if s == 0 || self.heads.len() != s {
            return bad(format!(
                "depths {:?} and heads {:?} must be nonempty and of equal length",
                self.depths, self.heads
            ));
        }
        if self.depths.contains(&0) || self.heads.contains(&0) {
            return bad("depths and heads must be ≥ 1".into());
        }
        for i in 0..s {
            if self.stage_dim(i) % self.heads[i] != 0 {
                return bad(format!(
                    "stage {i}: width {} not divisible by {} heads",
                    self.stage_dim(i),
                    self.heads[i]
                ));
            }
        }
        if self.patch < 2 || !self.patch.is_power_of_two() {
            return bad(format!("patch size must be a power of two ≥ 2, got {}", self.patch));
        }
        if self.window.contains(&0) || self.embed_dim == 0 || self.skip_channels == 0 || self.mlp_ratio == 0 {
            return bad("window, embed_dim, skip_channels and mlp_ratio must be ≥ 1".into());
        }
        if self.decoder.len() != s + 1 || self.decoder.contains(&0) {
            return bad(format!(
                "decoder needs {} positive widths for {s} stages, got {:?}",
                s + 1,
                self.decoder
            ));
        }
        Ok(())
    }

    /// Per-axis multiple `(d, h, w)` that inputs are padded to.
    pub fn multiple(&self) -> [usize; 3] {
        let f = self.patch << (self.stages() - 1);
        self.window.map(|w| f * w)
    }

    pub fn padded_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let m = self.multiple();
        std::array::from_fn(|a| dims[a].div_ceil(m[a]) * m[a])
    }
}

fn name(parts: &[&str]) -> String {
    let mut s = PREFIX.to_string();
    for p in parts {
        s.push('.');
        s.push_str(p);
    }
    s
}

/// Deterministic parameters for `cfg`; the head starts at zero so the
/// initial prediction is the zero field.
pub fn init_params(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let s = cfg.stages();
    init.conv(&mut store, &name(&["skip0"]), 2, cfg.skip_channels, 3)?;
    init.conv(&mut store, &name(&["patch_embed"]), 2, cfg.embed_dim, cfg.patch)?;
    let table = (2 * cfg.window[0] - 1) * (2 * cfg.window[1] - 1) * (2 * cfg.window[2] - 1);
    if cfg.variant == Variant::Swin {
        init.layer_norm(&mut store, &name(&["patch_norm"]), cfg.embed_dim)?;
    }
    for i in 0..s {
        let c = cfg.stage_dim(i);
        let stage = format!("stage{i}");
        for j in 0..cfg.depths[i] {
            let block = format!("block{j}");
            let n = |leaf: &str| name(&[&stage, &block, leaf]);
            match cfg.variant {
                Variant::Swin => {
                    init.layer_norm(&mut store, &n("norm1"), c)?;
                    init.linear(&mut store, &n("qkv"), c, 3 * c, true)?;
                    store.insert(n("rpb"), init.normal(&[table, cfg.heads[i]], 0.02))?;
                    init.linear(&mut store, &n("proj"), c, c, true)?;
                    init.layer_norm(&mut store, &n("norm2"), c)?;
                    init.linear(&mut store, &n("fc1"), c, cfg.mlp_ratio * c, true)?;
                    init.linear(&mut store, &n("fc2"), cfg.mlp_ratio * c, c, true)?;
                }
                Variant::ConvFallback => init.conv(&mut store, &n("conv"), c, c, 3)?,
            }
        }
        match cfg.variant {
            Variant::Swin => {
                init.layer_norm(&mut store, &name(&[&stage, "out_norm"]), c)?;
                if i + 1 < s {
                    init.layer_norm(&mut store, &name(&[&stage, "merge_norm"]), 8 * c)?;
                    init.linear(&mut store, &name(&[&stage, "merge"]), 8 * c, 2 * c, false)?;
                }
            }
            Variant::ConvFallback => {
                if i + 1 < s {
                    init.conv(&mut store, &name(&[&stage, "down"]), c, 2 * c, 2)?;
                }
            }
        }
    }
    let mut ch = cfg.stage_dim(s - 1);
    for k in 0..s - 1 {
        let skip = cfg.stage_dim(s - 2 - k);
        init.conv(&mut store, &name(&[&format!("dec{k}")]), ch + skip, cfg.decoder[k], 3)?;
        ch = cfg.decoder[k];
    }
    init.conv(&mut store, &name(&[&format!("dec{}", s - 1)]), ch + cfg.skip_channels, cfg.decoder[s - 1], 3)?;
    init.conv(&mut store, &name(&[&format!("dec{s}")]), cfg.decoder[s - 1], cfg.decoder[s], 3)?;
    store.insert(name(&["head.w"]), Tensor::zeros(&[3, cfg.decoder[s], 3, 3, 3]))?;
    store.insert(name(&["head.b"]), Tensor::zeros(&[3]))?;
    Ok(store)
}

fn conv<T: Real>(g: &mut Graph<T>, x: Var, p: &Bound, n: &str, stride: usize, act: bool) -> Result<Var> {
    let w = p.get(&format!("{n}.w"))?;
    let b = p.get(&format!("{n}.b"))?;
    let (xs, ws) = (g.shape(x), g.shape(w));
    if ws.len() != 5 || xs[0] != ws[1] {
        return Err(Error::ShapeMismatch(format!("{n}: input {xs:?} vs weight {ws:?}")));
    }
    let k = ws[2];
    let pad = if stride == 1 { k / 2 } else { 0 };
    let y = conv3d(g, x, w, Some(b), stride, pad);
    Ok(if act { g.leaky_relu(y, T::lit(LEAK)) } else { y })
}

fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, p: &Bound, n: &str) -> Result<Var> {
    let gamma = p.get(&format!("{n}.g"))?;
    let beta = p.get(&format!("{n}.b"))?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS))
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, p: &Bound, n: &str, bias: bool) -> Result<Var> {
    let w = p.get(&format!("{n}.w"))?;
    let b = if bias { Some(p.get(&format!("{n}.b"))?) } else { None };
    Ok(g.linear(x, w, b))
}

/// Gather tables for one `(grid, window, shift)` combination.
struct WindowLayout {
    windows: usize,
    tokens: usize,
    /// Window row `w·T + t` → token index in the unshifted grid.
    partition: Vec<usize>,
    /// Token index → window row.
    inverse: Vec<usize>,
    /// `[windows, T, T]` additive mask, present when shifted.
    mask: Option<Vec<f64>>,
}

fn window_layout(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> WindowLayout {
    let counts: [usize; 3] = std::array::from_fn(|a| grid[a] / window[a]);
    let windows = counts.iter().product::<usize>();
    let tokens = window.iter().product::<usize>();
    let n = grid.iter().product::<usize>();
    let mut partition = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let region = |r: usize, a: usize| -> usize {
        if shift[a] == 0 || r < grid[a] - window[a] {
            0
        } else if r < grid[a] - shift[a] {
            1
        } else {
            2
        }
    };
    for wz in 0..counts[0] {
        for wy in 0..counts[1] {
            for wx in 0..counts[2] {
                for tz in 0..window[0] {
                    for ty in 0..window[1] {
                        for tx in 0..window[2] {
                            // Rolled coordinate, and the source it was rolled from.
                            let r = [wz * window[0] + tz, wy * window[1] + ty, wx * window[2] + tx];
                            let s: [usize; 3] = std::array::from_fn(|a| (r[a] + shift[a]) % grid[a]);
                            partition.push((s[0] * grid[1] + s[1]) * grid[2] + s[2]);
                            labels.push(region(r[0], 0) * 9 + region(r[1], 1) * 3 + region(r[2], 2));
                        }
                    }
                }
            }
        }
    }
    let mut inverse = vec![0; n];
    for (row, &tok) in partition.iter().enumerate() {
        inverse[tok] = row;
    }
    let mask = shift.iter().any(|&s| s > 0).then(|| {
        let mut m = vec![0.0; windows * tokens * tokens];
        for w in 0..windows {
            for i in 0..tokens {
                for j in 0..tokens {
                    if labels[w * tokens + i] != labels[w * tokens + j] {
                        m[(w * tokens + i) * tokens + j] = MASK_VALUE;
                    }
                }
            }
        }
        m
    });
    WindowLayout {
        windows,
        tokens,
        partition,
        inverse,
        mask,
    }
}

/// `[heads, T, T]` lookup into the `[(2wd−1)(2wh−1)(2ww−1), heads]` table.
fn relative_index(window: [usize; 3], heads: usize) -> Vec<usize> {
    let t = window.iter().product::<usize>();
    let coords: Vec<[usize; 3]> = (0..window[0])
        .flat_map(|z| (0..window[1]).flat_map(move |y| (0..window[2]).map(move |x| [z, y, x])))
        .collect();
    let span = window.map(|w| 2 * w - 1);
    let mut out = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for a in &coords {
            for b in &coords {
                let d: [usize; 3] = std::array::from_fn(|k| a[k] + window[k] - 1 - b[k]);
                let rel = (d[0] * span[1] + d[1]) * span[2] + d[2];
                out.push(rel * heads + h);
            }
        }
    }
    out
}

/// Window multi-head self-attention on `[N, C]` tokens. Returns the output
/// tokens and the `[windows·heads, T, T]` attention probabilities.
fn window_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    layout: &WindowLayout,
    window: [usize; 3],
    heads: usize,
    p: &Bound,
    n: &dyn Fn(&str) -> String,
) -> Result<(Var, Var)> {
    let c = g.shape(x)[1];
    let hd = c / heads;
    let (nw, tk) = (layout.windows, layout.tokens);
    let rows = nw * tk;
    let part: Vec<usize> = layout
        .partition
        .iter()
        .flat_map(|&tok| (0..c).map(move |ch| tok * c + ch))
        .collect();
    let xw = g.gather(x, Rc::new(part), &[rows, c]);
    let qkv = linear(g, xw, p, &n("qkv"), true)?;
    let split = |which: usize| -> Vec<usize> {
        let mut idx = Vec::with_capacity(rows * c);
        for w in 0..nw {
            for h in 0..heads {
                for t in 0..tk {
                    let base = (w * tk + t) * 3 * c + which * c + h * hd;
                    idx.extend(base..base + hd);
                }
            }
        }
        idx
    };
    let bh = nw * heads;
    let q = g.gather(qkv, Rc::new(split(0)), &[bh, tk, hd]);
    let k = g.gather(qkv, Rc::new(split(1)), &[bh, tk, hd]);
    let v = g.gather(qkv, Rc::new(split(2)), &[bh, tk, hd]);
    let q = g.scale(q, T::lit(1.0 / (hd as f64).sqrt()));
    let scores = g.bmm_nt(q, k);
    let scores = g.reshape(scores, &[nw, heads, tk, tk]);
    let table = p.get(&n("rpb"))?;
    let bias = g.gather(table, Rc::new(relative_index(window, heads)), &[heads, tk, tk]);
    let mut scores = g.add_broadcast(scores, bias);
    if let Some(mask) = &layout.mask {
        let mut full = Vec::with_capacity(bh * tk * tk);
        for w in 0..nw {
            let m = &mask[w * tk * tk..(w + 1) * tk * tk];
            for _ in 0..heads {
                full.extend(m.iter().map(|&v| T::lit(v)));
            }
        }
        let m = g.constant(Tensor::new(&[nw, heads, tk, tk], full));
        scores = g.add(scores, m);
    }
    let scores = g.reshape(scores, &[bh, tk, tk]);
    let attn = g.softmax_last(scores);
    let o = g.bmm(attn, v);
    let n_tokens = layout.inverse.len();
    let mut merge = Vec::with_capacity(n_tokens * c);
    for &row in &layout.inverse {
        let (w, t) = (row / tk, row % tk);
        for h in 0..heads {
            let base = ((w * heads + h) * tk + t) * hd;
            merge.extend(base..base + hd);
        }
    }
    let o = g.gather(o, Rc::new(merge), &[n_tokens, c]);
    Ok((linear(g, o, p, &n("proj"), true)?, attn))
}

fn swin_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    grid: [usize; 3],
    cfg: &BackboneConfig,
    stage: usize,
    block: usize,
    p: &Bound,
) -> Result<Var> {
    let n = |leaf: &str| name(&[&format!("stage{stage}"), &format!("block{block}"), leaf]);
    let window = cfg.window;
    let shifted = block % 2 == 1 && (0..3).all(|a| grid[a] > window[a]);
    let shift = if shifted { window.map(|w| w / 2) } else { [0; 3] };
    let layout = window_layout(grid, window, shift);
    let h = layer_norm(g, x, p, &n("norm1"))?;
    let (a, _) = window_attention(g, h, &layout, window, cfg.heads[stage], p, &n)?;
    let x = g.add(x, a);
    let h = layer_norm(g, x, p, &n("norm2"))?;
    let h = linear(g, h, p, &n("fc1"), true)?;
    let h = g.gelu(h);
    let h = linear(g, h, p, &n("fc2"), true)?;
    Ok(g.add(x, h))
}

/// `[N, C]` on `grid` → `[N/8, 2C]` on `grid / 2`.
fn patch_merge<T: Real>(g: &mut Graph<T>, x: Var, grid: [usize; 3], p: &Bound, stage: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let half = grid.map(|n| n / 2);
    let mut idx = Vec::with_capacity(half.iter().product::<usize>() * 8 * c);
    for z in 0..half[0] {
        for y in 0..half[1] {
            for xx in 0..half[2] {
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let t = ((2 * z + dz) * grid[1] + 2 * y + dy) * grid[2] + 2 * xx + dx;
                            idx.extend(t * c..(t + 1) * c);
                        }
                    }
                }
            }
        }
    }
    let m = half.iter().product::<usize>();
    let gathered = g.gather(x, Rc::new(idx), &[m, 8 * c]);
    let s = format!("stage{stage}");
    let normed = layer_norm(g, gathered, p, &name(&[&s, "merge_norm"]))?;
    linear(g, normed, p, &name(&[&s, "merge"]), false)
}

/// Encoder features per stage, each `[C_i, grid_i]`.
fn encode<T: Real>(g: &mut Graph<T>, x: Var, padded: [usize; 3], cfg: &BackboneConfig, p: &Bound) -> Result<Vec<Var>> {
    let s = cfg.stages();
    let mut grid = padded.map(|n| n / cfg.patch);
    let mut feats = Vec::with_capacity(s);
    match cfg.variant {
        Variant::Swin => {
            let e = conv(g, x, p, &name(&["patch_embed"]), cfg.patch, false)?;
            let t = to_tokens(g, e);
            let mut t = layer_norm(g, t, p, &name(&["patch_norm"]))?;
            for i in 0..s {
                for j in 0..cfg.depths[i] {
                    t = swin_block(g, t, grid, cfg, i, j, p)?;
                }
                let o = layer_norm(g, t, p, &name(&[&format!("stage{i}"), "out_norm"]))?;
                feats.push(from_tokens(g, o, grid));
                if i + 1 < s {
                    t = patch_merge(g, t, grid, p, i)?;
                    grid = grid.map(|n| n / 2);
                }
            }
        }
        Variant::ConvFallback => {
            let mut e = conv(g, x, p, &name(&["patch_embed"]), cfg.patch, true)?;
            for i in 0..s {
                let stage = format!("stage{i}");
                for j in 0..cfg.depths[i] {
                    e = conv(g, e, p, &name(&[&stage, &format!("block{j}"), "conv"]), 1, true)?;
                }
                feats.push(e);
                if i + 1 < s {
                    e = conv(g, e, p, &name(&[&stage, "down"]), 2, true)?;
                }
            }
        }
    }
    Ok(feats)
}

fn join<T: Real>(g: &mut Graph<T>, up: Var, skip: Var, what: &str) -> Result<Var> {
    if g.shape(up)[1..] != g.shape(skip)[1..] {
        return Err(Error::ShapeMismatch(format!(
            "{what}: upsampled {:?} does not match skip {:?}",
            g.shape(up),
            g.shape(skip)
        )));
    }
    Ok(g.concat(&[up, skip]))
}

/// Predicts the `[3, D, H, W]` displacement (voxel units, x first) from the
/// `[1, D, H, W]` fused moving and fixed images.
pub fn predict_var<T: Real>(g: &mut Graph<T>, moving: Var, fixed: Var, p: &Bound, cfg: &BackboneConfig) -> Result<Var> {
    cfg.validate()?;
    let (ms, fs) = (g.shape(moving).to_vec(), g.shape(fixed).to_vec());
    if ms.len() != 4 || ms[0] != 1 {
        return Err(Error::IncompatibleShape(format!("moving image must be [1, D, H, W], got {ms:?}")));
    }
    if fs.len() != 4 || fs[0] != 1 {
        return Err(Error::IncompatibleShape(format!("fixed image must be [1, D, H, W], got {fs:?}")));
    }
    for (a, axis) in ["D", "H", "W"].iter().enumerate() {
        if ms[a + 1] != fs[a + 1] {
            return Err(Error::IncompatibleShape(format!(
                "dimension {axis}: moving has {}, fixed has {}",
                ms[a + 1],
                fs[a + 1]
            )));
        }
    }
    let dims = [ms[1], ms[2], ms[3]];
    let padded = cfg.padded_dims(dims);
    let x = g.concat(&[moving, fixed]);
    let x = pad_end(g, x, padded);
    let f0 = conv(g, x, p, &name(&["skip0"]), 1, true)?;
    let feats = encode(g, x, padded, cfg, p)?;
    let s = cfg.stages();
    let mut h = feats[s - 1];
    for k in 0..s - 1 {
        let up = upsample2x(g, h);
        let cat = join(g, up, feats[s - 2 - k], &format!("decoder join {k}"))?;
        h = conv(g, cat, p, &name(&[&format!("dec{k}")]), 1, true)?;
    }
    for _ in 0..cfg.patch.trailing_zeros() {
        h = upsample2x(g, h);
    }
    let cat = join(g, h, f0, "full-resolution join")?;
    h = conv(g, cat, p, &name(&[&format!("dec{}", s - 1)]), 1, true)?;
    h = conv(g, h, p, &name(&[&format!("dec{s}")]), 1, true)?;
    let u = conv(g, h, p, &name(&["head"]), 1, false)?;
    Ok(crop_start(g, u, dims))
}

pub fn predict_displacement(
    moving: &Volume3D,
    fixed: &Volume3D,
    params: &ParamStore,
    cfg: &BackboneConfig,
) -> Result<DisplacementField> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, false);
    let m = g.constant(moving.to_tensor());
    let f = g.constant(fixed.to_tensor());
    let u = predict_var(&mut g, m, f, &p, cfg)?;
    DisplacementField::from_tensor(g.value(u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients_sampled;
    use crate::volume::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, dims: [usize; 3]) -> Volume3D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume3D::from_fn(Grid::isotropic(dims), |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig {
            heads: vec![2],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig {
            decoder: vec![16, 16],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(BackboneConfig::default().multiple(), [16, 16, 16]);
        assert_eq!(BackboneConfig::default().padded_dims([48, 20, 33]), [48, 32, 48]);
    }

    #[test]
    fn init_is_deterministic_with_zero_head() {
        for variant in [Variant::Swin, Variant::ConvFallback] {
            let cfg = BackboneConfig {
                variant,
                ..Default::default()
            };
            let a = init_params(&cfg, 3).unwrap();
            assert_eq!(a, init_params(&cfg, 3).unwrap());
            assert_ne!(a, init_params(&cfg, 4).unwrap());
            assert!(a.all_finite());
            assert!(a.get("backbone.head.w").unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_head_predicts_zero_field_at_full_resolution() {
        for variant in [Variant::Swin, Variant::ConvFallback] {
            let cfg = BackboneConfig {
                variant,
                ..Default::default()
            };
            let p = init_params(&cfg, 1).unwrap();
            let (m, f) = (random_volume(1, [20, 17, 24]), random_volume(2, [20, 17, 24]));
            let u = predict_displacement(&m, &f, &p, &cfg).unwrap();
            assert_eq!(u.dims(), [20, 17, 24]);
            assert!(u.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mismatched_inputs_name_the_dimension() {
        let cfg = BackboneConfig::default();
        let p = init_params(&cfg, 1).unwrap();
        let err = predict_displacement(&random_volume(1, [8, 8, 8]), &random_volume(2, [8, 9, 8]), &p, &cfg).unwrap_err();
        assert!(err.to_string().contains("dimension H"), "{err}");
    }

    #[test]
    fn window_partition_is_a_permutation_and_masks_cross_regions() {
        let l = window_layout([8, 8, 8], [4, 4, 4], [2, 2, 2]);
        let mut seen = l.partition.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..512).collect::<Vec<_>>());
        assert_eq!(l.windows, 8);
        let mask = l.mask.unwrap();
        // The first window holds only unshifted-region tokens.
        assert!(mask[..64 * 64].iter().all(|&v| v == 0.0));
        // The last window mixes all eight regions.
        let last = &mask[7 * 64 * 64..];
        assert_eq!(last.iter().filter(|&&v| v == 0.0).count(), 8 * 8 * 8);
        assert!(window_layout([8, 8, 8], [4, 4, 4], [0; 3]).mask.is_none());
    }

    #[test]
    fn relative_index_is_symmetric_about_the_centre() {
        let idx = relative_index([2, 2, 2], 1);
        // Offset zero sits at the table centre for every diagonal entry.
        for t in 0..8 {
            assert_eq!(idx[t * 8 + t], 13);
        }
        assert_eq!(idx[7], 0);
        assert_eq!(idx[7 * 8], 26);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = BackboneConfig::default();
        let store = init_params(&cfg, 9).unwrap();
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.constant(Tensor::new(&[512, 16], (0..512 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect()));
        for shift in [[0; 3], [2; 3]] {
            let layout = window_layout([8, 8, 8], cfg.window, shift);
            let n = |leaf: &str| name(&["stage0", "block1", leaf]);
            let (_, attn) = window_attention(&mut g, x, &layout, cfg.window, 2, &p, &n).unwrap();
            for row in g.value(attn).data().chunks(64) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "{s}");
            }
        }
    }

    fn perturbed(cfg: &BackboneConfig, seed: u64) -> ParamStore {
        let mut store = init_params(cfg, seed).unwrap();
        let mut init = Init::new(seed + 100);
        let hw = store.get_mut("backbone.head.w").unwrap();
        *hw = init.uniform(hw.shape(), 16 * 27);
        store
    }

    fn grad_report(cfg: &BackboneConfig, dims: [usize; 3], per_input: usize) -> crate::gradcheck::GradReport {
        let store = perturbed(cfg, 2);
        let names: Vec<String> = store.names().map(String::from).collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().cast()).collect();
        let m = random_volume(5, dims).to_tensor::<f64>();
        let f = random_volume(6, dims).to_tensor::<f64>();
        check_gradients_sampled(&inputs, 1e-6, per_input, 11, |g, v| {
            let p = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
            let (mv, fv) = (g.constant(m.clone()), g.constant(f.clone()));
            let u = predict_var(g, mv, fv, &p, cfg).unwrap();
            g.mean(u)
        })
    }

    #[test]
    fn conv_fallback_gradients() {
        let cfg = BackboneConfig {
            variant: Variant::ConvFallback,
            ..Default::default()
        };
        let r = grad_report(&cfg, [6, 6, 6], 2);
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn swin_gradients() {
        let cfg = BackboneConfig::default();
        let r = grad_report(&cfg, [6, 6, 6], 1);
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
