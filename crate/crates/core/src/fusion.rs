//! Contrast fusion: one Inception block per contrast, a merging Inception
//! block over their concatenation, and a 1×1×1 projection to one channel.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{conv3d, instance_norm, max_pool3};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Real;
use crate::volume::{Contrast, MultiContrastStudy, Volume3D};

/// Branch widths of an Inception block with dimension reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionConfig {
    pub b1x1: usize,
    pub b3x3_reduce: usize,
    pub b3x3: usize,
    pub b5x5_reduce: usize,
    pub b5x5: usize,
    pub pool_proj: usize,
}

impl InceptionConfig {
    pub const fn new(b1x1: usize, b3x3_reduce: usize, b3x3: usize, b5x5_reduce: usize, b5x5: usize, pool_proj: usize) -> Self {
        Self {
            b1x1,
            b3x3_reduce,
            b3x3,
            b5x5_reduce,
            b5x5,
            pool_proj,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.b1x1 + self.b3x3 + self.b5x5 + self.pool_proj
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.b1x1, self.b3x3_reduce, self.b3x3, self.b5x5_reduce, self.b5x5, self.pool_proj];
        if all.contains(&0) {
            return Err(Error::InvalidConfig(format!("inception widths must be ≥ 1: {self:?}")));
        }
        Ok(())
    }

    /// Weights plus biases for `cin` input channels.
    pub fn param_count(&self, cin: usize) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k * k + co;
        conv(cin, self.b1x1, 1)
            + conv(cin, self.b3x3_reduce, 1)
            + conv(self.b3x3_reduce, self.b3x3, 3)
            + conv(cin, self.b5x5_reduce, 1)
            + conv(self.b5x5_reduce, self.b5x5, 5)
            + conv(cin, self.pool_proj, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Per-contrast block.
    pub block: InceptionConfig,
    /// Block over the concatenated per-contrast outputs.
    pub merge: InceptionConfig,
    /// Instance normalisation after every convolution.
    pub instance_norm: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            block: InceptionConfig::new(2, 2, 4, 1, 1, 1),
            merge: InceptionConfig::new(4, 4, 8, 2, 2, 2),
            instance_norm: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        self.merge.validate()
    }

    pub fn param_count(&self) -> usize {
        let merge_in = Contrast::ALL.len() * self.block.out_channels();
        Contrast::ALL.len() * self.block.param_count(1)
            + self.merge.param_count(merge_in)
            + self.merge.out_channels()
            + 1
    }
}

/// Parameter prefix of the moving-study pipeline.
pub const MOVING: &str = "fusion.moving";
/// Parameter prefix of the fixed-study pipeline.
pub const FIXED: &str = "fusion.fixed";

pub fn init_inception(init: &mut Init, store: &mut ParamStore, prefix: &str, cin: usize, c: &InceptionConfig) -> Result<()> {
    c.validate()?;
    init.conv(store, &format!("{prefix}.b1"), cin, c.b1x1, 1)?;
    init.conv(store, &format!("{prefix}.b3_reduce"), cin, c.b3x3_reduce, 1)?;
    init.conv(store, &format!("{prefix}.b3"), c.b3x3_reduce, c.b3x3, 3)?;
    init.conv(store, &format!("{prefix}.b5_reduce"), cin, c.b5x5_reduce, 1)?;
    init.conv(store, &format!("{prefix}.b5"), c.b5x5_reduce, c.b5x5, 5)?;
    init.conv(store, &format!("{prefix}.pool_proj"), cin, c.pool_proj, 1)
}

/// Adds one fusion pipeline under `prefix` (e.g. [`MOVING`]).
pub fn init_fusion(init: &mut Init, store: &mut ParamStore, prefix: &str, cfg: &FusionConfig) -> Result<()> {
    cfg.validate()?;
    for c in Contrast::ALL {
        init_inception(init, store, &format!("{prefix}.{}", c.name()), 1, &cfg.block)?;
    }
    let merge_in = Contrast::ALL.len() * cfg.block.out_channels();
    init_inception(init, store, &format!("{prefix}.merge"), merge_in, &cfg.merge)?;
    init.conv(store, &format!("{prefix}.proj"), cfg.merge.out_channels(), 1, 1)
}

fn check_conv<T: Real>(g: &Graph<T>, x: Var, w: Var, name: &str) -> Result<()> {
    let (xs, ws) = (g.shape(x), g.shape(w));
    if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] {
        return Err(Error::ShapeMismatch(format!(
            "{name}: input {xs:?} does not fit weight {ws:?}"
        )));
    }
    Ok(())
}

fn conv_act<T: Real>(g: &mut Graph<T>, x: Var, p: &Bound, name: &str, norm: bool, act: bool) -> Result<Var> {
    let (w, b) = (p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?);
    check_conv(g, x, w, name)?;
    let k = g.shape(w)[2];
    let mut y = conv3d(g, x, w, Some(b), 1, k / 2);
    if norm {
        y = instance_norm(g, y, 1e-5);
    }
    if act {
        y = g.relu(y);
    }
    Ok(y)
}

/// `[C, D, H, W]` → `[out_channels, D, H, W]`.
pub fn inception_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &Bound,
    prefix: &str,
    norm: bool,
) -> Result<Var> {
    let b1 = conv_act(g, x, p, &format!("{prefix}.b1"), norm, true)?;
    let r3 = conv_act(g, x, p, &format!("{prefix}.b3_reduce"), norm, true)?;
    let b3 = conv_act(g, r3, p, &format!("{prefix}.b3"), norm, true)?;
    let r5 = conv_act(g, x, p, &format!("{prefix}.b5_reduce"), norm, true)?;
    let b5 = conv_act(g, r5, p, &format!("{prefix}.b5"), norm, true)?;
    let pooled = max_pool3(g, x);
    let bp = conv_act(g, pooled, p, &format!("{prefix}.pool_proj"), norm, true)?;
    Ok(g.concat(&[b1, b3, b5, bp]))
}

/// Fuses four `[1, D, H, W]` contrasts, given in [`Contrast::ALL`] order,
/// into one `[1, D, H, W]` image.
pub fn fuse_var<T: Real>(
    g: &mut Graph<T>,
    contrasts: [Var; 4],
    p: &Bound,
    prefix: &str,
    cfg: &FusionConfig,
) -> Result<Var> {
    let s0 = g.shape(contrasts[0]).to_vec();
    for (c, &v) in Contrast::ALL.iter().zip(&contrasts) {
        if g.shape(v) != s0.as_slice() || s0.len() != 4 || s0[0] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "contrast {} has shape {:?}, expected {s0:?} with one channel",
                c.name(),
                g.shape(v)
            )));
        }
    }
    let mut feats = Vec::with_capacity(4);
    for (c, &v) in Contrast::ALL.iter().zip(&contrasts) {
        feats.push(inception_block(g, v, p, &format!("{prefix}.{}", c.name()), cfg.instance_norm)?);
    }
    let cat = g.concat(&feats);
    let merged = inception_block(g, cat, p, &format!("{prefix}.merge"), cfg.instance_norm)?;
    conv_act(g, merged, p, &format!("{prefix}.proj"), false, false)
}

/// Study contrasts as graph constants, in [`Contrast::ALL`] order.
pub fn study_inputs<T: Real>(g: &mut Graph<T>, study: &MultiContrastStudy) -> [Var; 4] {
    Contrast::ALL.map(|c| g.constant(study.get(c).to_tensor()))
}

/// Evaluates one pipeline on a study.
pub fn fuse_contrasts(
    study: &MultiContrastStudy,
    params: &ParamStore,
    prefix: &str,
    cfg: &FusionConfig,
) -> Result<Volume3D> {
    study.validate()?;
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g, false);
    let inputs = study_inputs(&mut g, study);
    let out = fuse_var(&mut g, inputs, &p, prefix, cfg)?;
    Volume3D::from_tensor(*study.grid(), g.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_selected;
    use crate::tensor::Tensor;
    use crate::volume::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_study(seed: u64, n: usize) -> MultiContrastStudy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::isotropic([n, n, n]);
        let mut v = || Volume3D::from_fn(g, |_, _, _| rng.gen_range(-1.0..2.0));
        MultiContrastStudy::new("s", v(), v(), v(), v(), None).unwrap()
    }

    #[test]
    fn block_shapes_and_zero_weights() {
        let c = InceptionConfig::new(4, 4, 8, 2, 4, 4);
        assert_eq!(c.out_channels(), 20);
        let mut store = ParamStore::new();
        init_inception(&mut Init::new(0), &mut store, "blk", 3, &c).unwrap();
        assert_eq!(store.numel(), c.param_count(3));
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[3, 16, 16, 16], 0.5));
        let y = inception_block(&mut g, x, &p, "blk", false).unwrap();
        assert_eq!(g.shape(y), &[20, 16, 16, 16]);

        let mut zero = store.clone();
        let names: Vec<String> = zero.names().map(String::from).collect();
        for n in names {
            let t = zero.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut g = Graph::<f32>::new();
        let p = zero.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[3, 6, 6, 6], 0.5));
        let y = inception_block(&mut g, x, &p, "blk", false).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pipelines_are_disjoint_and_counted() {
        let cfg = FusionConfig::default();
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        init_fusion(&mut init, &mut store, MOVING, &cfg).unwrap();
        init_fusion(&mut init, &mut store, FIXED, &cfg).unwrap();
        assert_eq!(store.numel_under(MOVING), cfg.param_count());
        assert_eq!(store.numel_under(FIXED), cfg.param_count());
        assert!(store.names().all(|n| n.starts_with(MOVING) ^ n.starts_with(FIXED)));
    }

    #[test]
    fn fused_shape_and_contrast_sensitivity() {
        let cfg = FusionConfig::default();
        let mut store = ParamStore::new();
        init_fusion(&mut Init::new(2), &mut store, MOVING, &cfg).unwrap();
        let study = random_study(3, 12);
        let a = fuse_contrasts(&study, &store, MOVING, &cfg).unwrap();
        assert_eq!(a.dims(), [12, 12, 12]);
        assert!(a.data().iter().all(|v| v.is_finite()));
        let mut swapped = study.clone();
        std::mem::swap(&mut swapped.t1, &mut swapped.t2);
        let b = fuse_contrasts(&swapped, &store, MOVING, &cfg).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn instance_norm_flag_changes_output() {
        let mut cfg = FusionConfig::default();
        let mut store = ParamStore::new();
        init_fusion(&mut Init::new(2), &mut store, MOVING, &cfg).unwrap();
        let study = random_study(4, 8);
        let a = fuse_contrasts(&study, &store, MOVING, &cfg).unwrap();
        cfg.instance_norm = true;
        let b = fuse_contrasts(&study, &store, MOVING, &cfg).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn projection_gradient() {
        let cfg = FusionConfig::default();
        let mut store = ParamStore::new();
        init_fusion(&mut Init::new(5), &mut store, MOVING, &cfg).unwrap();
        let study = random_study(6, 6);
        let names: Vec<String> = store.names().map(String::from).collect();
        let inputs: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().cast()).collect();
        let selection: Vec<Vec<usize>> = names
            .iter()
            .zip(&inputs)
            .map(|(n, t)| if n.contains(".proj.") { (0..t.len()).collect() } else { vec![] })
            .collect();
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let p = Bound::from_pairs(names.iter().cloned().zip(v.iter().copied()));
            let x = study_inputs(g, &study);
            let y = fuse_var(g, x, &p, MOVING, &cfg).unwrap();
            g.sum(y)
        };
        let report = check_selected(&inputs, 1e-5, &selection, &build);
        assert_eq!(report.checked, cfg.merge.out_channels() + 1);
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
