//! Run configuration, the learning-rate schedule, model assembly and the
//! training loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::affine::{affine_register_with, AffineConfig};
use crate::autograd::{Graph, Var};
use crate::backbone::{self, predict_var, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{fuse_var, init_fusion, study_inputs, FusionConfig, FIXED, MOVING};
use crate::losses::{diffusion_var, edge_loss_var, mse_var, total_loss_var, LossReport, LossVars, LossWeights};
use crate::params::{Adam, AdamConfig, Bound, Init, ParamStore};
use crate::tensor::Real;
use crate::volume::{Contrast, MultiContrastStudy};
use crate::warp::{affine_to_field, warp, warp_var, AffineTransform};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrDecay {
    Constant,
    /// `lr0 · (1 − step / total)^power`.
    Poly { power: f64 },
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay::Poly { power: 0.9 }
    }
}

/// Which images the similarity terms compare.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossInput {
    /// The fused single-channel images.
    #[default]
    Fused,
    /// Every raw contrast warped by the same field; terms are averaged.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr_initial: f64,
    pub lr_decay: LrDecay,
    pub seed: u64,
    pub affine_first: bool,
    pub loss_input: LossInput,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 1,
            steps_per_epoch: 300,
            lr_initial: 1e-4,
            lr_decay: LrDecay::default(),
            seed: 0,
            affine_first: false,
            loss_input: LossInput::Fused,
        }
    }
}

/// Everything needed to reproduce a run. Each field is one TOML section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSettings,
    pub loss: LossWeights,
    pub fusion: FusionConfig,
    pub backbone: BackboneConfig,
    pub affine: AffineConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(t.lr_initial > 0.0 && t.lr_initial.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr_initial = {}", t.lr_initial)));
        }
        if let LrDecay::Poly { power } = t.lr_decay {
            if !(power >= 0.0 && power.is_finite()) {
                return Err(Error::InvalidConfig(format!("poly decay power = {power}")));
            }
        }
        self.loss.validate()?;
        self.fusion.validate()?;
        self.backbone.validate()
    }

    pub fn total_steps(&self) -> usize {
        self.train.epochs * self.train.steps_per_epoch
    }

    /// Rate used at 0-based `step`. Non-increasing, and 0 from `total` on.
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps();
        let lr0 = self.train.lr_initial;
        match self.train.lr_decay {
            LrDecay::Constant => lr0,
            LrDecay::Poly { power } => {
                if step == 0 {
                    lr0
                } else if step >= total {
                    0.0
                } else {
                    lr0 * (1.0 - step as f64 / total as f64).powf(power)
                }
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Freshly initialised fusion (both pipelines) and backbone parameters.
pub fn init_params(cfg: &TrainConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(cfg.train.seed);
    init_fusion(&mut init, &mut store, MOVING, &cfg.fusion)?;
    init_fusion(&mut init, &mut store, FIXED, &cfg.fusion)?;
    store.extend(backbone::init_params(&cfg.backbone, cfg.train.seed.wrapping_add(1))?)?;
    Ok(store)
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub fused_moving: Var,
    pub fused_fixed: Var,
    pub field: Var,
}

/// Fusion of both studies followed by the backbone.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    moving: &MultiContrastStudy,
    fixed: &MultiContrastStudy,
    cfg: &TrainConfig,
) -> Result<Forward> {
    if !moving.grid().same_shape(fixed.grid()) {
        return Err(Error::ShapeMismatch(format!(
            "moving {:?} vs fixed {:?}",
            moving.grid().dims,
            fixed.grid().dims
        )));
    }
    let mi = study_inputs(g, moving);
    let fi = study_inputs(g, fixed);
    let fused_moving = fuse_var(g, mi, p, MOVING, &cfg.fusion)?;
    let fused_fixed = fuse_var(g, fi, p, FIXED, &cfg.fusion)?;
    let field = predict_var(g, fused_moving, fused_fixed, p, &cfg.backbone)?;
    Ok(Forward {
        fused_moving,
        fused_fixed,
        field,
    })
}

/// Loss terms of one forward pass.
pub fn loss_vars<T: Real>(
    g: &mut Graph<T>,
    f: &Forward,
    moving: &MultiContrastStudy,
    fixed: &MultiContrastStudy,
    cfg: &TrainConfig,
) -> Result<LossVars> {
    match cfg.train.loss_input {
        LossInput::Fused => {
            let warped = warp_var(g, f.fused_moving, f.field)?;
            total_loss_var(g, warped, f.fused_fixed, f.field, &cfg.loss)
        }
        LossInput::Raw => {
            let mi = study_inputs(g, moving);
            let fi = study_inputs(g, fixed);
            let k = T::lit(1.0 / Contrast::ALL.len() as f64);
            let mut mse = None;
            let mut edge = None;
            for (m, fx) in mi.into_iter().zip(fi) {
                let w = warp_var(g, m, f.field)?;
                let a = mse_var(g, w, fx)?;
                let b = edge_loss_var(g, w, fx)?;
                mse = Some(mse.map_or(a, |s| g.add(s, a)));
                edge = Some(edge.map_or(b, |s| g.add(s, b)));
            }
            let mse = g.scale(mse.expect("four contrasts"), k);
            let edge = g.scale(edge.expect("four contrasts"), k);
            let diff = diffusion_var(g, f.field)?;
            let w = &cfg.loss;
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
    }
}

/// A training pair as the network sees it. With affine pre-registration the
/// moving study is already resampled by `affine`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCase {
    pub moving: MultiContrastStudy,
    pub fixed: MultiContrastStudy,
    pub affine: Option<AffineTransform>,
}

/// Resamples every contrast of `study` through `a`.
pub fn warp_study(study: &MultiContrastStudy, a: &AffineTransform) -> Result<MultiContrastStudy> {
    let field = affine_to_field(a, study.grid().dims);
    study.try_map(|_, v| warp(v, &field))
}

/// Runs the affine stage when `affine_first` is set.
pub fn prepare_case(pre: &MultiContrastStudy, post: &MultiContrastStudy, cfg: &TrainConfig) -> Result<PreparedCase> {
    if !cfg.train.affine_first {
        return Ok(PreparedCase {
            moving: pre.clone(),
            fixed: post.clone(),
            affine: None,
        });
    }
    let c = Contrast::parse(&cfg.affine.contrast)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown contrast {}", cfg.affine.contrast)))?;
    let result = affine_register_with(pre.get(c), post.get(c), &cfg.affine)?;
    if let Some(w) = &result.warning {
        log::warn!("{}: {w}", pre.study_id);
    }
    Ok(PreparedCase {
        moving: warp_study(pre, &result.transform)?,
        fixed: post.clone(),
        affine: Some(result.transform),
    })
}

/// One line of `train.log.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Trains from freshly initialised parameters.
pub fn train(config: &TrainConfig, cases: &[PreparedCase], log: Option<&mut dyn Write>) -> Result<(Checkpoint, Vec<StepLog>)> {
    config.validate()?;
    let ckpt = Checkpoint {
        config: config.clone(),
        params: init_params(config)?,
        adam: Adam::new(AdamConfig::default()),
        step: 0,
    };
    resume(ckpt, cases, usize::MAX, log)
}

/// Continues `ckpt` for up to `extra` steps, stopping at the configured total.
/// Step `s` uses case `s mod cases.len()`.
pub fn resume(
    mut ckpt: Checkpoint,
    cases: &[PreparedCase],
    extra: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, Vec<StepLog>)> {
    if cases.is_empty() {
        return Err(Error::Empty("training cases"));
    }
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    let start = ckpt.step as usize;
    let end = cfg.total_steps().min(start.saturating_add(extra));
    let mut logs = Vec::with_capacity(end.saturating_sub(start));
    let mut last = LossReport::default();
    for step in start..end {
        let case = &cases[step % cases.len()];
        let mut g = Graph::<f32>::new();
        let p = ckpt.params.bind(&mut g, true);
        let f = forward(&mut g, &p, &case.moving, &case.fixed, &cfg)?;
        let vars = loss_vars(&mut g, &f, &case.moving, &case.fixed, &cfg)?;
        let report = vars.report(&g);
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                report: format!("{last:?}"),
            });
        }
        let grads = g.backward(vars.total);
        let lr = cfg.lr(step);
        ckpt.adam.update(&mut ckpt.params, &p, &grads, lr);
        ckpt.step += 1;
        if !ckpt.params.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                report: format!("parameters became non-finite after {report:?}"),
            });
        }
        let entry = StepLog { step, lr, report };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut **w, &entry)?;
            w.write_all(b"\n")?;
        }
        log::debug!("step {step} lr {lr:.3e} total {:.6}", report.l_total);
        logs.push(entry);
        last = report;
    }
    Ok((ckpt, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Variant;
    use crate::synth::make_synthetic_case;

    pub(crate) fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.backbone.variant = Variant::ConvFallback;
        cfg.train.steps_per_epoch = 3;
        cfg.train.lr_initial = 1e-3;
        cfg
    }

    #[test]
    fn schedule_starts_at_lr0_and_decays() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr(0), 1e-4);
        let lrs: Vec<f64> = (0..=300).map(|s| cfg.lr(s)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(lrs[300], 0.0);
        let mut c = cfg.clone();
        c.train.lr_decay = LrDecay::Constant;
        assert_eq!(c.lr(299), 1e-4);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut cfg = TrainConfig::default();
        cfg.train.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.train.lr_initial = 0.0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::from_toml("[train]\nepoch = 3\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = tiny();
        cfg.train.affine_first = true;
        cfg.loss.w_edge = 0.5;
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        let partial = TrainConfig::from_toml("[train]\nlr_initial = 0.001\n[loss]\nw_edge = 0.0\n").unwrap();
        assert_eq!(partial.train.lr_initial, 1e-3);
        assert_eq!(partial.loss.w_mse, 1.0);
        assert_eq!(partial.backbone, BackboneConfig::default());
    }

    #[test]
    fn zero_steps_keeps_initial_params() {
        let mut cfg = tiny();
        cfg.train.steps_per_epoch = 0;
        let c = make_synthetic_case(1, 32).unwrap();
        let case = prepare_case(&c.pre, &c.post, &cfg).unwrap();
        let (ckpt, logs) = train(&cfg, &[case], None).unwrap();
        assert!(logs.is_empty());
        assert_eq!(ckpt.params, init_params(&cfg).unwrap());
    }

    #[test]
    fn short_run_is_deterministic_and_finite() {
        let cfg = tiny();
        let c = make_synthetic_case(2, 32).unwrap();
        let case = prepare_case(&c.pre, &c.post, &cfg).unwrap();
        let mut buf = Vec::new();
        let (a, la) = train(&cfg, std::slice::from_ref(&case), Some(&mut buf)).unwrap();
        let (b, lb) = train(&cfg, std::slice::from_ref(&case), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 3);
        assert!(la.iter().all(|l| l.report.is_finite()));
        let text = String::from_utf8(buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["step", "l_mse", "l_diff", "l_edge", "l_total"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn resume_in_pieces_matches_one_run() {
        let cfg = tiny();
        let c = make_synthetic_case(4, 32).unwrap();
        let case = prepare_case(&c.pre, &c.post, &cfg).unwrap();
        let cases = std::slice::from_ref(&case);
        let (full, _) = train(&cfg, cases, None).unwrap();
        let mut start = full.clone();
        start.params = init_params(&cfg).unwrap();
        start.adam = Adam::new(AdamConfig::default());
        start.step = 0;
        let (half, _) = resume(start, cases, 2, None).unwrap();
        assert_eq!(half.step, 2);
        let (same, none) = resume(half.clone(), cases, 0, None).unwrap();
        assert!(none.is_empty());
        assert_eq!(same, half);
        let (rest, _) = resume(half, cases, 10, None).unwrap();
        assert_eq!(rest, full);
    }
}
