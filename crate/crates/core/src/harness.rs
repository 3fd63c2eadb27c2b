//! Case directories, inference with a trained checkpoint, and suite scoring.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::landmarks::{Landmark, LandmarkSet};
use crate::metrics::{score_case, summarize_suite, CaseScore, SuiteSummary};
use crate::nifti::{load_field, load_volume, save_field, save_volume};
use crate::preprocess::preprocess_pair;
use crate::synth::SyntheticCase;
use crate::train::{forward, prepare_case, PreparedCase};
use crate::volume::{Contrast, MultiContrastStudy, Volume3D};
use crate::warp::{compose_affine, warp, AffineTransform};

pub const PRE: &str = "pre";
pub const POST: &str = "post";
pub const PREPROCESSED_SUFFIX: &str = "_pp";
pub const GT_FIELD: &str = "gt_field.nii.gz";

pub fn volume_path(dir: &Path, tag: &str, c: Contrast, suffix: &str) -> PathBuf {
    dir.join(format!("{tag}_{}{suffix}.nii.gz", c.name()))
}

pub fn landmark_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("{tag}_landmarks.csv"))
}

/// A pre/post pair read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseData {
    pub id: String,
    pub pre: MultiContrastStudy,
    pub post: MultiContrastStudy,
    pub gt_field: Option<DisplacementField>,
    pub preprocessed: bool,
}

impl CaseData {
    /// The case with [`preprocess_pair`] applied, unless it was loaded from
    /// preprocessed files.
    pub fn into_preprocessed(self) -> Result<Self> {
        if self.preprocessed {
            return Ok(self);
        }
        let (pre, post) = preprocess_pair(&self.pre, &self.post)?;
        Ok(Self {
            pre,
            post,
            preprocessed: true,
            ..self
        })
    }
}

fn case_id(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn save_study(study: &MultiContrastStudy, dir: &Path, tag: &str, suffix: &str) -> Result<()> {
    for c in Contrast::ALL {
        save_volume(study.get(c), volume_path(dir, tag, c, suffix))?;
    }
    if let Some(lm) = &study.landmarks {
        lm.save(landmark_path(dir, tag))?;
    }
    Ok(())
}

/// Writes volumes, landmark CSVs and the ground-truth field.
pub fn save_synthetic(case: &SyntheticCase, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_study(&case.pre, dir, PRE, "")?;
    save_study(&case.post, dir, POST, "")?;
    save_field(&case.gt_field, case.grid(), dir.join(GT_FIELD))
}

fn load_study(dir: &Path, tag: &str, suffix: &str) -> Result<MultiContrastStudy> {
    let [t1, t1ce, t2, flair] =
        [Contrast::T1, Contrast::T1ce, Contrast::T2, Contrast::Flair].map(|c| load_volume(volume_path(dir, tag, c, suffix)));
    let lp = landmark_path(dir, tag);
    let landmarks = if lp.exists() { Some(LandmarkSet::load(lp)?) } else { None };
    MultiContrastStudy::new(format!("{}-{tag}", case_id(dir)), t1?, t1ce?, t2?, flair?, landmarks)
}

/// Reads a case directory, using the preprocessed volumes when all of them
/// are present.
pub fn load_case(dir: &Path) -> Result<CaseData> {
    let pp = [PRE, POST]
        .iter()
        .all(|t| Contrast::ALL.iter().all(|&c| volume_path(dir, t, c, PREPROCESSED_SUFFIX).exists()));
    let suffix = if pp { PREPROCESSED_SUFFIX } else { "" };
    let gt = dir.join(GT_FIELD);
    Ok(CaseData {
        id: case_id(dir),
        pre: load_study(dir, PRE, suffix)?,
        post: load_study(dir, POST, suffix)?,
        gt_field: if gt.exists() { Some(load_field(gt)?.0) } else { None },
        preprocessed: pp,
    })
}

/// `dir` itself when it is a case, otherwise its case subdirectories in
/// name order.
pub fn case_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let is_case = |d: &Path| volume_path(d, PRE, Contrast::T1, "").exists() || volume_path(d, PRE, Contrast::T1, PREPROCESSED_SUFFIX).exists();
    if is_case(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && is_case(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Empty("no case directories found"));
    }
    Ok(dirs)
}

/// Output of registering one case.
#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    /// Total field: deformable stage, then the affine stage when present.
    pub field: DisplacementField,
    /// Network output on the affine-resampled moving study.
    pub deformable: DisplacementField,
    pub affine: Option<AffineTransform>,
    /// Moving T1-CE resampled by the total field.
    pub warped: Volume3D,
    /// Landmark score of the total field.
    pub score: Option<CaseScore>,
    /// Score of the deformable stage alone against the moving landmarks
    /// carried into the affine-resampled space.
    pub residual_score: Option<CaseScore>,
}

/// Score JSON written by `register`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegistrationScores {
    pub total: Option<CaseScore>,
    pub residual: Option<CaseScore>,
    pub affine: Option<AffineTransform>,
}

impl Registration {
    pub fn scores(&self) -> RegistrationScores {
        RegistrationScores {
            total: self.score.clone(),
            residual: self.residual_score.clone(),
            affine: self.affine,
        }
    }
}

/// Network displacement for an already prepared pair.
pub fn predict_field(ckpt: &Checkpoint, case: &PreparedCase) -> Result<DisplacementField> {
    let mut g = Graph::<f32>::new();
    let p = ckpt.params.bind(&mut g, false);
    let f = forward(&mut g, &p, &case.moving, &case.fixed, &ckpt.config)?;
    DisplacementField::from_tensor(g.value(f.field))
}

fn landmarks_through(set: &LandmarkSet, a: &AffineTransform, spacing: [f64; 3], origin: [f64; 3]) -> Result<LandmarkSet> {
    LandmarkSet::new(
        set.entries()
            .iter()
            .map(|l| {
                let v = a.apply(std::array::from_fn(|i| (l.pos[i] - origin[i]) / spacing[i]));
                Landmark {
                    id: l.id,
                    pos: std::array::from_fn(|i| origin[i] + spacing[i] * v[i]),
                }
            })
            .collect(),
    )
}

/// Registers a prepared pair. `pre` is the original moving study.
pub fn register_prepared(ckpt: &Checkpoint, pre: &MultiContrastStudy, case: &PreparedCase) -> Result<Registration> {
    let deformable = predict_field(ckpt, case)?;
    let field = match &case.affine {
        Some(a) => compose_affine(&deformable, a)?,
        None => deformable.clone(),
    };
    let warped = warp(pre.get(Contrast::T1ce), &field)?;
    let grid = case.fixed.grid();
    let (score, residual_score) = match (&case.fixed.landmarks, &pre.landmarks) {
        (Some(f), Some(m)) => {
            let total = score_case(f, m, &field, grid)?;
            let residual = match &case.affine {
                Some(a) => {
                    let inv = a.inverse().ok_or_else(|| Error::InvalidConfig("singular affine".into()))?;
                    let carried = landmarks_through(m, &inv, grid.spacing, grid.origin)?;
                    Some(score_case(f, &carried, &deformable, grid)?)
                }
                None => None,
            };
            (Some(total), residual)
        }
        _ => (None, None),
    };
    Ok(Registration {
        field,
        deformable,
        affine: case.affine,
        warped,
        score,
        residual_score,
    })
}

/// Fusion → backbone → warp, with the affine stage first when the
/// checkpoint was trained that way.
pub fn register_case(ckpt: &Checkpoint, pre: &MultiContrastStudy, post: &MultiContrastStudy) -> Result<Registration> {
    let case = prepare_case(pre, post, &ckpt.config)?;
    register_prepared(ckpt, pre, &case)
}

/// Per-case scores plus across-case aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<(String, CaseScore)>,
    pub summary: SuiteSummary,
    /// Mean over all landmarks of all cases.
    pub pooled_mean: f64,
}

pub fn report_from_scores(rows: Vec<(String, CaseScore)>) -> Result<SuiteReport> {
    let scores: Vec<CaseScore> = rows.iter().map(|(_, s)| s.clone()).collect();
    let summary = summarize_suite(&scores)?;
    let all: Vec<f64> = scores.iter().flat_map(|s| s.errors.iter().copied()).collect();
    Ok(SuiteReport {
        rows,
        summary,
        pooled_mean: all.iter().sum::<f64>() / all.len() as f64,
    })
}

/// Registers and scores every case; each needs landmarks on both studies.
pub fn evaluate_suite(ckpt: &Checkpoint, cases: &[CaseData]) -> Result<SuiteReport> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluation cases"));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let r = register_case(ckpt, &c.pre, &c.post)?;
        let s = r
            .score
            .ok_or_else(|| Error::InvalidConfig(format!("case {} has no landmarks", c.id)))?;
        log::info!("{}: median {:.3} mm", c.id, s.median_ae);
        rows.push((c.id.clone(), s));
    }
    report_from_scores(rows)
}

pub const CSV_HEADER: [&str; 5] = [
    "Case",
    "Median Absolute Error (mm)",
    "Mean Absolute Error (mm)",
    "Robustness",
    "Negative Jacobian Fraction",
];

/// One row per case, then a pooled row (median and mean over all landmarks)
/// and a row with the median of per-case medians.
pub fn write_suite_csv(report: &SuiteReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(io)?;
    let mut row = |name: &str, med: f64, mean: f64, rob: f64, neg: f64| {
        w.write_record([name.to_string(), med.to_string(), mean.to_string(), rob.to_string(), neg.to_string()])
            .map_err(io)
    };
    for (id, s) in &report.rows {
        row(id, s.median_ae, s.mean_ae, s.robustness, s.neg_jacobian_fraction)?;
    }
    let s = &report.summary;
    row("pooled", s.pooled_median, report.pooled_mean, s.mean_robustness, s.mean_neg_jacobian_fraction)?;
    row("median of cases", s.median_of_medians, f64::NAN, f64::NAN, f64::NAN)?;
    drop(row);
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Variant;
    use crate::params::Adam;
    use crate::synth::make_synthetic_case;
    use crate::train::{init_params, TrainConfig};

    fn untrained(affine_first: bool) -> Checkpoint {
        let mut cfg = TrainConfig::default();
        cfg.backbone.variant = Variant::ConvFallback;
        cfg.train.affine_first = affine_first;
        Checkpoint {
            params: init_params(&cfg).unwrap(),
            config: cfg,
            adam: Adam::default(),
            step: 0,
        }
    }

    #[test]
    fn untrained_checkpoint_gives_zero_field() {
        let c = make_synthetic_case(11, 32).unwrap();
        let r = register_case(&untrained(false), &c.pre, &c.post).unwrap();
        assert_eq!(r.field, DisplacementField::zeros([32; 3]));
        assert_eq!(&r.warped, c.pre.get(Contrast::T1ce));
        let (f, m) = c.landmarks();
        let before = score_case(f, m, &DisplacementField::zeros([32; 3]), c.grid()).unwrap();
        assert_eq!(r.score.unwrap().errors, before.errors);
        assert!(r.residual_score.is_none());
    }

    #[test]
    fn case_directory_round_trip() {
        let c = make_synthetic_case(12, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let case_dir = dir.path().join("case_a");
        save_synthetic(&c, &case_dir).unwrap();
        assert_eq!(case_dirs(dir.path()).unwrap(), vec![case_dir.clone()]);
        let back = load_case(&case_dir).unwrap();
        assert_eq!(back.id, "case_a");
        assert_eq!(back.pre.t1.data(), c.pre.t1.data());
        assert_eq!(back.post.flair.data(), c.post.flair.data());
        assert_eq!(back.gt_field.as_ref(), Some(&c.gt_field));
        let (lf, lm) = c.landmarks();
        for (a, b) in back.post.landmarks.unwrap().entries().iter().zip(lf.entries()) {
            assert_eq!(a.id, b.id);
            assert!((0..3).all(|i| (a.pos[i] - b.pos[i]).abs() < 1e-9));
        }
        assert_eq!(back.pre.landmarks.unwrap().len(), lm.len());
    }

    #[test]
    fn single_case_suite_equals_case() {
        let c = make_synthetic_case(13, 32).unwrap();
        let ckpt = untrained(false);
        let data = CaseData {
            id: "a".into(),
            pre: c.pre.clone(),
            post: c.post.clone(),
            gt_field: None,
            preprocessed: true,
        };
        let one = evaluate_suite(&ckpt, std::slice::from_ref(&data)).unwrap();
        let s = &one.rows[0].1;
        assert_eq!(one.summary.pooled_median, s.median_ae);
        assert_eq!(one.summary.median_of_medians, s.median_ae);
        assert_eq!(one.summary.mean_robustness, s.robustness);
        assert!((one.pooled_mean - s.mean_ae).abs() < 1e-12);
        let two = evaluate_suite(&ckpt, &[data.clone(), data]).unwrap();
        assert_eq!(two.summary.pooled_median, s.median_ae);
        let mut buf = Vec::new();
        write_suite_csv(&two, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("Case,Median Absolute Error (mm),Mean Absolute Error (mm),Robustness"));
        assert_eq!(text.lines().count(), 5);
    }
}
