//! Landmark errors, median/mean absolute error, robustness and Jacobian
//! determinant analysis.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::landmarks::LandmarkSet;
use crate::volume::{Grid, Volume3D};
use crate::warp::transform_points;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub errors: Vec<f64>,
    pub median_ae: f64,
    pub mean_ae: f64,
    pub robustness: f64,
    pub neg_jacobian_fraction: f64,
}

/// Median and mean of the errors after registration, and the fraction of
/// landmarks whose error strictly decreased.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median_ae: f64,
    pub mean_ae: f64,
    pub robustness: f64,
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of no values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Euclidean distance in mm between each fixed landmark mapped through
/// `field` and the moving landmark with the same id, in fixed-set order.
pub fn landmark_errors(
    fixed: &LandmarkSet,
    moving: &LandmarkSet,
    field: &DisplacementField,
    spacing: [f64; 3],
    origin: [f64; 3],
) -> Result<Vec<f64>> {
    let fi: BTreeSet<i64> = fixed.ids().into_iter().collect();
    let mi: BTreeSet<i64> = moving.ids().into_iter().collect();
    if fi != mi {
        return Err(Error::LandmarkMismatch {
            missing_in_moving: fi.difference(&mi).copied().collect(),
            missing_in_fixed: mi.difference(&fi).copied().collect(),
        });
    }
    let mapped = transform_points(fixed, field, spacing, origin)?;
    Ok(mapped
        .points
        .entries()
        .iter()
        .map(|p| {
            let q = moving.get(p.id).expect("id sets are equal");
            (0..3).map(|i| (p.pos[i] - q.pos[i]).powi(2)).sum::<f64>().sqrt()
        })
        .collect())
}

pub fn summarize(before: &[f64], after: &[f64]) -> Result<Summary> {
    if after.is_empty() {
        return Err(Error::Empty("landmark error list"));
    }
    if before.len() != after.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} errors before, {} after",
            before.len(),
            after.len()
        )));
    }
    let improved = before.iter().zip(after).filter(|(b, a)| a < b).count();
    Ok(Summary {
        median_ae: median(after)?,
        mean_ae: after.iter().sum::<f64>() / after.len() as f64,
        robustness: improved as f64 / after.len() as f64,
    })
}

/// `det(I + ∇u)` per voxel: central differences inside, one-sided at faces.
/// Each axis needs at least two voxels.
pub fn jacobian_det(field: &DisplacementField) -> Volume3D {
    let [d, h, w] = field.dims();
    let n = field.voxels();
    let u = field.data();
    let ext = [w, h, d];
    let strides = [1, w, h * w];
    let mut out = Vec::with_capacity(n);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let pos = [x, y, z];
                let i = (z * h + y) * w + x;
                // j[c][a] = ∂u_c / ∂x_a
                let mut j = [[0.0f64; 3]; 3];
                for a in 0..3 {
                    if ext[a] < 2 {
                        continue;
                    }
                    let (lo, hi, span) = if pos[a] == 0 {
                        (i, i + strides[a], 1.0)
                    } else if pos[a] == ext[a] - 1 {
                        (i - strides[a], i, 1.0)
                    } else {
                        (i - strides[a], i + strides[a], 2.0)
                    };
                    for (c, row) in j.iter_mut().enumerate() {
                        row[a] = (u[c * n + hi] - u[c * n + lo]) / span;
                    }
                }
                for (c, row) in j.iter_mut().enumerate() {
                    row[c] += 1.0;
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                out.push(det as f32);
            }
        }
    }
    Volume3D::new(Grid::isotropic([d, h, w]), out).expect("determinants of a finite field are finite")
}

/// Fraction of voxels with `det ≤ 0`.
pub fn neg_jacobian_fraction(det: &Volume3D) -> f64 {
    if det.is_empty() {
        return 0.0;
    }
    det.data().iter().filter(|&&v| v <= 0.0).count() as f64 / det.len() as f64
}

/// [`neg_jacobian_fraction`] over voxels at least one voxel away from every
/// face, where central differences apply.
pub fn interior_neg_jacobian_fraction(det: &Volume3D) -> f64 {
    let [d, h, w] = det.dims();
    let inner = |n: usize| if n > 2 { 1..n - 1 } else { 0..n };
    let (mut neg, mut total) = (0usize, 0usize);
    for z in inner(d) {
        for y in inner(h) {
            for x in inner(w) {
                total += 1;
                if det.at(x, y, z) <= 0.0 {
                    neg += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        neg as f64 / total as f64
    }
}

/// Full score of one registered case: landmark errors with and without the
/// field, and the folding fraction of the field's interior.
pub fn score_case(
    fixed: &LandmarkSet,
    moving: &LandmarkSet,
    field: &DisplacementField,
    grid: &Grid,
) -> Result<CaseScore> {
    let zero = DisplacementField::zeros(field.dims());
    let before = landmark_errors(fixed, moving, &zero, grid.spacing, grid.origin)?;
    let after = landmark_errors(fixed, moving, field, grid.spacing, grid.origin)?;
    let s = summarize(&before, &after)?;
    Ok(CaseScore {
        errors: after,
        median_ae: s.median_ae,
        mean_ae: s.mean_ae,
        robustness: s.robustness,
        neg_jacobian_fraction: interior_neg_jacobian_fraction(&jacobian_det(field)),
    })
}

/// Across-case aggregates: median of per-case medians and the median of all
/// landmark errors pooled together.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub cases: usize,
    pub median_of_medians: f64,
    pub pooled_median: f64,
    pub mean_robustness: f64,
    pub mean_neg_jacobian_fraction: f64,
}

pub fn summarize_suite(scores: &[CaseScore]) -> Result<SuiteSummary> {
    if scores.is_empty() {
        return Err(Error::Empty("case scores"));
    }
    let medians: Vec<f64> = scores.iter().map(|s| s.median_ae).collect();
    let pooled: Vec<f64> = scores.iter().flat_map(|s| s.errors.iter().copied()).collect();
    let k = scores.len() as f64;
    Ok(SuiteSummary {
        cases: scores.len(),
        median_of_medians: median(&medians)?,
        pooled_median: median(&pooled)?,
        mean_robustness: scores.iter().map(|s| s.robustness).sum::<f64>() / k,
        mean_neg_jacobian_fraction: scores.iter().map(|s| s.neg_jacobian_fraction).sum::<f64>() / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::Landmark;
    use crate::warp::{affine_to_field, AffineTransform};
    use proptest::prelude::*;

    fn set(points: &[(i64, [f64; 3])]) -> LandmarkSet {
        LandmarkSet::new(points.iter().map(|&(id, pos)| Landmark { id, pos }).collect()).unwrap()
    }

    #[test]
    fn three_four_five() {
        let f = set(&[(1, [1.0, 1.0, 1.0]), (2, [2.0, 3.0, 1.0])]);
        let m = set(&[(2, [5.0, 7.0, 1.0]), (1, [4.0, 5.0, 1.0])]);
        let e = landmark_errors(&f, &m, &DisplacementField::zeros([4, 4, 4]), [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(e, vec![5.0, 5.0]);
        assert_eq!(landmark_errors(&f, &f, &DisplacementField::zeros([4, 4, 4]), [1.0; 3], [0.0; 3]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn id_mismatch_lists_missing() {
        let f = set(&[(1, [0.0; 3]), (2, [0.0; 3])]);
        let m = set(&[(1, [0.0; 3]), (3, [0.0; 3])]);
        match landmark_errors(&f, &m, &DisplacementField::zeros([2, 2, 2]), [1.0; 3], [0.0; 3]) {
            Err(Error::LandmarkMismatch {
                missing_in_moving,
                missing_in_fixed,
            }) => {
                assert_eq!(missing_in_moving, vec![2]);
                assert_eq!(missing_in_fixed, vec![3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[5.0, 5.0], &[1.0, 9.0]).unwrap();
        assert_eq!((s.median_ae, s.mean_ae, s.robustness), (5.0, 5.0, 0.5));
        assert_eq!(summarize(&[2.0, 3.0], &[2.0, 3.0]).unwrap().robustness, 0.0);
        assert_eq!(summarize(&[2.0, 3.0], &[1.0, 1.5]).unwrap().robustness, 1.0);
        assert!(matches!(summarize(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn jacobian_examples() {
        let one = jacobian_det(&DisplacementField::zeros([4, 5, 6]));
        assert!(one.data().iter().all(|&v| v == 1.0));
        assert_eq!(neg_jacobian_fraction(&one), 0.0);
        let lin = [[1.2, 0.1, 0.0], [-0.05, 0.9, 0.2], [0.1, 0.0, 1.1]];
        let a = AffineTransform::new(lin, [0.3, -1.0, 2.0]).unwrap();
        let det = jacobian_det(&affine_to_field(&a, [6, 6, 6]));
        for v in det.data() {
            assert!((*v as f64 - a.det()).abs() < 1e-6);
        }
        let flip = DisplacementField::from_fn([5, 5, 5], |p| [-2.0 * p[0], 0.0, 0.0]);
        let det = jacobian_det(&flip);
        assert_eq!(det.at(2, 2, 2), -1.0);
        assert_eq!(interior_neg_jacobian_fraction(&det), 1.0);
    }

    #[test]
    fn half_negative() {
        let v = Volume3D::new(Grid::isotropic([1, 2, 2]), vec![1.0, -1.0, 0.5, 0.0]).unwrap();
        assert_eq!(neg_jacobian_fraction(&v), 0.5);
    }

    #[test]
    fn suite_aggregates() {
        let a = CaseScore { errors: vec![1.0, 2.0, 3.0], median_ae: 2.0, ..Default::default() };
        let b = CaseScore { errors: vec![10.0], median_ae: 10.0, ..Default::default() };
        let s = summarize_suite(&[a, b]).unwrap();
        assert_eq!(s.median_of_medians, 6.0);
        assert_eq!(s.pooled_median, 2.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn robustness_scale_invariant(pairs in prop::collection::vec((0.0f64..20.0, 0.0f64..20.0), 1..20), k in 0.01f64..100.0) {
            let (b, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let s1 = summarize(&b, &a).unwrap();
            let bs: Vec<f64> = b.iter().map(|v| v * k).collect();
            let as_: Vec<f64> = a.iter().map(|v| v * k).collect();
            prop_assert_eq!(s1.robustness, summarize(&bs, &as_).unwrap().robustness);
            prop_assert!((0.0..=1.0).contains(&s1.robustness));
        }

        #[test]
        fn median_permutation_invariant(mut v in prop::collection::vec(0.0f64..50.0, 1..30), seed in any::<u64>()) {
            let m = median(&v).unwrap();
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(m, median(&v).unwrap());
        }

        #[test]
        fn small_smooth_fields_do_not_fold(a in prop::array::uniform3(-0.09f64..0.09), f in 0.1f64..1.0) {
            let u = DisplacementField::from_fn([6, 6, 6], |p| [
                a[0] * (f * p[1]).sin() / 1.0,
                a[1] * (f * p[2]).cos(),
                a[2] * (f * p[0]).sin(),
            ]);
            prop_assert!(u.max_norm() < 0.1 * 3f64.sqrt());
            prop_assert_eq!(neg_jacobian_fraction(&jacobian_det(&u)), 0.0);
        }

        #[test]
        fn commuting_translations_have_unit_jacobian(t1 in prop::array::uniform3(-3.0f64..3.0), t2 in prop::array::uniform3(-3.0f64..3.0)) {
            let a = crate::warp::compose_fields(
                &DisplacementField::from_fn([5, 5, 5], |_| t1),
                &DisplacementField::from_fn([5, 5, 5], |_| t2),
            ).unwrap();
            prop_assert!(jacobian_det(&a).data().iter().all(|&v| v == 1.0));
        }
    }
}
